// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <atomic>
#include <chrono>
#include <cstdint>
#include <filesystem>
#include <random>
#include <string>
#include <vector>

#include "oodkit/tensor.hpp"

namespace oodkit::test {

/// Scratch directory removed on destruction.
class TempDir {
 public:
  TempDir() {
    static std::atomic<int> counter{0};
    const auto stamp = std::chrono::steady_clock::now().time_since_epoch().count();
    path_ = std::filesystem::temp_directory_path() /
            ("oodkit-test-" + std::to_string(stamp) + "-" + std::to_string(counter++));
    std::filesystem::create_directories(path_);
  }
  ~TempDir() {
    std::error_code ec;
    std::filesystem::remove_all(path_, ec);
  }
  TempDir(const TempDir&) = delete;
  TempDir& operator=(const TempDir&) = delete;

  const std::filesystem::path& path() const noexcept { return path_; }
  std::filesystem::path operator/(const std::string& name) const { return path_ / name; }

 private:
  std::filesystem::path path_;
};

inline Tensor random_f32(std::mt19937_64& rng, std::uint64_t rows, std::uint64_t cols, double scale = 1.0) {
  std::normal_distribution<double> normal;
  std::vector<float> data(rows * cols);
  for (auto& v : data) v = static_cast<float>(scale * normal(rng));
  return Tensor::f32({rows, cols}, std::move(data));
}

inline std::vector<double> random_vector(std::mt19937_64& rng, std::size_t n, double scale = 1.0) {
  std::normal_distribution<double> normal;
  std::vector<double> v(n);
  for (auto& x : v) x = scale * normal(rng);
  return v;
}

}  // namespace oodkit::test
