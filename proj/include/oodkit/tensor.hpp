// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cmath>
#include <cstdint>
#include <cstring>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "oodkit/error.hpp"

namespace oodkit {

enum class DType : std::uint8_t { f32 = 1, i64 = 2 };

inline constexpr std::uint64_t kMaxElements = std::uint64_t{1} << 48;

inline const char* to_string(DType dtype) noexcept {
  return dtype == DType::f32 ? "f32" : "i64";
}

/// Product of `shape`, rejecting empty shapes and anything above kMaxElements.
/// The running product is checked before every multiply, so it cannot wrap.
inline std::uint64_t checked_numel(std::span<const std::uint64_t> shape) {
  if (shape.empty()) throw Error(ErrorCode::bad_shape, "rank must be at least 1");
  std::uint64_t n = 1;
  bool zero = false;
  for (std::uint64_t d : shape) {
    if (d == 0) {
      zero = true;
      continue;
    }
    if (d > kMaxElements || n > kMaxElements / d) {
      throw Error(ErrorCode::oversized, "element count exceeds 2^48");
    }
    n *= d;
  }
  return zero ? 0 : n;
}

/// Dense row-major tensor of f32 or i64. Immutable once built.
class Tensor {
 public:
  using Shape = std::vector<std::uint64_t>;

  Tensor() : Tensor(DType::f32, {0}, {}, {}) {}

  static Tensor f32(Shape shape, std::vector<float> data) {
    return Tensor(DType::f32, std::move(shape), std::move(data), {});
  }

  static Tensor i64(Shape shape, std::vector<std::int64_t> data) {
    return Tensor(DType::i64, std::move(shape), {}, std::move(data));
  }

  DType dtype() const noexcept { return dtype_; }
  const Shape& shape() const noexcept { return shape_; }
  std::size_t rank() const noexcept { return shape_.size(); }
  std::uint64_t numel() const noexcept { return numel_; }

  std::size_t rows() const noexcept { return static_cast<std::size_t>(shape_.front()); }
  std::size_t cols() const noexcept {
    return shape_.size() >= 2 ? static_cast<std::size_t>(shape_[1]) : 1;
  }

  std::span<const float> f32_data() const {
    if (dtype_ != DType::f32) throw Error(ErrorCode::bad_dtype, "tensor is not f32");
    return f32_;
  }

  std::span<const std::int64_t> i64_data() const {
    if (dtype_ != DType::i64) throw Error(ErrorCode::bad_dtype, "tensor is not i64");
    return i64_;
  }

  /// Row `i` of a rank-2 f32 tensor.
  std::span<const float> row(std::size_t i) const {
    const std::size_t c = cols();
    return f32_data().subspan(i * c, c);
  }

  /// Raw little-endian-host payload bytes.
  std::span<const unsigned char> bytes() const noexcept {
    if (dtype_ == DType::f32) {
      return {reinterpret_cast<const unsigned char*>(f32_.data()), f32_.size() * sizeof(float)};
    }
    return {reinterpret_cast<const unsigned char*>(i64_.data()), i64_.size() * sizeof(std::int64_t)};
  }

  bool all_finite() const noexcept {
    if (dtype_ != DType::f32) return true;
    for (float v : f32_) {
      if (!std::isfinite(v)) return false;
    }
    return true;
  }

  // Bitwise payload equality (NaN payloads compare by bits).
  friend bool operator==(const Tensor& a, const Tensor& b) noexcept {
    if (a.dtype_ != b.dtype_ || a.shape_ != b.shape_) return false;
    const auto x = a.bytes();
    const auto y = b.bytes();
    return x.size() == y.size() && (x.empty() || std::memcmp(x.data(), y.data(), x.size()) == 0);
  }

 private:
  Tensor(DType dtype, Shape shape, std::vector<float> f, std::vector<std::int64_t> i)
      : dtype_(dtype), shape_(std::move(shape)), f32_(std::move(f)), i64_(std::move(i)) {
    numel_ = checked_numel(shape_);
    const std::size_t len = dtype_ == DType::f32 ? f32_.size() : i64_.size();
    if (len != numel_) {
      throw Error(ErrorCode::bad_shape, "data length " + std::to_string(len) +
                                            " does not match shape product " +
                                            std::to_string(numel_));
    }
  }

  DType dtype_;
  Shape shape_;
  std::uint64_t numel_ = 0;
  std::vector<float> f32_;
  std::vector<std::int64_t> i64_;
};

enum class SplitRole { id_train, id_test, ood };

inline const char* to_string(SplitRole role) noexcept {
  switch (role) {
    case SplitRole::id_train: return "id_train";
    case SplitRole::id_test: return "id_test";
    case SplitRole::ood: return "ood";
  }
  return "ood";
}

inline SplitRole parse_split_role(std::string_view s) {
  if (s == "id_train") return SplitRole::id_train;
  if (s == "id_test") return SplitRole::id_test;
  if (s == "ood") return SplitRole::ood;
  throw Error(ErrorCode::parse, "unknown split role '" + std::string(s) + "'");
}

/// Penultimate pre-activations for one split, with optional cached logits
/// and labels.
class FeatureBundle {
 public:
  FeatureBundle(std::string name, SplitRole role, Tensor features,
                std::optional<Tensor> logits = std::nullopt,
                std::optional<Tensor> labels = std::nullopt)
      : name_(std::move(name)),
        role_(role),
        features_(std::move(features)),
        logits_(std::move(logits)),
        labels_(std::move(labels)) {
    if (features_.dtype() != DType::f32 || features_.rank() != 2) {
      throw Error(ErrorCode::bad_shape, "features must be a rank-2 f32 tensor");
    }
    const std::uint64_t n = features_.shape()[0];
    if (logits_) {
      if (logits_->dtype() != DType::f32 || logits_->rank() != 2) {
        throw Error(ErrorCode::bad_shape, "logits must be a rank-2 f32 tensor");
      }
      if (logits_->shape()[0] != n) {
        throw Error(ErrorCode::dimension_mismatch, "logits have " +
                                                       std::to_string(logits_->shape()[0]) +
                                                       " rows, features have " + std::to_string(n));
      }
    }
    if (labels_) {
      if (labels_->dtype() != DType::i64 || labels_->rank() != 1) {
        throw Error(ErrorCode::bad_shape, "labels must be a rank-1 i64 tensor");
      }
      if (labels_->shape()[0] != n) {
        throw Error(ErrorCode::dimension_mismatch, "labels have " +
                                                       std::to_string(labels_->shape()[0]) +
                                                       " entries, features have " + std::to_string(n));
      }
      const std::int64_t classes =
          logits_ ? static_cast<std::int64_t>(logits_->cols()) : std::int64_t{-1};
      for (std::int64_t y : labels_->i64_data()) {
        if (y < 0 || (classes > 0 && y >= classes)) {
          throw Error(ErrorCode::dimension_mismatch, "label " + std::to_string(y) + " out of range");
        }
      }
    }
  }

  const std::string& name() const noexcept { return name_; }
  SplitRole role() const noexcept { return role_; }
  const Tensor& features() const noexcept { return features_; }
  const std::optional<Tensor>& logits() const noexcept { return logits_; }
  const std::optional<Tensor>& labels() const noexcept { return labels_; }

  std::size_t size() const noexcept { return features_.rows(); }
  std::size_t dim() const noexcept { return features_.cols(); }

 private:
  std::string name_;
  SplitRole role_;
  Tensor features_;
  std::optional<Tensor> logits_;
  std::optional<Tensor> labels_;
};

/// Final linear layer: logits = W a + b with W of shape C x D.
class ClassifierHead {
 public:
  ClassifierHead(Tensor weights, Tensor bias) : weights_(std::move(weights)), bias_(std::move(bias)) {
    if (weights_.dtype() != DType::f32 || weights_.rank() != 2) {
      throw Error(ErrorCode::bad_shape, "head weights must be a rank-2 f32 tensor");
    }
    if (bias_.dtype() != DType::f32 || bias_.rank() != 1) {
      throw Error(ErrorCode::bad_shape, "head bias must be a rank-1 f32 tensor");
    }
    if (bias_.shape()[0] != weights_.shape()[0]) {
      throw Error(ErrorCode::dimension_mismatch, "bias length differs from weight rows");
    }
    if (weights_.shape()[0] < 2) {
      throw Error(ErrorCode::bad_shape, "head needs at least two classes");
    }
  }

  const Tensor& weights() const noexcept { return weights_; }
  const Tensor& bias() const noexcept { return bias_; }
  std::size_t n_classes() const noexcept { return weights_.rows(); }
  std::size_t dim() const noexcept { return weights_.cols(); }

 private:
  Tensor weights_;
  Tensor bias_;
};

}  // namespace oodkit
