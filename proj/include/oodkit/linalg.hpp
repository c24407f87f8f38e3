// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <span>
#include <vector>

#include <Eigen/Core>

#include "oodkit/error.hpp"
#include "oodkit/tensor.hpp"

namespace oodkit {

using RowMatrixXf = Eigen::Matrix<float, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

/// Widens a rank-2 f32 tensor to a double matrix.
inline Eigen::MatrixXd to_matrix(const Tensor& t) {
  if (t.rank() != 2) throw Error(ErrorCode::bad_shape, "expected a rank-2 tensor");
  const auto data = t.f32_data();
  Eigen::Map<const RowMatrixXf> m(data.data(), static_cast<Eigen::Index>(t.rows()),
                                  static_cast<Eigen::Index>(t.cols()));
  return m.cast<double>();
}

inline Eigen::VectorXd to_vector(const Tensor& t) {
  const auto data = t.f32_data();
  Eigen::VectorXd v(static_cast<Eigen::Index>(data.size()));
  for (std::size_t i = 0; i < data.size(); ++i) v(static_cast<Eigen::Index>(i)) = data[i];
  return v;
}

inline Eigen::VectorXd to_vector(std::span<const double> s) {
  return Eigen::Map<const Eigen::VectorXd>(s.data(), static_cast<Eigen::Index>(s.size()));
}

inline std::vector<double> to_std(const Eigen::VectorXd& v) {
  return {v.data(), v.data() + v.size()};
}

/// Narrows a double matrix to a rank-2 f32 tensor.
inline Tensor to_tensor(const Eigen::MatrixXd& m) {
  std::vector<float> data(static_cast<std::size_t>(m.size()));
  for (Eigen::Index i = 0; i < m.rows(); ++i) {
    for (Eigen::Index j = 0; j < m.cols(); ++j) {
      data[static_cast<std::size_t>(i * m.cols() + j)] = static_cast<float>(m(i, j));
    }
  }
  return Tensor::f32({static_cast<std::uint64_t>(m.rows()), static_cast<std::uint64_t>(m.cols())},
                     std::move(data));
}

inline Tensor to_tensor(const Eigen::VectorXd& v) {
  std::vector<float> data(static_cast<std::size_t>(v.size()));
  for (Eigen::Index i = 0; i < v.size(); ++i) data[static_cast<std::size_t>(i)] = static_cast<float>(v(i));
  return Tensor::f32({static_cast<std::uint64_t>(v.size())}, std::move(data));
}

}  // namespace oodkit
