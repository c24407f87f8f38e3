// SPDX-License-Identifier: Apache-2.0
//
// ActFun: the rectifier averaged over logistic input noise of scale 1/beta.
//
//   g(x) = E[max(x - eps, 0)],  eps ~ p(eps) = beta / (e^{beta eps/2} + e^{-beta eps/2})^2
//        = (1/beta) log(1 + e^{beta x})
//
// g'(x) is the logistic CDF 1 / (1 + e^{-beta x}). As beta grows, g converges
// uniformly to the rectifier with sup gap ln(2)/beta at x = 0.
#pragma once

#include <cmath>
#include <cstdint>
#include <random>
#include <sstream>
#include <string>

#include <Eigen/Core>

#include "oodkit/error.hpp"
#include "oodkit/linalg.hpp"
#include "oodkit/parallel.hpp"
#include "oodkit/tensor.hpp"

namespace oodkit {

/// Which nonlinearity sits in front of the classifier head.
struct ActivationSpec {
  enum class Kind { rectifier, actfun };

  Kind kind = Kind::rectifier;
  double beta = 1.0;

  static ActivationSpec rectifier() { return {}; }

  static ActivationSpec actfun(double beta = 1.0) {
    if (!(beta > 0.0) || !std::isfinite(beta)) {
      throw Error(ErrorCode::invalid_argument, "beta must be positive and finite");
    }
    return {Kind::actfun, beta};
  }

  bool is_actfun() const noexcept { return kind == Kind::actfun; }

  std::string describe() const {
    if (!is_actfun()) return "relu";
    std::ostringstream s;
    s.precision(17);
    s << "actfun(beta=" << beta << ")";
    return s.str();
  }

  friend bool operator==(const ActivationSpec& a, const ActivationSpec& b) noexcept {
    return a.kind == b.kind && (a.kind == Kind::rectifier || a.beta == b.beta);
  }
};

namespace actfun {

inline double rectifier(double x) noexcept { return x > 0.0 ? x : 0.0; }

/// Softplus with smoothness beta, written so that exp never sees a positive argument.
inline double actfun_value(double x, double beta) noexcept {
  return rectifier(x) + std::log1p(std::exp(-beta * std::abs(x))) / beta;
}

/// d/dx actfun_value: the logistic CDF with scale 1/beta.
inline double actfun_derivative(double x, double beta) noexcept {
  const double t = beta * x;
  if (t >= 0.0) return 1.0 / (1.0 + std::exp(-t));
  const double e = std::exp(t);
  return e / (1.0 + e);
}

/// Logistic noise with scale 1/beta.
struct NoiseModel {
  double beta = 1.0;

  explicit NoiseModel(double b) : beta(b) {
    if (!(beta > 0.0) || !std::isfinite(beta)) {
      throw Error(ErrorCode::invalid_argument, "beta must be positive and finite");
    }
  }

  double density(double eps) const noexcept {
    // beta / (2 cosh(beta eps / 2))^2, evaluated via exp(-|.|) to stay finite.
    const double a = std::exp(-0.5 * beta * std::abs(eps));
    const double denom = 1.0 + a * a;
    return beta * a * a / (denom * denom);
  }

  double cdf(double x) const noexcept { return actfun_derivative(x, beta); }

  double quantile(double u) const {
    if (!(u > 0.0 && u < 1.0)) {
      throw Error(ErrorCode::invalid_argument, "quantile level must lie in (0, 1)");
    }
    return std::log(u / (1.0 - u)) / beta;
  }
};

inline double noise_quantile(double u, double beta) { return NoiseModel(beta).quantile(u); }

/// Uniform draw in the open interval (0, 1) from the top 53 bits of the engine.
inline double open_uniform(std::mt19937_64& rng) noexcept {
  return (static_cast<double>(rng() >> 11) + 0.5) * 0x1.0p-53;
}

/// Monte Carlo estimate of E[rectifier(x - eps)] with eps drawn by inverse CDF.
inline double expectation_oracle(double x, double beta, std::uint64_t n_samples, std::uint64_t seed) {
  if (n_samples == 0) throw Error(ErrorCode::invalid_argument, "n_samples must be at least 1");
  const NoiseModel noise(beta);
  std::mt19937_64 rng(seed);
  double sum = 0.0;
  for (std::uint64_t i = 0; i < n_samples; ++i) {
    sum += rectifier(x - noise.quantile(open_uniform(rng)));
  }
  return sum / static_cast<double>(n_samples);
}

inline double activate(double x, const ActivationSpec& spec) noexcept {
  return spec.is_actfun() ? actfun_value(x, spec.beta) : rectifier(x);
}

inline double activate_derivative(double x, const ActivationSpec& spec) noexcept {
  if (spec.is_actfun()) return actfun_derivative(x, spec.beta);
  return x > 0.0 ? 1.0 : 0.0;
}

template <typename Derived>
Eigen::MatrixXd apply(const Eigen::MatrixBase<Derived>& z, const ActivationSpec& spec) {
  return z.unaryExpr([&](double v) { return activate(v, spec); });
}

/// Elementwise activation of an N x D pre-activation tensor.
inline Tensor apply_activation(const Tensor& z, const ActivationSpec& spec) {
  if (z.rank() != 2) throw Error(ErrorCode::bad_shape, "activation input must be rank 2");
  const auto in = z.f32_data();
  std::vector<float> out(in.size());
  for (std::size_t i = 0; i < in.size(); ++i) out[i] = static_cast<float>(activate(in[i], spec));
  return Tensor::f32(z.shape(), std::move(out));
}

/// Head applied to already-activated rows: A W^T + 1 b^T. Each row goes
/// through the same matrix-vector product, so a sample's logits do not depend
/// on the batch it arrives in.
inline Eigen::MatrixXd apply_head(const Eigen::MatrixXd& a, const ClassifierHead& head) {
  if (static_cast<std::size_t>(a.cols()) != head.dim()) {
    throw Error(ErrorCode::dimension_mismatch, "features have " + std::to_string(a.cols()) +
                                                   " columns, head expects " + std::to_string(head.dim()));
  }
  const Eigen::MatrixXd w = to_matrix(head.weights());
  const Eigen::VectorXd b = to_vector(head.bias());
  Eigen::MatrixXd logits(a.rows(), w.rows());
  parallel_for(static_cast<std::size_t>(a.rows()), [&](std::size_t i) {
    const auto r = static_cast<Eigen::Index>(i);
    const Eigen::VectorXd l = w * a.row(r).transpose() + b;
    logits.row(r) = l.transpose();
  });
  return logits;
}

/// Head applied to activated features, in double: act(Z) W^T + 1 b^T.
inline Eigen::MatrixXd logits_from_features(const Eigen::MatrixXd& z, const ActivationSpec& spec,
                                            const ClassifierHead& head) {
  return apply_head(apply(z, spec), head);
}

inline Tensor recompute_logits(const Tensor& z, const ActivationSpec& spec, const ClassifierHead& head) {
  if (z.rank() != 2) throw Error(ErrorCode::bad_shape, "features must be rank 2");
  return to_tensor(logits_from_features(to_matrix(z), spec, head));
}

}  // namespace actfun
}  // namespace oodkit
