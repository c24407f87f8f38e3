// SPDX-License-Identifier: Apache-2.0
//
// Post-hoc OOD scorers. Every score is oriented so that larger means "more
// in-distribution".
#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <limits>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include <Eigen/Cholesky>
#include <Eigen/Core>
#include <Eigen/Eigenvalues>
#include <Eigen/QR>

#include "oodkit/actfun.hpp"
#include "oodkit/error.hpp"
#include "oodkit/hash.hpp"
#include "oodkit/linalg.hpp"
#include "oodkit/parallel.hpp"
#include "oodkit/tensor.hpp"

namespace oodkit::scoring {

enum class Method { msp, maxlogit, energy, react, gradnorm, mahalanobis, kl_matching, vim, residual };

inline constexpr std::array<Method, 9> kAllMethods = {
    Method::msp,      Method::maxlogit,    Method::energy,      Method::react,   Method::gradnorm,
    Method::mahalanobis, Method::kl_matching, Method::vim, Method::residual};

inline const char* to_string(Method m) noexcept {
  switch (m) {
    case Method::msp: return "msp";
    case Method::maxlogit: return "maxlogit";
    case Method::energy: return "energy";
    case Method::react: return "react";
    case Method::gradnorm: return "gradnorm";
    case Method::mahalanobis: return "mahalanobis";
    case Method::kl_matching: return "kl_matching";
    case Method::vim: return "vim";
    case Method::residual: return "residual";
  }
  return "?";
}

inline Method parse_method(std::string_view s) {
  for (Method m : kAllMethods) {
    if (s == to_string(m)) return m;
  }
  throw Error(ErrorCode::usage, "unknown method '" + std::string(s) + "'");
}

/// Methods that recompute logits from features and so require the head.
inline bool needs_head(Method m) noexcept {
  return m == Method::react || m == Method::vim || m == Method::residual;
}

struct ScorerConfig {
  Method method = Method::energy;
  double temperature = 1.0;
  double react_percentile = 90.0;
  std::optional<std::size_t> vim_subspace_dim;  // nullopt = auto
  double covariance_ridge = 1e-6;

  void validate(std::optional<std::size_t> dim = std::nullopt) const {
    if (!(temperature > 0.0) || !std::isfinite(temperature)) {
      throw Error(ErrorCode::invalid_argument, "temperature must be positive");
    }
    if (!(react_percentile > 0.0 && react_percentile <= 100.0)) {
      throw Error(ErrorCode::invalid_argument, "react percentile must lie in (0, 100]");
    }
    if (!(covariance_ridge >= 0.0) || !std::isfinite(covariance_ridge)) {
      throw Error(ErrorCode::invalid_argument, "covariance ridge must be nonnegative");
    }
    if (vim_subspace_dim && dim && (*vim_subspace_dim == 0 || *vim_subspace_dim >= *dim)) {
      throw Error(ErrorCode::invalid_argument, "subspace dimension must satisfy 0 < K < D");
    }
  }
};

/// K = max(1, round(D/4)), capped at D - 1.
inline std::size_t default_subspace_dim(std::size_t dim) {
  if (dim < 2) throw Error(ErrorCode::invalid_argument, "subspace scoring needs D >= 2");
  const auto k = std::max<std::size_t>(1, static_cast<std::size_t>(std::llround(static_cast<double>(dim) / 4.0)));
  return std::min(k, dim - 1);
}

struct GaussianStats {
  Eigen::MatrixXd means;      // C x D
  Eigen::MatrixXd precision;  // D x D, inverse of the ridged pooled covariance
};

struct SubspaceStats {
  Eigen::VectorXd origin;  // D
  Eigen::MatrixXd basis;   // D x K, orthonormal columns
  double alpha = 0.0;
};

struct FittedStats {
  std::optional<double> react_threshold;
  std::optional<GaussianStats> gaussian;
  std::optional<Eigen::MatrixXd> kl_templates;  // one template per row
  std::optional<SubspaceStats> subspace;
  std::string fingerprint;
};

// ---------------------------------------------------------------------------
// Logit-only scorers

inline double logsumexp(std::span<const double> v) {
  if (v.empty()) throw Error(ErrorCode::invalid_argument, "logsumexp of an empty vector");
  const double m = *std::max_element(v.begin(), v.end());
  double s = 0.0;
  for (double x : v) s += std::exp(x - m);
  return m + std::log(s);
}

inline std::vector<double> softmax(std::span<const double> logits) {
  if (logits.empty()) return {};
  const double m = *std::max_element(logits.begin(), logits.end());
  std::vector<double> p(logits.size());
  double s = 0.0;
  for (std::size_t i = 0; i < logits.size(); ++i) {
    p[i] = std::exp(logits[i] - m);
    s += p[i];
  }
  for (double& x : p) x /= s;
  return p;
}

inline double score_msp(std::span<const double> logits) {
  const auto p = softmax(logits);
  return *std::max_element(p.begin(), p.end());
}

inline double score_maxlogit(std::span<const double> logits) {
  return *std::max_element(logits.begin(), logits.end());
}

/// T * logsumexp(logits / T).
inline double score_energy(std::span<const double> logits, double temperature = 1.0) {
  std::vector<double> scaled(logits.begin(), logits.end());
  for (double& x : scaled) x /= temperature;
  return temperature * logsumexp(scaled);
}

/// L1 norm of the last-layer gradient (p - u) a^T of KL(u || softmax(logits/T)),
/// which factorizes into ||p - u||_1 * ||a||_1.
inline double score_gradnorm(std::span<const double> logits, std::span<const double> activation,
                             double temperature = 1.0) {
  std::vector<double> scaled(logits.begin(), logits.end());
  for (double& x : scaled) x /= temperature;
  const auto p = softmax(scaled);
  const double u = 1.0 / static_cast<double>(p.size());
  double dp = 0.0;
  for (double x : p) dp += std::abs(x - u);
  double da = 0.0;
  for (double x : activation) da += std::abs(x);
  return dp * da;
}

// ---------------------------------------------------------------------------
// ReAct

/// p-th percentile with linear interpolation between order statistics.
inline double percentile(std::vector<double> values, double p) {
  if (values.empty()) throw Error(ErrorCode::invalid_argument, "percentile of an empty set");
  std::sort(values.begin(), values.end());
  const double pos = p / 100.0 * static_cast<double>(values.size() - 1);
  const auto lo = static_cast<std::size_t>(std::floor(pos));
  const std::size_t hi = std::min(lo + 1, values.size() - 1);
  const double frac = pos - static_cast<double>(lo);
  return values[lo] + frac * (values[hi] - values[lo]);
}

inline double fit_react_threshold(const FeatureBundle& id_train, const ActivationSpec& spec, double p) {
  if (id_train.size() == 0 || id_train.dim() == 0) {
    throw Error(ErrorCode::invalid_argument, "react threshold needs a non-empty bundle");
  }
  const auto z = id_train.features().f32_data();
  std::vector<double> acts(z.size());
  for (std::size_t i = 0; i < z.size(); ++i) acts[i] = actfun::activate(z[i], spec);
  return percentile(std::move(acts), p);
}

/// Energy of the head applied to activations clipped at `threshold`.
inline double score_react(std::span<const double> z, const ActivationSpec& spec, const ClassifierHead& head,
                          double threshold, double temperature = 1.0) {
  if (z.size() != head.dim()) throw Error(ErrorCode::dimension_mismatch, "feature width differs from head");
  Eigen::MatrixXd a(1, static_cast<Eigen::Index>(z.size()));
  for (std::size_t j = 0; j < z.size(); ++j) {
    a(0, static_cast<Eigen::Index>(j)) = std::min(actfun::activate(z[j], spec), threshold);
  }
  const Eigen::RowVectorXd logits = actfun::apply_head(a, head).row(0);
  return score_energy({logits.data(), static_cast<std::size_t>(logits.size())}, temperature);
}

// ---------------------------------------------------------------------------
// Mahalanobis

inline std::vector<std::size_t> class_indices(const FeatureBundle& b) {
  if (!b.labels()) throw Error(ErrorCode::missing_labels, "bundle '" + b.name() + "' has no labels");
  std::vector<std::size_t> out;
  for (std::int64_t y : b.labels()->i64_data()) out.push_back(static_cast<std::size_t>(y));
  return out;
}

/// Class means and the inverse of the pooled within-class covariance plus
/// ridge * (trace / D) * I.
inline GaussianStats fit_gaussian_stats(const Eigen::MatrixXd& features, std::span<const std::size_t> labels,
                                        double ridge) {
  const auto n = features.rows();
  const auto d = features.cols();
  if (static_cast<std::size_t>(n) != labels.size()) {
    throw Error(ErrorCode::dimension_mismatch, "label count differs from sample count");
  }
  if (n == 0) throw Error(ErrorCode::invalid_argument, "no samples to fit");
  const std::size_t classes = *std::max_element(labels.begin(), labels.end()) + 1;
  std::vector<std::size_t> counts(classes, 0);
  Eigen::MatrixXd means = Eigen::MatrixXd::Zero(static_cast<Eigen::Index>(classes), d);
  for (Eigen::Index i = 0; i < n; ++i) {
    means.row(static_cast<Eigen::Index>(labels[i])) += features.row(i);
    ++counts[labels[i]];
  }
  for (std::size_t c = 0; c < classes; ++c) {
    if (counts[c] < 2) {
      throw Error(ErrorCode::empty_class, "class " + std::to_string(c) + " has fewer than two samples", c);
    }
    means.row(static_cast<Eigen::Index>(c)) /= static_cast<double>(counts[c]);
  }
  Eigen::MatrixXd centered(n, d);
  for (Eigen::Index i = 0; i < n; ++i) centered.row(i) = features.row(i) - means.row(static_cast<Eigen::Index>(labels[i]));
  Eigen::MatrixXd cov = centered.transpose() * centered / static_cast<double>(n - static_cast<Eigen::Index>(classes));
  cov.diagonal().array() += ridge * cov.trace() / static_cast<double>(d);

  Eigen::LLT<Eigen::MatrixXd> llt(cov);
  if (llt.info() != Eigen::Success) {
    throw Error(ErrorCode::singular_covariance, "covariance is not positive definite; increase the ridge");
  }
  Eigen::MatrixXd precision = llt.solve(Eigen::MatrixXd::Identity(d, d));
  precision = 0.5 * (precision + precision.transpose());
  if (!precision.allFinite()) {
    throw Error(ErrorCode::singular_covariance, "covariance inverse is not finite; increase the ridge");
  }
  return {std::move(means), std::move(precision)};
}

inline GaussianStats fit_gaussian_stats(const FeatureBundle& id_train, const ActivationSpec& spec, double ridge) {
  const auto labels = class_indices(id_train);
  return fit_gaussian_stats(actfun::apply(to_matrix(id_train.features()), spec), labels, ridge);
}

inline double score_mahalanobis(std::span<const double> f, const GaussianStats& stats) {
  if (static_cast<Eigen::Index>(f.size()) != stats.means.cols()) {
    throw Error(ErrorCode::dimension_mismatch, "feature width differs from fitted means");
  }
  const Eigen::VectorXd x = to_vector(f);
  double best = std::numeric_limits<double>::infinity();
  for (Eigen::Index c = 0; c < stats.means.rows(); ++c) {
    const Eigen::VectorXd diff = x - stats.means.row(c).transpose();
    best = std::min(best, diff.dot(stats.precision * diff));
  }
  return -best;
}

inline double score_mahalanobis(std::span<const double> f, const FittedStats& stats) {
  if (!stats.gaussian) throw Error(ErrorCode::unfitted, "gaussian statistics are not fitted");
  return score_mahalanobis(f, *stats.gaussian);
}

// ---------------------------------------------------------------------------
// KL matching

enum class EmptyTemplatePolicy { error, drop };

inline std::size_t argmax(std::span<const double> v) {
  return static_cast<std::size_t>(std::max_element(v.begin(), v.end()) - v.begin());
}

/// Mean softmax row per predicted class. Rows are logits (N x C).
inline Eigen::MatrixXd fit_kl_templates(const Eigen::MatrixXd& logits,
                                        EmptyTemplatePolicy policy = EmptyTemplatePolicy::error) {
  const auto n = logits.rows();
  const auto c = logits.cols();
  if (n < c) throw Error(ErrorCode::invalid_argument, "KL templates need at least C samples");
  Eigen::MatrixXd sums = Eigen::MatrixXd::Zero(c, c);
  std::vector<std::size_t> counts(static_cast<std::size_t>(c), 0);
  for (Eigen::Index i = 0; i < n; ++i) {
    const Eigen::VectorXd row = logits.row(i).transpose();
    const auto p = softmax({row.data(), static_cast<std::size_t>(row.size())});
    const std::size_t k = argmax(p);
    for (Eigen::Index j = 0; j < c; ++j) sums(static_cast<Eigen::Index>(k), j) += p[static_cast<std::size_t>(j)];
    ++counts[k];
  }
  std::vector<Eigen::Index> kept;
  for (std::size_t k = 0; k < counts.size(); ++k) {
    if (counts[k] == 0) {
      if (policy == EmptyTemplatePolicy::error) {
        throw Error(ErrorCode::empty_class, "no sample is predicted as class " + std::to_string(k), k);
      }
      continue;
    }
    kept.push_back(static_cast<Eigen::Index>(k));
  }
  Eigen::MatrixXd templates(static_cast<Eigen::Index>(kept.size()), c);
  for (std::size_t r = 0; r < kept.size(); ++r) {
    templates.row(static_cast<Eigen::Index>(r)) =
        sums.row(kept[r]) / static_cast<double>(counts[static_cast<std::size_t>(kept[r])]);
  }
  return templates;
}

inline Eigen::MatrixXd fit_kl_templates(const FeatureBundle& id_train, const ActivationSpec& spec,
                                        const ClassifierHead& head,
                                        EmptyTemplatePolicy policy = EmptyTemplatePolicy::error) {
  return fit_kl_templates(actfun::logits_from_features(to_matrix(id_train.features()), spec, head), policy);
}

inline constexpr double kProbabilityFloor = 1e-12;

/// -min_c KL(d_c || p) with p the floored, renormalized softmax.
inline double score_kl_matching(std::span<const double> logits, const Eigen::MatrixXd& templates) {
  if (templates.rows() == 0) throw Error(ErrorCode::unfitted, "no KL templates");
  if (templates.cols() != static_cast<Eigen::Index>(logits.size())) {
    throw Error(ErrorCode::dimension_mismatch, "template width differs from logit count");
  }
  auto p = softmax(logits);
  double s = 0.0;
  for (double& x : p) {
    x = std::max(x, kProbabilityFloor);
    s += x;
  }
  for (double& x : p) x /= s;
  double best = std::numeric_limits<double>::infinity();
  for (Eigen::Index c = 0; c < templates.rows(); ++c) {
    double kl = 0.0;
    for (std::size_t j = 0; j < p.size(); ++j) {
      const double d = templates(c, static_cast<Eigen::Index>(j));
      if (d > 0.0) kl += d * std::log(d / p[j]);
    }
    best = std::min(best, kl);
  }
  return -best;
}

// ---------------------------------------------------------------------------
// Principal-subspace residual (ViM family)

inline double residual_norm(std::span<const double> f, const SubspaceStats& s) {
  if (static_cast<Eigen::Index>(f.size()) != s.origin.size()) {
    throw Error(ErrorCode::dimension_mismatch, "feature width differs from fitted origin");
  }
  const Eigen::VectorXd x = to_vector(f) - s.origin;
  return (x - s.basis * (s.basis.transpose() * x)).norm();
}

/// Fits origin, principal basis and alpha from activated features F (N x D)
/// and the head (W, b).
inline SubspaceStats fit_subspace(const Eigen::MatrixXd& features, const Eigen::MatrixXd& weights,
                                  const Eigen::VectorXd& bias, std::size_t k) {
  const auto n = features.rows();
  const auto d = features.cols();
  if (n == 0) throw Error(ErrorCode::invalid_argument, "no samples to fit");
  if (k == 0 || static_cast<Eigen::Index>(k) >= d) {
    throw Error(ErrorCode::invalid_argument, "subspace dimension must satisfy 0 < K < D");
  }
  if (weights.cols() != d) throw Error(ErrorCode::dimension_mismatch, "head width differs from features");

  SubspaceStats s;
  s.origin = Eigen::CompleteOrthogonalDecomposition<Eigen::MatrixXd>(weights).solve(-bias);

  const Eigen::MatrixXd x = features.rowwise() - s.origin.transpose();
  const Eigen::MatrixXd second_moment = x.transpose() * x / static_cast<double>(n);
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> eig(second_moment);
  if (eig.info() != Eigen::Success) throw Error(ErrorCode::singular_covariance, "eigendecomposition failed");
  // Eigenvalues come back ascending; take the top K, largest first.
  s.basis.resize(d, static_cast<Eigen::Index>(k));
  for (Eigen::Index j = 0; j < static_cast<Eigen::Index>(k); ++j) {
    s.basis.col(j) = eig.eigenvectors().col(d - 1 - j);
  }

  const Eigen::MatrixXd residual = x - (x * s.basis) * s.basis.transpose();
  const double total_residual = residual.rowwise().norm().sum();
  const double total_norm = x.rowwise().norm().sum();
  if (!(total_residual > 1e-9 * total_norm)) {
    throw Error(ErrorCode::zero_residual, "features lie inside the principal subspace; lower K");
  }
  Eigen::MatrixXd logits = features * weights.transpose();
  logits.rowwise() += bias.transpose();
  s.alpha = logits.rowwise().maxCoeff().sum() / total_residual;
  return s;
}

inline SubspaceStats fit_subspace(const FeatureBundle& id_train, const ActivationSpec& spec,
                                  const ClassifierHead& head, std::optional<std::size_t> k = std::nullopt) {
  const std::size_t dim = id_train.dim();
  return fit_subspace(actfun::apply(to_matrix(id_train.features()), spec), to_matrix(head.weights()),
                      to_vector(head.bias()), k ? *k : default_subspace_dim(dim));
}

inline double score_residual(std::span<const double> f, const FittedStats& stats) {
  if (!stats.subspace) throw Error(ErrorCode::unfitted, "subspace is not fitted");
  return -residual_norm(f, *stats.subspace);
}

/// logsumexp(logits) - alpha * residual: a strictly increasing transform of
/// the probability that the sample does not pick the virtual logit.
inline double score_vim(std::span<const double> f, std::span<const double> logits, const FittedStats& stats) {
  if (!stats.subspace) throw Error(ErrorCode::unfitted, "subspace is not fitted");
  return logsumexp(logits) - stats.subspace->alpha * residual_norm(f, *stats.subspace);
}

// ---------------------------------------------------------------------------
// Fitting and batch scoring

inline std::string stats_fingerprint(const FeatureBundle& id_train, const ActivationSpec& spec,
                                     const ClassifierHead* head, const ScorerConfig& config) {
  Fnv1a h;
  h.text("oodkit-stats-v1").text(spec.describe());
  h.values(id_train.features().f32_data());
  if (id_train.labels()) h.values(id_train.labels()->i64_data());
  if (id_train.logits()) h.values(id_train.logits()->f32_data());
  if (head) h.values(head->weights().f32_data()).values(head->bias().f32_data());
  h.f64(config.temperature).f64(config.react_percentile).f64(config.covariance_ridge);
  h.u64(config.vim_subspace_dim ? *config.vim_subspace_dim : 0);
  return h.hex();
}

/// Logits for a bundle: recomputed through the head when one is given,
/// otherwise the cached logits.
inline Eigen::MatrixXd bundle_logits(const FeatureBundle& b, const ActivationSpec& spec, const ClassifierHead* head) {
  if (head) return actfun::logits_from_features(to_matrix(b.features()), spec, *head);
  if (!b.logits()) {
    throw Error(ErrorCode::missing_entry, "bundle '" + b.name() + "' has no logits and no head was given");
  }
  return to_matrix(*b.logits());
}

/// Fits every statistic the listed methods need.
inline FittedStats fit_stats(const FeatureBundle& id_train, const ActivationSpec& spec, const ClassifierHead* head,
                             const ScorerConfig& config, std::span<const Method> methods,
                             EmptyTemplatePolicy kl_policy = EmptyTemplatePolicy::drop) {
  config.validate(id_train.dim());
  FittedStats stats;
  auto wants = [&](Method m) { return std::find(methods.begin(), methods.end(), m) != methods.end(); };
  for (Method m : methods) {
    if (needs_head(m) && !head) {
      throw Error(ErrorCode::usage, std::string("method ") + to_string(m) + " needs a classifier head");
    }
  }
  if (wants(Method::react)) stats.react_threshold = fit_react_threshold(id_train, spec, config.react_percentile);
  if (wants(Method::mahalanobis)) stats.gaussian = fit_gaussian_stats(id_train, spec, config.covariance_ridge);
  if (wants(Method::kl_matching)) stats.kl_templates = fit_kl_templates(bundle_logits(id_train, spec, head), kl_policy);
  if (wants(Method::vim) || wants(Method::residual)) {
    stats.subspace = fit_subspace(id_train, spec, *head, config.vim_subspace_dim);
  }
  stats.fingerprint = stats_fingerprint(id_train, spec, head, config);
  return stats;
}

/// Scores every sample of `bundle` with `config.method`. Per-sample work runs
/// in parallel; each sample's score depends only on its own row.
inline std::vector<double> score_batch(const FeatureBundle& bundle, const ActivationSpec& spec,
                                       const ClassifierHead* head, const ScorerConfig& config,
                                       const FittedStats& stats) {
  config.validate();
  const Method method = config.method;
  if (needs_head(method) && !head) {
    throw Error(ErrorCode::usage, std::string("method ") + to_string(method) + " needs a classifier head");
  }
  const std::size_t n = bundle.size();
  std::vector<double> scores(n);
  if (n == 0) return scores;

  const Eigen::MatrixXd z = to_matrix(bundle.features());
  const Eigen::MatrixXd f = actfun::apply(z, spec);
  Eigen::MatrixXd logits;
  switch (method) {
    case Method::mahalanobis:
    case Method::residual:
      break;
    case Method::react: {
      if (!stats.react_threshold) throw Error(ErrorCode::unfitted, "react threshold is not fitted");
      const double c = *stats.react_threshold;
      logits = actfun::apply_head(f.unaryExpr([c](double v) { return std::min(v, c); }), *head);
      break;
    }
    default:
      logits = bundle_logits(bundle, spec, head);
  }
  if (method == Method::mahalanobis && !stats.gaussian) throw Error(ErrorCode::unfitted, "gaussian statistics are not fitted");
  if (method == Method::kl_matching && !stats.kl_templates) throw Error(ErrorCode::unfitted, "KL templates are not fitted");

  // Row-major copies so each sample is a contiguous span.
  using RowMatrixXd = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
  const RowMatrixXd frows = f;
  const RowMatrixXd lrows = logits;
  auto frow = [&](std::size_t i) {
    return std::span<const double>(frows.data() + i * static_cast<std::size_t>(frows.cols()),
                                   static_cast<std::size_t>(frows.cols()));
  };
  auto lrow = [&](std::size_t i) {
    return std::span<const double>(lrows.data() + i * static_cast<std::size_t>(lrows.cols()),
                                   static_cast<std::size_t>(lrows.cols()));
  };

  parallel_for(n, [&](std::size_t i) {
    switch (method) {
      case Method::msp: scores[i] = score_msp(lrow(i)); break;
      case Method::maxlogit: scores[i] = score_maxlogit(lrow(i)); break;
      case Method::energy:
      case Method::react: scores[i] = score_energy(lrow(i), config.temperature); break;
      case Method::gradnorm: scores[i] = score_gradnorm(lrow(i), frow(i), config.temperature); break;
      case Method::mahalanobis: scores[i] = score_mahalanobis(frow(i), *stats.gaussian); break;
      case Method::kl_matching: scores[i] = score_kl_matching(lrow(i), *stats.kl_templates); break;
      case Method::vim: scores[i] = score_vim(frow(i), lrow(i), stats); break;
      case Method::residual: scores[i] = score_residual(frow(i), stats); break;
    }
  });
  return scores;
}

}  // namespace oodkit::scoring
