// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <optional>
#include <span>
#include <string>
#include <vector>

#include "oodkit/actfun.hpp"
#include "oodkit/error.hpp"
#include "oodkit/metrics.hpp"
#include "oodkit/scoring.hpp"
#include "oodkit/tensor.hpp"

namespace oodkit::pipeline {

enum class StatsFrom { active, rectifier };

struct EvalOptions {
  std::vector<scoring::Method> methods{scoring::kAllMethods.begin(), scoring::kAllMethods.end()};
  ActivationSpec activation;
  StatsFrom stats_from = StatsFrom::active;
  double temperature = 1.0;
  double react_percentile = 90.0;
  std::optional<std::size_t> vim_subspace_dim;
  double covariance_ridge = 1e-6;

  scoring::ScorerConfig scorer(scoring::Method m) const {
    scoring::ScorerConfig c;
    c.method = m;
    c.temperature = temperature;
    c.react_percentile = react_percentile;
    c.vim_subspace_dim = vim_subspace_dim;
    c.covariance_ridge = covariance_ridge;
    return c;
  }

  ActivationSpec fit_activation() const {
    return stats_from == StatsFrom::rectifier ? ActivationSpec::rectifier() : activation;
  }
};

/// Fits statistics on `id_train` and scores `id_test` against each OOD set
/// with every requested method. One row per (OOD set, method).
inline std::vector<metrics::ReportRow> evaluate_methods(const FeatureBundle& id_train, const FeatureBundle& id_test,
                                                        std::span<const FeatureBundle> ood_sets,
                                                        const ClassifierHead* head, const EvalOptions& opts) {
  if (opts.methods.empty()) throw Error(ErrorCode::usage, "no methods requested");
  for (const auto* b : {&id_train, &id_test}) {
    if (b->dim() != id_train.dim()) throw Error(ErrorCode::dimension_mismatch, "bundle feature widths differ");
  }
  for (const auto& b : ood_sets) {
    if (b.dim() != id_train.dim()) throw Error(ErrorCode::dimension_mismatch, "bundle '" + b.name() + "' has a different feature width");
  }
  const auto base = opts.scorer(opts.methods.front());
  const auto stats = scoring::fit_stats(id_train, opts.fit_activation(), head, base, opts.methods);
  const std::optional<double> beta =
      opts.activation.is_actfun() ? std::optional<double>(opts.activation.beta) : std::nullopt;

  std::vector<metrics::ReportRow> rows;
  for (scoring::Method m : opts.methods) {
    const auto cfg = opts.scorer(m);
    const auto id_scores = scoring::score_batch(id_test, opts.activation, head, cfg, stats);
    for (const auto& ood : ood_sets) {
      const auto ood_scores = scoring::score_batch(ood, opts.activation, head, cfg, stats);
      rows.push_back(metrics::evaluate(id_scores, ood_scores, ood.name(), scoring::to_string(m), beta, stats.fingerprint));
    }
  }
  metrics::sort_rows(rows);
  return rows;
}

/// Re-runs the evaluation with ActFun at every beta; statistics are re-fit
/// per beta unless `opts.stats_from` pins them to the rectifier.
inline std::vector<metrics::ReportRow> sweep(const FeatureBundle& id_train, const FeatureBundle& id_test,
                                             std::span<const FeatureBundle> ood_sets, const ClassifierHead* head,
                                             EvalOptions opts, std::span<const double> betas) {
  if (betas.empty()) throw Error(ErrorCode::usage, "no beta values given");
  for (std::size_t i = 0; i < betas.size(); ++i) {
    if (!(betas[i] > 0.0) || !std::isfinite(betas[i])) throw Error(ErrorCode::usage, "beta values must be positive");
    if (i > 0 && !(betas[i] > betas[i - 1])) throw Error(ErrorCode::usage, "beta values must be strictly ascending");
  }
  std::vector<metrics::ReportRow> rows;
  for (double beta : betas) {
    opts.activation = ActivationSpec::actfun(beta);
    auto part = evaluate_methods(id_train, id_test, ood_sets, head, opts);
    rows.insert(rows.end(), part.begin(), part.end());
  }
  metrics::sort_rows(rows);
  return rows;
}

}  // namespace oodkit::pipeline
