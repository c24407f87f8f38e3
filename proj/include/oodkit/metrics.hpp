// SPDX-License-Identifier: Apache-2.0
//
// Threshold-free evaluation of score vectors. In-distribution samples are the
// positive class throughout.
#pragma once

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <functional>
#include <optional>
#include <ostream>
#include <span>
#include <string>
#include <tuple>
#include <vector>

#include <nlohmann/json.hpp>

#include "oodkit/error.hpp"

namespace oodkit::metrics {

namespace detail {

inline void check_inputs(std::span<const double> id_scores, std::span<const double> ood_scores) {
  if (id_scores.empty() || ood_scores.empty()) {
    throw Error(ErrorCode::invalid_argument, "both ID and OOD score sets must be non-empty");
  }
  for (auto s : {id_scores, ood_scores}) {
    for (double v : s) {
      if (!std::isfinite(v)) throw Error(ErrorCode::non_finite, "scores must be finite");
    }
  }
}

}  // namespace detail

/// Mann-Whitney AUROC with half credit for ties, O(n log n).
inline double auroc(std::span<const double> id_scores, std::span<const double> ood_scores) {
  detail::check_inputs(id_scores, ood_scores);
  std::vector<double> ood(ood_scores.begin(), ood_scores.end());
  std::sort(ood.begin(), ood.end());
  // Twice the pair count keeps every partial sum an exact integer.
  double twice_wins = 0.0;
  for (double s : id_scores) {
    const auto lo = std::lower_bound(ood.begin(), ood.end(), s);
    const auto hi = std::upper_bound(lo, ood.end(), s);
    twice_wins += 2.0 * static_cast<double>(lo - ood.begin()) + static_cast<double>(hi - lo);
  }
  return twice_wins / (2.0 * static_cast<double>(id_scores.size()) * static_cast<double>(ood.size()));
}

/// FPR at the largest ID score t whose acceptance rate #{id >= t} / n_id
/// reaches `tpr_target`.
inline double fpr_at_tpr(std::span<const double> id_scores, std::span<const double> ood_scores,
                         double tpr_target = 0.95) {
  detail::check_inputs(id_scores, ood_scores);
  if (!(tpr_target > 0.0 && tpr_target <= 1.0)) {
    throw Error(ErrorCode::invalid_argument, "TPR target must lie in (0, 1]");
  }
  std::vector<double> id(id_scores.begin(), id_scores.end());
  std::sort(id.begin(), id.end(), std::greater<>());
  const double n_id = static_cast<double>(id.size());
  // Smallest accepted count k with k / n_id >= target, evaluated exactly as
  // the rate comparison is written.
  auto k = static_cast<std::size_t>(std::ceil(tpr_target * n_id));
  k = std::clamp<std::size_t>(k, 1, id.size());
  while (k > 1 && static_cast<double>(k - 1) / n_id >= tpr_target) --k;
  while (k < id.size() && !(static_cast<double>(k) / n_id >= tpr_target)) ++k;
  const double threshold = id[k - 1];
  const auto above = std::count_if(ood_scores.begin(), ood_scores.end(), [&](double s) { return s >= threshold; });
  return static_cast<double>(above) / static_cast<double>(ood_scores.size());
}

struct ReportRow {
  std::string dataset;
  std::string method;
  std::optional<double> beta;
  double auroc = 0.0;
  double fpr95 = 0.0;
  std::size_t n_id = 0;
  std::size_t n_ood = 0;
  std::string fingerprint;
};

inline ReportRow evaluate(std::span<const double> id_scores, std::span<const double> ood_scores,
                          std::string dataset, std::string method, std::optional<double> beta = std::nullopt,
                          std::string fingerprint = {}) {
  ReportRow row;
  row.dataset = std::move(dataset);
  row.method = std::move(method);
  row.beta = beta;
  row.auroc = auroc(id_scores, ood_scores);
  row.fpr95 = fpr_at_tpr(id_scores, ood_scores, 0.95);
  row.n_id = id_scores.size();
  row.n_ood = ood_scores.size();
  row.fingerprint = std::move(fingerprint);
  return row;
}

/// True iff AUROC and FPR95 are unchanged when `transform` is applied to
/// both score vectors.
template <typename Transform>
bool monotone_invariance_check(std::span<const double> id_scores, std::span<const double> ood_scores,
                               Transform&& transform) {
  std::vector<double> id_t, ood_t;
  for (double s : id_scores) id_t.push_back(transform(s));
  for (double s : ood_scores) ood_t.push_back(transform(s));
  return auroc(id_scores, ood_scores) == auroc(id_t, ood_t) &&
         fpr_at_tpr(id_scores, ood_scores) == fpr_at_tpr(id_t, ood_t);
}

// ---------------------------------------------------------------------------
// Report files

inline void sort_rows(std::vector<ReportRow>& rows) {
  std::stable_sort(rows.begin(), rows.end(), [](const ReportRow& a, const ReportRow& b) {
    return std::tie(a.dataset, a.method, a.beta) < std::tie(b.dataset, b.method, b.beta);
  });
}

inline std::string fixed6(double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.6f", v);
  return buf;
}

inline constexpr const char* kCsvHeader = "dataset,method,beta,auroc,fpr95,n_id,n_ood,fingerprint";

inline void write_csv(std::ostream& out, std::vector<ReportRow> rows) {
  sort_rows(rows);
  out << kCsvHeader << '\n';
  for (const auto& r : rows) {
    out << r.dataset << ',' << r.method << ',' << (r.beta ? fixed6(*r.beta) : "") << ',' << fixed6(r.auroc) << ','
        << fixed6(r.fpr95) << ',' << r.n_id << ',' << r.n_ood << ',' << r.fingerprint << '\n';
  }
}

inline nlohmann::ordered_json to_json(std::vector<ReportRow> rows) {
  sort_rows(rows);
  auto arr = nlohmann::ordered_json::array();
  for (const auto& r : rows) {
    nlohmann::ordered_json j;
    j["dataset"] = r.dataset;
    j["method"] = r.method;
    j["beta"] = r.beta ? nlohmann::ordered_json(*r.beta) : nlohmann::ordered_json(nullptr);
    j["auroc"] = r.auroc;
    j["fpr95"] = r.fpr95;
    j["n_id"] = r.n_id;
    j["n_ood"] = r.n_ood;
    j["fingerprint"] = r.fingerprint;
    arr.push_back(std::move(j));
  }
  return arr;
}

}  // namespace oodkit::metrics
