// SPDX-License-Identifier: Apache-2.0
//
// Consensus-based removal of in-distribution images from OOD datasets.
//
// Each image is labelled independently by several annotators, possibly over
// several rounds. The latest round decides. An image is an ID contaminant of
// class k when strictly more than `majority` of that round's annotators chose
// k. "Uncategorized" votes count toward the denominator only; a majority of
// them, or too few annotators, sends the image back for review.
#pragma once

#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstdint>
#include <istream>
#include <map>
#include <optional>
#include <set>
#include <span>
#include <string>
#include <string_view>
#include <tuple>
#include <unordered_map>
#include <utility>
#include <vector>

#include <Eigen/Core>
#include <nlohmann/json.hpp>

#include "oodkit/error.hpp"
#include "oodkit/linalg.hpp"
#include "oodkit/parallel.hpp"
#include "oodkit/tensor.hpp"
#include "oodkit/tensor_store.hpp"

namespace oodkit::purify {

inline constexpr int kNumIdClasses = 1000;

struct VoteLabel {
  enum class Kind { id_class, ood, uncategorized };

  Kind kind = Kind::ood;
  int class_index = -1;

  static VoteLabel id_class(int k) {
    if (k < 0 || k >= kNumIdClasses) {
      throw Error(ErrorCode::parse, "class index " + std::to_string(k) + " outside [0, 1000)");
    }
    return {Kind::id_class, k};
  }
  static VoteLabel ood() { return {Kind::ood, -1}; }
  static VoteLabel uncategorized() { return {Kind::uncategorized, -1}; }

  std::string str() const {
    switch (kind) {
      case Kind::id_class: return "class:" + std::to_string(class_index);
      case Kind::ood: return "ood";
      case Kind::uncategorized: return "uncategorized";
    }
    return "ood";
  }

  static VoteLabel parse(std::string_view s) {
    if (s == "ood") return ood();
    if (s == "uncategorized") return uncategorized();
    if (s.starts_with("class:")) {
      const auto digits = s.substr(6);
      int k = -1;
      const auto [ptr, ec] = std::from_chars(digits.data(), digits.data() + digits.size(), k);
      if (ec != std::errc{} || ptr != digits.data() + digits.size() || digits.empty()) {
        throw Error(ErrorCode::parse, "bad class label '" + std::string(s) + "'");
      }
      return id_class(k);
    }
    throw Error(ErrorCode::parse, "unknown label '" + std::string(s) + "'");
  }

  friend bool operator==(const VoteLabel&, const VoteLabel&) = default;
};

struct AnnotationRecord {
  std::string image_id;
  std::string annotator_id;
  std::uint32_t round = 1;
  VoteLabel label;
};

enum class Verdict { id_contaminant, ood, needs_review };

inline const char* to_string(Verdict v) noexcept {
  switch (v) {
    case Verdict::id_contaminant: return "id_contaminant";
    case Verdict::ood: return "ood";
    case Verdict::needs_review: return "needs_review";
  }
  return "ood";
}

struct ConsensusResult {
  std::string image_id;
  Verdict verdict = Verdict::ood;
  std::optional<int> class_index;  // set iff verdict == id_contaminant
  std::map<std::string, std::size_t> votes;
  std::uint32_t round_decided = 0;
};

struct ConsensusRule {
  std::size_t min_annotators = 5;
  double majority = 0.5;

  void validate() const {
    if (!(majority >= 0.0 && majority < 1.0)) {
      throw Error(ErrorCode::invalid_argument, "majority fraction must lie in [0, 1)");
    }
  }
};

/// Decides one image from all of its records.
inline ConsensusResult aggregate(std::span<const AnnotationRecord> records, const ConsensusRule& rule = {}) {
  rule.validate();
  if (records.empty()) throw Error(ErrorCode::invalid_argument, "no annotation records");
  const std::string& image = records.front().image_id;
  std::uint32_t latest = 0;
  std::set<std::pair<std::string_view, std::uint32_t>> seen;
  for (const auto& r : records) {
    if (r.image_id != image) {
      throw Error(ErrorCode::invalid_argument, "records for '" + image + "' and '" + r.image_id + "' mixed");
    }
    if (!seen.emplace(r.annotator_id, r.round).second) {
      throw Error(ErrorCode::duplicate_record, "annotator '" + r.annotator_id + "' voted twice on '" + image +
                                                   "' in round " + std::to_string(r.round));
    }
    latest = std::max(latest, r.round);
  }

  ConsensusResult out;
  out.image_id = image;
  out.round_decided = latest;
  std::map<int, std::size_t> class_votes;
  std::size_t uncategorized = 0;
  std::size_t n = 0;
  for (const auto& r : records) {
    if (r.round != latest) continue;
    ++n;
    ++out.votes[r.label.str()];
    if (r.label.kind == VoteLabel::Kind::id_class) ++class_votes[r.label.class_index];
    if (r.label.kind == VoteLabel::Kind::uncategorized) ++uncategorized;
  }

  const double needed = rule.majority * static_cast<double>(n);
  if (n < rule.min_annotators) {
    out.verdict = Verdict::needs_review;
    return out;
  }
  // With majority >= 0.5 at most one class can clear the bar; for smaller
  // fractions the most-voted class (lowest index on ties) wins.
  std::optional<std::pair<int, std::size_t>> top;
  for (const auto& [k, count] : class_votes) {
    if (static_cast<double>(count) > needed && (!top || count > top->second)) top = {k, count};
  }
  if (top) {
    out.verdict = Verdict::id_contaminant;
    out.class_index = top->first;
  } else if (static_cast<double>(uncategorized) > needed) {
    out.verdict = Verdict::needs_review;
  } else {
    out.verdict = Verdict::ood;
  }
  return out;
}

/// Groups records by image and decides each; results sorted by image id.
inline std::vector<ConsensusResult> aggregate_all(std::span<const AnnotationRecord> records,
                                                  const ConsensusRule& rule = {}) {
  std::map<std::string, std::vector<AnnotationRecord>> by_image;
  for (const auto& r : records) by_image[r.image_id].push_back(r);
  std::vector<const std::vector<AnnotationRecord>*> groups;
  for (const auto& [id, recs] : by_image) groups.push_back(&recs);
  std::vector<ConsensusResult> out(groups.size());
  parallel_for(groups.size(), [&](std::size_t i) { out[i] = aggregate(*groups[i], rule); });
  return out;
}

inline std::vector<AnnotationRecord> parse_annotations_csv(std::istream& in) {
  std::vector<AnnotationRecord> out;
  std::string line;
  std::size_t lineno = 0;
  bool header_seen = false;
  while (std::getline(in, line)) {
    ++lineno;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    if (!header_seen) {
      if (line != "image_id,annotator_id,round,label") {
        throw Error(ErrorCode::parse, "annotations header must be 'image_id,annotator_id,round,label'");
      }
      header_seen = true;
      continue;
    }
    std::vector<std::string_view> cols;
    std::string_view rest(line);
    for (std::size_t pos; (pos = rest.find(',')) != std::string_view::npos;) {
      cols.push_back(rest.substr(0, pos));
      rest.remove_prefix(pos + 1);
    }
    cols.push_back(rest);
    const std::string where = "annotations line " + std::to_string(lineno) + ": ";
    if (cols.size() != 4) throw Error(ErrorCode::parse, where + "expected 4 columns");
    if (cols[0].empty() || cols[1].empty()) throw Error(ErrorCode::parse, where + "empty id");
    std::uint32_t round = 0;
    const auto [ptr, ec] = std::from_chars(cols[2].data(), cols[2].data() + cols[2].size(), round);
    if (ec != std::errc{} || ptr != cols[2].data() + cols[2].size() || round < 1) {
      throw Error(ErrorCode::parse, where + "round must be a positive integer");
    }
    try {
      out.push_back({std::string(cols[0]), std::string(cols[1]), round, VoteLabel::parse(cols[3])});
    } catch (const Error& e) {
      throw Error(e.code(), where + e.what());
    }
  }
  return out;
}

inline nlohmann::ordered_json to_json(const ConsensusResult& r) {
  nlohmann::ordered_json j;
  j["image_id"] = r.image_id;
  j["verdict"] = to_string(r.verdict);
  if (r.class_index) j["class"] = *r.class_index;
  j["votes"] = nlohmann::ordered_json::object();
  for (const auto& [label, count] : r.votes) j["votes"][label] = count;
  j["round"] = r.round_decided;
  return j;
}

// ---------------------------------------------------------------------------
// Manifests

struct DatasetManifest {
  std::string name;
  std::vector<store::ManifestEntry> entries;
  std::set<std::string> flagged;  // kept but awaiting review
  std::size_t before_count = 0;
  std::size_t after_count = 0;

  static DatasetManifest from_entries(std::string name, std::vector<store::ManifestEntry> entries) {
    DatasetManifest m;
    m.name = std::move(name);
    m.before_count = m.after_count = entries.size();
    m.entries = std::move(entries);
    return m;
  }

  bool contains(std::string_view id) const {
    return std::any_of(entries.begin(), entries.end(), [&](const auto& e) { return e.id == id; });
  }
};

/// Drops ID contaminants and flags images that need review.
inline DatasetManifest purify_manifest(const DatasetManifest& manifest, std::span<const ConsensusResult> consensus) {
  std::unordered_map<std::string_view, const ConsensusResult*> by_id;
  std::set<std::string_view> known;
  for (const auto& e : manifest.entries) known.insert(e.id);
  for (const auto& c : consensus) {
    if (!known.count(c.image_id)) {
      throw Error(ErrorCode::unknown_image, "'" + c.image_id + "' is not in manifest '" + manifest.name + "'");
    }
    by_id[c.image_id] = &c;
  }
  DatasetManifest out;
  out.name = manifest.name;
  out.before_count = manifest.before_count;
  out.flagged = manifest.flagged;
  std::size_t removed = 0;
  for (const auto& e : manifest.entries) {
    const auto it = by_id.find(e.id);
    if (it != by_id.end() && it->second->verdict == Verdict::id_contaminant) {
      ++removed;
      out.flagged.erase(e.id);
      continue;
    }
    if (it != by_id.end() && it->second->verdict == Verdict::needs_review) out.flagged.insert(e.id);
    out.entries.push_back(e);
  }
  out.after_count = manifest.after_count - removed;
  return out;
}

// ---------------------------------------------------------------------------
// Similarity audit

inline double cosine_similarity(std::span<const double> a, std::span<const double> b) {
  if (a.size() != b.size()) throw Error(ErrorCode::dimension_mismatch, "vectors differ in length");
  double dot = 0.0, na = 0.0, nb = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    dot += a[i] * b[i];
    na += a[i] * a[i];
    nb += b[i] * b[i];
  }
  if (na == 0.0 || nb == 0.0) throw Error(ErrorCode::invalid_argument, "cosine similarity of a zero vector");
  return std::clamp(dot / (std::sqrt(na) * std::sqrt(nb)), -1.0, 1.0);
}

struct AuditRow {
  std::size_t ood_index = 0;
  std::size_t rank = 0;  // 0 = most similar
  std::size_t id_index = 0;
  double similarity = 0.0;
};

/// For each OOD sample, the `top_k` most cosine-similar ID samples, sorted by
/// similarity descending with ties going to the lower ID index.
inline std::vector<AuditRow> similarity_audit(const FeatureBundle& ood, const FeatureBundle& id, std::size_t top_k) {
  if (ood.dim() != id.dim()) throw Error(ErrorCode::dimension_mismatch, "OOD and ID feature widths differ");
  const std::size_t k = std::min(top_k, id.size());
  const std::size_t d = id.dim();
  auto widen = [d](std::span<const float> row) { return std::vector<double>(row.begin(), row.begin() + static_cast<std::ptrdiff_t>(d)); };
  std::vector<std::vector<double>> id_rows(id.size());
  for (std::size_t j = 0; j < id.size(); ++j) id_rows[j] = widen(id.features().row(j));

  std::vector<std::vector<AuditRow>> per_sample(ood.size());
  parallel_for(ood.size(), [&](std::size_t i) {
    const auto q = widen(ood.features().row(i));
    std::vector<std::pair<double, std::size_t>> sims(id.size());
    for (std::size_t j = 0; j < id.size(); ++j) sims[j] = {cosine_similarity(q, id_rows[j]), j};
    auto better = [](const auto& a, const auto& b) { return a.first > b.first || (a.first == b.first && a.second < b.second); };
    std::partial_sort(sims.begin(), sims.begin() + static_cast<std::ptrdiff_t>(k), sims.end(), better);
    for (std::size_t r = 0; r < k; ++r) per_sample[i].push_back({i, r, sims[r].second, sims[r].first});
  });
  std::vector<AuditRow> out;
  out.reserve(ood.size() * k);
  for (auto& rows : per_sample) out.insert(out.end(), rows.begin(), rows.end());
  return out;
}

}  // namespace oodkit::purify
