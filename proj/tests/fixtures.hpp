// SPDX-License-Identifier: Apache-2.0
//
// Fixtures shared by the unit tests and the acceptance runner.
#pragma once

#include <algorithm>
#include <cstdint>
#include <numeric>
#include <random>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "oodkit/purify.hpp"

namespace oodkit::test {

/// Byte offsets of the structural header fields of an encoded container
/// (everything except entry names and payloads), found by walking the layout
/// independently of the reader.
inline std::vector<std::size_t> structural_offsets(const std::string& bytes) {
  std::vector<std::size_t> out;
  for (std::size_t i = 0; i < 12; ++i) out.push_back(i);
  std::size_t pos = 12;
  const auto u8 = [&](std::size_t at) { return static_cast<std::uint64_t>(static_cast<unsigned char>(bytes.at(at))); };
  const std::uint64_t count = u8(8) | (u8(9) << 8) | (u8(10) << 16) | (u8(11) << 24);
  for (std::uint64_t e = 0; e < count; ++e) {
    const std::size_t name_len = u8(pos) | (u8(pos + 1) << 8);
    out.push_back(pos);
    out.push_back(pos + 1);
    pos += 2 + name_len;
    const auto dtype = u8(pos);
    const auto ndim = u8(pos + 1);
    out.push_back(pos);
    out.push_back(pos + 1);
    pos += 2;
    std::uint64_t numel = 1;
    for (std::uint64_t d = 0; d < ndim; ++d) {
      std::uint64_t dim = 0;
      for (int b = 0; b < 8; ++b) {
        out.push_back(pos + static_cast<std::size_t>(b));
        dim |= u8(pos + static_cast<std::size_t>(b)) << (8 * b);
      }
      numel *= dim;
      pos += 8;
    }
    pos += numel * (dtype == 1 ? 4 : 8);
  }
  if (pos != bytes.size()) throw std::logic_error("layout walk did not end at the file end");
  return out;
}

/// A manifest of `before` images and a shuffled vote set in which exactly
/// before - after images are contaminants. The others get a mix of clear OOD,
/// split, under-quorum and mostly-uncategorized votes.
inline std::pair<purify::DatasetManifest, std::vector<purify::AnnotationRecord>> table_fixture(
    const std::string& name, std::size_t before, std::size_t after, std::uint64_t seed) {
  using purify::VoteLabel;
  std::mt19937_64 rng(seed);
  std::uniform_int_distribution<int> klass(0, purify::kNumIdClasses - 1);
  std::vector<store::ManifestEntry> entries;
  for (std::size_t i = 0; i < before; ++i) {
    entries.push_back({name + "_" + std::to_string(i), name + "/" + std::to_string(i) + ".jpg", SplitRole::ood});
  }
  std::vector<std::size_t> order(before);
  std::iota(order.begin(), order.end(), 0);
  std::shuffle(order.begin(), order.end(), rng);

  std::vector<purify::AnnotationRecord> records;
  auto add = [&](const std::string& id, const std::vector<VoteLabel>& labels, std::uint32_t round = 1) {
    for (std::size_t i = 0; i < labels.size(); ++i) records.push_back({id, "ann" + std::to_string(i), round, labels[i]});
  };
  const auto ood = VoteLabel::ood();
  const auto unc = VoteLabel::uncategorized();
  for (std::size_t r = 0; r < before; ++r) {
    const auto& id = entries[order[r]].id;
    const auto k = VoteLabel::id_class(klass(rng));
    if (r < before - after) {
      switch (r % 3) {
        case 0: add(id, {k, k, k, k, k}); break;
        case 1: add(id, {k, k, k, k, unc, ood}); break;
        default:
          add(id, {ood, ood, ood, ood, ood});
          add(id, {k, k, k, ood, unc}, 2);
      }
    } else {
      switch (r % 4) {
        case 0: add(id, {ood, ood, ood, ood, ood}); break;
        case 1: add(id, {k, k, ood, ood, unc}); break;
        case 2: add(id, {k, k, k}); break;
        default: add(id, {unc, unc, unc, k, ood}); break;
      }
    }
  }
  std::shuffle(records.begin(), records.end(), rng);
  return {purify::DatasetManifest::from_entries(name, std::move(entries)), std::move(records)};
}

struct TableRow {
  const char* name;
  std::size_t before;
  std::size_t after;
};

/// Dataset sizes before and after purification.
inline constexpr TableRow kPurificationTable[] = {{"texture", 5640, 5253},
                                                  {"imagenet_o", 2000, 1933},
                                                  {"inaturalist", 10000, 9905},
                                                  {"places365", 10000, 9449},
                                                  {"sun", 10000, 9579}};

}  // namespace oodkit::test
