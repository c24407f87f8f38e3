// SPDX-License-Identifier: Apache-2.0
#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <limits>
#include <random>
#include <set>

#include "oodkit/hash.hpp"
#include "oodkit/tensor_store.hpp"
#include "fixtures.hpp"
#include "support.hpp"

using namespace oodkit;
using oodkit::test::TempDir;

namespace {

ErrorCode decode_error(std::string_view bytes, store::ReadOptions opts = {}) {
  try {
    store::decode_container(bytes, opts);
  } catch (const Error& e) {
    return e.code();
  }
  FAIL("decode unexpectedly succeeded");
  return ErrorCode::io;
}

store::TensorMap sample_map() {
  return {{"z", Tensor::f32({2, 3}, {1.f, -2.f, 3.5f, 0.f, 1e-30f, -7.f})},
          {"y", Tensor::i64({2}, {4, -9})}};
}

}  // namespace

TEST_CASE("single scalar entry round-trips", "[tensor_store]") {
  store::TensorMap m{{"b", Tensor::f32({1, 1}, {0.0f})}};
  const auto bytes = store::encode_container(m);
  // 12-byte file header, 21-byte entry header, 4-byte payload.
  CHECK(bytes.size() == 37);
  CHECK(bytes.substr(0, 4) == "OODT");
  CHECK(store::decode_container(bytes) == m);
}

TEST_CASE("mixed dtypes round-trip through a file", "[tensor_store]") {
  TempDir dir;
  const auto m = sample_map();
  store::write_container(dir / "m.oodt", m);
  const auto back = store::read_container(dir / "m.oodt");
  REQUIRE(back.size() == 2);
  CHECK(back.at("z") == m.at("z"));
  CHECK(back.at("y") == m.at("y"));
  CHECK(back.at("y").i64_data()[1] == -9);
}

TEST_CASE("entry order does not change the file", "[tensor_store]") {
  const Tensor z = Tensor::f32({2, 3}, {1, 2, 3, 4, 5, 6});
  const Tensor y = Tensor::i64({2}, {0, 1});
  const auto a = store::encode_container(std::vector<store::NamedTensor>{{"y", y}, {"z", z}});
  const auto b = store::encode_container(std::vector<store::NamedTensor>{{"z", z}, {"y", y}});
  CHECK(fnv1a_hex(a) == fnv1a_hex(b));
  CHECK(a == b);
}

TEST_CASE("corrupted files are rejected with structured errors", "[tensor_store]") {
  const auto good = store::encode_container(sample_map());

  SECTION("bad magic") {
    auto bad = good;
    bad[3] = 'X';
    CHECK(decode_error(bad) == ErrorCode::bad_magic);
  }
  SECTION("truncated payload") {
    CHECK(decode_error(std::string_view(good).substr(0, good.size() - 5)) == ErrorCode::truncated);
  }
  SECTION("trailing garbage") { CHECK(decode_error(good + "x") == ErrorCode::trailing_data); }
  SECTION("unsupported version") {
    auto bad = good;
    bad[4] = 2;
    CHECK(decode_error(bad) == ErrorCode::unsupported_version);
  }
  SECTION("empty input") { CHECK(decode_error("") == ErrorCode::truncated); }
  SECTION("zero-length dimension") {
    auto bad = store::encode_container(store::TensorMap{{"a", Tensor::i64({1}, {0})}});
    // Overwrite the single dimension (offset 17) with 0 and drop the payload.
    bad[17] = 0;
    bad.resize(bad.size() - 8);
    CHECK(decode_error(bad) == ErrorCode::bad_shape);
  }
}

TEST_CASE("non-finite payloads are rejected unless allowed", "[tensor_store]") {
  store::TensorMap m{{"features", Tensor::f32({1, 2}, {1.0f, std::numeric_limits<float>::quiet_NaN()})}};
  const auto bytes = store::encode_container(m);
  CHECK(decode_error(bytes) == ErrorCode::non_finite);
  const auto back = store::decode_container(bytes, {.allow_nonfinite = true});
  CHECK(std::isnan(back.at("features").f32_data()[1]));
}

TEST_CASE("write-side validation", "[tensor_store]") {
  const Tensor t = Tensor::f32({1}, {1.0f});
  CHECK_THROWS_MATCHES(store::encode_container(std::vector<store::NamedTensor>{{"a", t}, {"a", t}}), Error,
                       Catch::Matchers::Predicate<Error>([](const Error& e) { return e.code() == ErrorCode::duplicate_name; }));
  CHECK_THROWS_AS(store::encode_container(std::vector<store::NamedTensor>{{"", t}}), Error);
  CHECK_THROWS_AS(store::encode_container(std::vector<store::NamedTensor>{{std::string(256, 'n'), t}}), Error);
  CHECK_NOTHROW(store::encode_container(std::vector<store::NamedTensor>{{std::string(255, 'n'), t}}));
  CHECK_NOTHROW(store::encode_container(std::vector<store::NamedTensor>{{"gr\xc3\xb6\xc3\x9f" "e", t}}));
  CHECK_THROWS_AS(store::encode_container(std::vector<store::NamedTensor>{{"bad\xff", t}}), Error);
  CHECK_THROWS_AS(store::encode_container(std::vector<store::NamedTensor>{{"a", Tensor::f32({3, 0}, {})}}), Error);
}

TEST_CASE("tensor invariants", "[tensor_store]") {
  CHECK_THROWS_AS(Tensor::f32({2, 2}, {1, 2, 3}), Error);
  CHECK_THROWS_AS(Tensor::f32({}, {}), Error);
  try {
    checked_numel(std::vector<std::uint64_t>{std::uint64_t{1} << 25, std::uint64_t{1} << 24});
    FAIL("expected oversized");
  } catch (const Error& e) {
    CHECK(e.code() == ErrorCode::oversized);
  }
  CHECK(checked_numel(std::vector<std::uint64_t>{std::uint64_t{1} << 24, std::uint64_t{1} << 24}) == kMaxElements);
  CHECK(checked_numel(std::vector<std::uint64_t>{0, 7}) == 0);
  // A single dimension past the cap is rejected even next to a zero.
  CHECK_THROWS_AS(checked_numel(std::vector<std::uint64_t>{0, UINT64_MAX}), Error);
}

TEST_CASE("load_bundle", "[tensor_store]") {
  TempDir dir;
  std::mt19937_64 rng(3);
  const Tensor features = test::random_f32(rng, 4, 8);

  SECTION("features only") {
    store::write_container(dir / "a.oodt", store::TensorMap{{"features", features}});
    const auto b = store::load_bundle(dir / "a.oodt", SplitRole::ood);
    CHECK(b.size() == 4);
    CHECK(b.dim() == 8);
    CHECK_FALSE(b.logits());
    CHECK(b.name() == "a");
  }
  SECTION("mismatched logits") {
    store::write_container(dir / "b.oodt", store::TensorMap{{"features", features}, {"logits", test::random_f32(rng, 3, 5)}});
    try {
      store::load_bundle(dir / "b.oodt", SplitRole::ood);
      FAIL("expected dimension mismatch");
    } catch (const Error& e) {
      CHECK(e.code() == ErrorCode::dimension_mismatch);
    }
  }
  SECTION("full bundle") {
    store::write_container(dir / "c.oodt", store::TensorMap{{"features", features},
                                                             {"logits", test::random_f32(rng, 4, 5)},
                                                             {"labels", Tensor::i64({4}, {0, 4, 2, 1})}});
    const auto b = store::load_bundle(dir / "c.oodt", SplitRole::id_train);
    CHECK(b.logits()->cols() == 5);
    CHECK(b.labels()->i64_data()[1] == 4);
  }
  SECTION("missing features") {
    store::write_container(dir / "d.oodt", store::TensorMap{{"logits", test::random_f32(rng, 4, 5)}});
    CHECK_THROWS_AS(store::load_bundle(dir / "d.oodt", SplitRole::ood), Error);
  }
  SECTION("label out of range") {
    store::write_container(dir / "e.oodt", store::TensorMap{{"features", features},
                                                             {"logits", test::random_f32(rng, 4, 5)},
                                                             {"labels", Tensor::i64({4}, {0, 5, 2, 1})}});
    CHECK_THROWS_AS(store::load_bundle(dir / "e.oodt", SplitRole::id_train), Error);
  }
}

TEST_CASE("random maps round-trip bit-exactly", "[tensor_store][property]") {
  std::mt19937_64 rng(GENERATE(range(0, 25)));
  std::uniform_int_distribution<int> small(1, 4);
  std::uniform_int_distribution<std::uint32_t> bits;
  store::TensorMap m;
  const int entries = small(rng);
  for (int e = 0; e < entries; ++e) {
    Tensor::Shape shape(static_cast<std::size_t>(small(rng)));
    std::uint64_t n = 1;
    for (auto& d : shape) n *= (d = static_cast<std::uint64_t>(small(rng)));
    if (bits(rng) % 2) {
      std::vector<float> data(n);
      // Arbitrary finite bit patterns, including subnormals and -0.
      for (auto& v : data) {
        do v = std::bit_cast<float>(bits(rng)); while (!std::isfinite(v));
      }
      m.emplace("t" + std::to_string(e), Tensor::f32(shape, std::move(data)));
    } else {
      std::vector<std::int64_t> data(n);
      for (auto& v : data) v = static_cast<std::int64_t>((std::uint64_t{bits(rng)} << 32) | bits(rng));
      m.emplace("t" + std::to_string(e), Tensor::i64(shape, std::move(data)));
    }
  }
  const auto bytes = store::encode_container(m);
  CHECK(store::decode_container(bytes) == m);
  CHECK(store::encode_container(store::decode_container(bytes)) == bytes);
}

TEST_CASE("every structural header byte mutation is caught", "[tensor_store][fuzz]") {
  // The bundle-shaped map has small integer labels, which read as plausible
  // dimensions when a rank byte is inflated.
  const store::TensorMap bundle{{"features", Tensor::f32({3, 2}, {1.f, 2.f, 3.f, 4.f, 5.f, 6.f})},
                                {"labels", Tensor::i64({3}, {0, 1, 0})},
                                {"logits", Tensor::f32({3, 2}, {0.5f, -0.5f, 1.f, 0.f, 2.f, 1.f})}};
  const auto good = GENERATE_COPY(store::encode_container(sample_map()), store::encode_container(bundle));
  const auto offsets = test::structural_offsets(good);
  std::size_t trials = 0;
  for (std::size_t off : offsets) {
    for (int v = 0; v < 256; ++v) {
      if (static_cast<unsigned char>(good[off]) == v) continue;
      auto bad = good;
      bad[off] = static_cast<char>(v);
      bool threw = false;
      try {
        store::decode_container(bad);
      } catch (const Error&) {
        threw = true;
      }
      INFO("offset " << off << " value " << v);
      REQUIRE(threw);
      ++trials;
    }
  }
  CHECK(trials == offsets.size() * 255);
}

TEST_CASE("manifest sidecar parsing", "[tensor_store]") {
  std::istringstream in(
      "{\"id\": \"a\", \"path\": \"img/a.jpg\", \"split\": \"ood\"}\n\n"
      "{\"id\": \"b\", \"path\": \"img/b.jpg\", \"split\": \"id_test\"}\n");
  const auto m = store::parse_manifest(in);
  REQUIRE(m.size() == 2);
  CHECK(m[1].split == SplitRole::id_test);
  std::istringstream bad("{\"id\": \"a\", \"split\": \"ood\"}\n");
  CHECK_THROWS_AS(store::parse_manifest(bad), Error);
}
