// SPDX-License-Identifier: Apache-2.0
#include <catch2/catch_amalgamated.hpp>

#include <fstream>
#include <sstream>

#include "oodkit/cli.hpp"
#include "support.hpp"

using namespace oodkit;
using oodkit::test::TempDir;
using Catch::Approx;

namespace {

struct RunResult {
  int code;
  std::string out;
  std::string err;
};

RunResult oodkit_run(std::vector<std::string> args) {
  args.insert(args.begin(), "oodkit");
  std::vector<const char*> argv;
  for (const auto& a : args) argv.push_back(a.c_str());
  std::ostringstream out, err;
  const int code = cli::run(static_cast<int>(argv.size()), argv.data(), out, err);
  return {code, out.str(), err.str()};
}

std::string slurp(const std::filesystem::path& p) { return store::read_file(p); }

void spit(const std::filesystem::path& p, const std::string& text) { store::write_file(p, text); }

std::vector<std::vector<std::string>> csv_rows(const std::string& text) {
  std::vector<std::vector<std::string>> rows;
  std::istringstream in(text);
  std::string line;
  std::getline(in, line);
  while (std::getline(in, line)) {
    std::vector<std::string> cols;
    std::stringstream ls(line);
    std::string c;
    while (std::getline(ls, c, ',')) cols.push_back(c);
    if (!line.empty() && line.back() == ',') cols.emplace_back();
    rows.push_back(cols);
  }
  return rows;
}

// Trains the reference network once and shares its bundles across tests.
const TempDir& fixture() {
  static TempDir dir;
  static bool ready = [] {
    spit(dir / "task.json", R"({"n_classes": 4, "input_dim": 8, "sigma": 1.0, "shift": 10.0, "n_per_class": 60, "seed": 5, "hidden_dim": 16})");
    const auto r = oodkit_run({"synth", "--config", (dir / "task.json").string(), "--out", (dir / "b").string()});
    REQUIRE(r.code == 0);
    return true;
  }();
  (void)ready;
  return dir;
}

std::vector<std::string> eval_inputs() {
  const auto& d = fixture();
  return {"--id-train", (d / "b/id_train.oodt").string(), "--id-test", (d / "b/id_test.oodt").string(),
          "--ood", (d / "b/ood.oodt").string(), "--head", (d / "b/head.oodt").string()};
}

std::vector<std::string> concat(std::vector<std::string> a, const std::vector<std::string>& b) {
  a.insert(a.end(), b.begin(), b.end());
  return a;
}

}  // namespace

TEST_CASE("synth writes valid containers", "[cli]") {
  const auto& d = fixture();
  for (const char* f : {"id_train.oodt", "id_test.oodt", "ood.oodt", "head.oodt"}) {
    const auto r = oodkit_run({"validate", (d / "b" / f).string()});
    INFO(f << ": " << r.err);
    CHECK(r.code == 0);
    CHECK(r.err.find("config fingerprint: ") != std::string::npos);
  }
  const auto r = oodkit_run({"validate", (d / "b/id_train.oodt").string()});
  CHECK(r.out.find("features f32 [240x16] finite") != std::string::npos);
  CHECK(r.out.find("labels i64 [240]") != std::string::npos);
}

TEST_CASE("synth is reproducible", "[cli]") {
  const auto& d = fixture();
  TempDir again;
  REQUIRE(oodkit_run({"synth", "--config", (d / "task.json").string(), "--out", again.path().string()}).code == 0);
  for (const char* f : {"id_train.oodt", "ood.oodt", "head.oodt"}) CHECK(slurp(again / f) == slurp(d / "b" / f));
  CHECK(oodkit_run({"synth", "--config", (d / "task.json").string(), "--activation", "actfun", "--out",
                    (again / "x").string()})
            .code == 1);
}

TEST_CASE("eval with one method", "[cli]") {
  TempDir out;
  const auto r = oodkit_run(concat({"eval", "--methods", "msp", "--out", (out / "r.csv").string()}, eval_inputs()));
  REQUIRE(r.code == 0);
  const auto rows = csv_rows(slurp(out / "r.csv"));
  REQUIRE(rows.size() == 1);
  CHECK(rows[0][0] == "ood");
  CHECK(rows[0][1] == "msp");
  CHECK(rows[0][2].empty());
  const double auroc = std::stod(rows[0][3]);
  CHECK(auroc > 0.5);
  CHECK(auroc <= 1.0);
  const auto json = nlohmann::json::parse(slurp(out / "r.json"));
  CHECK(json.size() == 1);
  CHECK(json[0]["method"] == "msp");
  CHECK(r.out == slurp(out / "r.csv"));
}

TEST_CASE("eval with all methods", "[cli]") {
  TempDir out;
  const auto r = oodkit_run(concat({"eval", "--methods", "all", "--out", (out / "r").string()}, eval_inputs()));
  REQUIRE(r.code == 0);
  const auto rows = csv_rows(slurp(out / "r.csv"));
  REQUIRE(rows.size() == 9);
  std::vector<std::string> methods;
  for (const auto& row : rows) methods.push_back(row[1]);
  CHECK(methods == std::vector<std::string>{"energy", "gradnorm", "kl_matching", "mahalanobis", "maxlogit", "msp",
                                            "react", "residual", "vim"});
}

TEST_CASE("eval is idempotent", "[cli]") {
  TempDir out;
  const auto args = concat({"eval", "--activation", "actfun", "--beta", "2", "--out", (out / "a.csv").string()}, eval_inputs());
  REQUIRE(oodkit_run(args).code == 0);
  const auto first = slurp(out / "a.csv");
  const auto first_json = slurp(out / "a.json");
  REQUIRE(oodkit_run(args).code == 0);
  CHECK(slurp(out / "a.csv") == first);
  CHECK(slurp(out / "a.json") == first_json);
}

TEST_CASE("eval usage errors", "[cli]") {
  const auto& d = fixture();
  TempDir out;
  const std::vector<std::string> no_head{"--id-train", (d / "b/id_train.oodt").string(), "--id-test",
                                         (d / "b/id_test.oodt").string(), "--ood", (d / "b/ood.oodt").string(),
                                         "--out", (out / "r.csv").string()};
  CHECK(oodkit_run(concat({"eval", "--methods", "react"}, no_head)).code == 1);
  // Logit-only methods run from cached logits.
  CHECK(oodkit_run(concat({"eval", "--methods", "msp,energy,mahalanobis"}, no_head)).code == 0);
  CHECK(oodkit_run(concat({"eval", "--methods", "odin"}, no_head)).code == 1);
  CHECK(oodkit_run(concat({"eval", "--activation", "actfun"}, no_head)).code == 1);
  CHECK(oodkit_run(concat({"eval", "--activation", "tanh"}, no_head)).code == 1);
  CHECK(oodkit_run(concat({"eval", "--stats-from", "nowhere"}, no_head)).code == 1);
  CHECK(oodkit_run(concat({"eval", "--bogus-flag"}, no_head)).code == 1);
  CHECK(oodkit_run({"eval", "--methods", "msp"}).code == 1);
  CHECK(oodkit_run({}).code == 1);
}

TEST_CASE("eval data and numerical errors", "[cli]") {
  TempDir dir;
  const auto& d = fixture();
  spit(dir / "junk.oodt", "not a container");
  auto r = oodkit_run({"eval", "--methods", "msp", "--id-train", (dir / "junk.oodt").string(), "--id-test",
                       (d / "b/id_test.oodt").string(), "--ood", (d / "b/ood.oodt").string(), "--out",
                       (dir / "r.csv").string()});
  CHECK(r.code == 2);
  CHECK(r.err.find("error:") != std::string::npos);

  // All-zero features give a zero covariance that no relative ridge can fix.
  store::write_container(dir / "zero.oodt", store::TensorMap{{"features", Tensor::f32({6, 2}, std::vector<float>(12, 0.0f))},
                                                               {"labels", Tensor::i64({6}, {0, 0, 0, 1, 1, 1})}});
  r = oodkit_run({"eval", "--methods", "mahalanobis", "--id-train", (dir / "zero.oodt").string(), "--id-test",
                  (dir / "zero.oodt").string(), "--ood", (dir / "zero.oodt").string(), "--out", (dir / "r.csv").string()});
  CHECK(r.code == 3);
  CHECK_FALSE(std::filesystem::exists(dir / "r.csv"));
}

TEST_CASE("sweep", "[cli]") {
  TempDir out;
  SECTION("a single beta reproduces eval") {
    REQUIRE(oodkit_run(concat({"sweep", "--betas", "1", "--out", (out / "s.csv").string()}, eval_inputs())).code == 0);
    REQUIRE(oodkit_run(concat({"eval", "--activation", "actfun", "--beta", "1", "--out", (out / "e.csv").string()},
                              eval_inputs()))
                .code == 0);
    CHECK(slurp(out / "s.csv") == slurp(out / "e.csv"));
  }
  SECTION("several betas") {
    REQUIRE(oodkit_run(concat({"sweep", "--betas", "0.5,1,2,4,8", "--methods", "energy,msp", "--out",
                               (out / "s.csv").string()},
                              eval_inputs()))
                .code == 0);
    const auto rows = csv_rows(slurp(out / "s.csv"));
    REQUIRE(rows.size() == 10);
    const std::vector<std::string> betas{"0.500000", "1.000000", "2.000000", "4.000000", "8.000000"};
    for (std::size_t i = 0; i < 5; ++i) {
      CHECK(rows[i][1] == "energy");
      CHECK(rows[i][2] == betas[i]);
      CHECK(rows[5 + i][1] == "msp");
      CHECK(rows[5 + i][2] == betas[i]);
    }
  }
  SECTION("large beta with rectifier statistics matches the rectifier run") {
    REQUIRE(oodkit_run(concat({"sweep", "--betas", "10000", "--stats-from", "rectifier", "--out", (out / "s.csv").string()},
                              eval_inputs()))
                .code == 0);
    REQUIRE(oodkit_run(concat({"eval", "--out", (out / "e.csv").string()}, eval_inputs())).code == 0);
    const auto s = csv_rows(slurp(out / "s.csv"));
    const auto e = csv_rows(slurp(out / "e.csv"));
    REQUIRE(s.size() == e.size());
    for (std::size_t i = 0; i < s.size(); ++i) {
      INFO(s[i][1]);
      CHECK(s[i][1] == e[i][1]);
      CHECK(std::abs(std::stod(s[i][3]) - std::stod(e[i][3])) <= 1e-3);
      CHECK(std::abs(std::stod(s[i][4]) - std::stod(e[i][4])) <= 1e-3);
    }
  }
  SECTION("invalid beta lists") {
    CHECK(oodkit_run(concat({"sweep", "--betas", "2,1", "--out", (out / "s.csv").string()}, eval_inputs())).code == 1);
    CHECK(oodkit_run(concat({"sweep", "--betas", "0,1", "--out", (out / "s.csv").string()}, eval_inputs())).code == 1);
    CHECK(oodkit_run(concat({"sweep", "--out", (out / "s.csv").string()}, eval_inputs())).code == 1);
  }
}

TEST_CASE("score and audit", "[cli]") {
  const auto& d = fixture();
  TempDir out;
  auto r = oodkit_run(concat({"score", "--methods", "msp,vim", "--input", (d / "b/ood.oodt").string(), "--out",
                              (out / "scores.csv").string()},
                             eval_inputs()));
  REQUIRE(r.code == 0);
  const auto text = slurp(out / "scores.csv");
  CHECK(text.rfind("index,msp,vim\n", 0) == 0);
  CHECK(csv_rows(text).size() == 240);

  r = oodkit_run({"audit", "--id-train", (d / "b/id_train.oodt").string(), "--ood", (d / "b/ood.oodt").string(),
                  "--top-k", "2"});
  REQUIRE(r.code == 0);
  CHECK(r.out.rfind("ood_index,rank,id_index,similarity\n", 0) == 0);
  CHECK(csv_rows(r.out).size() == 480);
}

TEST_CASE("validate diagnostics", "[cli]") {
  TempDir dir;
  store::write_container(dir / "ok.oodt", store::TensorMap{{"features", Tensor::f32({1, 3}, {1, 2, 3})}});
  CHECK(oodkit_run({"validate", (dir / "ok.oodt").string()}).code == 0);

  const auto bytes = slurp(dir / "ok.oodt");
  spit(dir / "short.oodt", bytes.substr(0, bytes.size() - 5));
  auto r = oodkit_run({"validate", (dir / "short.oodt").string()});
  CHECK(r.code == 2);
  CHECK(r.err.find("truncated payload") != std::string::npos);

  store::write_container(dir / "nan.oodt", store::TensorMap{{"logits", Tensor::f32({1, 2}, {1.0f, NAN})}});
  r = oodkit_run({"validate", (dir / "nan.oodt").string()});
  CHECK(r.code == 2);
  CHECK(r.err.find("'logits'") != std::string::npos);
  r = oodkit_run({"validate", "--allow-nonfinite", (dir / "nan.oodt").string()});
  CHECK(r.code == 0);
  CHECK(r.out.find("non-finite=1") != std::string::npos);

  CHECK(oodkit_run({"validate", (dir / "missing.oodt").string()}).code == 2);
  CHECK(oodkit_run({"validate"}).code == 1);
}

TEST_CASE("purify", "[cli]") {
  TempDir dir;
  std::string manifest;
  for (int i = 0; i < 6; ++i) {
    manifest += R"({"id": "t)" + std::to_string(i) + R"(", "path": "t/)" + std::to_string(i) + R"(.jpg", "split": "ood"})" "\n";
  }
  spit(dir / "texture.jsonl", manifest);
  std::string ann = "image_id,annotator_id,round,label\n";
  for (int a = 0; a < 5; ++a) {
    ann += "t0,a" + std::to_string(a) + ",1,class:207\n";
    ann += "t1,a" + std::to_string(a) + ",1," + (a < 3 ? "class:9" : "uncategorized") + "\n";
    ann += "t2,a" + std::to_string(a) + ",1," + (a < 2 ? "class:9" : "ood") + "\n";
    ann += "t3,a" + std::to_string(a) + ",1," + (a < 3 ? "uncategorized" : "ood") + "\n";
  }
  spit(dir / "ann.csv", ann);
  const std::vector<std::string> base{"purify", "--annotations", (dir / "ann.csv").string(), "--manifest",
                                      (dir / "texture.jsonl").string()};

  SECTION("contaminants removed and reviews flagged") {
    const auto r = oodkit_run(concat(base, {"--out", (dir / "o").string()}));
    REQUIRE(r.code == 0);
    CHECK(r.out == "texture: 6 -> 4 (2 removed, 1 flagged for review)\n");
    const auto purified = slurp(dir / "o/texture.purified.jsonl");
    CHECK(purified.find("\"t0\"") == std::string::npos);
    CHECK(purified.find("\"t1\"") == std::string::npos);
    CHECK(purified.find(R"("id":"t3","path":"t/3.jpg","split":"ood","review":true)") != std::string::npos);
    const auto consensus = slurp(dir / "o/consensus.jsonl");
    CHECK(consensus.rfind(R"({"image_id":"t0","verdict":"id_contaminant","class":207,"votes":{"class:207":5},"round":1})", 0) == 0);
    REQUIRE(oodkit_run(concat(base, {"--out", (dir / "o").string()})).code == 0);
    CHECK(slurp(dir / "o/texture.purified.jsonl") == purified);
  }
  SECTION("raised quorum sends everything to review") {
    const auto r = oodkit_run(concat(base, {"--quorum", "7", "--out", (dir / "o").string()}));
    REQUIRE(r.code == 0);
    CHECK(r.out == "texture: 6 -> 6 (0 removed, 4 flagged for review)\n");
  }
  SECTION("empty annotations leave the manifest unchanged") {
    spit(dir / "empty.csv", "image_id,annotator_id,round,label\n");
    const auto r = oodkit_run({"purify", "--annotations", (dir / "empty.csv").string(), "--manifest",
                               (dir / "texture.jsonl").string(), "--out", (dir / "o").string()});
    REQUIRE(r.code == 0);
    CHECK(r.out == "texture: 6 -> 6 (0 removed, 0 flagged for review)\n");
  }
  SECTION("unknown image") {
    spit(dir / "bad.csv", "image_id,annotator_id,round,label\nzz,a,1,ood\n");
    CHECK(oodkit_run({"purify", "--annotations", (dir / "bad.csv").string(), "--manifest",
                      (dir / "texture.jsonl").string(), "--out", (dir / "o").string()})
              .code == 2);
  }
  SECTION("duplicate votes") {
    spit(dir / "dup.csv", "image_id,annotator_id,round,label\nt0,a,1,ood\nt0,a,1,ood\n");
    CHECK(oodkit_run({"purify", "--annotations", (dir / "dup.csv").string(), "--manifest",
                      (dir / "texture.jsonl").string(), "--out", (dir / "o").string()})
              .code == 2);
  }
  SECTION("bad majority") {
    CHECK(oodkit_run(concat(base, {"--majority", "1.5", "--out", (dir / "o").string()})).code == 1);
  }
}
