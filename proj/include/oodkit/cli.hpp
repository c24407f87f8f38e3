// SPDX-License-Identifier: Apache-2.0
//
// Command-line front end. `run` is the whole program minus process setup so
// tests can drive it in-process.
//
// Exit codes: 0 success, 1 usage error, 2 data error, 3 numerical failure.
#pragma once

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <ostream>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"

#include "oodkit/actfun.hpp"
#include "oodkit/error.hpp"
#include "oodkit/hash.hpp"
#include "oodkit/metrics.hpp"
#include "oodkit/pipeline.hpp"
#include "oodkit/purify.hpp"
#include "oodkit/refnet.hpp"
#include "oodkit/scoring.hpp"
#include "oodkit/tensor_store.hpp"

namespace oodkit::cli {

enum ExitCode : int { kOk = 0, kUsage = 1, kData = 2, kNumerical = 3 };

namespace fs = std::filesystem;

struct Options {
  // eval / sweep / score / audit
  std::string id_train, id_test, input, head;
  std::vector<std::string> ood;
  std::vector<std::string> methods{"all"};
  std::string activation = "relu";
  std::optional<double> beta;
  std::vector<double> betas;
  double temperature = 1.0;
  double react_percentile = 90.0;
  std::size_t vim_k = 0;  // 0 = auto
  std::string stats_from = "active";
  std::string out;
  std::size_t top_k = 5;
  // synth
  std::string config;
  std::optional<std::uint64_t> seed;
  std::size_t epochs = 200;
  double lr = 0.1;
  // purify
  std::string annotations;
  std::vector<std::string> manifests;
  std::size_t quorum = 5;
  double majority = 0.5;
  // validate
  std::string container;
  bool allow_nonfinite = false;
};

namespace detail {

inline std::vector<scoring::Method> resolve_methods(const std::vector<std::string>& names) {
  std::vector<scoring::Method> out;
  for (const auto& n : names) {
    if (n == "all") {
      out.assign(scoring::kAllMethods.begin(), scoring::kAllMethods.end());
      return out;
    }
    out.push_back(scoring::parse_method(n));
  }
  if (out.empty()) throw Error(ErrorCode::usage, "no methods given");
  return out;
}

inline ActivationSpec resolve_activation(const Options& o) {
  if (o.activation == "relu") return ActivationSpec::rectifier();
  if (o.activation == "actfun") {
    if (!o.beta) throw Error(ErrorCode::usage, "--activation actfun requires --beta");
    if (!(*o.beta > 0.0)) throw Error(ErrorCode::usage, "--beta must be positive");
    return ActivationSpec::actfun(*o.beta);
  }
  throw Error(ErrorCode::usage, "--activation must be relu or actfun");
}

inline pipeline::EvalOptions resolve_eval(const Options& o) {
  pipeline::EvalOptions e;
  e.methods = resolve_methods(o.methods);
  e.activation = resolve_activation(o);
  if (o.stats_from == "active") {
    e.stats_from = pipeline::StatsFrom::active;
  } else if (o.stats_from == "rectifier") {
    e.stats_from = pipeline::StatsFrom::rectifier;
  } else {
    throw Error(ErrorCode::usage, "--stats-from must be active or rectifier");
  }
  e.temperature = o.temperature;
  e.react_percentile = o.react_percentile;
  if (o.vim_k > 0) e.vim_subspace_dim = o.vim_k;
  return e;
}

inline std::string options_fingerprint(const std::string& command, const Options& o) {
  Fnv1a h;
  h.text(command).text(o.id_train).text(o.id_test).text(o.input).text(o.head).text(o.activation);
  for (const auto& s : o.ood) h.text(s);
  for (const auto& s : o.methods) h.text(s);
  h.f64(o.beta.value_or(0.0)).u64(o.beta.has_value());
  for (double b : o.betas) h.f64(b);
  h.f64(o.temperature).f64(o.react_percentile).u64(o.vim_k).text(o.stats_from).text(o.out).u64(o.top_k);
  h.text(o.config).u64(o.seed.value_or(0)).u64(o.seed.has_value()).u64(o.epochs).f64(o.lr);
  h.text(o.annotations).u64(o.quorum).f64(o.majority).text(o.container).u64(o.allow_nonfinite);
  for (const auto& s : o.manifests) h.text(s);
  return h.hex();
}

inline void write_text(const fs::path& path, const std::string& text) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  store::write_file(path, text);
}

/// Writes `<out>` as CSV and the JSON mirror next to it.
inline void write_report(const std::string& out, const std::vector<metrics::ReportRow>& rows) {
  if (out.empty()) throw Error(ErrorCode::usage, "--out is required");
  fs::path csv_path(out);
  if (csv_path.extension() != ".csv") csv_path += ".csv";
  std::ostringstream csv;
  metrics::write_csv(csv, rows);
  write_text(csv_path, csv.str());
  write_text(fs::path(csv_path).replace_extension(".json"), metrics::to_json(rows).dump(2) + "\n");
}

struct LoadedInputs {
  FeatureBundle id_train;
  FeatureBundle id_test;
  std::vector<FeatureBundle> ood;
  std::optional<ClassifierHead> head;
};

inline LoadedInputs load_eval_inputs(const Options& o) {
  if (o.id_train.empty() || o.id_test.empty() || o.ood.empty()) {
    throw Error(ErrorCode::usage, "--id-train, --id-test and at least one --ood are required");
  }
  LoadedInputs in{store::load_bundle(o.id_train, SplitRole::id_train),
                  store::load_bundle(o.id_test, SplitRole::id_test), {}, std::nullopt};
  for (const auto& p : o.ood) in.ood.push_back(store::load_bundle(p, SplitRole::ood));
  if (!o.head.empty()) in.head = store::load_head(o.head);
  return in;
}

inline void require_head_if_needed(const pipeline::EvalOptions& e, const Options& o) {
  for (auto m : e.methods) {
    if (scoring::needs_head(m) && o.head.empty()) {
      throw Error(ErrorCode::usage, std::string("method ") + scoring::to_string(m) + " needs --head");
    }
  }
}

// ---------------------------------------------------------------------------

inline int cmd_eval(const Options& o, std::ostream& out) {
  const auto e = resolve_eval(o);
  require_head_if_needed(e, o);
  if (o.out.empty()) throw Error(ErrorCode::usage, "--out is required");
  const auto in = load_eval_inputs(o);
  const auto rows = pipeline::evaluate_methods(in.id_train, in.id_test, in.ood, in.head ? &*in.head : nullptr, e);
  write_report(o.out, rows);
  metrics::write_csv(out, rows);
  return kOk;
}

inline int cmd_sweep(const Options& o, std::ostream& out) {
  Options base = o;
  base.activation = "relu";
  auto e = resolve_eval(base);
  require_head_if_needed(e, o);
  if (o.betas.empty()) throw Error(ErrorCode::usage, "--betas is required");
  if (o.out.empty()) throw Error(ErrorCode::usage, "--out is required");
  const auto in = load_eval_inputs(o);
  const auto rows = pipeline::sweep(in.id_train, in.id_test, in.ood, in.head ? &*in.head : nullptr, e, o.betas);
  write_report(o.out, rows);
  metrics::write_csv(out, rows);
  return kOk;
}

inline int cmd_score(const Options& o, std::ostream& out) {
  const auto e = resolve_eval(o);
  require_head_if_needed(e, o);
  if (o.id_train.empty() || o.input.empty()) throw Error(ErrorCode::usage, "--id-train and --input are required");
  const auto id_train = store::load_bundle(o.id_train, SplitRole::id_train);
  const auto input = store::load_bundle(o.input, SplitRole::id_test);
  std::optional<ClassifierHead> head;
  if (!o.head.empty()) head = store::load_head(o.head);
  const ClassifierHead* hp = head ? &*head : nullptr;
  const auto stats = scoring::fit_stats(id_train, e.fit_activation(), hp, e.scorer(e.methods.front()), e.methods);

  std::vector<std::vector<double>> columns;
  for (auto m : e.methods) columns.push_back(scoring::score_batch(input, e.activation, hp, e.scorer(m), stats));
  std::ostringstream csv;
  csv << "index";
  for (auto m : e.methods) csv << ',' << scoring::to_string(m);
  csv << '\n';
  char buf[32];
  for (std::size_t i = 0; i < input.size(); ++i) {
    csv << i;
    for (const auto& col : columns) {
      std::snprintf(buf, sizeof buf, "%.9g", col[i]);
      csv << ',' << buf;
    }
    csv << '\n';
  }
  if (o.out.empty()) {
    out << csv.str();
  } else {
    write_text(o.out, csv.str());
    out << "wrote " << input.size() << " scores to " << o.out << '\n';
  }
  return kOk;
}

inline int cmd_audit(const Options& o, std::ostream& out) {
  if (o.id_train.empty() || o.ood.size() != 1) throw Error(ErrorCode::usage, "audit needs --id-train and one --ood");
  if (o.top_k == 0) throw Error(ErrorCode::usage, "--top-k must be positive");
  const auto id = store::load_bundle(o.id_train, SplitRole::id_train);
  const auto ood = store::load_bundle(o.ood.front(), SplitRole::ood);
  const auto rows = purify::similarity_audit(ood, id, o.top_k);
  std::ostringstream csv;
  csv << "ood_index,rank,id_index,similarity\n";
  for (const auto& r : rows) csv << r.ood_index << ',' << r.rank << ',' << r.id_index << ',' << metrics::fixed6(r.similarity) << '\n';
  if (o.out.empty()) {
    out << csv.str();
  } else {
    write_text(o.out, csv.str());
    out << "wrote " << rows.size() << " audit rows to " << o.out << '\n';
  }
  return kOk;
}

inline int cmd_purify(const Options& o, std::ostream& out) {
  if (o.annotations.empty() || o.manifests.empty() || o.out.empty()) {
    throw Error(ErrorCode::usage, "purify needs --annotations, --manifest and --out");
  }
  purify::ConsensusRule rule{o.quorum, o.majority};
  if (!(o.majority >= 0.0 && o.majority < 1.0)) throw Error(ErrorCode::usage, "--majority must lie in [0, 1)");

  std::ifstream ann(o.annotations);
  if (!ann) throw Error(ErrorCode::io, "cannot open " + o.annotations);
  const auto records = purify::parse_annotations_csv(ann);
  const auto consensus = purify::aggregate_all(records, rule);

  std::vector<purify::DatasetManifest> manifests;
  for (const auto& p : o.manifests) {
    manifests.push_back(purify::DatasetManifest::from_entries(fs::path(p).stem().string(), store::read_manifest(p)));
  }
  std::vector<std::vector<purify::ConsensusResult>> assigned(manifests.size());
  for (const auto& c : consensus) {
    bool found = false;
    for (std::size_t m = 0; m < manifests.size() && !found; ++m) {
      if (manifests[m].contains(c.image_id)) {
        assigned[m].push_back(c);
        found = true;
      }
    }
    if (!found) throw Error(ErrorCode::unknown_image, "'" + c.image_id + "' is in no manifest");
  }

  const fs::path dir(o.out);
  fs::create_directories(dir);
  std::string jsonl;
  for (const auto& c : consensus) jsonl += purify::to_json(c).dump() + "\n";
  write_text(dir / "consensus.jsonl", jsonl);
  for (std::size_t m = 0; m < manifests.size(); ++m) {
    const auto purified = purify::purify_manifest(manifests[m], assigned[m]);
    std::string lines;
    for (const auto& e : purified.entries) {
      auto j = store::manifest_record(e);
      if (purified.flagged.count(e.id)) j["review"] = true;
      lines += j.dump() + "\n";
    }
    write_text(dir / (purified.name + ".purified.jsonl"), lines);
    out << purified.name << ": " << purified.before_count << " -> " << purified.after_count << " ("
        << purified.before_count - purified.after_count << " removed, " << purified.flagged.size()
        << " flagged for review)\n";
  }
  return kOk;
}

inline int cmd_synth(const Options& o, std::ostream& out) {
  if (o.config.empty() || o.out.empty()) throw Error(ErrorCode::usage, "synth needs --config and --out");
  const auto activation = resolve_activation(o);
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(store::read_file(o.config));
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorCode::parse, std::string("task config: ") + e.what());
  }
  auto cfg = refnet::TaskConfig::from_json(j);
  if (o.seed) cfg.seed = *o.seed;
  const refnet::SyntheticTask task(cfg);
  auto init = refnet::init_params(cfg.input_dim, cfg.hidden_dim, cfg.n_classes, activation, cfg.seed);
  const auto trained = refnet::train(task, std::move(init), o.epochs, o.lr, cfg.seed);
  const auto bundles = refnet::make_bundles(task, trained.params);

  const fs::path dir(o.out);
  fs::create_directories(dir);
  store::save_bundle(dir / "id_train.oodt", bundles.id_train);
  store::save_bundle(dir / "id_test.oodt", bundles.id_test);
  store::save_bundle(dir / "ood.oodt", bundles.ood);
  store::save_head(dir / "head.oodt", bundles.head);
  out << "trained " << activation.describe() << " network: loss " << trained.initial_loss << " -> "
      << trained.final_loss << ", train accuracy " << trained.final_accuracy << '\n';
  out << "wrote id_train.oodt id_test.oodt ood.oodt head.oodt to " << dir.string() << '\n';
  return kOk;
}

inline int cmd_validate(const Options& o, std::ostream& out) {
  const auto entries = store::read_container(o.container, {o.allow_nonfinite});
  out << o.container << ": " << entries.size() << " entries\n";
  for (const auto& [name, t] : entries) {
    out << "  " << name << " " << to_string(t.dtype()) << " [";
    for (std::size_t i = 0; i < t.rank(); ++i) out << (i ? "x" : "") << t.shape()[i];
    out << "]";
    if (t.dtype() == DType::f32) {
      std::size_t bad = 0;
      for (float v : t.f32_data()) bad += !std::isfinite(v);
      out << (bad ? " non-finite=" + std::to_string(bad) : std::string(" finite"));
    }
    out << '\n';
  }
  return kOk;
}

}  // namespace detail

inline int run(int argc, const char* const* argv, std::ostream& out, std::ostream& err) {
  CLI::App app{"Post-hoc OOD scoring, evaluation and dataset purification toolkit", "oodkit"};
  app.require_subcommand(1);
  Options o;

  auto add_eval_flags = [&o](CLI::App* cmd) {
    cmd->add_option("--id-train", o.id_train, "ID training bundle (fits statistics)");
    cmd->add_option("--id-test", o.id_test, "ID test bundle");
    cmd->add_option("--ood", o.ood, "OOD bundle (repeatable)");
    cmd->add_option("--head", o.head, "classifier head container");
    cmd->add_option("--methods", o.methods, "comma-separated methods or 'all'")->delimiter(',');
    cmd->add_option("--activation", o.activation, "relu or actfun");
    cmd->add_option("--beta", o.beta, "ActFun smoothness");
    cmd->add_option("--temperature", o.temperature, "energy/gradnorm/react temperature");
    cmd->add_option("--react-percentile", o.react_percentile, "ReAct clipping percentile");
    cmd->add_option("--vim-k", o.vim_k, "principal subspace dimension (0 = auto)");
    cmd->add_option("--stats-from", o.stats_from, "fit statistics under 'active' or 'rectifier' activation");
    cmd->add_option("--out", o.out, "output path");
    cmd->add_option("--seed", o.seed, "random seed");
  };

  auto* eval = app.add_subcommand("eval", "AUROC/FPR95 report for each method and OOD set");
  add_eval_flags(eval);
  auto* sweep = app.add_subcommand("sweep", "evaluation across ActFun beta values");
  add_eval_flags(sweep);
  sweep->add_option("--betas", o.betas, "ascending beta list")->delimiter(',');
  auto* score = app.add_subcommand("score", "per-sample scores for one bundle");
  add_eval_flags(score);
  score->add_option("--input", o.input, "bundle to score");
  auto* audit = app.add_subcommand("audit", "cosine-similarity audit of OOD samples against ID samples");
  audit->add_option("--id-train", o.id_train, "ID reference bundle");
  audit->add_option("--ood", o.ood, "OOD bundle");
  audit->add_option("--top-k", o.top_k, "neighbours per OOD sample");
  audit->add_option("--out", o.out, "output CSV");
  auto* purify_cmd = app.add_subcommand("purify", "consensus purification of OOD manifests");
  purify_cmd->add_option("--annotations", o.annotations, "annotations CSV");
  purify_cmd->add_option("--manifest", o.manifests, "dataset manifest JSON-lines (repeatable)");
  purify_cmd->add_option("--quorum", o.quorum, "minimum annotators in the deciding round");
  purify_cmd->add_option("--majority", o.majority, "strict majority fraction");
  purify_cmd->add_option("--out", o.out, "output directory");
  auto* synth = app.add_subcommand("synth", "train the reference network and export bundles");
  synth->add_option("--config", o.config, "task config JSON");
  synth->add_option("--activation", o.activation, "relu or actfun");
  synth->add_option("--beta", o.beta, "ActFun smoothness");
  synth->add_option("--epochs", o.epochs, "gradient descent epochs");
  synth->add_option("--lr", o.lr, "learning rate");
  synth->add_option("--seed", o.seed, "overrides the config seed");
  synth->add_option("--out", o.out, "output directory");
  auto* validate = app.add_subcommand("validate", "check a tensor container");
  validate->add_option("container", o.container, "container path")->required();
  validate->add_flag("--allow-nonfinite", o.allow_nonfinite, "accept NaN/Inf payloads");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    out << app.help();
    return kOk;
  } catch (const CLI::ParseError& e) {
    err << "error: " << e.what() << '\n';
    return kUsage;
  }

  CLI::App* cmd = app.get_subcommands().front();
  const std::string name = cmd->get_name();
  err << "config fingerprint: " << detail::options_fingerprint(name, o) << '\n';
  try {
    if (name == "eval") return detail::cmd_eval(o, out);
    if (name == "sweep") return detail::cmd_sweep(o, out);
    if (name == "score") return detail::cmd_score(o, out);
    if (name == "audit") return detail::cmd_audit(o, out);
    if (name == "purify") return detail::cmd_purify(o, out);
    if (name == "synth") return detail::cmd_synth(o, out);
    if (name == "validate") return detail::cmd_validate(o, out);
  } catch (const Error& e) {
    err << "error: " << e.what() << '\n';
    switch (e.category()) {
      case ErrorCategory::usage: return kUsage;
      case ErrorCategory::data: return kData;
      case ErrorCategory::numerical: return kNumerical;
    }
  } catch (const std::filesystem::filesystem_error& e) {
    err << "error: " << e.what() << '\n';
    return kData;
  }
  return kUsage;
}

}  // namespace oodkit::cli
