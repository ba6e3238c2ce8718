#pragma once

#include <cstdint>
#include <exception>
#include <filesystem>
#include <optional>
#include <ostream>
#include <string>
#include <vector>

#include "bixformer/config.hpp"
#include "bixformer/error.hpp"
#include "bixformer/eval.hpp"
#include "bixformer/scene.hpp"
#include "bixformer/synth.hpp"
#include "bixformer/train.hpp"
#include "bixformer/umm.hpp"
#include "bixformer/verify.hpp"
#include "json.hpp"

namespace bixformer {

/// Exit codes shared by every verb.
enum ExitCode : int {
  kExitOk = 0,
  kExitFailure = 1,
  kExitConfig = 2,
  kExitIo = 3,
  kExitInfeasible = 4,
  kExitVerification = 5,
};

struct CliOptions {
  std::optional<std::string> config;
  std::optional<std::string> out;
  std::optional<std::uint64_t> seed;
  std::optional<std::string> mode;
  std::optional<std::string> data;
  std::optional<std::string> checkpoint;
  std::optional<std::string> pred;
  std::optional<std::string> gt;
  std::string split;           // eval defaults to test, analyze to train
  std::string format = "json";  // eval: json or table
};

inline RunConfig resolve_config(const CliOptions& o) {
  RunConfig c = o.config ? load_config(*o.config) : config_from_json(nlohmann::json::object());
  if (o.seed) c.train.seed = *o.seed;
  if (o.mode) c.train.mode = parse_train_mode(*o.mode);
  return c;
}

namespace detail {

inline const std::string& require(const std::optional<std::string>& v, const char* flag) {
  if (!v) throw ConfigError(std::string("missing required flag ") + flag);
  return *v;
}

inline std::vector<Scene> dataset_split(const RunConfig& c, const CliOptions& o, const std::string& split) {
  if (split != "train" && split != "test") throw ConfigError("split must be train or test, got '" + split + "'");
  Benchmark b = o.data ? load_benchmark(*o.data) : generate_benchmark(c.synth_config(), c.n_train, c.n_test);
  auto& scenes = split == "train" ? b.train : b.test;
  if (scenes.empty()) throw ConfigError("the " + split + " split is empty");
  return std::move(scenes);
}

inline TrainState load_checkpoint(const std::string& path, const ModelDims& dims) {
  try {
    return state_from_json(read_json_file(path), dims);
  } catch (const ParseError& e) {
    throw ParseError(path + ": " + e.what());
  }
}

inline PredictionSet prediction_from_json(const nlohmann::json& j, Modality m, std::size_t h, std::size_t w) {
  const auto scores = field<std::vector<std::vector<double>>>(j, "class_scores");
  const auto masks = field<std::vector<std::vector<double>>>(j, "masks");
  if (scores.empty() || scores.size() != masks.size())
    throw ParseError("'class_scores' and 'masks' need the same nonzero number of rows");
  const std::size_t k1 = scores.front().size();
  PredictionSet p{m, Tensor({scores.size(), k1}), Tensor({masks.size(), h, w})};
  for (std::size_t i = 0; i < scores.size(); ++i) {
    if (scores[i].size() != k1) throw ParseError("ragged 'class_scores' at row " + std::to_string(i));
    if (masks[i].size() != h * w)
      throw ParseError("mask row " + std::to_string(i) + " has " + std::to_string(masks[i].size()) +
                       " values, expected " + std::to_string(h * w));
    std::copy(scores[i].begin(), scores[i].end(), p.class_scores.row(i).begin());
    std::copy(masks[i].begin(), masks[i].end(), p.masks.row(i).begin());
  }
  try {
    p.validate();
  } catch (const ContractError& e) {
    throw ParseError(std::string(modality_tag(m)) + " predictions: " + e.what());
  }
  return p;
}

}  // namespace detail

/// Writes the benchmark under --out and prints its manifest.
inline int cmd_simulate(const CliOptions& o, std::ostream& out, std::ostream& log) {
  const RunConfig c = resolve_config(o);
  const std::string& dir = detail::require(o.out, "--out");
  const SynthConfig sc = c.synth_config();
  const Benchmark b = generate_benchmark(sc, c.n_train, c.n_test);
  const auto manifest = write_benchmark(b, sc, dir);
  log << "wrote " << b.train.size() + b.test.size() << " scenes to " << dir << "\n";
  out << manifest.dump(2) << "\n";
  return kExitOk;
}

/// Matches serialized predictions to a ground-truth file and prints the
/// final matching with diagnostics.
inline int cmd_match(const CliOptions& o, std::ostream& out, std::ostream&) {
  const RunConfig c = resolve_config(o);
  const std::string& pred_path = detail::require(o.pred, "--pred");
  const std::string& gt_path = detail::require(o.gt, "--gt");
  GroundTruthSet gt = [&] {
    try {
      return gt_from_json(read_json_file(gt_path));
    } catch (const ParseError& e) {
      throw ParseError(gt_path + ": " + e.what());
    }
  }();
  const auto pj = read_json_file(pred_path);
  auto load = [&](const char* key, Modality m) {
    try {
      if (!pj.contains(key)) throw ParseError(std::string("missing field '") + key + "'");
      return detail::prediction_from_json(pj[key], m, gt.height(), gt.width());
    } catch (const ParseError& e) {
      throw ParseError(pred_path + ": " + e.what());
    }
  };
  const PredictionSet pr = load("rgb", Modality::kRgb);
  const PredictionSet px = load("x", Modality::kX);
  if (pr.num_classes() != gt.num_classes() || px.num_classes() != gt.num_classes())
    throw ParseError(pred_path + ": class score width does not match K=" + std::to_string(gt.num_classes()));
  const MatchingMode mode = o.mode ? matching_mode(parse_train_mode(*o.mode)) : MatchingMode::kUmm;
  const UmmResult u = umm_full(pr, px, gt, c.train.cost, mode);
  nlohmann::ordered_json j;
  j["matching"] = matching_to_json(u.final_matching, gt);
  j["diagnostics"] = diagnostics_to_json(u.diagnostics);
  out << j.dump(2) << "\n";
  return kExitOk;
}

/// Trains on the train split and writes checkpoint.json and metrics.jsonl
/// under --out; prints a summary.
inline int cmd_train(const CliOptions& o, std::ostream& out, std::ostream& log) {
  const RunConfig c = resolve_config(o);
  const std::string& dir = detail::require(o.out, "--out");
  const auto scenes = detail::dataset_split(c, o, "train");
  std::error_code ec;
  std::filesystem::create_directories(dir, ec);
  if (ec) throw IoError("cannot create " + dir + ": " + ec.message());

  const TrainResult r = train(c.train, scenes, [&](const EpochMetrics& m) {
    log << "epoch " << m.epoch << " step " << m.step << " loss " << m.loss;
    if (m.eval) log << " mean_miou " << m.eval->mean.mean_iou;
    log << "\n";
  });
  const std::string checkpoint = state_to_json(r.state).dump() + "\n";
  const std::string metrics = metrics_jsonl(r.log);
  write_text_file((std::filesystem::path(dir) / "checkpoint.json").string(), checkpoint);
  write_text_file((std::filesystem::path(dir) / "metrics.jsonl").string(), metrics);

  nlohmann::ordered_json s;
  s["mode"] = train_mode_tag(c.train.mode);
  s["seed"] = c.train.seed;
  s["steps"] = c.train.steps;
  s["final_loss"] = r.log.back().loss;
  if (r.log.back().eval) s["final_mean_miou"] = r.log.back().eval->mean.mean_iou;
  s["cm_invocations"] = r.cm_invocations;
  s["checkpoint_sha256"] = sha256_hex(checkpoint);
  out << s.dump(2) << "\n";
  return kExitOk;
}

/// Evaluates a checkpoint on the requested modality subsets.
inline int cmd_eval(const CliOptions& o, std::ostream& out, std::ostream&) {
  const RunConfig c = resolve_config(o);
  if (o.format != "json" && o.format != "table") throw ConfigError("--format must be json or table");
  const TrainState st = detail::load_checkpoint(detail::require(o.checkpoint, "--checkpoint"), c.train.dims);
  const auto scenes = detail::dataset_split(c, o, o.split.empty() ? "test" : o.split);
  const SubsetEvaluation e = subset_eval(st.model, scenes, c.train.subsets);
  const std::string json = evaluation_to_json(e).dump(2) + "\n";
  const std::string table = evaluation_table(e, c.synth.k);
  if (o.out) {
    std::error_code ec;
    std::filesystem::create_directories(*o.out, ec);
    if (ec) throw IoError("cannot create " + *o.out + ": " + ec.message());
    write_text_file((std::filesystem::path(*o.out) / "eval.json").string(), json);
    write_text_file((std::filesystem::path(*o.out) / "eval.txt").string(), table);
  }
  out << (o.format == "json" ? json : table);
  return kExitOk;
}

/// Class-to-modality distribution of MAM assignments as CSV.
inline int cmd_analyze(const CliOptions& o, std::ostream& out, std::ostream&) {
  const RunConfig c = resolve_config(o);
  const TrainState st = detail::load_checkpoint(detail::require(o.checkpoint, "--checkpoint"), c.train.dims);
  const auto scenes = detail::dataset_split(c, o, o.split.empty() ? "train" : o.split);
  const DatasetMatchings m = match_dataset(st.model, scenes, c.train.cost);
  const std::string csv = distribution_csv(label_distribution(m.matchings, m.gts));
  if (o.out) {
    std::error_code ec;
    std::filesystem::create_directories(*o.out, ec);
    if (ec) throw IoError("cannot create " + *o.out + ": " + ec.message());
    write_text_file((std::filesystem::path(*o.out) / "distribution.csv").string(), csv);
  }
  out << csv;
  return kExitOk;
}

inline int cmd_gradcheck(const CliOptions& o, std::ostream& out, std::ostream& log) {
  const RunConfig c = resolve_config(o);
  const auto checks = gradcheck_suite(c.train.seed);
  bool ok = true;
  for (const auto& ch : checks) {
    ok = ok && ch.report.passed();
    log << ch.name << ": max relative error " << ch.report.max_rel_error << (ch.report.passed() ? "" : " FAILED")
        << "\n";
  }
  out << gradcheck_to_json(checks).dump(2) << "\n";
  return ok ? kExitOk : kExitVerification;
}

inline int cmd_oracle(const CliOptions& o, std::ostream& out, std::ostream& log) {
  const RunConfig c = resolve_config(o);
  const OracleSweepReport r = oracle_sweep(c.train.seed);
  if (!r.passed())
    log << r.assignment_mismatches << " assignment and " << r.mam_mismatches << " MAM mismatches\n";
  out << oracle_report_to_json(r).dump(2) << "\n";
  return r.passed() ? kExitOk : kExitVerification;
}

/// Dispatches a verb, mapping errors to exit codes with a message on `log`.
inline int run_command(const std::string& verb, const CliOptions& o, std::ostream& out, std::ostream& log) {
  try {
    if (verb == "simulate") return cmd_simulate(o, out, log);
    if (verb == "match") return cmd_match(o, out, log);
    if (verb == "train") return cmd_train(o, out, log);
    if (verb == "eval") return cmd_eval(o, out, log);
    if (verb == "analyze") return cmd_analyze(o, out, log);
    if (verb == "gradcheck") return cmd_gradcheck(o, out, log);
    if (verb == "oracle") return cmd_oracle(o, out, log);
    throw ConfigError("unknown command '" + verb + "'");
  } catch (const DivergenceError& e) {
    log << "error: " << e.what() << "\nstate: " << e.state() << "\n";
    return e.exit_code();
  } catch (const InfeasibleError& e) {
    log << "infeasible: " << e.what() << "\n";
    return e.exit_code();
  } catch (const Error& e) {
    log << "error: " << e.what() << "\n";
    return e.exit_code();
  } catch (const nlohmann::json::exception& e) {
    log << "error: " << e.what() << "\n";
    return kExitConfig;
  } catch (const std::exception& e) {
    log << "error: " << e.what() << "\n";
    return kExitFailure;
  }
}

}  // namespace bixformer
