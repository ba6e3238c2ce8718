#include <iostream>
#include <string>

#include "CLI11.hpp"
#include "bixformer/cli.hpp"

int main(int argc, char** argv) {
  CLI::App app{"Unified modality matching and cross-modality alignment on synthetic scenes"};
  app.require_subcommand(1);
  bixformer::CliOptions opts;

  auto common = [&](CLI::App* sub) {
    sub->add_option("--config", opts.config, "flat JSON run configuration");
    sub->add_option("--out", opts.out, "output directory");
    sub->add_option("--seed", opts.seed, "overrides the config seed");
    sub->add_option("--mode", opts.mode, "umm_cma, umm, mam_only or cm_only");
  };
  auto data = [&](CLI::App* sub) {
    sub->add_option("--data", opts.data, "benchmark directory written by simulate");
    sub->add_option("--split", opts.split, "train or test");
  };

  auto* simulate = app.add_subcommand("simulate", "generate the synthetic benchmark");
  common(simulate);
  auto* match = app.add_subcommand("match", "match predictions to ground truth");
  common(match);
  match->add_option("--pred", opts.pred, "prediction file")->required();
  match->add_option("--gt", opts.gt, "ground-truth file")->required();
  auto* train = app.add_subcommand("train", "train the model");
  common(train);
  train->add_option("--data", opts.data, "benchmark directory written by simulate");
  auto* eval = app.add_subcommand("eval", "evaluate a checkpoint over modality subsets");
  common(eval);
  data(eval);
  eval->add_option("--checkpoint", opts.checkpoint, "checkpoint.json")->required();
  eval->add_option("--format", opts.format, "json or table");
  auto* analyze = app.add_subcommand("analyze", "MAM label distribution per class as CSV");
  common(analyze);
  data(analyze);
  analyze->add_option("--checkpoint", opts.checkpoint, "checkpoint.json")->required();
  auto* gradcheck = app.add_subcommand("gradcheck", "finite-difference gradient suite");
  common(gradcheck);
  auto* oracle = app.add_subcommand("oracle", "assignment and MAM oracle sweeps");
  common(oracle);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e, std::cerr, std::cerr);
    return rc == 0 ? 0 : bixformer::kExitConfig;
  }
  const std::string verb = app.get_subcommands().front()->get_name();
  return bixformer::run_command(verb, opts, std::cout, std::cerr);
}
