// mola: command-line driver for training, Laplace fitting, prediction and
// the experiment pipelines.

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "mola/bounds.hpp"
#include "mola/error.hpp"
#include "mola/harness/config.hpp"
#include "mola/harness/experiments.hpp"
#include "mola/io.hpp"

namespace fs = std::filesystem;
using namespace mola;
using namespace mola::harness;

namespace {

struct CommonArgs {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::optional<std::string> out;
};

void add_common(CLI::App* cmd, CommonArgs& args) {
  cmd->add_option("--config", args.config, "Experiment configuration (JSON)")->required();
  cmd->add_option("--seed", args.seed, "Run a single seed instead of the configured list");
  cmd->add_option("--out", args.out, "Output directory (overrides output_dir)");
}

ExperimentConfig resolve(const CommonArgs& args) {
  ExperimentConfig cfg = load_config(args.config);
  if (args.seed) cfg.seeds = {*args.seed};
  if (args.out) cfg.output_dir = *args.out;
  return cfg;
}

std::ofstream open_csv(const fs::path& path) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream os(path);
  if (!os) throw InvalidConfig("cannot write '" + path.string() + "'");
  return os;
}

/// Streams rows to <name>.csv as each seed finishes, then writes the
/// per-group summary.
template <typename Runner>
void run_table(const ExperimentConfig& cfg, const std::string& name, Runner runner) {
  const fs::path dir = cfg.output_dir;
  const fs::path path = dir / (name + ".csv");
  std::ofstream os = open_csv(path);
  os << kMetricsCsvHeader << '\n';
  const auto rows = runner([&](const std::vector<MetricsRow>& batch) {
    for (const auto& r : batch) write_metrics_row(os, r);
    os.flush();
  });
  std::ofstream summary = open_csv(dir / (name + "_summary.csv"));
  write_summary_csv(summary, rows);
  std::cerr << "wrote " << rows.size() << " rows to " << path.string() << '\n';
}

std::string member_name(std::size_t k) { return "member_" + std::to_string(k) + ".json"; }
std::string component_name(std::size_t k) { return "component_" + std::to_string(k) + ".json"; }

int cmd_train(const CommonArgs& args) {
  const ExperimentConfig cfg = resolve(args);
  const std::uint64_t seed = cfg.seeds.front();
  const fs::path dir = cfg.output_dir;
  MlpConfig mc = cfg.model;
  mc.seed = derive_seed(seed, kTagInit);
  TrainConfig tc = cfg.train;
  tc.seed = derive_seed(seed, kTagShuffle);
  const Dataset train = make_blobs(cfg.train_data, derive_seed(seed, kTagTrainData));
  const auto nets = train_ensemble(mc, tc, train, cfg.ensemble_size);
  for (std::size_t k = 0; k < nets.size(); ++k) {
    io::save_mlp(dir / member_name(k), nets[k]);
    std::cout << member_name(k) << " train_accuracy=" << format_real(accuracy(nets[k], train)) << '\n';
  }
  return 0;
}

int cmd_fit_laplace(const CommonArgs& args) {
  const ExperimentConfig cfg = resolve(args);
  const std::uint64_t seed = cfg.seeds.front();
  const fs::path dir = cfg.output_dir;

  SeedRun run;
  run.seed = seed;
  run.train = make_blobs(cfg.train_data, derive_seed(seed, kTagTrainData));
  BlobSpec holdout = cfg.train_data;
  holdout.n = cfg.n_holdout;
  auto held = split_validation(make_blobs(holdout, derive_seed(seed, kTagHoldout)), cfg.tune.val_fraction,
                               cfg.tune.val_size, derive_seed(seed, kTagSplit));
  run.validation = std::move(held.validation);
  for (std::size_t k = 0; k < cfg.ensemble_size; ++k) {
    const fs::path p = dir / member_name(k);
    if (!fs::exists(p)) throw InvalidConfig("missing '" + p.string() + "'; run 'train' first");
    run.nets.push_back(io::load_mlp(p));
    run.components.push_back(fit(run.nets.back(), run.train, cfg.laplace.structure, 1.0,
                                 cfg.fit_options(derive_seed(seed, kTagKfac) + k)));
  }
  run.map_val_accuracy = accuracy(run.nets.front(), run.validation);
  run.conf_threshold = cfg.tune.conf_threshold.value_or(run.map_val_accuracy - 0.01);

  TuneResult tr;
  const MolaModel model = tuned_mixture(cfg, run, run.components, cfg.predictive(derive_seed(seed, kTagPredict)), &tr);
  std::vector<io::ManifestEntry> entries;
  for (std::size_t k = 0; k < model.components.size(); ++k) {
    io::write_json_file(dir / component_name(k), io::to_json(model.components[k], member_name(k)));
    entries.push_back({component_name(k), model.weights.pi[k]});
  }
  io::write_json_file(dir / "manifest.json", io::manifest_to_json(entries));
  std::cout << "prior_precision=" << format_real(tr.lambda) << " qualified=" << (tr.qualified ? "true" : "false")
            << " val_mmc=" << format_real(tr.val_mmc) << " threshold=" << format_real(run.conf_threshold) << '\n';
  if (!tr.qualified) std::cerr << "warning: no grid point met the confidence threshold\n";
  return 0;
}

/// Reads whitespace- or comma-separated rows of input features.
Matrix read_inputs(std::istream& in, std::size_t dim) {
  std::vector<double> data;
  std::string line;
  std::size_t rows = 0;
  while (std::getline(in, line)) {
    for (char& ch : line)
      if (ch == ',') ch = ' ';
    std::istringstream ls(line);
    std::vector<double> row;
    double v;
    while (ls >> v) row.push_back(v);
    if (row.empty()) continue;
    if (row.size() != dim)
      throw DimensionMismatch("input row " + std::to_string(rows + 1) + " has " + std::to_string(row.size()) +
                              " values, expected " + std::to_string(dim));
    data.insert(data.end(), row.begin(), row.end());
    ++rows;
  }
  return Matrix(rows, dim, std::move(data));
}

int cmd_predict(const CommonArgs& args, const std::string& input, const std::string& method_name) {
  const ExperimentConfig cfg = resolve(args);
  const fs::path dir = cfg.output_dir;
  const MolaModel model = io::load_manifest(dir / "manifest.json");
  PredictiveMethod method = cfg.predictive(derive_seed(cfg.seeds.front(), kTagPredict));
  if (method_name == "mc") method.kind = PredictiveKind::mc;
  else if (method_name == "probit") method.kind = PredictiveKind::probit;
  else if (!method_name.empty()) throw InvalidConfig("unknown predictive '" + method_name + "'");

  Matrix x;
  if (input.empty() || input == "-") {
    x = read_inputs(std::cin, cfg.model.input_dim);
  } else {
    std::ifstream in(input);
    if (!in) throw InvalidConfig("cannot open '" + input + "'");
    x = read_inputs(in, cfg.model.input_dim);
  }
  for (std::size_t i = 0; i < x.rows(); ++i) {
    PredictiveMethod m = method;
    m.seed = method.seed + i;
    const Vector p = mola_predict(model, x.row(i), m);
    for (std::size_t c = 0; c < p.size(); ++c) std::cout << (c ? "," : "") << format_real(p[c]);
    std::cout << '\n';
  }
  return 0;
}

int cmd_bound_check(const CommonArgs& args) {
  const ExperimentConfig cfg = resolve(args);
  const BoundCheckResult res = run_bound_check(cfg, cfg.seeds.front());
  write_bound_csv(std::cout, res.report);
  std::ofstream os = open_csv(fs::path(cfg.output_dir) / "bound_check.csv");
  write_bound_csv(os, res.report);
  std::cerr << "prior_precision=" << format_real(res.tune.lambda) << " onset_delta="
            << format_real(res.report.rows[res.report.onset].delta)
            << " bound_holds=" << (res.report.bound_holds ? "true" : "false") << '\n';
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Mixtures of Laplace approximations over last-layer posteriors"};
  app.require_subcommand(1);

  CommonArgs train_args, fit_args, predict_args, eval_args, ood_args, bound_args, variants_args, sweep_args;
  std::string predict_input, predict_method;
  std::size_t sweep_max_k = 10;

  auto* train = app.add_subcommand("train", "Train the ensemble members for one seed");
  add_common(train, train_args);
  auto* fitl = app.add_subcommand("fit-laplace", "Fit and tune last-layer Laplace components, write a manifest");
  add_common(fitl, fit_args);
  auto* predict = app.add_subcommand("predict", "Mixture predictive probabilities for input rows");
  add_common(predict, predict_args);
  predict->add_option("--input", predict_input, "File of feature rows ('-' or unset reads stdin)");
  predict->add_option("--method", predict_method, "Predictive approximation: probit or mc");
  auto* eval = app.add_subcommand("eval", "Dataset-shift experiment: MAP, DE, LLLA and MoLA over severities 0..5");
  add_common(eval, eval_args);
  auto* ood = app.add_subcommand("ood", "OOD experiment: MMC and AUROC per OOD set");
  add_common(ood, ood_args);
  auto* bound = app.add_subcommand("bound-check", "Far-away confidence bound verifier (bias-free members)");
  add_common(bound, bound_args);
  auto* variants = app.add_subcommand("variants", "Single-component Hessian x predictive variation study");
  add_common(variants, variants_args);
  auto* sweep = app.add_subcommand("sweep", "DE and MoLA with 1..K components");
  add_common(sweep, sweep_args);
  sweep->add_option("--max-k", sweep_max_k, "Largest number of components")->check(CLI::PositiveNumber);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 1;
  }

  try {
    if (*train) return cmd_train(train_args);
    if (*fitl) return cmd_fit_laplace(fit_args);
    if (*predict) return cmd_predict(predict_args, predict_input, predict_method);
    if (*bound) return cmd_bound_check(bound_args);
    if (*eval) {
      const auto cfg = resolve(eval_args);
      run_table(cfg, "shift", [&](const RowSink& s) { return run_shift_experiment(cfg, s); });
    } else if (*ood) {
      const auto cfg = resolve(ood_args);
      run_table(cfg, "ood", [&](const RowSink& s) { return run_ood_experiment(cfg, s); });
    } else if (*variants) {
      const auto cfg = resolve(variants_args);
      run_table(cfg, "variants", [&](const RowSink& s) { return run_variation_study(cfg, s); });
    } else if (*sweep) {
      const auto cfg = resolve(sweep_args);
      run_table(cfg, "sweep", [&](const RowSink& s) { return run_ensemble_sweep(cfg, sweep_max_k, s); });
    }
    return 0;
  } catch (const Error& e) {
    std::cerr << "error: " << e.what() << '\n';
    return e.category() == ErrorCategory::config ? 1 : 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 2;
  }
}
