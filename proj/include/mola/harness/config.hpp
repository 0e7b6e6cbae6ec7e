#pragma once

// Experiment configuration: a versioned JSON document. Missing keys take
// defaults; unknown keys are rejected.

#include <cstdint>
#include <filesystem>
#include <initializer_list>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include "json.hpp"
#include "mola/error.hpp"
#include "mola/harness/data.hpp"
#include "mola/harness/tuning.hpp"
#include "mola/io.hpp"
#include "mola/laplace.hpp"
#include "mola/nn.hpp"

namespace mola::harness {

enum class Weighting { uniform, evidence };

struct LaplaceSettings {
  HessianKind structure = HessianKind::kfac;
  KfacDamping damping = KfacDamping::sqrt_split;
  double kfac_beta = 0.99;
  std::size_t kfac_batch_size = 32;
  PredictiveKind predictive = PredictiveKind::probit;
  std::size_t mc_samples = 100;
  Weighting weighting = Weighting::uniform;
};

struct BoundCheckSettings {
  std::vector<double> deltas{1.0, 1e1, 1e2, 1e3, 1e4, 1e5, 1e6};
  std::size_t point_index = 0;  // row of the training set used as x*
};

struct ExperimentConfig {
  BlobSpec train_data{3, 600, 2, 1.0, 6.0};
  std::size_t n_holdout = 1000;
  ShiftKind shift = ShiftKind::rotate;
  std::vector<OodKind> ood_sets{OodKind::far_box, OodKind::extra_blob};
  std::size_t n_ood = 500;
  MlpConfig model{};
  TrainConfig train{};
  std::size_t ensemble_size = 5;
  LaplaceSettings laplace{};
  TuneConfig tune{};
  std::size_t ece_bins = 15;
  BoundCheckSettings bound_check{};
  std::vector<std::uint64_t> seeds{0, 1, 2, 3, 4};
  std::string output_dir = "out";

  void validate() const {
    model.validate();
    train.validate();
    tune.validate();
    if (seeds.empty()) throw InvalidConfig("seeds must be nonempty");
    if (ensemble_size < 1) throw InvalidConfig("ensemble_size must be >= 1");
    if (ece_bins < 1) throw InvalidConfig("ece_bins must be >= 1");
    if (model.num_classes != train_data.num_classes) throw InvalidConfig("model.num_classes != dataset.num_classes");
    if (model.input_dim != train_data.dim) throw InvalidConfig("model.input_dim != dataset.input_dim");
    if (!(laplace.kfac_beta >= 0.0 && laplace.kfac_beta < 1.0)) throw InvalidConfig("kfac_beta must lie in [0, 1)");
    if (laplace.mc_samples < 1) throw InvalidConfig("mc_samples must be >= 1");
    if (bound_check.deltas.empty()) throw InvalidConfig("bound_check.deltas must be nonempty");
  }

  [[nodiscard]] PredictiveMethod predictive(std::uint64_t seed = 0) const {
    return {laplace.predictive, laplace.mc_samples, seed};
  }
  [[nodiscard]] FitOptions fit_options(std::uint64_t seed = 0) const {
    return {{laplace.kfac_beta, laplace.kfac_batch_size, seed}, laplace.damping};
  }
};

namespace detail {

using nlohmann::json;

inline void require_known_keys(const json& j, const char* where, std::initializer_list<const char*> keys) {
  if (!j.is_object()) throw InvalidConfig(std::string(where) + " must be a JSON object");
  const std::set<std::string> allowed(keys.begin(), keys.end());
  for (const auto& [k, v] : j.items())
    if (!allowed.count(k)) throw InvalidConfig("unknown key '" + k + "' in " + where);
}

template <typename T>
void read(const json& j, const char* key, T& out) {
  if (j.contains(key)) out = j.at(key).get<T>();
}

inline OptimizerKind optimizer_from_string(const std::string& s) {
  if (s == "adam") return OptimizerKind::adam;
  if (s == "sgd_nesterov") return OptimizerKind::sgd_nesterov;
  throw InvalidConfig("unknown optimizer '" + s + "'");
}

inline ShiftKind shift_from_string(const std::string& s) {
  if (s == "rotate") return ShiftKind::rotate;
  if (s == "gaussian_noise") return ShiftKind::gaussian_noise;
  if (s == "scale") return ShiftKind::scale;
  throw InvalidConfig("unknown shift kind '" + s + "'");
}

inline OodKind ood_from_string(const std::string& s) {
  if (s == "far_box") return OodKind::far_box;
  if (s == "extra_blob") return OodKind::extra_blob;
  throw InvalidConfig("unknown OOD kind '" + s + "'");
}

}  // namespace detail

inline constexpr int kConfigVersion = 1;

inline ExperimentConfig config_from_json(const nlohmann::json& j) {
  using detail::read;
  using detail::require_known_keys;
  ExperimentConfig cfg;
  try {
    require_known_keys(j, "config",
                       {"format_version", "dataset", "model", "train", "ensemble_size", "laplace", "tune", "metrics",
                        "bound_check", "seeds", "output_dir"});
    if (j.value("format_version", kConfigVersion) != kConfigVersion) throw InvalidConfig("unsupported format_version");

    if (j.contains("dataset")) {
      const auto& d = j["dataset"];
      require_known_keys(d, "dataset",
                         {"num_classes", "input_dim", "n_train", "n_holdout", "spread", "radius", "shift", "ood_sets",
                          "n_ood"});
      read(d, "num_classes", cfg.train_data.num_classes);
      read(d, "input_dim", cfg.train_data.dim);
      read(d, "n_train", cfg.train_data.n);
      read(d, "n_holdout", cfg.n_holdout);
      read(d, "spread", cfg.train_data.spread);
      read(d, "radius", cfg.train_data.radius);
      read(d, "n_ood", cfg.n_ood);
      if (d.contains("shift")) cfg.shift = detail::shift_from_string(d["shift"].get<std::string>());
      if (d.contains("ood_sets")) {
        cfg.ood_sets.clear();
        for (const auto& s : d["ood_sets"]) cfg.ood_sets.push_back(detail::ood_from_string(s.get<std::string>()));
      }
    }
    cfg.model.num_classes = cfg.train_data.num_classes;
    cfg.model.input_dim = cfg.train_data.dim;

    if (j.contains("model")) {
      const auto& m = j["model"];
      require_known_keys(m, "model", {"hidden_dims", "use_bias"});
      read(m, "hidden_dims", cfg.model.hidden_dims);
      read(m, "use_bias", cfg.model.use_bias);
    }
    if (j.contains("train")) {
      const auto& t = j["train"];
      require_known_keys(t, "train", {"epochs", "batch_size", "learning_rate", "weight_decay", "optimizer"});
      read(t, "epochs", cfg.train.epochs);
      read(t, "batch_size", cfg.train.batch_size);
      read(t, "learning_rate", cfg.train.learning_rate);
      read(t, "weight_decay", cfg.train.weight_decay);
      if (t.contains("optimizer")) cfg.train.optimizer = detail::optimizer_from_string(t["optimizer"].get<std::string>());
    }
    read(j, "ensemble_size", cfg.ensemble_size);
    if (j.contains("laplace")) {
      const auto& l = j["laplace"];
      require_known_keys(l, "laplace",
                         {"structure", "kfac_damping", "kfac_beta", "kfac_batch_size", "predictive", "mc_samples",
                          "weighting"});
      if (l.contains("structure")) cfg.laplace.structure = io::hessian_kind_from_string(l["structure"].get<std::string>());
      if (l.contains("kfac_damping")) cfg.laplace.damping = io::damping_from_string(l["kfac_damping"].get<std::string>());
      read(l, "kfac_beta", cfg.laplace.kfac_beta);
      read(l, "kfac_batch_size", cfg.laplace.kfac_batch_size);
      read(l, "mc_samples", cfg.laplace.mc_samples);
      if (l.contains("predictive")) {
        const auto p = l["predictive"].get<std::string>();
        if (p == "probit") cfg.laplace.predictive = PredictiveKind::probit;
        else if (p == "mc") cfg.laplace.predictive = PredictiveKind::mc;
        else throw InvalidConfig("unknown predictive '" + p + "'");
      }
      if (l.contains("weighting")) {
        const auto w = l["weighting"].get<std::string>();
        if (w == "uniform") cfg.laplace.weighting = Weighting::uniform;
        else if (w == "evidence") cfg.laplace.weighting = Weighting::evidence;
        else throw InvalidConfig("unknown weighting '" + w + "'");
      }
    }
    if (j.contains("tune")) {
      const auto& t = j["tune"];
      require_known_keys(t, "tune",
                         {"grid_start", "grid_end", "grid_steps", "conf_threshold", "brier_threshold", "val_fraction",
                          "val_size"});
      read(t, "grid_start", cfg.tune.grid_start);
      read(t, "grid_end", cfg.tune.grid_end);
      read(t, "grid_steps", cfg.tune.grid_steps);
      read(t, "val_fraction", cfg.tune.val_fraction);
      read(t, "val_size", cfg.tune.val_size);
      if (t.contains("conf_threshold") && !t["conf_threshold"].is_null())
        cfg.tune.conf_threshold = t["conf_threshold"].get<double>();
      if (t.contains("brier_threshold") && !t["brier_threshold"].is_null())
        cfg.tune.brier_threshold = t["brier_threshold"].get<double>();
    }
    if (j.contains("metrics")) {
      require_known_keys(j["metrics"], "metrics", {"ece_bins"});
      read(j["metrics"], "ece_bins", cfg.ece_bins);
    }
    if (j.contains("bound_check")) {
      const auto& b = j["bound_check"];
      require_known_keys(b, "bound_check", {"deltas", "point_index"});
      read(b, "deltas", cfg.bound_check.deltas);
      read(b, "point_index", cfg.bound_check.point_index);
    }
    read(j, "seeds", cfg.seeds);
    read(j, "output_dir", cfg.output_dir);
  } catch (const nlohmann::json::exception& e) {
    throw InvalidConfig(std::string("config type error: ") + e.what());
  }
  cfg.validate();
  return cfg;
}

inline ExperimentConfig load_config(const std::filesystem::path& path) {
  if (!std::filesystem::exists(path)) throw InvalidConfig("config file '" + path.string() + "' does not exist");
  return config_from_json(io::read_json_file(path));
}

}  // namespace mola::harness
