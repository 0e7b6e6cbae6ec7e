#pragma once

// JSON checkpoints for networks, Laplace components and mixture manifests.
// Doubles are written in shortest round-trip form, so reloading is bit-exact.

#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "json.hpp"
#include "mola/error.hpp"
#include "mola/laplace.hpp"
#include "mola/mixture.hpp"
#include "mola/nn.hpp"

namespace mola::io {

using nlohmann::json;

inline constexpr int kFormatVersion = 1;

inline json to_json(const Matrix& m) { return {{"rows", m.rows()}, {"cols", m.cols()}, {"data", m.data()}}; }

inline Matrix matrix_from_json(const json& j) {
  return Matrix(j.at("rows").get<std::size_t>(), j.at("cols").get<std::size_t>(),
                j.at("data").get<std::vector<double>>());
}

inline void check_header(const json& j, const char* kind) {
  if (j.value("format_version", 0) != kFormatVersion)
    throw InvalidConfig(std::string("unsupported format_version in ") + kind + " checkpoint");
  if (j.value("kind", std::string()) != kind) throw InvalidConfig(std::string("expected a ") + kind + " document");
}

inline json to_json(const Mlp& net) {
  json layers = json::array();
  for (const auto& l : net.hidden) layers.push_back({{"weight", to_json(l.weight)}, {"bias", l.bias}});
  return {{"format_version", kFormatVersion},
          {"kind", "mlp"},
          {"config",
           {{"input_dim", net.config.input_dim},
            {"hidden_dims", net.config.hidden_dims},
            {"num_classes", net.config.num_classes},
            {"use_bias", net.config.use_bias},
            {"seed", net.config.seed}}},
          {"hidden", layers},
          {"head", to_json(net.head)}};
}

inline Mlp mlp_from_json(const json& j) {
  try {
    check_header(j, "mlp");
    const auto& c = j.at("config");
    MlpConfig cfg;
    cfg.input_dim = c.at("input_dim").get<std::size_t>();
    cfg.hidden_dims = c.at("hidden_dims").get<std::vector<std::size_t>>();
    cfg.num_classes = c.at("num_classes").get<std::size_t>();
    cfg.use_bias = c.at("use_bias").get<bool>();
    cfg.seed = c.at("seed").get<std::uint64_t>();
    cfg.validate();
    Mlp net{cfg, {}, matrix_from_json(j.at("head"))};
    std::size_t fan_in = cfg.input_dim;
    const auto& layers = j.at("hidden");
    if (layers.size() != cfg.hidden_dims.size()) throw InvalidConfig("hidden layer count != config");
    for (std::size_t l = 0; l < layers.size(); ++l) {
      DenseLayer layer{matrix_from_json(layers[l].at("weight")), layers[l].at("bias").get<Vector>()};
      if (layer.weight.rows() != cfg.hidden_dims[l] || layer.weight.cols() != fan_in)
        throw DimensionMismatch("hidden layer shape disagrees with config");
      if (layer.bias.size() != (cfg.use_bias ? cfg.hidden_dims[l] : 0))
        throw DimensionMismatch("bias length disagrees with config");
      net.hidden.push_back(std::move(layer));
      fan_in = cfg.hidden_dims[l];
    }
    if (net.head.rows() != cfg.num_classes || net.head.cols() != cfg.feature_dim())
      throw DimensionMismatch("head shape disagrees with config");
    return net;
  } catch (const json::exception& e) {
    throw InvalidConfig(std::string("malformed mlp checkpoint: ") + e.what());
  }
}

inline const char* to_string(HessianKind k) {
  switch (k) {
    case HessianKind::full: return "full";
    case HessianKind::kfac: return "kfac";
    case HessianKind::diag: return "diag";
  }
  return "?";
}

inline HessianKind hessian_kind_from_string(const std::string& s) {
  if (s == "full") return HessianKind::full;
  if (s == "kfac") return HessianKind::kfac;
  if (s == "diag") return HessianKind::diag;
  throw InvalidConfig("unknown Hessian structure '" + s + "'");
}

inline const char* to_string(KfacDamping d) { return d == KfacDamping::sqrt_split ? "sqrt_split" : "eigen_exact"; }

inline KfacDamping damping_from_string(const std::string& s) {
  if (s == "sqrt_split") return KfacDamping::sqrt_split;
  if (s == "eigen_exact") return KfacDamping::eigen_exact;
  throw InvalidConfig("unknown K-FAC damping '" + s + "'");
}

/// feature_net_ref is stored verbatim; loaders resolve it relative to the
/// component file.
inline json to_json(const LaplaceComponent& comp, const std::string& feature_net_ref) {
  json factors;
  std::visit(
      [&](const auto& h) {
        using T = std::decay_t<decltype(h)>;
        if constexpr (std::is_same_v<T, FullHessian>) factors = {{"h", to_json(h.h)}};
        else if constexpr (std::is_same_v<T, KfacHessian>) factors = {{"a", to_json(h.a)}, {"b", to_json(h.b)}};
        else factors = {{"d", h.d}};
      },
      comp.hessian);
  return {{"format_version", kFormatVersion},
          {"kind", "laplace_component"},
          {"structure", to_string(comp.kind())},
          {"kfac_damping", to_string(comp.damping)},
          {"prior_precision", comp.prior_precision},
          {"n_train", comp.n_train},
          {"log_likelihood", comp.log_likelihood},
          {"w_map", to_json(comp.w_map())},
          {"factors", factors},
          {"log_marglik", comp.log_marglik},
          {"feature_net", feature_net_ref}};
}

inline json read_json_file(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw InvalidConfig("cannot open '" + path.string() + "'");
  try {
    return json::parse(in);
  } catch (const json::exception& e) {
    throw InvalidConfig("'" + path.string() + "' is not valid JSON: " + e.what());
  }
}

inline void write_json_file(const std::filesystem::path& path, const json& j) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path);
  if (!out) throw InvalidConfig("cannot write '" + path.string() + "'");
  out << j.dump(1) << '\n';
}

inline LaplaceComponent component_from_json(const json& j, const Mlp& feature_net) {
  try {
    check_header(j, "laplace_component");
    const HessianKind kind = hessian_kind_from_string(j.at("structure").get<std::string>());
    const auto& f = j.at("factors");
    HessianStructure hess;
    switch (kind) {
      case HessianKind::full: hess = FullHessian{matrix_from_json(f.at("h"))}; break;
      case HessianKind::kfac: hess = KfacHessian{matrix_from_json(f.at("a")), matrix_from_json(f.at("b"))}; break;
      case HessianKind::diag: hess = DiagHessian{f.at("d").get<Vector>()}; break;
    }
    Mlp net = feature_net;
    net.head = matrix_from_json(j.at("w_map"));
    if (net.head.rows() != feature_net.head.rows() || net.head.cols() != feature_net.head.cols())
      throw DimensionMismatch("w_map shape disagrees with the feature network");
    return fit_from_hessian(std::move(net), std::move(hess), j.at("n_train").get<std::size_t>(),
                            j.at("log_likelihood").get<double>(), j.at("prior_precision").get<double>(),
                            damping_from_string(j.at("kfac_damping").get<std::string>()));
  } catch (const json::exception& e) {
    throw InvalidConfig(std::string("malformed component checkpoint: ") + e.what());
  }
}

inline void save_mlp(const std::filesystem::path& path, const Mlp& net) { write_json_file(path, to_json(net)); }

inline Mlp load_mlp(const std::filesystem::path& path) { return mlp_from_json(read_json_file(path)); }

inline LaplaceComponent load_component(const std::filesystem::path& path) {
  const json j = read_json_file(path);
  std::string ref;
  try {
    ref = j.at("feature_net").get<std::string>();
  } catch (const json::exception& e) {
    throw InvalidConfig("component '" + path.string() + "' has no feature_net reference: " + e.what());
  }
  return component_from_json(j, load_mlp(path.parent_path() / ref));
}

struct ManifestEntry {
  std::string path;  // relative to the manifest
  double weight = 0.0;
};

inline json manifest_to_json(const std::vector<ManifestEntry>& entries) {
  json comps = json::array();
  for (const auto& e : entries) comps.push_back({{"path", e.path}, {"weight", e.weight}});
  return {{"format_version", kFormatVersion}, {"kind", "mola_manifest"}, {"components", comps}};
}

inline MolaModel load_manifest(const std::filesystem::path& path) {
  const json j = read_json_file(path);
  try {
    check_header(j, "mola_manifest");
    std::vector<LaplaceComponent> comps;
    MixtureWeights w;
    for (const auto& e : j.at("components")) {
      comps.push_back(load_component(path.parent_path() / e.at("path").get<std::string>()));
      w.pi.push_back(e.at("weight").get<double>());
    }
    return make_mola(std::move(comps), std::move(w));
  } catch (const json::exception& e) {
    throw InvalidConfig(std::string("malformed manifest: ") + e.what());
  }
}

}  // namespace mola::io
