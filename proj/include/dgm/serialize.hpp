#pragma once

#include <openssl/evp.h>

#include "dgm/hierarchy.hpp"
#include "dgm/tensor_io.hpp"
#include "json.hpp"

namespace dgm {

using nlohmann::json;

// ---------------------------------------------------------------------------
// Config

inline json config_to_json(const HierarchyConfig& c) {
  json j = {{"levels", c.levels},
            {"graph_width", c.graph_width},
            {"sigma", c.sigma},
            {"em_iters_train", c.em_iters_train},
            {"em_iters_eval", c.em_iters_eval},
            {"em_iters", c.em_iters()},
            {"mode", to_string(c.mode)},
            {"init", to_string(c.init)},
            {"seed", c.seed},
            {"tdmp_enabled", c.tdmp_enabled},
            {"intra_level_conv", c.intra_level_conv},
            {"stop_gradient_assignments", c.stop_gradient_assignments},
            {"activation", to_string(c.activation)},
            {"normalize_incoming", c.normalize_incoming},
            {"max_superpixels", c.max_superpixels}};
  j["em_iters_override"] = c.em_iters_override ? json(*c.em_iters_override) : json(nullptr);
  j["center_merge_epsilon"] = c.center_merge_epsilon ? json(*c.center_merge_epsilon) : json(nullptr);
  return j;
}

inline HierarchyConfig config_from_json(const json& j) {
  try {
    HierarchyConfig c;
    c.levels = j.at("levels").get<std::size_t>();
    c.graph_width = j.at("graph_width").get<std::size_t>();
    c.sigma = j.at("sigma").get<double>();
    c.em_iters_train = j.at("em_iters_train").get<std::size_t>();
    c.em_iters_eval = j.at("em_iters_eval").get<std::size_t>();
    if (!j.at("em_iters_override").is_null()) c.em_iters_override = j.at("em_iters_override").get<std::size_t>();
    const auto mode = j.at("mode").get<std::string>();
    if (mode != "train" && mode != "eval") throw Error(ErrorCode::Parse, "unknown mode " + mode);
    c.mode = mode == "train" ? RunMode::Train : RunMode::Eval;
    const auto init = j.at("init").get<std::string>();
    if (init != "stride" && init != "seeded-random") throw Error(ErrorCode::Parse, "unknown init " + init);
    c.init = init == "stride" ? InitStrategy::Stride : InitStrategy::SeededRandom;
    c.seed = j.at("seed").get<std::uint64_t>();
    c.tdmp_enabled = j.at("tdmp_enabled").get<bool>();
    c.intra_level_conv = j.at("intra_level_conv").get<bool>();
    c.stop_gradient_assignments = j.at("stop_gradient_assignments").get<bool>();
    const auto act = j.at("activation").get<std::string>();
    if (act != "relu-l2norm" && act != "sigmoid") throw Error(ErrorCode::Parse, "unknown activation " + act);
    c.activation = act == "sigmoid" ? Nonlinearity::Sigmoid : Nonlinearity::ReluL2Norm;
    c.normalize_incoming = j.at("normalize_incoming").get<bool>();
    c.max_superpixels = j.at("max_superpixels").get<std::size_t>();
    if (!j.at("center_merge_epsilon").is_null()) c.center_merge_epsilon = j.at("center_merge_epsilon").get<double>();
    c.validate();
    return c;
  } catch (const json::exception& e) {
    throw Error(ErrorCode::Parse, std::string("bad config: ") + e.what());
  }
}

// ---------------------------------------------------------------------------
// Hierarchy

template <class T>
json matrix_to_json(const Matrix<T>& m) {
  return {{"rows", m.rows()}, {"cols", m.cols()}, {"data", std::vector<T>(m.data().begin(), m.data().end())}};
}

template <class T>
Matrix<T> matrix_from_json(const json& j) {
  const auto r = j.at("rows").get<std::size_t>(), c = j.at("cols").get<std::size_t>();
  auto d = j.at("data").get<std::vector<T>>();
  if (d.size() != r * c) throw Error(ErrorCode::Parse, "matrix data length != rows * cols");
  return Matrix<T>(r, c, std::move(d));
}

/// Levels carry `num_vertices` and an upper-triangle edge list [i, j, w].
/// Without `with_features` the vertex, centre and pooled matrices are left out
/// (enough for grouping maps and clicks, not for reloading into the pipeline).
template <class T>
json hierarchy_to_json(const Hierarchy<T>& h, bool with_features = true) {
  auto list = [](const std::vector<Matrix<T>>& v) {
    json a = json::array();
    for (const auto& m : v) a.push_back(matrix_to_json(m));
    return a;
  };
  json levels = json::array();
  for (const auto& g : h.levels) {
    json edges = json::array();
    for (std::size_t i = 0; i < g.adjacency.rows(); ++i)
      for (std::size_t j = i + 1; j < g.adjacency.cols(); ++j)
        if (g.adjacency(i, j) != T(0)) edges.push_back({i, j, g.adjacency(i, j)});
    json lv = {{"level", g.level}, {"num_vertices", g.size()}, {"edges", std::move(edges)}};
    if (with_features) lv["vertex_features"] = matrix_to_json(g.vertices);
    levels.push_back(std::move(lv));
  }
  json j = {{"format", "dgm-hierarchy"},
            {"version", 1},
            {"config", config_to_json(h.config)},
            {"image_height", h.image_height},
            {"image_width", h.image_width},
            {"sizes", h.sizes()},
            {"levels", levels},
            {"assignments", list(h.assignments)},
            {"cumulative", list(h.cumulative)},
            {"readout", matrix_to_json(h.readout)},
            {"top_down", list(h.top_down)},
            {"has_features", with_features}};
  if (with_features) {
    j["centers"] = list(h.centers);
    j["pooled"] = list(h.pooled);
  }
  return j;
}

template <class T>
Hierarchy<T> hierarchy_from_json(const json& j) {
  try {
    if (j.at("format") != "dgm-hierarchy") throw Error(ErrorCode::Parse, "not a hierarchy document");
    if (j.at("version") != 1) throw Error(ErrorCode::UnsupportedVersion, "unsupported hierarchy version");
    auto list = [](const json& a) {
      std::vector<Matrix<T>> v;
      for (const auto& m : a) v.push_back(matrix_from_json<T>(m));
      return v;
    };
    const bool features = j.at("has_features").get<bool>();
    Hierarchy<T> h;
    h.config = config_from_json(j.at("config"));
    h.image_height = j.at("image_height").get<std::size_t>();
    h.image_width = j.at("image_width").get<std::size_t>();
    for (const auto& g : j.at("levels")) {
      const auto n = g.at("num_vertices").get<std::size_t>();
      LevelGraph<T> lg{g.at("level").get<std::size_t>(), Matrix<T>(n, 0), Matrix<T>(n, n)};
      if (features) {
        lg.vertices = matrix_from_json<T>(g.at("vertex_features"));
        if (lg.vertices.rows() != n) throw Error(ErrorCode::ShapeMismatch, "vertex feature rows != num_vertices");
      }
      for (const auto& e : g.at("edges")) {
        const auto a = e.at(0).get<std::size_t>(), b = e.at(1).get<std::size_t>();
        if (a >= n || b >= n || a == b) throw Error(ErrorCode::Parse, "edge endpoint out of range");
        lg.adjacency(a, b) = lg.adjacency(b, a) = e.at(2).get<T>();
      }
      h.levels.push_back(std::move(lg));
    }
    h.assignments = list(j.at("assignments"));
    h.cumulative = list(j.at("cumulative"));
    h.readout = matrix_from_json<T>(j.at("readout"));
    h.top_down = list(j.at("top_down"));
    if (features) {
      h.centers = list(j.at("centers"));
      h.pooled = list(j.at("pooled"));
    }
    if (h.levels.empty()) throw Error(ErrorCode::Parse, "hierarchy without levels");
    if (h.assignments.size() + 1 != h.levels.size())
      throw Error(ErrorCode::LevelCountMismatch, "need one assignment matrix between consecutive levels");
    for (std::size_t l = 0; l < h.assignments.size(); ++l)
      if (h.assignments[l].rows() != h.levels[l].size() || h.assignments[l].cols() != h.levels[l + 1].size())
        throw Error(ErrorCode::ShapeMismatch, "assignment matrix shape does not match level sizes");
    return h;
  } catch (const json::exception& e) {
    throw Error(ErrorCode::Parse, std::string("bad hierarchy: ") + e.what());
  }
}

template <class T>
void save_hierarchy(const std::filesystem::path& p, const Hierarchy<T>& h, bool with_features = true) {
  write_file(p, hierarchy_to_json(h, with_features).dump() + "\n");
}

template <class T>
Hierarchy<T> load_hierarchy(const std::filesystem::path& p) {
  const auto bytes = read_file(p);
  json j = json::parse(bytes.begin(), bytes.end(), nullptr, false);
  if (j.is_discarded()) throw Error(ErrorCode::Parse, "invalid JSON in " + p.string());
  return hierarchy_from_json<T>(j);
}

// ---------------------------------------------------------------------------
// Hashes and manifests

inline std::string sha256_hex(std::span<const std::uint8_t> bytes) {
  unsigned char md[EVP_MAX_MD_SIZE];
  unsigned int len = 0;
  if (EVP_Digest(bytes.data(), bytes.size(), md, &len, EVP_sha256(), nullptr) != 1)
    throw Error(ErrorCode::Io, "SHA-256 failed");
  static constexpr char hex[] = "0123456789abcdef";
  std::string s;
  for (unsigned int i = 0; i < len; ++i) {
    s += hex[md[i] >> 4];
    s += hex[md[i] & 15];
  }
  return s;
}

inline std::string sha256_hex(const std::string& text) {
  return sha256_hex(std::span(reinterpret_cast<const std::uint8_t*>(text.data()), text.size()));
}

inline std::string sha256_file(const std::filesystem::path& p) { return sha256_hex(read_file(p)); }

/// Reproducibility record: command, config, seed and content hashes of every
/// input and output. Contains nothing time- or host-dependent.
struct Manifest {
  std::string command;
  json config = json::object();
  std::uint64_t seed = 0;
  std::map<std::string, std::string> inputs;   // name -> sha256
  std::map<std::string, std::string> outputs;  // file name relative to the output dir -> sha256

  void add_input(const std::string& name, const std::filesystem::path& p) { inputs[name] = sha256_file(p); }
  void add_output(const std::filesystem::path& dir, const std::string& name) { outputs[name] = sha256_file(dir / name); }

  json to_json() const {
    return {{"command", command}, {"config", config}, {"seed", seed}, {"inputs", inputs}, {"outputs", outputs}};
  }
  void save(const std::filesystem::path& p) const { write_file(p, to_json().dump(2) + "\n"); }
};

}  // namespace dgm
