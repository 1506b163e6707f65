#pragma once

#include <iomanip>
#include <sstream>

#include "dgm/config.hpp"
#include "json.hpp"

namespace dgm {

// One multiply-add counts as one unit.
struct CostTerm {
  std::string module;
  std::string name;
  std::uint64_t madds = 0;
};

struct ParamTerm {
  std::string name;
  std::uint64_t count = 0;
};

struct CostReport {
  std::string model;
  nlohmann::json config;
  std::vector<CostTerm> terms;
  std::vector<ParamTerm> params;

  std::uint64_t total_madds() const {
    std::uint64_t s = 0;
    for (const auto& t : terms) s += t.madds;
    return s;
  }
  std::uint64_t total_params() const {
    std::uint64_t s = 0;
    for (const auto& p : params) s += p.count;
    return s;
  }
  std::uint64_t module_madds(const std::string& module) const {
    std::uint64_t s = 0;
    for (const auto& t : terms)
      if (t.module == module) s += t.madds;
    return s;
  }
  std::map<std::string, std::uint64_t> modules() const {
    std::map<std::string, std::uint64_t> m;
    for (const auto& t : terms) m[t.module] += t.madds;
    return m;
  }

  nlohmann::json to_json() const {
    nlohmann::json terms_j = nlohmann::json::array(), params_j = nlohmann::json::array();
    for (const auto& t : terms) terms_j.push_back({{"module", t.module}, {"name", t.name}, {"madds", t.madds}});
    for (const auto& p : params) params_j.push_back({{"name", p.name}, {"count", p.count}});
    return {{"model", model},
            {"config", config},
            {"terms", terms_j},
            {"modules", modules()},
            {"params", params_j},
            {"total_madds", total_madds()},
            {"total_params", total_params()}};
  }

  std::string to_text() const {
    std::ostringstream out;
    out << model << "\n";
    for (const auto& [m, v] : modules()) out << "  " << std::left << std::setw(20) << m << std::right << std::setw(18) << v << "\n";
    out << "  " << std::left << std::setw(20) << "total madds" << std::right << std::setw(18) << total_madds() << "\n";
    out << "  " << std::left << std::setw(20) << "total params" << std::right << std::setw(18) << total_params() << "\n";
    return out.str();
  }
};

struct Resolution {
  std::size_t height = 0;
  std::size_t width = 0;
};

/// Assumed nonzeros per row of the superpixel adjacency (planar RAG bound).
inline constexpr std::uint64_t kRagDegree = 6;

/// Closed-form cost of the graph pipeline for `n1` superpixels.
inline CostReport count_dgm(const HierarchyConfig& cfg, const std::vector<Resolution>& res,
                            const std::vector<std::size_t>& channels, std::size_t n1) {
  cfg.validate();
  if (res.size() != cfg.levels || channels.size() != cfg.levels)
    throw Error(ErrorCode::InvalidConfig, "one resolution and channel count per level");
  if (n1 == 0) throw Error(ErrorCode::InvalidConfig, "N_1 must be >= 1");
  using u64 = std::uint64_t;
  const u64 L = cfg.levels, D = cfg.graph_width, K = cfg.em_iters(), N1 = n1;
  std::vector<u64> n{N1};
  for (u64 l = 1; l < L; ++l) n.push_back(HierarchyConfig::pooled_size(static_cast<std::size_t>(n.back())));
  auto above = [&](u64 l) { return l + 1 < L ? n[l + 1] : u64{1}; };  // 0-based level l -> size of level l+1 or readout

  CostReport r;
  r.model = "dgm";
  r.config = {{"levels", L}, {"graph_width", D}, {"em_iters", K}, {"n1", N1}, {"sizes", n},
              {"tdmp", cfg.tdmp_enabled}, {"intra_level_conv", cfg.intra_level_conv}};
  for (const auto& x : res) r.config["resolutions"].push_back({x.height, x.width});
  r.config["channels"] = channels;
  auto add = [&](const char* module, std::string name, u64 v) { r.terms.push_back({module, std::move(name), v}); };
  auto lvl = [](const char* what, u64 l) { return std::string(what) + "." + std::to_string(l + 1); };

  for (u64 l = 0; l < L; ++l) {
    const u64 hw = static_cast<u64>(res[l].height) * res[l].width, c = channels[l];
    add("superpixel_pool", lvl("pool", l), c * hw);
    add("input_proj", lvl("input_proj", l), N1 * c * D);
  }
  for (u64 l = 0; l + 1 < L; ++l) {
    const u64 N = n[l], m = n[l + 1];
    add("emgp", lvl("em", l), K * N * m * (D + 1));
    add("emgp", lvl("centres", l), m * N * D);
    const u64 nnz = l == 0 ? kRagDegree * N : N * N;
    add("adjacency_pool", lvl("adjacency", l), nnz * m + N * m * m);
    if (l >= 1) add("projection", lvl("cumulative", l), N1 * N * m);
    add("projection", lvl("gconv", l + 1), N1 * m * D + m * D * D);
    if (cfg.intra_level_conv) add("intra_conv", lvl("gconv", l + 1), m * m * D + m * D * D);
  }
  add("readout", "mean", n[L - 1] * D);
  if (cfg.tdmp_enabled) {
    for (u64 l = 0; l < L; ++l) {
      const u64 N = n[l], m = above(l);
      add("tdmp", lvl("edges", l), N * m * D);
      add("tdmp", lvl("gconv", l), N * m * D + N * D * D);
    }
    for (u64 l = 2; l < L; ++l) add("tdmp", lvl("chain", l), N1 * n[l - 1] * n[l]);
  }
  for (u64 l = 0; l < L; ++l) {
    add("reprojection", lvl("gconv", l), N1 * n[l] * D + N1 * D * D);
    add("reprojection", lvl("output_proj", l), N1 * D * channels[l]);
  }

  for (u64 l = 0; l < L; ++l) {
    const u64 c = channels[l];
    r.params.push_back({lvl("input_proj", l), c * D});
    if (l >= 1) r.params.push_back({lvl("project", l), D * D});
    if (l >= 1 && cfg.intra_level_conv) r.params.push_back({lvl("intra", l), D * D});
    if (cfg.tdmp_enabled) r.params.push_back({lvl("tdmp", l), D * D});
    r.params.push_back({lvl("reproject", l), D * D});
    r.params.push_back({lvl("output_proj", l), D * c});
  }
  return r;
}

/// Dense non-local block over an h x w map with c channels and c/2 embedding
/// channels: pairwise affinities plus aggregation, and three 1x1 projections.
inline CostReport count_nonlocal(std::size_t h, std::size_t w, std::size_t c) {
  if (h == 0 || w == 0 || c == 0) throw Error(ErrorCode::InvalidConfig, "non-local dims must be positive");
  using u64 = std::uint64_t;
  const u64 hw = static_cast<u64>(h) * w, ce = std::max<u64>(1, c / 2);
  CostReport r;
  r.model = "nonlocal";
  r.config = {{"height", h}, {"width", w}, {"channels", c}, {"embed_channels", ce}};
  r.terms.push_back({"pairwise", "affinity+aggregate", 2 * hw * hw * ce});
  for (const char* p : {"theta", "phi", "g"}) r.terms.push_back({"projection", p, hw * c * ce});
  for (const char* p : {"theta", "phi", "g"}) r.params.push_back({p, static_cast<u64>(c) * ce});
  return r;
}

/// Desk-scale defaults: 768 x 768 input, strides 4..32, 12 channels, 512 superpixels.
struct CostSetup {
  std::vector<Resolution> resolutions;
  std::vector<std::size_t> channels;
  std::size_t n1 = 512;
};

inline CostSetup desk_cost_setup(const HierarchyConfig& cfg, std::size_t image = 768, std::size_t channels = 12) {
  CostSetup s;
  s.n1 = cfg.max_superpixels;
  std::size_t stride = 4;
  for (std::size_t l = 0; l < cfg.levels; ++l, stride *= 2) {
    s.resolutions.push_back({std::max<std::size_t>(1, image / stride), std::max<std::size_t>(1, image / stride)});
    s.channels.push_back(channels);
  }
  return s;
}

}  // namespace dgm
