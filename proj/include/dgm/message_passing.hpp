#pragma once

#include "dgm/hierarchy.hpp"

namespace dgm {

template <class T>
struct TopDownVars {
  std::vector<Var<T>> vertices;  // updated V^l, l = 1..L
  std::vector<Var<T>> edges;     // P~^l, l = 1..L
};

/// Top-down message passing from the readout (treated as a one-vertex level
/// L+1) down to level 1. Each level is updated from the already-updated level
/// above it.
template <class T>
TopDownVars<T> tdmp(Tape<T>& tape, const std::vector<Var<T>>& vertices, const Var<T>& readout,
                    const HierarchyConfig& cfg, const ParamVars<T>& params) {
  const std::size_t levels = vertices.size();
  if (levels == 0) throw Error(ErrorCode::EmptyGraph, "tdmp on an empty hierarchy");
  TopDownVars<T> out;
  out.vertices.resize(levels);
  out.edges.resize(levels);
  for (std::size_t l = levels; l >= 1; --l) {
    const Var<T>& hi = l == levels ? readout : out.vertices[l];
    const Var<T>& lo = vertices[l - 1];
    Var<T> edges = tdmp_edges(tape, lo, hi, cfg.sigma);
    out.edges[l - 1] = edges;
    out.vertices[l - 1] = gconv(tape, hi, lo, ad::transpose(tape, edges), T(1), require_var(params, param::tdmp(l)),
                                cfg.activation, cfg.normalize_incoming);
  }
  return out;
}

/// Returns a copy of `h` with vertex features updated top-down and the
/// top-down assignments stored. With top-down passing disabled in the
/// config, `h` is returned unchanged.
template <class T>
Hierarchy<T> tdmp(const Hierarchy<T>& h, const ParamSet<T>& params) {
  if (!h.config.tdmp_enabled) return h;
  Tape<T> tape(false);
  std::vector<Var<T>> v;
  for (const auto& g : h.levels) v.push_back(tape.constant(g.vertices));
  const auto r = tdmp(tape, v, tape.constant(h.readout), h.config, bind_params(tape, params));
  Hierarchy<T> out = h;
  for (std::size_t l = 0; l < h.levels.size(); ++l) {
    out.levels[l].vertices = r.vertices[l].value();
    out.top_down.push_back(r.edges[l].value());
  }
  return out;
}

/// Re-projects each level's vertices onto the level-1 superpixels through
/// (V^l, U^l, I + P~^1 ... P~^{l-1}) and broadcasts the result to F^l's grid.
/// `top_down` may be empty when top-down passing is disabled; the bottom-up
/// cumulative assignments are used instead.
template <class T>
std::vector<Var<T>> reproject(Tape<T>& tape, const std::vector<Var<T>>& vertices, const std::vector<Var<T>>& pooled,
                              const std::vector<Var<T>>& top_down, const std::vector<Var<T>>& cumulative,
                              const GraphInputs<T>& in, const HierarchyConfig& cfg, const ParamVars<T>& params) {
  const std::size_t levels = vertices.size();
  const std::size_t n1 = in.num_regions();
  if (cfg.tdmp_enabled && top_down.size() != levels)
    throw Error(ErrorCode::MissingTopDownState, "run top-down message passing before re-projection");
  if (in.grids.size() < levels || pooled.size() < levels)
    throw Error(ErrorCode::LevelCountMismatch, "re-projection needs inputs for every level");

  std::vector<Var<T>> out;
  Var<T> chain;  // N_1 x N_l
  for (std::size_t l = 1; l <= levels; ++l) {
    if (l == 1) {
      chain = tape.constant(Matrix<T>::identity(n1));
    } else if (cfg.tdmp_enabled) {
      chain = l == 2 ? top_down[0] : ad::matmul(tape, chain, top_down[l - 2]);
    } else {
      chain = cumulative[l - 2];
    }
    const Var<T>& v = vertices[l - 1];
    if (chain.rows() != n1 || chain.cols() != v.rows())
      throw Error(ErrorCode::ShapeMismatch, "re-projection chain does not match level size");
    Var<T> u_hat = gconv(tape, v, pooled[l - 1], ad::transpose(tape, chain), T(1),
                         require_var(params, param::reproject(l)), cfg.activation, cfg.normalize_incoming);
    Var<T> rows = ad::matmul(tape, u_hat, require_var(params, param::output_proj(l)));
    if (rows.cols() != in.features[l - 1].channels)
      throw Error(ErrorCode::DimensionMismatch, "output projection width != C_l");
    out.push_back(ad::scatter_to_pixels(tape, rows, in.grids[l - 1]));
  }
  return out;
}

template <class T>
std::vector<FeatureMap<T>> reproject(const Hierarchy<T>& h, const GraphInputs<T>& in, const ParamSet<T>& params) {
  if (h.config.tdmp_enabled && !h.has_top_down())
    throw Error(ErrorCode::MissingTopDownState, "run top-down message passing before re-projection");
  Tape<T> tape(false);
  std::vector<Var<T>> v, u, td, cum;
  for (const auto& g : h.levels) v.push_back(tape.constant(g.vertices));
  for (const auto& m : h.pooled) u.push_back(tape.constant(m));
  for (const auto& m : h.top_down) td.push_back(tape.constant(m));
  for (const auto& m : h.cumulative) cum.push_back(tape.constant(m));
  const auto maps = reproject(tape, v, u, td, cum, in, h.config, bind_params(tape, params));
  std::vector<FeatureMap<T>> out;
  for (std::size_t l = 0; l < maps.size(); ++l) {
    const auto& f = in.features[l];
    out.emplace_back(f.channels, f.height, f.width, maps[l].value());
  }
  return out;
}

// ---------------------------------------------------------------------------
// Whole graph pipeline: bottom-up, top-down, re-projection

template <class T>
struct GraphForward {
  BottomUpVars<T> bottom_up;
  TopDownVars<T> top_down;          // empty when disabled
  std::vector<Var<T>> vertices;     // final V^l fed to re-projection
  std::vector<Var<T>> reprojected;  // F-hat^l, C_l x (h_l w_l)
};

template <class T>
GraphForward<T> forward_graph(Tape<T>& tape, const GraphInputs<T>& in, const HierarchyConfig& cfg,
                              const ParamVars<T>& params) {
  GraphForward<T> out;
  out.bottom_up = forward_bottom_up(tape, in, cfg, params);
  if (cfg.tdmp_enabled) {
    out.top_down = tdmp(tape, out.bottom_up.vertices, out.bottom_up.readout, cfg, params);
    out.vertices = out.top_down.vertices;
  } else {
    out.vertices = out.bottom_up.vertices;
  }
  out.reprojected = reproject(tape, out.vertices, out.bottom_up.pooled, out.top_down.edges, out.bottom_up.cumulative,
                              in, cfg, params);
  return out;
}

template <class T>
struct PipelineResult {
  Hierarchy<T> bottom_up;  // before top-down passing
  Hierarchy<T> refined;    // after top-down passing (== bottom_up when disabled)
  std::vector<FeatureMap<T>> reprojected;
};

template <class T>
PipelineResult<T> run_graph_pipeline(const GraphInputs<T>& in, const HierarchyConfig& cfg, const ParamSet<T>& params) {
  Tape<T> tape(false);
  const auto fwd = forward_graph(tape, in, cfg, bind_params(tape, params));
  PipelineResult<T> r;
  r.bottom_up = to_hierarchy(fwd.bottom_up, in, cfg);
  r.refined = r.bottom_up;
  if (cfg.tdmp_enabled) {
    for (std::size_t l = 0; l < fwd.vertices.size(); ++l) {
      r.refined.levels[l].vertices = fwd.vertices[l].value();
      r.refined.top_down.push_back(fwd.top_down.edges[l].value());
    }
  }
  for (std::size_t l = 0; l < fwd.reprojected.size(); ++l) {
    const auto& f = in.features[l];
    r.reprojected.emplace_back(f.channels, f.height, f.width, fwd.reprojected[l].value());
  }
  return r;
}

}  // namespace dgm
