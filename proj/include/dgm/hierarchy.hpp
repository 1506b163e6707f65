#pragma once

#include <numeric>
#include <random>

#include "dgm/gconv.hpp"
#include "dgm/params.hpp"
#include "dgm/superpixel.hpp"

namespace dgm {

template <class T>
struct LevelGraph {
  std::size_t level = 1;
  Matrix<T> vertices;   // N x D
  Matrix<T> adjacency;  // N x N, symmetric, nonnegative

  std::size_t size() const { return vertices.rows(); }
  friend bool operator==(const LevelGraph&, const LevelGraph&) = default;
};

enum class Direction { BottomUp, TopDown };

template <class T>
struct AssignmentMatrix {
  Matrix<T> weights;  // N_src x N_dst
  Direction direction = Direction::BottomUp;
};

/// Graph hierarchy after the bottom-up pass, optionally refined top-down.
template <class T>
struct Hierarchy {
  HierarchyConfig config;
  std::size_t image_height = 0;
  std::size_t image_width = 0;
  std::vector<LevelGraph<T>> levels;  // l = 1..L
  std::vector<Matrix<T>> centers;     // pooled centres of level l+1 before projection, l = 1..L-1
  std::vector<Matrix<T>> assignments; // P^l: N_l x N_{l+1}, column-stochastic
  std::vector<Matrix<T>> cumulative;  // P^1 ... P^l: N_1 x N_{l+1}
  std::vector<Matrix<T>> pooled;      // U^l: N_1 x D
  Matrix<T> readout;                  // 1 x D
  std::vector<Matrix<T>> top_down;    // P~^l: N_l x N_{l+1} (N_L x 1 for the readout), row-stochastic

  std::size_t num_levels() const { return levels.size(); }
  bool has_top_down() const { return !top_down.empty(); }
  std::vector<std::size_t> sizes() const {
    std::vector<std::size_t> s;
    for (const auto& g : levels) s.push_back(g.size());
    return s;
  }

  friend bool operator==(const Hierarchy& a, const Hierarchy& b) {
    return a.image_height == b.image_height && a.image_width == b.image_width && a.levels == b.levels &&
           a.centers == b.centers && a.assignments == b.assignments && a.cumulative == b.cumulative &&
           a.pooled == b.pooled && a.readout == b.readout && a.top_down == b.top_down;
  }
};

/// Everything derived from the superpixel map and the grid feature maps that
/// stays constant during differentiation.
template <class T>
struct GraphInputs {
  SuperpixelMap superpixels;
  RegionAdjacency rag;
  std::vector<FeatureMap<T>> features;  // F^1..F^L
  std::vector<Matrix<T>> pooled;        // per level N_1 x C_l superpixel means
  std::vector<LabelGrid> grids;         // superpixel labels at each F^l resolution

  std::size_t num_regions() const { return superpixels.num_regions; }
  std::vector<std::size_t> channels() const {
    std::vector<std::size_t> c;
    for (const auto& f : features) c.push_back(f.channels);
    return c;
  }

  static GraphInputs make(std::vector<FeatureMap<T>> features, SuperpixelMap sp) {
    if (features.empty()) throw Error(ErrorCode::LevelCountMismatch, "at least one feature map required");
    for (std::size_t l = 0; l < features.size(); ++l) {
      const auto& f = features[l];
      if (f.height > sp.height || f.width > sp.width)
        throw Error(ErrorCode::DimensionMismatch, "feature map larger than the superpixel map");
      if (l > 0 && (f.height > features[l - 1].height || f.width > features[l - 1].width))
        throw Error(ErrorCode::DimensionMismatch, "feature resolutions must be non-increasing");
    }
    GraphInputs in;
    in.rag = build_rag(sp);
    for (const auto& f : features) {
      in.pooled.push_back(superpixel_pool(f, sp).features);
      in.grids.push_back(downsample_labels(sp, f.height, f.width));
    }
    in.superpixels = std::move(sp);
    in.features = std::move(features);
    return in;
  }
};

template <class T>
using ParamVars = std::map<std::string, Var<T>>;

template <class T>
ParamVars<T> bind_params(Tape<T>& tape, const ParamSet<T>& params) {
  ParamVars<T> out;
  for (const auto& [name, m] : params) out.emplace(name, tape.parameter(name, m));
  return out;
}

template <class T>
const Var<T>& require_var(const ParamVars<T>& p, const std::string& name) {
  const auto it = p.find(name);
  if (it == p.end()) throw Error(ErrorCode::DimensionMismatch, "missing parameter " + name);
  return it->second;
}

// ---------------------------------------------------------------------------
// Level-1 initialisation and grid-to-graph projection helpers

/// L2-normalised linear projection of pooled superpixel features into graph width.
template <class T>
Var<T> project_pooled(Tape<T>& tape, const Matrix<T>& pooled, const Var<T>& proj) {
  if (pooled.cols() != proj.rows()) throw Error(ErrorCode::DimensionMismatch, "projection expects C_l rows");
  return ad::l2_normalize_rows(tape, ad::matmul(tape, tape.constant(pooled), proj));
}

template <class T>
LevelGraph<T> init_level1(const FeatureMap<T>& f1, const SuperpixelMap& sp, const RegionAdjacency& rag,
                          const Matrix<T>& proj) {
  if (rag.num_regions != sp.num_regions) throw Error(ErrorCode::DimensionMismatch, "RAG and superpixel map disagree");
  if (f1.channels != proj.rows()) throw Error(ErrorCode::DimensionMismatch, "projection expects C_1 rows");
  Tape<T> tape(false);
  const auto pooled = superpixel_pool(f1, sp).features;
  return {1, project_pooled(tape, pooled, tape.constant(proj)).value(), rag.template dense<T>()};
}

// ---------------------------------------------------------------------------
// Expectation-maximisation graph pooling

inline std::vector<std::size_t> center_init_indices(std::size_t n, std::size_t m, InitStrategy init,
                                                    std::uint64_t seed) {
  if (n == 0) throw Error(ErrorCode::EmptyGraph, "cannot pool an empty graph");
  if (m < 1 || m > n) throw Error(ErrorCode::InvalidM, "need 1 <= m <= N");
  std::vector<std::size_t> idx;
  if (init == InitStrategy::Stride) {
    for (std::size_t i = 0; i < m; ++i) idx.push_back(i * n / m);
    return idx;
  }
  std::vector<std::size_t> all(n);
  std::iota(all.begin(), all.end(), 0);
  std::mt19937_64 rng(seed);
  std::sample(all.begin(), all.end(), std::back_inserter(idx), m, rng);
  return idx;
}

struct EmgpOptions {
  InitStrategy init = InitStrategy::Stride;
  std::uint64_t seed = 0;
  bool stop_gradient = false;
  std::optional<double> merge_epsilon;
};

template <class T>
struct EmgpVars {
  Var<T> centers;     // m x D
  Var<T> assignment;  // N x m, column-stochastic
  Var<T> adjacency;   // m x m
};

namespace detail {
// Groups centres closer than eps (single linkage); returns the column-merge
// matrix with 1/|group| entries, or an empty matrix when nothing merges.
template <class T>
Matrix<T> merge_matrix(const Matrix<T>& centers, double eps) {
  const std::size_t m = centers.rows();
  std::vector<std::size_t> parent(m);
  std::iota(parent.begin(), parent.end(), 0);
  auto find = [&](std::size_t x) {
    while (parent[x] != x) x = parent[x] = parent[parent[x]];
    return x;
  };
  const Matrix<T> d = linalg::pairwise_sqdist(centers, centers);
  bool any = false;
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = i + 1; j < m; ++j)
      if (std::sqrt(static_cast<double>(d(i, j))) < eps) {
        const auto a = find(i), b = find(j);
        if (a != b) {
          parent[std::max(a, b)] = std::min(a, b);
          any = true;
        }
      }
  if (!any) return {};
  std::vector<std::size_t> group_of(m), roots;
  for (std::size_t i = 0; i < m; ++i) {
    const auto r = find(i);
    auto it = std::find(roots.begin(), roots.end(), r);
    if (it == roots.end()) {
      roots.push_back(r);
      it = roots.end() - 1;
    }
    group_of[i] = static_cast<std::size_t>(it - roots.begin());
  }
  std::vector<std::size_t> size(roots.size(), 0);
  for (auto g : group_of) ++size[g];
  Matrix<T> mm(m, roots.size());
  for (std::size_t i = 0; i < m; ++i) mm(i, group_of[i]) = T(1) / static_cast<T>(size[group_of[i]]);
  return mm;
}
}  // namespace detail

/// Pools `vertices` (N x D) to m centres in k EM iterations and pools the
/// adjacency with the final assignment.
template <class T>
EmgpVars<T> emgp(Tape<T>& tape, const Var<T>& vertices, const Var<T>& adjacency, std::size_t m, std::size_t k,
                 double sigma, const EmgpOptions& opt = {}) {
  const std::size_t n = vertices.rows();
  if (n == 0) throw Error(ErrorCode::EmptyGraph, "cannot pool an empty graph");
  if (m < 1 || m > n) throw Error(ErrorCode::InvalidM, "need 1 <= m <= N");
  if (k < 1) throw Error(ErrorCode::InvalidConfig, "need at least one EM iteration");
  if (!(sigma > 0)) throw Error(ErrorCode::InvalidConfig, "sigma must be > 0");
  if (adjacency.rows() != n || adjacency.cols() != n) throw Error(ErrorCode::ShapeMismatch, "adjacency must be N x N");

  const T inv = T(-1) / static_cast<T>(sigma * sigma);
  Var<T> centers = ad::gather_rows(tape, vertices, center_init_indices(n, m, opt.init, opt.seed));
  Var<T> p;
  for (std::size_t it = 0; it < k; ++it) {
    p = ad::col_softmax(tape, ad::scale(tape, ad::pairwise_sqdist(tape, vertices, centers), inv));
    if (opt.stop_gradient) p = ad::stop_gradient(tape, p);
    centers = ad::matmul_tn(tape, p, vertices);
  }
  if (opt.merge_epsilon) {
    Matrix<T> mm = detail::merge_matrix(centers.value(), *opt.merge_epsilon);
    if (!mm.empty()) {
      p = ad::matmul(tape, p, tape.constant(std::move(mm)));
      centers = ad::matmul_tn(tape, p, vertices);
    }
  }
  Var<T> pooled_adj = ad::symmetrize_off_diag(tape, ad::matmul(tape, ad::matmul_tn(tape, p, adjacency), p));
  return {centers, p, pooled_adj};
}

template <class T>
struct EmgpResult {
  Matrix<T> centers;
  AssignmentMatrix<T> assignment;
  Matrix<T> adjacency;
};

template <class T>
EmgpResult<T> emgp(const LevelGraph<T>& g, std::size_t m, std::size_t k, double sigma, const EmgpOptions& opt = {}) {
  Tape<T> tape(false);
  auto r = emgp(tape, tape.constant(g.vertices), tape.constant(g.adjacency), m, k, sigma, opt);
  return {r.centers.value(), {r.assignment.value(), Direction::BottomUp}, r.adjacency.value()};
}

template <class T>
Matrix<T> cumulative_assignment(const std::vector<AssignmentMatrix<T>>& ps) {
  if (ps.empty()) throw Error(ErrorCode::ShapeMismatch, "empty assignment chain");
  Matrix<T> acc = ps.front().weights;
  for (std::size_t i = 0; i < ps.size(); ++i) {
    if (ps[i].direction != Direction::BottomUp)
      throw Error(ErrorCode::ShapeMismatch, "cumulative product needs bottom-up assignments");
    if (i == 0) continue;
    if (acc.cols() != ps[i].weights.rows()) throw Error(ErrorCode::ShapeMismatch, "assignment chain shapes differ");
    acc = linalg::matmul(acc, ps[i].weights);
  }
  return acc;
}

template <class T>
Var<T> readout(Tape<T>& tape, const Var<T>& top) {
  if (top.rows() == 0) throw Error(ErrorCode::EmptyGraph, "readout of an empty graph");
  return ad::mean_rows(tape, top);
}

template <class T>
Matrix<T> readout(const Matrix<T>& top) {
  Tape<T> tape(false);
  return readout(tape, tape.constant(top)).value();
}

template <class T>
struct ProjectParams {
  Matrix<T> input_proj;  // C_{l+1} x D
  GConvParams<T> conv;
};

/// Projection of level-(l+1) grid features onto the pooled centres through the
/// quasi-bipartite graph (U, centres, I + cumulative P).
template <class T>
Var<T> project(Tape<T>& tape, const Var<T>& pooled_u, const Var<T>& centers, const Var<T>& cumulative,
               const Var<T>& w, Nonlinearity act, bool normalize) {
  if (cumulative.rows() != pooled_u.rows() || cumulative.cols() != centers.rows())
    throw Error(ErrorCode::DimensionMismatch, "cumulative assignment must be N_1 x m");
  return gconv(tape, pooled_u, centers, cumulative, T(1), w, act, normalize);
}

template <class T>
Matrix<T> project(const FeatureMap<T>& f_next, const SuperpixelMap& sp, const Matrix<T>& centers,
                  const Matrix<T>& cumulative, const ProjectParams<T>& params) {
  Tape<T> tape(false);
  if (cumulative.rows() != sp.num_regions || cumulative.cols() != centers.rows())
    throw Error(ErrorCode::DimensionMismatch, "cumulative assignment must be N_1 x m");
  const auto u = project_pooled(tape, superpixel_pool(f_next, sp).features, tape.constant(params.input_proj));
  return project(tape, u, tape.constant(centers), tape.constant(cumulative), tape.constant(params.conv.weight),
                 params.conv.activation, params.conv.normalize_incoming)
      .value();
}

// ---------------------------------------------------------------------------
// Bottom-up pass

template <class T>
struct BottomUpVars {
  std::vector<Var<T>> vertices;     // V^l
  std::vector<Var<T>> adjacency;    // E^l
  std::vector<Var<T>> centers;      // pooled centres, l = 1..L-1
  std::vector<Var<T>> assignments;  // P^l
  std::vector<Var<T>> cumulative;   // prod P
  std::vector<Var<T>> pooled;       // U^l
  Var<T> readout;
};

template <class T>
BottomUpVars<T> forward_bottom_up(Tape<T>& tape, const GraphInputs<T>& in, const HierarchyConfig& cfg,
                                  const ParamVars<T>& params) {
  cfg.validate();
  const std::size_t levels = cfg.levels;
  if (in.features.size() != levels)
    throw Error(ErrorCode::LevelCountMismatch,
                std::to_string(in.features.size()) + " feature maps for " + std::to_string(levels) + " levels");
  BottomUpVars<T> out;
  for (std::size_t l = 1; l <= levels; ++l) {
    const auto& proj = require_var(params, param::input_proj(l));
    if (proj.cols() != cfg.graph_width) throw Error(ErrorCode::DimensionMismatch, "input projection width != D");
    out.pooled.push_back(project_pooled(tape, in.pooled[l - 1], proj));
  }
  out.vertices.push_back(out.pooled[0]);
  out.adjacency.push_back(tape.constant(in.rag.template dense<T>()));

  EmgpOptions opt{cfg.init, cfg.seed, cfg.stop_gradient_assignments, cfg.center_merge_epsilon};
  for (std::size_t l = 1; l < levels; ++l) {
    const auto& v = out.vertices.back();
    opt.seed = cfg.seed + l;
    auto pooled = emgp(tape, v, out.adjacency.back(), HierarchyConfig::pooled_size(v.rows()), cfg.em_iters(),
                       cfg.sigma, opt);
    out.centers.push_back(pooled.centers);
    out.assignments.push_back(pooled.assignment);
    out.cumulative.push_back(out.cumulative.empty() ? pooled.assignment
                                                    : ad::matmul(tape, out.cumulative.back(), pooled.assignment));
    Var<T> next = project(tape, out.pooled[l], pooled.centers, out.cumulative.back(),
                          require_var(params, param::project(l + 1)), cfg.activation, cfg.normalize_incoming);
    if (cfg.intra_level_conv)
      next = gconv(tape, next, next, pooled.adjacency, T(1), require_var(params, param::intra(l + 1)), cfg.activation,
                   cfg.normalize_incoming);
    out.vertices.push_back(next);
    out.adjacency.push_back(pooled.adjacency);
  }
  out.readout = readout(tape, out.vertices.back());
  return out;
}

template <class T>
Hierarchy<T> to_hierarchy(const BottomUpVars<T>& vars, const GraphInputs<T>& in, const HierarchyConfig& cfg) {
  Hierarchy<T> h;
  h.config = cfg;
  h.image_height = in.superpixels.height;
  h.image_width = in.superpixels.width;
  for (std::size_t l = 0; l < vars.vertices.size(); ++l)
    h.levels.push_back({l + 1, vars.vertices[l].value(), vars.adjacency[l].value()});
  for (const auto& v : vars.centers) h.centers.push_back(v.value());
  for (const auto& v : vars.assignments) h.assignments.push_back(v.value());
  for (const auto& v : vars.cumulative) h.cumulative.push_back(v.value());
  for (const auto& v : vars.pooled) h.pooled.push_back(v.value());
  h.readout = vars.readout.value();
  return h;
}

template <class T>
Hierarchy<T> build_hierarchy(const GraphInputs<T>& in, const HierarchyConfig& cfg, const ParamSet<T>& params) {
  Tape<T> tape(false);
  const auto vars = forward_bottom_up(tape, in, cfg, bind_params(tape, params));
  return to_hierarchy(vars, in, cfg);
}

template <class T>
Hierarchy<T> build_hierarchy(std::vector<FeatureMap<T>> features, const SuperpixelMap& sp, const HierarchyConfig& cfg,
                             const ParamSet<T>& params) {
  if (features.size() != cfg.levels) throw Error(ErrorCode::LevelCountMismatch, "one feature map per level");
  return build_hierarchy(GraphInputs<T>::make(std::move(features), sp), cfg, params);
}

}  // namespace dgm
