#pragma once

#include <set>

#include "dgm/heads.hpp"
#include "json.hpp"

namespace dgm {

/// Level-l ancestor of every level-1 vertex, following row-argmax parents
/// through P^1 ... P^{l-1}. Ties go to the smallest column.
template <class T>
std::vector<std::int32_t> hard_assignment(const Hierarchy<T>& h, std::size_t level) {
  if (level < 1 || level > h.num_levels())
    throw Error(ErrorCode::LevelOutOfRange, "level " + std::to_string(level) + " outside 1.." +
                                                std::to_string(h.num_levels()));
  const std::size_t n1 = h.levels[0].size();
  std::vector<std::int32_t> anc(n1);
  std::iota(anc.begin(), anc.end(), 0);
  for (std::size_t k = 1; k < level; ++k) {
    const Matrix<T>& p = h.assignments[k - 1];
    std::vector<std::int32_t> parent(p.rows(), 0);
    for (std::size_t i = 0; i < p.rows(); ++i) {
      std::size_t best = 0;
      for (std::size_t j = 1; j < p.cols(); ++j)
        if (p(i, j) > p(i, best)) best = j;
      parent[i] = static_cast<std::int32_t>(best);
    }
    for (auto& a : anc) a = parent[static_cast<std::size_t>(a)];
  }
  return anc;
}

/// Per-pixel level-l ancestor labels for l = 1..L.
template <class T>
std::vector<LabelGrid> grouping_maps(const Hierarchy<T>& h, const SuperpixelMap& sp) {
  if (h.num_levels() == 0 || sp.num_regions != h.levels[0].size())
    throw Error(ErrorCode::ShapeMismatch, "superpixel map does not match the hierarchy");
  std::vector<LabelGrid> out;
  for (std::size_t l = 1; l <= h.num_levels(); ++l) {
    const auto anc = hard_assignment(h, l);
    LabelGrid g{sp.height, sp.width, sp.labels};
    for (auto& v : g.labels) v = anc[static_cast<std::size_t>(v)];
    out.push_back(std::move(g));
  }
  return out;
}

struct Click {
  std::int64_t x = 0;
  std::int64_t y = 0;
  bool positive = true;
};

struct ClickSet {
  std::vector<Click> clicks;
  std::size_t level = 1;
};

struct PixelMask {
  std::size_t height = 0;
  std::size_t width = 0;
  std::vector<std::uint8_t> data;  // 0 or 1, row-major

  std::size_t count() const { return static_cast<std::size_t>(std::count(data.begin(), data.end(), 1)); }
  friend bool operator==(const PixelMask&, const PixelMask&) = default;
};

/// Selects the level-l ancestors of positively clicked superpixels, removes
/// those of negative clicks, and paints every superpixel under a selected
/// ancestor.
template <class T>
PixelMask click_propagate(const Hierarchy<T>& h, const SuperpixelMap& sp, const ClickSet& cs) {
  const auto anc = hard_assignment(h, cs.level);
  if (sp.num_regions != anc.size()) throw Error(ErrorCode::ShapeMismatch, "superpixel map does not match the hierarchy");
  std::set<std::int32_t> pos, neg;
  for (const auto& c : cs.clicks) {
    if (c.x < 0 || c.y < 0 || static_cast<std::size_t>(c.x) >= sp.width || static_cast<std::size_t>(c.y) >= sp.height)
      throw Error(ErrorCode::OutOfBounds, "click (" + std::to_string(c.x) + "," + std::to_string(c.y) +
                                              ") outside " + std::to_string(sp.width) + "x" + std::to_string(sp.height));
    const auto a = anc[static_cast<std::size_t>(sp.at(static_cast<std::size_t>(c.y), static_cast<std::size_t>(c.x)))];
    (c.positive ? pos : neg).insert(a);
  }
  for (auto a : neg) pos.erase(a);
  PixelMask m{sp.height, sp.width, std::vector<std::uint8_t>(sp.labels.size(), 0)};
  for (std::size_t p = 0; p < sp.labels.size(); ++p)
    m.data[p] = pos.count(anc[static_cast<std::size_t>(sp.labels[p])]) ? 1 : 0;
  return m;
}

struct GradCam {
  std::vector<double> vertex_heat;  // N_l, normalised to [0,1]
  std::size_t height = 0;
  std::size_t width = 0;
  std::vector<double> pixel_heat;   // H x W
};

/// Graph Grad-CAM: alpha_c = mean_n grads(n,c), heat_n = relu(sum_c alpha_c V(n,c)),
/// scaled by its maximum and broadcast to pixels through level-l ancestors.
template <class T>
GradCam graph_gradcam(const Hierarchy<T>& h, const SuperpixelMap& sp, std::size_t level, const Matrix<T>& grads) {
  const auto anc = hard_assignment(h, level);
  const Matrix<T>& v = h.levels[level - 1].vertices;
  if (!grads.same_shape(v)) throw Error(ErrorCode::ShapeMismatch, "gradients must match V^l");
  if (sp.num_regions != anc.size()) throw Error(ErrorCode::ShapeMismatch, "superpixel map does not match the hierarchy");
  const std::size_t n = v.rows(), d = v.cols();
  std::vector<double> alpha(d, 0.0);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t c = 0; c < d; ++c) alpha[c] += static_cast<double>(grads(i, c));
  for (auto& a : alpha) a /= static_cast<double>(n);
  GradCam g;
  g.vertex_heat.resize(n);
  double mx = 0;
  for (std::size_t i = 0; i < n; ++i) {
    double s = 0;
    for (std::size_t c = 0; c < d; ++c) s += alpha[c] * static_cast<double>(v(i, c));
    g.vertex_heat[i] = std::max(0.0, s);
    mx = std::max(mx, g.vertex_heat[i]);
  }
  if (mx > 0)
    for (auto& x : g.vertex_heat) x /= mx;
  g.height = sp.height;
  g.width = sp.width;
  g.pixel_heat.resize(sp.labels.size());
  for (std::size_t p = 0; p < sp.labels.size(); ++p)
    g.pixel_heat[p] = g.vertex_heat[static_cast<std::size_t>(anc[static_cast<std::size_t>(sp.labels[p])])];
  return g;
}

/// Gradients of the scene logit `cls` with respect to the bottom-up vertex
/// features of every level. Requires scene head parameters.
template <class T>
std::vector<Matrix<T>> scene_vertex_gradients(const GraphInputs<T>& in, const HierarchyConfig& cfg,
                                              const ParamSet<T>& params, std::size_t cls) {
  Tape<T> tape(true);
  const auto pv = bind_params(tape, params);
  const auto fwd = forward_graph(tape, in, cfg, pv);
  const auto fused = fuse(tape, in.features, fwd.reprojected);
  const auto logits = forward_heads(tape, fused, fwd.bottom_up.readout, in.features.back(), pv);
  if (!logits.scene) throw Error(ErrorCode::DimensionMismatch, "Grad-CAM needs scene head parameters");
  if (cls >= logits.scene->rows()) throw Error(ErrorCode::OutOfBounds, "scene class out of range");
  Matrix<T> seed(logits.scene->rows(), 1);
  seed(cls, 0) = T(1);
  const auto all = backward_all(tape, *logits.scene, seed);
  std::vector<Matrix<T>> out;
  for (const auto& v : fwd.bottom_up.vertices) {
    const auto& g = all[static_cast<std::size_t>(v.id())];
    out.push_back(g.empty() ? Matrix<T>(v.rows(), v.cols()) : g);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Exports

inline std::vector<std::uint8_t> mask_pixels(const PixelMask& m) {
  std::vector<std::uint8_t> px(m.data.size());
  for (std::size_t i = 0; i < px.size(); ++i) px[i] = m.data[i] ? 255 : 0;
  return px;
}

inline std::vector<std::uint8_t> heat_pixels(const std::vector<double>& heat) {
  std::vector<std::uint8_t> px(heat.size());
  for (std::size_t i = 0; i < px.size(); ++i)
    px[i] = static_cast<std::uint8_t>(std::lround(std::clamp(heat[i], 0.0, 1.0) * 255.0));
  return px;
}

/// Label map rendered with evenly spread grey levels.
inline std::vector<std::uint8_t> label_pixels(const LabelGrid& g) {
  std::int32_t mx = 0;
  for (auto v : g.labels) mx = std::max(mx, v);
  std::vector<std::uint8_t> px(g.labels.size());
  for (std::size_t i = 0; i < px.size(); ++i)
    px[i] = mx == 0 ? 0 : static_cast<std::uint8_t>(g.labels[i] * 255 / mx);
  return px;
}

/// Row-wise run-length encoding: {"height", "width", "rows": [[[value, run], ...], ...]}.
template <class V>
nlohmann::json rle_encode(std::size_t height, std::size_t width, const std::vector<V>& values) {
  if (values.size() != height * width) throw Error(ErrorCode::ShapeMismatch, "RLE input is not H x W");
  nlohmann::json rows = nlohmann::json::array();
  for (std::size_t y = 0; y < height; ++y) {
    nlohmann::json row = nlohmann::json::array();
    std::size_t x = 0;
    while (x < width) {
      const V v = values[y * width + x];
      std::size_t run = 1;
      while (x + run < width && values[y * width + x + run] == v) ++run;
      row.push_back({static_cast<std::int64_t>(v), run});
      x += run;
    }
    rows.push_back(std::move(row));
  }
  return {{"height", height}, {"width", width}, {"rows", std::move(rows)}};
}

inline std::vector<std::int64_t> rle_decode(const nlohmann::json& j) {
  try {
    const std::size_t h = j.at("height").get<std::size_t>(), w = j.at("width").get<std::size_t>();
    const auto& rows = j.at("rows");
    if (rows.size() != h) throw Error(ErrorCode::Parse, "RLE row count != height");
    std::vector<std::int64_t> out;
    out.reserve(h * w);
    for (const auto& row : rows) {
      std::size_t n = 0;
      for (const auto& run : row) {
        const auto len = run.at(1).get<std::size_t>();
        out.insert(out.end(), len, run.at(0).get<std::int64_t>());
        n += len;
      }
      if (n != w) throw Error(ErrorCode::Parse, "RLE row length != width");
    }
    return out;
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorCode::Parse, std::string("malformed RLE: ") + e.what());
  }
}

}  // namespace dgm
