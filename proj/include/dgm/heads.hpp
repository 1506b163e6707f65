#pragma once

#include "dgm/message_passing.hpp"

namespace dgm {

// ---------------------------------------------------------------------------
// Demo feature extractor

inline constexpr std::size_t kDemoStrides[4] = {4, 8, 16, 32};
inline constexpr std::size_t kDemoChannels = 12;

/// Hand-crafted multi-stride features standing in for a CNN backbone. Per
/// cell of each stride: RGB means (0-2), mean horizontal forward difference
/// (3-5), mean vertical forward difference (6-8), RGB variance (9-11).
template <class T>
std::vector<FeatureMap<T>> extract_demo_features(const Tensor& image) {
  if (image.dtype() != DType::f32 || image.shape.size() != 3 || image.shape[0] != 3)
    throw Error(ErrorCode::ShapeMismatch, "image must be a 3 x H x W f32 tensor");
  const std::size_t h = image.shape[1], w = image.shape[2];
  if (h % 32 != 0 || w % 32 != 0) throw Error(ErrorCode::IndivisibleSize, "image sides must be divisible by 32");
  const auto& px = image.f32();
  auto at = [&](std::size_t c, std::size_t y, std::size_t x) { return static_cast<double>(px[(c * h + y) * w + x]); };
  std::vector<FeatureMap<T>> out;
  for (std::size_t s : kDemoStrides) {
    const std::size_t oh = h / s, ow = w / s;
    FeatureMap<T> f(kDemoChannels, oh, ow);
    const double cells = static_cast<double>(s * s);
    for (std::size_t cy = 0; cy < oh; ++cy)
      for (std::size_t cx = 0; cx < ow; ++cx)
        for (std::size_t c = 0; c < 3; ++c) {
          double sum = 0, sq = 0, gx = 0, gy = 0;
          for (std::size_t y = cy * s; y < (cy + 1) * s; ++y)
            for (std::size_t x = cx * s; x < (cx + 1) * s; ++x) {
              const double v = at(c, y, x);
              sum += v;
              sq += v * v;
              gx += at(c, y, std::min(x + 1, w - 1)) - v;
              gy += at(c, std::min(y + 1, h - 1), x) - v;
            }
          const double mean = sum / cells;
          f.at(c, cy, cx) = static_cast<T>(mean);
          f.at(3 + c, cy, cx) = static_cast<T>(gx / cells);
          f.at(6 + c, cy, cx) = static_cast<T>(gy / cells);
          f.at(9 + c, cy, cx) = static_cast<T>(std::max(0.0, sq / cells - mean * mean));
        }
    out.push_back(std::move(f));
  }
  return out;
}

// ---------------------------------------------------------------------------
// Head parameters

namespace param {
inline std::string head_weight(const std::string& task) { return "head." + task + ".weight"; }
inline std::string head_bias(const std::string& task) { return "head." + task + ".bias"; }
inline const std::string kSceneReadoutProj = "head.scene.readout_proj";
}  // namespace param

/// Multi-task loss coefficients (scene, texture, object, part, material).
struct LossWeights {
  double scene = 0.25;
  double texture = 1.0;
  double object = 1.0;
  double part = 0.5;
  double material = 1.0;
};

template <class T>
ParamSet<T> init_head_params(const HeadSpec& spec, const std::vector<std::size_t>& channels, std::size_t graph_width,
                             std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  const std::size_t concat = std::accumulate(channels.begin(), channels.end(), std::size_t{0});
  const std::size_t c1 = channels.front(), top = channels.back();
  ParamSet<T> p;
  auto add = [&](const std::string& task, std::size_t in, std::size_t classes) {
    if (classes == 0) return;
    p[param::head_weight(task)] = random_matrix<T>(in, classes, 1.0 / std::sqrt(static_cast<double>(in)), rng);
    p[param::head_bias(task)] = Matrix<T>(classes, 1);
  };
  add("object", concat, spec.object);
  add("part", concat, spec.part);
  add("material", c1, spec.material);
  add("scene", top, spec.scene);
  add("texture", c1, spec.texture);
  if (spec.scene > 0)
    p[param::kSceneReadoutProj] =
        random_matrix<T>(graph_width, top, 1.0 / std::sqrt(static_cast<double>(graph_width)), rng);
  return p;
}

// ---------------------------------------------------------------------------
// Fusion and heads

template <class T>
struct FusedVars {
  std::vector<Var<T>> sums;  // F^l + F-hat^l at native resolution
  Var<T> concat;             // all levels upsampled to level 1, stacked: (sum C_l) x (h_1 w_1)
  Var<T> bottom;             // F^1 + F-hat^1
  std::size_t height = 0;
  std::size_t width = 0;
};

template <class T>
FusedVars<T> fuse(Tape<T>& tape, const std::vector<FeatureMap<T>>& f, const std::vector<Var<T>>& f_hat) {
  if (f.empty() || f.size() != f_hat.size()) throw Error(ErrorCode::ShapeMismatch, "fuse: one F-hat per feature map");
  FusedVars<T> out;
  out.height = f[0].height;
  out.width = f[0].width;
  std::vector<Var<T>> up;
  for (std::size_t l = 0; l < f.size(); ++l) {
    if (f_hat[l].rows() != f[l].channels || f_hat[l].cols() != f[l].height * f[l].width)
      throw Error(ErrorCode::ShapeMismatch, "fuse: F-hat shape differs from F at level " + std::to_string(l + 1));
    Var<T> s = ad::add(tape, tape.constant(f[l].data), f_hat[l]);
    out.sums.push_back(s);
    up.push_back(l == 0 ? s : ad::resize_bilinear(tape, s, f[l].height, f[l].width, out.height, out.width));
  }
  out.concat = up.size() == 1 ? up[0] : ad::concat_rows(tape, up);
  out.bottom = out.sums[0];
  return out;
}

template <class T>
struct FusedFeatures {
  FeatureMap<T> concat;
  FeatureMap<T> bottom;
};

template <class T>
FusedFeatures<T> fuse(const std::vector<FeatureMap<T>>& f, const std::vector<FeatureMap<T>>& f_hat) {
  if (f.size() != f_hat.size()) throw Error(ErrorCode::ShapeMismatch, "fuse: one F-hat per feature map");
  Tape<T> tape(false);
  std::vector<Var<T>> fh;
  for (std::size_t l = 0; l < f.size(); ++l) {
    if (f_hat[l].channels != f[l].channels || f_hat[l].height != f[l].height || f_hat[l].width != f[l].width)
      throw Error(ErrorCode::ShapeMismatch, "fuse: F-hat shape differs from F");
    fh.push_back(tape.constant(f_hat[l].data));
  }
  const auto r = fuse(tape, f, fh);
  return {FeatureMap<T>(r.concat.rows(), r.height, r.width, r.concat.value()),
          FeatureMap<T>(r.bottom.rows(), r.height, r.width, r.bottom.value())};
}

template <class T>
struct TaskLogits {
  std::optional<Var<T>> object;    // K_o x (h_1 w_1)
  std::optional<Var<T>> part;      // K_p x (h_1 w_1)
  std::optional<Var<T>> material;  // K_m x (h_1 w_1)
  std::optional<Var<T>> scene;     // K_s x 1
  std::optional<Var<T>> texture;   // K_t x 1
  std::size_t height = 0;
  std::size_t width = 0;
};

namespace detail {
template <class T>
Var<T> linear_classifier(Tape<T>& tape, const ParamVars<T>& params, const std::string& task, const Var<T>& x) {
  const auto& w = require_var(params, param::head_weight(task));
  if (w.rows() != x.rows()) throw Error(ErrorCode::ShapeMismatch, task + " head expects " + std::to_string(w.rows()) + " channels");
  return ad::add_col_broadcast(tape, ad::matmul_tn(tape, w, x), require_var(params, param::head_bias(task)));
}
}  // namespace detail

/// Object/part over the concatenated levels, material over the bottom level,
/// scene over GAP(F^L) plus the projected readout, texture over GAP of the
/// bottom level. A task runs when its parameters are present.
template <class T>
TaskLogits<T> forward_heads(Tape<T>& tape, const FusedVars<T>& fused, const Var<T>& readout, const FeatureMap<T>& f_top,
                            const ParamVars<T>& params) {
  TaskLogits<T> out;
  out.height = fused.height;
  out.width = fused.width;
  auto has = [&](const std::string& task) { return params.count(param::head_weight(task)) > 0; };
  if (has("object")) out.object = detail::linear_classifier(tape, params, "object", fused.concat);
  if (has("part")) out.part = detail::linear_classifier(tape, params, "part", fused.concat);
  if (has("material")) out.material = detail::linear_classifier(tape, params, "material", fused.bottom);
  if (has("scene")) {
    Var<T> feat = ad::mean_cols(tape, tape.constant(f_top.data));
    const auto& proj = require_var(params, param::kSceneReadoutProj);
    if (proj.rows() != readout.cols() || proj.cols() != f_top.channels)
      throw Error(ErrorCode::ShapeMismatch, "readout projection must be D x C_L");
    feat = ad::add(tape, feat, ad::matmul_tn(tape, proj, ad::transpose(tape, readout)));
    out.scene = detail::linear_classifier(tape, params, "scene", feat);
  }
  if (has("texture")) out.texture = detail::linear_classifier(tape, params, "texture", ad::mean_cols(tape, fused.bottom));
  return out;
}

/// Texture classifier applied at every pixel of the bottom level.
template <class T>
Matrix<T> texture_map(const FusedFeatures<T>& fused, const ParamSet<T>& params) {
  Tape<T> tape(false);
  const auto pv = bind_params(tape, params);
  return detail::linear_classifier(tape, pv, "texture", tape.constant(fused.bottom.data)).value();
}

// ---------------------------------------------------------------------------
// Multi-task loss

struct TaskTargets {
  std::optional<LabelGrid> object;  // -1 = ignore
  std::optional<LabelGrid> part;
  std::optional<LabelGrid> material;
  std::optional<std::int32_t> scene;
  std::optional<std::int32_t> texture;

  bool any() const { return object || part || material || scene || texture; }
};

template <class T>
struct LossVars {
  Var<T> total;
  std::optional<Var<T>> scene, texture, object, part, material;
};

namespace detail {
inline std::vector<std::int32_t> align_targets(const LabelGrid& g, std::size_t h, std::size_t w) {
  if (g.height == h && g.width == w) return g.labels;
  return downsample_labels(g, h, w).labels;
}
}  // namespace detail

/// Weighted sum of per-task cross-entropies. Dense targets at a higher
/// resolution than the logits are nearest-downsampled first.
template <class T>
LossVars<T> multitask_loss(Tape<T>& tape, const TaskLogits<T>& logits, const TaskTargets& targets,
                           const LossWeights& lambda = {}) {
  if (!targets.any()) throw Error(ErrorCode::InvalidConfig, "no task targets present");
  LossVars<T> out;
  std::vector<std::pair<Var<T>, double>> terms;
  auto dense = [&](const std::optional<LabelGrid>& tg, const std::optional<Var<T>>& lg, double weight,
                   std::optional<Var<T>>& slot, const char* name) {
    if (!tg) return;
    if (!lg) throw Error(ErrorCode::ShapeMismatch, std::string("no head for task ") + name);
    slot = ad::softmax_cross_entropy(tape, *lg, detail::align_targets(*tg, logits.height, logits.width));
    terms.emplace_back(*slot, weight);
  };
  auto image = [&](const std::optional<std::int32_t>& tg, const std::optional<Var<T>>& lg, double weight,
                   std::optional<Var<T>>& slot, const char* name) {
    if (!tg) return;
    if (!lg) throw Error(ErrorCode::ShapeMismatch, std::string("no head for task ") + name);
    slot = ad::softmax_cross_entropy(tape, *lg, {*tg});
    terms.emplace_back(*slot, weight);
  };
  image(targets.scene, logits.scene, lambda.scene, out.scene, "scene");
  image(targets.texture, logits.texture, lambda.texture, out.texture, "texture");
  dense(targets.object, logits.object, lambda.object, out.object, "object");
  dense(targets.part, logits.part, lambda.part, out.part, "part");
  dense(targets.material, logits.material, lambda.material, out.material, "material");
  Var<T> total = ad::scale(tape, terms[0].first, static_cast<T>(terms[0].second));
  for (std::size_t i = 1; i < terms.size(); ++i)
    total = ad::add(tape, total, ad::scale(tape, terms[i].first, static_cast<T>(terms[i].second)));
  out.total = total;
  return out;
}

// ---------------------------------------------------------------------------
// Evaluation helpers on toy data

template <class T>
std::vector<std::int32_t> argmax_columns(const Matrix<T>& logits) {
  std::vector<std::int32_t> out(logits.cols(), 0);
  for (std::size_t p = 0; p < logits.cols(); ++p) {
    T best = logits(0, p);
    for (std::size_t k = 1; k < logits.rows(); ++k)
      if (logits(k, p) > best) {
        best = logits(k, p);
        out[p] = static_cast<std::int32_t>(k);
      }
  }
  return out;
}

inline double pixel_accuracy(const std::vector<std::int32_t>& pred, const std::vector<std::int32_t>& truth) {
  std::size_t ok = 0, n = 0;
  for (std::size_t i = 0; i < truth.size(); ++i) {
    if (truth[i] < 0) continue;
    ++n;
    if (pred[i] == truth[i]) ++ok;
  }
  return n ? static_cast<double>(ok) / static_cast<double>(n) : 0.0;
}

/// Mean IoU over classes that occur in either prediction or truth.
inline double mean_iou(const std::vector<std::int32_t>& pred, const std::vector<std::int32_t>& truth,
                       std::size_t classes) {
  std::vector<std::size_t> inter(classes, 0), uni(classes, 0);
  for (std::size_t i = 0; i < truth.size(); ++i) {
    if (truth[i] < 0) continue;
    const auto p = static_cast<std::size_t>(pred[i]), t = static_cast<std::size_t>(truth[i]);
    if (p == t) {
      ++inter[t];
      ++uni[t];
    } else {
      ++uni[t];
      if (p < classes) ++uni[p];
    }
  }
  double s = 0;
  std::size_t n = 0;
  for (std::size_t c = 0; c < classes; ++c)
    if (uni[c] > 0) {
      s += static_cast<double>(inter[c]) / static_cast<double>(uni[c]);
      ++n;
    }
  return n ? s / static_cast<double>(n) : 0.0;
}

}  // namespace dgm
