#pragma once

#include <fstream>
#include <sstream>

#include "dgm/heads.hpp"

namespace dgm {

/// Learning-rate multiplier (1 - iter / max_iter)^power.
inline double poly_factor(std::size_t iter, std::size_t max_iter, double power = 0.9) {
  if (max_iter == 0) throw Error(ErrorCode::InvalidConfig, "max_iter must be >= 1");
  const double frac = 1.0 - static_cast<double>(iter) / static_cast<double>(max_iter);
  return std::pow(std::max(0.0, frac), power);
}

template <class T>
struct Sample {
  std::string name;
  GraphInputs<T> inputs;
  TaskTargets targets;
};

template <class T>
using Dataset = std::vector<Sample<T>>;

struct TrainOptions {
  std::size_t steps = 50;
  double base_lr = 0.1;
  double power = 0.9;
  std::uint64_t seed = 0;
  HeadSpec heads;
  LossWeights lambda;
  bool two_phase_texture = false;  // texture branch trained alone after the rest
};

struct HistoryRow {
  std::size_t step = 0;
  double lr = 0;
  double total = 0;
  std::optional<double> scene, texture, object, part, material;
};

struct TrainingHistory {
  std::vector<HistoryRow> rows;

  std::string to_csv() const {
    std::ostringstream out;
    out.precision(17);
    out << "step,lr,total,scene,texture,object,part,material\n";
    auto opt = [&](const std::optional<double>& v) {
      out << ',';
      if (v) out << *v;
    };
    for (const auto& r : rows) {
      out << r.step << ',' << r.lr << ',' << r.total;
      opt(r.scene);
      opt(r.texture);
      opt(r.object);
      opt(r.part);
      opt(r.material);
      out << '\n';
    }
    return out.str();
  }
};

template <class T>
struct TrainResult {
  TrainingHistory history;
  ParamSet<T> params;
};

inline bool is_texture_head(const std::string& name) { return name.rfind("head.texture.", 0) == 0; }

template <class T>
ParamSet<T> init_model_params(const HierarchyConfig& cfg, const std::vector<std::size_t>& channels,
                              const HeadSpec& heads, std::uint64_t seed) {
  ParamSet<T> p = init_graph_params<T>(cfg, channels, seed);
  for (auto& [k, v] : init_head_params<T>(heads, channels, cfg.graph_width, seed + 1)) p[k] = std::move(v);
  return p;
}

/// One forward pass over a sample: graph pipeline, fusion, heads, loss.
template <class T>
LossVars<T> sample_loss(Tape<T>& tape, const Sample<T>& s, const HierarchyConfig& cfg, const ParamVars<T>& pv,
                        const LossWeights& lambda, const TaskTargets& targets) {
  const auto fwd = forward_graph(tape, s.inputs, cfg, pv);
  const auto fused = fuse(tape, s.inputs.features, fwd.reprojected);
  const auto logits = forward_heads(tape, fused, fwd.bottom_up.readout, s.inputs.features.back(), pv);
  return multitask_loss(tape, logits, targets, lambda);
}

/// Full-batch gradient descent with a poly-decayed learning rate. The loss
/// recorded at each step is the one before that step's update.
template <class T>
TrainResult<T> train_toy(const Dataset<T>& data, const HierarchyConfig& cfg, const TrainOptions& opt,
                         std::optional<ParamSet<T>> initial = std::nullopt) {
  if (opt.steps == 0) throw Error(ErrorCode::InvalidConfig, "steps must be >= 1");
  if (data.empty()) throw Error(ErrorCode::InvalidConfig, "empty dataset");
  cfg.validate();
  TrainResult<T> res;
  res.params = initial ? std::move(*initial) : init_model_params<T>(cfg, data[0].inputs.channels(), opt.heads, opt.seed);
  const std::size_t half = opt.steps / 2;
  const T inv_n = T(1) / static_cast<T>(data.size());

  for (std::size_t step = 0; step < opt.steps; ++step) {
    const bool texture_phase = opt.two_phase_texture && step >= half;
    Tape<T> tape(true);
    const auto pv = bind_params(tape, res.params);
    HistoryRow row;
    row.step = step;
    row.lr = opt.base_lr * poly_factor(step, opt.steps, opt.power);
    std::optional<Var<T>> total;
    auto acc = [&](std::optional<double>& slot, const std::optional<Var<T>>& v) {
      if (!v) return;
      slot = slot.value_or(0.0) + static_cast<double>(v->value()(0, 0)) / static_cast<double>(data.size());
    };
    for (const auto& s : data) {
      TaskTargets tg = s.targets;
      if (opt.two_phase_texture) {
        if (texture_phase) {
          tg = TaskTargets{};
          tg.texture = s.targets.texture;
        } else {
          tg.texture.reset();
        }
        if (!tg.any()) continue;
      }
      const auto l = sample_loss(tape, s, cfg, pv, opt.lambda, tg);
      acc(row.scene, l.scene);
      acc(row.texture, l.texture);
      acc(row.object, l.object);
      acc(row.part, l.part);
      acc(row.material, l.material);
      Var<T> term = ad::scale(tape, l.total, inv_n);
      total = total ? ad::add(tape, *total, term) : term;
    }
    if (!total) throw Error(ErrorCode::InvalidConfig, "no sample has targets for this training phase");
    row.total = static_cast<double>(total->value()(0, 0));
    res.history.rows.push_back(row);

    if (row.lr == 0) continue;
    const auto grads = backward(tape, *total);
    for (auto& [name, value] : res.params) {
      if (opt.two_phase_texture && is_texture_head(name) != texture_phase) continue;
      const auto it = grads.find(name);
      if (it == grads.end()) continue;
      for (std::size_t k = 0; k < value.size(); ++k)
        value.data()[k] -= static_cast<T>(row.lr) * it->second.data()[k];
    }
  }
  return res;
}

// ---------------------------------------------------------------------------
// Datasets

inline constexpr std::size_t kSyntheticSize = 32;
inline constexpr std::size_t kSyntheticClasses = 4;

/// Synthetic 4-region task: every image is split into quadrants painted with
/// a permutation of four class colours plus seeded noise. Object labels are
/// the colour classes, parts split them in two by parity, material by half,
/// scene is the top-left class parity and texture is whether stripes are drawn.
struct SyntheticImage {
  Tensor image;
  SuperpixelMap superpixels;
  Tensor object, part, material;
  std::int32_t scene = 0;
  std::int32_t texture = 0;
};

inline HeadSpec synthetic_heads() { return HeadSpec{4, 2, 2, 2, 2}; }

inline std::vector<SyntheticImage> make_synthetic_images(std::size_t count, std::uint64_t seed) {
  static constexpr float kColours[kSyntheticClasses][3] = {
      {0.9f, 0.1f, 0.1f}, {0.1f, 0.8f, 0.2f}, {0.15f, 0.2f, 0.9f}, {0.85f, 0.8f, 0.15f}};
  const std::size_t n = kSyntheticSize, half = n / 2;
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<float> noise(-0.05f, 0.05f);
  std::vector<SyntheticImage> out;
  for (std::size_t i = 0; i < count; ++i) {
    std::array<int, kSyntheticClasses> perm{0, 1, 2, 3};
    std::shuffle(perm.begin(), perm.end(), rng);
    const bool stripes = (i % 2) == 1;
    std::vector<float> px(3 * n * n);
    std::vector<std::int32_t> sp(n * n), obj(n * n), part(n * n), mat(n * n);
    for (std::size_t y = 0; y < n; ++y)
      for (std::size_t x = 0; x < n; ++x) {
        const std::size_t q = (y / half) * 2 + (x / half);
        const int cls = perm[q];
        const float stripe = stripes && (y % 4) < 2 ? 0.15f : 0.0f;
        for (std::size_t c = 0; c < 3; ++c)
          px[(c * n + y) * n + x] = std::clamp(kColours[cls][c] - stripe + noise(rng), 0.0f, 1.0f);
        const std::size_t k = y * n + x;
        sp[k] = static_cast<std::int32_t>(q);
        obj[k] = cls;
        part[k] = cls % 2;
        mat[k] = cls / 2;
      }
    SyntheticImage s;
    s.image = Tensor::make_f32({3, static_cast<std::uint32_t>(n), static_cast<std::uint32_t>(n)}, std::move(px));
    s.superpixels = validate_label_map(n, n, sp);
    auto grid = [&](std::vector<std::int32_t> v) {
      return Tensor::make_i32({static_cast<std::uint32_t>(n), static_cast<std::uint32_t>(n)}, std::move(v));
    };
    s.object = grid(std::move(obj));
    s.part = grid(std::move(part));
    s.material = grid(std::move(mat));
    s.scene = perm[0] % 2;
    s.texture = stripes ? 1 : 0;
    out.push_back(std::move(s));
  }
  return out;
}

/// Writes sample folders in the dataset directory layout read by load_dataset.
inline void write_synthetic_dataset(const std::filesystem::path& dir, std::size_t count, std::uint64_t seed) {
  std::filesystem::create_directories(dir);
  const auto images = make_synthetic_images(count, seed);
  for (std::size_t i = 0; i < images.size(); ++i) {
    char name[32];
    std::snprintf(name, sizeof name, "sample_%03zu", i);
    const auto d = dir / name;
    std::filesystem::create_directories(d);
    const auto& s = images[i];
    write_file(d / "image.ppm", encode_ppm(s.image));
    save_tensor(d / "superpixels.dgmt", label_map_tensor(s.superpixels));
    save_tensor(d / "labels_object.dgmt", s.object);
    save_tensor(d / "labels_part.dgmt", s.part);
    save_tensor(d / "labels_material.dgmt", s.material);
    write_file(d / "scene.txt", std::to_string(s.scene) + "\n");
    write_file(d / "texture.txt", std::to_string(s.texture) + "\n");
  }
}

namespace detail {
inline LabelGrid label_grid(const Tensor& t) {
  if (t.dtype() != DType::i32 || t.shape.size() != 2)
    throw Error(ErrorCode::ShapeMismatch, "label tensors must be H x W i32");
  return LabelGrid{t.shape[0], t.shape[1], t.i32()};
}

inline std::int32_t read_int(const std::filesystem::path& p) {
  std::ifstream in(p);
  std::int64_t v = 0;
  if (!(in >> v)) throw Error(ErrorCode::Parse, "expected an integer in " + p.string());
  return static_cast<std::int32_t>(v);
}
}  // namespace detail

struct DatasetOptions {
  std::size_t superpixel_target = 64;  // used when a sample has no superpixels.dgmt
  std::uint64_t seed = 0;
  std::size_t max_regions = kDefaultMaxRegions;
};

/// Loads every sample folder under `dir` in name order. A folder provides
/// either image.ppm (demo features are extracted) or features_1.dgmt ...
/// features_L.dgmt, optionally superpixels.dgmt, labels_{object,part,material}.dgmt,
/// scene.txt and texture.txt.
template <class T>
Dataset<T> load_dataset(const std::filesystem::path& dir, const DatasetOptions& opt = {}) {
  namespace fs = std::filesystem;
  if (!fs::is_directory(dir)) throw Error(ErrorCode::Io, "dataset directory not found: " + dir.string());
  std::vector<fs::path> folders;
  for (const auto& e : fs::directory_iterator(dir))
    if (e.is_directory()) folders.push_back(e.path());
  std::sort(folders.begin(), folders.end());
  Dataset<T> out;
  for (const auto& d : folders) {
    Sample<T> s;
    s.name = d.filename().string();
    std::vector<FeatureMap<T>> feats;
    std::optional<Tensor> image;
    if (fs::exists(d / "image.ppm")) {
      image = decode_ppm(read_file(d / "image.ppm"));
      feats = extract_demo_features<T>(*image);
    } else {
      for (std::size_t l = 1; fs::exists(d / ("features_" + std::to_string(l) + ".dgmt")); ++l)
        feats.push_back(to_feature_map<T>(load_tensor(d / ("features_" + std::to_string(l) + ".dgmt"))));
      if (feats.empty()) throw Error(ErrorCode::Io, "sample " + s.name + " has neither image.ppm nor features");
    }
    SuperpixelMap sp;
    if (fs::exists(d / "superpixels.dgmt")) {
      sp = validate_label_map(load_tensor(d / "superpixels.dgmt"), opt.max_regions);
    } else if (image) {
      sp = generate_superpixels(*image, opt.superpixel_target, opt.seed);
    } else {
      throw Error(ErrorCode::Io, "sample " + s.name + " needs superpixels.dgmt");
    }
    s.inputs = GraphInputs<T>::make(std::move(feats), std::move(sp));
    auto dense = [&](const char* file, std::optional<LabelGrid>& slot) {
      if (fs::exists(d / file)) slot = detail::label_grid(load_tensor(d / file));
    };
    dense("labels_object.dgmt", s.targets.object);
    dense("labels_part.dgmt", s.targets.part);
    dense("labels_material.dgmt", s.targets.material);
    if (fs::exists(d / "scene.txt")) s.targets.scene = detail::read_int(d / "scene.txt");
    if (fs::exists(d / "texture.txt")) s.targets.texture = detail::read_int(d / "texture.txt");
    if (!s.targets.any()) throw Error(ErrorCode::InvalidConfig, "sample " + s.name + " has no targets");
    out.push_back(std::move(s));
  }
  if (out.empty()) throw Error(ErrorCode::Io, "no samples in " + dir.string());
  return out;
}

/// In-memory version of the synthetic dataset, identical to writing it and
/// loading it back.
template <class T>
Dataset<T> synthetic_dataset(std::size_t count, std::uint64_t seed) {
  Dataset<T> out;
  const auto images = make_synthetic_images(count, seed);
  for (std::size_t i = 0; i < images.size(); ++i) {
    const auto& im = images[i];
    Sample<T> s;
    char name[32];
    std::snprintf(name, sizeof name, "sample_%03zu", i);
    s.name = name;
    // Round-trip through PPM so in-memory and on-disk datasets agree bitwise.
    const Tensor image = decode_ppm(encode_ppm(im.image));
    s.inputs = GraphInputs<T>::make(extract_demo_features<T>(image), im.superpixels);
    s.targets.object = detail::label_grid(im.object);
    s.targets.part = detail::label_grid(im.part);
    s.targets.material = detail::label_grid(im.material);
    s.targets.scene = im.scene;
    s.targets.texture = im.texture;
    out.push_back(std::move(s));
  }
  return out;
}

}  // namespace dgm
