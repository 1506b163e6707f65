#include <gtest/gtest.h>

#include "fixtures.hpp"

using namespace dgm;

namespace {

Tensor image_of(std::size_t h, std::size_t w, const std::function<float(std::size_t, std::size_t, std::size_t)>& f) {
  std::vector<float> v(3 * h * w);
  for (std::size_t c = 0; c < 3; ++c)
    for (std::size_t y = 0; y < h; ++y)
      for (std::size_t x = 0; x < w; ++x) v[(c * h + y) * w + x] = f(c, y, x);
  return Tensor::make_f32({3, static_cast<std::uint32_t>(h), static_cast<std::uint32_t>(w)}, v);
}

std::vector<FeatureMap<double>> zeros_like(const std::vector<FeatureMap<double>>& f) {
  std::vector<FeatureMap<double>> z;
  for (const auto& m : f) z.emplace_back(m.channels, m.height, m.width);
  return z;
}

oracle::Mat channel(const FeatureMap<double>& f, std::size_t c) {
  oracle::Mat m = oracle::zeros(f.height, f.width);
  for (std::size_t y = 0; y < f.height; ++y)
    for (std::size_t x = 0; x < f.width; ++x) m[y][x] = f.at(c, y, x);
  return m;
}

double loss_of(const TaskLogits<double>& logits, const TaskTargets& t, const LossWeights& lambda = {}) {
  Tape<double> tape(false);
  return multitask_loss(tape, logits, t, lambda).total.value()(0, 0);
}

TaskLogits<double> dense_logits(Tape<double>& tape, const Matrix<double>& m, std::size_t h, std::size_t w) {
  TaskLogits<double> l;
  l.object = tape.parameter("z", m);
  l.height = h;
  l.width = w;
  return l;
}

}  // namespace

TEST(DemoFeatures, ConstantImage) {
  const auto f = extract_demo_features<double>(image_of(64, 32, [](auto c, auto, auto) { return 0.25f * (c + 1); }));
  for (const auto& m : f)
    for (std::size_t p = 0; p < m.height * m.width; ++p) {
      for (std::size_t c = 0; c < 3; ++c) EXPECT_DOUBLE_EQ(m.data(c, p), 0.25 * (c + 1));
      for (std::size_t c = 3; c < 12; ++c) EXPECT_NEAR(m.data(c, p), 0.0, 1e-12);
    }
}

TEST(DemoFeatures, Shapes) {
  const auto f = extract_demo_features<float>(image_of(64, 32, [](auto, auto y, auto x) { return (y * x % 7) / 7.0f; }));
  ASSERT_EQ(f.size(), 4u);
  const std::size_t strides[4] = {4, 8, 16, 32};
  for (std::size_t l = 0; l < 4; ++l) {
    EXPECT_EQ(f[l].channels, 12u);
    EXPECT_EQ(f[l].height, 64 / strides[l]);
    EXPECT_EQ(f[l].width, 32 / strides[l]);
  }
}

TEST(DemoFeatures, VerticalStepEdgeMatchesCellOracle) {
  const std::size_t h = 32, w = 64, edge = 20;
  const auto img = image_of(h, w, [&](auto, auto, auto x) { return x < edge ? 0.2f : 0.7f; });
  const auto f = extract_demo_features<double>(img);
  const std::size_t strides[4] = {4, 8, 16, 32};
  for (std::size_t l = 0; l < 4; ++l) {
    const std::size_t s = strides[l];
    for (std::size_t cy = 0; cy < h / s; ++cy)
      for (std::size_t cx = 0; cx < w / s; ++cx) {
        double gx = 0;
        for (std::size_t y = cy * s; y < (cy + 1) * s; ++y)
          for (std::size_t x = cx * s; x < (cx + 1) * s; ++x) {
            const double a = x < edge ? 0.2f : 0.7f;
            const double b = std::min(x + 1, w - 1) < edge ? 0.2f : 0.7f;
            gx += b - a;
          }
        gx /= static_cast<double>(s * s);
        const bool straddles = cx * s <= edge - 1 && edge - 1 < (cx + 1) * s;
        EXPECT_NEAR(f[l].at(3, cy, cx), gx, 1e-9);
        if (straddles) {
          EXPECT_GT(f[l].at(3, cy, cx), 0.0);
        } else {
          EXPECT_EQ(f[l].at(3, cy, cx), 0.0);
        }
        EXPECT_NEAR(f[l].at(6, cy, cx), 0.0, 1e-12);
      }
  }
}

TEST(DemoFeatures, IndivisibleSize) {
  try {
    extract_demo_features<double>(image_of(48, 32, [](auto, auto, auto) { return 0.0f; }));
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::IndivisibleSize);
  }
}

TEST(Fuse, ZeroResidualIsInterpolatedOriginals) {
  std::mt19937_64 rng(1);
  const auto f = fx::random_features<double>(3, 8, 2, rng);
  const auto fused = fuse(f, zeros_like(f));
  EXPECT_EQ(fused.bottom, f[0]);
  EXPECT_EQ(fused.concat.channels, 6u);
  for (std::size_t l = 0; l < 3; ++l)
    for (std::size_t c = 0; c < 2; ++c) {
      const auto expected = oracle::bilinear(channel(f[l], c), 8, 8);
      const auto got = channel(fused.concat, l * 2 + c);
      for (std::size_t y = 0; y < 8; ++y)
        for (std::size_t x = 0; x < 8; ++x) EXPECT_NEAR(got[y][x], expected[y][x], 1e-12);
    }
  // Level 1 passes through untouched.
  for (std::size_t p = 0; p < 64; ++p)
    for (std::size_t c = 0; c < 2; ++c) EXPECT_EQ(fused.concat.data(c, p), f[0].data(c, p));
}

TEST(Fuse, SinglePixelMapsStack) {
  std::vector<FeatureMap<double>> f{FeatureMap<double>(2, 1, 1, Matrix<double>{{1.0}, {2.0}}),
                                    FeatureMap<double>(1, 1, 1, Matrix<double>{{3.0}})};
  const auto fused = fuse(f, zeros_like(f));
  EXPECT_EQ(fused.concat.data, (Matrix<double>{{1.0}, {2.0}, {3.0}}));
}

TEST(Fuse, TwoLevelResidualMatchesBilinearOracle) {
  std::mt19937_64 rng(2);
  const auto f = fx::random_features<double>(2, 6, 1, rng);
  const auto fh = fx::random_features<double>(2, 6, 1, rng);
  const auto fused = fuse(f, fh);
  oracle::Mat sum2 = channel(f[1], 0);
  const auto h2 = channel(fh[1], 0);
  for (std::size_t y = 0; y < 3; ++y)
    for (std::size_t x = 0; x < 3; ++x) sum2[y][x] += h2[y][x];
  const auto expected = oracle::bilinear(sum2, 6, 6);
  for (std::size_t y = 0; y < 6; ++y)
    for (std::size_t x = 0; x < 6; ++x) {
      EXPECT_NEAR(fused.concat.at(1, y, x), expected[y][x], 1e-6);
      EXPECT_NEAR(fused.bottom.at(0, y, x), f[0].at(0, y, x) + fh[0].at(0, y, x), 1e-15);
    }
  EXPECT_THROW(fuse(f, std::vector<FeatureMap<double>>{fh[0]}), Error);
}

TEST(Heads, ZeroWeightsGiveZeroLogits) {
  std::mt19937_64 rng(3);
  const auto f = fx::random_features<double>(2, 4, 3, rng);
  auto params = init_head_params<double>(HeadSpec{3, 2, 2, 4, 5}, {3, 3}, 6, 1);
  for (auto& [k, v] : params)
    for (auto& x : v.data()) x = 0;
  Tape<double> tape(false);
  const auto fused = fuse(tape, f, {tape.constant(f[0].data), tape.constant(f[1].data)});
  const auto logits = forward_heads(tape, fused, tape.constant(fx::random_matrix(1, 6, rng)), f[1], bind_params(tape, params));
  for (const auto* v : {&*logits.object, &*logits.part, &*logits.material, &*logits.scene, &*logits.texture})
    for (double x : v->value().data()) EXPECT_EQ(x, 0.0);
  EXPECT_EQ(logits.scene->rows(), 4u);
  EXPECT_EQ(logits.texture->rows(), 5u);
  EXPECT_EQ(logits.object->cols(), 16u);
}

TEST(Heads, DenseMatmulOracle) {
  std::mt19937_64 rng(4);
  const auto f = fx::random_features<double>(2, 4, 3, rng);
  const auto fh = fx::random_features<double>(2, 4, 3, rng);
  auto params = init_head_params<double>(HeadSpec{2, 2, 2, 2, 2}, {3, 3}, 5, 2);
  for (auto& [k, v] : params)
    if (k.find(".bias") != std::string::npos)
      for (auto& x : v.data()) x = std::uniform_real_distribution<double>(-1, 1)(rng);
  const auto readout = fx::random_matrix(1, 5, rng);
  Tape<double> tape(false);
  const auto fused = fuse(tape, f, {tape.constant(fh[0].data), tape.constant(fh[1].data)});
  const auto logits = forward_heads(tape, fused, tape.constant(readout), f[1], bind_params(tape, params));

  auto linear = [&](const std::string& task, const oracle::Mat& x) {  // x: C x P
    const auto w = fx::to_mat(params.at(param::head_weight(task)));
    const auto b = fx::to_mat(params.at(param::head_bias(task)));
    auto out = oracle::mul(oracle::transpose(w), x);
    for (std::size_t k = 0; k < out.size(); ++k)
      for (auto& v : out[k]) v += b[k][0];
    return out;
  };
  const auto fused_plain = fuse(f, fh);
  EXPECT_LT(fx::max_diff(logits.object->value(), linear("object", fx::to_mat(fused_plain.concat.data))), 1e-12);
  EXPECT_LT(fx::max_diff(logits.material->value(), linear("material", fx::to_mat(fused_plain.bottom.data))), 1e-12);

  oracle::Mat gap_top = oracle::zeros(3, 1), gap_bottom = oracle::zeros(3, 1);
  for (std::size_t c = 0; c < 3; ++c) {
    for (std::size_t p = 0; p < 4; ++p) gap_top[c][0] += f[1].data(c, p) / 4;
    for (std::size_t p = 0; p < 16; ++p) gap_bottom[c][0] += fused_plain.bottom.data(c, p) / 16;
  }
  const auto proj = fx::to_mat(params.at(param::kSceneReadoutProj));
  const auto r_proj = oracle::mul(oracle::transpose(proj), oracle::transpose(fx::to_mat(readout)));
  for (std::size_t c = 0; c < 3; ++c) gap_top[c][0] += r_proj[c][0];
  EXPECT_LT(fx::max_diff(logits.scene->value(), linear("scene", gap_top)), 1e-12);
  EXPECT_LT(fx::max_diff(logits.texture->value(), linear("texture", gap_bottom)), 1e-12);
  EXPECT_LT(fx::max_diff(texture_map(fused_plain, params), linear("texture", fx::to_mat(fused_plain.bottom.data))), 1e-12);
}

TEST(Heads, SceneWithZeroReadoutProjection) {
  std::mt19937_64 rng(5);
  const auto f = fx::random_features<double>(2, 4, 3, rng);
  auto params = init_head_params<double>(HeadSpec{0, 0, 0, 3, 0}, {3, 3}, 5, 3);
  for (auto& x : params.at(param::kSceneReadoutProj).data()) x = 0;
  Tape<double> tape(false);
  const auto fused = fuse(tape, f, {tape.constant(f[0].data), tape.constant(f[1].data)});
  const auto logits = forward_heads(tape, fused, tape.constant(fx::random_matrix(1, 5, rng)), f[1], bind_params(tape, params));
  EXPECT_FALSE(logits.object.has_value());
  const auto& w = params.at(param::head_weight("scene"));
  for (std::size_t k = 0; k < 3; ++k) {
    double s = 0;
    for (std::size_t c = 0; c < 3; ++c) {
      double gap = 0;
      for (std::size_t p = 0; p < 4; ++p) gap += f[1].data(c, p) / 4;
      s += w(c, k) * gap;
    }
    EXPECT_NEAR(logits.scene->value()(k, 0), s, 1e-12);
  }
}

TEST(Loss, UniformLogitsGiveWeightedLogC) {
  const std::size_t classes = 3;
  Tape<double> tape(false);
  TaskLogits<double> l;
  l.height = 2;
  l.width = 2;
  l.object = l.part = l.material = tape.constant(Matrix<double>(classes, 4));
  l.scene = l.texture = tape.constant(Matrix<double>(classes, 1));
  TaskTargets t;
  t.object = t.part = t.material = LabelGrid{2, 2, {0, 1, 2, 1}};
  t.scene = 2;
  t.texture = 0;
  EXPECT_NEAR(loss_of(l, t), 3.75 * std::log(3.0), 1e-12);
}

TEST(Loss, ConfidentCorrectPredictionIsNearZero) {
  Tape<double> tape(false);
  Matrix<double> z(2, 4);
  const std::vector<std::int32_t> y{0, 1, 1, 0};
  for (std::size_t p = 0; p < 4; ++p) z(static_cast<std::size_t>(y[p]), p) = 40.0;
  TaskTargets t;
  t.object = LabelGrid{2, 2, y};
  EXPECT_LT(loss_of(dense_logits(tape, z, 2, 2), t), 1e-12);
}

TEST(Loss, RandomMatchesCrossEntropyOracle) {
  std::mt19937_64 rng(6);
  const auto z = fx::random_matrix(3, 12, rng, -3, 3);
  std::vector<std::int32_t> y(12);
  for (std::size_t p = 0; p < 12; ++p) y[p] = p % 5 == 0 ? -1 : static_cast<std::int32_t>(rng() % 3);
  Tape<double> tape(false);
  TaskTargets t;
  t.object = LabelGrid{3, 4, y};
  EXPECT_NEAR(loss_of(dense_logits(tape, z, 3, 4), t), oracle::cross_entropy(fx::to_mat(z), y), 1e-12);
}

TEST(Loss, IgnoredPixelsHaveNoInfluence) {
  std::mt19937_64 rng(7);
  auto z = fx::random_matrix(3, 6, rng);
  const std::vector<std::int32_t> y{0, -1, 2, 1, -1, 0};
  TaskTargets t;
  t.object = LabelGrid{2, 3, y};
  Tape<double> tape;
  const auto l = multitask_loss(tape, dense_logits(tape, z, 2, 3), t);
  const auto g = backward(tape, l.total).at("z");
  for (std::size_t k = 0; k < 3; ++k) {
    EXPECT_EQ(g(k, 1), 0.0);
    EXPECT_EQ(g(k, 4), 0.0);
  }
  const double before = l.total.value()(0, 0);
  z(0, 1) += 5;
  z(2, 4) -= 3;
  Tape<double> t2(false);
  EXPECT_EQ(loss_of(dense_logits(t2, z, 2, 3), t), before);
}

TEST(Loss, ShiftInvariance) {
  std::mt19937_64 rng(8);
  auto z = fx::random_matrix(4, 5, rng);
  TaskTargets t;
  t.object = LabelGrid{1, 5, {0, 1, 2, 3, 0}};
  Tape<double> tape(false);
  const double a = loss_of(dense_logits(tape, z, 1, 5), t);
  for (std::size_t k = 0; k < 4; ++k) z(k, 2) += 17.5;
  EXPECT_NEAR(loss_of(dense_logits(tape, z, 1, 5), t), a, 1e-6);
}

TEST(Loss, LinearInLambdaAndNonNegative) {
  std::mt19937_64 rng(9);
  Tape<double> tape(false);
  TaskLogits<double> l;
  l.height = 2;
  l.width = 2;
  l.object = tape.constant(fx::random_matrix(3, 4, rng));
  l.part = tape.constant(fx::random_matrix(2, 4, rng));
  l.material = tape.constant(fx::random_matrix(2, 4, rng));
  l.scene = tape.constant(fx::random_matrix(2, 1, rng));
  l.texture = tape.constant(fx::random_matrix(3, 1, rng));
  TaskTargets t;
  t.object = LabelGrid{2, 2, {0, 1, 2, 0}};
  t.part = LabelGrid{2, 2, {0, 1, 1, -1}};
  t.material = LabelGrid{2, 2, {1, 1, 0, 0}};
  t.scene = 1;
  t.texture = 2;
  Tape<double> t2(false);
  const auto parts = multitask_loss(t2, l, t);
  const LossWeights lw;
  const double expected = lw.scene * parts.scene->value()(0, 0) + lw.texture * parts.texture->value()(0, 0) +
                          lw.object * parts.object->value()(0, 0) + lw.part * parts.part->value()(0, 0) +
                          lw.material * parts.material->value()(0, 0);
  EXPECT_NEAR(parts.total.value()(0, 0), expected, 1e-12);
  EXPECT_GE(parts.total.value()(0, 0), 0.0);
  LossWeights only_part{0, 0, 0, 0.5, 0};
  EXPECT_NEAR(loss_of(l, t, only_part), 0.5 * parts.part->value()(0, 0), 1e-12);
}

TEST(Loss, DenseTargetsAreDownsampled) {
  Tape<double> tape(false);
  Matrix<double> z(2, 1);
  z(1, 0) = 3;
  TaskTargets t;
  t.object = LabelGrid{2, 2, {1, 1, 1, 1}};
  EXPECT_NEAR(loss_of(dense_logits(tape, z, 1, 1), t), std::log(1 + std::exp(-3.0)), 1e-12);
}

TEST(Loss, Errors) {
  Tape<double> tape(false);
  const auto l = dense_logits(tape, Matrix<double>(2, 2), 1, 2);
  TaskTargets none;
  EXPECT_THROW(loss_of(l, none), Error);
  TaskTargets ignored;
  ignored.object = LabelGrid{1, 2, {-1, -1}};
  try {
    loss_of(l, ignored);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::AllPixelsIgnored);
  }
  TaskTargets scene_only;
  scene_only.scene = 0;
  EXPECT_THROW(loss_of(l, scene_only), Error);
}

TEST(Metrics, AccuracyAndIou) {
  EXPECT_EQ(argmax_columns(Matrix<double>{{1, 5, 2}, {3, 0, 2}}), (std::vector<std::int32_t>{1, 0, 0}));
  const std::vector<std::int32_t> pred{0, 0, 1, 1}, truth{0, 1, 1, -1};
  EXPECT_DOUBLE_EQ(pixel_accuracy(pred, truth), 2.0 / 3.0);
  EXPECT_DOUBLE_EQ(mean_iou(pred, truth, 2), 0.5);
}

TEST(Training, PolyFactor) {
  EXPECT_NEAR(poly_factor(25, 50), std::pow(0.5, 0.9), 1e-12);
  EXPECT_NEAR(poly_factor(25, 50), 0.5359, 1e-4);
  EXPECT_EQ(poly_factor(0, 50), 1.0);
  EXPECT_EQ(poly_factor(50, 50), 0.0);
}

TEST(Training, ZeroLearningRateKeepsLossConstant) {
  const auto data = synthetic_dataset<double>(2, 3);
  HierarchyConfig cfg;
  cfg.graph_width = 6;
  cfg.mode = RunMode::Train;
  TrainOptions opt;
  opt.steps = 3;
  opt.base_lr = 0;
  opt.heads = synthetic_heads();
  const auto r = train_toy(data, cfg, opt);
  ASSERT_EQ(r.history.rows.size(), 3u);
  for (const auto& row : r.history.rows) EXPECT_EQ(row.total, r.history.rows[0].total);
}

TEST(Training, ShortRunReducesLossAndIsDeterministic) {
  const auto data = synthetic_dataset<double>(4, 3);
  HierarchyConfig cfg;
  cfg.graph_width = 8;
  cfg.mode = RunMode::Train;
  TrainOptions opt;
  opt.steps = 15;
  opt.base_lr = 0.5;
  opt.heads = synthetic_heads();
  const auto a = train_toy(data, cfg, opt);
  EXPECT_LT(a.history.rows.back().total, a.history.rows.front().total);
  const auto b = train_toy(data, cfg, opt);
  EXPECT_EQ(a.history.to_csv(), b.history.to_csv());
  EXPECT_EQ(a.history.to_csv().substr(0, 48), "step,lr,total,scene,texture,object,part,material");
}

TEST(Training, TwoPhaseTextureFreezesTheRightParameters) {
  const auto data = synthetic_dataset<double>(2, 4);
  HierarchyConfig cfg;
  cfg.graph_width = 4;
  cfg.mode = RunMode::Train;
  TrainOptions opt;
  opt.steps = 2;
  opt.base_lr = 0.5;
  opt.heads = synthetic_heads();
  opt.two_phase_texture = true;
  const auto init = init_model_params<double>(cfg, data[0].inputs.channels(), opt.heads, 0);
  TrainOptions first = opt;
  first.steps = 2;  // step 0 trains the rest, step 1 only texture
  const auto r = train_toy(data, cfg, first, std::optional(init));
  EXPECT_FALSE(r.history.rows[0].texture.has_value());
  EXPECT_TRUE(r.history.rows[1].texture.has_value());
  EXPECT_FALSE(r.history.rows[1].object.has_value());
  EXPECT_NE(r.params.at("head.texture.weight"), init.at("head.texture.weight"));
  EXPECT_NE(r.params.at("head.object.weight"), init.at("head.object.weight"));

  TrainOptions one = opt;
  one.steps = 1;  // the first half is empty, so only texture trains
  const auto r1 = train_toy(data, cfg, one, std::optional(init));
  EXPECT_NE(r1.params.at("head.texture.weight"), init.at("head.texture.weight"));
  EXPECT_EQ(r1.params.at("head.object.weight"), init.at("head.object.weight"));
}

TEST(Dataset, LoadedEqualsInMemory) {
  const auto dir = fx::temp_dir("dataset");
  write_synthetic_dataset(dir, 3, 5);
  const auto disk = load_dataset<double>(dir);
  const auto mem = synthetic_dataset<double>(3, 5);
  ASSERT_EQ(disk.size(), 3u);
  for (std::size_t i = 0; i < 3; ++i) {
    EXPECT_EQ(disk[i].name, mem[i].name);
    EXPECT_EQ(disk[i].inputs.features, mem[i].inputs.features);
    EXPECT_EQ(disk[i].inputs.superpixels, mem[i].inputs.superpixels);
    EXPECT_EQ(disk[i].targets.object, mem[i].targets.object);
    EXPECT_EQ(disk[i].targets.scene, mem[i].targets.scene);
    EXPECT_EQ(disk[i].targets.texture, mem[i].targets.texture);
  }
  EXPECT_THROW(load_dataset<double>(dir / "missing"), Error);
}

TEST(Dataset, BundledToyDataset) {
  const auto data = load_dataset<double>(fx::data_dir() / "toy_dataset");
  ASSERT_FALSE(data.empty());
  for (const auto& s : data) {
    EXPECT_EQ(s.inputs.num_regions(), 4u);
    EXPECT_EQ(s.inputs.features.size(), 4u);
    EXPECT_TRUE(s.targets.object && s.targets.scene && s.targets.texture);
  }
}
