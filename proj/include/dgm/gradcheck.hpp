#pragma once

#include <chrono>

#include "dgm/training.hpp"

namespace dgm {

/// Small end-to-end instance: 6 superpixels on a 32 x 32 image, two levels,
/// two EM iterations, graph width 4 and all five tasks supervised.
struct GradcheckInstance {
  HierarchyConfig config;
  Sample<double> sample;
  ParamSet<double> params;
  LossWeights lambda;
};

inline GradcheckInstance make_gradcheck_instance(std::uint64_t seed = 0) {
  GradcheckInstance g;
  g.config.levels = 2;
  g.config.graph_width = 4;
  g.config.em_iters_override = 2;
  g.config.mode = RunMode::Train;
  g.config.seed = seed;

  const std::size_t n = 32;
  std::mt19937_64 rng(seed + 11);
  std::uniform_real_distribution<float> u(0.0f, 1.0f);
  std::vector<float> px(3 * n * n);
  std::vector<std::int32_t> sp(n * n), obj(n * n), part(n * n), mat(n * n);
  float base[6][3];
  for (auto& b : base)
    for (auto& c : b) c = u(rng);
  for (std::size_t y = 0; y < n; ++y)
    for (std::size_t x = 0; x < n; ++x) {
      // 3 columns x 2 rows of blocks, uneven widths.
      const std::size_t col = x < 10 ? 0 : (x < 21 ? 1 : 2);
      const std::size_t region = (y < 16 ? 0 : 3) + col;
      for (std::size_t c = 0; c < 3; ++c)
        px[(c * n + y) * n + x] = std::clamp(base[region][c] + 0.2f * (u(rng) - 0.5f), 0.0f, 1.0f);
      const std::size_t k = y * n + x;
      sp[k] = static_cast<std::int32_t>(region);
      obj[k] = static_cast<std::int32_t>(region % 3);
      part[k] = (x + y) % 7 == 0 ? -1 : static_cast<std::int32_t>(region % 2);
      mat[k] = static_cast<std::int32_t>((region / 3 + x / 16) % 2);
    }
  const Tensor image = Tensor::make_f32({3, static_cast<std::uint32_t>(n), static_cast<std::uint32_t>(n)}, std::move(px));
  auto feats = extract_demo_features<double>(image);
  feats.resize(2);
  g.sample.name = "gradcheck";
  g.sample.inputs = GraphInputs<double>::make(std::move(feats), validate_label_map(n, n, sp));
  g.sample.targets.object = LabelGrid{n, n, obj};
  g.sample.targets.part = LabelGrid{n, n, part};
  g.sample.targets.material = LabelGrid{n, n, mat};
  g.sample.targets.scene = 1;
  g.sample.targets.texture = 2;
  g.params = init_model_params<double>(g.config, g.sample.inputs.channels(), HeadSpec{3, 2, 2, 2, 3}, seed + 5);
  return g;
}

inline double gradcheck_loss(const GradcheckInstance& g, const ParamSet<double>& params) {
  Tape<double> tape(false);
  return sample_loss(tape, g.sample, g.config, bind_params(tape, params), g.lambda, g.sample.targets).total.value()(0, 0);
}

struct GradcheckReport {
  double max_rel_error = 0;
  std::size_t parameter_entries = 0;
  double min_relu_margin = 0;
  double loss = 0;
  double seconds = 0;
};

inline GradcheckReport run_gradcheck(const GradcheckInstance& g, double eps = 1e-5) {
  const auto t0 = std::chrono::steady_clock::now();
  Tape<double> tape(true);
  const auto l = sample_loss(tape, g.sample, g.config, bind_params(tape, g.params), g.lambda, g.sample.targets);
  const auto grads = backward(tape, l.total);
  GradcheckReport r;
  r.loss = l.total.value()(0, 0);
  r.min_relu_margin = tape.min_relu_margin();
  for (const auto& [k, v] : g.params) r.parameter_entries += v.size();
  r.max_rel_error = finite_diff_check([&](const ParamSet<double>& p) { return gradcheck_loss(g, p); }, g.params, grads, eps);
  r.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  return r;
}

}  // namespace dgm
