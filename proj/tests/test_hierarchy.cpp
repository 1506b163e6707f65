#include <gtest/gtest.h>

#include "fixtures.hpp"

using namespace dgm;

namespace {

LevelGraph<double> graph_of(const Matrix<double>& v) { return {1, v, Matrix<double>(v.rows(), v.rows())}; }

std::vector<std::size_t> stride_init(std::size_t n, std::size_t m) {
  std::vector<std::size_t> idx;
  for (std::size_t i = 0; i < m; ++i) idx.push_back(i * n / m);
  return idx;
}

void expect_column_stochastic(const Matrix<double>& p, double tol) {
  for (std::size_t j = 0; j < p.cols(); ++j) {
    double s = 0;
    for (std::size_t i = 0; i < p.rows(); ++i) {
      EXPECT_GE(p(i, j), 0.0);
      s += p(i, j);
    }
    EXPECT_NEAR(s, 1.0, tol);
  }
}

ErrorCode code_of(const std::function<void()>& f) {
  try {
    f();
  } catch (const Error& e) {
    return e.code();
  }
  return ErrorCode::Io;
}

}  // namespace

TEST(InitLevel1, IdentityProjectionOfConstantFeatures) {
  std::mt19937_64 rng(1);
  const auto sp = fx::random_superpixels(8, 8, 5, rng);
  FeatureMap<double> f(3, 8, 8);
  for (auto& v : f.data.data()) v = 1.0;
  const auto g = init_level1(f, sp, build_rag(sp), Matrix<double>::identity(3));
  ASSERT_EQ(g.size(), 5u);
  for (std::size_t i = 0; i < 5; ++i)
    for (std::size_t d = 0; d < 3; ++d) EXPECT_NEAR(g.vertices(i, d), 1.0 / std::sqrt(3.0), 1e-12);
  EXPECT_EQ(g.adjacency, build_rag(sp).dense<double>());
}

TEST(InitLevel1, SingleSuperpixel) {
  const auto sp = validate_label_map(4, 4, std::vector<std::int32_t>(16, 0));
  const auto g = init_level1(FeatureMap<double>(2, 4, 4), sp, build_rag(sp), Matrix<double>::identity(2));
  EXPECT_EQ(g.size(), 1u);
  EXPECT_EQ(g.adjacency, Matrix<double>(1, 1));
}

TEST(InitLevel1, FourRegionsMatchComposedOracle) {
  const auto sp = validate_label_map(4, 4, {0, 0, 1, 1, 0, 0, 1, 1, 2, 2, 3, 3, 2, 2, 3, 3});
  std::mt19937_64 rng(2);
  FeatureMap<double> f(2, 4, 4);
  for (auto& v : f.data.data()) v = std::uniform_real_distribution<double>(-1, 1)(rng);
  const auto proj = fx::random_matrix(2, 3, rng);
  const auto g = init_level1(f, sp, build_rag(sp), proj);
  for (std::size_t r = 0; r < 4; ++r) {
    oracle::Vec mean(2, 0.0);
    for (auto p : sp.region_pixels[r])
      for (std::size_t c = 0; c < 2; ++c) mean[c] += f.data(c, p) / 4.0;
    oracle::Vec out(3, 0.0);
    double n = 0;
    for (std::size_t d = 0; d < 3; ++d) {
      for (std::size_t c = 0; c < 2; ++c) out[d] += mean[c] * proj(c, d);
      n += out[d] * out[d];
    }
    for (std::size_t d = 0; d < 3; ++d) EXPECT_NEAR(g.vertices(r, d), out[d] / std::sqrt(n), 1e-12);
  }
}

TEST(InitLevel1, DimensionMismatch) {
  const auto sp = validate_label_map(2, 2, {0, 0, 1, 1});
  EXPECT_EQ(code_of([&] { init_level1(FeatureMap<double>(2, 2, 2), sp, build_rag(sp), Matrix<double>::identity(3)); }),
            ErrorCode::DimensionMismatch);
}

TEST(Emgp, SingleVertexFixedPoint) {
  const Matrix<double> v{{0.3, -0.2}};
  const auto r = emgp(graph_of(v), 1, 5, 1.0);
  EXPECT_EQ(r.assignment.weights, Matrix<double>{{1.0}});
  EXPECT_EQ(r.centers, v);
  EXPECT_EQ(r.adjacency, Matrix<double>(1, 1));
}

TEST(Emgp, IdenticalRows) {
  Matrix<double> v(5, 3);
  for (std::size_t i = 0; i < 5; ++i) v(i, 0) = 0.5, v(i, 1) = -1, v(i, 2) = 2;
  const auto r = emgp(graph_of(v), 3, 4, 1.0);
  for (std::size_t j = 0; j < 3; ++j) {
    EXPECT_NEAR(r.centers(j, 0), 0.5, 1e-12);
    EXPECT_NEAR(r.centers(j, 1), -1.0, 1e-12);
    EXPECT_NEAR(r.centers(j, 2), 2.0, 1e-12);
  }
  expect_column_stochastic(r.assignment.weights, 1e-12);
}

TEST(Emgp, TwoClustersMatchSoftEmOracle) {
  Matrix<double> v(4, 3);
  const double xs[4] = {0.0, 0.1, 10.0, 10.1};
  for (std::size_t i = 0; i < 4; ++i) v(i, 0) = xs[i];
  const auto r = emgp(graph_of(v), 2, 5, 1.0);
  const auto o = oracle::soft_em(fx::to_mat(v), {0, 2}, 5, 1.0);
  EXPECT_LT(fx::max_diff(r.centers, o.centers), 1e-6);
  EXPECT_LT(fx::max_diff(r.assignment.weights, o.p), 1e-6);
  const auto& p = r.assignment.weights;
  EXPECT_GT(p(0, 0), p(0, 1));
  EXPECT_GT(p(1, 0), p(1, 1));
  EXPECT_LT(p(2, 0), p(2, 1));
  EXPECT_LT(p(3, 0), p(3, 1));
}

TEST(Emgp, RandomInstancesMatchOracle) {
  std::mt19937_64 rng(3);
  std::uniform_int_distribution<std::size_t> nd(1, 16), dd(1, 8), kd(1, 5);
  for (int trial = 0; trial < 40; ++trial) {
    const std::size_t n = nd(rng), d = dd(rng), k = kd(rng);
    const std::size_t m = std::uniform_int_distribution<std::size_t>(1, n)(rng);
    const double sigma = std::uniform_real_distribution<double>(0.5, 2.0)(rng);
    const auto v = fx::random_matrix(n, d, rng);
    const auto r = emgp(graph_of(v), m, k, sigma);
    const auto o = oracle::soft_em(fx::to_mat(v), stride_init(n, m), k, sigma);
    EXPECT_LT(fx::max_diff(r.centers, o.centers), 1e-6);
    EXPECT_LT(fx::max_diff(r.assignment.weights, o.p), 1e-6);
  }
}

TEST(Emgp, PooledAdjacencyMatchesOracleAndIsSymmetric) {
  std::mt19937_64 rng(4);
  const auto v = fx::random_matrix(7, 3, rng);
  Matrix<double> e = fx::random_matrix(7, 7, rng, 0, 1);
  for (std::size_t i = 0; i < 7; ++i) {
    e(i, i) = 0;
    for (std::size_t j = 0; j < i; ++j) e(i, j) = e(j, i);
  }
  const auto r = emgp(LevelGraph<double>{1, v, e}, 4, 3, 1.0);
  EXPECT_LT(fx::max_diff(r.adjacency, oracle::pool_adjacency(fx::to_mat(r.assignment.weights), fx::to_mat(e))), 1e-12);
  for (std::size_t i = 0; i < 4; ++i) {
    EXPECT_EQ(r.adjacency(i, i), 0.0);
    for (std::size_t j = 0; j < 4; ++j) {
      EXPECT_EQ(r.adjacency(i, j), r.adjacency(j, i));
      EXPECT_GE(r.adjacency(i, j), 0.0);
    }
  }
}

TEST(Emgp, TranslationInvariance) {
  std::mt19937_64 rng(5);
  const auto v = fx::random_matrix(9, 4, rng);
  auto shifted = v;
  const double c[4] = {3.0, -1.5, 0.25, 7.0};
  for (std::size_t i = 0; i < 9; ++i)
    for (std::size_t d = 0; d < 4; ++d) shifted(i, d) += c[d];
  const auto a = emgp(graph_of(v), 5, 4, 1.0), b = emgp(graph_of(shifted), 5, 4, 1.0);
  EXPECT_LT(fx::max_diff(a.assignment.weights, fx::to_mat(b.assignment.weights)), 1e-9);
}

TEST(Emgp, SigmaScaling) {
  std::mt19937_64 rng(6);
  const auto v = fx::random_matrix(8, 3, rng);
  auto half = v;
  for (auto& x : half.data()) x /= 2;
  const auto a = emgp(graph_of(v), 4, 3, 2.0), b = emgp(graph_of(half), 4, 3, 1.0);
  EXPECT_LT(fx::max_diff(a.assignment.weights, fx::to_mat(b.assignment.weights)), 1e-9);
}

TEST(Emgp, PermutationEquivariance) {
  // Stride init picks rows 0, 2, 4, 6; permuting only the odd rows keeps the init.
  std::mt19937_64 rng(7);
  const auto v = fx::random_matrix(8, 3, rng);
  const std::size_t perm[8] = {0, 5, 2, 7, 4, 1, 6, 3};
  Matrix<double> pv(8, 3);
  for (std::size_t i = 0; i < 8; ++i)
    for (std::size_t d = 0; d < 3; ++d) pv(i, d) = v(perm[i], d);
  const auto a = emgp(graph_of(v), 4, 5, 1.0), b = emgp(graph_of(pv), 4, 5, 1.0);
  EXPECT_LT(fx::max_diff(b.centers, fx::to_mat(a.centers)), 1e-12);
  for (std::size_t i = 0; i < 8; ++i)
    for (std::size_t j = 0; j < 4; ++j) EXPECT_NEAR(b.assignment.weights(i, j), a.assignment.weights(perm[i], j), 1e-12);
}

TEST(Emgp, SeededRandomInit) {
  std::mt19937_64 rng(8);
  const auto v = fx::random_matrix(10, 3, rng);
  EmgpOptions opt;
  opt.init = InitStrategy::SeededRandom;
  opt.seed = 42;
  const auto idx = center_init_indices(10, 4, InitStrategy::SeededRandom, 42);
  EXPECT_EQ(std::set<std::size_t>(idx.begin(), idx.end()).size(), 4u);
  const auto r = emgp(graph_of(v), 4, 3, 1.0, opt);
  const auto o = oracle::soft_em(fx::to_mat(v), idx, 3, 1.0);
  EXPECT_LT(fx::max_diff(r.centers, o.centers), 1e-9);
  EXPECT_EQ(r.centers, emgp(graph_of(v), 4, 3, 1.0, opt).centers);
}

TEST(Emgp, CenterMergingReducesCount) {
  Matrix<double> v(6, 2);
  for (std::size_t i = 0; i < 6; ++i) v(i, 0) = i < 4 ? 0.0 : 5.0;
  EmgpOptions opt;
  opt.merge_epsilon = 1e-3;
  const auto r = emgp(graph_of(v), 3, 3, 1.0, opt);
  EXPECT_EQ(r.centers.rows(), 2u);
  expect_column_stochastic(r.assignment.weights, 1e-12);
}

TEST(Emgp, Errors) {
  EXPECT_EQ(code_of([] { emgp(graph_of(Matrix<double>(0, 2)), 1, 1, 1.0); }), ErrorCode::EmptyGraph);
  EXPECT_EQ(code_of([] { emgp(graph_of(Matrix<double>(3, 2)), 4, 1, 1.0); }), ErrorCode::InvalidM);
  EXPECT_EQ(code_of([] { emgp(graph_of(Matrix<double>(3, 2)), 0, 1, 1.0); }), ErrorCode::InvalidM);
}

TEST(Cumulative, SingleMatrix) {
  const Matrix<double> p{{0.2, 0.5}, {0.8, 0.5}};
  EXPECT_EQ(cumulative_assignment<double>({{p}}), p);
}

TEST(Cumulative, PermutationChain) {
  const Matrix<double> a{{0, 1, 0}, {0, 0, 1}, {1, 0, 0}};
  const Matrix<double> b{{0, 0, 1}, {1, 0, 0}, {0, 1, 0}};
  const auto c = cumulative_assignment<double>({{a}, {b}});
  EXPECT_EQ(c, Matrix<double>::identity(3));
}

TEST(Cumulative, RandomStochasticMatchesNaiveProduct) {
  std::mt19937_64 rng(9);
  auto stochastic = [&](std::size_t r, std::size_t c) {
    auto m = fx::random_matrix(r, c, rng, 0.01, 1);
    for (std::size_t j = 0; j < c; ++j) {
      double s = 0;
      for (std::size_t i = 0; i < r; ++i) s += m(i, j);
      for (std::size_t i = 0; i < r; ++i) m(i, j) /= s;
    }
    return m;
  };
  const auto a = stochastic(6, 4), b = stochastic(4, 2);
  const auto c = cumulative_assignment<double>({{a}, {b}});
  expect_column_stochastic(c, 1e-9);
  EXPECT_LT(fx::max_diff(c, oracle::mul(fx::to_mat(a), fx::to_mat(b))), 1e-12);
  EXPECT_EQ(code_of([&] { cumulative_assignment<double>({{a}, {a}}); }), ErrorCode::ShapeMismatch);
}

TEST(Project, ZeroCumulativeLeavesSelfLoop) {
  const auto sp = validate_label_map(2, 2, {0, 0, 1, 1});
  std::mt19937_64 rng(10);
  FeatureMap<double> f(2, 2, 2);
  for (auto& v : f.data.data()) v = 1.0;
  const Matrix<double> centers{{3.0, 4.0}, {-1.0, 2.0}};
  const auto out = project(f, sp, centers, Matrix<double>(2, 2), ProjectParams<double>{Matrix<double>::identity(2), {Matrix<double>::identity(2)}});
  EXPECT_NEAR(out(0, 0), 0.6, 1e-12);
  EXPECT_NEAR(out(0, 1), 0.8, 1e-12);
  EXPECT_EQ(out(1, 0), 0.0);
  EXPECT_NEAR(out(1, 1), 1.0, 1e-12);
}

TEST(Project, SingleVertexAverageOfIdenticalRows) {
  const auto sp = validate_label_map(2, 2, std::vector<std::int32_t>(4, 0));
  FeatureMap<double> f(2, 2, 2);
  for (std::size_t p = 0; p < 4; ++p) f.data(0, p) = 0.6, f.data(1, p) = -0.8;
  const Matrix<double> centers{{0.6, -0.8}};
  const auto out = project(f, sp, centers, Matrix<double>{{1.0}}, ProjectParams<double>{Matrix<double>::identity(2), {Matrix<double>::identity(2)}});
  EXPECT_NEAR(out(0, 0), 1.0, 1e-12);
  EXPECT_EQ(out(0, 1), 0.0);
}

TEST(Project, ThreeByTwoMatchesDenseOracle) {
  const auto sp = validate_label_map(1, 3, {0, 1, 2});
  std::mt19937_64 rng(11);
  FeatureMap<double> f(3, 1, 3);
  for (auto& v : f.data.data()) v = std::uniform_real_distribution<double>(-1, 1)(rng);
  const auto centers = fx::random_matrix(2, 4, rng);
  const Matrix<double> cum{{0.7, 0.1}, {0.2, 0.3}, {0.1, 0.6}};
  const auto in_proj = fx::random_matrix(3, 4, rng), w = fx::random_matrix(4, 4, rng);
  const auto out = project(f, sp, centers, cum, ProjectParams<double>{in_proj, {w}});
  oracle::Mat u;
  for (std::size_t r = 0; r < 3; ++r) {
    oracle::Vec x(4, 0.0);
    for (std::size_t d = 0; d < 4; ++d)
      for (std::size_t c = 0; c < 3; ++c) x[d] += f.data(c, r) * in_proj(c, d);
    double n = 0;
    for (double v : x) n += v * v;
    for (double& v : x) v /= std::sqrt(n);
    u.push_back(x);
  }
  const auto expected = oracle::gconv(u, fx::to_mat(centers), fx::to_mat(cum), 1.0, fx::to_mat(w));
  EXPECT_LT(fx::max_diff(out, expected), 1e-12);
}

TEST(Readout, Examples) {
  EXPECT_EQ(readout(Matrix<double>{{1.0, -2.0}}), (Matrix<double>{{1.0, -2.0}}));
  EXPECT_EQ(readout(Matrix<double>{{1.0, -2.0}, {-1.0, 2.0}}), (Matrix<double>{{0.0, 0.0}}));
  std::mt19937_64 rng(12);
  const auto v = fx::random_matrix(5, 3, rng);
  const auto r = readout(v);
  for (std::size_t d = 0; d < 3; ++d) {
    double s = 0;
    for (std::size_t i = 0; i < 5; ++i) s += v(i, d);
    EXPECT_NEAR(r(0, d), s / 5, 1e-9);
  }
  EXPECT_EQ(code_of([] { readout(Matrix<double>(0, 3)); }), ErrorCode::EmptyGraph);
}

TEST(Build, SingleLevel) {
  std::mt19937_64 rng(13);
  auto inst = fx::random_instance<double>(rng, 6, 1, 5);
  const auto h = build_hierarchy(inst.inputs, inst.cfg, inst.params);
  ASSERT_EQ(h.num_levels(), 1u);
  EXPECT_TRUE(h.assignments.empty());
  EXPECT_EQ(h.readout, readout(h.levels[0].vertices));
}

TEST(Build, SingleSuperpixelChain) {
  std::mt19937_64 rng(14);
  auto inst = fx::random_instance<double>(rng, 1, 4, 4);
  const auto h = build_hierarchy(inst.inputs, inst.cfg, inst.params);
  EXPECT_EQ(h.sizes(), (std::vector<std::size_t>{1, 1, 1, 1}));
  for (const auto& p : h.assignments) EXPECT_EQ(p, Matrix<double>{{1.0}});
}

TEST(Build, ThreeLevelsReplayOracles) {
  std::mt19937_64 rng(15);
  auto inst = fx::random_instance<double>(rng, 8, 3, 6);
  const auto h = build_hierarchy(inst.inputs, inst.cfg, inst.params);
  EXPECT_EQ(h.sizes(), (std::vector<std::size_t>{8, 4, 2}));
  const std::size_t k = inst.cfg.em_iters();
  oracle::Mat cum;
  for (std::size_t l = 0; l + 1 < 3; ++l) {
    const auto& v = h.levels[l].vertices;
    const auto o = oracle::soft_em(fx::to_mat(v), stride_init(v.rows(), h.levels[l + 1].size()), k, inst.cfg.sigma);
    EXPECT_LT(fx::max_diff(h.assignments[l], o.p), 1e-9);
    EXPECT_LT(fx::max_diff(h.centers[l], o.centers), 1e-9);
    cum = l == 0 ? o.p : oracle::mul(cum, o.p);
    EXPECT_LT(fx::max_diff(h.cumulative[l], cum), 1e-9);
    expect_column_stochastic(h.cumulative[l], 1e-9);
    const auto w = inst.params.at(param::project(l + 2));
    const auto expected = oracle::gconv(fx::to_mat(h.pooled[l + 1]), o.centers, cum, 1.0, fx::to_mat(w));
    EXPECT_LT(fx::max_diff(h.levels[l + 1].vertices, expected), 1e-9);
  }
}

TEST(Build, DeterministicAndLevelCountChecked) {
  std::mt19937_64 rng(16);
  auto inst = fx::random_instance<double>(rng, 9, 3, 4);
  EXPECT_EQ(build_hierarchy(inst.inputs, inst.cfg, inst.params), build_hierarchy(inst.inputs, inst.cfg, inst.params));
  auto cfg = inst.cfg;
  cfg.levels = 2;
  EXPECT_EQ(code_of([&] { build_hierarchy(inst.inputs, cfg, inst.params); }), ErrorCode::LevelCountMismatch);
}

TEST(Config, StructuralDefaults) {
  HierarchyConfig c;
  EXPECT_EQ(c.levels, 4u);
  c.mode = RunMode::Train;
  EXPECT_EQ(c.em_iters(), 5u);
  c.mode = RunMode::Eval;
  EXPECT_EQ(c.em_iters(), 10u);
  EXPECT_EQ(HierarchyConfig::pooled_size(7), 4u);
  EXPECT_EQ(HierarchyConfig::pooled_size(8), 4u);
  c.sigma = 0;
  EXPECT_EQ(code_of([&] { c.validate(); }), ErrorCode::InvalidConfig);
}

TEST(Json, HierarchyRoundTrip) {
  std::mt19937_64 rng(17);
  auto inst = fx::random_instance<double>(rng, 7, 3, 4);
  const auto r = run_graph_pipeline(inst.inputs, inst.cfg, inst.params);
  const auto back = hierarchy_from_json<double>(hierarchy_to_json(r.refined));
  EXPECT_EQ(back, r.refined);
  EXPECT_EQ(config_to_json(back.config), config_to_json(inst.cfg));

  const auto j = hierarchy_to_json(r.refined, false);
  EXPECT_FALSE(j["levels"][0].contains("vertex_features"));
  EXPECT_EQ(j["levels"][0]["num_vertices"], 7);
  const auto light = hierarchy_from_json<double>(j);
  EXPECT_EQ(light.sizes(), r.refined.sizes());
  EXPECT_EQ(light.assignments, r.refined.assignments);
  for (std::size_t l = 0; l < 3; ++l) EXPECT_EQ(light.levels[l].adjacency, r.refined.levels[l].adjacency);

  EXPECT_EQ(code_of([] { hierarchy_from_json<double>(json{{"format", "other"}}); }), ErrorCode::Parse);
}
