#pragma once

#include <random>

#include "dgm/autodiff.hpp"
#include "dgm/config.hpp"

namespace dgm {

// Parameter naming. Levels are 1-based.
namespace param {
inline std::string input_proj(std::size_t l) { return "input_proj." + std::to_string(l); }
inline std::string project(std::size_t l) { return "project." + std::to_string(l); }
inline std::string intra(std::size_t l) { return "intra." + std::to_string(l); }
inline std::string tdmp(std::size_t l) { return "tdmp." + std::to_string(l); }
inline std::string reproject(std::size_t l) { return "reproject." + std::to_string(l); }
inline std::string output_proj(std::size_t l) { return "output_proj." + std::to_string(l); }
}  // namespace param

/// Class counts of the parsing heads; zero disables a task.
struct HeadSpec {
  std::size_t object = 0;
  std::size_t part = 0;
  std::size_t material = 0;
  std::size_t scene = 0;
  std::size_t texture = 0;
};

template <class T>
Matrix<T> random_matrix(std::size_t rows, std::size_t cols, double stddev, std::mt19937_64& rng) {
  std::normal_distribution<double> dist(0.0, stddev);
  Matrix<T> m(rows, cols);
  for (T& v : m.data()) v = static_cast<T>(dist(rng));
  return m;
}

/// Parameters of the hierarchy itself: input projections C_l -> D, graph
/// convolutions for projection / top-down / re-projection, and output maps D -> C_l.
template <class T>
ParamSet<T> init_graph_params(const HierarchyConfig& cfg, const std::vector<std::size_t>& channels,
                              std::uint64_t seed) {
  if (channels.size() != cfg.levels) throw Error(ErrorCode::LevelCountMismatch, "one channel count per level");
  std::mt19937_64 rng(seed);
  const std::size_t d = cfg.graph_width;
  const double gstd = 1.0 / std::sqrt(static_cast<double>(d));
  ParamSet<T> p;
  for (std::size_t l = 1; l <= cfg.levels; ++l) {
    const std::size_t c = channels[l - 1];
    p[param::input_proj(l)] = random_matrix<T>(c, d, 1.0 / std::sqrt(static_cast<double>(c)), rng);
    if (l >= 2) p[param::project(l)] = random_matrix<T>(d, d, gstd, rng);
    if (l >= 2 && cfg.intra_level_conv) p[param::intra(l)] = random_matrix<T>(d, d, gstd, rng);
    p[param::tdmp(l)] = random_matrix<T>(d, d, gstd, rng);
    p[param::reproject(l)] = random_matrix<T>(d, d, gstd, rng);
    p[param::output_proj(l)] = random_matrix<T>(d, c, gstd, rng);
  }
  return p;
}

/// Identity-like graph parameters (D x D identities, C_l x D truncated
/// identities) used by hand-checkable examples.
template <class T>
ParamSet<T> identity_graph_params(const HierarchyConfig& cfg, const std::vector<std::size_t>& channels) {
  const std::size_t d = cfg.graph_width;
  auto eye = [](std::size_t r, std::size_t c) {
    Matrix<T> m(r, c);
    for (std::size_t i = 0; i < std::min(r, c); ++i) m(i, i) = T(1);
    return m;
  };
  ParamSet<T> p;
  for (std::size_t l = 1; l <= cfg.levels; ++l) {
    const std::size_t c = channels[l - 1];
    p[param::input_proj(l)] = eye(c, d);
    if (l >= 2) p[param::project(l)] = eye(d, d);
    if (l >= 2 && cfg.intra_level_conv) p[param::intra(l)] = eye(d, d);
    p[param::tdmp(l)] = eye(d, d);
    p[param::reproject(l)] = eye(d, d);
    p[param::output_proj(l)] = eye(d, c);
  }
  return p;
}

template <class T>
const Matrix<T>& require_param(const ParamSet<T>& p, const std::string& name) {
  const auto it = p.find(name);
  if (it == p.end()) throw Error(ErrorCode::DimensionMismatch, "missing parameter " + name);
  return it->second;
}

}  // namespace dgm
