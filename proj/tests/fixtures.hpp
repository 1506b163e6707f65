#pragma once

#include <unistd.h>

#include <filesystem>
#include <random>
#include <sstream>

#include "dgm/dgm.hpp"
#include "oracles.hpp"

namespace fx {

using dgm::Matrix;

template <class T>
oracle::Mat to_mat(const Matrix<T>& m) {
  oracle::Mat out(m.rows(), oracle::Vec(m.cols()));
  for (std::size_t i = 0; i < m.rows(); ++i)
    for (std::size_t j = 0; j < m.cols(); ++j) out[i][j] = static_cast<double>(m(i, j));
  return out;
}

template <class T = double>
Matrix<T> from_mat(const oracle::Mat& m) {
  Matrix<T> out(m.size(), m.empty() ? 0 : m[0].size());
  for (std::size_t i = 0; i < m.size(); ++i)
    for (std::size_t j = 0; j < m[i].size(); ++j) out(i, j) = static_cast<T>(m[i][j]);
  return out;
}

template <class T>
double max_diff(const Matrix<T>& a, const oracle::Mat& b) {
  double d = 0;
  for (std::size_t i = 0; i < a.rows(); ++i)
    for (std::size_t j = 0; j < a.cols(); ++j) d = std::max(d, std::abs(static_cast<double>(a(i, j)) - b[i][j]));
  return d;
}

template <class T = double>
Matrix<T> random_matrix(std::size_t r, std::size_t c, std::mt19937_64& rng, double lo = -1, double hi = 1) {
  std::uniform_real_distribution<double> u(lo, hi);
  Matrix<T> m(r, c);
  for (auto& v : m.data()) v = static_cast<T>(u(rng));
  return m;
}

/// Voronoi-style label map with `n` seeds on an h x w grid; every seed keeps
/// at least its own pixel, so exactly `n` regions exist.
inline dgm::SuperpixelMap random_superpixels(std::size_t h, std::size_t w, std::size_t n, std::mt19937_64& rng) {
  std::vector<std::size_t> cells(h * w);
  std::iota(cells.begin(), cells.end(), 0);
  std::shuffle(cells.begin(), cells.end(), rng);
  cells.resize(n);
  std::vector<std::int32_t> labels(h * w);
  for (std::size_t p = 0; p < h * w; ++p) {
    const long y = static_cast<long>(p / w), x = static_cast<long>(p % w);
    long best = std::numeric_limits<long>::max();
    for (std::size_t s = 0; s < n; ++s) {
      const long sy = static_cast<long>(cells[s] / w), sx = static_cast<long>(cells[s] % w);
      const long d = (sy - y) * (sy - y) + (sx - x) * (sx - x);
      if (d < best) {
        best = d;
        labels[p] = static_cast<std::int32_t>(s);
      }
    }
  }
  return dgm::validate_label_map(h, w, labels);
}

template <class T>
std::vector<dgm::FeatureMap<T>> random_features(std::size_t levels, std::size_t size, std::size_t channels,
                                                std::mt19937_64& rng) {
  std::vector<dgm::FeatureMap<T>> f;
  std::normal_distribution<double> g(0.0, 1.0);
  for (std::size_t l = 0; l < levels; ++l) {
    const std::size_t s = std::max<std::size_t>(1, size >> l);
    dgm::FeatureMap<T> m(channels, s, s);
    for (auto& v : m.data.data()) v = static_cast<T>(g(rng));
    f.push_back(std::move(m));
  }
  return f;
}

/// A random hierarchy problem: superpixels on a 16 x 16 grid, features at
/// strides 1, 2, 4, 8, random graph parameters.
template <class T>
struct RandomInstance {
  dgm::HierarchyConfig cfg;
  dgm::GraphInputs<T> inputs;
  dgm::ParamSet<T> params;
};

template <class T>
RandomInstance<T> random_instance(std::mt19937_64& rng, std::size_t n1, std::size_t levels, std::size_t width,
                                  std::size_t channels = 3) {
  RandomInstance<T> r;
  r.cfg.levels = levels;
  r.cfg.graph_width = width;
  r.cfg.seed = rng();
  auto sp = random_superpixels(16, 16, n1, rng);
  r.inputs = dgm::GraphInputs<T>::make(random_features<T>(levels, 16, channels, rng), std::move(sp));
  r.params = dgm::init_graph_params<T>(r.cfg, r.inputs.channels(), rng());
  return r;
}

inline std::filesystem::path data_dir() { return DGM_DATA_DIR; }

inline std::filesystem::path temp_dir(const std::string& name) {
  auto p = std::filesystem::temp_directory_path() / ("dgm_test_" + name + "_" + std::to_string(::getpid()));
  std::filesystem::remove_all(p);
  std::filesystem::create_directories(p);
  return p;
}

}  // namespace fx
