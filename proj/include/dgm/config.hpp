#pragma once

#include <optional>
#include <string>

#include "dgm/core.hpp"

namespace dgm {

enum class InitStrategy { Stride, SeededRandom };
enum class RunMode { Train, Eval };
enum class Nonlinearity { ReluL2Norm, Sigmoid };

inline const char* to_string(InitStrategy s) { return s == InitStrategy::Stride ? "stride" : "seeded-random"; }
inline const char* to_string(RunMode m) { return m == RunMode::Train ? "train" : "eval"; }
inline const char* to_string(Nonlinearity n) { return n == Nonlinearity::ReluL2Norm ? "relu-l2norm" : "sigmoid"; }

/// Hierarchy hyperparameters. Defaults: four levels, half-node pooling,
/// five EM iterations when training and ten when evaluating.
struct HierarchyConfig {
  std::size_t levels = 4;
  std::size_t graph_width = 256;
  double sigma = 1.0;
  std::size_t em_iters_train = 5;
  std::size_t em_iters_eval = 10;
  std::optional<std::size_t> em_iters_override;
  RunMode mode = RunMode::Eval;
  InitStrategy init = InitStrategy::Stride;
  std::uint64_t seed = 0;
  bool tdmp_enabled = true;
  std::optional<double> center_merge_epsilon;
  bool intra_level_conv = false;
  bool stop_gradient_assignments = false;
  Nonlinearity activation = Nonlinearity::ReluL2Norm;
  bool normalize_incoming = true;
  std::size_t max_superpixels = 512;

  std::size_t em_iters() const {
    if (em_iters_override) return *em_iters_override;
    return mode == RunMode::Train ? em_iters_train : em_iters_eval;
  }

  /// Target vertex count of the level above one with `n` vertices.
  static std::size_t pooled_size(std::size_t n) { return ceil_half(n); }

  void validate() const {
    if (levels < 1) throw Error(ErrorCode::InvalidConfig, "levels must be >= 1");
    if (graph_width < 1) throw Error(ErrorCode::InvalidConfig, "graph width must be >= 1");
    if (!(sigma > 0) || !std::isfinite(sigma)) throw Error(ErrorCode::InvalidConfig, "sigma must be > 0");
    if (em_iters() < 1) throw Error(ErrorCode::InvalidConfig, "EM iterations must be >= 1");
    if (center_merge_epsilon && !(*center_merge_epsilon > 0))
      throw Error(ErrorCode::InvalidConfig, "center merge epsilon must be > 0");
    if (max_superpixels < 1) throw Error(ErrorCode::InvalidConfig, "max superpixels must be >= 1");
  }
};

}  // namespace dgm
