#pragma once

#include <array>
#include <functional>
#include <map>
#include <memory>
#include <optional>

#include "dgm/linalg.hpp"

// Reverse-mode differentiation over a fixed set of matrix primitives.
//
// A Tape in recording mode appends one node per primitive call; with
// recording off the same primitives run and only values are produced, so a
// taped and an untaped forward pass are bitwise identical.
namespace dgm {

enum class Op {
  Parameter,
  MatMul,
  MatMulTN,
  Transpose,
  Add,
  Sub,
  Scale,
  AddScalar,
  Hadamard,
  AddRowBroadcast,
  AddColBroadcast,
  ReLU,
  Sigmoid,
  L2NormalizeRows,
  ColSums,
  DivRows,
  PairwiseSqDist,
  ColSoftmax,
  RowSoftmax,
  GatherRows,
  MeanRows,
  MeanCols,
  SymmetrizeOffDiag,
  ConcatRows,
  ScatterToPixels,
  ResizeBilinear,
  SoftmaxCrossEntropy,
  StopGradient,
};

inline const char* to_string(Op op) {
  switch (op) {
    case Op::Parameter: return "parameter";
    case Op::MatMul: return "matmul";
    case Op::MatMulTN: return "matmul_tn";
    case Op::Transpose: return "transpose";
    case Op::Add: return "add";
    case Op::Sub: return "sub";
    case Op::Scale: return "scale";
    case Op::AddScalar: return "add_scalar";
    case Op::Hadamard: return "hadamard";
    case Op::AddRowBroadcast: return "add_row_broadcast";
    case Op::AddColBroadcast: return "add_col_broadcast";
    case Op::ReLU: return "relu";
    case Op::Sigmoid: return "sigmoid";
    case Op::L2NormalizeRows: return "l2_normalize_rows";
    case Op::ColSums: return "col_sums";
    case Op::DivRows: return "div_rows";
    case Op::PairwiseSqDist: return "pairwise_sqdist";
    case Op::ColSoftmax: return "col_softmax";
    case Op::RowSoftmax: return "row_softmax";
    case Op::GatherRows: return "gather_rows";
    case Op::MeanRows: return "mean_rows";
    case Op::MeanCols: return "mean_cols";
    case Op::SymmetrizeOffDiag: return "symmetrize_off_diag";
    case Op::ConcatRows: return "concat_rows";
    case Op::ScatterToPixels: return "scatter_to_pixels";
    case Op::ResizeBilinear: return "resize_bilinear";
    case Op::SoftmaxCrossEntropy: return "softmax_cross_entropy";
    case Op::StopGradient: return "stop_gradient";
  }
  return "unknown";
}

template <class T>
class Tape;

/// Handle to a matrix value; `id() >= 0` when the value lives on a recording tape.
template <class T>
class Var {
 public:
  Var() = default;

  const Matrix<T>& value() const { return *value_; }
  std::shared_ptr<const Matrix<T>> shared() const { return value_; }
  int id() const noexcept { return id_; }
  bool valid() const noexcept { return static_cast<bool>(value_); }
  std::size_t rows() const { return value_->rows(); }
  std::size_t cols() const { return value_->cols(); }

 private:
  friend class Tape<T>;
  Var(std::shared_ptr<const Matrix<T>> v, int id) : value_(std::move(v)), id_(id) {}

  std::shared_ptr<const Matrix<T>> value_;
  int id_ = -1;
};

template <class T>
using GradientSet = std::map<std::string, Matrix<T>>;

template <class T>
using ParamSet = std::map<std::string, Matrix<T>>;

template <class T>
class Tape {
 public:
  using Inputs = std::vector<const Matrix<T>*>;
  using ForwardFn = std::function<Matrix<T>(const Inputs&)>;
  // gin[k] is null for inputs that need no gradient.
  using VjpFn = std::function<void(const Inputs& in, const Matrix<T>& out, const Matrix<T>& gout,
                                   std::vector<Matrix<T>*>& gin)>;

  struct Node {
    Op op;
    std::string name;  // parameters only
    std::vector<int> input_ids;
    std::vector<std::shared_ptr<const Matrix<T>>> inputs;
    std::shared_ptr<const Matrix<T>> output;
    ForwardFn forward;
    VjpFn vjp;
  };

  explicit Tape(bool recording = true) : recording_(recording) {}

  bool recording() const noexcept { return recording_; }
  const std::vector<Node>& nodes() const noexcept { return nodes_; }

  /// Number of recorded primitives (parameter leaves excluded).
  std::size_t primitive_count() const {
    return static_cast<std::size_t>(std::count_if(nodes_.begin(), nodes_.end(),
                                                  [](const Node& n) { return n.op != Op::Parameter; }));
  }
  std::size_t count(Op op) const {
    return static_cast<std::size_t>(
        std::count_if(nodes_.begin(), nodes_.end(), [op](const Node& n) { return n.op == op; }));
  }

  /// Smallest |x| over all ReLU inputs seen while recording. Finite-difference
  /// checks use it to stay away from kinks.
  T min_relu_margin() const { return min_relu_margin_; }

  Var<T> constant(Matrix<T> m) const { return Var<T>(std::make_shared<const Matrix<T>>(std::move(m)), -1); }

  Var<T> parameter(const std::string& name, Matrix<T> m) {
    auto v = std::make_shared<const Matrix<T>>(std::move(m));
    if (!recording_) return Var<T>(v, -1);
    nodes_.push_back(Node{Op::Parameter, name, {}, {}, v, {}, {}});
    return Var<T>(v, static_cast<int>(nodes_.size()) - 1);
  }

  Var<T> apply(Op op, std::vector<Var<T>> ins, ForwardFn fwd, VjpFn vjp) {
    Inputs raw;
    raw.reserve(ins.size());
    for (const auto& v : ins) raw.push_back(&v.value());
    auto out = std::make_shared<const Matrix<T>>(fwd(raw));
    if (!recording_) return Var<T>(out, -1);
    Node n{op, {}, {}, {}, out, std::move(fwd), std::move(vjp)};
    for (const auto& v : ins) {
      n.input_ids.push_back(v.id());
      n.inputs.push_back(v.shared());
    }
    nodes_.push_back(std::move(n));
    return Var<T>(out, static_cast<int>(nodes_.size()) - 1);
  }

  /// Recomputes every node from its recorded inputs and reports whether all
  /// outputs match bitwise.
  bool replay_matches() const {
    std::vector<std::shared_ptr<const Matrix<T>>> values(nodes_.size());
    for (std::size_t i = 0; i < nodes_.size(); ++i) {
      const Node& n = nodes_[i];
      if (n.op == Op::Parameter) {
        values[i] = n.output;
        continue;
      }
      Inputs raw;
      for (std::size_t k = 0; k < n.inputs.size(); ++k)
        raw.push_back(n.input_ids[k] >= 0 ? values[static_cast<std::size_t>(n.input_ids[k])].get() : n.inputs[k].get());
      auto out = std::make_shared<const Matrix<T>>(n.forward(raw));
      if (!(*out == *n.output)) return false;
      values[i] = out;
    }
    return true;
  }

  void note_relu_inputs(const Matrix<T>& x) {
    if (!recording_) return;
    for (T v : x.data()) min_relu_margin_ = std::min(min_relu_margin_, std::abs(v));
  }

 private:
  bool recording_;
  std::vector<Node> nodes_;
  T min_relu_margin_ = std::numeric_limits<T>::infinity();
};

/// Vector-Jacobian products in reverse tape order. Returns the gradient of
/// every node (empty matrix where no gradient reached). The tape is not modified.
template <class T>
std::vector<Matrix<T>> backward_all(const Tape<T>& tape, const Var<T>& output, const Matrix<T>& seed) {
  if (!seed.same_shape(output.value())) throw Error(ErrorCode::ShapeMismatch, "seed gradient shape differs from output");
  const auto& nodes = tape.nodes();
  std::vector<Matrix<T>> grads(nodes.size());
  if (output.id() < 0) return grads;
  grads[static_cast<std::size_t>(output.id())] = seed;
  for (std::size_t i = static_cast<std::size_t>(output.id()) + 1; i-- > 0;) {
    const auto& n = nodes[i];
    if (n.op == Op::Parameter || grads[i].empty()) continue;
    typename Tape<T>::Inputs raw;
    std::vector<Matrix<T>*> gin(n.inputs.size(), nullptr);
    for (std::size_t k = 0; k < n.inputs.size(); ++k) {
      raw.push_back(n.inputs[k].get());
      const int id = n.input_ids[k];
      if (id < 0) continue;
      auto& g = grads[static_cast<std::size_t>(id)];
      if (g.empty()) g = Matrix<T>(n.inputs[k]->rows(), n.inputs[k]->cols());
      gin[k] = &g;
    }
    if (n.vjp) n.vjp(raw, *n.output, grads[i], gin);
  }
  return grads;
}

template <class T>
GradientSet<T> backward(const Tape<T>& tape, const Var<T>& output, const Matrix<T>& seed) {
  const auto grads = backward_all(tape, output, seed);
  GradientSet<T> out;
  const auto& nodes = tape.nodes();
  for (std::size_t i = 0; i < nodes.size(); ++i) {
    if (nodes[i].op != Op::Parameter) continue;
    Matrix<T> g = grads[i].empty() ? Matrix<T>(nodes[i].output->rows(), nodes[i].output->cols()) : grads[i];
    auto [it, inserted] = out.emplace(nodes[i].name, g);
    if (!inserted)
      for (std::size_t k = 0; k < g.size(); ++k) it->second.data()[k] += g.data()[k];
  }
  return out;
}

template <class T>
GradientSet<T> backward(const Tape<T>& tape, const Var<T>& scalar_output) {
  return backward(tape, scalar_output, Matrix<T>(1, 1, T(1)));
}

// ---------------------------------------------------------------------------
// Primitives

namespace ad {

namespace detail {
template <class T>
void accumulate(Matrix<T>* g, const Matrix<T>& v) {
  if (!g) return;
  for (std::size_t i = 0; i < v.size(); ++i) g->data()[i] += v.data()[i];
}
template <class T>
void require(bool ok, const char* what) {
  if (!ok) throw Error(ErrorCode::ShapeMismatch, what);
}
}  // namespace detail

template <class T>
Var<T> matmul(Tape<T>& t, const Var<T>& a, const Var<T>& b) {
  detail::require<T>(a.cols() == b.rows(), "matmul: inner dimensions differ");
  return t.apply(
      Op::MatMul, {a, b}, [](const auto& in) { return linalg::matmul(*in[0], *in[1]); },
      [](const auto& in, const auto&, const Matrix<T>& g, auto& gin) {
        if (gin[0]) detail::accumulate(gin[0], linalg::matmul_nt(g, *in[1]));
        if (gin[1]) detail::accumulate(gin[1], linalg::matmul_tn(*in[0], g));
      });
}

// a^T b
template <class T>
Var<T> matmul_tn(Tape<T>& t, const Var<T>& a, const Var<T>& b) {
  detail::require<T>(a.rows() == b.rows(), "matmul_tn: row counts differ");
  return t.apply(
      Op::MatMulTN, {a, b}, [](const auto& in) { return linalg::matmul_tn(*in[0], *in[1]); },
      [](const auto& in, const auto&, const Matrix<T>& g, auto& gin) {
        if (gin[0]) detail::accumulate(gin[0], linalg::matmul_nt(*in[1], g));
        if (gin[1]) detail::accumulate(gin[1], linalg::matmul(*in[0], g));
      });
}

template <class T>
Var<T> transpose(Tape<T>& t, const Var<T>& a) {
  return t.apply(
      Op::Transpose, {a}, [](const auto& in) { return linalg::transpose(*in[0]); },
      [](const auto&, const auto&, const Matrix<T>& g, auto& gin) {
        detail::accumulate(gin[0], linalg::transpose(g));
      });
}

template <class T>
Var<T> add(Tape<T>& t, const Var<T>& a, const Var<T>& b) {
  detail::require<T>(a.value().same_shape(b.value()), "add: shapes differ");
  return t.apply(
      Op::Add, {a, b},
      [](const auto& in) {
        Matrix<T> o = *in[0];
        for (std::size_t i = 0; i < o.size(); ++i) o.data()[i] += in[1]->data()[i];
        return o;
      },
      [](const auto&, const auto&, const Matrix<T>& g, auto& gin) {
        detail::accumulate(gin[0], g);
        detail::accumulate(gin[1], g);
      });
}

template <class T>
Var<T> sub(Tape<T>& t, const Var<T>& a, const Var<T>& b) {
  detail::require<T>(a.value().same_shape(b.value()), "sub: shapes differ");
  return t.apply(
      Op::Sub, {a, b},
      [](const auto& in) {
        Matrix<T> o = *in[0];
        for (std::size_t i = 0; i < o.size(); ++i) o.data()[i] -= in[1]->data()[i];
        return o;
      },
      [](const auto&, const auto&, const Matrix<T>& g, auto& gin) {
        detail::accumulate(gin[0], g);
        if (gin[1])
          for (std::size_t i = 0; i < g.size(); ++i) gin[1]->data()[i] -= g.data()[i];
      });
}

template <class T>
Var<T> scale(Tape<T>& t, const Var<T>& a, T s) {
  return t.apply(
      Op::Scale, {a},
      [s](const auto& in) {
        Matrix<T> o = *in[0];
        for (T& v : o.data()) v *= s;
        return o;
      },
      [s](const auto&, const auto&, const Matrix<T>& g, auto& gin) {
        if (gin[0])
          for (std::size_t i = 0; i < g.size(); ++i) gin[0]->data()[i] += s * g.data()[i];
      });
}

template <class T>
Var<T> add_scalar(Tape<T>& t, const Var<T>& a, T s) {
  return t.apply(
      Op::AddScalar, {a},
      [s](const auto& in) {
        Matrix<T> o = *in[0];
        for (T& v : o.data()) v += s;
        return o;
      },
      [](const auto&, const auto&, const Matrix<T>& g, auto& gin) { detail::accumulate(gin[0], g); });
}

template <class T>
Var<T> hadamard(Tape<T>& t, const Var<T>& a, const Var<T>& b) {
  detail::require<T>(a.value().same_shape(b.value()), "hadamard: shapes differ");
  return t.apply(
      Op::Hadamard, {a, b},
      [](const auto& in) {
        Matrix<T> o = *in[0];
        for (std::size_t i = 0; i < o.size(); ++i) o.data()[i] *= in[1]->data()[i];
        return o;
      },
      [](const auto& in, const auto&, const Matrix<T>& g, auto& gin) {
        for (std::size_t i = 0; i < g.size(); ++i) {
          if (gin[0]) gin[0]->data()[i] += g.data()[i] * in[1]->data()[i];
          if (gin[1]) gin[1]->data()[i] += g.data()[i] * in[0]->data()[i];
        }
      });
}

// a (n x k) + b (1 x k) on every row
template <class T>
Var<T> add_row_broadcast(Tape<T>& t, const Var<T>& a, const Var<T>& b) {
  detail::require<T>(b.rows() == 1 && b.cols() == a.cols(), "add_row_broadcast: bias must be 1 x cols");
  return t.apply(
      Op::AddRowBroadcast, {a, b},
      [](const auto& in) {
        Matrix<T> o = *in[0];
        for (std::size_t i = 0; i < o.rows(); ++i)
          for (std::size_t j = 0; j < o.cols(); ++j) o(i, j) += (*in[1])(0, j);
        return o;
      },
      [](const auto&, const auto&, const Matrix<T>& g, auto& gin) {
        detail::accumulate(gin[0], g);
        if (gin[1])
          for (std::size_t i = 0; i < g.rows(); ++i)
            for (std::size_t j = 0; j < g.cols(); ++j) (*gin[1])(0, j) += g(i, j);
      });
}

// a (n x k) + b (n x 1) on every column
template <class T>
Var<T> add_col_broadcast(Tape<T>& t, const Var<T>& a, const Var<T>& b) {
  detail::require<T>(b.cols() == 1 && b.rows() == a.rows(), "add_col_broadcast: bias must be rows x 1");
  return t.apply(
      Op::AddColBroadcast, {a, b},
      [](const auto& in) {
        Matrix<T> o = *in[0];
        for (std::size_t i = 0; i < o.rows(); ++i)
          for (std::size_t j = 0; j < o.cols(); ++j) o(i, j) += (*in[1])(i, 0);
        return o;
      },
      [](const auto&, const auto&, const Matrix<T>& g, auto& gin) {
        detail::accumulate(gin[0], g);
        if (gin[1])
          for (std::size_t i = 0; i < g.rows(); ++i)
            for (std::size_t j = 0; j < g.cols(); ++j) (*gin[1])(i, 0) += g(i, j);
      });
}

// Subgradient at exactly 0 is 0.
template <class T>
Var<T> relu(Tape<T>& t, const Var<T>& a) {
  t.note_relu_inputs(a.value());
  return t.apply(
      Op::ReLU, {a}, [](const auto& in) { return linalg::relu(*in[0]); },
      [](const auto& in, const auto&, const Matrix<T>& g, auto& gin) {
        if (gin[0])
          for (std::size_t i = 0; i < g.size(); ++i)
            if (in[0]->data()[i] > T(0)) gin[0]->data()[i] += g.data()[i];
      });
}

template <class T>
Var<T> sigmoid(Tape<T>& t, const Var<T>& a) {
  return t.apply(
      Op::Sigmoid, {a},
      [](const auto& in) {
        Matrix<T> o = *in[0];
        for (T& v : o.data()) v = T(1) / (T(1) + std::exp(-v));
        return o;
      },
      [](const auto&, const Matrix<T>& out, const Matrix<T>& g, auto& gin) {
        if (gin[0])
          for (std::size_t i = 0; i < g.size(); ++i) {
            const T y = out.data()[i];
            gin[0]->data()[i] += g.data()[i] * y * (T(1) - y);
          }
      });
}

template <class T>
Var<T> l2_normalize_rows(Tape<T>& t, const Var<T>& a) {
  return t.apply(
      Op::L2NormalizeRows, {a}, [](const auto& in) { return linalg::l2_normalize_rows(*in[0]); },
      [](const auto& in, const Matrix<T>& out, const Matrix<T>& g, auto& gin) {
        if (!gin[0]) return;
        const Matrix<T>& x = *in[0];
        for (std::size_t i = 0; i < x.rows(); ++i) {
          T s = 0;
          for (T v : x.row(i)) s += v * v;
          if (s == T(0)) continue;
          const T n = std::sqrt(s);
          T dot = 0;
          for (std::size_t j = 0; j < x.cols(); ++j) dot += out(i, j) * g(i, j);
          for (std::size_t j = 0; j < x.cols(); ++j) (*gin[0])(i, j) += (g(i, j) - out(i, j) * dot) / n;
        }
      });
}

// n x k -> k x 1
template <class T>
Var<T> col_sums(Tape<T>& t, const Var<T>& a) {
  return t.apply(
      Op::ColSums, {a}, [](const auto& in) { return linalg::col_sums(*in[0]); },
      [](const auto&, const auto&, const Matrix<T>& g, auto& gin) {
        if (!gin[0]) return;
        for (std::size_t i = 0; i < gin[0]->rows(); ++i)
          for (std::size_t j = 0; j < gin[0]->cols(); ++j) (*gin[0])(i, j) += g(j, 0);
      });
}

// x (n x k) with row i divided by d(i, 0)
template <class T>
Var<T> div_rows(Tape<T>& t, const Var<T>& x, const Var<T>& d) {
  detail::require<T>(d.cols() == 1 && d.rows() == x.rows(), "div_rows: divisor must be rows x 1");
  return t.apply(
      Op::DivRows, {x, d},
      [](const auto& in) {
        Matrix<T> o = *in[0];
        for (std::size_t i = 0; i < o.rows(); ++i)
          for (T& v : o.row(i)) v /= (*in[1])(i, 0);
        return o;
      },
      [](const auto& in, const auto&, const Matrix<T>& g, auto& gin) {
        const Matrix<T>& x = *in[0];
        const Matrix<T>& d = *in[1];
        for (std::size_t i = 0; i < x.rows(); ++i) {
          const T di = d(i, 0);
          T acc = 0;
          for (std::size_t j = 0; j < x.cols(); ++j) {
            if (gin[0]) (*gin[0])(i, j) += g(i, j) / di;
            acc += g(i, j) * x(i, j);
          }
          if (gin[1]) (*gin[1])(i, 0) -= acc / (di * di);
        }
      });
}

template <class T>
Var<T> pairwise_sqdist(Tape<T>& t, const Var<T>& x, const Var<T>& c) {
  return t.apply(
      Op::PairwiseSqDist, {x, c}, [](const auto& in) { return linalg::pairwise_sqdist(*in[0], *in[1]); },
      [](const auto& in, const auto&, const Matrix<T>& g, auto& gin) {
        const Matrix<T>& x = *in[0];
        const Matrix<T>& c = *in[1];
        for (std::size_t i = 0; i < x.rows(); ++i)
          for (std::size_t j = 0; j < c.rows(); ++j) {
            const T gij = g(i, j);
            if (gij == T(0)) continue;
            for (std::size_t k = 0; k < x.cols(); ++k) {
              const T d = T(2) * gij * (x(i, k) - c(j, k));
              if (gin[0]) (*gin[0])(i, k) += d;
              if (gin[1]) (*gin[1])(j, k) -= d;
            }
          }
      });
}

template <class T>
Var<T> col_softmax(Tape<T>& t, const Var<T>& s) {
  return t.apply(
      Op::ColSoftmax, {s}, [](const auto& in) { return linalg::col_softmax(*in[0]); },
      [](const auto&, const Matrix<T>& p, const Matrix<T>& g, auto& gin) {
        if (!gin[0]) return;
        for (std::size_t j = 0; j < p.cols(); ++j) {
          T dot = 0;
          for (std::size_t i = 0; i < p.rows(); ++i) dot += p(i, j) * g(i, j);
          for (std::size_t i = 0; i < p.rows(); ++i) (*gin[0])(i, j) += p(i, j) * (g(i, j) - dot);
        }
      });
}

template <class T>
Var<T> row_softmax(Tape<T>& t, const Var<T>& s) {
  return t.apply(
      Op::RowSoftmax, {s}, [](const auto& in) { return linalg::row_softmax(*in[0]); },
      [](const auto&, const Matrix<T>& p, const Matrix<T>& g, auto& gin) {
        if (!gin[0]) return;
        for (std::size_t i = 0; i < p.rows(); ++i) {
          T dot = 0;
          for (std::size_t j = 0; j < p.cols(); ++j) dot += p(i, j) * g(i, j);
          for (std::size_t j = 0; j < p.cols(); ++j) (*gin[0])(i, j) += p(i, j) * (g(i, j) - dot);
        }
      });
}

template <class T>
Var<T> gather_rows(Tape<T>& t, const Var<T>& x, std::vector<std::size_t> idx) {
  for (auto i : idx)
    if (i >= x.rows()) throw Error(ErrorCode::ShapeMismatch, "gather_rows: index out of range");
  return t.apply(
      Op::GatherRows, {x},
      [idx](const auto& in) {
        Matrix<T> o(idx.size(), in[0]->cols());
        for (std::size_t r = 0; r < idx.size(); ++r)
          std::copy(in[0]->row(idx[r]).begin(), in[0]->row(idx[r]).end(), o.row(r).begin());
        return o;
      },
      [idx](const auto&, const auto&, const Matrix<T>& g, auto& gin) {
        if (!gin[0]) return;
        for (std::size_t r = 0; r < idx.size(); ++r)
          for (std::size_t k = 0; k < g.cols(); ++k) (*gin[0])(idx[r], k) += g(r, k);
      });
}

// n x k -> 1 x k
template <class T>
Var<T> mean_rows(Tape<T>& t, const Var<T>& x) {
  return t.apply(
      Op::MeanRows, {x}, [](const auto& in) { return linalg::mean_rows(*in[0]); },
      [](const auto& in, const auto&, const Matrix<T>& g, auto& gin) {
        if (!gin[0]) return;
        const T inv = T(1) / static_cast<T>(in[0]->rows());
        for (std::size_t i = 0; i < in[0]->rows(); ++i)
          for (std::size_t k = 0; k < in[0]->cols(); ++k) (*gin[0])(i, k) += g(0, k) * inv;
      });
}

// n x k -> n x 1
template <class T>
Var<T> mean_cols(Tape<T>& t, const Var<T>& x) {
  return t.apply(
      Op::MeanCols, {x},
      [](const auto& in) {
        Matrix<T> o = linalg::row_sums(*in[0]);
        for (T& v : o.data()) v /= static_cast<T>(in[0]->cols());
        return o;
      },
      [](const auto& in, const auto&, const Matrix<T>& g, auto& gin) {
        if (!gin[0]) return;
        const T inv = T(1) / static_cast<T>(in[0]->cols());
        for (std::size_t i = 0; i < in[0]->rows(); ++i)
          for (std::size_t k = 0; k < in[0]->cols(); ++k) (*gin[0])(i, k) += g(i, 0) * inv;
      });
}

// (M + M^T) / 2 with a zero diagonal
template <class T>
Var<T> symmetrize_off_diag(Tape<T>& t, const Var<T>& m) {
  detail::require<T>(m.rows() == m.cols(), "symmetrize_off_diag: matrix must be square");
  return t.apply(
      Op::SymmetrizeOffDiag, {m},
      [](const auto& in) {
        const Matrix<T>& a = *in[0];
        Matrix<T> o(a.rows(), a.cols());
        for (std::size_t i = 0; i < a.rows(); ++i)
          for (std::size_t j = 0; j < a.cols(); ++j)
            if (i != j) o(i, j) = (a(i, j) + a(j, i)) / T(2);
        return o;
      },
      [](const auto&, const auto&, const Matrix<T>& g, auto& gin) {
        if (!gin[0]) return;
        for (std::size_t i = 0; i < g.rows(); ++i)
          for (std::size_t j = 0; j < g.cols(); ++j)
            if (i != j) (*gin[0])(i, j) += (g(i, j) + g(j, i)) / T(2);
      });
}

template <class T>
Var<T> concat_rows(Tape<T>& t, const std::vector<Var<T>>& parts) {
  if (parts.empty()) throw Error(ErrorCode::ShapeMismatch, "concat_rows: nothing to concatenate");
  for (const auto& p : parts) detail::require<T>(p.cols() == parts[0].cols(), "concat_rows: widths differ");
  return t.apply(
      Op::ConcatRows, parts,
      [](const auto& in) {
        std::size_t rows = 0;
        for (auto* m : in) rows += m->rows();
        Matrix<T> o(rows, in[0]->cols());
        std::size_t r = 0;
        for (auto* m : in) {
          std::copy(m->data().begin(), m->data().end(), o.data().begin() + static_cast<std::ptrdiff_t>(r * o.cols()));
          r += m->rows();
        }
        return o;
      },
      [](const auto& in, const auto&, const Matrix<T>& g, auto& gin) {
        std::size_t r = 0;
        for (std::size_t k = 0; k < in.size(); ++k) {
          if (gin[k])
            for (std::size_t i = 0; i < in[k]->size(); ++i) gin[k]->data()[i] += g.data()[r * g.cols() + i];
          r += in[k]->rows();
        }
      });
}

// rows (N x C) -> C x (h*w), pixel p receives row labels[p]
template <class T>
Var<T> scatter_to_pixels(Tape<T>& t, const Var<T>& rows, const LabelGrid& grid) {
  for (auto l : grid.labels)
    if (l < 0 || static_cast<std::size_t>(l) >= rows.rows())
      throw Error(ErrorCode::ShapeMismatch, "scatter_to_pixels: label outside row range");
  auto labels = std::make_shared<const std::vector<std::int32_t>>(grid.labels);
  return t.apply(
      Op::ScatterToPixels, {rows},
      [labels](const auto& in) {
        const Matrix<T>& u = *in[0];
        Matrix<T> o(u.cols(), labels->size());
        for (std::size_t p = 0; p < labels->size(); ++p)
          for (std::size_t c = 0; c < u.cols(); ++c) o(c, p) = u(static_cast<std::size_t>((*labels)[p]), c);
        return o;
      },
      [labels](const auto&, const auto&, const Matrix<T>& g, auto& gin) {
        if (!gin[0]) return;
        for (std::size_t p = 0; p < labels->size(); ++p)
          for (std::size_t c = 0; c < g.rows(); ++c) (*gin[0])(static_cast<std::size_t>((*labels)[p]), c) += g(c, p);
      });
}

namespace detail {
struct BilinearTap {
  std::size_t src;
  double weight;
};

// Per destination pixel, the (up to) four source taps of a half-pixel resize.
inline std::vector<std::array<BilinearTap, 4>> bilinear_taps(std::size_t h, std::size_t w, std::size_t oh,
                                                             std::size_t ow) {
  std::vector<std::array<BilinearTap, 4>> taps(oh * ow);
  for (std::size_t y = 0; y < oh; ++y) {
    std::size_t y0, y1;
    double fy;
    linalg::bilinear_source(y, oh, h, y0, y1, fy);
    for (std::size_t x = 0; x < ow; ++x) {
      std::size_t x0, x1;
      double fx;
      linalg::bilinear_source(x, ow, w, x0, x1, fx);
      taps[y * ow + x] = {BilinearTap{y0 * w + x0, (1 - fy) * (1 - fx)}, BilinearTap{y0 * w + x1, (1 - fy) * fx},
                          BilinearTap{y1 * w + x0, fy * (1 - fx)}, BilinearTap{y1 * w + x1, fy * fx}};
    }
  }
  return taps;
}
}  // namespace detail

// C x (h*w) -> C x (oh*ow)
template <class T>
Var<T> resize_bilinear(Tape<T>& t, const Var<T>& x, std::size_t h, std::size_t w, std::size_t oh, std::size_t ow) {
  detail::require<T>(x.cols() == h * w, "resize_bilinear: input is not C x h*w");
  auto taps = std::make_shared<const std::vector<std::array<detail::BilinearTap, 4>>>(detail::bilinear_taps(h, w, oh, ow));
  return t.apply(
      Op::ResizeBilinear, {x},
      [taps](const auto& in) {
        const Matrix<T>& a = *in[0];
        Matrix<T> o(a.rows(), taps->size());
        for (std::size_t c = 0; c < a.rows(); ++c)
          for (std::size_t p = 0; p < taps->size(); ++p) {
            T s = 0;
            for (const auto& tap : (*taps)[p]) s += static_cast<T>(tap.weight) * a(c, tap.src);
            o(c, p) = s;
          }
        return o;
      },
      [taps](const auto&, const auto&, const Matrix<T>& g, auto& gin) {
        if (!gin[0]) return;
        for (std::size_t c = 0; c < g.rows(); ++c)
          for (std::size_t p = 0; p < taps->size(); ++p)
            for (const auto& tap : (*taps)[p]) (*gin[0])(c, tap.src) += static_cast<T>(tap.weight) * g(c, p);
      });
}

// logits K x P, one target per column (-1 = ignored). Mean over kept columns -> 1 x 1.
template <class T>
Var<T> softmax_cross_entropy(Tape<T>& t, const Var<T>& logits, std::vector<std::int32_t> targets) {
  detail::require<T>(targets.size() == logits.cols(), "softmax_cross_entropy: one target per column");
  std::size_t kept = 0;
  for (auto y : targets) {
    if (y < -1 || y >= static_cast<std::int32_t>(logits.rows()))
      throw Error(ErrorCode::ShapeMismatch, "softmax_cross_entropy: target outside class range");
    if (y >= 0) ++kept;
  }
  if (kept == 0) throw Error(ErrorCode::AllPixelsIgnored, "every target is ignored");
  auto tg = std::make_shared<const std::vector<std::int32_t>>(std::move(targets));
  auto softmax_col = [](const Matrix<T>& z, std::size_t p, std::vector<T>& prob) {
    T mx = -std::numeric_limits<T>::infinity();
    for (std::size_t k = 0; k < z.rows(); ++k) mx = std::max(mx, z(k, p));
    T s = 0;
    for (std::size_t k = 0; k < z.rows(); ++k) {
      prob[k] = std::exp(z(k, p) - mx);
      s += prob[k];
    }
    for (auto& v : prob) v /= s;
    return mx + std::log(s);  // log-sum-exp
  };
  return t.apply(
      Op::SoftmaxCrossEntropy, {logits},
      [tg, kept, softmax_col](const auto& in) {
        const Matrix<T>& z = *in[0];
        std::vector<T> prob(z.rows());
        T loss = 0;
        for (std::size_t p = 0; p < z.cols(); ++p) {
          const auto y = (*tg)[p];
          if (y < 0) continue;
          loss += softmax_col(z, p, prob) - z(static_cast<std::size_t>(y), p);
        }
        return Matrix<T>(1, 1, loss / static_cast<T>(kept));
      },
      [tg, kept, softmax_col](const auto& in, const auto&, const Matrix<T>& g, auto& gin) {
        if (!gin[0]) return;
        const Matrix<T>& z = *in[0];
        std::vector<T> prob(z.rows());
        const T s = g(0, 0) / static_cast<T>(kept);
        for (std::size_t p = 0; p < z.cols(); ++p) {
          const auto y = (*tg)[p];
          if (y < 0) continue;
          softmax_col(z, p, prob);
          for (std::size_t k = 0; k < z.rows(); ++k)
            (*gin[0])(k, p) += s * (prob[k] - (static_cast<std::int32_t>(k) == y ? T(1) : T(0)));
        }
      });
}

template <class T>
Var<T> stop_gradient(Tape<T>& t, const Var<T>& x) {
  return t.apply(
      Op::StopGradient, {x}, [](const auto& in) { return *in[0]; },
      [](const auto&, const auto&, const auto&, auto&) {});
}

}  // namespace ad

// ---------------------------------------------------------------------------
// Finite-difference oracle

/// Max relative error between `analytic` and central differences of `f`
/// over every entry of every parameter in `params`.
template <class F>
double finite_diff_check(F&& f, const ParamSet<double>& params, const GradientSet<double>& analytic, double eps) {
  if (!(eps > 0)) throw Error(ErrorCode::InvalidConfig, "eps must be positive");
  const double base1 = f(params);
  const double base2 = f(params);
  if (base1 != base2) throw Error(ErrorCode::NonDeterministicFunction, "baseline evaluations disagree");
  ParamSet<double> work = params;
  double worst = 0;
  for (auto& [name, m] : work) {
    const auto it = analytic.find(name);
    for (std::size_t i = 0; i < m.size(); ++i) {
      const double orig = m.data()[i];
      m.data()[i] = orig + eps;
      const double up = f(work);
      m.data()[i] = orig - eps;
      const double down = f(work);
      m.data()[i] = orig;
      const double numeric = (up - down) / (2 * eps);
      const double a = it == analytic.end() ? 0.0 : it->second.data()[i];
      const double rel = std::abs(a - numeric) / std::max({std::abs(a), std::abs(numeric), 1e-8});
      worst = std::max(worst, rel);
    }
  }
  return worst;
}

}  // namespace dgm
