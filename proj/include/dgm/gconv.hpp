#pragma once

#include "dgm/autodiff.hpp"
#include "dgm/config.hpp"

namespace dgm {

template <class T>
struct GConvParams {
  Matrix<T> weight;  // D_in x D_out
  Nonlinearity activation = Nonlinearity::ReluL2Norm;
  bool normalize_incoming = true;
};

/// Quasi-bipartite graph: weighted edges source -> destination plus a
/// self-loop on every destination.
template <class T>
struct BipartiteGraph {
  Matrix<T> sources;       // N_s x D
  Matrix<T> destinations;  // N_d x D
  Matrix<T> weights;       // N_s x N_d, nonnegative
  T self_loop = T(1);
};

/// Weighted-average graph convolution, taped form:
/// h_v = act(W^T-applied (sum_u w(u,v) h_u + s h_v) / (sum_u w(u,v) + s)).
template <class T>
Var<T> gconv(Tape<T>& tape, const Var<T>& src, const Var<T>& dst, const Var<T>& weights, T self_loop,
             const Var<T>& w, Nonlinearity act = Nonlinearity::ReluL2Norm, bool normalize = true) {
  if (weights.rows() != src.rows() || weights.cols() != dst.rows())
    throw Error(ErrorCode::ShapeMismatch, "gconv: weights must be N_src x N_dst");
  if (src.rows() > 0 && src.cols() != dst.cols())
    throw Error(ErrorCode::ShapeMismatch, "gconv: source and destination widths differ");
  if (w.rows() != dst.cols()) throw Error(ErrorCode::ShapeMismatch, "gconv: weight matrix rows != feature width");
  if (self_loop < T(0)) throw Error(ErrorCode::ShapeMismatch, "gconv: negative self-loop weight");
  if (self_loop == T(0)) {
    const Matrix<T> incoming = linalg::col_sums(weights.value());
    for (T v : incoming.data())
      if (v == T(0)) throw Error(ErrorCode::IsolatedDestination, "destination without incoming weight");
  }

  Var<T> agg = ad::matmul_tn(tape, weights, src);
  if (self_loop != T(0)) agg = ad::add(tape, agg, ad::scale(tape, dst, self_loop));
  if (normalize) {
    Var<T> denom = ad::add_scalar(tape, ad::col_sums(tape, weights), self_loop);
    agg = ad::div_rows(tape, agg, denom);
  }
  Var<T> out = ad::matmul(tape, agg, w);
  if (act == Nonlinearity::Sigmoid) return ad::sigmoid(tape, out);
  return ad::l2_normalize_rows(tape, ad::relu(tape, out));
}

template <class T>
Matrix<T> gconv(const BipartiteGraph<T>& g, const GConvParams<T>& p) {
  Tape<T> tape(false);
  return gconv(tape, tape.constant(g.sources), tape.constant(g.destinations), tape.constant(g.weights),
               g.self_loop, tape.constant(p.weight), p.activation, p.normalize_incoming)
      .value();
}

/// Row-normalised Gaussian affinities from fine vertices to coarse vertices.
template <class T>
Var<T> tdmp_edges(Tape<T>& tape, const Var<T>& lo, const Var<T>& hi, double sigma) {
  if (lo.rows() == 0 || hi.rows() == 0) throw Error(ErrorCode::EmptyGraph, "tdmp_edges: empty level");
  if (!(sigma > 0)) throw Error(ErrorCode::InvalidConfig, "sigma must be > 0");
  const T inv = T(-1) / static_cast<T>(sigma * sigma);
  return ad::row_softmax(tape, ad::scale(tape, ad::pairwise_sqdist(tape, lo, hi), inv));
}

template <class T>
Matrix<T> tdmp_edges(const Matrix<T>& lo, const Matrix<T>& hi, double sigma) {
  Tape<T> tape(false);
  return tdmp_edges(tape, tape.constant(lo), tape.constant(hi), sigma).value();
}

}  // namespace dgm
