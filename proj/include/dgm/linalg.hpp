#pragma once

#include <limits>

#include "dgm/core.hpp"

// Plain dense kernels shared by the taped and untaped code paths. Every
// reduction runs over its index in ascending order.
namespace dgm::linalg {

namespace detail {
inline void require(bool ok, const char* what) {
  if (!ok) throw Error(ErrorCode::ShapeMismatch, what);
}
}  // namespace detail

// A (n x k) * B (k x m)
template <class T>
Matrix<T> matmul(const Matrix<T>& a, const Matrix<T>& b) {
  detail::require(a.cols() == b.rows(), "matmul: inner dimensions differ");
  Matrix<T> out(a.rows(), b.cols());
  const std::size_t m = b.cols();
  for (std::size_t i = 0; i < a.rows(); ++i) {
    T* o = out.data().data() + i * m;
    for (std::size_t k = 0; k < a.cols(); ++k) {
      const T aik = a(i, k);
      if (aik == T(0)) continue;
      const T* br = b.data().data() + k * m;
      for (std::size_t j = 0; j < m; ++j) o[j] += aik * br[j];
    }
  }
  return out;
}

// A^T (k x n)^T * B (k x m) -> n x m
template <class T>
Matrix<T> matmul_tn(const Matrix<T>& a, const Matrix<T>& b) {
  detail::require(a.rows() == b.rows(), "matmul_tn: row counts differ");
  Matrix<T> out(a.cols(), b.cols());
  const std::size_t m = b.cols();
  for (std::size_t k = 0; k < a.rows(); ++k) {
    const T* br = b.data().data() + k * m;
    for (std::size_t i = 0; i < a.cols(); ++i) {
      const T aki = a(k, i);
      if (aki == T(0)) continue;
      T* o = out.data().data() + i * m;
      for (std::size_t j = 0; j < m; ++j) o[j] += aki * br[j];
    }
  }
  return out;
}

// A (n x k) * B^T (m x k)^T -> n x m
template <class T>
Matrix<T> matmul_nt(const Matrix<T>& a, const Matrix<T>& b) {
  detail::require(a.cols() == b.cols(), "matmul_nt: column counts differ");
  Matrix<T> out(a.rows(), b.rows());
  for (std::size_t i = 0; i < a.rows(); ++i) {
    const auto ar = a.row(i);
    for (std::size_t j = 0; j < b.rows(); ++j) {
      const auto br = b.row(j);
      T s = 0;
      for (std::size_t k = 0; k < ar.size(); ++k) s += ar[k] * br[k];
      out(i, j) = s;
    }
  }
  return out;
}

template <class T>
Matrix<T> transpose(const Matrix<T>& a) {
  Matrix<T> out(a.cols(), a.rows());
  for (std::size_t i = 0; i < a.rows(); ++i)
    for (std::size_t j = 0; j < a.cols(); ++j) out(j, i) = a(i, j);
  return out;
}

// d_ij = ||x_i - c_j||^2
template <class T>
Matrix<T> pairwise_sqdist(const Matrix<T>& x, const Matrix<T>& c) {
  detail::require(x.cols() == c.cols(), "pairwise_sqdist: widths differ");
  Matrix<T> out(x.rows(), c.rows());
  for (std::size_t i = 0; i < x.rows(); ++i) {
    const auto xr = x.row(i);
    for (std::size_t j = 0; j < c.rows(); ++j) {
      const auto cr = c.row(j);
      T s = 0;
      for (std::size_t k = 0; k < xr.size(); ++k) {
        const T d = xr[k] - cr[k];
        s += d * d;
      }
      out(i, j) = s;
    }
  }
  return out;
}

// Softmax down each column with max subtraction. A column whose exponentials
// all underflow gets uniform weights.
template <class T>
Matrix<T> col_softmax(const Matrix<T>& s) {
  Matrix<T> out(s.rows(), s.cols());
  const std::size_t n = s.rows();
  for (std::size_t j = 0; j < s.cols(); ++j) {
    T mx = -std::numeric_limits<T>::infinity();
    for (std::size_t i = 0; i < n; ++i) mx = std::max(mx, s(i, j));
    T z = 0;
    for (std::size_t i = 0; i < n; ++i) {
      out(i, j) = std::exp(s(i, j) - mx);
      z += out(i, j);
    }
    if (!(z > T(0)) || !std::isfinite(z)) {
      for (std::size_t i = 0; i < n; ++i) out(i, j) = T(1) / static_cast<T>(n);
      continue;
    }
    for (std::size_t i = 0; i < n; ++i) out(i, j) /= z;
  }
  return out;
}

template <class T>
Matrix<T> row_softmax(const Matrix<T>& s) {
  Matrix<T> out(s.rows(), s.cols());
  const std::size_t m = s.cols();
  for (std::size_t i = 0; i < s.rows(); ++i) {
    T mx = -std::numeric_limits<T>::infinity();
    for (std::size_t j = 0; j < m; ++j) mx = std::max(mx, s(i, j));
    T z = 0;
    for (std::size_t j = 0; j < m; ++j) {
      out(i, j) = std::exp(s(i, j) - mx);
      z += out(i, j);
    }
    if (!(z > T(0)) || !std::isfinite(z)) {
      for (std::size_t j = 0; j < m; ++j) out(i, j) = T(1) / static_cast<T>(m);
      continue;
    }
    for (std::size_t j = 0; j < m; ++j) out(i, j) /= z;
  }
  return out;
}

// Zero rows stay zero.
template <class T>
Matrix<T> l2_normalize_rows(const Matrix<T>& x) {
  Matrix<T> out = x;
  for (std::size_t i = 0; i < x.rows(); ++i) {
    T s = 0;
    for (T v : x.row(i)) s += v * v;
    if (s == T(0)) continue;
    const T n = std::sqrt(s);
    for (T& v : out.row(i)) v /= n;
  }
  return out;
}

template <class T>
Matrix<T> relu(Matrix<T> x) {
  for (T& v : x.data()) v = v > T(0) ? v : T(0);
  return x;
}

template <class T>
Matrix<T> mean_rows(const Matrix<T>& x) {
  Matrix<T> out(1, x.cols());
  for (std::size_t i = 0; i < x.rows(); ++i)
    for (std::size_t j = 0; j < x.cols(); ++j) out(0, j) += x(i, j);
  for (T& v : out.data()) v /= static_cast<T>(x.rows());
  return out;
}

template <class T>
Matrix<T> col_sums(const Matrix<T>& x) {
  Matrix<T> out(x.cols(), 1);
  for (std::size_t i = 0; i < x.rows(); ++i)
    for (std::size_t j = 0; j < x.cols(); ++j) out(j, 0) += x(i, j);
  return out;
}

template <class T>
Matrix<T> row_sums(const Matrix<T>& x) {
  Matrix<T> out(x.rows(), 1);
  for (std::size_t i = 0; i < x.rows(); ++i)
    for (std::size_t j = 0; j < x.cols(); ++j) out(i, 0) += x(i, j);
  return out;
}

template <class T>
T max_abs_diff(const Matrix<T>& a, const Matrix<T>& b) {
  detail::require(a.same_shape(b), "max_abs_diff: shapes differ");
  T m = 0;
  for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a.data()[i] - b.data()[i]));
  return m;
}

// Source coordinate of a half-pixel-centred resize (corner alignment off).
inline void bilinear_source(std::size_t dst, std::size_t dst_size, std::size_t src_size,
                            std::size_t& i0, std::size_t& i1, double& frac) {
  double s = (static_cast<double>(dst) + 0.5) * static_cast<double>(src_size) /
                 static_cast<double>(dst_size) -
             0.5;
  if (s < 0) s = 0;
  i0 = static_cast<std::size_t>(std::floor(s));
  if (i0 > src_size - 1) i0 = src_size - 1;
  i1 = std::min(i0 + 1, src_size - 1);
  frac = s - static_cast<double>(i0);
  if (i1 == i0) frac = 0;
}

}  // namespace dgm::linalg
