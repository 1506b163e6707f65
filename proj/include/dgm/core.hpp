#pragma once

#include <algorithm>
#include <cassert>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <initializer_list>
#include <span>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

namespace dgm {

enum class ErrorCode {
  BadMagic,
  UnsupportedVersion,
  LengthMismatch,
  NonFiniteValue,
  NonContiguousLabels,
  NegativeLabel,
  TooManyRegions,
  ZeroTargetSize,
  TargetCountExceedsPixels,
  DimensionMismatch,
  ShapeMismatch,
  EmptyGraph,
  InvalidM,
  LevelCountMismatch,
  IsolatedDestination,
  MissingTopDownState,
  NonDeterministicFunction,
  IndivisibleSize,
  AllPixelsIgnored,
  LevelOutOfRange,
  OutOfBounds,
  InvalidConfig,
  Io,
  Parse,
};

inline const char* to_string(ErrorCode code) {
  switch (code) {
    case ErrorCode::BadMagic: return "BadMagic";
    case ErrorCode::UnsupportedVersion: return "UnsupportedVersion";
    case ErrorCode::LengthMismatch: return "LengthMismatch";
    case ErrorCode::NonFiniteValue: return "NonFiniteValue";
    case ErrorCode::NonContiguousLabels: return "NonContiguousLabels";
    case ErrorCode::NegativeLabel: return "NegativeLabel";
    case ErrorCode::TooManyRegions: return "TooManyRegions";
    case ErrorCode::ZeroTargetSize: return "ZeroTargetSize";
    case ErrorCode::TargetCountExceedsPixels: return "TargetCountExceedsPixels";
    case ErrorCode::DimensionMismatch: return "DimensionMismatch";
    case ErrorCode::ShapeMismatch: return "ShapeMismatch";
    case ErrorCode::EmptyGraph: return "EmptyGraph";
    case ErrorCode::InvalidM: return "InvalidM";
    case ErrorCode::LevelCountMismatch: return "LevelCountMismatch";
    case ErrorCode::IsolatedDestination: return "IsolatedDestination";
    case ErrorCode::MissingTopDownState: return "MissingTopDownState";
    case ErrorCode::NonDeterministicFunction: return "NonDeterministicFunction";
    case ErrorCode::IndivisibleSize: return "IndivisibleSize";
    case ErrorCode::AllPixelsIgnored: return "AllPixelsIgnored";
    case ErrorCode::LevelOutOfRange: return "LevelOutOfRange";
    case ErrorCode::OutOfBounds: return "OutOfBounds";
    case ErrorCode::InvalidConfig: return "InvalidConfig";
    case ErrorCode::Io: return "Io";
    case ErrorCode::Parse: return "Parse";
  }
  return "Unknown";
}

class Error : public std::runtime_error {
 public:
  Error(ErrorCode code, const std::string& what)
      : std::runtime_error(std::string(to_string(code)) + ": " + what), code_(code) {}

  ErrorCode code() const noexcept { return code_; }

 private:
  ErrorCode code_;
};

// Dense row-major matrix. Kernels in linalg.hpp iterate in a fixed order so
// results never depend on blocking or threading.
template <class T>
class Matrix {
 public:
  using value_type = T;

  Matrix() = default;
  Matrix(std::size_t rows, std::size_t cols, T fill = T{})
      : rows_(rows), cols_(cols), data_(rows * cols, fill) {}
  Matrix(std::size_t rows, std::size_t cols, std::vector<T> data)
      : rows_(rows), cols_(cols), data_(std::move(data)) {
    if (data_.size() != rows_ * cols_) {
      throw Error(ErrorCode::ShapeMismatch, "matrix data length does not match shape");
    }
  }
  Matrix(std::initializer_list<std::initializer_list<T>> rows) {
    rows_ = rows.size();
    cols_ = rows_ ? rows.begin()->size() : 0;
    data_.reserve(rows_ * cols_);
    for (const auto& r : rows) {
      if (r.size() != cols_) throw Error(ErrorCode::ShapeMismatch, "ragged initializer");
      data_.insert(data_.end(), r.begin(), r.end());
    }
  }

  static Matrix identity(std::size_t n) {
    Matrix m(n, n);
    for (std::size_t i = 0; i < n; ++i) m(i, i) = T(1);
    return m;
  }

  std::size_t rows() const noexcept { return rows_; }
  std::size_t cols() const noexcept { return cols_; }
  std::size_t size() const noexcept { return data_.size(); }
  bool empty() const noexcept { return data_.empty(); }

  T& operator()(std::size_t r, std::size_t c) { return data_[r * cols_ + c]; }
  const T& operator()(std::size_t r, std::size_t c) const { return data_[r * cols_ + c]; }

  std::span<T> row(std::size_t r) { return {data_.data() + r * cols_, cols_}; }
  std::span<const T> row(std::size_t r) const { return {data_.data() + r * cols_, cols_}; }

  std::vector<T>& data() noexcept { return data_; }
  const std::vector<T>& data() const noexcept { return data_; }

  bool same_shape(const Matrix& o) const noexcept { return rows_ == o.rows_ && cols_ == o.cols_; }

  template <class U>
  Matrix<U> cast() const {
    Matrix<U> out(rows_, cols_);
    for (std::size_t i = 0; i < data_.size(); ++i) out.data()[i] = static_cast<U>(data_[i]);
    return out;
  }

  friend bool operator==(const Matrix& a, const Matrix& b) {
    return a.rows_ == b.rows_ && a.cols_ == b.cols_ && a.data_ == b.data_;
  }

 private:
  std::size_t rows_ = 0;
  std::size_t cols_ = 0;
  std::vector<T> data_;
};

// Channel-major grid feature map: data is C x (H*W).
template <class T>
struct FeatureMap {
  std::size_t channels = 0;
  std::size_t height = 0;
  std::size_t width = 0;
  Matrix<T> data;

  FeatureMap() = default;
  FeatureMap(std::size_t c, std::size_t h, std::size_t w)
      : channels(c), height(h), width(w), data(c, h * w) {}
  FeatureMap(std::size_t c, std::size_t h, std::size_t w, Matrix<T> d)
      : channels(c), height(h), width(w), data(std::move(d)) {
    if (data.rows() != c || data.cols() != h * w) {
      throw Error(ErrorCode::ShapeMismatch, "feature map data does not match C x H*W");
    }
  }

  T& at(std::size_t c, std::size_t y, std::size_t x) { return data(c, y * width + x); }
  const T& at(std::size_t c, std::size_t y, std::size_t x) const { return data(c, y * width + x); }

  friend bool operator==(const FeatureMap&, const FeatureMap&) = default;
};

// Integer grid (label maps at arbitrary resolution). Unlike SuperpixelMap,
// labels here may leave some regions without pixels.
struct LabelGrid {
  std::size_t height = 0;
  std::size_t width = 0;
  std::vector<std::int32_t> labels;

  std::int32_t at(std::size_t y, std::size_t x) const { return labels[y * width + x]; }
  friend bool operator==(const LabelGrid&, const LabelGrid&) = default;
};

inline std::size_t ceil_half(std::size_t n) { return (n + 1) / 2; }

}  // namespace dgm
