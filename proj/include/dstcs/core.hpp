#pragma once

#include <algorithm>
#include <cmath>
#include <concepts>
#include <cstddef>
#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

namespace dstcs {

/// Background, pubic-symphysis-like structure (PS), fetal-head-like structure (FH).
inline constexpr int kNumClasses = 3;
inline constexpr std::uint8_t kBackground = 0;
inline constexpr std::uint8_t kPS = 1;
inline constexpr std::uint8_t kFH = 2;

class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class ShapeError : public Error {
 public:
  using Error::Error;
};

class ConfigError : public Error {
 public:
  using Error::Error;
};

/// Dense row-major 2D raster.
template <typename T>
class Grid {
 public:
  using value_type = T;

  Grid() = default;
  Grid(int rows, int cols, T fill = T{})
      : rows_(rows), cols_(cols), data_(static_cast<std::size_t>(rows) * cols, fill) {
    if (rows < 0 || cols < 0) throw ShapeError("grid dimensions must be non-negative");
  }

  int rows() const noexcept { return rows_; }
  int cols() const noexcept { return cols_; }
  std::size_t size() const noexcept { return data_.size(); }
  bool empty() const noexcept { return data_.empty(); }

  T& operator()(int r, int c) noexcept { return data_[static_cast<std::size_t>(r) * cols_ + c]; }
  const T& operator()(int r, int c) const noexcept {
    return data_[static_cast<std::size_t>(r) * cols_ + c];
  }
  T& operator[](std::size_t i) noexcept { return data_[i]; }
  const T& operator[](std::size_t i) const noexcept { return data_[i]; }

  T* data() noexcept { return data_.data(); }
  const T* data() const noexcept { return data_.data(); }
  std::vector<T>& values() noexcept { return data_; }
  const std::vector<T>& values() const noexcept { return data_; }

  bool same_shape(const auto& other) const noexcept {
    return rows_ == other.rows() && cols_ == other.cols();
  }

  friend bool operator==(const Grid&, const Grid&) = default;

 private:
  int rows_ = 0;
  int cols_ = 0;
  std::vector<T> data_;
};

using Image = Grid<float>;
using LabelMask = Grid<std::uint8_t>;

struct MaskPair {
  Image image;
  LabelMask mask;
};

/// Per-pixel class distribution, stored pixel-major (H x W x C).
template <std::floating_point T>
class ProbabilityMap {
 public:
  using value_type = T;

  ProbabilityMap() = default;
  ProbabilityMap(int rows, int cols, int classes = kNumClasses, T fill = T{})
      : rows_(rows), cols_(cols), classes_(classes),
        data_(static_cast<std::size_t>(rows) * cols * classes, fill) {
    if (rows < 0 || cols < 0 || classes <= 0) throw ShapeError("invalid probability map shape");
  }

  int rows() const noexcept { return rows_; }
  int cols() const noexcept { return cols_; }
  int classes() const noexcept { return classes_; }
  std::size_t pixels() const noexcept { return static_cast<std::size_t>(rows_) * cols_; }
  std::size_t size() const noexcept { return data_.size(); }

  T& operator()(int r, int c, int k) noexcept {
    return data_[(static_cast<std::size_t>(r) * cols_ + c) * classes_ + k];
  }
  const T& operator()(int r, int c, int k) const noexcept {
    return data_[(static_cast<std::size_t>(r) * cols_ + c) * classes_ + k];
  }
  /// Pixel-linear access: pixel index p in [0, rows*cols).
  T& at(std::size_t p, int k) noexcept { return data_[p * classes_ + k]; }
  const T& at(std::size_t p, int k) const noexcept { return data_[p * classes_ + k]; }

  T& operator[](std::size_t i) noexcept { return data_[i]; }
  const T& operator[](std::size_t i) const noexcept { return data_[i]; }
  std::vector<T>& values() noexcept { return data_; }
  const std::vector<T>& values() const noexcept { return data_; }

  template <typename U>
  bool same_shape(const ProbabilityMap<U>& o) const noexcept {
    return rows_ == o.rows() && cols_ == o.cols() && classes_ == o.classes();
  }

  friend bool operator==(const ProbabilityMap&, const ProbabilityMap&) = default;

 private:
  int rows_ = 0;
  int cols_ = 0;
  int classes_ = 0;
  std::vector<T> data_;
};

template <typename A, typename B>
void require_same_shape(const A& a, const B& b, const char* what) {
  if (a.rows() != b.rows() || a.cols() != b.cols())
    throw ShapeError(std::string(what) + ": shape mismatch (" + std::to_string(a.rows()) + "x" +
                     std::to_string(a.cols()) + " vs " + std::to_string(b.rows()) + "x" +
                     std::to_string(b.cols()) + ")");
}

template <std::floating_point T, std::floating_point U>
void require_same_shape(const ProbabilityMap<T>& a, const ProbabilityMap<U>& b, const char* what) {
  if (!a.same_shape(b)) throw ShapeError(std::string(what) + ": probability map shape mismatch");
}

/// Lowest class index wins ties.
template <std::floating_point T>
LabelMask argmax(const ProbabilityMap<T>& p) {
  LabelMask out(p.rows(), p.cols());
  const int nc = p.classes();
  for (std::size_t i = 0; i < p.pixels(); ++i) {
    int best = 0;
    for (int k = 1; k < nc; ++k)
      if (p.at(i, k) > p.at(i, best)) best = k;
    out[i] = static_cast<std::uint8_t>(best);
  }
  return out;
}

template <std::floating_point T = double>
ProbabilityMap<T> one_hot(const LabelMask& mask, int classes = kNumClasses) {
  ProbabilityMap<T> out(mask.rows(), mask.cols(), classes);
  for (std::size_t i = 0; i < mask.size(); ++i) {
    if (mask[i] >= classes) throw Error("label " + std::to_string(mask[i]) + " out of range");
    out.at(i, mask[i]) = T(1);
  }
  return out;
}

/// Per-pixel softmax of a logit map (same layout as ProbabilityMap).
template <std::floating_point T>
ProbabilityMap<T> softmax(const ProbabilityMap<T>& logits) {
  ProbabilityMap<T> out(logits.rows(), logits.cols(), logits.classes());
  const int nc = logits.classes();
  for (std::size_t i = 0; i < logits.pixels(); ++i) {
    T mx = logits.at(i, 0);
    for (int k = 1; k < nc; ++k) mx = std::max(mx, logits.at(i, k));
    T sum = 0;
    for (int k = 0; k < nc; ++k) sum += (out.at(i, k) = std::exp(logits.at(i, k) - mx));
    for (int k = 0; k < nc; ++k) out.at(i, k) /= sum;
  }
  return out;
}

/// Chain rule through softmax: dL/dz_k = p_k (dL/dp_k - sum_j p_j dL/dp_j).
template <std::floating_point T>
ProbabilityMap<T> softmax_backward(const ProbabilityMap<T>& probs, const ProbabilityMap<T>& grad_probs) {
  require_same_shape(probs, grad_probs, "softmax_backward");
  ProbabilityMap<T> out(probs.rows(), probs.cols(), probs.classes());
  const int nc = probs.classes();
  for (std::size_t i = 0; i < probs.pixels(); ++i) {
    T dot = 0;
    for (int k = 0; k < nc; ++k) dot += probs.at(i, k) * grad_probs.at(i, k);
    for (int k = 0; k < nc; ++k) out.at(i, k) = probs.at(i, k) * (grad_probs.at(i, k) - dot);
  }
  return out;
}

template <std::floating_point T>
bool is_distribution(const ProbabilityMap<T>& p, T tol = T(1e-5)) {
  for (std::size_t i = 0; i < p.pixels(); ++i) {
    T sum = 0;
    for (int k = 0; k < p.classes(); ++k) {
      const T v = p.at(i, k);
      if (!(v >= T(0) && v <= T(1))) return false;
      sum += v;
    }
    if (std::abs(sum - T(1)) > tol) return false;
  }
  return true;
}

template <std::floating_point To, std::floating_point From>
ProbabilityMap<To> cast(const ProbabilityMap<From>& p) {
  ProbabilityMap<To> out(p.rows(), p.cols(), p.classes());
  for (std::size_t i = 0; i < p.size(); ++i) out[i] = static_cast<To>(p[i]);
  return out;
}

}  // namespace dstcs
