#pragma once

#include <Eigen/Core>

#include <algorithm>
#include <cstddef>
#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "dstcs/core.hpp"

namespace dstcs::nn {

using RowMat = Eigen::Matrix<float, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MatMap = Eigen::Map<RowMat>;
using ConstMatMap = Eigen::Map<const RowMat>;

/// Dense NCHW float tensor. Token sequences use the shape [N, 1, L, D].
class Tensor {
 public:
  Tensor() = default;
  Tensor(int n, int c, int h, int w, float fill = 0.0f)
      : n_(n), c_(c), h_(h), w_(w), data_(static_cast<std::size_t>(n) * c * h * w, fill) {}

  int n() const noexcept { return n_; }
  int c() const noexcept { return c_; }
  int h() const noexcept { return h_; }
  int w() const noexcept { return w_; }
  std::size_t size() const noexcept { return data_.size(); }
  std::size_t sample_size() const noexcept { return static_cast<std::size_t>(c_) * h_ * w_; }
  std::size_t plane_size() const noexcept { return static_cast<std::size_t>(h_) * w_; }

  float* data() noexcept { return data_.data(); }
  const float* data() const noexcept { return data_.data(); }
  float* sample(int i) noexcept { return data_.data() + i * sample_size(); }
  const float* sample(int i) const noexcept { return data_.data() + i * sample_size(); }
  float& operator[](std::size_t i) noexcept { return data_[i]; }
  float operator[](std::size_t i) const noexcept { return data_[i]; }
  float& at(int n, int c, int h, int w) noexcept {
    return data_[((static_cast<std::size_t>(n) * c_ + c) * h_ + h) * w_ + w];
  }
  float at(int n, int c, int h, int w) const noexcept {
    return data_[((static_cast<std::size_t>(n) * c_ + c) * h_ + h) * w_ + w];
  }
  std::vector<float>& values() noexcept { return data_; }
  const std::vector<float>& values() const noexcept { return data_; }

  bool same_shape(const Tensor& o) const noexcept { return n_ == o.n_ && c_ == o.c_ && h_ == o.h_ && w_ == o.w_; }
  std::string shape_string() const {
    return "[" + std::to_string(n_) + "," + std::to_string(c_) + "," + std::to_string(h_) + "," + std::to_string(w_) + "]";
  }
  void fill(float v) { std::fill(data_.begin(), data_.end(), v); }

  /// Sample i viewed as a rows x cols row-major matrix (rows * cols == sample_size()).
  MatMap matrix(int i, int rows, int cols) { return MatMap(sample(i), rows, cols); }
  ConstMatMap matrix(int i, int rows, int cols) const { return ConstMatMap(sample(i), rows, cols); }

  friend bool operator==(const Tensor&, const Tensor&) = default;

 private:
  int n_ = 0, c_ = 0, h_ = 0, w_ = 0;
  std::vector<float> data_;
};

struct Param {
  std::string name;
  Tensor value;
  Tensor grad;

  Param() = default;
  Param(std::string n, int a, int b, int c, int d) : name(std::move(n)), value(a, b, c, d), grad(a, b, c, d) {}
  void zero_grad() { grad.fill(0.0f); }
};

/// Controls stochastic behaviour of a forward pass.
struct ForwardMode {
  bool dropout = false;
  std::uint64_t seed = 0;  // dropout masks derive from (seed, layer)
};

/// Concatenates along channels.
inline Tensor concat_channels(const Tensor& a, const Tensor& b) {
  if (a.n() != b.n() || a.h() != b.h() || a.w() != b.w())
    throw ShapeError("concat_channels: " + a.shape_string() + " vs " + b.shape_string());
  Tensor out(a.n(), a.c() + b.c(), a.h(), a.w());
  for (int i = 0; i < a.n(); ++i) {
    std::copy(a.sample(i), a.sample(i) + a.sample_size(), out.sample(i));
    std::copy(b.sample(i), b.sample(i) + b.sample_size(), out.sample(i) + a.sample_size());
  }
  return out;
}

/// Splits a channel-concatenated gradient back into its two parts.
inline std::pair<Tensor, Tensor> split_channels(const Tensor& g, int ca) {
  Tensor a(g.n(), ca, g.h(), g.w()), b(g.n(), g.c() - ca, g.h(), g.w());
  for (int i = 0; i < g.n(); ++i) {
    std::copy(g.sample(i), g.sample(i) + a.sample_size(), a.sample(i));
    std::copy(g.sample(i) + a.sample_size(), g.sample(i) + g.sample_size(), b.sample(i));
  }
  return {std::move(a), std::move(b)};
}

inline void add_inplace(Tensor& dst, const Tensor& src) {
  if (!dst.same_shape(src)) throw ShapeError("add_inplace: " + dst.shape_string() + " vs " + src.shape_string());
  for (std::size_t i = 0; i < dst.size(); ++i) dst[i] += src[i];
}

/// [N, D, h, w] feature map -> [N, 1, h*w, D] tokens.
inline Tensor map_to_tokens(const Tensor& m) {
  const int L = m.h() * m.w(), D = m.c();
  Tensor t(m.n(), 1, L, D);
  for (int i = 0; i < m.n(); ++i) t.matrix(i, L, D) = m.matrix(i, D, L).transpose();
  return t;
}

/// [N, 1, h*w, D] tokens -> [N, D, h, w] feature map.
inline Tensor tokens_to_map(const Tensor& t, int h, int w) {
  const int L = t.h(), D = t.w();
  if (L != h * w) throw ShapeError("tokens_to_map: token count does not match spatial size");
  Tensor m(t.n(), D, h, w);
  for (int i = 0; i < t.n(); ++i) m.matrix(i, D, L) = t.matrix(i, L, D).transpose();
  return m;
}

}  // namespace dstcs::nn
