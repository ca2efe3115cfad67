#pragma once

// Layers with explicit backward passes. Each layer caches what its backward
// pass needs from the most recent forward call, so one instance serves one
// in-flight forward at a time.

#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "dstcs/nn/tensor.hpp"
#include "dstcs/rng.hpp"

namespace dstcs::nn {

inline void init_normal(Tensor& t, double stddev, Rng& rng) {
  for (auto& v : t.values()) v = static_cast<float>(stddev * normal01(rng));
}

/// 2D convolution, stride 1, "same" zero padding, optional dilation.
class Conv2d {
 public:
  Conv2d() = default;
  Conv2d(const std::string& name, int cin, int cout, int kernel, Rng& rng, int dilation = 1)
      : cin_(cin), cout_(cout), k_(kernel), dil_(dilation),
        weight_(name + ".weight", cout, cin, kernel, kernel), bias_(name + ".bias", 1, cout, 1, 1) {
    if (kernel % 2 == 0) throw ConfigError("Conv2d kernel must be odd");
    init_normal(weight_.value, std::sqrt(2.0 / (cin * kernel * kernel)), rng);
  }

  Tensor forward(const Tensor& x) {
    if (x.c() != cin_) throw ShapeError("Conv2d " + weight_.name + ": expected " + std::to_string(cin_) + " channels, got " + x.shape_string());
    input_ = x;
    const int H = x.h(), W = x.w(), HW = H * W, K = cin_ * k_ * k_;
    Tensor y(x.n(), cout_, H, W);
    ConstMatMap wm(weight_.value.data(), cout_, K);
    Eigen::Map<const Eigen::VectorXf> b(bias_.value.data(), cout_);
    for (int i = 0; i < x.n(); ++i) {
      auto out = y.matrix(i, cout_, HW);
      if (pointwise()) out.noalias() = wm * x.matrix(i, cin_, HW);
      else {
        im2col(x.sample(i), H, W);
        out.noalias() = wm * ConstMatMap(col_.data(), K, HW);
      }
      out.colwise() += b;
    }
    return y;
  }

  Tensor backward(const Tensor& dy) {
    const Tensor& x = input_;
    const int H = x.h(), W = x.w(), HW = H * W, K = cin_ * k_ * k_;
    Tensor dx(x.n(), cin_, H, W);
    ConstMatMap wm(weight_.value.data(), cout_, K);
    MatMap dw(weight_.grad.data(), cout_, K);
    Eigen::Map<Eigen::VectorXf> db(bias_.grad.data(), cout_);
    for (int i = 0; i < x.n(); ++i) {
      auto g = dy.matrix(i, cout_, HW);
      db += g.rowwise().sum();
      if (pointwise()) {
        dw.noalias() += g * x.matrix(i, cin_, HW).transpose();
        dx.matrix(i, cin_, HW).noalias() = wm.transpose() * g;
      } else {
        im2col(x.sample(i), H, W);
        dw.noalias() += g * ConstMatMap(col_.data(), K, HW).transpose();
        dcol_.resize(static_cast<std::size_t>(K) * HW);
        MatMap(dcol_.data(), K, HW).noalias() = wm.transpose() * g;
        col2im(dx.sample(i), H, W);
      }
    }
    return dx;
  }

  void collect(std::vector<Param*>& out) { out.push_back(&weight_), out.push_back(&bias_); }
  int out_channels() const noexcept { return cout_; }

 private:
  bool pointwise() const noexcept { return k_ == 1; }

  void im2col(const float* x, int H, int W) {
    const int HW = H * W, pad = (k_ / 2) * dil_;
    col_.assign(static_cast<std::size_t>(cin_) * k_ * k_ * HW, 0.0f);
    for (int c = 0; c < cin_; ++c)
      for (int ky = 0; ky < k_; ++ky)
        for (int kx = 0; kx < k_; ++kx) {
          float* row = col_.data() + static_cast<std::size_t>((c * k_ + ky) * k_ + kx) * HW;
          const int oy = ky * dil_ - pad, ox = kx * dil_ - pad;
          const int x0 = std::max(0, -ox), x1 = std::min(W, W - ox);
          for (int y = std::max(0, -oy); y < std::min(H, H - oy); ++y) {
            const float* src = x + static_cast<std::size_t>(c) * HW + (y + oy) * W + ox;
            float* dst = row + y * W;
            for (int xx = x0; xx < x1; ++xx) dst[xx] = src[xx];
          }
        }
  }

  void col2im(float* dx, int H, int W) const {
    const int HW = H * W, pad = (k_ / 2) * dil_;
    for (int c = 0; c < cin_; ++c)
      for (int ky = 0; ky < k_; ++ky)
        for (int kx = 0; kx < k_; ++kx) {
          const float* row = dcol_.data() + static_cast<std::size_t>((c * k_ + ky) * k_ + kx) * HW;
          const int oy = ky * dil_ - pad, ox = kx * dil_ - pad;
          const int x0 = std::max(0, -ox), x1 = std::min(W, W - ox);
          for (int y = std::max(0, -oy); y < std::min(H, H - oy); ++y) {
            float* dst = dx + static_cast<std::size_t>(c) * HW + (y + oy) * W + ox;
            const float* src = row + y * W;
            for (int xx = x0; xx < x1; ++xx) dst[xx] += src[xx];
          }
        }
  }

  int cin_ = 0, cout_ = 0, k_ = 1, dil_ = 1;
  Param weight_, bias_;
  Tensor input_;
  std::vector<float> col_, dcol_;
};

class ReLU {
 public:
  Tensor forward(const Tensor& x) {
    out_ = x;
    for (auto& v : out_.values()) v = v > 0.0f ? v : 0.0f;
    return out_;
  }
  Tensor backward(const Tensor& dy) const {
    Tensor dx = dy;
    for (std::size_t i = 0; i < dx.size(); ++i)
      if (!(out_[i] > 0.0f)) dx[i] = 0.0f;
    return dx;
  }

 private:
  Tensor out_;
};

class MaxPool2 {
 public:
  Tensor forward(const Tensor& x) {
    if (x.h() % 2 || x.w() % 2) throw ShapeError("MaxPool2 needs even spatial dims, got " + x.shape_string());
    in_shape_ = Tensor(x.n(), x.c(), 0, 0);
    in_h_ = x.h(), in_w_ = x.w();
    Tensor y(x.n(), x.c(), x.h() / 2, x.w() / 2);
    argmax_.assign(y.size(), 0);
    std::size_t o = 0;
    for (int n = 0; n < x.n(); ++n)
      for (int c = 0; c < x.c(); ++c)
        for (int r = 0; r < y.h(); ++r)
          for (int q = 0; q < y.w(); ++q, ++o) {
            const std::size_t base = ((static_cast<std::size_t>(n) * x.c() + c) * x.h() + 2 * r) * x.w() + 2 * q;
            std::size_t best = base;
            for (std::size_t cand : {base + 1, base + x.w(), base + x.w() + 1})
              if (x[cand] > x[best]) best = cand;
            y[o] = x[best];
            argmax_[o] = best;
          }
    return y;
  }
  Tensor backward(const Tensor& dy) const {
    Tensor dx(in_shape_.n(), in_shape_.c(), in_h_, in_w_);
    for (std::size_t o = 0; o < dy.size(); ++o) dx[argmax_[o]] += dy[o];
    return dx;
  }

 private:
  Tensor in_shape_;
  int in_h_ = 0, in_w_ = 0;
  std::vector<std::size_t> argmax_;
};

/// Nearest-neighbour 2x upsampling.
class Upsample2 {
 public:
  Tensor forward(const Tensor& x) const {
    Tensor y(x.n(), x.c(), 2 * x.h(), 2 * x.w());
    for (int n = 0; n < x.n(); ++n)
      for (int c = 0; c < x.c(); ++c)
        for (int r = 0; r < y.h(); ++r)
          for (int q = 0; q < y.w(); ++q) y.at(n, c, r, q) = x.at(n, c, r / 2, q / 2);
    return y;
  }
  Tensor backward(const Tensor& dy) const {
    Tensor dx(dy.n(), dy.c(), dy.h() / 2, dy.w() / 2);
    for (int n = 0; n < dy.n(); ++n)
      for (int c = 0; c < dy.c(); ++c)
        for (int r = 0; r < dy.h(); ++r)
          for (int q = 0; q < dy.w(); ++q) dx.at(n, c, r / 2, q / 2) += dy.at(n, c, r, q);
    return dx;
  }
};

/// Inverted dropout; identity when the mode disables it.
class Dropout {
 public:
  Dropout() = default;
  Dropout(double rate, std::uint64_t stream) : rate_(rate), stream_(stream) {}

  Tensor forward(const Tensor& x, const ForwardMode& mode) {
    mask_.clear();
    if (!mode.dropout || rate_ <= 0.0) return x;
    Rng rng = make_rng(mode.seed, {0x64726f70ULL, stream_});
    const float scale = static_cast<float>(1.0 / (1.0 - rate_));
    mask_.resize(x.size());
    Tensor y = x;
    for (std::size_t i = 0; i < y.size(); ++i) {
      mask_[i] = uniform01(rng) >= rate_ ? scale : 0.0f;
      y[i] *= mask_[i];
    }
    return y;
  }
  Tensor backward(const Tensor& dy) const {
    if (mask_.empty()) return dy;
    Tensor dx = dy;
    for (std::size_t i = 0; i < dx.size(); ++i) dx[i] *= mask_[i];
    return dx;
  }

 private:
  double rate_ = 0.0;
  std::uint64_t stream_ = 0;
  std::vector<float> mask_;
};

// ---------------------------------------------------------------------------
// Token layers; inputs are [N, 1, L, D].

class Linear {
 public:
  Linear() = default;
  Linear(const std::string& name, int in, int out, Rng& rng)
      : in_(in), out_(out), weight_(name + ".weight", 1, 1, in, out), bias_(name + ".bias", 1, 1, 1, out) {
    init_normal(weight_.value, std::sqrt(1.0 / in), rng);
  }

  Tensor forward(const Tensor& x) {
    if (x.w() != in_) throw ShapeError("Linear " + weight_.name + ": expected width " + std::to_string(in_));
    input_ = x;
    const int L = x.h();
    Tensor y(x.n(), 1, L, out_);
    ConstMatMap wm(weight_.value.data(), in_, out_);
    Eigen::Map<const Eigen::RowVectorXf> b(bias_.value.data(), out_);
    for (int i = 0; i < x.n(); ++i) {
      auto o = y.matrix(i, L, out_);
      o.noalias() = x.matrix(i, L, in_) * wm;
      o.rowwise() += b;
    }
    return y;
  }

  Tensor backward(const Tensor& dy) {
    const int L = input_.h();
    Tensor dx(input_.n(), 1, L, in_);
    ConstMatMap wm(weight_.value.data(), in_, out_);
    MatMap dw(weight_.grad.data(), in_, out_);
    Eigen::Map<Eigen::RowVectorXf> db(bias_.grad.data(), out_);
    for (int i = 0; i < input_.n(); ++i) {
      auto g = dy.matrix(i, L, out_);
      dw.noalias() += input_.matrix(i, L, in_).transpose() * g;
      db += g.colwise().sum();
      dx.matrix(i, L, in_).noalias() = g * wm.transpose();
    }
    return dx;
  }

  void collect(std::vector<Param*>& out) { out.push_back(&weight_), out.push_back(&bias_); }

 private:
  int in_ = 0, out_ = 0;
  Param weight_, bias_;
  Tensor input_;
};

class LayerNorm {
 public:
  LayerNorm() = default;
  LayerNorm(const std::string& name, int dim) : dim_(dim), gain_(name + ".gain", 1, 1, 1, dim), bias_(name + ".bias", 1, 1, 1, dim) {
    gain_.value.fill(1.0f);
  }

  Tensor forward(const Tensor& x) {
    const std::size_t rows = x.size() / dim_;
    xhat_ = x;
    inv_std_.assign(rows, 0.0f);
    Tensor y = x;
    for (std::size_t r = 0; r < rows; ++r) {
      const float* in = x.data() + r * dim_;
      double mean = 0, var = 0;
      for (int d = 0; d < dim_; ++d) mean += in[d];
      mean /= dim_;
      for (int d = 0; d < dim_; ++d) var += (in[d] - mean) * (in[d] - mean);
      var /= dim_;
      const float inv = static_cast<float>(1.0 / std::sqrt(var + 1e-5));
      inv_std_[r] = inv;
      for (int d = 0; d < dim_; ++d) {
        const float h = static_cast<float>(in[d] - mean) * inv;
        xhat_[r * dim_ + d] = h;
        y[r * dim_ + d] = h * gain_.value[d] + bias_.value[d];
      }
    }
    return y;
  }

  Tensor backward(const Tensor& dy) {
    const std::size_t rows = dy.size() / dim_;
    Tensor dx = dy;
    for (std::size_t r = 0; r < rows; ++r) {
      double sum_g = 0, sum_gx = 0;
      for (int d = 0; d < dim_; ++d) {
        const float g = dy[r * dim_ + d];
        const float h = xhat_[r * dim_ + d];
        gain_.grad[d] += g * h;
        bias_.grad[d] += g;
        const float gh = g * gain_.value[d];
        sum_g += gh;
        sum_gx += gh * h;
      }
      for (int d = 0; d < dim_; ++d) {
        const float gh = dy[r * dim_ + d] * gain_.value[d];
        const float h = xhat_[r * dim_ + d];
        dx[r * dim_ + d] = inv_std_[r] * static_cast<float>(gh - sum_g / dim_ - h * sum_gx / dim_);
      }
    }
    return dx;
  }

  void collect(std::vector<Param*>& out) { out.push_back(&gain_), out.push_back(&bias_); }

 private:
  int dim_ = 0;
  Param gain_, bias_;
  Tensor xhat_;
  std::vector<float> inv_std_;
};

/// Multi-head scaled dot-product attention. Self-attention passes the same
/// tensor as query and key/value source and sums the two input gradients.
class MultiHeadAttention {
 public:
  MultiHeadAttention() = default;
  MultiHeadAttention(const std::string& name, int dim, int heads, Rng& rng)
      : dim_(dim), heads_(heads), q_(name + ".q", dim, dim, rng), k_(name + ".k", dim, dim, rng),
        v_(name + ".v", dim, dim, rng), o_(name + ".o", dim, dim, rng) {
    if (dim % heads) throw ConfigError("attention dim must be divisible by the head count");
  }

  Tensor forward(const Tensor& xq, const Tensor& xkv) {
    q_cache_ = q_.forward(xq);
    k_cache_ = k_.forward(xkv);
    v_cache_ = v_.forward(xkv);
    const int n = xq.n(), lq = xq.h(), lk = xkv.h(), dh = dim_ / heads_;
    const float scale = 1.0f / std::sqrt(static_cast<float>(dh));
    attn_.assign(static_cast<std::size_t>(n) * heads_, RowMat());
    Tensor ctx(n, 1, lq, dim_);
    for (int i = 0; i < n; ++i) {
      auto Q = q_cache_.matrix(i, lq, dim_);
      auto K = k_cache_.matrix(i, lk, dim_);
      auto V = v_cache_.matrix(i, lk, dim_);
      auto C = ctx.matrix(i, lq, dim_);
      for (int h = 0; h < heads_; ++h) {
        RowMat s = (Q.middleCols(h * dh, dh) * K.middleCols(h * dh, dh).transpose()) * scale;
        for (int r = 0; r < lq; ++r) {
          const float mx = s.row(r).maxCoeff();
          s.row(r) = (s.row(r).array() - mx).exp();
          s.row(r) /= s.row(r).sum();
        }
        C.middleCols(h * dh, dh).noalias() = s * V.middleCols(h * dh, dh);
        attn_[i * heads_ + h] = std::move(s);
      }
    }
    return o_.forward(ctx);
  }

  /// Returns (d query source, d key/value source).
  std::pair<Tensor, Tensor> backward(const Tensor& dy) {
    const Tensor dctx = o_.backward(dy);
    const int n = dctx.n(), lq = q_cache_.h(), lk = k_cache_.h(), dh = dim_ / heads_;
    const float scale = 1.0f / std::sqrt(static_cast<float>(dh));
    Tensor dq(n, 1, lq, dim_), dk(n, 1, lk, dim_), dv(n, 1, lk, dim_);
    for (int i = 0; i < n; ++i) {
      auto Q = q_cache_.matrix(i, lq, dim_);
      auto K = k_cache_.matrix(i, lk, dim_);
      auto V = v_cache_.matrix(i, lk, dim_);
      auto G = dctx.matrix(i, lq, dim_);
      for (int h = 0; h < heads_; ++h) {
        const RowMat& A = attn_[i * heads_ + h];
        auto g = G.middleCols(h * dh, dh);
        dv.matrix(i, lk, dim_).middleCols(h * dh, dh).noalias() = A.transpose() * g;
        RowMat dA = g * V.middleCols(h * dh, dh).transpose();
        RowMat dS = A.cwiseProduct(dA);
        const Eigen::VectorXf rowdot = dS.rowwise().sum();
        dS -= A.cwiseProduct(rowdot.replicate(1, lk));
        dS *= scale;
        dq.matrix(i, lq, dim_).middleCols(h * dh, dh).noalias() = dS * K.middleCols(h * dh, dh);
        dk.matrix(i, lk, dim_).middleCols(h * dh, dh).noalias() = dS.transpose() * Q.middleCols(h * dh, dh);
      }
    }
    Tensor dxq = q_.backward(dq);
    Tensor dxkv = k_.backward(dk);
    add_inplace(dxkv, v_.backward(dv));
    return {std::move(dxq), std::move(dxkv)};
  }

  void collect(std::vector<Param*>& out) {
    q_.collect(out), k_.collect(out), v_.collect(out), o_.collect(out);
  }

 private:
  int dim_ = 0, heads_ = 1;
  Linear q_, k_, v_, o_;
  Tensor q_cache_, k_cache_, v_cache_;
  std::vector<RowMat> attn_;
};

}  // namespace dstcs::nn
