#pragma once

// The two heterogeneous students and the EMA teacher.
//
// student1: 4-level convolutional encoder-decoder with skip connections.
// student2: shallower convolutional encoder whose bottleneck runs a transformer
//           block over patch tokens next to a multi-scale (dilated) convolution
//           branch; the two are fused by cross-attention before decoding.
// teacher:  same architecture as student2, updated only by EMA.

#include <zlib.h>

#include <algorithm>
#include <concepts>
#include <cstdint>
#include <istream>
#include <memory>
#include <ostream>
#include <sstream>
#include <string>
#include <vector>

#include "dstcs/core.hpp"
#include "dstcs/nn/layers.hpp"
#include "dstcs/nn/tensor.hpp"
#include "dstcs/rng.hpp"

namespace dstcs {

struct ModelConfig {
  int input_size = 128;
  int base_width = 16;
  int embed_dim = 32;
  int heads = 4;
  double dropout = 0.1;
  std::uint64_t init_seed = 0;

  void validate() const {
    if (input_size < 8 || input_size % 8) throw ConfigError("model input_size must be a positive multiple of 8");
    if (base_width < 1) throw ConfigError("model base_width must be positive");
    if (embed_dim < 1 || heads < 1 || embed_dim % heads) throw ConfigError("model embed_dim must be a positive multiple of heads");
    if (dropout < 0 || dropout >= 1) throw ConfigError("model dropout must lie in [0, 1)");
  }
};

class Segmenter {
 public:
  virtual ~Segmenter() = default;

  virtual std::string kind() const = 0;
  /// [N, 1, S, S] images in [0, 1] -> [N, C, S, S] logits.
  virtual nn::Tensor forward(const nn::Tensor& x, const nn::ForwardMode& mode) = 0;
  /// Accumulates parameter gradients for the most recent forward call.
  virtual void backward(const nn::Tensor& dlogits) = 0;
  virtual std::vector<nn::Param*> parameters() = 0;
  virtual std::unique_ptr<Segmenter> clone() const = 0;

  std::vector<const nn::Param*> parameters() const {
    auto ps = const_cast<Segmenter*>(this)->parameters();
    return {ps.begin(), ps.end()};
  }

  int input_size() const noexcept { return config_.input_size; }
  const ModelConfig& config() const noexcept { return config_; }

  void zero_grad() {
    for (auto* p : parameters()) p->zero_grad();
  }

  std::size_t parameter_count() const {
    std::size_t n = 0;
    for (const auto* p : parameters()) n += p->value.size();
    return n;
  }

  /// Topology description: kind, input size and every parameter name with its shape.
  std::string architecture() const {
    std::ostringstream os;
    os << kind() << "@" << input_size();
    for (const auto* p : parameters()) os << ";" << p->name << p->value.shape_string();
    return os.str();
  }

  std::uint32_t architecture_hash() const {
    const std::string a = architecture();
    return static_cast<std::uint32_t>(crc32(0L, reinterpret_cast<const Bytef*>(a.data()), static_cast<uInt>(a.size())));
  }

 protected:
  explicit Segmenter(ModelConfig cfg) : config_(cfg) { config_.validate(); }

  void check_input(const nn::Tensor& x) const {
    if (x.c() != 1 || x.h() != config_.input_size || x.w() != config_.input_size)
      throw ShapeError(kind() + ": expected input [N,1," + std::to_string(config_.input_size) + "," +
                       std::to_string(config_.input_size) + "], got " + x.shape_string());
  }

  ModelConfig config_;
};

namespace detail {

struct ConvReLU {
  nn::Conv2d conv;
  nn::ReLU act;

  ConvReLU() = default;
  ConvReLU(const std::string& name, int cin, int cout, Rng& rng, int dilation = 1)
      : conv(name, cin, cout, 3, rng, dilation) {}
  nn::Tensor forward(const nn::Tensor& x) { return act.forward(conv.forward(x)); }
  nn::Tensor backward(const nn::Tensor& dy) { return conv.backward(act.backward(dy)); }
  void collect(std::vector<nn::Param*>& out) { conv.collect(out); }
};

/// Upsample, concatenate the skip tensor, conv + ReLU, dropout.
struct DecoderStage {
  nn::Upsample2 up;
  ConvReLU block;
  nn::Dropout drop;
  int up_channels = 0;

  DecoderStage() = default;
  DecoderStage(const std::string& name, int cin, int skip, int cout, double rate, std::uint64_t stream, Rng& rng)
      : block(name, cin + skip, cout, rng), drop(rate, stream), up_channels(cin) {}

  nn::Tensor forward(const nn::Tensor& x, const nn::Tensor& skip, const nn::ForwardMode& mode) {
    return drop.forward(block.forward(nn::concat_channels(up.forward(x), skip)), mode);
  }
  /// Returns (d x, d skip).
  std::pair<nn::Tensor, nn::Tensor> backward(const nn::Tensor& dy) {
    auto [du, dskip] = nn::split_channels(block.backward(drop.backward(dy)), up_channels);
    return {up.backward(du), std::move(dskip)};
  }
  void collect(std::vector<nn::Param*>& out) { block.collect(out); }
};

}  // namespace detail

class UNetStudent final : public Segmenter {
 public:
  explicit UNetStudent(const ModelConfig& cfg) : Segmenter(cfg) {
    Rng rng = make_rng(cfg.init_seed, {0x756e6574ULL});
    const int w = cfg.base_width;
    e1a_ = {"enc1.a", 1, w, rng}, e1b_ = {"enc1.b", w, w, rng};
    e2a_ = {"enc2.a", w, 2 * w, rng}, e2b_ = {"enc2.b", 2 * w, 2 * w, rng};
    e3a_ = {"enc3.a", 2 * w, 4 * w, rng}, e3b_ = {"enc3.b", 4 * w, 4 * w, rng};
    e4a_ = {"bottleneck.a", 4 * w, 8 * w, rng}, e4b_ = {"bottleneck.b", 8 * w, 8 * w, rng};
    d3_ = {"dec3", 8 * w, 4 * w, 4 * w, cfg.dropout, 3, rng};
    d2_ = {"dec2", 4 * w, 2 * w, 2 * w, cfg.dropout, 2, rng};
    d1_ = {"dec1", 2 * w, w, w, cfg.dropout, 1, rng};
    head_ = nn::Conv2d("head", w, kNumClasses, 1, rng);
  }

  std::string kind() const override { return "unet"; }

  nn::Tensor forward(const nn::Tensor& x, const nn::ForwardMode& mode) override {
    check_input(x);
    const auto s1 = e1b_.forward(e1a_.forward(x));
    const auto s2 = e2b_.forward(e2a_.forward(p1_.forward(s1)));
    const auto s3 = e3b_.forward(e3a_.forward(p2_.forward(s2)));
    const auto b = e4b_.forward(e4a_.forward(p3_.forward(s3)));
    auto y = d3_.forward(b, s3, mode);
    y = d2_.forward(y, s2, mode);
    y = d1_.forward(y, s1, mode);
    return head_.forward(y);
  }

  void backward(const nn::Tensor& dlogits) override {
    auto [dy2, ds1] = d1_.backward(head_.backward(dlogits));
    auto [dy3, ds2] = d2_.backward(dy2);
    auto [db, ds3] = d3_.backward(dy3);
    nn::add_inplace(ds3, p3_.backward(e4a_.backward(e4b_.backward(db))));
    nn::add_inplace(ds2, p2_.backward(e3a_.backward(e3b_.backward(ds3))));
    nn::add_inplace(ds1, p1_.backward(e2a_.backward(e2b_.backward(ds2))));
    e1a_.backward(e1b_.backward(ds1));
  }

  std::vector<nn::Param*> parameters() override {
    std::vector<nn::Param*> out;
    for (auto* b : {&e1a_, &e1b_, &e2a_, &e2b_, &e3a_, &e3b_, &e4a_, &e4b_}) b->collect(out);
    for (auto* d : {&d3_, &d2_, &d1_}) d->collect(out);
    head_.collect(out);
    return out;
  }

  std::unique_ptr<Segmenter> clone() const override { return std::make_unique<UNetStudent>(*this); }

 private:
  detail::ConvReLU e1a_, e1b_, e2a_, e2b_, e3a_, e3b_, e4a_, e4b_;
  nn::MaxPool2 p1_, p2_, p3_;
  detail::DecoderStage d3_, d2_, d1_;
  nn::Conv2d head_;
};

class AttentionStudent final : public Segmenter {
 public:
  explicit AttentionStudent(const ModelConfig& cfg) : Segmenter(cfg) {
    Rng rng = make_rng(cfg.init_seed, {0x7669746eULL});
    const int w = cfg.base_width, d = cfg.embed_dim;
    stem1_ = {"stem1", 1, w, rng};
    stem2_ = {"stem2", w, 2 * w, rng};
    stem3_ = {"stem3", 2 * w, 4 * w, rng};
    const int g = cfg.input_size / 8;
    tokens_ = g * g;
    embed_ = nn::Linear("vit.embed", 4 * w, d, rng);
    pos_ = nn::Param("vit.pos", 1, 1, tokens_, d);
    nn::init_normal(pos_.value, 0.02, rng);
    ln1_ = nn::LayerNorm("vit.ln1", d);
    attn_ = nn::MultiHeadAttention("vit.attn", d, cfg.heads, rng);
    ln2_ = nn::LayerNorm("vit.ln2", d);
    mlp1_ = nn::Linear("vit.mlp1", d, 2 * d, rng);
    mlp2_ = nn::Linear("vit.mlp2", 2 * d, d, rng);
    ms_local_ = nn::Conv2d("multiscale.local", 4 * w, d, 3, rng, 1);
    ms_wide_ = nn::Conv2d("multiscale.wide", 4 * w, d, 3, rng, 2);
    ln_fuse_ = nn::LayerNorm("fusion.ln", d);
    fuse_ = nn::MultiHeadAttention("fusion.cross", d, cfg.heads, rng);
    d3_ = {"dec3", d, 4 * w, 4 * w, cfg.dropout, 13, rng};
    d2_ = {"dec2", 4 * w, 2 * w, 2 * w, cfg.dropout, 12, rng};
    d1_ = {"dec1", 2 * w, w, w, cfg.dropout, 11, rng};
    head_ = nn::Conv2d("head", w, kNumClasses, 1, rng);
  }

  std::string kind() const override { return "attention"; }

  nn::Tensor forward(const nn::Tensor& x, const nn::ForwardMode& mode) override {
    check_input(x);
    const int g = input_size() / 8;
    const auto s1 = stem1_.forward(x);
    const auto s2 = stem2_.forward(p1_.forward(s1));
    const auto s3 = stem3_.forward(p2_.forward(s2));
    const auto f = p3_.forward(s3);

    // Transformer branch over patch tokens.
    auto t = embed_.forward(nn::map_to_tokens(f));
    const int d = pos_.value.w();
    for (int i = 0; i < t.n(); ++i) t.matrix(i, tokens_, d) += pos_.value.matrix(0, tokens_, d);
    const auto n1 = ln1_.forward(t);
    nn::add_inplace(t, attn_.forward(n1, n1));
    nn::add_inplace(t, mlp2_.forward(mlp_act_.forward(mlp1_.forward(ln2_.forward(t)))));

    // Multi-scale convolution branch.
    auto c = ms_local_.forward(f);
    nn::add_inplace(c, ms_wide_.forward(f));
    const auto ctoks = nn::map_to_tokens(ms_act_.forward(c));

    // Cross-attention fusion: transformer tokens query the convolution branch.
    nn::add_inplace(t, fuse_.forward(ln_fuse_.forward(t), ctoks));

    auto y = d3_.forward(nn::tokens_to_map(t, g, g), s3, mode);
    y = d2_.forward(y, s2, mode);
    y = d1_.forward(y, s1, mode);
    return head_.forward(y);
  }

  void backward(const nn::Tensor& dlogits) override {
    const int g = input_size() / 8;
    auto [dy2, ds1] = d1_.backward(head_.backward(dlogits));
    auto [dy3, ds2] = d2_.backward(dy2);
    auto [dmap, ds3] = d3_.backward(dy3);

    auto dt = nn::map_to_tokens(dmap);
    auto [dq_fuse, dctoks] = fuse_.backward(dt);
    nn::add_inplace(dt, ln_fuse_.backward(dq_fuse));

    const auto dc = ms_act_.backward(nn::tokens_to_map(dctoks, g, g));
    auto df = ms_local_.backward(dc);
    nn::add_inplace(df, ms_wide_.backward(dc));

    nn::add_inplace(dt, ln2_.backward(mlp1_.backward(mlp_act_.backward(mlp2_.backward(dt)))));
    auto [dq_attn, dkv_attn] = attn_.backward(dt);
    nn::add_inplace(dq_attn, dkv_attn);
    nn::add_inplace(dt, ln1_.backward(dq_attn));

    const int d = pos_.value.w();
    for (int i = 0; i < dt.n(); ++i) pos_.grad.matrix(0, tokens_, d) += dt.matrix(i, tokens_, d);
    nn::add_inplace(df, nn::tokens_to_map(embed_.backward(dt), g, g));

    nn::add_inplace(ds3, p3_.backward(df));
    nn::add_inplace(ds2, p2_.backward(stem3_.backward(ds3)));
    nn::add_inplace(ds1, p1_.backward(stem2_.backward(ds2)));
    stem1_.backward(ds1);
  }

  std::vector<nn::Param*> parameters() override {
    std::vector<nn::Param*> out;
    for (auto* b : {&stem1_, &stem2_, &stem3_}) b->collect(out);
    embed_.collect(out);
    out.push_back(&pos_);
    ln1_.collect(out), attn_.collect(out), ln2_.collect(out), mlp1_.collect(out), mlp2_.collect(out);
    ms_local_.collect(out), ms_wide_.collect(out);
    ln_fuse_.collect(out), fuse_.collect(out);
    for (auto* d : {&d3_, &d2_, &d1_}) d->collect(out);
    head_.collect(out);
    return out;
  }

  std::unique_ptr<Segmenter> clone() const override { return std::make_unique<AttentionStudent>(*this); }

 private:
  int tokens_ = 0;
  detail::ConvReLU stem1_, stem2_, stem3_;
  nn::MaxPool2 p1_, p2_, p3_;
  nn::Linear embed_;
  nn::Param pos_;
  nn::LayerNorm ln1_, ln2_, ln_fuse_;
  nn::MultiHeadAttention attn_, fuse_;
  nn::Linear mlp1_, mlp2_;
  nn::ReLU mlp_act_, ms_act_;
  nn::Conv2d ms_local_, ms_wide_;
  detail::DecoderStage d3_, d2_, d1_;
  nn::Conv2d head_;
};

// ---------------------------------------------------------------------------
// Image-level helpers

inline nn::Tensor to_tensor(const std::vector<const Image*>& images) {
  if (images.empty()) throw ShapeError("to_tensor: empty batch");
  const int rows = images.front()->rows(), cols = images.front()->cols();
  nn::Tensor t(static_cast<int>(images.size()), 1, rows, cols);
  for (std::size_t i = 0; i < images.size(); ++i) {
    require_same_shape(*images[i], *images.front(), "to_tensor");
    std::copy(images[i]->data(), images[i]->data() + images[i]->size(), t.sample(static_cast<int>(i)));
  }
  return t;
}

/// Softmax over the channel axis of sample i of a logit tensor.
template <std::floating_point T = double>
ProbabilityMap<T> probabilities(const nn::Tensor& logits, int i) {
  const int nc = logits.c(), rows = logits.h(), cols = logits.w();
  ProbabilityMap<T> logit_map(rows, cols, nc);
  for (int k = 0; k < nc; ++k)
    for (int r = 0; r < rows; ++r)
      for (int c = 0; c < cols; ++c) logit_map(r, c, k) = static_cast<T>(logits.at(i, k, r, c));
  return softmax(logit_map);
}

/// Writes a per-sample logit gradient (ProbabilityMap layout) into sample i of an NCHW tensor.
template <std::floating_point T>
void store_gradient(nn::Tensor& dlogits, int i, const ProbabilityMap<T>& g) {
  for (int k = 0; k < g.classes(); ++k)
    for (int r = 0; r < g.rows(); ++r)
      for (int c = 0; c < g.cols(); ++c) dlogits.at(i, k, r, c) = static_cast<float>(g(r, c, k));
}

/// Single-image forward producing a ProbabilityMap.
inline ProbabilityMap<double> predict(Segmenter& model, const Image& image, const nn::ForwardMode& mode = {}) {
  if (image.rows() != model.input_size() || image.cols() != model.input_size())
    throw ShapeError(model.kind() + ": image " + std::to_string(image.rows()) + "x" + std::to_string(image.cols()) +
                     " does not match configured input size " + std::to_string(model.input_size()));
  return probabilities(model.forward(to_tensor({&image}), mode), 0);
}

// ---------------------------------------------------------------------------

/// Student1, student2 and a teacher that mirrors student2 and is only ever
/// changed through ema_update().
struct ModelTriple {
  std::unique_ptr<Segmenter> student1;
  std::unique_ptr<Segmenter> student2;
  std::unique_ptr<Segmenter> teacher;

  explicit ModelTriple(const ModelConfig& cfg)
      : student1(std::make_unique<UNetStudent>(cfg)),
        student2(std::make_unique<AttentionStudent>(ModelConfig{cfg.input_size, cfg.base_width, cfg.embed_dim,
                                                                 cfg.heads, cfg.dropout, cfg.init_seed + 1})),
        teacher(student2->clone()) {}

  ModelTriple(const ModelTriple& o)
      : student1(o.student1->clone()), student2(o.student2->clone()), teacher(o.teacher->clone()) {}
  ModelTriple& operator=(const ModelTriple& o) {
    if (this != &o) *this = ModelTriple(o);
    return *this;
  }
  ModelTriple(ModelTriple&&) noexcept = default;
  ModelTriple& operator=(ModelTriple&&) noexcept = default;
};

/// teacher <- decay * teacher + (1 - decay) * source, evaluated in double and stored as float.
inline void ema_update(Segmenter& teacher, const Segmenter& source, double decay) {
  if (!(decay >= 0.0 && decay <= 1.0)) throw ConfigError("EMA decay must lie in [0, 1]");
  auto tp = teacher.parameters();
  const auto sp = source.parameters();
  if (tp.size() != sp.size() || teacher.architecture_hash() != source.architecture_hash())
    throw ShapeError("ema_update: teacher and source architectures differ");
  for (std::size_t i = 0; i < tp.size(); ++i) {
    auto& t = tp[i]->value;
    const auto& s = sp[i]->value;
    for (std::size_t j = 0; j < t.size(); ++j)
      t[j] = static_cast<float>(decay * static_cast<double>(t[j]) + (1.0 - decay) * static_cast<double>(s[j]));
  }
}

inline void ema_update(ModelTriple& triple, double decay) { ema_update(*triple.teacher, *triple.student2, decay); }

// ---------------------------------------------------------------------------
// Parameter serialization (little-endian host layout)

namespace detail {

template <typename T>
void put(std::ostream& os, const T& v) {
  os.write(reinterpret_cast<const char*>(&v), sizeof(T));
}
template <typename T>
T get(std::istream& is) {
  T v{};
  is.read(reinterpret_cast<char*>(&v), sizeof(T));
  if (!is) throw Error("unexpected end of checkpoint stream");
  return v;
}
inline void put_string(std::ostream& os, const std::string& s) {
  put<std::uint64_t>(os, s.size());
  os.write(s.data(), static_cast<std::streamsize>(s.size()));
}
inline std::string get_string(std::istream& is) {
  const auto n = get<std::uint64_t>(is);
  if (n > (1u << 26)) throw Error("checkpoint string length out of range");
  std::string s(n, '\0');
  is.read(s.data(), static_cast<std::streamsize>(n));
  if (!is) throw Error("unexpected end of checkpoint stream");
  return s;
}

}  // namespace detail

inline void write_parameters(std::ostream& os, const Segmenter& model) {
  detail::put_string(os, model.kind());
  detail::put<std::uint32_t>(os, model.architecture_hash());
  const auto ps = model.parameters();
  detail::put<std::uint64_t>(os, ps.size());
  for (const auto* p : ps) {
    detail::put<std::uint64_t>(os, p->value.size());
    os.write(reinterpret_cast<const char*>(p->value.data()), static_cast<std::streamsize>(p->value.size() * sizeof(float)));
  }
}

/// Loads into an already-constructed model; rejects any architecture mismatch.
inline void read_parameters(std::istream& is, Segmenter& model) {
  const auto kind = detail::get_string(is);
  const auto hash = detail::get<std::uint32_t>(is);
  if (kind != model.kind() || hash != model.architecture_hash())
    throw ShapeError("checkpoint architecture mismatch for " + model.kind() + " (stored " + kind + ")");
  auto ps = model.parameters();
  if (detail::get<std::uint64_t>(is) != ps.size()) throw ShapeError("checkpoint parameter count mismatch");
  for (auto* p : ps) {
    if (detail::get<std::uint64_t>(is) != p->value.size()) throw ShapeError("checkpoint tensor size mismatch for " + p->name);
    is.read(reinterpret_cast<char*>(p->value.data()), static_cast<std::streamsize>(p->value.size() * sizeof(float)));
    if (!is) throw Error("unexpected end of checkpoint stream");
  }
}

}  // namespace dstcs
