#pragma once

// Multiscale-patch DeiT-style student with LoRA-adapted attention.
//
// Pipeline for one image:
//   P1 patches -> [CT; DT; Z] + pos -> local-window attention -> encoder branch -> H1
//   P2 patches -> [CT; DT; Z] + pos -> global self-attention  -> encoder branch -> H2
//   CLS1 attends to H2 patch tokens, CLS2 attends to H1 patch tokens,
//   MLP over the concatenated CLS tokens, then the classifier.
//
// Base weights are frozen after construction. Trainable state lives only in
// LoraAdapter pairs (A, B); with every B at zero the network equals its base.

#include <cmath>
#include <functional>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include "fedlora/errors.hpp"
#include "fedlora/hash.hpp"
#include "fedlora/ops.hpp"
#include "fedlora/rng.hpp"

namespace fedlora {

struct ModelConfig {
  std::size_t image_size = 224;
  std::size_t channels = 3;
  std::size_t patch1 = 16;
  std::size_t patch2 = 32;
  std::size_t embed_dim = 128;
  std::size_t depth = 4;
  std::size_t heads = 4;
  std::size_t window = 7;
  std::size_t ffn_dim = 256;
  std::size_t num_classes = 7;
  std::size_t lora_rank = 4;
  double lora_alpha = 4.0;
  double lora_dropout = 0.2;
  // Also adapt the cross-attention and task head with LoRA.
  bool adapt_head = true;

  std::size_t head_dim() const { return embed_dim / heads; }
  std::size_t grid1() const { return image_size / patch1; }
  std::size_t grid2() const { return image_size / patch2; }
  std::size_t tokens1() const { return grid1() * grid1(); }
  std::size_t tokens2() const { return grid2() * grid2(); }

  void validate() const {
    auto fail = [](const std::string& m) { throw ConfigError("model config: " + m); };
    if (image_size == 0 || channels == 0 || embed_dim == 0 || heads == 0 || num_classes < 2 || ffn_dim == 0)
      fail("sizes must be positive and num_classes >= 2");
    if (patch1 == 0 || patch2 == 0 || image_size % patch1 != 0 || image_size % patch2 != 0)
      fail("image_size " + std::to_string(image_size) + " not divisible by patch sizes " + std::to_string(patch1) +
           "/" + std::to_string(patch2));
    if (embed_dim % heads != 0)
      fail("embed_dim " + std::to_string(embed_dim) + " not divisible by heads " + std::to_string(heads));
    if (window == 0 || grid1() % window != 0)
      fail("window " + std::to_string(window) + " does not divide the P1 grid side " + std::to_string(grid1()));
    if (lora_rank == 0 || lora_rank > head_dim())
      fail("lora_rank " + std::to_string(lora_rank) + " must lie in [1, d_k=" + std::to_string(head_dim()) + "]");
    if (!(lora_alpha > 0.0)) fail("lora_alpha must be positive");
    if (!(lora_dropout >= 0.0 && lora_dropout < 1.0)) fail("lora_dropout must lie in [0, 1)");
  }

  // Canonical text form; identical configs serialize identically.
  std::string canonical() const {
    std::string s;
    auto kv = [&](const char* k, const std::string& v) { s += std::string(k) + "=" + v + ";"; };
    kv("image_size", std::to_string(image_size));
    kv("channels", std::to_string(channels));
    kv("patch1", std::to_string(patch1));
    kv("patch2", std::to_string(patch2));
    kv("embed_dim", std::to_string(embed_dim));
    kv("depth", std::to_string(depth));
    kv("heads", std::to_string(heads));
    kv("window", std::to_string(window));
    kv("ffn_dim", std::to_string(ffn_dim));
    kv("num_classes", std::to_string(num_classes));
    kv("lora_rank", std::to_string(lora_rank));
    char buf[64];
    std::snprintf(buf, sizeof buf, "%.17g", lora_alpha);
    kv("lora_alpha", buf);
    std::snprintf(buf, sizeof buf, "%.17g", lora_dropout);
    kv("lora_dropout", buf);
    kv("adapt_head", adapt_head ? "1" : "0");
    return s;
  }
};

inline constexpr int kCaptureNone = -2;
inline constexpr int kCaptureLwa = -1;

// Per-call switches for a forward pass.
struct ForwardContext {
  bool training = false;
  bool lora_enabled = true;
  Rng* dropout_rng = nullptr;
  // When set, every attention probability matrix is appended here.
  std::vector<Tensor>* attention_log = nullptr;
  // P1 activations to cut from the graph and replace by a gradient-collecting
  // leaf stored below: a block index or kCaptureLwa.
  int capture_block = kCaptureNone;
  Tensor captured;
};

namespace detail {
inline Tensor capture_leaf(const Tensor& x, ForwardContext& ctx) {
  ctx.captured = x.detach();
  ctx.captured.set_requires_grad(true);
  return ctx.captured;
}
}  // namespace detail

struct LoraAdapter {
  Tensor A;  // in × r
  Tensor B;  // r × out
  double scaling = 1.0;
  double dropout = 0.0;

  std::size_t rank() const { return A.dim(1); }
  std::size_t numel() const { return A.numel() + B.numel(); }
};

// y = x·W + b (+ scaling · dropout(x)·A·B when adapted).
struct LoraLinear {
  Tensor weight;  // in × out, frozen
  Tensor bias;    // out, frozen
  std::optional<LoraAdapter> lora;

  Tensor forward(const Tensor& x, ForwardContext& ctx) const {
    Tensor y = ops::add_bias(ops::matmul(x, weight), bias);
    if (!lora || !ctx.lora_enabled) return y;
    Tensor xin = x;
    if (ctx.training && lora->dropout > 0.0) {
      if (!ctx.dropout_rng) throw ContractError("training forward with LoRA dropout needs an rng");
      std::bernoulli_distribution keep(1.0 - lora->dropout);
      const double inv = 1.0 / (1.0 - lora->dropout);
      std::vector<double> mask(x.numel());
      for (auto& m : mask) m = keep(*ctx.dropout_rng) ? inv : 0.0;
      xin = ops::mul(x, Tensor(x.shape(), std::move(mask)));
    }
    Tensor delta = ops::matmul(ops::matmul(xin, lora->A), lora->B);
    return ops::add(y, ops::scale(delta, lora->scaling));
  }
};

struct LayerNormParams {
  Tensor gamma;
  Tensor beta;
  Tensor forward(const Tensor& x) const { return ops::layer_norm(x, gamma, beta); }
};

// Multi-head softmax attention. The optional additive mask is shared by all heads.
struct MultiHeadAttention {
  LoraLinear q, k, v, o;
  std::size_t heads = 1;

  Tensor forward(const Tensor& x, const Tensor* mask, ForwardContext& ctx) const {
    Tensor qa = q.forward(x, ctx), ka = k.forward(x, ctx), va = v.forward(x, ctx);
    const std::size_t e = qa.dim(1), dk = e / heads;
    const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(dk));
    std::vector<Tensor> outs;
    for (std::size_t h = 0; h < heads; ++h) {
      Tensor qh = heads == 1 ? qa : ops::slice_cols(qa, h * dk, (h + 1) * dk);
      Tensor kh = heads == 1 ? ka : ops::slice_cols(ka, h * dk, (h + 1) * dk);
      Tensor vh = heads == 1 ? va : ops::slice_cols(va, h * dk, (h + 1) * dk);
      Tensor scores = ops::scale(ops::matmul_nt(qh, kh), inv_sqrt);
      if (mask) scores = ops::add(scores, *mask);
      Tensor p = ops::softmax_lastdim(scores, 1.0);
      if (ctx.attention_log) ctx.attention_log->push_back(p);
      outs.push_back(ops::matmul(p, vh));
    }
    Tensor cat = heads == 1 ? outs.front() : ops::concat_cols(outs);
    return o.forward(cat, ctx);
  }
};

struct PatchEmbedder {
  std::size_t patch = 16;
  Tensor proj;  // (C·P·P) × E
  Tensor bias;  // E
  Tensor pos;   // (tokens + 2) × E
  Tensor ct;    // E
  Tensor dt;    // E

  // [CT; DT; patches·W + b] + pos
  Tensor forward(const Tensor& image) const {
    Tensor z = ops::add_bias(ops::matmul(ops::extract_patches(image, patch), proj), bias);
    if (z.dim(0) + 2 != pos.dim(0))
      throw ConfigError("patch_embed: image yields " + std::to_string(z.dim(0)) + " tokens, positional table expects " +
                        std::to_string(pos.dim(0) - 2));
    return ops::add(ops::concat_rows({ct, dt, z}), pos);
  }
};

// Pre-norm block: x + Attn(LN(x)), then + FFN(LN(.)).
struct EncoderBlock {
  LayerNormParams ln1, ln2;
  MultiHeadAttention attn;
  LoraLinear ffn1, ffn2;

  Tensor forward(const Tensor& x, ForwardContext& ctx) const {
    Tensor h = ops::add(x, attn.forward(ln1.forward(x), nullptr, ctx));
    Tensor f = ffn2.forward(ops::gelu(ffn1.forward(ln2.forward(h), ctx)), ctx);
    return ops::add(h, f);
  }
};

// Single-head cross-attention from one query row onto a token sequence.
struct CrossAttention {
  LoraLinear q, k, v;

  // softmax(q kᵀ/√E)·v, without the residual.
  Tensor attend(const Tensor& query, const Tensor& tokens, ForwardContext& ctx) const {
    Tensor qa = q.forward(query, ctx), ka = k.forward(tokens, ctx), va = v.forward(tokens, ctx);
    const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(qa.dim(1)));
    Tensor p = ops::softmax_lastdim(ops::scale(ops::matmul_nt(qa, ka), inv_sqrt), 1.0);
    if (ctx.attention_log) ctx.attention_log->push_back(p);
    return ops::matmul(p, va);
  }

  Tensor forward(const Tensor& query, const Tensor& tokens, ForwardContext& ctx) const {
    return ops::add(query, attend(query, tokens, ctx));
  }
};

struct FusionHead {
  CrossAttention cross1;  // CLS of P1 attends to P2 tokens
  CrossAttention cross2;  // CLS of P2 attends to P1 tokens
  LoraLinear mlp;         // 2E -> E, GELU
  LoraLinear classifier;  // E -> classes

  Tensor forward(const Tensor& h1, const Tensor& h2, ForwardContext& ctx) const {
    Tensor cls1 = ops::slice_rows(h1, 0, 1), tok1 = ops::slice_rows(h1, 2, h1.dim(0));
    Tensor cls2 = ops::slice_rows(h2, 0, 1), tok2 = ops::slice_rows(h2, 2, h2.dim(0));
    Tensor z1 = cross1.forward(cls1, tok2, ctx);
    Tensor z2 = cross2.forward(cls2, tok1, ctx);
    Tensor fused = ops::gelu(mlp.forward(ops::concat_cols({z1, z2}), ctx));
    Tensor logits = classifier.forward(fused, ctx);
    return ops::reshape(logits, {logits.numel()});
  }
};

class MsDeit {
 public:
  ModelConfig config;
  PatchEmbedder embed1, embed2;
  MultiHeadAttention lwa, gsa;
  Tensor lwa_mask;
  std::vector<EncoderBlock> branch1, branch2;
  FusionHead head;

  // Deterministic construction: base weights from `seed`'s "init/base" stream,
  // adapter A matrices from "init/lora" (N(0, 0.02²)), every B zero.
  static MsDeit create(const ModelConfig& cfg, std::uint64_t seed) {
    cfg.validate();
    MsDeit m;
    m.config = cfg;
    Rng base = stream(seed, "init/base");
    Rng lora = stream(seed, "init/lora");
    const std::size_t e = cfg.embed_dim;

    auto normal = [](Rng& rng, Shape shape, double sd) {
      std::normal_distribution<double> d(0.0, sd);
      std::vector<double> v(shape_numel(shape));
      for (auto& x : v) x = d(rng);
      return Tensor(std::move(shape), std::move(v));
    };
    auto linear = [&](std::size_t in, std::size_t out, bool adapted) {
      LoraLinear l;
      l.weight = normal(base, {in, out}, 1.0 / std::sqrt(static_cast<double>(in)));
      l.bias = Tensor::zeros({out});
      if (adapted) {
        LoraAdapter a;
        a.A = normal(lora, {in, cfg.lora_rank}, 0.02);
        a.A.set_requires_grad(true);
        a.B = Tensor::zeros({cfg.lora_rank, out}, true);
        a.scaling = cfg.lora_alpha / static_cast<double>(cfg.lora_rank);
        a.dropout = cfg.lora_dropout;
        l.lora = std::move(a);
      }
      return l;
    };
    auto embedder = [&](std::size_t patch) {
      PatchEmbedder pe;
      pe.patch = patch;
      const std::size_t fan = cfg.channels * patch * patch;
      const std::size_t tokens = (cfg.image_size / patch) * (cfg.image_size / patch);
      pe.proj = normal(base, {fan, e}, 1.0 / std::sqrt(static_cast<double>(fan)));
      pe.bias = Tensor::zeros({e});
      pe.pos = normal(base, {tokens + 2, e}, 2.0);
      pe.ct = normal(base, {e}, 0.5);
      pe.dt = normal(base, {e}, 0.5);
      return pe;
    };
    auto attention = [&](std::size_t heads, bool adapted) {
      MultiHeadAttention a;
      a.heads = heads;
      a.q = linear(e, e, adapted);
      a.k = linear(e, e, adapted);
      a.v = linear(e, e, false);
      a.o = linear(e, e, false);
      return a;
    };
    auto layer_norm = [&] { return LayerNormParams{Tensor::full({e}, 1.0), Tensor::zeros({e})}; };
    auto block = [&] {
      EncoderBlock b;
      b.ln1 = layer_norm();
      b.ln2 = layer_norm();
      b.attn = attention(cfg.heads, true);
      b.ffn1 = linear(e, cfg.ffn_dim, false);
      b.ffn2 = linear(cfg.ffn_dim, e, false);
      return b;
    };

    m.embed1 = embedder(cfg.patch1);
    m.embed2 = embedder(cfg.patch2);
    m.lwa = attention(cfg.heads, false);
    m.gsa = attention(cfg.heads, false);
    m.lwa_mask = local_window_mask(cfg.grid1(), cfg.window);
    for (std::size_t i = 0; i < cfg.depth; ++i) m.branch1.push_back(block());
    for (std::size_t i = 0; i < cfg.depth; ++i) m.branch2.push_back(block());
    const bool h = cfg.adapt_head;
    m.head.cross1 = CrossAttention{linear(e, e, h), linear(e, e, h), linear(e, e, false)};
    m.head.cross2 = CrossAttention{linear(e, e, h), linear(e, e, h), linear(e, e, false)};
    m.head.mlp = linear(2 * e, e, h);
    m.head.classifier = linear(e, cfg.num_classes, h);
    return m;
  }

  // Additive mask over the (2 + g²) sequence: CT/DT rows see everything; patch
  // tokens see only patch tokens of their own w×w window.
  static Tensor local_window_mask(std::size_t grid, std::size_t window) {
    if (window == 0 || grid % window != 0)
      throw ConfigError("window " + std::to_string(window) + " does not divide grid side " + std::to_string(grid));
    const std::size_t n = grid * grid + 2;
    std::vector<double> mask(n * n, 0.0);
    auto win = [&](std::size_t t) { return ((t / grid) / window) * (grid / window) + (t % grid) / window; };
    for (std::size_t i = 2; i < n; ++i)
      for (std::size_t j = 0; j < n; ++j)
        if (j < 2 || win(i - 2) != win(j - 2)) mask[i * n + j] = ops::kMasked;
    return Tensor({n, n}, std::move(mask));
  }

  Tensor local_window_attention(const Tensor& seq, ForwardContext& ctx) const {
    return ops::add(seq, lwa.forward(seq, &lwa_mask, ctx));
  }

  Tensor global_self_attention(const Tensor& seq, ForwardContext& ctx) const {
    return ops::add(seq, gsa.forward(seq, nullptr, ctx));
  }

  static Tensor encoder_branch(const std::vector<EncoderBlock>& blocks, Tensor x, ForwardContext& ctx,
                               int capture = kCaptureNone) {
    for (std::size_t i = 0; i < blocks.size(); ++i) {
      x = blocks[i].forward(x, ctx);
      if (capture == static_cast<int>(i)) x = detail::capture_leaf(x, ctx);
    }
    return x;
  }

  // image [C×H×W] -> logits [classes]
  Tensor forward(const Tensor& image, ForwardContext& ctx) const {
    check_image(image);
    Tensor s1 = local_window_attention(embed1.forward(image), ctx);
    if (ctx.capture_block == kCaptureLwa) s1 = detail::capture_leaf(s1, ctx);
    Tensor h1 = encoder_branch(branch1, s1, ctx, ctx.capture_block);
    Tensor h2 = encoder_branch(branch2, global_self_attention(embed2.forward(image), ctx), ctx);
    return head.forward(h1, h2, ctx);
  }

  // images -> logits [B×classes]
  Tensor forward_batch(const std::vector<Tensor>& images, ForwardContext& ctx) const {
    std::vector<Tensor> rows;
    rows.reserve(images.size());
    for (const auto& im : images) rows.push_back(forward(im, ctx));
    return ops::concat_rows(rows);
  }

  void check_image(const Tensor& image) const {
    if (image.rank() != 3 || image.dim(0) != config.channels || image.dim(1) != config.image_size ||
        image.dim(2) != config.image_size)
      throw ConfigError("model expects images of shape " +
                        shape_str({config.channels, config.image_size, config.image_size}) + ", got " +
                        shape_str(image.shape()));
  }

  // Visits every linear layer with its path.
  template <class F>
  void for_each_linear(F&& f) {
    auto attn = [&](const std::string& p, MultiHeadAttention& a) {
      f(p + "/q", a.q);
      f(p + "/k", a.k);
      f(p + "/v", a.v);
      f(p + "/o", a.o);
    };
    attn("p1/lwa", lwa);
    attn("p2/gsa", gsa);
    for (std::size_t i = 0; i < branch1.size(); ++i) {
      attn("p1/block" + std::to_string(i) + "/attn", branch1[i].attn);
      f("p1/block" + std::to_string(i) + "/ffn1", branch1[i].ffn1);
      f("p1/block" + std::to_string(i) + "/ffn2", branch1[i].ffn2);
    }
    for (std::size_t i = 0; i < branch2.size(); ++i) {
      attn("p2/block" + std::to_string(i) + "/attn", branch2[i].attn);
      f("p2/block" + std::to_string(i) + "/ffn1", branch2[i].ffn1);
      f("p2/block" + std::to_string(i) + "/ffn2", branch2[i].ffn2);
    }
    f("fuse/cross1/q", head.cross1.q);
    f("fuse/cross1/k", head.cross1.k);
    f("fuse/cross1/v", head.cross1.v);
    f("fuse/cross2/q", head.cross2.q);
    f("fuse/cross2/k", head.cross2.k);
    f("fuse/cross2/v", head.cross2.v);
    f("head/mlp", head.mlp);
    f("head/classifier", head.classifier);
  }

  template <class F>
  void for_each_linear(F&& f) const {
    const_cast<MsDeit*>(this)->for_each_linear(
        [&](const std::string& p, LoraLinear& l) { f(p, static_cast<const LoraLinear&>(l)); });
  }

  // Frozen tensors in a fixed order.
  std::vector<std::pair<std::string, Tensor>> base_parameters() const {
    std::vector<std::pair<std::string, Tensor>> out;
    auto pe = [&](const std::string& p, const PatchEmbedder& e) {
      out.emplace_back(p + "/proj", e.proj);
      out.emplace_back(p + "/bias", e.bias);
      out.emplace_back(p + "/pos", e.pos);
      out.emplace_back(p + "/ct", e.ct);
      out.emplace_back(p + "/dt", e.dt);
    };
    pe("p1/embed", embed1);
    pe("p2/embed", embed2);
    auto ln = [&](const std::string& p, const std::vector<EncoderBlock>& bs) {
      for (std::size_t i = 0; i < bs.size(); ++i) {
        const std::string b = p + "/block" + std::to_string(i);
        out.emplace_back(b + "/ln1/gamma", bs[i].ln1.gamma);
        out.emplace_back(b + "/ln1/beta", bs[i].ln1.beta);
        out.emplace_back(b + "/ln2/gamma", bs[i].ln2.gamma);
        out.emplace_back(b + "/ln2/beta", bs[i].ln2.beta);
      }
    };
    ln("p1", branch1);
    ln("p2", branch2);
    for_each_linear([&](const std::string& p, const LoraLinear& l) {
      out.emplace_back(p + "/weight", l.weight);
      out.emplace_back(p + "/bias", l.bias);
    });
    return out;
  }

  // Adapted layers in a fixed order.
  std::vector<std::pair<std::string, LoraAdapter*>> adapters() {
    std::vector<std::pair<std::string, LoraAdapter*>> out;
    for_each_linear([&](const std::string& p, LoraLinear& l) {
      if (l.lora) out.emplace_back(p, &*l.lora);
    });
    return out;
  }

  std::vector<std::pair<std::string, const LoraAdapter*>> adapters() const {
    std::vector<std::pair<std::string, const LoraAdapter*>> out;
    for_each_linear([&](const std::string& p, const LoraLinear& l) {
      if (l.lora) out.emplace_back(p, &*l.lora);
    });
    return out;
  }

  std::vector<Tensor> trainable_tensors() {
    std::vector<Tensor> out;
    for (auto& [p, a] : adapters()) {
      out.push_back(a->A);
      out.push_back(a->B);
    }
    return out;
  }

  std::size_t base_parameter_count() const {
    std::size_t n = 0;
    for (const auto& [p, t] : base_parameters()) n += t.numel();
    return n;
  }

  std::size_t adapter_parameter_count() const {
    std::size_t n = 0;
    for (const auto& [p, a] : adapters()) n += a->numel();
    return n;
  }

  // SHA-256 over every frozen tensor's bytes, in base_parameters() order.
  Digest base_checksum() const {
    Sha256 h;
    for (const auto& [p, t] : base_parameters()) h.update(p).update(t.data());
    return h.finish();
  }

  // Copy sharing the frozen base tensors but owning its adapters.
  MsDeit clone_with_private_adapters() const {
    MsDeit c = *this;
    for (auto& [p, a] : c.adapters()) {
      a->A = a->A.clone();
      a->B = a->B.clone();
    }
    return c;
  }

  // Makes every tensor (base and adapters) trainable. Used for the teacher,
  // which is trained in full before it is frozen.
  std::vector<Tensor> unfreeze_all() {
    std::vector<Tensor> out;
    for (auto& [p, t] : base_parameters()) {
      t.set_requires_grad(true);
      out.push_back(t);
    }
    for (auto& t : trainable_tensors()) out.push_back(t);
    return out;
  }

  void freeze_all() {
    for (auto& [p, t] : base_parameters()) {
      t.set_requires_grad(false);
      t.zero_grad();
    }
    for (auto& t : trainable_tensors()) {
      t.set_requires_grad(false);
      t.zero_grad();
    }
  }

};

}  // namespace fedlora
