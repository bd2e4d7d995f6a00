#pragma once

#include <array>
#include <optional>

#include "nulite/attention.hpp"
#include "nulite/nn.hpp"

namespace nulite {

enum class EncoderVariant { T8, T12, S12, SA12, SA24, SA36, MA36 };
enum class StageKind { RepMixer, Attention };

inline const char* variant_name(EncoderVariant v) {
  switch (v) {
    case EncoderVariant::T8: return "T8";
    case EncoderVariant::T12: return "T12";
    case EncoderVariant::S12: return "S12";
    case EncoderVariant::SA12: return "SA12";
    case EncoderVariant::SA24: return "SA24";
    case EncoderVariant::SA36: return "SA36";
    case EncoderVariant::MA36: return "MA36";
  }
  return "?";
}

struct EncoderConfig {
  EncoderVariant variant = EncoderVariant::S12;
  int64_t base_width = 64;  // Z; stage widths are Z,2Z,4Z,8Z
  std::array<int64_t, 4> stage_widths{};
  std::array<int, 4> stage_depths{};
  std::array<StageKind, 4> stage_kind{};
  float mlp_ratio = 4.f;
  bool train_mode = true;

  static EncoderConfig make(EncoderVariant v) {
    EncoderConfig c;
    c.variant = v;
    auto rep4 = std::array<StageKind, 4>{StageKind::RepMixer, StageKind::RepMixer,
                                         StageKind::RepMixer, StageKind::RepMixer};
    auto rep3attn = std::array<StageKind, 4>{StageKind::RepMixer, StageKind::RepMixer,
                                             StageKind::RepMixer, StageKind::Attention};
    switch (v) {
      case EncoderVariant::T8:
        c.base_width = 48; c.stage_depths = {2, 2, 4, 2}; c.mlp_ratio = 3.f; c.stage_kind = rep4;
        break;
      case EncoderVariant::T12:
        c.base_width = 64; c.stage_depths = {2, 2, 6, 2}; c.mlp_ratio = 3.f; c.stage_kind = rep4;
        break;
      case EncoderVariant::S12:
        c.base_width = 64; c.stage_depths = {2, 2, 6, 2}; c.mlp_ratio = 4.f; c.stage_kind = rep4;
        break;
      case EncoderVariant::SA12:
        c.base_width = 64; c.stage_depths = {2, 2, 6, 2}; c.mlp_ratio = 4.f;
        c.stage_kind = rep3attn;
        break;
      case EncoderVariant::SA24:
        c.base_width = 64; c.stage_depths = {4, 4, 12, 4}; c.mlp_ratio = 4.f;
        c.stage_kind = rep3attn;
        break;
      case EncoderVariant::SA36:
        c.base_width = 64; c.stage_depths = {6, 6, 18, 6}; c.mlp_ratio = 4.f;
        c.stage_kind = rep3attn;
        break;
      case EncoderVariant::MA36:
        c.base_width = 76; c.stage_depths = {6, 6, 18, 6}; c.mlp_ratio = 4.f;
        c.stage_kind = rep3attn;
        break;
    }
    for (int i = 0; i < 4; ++i) c.stage_widths[size_t(i)] = c.base_width << i;
    c.validate();
    return c;
  }

  static EncoderConfig make(const std::string& name) {
    for (EncoderVariant v : {EncoderVariant::T8, EncoderVariant::T12, EncoderVariant::S12,
                             EncoderVariant::SA12, EncoderVariant::SA24, EncoderVariant::SA36,
                             EncoderVariant::MA36})
      if (name == variant_name(v) || name == std::string("FastViT-") + variant_name(v))
        return make(v);
    throw std::invalid_argument("unknown encoder variant: " + name);
  }

  void validate() const {
    for (int i = 0; i < 4; ++i)
      if (stage_widths[size_t(i)] != base_width << i)
        throw std::invalid_argument("stage widths must be Z,2Z,4Z,8Z");
    if (base_width != 48 && base_width != 64 && base_width != 76)
      throw std::invalid_argument("base width must be one of 48, 64, 76");
    bool attn_seen = false;
    for (int i = 0; i < 4; ++i) {
      if (stage_kind[size_t(i)] == StageKind::Attention) attn_seen = true;
      else if (attn_seen)
        throw std::invalid_argument("attention stages must be the trailing ones");
    }
  }

  int64_t final_width() const { return stage_widths[3]; }
};

namespace detail {

// Fold BN into a preceding conv: w' = w * gamma/sigma (per out channel),
// b' = beta - gamma*mean/sigma.
inline void fold_bn(const Tensor& w, const BatchNorm2d& bn, Tensor& w_out, Tensor& b_out) {
  if (!bn.stats_populated())
    throw std::runtime_error(
        "reparameterize: batch-norm statistics are unpopulated; run a calibration forward "
        "pass in training mode first");
  const int64_t cout = w.dim(0);
  const int64_t per = w.numel() / cout;
  for (int64_t c = 0; c < cout; ++c) {
    float sigma = std::sqrt(bn.running_var[c] + bn.eps);
    float g = bn.gamma->value[c] / sigma;
    const float* src = w.data() + c * per;
    float* dst = w_out.data() + c * per;
    for (int64_t i = 0; i < per; ++i) dst[i] += src[i] * g;
    b_out[c] += bn.beta->value[c] - bn.running_mean[c] * g;
  }
}

// Adds s[c] * identity to a kxk kernel of a conv with in==out channels.
inline void add_identity(Tensor& w, const std::vector<float>& s, int groups) {
  const int64_t cout = w.dim(0), cg = w.dim(1);
  const int k = int(w.dim(2));
  const int ctr = k / 2;
  for (int64_t c = 0; c < cout; ++c)
    w.at({c, c % cg, ctr, ctr}) += s[size_t(c)];
  (void)groups;
}

}  // namespace detail

// Train-time multi-branch convolution (kxk conv+BN, optional 1x1 conv+BN,
// optional identity BN) that collapses into a single biased kxk conv.
struct MobileOneBlock {
  int64_t in_ch = 0, out_ch = 0;
  int kernel = 3, stride = 1, pad = 1, groups = 1;
  bool use_act = true;

  Conv2d conv;          // kxk branch, no bias
  BatchNorm2d conv_bn;
  bool has_scale = false;
  Conv2d scale;         // 1x1 branch, no bias
  BatchNorm2d scale_bn;
  bool has_skip = false;
  BatchNorm2d skip_bn;

  bool fused = false;
  Conv2d rep;  // single fused conv with bias

  MobileOneBlock() = default;
  MobileOneBlock(int64_t cin, int64_t cout, int k, int s, int p, int g, bool act,
                 bool scale_branch = true, bool inference_mode = false)
      : in_ch(cin), out_ch(cout), kernel(k), stride(s), pad(p), groups(g), use_act(act) {
    if (inference_mode) {
      rep = Conv2d(cin, cout, k, s, p, g, true);
      fused = true;
      return;
    }
    conv = Conv2d(cin, cout, k, s, p, g, false);
    conv_bn = BatchNorm2d(cout);
    has_scale = scale_branch && k > 1;
    if (has_scale) {
      scale = Conv2d(cin, cout, 1, s, 0, g, false);
      scale_bn = BatchNorm2d(cout);
    }
    has_skip = (cin == cout) && (s == 1);
    if (has_skip) skip_bn = BatchNorm2d(cout);
  }

  Var forward(const Var& x, bool training) {
    Var y;
    if (fused) {
      y = rep.forward(x);
    } else {
      y = conv_bn.forward(conv.forward(x), training);
      if (has_scale) y = add(y, scale_bn.forward(scale.forward(x), training));
      if (has_skip) y = add(y, skip_bn.forward(x, training));
    }
    return use_act ? gelu(y) : y;
  }

  void fuse() {
    if (fused) return;
    Tensor w({out_ch, in_ch / groups, kernel, kernel});
    Tensor b({out_ch});
    detail::fold_bn(conv.weight->value, conv_bn, w, b);
    if (has_scale) {
      Tensor w1({out_ch, in_ch / groups, 1, 1});
      Tensor b1({out_ch});
      detail::fold_bn(scale.weight->value, scale_bn, w1, b1);
      const int ctr = kernel / 2;
      for (int64_t c = 0; c < out_ch; ++c)
        for (int64_t i = 0; i < in_ch / groups; ++i)
          w.at({c, i, ctr, ctr}) += w1.at({c, i, 0, 0});
      b.add_(b1);
    }
    if (has_skip) {
      if (!skip_bn.stats_populated())
        throw std::runtime_error(
            "reparameterize: batch-norm statistics are unpopulated; run a calibration "
            "forward pass in training mode first");
      std::vector<float> s(size_t(out_ch), 0.f);
      for (int64_t c = 0; c < out_ch; ++c) {
        float sigma = std::sqrt(skip_bn.running_var[c] + skip_bn.eps);
        s[size_t(c)] = skip_bn.gamma->value[c] / sigma;
        b[c] += skip_bn.beta->value[c] - skip_bn.running_mean[c] * s[size_t(c)];
      }
      detail::add_identity(w, s, groups);
    }
    rep = Conv2d(in_ch, out_ch, kernel, stride, pad, groups, true);
    rep.weight->value = w;
    rep.bias->value = b;
    fused = true;
    conv = Conv2d();
    conv_bn = BatchNorm2d();
    scale = Conv2d();
    scale_bn = BatchNorm2d();
    skip_bn = BatchNorm2d();
  }

  void init(Rng& rng) {
    if (fused) {
      rep.init(rng);
      return;
    }
    conv.init(rng);
    if (has_scale) scale.init(rng);
  }

  void visit(const std::string& p, const StateVisitor& v) {
    if (fused) {
      rep.visit(p + ".reparam", v);
      return;
    }
    conv.visit(p + ".conv", v);
    conv_bn.visit(p + ".conv_bn", v);
    if (has_scale) {
      scale.visit(p + ".scale", v);
      scale_bn.visit(p + ".scale_bn", v);
    }
    if (has_skip) skip_bn.visit(p + ".skip_bn", v);
  }

  int64_t out_dim(int64_t in) const { return conv_out_dim(in, kernel, stride, pad); }

  void tally(int64_t h, int64_t w, NetStats& s) const {
    if (fused) {
      rep.tally(h, w, s);
      return;
    }
    conv.tally(h, w, s);
    if (has_scale) scale.tally(h, w, s);
  }
};

// Reparameterizable token mixer: x + ls * (mixer(x) - norm(x)) with depthwise
// branches, fusing to a single depthwise conv.
struct RepMixer {
  int64_t dim = 0;
  int kernel = 3;
  MobileOneBlock mixer;  // dw kxk + scale + skip, no act
  BatchNorm2d norm;      // identity BN branch
  Var layer_scale;

  bool fused = false;
  Conv2d rep;

  RepMixer() = default;
  explicit RepMixer(int64_t d, int k = 3, bool inference_mode = false) : dim(d), kernel(k) {
    if (inference_mode) {
      rep = Conv2d(d, d, k, 1, k / 2, int(d), true);
      fused = true;
      return;
    }
    mixer = MobileOneBlock(d, d, k, 1, k / 2, int(d), /*act=*/false);
    norm = BatchNorm2d(d);
    layer_scale = make_param(Tensor::full({d}, 1e-5f));
  }

  Var forward(const Var& x, bool training) {
    if (fused) return rep.forward(x);
    Var m = mixer.forward(x, training);
    Var n = norm.forward(x, training);
    return add(x, mul_channel(sub(m, n), layer_scale));
  }

  void fuse() {
    if (fused) return;
    mixer.fuse();
    Tensor wn({dim, 1, kernel, kernel});
    Tensor bn_b({dim});
    // norm branch as a centered depthwise kernel
    if (!norm.stats_populated())
      throw std::runtime_error(
          "reparameterize: batch-norm statistics are unpopulated; run a calibration forward "
          "pass in training mode first");
    const int ctr = kernel / 2;
    for (int64_t c = 0; c < dim; ++c) {
      float sigma = std::sqrt(norm.running_var[c] + norm.eps);
      float g = norm.gamma->value[c] / sigma;
      wn.at({c, 0, ctr, ctr}) = g;
      bn_b[c] = norm.beta->value[c] - norm.running_mean[c] * g;
    }
    Tensor w({dim, 1, kernel, kernel});
    Tensor b({dim});
    for (int64_t c = 0; c < dim; ++c) {
      float ls = layer_scale->value[c];
      const float* wm = mixer.rep.weight->value.data() + c * kernel * kernel;
      const float* pn = wn.data() + c * kernel * kernel;
      float* pw = w.data() + c * kernel * kernel;
      for (int i = 0; i < kernel * kernel; ++i) pw[i] = ls * (wm[i] - pn[i]);
      pw[ctr * kernel + ctr] += 1.f;  // residual identity
      b[c] = ls * (mixer.rep.bias->value[c] - bn_b[c]);
    }
    rep = Conv2d(dim, dim, kernel, 1, kernel / 2, int(dim), true);
    rep.weight->value = w;
    rep.bias->value = b;
    fused = true;
    mixer = MobileOneBlock();
    norm = BatchNorm2d();
  }

  void init(Rng& rng) {
    if (fused) {
      rep.init(rng);
      return;
    }
    mixer.init(rng);
  }

  void visit(const std::string& p, const StateVisitor& v) {
    if (fused) {
      rep.visit(p + ".reparam", v);
      return;
    }
    mixer.visit(p + ".mixer", v);
    norm.visit(p + ".norm", v);
    v.param(p + ".layer_scale", layer_scale);
  }

  void tally(int64_t h, int64_t w, NetStats& s) const {
    if (fused) rep.tally(h, w, s);
    else mixer.tally(h, w, s);
  }
};

// 7x7 depthwise conv + BN, then two pointwise convs with GELU between.
struct ConvFFN {
  Conv2d dw;
  BatchNorm2d dw_bn;
  Conv2d fc1, fc2;
  int64_t dim = 0, hidden = 0;

  ConvFFN() = default;
  ConvFFN(int64_t d, int64_t h) : dim(d), hidden(h) {
    dw = Conv2d(d, d, 7, 1, 3, int(d), false);
    dw_bn = BatchNorm2d(d);
    fc1 = Conv2d(d, h, 1, 1, 0, 1, true);
    fc2 = Conv2d(h, d, 1, 1, 0, 1, true);
  }

  Var forward(const Var& x, bool training) {
    Var y = dw_bn.forward(dw.forward(x), training);
    y = gelu(fc1.forward(y));
    return fc2.forward(y);
  }

  void init(Rng& rng) {
    dw.init(rng);
    // pointwise layers follow the dense init recipe
    for (auto* c : {&fc1, &fc2}) {
      for (int64_t i = 0; i < c->weight->value.numel(); ++i)
        c->weight->value[i] = rand_trunc_normal(rng, 0.f, 0.02f);
      c->bias->value.fill(0.f);
    }
  }

  void visit(const std::string& p, const StateVisitor& v) {
    dw.visit(p + ".dw", v);
    dw_bn.visit(p + ".dw_bn", v);
    fc1.visit(p + ".fc1", v);
    fc2.visit(p + ".fc2", v);
  }

  void tally(int64_t h, int64_t w, NetStats& s) const {
    dw.tally(h, w, s);
    fc1.tally(h, w, s);
    fc2.tally(h, w, s);
  }
};

struct RepMixerBlock {
  RepMixer token_mixer;
  ConvFFN ffn;
  Var layer_scale;
  int64_t dim = 0;

  RepMixerBlock() = default;
  RepMixerBlock(int64_t d, float mlp_ratio, bool inference_mode = false)
      : token_mixer(d, 3, inference_mode), ffn(d, int64_t(d * mlp_ratio)) {
    dim = d;
    layer_scale = make_param(Tensor::full({d}, 1e-5f));
  }

  Var forward(const Var& x, bool training) {
    Var t = token_mixer.forward(x, training);
    return add(t, mul_channel(ffn.forward(t, training), layer_scale));
  }

  void fuse() { token_mixer.fuse(); }

  void init(Rng& rng) {
    token_mixer.init(rng);
    ffn.init(rng);
  }

  void visit(const std::string& p, const StateVisitor& v) {
    token_mixer.visit(p + ".token_mixer", v);
    ffn.visit(p + ".ffn", v);
    v.param(p + ".layer_scale", layer_scale);
  }

  void tally(int64_t h, int64_t w, NetStats& s) const {
    token_mixer.tally(h, w, s);
    ffn.tally(h, w, s);
  }
};

struct AttentionBlock {
  LayerNorm2d norm;
  MHSA attn;
  Var ls_attn;
  ConvFFN ffn;
  Var ls_ffn;
  int64_t dim = 0;

  AttentionBlock() = default;
  AttentionBlock(int64_t d, float mlp_ratio, int head_dim = 32)
      : norm(d), attn(d, head_dim), ffn(d, int64_t(d * mlp_ratio)), dim(d) {
    ls_attn = make_param(Tensor::full({d}, 1e-5f));
    ls_ffn = make_param(Tensor::full({d}, 1e-5f));
  }

  Var forward(const Var& x, bool training) {
    Var y = add(x, mul_channel(attn.forward(norm.forward(x)), ls_attn));
    return add(y, mul_channel(ffn.forward(y, training), ls_ffn));
  }

  void init(Rng& rng) {
    attn.init(rng);
    ffn.init(rng);
  }

  void visit(const std::string& p, const StateVisitor& v) {
    norm.visit(p + ".norm", v);
    attn.visit(p + ".attn", v);
    v.param(p + ".ls_attn", ls_attn);
    ffn.visit(p + ".ffn", v);
    v.param(p + ".ls_ffn", ls_ffn);
  }

  void tally(int64_t h, int64_t w, NetStats& s) const {
    attn.tally(h, w, s);
    ffn.tally(h, w, s);
  }
};

// Downsampling between stages: grouped 7x7 stride-2 conv with a parallel 3x3
// branch, then a pointwise MobileOne block.
struct RepLargeKernelConv {
  int64_t in_ch = 0, out_ch = 0;
  int kernel = 7, small_kernel = 3, stride = 2;

  Conv2d lkb;
  BatchNorm2d lkb_bn;
  Conv2d small;
  BatchNorm2d small_bn;

  bool fused = false;
  Conv2d rep;

  RepLargeKernelConv() = default;
  RepLargeKernelConv(int64_t cin, int64_t cout, bool inference_mode = false)
      : in_ch(cin), out_ch(cout) {
    if (inference_mode) {
      rep = Conv2d(cin, cout, kernel, stride, kernel / 2, int(cin), true);
      fused = true;
      return;
    }
    lkb = Conv2d(cin, cout, kernel, stride, kernel / 2, int(cin), false);
    lkb_bn = BatchNorm2d(cout);
    small = Conv2d(cin, cout, small_kernel, stride, small_kernel / 2, int(cin), false);
    small_bn = BatchNorm2d(cout);
  }

  Var forward(const Var& x, bool training) {
    if (fused) return gelu(rep.forward(x));
    Var y = add(lkb_bn.forward(lkb.forward(x), training),
                small_bn.forward(small.forward(x), training));
    return gelu(y);
  }

  void fuse() {
    if (fused) return;
    Tensor w({out_ch, 1, kernel, kernel});
    Tensor b({out_ch});
    detail::fold_bn(lkb.weight->value, lkb_bn, w, b);
    Tensor ws({out_ch, 1, small_kernel, small_kernel});
    Tensor bs({out_ch});
    detail::fold_bn(small.weight->value, small_bn, ws, bs);
    const int off = (kernel - small_kernel) / 2;
    for (int64_t c = 0; c < out_ch; ++c)
      for (int ky = 0; ky < small_kernel; ++ky)
        for (int kx = 0; kx < small_kernel; ++kx)
          w.at({c, 0, ky + off, kx + off}) += ws.at({c, 0, ky, kx});
    b.add_(bs);
    rep = Conv2d(in_ch, out_ch, kernel, stride, kernel / 2, int(in_ch), true);
    rep.weight->value = w;
    rep.bias->value = b;
    fused = true;
    lkb = Conv2d();
    lkb_bn = BatchNorm2d();
    small = Conv2d();
    small_bn = BatchNorm2d();
  }

  void init(Rng& rng) {
    if (fused) {
      rep.init(rng);
      return;
    }
    lkb.init(rng);
    small.init(rng);
  }

  void visit(const std::string& p, const StateVisitor& v) {
    if (fused) {
      rep.visit(p + ".reparam", v);
      return;
    }
    lkb.visit(p + ".lkb", v);
    lkb_bn.visit(p + ".lkb_bn", v);
    small.visit(p + ".small", v);
    small_bn.visit(p + ".small_bn", v);
  }

  int64_t out_dim(int64_t in) const { return conv_out_dim(in, kernel, stride, kernel / 2); }

  void tally(int64_t h, int64_t w, NetStats& s) const {
    if (fused) {
      rep.tally(h, w, s);
      return;
    }
    lkb.tally(h, w, s);
    small.tally(h, w, s);
  }
};

struct PatchEmbed {
  RepLargeKernelConv proj;
  MobileOneBlock pw;

  PatchEmbed() = default;
  PatchEmbed(int64_t cin, int64_t cout, bool inference_mode = false)
      : proj(cin, cout, inference_mode),
        pw(cout, cout, 1, 1, 0, 1, /*act=*/true, true, inference_mode) {}

  Var forward(const Var& x, bool training) {
    return pw.forward(proj.forward(x, training), training);
  }

  void fuse() {
    proj.fuse();
    pw.fuse();
  }

  void init(Rng& rng) {
    proj.init(rng);
    pw.init(rng);
  }

  void visit(const std::string& p, const StateVisitor& v) {
    proj.visit(p + ".proj", v);
    pw.visit(p + ".pw", v);
  }

  void tally(int64_t h, int64_t w, NetStats& s) const {
    proj.tally(h, w, s);
    pw.tally(proj.out_dim(h), proj.out_dim(w), s);
  }
};

// Conditional positional encoding: depthwise 7x7 conv (with bias) plus
// residual; the residual folds into the kernel center at inference.
struct RepCPE {
  int64_t dim = 0;
  int kernel = 7;
  Conv2d pe;
  bool fused = false;

  RepCPE() = default;
  explicit RepCPE(int64_t d, bool inference_mode = false) : dim(d) {
    pe = Conv2d(d, d, kernel, 1, kernel / 2, int(d), true);
    fused = inference_mode;
  }

  Var forward(const Var& x) {
    if (fused) return pe.forward(x);
    return add(pe.forward(x), x);
  }

  void fuse() {
    if (fused) return;
    const int ctr = kernel / 2;
    for (int64_t c = 0; c < dim; ++c) pe.weight->value.at({c, 0, ctr, ctr}) += 1.f;
    fused = true;
  }

  void init(Rng& rng) { pe.init(rng); }

  void visit(const std::string& p, const StateVisitor& v) { pe.visit(p + ".pe", v); }

  void tally(int64_t h, int64_t w, NetStats& s) const { pe.tally(h, w, s); }
};

struct FeaturePyramid {
  Var stem;    // [N, Z, H/4, W/4]
  Var s1;      // [N, Z, H/4, W/4]
  Var s2;      // [N, 2Z, H/8, W/8]
  Var s3;      // [N, 4Z, H/16, W/16]
  Var s4;      // [N, 8Z, H/32, W/32]
  Var pooled;  // [N, 8Z]
};

struct EncoderStage {
  StageKind kind = StageKind::RepMixer;
  std::vector<RepMixerBlock> rep_blocks;
  std::vector<AttentionBlock> attn_blocks;

  Var forward(Var x, bool training) {
    if (kind == StageKind::RepMixer)
      for (auto& b : rep_blocks) x = b.forward(x, training);
    else
      for (auto& b : attn_blocks) x = b.forward(x, training);
    return x;
  }

  void tally(int64_t h, int64_t w, NetStats& s) const {
    for (const auto& b : rep_blocks) b.tally(h, w, s);
    for (const auto& b : attn_blocks) b.tally(h, w, s);
  }
};

class Encoder {
 public:
  Encoder() = default;

  explicit Encoder(const EncoderConfig& cfg) : cfg_(cfg) {
    cfg_.validate();
    const bool inf = !cfg.train_mode;
    fused_ = inf;
    const auto& w = cfg.stage_widths;
    stem_[0] = MobileOneBlock(3, w[0], 3, 2, 1, 1, true, true, inf);
    stem_[1] = MobileOneBlock(w[0], w[0], 3, 2, 1, int(w[0]), true, true, inf);
    stem_[2] = MobileOneBlock(w[0], w[0], 1, 1, 0, 1, true, true, inf);
    for (int i = 0; i < 4; ++i) {
      stages_[size_t(i)].kind = cfg.stage_kind[size_t(i)];
      for (int d = 0; d < cfg.stage_depths[size_t(i)]; ++d) {
        if (cfg.stage_kind[size_t(i)] == StageKind::RepMixer)
          stages_[size_t(i)].rep_blocks.emplace_back(w[size_t(i)], cfg.mlp_ratio, inf);
        else
          stages_[size_t(i)].attn_blocks.emplace_back(w[size_t(i)], cfg.mlp_ratio);
      }
      if (i < 3) embeds_[size_t(i)] = PatchEmbed(w[size_t(i)], w[size_t(i) + 1], inf);
      if (cfg.stage_kind[size_t(i)] == StageKind::Attention && !cpe_[size_t(i)])
        cpe_[size_t(i)] = RepCPE(w[size_t(i)], inf);
    }
  }

  const EncoderConfig& config() const { return cfg_; }
  bool reparameterized() const { return fused_; }

  void init(Rng& rng) {
    for (auto& b : stem_) b.init(rng);
    for (size_t i = 0; i < 4; ++i) {
      for (auto& b : stages_[i].rep_blocks) b.init(rng);
      for (auto& b : stages_[i].attn_blocks) b.init(rng);
      if (i < 3) embeds_[i].init(rng);
      if (cpe_[i]) cpe_[i]->init(rng);
    }
  }

  FeaturePyramid forward(const Var& x, bool training) {
    const auto& s = x->value.shape();
    if (s.size() != 4 || s[1] != 3)
      throw std::invalid_argument("encoder: input must be [N,3,H,W], got " +
                                  x->value.shape_str());
    if (s[2] % 32 != 0)
      throw std::invalid_argument("encoder: input height " + std::to_string(s[2]) +
                                  " not divisible by 32");
    if (s[3] % 32 != 0)
      throw std::invalid_argument("encoder: input width " + std::to_string(s[3]) +
                                  " not divisible by 32");
    FeaturePyramid p;
    Var y = x;
    for (auto& b : stem_) y = b.forward(y, training);
    p.stem = y;
    for (int i = 0; i < 4; ++i) {
      if (cpe_[size_t(i)]) y = cpe_[size_t(i)]->forward(y);
      y = stages_[size_t(i)].forward(y, training);
      if (i == 0) p.s1 = y;
      if (i == 1) p.s2 = y;
      if (i == 2) p.s3 = y;
      if (i == 3) p.s4 = y;
      if (i < 3) y = embeds_[size_t(i)].forward(y, training);
    }
    p.pooled = global_avg_pool(p.s4);
    return p;
  }

  // Algebraic fusion of every multi-branch block; idempotent.
  void reparameterize() {
    if (fused_) return;
    for (auto& b : stem_) b.fuse();
    for (size_t i = 0; i < 4; ++i) {
      for (auto& b : stages_[i].rep_blocks) b.fuse();
      if (i < 3) embeds_[i].fuse();
      if (cpe_[i]) cpe_[i]->fuse();
    }
    fused_ = true;
    cfg_.train_mode = false;
  }

  void visit(const std::string& prefix, const StateVisitor& v) {
    for (size_t i = 0; i < 3; ++i) stem_[i].visit(prefix + ".stem." + std::to_string(i), v);
    for (size_t i = 0; i < 4; ++i) {
      std::string sp = prefix + ".stage" + std::to_string(i + 1);
      if (cpe_[i]) cpe_[i]->visit(sp + ".cpe", v);
      auto& st = stages_[i];
      for (size_t b = 0; b < st.rep_blocks.size(); ++b)
        st.rep_blocks[b].visit(sp + ".block" + std::to_string(b), v);
      for (size_t b = 0; b < st.attn_blocks.size(); ++b)
        st.attn_blocks[b].visit(sp + ".block" + std::to_string(b), v);
      if (i < 3) embeds_[i].visit(prefix + ".embed" + std::to_string(i + 1), v);
    }
  }

  std::vector<Var> parameters() {
    std::vector<Var> out;
    StateVisitor v;
    v.param = [&out](const std::string&, Var& p) { out.push_back(p); };
    v.buffer = [](const std::string&, Tensor&) {};
    visit("encoder", v);
    return out;
  }

  void tally(int64_t h, int64_t w, NetStats& s) const {
    stem_[0].tally(h, w, s);
    int64_t hh = stem_[0].out_dim(h), ww = stem_[0].out_dim(w);
    stem_[1].tally(hh, ww, s);
    hh = stem_[1].out_dim(hh);
    ww = stem_[1].out_dim(ww);
    stem_[2].tally(hh, ww, s);
    for (size_t i = 0; i < 4; ++i) {
      if (cpe_[i]) cpe_[i]->tally(hh, ww, s);
      stages_[i].tally(hh, ww, s);
      if (i < 3) {
        embeds_[i].tally(hh, ww, s);
        hh = embeds_[i].proj.out_dim(hh);
        ww = embeds_[i].proj.out_dim(ww);
      }
    }
  }

 private:
  EncoderConfig cfg_;
  std::array<MobileOneBlock, 3> stem_;
  std::array<EncoderStage, 4> stages_;
  std::array<PatchEmbed, 3> embeds_;
  std::array<std::optional<RepCPE>, 4> cpe_;
  bool fused_ = false;
};

inline Encoder build_encoder(const EncoderConfig& cfg, uint64_t seed) {
  Encoder e(cfg);
  Rng rng(seed);
  e.init(rng);
  return e;
}

// Dense tissue classifier fed by the pooled final-stage features.
struct TissueHead {
  Linear fc;

  TissueHead() = default;
  TissueHead(int64_t in, int64_t classes) : fc(in, classes) {
    if (classes < 2) throw std::invalid_argument("tissue classifier needs >= 2 classes");
  }

  Var forward(const Var& pooled) const { return fc.forward(pooled); }

  void visit(const std::string& p, const StateVisitor& v) { fc.visit(p + ".fc", v); }
};

inline Var tissue_logits(const FeaturePyramid& p, TissueHead& head) {
  if (!p.pooled) throw std::invalid_argument("tissue_logits: pooled features missing");
  return head.forward(p.pooled);
}

}  // namespace nulite
