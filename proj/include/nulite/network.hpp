#pragma once

#include "nulite/encoder.hpp"

namespace nulite {

struct NetworkConfig {
  EncoderConfig encoder;
  int64_t num_nuclei_classes = 6;  // C, background included
  int64_t num_tissue_classes = 19;

  void validate() const {
    encoder.validate();
    if (num_nuclei_classes < 2)
      throw std::invalid_argument("num_nuclei_classes must be >= 2 (background + 1)");
    if (num_tissue_classes < 2)
      throw std::invalid_argument("num_tissue_classes must be >= 2");
  }
};

// Named presets. T/M/H follow the S12/SA24/SA36 backbone assignment whose
// parameter counts line up with the published complexity table; the -alt
// presets keep the alternative S12/SA36/MA36 assignment that also circulates.
inline NetworkConfig network_variant(const std::string& name, int64_t num_nuclei_classes = 6,
                                     int64_t num_tissue_classes = 19) {
  NetworkConfig cfg;
  cfg.num_nuclei_classes = num_nuclei_classes;
  cfg.num_tissue_classes = num_tissue_classes;
  if (name == "NuLite-T") cfg.encoder = EncoderConfig::make(EncoderVariant::S12);
  else if (name == "NuLite-M") cfg.encoder = EncoderConfig::make(EncoderVariant::SA24);
  else if (name == "NuLite-H") cfg.encoder = EncoderConfig::make(EncoderVariant::SA36);
  else if (name == "NuLite-T-alt") cfg.encoder = EncoderConfig::make(EncoderVariant::S12);
  else if (name == "NuLite-M-alt") cfg.encoder = EncoderConfig::make(EncoderVariant::SA36);
  else if (name == "NuLite-H-alt") cfg.encoder = EncoderConfig::make(EncoderVariant::MA36);
  else cfg.encoder = EncoderConfig::make(name);  // raw FastViT variant names
  return cfg;
}

struct NetworkOutput {
  Var np_logits;      // [N,2,H,W]
  Var hv_map;         // [N,2,H,W], ch 0 horizontal, ch 1 vertical
  Var nt_logits;      // [N,C,H,W]
  Var tissue_logits;  // [N,num_tissue_classes]
};

struct ConvBnRelu {
  Conv2d conv;
  BatchNorm2d bn;

  ConvBnRelu() = default;
  ConvBnRelu(int64_t cin, int64_t cout, int k = 3)
      : conv(cin, cout, k, 1, (k - 1) / 2, 1, true), bn(cout) {}

  Var forward(const Var& x, bool training) { return relu(bn.forward(conv.forward(x), training)); }

  void init(Rng& rng) { conv.init(rng); }

  void visit(const std::string& p, const StateVisitor& v) {
    conv.visit(p + ".conv", v);
    bn.visit(p + ".bn", v);
  }

  void tally(int64_t h, int64_t w, NetStats& s) const { conv.tally(h, w, s); }
};

// One Table-1 decoder layer: conv blocks that reduce channels, then a 2x2
// stride-2 transposed conv that doubles the spatial dims.
struct DecoderStage {
  std::vector<ConvBnRelu> convs;
  ConvTranspose2d up;

  DecoderStage() = default;
  DecoderStage(std::vector<std::pair<int64_t, int64_t>> conv_io, int64_t up_ch) {
    for (auto [cin, cout] : conv_io) convs.emplace_back(cin, cout);
    up = ConvTranspose2d(up_ch, up_ch, 2, 2);
  }

  Var forward(Var x, bool training) {
    for (auto& c : convs) x = c.forward(x, training);
    return up.forward(x);
  }

  void init(Rng& rng) {
    for (auto& c : convs) c.init(rng);
    up.init(rng);
  }

  void visit(const std::string& p, const StateVisitor& v) {
    for (size_t i = 0; i < convs.size(); ++i) convs[i].visit(p + ".conv" + std::to_string(i), v);
    up.visit(p + ".up", v);
  }

  void tally(int64_t h, int64_t w, NetStats& s) const {
    for (const auto& c : convs) c.tally(h, w, s);
    up.tally(h, w, s);
  }
};

struct SegmentationHead {
  ConvBnRelu block;
  Conv2d out;

  SegmentationHead() = default;
  SegmentationHead(int64_t cin, int64_t hidden, int64_t cout)
      : block(cin, hidden), out(hidden, cout, 1, 1, 0, 1, true) {}

  Var forward(const Var& x, bool training) { return out.forward(block.forward(x, training)); }

  void init(Rng& rng) {
    block.init(rng);
    out.init(rng);
  }

  void visit(const std::string& p, const StateVisitor& v) {
    block.visit(p + ".block", v);
    out.visit(p + ".out", v);
  }

  void tally(int64_t h, int64_t w, NetStats& s) const {
    block.tally(h, w, s);
    out.tally(h, w, s);
  }
};

// Shape trace of the last forward pass, for structural assertions.
struct LayerTrace {
  std::string name;
  std::vector<int64_t> in_shape;   // [C,H,W]
  std::vector<int64_t> out_shape;  // [C,H,W]
};

class Network {
 public:
  Network() = default;

  explicit Network(const NetworkConfig& cfg) : cfg_(cfg), encoder_(cfg.encoder) {
    cfg_.validate();
    const int64_t z = cfg.encoder.base_width;
    const int64_t c = cfg.num_nuclei_classes;
    dec_[0] = DecoderStage({{8 * z, 4 * z}}, 4 * z);
    dec_[1] = DecoderStage({{8 * z, 4 * z}, {4 * z, 2 * z}}, 2 * z);
    dec_[2] = DecoderStage({{4 * z, 2 * z}, {2 * z, z}}, z);
    dec_[3] = DecoderStage({{2 * z, z}}, z);
    dec_[4] = DecoderStage({{z, z}}, z);
    stem_skip_ = ConvBnRelu(3, z);
    np_head_ = SegmentationHead(2 * z, z, 2);
    hv_head_ = SegmentationHead(2 * z, z, 2);
    nt_head_ = SegmentationHead(2 * z, z, c);
    tissue_ = TissueHead(8 * z, cfg.num_tissue_classes);
  }

  const NetworkConfig& config() const { return cfg_; }
  Encoder& encoder() { return encoder_; }
  const Encoder& encoder() const { return encoder_; }
  bool reparameterized() const { return encoder_.reparameterized(); }
  const std::vector<LayerTrace>& last_trace() const { return trace_; }

  void init(uint64_t seed) {
    Rng rng(seed);
    encoder_.init(rng);
    for (auto& d : dec_) d.init(rng);
    stem_skip_.init(rng);
    np_head_.init(rng);
    hv_head_.init(rng);
    nt_head_.init(rng);
    tissue_.fc.init(rng);
  }

  NetworkOutput forward(const Var& image, bool training) {
    const auto& s = image->value.shape();
    if (s.size() != 4 || s[1] != 3)
      throw std::invalid_argument("network: input must be [N,3,H,W], got " +
                                  image->value.shape_str());
    if (s[2] % 32 != 0)
      throw std::invalid_argument("network: input height " + std::to_string(s[2]) +
                                  " not divisible by 32");
    if (s[3] % 32 != 0)
      throw std::invalid_argument("network: input width " + std::to_string(s[3]) +
                                  " not divisible by 32");
    trace_.clear();

    FeaturePyramid p = encoder_.forward(image, training);
    Var skip_full = stem_skip_.forward(image, training);

    Var d1_in = p.s4;
    Var d1 = traced("DEC.1", d1_in, [&] { return dec_[0].forward(d1_in, training); });
    Var d2_in = concat_channel(d1, p.s3);
    Var d2 = traced("DEC.2", d2_in, [&] { return dec_[1].forward(d2_in, training); });
    Var d3_in = concat_channel(d2, p.s2);
    Var d3 = traced("DEC.3", d3_in, [&] { return dec_[2].forward(d3_in, training); });
    Var d4_in = concat_channel(d3, p.s1);
    Var d4 = traced("DEC.4", d4_in, [&] { return dec_[3].forward(d4_in, training); });
    Var d5 = traced("DEC.5", d4, [&] { return dec_[4].forward(d4, training); });

    Var head_in = concat_channel(d5, skip_full);
    NetworkOutput out;
    out.np_logits = traced("NP.HEAD", head_in, [&] { return np_head_.forward(head_in, training); });
    out.hv_map = traced("HV.HEAD", head_in, [&] { return hv_head_.forward(head_in, training); });
    out.nt_logits = traced("NC.HEAD", head_in, [&] { return nt_head_.forward(head_in, training); });
    out.tissue_logits = tissue_.forward(p.pooled);
    return out;
  }

  void reparameterize() { encoder_.reparameterize(); }

  void visit(const StateVisitor& v) {
    encoder_.visit("encoder", v);
    stem_skip_.visit("stem_skip", v);
    for (size_t i = 0; i < 5; ++i) dec_[i].visit("dec" + std::to_string(i + 1), v);
    np_head_.visit("np_head", v);
    hv_head_.visit("hv_head", v);
    nt_head_.visit("nt_head", v);
    tissue_.visit("tissue", v);
  }

  std::vector<Var> parameters() {
    std::vector<Var> out;
    StateVisitor v;
    v.param = [&out](const std::string&, Var& p) { out.push_back(p); };
    v.buffer = [](const std::string&, Tensor&) {};
    visit(v);
    return out;
  }

  std::vector<std::pair<std::string, Var>> named_parameters() {
    std::vector<std::pair<std::string, Var>> out;
    StateVisitor v;
    v.param = [&out](const std::string& n, Var& p) { out.emplace_back(n, p); };
    v.buffer = [](const std::string&, Tensor&) {};
    visit(v);
    return out;
  }

  int64_t num_parameters() {
    auto ps = parameters();
    return param_count(ps);
  }

  void tally(int64_t h, int64_t w, NetStats& s) const {
    encoder_.tally(h, w, s);
    stem_skip_.tally(h, w, s);
    int64_t hs[5] = {h / 32, h / 16, h / 8, h / 4, h / 2};
    int64_t ws[5] = {w / 32, w / 16, w / 8, w / 4, w / 2};
    for (int i = 0; i < 5; ++i) dec_[size_t(i)].tally(hs[i], ws[i], s);
    np_head_.tally(h, w, s);
    hv_head_.tally(h, w, s);
    nt_head_.tally(h, w, s);
    tissue_.fc.tally(s);
  }

 private:
  template <class F>
  Var traced(const char* name, const Var& in, F&& f) {
    Var out = f();
    const auto& si = in->value.shape();
    const auto& so = out->value.shape();
    trace_.push_back({name, {si[1], si[2], si[3]}, {so[1], so[2], so[3]}});
    return out;
  }

  NetworkConfig cfg_;
  Encoder encoder_;
  std::array<DecoderStage, 5> dec_;
  ConvBnRelu stem_skip_;
  SegmentationHead np_head_, hv_head_, nt_head_;
  TissueHead tissue_;
  std::vector<LayerTrace> trace_;
};

}  // namespace nulite
