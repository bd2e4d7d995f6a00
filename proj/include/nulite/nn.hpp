#pragma once

#include <functional>
#include <string>

#include "nulite/conv.hpp"
#include "nulite/ops.hpp"

namespace nulite {

// Walks a module tree. `param` receives trainable tensors, `buffer` receives
// persistent non-trainable state (BN running stats and counters).
struct StateVisitor {
  std::function<void(const std::string&, Var&)> param;
  std::function<void(const std::string&, Tensor&)> buffer;
};

// Static complexity accumulator. MACs follow the convention: one
// multiply-accumulate = one FLOP; conv = K^2*Cin*Cout*Hout*Wout (grouped
// convs divide by groups), transposed conv uses the same formula on its
// output size, attention counts QKV/proj projections plus the two
// score/value batched products. Norms and activations count zero.
struct NetStats {
  double macs = 0;
  double activation_elems = 0;  // forward output elements, batch 1

  void layer(double layer_macs, double out_elems) {
    macs += layer_macs;
    activation_elems += out_elems;
  }
};

inline Var make_param(Tensor t) { return make_var(std::move(t), true); }

struct Conv2d {
  Var weight;  // [Cout, Cin/groups, k, k]
  Var bias;    // optional
  ConvGeom geom;
  int64_t in_ch = 0, out_ch = 0;
  int kernel = 1;

  Conv2d() = default;
  Conv2d(int64_t cin, int64_t cout, int k, int stride, int pad, int groups, bool with_bias)
      : geom{stride, pad, groups}, in_ch(cin), out_ch(cout), kernel(k) {
    weight = make_param(Tensor({cout, cin / groups, k, k}));
    if (with_bias) bias = make_param(Tensor({cout}));
  }

  Var forward(const Var& x) const { return conv2d(x, weight, bias, geom); }

  void visit(const std::string& prefix, const StateVisitor& v) {
    v.param(prefix + ".weight", weight);
    if (bias) v.param(prefix + ".bias", bias);
  }

  void init(Rng& rng) {
    // fan-out normal for conv kernels, following the usual conv-net recipe
    int64_t fan_out = out_ch * kernel * kernel / geom.groups;
    float std = std::sqrt(2.f / float(fan_out));
    for (int64_t i = 0; i < weight->value.numel(); ++i)
      weight->value[i] = rand_normal(rng, 0.f, std);
    if (bias) bias->value.fill(0.f);
  }

  int64_t out_dim(int64_t in) const { return conv_out_dim(in, kernel, geom.stride, geom.pad); }

  void tally(int64_t h, int64_t w, NetStats& s) const {
    int64_t ho = out_dim(h), wo = out_dim(w);
    double macs = double(kernel) * kernel * double(in_ch / geom.groups) * double(out_ch) *
                  double(ho) * double(wo);
    s.layer(macs, double(out_ch) * ho * wo);
  }
};

struct ConvTranspose2d {
  Var weight;  // [Cin, Cout, k, k]
  Var bias;
  int kernel = 2, stride = 2;
  int64_t in_ch = 0, out_ch = 0;

  ConvTranspose2d() = default;
  ConvTranspose2d(int64_t cin, int64_t cout, int k, int s)
      : kernel(k), stride(s), in_ch(cin), out_ch(cout) {
    weight = make_param(Tensor({cin, cout, k, k}));
    bias = make_param(Tensor({cout}));
  }

  Var forward(const Var& x) const { return conv_transpose2d(x, weight, bias, stride); }

  void visit(const std::string& prefix, const StateVisitor& v) {
    v.param(prefix + ".weight", weight);
    v.param(prefix + ".bias", bias);
  }

  void init(Rng& rng) {
    int64_t fan_out = out_ch * kernel * kernel;
    float std = std::sqrt(2.f / float(fan_out));
    for (int64_t i = 0; i < weight->value.numel(); ++i)
      weight->value[i] = rand_normal(rng, 0.f, std);
    bias->value.fill(0.f);
  }

  int64_t out_dim(int64_t in) const { return (in - 1) * stride + kernel; }

  void tally(int64_t h, int64_t w, NetStats& s) const {
    int64_t ho = out_dim(h), wo = out_dim(w);
    double macs = double(kernel) * kernel * double(in_ch) * double(out_ch) * double(ho) *
                  double(wo);
    s.layer(macs, double(out_ch) * ho * wo);
  }
};

struct BatchNorm2d {
  Var gamma, beta;
  Tensor running_mean, running_var;
  Tensor batches_tracked;  // single counter, kept as a buffer for checkpoints
  float eps = 1e-5f;
  float momentum = 0.1f;
  int64_t channels = 0;

  BatchNorm2d() = default;
  explicit BatchNorm2d(int64_t c) : channels(c) {
    gamma = make_param(Tensor::full({c}, 1.f));
    beta = make_param(Tensor({c}));
    running_mean = Tensor({c});
    running_var = Tensor::full({c}, 1.f);
    batches_tracked = Tensor({1});
  }

  bool stats_populated() const { return batches_tracked[0] > 0.f; }

  Var forward(const Var& x, bool training) {
    const auto& s = x->value.shape();
    int64_t N = s[0], C = s[1], HW = s[2] * s[3];
    if (C != channels) throw std::invalid_argument("BatchNorm2d: channel mismatch");
    Tensor mean({C}), var({C});
    if (training) {
      const int64_t count = N * HW;
      for (int64_t c = 0; c < C; ++c) {
        double m = 0;
        for (int64_t n = 0; n < N; ++n) {
          const float* p = x->value.data() + (n * C + c) * HW;
          for (int64_t i = 0; i < HW; ++i) m += p[i];
        }
        m /= count;
        double v = 0;
        for (int64_t n = 0; n < N; ++n) {
          const float* p = x->value.data() + (n * C + c) * HW;
          for (int64_t i = 0; i < HW; ++i) {
            double d = p[i] - m;
            v += d * d;
          }
        }
        mean[c] = float(m);
        var[c] = float(v / count);  // biased, used for normalization
        double unbiased = count > 1 ? v / (count - 1) : v;
        running_mean[c] = (1.f - momentum) * running_mean[c] + momentum * float(m);
        running_var[c] = (1.f - momentum) * running_var[c] + momentum * float(unbiased);
      }
      batches_tracked[0] += 1.f;
    } else {
      mean = running_mean.clone();
      var = running_var.clone();
    }

    Tensor out(s);
    Tensor inv_std({C});
    for (int64_t c = 0; c < C; ++c) inv_std[c] = 1.f / std::sqrt(var[c] + eps);
    for (int64_t n = 0; n < N; ++n)
      for (int64_t c = 0; c < C; ++c) {
        const float g = gamma->value[c] * inv_std[c];
        const float b = beta->value[c] - mean[c] * g;
        const float* px = x->value.data() + (n * C + c) * HW;
        float* po = out.data() + (n * C + c) * HW;
        for (int64_t i = 0; i < HW; ++i) po[i] = px[i] * g + b;
      }

    Var vx = x, vg = gamma, vb = beta;
    Tensor mean_c = std::move(mean), inv_c = std::move(inv_std);
    return make_op(std::move(out), {x, gamma, beta},
                   [vx, vg, vb, mean_c, inv_c, N, C, HW, training](Node& n) {
      // xhat recomputed from cached mean / inv_std
      std::vector<double> sum_gy(size_t(C), 0.0), sum_gy_xhat(size_t(C), 0.0);
      for (int64_t b2 = 0; b2 < N; ++b2)
        for (int64_t c = 0; c < C; ++c) {
          const float* gy = n.grad.data() + (b2 * C + c) * HW;
          const float* px = vx->value.data() + (b2 * C + c) * HW;
          double s1 = 0, s2 = 0;
          for (int64_t i = 0; i < HW; ++i) {
            s1 += gy[i];
            s2 += double(gy[i]) * (px[i] - mean_c[c]) * inv_c[c];
          }
          sum_gy[size_t(c)] += s1;
          sum_gy_xhat[size_t(c)] += s2;
        }
      if (vg->requires_grad)
        for (int64_t c = 0; c < C; ++c) vg->ensure_grad()[c] += float(sum_gy_xhat[size_t(c)]);
      if (vb->requires_grad)
        for (int64_t c = 0; c < C; ++c) vb->ensure_grad()[c] += float(sum_gy[size_t(c)]);
      if (vx->requires_grad) {
        Tensor& gx = vx->ensure_grad();
        const double count = double(N) * HW;
        for (int64_t b2 = 0; b2 < N; ++b2)
          for (int64_t c = 0; c < C; ++c) {
            const float* gy = n.grad.data() + (b2 * C + c) * HW;
            const float* px = vx->value.data() + (b2 * C + c) * HW;
            float* pg = gx.data() + (b2 * C + c) * HW;
            const float gs = vg->value[c] * inv_c[c];
            if (training) {
              const float mg = float(sum_gy[size_t(c)] / count);
              const float mgx = float(sum_gy_xhat[size_t(c)] / count);
              for (int64_t i = 0; i < HW; ++i) {
                float xhat = (px[i] - mean_c[c]) * inv_c[c];
                pg[i] += gs * (gy[i] - mg - xhat * mgx);
              }
            } else {
              for (int64_t i = 0; i < HW; ++i) pg[i] += gs * gy[i];
            }
          }
      }
    });
  }

  void visit(const std::string& prefix, const StateVisitor& v) {
    v.param(prefix + ".weight", gamma);
    v.param(prefix + ".bias", beta);
    v.buffer(prefix + ".running_mean", running_mean);
    v.buffer(prefix + ".running_var", running_var);
    v.buffer(prefix + ".num_batches_tracked", batches_tracked);
  }
};

// Per-position normalization over the channel dim of [N,C,H,W].
struct LayerNorm2d {
  Var gamma, beta;
  float eps = 1e-6f;
  int64_t channels = 0;

  LayerNorm2d() = default;
  explicit LayerNorm2d(int64_t c) : channels(c) {
    gamma = make_param(Tensor::full({c}, 1.f));
    beta = make_param(Tensor({c}));
  }

  Var forward(const Var& x) const {
    const auto& s = x->value.shape();
    int64_t N = s[0], C = s[1], HW = s[2] * s[3];
    Tensor out(s);
    Tensor inv_std({N, 1, s[2], s[3]}), mean({N, 1, s[2], s[3]});
    for (int64_t n = 0; n < N; ++n) {
      const float* px = x->value.data() + n * C * HW;
      for (int64_t i = 0; i < HW; ++i) {
        double m = 0;
        for (int64_t c = 0; c < C; ++c) m += px[c * HW + i];
        m /= C;
        double v = 0;
        for (int64_t c = 0; c < C; ++c) {
          double d = px[c * HW + i] - m;
          v += d * d;
        }
        float is = 1.f / std::sqrt(float(v / C) + eps);
        mean[n * HW + i] = float(m);
        inv_std[n * HW + i] = is;
        for (int64_t c = 0; c < C; ++c)
          out[(n * C + c) * HW + i] =
              (px[c * HW + i] - float(m)) * is * gamma->value[c] + beta->value[c];
      }
    }
    Var vx = x, vg = gamma, vb = beta;
    Tensor mc = std::move(mean), ic = std::move(inv_std);
    return make_op(std::move(out), {x, gamma, beta}, [vx, vg, vb, mc, ic, N, C, HW](Node& n) {
      for (int64_t b = 0; b < N; ++b) {
        const float* px = vx->value.data() + b * C * HW;
        const float* gy = n.grad.data() + b * C * HW;
        for (int64_t i = 0; i < HW; ++i) {
          const float m = mc[b * HW + i], is = ic[b * HW + i];
          double dot_g = 0, dot_gx = 0;
          for (int64_t c = 0; c < C; ++c) {
            float xhat = (px[c * HW + i] - m) * is;
            float gyg = gy[c * HW + i] * vg->value[c];
            dot_g += gyg;
            dot_gx += double(gyg) * xhat;
            if (vg->requires_grad) vg->ensure_grad()[c] += gy[c * HW + i] * xhat;
            if (vb->requires_grad) vb->ensure_grad()[c] += gy[c * HW + i];
          }
          if (vx->requires_grad) {
            Tensor& gx = vx->ensure_grad();
            for (int64_t c = 0; c < C; ++c) {
              float xhat = (px[c * HW + i] - m) * is;
              float gyg = gy[c * HW + i] * vg->value[c];
              gx[(b * C + c) * HW + i] +=
                  is * (gyg - float(dot_g) / C - xhat * float(dot_gx) / C);
            }
          }
        }
      }
    });
  }

  void visit(const std::string& prefix, const StateVisitor& v) {
    v.param(prefix + ".weight", gamma);
    v.param(prefix + ".bias", beta);
  }
};

struct Linear {
  Var weight;  // [out, in]
  Var bias;    // [out]
  int64_t in_f = 0, out_f = 0;

  Linear() = default;
  Linear(int64_t in, int64_t out, bool with_bias = true) : in_f(in), out_f(out) {
    weight = make_param(Tensor({out, in}));
    if (with_bias) bias = make_param(Tensor({out}));
  }

  // x [N, in] -> [N, out]
  Var forward(const Var& x) const {
    int64_t N = x->value.dim(0);
    Tensor out({N, out_f});
    cblas_sgemm(CblasRowMajor, CblasNoTrans, CblasTrans, int(N), int(out_f), int(in_f), 1.f,
                x->value.data(), int(in_f), weight->value.data(), int(in_f), 0.f, out.data(),
                int(out_f));
    if (bias)
      for (int64_t n = 0; n < N; ++n)
        for (int64_t o = 0; o < out_f; ++o) out[n * out_f + o] += bias->value[o];
    std::vector<Var> parents{x, weight};
    if (bias) parents.push_back(bias);
    Var vx = x, vw = weight, vb = bias;
    int64_t in = in_f, of = out_f;
    return make_op(std::move(out), std::move(parents), [vx, vw, vb, N, in, of](Node& n) {
      if (vx->requires_grad)
        cblas_sgemm(CblasRowMajor, CblasNoTrans, CblasNoTrans, int(N), int(in), int(of), 1.f,
                    n.grad.data(), int(of), vw->value.data(), int(in), 1.f,
                    vx->ensure_grad().data(), int(in));
      if (vw->requires_grad)
        cblas_sgemm(CblasRowMajor, CblasTrans, CblasNoTrans, int(of), int(in), int(N), 1.f,
                    n.grad.data(), int(of), vx->value.data(), int(in), 1.f,
                    vw->ensure_grad().data(), int(in));
      if (vb && vb->requires_grad) {
        Tensor& g = vb->ensure_grad();
        for (int64_t b = 0; b < N; ++b)
          for (int64_t o = 0; o < of; ++o) g[o] += n.grad[b * of + o];
      }
    });
  }

  void visit(const std::string& prefix, const StateVisitor& v) {
    v.param(prefix + ".weight", weight);
    if (bias) v.param(prefix + ".bias", bias);
  }

  void init(Rng& rng) {
    for (int64_t i = 0; i < weight->value.numel(); ++i)
      weight->value[i] = rand_trunc_normal(rng, 0.f, 0.02f);
    if (bias) bias->value.fill(0.f);
  }

  void tally(NetStats& s) const { s.layer(double(in_f) * out_f, double(out_f)); }
};

inline int64_t param_count(std::vector<Var>& params) {
  int64_t n = 0;
  for (auto& p : params) n += p->value.numel();
  return n;
}

}  // namespace nulite
