#pragma once

#include "nulite/nn.hpp"

namespace nulite {

// Multi-head self-attention over spatial tokens of [N,C,H,W].
// qkv projection has no bias, output projection does.
struct MHSA {
  Var wqkv;   // [3C, C]
  Var wproj;  // [C, C]
  Var bproj;  // [C]
  int num_heads = 1;
  int64_t dim = 0;

  MHSA() = default;
  MHSA(int64_t c, int head_dim) : num_heads(int(c / head_dim)), dim(c) {
    if (c % head_dim != 0) throw std::invalid_argument("MHSA: dim not divisible by head_dim");
    wqkv = make_param(Tensor({3 * c, c}));
    wproj = make_param(Tensor({c, c}));
    bproj = make_param(Tensor({c}));
  }

  void init(Rng& rng) {
    for (int64_t i = 0; i < wqkv->value.numel(); ++i)
      wqkv->value[i] = rand_trunc_normal(rng, 0.f, 0.02f);
    for (int64_t i = 0; i < wproj->value.numel(); ++i)
      wproj->value[i] = rand_trunc_normal(rng, 0.f, 0.02f);
    bproj->value.fill(0.f);
  }

  void visit(const std::string& prefix, const StateVisitor& v) {
    v.param(prefix + ".qkv.weight", wqkv);
    v.param(prefix + ".proj.weight", wproj);
    v.param(prefix + ".proj.bias", bproj);
  }

  Var forward(const Var& x) const {
    const auto& s = x->value.shape();
    const int64_t N = s[0], C = s[1], H = s[2], W = s[3], T = H * W;
    if (C != dim) throw std::invalid_argument("MHSA: channel mismatch");
    const int64_t dh = C / num_heads;
    const float scale = 1.f / std::sqrt(float(dh));
    const bool need_grad = any_requires_grad({&x, &wqkv, &wproj, &bproj});

    Tensor out(s);
    // caches kept only when grads are needed
    auto qkv_cache = std::make_shared<std::vector<Tensor>>();
    auto p_cache = std::make_shared<std::vector<Tensor>>();  // [heads*T*T] per sample
    auto o_cache = std::make_shared<std::vector<Tensor>>();

    std::vector<float> tok(size_t(T * C), 0.f);
    std::vector<float> y(size_t(T * C), 0.f);
    std::vector<float> scores(size_t(T * T), 0.f);
    for (int64_t n = 0; n < N; ++n) {
      const float* px = x->value.data() + n * C * T;
      for (int64_t c = 0; c < C; ++c)
        for (int64_t t = 0; t < T; ++t) tok[size_t(t * C + c)] = px[c * T + t];

      Tensor qkv({T, 3 * C});
      cblas_sgemm(CblasRowMajor, CblasNoTrans, CblasTrans, int(T), int(3 * C), int(C), 1.f,
                  tok.data(), int(C), wqkv->value.data(), int(C), 0.f, qkv.data(),
                  int(3 * C));

      Tensor o({T, C});
      Tensor p_all = need_grad ? Tensor({int64_t(num_heads), T, T}) : Tensor();
      for (int h = 0; h < num_heads; ++h) {
        const float* q = qkv.data() + h * dh;
        const float* k = qkv.data() + C + h * dh;
        const float* v = qkv.data() + 2 * C + h * dh;
        cblas_sgemm(CblasRowMajor, CblasNoTrans, CblasTrans, int(T), int(T), int(dh), scale, q,
                    int(3 * C), k, int(3 * C), 0.f, scores.data(), int(T));
        for (int64_t r = 0; r < T; ++r) {
          float* row = scores.data() + r * T;
          float m = row[0];
          for (int64_t j = 1; j < T; ++j) m = std::max(m, row[j]);
          float z = 0.f;
          for (int64_t j = 0; j < T; ++j) {
            row[j] = std::exp(row[j] - m);
            z += row[j];
          }
          float inv = 1.f / z;
          for (int64_t j = 0; j < T; ++j) row[j] *= inv;
        }
        if (need_grad)
          std::memcpy(p_all.data() + int64_t(h) * T * T, scores.data(),
                      sizeof(float) * size_t(T * T));
        cblas_sgemm(CblasRowMajor, CblasNoTrans, CblasNoTrans, int(T), int(dh), int(T), 1.f,
                    scores.data(), int(T), v, int(3 * C), 0.f, o.data() + h * dh, int(C));
      }

      cblas_sgemm(CblasRowMajor, CblasNoTrans, CblasTrans, int(T), int(C), int(C), 1.f,
                  o.data(), int(C), wproj->value.data(), int(C), 0.f, y.data(), int(C));
      float* po = out.data() + n * C * T;
      for (int64_t c = 0; c < C; ++c) {
        const float b = bproj->value[c];
        for (int64_t t = 0; t < T; ++t) po[c * T + t] = y[size_t(t * C + c)] + b;
      }
      if (need_grad) {
        qkv_cache->push_back(std::move(qkv));
        p_cache->push_back(std::move(p_all));
        o_cache->push_back(std::move(o));
      }
    }

    Var vx = x, vq = wqkv, vp = wproj, vb = bproj;
    int heads = num_heads;
    return make_op(std::move(out), {x, wqkv, wproj, bproj},
                   [vx, vq, vp, vb, qkv_cache, p_cache, o_cache, N, C, T, dh, heads,
                    scale](Node& n) {
      std::vector<float> tok(size_t(T * C), 0.f), dy(size_t(T * C), 0.f), dO(size_t(T * C), 0.f);
      std::vector<float> dqkv(size_t(T * 3 * C), 0.f), dx(size_t(T * C), 0.f);
      std::vector<float> dp(size_t(T * T), 0.f), ds(size_t(T * T), 0.f);
      for (int64_t b = 0; b < N; ++b) {
        const Tensor& qkv = (*qkv_cache)[size_t(b)];
        const Tensor& p_all = (*p_cache)[size_t(b)];
        const Tensor& o = (*o_cache)[size_t(b)];
        const float* gy = n.grad.data() + b * C * T;
        const float* px = vx->value.data() + b * C * T;
        for (int64_t c = 0; c < C; ++c)
          for (int64_t t = 0; t < T; ++t) {
            dy[size_t(t * C + c)] = gy[c * T + t];
            tok[size_t(t * C + c)] = px[c * T + t];
          }
        if (vb->requires_grad) {
          Tensor& g = vb->ensure_grad();
          for (int64_t t = 0; t < T; ++t)
            for (int64_t c = 0; c < C; ++c) g[c] += dy[size_t(t * C + c)];
        }
        if (vp->requires_grad)
          cblas_sgemm(CblasRowMajor, CblasTrans, CblasNoTrans, int(C), int(C), int(T), 1.f,
                      dy.data(), int(C), o.data(), int(C), 1.f, vp->ensure_grad().data(),
                      int(C));
        cblas_sgemm(CblasRowMajor, CblasNoTrans, CblasNoTrans, int(T), int(C), int(C), 1.f,
                    dy.data(), int(C), vp->value.data(), int(C), 0.f, dO.data(), int(C));

        for (int h = 0; h < heads; ++h) {
          const float* q = qkv.data() + h * dh;
          const float* k = qkv.data() + C + h * dh;
          const float* v = qkv.data() + 2 * C + h * dh;
          const float* p = p_all.data() + int64_t(h) * T * T;
          // dV = P^T dO_h
          cblas_sgemm(CblasRowMajor, CblasTrans, CblasNoTrans, int(T), int(dh), int(T), 1.f, p,
                      int(T), dO.data() + h * dh, int(C), 0.f, dqkv.data() + 2 * C + h * dh,
                      int(3 * C));
          // dP = dO_h V^T
          cblas_sgemm(CblasRowMajor, CblasNoTrans, CblasTrans, int(T), int(T), int(dh), 1.f,
                      dO.data() + h * dh, int(C), v, int(3 * C), 0.f, dp.data(), int(T));
          for (int64_t r = 0; r < T; ++r) {
            const float* prow = p + r * T;
            const float* dprow = dp.data() + r * T;
            float dot = 0.f;
            for (int64_t j = 0; j < T; ++j) dot += prow[j] * dprow[j];
            float* dsrow = ds.data() + r * T;
            for (int64_t j = 0; j < T; ++j)
              dsrow[j] = scale * prow[j] * (dprow[j] - dot);
          }
          // dQ = dS K, dK = dS^T Q
          cblas_sgemm(CblasRowMajor, CblasNoTrans, CblasNoTrans, int(T), int(dh), int(T), 1.f,
                      ds.data(), int(T), k, int(3 * C), 0.f, dqkv.data() + h * dh,
                      int(3 * C));
          cblas_sgemm(CblasRowMajor, CblasTrans, CblasNoTrans, int(T), int(dh), int(T), 1.f,
                      ds.data(), int(T), q, int(3 * C), 0.f, dqkv.data() + C + h * dh,
                      int(3 * C));
        }
        if (vq->requires_grad)
          cblas_sgemm(CblasRowMajor, CblasTrans, CblasNoTrans, int(3 * C), int(C), int(T), 1.f,
                      dqkv.data(), int(3 * C), tok.data(), int(C), 1.f,
                      vq->ensure_grad().data(), int(C));
        if (vx->requires_grad) {
          cblas_sgemm(CblasRowMajor, CblasNoTrans, CblasNoTrans, int(T), int(C), int(3 * C),
                      1.f, dqkv.data(), int(3 * C), vq->value.data(), int(C), 0.f, dx.data(),
                      int(C));
          Tensor& gx = vx->ensure_grad();
          float* pg = gx.data() + b * C * T;
          for (int64_t c = 0; c < C; ++c)
            for (int64_t t = 0; t < T; ++t) pg[c * T + t] += dx[size_t(t * C + c)];
        }
      }
    });
  }

  void tally(int64_t h, int64_t w, NetStats& s) const {
    double T = double(h) * w;
    double qkv = T * 3.0 * dim * dim;
    double attn = 2.0 * T * T * dim;  // QK^T and PV across all heads
    double proj = T * double(dim) * dim;
    s.layer(qkv + attn + proj, T * dim);
  }
};

}  // namespace nulite
