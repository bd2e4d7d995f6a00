#pragma once

#include "nulite/data.hpp"

namespace nulite {

struct AugmentParams {
  float rotate_p = 0.5f;
  float rotate_max_deg = 180.f;
  float flip_p = 0.5f;
  float elastic_p = 0.25f;
  float elastic_alpha = 30.f;
  float elastic_sigma = 5.f;
  float blur_p = 0.2f;
  int blur_kmax = 5;
  float noise_p = 0.2f;
  float noise_sigma = 0.05f;  // fraction of 255
  float jitter_p = 0.25f;
  float jitter = 0.1f;
  float superpixel_p = 0.1f;

  static AugmentParams off() { return AugmentParams{0, 180, 0, 0, 30, 5, 0, 5, 0, .05f, 0, .1f, 0}; }
};

namespace detail {

struct Warp {
  // inverse map: output pixel -> source coordinates
  std::vector<float> src_r, src_c;
  int64_t H = 0, W = 0;
};

inline void apply_warp(const Warp& w, AnnotatedImage& a) {
  const int64_t H = w.H, W = w.W;
  ImageU8 rgb = a.rgb;
  InstanceMap inst(H, W);
  std::vector<int> types(size_t(H * W), 0);
  ImageU8 out_rgb;
  out_rgb.height = H;
  out_rgb.width = W;
  out_rgb.channels = 3;
  out_rgb.data.assign(size_t(H * W * 3), 0);
  for (int64_t r = 0; r < H; ++r)
    for (int64_t c = 0; c < W; ++c) {
      float sr = w.src_r[size_t(r * W + c)];
      float sc = w.src_c[size_t(r * W + c)];
      if (sr < 0 || sr > float(H - 1) || sc < 0 || sc > float(W - 1)) continue;
      int64_t r0 = int64_t(std::floor(sr)), c0 = int64_t(std::floor(sc));
      float fr = sr - r0, fc = sc - c0;
      for (int ch = 0; ch < 3; ++ch) {
        auto px = [&](int64_t rr, int64_t cc) {
          rr = std::clamp<int64_t>(rr, 0, H - 1);
          cc = std::clamp<int64_t>(cc, 0, W - 1);
          return float(rgb.at(rr, cc, ch));
        };
        float v = (1 - fr) * ((1 - fc) * px(r0, c0) + fc * px(r0, c0 + 1)) +
                  fr * ((1 - fc) * px(r0 + 1, c0) + fc * px(r0 + 1, c0 + 1));
        out_rgb.at(r, c, ch) = uint8_t(std::clamp(v + 0.5f, 0.f, 255.f));
      }
      int64_t nr = std::clamp<int64_t>(int64_t(std::lround(sr)), 0, H - 1);
      int64_t nc = std::clamp<int64_t>(int64_t(std::lround(sc)), 0, W - 1);
      inst.at(r, c) = a.inst.at(nr, nc);
      types[size_t(r * W + c)] = a.type_map[size_t(nr * W + nc)];
    }
  a.rgb = std::move(out_rgb);
  a.inst = std::move(inst);
  a.type_map = std::move(types);
}

inline std::vector<float> gaussian_kernel1d(float sigma, int radius) {
  std::vector<float> k(size_t(2 * radius + 1));
  float sum = 0;
  for (int i = -radius; i <= radius; ++i) {
    k[size_t(i + radius)] = std::exp(-0.5f * float(i) * i / (sigma * sigma));
    sum += k[size_t(i + radius)];
  }
  for (auto& v : k) v /= sum;
  return k;
}

inline void smooth_field(std::vector<float>& f, int64_t H, int64_t W, float sigma) {
  int radius = std::max(1, int(std::ceil(3 * sigma)));
  auto k = gaussian_kernel1d(sigma, radius);
  std::vector<float> tmp(f.size());
  for (int64_t r = 0; r < H; ++r)
    for (int64_t c = 0; c < W; ++c) {
      float acc = 0;
      for (int i = -radius; i <= radius; ++i) {
        int64_t cc = std::clamp<int64_t>(c + i, 0, W - 1);
        acc += k[size_t(i + radius)] * f[size_t(r * W + cc)];
      }
      tmp[size_t(r * W + c)] = acc;
    }
  for (int64_t r = 0; r < H; ++r)
    for (int64_t c = 0; c < W; ++c) {
      float acc = 0;
      for (int i = -radius; i <= radius; ++i) {
        int64_t rr = std::clamp<int64_t>(r + i, 0, H - 1);
        acc += k[size_t(i + radius)] * tmp[size_t(rr * W + c)];
      }
      f[size_t(r * W + c)] = acc;
    }
}

}  // namespace detail

// Geometric transforms hit image and label maps identically (bilinear vs
// nearest); photometric transforms touch the RGB only. Instances clipped away
// by a transform disappear from all maps; callers regenerate HV targets from
// the transformed instance map afterwards.
inline AnnotatedImage augment(const AnnotatedImage& input, const AugmentParams& p, Rng& rng) {
  AnnotatedImage a = input;
  const int64_t H = a.inst.height, W = a.inst.width;

  bool flip_h = p.flip_p > 0 && rand_uniform(rng, 0, 1) < p.flip_p;
  bool flip_v = p.flip_p > 0 && rand_uniform(rng, 0, 1) < p.flip_p;
  bool do_rot = p.rotate_p > 0 && rand_uniform(rng, 0, 1) < p.rotate_p;
  float angle = do_rot ? rand_uniform(rng, -p.rotate_max_deg, p.rotate_max_deg) : 0.f;
  bool do_elastic = p.elastic_p > 0 && rand_uniform(rng, 0, 1) < p.elastic_p;

  if (flip_h || flip_v || do_rot || do_elastic) {
    detail::Warp w;
    w.H = H;
    w.W = W;
    w.src_r.resize(size_t(H * W));
    w.src_c.resize(size_t(H * W));
    std::vector<float> dr, dc;
    if (do_elastic) {
      dr.resize(size_t(H * W));
      dc.resize(size_t(H * W));
      for (auto& v : dr) v = rand_uniform(rng, -1.f, 1.f);
      for (auto& v : dc) v = rand_uniform(rng, -1.f, 1.f);
      detail::smooth_field(dr, H, W, p.elastic_sigma);
      detail::smooth_field(dc, H, W, p.elastic_sigma);
      for (auto& v : dr) v *= p.elastic_alpha;
      for (auto& v : dc) v *= p.elastic_alpha;
    }
    const float rad = angle * 3.14159265358979323846f / 180.f;
    const float ca = std::cos(rad), sa = std::sin(rad);
    const float cr = float(H - 1) / 2.f, cc = float(W - 1) / 2.f;
    for (int64_t r = 0; r < H; ++r)
      for (int64_t c = 0; c < W; ++c) {
        float rr = float(r), ccol = float(c);
        if (do_elastic) {
          rr += dr[size_t(r * W + c)];
          ccol += dc[size_t(r * W + c)];
        }
        if (do_rot) {
          float y = rr - cr, x = ccol - cc;
          // inverse rotation
          float ry = ca * y + sa * x;
          float rx = -sa * y + ca * x;
          rr = ry + cr;
          ccol = rx + cc;
        }
        if (flip_h) ccol = float(W - 1) - ccol;
        if (flip_v) rr = float(H - 1) - rr;
        w.src_r[size_t(r * W + c)] = rr;
        w.src_c[size_t(r * W + c)] = ccol;
      }
    detail::apply_warp(w, a);
    // drop relabeled-away instances and keep ids contiguous
    std::map<int32_t, int32_t> seen;
    int32_t next = 0;
    for (auto& id : a.inst.ids) {
      if (id <= 0) continue;
      auto it = seen.find(id);
      if (it == seen.end()) it = seen.emplace(id, ++next).first;
      id = it->second;
    }
  }

  if (p.blur_p > 0 && rand_uniform(rng, 0, 1) < p.blur_p) {
    int k = 1 + 2 * int(rand_uniform(rng, 1.f, float(p.blur_kmax) / 2 + 0.999f));
    k = std::min(k, p.blur_kmax | 1);
    float sigma = float(k) / 3.f;
    auto kern = detail::gaussian_kernel1d(sigma, k / 2);
    ImageU8 tmp = a.rgb;
    for (int pass = 0; pass < 2; ++pass) {
      ImageU8 src = a.rgb;
      for (int64_t r = 0; r < H; ++r)
        for (int64_t c = 0; c < W; ++c)
          for (int ch = 0; ch < 3; ++ch) {
            float acc = 0;
            for (int i = -k / 2; i <= k / 2; ++i) {
              int64_t rr = pass == 0 ? r : std::clamp<int64_t>(r + i, 0, H - 1);
              int64_t cc = pass == 0 ? std::clamp<int64_t>(c + i, 0, W - 1) : c;
              acc += kern[size_t(i + k / 2)] * src.at(rr, cc, ch);
            }
            a.rgb.at(r, c, ch) = uint8_t(std::clamp(acc + 0.5f, 0.f, 255.f));
          }
    }
    (void)tmp;
  }

  if (p.noise_p > 0 && rand_uniform(rng, 0, 1) < p.noise_p) {
    float sigma = p.noise_sigma * 255.f;
    for (auto& v : a.rgb.data)
      v = uint8_t(std::clamp(float(v) + rand_normal(rng, 0.f, sigma), 0.f, 255.f));
  }

  if (p.jitter_p > 0 && rand_uniform(rng, 0, 1) < p.jitter_p) {
    for (int ch = 0; ch < 3; ++ch) {
      float scale = 1.f + rand_uniform(rng, -p.jitter, p.jitter);
      float shift = rand_uniform(rng, -p.jitter, p.jitter) * 255.f * 0.5f;
      for (int64_t i = 0; i < H * W; ++i) {
        float v = float(a.rgb.data[size_t(i * 3 + ch)]) * scale + shift;
        a.rgb.data[size_t(i * 3 + ch)] = uint8_t(std::clamp(v, 0.f, 255.f));
      }
    }
  }

  if (p.superpixel_p > 0 && rand_uniform(rng, 0, 1) < p.superpixel_p) {
    // grid superpixels; each cell replaced by its mean color with prob 0.5
    const int64_t cell = 8;
    for (int64_t r0 = 0; r0 < H; r0 += cell)
      for (int64_t c0 = 0; c0 < W; c0 += cell) {
        if (rand_uniform(rng, 0, 1) >= 0.5f) continue;
        int64_t r1 = std::min(H, r0 + cell), c1 = std::min(W, c0 + cell);
        float mean[3] = {0, 0, 0};
        int64_t n = (r1 - r0) * (c1 - c0);
        for (int64_t r = r0; r < r1; ++r)
          for (int64_t c = c0; c < c1; ++c)
            for (int ch = 0; ch < 3; ++ch) mean[ch] += a.rgb.at(r, c, ch);
        for (int64_t r = r0; r < r1; ++r)
          for (int64_t c = c0; c < c1; ++c)
            for (int ch = 0; ch < 3; ++ch)
              a.rgb.at(r, c, ch) = uint8_t(std::clamp(mean[ch] / n + 0.5f, 0.f, 255.f));
      }
  }

  return a;
}

}  // namespace nulite
