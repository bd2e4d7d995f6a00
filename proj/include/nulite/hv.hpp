#pragma once

#include <map>

#include "nulite/tensor.hpp"

namespace nulite {

// Instance label image: 0 = background, k > 0 = nucleus instance id.
struct InstanceMap {
  int64_t height = 0, width = 0;
  std::vector<int32_t> ids;  // row-major

  InstanceMap() = default;
  InstanceMap(int64_t h, int64_t w) : height(h), width(w), ids(size_t(h * w), 0) {}

  int32_t& at(int64_t r, int64_t c) { return ids[size_t(r * width + c)]; }
  int32_t at(int64_t r, int64_t c) const { return ids[size_t(r * width + c)]; }
  int64_t numel() const { return height * width; }

  int32_t max_id() const {
    int32_t m = 0;
    for (int32_t v : ids) m = std::max(m, v);
    return m;
  }
};

// Per-instance horizontal/vertical maps: centroid-relative coordinates,
// rescaled per instance so the extreme pixels hit -1 and +1; background 0.
// Output [2,H,W], channel 0 horizontal, channel 1 vertical.
inline Tensor make_hv_target(const InstanceMap& inst) {
  const int64_t H = inst.height, W = inst.width;
  Tensor hv({2, H, W});

  struct Box {
    int64_t rmin = INT64_MAX, rmax = -1, cmin = INT64_MAX, cmax = -1;
    double rsum = 0, csum = 0;
    int64_t area = 0;
  };
  std::map<int32_t, Box> boxes;
  for (int64_t r = 0; r < H; ++r)
    for (int64_t c = 0; c < W; ++c) {
      int32_t id = inst.at(r, c);
      if (id <= 0) continue;
      Box& b = boxes[id];
      b.rmin = std::min(b.rmin, r);
      b.rmax = std::max(b.rmax, r);
      b.cmin = std::min(b.cmin, c);
      b.cmax = std::max(b.cmax, c);
      b.rsum += double(r);
      b.csum += double(c);
      b.area += 1;
    }

  for (int64_t r = 0; r < H; ++r)
    for (int64_t c = 0; c < W; ++c) {
      int32_t id = inst.at(r, c);
      if (id <= 0) continue;
      const Box& b = boxes[id];
      double cc = b.csum / b.area;
      double rc = b.rsum / b.area;
      double dx = double(c) - cc;
      double dy = double(r) - rc;
      double left = cc - b.cmin, right = b.cmax - cc;
      double up = rc - b.rmin, down = b.rmax - rc;
      float h = 0.f, v = 0.f;
      if (dx < 0 && left > 0) h = float(dx / left);
      else if (dx > 0 && right > 0) h = float(dx / right);
      if (dy < 0 && up > 0) v = float(dy / up);
      else if (dy > 0 && down > 0) v = float(dy / down);
      hv[0 * H * W + r * W + c] = h;
      hv[1 * H * W + r * W + c] = v;
    }
  return hv;
}

// Five-tap central-difference kernel shared by the HV gradient loss and the
// watershed energy: [1, -8, 0, 8, -1]/12 along the derivative axis, embedded
// in 5x5 depthwise kernels (channel 0 horizontal, channel 1 vertical).
inline Tensor hv_gradient_kernel() {
  Tensor k({2, 1, 5, 5});
  const float c[5] = {1.f / 12.f, -8.f / 12.f, 0.f, 8.f / 12.f, -1.f / 12.f};
  for (int i = 0; i < 5; ++i) {
    k.at({0, 0, 2, i}) = c[i];  // d/dx on the horizontal channel
    k.at({1, 0, i, 2}) = c[i];  // d/dy on the vertical channel
  }
  return k;
}

// Plain-tensor evaluation with reflection padding: hv [2,H,W] -> [2,H,W]
// (channel 0: d/dx of hv_x, channel 1: d/dy of hv_y).
inline Tensor hv_gradients(const Tensor& hv) {
  const int64_t H = hv.dim(1), W = hv.dim(2);
  Tensor out({2, H, W});
  const float c[5] = {1.f / 12.f, -8.f / 12.f, 0.f, 8.f / 12.f, -1.f / 12.f};
  auto reflect = [](int64_t i, int64_t n) {
    if (i < 0) return -i;
    if (i >= n) return 2 * n - 2 - i;
    return i;
  };
  for (int64_t r = 0; r < H; ++r)
    for (int64_t cc = 0; cc < W; ++cc) {
      float gx = 0.f, gy = 0.f;
      for (int t = -2; t <= 2; ++t) {
        gx += c[t + 2] * hv[0 * H * W + r * W + reflect(cc + t, W)];
        gy += c[t + 2] * hv[1 * H * W + reflect(r + t, H) * W + cc];
      }
      out[0 * H * W + r * W + cc] = gx;
      out[1 * H * W + r * W + cc] = gy;
    }
  return out;
}

}  // namespace nulite
