#pragma once

#include <limits>
#include <queue>

#include "nulite/hv.hpp"

namespace nulite {

struct PostprocessParams {
  float np_threshold = 0.5f;
  float energy_threshold = 0.4f;
  int min_object_px = 10;
  int min_marker_px = 10;
  int connectivity = 8;  // 4 or 8

  void validate() const {
    if (!(np_threshold > 0.f && np_threshold < 1.f))
      throw std::invalid_argument("np_threshold must be in (0,1)");
    if (!(energy_threshold > 0.f && energy_threshold < 1.f))
      throw std::invalid_argument("energy_threshold must be in (0,1)");
    if (min_object_px < 0 || min_marker_px < 0)
      throw std::invalid_argument("min sizes must be >= 0");
    if (connectivity != 4 && connectivity != 8)
      throw std::invalid_argument("connectivity must be 4 or 8");
  }
};

struct TypedNucleus {
  int32_t id = 0;
  int class_id = 0;  // 1..C-1, never background
  float class_prob = 0.f;
  double centroid_r = 0, centroid_c = 0;
  int64_t r0 = 0, c0 = 0, r1 = 0, c1 = 0;  // inclusive bounds
  int64_t area_px = 0;
};

// Per-image network outputs as plain tensors.
struct OutputMaps {
  Tensor np_logits;  // [2,H,W]
  Tensor hv;         // [2,H,W]
  Tensor nt_logits;  // [C,H,W]
};

namespace detail {

inline int neighbor_offsets(int connectivity, int dr[8], int dc[8]) {
  static const int r8[8] = {-1, -1, -1, 0, 0, 1, 1, 1};
  static const int c8[8] = {-1, 0, 1, -1, 1, -1, 0, 1};
  static const int r4[4] = {-1, 0, 0, 1};
  static const int c4[4] = {0, -1, 1, 0};
  int n = connectivity == 8 ? 8 : 4;
  for (int i = 0; i < n; ++i) {
    dr[i] = connectivity == 8 ? r8[i] : r4[i];
    dc[i] = connectivity == 8 ? c8[i] : c4[i];
  }
  return n;
}

}  // namespace detail

// Row-major-discovery connected components of a binary mask; labels 1..N.
inline InstanceMap connected_components(const std::vector<uint8_t>& mask, int64_t H, int64_t W,
                                        int connectivity) {
  InstanceMap out(H, W);
  int dr[8], dc[8];
  const int nn = detail::neighbor_offsets(connectivity, dr, dc);
  int32_t next = 0;
  std::vector<int64_t> stack;
  for (int64_t r = 0; r < H; ++r)
    for (int64_t c = 0; c < W; ++c) {
      int64_t i = r * W + c;
      if (!mask[size_t(i)] || out.ids[size_t(i)] != 0) continue;
      ++next;
      stack.push_back(i);
      out.ids[size_t(i)] = next;
      while (!stack.empty()) {
        int64_t p = stack.back();
        stack.pop_back();
        int64_t pr = p / W, pc = p % W;
        for (int k = 0; k < nn; ++k) {
          int64_t qr = pr + dr[k], qc = pc + dc[k];
          if (qr < 0 || qr >= H || qc < 0 || qc >= W) continue;
          int64_t q = qr * W + qc;
          if (mask[size_t(q)] && out.ids[size_t(q)] == 0) {
            out.ids[size_t(q)] = next;
            stack.push_back(q);
          }
        }
      }
    }
  return out;
}

inline std::vector<int64_t> component_areas(const InstanceMap& m) {
  std::vector<int64_t> areas(size_t(m.max_id()) + 1, 0);
  for (int32_t v : m.ids)
    if (v > 0) ++areas[size_t(v)];
  return areas;
}

// Relabel to contiguous 1..N preserving first-appearance (row-major) order.
inline InstanceMap relabel_sequential(const InstanceMap& m) {
  InstanceMap out(m.height, m.width);
  std::map<int32_t, int32_t> remap;
  int32_t next = 0;
  for (size_t i = 0; i < m.ids.size(); ++i) {
    int32_t v = m.ids[i];
    if (v <= 0) continue;
    auto it = remap.find(v);
    if (it == remap.end()) it = remap.emplace(v, ++next).first;
    out.ids[i] = it->second;
  }
  return out;
}

// NP thresholding, HV gradient energy, marker extraction and priority-flood
// watershed. Every post-threshold foreground pixel receives exactly one id;
// ids are numbered by row-major marker discovery.
inline InstanceMap instance_segment(const OutputMaps& maps, const PostprocessParams& params) {
  params.validate();
  const int64_t H = maps.np_logits.dim(1), W = maps.np_logits.dim(2);
  const int64_t HW = H * W;

  // foreground probability: softmax over the two NP channels
  std::vector<uint8_t> fg(size_t(HW), 0);
  for (int64_t i = 0; i < HW; ++i) {
    float a = maps.np_logits[i];        // background logit
    float b = maps.np_logits[HW + i];   // nucleus logit
    float m = std::max(a, b);
    float pb = std::exp(b - m) / (std::exp(a - m) + std::exp(b - m));
    fg[size_t(i)] = pb > params.np_threshold ? 1 : 0;
  }

  // drop small foreground components
  InstanceMap fg_cc = connected_components(fg, H, W, params.connectivity);
  {
    auto areas = component_areas(fg_cc);
    for (int64_t i = 0; i < HW; ++i)
      if (fg[size_t(i)] && areas[size_t(fg_cc.ids[size_t(i)])] < params.min_object_px) {
        fg[size_t(i)] = 0;
        fg_cc.ids[size_t(i)] = 0;
      }
  }

  // energy: per-image min-max normalized |dx hv_x|, |dy hv_y|, combined by max
  Tensor grads = hv_gradients(maps.hv);
  std::vector<float> energy(size_t(HW), 0.f);
  {
    float mn[2] = {std::numeric_limits<float>::max(), std::numeric_limits<float>::max()};
    float mx[2] = {std::numeric_limits<float>::lowest(), std::numeric_limits<float>::lowest()};
    for (int ch = 0; ch < 2; ++ch)
      for (int64_t i = 0; i < HW; ++i) {
        float v = std::abs(grads[ch * HW + i]);
        mn[ch] = std::min(mn[ch], v);
        mx[ch] = std::max(mx[ch], v);
      }
    for (int64_t i = 0; i < HW; ++i) {
      float sx = mx[0] > mn[0] ? (std::abs(grads[i]) - mn[0]) / (mx[0] - mn[0]) : 0.f;
      float sy = mx[1] > mn[1] ? (std::abs(grads[HW + i]) - mn[1]) / (mx[1] - mn[1]) : 0.f;
      energy[size_t(i)] = std::max(sx, sy);
    }
  }

  // markers: low-energy cores of the foreground
  std::vector<uint8_t> low(size_t(HW), 0);
  for (int64_t i = 0; i < HW; ++i)
    low[size_t(i)] = fg[size_t(i)] && energy[size_t(i)] <= params.energy_threshold ? 1 : 0;
  InstanceMap markers = connected_components(low, H, W, params.connectivity);
  {
    auto areas = component_areas(markers);
    for (int64_t i = 0; i < HW; ++i)
      if (markers.ids[size_t(i)] > 0 &&
          areas[size_t(markers.ids[size_t(i)])] < params.min_marker_px)
        markers.ids[size_t(i)] = 0;
  }
  // a foreground component with no surviving marker becomes its own marker
  {
    std::vector<uint8_t> has_marker(size_t(fg_cc.max_id()) + 1, 0);
    for (int64_t i = 0; i < HW; ++i)
      if (markers.ids[size_t(i)] > 0) has_marker[size_t(fg_cc.ids[size_t(i)])] = 1;
    int32_t next = markers.max_id();
    std::map<int32_t, int32_t> orphan;
    for (int64_t i = 0; i < HW; ++i) {
      int32_t comp = fg_cc.ids[size_t(i)];
      if (comp > 0 && !has_marker[size_t(comp)]) {
        auto it = orphan.find(comp);
        if (it == orphan.end()) it = orphan.emplace(comp, ++next).first;
        markers.ids[size_t(i)] = it->second;
      }
    }
  }
  markers = relabel_sequential(markers);
  const int32_t n_markers = markers.max_id();
  if (n_markers == 0) return InstanceMap(H, W);

  // priority flood on the energy landscape restricted to the foreground
  struct QEntry {
    float e;
    uint64_t age;
    int64_t pos;
    int32_t label;
    bool operator>(const QEntry& o) const {
      if (e != o.e) return e > o.e;
      return age > o.age;
    }
  };
  std::priority_queue<QEntry, std::vector<QEntry>, std::greater<QEntry>> pq;
  InstanceMap out(H, W);
  uint64_t age = 0;
  for (int64_t i = 0; i < HW; ++i)
    if (markers.ids[size_t(i)] > 0) {
      out.ids[size_t(i)] = markers.ids[size_t(i)];
      pq.push({energy[size_t(i)], age++, i, markers.ids[size_t(i)]});
    }
  int dr[8], dc[8];
  const int nn = detail::neighbor_offsets(params.connectivity, dr, dc);
  while (!pq.empty()) {
    QEntry e = pq.top();
    pq.pop();
    int64_t pr = e.pos / W, pc = e.pos % W;
    for (int k = 0; k < nn; ++k) {
      int64_t qr = pr + dr[k], qc = pc + dc[k];
      if (qr < 0 || qr >= H || qc < 0 || qc >= W) continue;
      int64_t q = qr * W + qc;
      if (!fg[size_t(q)] || out.ids[size_t(q)] != 0) continue;
      out.ids[size_t(q)] = e.label;
      pq.push({energy[size_t(q)], age++, q, e.label});
    }
  }
  return out;
}

// Majority-vote typing from the NC head: per instance, argmax over
// non-background classes of summed per-pixel softmax mass; ties to the
// lower class index.
inline std::vector<TypedNucleus> assign_types(const InstanceMap& inst, const Tensor& nt_logits) {
  const int64_t C = nt_logits.dim(0), H = nt_logits.dim(1), W = nt_logits.dim(2);
  if (H != inst.height || W != inst.width)
    throw std::invalid_argument("assign_types: shape mismatch");
  const int64_t HW = H * W;
  const int32_t n = inst.max_id();
  if (n == 0) return {};

  std::vector<std::vector<double>> mass(size_t(n) + 1, std::vector<double>(size_t(C), 0.0));
  std::vector<TypedNucleus> rec(size_t(n) + 1);
  std::vector<float> probs(size_t(C), 0.f);
  for (int64_t r = 0; r < H; ++r)
    for (int64_t c = 0; c < W; ++c) {
      int32_t id = inst.at(r, c);
      if (id <= 0) continue;
      int64_t i = r * W + c;
      float m = nt_logits[i];
      for (int64_t k = 1; k < C; ++k) m = std::max(m, nt_logits[k * HW + i]);
      double z = 0;
      for (int64_t k = 0; k < C; ++k) {
        probs[size_t(k)] = std::exp(nt_logits[k * HW + i] - m);
        z += probs[size_t(k)];
      }
      for (int64_t k = 0; k < C; ++k) mass[size_t(id)][size_t(k)] += probs[size_t(k)] / z;

      TypedNucleus& t = rec[size_t(id)];
      if (t.area_px == 0) {
        t.r0 = t.r1 = r;
        t.c0 = t.c1 = c;
      } else {
        t.r0 = std::min(t.r0, r);
        t.r1 = std::max(t.r1, r);
        t.c0 = std::min(t.c0, c);
        t.c1 = std::max(t.c1, c);
      }
      t.centroid_r += double(r);
      t.centroid_c += double(c);
      t.area_px += 1;
    }

  std::vector<TypedNucleus> out;
  out.reserve(size_t(n));
  for (int32_t id = 1; id <= n; ++id) {
    TypedNucleus& t = rec[size_t(id)];
    if (t.area_px == 0) continue;
    int best = 1;
    for (int64_t k = 2; k < C; ++k)
      if (mass[size_t(id)][size_t(k)] > mass[size_t(id)][size_t(best)]) best = int(k);
    t.id = id;
    t.class_id = best;
    t.class_prob = float(mass[size_t(id)][size_t(best)] / t.area_px);
    t.centroid_r /= t.area_px;
    t.centroid_c /= t.area_px;
    out.push_back(t);
  }
  return out;
}

namespace detail {

// Morphological closing (3x3) plus hole fill of one binary crop.
inline void close_and_fill(std::vector<uint8_t>& m, int64_t h, int64_t w) {
  std::vector<uint8_t> dil(m.size(), 0);
  auto idx = [w](int64_t r, int64_t c) { return size_t(r * w + c); };
  for (int64_t r = 0; r < h; ++r)
    for (int64_t c = 0; c < w; ++c) {
      uint8_t v = 0;
      for (int64_t rr = std::max<int64_t>(0, r - 1); rr <= std::min(h - 1, r + 1) && !v; ++rr)
        for (int64_t cc = std::max<int64_t>(0, c - 1); cc <= std::min(w - 1, c + 1); ++cc)
          if (m[idx(rr, cc)]) {
            v = 1;
            break;
          }
      dil[idx(r, c)] = v;
    }
  std::vector<uint8_t> ero(m.size(), 0);
  for (int64_t r = 0; r < h; ++r)
    for (int64_t c = 0; c < w; ++c) {
      uint8_t v = 1;
      for (int64_t rr = r - 1; rr <= r + 1 && v; ++rr)
        for (int64_t cc = c - 1; cc <= c + 1; ++cc) {
          // pixels beyond the crop count as background
          if (rr < 0 || rr >= h || cc < 0 || cc >= w || !dil[idx(rr, cc)]) {
            v = 0;
            break;
          }
        }
      ero[idx(r, c)] = v;
    }
  // hole fill: flood background from the crop border; unreachable background
  // becomes foreground
  std::vector<uint8_t> outside(ero.size(), 0);
  std::vector<int64_t> stack;
  for (int64_t r = 0; r < h; ++r)
    for (int64_t c = 0; c < w; ++c)
      if ((r == 0 || r == h - 1 || c == 0 || c == w - 1) && !ero[idx(r, c)] &&
          !outside[idx(r, c)]) {
        outside[idx(r, c)] = 1;
        stack.push_back(r * w + c);
        while (!stack.empty()) {
          int64_t p = stack.back();
          stack.pop_back();
          int64_t pr = p / w, pc = p % w;
          const int dr4[4] = {-1, 1, 0, 0}, dc4[4] = {0, 0, -1, 1};
          for (int k = 0; k < 4; ++k) {
            int64_t qr = pr + dr4[k], qc = pc + dc4[k];
            if (qr < 0 || qr >= h || qc < 0 || qc >= w) continue;
            if (!ero[idx(qr, qc)] && !outside[idx(qr, qc)]) {
              outside[idx(qr, qc)] = 1;
              stack.push_back(qr * w + qc);
            }
          }
        }
      }
  for (size_t i = 0; i < m.size(); ++i) m[i] = ero[i] || !outside[i] ? 1 : 0;
}

}  // namespace detail

// Per-instance closing, hole filling and small-object removal; relabels to
// contiguous ids preserving order. When two closings claim the same
// background pixel, the lower id keeps it.
inline InstanceMap cleanup(const InstanceMap& inst, const PostprocessParams& params) {
  const int64_t H = inst.height, W = inst.width;
  const int32_t n = inst.max_id();
  InstanceMap out(H, W);
  if (n == 0) return out;

  struct Box {
    int64_t r0 = INT64_MAX, c0 = INT64_MAX, r1 = -1, c1 = -1;
  };
  std::vector<Box> boxes(size_t(n) + 1);
  for (int64_t r = 0; r < H; ++r)
    for (int64_t c = 0; c < W; ++c) {
      int32_t id = inst.at(r, c);
      if (id <= 0) continue;
      Box& b = boxes[size_t(id)];
      b.r0 = std::min(b.r0, r);
      b.r1 = std::max(b.r1, r);
      b.c0 = std::min(b.c0, c);
      b.c1 = std::max(b.c1, c);
    }

  for (int32_t id = 1; id <= n; ++id) {
    const Box& b = boxes[size_t(id)];
    if (b.r1 < 0) continue;
    const int64_t pad = 2;
    int64_t r0 = std::max<int64_t>(0, b.r0 - pad), c0 = std::max<int64_t>(0, b.c0 - pad);
    int64_t r1 = std::min<int64_t>(H - 1, b.r1 + pad), c1 = std::min<int64_t>(W - 1, b.c1 + pad);
    int64_t h = r1 - r0 + 1, w = c1 - c0 + 1;
    std::vector<uint8_t> crop(size_t(h * w), 0);
    int64_t area = 0;
    for (int64_t r = r0; r <= r1; ++r)
      for (int64_t c = c0; c <= c1; ++c)
        if (inst.at(r, c) == id) {
          crop[size_t((r - r0) * w + (c - c0))] = 1;
          ++area;
        }
    detail::close_and_fill(crop, h, w);
    int64_t new_area = 0;
    for (uint8_t v : crop) new_area += v;
    if (new_area < params.min_object_px) continue;
    for (int64_t r = r0; r <= r1; ++r)
      for (int64_t c = c0; c <= c1; ++c) {
        // grow only into background; never steal another instance's pixels
        int32_t orig = inst.at(r, c);
        if (crop[size_t((r - r0) * w + (c - c0))] && out.at(r, c) == 0 &&
            (orig == id || orig == 0))
          out.at(r, c) = id;
      }
  }
  return relabel_sequential(out);
}

// Full per-image pipeline in the declared order: segment, cleanup, type.
inline std::pair<InstanceMap, std::vector<TypedNucleus>> postprocess_image(
    const OutputMaps& maps, const PostprocessParams& params) {
  InstanceMap inst = instance_segment(maps, params);
  inst = cleanup(inst, params);
  return {inst, assign_types(inst, maps.nt_logits)};
}

}  // namespace nulite
