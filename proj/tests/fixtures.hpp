#pragma once

#include "nulite/data.hpp"
#include "nulite/postprocess.hpp"

namespace fixtures {

using namespace nulite;

struct Disk {
  double r, c, radius;
};

// Disk instances on a blank canvas; pixels inside several disks go to the
// nearest center, so touching disks stay distinct instances.
inline InstanceMap disk_instances(int64_t H, int64_t W, const std::vector<Disk>& disks) {
  InstanceMap m(H, W);
  for (int64_t r = 0; r < H; ++r)
    for (int64_t c = 0; c < W; ++c) {
      int best = -1;
      double best_d = 1e18;
      for (size_t k = 0; k < disks.size(); ++k) {
        double dr = double(r) - disks[k].r, dc = double(c) - disks[k].c;
        double d = std::sqrt(dr * dr + dc * dc);
        if (d <= disks[k].radius && d < best_d) {
          best = int(k);
          best_d = d;
        }
      }
      if (best >= 0) m.at(r, c) = best + 1;
    }
  return m;
}

// Ideal network outputs for an instance map: saturated NP logits, exact HV
// target, saturated per-instance class logits.
inline OutputMaps ideal_outputs(const InstanceMap& inst, const std::vector<int>& classes,
                                int num_classes, float saturation = 8.f) {
  const int64_t H = inst.height, W = inst.width;
  OutputMaps maps;
  maps.np_logits = Tensor({2, H, W});
  maps.nt_logits = Tensor({num_classes, H, W});
  for (int64_t i = 0; i < H * W; ++i) {
    bool fg = inst.ids[size_t(i)] > 0;
    maps.np_logits[i] = fg ? -saturation : saturation;
    maps.np_logits[H * W + i] = fg ? saturation : -saturation;
    int cls = fg ? classes[size_t(inst.ids[size_t(i)] - 1)] : 0;
    for (int c = 0; c < num_classes; ++c)
      maps.nt_logits[c * H * W + i] = c == cls ? saturation : -saturation;
  }
  maps.hv = make_hv_target(inst);
  return maps;
}

// RGB rendering of disk instances: dark nuclei on a bright background, with
// a class-dependent tint so the type head has signal.
inline ImageU8 render_disks(const InstanceMap& inst, const std::vector<int>& classes) {
  ImageU8 img;
  img.height = inst.height;
  img.width = inst.width;
  img.channels = 3;
  img.data.assign(size_t(inst.numel() * 3), 0);
  for (int64_t i = 0; i < inst.numel(); ++i) {
    int32_t id = inst.ids[size_t(i)];
    uint8_t r = 230, g = 225, b = 235;  // eosin-ish background
    if (id > 0) {
      int cls = classes[size_t(id - 1)];
      r = uint8_t(90 + 25 * (cls % 3));
      g = uint8_t(60 + 20 * (cls % 2));
      b = uint8_t(140 + 15 * (cls % 4));
    }
    img.data[size_t(i * 3 + 0)] = r;
    img.data[size_t(i * 3 + 1)] = g;
    img.data[size_t(i * 3 + 2)] = b;
  }
  return img;
}

// Well-separated random disks; returns the image and its annotation.
inline AnnotatedImage random_disk_image(int64_t H, int64_t W, int n_disks, int num_classes,
                                        Rng& rng, double rmin = 5, double rmax = 8,
                                        double min_gap = 4) {
  std::vector<Disk> disks;
  std::vector<int> classes;
  int guard = 0;
  while (int(disks.size()) < n_disks && guard++ < 2000) {
    Disk d{rand_uniform(rng, float(rmax + 1), float(H - rmax - 2)),
           rand_uniform(rng, float(rmax + 1), float(W - rmax - 2)),
           rand_uniform(rng, float(rmin), float(rmax))};
    bool ok = true;
    for (const auto& e : disks) {
      double dr = d.r - e.r, dc = d.c - e.c;
      if (std::sqrt(dr * dr + dc * dc) < d.radius + e.radius + min_gap) {
        ok = false;
        break;
      }
    }
    if (ok) {
      disks.push_back(d);
      classes.push_back(1 + int(rand_uniform(rng, 0.f, float(num_classes - 1) - 0.001f)));
    }
  }
  AnnotatedImage a;
  a.inst = disk_instances(H, W, disks);
  a.type_map.assign(size_t(H * W), 0);
  for (int64_t i = 0; i < H * W; ++i)
    if (a.inst.ids[size_t(i)] > 0) a.type_map[size_t(i)] = classes[size_t(a.inst.ids[size_t(i)] - 1)];
  a.rgb = render_disks(a.inst, classes);
  a.tissue_label = 0;
  a.fold_id = 0;
  return a;
}

// Random blob instance maps for metric oracles: a few rectangles/disks with
// random ids, arbitrary overlap resolution by later-wins.
inline InstanceMap random_instances(int64_t H, int64_t W, int max_instances, Rng& rng) {
  InstanceMap m(H, W);
  int n = 1 + int(rand_uniform(rng, 0.f, float(max_instances) - 0.001f));
  for (int k = 1; k <= n; ++k) {
    int64_t r0 = int64_t(rand_uniform(rng, 0.f, float(H - 3)));
    int64_t c0 = int64_t(rand_uniform(rng, 0.f, float(W - 3)));
    int64_t h = 2 + int64_t(rand_uniform(rng, 0.f, float(H) / 2));
    int64_t w = 2 + int64_t(rand_uniform(rng, 0.f, float(W) / 2));
    for (int64_t r = r0; r < std::min(H, r0 + h); ++r)
      for (int64_t c = c0; c < std::min(W, c0 + w); ++c) m.at(r, c) = k;
  }
  // ids may vanish entirely under overlap; keep them contiguous
  return relabel_sequential(m);
}

inline std::vector<int> random_types(const InstanceMap& m, int num_classes, Rng& rng) {
  std::vector<int> per_inst(size_t(m.max_id()) + 1, 0);
  for (size_t k = 1; k < per_inst.size(); ++k)
    per_inst[k] = 1 + int(rand_uniform(rng, 0.f, float(num_classes - 1) - 0.001f));
  std::vector<int> types(m.ids.size(), 0);
  for (size_t i = 0; i < m.ids.size(); ++i)
    if (m.ids[i] > 0) types[i] = per_inst[size_t(m.ids[i])];
  return types;
}

}  // namespace fixtures
