#pragma once

#include <iostream>

#include "nulite/checkpoint.hpp"
#include "nulite/postprocess.hpp"

namespace nulite {

struct TileGrid {
  int64_t tile_size = 256;
  int64_t overlap_px = 64;
  std::vector<std::pair<int64_t, int64_t>> origins;  // (row, col)
};

// Row-major tile origins with stride tile - overlap; the final row/column is
// clamped in-bounds, so the last pair of tiles may overlap more.
inline TileGrid plan_tiles(int64_t H, int64_t W, int64_t tile_size, int64_t overlap_px) {
  if (tile_size > H || tile_size > W)
    throw std::invalid_argument("tile size exceeds image dims");
  if (overlap_px < 0 || overlap_px >= tile_size)
    throw std::invalid_argument("overlap must be in [0, tile_size)");
  TileGrid g;
  g.tile_size = tile_size;
  g.overlap_px = overlap_px;
  const int64_t stride = tile_size - overlap_px;
  auto axis = [&](int64_t n) {
    std::vector<int64_t> xs;
    for (int64_t o = 0;; o += stride) {
      if (o + tile_size >= n) {
        if (xs.empty() || xs.back() != n - tile_size) xs.push_back(n - tile_size);
        break;
      }
      xs.push_back(o);
    }
    return xs;
  };
  auto rows = axis(H), cols = axis(W);
  for (int64_t r : rows)
    for (int64_t c : cols) g.origins.emplace_back(r, c);
  return g;
}

struct StitchedNucleus {
  TypedNucleus rec;                 // global coordinates
  std::vector<int64_t> pixels;     // global flat indices
  double boundary_dist = 0;        // centroid distance to owning tile boundary
  size_t tile_index = 0;
};

namespace detail {

inline double tile_boundary_distance(const TypedNucleus& t, int64_t tile_r, int64_t tile_c,
                                     int64_t tile) {
  double lr = t.centroid_r - double(tile_r);
  double lc = t.centroid_c - double(tile_c);
  return std::min(std::min(lr, double(tile) - 1 - lr), std::min(lc, double(tile) - 1 - lc));
}

}  // namespace detail

// Normalizes an RGB byte image into the [N,3,H,W] float input tensor.
inline Tensor image_to_input(const ImageU8& img, const RgbNorm& norm) {
  const int64_t H = img.height, W = img.width;
  Tensor x({1, 3, H, W});
  for (int ch = 0; ch < 3; ++ch)
    for (int64_t i = 0; i < H * W; ++i)
      x[ch * H * W + i] =
          (float(img.data[size_t(i * 3 + ch)]) / 255.f - norm.mean[size_t(ch)]) /
          norm.std[size_t(ch)];
  return x;
}

inline OutputMaps slice_outputs(const NetworkOutput& out, int64_t batch_index) {
  auto slice = [batch_index](const Var& v) {
    const auto& s = v->value.shape();
    int64_t per = v->value.numel() / s[0];
    Tensor t({s[1], s[2], s[3]});
    std::memcpy(t.data(), v->value.data() + batch_index * per, sizeof(float) * size_t(per));
    return t;
  };
  return {slice(out.np_logits), slice(out.hv_map), slice(out.nt_logits)};
}

// Runs the network tile by tile and stitches instances: a tile owns the
// instances touching its core (the tile minus overlap/2 margins, extended to
// the image border on edge tiles); duplicates across tiles merge at pixel
// IoU > 0.5, keeping the instance whose centroid sits deeper inside its tile.
inline std::pair<InstanceMap, std::vector<TypedNucleus>> infer_tiled(
    Network& net, const ImageU8& img, const TileGrid& grid, const PostprocessParams& params,
    const RgbNorm& norm, std::ostream* log = nullptr) {
  if (grid.tile_size % 32 != 0)
    throw std::invalid_argument("tile size must be divisible by 32");
  if (!net.reparameterized() && log)
    *log << "nulite: warning: running tiled inference on a non-reparameterized network\n";

  const int64_t H = img.height, W = img.width;
  const int64_t margin = grid.overlap_px / 2;
  NoGradGuard ng;

  std::vector<StitchedNucleus> kept;
  for (size_t ti = 0; ti < grid.origins.size(); ++ti) {
    auto [tr, tc] = grid.origins[ti];
    ImageU8 tile;
    tile.height = grid.tile_size;
    tile.width = grid.tile_size;
    tile.channels = 3;
    tile.data.resize(size_t(grid.tile_size * grid.tile_size * 3));
    for (int64_t r = 0; r < grid.tile_size; ++r)
      std::memcpy(tile.data.data() + r * grid.tile_size * 3,
                  img.data.data() + ((tr + r) * W + tc) * 3,
                  size_t(grid.tile_size * 3));

    Var x = make_var(image_to_input(tile, norm));
    NetworkOutput out = net.forward(x, false);
    auto [inst, nuclei] = postprocess_image(slice_outputs(out, 0), params);

    // core region in tile coordinates; extends to the image border on edges
    int64_t core_r0 = tr == 0 ? 0 : margin;
    int64_t core_c0 = tc == 0 ? 0 : margin;
    int64_t core_r1 = (tr + grid.tile_size == H) ? grid.tile_size : grid.tile_size - margin;
    int64_t core_c1 = (tc + grid.tile_size == W) ? grid.tile_size : grid.tile_size - margin;

    std::map<int32_t, std::vector<int64_t>> pixels;
    std::map<int32_t, bool> touches_core;
    for (int64_t r = 0; r < grid.tile_size; ++r)
      for (int64_t c = 0; c < grid.tile_size; ++c) {
        int32_t id = inst.at(r, c);
        if (id <= 0) continue;
        pixels[id].push_back((tr + r) * W + (tc + c));
        if (r >= core_r0 && r < core_r1 && c >= core_c0 && c < core_c1) touches_core[id] = true;
      }
    for (const auto& n : nuclei) {
      if (!touches_core.count(n.id)) continue;
      StitchedNucleus s;
      s.rec = n;
      s.rec.centroid_r += double(tr);
      s.rec.centroid_c += double(tc);
      s.rec.r0 += tr;
      s.rec.r1 += tr;
      s.rec.c0 += tc;
      s.rec.c1 += tc;
      s.pixels = std::move(pixels[n.id]);
      s.boundary_dist = detail::tile_boundary_distance(n, 0, 0, grid.tile_size);
      s.tile_index = ti;
      kept.push_back(std::move(s));
    }
  }

  // merge duplicates from different tiles at pixel IoU > 0.5
  for (auto& s : kept) std::sort(s.pixels.begin(), s.pixels.end());
  std::vector<uint8_t> dead(kept.size(), 0);
  for (size_t i = 0; i < kept.size(); ++i) {
    if (dead[i]) continue;
    for (size_t j = i + 1; j < kept.size(); ++j) {
      if (dead[j] || kept[i].tile_index == kept[j].tile_index) continue;
      const auto& a = kept[i].pixels;
      const auto& b = kept[j].pixels;
      if (a.empty() || b.empty()) continue;
      if (a.back() < b.front() || b.back() < a.front()) continue;
      int64_t inter = 0;
      size_t x = 0, y = 0;
      while (x < a.size() && y < b.size()) {
        if (a[x] == b[y]) {
          ++inter;
          ++x;
          ++y;
        } else if (a[x] < b[y]) ++x;
        else ++y;
      }
      double iou = double(inter) / double(int64_t(a.size() + b.size()) - inter);
      if (iou > 0.5) {
        // keep the instance farther from its own tile boundary
        bool keep_i = kept[i].boundary_dist >= kept[j].boundary_dist;
        dead[keep_i ? j : i] = 1;
        if (!keep_i) break;
      }
    }
  }

  InstanceMap merged(H, W);
  std::vector<TypedNucleus> nuclei;
  int32_t next = 0;
  for (size_t i = 0; i < kept.size(); ++i) {
    if (dead[i]) continue;
    ++next;
    TypedNucleus rec = kept[i].rec;
    rec.id = next;
    int64_t painted = 0;
    for (int64_t p : kept[i].pixels)
      if (merged.ids[size_t(p)] == 0) {
        merged.ids[size_t(p)] = next;
        ++painted;
      }
    if (painted == 0) {
      --next;
      continue;
    }
    nuclei.push_back(rec);
  }
  return {merged, nuclei};
}

// Single-shot inference on a full image.
inline std::pair<InstanceMap, std::vector<TypedNucleus>> infer_direct(
    Network& net, const ImageU8& img, const PostprocessParams& params, const RgbNorm& norm) {
  NoGradGuard ng;
  Var x = make_var(image_to_input(img, norm));
  NetworkOutput out = net.forward(x, false);
  return postprocess_image(slice_outputs(out, 0), params);
}

}  // namespace nulite
