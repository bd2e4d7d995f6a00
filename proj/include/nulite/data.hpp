#pragma once

#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>

#include "nulite/hv.hpp"
#include "nulite/npy.hpp"
#include "nulite/png_io.hpp"

namespace nulite {

// PanNuke label convention: 0 background, then the five mask channels in
// distribution order.
inline const std::vector<std::string>& pannuke_class_names() {
  static const std::vector<std::string> names = {"Background",  "Neoplastic", "Inflammatory",
                                                 "Connective",  "Dead",       "Epithelial"};
  return names;
}

inline const std::vector<std::string>& pannuke_tissue_names() {
  static const std::vector<std::string> names = {
      "Adrenal_gland", "Bile-duct", "Bladder",    "Breast",   "Cervix",  "Colon",  "Esophagus",
      "HeadNeck",      "Kidney",    "Liver",      "Lung",     "Ovarian", "Pancreatic",
      "Prostate",      "Skin",      "Stomach",    "Testis",   "Thyroid", "Uterus"};
  return names;
}

inline int pannuke_tissue_id(const std::string& name) {
  const auto& names = pannuke_tissue_names();
  for (size_t i = 0; i < names.size(); ++i)
    if (names[i] == name) return int(i);
  throw std::invalid_argument("unknown PanNuke tissue: " + name);
}

struct AnnotatedImage {
  std::string id;
  ImageU8 rgb;                // HWC, 3 channels
  InstanceMap inst;
  std::vector<int> type_map;  // row-major, 0 = background
  int tissue_label = 0;
  int fold_id = 0;
};

// Binary/HV/type/tissue targets for one image.
struct ImageTargets {
  Tensor np;  // [H,W]
  Tensor hv;  // [2,H,W]
  Tensor nt;  // [H,W] class indices
  int tissue = 0;
};

inline ImageTargets make_targets(const AnnotatedImage& a) {
  const int64_t H = a.inst.height, W = a.inst.width;
  ImageTargets t;
  t.np = Tensor({H, W});
  t.nt = Tensor({H, W});
  for (int64_t i = 0; i < H * W; ++i) {
    t.np[i] = a.inst.ids[size_t(i)] > 0 ? 1.f : 0.f;
    t.nt[i] = float(a.type_map[size_t(i)]);
  }
  t.hv = make_hv_target(a.inst);
  t.tissue = a.tissue_label;
  return t;
}

// Repairs the one-type-per-instance invariant by majority vote (ties to the
// lower class); returns number of repaired instances.
inline int enforce_type_consistency(AnnotatedImage& a, int num_classes,
                                    std::ostream* log = nullptr) {
  std::map<int32_t, std::vector<int64_t>> votes;
  for (size_t i = 0; i < a.inst.ids.size(); ++i) {
    int32_t id = a.inst.ids[i];
    if (id <= 0) {
      a.type_map[i] = 0;  // background type outside instances
      continue;
    }
    int c = a.type_map[i];
    if (c < 0 || c >= num_classes)
      throw std::runtime_error("type value " + std::to_string(c) + " out of range in image " +
                               a.id);
    auto& v = votes[id];
    if (v.empty()) v.assign(size_t(num_classes), 0);
    ++v[size_t(c)];
  }
  int repaired = 0;
  std::map<int32_t, int> majority;
  for (auto& [id, v] : votes) {
    int best = 1;
    for (int c = 2; c < num_classes; ++c)
      if (v[size_t(c)] > v[size_t(best)]) best = c;
    // an instance may carry stray 0s or mixed labels
    int64_t nonmaj = 0;
    for (int c = 0; c < num_classes; ++c)
      if (c != best) nonmaj += v[size_t(c)];
    if (nonmaj > 0) {
      ++repaired;
      if (log)
        *log << "nulite: repaired mixed-type instance " << id << " in image " << a.id
             << " to class " << best << "\n";
    }
    majority[id] = best;
  }
  for (size_t i = 0; i < a.inst.ids.size(); ++i)
    if (a.inst.ids[i] > 0) a.type_map[i] = majority[a.inst.ids[i]];
  return repaired;
}

struct ManifestRow {
  std::string id;
  int tissue = 0;
  int fold = 0;
};

inline std::vector<ManifestRow> read_manifest(const std::string& root) {
  std::ifstream is(root + "/manifest.tsv");
  if (!is) throw std::runtime_error("missing manifest: " + root + "/manifest.tsv");
  std::vector<ManifestRow> rows;
  std::string line;
  while (std::getline(is, line)) {
    if (line.empty() || line[0] == '#') continue;
    ManifestRow r;
    size_t t1 = line.find('\t');
    size_t t2 = line.find('\t', t1 + 1);
    if (t1 == std::string::npos || t2 == std::string::npos)
      throw std::runtime_error("malformed manifest line: " + line);
    r.id = line.substr(0, t1);
    r.tissue = std::stoi(line.substr(t1 + 1, t2 - t1 - 1));
    r.fold = std::stoi(line.substr(t2 + 1));
    rows.push_back(std::move(r));
  }
  return rows;
}

inline AnnotatedImage load_annotated_image(const std::string& root, const ManifestRow& row,
                                           int num_classes, std::ostream* log = nullptr) {
  AnnotatedImage a;
  a.id = row.id;
  a.tissue_label = row.tissue;
  a.fold_id = row.fold;
  a.rgb = read_png_rgb8(root + "/images/" + row.id + ".png");
  ImageU16 inst16 = read_png_gray16(root + "/labels/" + row.id + "_inst.png");
  ImageU8 type8 = read_png_gray8(root + "/labels/" + row.id + "_type.png");
  if (inst16.height != a.rgb.height || inst16.width != a.rgb.width ||
      type8.height != a.rgb.height || type8.width != a.rgb.width)
    throw std::runtime_error("label/image shape mismatch for " + row.id);
  a.inst = InstanceMap(inst16.height, inst16.width);
  a.type_map.resize(size_t(inst16.height * inst16.width));
  for (size_t i = 0; i < a.inst.ids.size(); ++i) {
    a.inst.ids[i] = int32_t(inst16.data[i]);
    a.type_map[i] = int(type8.data[i]);
  }
  enforce_type_consistency(a, num_classes, log);
  return a;
}

// Loads every image of the given fold (fold < 0: all folds). An empty or
// missing manifest yields an empty sequence with a warning.
inline std::vector<AnnotatedImage> load_dataset(const std::string& root, int fold = -1,
                                                int num_classes = 6,
                                                std::ostream* log = nullptr) {
  std::vector<AnnotatedImage> out;
  if (!std::filesystem::exists(root + "/manifest.tsv")) {
    if (log) *log << "nulite: no manifest under " << root << ", returning empty dataset\n";
    return out;
  }
  for (const auto& row : read_manifest(root)) {
    if (fold >= 0 && row.fold != fold) continue;
    out.push_back(load_annotated_image(root, row, num_classes, log));
  }
  if (out.empty() && log) *log << "nulite: dataset is empty (root " << root << ")\n";
  return out;
}

inline void save_annotated_image(const std::string& root, const AnnotatedImage& a) {
  std::filesystem::create_directories(root + "/images");
  std::filesystem::create_directories(root + "/labels");
  write_png_rgb8(root + "/images/" + a.id + ".png", a.rgb);
  ImageU16 inst16;
  inst16.height = a.inst.height;
  inst16.width = a.inst.width;
  inst16.data.resize(a.inst.ids.size());
  for (size_t i = 0; i < a.inst.ids.size(); ++i) {
    if (a.inst.ids[i] < 0 || a.inst.ids[i] > 65535)
      throw std::runtime_error("instance id out of 16-bit range in " + a.id);
    inst16.data[i] = uint16_t(a.inst.ids[i]);
  }
  write_png_gray16(root + "/labels/" + a.id + "_inst.png", inst16);
  ImageU8 type8;
  type8.height = a.inst.height;
  type8.width = a.inst.width;
  type8.channels = 1;
  type8.data.resize(a.inst.ids.size());
  for (size_t i = 0; i < a.inst.ids.size(); ++i) type8.data[i] = uint8_t(a.type_map[i]);
  write_png_gray8(root + "/labels/" + a.id + "_type.png", type8);
}

inline void append_manifest(const std::string& root, const ManifestRow& row) {
  std::ofstream os(root + "/manifest.tsv", std::ios::app);
  os << row.id << '\t' << row.tissue << '\t' << row.fold << '\n';
}

// Converts one PanNuke fold directory (images.npy, masks.npy, types.npy)
// into the dataset layout. Mask channels 0..4 carry per-class instance ids;
// earlier channels win on the rare overlapping pixel.
inline int convert_pannuke_fold(const std::string& fold_dir, const std::string& out_root,
                                int fold_id, std::ostream* log = nullptr) {
  NpyArray images = npy_load(fold_dir + "/images.npy");
  NpyArray masks = npy_load(fold_dir + "/masks.npy");
  NpyArray types = npy_load(fold_dir + "/types.npy");
  if (images.shape.size() != 4 || images.shape[3] != 3)
    throw std::runtime_error("images.npy must be [N,H,W,3]");
  if (masks.shape.size() != 4 || masks.shape[3] != 6)
    throw std::runtime_error("masks.npy must be [N,H,W,6]");
  const int64_t N = images.shape[0], H = images.shape[1], W = images.shape[2];
  if (masks.shape[0] != N || types.shape[0] != N)
    throw std::runtime_error("PanNuke arrays disagree on image count");

  std::filesystem::create_directories(out_root);
  for (int64_t n = 0; n < N; ++n) {
    AnnotatedImage a;
    a.id = "fold" + std::to_string(fold_id) + "_" + std::to_string(n);
    a.fold_id = fold_id;
    a.tissue_label = pannuke_tissue_id(types.get_string(n));
    a.rgb.height = H;
    a.rgb.width = W;
    a.rgb.channels = 3;
    a.rgb.data.resize(size_t(H * W * 3));
    for (int64_t i = 0; i < H * W * 3; ++i) {
      double v = images.get(n * H * W * 3 + i);
      a.rgb.data[size_t(i)] = uint8_t(std::clamp(v, 0.0, 255.0));
    }
    a.inst = InstanceMap(H, W);
    a.type_map.assign(size_t(H * W), 0);
    int32_t next_id = 0;
    for (int ch = 0; ch < 5; ++ch) {
      std::map<int64_t, int32_t> remap;  // source id within channel -> global id
      for (int64_t i = 0; i < H * W; ++i) {
        int64_t src = int64_t(masks.get(((n * H * W) + i) * 6 + ch));
        if (src <= 0 || a.inst.ids[size_t(i)] != 0) continue;
        auto it = remap.find(src);
        if (it == remap.end()) it = remap.emplace(src, ++next_id).first;
        a.inst.ids[size_t(i)] = it->second;
        a.type_map[size_t(i)] = ch + 1;
      }
    }
    enforce_type_consistency(a, int(pannuke_class_names().size()), log);
    save_annotated_image(out_root, a);
    append_manifest(out_root, {a.id, a.tissue_label, a.fold_id});
  }
  if (log) *log << "nulite: converted " << N << " images from " << fold_dir << "\n";
  return int(N);
}

// -------- external-dataset class alignment --------

enum class ExternalDataset { CoNSeP, GlySAC };

// CoNSeP source labels (official numbering).
inline const std::vector<std::string>& consep_class_names() {
  static const std::vector<std::string> names = {
      "Background",           "Other",      "Inflammatory", "Healthy Epithelial",
      "Dysplastic/Malignant Epithelial", "Fibroblast", "Muscle",       "Endothelial"};
  return names;
}

// Aligned CoNSeP target set.
inline const std::vector<std::string>& consep_target_names() {
  static const std::vector<std::string> names = {"Background", "Neoplastic", "Inflammatory",
                                                 "Epithelial", "Miscellaneous"};
  return names;
}

// GlySAC source labels.
inline const std::vector<std::string>& glysac_class_names() {
  static const std::vector<std::string> names = {"Background", "Epithelial", "Lymphocyte",
                                                 "Miscellaneous"};
  return names;
}

inline const std::vector<std::string>& glysac_target_names() {
  static const std::vector<std::string> names = {"Background", "Epithelial", "Inflammatory",
                                                 "Miscellaneous"};
  return names;
}

// Source-label -> aligned-label for ground truth of the named dataset.
inline int align_class(ExternalDataset ds, int source_label) {
  if (source_label == 0) return 0;
  if (ds == ExternalDataset::CoNSeP) {
    switch (source_label) {
      case 1: return 4;  // other -> miscellaneous
      case 2: return 2;  // inflammatory
      case 3: return 3;  // healthy epithelial -> epithelial
      case 4: return 1;  // dysplastic/malignant epithelial -> neoplastic
      case 5: return 4;  // fibroblast
      case 6: return 4;  // muscle
      case 7: return 4;  // endothelial
      default:
        throw std::invalid_argument("unknown CoNSeP label " + std::to_string(source_label));
    }
  }
  switch (source_label) {
    case 1: return 1;  // epithelial
    case 2: return 2;  // lymphocyte -> inflammatory
    case 3: return 3;  // miscellaneous
    default:
      throw std::invalid_argument("unknown GlySAC label " + std::to_string(source_label));
  }
}

// PanNuke-label -> aligned-label, for mapping model predictions into the
// external dataset's class space.
inline int align_pannuke_class(ExternalDataset ds, int pannuke_label) {
  if (pannuke_label == 0) return 0;
  if (ds == ExternalDataset::CoNSeP) {
    switch (pannuke_label) {
      case 1: return 1;  // neoplastic
      case 2: return 2;  // inflammatory
      case 3: return 4;  // connective -> miscellaneous
      case 4: return 4;  // dead -> miscellaneous
      case 5: return 3;  // epithelial
      default:
        throw std::invalid_argument("unknown PanNuke label " + std::to_string(pannuke_label));
    }
  }
  switch (pannuke_label) {
    case 1: return 1;  // neoplastic -> epithelial group
    case 2: return 2;  // inflammatory
    case 3: return 3;  // connective -> miscellaneous
    case 4: return 3;  // dead -> miscellaneous
    case 5: return 1;  // epithelial -> epithelial group
    default:
      throw std::invalid_argument("unknown PanNuke label " + std::to_string(pannuke_label));
  }
}

inline std::vector<int> align_classes(ExternalDataset ds, const std::vector<int>& type_map) {
  std::vector<int> out(type_map.size());
  for (size_t i = 0; i < type_map.size(); ++i) out[i] = align_class(ds, type_map[i]);
  return out;
}

// Bilinear image resize with nearest-neighbor label resize (used for the
// 1000x1000 -> 1024x1024 external tiles).
inline AnnotatedImage resize_annotated(const AnnotatedImage& a, int64_t H2, int64_t W2) {
  AnnotatedImage out;
  out.id = a.id;
  out.tissue_label = a.tissue_label;
  out.fold_id = a.fold_id;
  const int64_t H = a.rgb.height, W = a.rgb.width;
  out.rgb.height = H2;
  out.rgb.width = W2;
  out.rgb.channels = 3;
  out.rgb.data.resize(size_t(H2 * W2 * 3));
  out.inst = InstanceMap(H2, W2);
  out.type_map.assign(size_t(H2 * W2), 0);
  for (int64_t r = 0; r < H2; ++r)
    for (int64_t c = 0; c < W2; ++c) {
      double sr = (double(r) + 0.5) * H / H2 - 0.5;
      double sc = (double(c) + 0.5) * W / W2 - 0.5;
      int64_t r0 = int64_t(std::floor(sr)), c0 = int64_t(std::floor(sc));
      double fr = sr - r0, fc = sc - c0;
      for (int ch = 0; ch < 3; ++ch) {
        auto px = [&](int64_t rr, int64_t cc) {
          rr = std::clamp<int64_t>(rr, 0, H - 1);
          cc = std::clamp<int64_t>(cc, 0, W - 1);
          return double(a.rgb.at(rr, cc, ch));
        };
        double v = (1 - fr) * ((1 - fc) * px(r0, c0) + fc * px(r0, c0 + 1)) +
                   fr * ((1 - fc) * px(r0 + 1, c0) + fc * px(r0 + 1, c0 + 1));
        out.rgb.at(r, c, ch) = uint8_t(std::clamp(v + 0.5, 0.0, 255.0));
      }
      int64_t nr = std::clamp<int64_t>(int64_t(std::lround(sr)), 0, H - 1);
      int64_t nc = std::clamp<int64_t>(int64_t(std::lround(sc)), 0, W - 1);
      out.inst.at(r, c) = a.inst.at(nr, nc);
      out.type_map[size_t(r * W2 + c)] = a.type_map[size_t(nr * W + nc)];
    }
  return out;
}

}  // namespace nulite
