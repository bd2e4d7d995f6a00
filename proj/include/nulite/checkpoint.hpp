#pragma once

#include <fstream>

#include "nulite/network.hpp"
#include "nulite/optim.hpp"

namespace nulite {

// Single-file binary container: config echo, RGB normalization constants,
// epoch counter, all named parameter/buffer tensors, optional AdamW state.
// Round trips are bit-exact.
namespace ckpt {

constexpr char kMagic[8] = {'N', 'L', 'T', 'C', 'K', 'P', 'T', '1'};

inline void write_u32(std::ostream& os, uint32_t v) { os.write(reinterpret_cast<char*>(&v), 4); }
inline void write_i64(std::ostream& os, int64_t v) { os.write(reinterpret_cast<char*>(&v), 8); }
inline void write_f32(std::ostream& os, float v) { os.write(reinterpret_cast<char*>(&v), 4); }

inline void write_string(std::ostream& os, const std::string& s) {
  write_u32(os, uint32_t(s.size()));
  os.write(s.data(), std::streamsize(s.size()));
}

inline void write_tensor(std::ostream& os, const std::string& name, const Tensor& t) {
  write_string(os, name);
  write_u32(os, uint32_t(t.rank()));
  for (int i = 0; i < t.rank(); ++i) write_i64(os, t.dim(i));
  os.write(reinterpret_cast<const char*>(t.data()),
           std::streamsize(sizeof(float) * size_t(t.numel())));
}

inline uint32_t read_u32(std::istream& is) {
  uint32_t v;
  is.read(reinterpret_cast<char*>(&v), 4);
  return v;
}
inline int64_t read_i64(std::istream& is) {
  int64_t v;
  is.read(reinterpret_cast<char*>(&v), 8);
  return v;
}
inline float read_f32(std::istream& is) {
  float v;
  is.read(reinterpret_cast<char*>(&v), 4);
  return v;
}

inline std::string read_string(std::istream& is) {
  uint32_t n = read_u32(is);
  std::string s(n, '\0');
  is.read(s.data(), n);
  return s;
}

inline std::pair<std::string, Tensor> read_tensor(std::istream& is) {
  std::string name = read_string(is);
  uint32_t rank = read_u32(is);
  std::vector<int64_t> dims(rank);
  for (auto& d : dims) d = read_i64(is);
  Tensor t(dims);
  is.read(reinterpret_cast<char*>(t.data()),
          std::streamsize(sizeof(float) * size_t(t.numel())));
  return {std::move(name), std::move(t)};
}

}  // namespace ckpt

struct RgbNorm {
  std::array<float, 3> mean{0.5f, 0.5f, 0.5f};
  std::array<float, 3> std{0.5f, 0.5f, 0.5f};
};

inline void save_checkpoint(const std::string& path, Network& net, int64_t epoch,
                            const RgbNorm& norm, const AdamW* opt = nullptr) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw std::runtime_error("cannot open checkpoint for writing: " + path);
  os.write(ckpt::kMagic, 8);
  ckpt::write_u32(os, 1);
  ckpt::write_string(os, variant_name(net.config().encoder.variant));
  ckpt::write_u32(os, net.reparameterized() ? 1 : 0);
  ckpt::write_i64(os, net.config().num_nuclei_classes);
  ckpt::write_i64(os, net.config().num_tissue_classes);
  for (float v : norm.mean) ckpt::write_f32(os, v);
  for (float v : norm.std) ckpt::write_f32(os, v);
  ckpt::write_i64(os, epoch);

  std::vector<std::pair<std::string, const Tensor*>> tensors;
  StateVisitor v;
  v.param = [&tensors](const std::string& n, Var& p) { tensors.emplace_back(n, &p->value); };
  v.buffer = [&tensors](const std::string& n, Tensor& t) { tensors.emplace_back(n, &t); };
  net.visit(v);
  ckpt::write_i64(os, int64_t(tensors.size()));
  for (auto& [name, t] : tensors) ckpt::write_tensor(os, name, *t);

  ckpt::write_u32(os, opt ? 1 : 0);
  if (opt) {
    ckpt::write_i64(os, opt->step_count);
    ckpt::write_i64(os, int64_t(opt->m.size()));
    for (size_t i = 0; i < opt->m.size(); ++i) {
      ckpt::write_tensor(os, "adamw.m." + std::to_string(i), opt->m[i]);
      ckpt::write_tensor(os, "adamw.v." + std::to_string(i), opt->v[i]);
    }
  }
  if (!os) throw std::runtime_error("checkpoint write failed: " + path);
}

struct LoadedCheckpoint {
  Network network;
  RgbNorm norm;
  int64_t epoch = 0;
  bool has_optimizer = false;
  AdamW optimizer;  // moments only; hyperparameters come from config
};

inline LoadedCheckpoint load_checkpoint(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("cannot open checkpoint: " + path);
  char magic[8];
  is.read(magic, 8);
  if (std::memcmp(magic, ckpt::kMagic, 8) != 0)
    throw std::runtime_error("not a checkpoint file: " + path);
  uint32_t version = ckpt::read_u32(is);
  if (version != 1) throw std::runtime_error("unsupported checkpoint version");

  std::string variant = ckpt::read_string(is);
  bool reparam = ckpt::read_u32(is) != 0;
  int64_t num_nuclei = ckpt::read_i64(is);
  int64_t num_tissue = ckpt::read_i64(is);
  LoadedCheckpoint out;
  for (auto& v : out.norm.mean) v = ckpt::read_f32(is);
  for (auto& v : out.norm.std) v = ckpt::read_f32(is);
  out.epoch = ckpt::read_i64(is);

  NetworkConfig cfg;
  cfg.encoder = EncoderConfig::make(variant);
  cfg.encoder.train_mode = !reparam;
  cfg.num_nuclei_classes = num_nuclei;
  cfg.num_tissue_classes = num_tissue;
  out.network = Network(cfg);

  std::unordered_map<std::string, Tensor*> slots;
  StateVisitor v;
  v.param = [&slots](const std::string& n, Var& p) { slots[n] = &p->value; };
  v.buffer = [&slots](const std::string& n, Tensor& t) { slots[n] = &t; };
  out.network.visit(v);

  int64_t count = ckpt::read_i64(is);
  size_t filled = 0;
  for (int64_t i = 0; i < count; ++i) {
    auto [name, t] = ckpt::read_tensor(is);
    auto it = slots.find(name);
    if (it == slots.end()) throw std::runtime_error("checkpoint tensor has no slot: " + name);
    if (!it->second->same_shape(t))
      throw std::runtime_error("checkpoint shape mismatch for " + name + ": file " +
                               t.shape_str() + " vs model " + it->second->shape_str());
    *it->second = std::move(t);
    ++filled;
  }
  if (filled != slots.size())
    throw std::runtime_error("checkpoint incomplete: " + std::to_string(filled) + " of " +
                             std::to_string(slots.size()) + " tensors present");

  out.has_optimizer = ckpt::read_u32(is) != 0;
  if (out.has_optimizer) {
    out.optimizer.step_count = ckpt::read_i64(is);
    int64_t n = ckpt::read_i64(is);
    out.optimizer.m.resize(size_t(n));
    out.optimizer.v.resize(size_t(n));
    for (int64_t i = 0; i < n; ++i) {
      auto [mn, mt] = ckpt::read_tensor(is);
      auto [vn, vt] = ckpt::read_tensor(is);
      out.optimizer.m[size_t(i)] = std::move(mt);
      out.optimizer.v[size_t(i)] = std::move(vt);
    }
  }
  if (!is) throw std::runtime_error("checkpoint truncated: " + path);
  return out;
}

}  // namespace nulite
