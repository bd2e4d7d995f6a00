#pragma once

#include <fstream>
#include <map>
#include <sstream>
#include <string>

#include "nulite/augment.hpp"
#include "nulite/checkpoint.hpp"
#include "nulite/losses.hpp"
#include "nulite/postprocess.hpp"
#include "nulite/sampler.hpp"

namespace nulite {

// TOML-style config: [section] headers, key = value lines, # comments,
// strings quoted, bools true/false, bare numbers.
class Config {
 public:
  Config() = default;

  static Config parse(std::istream& is) {
    Config c;
    std::string line, section;
    int lineno = 0;
    while (std::getline(is, line)) {
      ++lineno;
      std::string s = strip(strip_comment(line));
      if (s.empty()) continue;
      if (s.front() == '[') {
        if (s.back() != ']') throw std::runtime_error("config line " + std::to_string(lineno) +
                                                      ": unterminated section header");
        section = strip(s.substr(1, s.size() - 2));
        continue;
      }
      size_t eq = s.find('=');
      if (eq == std::string::npos)
        throw std::runtime_error("config line " + std::to_string(lineno) + ": expected key = value");
      std::string key = strip(s.substr(0, eq));
      std::string value = strip(s.substr(eq + 1));
      if (key.empty() || value.empty())
        throw std::runtime_error("config line " + std::to_string(lineno) + ": empty key or value");
      c.values_[section + "." + key] = unquote(value);
    }
    return c;
  }

  static Config load(const std::string& path) {
    std::ifstream is(path);
    if (!is) throw std::runtime_error("cannot open config: " + path);
    return parse(is);
  }

  bool has(const std::string& section, const std::string& key) const {
    return values_.count(section + "." + key) > 0;
  }

  std::string get_string(const std::string& section, const std::string& key,
                         const std::string& dflt) const {
    auto it = values_.find(section + "." + key);
    return it == values_.end() ? dflt : it->second;
  }

  double get_double(const std::string& section, const std::string& key, double dflt) const {
    auto it = values_.find(section + "." + key);
    if (it == values_.end()) return dflt;
    try {
      return std::stod(it->second);
    } catch (...) {
      throw std::runtime_error("config key " + section + "." + key + " is not a number: " +
                               it->second);
    }
  }

  int64_t get_int(const std::string& section, const std::string& key, int64_t dflt) const {
    auto it = values_.find(section + "." + key);
    if (it == values_.end()) return dflt;
    try {
      return std::stoll(it->second);
    } catch (...) {
      throw std::runtime_error("config key " + section + "." + key + " is not an integer: " +
                               it->second);
    }
  }

  bool get_bool(const std::string& section, const std::string& key, bool dflt) const {
    auto it = values_.find(section + "." + key);
    if (it == values_.end()) return dflt;
    if (it->second == "true") return true;
    if (it->second == "false") return false;
    throw std::runtime_error("config key " + section + "." + key + " is not a bool: " +
                             it->second);
  }

  void set(const std::string& section, const std::string& key, const std::string& value) {
    values_[section + "." + key] = value;
  }

 private:
  static std::string strip(const std::string& s) {
    size_t b = s.find_first_not_of(" \t\r");
    if (b == std::string::npos) return "";
    size_t e = s.find_last_not_of(" \t\r");
    return s.substr(b, e - b + 1);
  }

  static std::string strip_comment(const std::string& s) {
    bool quoted = false;
    for (size_t i = 0; i < s.size(); ++i) {
      if (s[i] == '"') quoted = !quoted;
      if (s[i] == '#' && !quoted) return s.substr(0, i);
    }
    return s;
  }

  static std::string unquote(const std::string& s) {
    if (s.size() >= 2 && s.front() == '"' && s.back() == '"') return s.substr(1, s.size() - 2);
    return s;
  }

  std::map<std::string, std::string> values_;
};

struct TrainConfig {
  float lr = 3e-4f;
  float beta1 = 0.85f;
  float beta2 = 0.95f;
  float weight_decay = 1e-4f;
  float scheduler_gamma = 0.85f;
  int64_t batch_size = 16;
  int64_t epochs = 130;
  uint64_t seed = 0;
  double grad_clip = 5.0;  // <= 0 disables
  LossWeights loss;
  AugmentParams augment;
  SamplerParams sampler;
  RgbNorm norm;

  void validate() const {
    if (!(lr > 0)) throw std::invalid_argument("lr must be > 0");
    if (!(beta1 > 0 && beta1 < 1 && beta2 > 0 && beta2 < 1))
      throw std::invalid_argument("betas must be in (0,1)");
    if (!(scheduler_gamma > 0 && scheduler_gamma <= 1))
      throw std::invalid_argument("scheduler gamma must be in (0,1]");
    if (batch_size < 1 || epochs < 1)
      throw std::invalid_argument("batch size and epochs must be >= 1");
    loss.validate();
  }
};

// Reads the [encoder]/[network]/[loss]/[train]/[data]/[postprocess]/[eval]
// sections into typed structs; every key is optional and falls back to the
// declared defaults.
struct RunConfig {
  NetworkConfig network;
  TrainConfig train;
  PostprocessParams postprocess;
  double eval_radius_px = 12.0;
  std::string data_root;
  int data_fold = -1;

  static RunConfig from(const Config& c) {
    RunConfig rc;
    std::string variant = c.get_string("encoder", "variant", "NuLite-T");
    rc.network = network_variant(variant, c.get_int("network", "nuclei_classes", 6),
                                 c.get_int("network", "tissue_classes", 19));
    rc.network.encoder.train_mode = !c.get_bool("encoder", "reparameterized", false);

    auto& t = rc.train;
    t.lr = float(c.get_double("train", "lr", 3e-4));
    t.beta1 = float(c.get_double("train", "beta1", 0.85));
    t.beta2 = float(c.get_double("train", "beta2", 0.95));
    t.weight_decay = float(c.get_double("train", "weight_decay", 1e-4));
    t.scheduler_gamma = float(c.get_double("train", "scheduler_gamma", 0.85));
    t.batch_size = c.get_int("train", "batch_size", 16);
    t.epochs = c.get_int("train", "epochs", 130);
    t.seed = uint64_t(c.get_int("train", "seed", 0));
    t.grad_clip = c.get_double("train", "grad_clip", 5.0);

    auto& l = t.loss;
    l.np_ftl = float(c.get_double("loss", "np_ftl", 1.0));
    l.np_dice = float(c.get_double("loss", "np_dice", 1.0));
    l.hv_mse = float(c.get_double("loss", "hv_mse", 1.0));
    l.hv_msge = float(c.get_double("loss", "hv_msge", 2.0));
    l.nt_ftl = float(c.get_double("loss", "nt_ftl", 1.0));
    l.nt_dice = float(c.get_double("loss", "nt_dice", 1.0));
    l.nt_bce = float(c.get_double("loss", "nt_bce", 1.0));
    l.tc_ce = float(c.get_double("loss", "tc_ce", 0.5));
    l.ftl.alpha = float(c.get_double("loss", "ftl_alpha", 0.7));
    l.ftl.beta = float(c.get_double("loss", "ftl_beta", 0.3));
    l.ftl.gamma = float(c.get_double("loss", "ftl_gamma", 4.0 / 3.0));

    auto& a = t.augment;
    a.rotate_p = float(c.get_double("data", "rotate_p", a.rotate_p));
    a.rotate_max_deg = float(c.get_double("data", "rotate_max_deg", a.rotate_max_deg));
    a.flip_p = float(c.get_double("data", "flip_p", a.flip_p));
    a.elastic_p = float(c.get_double("data", "elastic_p", a.elastic_p));
    a.elastic_alpha = float(c.get_double("data", "elastic_alpha", a.elastic_alpha));
    a.elastic_sigma = float(c.get_double("data", "elastic_sigma", a.elastic_sigma));
    a.blur_p = float(c.get_double("data", "blur_p", a.blur_p));
    a.blur_kmax = int(c.get_int("data", "blur_kmax", a.blur_kmax));
    a.noise_p = float(c.get_double("data", "noise_p", a.noise_p));
    a.noise_sigma = float(c.get_double("data", "noise_sigma", a.noise_sigma));
    a.jitter_p = float(c.get_double("data", "jitter_p", a.jitter_p));
    a.jitter = float(c.get_double("data", "jitter", a.jitter));
    a.superpixel_p = float(c.get_double("data", "superpixel_p", a.superpixel_p));

    t.sampler.gamma_s = float(c.get_double("data", "sampler_gamma_s", 1.0));
    t.sampler.beta_r = float(c.get_double("data", "sampler_beta_r", 0.1));
    t.sampler.rare_class = int(c.get_int("data", "sampler_rare_class", 4));
    rc.data_root = c.get_string("data", "root", "");
    rc.data_fold = int(c.get_int("data", "fold", -1));

    auto& p = rc.postprocess;
    p.np_threshold = float(c.get_double("postprocess", "np_threshold", 0.5));
    p.energy_threshold = float(c.get_double("postprocess", "energy_threshold", 0.4));
    p.min_object_px = int(c.get_int("postprocess", "min_object_px", 10));
    p.min_marker_px = int(c.get_int("postprocess", "min_marker_px", 10));
    p.connectivity = int(c.get_int("postprocess", "connectivity", 8));

    rc.eval_radius_px = c.get_double("eval", "radius_px", 12.0);
    return rc;
  }
};

}  // namespace nulite
