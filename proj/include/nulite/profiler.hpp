#pragma once

#include <chrono>
#include <iomanip>
#include <sstream>

#include "nulite/network.hpp"

namespace nulite {

// Static complexity report. MAC convention: 1 multiply-accumulate = 1 FLOP
// (printed in every report header). Estimated size = parameter bytes +
// forward activation bytes at batch 1, 32-bit precision.
struct ComplexityReport {
  std::string model;
  bool reparameterized = false;
  double params_millions = 0;
  double gflops_256 = 0;
  double gflops_1024 = 0;
  double size_mb_256 = 0;
  double size_mb_1024 = 0;
  double latency_ms_mean = 0;  // 0 when not measured
  double latency_ms_std = 0;
};

inline int64_t count_params(Network& net) { return net.num_parameters(); }

inline double count_gflops(const Network& net, int64_t input_size) {
  if (input_size % 32 != 0)
    throw std::invalid_argument("profiler input size must be divisible by 32");
  NetStats s;
  net.tally(input_size, input_size, s);
  return s.macs / 1e9;
}

inline double estimated_size_mb(Network& net, int64_t input_size) {
  NetStats s;
  net.tally(input_size, input_size, s);
  auto params = const_cast<Network&>(net).parameters();
  double bytes = double(param_count(params)) * 4.0 + s.activation_elems * 4.0 +
                 double(3 * input_size * input_size) * 4.0;
  return bytes / (1024.0 * 1024.0);
}

struct LatencyResult {
  double mean_ms = 0;
  double std_ms = 0;
  int64_t batch = 0;
  int64_t repeats = 0;
};

// Wall-clock forward latency; warmup then timed repeats. Absolute numbers are
// host-dependent; only orderings are meaningful across runs on one host.
inline LatencyResult measure_latency(Network& net, int64_t input_size, int64_t batch,
                                     int64_t repeats, int64_t warmup = 10) {
  NoGradGuard ng;
  Tensor x({batch, 3, input_size, input_size});
  Rng rng(7);
  for (int64_t i = 0; i < x.numel(); ++i) x[i] = rand_uniform(rng, -1.f, 1.f);
  for (int64_t i = 0; i < warmup; ++i) net.forward(make_var(x), false);
  std::vector<double> ms;
  for (int64_t i = 0; i < repeats; ++i) {
    auto t0 = std::chrono::steady_clock::now();
    net.forward(make_var(x), false);
    auto t1 = std::chrono::steady_clock::now();
    ms.push_back(std::chrono::duration<double, std::milli>(t1 - t0).count());
  }
  LatencyResult r;
  r.batch = batch;
  r.repeats = repeats;
  for (double v : ms) r.mean_ms += v;
  r.mean_ms /= double(ms.size());
  double var = 0;
  for (double v : ms) var += (v - r.mean_ms) * (v - r.mean_ms);
  r.std_ms = ms.size() > 1 ? std::sqrt(var / double(ms.size() - 1)) : 0.0;
  return r;
}

inline ComplexityReport profile_network(Network& net, const std::string& label,
                                        bool with_latency = false, int64_t latency_batch = 4,
                                        int64_t latency_repeats = 100) {
  ComplexityReport r;
  r.model = label;
  r.reparameterized = net.reparameterized();
  r.params_millions = double(count_params(net)) / 1e6;
  r.gflops_256 = count_gflops(net, 256);
  r.gflops_1024 = count_gflops(net, 1024);
  r.size_mb_256 = estimated_size_mb(net, 256);
  r.size_mb_1024 = estimated_size_mb(net, 1024);
  if (with_latency) {
    LatencyResult lr = measure_latency(net, 256, latency_batch, latency_repeats);
    r.latency_ms_mean = lr.mean_ms;
    r.latency_ms_std = lr.std_ms;
  }
  return r;
}

// Published reference rows used for speedup comparisons. These are
// literature constants, not measurements from this implementation.
inline const std::vector<ComplexityReport>& reference_reports() {
  static const std::vector<ComplexityReport> refs = {
      {"CellViT-256", true, 46.75, 132.89, 2125.94, 1859.98, 26953.06, 35.71, 0.37},
      {"CellViT-SAM-H", true, 699.74, 214.20, 3413.41, 6002.34, 45612.96, 103.89, 0.97},
      {"NuLite-T(ref)", true, 12.01, 19.76, 316.11, 489.99, 7119.61, 9.96, 0.23},
      {"NuLite-M(ref)", true, 24.08, 21.45, 343.16, 623.45, 8531.03, 14.69, 0.86},
      {"NuLite-H(ref)", true, 34.04, 23.14, 370.20, 745.57, 9887.84, 18.66, 0.40},
      {"NuLite-H-alt(ref)", true, 47.85, 32.53, 520.39, 913.95, 11753.44, 23.05, 0.86},
  };
  return refs;
}

inline const ComplexityReport& reference_report(const std::string& name) {
  for (const auto& r : reference_reports())
    if (r.model == name) return r;
  throw std::invalid_argument("unknown reference model: " + name);
}

struct SpeedupRow {
  double params = 0;
  double gflops_256 = 0;
  double gflops_1024 = 0;
  double size_256 = 0;
  double size_1024 = 0;
  double latency = 0;
};

// Elementwise ratios a / b (how much heavier a is than b).
inline SpeedupRow speedup_table(const ComplexityReport& a, const ComplexityReport& b) {
  auto ratio = [](double x, double y) {
    if (y == 0) throw std::invalid_argument("speedup: division by zero");
    return x / y;
  };
  SpeedupRow s;
  s.params = ratio(a.params_millions, b.params_millions);
  s.gflops_256 = ratio(a.gflops_256, b.gflops_256);
  s.gflops_1024 = ratio(a.gflops_1024, b.gflops_1024);
  s.size_256 = ratio(a.size_mb_256, b.size_mb_256);
  s.size_1024 = ratio(a.size_mb_1024, b.size_mb_1024);
  if (a.latency_ms_mean > 0 && b.latency_ms_mean > 0)
    s.latency = ratio(a.latency_ms_mean, b.latency_ms_mean);
  return s;
}

inline std::string format_report(const ComplexityReport& r) {
  std::ostringstream os;
  os << std::fixed;
  os << "model: " << r.model << (r.reparameterized ? " (reparameterized)" : "") << "\n";
  os << "flop convention: 1 MAC = 1 FLOP; conv K^2*Cin*Cout*Hout*Wout, deconv symmetric on "
        "its output, attention QKV/proj + score/value products\n";
  os << std::setprecision(2);
  os << "params_millions = " << r.params_millions << "\n";
  os << "gflops_256 = " << r.gflops_256 << "\n";
  os << "gflops_1024 = " << r.gflops_1024 << "\n";
  os << "estimated_size_mb_256 = " << r.size_mb_256 << "\n";
  os << "estimated_size_mb_1024 = " << r.size_mb_1024 << "\n";
  if (r.latency_ms_mean > 0) {
    os << "latency_ms_mean = " << r.latency_ms_mean << "\n";
    os << "latency_ms_std = " << r.latency_ms_std << "\n";
    os << "latency note: network forward only, post-processing excluded\n";
  }
  return os.str();
}

}  // namespace nulite
