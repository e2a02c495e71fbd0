#include "far/profiler.hpp"

#include <algorithm>
#include <chrono>
#include <cstdlib>
#include <iomanip>
#include <sstream>
#include <stdexcept>

namespace far {

namespace {

struct DirectionSize {
  std::int64_t input;
  std::int64_t hidden;
};

std::vector<DirectionSize> lstm_sizes(const ModelConfig& c, std::span<const PruneMask> masks, int layer) {
  std::vector<DirectionSize> out;
  for (int n = 0; n < c.heads; ++n) {
    for (auto d : {Direction::forward, Direction::reverse}) {
      std::int64_t hidden = c.head_dim;
      if (!masks.empty()) hidden = masks[static_cast<std::size_t>(layer)].at(n, d).retained();
      out.push_back({c.head_dim, hidden});
    }
  }
  return out;
}

void check_masks(const ModelConfig& c, std::span<const PruneMask> masks) {
  if (masks.empty()) return;
  if (static_cast<int>(masks.size()) != c.layers) throw std::invalid_argument("profiler: need one mask per layer");
  for (const auto& m : masks) {
    if (static_cast<int>(m.heads.size()) != c.heads) throw std::invalid_argument("profiler: mask head count mismatch");
  }
}

std::int64_t mlp_params(const ModelConfig& c) {
  const std::int64_t d = c.dim;
  const std::int64_t hidden = static_cast<std::int64_t>(c.mlp_ratio) * d;
  return 2 * d + (d * hidden + hidden) + (hidden * d + d);
}

LayerCost layer_cost(const ModelConfig& c, Variant v, std::int64_t t, std::span<const PruneMask> masks, int layer,
                     const FlopOptions& opt) {
  const std::int64_t d = c.dim;
  const std::int64_t hidden = static_cast<std::int64_t>(c.mlp_ratio) * d;
  LayerCost cost;
  cost.params = mlp_params(c);
  cost.flops = 2 * t * d * hidden;
  if (opt.verbose) cost.flops += t * d + t * hidden;  // LN2, GELU
  if (v == Variant::attention) {
    const std::int64_t dh = c.head_dim;
    cost.params += 2 * d + (d * 3 * d + 3 * d) + (d * d + d);
    cost.flops += t * d * 3 * d;                      // QKV
    cost.flops += 2 * c.heads * t * t * dh;           // scores and weighted values
    cost.flops += t * d * d;                          // output projection
    if (opt.verbose) cost.flops += t * d + c.heads * t * t;  // LN1, softmax
  } else {
    const auto dirs = lstm_sizes(c, masks, layer);
    std::int64_t concat = 0;
    cost.params += 2 * d + (d * d + d);
    cost.flops += t * d * d;  // in_proj
    for (const auto& s : dirs) {
      cost.params += 4 * s.hidden * s.input + 4 * s.hidden * s.hidden + 8 * s.hidden;
      cost.flops += t * (4 * s.hidden * s.input + 4 * s.hidden * s.hidden);
      if (opt.verbose) cost.flops += t * 5 * s.hidden;  // four gate nonlinearities and tanh(c)
      concat += s.hidden;
    }
    cost.params += d * concat + d;
    cost.flops += t * concat * d;  // out_proj
    if (opt.verbose) cost.flops += t * d;  // LN
  }
  return cost;
}

}  // namespace

CostReport cost_report(const ModelConfig& c, Variant v, int tokens, std::span<const PruneMask> masks, FlopOptions options) {
  check_masks(c, masks);
  if (tokens < 1) throw std::invalid_argument("profiler: tokens must be >= 1");
  CostReport r;
  r.variant = v;
  r.tokens = tokens;
  const std::int64_t d = c.dim;
  const std::int64_t t = tokens;
  const std::int64_t t_config = c.tokens();
  // Positional table is sized for the configured image; the patch projection
  // runs once per patch of the evaluated sequence.
  r.embed.params = static_cast<std::int64_t>(c.patch_features()) * d + d + d + t_config * d;
  r.embed.flops = (t - 1) * c.patch_features() * d;
  r.head.params = 2 * d + d * c.num_classes + c.num_classes;
  r.head.flops = d * c.num_classes;
  if (options.verbose) r.head.flops += d;
  r.params = r.embed.params + r.head.params;
  r.flops = r.embed.flops + r.head.flops;
  for (int l = 0; l < c.layers; ++l) {
    r.layers.push_back(layer_cost(c, v, t, masks, l, options));
    r.params += r.layers.back().params;
    r.flops += r.layers.back().flops;
  }
  if (options.convention == FlopConvention::two_per_mac) {
    r.flops *= 2;
    r.embed.flops *= 2;
    r.head.flops *= 2;
    for (auto& l : r.layers) l.flops *= 2;
  }
  return r;
}

std::int64_t count_params(const ModelConfig& c, Variant v, std::span<const PruneMask> masks) {
  return cost_report(c, v, c.tokens(), masks).params;
}

std::int64_t count_flops(const ModelConfig& c, Variant v, int tokens, std::span<const PruneMask> masks, FlopOptions options) {
  return cost_report(c, v, tokens, masks, options).flops;
}

std::string cost_csv(const CostReport& r) {
  std::ostringstream out;
  out << "section,variant,tokens,params,flops\n";
  const std::string variant(to_string(r.variant));
  out << "embed," << variant << ',' << r.tokens << ',' << r.embed.params << ',' << r.embed.flops << '\n';
  for (std::size_t l = 0; l < r.layers.size(); ++l) {
    out << "layer" << l << ',' << variant << ',' << r.tokens << ',' << r.layers[l].params << ',' << r.layers[l].flops << '\n';
  }
  out << "head," << variant << ',' << r.tokens << ',' << r.head.params << ',' << r.head.flops << '\n';
  out << "total," << variant << ',' << r.tokens << ',' << r.params << ',' << r.flops << '\n';
  return out.str();
}

std::string cost_table(const CostReport& r) {
  std::ostringstream out;
  out << std::fixed << std::setprecision(3);
  out << "variant: " << to_string(r.variant) << "  tokens: " << r.tokens << '\n';
  out << "params: " << static_cast<double>(r.params) / 1e6 << " M\n";
  out << "flops:  " << static_cast<double>(r.flops) / 1e9 << " G\n";
  if (r.latency) {
    const auto& s = *r.latency;
    out << "latency (ms): median " << s.median_ms << "  mean " << s.mean_ms << "  p10 " << s.p10_ms << "  p90 " << s.p90_ms
        << "  [runs " << s.runs << ", warmups " << s.warmups << ", threads " << s.threads << ", " << s.precision << "]\n";
  }
  return out.str();
}

LatencyStats bench_latency(const std::function<void()>& fn, int warmups, int runs) {
  if (runs <= 0) throw std::invalid_argument("bench_latency: runs must be positive");
  if (warmups < 0) throw std::invalid_argument("bench_latency: warmups must be non-negative");
  for (int i = 0; i < warmups; ++i) fn();
  std::vector<double> samples;
  samples.reserve(static_cast<std::size_t>(runs));
  for (int i = 0; i < runs; ++i) {
    const auto start = std::chrono::steady_clock::now();
    fn();
    const auto stop = std::chrono::steady_clock::now();
    samples.push_back(std::chrono::duration<double, std::milli>(stop - start).count());
  }
  LatencyStats s;
  s.runs = runs;
  s.warmups = warmups;
  s.threads = requested_threads();
  double total = 0.0;
  for (double v : samples) total += v;
  s.mean_ms = total / runs;
  std::sort(samples.begin(), samples.end());
  auto quantile = [&](double q) {
    const double pos = q * (samples.size() - 1);
    const auto lo = static_cast<std::size_t>(pos);
    const auto hi = std::min(lo + 1, samples.size() - 1);
    return samples[lo] + (pos - lo) * (samples[hi] - samples[lo]);
  };
  s.median_ms = quantile(0.5);
  s.p10_ms = quantile(0.1);
  s.p90_ms = quantile(0.9);
  return s;
}

int requested_threads() {
  if (const char* env = std::getenv("FAR_THREADS")) {
    const int n = std::atoi(env);
    if (n > 0) return n;
  }
  return 1;
}

}  // namespace far
