#pragma once

#include "far/config.hpp"
#include "far/mask.hpp"

#include <cstdint>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

namespace far {

/// How multiply-accumulates are reported. `mac` counts one per MAC, the
/// convention behind the published DeiT/FAR model statistics.
enum class FlopConvention { mac, two_per_mac };

struct FlopOptions {
  FlopConvention convention = FlopConvention::mac;
  /// Also count normalization, softmax and gate nonlinearities (one per element).
  bool verbose = false;
};

struct LayerCost {
  std::int64_t params = 0;
  std::int64_t flops = 0;
};

struct LatencyStats {
  double median_ms = 0.0;
  double mean_ms = 0.0;
  double p10_ms = 0.0;
  double p90_ms = 0.0;
  int runs = 0;
  int warmups = 0;
  int threads = 1;
  std::string precision;
};

struct CostReport {
  Variant variant = Variant::attention;
  int tokens = 0;
  std::int64_t params = 0;
  std::int64_t flops = 0;
  LayerCost embed;
  LayerCost head;
  std::vector<LayerCost> layers;
  std::optional<LatencyStats> latency;
};

/// Closed-form parameter count. `masks` (one per layer, or empty) restricts
/// FAR blocks to retained hidden units.
std::int64_t count_params(const ModelConfig& config, Variant variant, std::span<const PruneMask> masks = {});

/// Closed-form forward cost for a sequence of `tokens` (CLS included).
std::int64_t count_flops(const ModelConfig& config, Variant variant, int tokens, std::span<const PruneMask> masks = {},
                         FlopOptions options = {});

CostReport cost_report(const ModelConfig& config, Variant variant, int tokens, std::span<const PruneMask> masks = {},
                       FlopOptions options = {});

std::string cost_csv(const CostReport& report);
std::string cost_table(const CostReport& report);

/// Runs `fn` `warmups` times untimed, then `runs` timed iterations.
LatencyStats bench_latency(const std::function<void()>& fn, int warmups = 30, int runs = 100);

/// Thread count requested through FAR_THREADS (default 1).
int requested_threads();

}  // namespace far
