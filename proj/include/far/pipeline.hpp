#pragma once

#include "far/trainer.hpp"

namespace far {

struct PruneOptions {
  PhaseConfig regularize;
  double threshold = 1e-4;
  ThresholdMode mode = ThresholdMode::absolute;
  PhaseConfig finetune;

  static PruneOptions from(const RunConfig& rc) {
    return {PhaseConfig::prune_regularize(rc), rc.prune.threshold, rc.prune.threshold_mode, PhaseConfig::prune_finetune(rc)};
  }
};

struct PruneReport {
  std::vector<PruneMask> masks;
  std::vector<RetentionRow> retention;
  std::vector<EpochLog> logs;
  double accuracy_before = 0.0;  // val accuracy of the input model
  double accuracy_after = 0.0;   // val accuracy after the final finetune

  double mean_retention() const { return far::mean_retention(retention); }
};

/// Regularize with the Hoyer penalty, threshold-prune, then finetune with
/// pruned coordinates held at zero. `m` is modified in place.
template <typename Scalar>
PruneReport three_stage_pipeline(VisionModel<Scalar>& m, const Dataset& data, const PruneOptions& opt) {
  if (m.variant() != Variant::far) throw ConfigError("three_stage_pipeline: needs a FAR model");
  if (opt.regularize.phase != Phase::prune_regularize || opt.finetune.phase != Phase::prune_finetune) {
    throw std::invalid_argument("three_stage_pipeline: phase configs must be prune_regularize and prune_finetune");
  }
  PruneReport report;
  report.accuracy_before = evaluate_accuracy(m, data, data.val);
  auto logs = run_phase<Scalar>(m, nullptr, data, opt.regularize);
  report.logs.insert(report.logs.end(), logs.begin(), logs.end());
  report.masks = prune_by_threshold(m, opt.threshold, opt.mode, opt.regularize.groups);
  logs = run_phase<Scalar>(m, nullptr, data, opt.finetune);
  report.logs.insert(report.logs.end(), logs.begin(), logs.end());
  report.retention = retention_report(report.masks);
  report.accuracy_after = evaluate_accuracy(m, data, data.val);
  return report;
}

}  // namespace far
