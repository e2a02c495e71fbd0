#include "far/trainer.hpp"

#include <algorithm>
#include <sstream>

namespace far {

std::string_view to_string(Phase p) {
  switch (p) {
    case Phase::teacher: return "teacher";
    case Phase::distill: return "distill";
    case Phase::finetune: return "finetune";
    case Phase::prune_regularize: return "prune_regularize";
    case Phase::prune_finetune: return "prune_finetune";
  }
  return "unknown";
}

namespace {

PhaseConfig base(const RunConfig& rc, Phase phase, int epochs, double lr) {
  PhaseConfig c;
  c.phase = phase;
  c.epochs = epochs;
  c.lr = lr;
  c.batch_size = rc.train.batch_size;
  c.weight_decay = rc.train.weight_decay;
  c.warmup_lr = std::min(rc.train.warmup_lr, lr);
  c.min_lr = std::min(rc.train.min_lr, lr);
  c.seed = rc.train.seed;
  // Short desk phases keep at most a fifth of their steps for warmup.
  c.warmup_epochs = std::min(rc.train.warmup_epochs, epochs / 5);
  c.cosine_axis = rc.distill.cosine_axis;
  return c;
}

}  // namespace

PhaseConfig PhaseConfig::teacher(const RunConfig& rc) {
  return base(rc, Phase::teacher, rc.train.teacher_epochs, rc.train.teacher_lr);
}

PhaseConfig PhaseConfig::distill(const RunConfig& rc) {
  auto c = base(rc, Phase::distill, rc.distill.epochs, rc.distill.lr);
  c.lambda = rc.distill.lambda;
  c.seed += 1;
  return c;
}

PhaseConfig PhaseConfig::finetune(const RunConfig& rc) {
  auto c = base(rc, Phase::finetune, rc.distill.finetune_epochs, rc.distill.finetune_lr);
  c.seed += 2;
  return c;
}

PhaseConfig PhaseConfig::prune_regularize(const RunConfig& rc) {
  auto c = base(rc, Phase::prune_regularize, rc.prune.reg_epochs, rc.prune.lr);
  c.reg_coeff = rc.prune.reg_coeff;
  c.groups = rc.prune.groups;
  c.reduction = rc.prune.reduction;
  c.seed += 3;
  return c;
}

PhaseConfig PhaseConfig::prune_finetune(const RunConfig& rc) {
  auto c = base(rc, Phase::prune_finetune, rc.prune.finetune_epochs, rc.prune.lr);
  c.seed += 4;
  return c;
}

double EpochLog::sim_mean() const {
  if (sim.empty()) return std::numeric_limits<double>::quiet_NaN();
  double total = 0.0;
  for (double s : sim) total += s;
  return total / static_cast<double>(sim.size());
}

std::string log_csv(std::span<const EpochLog> rows) {
  std::size_t blocks = 0;
  for (const auto& r : rows) blocks = std::max(blocks, r.sim.size());
  std::ostringstream out;
  out << "epoch,phase,loss,sim_mean";
  for (std::size_t l = 0; l < blocks; ++l) out << ",sim_" << l;
  out << ",train_acc,val_acc\n";
  out.precision(8);
  for (const auto& r : rows) {
    out << r.epoch << ',' << to_string(r.phase) << ',' << r.loss << ',';
    if (!r.sim.empty()) out << r.sim_mean();
    for (std::size_t l = 0; l < blocks; ++l) {
      out << ',';
      if (l < r.sim.size()) out << r.sim[l];
    }
    out << ',' << r.train_acc << ',' << r.val_acc << '\n';
  }
  return out.str();
}

double scheduled_lr(const PhaseConfig& cfg, std::int64_t step, std::int64_t total, std::int64_t warmup) {
  if (warmup > 0 && step < warmup) {
    return cfg.warmup_lr + (cfg.lr - cfg.warmup_lr) * static_cast<double>(step) / static_cast<double>(warmup);
  }
  const std::int64_t span = std::max<std::int64_t>(total - warmup, 1);
  const double progress = std::clamp(static_cast<double>(step - warmup) / static_cast<double>(span), 0.0, 1.0);
  return cfg.min_lr + 0.5 * (cfg.lr - cfg.min_lr) * (1.0 + std::cos(std::numbers::pi * progress));
}

}  // namespace far
