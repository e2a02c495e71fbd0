#pragma once

#include "far/dataset.hpp"
#include "far/hoyer.hpp"

#include <cmath>
#include <limits>
#include <numbers>
#include <optional>
#include <random>

namespace far {

enum class Phase : std::uint8_t { teacher, distill, finetune, prune_regularize, prune_finetune };

std::string_view to_string(Phase p);

struct PhaseConfig {
  Phase phase = Phase::distill;
  int epochs = 1;
  int batch_size = 64;
  double lr = 5e-4;
  double warmup_lr = 1e-5;
  int warmup_epochs = 0;
  double min_lr = 1e-6;
  double weight_decay = 0.05;
  double lambda = 1.0;     // similarity weight, distill only
  double reg_coeff = 0.0;  // Hoyer weight, prune_regularize only
  PenaltyGroups groups = PenaltyGroups::mandatory;
  PenaltyReduction reduction = PenaltyReduction::sum;
  CosineAxis cosine_axis = CosineAxis::token;
  std::uint64_t seed = 7;
  /// Emit an epoch-0 row evaluated before any update.
  bool log_initial = false;
  /// Evaluate train accuracy with a separate pass after each epoch.
  bool eval_train = true;

  static PhaseConfig teacher(const RunConfig& rc);
  static PhaseConfig distill(const RunConfig& rc);
  static PhaseConfig finetune(const RunConfig& rc);
  static PhaseConfig prune_regularize(const RunConfig& rc);
  static PhaseConfig prune_finetune(const RunConfig& rc);
};

struct EpochLog {
  int epoch = 0;
  Phase phase = Phase::distill;
  double loss = 0.0;
  std::vector<double> sim;  // per block; empty when the teacher is not consulted
  double train_acc = 0.0;
  double val_acc = 0.0;

  double sim_mean() const;
};

struct TrainStats {
  std::int64_t teacher_forwards = 0;
  std::int64_t steps = 0;
};

class DivergenceError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

std::string log_csv(std::span<const EpochLog> rows);

/// Learning rate at `step` of `total`: linear warmup from warmup_lr to lr,
/// then cosine decay to min_lr.
double scheduled_lr(const PhaseConfig& cfg, std::int64_t step, std::int64_t total, std::int64_t warmup);

/// Decoupled weight decay Adam. Decay applies to matrices only (rank >= 2).
template <typename Scalar>
class AdamW {
 public:
  AdamW(std::vector<Tensor<Scalar>> params, double weight_decay, double beta1 = 0.9, double beta2 = 0.999, double eps = 1e-8)
      : params_(std::move(params)), wd_(weight_decay), b1_(beta1), b2_(beta2), eps_(eps) {
    for (const auto& p : params_) {
      m_.push_back(MatrixX<Scalar>::Zero(p.value().rows(), p.value().cols()));
      v_.push_back(MatrixX<Scalar>::Zero(p.value().rows(), p.value().cols()));
    }
  }

  void zero_grad() {
    for (auto& p : params_) p.zero_grad();
  }

  void step(double lr) {
    ++t_;
    const double c1 = 1.0 - std::pow(b1_, static_cast<double>(t_));
    const double c2 = 1.0 - std::pow(b2_, static_cast<double>(t_));
    for (std::size_t i = 0; i < params_.size(); ++i) {
      auto& p = params_[i];
      if (!p.has_grad()) continue;
      auto& w = p.mutable_value();
      const auto& g = p.grad();
      m_[i] = Scalar(b1_) * m_[i] + Scalar(1 - b1_) * g;
      v_[i] = Scalar(b2_) * v_[i] + Scalar(1 - b2_) * g.cwiseAbs2();
      if (p.rank() >= 2 && wd_ > 0.0) w *= Scalar(1.0 - lr * wd_);
      w.array() -= Scalar(lr) * (m_[i].array() / Scalar(c1)) / ((v_[i].array() / Scalar(c2)).sqrt() + Scalar(eps_));
    }
  }

  const std::vector<Tensor<Scalar>>& params() const { return params_; }

 private:
  std::vector<Tensor<Scalar>> params_;
  std::vector<MatrixX<Scalar>> m_;
  std::vector<MatrixX<Scalar>> v_;
  double wd_, b1_, b2_, eps_;
  std::int64_t t_ = 0;
};

/// 1 - cos between teacher and student block outputs. Per-token mode takes
/// the cosine of each row (over D) and averages over rows; whole mode
/// flattens each sequence of `tokens` rows. Zero-norm vectors give cos = 0.
template <typename Scalar>
Tensor<Scalar> similarity_loss(const MatrixX<Scalar>& teacher, const Tensor<Scalar>& student,
                               CosineAxis axis = CosineAxis::token, int tokens = 0) {
  const auto& s = student.value();
  if (teacher.rows() != s.rows() || teacher.cols() != s.cols()) {
    throw DimensionError("similarity_loss: teacher " + std::to_string(teacher.rows()) + "x" + std::to_string(teacher.cols()) +
                         " vs student " + shape_string(student.shape()));
  }
  // Each group is a contiguous run of `width` elements in row-major storage.
  const Eigen::Index width = axis == CosineAxis::token ? s.cols() : s.cols() * (tokens > 0 ? tokens : s.rows());
  if (s.size() % width != 0) throw DimensionError("similarity_loss: rows not divisible by tokens");
  const Eigen::Index groups = s.size() / width;
  using Vec = Eigen::Map<const Eigen::Matrix<Scalar, 1, Eigen::Dynamic>>;
  std::vector<Scalar> cos(static_cast<std::size_t>(groups));
  std::vector<Scalar> tn(static_cast<std::size_t>(groups));
  std::vector<Scalar> sn(static_cast<std::size_t>(groups));
  int degenerate = 0;
  Scalar total = Scalar(0);
  for (Eigen::Index k = 0; k < groups; ++k) {
    Vec tv(teacher.data() + k * width, width);
    Vec sv(s.data() + k * width, width);
    const auto i = static_cast<std::size_t>(k);
    const Scalar t2 = tv.squaredNorm();
    const Scalar s2 = sv.squaredNorm();
    tn[i] = std::sqrt(t2);
    sn[i] = std::sqrt(s2);
    if (t2 == Scalar(0) || s2 == Scalar(0)) {
      cos[i] = Scalar(0);
      ++degenerate;
    } else {
      // sqrt(a * a) == a exactly, so identical inputs give cos == 1 exactly.
      cos[i] = tv.dot(sv) / std::sqrt(t2 * s2);
    }
    total += cos[i];
  }
  if (degenerate > 0) std::clog << "similarity_loss: " << degenerate << " zero-norm vector(s); cosine taken as 0\n";
  MatrixX<Scalar> out(1, 1);
  out(0, 0) = Scalar(1) - total / Scalar(groups);
  return detail::make_result<Scalar>(
      Shape{}, std::move(out), {student},
      [student, teacher, width, groups, cos = std::move(cos), tn = std::move(tn), sn = std::move(sn)](const MatrixX<Scalar>& g) {
        const auto& s = student.value();
        MatrixX<Scalar> d = MatrixX<Scalar>::Zero(s.rows(), s.cols());
        const Scalar factor = -g(0, 0) / Scalar(groups);
        for (Eigen::Index k = 0; k < groups; ++k) {
          const auto i = static_cast<std::size_t>(k);
          if (tn[i] == Scalar(0) || sn[i] == Scalar(0)) continue;
          Vec tv(teacher.data() + k * width, width);
          Vec sv(s.data() + k * width, width);
          Eigen::Map<Eigen::Matrix<Scalar, 1, Eigen::Dynamic>> dv(d.data() + k * width, width);
          dv = factor * (tv / (tn[i] * sn[i]) - cos[i] * sv / (sn[i] * sn[i]));
        }
        detail::accumulate(student, d);
      });
}

/// lambda * sum(sim) + ce.
template <typename Scalar>
Tensor<Scalar> combined_loss(const std::vector<Tensor<Scalar>>& sim, const Tensor<Scalar>& ce, double lambda) {
  if (lambda < 0.0) throw std::invalid_argument("combined_loss: lambda must be non-negative");
  if (sim.empty() || lambda == 0.0) return ce;
  std::vector<Tensor<Scalar>> terms;
  for (const auto& s : sim) terms.push_back(reshape(s, Shape{1}));
  return add(scale(sum(concat(terms, 0)), Scalar(lambda)), ce);
}

template <typename Scalar>
Tensor<Scalar> combined_loss(const std::vector<Tensor<Scalar>>& sim, const Tensor<Scalar>& logits, std::span<const int> labels,
                             double lambda) {
  return combined_loss(sim, cross_entropy(logits, labels), lambda);
}

/// Parameters owned by the substitute blocks.
template <typename Scalar>
std::vector<Tensor<Scalar>> far_parameters(const VisionModel<Scalar>& m) {
  std::vector<Tensor<Scalar>> out;
  for (const auto& p : named_parameters(m))
    if (p.name.rfind("far.", 0) == 0) out.push_back(p.tensor);
  return out;
}

/// Sets requires_grad for `phase` and returns the trainable tensors. Only
/// flags change; values are untouched.
template <typename Scalar>
std::vector<Tensor<Scalar>> freeze_plan(VisionModel<Scalar>& m, Phase phase) {
  if (phase == Phase::teacher && m.variant() != Variant::attention) throw ConfigError("teacher phase needs an attention model");
  if (phase != Phase::teacher && m.variant() != Variant::far) throw ConfigError(std::string(to_string(phase)) + " phase needs a FAR model");
  std::vector<Tensor<Scalar>> trainable;
  for (auto& p : named_parameters(m)) {
    const bool on = phase != Phase::distill || p.name.rfind("far.", 0) == 0;
    p.tensor.set_requires_grad(on);
    if (on) trainable.push_back(p.tensor);
  }
  return trainable;
}

template <typename Scalar>
double evaluate_accuracy(const VisionModel<Scalar>& m, const Dataset& data, std::span<const int> indices, int batch_size = 256) {
  if (indices.empty()) return 0.0;
  NoGradGuard no_grad;
  std::size_t correct = 0;
  for (std::size_t start = 0; start < indices.size(); start += static_cast<std::size_t>(batch_size)) {
    const auto chunk = indices.subspan(start, std::min<std::size_t>(static_cast<std::size_t>(batch_size), indices.size() - start));
    const auto pred = argmax_rows(model_forward(m, gather_images<Scalar>(data, chunk)).logits.value());
    for (std::size_t i = 0; i < chunk.size(); ++i) correct += pred[i] == data.labels[static_cast<std::size_t>(chunk[i])];
  }
  return static_cast<double>(correct) / static_cast<double>(indices.size());
}

/// Mean per-block cosine similarity (1 - similarity loss) of student and
/// teacher block outputs over `indices`.
template <typename Scalar>
std::vector<double> evaluate_similarity(const VisionModel<Scalar>& student, const VisionModel<Scalar>& teacher,
                                        const Dataset& data, std::span<const int> indices,
                                        CosineAxis axis = CosineAxis::token, int batch_size = 256) {
  NoGradGuard no_grad;
  std::vector<double> cos(static_cast<std::size_t>(student.config.layers), 0.0);
  std::size_t seen = 0;
  for (std::size_t start = 0; start < indices.size(); start += static_cast<std::size_t>(batch_size)) {
    const auto chunk = indices.subspan(start, std::min<std::size_t>(static_cast<std::size_t>(batch_size), indices.size() - start));
    const auto images = gather_images<Scalar>(data, chunk);
    const auto t = teacher_forward(teacher, images);
    const auto s = model_forward(student, images);
    for (std::size_t l = 0; l < cos.size(); ++l) {
      const double loss = similarity_loss(t.block_outputs[l].value(), s.block_outputs[l], axis, student.tokens()).item();
      cos[l] += (1.0 - loss) * static_cast<double>(chunk.size());
    }
    seen += chunk.size();
  }
  for (auto& c : cos) c /= static_cast<double>(std::max<std::size_t>(seen, 1));
  return cos;
}

namespace detail {

template <typename Scalar>
struct BatchLoss {
  Tensor<Scalar> loss;
  std::vector<double> sim;
  std::vector<int> pred;
};

template <typename Scalar>
BatchLoss<Scalar> phase_loss(const VisionModel<Scalar>& m, const VisionModel<Scalar>* teacher, const MatrixX<Scalar>& images,
                             std::span<const int> labels, const PhaseConfig& cfg, TrainStats* stats) {
  BatchLoss<Scalar> out;
  auto fwd = model_forward(m, images);
  auto ce = cross_entropy(fwd.logits, labels);
  out.pred = argmax_rows(fwd.logits.value());
  if (cfg.phase == Phase::distill && cfg.lambda > 0.0) {
    if (!teacher) throw std::invalid_argument("distill phase with lambda > 0 needs a teacher");
    ForwardResult<Scalar> t;
    {
      NoGradGuard no_grad;
      t = teacher_forward(*teacher, images);
    }
    if (stats) ++stats->teacher_forwards;
    std::vector<Tensor<Scalar>> sims;
    for (std::size_t l = 0; l < fwd.block_outputs.size(); ++l) {
      sims.push_back(similarity_loss(t.block_outputs[l].value(), fwd.block_outputs[l], cfg.cosine_axis, m.tokens()));
      out.sim.push_back(static_cast<double>(sims.back().item()));
    }
    out.loss = combined_loss(sims, ce, cfg.lambda);
  } else if (cfg.phase == Phase::prune_regularize && cfg.reg_coeff > 0.0) {
    out.loss = add(ce, scale(hoyer_regularizer(m, cfg.groups, cfg.reduction), Scalar(cfg.reg_coeff)));
  } else {
    out.loss = ce;
  }
  return out;
}

template <typename Scalar>
EpochLog evaluate_epoch(const VisionModel<Scalar>& m, const VisionModel<Scalar>* teacher, const Dataset& data,
                        const PhaseConfig& cfg, TrainStats* stats) {
  NoGradGuard no_grad;
  EpochLog log;
  log.phase = cfg.phase;
  std::size_t correct = 0;
  double loss = 0.0;
  std::span<const int> idx(data.train);
  for (std::size_t start = 0; start < idx.size(); start += static_cast<std::size_t>(cfg.batch_size)) {
    const auto chunk = idx.subspan(start, std::min<std::size_t>(static_cast<std::size_t>(cfg.batch_size), idx.size() - start));
    const auto labels = gather_labels(data, chunk);
    auto r = phase_loss(m, teacher, gather_images<Scalar>(data, chunk), labels, cfg, stats);
    const double w = static_cast<double>(chunk.size());
    loss += static_cast<double>(r.loss.item()) * w;
    if (log.sim.empty()) log.sim.assign(r.sim.size(), 0.0);
    for (std::size_t l = 0; l < r.sim.size(); ++l) log.sim[l] += r.sim[l] * w;
    for (std::size_t i = 0; i < chunk.size(); ++i) correct += r.pred[i] == labels[i];
  }
  const double n = static_cast<double>(std::max<std::size_t>(idx.size(), 1));
  log.loss = loss / n;
  for (auto& s : log.sim) s /= n;
  log.train_acc = static_cast<double>(correct) / n;
  log.val_acc = evaluate_accuracy(m, data, data.val);
  return log;
}

}  // namespace detail

/// Trains `m` for one phase. Returns one log row per epoch (plus an epoch-0
/// row when cfg.log_initial is set). Loss and similarity columns are means
/// over the epoch's training batches; accuracies come from evaluation passes
/// after the epoch unless eval_train is off, in which case train_acc is the
/// running accuracy. Any mask stored on the model is re-applied after every
/// step, so pruned coordinates stay exactly zero.
template <typename Scalar>
std::vector<EpochLog> run_phase(VisionModel<Scalar>& m, const VisionModel<Scalar>* teacher, const Dataset& data,
                                const PhaseConfig& cfg, TrainStats* stats = nullptr) {
  if (cfg.epochs < 0 || cfg.batch_size <= 0) throw std::invalid_argument("run_phase: epochs >= 0 and batch_size > 0 required");
  if (data.train.empty()) throw std::invalid_argument("run_phase: empty training split");
  if (cfg.lambda < 0.0) throw std::invalid_argument("run_phase: lambda must be non-negative");
  if (teacher && cfg.phase == Phase::distill) {
    if (teacher->config.layers != m.config.layers || teacher->config.dim != m.config.dim || teacher->tokens() != m.tokens()) {
      throw DimensionError("run_phase: teacher and student geometry differ");
    }
  }
  auto trainable = freeze_plan(m, cfg.phase);
  AdamW<Scalar> opt(trainable, cfg.weight_decay);
  const bool teacher_needed = cfg.phase == Phase::distill && cfg.lambda > 0.0;
  const VisionModel<Scalar>* t = teacher_needed ? teacher : nullptr;

  std::vector<EpochLog> logs;
  if (cfg.log_initial) logs.push_back(detail::evaluate_epoch(m, t, data, cfg, stats));

  const auto n = static_cast<std::int64_t>(data.train.size());
  const std::int64_t per_epoch = (n + cfg.batch_size - 1) / cfg.batch_size;
  const std::int64_t total = per_epoch * cfg.epochs;
  const std::int64_t warmup = per_epoch * std::min(cfg.warmup_epochs, cfg.epochs);
  std::vector<int> order(data.train);
  std::mt19937_64 rng(cfg.seed);
  std::int64_t step = 0;
  for (int epoch = 1; epoch <= cfg.epochs; ++epoch) {
    std::shuffle(order.begin(), order.end(), rng);
    EpochLog log;
    log.epoch = epoch;
    log.phase = cfg.phase;
    double loss_sum = 0.0;
    std::size_t correct = 0;
    for (std::int64_t start = 0; start < n; start += cfg.batch_size) {
      std::span<const int> chunk(order.data() + start, static_cast<std::size_t>(std::min<std::int64_t>(cfg.batch_size, n - start)));
      const auto labels = gather_labels(data, chunk);
      opt.zero_grad();
      auto r = detail::phase_loss(m, t, gather_images<Scalar>(data, chunk), labels, cfg, stats);
      const double value = static_cast<double>(r.loss.item());
      if (!std::isfinite(value)) {
        throw DivergenceError(std::string(to_string(cfg.phase)) + ": non-finite loss at epoch " + std::to_string(epoch) +
                              ", step " + std::to_string(step));
      }
      backward(r.loss);
      opt.step(scheduled_lr(cfg, step, total, warmup));
      apply_masks(m);
      ++step;
      if (stats) ++stats->steps;
      const double w = static_cast<double>(chunk.size());
      loss_sum += value * w;
      if (log.sim.empty()) log.sim.assign(r.sim.size(), 0.0);
      for (std::size_t l = 0; l < r.sim.size(); ++l) log.sim[l] += r.sim[l] * w;
      for (std::size_t i = 0; i < chunk.size(); ++i) correct += r.pred[i] == labels[i];
    }
    log.loss = loss_sum / static_cast<double>(n);
    for (auto& s : log.sim) s /= static_cast<double>(n);
    log.train_acc = cfg.eval_train ? evaluate_accuracy(m, data, data.train) : static_cast<double>(correct) / static_cast<double>(n);
    log.val_acc = evaluate_accuracy(m, data, data.val);
    logs.push_back(std::move(log));
  }
  return logs;
}

}  // namespace far
