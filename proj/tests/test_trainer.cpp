#include "doctest.h"

#include "far/pipeline.hpp"
#include "gradcheck.hpp"

#include <limits>
#include <set>

using namespace far;
using far::testing::gradcheck;
using far::testing::random_matrix;
using far::testing::random_tensor;

namespace {

ModelConfig small_config() {
  ModelConfig c;
  c.layers = 2;
  c.dim = 8;
  c.heads = 2;
  c.head_dim = 4;
  c.patch_size = 4;
  c.image_size = 8;
  c.channels = 3;
  c.num_classes = 4;
  return c;
}

Dataset small_data(int n = 80) { return synth_dataset(3, n, 4, 8, 3); }

PhaseConfig quick(Phase phase, int epochs = 1) {
  PhaseConfig p;
  p.phase = phase;
  p.epochs = epochs;
  p.batch_size = 16;
  p.lr = 1e-3;
  return p;
}

}  // namespace

TEST_CASE("similarity loss closed cases") {
  std::mt19937_64 rng(1);
  const auto t = random_matrix(5, 6, rng);
  CHECK(similarity_loss(t, Tensor<double>::from_matrix(t)).item() == 0.0);
  CHECK(similarity_loss(t, Tensor<double>::from_matrix(MatrixX<double>(-t))).item() == 2.0);
  CHECK(similarity_loss(t, Tensor<double>::from_matrix(t), CosineAxis::whole, 5).item() == 0.0);

  MatrixX<double> a(2, 4);
  MatrixX<double> b(2, 4);
  a << 1, 0, 2, 0, 3, 1, 0, 0;
  b << 0, 3, 0, -1, -1, 3, 7, 0;
  CHECK(similarity_loss(a, Tensor<double>::from_matrix(b)).item() == 1.0);
  CHECK(similarity_loss(a, Tensor<double>::from_matrix(b), CosineAxis::whole, 2).item() == 1.0);
}

TEST_CASE("similarity loss per-token versus whole-sequence") {
  MatrixX<double> a(2, 2);
  MatrixX<double> b(2, 2);
  a << 1, 0, 1, 0;
  // Token cosines 1 and 0; the flattened cosine differs because norms differ.
  b << 2, 0, 0, 1;
  CHECK(similarity_loss(a, Tensor<double>::from_matrix(b)).item() == doctest::Approx(0.5).epsilon(1e-15));
  CHECK(similarity_loss(a, Tensor<double>::from_matrix(b), CosineAxis::whole, 2).item() ==
        doctest::Approx(1.0 - 2.0 / (std::sqrt(2.0) * std::sqrt(5.0))).epsilon(1e-15));
}

TEST_CASE("zero-norm token counts as cosine 0") {
  MatrixX<double> a(2, 3);
  a << 1, 2, 3, 4, 5, 6;
  MatrixX<double> b = a;
  b.row(1).setZero();
  auto s = Tensor<double>::from_matrix(b, true);
  auto loss = similarity_loss(a, s);
  CHECK(loss.item() == 0.5);
  backward(loss);
  CHECK(s.grad().row(1).cwiseAbs().maxCoeff() == 0.0);
}

TEST_CASE("similarity loss gradient") {
  std::mt19937_64 rng(2);
  const auto t = random_matrix(6, 5, rng);
  auto s = random_tensor({6, 5}, rng);
  for (auto axis : {CosineAxis::token, CosineAxis::whole}) {
    CHECK(gradcheck([&] { return similarity_loss(t, s, axis, 3); }, {s}, 30, 3).worst <= 1e-6);
  }
}

TEST_CASE("similarity loss shape mismatch") {
  MatrixX<double> a = MatrixX<double>::Ones(2, 3);
  CHECK_THROWS_AS(similarity_loss(a, Tensor<double>::from_matrix(MatrixX<double>(MatrixX<double>::Ones(3, 2)))), DimensionError);
}

TEST_CASE("combined loss arithmetic") {
  const std::vector<Tensor<double>> sims{Tensor<double>::scalar(0.1), Tensor<double>::scalar(0.2)};
  CHECK(combined_loss(sims, Tensor<double>::scalar(0.7), 1.0).item() == doctest::Approx(1.0).epsilon(1e-15));
  const auto ce = Tensor<double>::scalar(0.7);
  CHECK(combined_loss(sims, ce, 0.0).item() == 0.7);
  CHECK_THROWS_AS(combined_loss(sims, ce, -1.0), std::invalid_argument);

  // Perfect match and a saturated correct prediction.
  const std::vector<Tensor<double>> zero{Tensor<double>::scalar(0.0), Tensor<double>::scalar(0.0)};
  auto logits = Tensor<double>::from_values({1, 2}, {1000.0, 0.0});
  const std::vector<int> label{0};
  CHECK(combined_loss(zero, logits, label, 1.0).item() == 0.0);
}

TEST_CASE("combined loss is linear in lambda") {
  // Dyadic values make the identity exact.
  const std::vector<Tensor<double>> sims{Tensor<double>::scalar(0.375), Tensor<double>::scalar(0.125), Tensor<double>::scalar(0.5)};
  const auto ce = Tensor<double>::scalar(1.25);
  for (double lambda : {0.0, 0.5, 1.0, 2.0, 4.0}) {
    CHECK(combined_loss(sims, ce, lambda).item() - combined_loss(sims, ce, 0.0).item() == lambda * 1.0);
  }
  std::mt19937_64 rng(4);
  std::uniform_real_distribution<double> u(0.0, 2.0);
  for (int trial = 0; trial < 100; ++trial) {
    std::vector<Tensor<double>> s;
    double total = 0.0;
    for (int i = 0; i < 4; ++i) {
      s.push_back(Tensor<double>::scalar(u(rng)));
      total += s.back().item();
    }
    const auto c = Tensor<double>::scalar(u(rng));
    const double lambda = u(rng);
    CHECK(std::abs(combined_loss(s, c, lambda).item() - combined_loss(s, c, 0.0).item() - lambda * total) <= 1e-14);
  }
}

TEST_CASE("oracle injection gives zero similarity") {
  const auto c = small_config();
  const auto teacher = make_teacher<double>(c, 5);
  const auto data = small_data();
  const auto images = gather_images<double>(data, std::span<const int>(data.train).first(16));
  const auto t = teacher_forward(teacher, images);
  double total = 0.0;
  for (const auto& out : t.block_outputs) {
    total += similarity_loss(out.value(), Tensor<double>::from_matrix(out.value()), CosineAxis::token, teacher.tokens()).item();
  }
  CHECK(total == 0.0);
}

TEST_CASE("freeze plan") {
  const auto c = small_config();
  const auto data = small_data();
  const auto images = gather_images<double>(data, std::span<const int>(data.train).first(8));
  const auto labels = gather_labels(data, std::span<const int>(data.train).first(8));
  auto teacher = make_teacher<double>(c, 6);
  auto m = replace_attention(teacher, 7);

  auto snapshot = [&] {
    std::vector<MatrixX<double>> v;
    for (const auto& p : named_parameters(m)) v.push_back(p.tensor.value());
    return v;
  };
  const auto before = snapshot();

  SUBCASE("distill trains only the substitute blocks") {
    const auto trainable = freeze_plan(m, Phase::distill);
    CHECK(trainable.size() == far_parameters(m).size());
    auto cfg = quick(Phase::distill);
    backward(detail::phase_loss<double>(m, &teacher, images, labels, cfg, nullptr).loss);
    for (const auto& p : named_parameters(m)) {
      const bool far_param = p.name.rfind("far.", 0) == 0;
      CHECK_MESSAGE(p.tensor.has_grad() == far_param, p.name);
    }
    for (const auto& p : named_parameters(teacher)) CHECK_MESSAGE(!p.tensor.has_grad(), p.name);
  }
  SUBCASE("finetune trains everything") {
    for (auto phase : {Phase::finetune, Phase::prune_regularize, Phase::prune_finetune}) {
      freeze_plan(m, phase);
      for (auto& p : named_parameters(m)) p.tensor.zero_grad();
      auto cfg = quick(phase);
      cfg.reg_coeff = 1e-3;
      backward(detail::phase_loss<double>(m, nullptr, images, labels, cfg, nullptr).loss);
      for (const auto& p : named_parameters(m)) CHECK_MESSAGE(p.tensor.has_grad(), p.name);
    }
  }
  SUBCASE("switching phases is metadata only") {
    for (auto phase : {Phase::distill, Phase::finetune, Phase::distill, Phase::prune_finetune}) freeze_plan(m, phase);
    CHECK(snapshot() == before);
  }
  CHECK_THROWS_AS(freeze_plan(teacher, Phase::distill), ConfigError);
  CHECK_THROWS_AS(freeze_plan(m, Phase::teacher), ConfigError);
}

TEST_CASE("one-epoch smoke run") {
  const auto c = small_config();
  auto data = small_data(80);
  REQUIRE(data.train.size() == 64);
  auto teacher = make_teacher<float>(c, 8);
  auto m = replace_attention(teacher, 9);
  TrainStats stats;
  const auto logs = run_phase<float>(m, &teacher, data, quick(Phase::distill), &stats);
  REQUIRE(logs.size() == 1);
  const auto& row = logs[0];
  CHECK(row.epoch == 1);
  CHECK(std::isfinite(row.loss));
  CHECK(row.sim.size() == 2);
  for (double s : row.sim) CHECK(std::isfinite(s));
  CHECK(std::isfinite(row.train_acc));
  CHECK(std::isfinite(row.val_acc));
  CHECK(stats.steps == 4);
  CHECK(stats.teacher_forwards == 4);

  const auto csv = log_csv(logs);
  CHECK(csv.rfind("epoch,phase,loss,sim_mean,sim_0,sim_1,train_acc,val_acc\n", 0) == 0);
}

TEST_CASE("lambda zero never runs the teacher") {
  const auto c = small_config();
  const auto data = small_data();
  auto teacher = make_teacher<float>(c, 10);
  auto m = replace_attention(teacher, 11);
  auto cfg = quick(Phase::distill, 2);
  cfg.lambda = 0.0;
  cfg.log_initial = true;
  TrainStats stats;
  const auto logs = run_phase<float>(m, &teacher, data, cfg, &stats);
  CHECK(stats.teacher_forwards == 0);
  CHECK(stats.steps == 8);
  CHECK(logs.size() == 3);
  for (const auto& l : logs) CHECK(l.sim.empty());
}

TEST_CASE("initial log row precedes any update") {
  const auto c = small_config();
  const auto data = small_data();
  auto teacher = make_teacher<double>(c, 12);
  auto m = replace_attention(teacher, 13);
  auto reference = clone(m);
  auto cfg = quick(Phase::distill, 1);
  cfg.log_initial = true;
  const auto logs = run_phase<double>(m, &teacher, data, cfg);
  REQUIRE(logs.size() == 2);
  CHECK(logs[0].epoch == 0);
  const auto direct = detail::evaluate_epoch<double>(reference, &teacher, data, cfg, nullptr);
  CHECK(logs[0].loss == direct.loss);
  CHECK(logs[0].sim == direct.sim);
}

TEST_CASE("distillation leaves frozen tensors bit-identical") {
  const auto c = small_config();
  const auto data = small_data();
  auto teacher = make_teacher<float>(c, 14);
  auto m = replace_attention(teacher, 15);
  std::vector<std::pair<std::string, MatrixX<float>>> frozen;
  for (const auto& p : named_parameters(m))
    if (p.name.rfind("far.", 0) != 0) frozen.emplace_back(p.name, p.tensor.value());
  std::vector<MatrixX<float>> teacher_values;
  for (const auto& p : named_parameters(teacher)) teacher_values.push_back(p.tensor.value());
  std::vector<MatrixX<float>> far_before;
  for (const auto& p : far_parameters(m)) far_before.push_back(p.value());

  run_phase<float>(m, &teacher, data, quick(Phase::distill, 2));

  std::size_t i = 0;
  for (const auto& p : named_parameters(m)) {
    if (p.name.rfind("far.", 0) == 0) continue;
    CHECK_MESSAGE(p.tensor.value() == frozen[i].second, p.name);
    ++i;
  }
  i = 0;
  for (const auto& p : named_parameters(teacher)) CHECK(p.tensor.value() == teacher_values[i++]);
  bool moved = false;
  i = 0;
  for (const auto& p : far_parameters(m)) moved = moved || p.value() != far_before[i++];
  CHECK(moved);
}

TEST_CASE("divergence guard") {
  const auto c = small_config();
  const auto data = small_data();
  auto teacher = make_teacher<float>(c, 16);
  auto m = replace_attention(teacher, 17);
  m.head.bias.mutable_value()(0, 0) = std::numeric_limits<float>::quiet_NaN();
  CHECK_THROWS_AS(run_phase<float>(m, nullptr, data, quick(Phase::finetune)), DivergenceError);
}

TEST_CASE("run_phase argument checks") {
  const auto c = small_config();
  const auto data = small_data();
  auto teacher = make_teacher<float>(c, 18);
  auto m = replace_attention(teacher, 19);
  CHECK_THROWS_AS(run_phase<float>(m, nullptr, data, quick(Phase::distill)), std::invalid_argument);
  auto bad = quick(Phase::finetune);
  bad.batch_size = 0;
  CHECK_THROWS_AS(run_phase<float>(m, nullptr, data, bad), std::invalid_argument);
  auto other = c;
  other.layers = 3;
  auto deeper = make_teacher<float>(other, 20);
  CHECK_THROWS_AS(run_phase<float>(m, &deeper, data, quick(Phase::distill)), DimensionError);
}

TEST_CASE("masks survive pruning finetune") {
  const auto c = small_config();
  const auto data = small_data();
  auto m = replace_attention(make_teacher<double>(c, 21), 22);
  const auto masks = prune_by_threshold(m, 0.9, ThresholdMode::relative);
  REQUIRE(!masks[0].is_full());
  run_phase<double>(m, nullptr, data, quick(Phase::prune_finetune, 2));
  auto copy = clone(m);
  apply_masks(copy);
  const auto a = named_parameters(m);
  const auto b = named_parameters(copy);
  for (std::size_t i = 0; i < a.size(); ++i) CHECK_MESSAGE(a[i].tensor.value() == b[i].tensor.value(), a[i].name);
}

TEST_CASE("AdamW step") {
  auto v = Tensor<double>::from_values({2}, {1.0, -2.0}, true);
  auto w = Tensor<double>::from_values({1, 2}, {1.0, -2.0}, true);
  AdamW<double> opt({v, w}, 0.1);
  backward(add(sum(mul(v, Tensor<double>::from_values({2}, {3.0, -0.5}))), sum(mul(w, Tensor<double>::from_values({1, 2}, {3.0, -0.5})))));
  opt.step(0.01);
  // First step: m_hat / sqrt(v_hat) = g / |g|.
  const double e3 = 0.01 * 3.0 / (3.0 + 1e-8);
  const double e5 = 0.01 * 0.5 / (0.5 + 1e-8);
  CHECK(v.value()(0, 0) == doctest::Approx(1.0 - e3).epsilon(1e-14));
  CHECK(v.value()(0, 1) == doctest::Approx(-2.0 + e5).epsilon(1e-14));
  // Matrices are decayed first.
  CHECK(w.value()(0, 0) == doctest::Approx(1.0 * (1 - 0.001) - e3).epsilon(1e-14));
  CHECK(w.value()(0, 1) == doctest::Approx(-2.0 * (1 - 0.001) + e5).epsilon(1e-14));

  // Tensors without a gradient are left alone.
  auto idle = Tensor<double>::from_values({1, 1}, {5.0}, true);
  AdamW<double> opt2({idle}, 0.1);
  opt2.step(0.1);
  CHECK(idle.value()(0, 0) == 5.0);
}

TEST_CASE("learning rate schedule") {
  PhaseConfig cfg;
  cfg.lr = 1e-3;
  cfg.warmup_lr = 1e-5;
  cfg.min_lr = 1e-6;
  const std::int64_t total = 100;
  const std::int64_t warm = 10;
  CHECK(scheduled_lr(cfg, 0, total, warm) == 1e-5);
  CHECK(scheduled_lr(cfg, 5, total, warm) == doctest::Approx(1e-5 + 0.5 * (1e-3 - 1e-5)));
  CHECK(scheduled_lr(cfg, warm, total, warm) == doctest::Approx(1e-3).epsilon(1e-15));
  CHECK(scheduled_lr(cfg, total, total, warm) == doctest::Approx(1e-6).epsilon(1e-12));
  CHECK(scheduled_lr(cfg, 55, total, warm) == doctest::Approx(0.5 * (1e-3 + 1e-6)).epsilon(1e-12));
  double prev = scheduled_lr(cfg, warm, total, warm);
  for (std::int64_t s = warm + 1; s <= total; ++s) {
    const double lr = scheduled_lr(cfg, s, total, warm);
    CHECK(lr <= prev);
    prev = lr;
  }
  CHECK(scheduled_lr(cfg, 0, total, 0) == 1e-3);
}

TEST_CASE("phase configs from a run configuration") {
  RunConfig rc;
  const auto d = PhaseConfig::distill(rc);
  CHECK(d.phase == Phase::distill);
  CHECK(d.lambda == 1.0);
  CHECK(d.lr == 5e-4);
  CHECK(d.epochs == 50);
  CHECK(d.warmup_epochs == 5);
  CHECK(d.weight_decay == 0.05);
  const auto f = PhaseConfig::finetune(rc);
  CHECK(f.lr == 5e-5);
  CHECK(f.warmup_epochs == 4);  // capped at a fifth of 20 epochs
  const auto r = PhaseConfig::prune_regularize(rc);
  CHECK(r.reg_coeff == 1e-4);
  CHECK(r.lambda == 1.0);  // unused outside distill
  const auto seeds = std::vector<std::uint64_t>{PhaseConfig::teacher(rc).seed, d.seed, f.seed, r.seed, PhaseConfig::prune_finetune(rc).seed};
  CHECK(std::set<std::uint64_t>(seeds.begin(), seeds.end()).size() == 5);
}

TEST_CASE("regularized pruning pipeline") {
  const auto c = small_config();
  const auto data = small_data();
  auto m = replace_attention(make_teacher<float>(c, 23), 24);
  PruneOptions opt;
  opt.regularize = quick(Phase::prune_regularize, 2);
  opt.regularize.reg_coeff = 1e-2;
  opt.threshold = 0.5;
  opt.mode = ThresholdMode::relative;
  opt.finetune = quick(Phase::prune_finetune, 1);
  const auto report = three_stage_pipeline(m, data, opt);
  CHECK(report.logs.size() == 3);
  CHECK(report.retention.size() == static_cast<std::size_t>(c.layers * c.heads * 2));
  CHECK(report.mean_retention() <= 1.0);
  CHECK(model_masks(m).size() == static_cast<std::size_t>(c.layers));
  opt.finetune.phase = Phase::finetune;
  CHECK_THROWS_AS(three_stage_pipeline(m, data, opt), std::invalid_argument);
}
