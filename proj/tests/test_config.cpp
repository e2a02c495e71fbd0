#include "doctest.h"

#include "far/config.hpp"

#include <cstdio>
#include <fstream>

using namespace far;

TEST_CASE("defaults follow the reference training recipe") {
  const RunConfig c;
  CHECK(c.distill.lambda == 1.0);
  CHECK(c.prune.reg_coeff == 1e-4);
  CHECK(c.prune.threshold == 1e-4);
  CHECK(c.prune.threshold_mode == ThresholdMode::absolute);
  CHECK(c.train.weight_decay == 0.05);
  CHECK(c.distill.lr == 5e-4);
  CHECK(c.distill.cosine_axis == CosineAxis::token);
  CHECK(c.bench.warmups == 30);
  CHECK(c.bench.runs == 100);
  CHECK(c.bench.threads == 1);
  CHECK(c.model.tokens() == 17);
  CHECK_NOTHROW(c.model.validate());
}

TEST_CASE("parse reads every section") {
  const auto c = parse_run_config(R"(# desk run
[model]
layers = 2
dim = 24
heads = 3
head_dim = 8
precision = f64

[train]
seed = 99   ; trailing comment
batch_size=32

[distill]
lambda = 0.5
cosine_axis = whole

[prune]
threshold = 0.25
threshold_mode = relative
groups = extended
reduction = mean

[bench]
runs = 7
)");
  CHECK(c.model.layers == 2);
  CHECK(c.model.dim == 24);
  CHECK(c.model.precision == Precision::f64);
  CHECK(c.train.seed == 99);
  CHECK(c.train.batch_size == 32);
  CHECK(c.distill.lambda == 0.5);
  CHECK(c.distill.cosine_axis == CosineAxis::whole);
  CHECK(c.prune.threshold == 0.25);
  CHECK(c.prune.threshold_mode == ThresholdMode::relative);
  CHECK(c.prune.groups == PenaltyGroups::extended);
  CHECK(c.prune.reduction == PenaltyReduction::mean);
  CHECK(c.bench.runs == 7);
  CHECK(c.bench.warmups == 30);
}

TEST_CASE("render and parse round trip") {
  RunConfig c;
  c.model.layers = 3;
  c.model.image_size = 48;
  c.train.seed = 123456789012345ULL;
  c.train.min_lr = 1.0 / 3.0;
  c.distill.lambda = 0.1;
  c.prune.lr = 2.5e-7;
  c.prune.threshold_mode = ThresholdMode::relative;
  c.bench.image_size = 64;
  CHECK(parse_run_config(render_run_config(c)) == c);
  CHECK(parse_run_config(render_run_config(RunConfig{})) == RunConfig{});
}

TEST_CASE("malformed input is rejected") {
  CHECK_THROWS_AS(parse_run_config("[model]\nlayerz = 2\n"), ConfigError);
  CHECK_THROWS_AS(parse_run_config("[optim]\nlr = 2\n"), ConfigError);
  CHECK_THROWS_AS(parse_run_config("layers = 2\n"), ConfigError);
  CHECK_THROWS_AS(parse_run_config("[model]\nlayers\n"), ConfigError);
  CHECK_THROWS_AS(parse_run_config("[model]\nlayers = two\n"), ConfigError);
  CHECK_THROWS_AS(parse_run_config("[model]\nlayers = 2x\n"), ConfigError);
  CHECK_THROWS_AS(parse_run_config("[prune]\nthreshold_mode = fuzzy\n"), ConfigError);
  CHECK_THROWS_AS(parse_run_config("[model\n"), ConfigError);
  CHECK_THROWS_AS(parse_run_config("[model]\ndim = 30\n"), ConfigError);  // 2 heads x 16 != 30
  try {
    parse_run_config("[model]\n\nlayerz = 2\n");
  } catch (const ConfigError& e) {
    CHECK(std::string(e.what()).find("line 3") != std::string::npos);
  }
}

TEST_CASE("model geometry validation") {
  auto c = ModelConfig::desk();
  c.patch_size = 5;
  CHECK_THROWS_AS(c.validate(), ConfigError);
  c = ModelConfig::deit_tiny();
  CHECK(c.tokens() == 197);
  CHECK(c.grid() == 14);
  CHECK(parse_variant("far") == Variant::far);
  CHECK_THROWS_AS(parse_precision("f16"), ConfigError);
}

TEST_CASE("load from file") {
  const std::string path = "test_config_tmp.cfg";
  {
    std::ofstream out(path);
    out << "[distill]\nepochs = 3\n";
  }
  CHECK(load_run_config(path).distill.epochs == 3);
  std::remove(path.c_str());
  CHECK_THROWS_AS(load_run_config("definitely/missing.cfg"), ConfigError);
}
