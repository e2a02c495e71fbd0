#include "far/cli.hpp"

#include "far/attribution.hpp"
#include "far/checkpoint.hpp"
#include "far/pipeline.hpp"
#include "far/profiler.hpp"

#include <CLI11.hpp>

#include <fstream>
#include <iostream>
#include <optional>
#include <random>

namespace far {

namespace {

struct Options {
  std::string config;
  std::string checkpoint;
  std::string out;
  std::optional<std::uint64_t> seed;
  std::string dataset;
  std::string teacher;
  std::string variant;
  int image_size = 0;
  std::optional<double> threshold;
  std::optional<double> reg_coeff;
  std::string threshold_mode;
  std::string report;
  std::string log;
  std::string target = "norm";
  int layer = 0;
  int head = 0;
  int index = 0;
};

class UsageError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

RunConfig run_config(const Options& o) {
  RunConfig rc = o.config.empty() ? RunConfig{} : load_run_config(o.config);
  if (o.seed) rc.train.seed = *o.seed;
  if (o.threshold) rc.prune.threshold = *o.threshold;
  if (o.reg_coeff) rc.prune.reg_coeff = *o.reg_coeff;
  if (!o.threshold_mode.empty()) {
    if (o.threshold_mode == "absolute") {
      rc.prune.threshold_mode = ThresholdMode::absolute;
    } else if (o.threshold_mode == "relative") {
      rc.prune.threshold_mode = ThresholdMode::relative;
    } else {
      throw UsageError("--threshold-mode must be absolute or relative");
    }
  }
  rc.model.validate();
  return rc;
}

void require(const std::string& value, const char* flag) {
  if (value.empty()) throw UsageError(std::string(flag) + " is required");
}

Dataset dataset_for(const Options& o, const RunConfig& rc) {
  if (!o.dataset.empty()) {
    auto d = dataset_from_checkpoint(load_checkpoint(o.dataset));
    if (d.image_size != rc.model.image_size || d.channels != rc.model.channels || d.classes != rc.model.num_classes) {
      throw ConfigError("dataset geometry does not match the model config");
    }
    return d;
  }
  return synth_dataset(rc.train.seed, rc.train.samples, rc.model.num_classes, rc.model.image_size, rc.model.channels);
}

void write_text(const std::string& path, const std::string& text) {
  write_file_atomic(path, std::as_bytes(std::span(text.data(), text.size())));
}

void emit_log(const Options& o, const std::vector<EpochLog>& logs, std::ostream& out) {
  if (!o.log.empty()) write_text(o.log, log_csv(logs));
  if (!logs.empty()) {
    const auto& last = logs.back();
    out << to_string(last.phase) << ": epoch " << last.epoch << " loss " << last.loss << " train_acc " << last.train_acc
        << " val_acc " << last.val_acc << '\n';
  }
}

template <typename F>
void with_precision(Precision p, F&& f) {
  if (p == Precision::f64) {
    f(double{});
  } else {
    f(float{});
  }
}

Precision checkpoint_precision(const std::string& path) { return load_checkpoint(path).config.precision; }

void cmd_dataset_gen(const Options& o, std::ostream& out) {
  require(o.out, "--out");
  const auto rc = run_config(o);
  const auto d = synth_dataset(rc.train.seed, rc.train.samples, rc.model.num_classes, rc.model.image_size, rc.model.channels);
  save_checkpoint(dataset_to_checkpoint(d), o.out);
  out << "wrote " << d.size() << " images (" << d.train.size() << " train, " << d.val.size() << " val) to " << o.out << '\n';
}

void cmd_train_teacher(const Options& o, std::ostream& out) {
  require(o.out, "--out");
  const auto rc = run_config(o);
  const auto data = dataset_for(o, rc);
  with_precision(rc.model.precision, [&](auto tag) {
    using S = decltype(tag);
    auto teacher = make_teacher<S>(rc.model, rc.train.seed);
    const auto logs = run_phase<S>(teacher, nullptr, data, PhaseConfig::teacher(rc));
    save_model(teacher, o.out);
    emit_log(o, logs, out);
  });
}

void cmd_distill(const Options& o, std::ostream& out) {
  require(o.teacher, "--teacher");
  require(o.out, "--out");
  const auto rc = run_config(o);
  const auto data = dataset_for(o, rc);
  with_precision(checkpoint_precision(o.teacher), [&](auto tag) {
    using S = decltype(tag);
    const auto teacher = load_model<S>(o.teacher);
    if (teacher.variant() != Variant::attention) throw ConfigError(o.teacher + " is not an attention teacher");
    auto student = replace_attention(teacher, rc.train.seed + 1);
    const auto logs = run_phase<S>(student, &teacher, data, PhaseConfig::distill(rc));
    save_model(student, o.out);
    emit_log(o, logs, out);
  });
}

void cmd_finetune(const Options& o, std::ostream& out) {
  require(o.checkpoint, "--checkpoint");
  require(o.out, "--out");
  const auto rc = run_config(o);
  const auto data = dataset_for(o, rc);
  with_precision(checkpoint_precision(o.checkpoint), [&](auto tag) {
    using S = decltype(tag);
    auto model = load_model<S>(o.checkpoint);
    const auto logs = run_phase<S>(model, nullptr, data, PhaseConfig::finetune(rc));
    save_model(model, o.out);
    emit_log(o, logs, out);
  });
}

void cmd_prune(const Options& o, std::ostream& out) {
  require(o.checkpoint, "--checkpoint");
  require(o.out, "--out");
  const auto rc = run_config(o);
  const auto data = dataset_for(o, rc);
  with_precision(checkpoint_precision(o.checkpoint), [&](auto tag) {
    using S = decltype(tag);
    auto model = load_model<S>(o.checkpoint);
    const auto report = three_stage_pipeline(model, data, PruneOptions::from(rc));
    save_model(model, o.out);
    const auto csv = retention_csv(report.retention);
    if (!o.report.empty()) {
      write_text(o.report, csv);
    } else {
      out << csv;
    }
    emit_log(o, report.logs, out);
    out << "mean retention " << report.mean_retention() << ", val_acc " << report.accuracy_before << " -> "
        << report.accuracy_after << '\n';
  });
}

Variant variant_for(const Options& o, const RunConfig& rc) {
  return o.variant.empty() ? rc.model.variant : parse_variant(o.variant);
}

std::vector<PruneMask> checkpoint_masks(const Checkpoint& ckpt) {
  std::vector<PruneMask> masks;
  with_precision(Precision::f64, [&](auto tag) {
    using S = decltype(tag);
    masks = model_masks(model_from_checkpoint<S>(ckpt));
  });
  return masks;
}

void cmd_params(const Options& o, std::ostream& out) {
  auto rc = run_config(o);
  std::vector<PruneMask> masks;
  Variant v = variant_for(o, rc);
  if (!o.checkpoint.empty()) {
    const auto ckpt = load_checkpoint(o.checkpoint);
    rc.model = ckpt.config;
    v = ckpt.config.variant;
    if (v == Variant::far) masks = checkpoint_masks(ckpt);
  }
  out << "variant,params\n" << to_string(v) << ',' << count_params(rc.model, v, masks) << '\n';
}

void cmd_flops(const Options& o, std::ostream& out, std::ostream& err) {
  const auto rc = run_config(o);
  const int image = o.image_size > 0 ? o.image_size : rc.model.image_size;
  if (image % rc.model.patch_size != 0) throw UsageError("--image-size must be a multiple of the patch size");
  const auto report = cost_report(rc.model, variant_for(o, rc), rc.model.tokens_for(image));
  out << cost_csv(report);
  err << cost_table(report);
}

template <typename S>
LatencyStats bench_model(const VisionModel<S>& model, int image, const BenchSection& b, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> normal;
  MatrixX<S> input(1, static_cast<Eigen::Index>(model.config.channels) * image * image);
  for (Eigen::Index i = 0; i < input.size(); ++i) input.data()[i] = static_cast<S>(normal(rng));
  NoGradGuard no_grad;
  volatile S sink = S(0);
  auto stats = bench_latency([&] { sink = sink + model_forward(model, input).logits.value()(0, 0); }, b.warmups, b.runs);
  stats.precision = std::is_same_v<S, float> ? "f32" : "f64";
  return stats;
}

void cmd_bench(const Options& o, std::ostream& out) {
  auto rc = run_config(o);
  const int threads = std::getenv("FAR_THREADS") ? requested_threads() : std::max(rc.bench.threads, 1);
  Eigen::setNbThreads(threads);
  int image = o.image_size > 0 ? o.image_size : (rc.bench.image_size > 0 ? rc.bench.image_size : rc.model.image_size);
  Variant v = variant_for(o, rc);
  std::optional<Checkpoint> ckpt;
  if (!o.checkpoint.empty()) {
    ckpt = load_checkpoint(o.checkpoint);
    rc.model = ckpt->config;
    v = ckpt->config.variant;
    if (o.image_size <= 0 && rc.bench.image_size <= 0) image = rc.model.image_size;
  }
  // Weights do not affect latency; a checkpoint at another resolution is
  // benchmarked through a freshly initialized model of matching geometry.
  const bool use_ckpt = ckpt && image == rc.model.image_size;
  rc.model.image_size = image;
  rc.model.variant = v;
  rc.model.validate();
  with_precision(rc.model.precision, [&](auto tag) {
    using S = decltype(tag);
    const auto model = use_ckpt ? model_from_checkpoint<S>(*ckpt) : make_model<S>(rc.model, rc.train.seed);
    auto report = cost_report(rc.model, v, rc.model.tokens(), model_masks(model));
    report.latency = bench_model(model, image, rc.bench, rc.train.seed);
    report.latency->threads = threads;
    out << cost_table(report);
    const auto& s = *report.latency;
    out << "median_ms,mean_ms,p10_ms,p90_ms,runs,warmups,threads,precision\n"
        << s.median_ms << ',' << s.mean_ms << ',' << s.p10_ms << ',' << s.p90_ms << ',' << s.runs << ',' << s.warmups << ','
        << s.threads << ',' << s.precision << '\n';
  });
}

void cmd_attribute(const Options& o, std::ostream& out) {
  require(o.checkpoint, "--checkpoint");
  require(o.out, "--out");
  const auto ckpt = load_checkpoint(o.checkpoint);
  auto rc = run_config(o);
  rc.model = ckpt.config;
  const auto data = dataset_for(o, rc);
  if (o.index < 0 || o.index >= data.size()) throw UsageError("--index out of range");
  const auto target = parse_saliency_target(o.target);
  with_precision(ckpt.config.precision, [&](auto tag) {
    using S = decltype(tag);
    const auto model = model_from_checkpoint<S>(ckpt);
    const int idx[] = {o.index};
    const auto image = gather_images<S>(data, idx);
    const auto saliency = cls_saliency(model, image, o.layer, o.head, target);
    const auto dependency = token_dependency(model, image, o.layer);
    export_heatmap(saliency.map, o.out + "_saliency");
    export_heatmap(dependency, o.out + "_dependency");
    out << "wrote " << o.out << "_saliency.{pgm,csv} and " << o.out << "_dependency.{pgm,csv}\n";
  });
}

}  // namespace

int cli_dispatch(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"Attention replacement toolkit: train, distill, prune, profile and inspect"};
  app.require_subcommand(1);
  Options o;

  auto common = [&](CLI::App* sub) {
    sub->add_option("--config", o.config, "run configuration file");
    sub->add_option("--seed", o.seed, "override train.seed");
    sub->add_option("--log", o.log, "per-epoch CSV log path");
  };
  auto* gen = app.add_subcommand("dataset-gen", "generate the synthetic dataset");
  common(gen);
  gen->add_option("--out", o.out, "dataset file");

  auto* teacher = app.add_subcommand("train-teacher", "train the attention teacher");
  common(teacher);
  teacher->add_option("--dataset", o.dataset, "dataset file");
  teacher->add_option("--out", o.out, "output checkpoint");

  auto* distill = app.add_subcommand("distill", "replace attention and distill block outputs");
  common(distill);
  distill->add_option("--dataset", o.dataset, "dataset file");
  distill->add_option("--teacher", o.teacher, "teacher checkpoint");
  distill->add_option("--out", o.out, "output checkpoint");

  auto* finetune = app.add_subcommand("finetune", "finetune all parameters on classification");
  common(finetune);
  finetune->add_option("--dataset", o.dataset, "dataset file");
  finetune->add_option("--checkpoint", o.checkpoint, "input checkpoint");
  finetune->add_option("--out", o.out, "output checkpoint");

  auto* prune = app.add_subcommand("prune", "regularize, threshold-prune and finetune");
  common(prune);
  prune->add_option("--dataset", o.dataset, "dataset file");
  prune->add_option("--checkpoint", o.checkpoint, "input checkpoint");
  prune->add_option("--out", o.out, "output checkpoint");
  prune->add_option("--threshold", o.threshold, "pruning threshold (default 1e-4)");
  prune->add_option("--reg-coeff", o.reg_coeff, "Hoyer penalty weight (default 1e-4)");
  prune->add_option("--threshold-mode", o.threshold_mode, "absolute | relative");
  prune->add_option("--report", o.report, "retention CSV path");

  auto* params = app.add_subcommand("params", "closed-form parameter count");
  common(params);
  params->add_option("--variant", o.variant, "attention | far");
  params->add_option("--checkpoint", o.checkpoint, "input checkpoint");

  auto* flops = app.add_subcommand("flops", "closed-form FLOPs report (CSV on stdout, table on stderr)");
  common(flops);
  flops->add_option("--variant", o.variant, "attention | far");
  flops->add_option("--image-size", o.image_size, "input resolution (default from config)");

  auto* bench = app.add_subcommand("bench", "single-image inference latency");
  common(bench);
  bench->add_option("--variant", o.variant, "attention | far");
  bench->add_option("--image-size", o.image_size, "input resolution (default from config)");
  bench->add_option("--checkpoint", o.checkpoint, "input checkpoint");

  auto* attribute = app.add_subcommand("attribute", "CLS saliency and token dependency heatmaps");
  common(attribute);
  attribute->add_option("--checkpoint", o.checkpoint, "input checkpoint");
  attribute->add_option("--dataset", o.dataset, "dataset file");
  attribute->add_option("--out", o.out, "output prefix");
  attribute->add_option("--layer", o.layer, "block index");
  attribute->add_option("--head", o.head, "head index");
  attribute->add_option("--index", o.index, "image index in the dataset");
  attribute->add_option("--target", o.target, "norm | sum | logit");

  std::vector<std::string> reversed(args.rbegin(), args.rend());
  try {
    app.parse(reversed);
  } catch (const CLI::CallForHelp&) {
    out << app.help();
    return 0;
  } catch (const CLI::ParseError& e) {
    err << "error: " << e.what() << "\n\n" << app.help();
    return 2;
  }

  auto* sub = app.get_subcommands().front();
  try {
    const std::string name = sub->get_name();
    if (name == "dataset-gen") cmd_dataset_gen(o, out);
    else if (name == "train-teacher") cmd_train_teacher(o, out);
    else if (name == "distill") cmd_distill(o, out);
    else if (name == "finetune") cmd_finetune(o, out);
    else if (name == "prune") cmd_prune(o, out);
    else if (name == "params") cmd_params(o, out);
    else if (name == "flops") cmd_flops(o, out, err);
    else if (name == "bench") cmd_bench(o, out);
    else if (name == "attribute") cmd_attribute(o, out);
  } catch (const UsageError& e) {
    err << "error: " << e.what() << "\n\n" << sub->help();
    return 2;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << '\n';
    return 1;
  }
  return 0;
}

}  // namespace far
