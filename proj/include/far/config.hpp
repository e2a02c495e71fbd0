#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>
#include <string_view>

namespace far {

enum class Precision : std::uint8_t { f32 = 0, f64 = 1 };
enum class Variant : std::uint8_t { attention = 0, far = 1 };

std::string_view to_string(Precision p);
std::string_view to_string(Variant v);
Precision parse_precision(std::string_view text);
Variant parse_variant(std::string_view text);

class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Architectural hyperparameters shared by the attention teacher and the
/// BiLSTM student.
struct ModelConfig {
  int layers = 4;
  int dim = 32;
  int heads = 2;
  int head_dim = 16;
  int mlp_ratio = 4;
  int patch_size = 8;
  int image_size = 32;
  int channels = 3;
  int num_classes = 10;
  Precision precision = Precision::f32;
  Variant variant = Variant::attention;

  int grid() const { return image_size / patch_size; }
  int tokens() const { return tokens_for(image_size); }
  int tokens_for(int image) const { return (image / patch_size) * (image / patch_size) + 1; }
  int patch_features() const { return channels * patch_size * patch_size; }

  /// Throws ConfigError when the geometry is inconsistent.
  void validate() const;

  static ModelConfig deit_tiny();
  static ModelConfig deit_small();
  static ModelConfig deit_base();
  static ModelConfig desk();

  bool operator==(const ModelConfig&) const = default;
};

enum class CosineAxis : std::uint8_t { token, whole };
enum class ThresholdMode : std::uint8_t { absolute, relative };
enum class PenaltyGroups : std::uint8_t { mandatory, extended };
enum class PenaltyReduction : std::uint8_t { sum, mean };

struct TrainSection {
  int samples = 1000;
  int batch_size = 64;
  double weight_decay = 0.05;
  std::uint64_t seed = 7;
  int teacher_epochs = 40;
  double teacher_lr = 1e-3;
  double warmup_lr = 1e-5;
  int warmup_epochs = 5;
  double min_lr = 1e-6;
  bool operator==(const TrainSection&) const = default;
};

struct DistillSection {
  double lambda = 1.0;
  int epochs = 50;
  double lr = 5e-4;
  int finetune_epochs = 20;
  double finetune_lr = 5e-5;
  CosineAxis cosine_axis = CosineAxis::token;
  bool operator==(const DistillSection&) const = default;
};

struct PruneSection {
  double reg_coeff = 1e-4;
  double threshold = 1e-4;
  ThresholdMode threshold_mode = ThresholdMode::absolute;
  int reg_epochs = 20;
  int finetune_epochs = 20;
  double lr = 5e-5;
  PenaltyGroups groups = PenaltyGroups::mandatory;
  PenaltyReduction reduction = PenaltyReduction::sum;
  bool operator==(const PruneSection&) const = default;
};

struct BenchSection {
  int warmups = 30;
  int runs = 100;
  int threads = 1;
  int image_size = 0;  // 0: use the model's image size
  bool operator==(const BenchSection&) const = default;
};

/// Contents of a `[section] key = value` run configuration file.
struct RunConfig {
  ModelConfig model;
  TrainSection train;
  DistillSection distill;
  PruneSection prune;
  BenchSection bench;
  bool operator==(const RunConfig&) const = default;
};

RunConfig parse_run_config(std::string_view text);
RunConfig load_run_config(const std::string& path);
std::string render_run_config(const RunConfig& config);

}  // namespace far
