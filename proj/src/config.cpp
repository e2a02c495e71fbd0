#include "far/config.hpp"

#include <charconv>
#include <fstream>
#include <functional>
#include <sstream>
#include <vector>

namespace far {

std::string_view to_string(Precision p) { return p == Precision::f32 ? "f32" : "f64"; }
std::string_view to_string(Variant v) { return v == Variant::attention ? "attention" : "far"; }

Precision parse_precision(std::string_view text) {
  if (text == "f32") return Precision::f32;
  if (text == "f64") return Precision::f64;
  throw ConfigError("unknown precision '" + std::string(text) + "' (expected f32 or f64)");
}

Variant parse_variant(std::string_view text) {
  if (text == "attention" || text == "deit") return Variant::attention;
  if (text == "far") return Variant::far;
  throw ConfigError("unknown variant '" + std::string(text) + "' (expected attention or far)");
}

void ModelConfig::validate() const {
  auto require = [](bool ok, const std::string& what) {
    if (!ok) throw ConfigError("invalid model config: " + what);
  };
  require(layers >= 1, "layers must be >= 1");
  require(heads >= 1 && head_dim >= 1, "heads and head_dim must be >= 1");
  require(dim == heads * head_dim, "dim must equal heads * head_dim (" + std::to_string(dim) + " vs " +
                                       std::to_string(heads) + "*" + std::to_string(head_dim) + ")");
  require(mlp_ratio >= 1, "mlp_ratio must be >= 1");
  require(patch_size >= 1 && image_size >= patch_size, "image_size must be >= patch_size");
  require(image_size % patch_size == 0, "patch_size must divide image_size");
  require(channels >= 1, "channels must be >= 1");
  require(num_classes >= 2, "num_classes must be >= 2");
}

ModelConfig ModelConfig::deit_tiny() {
  ModelConfig c;
  c.layers = 12;
  c.dim = 192;
  c.heads = 3;
  c.head_dim = 64;
  c.patch_size = 16;
  c.image_size = 224;
  c.num_classes = 1000;
  return c;
}

ModelConfig ModelConfig::deit_small() {
  ModelConfig c = deit_tiny();
  c.dim = 384;
  c.heads = 6;
  return c;
}

ModelConfig ModelConfig::deit_base() {
  ModelConfig c = deit_tiny();
  c.dim = 768;
  c.heads = 12;
  return c;
}

ModelConfig ModelConfig::desk() { return ModelConfig{}; }

namespace {

template <typename T>
T parse_number(std::string_view text) {
  T value{};
  auto [ptr, ec] = std::from_chars(text.data(), text.data() + text.size(), value);
  if (ec != std::errc{} || ptr != text.data() + text.size()) {
    throw ConfigError("cannot parse '" + std::string(text) + "' as a number");
  }
  return value;
}

std::string render_double(double v) {
  char buf[64];
  auto [ptr, ec] = std::to_chars(buf, buf + sizeof(buf), v);
  return std::string(buf, ptr);
}

struct Field {
  std::string_view section;
  std::string_view key;
  std::function<void(RunConfig&, std::string_view)> set;
  std::function<std::string(const RunConfig&)> get;
};

template <typename Member>
Field int_field(std::string_view section, std::string_view key, Member member) {
  return {section, key,
          [member](RunConfig& c, std::string_view v) { member(c) = parse_number<std::remove_reference_t<decltype(member(c))>>(v); },
          [member](const RunConfig& c) { return std::to_string(member(const_cast<RunConfig&>(c))); }};
}

template <typename Member>
Field double_field(std::string_view section, std::string_view key, Member member) {
  return {section, key, [member](RunConfig& c, std::string_view v) { member(c) = parse_number<double>(v); },
          [member](const RunConfig& c) { return render_double(member(const_cast<RunConfig&>(c))); }};
}

template <typename Enum>
Field enum_field(std::string_view section, std::string_view key, std::function<Enum&(RunConfig&)> member,
                 std::vector<std::pair<std::string_view, Enum>> names) {
  return {section, key,
          [member, names](RunConfig& c, std::string_view v) {
            for (const auto& [name, value] : names) {
              if (name == v) {
                member(c) = value;
                return;
              }
            }
            throw ConfigError("invalid value '" + std::string(v) + "'");
          },
          [member, names](const RunConfig& c) {
            const Enum value = member(const_cast<RunConfig&>(c));
            for (const auto& [name, e] : names) {
              if (e == value) return std::string(name);
            }
            return std::string();
          }};
}

const std::vector<Field>& fields() {
  static const std::vector<Field> table = [] {
    std::vector<Field> f;
    f.push_back(int_field("model", "layers", [](RunConfig& c) -> int& { return c.model.layers; }));
    f.push_back(int_field("model", "dim", [](RunConfig& c) -> int& { return c.model.dim; }));
    f.push_back(int_field("model", "heads", [](RunConfig& c) -> int& { return c.model.heads; }));
    f.push_back(int_field("model", "head_dim", [](RunConfig& c) -> int& { return c.model.head_dim; }));
    f.push_back(int_field("model", "mlp_ratio", [](RunConfig& c) -> int& { return c.model.mlp_ratio; }));
    f.push_back(int_field("model", "patch_size", [](RunConfig& c) -> int& { return c.model.patch_size; }));
    f.push_back(int_field("model", "image_size", [](RunConfig& c) -> int& { return c.model.image_size; }));
    f.push_back(int_field("model", "channels", [](RunConfig& c) -> int& { return c.model.channels; }));
    f.push_back(int_field("model", "num_classes", [](RunConfig& c) -> int& { return c.model.num_classes; }));
    f.push_back(enum_field<Precision>("model", "precision", [](RunConfig& c) -> Precision& { return c.model.precision; },
                                      {{"f32", Precision::f32}, {"f64", Precision::f64}}));

    f.push_back(int_field("train", "samples", [](RunConfig& c) -> int& { return c.train.samples; }));
    f.push_back(int_field("train", "batch_size", [](RunConfig& c) -> int& { return c.train.batch_size; }));
    f.push_back(double_field("train", "weight_decay", [](RunConfig& c) -> double& { return c.train.weight_decay; }));
    f.push_back(int_field("train", "seed", [](RunConfig& c) -> std::uint64_t& { return c.train.seed; }));
    f.push_back(int_field("train", "teacher_epochs", [](RunConfig& c) -> int& { return c.train.teacher_epochs; }));
    f.push_back(double_field("train", "teacher_lr", [](RunConfig& c) -> double& { return c.train.teacher_lr; }));
    f.push_back(double_field("train", "warmup_lr", [](RunConfig& c) -> double& { return c.train.warmup_lr; }));
    f.push_back(int_field("train", "warmup_epochs", [](RunConfig& c) -> int& { return c.train.warmup_epochs; }));
    f.push_back(double_field("train", "min_lr", [](RunConfig& c) -> double& { return c.train.min_lr; }));

    f.push_back(double_field("distill", "lambda", [](RunConfig& c) -> double& { return c.distill.lambda; }));
    f.push_back(int_field("distill", "epochs", [](RunConfig& c) -> int& { return c.distill.epochs; }));
    f.push_back(double_field("distill", "lr", [](RunConfig& c) -> double& { return c.distill.lr; }));
    f.push_back(int_field("distill", "finetune_epochs", [](RunConfig& c) -> int& { return c.distill.finetune_epochs; }));
    f.push_back(double_field("distill", "finetune_lr", [](RunConfig& c) -> double& { return c.distill.finetune_lr; }));
    f.push_back(enum_field<CosineAxis>("distill", "cosine_axis", [](RunConfig& c) -> CosineAxis& { return c.distill.cosine_axis; },
                                       {{"token", CosineAxis::token}, {"whole", CosineAxis::whole}}));

    f.push_back(double_field("prune", "reg_coeff", [](RunConfig& c) -> double& { return c.prune.reg_coeff; }));
    f.push_back(double_field("prune", "threshold", [](RunConfig& c) -> double& { return c.prune.threshold; }));
    f.push_back(enum_field<ThresholdMode>("prune", "threshold_mode",
                                          [](RunConfig& c) -> ThresholdMode& { return c.prune.threshold_mode; },
                                          {{"absolute", ThresholdMode::absolute}, {"relative", ThresholdMode::relative}}));
    f.push_back(int_field("prune", "reg_epochs", [](RunConfig& c) -> int& { return c.prune.reg_epochs; }));
    f.push_back(int_field("prune", "finetune_epochs", [](RunConfig& c) -> int& { return c.prune.finetune_epochs; }));
    f.push_back(double_field("prune", "lr", [](RunConfig& c) -> double& { return c.prune.lr; }));
    f.push_back(enum_field<PenaltyGroups>("prune", "groups", [](RunConfig& c) -> PenaltyGroups& { return c.prune.groups; },
                                          {{"mandatory", PenaltyGroups::mandatory}, {"extended", PenaltyGroups::extended}}));
    f.push_back(enum_field<PenaltyReduction>("prune", "reduction",
                                             [](RunConfig& c) -> PenaltyReduction& { return c.prune.reduction; },
                                             {{"sum", PenaltyReduction::sum}, {"mean", PenaltyReduction::mean}}));

    f.push_back(int_field("bench", "warmups", [](RunConfig& c) -> int& { return c.bench.warmups; }));
    f.push_back(int_field("bench", "runs", [](RunConfig& c) -> int& { return c.bench.runs; }));
    f.push_back(int_field("bench", "threads", [](RunConfig& c) -> int& { return c.bench.threads; }));
    f.push_back(int_field("bench", "image_size", [](RunConfig& c) -> int& { return c.bench.image_size; }));
    return f;
  }();
  return table;
}

std::string_view trim(std::string_view s) {
  const auto first = s.find_first_not_of(" \t\r");
  if (first == std::string_view::npos) return {};
  const auto last = s.find_last_not_of(" \t\r");
  return s.substr(first, last - first + 1);
}

}  // namespace

RunConfig parse_run_config(std::string_view text) {
  RunConfig config;
  std::string section;
  std::size_t line_no = 0;
  while (!text.empty()) {
    const auto eol = text.find('\n');
    std::string_view line = text.substr(0, eol);
    text = eol == std::string_view::npos ? std::string_view{} : text.substr(eol + 1);
    ++line_no;
    if (const auto hash = line.find_first_of("#;"); hash != std::string_view::npos) line = line.substr(0, hash);
    line = trim(line);
    if (line.empty()) continue;
    auto fail = [&](const std::string& what) {
      throw ConfigError("line " + std::to_string(line_no) + ": " + what);
    };
    if (line.front() == '[') {
      if (line.back() != ']') fail("unterminated section header");
      section = std::string(trim(line.substr(1, line.size() - 2)));
      if (section != "model" && section != "train" && section != "distill" && section != "prune" && section != "bench") {
        fail("unknown section [" + section + "]");
      }
      continue;
    }
    const auto eq = line.find('=');
    if (eq == std::string_view::npos) fail("expected 'key = value'");
    if (section.empty()) fail("key outside of a section");
    const auto key = trim(line.substr(0, eq));
    const auto value = trim(line.substr(eq + 1));
    bool found = false;
    for (const auto& field : fields()) {
      if (field.section == section && field.key == key) {
        try {
          field.set(config, value);
        } catch (const ConfigError& e) {
          fail(std::string(key) + ": " + e.what());
        }
        found = true;
        break;
      }
    }
    if (!found) fail("unknown key '" + std::string(key) + "' in [" + section + "]");
  }
  config.model.validate();
  return config;
}

RunConfig load_run_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config file " + path);
  std::ostringstream buffer;
  buffer << in.rdbuf();
  return parse_run_config(buffer.str());
}

std::string render_run_config(const RunConfig& config) {
  std::string out;
  std::string_view current;
  for (const auto& field : fields()) {
    if (field.section != current) {
      if (!current.empty()) out += '\n';
      current = field.section;
      out += "[" + std::string(current) + "]\n";
    }
    out += std::string(field.key) + " = " + field.get(config) + "\n";
  }
  return out;
}

}  // namespace far
