#include <charconv>
#include <fstream>
#include <functional>
#include <sstream>

#include "nem/errors.hpp"
#include "nem/harness.hpp"

namespace nem {

namespace {

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

std::uint64_t to_u64(const std::string& key, const std::string& v) {
  std::uint64_t out = 0;
  auto [p, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
  if (ec != std::errc() || p != v.data() + v.size()) {
    throw ConfigError(key + ": expected a non-negative integer, got '" + v + "'");
  }
  return out;
}

std::size_t to_size(const std::string& key, const std::string& v) {
  return static_cast<std::size_t>(to_u64(key, v));
}

double to_double(const std::string& key, const std::string& v) {
  try {
    std::size_t used = 0;
    const double d = std::stod(v, &used);
    if (used != v.size()) throw std::invalid_argument(v);
    return d;
  } catch (const std::exception&) {
    throw ConfigError(key + ": expected a number, got '" + v + "'");
  }
}

bool to_bool(const std::string& key, const std::string& v) {
  if (v == "true" || v == "1") return true;
  if (v == "false" || v == "0") return false;
  throw ConfigError(key + ": expected true|false, got '" + v + "'");
}

std::vector<std::size_t> to_list(const std::string& key, const std::string& v) {
  std::vector<std::size_t> out;
  std::stringstream ss(v);
  std::string item;
  while (std::getline(ss, item, ',')) {
    item = trim(item);
    if (!item.empty()) out.push_back(to_size(key, item));
  }
  return out;
}

std::string opt_str(const std::optional<std::size_t>& v) {
  return v ? std::to_string(*v) : "none";
}

std::optional<std::size_t> to_opt(const std::string& key, const std::string& v) {
  if (v == "none" || v.empty()) return std::nullopt;
  return to_size(key, v);
}

using Setter = std::function<void(ExperimentConfig&, const std::string&, const std::string&)>;
using Getter = std::function<std::string(const ExperimentConfig&)>;

struct Field {
  const char* key;
  Setter set;
  Getter get;
};

#define NEM_SIZE_FIELD(KEY, MEMBER)                                                        \
  Field {                                                                                  \
    KEY, [](ExperimentConfig& c, const std::string& k, const std::string& v) {             \
      c.MEMBER = to_size(k, v);                                                            \
    },                                                                                     \
        [](const ExperimentConfig& c) { return std::to_string(c.MEMBER); }                 \
  }
#define NEM_DOUBLE_FIELD(KEY, MEMBER)                                                      \
  Field {                                                                                  \
    KEY, [](ExperimentConfig& c, const std::string& k, const std::string& v) {             \
      c.MEMBER = to_double(k, v);                                                          \
    },                                                                                     \
        [](const ExperimentConfig& c) { return format_double(c.MEMBER); }                  \
  }
#define NEM_BOOL_FIELD(KEY, MEMBER)                                                        \
  Field {                                                                                  \
    KEY, [](ExperimentConfig& c, const std::string& k, const std::string& v) {             \
      c.MEMBER = to_bool(k, v);                                                            \
    },                                                                                     \
        [](const ExperimentConfig& c) { return std::string(c.MEMBER ? "true" : "false"); } \
  }
#define NEM_OPT_FIELD(KEY, MEMBER)                                                         \
  Field {                                                                                  \
    KEY, [](ExperimentConfig& c, const std::string& k, const std::string& v) {             \
      c.MEMBER = to_opt(k, v);                                                             \
    },                                                                                     \
        [](const ExperimentConfig& c) { return opt_str(c.MEMBER); }                        \
  }

const std::vector<Field>& fields() {
  static const std::vector<Field> f = {
      {"run.id", [](ExperimentConfig& c, const std::string&, const std::string& v) { c.run_id = v; },
       [](const ExperimentConfig& c) { return c.run_id; }},
      {"run.seed",
       [](ExperimentConfig& c, const std::string& k, const std::string& v) { c.seed = to_u64(k, v); },
       [](const ExperimentConfig& c) { return std::to_string(c.seed); }},
      {"data.kind",
       [](ExperimentConfig& c, const std::string&, const std::string& v) {
         c.data_kind = parse_data_kind(v);
       },
       [](const ExperimentConfig& c) { return std::string(data_kind_name(c.data_kind)); }},
      NEM_SIZE_FIELD("data.train", train_size),
      NEM_SIZE_FIELD("data.val", val_size),
      NEM_SIZE_FIELD("data.test", test_size),
      NEM_SIZE_FIELD("data.objects", objects),
      NEM_SIZE_FIELD("data.frames", frames),
      NEM_SIZE_FIELD("data.size", image_size),
      {"data.mnist_images",
       [](ExperimentConfig& c, const std::string&, const std::string& v) { c.mnist_images = v; },
       [](const ExperimentConfig& c) { return c.mnist_images; }},
      NEM_SIZE_FIELD("data.digits", digits),
      NEM_DOUBLE_FIELD("data.gt_threshold", gt_threshold),
      {"model.variant",
       [](ExperimentConfig& c, const std::string&, const std::string& v) {
         c.variant = parse_variant(v);
       },
       [](const ExperimentConfig& c) { return std::string(variant_name(c.variant)); }},
      {"model.arch", [](ExperimentConfig& c, const std::string&, const std::string& v) { c.arch = v; },
       [](const ExperimentConfig& c) { return c.arch; }},
      NEM_SIZE_FIELD("model.hidden", hidden),
      NEM_SIZE_FIELD("model.k", k),
      NEM_SIZE_FIELD("model.steps", steps),
      {"model.pixel",
       [](ExperimentConfig& c, const std::string&, const std::string& v) {
         c.pixel = parse_pixel_family(v);
       },
       [](const ExperimentConfig& c) { return std::string(pixel_family_name(c.pixel)); }},
      NEM_DOUBLE_FIELD("model.sigma2", sigma2),
      NEM_DOUBLE_FIELD("model.prior", prior),
      NEM_DOUBLE_FIELD("model.init_std", init_std),
      {"loss.placement",
       [](ExperimentConfig& c, const std::string&, const std::string& v) {
         c.placement = parse_loss_placement(v);
       },
       [](const ExperimentConfig& c) { return std::string(loss_placement_name(c.placement)); }},
      NEM_DOUBLE_FIELD("loss.inter_weight", inter_weight),
      NEM_BOOL_FIELD("loss.next_step", next_step),
      NEM_BOOL_FIELD("loss.input_normalization", input_normalization),
      {"noise.kind",
       [](ExperimentConfig& c, const std::string&, const std::string& v) {
         c.noise.kind = parse_noise_kind(v);
       },
       [](const ExperimentConfig& c) { return std::string(noise_kind_name(c.noise.kind)); }},
      NEM_DOUBLE_FIELD("noise.p", noise.p),
      NEM_DOUBLE_FIELD("train.lr", lr),
      NEM_DOUBLE_FIELD("train.stage_lr", stage_lr),
      NEM_SIZE_FIELD("train.batch", batch),
      NEM_SIZE_FIELD("train.max_epochs", max_epochs),
      NEM_SIZE_FIELD("train.patience", patience),
      {"train.stages",
       [](ExperimentConfig& c, const std::string& k, const std::string& v) { c.stages = to_list(k, v); },
       [](const ExperimentConfig& c) {
         std::string s;
         for (std::size_t i = 0; i < c.stages.size(); ++i) {
           if (i) s += ",";
           s += std::to_string(c.stages[i]);
         }
         return s;
       }},
      NEM_OPT_FIELD("eval.k", eval_k),
      NEM_OPT_FIELD("eval.steps", eval_steps),
      NEM_OPT_FIELD("eval.frames", eval_frames),
      NEM_SIZE_FIELD("eval.seeds", eval_seeds),
      {"eval.normalizer",
       [](ExperimentConfig& c, const std::string&, const std::string& v) {
         c.normalizer = parse_ami_normalizer(v);
       },
       [](const ExperimentConfig& c) { return std::string(ami_normalizer_name(c.normalizer)); }},
  };
  return f;
}

}  // namespace

KeyValues KeyValues::parse(const std::string& text, const std::string& origin) {
  KeyValues kv;
  std::stringstream ss(text);
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(ss, line)) {
    ++lineno;
    if (auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
    line = trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    const std::string where = origin + ":" + std::to_string(lineno);
    if (eq == std::string::npos) throw ConfigError(where + ": expected 'key = value'");
    const std::string key = trim(line.substr(0, eq));
    const std::string value = trim(line.substr(eq + 1));
    if (key.empty()) throw ConfigError(where + ": empty key");
    if (kv.values_.count(key)) throw ConfigError(where + ": duplicate key '" + key + "'");
    kv.values_[key] = value;
  }
  return kv;
}

KeyValues KeyValues::load(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot read config '" + path + "'");
  std::stringstream ss;
  ss << in.rdbuf();
  return parse(ss.str(), path);
}

void KeyValues::apply_override(const std::string& assignment) {
  const auto eq = assignment.find('=');
  if (eq == std::string::npos) throw ConfigError("override '" + assignment + "' is not key=value");
  const std::string key = trim(assignment.substr(0, eq));
  if (key.empty()) throw ConfigError("override '" + assignment + "' has an empty key");
  values_[key] = trim(assignment.substr(eq + 1));
}

DataKind parse_data_kind(std::string_view name) {
  if (name == "static_shapes") return DataKind::StaticShapes;
  if (name == "flying_shapes") return DataKind::FlyingShapes;
  if (name == "flying_mnist") return DataKind::FlyingMnist;
  throw ConfigError("unknown data kind '" + std::string(name) +
                    "' (expected static_shapes|flying_shapes|flying_mnist)");
}

std::string_view data_kind_name(DataKind k) {
  switch (k) {
    case DataKind::StaticShapes: return "static_shapes";
    case DataKind::FlyingShapes: return "flying_shapes";
    case DataKind::FlyingMnist: return "flying_mnist";
  }
  return "?";
}

ExperimentConfig ExperimentConfig::from(const KeyValues& kv) {
  ExperimentConfig c;
  for (const auto& [key, value] : kv.values()) {
    if (key == "config.version") {
      if (to_size(key, value) != static_cast<std::size_t>(kConfigVersion)) {
        throw ConfigError("unsupported config version " + value);
      }
      continue;
    }
    bool found = false;
    for (const Field& f : fields()) {
      if (key == f.key) {
        f.set(c, key, value);
        found = true;
        break;
      }
    }
    if (!found) throw ConfigError("unknown config key '" + key + "'");
  }
  c.validate();
  return c;
}

ExperimentConfig ExperimentConfig::load(const std::string& path,
                                        const std::vector<std::string>& overrides) {
  KeyValues kv = path.empty() ? KeyValues{} : KeyValues::load(path);
  for (const auto& o : overrides) kv.apply_override(o);
  return from(kv);
}

std::string ExperimentConfig::serialize() const {
  std::string out = "config.version = " + std::to_string(kConfigVersion) + "\n";
  for (const Field& f : fields()) out += std::string(f.key) + " = " + f.get(*this) + "\n";
  return out;
}

void ExperimentConfig::validate() const {
  if (k == 0) throw ConfigError("model.k must be at least 1");
  if (steps == 0) throw ConfigError("model.steps must be at least 1");
  if (batch == 0) throw ConfigError("train.batch must be at least 1");
  if (patience == 0) throw ConfigError("train.patience must be at least 1");
  if (frames == 0) throw ConfigError("data.frames must be at least 1");
  if (hidden == 0) throw ConfigError("model.hidden must be at least 1");
  if (eval_seeds == 0) throw ConfigError("eval.seeds must be at least 1");
  if (eval_k && *eval_k == 0) throw ConfigError("eval.k must be at least 1");
  if (eval_steps && *eval_steps == 0) throw ConfigError("eval.steps must be at least 1");
  if (!(lr >= 0.0) || !(stage_lr >= 0.0)) throw ConfigError("learning rates must be non-negative");
  if (noise.p < 0.0 || noise.p > 1.0) throw ConfigError("noise.p must lie in [0, 1]");
  if (data_kind == DataKind::StaticShapes && frames != 1) {
    throw ConfigError("static_shapes data has exactly one frame");
  }
  if (next_step && frames < 2) throw ConfigError("loss.next_step needs data.frames >= 2");
  if (arch != "static" && arch != "conv_shapes" && arch != "conv_mnist") {
    throw ConfigError("unknown model.arch '" + arch + "' (expected static|conv_shapes|conv_mnist)");
  }
  if (arch != "static" && variant == Variant::Nem) {
    throw ConfigError("N-EM is only defined for the static decoder");
  }
  if (arch == "conv_shapes" && image_size != 28) throw ConfigError("conv_shapes needs data.size = 28");
  if (arch == "conv_mnist" && image_size != 24) throw ConfigError("conv_mnist needs data.size = 24");
  pixel_model().validate();
}

NetworkSpec ExperimentConfig::network_spec() const {
  const std::size_t d = image_size * image_size;
  if (arch == "static") {
    return variant == Variant::Nem ? build_static_decoder(hidden, d) : build_static_rnn(d, hidden);
  }
  NetworkSpec s = build_conv_encdec(arch == "conv_shapes" ? ConvVariant::Shapes : ConvVariant::Mnist);
  s.layers[*s.recurrent_slot()].units = hidden;
  s.infer_shapes();
  return s;
}

PixelModel ExperimentConfig::pixel_model() const {
  PixelModel m;
  m.family = pixel;
  m.sigma2 = sigma2;
  m.prior = prior;
  return m;
}

UnrollConfig ExperimentConfig::unroll_config() const {
  UnrollConfig u;
  u.variant = variant;
  u.k = k;
  u.steps = steps;
  u.placement = placement;
  u.next_step_prediction = next_step;
  u.inter_weight = inter_weight;
  u.input_normalization = input_normalization;
  u.noise = noise;
  u.init_std = init_std;
  return u;
}

UnrollConfig ExperimentConfig::eval_unroll_config() const {
  UnrollConfig u = unroll_config();
  if (eval_k) u.k = *eval_k;
  if (eval_steps) u.steps = *eval_steps;
  return u;
}

}  // namespace nem
