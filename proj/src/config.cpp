#include "irstd/config.hpp"

#include <algorithm>
#include <charconv>
#include <fstream>
#include <sstream>

namespace irstd {

namespace {

enum class Kind { integer, real, boolean, text, list };

struct KeySpec {
  const char* key;
  Kind kind;
  const char* desk;
  const char* full;
};

// clang-format off
const KeySpec kKeys[] = {
    {"run.profile", Kind::text, "desk", "full"},
    {"run.seed", Kind::integer, "0", "0"},
    {"run.out_dir", Kind::text, "", ""},

    {"model.stem", Kind::integer, "1", "4"},
    {"model.channels", Kind::list, "16,24,32,48", "64,128,256,512"},
    {"model.depths", Kind::list, "1,1,2,1", "2,2,6,2"},
    {"model.input_channels", Kind::integer, "1", "3"},
    {"model.expansion", Kind::integer, "2", "2"},
    {"model.dim", Kind::integer, "32", "256"},
    {"model.heads", Kind::integer, "4", "8"},
    {"model.deform_heads", Kind::integer, "4", "8"},
    {"model.deform_points", Kind::integer, "4", "4"},
    {"model.encoder_queries", Kind::integer, "4", "4"},
    {"model.fpn_queries", Kind::integer, "4", "4"},
    {"model.decoder_depth", Kind::integer, "2", "2"},
    {"model.decoder_heads", Kind::integer, "4", "8"},
    {"model.decoder_mlp", Kind::integer, "256", "2048"},
    {"model.sparse_queries", Kind::boolean, "true", "true"},
    {"model.dense_queries", Kind::boolean, "true", "true"},
    {"model.prompt_injection", Kind::boolean, "true", "true"},

    {"data.root", Kind::text, "synth", "synth"},
    {"data.manifest", Kind::text, "", ""},
    {"data.resize", Kind::integer, "0", "0"},

    {"synth.count", Kind::integer, "32", "256"},
    {"synth.size", Kind::integer, "32", "256"},
    {"synth.min_targets", Kind::integer, "1", "1"},
    {"synth.max_targets", Kind::integer, "3", "3"},
    {"synth.min_radius", Kind::real, "1.5", "1.5"},
    {"synth.max_radius", Kind::real, "4", "4"},
    {"synth.min_contrast", Kind::real, "0.3", "0.3"},
    {"synth.max_contrast", Kind::real, "0.6", "0.6"},
    {"synth.octaves", Kind::integer, "4", "4"},
    {"synth.clutter", Kind::real, "0.25", "0.25"},
    {"synth.noise", Kind::real, "0.01", "0.01"},
    {"synth.seed", Kind::integer, "0", "0"},

    {"loss.lambda_distill", Kind::real, "5", "5"},
    {"loss.lambda_dice", Kind::real, "5", "5"},
    {"loss.temperature", Kind::real, "1", "1"},
    {"loss.dice_eps", Kind::real, "1", "1"},
    {"loss.points", Kind::integer, "1024", "12544"},
    {"loss.oversample", Kind::real, "3", "3"},
    {"loss.importance", Kind::real, "0.75", "0.75"},
    {"loss.snap_points", Kind::boolean, "true", "true"},
    {"loss.soft_teacher_targets", Kind::boolean, "false", "false"},

    {"distill.steps", Kind::integer, "300", "0"},
    {"distill.epochs", Kind::integer, "0", "20"},
    {"distill.batch", Kind::integer, "4", "16"},
    {"distill.prompts", Kind::integer, "2", "2"},
    {"distill.lr", Kind::real, "0.003", "0.0001"},
    {"distill.weight_decay", Kind::real, "0.05", "0.05"},
    {"distill.clip", Kind::real, "0", "0"},
    {"distill.teacher", Kind::text, "mock", "mock"},
    {"distill.checkpoint_every", Kind::integer, "0", "0"},
    {"distill.resume", Kind::text, "", ""},

    {"train.steps", Kind::integer, "500", "0"},
    {"train.epochs", Kind::integer, "0", "150"},
    {"train.batch", Kind::integer, "4", "16"},
    {"train.lr", Kind::real, "0.0001", "0.0001"},
    {"train.min_lr", Kind::real, "0.000001", "0.000001"},
    {"train.warmup", Kind::integer, "10", "10"},
    {"train.weight_decay", Kind::real, "0.05", "0.05"},
    {"train.clip", Kind::real, "0", "0"},
    {"train.augment", Kind::boolean, "true", "true"},
    {"train.scale_min", Kind::real, "0.5", "0.5"},
    {"train.scale_max", Kind::real, "2", "2"},
    {"train.crop", Kind::integer, "0", "0"},
    {"train.point_sampled", Kind::boolean, "true", "true"},
    {"train.early_weight", Kind::real, "1", "1"},
    {"train.init", Kind::text, "", ""},
    {"train.eval_every", Kind::integer, "0", "0"},
    {"train.checkpoint_every", Kind::integer, "0", "0"},
    {"train.resume", Kind::text, "", ""},

    {"eval.checkpoint", Kind::text, "", ""},
    {"eval.pred", Kind::text, "", ""},
    {"eval.match", Kind::text, "centroid", "centroid"},
    {"eval.distance", Kind::real, "3", "3"},
    {"eval.per_image_iou", Kind::boolean, "false", "false"},
    {"eval.batch", Kind::integer, "4", "4"},
    {"eval.csv", Kind::boolean, "false", "false"},

    {"predict.checkpoint", Kind::text, "", ""},
    {"predict.heatmaps", Kind::boolean, "false", "false"},

    {"profile.b", Kind::integer, "1", "1"},
    {"profile.n", Kind::integer, "4", "4"},
    {"profile.d", Kind::integer, "256", "256"},
    {"profile.h", Kind::integer, "64", "64"},
    {"profile.w", Kind::integer, "64", "64"},
    {"profile.heads", Kind::integer, "8", "8"},
    {"profile.measure", Kind::boolean, "true", "true"},
};
// clang-format on

const KeySpec* find_key(const std::string& key) {
  for (const auto& k : kKeys)
    if (key == k.key) return &k;
  return nullptr;
}

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return "";
  return s.substr(b, s.find_last_not_of(" \t\r") - b + 1);
}

bool parse_int(const std::string& s, int64_t& out) {
  const char* end = s.data() + s.size();
  auto r = std::from_chars(s.data(), end, out);
  return r.ec == std::errc{} && r.ptr == end && !s.empty();
}

bool parse_real(const std::string& s, double& out) {
  if (s.empty()) return false;
  size_t used = 0;
  try {
    out = std::stod(s, &used);
  } catch (const std::exception&) {
    return false;
  }
  return used == s.size();
}

bool parse_bool(const std::string& s, bool& out) {
  if (s == "true" || s == "on" || s == "1" || s == "yes") return out = true, true;
  if (s == "false" || s == "off" || s == "0" || s == "no") return out = false, true;
  return false;
}

bool parse_list(const std::string& s, std::vector<int64_t>& out) {
  out.clear();
  std::stringstream ss(s);
  for (std::string part; std::getline(ss, part, ',');) {
    int64_t v = 0;
    if (!parse_int(trim(part), v)) return false;
    out.push_back(v);
  }
  return !out.empty();
}

}  // namespace

RunConfig RunConfig::defaults(const std::string& profile) {
  if (profile != "desk" && profile != "full") throw ConfigError("unknown profile '" + profile + "' (desk|full)");
  RunConfig c;
  for (const auto& k : kKeys) c.values_[k.key] = profile == "desk" ? k.desk : k.full;
  return c;
}

std::vector<std::string> RunConfig::known_keys() {
  std::vector<std::string> out;
  for (const auto& k : kKeys) out.emplace_back(k.key);
  return out;
}

void RunConfig::set(const std::string& key, const std::string& raw) {
  const KeySpec* spec = find_key(key);
  if (!spec) throw ConfigError("unknown config key '" + key + "'");
  const std::string value = trim(raw);
  bool ok = true;
  switch (spec->kind) {
    case Kind::integer: {
      int64_t v;
      ok = parse_int(value, v);
      break;
    }
    case Kind::real: {
      double v;
      ok = parse_real(value, v);
      break;
    }
    case Kind::boolean: {
      bool v;
      ok = parse_bool(value, v);
      break;
    }
    case Kind::list: {
      std::vector<int64_t> v;
      ok = parse_list(value, v);
      break;
    }
    case Kind::text:
      break;
  }
  if (!ok) throw ConfigError("bad value '" + value + "' for " + key);
  values_[key] = value;
}

void RunConfig::merge_text(const std::string& text, const std::string& origin) {
  std::istringstream is(text);
  std::string line;
  int lineno = 0;
  while (std::getline(is, line)) {
    ++lineno;
    const auto hash = line.find('#');
    if (hash != std::string::npos) line.resize(hash);
    line = trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos)
      throw ConfigError(origin + ":" + std::to_string(lineno) + ": expected key=value, got '" + line + "'");
    try {
      set(trim(line.substr(0, eq)), line.substr(eq + 1));
    } catch (const ConfigError& e) {
      throw ConfigError(origin + ":" + std::to_string(lineno) + ": " + e.what());
    }
  }
}

void RunConfig::merge_file(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw ConfigError("cannot read config file " + path);
  std::stringstream ss;
  ss << is.rdbuf();
  merge_text(ss.str(), path);
}

std::string profile_in_file(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw ConfigError("cannot read config file " + path);
  std::string line, found;
  while (std::getline(is, line)) {
    const auto hash = line.find('#');
    if (hash != std::string::npos) line.resize(hash);
    const auto eq = line.find('=');
    if (eq != std::string::npos && trim(line.substr(0, eq)) == "run.profile") found = trim(line.substr(eq + 1));
  }
  return found;
}

const std::string& RunConfig::get(const std::string& key) const {
  auto it = values_.find(key);
  if (it == values_.end()) throw ConfigError("unknown config key '" + key + "'");
  return it->second;
}

int64_t RunConfig::get_int(const std::string& key) const {
  int64_t v = 0;
  if (!parse_int(get(key), v)) throw ConfigError(key + " is not an integer");
  return v;
}

double RunConfig::get_double(const std::string& key) const {
  double v = 0;
  if (!parse_real(get(key), v)) throw ConfigError(key + " is not a number");
  return v;
}

bool RunConfig::get_bool(const std::string& key) const {
  bool v = false;
  if (!parse_bool(get(key), v)) throw ConfigError(key + " is not a boolean");
  return v;
}

std::vector<int64_t> RunConfig::get_list(const std::string& key) const {
  std::vector<int64_t> v;
  if (!parse_list(get(key), v)) throw ConfigError(key + " is not a comma-separated integer list");
  return v;
}

std::string RunConfig::serialize() const {
  std::ostringstream os;
  for (const auto& [k, v] : values_) os << k << '=' << v << '\n';
  return os.str();
}

ModelConfig RunConfig::model() const {
  ModelConfig c;
  c.encoder.stem_downsample = static_cast<int>(get_int("model.stem"));
  const auto ch = get_list("model.channels");
  const auto dp = get_list("model.depths");
  if (ch.size() != 4 || dp.size() != 4) throw ConfigError("model.channels and model.depths need 4 entries");
  for (size_t i = 0; i < 4; ++i) {
    c.encoder.stage_channels[i] = ch[i];
    c.encoder.stage_depths[i] = static_cast<int>(dp[i]);
  }
  c.encoder.input_channels = static_cast<int>(get_int("model.input_channels"));
  c.encoder.expansion = static_cast<int>(get_int("model.expansion"));
  c.dim = get_int("model.dim");
  c.heads = static_cast<int>(get_int("model.heads"));
  c.deform.heads = static_cast<int>(get_int("model.deform_heads"));
  c.deform.points = static_cast<int>(get_int("model.deform_points"));
  c.encoder_queries = static_cast<int>(get_int("model.encoder_queries"));
  c.fpn_queries = static_cast<int>(get_int("model.fpn_queries"));
  c.decoder.dim = c.dim;
  c.decoder.depth = static_cast<int>(get_int("model.decoder_depth"));
  c.decoder.heads = static_cast<int>(get_int("model.decoder_heads"));
  c.decoder.mlp_dim = get_int("model.decoder_mlp");
  c.sparse_queries = get_bool("model.sparse_queries");
  c.dense_queries = get_bool("model.dense_queries");
  c.prompt_injection = get_bool("model.prompt_injection");
  c.seed = static_cast<uint64_t>(get_int("run.seed"));
  try {
    c.validate();
  } catch (const std::invalid_argument& e) {
    throw ConfigError(e.what());
  }
  return c;
}

LossConfig RunConfig::loss() const {
  LossConfig c;
  c.lambda_distill = get_double("loss.lambda_distill");
  c.lambda_dice = get_double("loss.lambda_dice");
  c.temperature = get_double("loss.temperature");
  c.dice_eps = get_double("loss.dice_eps");
  c.point_count = get_int("loss.points");
  c.oversample_ratio = get_double("loss.oversample");
  c.importance_fraction = get_double("loss.importance");
  c.snap_points = get_bool("loss.snap_points");
  c.soft_teacher_targets = get_bool("loss.soft_teacher_targets");
  try {
    c.validate();
  } catch (const std::invalid_argument& e) {
    throw ConfigError(e.what());
  }
  return c;
}

SynthConfig RunConfig::synth() const {
  SynthConfig c;
  c.height = c.width = get_int("synth.size");
  c.channels = static_cast<int>(get_int("model.input_channels"));
  c.min_targets = static_cast<int>(get_int("synth.min_targets"));
  c.max_targets = static_cast<int>(get_int("synth.max_targets"));
  c.min_radius = get_double("synth.min_radius");
  c.max_radius = get_double("synth.max_radius");
  c.min_contrast = get_double("synth.min_contrast");
  c.max_contrast = get_double("synth.max_contrast");
  c.octaves = static_cast<int>(get_int("synth.octaves"));
  c.clutter = get_double("synth.clutter");
  c.noise = get_double("synth.noise");
  c.seed = static_cast<uint64_t>(get_int("synth.seed"));
  try {
    c.validate();
  } catch (const std::invalid_argument& e) {
    throw ConfigError(e.what());
  }
  return c;
}

DistillConfig RunConfig::distill() const {
  DistillConfig c;
  c.steps = get_int("distill.steps");
  c.batch = static_cast<int>(get_int("distill.batch"));
  c.prompts = static_cast<int>(get_int("distill.prompts"));
  c.lr = get_double("distill.lr");
  c.adamw.weight_decay = get_double("distill.weight_decay");
  c.clip_norm = get_double("distill.clip");
  c.loss = loss();
  c.seed = static_cast<uint64_t>(get_int("run.seed"));
  c.checkpoint_every = get_int("distill.checkpoint_every");
  if (c.batch < 1 || c.prompts < 1 || c.lr < 0) throw ConfigError("distill.batch/prompts must be >= 1, lr >= 0");
  return c;
}

AugmentConfig RunConfig::augment() const {
  AugmentConfig a;
  a.enabled = get_bool("train.augment");
  a.scale_min = get_double("train.scale_min");
  a.scale_max = get_double("train.scale_max");
  a.crop = get_int("train.crop");
  if (a.scale_min <= 0 || a.scale_max < a.scale_min) throw ConfigError("train.scale_min/scale_max invalid");
  return a;
}

TrainConfig RunConfig::train() const {
  TrainConfig c;
  c.steps = get_int("train.steps");
  c.batch = static_cast<int>(get_int("train.batch"));
  c.lr = get_double("train.lr");
  c.min_lr = get_double("train.min_lr");
  c.warmup = get_int("train.warmup");
  c.adamw.weight_decay = get_double("train.weight_decay");
  c.clip_norm = get_double("train.clip");
  c.loss = loss();
  c.augment = augment();
  c.point_sampled = get_bool("train.point_sampled");
  c.early_weight = get_double("train.early_weight");
  c.seed = static_cast<uint64_t>(get_int("run.seed"));
  c.eval_every = get_int("train.eval_every");
  c.checkpoint_every = get_int("train.checkpoint_every");
  if (c.batch < 1 || c.lr < 0 || c.min_lr < 0 || c.warmup < 0) throw ConfigError("train schedule settings invalid");
  return c;
}

MatchConfig RunConfig::match() const {
  MatchConfig m;
  try {
    m.rule = parse_match_rule(get("eval.match"));
  } catch (const std::invalid_argument& e) {
    throw ConfigError(e.what());
  }
  m.distance = get_double("eval.distance");
  m.per_image_iou = get_bool("eval.per_image_iou");
  return m;
}

LoadOptions RunConfig::load_options() const {
  LoadOptions o;
  o.channels = static_cast<int>(get_int("model.input_channels"));
  o.resize = get_int("data.resize");
  return o;
}

}  // namespace irstd
