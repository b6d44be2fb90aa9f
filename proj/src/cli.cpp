#include "irstd/cli.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>

#include "CLI11.hpp"
#include "irstd/checkpoint.hpp"
#include "irstd/config.hpp"
#include "irstd/data.hpp"
#include "irstd/distill.hpp"
#include "irstd/metrics.hpp"
#include "irstd/model.hpp"
#include "irstd/query.hpp"
#include "irstd/train.hpp"

#ifndef IRSTD_VERSION
#define IRSTD_VERSION "unknown"
#endif

namespace fs = std::filesystem;

namespace irstd {

const char* version_string() { return IRSTD_VERSION; }

namespace {

// Configuration problems caught after parsing (missing paths and the like).
struct UsageError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct Common {
  std::string config_file, profile, out, data;
  std::vector<std::string> sets;
  std::optional<int64_t> seed, steps, epochs, batch;
  std::optional<double> lr;
};

struct Flags {
  Common c;
  std::string teacher, augment, init, resume, checkpoint, pred, gt, manifest, match;
  std::optional<double> distance;
  bool csv = false, per_image = false, heatmaps = false;
  std::optional<int64_t> count, size, b, n, d, h, w, heads;
};

void add_common(CLI::App* app, Common& c, bool schedule) {
  app->add_option("--config", c.config_file, "key=value config file");
  app->add_option("--profile", c.profile, "desk or full defaults");
  app->add_option("--set", c.sets, "override, e.g. --set model.stem=2")->take_all();
  app->add_option("--out", c.out, "run directory");
  app->add_option("--seed", c.seed, "run seed");
  app->add_option("--data", c.data, "dataset root (images/, masks/) or 'synth'");
  if (schedule) {
    app->add_option("--steps", c.steps, "optimizer steps");
    app->add_option("--epochs", c.epochs, "epochs (used when steps is 0)");
    app->add_option("--batch", c.batch, "batch size");
    app->add_option("--lr", c.lr, "base learning rate");
  }
}

template <typename T>
void set_if(RunConfig& cfg, const std::string& key, const std::optional<T>& v) {
  if (!v) return;
  if constexpr (std::is_same_v<T, double>) {
    char buf[64];
    std::snprintf(buf, sizeof buf, "%.17g", *v);
    cfg.set(key, buf);
  } else {
    cfg.set(key, std::to_string(*v));
  }
}

void set_if(RunConfig& cfg, const std::string& key, const std::string& v) {
  if (!v.empty()) cfg.set(key, v);
}

RunConfig resolve(const std::string& command, const Flags& f) {
  std::string profile = f.c.profile;
  if (profile.empty() && !f.c.config_file.empty()) profile = profile_in_file(f.c.config_file);
  if (profile.empty()) profile = "desk";
  RunConfig cfg = RunConfig::defaults(profile);
  if (!f.c.config_file.empty()) cfg.merge_file(f.c.config_file);
  cfg.set("run.profile", profile);

  set_if(cfg, "run.seed", f.c.seed);
  set_if(cfg, "run.out_dir", f.c.out);
  set_if(cfg, "data.root", f.c.data);
  if (command == "distill" || command == "train") {
    set_if(cfg, command + ".steps", f.c.steps);
    set_if(cfg, command + ".epochs", f.c.epochs);
    if (f.c.epochs && !f.c.steps) cfg.set(command + ".steps", "0");
    set_if(cfg, command + ".batch", f.c.batch);
    set_if(cfg, command + ".lr", f.c.lr);
    set_if(cfg, command + ".resume", f.resume);
  }
  set_if(cfg, "distill.teacher", f.teacher);
  set_if(cfg, "train.augment", f.augment);
  set_if(cfg, "train.init", f.init);
  if (command == "eval") {
    set_if(cfg, "eval.checkpoint", f.checkpoint);
    set_if(cfg, "eval.pred", f.pred);
    set_if(cfg, "data.root", f.gt);
    set_if(cfg, "eval.match", f.match);
    set_if(cfg, "eval.distance", f.distance);
    if (f.csv) cfg.set("eval.csv", "true");
    if (f.per_image) cfg.set("eval.per_image_iou", "true");
  }
  if (command == "predict") {
    set_if(cfg, "predict.checkpoint", f.checkpoint);
    if (f.heatmaps) cfg.set("predict.heatmaps", "true");
  }
  set_if(cfg, "data.manifest", f.manifest);
  set_if(cfg, "synth.count", f.count);
  set_if(cfg, "synth.size", f.size);
  set_if(cfg, "profile.b", f.b);
  set_if(cfg, "profile.n", f.n);
  set_if(cfg, "profile.d", f.d);
  set_if(cfg, "profile.h", f.h);
  set_if(cfg, "profile.w", f.w);
  set_if(cfg, "profile.heads", f.heads);

  for (const auto& kv : f.c.sets) {
    const auto eq = kv.find('=');
    if (eq == std::string::npos) throw ConfigError("--set expects key=value, got '" + kv + "'");
    cfg.set(kv.substr(0, eq), kv.substr(eq + 1));
  }
  return cfg;
}

// Marks the directory incomplete until finish() runs.
class RunDir {
 public:
  RunDir(const std::string& command, const RunConfig& cfg) {
    std::string dir = cfg.get("run.out_dir");
    if (dir.empty()) {
      const char* root = std::getenv("IRSTD_OUTPUT_ROOT");
      dir = (fs::path(root && *root ? root : "runs") / command).string();
    }
    path_ = dir;
    fs::create_directories(path_);
    std::ofstream(path_ / "INCOMPLETE") << command << " did not finish\n";
    std::ofstream(path_ / "config.txt") << cfg.serialize();
    std::ofstream(path_ / "version.txt") << "irstd " << version_string() << '\n';
  }
  void finish() { fs::remove(path_ / "INCOMPLETE"); }
  const fs::path& path() const { return path_; }
  std::string str() const { return path_.string(); }

 private:
  fs::path path_;
};

std::vector<Sample> load_data(const RunConfig& cfg, bool require_masks = true) {
  const std::string root = cfg.get("data.root");
  if (root == "synth") {
    return synth_generate(cfg.synth(), cfg.get_int("synth.count"));
  }
  if (!fs::is_directory(root)) throw UsageError("data root does not exist: " + root);
  LoadOptions opt = cfg.load_options();
  opt.require_masks = require_masks;
  const std::string manifest = cfg.get("data.manifest");
  Manifest m;
  if (manifest.empty()) {
    m.ids = list_ids(root);
  } else {
    fs::path mp = manifest;
    if (!fs::exists(mp) && fs::exists(fs::path(root) / mp)) mp = fs::path(root) / mp;
    if (!fs::exists(mp)) throw UsageError("manifest does not exist: " + manifest);
    m = Manifest::read(mp.string());
  }
  auto data = load_dataset(root, m, opt);
  if (data.empty()) throw UsageError("no samples found under " + root);
  return data;
}

int64_t resolve_steps(const RunConfig& cfg, const std::string& section, size_t n) {
  int64_t steps = cfg.get_int(section + ".steps");
  const int64_t epochs = cfg.get_int(section + ".epochs");
  const int64_t batch = cfg.get_int(section + ".batch");
  if (steps == 0 && epochs > 0) steps = epochs * ((static_cast<int64_t>(n) + batch - 1) / batch);
  if (steps <= 0) throw ConfigError(section + ".steps or " + section + ".epochs must be positive");
  return steps;
}

void require_file(const std::string& path, const std::string& what) {
  if (path.empty()) throw ConfigError(what + " is required");
  if (!fs::exists(path)) throw UsageError(what + " does not exist: " + path);
}

// Model settings stored with a checkpoint win over the current config.
RunConfig with_checkpoint_model(RunConfig cfg, const Checkpoint& ck) {
  if (!ck.has_text("config")) return cfg;
  RunConfig stored = RunConfig::defaults(cfg.get("run.profile"));
  stored.merge_text(ck.text("config"), "checkpoint config");
  for (const auto& [k, v] : stored.values())
    if (k.rfind("model.", 0) == 0) cfg.set(k, v);
  return cfg;
}

void attach_config(const std::string& path, const RunConfig& cfg) {
  Checkpoint ck = Checkpoint::load(path);
  ck.put_text("config", cfg.serialize());
  ck.save(path);
}

std::string fmt(double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.6g", v);
  return buf;
}

int cmd_distill(const RunConfig& cfg, std::ostream& out) {
  auto data = load_data(cfg);
  std::unique_ptr<Teacher> teacher;
  const std::string t = cfg.get("distill.teacher");
  if (t == "mock") {
    teacher = std::make_unique<MockTeacher>();
  } else {
    if (!fs::is_directory(t)) throw UsageError("teacher directory does not exist: " + t);
    teacher = std::make_unique<FileTeacher>(t);
  }
  DistillConfig dc = cfg.distill();
  dc.steps = resolve_steps(cfg, "distill", data.size());
  const std::string resume = cfg.get("distill.resume");
  if (!resume.empty()) require_file(resume, "resume checkpoint");

  RunDir dir("distill", cfg);
  dc.out_dir = dir.str();
  DistillStudent student(cfg.model());
  DistillResult r = distill_run(student, *teacher, data, dc, resume);
  attach_config(r.checkpoint, cfg);
  if (!r.log.empty()) {
    const double first = r.log.front().total, last = r.log.back().total;
    out << "steps " << dc.steps << "  first loss " << fmt(first) << "  final loss " << fmt(last)
        << "  decrease " << fmt(100.0 * (1.0 - last / first)) << "%\n";
  }
  out << "checkpoint " << r.checkpoint << '\n';
  dir.finish();
  return 0;
}

int cmd_train(const RunConfig& cfg, std::ostream& out) {
  auto data = load_data(cfg);
  TrainConfig tc = cfg.train();
  tc.steps = resolve_steps(cfg, "train", data.size());
  const std::string init = cfg.get("train.init"), resume = cfg.get("train.resume");
  if (!init.empty()) require_file(init, "init checkpoint");
  if (!resume.empty()) require_file(resume, "resume checkpoint");

  RunDir dir("train", cfg);
  tc.out_dir = dir.str();
  IrstdModel model(cfg.model());
  if (!init.empty()) out << "loaded " << load_distilled(model, init) << " tensors from " << init << '\n';
  TrainResult r = train_run(model, data, tc, resume);
  attach_config(r.checkpoint, cfg);
  DetectionReport rep = evaluate_model(model, data, cfg.match(), static_cast<int>(cfg.get_int("eval.batch")));
  std::ofstream(dir.path() / "train_eval.json") << report_json(rep) << '\n';
  out << "steps " << tc.steps << "  final loss " << fmt(r.log.back().total) << "  final lr " << fmt(r.log.back().lr)
      << '\n';
  out << "train set\n" << render_report(rep);
  out << "checkpoint " << r.checkpoint << '\n';
  dir.finish();
  return 0;
}

std::unique_ptr<IrstdModel> load_model(RunConfig& cfg, const std::string& path) {
  require_file(path, "checkpoint");
  Checkpoint ck = Checkpoint::load(path);
  if (ck.has_text("kind") && ck.text("kind") != "train")
    throw UsageError("checkpoint " + path + " holds a " + ck.text("kind") + " model, expected a trained one");
  cfg = with_checkpoint_model(cfg, ck);
  auto model = std::make_unique<IrstdModel>(cfg.model());
  load_parameters(ck, *model);
  return model;
}

Tensor read_prediction(const fs::path& dir, const std::string& id) {
  for (const fs::path& base : {dir, dir / "masks"})
    for (const char* ext : {".png", ".bmp", ".tif", ".tiff", ".jpg"})
      if (fs::exists(base / (id + ext))) return read_mask((base / (id + ext)).string());
  throw UsageError("no prediction for '" + id + "' under " + dir.string());
}

int cmd_eval(RunConfig cfg, std::ostream& out) {
  const std::string pred = cfg.get("eval.pred"), ckpt = cfg.get("eval.checkpoint");
  if (pred.empty() == ckpt.empty()) throw ConfigError("eval needs exactly one of --pred or --checkpoint");
  if (!pred.empty() && !fs::is_directory(pred)) throw UsageError("prediction directory does not exist: " + pred);
  std::unique_ptr<IrstdModel> model;
  if (!ckpt.empty()) model = load_model(cfg, ckpt);
  auto data = load_data(cfg);

  RunDir dir("eval", cfg);
  DetectionReport rep;
  if (model) {
    rep = evaluate_model(*model, data, cfg.match(), static_cast<int>(cfg.get_int("eval.batch")));
  } else {
    std::vector<Tensor> preds, gts;
    std::vector<std::string> ids;
    for (const auto& s : data) {
      Tensor p = read_prediction(pred, s.id);
      if (p.shape() != s.mask.shape())
        throw std::runtime_error("prediction for '" + s.id + "' has a different size than its ground truth");
      preds.push_back(p);
      gts.push_back(s.mask);
      ids.push_back(s.id);
    }
    rep = evaluate(preds, gts, cfg.match(), ids);
  }
  out << render_report(rep);
  std::ofstream(dir.path() / "report.json") << report_json(rep) << '\n';
  if (cfg.get_bool("eval.csv")) std::ofstream(dir.path() / "per_image.csv") << report_csv(rep);
  dir.finish();
  return 0;
}

// Channel-mean of |x| for one sample, scaled to [0, 1].
Tensor heatmap(const Tensor& level) {
  const int64_t c = level.dim(1), h = level.dim(2), w = level.dim(3);
  Tensor m({h, w});
  for (int64_t k = 0; k < c; ++k)
    for (int64_t i = 0; i < h * w; ++i) m.ptr()[i] += std::abs(level.ptr()[k * h * w + i]) / static_cast<double>(c);
  const auto [lo, hi] = std::minmax_element(m.ptr(), m.ptr() + h * w);
  const double a = *lo, span = *hi - *lo;
  for (int64_t i = 0; i < h * w; ++i) m.ptr()[i] = span > 0 ? (m.ptr()[i] - a) / span : 0.0;
  return m;
}

int cmd_predict(RunConfig cfg, std::ostream& out) {
  auto model = load_model(cfg, cfg.get("predict.checkpoint"));
  auto data = load_data(cfg, false);

  RunDir dir("predict", cfg);
  const fs::path masks = dir.path() / "masks";
  fs::create_directories(masks);
  const auto preds = predict_masks(*model, data, static_cast<int>(cfg.get_int("eval.batch")));
  for (size_t i = 0; i < data.size(); ++i) write_mask((masks / (data[i].id + ".png")).string(), preds[i]);

  if (cfg.get_bool("predict.heatmaps")) {
    const fs::path hm = dir.path() / "heatmaps";
    fs::create_directories(hm);
    NoGradGuard ng;
    for (const auto& s : data) {
      Tensor img = ops::reshape(s.image, {1, s.image.dim(0), s.image.dim(1), s.image.dim(2)});
      ModelOutputs o = model->forward(img);
      // before_interaction runs coarsest first; fused levels finest first.
      const auto& before = o.fpn.before_interaction;
      for (size_t l = 0; l < before.size(); ++l)
        write_image((hm / (s.id + "_merge" + std::to_string(l) + "_before.png")).string(),
                    ops::reshape(heatmap(before[l]), {1, before[l].dim(2), before[l].dim(3)}), false);
      for (size_t l = 0; l < o.fused.levels.size(); ++l) {
        const Tensor& f = o.fused.levels[l];
        write_image((hm / (s.id + "_level" + std::to_string(l) + "_after.png")).string(),
                    ops::reshape(heatmap(f), {1, f.dim(2), f.dim(3)}), false);
      }
    }
  }
  out << "wrote " << preds.size() << " masks to " << masks.string() << '\n';
  dir.finish();
  return 0;
}

int cmd_synth(const RunConfig& cfg, std::ostream& out) {
  const SynthConfig sc = cfg.synth();
  const int64_t count = cfg.get_int("synth.count");
  if (count < 1) throw ConfigError("synth.count must be positive");
  RunDir dir("synth", cfg);
  std::vector<Sample> samples;
  int64_t targets = 0;
  for (int64_t i = 0; i < count; ++i) {
    SyntheticSample s = synth_sample(sc, i);
    targets += static_cast<int64_t>(s.targets.size());
    samples.push_back(std::move(s.sample));
  }
  write_dataset(dir.str(), samples, "all.txt");
  out << "wrote " << samples.size() << " samples (" << targets << " targets) to " << dir.str() << '\n';
  dir.finish();
  return 0;
}

int cmd_profile(const RunConfig& cfg, std::ostream& out) {
  const int64_t b = cfg.get_int("profile.b"), n = cfg.get_int("profile.n"), d = cfg.get_int("profile.d");
  const int64_t h = cfg.get_int("profile.h"), w = cfg.get_int("profile.w");
  const int heads = static_cast<int>(cfg.get_int("profile.heads"));
  if (std::min({b, n, d, h, w}) < 1 || heads < 1 || d % heads != 0)
    throw ConfigError("profile sizes must be positive and d divisible by heads");
  const BiAttnCost c = bi_attn_cost(b, n, d, h, w);
  out << "b=" << b << "\nn=" << n << "\nd=" << d << "\nh=" << h << "\nw=" << w << '\n';
  out << "formula.query_proj=" << c.query_proj << "\nformula.feature_proj=" << c.feature_proj
      << "\nformula.cross_dots=" << c.cross_dots << "\nformula.self_dots=" << c.self_dots
      << "\nformula.total_ops=" << c.total_ops << '\n';
  if (cfg.get_bool("profile.measure")) {
    const OpCounts m = measure_bi_attention_ops(b, n, d, h, w, heads, cfg.get_int("run.seed"));
    out << "measured.bi_attention.macs=" << m.macs << "\nmeasured.bi_attention.extra=" << m.extra << '\n';
    DeformConfig dc;
    dc.heads = heads;
    const OpCounts dm = measure_deformable_ops(d, h, w, dc, cfg.get_int("run.seed"));
    out << "measured.deformable.macs=" << dm.macs << "\nmeasured.deformable.extra=" << dm.extra << '\n';
  }
  return 0;
}

}  // namespace

int run_cli(int argc, char** argv, std::ostream& out, std::ostream& err) {
  CLI::App app{"Infrared small target detection: distill, train, eval, predict, synth, profile"};
  app.require_subcommand(1);
  app.set_version_flag("--version", std::string("irstd ") + version_string());
  Flags f;

  auto* distill = app.add_subcommand("distill", "distill the encoder from teacher masks");
  add_common(distill, f.c, true);
  distill->add_option("--teacher", f.teacher, "'mock' or a directory of <id>.ckpt teacher outputs");
  distill->add_option("--resume", f.resume, "checkpoint to resume from");

  auto* train = app.add_subcommand("train", "fine-tune the segmentation model");
  add_common(train, f.c, true);
  train->add_option("--augment", f.augment, "on or off");
  train->add_option("--init", f.init, "distilled checkpoint for the encoder");
  train->add_option("--resume", f.resume, "checkpoint to resume from");

  auto* eval = app.add_subcommand("eval", "IoU, Pd and Fa of predictions or a model");
  add_common(eval, f.c, false);
  eval->add_option("--pred", f.pred, "directory of predicted masks <id>.png");
  eval->add_option("--gt", f.gt, "ground-truth dataset root");
  eval->add_option("--checkpoint", f.checkpoint, "trained model to evaluate");
  eval->add_option("--manifest", f.manifest, "id list");
  eval->add_option("--match", f.match, "centroid or overlap");
  eval->add_option("--distance", f.distance, "centroid match distance in pixels");
  eval->add_flag("--csv", f.csv, "write per-image CSV");
  eval->add_flag("--per-image-iou", f.per_image, "mean of per-image IoU");

  auto* predict = app.add_subcommand("predict", "write binary masks");
  add_common(predict, f.c, false);
  predict->add_option("--checkpoint", f.checkpoint, "trained model");
  predict->add_option("--manifest", f.manifest, "id list");
  predict->add_flag("--heatmaps", f.heatmaps, "also dump feature heatmaps before and after query interaction");

  auto* synth = app.add_subcommand("synth", "write a synthetic dataset");
  add_common(synth, f.c, false);
  synth->add_option("--count", f.count, "number of images");
  synth->add_option("--size", f.size, "square image size");

  auto* profile = app.add_subcommand("profile", "bi-direction attention op counts");
  profile->set_help_flag("--help", "print this help");  // frees -h for --h
  add_common(profile, f.c, false);
  profile->add_option("--b", f.b);
  profile->add_option("--n", f.n);
  profile->add_option("--d", f.d);
  profile->add_option("--h", f.h);
  profile->add_option("--w", f.w);
  profile->add_option("--heads", f.heads);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e, out, err);
    return code == 0 ? 0 : 2;
  }

  std::string command;
  for (auto* s : app.get_subcommands()) command = s->get_name();
  try {
    RunConfig cfg = resolve(command, f);
    if (command == "distill") return cmd_distill(cfg, out);
    if (command == "train") return cmd_train(cfg, out);
    if (command == "eval") return cmd_eval(cfg, out);
    if (command == "predict") return cmd_predict(cfg, out);
    if (command == "synth") return cmd_synth(cfg, out);
    if (command == "profile") return cmd_profile(cfg, out);
    err << "error: unknown command\n";
    return 2;
  } catch (const ConfigError& e) {
    err << "error: " << e.what() << '\n';
    return 2;
  } catch (const UsageError& e) {
    err << "error: " << e.what() << '\n';
    return 2;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << '\n';
    return 1;
  }
}

}  // namespace irstd
