#include "irstd/distill.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <random>
#include <sstream>
#include <stdexcept>

#include "irstd/checkpoint.hpp"
#include "irstd/metrics.hpp"
#include "json.hpp"

namespace fs = std::filesystem;

namespace irstd {

namespace {

uint64_t mix_seed(uint64_t a, uint64_t b, uint64_t c = 0) {
  std::seed_seq seq{static_cast<uint32_t>(a), static_cast<uint32_t>(a >> 32), static_cast<uint32_t>(b),
                    static_cast<uint32_t>(b >> 32), static_cast<uint32_t>(c), static_cast<uint32_t>(c >> 32)};
  std::array<uint32_t, 2> w{};
  seq.generate(w.begin(), w.end());
  return (static_cast<uint64_t>(w[0]) << 32) | w[1];
}

// Euclidean disk dilation of a pixel set.
std::vector<char> dilate(const std::vector<char>& in, int64_t h, int64_t w, int r) {
  if (r == 0) return in;
  std::vector<char> out(in.size(), 0);
  for (int64_t y = 0; y < h; ++y)
    for (int64_t x = 0; x < w; ++x) {
      if (!in[y * w + x]) continue;
      for (int64_t dy = -r; dy <= r; ++dy)
        for (int64_t dx = -r; dx <= r; ++dx) {
          if (dy * dy + dx * dx > r * r) continue;
          const int64_t ny = y + dy, nx = x + dx;
          if (ny >= 0 && nx >= 0 && ny < h && nx < w) out[ny * w + nx] = 1;
        }
    }
  return out;
}

}  // namespace

TeacherOutputs mock_teacher(const Tensor& gt, int prompts, uint64_t seed) {
  if (prompts < 1) throw std::invalid_argument("mock_teacher: prompt count must be >= 1");
  const int64_t h = gt.dim(gt.rank() - 2), w = gt.dim(gt.rank() - 1);
  std::mt19937_64 rng(seed);
  auto comps = connected_components(gt);
  std::vector<size_t> order(comps.size());
  std::iota(order.begin(), order.end(), 0);
  std::shuffle(order.begin(), order.end(), rng);

  TeacherOutputs t;
  t.mid = Tensor({1, int64_t{kGranularities} * prompts, h, w}, -kMockLogit);
  t.final = Tensor({1, prompts, h, w}, -kMockLogit);
  t.selected.resize(1);
  t.prompts.resize(1);
  for (int n = 0; n < prompts; ++n) {
    std::vector<char> base(static_cast<size_t>(h * w), 0);
    int64_t pixel = 0;
    if (comps.empty()) {
      pixel = std::uniform_int_distribution<int64_t>(0, h * w - 1)(rng);
    } else {
      const Component& c = comps[order[static_cast<size_t>(n) % order.size()]];
      pixel = c.pixels[std::uniform_int_distribution<size_t>(0, c.pixels.size() - 1)(rng)];
      for (int64_t p : c.pixels) base[p] = 1;
    }
    t.prompts[0].emplace_back((static_cast<double>(pixel % w) + 0.5) / static_cast<double>(w),
                              (static_cast<double>(pixel / w) + 0.5) / static_cast<double>(h));
    for (int k = 0; k < kGranularities; ++k) {
      const auto m = dilate(base, h, w, kMockRadii[k]);
      double* dst = t.mid.ptr() + (static_cast<int64_t>(n) * kGranularities + k) * h * w;
      for (int64_t i = 0; i < h * w; ++i) dst[i] = m[i] ? kMockLogit : -kMockLogit;
    }
    std::copy_n(t.mid.ptr() + static_cast<int64_t>(n) * kGranularities * h * w, h * w, t.final.ptr() + n * h * w);
    t.selected[0].push_back(n * kGranularities);
  }
  return t;
}

TeacherOutputs stack_teachers(const std::vector<TeacherOutputs>& parts) {
  if (parts.empty()) throw std::invalid_argument("stack_teachers: nothing to stack");
  TeacherOutputs out;
  std::vector<Tensor> mids, finals;
  for (const auto& p : parts) {
    mids.push_back(p.mid);
    finals.push_back(p.final);
    out.selected.insert(out.selected.end(), p.selected.begin(), p.selected.end());
    out.prompts.insert(out.prompts.end(), p.prompts.begin(), p.prompts.end());
  }
  out.mid = ops::concat(mids, 0);
  out.final = ops::concat(finals, 0);
  return out;
}

TeacherOutputs FileTeacher::operator()(const Sample& sample, int, uint64_t) const {
  const std::string path = (fs::path(dir_) / (sample.id + ".ckpt")).string();
  Checkpoint ck = Checkpoint::load(path);
  TeacherOutputs t;
  const Tensor& mid = ck.get("mid");
  const Tensor& fin = ck.get("final");
  t.mid = ops::reshape(mid, {1, mid.dim(0), mid.dim(1), mid.dim(2)});
  t.final = ops::reshape(fin, {1, fin.dim(0), fin.dim(1), fin.dim(2)});
  if (t.mid.dim(1) % kGranularities != 0)
    throw ShapeError(path + ": mid count " + std::to_string(t.mid.dim(1)) + " is not a multiple of 6");
  t.selected.resize(1);
  t.prompts.resize(1);
  std::istringstream sel(ck.text("selected"));
  for (int i; sel >> i;) t.selected[0].push_back(i);
  std::istringstream pr(ck.text("prompts"));
  for (double x, y; pr >> x >> y;) t.prompts[0].emplace_back(x, y);
  if (static_cast<int64_t>(t.selected[0].size()) != t.final.dim(1))
    throw std::runtime_error(path + ": selected index count does not match final masks");
  if (static_cast<int64_t>(t.prompts[0].size()) * kGranularities != t.mid.dim(1))
    throw std::runtime_error(path + ": prompt count does not match mid masks");
  return t;
}

void FileTeacher::write(const std::string& dir, const std::string& id, const TeacherOutputs& t) {
  fs::create_directories(dir);
  Checkpoint ck;
  ck.put("mid", ops::reshape(t.mid, {t.mid.dim(1), t.mid.dim(2), t.mid.dim(3)}));
  ck.put("final", ops::reshape(t.final, {t.final.dim(1), t.final.dim(2), t.final.dim(3)}));
  std::ostringstream sel, pr;
  for (int i : t.selected.at(0)) sel << i << ' ';
  pr.precision(17);
  for (auto [x, y] : t.prompts.at(0)) pr << x << ' ' << y << ' ';
  ck.put_text("selected", sel.str());
  ck.put_text("prompts", pr.str());
  ck.save((fs::path(dir) / (id + ".ckpt")).string());
}

namespace {
// Prompt encoding channels: offsets and distance in units of 8 px plus
// Gaussian bumps of the distance at several pixel scales.
constexpr double kPromptScales[] = {1.0, 2.0, 4.0, 8.0, 16.0};
constexpr int64_t kPromptChannels = 3 + static_cast<int64_t>(std::size(kPromptScales));

Tensor prompt_encoding(const std::vector<std::vector<std::pair<double, double>>>& prompts, int64_t h, int64_t w,
                       double pixel_scale) {
  int64_t total = 0;
  for (const auto& p : prompts) total += static_cast<int64_t>(p.size());
  Tensor enc({total, kPromptChannels, h, w});
  double* out = enc.ptr();
  for (const auto& per : prompts)
    for (auto [px, py] : per) {
      const double cx = px * static_cast<double>(w) - 0.5, cy = py * static_cast<double>(h) - 0.5;
      for (int64_t y = 0; y < h; ++y)
        for (int64_t x = 0; x < w; ++x) {
          // distances in input-image pixels
          const double dx = (static_cast<double>(x) - cx) * pixel_scale;
          const double dy = (static_cast<double>(y) - cy) * pixel_scale;
          const double d2 = dx * dx + dy * dy;
          out[0 * h * w + y * w + x] = dx / 8.0;
          out[1 * h * w + y * w + x] = dy / 8.0;
          out[2 * h * w + y * w + x] = std::sqrt(d2) / 8.0;
          for (size_t s = 0; s < std::size(kPromptScales); ++s)
            out[(3 + s) * h * w + y * w + x] = std::exp(-d2 / (2 * kPromptScales[s] * kPromptScales[s]));
        }
      out += kPromptChannels * h * w;
    }
  return enc;
}
}  // namespace

DistillStudent::DistillStudent(const ModelConfig& config) : config_(config) {
  config_.validate();
  nn::Rng rng(config_.seed);
  encoder_ = std::make_unique<HierarchicalEncoder>(config_.encoder, rng);
  QueryEngineConfig qc;
  qc.dim = config_.dim;
  qc.heads = config_.heads;
  qc.encoder_queries = config_.encoder_queries;
  qc.deform = config_.deform;
  qc.sparse = config_.sparse_queries;
  qc.dense = config_.dense_queries;
  engine_ = std::make_unique<EncoderQueryEngine>(config_.encoder, qc, rng);
  q_encoder_ = {nn::normal_param({config_.encoder_queries, config_.dim}, 1.0, rng), QueryGroup::encoder};
  q_fpn_ = {nn::normal_param({config_.fpn_queries, config_.dim}, 1.0, rng), QueryGroup::fpn};
  FpnConfig fc;
  fc.channels = config_.dim;
  fc.attention.dim = config_.dim;
  fc.attention.heads = config_.heads;
  fc.query_interaction = config_.sparse_queries;
  fpn_ = std::make_unique<TinyFpn>(config_.encoder.stage_channels, fc, rng);
  const int64_t f = config_.dim;
  prompt_proj_ = std::make_unique<nn::Conv2d>(kPromptChannels, f, 1, rng);
  mix_ = std::make_unique<nn::Conv2d>(f, f, 3, rng);
  mix2_ = std::make_unique<nn::Conv2d>(f, f, 3, rng);
  granularity_ = std::make_unique<nn::Conv2d>(f, kGranularities, 1, rng);

  register_module("encoder", *encoder_);
  register_module("query_engine", *engine_);
  register_parameter("queries.encoder", q_encoder_.tokens);
  register_parameter("queries.fpn", q_fpn_.tokens);
  register_module("fpn", *fpn_);
  register_module("head.prompt", *prompt_proj_);
  register_module("head.mix", *mix_);
  register_module("head.mix2", *mix2_);
  register_module("head.granularity", *granularity_);
}

StudentOutputs DistillStudent::forward(const Tensor& images,
                                       const std::vector<std::vector<std::pair<double, double>>>& prompts,
                                       const std::vector<std::vector<int>>& selected) const {
  const int64_t batch = images.dim(0);
  if (static_cast<int64_t>(prompts.size()) != batch || static_cast<int64_t>(selected.size()) != batch)
    throw std::invalid_argument("DistillStudent: prompts/selected must have one entry per image");
  const int64_t n = static_cast<int64_t>(prompts[0].size());
  for (const auto& p : prompts)
    if (static_cast<int64_t>(p.size()) != n || n < 1)
      throw std::invalid_argument("DistillStudent: every image needs the same positive prompt count");

  EncoderQueryResult enc = run_encoder_queries(*encoder_, engine_.get(), images, q_encoder_);
  FpnResult fpn = fpn_->forward(enc.pyramid, enc.q_encoder, expand_tokens(q_fpn_.tokens, batch));
  const Tensor& feat = fpn.fused.levels[0];  // (B, F, h, w)
  const int64_t h = feat.dim(2), w = feat.dim(3);

  std::vector<Tensor> rep;
  for (int64_t b = 0; b < batch; ++b) {
    Tensor fb = ops::slice(feat, 0, b, 1);
    for (int64_t i = 0; i < n; ++i) rep.push_back(fb);
  }
  Tensor x = ops::concat(rep, 0);  // (B*N, F, h, w)
  Tensor enc_p = prompt_encoding(prompts, h, w, static_cast<double>(config_.encoder.stem_downsample));
  x = ops::gelu(ops::add(x, prompt_proj_->forward(enc_p)));
  x = ops::gelu(mix_->forward(x));
  x = ops::gelu(mix2_->forward(x));
  Tensor masks = granularity_->forward(x);  // (B*N, 6, h, w)
  Tensor mid = ops::reshape(masks, {batch, n * kGranularities, h, w});
  if (h != images.dim(2) || w != images.dim(3)) mid = ops::resize_bilinear(mid, images.dim(2), images.dim(3));

  std::vector<Tensor> finals;
  for (int64_t b = 0; b < batch; ++b) {
    Tensor mb = ops::slice(mid, 0, b, 1);
    std::vector<Tensor> picks;
    for (int idx : selected[b]) {
      if (idx < 0 || idx >= n * kGranularities) throw std::out_of_range("DistillStudent: selected index out of range");
      picks.push_back(ops::slice(mb, 1, idx, 1));
    }
    finals.push_back(ops::concat(picks, 1));
  }
  return StudentOutputs{mid, ops::concat(finals, 0)};
}

std::vector<size_t> batch_indices(size_t dataset_size, int batch, int64_t step, uint64_t seed) {
  if (dataset_size == 0) throw std::invalid_argument("empty dataset");
  std::vector<size_t> out;
  int64_t cached_epoch = -1;
  std::vector<size_t> perm(dataset_size);
  for (int j = 0; j < batch; ++j) {
    const int64_t pos = step * batch + j;
    const int64_t epoch = pos / static_cast<int64_t>(dataset_size);
    if (epoch != cached_epoch) {
      std::iota(perm.begin(), perm.end(), 0);
      std::mt19937_64 rng(mix_seed(seed, static_cast<uint64_t>(epoch), 0x5eed));
      std::shuffle(perm.begin(), perm.end(), rng);
      cached_epoch = epoch;
    }
    out.push_back(perm[static_cast<size_t>(pos % static_cast<int64_t>(dataset_size))]);
  }
  return out;
}

std::string format_log_entry(const DistillLogEntry& e) {
  char buf[512];
  std::snprintf(buf, sizeof buf,
                "{\"step\": %lld, \"lr\": %.17g, \"total\": %.17g, \"bce\": %.17g, \"dice\": %.17g, \"kl\": %.17g, "
                "\"cd\": %.17g}",
                static_cast<long long>(e.step), e.lr, e.total, e.bce, e.dice, e.kl, e.cd);
  return buf;
}

DistillLogEntry parse_log_entry(const std::string& line) {
  auto j = nlohmann::json::parse(line);
  DistillLogEntry e;
  e.step = j.at("step").get<int64_t>();
  e.lr = j.at("lr").get<double>();
  e.total = j.at("total").get<double>();
  e.bce = j.at("bce").get<double>();
  e.dice = j.at("dice").get<double>();
  e.kl = j.at("kl").get<double>();
  e.cd = j.at("cd").get<double>();
  return e;
}

namespace {

void dump_bad_batch(const std::string& dir, int64_t step, const Batch& batch, const TeacherOutputs& t,
                    const StudentOutputs& s, const DistillLoss& l) {
  Checkpoint ck;
  ck.put("images", batch.images);
  ck.put("masks", batch.masks);
  ck.put("teacher.mid", t.mid);
  ck.put("student.mid", s.mid.detach());
  ck.put("student.final", s.final.detach());
  std::ostringstream os;
  os << "step " << step << " bce " << l.bce << " dice " << l.dice << " kl " << l.kl << " cd " << l.cd << "\nids";
  for (const auto& id : batch.ids) os << ' ' << id;
  ck.put_text("diagnostic", os.str());
  ck.save((fs::path(dir) / ("nan_step" + std::to_string(step) + ".ckpt")).string());
}

}  // namespace

DistillResult distill_run(DistillStudent& student, const Teacher& teacher, const std::vector<Sample>& data,
                          const DistillConfig& config, const std::string& resume,
                          const std::function<void(const DistillLogEntry&)>& on_step) {
  config.loss.validate();
  if (config.steps < 1 || config.batch < 1 || config.prompts < 1)
    throw std::invalid_argument("distill: steps, batch and prompts must be positive");
  if (data.empty()) throw std::invalid_argument("distill: empty dataset");

  AdamW opt(student.named_parameters(), config.adamw);
  int64_t start = 0;
  if (!resume.empty()) {
    Checkpoint ck = Checkpoint::load(resume);
    load_parameters(ck, student);
    opt.load_state(ck);
    start = std::stoll(ck.text("step"));
  }
  std::ofstream log;
  if (!config.out_dir.empty()) {
    fs::create_directories(config.out_dir);
    log.open(fs::path(config.out_dir) / "distill_log.jsonl", start > 0 ? std::ios::app : std::ios::trunc);
  }
  auto save = [&](int64_t next_step, const std::string& name) {
    Checkpoint ck;
    store_parameters(ck, student);
    opt.save_state(ck);
    ck.put_text("step", std::to_string(next_step));
    ck.put_text("kind", "distill");
    const std::string path = (fs::path(config.out_dir) / name).string();
    ck.save(path);
    return path;
  };

  DistillResult result;
  for (int64_t step = start; step < config.steps; ++step) {
    const auto idx = batch_indices(data.size(), config.batch, step, config.seed);
    Batch batch = make_batch(data, idx);
    std::vector<TeacherOutputs> parts;
    for (size_t j = 0; j < idx.size(); ++j)
      parts.push_back(teacher(data[idx[j]], config.prompts, mix_seed(config.seed, static_cast<uint64_t>(step), j + 1)));
    TeacherOutputs t = stack_teachers(parts);

    StudentOutputs s = student.forward(batch.images, t.prompts, t.selected);
    DistillLoss l = distill_loss(s, t, config.loss);
    const double total = l.total.item();
    if (!std::isfinite(total)) {
      std::string where = "(no output directory)";
      if (!config.out_dir.empty()) {
        dump_bad_batch(config.out_dir, step, batch, t, s, l);
        where = (fs::path(config.out_dir) / ("nan_step" + std::to_string(step) + ".ckpt")).string();
      }
      throw std::runtime_error("non-finite distillation loss at step " + std::to_string(step) +
                               "; batch dumped to " + where);
    }
    opt.zero_grad();
    l.total.backward();
    if (config.clip_norm > 0) clip_grad_norm(student.parameters(), config.clip_norm);
    const double lr = multistep_lr(config.lr, step, config.steps, config.milestones, config.gamma);
    opt.step(lr);

    DistillLogEntry e{step, lr, total, l.bce, l.dice, l.kl, l.cd};
    result.log.push_back(e);
    if (log.is_open()) log << format_log_entry(e) << '\n' << std::flush;
    if (on_step) on_step(e);
    if (!config.out_dir.empty() && config.checkpoint_every > 0 && (step + 1) % config.checkpoint_every == 0 &&
        step + 1 < config.steps)
      save(step + 1, "distill_step" + std::to_string(step + 1) + ".ckpt");
  }
  if (!config.out_dir.empty()) result.checkpoint = save(config.steps, "distill.ckpt");
  return result;
}

}  // namespace irstd
