#include "irstd/train.hpp"

#include <array>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <random>
#include <stdexcept>

#include "irstd/checkpoint.hpp"
#include "json.hpp"

namespace fs = std::filesystem;

namespace irstd {

namespace {

uint64_t mix_seed(uint64_t a, uint64_t b, uint64_t c) {
  std::seed_seq seq{static_cast<uint32_t>(a), static_cast<uint32_t>(a >> 32), static_cast<uint32_t>(b),
                    static_cast<uint32_t>(b >> 32), static_cast<uint32_t>(c), static_cast<uint32_t>(c >> 32)};
  std::array<uint32_t, 2> w{};
  seq.generate(w.begin(), w.end());
  return (static_cast<uint64_t>(w[0]) << 32) | w[1];
}

std::vector<size_t> train_indices(size_t n, int batch, int64_t step, uint64_t seed) {
  std::vector<size_t> out, perm(n);
  int64_t cached = -1;
  for (int j = 0; j < batch; ++j) {
    const int64_t pos = step * batch + j;
    const int64_t epoch = pos / static_cast<int64_t>(n);
    if (epoch != cached) {
      std::iota(perm.begin(), perm.end(), 0);
      std::mt19937_64 rng(mix_seed(seed, static_cast<uint64_t>(epoch), 0x7a11));
      std::shuffle(perm.begin(), perm.end(), rng);
      cached = epoch;
    }
    out.push_back(perm[static_cast<size_t>(pos % static_cast<int64_t>(n))]);
  }
  return out;
}

}  // namespace

int load_distilled(IrstdModel& model, const std::string& checkpoint) {
  Checkpoint ck = Checkpoint::load(checkpoint);
  return load_parameters(ck, model, {"encoder.", "query_engine.", "queries.encoder"});
}

std::vector<Tensor> predict_logits(const IrstdModel& model, const std::vector<Sample>& data, int batch) {
  NoGradGuard guard;
  std::vector<Tensor> out;
  size_t i = 0;
  while (i < data.size()) {
    // consecutive samples of one size share a batch
    std::vector<size_t> idx{i++};
    while (i < data.size() && idx.size() < static_cast<size_t>(batch) &&
           data[i].image.shape() == data[idx[0]].image.shape())
      idx.push_back(i++);
    Batch b = make_batch(data, idx);
    ModelOutputs o = model.forward(b.images);
    for (size_t j = 0; j < idx.size(); ++j) out.push_back(ops::slice(o.final.logits, 0, static_cast<int64_t>(j), 1));
  }
  return out;
}

std::vector<Tensor> predict_masks(const IrstdModel& model, const std::vector<Sample>& data, int batch) {
  std::vector<Tensor> out;
  for (const Tensor& l : predict_logits(model, data, batch)) {
    Tensor m = binarize(l, 0.0);
    out.push_back(ops::reshape(m, {l.dim(2), l.dim(3)}));
  }
  return out;
}

DetectionReport evaluate_model(const IrstdModel& model, const std::vector<Sample>& data, const MatchConfig& match,
                               int batch) {
  std::vector<Tensor> gts;
  std::vector<std::string> ids;
  for (const auto& s : data) {
    gts.push_back(s.mask);
    ids.push_back(s.id);
  }
  return evaluate(predict_masks(model, data, batch), gts, match, ids);
}

std::string format_log_entry(const TrainLogEntry& e) {
  char buf[512];
  int n = std::snprintf(buf, sizeof buf,
                        "{\"step\": %lld, \"lr\": %.17g, \"total\": %.17g, \"final\": %.17g, \"early_encoder\": "
                        "%.17g, \"early_fpn\": %.17g",
                        static_cast<long long>(e.step), e.lr, e.total, e.final_loss, e.early_encoder, e.early_fpn);
  if (e.eval_iou >= 0) n += std::snprintf(buf + n, sizeof buf - n, ", \"eval_iou\": %.17g", e.eval_iou);
  std::snprintf(buf + n, sizeof buf - n, "}");
  return buf;
}

TrainLogEntry parse_train_log_entry(const std::string& line) {
  auto j = nlohmann::json::parse(line);
  TrainLogEntry e;
  e.step = j.at("step").get<int64_t>();
  e.lr = j.at("lr").get<double>();
  e.total = j.at("total").get<double>();
  e.final_loss = j.at("final").get<double>();
  e.early_encoder = j.at("early_encoder").get<double>();
  e.early_fpn = j.at("early_fpn").get<double>();
  if (j.contains("eval_iou")) e.eval_iou = j["eval_iou"].get<double>();
  return e;
}

TrainResult train_run(IrstdModel& model, const std::vector<Sample>& data, const TrainConfig& config,
                      const std::string& resume, const std::function<void(const TrainLogEntry&)>& on_step) {
  config.loss.validate();
  if (config.steps < 1 || config.batch < 1) throw std::invalid_argument("train: steps and batch must be positive");
  if (data.empty()) throw std::invalid_argument("train: empty dataset");

  AdamW opt(model.named_parameters(), config.adamw);
  int64_t start = 0;
  if (!resume.empty()) {
    Checkpoint ck = Checkpoint::load(resume);
    load_parameters(ck, model);
    opt.load_state(ck);
    start = std::stoll(ck.text("step"));
  }
  std::ofstream log;
  if (!config.out_dir.empty()) {
    fs::create_directories(config.out_dir);
    log.open(fs::path(config.out_dir) / "train_log.jsonl", start > 0 ? std::ios::app : std::ios::trunc);
  }
  auto save = [&](int64_t next_step, const std::string& name) {
    Checkpoint ck;
    store_parameters(ck, model);
    opt.save_state(ck);
    ck.put_text("step", std::to_string(next_step));
    ck.put_text("kind", "train");
    const std::string path = (fs::path(config.out_dir) / name).string();
    ck.save(path);
    return path;
  };

  TrainResult result;
  for (int64_t step = start; step < config.steps; ++step) {
    const auto idx = train_indices(data.size(), config.batch, step, config.seed);
    std::vector<Sample> picked;
    for (size_t j = 0; j < idx.size(); ++j) {
      std::mt19937_64 arng(mix_seed(config.seed, static_cast<uint64_t>(step), 2 * j + 1));
      AugmentConfig ac = config.augment;
      const Tensor& im = data[idx[j]].image;
      if (ac.enabled && ac.crop == 0) {
        // Crop back to the input size so a batch keeps one shape.
        if (im.dim(1) != im.dim(2)) throw std::invalid_argument("train: non-square inputs need an explicit crop size");
        ac.crop = im.dim(1);
      }
      picked.push_back(augment(data[idx[j]], ac, arng));
    }
    std::vector<size_t> all(picked.size());
    std::iota(all.begin(), all.end(), 0);
    Batch batch = make_batch(picked, all);

    ModelOutputs out = model.forward(batch.images);
    std::mt19937_64 prng(mix_seed(config.seed, static_cast<uint64_t>(step), 0));
    auto head_loss = [&](const Tensor& logits) {
      if (config.point_sampled) return mask_loss(logits, batch.masks, config.loss, prng);
      Tensor t = batch.masks;
      if (logits.dim(2) != t.dim(2) || logits.dim(3) != t.dim(3))
        t = ops::resize_bilinear(t, logits.dim(2), logits.dim(3));
      return dense_mask_loss(logits, t, config.loss);
    };
    MaskLoss lf = head_loss(out.final.logits);
    MaskLoss le = head_loss(out.early_encoder.logits);
    MaskLoss lp = head_loss(out.early_fpn.logits);
    Tensor total = ops::add(lf.total, ops::scale(ops::add(le.total, lp.total), config.early_weight));
    const double value = total.item();
    if (!std::isfinite(value)) throw std::runtime_error("non-finite training loss at step " + std::to_string(step));

    opt.zero_grad();
    total.backward();
    if (config.clip_norm > 0) clip_grad_norm(model.parameters(), config.clip_norm);
    const double lr = cosine_lr(config.lr, config.min_lr, step, config.steps, config.warmup);
    opt.step(lr);

    TrainLogEntry e{step, lr, value, lf.total.item(), le.total.item(), lp.total.item(), -1};
    if (config.eval_every > 0 && ((step + 1) % config.eval_every == 0 || step + 1 == config.steps))
      e.eval_iou = evaluate_model(model, data, {}, config.batch).iou;
    result.log.push_back(e);
    if (log.is_open()) log << format_log_entry(e) << '\n' << std::flush;
    if (on_step) on_step(e);
    if (!config.out_dir.empty() && config.checkpoint_every > 0 && (step + 1) % config.checkpoint_every == 0 &&
        step + 1 < config.steps)
      save(step + 1, "train_step" + std::to_string(step + 1) + ".ckpt");
  }
  if (!config.out_dir.empty()) result.checkpoint = save(config.steps, "model.ckpt");
  return result;
}

}  // namespace irstd
