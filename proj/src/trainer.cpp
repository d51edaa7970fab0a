#include "cloak/trainer.hpp"

#include <cmath>
#include <filesystem>
#include <json.hpp>
#include <numeric>

#include "cloak/adversarial.hpp"
#include "cloak/errors.hpp"

namespace cloak {

std::string TrainingConfig::to_json() const {
  nlohmann::json j;
  j["epochs"] = epochs;
  j["base_lr"] = base_lr;
  j["lr_decay_factor"] = lr_decay_factor;
  j["lr_decay_every"] = lr_decay_every;
  j["lambda"] = lambda;
  j["batch_size"] = batch_size;
  j["seed"] = seed;
  j["augment_hflip"] = augment_hflip;
  j["optimizer"] = optimizer;
  j["adam_beta1"] = adam_beta1;
  j["adam_beta2"] = adam_beta2;
  j["adam_eps"] = adam_eps;
  return j.dump(2);
}

TrainingConfig TrainingConfig::from_json(const std::string& text) {
  nlohmann::json j = nlohmann::json::parse(text);
  TrainingConfig c;
  c.epochs = j.value("epochs", 100);
  c.base_lr = j.value("base_lr", 0.001);
  c.lr_decay_factor = j.value("lr_decay_factor", 10.0);
  c.lr_decay_every = j.value("lr_decay_every", 30);
  c.lambda = j.value("lambda", 1.0);
  c.batch_size = j.value("batch_size", 64);
  c.seed = j.value("seed", static_cast<std::uint64_t>(1));
  c.augment_hflip = j.value("augment_hflip", true);
  c.optimizer = j.value("optimizer", std::string("adam"));
  if (c.optimizer != "adam") throw Error("unsupported optimizer: " + c.optimizer);
  c.adam_beta1 = j.value("adam_beta1", 0.9);
  c.adam_beta2 = j.value("adam_beta2", 0.999);
  c.adam_eps = j.value("adam_eps", 1e-8);
  return c;
}

double lr_schedule(int epoch, const TrainingConfig& cfg) {
  if (epoch < 0) throw Error("lr_schedule: negative epoch");
  const int k = epoch / cfg.lr_decay_every;
  return cfg.base_lr / std::pow(cfg.lr_decay_factor, static_cast<double>(k));
}

Tensor flip_horizontal(const Tensor& batch) {
  Tensor out = batch;
  const int W = batch.w();
  for (int n = 0; n < batch.n(); ++n)
    for (int c = 0; c < batch.c(); ++c)
      for (int y = 0; y < batch.h(); ++y)
        for (int x = 0; x < W; ++x)
          out.at(n, c, y, x) = batch.at(n, c, y, W - 1 - x);
  return out;
}

Tensor augment(const Tensor& batch, const TrainingConfig& cfg, Rng& rng) {
  if (!cfg.augment_hflip) return batch;
  Tensor out = batch;
  const int W = batch.w();
  for (int n = 0; n < batch.n(); ++n) {
    if (!rng.bernoulli(0.5)) continue;
    for (int c = 0; c < batch.c(); ++c)
      for (int y = 0; y < batch.h(); ++y)
        for (int x = 0; x < W; ++x)
          out.at(n, c, y, x) = batch.at(n, c, y, W - 1 - x);
  }
  return out;
}

LossRecord train_step(NetworkHandle& obf, NetworkHandle& deobf, NetworkHandle& clf,
                      const Tensor& images, std::span<const int> labels,
                      const TrainingConfig& cfg, Adam<float>& opt_obf,
                      Adam<float>& opt_deobf, double lr, std::int64_t step, int epoch) {
  if (clf.trainable)
    throw FrozenContractError("train_step: classifier must be frozen");
  opt_obf.zero_grad();
  opt_deobf.zero_grad();
  AdversarialLosses losses = adversarial_grads(obf.sequential(), deobf.sequential(),
                                               clf.sequential(), images, labels, cfg.lambda);
  opt_obf.step(lr);
  opt_deobf.step(lr);

  LossRecord rec;
  rec.step = step;
  rec.epoch = epoch;
  rec.L_c = losses.L_c;
  rec.L_r = losses.L_r;
  auto [obf_obj, deobf_obj] = compose_objectives(losses.L_c, losses.L_r, cfg.lambda);
  rec.obf_objective = obf_obj;
  rec.deobf_objective = deobf_obj;
  rec.lr = lr;
  return rec;
}

namespace {

Tensor gather_images(const DatasetSplit& data, const std::vector<int>& idx, int begin,
                     int end) {
  Tensor out(end - begin, data.images.c(), data.images.h(), data.images.w());
  const std::int64_t img = data.images.image_size();
  for (int i = begin; i < end; ++i)
    std::copy(data.images.data() + idx[i] * img, data.images.data() + (idx[i] + 1) * img,
              out.data() + static_cast<std::int64_t>(i - begin) * img);
  return out;
}

std::vector<int> gather_labels(const DatasetSplit& data, const std::vector<int>& idx,
                               int begin, int end) {
  std::vector<int> out(end - begin);
  for (int i = begin; i < end; ++i) out[i - begin] = data.labels[idx[i]];
  return out;
}

}  // namespace

TrainResult train(const NetworkSpec& obf_spec, const NetworkSpec& deobf_spec,
                  NetworkHandle& clf, const DatasetSplit& data, const TrainingConfig& cfg,
                  const std::string& out_dir) {
  if (clf.trainable) throw FrozenContractError("train: classifier must be frozen");

  TrainResult result;
  result.obf = build_obfuscator(obf_spec, Rng::derive(cfg.seed, 1));
  result.deobf = build_deobfuscator(deobf_spec, Rng::derive(cfg.seed, 2));
  Adam<float> opt_obf(result.obf.sequential().params(), cfg.adam_beta1, cfg.adam_beta2,
                      cfg.adam_eps);
  Adam<float> opt_deobf(result.deobf.sequential().params(), cfg.adam_beta1, cfg.adam_beta2,
                        cfg.adam_eps);

  LossLog log;
  if (!out_dir.empty()) {
    std::filesystem::create_directories(out_dir);
    log = LossLog(out_dir + "/loss_log.ndjson");
    result.checkpoint_path = out_dir + "/checkpoint.bin";
  }

  const int n = data.size();
  std::vector<int> idx(n);
  std::iota(idx.begin(), idx.end(), 0);
  std::int64_t step = 0;

  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    const double lr = lr_schedule(epoch, cfg);
    Rng shuffle_rng(Rng::derive(cfg.seed, 0xE70C0ull + static_cast<std::uint64_t>(epoch)));
    shuffle_rng.shuffle(idx);
    Rng aug_rng(Rng::derive(cfg.seed, 0xA06411ull + static_cast<std::uint64_t>(epoch)));

    for (int begin = 0; begin < n; begin += cfg.batch_size) {
      const int end = std::min(n, begin + cfg.batch_size);
      Tensor images = gather_images(data, idx, begin, end);
      std::vector<int> labels = gather_labels(data, idx, begin, end);
      images = augment(images, cfg, aug_rng);
      LossRecord rec = train_step(result.obf, result.deobf, clf, images, labels, cfg,
                                  opt_obf, opt_deobf, lr, step++, epoch);
      if (log.is_open()) log.append(rec);
      result.history.push_back(rec);
    }

    if (!result.checkpoint_path.empty())
      save_training_checkpoint(result.checkpoint_path, result.obf, result.deobf, clf, cfg,
                               epoch, result.history);
  }
  return result;
}

PretrainResult pretrain_classifier(ClassifierArch arch, const DatasetSplit& data,
                                   const TrainingConfig& cfg) {
  PretrainResult result;
  result.clf = build_classifier(arch, data.class_count, Rng::derive(cfg.seed, 3));
  Adam<float> opt(result.clf.sequential().params(), cfg.adam_beta1, cfg.adam_beta2,
                  cfg.adam_eps);

  const int n = data.size();
  std::vector<int> idx(n);
  std::iota(idx.begin(), idx.end(), 0);

  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    const double lr = lr_schedule(epoch, cfg);
    Rng shuffle_rng(Rng::derive(cfg.seed, 0x9E70C0ull + static_cast<std::uint64_t>(epoch)));
    shuffle_rng.shuffle(idx);
    Rng aug_rng(Rng::derive(cfg.seed, 0x9A0641ull + static_cast<std::uint64_t>(epoch)));
    double epoch_loss = 0;
    int batches = 0;

    for (int begin = 0; begin < n; begin += cfg.batch_size) {
      const int end = std::min(n, begin + cfg.batch_size);
      Tensor images = gather_images(data, idx, begin, end);
      std::vector<int> labels = gather_labels(data, idx, begin, end);
      images = augment(images, cfg, aug_rng);

      opt.zero_grad();
      Tensor logits = result.clf.sequential().forward(images);
      auto [loss, dlogits] = classification_loss_with_grad(
          logits, std::span<const int>(labels.data(), labels.size()));
      result.clf.sequential().backward(dlogits, true);
      opt.step(lr);
      epoch_loss += loss;
      ++batches;
    }
    result.epoch_loss.push_back(epoch_loss / std::max(1, batches));
  }

  freeze(result.clf);

  // top-1 accuracy on the training split, recorded with the handle
  int correct = 0;
  const int eval_batch = 256;
  for (int begin = 0; begin < n; begin += eval_batch) {
    const int end = std::min(n, begin + eval_batch);
    Tensor images = data.images.slice_batch(begin, end);
    Tensor logits = result.clf.sequential().infer(images);
    const int K = static_cast<int>(logits.image_size());
    for (int i = 0; i < end - begin; ++i) {
      const float* row = logits.data() + static_cast<std::int64_t>(i) * K;
      int best = 0;
      for (int k = 1; k < K; ++k)
        if (row[k] > row[best]) best = k;
      if (best == data.labels[begin + i]) ++correct;
    }
  }
  result.plain_accuracy = static_cast<double>(correct) / n;
  return result;
}

void save_training_checkpoint(const std::string& path, NetworkHandle& obf,
                              NetworkHandle& deobf, const NetworkHandle& clf,
                              const TrainingConfig& cfg, int epoch,
                              const std::vector<LossRecord>& history) {
  CheckpointWriter w;
  w.put_bytes("kind", "training");
  w.put_bytes("config", cfg.to_json());
  w.put_i64("epoch", epoch);
  w.put_bytes("clf.id", clf.arch);
  w.put_u64("clf.checksum", state_checksum(clf));
  w.put_bytes("obf.spec", to_json(obf.spec));
  w.put_bytes("deobf.spec", to_json(deobf.spec));
  w.put_f32("norm.scale", std::vector<float>{kNormScale});
  w.put_f32("norm.offset", std::vector<float>{kNormOffset});
  save_network_state(w, "obf.", obf);
  save_network_state(w, "deobf.", deobf);

  std::vector<double> lc, lrv, oobj, dobj, lrs, epochs;
  lc.reserve(history.size());
  for (const auto& r : history) {
    lc.push_back(r.L_c);
    lrv.push_back(r.L_r);
    oobj.push_back(r.obf_objective);
    dobj.push_back(r.deobf_objective);
    lrs.push_back(r.lr);
    epochs.push_back(r.epoch);
  }
  w.put_f64("history.L_c", lc);
  w.put_f64("history.L_r", lrv);
  w.put_f64("history.obf_objective", oobj);
  w.put_f64("history.deobf_objective", dobj);
  w.put_f64("history.lr", lrs);
  w.put_f64("history.epoch", epochs);
  w.write(path);
}

TrainingCheckpoint load_training_checkpoint(const std::string& path) {
  Checkpoint c = Checkpoint::load(path);
  if (c.bytes("kind") != "training") throw Error("not a training checkpoint: " + path);
  TrainingCheckpoint out;
  out.config = TrainingConfig::from_json(c.bytes("config"));
  out.epoch = static_cast<int>(c.i64("epoch"));
  out.clf_id = c.bytes("clf.id");
  out.clf_checksum = c.u64("clf.checksum");
  NetworkSpec obf_spec = spec_from_json(c.bytes("obf.spec"));
  NetworkSpec deobf_spec = spec_from_json(c.bytes("deobf.spec"));
  out.obf = build_obfuscator(obf_spec);
  out.deobf = build_deobfuscator(deobf_spec);
  load_network_state(c, "obf.", out.obf);
  load_network_state(c, "deobf.", out.deobf);

  const auto lc = c.f64_vec("history.L_c");
  const auto lrv = c.f64_vec("history.L_r");
  const auto oobj = c.f64_vec("history.obf_objective");
  const auto dobj = c.f64_vec("history.deobf_objective");
  const auto lrs = c.f64_vec("history.lr");
  const auto epochs = c.f64_vec("history.epoch");
  for (std::size_t i = 0; i < lc.size(); ++i) {
    LossRecord r;
    r.step = static_cast<std::int64_t>(i);
    r.epoch = static_cast<int>(epochs[i]);
    r.L_c = lc[i];
    r.L_r = lrv[i];
    r.obf_objective = oobj[i];
    r.deobf_objective = dobj[i];
    r.lr = lrs[i];
    out.history.push_back(r);
  }
  return out;
}

}  // namespace cloak
