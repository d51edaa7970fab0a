#pragma once

#include <span>
#include <string>
#include <vector>

#include "cloak/checkpoint.hpp"
#include "cloak/data.hpp"
#include "cloak/losses.hpp"
#include "cloak/nets.hpp"
#include "cloak/optim.hpp"
#include "cloak/rng.hpp"
#include "cloak/trainer_config.hpp"

namespace cloak {

/// Step-decay schedule: base_lr / decay_factor^floor(epoch / decay_every).
double lr_schedule(int epoch, const TrainingConfig& cfg);

/// Mirrors every image left-right.
Tensor flip_horizontal(const Tensor& batch);

/// Each image independently flipped left-right with probability 1/2 when
/// the config enables augmentation; labels are untouched by construction.
Tensor augment(const Tensor& batch, const TrainingConfig& cfg, Rng& rng);

/// One simultaneous update of both players against the frozen classifier.
/// Throws FrozenContractError when the classifier is still trainable.
LossRecord train_step(NetworkHandle& obf, NetworkHandle& deobf, NetworkHandle& clf,
                      const Tensor& images, std::span<const int> labels,
                      const TrainingConfig& cfg, Adam<float>& opt_obf,
                      Adam<float>& opt_deobf, double lr, std::int64_t step, int epoch);

struct TrainResult {
  NetworkHandle obf;
  NetworkHandle deobf;
  std::vector<LossRecord> history;
  std::string checkpoint_path;  // empty when no out_dir was given
};

/// Full adversarial loop: builds both networks from their specs, then runs
/// epochs x batches of train_step under the learning-rate schedule with
/// augmentation. Emits one LossRecord per step (and an NDJSON log when
/// out_dir is set) plus a checkpoint per epoch with overwrite-last
/// semantics; an aborted run leaves the previous checkpoint intact.
TrainResult train(const NetworkSpec& obf_spec, const NetworkSpec& deobf_spec,
                  NetworkHandle& clf, const DatasetSplit& data, const TrainingConfig& cfg,
                  const std::string& out_dir = "");

struct PretrainResult {
  NetworkHandle clf;  // frozen
  double plain_accuracy = 0.0;
  std::vector<double> epoch_loss;
};

/// Plain crossentropy training of a classifier on unmodified images,
/// followed by freezing. plain_accuracy is top-1 on the training split.
PretrainResult pretrain_classifier(ClassifierArch arch, const DatasetSplit& data,
                                   const TrainingConfig& cfg);

/// Training checkpoint contents (see save side for the invariants).
struct TrainingCheckpoint {
  NetworkHandle obf;
  NetworkHandle deobf;
  std::string clf_id;
  std::uint64_t clf_checksum = 0;
  TrainingConfig config;
  int epoch = 0;
  std::vector<LossRecord> history;
};

void save_training_checkpoint(const std::string& path, NetworkHandle& obf,
                              NetworkHandle& deobf, const NetworkHandle& clf,
                              const TrainingConfig& cfg, int epoch,
                              const std::vector<LossRecord>& history);

TrainingCheckpoint load_training_checkpoint(const std::string& path);

}  // namespace cloak
