#pragma once

#include <cstdint>
#include <string>

namespace cloak {

/// Every knob of one adversarial training run. Defaults follow the
/// production schedule: Adam at 1e-3 divided by 10 every 30 epochs for 100
/// epochs, horizontal-flip augmentation on.
struct TrainingConfig {
  int epochs = 100;
  double base_lr = 0.001;
  double lr_decay_factor = 10.0;
  int lr_decay_every = 30;
  /// Adversarial trade-off weight on the reconstruction term of the
  /// obfuscator objective (L_c - lambda * L_r).
  double lambda = 1.0;
  int batch_size = 64;
  std::uint64_t seed = 1;
  bool augment_hflip = true;
  std::string optimizer = "adam";
  double adam_beta1 = 0.9;
  double adam_beta2 = 0.999;
  double adam_eps = 1e-8;

  std::string to_json() const;
  static TrainingConfig from_json(const std::string& text);
};

}  // namespace cloak
