#pragma once

#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "cloak/tensor.hpp"
#include "cloak/trainer_config.hpp"

namespace cloak {

/// Pixel normalization: raw bytes 0..255 map linearly onto [0, 1]. The
/// constants are recorded in every checkpoint.
constexpr float kNormScale = 1.0f / 255.0f;
constexpr float kNormOffset = 0.0f;

/// One split of a dataset, images already normalized to [0, 1].
struct DatasetSplit {
  Tensor images;  // (n, 3, 32, 32)
  std::vector<int> labels;
  std::string split_name;  // "train" or "test"
  int class_count = 10;

  int size() const { return images.n(); }
};

struct Cifar10 {
  DatasetSplit train;
  DatasetSplit test;
};

/// Reads the standard published binary layout (five 10000-record training
/// batch files plus one test batch, 3073 bytes per record). Throws
/// DataError with checksum/size details on missing or corrupt files.
Cifar10 load_cifar10(const std::string& root_dir);

/// Byte image batch -> normalized float batch.
Tensor normalize(const TensorT<std::uint8_t>& bytes);

/// Exact inverse of normalize up to rounding; values clamped to [0, 255].
TensorT<std::uint8_t> denormalize(const Tensor& images);

/// Seed-reproducible subset with exactly size/class_count samples per class.
/// size must be divisible by the class count.
DatasetSplit stratified_subset(const DatasetSplit& split, int size, std::uint64_t seed);

/// Per-file validation result for `data verify`.
struct FileCheck {
  std::string name;
  bool present = false;
  std::uint64_t size = 0;
  std::string crc32;        // lowercase hex of the file's CRC-32
  std::string error;        // empty when the file passes
};

/// Structural and checksum validation of a dataset directory. When
/// `expected_crc` entries exist for a file name, mismatches are errors.
std::vector<FileCheck> verify_cifar10(const std::string& root_dir,
                                      const std::map<std::string, std::string>& expected_crc = {});

/// Reads "<root>/checksums.json" ({file name: crc32 hex}) if present.
std::map<std::string, std::string> read_checksum_file(const std::string& root_dir);

// --- synthetic corpus -----------------------------------------------------

/// Parameters of the synthetic image distribution: each class is a smooth
/// random colour field; each sample adds a spatial shift, a colour tint,
/// one random solid patch (the sample-private detail) and pixel noise.
struct SyntheticConfig {
  int classes = 10;
  std::uint64_t seed = 1234;
  double noise_sigma = 10.0;   // byte units
  double tint_range = 25.0;    // byte units
  int max_shift = 4;
};

/// Writes a corpus in the exact binary layout load_cifar10 reads (five
/// training batches of 10000 records plus one test batch), together with a
/// checksums.json sidecar.
void write_synthetic_cifar10(const std::string& root_dir, const SyntheticConfig& cfg = {});

/// In-memory synthetic split for tests; `split_tag` decouples train and
/// test streams.
DatasetSplit synthetic_split(int n, int classes, std::uint64_t seed, int split_tag = 0,
                             const std::string& split_name = "train",
                             const SyntheticConfig& cfg = {});

/// Experiment description consumed by the train CLI.
struct ExperimentConfig {
  std::string dataset = "cifar10";
  int subset_size = 0;  // 0 = full training split
  std::uint64_t data_seed = 7;
  TrainingConfig training;
  std::vector<std::string> classifier_archs{"small_cnn"};
  std::string obfuscator_spec_json;    // empty = default spec
  std::string deobfuscator_spec_json;  // empty = same as obfuscator

  std::string to_json() const;
  static ExperimentConfig from_json(const std::string& text);
};

}  // namespace cloak
