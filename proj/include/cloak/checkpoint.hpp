#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "cloak/nets.hpp"
#include "cloak/tensor.hpp"

namespace cloak {

/// Single-file binary container with a named-array table of contents.
///
/// Layout: magic "CKPT", u32 version, u32 entry count, the TOC (name,
/// dtype, dims, offset, length), then one contiguous data region. All
/// header integers are little-endian. Writing is atomic (temp + rename) so
/// an aborted save never clobbers the previous checkpoint.
class CheckpointWriter {
 public:
  void put_f32(const std::string& name, const Tensor& t);
  void put_f32(const std::string& name, const std::vector<float>& v);
  void put_f64(const std::string& name, const std::vector<double>& v);
  void put_bytes(const std::string& name, const std::string& bytes);
  void put_i64(const std::string& name, std::int64_t v);
  void put_u64(const std::string& name, std::uint64_t v);

  void write(const std::string& path) const;

 private:
  struct Entry {
    std::string name;
    std::uint8_t dtype;
    std::array<std::uint32_t, 4> dims;
    std::uint8_t ndim;
    std::vector<std::uint8_t> data;
  };
  std::vector<Entry> entries_;

  Entry& add(const std::string& name, std::uint8_t dtype);
};

class Checkpoint {
 public:
  static Checkpoint load(const std::string& path);

  bool has(const std::string& name) const { return entries_.count(name) != 0; }
  std::vector<std::string> names() const;

  Tensor f32(const std::string& name) const;
  std::vector<float> f32_vec(const std::string& name) const;
  std::vector<double> f64_vec(const std::string& name) const;
  std::string bytes(const std::string& name) const;
  std::int64_t i64(const std::string& name) const;
  std::uint64_t u64(const std::string& name) const;

 private:
  struct Entry {
    std::uint8_t dtype;
    std::uint8_t ndim;
    std::array<std::uint32_t, 4> dims;
    std::vector<std::uint8_t> data;
  };
  const Entry& get(const std::string& name, std::uint8_t dtype) const;
  std::map<std::string, Entry> entries_;
};

/// Serializes every parameter and buffer of the network under
/// "<prefix><array name>".
void save_network_state(CheckpointWriter& w, const std::string& prefix, NetworkHandle& net);

/// Restores arrays saved by save_network_state. Shapes must match the
/// already-built network exactly.
void load_network_state(const Checkpoint& c, const std::string& prefix, NetworkHandle& net);

/// Classifier checkpoint: architecture id, class count, weights, recorded
/// plain accuracy and the normalization constants the model expects.
void save_classifier(const std::string& path, NetworkHandle& clf, double plain_accuracy);
struct LoadedClassifier {
  NetworkHandle clf;  // frozen
  double plain_accuracy = 0.0;
};
LoadedClassifier load_classifier(const std::string& path);

}  // namespace cloak
