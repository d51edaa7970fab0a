#pragma once

#include <cstdint>
#include <memory>
#include <string>

#include "cloak/sequential.hpp"
#include "cloak/spec.hpp"

namespace cloak {

/// Supported classifier architectures. The four large networks mirror the
/// standard 32x32 variants; small_cnn is the lightweight stand-in used for
/// minutes-scale experiments.
enum class ClassifierArch { vgg19, resnet18, resnet50, googlenet, small_cnn };

std::string to_string(ClassifierArch a);
ClassifierArch classifier_arch_from_string(const std::string& s);

/// A built network plus the metadata needed to use it safely: its spec (when
/// built from one), an architecture id, and the trainable flag. When
/// trainable is false no operation in the library mutates the parameters;
/// gradients still flow through the network to upstream layers.
struct NetworkHandle {
  NetworkSpec spec;
  std::string arch;  // "obfuscator", "deobfuscator" or a classifier name
  int num_classes = 0;
  std::shared_ptr<Sequential<float>> net;
  bool trainable = true;

  Sequential<float>& sequential() { return *net; }
  const Sequential<float>& sequential() const { return *net; }
};

/// Builds the image-to-image obfuscator from a declarative spec. The
/// returned network maps inputs to same-shaped outputs in (0, 1); an empty
/// layer list yields an exact identity. Seedable for reproducible weights.
NetworkHandle build_obfuscator(const NetworkSpec& spec, std::uint64_t seed = 1);

/// The reconstruction adversary. Uses the same layer vocabulary and, by
/// default, the same description as the obfuscator.
NetworkHandle build_deobfuscator(const NetworkSpec& spec, std::uint64_t seed = 2);

/// Builds a classifier producing a logit vector of length num_classes for
/// (3, 32, 32) inputs. Throws UnknownArchError for unsupported names.
NetworkHandle build_classifier(ClassifierArch arch, int num_classes,
                               std::uint64_t seed = 3);
NetworkHandle build_classifier(const std::string& arch_name, int num_classes,
                               std::uint64_t seed = 3);

/// Forward pass on the training path (records what backward needs).
/// Batch shape must match the network's expected input shape.
Tensor forward(NetworkHandle& net, const Tensor& batch);

/// Read-only forward pass; safe for concurrent use and mode-independent
/// (normalization always uses running statistics).
Tensor infer(const NetworkHandle& net, const Tensor& batch);

/// Marks the network immutable and switches it to inference behaviour.
/// Idempotent. Returns the same handle for chaining.
NetworkHandle& freeze(NetworkHandle& net);

/// FNV-1a checksum over every parameter and buffer byte, in declaration
/// order. Any single bit flip changes the value.
std::uint64_t state_checksum(const NetworkHandle& net);

std::int64_t handle_param_count(const NetworkHandle& net);

}  // namespace cloak
