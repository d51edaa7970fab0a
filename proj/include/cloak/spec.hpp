#pragma once

#include <array>
#include <string>
#include <vector>

#include "cloak/tensor.hpp"

namespace cloak {

enum class LayerKind { conv2d, bottleneck, upsample_bottleneck };

/// One row of a declarative network description.
///
/// conv2d is a plain 3x3 convolution (pad 1). bottleneck is the separable
/// block: 1x1 pointwise expansion by `expansion`, 3x3 depthwise carrying the
/// stride, 1x1 pointwise projection to out_channels. upsample_bottleneck is
/// the same block preceded by 2x nearest-neighbour upsampling (stride 1).
struct LayerSpec {
  LayerKind kind = LayerKind::conv2d;
  int out_channels = 0;
  int stride = 1;
  int expansion = 6;
};

enum class Activation { leaky_relu };
enum class Normalization { batch_norm };

/// Declarative description of a sequential convolutional network.
struct NetworkSpec {
  std::array<int, 3> input_shape{3, 32, 32};  // (channels, height, width)
  std::vector<LayerSpec> layers;
  Activation activation = Activation::leaky_relu;
  Normalization normalization = Normalization::batch_norm;
  double leaky_slope = 0.01;
  /// When false (default), convolutions followed by batch norm carry no bias.
  bool conv_bias = false;
};

/// Validates the spec and returns per-layer output shapes (one entry per
/// layer). Throws ShapeError naming the first offending layer index.
std::vector<Shape3> propagate_shapes(const NetworkSpec& spec);

/// Final output shape of the spec (== input shape for an empty layer list).
Shape3 output_shape(const NetworkSpec& spec);

/// The production obfuscator/deobfuscator description: a 3x3 stem, three
/// stride-2 bottlenecks narrowing to 4x4, and three upsample bottlenecks
/// restoring the input resolution.
NetworkSpec default_obfuscator_spec();

/// A reduced-width variant of the default description, small enough for
/// minutes-scale experiments on a CPU. Same shape contract.
NetworkSpec tiny_obfuscator_spec();

/// Spec with no layers: the built network is an exact identity map.
NetworkSpec identity_spec(std::array<int, 3> input_shape = {3, 32, 32});

std::string to_json(const NetworkSpec& spec);
NetworkSpec spec_from_json(const std::string& text);

std::string to_string(LayerKind k);
LayerKind layer_kind_from_string(const std::string& s);

}  // namespace cloak
