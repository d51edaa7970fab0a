#include "cloak/spec.hpp"

#include <json.hpp>

#include "cloak/errors.hpp"

namespace cloak {

namespace {

std::string layer_label(std::size_t i, const LayerSpec& l) {
  return "layer " + std::to_string(i) + " (" + to_string(l.kind) + ")";
}

}  // namespace

std::string to_string(LayerKind k) {
  switch (k) {
    case LayerKind::conv2d: return "conv2d";
    case LayerKind::bottleneck: return "bottleneck";
    case LayerKind::upsample_bottleneck: return "upsample_bottleneck";
  }
  return "?";
}

LayerKind layer_kind_from_string(const std::string& s) {
  if (s == "conv2d") return LayerKind::conv2d;
  if (s == "bottleneck") return LayerKind::bottleneck;
  if (s == "upsample_bottleneck") return LayerKind::upsample_bottleneck;
  throw Error("unknown layer kind: " + s);
}

std::vector<Shape3> propagate_shapes(const NetworkSpec& spec) {
  Shape3 s{spec.input_shape[0], spec.input_shape[1], spec.input_shape[2]};
  if (s.c <= 0 || s.h <= 0 || s.w <= 0)
    throw ShapeError("input shape must be positive, got (" + std::to_string(s.c) + "," +
                     std::to_string(s.h) + "," + std::to_string(s.w) + ")");
  std::vector<Shape3> out;
  out.reserve(spec.layers.size());
  for (std::size_t i = 0; i < spec.layers.size(); ++i) {
    const LayerSpec& l = spec.layers[i];
    if (l.out_channels <= 0)
      throw ShapeError(layer_label(i, l) + ": out_channels must be positive");
    if (l.stride != 1 && l.stride != 2)
      throw ShapeError(layer_label(i, l) + ": stride must be 1 or 2, got " +
                       std::to_string(l.stride));
    if (l.kind != LayerKind::conv2d && l.expansion < 1)
      throw ShapeError(layer_label(i, l) + ": expansion must be >= 1");

    switch (l.kind) {
      case LayerKind::conv2d:
      case LayerKind::bottleneck:
        if (l.stride == 2) {
          if (s.h % 2 != 0 || s.w % 2 != 0)
            throw ShapeError(layer_label(i, l) + ": stride 2 needs even spatial dims, got " +
                             std::to_string(s.h) + "x" + std::to_string(s.w));
          s.h /= 2;
          s.w /= 2;
        }
        break;
      case LayerKind::upsample_bottleneck:
        if (l.stride != 1)
          throw ShapeError(layer_label(i, l) + ": upsample blocks use stride 1");
        s.h *= 2;
        s.w *= 2;
        break;
    }
    s.c = l.out_channels;
    out.push_back(s);
  }
  return out;
}

Shape3 output_shape(const NetworkSpec& spec) {
  auto shapes = propagate_shapes(spec);
  if (shapes.empty()) return {spec.input_shape[0], spec.input_shape[1], spec.input_shape[2]};
  return shapes.back();
}

NetworkSpec default_obfuscator_spec() {
  NetworkSpec s;
  s.input_shape = {3, 32, 32};
  s.layers = {
      {LayerKind::conv2d, 32, 1, 6},
      {LayerKind::bottleneck, 32, 2, 6},
      {LayerKind::bottleneck, 64, 2, 6},
      {LayerKind::bottleneck, 128, 2, 6},
      {LayerKind::upsample_bottleneck, 64, 1, 6},
      {LayerKind::upsample_bottleneck, 32, 1, 6},
      {LayerKind::upsample_bottleneck, 3, 1, 6},
  };
  return s;
}

NetworkSpec tiny_obfuscator_spec() {
  NetworkSpec s;
  s.input_shape = {3, 32, 32};
  s.layers = {
      {LayerKind::conv2d, 8, 1, 4},
      {LayerKind::bottleneck, 8, 2, 4},
      {LayerKind::bottleneck, 16, 2, 4},
      {LayerKind::bottleneck, 32, 2, 4},
      {LayerKind::upsample_bottleneck, 16, 1, 4},
      {LayerKind::upsample_bottleneck, 8, 1, 4},
      {LayerKind::upsample_bottleneck, 3, 1, 4},
  };
  return s;
}

NetworkSpec identity_spec(std::array<int, 3> input_shape) {
  NetworkSpec s;
  s.input_shape = input_shape;
  return s;
}

std::string to_json(const NetworkSpec& spec) {
  nlohmann::json j;
  j["input_shape"] = spec.input_shape;
  j["activation"] = "leaky_relu";
  j["normalization"] = "batch_norm";
  j["leaky_slope"] = spec.leaky_slope;
  j["conv_bias"] = spec.conv_bias;
  j["layers"] = nlohmann::json::array();
  for (const auto& l : spec.layers) {
    nlohmann::json jl;
    jl["kind"] = to_string(l.kind);
    jl["out_channels"] = l.out_channels;
    jl["stride"] = l.stride;
    jl["expansion"] = l.expansion;
    j["layers"].push_back(jl);
  }
  return j.dump(2);
}

NetworkSpec spec_from_json(const std::string& text) {
  nlohmann::json j = nlohmann::json::parse(text);
  NetworkSpec s;
  if (j.contains("input_shape")) {
    auto v = j["input_shape"];
    s.input_shape = {v.at(0).get<int>(), v.at(1).get<int>(), v.at(2).get<int>()};
  }
  if (j.contains("activation") && j["activation"] != "leaky_relu")
    throw Error("unsupported activation: " + j["activation"].get<std::string>());
  if (j.contains("normalization") && j["normalization"] != "batch_norm")
    throw Error("unsupported normalization: " + j["normalization"].get<std::string>());
  s.leaky_slope = j.value("leaky_slope", 0.01);
  s.conv_bias = j.value("conv_bias", false);
  for (const auto& jl : j.value("layers", nlohmann::json::array())) {
    LayerSpec l;
    l.kind = layer_kind_from_string(jl.at("kind").get<std::string>());
    l.out_channels = jl.at("out_channels").get<int>();
    l.stride = jl.value("stride", 1);
    l.expansion = jl.value("expansion", 6);
    s.layers.push_back(l);
  }
  return s;
}

}  // namespace cloak
