#include "cloak/nets.hpp"

#include <utility>

#include "cloak/errors.hpp"

namespace cloak {

namespace {

using FSeq = Sequential<float>;

void add_conv_bn_act(FSeq& net, const std::string& base, int in_ch, int out_ch, int k,
                     int stride, int pad, bool bias, double slope) {
  net.emplace<Conv2d<float>>(base + ".conv", in_ch, out_ch, k, stride, pad, bias, slope);
  net.emplace<BatchNorm2d<float>>(base + ".bn", out_ch);
  net.emplace<LeakyReLU<float>>(base + ".act", slope);
}

/// Pointwise expansion, strided depthwise, pointwise projection; batch norm
/// and activation after every convolution.
void add_bottleneck(FSeq& net, const std::string& base, int in_ch, int out_ch, int stride,
                    int expansion, bool bias, double slope) {
  const int mid = in_ch * expansion;
  net.emplace<Conv2d<float>>(base + ".expand", in_ch, mid, 1, 1, 0, bias, slope);
  net.emplace<BatchNorm2d<float>>(base + ".expand_bn", mid);
  net.emplace<LeakyReLU<float>>(base + ".expand_act", slope);
  net.emplace<DepthwiseConv2d<float>>(base + ".dw", mid, 3, stride, 1, bias, slope);
  net.emplace<BatchNorm2d<float>>(base + ".dw_bn", mid);
  net.emplace<LeakyReLU<float>>(base + ".dw_act", slope);
  net.emplace<Conv2d<float>>(base + ".project", mid, out_ch, 1, 1, 0, bias, slope);
  net.emplace<BatchNorm2d<float>>(base + ".project_bn", out_ch);
  net.emplace<LeakyReLU<float>>(base + ".project_act", slope);
}

std::shared_ptr<FSeq> build_image_net(const NetworkSpec& spec, std::uint64_t seed) {
  propagate_shapes(spec);  // validates, throws naming the offending layer
  auto net = std::make_shared<FSeq>("net");
  int in_ch = spec.input_shape[0];
  for (std::size_t i = 0; i < spec.layers.size(); ++i) {
    const LayerSpec& l = spec.layers[i];
    const std::string base = "l" + std::to_string(i);
    switch (l.kind) {
      case LayerKind::conv2d:
        add_conv_bn_act(*net, base, in_ch, l.out_channels, 3, l.stride, 1, spec.conv_bias,
                        spec.leaky_slope);
        break;
      case LayerKind::bottleneck:
        add_bottleneck(*net, base, in_ch, l.out_channels, l.stride, l.expansion,
                       spec.conv_bias, spec.leaky_slope);
        break;
      case LayerKind::upsample_bottleneck:
        net->emplace<NearestUpsample2x<float>>(base + ".up");
        add_bottleneck(*net, base, in_ch, l.out_channels, 1, l.expansion, spec.conv_bias,
                       spec.leaky_slope);
        break;
    }
    in_ch = l.out_channels;
  }
  // Empty specs are exact identities; everything else saturates into (0,1)
  // so outputs are always valid images.
  if (!spec.layers.empty()) net->emplace<Sigmoid<float>>("out");
  Rng rng(Rng::derive(seed, 0xC0A7));
  net->init(rng);
  return net;
}

void require_autoencoder_shape(const NetworkSpec& spec, const char* what) {
  Shape3 out = output_shape(spec);
  Shape3 in{spec.input_shape[0], spec.input_shape[1], spec.input_shape[2]};
  if (!(out == in))
    throw ShapeError(std::string(what) + ": output shape (" + std::to_string(out.c) + "," +
                     std::to_string(out.h) + "," + std::to_string(out.w) +
                     ") does not equal input shape (" + std::to_string(in.c) + "," +
                     std::to_string(in.h) + "," + std::to_string(in.w) + ")");
}

// --- classifier architectures -------------------------------------------

void small_cnn_into(FSeq& net, int num_classes) {
  add_conv_bn_act(net, "b1", 3, 16, 3, 1, 1, false, 0.0);
  add_conv_bn_act(net, "b2", 16, 32, 3, 2, 1, false, 0.0);
  add_conv_bn_act(net, "b3", 32, 64, 3, 2, 1, false, 0.0);
  net.emplace<GlobalAvgPool<float>>("pool");
  net.emplace<Linear<float>>("fc", 64, num_classes);
}

void vgg19_into(FSeq& net, int num_classes) {
  // 3x3 stacks with max pooling; convolutions keep their bias terms.
  static const int cfg[] = {64, 64,  -1, 128, 128, -1, 256, 256, 256, 256, -1,
                            512, 512, 512, 512, -1, 512, 512, 512, 512, -1};
  int in_ch = 3, ci = 0, mi = 0;
  for (int v : cfg) {
    if (v == -1) {
      net.emplace<MaxPool2d<float>>("pool" + std::to_string(mi++), 2, 2, 0);
    } else {
      add_conv_bn_act(net, "c" + std::to_string(ci++), in_ch, v, 3, 1, 1, true, 0.0);
      in_ch = v;
    }
  }
  net.emplace<GlobalAvgPool<float>>("pool_out");
  net.emplace<Linear<float>>("fc", 512, num_classes);
}

void resnet18_into(FSeq& net, int num_classes) {
  add_conv_bn_act(net, "stem", 3, 64, 3, 1, 1, false, 0.0);
  struct Stage { int out_ch, stride; };
  const Stage stages[] = {{64, 1}, {128, 2}, {256, 2}, {512, 2}};
  int in_ch = 64;
  int bi = 0;
  for (const auto& st : stages) {
    for (int b = 0; b < 2; ++b) {
      const int stride = (b == 0) ? st.stride : 1;
      const std::string name = "block" + std::to_string(bi++);
      FSeq main(name + ".main");
      main.emplace<Conv2d<float>>("conv1", in_ch, st.out_ch, 3, stride, 1, false, 0.0);
      main.emplace<BatchNorm2d<float>>("bn1", st.out_ch);
      main.emplace<LeakyReLU<float>>("act1", 0.0);
      main.emplace<Conv2d<float>>("conv2", st.out_ch, st.out_ch, 3, 1, 1, false, 0.0);
      main.emplace<BatchNorm2d<float>>("bn2", st.out_ch);
      FSeq shortcut(name + ".shortcut");
      if (stride != 1 || in_ch != st.out_ch) {
        shortcut.emplace<Conv2d<float>>("conv", in_ch, st.out_ch, 1, stride, 0, false, 0.0);
        shortcut.emplace<BatchNorm2d<float>>("bn", st.out_ch);
      }
      net.emplace<ResidualBlock<float>>(name, std::move(main), std::move(shortcut), 0.0);
      in_ch = st.out_ch;
    }
  }
  net.emplace<GlobalAvgPool<float>>("pool");
  net.emplace<Linear<float>>("fc", 512, num_classes);
}

void resnet50_into(FSeq& net, int num_classes) {
  add_conv_bn_act(net, "stem", 3, 64, 3, 1, 1, false, 0.0);
  struct Stage { int mid, blocks, stride; };
  const Stage stages[] = {{64, 3, 1}, {128, 4, 2}, {256, 6, 2}, {512, 3, 2}};
  int in_ch = 64;
  int bi = 0;
  for (const auto& st : stages) {
    for (int b = 0; b < st.blocks; ++b) {
      const int stride = (b == 0) ? st.stride : 1;
      const int out_ch = st.mid * 4;
      const std::string name = "block" + std::to_string(bi++);
      FSeq main(name + ".main");
      main.emplace<Conv2d<float>>("conv1", in_ch, st.mid, 1, 1, 0, false, 0.0);
      main.emplace<BatchNorm2d<float>>("bn1", st.mid);
      main.emplace<LeakyReLU<float>>("act1", 0.0);
      main.emplace<Conv2d<float>>("conv2", st.mid, st.mid, 3, stride, 1, false, 0.0);
      main.emplace<BatchNorm2d<float>>("bn2", st.mid);
      main.emplace<LeakyReLU<float>>("act2", 0.0);
      main.emplace<Conv2d<float>>("conv3", st.mid, out_ch, 1, 1, 0, false, 0.0);
      main.emplace<BatchNorm2d<float>>("bn3", out_ch);
      FSeq shortcut(name + ".shortcut");
      if (stride != 1 || in_ch != out_ch) {
        shortcut.emplace<Conv2d<float>>("conv", in_ch, out_ch, 1, stride, 0, false, 0.0);
        shortcut.emplace<BatchNorm2d<float>>("bn", out_ch);
      }
      net.emplace<ResidualBlock<float>>(name, std::move(main), std::move(shortcut), 0.0);
      in_ch = out_ch;
    }
  }
  net.emplace<GlobalAvgPool<float>>("pool");
  net.emplace<Linear<float>>("fc", 2048, num_classes);
}

FSeq inception_branch(const std::string& name, int in_ch,
                      std::initializer_list<std::pair<int, int>> convs, bool lead_pool) {
  // convs: (out_channels, kernel) chain; kernel 1 => pointwise, 3 => padded 3x3
  FSeq b(name);
  if (lead_pool) b.emplace<MaxPool2d<float>>("pool", 3, 1, 1);
  int c = in_ch, i = 0;
  for (auto [out, k] : convs) {
    add_conv_bn_act(b, "c" + std::to_string(i++), c, out, k, 1, k == 3 ? 1 : 0, true, 0.0);
    c = out;
  }
  return b;
}

void add_inception(FSeq& net, const std::string& name, int in_ch, int n1, int n3r, int n3,
                   int n5r, int n5, int np) {
  std::vector<FSeq> branches;
  branches.push_back(inception_branch("b1", in_ch, {{n1, 1}}, false));
  branches.push_back(inception_branch("b2", in_ch, {{n3r, 1}, {n3, 3}}, false));
  // 5x5 path built from two stacked 3x3 convolutions
  branches.push_back(inception_branch("b3", in_ch, {{n5r, 1}, {n5, 3}, {n5, 3}}, false));
  branches.push_back(inception_branch("b4", in_ch, {{np, 1}}, true));
  net.emplace<InceptionBlock<float>>(name, std::move(branches));
}

void googlenet_into(FSeq& net, int num_classes) {
  add_conv_bn_act(net, "pre", 3, 192, 3, 1, 1, true, 0.0);
  add_inception(net, "a3", 192, 64, 96, 128, 16, 32, 32);
  add_inception(net, "b3", 256, 128, 128, 192, 32, 96, 64);
  net.emplace<MaxPool2d<float>>("pool3", 3, 2, 1);
  add_inception(net, "a4", 480, 192, 96, 208, 16, 48, 64);
  add_inception(net, "b4", 512, 160, 112, 224, 24, 64, 64);
  add_inception(net, "c4", 512, 128, 128, 256, 24, 64, 64);
  add_inception(net, "d4", 512, 112, 144, 288, 32, 64, 64);
  add_inception(net, "e4", 528, 256, 160, 320, 32, 128, 128);
  net.emplace<MaxPool2d<float>>("pool4", 3, 2, 1);
  add_inception(net, "a5", 832, 256, 160, 320, 32, 128, 128);
  add_inception(net, "b5", 832, 384, 192, 384, 48, 128, 128);
  net.emplace<GlobalAvgPool<float>>("pool");
  net.emplace<Linear<float>>("fc", 1024, num_classes);
}

}  // namespace

std::string to_string(ClassifierArch a) {
  switch (a) {
    case ClassifierArch::vgg19: return "vgg19";
    case ClassifierArch::resnet18: return "resnet18";
    case ClassifierArch::resnet50: return "resnet50";
    case ClassifierArch::googlenet: return "googlenet";
    case ClassifierArch::small_cnn: return "small_cnn";
  }
  return "?";
}

ClassifierArch classifier_arch_from_string(const std::string& s) {
  if (s == "vgg19") return ClassifierArch::vgg19;
  if (s == "resnet18") return ClassifierArch::resnet18;
  if (s == "resnet50") return ClassifierArch::resnet50;
  if (s == "googlenet") return ClassifierArch::googlenet;
  if (s == "small_cnn") return ClassifierArch::small_cnn;
  throw UnknownArchError("unknown classifier architecture: " + s);
}

NetworkHandle build_obfuscator(const NetworkSpec& spec, std::uint64_t seed) {
  require_autoencoder_shape(spec, "obfuscator");
  NetworkHandle h;
  h.spec = spec;
  h.arch = "obfuscator";
  h.net = build_image_net(spec, seed);
  return h;
}

NetworkHandle build_deobfuscator(const NetworkSpec& spec, std::uint64_t seed) {
  require_autoencoder_shape(spec, "deobfuscator");
  NetworkHandle h;
  h.spec = spec;
  h.arch = "deobfuscator";
  h.net = build_image_net(spec, seed);
  return h;
}

NetworkHandle build_classifier(ClassifierArch arch, int num_classes, std::uint64_t seed) {
  if (num_classes <= 0) throw Error("num_classes must be positive");
  NetworkHandle h;
  h.spec = identity_spec({3, 32, 32});
  h.arch = to_string(arch);
  h.num_classes = num_classes;
  h.net = std::make_shared<FSeq>("net");
  switch (arch) {
    case ClassifierArch::small_cnn: small_cnn_into(*h.net, num_classes); break;
    case ClassifierArch::vgg19: vgg19_into(*h.net, num_classes); break;
    case ClassifierArch::resnet18: resnet18_into(*h.net, num_classes); break;
    case ClassifierArch::resnet50: resnet50_into(*h.net, num_classes); break;
    case ClassifierArch::googlenet: googlenet_into(*h.net, num_classes); break;
  }
  Rng rng(Rng::derive(seed, 0xC1A55));
  h.net->init(rng);
  return h;
}

NetworkHandle build_classifier(const std::string& arch_name, int num_classes,
                               std::uint64_t seed) {
  return build_classifier(classifier_arch_from_string(arch_name), num_classes, seed);
}

namespace {
void check_batch_shape(const NetworkHandle& net, const Tensor& batch) {
  if (batch.c() != net.spec.input_shape[0] || batch.h() != net.spec.input_shape[1] ||
      batch.w() != net.spec.input_shape[2])
    throw ShapeError(net.arch + ": batch shape (" + std::to_string(batch.c()) + "," +
                     std::to_string(batch.h()) + "," + std::to_string(batch.w()) +
                     ") does not match expected input (" +
                     std::to_string(net.spec.input_shape[0]) + "," +
                     std::to_string(net.spec.input_shape[1]) + "," +
                     std::to_string(net.spec.input_shape[2]) + ")");
}
}  // namespace

Tensor forward(NetworkHandle& net, const Tensor& batch) {
  check_batch_shape(net, batch);
  return net.net->forward(batch);
}

Tensor infer(const NetworkHandle& net, const Tensor& batch) {
  check_batch_shape(net, batch);
  return net.net->infer(batch);
}

NetworkHandle& freeze(NetworkHandle& net) {
  net.trainable = false;
  net.net->set_training(false);
  return net;
}

std::uint64_t state_checksum(const NetworkHandle& net) {
  std::uint64_t h = 0xCBF29CE484222325ull;
  for (const auto& ref : net.net->state()) {
    h = fnv1a64(ref.name.data(), ref.name.size(), h);
    h = fnv1a64(ref.value->data(), static_cast<std::size_t>(ref.value->numel()) * sizeof(float),
                h);
  }
  return h;
}

std::int64_t handle_param_count(const NetworkHandle& net) { return net.net->param_count(); }

}  // namespace cloak
