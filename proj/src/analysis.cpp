#include "cloak/analysis.hpp"

#include <json.hpp>

#include "cloak/errors.hpp"
#include "cloak/image_io.hpp"

namespace cloak {

namespace {

std::int64_t bottleneck_params(int in_ch, int out_ch, int expansion, bool bias) {
  const std::int64_t mid = static_cast<std::int64_t>(in_ch) * expansion;
  std::int64_t p = 0;
  p += in_ch * mid + 2 * mid;       // expansion conv + bn
  p += 9 * mid + 2 * mid;           // depthwise 3x3 + bn
  p += mid * out_ch + 2 * out_ch;   // projection conv + bn
  if (bias) p += mid + mid + out_ch;
  return p;
}

std::int64_t bottleneck_macs(int in_ch, int out_ch, int expansion, int in_h, int in_w,
                             int out_h, int out_w) {
  const std::int64_t mid = static_cast<std::int64_t>(in_ch) * expansion;
  std::int64_t m = 0;
  m += static_cast<std::int64_t>(in_ch) * mid * in_h * in_w;  // 1x1 expand, input resolution
  m += 9 * mid * out_h * out_w;                               // strided depthwise
  m += mid * static_cast<std::int64_t>(out_ch) * out_h * out_w;  // 1x1 project
  return m;
}

}  // namespace

std::int64_t count_params(const NetworkSpec& spec) {
  propagate_shapes(spec);  // validate
  std::int64_t total = 0;
  int in_ch = spec.input_shape[0];
  for (const auto& l : spec.layers) {
    switch (l.kind) {
      case LayerKind::conv2d:
        total += 9LL * in_ch * l.out_channels + 2LL * l.out_channels;
        if (spec.conv_bias) total += l.out_channels;
        break;
      case LayerKind::bottleneck:
      case LayerKind::upsample_bottleneck:
        total += bottleneck_params(in_ch, l.out_channels, l.expansion, spec.conv_bias);
        break;
    }
    in_ch = l.out_channels;
  }
  return total;
}

std::int64_t count_params(const NetworkHandle& net) { return net.net->param_count(); }

std::int64_t count_flops(const NetworkSpec& spec, int mac_to_flop_factor) {
  auto shapes = propagate_shapes(spec);
  std::int64_t total = 0;
  Shape3 in{spec.input_shape[0], spec.input_shape[1], spec.input_shape[2]};
  for (std::size_t i = 0; i < spec.layers.size(); ++i) {
    const LayerSpec& l = spec.layers[i];
    const Shape3 out = shapes[i];
    switch (l.kind) {
      case LayerKind::conv2d:
        total += 9LL * in.c * l.out_channels * out.h * out.w;
        break;
      case LayerKind::bottleneck:
        total += bottleneck_macs(in.c, l.out_channels, l.expansion, in.h, in.w, out.h, out.w);
        break;
      case LayerKind::upsample_bottleneck:
        // nearest-neighbour upsampling first, all three convolutions at the
        // doubled resolution
        total += bottleneck_macs(in.c, l.out_channels, l.expansion, out.h, out.w, out.h,
                                 out.w);
        break;
    }
    in = out;
  }
  return total * mac_to_flop_factor;
}

std::int64_t count_flops(const NetworkHandle& net, Shape3 input, int mac_to_flop_factor) {
  return net.net->macs(input) * mac_to_flop_factor;
}

CostReport cost_report(const NetworkHandle& obf, const NetworkHandle& clf, Shape3 input,
                       int mac_to_flop_factor) {
  CostReport r;
  r.params = count_params(obf);
  r.flops = count_flops(obf, input, mac_to_flop_factor);
  const std::int64_t clf_params = count_params(clf);
  const std::int64_t clf_flops = count_flops(clf, input, mac_to_flop_factor);
  r.params_ratio = clf_params ? 100.0 * static_cast<double>(r.params) / clf_params : 0.0;
  r.flops_ratio = clf_flops ? 100.0 * static_cast<double>(r.flops) / clf_flops : 0.0;
  return r;
}

double evaluate_accuracy(const NetworkHandle& clf, const DatasetSplit& data,
                         const NetworkHandle* obf, int batch_size) {
  if (clf.trainable)
    throw FrozenContractError("evaluate_accuracy: classifier must be frozen");
  const int n = data.size();
  if (n == 0) return 0.0;
  int correct = 0;
  for (int begin = 0; begin < n; begin += batch_size) {
    const int end = std::min(n, begin + batch_size);
    Tensor batch = data.images.slice_batch(begin, end);
    if (obf) batch = infer(*obf, batch);
    Tensor logits = infer(clf, batch);
    const int K = static_cast<int>(logits.image_size());
    for (int i = 0; i < end - begin; ++i) {
      const float* row = logits.data() + static_cast<std::int64_t>(i) * K;
      int best = 0;
      for (int k = 1; k < K; ++k)
        if (row[k] > row[best]) best = k;
      if (best == data.labels[begin + i]) ++correct;
    }
  }
  return static_cast<double>(correct) / n;
}

double TransferMatrix::at(const std::string& row, const std::string& col) const {
  for (std::size_t i = 0; i < trained_on.size(); ++i)
    for (std::size_t j = 0; j < tested_on.size(); ++j)
      if (trained_on[i] == row && tested_on[j] == col) return accuracy[i][j];
  throw Error("transfer matrix has no cell (" + row + ", " + col + ")");
}

std::string TransferMatrix::to_json() const {
  nlohmann::json j;
  j["trained_on"] = trained_on;
  j["tested_on"] = tested_on;
  j["accuracy"] = accuracy;
  return j.dump(2);
}

TransferMatrix transfer_matrix(const std::map<std::string, const NetworkHandle*>& obfuscators,
                               const std::map<std::string, const NetworkHandle*>& classifiers,
                               const DatasetSplit& data) {
  TransferMatrix m;
  for (const auto& [id, clf] : classifiers) {
    if (clf->trainable)
      throw FrozenContractError("transfer_matrix: classifier '" + id + "' must be frozen");
    m.tested_on.push_back(id);
  }
  for (const auto& [id, obf] : obfuscators) {
    m.trained_on.push_back(id);
    std::vector<double> row;
    for (const auto& [cid, clf] : classifiers)
      row.push_back(evaluate_accuracy(*clf, data, obf));
    m.accuracy.push_back(std::move(row));
  }
  return m;
}

void export_grid(const Tensor& originals, const Tensor& obfuscated,
                 const Tensor& reconstructed, const std::string& path) {
  const int n = originals.n();
  if (n == 0) throw Error("export_grid: empty batch");
  if (obfuscated.n() != n || reconstructed.n() != n)
    throw ShapeError("export_grid: batch sizes differ");
  const int h = originals.h(), w = originals.w();
  const int pad = 2;
  const Tensor* cols[3] = {&originals, &obfuscated, &reconstructed};

  ImageU8 img;
  img.width = 3 * w + 4 * pad;
  img.height = n * h + (n + 1) * pad;
  img.rgb.assign(static_cast<std::size_t>(img.width) * img.height * 3, 255);

  for (int row = 0; row < n; ++row) {
    for (int col = 0; col < 3; ++col) {
      TensorT<std::uint8_t> bytes = denormalize(cols[col]->slice_batch(row, row + 1));
      const int y0 = pad + row * (h + pad);
      const int x0 = pad + col * (w + pad);
      for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x)
          for (int c = 0; c < 3; ++c)
            img.rgb[(static_cast<std::size_t>(y0 + y) * img.width + (x0 + x)) * 3 + c] =
                bytes.at(0, c, y, x);
    }
  }
  write_png_rgb8(path, img);
}

}  // namespace cloak
