#include "cloak/data.hpp"

#include <zlib.h>

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <json.hpp>

#include "cloak/errors.hpp"
#include "cloak/rng.hpp"

namespace cloak {

namespace {

constexpr int kRecordBytes = 3073;  // 1 label byte + 3 * 1024 pixel bytes
constexpr int kRecordsPerFile = 10000;
constexpr std::uint64_t kFileBytes =
    static_cast<std::uint64_t>(kRecordBytes) * kRecordsPerFile;

const char* kTrainFiles[] = {"data_batch_1.bin", "data_batch_2.bin", "data_batch_3.bin",
                             "data_batch_4.bin", "data_batch_5.bin"};
const char* kTestFile = "test_batch.bin";

std::vector<std::uint8_t> read_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("missing dataset file: " + path);
  std::vector<std::uint8_t> buf((std::istreambuf_iterator<char>(in)),
                                std::istreambuf_iterator<char>());
  return buf;
}

void parse_batch(const std::string& path, Tensor& images, std::vector<int>& labels,
                 int offset) {
  std::vector<std::uint8_t> buf = read_file(path);
  if (buf.size() != kFileBytes)
    throw DataError("corrupt dataset file " + path + ": expected " +
                    std::to_string(kFileBytes) + " bytes, got " +
                    std::to_string(buf.size()));
  for (int r = 0; r < kRecordsPerFile; ++r) {
    const std::uint8_t* rec = buf.data() + static_cast<std::size_t>(r) * kRecordBytes;
    const int label = rec[0];
    if (label > 9)
      throw DataError("corrupt dataset file " + path + ": record " + std::to_string(r) +
                      " has label " + std::to_string(label));
    labels[offset + r] = label;
    float* dst = images.data() + static_cast<std::int64_t>(offset + r) * 3072;
    for (int i = 0; i < 3072; ++i)
      dst[i] = static_cast<float>(rec[1 + i]) * kNormScale + kNormOffset;
  }
}

std::string crc32_hex(const std::vector<std::uint8_t>& buf) {
  uLong crc = crc32(0L, Z_NULL, 0);
  crc = crc32(crc, buf.data(), static_cast<uInt>(buf.size()));
  char out[16];
  std::snprintf(out, sizeof(out), "%08lx", static_cast<unsigned long>(crc));
  return out;
}

}  // namespace

Cifar10 load_cifar10(const std::string& root_dir) {
  Cifar10 out;
  out.train.images = Tensor(kRecordsPerFile * 5, 3, 32, 32);
  out.train.labels.assign(kRecordsPerFile * 5, 0);
  out.train.split_name = "train";
  for (int f = 0; f < 5; ++f)
    parse_batch(root_dir + "/" + kTrainFiles[f], out.train.images, out.train.labels,
                f * kRecordsPerFile);

  out.test.images = Tensor(kRecordsPerFile, 3, 32, 32);
  out.test.labels.assign(kRecordsPerFile, 0);
  out.test.split_name = "test";
  parse_batch(root_dir + "/" + kTestFile, out.test.images, out.test.labels, 0);
  return out;
}

Tensor normalize(const TensorT<std::uint8_t>& bytes) {
  Tensor out(bytes.n(), bytes.c(), bytes.h(), bytes.w());
  for (std::int64_t i = 0; i < bytes.numel(); ++i)
    out[i] = static_cast<float>(bytes[i]) * kNormScale + kNormOffset;
  return out;
}

TensorT<std::uint8_t> denormalize(const Tensor& images) {
  TensorT<std::uint8_t> out(images.n(), images.c(), images.h(), images.w());
  for (std::int64_t i = 0; i < images.numel(); ++i) {
    float v = (images[i] - kNormOffset) / kNormScale;
    v = std::round(v);
    if (v < 0.0f) v = 0.0f;
    if (v > 255.0f) v = 255.0f;
    out[i] = static_cast<std::uint8_t>(v);
  }
  return out;
}

DatasetSplit stratified_subset(const DatasetSplit& split, int size, std::uint64_t seed) {
  const int k = split.class_count;
  if (size <= 0 || size % k != 0)
    throw DataError("subset size " + std::to_string(size) + " is not divisible by " +
                    std::to_string(k) + " classes");
  const int per_class = size / k;

  std::vector<std::vector<int>> by_class(k);
  for (int i = 0; i < split.size(); ++i) by_class[split.labels[i]].push_back(i);

  std::vector<int> chosen;
  chosen.reserve(size);
  for (int c = 0; c < k; ++c) {
    if (static_cast<int>(by_class[c].size()) < per_class)
      throw DataError("class " + std::to_string(c) + " has only " +
                      std::to_string(by_class[c].size()) + " samples, need " +
                      std::to_string(per_class));
    Rng rng(Rng::derive(seed, 0x5C1A55 + static_cast<std::uint64_t>(c)));
    rng.shuffle(by_class[c]);
    chosen.insert(chosen.end(), by_class[c].begin(), by_class[c].begin() + per_class);
  }
  Rng order_rng(Rng::derive(seed, 0x0BDE8));
  order_rng.shuffle(chosen);

  DatasetSplit out;
  out.images = Tensor(size, 3, 32, 32);
  out.labels.resize(size);
  out.split_name = split.split_name;
  out.class_count = k;
  const std::int64_t img = split.images.image_size();
  for (int i = 0; i < size; ++i) {
    std::copy(split.images.data() + chosen[i] * img,
              split.images.data() + (chosen[i] + 1) * img, out.images.data() + i * img);
    out.labels[i] = split.labels[chosen[i]];
  }
  return out;
}

std::vector<FileCheck> verify_cifar10(const std::string& root_dir,
                                      const std::map<std::string, std::string>& expected_crc) {
  std::vector<FileCheck> out;
  std::vector<std::string> files(kTrainFiles, kTrainFiles + 5);
  files.push_back(kTestFile);
  for (const auto& name : files) {
    FileCheck fc;
    fc.name = name;
    const std::string path = root_dir + "/" + name;
    if (!std::filesystem::exists(path)) {
      fc.error = "missing";
      out.push_back(fc);
      continue;
    }
    fc.present = true;
    std::vector<std::uint8_t> buf = read_file(path);
    fc.size = buf.size();
    fc.crc32 = crc32_hex(buf);
    if (buf.size() != kFileBytes) {
      fc.error = "size mismatch: expected " + std::to_string(kFileBytes) + ", got " +
                 std::to_string(buf.size());
    } else {
      for (int r = 0; r < kRecordsPerFile && fc.error.empty(); ++r) {
        if (buf[static_cast<std::size_t>(r) * kRecordBytes] > 9)
          fc.error = "record " + std::to_string(r) + " label out of range";
      }
    }
    auto it = expected_crc.find(name);
    if (fc.error.empty() && it != expected_crc.end() && it->second != fc.crc32)
      fc.error = "checksum mismatch: expected crc32 " + it->second + ", got " + fc.crc32;
    out.push_back(fc);
  }
  return out;
}

std::map<std::string, std::string> read_checksum_file(const std::string& root_dir) {
  std::map<std::string, std::string> out;
  const std::string path = root_dir + "/checksums.json";
  std::ifstream in(path);
  if (!in) return out;
  nlohmann::json j = nlohmann::json::parse(in);
  for (auto it = j.begin(); it != j.end(); ++it) out[it.key()] = it.value().get<std::string>();
  return out;
}

// --- synthetic corpus -----------------------------------------------------

namespace {

/// Smooth two-component sinusoid field parameters for one class/channel.
struct FieldParams {
  double a0, a1, a2;
  double fx1, fy1, p1;
  double fx2, fy2, p2;
};

struct ClassModel {
  FieldParams ch[3];
};

std::vector<ClassModel> make_class_models(const SyntheticConfig& cfg) {
  std::vector<ClassModel> models(cfg.classes);
  for (int k = 0; k < cfg.classes; ++k) {
    Rng rng(Rng::derive(cfg.seed, 0xF1E1D + static_cast<std::uint64_t>(k)));
    for (int c = 0; c < 3; ++c) {
      FieldParams& f = models[k].ch[c];
      f.a0 = rng.uniform(90.0, 165.0);
      f.a1 = rng.uniform(25.0, 55.0);
      f.a2 = rng.uniform(15.0, 40.0);
      f.fx1 = rng.uniform_int(3) + 1;
      f.fy1 = rng.uniform_int(3) + 1;
      f.p1 = rng.uniform(0.0, 6.283185307179586);
      f.fx2 = rng.uniform_int(4) + 1;
      f.fy2 = rng.uniform_int(4) + 1;
      f.p2 = rng.uniform(0.0, 6.283185307179586);
    }
  }
  return models;
}

/// Renders one sample into a 3072-byte RGB plane buffer (R, G, B planes).
void render_sample(const ClassModel& m, const SyntheticConfig& cfg, Rng& rng,
                   std::uint8_t* out) {
  const double tau = 6.283185307179586 / 32.0;
  const int dx = rng.uniform_int(2 * cfg.max_shift + 1) - cfg.max_shift;
  const int dy = rng.uniform_int(2 * cfg.max_shift + 1) - cfg.max_shift;
  double tint[3];
  for (double& t : tint) t = rng.uniform(-cfg.tint_range, cfg.tint_range);

  // sample-private detail patch
  const int pw = 6 + rng.uniform_int(7);
  const int ph = 6 + rng.uniform_int(7);
  const int px = rng.uniform_int(32 - pw);
  const int py = rng.uniform_int(32 - ph);
  double patch_color[3];
  for (double& c : patch_color) c = rng.uniform(0.0, 255.0);

  for (int c = 0; c < 3; ++c) {
    const FieldParams& f = m.ch[c];
    for (int y = 0; y < 32; ++y) {
      for (int x = 0; x < 32; ++x) {
        const double sx = x + dx, sy = y + dy;
        double v = f.a0 + tint[c] +
                   f.a1 * std::sin(tau * (f.fx1 * sx + f.fy1 * sy) + f.p1) +
                   f.a2 * std::sin(tau * (f.fx2 * sx + f.fy2 * sy) + f.p2);
        if (x >= px && x < px + pw && y >= py && y < py + ph) v = patch_color[c];
        v += cfg.noise_sigma * rng.normal();
        if (v < 0) v = 0;
        if (v > 255) v = 255;
        out[c * 1024 + y * 32 + x] = static_cast<std::uint8_t>(std::lround(v));
      }
    }
  }
}

void write_batch_file(const std::string& path, int records, int first_index, int split_tag,
                      const std::vector<ClassModel>& models, const SyntheticConfig& cfg) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw DataError("cannot write " + path);
  std::vector<std::uint8_t> rec(kRecordBytes);
  for (int r = 0; r < records; ++r) {
    const int index = first_index + r;
    const int label = index % cfg.classes;
    Rng rng(Rng::derive(cfg.seed,
                        0x5A3D1ull + static_cast<std::uint64_t>(split_tag) * 0x40000000ull +
                            static_cast<std::uint64_t>(index)));
    rec[0] = static_cast<std::uint8_t>(label);
    render_sample(models[label], cfg, rng, rec.data() + 1);
    out.write(reinterpret_cast<const char*>(rec.data()), kRecordBytes);
  }
}

}  // namespace

void write_synthetic_cifar10(const std::string& root_dir, const SyntheticConfig& cfg) {
  std::filesystem::create_directories(root_dir);
  auto models = make_class_models(cfg);
  for (int f = 0; f < 5; ++f)
    write_batch_file(root_dir + "/" + kTrainFiles[f], kRecordsPerFile, f * kRecordsPerFile,
                     0, models, cfg);
  write_batch_file(root_dir + "/" + kTestFile, kRecordsPerFile, 0, 1, models, cfg);

  nlohmann::json sums;
  for (const auto& fc : verify_cifar10(root_dir)) sums[fc.name] = fc.crc32;
  std::ofstream out(root_dir + "/checksums.json");
  out << sums.dump(2) << '\n';
}

DatasetSplit synthetic_split(int n, int classes, std::uint64_t seed, int split_tag,
                             const std::string& split_name, const SyntheticConfig& cfg_in) {
  SyntheticConfig cfg = cfg_in;
  cfg.classes = classes;
  cfg.seed = seed;
  auto models = make_class_models(cfg);
  DatasetSplit out;
  out.images = Tensor(n, 3, 32, 32);
  out.labels.resize(n);
  out.split_name = split_name;
  out.class_count = classes;
  std::vector<std::uint8_t> buf(3072);
  for (int i = 0; i < n; ++i) {
    const int label = i % classes;
    Rng rng(Rng::derive(seed, 0x5A3D1ull +
                                  static_cast<std::uint64_t>(split_tag) * 0x40000000ull +
                                  static_cast<std::uint64_t>(i)));
    render_sample(models[label], cfg, rng, buf.data());
    out.labels[i] = label;
    float* dst = out.images.data() + static_cast<std::int64_t>(i) * 3072;
    for (int j = 0; j < 3072; ++j) dst[j] = buf[j] * kNormScale + kNormOffset;
  }
  return out;
}

std::string ExperimentConfig::to_json() const {
  nlohmann::json j;
  j["dataset"] = dataset;
  j["subset_size"] = subset_size;
  j["data_seed"] = data_seed;
  j["training"] = nlohmann::json::parse(training.to_json());
  j["classifier_archs"] = classifier_archs;
  if (!obfuscator_spec_json.empty())
    j["obfuscator_spec"] = nlohmann::json::parse(obfuscator_spec_json);
  if (!deobfuscator_spec_json.empty())
    j["deobfuscator_spec"] = nlohmann::json::parse(deobfuscator_spec_json);
  return j.dump(2);
}

ExperimentConfig ExperimentConfig::from_json(const std::string& text) {
  nlohmann::json j = nlohmann::json::parse(text);
  ExperimentConfig c;
  c.dataset = j.value("dataset", std::string("cifar10"));
  c.subset_size = j.value("subset_size", 0);
  c.data_seed = j.value("data_seed", static_cast<std::uint64_t>(7));
  if (j.contains("training")) c.training = TrainingConfig::from_json(j["training"].dump());
  if (j.contains("classifier_archs"))
    c.classifier_archs = j["classifier_archs"].get<std::vector<std::string>>();
  if (j.contains("obfuscator_spec")) c.obfuscator_spec_json = j["obfuscator_spec"].dump();
  if (j.contains("deobfuscator_spec"))
    c.deobfuscator_spec_json = j["deobfuscator_spec"].dump();
  return c;
}

}  // namespace cloak
