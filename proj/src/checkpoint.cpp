#include "cloak/checkpoint.hpp"

#include <cstring>
#include <filesystem>
#include <fstream>

#include "cloak/errors.hpp"

namespace cloak {

namespace {

constexpr char kMagic[4] = {'C', 'K', 'P', 'T'};
constexpr std::uint32_t kVersion = 1;

enum DType : std::uint8_t { kF32 = 0, kF64 = 1, kBytes = 2, kI64 = 3, kU64 = 4 };

template <typename T>
void write_le(std::ostream& out, T v) {
  unsigned char buf[sizeof(T)];
  for (std::size_t i = 0; i < sizeof(T); ++i) buf[i] = (v >> (8 * i)) & 0xFF;
  out.write(reinterpret_cast<const char*>(buf), sizeof(T));
}

template <typename T>
T read_le(std::istream& in) {
  unsigned char buf[sizeof(T)];
  in.read(reinterpret_cast<char*>(buf), sizeof(T));
  T v = 0;
  for (std::size_t i = 0; i < sizeof(T); ++i) v |= static_cast<T>(buf[i]) << (8 * i);
  return v;
}

}  // namespace

CheckpointWriter::Entry& CheckpointWriter::add(const std::string& name, std::uint8_t dtype) {
  entries_.push_back({name, dtype, {0, 0, 0, 0}, 0, {}});
  return entries_.back();
}

void CheckpointWriter::put_f32(const std::string& name, const Tensor& t) {
  Entry& e = add(name, kF32);
  e.ndim = 4;
  e.dims = {static_cast<std::uint32_t>(t.n()), static_cast<std::uint32_t>(t.c()),
            static_cast<std::uint32_t>(t.h()), static_cast<std::uint32_t>(t.w())};
  e.data.resize(static_cast<std::size_t>(t.numel()) * sizeof(float));
  std::memcpy(e.data.data(), t.data(), e.data.size());
}

void CheckpointWriter::put_f32(const std::string& name, const std::vector<float>& v) {
  Entry& e = add(name, kF32);
  e.ndim = 1;
  e.dims = {static_cast<std::uint32_t>(v.size()), 0, 0, 0};
  e.data.resize(v.size() * sizeof(float));
  std::memcpy(e.data.data(), v.data(), e.data.size());
}

void CheckpointWriter::put_f64(const std::string& name, const std::vector<double>& v) {
  Entry& e = add(name, kF64);
  e.ndim = 1;
  e.dims = {static_cast<std::uint32_t>(v.size()), 0, 0, 0};
  e.data.resize(v.size() * sizeof(double));
  std::memcpy(e.data.data(), v.data(), e.data.size());
}

void CheckpointWriter::put_bytes(const std::string& name, const std::string& bytes) {
  Entry& e = add(name, kBytes);
  e.ndim = 1;
  e.dims = {static_cast<std::uint32_t>(bytes.size()), 0, 0, 0};
  e.data.assign(bytes.begin(), bytes.end());
}

void CheckpointWriter::put_i64(const std::string& name, std::int64_t v) {
  Entry& e = add(name, kI64);
  e.ndim = 1;
  e.dims = {1, 0, 0, 0};
  e.data.resize(8);
  std::uint64_t u = static_cast<std::uint64_t>(v);
  for (int i = 0; i < 8; ++i) e.data[i] = (u >> (8 * i)) & 0xFF;
}

void CheckpointWriter::put_u64(const std::string& name, std::uint64_t v) {
  Entry& e = add(name, kU64);
  e.ndim = 1;
  e.dims = {1, 0, 0, 0};
  e.data.resize(8);
  for (int i = 0; i < 8; ++i) e.data[i] = (v >> (8 * i)) & 0xFF;
}

void CheckpointWriter::write(const std::string& path) const {
  const std::string tmp = path + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw Error("cannot open checkpoint for writing: " + tmp);
    out.write(kMagic, 4);
    write_le<std::uint32_t>(out, kVersion);
    write_le<std::uint32_t>(out, static_cast<std::uint32_t>(entries_.size()));
    std::uint64_t offset = 0;
    for (const auto& e : entries_) {
      write_le<std::uint16_t>(out, static_cast<std::uint16_t>(e.name.size()));
      out.write(e.name.data(), static_cast<std::streamsize>(e.name.size()));
      out.put(static_cast<char>(e.dtype));
      out.put(static_cast<char>(e.ndim));
      for (int d = 0; d < e.ndim; ++d) write_le<std::uint32_t>(out, e.dims[d]);
      write_le<std::uint64_t>(out, offset);
      write_le<std::uint64_t>(out, static_cast<std::uint64_t>(e.data.size()));
      offset += e.data.size();
    }
    for (const auto& e : entries_)
      out.write(reinterpret_cast<const char*>(e.data.data()),
                static_cast<std::streamsize>(e.data.size()));
    if (!out) throw Error("write failed: " + tmp);
  }
  std::filesystem::rename(tmp, path);
}

Checkpoint Checkpoint::load(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error("cannot open checkpoint: " + path);
  char magic[4];
  in.read(magic, 4);
  if (!in || std::memcmp(magic, kMagic, 4) != 0)
    throw Error("not a checkpoint file: " + path);
  const auto version = read_le<std::uint32_t>(in);
  if (version != kVersion)
    throw Error("unsupported checkpoint version " + std::to_string(version));
  const auto count = read_le<std::uint32_t>(in);

  struct TocRow {
    std::string name;
    std::uint8_t dtype, ndim;
    std::array<std::uint32_t, 4> dims;
    std::uint64_t offset, length;
  };
  std::vector<TocRow> toc(count);
  for (auto& row : toc) {
    const auto name_len = read_le<std::uint16_t>(in);
    row.name.resize(name_len);
    in.read(row.name.data(), name_len);
    row.dtype = static_cast<std::uint8_t>(in.get());
    row.ndim = static_cast<std::uint8_t>(in.get());
    row.dims = {0, 0, 0, 0};
    for (int d = 0; d < row.ndim; ++d) row.dims[d] = read_le<std::uint32_t>(in);
    row.offset = read_le<std::uint64_t>(in);
    row.length = read_le<std::uint64_t>(in);
    if (!in) throw Error("truncated checkpoint header: " + path);
  }
  const std::streampos data_start = in.tellg();
  Checkpoint c;
  for (const auto& row : toc) {
    Entry e;
    e.dtype = row.dtype;
    e.ndim = row.ndim;
    e.dims = row.dims;
    e.data.resize(row.length);
    in.seekg(data_start + static_cast<std::streamoff>(row.offset));
    in.read(reinterpret_cast<char*>(e.data.data()), static_cast<std::streamsize>(row.length));
    if (!in) throw Error("truncated checkpoint data for '" + row.name + "': " + path);
    c.entries_.emplace(row.name, std::move(e));
  }
  return c;
}

std::vector<std::string> Checkpoint::names() const {
  std::vector<std::string> out;
  out.reserve(entries_.size());
  for (const auto& [k, v] : entries_) out.push_back(k);
  return out;
}

const Checkpoint::Entry& Checkpoint::get(const std::string& name, std::uint8_t dtype) const {
  auto it = entries_.find(name);
  if (it == entries_.end()) throw Error("checkpoint entry not found: " + name);
  if (it->second.dtype != dtype)
    throw Error("checkpoint entry '" + name + "' has unexpected type");
  return it->second;
}

Tensor Checkpoint::f32(const std::string& name) const {
  const Entry& e = get(name, kF32);
  if (e.ndim != 4) throw Error("entry '" + name + "' is not a 4-d tensor");
  Tensor t(static_cast<int>(e.dims[0]), static_cast<int>(e.dims[1]),
           static_cast<int>(e.dims[2]), static_cast<int>(e.dims[3]));
  std::memcpy(t.data(), e.data.data(), e.data.size());
  return t;
}

std::vector<float> Checkpoint::f32_vec(const std::string& name) const {
  const Entry& e = get(name, kF32);
  std::vector<float> v(e.data.size() / sizeof(float));
  std::memcpy(v.data(), e.data.data(), e.data.size());
  return v;
}

std::vector<double> Checkpoint::f64_vec(const std::string& name) const {
  const Entry& e = get(name, kF64);
  std::vector<double> v(e.data.size() / sizeof(double));
  std::memcpy(v.data(), e.data.data(), e.data.size());
  return v;
}

std::string Checkpoint::bytes(const std::string& name) const {
  const Entry& e = get(name, kBytes);
  return std::string(e.data.begin(), e.data.end());
}

std::int64_t Checkpoint::i64(const std::string& name) const {
  const Entry& e = get(name, kI64);
  std::uint64_t u = 0;
  for (int i = 0; i < 8; ++i) u |= static_cast<std::uint64_t>(e.data[i]) << (8 * i);
  return static_cast<std::int64_t>(u);
}

std::uint64_t Checkpoint::u64(const std::string& name) const {
  const Entry& e = get(name, kU64);
  std::uint64_t u = 0;
  for (int i = 0; i < 8; ++i) u |= static_cast<std::uint64_t>(e.data[i]) << (8 * i);
  return u;
}

void save_network_state(CheckpointWriter& w, const std::string& prefix, NetworkHandle& net) {
  for (const auto& ref : net.net->state()) w.put_f32(prefix + ref.name, *ref.value);
}

void load_network_state(const Checkpoint& c, const std::string& prefix, NetworkHandle& net) {
  for (auto& ref : net.net->state()) {
    Tensor stored = c.f32(prefix + ref.name);
    if (!stored.same_shape(*ref.value))
      throw Error("checkpoint array '" + prefix + ref.name + "' has mismatched shape");
    *ref.value = std::move(stored);
  }
}

void save_classifier(const std::string& path, NetworkHandle& clf, double plain_accuracy) {
  CheckpointWriter w;
  w.put_bytes("arch", clf.arch);
  w.put_i64("num_classes", clf.num_classes);
  w.put_f64("plain_accuracy", {plain_accuracy});
  w.put_u64("checksum", state_checksum(clf));
  // pixel normalization constants baked into every checkpoint so producers
  // and consumers can never disagree about the input range
  w.put_f32("norm.scale", std::vector<float>{1.0f / 255.0f});
  w.put_f32("norm.offset", std::vector<float>{0.0f});
  save_network_state(w, "clf.", clf);
  w.write(path);
}

LoadedClassifier load_classifier(const std::string& path) {
  Checkpoint c = Checkpoint::load(path);
  LoadedClassifier out;
  const std::string arch = c.bytes("arch");
  out.clf = build_classifier(arch, static_cast<int>(c.i64("num_classes")));
  load_network_state(c, "clf.", out.clf);
  out.plain_accuracy = c.f64_vec("plain_accuracy").at(0);
  const std::uint64_t stored = c.u64("checksum");
  freeze(out.clf);
  if (state_checksum(out.clf) != stored)
    throw Error("classifier checksum mismatch after load: " + path);
  return out;
}

}  // namespace cloak
