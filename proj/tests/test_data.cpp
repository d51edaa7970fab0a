#include <doctest.h>

#include <filesystem>
#include <fstream>

#include "cloak/data.hpp"
#include "testutil.hpp"

using namespace cloak;

TEST_CASE("normalize maps byte range onto [0,1] and round-trips") {
  TensorT<std::uint8_t> bytes(1, 3, 2, 2);
  for (int i = 0; i < 12; ++i) bytes[i] = static_cast<std::uint8_t>(i * 20);
  bytes[0] = 0;
  bytes[11] = 255;
  Tensor f = normalize(bytes);
  CHECK(f[0] == 0.0f);
  CHECK(f[11] == 1.0f);
  TensorT<std::uint8_t> back = denormalize(f);
  for (int i = 0; i < 12; ++i) CHECK(back[i] == bytes[i]);

  // every byte value round-trips exactly
  TensorT<std::uint8_t> all(1, 1, 16, 16);
  for (int i = 0; i < 256; ++i) all[i] = static_cast<std::uint8_t>(i);
  TensorT<std::uint8_t> all_back = denormalize(normalize(all));
  for (int i = 0; i < 256; ++i) CHECK(all_back[i] == all[i]);
}

TEST_CASE("synthetic corpus matches the published binary layout") {
  const std::string dir = testutil::scratch_dir("synth_corpus");
  write_synthetic_cifar10(dir);

  auto checks = verify_cifar10(dir, read_checksum_file(dir));
  REQUIRE(checks.size() == 6);
  for (const auto& fc : checks) {
    INFO(fc.name, ": ", fc.error);
    CHECK(fc.present);
    CHECK(fc.error.empty());
    CHECK(fc.size == 30730000u);
  }

  Cifar10 ds = load_cifar10(dir);
  CHECK(ds.train.size() == 50000);
  CHECK(ds.test.size() == 10000);
  CHECK(ds.train.class_count == 10);

  // label histogram: exactly 5000 per class in the training split
  std::vector<int> hist(10, 0);
  for (int l : ds.train.labels) hist[l]++;
  for (int c = 0; c < 10; ++c) CHECK(hist[c] == 5000);

  std::filesystem::remove_all(dir);
}

TEST_CASE("corrupt and missing files are reported with checksum details") {
  const std::string dir = testutil::scratch_dir("synth_bad");
  write_synthetic_cifar10(dir);
  auto expected = read_checksum_file(dir);

  // truncate one file, delete another
  std::filesystem::resize_file(dir + "/data_batch_2.bin", 1000);
  std::filesystem::remove(dir + "/test_batch.bin");

  auto checks = verify_cifar10(dir, expected);
  bool size_reported = false, missing_reported = false;
  for (const auto& fc : checks) {
    if (fc.name == "data_batch_2.bin") size_reported = !fc.error.empty();
    if (fc.name == "test_batch.bin") missing_reported = (fc.error == "missing");
  }
  CHECK(size_reported);
  CHECK(missing_reported);
  CHECK_THROWS_AS(load_cifar10(dir), DataError);

  // bit flip fails the checksum comparison
  std::filesystem::remove_all(dir);
  write_synthetic_cifar10(dir);
  {
    std::fstream f(dir + "/data_batch_1.bin",
                   std::ios::in | std::ios::out | std::ios::binary);
    f.seekp(5000);
    char b;
    f.seekg(5000);
    f.get(b);
    b = static_cast<char>(b ^ 0x01);
    f.seekp(5000);
    f.put(b);
  }
  checks = verify_cifar10(dir, expected);
  bool checksum_reported = false;
  for (const auto& fc : checks)
    if (fc.name == "data_batch_1.bin" &&
        fc.error.find("checksum mismatch") != std::string::npos)
      checksum_reported = true;
  CHECK(checksum_reported);
  std::filesystem::remove_all(dir);
}

TEST_CASE("stratified subsets are deterministic and balanced") {
  DatasetSplit split = synthetic_split(4000, 10, 99);
  DatasetSplit a = stratified_subset(split, 2000, 7);
  DatasetSplit b = stratified_subset(split, 2000, 7);
  REQUIRE(a.size() == 2000);
  CHECK(a.labels == b.labels);
  for (std::int64_t i = 0; i < a.images.numel(); i += 997)
    CHECK(a.images[i] == b.images[i]);

  std::vector<int> hist(10, 0);
  for (int l : a.labels) hist[l]++;
  for (int c = 0; c < 10; ++c) CHECK(hist[c] == 200);

  DatasetSplit c = stratified_subset(split, 2000, 8);
  CHECK(a.labels != c.labels);  // different seed, different draw

  CHECK_THROWS_AS(stratified_subset(split, 1999, 7), DataError);
}

TEST_CASE("synthetic splits are seed-reproducible and class-separable") {
  DatasetSplit a = synthetic_split(100, 10, 31);
  DatasetSplit b = synthetic_split(100, 10, 31);
  for (std::int64_t i = 0; i < a.images.numel(); i += 101)
    CHECK(a.images[i] == b.images[i]);
  CHECK(a.labels == b.labels);

  for (std::int64_t i = 0; i < a.images.numel(); ++i) {
    CHECK(a.images[i] >= 0.0f);
    CHECK(a.images[i] <= 1.0f);
  }
}

TEST_CASE("experiment config round-trips") {
  ExperimentConfig c;
  c.subset_size = 5000;
  c.data_seed = 42;
  c.training.epochs = 20;
  c.training.lambda = 0.5;
  c.classifier_archs = {"small_cnn", "resnet18"};
  ExperimentConfig back = ExperimentConfig::from_json(c.to_json());
  CHECK(back.subset_size == 5000);
  CHECK(back.data_seed == 42);
  CHECK(back.training.epochs == 20);
  CHECK(back.training.lambda == 0.5);
  CHECK(back.classifier_archs == c.classifier_archs);
}
