#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <random>
#include <set>
#include <string>
#include <vector>

#include "data.hpp"
#include "error.hpp"

using namespace bkn;
namespace fs = std::filesystem;

namespace {

struct TempDir {
  fs::path path;
  explicit TempDir(const std::string& tag) {
    path = fs::temp_directory_path() / ("bkn_test_data_" + tag);
    fs::remove_all(path);
    fs::create_directories(path);
  }
  ~TempDir() { fs::remove_all(path); }
};

std::vector<unsigned char> read_bytes(const fs::path& p) {
  std::ifstream is(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(is), std::istreambuf_iterator<char>()};
}

void write_bytes(const fs::path& p, const std::vector<unsigned char>& bytes) {
  std::ofstream os(p, std::ios::binary);
  os.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
}

std::vector<unsigned char> random_records(std::size_t n, std::mt19937_64& rng) {
  std::vector<unsigned char> bytes(n * kCifarRecordBytes);
  for (std::size_t r = 0; r < n; ++r) {
    bytes[r * kCifarRecordBytes] = static_cast<unsigned char>(rng() % 10);
    for (std::size_t i = 1; i < kCifarRecordBytes; ++i)
      bytes[r * kCifarRecordBytes + i] = static_cast<unsigned char>(rng() & 0xff);
  }
  return bytes;
}

}  // namespace

TEST_CASE("synthetic data is deterministic per seed") {
  SyntheticSpec spec{4, 20, 3, 2, 2, 0.2, 9};
  const Dataset a = synth_gaussian_mixture(spec);
  const Dataset b = synth_gaussian_mixture(spec);
  CHECK(a.images == b.images);
  CHECK(a.labels == b.labels);
  CHECK(a.size() == 80);
  CHECK(a.class_count == 4);
  for (double v : a.images.values()) {
    CHECK(v >= 0.0);
    CHECK(v <= 1.0);
  }
  spec.seed = 10;
  CHECK(!(synth_gaussian_mixture(spec).images == a.images));
}

TEST_CASE("synthetic spread 0 puts every sample on its class mean") {
  const Dataset d = synth_gaussian_mixture({3, 10, 2, 2, 1, 0.0, 4});
  const std::size_t dims = 4;
  for (std::size_t i = 0; i < d.size(); ++i) {
    // Interleaved by class, so sample i and sample i mod K share a mean.
    const std::size_t first = static_cast<std::size_t>(d.labels[i]);
    CHECK(d.labels[i] == static_cast<int>(i % 3));
    for (std::size_t k = 0; k < dims; ++k)
      CHECK(d.images[i * dims + k] == d.images[first * dims + k]);
  }
}

TEST_CASE("small spread is separable by a nearest-class-mean classifier") {
  const SyntheticSpec spec{10, 100, 48, 1, 1, 0.05, 7};
  const Dataset train = synth_gaussian_mixture(spec);
  const Dataset test = synth_gaussian_mixture_split(spec, 1);
  const std::size_t D = 48;
  std::vector<double> means(10 * D, 0.0);
  std::vector<int> counts(10, 0);
  for (std::size_t i = 0; i < train.size(); ++i) {
    ++counts[train.labels[i]];
    for (std::size_t k = 0; k < D; ++k) means[train.labels[i] * D + k] += train.images[i * D + k];
  }
  for (std::size_t c = 0; c < 10; ++c)
    for (std::size_t k = 0; k < D; ++k) means[c * D + k] /= counts[c];
  std::size_t correct = 0;
  for (std::size_t i = 0; i < test.size(); ++i) {
    int best = -1;
    double best_d = 1e300;
    for (int c = 0; c < 10; ++c) {
      double dist = 0.0;
      for (std::size_t k = 0; k < D; ++k) {
        const double e = test.images[i * D + k] - means[c * D + k];
        dist += e * e;
      }
      if (dist < best_d) best_d = dist, best = c;
    }
    correct += best == test.labels[i];
  }
  CHECK(static_cast<double>(correct) / test.size() >= 0.99);
  CHECK(!(test.images == train.images));
}

TEST_CASE("synthetic generator rejects bad sizes") {
  CHECK_THROWS_AS(synth_gaussian_mixture({1, 10, 2, 1, 1, 0.1, 1}), InvalidArgument);
  CHECK_THROWS_AS(synth_gaussian_mixture({3, 0, 2, 1, 1, 0.1, 1}), InvalidArgument);
  CHECK_THROWS_AS(synth_gaussian_mixture({3, 5, 0, 1, 1, 0.1, 1}), InvalidArgument);
  CHECK_THROWS_AS(synth_gaussian_mixture({3, 5, 2, 1, 1, -0.1, 1}), InvalidArgument);
}

TEST_CASE("all-zero CIFAR record") {
  TempDir dir("zero");
  write_bytes(dir.path / "z.bin", std::vector<unsigned char>(kCifarRecordBytes, 0));
  const auto records = read_cifar_file(dir.path / "z.bin");
  REQUIRE(records.size() == 1);
  const Dataset d = cifar_to_dataset(records);
  CHECK(d.labels == std::vector<int>{0});
  CHECK(d.images.shape() == Shape{1, 3, 32, 32});
  for (double v : d.images.values()) CHECK(v == 0.0);
}

TEST_CASE("CIFAR parse matches a byte-walk reference and round-trips") {
  TempDir dir("walk");
  std::mt19937_64 rng(71);
  const auto bytes = random_records(7, rng);
  write_bytes(dir.path / "b.bin", bytes);
  const auto records = read_cifar_file(dir.path / "b.bin");
  REQUIRE(records.size() == 7);
  const Dataset d = cifar_to_dataset(records);

  // Walk the raw bytes: label, then R, G, B planes of 32x32.
  for (std::size_t r = 0; r < 7; ++r) {
    const unsigned char* rec = bytes.data() + r * kCifarRecordBytes;
    CHECK(d.labels[r] == rec[0]);
    long double sum = 0;
    for (std::size_t ch = 0; ch < 3; ++ch)
      for (std::size_t y = 0; y < 32; ++y)
        for (std::size_t x = 0; x < 32; ++x) {
          const unsigned char v = rec[1 + ch * 1024 + y * 32 + x];
          sum += v;
          CHECK(d.images[((r * 3 + ch) * 32 + y) * 32 + x] == v / 255.0);
        }
    if (r == 0) {
      long double got = 0;
      for (std::size_t p = 0; p < kCifarPixels; ++p) got += d.images[p];
      CHECK(std::abs(got / kCifarPixels - sum / 255.0L / kCifarPixels) <= 1e-12L);
    }
  }

  write_cifar_file(dir.path / "again.bin", records);
  CHECK(read_bytes(dir.path / "again.bin") == bytes);
  // Through the [0,1] dataset and back.
  write_cifar_file(dir.path / "ds.bin", dataset_to_cifar(d));
  CHECK(read_bytes(dir.path / "ds.bin") == bytes);
}

TEST_CASE("CIFAR errors") {
  TempDir dir("errors");
  std::mt19937_64 rng(72);
  CHECK_THROWS_AS(read_cifar_file(dir.path / "absent.bin"), IoError);

  auto bytes = random_records(2, rng);
  bytes.pop_back();
  write_bytes(dir.path / "short.bin", bytes);
  CHECK_THROWS_AS(read_cifar_file(dir.path / "short.bin"), IoError);

  bytes = random_records(2, rng);
  bytes[kCifarRecordBytes] = 10;
  write_bytes(dir.path / "label.bin", bytes);
  try {
    read_cifar_file(dir.path / "label.bin");
    FAIL("expected an I/O error");
  } catch (const IoError& e) {
    CHECK(std::string(e.what()).find("record 1") != std::string::npos);
  }
  CHECK_THROWS_AS(read_cifar10(dir.path), IoError);
}

TEST_CASE("load_cifar10 reads the six standard files") {
  TempDir dir("six");
  std::mt19937_64 rng(73);
  for (int i = 1; i <= 5; ++i)
    write_bytes(dir.path / ("data_batch_" + std::to_string(i) + ".bin"), random_records(3, rng));
  write_bytes(dir.path / "test_batch.bin", random_records(2, rng));
  const CifarSplit s = load_cifar10(dir.path);
  CHECK(s.train.size() == 15);
  CHECK(s.test.size() == 2);
  CHECK(load_cifar10(dir.path, 4, 1).train.size() == 4);
}

TEST_CASE("iterate (8,2) on 16 samples") {
  const BatchPlan plan{8, 2, 5};
  CHECK(plan.accumulation_count() == 4);
  const auto batches = iterate(plan, 16, 0);
  REQUIRE(batches.size() == 2);
  for (const auto& gb : batches) {
    CHECK(gb.micro_batches.size() == 4);
    for (const auto& mb : gb.micro_batches) CHECK(mb.size() == 2);
  }
}

TEST_CASE("iterate (4,4) is plain mini-batch SGD and drops the partial batch") {
  const BatchPlan plan{4, 4, 5};
  CHECK(plan.accumulation_count() == 1);
  const auto batches = iterate(plan, 18, 0);
  CHECK(batches.size() == 4);
  for (const auto& gb : batches) CHECK(gb.micro_batches.size() == 1);
}

TEST_CASE("iterated indices are a prefix of the epoch permutation") {
  for (std::size_t epoch = 0; epoch < 3; ++epoch) {
    const BatchPlan plan{6, 3, 11};
    const auto perm = epoch_permutation(11, epoch, 20);
    std::vector<std::size_t> emitted;
    for (const auto& gb : iterate(plan, 20, epoch))
      for (const auto& mb : gb.micro_batches) emitted.insert(emitted.end(), mb.begin(), mb.end());
    CHECK(emitted.size() == 18);
    CHECK(std::equal(emitted.begin(), emitted.end(), perm.begin()));
    // The permutation itself covers every index once.
    CHECK(std::set<std::size_t>(perm.begin(), perm.end()).size() == 20);
  }
}

TEST_CASE("iteration is deterministic per seed and epoch") {
  CHECK(epoch_permutation(3, 1, 50) == epoch_permutation(3, 1, 50));
  CHECK(epoch_permutation(3, 1, 50) != epoch_permutation(3, 2, 50));
  CHECK(epoch_permutation(3, 1, 50) != epoch_permutation(4, 1, 50));
}

TEST_CASE("batch plans are validated") {
  CHECK_THROWS_AS(iterate(BatchPlan{8, 3, 1}, 16, 0), ConfigError);
  CHECK_THROWS_AS(iterate(BatchPlan{8, 0, 1}, 16, 0), ConfigError);
  CHECK_THROWS_AS(iterate(BatchPlan{32, 32, 1}, 16, 0), ConfigError);
}

TEST_CASE("gather and slice copy the right samples") {
  const Dataset d = synth_gaussian_mixture({3, 4, 2, 1, 1, 0.3, 2});
  const std::vector<std::size_t> idx{5, 0, 11};
  const Batch g = gather(d, idx);
  CHECK(g.images.shape() == Shape{3, 2, 1, 1});
  for (std::size_t i = 0; i < 3; ++i) {
    CHECK(g.labels[i] == d.labels[idx[i]]);
    CHECK(g.images[i * 2] == d.images[idx[i] * 2]);
    CHECK(g.images[i * 2 + 1] == d.images[idx[i] * 2 + 1]);
  }
  const Batch s = slice(d, 4, 3);
  CHECK(s.labels == std::vector<int>{d.labels[4], d.labels[5], d.labels[6]});
  CHECK_THROWS_AS(gather(d, std::vector<std::size_t>{12}), InvalidArgument);
}
