#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <span>
#include <vector>

#include "tensor.hpp"

namespace bkn {

struct Dataset {
  Tensor images;  // [N, C, H, W]
  std::vector<int> labels;
  int class_count = 0;

  std::size_t size() const { return labels.size(); }
};

struct SyntheticSpec {
  int classes = 10;
  std::size_t per_class = 500;
  std::size_t channels = 3;
  std::size_t height = 4;
  std::size_t width = 4;
  double spread = 0.3;
  std::uint64_t seed = 1;
};

/// Class means are drawn uniformly in [0.25, 0.75]; samples add
/// spread * N(0,1) noise and are clamped to [0,1]. Samples are interleaved
/// by class (0,1,...,K-1,0,1,...).
Dataset synth_gaussian_mixture(const SyntheticSpec& spec);

/// Same class means as synth_gaussian_mixture(spec) but an independent
/// noise stream, for held-out evaluation data.
Dataset synth_gaussian_mixture_split(const SyntheticSpec& spec, std::uint64_t split);

inline constexpr std::size_t kCifarPixels = 3 * 32 * 32;
inline constexpr std::size_t kCifarRecordBytes = 1 + kCifarPixels;
inline constexpr std::size_t kCifarRecordsPerFile = 10000;

struct CifarRecord {
  std::uint8_t label = 0;
  std::array<std::uint8_t, kCifarPixels> pixels{};
};

/// Reads one CIFAR-10 binary batch file (a sequence of 3073-byte records).
std::vector<CifarRecord> read_cifar_file(const std::filesystem::path& path);
void write_cifar_file(const std::filesystem::path& path, std::span<const CifarRecord> records);

struct CifarRaw {
  std::vector<CifarRecord> train;
  std::vector<CifarRecord> test;
};

/// data_batch_1..5.bin and test_batch.bin from `dir`.
CifarRaw read_cifar10(const std::filesystem::path& dir);

/// Pixels scaled by 1/255 into [N,3,32,32]; `limit` = 0 keeps every record.
Dataset cifar_to_dataset(std::span<const CifarRecord> records, std::size_t limit = 0);

struct CifarSplit {
  Dataset train;
  Dataset test;
};
CifarSplit load_cifar10(const std::filesystem::path& dir, std::size_t train_limit = 0,
                        std::size_t test_limit = 0);

/// Quantizes a [N,3,32,32] dataset in [0,1] to CIFAR records.
std::vector<CifarRecord> dataset_to_cifar(const Dataset& ds);

struct BatchPlan {
  std::size_t gradient_batch = 128;
  std::size_t statistics_batch = 128;
  std::uint64_t shuffle_seed = 1;

  std::size_t accumulation_count() const { return gradient_batch / statistics_batch; }
  void validate(std::size_t dataset_size) const;
};

/// One optimizer step worth of samples, split into statistics micro-batches.
struct GradientBatch {
  std::vector<std::vector<std::size_t>> micro_batches;
};

/// Seeded permutation of [0, n) for the given epoch.
std::vector<std::size_t> epoch_permutation(std::uint64_t seed, std::size_t epoch, std::size_t n);

/// Gradient batches of one epoch; a trailing partial gradient batch is dropped.
std::vector<GradientBatch> iterate(const BatchPlan& plan, std::size_t dataset_size,
                                   std::size_t epoch);

struct Batch {
  Tensor images;
  std::vector<int> labels;
};

Batch gather(const Dataset& ds, std::span<const std::size_t> indices);
/// Contiguous slice [begin, begin + count).
Batch slice(const Dataset& ds, std::size_t begin, std::size_t count);

}  // namespace bkn
