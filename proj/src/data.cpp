#include "data.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <numeric>
#include <random>
#include <string>

#include "error.hpp"

namespace bkn {

namespace {

std::vector<double> class_means(const SyntheticSpec& spec, std::size_t dims) {
  std::mt19937_64 rng(spec.seed);
  std::uniform_real_distribution<double> uni(0.25, 0.75);
  std::vector<double> means(static_cast<std::size_t>(spec.classes) * dims);
  for (double& m : means) m = uni(rng);
  return means;
}

Dataset sample_mixture(const SyntheticSpec& spec, std::uint64_t noise_seed) {
  if (spec.classes < 2) throw InvalidArgument("synthetic data needs at least 2 classes");
  if (spec.per_class == 0 || spec.channels == 0 || spec.height == 0 || spec.width == 0) {
    throw InvalidArgument("synthetic data sizes must be positive");
  }
  if (!(spec.spread >= 0.0)) throw InvalidArgument("synthetic spread must be nonnegative");
  const std::size_t dims = spec.channels * spec.height * spec.width;
  const std::size_t K = static_cast<std::size_t>(spec.classes);
  const std::size_t N = K * spec.per_class;
  const std::vector<double> means = class_means(spec, dims);

  std::mt19937_64 rng(noise_seed);
  std::normal_distribution<double> noise(0.0, 1.0);
  Dataset ds;
  ds.class_count = spec.classes;
  ds.images = Tensor({N, spec.channels, spec.height, spec.width});
  ds.labels.resize(N);
  for (std::size_t i = 0; i < N; ++i) {
    const std::size_t k = i % K;
    ds.labels[i] = static_cast<int>(k);
    double* img = ds.images.values().data() + i * dims;
    for (std::size_t d = 0; d < dims; ++d) {
      const double v = means[k * dims + d] + (spec.spread > 0 ? spec.spread * noise(rng) : 0.0);
      img[d] = std::clamp(v, 0.0, 1.0);
    }
  }
  return ds;
}

}  // namespace

Dataset synth_gaussian_mixture(const SyntheticSpec& spec) {
  return sample_mixture(spec, spec.seed ^ 0x9e3779b97f4a7c15ULL);
}

Dataset synth_gaussian_mixture_split(const SyntheticSpec& spec, std::uint64_t split) {
  return sample_mixture(spec, (spec.seed ^ 0x9e3779b97f4a7c15ULL) + 0x632be59bd9b4e019ULL * (split + 1));
}

// ---------------------------------------------------------------------------
// CIFAR-10 binary format

std::vector<CifarRecord> read_cifar_file(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("missing CIFAR file " + path.string());
  std::vector<char> bytes((std::istreambuf_iterator<char>(is)), std::istreambuf_iterator<char>());
  if (bytes.size() % kCifarRecordBytes != 0) {
    throw IoError(path.string() + ": truncated record (size " + std::to_string(bytes.size()) +
                  " is not a multiple of " + std::to_string(kCifarRecordBytes) + ")");
  }
  std::vector<CifarRecord> records(bytes.size() / kCifarRecordBytes);
  for (std::size_t r = 0; r < records.size(); ++r) {
    const char* rec = bytes.data() + r * kCifarRecordBytes;
    const auto label = static_cast<std::uint8_t>(rec[0]);
    if (label > 9) {
      throw IoError(path.string() + ": record " + std::to_string(r) + " has label byte " +
                    std::to_string(label));
    }
    records[r].label = label;
    std::memcpy(records[r].pixels.data(), rec + 1, kCifarPixels);
  }
  return records;
}

void write_cifar_file(const std::filesystem::path& path, std::span<const CifarRecord> records) {
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw IoError("cannot open " + path.string() + " for writing");
  for (const CifarRecord& r : records) {
    os.put(static_cast<char>(r.label));
    os.write(reinterpret_cast<const char*>(r.pixels.data()), kCifarPixels);
  }
  os.flush();
  if (!os) throw IoError("failed writing " + path.string());
}

CifarRaw read_cifar10(const std::filesystem::path& dir) {
  CifarRaw raw;
  raw.train.reserve(5 * kCifarRecordsPerFile);
  for (int i = 1; i <= 5; ++i) {
    auto part = read_cifar_file(dir / ("data_batch_" + std::to_string(i) + ".bin"));
    raw.train.insert(raw.train.end(), part.begin(), part.end());
  }
  raw.test = read_cifar_file(dir / "test_batch.bin");
  return raw;
}

Dataset cifar_to_dataset(std::span<const CifarRecord> records, std::size_t limit) {
  const std::size_t n = limit == 0 ? records.size() : std::min(limit, records.size());
  if (n == 0) throw InvalidArgument("empty CIFAR dataset");
  Dataset ds;
  ds.class_count = 10;
  ds.images = Tensor({n, 3, 32, 32});
  ds.labels.resize(n);
  for (std::size_t i = 0; i < n; ++i) {
    ds.labels[i] = records[i].label;
    double* img = ds.images.values().data() + i * kCifarPixels;
    for (std::size_t p = 0; p < kCifarPixels; ++p) img[p] = records[i].pixels[p] / 255.0;
  }
  return ds;
}

CifarSplit load_cifar10(const std::filesystem::path& dir, std::size_t train_limit,
                        std::size_t test_limit) {
  const CifarRaw raw = read_cifar10(dir);
  return CifarSplit{cifar_to_dataset(raw.train, train_limit),
                    cifar_to_dataset(raw.test, test_limit)};
}

std::vector<CifarRecord> dataset_to_cifar(const Dataset& ds) {
  const Shape& s = ds.images.shape();
  if (s.size() != 4 || s[1] != 3 || s[2] != 32 || s[3] != 32) {
    throw DimensionError("CIFAR records need [N,3,32,32] images, got " + shape_string(s));
  }
  std::vector<CifarRecord> out(ds.size());
  for (std::size_t i = 0; i < out.size(); ++i) {
    if (ds.labels[i] < 0 || ds.labels[i] > 9) throw InvalidArgument("CIFAR labels must be 0..9");
    out[i].label = static_cast<std::uint8_t>(ds.labels[i]);
    const double* img = ds.images.values().data() + i * kCifarPixels;
    for (std::size_t p = 0; p < kCifarPixels; ++p) {
      out[i].pixels[p] = static_cast<std::uint8_t>(std::lround(std::clamp(img[p], 0.0, 1.0) * 255.0));
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Batching

void BatchPlan::validate(std::size_t dataset_size) const {
  if (gradient_batch == 0 || statistics_batch == 0) {
    throw ConfigError("batch sizes must be at least 1");
  }
  if (gradient_batch % statistics_batch != 0) {
    throw ConfigError("statistics_batch " + std::to_string(statistics_batch) +
                      " does not divide gradient_batch " + std::to_string(gradient_batch));
  }
  if (statistics_batch > dataset_size) {
    throw ConfigError("statistics_batch " + std::to_string(statistics_batch) +
                      " exceeds dataset size " + std::to_string(dataset_size));
  }
}

std::vector<std::size_t> epoch_permutation(std::uint64_t seed, std::size_t epoch, std::size_t n) {
  std::vector<std::size_t> perm(n);
  std::iota(perm.begin(), perm.end(), std::size_t{0});
  std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                    static_cast<std::uint32_t>(epoch), static_cast<std::uint32_t>(epoch >> 32)};
  std::mt19937_64 rng(seq);
  std::shuffle(perm.begin(), perm.end(), rng);
  return perm;
}

std::vector<GradientBatch> iterate(const BatchPlan& plan, std::size_t dataset_size,
                                   std::size_t epoch) {
  plan.validate(dataset_size);
  const std::vector<std::size_t> perm = epoch_permutation(plan.shuffle_seed, epoch, dataset_size);
  const std::size_t per_step = plan.gradient_batch;
  const std::size_t micro = plan.statistics_batch;
  std::vector<GradientBatch> out;
  for (std::size_t start = 0; start + per_step <= dataset_size; start += per_step) {
    GradientBatch gb;
    for (std::size_t m = start; m < start + per_step; m += micro) {
      gb.micro_batches.emplace_back(perm.begin() + static_cast<std::ptrdiff_t>(m),
                                    perm.begin() + static_cast<std::ptrdiff_t>(m + micro));
    }
    out.push_back(std::move(gb));
  }
  return out;
}

Batch gather(const Dataset& ds, std::span<const std::size_t> indices) {
  Shape shape = ds.images.shape();
  const std::size_t per = ds.images.size() / shape[0];
  shape[0] = indices.size();
  Batch b{Tensor(shape), std::vector<int>(indices.size())};
  for (std::size_t i = 0; i < indices.size(); ++i) {
    const std::size_t src = indices[i];
    if (src >= ds.size()) throw InvalidArgument("sample index out of range");
    std::copy_n(ds.images.values().begin() + static_cast<std::ptrdiff_t>(src * per), per,
                b.images.values().begin() + static_cast<std::ptrdiff_t>(i * per));
    b.labels[i] = ds.labels[src];
  }
  return b;
}

Batch slice(const Dataset& ds, std::size_t begin, std::size_t count) {
  std::vector<std::size_t> idx(count);
  std::iota(idx.begin(), idx.end(), begin);
  return gather(ds, idx);
}

}  // namespace bkn
