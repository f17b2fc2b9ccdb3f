#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "data.hpp"
#include "net.hpp"
#include "verify.hpp"

namespace bkn {

/// Environment variable naming the directory that holds the CIFAR-10
/// binary files when the config leaves cifar.dir empty.
inline constexpr const char* kDataRootEnv = "BKN_DATA_ROOT";

struct ExperimentConfig {
  // dataset
  std::string dataset = "synthetic";  // synthetic | cifar10
  int synth_classes = 10;
  std::size_t synth_train_per_class = 500;
  std::size_t synth_test_per_class = 100;
  // 1x1 maps make the per-channel effective count equal the statistics batch.
  std::size_t synth_channels = 48;
  std::size_t synth_height = 1;
  std::size_t synth_width = 1;
  double synth_spread = 0.3;
  std::uint64_t synth_seed = 7;
  std::string cifar_dir;
  std::size_t cifar_train_limit = 10000;
  std::size_t cifar_test_limit = 2000;

  // architecture
  std::vector<std::size_t> widths{16, 32, 32, 64};

  // normalization
  NormKind norm = NormKind::bkn;
  CovMode cov_mode = CovMode::diag;
  double alpha = 0.01;
  double eps = 1e-5;
  std::optional<double> pinned_gain;
  /// BRN limits stay at (1, 0) for warmup steps, then ramp linearly to
  /// (r_max, d_max) over ramp steps.
  double brn_r_max = 3.0;
  double brn_d_max = 5.0;
  std::size_t brn_warmup_steps = 100;
  std::size_t brn_ramp_steps = 400;

  // batching and optimizer
  std::size_t gradient_batch = 128;
  std::size_t statistics_batch = 128;
  double lr = 0.1;
  double momentum = 0.9;
  std::vector<std::size_t> lr_decay_steps{700};
  double lr_decay_factor = 0.1;

  std::uint64_t seed = 1;
  std::size_t steps = 1000;
  std::size_t eval_every = 100;
  std::string out_dir = "runs/default";

  // metadata
  std::string preset;
  std::string reference_setting;

  BatchPlan plan() const { return BatchPlan{gradient_batch, statistics_batch, seed}; }
  NormSettings norm_settings() const;
  DeskArchitecture architecture(std::size_t in_channels, std::size_t classes) const;
  /// Learning rate in effect at optimizer step `step` (0-based).
  double lr_at(std::size_t step) const;
  BrnLimits brn_limits_at(std::size_t step) const;
};

/// Applies one key=value setting; unknown keys and malformed values throw
/// ConfigError.
void set_config_value(ExperimentConfig& cfg, std::string_view key, std::string_view value);
std::string get_config_value(const ExperimentConfig& cfg, std::string_view key);

/// Flat "key = value" lines with '#' comments, or a flat JSON object when
/// the text starts with '{'. Settings are applied on top of `base`.
ExperimentConfig parse_config(std::string_view text, ExperimentConfig base = {});
ExperimentConfig load_config_file(const std::filesystem::path& path, ExperimentConfig base = {});

/// Canonical key=value listing of every field, in a fixed order.
std::string serialize_config(const ExperimentConfig& cfg);
/// FNV-1a 64 of the canonical listing without out_dir, as 16 hex digits.
std::string config_hash(const ExperimentConfig& cfg);

/// Throws ConfigError for inconsistent settings or missing input files.
void validate_config(const ExperimentConfig& cfg);

std::vector<std::string> preset_names();
/// Desk-scaled micro-batch settings; throws ConfigError for unknown names.
ExperimentConfig preset(const std::string& name);

struct Datasets {
  Dataset train;
  Dataset test;
};
Datasets load_datasets(const ExperimentConfig& cfg);

struct MetricsRow {
  std::size_t step = 0;
  std::size_t epoch = 0;
  double train_loss = 0.0;
  double eval_acc_moving = 0.0;
  double eval_acc_batch = 0.0;
  double ms_per_step = 0.0;
  double examples_per_sec = 0.0;
};

struct RunSummary {
  std::filesystem::path run_dir;
  std::string config_hash;
  std::vector<MetricsRow> rows;
  std::size_t steps = 0;
  std::size_t examples = 0;
  /// Wall time spent in training steps, evaluation excluded.
  double train_seconds = 0.0;
  double examples_per_sec = 0.0;
  std::size_t passes = 0;  // forward/backward passes
};

/// Trains the configured network with gradient accumulation over
/// statistics micro-batches and writes config.txt, metrics.csv, timing.csv,
/// checkpoint.bin and report.json into cfg.out_dir.
RunSummary run_experiment(const ExperimentConfig& cfg);

/// Accuracy on `ds` with moving statistics (batch size irrelevant) and with
/// batch statistics over consecutive chunks of `stats_batch` samples.
struct EvalResult {
  double acc_moving = 0.0;
  double acc_batch = 0.0;
};
EvalResult evaluate_dataset(const Network& net, const Dataset& ds, std::size_t stats_batch);

/// Deterministic columns of metrics.csv.
inline constexpr const char* kMetricsColumns = "step,epoch,train_loss,eval_acc_moving,eval_acc_batch";

struct MetricsFile {
  std::string config_hash;
  std::vector<MetricsRow> rows;  // timing fields are zero
};
MetricsFile read_metrics(const std::filesystem::path& path);

struct Comparison {
  std::vector<std::filesystem::path> runs;
  std::vector<std::size_t> steps;  // common to every run
  std::vector<double> thresholds;
  /// [run][threshold] first step with eval_acc_moving >= threshold.
  std::vector<std::vector<std::optional<std::size_t>>> steps_to_threshold;
  /// Final common-step accuracy of each run minus that of the first run.
  std::vector<double> delta_moving;
  std::vector<double> delta_batch;
  std::string csv;
  std::string text;
};
Comparison compare_runs(const std::vector<std::filesystem::path>& dirs,
                        const std::vector<double>& thresholds = {0.5, 0.8, 0.9});

/// Rebuilds a finished run from its directory and measures the variance gap
/// over its training set at the run's statistics batch size; writes
/// vargap.csv into the run directory.
VarianceGapReport run_variance_gap(const std::filesystem::path& run_dir);

/// Network of a finished run with its checkpoint loaded.
Network load_run_network(const std::filesystem::path& run_dir, ExperimentConfig* cfg_out = nullptr);

}  // namespace bkn
