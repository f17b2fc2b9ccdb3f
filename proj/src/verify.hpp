#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "data.hpp"
#include "net.hpp"
#include "norm.hpp"

namespace bkn {

/// |a - n| / max(|a|, |n|, 1e-8)
double relative_error(double analytic, double numeric);

using ScalarFunction = std::function<double(std::span<const double>)>;

/// Central differences (f(theta + h e_i) - f(theta - h e_i)) / 2h.
std::vector<double> finite_diff(const ScalarFunction& f, std::span<const double> theta,
                                double step);

/// Richardson-extrapolated central differences, (4 D(h/2) - D(h)) / 3.
/// Fourth-order accurate, so a larger step keeps cancellation error small.
std::vector<double> richardson_diff(const ScalarFunction& f, std::span<const double> theta,
                                    double step);

struct GradCheckEntry {
  std::string name;
  std::size_t coordinates = 0;
  /// Against the Richardson-extrapolated reference; decides pass/fail.
  double max_rel = 0.0;
  double max_abs = 0.0;
  /// Plain central differences at the fine and coarse diagnostic steps.
  double max_rel_fine = 0.0;
  double max_rel_coarse = 0.0;
  double max_abs_fine = 0.0;
  double max_abs_coarse = 0.0;
  std::vector<std::size_t> failing;
};

struct GradCheckReport {
  double tolerance = 1e-5;
  /// sum |w_i y_i| at the unperturbed point; sets the roundoff floor of the
  /// plain differences.
  double loss_scale = 0.0;
  std::vector<GradCheckEntry> entries;

  bool passed() const;
  double max_rel() const;
  const GradCheckEntry* find(const std::string& name) const;
};

struct LayerCheckConfig {
  NormKind kind = NormKind::bkn;
  std::size_t batch = 5;
  std::size_t channels = 3;
  std::size_t height = 2;
  std::size_t width = 2;
  /// BKN only: give the layer a random chain predecessor.
  bool with_prior = true;
  std::size_t prev_channels = 3;
  CovMode mode = CovMode::diag;
  std::optional<double> pinned_gain;
  BrnLimits brn_limits{3.0, 5.0};
  double tolerance = 1e-5;
  double reference_step = 1e-3;
  double fine_step = 1e-6;
  double coarse_step = 1e-5;
};

/// Random layer instance; compares every analytic gradient of
/// L = sum_i w_i y_i against central differences. BRN is checked against
/// the function with its r and d corrections frozen.
GradCheckReport check_layer_gradients(const LayerCheckConfig& config, std::uint64_t seed);

/// Whole-network check of every registered parameter under softmax
/// cross-entropy on one train-mode batch. Chain inputs and BRN corrections
/// are held at their recorded values, as the backward pass assumes. The
/// step shrinks (down to reference_step / 1000) for coordinates whose
/// probes flip a ReLU.
GradCheckReport check_network_gradients(Network& net, const Batch& batch, double tolerance,
                                        double reference_step = 1e-3);

void write_gradcheck_csv(const std::filesystem::path& path, const GradCheckReport& report);

// ---------------------------------------------------------------------------
// Extended-precision statistics oracle

using Extended = long double;

struct OracleEstimate {
  std::vector<Extended> mean;
  std::vector<Extended> cov;  // always dense C x C
};

struct OracleLayer {
  std::vector<Extended> batch_mean;
  std::vector<Extended> batch_cov;  // dense
  OracleEstimate prior;
  OracleEstimate post;
  /// max |(E[x^2] - mu^2) - (p Sigma_prior + q S + pq d d^T)| over entries.
  Extended identity_residual = 0;
};

OracleEstimate oracle_predict(const std::vector<double>& prev_mean, const Covariance& prev_cov,
                              const Tensor& transition, const std::vector<double>& r_raw);
OracleEstimate oracle_fuse(const std::vector<double>& prior_mean, const Covariance& prior_cov,
                           const std::vector<double>& obs_mean, const Covariance& obs_cov,
                           Extended q);

struct OracleChainLayer {
  Tensor x;
  /// Absent for the first layer of the chain.
  std::optional<KalmanLayerParams> params;
};

/// Straight-line scalar re-evaluation of a normalization chain with
/// compensated summation; independent of the production code path.
std::vector<OracleLayer> statistics_oracle(const std::vector<OracleChainLayer>& chain,
                                           CovMode mode);

// ---------------------------------------------------------------------------
// Variance gap

struct LayerVarianceGap {
  std::size_t layer_index = 0;
  std::size_t channels = 0;
  std::size_t batches = 0;
  std::vector<double> gap;  // [channels x batches], |batch var - moving var|
  double mean = 0.0;
  double max = 0.0;
};

struct VarianceGapReport {
  std::vector<LayerVarianceGap> layers;
  double mean = 0.0;
  double max = 0.0;
};

/// Forward-propagates consecutive batches of `stats_batch` samples in
/// batch-statistics mode and compares each normalization layer's batch
/// variance with its frozen moving variance.
VarianceGapReport variance_gap(const Network& net, const Dataset& ds, std::size_t stats_batch);

void write_variance_gap_csv(const std::filesystem::path& path, const VarianceGapReport& report);

}  // namespace bkn
