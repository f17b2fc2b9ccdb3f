#pragma once

#include <cstddef>
#include <optional>
#include <vector>

#include "tensor.hpp"

namespace bkn {

enum class CovMode { diag, full };

/// Full-covariance mode keeps a C x C matrix per layer; above this width the
/// cost is not worth it and only diagonal mode is accepted.
inline constexpr std::size_t kMaxFullCovChannels = 64;

/// Per-channel covariance, either as variances only or as a dense symmetric
/// matrix (row-major).
struct Covariance {
  CovMode mode = CovMode::diag;
  std::size_t dim = 0;
  std::vector<double> values;

  static Covariance zeros(CovMode mode, std::size_t dim);
  static Covariance identity(CovMode mode, std::size_t dim);
  static Covariance from_diagonal(CovMode mode, const std::vector<double>& diagonal);

  double entry(std::size_t i, std::size_t j) const;
  double diagonal(std::size_t c) const;
  std::vector<double> diagonal() const;
  bool all_finite() const;

  friend bool operator==(const Covariance&, const Covariance&) = default;
};

struct AffineParams {
  Tensor gamma;  // [C]
  Tensor beta;   // [C]

  static AffineParams identity(std::size_t channels);
  std::size_t channels() const { return gamma.size(); }
};

/// Observed statistics of one mini-batch: mean and biased covariance over
/// the m*a*b positions of every channel.
struct BatchStatistics {
  std::vector<double> mean;
  Covariance cov;
  std::size_t effective_count = 0;
};

/// Learnable state of a normalization layer that has a chain predecessor.
/// The gain lives in logit space and the noise variances in softplus space
/// so that gradient steps cannot leave q in (0,1) or R >= 0.
struct KalmanLayerParams {
  Tensor transition;  // [C, C_prev]
  Tensor q_raw;       // [1]
  Tensor r_raw;       // [C]
  /// When set, the gain is held at this value and receives no gradient.
  std::optional<double> pinned_gain;

  static KalmanLayerParams initial(std::size_t channels, std::size_t prev_channels);

  std::size_t channels() const { return transition.dim(0); }
  std::size_t prev_channels() const { return transition.dim(1); }
  double gain() const;
  std::vector<double> noise() const;
};

struct StatisticEstimate {
  std::vector<double> mean;
  Covariance cov;
};

/// Prior (conditioned on the previous layer) and posterior (after fusing the
/// current observation) estimates of a layer's statistics.
struct KalmanEstimate {
  std::vector<double> mean_prior;
  Covariance cov_prior;
  std::vector<double> mean_post;
  Covariance cov_post;

  std::size_t channels() const { return mean_post.size(); }
};

struct MovingStatistics {
  std::vector<double> mu;
  Covariance sigma;
  double alpha = 0.01;
  bool seeded = false;

  static MovingStatistics initial(std::size_t channels, CovMode mode, double alpha);

  /// mu <- (1 - alpha) mu + alpha mean, and likewise for sigma.
  void update(const std::vector<double>& mean, const Covariance& cov);
};

class NormEpsilon {
 public:
  explicit NormEpsilon(double value = 1e-5);
  double value() const noexcept { return value_; }

 private:
  double value_;
};

double logistic(double v);
double softplus(double v);
double softplus_inverse(double v);

BatchStatistics batch_stats(const Tensor& x, CovMode mode);

/// mean_prior = A mean_prev, cov_prior = A cov_prev A^T + R (diagonal mode
/// uses the exact diagonal (A o A) var_prev + R).
StatisticEstimate kalman_predict(const KalmanEstimate& prev,
                                 const KalmanLayerParams& params);

/// Convex fusion of the prior with the observed statistics under gain q.
StatisticEstimate kalman_fuse(const StatisticEstimate& prior,
                              const BatchStatistics& obs, double q);

/// Everything the backward pass of a normalization layer needs.
struct NormCache {
  Shape4 shape;
  Tensor x;
  Tensor xhat;
  std::vector<double> gamma;
  std::vector<double> mean_post;
  std::vector<double> inv_std;  // 1 / sqrt(diag(cov_post) + eps)
  std::vector<double> var_post;
  double eps = 0.0;

  bool has_prior = false;
  bool gain_pinned = false;
  double q = 1.0;
  std::vector<double> batch_mean;
  std::vector<double> batch_var;
  std::vector<double> mean_prior;
  std::vector<double> var_prior;
  std::vector<double> prev_mean;
  Covariance prev_cov;
  Tensor transition;
  std::vector<double> r_raw;
};

struct NormGradients {
  Tensor x;
  Tensor gamma;
  Tensor beta;
};

struct BknGradients {
  Tensor x;
  Tensor gamma;
  Tensor beta;
  // Empty for a layer without a chain predecessor.
  Tensor q_raw;
  Tensor transition;
  Tensor r_raw;
};

struct BknTrainResult {
  Tensor y;
  KalmanEstimate estimate;
  NormCache cache;
};

struct BknEvalResult {
  Tensor y;
  KalmanEstimate estimate;
};

/// Training-mode Batch Kalman Normalization. `prev` and `params` are null for
/// the first normalization layer, which then normalizes with its own batch
/// statistics and still emits an estimate for the next layer.
BknTrainResult bkn_forward_train(const Tensor& x, const KalmanEstimate* prev,
                                 const KalmanLayerParams* params,
                                 const AffineParams& affine,
                                 MovingStatistics& moving, NormEpsilon eps,
                                 CovMode mode = CovMode::diag);

BknGradients bkn_backward(const Tensor& grad_y, const NormCache& cache);

Tensor bkn_forward_infer(const Tensor& x, const MovingStatistics& moving,
                         const AffineParams& affine, NormEpsilon eps);

/// The training path evaluated without touching moving statistics.
BknEvalResult bkn_forward_eval_batchstats(const Tensor& x,
                                          const KalmanEstimate* prev,
                                          const KalmanLayerParams* params,
                                          const AffineParams& affine,
                                          NormEpsilon eps,
                                          CovMode mode = CovMode::diag);

struct BnTrainResult {
  Tensor y;
  BatchStatistics stats;
  NormCache cache;
};

BnTrainResult bn_forward_train(const Tensor& x, const AffineParams& affine,
                               MovingStatistics& moving, NormEpsilon eps,
                               CovMode mode = CovMode::diag);
NormGradients bn_backward(const Tensor& grad_y, const NormCache& cache);
Tensor bn_forward_infer(const Tensor& x, const MovingStatistics& moving,
                        const AffineParams& affine, NormEpsilon eps);
Tensor bn_forward_eval_batchstats(const Tensor& x, const AffineParams& affine,
                                  NormEpsilon eps);

struct BrnLimits {
  double r_max = 1.0;
  double d_max = 0.0;
};

struct BrnCache {
  Shape4 shape;
  Tensor z;  // (x - batch mean) / batch std
  std::vector<double> gamma;
  std::vector<double> inv_std;
  std::vector<double> r;
  std::vector<double> d;
  Tensor xhat;
};

struct BrnTrainResult {
  Tensor y;
  BatchStatistics stats;
  BrnCache cache;
};

/// Per-channel r and d of one renormalization step.
struct BrnCorrection {
  std::vector<double> r;
  std::vector<double> d;
};

/// Batch Renormalization: the batch-standardized value is corrected towards
/// the moving statistics by r and d, which are clipped to the given limits
/// and treated as constants by the backward pass. A `held` correction is
/// used as given instead (gradient checks of the frozen function).
BrnTrainResult brn_forward_train(const Tensor& x, const AffineParams& affine,
                                 MovingStatistics& moving, NormEpsilon eps,
                                 BrnLimits limits, CovMode mode = CovMode::diag,
                                 const BrnCorrection* held = nullptr);
NormGradients brn_backward(const Tensor& grad_y, const BrnCache& cache);

}  // namespace bkn
