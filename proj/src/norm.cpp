#include "norm.hpp"

#include <algorithm>
#include <cmath>
#include <string>

#include "error.hpp"

namespace bkn {

// ---------------------------------------------------------------------------
// Value types

Covariance Covariance::zeros(CovMode mode, std::size_t dim) {
  Covariance c;
  c.mode = mode;
  c.dim = dim;
  c.values.assign(mode == CovMode::diag ? dim : dim * dim, 0.0);
  return c;
}

Covariance Covariance::identity(CovMode mode, std::size_t dim) {
  return from_diagonal(mode, std::vector<double>(dim, 1.0));
}

Covariance Covariance::from_diagonal(CovMode mode, const std::vector<double>& diagonal) {
  Covariance c = zeros(mode, diagonal.size());
  for (std::size_t i = 0; i < diagonal.size(); ++i) {
    if (mode == CovMode::diag) {
      c.values[i] = diagonal[i];
    } else {
      c.values[i * c.dim + i] = diagonal[i];
    }
  }
  return c;
}

double Covariance::entry(std::size_t i, std::size_t j) const {
  if (mode == CovMode::full) return values[i * dim + j];
  return i == j ? values[i] : 0.0;
}

double Covariance::diagonal(std::size_t c) const {
  return mode == CovMode::diag ? values[c] : values[c * dim + c];
}

std::vector<double> Covariance::diagonal() const {
  std::vector<double> d(dim);
  for (std::size_t c = 0; c < dim; ++c) d[c] = diagonal(c);
  return d;
}

bool Covariance::all_finite() const {
  return std::all_of(values.begin(), values.end(),
                     [](double v) { return std::isfinite(v); });
}

AffineParams AffineParams::identity(std::size_t channels) {
  return AffineParams{Tensor({channels}, 1.0), Tensor({channels}, 0.0)};
}

double logistic(double v) {
  if (v >= 0) return 1.0 / (1.0 + std::exp(-v));
  const double e = std::exp(v);
  return e / (1.0 + e);
}

double softplus(double v) {
  // ln(1 + e^v) without overflow for large v.
  return v > 0 ? v + std::log1p(std::exp(-v)) : std::log1p(std::exp(v));
}

double softplus_inverse(double v) {
  if (!(v > 0)) throw InvalidArgument("softplus inverse needs a positive value");
  return v > 30 ? v + std::log(-std::expm1(-v)) : std::log(std::expm1(v));
}

KalmanLayerParams KalmanLayerParams::initial(std::size_t channels,
                                             std::size_t prev_channels) {
  KalmanLayerParams p;
  if (channels == prev_channels) {
    p.transition = Tensor::identity(channels);
  } else {
    p.transition = Tensor({channels, prev_channels},
                          1.0 / static_cast<double>(prev_channels));
  }
  p.q_raw = Tensor({1}, 0.0);
  p.r_raw = Tensor({channels}, softplus_inverse(1e-3));
  return p;
}

double KalmanLayerParams::gain() const {
  return pinned_gain ? *pinned_gain : logistic(q_raw[0]);
}

std::vector<double> KalmanLayerParams::noise() const {
  std::vector<double> r(r_raw.size());
  for (std::size_t i = 0; i < r.size(); ++i) r[i] = softplus(r_raw[i]);
  return r;
}

MovingStatistics MovingStatistics::initial(std::size_t channels, CovMode mode,
                                           double alpha) {
  if (!(alpha >= 0.0 && alpha <= 1.0)) {
    throw InvalidArgument("moving-average momentum must lie in [0,1]");
  }
  MovingStatistics m;
  m.mu.assign(channels, 0.0);
  m.sigma = Covariance::identity(mode, channels);
  m.alpha = alpha;
  return m;
}

void MovingStatistics::update(const std::vector<double>& mean, const Covariance& cov) {
  if (mean.size() != mu.size() || cov.values.size() != sigma.values.size()) {
    throw DimensionError("moving statistics update with mismatched channels");
  }
  seeded = true;
  if (alpha == 0.0) return;
  const double keep = 1.0 - alpha;
  for (std::size_t c = 0; c < mu.size(); ++c) mu[c] = keep * mu[c] + alpha * mean[c];
  for (std::size_t i = 0; i < sigma.values.size(); ++i) {
    sigma.values[i] = keep * sigma.values[i] + alpha * cov.values[i];
  }
}

NormEpsilon::NormEpsilon(double value) : value_(value) {
  if (!(value > 0.0)) throw InvalidArgument("normalization epsilon must be positive");
}

// ---------------------------------------------------------------------------
// Statistics

namespace {

std::size_t index4(const Shape4& s, std::size_t n, std::size_t c, std::size_t p) {
  return (n * s.channels + c) * s.spatial() + p;
}

void require_mode_width(CovMode mode, std::size_t channels) {
  if (mode == CovMode::full && channels > kMaxFullCovChannels) {
    throw InvalidArgument("full covariance mode supports at most " +
                          std::to_string(kMaxFullCovChannels) + " channels, got " +
                          std::to_string(channels));
  }
}

}  // namespace

BatchStatistics batch_stats(const Tensor& x, CovMode mode) {
  const Shape4 s = Shape4::of(x);
  const std::size_t count = s.effective_count();
  if (count == 0 || s.channels == 0) throw DimensionError("batch statistics of an empty tensor");
  require_mode_width(mode, s.channels);
  const std::size_t C = s.channels;
  const std::size_t P = s.spatial();
  const double inv = 1.0 / static_cast<double>(count);

  BatchStatistics out;
  out.effective_count = count;
  out.mean.assign(C, 0.0);
  for (std::size_t n = 0; n < s.batch; ++n)
    for (std::size_t c = 0; c < C; ++c)
      for (std::size_t p = 0; p < P; ++p) out.mean[c] += x[index4(s, n, c, p)];
  for (double& m : out.mean) m *= inv;

  out.cov = Covariance::zeros(mode, C);
  if (mode == CovMode::diag) {
    for (std::size_t n = 0; n < s.batch; ++n)
      for (std::size_t c = 0; c < C; ++c)
        for (std::size_t p = 0; p < P; ++p) {
          const double d = x[index4(s, n, c, p)] - out.mean[c];
          out.cov.values[c] += d * d;
        }
  } else {
    std::vector<double> centered(C);
    for (std::size_t n = 0; n < s.batch; ++n)
      for (std::size_t p = 0; p < P; ++p) {
        for (std::size_t c = 0; c < C; ++c) centered[c] = x[index4(s, n, c, p)] - out.mean[c];
        for (std::size_t i = 0; i < C; ++i)
          for (std::size_t j = 0; j < C; ++j)
            out.cov.values[i * C + j] += centered[i] * centered[j];
      }
  }
  for (double& v : out.cov.values) v *= inv;
  return out;
}

StatisticEstimate kalman_predict(const KalmanEstimate& prev,
                                 const KalmanLayerParams& params) {
  const Tensor& A = params.transition;
  const std::size_t C = A.dim(0);
  const std::size_t Cp = A.dim(1);
  if (prev.mean_post.size() != Cp || prev.cov_post.dim != Cp) {
    throw DimensionError("transition matrix " + shape_string(A.shape()) +
                         " does not match previous estimate with " +
                         std::to_string(prev.mean_post.size()) + " channels");
  }
  if (params.r_raw.size() != C) {
    throw DimensionError("noise vector has " + std::to_string(params.r_raw.size()) +
                         " entries, expected " + std::to_string(C));
  }
  const CovMode mode = prev.cov_post.mode;
  require_mode_width(mode, C);
  const std::vector<double> r = params.noise();

  const double* a_data = A.values().data();
  StatisticEstimate out;
  out.mean.assign(C, 0.0);
  for (std::size_t c = 0; c < C; ++c) {
    const double* a_row = a_data + c * Cp;
    double acc = 0.0;
    for (std::size_t j = 0; j < Cp; ++j) acc += a_row[j] * prev.mean_post[j];
    out.mean[c] = acc;
  }

  out.cov = Covariance::zeros(mode, C);
  if (mode == CovMode::diag) {
    for (std::size_t c = 0; c < C; ++c) {
      const double* a_row = a_data + c * Cp;
      double acc = 0.0;
      for (std::size_t j = 0; j < Cp; ++j) {
        const double a = a_row[j];
        acc += a * a * prev.cov_post.values[j];
      }
      out.cov.values[c] = acc + r[c];
    }
  } else {
    // A * Sigma, then (A * Sigma) * A^T.
    std::vector<double> as(C * Cp, 0.0);
    kernel::gemm_accumulate(false, false, C, Cp, Cp, A.values().data(),
                            prev.cov_post.values.data(), as.data());
    kernel::gemm_accumulate(false, true, C, C, Cp, as.data(), A.values().data(),
                            out.cov.values.data());
    for (std::size_t c = 0; c < C; ++c) out.cov.values[c * C + c] += r[c];
  }
  return out;
}

StatisticEstimate kalman_fuse(const StatisticEstimate& prior,
                              const BatchStatistics& obs, double q) {
  const std::size_t C = prior.mean.size();
  if (obs.mean.size() != C || prior.cov.dim != C || obs.cov.dim != C) {
    throw DimensionError("prior has " + std::to_string(C) +
                         " channels, observation has " + std::to_string(obs.mean.size()));
  }
  if (prior.cov.mode != obs.cov.mode) {
    throw DimensionError("prior and observation use different covariance modes");
  }
  const double p = 1.0 - q;
  StatisticEstimate out;
  out.mean.resize(C);
  std::vector<double> innovation(C);
  for (std::size_t c = 0; c < C; ++c) {
    out.mean[c] = p * prior.mean[c] + q * obs.mean[c];
    innovation[c] = obs.mean[c] - prior.mean[c];
  }
  out.cov = Covariance::zeros(prior.cov.mode, C);
  const double pq = p * q;
  if (prior.cov.mode == CovMode::diag) {
    for (std::size_t c = 0; c < C; ++c) {
      out.cov.values[c] = p * prior.cov.values[c] + q * obs.cov.values[c] +
                          pq * innovation[c] * innovation[c];
    }
  } else {
    for (std::size_t i = 0; i < C; ++i)
      for (std::size_t j = 0; j < C; ++j) {
        const std::size_t k = i * C + j;
        out.cov.values[k] = p * prior.cov.values[k] + q * obs.cov.values[k] +
                            pq * innovation[i] * innovation[j];
      }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Shared normalization kernels

namespace {

struct Normalized {
  Tensor y;
  Tensor xhat;
  std::vector<double> inv_std;
};

Normalized normalize_affine(const Tensor& x, const Shape4& s,
                            const std::vector<double>& mean,
                            const std::vector<double>& var,
                            const AffineParams& affine, double eps) {
  const std::size_t C = s.channels;
  if (affine.gamma.size() != C || affine.beta.size() != C) {
    throw DimensionError("affine parameters have " + std::to_string(affine.gamma.size()) +
                         " channels, input has " + std::to_string(C));
  }
  Normalized out{Tensor(x.shape()), Tensor(x.shape()), std::vector<double>(C)};
  for (std::size_t c = 0; c < C; ++c) {
    if (!(var[c] >= 0.0)) throw NumericError("negative variance in normalization");
    out.inv_std[c] = 1.0 / std::sqrt(var[c] + eps);
  }
  const std::size_t P = s.spatial();
  for (std::size_t n = 0; n < s.batch; ++n)
    for (std::size_t c = 0; c < C; ++c) {
      const double g = affine.gamma[c], b = affine.beta[c];
      const double m = mean[c], is = out.inv_std[c];
      const std::size_t base = index4(s, n, c, 0);
      for (std::size_t p = 0; p < P; ++p) {
        const double xh = (x[base + p] - m) * is;
        out.xhat[base + p] = xh;
        out.y[base + p] = g * xh + b;
      }
    }
  return out;
}

struct LayerStatistics {
  BatchStatistics obs;
  KalmanEstimate estimate;
  bool has_prior = false;
  bool pinned = false;
  double q = 1.0;
};

LayerStatistics fused_statistics(const Tensor& x, const KalmanEstimate* prev,
                                 const KalmanLayerParams* params, CovMode mode) {
  LayerStatistics ls;
  ls.obs = batch_stats(x, mode);
  if (prev != nullptr) {
    if (params == nullptr) {
      throw InvalidArgument("a normalization layer with a predecessor needs Kalman parameters");
    }
    const std::size_t C = ls.obs.mean.size();
    if (params->channels() != C) {
      throw DimensionError("transition matrix has " + std::to_string(params->channels()) +
                           " rows, layer has " + std::to_string(C) + " channels");
    }
    if (prev->cov_post.mode != mode) {
      throw DimensionError("previous estimate uses a different covariance mode");
    }
    const double q = params->gain();
    if (!(q >= 0.0 && q <= 1.0)) throw InvalidArgument("Kalman gain outside [0,1]");
    const StatisticEstimate prior = kalman_predict(*prev, *params);
    const StatisticEstimate post = kalman_fuse(prior, ls.obs, q);
    ls.estimate = KalmanEstimate{prior.mean, prior.cov, post.mean, post.cov};
    ls.has_prior = true;
    ls.pinned = params->pinned_gain.has_value();
    ls.q = q;
  } else {
    ls.estimate = KalmanEstimate{ls.obs.mean, ls.obs.cov, ls.obs.mean, ls.obs.cov};
  }
  auto finite = [](const std::vector<double>& v) {
    return std::all_of(v.begin(), v.end(), [](double e) { return std::isfinite(e); });
  };
  if (!finite(ls.estimate.mean_post) || !ls.estimate.cov_post.all_finite() ||
      !finite(ls.obs.mean) || !ls.obs.cov.all_finite()) {
    throw NumericError("non-finite normalization statistics");
  }
  return ls;
}

void require_grad_shape(const Tensor& grad_y, const Shape4& s, const Tensor& x) {
  if (grad_y.shape() != x.shape()) {
    throw DimensionError("gradient shape " + shape_string(grad_y.shape()) +
                         " does not match cached input " + shape_string(x.shape()));
  }
  (void)s;
}

}  // namespace

// ---------------------------------------------------------------------------
// Batch Kalman Normalization

BknTrainResult bkn_forward_train(const Tensor& x, const KalmanEstimate* prev,
                                 const KalmanLayerParams* params,
                                 const AffineParams& affine,
                                 MovingStatistics& moving, NormEpsilon eps,
                                 CovMode mode) {
  const Shape4 s = Shape4::of(x);
  LayerStatistics ls = fused_statistics(x, prev, params, mode);
  std::vector<double> var_post = ls.estimate.cov_post.diagonal();
  Normalized nz = normalize_affine(x, s, ls.estimate.mean_post, var_post, affine, eps.value());
  moving.update(ls.estimate.mean_post, ls.estimate.cov_post);

  NormCache cache;
  cache.shape = s;
  cache.x = x;
  cache.xhat = std::move(nz.xhat);
  cache.gamma = affine.gamma.storage();
  cache.mean_post = ls.estimate.mean_post;
  cache.inv_std = std::move(nz.inv_std);
  cache.var_post = std::move(var_post);
  cache.eps = eps.value();
  cache.has_prior = ls.has_prior;
  if (ls.has_prior) {
    cache.gain_pinned = ls.pinned;
    cache.q = ls.q;
    cache.batch_mean = ls.obs.mean;
    cache.batch_var = ls.obs.cov.diagonal();
    cache.mean_prior = ls.estimate.mean_prior;
    cache.var_prior = ls.estimate.cov_prior.diagonal();
    cache.prev_mean = prev->mean_post;
    cache.prev_cov = prev->cov_post;
    cache.transition = params->transition;
    cache.r_raw = params->r_raw.storage();
  }
  return BknTrainResult{std::move(nz.y), std::move(ls.estimate), std::move(cache)};
}

BknGradients bkn_backward(const Tensor& grad_y, const NormCache& cache) {
  const Shape4& s = cache.shape;
  require_grad_shape(grad_y, s, cache.x);
  const std::size_t C = s.channels, P = s.spatial();
  const double M = static_cast<double>(s.effective_count());
  const double q = cache.has_prior ? cache.q : 1.0;
  const double p = 1.0 - q;

  BknGradients g;
  g.x = Tensor(cache.x.shape());
  g.gamma = Tensor({C});
  g.beta = Tensor({C});
  std::vector<double> d_var(C, 0.0), d_mean(C, 0.0);

  for (std::size_t c = 0; c < C; ++c) {
    const double gamma = cache.gamma[c];
    const double mu = cache.mean_post[c];
    const double is = cache.inv_std[c];
    double sum_g = 0.0, sum_gxhat = 0.0, sum_dxhat_centered = 0.0, sum_dxhat = 0.0;
    for (std::size_t n = 0; n < s.batch; ++n) {
      const std::size_t base = index4(s, n, c, 0);
      for (std::size_t i = 0; i < P; ++i) {
        const double gy = grad_y[base + i];
        const double dxhat = gy * gamma;
        sum_g += gy;
        sum_gxhat += gy * cache.xhat[base + i];
        sum_dxhat_centered += dxhat * (cache.x[base + i] - mu);
        sum_dxhat += dxhat;
      }
    }
    g.beta[c] = sum_g;
    g.gamma[c] = sum_gxhat;
    // dl/dSigma = sum dxhat (x - mu) (-1/2) (Sigma + eps)^(-3/2)
    d_var[c] = sum_dxhat_centered * -0.5 * is * is * is;
    // dl/dmu = sum dxhat (-1) (Sigma + eps)^(-1/2)
    d_mean[c] = -sum_dxhat * is;

    const double dvar_coeff = d_var[c] * 2.0 * q / M;
    const double dmean_term = d_mean[c] * q / M;
    // dSigma/dx_i = (2q/m)(x_i - q xbar - p mu_prior); reduces to x_i - xbar
    // without a prior.
    const double shift = cache.has_prior
                             ? q * cache.batch_mean[c] + p * cache.mean_prior[c]
                             : mu;
    for (std::size_t n = 0; n < s.batch; ++n) {
      const std::size_t base = index4(s, n, c, 0);
      for (std::size_t i = 0; i < P; ++i) {
        const double dxhat = grad_y[base + i] * gamma;
        const double xi = cache.x[base + i];
        g.x[base + i] = dxhat * is + dvar_coeff * (xi - shift) + dmean_term;
      }
    }
  }

  if (!cache.has_prior) return g;

  const std::size_t Cp = cache.transition.dim(1);
  g.q_raw = Tensor({1});
  g.transition = Tensor({C, Cp});
  g.r_raw = Tensor({C});

  double d_q = 0.0;
  std::vector<double> d_mean_prior(C), d_var_prior(C);
  for (std::size_t c = 0; c < C; ++c) {
    const double innov = cache.batch_mean[c] - cache.mean_prior[c];
    const double dvar_dq =
        cache.batch_var[c] - cache.var_prior[c] + (1.0 - 2.0 * q) * innov * innov;
    d_q += d_var[c] * dvar_dq + d_mean[c] * innov;
    d_mean_prior[c] = p * d_mean[c] - 2.0 * p * q * innov * d_var[c];
    d_var_prior[c] = p * d_var[c];
  }
  g.q_raw[0] = cache.gain_pinned ? 0.0 : d_q * q * (1.0 - q);

  const double* a_data = cache.transition.values().data();
  double* ga_data = g.transition.values().data();
  const double* prev_cov = cache.prev_cov.values.data();
  const bool diag = cache.prev_cov.mode == CovMode::diag;
  for (std::size_t c = 0; c < C; ++c) {
    const double* a_row = a_data + c * Cp;
    for (std::size_t j = 0; j < Cp; ++j) {
      double dvar_dA;
      if (diag) {
        dvar_dA = 2.0 * a_row[j] * prev_cov[j];
      } else {
        double acc = 0.0;
        for (std::size_t l = 0; l < Cp; ++l) acc += prev_cov[j * Cp + l] * a_row[l];
        dvar_dA = 2.0 * acc;
      }
      ga_data[c * Cp + j] = d_mean_prior[c] * cache.prev_mean[j] + d_var_prior[c] * dvar_dA;
    }
    g.r_raw[c] = d_var_prior[c] * logistic(cache.r_raw[c]);
  }
  return g;
}

Tensor bkn_forward_infer(const Tensor& x, const MovingStatistics& moving,
                         const AffineParams& affine, NormEpsilon eps) {
  if (!moving.seeded) {
    throw InvalidArgument("inference with unseeded moving statistics");
  }
  const Shape4 s = Shape4::of(x);
  if (moving.mu.size() != s.channels) {
    throw DimensionError("moving statistics have " + std::to_string(moving.mu.size()) +
                         " channels, input has " + std::to_string(s.channels));
  }
  return normalize_affine(x, s, moving.mu, moving.sigma.diagonal(), affine, eps.value()).y;
}

BknEvalResult bkn_forward_eval_batchstats(const Tensor& x, const KalmanEstimate* prev,
                                          const KalmanLayerParams* params,
                                          const AffineParams& affine, NormEpsilon eps,
                                          CovMode mode) {
  const Shape4 s = Shape4::of(x);
  LayerStatistics ls = fused_statistics(x, prev, params, mode);
  Normalized nz = normalize_affine(x, s, ls.estimate.mean_post,
                                   ls.estimate.cov_post.diagonal(), affine, eps.value());
  return BknEvalResult{std::move(nz.y), std::move(ls.estimate)};
}

// ---------------------------------------------------------------------------
// Batch Normalization: the chain-free special case.

BnTrainResult bn_forward_train(const Tensor& x, const AffineParams& affine,
                               MovingStatistics& moving, NormEpsilon eps, CovMode mode) {
  BknTrainResult r = bkn_forward_train(x, nullptr, nullptr, affine, moving, eps, mode);
  BatchStatistics stats{r.estimate.mean_post, r.estimate.cov_post,
                        Shape4::of(x).effective_count()};
  return BnTrainResult{std::move(r.y), std::move(stats), std::move(r.cache)};
}

NormGradients bn_backward(const Tensor& grad_y, const NormCache& cache) {
  if (cache.has_prior) throw InvalidArgument("batch-norm backward given a Kalman cache");
  BknGradients g = bkn_backward(grad_y, cache);
  return NormGradients{std::move(g.x), std::move(g.gamma), std::move(g.beta)};
}

Tensor bn_forward_infer(const Tensor& x, const MovingStatistics& moving,
                        const AffineParams& affine, NormEpsilon eps) {
  return bkn_forward_infer(x, moving, affine, eps);
}

Tensor bn_forward_eval_batchstats(const Tensor& x, const AffineParams& affine,
                                  NormEpsilon eps) {
  return bkn_forward_eval_batchstats(x, nullptr, nullptr, affine, eps).y;
}

// ---------------------------------------------------------------------------
// Batch Renormalization

BrnTrainResult brn_forward_train(const Tensor& x, const AffineParams& affine,
                                 MovingStatistics& moving, NormEpsilon eps,
                                 BrnLimits limits, CovMode mode,
                                 const BrnCorrection* held) {
  if (!(limits.r_max >= 1.0) || !(limits.d_max >= 0.0)) {
    throw InvalidArgument("renormalization limits need r_max >= 1 and d_max >= 0");
  }
  const Shape4 s = Shape4::of(x);
  const std::size_t C = s.channels, P = s.spatial();
  if (moving.mu.size() != C) {
    throw DimensionError("moving statistics have " + std::to_string(moving.mu.size()) +
                         " channels, input has " + std::to_string(C));
  }
  if (affine.gamma.size() != C || affine.beta.size() != C) {
    throw DimensionError("affine parameters do not match input channels");
  }
  BatchStatistics stats = batch_stats(x, mode);
  if (!stats.cov.all_finite() ||
      !std::all_of(stats.mean.begin(), stats.mean.end(), [](double v) { return std::isfinite(v); })) {
    throw NumericError("non-finite normalization statistics");
  }

  BrnCache cache;
  cache.shape = s;
  cache.z = Tensor(x.shape());
  cache.xhat = Tensor(x.shape());
  cache.gamma = affine.gamma.storage();
  cache.inv_std.resize(C);
  cache.r.resize(C);
  cache.d.resize(C);
  if (held && (held->r.size() != C || held->d.size() != C)) {
    throw DimensionError("held renormalization correction does not match input channels");
  }
  const double e = eps.value();
  for (std::size_t c = 0; c < C; ++c) {
    const double mov_var = moving.sigma.diagonal(c);
    if (!(mov_var >= 0.0)) throw NumericError("negative moving variance in renormalization");
    const double batch_std = std::sqrt(stats.cov.diagonal(c) + e);
    const double mov_std = std::sqrt(mov_var + e);
    cache.inv_std[c] = 1.0 / batch_std;
    cache.r[c] = std::clamp(batch_std / mov_std, 1.0 / limits.r_max, limits.r_max);
    cache.d[c] = std::clamp((stats.mean[c] - moving.mu[c]) / mov_std, -limits.d_max, limits.d_max);
    if (held) {
      cache.r[c] = held->r[c];
      cache.d[c] = held->d[c];
    }
  }
  Tensor y(x.shape());
  for (std::size_t n = 0; n < s.batch; ++n)
    for (std::size_t c = 0; c < C; ++c) {
      const std::size_t base = index4(s, n, c, 0);
      for (std::size_t i = 0; i < P; ++i) {
        const double z = (x[base + i] - stats.mean[c]) * cache.inv_std[c];
        const double xh = cache.r[c] * z + cache.d[c];
        cache.z[base + i] = z;
        cache.xhat[base + i] = xh;
        y[base + i] = affine.gamma[c] * xh + affine.beta[c];
      }
    }
  moving.update(stats.mean, stats.cov);
  return BrnTrainResult{std::move(y), std::move(stats), std::move(cache)};
}

NormGradients brn_backward(const Tensor& grad_y, const BrnCache& cache) {
  const Shape4& s = cache.shape;
  require_grad_shape(grad_y, s, cache.z);
  const std::size_t C = s.channels, P = s.spatial();
  const double M = static_cast<double>(s.effective_count());
  NormGradients g{Tensor(cache.z.shape()), Tensor({C}), Tensor({C})};
  for (std::size_t c = 0; c < C; ++c) {
    const double coeff = cache.gamma[c] * cache.r[c];
    double sum_g = 0.0, sum_gxhat = 0.0, sum_dz = 0.0, sum_dz_z = 0.0;
    for (std::size_t n = 0; n < s.batch; ++n) {
      const std::size_t base = index4(s, n, c, 0);
      for (std::size_t i = 0; i < P; ++i) {
        const double gy = grad_y[base + i];
        const double dz = gy * coeff;
        sum_g += gy;
        sum_gxhat += gy * cache.xhat[base + i];
        sum_dz += dz;
        sum_dz_z += dz * cache.z[base + i];
      }
    }
    g.beta[c] = sum_g;
    g.gamma[c] = sum_gxhat;
    const double mean_dz = sum_dz / M, mean_dz_z = sum_dz_z / M;
    for (std::size_t n = 0; n < s.batch; ++n) {
      const std::size_t base = index4(s, n, c, 0);
      for (std::size_t i = 0; i < P; ++i) {
        const double dz = grad_y[base + i] * coeff;
        g.x[base + i] = cache.inv_std[c] * (dz - mean_dz - cache.z[base + i] * mean_dz_z);
      }
    }
  }
  return g;
}

}  // namespace bkn
