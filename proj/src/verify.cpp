#include "verify.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <random>

#include "error.hpp"

namespace bkn {

double relative_error(double analytic, double numeric) {
  const double denom = std::max({std::abs(analytic), std::abs(numeric), 1e-8});
  return std::abs(analytic - numeric) / denom;
}

std::vector<double> finite_diff(const ScalarFunction& f, std::span<const double> theta,
                                double step) {
  if (!(step > 0.0)) throw InvalidArgument("finite-difference step must be positive");
  std::vector<double> probe(theta.begin(), theta.end());
  std::vector<double> grad(theta.size());
  for (std::size_t i = 0; i < theta.size(); ++i) {
    const double orig = probe[i];
    probe[i] = orig + step;
    const double up = f(probe);
    probe[i] = orig - step;
    const double down = f(probe);
    probe[i] = orig;
    if (!std::isfinite(up) || !std::isfinite(down)) {
      throw NumericError("finite differences hit a non-finite function value at coordinate " +
                         std::to_string(i));
    }
    grad[i] = (up - down) / (2.0 * step);
  }
  return grad;
}

std::vector<double> richardson_diff(const ScalarFunction& f, std::span<const double> theta,
                                    double step) {
  const std::vector<double> coarse = finite_diff(f, theta, step);
  const std::vector<double> fine = finite_diff(f, theta, step / 2);
  std::vector<double> out(theta.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = (4.0 * fine[i] - coarse[i]) / 3.0;
  return out;
}

bool GradCheckReport::passed() const {
  return std::all_of(entries.begin(), entries.end(),
                     [](const GradCheckEntry& e) { return e.failing.empty(); });
}

double GradCheckReport::max_rel() const {
  double m = 0.0;
  for (const auto& e : entries) m = std::max(m, e.max_rel);
  return m;
}

const GradCheckEntry* GradCheckReport::find(const std::string& name) const {
  for (const auto& e : entries)
    if (e.name == name) return &e;
  return nullptr;
}

namespace {

struct Steps {
  double reference;
  double fine;    // 0 skips the diagnostic
  double coarse;  // 0 skips the diagnostic
};

GradCheckEntry compare_block(const std::string& name, std::span<const double> analytic,
                             const ScalarFunction& f, std::span<const double> theta,
                             Steps steps, double tolerance) {
  if (analytic.size() != theta.size()) {
    throw DimensionError("gradient block " + name + " has " + std::to_string(analytic.size()) +
                         " entries for " + std::to_string(theta.size()) + " coordinates");
  }
  GradCheckEntry e;
  e.name = name;
  e.coordinates = theta.size();
  const std::vector<double> reference = richardson_diff(f, theta, steps.reference);
  for (std::size_t i = 0; i < theta.size(); ++i) {
    const double rel = relative_error(analytic[i], reference[i]);
    e.max_rel = std::max(e.max_rel, rel);
    e.max_abs = std::max(e.max_abs, std::abs(analytic[i] - reference[i]));
    if (!(rel <= tolerance)) e.failing.push_back(i);
  }
  auto diagnose = [&](double step, double& max_rel, double& max_abs) {
    if (step <= 0.0) return;
    const std::vector<double> numeric = finite_diff(f, theta, step);
    for (std::size_t i = 0; i < theta.size(); ++i) {
      max_rel = std::max(max_rel, relative_error(analytic[i], numeric[i]));
      max_abs = std::max(max_abs, std::abs(analytic[i] - numeric[i]));
    }
  };
  diagnose(steps.fine, e.max_rel_fine, e.max_abs_fine);
  diagnose(steps.coarse, e.max_rel_coarse, e.max_abs_coarse);
  return e;
}

double weighted_sum(const Tensor& y, const Tensor& w) {
  double acc = 0.0;
  for (std::size_t i = 0; i < y.size(); ++i) acc += w[i] * y[i];
  return acc;
}

double abs_weighted_sum(const Tensor& y, const Tensor& w) {
  double acc = 0.0;
  for (std::size_t i = 0; i < y.size(); ++i) acc += std::abs(w[i] * y[i]);
  return acc;
}

struct LayerInstance {
  Tensor x;
  AffineParams affine;
  Tensor weights;
  std::optional<KalmanEstimate> prev;
  std::optional<KalmanLayerParams> params;
  MovingStatistics moving;
};

LayerInstance random_instance(const LayerCheckConfig& cfg, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> normal(0.0, 1.0);
  std::uniform_real_distribution<double> uni(0.0, 1.0);
  const std::size_t C = cfg.channels;
  LayerInstance inst;
  inst.x = Tensor({cfg.batch, C, cfg.height, cfg.width});
  std::vector<double> offset(C), spread(C);
  for (std::size_t c = 0; c < C; ++c) {
    offset[c] = 2.0 * normal(rng);
    spread[c] = 0.5 + 1.5 * uni(rng);
  }
  const std::size_t P = cfg.height * cfg.width;
  for (std::size_t n = 0; n < cfg.batch; ++n)
    for (std::size_t c = 0; c < C; ++c)
      for (std::size_t p = 0; p < P; ++p)
        inst.x[(n * C + c) * P + p] = offset[c] + spread[c] * normal(rng);
  inst.affine = AffineParams::identity(C);
  for (std::size_t c = 0; c < C; ++c) {
    inst.affine.gamma[c] = 0.5 + uni(rng);
    inst.affine.beta[c] = normal(rng);
  }
  inst.weights = Tensor(inst.x.shape());
  for (double& w : inst.weights.values()) w = normal(rng);

  inst.moving = MovingStatistics::initial(C, cfg.mode, 0.1);
  for (std::size_t c = 0; c < C; ++c) {
    inst.moving.mu[c] = offset[c] + 0.5 * normal(rng);
    const double var = spread[c] * spread[c] * (0.3 + 2.0 * uni(rng));
    if (cfg.mode == CovMode::diag) {
      inst.moving.sigma.values[c] = var;
    } else {
      inst.moving.sigma.values[c * C + c] = var;
    }
  }
  inst.moving.seeded = true;

  if (cfg.kind == NormKind::bkn && cfg.with_prior) {
    const std::size_t Cp = cfg.prev_channels;
    KalmanEstimate prev;
    prev.mean_post.resize(Cp);
    for (double& m : prev.mean_post) m = normal(rng);
    if (cfg.mode == CovMode::diag) {
      std::vector<double> d(Cp);
      for (double& v : d) v = 0.2 + 1.8 * uni(rng);
      prev.cov_post = Covariance::from_diagonal(CovMode::diag, d);
    } else {
      // B B^T / Cp + 0.1 I is symmetric positive definite.
      std::vector<double> b(Cp * Cp);
      for (double& v : b) v = normal(rng);
      prev.cov_post = Covariance::zeros(CovMode::full, Cp);
      for (std::size_t i = 0; i < Cp; ++i)
        for (std::size_t j = 0; j < Cp; ++j) {
          double acc = 0.0;
          for (std::size_t k = 0; k < Cp; ++k) acc += b[i * Cp + k] * b[j * Cp + k];
          prev.cov_post.values[i * Cp + j] = acc / static_cast<double>(Cp) + (i == j ? 0.1 : 0.0);
        }
    }
    prev.mean_prior = prev.mean_post;
    prev.cov_prior = prev.cov_post;
    inst.prev = std::move(prev);

    KalmanLayerParams params = KalmanLayerParams::initial(C, Cp);
    for (double& a : params.transition.values()) a = 0.7 * normal(rng);
    params.q_raw[0] = normal(rng);
    for (double& r : params.r_raw.values()) r = normal(rng);
    params.pinned_gain = cfg.pinned_gain;
    inst.params = std::move(params);
  }
  return inst;
}

/// BRN forward with r and d held fixed; written against the definitions
/// rather than the production kernel.
Tensor brn_frozen_forward(const Tensor& x, const AffineParams& affine,
                          const std::vector<double>& r, const std::vector<double>& d,
                          double eps) {
  const Shape4 s = Shape4::of(x);
  const std::size_t C = s.channels, P = s.spatial();
  const double M = static_cast<double>(s.effective_count());
  Tensor y(x.shape());
  for (std::size_t c = 0; c < C; ++c) {
    double mean = 0.0;
    for (std::size_t n = 0; n < s.batch; ++n)
      for (std::size_t p = 0; p < P; ++p) mean += x[(n * C + c) * P + p];
    mean /= M;
    double var = 0.0;
    for (std::size_t n = 0; n < s.batch; ++n)
      for (std::size_t p = 0; p < P; ++p) {
        const double dv = x[(n * C + c) * P + p] - mean;
        var += dv * dv;
      }
    var /= M;
    const double sd = std::sqrt(var + eps);
    for (std::size_t n = 0; n < s.batch; ++n)
      for (std::size_t p = 0; p < P; ++p) {
        const std::size_t i = (n * C + c) * P + p;
        y[i] = affine.gamma[c] * (r[c] * (x[i] - mean) / sd + d[c]) + affine.beta[c];
      }
  }
  return y;
}

}  // namespace

GradCheckReport check_layer_gradients(const LayerCheckConfig& cfg, std::uint64_t seed) {
  const std::size_t coords = cfg.batch * cfg.channels * cfg.height * cfg.width;
  if (coords == 0) throw InvalidArgument("gradient check needs a nonempty layer");
  if (coords > 5000) throw InvalidArgument("gradient check limited to 5k input coordinates");
  const LayerInstance inst = random_instance(cfg, seed);
  const NormEpsilon eps(1e-5);
  GradCheckReport report;
  report.tolerance = cfg.tolerance;

  auto run_block = [&](const std::string& name, const Tensor& analytic, const Tensor& theta,
                       const std::function<double(const Tensor&)>& loss) {
    const Shape shape = theta.shape();
    ScalarFunction f = [&](std::span<const double> v) {
      return loss(Tensor(shape, std::vector<double>(v.begin(), v.end())));
    };
    report.entries.push_back(compare_block(name, analytic.values(), f, theta.values(),
                                           Steps{cfg.reference_step, cfg.fine_step, cfg.coarse_step},
                                           cfg.tolerance));
  };

  switch (cfg.kind) {
    case NormKind::bn: {
      MovingStatistics scratch = inst.moving;
      BnTrainResult fwd = bn_forward_train(inst.x, inst.affine, scratch, eps, cfg.mode);
      NormGradients g = bn_backward(inst.weights, fwd.cache);
      report.loss_scale = abs_weighted_sum(fwd.y, inst.weights);
      auto loss = [&](const Tensor& x, const AffineParams& a) {
        return weighted_sum(bn_forward_eval_batchstats(x, a, eps), inst.weights);
      };
      run_block("x", g.x, inst.x, [&](const Tensor& v) { return loss(v, inst.affine); });
      run_block("gamma", g.gamma, inst.affine.gamma, [&](const Tensor& v) {
        return loss(inst.x, AffineParams{v, inst.affine.beta});
      });
      run_block("beta", g.beta, inst.affine.beta, [&](const Tensor& v) {
        return loss(inst.x, AffineParams{inst.affine.gamma, v});
      });
      break;
    }
    case NormKind::brn: {
      MovingStatistics scratch = inst.moving;
      BrnTrainResult fwd =
          brn_forward_train(inst.x, inst.affine, scratch, eps, cfg.brn_limits, cfg.mode);
      NormGradients g = brn_backward(inst.weights, fwd.cache);
      report.loss_scale = abs_weighted_sum(fwd.y, inst.weights);
      const std::vector<double> r = fwd.cache.r, d = fwd.cache.d;
      auto loss = [&](const Tensor& x, const AffineParams& a) {
        return weighted_sum(brn_frozen_forward(x, a, r, d, eps.value()), inst.weights);
      };
      run_block("x", g.x, inst.x, [&](const Tensor& v) { return loss(v, inst.affine); });
      run_block("gamma", g.gamma, inst.affine.gamma, [&](const Tensor& v) {
        return loss(inst.x, AffineParams{v, inst.affine.beta});
      });
      run_block("beta", g.beta, inst.affine.beta, [&](const Tensor& v) {
        return loss(inst.x, AffineParams{inst.affine.gamma, v});
      });
      break;
    }
    case NormKind::bkn: {
      const KalmanEstimate* prev = inst.prev ? &*inst.prev : nullptr;
      const KalmanLayerParams* params = inst.params ? &*inst.params : nullptr;
      MovingStatistics scratch = inst.moving;
      BknTrainResult fwd =
          bkn_forward_train(inst.x, prev, params, inst.affine, scratch, eps, cfg.mode);
      BknGradients g = bkn_backward(inst.weights, fwd.cache);
      report.loss_scale = abs_weighted_sum(fwd.y, inst.weights);
      auto loss = [&](const Tensor& x, const AffineParams& a, const KalmanLayerParams* kp) {
        return weighted_sum(bkn_forward_eval_batchstats(x, prev, kp, a, eps, cfg.mode).y,
                            inst.weights);
      };
      run_block("x", g.x, inst.x, [&](const Tensor& v) { return loss(v, inst.affine, params); });
      run_block("gamma", g.gamma, inst.affine.gamma, [&](const Tensor& v) {
        return loss(inst.x, AffineParams{v, inst.affine.beta}, params);
      });
      run_block("beta", g.beta, inst.affine.beta, [&](const Tensor& v) {
        return loss(inst.x, AffineParams{inst.affine.gamma, v}, params);
      });
      if (params) {
        auto with = [&](auto mutate) {
          return [&, mutate](const Tensor& v) {
            KalmanLayerParams kp = *params;
            mutate(kp, v);
            return loss(inst.x, inst.affine, &kp);
          };
        };
        run_block("q_raw", g.q_raw, params->q_raw,
                  with([](KalmanLayerParams& kp, const Tensor& v) { kp.q_raw = v; }));
        run_block("transition", g.transition, params->transition,
                  with([](KalmanLayerParams& kp, const Tensor& v) { kp.transition = v; }));
        run_block("r_raw", g.r_raw, params->r_raw,
                  with([](KalmanLayerParams& kp, const Tensor& v) { kp.r_raw = v; }));
      }
      break;
    }
  }
  return report;
}

namespace {

// Signs of every ReLU input in a train-mode pass.
std::vector<bool> relu_pattern(const ForwardPass& pass) {
  std::vector<bool> signs;
  for (const LayerCache& c : pass.caches)
    if (const auto* r = std::get_if<ReluCache>(&c))
      for (double v : r->input.values()) signs.push_back(v > 0.0);
  return signs;
}

}  // namespace

GradCheckReport check_network_gradients(Network& net, const Batch& batch, double tolerance,
                                        double reference_step) {
  GradCheckReport report;
  report.tolerance = tolerance;
  // Probes run on a copy so moving statistics of `net` see only the one
  // analytic pass.
  Network probe = net;
  net.zero_grad();
  ForwardPass pass = net.forward(batch.images, Mode::train);
  LossResult lr = softmax_cross_entropy(pass.logits, batch.labels);
  report.loss_scale = std::abs(lr.loss);
  net.backward(pass, lr.grad);
  probe.hold_side_inputs(pass);
  const std::vector<bool> base_pattern = relu_pattern(pass);

  std::vector<ParamRef> probe_params = probe.parameters();
  for (ParamRef& p : net.parameters()) {
    auto it = std::find_if(probe_params.begin(), probe_params.end(),
                           [&](const ParamRef& q) { return q.name == p.name; });
    Tensor& target = *it->value;
    GradCheckEntry e;
    e.name = p.name;
    e.coordinates = target.size();
    for (std::size_t i = 0; i < target.size(); ++i) {
      const double saved = target[i];
      bool crossed = false;
      auto f = [&](double v) {
        target[i] = v;
        ForwardPass fp = probe.forward(batch.images, Mode::train);
        crossed |= relu_pattern(fp) != base_pattern;
        return softmax_cross_entropy(fp.logits, batch.labels).loss;
      };
      auto central = [&](double h) { return (f(saved + h) - f(saved - h)) / (2.0 * h); };
      // A probe that flips a ReLU measures a different piece of the
      // piecewise-smooth loss; shrink the step until none does.
      double h = reference_step, numeric = 0.0;
      for (int attempt = 0; attempt < 4; ++attempt, h /= 10.0) {
        crossed = false;
        numeric = (4.0 * central(h / 2.0) - central(h)) / 3.0;
        if (!crossed) break;
      }
      target[i] = saved;
      const double rel = relative_error((*p.grad)[i], numeric);
      e.max_rel = std::max(e.max_rel, rel);
      e.max_abs = std::max(e.max_abs, std::abs((*p.grad)[i] - numeric));
      if (!(rel <= tolerance)) e.failing.push_back(i);
    }
    report.entries.push_back(std::move(e));
  }
  return report;
}

void write_gradcheck_csv(const std::filesystem::path& path, const GradCheckReport& report) {
  std::ofstream os(path, std::ios::trunc);
  if (!os) throw IoError("cannot write " + path.string());
  os << "parameter,coordinates,max_rel,max_abs,max_rel_step_1e-6,max_rel_step_1e-5,failing\n";
  os.precision(6);
  for (const auto& e : report.entries) {
    os << e.name << ',' << e.coordinates << ',' << std::scientific << e.max_rel << ','
       << e.max_abs << ',' << e.max_rel_fine << ',' << e.max_rel_coarse << ','
       << std::defaultfloat << e.failing.size() << '\n';
  }
  if (!os) throw IoError("failed writing " + path.string());
}

// ---------------------------------------------------------------------------
// Oracle

namespace {

/// Neumaier-compensated accumulator.
class CompensatedSum {
 public:
  void add(Extended v) {
    const Extended t = sum_ + v;
    if (std::fabs(sum_) >= std::fabs(v)) {
      comp_ += (sum_ - t) + v;
    } else {
      comp_ += (v - t) + sum_;
    }
    sum_ = t;
  }
  Extended value() const { return sum_ + comp_; }

 private:
  Extended sum_ = 0, comp_ = 0;
};

std::vector<Extended> dense_of(const Covariance& c) {
  std::vector<Extended> out(c.dim * c.dim, 0);
  for (std::size_t i = 0; i < c.dim; ++i)
    for (std::size_t j = 0; j < c.dim; ++j) out[i * c.dim + j] = c.entry(i, j);
  return out;
}

void keep_diagonal(std::vector<Extended>& cov, std::size_t dim) {
  for (std::size_t i = 0; i < dim; ++i)
    for (std::size_t j = 0; j < dim; ++j)
      if (i != j) cov[i * dim + j] = 0;
}

OracleEstimate predict_ext(const std::vector<Extended>& mean, const std::vector<Extended>& cov,
                           const Tensor& A, const std::vector<double>& r_raw) {
  const std::size_t C = A.dim(0), Cp = A.dim(1);
  OracleEstimate out;
  out.mean.assign(C, 0);
  out.cov.assign(C * C, 0);
  for (std::size_t i = 0; i < C; ++i) {
    CompensatedSum s;
    for (std::size_t j = 0; j < Cp; ++j) s.add(static_cast<Extended>(A.at(i, j)) * mean[j]);
    out.mean[i] = s.value();
  }
  for (std::size_t i = 0; i < C; ++i)
    for (std::size_t k = 0; k < C; ++k) {
      CompensatedSum s;
      for (std::size_t j = 0; j < Cp; ++j)
        for (std::size_t l = 0; l < Cp; ++l)
          s.add(static_cast<Extended>(A.at(i, j)) * cov[j * Cp + l] * A.at(k, l));
      out.cov[i * C + k] = s.value();
    }
  for (std::size_t i = 0; i < C; ++i) {
    const Extended r = std::log1p(std::exp(static_cast<Extended>(r_raw[i])));
    out.cov[i * C + i] += r;
  }
  return out;
}

OracleEstimate fuse_ext(const OracleEstimate& prior, const std::vector<Extended>& obs_mean,
                        const std::vector<Extended>& obs_cov, Extended q) {
  const std::size_t C = prior.mean.size();
  const Extended p = 1 - q;
  OracleEstimate out;
  out.mean.resize(C);
  out.cov.resize(C * C);
  for (std::size_t i = 0; i < C; ++i) out.mean[i] = p * prior.mean[i] + q * obs_mean[i];
  for (std::size_t i = 0; i < C; ++i)
    for (std::size_t j = 0; j < C; ++j) {
      const Extended di = obs_mean[i] - prior.mean[i];
      const Extended dj = obs_mean[j] - prior.mean[j];
      out.cov[i * C + j] = p * prior.cov[i * C + j] + q * obs_cov[i * C + j] + p * q * di * dj;
    }
  return out;
}

}  // namespace

OracleEstimate oracle_predict(const std::vector<double>& prev_mean, const Covariance& prev_cov,
                              const Tensor& transition, const std::vector<double>& r_raw) {
  std::vector<Extended> mean(prev_mean.begin(), prev_mean.end());
  OracleEstimate out = predict_ext(mean, dense_of(prev_cov), transition, r_raw);
  if (prev_cov.mode == CovMode::diag) keep_diagonal(out.cov, transition.dim(0));
  return out;
}

OracleEstimate oracle_fuse(const std::vector<double>& prior_mean, const Covariance& prior_cov,
                           const std::vector<double>& obs_mean, const Covariance& obs_cov,
                           Extended q) {
  OracleEstimate prior{std::vector<Extended>(prior_mean.begin(), prior_mean.end()),
                       dense_of(prior_cov)};
  OracleEstimate out = fuse_ext(prior, std::vector<Extended>(obs_mean.begin(), obs_mean.end()),
                                dense_of(obs_cov), q);
  if (prior_cov.mode == CovMode::diag) keep_diagonal(out.cov, prior_mean.size());
  return out;
}

std::vector<OracleLayer> statistics_oracle(const std::vector<OracleChainLayer>& chain,
                                           CovMode mode) {
  std::vector<OracleLayer> out;
  for (std::size_t k = 0; k < chain.size(); ++k) {
    const Tensor& x = chain[k].x;
    const Shape4 s = Shape4::of(x);
    const std::size_t C = s.channels, P = s.spatial();
    const Extended M = static_cast<Extended>(s.effective_count());
    auto at = [&](std::size_t n, std::size_t c, std::size_t p) -> Extended {
      return x[(n * C + c) * P + p];
    };
    OracleLayer layer;
    layer.batch_mean.resize(C);
    for (std::size_t c = 0; c < C; ++c) {
      CompensatedSum sum;
      for (std::size_t n = 0; n < s.batch; ++n)
        for (std::size_t p = 0; p < P; ++p) sum.add(at(n, c, p));
      layer.batch_mean[c] = sum.value() / M;
    }
    layer.batch_cov.assign(C * C, 0);
    for (std::size_t i = 0; i < C; ++i)
      for (std::size_t j = 0; j < C; ++j) {
        CompensatedSum sum;
        for (std::size_t n = 0; n < s.batch; ++n)
          for (std::size_t p = 0; p < P; ++p)
            sum.add((at(n, i, p) - layer.batch_mean[i]) * (at(n, j, p) - layer.batch_mean[j]));
        layer.batch_cov[i * C + j] = sum.value() / M;
      }
    if (mode == CovMode::diag) keep_diagonal(layer.batch_cov, C);

    if (k == 0 || !chain[k].params) {
      layer.prior = OracleEstimate{layer.batch_mean, layer.batch_cov};
      layer.post = layer.prior;
    } else {
      const KalmanLayerParams& kp = *chain[k].params;
      const OracleLayer& prev = out.back();
      layer.prior = predict_ext(prev.post.mean, prev.post.cov, kp.transition, kp.r_raw.storage());
      if (mode == CovMode::diag) keep_diagonal(layer.prior.cov, C);
      const Extended q = kp.pinned_gain
                             ? static_cast<Extended>(*kp.pinned_gain)
                             : 1 / (1 + std::exp(-static_cast<Extended>(kp.q_raw[0])));
      layer.post = fuse_ext(layer.prior, layer.batch_mean, layer.batch_cov, q);
      if (mode == CovMode::diag) keep_diagonal(layer.post.cov, C);

      // Second route: E[x^2] - mu^2 for the mixture p*prior + q*observation.
      const Extended p = 1 - q;
      Extended residual = 0;
      for (std::size_t i = 0; i < C; ++i)
        for (std::size_t j = 0; j < C; ++j) {
          const Extended second_moment =
              p * (layer.prior.cov[i * C + j] + layer.prior.mean[i] * layer.prior.mean[j]) +
              q * (layer.batch_cov[i * C + j] + layer.batch_mean[i] * layer.batch_mean[j]);
          Extended alt = second_moment - layer.post.mean[i] * layer.post.mean[j];
          if (mode == CovMode::diag && i != j) alt = 0;
          residual = std::max(residual, std::fabs(alt - layer.post.cov[i * C + j]));
        }
      layer.identity_residual = residual;
    }
    out.push_back(std::move(layer));
  }
  return out;
}

// ---------------------------------------------------------------------------
// Variance gap

VarianceGapReport variance_gap(const Network& net, const Dataset& ds, std::size_t stats_batch) {
  if (stats_batch == 0 || stats_batch > ds.size()) {
    throw InvalidArgument("variance gap batch size must be in [1, dataset size]");
  }
  for (const Layer& l : net.layers()) {
    if (const auto* n = std::get_if<NormLayer>(&l); n && !n->moving.seeded) {
      throw InvalidArgument("variance gap needs populated moving statistics");
    }
  }
  const std::size_t batches = ds.size() / stats_batch;
  VarianceGapReport report;
  for (std::size_t b = 0; b < batches; ++b) {
    const Batch batch = slice(ds, b * stats_batch, stats_batch);
    std::vector<NormObservation> obs;
    net.evaluate(batch.images, Mode::eval_batchstats, &obs);
    if (b == 0) {
      for (const NormObservation& o : obs) {
        LayerVarianceGap g;
        g.layer_index = o.layer_index;
        g.channels = o.batch_var.size();
        g.batches = batches;
        g.gap.assign(g.channels * batches, 0.0);
        report.layers.push_back(std::move(g));
      }
    }
    for (std::size_t li = 0; li < obs.size(); ++li) {
      LayerVarianceGap& g = report.layers[li];
      for (std::size_t c = 0; c < g.channels; ++c) {
        g.gap[c * batches + b] = std::abs(obs[li].batch_var[c] - obs[li].moving_var[c]);
      }
    }
  }
  double total = 0.0;
  std::size_t count = 0;
  for (LayerVarianceGap& g : report.layers) {
    double sum = 0.0;
    for (double v : g.gap) {
      sum += v;
      g.max = std::max(g.max, v);
    }
    g.mean = g.gap.empty() ? 0.0 : sum / static_cast<double>(g.gap.size());
    total += sum;
    count += g.gap.size();
    report.max = std::max(report.max, g.max);
  }
  report.mean = count ? total / static_cast<double>(count) : 0.0;
  return report;
}

void write_variance_gap_csv(const std::filesystem::path& path, const VarianceGapReport& report) {
  std::ofstream os(path, std::ios::trunc);
  if (!os) throw IoError("cannot write " + path.string());
  os.precision(10);
  os << "# mean=" << report.mean << " max=" << report.max << '\n';
  std::size_t batches = report.layers.empty() ? 0 : report.layers.front().batches;
  os << "layer,channel";
  for (std::size_t b = 0; b < batches; ++b) os << ",batch" << b;
  os << '\n';
  for (const LayerVarianceGap& g : report.layers) {
    for (std::size_t c = 0; c < g.channels; ++c) {
      os << g.layer_index << ',' << c;
      for (std::size_t b = 0; b < g.batches; ++b) os << ',' << g.gap[c * g.batches + b];
      os << '\n';
    }
  }
  if (!os) throw IoError("failed writing " + path.string());
}

}  // namespace bkn
