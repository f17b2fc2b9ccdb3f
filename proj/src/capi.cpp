#include "bkn/bkn.h"

#include <algorithm>
#include <cstdio>
#include <cstdlib>
#include <cstring>
#include <exception>
#include <memory>
#include <new>
#include <optional>
#include <sstream>
#include <string>

#include "error.hpp"
#include "experiment.hpp"
#include "norm.hpp"
#include "verify.hpp"

struct bkn_config_s {
  bkn::ExperimentConfig cfg;
};

struct bkn_norm_layer_s {
  bkn::NormKind kind = bkn::NormKind::bkn;
  std::size_t channels = 0;
  bkn::CovMode mode = bkn::CovMode::diag;
  bkn::NormEpsilon eps;
  bkn::AffineParams affine;
  std::optional<bkn::KalmanLayerParams> kalman;
  bkn::MovingStatistics moving;
  bkn::BrnLimits limits;

  std::optional<bkn::KalmanEstimate> estimate;
  std::optional<bkn::NormCache> cache;
  std::optional<bkn::BrnCache> brn_cache;
  bkn::Tensor grad_gamma, grad_beta;
  double grad_q_raw = 0.0;
};

namespace {

thread_local std::string g_last_error;

bkn_status status_of(bkn::ErrorKind kind) {
  switch (kind) {
    case bkn::ErrorKind::config: return BKN_ERR_CONFIG;
    case bkn::ErrorKind::numeric: return BKN_ERR_NUMERIC;
    case bkn::ErrorKind::io: return BKN_ERR_IO;
    case bkn::ErrorKind::dimension: return BKN_ERR_DIMENSION;
    case bkn::ErrorKind::invalid_argument: return BKN_ERR_INVALID_ARGUMENT;
  }
  return BKN_ERR_INTERNAL;
}

template <typename F>
bkn_status guarded(F&& body) {
  try {
    body();
    return BKN_OK;
  } catch (const bkn::Error& e) {
    g_last_error = e.what();
    return status_of(e.kind());
  } catch (const std::bad_alloc&) {
    g_last_error = "out of memory";
    return BKN_ERR_INTERNAL;
  } catch (const std::exception& e) {
    g_last_error = e.what();
    return BKN_ERR_INTERNAL;
  }
}

void require(const void* p, const char* what) {
  if (!p) throw bkn::InvalidArgument(std::string(what) + " must not be NULL");
}

char* dup_string(const std::string& s) {
  char* out = static_cast<char*>(std::malloc(s.size() + 1));
  if (!out) throw std::bad_alloc();
  std::memcpy(out, s.c_str(), s.size() + 1);
  return out;
}

bkn::Tensor input_tensor(const std::size_t shape[4], const double* x) {
  const bkn::Shape s{shape[0], shape[1], shape[2], shape[3]};
  const std::size_t n = bkn::shape_volume(s);
  return bkn::Tensor(s, std::vector<double>(x, x + n));
}

void copy_out(const bkn::Tensor& t, double* dst) {
  std::copy(t.values().begin(), t.values().end(), dst);
}

const bkn::KalmanEstimate* predecessor_estimate(const bkn_norm_layer_s& layer,
                                                const bkn_norm_layer_s* prev) {
  if (!layer.kalman) return nullptr;
  if (!prev || !prev->estimate) {
    throw bkn::InvalidArgument(
        "a BKN layer with a predecessor needs the predecessor's forward output first");
  }
  return &*prev->estimate;
}

bkn::KalmanEstimate estimate_from_stats(const bkn::BatchStatistics& st) {
  return bkn::KalmanEstimate{st.mean, st.cov, st.mean, st.cov};
}

}  // namespace

extern "C" {

const char* bkn_version(void) { return "1.0.0"; }

const char* bkn_last_error(void) { return g_last_error.c_str(); }

void bkn_string_free(char* s) { std::free(s); }

// ---------------------------------------------------------------------------
// Configuration

bkn_status bkn_config_new(bkn_config* out) {
  return guarded([&] {
    require(out, "out");
    *out = new bkn_config_s{};
  });
}

bkn_status bkn_config_from_preset(const char* name, bkn_config* out) {
  return guarded([&] {
    require(name, "name");
    require(out, "out");
    *out = new bkn_config_s{bkn::preset(name)};
  });
}

bkn_status bkn_config_load(bkn_config cfg, const char* path) {
  return guarded([&] {
    require(cfg, "cfg");
    require(path, "path");
    cfg->cfg = bkn::load_config_file(path, cfg->cfg);
  });
}

bkn_status bkn_config_set(bkn_config cfg, const char* key, const char* value) {
  return guarded([&] {
    require(cfg, "cfg");
    require(key, "key");
    require(value, "value");
    bkn::set_config_value(cfg->cfg, key, value);
  });
}

bkn_status bkn_config_get(bkn_config cfg, const char* key, char** value) {
  return guarded([&] {
    require(cfg, "cfg");
    require(key, "key");
    require(value, "value");
    *value = dup_string(bkn::get_config_value(cfg->cfg, key));
  });
}

bkn_status bkn_config_serialize(bkn_config cfg, char** text) {
  return guarded([&] {
    require(cfg, "cfg");
    require(text, "text");
    *text = dup_string(bkn::serialize_config(cfg->cfg));
  });
}

bkn_status bkn_config_hash(bkn_config cfg, char** hash) {
  return guarded([&] {
    require(cfg, "cfg");
    require(hash, "hash");
    *hash = dup_string(bkn::config_hash(cfg->cfg));
  });
}

bkn_status bkn_config_validate(bkn_config cfg) {
  return guarded([&] {
    require(cfg, "cfg");
    bkn::validate_config(cfg->cfg);
  });
}

void bkn_config_free(bkn_config cfg) { delete cfg; }

// ---------------------------------------------------------------------------
// Runs

bkn_status bkn_run_experiment(bkn_config cfg, bkn_run_summary* summary) {
  return guarded([&] {
    require(cfg, "cfg");
    const bkn::RunSummary s = bkn::run_experiment(cfg->cfg);
    if (summary) {
      const bkn::MetricsRow& last = s.rows.back();
      *summary = bkn_run_summary{s.steps,
                                 s.examples,
                                 s.passes,
                                 last.train_loss,
                                 last.eval_acc_moving,
                                 last.eval_acc_batch,
                                 s.train_seconds,
                                 s.examples_per_sec};
    }
  });
}

bkn_status bkn_compare_runs(const char* const* run_dirs, size_t run_count,
                            const double* thresholds, size_t threshold_count,
                            const char* csv_path, char** text) {
  return guarded([&] {
    require(run_dirs, "run_dirs");
    std::vector<std::filesystem::path> dirs;
    for (size_t i = 0; i < run_count; ++i) {
      require(run_dirs[i], "run directory");
      dirs.emplace_back(run_dirs[i]);
    }
    bkn::Comparison cmp =
        thresholds ? bkn::compare_runs(dirs, std::vector<double>(thresholds,
                                                                 thresholds + threshold_count))
                   : bkn::compare_runs(dirs);
    if (csv_path) {
      std::FILE* f = std::fopen(csv_path, "wb");
      if (!f) throw bkn::IoError(std::string("cannot open ") + csv_path + " for writing");
      const bool ok = std::fwrite(cmp.csv.data(), 1, cmp.csv.size(), f) == cmp.csv.size();
      if (std::fclose(f) != 0 || !ok) {
        throw bkn::IoError(std::string("failed writing ") + csv_path);
      }
    }
    if (text) *text = dup_string(cmp.text);
  });
}

bkn_status bkn_gradcheck(const char* layer, uint64_t seed, const char* csv_path,
                         bkn_gradcheck_summary* summary, char** text) {
  return guarded([&] {
    require(layer, "layer");
    bkn::LayerCheckConfig cfg;
    try {
      cfg.kind = bkn::parse_norm_kind(layer);
    } catch (const bkn::Error& e) {
      throw bkn::InvalidArgument(e.what());
    }
    const bkn::GradCheckReport report = bkn::check_layer_gradients(cfg, seed);
    if (csv_path) bkn::write_gradcheck_csv(csv_path, report);
    if (summary) {
      *summary = bkn_gradcheck_summary{report.passed() ? 1 : 0, report.max_rel(),
                                       report.tolerance, report.entries.size()};
    }
    if (text) {
      std::ostringstream os;
      char line[160];
      std::snprintf(line, sizeof line, "%-12s %6s %12s %12s %12s %12s\n", "parameter", "coords",
                    "max_rel", "max_abs", "rel@1e-6", "rel@1e-5");
      os << line;
      for (const auto& e : report.entries) {
        std::snprintf(line, sizeof line, "%-12s %6zu %12.3e %12.3e %12.3e %12.3e%s\n",
                      e.name.c_str(), e.coordinates, e.max_rel, e.max_abs, e.max_rel_fine,
                      e.max_rel_coarse, e.failing.empty() ? "" : "  FAIL");
        os << line;
      }
      *text = dup_string(os.str());
    }
  });
}

bkn_status bkn_vargap(const char* run_dir, bkn_vargap_summary* summary) {
  return guarded([&] {
    require(run_dir, "run_dir");
    const bkn::VarianceGapReport r = bkn::run_variance_gap(run_dir);
    if (summary) {
      *summary = bkn_vargap_summary{r.mean, r.max, r.layers.size(),
                                    r.layers.empty() ? 0 : r.layers.front().batches};
    }
  });
}

// ---------------------------------------------------------------------------
// Single layers

bkn_status bkn_norm_layer_new(const char* kind, size_t channels, size_t prev_channels,
                              int full_covariance, double alpha, double eps,
                              bkn_norm_layer* out) {
  return guarded([&] {
    require(kind, "kind");
    require(out, "out");
    if (channels == 0) throw bkn::InvalidArgument("a layer needs at least one channel");
    auto layer = std::make_unique<bkn_norm_layer_s>();
    try {
      layer->kind = bkn::parse_norm_kind(kind);
    } catch (const bkn::Error& e) {
      throw bkn::InvalidArgument(e.what());
    }
    layer->channels = channels;
    layer->mode = full_covariance ? bkn::CovMode::full : bkn::CovMode::diag;
    if (layer->mode == bkn::CovMode::full &&
        (channels > bkn::kMaxFullCovChannels || prev_channels > bkn::kMaxFullCovChannels)) {
      throw bkn::InvalidArgument("full covariance mode supports at most " +
                                 std::to_string(bkn::kMaxFullCovChannels) + " channels");
    }
    layer->eps = bkn::NormEpsilon(eps);
    layer->affine = bkn::AffineParams::identity(channels);
    layer->moving = bkn::MovingStatistics::initial(channels, layer->mode, alpha);
    if (layer->kind == bkn::NormKind::bkn && prev_channels > 0) {
      layer->kalman = bkn::KalmanLayerParams::initial(channels, prev_channels);
    }
    *out = layer.release();
  });
}

void bkn_norm_layer_free(bkn_norm_layer layer) { delete layer; }

bkn_status bkn_norm_layer_forward(bkn_norm_layer layer, bkn_norm_layer prev, bkn_mode mode,
                                  const size_t shape[4], const double* x, double* y) {
  return guarded([&] {
    require(layer, "layer");
    require(shape, "shape");
    require(x, "x");
    require(y, "y");
    if (shape[1] != layer->channels) {
      throw bkn::DimensionError("input has " + std::to_string(shape[1]) +
                                " channels, layer has " + std::to_string(layer->channels));
    }
    const bkn::Tensor in = input_tensor(shape, x);
    switch (mode) {
      case BKN_MODE_TRAIN: {
        if (layer->kind == bkn::NormKind::brn) {
          bkn::BrnTrainResult r = bkn::brn_forward_train(in, layer->affine, layer->moving,
                                                         layer->eps, layer->limits, layer->mode);
          copy_out(r.y, y);
          layer->estimate = estimate_from_stats(r.stats);
          layer->brn_cache = std::move(r.cache);
          layer->cache.reset();
        } else {
          const bkn::KalmanEstimate* p = predecessor_estimate(*layer, prev);
          bkn::BknTrainResult r =
              bkn::bkn_forward_train(in, p, layer->kalman ? &*layer->kalman : nullptr,
                                     layer->affine, layer->moving, layer->eps, layer->mode);
          copy_out(r.y, y);
          layer->estimate = std::move(r.estimate);
          layer->cache = std::move(r.cache);
          layer->brn_cache.reset();
        }
        break;
      }
      case BKN_MODE_INFER:
        copy_out(bkn::bkn_forward_infer(in, layer->moving, layer->affine, layer->eps), y);
        break;
      case BKN_MODE_EVAL_BATCHSTATS: {
        const bkn::KalmanEstimate* p = predecessor_estimate(*layer, prev);
        bkn::BknEvalResult r = bkn::bkn_forward_eval_batchstats(
            in, p, layer->kalman ? &*layer->kalman : nullptr, layer->affine, layer->eps,
            layer->mode);
        copy_out(r.y, y);
        layer->estimate = std::move(r.estimate);
        break;
      }
      default:
        throw bkn::InvalidArgument("unknown mode " + std::to_string(static_cast<int>(mode)));
    }
  });
}

bkn_status bkn_norm_layer_backward(bkn_norm_layer layer, const double* grad_y, double* grad_x) {
  return guarded([&] {
    require(layer, "layer");
    require(grad_y, "grad_y");
    require(grad_x, "grad_x");
    if (layer->brn_cache) {
      const bkn::BrnCache& c = *layer->brn_cache;
      const bkn::Tensor g(c.z.shape(),
                          std::vector<double>(grad_y, grad_y + c.z.size()));
      bkn::NormGradients r = bkn::brn_backward(g, c);
      copy_out(r.x, grad_x);
      layer->grad_gamma = std::move(r.gamma);
      layer->grad_beta = std::move(r.beta);
      layer->grad_q_raw = 0.0;
      return;
    }
    if (!layer->cache) throw bkn::InvalidArgument("backward needs a train-mode forward first");
    const bkn::NormCache& c = *layer->cache;
    const bkn::Tensor g(c.x.shape(), std::vector<double>(grad_y, grad_y + c.x.size()));
    bkn::BknGradients r = bkn::bkn_backward(g, c);
    copy_out(r.x, grad_x);
    layer->grad_gamma = std::move(r.gamma);
    layer->grad_beta = std::move(r.beta);
    layer->grad_q_raw = r.q_raw.empty() ? 0.0 : r.q_raw[0];
  });
}

bkn_status bkn_norm_layer_set_gain(bkn_norm_layer layer, double q) {
  return guarded([&] {
    require(layer, "layer");
    if (!layer->kalman) throw bkn::InvalidArgument("only a BKN layer with a predecessor has a gain");
    if (!(q > 0.0 && q <= 1.0)) throw bkn::InvalidArgument("gain must lie in (0, 1]");
    layer->kalman->pinned_gain = q;
  });
}

bkn_status bkn_norm_layer_gain(bkn_norm_layer layer, double* q) {
  return guarded([&] {
    require(layer, "layer");
    require(q, "q");
    *q = layer->kalman ? layer->kalman->gain() : 1.0;
  });
}

bkn_status bkn_norm_layer_estimate(bkn_norm_layer layer, double* mean, double* var,
                                   size_t channels) {
  return guarded([&] {
    require(layer, "layer");
    if (channels != layer->channels) throw bkn::DimensionError("channel count mismatch");
    if (!layer->estimate) throw bkn::InvalidArgument("no forward call yet");
    const std::vector<double> d = layer->estimate->cov_post.diagonal();
    for (size_t c = 0; c < channels; ++c) {
      if (mean) mean[c] = layer->estimate->mean_post[c];
      if (var) var[c] = d[c];
    }
  });
}

bkn_status bkn_norm_layer_moving(bkn_norm_layer layer, double* mean, double* var,
                                 size_t channels) {
  return guarded([&] {
    require(layer, "layer");
    if (channels != layer->channels) throw bkn::DimensionError("channel count mismatch");
    const std::vector<double> d = layer->moving.sigma.diagonal();
    for (size_t c = 0; c < channels; ++c) {
      if (mean) mean[c] = layer->moving.mu[c];
      if (var) var[c] = d[c];
    }
  });
}

bkn_status bkn_norm_layer_param_grads(bkn_norm_layer layer, double* grad_gamma,
                                      double* grad_beta, double* grad_q_raw, size_t channels) {
  return guarded([&] {
    require(layer, "layer");
    if (channels != layer->channels) throw bkn::DimensionError("channel count mismatch");
    if (layer->grad_gamma.empty()) throw bkn::InvalidArgument("no backward call yet");
    if (grad_gamma) copy_out(layer->grad_gamma, grad_gamma);
    if (grad_beta) copy_out(layer->grad_beta, grad_beta);
    if (grad_q_raw) *grad_q_raw = layer->grad_q_raw;
  });
}

}  // extern "C"
