#include "net.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <random>

#include "error.hpp"

namespace bkn {

const char* to_string(NormKind kind) {
  switch (kind) {
    case NormKind::bn: return "bn";
    case NormKind::brn: return "brn";
    case NormKind::bkn: return "bkn";
  }
  return "?";
}

NormKind parse_norm_kind(const std::string& s) {
  if (s == "bn") return NormKind::bn;
  if (s == "brn") return NormKind::brn;
  if (s == "bkn") return NormKind::bkn;
  throw ConfigError("unknown normalizer '" + s + "' (expected bn, brn or bkn)");
}

namespace {

template <class... Ts>
struct Overloaded : Ts... {
  using Ts::operator()...;
};
template <class... Ts>
Overloaded(Ts...) -> Overloaded<Ts...>;

[[noreturn]] void rethrow_at_layer(const Error& e, std::size_t index) {
  const std::string what = "layer " + std::to_string(index) + ": " + e.what();
  switch (e.kind()) {
    case ErrorKind::dimension: throw DimensionError(what);
    case ErrorKind::numeric: throw NumericError(what);
    case ErrorKind::config: throw ConfigError(what);
    case ErrorKind::io: throw IoError(what);
    case ErrorKind::invalid_argument: throw InvalidArgument(what);
  }
  throw InvalidArgument(what);
}

std::string param_prefix(std::size_t index, const char* kind) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%02zu.%s.", index, kind);
  return buf;
}

// --- dense -----------------------------------------------------------------

Tensor dense_forward(const DenseLayer& layer, const Tensor& x, Tensor* flat_out) {
  if (x.rank() < 2) throw DimensionError("dense layer expects a batched input");
  const std::size_t batch = x.dim(0);
  const std::size_t in = batch ? x.size() / batch : 0;
  if (in != layer.in) {
    throw DimensionError("dense layer expects " + std::to_string(layer.in) +
                         " features, got input " + shape_string(x.shape()));
  }
  Tensor flat = x.reshaped({batch, in});
  Tensor y({batch, layer.out});
  kernel::gemm_accumulate(false, false, batch, layer.out, in, flat.values().data(),
                          layer.weight.values().data(), y.values().data());
  for (std::size_t b = 0; b < batch; ++b)
    for (std::size_t o = 0; o < layer.out; ++o) y[b * layer.out + o] += layer.bias[o];
  if (flat_out) *flat_out = std::move(flat);
  return y;
}

Tensor dense_backward(DenseLayer& layer, const DenseCache& cache, const Tensor& g) {
  const std::size_t batch = cache.input.dim(0);
  kernel::gemm_accumulate(true, false, layer.in, layer.out, batch,
                          cache.input.values().data(), g.values().data(),
                          layer.grad_weight.values().data());
  for (std::size_t b = 0; b < batch; ++b)
    for (std::size_t o = 0; o < layer.out; ++o) layer.grad_bias[o] += g[b * layer.out + o];
  Tensor gx({batch, layer.in});
  kernel::gemm_accumulate(false, true, batch, layer.in, layer.out, g.values().data(),
                          layer.weight.values().data(), gx.values().data());
  return gx.reshaped(cache.input_shape);
}

// --- conv3x3 ---------------------------------------------------------------

Tensor im2col(const Tensor& x, std::size_t in) {
  const std::size_t N = x.dim(0), H = x.dim(2), W = x.dim(3);
  const std::size_t HW = H * W, NP = N * HW;
  Tensor cols({in * 9, NP});
  for (std::size_t ci = 0; ci < in; ++ci)
    for (std::size_t ky = 0; ky < 3; ++ky)
      for (std::size_t kx = 0; kx < 3; ++kx) {
        double* row = cols.values().data() + (ci * 9 + ky * 3 + kx) * NP;
        for (std::size_t n = 0; n < N; ++n) {
          const double* plane = x.values().data() + (n * in + ci) * HW;
          for (std::size_t y = 0; y < H; ++y) {
            const long yy = static_cast<long>(y + ky) - 1;
            for (std::size_t xx = 0; xx < W; ++xx) {
              const long xs = static_cast<long>(xx + kx) - 1;
              const bool inside = yy >= 0 && yy < static_cast<long>(H) && xs >= 0 &&
                                  xs < static_cast<long>(W);
              row[n * HW + y * W + xx] = inside ? plane[yy * W + xs] : 0.0;
            }
          }
        }
      }
  return cols;
}

Tensor col2im(const Tensor& cols, const Shape& shape) {
  const std::size_t N = shape[0], in = shape[1], H = shape[2], W = shape[3];
  const std::size_t HW = H * W, NP = N * HW;
  Tensor x(shape);
  for (std::size_t ci = 0; ci < in; ++ci)
    for (std::size_t ky = 0; ky < 3; ++ky)
      for (std::size_t kx = 0; kx < 3; ++kx) {
        const double* row = cols.values().data() + (ci * 9 + ky * 3 + kx) * NP;
        for (std::size_t n = 0; n < N; ++n) {
          double* plane = x.values().data() + (n * in + ci) * HW;
          for (std::size_t y = 0; y < H; ++y) {
            const long yy = static_cast<long>(y + ky) - 1;
            if (yy < 0 || yy >= static_cast<long>(H)) continue;
            for (std::size_t xx = 0; xx < W; ++xx) {
              const long xs = static_cast<long>(xx + kx) - 1;
              if (xs < 0 || xs >= static_cast<long>(W)) continue;
              plane[yy * W + xs] += row[n * HW + y * W + xx];
            }
          }
        }
      }
  return x;
}

Tensor conv_forward(const Conv3x3Layer& layer, const Tensor& x, Tensor* cols_out) {
  if (x.rank() != 4 || x.dim(1) != layer.in) {
    throw DimensionError("conv3x3 expects [N," + std::to_string(layer.in) +
                         ",H,W], got " + shape_string(x.shape()));
  }
  const std::size_t N = x.dim(0), H = x.dim(2), W = x.dim(3);
  const std::size_t HW = H * W, NP = N * HW;
  Tensor cols = im2col(x, layer.in);
  std::vector<double> ymat(layer.out * NP);
  for (std::size_t co = 0; co < layer.out; ++co)
    std::fill_n(ymat.begin() + co * NP, NP, layer.bias[co]);
  kernel::gemm_accumulate(false, false, layer.out, NP, layer.in * 9,
                          layer.weight.values().data(), cols.values().data(), ymat.data());
  Tensor y({N, layer.out, H, W});
  for (std::size_t n = 0; n < N; ++n)
    for (std::size_t co = 0; co < layer.out; ++co)
      std::copy_n(ymat.begin() + co * NP + n * HW, HW,
                  y.values().begin() + (n * layer.out + co) * HW);
  if (cols_out) *cols_out = std::move(cols);
  return y;
}

Tensor conv_backward(Conv3x3Layer& layer, const ConvCache& cache, const Tensor& g) {
  const std::size_t N = cache.input_shape[0], H = cache.input_shape[2], W = cache.input_shape[3];
  const std::size_t HW = H * W, NP = N * HW;
  std::vector<double> dy(layer.out * NP);
  for (std::size_t n = 0; n < N; ++n)
    for (std::size_t co = 0; co < layer.out; ++co)
      std::copy_n(g.values().begin() + (n * layer.out + co) * HW, HW,
                  dy.begin() + co * NP + n * HW);
  kernel::gemm_accumulate(false, true, layer.out, layer.in * 9, NP, dy.data(),
                          cache.columns.values().data(), layer.grad_weight.values().data());
  for (std::size_t co = 0; co < layer.out; ++co) {
    double acc = 0.0;
    for (std::size_t i = 0; i < NP; ++i) acc += dy[co * NP + i];
    layer.grad_bias[co] += acc;
  }
  Tensor dcols({layer.in * 9, NP});
  kernel::gemm_accumulate(true, false, layer.in * 9, NP, layer.out,
                          layer.weight.values().data(), dy.data(), dcols.values().data());
  return col2im(dcols, cache.input_shape);
}

// --- relu / pool -----------------------------------------------------------

Tensor relu_forward(const Tensor& x) {
  Tensor y(x.shape());
  for (std::size_t i = 0; i < x.size(); ++i) y[i] = x[i] > 0.0 ? x[i] : 0.0;
  return y;
}

Tensor relu_backward(const ReluCache& cache, const Tensor& g) {
  Tensor gx(g.shape());
  for (std::size_t i = 0; i < g.size(); ++i) gx[i] = cache.input[i] > 0.0 ? g[i] : 0.0;
  return gx;
}

Tensor pool_forward(const Tensor& x) {
  if (x.rank() != 4) {
    throw DimensionError("global average pooling expects [N,C,H,W], got " +
                         shape_string(x.shape()));
  }
  const std::size_t N = x.dim(0), C = x.dim(1), HW = x.dim(2) * x.dim(3);
  Tensor y({N, C});
  const double inv = 1.0 / static_cast<double>(HW);
  for (std::size_t i = 0; i < N * C; ++i) {
    double acc = 0.0;
    for (std::size_t p = 0; p < HW; ++p) acc += x[i * HW + p];
    y[i] = acc * inv;
  }
  return y;
}

Tensor pool_backward(const PoolCache& cache, const Tensor& g) {
  const std::size_t HW = cache.input_shape[2] * cache.input_shape[3];
  Tensor gx(cache.input_shape);
  const double inv = 1.0 / static_cast<double>(HW);
  for (std::size_t i = 0; i < g.size(); ++i)
    for (std::size_t p = 0; p < HW; ++p) gx[i * HW + p] = g[i] * inv;
  return gx;
}

KalmanEstimate estimate_from_stats(const BatchStatistics& s) {
  return KalmanEstimate{s.mean, s.cov, s.mean, s.cov};
}

void add_into(Tensor& acc, const Tensor& g) {
  for (std::size_t i = 0; i < g.size(); ++i) acc[i] += g[i];
}

}  // namespace

// ---------------------------------------------------------------------------

Network& Network::add_dense(std::size_t in, std::size_t out) {
  DenseLayer l;
  l.in = in;
  l.out = out;
  l.weight = Tensor({in, out});
  l.bias = Tensor({out});
  l.grad_weight = Tensor({in, out});
  l.grad_bias = Tensor({out});
  layers_.emplace_back(std::move(l));
  return *this;
}

Network& Network::add_conv3x3(std::size_t in, std::size_t out) {
  Conv3x3Layer l;
  l.in = in;
  l.out = out;
  l.weight = Tensor({out, in * 9});
  l.bias = Tensor({out});
  l.grad_weight = Tensor({out, in * 9});
  l.grad_bias = Tensor({out});
  layers_.emplace_back(std::move(l));
  return *this;
}

Network& Network::add_relu() {
  layers_.emplace_back(ReluLayer{});
  return *this;
}

Network& Network::add_global_avgpool() {
  layers_.emplace_back(GlobalAvgPoolLayer{});
  return *this;
}

Network& Network::add_norm(std::size_t channels, const NormSettings& settings) {
  NormLayer l;
  l.settings = settings;
  l.channels = channels;
  l.affine = AffineParams::identity(channels);
  l.moving = MovingStatistics::initial(channels, settings.cov_mode, settings.alpha);
  l.grad_gamma = Tensor({channels});
  l.grad_beta = Tensor({channels});
  if (settings.kind == NormKind::bkn) {
    for (auto it = layers_.rbegin(); it != layers_.rend(); ++it) {
      if (const auto* prev = std::get_if<NormLayer>(&*it)) {
        l.kalman = KalmanLayerParams::initial(channels, prev->channels);
        l.kalman->pinned_gain = settings.pinned_gain;
        l.grad_q_raw = Tensor({1});
        l.grad_transition = Tensor({channels, prev->channels});
        l.grad_r_raw = Tensor({channels});
        break;
      }
    }
  }
  layers_.emplace_back(std::move(l));
  return *this;
}

void Network::initialize(std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  auto fill = [&](Tensor& w, std::size_t fan_in) {
    std::normal_distribution<double> dist(0.0, std::sqrt(2.0 / static_cast<double>(fan_in)));
    for (double& v : w.values()) v = dist(rng);
  };
  for (Layer& layer : layers_) {
    std::visit(Overloaded{
                   [&](DenseLayer& l) {
                     fill(l.weight, l.in);
                     l.bias = Tensor({l.out});
                   },
                   [&](Conv3x3Layer& l) {
                     fill(l.weight, l.in * 9);
                     l.bias = Tensor({l.out});
                   },
                   [](auto&) {},
               },
               layer);
  }
}

std::size_t Network::norm_layer_count() const {
  return static_cast<std::size_t>(std::count_if(layers_.begin(), layers_.end(), [](const Layer& l) {
    return std::holds_alternative<NormLayer>(l);
  }));
}

void Network::set_brn_limits(BrnLimits limits) {
  for (Layer& layer : layers_)
    if (auto* n = std::get_if<NormLayer>(&layer)) n->limits = limits;
}

void Network::hold_side_inputs(const ForwardPass& pass) {
  if (pass.caches.size() != layers_.size()) {
    throw InvalidArgument("holding side inputs needs a train-mode pass over the same network");
  }
  for (std::size_t i = 0; i < layers_.size(); ++i) {
    auto* l = std::get_if<NormLayer>(&layers_[i]);
    if (!l) continue;
    const auto* nc = std::get_if<NormLayerCache>(&pass.caches[i]);
    if (!nc) throw InvalidArgument("layer " + std::to_string(i) + ": cache does not match layer kind");
    if (const auto* c = std::get_if<NormCache>(nc); c && c->has_prior) {
      l->held_prior = KalmanEstimate{c->prev_mean, c->prev_cov, c->prev_mean, c->prev_cov};
    } else if (const auto* b = std::get_if<BrnCache>(nc)) {
      l->held_correction = BrnCorrection{b->r, b->d};
    }
  }
}

void Network::release_side_inputs() {
  for (Layer& layer : layers_)
    if (auto* l = std::get_if<NormLayer>(&layer)) {
      l->held_prior.reset();
      l->held_correction.reset();
    }
}

ForwardPass Network::forward(const Tensor& x, Mode mode) {
  if (mode != Mode::train) return ForwardPass{evaluate(x, mode), {}};

  ForwardPass pass;
  pass.caches.reserve(layers_.size());
  Tensor h = x;
  std::optional<KalmanEstimate> chain;
  for (std::size_t i = 0; i < layers_.size(); ++i) {
    try {
      std::visit(
          Overloaded{
              [&](DenseLayer& l) {
                DenseCache c{Tensor(), h.shape()};
                h = dense_forward(l, h, &c.input);
                pass.caches.emplace_back(std::move(c));
              },
              [&](Conv3x3Layer& l) {
                ConvCache c{Tensor(), h.shape()};
                h = conv_forward(l, h, &c.columns);
                pass.caches.emplace_back(std::move(c));
              },
              [&](ReluLayer&) {
                Tensor y = relu_forward(h);
                pass.caches.emplace_back(ReluCache{std::move(h)});
                h = std::move(y);
              },
              [&](GlobalAvgPoolLayer&) {
                pass.caches.emplace_back(PoolCache{h.shape()});
                h = pool_forward(h);
              },
              [&](NormLayer& l) {
                const NormEpsilon eps(l.settings.eps);
                const CovMode mode = l.settings.cov_mode;
                switch (l.settings.kind) {
                  case NormKind::bn: {
                    BnTrainResult r = bn_forward_train(h, l.affine, l.moving, eps, mode);
                    chain = estimate_from_stats(r.stats);
                    pass.caches.emplace_back(NormLayerCache(std::move(r.cache)));
                    h = std::move(r.y);
                    break;
                  }
                  case NormKind::brn: {
                    BrnTrainResult r =
                        brn_forward_train(h, l.affine, l.moving, eps, l.limits, mode,
                                          l.held_correction ? &*l.held_correction : nullptr);
                    chain = estimate_from_stats(r.stats);
                    pass.caches.emplace_back(NormLayerCache(std::move(r.cache)));
                    h = std::move(r.y);
                    break;
                  }
                  case NormKind::bkn: {
                    const bool linked = l.kalman.has_value() && chain.has_value();
                    const KalmanEstimate* prior_in =
                        !linked ? nullptr : l.held_prior ? &*l.held_prior : &*chain;
                    BknTrainResult r = bkn_forward_train(
                        h, prior_in, linked ? &*l.kalman : nullptr,
                        l.affine, l.moving, eps, mode);
                    chain = std::move(r.estimate);
                    pass.caches.emplace_back(NormLayerCache(std::move(r.cache)));
                    h = std::move(r.y);
                    break;
                  }
                }
              },
          },
          layers_[i]);
    } catch (const Error& e) {
      rethrow_at_layer(e, i);
    }
  }
  pass.logits = std::move(h);
  return pass;
}

Tensor Network::evaluate(const Tensor& x, Mode mode,
                         std::vector<NormObservation>* observations) const {
  if (mode == Mode::train) throw InvalidArgument("evaluate() does not run in train mode");
  Tensor h = x;
  std::optional<KalmanEstimate> chain;
  for (std::size_t i = 0; i < layers_.size(); ++i) {
    try {
      std::visit(Overloaded{
                     [&](const DenseLayer& l) { h = dense_forward(l, h, nullptr); },
                     [&](const Conv3x3Layer& l) { h = conv_forward(l, h, nullptr); },
                     [&](const ReluLayer&) { h = relu_forward(h); },
                     [&](const GlobalAvgPoolLayer&) { h = pool_forward(h); },
                     [&](const NormLayer& l) {
                       const NormEpsilon eps(l.settings.eps);
                       if (mode == Mode::infer) {
                         h = bkn_forward_infer(h, l.moving, l.affine, eps);
                         return;
                       }
                       const bool linked = l.settings.kind == NormKind::bkn &&
                                           l.kalman.has_value() && chain.has_value();
                       BknEvalResult r = bkn_forward_eval_batchstats(
                           h, linked ? &*chain : nullptr, linked ? &*l.kalman : nullptr,
                           l.affine, eps, l.settings.cov_mode);
                       if (observations) {
                         observations->push_back(NormObservation{
                             i, r.estimate.cov_post.diagonal(), l.moving.sigma.diagonal()});
                       }
                       chain = std::move(r.estimate);
                       h = std::move(r.y);
                     },
                 },
                 layers_[i]);
    } catch (const Error& e) {
      rethrow_at_layer(e, i);
    }
  }
  return h;
}

Tensor Network::backward(const ForwardPass& pass, const Tensor& grad_logits) {
  if (pass.caches.size() != layers_.size()) {
    throw InvalidArgument("backward needs a train-mode forward pass over the same network");
  }
  if (grad_logits.shape() != pass.logits.shape()) {
    throw DimensionError("gradient shape " + shape_string(grad_logits.shape()) +
                         " does not match logits " + shape_string(pass.logits.shape()));
  }
  Tensor g = grad_logits;
  for (std::size_t i = layers_.size(); i-- > 0;) {
    const LayerCache& cache = pass.caches[i];
    try {
      std::visit(
          Overloaded{
              [&](DenseLayer& l) { g = dense_backward(l, std::get<DenseCache>(cache), g); },
              [&](Conv3x3Layer& l) { g = conv_backward(l, std::get<ConvCache>(cache), g); },
              [&](ReluLayer&) { g = relu_backward(std::get<ReluCache>(cache), g); },
              [&](GlobalAvgPoolLayer&) { g = pool_backward(std::get<PoolCache>(cache), g); },
              [&](NormLayer& l) {
                const auto& nc = std::get<NormLayerCache>(cache);
                if (const auto* brn = std::get_if<BrnCache>(&nc)) {
                  NormGradients r = brn_backward(g, *brn);
                  add_into(l.grad_gamma, r.gamma);
                  add_into(l.grad_beta, r.beta);
                  g = std::move(r.x);
                  return;
                }
                BknGradients r = bkn_backward(g, std::get<NormCache>(nc));
                add_into(l.grad_gamma, r.gamma);
                add_into(l.grad_beta, r.beta);
                if (l.kalman && !r.q_raw.empty()) {
                  add_into(l.grad_q_raw, r.q_raw);
                  add_into(l.grad_transition, r.transition);
                  add_into(l.grad_r_raw, r.r_raw);
                }
                g = std::move(r.x);
              },
          },
          layers_[i]);
    } catch (const std::bad_variant_access&) {
      throw InvalidArgument("layer " + std::to_string(i) + ": cache does not match layer kind");
    } catch (const Error& e) {
      rethrow_at_layer(e, i);
    }
  }
  return g;
}

std::vector<ParamRef> Network::parameters() {
  std::vector<ParamRef> refs;
  for (std::size_t i = 0; i < layers_.size(); ++i) {
    std::visit(Overloaded{
                   [&](DenseLayer& l) {
                     const std::string p = param_prefix(i, "dense");
                     refs.push_back({p + "bias", &l.bias, &l.grad_bias});
                     refs.push_back({p + "weight", &l.weight, &l.grad_weight});
                   },
                   [&](Conv3x3Layer& l) {
                     const std::string p = param_prefix(i, "conv");
                     refs.push_back({p + "bias", &l.bias, &l.grad_bias});
                     refs.push_back({p + "weight", &l.weight, &l.grad_weight});
                   },
                   [&](NormLayer& l) {
                     const std::string p = param_prefix(i, "norm");
                     refs.push_back({p + "beta", &l.affine.beta, &l.grad_beta});
                     refs.push_back({p + "gamma", &l.affine.gamma, &l.grad_gamma});
                     if (l.kalman) {
                       refs.push_back({p + "q_raw", &l.kalman->q_raw, &l.grad_q_raw});
                       refs.push_back({p + "r_raw", &l.kalman->r_raw, &l.grad_r_raw});
                       refs.push_back({p + "transition", &l.kalman->transition, &l.grad_transition});
                     }
                   },
                   [](auto&) {},
               },
               layers_[i]);
  }
  std::sort(refs.begin(), refs.end(),
            [](const ParamRef& a, const ParamRef& b) { return a.name < b.name; });
  return refs;
}

void Network::zero_grad() {
  for (ParamRef& p : parameters())
    std::fill(p.grad->values().begin(), p.grad->values().end(), 0.0);
}

void Network::scale_grad(double factor) {
  for (ParamRef& p : parameters())
    for (double& v : p.grad->values()) v *= factor;
}

std::vector<NamedTensor> Network::state() const {
  std::vector<NamedTensor> out;
  auto& self = const_cast<Network&>(*this);
  for (const ParamRef& p : self.parameters()) out.push_back({p.name, *p.value});
  for (std::size_t i = 0; i < layers_.size(); ++i) {
    if (const auto* l = std::get_if<NormLayer>(&layers_[i])) {
      const std::string p = param_prefix(i, "norm");
      out.push_back({p + "moving_mu", Tensor::vector(l->moving.mu)});
      const Covariance& s = l->moving.sigma;
      out.push_back({p + "moving_sigma",
                     s.mode == CovMode::diag ? Tensor::vector(s.values)
                                             : Tensor({s.dim, s.dim}, s.values)});
      out.push_back({p + "moving_seeded", Tensor({1}, l->moving.seeded ? 1.0 : 0.0)});
    }
  }
  return out;
}

void Network::load_state(const std::vector<NamedTensor>& tensors) {
  std::map<std::string, const Tensor*> by_name;
  for (const NamedTensor& nt : tensors) by_name[nt.name] = &nt.value;
  auto take = [&](const std::string& name, const Shape& shape) -> const Tensor& {
    auto it = by_name.find(name);
    if (it == by_name.end()) throw IoError("checkpoint is missing tensor " + name);
    if (it->second->shape() != shape) {
      throw IoError("checkpoint tensor " + name + " has shape " +
                    shape_string(it->second->shape()) + ", expected " + shape_string(shape));
    }
    return *it->second;
  };
  for (ParamRef& p : parameters()) *p.value = take(p.name, p.value->shape());
  for (std::size_t i = 0; i < layers_.size(); ++i) {
    if (auto* l = std::get_if<NormLayer>(&layers_[i])) {
      const std::string p = param_prefix(i, "norm");
      l->moving.mu = take(p + "moving_mu", {l->channels}).storage();
      Covariance& s = l->moving.sigma;
      const Shape sigma_shape = s.mode == CovMode::diag ? Shape{s.dim} : Shape{s.dim, s.dim};
      s.values = take(p + "moving_sigma", sigma_shape).storage();
      l->moving.seeded = take(p + "moving_seeded", {1})[0] != 0.0;
    }
  }
}

void sgd_step(Network& net, SgdState& state) {
  std::vector<ParamRef> params = net.parameters();
  for (const ParamRef& p : params) {
    if (!p.grad->all_finite()) throw NumericError("non-finite gradient for parameter " + p.name);
  }
  for (ParamRef& p : params) {
    auto [it, inserted] = state.velocity.try_emplace(p.name, p.value->shape());
    Tensor& v = it->second;
    if (v.shape() != p.value->shape()) {
      throw DimensionError("velocity for " + p.name + " has the wrong shape");
    }
    for (std::size_t i = 0; i < v.size(); ++i) {
      v[i] = state.momentum * v[i] + (*p.grad)[i];
      (*p.value)[i] -= state.lr * v[i];
    }
  }
}

LossResult softmax_cross_entropy(const Tensor& logits, std::span<const int> labels) {
  if (logits.rank() != 2 || logits.dim(0) != labels.size() || logits.dim(0) == 0) {
    throw DimensionError("logits " + shape_string(logits.shape()) + " vs " +
                         std::to_string(labels.size()) + " labels");
  }
  const std::size_t B = logits.dim(0), K = logits.dim(1);
  LossResult r{0.0, Tensor(logits.shape())};
  const double inv_b = 1.0 / static_cast<double>(B);
  for (std::size_t b = 0; b < B; ++b) {
    const int label = labels[b];
    if (label < 0 || static_cast<std::size_t>(label) >= K) {
      throw InvalidArgument("label " + std::to_string(label) + " outside [0," +
                            std::to_string(K) + ")");
    }
    const double* row = logits.values().data() + b * K;
    const double mx = *std::max_element(row, row + K);
    double sum = 0.0;
    for (std::size_t k = 0; k < K; ++k) sum += std::exp(row[k] - mx);
    const double lse = mx + std::log(sum);
    r.loss += (lse - row[label]) * inv_b;
    for (std::size_t k = 0; k < K; ++k) {
      const double prob = std::exp(row[k] - lse);
      r.grad[b * K + k] = (prob - (static_cast<std::size_t>(label) == k ? 1.0 : 0.0)) * inv_b;
    }
  }
  return r;
}

std::size_t count_correct(const Tensor& logits, std::span<const int> labels) {
  const std::size_t B = logits.dim(0), K = logits.dim(1);
  std::size_t correct = 0;
  for (std::size_t b = 0; b < B; ++b) {
    const double* row = logits.values().data() + b * K;
    const auto best = static_cast<int>(std::max_element(row, row + K) - row);
    if (best == labels[b]) ++correct;
  }
  return correct;
}

Network build_desk_network(const DeskArchitecture& arch, const NormSettings& norm,
                           std::uint64_t seed) {
  if (arch.widths.empty()) throw ConfigError("architecture needs at least one width");
  Network net;
  std::size_t in = arch.in_channels;
  for (std::size_t w : arch.widths) {
    net.add_conv3x3(in, w).add_norm(w, norm).add_relu();
    in = w;
  }
  net.add_global_avgpool().add_dense(in, arch.classes);
  net.initialize(seed);
  return net;
}

}  // namespace bkn
