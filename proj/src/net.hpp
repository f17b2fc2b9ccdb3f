#pragma once

#include <cstdint>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <variant>
#include <vector>

#include "checkpoint.hpp"
#include "norm.hpp"
#include "tensor.hpp"

namespace bkn {

enum class NormKind { bn, brn, bkn };
enum class Mode { train, infer, eval_batchstats };

const char* to_string(NormKind kind);
NormKind parse_norm_kind(const std::string& s);

struct NormSettings {
  NormKind kind = NormKind::bkn;
  CovMode cov_mode = CovMode::diag;
  double alpha = 0.01;
  double eps = 1e-5;
  /// Holds every BKN gain fixed (e.g. at 1 to reduce BKN to BN).
  std::optional<double> pinned_gain;
};

struct DenseLayer {
  std::size_t in = 0, out = 0;
  Tensor weight, bias;  // [in, out], [out]
  Tensor grad_weight, grad_bias;
};

/// 3x3 convolution, stride 1, zero "same" padding. Weight rows are output
/// channels, columns are (input channel, ky, kx).
struct Conv3x3Layer {
  std::size_t in = 0, out = 0;
  Tensor weight, bias;  // [out, in*9], [out]
  Tensor grad_weight, grad_bias;
};

struct ReluLayer {};
struct GlobalAvgPoolLayer {};

struct NormLayer {
  NormSettings settings;
  std::size_t channels = 0;
  AffineParams affine;
  /// Present for BKN layers that have a chain predecessor.
  std::optional<KalmanLayerParams> kalman;
  MovingStatistics moving;
  BrnLimits limits;
  /// Inputs the backward pass treats as constants, pinned to recorded
  /// values so that finite differences see the same function.
  std::optional<KalmanEstimate> held_prior;
  std::optional<BrnCorrection> held_correction;

  Tensor grad_gamma, grad_beta;
  Tensor grad_q_raw, grad_transition, grad_r_raw;
};

using Layer = std::variant<DenseLayer, Conv3x3Layer, ReluLayer, GlobalAvgPoolLayer, NormLayer>;

struct DenseCache {
  Tensor input;  // flattened [B, in]
  Shape input_shape;
};
struct ConvCache {
  Tensor columns;  // [in*9, N*H*W]
  Shape input_shape;
};
struct ReluCache {
  Tensor input;
};
struct PoolCache {
  Shape input_shape;
};
using NormLayerCache = std::variant<NormCache, BrnCache>;
using LayerCache = std::variant<DenseCache, ConvCache, ReluCache, PoolCache, NormLayerCache>;

struct ForwardPass {
  Tensor logits;
  std::vector<LayerCache> caches;  // empty unless the pass ran in train mode
};

/// Statistics a normalization layer used during a non-training forward.
struct NormObservation {
  std::size_t layer_index = 0;
  std::vector<double> batch_var;
  std::vector<double> moving_var;
};

struct ParamRef {
  std::string name;
  Tensor* value;
  Tensor* grad;
};

class Network {
 public:
  Network& add_dense(std::size_t in, std::size_t out);
  Network& add_conv3x3(std::size_t in, std::size_t out);
  Network& add_relu();
  Network& add_global_avgpool();
  /// BKN layers get Kalman parameters sized against the nearest preceding
  /// normalization layer, if any.
  Network& add_norm(std::size_t channels, const NormSettings& settings);

  /// He-normal weights (std sqrt(2/fan_in)), zero biases.
  void initialize(std::uint64_t seed);

  /// Train mode updates moving statistics and returns caches; other modes
  /// leave the network untouched.
  ForwardPass forward(const Tensor& x, Mode mode);

  Tensor evaluate(const Tensor& x, Mode mode,
                  std::vector<NormObservation>* observations = nullptr) const;

  /// Adds this pass's parameter gradients into the gradient registry and
  /// returns the gradient with respect to the input.
  Tensor backward(const ForwardPass& pass, const Tensor& grad_logits);

  void zero_grad();
  void scale_grad(double factor);

  /// Learnable tensors with their gradients, sorted by name.
  std::vector<ParamRef> parameters();

  /// Parameters plus moving statistics, for checkpoints.
  std::vector<NamedTensor> state() const;
  void load_state(const std::vector<NamedTensor>& tensors);

  void set_brn_limits(BrnLimits limits);

  /// Pins every norm layer's chain input (BKN) and r, d (BRN) to the values
  /// recorded in a train-mode pass; release_side_inputs undoes it.
  void hold_side_inputs(const ForwardPass& pass);
  void release_side_inputs();

  const std::vector<Layer>& layers() const { return layers_; }
  std::vector<Layer>& layers() { return layers_; }
  std::size_t norm_layer_count() const;

 private:
  std::vector<Layer> layers_;
};

struct SgdState {
  double lr = 0.1;
  double momentum = 0.9;
  std::map<std::string, Tensor> velocity;
};

/// v <- momentum v + g; theta <- theta - lr v, in parameter-name order.
void sgd_step(Network& net, SgdState& state);

struct LossResult {
  double loss = 0.0;
  Tensor grad;  // d loss / d logits
};

/// Mean softmax cross-entropy over the batch.
LossResult softmax_cross_entropy(const Tensor& logits, std::span<const int> labels);

std::size_t count_correct(const Tensor& logits, std::span<const int> labels);

/// conv(in->w0)-norm-relu, then conv-norm-relu for each further width,
/// global average pooling and a dense classifier.
struct DeskArchitecture {
  std::size_t in_channels = 3;
  std::vector<std::size_t> widths{16, 32, 32, 64};
  std::size_t classes = 10;
};

Network build_desk_network(const DeskArchitecture& arch, const NormSettings& norm,
                           std::uint64_t seed);

}  // namespace bkn
