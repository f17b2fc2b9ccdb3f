#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <random>
#include <string>
#include <vector>

#include "checkpoint.hpp"
#include "error.hpp"
#include "net.hpp"
#include "verify.hpp"

using namespace bkn;

namespace {

using LD = long double;

Tensor random_tensor(Shape shape, std::mt19937_64& rng, double lo = -1.0, double hi = 1.0) {
  std::uniform_real_distribution<double> u(lo, hi);
  Tensor t(std::move(shape));
  for (double& v : t.values()) v = u(rng);
  return t;
}

NormSettings settings(NormKind kind) {
  NormSettings s;
  s.kind = kind;
  s.alpha = 0.1;
  return s;
}

// conv(2->3) relu pool dense(3->4), by straight-line loops in long double.
std::vector<LD> scalar_logits(const Conv3x3Layer& conv, const DenseLayer& dense, const Tensor& x) {
  const std::size_t N = x.dim(0), Ci = x.dim(1), H = x.dim(2), W = x.dim(3), Co = conv.out;
  std::vector<LD> out(N * dense.out, 0);
  for (std::size_t n = 0; n < N; ++n) {
    std::vector<LD> pooled(Co, 0);
    for (std::size_t o = 0; o < Co; ++o) {
      for (std::size_t y = 0; y < H; ++y)
        for (std::size_t xx = 0; xx < W; ++xx) {
          LD acc = conv.bias[o];
          for (std::size_t c = 0; c < Ci; ++c)
            for (int ky = -1; ky <= 1; ++ky)
              for (int kx = -1; kx <= 1; ++kx) {
                const long sy = static_cast<long>(y) + ky, sx = static_cast<long>(xx) + kx;
                if (sy < 0 || sx < 0 || sy >= static_cast<long>(H) || sx >= static_cast<long>(W))
                  continue;
                const double w = conv.weight.at(o, c * 9 + (ky + 1) * 3 + (kx + 1));
                acc += static_cast<LD>(w) * x[((n * Ci + c) * H + sy) * W + sx];
              }
          pooled[o] += acc > 0 ? acc : 0;
        }
      pooled[o] /= static_cast<LD>(H * W);
    }
    for (std::size_t k = 0; k < dense.out; ++k) {
      LD acc = dense.bias[k];
      for (std::size_t o = 0; o < Co; ++o) acc += pooled[o] * dense.weight.at(o, k);
      out[n * dense.out + k] = acc;
    }
  }
  return out;
}

Network tiny_network(NormKind kind, std::uint64_t seed) {
  Network net;
  net.add_conv3x3(2, 3)
      .add_norm(3, settings(kind))
      .add_relu()
      .add_conv3x3(3, 4)
      .add_norm(4, settings(kind))
      .add_relu()
      .add_global_avgpool()
      .add_dense(4, 3);
  net.initialize(seed);
  return net;
}

Batch random_batch(std::size_t n, std::mt19937_64& rng) {
  Batch b{random_tensor({n, 2, 3, 3}, rng), {}};
  for (std::size_t i = 0; i < n; ++i) b.labels.push_back(static_cast<int>(i % 3));
  return b;
}

}  // namespace

TEST_CASE("empty network is the identity and relu clips") {
  Network empty;
  const Tensor x = Tensor::matrix({{-1.0, 2.0}});
  CHECK(empty.forward(x, Mode::train).logits == x);
  CHECK(empty.evaluate(x, Mode::infer) == x);

  Network relu;
  relu.add_relu();
  CHECK(relu.forward(x, Mode::train).logits == Tensor::matrix({{0.0, 2.0}}));
}

TEST_CASE("conv-relu-pool-dense logits match a scalar re-implementation") {
  Network net;
  net.add_conv3x3(2, 3).add_relu().add_global_avgpool().add_dense(3, 4);
  net.initialize(5);
  std::mt19937_64 rng(51);
  auto& layers = net.layers();
  // Nonzero biases so they are exercised too.
  for (double& v : std::get<Conv3x3Layer>(layers[0]).bias.values()) v = 0.1 * (rng() % 7) - 0.3;
  for (double& v : std::get<DenseLayer>(layers[3]).bias.values()) v = 0.05 * (rng() % 5);
  const Tensor x = random_tensor({3, 2, 4, 5}, rng);
  const Tensor logits = net.forward(x, Mode::train).logits;
  const std::vector<LD> ref =
      scalar_logits(std::get<Conv3x3Layer>(layers[0]), std::get<DenseLayer>(layers[3]), x);
  REQUIRE(logits.size() == ref.size());
  for (std::size_t i = 0; i < ref.size(); ++i) CHECK(std::abs(logits[i] - ref[i]) <= 1e-12L);
}

TEST_CASE("shape errors name the layer index") {
  Network net;
  net.add_relu().add_dense(5, 2);
  try {
    net.forward(Tensor({2, 4}), Mode::train);
    FAIL("expected a dimension error");
  } catch (const DimensionError& e) {
    CHECK(std::string(e.what()).find("layer 1") != std::string::npos);
  }
}

TEST_CASE("zero upstream gradient leaves every parameter gradient zero") {
  for (NormKind kind : {NormKind::bn, NormKind::brn, NormKind::bkn}) {
    Network net = tiny_network(kind, 3);
    std::mt19937_64 rng(52);
    const Batch b = random_batch(4, rng);
    const ForwardPass pass = net.forward(b.images, Mode::train);
    net.zero_grad();
    const Tensor gx = net.backward(pass, Tensor(pass.logits.shape()));
    for (double v : gx.values()) CHECK(v == 0.0);
    for (const ParamRef& p : net.parameters())
      for (double v : p.grad->values()) CHECK(v == 0.0);
  }
}

TEST_CASE("dense weight gradient is x^T grad_y") {
  Network net;
  net.add_dense(4, 3);
  net.initialize(9);
  std::mt19937_64 rng(53);
  const Tensor x = random_tensor({5, 4}, rng);
  const Tensor gy = random_tensor({5, 3}, rng);
  const ForwardPass pass = net.forward(x, Mode::train);
  net.zero_grad();
  net.backward(pass, gy);
  const DenseLayer& d = std::get<DenseLayer>(net.layers()[0]);
  for (std::size_t i = 0; i < 4; ++i)
    for (std::size_t j = 0; j < 3; ++j) {
      LD acc = 0;
      for (std::size_t n = 0; n < 5; ++n) acc += static_cast<LD>(x.at(n, i)) * gy.at(n, j);
      CHECK(std::abs(d.grad_weight.at(i, j) - acc) <= 1e-13L);
    }
  for (std::size_t j = 0; j < 3; ++j) {
    LD acc = 0;
    for (std::size_t n = 0; n < 5; ++n) acc += gy.at(n, j);
    CHECK(std::abs(d.grad_bias[j] - acc) <= 1e-13L);
  }
}

TEST_CASE("backward accumulates across passes") {
  Network net = tiny_network(NormKind::bkn, 4);
  std::mt19937_64 rng(54);
  const Batch b = random_batch(4, rng);
  const Tensor g = random_tensor({4, 3}, rng);
  net.zero_grad();
  const ForwardPass pass = net.forward(b.images, Mode::train);
  net.backward(pass, g);
  std::vector<Tensor> once;
  for (const ParamRef& p : net.parameters()) once.push_back(*p.grad);
  net.backward(pass, g);
  std::size_t k = 0;
  for (const ParamRef& p : net.parameters()) {
    for (std::size_t i = 0; i < p.grad->size(); ++i)
      CHECK(std::abs((*p.grad)[i] - 2.0 * once[k][i]) <= 1e-12 * (1.0 + std::abs(once[k][i])));
    ++k;
  }
}

TEST_CASE("backward without a train-mode pass is rejected") {
  Network net = tiny_network(NormKind::bn, 1);
  std::mt19937_64 rng(55);
  const ForwardPass pass = net.forward(random_tensor({2, 2, 3, 3}, rng), Mode::eval_batchstats);
  CHECK_THROWS_AS(net.backward(pass, Tensor({2, 3})), InvalidArgument);
}

TEST_CASE("whole-network gradients match finite differences for every normalizer") {
  for (NormKind kind : {NormKind::bn, NormKind::brn, NormKind::bkn}) {
    Network net = tiny_network(kind, 11);
    std::mt19937_64 rng(56);
    // Warm the moving statistics so BRN's corrections are active.
    for (int i = 0; i < 3; ++i) net.forward(random_batch(6, rng).images, Mode::train);
    net.set_brn_limits(BrnLimits{2.0, 1.0});
    std::size_t count = 0;
    for (const ParamRef& p : net.parameters()) count += p.value->size();
    CHECK(count <= 2000);
    const Batch b = random_batch(6, rng);
    const GradCheckReport r = check_network_gradients(net, b, 1e-4);
    CAPTURE(std::string(to_string(kind)));
    CAPTURE(r.max_rel());
    CHECK(r.passed());
    CHECK(r.entries.size() == net.parameters().size());
  }
}

TEST_CASE("sgd examples") {
  Network net;
  net.add_dense(3, 2);
  net.initialize(1);
  auto params = net.parameters();
  const Tensor w0 = *params[1].value;
  for (double& v : params[1].grad->values()) v = 0.5;

  SgdState frozen{0.0, 0.9, {}};
  sgd_step(net, frozen);
  CHECK(*params[1].value == w0);

  SgdState plain{0.1, 0.0, {}};
  sgd_step(net, plain);
  for (std::size_t i = 0; i < w0.size(); ++i) CHECK((*params[1].value)[i] == w0[i] - 0.1 * 0.5);
}

TEST_CASE("momentum follows the scalar recurrence") {
  Network net;
  net.add_dense(2, 2);
  net.initialize(2);
  auto params = net.parameters();
  const Tensor w0 = *params[1].value;
  std::mt19937_64 rng(57);
  const Tensor g = random_tensor({2, 2}, rng);
  *params[1].grad = g;
  SgdState s{0.05, 0.9, {}};
  sgd_step(net, s);
  sgd_step(net, s);
  for (std::size_t i = 0; i < 4; ++i) {
    // v1 = g, v2 = 0.9 g + g; theta2 = theta0 - lr (g + 1.9 g)
    double v = 0.0, theta = w0[i];
    for (int t = 0; t < 2; ++t) {
      v = 0.9 * v + g[i];
      theta -= 0.05 * v;
    }
    CHECK((*params[1].value)[i] == theta);
    CHECK(std::abs(theta - (w0[i] - 0.05 * 2.9 * g[i])) <= 1e-15);
  }
}

TEST_CASE("sgd aborts on a non-finite gradient naming the parameter") {
  Network net;
  net.add_dense(2, 2);
  net.initialize(3);
  auto params = net.parameters();
  const Tensor before = *params[1].value;
  (*params[0].grad)[1] = std::nan("");
  SgdState s;
  try {
    sgd_step(net, s);
    FAIL("expected a numeric error");
  } catch (const NumericError& e) {
    CHECK(std::string(e.what()).find(params[0].name) != std::string::npos);
  }
  CHECK(*params[1].value == before);
}

TEST_CASE("softmax cross-entropy examples") {
  for (std::size_t K : {2u, 5u, 10u}) {
    const Tensor logits({3, K}, 0.7);
    const std::vector<int> labels{0, 1, 1};
    CHECK(std::abs(softmax_cross_entropy(logits, labels).loss - std::log(double(K))) <= 1e-14);
  }
  double last = 1e300;
  for (double margin : {1.0, 10.0, 100.0}) {
    const Tensor logits = Tensor::matrix({{margin, 0.0, 0.0}, {0.0, 0.0, margin}});
    const double loss = softmax_cross_entropy(logits, std::vector<int>{0, 2}).loss;
    CHECK(loss < last);
    CHECK(loss >= 0.0);
    last = loss;
  }
  CHECK(last <= 1e-40);
  CHECK_THROWS_AS(softmax_cross_entropy(Tensor({2, 3}), std::vector<int>{0, 3}), InvalidArgument);
  CHECK_THROWS_AS(softmax_cross_entropy(Tensor({2, 3}), std::vector<int>{0}), DimensionError);
}

TEST_CASE("softmax cross-entropy gradient matches finite differences") {
  std::mt19937_64 rng(58);
  for (int trial = 0; trial < 10; ++trial) {
    Tensor logits = random_tensor({4, 5}, rng, -3.0, 3.0);
    const std::vector<int> labels{1, 4, 0, 2};
    const Tensor grad = softmax_cross_entropy(logits, labels).grad;
    for (std::size_t i = 0; i < logits.size(); ++i) {
      const double saved = logits[i], h = 1e-5;
      logits[i] = saved + h;
      const double up = softmax_cross_entropy(logits, labels).loss;
      logits[i] = saved - h;
      const double down = softmax_cross_entropy(logits, labels).loss;
      logits[i] = saved;
      const double fd = (up - down) / (2 * h);
      CHECK(std::abs(grad[i] - fd) <= 1e-6 * std::max(1.0, std::abs(fd)));
    }
  }
}

TEST_CASE("inference is pure") {
  Network net = tiny_network(NormKind::bkn, 6);
  std::mt19937_64 rng(59);
  for (int i = 0; i < 2; ++i) net.forward(random_batch(4, rng).images, Mode::train);
  const std::vector<NamedTensor> before = net.state();
  const Tensor x = random_batch(4, rng).images;
  const Tensor a = net.forward(x, Mode::infer).logits;
  const Tensor b = net.evaluate(x, Mode::infer);
  const Tensor c = net.evaluate(x, Mode::eval_batchstats);
  CHECK(a == b);
  CHECK(c == net.evaluate(x, Mode::eval_batchstats));
  const std::vector<NamedTensor> after = net.state();
  REQUIRE(before.size() == after.size());
  for (std::size_t i = 0; i < before.size(); ++i) CHECK(before[i].value == after[i].value);
}

TEST_CASE("BKN with the gain pinned at 1 trains like BN") {
  NormSettings pinned = settings(NormKind::bkn);
  pinned.pinned_gain = 1.0;
  Network bkn_net = build_desk_network({2, {3, 4, 4}, 3}, pinned, 8);
  Network bn_net = build_desk_network({2, {3, 4, 4}, 3}, settings(NormKind::bn), 8);
  std::mt19937_64 rng(60);
  SgdState s1, s2;
  for (int step = 0; step < 3; ++step) {
    const Batch b = random_batch(5, rng);
    const ForwardPass p1 = bkn_net.forward(b.images, Mode::train);
    const ForwardPass p2 = bn_net.forward(b.images, Mode::train);
    for (std::size_t i = 0; i < p1.logits.size(); ++i)
      CHECK(std::abs(p1.logits[i] - p2.logits[i]) <= 1e-12);
    bkn_net.zero_grad();
    bn_net.zero_grad();
    bkn_net.backward(p1, softmax_cross_entropy(p1.logits, b.labels).grad);
    bn_net.backward(p2, softmax_cross_entropy(p2.logits, b.labels).grad);
    sgd_step(bkn_net, s1);
    sgd_step(bn_net, s2);
  }
}

TEST_CASE("parameter registry covers exactly the learnable tensors") {
  Network net = tiny_network(NormKind::bkn, 7);
  const auto params = net.parameters();
  std::vector<std::string> names;
  for (const ParamRef& p : params) {
    names.push_back(p.name);
    CHECK(p.grad->shape() == p.value->shape());
  }
  CHECK(std::is_sorted(names.begin(), names.end()));
  // conv x2, dense: 2 each; first norm: 2; second (chained) norm: 5.
  CHECK(params.size() == 2 * 3 + 2 + 5);
}

TEST_CASE("state round-trips through a checkpoint") {
  Network net = tiny_network(NormKind::bkn, 12);
  std::mt19937_64 rng(61);
  for (int i = 0; i < 2; ++i) net.forward(random_batch(4, rng).images, Mode::train);
  const auto path = std::filesystem::temp_directory_path() / "bkn_test_net.ckpt";
  save_checkpoint(path, net.state());
  Network other = tiny_network(NormKind::bkn, 99);
  other.load_state(load_checkpoint(path));
  const Tensor x = random_batch(3, rng).images;
  CHECK(other.evaluate(x, Mode::infer) == net.evaluate(x, Mode::infer));

  Network bn = tiny_network(NormKind::bn, 12);
  CHECK_THROWS_AS(other.load_state(bn.state()), IoError);
  std::filesystem::remove(path);
}
