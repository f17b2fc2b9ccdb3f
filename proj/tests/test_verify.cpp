#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <limits>
#include <random>
#include <string>
#include <vector>

#include "error.hpp"
#include "net.hpp"
#include "norm.hpp"
#include "verify.hpp"

using namespace bkn;
namespace fs = std::filesystem;

namespace {

Tensor random_tensor(Shape shape, std::mt19937_64& rng, double lo = -2.0, double hi = 2.0) {
  std::uniform_real_distribution<double> u(lo, hi);
  Tensor t(std::move(shape));
  for (double& v : t.values()) v = u(rng);
  return t;
}

KalmanLayerParams random_params(std::size_t C, std::size_t K, std::mt19937_64& rng) {
  std::uniform_real_distribution<double> u(-1.0, 1.0);
  KalmanLayerParams p = KalmanLayerParams::initial(C, K);
  for (double& v : p.transition.values()) v = u(rng);
  p.q_raw[0] = 2.0 * u(rng);
  for (double& v : p.r_raw.values()) v = u(rng) - 1.0;
  return p;
}

Covariance random_cov(CovMode mode, std::size_t C, std::mt19937_64& rng, bool diagonal_only) {
  std::uniform_real_distribution<double> u(-1.0, 1.0);
  Covariance cov = Covariance::zeros(mode, C);
  std::vector<double> b(C * C);
  for (double& v : b) v = u(rng);
  for (std::size_t i = 0; i < C; ++i)
    for (std::size_t j = 0; j < C; ++j) {
      if (diagonal_only && i != j) continue;
      double acc = i == j ? 0.05 : 0.0;
      for (std::size_t k = 0; k < C; ++k) acc += b[i * C + k] * b[j * C + k];
      if (mode == CovMode::diag) {
        if (i == j) cov.values[i] = acc;
      } else {
        cov.values[i * C + j] = acc;
      }
    }
  return cov;
}

Network tiny_bkn_network() {
  NormSettings s;
  s.kind = NormKind::bkn;
  s.alpha = 1.0;
  Network net;
  net.add_conv3x3(2, 3).add_norm(3, s).add_relu().add_conv3x3(3, 3).add_norm(3, s).add_relu();
  net.initialize(4);
  return net;
}

}  // namespace

TEST_CASE("finite_diff examples") {
  const ScalarFunction sq = [](std::span<const double> t) {
    double s = 0.0;
    for (double v : t) s += v * v;
    return s;
  };
  const std::vector<double> theta{1.0, 2.0};
  const auto g = finite_diff(sq, theta, 1e-5);
  CHECK(std::abs(g[0] - 2.0) <= 1e-8);
  CHECK(std::abs(g[1] - 4.0) <= 1e-8);

  const ScalarFunction constant = [](std::span<const double>) { return 3.25; };
  for (double v : finite_diff(constant, theta, 1e-6)) CHECK(v == 0.0);

  const ScalarFunction blows_up = [](std::span<const double> t) {
    return t[0] > 1.0 ? std::numeric_limits<double>::infinity() : t[0];
  };
  CHECK_THROWS_AS(finite_diff(blows_up, theta, 1e-3), NumericError);
  CHECK_THROWS_AS(finite_diff(sq, theta, 0.0), InvalidArgument);
}

TEST_CASE("richardson extrapolation is exact on quartics up to roundoff") {
  const ScalarFunction quartic = [](std::span<const double> t) {
    return t[0] * t[0] * t[0] * t[0] - 3.0 * t[0] * t[0] * t[0];
  };
  const std::vector<double> theta{0.7};
  const double want = 4 * 0.343 - 9 * 0.49;
  // Plain central differences carry an O(h^2) error of 4 x h^2 here.
  CHECK(std::abs(finite_diff(quartic, theta, 1e-2)[0] - want) > 1e-5);
  CHECK(std::abs(richardson_diff(quartic, theta, 1e-2)[0] - want) <= 1e-11);
}

TEST_CASE("relative error metric") {
  CHECK(relative_error(1.0, 1.0) == 0.0);
  CHECK(relative_error(2.0, 1.0) == 0.5);
  CHECK(relative_error(0.0, 1e-10) == doctest::Approx(1e-2));
  CHECK(relative_error(-1.0, 1.0) == 2.0);
}

TEST_CASE("BN layer gradients pass for any seed") {
  LayerCheckConfig cfg;
  cfg.kind = NormKind::bn;
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    const GradCheckReport r = check_layer_gradients(cfg, seed);
    CAPTURE(seed);
    CHECK(r.passed());
    CHECK(r.entries.size() == 3);
    for (const auto& e : r.entries) {
      CHECK(e.max_rel >= 0.0);
      CHECK(e.max_abs >= 0.0);
    }
  }
}

TEST_CASE("BKN m=5 C=3 with a random prior passes in both covariance modes") {
  for (CovMode mode : {CovMode::diag, CovMode::full}) {
    LayerCheckConfig cfg;
    cfg.mode = mode;
    for (std::uint64_t seed = 0; seed < 10; ++seed) {
      const GradCheckReport r = check_layer_gradients(cfg, seed);
      CAPTURE(seed);
      CHECK(r.passed());
      for (const char* name : {"x", "gamma", "beta", "q_raw", "transition", "r_raw"})
        CHECK(r.find(name) != nullptr);
    }
  }
}

TEST_CASE("BRN gradients pass against the frozen function") {
  LayerCheckConfig cfg;
  cfg.kind = NormKind::brn;
  for (std::uint64_t seed = 0; seed < 10; ++seed) CHECK(check_layer_gradients(cfg, seed).passed());
}

TEST_CASE("BKN with q pinned at 1 reports exactly what BN reports") {
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    LayerCheckConfig bn;
    bn.kind = NormKind::bn;
    LayerCheckConfig bkn;
    bkn.pinned_gain = 1.0;
    const GradCheckReport a = check_layer_gradients(bn, seed);
    const GradCheckReport b = check_layer_gradients(bkn, seed);
    for (const auto& e : a.entries) {
      const GradCheckEntry* f = b.find(e.name);
      REQUIRE(f != nullptr);
      CHECK(std::abs(e.max_rel - f->max_rel) <= 1e-12);
      CHECK(std::abs(e.max_abs - f->max_abs) <= 1e-12);
      CHECK(std::abs(e.max_rel_fine - f->max_rel_fine) <= 1e-12);
      CHECK(e.failing == f->failing);
    }
  }
}

TEST_CASE("halving the step into roundoff does not blow up the error") {
  // From 1e-5 to 1e-6 the truncation error shrinks 100x; what remains is
  // cancellation, bounded by a few ulps of the loss over the step.
  const double eps = std::numeric_limits<double>::epsilon();
  for (std::uint64_t seed = 0; seed < 40; ++seed) {
    LayerCheckConfig cfg;
    cfg.batch = 1 + seed % 8;
    cfg.channels = 1 + seed % 4;
    const GradCheckReport r = check_layer_gradients(cfg, seed);
    const double allowance = 64.0 * eps * r.loss_scale / cfg.fine_step;
    for (const auto& e : r.entries) {
      CAPTURE(seed);
      CAPTURE(e.name);
      CHECK(e.max_abs_fine <= 10.0 * e.max_abs_coarse + allowance);
    }
  }
}

TEST_CASE("gradient check CSV") {
  const auto path = fs::temp_directory_path() / "bkn_test_gradcheck.csv";
  write_gradcheck_csv(path, check_layer_gradients(LayerCheckConfig{}, 1));
  std::ifstream is(path);
  std::string header, line;
  std::getline(is, header);
  CHECK(header == "parameter,coordinates,max_rel,max_abs,max_rel_step_1e-6,max_rel_step_1e-5,failing");
  int rows = 0;
  while (std::getline(is, line)) ++rows;
  CHECK(rows == 6);
  fs::remove(path);
}

TEST_CASE("oracle agrees with kalman_predict and kalman_fuse") {
  std::mt19937_64 rng(81);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  for (int trial = 0; trial < 1000; ++trial) {
    const CovMode mode = trial % 2 ? CovMode::full : CovMode::diag;
    const std::size_t C = 1 + trial % 6, K = 1 + (trial / 6) % 6;
    KalmanEstimate prev;
    prev.mean_post.resize(K);
    for (double& v : prev.mean_post) v = 4.0 * u(rng) - 2.0;
    prev.cov_post = random_cov(mode, K, rng, false);
    const KalmanLayerParams params = random_params(C, K, rng);
    const StatisticEstimate prior = kalman_predict(prev, params);
    const OracleEstimate oprior =
        oracle_predict(prev.mean_post, prev.cov_post, params.transition, params.r_raw.storage());
    BatchStatistics obs;
    obs.mean.resize(C);
    for (double& v : obs.mean) v = 4.0 * u(rng) - 2.0;
    obs.cov = random_cov(mode, C, rng, false);
    const double q = u(rng);
    const StatisticEstimate post = kalman_fuse(prior, obs, q);
    const OracleEstimate opost = oracle_fuse(prior.mean, prior.cov, obs.mean, obs.cov, q);
    for (std::size_t i = 0; i < C; ++i) {
      CHECK(std::abs(prior.mean[i] - oprior.mean[i]) <= 1e-12L);
      CHECK(std::abs(post.mean[i] - opost.mean[i]) <= 1e-12L);
      for (std::size_t j = 0; j < C; ++j) {
        CHECK(std::abs(prior.cov.entry(i, j) - oprior.cov[i * C + j]) <= 1e-12L);
        CHECK(std::abs(post.cov.entry(i, j) - opost.cov[i * C + j]) <= 1e-12L);
      }
    }
  }
}

TEST_CASE("oracle with q = 1 reproduces the batch statistics") {
  std::mt19937_64 rng(82);
  for (CovMode mode : {CovMode::diag, CovMode::full}) {
    std::vector<OracleChainLayer> chain;
    chain.push_back({random_tensor({6, 3, 2, 1}, rng), std::nullopt});
    KalmanLayerParams p = random_params(2, 3, rng);
    p.pinned_gain = 1.0;
    chain.push_back({random_tensor({6, 2, 2, 1}, rng), p});
    const auto layers = statistics_oracle(chain, mode);
    REQUIRE(layers.size() == 2);
    for (const auto& l : layers) {
      CHECK(l.post.mean == l.batch_mean);
      CHECK(l.post.cov == l.batch_cov);
    }
  }
}

TEST_CASE("oracle chain: full and diagonal modes agree on diagonals of diagonal inputs") {
  std::mt19937_64 rng(83);
  for (int trial = 0; trial < 200; ++trial) {
    // One sample per batch makes every batch covariance zero, hence diagonal.
    const KalmanLayerParams p = [&] {
      KalmanLayerParams k = random_params(3, 3, rng);
      k.transition = Tensor::identity(3);
      for (std::size_t i = 0; i < 3; ++i) k.transition.at(i, i) = 0.5 + trial % 3;
      return k;
    }();
    std::vector<OracleChainLayer> chain{{random_tensor({1, 3, 1, 1}, rng), std::nullopt},
                                        {random_tensor({1, 3, 1, 1}, rng), p}};
    const auto full = statistics_oracle(chain, CovMode::full);
    const auto diag = statistics_oracle(chain, CovMode::diag);
    for (std::size_t k = 0; k < 2; ++k)
      for (std::size_t i = 0; i < 3; ++i) {
        CHECK(std::abs(full[k].post.cov[i * 4] - diag[k].post.cov[i * 4]) <= 1e-12L);
        CHECK(std::abs(full[k].post.mean[i] - diag[k].post.mean[i]) <= 1e-12L);
      }
  }
}

TEST_CASE("oracle second-moment identity holds") {
  std::mt19937_64 rng(84);
  for (int trial = 0; trial < 200; ++trial) {
    const CovMode mode = trial % 2 ? CovMode::full : CovMode::diag;
    std::vector<OracleChainLayer> chain{{random_tensor({5, 3, 2, 2}, rng), std::nullopt},
                                        {random_tensor({5, 4, 2, 2}, rng), random_params(4, 3, rng)},
                                        {random_tensor({5, 2, 2, 2}, rng), random_params(2, 4, rng)}};
    for (const auto& l : statistics_oracle(chain, mode)) CHECK(l.identity_residual <= 1e-15L);
  }
}

TEST_CASE("oracle matches the production chain") {
  std::mt19937_64 rng(85);
  for (int trial = 0; trial < 200; ++trial) {
    const CovMode mode = trial % 2 ? CovMode::full : CovMode::diag;
    std::vector<OracleChainLayer> chain{{random_tensor({4, 3, 2, 1}, rng), std::nullopt},
                                        {random_tensor({4, 2, 2, 1}, rng), random_params(2, 3, rng)},
                                        {random_tensor({4, 3, 2, 1}, rng), random_params(3, 2, rng)}};
    const auto want = statistics_oracle(chain, mode);
    std::optional<KalmanEstimate> prev;
    for (std::size_t k = 0; k < chain.size(); ++k) {
      const KalmanLayerParams* p = chain[k].params ? &*chain[k].params : nullptr;
      const BknEvalResult r = bkn_forward_eval_batchstats(
          chain[k].x, prev ? &*prev : nullptr, p, AffineParams::identity(chain[k].x.dim(1)),
          NormEpsilon(), mode);
      const std::size_t C = r.estimate.channels();
      for (std::size_t i = 0; i < C; ++i) {
        CHECK(std::abs(r.estimate.mean_post[i] - want[k].post.mean[i]) <= 1e-12L);
        for (std::size_t j = 0; j < C; ++j)
          CHECK(std::abs(r.estimate.cov_post.entry(i, j) - want[k].post.cov[i * C + j]) <= 1e-12L);
      }
      prev = r.estimate;
    }
  }
}

TEST_CASE("variance gap is zero when moving statistics equal the full-batch statistics") {
  Network net = tiny_bkn_network();
  std::mt19937_64 rng(86);
  Dataset ds{random_tensor({12, 2, 3, 3}, rng), std::vector<int>(12, 0), 1};
  net.forward(ds.images, Mode::train);  // alpha = 1: moving := this batch
  const VarianceGapReport r = variance_gap(net, ds, ds.size());
  REQUIRE(r.layers.size() == 2);
  for (const auto& l : r.layers) {
    CHECK(l.batches == 1);
    CHECK(l.channels == 3);
    for (double g : l.gap) CHECK(g == 0.0);
  }
  CHECK(r.mean == 0.0);
}

TEST_CASE("identical samples give a gap equal to the moving variance") {
  Network net = tiny_bkn_network();
  std::mt19937_64 rng(87);
  // 1x1 maps, so identical samples have zero batch variance in the first layer.
  Dataset noisy{random_tensor({8, 2, 1, 1}, rng), std::vector<int>(8, 0), 1};
  net.forward(noisy.images, Mode::train);
  Dataset same{Tensor({6, 2, 1, 1}), std::vector<int>(6, 0), 1};
  const Tensor one = random_tensor({1, 2, 1, 1}, rng);
  for (std::size_t i = 0; i < same.images.size(); ++i) same.images[i] = one[i % one.size()];
  const VarianceGapReport r = variance_gap(net, same, 3);
  const NormLayer& first = std::get<NormLayer>(net.layers()[1]);
  const auto& g = r.layers.front();
  CHECK(g.layer_index == 1);
  CHECK(g.batches == 2);
  for (std::size_t c = 0; c < 3; ++c)
    for (std::size_t b = 0; b < 2; ++b) CHECK(g.gap[c * 2 + b] == first.moving.sigma.diagonal(c));
}

TEST_CASE("variance gap needs seeded moving statistics and writes a grid") {
  Network net = tiny_bkn_network();
  std::mt19937_64 rng(88);
  Dataset ds{random_tensor({8, 2, 3, 3}, rng), std::vector<int>(8, 0), 1};
  CHECK_THROWS_AS(variance_gap(net, ds, 2), InvalidArgument);
  net.forward(ds.images, Mode::train);
  const VarianceGapReport r = variance_gap(net, ds, 2);
  for (const auto& l : r.layers)
    for (double g : l.gap) CHECK(g >= 0.0);
  const auto path = fs::temp_directory_path() / "bkn_test_vargap.csv";
  write_variance_gap_csv(path, r);
  std::ifstream is(path);
  std::string line;
  std::vector<std::string> lines;
  while (std::getline(is, line)) lines.push_back(line);
  REQUIRE(lines.size() == 2 + 6);
  CHECK(lines[1] == "layer,channel,batch0,batch1,batch2,batch3");
  fs::remove(path);
}
