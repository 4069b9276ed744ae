#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "rudd/entropy_model.hpp"
#include "testutil.hpp"

using namespace rudd;

namespace {

QuantizedPyramid random_quantized(const PyramidLayout& lay, Rng& rng, double spread = 8.0) {
  QuantizedPyramid q;
  q.layout = lay;
  for (size_t i = 0; i < lay.total; ++i) q.codes.push_back(quantize_symbol(rng.normal(0, spread)));
  return q;
}

}  // namespace

TEST_CASE("context is causal, nearest-first, and scale-local") {
  PyramidLayout lay = pyramid_dims(8, 8, 2);
  const int C = 8;
  for (int l = 0; l < 2; ++l) {
    auto [h, w] = lay.dims[size_t(l)];
    for (size_t pos = 0; pos < size_t(h) * size_t(w); ++pos) {
      auto idx = context_indices(lay, l, pos, C);
      REQUIRE(idx.size() == size_t(C));
      const int64_t self = int64_t(lay.offsets[size_t(l)] + pos);
      for (int k = 0; k < C; ++k) {
        if (idx[size_t(k)] < 0) continue;
        CHECK(idx[size_t(k)] == self - 1 - k);                      // nearest-first
        CHECK(idx[size_t(k)] >= int64_t(lay.offsets[size_t(l)]));   // same scale
        CHECK(idx[size_t(k)] < self);                               // strictly causal
      }
      // zero-fill exactly where history runs out
      for (int k = 0; k < C; ++k) CHECK((idx[size_t(k)] < 0) == (int64_t(pos) - 1 - k < 0));
    }
  }
  CHECK(context_map(lay, C).size() == lay.total * size_t(C));
}

TEST_CASE("discrete Laplace normalizes over the symbol alphabet") {
  for (auto [mu, b] : {std::pair{0.0, 1.0}, {3.7, 0.2}, {-120.0, 25.0}, {0.0, 1e-6}}) {
    const LaplaceParams p{mu, b};
    double total = 0;
    for (int32_t z = kSymbolMin; z <= kSymbolMax; ++z) total += discrete_laplace_prob(double(z), p);
    CHECK(total == doctest::Approx(1.0).epsilon(1e-9));
  }
}

TEST_CASE("tape rate equals the numeric coding-side estimate on hard codes") {
  Rng rng(3);
  PyramidLayout lay = pyramid_dims(8, 8, 2);
  QuantizedPyramid q = random_quantized(lay, rng);
  EntropyNetConfig cfg{8, 16, 2};
  EntropyNetWeights net = EntropyNetWeights::init(cfg, rng);

  const double numeric = rate_bits_latents(q, net, false);

  Tape<double> t;
  Tensor<double> codes({int(lay.total)});
  for (size_t i = 0; i < lay.total; ++i) codes[i] = double(q.codes[i]);
  auto bits = rate_bits_latents(t, t.leaf(codes), lay, entropy_net_vars(t, net));
  CHECK(t.val(bits)[0] == doctest::Approx(numeric).epsilon(1e-10));
}

TEST_CASE("rate gradients match finite differences") {
  Rng rng(7);
  PyramidLayout lay = pyramid_dims(4, 4, 2);
  EntropyNetConfig cfg{8, 8, 2};
  EntropyNetWeights net = EntropyNetWeights::init(cfg, rng);

  Tensor<double> codes({int(lay.total)});
  for (auto& v : codes.data) v = rng.normal(0, 3);

  std::vector<Tensor<double>> leaves{codes};
  for (size_t i = 0; i < net.w.size(); ++i) {
    leaves.push_back(net.w[i]);
    leaves.push_back(net.b[i]);
  }
  auto build = [lay, &net](Tape<double>& t, const std::vector<Var<double>>& v) {
    EntropyNetVars<double> ev;
    ev.config = net.config;
    size_t k = 1;
    for (size_t i = 0; i < net.w.size(); ++i) {
      ev.w.push_back(v[k++]);
      ev.b.push_back(v[k++]);
    }
    return rate_bits_latents(t, v[0], lay, ev);
  };
  auto r = testutil::check_gradients(leaves, build, 1e-5);
  CHECK_MESSAGE(r.ok, "max rel err ", r.max_rel_err);
}

TEST_CASE("noise-relaxed rate tracks the hard rate") {
  // Monte-Carlo: |E[rate_noise] - rate_hard| small per symbol on Laplace data
  Rng rng(11);
  PyramidLayout lay = pyramid_dims(8, 8, 2);
  EntropyNetConfig cfg{8, 16, 2};
  EntropyNetWeights net = EntropyNetWeights::init(cfg, rng);
  QuantizedPyramid q = random_quantized(lay, rng, 4.0);

  const double hard = rate_bits_latents(q, net, false);
  LatentPyramid p = dequantize(q);
  double acc = 0;
  const int draws = 200;
  for (int d = 0; d < draws; ++d) {
    Tape<double> t;
    auto noisy = relax_uniform_noise(t, t.leaf(p.codes), rng);
    acc += t.val(rate_bits_latents(t, noisy, lay, entropy_net_vars(t, net)))[0];
  }
  const double diff_per_symbol = std::abs(acc / draws - hard) / double(lay.total);
  CHECK(diff_per_symbol <= 0.1);
}

TEST_CASE("weight quantization grid and prior") {
  Rng rng(13);
  std::vector<double> w(200);
  for (auto& v : w) v = rng.normal(0, 0.3);

  const double step = 0.01;
  auto wq = quantize_weights(w, step);
  auto wq2 = quantize_weights(wq, step);  // idempotent
  CHECK(wq == wq2);
  for (double v : wq) CHECK(std::abs(v / step - std::nearbyint(v / step)) < 1e-9);

  LaplaceParams prior = weight_prior(wq);
  CHECK(prior.mu == 0.0);
  CHECK(prior.b == doctest::Approx(weight_population_std(wq) / std::sqrt(2.0)));
  CHECK(weight_rate_bits(wq, step) > 0);
}

TEST_CASE("entropy quant step search returns a grid point") {
  Rng rng(17);
  EntropyNetWeights net = EntropyNetWeights::init({8, 8, 2}, rng);
  std::vector<std::vector<double>> probes;
  for (int i = 0; i < 32; ++i) {
    std::vector<double> c(8);
    for (auto& v : c) v = rng.normal(0, 4);
    probes.push_back(std::move(c));
  }
  const double q = choose_entropy_quant_step(net, probes);
  const double s = weight_population_std(net.flatten());
  bool on_grid = false;
  for (int k = -8; k <= 0; ++k)
    if (std::abs(q - s * std::pow(2.0, k)) < 1e-12) on_grid = true;
  CHECK(on_grid);
}

TEST_CASE("entropy net rejects bad configs") {
  Rng rng(1);
  CHECK_THROWS(EntropyNetWeights::init({8, 8, 1}, rng));
  EntropyNetConfig c{12, 8, 2};
  CHECK_FALSE(c.preset_context());
  CHECK(EntropyNetConfig{24, 8, 2}.preset_context());
}
