#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "rudd/decoder.hpp"
#include "testutil.hpp"

using namespace rudd;
using testutil::random_tensor;

TEST_CASE("preset parameter counts") {
  const std::pair<const char*, long> rows[] = {
      {"v4-40", 571},   {"v4-160", 1771},  {"v4-240", 2571}, {"v4-480", 4971},
      {"v4-960", 9771}, {"v4-1200", 12171}, {"v5-240", 11611}, {"v5-320", 15371},
  };
  for (auto [name, want] : rows) {
    DecoderConfig c = DecoderConfig::preset(name);
    CHECK(param_count(c) == want);
    Rng rng(1);
    CHECK(DecoderWeights::init(c, rng).num_params() == size_t(want));
  }
  CHECK_THROWS(DecoderConfig::preset("v9-999"));
}

TEST_CASE("zeroed residual convs leave the trunk untouched") {
  Rng rng(5);
  DecoderConfig cfg = DecoderConfig::custom(3, 8);
  DecoderWeights d = DecoderWeights::init(cfg, rng);
  // zero the two 3x3 residual convs; output must equal the conv3 stage
  for (size_t li = d.kernels.size() - 2; li < d.kernels.size(); ++li) {
    std::fill(d.kernels[li].data.begin(), d.kernels[li].data.end(), 0.0);
    std::fill(d.biases[li].data.begin(), d.biases[li].data.end(), 0.0);
  }
  Tensor<double> up = random_tensor({6, 6, 3}, rng);
  Tensor<double> out = decode(up, d);

  Tensor<double> y = kernels::conv2d_fwd(up, d.kernels[0], &d.biases[0]);
  for (auto& v : y.data) v = std::max(v, 0.0);
  y = kernels::conv2d_fwd(y, d.kernels[1], &d.biases[1]);
  for (auto& v : y.data) v = std::max(v, 0.0);
  REQUIRE(out.same_shape(y));
  for (size_t i = 0; i < y.numel(); ++i) CHECK(out[i] == doctest::Approx(y[i]).epsilon(1e-13));
}

TEST_CASE("tape decode equals numeric decode") {
  Rng rng(9);
  for (int d2 : {0, 6}) {
    DecoderConfig cfg = DecoderConfig::custom(2, 10, d2);
    DecoderWeights d = DecoderWeights::init(cfg, rng);
    Tensor<double> up = random_tensor({5, 4, 2}, rng);
    Tensor<double> want = decode(up, d);

    Tape<double> t;
    auto out = decode(t, t.leaf(up), decoder_vars(t, d));
    REQUIRE(t.val(out).shape == want.shape);
    for (size_t i = 0; i < want.numel(); ++i)
      CHECK(t.val(out)[i] == doctest::Approx(want[i]).epsilon(1e-12));
  }
}

TEST_CASE("decode via quantized pyramid path") {
  Rng rng(11);
  PyramidLayout lay = pyramid_dims(6, 6, 2);
  QuantizedPyramid q;
  q.layout = lay;
  for (size_t i = 0; i < lay.total; ++i) q.codes.push_back(quantize_symbol(rng.normal(0, 5)));
  DecoderWeights d = DecoderWeights::init(DecoderConfig::custom(2, 8), rng);
  Tensor<double> img = decode(q, d);
  CHECK(img.shape == std::vector<int>({6, 6, 3}));
  Tensor<double> c = clamp_image(img);
  for (double v : c.data) {
    CHECK(v >= 0.0);
    CHECK(v <= 1.0);
  }
}

TEST_CASE("decode gradients match finite differences") {
  Rng rng(13);
  DecoderConfig cfg = DecoderConfig::custom(2, 6);
  DecoderWeights d = DecoderWeights::init(cfg, rng);
  std::vector<Tensor<double>> leaves{random_tensor({4, 4, 2}, rng)};
  for (size_t i = 0; i < d.kernels.size(); ++i) {
    leaves.push_back(d.kernels[i]);
    leaves.push_back(d.biases[i]);
  }
  auto build = [&d](Tape<double>& t, const std::vector<Var<double>>& v) {
    DecoderVars<double> dv;
    dv.config = d.config;
    size_t k = 1;
    for (size_t i = 0; i < d.kernels.size(); ++i) {
      dv.kernels.push_back(v[k++]);
      dv.biases.push_back(v[k++]);
    }
    return t.sumsq(decode(t, v[0], dv));
  };
  auto r = testutil::check_gradients(leaves, build, 1e-5);
  CHECK(r.ok);
}

TEST_CASE("post-quantization honors the MSE budget") {
  Rng rng(17);
  DecoderWeights d = DecoderWeights::init(DecoderConfig::custom(2, 8), rng);
  PyramidLayout lay = pyramid_dims(6, 6, 2);
  std::vector<QuantizedPyramid> probes;
  for (int n = 0; n < 3; ++n) {
    QuantizedPyramid q;
    q.layout = lay;
    for (size_t i = 0; i < lay.total; ++i) q.codes.push_back(quantize_symbol(rng.normal(0, 5)));
    probes.push_back(std::move(q));
  }
  const double s = weight_population_std(d.flatten());

  PostQuantResult loose = post_quantize_decoder(d, probes, 1e9);
  CHECK(loose.budget_met);
  CHECK(loose.step == doctest::Approx(s));  // coarsest grid point wins

  PostQuantResult tight = post_quantize_decoder(d, probes, 0.0);
  CHECK_FALSE(tight.budget_met);
  CHECK(tight.step == doctest::Approx(s * std::pow(2.0, -8)));

  PostQuantResult mid = post_quantize_decoder(d, probes, 1e-4);
  CHECK(mid.mse <= 1e-4);
  // snapped to the chosen grid, and idempotent under re-snapping
  auto flat = mid.weights.flatten();
  CHECK(flat == quantize_weights(flat, mid.step));
  CHECK(decoder_rate_bits(mid.weights, mid.step) > 0);
}
