#pragma once

#include <cmath>
#include <optional>
#include <string>
#include <vector>

#include "rudd/entropy_model.hpp"
#include "rudd/latents.hpp"
#include "rudd/rng.hpp"
#include "rudd/tape.hpp"

namespace rudd {

// Five-layer synthesis network g(.; psi): three 1x1 convs (the middle one
// optional) followed by two residual 3x3 convs at 3 channels. ReLU after
// layers 1-4, none after layer 5; residual adds are post-activation
// identities when their convs are zero.
struct DecoderConfig {
  std::string version;  // preset name or "custom"
  int L = 6;            // input channels = latent scales
  int d1 = 40, d2 = 0, d3 = 3;

  static DecoderConfig preset(const std::string& name, int L = 6) {
    struct Row {
      const char* v;
      int d1, d2;
    };
    static const Row rows[] = {{"v4-40", 40, 0},    {"v4-160", 160, 0},  {"v4-240", 240, 0},
                               {"v4-480", 480, 0},  {"v4-960", 960, 0},  {"v4-1200", 1200, 0},
                               {"v5-240", 240, 40}, {"v5-320", 320, 40}};
    for (const auto& r : rows)
      if (name == r.v) return DecoderConfig{name, L, r.d1, r.d2, 3};
    throw std::invalid_argument("unknown decoder preset: " + name);
  }

  static DecoderConfig custom(int L, int d1, int d2 = 0) { return DecoderConfig{"custom", L, d1, d2, 3}; }

  static const std::vector<std::string>& preset_names() {
    static const std::vector<std::string> names = {"v4-40",  "v4-160",  "v4-240", "v4-480",
                                                   "v4-960", "v4-1200", "v5-240", "v5-320"};
    return names;
  }
};

// Trainable parameter count. Presets use L=6 and reproduce Table counts
// (571 ... 15,371) exactly.
inline long param_count(const DecoderConfig& c) {
  const int din3 = c.d2 > 0 ? c.d2 : c.d1;
  long n = long(c.L) * c.d1 + c.d1;                       // conv1 1x1
  if (c.d2 > 0) n += long(c.d1) * c.d2 + c.d2;            // conv2 1x1
  n += long(din3) * c.d3 + c.d3;                          // conv3 1x1
  n += 2 * (long(3) * 3 * c.d3 * c.d3 + c.d3);            // conv4, conv5 3x3 residual
  return n;
}

struct DecoderWeights {
  DecoderConfig config;
  // kernels kh x kw x Cin x Cout and biases, in layer order (conv2 omitted
  // when d2 == 0)
  std::vector<Tensor<double>> kernels;
  std::vector<Tensor<double>> biases;

  static DecoderWeights init(const DecoderConfig& cfg, Rng& rng, double scale = 0.5) {
    DecoderWeights d;
    d.config = cfg;
    auto make = [&](int kh, int kw, int ci, int co) {
      Tensor<double> k({kh, kw, ci, co});
      for (auto& v : k.data) v = rng.normal(0, scale / std::sqrt(double(kh * kw * ci)));
      d.kernels.push_back(std::move(k));
      d.biases.push_back(Tensor<double>({co}));
    };
    make(1, 1, cfg.L, cfg.d1);
    if (cfg.d2 > 0) make(1, 1, cfg.d1, cfg.d2);
    make(1, 1, cfg.d2 > 0 ? cfg.d2 : cfg.d1, cfg.d3);
    make(3, 3, cfg.d3, cfg.d3);
    make(3, 3, cfg.d3, cfg.d3);
    return d;
  }

  size_t num_params() const {
    size_t n = 0;
    for (size_t i = 0; i < kernels.size(); ++i) n += kernels[i].numel() + biases[i].numel();
    return n;
  }

  std::vector<double> flatten() const {
    std::vector<double> out;
    for (size_t i = 0; i < kernels.size(); ++i) {
      out.insert(out.end(), kernels[i].data.begin(), kernels[i].data.end());
      out.insert(out.end(), biases[i].data.begin(), biases[i].data.end());
    }
    return out;
  }

  void unflatten(const std::vector<double>& flat) {
    size_t k = 0;
    for (size_t i = 0; i < kernels.size(); ++i) {
      for (auto& v : kernels[i].data) v = flat[k++];
      for (auto& v : biases[i].data) v = flat[k++];
    }
    if (k != flat.size()) throw std::invalid_argument("decoder: unflatten size mismatch");
  }
};

// --------------------------------------------------------------- decode ----

template <class R>
struct DecoderVars {
  DecoderConfig config;
  std::vector<Var<R>> kernels, biases;
};

template <class R>
DecoderVars<R> decoder_vars(Tape<R>& t, const DecoderWeights& d) {
  DecoderVars<R> v;
  v.config = d.config;
  for (size_t i = 0; i < d.kernels.size(); ++i) {
    Tensor<R> k(d.kernels[i].shape);
    for (size_t j = 0; j < k.numel(); ++j) k[j] = R(d.kernels[i][j]);
    Tensor<R> b(d.biases[i].shape);
    for (size_t j = 0; j < b.numel(); ++j) b[j] = R(d.biases[i][j]);
    v.kernels.push_back(t.leaf(std::move(k)));
    v.biases.push_back(t.leaf(std::move(b)));
  }
  return v;
}

// up: H x W x L tensor (from upsample_concat). Output H x W x 3, unclamped.
template <class R>
Var<R> decode(Tape<R>& t, Var<R> up, const DecoderVars<R>& d) {
  if (t.val(up).shape[2] != d.config.L)
    throw std::invalid_argument("decode: pyramid scales != decoder input channels");
  size_t li = 0;
  Var<R> y = t.relu(t.conv2d(up, d.kernels[li], d.biases[li]));
  ++li;
  if (d.config.d2 > 0) {
    y = t.relu(t.conv2d(y, d.kernels[li], d.biases[li]));
    ++li;
  }
  y = t.relu(t.conv2d(y, d.kernels[li], d.biases[li]));
  ++li;
  y = t.relu(t.add(t.conv2d(y, d.kernels[li], d.biases[li]), y));
  ++li;
  y = t.add(t.conv2d(y, d.kernels[li], d.biases[li]), y);
  return y;
}

// Numeric decode for the coding/evaluation side.
inline Tensor<double> decode(const Tensor<double>& up, const DecoderWeights& d) {
  if (up.shape[2] != d.config.L) throw std::invalid_argument("decode: channel mismatch");
  auto relu = [](Tensor<double>& t) {
    for (auto& v : t.data)
      if (v < 0) v = 0;
  };
  size_t li = 0;
  Tensor<double> y = kernels::conv2d_fwd(up, d.kernels[li], &d.biases[li]);
  relu(y);
  ++li;
  if (d.config.d2 > 0) {
    y = kernels::conv2d_fwd(y, d.kernels[li], &d.biases[li]);
    relu(y);
    ++li;
  }
  y = kernels::conv2d_fwd(y, d.kernels[li], &d.biases[li]);
  relu(y);
  ++li;
  {
    Tensor<double> r = kernels::conv2d_fwd(y, d.kernels[li], &d.biases[li]);
    for (size_t i = 0; i < y.numel(); ++i) y[i] += r[i];
    relu(y);
    ++li;
  }
  {
    Tensor<double> r = kernels::conv2d_fwd(y, d.kernels[li], &d.biases[li]);
    for (size_t i = 0; i < y.numel(); ++i) y[i] += r[i];
  }
  return y;
}

inline Tensor<double> decode(const QuantizedPyramid& q, const DecoderWeights& d) {
  return decode(upsample_concat(dequantize(q)), d);
}

// [0,1] clamp applied only at image export.
inline Tensor<double> clamp_image(Tensor<double> img) {
  for (auto& v : img.data) v = std::clamp(v, 0.0, 1.0);
  return img;
}

// --------------------------------------------------- post-quantization ----

struct PostQuantResult {
  DecoderWeights weights;  // snapped to the chosen grid
  double step = 0;
  double mse = 0;
  bool budget_met = true;
};

// Coarsest step on the geometric grid {std(psi) * 2^k : k = -8..0} whose
// decoded-image MSE against the unquantized decoder stays within budget.
// Falls back to the finest point (budget_met = false) when none qualifies.
inline PostQuantResult post_quantize_decoder(const DecoderWeights& d,
                                             const std::vector<QuantizedPyramid>& probes,
                                             double mse_budget) {
  const auto flat = d.flatten();
  const double s = weight_population_std(flat);
  const double base = s > 0 ? s : 1e-3;
  std::vector<Tensor<double>> ref;
  for (const auto& p : probes) ref.push_back(decode(p, d));

  PostQuantResult best;
  bool have = false;
  double finest_mse = 0;
  DecoderWeights finest = d;
  double finest_q = base * std::pow(2.0, -8);
  for (int k = 0; k >= -8; --k) {  // coarse to fine
    const double q = base * std::pow(2.0, k);
    DecoderWeights cand = d;
    cand.unflatten(quantize_weights(flat, q));
    double mse = 0;
    size_t n = 0;
    for (size_t i = 0; i < probes.size(); ++i) {
      Tensor<double> out = decode(probes[i], cand);
      for (size_t j = 0; j < out.numel(); ++j) {
        const double e = out[j] - ref[i][j];
        mse += e * e;
      }
      n += out.numel();
    }
    if (n) mse /= double(n);
    if (k == -8) {
      finest_mse = mse;
      finest = cand;
      finest_q = q;
    }
    if (mse <= mse_budget && !have) {
      best.weights = cand;
      best.step = q;
      best.mse = mse;
      best.budget_met = true;
      have = true;
      break;
    }
  }
  if (!have) {
    best.weights = finest;
    best.step = finest_q;
    best.mse = finest_mse;
    best.budget_met = false;
  }
  return best;
}

// Same prior construction as the entropy-net weight rate.
inline double decoder_rate_bits(const DecoderWeights& quantized, double step) {
  return weight_rate_bits(quantized.flatten(), step);
}

}  // namespace rudd
