#pragma once

#include <cmath>
#include <cstdint>
#include <stdexcept>
#include <vector>

#include "rudd/latents.hpp"
#include "rudd/rng.hpp"
#include "rudd/tape.hpp"

namespace rudd {

inline constexpr double kLaplaceScaleMin = 1e-6;   // b floor
inline constexpr double kCodingProbFloor = 1.52587890625e-05;  // 2^-16, coding path only

struct EntropyNetConfig {
  int context_length = 8;  // C
  int width = 16;
  int depth = 2;  // number of affine layers: C->w, (depth-2)x(w->w), w->2

  bool preset_context() const {
    return context_length == 8 || context_length == 16 || context_length == 24 ||
           context_length == 32 || context_length == 64;
  }
};

// MLP weights as (W, b) pairs; hidden activations ReLU, final layer emits
// (mu, log sigma).
struct EntropyNetWeights {
  EntropyNetConfig config;
  std::vector<Tensor<double>> w;  // layer i: [in x out]
  std::vector<Tensor<double>> b;  // layer i: [out]

  static EntropyNetWeights init(const EntropyNetConfig& cfg, Rng& rng, double scale = 0.1) {
    if (cfg.depth < 2) throw std::invalid_argument("entropy net: depth must be >= 2");
    EntropyNetWeights net;
    net.config = cfg;
    std::vector<int> dims;
    dims.push_back(cfg.context_length);
    for (int i = 0; i < cfg.depth - 1; ++i) dims.push_back(cfg.width);
    dims.push_back(2);
    for (size_t i = 0; i + 1 < dims.size(); ++i) {
      Tensor<double> wi({dims[i], dims[i + 1]});
      for (auto& v : wi.data) v = rng.normal(0, scale / std::sqrt(double(dims[i])));
      net.w.push_back(std::move(wi));
      net.b.push_back(Tensor<double>({dims[i + 1]}));
    }
    return net;
  }

  size_t param_count() const {
    size_t n = 0;
    for (size_t i = 0; i < w.size(); ++i) n += w[i].numel() + b[i].numel();
    return n;
  }

  std::vector<double> flatten() const {
    std::vector<double> out;
    for (size_t i = 0; i < w.size(); ++i) {
      out.insert(out.end(), w[i].data.begin(), w[i].data.end());
      out.insert(out.end(), b[i].data.begin(), b[i].data.end());
    }
    return out;
  }

  void unflatten(const std::vector<double>& flat) {
    size_t k = 0;
    for (size_t i = 0; i < w.size(); ++i) {
      for (auto& v : w[i].data) v = flat[k++];
      for (auto& v : b[i].data) v = flat[k++];
    }
    if (k != flat.size()) throw std::invalid_argument("entropy net: unflatten size mismatch");
  }
};

struct LaplaceParams {
  double mu = 0;
  double b = 1;  // scale, clamped >= kLaplaceScaleMin
};

// ----------------------------------------------------------- causal context

// The C causal neighbors of raster position `pos` within one scale,
// nearest-first, as indices into the flat per-sample code vector; -1 marks a
// zero-filled slot.
inline std::vector<int64_t> context_indices(const PyramidLayout& lay, int scale, size_t pos, int C) {
  auto [h, w] = lay.dims[size_t(scale)];
  if (pos >= size_t(h) * size_t(w)) throw std::invalid_argument("context_indices: position out of range");
  std::vector<int64_t> idx(size_t(C), -1);
  const int64_t base = int64_t(lay.offsets[size_t(scale)]);
  for (int k = 0; k < C; ++k) {
    const int64_t p = int64_t(pos) - 1 - k;
    if (p < 0) break;
    idx[size_t(k)] = base + p;
  }
  return idx;
}

// Full [total x C] gather map covering every scale of the pyramid.
inline std::vector<int64_t> context_map(const PyramidLayout& lay, int C) {
  std::vector<int64_t> map;
  map.reserve(lay.total * size_t(C));
  for (int l = 0; l < lay.L; ++l) {
    auto [h, w] = lay.dims[size_t(l)];
    for (size_t pos = 0; pos < size_t(h) * size_t(w); ++pos) {
      auto idx = context_indices(lay, l, pos, C);
      map.insert(map.end(), idx.begin(), idx.end());
    }
  }
  return map;
}

// --------------------------------------------------------------- numeric MLP

inline std::pair<double, double> entropy_net_forward(const EntropyNetWeights& net,
                                                     const std::vector<double>& ctx) {
  std::vector<double> act(ctx);
  for (size_t li = 0; li < net.w.size(); ++li) {
    const auto& W = net.w[li];
    const auto& B = net.b[li];
    std::vector<double> nxt(size_t(W.shape[1]), 0.0);
    for (int i = 0; i < W.shape[0]; ++i) {
      const double a = act[size_t(i)];
      if (a == 0) continue;
      for (int j = 0; j < W.shape[1]; ++j) nxt[size_t(j)] += a * W.at2(i, j);
    }
    for (int j = 0; j < W.shape[1]; ++j) {
      nxt[size_t(j)] += B[size_t(j)];
      if (li + 1 < net.w.size() && nxt[size_t(j)] < 0) nxt[size_t(j)] = 0;  // hidden ReLU
    }
    act = std::move(nxt);
  }
  return {act[0], act[1]};
}

inline LaplaceParams predict_params(const EntropyNetWeights& net, const std::vector<double>& ctx) {
  auto [mu, logb] = entropy_net_forward(net, ctx);
  if (!std::isfinite(mu) || !std::isfinite(logb)) throw std::runtime_error("entropy net: non-finite output");
  return {mu, std::max(std::exp(logb), kLaplaceScaleMin)};
}

// ------------------------------------------------------- discretized Laplace

inline double laplace_cdf(double x, double mu, double b) {
  const double u = (x - mu) / b;
  return u < 0 ? 0.5 * std::exp(u) : 1.0 - 0.5 * std::exp(-u);
}

// P(z in [z-width/2, z+width/2]); floored at 2^-16 when `floored` (coding
// path), exact otherwise (training/analysis path).
inline double discrete_laplace_prob(double z, const LaplaceParams& p, bool floored = false,
                                    double width = 1.0) {
  const double hi = laplace_cdf(z + width / 2, p.mu, p.b);
  const double lo = laplace_cdf(z - width / 2, p.mu, p.b);
  double prob = hi - lo;
  if (prob < 0) prob = 0;
  if (prob > 1) prob = 1;
  if (floored && prob < kCodingProbFloor) prob = kCodingProbFloor;
  return prob;
}

// --------------------------------------------------------------- rate (hard)

// -sum log2 P over all codes of a quantized pyramid, contexts from the
// quantized values themselves. This is the coding-side estimate.
inline double rate_bits_latents(const QuantizedPyramid& q, const EntropyNetWeights& net,
                                bool floored = false) {
  const int C = net.config.context_length;
  double bits = 0;
  std::vector<double> ctx(size_t(C), 0.0);
  for (int l = 0; l < q.layout.L; ++l) {
    auto [h, w] = q.layout.dims[size_t(l)];
    for (size_t pos = 0; pos < size_t(h) * size_t(w); ++pos) {
      auto idx = context_indices(q.layout, l, pos, C);
      for (int k = 0; k < C; ++k) ctx[size_t(k)] = idx[size_t(k)] >= 0 ? double(q.codes[size_t(idx[size_t(k)])]) : 0.0;
      const LaplaceParams p = predict_params(net, ctx);
      const double prob = discrete_laplace_prob(double(q.codes[q.layout.offsets[size_t(l)] + pos]), p, floored);
      bits += -std::log2(std::max(prob, 1e-300));
    }
  }
  return bits;
}

// ------------------------------------------------------------ rate (on tape)

template <class R>
struct EntropyNetVars {
  EntropyNetConfig config;
  std::vector<Var<R>> w, b;
};

template <class R>
EntropyNetVars<R> entropy_net_vars(Tape<R>& t, const EntropyNetWeights& net) {
  EntropyNetVars<R> v;
  v.config = net.config;
  for (size_t i = 0; i < net.w.size(); ++i) {
    Tensor<R> wi(net.w[i].shape);
    for (size_t k = 0; k < wi.numel(); ++k) wi[k] = R(net.w[i][k]);
    Tensor<R> bi(net.b[i].shape);
    for (size_t k = 0; k < bi.numel(); ++k) bi[k] = R(net.b[i][k]);
    v.w.push_back(t.leaf(std::move(wi)));
    v.b.push_back(t.leaf(std::move(bi)));
  }
  return v;
}

// Batched causal MLP over all codes: contexts gathered from `codes`
// (relaxed values in training), producing per-code (mu, log b) and the total
// -sum log2 P with the unit integral width. Differentiable in codes and
// weights.
template <class R>
Var<R> rate_bits_latents(Tape<R>& t, Var<R> codes, const PyramidLayout& lay,
                         const EntropyNetVars<R>& net) {
  const int C = net.config.context_length;
  const int M = int(lay.total);
  Var<R> ctx = t.gather_zero(codes, context_map(lay, C), {M, C});
  Var<R> act = ctx;
  for (size_t li = 0; li < net.w.size(); ++li) {
    act = t.add_rowvec(t.matmul(act, net.w[li]), net.b[li]);
    if (li + 1 < net.w.size()) act = t.relu(act);
  }
  // column picks
  Tensor<R> e0({2, 1}), e1({2, 1});
  e0.at2(0, 0) = R(1);
  e1.at2(1, 0) = R(1);
  Var<R> mu = t.reshape(t.matmul(act, t.constant(e0)), {M});
  Var<R> logb = t.reshape(t.matmul(act, t.constant(e1)), {M});
  Var<R> bits = t.laplace_bits(codes, mu, logb, R(kLaplaceScaleMin));
  return t.sum(bits);
}

// -------------------------------------------------- weight quantization/rate

inline std::vector<double> quantize_weights(const std::vector<double>& w, double step) {
  if (step <= 0) throw std::invalid_argument("quantize_weights: step must be > 0");
  std::vector<double> out(w.size());
  for (size_t i = 0; i < w.size(); ++i) out[i] = std::nearbyint(w[i] / step) * step;
  return out;
}

inline std::vector<int32_t> weight_symbols(const std::vector<double>& w, double step) {
  std::vector<int32_t> out(w.size());
  for (size_t i = 0; i < w.size(); ++i) {
    double k = std::nearbyint(w[i] / step);
    out[i] = int32_t(std::clamp(k, double(kSymbolMin), double(kSymbolMax)));
  }
  return out;
}

inline double weight_population_std(const std::vector<double>& w) {
  if (w.empty()) return 0;
  double mean = 0;
  for (double v : w) mean += v;
  mean /= double(w.size());
  double var = 0;
  for (double v : w) var += (v - mean) * (v - mean);
  return std::sqrt(var / double(w.size()));
}

// Zero-mean Laplace prior over quantized weights: scale std(w_bar)/sqrt(2),
// bins of width `step`. Shared by the entropy-net and decoder weight rates.
inline LaplaceParams weight_prior(const std::vector<double>& quantized) {
  const double s = weight_population_std(quantized) / std::sqrt(2.0);
  return {0.0, std::max(s, kLaplaceScaleMin)};
}

inline double weight_rate_bits(const std::vector<double>& quantized, double step,
                               bool floored = false) {
  if (step <= 0) throw std::invalid_argument("weight_rate_bits: step must be > 0");
  const LaplaceParams prior = weight_prior(quantized);
  double bits = 0;
  for (double wq : quantized) {
    const double prob = discrete_laplace_prob(wq, prior, floored, step);
    bits += -std::log2(std::max(prob, 1e-300));
  }
  return bits;
}

// Grid search Q in {std(w) * 2^k : k = -8..0}: minimize coded bits plus a
// prediction-MSE penalty on a probe context set.
inline double choose_entropy_quant_step(const EntropyNetWeights& net,
                                        const std::vector<std::vector<double>>& probe_contexts,
                                        double penalty = 1e4) {
  const auto flat = net.flatten();
  const double s = weight_population_std(flat);
  const double base = s > 0 ? s : 1e-3;
  std::vector<std::pair<double, double>> ref;
  for (const auto& c : probe_contexts) ref.push_back(entropy_net_forward(net, c));
  double best_q = base, best_obj = 0;
  bool first = true;
  for (int k = -8; k <= 0; ++k) {
    const double q = base * std::pow(2.0, k);
    auto wq = quantize_weights(flat, q);
    EntropyNetWeights qn = net;
    qn.unflatten(wq);
    double mse = 0;
    for (size_t i = 0; i < probe_contexts.size(); ++i) {
      auto [m, lb] = entropy_net_forward(qn, probe_contexts[i]);
      mse += (m - ref[i].first) * (m - ref[i].first) + (lb - ref[i].second) * (lb - ref[i].second);
    }
    if (!probe_contexts.empty()) mse /= double(probe_contexts.size());
    const double obj = weight_rate_bits(wq, q) + penalty * mse;
    if (first || obj < best_obj) {
      best_obj = obj;
      best_q = q;
      first = false;
    }
  }
  return best_q;
}

}  // namespace rudd
