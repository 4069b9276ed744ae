#pragma once

#include <cstdint>
#include <stdexcept>
#include <utility>
#include <vector>

#include "rudd/rng.hpp"
#include "rudd/tape.hpp"
#include "rudd/tensor.hpp"

namespace rudd {

inline constexpr int32_t kSymbolMin = -32768;
inline constexpr int32_t kSymbolMax = 32767;

// Scale dims follow floor-halving: scale l (1-based) is
// floor(H/2^(l-1)) x floor(W/2^(l-1)).
struct PyramidLayout {
  int H = 0, W = 0, L = 0;
  std::vector<std::pair<int, int>> dims;  // per scale, finest first
  std::vector<size_t> offsets;            // into the flattened code vector
  size_t total = 0;
};

inline PyramidLayout pyramid_dims(int H, int W, int L) {
  if (H < 1 || W < 1 || L < 1) throw std::invalid_argument("pyramid_dims: H, W, L must be >= 1");
  PyramidLayout lay;
  lay.H = H;
  lay.W = W;
  lay.L = L;
  int h = H, w = W;
  for (int l = 1; l <= L; ++l) {
    if (h < 1 || w < 1)
      throw std::invalid_argument("pyramid_dims: scale " + std::to_string(l) + " floors to zero (L too large)");
    lay.dims.emplace_back(h, w);
    lay.offsets.push_back(lay.total);
    lay.total += size_t(h) * size_t(w);
    h /= 2;
    w /= 2;
  }
  return lay;
}

// Real-valued multiscale latents for one synthetic sample, stored as a flat
// vector of all scales (finest first, row-major within a scale).
struct LatentPyramid {
  PyramidLayout layout;
  Tensor<double> codes;  // flat, layout.total elements

  LatentPyramid() = default;
  explicit LatentPyramid(PyramidLayout lay) : layout(std::move(lay)), codes({int(layout.total)}) {}
};

struct QuantizedPyramid {
  PyramidLayout layout;
  std::vector<int32_t> codes;
};

inline int32_t quantize_symbol(double z) {
  double q = std::floor(z + 0.5);  // half-up, including negatives
  if (q < double(kSymbolMin)) q = kSymbolMin;
  if (q > double(kSymbolMax)) q = kSymbolMax;
  return int32_t(q);
}

inline QuantizedPyramid quantize_round(const LatentPyramid& p) {
  QuantizedPyramid q;
  q.layout = p.layout;
  q.codes.resize(p.codes.numel());
  for (size_t i = 0; i < p.codes.numel(); ++i) {
    if (!std::isfinite(p.codes[i])) throw std::invalid_argument("quantize_round: non-finite latent");
    q.codes[i] = quantize_symbol(p.codes[i]);
  }
  return q;
}

inline LatentPyramid dequantize(const QuantizedPyramid& q) {
  LatentPyramid p(q.layout);
  for (size_t i = 0; i < q.codes.size(); ++i) p.codes[i] = double(q.codes[i]);
  return p;
}

// z + u, u ~ U(-1/2, 1/2) i.i.d.
inline LatentPyramid relax_uniform_noise(const LatentPyramid& p, Rng& rng) {
  LatentPyramid out = p;
  for (size_t i = 0; i < out.codes.numel(); ++i) out.codes[i] += rng.uniform(-0.5, 0.5);
  return out;
}

// -------------------------------------------------------- tape-level views --

// Noise relaxation on the tape: value shifts, gradient passes through.
template <class R>
Var<R> relax_uniform_noise(Tape<R>& t, Var<R> codes, Rng& rng) {
  Tensor<R> u(t.val(codes).shape);
  for (auto& v : u.data) v = R(rng.uniform(-0.5, 0.5));
  return t.add(codes, t.constant(std::move(u)));
}

template <class R>
Var<R> relax_ste(Tape<R>& t, Var<R> codes) {
  return t.round_ste(codes);
}

// Per-scale 2-D grids out of the flat code vector.
template <class R>
std::vector<Var<R>> pyramid_grids(Tape<R>& t, Var<R> codes, const PyramidLayout& lay) {
  std::vector<Var<R>> grids;
  for (int l = 0; l < lay.L; ++l) {
    auto [h, w] = lay.dims[size_t(l)];
    grids.push_back(t.slice_range(codes, lay.offsets[size_t(l)], {h, w}));
  }
  return grids;
}

// Up(z): every scale bilinearly upsampled to H x W, channels in scale order
// (finest first).
template <class R>
Var<R> upsample_concat(Tape<R>& t, Var<R> codes, const PyramidLayout& lay) {
  std::vector<Var<R>> chans;
  for (auto g : pyramid_grids(t, codes, lay)) chans.push_back(t.upsample_bilinear(g, lay.H, lay.W));
  return t.stack_channels(chans);
}

// Numeric (non-tape) variant for coding-side use.
inline Tensor<double> upsample_concat(const LatentPyramid& p) {
  const auto& lay = p.layout;
  Tensor<double> out({lay.H, lay.W, lay.L});
  for (int l = 0; l < lay.L; ++l) {
    auto [h, w] = lay.dims[size_t(l)];
    Tensor<double> grid({h, w});
    for (size_t i = 0; i < grid.numel(); ++i) grid[i] = p.codes[lay.offsets[size_t(l)] + i];
    Tensor<double> up = kernels::upsample_bilinear(grid, lay.H, lay.W);
    for (int y = 0; y < lay.H; ++y)
      for (int x = 0; x < lay.W; ++x) out.at3(y, x, l) = up.at2(y, x);
  }
  return out;
}

}  // namespace rudd
