#pragma once

#include <stdexcept>

#include "rudd/tensor.hpp"

#ifdef _OPENMP
#include <omp.h>
#endif

// Dense kernels for the conv/upsample/pool family. Every kernel has a plain
// serial implementation (the reference) and an OpenMP variant parallelized
// over output elements only, so results are bit-identical for any thread
// count. Image layout is H x W x C; conv kernels are kh x kw x Cin x Cout.

namespace rudd::kernels {

inline constexpr size_t kOmpThreshold = 1 << 14;  // flops below this stay serial

// ---------------------------------------------------------------- conv2d ----

template <class R>
Tensor<R> conv2d_fwd_serial(const Tensor<R>& in, const Tensor<R>& ker, const Tensor<R>* bias) {
  if (in.rank() != 3 || ker.rank() != 4) throw std::invalid_argument("conv2d: input must be HxWxC, kernel khxkwxCinxCout");
  const int H = in.shape[0], W = in.shape[1], Ci = in.shape[2];
  const int kh = ker.shape[0], kw = ker.shape[1], Co = ker.shape[3];
  if (kh % 2 == 0 || kw % 2 == 0) throw std::invalid_argument("conv2d: kernel dims must be odd");
  if (ker.shape[2] != Ci) throw std::invalid_argument("conv2d: kernel Cin " + std::to_string(ker.shape[2]) + " != input C " + std::to_string(Ci));
  if (bias && (bias->rank() != 1 || bias->shape[0] != Co)) throw std::invalid_argument("conv2d: bias shape mismatch");
  Tensor<R> out({H, W, Co});
  const int ph = kh / 2, pw = kw / 2;
  for (int y = 0; y < H; ++y)
    for (int x = 0; x < W; ++x)
      for (int co = 0; co < Co; ++co) {
        R acc = bias ? (*bias)[size_t(co)] : R(0);
        for (int dy = 0; dy < kh; ++dy) {
          const int sy = y + dy - ph;
          if (sy < 0 || sy >= H) continue;
          for (int dx = 0; dx < kw; ++dx) {
            const int sx = x + dx - pw;
            if (sx < 0 || sx >= W) continue;
            for (int ci = 0; ci < Ci; ++ci) acc += in.at3(sy, sx, ci) * ker.at4(dy, dx, ci, co);
          }
        }
        out.at3(y, x, co) = acc;
      }
  return out;
}

template <class R>
Tensor<R> conv2d_fwd(const Tensor<R>& in, const Tensor<R>& ker, const Tensor<R>* bias) {
  const int H = in.shape[0], W = in.shape[1], Ci = in.shape[2];
  const int kh = ker.shape[0], kw = ker.shape[1], Co = ker.shape[3];
  const size_t work = size_t(H) * W * Co * kh * kw * Ci;
#ifdef _OPENMP
  if (work >= kOmpThreshold) {
    if (in.rank() != 3 || ker.rank() != 4 || ker.shape[2] != Ci || kh % 2 == 0 || kw % 2 == 0)
      throw std::invalid_argument("conv2d: shape mismatch");
    Tensor<R> out({H, W, Co});
    const int ph = kh / 2, pw = kw / 2;
#pragma omp parallel for schedule(static)
    for (int y = 0; y < H; ++y)
      for (int x = 0; x < W; ++x)
        for (int co = 0; co < Co; ++co) {
          R acc = bias ? (*bias)[size_t(co)] : R(0);
          for (int dy = 0; dy < kh; ++dy) {
            const int sy = y + dy - ph;
            if (sy < 0 || sy >= H) continue;
            for (int dx = 0; dx < kw; ++dx) {
              const int sx = x + dx - pw;
              if (sx < 0 || sx >= W) continue;
              for (int ci = 0; ci < Ci; ++ci) acc += in.at3(sy, sx, ci) * ker.at4(dy, dx, ci, co);
            }
          }
          out.at3(y, x, co) = acc;
        }
    return out;
  }
#endif
  (void)work;
  return conv2d_fwd_serial(in, ker, bias);
}

// Adjoint of conv2d_fwd with respect to the input.
template <class R>
Tensor<R> conv2d_dinput_serial(const Tensor<R>& gout, const Tensor<R>& ker) {
  const int H = gout.shape[0], W = gout.shape[1], Co = gout.shape[2];
  const int kh = ker.shape[0], kw = ker.shape[1], Ci = ker.shape[2];
  if (ker.shape[3] != Co) throw std::invalid_argument("conv2d_dinput: channel mismatch");
  Tensor<R> gin({H, W, Ci});
  const int ph = kh / 2, pw = kw / 2;
  for (int y = 0; y < H; ++y)
    for (int x = 0; x < W; ++x)
      for (int ci = 0; ci < Ci; ++ci) {
        R acc = 0;
        // output position (oy,ox) touched input (y,x) via tap (dy,dx) iff
        // y = oy + dy - ph, so oy = y - dy + ph.
        for (int dy = 0; dy < kh; ++dy) {
          const int oy = y - dy + ph;
          if (oy < 0 || oy >= H) continue;
          for (int dx = 0; dx < kw; ++dx) {
            const int ox = x - dx + pw;
            if (ox < 0 || ox >= W) continue;
            for (int co = 0; co < Co; ++co) acc += gout.at3(oy, ox, co) * ker.at4(dy, dx, ci, co);
          }
        }
        gin.at3(y, x, ci) = acc;
      }
  return gin;
}

template <class R>
Tensor<R> conv2d_dinput(const Tensor<R>& gout, const Tensor<R>& ker) {
  const int H = gout.shape[0], W = gout.shape[1], Co = gout.shape[2];
  const int kh = ker.shape[0], kw = ker.shape[1], Ci = ker.shape[2];
#ifdef _OPENMP
  if (size_t(H) * W * Ci * kh * kw * Co >= kOmpThreshold) {
    if (ker.shape[3] != Co) throw std::invalid_argument("conv2d_dinput: channel mismatch");
    Tensor<R> gin({H, W, Ci});
    const int ph = kh / 2, pw = kw / 2;
#pragma omp parallel for schedule(static)
    for (int y = 0; y < H; ++y)
      for (int x = 0; x < W; ++x)
        for (int ci = 0; ci < Ci; ++ci) {
          R acc = 0;
          for (int dy = 0; dy < kh; ++dy) {
            const int oy = y - dy + ph;
            if (oy < 0 || oy >= H) continue;
            for (int dx = 0; dx < kw; ++dx) {
              const int ox = x - dx + pw;
              if (ox < 0 || ox >= W) continue;
              for (int co = 0; co < Co; ++co) acc += gout.at3(oy, ox, co) * ker.at4(dy, dx, ci, co);
            }
          }
          gin.at3(y, x, ci) = acc;
        }
    return gin;
  }
#endif
  return conv2d_dinput_serial(gout, ker);
}

// Adjoint of conv2d_fwd with respect to the kernel.
template <class R>
Tensor<R> conv2d_dkernel_serial(const Tensor<R>& in, const Tensor<R>& gout, int kh, int kw) {
  const int H = in.shape[0], W = in.shape[1], Ci = in.shape[2];
  const int Co = gout.shape[2];
  if (gout.shape[0] != H || gout.shape[1] != W) throw std::invalid_argument("conv2d_dkernel: spatial mismatch");
  Tensor<R> gk({kh, kw, Ci, Co});
  const int ph = kh / 2, pw = kw / 2;
  for (int dy = 0; dy < kh; ++dy)
    for (int dx = 0; dx < kw; ++dx)
      for (int ci = 0; ci < Ci; ++ci)
        for (int co = 0; co < Co; ++co) {
          R acc = 0;
          for (int y = 0; y < H; ++y) {
            const int sy = y + dy - ph;
            if (sy < 0 || sy >= H) continue;
            for (int x = 0; x < W; ++x) {
              const int sx = x + dx - pw;
              if (sx < 0 || sx >= W) continue;
              acc += in.at3(sy, sx, ci) * gout.at3(y, x, co);
            }
          }
          gk.at4(dy, dx, ci, co) = acc;
        }
  return gk;
}

template <class R>
Tensor<R> conv2d_dkernel(const Tensor<R>& in, const Tensor<R>& gout, int kh, int kw) {
  const int H = in.shape[0], W = in.shape[1], Ci = in.shape[2];
  const int Co = gout.shape[2];
#ifdef _OPENMP
  if (size_t(H) * W * Ci * kh * kw * Co >= kOmpThreshold) {
    if (gout.shape[0] != H || gout.shape[1] != W) throw std::invalid_argument("conv2d_dkernel: spatial mismatch");
    Tensor<R> gk({kh, kw, Ci, Co});
    const int ph = kh / 2, pw = kw / 2;
    const int taps = kh * kw;
#pragma omp parallel for schedule(static)
    for (int t = 0; t < taps; ++t) {
      const int dy = t / kw, dx = t % kw;
      for (int ci = 0; ci < Ci; ++ci)
        for (int co = 0; co < Co; ++co) {
          R acc = 0;
          for (int y = 0; y < H; ++y) {
            const int sy = y + dy - ph;
            if (sy < 0 || sy >= H) continue;
            for (int x = 0; x < W; ++x) {
              const int sx = x + dx - pw;
              if (sx < 0 || sx >= W) continue;
              acc += in.at3(sy, sx, ci) * gout.at3(y, x, co);
            }
          }
          gk.at4(dy, dx, ci, co) = acc;
        }
    }
    return gk;
  }
#endif
  return conv2d_dkernel_serial(in, gout, kh, kw);
}

// ---------------------------------------------------------------- matmul ----

template <class R>
Tensor<R> matmul_serial(const Tensor<R>& a, const Tensor<R>& b) {
  if (a.rank() != 2 || b.rank() != 2 || a.shape[1] != b.shape[0])
    throw std::invalid_argument("matmul: " + shape_str(a) + " x " + shape_str(b));
  const int m = a.shape[0], k = a.shape[1], n = b.shape[1];
  Tensor<R> c({m, n});
  for (int i = 0; i < m; ++i)
    for (int l = 0; l < k; ++l) {
      const R av = a.at2(i, l);
      if (av == R(0)) continue;
      for (int j = 0; j < n; ++j) c.at2(i, j) += av * b.at2(l, j);
    }
  return c;
}

template <class R>
Tensor<R> matmul(const Tensor<R>& a, const Tensor<R>& b) {
#ifdef _OPENMP
  if (a.rank() == 2 && b.rank() == 2 && a.shape[1] == b.shape[0] &&
      size_t(a.shape[0]) * a.shape[1] * b.shape[1] >= kOmpThreshold) {
    const int m = a.shape[0], k = a.shape[1], n = b.shape[1];
    Tensor<R> c({m, n});
#pragma omp parallel for schedule(static)
    for (int i = 0; i < m; ++i)
      for (int l = 0; l < k; ++l) {
        const R av = a.at2(i, l);
        if (av == R(0)) continue;
        for (int j = 0; j < n; ++j) c.at2(i, j) += av * b.at2(l, j);
      }
    return c;
  }
#endif
  return matmul_serial(a, b);
}

// ------------------------------------------------------ bilinear upsample ----

// align-corners-false source coordinate for output index i
inline double src_coord(int i, int out_size, int in_size) {
  return (double(i) + 0.5) * double(in_size) / double(out_size) - 0.5;
}

template <class R>
Tensor<R> upsample_bilinear_serial(const Tensor<R>& grid, int H, int W) {
  if (grid.rank() != 2) throw std::invalid_argument("upsample: grid must be 2-D");
  const int h = grid.shape[0], w = grid.shape[1];
  if (h > H || w > W) throw std::invalid_argument("upsample: target smaller than source");
  Tensor<R> out({H, W});
  for (int y = 0; y < H; ++y) {
    const double sy = src_coord(y, H, h);
    int y0 = int(std::floor(sy));
    double fy = sy - y0;
    int y1 = y0 + 1;
    y0 = std::clamp(y0, 0, h - 1);
    y1 = std::clamp(y1, 0, h - 1);
    for (int x = 0; x < W; ++x) {
      const double sx = src_coord(x, W, w);
      int x0 = int(std::floor(sx));
      double fx = sx - x0;
      int x1 = x0 + 1;
      x0 = std::clamp(x0, 0, w - 1);
      x1 = std::clamp(x1, 0, w - 1);
      out.at2(y, x) = R((1 - fy) * ((1 - fx) * double(grid.at2(y0, x0)) + fx * double(grid.at2(y0, x1))) +
                        fy * ((1 - fx) * double(grid.at2(y1, x0)) + fx * double(grid.at2(y1, x1))));
    }
  }
  return out;
}

template <class R>
Tensor<R> upsample_bilinear(const Tensor<R>& grid, int H, int W) {
#ifdef _OPENMP
  if (grid.rank() == 2 && size_t(H) * W >= kOmpThreshold) {
    const int h = grid.shape[0], w = grid.shape[1];
    if (h > H || w > W) throw std::invalid_argument("upsample: target smaller than source");
    Tensor<R> out({H, W});
#pragma omp parallel for schedule(static)
    for (int y = 0; y < H; ++y) {
      const double sy = src_coord(y, H, h);
      int y0 = int(std::floor(sy));
      double fy = sy - y0;
      int y1 = y0 + 1;
      y0 = std::clamp(y0, 0, h - 1);
      y1 = std::clamp(y1, 0, h - 1);
      for (int x = 0; x < W; ++x) {
        const double sx = src_coord(x, W, w);
        int x0 = int(std::floor(sx));
        double fx = sx - x0;
        int x1 = x0 + 1;
        x0 = std::clamp(x0, 0, w - 1);
        x1 = std::clamp(x1, 0, w - 1);
        out.at2(y, x) = R((1 - fy) * ((1 - fx) * double(grid.at2(y0, x0)) + fx * double(grid.at2(y0, x1))) +
                          fy * ((1 - fx) * double(grid.at2(y1, x0)) + fx * double(grid.at2(y1, x1))));
      }
    }
    return out;
  }
#endif
  return upsample_bilinear_serial(grid, H, W);
}

// Adjoint of upsample_bilinear: scatter output-grads back onto the grid.
// Kept serial; scatter writes would race and the grids are small.
template <class R>
Tensor<R> upsample_adjoint(const Tensor<R>& gout, int h, int w) {
  const int H = gout.shape[0], W = gout.shape[1];
  Tensor<R> gin({h, w});
  for (int y = 0; y < H; ++y) {
    const double sy = src_coord(y, H, h);
    int y0 = int(std::floor(sy));
    double fy = sy - y0;
    int y1 = y0 + 1;
    y0 = std::clamp(y0, 0, h - 1);
    y1 = std::clamp(y1, 0, h - 1);
    for (int x = 0; x < W; ++x) {
      const double sx = src_coord(x, W, w);
      int x0 = int(std::floor(sx));
      double fx = sx - x0;
      int x1 = x0 + 1;
      x0 = std::clamp(x0, 0, w - 1);
      x1 = std::clamp(x1, 0, w - 1);
      const R g = gout.at2(y, x);
      gin.at2(y0, x0) += R((1 - fy) * (1 - fx)) * g;
      gin.at2(y0, x1) += R((1 - fy) * fx) * g;
      gin.at2(y1, x0) += R(fy * (1 - fx)) * g;
      gin.at2(y1, x1) += R(fy * fx) * g;
    }
  }
  return gin;
}

// --------------------------------------------------------------- avgpool ----

template <class R>
Tensor<R> avgpool2(const Tensor<R>& in) {
  if (in.rank() != 3 || in.shape[0] % 2 || in.shape[1] % 2)
    throw std::invalid_argument("avgpool2: spatial dims must be even, got " + shape_str(in));
  const int H = in.shape[0] / 2, W = in.shape[1] / 2, C = in.shape[2];
  Tensor<R> out({H, W, C});
  for (int y = 0; y < H; ++y)
    for (int x = 0; x < W; ++x)
      for (int c = 0; c < C; ++c)
        out.at3(y, x, c) = (in.at3(2 * y, 2 * x, c) + in.at3(2 * y, 2 * x + 1, c) +
                            in.at3(2 * y + 1, 2 * x, c) + in.at3(2 * y + 1, 2 * x + 1, c)) /
                           R(4);
  return out;
}

template <class R>
Tensor<R> avgpool2_adjoint(const Tensor<R>& gout) {
  const int H = gout.shape[0] * 2, W = gout.shape[1] * 2, C = gout.shape[2];
  Tensor<R> gin({H, W, C});
  for (int y = 0; y < gout.shape[0]; ++y)
    for (int x = 0; x < gout.shape[1]; ++x)
      for (int c = 0; c < C; ++c) {
        const R g = gout.at3(y, x, c) / R(4);
        gin.at3(2 * y, 2 * x, c) = g;
        gin.at3(2 * y, 2 * x + 1, c) = g;
        gin.at3(2 * y + 1, 2 * x, c) = g;
        gin.at3(2 * y + 1, 2 * x + 1, c) = g;
      }
  return gin;
}

}  // namespace rudd::kernels
