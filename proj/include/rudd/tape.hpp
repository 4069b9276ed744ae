#pragma once

#include <cmath>
#include <functional>
#include <stdexcept>
#include <vector>

#include "rudd/kernels.hpp"
#include "rudd/tensor.hpp"

namespace rudd {

// Reverse-mode tape over the fixed op set the pipeline needs. Backward
// passes emit tape ops rather than raw buffers, so gradients are themselves
// differentiable. That is what lets the gradient- and trajectory-matching
// losses backpropagate through classifier gradients and unrolled SGD steps.
//
// Exceptions to full differentiability: ReLU/abs/clamp masks and the
// discretized-Laplace partials are attached as constants (their second
// derivatives vanish almost everywhere or are never needed).

template <class R>
class Tape;

template <class R>
struct Var {
  Tape<R>* tape = nullptr;
  int id = -1;
  bool valid() const { return tape != nullptr && id >= 0; }
};

template <class R>
class Tape {
 public:
  using BackFn = std::function<std::vector<Var<R>>(Tape&, int self, Var<R> gout)>;

  struct Node {
    Tensor<R> value;
    std::vector<int> parents;
    BackFn back;  // empty for leaves and constants
  };

  const Tensor<R>& val(Var<R> v) const { return nodes_[size_t(v.id)].value; }
  const Tensor<R>& val(int id) const { return nodes_[size_t(id)].value; }
  const std::vector<int>& parents(int id) const { return nodes_[size_t(id)].parents; }
  size_t size() const { return nodes_.size(); }

  Var<R> leaf(Tensor<R> t) { return push(std::move(t), {}, nullptr); }
  Var<R> constant(Tensor<R> t) { return push(std::move(t), {}, nullptr); }
  Var<R> constant_scalar(R v) { return constant(Tensor<R>::scalar(v)); }

  // ------------------------------------------------------------- elementwise

  Var<R> add(Var<R> a, Var<R> b) {
    check_same(a, b, "add");
    Tensor<R> out = val(a);
    const Tensor<R>& tb = val(b);
    for (size_t i = 0; i < out.numel(); ++i) out[i] += tb[i];
    return push(std::move(out), {a.id, b.id}, [](Tape&, int, Var<R> g) {
      return std::vector<Var<R>>{g, g};
    });
  }

  Var<R> sub(Var<R> a, Var<R> b) {
    check_same(a, b, "sub");
    Tensor<R> out = val(a);
    const Tensor<R>& tb = val(b);
    for (size_t i = 0; i < out.numel(); ++i) out[i] -= tb[i];
    return push(std::move(out), {a.id, b.id}, [](Tape& t, int, Var<R> g) {
      return std::vector<Var<R>>{g, t.neg(g)};
    });
  }

  Var<R> mul(Var<R> a, Var<R> b) {
    check_same(a, b, "mul");
    Tensor<R> out = val(a);
    const Tensor<R>& tb = val(b);
    for (size_t i = 0; i < out.numel(); ++i) out[i] *= tb[i];
    return push(std::move(out), {a.id, b.id}, [](Tape& t, int self, Var<R> g) {
      auto ps = t.parents(self);
      Var<R> pa{&t, ps[0]}, pb{&t, ps[1]};
      return std::vector<Var<R>>{t.mul(g, pb), t.mul(g, pa)};
    });
  }

  Var<R> neg(Var<R> a) { return scale(a, R(-1)); }

  Var<R> scale(Var<R> a, R c) {
    Tensor<R> out = val(a);
    for (auto& v : out.data) v *= c;
    return push(std::move(out), {a.id}, [c](Tape& t, int, Var<R> g) {
      return std::vector<Var<R>>{t.scale(g, c)};
    });
  }

  Var<R> add_const(Var<R> a, R c) {
    Tensor<R> out = val(a);
    for (auto& v : out.data) v += c;
    return push(std::move(out), {a.id}, [](Tape&, int, Var<R> g) {
      return std::vector<Var<R>>{g};
    });
  }

  Var<R> relu(Var<R> a) {
    Tensor<R> out = val(a);
    Tensor<R> mask(out.shape);
    for (size_t i = 0; i < out.numel(); ++i) {
      // subgradient at 0 is 0
      mask[i] = out[i] > R(0) ? R(1) : R(0);
      out[i] = out[i] > R(0) ? out[i] : R(0);
    }
    return push(std::move(out), {a.id}, [mask](Tape& t, int, Var<R> g) {
      return std::vector<Var<R>>{t.mul(g, t.constant(mask))};
    });
  }

  Var<R> exp_(Var<R> a) {
    Tensor<R> out = val(a);
    for (auto& v : out.data) v = std::exp(v);
    return push(std::move(out), {a.id}, [](Tape& t, int self, Var<R> g) {
      return std::vector<Var<R>>{t.mul(g, Var<R>{&t, self})};
    });
  }

  Var<R> log_(Var<R> a) {
    Tensor<R> out = val(a);
    for (auto& v : out.data) v = std::log(v);
    return push(std::move(out), {a.id}, [](Tape& t, int self, Var<R> g) {
      Var<R> pa{&t, t.parents(self)[0]};
      return std::vector<Var<R>>{t.mul(g, t.pow_const(pa, R(-1)))};
    });
  }

  Var<R> pow_const(Var<R> a, R p) {
    Tensor<R> out = val(a);
    for (auto& v : out.data) v = R(std::pow(double(v), double(p)));
    return push(std::move(out), {a.id}, [p](Tape& t, int self, Var<R> g) {
      Var<R> pa{&t, t.parents(self)[0]};
      return std::vector<Var<R>>{t.scale(t.mul(g, t.pow_const(pa, p - R(1))), p)};
    });
  }

  Var<R> abs_(Var<R> a) {
    Tensor<R> out = val(a);
    Tensor<R> sgn(out.shape);
    for (size_t i = 0; i < out.numel(); ++i) {
      sgn[i] = out[i] > R(0) ? R(1) : (out[i] < R(0) ? R(-1) : R(0));
      out[i] = std::abs(out[i]);
    }
    return push(std::move(out), {a.id}, [sgn](Tape& t, int, Var<R> g) {
      return std::vector<Var<R>>{t.mul(g, t.constant(sgn))};
    });
  }

  Var<R> clamp_min(Var<R> a, R lo) {
    Tensor<R> out = val(a);
    Tensor<R> mask(out.shape);
    for (size_t i = 0; i < out.numel(); ++i) {
      mask[i] = out[i] > lo ? R(1) : R(0);
      out[i] = std::max(out[i], lo);
    }
    return push(std::move(out), {a.id}, [mask](Tape& t, int, Var<R> g) {
      return std::vector<Var<R>>{t.mul(g, t.constant(mask))};
    });
  }

  // forward = half-up round clamped to the signed 16-bit symbol range,
  // backward = identity (straight-through)
  Var<R> round_ste(Var<R> a) {
    Tensor<R> out = val(a);
    for (auto& v : out.data) v = R(std::clamp(std::floor(double(v) + 0.5), -32768.0, 32767.0));
    return push(std::move(out), {a.id}, [](Tape&, int, Var<R> g) {
      return std::vector<Var<R>>{g};
    });
  }

  // ------------------------------------------------------------- reductions

  Var<R> sum(Var<R> a) {
    R s = 0;
    for (R v : val(a).data) s += v;
    auto shape = val(a).shape;
    return push(Tensor<R>::scalar(s), {a.id}, [shape](Tape& t, int, Var<R> g) {
      return std::vector<Var<R>>{t.broadcast_to(g, shape)};
    });
  }

  Var<R> mean(Var<R> a) { return scale(sum(a), R(1) / R(val(a).numel())); }

  Var<R> broadcast_to(Var<R> s, std::vector<int> shape) {
    if (val(s).numel() != 1) throw std::invalid_argument("broadcast_to: source not scalar");
    Tensor<R> out = Tensor<R>::full(shape, val(s)[0]);
    return push(std::move(out), {s.id}, [](Tape& t, int, Var<R> g) {
      return std::vector<Var<R>>{t.sum(g)};
    });
  }

  Var<R> sumsq(Var<R> a) { return sum(mul(a, a)); }

  // ----------------------------------------------------------- shape plumbing

  Var<R> reshape(Var<R> a, std::vector<int> shape) {
    if (Tensor<R>::numel_of(shape) != val(a).numel()) throw std::invalid_argument("reshape: numel mismatch");
    Tensor<R> out(shape, val(a).data);
    auto orig = val(a).shape;
    return push(std::move(out), {a.id}, [orig](Tape& t, int, Var<R> g) {
      return std::vector<Var<R>>{t.reshape(g, orig)};
    });
  }

  Var<R> select(Var<R> a, size_t idx) {
    auto shape = val(a).shape;
    return push(Tensor<R>::scalar(val(a)[idx]), {a.id}, [idx, shape](Tape& t, int, Var<R> g) {
      return std::vector<Var<R>>{t.scatter_one(g, idx, shape)};
    });
  }

  Var<R> scatter_one(Var<R> s, size_t idx, std::vector<int> shape) {
    Tensor<R> out(shape);
    out[idx] = val(s)[0];
    return push(std::move(out), {s.id}, [idx](Tape& t, int, Var<R> g) {
      return std::vector<Var<R>>{t.select(g, idx)};
    });
  }

  Var<R> row(Var<R> a, int i) {
    const Tensor<R>& ta = val(a);
    const int n = ta.shape[1], m = ta.shape[0];
    Tensor<R> out({n});
    for (int j = 0; j < n; ++j) out[size_t(j)] = ta.at2(i, j);
    return push(std::move(out), {a.id}, [i, m](Tape& t, int, Var<R> g) {
      return std::vector<Var<R>>{t.scatter_row(g, i, m)};
    });
  }

  Var<R> scatter_row(Var<R> v, int i, int m) {
    const Tensor<R>& tv = val(v);
    const int n = tv.shape[0];
    Tensor<R> out({m, n});
    for (int j = 0; j < n; ++j) out.at2(i, j) = tv[size_t(j)];
    return push(std::move(out), {v.id}, [i](Tape& t, int, Var<R> g) {
      return std::vector<Var<R>>{t.row(g, i)};
    });
  }

  Var<R> stack_rows(const std::vector<Var<R>>& rows) {
    if (rows.empty()) throw std::invalid_argument("stack_rows: empty");
    const int n = int(val(rows[0]).numel());
    Tensor<R> out({int(rows.size()), n});
    std::vector<int> ps;
    for (size_t i = 0; i < rows.size(); ++i) {
      for (int j = 0; j < n; ++j) out.at2(int(i), j) = val(rows[i])[size_t(j)];
      ps.push_back(rows[i].id);
    }
    return push(std::move(out), std::move(ps), [](Tape& t, int self, Var<R> g) {
      std::vector<Var<R>> gs;
      for (size_t i = 0; i < t.parents(self).size(); ++i) gs.push_back(t.row(g, int(i)));
      return gs;
    });
  }

  Var<R> slice_range(Var<R> a, size_t off, std::vector<int> shape) {
    const size_t len = Tensor<R>::numel_of(shape);
    const Tensor<R>& ta = val(a);
    if (off + len > ta.numel()) throw std::invalid_argument("slice_range: out of bounds");
    Tensor<R> out(shape);
    for (size_t i = 0; i < len; ++i) out[i] = ta[off + i];
    auto orig = ta.shape;
    return push(std::move(out), {a.id}, [off, orig](Tape& t, int, Var<R> g) {
      return std::vector<Var<R>>{t.scatter_range(g, off, orig)};
    });
  }

  Var<R> scatter_range(Var<R> a, size_t off, std::vector<int> shape) {
    Tensor<R> out(shape);
    const Tensor<R>& ta = val(a);
    for (size_t i = 0; i < ta.numel(); ++i) out[off + i] = ta[i];
    auto sub = ta.shape;
    return push(std::move(out), {a.id}, [off, sub](Tape& t, int, Var<R> g) {
      return std::vector<Var<R>>{t.slice_range(g, off, sub)};
    });
  }

  // out[i] = idx[i] >= 0 ? a.flat[idx[i]] : 0
  Var<R> gather_zero(Var<R> a, std::vector<int64_t> idx, std::vector<int> out_shape) {
    if (Tensor<R>::numel_of(out_shape) != idx.size()) throw std::invalid_argument("gather_zero: index/shape mismatch");
    const Tensor<R>& ta = val(a);
    Tensor<R> out(out_shape);
    for (size_t i = 0; i < idx.size(); ++i) out[i] = idx[i] >= 0 ? ta[size_t(idx[i])] : R(0);
    auto src_shape = ta.shape;
    return push(std::move(out), {a.id}, [idx, src_shape](Tape& t, int, Var<R> g) {
      return std::vector<Var<R>>{t.scatter_add(g, idx, src_shape)};
    });
  }

  Var<R> scatter_add(Var<R> g, std::vector<int64_t> idx, std::vector<int> out_shape) {
    const Tensor<R>& tg = val(g);
    Tensor<R> out(out_shape);
    for (size_t i = 0; i < idx.size(); ++i)
      if (idx[i] >= 0) out[size_t(idx[i])] += tg[i];
    auto g_shape = tg.shape;
    return push(std::move(out), {g.id}, [idx, g_shape](Tape& t, int, Var<R> gg) {
      return std::vector<Var<R>>{t.gather_zero(gg, idx, g_shape)};
    });
  }

  // --------------------------------------------------------------- linalg

  Var<R> transpose2(Var<R> a) {
    const Tensor<R>& ta = val(a);
    Tensor<R> out({ta.shape[1], ta.shape[0]});
    for (int i = 0; i < ta.shape[0]; ++i)
      for (int j = 0; j < ta.shape[1]; ++j) out.at2(j, i) = ta.at2(i, j);
    return push(std::move(out), {a.id}, [](Tape& t, int, Var<R> g) {
      return std::vector<Var<R>>{t.transpose2(g)};
    });
  }

  Var<R> matmul(Var<R> a, Var<R> b) {
    Tensor<R> out = kernels::matmul(val(a), val(b));
    return push(std::move(out), {a.id, b.id}, [](Tape& t, int self, Var<R> g) {
      auto ps = t.parents(self);
      Var<R> pa{&t, ps[0]}, pb{&t, ps[1]};
      return std::vector<Var<R>>{t.matmul(g, t.transpose2(pb)), t.matmul(t.transpose2(pa), g)};
    });
  }

  Var<R> add_rowvec(Var<R> a, Var<R> v) {
    const Tensor<R>& ta = val(a);
    const Tensor<R>& tv = val(v);
    if (ta.rank() != 2 || tv.rank() != 1 || ta.shape[1] != tv.shape[0])
      throw std::invalid_argument("add_rowvec: shape mismatch");
    Tensor<R> out = ta;
    for (int i = 0; i < ta.shape[0]; ++i)
      for (int j = 0; j < ta.shape[1]; ++j) out.at2(i, j) += tv[size_t(j)];
    return push(std::move(out), {a.id, v.id}, [](Tape& t, int, Var<R> g) {
      return std::vector<Var<R>>{g, t.colsum(g)};
    });
  }

  Var<R> colsum(Var<R> a) {
    const Tensor<R>& ta = val(a);
    const int m = ta.shape[0];
    Tensor<R> out({ta.shape[1]});
    for (int i = 0; i < m; ++i)
      for (int j = 0; j < ta.shape[1]; ++j) out[size_t(j)] += ta.at2(i, j);
    return push(std::move(out), {a.id}, [m](Tape& t, int, Var<R> g) {
      return std::vector<Var<R>>{t.broadcast_rows(g, m)};
    });
  }

  Var<R> broadcast_rows(Var<R> v, int m) {
    const Tensor<R>& tv = val(v);
    Tensor<R> out({m, tv.shape[0]});
    for (int i = 0; i < m; ++i)
      for (int j = 0; j < tv.shape[0]; ++j) out.at2(i, j) = tv[size_t(j)];
    return push(std::move(out), {v.id}, [](Tape& t, int, Var<R> g) {
      return std::vector<Var<R>>{t.colsum(g)};
    });
  }

  // affine over a single vector: x[C] * W[CxD] + b[D]
  Var<R> affine(Var<R> x, Var<R> w, Var<R> b) {
    const Tensor<R>& tx = val(x);
    if (tx.rank() != 1) throw std::invalid_argument("affine: input must be a vector");
    Var<R> xr = reshape(x, {1, tx.shape[0]});
    Var<R> y = add_rowvec(matmul(xr, w), b);
    return reshape(y, {val(w).shape[1]});
  }

  // ----------------------------------------------------------- conv family

  Var<R> conv2d(Var<R> in, Var<R> ker, Var<R> bias) {
    Tensor<R> out = kernels::conv2d_fwd(val(in), val(ker), bias.valid() ? &val(bias) : nullptr);
    const int kh = val(ker).shape[0], kw = val(ker).shape[1];
    std::vector<int> ps = {in.id, ker.id};
    if (bias.valid()) ps.push_back(bias.id);
    return push(std::move(out), std::move(ps), [kh, kw](Tape& t, int self, Var<R> g) {
      auto ps2 = t.parents(self);
      Var<R> vin{&t, ps2[0]}, vk{&t, ps2[1]};
      std::vector<Var<R>> gs = {t.conv2d_dinput(g, vk), t.conv2d_dkernel(vin, g, kh, kw)};
      if (ps2.size() == 3) gs.push_back(t.spatial_sum(g));
      return gs;
    });
  }

  Var<R> conv2d_dinput(Var<R> gout, Var<R> ker) {
    Tensor<R> out = kernels::conv2d_dinput(val(gout), val(ker));
    const int kh = val(ker).shape[0], kw = val(ker).shape[1];
    return push(std::move(out), {gout.id, ker.id}, [kh, kw](Tape& t, int self, Var<R> u) {
      auto ps = t.parents(self);
      Var<R> vg{&t, ps[0]}, vk{&t, ps[1]};
      return std::vector<Var<R>>{t.conv2d(u, vk, Var<R>{}), t.conv2d_dkernel(u, vg, kh, kw)};
    });
  }

  Var<R> conv2d_dkernel(Var<R> in, Var<R> gout, int kh, int kw) {
    Tensor<R> out = kernels::conv2d_dkernel(val(in), val(gout), kh, kw);
    return push(std::move(out), {in.id, gout.id}, [](Tape& t, int self, Var<R> u) {
      auto ps = t.parents(self);
      Var<R> vin{&t, ps[0]}, vg{&t, ps[1]};
      return std::vector<Var<R>>{t.conv2d_dinput(vg, u), t.conv2d(vin, u, Var<R>{})};
    });
  }

  Var<R> spatial_sum(Var<R> a) {
    const Tensor<R>& ta = val(a);
    const int H = ta.shape[0], W = ta.shape[1], C = ta.shape[2];
    Tensor<R> out({C});
    for (int y = 0; y < H; ++y)
      for (int x = 0; x < W; ++x)
        for (int c = 0; c < C; ++c) out[size_t(c)] += ta.at3(y, x, c);
    return push(std::move(out), {a.id}, [H, W](Tape& t, int, Var<R> g) {
      return std::vector<Var<R>>{t.broadcast_hw(g, H, W)};
    });
  }

  Var<R> broadcast_hw(Var<R> v, int H, int W) {
    const Tensor<R>& tv = val(v);
    const int C = tv.shape[0];
    Tensor<R> out({H, W, C});
    for (int y = 0; y < H; ++y)
      for (int x = 0; x < W; ++x)
        for (int c = 0; c < C; ++c) out.at3(y, x, c) = tv[size_t(c)];
    return push(std::move(out), {v.id}, [](Tape& t, int, Var<R> g) {
      return std::vector<Var<R>>{t.spatial_sum(g)};
    });
  }

  // ------------------------------------------------- upsample / pool / stack

  Var<R> upsample_bilinear(Var<R> grid, int H, int W) {
    const int h = val(grid).shape[0], w = val(grid).shape[1];
    Tensor<R> out = kernels::upsample_bilinear(val(grid), H, W);
    return push(std::move(out), {grid.id}, [h, w](Tape& t, int, Var<R> g) {
      return std::vector<Var<R>>{t.upsample_adjoint(g, h, w)};
    });
  }

  Var<R> upsample_adjoint(Var<R> gout, int h, int w) {
    const int H = val(gout).shape[0], W = val(gout).shape[1];
    Tensor<R> out = kernels::upsample_adjoint(val(gout), h, w);
    return push(std::move(out), {gout.id}, [H, W](Tape& t, int, Var<R> g) {
      return std::vector<Var<R>>{t.upsample_bilinear(g, H, W)};
    });
  }

  Var<R> avgpool2(Var<R> a) {
    Tensor<R> out = kernels::avgpool2(val(a));
    return push(std::move(out), {a.id}, [](Tape& t, int, Var<R> g) {
      return std::vector<Var<R>>{t.avgpool2_adjoint(g)};
    });
  }

  Var<R> avgpool2_adjoint(Var<R> g) {
    Tensor<R> out = kernels::avgpool2_adjoint(val(g));
    return push(std::move(out), {g.id}, [](Tape& t, int, Var<R> gg) {
      return std::vector<Var<R>>{t.avgpool2(gg)};
    });
  }

  Var<R> stack_channels(const std::vector<Var<R>>& grids) {
    if (grids.empty()) throw std::invalid_argument("stack_channels: empty");
    const int H = val(grids[0]).shape[0], W = val(grids[0]).shape[1];
    const int C = int(grids.size());
    Tensor<R> out({H, W, C});
    std::vector<int> ps;
    for (int c = 0; c < C; ++c) {
      const Tensor<R>& g = val(grids[size_t(c)]);
      if (g.shape[0] != H || g.shape[1] != W) throw std::invalid_argument("stack_channels: shape mismatch");
      for (int y = 0; y < H; ++y)
        for (int x = 0; x < W; ++x) out.at3(y, x, c) = g.at2(y, x);
      ps.push_back(grids[size_t(c)].id);
    }
    return push(std::move(out), std::move(ps), [](Tape& t, int self, Var<R> g) {
      std::vector<Var<R>> gs;
      for (size_t c = 0; c < t.parents(self).size(); ++c) gs.push_back(t.slice_channel(g, int(c)));
      return gs;
    });
  }

  Var<R> slice_channel(Var<R> a, int c) {
    const Tensor<R>& ta = val(a);
    const int H = ta.shape[0], W = ta.shape[1], C = ta.shape[2];
    Tensor<R> out({H, W});
    for (int y = 0; y < H; ++y)
      for (int x = 0; x < W; ++x) out.at2(y, x) = ta.at3(y, x, c);
    return push(std::move(out), {a.id}, [c, C](Tape& t, int, Var<R> g) {
      return std::vector<Var<R>>{t.scatter_channel(g, c, C)};
    });
  }

  Var<R> scatter_channel(Var<R> a, int c, int C) {
    const Tensor<R>& ta = val(a);
    const int H = ta.shape[0], W = ta.shape[1];
    Tensor<R> out({H, W, C});
    for (int y = 0; y < H; ++y)
      for (int x = 0; x < W; ++x) out.at3(y, x, c) = ta.at2(y, x);
    return push(std::move(out), {a.id}, [c](Tape& t, int, Var<R> g) {
      return std::vector<Var<R>>{t.slice_channel(g, c)};
    });
  }

  // --------------------------------------------- discretized Laplace rate

  // Per-element bits -log2 P(z in [z-1/2, z+1/2]) under Laplace(mu, b) with
  // b = max(exp(logb), b_min). Inputs share one shape. Partials are attached
  // as constants (first-order only; the rate term never needs double
  // backward).
  Var<R> laplace_bits(Var<R> z, Var<R> mu, Var<R> logb, R b_min = R(1e-6)) {
    check_same(z, mu, "laplace_bits");
    check_same(z, logb, "laplace_bits");
    const Tensor<R>&tz = val(z), &tm = val(mu), &tl = val(logb);
    const size_t n = tz.numel();
    Tensor<R> bits(tz.shape), dz(tz.shape), dmu(tz.shape), dlogb(tz.shape);
    constexpr double kLn2 = 0.6931471805599453;
    for (size_t i = 0; i < n; ++i) {
      const double b_raw = std::exp(double(tl[i]));
      const bool floored = b_raw < double(b_min);
      const double b = floored ? double(b_min) : b_raw;
      const double uh = (double(tz[i]) + 0.5 - double(tm[i])) / b;
      const double ul = (double(tz[i]) - 0.5 - double(tm[i])) / b;
      double logp, r_hi, r_lo;  // r_* = density(x_*) / p
      if (uh <= 0) {
        const double e = std::exp(ul - uh);  // in (0,1)
        logp = std::log(0.5) + uh + std::log1p(-e);
        const double denom = b * (1 - e);
        r_hi = 1 / denom;
        r_lo = e / denom;
      } else if (ul >= 0) {
        const double e = std::exp(ul - uh);  // in (0,1)
        logp = std::log(0.5) - ul + std::log1p(-e);
        const double denom = b * (1 - e);
        r_lo = 1 / denom;
        r_hi = e / denom;
      } else {
        const double p = -0.5 * (std::expm1(-uh) + std::expm1(ul));
        const double ps = std::max(p, 1e-300);
        logp = std::log(ps);
        r_hi = 0.5 * std::exp(-uh) / (ps * b);
        r_lo = 0.5 * std::exp(ul) / (ps * b);
      }
      bits[i] = R(-logp / kLn2);
      // d bits/dz = -(1/ln2) (f_hi - f_lo)/p   with f_* = density at bin edge
      const double dbdz = -(r_hi - r_lo) / kLn2;
      dz[i] = R(dbdz);
      dmu[i] = R(-dbdz);
      // d p/db = f_lo*ul - f_hi*uh ; chain through b = exp(logb)
      dlogb[i] = floored ? R(0) : R(-b * (r_lo * ul - r_hi * uh) / kLn2);
    }
    return push(std::move(bits), {z.id, mu.id, logb.id},
                [dz, dmu, dlogb](Tape& t, int, Var<R> g) {
                  return std::vector<Var<R>>{t.mul(g, t.constant(dz)), t.mul(g, t.constant(dmu)),
                                             t.mul(g, t.constant(dlogb))};
                });
  }

  // ----------------------------------------------------------- gradients

  // Reverse sweep emitting tape ops; returns one grad Var per requested leaf
  // (zeros for leaves the loss does not reach).
  std::vector<Var<R>> gradients_sym(Var<R> loss, const std::vector<Var<R>>& leaves) {
    if (val(loss).numel() != 1) throw std::invalid_argument("gradients: loss must be scalar");
    std::vector<int> adj(size_t(loss.id) + 1, -1);
    adj[size_t(loss.id)] = constant(Tensor<R>::scalar(R(1))).id;
    for (int i = loss.id; i >= 0; --i) {
      const int gi = adj[size_t(i)];
      if (gi < 0) continue;
      if (!nodes_[size_t(i)].back) continue;
      BackFn back = nodes_[size_t(i)].back;  // copy: nodes_ may reallocate
      std::vector<int> ps = nodes_[size_t(i)].parents;
      auto pgs = back(*this, i, Var<R>{this, gi});
      if (pgs.size() != ps.size()) throw std::logic_error("backward arity mismatch");
      for (size_t k = 0; k < ps.size(); ++k) {
        if (!pgs[k].valid()) continue;
        int& slot = adj[size_t(ps[k])];
        slot = slot < 0 ? pgs[k].id : add(Var<R>{this, slot}, pgs[k]).id;
      }
    }
    std::vector<Var<R>> out;
    out.reserve(leaves.size());
    for (Var<R> l : leaves) {
      const int a = size_t(l.id) < adj.size() ? adj[size_t(l.id)] : -1;
      out.push_back(a >= 0 ? Var<R>{this, a} : constant(Tensor<R>::zeros(val(l).shape)));
    }
    return out;
  }

  std::vector<Tensor<R>> gradients(Var<R> loss, const std::vector<Var<R>>& leaves) {
    auto gs = gradients_sym(loss, leaves);
    std::vector<Tensor<R>> out;
    out.reserve(gs.size());
    for (auto g : gs) out.push_back(val(g));
    return out;
  }

 private:
  std::vector<Node> nodes_;

  Var<R> push(Tensor<R> v, std::vector<int> parents, BackFn back) {
    if (!v.all_finite()) throw std::runtime_error("tape: non-finite value in forward pass");
    nodes_.push_back(Node{std::move(v), std::move(parents), std::move(back)});
    return Var<R>{this, int(nodes_.size()) - 1};
  }

  void check_same(Var<R> a, Var<R> b, const char* what) {
    if (!val(a).same_shape(val(b)))
      throw std::invalid_argument(std::string(what) + ": shape mismatch " + shape_str(val(a)) + " vs " +
                                  shape_str(val(b)));
  }
};

}  // namespace rudd
