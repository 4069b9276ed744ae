#include "rudd/distill.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>
#include <stdexcept>

namespace rudd {

// ------------------------------------------------------------ classifier ----

ClassifierWeights ClassifierWeights::init(const ClassifierConfig& cfg, int H, int W, int K,
                                          Rng& rng) {
  const int div = 1 << cfg.blocks;
  if (H % div != 0 || W % div != 0)
    throw std::invalid_argument("classifier: input dims must be divisible by 2^blocks");
  ClassifierWeights w;
  w.config = cfg;
  w.in_h = H;
  w.in_w = W;
  w.num_classes = K;
  int cin = w.in_c;
  for (int b = 0; b < cfg.blocks; ++b) {
    Tensor<double> k({3, 3, cin, cfg.channels});
    const double s = std::sqrt(2.0 / double(9 * cin));
    for (auto& v : k.data) v = rng.normal(0, s);
    w.conv_k.push_back(std::move(k));
    w.conv_b.push_back(Tensor<double>({cfg.channels}));
    cin = cfg.channels;
  }
  const int feat = (H / div) * (W / div) * cfg.channels;
  w.head_w = Tensor<double>({feat, K});
  const double hs = std::sqrt(1.0 / double(feat));
  for (auto& v : w.head_w.data) v = rng.normal(0, hs);
  w.head_b = Tensor<double>({K});
  return w;
}

size_t ClassifierWeights::num_params() const {
  size_t n = head_w.numel() + head_b.numel();
  for (size_t i = 0; i < conv_k.size(); ++i) n += conv_k[i].numel() + conv_b[i].numel();
  return n;
}

std::vector<double> ClassifierWeights::flatten() const {
  std::vector<double> out;
  for (size_t i = 0; i < conv_k.size(); ++i) {
    out.insert(out.end(), conv_k[i].data.begin(), conv_k[i].data.end());
    out.insert(out.end(), conv_b[i].data.begin(), conv_b[i].data.end());
  }
  out.insert(out.end(), head_w.data.begin(), head_w.data.end());
  out.insert(out.end(), head_b.data.begin(), head_b.data.end());
  return out;
}

void ClassifierWeights::unflatten(const std::vector<double>& flat) {
  size_t k = 0;
  for (size_t i = 0; i < conv_k.size(); ++i) {
    for (auto& v : conv_k[i].data) v = flat[k++];
    for (auto& v : conv_b[i].data) v = flat[k++];
  }
  for (auto& v : head_w.data) v = flat[k++];
  for (auto& v : head_b.data) v = flat[k++];
  if (k != flat.size()) throw std::invalid_argument("classifier: unflatten size mismatch");
}

namespace {

VarVec classifier_push(Tape<double>& t, const ClassifierWeights& w, bool as_leaf) {
  VarVec out;
  auto put = [&](const Tensor<double>& x) {
    out.push_back(as_leaf ? t.leaf(x) : t.constant(x));
  };
  for (size_t i = 0; i < w.conv_k.size(); ++i) {
    put(w.conv_k[i]);
    put(w.conv_b[i]);
  }
  put(w.head_w);
  put(w.head_b);
  return out;
}

VarVec classifier_constants_from_flat(Tape<double>& t, const ClassifierWeights& proto,
                                      const std::vector<double>& flat) {
  ClassifierWeights w = proto;
  w.unflatten(flat);
  return classifier_push(t, w, false);
}

}  // namespace

VarVec classifier_leaves(Tape<double>& t, const ClassifierWeights& w) {
  return classifier_push(t, w, true);
}

Var<double> instance_norm(Tape<double>& t, Var<double> x, double eps) {
  const auto& s = t.val(x).shape;
  const int H = s[0], W = s[1];
  const double inv_n = 1.0 / double(H * W);
  Var<double> mean = t.scale(t.spatial_sum(x), inv_n);
  Var<double> xc = t.sub(x, t.broadcast_hw(mean, H, W));
  Var<double> var = t.scale(t.spatial_sum(t.mul(xc, xc)), inv_n);
  Var<double> inv = t.pow_const(t.add_const(var, eps), -0.5);
  return t.mul(xc, t.broadcast_hw(inv, H, W));
}

Var<double> classifier_features(Tape<double>& t, Var<double> img, const ClassifierWeights& proto,
                                const VarVec& params) {
  Var<double> x = img;
  for (int b = 0; b < proto.config.blocks; ++b) {
    x = t.conv2d(x, params[size_t(2 * b)], params[size_t(2 * b + 1)]);
    x = instance_norm(t, x);
    x = t.relu(x);
    x = t.avgpool2(x);
  }
  return t.reshape(x, {int(t.val(x).numel())});
}

Var<double> classifier_logits(Tape<double>& t, Var<double> img, const ClassifierWeights& proto,
                              const VarVec& params) {
  Var<double> f = classifier_features(t, img, proto, params);
  const size_t h = size_t(2 * proto.config.blocks);
  return t.affine(f, params[h], params[h + 1]);
}

Var<double> cross_entropy(Tape<double>& t, Var<double> logits, int label) {
  const Tensor<double>& lv = t.val(logits);
  if (label < 0 || size_t(label) >= lv.numel()) throw std::invalid_argument("cross_entropy: label out of range");
  const double m = *std::max_element(lv.data.begin(), lv.data.end());
  Var<double> lse = t.add_const(t.log_(t.sum(t.exp_(t.add_const(logits, -m)))), m);
  return t.sub(lse, t.select(logits, size_t(label)));
}

Var<double> batch_ce(Tape<double>& t, const std::vector<Var<double>>& images,
                     const std::vector<int>& labels, const ClassifierWeights& proto,
                     const VarVec& params) {
  if (images.empty() || images.size() != labels.size())
    throw std::invalid_argument("batch_ce: empty or mismatched batch");
  Var<double> total = cross_entropy(t, classifier_logits(t, images[0], proto, params), labels[0]);
  for (size_t i = 1; i < images.size(); ++i)
    total = t.add(total, cross_entropy(t, classifier_logits(t, images[i], proto, params), labels[i]));
  return t.scale(total, 1.0 / double(images.size()));
}

// ------------------------------------------------------------ inner loop ----

std::vector<VarVec> inner_unroll(Tape<double>& t, const std::vector<Var<double>>& images,
                                 const std::vector<int>& labels, const ClassifierWeights& proto,
                                 VarVec theta0, int steps, double lr) {
  std::vector<VarVec> snaps{theta0};
  VarVec theta = std::move(theta0);
  for (int s = 0; s < steps; ++s) {
    try {
      Var<double> loss = batch_ce(t, images, labels, proto, theta);
      auto grads = t.gradients_sym(loss, theta);
      VarVec next;
      next.reserve(theta.size());
      for (size_t i = 0; i < theta.size(); ++i) next.push_back(t.sub(theta[i], t.scale(grads[i], lr)));
      theta = std::move(next);
    } catch (const std::runtime_error& e) {
      throw std::runtime_error("inner_unroll: diverged at step " + std::to_string(s) + ": " + e.what());
    }
    snaps.push_back(theta);
  }
  return snaps;
}

// --------------------------------------------------------- expert + eval ----

namespace {

std::vector<std::vector<size_t>> class_index(const LabeledImageSet& set) {
  std::vector<std::vector<size_t>> idx(size_t(set.K()));
  for (size_t i = 0; i < set.labels.size(); ++i) idx[size_t(set.labels[i])].push_back(i);
  return idx;
}

Tensor<double> image_of(const LabeledImageSet& set, size_t n) {
  Tensor<double> img({set.H(), set.W(), 3});
  std::copy(set.images.data.begin() + long(n * img.numel()),
            set.images.data.begin() + long((n + 1) * img.numel()), img.data.begin());
  return img;
}

}  // namespace

std::vector<std::vector<double>> sgd_train(ClassifierWeights& w, const LabeledImageSet& set,
                                           int steps, double lr, int batch_per_class, Rng& rng,
                                           bool keep_snapshots) {
  auto by_class = class_index(set);
  for (const auto& c : by_class)
    if (c.empty()) throw std::invalid_argument("sgd_train: empty class");
  std::vector<double> flat = w.flatten();
  std::vector<std::vector<double>> snaps;
  if (keep_snapshots) snaps.push_back(flat);
  for (int s = 0; s < steps; ++s) {
    Tape<double> t;
    VarVec theta;
    {
      ClassifierWeights cur = w;
      cur.unflatten(flat);
      theta = classifier_leaves(t, cur);
    }
    std::vector<Var<double>> imgs;
    std::vector<int> labels;
    for (size_t c = 0; c < by_class.size(); ++c)
      for (int k = 0; k < batch_per_class; ++k) {
        const size_t n = by_class[c][rng.next_below(by_class[c].size())];
        imgs.push_back(t.constant(image_of(set, n)));
        labels.push_back(int(c));
      }
    Var<double> loss = batch_ce(t, imgs, labels, w, theta);
    auto grads = t.gradients(loss, theta);
    size_t off = 0;
    for (const auto& g : grads) {
      for (size_t i = 0; i < g.numel(); ++i) flat[off + i] -= lr * g[i];
      off += g.numel();
    }
    if (keep_snapshots) snaps.push_back(flat);
  }
  w.unflatten(flat);
  return snaps;
}

ExpertTrajectory generate_expert(const LabeledImageSet& set, const ClassifierConfig& cfg, int K,
                                 int steps, double lr, int batch_per_class, uint64_t seed) {
  Rng init_rng = Rng(seed).split(0xE1);
  Rng batch_rng = Rng(seed).split(0xE2);
  ExpertTrajectory ex;
  ex.proto = ClassifierWeights::init(cfg, set.H(), set.W(), K, init_rng);
  ex.snapshots = sgd_train(ex.proto, set, steps, lr, batch_per_class, batch_rng, true);
  return ex;
}

namespace {

// Numeric forward for evaluation (no tape).
std::vector<double> logits_numeric(const ClassifierWeights& w, const Tensor<double>& img) {
  Tensor<double> x = img;
  for (size_t b = 0; b < w.conv_k.size(); ++b) {
    x = kernels::conv2d_fwd(x, w.conv_k[b], &w.conv_b[b]);
    const int H = x.shape[0], W = x.shape[1], C = x.shape[2];
    for (int c = 0; c < C; ++c) {
      double mean = 0;
      for (int y = 0; y < H; ++y)
        for (int xx = 0; xx < W; ++xx) mean += x.at3(y, xx, c);
      mean /= double(H * W);
      double var = 0;
      for (int y = 0; y < H; ++y)
        for (int xx = 0; xx < W; ++xx) {
          const double d = x.at3(y, xx, c) - mean;
          var += d * d;
        }
      var /= double(H * W);
      const double inv = 1.0 / std::sqrt(var + 1e-5);
      for (int y = 0; y < H; ++y)
        for (int xx = 0; xx < W; ++xx) {
          double v = (x.at3(y, xx, c) - mean) * inv;
          x.at3(y, xx, c) = v > 0 ? v : 0;
        }
    }
    x = kernels::avgpool2(x);
  }
  std::vector<double> out(size_t(w.num_classes));
  for (int j = 0; j < w.num_classes; ++j) {
    double s = w.head_b[size_t(j)];
    for (size_t i = 0; i < x.numel(); ++i) s += x[i] * w.head_w.at2(int(i), j);
    out[size_t(j)] = s;
  }
  return out;
}

}  // namespace

double accuracy(const ClassifierWeights& w, const LabeledImageSet& set) {
  int hit = 0;
  for (int n = 0; n < set.N(); ++n) {
    auto lg = logits_numeric(w, image_of(set, size_t(n)));
    const int pred = int(std::max_element(lg.begin(), lg.end()) - lg.begin());
    if (pred == set.labels[size_t(n)]) ++hit;
  }
  return set.N() ? double(hit) / double(set.N()) : 0.0;
}

// ----------------------------------------------------------------- losses ----

Var<double> loss_gm(Tape<double>& t, const ClassifierWeights& proto,
                    const std::vector<std::vector<double>>& theta_trace,
                    const std::vector<Tensor<double>>& d_images, const std::vector<int>& d_labels,
                    const std::vector<Var<double>>& s_images, const std::vector<int>& s_labels) {
  if (theta_trace.empty()) throw std::invalid_argument("loss_gm: empty theta trace");
  std::vector<Var<double>> d_vars;
  for (const auto& img : d_images) d_vars.push_back(t.constant(img));
  Var<double> total = t.constant_scalar(0.0);
  for (const auto& flat : theta_trace) {
    VarVec theta = classifier_constants_from_flat(t, proto, flat);
    Var<double> ce_d = batch_ce(t, d_vars, d_labels, proto, theta);
    auto g_d = t.gradients(ce_d, theta);  // detached
    Var<double> ce_s = batch_ce(t, s_images, s_labels, proto, theta);
    auto g_s = t.gradients_sym(ce_s, theta);
    for (size_t i = 0; i < theta.size(); ++i)
      total = t.add(total, t.sumsq(t.sub(g_s[i], t.constant(g_d[i]))));
  }
  return total;
}

Var<double> loss_tm(Tape<double>& t, const ExpertTrajectory& expert, int t0, int t1, int t2,
                    double lr, const std::vector<Var<double>>& s_images,
                    const std::vector<int>& s_labels) {
  if (t1 < 1 || t1 > t2) throw std::invalid_argument("loss_tm: need 1 <= t1 <= t2");
  if (t0 < 0 || size_t(t0 + t2) >= expert.snapshots.size())
    throw std::invalid_argument("loss_tm: t + t2 outside expert range");
  const auto& start = expert.snapshots[size_t(t0)];
  const auto& target = expert.snapshots[size_t(t0 + t2)];
  double den = 0;
  for (size_t i = 0; i < start.size(); ++i) {
    const double d = target[i] - start[i];
    den += d * d;
  }
  if (den < 1e-20) throw std::runtime_error("loss_tm: degenerate expert segment");

  VarVec theta0 = classifier_constants_from_flat(t, expert.proto, start);
  auto snaps = inner_unroll(t, s_images, s_labels, expert.proto, theta0, t1, lr);
  const VarVec& student = snaps.back();

  ClassifierWeights tw = expert.proto;
  tw.unflatten(target);
  VarVec tvars = classifier_push(t, tw, false);
  Var<double> num = t.constant_scalar(0.0);
  for (size_t i = 0; i < student.size(); ++i)
    num = t.add(num, t.sumsq(t.sub(student[i], tvars[i])));
  return t.scale(num, 1.0 / den);
}

Var<double> loss_dm(Tape<double>& t, const ClassifierWeights& extractor,
                    const std::vector<Tensor<double>>& d_images, const std::vector<int>& d_labels,
                    const std::vector<Var<double>>& s_images, const std::vector<int>& s_labels,
                    int K) {
  VarVec params = classifier_push(t, extractor, false);
  Var<double> total = t.constant_scalar(0.0);
  for (int c = 0; c < K; ++c) {
    Var<double> d_mean{}, s_mean{};
    int dn = 0, sn = 0;
    for (size_t i = 0; i < d_images.size(); ++i) {
      if (d_labels[i] != c) continue;
      Var<double> f = classifier_features(t, t.constant(d_images[i]), extractor, params);
      d_mean = dn ? t.add(d_mean, f) : f;
      ++dn;
    }
    for (size_t i = 0; i < s_images.size(); ++i) {
      if (s_labels[i] != c) continue;
      Var<double> f = classifier_features(t, s_images[i], extractor, params);
      s_mean = sn ? t.add(s_mean, f) : f;
      ++sn;
    }
    if (!dn || !sn) throw std::invalid_argument("loss_dm: empty class batch for class " + std::to_string(c));
    total = t.add(total, t.sumsq(t.sub(t.scale(s_mean, 1.0 / sn), t.scale(d_mean, 1.0 / dn))));
  }
  return total;
}

// ------------------------------------------------------------- schedules ----

double lambda_schedule(long step, long total, double lambda_hi, double lambda_lo) {
  if (lambda_lo > lambda_hi) throw std::invalid_argument("lambda_schedule: lambda_lo > lambda_hi");
  if (step < 0 || step >= total) throw std::invalid_argument("lambda_schedule: step out of range");
  return step < total / 2 ? lambda_hi : lambda_lo;
}

// --------------------------------------------------------- distill state ----

DistillState init_state(const RunConfig& cfg) {
  if (cfg.spc < 1) throw std::invalid_argument("init_state: spc must be >= 1");
  DistillState st;
  st.K = cfg.K;
  st.H = cfg.H;
  st.W = cfg.W;
  st.L = cfg.L;
  st.spc = cfg.spc;
  st.ent_cfg = cfg.ent;
  st.dec_cfg = cfg.decoder_config();
  st.seed = cfg.seed;
  const PyramidLayout lay = pyramid_dims(cfg.H, cfg.W, cfg.L);
  Rng root(cfg.seed);
  for (int c = 0; c < cfg.K; ++c) {
    Rng sr = root.split(0x51 + uint64_t(c));
    st.ent.push_back(EntropyNetWeights::init(cfg.ent, sr));
    st.dec.push_back(DecoderWeights::init(st.dec_cfg, sr));
    st.adam_e.emplace_back();
    st.adam_d.emplace_back();
    for (int j = 0; j < cfg.spc; ++j) {
      LatentPyramid p(lay);
      Rng zr = root.split(0x2000 + uint64_t(c) * 1024 + uint64_t(j));
      for (size_t i = 0; i < p.codes.numel(); ++i) p.codes[i] = zr.normal(0, 0.5);
      st.Z.push_back(std::move(p));
      st.Y.push_back(c);
      st.adam_z.emplace_back();
    }
  }
  return st;
}

namespace {

struct SliceVars {
  EntropyNetVars<double> ent;
  DecoderVars<double> dec;
};

VarVec collect(const EntropyNetVars<double>& e) {
  VarVec out;
  for (size_t i = 0; i < e.w.size(); ++i) {
    out.push_back(e.w[i]);
    out.push_back(e.b[i]);
  }
  return out;
}

VarVec collect(const DecoderVars<double>& d) {
  VarVec out;
  for (size_t i = 0; i < d.kernels.size(); ++i) {
    out.push_back(d.kernels[i]);
    out.push_back(d.biases[i]);
  }
  return out;
}

std::vector<double> flat_of(const std::vector<Tensor<double>>& grads) {
  std::vector<double> out;
  for (const auto& g : grads) out.insert(out.end(), g.data.begin(), g.data.end());
  return out;
}

void adam_flat(std::vector<double>& params, const std::vector<double>& grads,
               AdamState<double>& st, double lr) {
  Tensor<double> p({int(params.size())}, params);
  Tensor<double> g({int(grads.size())}, grads);
  adam_update(p, g, st, lr);
  params = p.data;
}

}  // namespace

void run_phase1(DistillState& st, const RunConfig& cfg, const LabeledImageSet& D,
                std::vector<MetricsRow>* metrics) {
  const PyramidLayout lay = pyramid_dims(st.H, st.W, st.L);
  auto by_class = class_index(D);
  Rng root(st.seed);
  for (int c = 0; c < st.K; ++c) {
    if (size_t(c) >= by_class.size() || by_class[size_t(c)].empty())
      throw std::invalid_argument("run_phase1: dataset has no samples for class " + std::to_string(c));
    // fixed overfit targets, one original per synthetic sample
    std::vector<Tensor<double>> targets;
    Rng tr = root.split(0x7A + uint64_t(c));
    for (int j = 0; j < st.spc; ++j)
      targets.push_back(image_of(D, by_class[size_t(c)][tr.next_below(by_class[size_t(c)].size())]));

    Rng noise = root.split(0x9B + uint64_t(c));
    for (long step = 0; step < cfg.phase1_steps; ++step) {
      Tape<double> t;
      std::vector<Var<double>> code_leaves;
      EntropyNetVars<double> ev = entropy_net_vars(t, st.ent[size_t(c)]);
      DecoderVars<double> dv = decoder_vars(t, st.dec[size_t(c)]);
      Var<double> rate{}, mse{};
      for (int j = 0; j < st.spc; ++j) {
        const size_t n = size_t(c * st.spc + j);
        Var<double> codes = t.leaf(st.Z[n].codes);
        code_leaves.push_back(codes);
        Var<double> noisy = relax_uniform_noise(t, codes, noise);
        Var<double> r = rate_bits_latents(t, noisy, lay, ev);
        rate = j ? t.add(rate, r) : r;
        Var<double> img = decode(t, upsample_concat(t, relax_ste(t, codes), lay), dv);
        Var<double> e = t.scale(t.sumsq(t.sub(img, t.constant(targets[size_t(j)]))),
                                1.0 / double(targets[size_t(j)].numel()));
        mse = j ? t.add(mse, e) : e;
      }
      Var<double> loss = t.add(rate, t.scale(mse, cfg.beta));
      VarVec leaves = code_leaves;
      VarVec ent_leaves = collect(ev), dec_leaves = collect(dv);
      leaves.insert(leaves.end(), ent_leaves.begin(), ent_leaves.end());
      leaves.insert(leaves.end(), dec_leaves.begin(), dec_leaves.end());
      auto grads = t.gradients(loss, leaves);

      size_t gi = 0;
      for (int j = 0; j < st.spc; ++j) {
        const size_t n = size_t(c * st.spc + j);
        adam_update(st.Z[n].codes, grads[gi++], st.adam_z[n], cfg.init_lr);
      }
      std::vector<Tensor<double>> ge(grads.begin() + long(gi), grads.begin() + long(gi + ent_leaves.size()));
      gi += ent_leaves.size();
      std::vector<Tensor<double>> gd(grads.begin() + long(gi), grads.end());
      auto ef = st.ent[size_t(c)].flatten();
      adam_flat(ef, flat_of(ge), st.adam_e[size_t(c)], cfg.init_lr);
      st.ent[size_t(c)].unflatten(ef);
      auto df = st.dec[size_t(c)].flatten();
      adam_flat(df, flat_of(gd), st.adam_d[size_t(c)], cfg.init_lr);
      st.dec[size_t(c)].unflatten(df);

      if (metrics && (step % 25 == 0 || step + 1 == cfg.phase1_steps))
        metrics->push_back({step, t.val(rate)[0], t.val(mse)[0], 0.0});
    }
  }
  // fresh optimizer state for Phase 2
  for (auto& a : st.adam_z) a = AdamState<double>();
  for (auto& a : st.adam_e) a = AdamState<double>();
  for (auto& a : st.adam_d) a = AdamState<double>();
  st.phase = 1;
}

StepResult joint_step(DistillState& st, const RunConfig& cfg, const LabeledImageSet& D,
                      const std::string& loss_kind, double lambda, long step,
                      const ExpertTrajectory* expert) {
  const PyramidLayout lay = pyramid_dims(st.H, st.W, st.L);
  auto by_class = class_index(D);
  Rng noise = Rng(st.seed).split(0xA0 + uint64_t(step));
  Rng batch_rng = Rng(st.seed).split(0xB0 + uint64_t(step));
  Rng net_rng = Rng(st.seed).split(0xC0 + uint64_t(step));

  Tape<double> t;
  std::vector<Var<double>> code_leaves, s_images;
  std::vector<SliceVars> sv;
  for (int c = 0; c < st.K; ++c)
    sv.push_back({entropy_net_vars(t, st.ent[size_t(c)]), decoder_vars(t, st.dec[size_t(c)])});

  Var<double> rate{};
  for (size_t n = 0; n < st.Z.size(); ++n) {
    const int c = st.slice_of(n);
    Var<double> codes = t.leaf(st.Z[n].codes);
    code_leaves.push_back(codes);
    Var<double> r = rate_bits_latents(t, relax_uniform_noise(t, codes, noise), lay, sv[size_t(c)].ent);
    rate = n ? t.add(rate, r) : r;
    s_images.push_back(decode(t, upsample_concat(t, relax_ste(t, codes), lay), sv[size_t(c)].dec));
  }

  // balanced original minibatch
  std::vector<Tensor<double>> d_images;
  std::vector<int> d_labels;
  for (int c = 0; c < st.K; ++c) {
    if (size_t(c) >= by_class.size() || by_class[size_t(c)].empty())
      throw std::invalid_argument("joint_step: dataset has no samples for class " + std::to_string(c));
    for (int k = 0; k < cfg.batch_per_class; ++k) {
      d_images.push_back(image_of(D, by_class[size_t(c)][batch_rng.next_below(by_class[size_t(c)].size())]));
      d_labels.push_back(c);
    }
  }

  Var<double> utility{};
  if (loss_kind == "gm") {
    ClassifierWeights theta = ClassifierWeights::init(cfg.clf, st.H, st.W, st.K, net_rng);
    std::vector<std::vector<double>> trace{theta.flatten()};
    if (cfg.gm_inner_steps > 0) {
      LabeledImageSet dsub;
      dsub.images = Tensor<double>({int(d_images.size()), st.H, st.W, 3});
      for (size_t i = 0; i < d_images.size(); ++i)
        std::copy(d_images[i].data.begin(), d_images[i].data.end(),
                  dsub.images.data.begin() + long(i * d_images[i].numel()));
      dsub.labels = d_labels;
      ClassifierWeights w = theta;
      auto snaps = sgd_train(w, dsub, cfg.gm_inner_steps, cfg.inner_lr, cfg.batch_per_class,
                             net_rng, true);
      trace.assign(snaps.begin(), snaps.end());
    }
    utility = loss_gm(t, theta, trace, d_images, d_labels, s_images, st.Y);
  } else if (loss_kind == "tm") {
    if (!expert) throw std::invalid_argument("joint_step: tm loss needs an expert trajectory");
    const int span = int(expert->snapshots.size()) - cfg.tm_t2 - 1;
    if (span < 0) throw std::invalid_argument("joint_step: expert trajectory shorter than t2");
    const int t0 = span > 0 ? int(net_rng.next_below(uint64_t(span + 1))) : 0;
    utility = loss_tm(t, *expert, t0, cfg.tm_t1, cfg.tm_t2, cfg.tm_lr, s_images, st.Y);
  } else if (loss_kind == "dm") {
    ClassifierWeights ext = ClassifierWeights::init(cfg.clf, st.H, st.W, st.K, net_rng);
    utility = loss_dm(t, ext, d_images, d_labels, s_images, st.Y, st.K);
  } else {
    throw std::invalid_argument("joint_step: unknown loss kind " + loss_kind);
  }

  Var<double> total = t.add(rate, t.scale(utility, lambda));
  VarVec leaves = code_leaves;
  std::vector<std::pair<size_t, size_t>> ent_span, dec_span;
  for (int c = 0; c < st.K; ++c) {
    VarVec e = collect(sv[size_t(c)].ent);
    ent_span.emplace_back(leaves.size(), e.size());
    leaves.insert(leaves.end(), e.begin(), e.end());
  }
  for (int c = 0; c < st.K; ++c) {
    VarVec d = collect(sv[size_t(c)].dec);
    dec_span.emplace_back(leaves.size(), d.size());
    leaves.insert(leaves.end(), d.begin(), d.end());
  }
  auto grads = t.gradients(total, leaves);

  for (size_t n = 0; n < st.Z.size(); ++n)
    adam_update(st.Z[n].codes, grads[n], st.adam_z[n], cfg.joint_lr);
  for (int c = 0; c < st.K; ++c) {
    auto [off, cnt] = ent_span[size_t(c)];
    std::vector<Tensor<double>> ge(grads.begin() + long(off), grads.begin() + long(off + cnt));
    auto ef = st.ent[size_t(c)].flatten();
    adam_flat(ef, flat_of(ge), st.adam_e[size_t(c)], cfg.joint_lr);
    st.ent[size_t(c)].unflatten(ef);
    auto [doff, dcnt] = dec_span[size_t(c)];
    std::vector<Tensor<double>> gd(grads.begin() + long(doff), grads.begin() + long(doff + dcnt));
    auto df = st.dec[size_t(c)].flatten();
    adam_flat(df, flat_of(gd), st.adam_d[size_t(c)], cfg.joint_lr);
    st.dec[size_t(c)].unflatten(df);
  }
  return {t.val(rate)[0], t.val(utility)[0]};
}

CodedDataset post_quantize(const DistillState& st, const RunConfig& cfg) {
  CodedDataset ds;
  ds.K = st.K;
  ds.H = st.H;
  ds.W = st.W;
  ds.L = st.L;
  ds.slice_size = st.spc;
  ds.ent_cfg = st.ent_cfg;
  ds.dec_cfg = st.dec_cfg;
  ds.labels = st.Y;
  for (const auto& z : st.Z) ds.latents.push_back(quantize_round(z));

  // per-slice step choices; the container carries one step per network kind,
  // so take the finest across slices and re-snap
  const int C = st.ent_cfg.context_length;
  double q_e = 0, q_d = 0;
  std::vector<double> dec_steps(size_t(st.K));
  for (int c = 0; c < st.K; ++c) {
    std::vector<std::vector<double>> probes;
    std::vector<QuantizedPyramid> slice_lat;
    for (int j = 0; j < st.spc; ++j) {
      const auto& q = ds.latents[size_t(c * st.spc + j)];
      slice_lat.push_back(q);
      for (int l = 0; l < q.layout.L && probes.size() < 256; ++l) {
        auto [h, w] = q.layout.dims[size_t(l)];
        for (size_t pos = 0; pos < size_t(h) * size_t(w) && probes.size() < 256; pos += 3) {
          auto idx = context_indices(q.layout, l, pos, C);
          std::vector<double> ctx(size_t(C), 0.0);
          for (int k = 0; k < C; ++k)
            if (idx[size_t(k)] >= 0) ctx[size_t(k)] = double(q.codes[size_t(idx[size_t(k)])]);
          probes.push_back(std::move(ctx));
        }
      }
    }
    const double qe = choose_entropy_quant_step(st.ent[size_t(c)], probes);
    q_e = c ? std::min(q_e, qe) : qe;
    auto pq = post_quantize_decoder(st.dec[size_t(c)], slice_lat, cfg.mse_budget);
    dec_steps[size_t(c)] = pq.step;
    q_d = c ? std::min(q_d, pq.step) : pq.step;
  }
  ds.q_e = q_e;
  ds.q_d = q_d;
  // snap on the grid the container actually stores (f32 step) so Phase-3
  // output matches the decoded stream bit for bit
  const double qe32 = double(float(q_e)), qd32 = double(float(q_d));
  for (int c = 0; c < st.K; ++c) {
    EntropyNetWeights e = st.ent[size_t(c)];
    e.unflatten(quantize_weights(e.flatten(), qe32));
    DecoderWeights d = st.dec[size_t(c)];
    d.unflatten(quantize_weights(d.flatten(), qd32));
    ds.slices.push_back({std::move(e), std::move(d)});
  }
  return ds;
}

DistillResult run_algorithm1(const RunConfig& cfg, const LabeledImageSet& D) {
  DistillResult res;
  res.state = init_state(cfg);
  DistillState& st = res.state;
  run_phase1(st, cfg, D, &res.metrics);

  ExpertTrajectory expert;
  const bool tm = cfg.loss == "tm";
  if (tm)
    expert = generate_expert(D, cfg.clf, cfg.K, cfg.tm_expert_steps, cfg.tm_lr,
                             cfg.batch_per_class, Rng(cfg.seed).split(0xE0).next_u64());
  for (long step = 0; step < cfg.phase2_steps; ++step) {
    const double lam = lambda_schedule(step, cfg.phase2_steps, cfg.lambda_hi, cfg.lambda_lo);
    StepResult r = joint_step(st, cfg, D, cfg.loss, lam, step, tm ? &expert : nullptr);
    if (step % 10 == 0 || step + 1 == cfg.phase2_steps)
      res.metrics.push_back({cfg.phase1_steps + step, r.rate_bits, r.utility, lam});
  }
  st.phase = 2;

  res.coded = post_quantize(st, cfg);
  res.stream = encode_dataset(res.coded);
  st.phase = 3;
  return res;
}

LabeledImageSet decoded_set(const CodedDataset& ds) {
  LabeledImageSet set;
  set.images = Tensor<double>({int(ds.latents.size()), ds.H, ds.W, 3});
  set.labels = ds.labels;
  for (size_t n = 0; n < ds.latents.size(); ++n) {
    const size_t s = n / size_t(ds.slice_size);
    Tensor<double> img = clamp_image(decode(ds.latents[n], ds.slices[s].dec));
    std::copy(img.data.begin(), img.data.end(), set.images.data.begin() + long(n * img.numel()));
  }
  return set;
}

EvalResult evaluate(const CodedDataset& ds, const LabeledImageSet& test,
                    const ClassifierConfig& cfg, int trials, int steps, double lr,
                    int batch_per_class, uint64_t seed) {
  if (trials < 1) throw std::invalid_argument("evaluate: trials must be >= 1");
  LabeledImageSet syn = decoded_set(ds);
  EvalResult res;
  for (int tr = 0; tr < trials; ++tr) {
    Rng init_rng = Rng(seed).split(0xF000 + uint64_t(tr));
    Rng batch_rng = Rng(seed).split(0xF800 + uint64_t(tr));
    ClassifierWeights w = ClassifierWeights::init(cfg, ds.H, ds.W, ds.K, init_rng);
    sgd_train(w, syn, steps, lr, batch_per_class, batch_rng);
    res.per_trial.push_back(accuracy(w, test));
  }
  double mean = std::accumulate(res.per_trial.begin(), res.per_trial.end(), 0.0) / trials;
  double var = 0;
  for (double a : res.per_trial) var += (a - mean) * (a - mean);
  res.mean = mean;
  res.stddev = trials > 1 ? std::sqrt(var / double(trials - 1)) : 0.0;
  return res;
}

void write_metrics_csv(const std::string& path, const std::vector<MetricsRow>& rows) {
  std::ofstream os(path);
  if (!os) throw std::runtime_error("cannot open " + path);
  os << "step,rate_bits,utility,lambda\n";
  for (const auto& r : rows)
    os << r.step << "," << r.rate_bits << "," << r.utility << "," << r.lambda << "\n";
}

}  // namespace rudd
