// Acceptance gate: one pass/fail line per criterion, nonzero exit on any
// failure. Optionally pass criterion ids as arguments to run a subset.

#include <chrono>
#include <cmath>
#include <cstdio>
#include <set>
#include <string>
#include <vector>

#include "rudd/distill.hpp"
#include "testutil.hpp"

using namespace rudd;
using Clock = std::chrono::steady_clock;

namespace {

struct Criterion {
  int id;
  const char* what;
  bool pass = false;
  double secs = 0;
  std::string note;
};

std::vector<Criterion> results;
std::set<int> only;

template <class F>
void criterion(int id, const char* what, F f) {
  if (!only.empty() && !only.count(id)) return;
  Criterion c{id, what};
  const auto t0 = Clock::now();
  try {
    f(c);
  } catch (const std::exception& e) {
    c.pass = false;
    c.note = std::string("exception: ") + e.what();
  }
  c.secs = std::chrono::duration<double>(Clock::now() - t0).count();
  results.push_back(c);
}

// ------------------------------------------------------------- helpers ----

int32_t sample_laplace(Rng& rng, double mu, double b) {
  const double u = rng.uniform(-0.5, 0.5);
  return quantize_symbol(mu - b * (u < 0 ? -1.0 : 1.0) * std::log(1 - 2 * std::abs(u)));
}

CodedDataset random_dataset(Rng& rng, int K, int spc, int H, int W, int L) {
  CodedDataset ds;
  ds.K = K;
  ds.H = H;
  ds.W = W;
  ds.L = L;
  ds.slice_size = spc;
  ds.ent_cfg = {8, 8, 2};
  ds.dec_cfg = DecoderConfig::custom(L, 6);
  ds.q_e = 0.01 * rng.uniform(0.5, 2.0);
  ds.q_d = 0.02 * rng.uniform(0.5, 2.0);
  const PyramidLayout lay = pyramid_dims(H, W, L);
  for (int c = 0; c < K; ++c) {
    EntropyNetWeights e = EntropyNetWeights::init(ds.ent_cfg, rng);
    e.unflatten(quantize_weights(e.flatten(), double(float(ds.q_e))));
    DecoderWeights d = DecoderWeights::init(ds.dec_cfg, rng);
    d.unflatten(quantize_weights(d.flatten(), double(float(ds.q_d))));
    ds.slices.push_back({std::move(e), std::move(d)});
    for (int j = 0; j < spc; ++j) {
      QuantizedPyramid q;
      q.layout = lay;
      for (size_t i = 0; i < lay.total; ++i) q.codes.push_back(sample_laplace(rng, 0, 6.0));
      ds.latents.push_back(std::move(q));
      ds.labels.push_back(c);
    }
  }
  return ds;
}

std::vector<LaplaceParams> all_params(const QuantizedPyramid& q, const EntropyNetWeights& net) {
  const int C = net.config.context_length;
  std::vector<LaplaceParams> out;
  for (int l = 0; l < int(q.layout.dims.size()); ++l) {
    auto [h, w] = q.layout.dims[size_t(l)];
    for (size_t pos = 0; pos < size_t(h) * size_t(w); ++pos) {
      auto idx = context_indices(q.layout, l, pos, C);
      std::vector<double> ctx(size_t(C), 0.0);
      for (int k = 0; k < C; ++k)
        if (idx[size_t(k)] >= 0) ctx[size_t(k)] = double(q.codes[size_t(idx[size_t(k)])]);
      out.push_back(predict_params(net, ctx));
    }
  }
  return out;
}

// Calibrated desk-scale config shared by criteria 8 and 9.
RunConfig frontier_config(double lambda) {
  RunConfig cfg;
  cfg.K = 4;
  cfg.per_class = 200;
  cfg.H = 16;
  cfg.W = 16;
  cfg.spc = 2;
  cfg.L = 3;
  cfg.loss = "dm";
  cfg.lambda_hi = lambda;
  cfg.lambda_lo = lambda;
  cfg.phase1_steps = 250;
  cfg.phase2_steps = 200;
  cfg.eval_steps = 100;
  cfg.eval_batch_per_class = 4;
  cfg.trials = 5;
  cfg.seed = 7;
  return cfg;
}

struct FrontierPoint {
  double bpc = 0, acc = 0, std = 0;
};
std::vector<FrontierPoint> frontier;  // filled by criterion 8, reused by 9
bool frontier_alloc_ok = true;

}  // namespace

int main(int argc, char** argv) {
  for (int i = 1; i < argc; ++i) only.insert(std::atoi(argv[i]));

  criterion(1, "decoder preset parameter counts", [](Criterion& c) {
    const std::pair<const char*, long> rows[] = {
        {"v4-40", 571},   {"v4-160", 1771},   {"v4-240", 2571}, {"v4-480", 4971},
        {"v4-960", 9771}, {"v4-1200", 12171}, {"v5-240", 11611}, {"v5-320", 15371},
    };
    c.pass = true;
    for (auto [name, want] : rows)
      if (param_count(DecoderConfig::preset(name)) != want) {
        c.pass = false;
        c.note = std::string(name) + " mismatch";
      }
  });

  criterion(2, "soft-label rate bound K=1000 eps=2^-24", [](Criterion& c) {
    const double bound = soft_label_rate_bound(1000, std::pow(2.0, -24.0));
    c.pass = std::abs(bound - 15456.0) <= 2.0;
    c.note = "bound = " + std::to_string(bound) + " bits";
  });

  criterion(3, "raw 128x128x3 32-bit image accounts to 192 KiB/class", [](Criterion& c) {
    c.pass = bpc(uint64_t(128) * 128 * 3 * 32, 1) == 192.0 * 1024.0 * 8.0;
  });

  criterion(4, "200 randomized lossless round trips", [](Criterion& c) {
    Rng rng(41);
    int bad = 0, alloc_bad = 0;
    for (int trial = 0; trial < 200; ++trial) {
      const int K = 2 + int(rng.next_below(3));
      const int spc = 1 + int(rng.next_below(3));
      const int H = 8 << rng.next_below(3);
      const int L = 1 + int(rng.next_below(4));
      CodedDataset ds = random_dataset(rng, K, spc, H, H, L);
      DatasetBitstream bs = encode_dataset(ds);
      if (bs.allocation.total_bits() != 8 * uint64_t(bs.bytes.size())) ++alloc_bad;
      const BitAllocation re = read_allocation(bs.bytes);
      if (re.explicit_bits != bs.allocation.explicit_bits ||
          re.implicit_bits != bs.allocation.implicit_bits ||
          re.label_bits != bs.allocation.label_bits || re.header_bits != bs.allocation.header_bits)
        ++alloc_bad;
      CodedDataset back = decode_dataset(bs.bytes);
      bool same = back.labels == ds.labels && back.latents.size() == ds.latents.size();
      for (size_t n = 0; same && n < ds.latents.size(); ++n)
        same = back.latents[n].codes == ds.latents[n].codes;
      for (size_t s = 0; same && s < ds.slices.size(); ++s)
        same = back.slices[s].ent.flatten() == ds.slices[s].ent.flatten() &&
               back.slices[s].dec.flatten() == ds.slices[s].dec.flatten();
      if (!same) ++bad;
    }
    frontier_alloc_ok = frontier_alloc_ok && alloc_bad == 0;
    c.pass = bad == 0 && alloc_bad == 0;
    c.note = std::to_string(bad) + " mismatches";
  });

  criterion(5, "coded length within 32 bits + 0.1% of cross-entropy", [](Criterion& c) {
    Rng rng(51);
    c.pass = true;
    double worst = 0;
    for (int seq = 0; seq < 10; ++seq) {
      const double mu = rng.uniform(-100, 100), b = rng.uniform(0.2, 60.0);
      std::vector<int32_t> syms(100000);
      for (auto& s : syms) s = sample_laplace(rng, mu, b);
      const LaplaceSymbolModel m{mu, b};
      double h = 0;
      for (int32_t s : syms) {
        uint64_t cum, freq;
        m.interval(s, cum, freq);
        h += -std::log2(double(freq) / double(m.total()));
      }
      const double coded = 8.0 * double(range_encode(syms, [m](size_t) { return m; }).size());
      worst = std::max(worst, coded - h);
      if (coded > h + 32.0 + 0.001 * h) c.pass = false;
    }
    c.note = "worst overhead " + std::to_string(worst) + " bits";
  });

  criterion(6, "gradient suites vs finite differences (decode, rate, gm, tm, dm)", [](Criterion& c) {
    const double tol = 1e-3;
    double worst = 0;
    c.pass = true;
    auto record = [&](const testutil::GradCheck& r, const char* suite) {
      worst = std::max(worst, r.max_rel_err);
      if (!r.ok) {
        c.pass = false;
        c.note = std::string("failed ") + suite;
      }
    };
    for (int i = 0; i < 30; ++i) {
      Rng rng(600 + uint64_t(i));
      // decode
      {
        DecoderConfig dcfg = DecoderConfig::custom(1 + int(rng.next_below(2)),
                                                   4 + int(rng.next_below(5)),
                                                   int(rng.next_below(2)) * 4);
        DecoderWeights d = DecoderWeights::init(dcfg, rng);
        std::vector<Tensor<double>> leaves{
            testutil::random_tensor({3 + int(rng.next_below(4)), 3 + int(rng.next_below(4)), dcfg.L}, rng)};
        for (size_t k = 0; k < d.kernels.size(); ++k) {
          leaves.push_back(d.kernels[k]);
          leaves.push_back(d.biases[k]);
        }
        record(testutil::check_gradients(leaves, [&d](Tape<double>& t, const auto& v) {
          DecoderVars<double> dv;
          dv.config = d.config;
          size_t k = 1;
          for (size_t j = 0; j < d.kernels.size(); ++j) {
            dv.kernels.push_back(v[k++]);
            dv.biases.push_back(v[k++]);
          }
          return t.sumsq(decode(t, v[0], dv));
        }, tol), "decode");
      }
      // latent rate
      {
        const PyramidLayout lay = pyramid_dims(4 + int(rng.next_below(5)), 4 + int(rng.next_below(5)),
                                               1 + int(rng.next_below(2)));
        EntropyNetWeights net = EntropyNetWeights::init({4 + int(rng.next_below(5)), 8, 2}, rng);
        Tensor<double> codes({int(lay.total)});
        for (auto& v : codes.data) v = rng.normal(0, 3);
        std::vector<Tensor<double>> leaves{codes};
        for (size_t k = 0; k < net.w.size(); ++k) {
          leaves.push_back(net.w[k]);
          leaves.push_back(net.b[k]);
        }
        record(testutil::check_gradients(leaves, [lay, &net](Tape<double>& t, const auto& v) {
          EntropyNetVars<double> ev;
          ev.config = net.config;
          size_t k = 1;
          for (size_t j = 0; j < net.w.size(); ++j) {
            ev.w.push_back(v[k++]);
            ev.b.push_back(v[k++]);
          }
          return rate_bits_latents(t, v[0], lay, ev);
        }, tol), "rate");
      }
      // matching losses, 4x4 images
      {
        ClassifierWeights proto = ClassifierWeights::init({1, 3}, 4, 4, 2, rng);
        std::vector<Tensor<double>> d_imgs, leaves;
        for (int n = 0; n < 4; ++n) d_imgs.push_back(testutil::random_tensor({4, 4, 3}, rng, 0.5));
        for (int n = 0; n < 2; ++n) leaves.push_back(testutil::random_tensor({4, 4, 3}, rng, 0.5));
        const std::vector<int> d_lbl = {0, 0, 1, 1}, s_lbl = {0, 1};
        auto trace = std::vector<std::vector<double>>{proto.flatten()};
        record(testutil::check_gradients(leaves, [&](Tape<double>& t, const auto& v) {
          return loss_gm(t, proto, trace, d_imgs, d_lbl, v, s_lbl);
        }, tol), "gm");
        record(testutil::check_gradients(leaves, [&](Tape<double>& t, const auto& v) {
          return loss_dm(t, proto, d_imgs, d_lbl, v, s_lbl, 2);
        }, tol), "dm");
        LabeledImageSet set = generate_toy(2, 6, 4, 4, 600 + uint64_t(i));
        ExpertTrajectory ex = generate_expert(set, {1, 3}, 2, 5, 0.2, 3, 700 + uint64_t(i));
        record(testutil::check_gradients(leaves, [&](Tape<double>& t, const auto& v) {
          return loss_tm(t, ex, 0, 1, 3, 0.3, v, s_lbl);
        }, tol), "tm");
      }
    }
    if (c.pass) c.note = "max rel err " + std::to_string(worst);
  });

  criterion(7, "single-image overfit reaches MSE <= 1e-3 in 3000 steps", [](Criterion& c) {
    const LabeledImageSet toy = generate_toy(2, 1, 16, 16, 7);
    Tensor<double> target({16, 16, 3});
    for (size_t i = 0; i < target.numel(); ++i) target[i] = toy.images[i];

    const PyramidLayout lay = pyramid_dims(16, 16, 3);
    Rng root(4321);
    Rng wi = root.split(1), noise = root.split(2);
    EntropyNetWeights ent = EntropyNetWeights::init({8, 16, 2}, wi);
    DecoderWeights dec = DecoderWeights::init(DecoderConfig::custom(3, 24, 12), wi);
    Tensor<double> z({int(lay.total)});
    for (auto& v : z.data) v = wi.normal(0, 0.5);

    AdamState<double> az, ae, ad;
    const double beta = 1e6;
    double mse = 1;
    for (int step = 0; step < 3000; ++step) {
      const double lr = step < 2000 ? 0.01 : 0.002;
      const double lr_z = 5 * lr;
      Tape<double> t;
      Var<double> codes = t.leaf(z);
      EntropyNetVars<double> ev = entropy_net_vars(t, ent);
      DecoderVars<double> dv = decoder_vars(t, dec);
      Var<double> rate = rate_bits_latents(t, relax_uniform_noise(t, codes, noise), lay, ev);
      Var<double> img = decode(t, upsample_concat(t, relax_ste(t, codes), lay), dv);
      Var<double> err = t.scale(t.sumsq(t.sub(img, t.constant(target))), 1.0 / double(target.numel()));
      Var<double> loss = t.add(rate, t.scale(err, beta));
      mse = t.val(err)[0];

      std::vector<Var<double>> leaves{codes};
      for (size_t j = 0; j < ev.w.size(); ++j) {
        leaves.push_back(ev.w[j]);
        leaves.push_back(ev.b[j]);
      }
      for (size_t j = 0; j < dv.kernels.size(); ++j) {
        leaves.push_back(dv.kernels[j]);
        leaves.push_back(dv.biases[j]);
      }
      auto g = t.gradients(loss, leaves);
      adam_update(z, g[0], az, lr_z);
      std::vector<double> gf, ef = ent.flatten();
      size_t gi = 1;
      for (size_t j = 0; j < ev.w.size(); ++j) {
        gf.insert(gf.end(), g[gi].data.begin(), g[gi].data.end());
        ++gi;
        gf.insert(gf.end(), g[gi].data.begin(), g[gi].data.end());
        ++gi;
      }
      {
        Tensor<double> p({int(ef.size())}, ef), gr({int(gf.size())}, gf);
        adam_update(p, gr, ae, lr);
        ent.unflatten(p.data);
      }
      gf.clear();
      std::vector<double> df = dec.flatten();
      for (size_t j = 0; j < dv.kernels.size(); ++j) {
        gf.insert(gf.end(), g[gi].data.begin(), g[gi].data.end());
        ++gi;
        gf.insert(gf.end(), g[gi].data.begin(), g[gi].data.end());
        ++gi;
      }
      {
        Tensor<double> p({int(df.size())}, df), gr({int(gf.size())}, gf);
        adam_update(p, gr, ad, lr);
        dec.unflatten(p.data);
      }
    }
    c.pass = mse <= 1e-3;
    c.note = "final MSE " + std::to_string(mse);
  });

  criterion(8, "rate-utility frontier over lambda grid {25, 100, 400}", [](Criterion& c) {
    frontier.clear();
    for (double lam : {25.0, 100.0, 400.0}) {
      const RunConfig cfg = frontier_config(lam);
      const LabeledImageSet D = generate_toy(cfg.K, cfg.per_class, cfg.H, cfg.W, cfg.seed);
      const LabeledImageSet test = generate_toy(cfg.K, cfg.per_class, cfg.H, cfg.W, cfg.seed ^ 0x7e57);
      DistillResult res = run_algorithm1(cfg, D);
      if (res.stream.allocation.total_bits() != 8 * uint64_t(res.stream.bytes.size()))
        frontier_alloc_ok = false;
      EvalResult ev = evaluate(res.coded, test, cfg.clf, cfg.trials, cfg.eval_steps, cfg.eval_lr,
                               cfg.eval_batch_per_class, cfg.seed);
      frontier.push_back({bpc(res.stream, cfg.K), ev.mean, ev.stddev});
    }
    bool bpc_mono = frontier[0].bpc <= frontier[1].bpc && frontier[1].bpc <= frontier[2].bpc;
    bool acc_mono = true;
    for (size_t i = 0; i + 1 < frontier.size(); ++i)
      if (frontier[i + 1].acc < frontier[i].acc - std::max(frontier[i].std, frontier[i + 1].std))
        acc_mono = false;
    c.pass = bpc_mono && acc_mono;
    char buf[160];
    std::snprintf(buf, sizeof buf, "bpc {%.0f, %.0f, %.0f}, acc {%.3f, %.3f, %.3f}",
                  frontier[0].bpc, frontier[1].bpc, frontier[2].bpc, frontier[0].acc,
                  frontier[1].acc, frontier[2].acc);
    c.note = buf;
  });

  criterion(9, "middle-lambda utility vs originals, bpc <= 25% of raw pixels", [](Criterion& c) {
    if (frontier.size() != 3) {
      c.note = "criterion 8 did not run";
      return;
    }
    const RunConfig cfg = frontier_config(100.0);
    const LabeledImageSet D = generate_toy(cfg.K, cfg.per_class, cfg.H, cfg.W, cfg.seed);
    const LabeledImageSet test = generate_toy(cfg.K, cfg.per_class, cfg.H, cfg.W, cfg.seed ^ 0x7e57);
    double acc_orig = 0;
    Rng root(cfg.seed);
    for (int tr = 0; tr < cfg.trials; ++tr) {
      Rng r = root.split(0xF000 + uint64_t(tr));
      ClassifierWeights w = ClassifierWeights::init(cfg.clf, cfg.H, cfg.W, cfg.K, r);
      sgd_train(w, D, cfg.eval_steps, cfg.eval_lr, cfg.eval_batch_per_class, r);
      acc_orig += accuracy(w, test);
    }
    acc_orig /= cfg.trials;
    const double raw_bpc = double(cfg.spc) * cfg.H * cfg.W * 3 * 32;
    const double mid_bpc = frontier[1].bpc, mid_acc = frontier[1].acc;
    c.pass = mid_acc >= 0.8 * acc_orig && mid_bpc <= 0.25 * raw_bpc;
    char buf[160];
    std::snprintf(buf, sizeof buf, "synthetic %.3f vs original %.3f, bpc %.0f vs raw %.0f", mid_acc,
                  acc_orig, mid_bpc, raw_bpc);
    c.note = buf;
  });

  criterion(10, "bit allocation sums to file size on every stream", [](Criterion& c) {
    Rng rng(101);
    bool ok = frontier_alloc_ok;
    for (int trial = 0; trial < 20; ++trial) {
      CodedDataset ds = random_dataset(rng, 2 + int(rng.next_below(3)), 1 + int(rng.next_below(2)),
                                       8, 8, 1 + int(rng.next_below(3)));
      DatasetBitstream bs = encode_dataset(ds);
      if (bs.allocation.total_bits() != 8 * uint64_t(bs.bytes.size())) ok = false;
      const BitAllocation re = read_allocation(bs.bytes);
      if (re.explicit_bits + re.implicit_bits + re.label_bits + re.header_bits !=
          8 * uint64_t(bs.bytes.size()))
        ok = false;
    }
    c.pass = ok;
  });

  criterion(11, "causality, quantizer, Laplace normalization, post-quantization", [](Criterion& c) {
    c.pass = true;
    Rng rng(111);
    // causality: flipping a code changes no earlier prediction and at least
    // one later same-scale prediction inside the context window
    for (int inst = 0; inst < 10 && c.pass; ++inst) {
      const PyramidLayout lay = pyramid_dims(4 + int(rng.next_below(5)), 4 + int(rng.next_below(5)),
                                             1 + int(rng.next_below(2)));
      EntropyNetWeights net = EntropyNetWeights::init({4, 8, 2}, rng);
      QuantizedPyramid q;
      q.layout = lay;
      for (size_t i = 0; i < lay.total; ++i) q.codes.push_back(sample_laplace(rng, 0, 5.0));
      const size_t j = 1 + rng.next_below(lay.total - 2);
      auto before = all_params(q, net);
      q.codes[j] += 7;
      auto after = all_params(q, net);
      for (size_t i = 0; i < j; ++i)
        if (before[i].mu != after[i].mu || before[i].b != after[i].b) c.pass = false;
      bool touched = false;
      for (size_t i = j + 1; i < lay.total; ++i)
        if (before[i].mu != after[i].mu || before[i].b != after[i].b) touched = true;
      // j may be the last symbol of its scale; only then nothing downstream
      int scale = 0;
      while (size_t(scale + 1) < lay.offsets.size() && j >= lay.offsets[size_t(scale + 1)]) ++scale;
      const size_t scale_end = (size_t(scale + 1) < lay.offsets.size())
                                   ? lay.offsets[size_t(scale + 1)]
                                   : lay.total;
      if (j + 1 < scale_end && !touched) c.pass = false;
      if (!c.pass) c.note = "causality violated";
    }
    // quantizer idempotence
    for (int inst = 0; inst < 20 && c.pass; ++inst) {
      LatentPyramid p;
      p.layout = pyramid_dims(8, 8, 2);
      p.codes = Tensor<double>({int(p.layout.total)});
      for (auto& v : p.codes.data) v = rng.normal(0, 20);
      QuantizedPyramid q = quantize_round(p);
      if (quantize_round(dequantize(q)).codes != q.codes) {
        c.pass = false;
        c.note = "quantizer not idempotent";
      }
    }
    // discretized Laplace sums to one over the alphabet, unfloored
    for (int inst = 0; inst < 12 && c.pass; ++inst) {
      const LaplaceParams p{rng.uniform(-100, 100),
                            inst == 0 ? 1e-6 : rng.uniform(0.01, 50.0)};
      double total = 0;
      for (int32_t z = kSymbolMin; z <= kSymbolMax; ++z) total += discrete_laplace_prob(double(z), p);
      if (std::abs(total - 1.0) > 1e-9) {
        c.pass = false;
        c.note = "Laplace normalization off by " + std::to_string(total - 1.0);
      }
    }
    // post-quantization: snapped weights are a fixed point, and rerunning
    // Phase 3 on the same state reproduces the stream byte for byte
    if (c.pass) {
      RunConfig cfg;
      cfg.K = 2;
      cfg.per_class = 4;
      cfg.H = 8;
      cfg.W = 8;
      cfg.spc = 1;
      cfg.L = 2;
      cfg.ent = {8, 8, 2};
      cfg.dec_d1 = 8;
      cfg.phase1_steps = 60;
      cfg.seed = 11;
      const LabeledImageSet D = generate_toy(cfg.K, cfg.per_class, cfg.H, cfg.W, 3);
      DistillState st = init_state(cfg);
      run_phase1(st, cfg, D);
      CodedDataset a = post_quantize(st, cfg);
      CodedDataset b = post_quantize(st, cfg);
      if (encode_dataset(a).bytes != encode_dataset(b).bytes) {
        c.pass = false;
        c.note = "post-quantization not reproducible";
      }
      for (const auto& sl : a.slices) {
        if (sl.ent.flatten() != quantize_weights(sl.ent.flatten(), double(float(a.q_e))) ||
            sl.dec.flatten() != quantize_weights(sl.dec.flatten(), double(float(a.q_d)))) {
          c.pass = false;
          c.note = "snapped weights not a fixed point";
        }
      }
    }
  });

  bool all = true;
  for (const auto& c : results) {
    std::printf("%s criterion %d: %s (%.1fs)%s%s\n", c.pass ? "PASS" : "FAIL", c.id, c.what, c.secs,
                c.note.empty() ? "" : " -- ", c.note.c_str());
    all = all && c.pass;
  }
  return all ? 0 : 1;
}
