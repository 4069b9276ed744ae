#pragma once

#include <string>
#include <vector>

#include "rudd/adam.hpp"
#include "rudd/codec.hpp"
#include "rudd/data.hpp"
#include "rudd/decoder.hpp"
#include "rudd/entropy_model.hpp"
#include "rudd/latents.hpp"
#include "rudd/tape.hpp"

namespace rudd {

// ------------------------------------------------------------ classifier ----

// Downstream model: B blocks of {3x3 conv, instance norm, ReLU, 2x2 average
// pool}, then a linear head. Input spatial dims must be divisible by 2^B.
struct ClassifierConfig {
  int blocks = 2;
  int channels = 32;
};

struct ClassifierWeights {
  ClassifierConfig config;
  int in_h = 0, in_w = 0, in_c = 3, num_classes = 0;
  std::vector<Tensor<double>> conv_k, conv_b;
  Tensor<double> head_w, head_b;

  static ClassifierWeights init(const ClassifierConfig& cfg, int H, int W, int K, Rng& rng);

  size_t num_params() const;
  std::vector<double> flatten() const;
  void unflatten(const std::vector<double>& flat);
};

using VarVec = std::vector<Var<double>>;

// Parameters as tape vars, in flatten() order (conv pairs, then head).
VarVec classifier_leaves(Tape<double>& t, const ClassifierWeights& w);

Var<double> instance_norm(Tape<double>& t, Var<double> x, double eps = 1e-5);

// Body output as a flat feature vector. `params` in classifier_leaves order;
// `proto` supplies shapes/config.
Var<double> classifier_features(Tape<double>& t, Var<double> img, const ClassifierWeights& proto,
                                const VarVec& params);
Var<double> classifier_logits(Tape<double>& t, Var<double> img, const ClassifierWeights& proto,
                              const VarVec& params);

// Stable log-sum-exp cross-entropy (max detached as a constant shift).
Var<double> cross_entropy(Tape<double>& t, Var<double> logits, int label);

Var<double> batch_ce(Tape<double>& t, const std::vector<Var<double>>& images,
                     const std::vector<int>& labels, const ClassifierWeights& proto,
                     const VarVec& params);

// ------------------------------------------------------------ inner loop ----

// Plain SGD unroll; returns T+1 parameter snapshots (theta0 first). Each step
// differentiates batch cross-entropy on the tape, so the result is itself
// differentiable into `images` (used by trajectory matching).
std::vector<VarVec> inner_unroll(Tape<double>& t, const std::vector<Var<double>>& images,
                                 const std::vector<int>& labels, const ClassifierWeights& proto,
                                 VarVec theta0, int steps, double lr);

// --------------------------------------------------------- expert + eval ----

struct ExpertTrajectory {
  ClassifierWeights proto;                     // shapes + final weights
  std::vector<std::vector<double>> snapshots;  // theta^(0..T), flattened
};

// Numeric SGD on a labeled set, balanced per-class minibatches; snapshots
// retained every step when requested (slot 0 is the init).
std::vector<std::vector<double>> sgd_train(ClassifierWeights& w, const LabeledImageSet& set,
                                           int steps, double lr, int batch_per_class, Rng& rng,
                                           bool keep_snapshots = false);

ExpertTrajectory generate_expert(const LabeledImageSet& set, const ClassifierConfig& cfg, int K,
                                 int steps, double lr, int batch_per_class, uint64_t seed);

double accuracy(const ClassifierWeights& w, const LabeledImageSet& set);

// ----------------------------------------------------------------- losses ----

// Sum over trace checkpoints of ||grad_theta ce(D) - grad_theta ce(S)||^2.
// The D-side gradients are detached; the S-side stays differentiable.
Var<double> loss_gm(Tape<double>& t, const ClassifierWeights& proto,
                    const std::vector<std::vector<double>>& theta_trace,
                    const std::vector<Tensor<double>>& d_images, const std::vector<int>& d_labels,
                    const std::vector<Var<double>>& s_images, const std::vector<int>& s_labels);

// ||theta_student(t+t1) - theta_expert(t+t2)||^2 / ||theta_expert(t+t2) -
// theta_expert(t)||^2, student unrolled on S from expert[t].
Var<double> loss_tm(Tape<double>& t, const ExpertTrajectory& expert, int t0, int t1, int t2,
                    double lr, const std::vector<Var<double>>& s_images,
                    const std::vector<int>& s_labels);

// Squared L2 between class-conditional feature means under a shared random
// extractor, summed over classes.
Var<double> loss_dm(Tape<double>& t, const ClassifierWeights& extractor,
                    const std::vector<Tensor<double>>& d_images, const std::vector<int>& d_labels,
                    const std::vector<Var<double>>& s_images, const std::vector<int>& s_labels,
                    int K);

// ------------------------------------------------------------- schedules ----

// Two-stage coefficient: lambda_hi while step < total/2, lambda_lo after.
double lambda_schedule(long step, long total, double lambda_hi, double lambda_lo);

// ------------------------------------------------------------ run config ----

struct RunConfig {
  // dataset
  std::string dataset = "toy";  // "toy" or a PNG directory
  int K = 4, per_class = 50, H = 16, W = 16;
  // synthetic parameterization
  int spc = 2, L = 3;
  EntropyNetConfig ent{8, 16, 2};
  std::string decoder = "custom";
  int dec_d1 = 24, dec_d2 = 0;
  // objective
  std::string loss = "dm";  // gm | tm | dm
  double beta = 1e6;
  double lambda_hi = 1.0, lambda_lo = 1.0;
  long phase1_steps = 400, phase2_steps = 150;
  double mse_budget = 5e-5;
  double init_lr = 0.01, joint_lr = 1e-3;
  // classifier and loss internals
  ClassifierConfig clf;
  int batch_per_class = 8;
  int gm_inner_steps = 0;
  double inner_lr = 0.05;
  int tm_expert_steps = 24, tm_t1 = 2, tm_t2 = 4;
  double tm_lr = 0.05;
  // evaluation
  int eval_steps = 200;
  double eval_lr = 0.05;
  int eval_batch_per_class = 8;
  int trials = 5;
  uint64_t seed = 0;
  std::string out_dir = "out";

  DecoderConfig decoder_config() const {
    return decoder == "custom" ? DecoderConfig::custom(L, dec_d1, dec_d2)
                               : DecoderConfig::preset(decoder, L);
  }
};

// --------------------------------------------------------- distill state ----

struct DistillState {
  int K = 0, H = 0, W = 0, L = 1, spc = 1;
  EntropyNetConfig ent_cfg;
  DecoderConfig dec_cfg;
  std::vector<LatentPyramid> Z;  // N = K*spc, class-major order
  std::vector<int> Y;
  std::vector<EntropyNetWeights> ent;  // one slice per class
  std::vector<DecoderWeights> dec;
  std::vector<AdamState<double>> adam_z, adam_e, adam_d;
  int phase = 0;
  uint64_t seed = 0;

  int slice_of(size_t sample) const { return int(sample) / spc; }
};

struct MetricsRow {
  long step = 0;
  double rate_bits = 0, utility = 0, lambda = 0;
};

struct StepResult {
  double rate_bits = 0, utility = 0;
};

DistillState init_state(const RunConfig& cfg);

// Phase 1: per-slice fit of rate + beta * ||g(z) - x||^2 against targets
// drawn from D (one original per synthetic sample, same class).
void run_phase1(DistillState& st, const RunConfig& cfg, const LabeledImageSet& D,
                std::vector<MetricsRow>* metrics = nullptr);

// One Phase-2 Adam step on {Z, Phi, Psi} through the relaxed graph.
StepResult joint_step(DistillState& st, const RunConfig& cfg, const LabeledImageSet& D,
                      const std::string& loss_kind, double lambda, long step,
                      const ExpertTrajectory* expert);

// Phase 3: quantize everything and serialize.
CodedDataset post_quantize(const DistillState& st, const RunConfig& cfg);

struct DistillResult {
  DatasetBitstream stream;
  CodedDataset coded;
  DistillState state;
  std::vector<MetricsRow> metrics;
};

DistillResult run_algorithm1(const RunConfig& cfg, const LabeledImageSet& D);

// Decoded synthetic images of a coded dataset, one slice per class.
LabeledImageSet decoded_set(const CodedDataset& ds);

struct EvalResult {
  double mean = 0, stddev = 0;
  std::vector<double> per_trial;
};

EvalResult evaluate(const CodedDataset& ds, const LabeledImageSet& test,
                    const ClassifierConfig& cfg, int trials, int steps, double lr,
                    int batch_per_class, uint64_t seed);

void write_metrics_csv(const std::string& path, const std::vector<MetricsRow>& rows);

}  // namespace rudd
