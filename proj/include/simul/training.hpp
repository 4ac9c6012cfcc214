#pragma once

// Joint optimization of the two branches: synthetic paired data, the
// six-term weighted loss, Adam with inverse-sqrt warmup and gradient
// clipping, the two-phase schedule (latency loss off, then on), and
// quality evaluation (corpus BLEU + token accuracy) under streamed greedy
// decoding.

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "simul/model.hpp"
#include "simul/monotonic.hpp"
#include "simul/tensor.hpp"

namespace simul {

// ---- synthetic paired data ----

/// Content token ids live in [0, vocab); as model inputs they are shifted by
/// kContentOffset to make room for BOS/EOS.
inline constexpr int kContentOffset = 2;

struct SyntheticTaskSpec {
  int src_vocab = 32;
  int tgt_vocab = 32;
  int min_len = 4;
  int max_len = 16;
  int feat_dim = 8;
  int min_reps = 2;          // frames emitted per source token (uniform draw);
  int max_reps = 4;          // raise these for speech-like source/target ratios
  double noise_sigma = 0.1;  // per-frame Gaussian noise on the base vectors
  std::uint64_t seed = 1;

  void validate() const;
};

struct PairedExample {
  Tensor frames;               // synthetic "speech", frames x feat_dim
  std::vector<int> transcript; // source token ids (content + offset)
  std::vector<int> target;     // target token ids (content + offset)
};

/// The fixed 1:1 lexical map on content tokens (a unit-stride-free affine
/// bijection mod vocab).
int lexical_map(int content, int vocab);

/// Reproducible synthetic dataset: transcripts are unique across the whole
/// list, so any slicing into train/dev/test is disjoint by construction.
/// The target is the transcript with adjacent pairs swapped, then mapped
/// token-wise; an odd trailing token is mapped in place. Frames repeat each
/// token's base vector 2-4 times plus noise.
std::vector<PairedExample> generate_dataset(const SyntheticTaskSpec& spec, int n);

// ---- the joint loss ----

struct LossWeights {
  double alpha = 0.2;    // distillation
  double beta = 0.02;    // encoder-state reconstruction
  double gamma = 0.5;    // text-branch cross entropy
  double delta = 0.01;   // attention reconstruction
  double lambda = 0.0;   // differentiable latency

  void validate() const;
};

/// "baseline", "multitask", "kd", "car", "dar": the cumulative ablation
/// ladder, each adding one term's weight on top of the previous preset.
/// lambda stays 0 in every preset. Throws std::invalid_argument for other
/// names.
LossWeights ablation_weights(const std::string& preset);

/// Raw (unweighted) values of each term plus the weighted total.
struct LossBreakdown {
  double st_nll = 0.0;
  double kd = 0.0;
  double car = 0.0;
  double mt_nll = 0.0;
  double dar = 0.0;
  double dal = 0.0;
  double total = 0.0;
};

/// (1-alpha)*st + alpha*kd + beta*car + gamma*mt + delta*dar + lambda*dal,
/// combined in that fixed order.
Tensor weighted_total(const Tensor& st_nll, const Tensor& kd, const Tensor& car,
                      const Tensor& mt_nll, const Tensor& dar, const Tensor& dal,
                      const LossWeights& w);

/// Both branches teacher-forced on the example's target, all six terms
/// computed and combined. A non-finite term throws std::runtime_error naming
/// it. The latency term is the per-layer expected-delay loss averaged over
/// decoder layers.
Tensor joint_loss(const Model& m, const PairedExample& ex, const LossWeights& w,
                  LossBreakdown* breakdown = nullptr, bool training = false,
                  std::mt19937_64* drop_rng = nullptr);

// ---- optimization ----

struct TrainConfig {
  double lr = 5e-4;          // peak rate; linear warmup then inverse-sqrt decay
  int warmup_steps = 400;
  double clip_norm = 10.0;
  double adam_beta1 = 0.9;
  double adam_beta2 = 0.999;
  double adam_eps = 1e-8;
  int batch_tokens = 64;     // target-token budget per update
  int phase1_steps = 3000;   // latency weight forced to zero
  int phase2_steps = 1000;   // full weights, from the phase-1 checkpoint
  int eval_every = 250;
  int train_examples = 2000;
  int dev_examples = 200;
  int dev_eval_examples = 32;  // dev subset scored at each evaluation
  std::uint64_t seed = 1;
  std::string out_dir = "runs/default";

  void validate() const;
};

/// Adam over a fixed parameter list, with global-norm clipping and the
/// warmup/inverse-sqrt schedule. Construction turns on gradient tracking for
/// every managed parameter; step() returns the pre-clip gradient norm.
class AdamOptimizer {
 public:
  AdamOptimizer(ParamList params, const TrainConfig& cfg);

  /// Applies one update from the accumulated leaf gradients; `step_index`
  /// is 1-based and drives the schedule.
  double step(long step_index);
  double learning_rate(long step_index) const;
  void zero_grads();

 private:
  ParamList params_;
  double lr_, clip_norm_, beta1_, beta2_, eps_;
  int warmup_;
  std::vector<std::vector<double>> m_, v_;
};

struct TrainResult {
  std::string phase1_checkpoint;
  std::string final_checkpoint;
  std::string log_path;
  bool diverged = false;
  double final_dev_nll = 0.0;
  double final_dev_accuracy = 0.0;
};

/// Two-phase training: phase 1 with the latency weight zeroed, then — when
/// w.lambda > 0 and phase2_steps > 0 — finetuning from the phase-1
/// checkpoint with the full weights. Writes phase1.json / final.json
/// checkpoints and a deterministic JSON-lines log (one record per
/// evaluation, with per-term losses, gradient norm, learning rate, and
/// seed) into cfg.out_dir. On divergence the last good checkpoint is kept
/// and `diverged` is set.
TrainResult train(const TrainConfig& cfg, const SyntheticTaskSpec& spec, const LossWeights& w);

/// Phase 2 only, starting from an existing checkpoint (shared across a
/// lambda sweep). Runs phase2_steps with the full weights.
TrainResult finetune(const TrainConfig& cfg, const SyntheticTaskSpec& spec, const LossWeights& w,
                     const std::string& start_checkpoint);

// ---- quality evaluation ----

/// Corpus BLEU on token-id sequences: up to 4-grams, uniform weights,
/// brevity penalty, no smoothing — any empty n-gram level gives 0. In
/// [0, 100].
double corpus_bleu(const std::vector<std::vector<int>>& references,
                   const std::vector<std::vector<int>>& hypotheses);

/// Position-wise matches against the reference, over total reference
/// tokens. In [0, 1].
double token_accuracy(const std::vector<std::vector<int>>& references,
                      const std::vector<std::vector<int>>& hypotheses);

struct QualityReport {
  double bleu = 0.0;
  double accuracy = 0.0;
};

/// Streams every test example through the hard read/write policy and scores
/// the emitted tokens against the references.
QualityReport evaluate_quality(const Model& m, std::span<const PairedExample> test_set,
                               const PolicyConfig& policy);

}  // namespace simul
