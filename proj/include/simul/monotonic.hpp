#pragma once

// Monotonic multihead attention: energies, selection probabilities, the
// closed-form expected alignment used during training, and the deterministic
// read/write decision procedure used at inference.
//
// The underlying hard process, per head: a virtual t_0 = 0; to emit output i
// the head scans encoder positions j = t_{i-1}+1, t_{i-1}+2, ... and writes at
// the first j whose selection probability fires (threshold at inference,
// Bernoulli draw when sampling is enabled). Scanning past the last position
// means the head never writes again; that probability mass is the residual.
// expected_alignment computes the exact per-position write probabilities of
// this process.

#include <random>
#include <string>
#include <vector>

#include "simul/tensor.hpp"

namespace simul {

/// Per-head energies e[h] with shape I x J (decoder step x encoder position).
/// Positions beyond a source's valid length are never materialized — callers
/// slice encoder states to the valid range instead of masking.
struct EnergyMatrix {
  std::vector<Tensor> head_e;
  int heads() const { return static_cast<int>(head_e.size()); }
};

/// Per-head expected alignment alpha[h], I x J. Row sums may fall short of 1;
/// the shortfall (residual mass) is the probability the head never writes.
struct AlignmentMatrix {
  std::vector<Tensor> head_alpha;
  int heads() const { return static_cast<int>(head_alpha.size()); }
};

enum class Decision { Read, Write };

struct TraceEvent {
  Decision type;
  int arg;  // Read: raw frames consumed; Write: emitted token id
};

/// Full record of one streaming decode.
struct DecisionTrace {
  std::vector<TraceEvent> events;
  std::vector<int> delays;             // per token: raw frames consumed before emission
  std::vector<int> output;             // emitted token ids
  // Per written token, each head's write position t_i, flattened layer-major
  // (layer l, head h at index l * heads + h).
  std::vector<std::vector<int>> head_positions;
  std::string to_json() const;
};

struct PolicyConfig {
  double decision_threshold = 0.5;
  int step_frames = 4;      // raw frames consumed per READ
  int max_source = 4096;    // cap on raw frames read
  int max_target = 64;      // cap on emitted tokens (guarantees termination)
  double energy_init_bias = -1.0;
  bool sample = false;      // Bernoulli decisions instead of thresholding
  std::uint64_t sample_seed = 0;
  // Re-encode the full received prefix on every read instead of extending
  // encoder caches incrementally. Both paths produce identical outputs with
  // the causal encoder; this exists so the equivalence is checkable.
  bool reencode_prefix = false;
};

/// Learned parameters of the monotonic attention layer: shared projections,
/// a per-head additive energy bias, and the output mix.
struct MonotonicAttention {
  Tensor wq, wk, wv, wo;  // embed_dim x embed_dim
  Tensor bias;            // 1 x heads, initialized negative so early training reads
  int heads = 1;
};

MonotonicAttention monotonic_attention_init(int embed_dim, int heads, double bias_init,
                                            std::mt19937_64& rng);

/// Energy row for one head and one decoder state (1 x D) against encoder
/// states (K x D): scaled dot product of the head's query/key slices plus the
/// head's bias. Row i of monotonic_energies equals this bitwise.
Tensor monotonic_energy(const MonotonicAttention& att, const Tensor& s_prev, const Tensor& enc,
                        int head);

/// All heads, all decoder steps at once (training path).
EnergyMatrix monotonic_energies(const MonotonicAttention& att, const Tensor& dec_states,
                                const Tensor& enc);

/// Elementwise sigmoid of the energies; when `clamp_training` is set the
/// result is clamped to [1e-6, 1-1e-6] so the alignment recurrence's
/// cumulative products stay away from 0 and 1.
Tensor selection_prob(const Tensor& e, bool clamp_training = true);

/// Probability floor/ceiling applied by selection_prob in training mode.
inline constexpr double kSelectionProbEps = 1e-6;

/// Closed-form expected alignment of the exclusive-restart monotonic process
/// for each head's p (I x J). Survival products are formed in log space as
/// clamped exponentials of cumulative-sum differences, which stays exact even
/// where p saturates. Differentiable w.r.t. p.
AlignmentMatrix expected_alignment(std::span<const Tensor> head_p);

/// Row-wise pieces of the same recurrence, for incremental decoding: the
/// scan-start distribution for the first output (onehot at position 1), one
/// row of alignment given the current start, and the next start (the row
/// shifted right; mass at the last position becomes residual). Feeding rows
/// through these reproduces expected_alignment bitwise.
Tensor initial_start(int positions);
Tensor expected_alignment_row(const Tensor& p_row, const Tensor& start);
Tensor advance_start(const Tensor& alpha_row);

/// Residual (never-write) mass per decoder step: 1 - row sums, I x 1.
Tensor alignment_residual(const Tensor& alpha);

/// Expected context: per head, alpha-weighted sum of the head's value slice;
/// heads concatenated and linearly mixed. I x embed_dim.
Tensor monotonic_context(const MonotonicAttention& att, const AlignmentMatrix& alignment,
                         const Tensor& enc);

/// Threshold rule for a single (head, step, position) probability.
Decision infer_decide(double p, const PolicyConfig& cfg);

class Model;  // seq-model

/// Runs the streaming read/write protocol over a raw source feature stream
/// (T_raw x feat_dim) and returns the full trace. A token is emitted once
/// every head of every decoder layer has committed a write; source
/// exhaustion forces pending heads to write at the final position.
DecisionTrace simulate_decode(const Model& model, const Tensor& source_frames,
                              const PolicyConfig& cfg);

}  // namespace simul
