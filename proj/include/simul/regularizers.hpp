#pragma once

// Cross-branch losses that tie the frame ("speech") branch to the token
// ("text") branch: reconstruction of the text branch's monotonic attention
// from the speech branch's, the same construction over encoder states, and
// token-level distillation. The text side is always the target — its tensors
// enter detached, so gradients reach only the frame branch.

#include <vector>

#include "simul/model.hpp"
#include "simul/monotonic.hpp"
#include "simul/tensor.hpp"

namespace simul {

/// Per-head monotonic energies rearranged so each column traces one
/// (encoder position, head) pair across all decoder steps.
struct AttentionStack {
  Tensor a;            // I x (source_len * heads)
  int source_len = 0;  // encoder positions kept
  int heads = 0;
};

/// Norm floor for column cosines; an all-zero column maps to similarity 0.
inline constexpr double kCosineNormFloor = 1e-8;

/// Builds the stack from one decoder layer's raw (pre-sigmoid) energies,
/// keeping the first valid_len encoder positions. Column (n, h) lands at
/// index n * heads + h, i.e. a[i, n*heads + h] == e[h][i, n]. Throws
/// std::invalid_argument when valid_len is outside [1, positions].
AttentionStack build_attention_stack(const EnergyMatrix& e, int valid_len);

/// Cosine similarity between every column of `a` and every column of `b`
/// (row counts must agree): a_cols x b_cols, entries in [-1, 1].
Tensor cosine_similarity(const Tensor& a, const Tensor& b);

/// Rebuilds target columns as convex combinations of source columns: the
/// similarity matrix (source_cols x target_cols) is softmax-normalized down
/// each target column and applied to `source`.
Tensor reconstruct(const Tensor& source, const Tensor& similarity);

/// Decision-attentive regularizer: per decoder layer, rebuild the text
/// branch's attention stack from the speech branch's and penalize the
/// Frobenius gap to the text stack's self-reconstruction, scaled by the text
/// stack's width; layers are averaged. The text stack is detached, so the
/// gradient reaches speech-branch parameters only.
Tensor dar_loss(const std::vector<EnergyMatrix>& speech_energies,
                const std::vector<EnergyMatrix>& text_energies);

/// The same reconstruction penalty over encoder states, with positions as
/// columns (states transposed) and a single implicit head; scaled by the
/// text length. Text states are detached.
Tensor car_loss(const EncoderOutput& speech_states, const EncoderOutput& text_states);

/// Token-level distillation: mean over positions of the cross entropy
/// between the teacher's softmax (detached) and the student's
/// log-probabilities. No label smoothing on either side.
Tensor kd_loss(const Tensor& student_logits, const Tensor& teacher_logits);

}  // namespace simul
