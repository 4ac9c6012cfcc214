#include "simul/monotonic.hpp"

#include <cmath>
#include <stdexcept>

#include <json.hpp>

namespace simul {

namespace {

int head_dim(const MonotonicAttention& att) { return att.wq.cols() / att.heads; }

// 1 x n constant row of ones (untracked).
Tensor ones_row(int n) { return Tensor::full(1, n, 1.0); }

// Broadcasts the head's 1x1 learned bias across a 1 x cols row while keeping
// it in the graph.
Tensor bias_row(const MonotonicAttention& att, int head, int cols) {
  return matmul(slice_cols(att.bias, head, 1), ones_row(cols));
}

// Expected alignment of the exclusive-restart process for one head: the
// recurrence applied row by row (see expected_alignment_row).
Tensor alpha_head(const Tensor& p) {
  const int I = p.rows(), J = p.cols();
  Tensor sigma = initial_start(J);
  std::vector<Tensor> rows;
  rows.reserve(static_cast<size_t>(I));
  for (int i = 0; i < I; ++i) {
    rows.push_back(expected_alignment_row(row(p, i), sigma));
    if (i + 1 < I) sigma = advance_start(rows.back());
  }
  return stack_rows(rows);
}

}  // namespace

Tensor initial_start(int positions) {
  if (positions < 1) throw std::invalid_argument("initial_start: no positions");
  std::vector<double> s(static_cast<size_t>(positions), 0.0);
  s[0] = 1.0;  // the scan for the first output starts at position 1
  return Tensor::from_data(1, positions, std::move(s));
}

Tensor advance_start(const Tensor& alpha_row) {
  const int J = alpha_row.cols();
  if (J == 1) return Tensor::zeros(1, 1);
  std::vector<Tensor> parts{Tensor::zeros(1, 1), slice_cols(alpha_row, 0, J - 1)};
  return concat_cols(parts);
}

Tensor expected_alignment_row(const Tensor& p_row, const Tensor& start) {
  const int J = p_row.cols();
  if (start.cols() != J || p_row.rows() != 1 || start.rows() != 1)
    throw std::invalid_argument("expected_alignment_row: p is " + shape_str(p_row) +
                                ", start is " + shape_str(start));
  // alpha_j = p_j * sum_{k<=j} start_k * prod_{l=k}^{j-1} (1 - p_l). The
  // survival products are formed as exp(lecp_j - lecp_k) from the exclusive
  // cumulative sum of log(1-p): numerically exact even when p saturates,
  // which a divide-by-cumulative-product formulation is not.
  Tensor lt = [&] {  // lower-triangular (k <= j) mask over (j, k)
    std::vector<double> m(static_cast<size_t>(J) * J, 0.0);
    for (int j = 0; j < J; ++j)
      for (int k = 0; k <= j; ++k) m[static_cast<size_t>(j) * J + k] = 1.0;
    return Tensor::from_data(J, J, std::move(m));
  }();
  // Floor keeps log defined for raw p == 1; inert for clamped inputs.
  Tensor q = clamp_min(rsub(1.0, p_row), 1e-300);
  Tensor lecp = cumsum_rows(log_(q), /*exclusive=*/true);  // lecp_j = sum_{l<j} log q_l
  Tensor diff = sub(matmul(transpose(lecp), ones_row(J)), matmul(Tensor::full(J, 1, 1.0), lecp));
  // diff <= 0 wherever k <= j; the clamp only squashes masked-out entries
  // (and pins the exact-0 diagonal), so no overflow and no spurious grads.
  Tensor survive = mul(exp_(clamp(diff, -745.0, 0.0)), lt);
  Tensor reach = transpose(matmul(survive, transpose(start)));
  return mul(p_row, reach);
}

MonotonicAttention monotonic_attention_init(int embed_dim, int heads, double bias_init,
                                            std::mt19937_64& rng) {
  if (heads < 1 || embed_dim % heads != 0)
    throw std::invalid_argument("monotonic_attention_init: embed_dim " +
                                std::to_string(embed_dim) + " not divisible by " +
                                std::to_string(heads) + " heads");
  MonotonicAttention att;
  const double stddev = 1.0 / std::sqrt(static_cast<double>(embed_dim));
  att.wq = Tensor::randn(embed_dim, embed_dim, rng, stddev);
  att.wk = Tensor::randn(embed_dim, embed_dim, rng, stddev);
  att.wv = Tensor::randn(embed_dim, embed_dim, rng, stddev);
  att.wo = Tensor::randn(embed_dim, embed_dim, rng, stddev);
  att.bias = Tensor::full(1, heads, bias_init);
  att.heads = heads;
  return att;
}

Tensor monotonic_energy(const MonotonicAttention& att, const Tensor& s_prev, const Tensor& enc,
                        int head) {
  if (head < 0 || head >= att.heads)
    throw std::invalid_argument("monotonic_energy: head " + std::to_string(head) + " of " +
                                std::to_string(att.heads));
  const int dk = head_dim(att);
  Tensor q = slice_cols(matmul(s_prev, att.wq), head * dk, dk);   // 1 x dk
  Tensor k = slice_cols(matmul(enc, att.wk), head * dk, dk);      // K x dk
  Tensor e = mul(matmul(q, transpose(k)), 1.0 / std::sqrt(static_cast<double>(dk)));
  return add(e, bias_row(att, head, enc.rows()));
}

EnergyMatrix monotonic_energies(const MonotonicAttention& att, const Tensor& dec_states,
                                const Tensor& enc) {
  const int dk = head_dim(att);
  Tensor q = matmul(dec_states, att.wq);
  Tensor k = matmul(enc, att.wk);
  EnergyMatrix em;
  em.head_e.reserve(static_cast<size_t>(att.heads));
  for (int h = 0; h < att.heads; ++h) {
    Tensor qh = slice_cols(q, h * dk, dk);
    Tensor kh = slice_cols(k, h * dk, dk);
    Tensor e = mul(matmul(qh, transpose(kh)), 1.0 / std::sqrt(static_cast<double>(dk)));
    em.head_e.push_back(add_rowvec(e, bias_row(att, h, enc.rows())));
  }
  return em;
}

Tensor selection_prob(const Tensor& e, bool clamp_training) {
  Tensor p = sigmoid(e);
  if (clamp_training) p = clamp(p, kSelectionProbEps, 1.0 - kSelectionProbEps);
  return p;
}

AlignmentMatrix expected_alignment(std::span<const Tensor> head_p) {
  if (head_p.empty()) throw std::invalid_argument("expected_alignment: no heads");
  AlignmentMatrix am;
  am.head_alpha.reserve(head_p.size());
  for (const Tensor& p : head_p) am.head_alpha.push_back(alpha_head(p));
  return am;
}

Tensor alignment_residual(const Tensor& alpha) {
  return rsub(1.0, sum_axis(alpha, 1));
}

Tensor monotonic_context(const MonotonicAttention& att, const AlignmentMatrix& alignment,
                         const Tensor& enc) {
  if (alignment.heads() != att.heads)
    throw std::invalid_argument("monotonic_context: alignment has " +
                                std::to_string(alignment.heads()) + " heads, layer has " +
                                std::to_string(att.heads));
  const int dk = head_dim(att);
  Tensor v = matmul(enc, att.wv);
  std::vector<Tensor> mixed;
  mixed.reserve(static_cast<size_t>(att.heads));
  for (int h = 0; h < att.heads; ++h) {
    Tensor vh = slice_cols(v, h * dk, dk);
    mixed.push_back(matmul(alignment.head_alpha[static_cast<size_t>(h)], vh));
  }
  return matmul(concat_cols(mixed), att.wo);
}

Decision infer_decide(double p, const PolicyConfig& cfg) {
  return p >= cfg.decision_threshold ? Decision::Write : Decision::Read;
}

std::string DecisionTrace::to_json() const {
  nlohmann::json j;
  j["events"] = nlohmann::json::array();
  for (const TraceEvent& ev : events)
    j["events"].push_back({{"type", ev.type == Decision::Read ? "read" : "write"},
                           {"arg", ev.arg}});
  j["delays"] = delays;
  j["output"] = output;
  return j.dump();
}

}  // namespace simul
