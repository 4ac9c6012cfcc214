#pragma once

// Latency measurement and the differentiable latency training loss.
//
// Average Lagging (AL) and Differentiable Average Lagging (DAL) are computed
// over delay vectors: d_i = source units consumed before target token i was
// emitted. At inference the units are raw frames (integers); during training
// they are expected encoder positions (fractional). Reports never mix units.

#include <string>
#include <vector>

#include "simul/monotonic.hpp"
#include "simul/tensor.hpp"

namespace simul {

struct DelayVector {
  std::vector<double> d;  // per target index, source units consumed
  double src_len = 0.0;   // |x| in the same units
  int tgt_len() const { return static_cast<int>(d.size()); }
};

/// AL with gamma = |y|/|x| and cutoff tau = first i with d_i >= |x| (tau =
/// |y| when no delay reaches the full source):
///   AL = (1/tau) * sum_{i<=tau} (d_i - (i-1)/gamma).
double average_lagging(const DelayVector& dv);

/// DAL with gamma' = |x|/|y| and the minimum-spacing correction
///   d'_1 = d_1,  d'_i = max(d_i, d'_{i-1} + gamma'),
///   DAL = (1/|y|) * sum_i (d'_i - (i-1)*gamma').
double dal_metric(const DelayVector& dv);

/// DAL as a differentiable loss over one head's expected delays
///   d_i = sum_j j*alpha_{i,j} + J*r_i
/// (residual mass counts as attending position J, so a never-writing head
/// registers maximal latency), with the max taken exactly. On a hard 0/1
/// alpha this equals dal_metric on the induced integer delays bitwise.
Tensor dal_loss_head(const Tensor& alpha, int src_len, int tgt_len);

/// Mean of dal_loss_head over the alignment's heads.
Tensor dal_loss(const AlignmentMatrix& alignment, int src_len, int tgt_len);

/// One row of a latency-quality report.
struct LatencyReport {
  double al = 0.0;
  double dal = 0.0;
  double quality = 0.0;  // BLEU or token accuracy, stated by the producer
  int step_frames = 0;
  std::string model;
};

std::string latency_csv_header();  // "al,dal,quality,step_frames,model"
std::string latency_csv_row(const LatencyReport& r);
std::string latency_json(const LatencyReport& r);

}  // namespace simul
