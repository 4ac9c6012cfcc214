#include "simul/latency.hpp"

#include <algorithm>
#include <stdexcept>

#include <json.hpp>

#include "simul/util.hpp"

namespace simul {

namespace {

void validate(const DelayVector& dv, const char* op) {
  if (dv.d.empty()) throw std::invalid_argument(std::string(op) + ": empty output sequence");
  if (dv.src_len <= 0.0)
    throw std::invalid_argument(std::string(op) + ": non-positive source length");
}

}  // namespace

double average_lagging(const DelayVector& dv) {
  validate(dv, "average_lagging");
  const int n = dv.tgt_len();
  const double gamma = n / dv.src_len;
  int tau = n;
  for (int i = 0; i < n; ++i) {
    if (dv.d[static_cast<size_t>(i)] >= dv.src_len) {
      tau = i + 1;
      break;
    }
  }
  double acc = 0.0;
  for (int i = 0; i < tau; ++i) acc += dv.d[static_cast<size_t>(i)] - i / gamma;
  return acc / tau;
}

double dal_metric(const DelayVector& dv) {
  validate(dv, "dal_metric");
  const int n = dv.tgt_len();
  const double gp = dv.src_len / n;
  double acc = 0.0;
  double prev = 0.0;
  for (int i = 0; i < n; ++i) {
    const double corrected = i == 0 ? dv.d[0] : std::max(dv.d[static_cast<size_t>(i)], prev + gp);
    acc += corrected - i * gp;
    prev = corrected;
  }
  return acc / n;
}

Tensor dal_loss_head(const Tensor& alpha, int src_len, int tgt_len) {
  if (alpha.rows() != tgt_len || alpha.cols() != src_len)
    throw std::invalid_argument("dal_loss_head: alpha is " + shape_str(alpha) +
                                ", expected " + std::to_string(tgt_len) + "x" +
                                std::to_string(src_len));
  const int J = src_len, I = tgt_len;
  const double gp = static_cast<double>(J) / I;
  // Expected source position consumed per step, with residual mass at J.
  Tensor jcol = [&] {
    std::vector<double> v(static_cast<size_t>(J));
    for (int j = 0; j < J; ++j) v[static_cast<size_t>(j)] = j + 1.0;
    return Tensor::from_data(J, 1, std::move(v));
  }();
  Tensor d = add(matmul(alpha, jcol), mul(alignment_residual(alpha), static_cast<double>(J)));
  std::vector<Tensor> terms;
  terms.reserve(static_cast<size_t>(I));
  Tensor prev;
  for (int i = 0; i < I; ++i) {
    Tensor di = slice_rows(d, i, 1);
    Tensor corrected = i == 0 ? di : maximum(di, add(prev, gp));
    terms.push_back(add(corrected, -(i * gp)));
    prev = corrected;
  }
  // Divide (rather than multiply by a reciprocal) so a hard alignment
  // reproduces dal_metric bit for bit.
  return div(sum(stack_rows(terms)), Tensor::scalar(static_cast<double>(I)));
}

Tensor dal_loss(const AlignmentMatrix& alignment, int src_len, int tgt_len) {
  if (alignment.head_alpha.empty()) throw std::invalid_argument("dal_loss: no heads");
  Tensor total = dal_loss_head(alignment.head_alpha[0], src_len, tgt_len);
  for (size_t h = 1; h < alignment.head_alpha.size(); ++h)
    total = add(total, dal_loss_head(alignment.head_alpha[h], src_len, tgt_len));
  return mul(total, 1.0 / static_cast<double>(alignment.heads()));
}

std::string latency_csv_header() { return "al,dal,quality,step_frames,model"; }

std::string latency_csv_row(const LatencyReport& r) {
  return number_str(r.al) + "," + number_str(r.dal) + "," + number_str(r.quality) + "," +
         std::to_string(r.step_frames) + "," + r.model;
}

std::string latency_json(const LatencyReport& r) {
  nlohmann::json j{{"al", r.al},
                   {"dal", r.dal},
                   {"quality", r.quality},
                   {"step_frames", r.step_frames},
                   {"model", r.model}};
  return j.dump();
}

}  // namespace simul
