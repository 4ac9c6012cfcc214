#include "simul/regularizers.hpp"

#include <stdexcept>
#include <string>

namespace simul {

namespace {

// One pair's reconstruction gap: rebuild the (already detached) target
// columns from the source columns and compare against the target's
// self-reconstruction, scaled by the target width.
Tensor reconstruction_gap(const Tensor& source, const Tensor& target_detached) {
  Tensor cross = cosine_similarity(source, target_detached);
  Tensor rebuilt = reconstruct(source, cross);
  Tensor self_sim = cosine_similarity(target_detached, target_detached);
  Tensor self_rebuilt = reconstruct(target_detached, self_sim);
  Tensor gap = l2_norm(sub(rebuilt, self_rebuilt));
  return div(gap, Tensor::scalar(static_cast<double>(target_detached.cols())));
}

}  // namespace

AttentionStack build_attention_stack(const EnergyMatrix& e, int valid_len) {
  if (e.heads() < 1) throw std::invalid_argument("build_attention_stack: no heads");
  const int rows = e.head_e[0].rows();
  const int positions = e.head_e[0].cols();
  if (valid_len < 1 || valid_len > positions)
    throw std::invalid_argument("build_attention_stack: valid_len " + std::to_string(valid_len) +
                                " outside [1, " + std::to_string(positions) + "]");
  std::vector<Tensor> parts;
  parts.reserve(e.head_e.size());
  for (const Tensor& he : e.head_e) {
    if (he.rows() != rows || he.cols() != positions)
      throw std::invalid_argument("build_attention_stack: ragged head shapes");
    parts.push_back(slice_cols(he, 0, valid_len));
  }
  return {interleave_cols(parts), valid_len, e.heads()};
}

Tensor cosine_similarity(const Tensor& a, const Tensor& b) {
  if (a.rows() != b.rows())
    throw std::invalid_argument("cosine_similarity: column length mismatch, " + shape_str(a) +
                                " vs " + shape_str(b));
  Tensor na = clamp_min(sqrt_(sum_axis(mul(a, a), /*axis=*/0)), kCosineNormFloor);
  Tensor nb = clamp_min(sqrt_(sum_axis(mul(b, b), /*axis=*/0)), kCosineNormFloor);
  return div(matmul(transpose(a), b), matmul(transpose(na), nb));
}

Tensor reconstruct(const Tensor& source, const Tensor& similarity) {
  if (source.cols() != similarity.rows())
    throw std::invalid_argument("reconstruct: " + std::to_string(source.cols()) +
                                " source columns vs similarity of " + shape_str(similarity));
  return matmul(source, softmax(similarity, /*axis=*/0));
}

Tensor dar_loss(const std::vector<EnergyMatrix>& speech_energies,
                const std::vector<EnergyMatrix>& text_energies) {
  if (speech_energies.empty())
    throw std::invalid_argument("dar_loss: no decoder layers");
  if (speech_energies.size() != text_energies.size())
    throw std::invalid_argument("dar_loss: layer counts differ, " +
                                std::to_string(speech_energies.size()) + " vs " +
                                std::to_string(text_energies.size()));
  Tensor total;
  for (size_t m = 0; m < speech_energies.size(); ++m) {
    const EnergyMatrix& es = speech_energies[m];
    const EnergyMatrix& et = text_energies[m];
    if (es.heads() < 1 || et.heads() < 1)
      throw std::invalid_argument("dar_loss: layer without heads");
    if (es.head_e[0].rows() != et.head_e[0].rows())
      throw std::invalid_argument("dar_loss: decoder lengths differ, " +
                                  std::to_string(es.head_e[0].rows()) + " vs " +
                                  std::to_string(et.head_e[0].rows()));
    AttentionStack source = build_attention_stack(es, es.head_e[0].cols());
    AttentionStack target = build_attention_stack(et, et.head_e[0].cols());
    Tensor term = reconstruction_gap(source.a, detach(target.a));
    total = m == 0 ? term : add(total, term);
  }
  return div(total, Tensor::scalar(static_cast<double>(speech_energies.size())));
}

Tensor car_loss(const EncoderOutput& speech_states, const EncoderOutput& text_states) {
  if (speech_states.h.cols() != text_states.h.cols())
    throw std::invalid_argument("car_loss: state widths differ, " + shape_str(speech_states.h) +
                                " vs " + shape_str(text_states.h));
  return reconstruction_gap(transpose(speech_states.h), detach(transpose(text_states.h)));
}

Tensor kd_loss(const Tensor& student_logits, const Tensor& teacher_logits) {
  if (student_logits.rows() != teacher_logits.rows() ||
      student_logits.cols() != teacher_logits.cols())
    throw std::invalid_argument("kd_loss: logit shapes differ, " + shape_str(student_logits) +
                                " vs " + shape_str(teacher_logits));
  Tensor teacher = softmax(detach(teacher_logits), /*axis=*/1);
  Tensor pointwise = mul(teacher, neg(log_softmax(student_logits, /*axis=*/1)));
  return div(sum(pointwise), Tensor::scalar(static_cast<double>(student_logits.rows())));
}

}  // namespace simul
