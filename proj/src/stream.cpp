#include <cmath>
#include <optional>
#include <stdexcept>

#include "simul/model.hpp"

namespace simul {

namespace {

// One conv output row: taps input rows 2c-2 .. 2c (zeros below row 0),
// mirroring causal_conv_fwd's op order so the rows agree bitwise.
Tensor conv_row(const CausalConv& conv, const std::vector<Tensor>& input_rows, int c, int width) {
  auto in_row = [&](int r) -> Tensor {
    if (r < 0) return Tensor::zeros(1, width);
    return input_rows[static_cast<size_t>(r)];
  };
  Tensor acc = matmul(in_row(2 * c - 2), conv.w0);
  acc = add(acc, matmul(in_row(2 * c - 1), conv.w1));
  acc = add(acc, matmul(in_row(2 * c), conv.w2));
  return relu(add_rowvec(acc, conv.b));
}

}  // namespace

StreamingEncoder::StreamingEncoder(const Model& m, bool reencode_prefix)
    : m_(&m), reencode_(reencode_prefix) {
  conv_rows_.resize(m.convs.size());
  const size_t layers = m.speech_layers.size() + m.shared_layers.size();
  enc_k_.resize(layers);
  enc_v_.resize(layers);
  enc_out_.resize(layers);
}

void StreamingEncoder::feed(const Tensor& new_frames) {
  if (new_frames.cols() != m_->cfg.feat_dim)
    throw std::invalid_argument("StreamingEncoder::feed: frames are " + shape_str(new_frames) +
                                ", expected feature width " + std::to_string(m_->cfg.feat_dim));
  raw_.insert(raw_.end(), new_frames.data().begin(), new_frames.data().end());
  t_raw_ += new_frames.rows();
  if (reencode_) {
    out_ = encode_speech(*m_, Tensor::from_data(t_raw_, m_->cfg.feat_dim,
                                                std::vector<double>(raw_)));
    return;
  }
  extend_incremental();
}

void StreamingEncoder::extend_incremental() {
  const int feat = m_->cfg.feat_dim;
  const int dim = m_->cfg.embed_dim;
  const int dk = dim / m_->cfg.heads;

  // Conv stages: each emits ceil(n_in / 2) rows; compute the newly computable
  // ones. Stage 0 reads raw frame rows.
  std::vector<Tensor> frame_rows;
  frame_rows.reserve(static_cast<size_t>(t_raw_));
  for (int r = 0; r < t_raw_; ++r)
    frame_rows.push_back(Tensor::from_data(
        1, feat,
        std::vector<double>(raw_.begin() + static_cast<size_t>(r) * feat,
                            raw_.begin() + static_cast<size_t>(r + 1) * feat)));
  int n_in = t_raw_;
  for (size_t s = 0; s < m_->convs.size(); ++s) {
    const std::vector<Tensor>& input_rows = s == 0 ? frame_rows : conv_rows_[s - 1];
    const int in_width = s == 0 ? feat : dim;
    const int n_out = (n_in + 1) / 2;
    for (int c = static_cast<int>(conv_rows_[s].size()); c < n_out; ++c)
      conv_rows_[s].push_back(conv_row(m_->convs[s], input_rows, c, in_width));
    n_in = n_out;
  }

  // Positions, then the encoder layers, one new row at a time (each row
  // attends only to itself and earlier rows).
  const std::vector<Tensor>& top_conv = conv_rows_.back();
  const int k_now = static_cast<int>(top_conv.size());
  for (int r = static_cast<int>(stage_rows_.size()); r < k_now; ++r)
    stage_rows_.push_back(add(top_conv[static_cast<size_t>(r)],
                              sinusoidal_positions(1, dim, r)));

  const size_t layers = enc_out_.size();
  for (int r = static_cast<int>(final_rows_.size()); r < k_now; ++r) {
    Tensor x = stage_rows_[static_cast<size_t>(r)];
    for (size_t l = 0; l < layers; ++l) {
      const EncoderLayer& layer = l < m_->speech_layers.size()
                                      ? m_->speech_layers[l]
                                      : m_->shared_layers[l - m_->speech_layers.size()];
      Tensor ln1x = layer_norm_fwd(layer.ln1, x);
      enc_k_[l].push_back(matmul(ln1x, layer.attn.wk));
      enc_v_[l].push_back(matmul(ln1x, layer.attn.wv));
      Tensor q = matmul(ln1x, layer.attn.wq);
      Tensor k = stack_rows(enc_k_[l]);
      Tensor v = stack_rows(enc_v_[l]);
      std::vector<Tensor> heads;
      heads.reserve(static_cast<size_t>(m_->cfg.heads));
      for (int h = 0; h < m_->cfg.heads; ++h) {
        Tensor scores =
            mul(matmul(slice_cols(q, h * dk, dk), transpose(slice_cols(k, h * dk, dk))),
                1.0 / std::sqrt(static_cast<double>(dk)));
        heads.push_back(matmul(softmax(scores, /*axis=*/1), slice_cols(v, h * dk, dk)));
      }
      x = add(x, matmul(concat_cols(heads), layer.attn.wo));
      x = add(x, feed_forward_fwd(layer.ffn, layer_norm_fwd(layer.ln2, x)));
      enc_out_[l].push_back(x);
    }
    final_rows_.push_back(layer_norm_fwd(m_->enc_ln, x));
  }
  out_.h = stack_rows(final_rows_);
  out_.valid_len = static_cast<int>(final_rows_.size());
}

DecisionTrace simulate_decode(const Model& model, const Tensor& source_frames,
                              const PolicyConfig& cfg) {
  if (source_frames.rows() < 1)
    throw std::invalid_argument("simulate_decode: empty source stream");
  if (cfg.step_frames < 1) throw std::invalid_argument("simulate_decode: step_frames must be >= 1");
  if (cfg.decision_threshold <= 0.0 || cfg.decision_threshold >= 1.0)
    throw std::invalid_argument("simulate_decode: threshold outside (0,1)");

  const int T = std::min(source_frames.rows(), cfg.max_source);
  const int M = static_cast<int>(model.dec_layers.size());
  const int H = model.cfg.heads;
  const int dk = model.cfg.embed_dim / H;
  int k_total = T;  // encoder positions once the whole source is read
  for (int s = 0; s < model.cfg.speech_conv_layers; ++s) k_total = (k_total + 1) / 2;
  const int cap = std::min(cfg.max_target, 2 * k_total);

  StreamingEncoder enc(model, cfg.reencode_prefix);
  std::mt19937_64 sample_rng(cfg.sample_seed);
  DecisionTrace trace;
  int frames_read = 0;

  // Decoder state: per-layer self-attention caches over completed rows, the
  // committed write position of each (layer, head) for the previous output,
  // and — within the current emission attempt — per-head commitments and
  // scan positions, which survive READ interruptions so each position is
  // examined (and, when sampling, drawn) exactly once.
  std::vector<std::vector<Tensor>> kc(static_cast<size_t>(M)), vc(static_cast<size_t>(M));
  std::vector<std::vector<int>> prev_t(static_cast<size_t>(M), std::vector<int>(H, 0));
  std::vector<std::vector<int>> att_t(static_cast<size_t>(M), std::vector<int>(H, -1));
  std::vector<std::vector<int>> att_j(static_cast<size_t>(M), std::vector<int>(H, 1));
  int fed = 0;
  Tensor cur_row = embed_positions(model.tgt_embed, {kBosId}, 0);

  // Walks the decoder stack for the current row. In scan mode it may suspend
  // (returns nothing) when a head needs more source than is encoded; with
  // commit_kv set (after success) it appends this row's k/v to the caches.
  auto walk = [&](bool commit_kv) -> std::optional<Tensor> {
    const Tensor& E = enc.output().h;
    const int k_avail = enc.frames_fed() == 0 ? 0 : E.rows();
    Tensor x = cur_row;
    for (int l = 0; l < M; ++l) {
      const DecoderLayer& layer = model.dec_layers[static_cast<size_t>(l)];
      Tensor ln1x = layer_norm_fwd(layer.ln1, x);
      Tensor k_new = matmul(ln1x, layer.self_attn.wk);
      Tensor v_new = matmul(ln1x, layer.self_attn.wv);
      Tensor q = matmul(ln1x, layer.self_attn.wq);
      std::vector<Tensor> k_all(kc[static_cast<size_t>(l)]);
      k_all.push_back(k_new);
      std::vector<Tensor> v_all(vc[static_cast<size_t>(l)]);
      v_all.push_back(v_new);
      Tensor k = stack_rows(k_all);
      Tensor v = stack_rows(v_all);
      std::vector<Tensor> heads;
      heads.reserve(static_cast<size_t>(H));
      for (int h = 0; h < H; ++h) {
        Tensor scores =
            mul(matmul(slice_cols(q, h * dk, dk), transpose(slice_cols(k, h * dk, dk))),
                1.0 / std::sqrt(static_cast<double>(dk)));
        heads.push_back(matmul(softmax(scores, /*axis=*/1), slice_cols(v, h * dk, dk)));
      }
      x = add(x, matmul(concat_cols(heads), layer.self_attn.wo));
      if (commit_kv) {
        kc[static_cast<size_t>(l)].push_back(k_new);
        vc[static_cast<size_t>(l)].push_back(v_new);
      }

      Tensor queries = layer_norm_fwd(layer.ln2, x);
      for (int h = 0; h < H; ++h) {
        int& committed = att_t[static_cast<size_t>(l)][static_cast<size_t>(h)];
        if (committed >= 0) continue;
        int j = att_j[static_cast<size_t>(l)][static_cast<size_t>(h)];
        while (true) {
          if (j > k_avail) {
            if (frames_read >= T) {  // source exhausted: forced write at the end
              committed = k_avail;
              break;
            }
            att_j[static_cast<size_t>(l)][static_cast<size_t>(h)] = j;
            return std::nullopt;  // needs another read
          }
          const double p =
              selection_prob(monotonic_energy(layer.cross, queries, slice_rows(E, j - 1, 1), h))
                  .value();
          const bool write = cfg.sample ? std::bernoulli_distribution(p)(sample_rng)
                                        : infer_decide(p, cfg) == Decision::Write;
          if (write) {
            committed = j;
            break;
          }
          ++j;
        }
      }
      // Hard context: each head attends its committed position.
      std::vector<Tensor> ctx;
      ctx.reserve(static_cast<size_t>(H));
      for (int h = 0; h < H; ++h) {
        const int t = att_t[static_cast<size_t>(l)][static_cast<size_t>(h)];
        Tensor v_row = matmul(slice_rows(E, t - 1, 1), layer.cross.wv);
        ctx.push_back(slice_cols(v_row, h * dk, dk));
      }
      x = add(x, matmul(concat_cols(ctx), layer.cross.wo));
      x = add(x, feed_forward_fwd(layer.ffn, layer_norm_fwd(layer.ln3, x)));
    }
    return linear_fwd(model.out_proj, layer_norm_fwd(model.dec_ln, x));
  };

  int emitted = 0;
  while (emitted < cap) {
    std::optional<Tensor> logits = walk(/*commit_kv=*/false);
    if (!logits.has_value()) {
      const int take = std::min(cfg.step_frames, T - frames_read);
      enc.feed(slice_rows(source_frames, frames_read, take));
      frames_read += take;
      trace.events.push_back({Decision::Read, take});
      continue;
    }
    const int tok = argmax_row(*logits);
    if (tok == kEosId) break;  // terminator: not part of the output
    trace.events.push_back({Decision::Write, tok});
    trace.output.push_back(tok);
    trace.delays.push_back(frames_read);
    std::vector<int> positions;
    positions.reserve(static_cast<size_t>(M) * H);
    for (int l = 0; l < M; ++l)
      for (int h = 0; h < H; ++h)
        positions.push_back(att_t[static_cast<size_t>(l)][static_cast<size_t>(h)]);
    trace.head_positions.push_back(std::move(positions));
    walk(/*commit_kv=*/true);  // finalize: append this row's k/v to the caches
    for (int l = 0; l < M; ++l)
      for (int h = 0; h < H; ++h) {
        prev_t[static_cast<size_t>(l)][static_cast<size_t>(h)] =
            att_t[static_cast<size_t>(l)][static_cast<size_t>(h)];
        att_t[static_cast<size_t>(l)][static_cast<size_t>(h)] = -1;
        att_j[static_cast<size_t>(l)][static_cast<size_t>(h)] =
            prev_t[static_cast<size_t>(l)][static_cast<size_t>(h)] + 1;
      }
    ++emitted;
    ++fed;
    cur_row = embed_positions(model.tgt_embed, {tok}, fed);
  }
  return trace;
}

}  // namespace simul
