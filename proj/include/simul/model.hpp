#pragma once

// The encoder–decoder: a frame ("speech") encoder with convolutional
// downsampling whose upper layers are shared with a token ("text") encoder,
// and a single monotonic decoder serving both branches.
//
// Both encoders are causal, so encoding a prefix reproduces the corresponding
// rows of a full encode bitwise; the streaming machinery (StreamingEncoder,
// simulate_decode) builds on that.

#include <cstdint>
#include <random>
#include <string>
#include <vector>

#include "simul/monotonic.hpp"
#include "simul/nn.hpp"
#include "simul/tensor.hpp"

namespace simul {

inline constexpr int kBosId = 0;
inline constexpr int kEosId = 1;

struct ModelConfig {
  int vocab_src = 34;   // 32 content tokens + BOS + EOS
  int vocab_tgt = 34;
  int embed_dim = 64;
  int ffn_dim = 128;
  int heads = 4;
  int feat_dim = 8;     // raw frame feature width
  int speech_conv_layers = 2;     // stride-2 each: K = ceil(T_raw / 4)
  int private_speech_layers = 2;  // below the shared stack, speech only
  int shared_encoder_layers = 2;  // tied between the two encoders
  int decoder_layers = 2;
  double dropout = 0.1;
  double label_smoothing = 0.1;
  double energy_init_bias = -1.0;

  // Throws std::invalid_argument on any violated constraint.
  void validate() const;
  // Raw-frame downsampling factor of the conv stack (2^speech_conv_layers).
  int frames_per_position() const { return 1 << speech_conv_layers; }
};

struct EncoderOutput {
  Tensor h;           // positions x embed_dim
  int valid_len = 0;  // == h.rows()
};

struct Model {
  ModelConfig cfg;
  Tensor src_embed;  // vocab_src x embed_dim
  Tensor tgt_embed;  // vocab_tgt x embed_dim
  std::vector<CausalConv> convs;
  std::vector<EncoderLayer> speech_layers;  // private to the speech branch
  std::vector<EncoderLayer> shared_layers;  // used by both branches
  LayerNormParams enc_ln;                   // final encoder norm, shared
  std::vector<DecoderLayer> dec_layers;
  LayerNormParams dec_ln;
  Linear out_proj;  // embed_dim x vocab_tgt
};

Model model_init(const ModelConfig& cfg, std::uint64_t seed);

/// Embedding rows scaled by sqrt(embed_dim), plus sinusoidal positions
/// starting at `offset`.
Tensor embed_positions(const Tensor& table, const std::vector<int>& ids, int offset);

/// All trainable parameters in a fixed, documented order; tensors share
/// storage with the model.
ParamList model_params(Model& m);

/// Frame encoder: conv downsampling, positions, private then shared layers.
EncoderOutput encode_speech(const Model& m, const Tensor& frames, bool training = false,
                            std::mt19937_64* drop_rng = nullptr);

/// Token encoder: embedding, positions, the shared layers only.
EncoderOutput encode_text(const Model& m, const std::vector<int>& tokens, bool training = false,
                          std::mt19937_64* drop_rng = nullptr);

/// One branch's teacher-forced pass: decoder input is BOS + target, labels
/// are target + EOS. Per-layer monotonic energies and alignments are kept
/// for the regularizer and latency losses.
struct BranchForward {
  Tensor logits;                            // (|y|+1) x vocab_tgt
  std::vector<EnergyMatrix> energies;       // per decoder layer
  std::vector<AlignmentMatrix> alignments;  // per decoder layer
  Tensor nll;                               // label-smoothed cross-entropy, scalar
};

BranchForward decode_teacher_forced(const Model& m, const std::vector<int>& target,
                                    const EncoderOutput& enc, bool training = false,
                                    std::mt19937_64* drop_rng = nullptr);

/// Incremental decoding over a fixed encoder output, with per-layer
/// self-attention caches and per-head alignment state, in eval mode with
/// expected (soft) monotonic attention. Feeding tokens one at a time yields
/// the same rows as a from-scratch teacher-forced pass.
class DecodeSession {
 public:
  DecodeSession(const Model& m, EncoderOutput enc, int max_len = 64);

  /// Feeds the next input token (BOS first) and returns the 1 x vocab_tgt
  /// logits row for the following position. Throws std::logic_error once
  /// max_len tokens have been fed.
  Tensor step(int token);

  int fed() const { return fed_; }

 private:
  const Model* m_;
  EncoderOutput enc_;
  int max_len_;
  int fed_ = 0;
  std::vector<std::vector<Tensor>> k_rows_, v_rows_;  // per decoder layer
  std::vector<std::vector<Tensor>> start_;            // per layer, per head: 1 x J
};

/// Index of the largest entry in a 1-row tensor; ties break to the lowest
/// index.
int argmax_row(const Tensor& logits);

/// Greedy decode with full soft attention over `enc` (offline quality
/// evaluation). Stops at EOS or after max_len content tokens; the returned
/// sequence contains neither BOS nor EOS.
std::vector<int> greedy_decode(const Model& m, const EncoderOutput& enc, int max_len);

/// Grows encoder states as raw frames arrive. In incremental mode only the
/// newly computable rows are processed, against per-layer caches; in
/// reencode mode every feed re-encodes the full received prefix. Both give
/// identical states (the encoder is causal); eval mode only.
class StreamingEncoder {
 public:
  StreamingEncoder(const Model& m, bool reencode_prefix = false);

  void feed(const Tensor& new_frames);
  const EncoderOutput& output() const { return out_; }
  int frames_fed() const { return t_raw_; }

 private:
  void extend_incremental();

  const Model* m_;
  bool reencode_;
  std::vector<double> raw_;  // received frames, row-major
  int t_raw_ = 0;
  // Incremental caches: per conv stage the computed output rows; per encoder
  // layer the projected k/v rows and the layer's output rows.
  std::vector<std::vector<Tensor>> conv_rows_;   // per conv stage
  std::vector<Tensor> stage_rows_;               // conv output + positions
  std::vector<std::vector<Tensor>> enc_k_, enc_v_, enc_out_;  // per layer
  std::vector<Tensor> final_rows_;               // after enc_ln
  EncoderOutput out_;
};

/// Writes config + all parameters as JSON; load(save(m)) round-trips
/// bitwise.
void save_model(Model& m, const std::string& path);
Model load_model(const std::string& path);

}  // namespace simul
