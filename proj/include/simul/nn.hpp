#pragma once

// Network building blocks shared by the encoders and the decoder: linear
// layers, layer norm, sinusoidal positions, strided causal convolution,
// causal multi-head self-attention, feed-forward blocks, and the pre-norm
// encoder/decoder layers assembled from them.
//
// Everything here is causal and row-local in the streaming sense: output row
// t depends only on input rows <= t (convolutions via left padding,
// self-attention via masking). Encoding a prefix therefore reproduces the
// corresponding rows of a full-sequence encode bitwise, which the streaming
// harness relies on.

#include <random>
#include <string>
#include <utility>
#include <vector>

#include "simul/monotonic.hpp"
#include "simul/tensor.hpp"

namespace simul {

/// Named parameter list used by optimizers and checkpoints. Tensors share
/// storage with the owning module, so mutating them mutates the module.
using ParamList = std::vector<std::pair<std::string, Tensor>>;

struct Linear {
  Tensor w;  // in x out
  Tensor b;  // 1 x out
};

Linear linear_init(int in, int out, std::mt19937_64& rng);
Tensor linear_fwd(const Linear& lin, const Tensor& x);

struct LayerNormParams {
  Tensor gain;  // 1 x dim
  Tensor bias;  // 1 x dim
};

LayerNormParams layer_norm_init(int dim);
Tensor layer_norm_fwd(const LayerNormParams& ln, const Tensor& x);

/// Sinusoidal position rows [offset, offset + rows): even columns sine, odd
/// columns cosine, wavelengths geometric in 10000^(2i/dim). Untracked.
Tensor sinusoidal_positions(int rows, int dim, int offset = 0);

/// Kernel-3, stride-2 convolution over time with two left zero rows, so
/// output row t sees input rows <= 2t. Output length ceil(T/2).
struct CausalConv {
  Tensor w0, w1, w2;  // per-tap in x out (w2 is the current-frame tap)
  Tensor b;           // 1 x out
};

CausalConv causal_conv_init(int in, int out, std::mt19937_64& rng);
Tensor causal_conv_fwd(const CausalConv& conv, const Tensor& x);

/// Multi-head scaled-dot-product self-attention, always causally masked.
struct SelfAttention {
  Tensor wq, wk, wv, wo;  // dim x dim
  int heads = 1;
};

SelfAttention self_attention_init(int dim, int heads, std::mt19937_64& rng);
Tensor self_attention_fwd(const SelfAttention& att, const Tensor& x);

struct FeedForward {
  Linear up, down;
};

FeedForward feed_forward_init(int dim, int hidden, std::mt19937_64& rng);
Tensor feed_forward_fwd(const FeedForward& ffn, const Tensor& x);

/// Pre-norm transformer encoder layer:
///   x += dropout(attn(ln1(x)));  x += dropout(ffn(ln2(x))).
/// `drop_rng` null (or dropout 0) runs in eval mode.
struct EncoderLayer {
  LayerNormParams ln1, ln2;
  SelfAttention attn;
  FeedForward ffn;
};

EncoderLayer encoder_layer_init(int dim, int hidden, int heads, std::mt19937_64& rng);
Tensor encoder_layer_fwd(const EncoderLayer& layer, const Tensor& x, double dropout = 0.0,
                         std::mt19937_64* drop_rng = nullptr);

/// Pre-norm decoder layer: causal self-attention, monotonic cross-attention
/// in expectation, feed-forward. The cross-attention queries are the
/// ln2-normalized states after self-attention; the per-head energies and
/// expected alignments computed from them are returned for the regularizer
/// and latency losses.
struct DecoderLayer {
  LayerNormParams ln1, ln2, ln3;
  SelfAttention self_attn;
  MonotonicAttention cross;
  FeedForward ffn;
};

struct DecoderLayerOut {
  Tensor x;             // I x dim
  EnergyMatrix e;       // per head, I x J
  AlignmentMatrix a;    // per head, I x J
};

DecoderLayer decoder_layer_init(int dim, int hidden, int heads, double energy_bias,
                                std::mt19937_64& rng);
DecoderLayerOut decoder_layer_fwd(const DecoderLayer& layer, const Tensor& x, const Tensor& enc,
                                  double dropout = 0.0, std::mt19937_64* drop_rng = nullptr);

// Parameter registration, prefix-qualified (e.g. "enc0.attn.wq").
void collect_params(Linear& lin, ParamList& out, const std::string& prefix);
void collect_params(MonotonicAttention& att, ParamList& out, const std::string& prefix);
void collect_params(LayerNormParams& ln, ParamList& out, const std::string& prefix);
void collect_params(CausalConv& conv, ParamList& out, const std::string& prefix);
void collect_params(SelfAttention& att, ParamList& out, const std::string& prefix);
void collect_params(FeedForward& ffn, ParamList& out, const std::string& prefix);
void collect_params(EncoderLayer& layer, ParamList& out, const std::string& prefix);
void collect_params(DecoderLayer& layer, ParamList& out, const std::string& prefix);

}  // namespace simul
