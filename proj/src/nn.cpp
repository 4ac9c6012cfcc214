#include "simul/nn.hpp"

#include <cmath>
#include <stdexcept>

namespace simul {

namespace {

// Sublayer-output dropout; identity in eval mode.
Tensor maybe_drop(const Tensor& x, double p, std::mt19937_64* rng) {
  if (rng == nullptr || p <= 0.0) return x;
  return dropout(x, p, *rng, /*training=*/true);
}

// T_out x T_in 0/1 matrix selecting rows first, first+stride, ... Constant,
// untracked; matmul with it routes gradients to the selected rows.
Tensor row_selector(int t_out, int t_in, int first, int stride) {
  std::vector<double> m(static_cast<size_t>(t_out) * t_in, 0.0);
  for (int t = 0; t < t_out; ++t)
    m[static_cast<size_t>(t) * t_in + (first + static_cast<size_t>(t) * stride)] = 1.0;
  return Tensor::from_data(t_out, t_in, std::move(m));
}

// 0 on and below the diagonal, a large negative number above: added to
// attention scores before softmax so position t never sees positions > t.
// -1e30 underflows to an exact zero probability after the softmax's
// max-shift, keeping prefix and full-sequence encodes bitwise identical.
Tensor causal_mask(int n) {
  std::vector<double> m(static_cast<size_t>(n) * n, 0.0);
  for (int i = 0; i < n; ++i)
    for (int j = i + 1; j < n; ++j) m[static_cast<size_t>(i) * n + j] = -1e30;
  return Tensor::from_data(n, n, std::move(m));
}

}  // namespace

Linear linear_init(int in, int out, std::mt19937_64& rng) {
  if (in < 1 || out < 1) throw std::invalid_argument("linear_init: non-positive dimension");
  Linear lin;
  lin.w = Tensor::randn(in, out, rng, 1.0 / std::sqrt(static_cast<double>(in)));
  lin.b = Tensor::zeros(1, out);
  return lin;
}

Tensor linear_fwd(const Linear& lin, const Tensor& x) {
  return add_rowvec(matmul(x, lin.w), lin.b);
}

LayerNormParams layer_norm_init(int dim) {
  LayerNormParams ln;
  ln.gain = Tensor::full(1, dim, 1.0);
  ln.bias = Tensor::zeros(1, dim);
  return ln;
}

Tensor layer_norm_fwd(const LayerNormParams& ln, const Tensor& x) {
  return layer_norm(x, ln.gain, ln.bias);
}

Tensor sinusoidal_positions(int rows, int dim, int offset) {
  if (rows < 1 || dim < 2) throw std::invalid_argument("sinusoidal_positions: bad shape");
  std::vector<double> pe(static_cast<size_t>(rows) * dim, 0.0);
  for (int t = 0; t < rows; ++t) {
    const double pos = static_cast<double>(t + offset);
    for (int c = 0; c + 1 < dim; c += 2) {
      const double freq = std::pow(10000.0, -static_cast<double>(c) / dim);
      pe[static_cast<size_t>(t) * dim + c] = std::sin(pos * freq);
      pe[static_cast<size_t>(t) * dim + c + 1] = std::cos(pos * freq);
    }
  }
  return Tensor::from_data(rows, dim, std::move(pe));
}

CausalConv causal_conv_init(int in, int out, std::mt19937_64& rng) {
  const double stddev = 1.0 / std::sqrt(3.0 * in);
  CausalConv conv;
  conv.w0 = Tensor::randn(in, out, rng, stddev);
  conv.w1 = Tensor::randn(in, out, rng, stddev);
  conv.w2 = Tensor::randn(in, out, rng, stddev);
  conv.b = Tensor::zeros(1, out);
  return conv;
}

Tensor causal_conv_fwd(const CausalConv& conv, const Tensor& x) {
  const int t_in = x.rows();
  if (t_in < 1) throw std::invalid_argument("causal_conv_fwd: empty input");
  const int t_out = (t_in + 1) / 2;
  std::vector<Tensor> padded_parts{Tensor::zeros(2, x.cols()), x};
  Tensor padded = stack_rows(padded_parts);  // rows t_in + 2
  // Output row t taps padded rows 2t, 2t+1, 2t+2 == input rows 2t-2 .. 2t.
  Tensor acc = matmul(matmul(row_selector(t_out, t_in + 2, 0, 2), padded), conv.w0);
  acc = add(acc, matmul(matmul(row_selector(t_out, t_in + 2, 1, 2), padded), conv.w1));
  acc = add(acc, matmul(matmul(row_selector(t_out, t_in + 2, 2, 2), padded), conv.w2));
  return add_rowvec(acc, conv.b);
}

SelfAttention self_attention_init(int dim, int heads, std::mt19937_64& rng) {
  if (heads < 1 || dim % heads != 0)
    throw std::invalid_argument("self_attention_init: dim must divide into heads");
  const double stddev = 1.0 / std::sqrt(static_cast<double>(dim));
  SelfAttention att;
  att.wq = Tensor::randn(dim, dim, rng, stddev);
  att.wk = Tensor::randn(dim, dim, rng, stddev);
  att.wv = Tensor::randn(dim, dim, rng, stddev);
  att.wo = Tensor::randn(dim, dim, rng, stddev);
  att.heads = heads;
  return att;
}

Tensor self_attention_fwd(const SelfAttention& att, const Tensor& x) {
  const int n = x.rows();
  const int dk = x.cols() / att.heads;
  Tensor q = matmul(x, att.wq);
  Tensor k = matmul(x, att.wk);
  Tensor v = matmul(x, att.wv);
  Tensor mask = causal_mask(n);
  std::vector<Tensor> heads;
  heads.reserve(static_cast<size_t>(att.heads));
  for (int h = 0; h < att.heads; ++h) {
    Tensor qh = slice_cols(q, h * dk, dk);
    Tensor kh = slice_cols(k, h * dk, dk);
    Tensor vh = slice_cols(v, h * dk, dk);
    Tensor scores = mul(matmul(qh, transpose(kh)), 1.0 / std::sqrt(static_cast<double>(dk)));
    Tensor probs = softmax(add(scores, mask), /*axis=*/1);
    heads.push_back(matmul(probs, vh));
  }
  return matmul(concat_cols(heads), att.wo);
}

FeedForward feed_forward_init(int dim, int hidden, std::mt19937_64& rng) {
  FeedForward ffn;
  ffn.up = linear_init(dim, hidden, rng);
  ffn.down = linear_init(hidden, dim, rng);
  return ffn;
}

Tensor feed_forward_fwd(const FeedForward& ffn, const Tensor& x) {
  return linear_fwd(ffn.down, relu(linear_fwd(ffn.up, x)));
}

EncoderLayer encoder_layer_init(int dim, int hidden, int heads, std::mt19937_64& rng) {
  EncoderLayer layer;
  layer.ln1 = layer_norm_init(dim);
  layer.attn = self_attention_init(dim, heads, rng);
  layer.ln2 = layer_norm_init(dim);
  layer.ffn = feed_forward_init(dim, hidden, rng);
  return layer;
}

Tensor encoder_layer_fwd(const EncoderLayer& layer, const Tensor& x, double dropout_p,
                         std::mt19937_64* drop_rng) {
  Tensor h = add(x, maybe_drop(self_attention_fwd(layer.attn, layer_norm_fwd(layer.ln1, x)),
                               dropout_p, drop_rng));
  return add(h, maybe_drop(feed_forward_fwd(layer.ffn, layer_norm_fwd(layer.ln2, h)), dropout_p,
                           drop_rng));
}

DecoderLayer decoder_layer_init(int dim, int hidden, int heads, double energy_bias,
                                std::mt19937_64& rng) {
  DecoderLayer layer;
  layer.ln1 = layer_norm_init(dim);
  layer.self_attn = self_attention_init(dim, heads, rng);
  layer.ln2 = layer_norm_init(dim);
  layer.cross = monotonic_attention_init(dim, heads, energy_bias, rng);
  layer.ln3 = layer_norm_init(dim);
  layer.ffn = feed_forward_init(dim, hidden, rng);
  return layer;
}

DecoderLayerOut decoder_layer_fwd(const DecoderLayer& layer, const Tensor& x, const Tensor& enc,
                                  double dropout_p, std::mt19937_64* drop_rng) {
  Tensor h = add(x, maybe_drop(self_attention_fwd(layer.self_attn, layer_norm_fwd(layer.ln1, x)),
                               dropout_p, drop_rng));
  Tensor queries = layer_norm_fwd(layer.ln2, h);
  DecoderLayerOut out;
  out.e = monotonic_energies(layer.cross, queries, enc);
  std::vector<Tensor> head_p;
  head_p.reserve(out.e.head_e.size());
  for (const Tensor& e : out.e.head_e) head_p.push_back(selection_prob(e));
  out.a = expected_alignment(head_p);
  Tensor ctx = monotonic_context(layer.cross, out.a, enc);
  h = add(h, maybe_drop(ctx, dropout_p, drop_rng));
  out.x = add(h, maybe_drop(feed_forward_fwd(layer.ffn, layer_norm_fwd(layer.ln3, h)), dropout_p,
                            drop_rng));
  return out;
}

void collect_params(Linear& lin, ParamList& out, const std::string& prefix) {
  out.emplace_back(prefix + ".w", lin.w);
  out.emplace_back(prefix + ".b", lin.b);
}

void collect_params(MonotonicAttention& att, ParamList& out, const std::string& prefix) {
  out.emplace_back(prefix + ".wq", att.wq);
  out.emplace_back(prefix + ".wk", att.wk);
  out.emplace_back(prefix + ".wv", att.wv);
  out.emplace_back(prefix + ".wo", att.wo);
  out.emplace_back(prefix + ".bias", att.bias);
}

void collect_params(LayerNormParams& ln, ParamList& out, const std::string& prefix) {
  out.emplace_back(prefix + ".gain", ln.gain);
  out.emplace_back(prefix + ".bias", ln.bias);
}

void collect_params(CausalConv& conv, ParamList& out, const std::string& prefix) {
  out.emplace_back(prefix + ".w0", conv.w0);
  out.emplace_back(prefix + ".w1", conv.w1);
  out.emplace_back(prefix + ".w2", conv.w2);
  out.emplace_back(prefix + ".b", conv.b);
}

void collect_params(SelfAttention& att, ParamList& out, const std::string& prefix) {
  out.emplace_back(prefix + ".wq", att.wq);
  out.emplace_back(prefix + ".wk", att.wk);
  out.emplace_back(prefix + ".wv", att.wv);
  out.emplace_back(prefix + ".wo", att.wo);
}

void collect_params(FeedForward& ffn, ParamList& out, const std::string& prefix) {
  collect_params(ffn.up, out, prefix + ".up");
  collect_params(ffn.down, out, prefix + ".down");
}

void collect_params(EncoderLayer& layer, ParamList& out, const std::string& prefix) {
  collect_params(layer.ln1, out, prefix + ".ln1");
  collect_params(layer.attn, out, prefix + ".attn");
  collect_params(layer.ln2, out, prefix + ".ln2");
  collect_params(layer.ffn, out, prefix + ".ffn");
}

void collect_params(DecoderLayer& layer, ParamList& out, const std::string& prefix) {
  collect_params(layer.ln1, out, prefix + ".ln1");
  collect_params(layer.self_attn, out, prefix + ".self");
  collect_params(layer.ln2, out, prefix + ".ln2");
  collect_params(layer.cross, out, prefix + ".cross");
  collect_params(layer.ln3, out, prefix + ".ln3");
  collect_params(layer.ffn, out, prefix + ".ffn");
}

}  // namespace simul
