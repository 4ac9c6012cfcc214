#include "simul/model.hpp"

#include <cmath>
#include <fstream>
#include <stdexcept>

#include <json.hpp>

namespace simul {

// Embedding rows scaled by sqrt(dim) with sinusoidal positions added,
// starting at `offset`.
Tensor embed_positions(const Tensor& table, const std::vector<int>& ids, int offset) {
  const int dim = table.cols();
  Tensor x = mul(embedding(table, ids), std::sqrt(static_cast<double>(dim)));
  return add(x, sinusoidal_positions(static_cast<int>(ids.size()), dim, offset));
}

namespace {

Tensor maybe_drop(const Tensor& x, double p, std::mt19937_64* rng) {
  if (rng == nullptr || p <= 0.0) return x;
  return dropout(x, p, *rng, /*training=*/true);
}

void check_tokens(const std::vector<int>& tokens, int vocab, const char* where) {
  for (int t : tokens)
    if (t < 0 || t >= vocab)
      throw std::invalid_argument(std::string(where) + ": token id " + std::to_string(t) +
                                  " outside vocabulary of " + std::to_string(vocab));
}

}  // namespace

void ModelConfig::validate() const {
  auto positive = [](int v, const char* name) {
    if (v < 1) throw std::invalid_argument(std::string("ModelConfig: ") + name + " must be >= 1");
  };
  positive(vocab_src, "vocab_src");
  positive(vocab_tgt, "vocab_tgt");
  positive(embed_dim, "embed_dim");
  positive(ffn_dim, "ffn_dim");
  positive(heads, "heads");
  positive(feat_dim, "feat_dim");
  positive(speech_conv_layers, "speech_conv_layers");
  positive(private_speech_layers, "private_speech_layers");
  positive(shared_encoder_layers, "shared_encoder_layers");
  positive(decoder_layers, "decoder_layers");
  if (embed_dim % heads != 0)
    throw std::invalid_argument("ModelConfig: embed_dim not divisible by heads");
  if (dropout < 0.0 || dropout >= 1.0)
    throw std::invalid_argument("ModelConfig: dropout outside [0,1)");
  if (label_smoothing < 0.0 || label_smoothing >= 1.0)
    throw std::invalid_argument("ModelConfig: label_smoothing outside [0,1)");
}

Model model_init(const ModelConfig& cfg, std::uint64_t seed) {
  cfg.validate();
  std::mt19937_64 rng(seed);
  Model m;
  m.cfg = cfg;
  m.src_embed = Tensor::randn(cfg.vocab_src, cfg.embed_dim, rng,
                              1.0 / std::sqrt(static_cast<double>(cfg.embed_dim)));
  m.tgt_embed = Tensor::randn(cfg.vocab_tgt, cfg.embed_dim, rng,
                              1.0 / std::sqrt(static_cast<double>(cfg.embed_dim)));
  int conv_in = cfg.feat_dim;
  for (int i = 0; i < cfg.speech_conv_layers; ++i) {
    m.convs.push_back(causal_conv_init(conv_in, cfg.embed_dim, rng));
    conv_in = cfg.embed_dim;
  }
  for (int i = 0; i < cfg.private_speech_layers; ++i)
    m.speech_layers.push_back(encoder_layer_init(cfg.embed_dim, cfg.ffn_dim, cfg.heads, rng));
  for (int i = 0; i < cfg.shared_encoder_layers; ++i)
    m.shared_layers.push_back(encoder_layer_init(cfg.embed_dim, cfg.ffn_dim, cfg.heads, rng));
  m.enc_ln = layer_norm_init(cfg.embed_dim);
  for (int i = 0; i < cfg.decoder_layers; ++i)
    m.dec_layers.push_back(
        decoder_layer_init(cfg.embed_dim, cfg.ffn_dim, cfg.heads, cfg.energy_init_bias, rng));
  m.dec_ln = layer_norm_init(cfg.embed_dim);
  m.out_proj = linear_init(cfg.embed_dim, cfg.vocab_tgt, rng);
  return m;
}

ParamList model_params(Model& m) {
  ParamList out;
  out.emplace_back("src_embed", m.src_embed);
  out.emplace_back("tgt_embed", m.tgt_embed);
  for (size_t i = 0; i < m.convs.size(); ++i)
    collect_params(m.convs[i], out, "conv" + std::to_string(i));
  for (size_t i = 0; i < m.speech_layers.size(); ++i)
    collect_params(m.speech_layers[i], out, "enc_speech" + std::to_string(i));
  for (size_t i = 0; i < m.shared_layers.size(); ++i)
    collect_params(m.shared_layers[i], out, "enc_shared" + std::to_string(i));
  collect_params(m.enc_ln, out, "enc_ln");
  for (size_t i = 0; i < m.dec_layers.size(); ++i)
    collect_params(m.dec_layers[i], out, "dec" + std::to_string(i));
  collect_params(m.dec_ln, out, "dec_ln");
  collect_params(m.out_proj, out, "out");
  return out;
}

EncoderOutput encode_speech(const Model& m, const Tensor& frames, bool training,
                            std::mt19937_64* drop_rng) {
  if (frames.rows() < 1) throw std::invalid_argument("encode_speech: empty input");
  if (frames.cols() != m.cfg.feat_dim)
    throw std::invalid_argument("encode_speech: frames are " + shape_str(frames) +
                                ", expected feature width " + std::to_string(m.cfg.feat_dim));
  std::mt19937_64* rng = training ? drop_rng : nullptr;
  Tensor x = frames;
  for (const CausalConv& conv : m.convs) x = relu(causal_conv_fwd(conv, x));
  x = add(x, sinusoidal_positions(x.rows(), m.cfg.embed_dim));
  x = maybe_drop(x, m.cfg.dropout, rng);
  for (const EncoderLayer& layer : m.speech_layers)
    x = encoder_layer_fwd(layer, x, m.cfg.dropout, rng);
  for (const EncoderLayer& layer : m.shared_layers)
    x = encoder_layer_fwd(layer, x, m.cfg.dropout, rng);
  x = layer_norm_fwd(m.enc_ln, x);
  return {x, x.rows()};
}

EncoderOutput encode_text(const Model& m, const std::vector<int>& tokens, bool training,
                          std::mt19937_64* drop_rng) {
  if (tokens.empty()) throw std::invalid_argument("encode_text: empty input");
  check_tokens(tokens, m.cfg.vocab_src, "encode_text");
  std::mt19937_64* rng = training ? drop_rng : nullptr;
  Tensor x = embed_positions(m.src_embed, tokens, 0);
  x = maybe_drop(x, m.cfg.dropout, rng);
  for (const EncoderLayer& layer : m.shared_layers)
    x = encoder_layer_fwd(layer, x, m.cfg.dropout, rng);
  x = layer_norm_fwd(m.enc_ln, x);
  return {x, x.rows()};
}

BranchForward decode_teacher_forced(const Model& m, const std::vector<int>& target,
                                    const EncoderOutput& enc, bool training,
                                    std::mt19937_64* drop_rng) {
  if (target.empty()) throw std::invalid_argument("decode_teacher_forced: empty target");
  check_tokens(target, m.cfg.vocab_tgt, "decode_teacher_forced");
  std::mt19937_64* rng = training ? drop_rng : nullptr;

  std::vector<int> input_ids{kBosId};
  input_ids.insert(input_ids.end(), target.begin(), target.end());
  std::vector<int> labels(target);
  labels.push_back(kEosId);

  Tensor x = embed_positions(m.tgt_embed, input_ids, 0);
  x = maybe_drop(x, m.cfg.dropout, rng);
  BranchForward out;
  for (const DecoderLayer& layer : m.dec_layers) {
    DecoderLayerOut lo = decoder_layer_fwd(layer, x, enc.h, m.cfg.dropout, rng);
    out.energies.push_back(std::move(lo.e));
    out.alignments.push_back(std::move(lo.a));
    x = lo.x;
  }
  out.logits = linear_fwd(m.out_proj, layer_norm_fwd(m.dec_ln, x));
  out.nll = cross_entropy(out.logits, labels, m.cfg.label_smoothing);
  return out;
}

DecodeSession::DecodeSession(const Model& m, EncoderOutput enc, int max_len)
    : m_(&m), enc_(std::move(enc)), max_len_(max_len) {
  if (enc_.h.rows() < 1) throw std::invalid_argument("DecodeSession: empty encoder output");
  const size_t layers = m.dec_layers.size();
  k_rows_.resize(layers);
  v_rows_.resize(layers);
  start_.resize(layers);
  for (size_t l = 0; l < layers; ++l)
    for (int h = 0; h < m.cfg.heads; ++h) start_[l].push_back(initial_start(enc_.h.rows()));
}

Tensor DecodeSession::step(int token) {
  if (fed_ >= max_len_)
    throw std::logic_error("DecodeSession: prefix longer than maximum target length " +
                           std::to_string(max_len_));
  check_tokens({token}, m_->cfg.vocab_tgt, "DecodeSession::step");
  const int dk = m_->cfg.embed_dim / m_->cfg.heads;
  Tensor x = embed_positions(m_->tgt_embed, {token}, fed_);
  for (size_t l = 0; l < m_->dec_layers.size(); ++l) {
    const DecoderLayer& layer = m_->dec_layers[l];
    // Causal self-attention over the cached rows plus this one.
    Tensor ln1x = layer_norm_fwd(layer.ln1, x);
    k_rows_[l].push_back(matmul(ln1x, layer.self_attn.wk));
    v_rows_[l].push_back(matmul(ln1x, layer.self_attn.wv));
    Tensor q = matmul(ln1x, layer.self_attn.wq);
    Tensor k = stack_rows(k_rows_[l]);
    Tensor v = stack_rows(v_rows_[l]);
    std::vector<Tensor> heads;
    heads.reserve(static_cast<size_t>(m_->cfg.heads));
    for (int h = 0; h < m_->cfg.heads; ++h) {
      Tensor scores = mul(matmul(slice_cols(q, h * dk, dk), transpose(slice_cols(k, h * dk, dk))),
                          1.0 / std::sqrt(static_cast<double>(dk)));
      heads.push_back(matmul(softmax(scores, /*axis=*/1), slice_cols(v, h * dk, dk)));
    }
    x = add(x, matmul(concat_cols(heads), layer.self_attn.wo));
    // Monotonic cross-attention in expectation, advancing each head's
    // alignment recurrence by one row.
    Tensor queries = layer_norm_fwd(layer.ln2, x);
    AlignmentMatrix am;
    for (int h = 0; h < m_->cfg.heads; ++h) {
      Tensor p = selection_prob(monotonic_energy(layer.cross, queries, enc_.h, h));
      Tensor alpha_row = expected_alignment_row(p, start_[l][static_cast<size_t>(h)]);
      start_[l][static_cast<size_t>(h)] = advance_start(alpha_row);
      am.head_alpha.push_back(std::move(alpha_row));
    }
    x = add(x, monotonic_context(layer.cross, am, enc_.h));
    x = add(x, feed_forward_fwd(layer.ffn, layer_norm_fwd(layer.ln3, x)));
  }
  ++fed_;
  return linear_fwd(m_->out_proj, layer_norm_fwd(m_->dec_ln, x));
}

int argmax_row(const Tensor& logits) {
  if (logits.rows() != 1 || logits.cols() < 1)
    throw std::invalid_argument("argmax_row: need a non-empty single row, got " +
                                shape_str(logits));
  int best = 0;
  for (int j = 1; j < logits.cols(); ++j)
    if (logits.at(0, j) > logits.at(0, best)) best = j;
  return best;
}

std::vector<int> greedy_decode(const Model& m, const EncoderOutput& enc, int max_len) {
  DecodeSession session(m, enc, max_len + 1);  // +1 for BOS
  std::vector<int> out;
  Tensor logits = session.step(kBosId);
  while (static_cast<int>(out.size()) < max_len) {
    const int tok = argmax_row(logits);
    if (tok == kEosId) break;
    out.push_back(tok);
    if (static_cast<int>(out.size()) == max_len) break;
    logits = session.step(tok);
  }
  return out;
}

namespace {

nlohmann::json config_to_json(const ModelConfig& c) {
  return nlohmann::json{{"vocab_src", c.vocab_src},
                        {"vocab_tgt", c.vocab_tgt},
                        {"embed_dim", c.embed_dim},
                        {"ffn_dim", c.ffn_dim},
                        {"heads", c.heads},
                        {"feat_dim", c.feat_dim},
                        {"speech_conv_layers", c.speech_conv_layers},
                        {"private_speech_layers", c.private_speech_layers},
                        {"shared_encoder_layers", c.shared_encoder_layers},
                        {"decoder_layers", c.decoder_layers},
                        {"dropout", c.dropout},
                        {"label_smoothing", c.label_smoothing},
                        {"energy_init_bias", c.energy_init_bias}};
}

ModelConfig config_from_json(const nlohmann::json& j) {
  ModelConfig c;
  c.vocab_src = j.at("vocab_src").get<int>();
  c.vocab_tgt = j.at("vocab_tgt").get<int>();
  c.embed_dim = j.at("embed_dim").get<int>();
  c.ffn_dim = j.at("ffn_dim").get<int>();
  c.heads = j.at("heads").get<int>();
  c.feat_dim = j.at("feat_dim").get<int>();
  c.speech_conv_layers = j.at("speech_conv_layers").get<int>();
  c.private_speech_layers = j.at("private_speech_layers").get<int>();
  c.shared_encoder_layers = j.at("shared_encoder_layers").get<int>();
  c.decoder_layers = j.at("decoder_layers").get<int>();
  c.dropout = j.at("dropout").get<double>();
  c.label_smoothing = j.at("label_smoothing").get<double>();
  c.energy_init_bias = j.at("energy_init_bias").get<double>();
  return c;
}

}  // namespace

void save_model(Model& m, const std::string& path) {
  nlohmann::json j;
  j["config"] = config_to_json(m.cfg);
  nlohmann::json params = nlohmann::json::object();
  for (auto& [name, t] : model_params(m)) {
    params[name] = {{"rows", t.rows()},
                    {"cols", t.cols()},
                    {"data", std::vector<double>(t.data().begin(), t.data().end())}};
  }
  j["params"] = std::move(params);
  std::ofstream out(path);
  if (!out) throw std::runtime_error("save_model: cannot write " + path);
  out << j.dump();
  if (!out) throw std::runtime_error("save_model: write failed for " + path);
}

Model load_model(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("load_model: cannot read " + path);
  nlohmann::json j = nlohmann::json::parse(in);
  Model m = model_init(config_from_json(j.at("config")), /*seed=*/0);
  const nlohmann::json& params = j.at("params");
  ParamList live = model_params(m);
  if (params.size() != live.size())
    throw std::runtime_error("load_model: checkpoint has " + std::to_string(params.size()) +
                             " parameters, model has " + std::to_string(live.size()));
  for (auto& [name, t] : live) {
    if (!params.contains(name)) throw std::runtime_error("load_model: missing parameter " + name);
    const nlohmann::json& pj = params.at(name);
    if (pj.at("rows").get<int>() != t.rows() || pj.at("cols").get<int>() != t.cols())
      throw std::runtime_error("load_model: shape mismatch for " + name);
    const auto data = pj.at("data").get<std::vector<double>>();
    if (data.size() != static_cast<size_t>(t.numel()))
      throw std::runtime_error("load_model: data size mismatch for " + name);
    std::copy(data.begin(), data.end(), t.mutable_data().begin());
  }
  return m;
}

}  // namespace simul
