#include "simul/training.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <map>
#include <numeric>
#include <random>
#include <set>
#include <stdexcept>
#include <utility>

#include <json.hpp>

#include "simul/latency.hpp"
#include "simul/regularizers.hpp"

namespace simul {

// ---- synthetic paired data ----

void SyntheticTaskSpec::validate() const {
  if (src_vocab < 2 || tgt_vocab < 2)
    throw std::invalid_argument("SyntheticTaskSpec: vocabularies must have >= 2 tokens");
  if (min_len < 1 || max_len < min_len)
    throw std::invalid_argument("SyntheticTaskSpec: bad length range");
  if (feat_dim < 1) throw std::invalid_argument("SyntheticTaskSpec: feat_dim must be >= 1");
  if (min_reps < 1 || max_reps < min_reps)
    throw std::invalid_argument("SyntheticTaskSpec: bad reps range");
  if (noise_sigma < 0.0) throw std::invalid_argument("SyntheticTaskSpec: negative noise");
}

int lexical_map(int content, int vocab) {
  if (content < 0 || content >= vocab) throw std::invalid_argument("lexical_map: token out of range");
  // First stride coprime with the vocabulary keeps the map a bijection.
  for (int stride : {7, 5, 3, 1})
    if (std::gcd(stride, vocab) == 1) return (content * stride + 3) % vocab;
  return content;
}

std::vector<PairedExample> generate_dataset(const SyntheticTaskSpec& spec, int n) {
  spec.validate();
  if (n < 1) throw std::invalid_argument("generate_dataset: need n >= 1");
  std::mt19937_64 rng(spec.seed);
  std::normal_distribution<double> gauss(0.0, 1.0);

  // Per-token base frame vectors, drawn before any example so they depend
  // only on the seed.
  std::vector<std::vector<double>> base(static_cast<size_t>(spec.src_vocab));
  for (auto& v : base) {
    v.resize(static_cast<size_t>(spec.feat_dim));
    for (double& x : v) x = gauss(rng);
  }

  std::uniform_int_distribution<int> len_dist(spec.min_len, spec.max_len);
  std::uniform_int_distribution<int> tok_dist(0, spec.src_vocab - 1);
  std::uniform_int_distribution<int> rep_dist(spec.min_reps, spec.max_reps);

  std::vector<PairedExample> out;
  out.reserve(static_cast<size_t>(n));
  std::set<std::vector<int>> seen;  // transcript uniqueness => disjoint slices
  long attempts = 0;
  while (static_cast<int>(out.size()) < n) {
    if (++attempts > 1000L * n + 10000L)
      throw std::runtime_error("generate_dataset: transcript space too small for n unique examples");
    const int len = len_dist(rng);
    std::vector<int> content(static_cast<size_t>(len));
    for (int& c : content) c = tok_dist(rng);
    if (!seen.insert(content).second) continue;

    PairedExample ex;
    ex.transcript.reserve(content.size());
    for (int c : content) ex.transcript.push_back(c + kContentOffset);

    // Swap adjacent pairs, then map token-wise; an odd tail maps in place.
    ex.target.resize(content.size());
    for (size_t i = 0; i + 1 < content.size(); i += 2) {
      ex.target[i] = lexical_map(content[i + 1], spec.tgt_vocab) + kContentOffset;
      ex.target[i + 1] = lexical_map(content[i], spec.tgt_vocab) + kContentOffset;
    }
    if (content.size() % 2 == 1)
      ex.target.back() = lexical_map(content.back(), spec.tgt_vocab) + kContentOffset;

    std::vector<double> frames;
    for (int c : content) {
      const int reps = rep_dist(rng);
      for (int r = 0; r < reps; ++r)
        for (int k = 0; k < spec.feat_dim; ++k)
          frames.push_back(base[static_cast<size_t>(c)][static_cast<size_t>(k)] +
                           spec.noise_sigma * gauss(rng));
    }
    const int frame_rows = static_cast<int>(frames.size()) / spec.feat_dim;
    ex.frames = Tensor::from_data(frame_rows, spec.feat_dim, std::move(frames));
    out.push_back(std::move(ex));
  }
  return out;
}

// ---- the joint loss ----

void LossWeights::validate() const {
  if (alpha < 0.0 || beta < 0.0 || gamma < 0.0 || delta < 0.0 || lambda < 0.0)
    throw std::invalid_argument("LossWeights: weights must be >= 0");
  if (alpha > 1.0) throw std::invalid_argument("LossWeights: alpha must be <= 1");
}

LossWeights ablation_weights(const std::string& preset) {
  LossWeights w;
  w.alpha = 0.0;
  w.beta = 0.0;
  w.gamma = 0.0;
  w.delta = 0.0;
  w.lambda = 0.0;
  if (preset == "baseline") return w;
  w.gamma = 0.5;
  if (preset == "multitask") return w;
  w.alpha = 0.2;
  if (preset == "kd") return w;
  w.beta = 0.02;
  if (preset == "car") return w;
  w.delta = 0.01;
  if (preset == "dar") return w;
  throw std::invalid_argument("ablation_weights: unknown preset \"" + preset + "\"");
}

Tensor weighted_total(const Tensor& st_nll, const Tensor& kd, const Tensor& car,
                      const Tensor& mt_nll, const Tensor& dar, const Tensor& dal,
                      const LossWeights& w) {
  w.validate();
  Tensor total = mul(st_nll, 1.0 - w.alpha);
  total = add(total, mul(kd, w.alpha));
  total = add(total, mul(car, w.beta));
  total = add(total, mul(mt_nll, w.gamma));
  total = add(total, mul(dar, w.delta));
  total = add(total, mul(dal, w.lambda));
  return total;
}

namespace {

void check_finite(const Tensor& term, const char* name) {
  if (!std::isfinite(term.value()))
    throw std::runtime_error(std::string("joint_loss: non-finite ") + name + " term");
}

}  // namespace

Tensor joint_loss(const Model& m, const PairedExample& ex, const LossWeights& w,
                  LossBreakdown* breakdown, bool training, std::mt19937_64* drop_rng) {
  w.validate();
  EncoderOutput enc_s = encode_speech(m, ex.frames, training, drop_rng);
  EncoderOutput enc_t = encode_text(m, ex.transcript, training, drop_rng);
  BranchForward bf_s = decode_teacher_forced(m, ex.target, enc_s, training, drop_rng);
  BranchForward bf_t = decode_teacher_forced(m, ex.target, enc_t, training, drop_rng);

  Tensor kd = kd_loss(bf_s.logits, bf_t.logits);
  Tensor car = car_loss(enc_s, enc_t);
  Tensor dar = dar_loss(bf_s.energies, bf_t.energies);

  Tensor dal;
  const int rows = bf_s.logits.rows();
  for (size_t l = 0; l < bf_s.alignments.size(); ++l) {
    Tensor layer_dal = dal_loss(bf_s.alignments[l], enc_s.h.rows(), rows);
    dal = l == 0 ? layer_dal : add(dal, layer_dal);
  }
  dal = div(dal, Tensor::scalar(static_cast<double>(bf_s.alignments.size())));

  check_finite(bf_s.nll, "st_nll");
  check_finite(kd, "kd");
  check_finite(car, "car");
  check_finite(bf_t.nll, "mt_nll");
  check_finite(dar, "dar");
  check_finite(dal, "dal");

  Tensor total = weighted_total(bf_s.nll, kd, car, bf_t.nll, dar, dal, w);
  if (breakdown != nullptr) {
    breakdown->st_nll = bf_s.nll.value();
    breakdown->kd = kd.value();
    breakdown->car = car.value();
    breakdown->mt_nll = bf_t.nll.value();
    breakdown->dar = dar.value();
    breakdown->dal = dal.value();
    breakdown->total = total.value();
  }
  return total;
}

// ---- optimization ----

void TrainConfig::validate() const {
  if (lr <= 0.0) throw std::invalid_argument("TrainConfig: lr must be > 0");
  if (warmup_steps < 1) throw std::invalid_argument("TrainConfig: warmup_steps must be >= 1");
  if (clip_norm <= 0.0) throw std::invalid_argument("TrainConfig: clip_norm must be > 0");
  if (batch_tokens < 1) throw std::invalid_argument("TrainConfig: batch_tokens must be >= 1");
  if (phase1_steps < 1) throw std::invalid_argument("TrainConfig: phase1_steps must be >= 1");
  if (phase2_steps < 0) throw std::invalid_argument("TrainConfig: phase2_steps must be >= 0");
  if (eval_every < 1) throw std::invalid_argument("TrainConfig: eval_every must be >= 1");
  if (train_examples < 1 || dev_examples < 1 || dev_eval_examples < 1)
    throw std::invalid_argument("TrainConfig: dataset sizes must be >= 1");
  if (out_dir.empty()) throw std::invalid_argument("TrainConfig: out_dir is empty");
}

AdamOptimizer::AdamOptimizer(ParamList params, const TrainConfig& cfg)
    : params_(std::move(params)),
      lr_(cfg.lr),
      clip_norm_(cfg.clip_norm),
      beta1_(cfg.adam_beta1),
      beta2_(cfg.adam_beta2),
      eps_(cfg.adam_eps),
      warmup_(cfg.warmup_steps) {
  for (auto& [name, t] : params_) {
    t.set_requires_grad();
    m_.emplace_back(static_cast<size_t>(t.numel()), 0.0);
    v_.emplace_back(static_cast<size_t>(t.numel()), 0.0);
  }
}

double AdamOptimizer::learning_rate(long step_index) const {
  const double t = static_cast<double>(step_index);
  const double w = static_cast<double>(warmup_);
  return lr_ * std::min(t / w, std::sqrt(w / t));
}

void AdamOptimizer::zero_grads() {
  for (auto& [name, t] : params_) t.zero_grad();
}

double AdamOptimizer::step(long step_index) {
  double norm_sq = 0.0;
  for (auto& [name, t] : params_) {
    if (!t.has_grad()) continue;
    const Tensor g = t.grad();
    for (double gk : g.data()) norm_sq += gk * gk;
  }
  const double norm = std::sqrt(norm_sq);
  const double scale = norm > clip_norm_ ? clip_norm_ / norm : 1.0;
  const double lr = learning_rate(step_index);
  const double bc1 = 1.0 - std::pow(beta1_, static_cast<double>(step_index));
  const double bc2 = 1.0 - std::pow(beta2_, static_cast<double>(step_index));

  for (size_t pi = 0; pi < params_.size(); ++pi) {
    Tensor& t = params_[pi].second;
    if (!t.has_grad()) continue;
    const Tensor gt = t.grad();
    auto g = gt.data();
    auto x = t.mutable_data();
    auto& m = m_[pi];
    auto& v = v_[pi];
    for (size_t k = 0; k < m.size(); ++k) {
      const double gk = g[k] * scale;
      m[k] = beta1_ * m[k] + (1.0 - beta1_) * gk;
      v[k] = beta2_ * v[k] + (1.0 - beta2_) * gk * gk;
      x[k] -= lr * (m[k] / bc1) / (std::sqrt(v[k] / bc2) + eps_);
    }
  }
  return norm;
}

// ---- training loop ----

namespace {

struct DevScore {
  double nll = 0.0;
  double accuracy = 0.0;
};

DevScore dev_eval(const Model& m, std::span<const PairedExample> dev, int count) {
  DevScore score;
  long matches = 0, labels = 0;
  const int used = std::min<int>(count, static_cast<int>(dev.size()));
  for (int i = 0; i < used; ++i) {
    const PairedExample& ex = dev[static_cast<size_t>(i)];
    BranchForward bf = decode_teacher_forced(m, ex.target, encode_speech(m, ex.frames));
    score.nll += bf.nll.value();
    std::vector<int> want(ex.target);
    want.push_back(kEosId);
    for (size_t r = 0; r < want.size(); ++r) {
      ++labels;
      if (argmax_row(slice_rows(bf.logits, static_cast<int>(r), 1)) == want[r]) ++matches;
    }
  }
  score.nll /= used;
  score.accuracy = labels == 0 ? 0.0 : static_cast<double>(matches) / static_cast<double>(labels);
  return score;
}

std::string checkpoint_path(const TrainConfig& cfg, const char* name) {
  return (std::filesystem::path(cfg.out_dir) / name).string();
}

// One optimization phase over the train split. Returns false on divergence
// (the last good checkpoint stays on disk as last.json).
bool run_phase(int phase, int steps, Model& model, const TrainConfig& cfg,
               const LossWeights& weights, std::span<const PairedExample> train_split,
               std::span<const PairedExample> dev_split, std::ofstream& log, DevScore* last_dev) {
  AdamOptimizer opt(model_params(model), cfg);
  std::mt19937_64 order_rng(cfg.seed * 0x100000001B3ULL + static_cast<std::uint64_t>(phase));
  std::mt19937_64 drop_rng(cfg.seed * 0x9E3779B97F4A7C15ULL + static_cast<std::uint64_t>(phase));
  std::vector<size_t> order(train_split.size());
  std::iota(order.begin(), order.end(), 0);
  std::shuffle(order.begin(), order.end(), order_rng);
  size_t cursor = 0;

  auto log_record = [&](long step, const LossBreakdown& bd, double grad_norm, double lr) {
    const DevScore dev = dev_eval(model, dev_split, cfg.dev_eval_examples);
    nlohmann::json rec{{"phase", phase},       {"step", step},
                       {"seed", cfg.seed},     {"lr", lr},
                       {"grad_norm", grad_norm}, {"st_nll", bd.st_nll},
                       {"kd", bd.kd},          {"car", bd.car},
                       {"mt_nll", bd.mt_nll},  {"dar", bd.dar},
                       {"dal", bd.dal},        {"total", bd.total},
                       {"dev_nll", dev.nll},   {"dev_accuracy", dev.accuracy}};
    log << rec.dump() << "\n";
    log.flush();
    if (last_dev != nullptr) *last_dev = dev;
    save_model(model, checkpoint_path(cfg, "last.json"));
  };

  {
    // Pre-update snapshot: lets a finetuning run show it starts exactly
    // where the loaded checkpoint left off.
    LossBreakdown bd;
    (void)joint_loss(model, train_split[order[0]], weights, &bd);
    log_record(0, bd, 0.0, 0.0);
  }

  for (long step = 1; step <= steps; ++step) {
    opt.zero_grads();
    LossBreakdown batch_bd;
    double grad_norm = 0.0;
    try {
      Tape tape;
      Tensor total;
      int batch = 0;
      int token_budget = 0;
      while (token_budget < cfg.batch_tokens) {
        if (cursor == order.size()) {
          std::shuffle(order.begin(), order.end(), order_rng);
          cursor = 0;
        }
        const PairedExample& ex = train_split[order[cursor++]];
        LossBreakdown bd;
        Tensor loss = joint_loss(model, ex, weights, &bd, /*training=*/true, &drop_rng);
        total = batch == 0 ? loss : add(total, loss);
        batch_bd.st_nll += bd.st_nll;
        batch_bd.kd += bd.kd;
        batch_bd.car += bd.car;
        batch_bd.mt_nll += bd.mt_nll;
        batch_bd.dar += bd.dar;
        batch_bd.dal += bd.dal;
        ++batch;
        token_budget += static_cast<int>(ex.target.size()) + 1;
      }
      total = div(total, Tensor::scalar(static_cast<double>(batch)));
      batch_bd.st_nll /= batch;
      batch_bd.kd /= batch;
      batch_bd.car /= batch;
      batch_bd.mt_nll /= batch;
      batch_bd.dar /= batch;
      batch_bd.dal /= batch;
      batch_bd.total = total.value();
      if (!std::isfinite(batch_bd.total)) throw std::runtime_error("non-finite batch loss");
      tape.backward(total);
    } catch (const std::exception& e) {
      // Blown-up parameters surface either as a non-finite term value or as
      // a domain guard tripping inside an op; both end the run the same way,
      // with the message preserved in the log.
      nlohmann::json rec{{"phase", phase}, {"step", step}, {"event", "diverged"},
                         {"error", e.what()}, {"seed", cfg.seed}};
      log << rec.dump() << "\n";
      log.flush();
      return false;
    }
    grad_norm = opt.step(step);
    if (!std::isfinite(grad_norm)) {
      nlohmann::json rec{{"phase", phase}, {"step", step}, {"event", "diverged"},
                         {"error", "non-finite gradient norm"}, {"seed", cfg.seed}};
      log << rec.dump() << "\n";
      log.flush();
      return false;
    }
    if (step % cfg.eval_every == 0 || step == steps)
      log_record(step, batch_bd, grad_norm, opt.learning_rate(step));
  }
  return true;
}

TrainResult run_schedule(const TrainConfig& cfg, const SyntheticTaskSpec& spec,
                         const LossWeights& weights, Model model, bool phase1) {
  std::filesystem::create_directories(cfg.out_dir);
  std::vector<PairedExample> data = generate_dataset(spec, cfg.train_examples + cfg.dev_examples);
  std::span<const PairedExample> train_split(data.data(), static_cast<size_t>(cfg.train_examples));
  std::span<const PairedExample> dev_split(data.data() + cfg.train_examples,
                                           static_cast<size_t>(cfg.dev_examples));

  TrainResult result;
  result.log_path = (std::filesystem::path(cfg.out_dir) / "train_log.jsonl").string();
  std::ofstream log(result.log_path, std::ios::trunc);
  if (!log) throw std::runtime_error("train: cannot write " + result.log_path);

  DevScore dev;
  if (phase1) {
    LossWeights w1 = weights;
    w1.lambda = 0.0;  // latency loss joins in phase 2
    if (!run_phase(1, cfg.phase1_steps, model, cfg, w1, train_split, dev_split, log, &dev)) {
      result.diverged = true;
      result.final_checkpoint = checkpoint_path(cfg, "last.json");
      return result;
    }
    result.phase1_checkpoint = checkpoint_path(cfg, "phase1.json");
    save_model(model, result.phase1_checkpoint);
  }

  if (weights.lambda > 0.0 && cfg.phase2_steps > 0) {
    if (!run_phase(2, cfg.phase2_steps, model, cfg, weights, train_split, dev_split, log, &dev)) {
      result.diverged = true;
      result.final_checkpoint = checkpoint_path(cfg, "last.json");
      return result;
    }
  }
  result.final_checkpoint = checkpoint_path(cfg, "final.json");
  save_model(model, result.final_checkpoint);
  result.final_dev_nll = dev.nll;
  result.final_dev_accuracy = dev.accuracy;
  return result;
}

}  // namespace

TrainResult train(const TrainConfig& cfg, const SyntheticTaskSpec& spec, const LossWeights& w) {
  cfg.validate();
  w.validate();
  return run_schedule(cfg, spec, w, model_init(ModelConfig{}, cfg.seed), /*phase1=*/true);
}

TrainResult finetune(const TrainConfig& cfg, const SyntheticTaskSpec& spec, const LossWeights& w,
                     const std::string& start_checkpoint) {
  cfg.validate();
  w.validate();
  if (w.lambda <= 0.0 || cfg.phase2_steps < 1)
    throw std::invalid_argument("finetune: needs lambda > 0 and phase2_steps >= 1");
  TrainResult result =
      run_schedule(cfg, spec, w, load_model(start_checkpoint), /*phase1=*/false);
  result.phase1_checkpoint = start_checkpoint;
  return result;
}

// ---- quality evaluation ----

double corpus_bleu(const std::vector<std::vector<int>>& references,
                   const std::vector<std::vector<int>>& hypotheses) {
  if (references.size() != hypotheses.size())
    throw std::invalid_argument("corpus_bleu: corpus sizes differ");
  if (references.empty()) return 0.0;
  long clipped[4] = {0, 0, 0, 0};
  long totals[4] = {0, 0, 0, 0};
  long ref_len = 0, hyp_len = 0;
  for (size_t i = 0; i < references.size(); ++i) {
    const auto& ref = references[i];
    const auto& hyp = hypotheses[i];
    ref_len += static_cast<long>(ref.size());
    hyp_len += static_cast<long>(hyp.size());
    for (int n = 1; n <= 4; ++n) {
      std::map<std::vector<int>, long> ref_counts;
      for (size_t s = 0; s + n <= ref.size(); ++s)
        ++ref_counts[std::vector<int>(ref.begin() + s, ref.begin() + s + n)];
      for (size_t s = 0; s + n <= hyp.size(); ++s) {
        ++totals[n - 1];
        auto it = ref_counts.find(std::vector<int>(hyp.begin() + s, hyp.begin() + s + n));
        if (it != ref_counts.end() && it->second > 0) {
          ++clipped[n - 1];
          --it->second;
        }
      }
    }
  }
  if (hyp_len == 0) return 0.0;
  double log_p = 0.0;
  for (int n = 0; n < 4; ++n) {
    if (totals[n] == 0 || clipped[n] == 0) return 0.0;  // smoothing-free
    log_p += 0.25 * std::log(static_cast<double>(clipped[n]) / static_cast<double>(totals[n]));
  }
  const double bp =
      hyp_len >= ref_len
          ? 1.0
          : std::exp(1.0 - static_cast<double>(ref_len) / static_cast<double>(hyp_len));
  return 100.0 * bp * std::exp(log_p);
}

double token_accuracy(const std::vector<std::vector<int>>& references,
                      const std::vector<std::vector<int>>& hypotheses) {
  if (references.size() != hypotheses.size())
    throw std::invalid_argument("token_accuracy: corpus sizes differ");
  long matches = 0, total = 0;
  for (size_t i = 0; i < references.size(); ++i) {
    total += static_cast<long>(references[i].size());
    const size_t overlap = std::min(references[i].size(), hypotheses[i].size());
    for (size_t p = 0; p < overlap; ++p)
      if (references[i][p] == hypotheses[i][p]) ++matches;
  }
  return total == 0 ? 0.0 : static_cast<double>(matches) / static_cast<double>(total);
}

QualityReport evaluate_quality(const Model& m, std::span<const PairedExample> test_set,
                               const PolicyConfig& policy) {
  std::vector<std::vector<int>> refs, hyps;
  refs.reserve(test_set.size());
  hyps.reserve(test_set.size());
  for (const PairedExample& ex : test_set) {
    refs.push_back(ex.target);
    hyps.push_back(simulate_decode(m, ex.frames, policy).output);
  }
  return {corpus_bleu(refs, hyps), token_accuracy(refs, hyps)};
}

}  // namespace simul
