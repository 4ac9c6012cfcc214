#include <doctest.h>

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <random>
#include <stdexcept>
#include <vector>

#include "simul/model.hpp"
#include "testutil.hpp"

using namespace simul;
using testutil::max_abs_diff;

namespace {

Tensor random_frames(int t, int feat, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  return Tensor::randn(t, feat, rng);
}

// Forces every monotonic head toward write (bias >> 0) or read (bias << 0).
void set_cross_bias(Model& m, double value) {
  for (DecoderLayer& layer : m.dec_layers)
    for (double& b : layer.cross.bias.mutable_data()) b = value;
}

// Pins the EOS logit so greedy emission can never (or always) terminate.
void set_eos_logit_bias(Model& m, double value) {
  m.out_proj.b.mutable_data()[kEosId] = value;
}

int read_frames_total(const DecisionTrace& trace) {
  int total = 0;
  for (const TraceEvent& ev : trace.events)
    if (ev.type == Decision::Read) total += ev.arg;
  return total;
}

int write_count(const DecisionTrace& trace) {
  int count = 0;
  for (const TraceEvent& ev : trace.events)
    if (ev.type == Decision::Write) ++count;
  return count;
}

}  // namespace

TEST_SUITE("encoder geometry") {
  TEST_CASE("conv stack downsamples frames by four, rounding up") {
    Model m = model_init(ModelConfig{}, 1);
    CHECK(encode_speech(m, random_frames(8, 8, 2)).h.rows() == 2);
    CHECK(encode_speech(m, random_frames(9, 8, 2)).h.rows() == 3);
    CHECK(encode_speech(m, random_frames(16, 8, 2)).h.rows() == 4);
    CHECK(encode_speech(m, random_frames(1, 8, 2)).h.rows() == 1);
    EncoderOutput enc = encode_speech(m, random_frames(10, 8, 3));
    CHECK(enc.valid_len == enc.h.rows());
    CHECK(enc.h.cols() == m.cfg.embed_dim);
  }

  TEST_CASE("text encoding keeps one state per token") {
    Model m = model_init(ModelConfig{}, 1);
    CHECK(encode_text(m, {5}).h.rows() == 1);
    CHECK(encode_text(m, {5, 6, 7}).h.rows() == 3);
  }

  TEST_CASE("malformed inputs are rejected") {
    Model m = model_init(ModelConfig{}, 1);
    CHECK_THROWS_AS((void)encode_speech(m, random_frames(4, 5, 2)), std::invalid_argument);
    CHECK_THROWS_AS((void)encode_text(m, {}), std::invalid_argument);
    CHECK_THROWS_AS((void)encode_text(m, {99}), std::invalid_argument);
    CHECK_THROWS_AS((void)encode_text(m, {-1}), std::invalid_argument);
    ModelConfig bad;
    bad.embed_dim = 30;  // not divisible by 4 heads
    CHECK_THROWS_AS((void)model_init(bad, 1), std::invalid_argument);
  }

  TEST_CASE("causal encoders: prefix states are stable under extension") {
    Model m = model_init(ModelConfig{}, 4);
    Tensor frames = random_frames(16, 8, 5);

    EncoderOutput full = encode_speech(m, frames);
    EncoderOutput pref = encode_speech(m, slice_rows(frames, 0, 9));
    REQUIRE(pref.h.rows() == 3);
    CHECK(max_abs_diff(pref.h, slice_rows(full.h, 0, 3)) == 0.0);

    std::vector<int> tokens{5, 9, 2, 7, 11};
    EncoderOutput tfull = encode_text(m, tokens);
    EncoderOutput tpref = encode_text(m, {5, 9});
    CHECK(max_abs_diff(tpref.h, slice_rows(tfull.h, 0, 2)) == 0.0);
  }
}

TEST_SUITE("branch sharing") {
  TEST_CASE("upper encoder layers are shared between branches; lower conv stack is not") {
    // Two identically seeded models, so single-parameter surgery on one is
    // the only difference.
    Model a = model_init(ModelConfig{}, 11);
    Model b = model_init(ModelConfig{}, 11);
    std::vector<int> tokens{3, 8, 5};
    Tensor frames = random_frames(8, 8, 12);
    CHECK(max_abs_diff(encode_text(a, tokens).h, encode_text(b, tokens).h) == 0.0);

    // Perturbing a shared layer moves both branches.
    b.shared_layers[0].attn.wq.mutable_data()[0] += 0.5;
    CHECK(max_abs_diff(encode_text(a, tokens).h, encode_text(b, tokens).h) > 0.0);
    CHECK(max_abs_diff(encode_speech(a, frames).h, encode_speech(b, frames).h) > 0.0);

    // Perturbing a private speech layer leaves the text branch untouched.
    Model c = model_init(ModelConfig{}, 11);
    c.speech_layers[0].attn.wq.mutable_data()[0] += 0.5;
    CHECK(max_abs_diff(encode_text(a, tokens).h, encode_text(c, tokens).h) == 0.0);
    CHECK(max_abs_diff(encode_speech(a, frames).h, encode_speech(c, frames).h) > 0.0);
  }

  TEST_CASE("parameter list covers the model once, with unique names") {
    Model m = model_init(ModelConfig{}, 1);
    ParamList params = model_params(m);
    std::vector<std::string> names;
    for (const auto& [name, t] : params) {
      names.push_back(name);
      CHECK(t.rows() >= 1);
      CHECK(t.cols() >= 1);
    }
    std::sort(names.begin(), names.end());
    CHECK(std::adjacent_find(names.begin(), names.end()) == names.end());
    // Listed tensors alias model storage (they are the trainable state).
    ParamList again = model_params(m);
    again[0].second.mutable_data()[0] = 123.25;
    CHECK(m.src_embed.at(0, 0) == 123.25);
  }
}

TEST_SUITE("teacher forcing and incremental decoding") {
  TEST_CASE("teacher-forced pass: shapes and normalized next-token distributions") {
    Model m = model_init(ModelConfig{}, 21);
    EncoderOutput enc = encode_speech(m, random_frames(12, 8, 22));
    std::vector<int> target{4, 9, 17, 6};
    BranchForward bf = decode_teacher_forced(m, target, enc);

    CHECK(bf.logits.rows() == 5);  // BOS + 4 target rows
    CHECK(bf.logits.cols() == m.cfg.vocab_tgt);
    REQUIRE(bf.energies.size() == m.dec_layers.size());
    REQUIRE(bf.alignments.size() == m.dec_layers.size());
    for (size_t l = 0; l < bf.energies.size(); ++l) {
      REQUIRE(bf.energies[l].heads() == m.cfg.heads);
      REQUIRE(bf.alignments[l].heads() == m.cfg.heads);
      CHECK(bf.energies[l].head_e[0].rows() == 5);
      CHECK(bf.energies[l].head_e[0].cols() == enc.h.rows());
      CHECK(bf.alignments[l].head_alpha[0].rows() == 5);
    }
    CHECK(bf.nll.numel() == 1);
    CHECK(std::isfinite(bf.nll.value()));

    Tensor probs = softmax(bf.logits, /*axis=*/1);
    Tensor row_sums = sum_axis(probs, /*axis=*/1);
    for (int i = 0; i < row_sums.rows(); ++i)
      CHECK(std::abs(row_sums.at(i, 0) - 1.0) <= 1e-9);
  }

  TEST_CASE("incremental decoding reproduces the teacher-forced rows bitwise") {
    Model m = model_init(ModelConfig{}, 23);
    EncoderOutput enc = encode_speech(m, random_frames(15, 8, 24));
    std::vector<int> target{7, 3, 30, 12, 5};
    BranchForward bf = decode_teacher_forced(m, target, enc);

    DecodeSession session(m, enc, 16);
    std::vector<int> input{kBosId};
    input.insert(input.end(), target.begin(), target.end());
    for (size_t i = 0; i < input.size(); ++i) {
      Tensor row = session.step(input[i]);
      CHECK(max_abs_diff(row, slice_rows(bf.logits, static_cast<int>(i), 1)) == 0.0);
    }
    CHECK(session.fed() == 6);
  }

  TEST_CASE("decode session refuses tokens past its cap") {
    Model m = model_init(ModelConfig{}, 23);
    EncoderOutput enc = encode_speech(m, random_frames(8, 8, 24));
    DecodeSession session(m, enc, 2);
    (void)session.step(kBosId);
    (void)session.step(4);
    CHECK_THROWS_AS((void)session.step(5), std::logic_error);
  }

  TEST_CASE("evaluation passes are deterministic; training passes repeat under a fixed seed") {
    Model m = model_init(ModelConfig{}, 25);
    EncoderOutput enc = encode_speech(m, random_frames(10, 8, 26));
    std::vector<int> target{4, 5, 6};
    BranchForward a = decode_teacher_forced(m, target, enc);
    BranchForward b = decode_teacher_forced(m, target, enc);
    CHECK(max_abs_diff(a.logits, b.logits) == 0.0);
    CHECK(a.nll.value() == b.nll.value());

    std::mt19937_64 r1(7), r2(7);
    Tensor frames = random_frames(10, 8, 26);
    EncoderOutput e1 = encode_speech(m, frames, /*training=*/true, &r1);
    EncoderOutput e2 = encode_speech(m, frames, /*training=*/true, &r2);
    CHECK(max_abs_diff(e1.h, e2.h) == 0.0);

    std::vector<int> g1 = greedy_decode(m, enc, 12);
    std::vector<int> g2 = greedy_decode(m, enc, 12);
    CHECK(g1 == g2);
    CHECK(static_cast<int>(g1.size()) <= 12);
    for (int tok : g1) CHECK(tok != kEosId);
  }
}

TEST_SUITE("checkpoints") {
  TEST_CASE("save then load round-trips every parameter bitwise") {
    const std::string path =
        (std::filesystem::temp_directory_path() / "simul_model_ckpt_test.json").string();
    Model m = model_init(ModelConfig{}, 31);
    save_model(m, path);
    Model r = load_model(path);

    ParamList pm = model_params(m);
    ParamList pr = model_params(r);
    REQUIRE(pm.size() == pr.size());
    for (size_t i = 0; i < pm.size(); ++i) {
      CHECK(pm[i].first == pr[i].first);
      CHECK(max_abs_diff(pm[i].second, pr[i].second) == 0.0);
    }

    Tensor frames = random_frames(9, 8, 32);
    BranchForward fm = decode_teacher_forced(m, {4, 8}, encode_speech(m, frames));
    BranchForward fr = decode_teacher_forced(r, {4, 8}, encode_speech(r, frames));
    CHECK(fm.nll.value() == fr.nll.value());
    std::filesystem::remove(path);
  }

  TEST_CASE("loading a missing or truncated checkpoint fails loudly") {
    CHECK_THROWS_AS((void)load_model("/nonexistent/simul_ckpt.json"), std::runtime_error);
    const std::string path =
        (std::filesystem::temp_directory_path() / "simul_model_ckpt_bad.json").string();
    {
      std::FILE* f = std::fopen(path.c_str(), "w");
      REQUIRE(f != nullptr);
      std::fputs("{\"config\":", f);
      std::fclose(f);
    }
    CHECK_THROWS((void)load_model(path));
    std::filesystem::remove(path);
  }
}

TEST_SUITE("streaming encoder") {
  TEST_CASE("incremental and reencode modes both match the offline encoder bitwise") {
    Model m = model_init(ModelConfig{}, 41);
    Tensor frames = random_frames(13, 8, 42);
    StreamingEncoder inc(m, /*reencode_prefix=*/false);
    StreamingEncoder re(m, /*reencode_prefix=*/true);

    const int feeds[] = {4, 1, 5, 3};
    int fed = 0;
    for (int take : feeds) {
      Tensor chunk = slice_rows(frames, fed, take);
      inc.feed(chunk);
      re.feed(chunk);
      fed += take;
      EncoderOutput offline = encode_speech(m, slice_rows(frames, 0, fed));
      CHECK(inc.frames_fed() == fed);
      CHECK(inc.output().valid_len == offline.valid_len);
      CHECK(max_abs_diff(inc.output().h, offline.h) == 0.0);
      CHECK(max_abs_diff(re.output().h, offline.h) == 0.0);
    }
    CHECK(inc.output().h.rows() == 4);  // ceil(13 / 4)
    CHECK_THROWS_AS(inc.feed(random_frames(2, 3, 43)), std::invalid_argument);
  }
}

TEST_SUITE("streamed decoding") {
  TEST_CASE("an always-write policy emits one token per encoder position") {
    Model m = model_init(ModelConfig{}, 51);
    set_cross_bias(m, 50.0);
    set_eos_logit_bias(m, -1e9);  // run to the emission cap
    PolicyConfig cfg;
    DecisionTrace trace = simulate_decode(m, random_frames(16, 8, 52), cfg);

    // Cap: twice the encoder length (4 positions).
    REQUIRE(trace.output.size() == 8);
    std::vector<int> want{4, 8, 12, 16, 16, 16, 16, 16};
    CHECK(trace.delays == want);
    CHECK(write_count(trace) == 8);
    CHECK(read_frames_total(trace) == 16);
    REQUIRE(trace.head_positions.size() == 8);
    for (size_t i = 0; i < trace.head_positions.size(); ++i) {
      REQUIRE(trace.head_positions[i].size() ==
              m.dec_layers.size() * static_cast<size_t>(m.cfg.heads));
      for (int t : trace.head_positions[i])
        CHECK(t == std::min(static_cast<int>(i) + 1, 4));
    }
  }

  TEST_CASE("an always-read policy drains the source before writing") {
    Model m = model_init(ModelConfig{}, 53);
    set_cross_bias(m, -50.0);
    set_eos_logit_bias(m, -1e9);
    PolicyConfig cfg;
    DecisionTrace trace = simulate_decode(m, random_frames(16, 8, 54), cfg);

    REQUIRE(trace.output.size() == 8);
    for (int d : trace.delays) CHECK(d == 16);
    CHECK(read_frames_total(trace) == 16);
    for (const auto& positions : trace.head_positions)
      for (int t : positions) CHECK(t == 4);
  }

  TEST_CASE("a one-frame source still decodes") {
    Model m = model_init(ModelConfig{}, 55);
    set_cross_bias(m, 50.0);
    set_eos_logit_bias(m, -1e9);
    PolicyConfig cfg;
    DecisionTrace trace = simulate_decode(m, random_frames(1, 8, 56), cfg);
    REQUIRE(trace.output.size() == 2);  // cap = 2 * 1 position
    CHECK(trace.delays == std::vector<int>{1, 1});
    REQUIRE(trace.events.size() >= 1);
    CHECK(trace.events[0].type == Decision::Read);
    CHECK(trace.events[0].arg == 1);
  }

  TEST_CASE("an immediate end-of-sequence terminates without recording a write") {
    Model m = model_init(ModelConfig{}, 57);
    set_eos_logit_bias(m, 1e9);
    PolicyConfig cfg;
    DecisionTrace trace = simulate_decode(m, random_frames(12, 8, 58), cfg);
    CHECK(trace.output.empty());
    CHECK(trace.delays.empty());
    CHECK(write_count(trace) == 0);
    REQUIRE(!trace.events.empty());  // it still had to read before deciding
    CHECK(trace.events[0].type == Decision::Read);
  }

  TEST_CASE("trace invariants hold for an untouched random model") {
    Model m = model_init(ModelConfig{}, 61);
    set_eos_logit_bias(m, -1e9);
    PolicyConfig cfg;
    cfg.step_frames = 3;
    DecisionTrace trace = simulate_decode(m, random_frames(11, 8, 62), cfg);

    CHECK(static_cast<size_t>(write_count(trace)) == trace.output.size());
    CHECK(trace.delays.size() == trace.output.size());
    CHECK(read_frames_total(trace) <= 11);
    for (size_t i = 1; i < trace.delays.size(); ++i)
      CHECK(trace.delays[i] >= trace.delays[i - 1]);
    const int positions = (11 + 3) / 4;
    for (size_t i = 0; i < trace.head_positions.size(); ++i) {
      for (size_t k = 0; k < trace.head_positions[i].size(); ++k) {
        const int t = trace.head_positions[i][k];
        CHECK(t >= 1);
        CHECK(t <= positions);
        // A write never lands past what the head had read at that point.
        CHECK(t <= (trace.delays[i] + 3) / 4);
        if (i > 0) CHECK(t >= trace.head_positions[i - 1][k]);
      }
    }
  }

  TEST_CASE("incremental and reencode streaming produce identical traces") {
    Model m = model_init(ModelConfig{}, 63);
    set_eos_logit_bias(m, -1e9);
    Tensor frames = random_frames(11, 8, 64);
    PolicyConfig a;
    a.step_frames = 3;
    PolicyConfig b = a;
    b.reencode_prefix = true;
    DecisionTrace ta = simulate_decode(m, frames, a);
    DecisionTrace tb = simulate_decode(m, frames, b);
    CHECK(ta.output == tb.output);
    CHECK(ta.delays == tb.delays);
    CHECK(ta.head_positions == tb.head_positions);
    REQUIRE(ta.events.size() == tb.events.size());
    for (size_t i = 0; i < ta.events.size(); ++i) {
      CHECK(ta.events[i].type == tb.events[i].type);
      CHECK(ta.events[i].arg == tb.events[i].arg);
    }
  }

  TEST_CASE("sampled decoding is reproducible under a fixed seed") {
    Model m = model_init(ModelConfig{}, 65);
    set_eos_logit_bias(m, -1e9);
    Tensor frames = random_frames(14, 8, 66);
    PolicyConfig cfg;
    cfg.sample = true;
    cfg.sample_seed = 42;
    DecisionTrace ta = simulate_decode(m, frames, cfg);
    DecisionTrace tb = simulate_decode(m, frames, cfg);
    CHECK(ta.output == tb.output);
    CHECK(ta.delays == tb.delays);
    CHECK(ta.head_positions == tb.head_positions);
  }

  TEST_CASE("bad policy settings are rejected") {
    Model m = model_init(ModelConfig{}, 67);
    Tensor frames = random_frames(4, 8, 68);
    PolicyConfig cfg;
    cfg.step_frames = 0;
    CHECK_THROWS_AS((void)simulate_decode(m, frames, cfg), std::invalid_argument);
    PolicyConfig cfg2;
    cfg2.decision_threshold = 1.5;
    CHECK_THROWS_AS((void)simulate_decode(m, frames, cfg2), std::invalid_argument);
  }
}
