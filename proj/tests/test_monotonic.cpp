#include <doctest.h>

#include <cmath>
#include <random>
#include <vector>

#include "simul/monotonic.hpp"
#include "simul/tensor.hpp"
#include "testutil.hpp"

using namespace simul;
using testutil::check_gradients;
using testutil::random_tensor;

namespace {

// Independent oracle: exhaustively enumerates every Bernoulli decision path
// of the exclusive-restart monotonic process (t_0 = 0; step i scans from
// t_{i-1}+1 and writes at the first position whose draw fires; scanning past
// the last position ends the head's participation). Probabilities are
// accumulated per (step, write position) by direct path recursion — no
// cumulative-product algebra shared with the implementation under test.
std::vector<std::vector<double>> enumerate_alignment(const std::vector<std::vector<double>>& p) {
  const int I = static_cast<int>(p.size());
  const int J = static_cast<int>(p[0].size());
  std::vector<std::vector<double>> alpha(static_cast<size_t>(I),
                                         std::vector<double>(static_cast<size_t>(J), 0.0));
  // w = probability of the partial path that brought step i to scan start t_prev+1.
  auto rec = [&](auto&& self, int i, int t_prev, double w) -> void {
    if (i == I) return;
    double survive = w;
    for (int j = t_prev + 1; j <= J; ++j) {
      const double wj = survive * p[static_cast<size_t>(i)][static_cast<size_t>(j - 1)];
      alpha[static_cast<size_t>(i)][static_cast<size_t>(j - 1)] += wj;
      self(self, i + 1, j, wj);
      survive *= 1.0 - p[static_cast<size_t>(i)][static_cast<size_t>(j - 1)];
    }
  };
  rec(rec, 0, 0, 1.0);
  return alpha;
}

std::vector<std::vector<double>> random_p(int I, int J, std::mt19937_64& rng) {
  std::uniform_real_distribution<double> dist(0.01, 0.99);
  std::vector<std::vector<double>> p(static_cast<size_t>(I),
                                     std::vector<double>(static_cast<size_t>(J)));
  for (auto& row : p)
    for (double& v : row) v = dist(rng);
  return p;
}

Tensor to_tensor(const std::vector<std::vector<double>>& p) {
  std::vector<double> flat;
  for (const auto& row : p) flat.insert(flat.end(), row.begin(), row.end());
  return Tensor::from_data(static_cast<int>(p.size()), static_cast<int>(p[0].size()),
                           std::move(flat));
}

}  // namespace

TEST_SUITE("selection probabilities") {
  TEST_CASE("sigmoid values") {
    CHECK(selection_prob(Tensor::scalar(0.0), false).value() == 0.5);
    CHECK(selection_prob(Tensor::scalar(-4.0), false).value() ==
          doctest::Approx(1.0 / (1.0 + std::exp(4.0))).epsilon(1e-14));
  }

  TEST_CASE("training clamp engages only past ~13.8") {
    // sigma(-13) = 2.26e-6 > 1e-6: untouched, bitwise equal to the raw op.
    CHECK(selection_prob(Tensor::scalar(-13.0), true).value() ==
          sigmoid(Tensor::scalar(-13.0)).value());
    CHECK(selection_prob(Tensor::scalar(-14.0), true).value() == 1e-6);
    CHECK(selection_prob(Tensor::scalar(14.0), true).value() == 1.0 - 1e-6);
    CHECK(selection_prob(Tensor::scalar(40.0), false).value() == 1.0);  // unclamped saturates
  }
}

TEST_SUITE("monotonic energies") {
  TEST_CASE("zero query and keys leave only the bias") {
    std::mt19937_64 rng(3);
    MonotonicAttention att = monotonic_attention_init(8, 2, -1.0, rng);
    Tensor s = Tensor::zeros(1, 8);
    Tensor enc = Tensor::zeros(5, 8);
    for (int h = 0; h < 2; ++h) {
      Tensor e = monotonic_energy(att, s, enc, h);
      for (int j = 0; j < 5; ++j) CHECK(e.at(0, j) == -1.0);
    }
    EnergyMatrix em = monotonic_energies(att, Tensor::zeros(3, 8), enc);
    for (const Tensor& e : em.head_e)
      for (long k = 0; k < e.numel(); ++k) CHECK(e.data()[static_cast<size_t>(k)] == -1.0);
  }

  TEST_CASE("energies see only the valid encoder rows") {
    std::mt19937_64 rng(4);
    MonotonicAttention att = monotonic_attention_init(8, 2, -1.0, rng);
    Tensor dec = random_tensor(3, 8, rng);
    Tensor enc = random_tensor(4, 8, rng);
    Tensor garbage = random_tensor(2, 8, rng, 50.0, 60.0);
    std::vector<Tensor> padded_parts{enc, garbage};
    Tensor padded = stack_rows(padded_parts);
    EnergyMatrix a = monotonic_energies(att, dec, enc);
    EnergyMatrix b = monotonic_energies(att, dec, slice_rows(padded, 0, 4));
    for (int h = 0; h < 2; ++h)
      CHECK(testutil::max_abs_diff(a.head_e[h], b.head_e[h]) == 0.0);
  }

  TEST_CASE("single-row energy equals the batch row bitwise") {
    std::mt19937_64 rng(5);
    MonotonicAttention att = monotonic_attention_init(8, 4, -1.0, rng);
    Tensor dec = random_tensor(3, 8, rng);
    Tensor enc = random_tensor(6, 8, rng);
    EnergyMatrix em = monotonic_energies(att, dec, enc);
    for (int h = 0; h < 4; ++h)
      for (int i = 0; i < 3; ++i) {
        Tensor e_row = monotonic_energy(att, slice_rows(dec, i, 1), enc, h);
        for (int j = 0; j < 6; ++j) CHECK(e_row.at(0, j) == em.head_e[h].at(i, j));
      }
  }

  TEST_CASE("invalid head index") {
    std::mt19937_64 rng(6);
    MonotonicAttention att = monotonic_attention_init(8, 2, -1.0, rng);
    CHECK_THROWS_AS(monotonic_energy(att, Tensor::zeros(1, 8), Tensor::zeros(2, 8), 2),
                    std::invalid_argument);
    CHECK_THROWS_AS(monotonic_attention_init(8, 3, -1.0, rng), std::invalid_argument);
  }
}

TEST_SUITE("expected alignment") {
  TEST_CASE("always-write collapses to the diagonal exactly") {
    Tensor p = Tensor::full(4, 4, 1.0);
    std::vector<Tensor> heads{p};
    AlignmentMatrix am = expected_alignment(heads);
    const Tensor& a = am.head_alpha[0];
    for (int i = 0; i < 4; ++i)
      for (int j = 0; j < 4; ++j) {
        if (i == j)
          CHECK(a.at(i, j) == 1.0);
        else
          CHECK(std::abs(a.at(i, j)) <= 1e-30);
      }
    Tensor r = alignment_residual(a);
    for (int i = 0; i < 4; ++i) CHECK(std::abs(r.at(i, 0)) <= 1e-30);
  }

  TEST_CASE("never-write leaves everything residual") {
    Tensor p = Tensor::full(3, 4, kSelectionProbEps);  // clamped zero
    std::vector<Tensor> heads{p};
    AlignmentMatrix am = expected_alignment(heads);
    const Tensor& a = am.head_alpha[0];
    for (long k = 0; k < a.numel(); ++k) CHECK(a.data()[static_cast<size_t>(k)] <= 2e-6);
    Tensor r = alignment_residual(a);
    for (int i = 0; i < 3; ++i) CHECK(r.at(i, 0) >= 1.0 - 1e-5);
  }

  TEST_CASE("matches exhaustive path enumeration") {
    std::mt19937_64 rng(7);
    for (int trial = 0; trial < 25; ++trial) {
      const int I = 1 + static_cast<int>(rng() % 4);
      const int J = 1 + static_cast<int>(rng() % 4);
      auto p = random_p(I, J, rng);
      std::vector<Tensor> heads{to_tensor(p)};
      AlignmentMatrix am = expected_alignment(heads);
      auto oracle = enumerate_alignment(p);
      for (int i = 0; i < I; ++i)
        for (int j = 0; j < J; ++j)
          CHECK(std::abs(am.head_alpha[0].at(i, j) -
                         oracle[static_cast<size_t>(i)][static_cast<size_t>(j)]) <= 1e-9);
    }
  }

  TEST_CASE("alignment invariants on random probabilities") {
    std::mt19937_64 rng(8);
    auto p = random_p(6, 9, rng);
    std::vector<Tensor> heads{to_tensor(p)};
    AlignmentMatrix am = expected_alignment(heads);
    const Tensor& a = am.head_alpha[0];
    Tensor r = alignment_residual(a);
    double prev_expected = 0.0;
    for (int i = 0; i < 6; ++i) {
      double rowsum = 0.0, expected_pos = 0.0;
      for (int j = 0; j < 9; ++j) {
        CHECK(a.at(i, j) >= 0.0);
        rowsum += a.at(i, j);
        expected_pos += (j + 1) * a.at(i, j);
      }
      CHECK(rowsum <= 1.0 + 1e-9);
      CHECK(r.at(i, 0) >= -1e-9);
      CHECK(r.at(i, 0) <= 1.0 + 1e-9);
      expected_pos += 9 * r.at(i, 0);  // residual counted at the last position
      CHECK(expected_pos >= prev_expected - 1e-9);
      prev_expected = expected_pos;
    }
  }

  TEST_CASE("gradient of an alignment functional w.r.t. p") {
    std::mt19937_64 rng(9);
    Tensor p = random_tensor(3, 4, rng, 0.1, 0.9);
    Tensor w = random_tensor(3, 4, rng);
    auto forward = [&] {
      std::vector<Tensor> heads{p};
      AlignmentMatrix am = expected_alignment(heads);
      return sum(mul(am.head_alpha[0], w));
    };
    auto res = check_gradients(forward, {p});
    INFO("worst: ", res.worst);
    CHECK(res.max_err <= 1e-5);
  }
}

TEST_SUITE("monotonic context") {
  TEST_CASE("diagonal alignment mixes each encoder state in place") {
    std::mt19937_64 rng(10);
    MonotonicAttention att = monotonic_attention_init(8, 2, -1.0, rng);
    Tensor enc = random_tensor(4, 8, rng);
    Tensor eye = [&] {
      std::vector<double> d(16, 0.0);
      for (int i = 0; i < 4; ++i) d[static_cast<size_t>(i) * 4 + i] = 1.0;
      return Tensor::from_data(4, 4, std::move(d));
    }();
    AlignmentMatrix am;
    am.head_alpha = {eye, eye};
    Tensor ctx = monotonic_context(att, am, enc);
    Tensor direct = matmul(matmul(enc, att.wv), att.wo);
    CHECK(testutil::max_abs_diff(ctx, direct) <= 1e-12);
  }

  TEST_CASE("all mass on the first position repeats one context row") {
    std::mt19937_64 rng(11);
    MonotonicAttention att = monotonic_attention_init(8, 2, -1.0, rng);
    Tensor enc = random_tensor(5, 8, rng);
    std::vector<double> m(3 * 5, 0.0);
    for (int i = 0; i < 3; ++i) m[static_cast<size_t>(i) * 5] = 1.0;
    Tensor first = Tensor::from_data(3, 5, std::move(m));
    AlignmentMatrix am;
    am.head_alpha = {first, first};
    Tensor ctx = monotonic_context(att, am, enc);
    for (int i = 1; i < 3; ++i)
      for (int c = 0; c < 8; ++c) CHECK(ctx.at(i, c) == ctx.at(0, c));
  }

  TEST_CASE("gradient reaches both the alignment path and the encoder path") {
    std::mt19937_64 rng(12);
    MonotonicAttention att = monotonic_attention_init(8, 2, -1.0, rng);
    Tensor p = random_tensor(3, 4, rng, 0.1, 0.9);
    Tensor enc = random_tensor(4, 8, rng);
    Tensor w = random_tensor(3, 8, rng);
    auto forward = [&] {
      std::vector<Tensor> heads{p, p};
      AlignmentMatrix am = expected_alignment(heads);
      return sum(mul(monotonic_context(att, am, enc), w));
    };
    auto res = check_gradients(forward, {p, enc});
    INFO("worst: ", res.worst);
    CHECK(res.max_err <= 1e-5);
  }
}

TEST_SUITE("full chain and decisions") {
  TEST_CASE("finite differences through energy, p, alignment, and context") {
    std::mt19937_64 rng(13);
    MonotonicAttention att = monotonic_attention_init(8, 2, -1.0, rng);
    Tensor dec = random_tensor(3, 8, rng);
    Tensor enc = random_tensor(4, 8, rng);
    Tensor w = random_tensor(3, 8, rng);
    auto forward = [&] {
      EnergyMatrix em = monotonic_energies(att, dec, enc);
      std::vector<Tensor> head_p;
      for (const Tensor& e : em.head_e) head_p.push_back(selection_prob(e));
      AlignmentMatrix am = expected_alignment(head_p);
      return sum(mul(monotonic_context(att, am, enc), w));
    };
    auto res = check_gradients(forward, {att.wq, att.wk, att.wv, att.wo, att.bias, dec, enc},
                               {"wq", "wk", "wv", "wo", "bias", "dec", "enc"});
    INFO("worst: ", res.worst);
    CHECK(res.max_err <= 1e-5);
  }

  TEST_CASE("threshold rule") {
    PolicyConfig cfg;
    CHECK(infer_decide(0.7, cfg) == Decision::Write);
    CHECK(infer_decide(0.3, cfg) == Decision::Read);
    CHECK(infer_decide(0.5, cfg) == Decision::Write);  // ties write
  }

  TEST_CASE("trace serializes with pinned keys") {
    DecisionTrace tr;
    tr.events = {{Decision::Read, 4}, {Decision::Write, 7}};
    tr.delays = {4};
    tr.output = {7};
    const std::string js = tr.to_json();
    CHECK(js.find("\"events\"") != std::string::npos);
    CHECK(js.find("\"delays\"") != std::string::npos);
    CHECK(js.find("\"output\"") != std::string::npos);
    CHECK(js.find("\"read\"") != std::string::npos);
    CHECK(js.find("\"write\"") != std::string::npos);
  }
}
