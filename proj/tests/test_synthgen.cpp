#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <cmath>
#include <map>
#include <numeric>
#include <vector>

#include "xfer/synthgen.hpp"

using namespace xfer;

namespace {

bool is_balanced(const TokenSequence& seq) {
  std::vector<TokenId> stack;
  for (TokenId t : seq) {
    if (t % 2 == 0) {
      stack.push_back(t / 2);
    } else {
      if (stack.empty() || stack.back() != t / 2) return false;
      stack.pop_back();
    }
  }
  return stack.empty();
}

std::vector<double> empirical_probs(const Corpus& c, TokenId vocab) {
  std::vector<double> counts(vocab, 0.0);
  double total = 0.0;
  for (const auto& seq : c.sequences) {
    for (TokenId t : seq) {
      counts[t] += 1.0;
      total += 1.0;
    }
  }
  for (auto& x : counts) x /= total;
  return counts;
}

}  // namespace

TEST_CASE("zm_weight closed-form anchors") {
  ZipfMandelbrotParams p;
  p.vocab_size = 100;
  CHECK(zm_weight(1, p) == doctest::Approx(1.0 / 3.7).epsilon(1e-13));
  CHECK(zm_weight(2, p) == doctest::Approx(1.0 / 4.7).epsilon(1e-13));
  CHECK(std::abs(zm_weight(1, p) - 1.0 / 3.7) < 1e-12);

  ZipfMandelbrotParams q{2.0, 0.0, 10};
  CHECK(zm_weight(3, q) == doctest::Approx(1.0 / 9.0).epsilon(1e-13));

  CHECK_THROWS_AS(zm_weight(0, p), ValidationError);
  CHECK_THROWS_AS(zm_weight(101, p), ValidationError);
}

TEST_CASE("zm_dist weights are monotone decreasing and complete") {
  ZipfMandelbrotParams p;
  p.vocab_size = 50;
  UnigramDist d = zm_dist(p);
  REQUIRE(d.size() == 50u);
  for (std::size_t i = 0; i + 1 < d.size(); ++i) {
    CHECK(d.weights[i] > d.weights[i + 1]);
  }
  auto probs = d.probs();
  double sum = std::accumulate(probs.begin(), probs.end(), 0.0);
  CHECK(sum == doctest::Approx(1.0).epsilon(1e-12));
}

TEST_CASE("UnigramDist sampling converges to its probabilities") {
  UnigramDist d;
  d.weights = {6.0, 3.0, 1.0};
  Rng rng(99);
  std::vector<long> counts(3, 0);
  const long n = 200000;
  for (long i = 0; i < n; ++i) ++counts[d.sample(rng)];
  CHECK(counts[0] / double(n) == doctest::Approx(0.6).epsilon(0.02));
  CHECK(counts[1] / double(n) == doctest::Approx(0.3).epsilon(0.02));
  CHECK(counts[2] / double(n) == doctest::Approx(0.1).epsilon(0.05));
}

TEST_CASE("unigram_from_corpus counts frequencies by id") {
  Corpus c;
  c.sequences = {{0, 0, 2}, {2, 2, 1}};
  c.vocab_size = 3;
  UnigramDist d = unigram_from_corpus(c);
  REQUIRE(d.size() == 3u);
  auto p = d.probs();
  CHECK(p[0] == doctest::Approx(2.0 / 6.0));
  CHECK(p[1] == doctest::Approx(1.0 / 6.0));
  CHECK(p[2] == doctest::Approx(3.0 / 6.0));
}

TEST_CASE("paren corpus is balanced, in range, and deterministic") {
  ParenSpec spec;
  spec.dist = zm_dist({1.0, 2.7, 64});
  Corpus c = gen_paren_corpus(spec, 50000, 123);
  CHECK(c.total_tokens() >= 50000u);
  CHECK(c.vocab_size == 128);
  for (const auto& seq : c.sequences) {
    CHECK(is_balanced(seq));
    CHECK(static_cast<long>(seq.size()) >= spec.min_len);
    CHECK(static_cast<long>(seq.size()) <= spec.max_len);
    CHECK(seq.size() % 2 == 0);
    for (TokenId t : seq) {
      CHECK(t >= 0);
      CHECK(t < 128);
    }
  }
  Corpus again = gen_paren_corpus(spec, 50000, 123);
  CHECK(again.sequences == c.sequences);
  Corpus other = gen_paren_corpus(spec, 50000, 124);
  CHECK(other.sequences != c.sequences);
}

TEST_CASE("paren nesting depth respects the cap") {
  ParenSpec spec;
  spec.dist = zm_dist({1.0, 2.7, 8});
  spec.max_depth = 3;
  spec.open_prob = 0.9;  // push hard against the cap
  Corpus c = gen_paren_corpus(spec, 20000, 7);
  int max_depth_seen = 0;
  for (const auto& seq : c.sequences) {
    int depth = 0;
    for (TokenId t : seq) {
      depth += (t % 2 == 0) ? 1 : -1;
      max_depth_seen = std::max(max_depth_seen, depth);
      CHECK(depth <= 3);
      CHECK(depth >= 0);
    }
  }
  CHECK(max_depth_seen == 3);
}

TEST_CASE("paren spec validation") {
  ParenSpec spec;
  spec.dist = zm_dist({1.0, 2.7, 4});
  spec.open_prob = 1.5;
  CHECK_THROWS_AS(gen_paren_corpus(spec, 100, 0), ValidationError);
  spec.open_prob = 0.4;
  spec.min_len = 10;
  spec.max_len = 5;
  CHECK_THROWS_AS(gen_paren_corpus(spec, 100, 0), ValidationError);
  spec.max_len = 10;
  spec.max_depth = 0;
  CHECK_THROWS_AS(gen_paren_corpus(spec, 100, 0), ValidationError);
}

TEST_CASE("random corpus hits its budget exactly and is near-uniform") {
  Corpus c = gen_random_corpus(100, 1'000'000, 256, 2024);
  CHECK(c.total_tokens() == 1'000'000u);
  CHECK(c.vocab_size == 100);
  for (std::size_t i = 0; i + 1 < c.sequences.size(); ++i) {
    CHECK(c.sequences[i].size() == 256u);
  }

  // KL(empirical || uniform) < 0.01 at 1M tokens.
  auto p = empirical_probs(c, 100);
  double kl = 0.0;
  for (double pi : p) {
    REQUIRE(pi > 0.0);
    kl += pi * std::log(pi * 100.0);
  }
  CHECK(kl < 0.01);

  // Chi-square goodness of fit, df = 99, alpha = 0.001: critical 148.23.
  double chi2 = 0.0;
  const double expected = 1'000'000.0 / 100.0;
  for (double pi : p) {
    const double obs = pi * 1'000'000.0;
    chi2 += (obs - expected) * (obs - expected) / expected;
  }
  CHECK(chi2 < 148.23);

  Corpus again = gen_random_corpus(100, 1'000'000, 256, 2024);
  CHECK(again.sequences == c.sequences);
}

TEST_CASE("random corpus partial final sequence") {
  Corpus c = gen_random_corpus(10, 103, 50, 1);
  REQUIRE(c.sequences.size() == 3);
  CHECK(c.sequences[0].size() == 50u);
  CHECK(c.sequences[1].size() == 50u);
  CHECK(c.sequences[2].size() == 3u);
  CHECK_THROWS_AS(gen_random_corpus(0, 100, 50, 1), ValidationError);
  CHECK_THROWS_AS(gen_random_corpus(10, 0, 50, 1), ValidationError);
  CHECK_THROWS_AS(gen_random_corpus(10, 100, 0, 1), ValidationError);
}

TEST_CASE("paren word marginals track the sampling distribution") {
  // With ZM over 32 words, open/close pairs of word w each occur with the
  // word's probability, so token 2w and 2w+1 marginals are p_w / 2.
  ParenSpec spec;
  spec.dist = zm_dist({1.0, 2.7, 32});
  Corpus c = gen_paren_corpus(spec, 400000, 9);
  auto emp = empirical_probs(c, 64);
  auto probs = spec.dist.probs();
  for (TokenId w = 0; w < 8; ++w) {
    CHECK(emp[2 * w] == doctest::Approx(probs[w] / 2.0).epsilon(0.08));
    CHECK(emp[2 * w + 1] == doctest::Approx(probs[w] / 2.0).epsilon(0.08));
  }
}
