#include "xfer/synthgen.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>

#include <nlohmann/json.hpp>

namespace xfer {

std::vector<double> UnigramDist::probs() const {
  const double total = std::accumulate(weights.begin(), weights.end(), 0.0);
  if (total <= 0.0) {
    throw ValidationError("UnigramDist: all weights are zero");
  }
  std::vector<double> p(weights.size());
  for (std::size_t i = 0; i < weights.size(); ++i) p[i] = weights[i] / total;
  return p;
}

void UnigramDist::ensure_cdf() const {
  if (!cdf_.empty()) return;
  cdf_.resize(weights.size());
  double acc = 0.0;
  for (std::size_t i = 0; i < weights.size(); ++i) {
    if (weights[i] < 0.0) {
      throw ValidationError("UnigramDist: negative weight");
    }
    acc += weights[i];
    cdf_[i] = acc;
  }
  if (acc <= 0.0) {
    throw ValidationError("UnigramDist: all weights are zero");
  }
}

TokenId UnigramDist::sample(Rng& rng) const {
  ensure_cdf();
  const double u = rng.uniform() * cdf_.back();
  const auto it = std::upper_bound(cdf_.begin(), cdf_.end(), u);
  return static_cast<TokenId>(std::min<std::ptrdiff_t>(
      it - cdf_.begin(), static_cast<std::ptrdiff_t>(cdf_.size()) - 1));
}

double zm_weight(TokenId rank, const ZipfMandelbrotParams& params) {
  if (rank < 1 || rank > params.vocab_size) {
    throw ValidationError("zm_weight: rank " + std::to_string(rank) +
                          " outside [1, " + std::to_string(params.vocab_size) +
                          "]");
  }
  return std::pow(static_cast<double>(rank) + params.beta, -params.alpha);
}

UnigramDist zm_dist(const ZipfMandelbrotParams& params) {
  if (params.alpha <= 0.0 || params.beta <= -1.0 || params.vocab_size < 1) {
    throw ValidationError("zm_dist: invalid parameters");
  }
  UnigramDist d;
  d.weights.resize(params.vocab_size);
  double total = 0.0;
  for (TokenId r = 1; r <= params.vocab_size; ++r) {
    total += (d.weights[r - 1] = zm_weight(r, params));
  }
  for (double& w : d.weights) w /= total;
  return d;
}

UnigramDist unigram_from_corpus(const Corpus& corpus) {
  const TokenId vocab = infer_vocab(corpus);
  UnigramDist d;
  d.weights.assign(vocab, 0.0);
  std::size_t total = 0;
  for (const auto& seq : corpus.sequences) {
    for (TokenId t : seq) ++d.weights[t];
    total += seq.size();
  }
  for (double& w : d.weights) w /= static_cast<double>(total);
  return d;
}

namespace {

// Per-sequence stream seed: the sequence index mixed into the corpus seed,
// so distinct sequences can be generated independently.
std::uint64_t sequence_seed(std::uint64_t seed, std::size_t index) {
  return splitmix64(seed ^ splitmix64(static_cast<std::uint64_t>(index)));
}

TokenSequence gen_paren_sequence(const ParenSpec& spec, Rng& rng) {
  // Drawn uniformly in [min_len, max_len], rounded down to even so the
  // sequence can close exactly on target.
  long target_len =
      spec.min_len +
      static_cast<long>(rng.uniform_int(
          static_cast<std::uint64_t>(spec.max_len - spec.min_len + 1)));
  target_len &= ~1L;
  TokenSequence seq;
  seq.reserve(target_len);
  std::vector<TokenId> stack;
  while (static_cast<long>(seq.size()) < target_len) {
    const long remaining = target_len - static_cast<long>(seq.size());
    const bool must_open = stack.empty();
    // Opening costs one token now plus one close later; never open past
    // the point where the stack could no longer drain in time.
    const bool may_open =
        static_cast<int>(stack.size()) < spec.max_depth &&
        remaining >= static_cast<long>(stack.size()) + 2;
    if (must_open || (may_open && rng.uniform() < spec.open_prob)) {
      const TokenId w = spec.dist.sample(rng);
      stack.push_back(w);
      seq.push_back(2 * w);
    } else {
      const TokenId w = stack.back();
      stack.pop_back();
      seq.push_back(2 * w + 1);
    }
  }
  return seq;
}

}  // namespace

Corpus gen_paren_corpus(const ParenSpec& spec, std::size_t total_tokens,
                        std::uint64_t seed) {
  if (spec.open_prob <= 0.0 || spec.open_prob >= 1.0) {
    throw ValidationError("gen_paren_corpus: open_prob must be in (0, 1)");
  }
  if (spec.max_depth < 1 || spec.min_len < 2 ||
      spec.max_len < spec.min_len || spec.dist.size() == 0) {
    throw ValidationError("gen_paren_corpus: invalid spec");
  }
  if (total_tokens < static_cast<std::size_t>(spec.min_len)) {
    throw ValidationError(
        "gen_paren_corpus: total_tokens below minimum sequence length");
  }
  Corpus c;
  c.vocab_size = static_cast<TokenId>(2 * spec.dist.size());
  std::size_t total = 0;
  for (std::size_t index = 0; total < total_tokens; ++index) {
    Rng rng(sequence_seed(seed, index));
    c.sequences.push_back(gen_paren_sequence(spec, rng));
    total += c.sequences.back().size();
  }
  return c;
}

Corpus gen_random_corpus(TokenId vocab_size, std::size_t total_tokens,
                         long seq_len, std::uint64_t seed) {
  if (vocab_size < 1) {
    throw ValidationError("gen_random_corpus: vocab_size must be >= 1");
  }
  if (seq_len < 1) {
    throw ValidationError("gen_random_corpus: seq_len must be >= 1");
  }
  if (total_tokens < 1) {
    throw ValidationError("gen_random_corpus: total_tokens must be >= 1");
  }
  Corpus c;
  c.vocab_size = vocab_size;
  std::size_t total = 0;
  for (std::size_t index = 0; total < total_tokens; ++index) {
    Rng rng(sequence_seed(seed, index));
    const std::size_t len = std::min<std::size_t>(
        static_cast<std::size_t>(seq_len), total_tokens - total);
    TokenSequence seq(len);
    for (auto& t : seq) {
      t = static_cast<TokenId>(
          rng.uniform_int(static_cast<std::uint64_t>(vocab_size)));
    }
    c.sequences.push_back(std::move(seq));
    total += len;
  }
  return c;
}

void write_generator_metadata(const std::filesystem::path& path,
                              const std::string& generator,
                              const std::string& params_json,
                              std::uint64_t seed, std::size_t total_tokens) {
  nlohmann::json j;
  j["generator"] = generator;
  j["params"] = nlohmann::json::parse(params_json);
  j["seed"] = seed;
  j["rng"] = std::string(Rng::kAlgorithmId);
  j["total_tokens"] = total_tokens;
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out << j.dump(2) << "\n";
}

}  // namespace xfer
