#pragma once

#include <cstdint>
#include <filesystem>
#include <vector>

#include "xfer/corpus.hpp"
#include "xfer/rng.hpp"

namespace xfer {

struct ZipfMandelbrotParams {
  double alpha = 1.0;
  double beta = 2.7;
  TokenId vocab_size = 0;
};

// Unigram distribution over token IDs 0..n-1.
struct UnigramDist {
  std::vector<double> weights;

  std::size_t size() const { return weights.size(); }
  std::vector<double> probs() const;
  // Weighted draw by inverse-CDF on the cumulative weights.
  TokenId sample(Rng& rng) const;

 private:
  mutable std::vector<double> cdf_;
  void ensure_cdf() const;
};

// Non-normalized Zipf-Mandelbrot weight (rank + beta)^(-alpha), rank 1-based.
double zm_weight(TokenId rank, const ZipfMandelbrotParams& params);

UnigramDist zm_dist(const ZipfMandelbrotParams& params);

// Empirical token frequencies, indexed by token ID.
UnigramDist unigram_from_corpus(const Corpus& corpus);

struct ParenSpec {
  UnigramDist dist;
  double open_prob = 0.4;
  int max_depth = 16;
  long min_len = 64;
  long max_len = 512;
};

// Hierarchically balanced bracket sequences.  Each bracket carries a word
// id w drawn from `dist`; the open token is 2w and the matching close is
// 2w+1, so the corpus vocabulary is 2 * |dist|.  Every sequence is
// individually balanced, with even length uniform over [min_len, max_len].
// Generation stops after the first sequence that brings the total to at
// least `total_tokens`.
Corpus gen_paren_corpus(const ParenSpec& spec, std::size_t total_tokens,
                        std::uint64_t seed);

// IID uniform tokens in fixed-length sequences; the final sequence is
// shortened to land exactly on `total_tokens`.
Corpus gen_random_corpus(TokenId vocab_size, std::size_t total_tokens,
                         long seq_len, std::uint64_t seed);

// Sidecar metadata (generator name, params, seed, RNG id) written next to
// generated corpora.
void write_generator_metadata(const std::filesystem::path& path,
                              const std::string& generator,
                              const std::string& params_json,
                              std::uint64_t seed, std::size_t total_tokens);

}  // namespace xfer
