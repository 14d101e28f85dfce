#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <span>
#include <vector>

#include "xfer/error.hpp"

namespace xfer {

// Token IDs are 32-bit non-negative integers; anything larger is rejected
// at the serialization boundary.
using TokenId = std::int32_t;

using TokenSequence = std::vector<TokenId>;

// The canonical interchange unit: an ordered list of token sequences plus
// the number of distinct representable IDs.
struct Corpus {
  std::vector<TokenSequence> sequences;
  TokenId vocab_size = 0;

  std::size_t total_tokens() const {
    std::size_t n = 0;
    for (const auto& s : sequences) n += s.size();
    return n;
  }
};

// Fixed-length rows of token IDs ready for model consumption, stored flat.
struct BlockSet {
  std::vector<TokenId> data;
  long block_len = 0;
  TokenId eos_id = 0;

  long n_blocks() const {
    return block_len == 0 ? 0 : static_cast<long>(data.size()) / block_len;
  }
  std::span<const TokenId> block(long i) const {
    return {data.data() + i * block_len, static_cast<std::size_t>(block_len)};
  }
};

// Streaming JSONL reader: invokes `fn(line_number, tokens)` per sequence
// without materializing the whole corpus.  Lines are 1-based; blank lines
// are skipped.  Validation failures throw ValidationError naming the line.
void for_each_jsonl_sequence(
    const std::filesystem::path& path,
    const std::function<void(std::size_t, TokenSequence&&)>& fn);

Corpus read_jsonl(const std::filesystem::path& path);
void write_jsonl(const Corpus& corpus, const std::filesystem::path& path);

// Max token ID + 1.
TokenId infer_vocab(const Corpus& corpus);

// Repeat (shuffling sequence order on passes after the first when a seed is
// given) and truncate so the result holds exactly `budget` tokens.
Corpus fit_to_token_budget(const Corpus& corpus, std::size_t budget,
                           std::optional<std::uint64_t> seed);

// Join sequences with `eos_id` and chop the stream into consecutive
// block_len rows, dropping the final partial row.
BlockSet pack_into_blocks(const Corpus& corpus, long block_len, TokenId eos_id);

// Sub-corpus covering stream token positions [begin, end) of the
// eos-free concatenation, splitting sequences at the range edges.
Corpus slice_token_range(const Corpus& corpus, std::size_t begin,
                         std::size_t end);

}  // namespace xfer
