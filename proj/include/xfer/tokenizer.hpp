#pragma once

#include <filesystem>
#include <span>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "xfer/corpus.hpp"

namespace xfer {

// Byte-level BPE model.  Symbol IDs: 0..255 are the raw bytes, then one ID
// per learned merge in acquisition order, then the special tokens.
struct BpeModel {
  std::vector<std::string> symbols;                   // id -> byte string
  std::vector<std::pair<TokenId, TokenId>> merges;    // constituent ids
  std::vector<std::string> specials;                  // names, after merges

  TokenId vocab_size() const { return static_cast<TokenId>(symbols.size()); }
  TokenId special_id(std::size_t i) const {
    return static_cast<TokenId>(256 + merges.size() + i);
  }
};

inline const std::vector<std::string>& default_specials() {
  static const std::vector<std::string> s = {"<eos>"};
  return s;
}

// Greedy BPE training.  Most frequent adjacent pair merged first; ties
// broken by lexicographically smaller (left, right) symbol byte strings.
// Merges never cross pre-token boundaries (Unicode-whitespace fencing).
// Stops early when no pair occurs at least twice; the shortfall is visible
// as vocab_size() < requested.
BpeModel train_bpe(std::string_view text, TokenId vocab_size,
                   const std::vector<std::string>& specials = default_specials());

TokenSequence encode(const BpeModel& model, std::string_view text);
std::string decode(const BpeModel& model, std::span<const TokenId> tokens);

// Train on the full text, then encode line by line (one sequence per
// non-empty line).
std::pair<BpeModel, Corpus> tokenize_target(std::string_view text,
                                            TokenId vocab_size);

void save_bpe(const BpeModel& model, const std::filesystem::path& path);
BpeModel load_bpe(const std::filesystem::path& path);

// Pre-tokenization used by train/encode: maximal runs of Unicode
// whitespace or non-whitespace codepoints, as byte strings.
std::vector<std::string_view> pretokenize(std::string_view text);

}  // namespace xfer
