#include "xfer/corpus.hpp"

#include <fstream>
#include <numeric>
#include <string>

#include <nlohmann/json.hpp>

#include "xfer/rng.hpp"

namespace xfer {

namespace {

// IDs are 32-bit; 2^31 - 1 itself is reserved so that vocab_size
// (max ID + 1) always fits in a TokenId.
constexpr std::int64_t kMaxTokenId = 2147483646;

}  // namespace

void for_each_jsonl_sequence(
    const std::filesystem::path& path,
    const std::function<void(std::size_t, TokenSequence&&)>& fn) {
  std::ifstream in(path);
  if (!in) {
    throw ValidationError("cannot open corpus file: " + path.string());
  }
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    nlohmann::json j;
    try {
      j = nlohmann::json::parse(line);
    } catch (const nlohmann::json::parse_error& e) {
      throw ValidationError(path.string() + ":" + std::to_string(line_no) +
                            ": malformed JSON: " + e.what());
    }
    if (!j.is_array()) {
      throw ValidationError(path.string() + ":" + std::to_string(line_no) +
                            ": expected a JSON array of integers");
    }
    if (j.empty()) {
      throw ValidationError(path.string() + ":" + std::to_string(line_no) +
                            ": empty sequence");
    }
    TokenSequence seq;
    seq.reserve(j.size());
    for (const auto& el : j) {
      if (!el.is_number_integer() || el.is_number_float()) {
        throw ValidationError(path.string() + ":" + std::to_string(line_no) +
                              ": non-integer token");
      }
      const auto v = el.get<std::int64_t>();
      if (v < 0) {
        throw ValidationError(path.string() + ":" + std::to_string(line_no) +
                              ": negative token " + std::to_string(v));
      }
      if (v > kMaxTokenId) {
        throw ValidationError(path.string() + ":" + std::to_string(line_no) +
                              ": token " + std::to_string(v) +
                              " exceeds the 32-bit ID range");
      }
      seq.push_back(static_cast<TokenId>(v));
    }
    fn(line_no, std::move(seq));
  }
}

Corpus read_jsonl(const std::filesystem::path& path) {
  Corpus c;
  for_each_jsonl_sequence(path, [&](std::size_t, TokenSequence&& seq) {
    c.sequences.push_back(std::move(seq));
  });
  c.vocab_size = c.sequences.empty() ? 0 : infer_vocab(c);
  return c;
}

void write_jsonl(const Corpus& corpus, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) {
    throw std::runtime_error("cannot open for writing: " + path.string());
  }
  std::string line;
  for (const auto& seq : corpus.sequences) {
    line.clear();
    line.push_back('[');
    for (std::size_t i = 0; i < seq.size(); ++i) {
      if (seq[i] < 0 || seq[i] > kMaxTokenId) {
        throw ValidationError("token " + std::to_string(seq[i]) +
                              " outside the 32-bit ID range (writing " +
                              path.string() + ")");
      }
      if (i > 0) line += ", ";
      line += std::to_string(seq[i]);
    }
    line += "]\n";
    out << line;
  }
  if (!out) {
    throw std::runtime_error("write failed: " + path.string());
  }
}

TokenId infer_vocab(const Corpus& corpus) {
  if (corpus.sequences.empty()) {
    throw ValidationError("infer_vocab: empty corpus");
  }
  TokenId max_id = -1;
  for (const auto& seq : corpus.sequences) {
    for (TokenId t : seq) max_id = std::max(max_id, t);
  }
  return max_id + 1;
}

Corpus fit_to_token_budget(const Corpus& corpus, std::size_t budget,
                           std::optional<std::uint64_t> seed) {
  if (corpus.sequences.empty()) {
    throw ValidationError("fit_to_token_budget: empty corpus");
  }
  if (budget < 1) {
    throw ValidationError("fit_to_token_budget: budget must be >= 1");
  }
  Corpus out;
  out.vocab_size = corpus.vocab_size;

  std::optional<Rng> rng;
  if (seed) rng.emplace(*seed);

  std::vector<std::size_t> order(corpus.sequences.size());
  std::iota(order.begin(), order.end(), 0);

  std::size_t total = 0;
  bool first_pass = true;
  while (total < budget) {
    if (!first_pass && rng) rng->shuffle(order);
    first_pass = false;
    for (std::size_t idx : order) {
      const auto& seq = corpus.sequences[idx];
      if (total + seq.size() >= budget) {
        out.sequences.emplace_back(seq.begin(),
                                   seq.begin() + (budget - total));
        total = budget;
        break;
      }
      out.sequences.push_back(seq);
      total += seq.size();
    }
  }
  return out;
}

BlockSet pack_into_blocks(const Corpus& corpus, long block_len,
                          TokenId eos_id) {
  if (block_len < 2) {
    throw ValidationError("pack_into_blocks: block_len must be >= 2");
  }
  if (eos_id < corpus.vocab_size) {
    throw ValidationError("pack_into_blocks: eos_id must be >= vocab_size");
  }
  BlockSet bs;
  bs.block_len = block_len;
  bs.eos_id = eos_id;
  const std::size_t stream_len = corpus.total_tokens() + corpus.sequences.size();
  bs.data.reserve(stream_len - stream_len % block_len);

  std::vector<TokenId> pending;
  pending.reserve(block_len);
  auto push = [&](TokenId t) {
    pending.push_back(t);
    if (pending.size() == static_cast<std::size_t>(block_len)) {
      bs.data.insert(bs.data.end(), pending.begin(), pending.end());
      pending.clear();
    }
  };
  for (const auto& seq : corpus.sequences) {
    for (TokenId t : seq) push(t);
    push(eos_id);
  }
  // Final partial block dropped.
  return bs;
}

Corpus slice_token_range(const Corpus& corpus, std::size_t begin,
                         std::size_t end) {
  Corpus out;
  out.vocab_size = corpus.vocab_size;
  std::size_t pos = 0;
  for (const auto& seq : corpus.sequences) {
    const std::size_t lo = std::max(begin, pos);
    const std::size_t hi = std::min(end, pos + seq.size());
    if (lo < hi) {
      out.sequences.emplace_back(seq.begin() + (lo - pos),
                                 seq.begin() + (hi - pos));
    }
    pos += seq.size();
    if (pos >= end) break;
  }
  return out;
}

}  // namespace xfer
