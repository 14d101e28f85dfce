#include "xfer/tokenizer.hpp"

#include <algorithm>
#include <cstdint>
#include <fstream>
#include <sstream>
#include <unordered_map>

#include <nlohmann/json.hpp>

namespace xfer {

namespace {

bool is_unicode_whitespace(char32_t cp) {
  switch (cp) {
    case 0x09: case 0x0A: case 0x0B: case 0x0C: case 0x0D:
    case 0x20: case 0x85: case 0xA0: case 0x1680:
    case 0x2028: case 0x2029: case 0x202F: case 0x205F: case 0x3000:
      return true;
    default:
      return cp >= 0x2000 && cp <= 0x200A;
  }
}

// Decodes one codepoint starting at `i`; invalid bytes are treated as
// single-byte non-whitespace codepoints.  Returns byte length consumed.
std::size_t decode_utf8(std::string_view s, std::size_t i, char32_t& cp) {
  const auto b0 = static_cast<unsigned char>(s[i]);
  std::size_t len;
  if (b0 < 0x80) {
    cp = b0;
    return 1;
  } else if ((b0 & 0xE0) == 0xC0) {
    len = 2;
    cp = b0 & 0x1F;
  } else if ((b0 & 0xF0) == 0xE0) {
    len = 3;
    cp = b0 & 0x0F;
  } else if ((b0 & 0xF8) == 0xF0) {
    len = 4;
    cp = b0 & 0x07;
  } else {
    cp = b0;
    return 1;
  }
  if (i + len > s.size()) {
    cp = b0;
    return 1;
  }
  for (std::size_t k = 1; k < len; ++k) {
    const auto b = static_cast<unsigned char>(s[i + k]);
    if ((b & 0xC0) != 0x80) {
      cp = b0;
      return 1;
    }
    cp = (cp << 6) | (b & 0x3F);
  }
  return len;
}

std::uint64_t pair_key(TokenId a, TokenId b) {
  return (static_cast<std::uint64_t>(static_cast<std::uint32_t>(a)) << 32) |
         static_cast<std::uint32_t>(b);
}

struct Encoder {
  const BpeModel& model;
  std::unordered_map<std::uint64_t, std::size_t> rank;
  std::unordered_map<std::string, TokenSequence> cache;

  explicit Encoder(const BpeModel& m) : model(m) {
    rank.reserve(m.merges.size());
    for (std::size_t r = 0; r < m.merges.size(); ++r) {
      rank.emplace(pair_key(m.merges[r].first, m.merges[r].second), r);
    }
  }

  // Applies merges in acquisition order: repeatedly merge the
  // earliest-acquired pair still present.
  const TokenSequence& encode_word(std::string_view word) {
    auto it = cache.find(std::string(word));
    if (it != cache.end()) return it->second;
    TokenSequence ids;
    ids.reserve(word.size());
    for (unsigned char b : word) ids.push_back(static_cast<TokenId>(b));
    while (ids.size() >= 2) {
      std::size_t best_rank = rank.size();
      std::size_t best_pos = 0;
      for (std::size_t i = 0; i + 1 < ids.size(); ++i) {
        auto r = rank.find(pair_key(ids[i], ids[i + 1]));
        if (r != rank.end() && r->second < best_rank) {
          best_rank = r->second;
          best_pos = i;
        }
      }
      if (best_rank == rank.size()) break;
      const TokenId merged = static_cast<TokenId>(256 + best_rank);
      const TokenId l = ids[best_pos];
      const TokenId rgt = ids[best_pos + 1];
      TokenSequence next;
      next.reserve(ids.size());
      for (std::size_t i = 0; i < ids.size();) {
        if (i + 1 < ids.size() && ids[i] == l && ids[i + 1] == rgt) {
          next.push_back(merged);
          i += 2;
        } else {
          next.push_back(ids[i]);
          ++i;
        }
      }
      ids = std::move(next);
    }
    return cache.emplace(std::string(word), std::move(ids)).first->second;
  }

  TokenSequence encode(std::string_view text) {
    TokenSequence out;
    for (std::string_view w : pretokenize(text)) {
      const auto& ids = encode_word(w);
      out.insert(out.end(), ids.begin(), ids.end());
    }
    return out;
  }
};

std::string escape_bytes(std::string_view s) {
  std::string out;
  for (unsigned char c : s) {
    if (c == '\\') {
      out += "\\\\";
    } else if (c >= 0x20 && c < 0x7F) {
      out.push_back(static_cast<char>(c));
    } else {
      static const char* hex = "0123456789abcdef";
      out += "\\x";
      out.push_back(hex[c >> 4]);
      out.push_back(hex[c & 0xF]);
    }
  }
  return out;
}

std::string unescape_bytes(std::string_view s) {
  std::string out;
  for (std::size_t i = 0; i < s.size();) {
    if (s[i] == '\\' && i + 1 < s.size()) {
      if (s[i + 1] == '\\') {
        out.push_back('\\');
        i += 2;
        continue;
      }
      if (s[i + 1] == 'x' && i + 3 < s.size()) {
        out.push_back(static_cast<char>(
            std::stoi(std::string(s.substr(i + 2, 2)), nullptr, 16)));
        i += 4;
        continue;
      }
    }
    out.push_back(s[i]);
    ++i;
  }
  return out;
}

}  // namespace

std::vector<std::string_view> pretokenize(std::string_view text) {
  std::vector<std::string_view> out;
  std::size_t start = 0;
  bool in_ws = false;
  std::size_t i = 0;
  while (i < text.size()) {
    char32_t cp;
    const std::size_t len = decode_utf8(text, i, cp);
    const bool ws = is_unicode_whitespace(cp);
    if (i > start && ws != in_ws) {
      out.push_back(text.substr(start, i - start));
      start = i;
    }
    in_ws = ws;
    i += len;
  }
  if (i > start) out.push_back(text.substr(start, i - start));
  return out;
}

BpeModel train_bpe(std::string_view text, TokenId vocab_size,
                   const std::vector<std::string>& specials) {
  if (text.empty()) {
    throw ValidationError("train_bpe: empty training text");
  }
  const TokenId base = static_cast<TokenId>(256 + specials.size());
  if (vocab_size <= base) {
    throw ValidationError("train_bpe: vocab_size must exceed " +
                          std::to_string(base) +
                          " (256 bytes + " + std::to_string(specials.size()) +
                          " specials)");
  }

  BpeModel model;
  model.symbols.reserve(vocab_size);
  for (int b = 0; b < 256; ++b) {
    model.symbols.emplace_back(1, static_cast<char>(b));
  }
  model.specials = specials;

  // Distinct pre-tokens with multiplicities.
  std::unordered_map<std::string, long> word_freq;
  for (std::string_view w : pretokenize(text)) {
    ++word_freq[std::string(w)];
  }
  std::vector<std::vector<TokenId>> words;
  std::vector<long> freqs;
  words.reserve(word_freq.size());
  for (const auto& [w, f] : word_freq) {
    std::vector<TokenId> ids;
    ids.reserve(w.size());
    for (unsigned char b : w) ids.push_back(static_cast<TokenId>(b));
    words.push_back(std::move(ids));
    freqs.push_back(f);
  }

  const std::size_t n_merges =
      static_cast<std::size_t>(vocab_size) - 256 - specials.size();
  std::unordered_map<std::uint64_t, long> counts;
  while (model.merges.size() < n_merges) {
    counts.clear();
    for (std::size_t wi = 0; wi < words.size(); ++wi) {
      const auto& w = words[wi];
      for (std::size_t i = 0; i + 1 < w.size(); ++i) {
        counts[pair_key(w[i], w[i + 1])] += freqs[wi];
      }
    }
    long best_count = 1;  // require >= 2 occurrences
    TokenId best_l = -1, best_r = -1;
    for (const auto& [key, cnt] : counts) {
      if (cnt < best_count) continue;
      const TokenId l = static_cast<TokenId>(key >> 32);
      const TokenId r = static_cast<TokenId>(key & 0xFFFFFFFF);
      if (cnt > best_count) {
        best_count = cnt;
        best_l = l;
        best_r = r;
      } else if (best_l >= 0) {
        // Tie: lexicographically smaller left symbol, then right.
        const auto& bl = model.symbols[best_l];
        const auto& br = model.symbols[best_r];
        const auto& cl = model.symbols[l];
        const auto& cr = model.symbols[r];
        if (cl < bl || (cl == bl && cr < br)) {
          best_l = l;
          best_r = r;
        }
      }
    }
    if (best_l < 0) break;  // no pair occurs twice

    const TokenId merged = static_cast<TokenId>(model.symbols.size());
    model.symbols.push_back(model.symbols[best_l] + model.symbols[best_r]);
    model.merges.emplace_back(best_l, best_r);

    for (auto& w : words) {
      if (w.size() < 2) continue;
      std::size_t o = 0;
      for (std::size_t i = 0; i < w.size();) {
        if (i + 1 < w.size() && w[i] == best_l && w[i + 1] == best_r) {
          w[o++] = merged;
          i += 2;
        } else {
          w[o++] = w[i++];
        }
      }
      w.resize(o);
    }
  }

  for (const auto& sp : model.specials) model.symbols.push_back(sp);
  return model;
}

TokenSequence encode(const BpeModel& model, std::string_view text) {
  Encoder enc(model);
  return enc.encode(text);
}

std::string decode(const BpeModel& model, std::span<const TokenId> tokens) {
  std::string out;
  for (TokenId t : tokens) {
    if (t < 0 || t >= model.vocab_size()) {
      throw ValidationError("decode: token " + std::to_string(t) +
                            " not in vocabulary of size " +
                            std::to_string(model.vocab_size()));
    }
    out += model.symbols[t];
  }
  return out;
}

std::pair<BpeModel, Corpus> tokenize_target(std::string_view text,
                                            TokenId vocab_size) {
  BpeModel model = train_bpe(text, vocab_size);
  Encoder enc(model);
  Corpus corpus;
  std::size_t pos = 0;
  while (pos <= text.size()) {
    std::size_t nl = text.find('\n', pos);
    if (nl == std::string_view::npos) nl = text.size();
    std::string_view line = text.substr(pos, nl - pos);
    if (!line.empty() &&
        line.find_first_not_of(" \t\r") != std::string_view::npos) {
      TokenSequence seq = enc.encode(line);
      if (!seq.empty()) corpus.sequences.push_back(std::move(seq));
    }
    if (nl == text.size()) break;
    pos = nl + 1;
  }
  if (corpus.sequences.empty()) {
    throw ValidationError("tokenize_target: no non-empty lines in input");
  }
  corpus.vocab_size = model.vocab_size();
  return {std::move(model), std::move(corpus)};
}

void save_bpe(const BpeModel& model, const std::filesystem::path& path) {
  nlohmann::json j;
  j["version"] = 1;
  j["vocab_size"] = model.vocab_size();
  j["specials"] = model.specials;
  auto& merges = j["merges"] = nlohmann::json::array();
  for (const auto& [l, r] : model.merges) {
    merges.push_back({escape_bytes(model.symbols[l]),
                      escape_bytes(model.symbols[r])});
  }
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out << j.dump(2) << "\n";
}

BpeModel load_bpe(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ValidationError("cannot open BPE model: " + path.string());
  nlohmann::json j;
  try {
    in >> j;
  } catch (const nlohmann::json::parse_error& e) {
    throw ValidationError(path.string() + ": malformed BPE model: " + e.what());
  }
  BpeModel model;
  for (int b = 0; b < 256; ++b) {
    model.symbols.emplace_back(1, static_cast<char>(b));
  }
  std::unordered_map<std::string, TokenId> ids;
  for (TokenId i = 0; i < 256; ++i) ids[model.symbols[i]] = i;
  for (const auto& m : j.at("merges")) {
    const std::string l = unescape_bytes(m.at(0).get<std::string>());
    const std::string r = unescape_bytes(m.at(1).get<std::string>());
    auto li = ids.find(l);
    auto ri = ids.find(r);
    if (li == ids.end() || ri == ids.end()) {
      throw ValidationError(path.string() +
                            ": merge references unknown symbol");
    }
    const TokenId merged = static_cast<TokenId>(model.symbols.size());
    model.merges.emplace_back(li->second, ri->second);
    model.symbols.push_back(l + r);
    ids[model.symbols.back()] = merged;
  }
  model.specials = j.at("specials").get<std::vector<std::string>>();
  for (const auto& sp : model.specials) model.symbols.push_back(sp);
  if (j.contains("vocab_size") &&
      j["vocab_size"].get<TokenId>() != model.vocab_size()) {
    throw ValidationError(path.string() + ": vocab_size mismatch");
  }
  return model;
}

}  // namespace xfer
