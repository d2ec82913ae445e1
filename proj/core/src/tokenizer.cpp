#include "bilm/tokenizer.hpp"

#include <algorithm>
#include <fstream>
#include <map>
#include <queue>

#include "bilm/binary_io.hpp"
#include "bilm/error.hpp"
#include "bilm/file_util.hpp"
#include "bilm/hash.hpp"
#include "bilm/rng.hpp"

namespace bilm::tok {
namespace {

constexpr std::string_view kMagic = "BILMTOK\n";
constexpr uint32_t kFormatVersion = 1;
constexpr uint32_t kNoOperand = 0xFFFFFFFFu;
constexpr int kBarrier = -1;  // training-side unit that never pairs

const char* const kSpecialNames[kNumSpecial] = {"<pad>", "<eot>", "<sep>", "<unk>"};

uint64_t pair_key(int left, int right) {
  return (static_cast<uint64_t>(static_cast<uint32_t>(left)) << 32) |
         static_cast<uint32_t>(right);
}

// Length of the UTF-8 sequence starting at s[i], or 0 if it is malformed.
size_t utf8_length(std::string_view s, size_t i) {
  const auto b0 = static_cast<unsigned char>(s[i]);
  size_t len = 0;
  uint32_t cp = 0;
  if (b0 < 0x80) {
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
    return 0;
  }
  if (i + len > s.size()) {
    return 0;
  }
  for (size_t k = 1; k < len; ++k) {
    const auto b = static_cast<unsigned char>(s[i + k]);
    if ((b & 0xC0) != 0x80) {
      return 0;
    }
    cp = (cp << 6) | (b & 0x3F);
  }
  // Reject overlong forms, surrogates and out-of-range code points.
  if ((len == 2 && cp < 0x80) || (len == 3 && cp < 0x800) || (len == 4 && cp < 0x10000) ||
      (cp >= 0xD800 && cp <= 0xDFFF) || cp > 0x10FFFF) {
    return 0;
  }
  return len;
}

// One character of input: either a symbol string eligible for the character
// vocabulary, or raw bytes that must use byte fallback.
struct Unit {
  std::string symbol;  // empty => raw
  std::string_view raw;
};

template <class Fn>
void for_each_unit(std::string_view chunk, Fn&& fn) {
  size_t i = 0;
  while (i < chunk.size()) {
    const size_t len = utf8_length(chunk, i);
    if (len == 0) {
      fn(Unit{{}, chunk.substr(i, 1)});
      i += 1;
      continue;
    }
    const std::string_view ch = chunk.substr(i, len);
    if (ch == " ") {
      fn(Unit{std::string(kSpaceMarker), ch});
    } else if (ch == kSpaceMarker) {
      fn(Unit{{}, ch});
    } else {
      fn(Unit{std::string(ch), ch});
    }
    i += len;
  }
}

// Splits text into chunks that start at each space; merges never cross chunks.
template <class Fn>
void for_each_chunk(std::string_view text, Fn&& fn) {
  size_t start = 0;
  for (size_t i = 1; i < text.size(); ++i) {
    if (text[i] == ' ') {
      fn(text.substr(start, i - start));
      start = i;
    }
  }
  if (start < text.size()) {
    fn(text.substr(start));
  }
}

std::string byte_name(unsigned value) {
  static constexpr char kHex[] = "0123456789ABCDEF";
  std::string s = "<0x";
  s.push_back(kHex[value >> 4]);
  s.push_back(kHex[value & 0xF]);
  s.push_back('>');
  return s;
}

std::vector<Piece> base_pieces() {
  std::vector<Piece> pieces;
  pieces.reserve(kFirstLearnedId);
  for (int i = 0; i < kNumSpecial; ++i) {
    pieces.push_back(Piece{PieceKind::special, kSpecialNames[i]});
  }
  for (unsigned b = 0; b < 256; ++b) {
    pieces.push_back(Piece{PieceKind::byte, byte_name(b)});
  }
  return pieces;
}

}  // namespace

TokenizerModel::TokenizerModel(std::vector<Piece> pieces) : pieces_(std::move(pieces)) {
  if (pieces_.size() < static_cast<size_t>(kFirstLearnedId)) {
    throw ValidationError("tokenizer: table smaller than the reserved + byte range");
  }
  const std::vector<Piece> base = base_pieces();
  for (int i = 0; i < kFirstLearnedId; ++i) {
    if (pieces_[static_cast<size_t>(i)] != base[static_cast<size_t>(i)]) {
      throw ValidationError("tokenizer: reserved/byte table entry " + std::to_string(i) +
                            " is malformed");
    }
  }
  for (int id = kFirstLearnedId; id < vocab_size(); ++id) {
    const Piece& p = pieces_[static_cast<size_t>(id)];
    switch (p.kind) {
      case PieceKind::character:
        if (!char_ids_.emplace(p.text, id).second) {
          throw ValidationError("tokenizer: duplicate character piece");
        }
        break;
      case PieceKind::merge: {
        const bool operands_ok = p.left >= kFirstLearnedId && p.right >= kFirstLearnedId &&
                                 p.left < id && p.right < id;
        if (!operands_ok ||
            pieces_[static_cast<size_t>(p.left)].text + pieces_[static_cast<size_t>(p.right)].text !=
                p.text) {
          throw ValidationError("tokenizer: merge " + std::to_string(id) + " is inconsistent");
        }
        merges_.emplace(pair_key(p.left, p.right), id);
        break;
      }
      case PieceKind::unused:
        break;
      default:
        throw ValidationError("tokenizer: unexpected piece kind at id " + std::to_string(id));
    }
  }
  hash_ = sha256_hex(serialize());
}

void TokenizerModel::encode_chunk(std::string_view chunk, std::vector<int>& out) const {
  // Each element is a token id; ids below kFirstLearnedId are byte fallbacks and
  // never appear in a merge.
  std::vector<int> units;
  for_each_unit(chunk, [&](const Unit& u) {
    if (!u.symbol.empty()) {
      const auto it = char_ids_.find(u.symbol);
      if (it != char_ids_.end()) {
        units.push_back(it->second);
        return;
      }
    }
    for (const char c : u.raw) {
      units.push_back(kByteBase + static_cast<unsigned char>(c));
    }
  });

  // Apply merges by rank: the pair with the lowest merged id merges first,
  // every occurrence left to right, exactly as during training.
  while (units.size() > 1) {
    int best = -1;
    for (size_t i = 0; i + 1 < units.size(); ++i) {
      const auto it = merges_.find(pair_key(units[i], units[i + 1]));
      if (it != merges_.end() && (best < 0 || it->second < best)) {
        best = it->second;
      }
    }
    if (best < 0) {
      break;
    }
    const Piece& merged = pieces_[static_cast<size_t>(best)];
    std::vector<int> next;
    next.reserve(units.size());
    for (size_t i = 0; i < units.size(); ++i) {
      if (i + 1 < units.size() && units[i] == merged.left && units[i + 1] == merged.right) {
        next.push_back(best);
        ++i;
      } else {
        next.push_back(units[i]);
      }
    }
    units = std::move(next);
  }
  out.insert(out.end(), units.begin(), units.end());
}

std::vector<int> TokenizerModel::encode(std::string_view text) const {
  std::vector<int> ids;
  for_each_chunk(text, [&](std::string_view chunk) { encode_chunk(chunk, ids); });
  return ids;
}

std::string TokenizerModel::decode(std::span<const int> ids) const {
  std::string out;
  for (const int id : ids) {
    if (id < 0 || id >= vocab_size()) {
      throw ValidationError("decode: token id " + std::to_string(id) + " out of range [0, " +
                            std::to_string(vocab_size()) + ")");
    }
    const Piece& p = pieces_[static_cast<size_t>(id)];
    switch (p.kind) {
      case PieceKind::byte:
        out.push_back(static_cast<char>(id - kByteBase));
        break;
      case PieceKind::character:
      case PieceKind::merge: {
        size_t pos = 0;
        while (pos < p.text.size()) {
          if (p.text.compare(pos, kSpaceMarker.size(), kSpaceMarker) == 0) {
            out.push_back(' ');
            pos += kSpaceMarker.size();
          } else {
            out.push_back(p.text[pos++]);
          }
        }
        break;
      }
      case PieceKind::special:
      case PieceKind::unused:
        break;
    }
  }
  return out;
}

std::string TokenizerModel::serialize() const {
  std::string out;
  binio::put_bytes(out, kMagic);
  binio::put<uint32_t>(out, kFormatVersion);
  binio::put<uint32_t>(out, static_cast<uint32_t>(pieces_.size()));
  for (const Piece& p : pieces_) {
    binio::put<uint8_t>(out, static_cast<uint8_t>(p.kind));
    binio::put<uint32_t>(out, p.left < 0 ? kNoOperand : static_cast<uint32_t>(p.left));
    binio::put<uint32_t>(out, p.right < 0 ? kNoOperand : static_cast<uint32_t>(p.right));
    binio::put<uint32_t>(out, static_cast<uint32_t>(p.text.size()));
    binio::put_bytes(out, p.text);
  }
  return out;
}

TokenizerModel TokenizerModel::deserialize(std::string_view bytes) {
  binio::Reader r(bytes);
  if (r.get_bytes(kMagic.size()) != kMagic) {
    throw ValidationError("tokenizer: bad magic");
  }
  const auto version = r.get<uint32_t>();
  if (version != kFormatVersion) {
    throw ValidationError("tokenizer: unsupported version " + std::to_string(version));
  }
  const auto count = r.get<uint32_t>();
  std::vector<Piece> pieces;
  pieces.reserve(count);
  for (uint32_t i = 0; i < count; ++i) {
    Piece p;
    const auto kind = r.get<uint8_t>();
    if (kind > static_cast<uint8_t>(PieceKind::unused)) {
      throw ValidationError("tokenizer: bad piece kind");
    }
    p.kind = static_cast<PieceKind>(kind);
    const auto left = r.get<uint32_t>();
    const auto right = r.get<uint32_t>();
    p.left = left == kNoOperand ? -1 : static_cast<int>(left);
    p.right = right == kNoOperand ? -1 : static_cast<int>(right);
    p.text = std::string(r.get_bytes(r.get<uint32_t>()));
    pieces.push_back(std::move(p));
  }
  if (!r.done()) {
    throw ValidationError("tokenizer: trailing bytes");
  }
  return TokenizerModel(std::move(pieces));
}

void TokenizerModel::save(const std::filesystem::path& path) const {
  write_file_atomic(path, serialize());
}

TokenizerModel TokenizerModel::load(const std::filesystem::path& path) {
  return deserialize(read_file(path));
}

std::vector<std::string> sample_lines(std::istream& in, size_t n, uint64_t seed) {
  Rng rng(seed);
  std::vector<std::string> reservoir;
  reservoir.reserve(n);
  size_t seen = 0;
  std::string line;
  while (std::getline(in, line)) {
    if (!line.empty() && line.back() == '\r') {
      line.pop_back();
    }
    if (line.empty()) {
      continue;
    }
    if (reservoir.size() < n) {
      reservoir.push_back(line);
    } else {
      const uint64_t j = rng.below(seen + 1);
      if (j < n) {
        reservoir[j] = line;
      }
    }
    ++seen;
  }
  if (seen < n) {
    throw ValidationError("corpus exhausted: needed " + std::to_string(n) + " lines, found " +
                          std::to_string(seen));
  }
  return reservoir;
}

TokenizerModel train_from_lines(std::span<const std::string> lines, int vocab_size) {
  if (vocab_size <= kFirstLearnedId) {
    throw ValidationError("vocab_size must exceed " + std::to_string(kFirstLearnedId) +
                          " (4 reserved + 256 byte tokens)");
  }

  // Chunk frequencies over the sample, in deterministic order.
  std::map<std::string, int64_t> chunk_counts;
  for (const std::string& line : lines) {
    for_each_chunk(line, [&](std::string_view chunk) { ++chunk_counts[std::string(chunk)]; });
  }

  std::map<std::string, int64_t> char_counts;
  for (const auto& [chunk, count] : chunk_counts) {
    for_each_unit(chunk, [&](const Unit& u) {
      if (!u.symbol.empty()) {
        char_counts[u.symbol] += count;
      }
    });
  }
  std::vector<std::pair<std::string, int64_t>> chars(char_counts.begin(), char_counts.end());
  std::stable_sort(chars.begin(), chars.end(),
                   [](const auto& a, const auto& b) { return a.second > b.second; });

  std::vector<Piece> pieces = base_pieces();
  const size_t target = static_cast<size_t>(vocab_size);
  std::unordered_map<std::string, int> char_ids;
  for (const auto& [symbol, count] : chars) {
    if (pieces.size() == target) {
      break;
    }
    char_ids.emplace(symbol, static_cast<int>(pieces.size()));
    pieces.push_back(Piece{PieceKind::character, symbol});
  }

  // Word table: each distinct chunk as a unit sequence with its frequency.
  std::vector<std::vector<int>> words;
  std::vector<int64_t> freqs;
  for (const auto& [chunk, count] : chunk_counts) {
    std::vector<int> units;
    for_each_unit(chunk, [&](const Unit& u) {
      const auto it = u.symbol.empty() ? char_ids.end() : char_ids.find(u.symbol);
      units.push_back(it == char_ids.end() ? kBarrier : it->second);
    });
    words.push_back(std::move(units));
    freqs.push_back(count);
  }

  std::unordered_map<uint64_t, int64_t> pair_counts;
  std::unordered_map<uint64_t, std::vector<uint32_t>> pair_words;
  const auto for_each_pair = [](const std::vector<int>& w, auto&& fn) {
    for (size_t i = 0; i + 1 < w.size(); ++i) {
      if (w[i] != kBarrier && w[i + 1] != kBarrier) {
        fn(pair_key(w[i], w[i + 1]));
      }
    }
  };
  for (uint32_t wi = 0; wi < words.size(); ++wi) {
    for_each_pair(words[wi], [&](uint64_t key) {
      pair_counts[key] += freqs[wi];
      pair_words[key].push_back(wi);
    });
  }

  // Max-heap on count; ties go to the smaller (left, right) id pair.
  struct Entry {
    int64_t count;
    uint64_t key;
  };
  const auto lower_priority = [](const Entry& a, const Entry& b) {
    return a.count != b.count ? a.count < b.count : a.key > b.key;
  };
  std::priority_queue<Entry, std::vector<Entry>, decltype(lower_priority)> heap(lower_priority);
  for (const auto& [key, count] : pair_counts) {
    heap.push(Entry{count, key});
  }

  std::vector<uint64_t> touched;
  while (pieces.size() < target && !heap.empty()) {
    const Entry top = heap.top();
    heap.pop();
    const auto it = pair_counts.find(top.key);
    if (it == pair_counts.end() || it->second != top.count || top.count <= 0) {
      continue;  // stale
    }
    const int left = static_cast<int>(top.key >> 32);
    const int right = static_cast<int>(top.key & 0xFFFFFFFFu);
    const int new_id = static_cast<int>(pieces.size());
    pieces.push_back(Piece{PieceKind::merge,
                           pieces[static_cast<size_t>(left)].text +
                               pieces[static_cast<size_t>(right)].text,
                           left, right});

    std::vector<uint32_t> affected = std::move(pair_words[top.key]);
    pair_words.erase(top.key);
    std::sort(affected.begin(), affected.end());
    affected.erase(std::unique(affected.begin(), affected.end()), affected.end());

    touched.clear();
    for (const uint32_t wi : affected) {
      std::vector<int>& w = words[wi];
      bool contains = false;
      for (size_t i = 0; i + 1 < w.size(); ++i) {
        if (w[i] == left && w[i + 1] == right) {
          contains = true;
          break;
        }
      }
      if (!contains) {
        continue;
      }
      for_each_pair(w, [&](uint64_t key) {
        pair_counts[key] -= freqs[wi];
        touched.push_back(key);
      });
      std::vector<int> merged;
      merged.reserve(w.size());
      for (size_t i = 0; i < w.size(); ++i) {
        if (i + 1 < w.size() && w[i] == left && w[i + 1] == right) {
          merged.push_back(new_id);
          ++i;
        } else {
          merged.push_back(w[i]);
        }
      }
      w = std::move(merged);
      for_each_pair(w, [&](uint64_t key) {
        pair_counts[key] += freqs[wi];
        pair_words[key].push_back(wi);
        touched.push_back(key);
      });
    }
    std::sort(touched.begin(), touched.end());
    touched.erase(std::unique(touched.begin(), touched.end()), touched.end());
    for (const uint64_t key : touched) {
      const int64_t count = pair_counts[key];
      if (count > 0) {
        heap.push(Entry{count, key});
      } else {
        pair_counts.erase(key);
      }
    }
  }

  // A small sample can run out of pairs; pad so V is exact.
  while (pieces.size() < target) {
    pieces.push_back(Piece{PieceKind::unused, "<unused_" + std::to_string(pieces.size()) + ">"});
  }
  return TokenizerModel(std::move(pieces));
}

TokenizerModel train_tokenizer(std::istream& corpus_a, std::istream& corpus_b,
                               const TrainerOptions& options) {
  if (options.vocab_size <= kFirstLearnedId) {
    throw ValidationError("vocab_size must exceed " + std::to_string(kFirstLearnedId));
  }
  std::vector<std::string> sample =
      sample_lines(corpus_a, options.lines_per_language, mix_seed(options.seed, 1));
  std::vector<std::string> sample_b =
      sample_lines(corpus_b, options.lines_per_language, mix_seed(options.seed, 2));
  sample.insert(sample.end(), std::make_move_iterator(sample_b.begin()),
                std::make_move_iterator(sample_b.end()));
  return train_from_lines(sample, options.vocab_size);
}

}  // namespace bilm::tok
