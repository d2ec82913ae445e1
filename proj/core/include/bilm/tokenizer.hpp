#pragma once

// Shared bilingual subword tokenizer.
//
// Vocabulary layout (ids are dense 0..V-1):
//   0        <pad>   reserved, never produced by encode
//   1        <eot>   document separator used when packing and as scoring context
//   2        <sep>   joins a prime and its target sentence
//   3        <unk>   reserved; byte fallback makes it unreachable
//   4..259   <0xNN>  one token per byte value
//   260..    single characters, then merges in rank order
// A space is represented by the marker U+2581 inside pieces; a literal U+2581 in
// the input always takes the byte route so decoding stays unambiguous.

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <span>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

namespace bilm::tok {

inline constexpr int kPadId = 0;
inline constexpr int kEotId = 1;
inline constexpr int kSepId = 2;
inline constexpr int kUnkId = 3;
inline constexpr int kNumSpecial = 4;
inline constexpr int kByteBase = kNumSpecial;
inline constexpr int kFirstLearnedId = kByteBase + 256;

inline constexpr std::string_view kSpaceMarker = "\xE2\x96\x81";  // U+2581

enum class PieceKind : uint8_t { special = 0, byte = 1, character = 2, merge = 3, unused = 4 };

struct Piece {
  PieceKind kind = PieceKind::unused;
  std::string text;  // surface text; space appears as the marker
  int left = -1;     // merge operands
  int right = -1;

  bool operator==(const Piece&) const = default;
};

class TokenizerModel {
 public:
  TokenizerModel() = default;
  // Validates the table layout and builds lookup indexes.
  explicit TokenizerModel(std::vector<Piece> pieces);

  std::vector<int> encode(std::string_view text) const;
  // Throws ValidationError on an id outside [0, V).
  std::string decode(std::span<const int> ids) const;

  int vocab_size() const { return static_cast<int>(pieces_.size()); }
  const Piece& piece(int id) const { return pieces_.at(static_cast<size_t>(id)); }
  const std::vector<Piece>& pieces() const { return pieces_; }

  std::string serialize() const;
  static TokenizerModel deserialize(std::string_view bytes);
  void save(const std::filesystem::path& path) const;
  static TokenizerModel load(const std::filesystem::path& path);

  // SHA-256 of the serialized form.
  const std::string& hash() const { return hash_; }

 private:
  void encode_chunk(std::string_view chunk, std::vector<int>& out) const;

  std::vector<Piece> pieces_;
  std::unordered_map<std::string, int> char_ids_;
  std::unordered_map<uint64_t, int> merges_;  // (left, right) -> merged id; id doubles as rank
  std::string hash_;
};

struct TrainerOptions {
  size_t lines_per_language = 100000;
  int vocab_size = 50004;
  uint64_t seed = 123;
};

// Uniform sample of exactly n non-empty lines (reservoir sampling). Throws
// ValidationError when the stream has fewer than n non-empty lines.
std::vector<std::string> sample_lines(std::istream& in, size_t n, uint64_t seed);

// Trains on an already-drawn sample.
TokenizerModel train_from_lines(std::span<const std::string> lines, int vocab_size);

// Draws lines_per_language lines from each corpus and trains on their union.
TokenizerModel train_tokenizer(std::istream& corpus_a, std::istream& corpus_b,
                               const TrainerOptions& options);

}  // namespace bilm::tok
