#include <gtest/gtest.h>

#include <sstream>

#include "bilm/error.hpp"
#include "bilm/rng.hpp"
#include "bilm/tokenizer.hpp"
#include "synthetic.hpp"

namespace bilm::tok {
namespace {

using testing::SynthLang;

const TokenizerModel& toy_tokenizer() {
  static const TokenizerModel model = [] {
    std::istringstream a(testing::join_lines(testing::synthetic_lines(SynthLang::a, 60, 1)));
    std::istringstream b(testing::join_lines(testing::synthetic_lines(SynthLang::b, 60, 1)));
    return train_tokenizer(a, b, {.lines_per_language = 10, .vocab_size = 300, .seed = 9});
  }();
  return model;
}

// Random strings mixing ASCII, multi-byte code points, the space marker and
// stray invalid bytes.
std::string fuzz_line(Rng& rng) {
  static const std::vector<std::string> alphabet = {
      "a", "b", "e", " ", " ", "t", "h", "ö", "ş", "ı", "€", "\xE2\x96\x81", "日", "🙂",
      "\xFF", "\xC3", "\t", ".", "the", "mı"};
  std::string s;
  const uint64_t n = rng.below(40);
  for (uint64_t i = 0; i < n; ++i) {
    s += alphabet[rng.below(alphabet.size())];
  }
  return s;
}

TEST(Tokenizer, VocabSizeIsExact) {
  EXPECT_EQ(toy_tokenizer().vocab_size(), 300);
}

TEST(Tokenizer, ReservedLayout) {
  const auto& t = toy_tokenizer();
  EXPECT_EQ(t.piece(kPadId).text, "<pad>");
  EXPECT_EQ(t.piece(kEotId).text, "<eot>");
  EXPECT_EQ(t.piece(kSepId).text, "<sep>");
  EXPECT_EQ(t.piece(kUnkId).text, "<unk>");
  for (int b = 0; b < 256; ++b) {
    EXPECT_EQ(t.piece(kByteBase + b).kind, PieceKind::byte);
  }
}

TEST(Tokenizer, EmptyRoundTrips) {
  EXPECT_TRUE(toy_tokenizer().encode("").empty());
  EXPECT_EQ(toy_tokenizer().decode(std::vector<int>{}), "");
}

TEST(Tokenizer, HelloRoundTrips) {
  const auto& t = toy_tokenizer();
  EXPECT_EQ(t.decode(t.encode("hello")), "hello");
}

TEST(Tokenizer, FuzzRoundTrip) {
  const auto& t = toy_tokenizer();
  Rng rng(2024);
  for (int i = 0; i < 1000; ++i) {
    const std::string s = fuzz_line(rng);
    const auto ids = t.encode(s);
    for (int id : ids) {
      ASSERT_GE(id, 0);
      ASSERT_LT(id, t.vocab_size());
      ASSERT_NE(id, kPadId);
      ASSERT_NE(id, kUnkId);
    }
    ASSERT_EQ(t.decode(ids), s) << "line " << i;
  }
}

TEST(Tokenizer, UnseenCharacterUsesByteFallback) {
  const auto& t = toy_tokenizer();
  const std::string euro = "€";
  std::vector<int> expected;
  for (unsigned char c : euro) {
    expected.push_back(kByteBase + c);
  }
  EXPECT_EQ(t.encode(euro), expected);
}

TEST(Tokenizer, LiteralMarkerTakesByteRoute) {
  const auto& t = toy_tokenizer();
  const auto ids = t.encode(kSpaceMarker);
  ASSERT_EQ(ids.size(), 3u);
  for (int id : ids) {
    EXPECT_LT(id, kFirstLearnedId);
  }
}

TEST(Tokenizer, LearnsMergesFromTrainingText) {
  const auto& t = toy_tokenizer();
  const std::string s = "the cat sees a dog .";
  EXPECT_LT(t.encode(s).size(), s.size());
}

TEST(Tokenizer, DecodeRejectsOutOfRange) {
  const auto& t = toy_tokenizer();
  EXPECT_THROW(t.decode(std::vector<int>{t.vocab_size()}), ValidationError);
  EXPECT_THROW(t.decode(std::vector<int>{-1}), ValidationError);
}

TEST(Tokenizer, DeterministicSerialization) {
  std::istringstream a(testing::join_lines(testing::synthetic_lines(SynthLang::a, 60, 1)));
  std::istringstream b(testing::join_lines(testing::synthetic_lines(SynthLang::b, 60, 1)));
  const auto again = train_tokenizer(a, b, {.lines_per_language = 10, .vocab_size = 300, .seed = 9});
  EXPECT_EQ(again.serialize(), toy_tokenizer().serialize());
  EXPECT_EQ(again.hash(), toy_tokenizer().hash());
}

TEST(Tokenizer, SerializeRoundTrip) {
  const auto& t = toy_tokenizer();
  const auto back = TokenizerModel::deserialize(t.serialize());
  EXPECT_EQ(back.pieces(), t.pieces());
  EXPECT_EQ(back.hash(), t.hash());
  const std::string s = "kötü maşayi görür mı .";
  EXPECT_EQ(back.encode(s), t.encode(s));
}

TEST(Tokenizer, SaveLoadFile) {
  const auto dir = testing::scratch_dir("tokenizer");
  toy_tokenizer().save(dir / "tok.bin");
  EXPECT_EQ(TokenizerModel::load(dir / "tok.bin").hash(), toy_tokenizer().hash());
}

TEST(Tokenizer, RejectsCorruptSerialization) {
  std::string bytes = toy_tokenizer().serialize();
  EXPECT_THROW(TokenizerModel::deserialize(bytes.substr(0, bytes.size() - 3)), ValidationError);
  bytes[0] = 'X';
  EXPECT_THROW(TokenizerModel::deserialize(bytes), ValidationError);
}

TEST(Tokenizer, SampleIsBalancedAndExact) {
  // Language A is ten times larger than B; each still contributes exactly n lines.
  std::istringstream big(testing::join_lines(testing::synthetic_lines(SynthLang::a, 500, 3)));
  std::istringstream small(testing::join_lines(testing::synthetic_lines(SynthLang::b, 50, 3)));
  EXPECT_EQ(sample_lines(big, 10, 1).size(), 10u);
  EXPECT_EQ(sample_lines(small, 10, 1).size(), 10u);
}

TEST(Tokenizer, SampleSkipsBlankLinesAndDetectsExhaustion) {
  std::istringstream in("a\n\nb\n\n");
  EXPECT_EQ(sample_lines(in, 2, 0).size(), 2u);
  std::istringstream short_in("a\n\nb\n");
  EXPECT_THROW(sample_lines(short_in, 3, 0), ValidationError);
}

TEST(Tokenizer, SampleDependsOnSeedOnly) {
  const auto text = testing::join_lines(testing::synthetic_lines(SynthLang::a, 200, 3));
  std::istringstream a(text), b(text), c(text);
  const auto s1 = sample_lines(a, 20, 5);
  EXPECT_EQ(s1, sample_lines(b, 20, 5));
  EXPECT_NE(s1, sample_lines(c, 20, 6));
}

TEST(Tokenizer, RejectsTooSmallVocab) {
  std::vector<std::string> lines{"abc"};
  EXPECT_THROW(train_from_lines(lines, kFirstLearnedId), ValidationError);
}

TEST(Tokenizer, TinyCorpusFillsWithUnusedSlots) {
  // Fewer learnable pieces than slots: the table is still exactly vocab_size.
  std::vector<std::string> lines{"ab"};
  const auto t = train_from_lines(lines, 400);
  EXPECT_EQ(t.vocab_size(), 400);
  EXPECT_EQ(t.decode(t.encode("ab ba")), "ab ba");
}

}  // namespace
}  // namespace bilm::tok
