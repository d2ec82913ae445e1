#include <gtest/gtest.h>

#include <numeric>

#include <nlohmann/json.hpp>

#include "bilm/corpus.hpp"
#include "bilm/error.hpp"
#include "bilm/tokenizer.hpp"
#include "synthetic.hpp"

namespace bilm::corpus {
namespace {

std::vector<std::vector<int>> counting_docs(int n_docs, int doc_len) {
  std::vector<std::vector<int>> docs;
  int next = 10;
  for (int d = 0; d < n_docs; ++d) {
    std::vector<int> doc(static_cast<size_t>(doc_len));
    for (int& t : doc) t = next++;
    docs.push_back(doc);
  }
  return docs;
}

TEST(Pack, FloorDivisionRows) {
  const std::vector<std::vector<int>> docs{std::vector<int>(1000, 7)};
  const PackedCorpus p = pack(docs, 256, 1000, 1, tok::kEotId);
  EXPECT_EQ(p.rows(), 3u);
  EXPECT_EQ(p.token_budget_used, 768);
  EXPECT_EQ(p.tokens.size(), 768u);
}

TEST(Pack, FullScaleRowArithmetic) {
  EXPECT_EQ(int64_t{1000000000} / 256, 3906250);
}

TEST(Pack, JoinsDocumentsWithSeparator) {
  const auto docs = counting_docs(4, 3);  // 4*3 + 3 separators = 15 tokens
  const PackedCorpus p = pack(docs, 5, 15, 0, tok::kEotId);
  ASSERT_EQ(p.rows(), 3u);
  std::vector<int32_t> all = p.tokens;
  EXPECT_EQ(std::count(all.begin(), all.end(), tok::kEotId), 3);
  std::sort(all.begin(), all.end());
  std::vector<int32_t> expected{1, 1, 1};
  for (int t = 10; t < 22; ++t) expected.push_back(t);
  EXPECT_EQ(all, expected);
}

TEST(Pack, RowsAreContiguousStreamSlices) {
  const auto docs = counting_docs(1, 40);
  const PackedCorpus p = pack(docs, 8, 40, 3, tok::kEotId);
  for (size_t r = 0; r < p.rows(); ++r) {
    const auto row = p.row(r);
    EXPECT_EQ((row[0] - 10) % 8, 0);
    for (size_t i = 1; i < row.size(); ++i) {
      EXPECT_EQ(row[i], row[i - 1] + 1);
    }
  }
}

TEST(Pack, DeterministicUnderSeed) {
  const auto docs = counting_docs(10, 30);
  const auto a = pack(docs, 16, 256, 11, tok::kEotId);
  const auto b = pack(docs, 16, 256, 11, tok::kEotId);
  const auto c = pack(docs, 16, 256, 12, tok::kEotId);
  EXPECT_EQ(a.tokens, b.tokens);
  EXPECT_NE(a.tokens, c.tokens);
}

TEST(Pack, InsufficientDataIsAnError) {
  const auto docs = counting_docs(1, 10);
  EXPECT_THROW(pack(docs, 4, 100, 0, tok::kEotId), ValidationError);
  EXPECT_THROW(pack(docs, 0, 8, 0, tok::kEotId), ValidationError);
}

TEST(Pack, SaveLoadRoundTrip) {
  const auto dir = testing::scratch_dir("pack");
  PackedCorpus p = pack(counting_docs(5, 20), 8, 64, 4, tok::kEotId);
  p.language = "de";
  p.tokenizer_hash = "abc";
  save_packed(p, dir / "de.bin");
  const PackedCorpus q = load_packed(dir / "de.bin");
  EXPECT_EQ(q.tokens, p.tokens);
  EXPECT_EQ(q.seq_len, 8);
  EXPECT_EQ(q.language, "de");
  EXPECT_EQ(q.tokenizer_hash, "abc");
  EXPECT_EQ(q.content_hash(), p.content_hash());
}

TEST(Schedule, BalancedFromStepZero) {
  const BatchSchedule s = make_schedule(100, 64, 0, 0.5);
  for (int64_t step = 0; step < 100; ++step) {
    EXPECT_EQ(s.at(step), (Composition{32, 32}));
  }
}

TEST(Schedule, OnsetBoundary) {
  const BatchSchedule s = make_schedule(64000, 64, 16000, 0.5);
  EXPECT_EQ(s.at(15999), (Composition{64, 0}));
  EXPECT_EQ(s.at(16000), (Composition{32, 32}));
  EXPECT_THROW(s.at(64000), ValidationError);
  EXPECT_THROW(s.at(-1), ValidationError);
}

TEST(Schedule, OnsetAtEndIsMonolingual) {
  const BatchSchedule s = make_schedule(64000, 64, 64000, 0.5);
  EXPECT_EQ(s.total_l2(), 0);
  EXPECT_EQ(s.at(63999), (Composition{64, 0}));
}

TEST(Schedule, Errors) {
  EXPECT_THROW(make_schedule(100, 64, 101, 0.5), ValidationError);
  EXPECT_THROW(make_schedule(100, 64, 10, 0.3), ValidationError);  // 19.2 rows
  EXPECT_THROW(make_schedule(100, 64, 10, 0.0), ValidationError);
  EXPECT_THROW(make_schedule(100, 64, 10, 1.5), ValidationError);
}

TEST(Schedule, EarlyImbalancedCompositions) {
  EXPECT_EQ(make_early_imbalanced_schedule(64000, 64, 16000).at(0), (Composition{40, 24}));
  EXPECT_EQ(make_early_imbalanced_schedule(64000, 64, 32000).at(0), (Composition{48, 16}));
  EXPECT_EQ(make_early_imbalanced_schedule(64000, 64, 0).at(0), (Composition{32, 32}));
  EXPECT_THROW(make_early_imbalanced_schedule(64000, 64, 1000), ValidationError);
}

TEST(Schedule, EarlyImbalancedConservesTotals) {
  for (int64_t onset : {0, 16000, 32000, 48000}) {
    const auto seq = make_schedule(64000, 64, onset);
    const auto early = make_early_imbalanced_schedule(64000, 64, onset);
    EXPECT_EQ(seq.total_l1(), early.total_l1()) << onset;
    EXPECT_EQ(seq.total_l2(), early.total_l2()) << onset;
  }
}

TEST(Schedule, CumulativeMatchesEnumeration) {
  const auto s = make_schedule(50, 8, 20, 0.25);
  int64_t l1 = 0, l2 = 0;
  for (int64_t step = 0; step < 50; ++step) {
    EXPECT_EQ(s.cumulative_l1(step), l1);
    EXPECT_EQ(s.cumulative_l2(step), l2);
    l1 += s.at(step).n_l1;
    l2 += s.at(step).n_l2;
  }
  EXPECT_EQ(s.total_l1(), l1);
  EXPECT_EQ(s.total_l2(), l2);
}

TEST(Schedule, MonolingualIsL2Only) {
  const auto s = make_monolingual_schedule(10, 4);
  EXPECT_EQ(s.at(0), (Composition{0, 4}));
  EXPECT_EQ(s.total_l1(), 0);
}

TEST(Schedule, JsonRoundTrip) {
  const auto s = make_early_imbalanced_schedule(64000, 64, 16000);
  const auto back = BatchSchedule::from_json(s.to_json());
  EXPECT_EQ(back.mode(), ScheduleMode::early_imbalanced);
  EXPECT_EQ(back.at(5), s.at(5));
  EXPECT_EQ(back.total_steps(), 64000);
  EXPECT_EQ(schedule_mode_from_string(to_string(ScheduleMode::monolingual)),
            ScheduleMode::monolingual);
  EXPECT_THROW(schedule_mode_from_string("bogus"), ValidationError);
}

class BatchTest : public ::testing::Test {
 protected:
  static PackedCorpus make(int first_token, int rows) {
    PackedCorpus p;
    p.seq_len = 4;
    for (int r = 0; r < rows; ++r) {
      for (int i = 0; i < 4; ++i) p.tokens.push_back(first_token + r);
    }
    return p;
  }
  PackedCorpus l1_ = make(1000, 10);
  PackedCorpus l2_ = make(2000, 7);
};

TEST_F(BatchTest, HonoursComposition) {
  const auto s = make_schedule(20, 8, 10, 0.5);
  const Batch early = next_batch(s, 0, l1_, l2_, 3);
  EXPECT_EQ(early.n_l1, 8);
  EXPECT_EQ(early.n_l2, 0);
  for (const auto& row : early.rows) EXPECT_LT(row[0], 2000);
  const Batch late = next_batch(s, 10, l1_, l2_, 3);
  ASSERT_EQ(late.rows.size(), 8u);
  for (int i = 0; i < 4; ++i) EXPECT_LT(late.rows[static_cast<size_t>(i)][0], 2000);
  for (int i = 4; i < 8; ++i) EXPECT_GE(late.rows[static_cast<size_t>(i)][0], 2000);
}

TEST_F(BatchTest, EpochsCoverEveryRowOnce) {
  const auto s = make_monolingual_schedule(7, 1);  // 7 steps x 1 row = one L2 epoch
  std::vector<int> seen;
  for (int64_t step = 0; step < 7; ++step) {
    seen.push_back(next_batch(s, step, l1_, l2_, 5).rows[0][0]);
  }
  std::sort(seen.begin(), seen.end());
  std::vector<int> expected(7);
  std::iota(expected.begin(), expected.end(), 2000);
  EXPECT_EQ(seen, expected);
}

TEST_F(BatchTest, EpochBoundaryReported) {
  const auto s = make_schedule(10, 4, 0, 0.5);  // 2 L2 rows per step, 7 rows per epoch
  const Batch b = next_batch(s, 3, l1_, l2_, 5);  // L2 rows 6 and 7 straddle the boundary
  EXPECT_EQ(b.l2_epochs_started, std::vector<int64_t>{1});
}

TEST_F(BatchTest, DeterministicAndSeedSensitive) {
  const auto s = make_schedule(30, 8, 0, 0.5);
  BatchSampler a(s, l1_, l2_, 9), b(s, l1_, l2_, 9), c(s, l1_, l2_, 10);
  bool any_diff = false;
  for (int64_t step = 0; step < 30; ++step) {
    const Batch x = a.at(step), y = b.at(step), z = c.at(step);
    for (size_t i = 0; i < x.rows.size(); ++i) {
      EXPECT_EQ(x.rows[i][0], y.rows[i][0]);
      any_diff |= x.rows[i][0] != z.rows[i][0];
    }
  }
  EXPECT_TRUE(any_diff);
}

TEST_F(BatchTest, EmptyCorpusWithDemandIsAnError) {
  const auto s = make_schedule(10, 4, 0, 0.5);
  PackedCorpus empty;
  empty.seq_len = 4;
  EXPECT_THROW(next_batch(s, 0, l1_, empty, 1), ValidationError);
  const auto mono = make_schedule(10, 4, 10, 0.5);
  EXPECT_NO_THROW(next_batch(mono, 0, l1_, empty, 1));
}

}  // namespace
}  // namespace bilm::corpus
