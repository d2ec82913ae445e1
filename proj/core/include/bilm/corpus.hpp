#pragma once

// Packing of tokenized documents into fixed-length rows, and the per-step plan
// that decides how many L1 and L2 rows fill each batch.

#include <cstdint>
#include <filesystem>
#include <map>
#include <mutex>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json_fwd.hpp>

namespace bilm::corpus {

struct PackedCorpus {
  std::string language;
  int seq_len = 0;
  uint64_t seed = 0;
  std::string tokenizer_hash;
  int64_t token_budget_used = 0;
  std::vector<int32_t> tokens;  // rows() * seq_len ids, row-major

  size_t rows() const { return seq_len > 0 ? tokens.size() / static_cast<size_t>(seq_len) : 0; }
  std::span<const int32_t> row(size_t i) const {
    return {tokens.data() + i * static_cast<size_t>(seq_len), static_cast<size_t>(seq_len)};
  }
  // SHA-256 over the token payload and sidecar fields.
  std::string content_hash() const;
};

// Joins documents with the end-of-text separator, cuts the stream into rows of
// seq_len (dropping the trailing partial row), shuffles rows under `seed` and
// keeps floor(budget_tokens / seq_len) of them. Throws ValidationError when
// the joined stream is shorter than budget_tokens.
PackedCorpus pack(std::span<const std::vector<int>> documents, int seq_len,
                  int64_t budget_tokens, uint64_t seed, int separator_id);

// Flat little-endian uint32 payload at `path` plus a JSON sidecar at path + ".json".
void save_packed(const PackedCorpus& corpus, const std::filesystem::path& path);
PackedCorpus load_packed(const std::filesystem::path& path);

enum class ScheduleMode { sequential_onset, early_imbalanced, monolingual };

std::string to_string(ScheduleMode mode);
ScheduleMode schedule_mode_from_string(const std::string& s);

struct Composition {
  int n_l1 = 0;
  int n_l2 = 0;
  bool operator==(const Composition&) const = default;
};

// Piecewise-constant composition: `before` for steps < onset_step, `after` from
// onset_step on. Early-imbalanced and monolingual schedules have onset 0.
class BatchSchedule {
 public:
  BatchSchedule(ScheduleMode mode, int64_t total_steps, int batch_size, int64_t onset_step,
                Composition before, Composition after);

  ScheduleMode mode() const { return mode_; }
  int64_t total_steps() const { return total_steps_; }
  int batch_size() const { return batch_size_; }
  int64_t onset_step() const { return onset_step_; }
  Composition before_onset() const { return before_; }
  Composition after_onset() const { return after_; }

  // Throws ValidationError for step outside [0, total_steps).
  Composition at(int64_t step) const;
  // Rows of each language consumed by steps [0, step).
  int64_t cumulative_l1(int64_t step) const;
  int64_t cumulative_l2(int64_t step) const;
  int64_t total_l1() const { return cumulative_l1(total_steps_); }
  int64_t total_l2() const { return cumulative_l2(total_steps_); }

  nlohmann::json to_json() const;
  static BatchSchedule from_json(const nlohmann::json& j);

 private:
  ScheduleMode mode_;
  int64_t total_steps_;
  int batch_size_;
  int64_t onset_step_;
  Composition before_;
  Composition after_;
};

// L1-only before onset_step, then (B - k, k) with k = fraction * B.
BatchSchedule make_schedule(int64_t total_steps, int batch_size, int64_t onset_step,
                            double post_onset_l2_fraction = 0.5);

// Constant composition from step 0 whose totals equal the sequential schedule
// with onset matched_onset.
BatchSchedule make_early_imbalanced_schedule(int64_t total_steps, int batch_size,
                                             int64_t matched_onset,
                                             double post_onset_l2_fraction = 0.5);

// L2 rows only; used for the monolingual baseline that shares the bilingual tokenizer.
BatchSchedule make_monolingual_schedule(int64_t total_steps, int batch_size);

struct Batch {
  int64_t step = 0;
  int n_l1 = 0;
  int n_l2 = 0;
  // Row views into the packed corpora: n_l1 L1 rows followed by n_l2 L2 rows.
  std::vector<std::span<const int32_t>> rows;
  // Epoch indices that began within this batch, per language.
  std::vector<int64_t> l1_epochs_started;
  std::vector<int64_t> l2_epochs_started;
};

// Deterministic row selection. Row g of a language (counting from the start of
// training) is permutation_{epoch}[g mod N] with epoch = g / N, and each epoch
// permutation is derived from (seed, language, epoch). A batch is therefore a
// pure function of (schedule, step, seed). Permutations are cached; at() is
// safe to call from several threads.
class BatchSampler {
 public:
  BatchSampler(const BatchSchedule& schedule, const PackedCorpus& l1, const PackedCorpus& l2,
               uint64_t seed);

  Batch at(int64_t step) const;

 private:
  uint32_t row_index(int language, int64_t epoch, size_t position) const;
  void take(int language, const PackedCorpus& corpus, int64_t start, int count, Batch& batch,
            std::vector<int64_t>& epochs_started) const;

  const BatchSchedule& schedule_;
  const PackedCorpus& l1_;
  const PackedCorpus& l2_;
  uint64_t seed_;
  mutable std::mutex mutex_;
  mutable std::map<std::pair<int, int64_t>, std::vector<uint32_t>> permutations_;
};

Batch next_batch(const BatchSchedule& schedule, int64_t step, const PackedCorpus& l1,
                 const PackedCorpus& l2, uint64_t seed);

}  // namespace bilm::corpus
