#pragma once

// Minimal-pair scoring with optional cross-lingual primes, accuracy and
// interference metrics, and learner-group preference scoring.

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json_fwd.hpp>

#include "bilm/model.hpp"
#include "bilm/tokenizer.hpp"

namespace bilm::eval {

enum class PrimeMode { none, aligned, shuffled, random };

std::string to_string(PrimeMode mode);
PrimeMode prime_mode_from_string(const std::string& s);

struct MinimalPairRecord {
  std::string id;
  std::string phenomenon;
  std::string s_acc;
  std::string s_unacc;
  std::optional<std::string> prime;
  std::optional<std::string> learner_l1;
};

struct PrimeEntry {
  std::string id;
  std::string prime_text;
  std::string source_tag;
};

using PrimeMap = std::map<std::string, PrimeEntry>;

struct Dataset {
  std::vector<MinimalPairRecord> records;
  // Records dropped by the loader, keyed by phenomenon tag.
  std::map<std::string, size_t> skipped;

  // True when every record carries a prime, enabling aligned/shuffled modes.
  bool fully_primed() const;
};

// JSON lines with id, phenomenon, sentence_good, sentence_bad and optional
// learner_l1. Schema violations name the offending line.
Dataset parse_pairs(std::istream& in, const std::string& source);
Dataset load_blimp(const std::filesystem::path& path);
// Like load_blimp but requires learner_l1 and skips spelling / punctuation tags.
Dataset parse_fce_pairs(std::istream& in, const std::string& source);
Dataset load_fce_pairs(const std::filesystem::path& path);

// JSON lines with id, prime_text, source_tag.
PrimeMap parse_prime_file(std::istream& in, const std::string& source);
PrimeMap load_prime_file(const std::filesystem::path& path);
// Sets record.prime from the map; a prime whose id has no pair is an error.
void attach_primes(Dataset& dataset, const PrimeMap& primes);

struct PairVerdict {
  std::string id;
  std::string phenomenon;
  double norm_logprob_acc = 0.0;
  double norm_logprob_unacc = 0.0;
  int n_tokens_acc = 0;
  int n_tokens_unacc = 0;
  bool correct = false;
  bool tie = false;
  bool prime_truncated = false;
  std::string prime_source_id;  // id of the record whose prime was used (random mode differs)
};

// Conditioning context actually placed before the target sentence.
struct PreparedPrime {
  std::vector<int> ids;
  std::string source_id;
};

struct SentenceScore {
  model::LogProb logprob;
  bool prime_truncated = false;

  double normalized() const { return logprob.sum / logprob.n_tokens; }
};

// Scores sentences against an immutable model. Const methods are safe to
// call concurrently.
class Scorer {
 public:
  Scorer(const model::ModelState& model, const tok::TokenizerModel& tokenizer);

  const model::ModelState& model() const { return model_; }
  const tok::TokenizerModel& tokenizer() const { return tokenizer_; }

  // Token ids of the prime for `pair` under `mode`. Shuffled mode permutes the
  // aligned prime's ids; random mode draws another record's prime from `pool`.
  PreparedPrime prepare_prime(const MinimalPairRecord& pair, PrimeMode mode, uint64_t seed,
                              std::span<const MinimalPairRecord> pool) const;

  // Sequence is <eot> [prime <sep>] sentence; only sentence tokens are scored.
  // Overlong primes lose tokens from the left.
  SentenceScore score_sentence(std::span<const int> prime_ids, std::string_view sentence) const;

  PairVerdict score_pair(const MinimalPairRecord& pair, PrimeMode mode, uint64_t seed,
                         std::span<const MinimalPairRecord> pool = {}) const;

 private:
  const model::ModelState& model_;
  const tok::TokenizerModel& tokenizer_;
};

struct GroupAccuracy {
  size_t n = 0;
  size_t correct = 0;
  size_t ties = 0;
  double accuracy() const { return n == 0 ? 0.0 : static_cast<double>(correct) / n; }
};

struct AccuracyReport {
  PrimeMode mode = PrimeMode::none;
  uint64_t seed = 0;
  GroupAccuracy overall;
  std::map<std::string, GroupAccuracy> per_phenomenon;
  std::vector<PairVerdict> verdicts;

  double accuracy() const { return overall.accuracy(); }
  nlohmann::json to_json() const;  // aggregates only
  static AccuracyReport from_json(const nlohmann::json& j);  // verdicts are not restored
  std::string verdicts_csv() const;
};

AccuracyReport summarize(std::vector<PairVerdict> verdicts, PrimeMode mode = PrimeMode::none,
                         uint64_t seed = 0);
AccuracyReport accuracy(const Scorer& scorer, std::span<const MinimalPairRecord> dataset,
                        PrimeMode mode, uint64_t seed);

struct PhenomenonDelta {
  std::string phenomenon;
  double delta = 0.0;  // primed - unprimed accuracy
};

// Phenomena whose primed accuracy exceeds the unprimed one by more than threshold.
std::vector<PhenomenonDelta> significant_phenomena(const AccuracyReport& unprimed,
                                                   const AccuracyReport& primed,
                                                   double threshold = 0.02);

// (acc_mono - acc_bi) / acc_mono; positive values mean interference.
double cli_effect(double acc_mono, double acc_bi);

struct CliReport {
  double acc_monolingual = 0.0;
  double acc_bilingual = 0.0;
  double cli_value = 0.0;
  struct Row {
    double acc_monolingual = 0.0;
    double acc_bilingual = 0.0;
    std::optional<double> cli_value;  // absent when the baseline scored 0
  };
  std::map<std::string, Row> per_phenomenon;
  int64_t onset = 0;
  std::string prime_mode;
  std::string l1;

  nlohmann::json to_json() const;
};

CliReport make_cli_report(const AccuracyReport& monolingual, const AccuracyReport& bilingual,
                          int64_t onset, const std::string& l1);

struct DeltaSResult {
  std::vector<std::string> groups;
  std::vector<uint64_t> seeds;
  size_t sample_size = 0;                      // per group, per seed
  std::vector<std::vector<std::vector<size_t>>> samples;  // [seed][group] record indices
  std::vector<std::vector<double>> gaps;       // [seed][group]
  std::vector<std::vector<double>> delta_s;    // [seed][group]
  std::vector<bool> flagged;                   // [seed] denominator <= 0
  std::vector<double> mean;                    // [group]
  std::vector<double> stddev;                  // [group], population spread over seeds

  nlohmann::json to_json() const;
};

// gap / sum(gaps). `flagged` is set when the sum is not positive; values are
// then reported raw (and may be infinite when the sum is zero).
std::vector<double> delta_s_from_gaps(std::span<const double> gaps, bool* flagged = nullptr);

// Undersamples every group to the smallest group's size per seed
// (seed_i = base_seed + i) and normalises the summed gaps.
DeltaSResult delta_s_from_record_gaps(const std::map<std::string, std::vector<double>>& gaps,
                                      int n_seeds, uint64_t base_seed);

// Scores every record once (gap = normalised logprob difference) and groups
// by learner_l1.
DeltaSResult fce_delta_s(const Scorer& scorer, std::span<const MinimalPairRecord> records,
                         int n_seeds = 5, uint64_t base_seed = 0);

}  // namespace bilm::eval
