#include "bilm/corpus.hpp"

#include <cmath>

#include <nlohmann/json.hpp>

#include "bilm/binary_io.hpp"
#include "bilm/error.hpp"
#include "bilm/file_util.hpp"
#include "bilm/hash.hpp"
#include "bilm/rng.hpp"

namespace bilm::corpus {
namespace {

int integral_l2_count(int batch_size, double fraction) {
  if (!(fraction > 0.0 && fraction <= 1.0)) {
    throw ValidationError("post_onset_l2_fraction must be in (0, 1]");
  }
  const double k = fraction * batch_size;
  const double rounded = std::round(k);
  if (std::abs(k - rounded) > 1e-9) {
    throw ValidationError("non-integral composition: " + std::to_string(fraction) + " x " +
                          std::to_string(batch_size) + " is not an integer");
  }
  return static_cast<int>(rounded);
}

void check_common(int64_t total_steps, int batch_size) {
  if (total_steps <= 0 || batch_size <= 0) {
    throw ValidationError("total_steps and batch_size must be positive");
  }
}

}  // namespace

std::string PackedCorpus::content_hash() const {
  std::string buf;
  buf.reserve(tokens.size() * 4 + 128);
  buf += language + '\n' + std::to_string(seq_len) + '\n' + std::to_string(seed) + '\n' +
         tokenizer_hash + '\n';
  for (const int32_t t : tokens) {
    binio::put<uint32_t>(buf, static_cast<uint32_t>(t));
  }
  return sha256_hex(buf);
}

PackedCorpus pack(std::span<const std::vector<int>> documents, int seq_len,
                  int64_t budget_tokens, uint64_t seed, int separator_id) {
  if (seq_len <= 0 || budget_tokens <= 0) {
    throw ValidationError("pack: seq_len and budget_tokens must be positive");
  }
  std::vector<int32_t> stream;
  for (size_t d = 0; d < documents.size(); ++d) {
    if (d > 0) {
      stream.push_back(separator_id);
    }
    stream.insert(stream.end(), documents[d].begin(), documents[d].end());
  }
  if (static_cast<int64_t>(stream.size()) < budget_tokens) {
    throw ValidationError("pack: insufficient data, stream has " + std::to_string(stream.size()) +
                          " tokens but budget is " + std::to_string(budget_tokens));
  }
  const size_t len = static_cast<size_t>(seq_len);
  const size_t available_rows = stream.size() / len;
  const size_t keep_rows = static_cast<size_t>(budget_tokens / seq_len);
  if (keep_rows == 0) {
    throw ValidationError("pack: budget smaller than one row");
  }

  std::vector<uint32_t> order(available_rows);
  for (size_t i = 0; i < available_rows; ++i) {
    order[i] = static_cast<uint32_t>(i);
  }
  Rng rng(seed);
  rng.shuffle(std::span<uint32_t>(order));

  PackedCorpus out;
  out.seq_len = seq_len;
  out.seed = seed;
  out.tokens.reserve(keep_rows * len);
  for (size_t r = 0; r < keep_rows; ++r) {
    const auto begin = stream.begin() + static_cast<std::ptrdiff_t>(order[r] * len);
    out.tokens.insert(out.tokens.end(), begin, begin + static_cast<std::ptrdiff_t>(len));
  }
  out.token_budget_used = static_cast<int64_t>(keep_rows * len);
  return out;
}

void save_packed(const PackedCorpus& corpus, const std::filesystem::path& path) {
  std::string payload;
  payload.reserve(corpus.tokens.size() * 4);
  for (const int32_t t : corpus.tokens) {
    binio::put<uint32_t>(payload, static_cast<uint32_t>(t));
  }
  write_file_atomic(path, payload);
  const nlohmann::json sidecar = {
      {"language", corpus.language},
      {"seq_len", corpus.seq_len},
      {"rows", corpus.rows()},
      {"seed", corpus.seed},
      {"tokenizer_hash", corpus.tokenizer_hash},
      {"token_budget_used", corpus.token_budget_used},
  };
  std::filesystem::path side = path;
  side += ".json";
  write_file_atomic(side, sidecar.dump(2) + "\n");
}

PackedCorpus load_packed(const std::filesystem::path& path) {
  std::filesystem::path side = path;
  side += ".json";
  nlohmann::json meta;
  try {
    meta = nlohmann::json::parse(read_file(side));
  } catch (const nlohmann::json::exception& e) {
    throw ValidationError("packed corpus sidecar " + side.string() + ": " + e.what());
  }
  PackedCorpus c;
  c.language = meta.value("language", "");
  c.seq_len = meta.at("seq_len").get<int>();
  c.seed = meta.at("seed").get<uint64_t>();
  c.tokenizer_hash = meta.value("tokenizer_hash", "");
  c.token_budget_used = meta.value("token_budget_used", int64_t{0});
  const auto rows = meta.at("rows").get<size_t>();
  const std::string payload = read_file(path);
  if (c.seq_len <= 0 || payload.size() != rows * static_cast<size_t>(c.seq_len) * 4) {
    throw ValidationError("packed corpus " + path.string() + ": payload size mismatch");
  }
  binio::Reader r(payload);
  c.tokens.resize(payload.size() / 4);
  for (auto& t : c.tokens) {
    t = static_cast<int32_t>(r.get<uint32_t>());
  }
  return c;
}

std::string to_string(ScheduleMode mode) {
  switch (mode) {
    case ScheduleMode::sequential_onset:
      return "sequential-onset";
    case ScheduleMode::early_imbalanced:
      return "early-imbalanced";
    case ScheduleMode::monolingual:
      return "monolingual";
  }
  return "unknown";
}

ScheduleMode schedule_mode_from_string(const std::string& s) {
  if (s == "sequential-onset") return ScheduleMode::sequential_onset;
  if (s == "early-imbalanced") return ScheduleMode::early_imbalanced;
  if (s == "monolingual") return ScheduleMode::monolingual;
  throw ValidationError("unknown schedule mode '" + s + "'");
}

BatchSchedule::BatchSchedule(ScheduleMode mode, int64_t total_steps, int batch_size,
                             int64_t onset_step, Composition before, Composition after)
    : mode_(mode),
      total_steps_(total_steps),
      batch_size_(batch_size),
      onset_step_(onset_step),
      before_(before),
      after_(after) {
  check_common(total_steps, batch_size);
  if (onset_step < 0 || onset_step > total_steps) {
    throw ValidationError("onset_step " + std::to_string(onset_step) + " outside [0, " +
                          std::to_string(total_steps) + "]");
  }
  for (const Composition c : {before, after}) {
    if (c.n_l1 < 0 || c.n_l2 < 0 || c.n_l1 + c.n_l2 != batch_size) {
      throw ValidationError("composition must be non-negative and sum to batch_size");
    }
  }
}

Composition BatchSchedule::at(int64_t step) const {
  if (step < 0 || step >= total_steps_) {
    throw ValidationError("step " + std::to_string(step) + " outside schedule of " +
                          std::to_string(total_steps_) + " steps");
  }
  return step < onset_step_ ? before_ : after_;
}

int64_t BatchSchedule::cumulative_l1(int64_t step) const {
  const int64_t pre = std::min(step, onset_step_);
  const int64_t post = std::max<int64_t>(0, step - onset_step_);
  return pre * before_.n_l1 + post * after_.n_l1;
}

int64_t BatchSchedule::cumulative_l2(int64_t step) const {
  const int64_t pre = std::min(step, onset_step_);
  const int64_t post = std::max<int64_t>(0, step - onset_step_);
  return pre * before_.n_l2 + post * after_.n_l2;
}

nlohmann::json BatchSchedule::to_json() const {
  return {{"mode", to_string(mode_)},
          {"total_steps", total_steps_},
          {"batch_size", batch_size_},
          {"onset_step", onset_step_},
          {"before_onset", {before_.n_l1, before_.n_l2}},
          {"after_onset", {after_.n_l1, after_.n_l2}}};
}

BatchSchedule BatchSchedule::from_json(const nlohmann::json& j) {
  const auto before = j.at("before_onset").get<std::vector<int>>();
  const auto after = j.at("after_onset").get<std::vector<int>>();
  if (before.size() != 2 || after.size() != 2) {
    throw ValidationError("schedule composition must be [n_l1, n_l2]");
  }
  return BatchSchedule(schedule_mode_from_string(j.at("mode").get<std::string>()),
                       j.at("total_steps").get<int64_t>(), j.at("batch_size").get<int>(),
                       j.at("onset_step").get<int64_t>(), {before[0], before[1]},
                       {after[0], after[1]});
}

BatchSchedule make_schedule(int64_t total_steps, int batch_size, int64_t onset_step,
                            double post_onset_l2_fraction) {
  check_common(total_steps, batch_size);
  const int k = integral_l2_count(batch_size, post_onset_l2_fraction);
  return BatchSchedule(ScheduleMode::sequential_onset, total_steps, batch_size, onset_step,
                       {batch_size, 0}, {batch_size - k, k});
}

BatchSchedule make_early_imbalanced_schedule(int64_t total_steps, int batch_size,
                                             int64_t matched_onset,
                                             double post_onset_l2_fraction) {
  const BatchSchedule matched =
      make_schedule(total_steps, batch_size, matched_onset, post_onset_l2_fraction);
  const int64_t l1_total = matched.total_l1();
  if (l1_total % total_steps != 0) {
    throw ValidationError("non-integral composition: " + std::to_string(l1_total) +
                          " L1 rows do not divide evenly over " + std::to_string(total_steps) +
                          " steps");
  }
  const int n_l1 = static_cast<int>(l1_total / total_steps);
  const Composition c{n_l1, batch_size - n_l1};
  return BatchSchedule(ScheduleMode::early_imbalanced, total_steps, batch_size, 0, c, c);
}

BatchSchedule make_monolingual_schedule(int64_t total_steps, int batch_size) {
  check_common(total_steps, batch_size);
  const Composition c{0, batch_size};
  return BatchSchedule(ScheduleMode::monolingual, total_steps, batch_size, 0, c, c);
}

BatchSampler::BatchSampler(const BatchSchedule& schedule, const PackedCorpus& l1,
                           const PackedCorpus& l2, uint64_t seed)
    : schedule_(schedule), l1_(l1), l2_(l2), seed_(seed) {}

uint32_t BatchSampler::row_index(int language, int64_t epoch, size_t position) const {
  std::lock_guard lock(mutex_);
  auto it = permutations_.find({language, epoch});
  if (it != permutations_.end()) {
    return it->second[position];
  }
  const size_t n = language == 1 ? l1_.rows() : l2_.rows();
  std::vector<uint32_t> perm(n);
  for (size_t i = 0; i < n; ++i) {
    perm[i] = static_cast<uint32_t>(i);
  }
  Rng rng(mix_seed(mix_seed(seed_, static_cast<uint64_t>(language)),
                   static_cast<uint64_t>(epoch)));
  rng.shuffle(std::span<uint32_t>(perm));
  // In step order an epoch is never revisited once the next one has started.
  std::erase_if(permutations_, [&](const auto& entry) {
    return entry.first.first == language && entry.first.second + 1 < epoch;
  });
  return permutations_.emplace(std::make_pair(language, epoch), std::move(perm))
      .first->second[position];
}

void BatchSampler::take(int language, const PackedCorpus& corpus, int64_t start, int count,
                        Batch& batch, std::vector<int64_t>& epochs_started) const {
  if (count == 0) {
    return;
  }
  const auto n = static_cast<int64_t>(corpus.rows());
  if (n == 0) {
    throw ValidationError("empty corpus for L" + std::to_string(language) + " with " +
                          std::to_string(count) + " rows requested");
  }
  for (int64_t g = start; g < start + count; ++g) {
    const int64_t epoch = g / n;
    if (g % n == 0) {
      epochs_started.push_back(epoch);
    }
    const uint32_t idx = row_index(language, epoch, static_cast<size_t>(g % n));
    batch.rows.push_back(corpus.row(idx));
  }
}

Batch BatchSampler::at(int64_t step) const {
  const Composition c = schedule_.at(step);
  Batch batch;
  batch.step = step;
  batch.n_l1 = c.n_l1;
  batch.n_l2 = c.n_l2;
  batch.rows.reserve(static_cast<size_t>(schedule_.batch_size()));
  take(1, l1_, schedule_.cumulative_l1(step), c.n_l1, batch, batch.l1_epochs_started);
  take(2, l2_, schedule_.cumulative_l2(step), c.n_l2, batch, batch.l2_epochs_started);
  return batch;
}

Batch next_batch(const BatchSchedule& schedule, int64_t step, const PackedCorpus& l1,
                 const PackedCorpus& l2, uint64_t seed) {
  return BatchSampler(schedule, l1, l2, seed).at(step);
}

}  // namespace bilm::corpus
