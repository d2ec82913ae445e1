#include "bilm/evalsuite.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>
#include <set>
#include <sstream>

#include <nlohmann/json.hpp>

#include "bilm/csv.hpp"
#include "bilm/error.hpp"
#include "bilm/rng.hpp"

namespace bilm::eval {

std::string to_string(PrimeMode mode) {
  switch (mode) {
    case PrimeMode::none: return "none";
    case PrimeMode::aligned: return "aligned";
    case PrimeMode::shuffled: return "shuffled";
    case PrimeMode::random: return "random";
  }
  return "none";
}

PrimeMode prime_mode_from_string(const std::string& s) {
  if (s == "none") return PrimeMode::none;
  if (s == "aligned") return PrimeMode::aligned;
  if (s == "shuffled") return PrimeMode::shuffled;
  if (s == "random") return PrimeMode::random;
  throw ValidationError("unknown prime mode '" + s + "' (expected none|aligned|shuffled|random)");
}

bool Dataset::fully_primed() const {
  return !records.empty() &&
         std::all_of(records.begin(), records.end(), [](const auto& r) { return r.prime.has_value(); });
}

// ----------------------------------------------------------------------------
// Loaders
// ----------------------------------------------------------------------------
namespace {

std::string where(const std::string& source, size_t line) {
  return source + ":" + std::to_string(line);
}

std::string required_string(const nlohmann::json& j, const char* key, const std::string& at) {
  if (!j.contains(key)) {
    throw ValidationError(at + ": missing field '" + key + "'");
  }
  if (!j.at(key).is_string()) {
    throw ValidationError(at + ": field '" + key + "' must be a string");
  }
  std::string value = j.at(key).get<std::string>();
  if (value.empty()) {
    throw ValidationError(at + ": field '" + key + "' is empty");
  }
  return value;
}

template <class Fn>
void for_each_json_line(std::istream& in, const std::string& source, Fn&& fn) {
  std::string line;
  size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.find_first_not_of(" \t\r") == std::string::npos) {
      continue;
    }
    nlohmann::json j;
    try {
      j = nlohmann::json::parse(line);
    } catch (const nlohmann::json::parse_error& e) {
      throw ValidationError(where(source, line_no) + ": invalid JSON (" + e.what() + ")");
    }
    if (!j.is_object()) {
      throw ValidationError(where(source, line_no) + ": expected a JSON object");
    }
    fn(j, where(source, line_no));
  }
}

bool excluded_fce_tag(std::string tag) {
  std::transform(tag.begin(), tag.end(), tag.begin(),
                 [](unsigned char c) { return static_cast<char>(std::tolower(c)); });
  return tag == "spelling" || tag == "punctuation";
}

Dataset parse_records(std::istream& in, const std::string& source, bool fce) {
  Dataset ds;
  std::set<std::string> ids;
  for_each_json_line(in, source, [&](const nlohmann::json& j, const std::string& at) {
    MinimalPairRecord r;
    r.id = required_string(j, "id", at);
    r.phenomenon = required_string(j, "phenomenon", at);
    r.s_acc = required_string(j, "sentence_good", at);
    r.s_unacc = required_string(j, "sentence_bad", at);
    if (fce || j.contains("learner_l1")) {
      r.learner_l1 = required_string(j, "learner_l1", at);
    }
    if (!ids.insert(r.id).second) {
      throw ValidationError(at + ": duplicate id '" + r.id + "'");
    }
    if (r.s_acc == r.s_unacc) {
      throw ValidationError(at + ": sentence_good equals sentence_bad");
    }
    if (fce && excluded_fce_tag(r.phenomenon)) {
      ++ds.skipped[r.phenomenon];
      return;
    }
    ds.records.push_back(std::move(r));
  });
  return ds;
}

std::ifstream open_input(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) {
    throw ValidationError("cannot open " + path.string());
  }
  return in;
}

}  // namespace

Dataset parse_pairs(std::istream& in, const std::string& source) {
  return parse_records(in, source, false);
}

Dataset load_blimp(const std::filesystem::path& path) {
  auto in = open_input(path);
  return parse_pairs(in, path.string());
}

Dataset parse_fce_pairs(std::istream& in, const std::string& source) {
  return parse_records(in, source, true);
}

Dataset load_fce_pairs(const std::filesystem::path& path) {
  auto in = open_input(path);
  return parse_fce_pairs(in, path.string());
}

PrimeMap parse_prime_file(std::istream& in, const std::string& source) {
  PrimeMap primes;
  for_each_json_line(in, source, [&](const nlohmann::json& j, const std::string& at) {
    PrimeEntry p;
    p.id = required_string(j, "id", at);
    p.prime_text = required_string(j, "prime_text", at);
    p.source_tag = required_string(j, "source_tag", at);
    if (primes.contains(p.id)) {
      throw ValidationError(at + ": duplicate prime id '" + p.id + "'");
    }
    primes.emplace(p.id, std::move(p));
  });
  return primes;
}

PrimeMap load_prime_file(const std::filesystem::path& path) {
  auto in = open_input(path);
  return parse_prime_file(in, path.string());
}

void attach_primes(Dataset& dataset, const PrimeMap& primes) {
  std::map<std::string, MinimalPairRecord*> by_id;
  for (auto& r : dataset.records) {
    by_id.emplace(r.id, &r);
  }
  for (const auto& [id, p] : primes) {
    const auto it = by_id.find(id);
    if (it == by_id.end()) {
      throw ValidationError("prime '" + id + "' has no matching pair");
    }
    it->second->prime = p.prime_text;
  }
}

// ----------------------------------------------------------------------------
// Scoring
// ----------------------------------------------------------------------------

Scorer::Scorer(const model::ModelState& model, const tok::TokenizerModel& tokenizer)
    : model_(model), tokenizer_(tokenizer) {
  if (tokenizer.vocab_size() != model.config.vocab_size) {
    throw ValidationError("tokenizer vocabulary (" + std::to_string(tokenizer.vocab_size()) +
                          ") differs from model vocabulary (" +
                          std::to_string(model.config.vocab_size) + ")");
  }
  if (!model.tokenizer_hash.empty() && model.tokenizer_hash != tokenizer.hash()) {
    throw ValidationError("tokenizer hash does not match the model's tokenizer");
  }
}

PreparedPrime Scorer::prepare_prime(const MinimalPairRecord& pair, PrimeMode mode, uint64_t seed,
                                    std::span<const MinimalPairRecord> pool) const {
  PreparedPrime out;
  if (mode == PrimeMode::none) {
    return out;
  }
  Rng rng(mix_seed(seed, string_seed(pair.id)));
  if (mode == PrimeMode::random) {
    std::vector<const MinimalPairRecord*> candidates;
    for (const auto& r : pool) {
      if (r.prime && r.id != pair.id) {
        candidates.push_back(&r);
      }
    }
    // Draw by id so the choice does not depend on dataset order.
    std::sort(candidates.begin(), candidates.end(),
              [](const auto* a, const auto* b) { return a->id < b->id; });
    if (candidates.empty()) {
      throw ValidationError("random prime mode needs a pool with primes other than '" + pair.id + "'");
    }
    const MinimalPairRecord* chosen = candidates[rng.below(candidates.size())];
    out.ids = tokenizer_.encode(*chosen->prime);
    out.source_id = chosen->id;
    return out;
  }
  if (!pair.prime) {
    throw ValidationError("pair '" + pair.id + "' has no prime for " + to_string(mode) + " mode");
  }
  out.ids = tokenizer_.encode(*pair.prime);
  out.source_id = pair.id;
  if (mode == PrimeMode::shuffled) {
    rng.shuffle(std::span<int>(out.ids));
  }
  return out;
}

SentenceScore Scorer::score_sentence(std::span<const int> prime_ids,
                                     std::string_view sentence) const {
  const std::vector<int> target = tokenizer_.encode(sentence);
  if (target.empty()) {
    throw ValidationError("cannot score an empty sentence");
  }
  const size_t max_len = static_cast<size_t>(model_.config.max_seq_len);
  if (1 + target.size() > max_len) {
    throw ValidationError("sentence of " + std::to_string(target.size()) +
                          " tokens exceeds max_seq_len");
  }
  SentenceScore out;
  std::vector<int> seq{tok::kEotId};
  if (!prime_ids.empty()) {
    // Room for <eot>, the prime, <sep> and the target.
    const size_t room = max_len - 1 - target.size();
    size_t keep = prime_ids.size();
    if (room < 1 + prime_ids.size()) {
      keep = room > 0 ? room - 1 : 0;
      out.prime_truncated = true;
    }
    if (keep > 0) {
      seq.insert(seq.end(), prime_ids.end() - static_cast<std::ptrdiff_t>(keep), prime_ids.end());
      seq.push_back(tok::kSepId);
    }
  }
  const int start = static_cast<int>(seq.size());
  seq.insert(seq.end(), target.begin(), target.end());
  out.logprob = model::sequence_logprob(model_, seq, start, static_cast<int>(seq.size()));
  return out;
}

PairVerdict Scorer::score_pair(const MinimalPairRecord& pair, PrimeMode mode, uint64_t seed,
                               std::span<const MinimalPairRecord> pool) const {
  const PreparedPrime prime = prepare_prime(pair, mode, seed, pool);
  const SentenceScore acc = score_sentence(prime.ids, pair.s_acc);
  const SentenceScore unacc = score_sentence(prime.ids, pair.s_unacc);
  PairVerdict v;
  v.id = pair.id;
  v.phenomenon = pair.phenomenon;
  v.norm_logprob_acc = acc.normalized();
  v.norm_logprob_unacc = unacc.normalized();
  v.n_tokens_acc = acc.logprob.n_tokens;
  v.n_tokens_unacc = unacc.logprob.n_tokens;
  v.tie = v.norm_logprob_acc == v.norm_logprob_unacc;
  v.correct = v.norm_logprob_acc > v.norm_logprob_unacc;
  v.prime_truncated = acc.prime_truncated || unacc.prime_truncated;
  v.prime_source_id = prime.source_id;
  return v;
}

// ----------------------------------------------------------------------------
// Aggregates
// ----------------------------------------------------------------------------

AccuracyReport summarize(std::vector<PairVerdict> verdicts, PrimeMode mode, uint64_t seed) {
  AccuracyReport report;
  report.mode = mode;
  report.seed = seed;
  for (const PairVerdict& v : verdicts) {
    for (GroupAccuracy* g : {&report.overall, &report.per_phenomenon[v.phenomenon]}) {
      ++g->n;
      g->correct += v.correct ? 1 : 0;
      g->ties += v.tie ? 1 : 0;
    }
  }
  report.verdicts = std::move(verdicts);
  return report;
}

AccuracyReport accuracy(const Scorer& scorer, std::span<const MinimalPairRecord> dataset,
                        PrimeMode mode, uint64_t seed) {
  if (dataset.empty()) {
    throw ValidationError("accuracy: dataset is empty");
  }
  std::vector<PairVerdict> verdicts;
  verdicts.reserve(dataset.size());
  for (const auto& pair : dataset) {
    verdicts.push_back(scorer.score_pair(pair, mode, seed, dataset));
  }
  return summarize(std::move(verdicts), mode, seed);
}

nlohmann::json AccuracyReport::to_json() const {
  nlohmann::json per = nlohmann::json::object();
  for (const auto& [name, g] : per_phenomenon) {
    per[name] = {{"n", g.n}, {"correct", g.correct}, {"ties", g.ties}, {"accuracy", g.accuracy()}};
  }
  size_t truncated = 0;
  for (const auto& v : verdicts) {
    truncated += v.prime_truncated ? 1 : 0;
  }
  return {{"prime_mode", eval::to_string(mode)},
          {"seed", seed},
          {"n", overall.n},
          {"correct", overall.correct},
          {"ties", overall.ties},
          {"accuracy", overall.accuracy()},
          {"primes_truncated", truncated},
          {"per_phenomenon", per}};
}

AccuracyReport AccuracyReport::from_json(const nlohmann::json& j) {
  const auto group = [](const nlohmann::json& g) {
    GroupAccuracy out;
    out.n = g.at("n").get<size_t>();
    out.correct = g.at("correct").get<size_t>();
    out.ties = g.at("ties").get<size_t>();
    return out;
  };
  AccuracyReport r;
  r.mode = prime_mode_from_string(j.at("prime_mode").get<std::string>());
  r.seed = j.at("seed").get<uint64_t>();
  r.overall = group(j);
  for (const auto& [name, g] : j.at("per_phenomenon").items()) {
    r.per_phenomenon.emplace(name, group(g));
  }
  return r;
}

std::string AccuracyReport::verdicts_csv() const {
  std::string out =
      "id,phenomenon,prime_mode,norm_logprob_acc,norm_logprob_unacc,n_tokens_acc,"
      "n_tokens_unacc,correct,tie,prime_truncated,prime_source_id\n";
  for (const auto& v : verdicts) {
    out += csv_field(v.id) + ',' + csv_field(v.phenomenon) + ',' + eval::to_string(mode) + ',' +
           csv_number(v.norm_logprob_acc) + ',' + csv_number(v.norm_logprob_unacc) + ',' +
           std::to_string(v.n_tokens_acc) + ',' + std::to_string(v.n_tokens_unacc) + ',' +
           (v.correct ? "1" : "0") + ',' + (v.tie ? "1" : "0") + ',' +
           (v.prime_truncated ? "1" : "0") + ',' + csv_field(v.prime_source_id) + '\n';
  }
  return out;
}

std::vector<PhenomenonDelta> significant_phenomena(const AccuracyReport& unprimed,
                                                   const AccuracyReport& primed,
                                                   double threshold) {
  std::vector<PhenomenonDelta> out;
  for (const auto& [name, g] : primed.per_phenomenon) {
    const auto it = unprimed.per_phenomenon.find(name);
    if (it == unprimed.per_phenomenon.end()) {
      continue;
    }
    const double delta = g.accuracy() - it->second.accuracy();
    if (delta > threshold) {
      out.push_back({name, delta});
    }
  }
  return out;
}

double cli_effect(double acc_mono, double acc_bi) {
  if (!(acc_mono > 0.0 && acc_mono <= 1.0)) {
    throw ValidationError("cli_effect: monolingual accuracy must lie in (0, 1]");
  }
  if (!(acc_bi >= 0.0 && acc_bi <= 1.0)) {
    throw ValidationError("cli_effect: bilingual accuracy must lie in [0, 1]");
  }
  return (acc_mono - acc_bi) / acc_mono;
}

CliReport make_cli_report(const AccuracyReport& monolingual, const AccuracyReport& bilingual,
                          int64_t onset, const std::string& l1) {
  CliReport r;
  r.acc_monolingual = monolingual.accuracy();
  r.acc_bilingual = bilingual.accuracy();
  r.cli_value = cli_effect(r.acc_monolingual, r.acc_bilingual);
  r.onset = onset;
  r.prime_mode = to_string(bilingual.mode);
  r.l1 = l1;
  for (const auto& [name, g] : bilingual.per_phenomenon) {
    const auto it = monolingual.per_phenomenon.find(name);
    if (it == monolingual.per_phenomenon.end()) {
      continue;
    }
    CliReport::Row row;
    row.acc_monolingual = it->second.accuracy();
    row.acc_bilingual = g.accuracy();
    if (row.acc_monolingual > 0.0) {
      row.cli_value = cli_effect(row.acc_monolingual, row.acc_bilingual);
    }
    r.per_phenomenon.emplace(name, row);
  }
  return r;
}

nlohmann::json CliReport::to_json() const {
  nlohmann::json per = nlohmann::json::object();
  for (const auto& [name, row] : per_phenomenon) {
    per[name] = {{"acc_monolingual", row.acc_monolingual},
                 {"acc_bilingual", row.acc_bilingual},
                 {"cli_value", row.cli_value ? nlohmann::json(*row.cli_value) : nlohmann::json()}};
  }
  return {{"acc_monolingual", acc_monolingual},
          {"acc_bilingual", acc_bilingual},
          {"cli_value", cli_value},
          {"onset", onset},
          {"prime_mode", prime_mode},
          {"l1", l1},
          {"per_phenomenon", per}};
}

// ----------------------------------------------------------------------------
// Learner-group preference
// ----------------------------------------------------------------------------

std::vector<double> delta_s_from_gaps(std::span<const double> gaps, bool* flagged) {
  if (gaps.empty()) {
    throw ValidationError("delta_s: no groups");
  }
  const double total = std::accumulate(gaps.begin(), gaps.end(), 0.0);
  if (flagged != nullptr) {
    *flagged = !(total > 0.0);
  }
  std::vector<double> out;
  out.reserve(gaps.size());
  for (const double g : gaps) {
    out.push_back(g / total);
  }
  return out;
}

DeltaSResult delta_s_from_record_gaps(const std::map<std::string, std::vector<double>>& gaps,
                                      int n_seeds, uint64_t base_seed) {
  if (gaps.size() < 2) {
    throw ValidationError("delta_s: need at least two learner groups");
  }
  if (n_seeds <= 0) {
    throw ValidationError("delta_s: n_seeds must be positive");
  }
  DeltaSResult out;
  size_t smallest = SIZE_MAX;
  for (const auto& [group, values] : gaps) {
    if (values.empty()) {
      throw ValidationError("delta_s: learner group '" + group + "' is empty");
    }
    out.groups.push_back(group);
    smallest = std::min(smallest, values.size());
  }
  out.sample_size = smallest;
  const size_t G = out.groups.size();
  for (int i = 0; i < n_seeds; ++i) {
    const uint64_t seed = base_seed + static_cast<uint64_t>(i);
    out.seeds.push_back(seed);
    std::vector<double> seed_gaps;
    std::vector<std::vector<size_t>> seed_samples;
    for (const auto& [group, values] : gaps) {
      std::vector<size_t> idx(values.size());
      std::iota(idx.begin(), idx.end(), size_t{0});
      Rng rng(mix_seed(seed, string_seed(group)));
      rng.shuffle(std::span<size_t>(idx));
      idx.resize(smallest);
      double sum = 0.0;
      for (const size_t k : idx) {
        sum += values[k];
      }
      seed_gaps.push_back(sum);
      seed_samples.push_back(std::move(idx));
    }
    bool flagged = false;
    out.delta_s.push_back(delta_s_from_gaps(seed_gaps, &flagged));
    out.gaps.push_back(std::move(seed_gaps));
    out.samples.push_back(std::move(seed_samples));
    out.flagged.push_back(flagged);
  }
  out.mean.assign(G, 0.0);
  out.stddev.assign(G, 0.0);
  for (size_t g = 0; g < G; ++g) {
    for (const auto& row : out.delta_s) out.mean[g] += row[g];
    out.mean[g] /= n_seeds;
    for (const auto& row : out.delta_s) out.stddev[g] += (row[g] - out.mean[g]) * (row[g] - out.mean[g]);
    out.stddev[g] = std::sqrt(out.stddev[g] / n_seeds);
  }
  return out;
}

DeltaSResult fce_delta_s(const Scorer& scorer, std::span<const MinimalPairRecord> records,
                         int n_seeds, uint64_t base_seed) {
  std::map<std::string, std::vector<double>> gaps;
  for (const auto& r : records) {
    if (!r.learner_l1) {
      throw ValidationError("record '" + r.id + "' has no learner_l1");
    }
    const PairVerdict v = scorer.score_pair(r, PrimeMode::none, 0);
    gaps[*r.learner_l1].push_back(v.norm_logprob_acc - v.norm_logprob_unacc);
  }
  return delta_s_from_record_gaps(gaps, n_seeds, base_seed);
}

nlohmann::json DeltaSResult::to_json() const {
  nlohmann::json per_group = nlohmann::json::object();
  for (size_t g = 0; g < groups.size(); ++g) {
    nlohmann::json per_seed = nlohmann::json::array();
    nlohmann::json seed_gaps = nlohmann::json::array();
    for (size_t s = 0; s < seeds.size(); ++s) {
      per_seed.push_back(delta_s[s][g]);
      seed_gaps.push_back(gaps[s][g]);
    }
    per_group[groups[g]] = {
        {"mean", mean[g]}, {"stddev", stddev[g]}, {"per_seed", per_seed}, {"gaps", seed_gaps}};
  }
  nlohmann::json flags = nlohmann::json::array();
  for (const bool f : flagged) flags.push_back(f);
  return {{"seeds", seeds}, {"sample_size", sample_size}, {"flagged", flags}, {"groups", per_group}};
}

}  // namespace bilm::eval
