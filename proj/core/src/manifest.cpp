#include "bilm/manifest.hpp"

#include <set>

#include "bilm/error.hpp"
#include "bilm/file_util.hpp"
#include "bilm/hash.hpp"
#include "bilm/tokenizer.hpp"

namespace bilm::pipeline {

namespace {

using nlohmann::json;

void check_keys(const json& j, const std::string& section, std::set<std::string> allowed) {
  if (!j.is_object()) {
    throw ValidationError("manifest: '" + section + "' must be an object");
  }
  for (const auto& [key, value] : j.items()) {
    if (!allowed.contains(key)) {
      throw ValidationError("manifest: unknown field '" + section + "." + key + "'");
    }
  }
}

const json& require(const json& j, const std::string& section, const char* key) {
  if (!j.contains(key)) {
    throw ValidationError("manifest: missing field '" + section + "." + key + "'");
  }
  return j.at(key);
}

template <class T>
T get(const json& j, const std::string& section, const char* key) {
  try {
    return require(j, section, key).get<T>();
  } catch (const json::type_error&) {
    throw ValidationError("manifest: field '" + section + "." + key + "' has the wrong type");
  }
}

template <class T>
T get_or(const json& j, const std::string& section, const char* key, T fallback) {
  return j.contains(key) ? get<T>(j, section, key) : fallback;
}

fs::path resolve(const fs::path& base, const std::string& p) {
  const fs::path path(p);
  return path.is_absolute() ? path : (base / path).lexically_normal();
}

// Paths enter the canonical form relative to the manifest's directory so the
// hash does not depend on where the tool is invoked from.
std::string portable(const fs::path& base, const fs::path& path) {
  const fs::path rel = path.lexically_relative(base);
  return rel.empty() ? path.string() : rel.string();
}

fs::path existing(const fs::path& base, const std::string& p, const std::string& what) {
  const fs::path path = resolve(base, p);
  if (!fs::exists(path)) {
    throw ValidationError("manifest: " + what + " '" + path.string() + "' does not exist");
  }
  return path;
}

}  // namespace

corpus::BatchSchedule ExperimentManifest::make_schedule() const {
  const int64_t total = optimizer.total_steps;
  const int batch = optimizer.batch_size;
  switch (schedule.mode) {
    case corpus::ScheduleMode::sequential_onset:
      return corpus::make_schedule(total, batch, schedule.onset_step,
                                   schedule.post_onset_l2_fraction);
    case corpus::ScheduleMode::early_imbalanced:
      return corpus::make_early_imbalanced_schedule(total, batch, schedule.onset_step,
                                                    schedule.post_onset_l2_fraction);
    case corpus::ScheduleMode::monolingual:
      return corpus::make_monolingual_schedule(total, batch);
  }
  throw ValidationError("manifest: unknown schedule mode");
}

model::ModelConfig ExperimentManifest::model_config(int vocab_size) const {
  json cfg = model::ModelConfig::preset(model_preset, vocab_size).to_json();
  for (const auto& [key, value] : model_overrides.items()) {
    if (!cfg.contains(key)) {
      throw ValidationError("manifest: unknown model override '" + key + "'");
    }
    if (key == "vocab_size") {
      throw ValidationError("manifest: vocab_size comes from the tokenizer and cannot be overridden");
    }
    cfg[key] = value;
  }
  model::ModelConfig config;
  try {
    config = model::ModelConfig::from_json(cfg);
  } catch (const json::exception& e) {
    throw ValidationError(std::string("manifest: bad model override: ") + e.what());
  }
  config.validate();
  return config;
}

ExperimentManifest parse_manifest(const json& j, const fs::path& source) {
  const fs::path base = (source.has_parent_path() ? source.parent_path() : fs::path(".")).lexically_normal();
  check_keys(j, "manifest",
             {"experiment_id", "languages", "corpora", "tokenizer", "packing", "schedule", "model",
              "optimizer", "eval", "mech", "baseline", "output_dir"});
  ExperimentManifest m;
  m.source = source;
  m.experiment_id = get<std::string>(j, "manifest", "experiment_id");
  if (m.experiment_id.empty()) {
    throw ValidationError("manifest: experiment_id is empty");
  }

  const json& langs = require(j, "manifest", "languages");
  check_keys(langs, "languages", {"l1", "l2"});
  m.l1 = get<std::string>(langs, "languages", "l1");
  m.l2 = get<std::string>(langs, "languages", "l2");
  if (m.l1 == m.l2) {
    throw ValidationError("manifest: l1 and l2 must differ");
  }

  const json& corpora = require(j, "manifest", "corpora");
  check_keys(corpora, "corpora", {"l1", "l2"});
  json canonical_corpora;
  for (const char* role : {"l1", "l2"}) {
    const std::string section = std::string("corpora.") + role;
    const json& c = require(corpora, "corpora", role);
    check_keys(c, section, {"train", "eval"});
    CorpusPaths paths{existing(base, get<std::string>(c, section, "train"), "corpus"),
                      existing(base, get<std::string>(c, section, "eval"), "corpus")};
    (std::string(role) == "l1" ? m.corpus_l1 : m.corpus_l2) = paths;
    canonical_corpora[role] = {{"train", portable(base, paths.train)}, {"eval", portable(base, paths.eval)}};
  }

  const json tokenizer = j.value("tokenizer", json::object());
  check_keys(tokenizer, "tokenizer", {"path", "hash", "lines_per_language", "vocab_size", "seed"});
  if (tokenizer.contains("path")) {
    m.tokenizer.path = existing(base, get<std::string>(tokenizer, "tokenizer", "path"), "tokenizer");
    if (tokenizer.contains("hash")) {
      m.tokenizer.expected_hash = get<std::string>(tokenizer, "tokenizer", "hash");
    }
    const tok::TokenizerModel loaded = tok::TokenizerModel::load(*m.tokenizer.path);
    if (m.tokenizer.expected_hash && *m.tokenizer.expected_hash != loaded.hash()) {
      throw ValidationError("manifest: tokenizer hash " + loaded.hash() + " differs from declared " +
                            *m.tokenizer.expected_hash);
    }
    m.tokenizer.expected_hash = loaded.hash();
    m.tokenizer.vocab_size = loaded.vocab_size();
  } else {
    if (tokenizer.contains("hash")) {
      throw ValidationError("manifest: tokenizer.hash requires tokenizer.path");
    }
    m.tokenizer.lines_per_language =
        get_or<size_t>(tokenizer, "tokenizer", "lines_per_language", m.tokenizer.lines_per_language);
    m.tokenizer.vocab_size = get_or<int>(tokenizer, "tokenizer", "vocab_size", m.tokenizer.vocab_size);
    m.tokenizer.seed = get_or<uint64_t>(tokenizer, "tokenizer", "seed", m.tokenizer.seed);
    if (m.tokenizer.lines_per_language == 0) {
      throw ValidationError("manifest: tokenizer.lines_per_language must be positive");
    }
  }

  const json& packing = require(j, "manifest", "packing");
  check_keys(packing, "packing", {"seq_len", "train_budget_tokens", "eval_budget_tokens", "seed"});
  m.packing.seq_len = get<int>(packing, "packing", "seq_len");
  m.packing.train_budget_tokens = get<int64_t>(packing, "packing", "train_budget_tokens");
  m.packing.eval_budget_tokens = get<int64_t>(packing, "packing", "eval_budget_tokens");
  m.packing.seed = get_or<uint64_t>(packing, "packing", "seed", m.packing.seed);
  if (m.packing.seq_len < 2 || m.packing.train_budget_tokens < m.packing.seq_len ||
      m.packing.eval_budget_tokens < m.packing.seq_len) {
    throw ValidationError("manifest: packing needs seq_len >= 2 and budgets of at least one row");
  }

  const json optimizer = j.value("optimizer", json::object());
  check_keys(optimizer, "optimizer",
             {"peak_lr", "warmup_steps", "total_steps", "adam_beta1", "adam_beta2", "adam_eps",
              "batch_size", "seed", "grad_clip"});
  try {
    m.optimizer = train::OptimizerConfig::from_json(optimizer);
  } catch (const json::type_error& e) {
    throw ValidationError(std::string("manifest: optimizer: ") + e.what());
  }
  m.optimizer.validate();

  const json& schedule = require(j, "manifest", "schedule");
  check_keys(schedule, "schedule", {"mode", "onset_step", "matched_onset", "post_onset_l2_fraction"});
  m.schedule.mode = corpus::schedule_mode_from_string(get<std::string>(schedule, "schedule", "mode"));
  m.schedule.post_onset_l2_fraction =
      get_or<double>(schedule, "schedule", "post_onset_l2_fraction", 0.5);
  switch (m.schedule.mode) {
    case corpus::ScheduleMode::sequential_onset:
      m.schedule.onset_step = get<int64_t>(schedule, "schedule", "onset_step");
      break;
    case corpus::ScheduleMode::early_imbalanced:
      m.schedule.onset_step = get<int64_t>(schedule, "schedule", "matched_onset");
      break;
    case corpus::ScheduleMode::monolingual:
      m.schedule.onset_step = 0;
      break;
  }
  if (m.schedule.onset_step < 0 || m.schedule.onset_step > m.optimizer.total_steps) {
    throw ValidationError("manifest: onset " + std::to_string(m.schedule.onset_step) +
                          " outside [0, " + std::to_string(m.optimizer.total_steps) + "]");
  }
  const corpus::BatchSchedule sched = m.make_schedule();

  const json model = j.value("model", json::object());
  check_keys(model, "model", {"preset", "overrides", "seed"});
  m.model_preset = get_or<std::string>(model, "model", "preset", m.model_preset);
  m.model_overrides = model.value("overrides", json::object());
  if (!m.model_overrides.is_object()) {
    throw ValidationError("manifest: model.overrides must be an object");
  }
  m.model_seed = get_or<uint64_t>(model, "model", "seed", m.optimizer.seed);
  const model::ModelConfig config = m.model_config(m.tokenizer.vocab_size);
  if (config.max_seq_len < m.packing.seq_len) {
    throw ValidationError("manifest: packing.seq_len exceeds the model's max_seq_len");
  }

  const json ev = j.value("eval", json::object());
  check_keys(ev, "eval", {"blimp", "fce", "eval_every", "loss_max_rows"});
  m.eval.eval_every = get_or<int64_t>(ev, "eval", "eval_every", 0);
  m.eval.loss_max_rows = get_or<size_t>(ev, "eval", "loss_max_rows", 0);
  json canonical_eval = {{"eval_every", m.eval.eval_every}, {"loss_max_rows", m.eval.loss_max_rows}};
  if (ev.contains("blimp")) {
    const json& b = ev.at("blimp");
    check_keys(b, "eval.blimp", {"path", "primes", "prime_modes", "seed"});
    m.eval.blimp = existing(base, get<std::string>(b, "eval.blimp", "path"), "dataset");
    if (b.contains("primes")) {
      m.eval.primes = existing(base, get<std::string>(b, "eval.blimp", "primes"), "prime file");
    }
    if (b.contains("prime_modes")) {
      m.eval.prime_modes.clear();
      for (const auto& mode : get<std::vector<std::string>>(b, "eval.blimp", "prime_modes")) {
        m.eval.prime_modes.push_back(eval::prime_mode_from_string(mode));
      }
    }
    for (const auto mode : m.eval.prime_modes) {
      if (mode != eval::PrimeMode::none && !m.eval.primes) {
        throw ValidationError("manifest: prime mode '" + eval::to_string(mode) +
                              "' needs eval.blimp.primes");
      }
    }
    m.eval.seed = get_or<uint64_t>(b, "eval.blimp", "seed", m.eval.seed);
    json modes = json::array();
    for (const auto mode : m.eval.prime_modes) modes.push_back(eval::to_string(mode));
    canonical_eval["blimp"] = {{"path", portable(base, *m.eval.blimp)},
                               {"primes", m.eval.primes ? json(portable(base, *m.eval.primes)) : json()},
                               {"prime_modes", modes},
                               {"seed", m.eval.seed}};
  }
  if (ev.contains("fce")) {
    const json& f = ev.at("fce");
    check_keys(f, "eval.fce", {"path", "seeds", "seed"});
    m.eval.fce = existing(base, get<std::string>(f, "eval.fce", "path"), "dataset");
    m.eval.fce_seeds = get_or<int>(f, "eval.fce", "seeds", m.eval.fce_seeds);
    m.eval.fce_seed = get_or<uint64_t>(f, "eval.fce", "seed", m.eval.fce_seed);
    if (m.eval.fce_seeds <= 0) {
      throw ValidationError("manifest: eval.fce.seeds must be positive");
    }
    canonical_eval["fce"] = {
        {"path", portable(base, *m.eval.fce)}, {"seeds", m.eval.fce_seeds}, {"seed", m.eval.fce_seed}};
  }

  const json mech = j.value("mech", json::object());
  check_keys(mech, "mech", {"lens", "neurons"});
  json canonical_mech = json::object();
  if (mech.contains("lens")) {
    const json& l = mech.at("lens");
    check_keys(l, "mech.lens", {"k", "last_position_only", "rows", "threshold"});
    m.mech.lens = true;
    m.mech.lens_k = get_or<int>(l, "mech.lens", "k", m.mech.lens_k);
    m.mech.lens_last_position_only =
        get_or<bool>(l, "mech.lens", "last_position_only", m.mech.lens_last_position_only);
    m.mech.lens_rows = get_or<size_t>(l, "mech.lens", "rows", m.mech.lens_rows);
    m.mech.dictionary_threshold = get_or<double>(l, "mech.lens", "threshold", m.mech.dictionary_threshold);
    canonical_mech["lens"] = {{"k", m.mech.lens_k},
                              {"last_position_only", m.mech.lens_last_position_only},
                              {"rows", m.mech.lens_rows},
                              {"threshold", m.mech.dictionary_threshold}};
  }
  if (mech.contains("neurons")) {
    const json& n = mech.at("neurons");
    check_keys(n, "mech.neurons", {"quantile", "rows"});
    m.mech.neurons = true;
    m.mech.neuron_quantile = get_or<double>(n, "mech.neurons", "quantile", m.mech.neuron_quantile);
    m.mech.neuron_rows = get_or<size_t>(n, "mech.neurons", "rows", m.mech.neuron_rows);
    if (!(m.mech.neuron_quantile > 0.0 && m.mech.neuron_quantile <= 1.0)) {
      throw ValidationError("manifest: mech.neurons.quantile must lie in (0, 1]");
    }
    canonical_mech["neurons"] = {{"quantile", m.mech.neuron_quantile}, {"rows", m.mech.neuron_rows}};
  }

  if (j.contains("baseline")) {
    m.baseline = existing(base, get<std::string>(j, "manifest", "baseline"), "baseline manifest");
  }
  m.output_dir = resolve(base, get<std::string>(j, "manifest", "output_dir"));

  json canonical_tokenizer =
      m.tokenizer.path
          ? json{{"path", portable(base, *m.tokenizer.path)}, {"hash", *m.tokenizer.expected_hash}}
          : json{{"lines_per_language", m.tokenizer.lines_per_language},
                 {"vocab_size", m.tokenizer.vocab_size},
                 {"seed", m.tokenizer.seed}};
  m.canonical = {
      {"experiment_id", m.experiment_id},
      {"languages", {{"l1", m.l1}, {"l2", m.l2}}},
      {"corpora", canonical_corpora},
      {"tokenizer", canonical_tokenizer},
      {"packing",
       {{"seq_len", m.packing.seq_len},
        {"train_budget_tokens", m.packing.train_budget_tokens},
        {"eval_budget_tokens", m.packing.eval_budget_tokens},
        {"seed", m.packing.seed}}},
      {"schedule",
       {{"plan", sched.to_json()},
        {"onset", m.schedule.onset_step},
        {"post_onset_l2_fraction", m.schedule.post_onset_l2_fraction}}},
      {"model", {{"config", config.to_json()}, {"seed", m.model_seed}}},
      {"optimizer", m.optimizer.to_json()},
      {"eval", canonical_eval},
      {"mech", canonical_mech},
      {"baseline", m.baseline ? json(portable(base, *m.baseline)) : json()},
      {"output_dir", portable(base, m.output_dir)}};
  m.hash = sha256_hex(m.canonical.dump());
  m.derived = {{"schedule", sched.to_json()},
               {"composition_before_onset", {sched.before_onset().n_l1, sched.before_onset().n_l2}},
               {"composition_after_onset", {sched.after_onset().n_l1, sched.after_onset().n_l2}},
               {"total_l1_rows", sched.total_l1()},
               {"total_l2_rows", sched.total_l2()},
               {"parameter_count", model::parameter_count(config)}};
  return m;
}

ExperimentManifest validate_manifest(const fs::path& path) {
  if (!fs::exists(path)) {
    throw ValidationError("manifest '" + path.string() + "' does not exist");
  }
  json j;
  try {
    j = json::parse(read_file(path));
  } catch (const json::parse_error& e) {
    throw ValidationError("manifest '" + path.string() + "' is not valid JSON: " + e.what());
  }
  return parse_manifest(j, path);
}

}  // namespace bilm::pipeline
