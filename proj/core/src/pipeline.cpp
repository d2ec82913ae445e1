#include "bilm/pipeline.hpp"

#include <fstream>
#include <iostream>

#include <nlohmann/json.hpp>

#include "bilm/error.hpp"
#include "bilm/file_util.hpp"
#include "bilm/hash.hpp"
#include "bilm/mech.hpp"
#include "bilm/rng.hpp"
#include "bilm/tokenizer.hpp"

namespace bilm::pipeline {

namespace {

using nlohmann::json;

// A content-addressed stage directory.
class Stage {
 public:
  Stage(const fs::path& root, std::string name, const json& inputs)
      : name_(std::move(name)), inputs_(inputs), input_hash_(sha256_hex(inputs.dump())) {
    dir_ = root / "stages" / (name_ + "-" + input_hash_.substr(0, 16));
  }

  const std::string& name() const { return name_; }
  const fs::path& dir() const { return dir_; }
  fs::path file(const std::string& rel) const { return dir_ / rel; }

  // True when a previous invocation completed this stage with the same inputs.
  bool complete() const {
    const fs::path marker = dir_ / "stage.json";
    if (!fs::exists(marker)) {
      return false;
    }
    try {
      const json j = json::parse(read_file(marker));
      if (j.at("input_hash").get<std::string>() != input_hash_) {
        return false;
      }
      for (const auto& [rel, hash] : j.at("outputs").items()) {
        if (!fs::exists(dir_ / rel)) {
          return false;
        }
      }
    } catch (const std::exception&) {
      return false;
    }
    return true;
  }

  // Starts from an empty directory so stale partial outputs never leak in.
  void begin() const {
    fs::remove_all(dir_);
    fs::create_directories(dir_);
  }

  void finish(const std::vector<std::string>& outputs) const {
    json files = json::object();
    for (const auto& rel : outputs) {
      files[rel] = sha256_file(dir_ / rel);
    }
    const json marker = {{"stage", name_},
                         {"input_hash", input_hash_},
                         {"inputs", inputs_},
                         {"outputs", files},
                         {"output_hash", sha256_hex(files.dump())}};
    write_file_atomic(dir_ / "stage.json", marker.dump(2));
  }

  std::string output_hash() const {
    return json::parse(read_file(dir_ / "stage.json")).at("output_hash").get<std::string>();
  }

 private:
  std::string name_;
  json inputs_;
  std::string input_hash_;
  fs::path dir_;
};

void write_json(const fs::path& path, const json& j) { write_file_atomic(path, j.dump(2)); }

json read_json(const fs::path& path) { return json::parse(read_file(path)); }

std::vector<std::vector<int>> encode_documents(const tok::TokenizerModel& tokenizer,
                                               const fs::path& path) {
  std::ifstream in(path);
  if (!in) {
    throw ValidationError("cannot open corpus " + path.string());
  }
  std::vector<std::vector<int>> docs;
  std::string line;
  while (std::getline(in, line)) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    docs.push_back(tokenizer.encode(line));
  }
  return docs;
}

struct Runner {
  const ExperimentManifest& m;
  const RunOptions& options;
  RunResult result;

  void log(const std::string& msg) const {
    if (options.verbose) {
      std::cerr << "[" << m.experiment_id << "] " << msg << '\n';
    }
  }

  template <class Fn>
  std::string stage(const Stage& s, Fn&& body) {
    result.stage_dirs[s.name()] = s.dir().string();
    if (s.complete()) {
      log(s.name() + ": up to date");
    } else {
      log(s.name() + ": running");
      try {
        s.begin();
        s.finish(body());
      } catch (const ValidationError& e) {
        throw ValidationError(s.name() + " stage: " + e.what());
      } catch (const std::exception& e) {
        throw Error(s.name() + " stage: " + e.what());
      }
      result.executed_stages.push_back(s.name());
    }
    const std::string hash = s.output_hash();
    result.stage_hashes[s.name()] = hash;
    return hash;
  }
};

// Corpus (language role, split) file names inside the pack stage.
const std::vector<std::pair<std::string, std::string>> kPackParts = {
    {"l1", "train"}, {"l1", "eval"}, {"l2", "train"}, {"l2", "eval"}};

std::string pack_file(const std::string& role, const std::string& split) {
  return role + "." + split + ".bin";
}

}  // namespace

fs::path run_result_path(const ExperimentManifest& manifest) {
  return manifest.output_dir / "run_result.json";
}

RunResult run(const ExperimentManifest& m, const RunOptions& options) {
  if (!options.stop_after.empty() && options.stop_after != "tokenizer" &&
      options.stop_after != "pack" && options.stop_after != "train") {
    throw ValidationError("unknown stage '" + options.stop_after + "'");
  }
  std::optional<RunResult> baseline;
  if (m.baseline && options.stop_after.empty()) {
    const ExperimentManifest bm = validate_manifest(*m.baseline);
    if (bm.schedule.mode != corpus::ScheduleMode::monolingual) {
      throw ValidationError("baseline manifest must use the monolingual schedule");
    }
    if (bm.baseline) {
      throw ValidationError("baseline manifest must not itself declare a baseline");
    }
    baseline = run(bm, options);
  }

  Runner r{m, options, {}};
  r.result.experiment_id = m.experiment_id;
  r.result.manifest_hash = m.hash;
  r.result.l1 = m.l1;
  r.result.l2 = m.l2;
  r.result.schedule_mode = corpus::to_string(m.schedule.mode);
  r.result.onset = m.schedule.onset_step;
  const fs::path root = m.output_dir;
  fs::create_directories(root);
  write_json(root / "manifest.json", {{"manifest_hash", m.hash}, {"canonical", m.canonical}});

  // tokenizer
  json tok_inputs = m.canonical.at("tokenizer");
  if (!m.tokenizer.path) {
    tok_inputs["l1_train"] = sha256_file(m.corpus_l1.train);
    tok_inputs["l2_train"] = sha256_file(m.corpus_l2.train);
  }
  const Stage tok_stage(root, "tokenizer", tok_inputs);
  const std::string tok_hash = r.stage(tok_stage, [&] {
    tok::TokenizerModel tokenizer;
    if (m.tokenizer.path) {
      tokenizer = tok::TokenizerModel::load(*m.tokenizer.path);
    } else {
      std::ifstream a(m.corpus_l1.train);
      std::ifstream b(m.corpus_l2.train);
      tokenizer = tok::train_tokenizer(
          a, b, {m.tokenizer.lines_per_language, m.tokenizer.vocab_size, m.tokenizer.seed});
    }
    tokenizer.save(tok_stage.file("tokenizer.bin"));
    return std::vector<std::string>{"tokenizer.bin"};
  });
  const tok::TokenizerModel tokenizer = tok::TokenizerModel::load(tok_stage.file("tokenizer.bin"));
  r.result.tokenizer_hash = tokenizer.hash();
  if (options.stop_after == "tokenizer") return r.result;
  if (baseline && baseline->tokenizer_hash != tokenizer.hash()) {
    throw ValidationError("baseline run uses tokenizer " + baseline->tokenizer_hash +
                          " but this run uses " + tokenizer.hash());
  }

  // pack
  json pack_inputs = {{"tokenizer", tok_hash}, {"packing", m.canonical.at("packing")}};
  for (const auto& [role, split] : kPackParts) {
    const CorpusPaths& paths = role == "l1" ? m.corpus_l1 : m.corpus_l2;
    pack_inputs[role + "_" + split] = sha256_file(split == "train" ? paths.train : paths.eval);
  }
  const Stage pack_stage(root, "pack", pack_inputs);
  const std::string pack_hash = r.stage(pack_stage, [&] {
    std::vector<std::string> outputs;
    uint64_t part = 0;
    for (const auto& [role, split] : kPackParts) {
      const CorpusPaths& paths = role == "l1" ? m.corpus_l1 : m.corpus_l2;
      const auto docs = encode_documents(tokenizer, split == "train" ? paths.train : paths.eval);
      const int64_t budget =
          split == "train" ? m.packing.train_budget_tokens : m.packing.eval_budget_tokens;
      corpus::PackedCorpus packed = corpus::pack(docs, m.packing.seq_len, budget,
                                                 mix_seed(m.packing.seed, part++), tok::kEotId);
      packed.language = role == "l1" ? m.l1 : m.l2;
      packed.tokenizer_hash = tokenizer.hash();
      corpus::save_packed(packed, pack_stage.file(pack_file(role, split)));
      outputs.push_back(pack_file(role, split));
      outputs.push_back(pack_file(role, split) + ".json");
    }
    return outputs;
  });
  if (options.stop_after == "pack") return r.result;
  const auto load_part = [&](const std::string& role, const std::string& split) {
    return corpus::load_packed(pack_stage.file(pack_file(role, split)));
  };

  // train
  const json train_inputs = {{"pack", pack_hash},
                             {"model", m.canonical.at("model")},
                             {"optimizer", m.canonical.at("optimizer")},
                             {"schedule", m.canonical.at("schedule")},
                             {"eval_every", m.eval.eval_every},
                             {"loss_max_rows", m.eval.loss_max_rows}};
  const Stage train_stage(root, "train", train_inputs);
  const std::string train_hash = r.stage(train_stage, [&] {
    const corpus::PackedCorpus l1 = load_part("l1", "train");
    const corpus::PackedCorpus l2 = load_part("l2", "train");
    const corpus::PackedCorpus l1_eval = load_part("l1", "eval");
    const corpus::PackedCorpus l2_eval = load_part("l2", "eval");
    const corpus::BatchSchedule schedule = m.make_schedule();
    model::ModelState state = model::init(m.model_config(tokenizer.vocab_size()), m.model_seed);
    state.tokenizer_hash = tokenizer.hash();
    state.tokenizer_blob = tokenizer.serialize();
    train::TrainOptions topts;
    topts.eval_every = m.eval.eval_every;
    topts.checkpoint_dir = train_stage.file("checkpoints");
    topts.log_path = train_stage.file("train_log.jsonl");
    topts.progress_every = options.progress_every;
    const train::EvalSets evals{&l1_eval, &l2_eval, m.eval.loss_max_rows};
    const train::TrainResult tr =
        train::train(std::move(state), schedule, l1, l2, m.optimizer, evals, topts);
    model::save_checkpoint(tr.state, train_stage.file("final.ckpt"));
    write_json(train_stage.file("schedule.json"), schedule.to_json());
    std::vector<std::string> outputs{"final.ckpt", "train_log.jsonl", "schedule.json"};
    for (const auto& c : tr.log.checkpoints) {
      outputs.push_back(fs::relative(c.path, train_stage.dir()).string());
    }
    return outputs;
  });
  r.result.checkpoint = train_stage.file("final.ckpt").string();
  if (options.stop_after == "train") return r.result;

  std::optional<model::ModelState> state;
  const auto model_state = [&]() -> const model::ModelState& {
    if (!state) state = model::load_checkpoint(train_stage.file("final.ckpt"));
    return *state;
  };

  // eval
  const bool emit_cli = baseline.has_value() && m.eval.blimp.has_value();
  if (emit_cli && !baseline->stage_dirs.contains("eval")) {
    throw ValidationError("baseline run has no evaluation stage");
  }
  json eval_inputs = {{"train", train_hash}, {"eval", m.canonical.at("eval")}};
  if (m.eval.blimp) eval_inputs["blimp_data"] = sha256_file(*m.eval.blimp);
  if (m.eval.primes) eval_inputs["primes_data"] = sha256_file(*m.eval.primes);
  if (m.eval.fce) eval_inputs["fce_data"] = sha256_file(*m.eval.fce);
  if (emit_cli) {
    eval_inputs["baseline_eval"] = baseline->stage_hashes.at("eval");
    eval_inputs["onset"] = m.schedule.onset_step;
  }
  const Stage eval_stage(root, "eval", eval_inputs);
  r.stage(eval_stage, [&] {
    std::vector<std::string> outputs;
    const eval::Scorer scorer(model_state(), tokenizer);
    if (m.eval.blimp) {
      eval::Dataset ds = eval::load_blimp(*m.eval.blimp);
      if (m.eval.primes) eval::attach_primes(ds, eval::load_prime_file(*m.eval.primes));
      std::optional<eval::AccuracyReport> unprimed;
      for (const auto mode : m.eval.prime_modes) {
        const eval::AccuracyReport rep = eval::accuracy(scorer, ds.records, mode, m.eval.seed);
        json j = rep.to_json();
        if (mode == eval::PrimeMode::none) {
          unprimed = rep;
        } else if (unprimed) {
          json sig = json::array();
          for (const auto& d : eval::significant_phenomena(*unprimed, rep)) {
            sig.push_back({{"phenomenon", d.phenomenon}, {"delta", d.delta}});
          }
          j["significant_phenomena"] = sig;
        }
        const std::string stem = "blimp_" + eval::to_string(mode);
        write_json(eval_stage.file(stem + ".json"), j);
        write_file_atomic(eval_stage.file(stem + ".csv"), rep.verdicts_csv());
        outputs.push_back(stem + ".json");
        outputs.push_back(stem + ".csv");
        if (emit_cli) {
          const fs::path base_file = fs::path(baseline->stage_dirs.at("eval")) / "blimp_none.json";
          if (!fs::exists(base_file)) {
            throw ValidationError("baseline run did not score the unprimed condition");
          }
          const auto mono = eval::AccuracyReport::from_json(read_json(base_file));
          const eval::CliReport cli = eval::make_cli_report(mono, rep, m.schedule.onset_step, m.l1);
          write_json(eval_stage.file("cli_" + eval::to_string(mode) + ".json"), cli.to_json());
          outputs.push_back("cli_" + eval::to_string(mode) + ".json");
        }
      }
    }
    if (m.eval.fce) {
      const eval::Dataset ds = eval::load_fce_pairs(*m.eval.fce);
      json j = eval::fce_delta_s(scorer, ds.records, m.eval.fce_seeds, m.eval.fce_seed).to_json();
      j["skipped"] = ds.skipped;
      write_json(eval_stage.file("fce.json"), j);
      outputs.push_back("fce.json");
    }
    write_json(eval_stage.file("eval_done.json"), {{"train", train_hash}});
    outputs.push_back("eval_done.json");
    return outputs;
  });

  // mech
  if (m.mech.lens || m.mech.neurons) {
    const json mech_inputs = {{"train", train_hash}, {"pack", pack_hash}, {"mech", m.canonical.at("mech")}};
    const Stage mech_stage(root, "mech", mech_inputs);
    r.stage(mech_stage, [&] {
      std::vector<std::string> outputs;
      const corpus::PackedCorpus l1_eval = load_part("l1", "eval");
      const corpus::PackedCorpus l2_eval = load_part("l2", "eval");
      if (m.mech.lens) {
        const corpus::PackedCorpus l1 = load_part("l1", "train");
        const corpus::PackedCorpus l2 = load_part("l2", "train");
        mech::LangDictionary dict = mech::build_lang_dictionary(
            l1.tokens, l2.tokens, tokenizer.vocab_size(), m.mech.dictionary_threshold);
        dict.tokenizer_hash = tokenizer.hash();
        write_json(mech_stage.file("dictionary.json"), dict.to_json());
        outputs.push_back("dictionary.json");
        for (const auto* part : {&l1_eval, &l2_eval}) {
          std::vector<std::vector<int>> inputs;
          for (size_t i = 0; i < std::min(part->rows(), m.mech.lens_rows); ++i) {
            const auto row = part->row(i);
            inputs.emplace_back(row.begin(), row.end());
          }
          const auto profile = mech::logit_lens(
              model_state(), inputs, dict, {m.mech.lens_k, m.mech.lens_last_position_only});
          const std::string name = std::string("lens_") + (part == &l1_eval ? "l1" : "l2") + "_inputs.json";
          write_json(mech_stage.file(name), profile.to_json());
          outputs.push_back(name);
        }
      }
      if (m.mech.neurons) {
        const auto n1 = mech::detect_language_neurons(model_state(), l1_eval, m.mech.neuron_quantile,
                                                      m.mech.neuron_rows);
        const auto n2 = mech::detect_language_neurons(model_state(), l2_eval, m.mech.neuron_quantile,
                                                      m.mech.neuron_rows);
        write_json(mech_stage.file("neurons_l1.json"), n1.to_json());
        write_json(mech_stage.file("neurons_l2.json"), n2.to_json());
        write_json(mech_stage.file("overlap.json"), mech::neuron_overlap(n1, n2).to_json());
        outputs.insert(outputs.end(), {"neurons_l1.json", "neurons_l2.json", "overlap.json"});
      }
      return outputs;
    });
  }

  // Metrics are read back from stage outputs so skipped stages contribute too.
  auto& metrics = r.result.metrics;
  {
    const train::TrainLog log =
        train::TrainLog::from_jsonl(read_file(train_stage.file("train_log.jsonl")));
    if (!log.evals.empty()) {
      const auto& last = log.evals.back();
      if (last.l1_loss) metrics.push_back({"l1_eval_loss", "", *last.l1_loss, m.optimizer.seed});
      if (last.l2_loss) metrics.push_back({"l2_eval_loss", "", *last.l2_loss, m.optimizer.seed});
    }
  }
  if (m.eval.blimp) {
    for (const auto mode : m.eval.prime_modes) {
      const std::string name = eval::to_string(mode);
      const json acc = read_json(eval_stage.file("blimp_" + name + ".json"));
      metrics.push_back({"accuracy", name, acc.at("accuracy").get<double>(), m.eval.seed});
      if (emit_cli) {
        const json cli = read_json(eval_stage.file("cli_" + name + ".json"));
        metrics.push_back({"cli", name, cli.at("cli_value").get<double>(), m.eval.seed});
      }
    }
  }
  if (m.eval.fce) {
    const json fce = read_json(eval_stage.file("fce.json"));
    for (const auto& [group, g] : fce.at("groups").items()) {
      metrics.push_back({"delta_s:" + group, "", g.at("mean").get<double>(), m.eval.fce_seed});
    }
  }
  if (m.mech.neurons) {
    const json ov = read_json(fs::path(r.result.stage_dirs.at("mech")) / "overlap.json");
    metrics.push_back({"neuron_overlap_attention", "", ov.at("total_attention").get<double>(), 0});
    metrics.push_back({"neuron_overlap_ffn", "", ov.at("total_ffn").get<double>(), 0});
  }

  json hashes = json::object();
  for (const auto& [name, hash] : r.result.stage_hashes) hashes[name] = hash;
  r.result.hash = sha256_hex(json{{"manifest", m.hash}, {"stages", hashes}}.dump());
  write_json(run_result_path(m), r.result.to_json());
  return r.result;
}

nlohmann::json RunResult::to_json() const {
  json ms = json::array();
  for (const auto& x : metrics) {
    ms.push_back({{"metric", x.metric}, {"prime_mode", x.prime_mode}, {"value", x.value}, {"seed", x.seed}});
  }
  return {{"experiment_id", experiment_id},
          {"manifest_hash", manifest_hash},
          {"l1", l1},
          {"l2", l2},
          {"schedule_mode", schedule_mode},
          {"onset", onset},
          {"tokenizer_hash", tokenizer_hash},
          {"stage_hashes", stage_hashes},
          {"stage_dirs", stage_dirs},
          {"executed_stages", executed_stages},
          {"checkpoint", checkpoint},
          {"metrics", ms},
          {"hash", hash}};
}

RunResult RunResult::from_json(const nlohmann::json& j) {
  RunResult r;
  try {
    r.experiment_id = j.at("experiment_id").get<std::string>();
    r.manifest_hash = j.at("manifest_hash").get<std::string>();
    r.l1 = j.at("l1").get<std::string>();
    r.l2 = j.at("l2").get<std::string>();
    r.schedule_mode = j.at("schedule_mode").get<std::string>();
    r.onset = j.at("onset").get<int64_t>();
    r.tokenizer_hash = j.value("tokenizer_hash", "");
    r.stage_hashes = j.value("stage_hashes", std::map<std::string, std::string>{});
    r.stage_dirs = j.value("stage_dirs", std::map<std::string, std::string>{});
    r.executed_stages = j.value("executed_stages", std::vector<std::string>{});
    r.checkpoint = j.value("checkpoint", "");
    for (const auto& x : j.at("metrics")) {
      r.metrics.push_back({x.at("metric").get<std::string>(), x.at("prime_mode").get<std::string>(),
                           x.at("value").get<double>(), x.at("seed").get<uint64_t>()});
    }
    r.hash = j.value("hash", "");
  } catch (const json::exception& e) {
    throw ValidationError(std::string("malformed run result: ") + e.what());
  }
  return r;
}

RunResult RunResult::load(const std::filesystem::path& path) {
  try {
    return from_json(json::parse(read_file(path)));
  } catch (const json::parse_error& e) {
    throw ValidationError("run result '" + path.string() + "' is not valid JSON");
  }
}

}  // namespace bilm::pipeline
