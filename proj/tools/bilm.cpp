// bilm: command-line front end for tokenizer training, corpus packing,
// manifest-driven runs, evaluation and interpretability probes.
//
// Exit codes: 0 success, 1 validation or usage error, 2 runtime error.

#include <fstream>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include "bilm/corpus.hpp"
#include "bilm/error.hpp"
#include "bilm/evalsuite.hpp"
#include "bilm/file_util.hpp"
#include "bilm/manifest.hpp"
#include "bilm/mech.hpp"
#include "bilm/model.hpp"
#include "bilm/pipeline.hpp"
#include "bilm/report.hpp"
#include "bilm/tokenizer.hpp"
#include "bilm/typology.hpp"

namespace {

using nlohmann::json;
namespace fs = std::filesystem;

void emit(const std::string& out_path, const std::string& text) {
  if (out_path.empty()) {
    std::cout << text;
    if (!text.empty() && text.back() != '\n') std::cout << '\n';
  } else {
    bilm::write_file_atomic(out_path, text);
  }
}

std::ifstream open(const std::string& path) {
  std::ifstream in(path);
  if (!in) {
    throw bilm::ValidationError("cannot open " + path);
  }
  return in;
}

// The tokenizer stored in the checkpoint unless one is given explicitly.
bilm::tok::TokenizerModel tokenizer_for(const bilm::model::ModelState& state,
                                        const std::string& explicit_path) {
  if (!explicit_path.empty()) {
    return bilm::tok::TokenizerModel::load(explicit_path);
  }
  if (state.tokenizer_blob.empty()) {
    throw bilm::ValidationError("checkpoint carries no tokenizer; pass --tokenizer");
  }
  return bilm::tok::TokenizerModel::deserialize(state.tokenizer_blob);
}

bilm::typology::DistanceMatrix distance_matrix(const std::string& path) {
  const auto profiles = path.empty() ? bilm::typology::load_bundled_fixture()
                                     : bilm::typology::load_feature_matrix_file(path);
  return bilm::typology::compute_distance_matrix(profiles);
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"bilm: sequential bilingual language-model experiments"};
  app.require_subcommand(1);

  // validate
  auto* validate = app.add_subcommand("validate", "Validate a manifest and echo derived values");
  std::string validate_manifest_path;
  validate->add_option("--manifest", validate_manifest_path, "Manifest JSON")->required();

  // train-tokenizer
  auto* tok_cmd = app.add_subcommand("train-tokenizer", "Train the shared subword tokenizer");
  std::string tok_l1, tok_l2, tok_out;
  bilm::tok::TrainerOptions tok_opts;
  tok_cmd->add_option("--l1", tok_l1, "L1 corpus, one document per line")->required();
  tok_cmd->add_option("--l2", tok_l2, "L2 corpus, one document per line")->required();
  tok_cmd->add_option("--vocab-size", tok_opts.vocab_size, "Vocabulary size")->capture_default_str();
  tok_cmd->add_option("--lines", tok_opts.lines_per_language, "Lines sampled per language")
      ->capture_default_str();
  tok_cmd->add_option("--seed", tok_opts.seed, "Sampling seed")->capture_default_str();
  tok_cmd->add_option("--out", tok_out, "Output tokenizer file")->required();

  // pack
  auto* pack_cmd = app.add_subcommand("pack", "Tokenize and pack a corpus into fixed-length rows");
  std::string pack_tok, pack_in, pack_lang, pack_out;
  int pack_seq = 256;
  int64_t pack_budget = 0;
  uint64_t pack_seed = 123;
  pack_cmd->add_option("--tokenizer", pack_tok, "Tokenizer file")->required();
  pack_cmd->add_option("--input", pack_in, "Corpus, one document per line")->required();
  pack_cmd->add_option("--language", pack_lang, "Language code")->required();
  pack_cmd->add_option("--seq-len", pack_seq, "Row length")->capture_default_str();
  pack_cmd->add_option("--budget", pack_budget, "Token budget")->required();
  pack_cmd->add_option("--seed", pack_seed, "Row shuffle seed")->capture_default_str();
  pack_cmd->add_option("--out", pack_out, "Output .bin path")->required();

  // train / run
  bilm::pipeline::RunOptions run_opts;
  std::string train_manifest, run_manifest;
  auto* train_cmd = app.add_subcommand("train", "Run a manifest up to and including training");
  train_cmd->add_option("--manifest", train_manifest, "Manifest JSON")->required();
  auto* run_cmd = app.add_subcommand("run", "Run every stage of a manifest (resumable)");
  run_cmd->add_option("--manifest", run_manifest, "Manifest JSON")->required();
  for (auto* cmd : {train_cmd, run_cmd}) {
    cmd->add_flag("-v,--verbose", run_opts.verbose, "Log stage progress to stderr");
    cmd->add_option("--progress", run_opts.progress_every, "Print training progress every N steps");
  }

  // eval
  auto* eval_cmd = app.add_subcommand("eval", "Score minimal pairs");
  std::string eval_model, eval_data, eval_primes, eval_mode = "none", eval_tok, eval_csv, eval_json;
  uint64_t eval_seed = 123;
  eval_cmd->add_option("--model", eval_model, "Checkpoint")->required();
  eval_cmd->add_option("--data", eval_data, "Minimal-pair JSON lines")->required();
  eval_cmd->add_option("--primes", eval_primes, "Prime JSON lines");
  eval_cmd->add_option("--prime-mode", eval_mode, "none|aligned|shuffled|random")->capture_default_str();
  eval_cmd->add_option("--seed", eval_seed, "Seed for shuffled/random primes")->capture_default_str();
  eval_cmd->add_option("--tokenizer", eval_tok, "Tokenizer (default: the checkpoint's)");
  eval_cmd->add_option("--csv", eval_csv, "Per-pair CSV output");
  eval_cmd->add_option("--json", eval_json, "Aggregate JSON output (default stdout)");

  // fce
  auto* fce_cmd = app.add_subcommand("fce", "Learner-group preference scores");
  std::string fce_model, fce_data, fce_tok, fce_json;
  int fce_seeds = 5;
  uint64_t fce_seed = 0;
  fce_cmd->add_option("--model", fce_model, "Checkpoint")->required();
  fce_cmd->add_option("--data", fce_data, "Learner pair JSON lines")->required();
  fce_cmd->add_option("--seeds", fce_seeds, "Undersampling seeds")->capture_default_str();
  fce_cmd->add_option("--seed", fce_seed, "First seed")->capture_default_str();
  fce_cmd->add_option("--tokenizer", fce_tok, "Tokenizer (default: the checkpoint's)");
  fce_cmd->add_option("--json", fce_json, "Output JSON (default stdout)");

  // lens
  auto* lens_cmd = app.add_subcommand("lens", "Language profile of decoded hidden states");
  std::string lens_model, lens_l1, lens_l2, lens_inputs, lens_json;
  bilm::mech::LensOptions lens_opts;
  size_t lens_rows = 16;
  double lens_threshold = 2.0;
  lens_cmd->add_option("--model", lens_model, "Checkpoint")->required();
  lens_cmd->add_option("--l1-corpus", lens_l1, "Packed L1 corpus for the dictionary")->required();
  lens_cmd->add_option("--l2-corpus", lens_l2, "Packed L2 corpus for the dictionary")->required();
  lens_cmd->add_option("--inputs", lens_inputs, "Packed corpus whose rows are probed")->required();
  lens_cmd->add_option("--rows", lens_rows, "Rows probed")->capture_default_str();
  lens_cmd->add_option("--k", lens_opts.k, "Top-k per position")->capture_default_str();
  lens_cmd->add_flag("--last-position-only", lens_opts.last_position_only, "Probe only the final position");
  lens_cmd->add_option("--threshold", lens_threshold, "Dictionary frequency ratio")->capture_default_str();
  lens_cmd->add_option("--json", lens_json, "Output JSON (default stdout)");

  // neurons
  auto* neurons_cmd = app.add_subcommand("neurons", "Detect language neurons or compare neuron sets");
  std::string neurons_model, neurons_corpus, neurons_out;
  std::vector<std::string> neurons_overlap;
  double neurons_quantile = 0.25;
  size_t neurons_rows = 0;
  neurons_cmd->add_option("--model", neurons_model, "Checkpoint");
  neurons_cmd->add_option("--corpus", neurons_corpus, "Packed corpus");
  neurons_cmd->add_option("--quantile", neurons_quantile, "Fraction kept per sublayer")->capture_default_str();
  neurons_cmd->add_option("--rows", neurons_rows, "Rows used (0 = all)")->capture_default_str();
  neurons_cmd->add_option("--overlap", neurons_overlap, "Two neuron-set JSON files to intersect")
      ->expected(2);
  neurons_cmd->add_option("--json", neurons_out, "Output JSON (default stdout)");

  // distance
  auto* distance_cmd = app.add_subcommand("distance", "Syntactic distance matrix");
  std::string distance_matrix_path, distance_correlate;
  bool distance_json = false;
  distance_cmd->add_option("--matrix", distance_matrix_path, "Feature matrix (default: bundled fixture)");
  distance_cmd->add_flag("--json", distance_json, "JSON instead of a table");
  distance_cmd->add_option("--correlate", distance_correlate,
                           "JSON list of {language_a, language_b, shared} to correlate with distance");

  // report
  auto* report_cmd = app.add_subcommand("report", "Long-format CSV across run results");
  std::vector<std::string> report_results;
  std::string report_matrix, report_out;
  report_cmd->add_option("--results", report_results, "run_result.json files")->required();
  report_cmd->add_option("--matrix", report_matrix, "Feature matrix (default: bundled fixture)");
  report_cmd->add_option("--out", report_out, "Output CSV (default stdout)");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 1;
  }

  try {
    if (*validate) {
      const auto m = bilm::pipeline::validate_manifest(validate_manifest_path);
      std::cout << json{{"experiment_id", m.experiment_id}, {"manifest_hash", m.hash},
                        {"derived", m.derived}, {"canonical", m.canonical}}
                       .dump(2)
                << '\n';
    } else if (*tok_cmd) {
      auto a = open(tok_l1);
      auto b = open(tok_l2);
      const auto tokenizer = bilm::tok::train_tokenizer(a, b, tok_opts);
      tokenizer.save(tok_out);
      std::cout << json{{"path", tok_out}, {"vocab_size", tokenizer.vocab_size()}, {"hash", tokenizer.hash()}}
                       .dump(2)
                << '\n';
    } else if (*pack_cmd) {
      const auto tokenizer = bilm::tok::TokenizerModel::load(pack_tok);
      auto in = open(pack_in);
      std::vector<std::vector<int>> docs;
      std::string line;
      while (std::getline(in, line)) {
        if (!line.empty()) docs.push_back(tokenizer.encode(line));
      }
      auto packed = bilm::corpus::pack(docs, pack_seq, pack_budget, pack_seed, bilm::tok::kEotId);
      packed.language = pack_lang;
      packed.tokenizer_hash = tokenizer.hash();
      bilm::corpus::save_packed(packed, pack_out);
      std::cout << json{{"path", pack_out}, {"rows", packed.rows()}, {"hash", packed.content_hash()}}.dump(2)
                << '\n';
    } else if (*train_cmd || *run_cmd) {
      const auto m = bilm::pipeline::validate_manifest(*train_cmd ? train_manifest : run_manifest);
      if (*train_cmd) run_opts.stop_after = "train";
      const auto result = bilm::pipeline::run(m, run_opts);
      std::cout << result.to_json().dump(2) << '\n';
    } else if (*eval_cmd) {
      const auto state = bilm::model::load_checkpoint(eval_model);
      const auto tokenizer = tokenizer_for(state, eval_tok);
      auto ds = bilm::eval::load_blimp(eval_data);
      if (!eval_primes.empty()) {
        bilm::eval::attach_primes(ds, bilm::eval::load_prime_file(eval_primes));
      }
      const bilm::eval::Scorer scorer(state, tokenizer);
      const auto mode = bilm::eval::prime_mode_from_string(eval_mode);
      const auto report = bilm::eval::accuracy(scorer, ds.records, mode, eval_seed);
      if (!eval_csv.empty()) bilm::write_file_atomic(eval_csv, report.verdicts_csv());
      emit(eval_json, report.to_json().dump(2));
    } else if (*fce_cmd) {
      const auto state = bilm::model::load_checkpoint(fce_model);
      const auto tokenizer = tokenizer_for(state, fce_tok);
      const auto ds = bilm::eval::load_fce_pairs(fce_data);
      const bilm::eval::Scorer scorer(state, tokenizer);
      json j = bilm::eval::fce_delta_s(scorer, ds.records, fce_seeds, fce_seed).to_json();
      j["skipped"] = ds.skipped;
      emit(fce_json, j.dump(2));
    } else if (*lens_cmd) {
      const auto state = bilm::model::load_checkpoint(lens_model);
      const auto l1 = bilm::corpus::load_packed(lens_l1);
      const auto l2 = bilm::corpus::load_packed(lens_l2);
      const auto probe = bilm::corpus::load_packed(lens_inputs);
      auto dict = bilm::mech::build_lang_dictionary(l1.tokens, l2.tokens, state.config.vocab_size,
                                                    lens_threshold);
      dict.tokenizer_hash = l1.tokenizer_hash;
      std::vector<std::vector<int>> inputs;
      for (size_t i = 0; i < std::min(lens_rows, probe.rows()); ++i) {
        inputs.emplace_back(probe.row(i).begin(), probe.row(i).end());
      }
      emit(lens_json, bilm::mech::logit_lens(state, inputs, dict, lens_opts).to_json().dump(2));
    } else if (*neurons_cmd) {
      if (!neurons_overlap.empty()) {
        const auto a = bilm::mech::NeuronSet::from_json(json::parse(bilm::read_file(neurons_overlap[0])));
        const auto b = bilm::mech::NeuronSet::from_json(json::parse(bilm::read_file(neurons_overlap[1])));
        emit(neurons_out, bilm::mech::neuron_overlap(a, b).to_json().dump(2));
      } else {
        if (neurons_model.empty() || neurons_corpus.empty()) {
          throw bilm::ValidationError("neurons: pass --model and --corpus, or --overlap A B");
        }
        const auto state = bilm::model::load_checkpoint(neurons_model);
        const auto corpus = bilm::corpus::load_packed(neurons_corpus);
        const auto set = bilm::mech::detect_language_neurons(state, corpus, neurons_quantile, neurons_rows);
        emit(neurons_out, set.to_json().dump(2));
      }
    } else if (*distance_cmd) {
      const auto matrix = distance_matrix(distance_matrix_path);
      if (!distance_correlate.empty()) {
        std::vector<bilm::mech::OverlapPoint> points;
        for (const auto& p : json::parse(bilm::read_file(distance_correlate))) {
          points.push_back({p.at("language_a").get<std::string>(), p.at("language_b").get<std::string>(),
                            p.at("shared").get<double>()});
        }
        std::cout << bilm::mech::overlap_distance_correlation(points, matrix).to_json().dump(2) << '\n';
      } else if (distance_json) {
        std::cout << matrix.to_json().dump(2) << '\n';
      } else {
        std::cout << matrix.to_text();
      }
    } else if (*report_cmd) {
      std::vector<bilm::pipeline::RunResult> results;
      for (const auto& p : report_results) {
        results.push_back(bilm::pipeline::RunResult::load(p));
      }
      const auto rows = bilm::pipeline::report_rows(results, distance_matrix(report_matrix));
      emit(report_out, bilm::pipeline::report_csv(rows));
    }
  } catch (const bilm::ValidationError& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  } catch (const json::exception& e) {
    std::cerr << "error: malformed JSON input: " << e.what() << '\n';
    return 1;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 2;
  }
  return 0;
}
