#pragma once

// Declarative experiment manifests. A manifest fixes every science-relevant
// parameter of a run; the command line only supplies paths and verbosity.

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "bilm/corpus.hpp"
#include "bilm/evalsuite.hpp"
#include "bilm/model.hpp"
#include "bilm/trainer.hpp"

namespace bilm::pipeline {

namespace fs = std::filesystem;

struct CorpusPaths {
  fs::path train;
  fs::path eval;
};

struct TokenizerSpec {
  // Prebuilt tokenizer; when absent one is trained from both training corpora.
  std::optional<fs::path> path;
  std::optional<std::string> expected_hash;
  size_t lines_per_language = 100000;
  int vocab_size = 50004;
  uint64_t seed = 123;
};

struct PackingSpec {
  int seq_len = 256;
  int64_t train_budget_tokens = 0;
  int64_t eval_budget_tokens = 0;
  uint64_t seed = 123;
};

struct ScheduleSpec {
  corpus::ScheduleMode mode = corpus::ScheduleMode::sequential_onset;
  // Sequential: the step at which L2 rows start. Early-imbalanced: the
  // sequential onset whose totals are matched. Unused for monolingual.
  int64_t onset_step = 0;
  double post_onset_l2_fraction = 0.5;
};

struct EvalSpec {
  std::optional<fs::path> blimp;
  std::optional<fs::path> primes;
  std::vector<eval::PrimeMode> prime_modes{eval::PrimeMode::none};
  uint64_t seed = 123;
  std::optional<fs::path> fce;
  int fce_seeds = 5;
  uint64_t fce_seed = 0;
  int64_t eval_every = 0;      // training-time eval-loss cadence
  size_t loss_max_rows = 0;    // rows per language scored for eval loss (0 = all)
};

struct MechSpec {
  bool lens = false;
  int lens_k = 10;
  bool lens_last_position_only = false;
  size_t lens_rows = 16;  // eval rows per language fed through the lens
  double dictionary_threshold = 2.0;
  bool neurons = false;
  double neuron_quantile = 0.25;
  size_t neuron_rows = 64;
};

struct ExperimentManifest {
  fs::path source;  // manifest file; relative paths resolve against its directory
  std::string experiment_id;
  std::string l1;
  std::string l2;
  CorpusPaths corpus_l1;
  CorpusPaths corpus_l2;
  TokenizerSpec tokenizer;
  PackingSpec packing;
  ScheduleSpec schedule;
  std::string model_preset = "tiny";
  nlohmann::json model_overrides = nlohmann::json::object();
  uint64_t model_seed = 123;
  train::OptimizerConfig optimizer;
  EvalSpec eval;
  MechSpec mech;
  std::optional<fs::path> baseline;  // manifest of the monolingual baseline
  fs::path output_dir;

  // Canonical normalised form and its SHA-256.
  nlohmann::json canonical;
  std::string hash;
  // Derived quantities echoed for the user (e.g. batch composition).
  nlohmann::json derived;

  corpus::BatchSchedule make_schedule() const;
  // Preset plus overrides for the given vocabulary size.
  model::ModelConfig model_config(int vocab_size) const;
};

// Parses and cross-checks a manifest. Throws ValidationError on missing files,
// out-of-range onsets, non-integral compositions or a tokenizer whose hash
// differs from the one declared.
ExperimentManifest validate_manifest(const fs::path& path);
ExperimentManifest parse_manifest(const nlohmann::json& j, const fs::path& source);

}  // namespace bilm::pipeline
