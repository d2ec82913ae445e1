#pragma once

// Executes a manifest as a chain of content-addressed stages:
// tokenizer -> pack -> train -> eval -> mech. Each stage directory is named by
// the hash of its inputs and holds a stage.json marker written last, so a rerun
// skips every stage whose inputs are unchanged and whose outputs are present.

#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include <nlohmann/json_fwd.hpp>

#include "bilm/manifest.hpp"

namespace bilm::pipeline {

struct Metric {
  std::string metric;
  std::string prime_mode;  // empty when the metric has no priming condition
  double value = 0.0;
  uint64_t seed = 0;
};

struct RunResult {
  std::string experiment_id;
  std::string manifest_hash;
  std::string l1;
  std::string l2;
  std::string schedule_mode;
  int64_t onset = 0;
  std::string tokenizer_hash;
  std::map<std::string, std::string> stage_hashes;  // stage -> output hash
  std::map<std::string, std::string> stage_dirs;
  std::vector<std::string> executed_stages;          // stages computed by this invocation
  std::string checkpoint;                            // final checkpoint path
  std::vector<Metric> metrics;
  // SHA-256 over the stage output hashes; independent of which stages were skipped.
  std::string hash;

  nlohmann::json to_json() const;
  static RunResult from_json(const nlohmann::json& j);
  static RunResult load(const std::filesystem::path& path);
};

struct RunOptions {
  bool verbose = false;
  int64_t progress_every = 0;
  // Stop after the named stage ("tokenizer", "pack" or "train"); empty runs all.
  // Partial runs do not write run_result.json.
  std::string stop_after;
};

// Runs (or resumes) the manifest. A baseline manifest is run first; its
// tokenizer hash must equal this run's for interference metrics to be emitted.
// Stage failures are rethrown with the stage name prepended.
RunResult run(const ExperimentManifest& manifest, const RunOptions& options = {});

// Where run() stores its result.
std::filesystem::path run_result_path(const ExperimentManifest& manifest);

}  // namespace bilm::pipeline
