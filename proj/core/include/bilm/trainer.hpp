#pragma once

// Adam optimisation over a BatchSchedule. The learning-rate schedule depends
// only on the step, so the onset of the second language changes batch
// composition and nothing else.

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json_fwd.hpp>

#include "bilm/corpus.hpp"
#include "bilm/model.hpp"

namespace bilm::train {

struct OptimizerConfig {
  double peak_lr = 1e-4;
  int64_t warmup_steps = 5000;
  int64_t total_steps = 64000;
  double adam_beta1 = 0.9;
  double adam_beta2 = 0.999;
  double adam_eps = 1e-6;
  int batch_size = 64;
  uint64_t seed = 123;
  // Global-norm gradient clip; 0 disables.
  double grad_clip = 1.0;

  void validate() const;
  nlohmann::json to_json() const;
  static OptimizerConfig from_json(const nlohmann::json& j);
  bool operator==(const OptimizerConfig&) const = default;
};

// Linear warmup from 0 to peak_lr, then linear decay to 0 at total_steps.
double lr_at(const OptimizerConfig& cfg, int64_t step);

struct StepRecord {
  int64_t step = 0;
  double lr = 0.0;
  double loss = 0.0;
  int n_l1 = 0;
  int n_l2 = 0;
  double grad_norm = 0.0;
  bool clipped = false;
};

struct EvalRecord {
  int64_t step = 0;  // optimizer steps completed when evaluated
  std::optional<double> l1_loss;
  std::optional<double> l2_loss;
};

struct CheckpointRecord {
  int64_t step = 0;
  std::string path;
  std::string hash;
};

struct TrainLog {
  std::vector<StepRecord> steps;
  std::vector<EvalRecord> evals;
  std::vector<CheckpointRecord> checkpoints;

  // Loss at a logged eval step; throws if that step was not evaluated.
  const EvalRecord& eval_at(int64_t step) const;
  // One JSON object per line, tagged with "type": step | eval | checkpoint.
  std::string to_jsonl() const;
  static TrainLog from_jsonl(std::string_view text);
};

struct EvalSets {
  const corpus::PackedCorpus* l1 = nullptr;
  const corpus::PackedCorpus* l2 = nullptr;
  // Caps the rows scored per language (0 = all rows).
  size_t max_rows = 0;
};

struct TrainOptions {
  int64_t eval_every = 0;        // 0: evaluate only at start, onset and end
  int64_t checkpoint_every = 0;  // 0: checkpoint only at onset and end
  std::optional<std::filesystem::path> checkpoint_dir;
  std::optional<std::filesystem::path> log_path;  // append-only JSON lines
  int64_t progress_every = 0;                     // stderr progress cadence; 0 = silent
};

struct TrainResult {
  model::ModelState state;
  TrainLog log;
};

// One Adam update with bias correction (t = state.step + 1) at learning rate lr.
void adam_update(model::ModelState& state, const std::vector<double>& grads,
                 const OptimizerConfig& cfg, double lr);

// Runs steps [state.step, cfg.total_steps). Throws Error on a non-finite loss
// and ValidationError when a corpus was packed with a different tokenizer.
TrainResult train(model::ModelState state, const corpus::BatchSchedule& schedule,
                  const corpus::PackedCorpus& l1, const corpus::PackedCorpus& l2,
                  const OptimizerConfig& cfg, const EvalSets& eval_sets = {},
                  const TrainOptions& options = {});

// Mean next-token cross-entropy over the corpus rows, dropout off.
double evaluate_loss(const model::ModelState& state, const corpus::PackedCorpus& corpus,
                     size_t max_rows = 0);

}  // namespace bilm::train
