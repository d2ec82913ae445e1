#include "bilm/trainer.hpp"

#include <cmath>
#include <fstream>
#include <iostream>
#include <sstream>

#include <nlohmann/json.hpp>

#include "bilm/error.hpp"
#include "bilm/hash.hpp"
#include "bilm/rng.hpp"

namespace bilm::train {

void OptimizerConfig::validate() const {
  if (!(peak_lr > 0.0) || warmup_steps <= 0 || total_steps <= 0 || batch_size <= 0) {
    throw ValidationError("optimizer: peak_lr, warmup_steps, total_steps and batch_size must be positive");
  }
  if (warmup_steps >= total_steps) {
    throw ValidationError("optimizer: warmup_steps must be below total_steps");
  }
  if (!(adam_beta1 > 0.0 && adam_beta1 < 1.0) || !(adam_beta2 > 0.0 && adam_beta2 < 1.0) ||
      !(adam_eps > 0.0)) {
    throw ValidationError("optimizer: betas must lie in (0, 1) and eps must be positive");
  }
  if (grad_clip < 0.0) {
    throw ValidationError("optimizer: grad_clip must be non-negative");
  }
}

nlohmann::json OptimizerConfig::to_json() const {
  return {{"peak_lr", peak_lr},       {"warmup_steps", warmup_steps}, {"total_steps", total_steps},
          {"adam_beta1", adam_beta1}, {"adam_beta2", adam_beta2},     {"adam_eps", adam_eps},
          {"batch_size", batch_size}, {"seed", seed},                 {"grad_clip", grad_clip}};
}

OptimizerConfig OptimizerConfig::from_json(const nlohmann::json& j) {
  OptimizerConfig c;
  c.peak_lr = j.value("peak_lr", c.peak_lr);
  c.warmup_steps = j.value("warmup_steps", c.warmup_steps);
  c.total_steps = j.value("total_steps", c.total_steps);
  c.adam_beta1 = j.value("adam_beta1", c.adam_beta1);
  c.adam_beta2 = j.value("adam_beta2", c.adam_beta2);
  c.adam_eps = j.value("adam_eps", c.adam_eps);
  c.batch_size = j.value("batch_size", c.batch_size);
  c.seed = j.value("seed", c.seed);
  c.grad_clip = j.value("grad_clip", c.grad_clip);
  return c;
}

double lr_at(const OptimizerConfig& cfg, int64_t step) {
  if (step < 0 || step > cfg.total_steps) {
    throw ValidationError("lr_at: step " + std::to_string(step) + " outside [0, " +
                          std::to_string(cfg.total_steps) + "]");
  }
  if (step <= cfg.warmup_steps) {
    return cfg.peak_lr * static_cast<double>(step) / static_cast<double>(cfg.warmup_steps);
  }
  return cfg.peak_lr * static_cast<double>(cfg.total_steps - step) /
         static_cast<double>(cfg.total_steps - cfg.warmup_steps);
}

const EvalRecord& TrainLog::eval_at(int64_t step) const {
  for (const EvalRecord& e : evals) {
    if (e.step == step) {
      return e;
    }
  }
  throw ValidationError("no evaluation logged at step " + std::to_string(step));
}

namespace {

nlohmann::json to_json(const StepRecord& r) {
  return {{"type", "step"},   {"step", r.step}, {"lr", r.lr},
          {"loss", r.loss},   {"n_l1", r.n_l1}, {"n_l2", r.n_l2},
          {"grad_norm", r.grad_norm}, {"clipped", r.clipped}};
}

nlohmann::json to_json(const EvalRecord& r) {
  nlohmann::json j = {{"type", "eval"}, {"step", r.step}};
  j["l1_loss"] = r.l1_loss ? nlohmann::json(*r.l1_loss) : nlohmann::json(nullptr);
  j["l2_loss"] = r.l2_loss ? nlohmann::json(*r.l2_loss) : nlohmann::json(nullptr);
  return j;
}

nlohmann::json to_json(const CheckpointRecord& r) {
  return {{"type", "checkpoint"}, {"step", r.step}, {"path", r.path}, {"hash", r.hash}};
}

std::optional<double> optional_number(const nlohmann::json& j, const char* key) {
  if (!j.contains(key) || j.at(key).is_null()) {
    return std::nullopt;
  }
  return j.at(key).get<double>();
}

class LogSink {
 public:
  LogSink(const std::optional<std::filesystem::path>& path, bool truncate) {
    if (!path) {
      return;
    }
    if (path->has_parent_path()) {
      std::filesystem::create_directories(path->parent_path());
    }
    out_.open(*path, truncate ? std::ios::trunc : std::ios::app);
    if (!out_) {
      throw Error("cannot open training log " + path->string());
    }
  }

  void write(const nlohmann::json& j) {
    if (out_.is_open()) {
      out_ << j.dump() << '\n';
      out_.flush();
    }
  }

 private:
  std::ofstream out_;
};

void check_tokenizer(const model::ModelState& state, const corpus::PackedCorpus& c) {
  if (!state.tokenizer_hash.empty() && !c.tokenizer_hash.empty() &&
      state.tokenizer_hash != c.tokenizer_hash) {
    throw ValidationError("corpus '" + c.language + "' was packed with tokenizer " +
                          c.tokenizer_hash + " but the model uses " + state.tokenizer_hash);
  }
}

}  // namespace

std::string TrainLog::to_jsonl() const {
  std::string out;
  for (const auto& r : steps) out += to_json(r).dump() + "\n";
  for (const auto& r : evals) out += to_json(r).dump() + "\n";
  for (const auto& r : checkpoints) out += to_json(r).dump() + "\n";
  return out;
}

TrainLog TrainLog::from_jsonl(std::string_view text) {
  TrainLog log;
  std::istringstream in{std::string(text)};
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty()) {
      continue;
    }
    const nlohmann::json j = nlohmann::json::parse(line);
    const std::string type = j.at("type").get<std::string>();
    if (type == "step") {
      log.steps.push_back({j.at("step").get<int64_t>(), j.at("lr").get<double>(),
                           j.at("loss").get<double>(), j.at("n_l1").get<int>(),
                           j.at("n_l2").get<int>(), j.value("grad_norm", 0.0),
                           j.value("clipped", false)});
    } else if (type == "eval") {
      log.evals.push_back({j.at("step").get<int64_t>(), optional_number(j, "l1_loss"),
                           optional_number(j, "l2_loss")});
    } else if (type == "checkpoint") {
      log.checkpoints.push_back({j.at("step").get<int64_t>(), j.at("path").get<std::string>(),
                                 j.at("hash").get<std::string>()});
    } else {
      throw ValidationError("unknown training log record type '" + type + "'");
    }
  }
  return log;
}

void adam_update(model::ModelState& state, const std::vector<double>& grads,
                 const OptimizerConfig& cfg, double lr) {
  const size_t n = state.params.size();
  if (grads.size() != n) {
    throw Error("adam_update: gradient size mismatch");
  }
  if (state.adam_m.size() != n) {
    state.adam_m.assign(n, 0.0);
    state.adam_v.assign(n, 0.0);
  }
  const double t = static_cast<double>(state.step + 1);
  const double b1 = cfg.adam_beta1;
  const double b2 = cfg.adam_beta2;
  const double c1 = 1.0 - std::pow(b1, t);
  const double c2 = 1.0 - std::pow(b2, t);
  double* p = state.params.data();
  double* m = state.adam_m.data();
  double* v = state.adam_v.data();
  const double* g = grads.data();
  for (size_t i = 0; i < n; ++i) {
    m[i] = b1 * m[i] + (1.0 - b1) * g[i];
    v[i] = b2 * v[i] + (1.0 - b2) * g[i] * g[i];
    const double m_hat = m[i] / c1;
    const double v_hat = v[i] / c2;
    p[i] -= lr * m_hat / (std::sqrt(v_hat) + cfg.adam_eps);
  }
  ++state.step;
}

double evaluate_loss(const model::ModelState& state, const corpus::PackedCorpus& corpus,
                     size_t max_rows) {
  size_t rows = corpus.rows();
  if (max_rows > 0) {
    rows = std::min(rows, max_rows);
  }
  if (rows == 0 || corpus.seq_len < 2) {
    throw ValidationError("evaluate_loss: evaluation corpus is empty");
  }
  constexpr size_t kChunk = 16;
  double total = 0.0;
  std::vector<std::span<const int>> chunk;
  for (size_t start = 0; start < rows; start += kChunk) {
    chunk.clear();
    for (size_t r = start; r < std::min(rows, start + kChunk); ++r) {
      chunk.push_back(corpus.row(r));
    }
    total += model::batch_loss(state, chunk) * static_cast<double>(chunk.size());
  }
  return total / static_cast<double>(rows);
}

TrainResult train(model::ModelState state, const corpus::BatchSchedule& schedule,
                  const corpus::PackedCorpus& l1, const corpus::PackedCorpus& l2,
                  const OptimizerConfig& cfg, const EvalSets& eval_sets,
                  const TrainOptions& options) {
  cfg.validate();
  if (schedule.total_steps() != cfg.total_steps) {
    throw ValidationError("schedule covers " + std::to_string(schedule.total_steps()) +
                          " steps but the optimizer expects " + std::to_string(cfg.total_steps));
  }
  if (schedule.batch_size() != cfg.batch_size) {
    throw ValidationError("schedule batch size differs from optimizer batch_size");
  }
  check_tokenizer(state, l1);
  check_tokenizer(state, l2);
  if (eval_sets.l1 != nullptr) check_tokenizer(state, *eval_sets.l1);
  if (eval_sets.l2 != nullptr) check_tokenizer(state, *eval_sets.l2);
  if (state.step < 0 || state.step > cfg.total_steps) {
    throw ValidationError("model step is outside the schedule");
  }

  TrainResult result;
  LogSink sink(options.log_path, state.step == 0);
  const int64_t onset = schedule.onset_step();

  const auto run_eval = [&](const model::ModelState& s) {
    if (eval_sets.l1 == nullptr && eval_sets.l2 == nullptr) {
      return;
    }
    EvalRecord rec;
    rec.step = s.step;
    if (eval_sets.l1 != nullptr) rec.l1_loss = evaluate_loss(s, *eval_sets.l1, eval_sets.max_rows);
    if (eval_sets.l2 != nullptr) rec.l2_loss = evaluate_loss(s, *eval_sets.l2, eval_sets.max_rows);
    sink.write(to_json(rec));
    result.log.evals.push_back(rec);
  };
  const auto should_eval = [&](int64_t step) {
    return step == 0 || step == onset || step == cfg.total_steps ||
           (options.eval_every > 0 && step % options.eval_every == 0);
  };
  const auto should_checkpoint = [&](int64_t step) {
    return (step == onset && onset > 0) || step == cfg.total_steps ||
           (options.checkpoint_every > 0 && step % options.checkpoint_every == 0);
  };
  const auto checkpoint = [&](const model::ModelState& s) {
    if (!options.checkpoint_dir) {
      return;
    }
    const auto path = *options.checkpoint_dir / ("step-" + std::to_string(s.step) + ".ckpt");
    const std::string bytes = model::serialize_checkpoint(s);
    model::save_checkpoint(s, path);
    CheckpointRecord rec{s.step, path.string(), sha256_hex(bytes)};
    sink.write(to_json(rec));
    result.log.checkpoints.push_back(rec);
  };

  if (should_eval(state.step)) {
    run_eval(state);
  }
  const corpus::BatchSampler sampler(schedule, l1, l2, cfg.seed);
  while (state.step < cfg.total_steps) {
    const int64_t step = state.step;
    const corpus::Batch batch = sampler.at(step);
    model::LossAndGrads lg =
        model::loss_and_grads(state, batch.rows, true, mix_seed(cfg.seed, static_cast<uint64_t>(step)));
    if (!std::isfinite(lg.loss)) {
      throw Error("non-finite training loss at step " + std::to_string(step));
    }
    double norm_sq = 0.0;
    for (const double g : lg.grads) {
      norm_sq += g * g;
    }
    const double norm = std::sqrt(norm_sq);
    if (!std::isfinite(norm)) {
      throw Error("non-finite gradient norm at step " + std::to_string(step));
    }
    StepRecord rec;
    rec.step = step;
    rec.lr = lr_at(cfg, step);
    rec.loss = lg.loss;
    rec.n_l1 = batch.n_l1;
    rec.n_l2 = batch.n_l2;
    rec.grad_norm = norm;
    if (cfg.grad_clip > 0.0 && norm > cfg.grad_clip) {
      const double scale = cfg.grad_clip / norm;
      for (double& g : lg.grads) {
        g *= scale;
      }
      rec.clipped = true;
    }
    adam_update(state, lg.grads, cfg, rec.lr);
    sink.write(to_json(rec));
    result.log.steps.push_back(rec);

    if (options.progress_every > 0 && (state.step % options.progress_every == 0)) {
      std::cerr << "step " << state.step << "/" << cfg.total_steps << " loss " << rec.loss
                << " lr " << rec.lr << (rec.clipped ? " (clipped)" : "") << '\n';
    }
    if (should_eval(state.step)) {
      run_eval(state);
    }
    if (should_checkpoint(state.step)) {
      checkpoint(state);
    }
  }
  result.state = std::move(state);
  return result;
}

}  // namespace bilm::train
