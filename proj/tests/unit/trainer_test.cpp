#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>

#include <nlohmann/json.hpp>

#include "bilm/error.hpp"
#include "bilm/file_util.hpp"
#include "bilm/trainer.hpp"
#include "synthetic.hpp"

namespace bilm::train {
namespace {

OptimizerConfig full_scale_config() { return OptimizerConfig{}; }

OptimizerConfig desk_config(int64_t total, int batch) {
  OptimizerConfig c;
  c.peak_lr = 3e-3;
  c.warmup_steps = std::min<int64_t>(4, total - 1);
  c.total_steps = total;
  c.batch_size = batch;
  return c;
}

const testing::SyntheticSetup& setup() {
  static const testing::SyntheticSetup s = testing::make_synthetic_setup(300, 32, 32 * 48, 32 * 8, 5);
  return s;
}

model::ModelState fresh_model(uint64_t seed = 1) {
  model::ModelState m = model::init(testing::tiny_config(300, 32), seed);
  m.tokenizer_hash = setup().tokenizer.hash();
  return m;
}

TEST(LrSchedule, TableValues) {
  const auto c = full_scale_config();
  EXPECT_EQ(lr_at(c, 5000), 1e-4);
  EXPECT_EQ(lr_at(c, 0), 0.0);
  EXPECT_EQ(lr_at(c, 64000), 0.0);
  EXPECT_NEAR(lr_at(c, 34500), 5e-5, 1e-18);
  EXPECT_NEAR(lr_at(c, 2500), 5e-5, 1e-18);
}

TEST(LrSchedule, PiecewiseLinearWithPeakAtWarmup) {
  const auto c = full_scale_config();
  double best = 0.0;
  int64_t argbest = -1;
  for (int64_t s = 0; s <= c.total_steps; s += 250) {
    const double lr = lr_at(c, s);
    if (lr > best) {
      best = lr;
      argbest = s;
    }
    if (s > 0 && s < c.total_steps) {
      // Midpoint of neighbours equals the value away from the kink.
      if (s != c.warmup_steps) {
        EXPECT_NEAR(lr_at(c, s), 0.5 * (lr_at(c, s - 1) + lr_at(c, s + 1)), 1e-18);
      }
      EXPECT_LT(std::abs(lr_at(c, s + 1) - lr_at(c, s)), 2.1e-8);  // continuity
    }
  }
  EXPECT_EQ(argbest, 5000);
  EXPECT_THROW(lr_at(c, -1), ValidationError);
  EXPECT_THROW(lr_at(c, 64001), ValidationError);
}

TEST(OptimizerConfig, Defaults) {
  const auto c = full_scale_config();
  EXPECT_EQ(c.peak_lr, 1e-4);
  EXPECT_EQ(c.warmup_steps, 5000);
  EXPECT_EQ(c.total_steps, 64000);
  EXPECT_EQ(c.adam_beta1, 0.9);
  EXPECT_EQ(c.adam_beta2, 0.999);
  EXPECT_EQ(c.adam_eps, 1e-6);
  EXPECT_EQ(c.batch_size, 64);
  EXPECT_EQ(c.seed, 123u);
}

TEST(OptimizerConfig, ValidationAndJson) {
  auto c = full_scale_config();
  EXPECT_NO_THROW(c.validate());
  EXPECT_EQ(OptimizerConfig::from_json(c.to_json()), c);
  c.warmup_steps = c.total_steps;
  EXPECT_THROW(c.validate(), ValidationError);
  c = full_scale_config();
  c.peak_lr = 0.0;
  EXPECT_THROW(c.validate(), ValidationError);
}

TEST(Adam, FirstStepMovesByLearningRate) {
  model::ModelState s = model::init(testing::tiny_config(300, 8), 1);
  const auto before = s.params;
  std::vector<double> g(s.params.size(), 0.0);
  g[0] = 2.0;
  g[1] = -0.5;
  adam_update(s, g, full_scale_config(), 0.01);
  EXPECT_EQ(s.step, 1);
  // Bias-corrected first step: m_hat = g, v_hat = g^2.
  EXPECT_NEAR(s.params[0], before[0] - 0.01 * 2.0 / (2.0 + 1e-6), 1e-15);
  EXPECT_NEAR(s.params[1], before[1] + 0.01 * 0.5 / (0.5 + 1e-6), 1e-15);
  EXPECT_EQ(s.params[2], before[2]);
  EXPECT_THROW(adam_update(s, std::vector<double>(3), full_scale_config(), 0.01), Error);
}

TEST(EvaluateLoss, UntrainedNearLogVAndDeterministic) {
  const auto m = fresh_model();
  const double a = evaluate_loss(m, setup().l1_eval);
  EXPECT_EQ(a, evaluate_loss(m, setup().l1_eval));
  EXPECT_NEAR(a, std::log(300.0), 0.05 * std::log(300.0));
  corpus::PackedCorpus empty;
  empty.seq_len = 32;
  EXPECT_THROW(evaluate_loss(m, empty), ValidationError);
}

TEST(Train, LogsCompositionEvalsAndCheckpoints) {
  const auto dir = testing::scratch_dir("train-log");
  const auto sched = corpus::make_schedule(12, 4, 6, 0.5);
  TrainOptions opt;
  opt.checkpoint_dir = dir / "ckpt";
  opt.log_path = dir / "log.jsonl";
  opt.eval_every = 4;
  const EvalSets evals{&setup().l1_eval, &setup().l2_eval, 4};
  const auto r = train(fresh_model(), sched, setup().l1_train, setup().l2_train, desk_config(12, 4),
                       evals, opt);
  EXPECT_EQ(r.state.step, 12);
  ASSERT_EQ(r.log.steps.size(), 12u);
  for (size_t i = 0; i < r.log.steps.size(); ++i) {
    const auto& s = r.log.steps[i];
    EXPECT_EQ(s.step, static_cast<int64_t>(i));
    EXPECT_EQ(s.n_l1 + s.n_l2, 4);
    EXPECT_EQ(s.n_l2, s.step < 6 ? 0 : 2);
    EXPECT_EQ(s.lr, lr_at(desk_config(12, 4), s.step));
    EXPECT_TRUE(std::isfinite(s.loss));
  }
  std::vector<int64_t> eval_steps;
  for (const auto& e : r.log.evals) eval_steps.push_back(e.step);
  EXPECT_EQ(eval_steps, (std::vector<int64_t>{0, 4, 6, 8, 12}));
  std::vector<int64_t> ckpt_steps;
  for (const auto& c : r.log.checkpoints) {
    ckpt_steps.push_back(c.step);
    EXPECT_TRUE(std::filesystem::exists(c.path));
    EXPECT_EQ(model::load_checkpoint(c.path).step, c.step);
  }
  EXPECT_EQ(ckpt_steps, (std::vector<int64_t>{6, 12}));

  const TrainLog back = TrainLog::from_jsonl(read_file(dir / "log.jsonl"));
  EXPECT_EQ(back.steps.size(), 12u);
  EXPECT_EQ(back.evals.size(), 5u);
  EXPECT_EQ(back.checkpoints.size(), 2u);
  EXPECT_EQ(back.eval_at(6).l2_loss, r.log.eval_at(6).l2_loss);
  EXPECT_THROW(r.log.eval_at(5), ValidationError);
  EXPECT_EQ(TrainLog::from_jsonl(r.log.to_jsonl()).steps.back().loss, r.log.steps.back().loss);
}

TEST(Train, ClippingIsLogged) {
  auto cfg = desk_config(3, 2);
  cfg.grad_clip = 1e-6;
  const auto sched = corpus::make_schedule(3, 2, 0, 0.5);
  const auto r = train(fresh_model(), sched, setup().l1_train, setup().l2_train, cfg);
  for (const auto& s : r.log.steps) {
    EXPECT_TRUE(s.clipped);
    EXPECT_GT(s.grad_norm, 1e-6);
  }
  cfg.grad_clip = 0.0;
  const auto unclipped = train(fresh_model(), sched, setup().l1_train, setup().l2_train, cfg);
  for (const auto& s : unclipped.log.steps) EXPECT_FALSE(s.clipped);
}

TEST(Train, DeterministicRerun) {
  const auto sched = corpus::make_schedule(8, 4, 4, 0.5);
  const auto a = train(fresh_model(), sched, setup().l1_train, setup().l2_train, desk_config(8, 4));
  const auto b = train(fresh_model(), sched, setup().l1_train, setup().l2_train, desk_config(8, 4));
  EXPECT_EQ(model::serialize_checkpoint(a.state), model::serialize_checkpoint(b.state));
}

TEST(Train, OnsetDoesNotDisturbStateBeforeIt) {
  // Onset at step 5 vs never: identical checkpoints at step 5.
  const auto dir = testing::scratch_dir("train-onset");
  TrainOptions o1, o2;
  o1.checkpoint_dir = dir / "bi";
  o2.checkpoint_dir = dir / "mono";
  o2.checkpoint_every = 5;
  const auto bi = corpus::make_schedule(10, 4, 5, 0.5);
  const auto mono = corpus::make_schedule(10, 4, 10, 0.5);
  train(fresh_model(), bi, setup().l1_train, setup().l2_train, desk_config(10, 4), {}, o1);
  train(fresh_model(), mono, setup().l1_train, setup().l2_train, desk_config(10, 4), {}, o2);
  EXPECT_EQ(read_file(dir / "bi" / "step-5.ckpt"), read_file(dir / "mono" / "step-5.ckpt"));
  EXPECT_NE(read_file(dir / "bi" / "step-10.ckpt"), read_file(dir / "mono" / "step-10.ckpt"));
}

TEST(Train, ResumesFromCheckpointBitwise) {
  const auto dir = testing::scratch_dir("train-resume");
  TrainOptions opt;
  opt.checkpoint_dir = dir;
  opt.checkpoint_every = 3;
  const auto sched = corpus::make_schedule(6, 2, 2, 0.5);
  const auto full = train(fresh_model(), sched, setup().l1_train, setup().l2_train, desk_config(6, 2), {}, opt);
  const auto resumed = train(model::load_checkpoint(dir / "step-3.ckpt"), sched, setup().l1_train,
                             setup().l2_train, desk_config(6, 2));
  EXPECT_EQ(resumed.state.params, full.state.params);
}

TEST(Train, MemorisesASmallCorpus) {
  corpus::PackedCorpus tiny = setup().l1_train;
  tiny.tokens.resize(2 * 32);
  auto cfg = desk_config(80, 2);
  const auto sched = corpus::make_schedule(80, 2, 80, 0.5);
  const auto r = train(fresh_model(), sched, tiny, tiny, cfg);
  EXPECT_LT(evaluate_loss(r.state, tiny), 0.5);
  EXPECT_LT(r.log.steps.back().loss, r.log.steps.front().loss * 0.8);
}

TEST(Train, Errors) {
  const auto sched = corpus::make_schedule(4, 2, 2, 0.5);
  auto wrong = fresh_model();
  wrong.tokenizer_hash = "other";
  EXPECT_THROW(train(wrong, sched, setup().l1_train, setup().l2_train, desk_config(4, 2)),
               ValidationError);
  EXPECT_THROW(train(fresh_model(), sched, setup().l1_train, setup().l2_train, desk_config(5, 2)),
               ValidationError);
  EXPECT_THROW(train(fresh_model(), sched, setup().l1_train, setup().l2_train, desk_config(4, 4)),
               ValidationError);
  auto broken = fresh_model();
  broken.params[0] = std::nan("");
  try {
    train(broken, sched, setup().l1_train, setup().l2_train, desk_config(4, 2));
    FAIL() << "expected a non-finite loss error";
  } catch (const ValidationError& e) {
    FAIL() << "non-finite loss is a runtime error, not a validation error: " << e.what();
  } catch (const Error& e) {
    EXPECT_NE(std::string(e.what()).find("non-finite"), std::string::npos);
  }
}

}  // namespace
}  // namespace bilm::train
