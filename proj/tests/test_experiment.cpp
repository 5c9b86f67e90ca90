#include <gtest/gtest.h>

#include "lrmix/experiment.hpp"

using namespace lrmix;

namespace {

ExperimentConfig tiny() {
  ExperimentConfig cfg;
  cfg.source_scenes = 8;
  cfg.target_scenes = 8;
  cfg.train.epochs = 1;
  cfg.train.batch_size = 4;
  cfg.segmenter.epochs = 2;
  cfg.seed = 11;
  return cfg;
}

const ExperimentData& tiny_data() {
  static const ExperimentData data = make_experiment_data(tiny());
  return data;
}

}  // namespace

TEST(ExperimentConfig, KeyValueRoundTripIsExact) {
  ExperimentConfig cfg = tiny();
  cfg.trials = 4;
  cfg.segmenter.adam.learning_rate = 0.004;
  cfg.train.weights.lambda2 = 10;
  const auto text = cfg.to_key_values().to_string();
  EXPECT_EQ(ExperimentConfig::from_key_values(KeyValues::parse(text)).to_key_values().to_string(), text);
}

TEST(ExperimentConfig, UnknownKeysAreRejectedUnlessIgnored) {
  KeyValues kv;
  kv.set("train.epoch", std::size_t{3});
  EXPECT_THROW(ExperimentConfig::from_key_values(kv), ConfigError);
  kv = KeyValues{};
  kv.set("artifact:x.png", std::string("abc"));
  EXPECT_THROW(ExperimentConfig::from_key_values(kv), ConfigError);
  EXPECT_NO_THROW(ExperimentConfig::from_key_values(kv, {"artifact:"}));
}

TEST(ExperimentConfig, SeedPropagates) {
  KeyValues kv;
  kv.set("seed", std::int64_t{42});
  const auto cfg = ExperimentConfig::from_key_values(kv);
  EXPECT_EQ(cfg.scenes.seed, 42u);
  EXPECT_EQ(cfg.train.seed, 42u);
  EXPECT_EQ(cfg.segmenter.seed, 42u);
  EXPECT_EQ(cfg.model.init_seed, 42u);
}

TEST(ExperimentData, SplitsPatchesOfBothDomains) {
  const auto& d = tiny_data();
  EXPECT_EQ(d.source.train.size() + d.source.val.size() + d.source.test.size(), 8u);
  EXPECT_EQ(d.target.train.size() + d.target.val.size() + d.target.test.size(), 8u);
  EXPECT_EQ(d.source.train.front().image.pixels.shape(), (Shape{3, 64, 64}));
}

TEST(RepeatTrials, MeansAreArithmeticMeansOfTrials) {
  ExperimentConfig cfg = tiny();
  cfg.trials = 3;
  const auto r = repeat_trials(tiny_data(), cfg);
  ASSERT_EQ(r.trials.size(), 3u);
  double lower = 0, adapted = 0, upper = 0;
  for (const auto& t : r.trials) {
    lower += t.lower.miou;
    adapted += t.adapted.miou;
    upper += t.upper.miou;
  }
  EXPECT_NEAR(r.lower_mean.miou, lower / 3, 1e-12);
  EXPECT_NEAR(r.adapted_mean.miou, adapted / 3, 1e-12);
  EXPECT_NEAR(r.upper_mean.miou, upper / 3, 1e-12);
  EXPECT_NE(r.trials[0].target_id, r.trials[1].target_id);
  EXPECT_NE(r.trials[1].target_id, r.trials[2].target_id);
}

TEST(RepeatTrials, SingleTrialMatchesDirectRunWithSubSeed) {
  ExperimentConfig cfg = tiny();
  const auto r = repeat_trials(tiny_data(), cfg);
  ExperimentConfig sub = cfg;
  sub.train.seed = sub.segmenter.seed = sub.model.init_seed = cfg.seed;
  const Image* sample = nullptr;
  for (const auto& s : tiny_data().target.train)
    if (s.image.id == r.trials[0].target_id) sample = &s.image;
  ASSERT_NE(sample, nullptr);
  const auto direct = run_adaptation_experiment(tiny_data(), *sample, sub);
  EXPECT_EQ(metrics_csv(direct.lower), metrics_csv(r.trials[0].lower));
  EXPECT_EQ(metrics_csv(direct.adapted), metrics_csv(r.trials[0].adapted));
  EXPECT_EQ(metrics_csv(direct.upper), metrics_csv(r.trials[0].upper));
}

TEST(RepeatTrials, ParallelWorkersGiveTheSameResults) {
  ExperimentConfig cfg = tiny();
  cfg.trials = 2;
  const auto serial = repeat_trials(tiny_data(), cfg);
  cfg.parallel = 2;
  const auto parallel = repeat_trials(tiny_data(), cfg);
  for (std::size_t i = 0; i < 2; ++i) {
    EXPECT_EQ(serial.trials[i].target_id, parallel.trials[i].target_id);
    EXPECT_EQ(metrics_csv(serial.trials[i].adapted), metrics_csv(parallel.trials[i].adapted));
  }
}

TEST(RepeatTrials, TooFewTargetSamplesIsUsageError) {
  ExperimentConfig cfg = tiny();
  cfg.trials = tiny_data().target.train.size() + 1;
  EXPECT_THROW(repeat_trials(tiny_data(), cfg), UsageError);
}

TEST(RunExperiment, FailuresNameTheStage) {
  ExperimentConfig cfg = tiny();
  Image wrong{Tensor<float>(Shape{3, 32, 32}), "wrong"};
  try {
    run_adaptation_experiment(tiny_data(), wrong, cfg);
    FAIL();
  } catch (const std::runtime_error& e) {
    EXPECT_NE(std::string(e.what()).find("train-i2it"), std::string::npos);
  }
}
