#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <limits>

#include "lrmix/experiment.hpp"

using namespace lrmix;
namespace fs = std::filesystem;

namespace {

const ExperimentData& synthetic() {
  static const ExperimentData data = [] {
    const auto pair = generate_domain_pair(SceneSpec{}, 50);
    return prepare_data(pair.source, pair.target, 64, 0);
  }();
  return data;
}

Dataset head(const Dataset& d, std::size_t n) { return Dataset(d.begin(), d.begin() + static_cast<std::ptrdiff_t>(n)); }

TrainConfig quick_config(std::size_t iterations) {
  TrainConfig cfg;
  cfg.batch_size = 4;
  cfg.epochs = 1000;
  cfg.early_stop_patience = 1000;
  cfg.max_iterations = iterations;
  cfg.seed = 3;
  return cfg;
}

bool same_state(const NamedState<float>& a, const NamedState<float>& b) {
  if (a.parameters.size() != b.parameters.size()) return false;
  for (std::size_t i = 0; i < a.parameters.size(); ++i)
    if (a.parameters[i].second->value() != b.parameters[i].second->value()) return false;
  return true;
}

std::vector<Tensor<float>> values(const NamedState<float>& s) {
  std::vector<Tensor<float>> out;
  for (const auto& [n, p] : s.parameters) out.push_back(p->value());
  return out;
}

// A short run shared by the inference tests below.
TrainResult& short_run() {
  static TrainResult r = train_i2it(I2ITConfig{}, head(synthetic().source.train, 8), head(synthetic().source.val, 4),
                                    synthetic().target.train[0].image, quick_config(6));
  return r;
}

struct ScratchDir {
  fs::path path;
  explicit ScratchDir(const std::string& name) : path(fs::temp_directory_path() / ("lrmix_training_" + name)) {
    fs::remove_all(path);
  }
  ~ScratchDir() { fs::remove_all(path); }
};

}  // namespace

TEST(TrainConfig, RejectsZeroEpochsAndBadValues) {
  TrainConfig cfg;
  cfg.epochs = 0;
  EXPECT_THROW(cfg.validate(), ConfigError);
  cfg = TrainConfig{};
  cfg.batch_size = 0;
  EXPECT_THROW(cfg.validate(), ConfigError);
  KeyValues kv;
  kv.set("train.adv_real", std::string("both"));
  EXPECT_THROW(TrainConfig::read(kv), ConfigError);
}

TEST(TrainConfig, KeyValueRoundTrip) {
  TrainConfig cfg;
  cfg.epochs = 17;
  cfg.adam.learning_rate = 0.0025;
  cfg.weights.lambda2 = 12.5;
  cfg.adv_real_is_target = true;
  cfg.seed = 99;
  KeyValues kv;
  cfg.write(kv);
  const auto back = TrainConfig::read(KeyValues::parse(kv.to_string(), "mem"));
  EXPECT_EQ(back.epochs, 17u);
  EXPECT_EQ(back.adam.learning_rate, 0.0025);
  EXPECT_EQ(back.weights.lambda2, 12.5);
  EXPECT_TRUE(back.adv_real_is_target);
  EXPECT_EQ(back.seed, 99u);
}

TEST(TrainI2IT, SmokeRunLowersReconstructionAndKeepsWeightedTotal) {
  const auto& data = synthetic();
  TrainConfig cfg = quick_config(200);
  cfg.batch_size = 8;
  cfg.seed = 7;
  const auto r = train_i2it(I2ITConfig{}, data.source.train, data.source.val, data.target.train[0].image, cfg);
  ASSERT_EQ(r.state.loss_history.size(), 200u);
  EXPECT_EQ(r.state.global_step, 200u);
  EXPECT_LT(r.state.loss_history.back().rec, r.state.loss_history.front().rec);
  for (const auto& s : r.state.loss_history) {
    const double expected = 30 * s.rec + 1000 * s.adv_gen + 1 * s.content + 5 * s.style;
    ASSERT_LE(std::abs(s.total - expected), 1e-6 * std::abs(expected));
  }
}

TEST(TrainI2IT, IdenticalSeedsGiveIdenticalHistories) {
  const auto& data = synthetic();
  const auto cfg = quick_config(5);
  auto a = train_i2it(I2ITConfig{}, head(data.source.train, 8), head(data.source.val, 4), data.target.train[1].image, cfg);
  auto b = train_i2it(I2ITConfig{}, head(data.source.train, 8), head(data.source.val, 4), data.target.train[1].image, cfg);
  ASSERT_EQ(a.state.loss_history.size(), b.state.loss_history.size());
  for (std::size_t i = 0; i < a.state.loss_history.size(); ++i) {
    EXPECT_EQ(to_csv_row(i, a.state.loss_history[i]), to_csv_row(i, b.state.loss_history[i]));
    EXPECT_EQ(a.state.loss_history[i].total, b.state.loss_history[i].total);
  }
  EXPECT_TRUE(same_state(a.model->full_state(), b.model->full_state()));
  EXPECT_EQ(a.state.rng_state, b.state.rng_state);
}

TEST(TrainI2IT, EarlyStoppingReturnsTheBestEpoch) {
  const auto& data = synthetic();
  TrainConfig cfg = quick_config(0);
  cfg.epochs = 12;
  cfg.early_stop_patience = 1;
  const Dataset val = head(data.source.val, 4);
  const Image& target = data.target.train[2].image;
  auto r = train_i2it(I2ITConfig{}, head(data.source.train, 8), val, target, cfg);
  const auto& hist = r.state.validation_history;
  ASSERT_FALSE(hist.empty());
  ASSERT_TRUE(r.state.stopped_early) << "the pinned configuration is expected to exhaust patience";
  EXPECT_LT(hist.size(), cfg.epochs);
  EXPECT_EQ(hist.size(), r.state.best_epoch + cfg.early_stop_patience + 1);
  EXPECT_EQ(r.state.best_validation_loss, *std::min_element(hist.begin(), hist.end()));
  EXPECT_LT(r.state.best_validation_loss, hist.back());
  // The returned weights are the best epoch's, not the last epoch's.
  PerceptualNet<float> perceptual(r.model->config().perceptual);
  EXPECT_EQ(validation_loss(*r.model, perceptual, val, as_batch(target), cfg), r.state.best_validation_loss);
}

TEST(TrainI2IT, StepsOnlyTouchTheirOwnParameters) {
  const auto& data = synthetic();
  Model model;
  PerceptualNet<float> perceptual(model.config().perceptual);
  auto gen = model.generator_state();
  auto dis = model.discriminator_state();
  auto p_state = perceptual.named_state();
  const TrainConfig cfg;
  const auto f = generator_forward(model, stack_images(head(data.source.train, 4)), as_batch(data.target.train[0].image),
                                   true);

  const auto gen_before = values(gen), dis_before = values(dis), p_before = values(p_state);
  detail::discriminator_step(model, f, dis.params(), cfg);
  EXPECT_EQ(values(gen), gen_before);
  EXPECT_NE(values(dis), dis_before);

  const auto dis_mid = values(dis), gen_mid = values(gen);
  detail::generator_step(model, perceptual, f, gen.params(), dis.params(), cfg);
  EXPECT_EQ(values(dis), dis_mid);
  EXPECT_NE(values(gen), gen_mid);
  EXPECT_EQ(values(p_state), p_before);
  for (const auto& [name, p] : dis.parameters) EXPECT_FALSE(p->frozen()) << name;
}

TEST(TrainI2IT, PerceptualParametersAreNeverOptimised) {
  Model model;
  for (const auto& [name, p] : model.full_state().parameters) EXPECT_EQ(name.find("perceptual"), std::string::npos);
  PerceptualNet<float> perceptual(model.config().perceptual);
  for (const auto& [name, p] : perceptual.named_state().parameters) EXPECT_TRUE(p->frozen()) << name;
}

TEST(TrainI2IT, ZeroAdversarialWeightDescendsOnAFixedBatch) {
  const auto& data = synthetic();
  Model model;
  PerceptualNet<float> perceptual(model.config().perceptual);
  auto gen = model.generator_state();
  auto dis = model.discriminator_state();
  TrainConfig cfg;
  cfg.weights.lambda2 = 0;
  const auto batch = stack_images(head(data.source.train, 8));
  const auto target = as_batch(data.target.train[0].image);
  std::vector<double> totals;
  for (int step = 0; step <= 50; ++step) {
    const auto f = generator_forward(model, batch, target, true);
    totals.push_back(detail::generator_step(model, perceptual, f, gen.params(), dis.params(), cfg).total);
  }
  int non_increasing = 0;
  for (std::size_t k = 1; k < totals.size(); ++k) non_increasing += totals[k] <= totals[k - 1];
  EXPECT_GE(non_increasing, 45);
}

TEST(TrainI2IT, NonFiniteInputAbortsWithDiagnostic) {
  const auto& data = synthetic();
  Dataset bad = head(data.source.train, 4);
  bad[3].image.pixels[17] = std::numeric_limits<float>::quiet_NaN();
  ScratchDir dir("nonfinite");
  TrainConfig cfg = quick_config(2);
  cfg.checkpoint_dir = dir.path.string();
  try {
    train_i2it(I2ITConfig{}, bad, {}, data.target.train[0].image, cfg);
    FAIL() << "NaN input was accepted";
  } catch (const NumericError& e) {
    const std::string msg = e.what();
    EXPECT_NE(msg.find("indices ["), std::string::npos) << msg;
    EXPECT_NE(msg.find('3'), std::string::npos) << msg;
  }
  EXPECT_TRUE(fs::exists(dir.path / "diagnostic.txt"));
}

TEST(TrainI2IT, BadInputsAreRejected) {
  const auto& data = synthetic();
  EXPECT_THROW(train_i2it(I2ITConfig{}, {}, {}, data.target.train[0].image, quick_config(1)), UsageError);
  Image small{Tensor<float>(Shape{3, 32, 32}), "small"};
  EXPECT_THROW(train_i2it(I2ITConfig{}, head(data.source.train, 2), {}, small, quick_config(1)), ConfigError);
}

TEST(TrainI2IT, WritesLossCsvAndCheckpoint) {
  const auto& data = synthetic();
  ScratchDir dir("artifacts");
  TrainConfig cfg = quick_config(3);
  cfg.checkpoint_dir = dir.path.string();
  auto r = train_i2it(I2ITConfig{}, head(data.source.train, 8), head(data.source.val, 2), data.target.train[0].image, cfg);
  std::ifstream csv(dir.path / "loss.csv");
  std::string line;
  std::vector<std::string> lines;
  while (std::getline(csv, line)) lines.push_back(line);
  ASSERT_EQ(lines.size(), 4u);
  EXPECT_EQ(lines[0], LossReport::kCsvHeader);
  EXPECT_EQ(lines[1], to_csv_row(0, r.state.loss_history[0]));
  auto loaded = load_checkpoint((dir.path / "checkpoint.lrmx").string());
  EXPECT_TRUE(same_state(loaded->full_state(), r.model->full_state()));
}

TEST(Translate, TargetSampleReproducesItsReconstruction) {
  auto& model = *short_run().model;
  const Image& target = synthetic().target.train[0].image;
  const auto out = translate(model, {target}, target);
  NoGradGuard guard;
  const auto f = generator_forward(model, as_batch(target), as_batch(target), false);
  const auto got = out[0].pixels.data();
  const auto want = f.target_rec.value().data();
  EXPECT_TRUE(std::equal(got.begin(), got.end(), want.begin(), want.end()));
}

TEST(Translate, SourceEqualsTargetMakesTranslationEqualReconstruction) {
  auto& model = *short_run().model;
  const Image& target = synthetic().target.train[0].image;
  NoGradGuard guard;
  Tensor<float> copies(Shape{3, 3, 64, 64});
  for (std::size_t k = 0; k < 3; ++k)
    std::copy(target.pixels.data().begin(), target.pixels.data().end(),
              copies.data().begin() + static_cast<std::ptrdiff_t>(k * target.pixels.size()));
  const auto f = generator_forward(model, copies, as_batch(target), false);
  EXPECT_EQ(f.translated.value(), f.source_rec.value());
}

TEST(Translate, CountShapeRepeatabilityAndBatchIndependence) {
  auto& model = *short_run().model;
  const auto& src = synthetic().source.test;
  const Image& target = synthetic().target.train[0].image;
  std::vector<Image> images;
  for (std::size_t k = 0; k < 5; ++k) images.push_back(src[k].image);
  const auto a = translate(model, images, target, 2);
  const auto b = translate(model, images, target, 8);
  const auto alone = translate(model, {images[3]}, target);
  ASSERT_EQ(a.size(), 5u);
  for (std::size_t k = 0; k < 5; ++k) {
    EXPECT_EQ(a[k].pixels.shape(), images[k].pixels.shape());
    EXPECT_EQ(a[k].pixels, b[k].pixels);
    EXPECT_EQ(a[k].id, images[k].id);
  }
  EXPECT_EQ(alone[0].pixels, a[3].pixels);
}

TEST(Translate, ShapeMismatchIsConfigError) {
  auto& model = *short_run().model;
  Image small{Tensor<float>(Shape{3, 32, 32}), "small"};
  EXPECT_THROW(translate(model, {small}, synthetic().target.train[0].image), ConfigError);
}

TEST(Checkpoint, RoundTripTranslatesBitIdentically) {
  ScratchDir dir("roundtrip");
  fs::create_directories(dir.path);
  auto& model = *short_run().model;
  const auto path = (dir.path / "m.lrmx").string();
  save_checkpoint(path, model);
  auto loaded = load_checkpoint(path);
  const Image& target = synthetic().target.train[0].image;
  std::vector<Image> images{synthetic().source.test[0].image, synthetic().source.test[1].image};
  const auto a = translate(model, images, target), b = translate(*loaded, images, target);
  for (std::size_t k = 0; k < images.size(); ++k) EXPECT_EQ(a[k].pixels, b[k].pixels);
}
