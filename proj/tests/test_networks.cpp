#include <gtest/gtest.h>

#include <Eigen/Dense>
#include <random>

#include "gradcheck.hpp"
#include "lrmix/adam.hpp"
#include "lrmix/networks.hpp"

using namespace lrmix;
using lrmix::testing::random_tensor;

namespace {

double top_singular_value(const Tensor<float>& w) {
  const Eigen::Index rows = static_cast<Eigen::Index>(w.dim(0));
  const Eigen::Index cols = static_cast<Eigen::Index>(w.size()) / rows;
  Eigen::MatrixXd m(rows, cols);
  for (Eigen::Index r = 0; r < rows; ++r)
    for (Eigen::Index c = 0; c < cols; ++c) m(r, c) = w[static_cast<std::size_t>(r * cols + c)];
  return Eigen::JacobiSVD<Eigen::MatrixXd>(m).singularValues()(0);
}

Var<float> random_image(std::size_t n, std::size_t size, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  return Var<float>(random_tensor({n, 3, size, size}, rng).cast<float>());
}

}  // namespace

TEST(Encoder, LatentShapeAndFiniteness) {
  I2ITModel<float> model;
  NoGradGuard guard;
  auto latent = model.encode_source(random_image(1, 64, 1), true);
  EXPECT_EQ(latent.shape(), (Shape{1, 40, 16, 16}));
  EXPECT_EQ(latent.dim(1) % 2, 0u);
  EXPECT_TRUE(latent.value().all_finite());
}

TEST(Encoder, IdenticalImagesGiveIdenticalLatents) {
  I2ITModel<float> model;
  NoGradGuard guard;
  auto a = model.encode_source(random_image(1, 32, 4), false);
  auto b = model.encode_source(random_image(1, 32, 4), false);
  EXPECT_EQ(a.value(), b.value());
}

TEST(Encoder, IndivisibleSizeIsConfigError) {
  I2ITModel<float> model;
  NoGradGuard guard;
  EXPECT_THROW(model.encode_source(random_image(1, 30, 1), false), ConfigError);
}

TEST(Encoder, BatchOrderEquivariance) {
  I2ITModel<float> model;
  NoGradGuard guard;
  std::mt19937_64 rng(2);
  auto x = random_tensor({3, 3, 16, 16}, rng).cast<float>();
  Tensor<float> swapped(x.shape());
  const std::size_t plane = 3 * 16 * 16;
  const std::size_t perm[3] = {2, 0, 1};
  for (std::size_t i = 0; i < 3; ++i)
    std::copy_n(x.data().begin() + perm[i] * plane, plane, swapped.data().begin() + i * plane);
  for (bool training : {true, false}) {
    auto a = model.encode_source(Var<float>(x), training).value();
    auto b = model.encode_source(Var<float>(swapped), training).value();
    const std::size_t lat = a.size() / 3;
    for (std::size_t i = 0; i < 3; ++i)
      for (std::size_t k = 0; k < lat; ++k) EXPECT_NEAR(b[i * lat + k], a[perm[i] * lat + k], 1e-5f);
  }
}

TEST(Separate, SlicesChannelsInOrder) {
  Tensor<float> t({1, 4, 1, 1}, {0, 1, 2, 3});
  auto pair = separate(Var<float>(t));
  EXPECT_EQ(pair.first_half.value().storage(), (std::vector<float>{0, 1}));
  EXPECT_EQ(pair.second_half.value().storage(), (std::vector<float>{2, 3}));
}

TEST(Separate, CombineIsExactInverse) {
  std::mt19937_64 rng(8);
  auto x = random_tensor({2, 6, 3, 5}, rng).cast<float>();
  EXPECT_EQ(combine(separate(Var<float>(x))).value(), x);
}

TEST(Separate, SplitsEverySampleOfABatch) {
  std::mt19937_64 rng(9);
  auto x = random_tensor({2, 4, 2, 2}, rng).cast<float>();
  auto pair = separate(Var<float>(x));
  for (std::size_t n = 0; n < 2; ++n)
    for (std::size_t c = 0; c < 2; ++c)
      for (std::size_t p = 0; p < 4; ++p) {
        EXPECT_EQ(pair.first_half.value().at(n, c, p / 2, p % 2), x.at(n, c, p / 2, p % 2));
        EXPECT_EQ(pair.second_half.value().at(n, c, p / 2, p % 2), x.at(n, c + 2, p / 2, p % 2));
      }
}

TEST(Separate, OddChannelCountIsConfigError) {
  EXPECT_THROW(separate(Var<float>(Tensor<float>({1, 3, 2, 2}))), ConfigError);
}

TEST(Decoder, SharedDecoderAndShapeContract) {
  I2ITModel<float> model;
  NoGradGuard guard;
  const auto ls = separate(model.encode_source(random_image(2, 64, 5), false));
  auto first = model.decode(ls.first_half, ls.second_half, false);
  auto second = model.decode(ls.first_half, ls.second_half, false);
  EXPECT_EQ(first.shape(), (Shape{2, 3, 64, 64}));
  EXPECT_EQ(first.value(), second.value());
}

TEST(Decoder, OutputRangeForArbitraryLatents) {
  I2ITModel<float> model;
  NoGradGuard guard;
  std::mt19937_64 rng(6);
  auto first = Var<float>(random_tensor({1, 20, 4, 4}, rng, -50, 50).cast<float>());
  auto second = Var<float>(random_tensor({1, 20, 4, 4}, rng, -50, 50).cast<float>());
  for (float v : model.decode(first, second, true).value().data()) {
    EXPECT_GE(v, -1.f);
    EXPECT_LE(v, 1.f);
  }
}

TEST(Decoder, MixingClosureAndSwapIdentity) {
  I2ITModel<float> model;
  NoGradGuard guard;
  const auto la = separate(model.encode_source(random_image(1, 32, 10), false));
  const auto lb = separate(model.encode_target(random_image(1, 32, 11), false));
  auto mixed = model.decode(la.first_half, lb.second_half, false);
  EXPECT_EQ(mixed.shape(), (Shape{1, 3, 32, 32}));
  for (float v : mixed.value().data()) EXPECT_LE(std::abs(v), 1.f);
  // b = a turns the mixed decode into a plain reconstruction.
  const auto la2 = separate(model.encode_target(random_image(1, 32, 10), false));
  EXPECT_EQ(model.decode(la.first_half, la2.second_half, false).value(),
            model.decode(la.first_half, la.second_half, false).value());
}

TEST(Decoder, HalfShapeMismatchIsConfigError) {
  I2ITModel<float> model;
  EXPECT_THROW(model.decode(Var<float>(Tensor<float>({1, 20, 4, 4})), Var<float>(Tensor<float>({1, 20, 4, 2})), false),
               ConfigError);
  EXPECT_THROW(model.decode(Var<float>(Tensor<float>({1, 8, 4, 4})), Var<float>(Tensor<float>({1, 8, 4, 4})), false),
               ConfigError);
}

TEST(Discriminator, PatchShapeAndDeterminism) {
  I2ITModel<float> model;
  NoGradGuard guard;
  auto a = model.discriminate(random_image(1, 64, 3), false);
  auto b = model.discriminate(random_image(1, 64, 3), false);
  EXPECT_EQ(a.shape(), (Shape{1, 1, 8, 8}));
  EXPECT_EQ(a.value(), b.value());
}

TEST(SpectralNorm, EveryDecoderAndDiscriminatorWeightHasUnitSigma) {
  I2ITModel<float> model;
  // Converge the persistent u vectors through training-mode forwards.
  {
    NoGradGuard guard;
    for (int i = 0; i < 400; ++i) {
      const auto l = separate(model.encode_source(random_image(1, 16, 1), false));
      model.decode(l.first_half, l.second_half, true);
      model.discriminate(random_image(1, 16, 2), true);
    }
  }
  auto weights = model.decoder().effective_weights();
  for (auto& w : model.discriminator().effective_weights()) weights.push_back(w);
  ASSERT_EQ(weights.size(), 2u + 2u + 1u + 3u);
  for (const auto& w : weights) EXPECT_NEAR(top_singular_value(w), 1.0, 1e-3);
}

TEST(SpectralNorm, DiagonalWeight) {
  Tensor<double> w({2, 2}, {3, 0, 0, 1});
  Tensor<double> u({2}, {0.6, 0.8});
  Var<double> out;
  for (int i = 0; i < 30; ++i) out = spectral_normalize(Var<double>(w), u, 1);
  EXPECT_NEAR(out.value()[0], 1.0, 1e-6);
  EXPECT_NEAR(out.value()[3], 1.0 / 3.0, 1e-6);
  EXPECT_NEAR(out.value()[1], 0.0, 1e-12);
}

TEST(SpectralNorm, OrthonormalWeightUnchanged) {
  const double c = std::cos(0.3), s = std::sin(0.3);
  Tensor<double> w({2, 2}, {c, -s, s, c});
  Tensor<double> u({2}, {1, 0});
  auto out = spectral_normalize(Var<double>(w), u, 1);
  EXPECT_LT(max_abs_diff(out.value(), w), 1e-3);
}

TEST(SpectralNorm, IdempotentOnceConverged) {
  std::mt19937_64 rng(4);
  auto w = random_tensor({4, 3, 3, 3}, rng);
  Tensor<double> u({4}, 0.5);
  Var<double> once;
  for (int i = 0; i < 100; ++i) once = spectral_normalize(Var<double>(w), u, 1);
  Tensor<double> u2 = u;
  for (int i = 0; i < 100; ++i) spectral_normalize(once, u2, 1);
  auto twice = spectral_normalize(once, u2, 1);
  EXPECT_LT(max_abs_diff(twice.value(), once.value()), 1e-3);
  EXPECT_NEAR(top_singular_value(once.value().cast<float>()), 1.0, 1e-3);
}

TEST(SpectralNorm, ZeroWeightReturnedUnchanged) {
  Tensor<double> w({2, 3});
  Tensor<double> u({2}, {1, 0});
  EXPECT_EQ(spectral_normalize(Var<double>(w), u, 1).value(), w);
}

TEST(BatchInstanceNorm, RhoOneIsBatchNorm) {
  std::mt19937_64 rng(5);
  BatchInstanceNorm<double> bin(2);
  bin.rho.value().fill(1.0);
  auto x = random_tensor({3, 2, 4, 4}, rng, -2, 5);
  auto y = bin.forward(Var<double>(x), true).value();
  for (std::size_t c = 0; c < 2; ++c) {
    double m = 0, v = 0;
    for (std::size_t n = 0; n < 3; ++n)
      for (std::size_t p = 0; p < 16; ++p) m += y.at(n, c, p / 4, p % 4);
    m /= 48;
    for (std::size_t n = 0; n < 3; ++n)
      for (std::size_t p = 0; p < 16; ++p) v += std::pow(y.at(n, c, p / 4, p % 4) - m, 2);
    v /= 48;
    EXPECT_NEAR(m, 0.0, 1e-5);
    EXPECT_NEAR(v, 1.0, 1e-4);  // eps = 1e-5 shrinks the variance slightly
  }
}

TEST(BatchInstanceNorm, RhoZeroIsInstanceNorm) {
  std::mt19937_64 rng(6);
  BatchInstanceNorm<double> bin(2);
  bin.rho.value().fill(0.0);
  auto x = random_tensor({2, 2, 4, 4}, rng, -3, 1);
  auto y = bin.forward(Var<double>(x), true).value();
  for (std::size_t n = 0; n < 2; ++n)
    for (std::size_t c = 0; c < 2; ++c) {
      double m = 0;
      for (std::size_t p = 0; p < 16; ++p) m += y.at(n, c, p / 4, p % 4);
      EXPECT_NEAR(m / 16, 0.0, 1e-5);
    }
}

TEST(BatchInstanceNorm, ConstantChannelGivesBeta) {
  BatchInstanceNorm<double> bin(1);
  bin.beta.value()[0] = 0.7;
  auto y = bin.forward(Var<double>(Tensor<double>({2, 1, 3, 3}, 4.2)), true).value();
  for (double v : y.data()) EXPECT_NEAR(v, 0.7, 1e-12);
}

TEST(BatchInstanceNorm, RhoIsClampedAfterOptimizerStep) {
  BatchInstanceNorm<float> bin(3);
  bin.rho.grad().fill(-100.f);
  AdamConfig cfg;
  cfg.learning_rate = 1.0;
  adam_step<float>({&bin.rho}, cfg);
  for (float v : bin.rho.value().data()) EXPECT_EQ(v, 1.f);
}

TEST(Perceptual, TapsAreReturnedInRequestOrder) {
  PerceptualNet<float> net(PerceptualConfig{});
  NoGradGuard guard;
  auto one = net.features(random_image(1, 32, 1), {"relu1_2"});
  ASSERT_EQ(one.size(), 1u);
  EXPECT_EQ(one[0].first, "relu1_2");
  auto many = net.features(random_image(1, 32, 1), {"relu3_3", "relu1_2"});
  ASSERT_EQ(many.size(), 2u);
  EXPECT_EQ(many[0].first, "relu3_3");
  EXPECT_EQ(many[1].second.value(), one[0].second.value());
}

TEST(Perceptual, UnknownTapIsConfigError) {
  PerceptualNet<float> net(PerceptualConfig{});
  EXPECT_THROW(net.features(random_image(1, 16, 1), {"relu9_9"}), ConfigError);
}

TEST(Perceptual, WeightsAreFrozenButPassGradients) {
  PerceptualNet<float> net(PerceptualConfig{});
  auto state = net.named_state();
  for (auto* p : state.params()) EXPECT_TRUE(p->frozen());
  Var<float> img(random_image(1, 16, 3).value(), true);
  auto feats = net.features(img, {"relu2_2"});
  backward(sum(feats[0].second));
  EXPECT_FALSE(img.grad().empty());
  for (auto* p : state.params()) EXPECT_TRUE(p->grad().empty() || p->grad() == Tensor<float>(p->value().shape()));
}

TEST(ParameterBudget, DefaultModelIsAbout115k) {
  I2ITModel<float> model;
  const auto s = summarize_model(model);
  EXPECT_EQ(s.total(), 115572u);
  EXPECT_GE(s.total(), 100000u);
  EXPECT_LE(s.total(), 130000u);
  EXPECT_EQ(s.generator(), model.generator_state().parameter_count());
}

TEST(ParameterBudget, SeparateEncodersDoubleTheEncoder) {
  I2ITConfig cfg;
  cfg.shared_encoder = false;
  I2ITModel<float> split(cfg);
  I2ITModel<float> shared;
  EXPECT_EQ(summarize_model(split).encoder, 2 * summarize_model(shared).encoder);
}

TEST(Config, KeyValueRoundTrip) {
  I2ITConfig cfg;
  cfg.encoder.latent_channels = cfg.decoder.latent_channels = 24;
  cfg.discriminator.channels = {16, 24, 32};
  cfg.taps.style_taps = {"relu1_1", "relu2_2"};
  cfg.shared_encoder = false;
  const auto back = I2ITConfig::from_key_values(KeyValues::parse(cfg.to_key_values().to_string()));
  EXPECT_EQ(back.to_key_values().to_string(), cfg.to_key_values().to_string());
  EXPECT_EQ(back.encoder.latent_channels, 24u);
  EXPECT_EQ(back.discriminator.channels, (std::vector<std::size_t>{16, 24, 32}));
  EXPECT_FALSE(back.shared_encoder);
}

TEST(Config, OddLatentIsRejected) {
  KeyValues kv;
  kv.set("model.latent_channels", 41);
  EXPECT_THROW(I2ITConfig::from_key_values(kv), ConfigError);
}

TEST(Checkpoint, StateRoundTripThroughArchive) {
  I2ITModel<float> a;
  I2ITConfig other_seed;
  other_seed.init_seed = 99;
  I2ITModel<float> b(other_seed);
  TensorArchive ar;
  export_state(a.full_state(), ar);
  auto sb = b.full_state();
  import_state(sb, deserialize_archive(serialize_archive(ar)));
  NoGradGuard guard;
  auto img = random_image(1, 32, 12);
  EXPECT_EQ(a.discriminate(img, false).value(), b.discriminate(img, false).value());
  const auto la = separate(a.encode_source(img, false));
  const auto lb = separate(b.encode_source(img, false));
  EXPECT_EQ(a.decode(la.first_half, la.second_half, false).value(),
            b.decode(lb.first_half, lb.second_half, false).value());
}

TEST(Checkpoint, MissingTensorIsIngestionError) {
  I2ITModel<float> a;
  TensorArchive ar;
  export_state(a.discriminator_state(), ar);
  auto state = a.full_state();
  EXPECT_THROW(import_state(state, ar, "partial.lrmx"), IngestionError);
}
