#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>

#include "lrmix/evaluation.hpp"

using namespace lrmix;

namespace {

LabelRaster raster(std::size_t h, std::size_t w, std::vector<std::uint8_t> v) {
  LabelRaster r(h, w);
  r.classes = std::move(v);
  return r;
}

LabelRaster random_raster(std::mt19937_64& rng, std::size_t h, std::size_t w, std::size_t classes = kNumClasses) {
  LabelRaster r(h, w);
  for (auto& c : r.classes) c = static_cast<std::uint8_t>(rng() % classes);
  return r;
}

// Per-class counts straight from the pixels, without a confusion matrix.
struct Brute {
  std::array<double, kNumClasses> iou, f1;
  double miou, macro_f1, opa;
  std::array<std::array<std::uint64_t, kNumClasses>, kNumClasses> counts{};
};

Brute brute_force(const LabelRaster& gt, const LabelRaster& pred) {
  Brute b;
  double iou_sum = 0, f1_sum = 0, correct = 0;
  int present = 0;
  for (std::size_t c = 0; c < kNumClasses; ++c) {
    double tp = 0, fp = 0, fn = 0;
    for (std::size_t p = 0; p < gt.classes.size(); ++p) {
      const bool g = gt.classes[p] == c, q = pred.classes[p] == c;
      tp += g && q;
      fp += !g && q;
      fn += g && !q;
    }
    if (tp + fp + fn == 0) {
      b.iou[c] = b.f1[c] = std::nan("");
      continue;
    }
    b.iou[c] = tp / (tp + fp + fn);
    b.f1[c] = 2 * tp / (2 * tp + fp + fn);
    iou_sum += b.iou[c];
    f1_sum += b.f1[c];
    ++present;
  }
  for (std::size_t p = 0; p < gt.classes.size(); ++p) {
    correct += gt.classes[p] == pred.classes[p];
    ++b.counts[gt.classes[p]][pred.classes[p]];
  }
  b.miou = iou_sum / present;
  b.macro_f1 = f1_sum / present;
  b.opa = correct / static_cast<double>(gt.classes.size());
  return b;
}

Dataset synthetic_patches(SceneSpec spec, std::size_t scenes, bool target) {
  auto pair = generate_domain_pair(spec, scenes);
  return target ? pair.target : pair.source;
}

}  // namespace

TEST(Accumulate, DiagonalOnlyForAgreement) {
  ConfusionMatrix cm;
  accumulate(cm, raster(2, 5, std::vector<std::uint8_t>(10, 2)), raster(2, 5, std::vector<std::uint8_t>(10, 2)));
  EXPECT_EQ(cm.counts[2][2], 10u);
  EXPECT_EQ(cm.total(), 10u);
}

TEST(Accumulate, EmptyRasterLeavesMatrixUnchanged) {
  ConfusionMatrix cm;
  cm.counts[1][3] = 4;
  const auto before = cm;
  accumulate(cm, LabelRaster(0, 0), LabelRaster(0, 0));
  EXPECT_EQ(cm, before);
}

TEST(Accumulate, MatchesPixelLoop) {
  std::mt19937_64 rng(5);
  const auto gt = random_raster(rng, 16, 16), pred = random_raster(rng, 16, 16);
  ConfusionMatrix cm;
  accumulate(cm, gt, pred);
  EXPECT_EQ(cm.counts, brute_force(gt, pred).counts);
}

TEST(Accumulate, OrderOfBatchesDoesNotMatter) {
  std::mt19937_64 rng(6);
  std::vector<std::pair<LabelRaster, LabelRaster>> batches;
  for (int i = 0; i < 5; ++i) batches.emplace_back(random_raster(rng, 8, 8), random_raster(rng, 8, 8));
  ConfusionMatrix forward, reverse, merged;
  for (const auto& [g, p] : batches) accumulate(forward, g, p);
  for (auto it = batches.rbegin(); it != batches.rend(); ++it) accumulate(reverse, it->first, it->second);
  ConfusionMatrix left, right;
  for (int i = 0; i < 2; ++i) accumulate(left, batches[i].first, batches[i].second);
  for (int i = 2; i < 5; ++i) accumulate(right, batches[i].first, batches[i].second);
  merged.merge(right).merge(left);
  EXPECT_EQ(forward, reverse);
  EXPECT_EQ(forward, merged);
}

TEST(Accumulate, BadInputIsUsageError) {
  ConfusionMatrix cm;
  EXPECT_THROW(accumulate(cm, LabelRaster(2, 2), LabelRaster(2, 3)), UsageError);
  EXPECT_THROW(accumulate(cm, raster(1, 1, {7}), raster(1, 1, {0})), UsageError);
}

TEST(Metrics, FourPixelExample) {
  ConfusionMatrix cm;
  accumulate(cm, raster(1, 4, {0, 0, 1, 1}), raster(1, 4, {0, 1, 1, 1}));
  const auto r = compute_metrics(cm);
  EXPECT_EQ(r.iou[0], 0.5);
  EXPECT_EQ(r.iou[1], 2.0 / 3.0);
  EXPECT_DOUBLE_EQ(r.miou, 7.0 / 12.0);
  EXPECT_EQ(r.opa, 0.75);
  EXPECT_EQ(r.f1[0], 2.0 / 3.0);
  EXPECT_EQ(r.f1[1], 0.8);
  EXPECT_DOUBLE_EQ(r.macro_f1, 11.0 / 15.0);
  for (std::size_t c = 2; c < kNumClasses; ++c) EXPECT_FALSE(r.defined(c));
}

TEST(Metrics, PerfectPrediction) {
  std::mt19937_64 rng(7);
  const auto gt = random_raster(rng, 8, 8);
  ConfusionMatrix cm;
  accumulate(cm, gt, gt);
  const auto r = compute_metrics(cm);
  EXPECT_EQ(r.miou, 1.0);
  EXPECT_EQ(r.macro_f1, 1.0);
  EXPECT_EQ(r.opa, 1.0);
}

TEST(Metrics, AllWrongBinaryFlip) {
  ConfusionMatrix cm;
  accumulate(cm, raster(1, 4, {0, 1, 0, 1}), raster(1, 4, {1, 0, 1, 0}));
  const auto r = compute_metrics(cm);
  EXPECT_EQ(r.iou[0], 0.0);
  EXPECT_EQ(r.iou[1], 0.0);
  EXPECT_EQ(r.opa, 0.0);
}

TEST(Metrics, MatchesBruteForceOnHundredRasters) {
  std::mt19937_64 rng(8);
  for (int trial = 0; trial < 100; ++trial) {
    // Fewer classes on some trials so the 0/0 exclusion path is exercised.
    const std::size_t classes = 2 + static_cast<std::size_t>(trial % 5);
    const auto gt = random_raster(rng, 16, 16, classes), pred = random_raster(rng, 16, 16, classes);
    ConfusionMatrix cm;
    accumulate(cm, gt, pred);
    const auto b = brute_force(gt, pred);
    ASSERT_EQ(cm.counts, b.counts);
    const auto r = compute_metrics(cm);
    for (std::size_t c = 0; c < kNumClasses; ++c) {
      ASSERT_EQ(r.defined(c), !std::isnan(b.iou[c]));
      if (!r.defined(c)) continue;
      EXPECT_NEAR(r.iou[c], b.iou[c], 1e-9);
      EXPECT_NEAR(r.f1[c], b.f1[c], 1e-9);
    }
    EXPECT_NEAR(r.miou, b.miou, 1e-9);
    EXPECT_NEAR(r.macro_f1, b.macro_f1, 1e-9);
    EXPECT_NEAR(r.opa, b.opa, 1e-9);
  }
}

TEST(Metrics, ClassPermutationPermutesPerClassValues) {
  std::mt19937_64 rng(9);
  const auto gt = random_raster(rng, 16, 16), pred = random_raster(rng, 16, 16);
  const std::array<std::uint8_t, kNumClasses> perm{3, 5, 0, 1, 4, 2};
  auto relabel = [&](LabelRaster r) {
    for (auto& c : r.classes) c = perm[c];
    return r;
  };
  ConfusionMatrix a, b;
  accumulate(a, gt, pred);
  accumulate(b, relabel(gt), relabel(pred));
  const auto ra = compute_metrics(a), rb = compute_metrics(b);
  for (std::size_t c = 0; c < kNumClasses; ++c) {
    EXPECT_DOUBLE_EQ(rb.iou[perm[c]], ra.iou[c]);
    EXPECT_DOUBLE_EQ(rb.f1[perm[c]], ra.f1[c]);
  }
  EXPECT_NEAR(ra.miou, rb.miou, 1e-15);
  EXPECT_NEAR(ra.macro_f1, rb.macro_f1, 1e-15);
  EXPECT_EQ(ra.opa, rb.opa);
}

TEST(Metrics, EmptyMatrixIsUsageError) { EXPECT_THROW(compute_metrics(ConfusionMatrix{}), UsageError); }

TEST(MetricsCsv, RoundTripIsExact) {
  std::mt19937_64 rng(10);
  ConfusionMatrix cm;
  accumulate(cm, random_raster(rng, 8, 8, 4), random_raster(rng, 8, 8, 4));
  const auto r = compute_metrics(cm);
  const auto text = metrics_csv(r);
  EXPECT_EQ(text.substr(0, text.find('\n')), "row,iou,f1,pixel_accuracy");
  const auto back = parse_metrics_csv(text, "mem");
  EXPECT_EQ(back.miou, r.miou);
  EXPECT_EQ(back.macro_f1, r.macro_f1);
  EXPECT_EQ(back.opa, r.opa);
  for (std::size_t c = 0; c < kNumClasses; ++c) {
    EXPECT_EQ(back.defined(c), r.defined(c));
    if (r.defined(c)) {
      EXPECT_EQ(back.iou[c], r.iou[c]);
    }
  }
  EXPECT_EQ(metrics_csv(back), text);
}

TEST(MetricsCsv, MalformedInputIsIngestionError) {
  EXPECT_THROW(parse_metrics_csv("wrong\n", "x"), IngestionError);
  EXPECT_THROW(parse_metrics_csv("row,iou,f1,pixel_accuracy\nBA,0.5,0.5\n", "x"), IngestionError);
  EXPECT_THROW(parse_metrics_csv("row,iou,f1,pixel_accuracy\nsummary,1,1,1\n", "x"), IngestionError);
}

TEST(MeanReport, ArithmeticMeanOfTrials) {
  std::mt19937_64 rng(11);
  std::vector<MetricsReport> reports;
  double sum = 0;
  for (int i = 0; i < 7; ++i) {
    ConfusionMatrix cm;
    accumulate(cm, random_raster(rng, 8, 8), random_raster(rng, 8, 8));
    reports.push_back(compute_metrics(cm));
    sum += reports.back().miou;
  }
  const auto m = mean_report(reports);
  EXPECT_NEAR(m.miou, sum / 7, 1e-9);
  std::reverse(reports.begin(), reports.end());
  EXPECT_NEAR(mean_report(reports).miou, m.miou, 1e-12);
}

TEST(Table, HeaderAndRowLayout) {
  EXPECT_EQ(table_header(), "run                   BA      BU      LV      TR      CA      IS    mIoU      F1     OPA");
  ConfusionMatrix cm;
  accumulate(cm, raster(1, 4, {0, 0, 1, 1}), raster(1, 4, {0, 1, 1, 1}));
  EXPECT_EQ(table_row("x", compute_metrics(cm)),
            "x                  50.00   66.67       -       -       -       -   58.33   73.33   75.00");
}

TEST(Segmenter, PredictShapeAndDeterminism) {
  const auto data = synthetic_patches(SceneSpec{}, 6, false);
  SegmenterConfig cfg;
  cfg.epochs = 2;
  auto a = train_segmenter<float>(data, {}, cfg);
  auto b = train_segmenter<float>(data, {}, cfg);
  const auto images = stack_images(data);
  NoGradGuard guard;
  EXPECT_EQ(a.forward(Var<float>(images)).shape(), (Shape{6, kNumClasses, 64, 64}));
  EXPECT_EQ(a.predict(images), b.predict(images));
}

TEST(Segmenter, LearnsWellAboveChance) {
  auto split = split_dataset(synthetic_patches(SceneSpec{}, 50, false), 0);
  SegmenterHistory history;
  auto model = train_segmenter<float>(split.train, split.val, SegmenterConfig{}, &history);
  const auto r = compute_metrics(evaluate_segmenter(model, split.val));
  EXPECT_GT(r.opa, 3.0 / kNumClasses);
  EXPECT_LE(history.best_epoch, history.val_loss.size() - 1);
}

TEST(Segmenter, WarnsOnAbsentClass) {
  auto data = synthetic_patches(SceneSpec{}, 2, false);
  for (auto& s : data)
    for (auto& c : s.labels.classes)
      if (c == kCar) c = kBackground;
  SegmenterConfig cfg;
  cfg.epochs = 1;
  SegmenterHistory history;
  train_segmenter<float>(data, {}, cfg, &history);
  ASSERT_EQ(history.warnings.size(), 1u);
  EXPECT_NE(history.warnings[0].find("CA"), std::string::npos);
}

TEST(Segmenter, IdenticalDomainsGiveMatchingBaselines) {
  // Degenerate shift: the "target" domain uses the source style with an
  // identity restyle, so a source-trained model should do as well as a
  // target-trained one.
  SceneSpec spec;
  spec.target_style = spec.source_style;
  spec.restyle.matrix = {1, 0, 0, 0, 1, 0, 0, 0, 1};
  spec.restyle.offset = {0, 0, 0};
  auto pair = generate_domain_pair(spec, 50);
  const auto source = split_dataset(pair.source, 0), target = split_dataset(pair.target, 1);
  auto lower = train_segmenter<float>(source.train, source.val, SegmenterConfig{});
  auto upper = train_segmenter<float>(target.train, target.val, SegmenterConfig{});
  const double lo = compute_metrics(evaluate_segmenter(lower, target.test)).miou;
  const double up = compute_metrics(evaluate_segmenter(upper, target.test)).miou;
  EXPECT_NEAR(lo, up, 0.05);
}
