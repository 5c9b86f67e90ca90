#pragma once

#include <array>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <iostream>
#include <limits>
#include <sstream>
#include <string>
#include <vector>

#include "lrmix/adam.hpp"
#include "lrmix/data.hpp"
#include "lrmix/layers.hpp"

namespace lrmix {

// ---------------------------------------------------------------------------
// Confusion matrix and metrics

/// Rows are ground truth, columns are predictions.
struct ConfusionMatrix {
  std::array<std::array<std::uint64_t, kNumClasses>, kNumClasses> counts{};

  std::uint64_t total() const {
    std::uint64_t n = 0;
    for (const auto& row : counts)
      for (auto v : row) n += v;
    return n;
  }
  ConfusionMatrix& merge(const ConfusionMatrix& other) {
    for (std::size_t g = 0; g < kNumClasses; ++g)
      for (std::size_t p = 0; p < kNumClasses; ++p) counts[g][p] += other.counts[g][p];
    return *this;
  }
  bool operator==(const ConfusionMatrix&) const = default;
};

inline void accumulate(ConfusionMatrix& cm, std::span<const std::uint8_t> gt, std::span<const std::uint8_t> pred) {
  if (gt.size() != pred.size())
    throw UsageError("accumulate: ground truth has " + std::to_string(gt.size()) + " pixels, prediction " +
                     std::to_string(pred.size()));
  for (std::size_t i = 0; i < gt.size(); ++i)
    if (gt[i] >= kNumClasses || pred[i] >= kNumClasses)
      throw UsageError("accumulate: class index out of range at pixel " + std::to_string(i));
  for (std::size_t i = 0; i < gt.size(); ++i) ++cm.counts[gt[i]][pred[i]];
}

inline ConfusionMatrix& accumulate(ConfusionMatrix& cm, const LabelRaster& gt, const LabelRaster& pred) {
  if (gt.height != pred.height || gt.width != pred.width)
    throw UsageError("accumulate: label rasters differ in shape");
  accumulate(cm, std::span<const std::uint8_t>(gt.classes), std::span<const std::uint8_t>(pred.classes));
  return cm;
}

/// Per-class values are NaN for classes absent from both ground truth and
/// prediction; such classes are left out of the means.
struct MetricsReport {
  std::array<double, kNumClasses> iou{};
  std::array<double, kNumClasses> f1{};
  std::array<double, kNumClasses> accuracy{};  // per-class recall
  double miou = 0;
  double macro_f1 = 0;
  double opa = 0;
  std::string trial;

  static constexpr const char* kCsvHeader = "row,iou,f1,pixel_accuracy";
  bool defined(std::size_t c) const { return !std::isnan(iou[c]); }
};

inline MetricsReport compute_metrics(const ConfusionMatrix& cm) {
  const std::uint64_t total = cm.total();
  if (total == 0) throw UsageError("compute_metrics: confusion matrix is empty");
  MetricsReport r;
  const double nan = std::numeric_limits<double>::quiet_NaN();
  std::uint64_t trace = 0;
  double iou_sum = 0, f1_sum = 0;
  std::size_t present = 0;
  for (std::size_t c = 0; c < kNumClasses; ++c) {
    std::uint64_t fp = 0, fn = 0;
    const std::uint64_t tp = cm.counts[c][c];
    for (std::size_t o = 0; o < kNumClasses; ++o) {
      if (o == c) continue;
      fp += cm.counts[o][c];
      fn += cm.counts[c][o];
    }
    trace += tp;
    if (tp + fp + fn == 0) {
      r.iou[c] = r.f1[c] = r.accuracy[c] = nan;
      continue;
    }
    r.iou[c] = static_cast<double>(tp) / static_cast<double>(tp + fp + fn);
    r.f1[c] = 2.0 * static_cast<double>(tp) / static_cast<double>(2 * tp + fp + fn);
    r.accuracy[c] = tp + fn ? static_cast<double>(tp) / static_cast<double>(tp + fn) : 0.0;
    iou_sum += r.iou[c];
    f1_sum += r.f1[c];
    ++present;
  }
  r.miou = iou_sum / static_cast<double>(present);
  r.macro_f1 = f1_sum / static_cast<double>(present);
  r.opa = static_cast<double>(trace) / static_cast<double>(total);
  return r;
}

inline std::string format_metric(double v) {
  if (std::isnan(v)) return "nan";
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

/// One row per class, then `summary,miou,macro_f1,opa`.
inline std::string metrics_csv(const MetricsReport& r) {
  std::string out = std::string(MetricsReport::kCsvHeader) + "\n";
  for (std::size_t c = 0; c < kNumClasses; ++c)
    out += std::string(kClassNames[c]) + "," + format_metric(r.iou[c]) + "," + format_metric(r.f1[c]) + "," +
           format_metric(r.accuracy[c]) + "\n";
  out += "summary," + format_metric(r.miou) + "," + format_metric(r.macro_f1) + "," + format_metric(r.opa) + "\n";
  return out;
}

inline MetricsReport parse_metrics_csv(const std::string& text, const std::string& origin) {
  std::istringstream in(text);
  std::string line;
  if (!std::getline(in, line) || line != MetricsReport::kCsvHeader)
    throw IngestionError(origin + ": not a metrics CSV (bad header)");
  MetricsReport r;
  std::array<bool, kNumClasses> seen{};
  bool summary = false;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    std::array<std::string, 4> cell;
    std::istringstream row(line);
    for (auto& c : cell)
      if (!std::getline(row, c, ',')) throw IngestionError(origin + ": malformed row `" + line + "`");
    auto num = [&](const std::string& s) {
      char* end = nullptr;
      const double v = std::strtod(s.c_str(), &end);
      if (end == s.c_str() || *end != '\0') throw IngestionError(origin + ": bad number `" + s + "`");
      return v;
    };
    if (cell[0] == "summary") {
      r.miou = num(cell[1]);
      r.macro_f1 = num(cell[2]);
      r.opa = num(cell[3]);
      summary = true;
      continue;
    }
    std::size_t c = 0;
    while (c < kNumClasses && cell[0] != kClassNames[c]) ++c;
    if (c == kNumClasses) throw IngestionError(origin + ": unknown row `" + cell[0] + "`");
    r.iou[c] = num(cell[1]);
    r.f1[c] = num(cell[2]);
    r.accuracy[c] = num(cell[3]);
    seen[c] = true;
  }
  for (std::size_t c = 0; c < kNumClasses; ++c)
    if (!seen[c]) throw IngestionError(origin + ": missing class row " + kClassNames[c]);
  if (!summary) throw IngestionError(origin + ": missing summary row");
  return r;
}

/// Per-class IoU then mIoU, F1, OPA, all in percent.
inline std::string table_header(const std::string& first_column = "run") {
  char buf[160];
  std::snprintf(buf, sizeof(buf), "%-16s %7s %7s %7s %7s %7s %7s %7s %7s %7s", first_column.c_str(), "BA", "BU", "LV",
                "TR", "CA", "IS", "mIoU", "F1", "OPA");
  return buf;
}

inline std::string table_row(const std::string& label, const MetricsReport& r) {
  std::string out;
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%-16s", label.c_str());
  out += buf;
  auto cell = [&](double v) {
    if (std::isnan(v)) std::snprintf(buf, sizeof(buf), " %7s", "-");
    else std::snprintf(buf, sizeof(buf), " %7.2f", 100.0 * v);
    out += buf;
  };
  for (double v : r.iou) cell(v);
  cell(r.miou);
  cell(r.macro_f1);
  cell(r.opa);
  return out;
}

/// Element-wise mean over reports; a class is averaged over the reports
/// where it is defined.
inline MetricsReport mean_report(const std::vector<MetricsReport>& reports) {
  if (reports.empty()) throw UsageError("mean_report: no reports");
  MetricsReport m;
  for (std::size_t c = 0; c < kNumClasses; ++c) {
    double si = 0, sf = 0, sa = 0;
    std::size_t n = 0;
    for (const auto& r : reports)
      if (r.defined(c)) {
        si += r.iou[c];
        sf += r.f1[c];
        sa += r.accuracy[c];
        ++n;
      }
    const double nan = std::numeric_limits<double>::quiet_NaN();
    m.iou[c] = n ? si / static_cast<double>(n) : nan;
    m.f1[c] = n ? sf / static_cast<double>(n) : nan;
    m.accuracy[c] = n ? sa / static_cast<double>(n) : nan;
  }
  for (const auto& r : reports) {
    m.miou += r.miou;
    m.macro_f1 += r.macro_f1;
    m.opa += r.opa;
  }
  const double n = static_cast<double>(reports.size());
  m.miou /= n;
  m.macro_f1 /= n;
  m.opa /= n;
  m.trial = "mean";
  return m;
}

// ---------------------------------------------------------------------------
// Mini U-Net segmenter

struct SegmenterConfig {
  std::size_t base_channels = 12;
  std::size_t epochs = 30;
  std::size_t batch_size = 8;
  std::size_t patience = 5;
  std::uint64_t seed = 0;
  AdamConfig adam = [] {
    AdamConfig a;
    a.learning_rate = 0.003;
    a.weight_decay = 0.0;
    a.beta1 = 0.9;
    return a;
  }();

  void validate() const {
    if (base_channels == 0 || epochs == 0 || batch_size == 0 || patience == 0)
      throw ConfigError("segmenter base_channels, epochs, batch_size and patience must be positive");
    adam.validate();
  }
};

/// Two-level U-Net: conv blocks at full, 1/2 and 1/4 resolution, transposed
/// convolutions back up, skip connections by channel concatenation.
template <class T>
class MiniSegmenter {
 public:
  explicit MiniSegmenter(const SegmenterConfig& cfg = {}) {
    const std::size_t c = cfg.base_channels;
    Rng rng(cfg.seed ^ 0x5e65e65eULL);
    enc1a_ = Conv2d<T>(3, c, 3, 1, 1, false, rng);
    enc1b_ = Conv2d<T>(c, c, 3, 1, 1, false, rng);
    enc2a_ = Conv2d<T>(c, 2 * c, 3, 1, 1, false, rng);
    enc2b_ = Conv2d<T>(2 * c, 2 * c, 3, 1, 1, false, rng);
    bottom_ = Conv2d<T>(2 * c, 4 * c, 3, 1, 1, false, rng);
    up2_ = ConvTranspose2d<T>(4 * c, 2 * c, 2, 2, 0, false, rng);
    dec2a_ = Conv2d<T>(4 * c, 2 * c, 3, 1, 1, false, rng);
    dec2b_ = Conv2d<T>(2 * c, 2 * c, 3, 1, 1, false, rng);
    up1_ = ConvTranspose2d<T>(2 * c, c, 2, 2, 0, false, rng);
    dec1a_ = Conv2d<T>(2 * c, c, 3, 1, 1, false, rng);
    dec1b_ = Conv2d<T>(c, c, 3, 1, 1, false, rng);
    head_ = Conv2d<T>(c, kNumClasses, 1, 1, 0, false, rng);
  }

  /// Class logits N x 6 x H x W. H and W must be divisible by 4.
  Var<T> forward(const Var<T>& x) {
    detail::require_rank4(x.shape(), "segment");
    if (x.dim(2) % 4 || x.dim(3) % 4) throw ConfigError("segmenter input size must be divisible by 4");
    Var<T> s1 = relu(enc1b_.forward(relu(enc1a_.forward(x, true)), true));
    Var<T> s2 = relu(enc2b_.forward(relu(enc2a_.forward(max_pool2d(s1, 2), true)), true));
    Var<T> b = relu(bottom_.forward(max_pool2d(s2, 2), true));
    Var<T> u2 = relu(up2_.forward(b, true));
    Var<T> d2 = relu(dec2b_.forward(relu(dec2a_.forward(concat_channels(u2, s2), true)), true));
    Var<T> u1 = relu(up1_.forward(d2, true));
    Var<T> d1 = relu(dec1b_.forward(relu(dec1a_.forward(concat_channels(u1, s1), true)), true));
    return head_.forward(d1, true);
  }

  /// Arg-max class per pixel, N * H * W values.
  std::vector<std::uint8_t> predict(const Tensor<T>& images) {
    NoGradGuard guard;
    const Tensor<T> logits = forward(Var<T>(images)).value();
    const std::size_t n = logits.dim(0), hw = logits.dim(2) * logits.dim(3);
    std::vector<std::uint8_t> out(n * hw);
    for (std::size_t s = 0; s < n; ++s)
      for (std::size_t p = 0; p < hw; ++p) {
        std::size_t best = 0;
        for (std::size_t c = 1; c < kNumClasses; ++c)
          if (logits[(s * kNumClasses + c) * hw + p] > logits[(s * kNumClasses + best) * hw + p]) best = c;
        out[s * hw + p] = static_cast<std::uint8_t>(best);
      }
    return out;
  }

  NamedState<T> named_state() {
    NamedState<T> state;
    const std::pair<const char*, Conv2d<T>*> convs[] = {{"enc1a", &enc1a_}, {"enc1b", &enc1b_}, {"enc2a", &enc2a_},
                                                         {"enc2b", &enc2b_}, {"bottom", &bottom_}, {"dec2a", &dec2a_},
                                                         {"dec2b", &dec2b_}, {"dec1a", &dec1a_}, {"dec1b", &dec1b_},
                                                         {"head", &head_}};
    for (auto [name, conv] : convs) conv->collect(name, state);
    up2_.collect("up2", state);
    up1_.collect("up1", state);
    return state;
  }

 private:
  Conv2d<T> enc1a_, enc1b_, enc2a_, enc2b_, bottom_, dec2a_, dec2b_, dec1a_, dec1b_, head_;
  ConvTranspose2d<T> up2_, up1_;
};

/// Softmax over the class axis of N x C x H x W logits.
template <class T>
Tensor<T> class_probabilities(const Tensor<T>& logits) {
  Tensor<T> out(logits.shape());
  const std::size_t n = logits.dim(0), c = logits.dim(1), hw = logits.dim(2) * logits.dim(3);
  for (std::size_t s = 0; s < n; ++s)
    for (std::size_t p = 0; p < hw; ++p) {
      T mx = logits[s * c * hw + p];
      for (std::size_t k = 1; k < c; ++k) mx = std::max(mx, logits[(s * c + k) * hw + p]);
      T z = 0;
      for (std::size_t k = 0; k < c; ++k) z += std::exp(logits[(s * c + k) * hw + p] - mx);
      for (std::size_t k = 0; k < c; ++k) out[(s * c + k) * hw + p] = std::exp(logits[(s * c + k) * hw + p] - mx) / z;
    }
  return out;
}

struct SegmenterHistory {
  std::vector<double> train_loss;
  std::vector<double> val_loss;
  std::size_t best_epoch = 0;
  std::vector<std::string> warnings;
};

template <class T>
double segmentation_loss(MiniSegmenter<T>& model, const Dataset& data, std::size_t batch_size) {
  NoGradGuard guard;
  std::vector<std::size_t> order(data.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  double total = 0;
  for (std::size_t b = 0; b < data.size(); b += batch_size) {
    const std::size_t e = std::min(data.size(), b + batch_size);
    const auto labels = stack_labels(data, order, b, e);
    const Var<T> loss = softmax_cross_entropy(model.forward(Var<T>(stack_images(data, order, b, e).cast<T>())),
                                              std::span<const std::int32_t>(labels));
    total += static_cast<double>(loss.value().item()) * static_cast<double>(e - b);
  }
  return total / static_cast<double>(data.size());
}

/// Cross-entropy training with Adam and early stopping on the validation loss
/// (the training loss when `val` is empty). The best epoch's weights are kept.
template <class T>
MiniSegmenter<T> train_segmenter(const Dataset& train, const Dataset& val, const SegmenterConfig& cfg,
                                 SegmenterHistory* history = nullptr) {
  cfg.validate();
  if (train.empty()) throw UsageError("train_segmenter: empty training set");
  SegmenterHistory local;
  SegmenterHistory& hist = history ? *history : local;

  std::array<bool, kNumClasses> present{};
  for (const auto& s : train)
    for (auto c : s.labels.classes) present[c] = true;
  for (std::size_t c = 0; c < kNumClasses; ++c)
    if (!present[c]) {
      hist.warnings.push_back(std::string("class ") + kClassNames[c] + " is absent from the training set");
      std::cerr << "warning: train_segmenter: " << hist.warnings.back() << "\n";
    }

  MiniSegmenter<T> model(cfg);
  auto state = model.named_state();
  const auto params = state.params();
  std::vector<Tensor<T>> best;
  double best_loss = std::numeric_limits<double>::infinity();
  std::size_t since_best = 0;
  std::vector<std::size_t> order(train.size());
  for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
    seeded_shuffle(order, cfg.seed * 1000003ULL + epoch);
    double epoch_loss = 0;
    for (std::size_t b = 0; b < order.size(); b += cfg.batch_size) {
      const std::size_t e = std::min(order.size(), b + cfg.batch_size);
      const auto labels = stack_labels(train, order, b, e);
      zero_grad(params);
      const Var<T> loss = softmax_cross_entropy(model.forward(Var<T>(stack_images(train, order, b, e).cast<T>())),
                                                std::span<const std::int32_t>(labels));
      backward(loss);
      adam_step(params, cfg.adam);
      epoch_loss += static_cast<double>(loss.value().item()) * static_cast<double>(e - b);
    }
    hist.train_loss.push_back(epoch_loss / static_cast<double>(train.size()));
    const double monitored = val.empty() ? hist.train_loss.back() : segmentation_loss(model, val, cfg.batch_size);
    hist.val_loss.push_back(monitored);
    if (monitored < best_loss) {
      best_loss = monitored;
      hist.best_epoch = epoch;
      since_best = 0;
      best.clear();
      for (auto* p : params) best.push_back(p->value());
    } else if (++since_best >= cfg.patience) {
      break;
    }
  }
  for (std::size_t i = 0; i < params.size(); ++i) params[i]->value() = best[i];
  return model;
}

template <class T>
ConfusionMatrix evaluate_segmenter(MiniSegmenter<T>& model, const Dataset& data, std::size_t batch_size = 8) {
  ConfusionMatrix cm;
  std::vector<std::size_t> order(data.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  for (std::size_t b = 0; b < data.size(); b += batch_size) {
    const std::size_t e = std::min(data.size(), b + batch_size);
    const auto pred = model.predict(stack_images(data, order, b, e).cast<T>());
    std::vector<std::uint8_t> gt;
    for (std::size_t k = b; k < e; ++k) gt.insert(gt.end(), data[k].labels.classes.begin(), data[k].labels.classes.end());
    accumulate(cm, std::span<const std::uint8_t>(gt), std::span<const std::uint8_t>(pred));
  }
  return cm;
}

}  // namespace lrmix
