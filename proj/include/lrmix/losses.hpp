#pragma once

#include <cstdio>
#include <string>
#include <utility>
#include <vector>

#include "lrmix/networks.hpp"
#include "lrmix/ops.hpp"

namespace lrmix {

/// Weights of the generator objective: reconstruction, adversarial,
/// content, style.
struct LossWeights {
  double lambda1 = 30.0;
  double lambda2 = 1000.0;
  double lambda3 = 1.0;
  double lambda4 = 5.0;

  void validate() const {
    if (lambda1 < 0 || lambda2 < 0 || lambda3 < 0 || lambda4 < 0)
      throw ConfigError("loss weights must be non-negative");
  }
};

struct LossReport {
  double rec = 0;
  double adv_gen = 0;
  double adv_dis = 0;
  double content = 0;
  double style = 0;
  double total = 0;

  static constexpr const char* kCsvHeader = "step,rec,adv_gen,adv_dis,content,style,total";
};

template <class T>
struct GramMatrix {
  Tensor<T> values;  // Ch x Ch
  std::string source_layer;
  std::size_t normalizer = 0;  // Ch * H * W
};

/// Gram matrix of a single-sample feature map 1 x Ch x H x W.
template <class T>
GramMatrix<T> gram_matrix(const Tensor<T>& feature, std::string layer = {}) {
  if (feature.rank() != 4 || feature.dim(0) != 1) throw UsageError("gram_matrix expects a 1 x Ch x H x W feature");
  NoGradGuard guard;
  const std::size_t ch = feature.dim(1);
  Var<T> g = gram(Var<T>(feature));
  return {g.value().reshaped(Shape{ch, ch}), std::move(layer), ch * feature.dim(2) * feature.dim(3)};
}

/// mean|I_s - I_s'| + mean|I_t - I_t'|
template <class T>
Var<T> reconstruction_loss(const Var<T>& source, const Var<T>& source_rec, const Var<T>& target,
                           const Var<T>& target_rec) {
  return add(mean_abs_diff(source, source_rec), mean_abs_diff(target, target_rec));
}

/// mean((D(real) - 1)^2) + mean(D(fake)^2)
template <class T>
Var<T> lsgan_discriminator_loss(const Var<T>& score_real, const Var<T>& score_fake) {
  return add(mean_squared_to(score_real, T(1)), mean_squared_to(score_fake, T(0)));
}

/// mean((D(fake) - 1)^2)
template <class T>
Var<T> lsgan_generator_loss(const Var<T>& score_fake) {
  return mean_squared_to(score_fake, T(1));
}

template <class T>
Var<T> feature_at(const std::vector<std::pair<std::string, Var<T>>>& features, const std::string& tap) {
  for (const auto& [name, v] : features)
    if (name == tap) return v;
  throw ConfigError("feature tap `" + tap + "` was not computed");
}

/// Content term from precomputed features: sum over taps of the mean squared
/// feature difference.
template <class T>
Var<T> content_loss_from_features(const std::vector<std::pair<std::string, Var<T>>>& a,
                                  const std::vector<std::pair<std::string, Var<T>>>& b,
                                  const std::vector<std::string>& taps) {
  Var<T> total;
  for (const auto& tap : taps) {
    Var<T> term = mean_squared_diff(feature_at(a, tap), feature_at(b, tap));
    total = total.defined() ? add(total, term) : term;
  }
  return total;
}

/// Style term from precomputed features: sum over taps of the squared
/// Frobenius distance between batch-averaged Gram matrices. The two feature
/// sets may have different batch sizes.
template <class T>
Var<T> style_loss_from_features(const std::vector<std::pair<std::string, Var<T>>>& a,
                                const std::vector<std::pair<std::string, Var<T>>>& b,
                                const std::vector<std::string>& taps) {
  Var<T> total;
  for (const auto& tap : taps) {
    Var<T> term = sum_squared_diff(batch_mean(gram(feature_at(a, tap))), batch_mean(gram(feature_at(b, tap))));
    total = total.defined() ? add(total, term) : term;
  }
  return total;
}

template <class T>
Var<T> content_loss(PerceptualNet<T>& net, const Var<T>& source, const Var<T>& translated,
                    const PerceptualTaps& taps) {
  if (source.shape() != translated.shape()) throw UsageError("content_loss: image shapes differ");
  return content_loss_from_features(net.features(source, taps.content_taps), net.features(translated, taps.content_taps),
                                    taps.content_taps);
}

template <class T>
Var<T> style_loss(PerceptualNet<T>& net, const Var<T>& target, const Var<T>& translated, const PerceptualTaps& taps) {
  if (target.dim(1) != translated.dim(1)) throw UsageError("style_loss: channel counts differ");
  return style_loss_from_features(net.features(target, taps.style_taps), net.features(translated, taps.style_taps),
                                  taps.style_taps);
}

template <class T>
struct GeneratorTerms {
  Var<T> rec;
  Var<T> adv_gen;
  Var<T> content;
  Var<T> style;
};

/// lambda1 * rec + lambda2 * adv_gen + lambda3 * content + lambda4 * style,
/// plus the populated report (adv_dis is filled in by the caller).
template <class T>
std::pair<Var<T>, LossReport> total_generator_loss(const GeneratorTerms<T>& terms, const LossWeights& w) {
  w.validate();
  Var<T> total = add(add(scale(terms.rec, static_cast<T>(w.lambda1)), scale(terms.adv_gen, static_cast<T>(w.lambda2))),
                     add(scale(terms.content, static_cast<T>(w.lambda3)), scale(terms.style, static_cast<T>(w.lambda4))));
  LossReport report;
  report.rec = static_cast<double>(terms.rec.value().item());
  report.adv_gen = static_cast<double>(terms.adv_gen.value().item());
  report.content = static_cast<double>(terms.content.value().item());
  report.style = static_cast<double>(terms.style.value().item());
  report.total = w.lambda1 * report.rec + w.lambda2 * report.adv_gen + w.lambda3 * report.content +
                 w.lambda4 * report.style;
  return {total, report};
}

inline std::string to_csv_row(std::size_t step, const LossReport& r) {
  char buf[320];
  std::snprintf(buf, sizeof(buf), "%zu,%.9g,%.9g,%.9g,%.9g,%.9g,%.9g", step, r.rec, r.adv_gen, r.adv_dis, r.content,
                r.style, r.total);
  return buf;
}

}  // namespace lrmix
