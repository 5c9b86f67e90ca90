#pragma once

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <limits>
#include <memory>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include "lrmix/adam.hpp"
#include "lrmix/archive.hpp"
#include "lrmix/data.hpp"
#include "lrmix/losses.hpp"
#include "lrmix/networks.hpp"

namespace lrmix {

struct TrainConfig {
  std::size_t epochs = 100;
  std::size_t batch_size = 8;
  AdamConfig adam;
  LossWeights weights;
  std::size_t early_stop_patience = 10;
  std::uint64_t seed = 0;
  std::string checkpoint_dir;  // empty: keep everything in memory
  double validation_fraction = 0.15;
  std::size_t max_iterations = 0;  // 0: no cap beyond `epochs`
  bool adv_real_is_target = false;  // false: the discriminator's real class is the source image
  bool verbose = false;

  void validate() const {
    if (epochs < 1) throw ConfigError("train: epochs must be >= 1");
    if (batch_size < 1) throw ConfigError("train: batch_size must be >= 1");
    if (early_stop_patience < 1) throw ConfigError("train: early_stop_patience must be >= 1");
    if (!(validation_fraction >= 0 && validation_fraction < 1))
      throw ConfigError("train: validation_fraction must lie in [0, 1)");
    adam.validate();
    weights.validate();
  }

  void write(KeyValues& kv) const {
    kv.set("train.epochs", epochs);
    kv.set("train.batch_size", batch_size);
    kv.set("train.early_stop_patience", early_stop_patience);
    kv.set("train.validation_fraction", validation_fraction);
    kv.set("train.max_iterations", max_iterations);
    kv.set("train.adv_real", std::string(adv_real_is_target ? "target" : "source"));
    kv.set("train.lr", adam.learning_rate);
    kv.set("train.weight_decay", adam.weight_decay);
    kv.set("train.beta1", adam.beta1);
    kv.set("train.beta2", adam.beta2);
    kv.set("train.epsilon", adam.epsilon);
    kv.set("loss.lambda1", weights.lambda1);
    kv.set("loss.lambda2", weights.lambda2);
    kv.set("loss.lambda3", weights.lambda3);
    kv.set("loss.lambda4", weights.lambda4);
    kv.set("seed", static_cast<std::int64_t>(seed));
  }

  static TrainConfig read(const KeyValues& kv) {
    TrainConfig c;
    auto count = [&](const std::string& key, std::size_t fallback) {
      const auto v = kv.get_int(key, static_cast<std::int64_t>(fallback));
      if (v < 0) throw ConfigError("config key `" + key + "` must be non-negative");
      return static_cast<std::size_t>(v);
    };
    c.epochs = count("train.epochs", c.epochs);
    c.batch_size = count("train.batch_size", c.batch_size);
    c.early_stop_patience = count("train.early_stop_patience", c.early_stop_patience);
    c.validation_fraction = kv.get_double("train.validation_fraction", c.validation_fraction);
    c.max_iterations = count("train.max_iterations", c.max_iterations);
    const auto real = kv.get_string("train.adv_real", "source");
    if (real != "source" && real != "target") throw ConfigError("train.adv_real must be `source` or `target`");
    c.adv_real_is_target = real == "target";
    c.adam.learning_rate = kv.get_double("train.lr", c.adam.learning_rate);
    c.adam.weight_decay = kv.get_double("train.weight_decay", c.adam.weight_decay);
    c.adam.beta1 = kv.get_double("train.beta1", c.adam.beta1);
    c.adam.beta2 = kv.get_double("train.beta2", c.adam.beta2);
    c.adam.epsilon = kv.get_double("train.epsilon", c.adam.epsilon);
    c.weights.lambda1 = kv.get_double("loss.lambda1", c.weights.lambda1);
    c.weights.lambda2 = kv.get_double("loss.lambda2", c.weights.lambda2);
    c.weights.lambda3 = kv.get_double("loss.lambda3", c.weights.lambda3);
    c.weights.lambda4 = kv.get_double("loss.lambda4", c.weights.lambda4);
    c.seed = static_cast<std::uint64_t>(kv.get_int("seed", 0));
    c.validate();
    return c;
  }
};

struct TrainState {
  std::size_t epoch = 0;
  std::size_t global_step = 0;
  double best_validation_loss = std::numeric_limits<double>::infinity();
  std::size_t best_epoch = 0;
  bool stopped_early = false;
  std::vector<LossReport> loss_history;
  std::vector<double> validation_history;
  std::string rng_state;
};

// ---------------------------------------------------------------------------
// Checkpoints

using Model = I2ITModel<float>;

inline TensorArchive make_checkpoint(Model& model, const KeyValues& extra = {}) {
  KeyValues meta = model.config().to_key_values();
  for (const auto& [k, v] : extra.entries()) meta.set(k, v);
  TensorArchive ar;
  ar.metadata = meta.to_string();
  export_state(model.full_state(), ar);
  return ar;
}

inline std::unique_ptr<Model> model_from_checkpoint(const TensorArchive& ar, const std::string& origin) {
  I2ITConfig cfg;
  try {
    cfg = I2ITConfig::from_key_values(KeyValues::parse(ar.metadata, origin));
  } catch (const ConfigError& e) {
    throw IngestionError(origin + ": checkpoint metadata is invalid: " + e.what());
  }
  auto model = std::make_unique<Model>(cfg);
  auto state = model->full_state();
  import_state(state, ar, origin);
  return model;
}

inline void save_checkpoint(const std::string& path, Model& model, const KeyValues& extra = {}) {
  write_archive(path, make_checkpoint(model, extra));
}

inline std::unique_ptr<Model> load_checkpoint(const std::string& path) {
  return model_from_checkpoint(read_archive(path), path);
}

namespace detail {

// Deep copy of parameter values and buffers, used to keep the best epoch.
struct Snapshot {
  std::vector<Tensor<float>> values;

  static Snapshot take(const NamedState<float>& s) {
    Snapshot out;
    for (const auto& [n, p] : s.parameters) out.values.push_back(p->value());
    for (const auto& [n, t] : s.buffers) out.values.push_back(*t);
    return out;
  }
  void restore(NamedState<float>& s) const {
    std::size_t i = 0;
    for (auto& [n, p] : s.parameters) p->value() = values[i++];
    for (auto& [n, t] : s.buffers) *t = values[i++];
  }
};

inline void set_frozen(const ParamList<float>& params, bool frozen) {
  for (auto* p : params) p->set_frozen(frozen);
}

}  // namespace detail

/// Everything one generator forward produces for a source batch paired with
/// the single target sample.
struct ForwardPass {
  Var<float> source, target;          // inputs, target is 1 x 3 x H x W
  Var<float> source_rec, target_rec;  // each domain decoded from its own latent
  Var<float> translated;              // source content, target style
};

/// The target is encoded once and its halves broadcast across the source
/// batch. Because every op is per-sample except the BIN batch statistics,
/// and the statistics of B identical copies equal those of one copy, this
/// matches encoding B stacked copies.
inline ForwardPass generator_forward(Model& model, const Tensor<float>& source, const Tensor<float>& target,
                                     bool training) {
  ForwardPass f;
  f.source = Var<float>(source);
  f.target = Var<float>(target);
  const std::size_t n = source.dim(0);
  const auto ls = separate(model.encode_source(f.source, training));
  const auto lt = separate(model.encode_target(f.target, training));
  f.source_rec = model.decode(ls.first_half, ls.second_half, training);
  f.translated = model.decode(ls.first_half, broadcast_batch(lt.second_half, n), training);
  f.target_rec = model.decode(lt.first_half, lt.second_half, training);
  return f;
}

inline GeneratorTerms<float> generator_terms(Model& model, PerceptualNet<float>& perceptual, const ForwardPass& f,
                                             bool dis_training) {
  const auto& taps = model.config().taps;
  GeneratorTerms<float> t;
  t.rec = reconstruction_loss(f.source, f.source_rec, f.target, f.target_rec);
  t.adv_gen = lsgan_generator_loss(model.discriminate(f.translated, dis_training));
  t.content = content_loss(perceptual, f.source, f.translated, taps);
  t.style = style_loss(perceptual, f.target, f.translated, taps);
  return t;
}

/// Weighted generator objective over a source set paired with the target sample; eval mode,
/// no gradients. Batches are weighted by their size.
inline double validation_loss(Model& model, PerceptualNet<float>& perceptual, const Dataset& source,
                              const Tensor<float>& target, const TrainConfig& cfg) {
  NoGradGuard guard;
  std::vector<std::size_t> order(source.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  double total = 0;
  for (std::size_t b = 0; b < order.size(); b += cfg.batch_size) {
    const std::size_t e = std::min(order.size(), b + cfg.batch_size);
    const auto f = generator_forward(model, stack_images(source, order, b, e), target, false);
    const auto [loss, report] = total_generator_loss(generator_terms(model, perceptual, f, false), cfg.weights);
    total += report.total * static_cast<double>(e - b);
  }
  return total / static_cast<double>(source.size());
}

namespace detail {

// LSGAN update of the discriminator on the detached translation. Only
// adv_dis of the returned report is filled in.
inline LossReport discriminator_step(Model& model, const ForwardPass& f, const ParamList<float>& dis_params,
                                     const TrainConfig& cfg) {
  const std::size_t n = f.source.dim(0);
  const Var<float> real = cfg.adv_real_is_target ? broadcast_batch(f.target, n) : f.source;
  zero_grad(dis_params);
  const Var<float> loss =
      lsgan_discriminator_loss(model.discriminate(real, true), model.discriminate(detach(f.translated), true));
  backward(loss);
  adam_step(dis_params, cfg.adam);
  LossReport r;
  r.adv_dis = static_cast<double>(loss.value().item());
  return r;
}

// Update of E and D on the weighted objective. The discriminator is frozen
// for the duration so no gradient reaches it.
inline LossReport generator_step(Model& model, PerceptualNet<float>& perceptual, const ForwardPass& f,
                                 const ParamList<float>& gen_params, const ParamList<float>& dis_params,
                                 const TrainConfig& cfg) {
  set_frozen(dis_params, true);
  try {
    const auto [total, report] = total_generator_loss(generator_terms(model, perceptual, f, false), cfg.weights);
    zero_grad(gen_params);
    backward(total);
    set_frozen(dis_params, false);
    adam_step(gen_params, cfg.adam);
    return report;
  } catch (...) {
    set_frozen(dis_params, false);
    throw;
  }
}

}  // namespace detail

struct TrainResult {
  std::unique_ptr<Model> model;
  TrainState state;
};

/// Alternating LSGAN training of the I2IT model on source batches paired
/// with one target image. Per iteration: one generator forward, a
/// discriminator step on the detached translation, then a generator step on
/// the weighted objective with the discriminator frozen. Early stopping on
/// the validation objective; the best epoch's weights are returned.
inline TrainResult train_i2it(const I2ITConfig& model_cfg, const Dataset& source_train, const Dataset& source_val,
                              const Image& target_sample, const TrainConfig& cfg) {
  cfg.validate();
  if (source_train.empty()) throw UsageError("train_i2it: source training set is empty");
  const Tensor<float> target = as_batch(target_sample);
  if (source_train.front().image.pixels.shape() != target_sample.pixels.shape())
    throw ConfigError("train_i2it: target sample size differs from the source images");

  TrainResult result{std::make_unique<Model>(model_cfg), {}};
  Model& model = *result.model;
  TrainState& st = result.state;
  PerceptualNet<float> perceptual(model_cfg.perceptual);
  auto gen_state = model.generator_state();
  auto dis_state = model.discriminator_state();
  auto full_state = model.full_state();
  const auto gen_params = gen_state.params();
  const auto dis_params = dis_state.params();

  std::ofstream csv;
  if (!cfg.checkpoint_dir.empty()) {
    std::filesystem::create_directories(cfg.checkpoint_dir);
    csv.open(std::filesystem::path(cfg.checkpoint_dir) / "loss.csv");
    csv << LossReport::kCsvHeader << "\n";
  }

  std::mt19937_64 rng(cfg.seed);
  detail::Snapshot best = detail::Snapshot::take(full_state);
  std::size_t since_best = 0;
  std::vector<std::size_t> order(source_train.size());
  bool capped = false;
  for (std::size_t epoch = 0; epoch < cfg.epochs && !capped; ++epoch) {
    st.epoch = epoch;
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
    seeded_shuffle(order, rng());
    for (std::size_t b = 0; b < order.size(); b += cfg.batch_size) {
      if (cfg.max_iterations && st.global_step >= cfg.max_iterations) {
        capped = true;
        break;
      }
      const std::size_t e = std::min(order.size(), b + cfg.batch_size);
      LossReport report;
      try {
        const auto f = generator_forward(model, stack_images(source_train, order, b, e), target, true);
        const double adv_dis = detail::discriminator_step(model, f, dis_params, cfg).adv_dis;
        report = detail::generator_step(model, perceptual, f, gen_params, dis_params, cfg);
        report.adv_dis = adv_dis;
      } catch (const NumericError& err) {
        std::ostringstream msg;
        msg << "train_i2it: non-finite value at epoch " << epoch << ", step " << st.global_step << ", batch of source"
            << " indices [";
        for (std::size_t k = b; k < e; ++k) msg << (k > b ? "," : "") << order[k];
        msg << "]: " << err.what();
        if (!st.loss_history.empty()) msg << "; last finite losses " << to_csv_row(st.global_step, st.loss_history.back());
        if (!cfg.checkpoint_dir.empty()) {
          std::ofstream dump(std::filesystem::path(cfg.checkpoint_dir) / "diagnostic.txt");
          dump << msg.str() << "\n";
        }
        throw NumericError(msg.str());
      }
      if (csv) csv << to_csv_row(st.global_step, report) << "\n";
      if (cfg.verbose && st.global_step % 10 == 0)
        std::cerr << "[train-i2it] step " << st.global_step << " " << to_csv_row(st.global_step, report) << "\n";
      st.loss_history.push_back(report);
      ++st.global_step;
    }

    const double val = validation_loss(model, perceptual, source_val.empty() ? source_train : source_val, target, cfg);
    st.validation_history.push_back(val);
    if (cfg.verbose) std::cerr << "[train-i2it] epoch " << epoch << " validation " << val << "\n";
    if (val < st.best_validation_loss) {
      st.best_validation_loss = val;
      st.best_epoch = epoch;
      best = detail::Snapshot::take(full_state);
      since_best = 0;
    } else if (++since_best >= cfg.early_stop_patience) {
      st.stopped_early = true;
      break;
    }
  }
  best.restore(full_state);
  std::ostringstream rs;
  rs << rng;
  st.rng_state = rs.str();
  if (!cfg.checkpoint_dir.empty()) {
    KeyValues extra;
    cfg.write(extra);
    save_checkpoint((std::filesystem::path(cfg.checkpoint_dir) / "checkpoint.lrmx").string(), model, extra);
  }
  return result;
}

/// Translation at inference: first half of each source latent with the second half
/// of the target latent. Eval mode, so outputs do not depend on batching.
inline std::vector<Image> translate(Model& model, const std::vector<Image>& sources, const Image& target_sample,
                                    std::size_t batch_size = 8) {
  NoGradGuard guard;
  const Tensor<float> target = as_batch(target_sample);
  const auto lt = separate(model.encode_target(Var<float>(target), false));
  std::vector<Image> out;
  for (std::size_t b = 0; b < sources.size(); b += batch_size) {
    const std::size_t e = std::min(sources.size(), b + batch_size);
    const auto& shape = target_sample.pixels.shape();
    Tensor<float> batch(Shape{e - b, shape[0], shape[1], shape[2]});
    for (std::size_t k = b; k < e; ++k) {
      if (sources[k].pixels.shape() != shape)
        throw ConfigError("translate: image " + sources[k].id + " has shape " + shape_str(sources[k].pixels.shape()) +
                          ", expected " + shape_str(shape));
      std::copy(sources[k].pixels.data().begin(), sources[k].pixels.data().end(),
                batch.data().begin() + static_cast<std::ptrdiff_t>((k - b) * sources[k].pixels.size()));
    }
    const auto ls = separate(model.encode_source(Var<float>(batch), false));
    const Var<float> y = model.decode(ls.first_half, broadcast_batch(lt.second_half, e - b), false);
    for (std::size_t k = b; k < e; ++k) out.push_back(image_from_batch(y.value(), k - b, sources[k].id));
  }
  return out;
}

inline Dataset translate_dataset(Model& model, const Dataset& source, const Image& target_sample) {
  std::vector<Image> images;
  for (const auto& s : source) images.push_back(s.image);
  auto translated = translate(model, images, target_sample);
  Dataset out;
  for (std::size_t i = 0; i < source.size(); ++i) out.push_back({std::move(translated[i]), source[i].labels});
  return out;
}

}  // namespace lrmix
