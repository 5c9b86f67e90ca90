#pragma once

#include <algorithm>
#include <exception>
#include <functional>
#include <iostream>
#include <memory>
#include <mutex>
#include <stdexcept>
#include <string>
#include <thread>
#include <vector>

#include "lrmix/evaluation.hpp"
#include "lrmix/training.hpp"

namespace lrmix {

struct ExperimentConfig {
  SceneSpec scenes;
  std::size_t source_scenes = 50;
  std::size_t target_scenes = 50;
  std::size_t patch_size = 64;
  I2ITConfig model;
  TrainConfig train;
  SegmenterConfig segmenter;
  std::uint64_t seed = 0;
  std::size_t trials = 1;
  std::size_t parallel = 1;

  void validate() const {
    model.validate();
    train.validate();
    segmenter.validate();
    if (patch_size == 0 || patch_size % 4) throw ConfigError("experiment: patch size must be a positive multiple of 4");
    if (trials == 0) throw ConfigError("experiment: trials must be >= 1");
    if (parallel == 0) throw ConfigError("experiment: parallel must be >= 1");
    if (source_scenes == 0 || target_scenes == 0) throw ConfigError("experiment: scene counts must be >= 1");
  }

  /// The full schema. `seed` drives scene generation, splits, I2IT and
  /// segmenter training; the model's init seed is kept separately.
  KeyValues to_key_values() const {
    KeyValues kv = model.to_key_values();
    train.write(kv);
    kv.set("seed", static_cast<std::int64_t>(seed));
    kv.set("data.source_scenes", source_scenes);
    kv.set("data.target_scenes", target_scenes);
    kv.set("data.patch_size", patch_size);
    kv.set("data.height", scenes.height);
    kv.set("data.width", scenes.width);
    kv.set("data.roads", scenes.roads);
    kv.set("data.buildings", scenes.buildings);
    kv.set("data.vegetation", scenes.vegetation);
    kv.set("data.trees", scenes.trees);
    kv.set("data.cars", scenes.cars);
    kv.set("data.shared_layout", scenes.shared_layout);
    kv.set("seg.base_channels", segmenter.base_channels);
    kv.set("seg.epochs", segmenter.epochs);
    kv.set("seg.batch_size", segmenter.batch_size);
    kv.set("seg.patience", segmenter.patience);
    kv.set("seg.lr", segmenter.adam.learning_rate);
    kv.set("seg.weight_decay", segmenter.adam.weight_decay);
    kv.set("seg.beta1", segmenter.adam.beta1);
    kv.set("seg.beta2", segmenter.adam.beta2);
    kv.set("experiment.trials", trials);
    kv.set("experiment.parallel", parallel);
    return kv;
  }

  /// Rejects keys outside the schema, except those listed in `ignored_prefixes`.
  static ExperimentConfig from_key_values(const KeyValues& kv, const std::vector<std::string>& ignored_prefixes = {}) {
    const KeyValues defaults = ExperimentConfig{}.to_key_values();
    std::vector<std::string> known;
    for (const auto& [k, v] : defaults.entries()) known.push_back(k);
    for (const auto& key : kv.unknown_keys(known)) {
      bool ignored = false;
      for (const auto& prefix : ignored_prefixes) ignored = ignored || key.rfind(prefix, 0) == 0;
      if (!ignored) throw ConfigError("unknown config key `" + key + "`");
    }
    auto count = [&](const std::string& key, std::size_t fallback) {
      const auto v = kv.get_int(key, static_cast<std::int64_t>(fallback));
      if (v < 0) throw ConfigError("config key `" + key + "` must be non-negative");
      return static_cast<std::size_t>(v);
    };
    ExperimentConfig c;
    c.seed = static_cast<std::uint64_t>(kv.get_int("seed", 0));
    KeyValues model_kv = kv;
    if (!kv.has("model.init_seed")) model_kv.set("model.init_seed", static_cast<std::int64_t>(c.seed));
    c.model = I2ITConfig::from_key_values(model_kv);
    c.train = TrainConfig::read(kv);
    c.source_scenes = count("data.source_scenes", c.source_scenes);
    c.target_scenes = count("data.target_scenes", c.target_scenes);
    c.patch_size = count("data.patch_size", c.patch_size);
    c.scenes.seed = c.seed;
    c.scenes.height = count("data.height", c.scenes.height);
    c.scenes.width = count("data.width", c.scenes.width);
    c.scenes.roads = count("data.roads", c.scenes.roads);
    c.scenes.buildings = count("data.buildings", c.scenes.buildings);
    c.scenes.vegetation = count("data.vegetation", c.scenes.vegetation);
    c.scenes.trees = count("data.trees", c.scenes.trees);
    c.scenes.cars = count("data.cars", c.scenes.cars);
    c.scenes.shared_layout = kv.get_bool("data.shared_layout", c.scenes.shared_layout);
    c.segmenter.base_channels = count("seg.base_channels", c.segmenter.base_channels);
    c.segmenter.epochs = count("seg.epochs", c.segmenter.epochs);
    c.segmenter.batch_size = count("seg.batch_size", c.segmenter.batch_size);
    c.segmenter.patience = count("seg.patience", c.segmenter.patience);
    c.segmenter.adam.learning_rate = kv.get_double("seg.lr", c.segmenter.adam.learning_rate);
    c.segmenter.adam.weight_decay = kv.get_double("seg.weight_decay", c.segmenter.adam.weight_decay);
    c.segmenter.adam.beta1 = kv.get_double("seg.beta1", c.segmenter.adam.beta1);
    c.segmenter.adam.beta2 = kv.get_double("seg.beta2", c.segmenter.adam.beta2);
    c.segmenter.seed = c.seed;
    c.trials = count("experiment.trials", c.trials);
    c.parallel = count("experiment.parallel", c.parallel);
    c.validate();
    return c;
  }
};

/// Source and target patch sets split 70/15/15.
struct ExperimentData {
  Split<Sample> source;
  Split<Sample> target;
};

inline Dataset to_patches(const Dataset& scenes, std::size_t patch) {
  Dataset out;
  for (const auto& s : scenes) {
    auto patches = crop_patches(s.image, s.labels, patch);
    std::move(patches.begin(), patches.end(), std::back_inserter(out));
  }
  return out;
}

inline ExperimentData prepare_data(const Dataset& source_scenes, const Dataset& target_scenes, std::size_t patch,
                                   std::uint64_t seed) {
  return {split_dataset(to_patches(source_scenes, patch), seed), split_dataset(to_patches(target_scenes, patch), seed + 1)};
}

/// Scenes for both domains from `cfg.scenes`, cropped and split with `cfg.seed`.
inline ExperimentData make_experiment_data(const ExperimentConfig& cfg) {
  const auto pair = generate_domain_pair(cfg.scenes, std::max(cfg.source_scenes, cfg.target_scenes));
  const Dataset source(pair.source.begin(), pair.source.begin() + static_cast<std::ptrdiff_t>(cfg.source_scenes));
  const Dataset target(pair.target.begin(), pair.target.begin() + static_cast<std::ptrdiff_t>(cfg.target_scenes));
  return prepare_data(source, target, cfg.patch_size, cfg.seed);
}

struct ExperimentResult {
  MetricsReport lower, adapted, upper;
  TrainState i2it;
  std::unique_ptr<Model> model;
  std::string target_id;
};

namespace detail {

template <class F>
auto run_stage(const char* stage, F&& f) -> decltype(f()) {
  try {
    return f();
  } catch (const std::exception& e) {
    throw std::runtime_error(std::string("stage `") + stage + "` failed: " + e.what());
  }
}

}  // namespace detail

/// Lower baseline (segmenter trained on raw source), adapted (trained on the
/// source translated toward `target_sample`), and upper baseline (trained on
/// target labels). All three are scored on the target test split.
inline ExperimentResult run_adaptation_experiment(const ExperimentData& data, const Image& target_sample,
                                                  const ExperimentConfig& cfg) {
  cfg.validate();
  ExperimentResult r;
  r.target_id = target_sample.id;
  auto score = [&](const char* stage, const Dataset& train, const Dataset& val) {
    return detail::run_stage(stage, [&] {
      auto seg = train_segmenter<float>(train, val, cfg.segmenter);
      auto report = compute_metrics(evaluate_segmenter(seg, data.target.test));
      report.trial = stage;
      return report;
    });
  };
  auto trained = detail::run_stage("train-i2it", [&] {
    return train_i2it(cfg.model, data.source.train, data.source.val, target_sample, cfg.train);
  });
  r.model = std::move(trained.model);
  r.i2it = std::move(trained.state);
  const auto translated_train =
      detail::run_stage("translate", [&] { return translate_dataset(*r.model, data.source.train, target_sample); });
  const auto translated_val =
      detail::run_stage("translate", [&] { return translate_dataset(*r.model, data.source.val, target_sample); });
  r.lower = score("lower", data.source.train, data.source.val);
  r.adapted = score("adapted", translated_train, translated_val);
  r.upper = score("upper", data.target.train, data.target.val);
  return r;
}

struct TrialsResult {
  std::vector<ExperimentResult> trials;
  MetricsReport lower_mean, adapted_mean, upper_mean;
};

inline void summarize_trials(TrialsResult& out) {
  std::vector<MetricsReport> lo, ad, up;
  for (const auto& t : out.trials) {
    lo.push_back(t.lower);
    ad.push_back(t.adapted);
    up.push_back(t.upper);
  }
  out.lower_mean = mean_report(lo);
  out.adapted_mean = mean_report(ad);
  out.upper_mean = mean_report(up);
}

/// One full pipeline per distinct target sample. Trial i draws the i-th
/// element of a seeded permutation of the target training split and trains
/// with sub-seed seed + i. Trials are independent and may run on
/// `cfg.parallel` threads; results are ordered by trial index.
inline TrialsResult repeat_trials(const ExperimentData& data, const ExperimentConfig& cfg,
                                  const std::function<void(std::size_t, const ExperimentResult&)>& on_trial = {}) {
  cfg.validate();
  const auto& pool = data.target.train;
  if (pool.size() < cfg.trials)
    throw UsageError("repeat_trials: target pool has " + std::to_string(pool.size()) + " samples, " +
                     std::to_string(cfg.trials) + " trials requested");
  std::vector<std::size_t> picks(pool.size());
  for (std::size_t i = 0; i < picks.size(); ++i) picks[i] = i;
  seeded_shuffle(picks, cfg.seed ^ 0x7a12e7ULL);

  TrialsResult out;
  out.trials.resize(cfg.trials);
  std::mutex mu;
  std::exception_ptr failure;
  std::size_t next = 0;
  auto worker = [&] {
    for (;;) {
      std::size_t i;
      {
        std::lock_guard lock(mu);
        if (next >= cfg.trials || failure) return;
        i = next++;
      }
      try {
        ExperimentConfig sub = cfg;
        sub.train.seed = cfg.seed + i;
        sub.segmenter.seed = cfg.seed + i;
        sub.model.init_seed = cfg.seed + i;
        auto result = run_adaptation_experiment(data, pool[picks[i]].image, sub);
        std::lock_guard lock(mu);
        if (on_trial) on_trial(i, result);
        out.trials[i] = std::move(result);
      } catch (...) {
        std::lock_guard lock(mu);
        if (!failure) failure = std::current_exception();
      }
    }
  };
  std::vector<std::thread> threads;
  for (std::size_t k = 1; k < std::min(cfg.parallel, cfg.trials); ++k) threads.emplace_back(worker);
  worker();
  for (auto& t : threads) t.join();
  if (failure) std::rethrow_exception(failure);
  summarize_trials(out);
  return out;
}

}  // namespace lrmix
