#pragma once

#include <CLI11.hpp>

#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include "lrmix/experiment.hpp"
#include "lrmix/manifest.hpp"

namespace lrmix {

namespace cli {

namespace fs = std::filesystem;

inline constexpr int kExitOk = 0;
inline constexpr int kExitUsage = 1;
inline constexpr int kExitRuntime = 2;

/// Flag values shared by the commands. Unset flags leave the config file
/// (or the defaults) untouched.
struct Overrides {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::optional<std::size_t> patch_size, epochs, batch_size, trials, parallel, n;
  std::optional<double> lambda1, lambda2, lambda3, lambda4;
};

inline void add_config_flags(CLI::App& cmd, Overrides& o) {
  cmd.add_option("--config", o.config, "Key-value config file (a previous manifest.txt works too)")
      ->check(CLI::ExistingFile);
  cmd.add_option("--seed", o.seed, "Master seed");
  cmd.add_option("--patch-size", o.patch_size, "Patch edge length in pixels");
  cmd.add_option("--epochs", o.epochs, "I2IT training epochs");
  cmd.add_option("--batch-size", o.batch_size, "I2IT batch size");
  cmd.add_option("--lambda1", o.lambda1, "Reconstruction weight");
  cmd.add_option("--lambda2", o.lambda2, "Adversarial weight");
  cmd.add_option("--lambda3", o.lambda3, "Content weight");
  cmd.add_option("--lambda4", o.lambda4, "Style weight");
}

inline ExperimentConfig resolve_config(const Overrides& o) {
  KeyValues kv = o.config.empty() ? KeyValues{} : KeyValues::load(o.config);
  if (o.seed) kv.set("seed", static_cast<std::int64_t>(*o.seed));
  if (o.patch_size) kv.set("data.patch_size", *o.patch_size);
  if (o.epochs) kv.set("train.epochs", *o.epochs);
  if (o.batch_size) kv.set("train.batch_size", *o.batch_size);
  if (o.lambda1) kv.set("loss.lambda1", *o.lambda1);
  if (o.lambda2) kv.set("loss.lambda2", *o.lambda2);
  if (o.lambda3) kv.set("loss.lambda3", *o.lambda3);
  if (o.lambda4) kv.set("loss.lambda4", *o.lambda4);
  if (o.trials) kv.set("experiment.trials", *o.trials);
  if (o.parallel) kv.set("experiment.parallel", *o.parallel);
  if (o.n) {
    kv.set("data.source_scenes", *o.n);
    kv.set("data.target_scenes", *o.n);
  }
  return ExperimentConfig::from_key_values(kv, {"command", kArtifactPrefix});
}

inline void write_text(const fs::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out << text;
}

inline std::string loss_csv(const std::vector<LossReport>& history) {
  std::string out = std::string(LossReport::kCsvHeader) + "\n";
  for (std::size_t i = 0; i < history.size(); ++i) out += to_csv_row(i, history[i]) + "\n";
  return out;
}

inline Dataset load_patches(const fs::path& split_dir, std::size_t patch) {
  return to_patches(load_dataset(split_dir), patch);
}

inline Image load_target_sample(const std::string& path, std::size_t patch) {
  Image img = load_image(path);
  if (img.height() != patch || img.width() != patch)
    throw ConfigError("target sample " + path + " is " + std::to_string(img.height()) + "x" +
                      std::to_string(img.width()) + ", expected " + std::to_string(patch) + "x" +
                      std::to_string(patch));
  return img;
}

inline void save_segmenter(const fs::path& path, MiniSegmenter<float>& seg, const SegmenterConfig& cfg) {
  TensorArchive ar;
  KeyValues meta;
  meta.set("seg.base_channels", cfg.base_channels);
  ar.metadata = meta.to_string();
  export_state(seg.named_state(), ar);
  write_archive(path.string(), ar);
}

inline MiniSegmenter<float> load_segmenter(const fs::path& path) {
  const auto ar = read_archive(path.string());
  SegmenterConfig cfg;
  const auto base = KeyValues::parse(ar.metadata, path.string()).get_int("seg.base_channels", -1);
  if (base <= 0) throw IngestionError(path.string() + ": not a segmenter archive");
  cfg.base_channels = static_cast<std::size_t>(base);
  MiniSegmenter<float> seg(cfg);
  auto state = seg.named_state();
  import_state(state, ar, path.string());
  return seg;
}

inline void write_metrics(const fs::path& dir, const std::string& name, const MetricsReport& r) {
  write_text(dir / (name + ".csv"), metrics_csv(r));
}

// --- commands ---------------------------------------------------------------

inline void gen_data(const ExperimentConfig& cfg, const fs::path& out, std::ostream& stdout_) {
  const auto pair = generate_domain_pair(cfg.scenes, std::max(cfg.source_scenes, cfg.target_scenes));
  save_dataset(out, "source", Dataset(pair.source.begin(), pair.source.begin() + static_cast<std::ptrdiff_t>(cfg.source_scenes)));
  save_dataset(out, "target", Dataset(pair.target.begin(), pair.target.begin() + static_cast<std::ptrdiff_t>(cfg.target_scenes)));
  stdout_ << "source_scenes=" << cfg.source_scenes << " target_scenes=" << cfg.target_scenes << "\n";
}

inline void train_i2it_cmd(const ExperimentConfig& cfg, const fs::path& data_dir, const std::string& target_path,
                           const fs::path& out, std::ostream& stdout_) {
  const auto split = split_dataset(load_patches(data_dir / "source", cfg.patch_size), cfg.seed);
  const Image target = load_target_sample(target_path, cfg.patch_size);
  TrainConfig train = cfg.train;
  train.checkpoint_dir = out.string();
  train.verbose = true;
  const auto r = train_i2it(cfg.model, split.train, split.val, target, train);
  stdout_ << "steps=" << r.state.global_step << " best_epoch=" << r.state.best_epoch
          << " best_validation_loss=" << format_metric(r.state.best_validation_loss) << "\n";
}

inline void translate_cmd(const ExperimentConfig& cfg, const fs::path& checkpoint, const fs::path& data_dir,
                          const std::string& target_path, const fs::path& out, std::ostream& stdout_) {
  auto model = load_checkpoint(checkpoint.string());
  const Dataset patches = load_patches(data_dir, cfg.patch_size);
  const Image target = load_target_sample(target_path, cfg.patch_size);
  const Dataset translated = translate_dataset(*model, patches, target);
  save_dataset(out, "", translated);
  stdout_ << "translated=" << translated.size() << "\n";
}

inline void train_seg_cmd(const ExperimentConfig& cfg, const fs::path& data_dir, const fs::path& out,
                          std::ostream& stdout_) {
  const auto split = split_dataset(load_patches(data_dir, cfg.patch_size), cfg.seed);
  SegmenterHistory hist;
  auto seg = train_segmenter<float>(split.train, split.val, cfg.segmenter, &hist);
  save_segmenter(out / "segmenter.lrmx", seg, cfg.segmenter);
  std::string csv = "epoch,train_loss,val_loss\n";
  for (std::size_t e = 0; e < hist.train_loss.size(); ++e)
    csv += std::to_string(e) + "," + format_metric(hist.train_loss[e]) + "," + format_metric(hist.val_loss[e]) + "\n";
  write_text(out / "segmenter_loss.csv", csv);
  stdout_ << "epochs=" << hist.train_loss.size() << " best_epoch=" << hist.best_epoch << "\n";
}

inline void eval_cmd(const ExperimentConfig& cfg, const fs::path& checkpoint, const fs::path& data_dir,
                     const fs::path& out, std::ostream& stdout_) {
  auto seg = load_segmenter(checkpoint);
  auto report = compute_metrics(evaluate_segmenter(seg, load_patches(data_dir, cfg.patch_size)));
  write_metrics(out, "metrics", report);
  stdout_ << table_header() << "\n" << table_row("eval", report) << "\n";
}

inline void experiment_cmd(const ExperimentConfig& cfg, const fs::path& out, std::ostream& stdout_,
                           std::ostream& log) {
  const auto data = make_experiment_data(cfg);
  log << "[experiment] " << data.source.train.size() << " source train patches, " << cfg.trials << " trial(s)\n";
  auto on_trial = [&](std::size_t i, const ExperimentResult& r) {
    char name[32];
    std::snprintf(name, sizeof(name), "trial_%02zu", i);
    const fs::path dir = out / name;
    fs::create_directories(dir);
    write_metrics(dir, "lower", r.lower);
    write_metrics(dir, "adapted", r.adapted);
    write_metrics(dir, "upper", r.upper);
    write_text(dir / "loss.csv", loss_csv(r.i2it.loss_history));
    write_text(dir / "target_sample.txt", r.target_id + "\n");
    save_checkpoint((dir / "checkpoint.lrmx").string(), *r.model);
    log << "[experiment] " << name << " target " << r.target_id << ": lower " << format_metric(r.lower.miou)
        << ", adapted " << format_metric(r.adapted.miou) << ", upper " << format_metric(r.upper.miou) << "\n";
  };
  const auto result = repeat_trials(data, cfg, on_trial);
  write_metrics(out, "lower", result.lower_mean);
  write_metrics(out, "adapted", result.adapted_mean);
  write_metrics(out, "upper", result.upper_mean);
  stdout_ << table_header("baseline") << "\n"
          << table_row("lower", result.lower_mean) << "\n"
          << table_row("adapted", result.adapted_mean) << "\n"
          << table_row("upper", result.upper_mean) << "\n";
}

/// Per-run rows and a mean row for each of lower/adapted/upper found in the
/// run directories. Unreadable runs are skipped with a warning.
inline std::string summarize(const std::vector<std::string>& run_dirs, std::ostream& log) {
  std::string out;
  std::size_t usable = 0;
  for (const auto& dir : run_dirs) {
    bool any = false;
    for (const char* variant : {"lower", "adapted", "upper"}) any = any || fs::exists(fs::path(dir) / (std::string(variant) + ".csv"));
    if (!any) log << "warning: summarize: skipping " << dir << ": no lower/adapted/upper CSV\n";
  }
  for (const char* variant : {"lower", "adapted", "upper"}) {
    std::vector<MetricsReport> reports;
    std::vector<std::string> labels;
    for (const auto& dir : run_dirs) {
      const fs::path path = fs::path(dir) / (std::string(variant) + ".csv");
      if (!fs::exists(path)) continue;
      try {
        reports.push_back(parse_metrics_csv(read_file_bytes(path), path.string()));
        labels.push_back(fs::path(dir).filename().string());
      } catch (const std::exception& e) {
        log << "warning: summarize: skipping " << path.string() << ": " << e.what() << "\n";
      }
    }
    if (reports.empty()) continue;
    usable += reports.size();
    out += table_header(variant) + "\n";
    for (std::size_t i = 0; i < reports.size(); ++i) out += table_row(labels[i], reports[i]) + "\n";
    out += table_row("mean", mean_report(reports)) + "\n";
  }
  if (usable == 0) throw UsageError("summarize: no readable metric CSVs in the given run directories");
  return out;
}

}  // namespace cli

/// Entry point behind the `lrmix` executable. Results go to `out`, progress
/// and diagnostics to `err`.
inline int run_cli(int argc, const char* const* argv, std::ostream& out = std::cout, std::ostream& err = std::cerr) {
  namespace fs = std::filesystem;
  CLI::App app{"One-shot domain adaptation by latent representation mixing", "lrmix"};
  app.require_subcommand(1);
  cli::Overrides o;
  std::string out_dir, data_dir, target_sample, checkpoint;
  std::vector<std::string> run_dirs;

  auto* gen = app.add_subcommand("gen-data", "Generate the synthetic source/target scene pair");
  cli::add_config_flags(*gen, o);
  gen->add_option("--n", o.n, "Scenes per domain");
  gen->add_option("--out", out_dir, "Output directory")->required();

  auto* train = app.add_subcommand("train-i2it", "Train the translation model on a gen-data directory");
  cli::add_config_flags(*train, o);
  train->add_option("--data", data_dir, "gen-data output directory")->required()->check(CLI::ExistingDirectory);
  train->add_option("--target-sample", target_sample, "Target-domain PNG")->required()->check(CLI::ExistingFile);
  train->add_option("--out", out_dir, "Output directory")->required();

  auto* tr = app.add_subcommand("translate", "Translate a split directory toward a target sample");
  cli::add_config_flags(*tr, o);
  tr->add_option("--checkpoint", checkpoint, "I2IT checkpoint")->required()->check(CLI::ExistingFile);
  tr->add_option("--data", data_dir, "Split directory with images/ and labels/")->required()->check(CLI::ExistingDirectory);
  tr->add_option("--target-sample", target_sample, "Target-domain PNG")->required()->check(CLI::ExistingFile);
  tr->add_option("--out", out_dir, "Output directory")->required();

  auto* seg = app.add_subcommand("train-seg", "Train the segmenter on a split directory");
  cli::add_config_flags(*seg, o);
  seg->add_option("--data", data_dir, "Split directory with images/ and labels/")->required()->check(CLI::ExistingDirectory);
  seg->add_option("--out", out_dir, "Output directory")->required();

  auto* ev = app.add_subcommand("eval", "Score a segmenter on a labelled split directory");
  cli::add_config_flags(*ev, o);
  ev->add_option("--checkpoint", checkpoint, "Segmenter archive")->required()->check(CLI::ExistingFile);
  ev->add_option("--data", data_dir, "Split directory with images/ and labels/")->required()->check(CLI::ExistingDirectory);
  ev->add_option("--out", out_dir, "Output directory")->required();

  auto* ex = app.add_subcommand("experiment", "Lower/adapted/upper comparison over one or more trials");
  cli::add_config_flags(*ex, o);
  ex->add_option("--trials", o.trials, "Number of target samples (one trial each)");
  ex->add_option("--parallel", o.parallel, "Worker threads for trials");
  ex->add_option("--out", out_dir, "Output directory")->required();

  auto* sum = app.add_subcommand("summarize", "Aggregate metric CSVs of several run directories");
  sum->add_option("runs", run_dirs, "Run directories")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e, out, err);
  } catch (const CLI::ParseError& e) {
    app.exit(e, out, err);
    err << app.help();
    return cli::kExitUsage;
  }

  const std::string command = app.get_subcommands().front()->get_name();
  try {
    if (command == "summarize") {
      out << cli::summarize(run_dirs, err);
      return cli::kExitOk;
    }
    const ExperimentConfig cfg = cli::resolve_config(o);
    fs::create_directories(out_dir);
    const fs::path dir(out_dir);
    if (command == "gen-data") cli::gen_data(cfg, dir, out);
    else if (command == "train-i2it") cli::train_i2it_cmd(cfg, data_dir, target_sample, dir, out);
    else if (command == "translate") cli::translate_cmd(cfg, checkpoint, data_dir, target_sample, dir, out);
    else if (command == "train-seg") cli::train_seg_cmd(cfg, data_dir, dir, out);
    else if (command == "eval") cli::eval_cmd(cfg, checkpoint, data_dir, dir, out);
    else cli::experiment_cmd(cfg, dir, out, err);
    write_manifest(dir, command, cfg.to_key_values());
    return cli::kExitOk;
  } catch (const ConfigError& e) {
    err << "error: " << command << ": " << e.what() << "\n";
    return cli::kExitUsage;
  } catch (const UsageError& e) {
    err << "error: " << command << ": " << e.what() << "\n";
    return cli::kExitUsage;
  } catch (const std::exception& e) {
    err << "error: " << command << ": " << e.what() << "\n";
    return cli::kExitRuntime;
  }
}

}  // namespace lrmix
