#pragma once

// Command-line front end. Every subcommand reads a RunConfig (defaults <
// --config file < --set overrides), writes its outputs under one run
// directory, and finishes with run_manifest.json. Failures exit nonzero
// with a readable line and a JSON error object on stderr.

#include <chrono>
#include <ctime>
#include <cstdlib>
#include <filesystem>
#include <iomanip>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "amen/evaluation.hpp"

namespace amen::cli {

namespace fs = std::filesystem;

struct Invocation {
  std::string command;
  std::string config_path;
  std::vector<std::string> overrides;
  std::string out_dir;
  std::size_t threads = 0;  // 0: keep the config value
  std::string resume;       // epoch checkpoint stem
};

inline const std::vector<std::pair<std::string, std::string>>& subcommands() {
  static const std::vector<std::pair<std::string, std::string>> list{
      {"gen-data", "Generate a synthetic dataset (train/test JSONL)"},
      {"train-base", "Train the base click model (no generator features)"},
      {"pretrain", "Stage 1: pre-train the flow generator"},
      {"finetune", "Stage 2: fine-tune the click model on a frozen generator"},
      {"eval", "Score the test split and write eval_report.json"},
      {"ablate", "Run the ablation suite over eval_seeds"},
      {"probe-nif", "Write alignment weights of probe items over a generated flow"},
      {"score-density", "Write histograms of the calibration score by label"},
      {"full-run", "Base model, both stages, evaluation and probes in one go"},
  };
  return list;
}

inline std::string config_key_listing() {
  std::ostringstream ss;
  ss << "Config keys (set in the --config file or with --set key=value):\n";
  for (const auto& f : config_fields()) ss << "  " << std::left << std::setw(26) << f.name << f.help << "\n";
  return ss.str();
}

// ------------------------------------------------------------ run context

class Run {
 public:
  Run(const Invocation& inv, RunConfig cfg) : inv_(inv), cfg_(std::move(cfg)), started_(std::chrono::steady_clock::now()) {
    dir_ = inv.out_dir;
    if (dir_.empty()) {
      if (const char* env = std::getenv("AMEN_RUN_DIR"); env != nullptr && *env != '\0') dir_ = env;
    }
    if (dir_.empty()) {
      const std::time_t now = std::time(nullptr);
      std::tm tm{};
      gmtime_r(&now, &tm);
      std::ostringstream name;
      name << std::put_time(&tm, "%Y%m%d-%H%M%S") << "-seed" << cfg_.seed;
      dir_ = (fs::path("runs") / name.str()).string();
    }
    fs::create_directories(dir_);
    manifest_["command"] = inv.command;
    manifest_["bundle_layout_version"] = kBundleLayoutVersion;
    manifest_["config"] = config_to_json(cfg_);
    manifest_["dataset_checksum"] = nullptr;
    manifest_["epochs"] = ordered_json::array();
    manifest_["checkpoints"] = ordered_json::object();
    manifest_["outputs"] = ordered_json::array();
    manifest_["timings"] = ordered_json::object();
  }

  const RunConfig& config() const noexcept { return cfg_; }
  std::string path(const std::string& name) const { return (fs::path(dir_) / name).string(); }
  std::string checkpoint_dir() const { return path("checkpoints"); }
  std::string checkpoint_stem(const std::string& name) const { return (fs::path(checkpoint_dir()) / name).string(); }

  const Dataset& dataset() {
    if (!ds_) {
      ds_ = prepare_dataset(cfg_);
      manifest_["dataset_checksum"] = dataset_checksum(*ds_);
      manifest_["dataset"] = {{"train", ds_->train.size()}, {"test", ds_->test.size()}};
    }
    return *ds_;
  }

  TrainLog& log() {
    if (!log_) {
      log_.emplace(path("train_log.jsonl"));
      output("train_log.jsonl");
    }
    return *log_;
  }

  TrainOptions options(std::optional<ResumePoint> resume = std::nullopt) {
    TrainOptions o;
    o.log = &log();
    o.checkpoint_dir = checkpoint_dir();
    o.resume = std::move(resume);
    return o;
  }

  void record_epochs(const std::vector<EpochRecord>& epochs) {
    for (const auto& e : epochs) {
      ordered_json j;
      j["stage"] = e.stage;
      j["epoch"] = e.epoch;
      j["metrics"] = e.metrics;
      j["seconds"] = e.seconds;
      if (!e.checkpoint.empty()) j["checkpoint"] = e.checkpoint;
      manifest_["epochs"].push_back(std::move(j));
    }
  }

  void save_checkpoint(const std::string& name, const WeightArchive& a) {
    fs::create_directories(checkpoint_dir());
    const std::string stem = checkpoint_stem(name);
    save_archive(a, stem);
    manifest_["checkpoints"][name] = {{"stem", stem}, {"digest", a.digest()}};
  }

  void write_output(const std::string& name, const std::string& text) {
    write_text_file(path(name), text);
    output(name);
  }

  void timing(const std::string& what, double seconds) { manifest_["timings"][what] = seconds; }
  ordered_json& manifest() noexcept { return manifest_; }

  // Atomic: written to a temporary name, then renamed.
  void finish(std::ostream& out) {
    manifest_["timings"]["total_seconds"] = detail::seconds_since(started_);
    const std::string final_path = path("run_manifest.json");
    const std::string tmp = final_path + ".tmp";
    write_text_file(tmp, manifest_.dump(2) + "\n");
    fs::rename(tmp, final_path);
    out << "run directory: " << dir_ << "\n";
  }

 private:
  void output(const std::string& name) {
    for (const auto& o : manifest_["outputs"]) {
      if (o == name) return;
    }
    manifest_["outputs"].push_back(name);
  }

  Invocation inv_;
  RunConfig cfg_;
  std::string dir_;
  std::chrono::steady_clock::time_point started_;
  std::optional<Dataset> ds_;
  std::optional<TrainLog> log_;
  ordered_json manifest_;
};

// ------------------------------------------------------------ helpers

// `<anything>-epoch<N>` resumes at epoch N (0-based next epoch = N).
inline std::optional<ResumePoint> resume_point(const std::string& stem) {
  if (stem.empty()) return std::nullopt;
  const auto pos = stem.rfind("-epoch");
  std::size_t epoch = 0;
  try {
    if (pos == std::string::npos) throw std::invalid_argument(stem);
    epoch = std::stoul(stem.substr(pos + 6));
  } catch (const std::exception&) {
    throw Error("usage", "--resume expects an epoch checkpoint stem ending in -epoch<N>, got '" + stem + "'");
  }
  return ResumePoint{load_archive(stem), epoch};
}

// Loads every tensor of a model from a checkpoint; a missing tensor is an error.
inline void load_model(ParameterSet& params, const std::string& stem, const std::string& what) {
  const LoadReport r = import_weights(params, load_archive(stem));
  if (!r.kept.empty()) throw Error("io", what + " checkpoint " + stem + " lacks tensor " + r.kept.front());
}

inline std::string existing_stem(const std::string& configured, const std::string& fallback) {
  if (!configured.empty()) return configured;
  if (fs::exists(fallback + ".index.json")) return fallback;
  return "";
}

inline std::string require_stem(const Run& run, const std::string& configured, const std::string& name,
                                const std::string& key, const std::string& producer) {
  const std::string stem = existing_stem(configured, run.checkpoint_stem(name));
  if (stem.empty()) throw ConfigError(key, "no " + name + " checkpoint: set " + key + " or run `" + producer + "` first");
  return stem;
}

inline Generator load_generator(const Run& run) {
  const RunConfig& cfg = run.config();
  const std::string stem = require_stem(run, cfg.generator_checkpoint, "generator", "generator_checkpoint", "pretrain");
  Generator gen(generator_config(cfg), derive_seed(cfg.seed, "generator-init"));
  load_model(gen.params(), stem, "generator");
  return gen;
}

inline Discriminator load_discriminator(const Run& run) {
  const RunConfig& cfg = run.config();
  const std::string stem =
      require_stem(run, cfg.discriminator_checkpoint, "discriminator", "discriminator_checkpoint", "finetune");
  Discriminator disc(discriminator_config(cfg), derive_seed(cfg.seed, "discriminator-init"));
  load_model(disc.params(), stem, "discriminator");
  return disc;
}

inline std::optional<WeightArchive> load_base(const Run& run, bool required) {
  const RunConfig& cfg = run.config();
  if (!required) return std::nullopt;
  const std::string stem = require_stem(run, cfg.base_checkpoint, "base", "base_checkpoint", "train-base");
  return load_archive(stem);
}

// Test AUC of the configured model next to the pooled-MLP baseline, in the
// ablation report layout.
inline ordered_json evaluate_models(Run& run, const Generator& gen, const Discriminator& disc) {
  const RunConfig& cfg = run.config();
  const Dataset& ds = run.dataset();
  std::vector<FlowFeatures> test_flows;
  if (disc.config().use_flow) test_flows = compute_flow_features(gen, ds.test, cfg.tau, cfg.threads);
  const ScoredSplit scored = score_split(disc, disc.config().use_flow ? &test_flows : nullptr, ds.test, cfg.threads);
  const double model_auc = auc(scored.prob, scored.labels);

  Discriminator baseline(baseline_config(cfg, RowKind::pooled_mlp), derive_seed(cfg.seed, std::string(kBaselineRow) + "-init"));
  DiscriminatorTrainSpec spec{kBaselineRow, cfg.epochs_base + cfg.epochs_stage2, cfg.lr_base, 0.0, cfg.pair_window()};
  train_discriminator(baseline, ds.train, nullptr, cfg, spec);
  const ScoredSplit base_scored = score_split(baseline, nullptr, ds.test, cfg.threads);
  const double baseline_auc = auc(base_scored.prob, base_scored.labels);

  ordered_json report;
  report["baseline"] = kBaselineRow;
  report["seeds"] = {cfg.seed};
  report["bundle_layout_version"] = kBundleLayoutVersion;
  ordered_json base_row;
  base_row["name"] = kBaselineRow;
  base_row["label"] = "Pooled-MLP baseline";
  base_row["auc"] = baseline_auc;
  base_row["delta_auc"] = 0.0;
  base_row["auc_per_seed"] = {baseline_auc};
  base_row["features"] = feature_flags(cfg, RowKind::pooled_mlp);
  ordered_json model_row;
  model_row["name"] = "amen";
  model_row["label"] = "AMEN (configured)";
  model_row["auc"] = model_auc;
  model_row["delta_auc"] = model_auc - baseline_auc;
  model_row["auc_per_seed"] = {model_auc};
  model_row["features"] = feature_flags(cfg, RowKind::amen);
  if (disc.config().use_flow) {
    const FlowStats fs = flow_stats(test_flows, cfg.H, cfg.tau);
    model_row["flow"] = {{"mean_head_similarity", fs.mean_head_similarity}, {"velocity_loss", fs.velocity_loss}};
  }
  const CalibrationStats cs = calibration_stats(scored.calibration, scored.labels);
  model_row["calibration"] = {{"pos_mean", cs.pos_mean}, {"neg_mean", cs.neg_mean}, {"gap", cs.gap}, {"support", cs.support}};
  report["rows"] = {base_row, model_row};
  return report;
}

inline void write_probe(Run& run, const Generator& gen, const Discriminator& disc) {
  const RunConfig& cfg = run.config();
  const Dataset& ds = run.dataset();
  std::vector<std::size_t> items = cfg.probe_items;
  std::vector<std::size_t> categories;
  std::vector<bool> inside;
  Moveline history;
  if (items.empty()) {
    if (cfg.probe_category >= cfg.n_categories) throw ConfigError("probe_category", "must be below n_categories");
    const ProbeSet p = make_probe_set(ds, cfg.probe_category, cfg.max_history, cfg.probe_per_side, cfg.seed);
    items = p.items;
    inside = p.in_category;
    history = p.history;
  } else {
    if (ds.test.empty()) throw Error("argument", "probe-nif: empty test split");
    history = ds.test.front().history;
    for (std::size_t it : items) {
      if (it >= cfg.n_items) throw ConfigError("probe_items", "item " + std::to_string(it) + " out of range");
    }
  }
  for (std::size_t it : items) {
    if (it < ds.item_category.size()) categories.push_back(ds.item_category[it]);
  }
  if (!ds.item_category.empty() && cfg.probe_items.empty()) {
    inside.clear();
    for (std::size_t it : items) inside.push_back(ds.item_category[it] == cfg.probe_category);
  }
  const Matrix w = nif_probe(gen, disc, history, items);
  run.write_output("nif_probe.csv", probe_csv(w, items, categories, inside));
}

inline void write_density(Run& run, const Generator& gen, const Discriminator& disc) {
  const RunConfig& cfg = run.config();
  const Dataset& ds = run.dataset();
  std::vector<FlowFeatures> flows;
  if (disc.config().use_flow) flows = compute_flow_features(gen, ds.test, cfg.tau, cfg.threads);
  const ScoredSplit scored = score_split(disc, disc.config().use_flow ? &flows : nullptr, ds.test, cfg.threads);
  run.write_output("score_density.csv", density_csv(score_density(scored.calibration, scored.labels, cfg.density_bins)));
}

inline std::string report_text(const ordered_json& report) { return report.dump(2) + "\n"; }

// ------------------------------------------------------------ commands

inline void cmd_gen_data(Run& run, std::ostream& out) {
  const Dataset& ds = run.dataset();
  run.write_output("train.jsonl", serialize_samples(ds.train));
  run.write_output("test.jsonl", serialize_samples(ds.test));
  if (run.config().write_ground_truth) run.write_output("truth.jsonl", serialize_truth(ds));
  out << "train " << ds.train.size() << " samples, test " << ds.test.size() << " samples, click rate "
      << base_click_rate(ds.train) << "\n";
}

inline BaseResult cmd_train_base(Run& run, const Invocation& inv, std::ostream& out) {
  const auto t0 = std::chrono::steady_clock::now();
  const Dataset& ds = run.dataset();
  BaseResult r = train_base_model(ds, run.config(), run.options(resume_point(inv.resume)));
  run.record_epochs(r.train.epochs);
  run.save_checkpoint("base", r.weights);
  run.timing("base_seconds", detail::seconds_since(t0));
  if (!r.train.epoch_means.empty()) out << "base: final epoch ce " << r.train.epoch_means.back().ce << "\n";
  return r;
}

inline Stage1Result cmd_pretrain(Run& run, const Invocation& inv, std::ostream& out, const WeightArchive* base) {
  const auto t0 = std::chrono::steady_clock::now();
  const RunConfig& cfg = run.config();
  std::optional<WeightArchive> loaded;
  if (base == nullptr && cfg.use_weight_init) {
    loaded = load_base(run, true);
    base = &*loaded;
  }
  Generator gen = make_stage1_generator(cfg, base);
  Stage1Result r = run_stage1(gen, run.dataset().train, cfg, run.options(resume_point(inv.resume)));
  run.record_epochs(r.epochs);
  run.save_checkpoint("generator", r.weights);
  run.timing("stage1_seconds", detail::seconds_since(t0));
  if (!r.epoch_means.empty()) {
    const auto& m = r.epoch_means.back();
    out << "stage1: final epoch L_G " << m.infonce << " L_div " << m.diversity << " L_vel " << m.velocity << "\n";
  }
  return r;
}

inline Stage2Result cmd_finetune(Run& run, const Invocation& inv, std::ostream& out, const WeightArchive* base,
                                 const Generator* gen_in) {
  const auto t0 = std::chrono::steady_clock::now();
  const RunConfig& cfg = run.config();
  std::optional<WeightArchive> loaded_base;
  if (base == nullptr && cfg.use_weight_init) {
    loaded_base = load_base(run, true);
    base = &*loaded_base;
  }
  std::optional<Generator> loaded_gen;
  if (gen_in == nullptr) {
    loaded_gen.emplace(load_generator(run));
    gen_in = &*loaded_gen;
  }
  const WeightArchive phi = export_weights(gen_in->params());
  Discriminator disc = make_stage2_discriminator(cfg, base, cfg.use_weight_init ? &phi : nullptr);
  Stage2Result r = run_stage2(disc, *gen_in, run.dataset().train, cfg, run.options(resume_point(inv.resume)));
  run.record_epochs(r.train.epochs);
  run.save_checkpoint("discriminator", r.weights);
  run.manifest()["generator_digest"] = {{"before", r.generator_digest_before}, {"after", r.generator_digest_after}};
  run.manifest()["diff_pair_calls"] = r.train.diff_pair_calls;
  run.timing("stage2_seconds", detail::seconds_since(t0));
  if (!r.train.epoch_means.empty()) {
    const auto& m = r.train.epoch_means.back();
    out << "stage2: final epoch ce " << m.ce << " tsp " << m.tsp << "\n";
  }
  return r;
}

inline void cmd_eval(Run& run, std::ostream& out) {
  const Generator gen = load_generator(run);
  const Discriminator disc = load_discriminator(run);
  const ordered_json report = evaluate_models(run, gen, disc);
  run.write_output("eval_report.json", report_text(report));
  out << "test AUC " << report["rows"][1]["auc"].get<double>() << " (baseline "
      << report["rows"][0]["auc"].get<double>() << ")\n";
}

inline void cmd_ablate(Run& run, std::ostream& out) {
  const RunConfig& cfg = run.config();
  const auto t0 = std::chrono::steady_clock::now();
  const ordered_json report = run_ablation_suite(cfg, cfg.eval_seeds, default_ablation_rows(), cfg.threads);
  run.timing("ablation_seconds", detail::seconds_since(t0));
  run.write_output("eval_report.json", report_text(report));
  for (const auto& row : report["rows"]) {
    out << std::left << std::setw(28) << row["name"].get<std::string>() << " AUC " << std::fixed << std::setprecision(4)
        << row["auc"].get<double>() << "  dAUC " << std::showpos << row["delta_auc"].get<double>() << std::noshowpos
        << std::defaultfloat << "\n";
  }
}

inline void cmd_full_run(Run& run, const Invocation& inv, std::ostream& out) {
  run.dataset();
  const BaseResult base = cmd_train_base(run, Invocation{}, out);
  const auto t0 = std::chrono::steady_clock::now();
  Generator gen = make_stage1_generator(run.config(), &base.weights);
  const Stage1Result s1 = run_stage1(gen, run.dataset().train, run.config(), run.options());
  run.record_epochs(s1.epochs);
  run.save_checkpoint("generator", s1.weights);
  run.timing("stage1_seconds", detail::seconds_since(t0));
  (void)inv;
  cmd_finetune(run, Invocation{}, out, &base.weights, &gen);
  const Discriminator disc = load_discriminator(run);
  const ordered_json report = evaluate_models(run, gen, disc);
  run.write_output("eval_report.json", report_text(report));
  write_probe(run, gen, disc);
  write_density(run, gen, disc);
  out << "test AUC " << report["rows"][1]["auc"].get<double>() << " (baseline "
      << report["rows"][0]["auc"].get<double>() << ")\n";
}

// ------------------------------------------------------------ dispatch

inline void emit_error(std::ostream& err, const std::string& kind, const std::string& message) {
  err << "error: " << message << "\n";
  ordered_json j;
  j["error"] = {{"kind", kind}, {"message", message}};
  err << j.dump() << "\n";
}

inline int dispatch(int argc, const char* const* argv, std::ostream& out = std::cout, std::ostream& err = std::cerr) {
  CLI::App app{"AMEN: next-interest-flow pre-training and click-model fine-tuning on movelines", "amen"};
  app.require_subcommand(1);
  Invocation inv;
  for (const auto& [name, desc] : subcommands()) {
    CLI::App* sub = app.add_subcommand(name, desc);
    CLI::Option* cfg_opt = sub->add_option("--config", inv.config_path, "Config file (key = value lines)");
    if (name != "gen-data") cfg_opt->required();
    sub->add_option("--set", inv.overrides, "Override one config key, as key=value (repeatable)")->take_all();
    sub->add_option("--out", inv.out_dir, "Run directory (default: $AMEN_RUN_DIR or runs/<timestamp>-seed<N>)");
    sub->add_option("--threads", inv.threads, "Worker threads for evaluation (default: config value, 1)");
    if (name == "train-base" || name == "pretrain" || name == "finetune") {
      sub->add_option("--resume", inv.resume, "Continue from an epoch checkpoint <stem>-epoch<N>");
    }
    sub->callback([&inv, name] { inv.command = name; });
  }
  app.footer(config_key_listing());

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e, out, err);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e, out, err);
  } catch (const CLI::ParseError& e) {
    emit_error(err, "usage", e.what());
    return 2;
  }

  try {
    RunConfig cfg;
    if (!inv.config_path.empty()) apply_config_text(cfg, read_text_file(inv.config_path), inv.config_path);
    for (const auto& o : inv.overrides) apply_override(cfg, o);
    if (inv.threads > 0) cfg.threads = inv.threads;
    validate(cfg);

    Run run(inv, cfg);
    const std::string& c = inv.command;
    if (c == "gen-data") {
      cmd_gen_data(run, out);
    } else if (c == "train-base") {
      cmd_train_base(run, inv, out);
    } else if (c == "pretrain") {
      cmd_pretrain(run, inv, out, nullptr);
    } else if (c == "finetune") {
      cmd_finetune(run, inv, out, nullptr, nullptr);
    } else if (c == "eval") {
      cmd_eval(run, out);
    } else if (c == "ablate") {
      cmd_ablate(run, out);
    } else if (c == "probe-nif") {
      write_probe(run, load_generator(run), load_discriminator(run));
    } else if (c == "score-density") {
      write_density(run, load_generator(run), load_discriminator(run));
    } else if (c == "full-run") {
      cmd_full_run(run, inv, out);
    }
    run.finish(out);
    return 0;
  } catch (const Error& e) {
    emit_error(err, e.kind(), e.what());
  } catch (const nlohmann::json::exception& e) {
    emit_error(err, "data", e.what());
  } catch (const std::filesystem::filesystem_error& e) {
    emit_error(err, "io", e.what());
  } catch (const std::exception& e) {
    emit_error(err, "internal", e.what());
  }
  return 1;
}

}  // namespace amen::cli
