#pragma once

// Base model, Stage-1 generative pre-training and Stage-2 fine-tuning.
//
// All stages run plain minibatch SGD on one thread. Every epoch draws its
// shuffle, negatives and diff pairs from a stream derived from
// (seed, stage, epoch), so a run resumed from an epoch checkpoint repeats
// the uninterrupted run exactly.

#include <algorithm>
#include <chrono>
#include <filesystem>
#include <fstream>
#include <optional>
#include <set>
#include <string>
#include <thread>
#include <vector>

#include "amen/config.hpp"
#include "amen/discriminator.hpp"
#include "amen/embedding.hpp"
#include "amen/generator.hpp"
#include "amen/moveline.hpp"

namespace amen {

using ordered_json = nlohmann::ordered_json;

// Lines of train_log.jsonl, kept in memory and optionally appended to a file.
class TrainLog {
 public:
  TrainLog() = default;
  explicit TrainLog(std::string path) : path_(std::move(path)) {
    if (!path_.empty()) std::ofstream(path_, std::ios::trunc);
  }

  void write(ordered_json line) {
    if (!path_.empty()) {
      std::ofstream out(path_, std::ios::app);
      out << line.dump() << '\n';
      if (!out) throw Error("io", "cannot append to " + path_);
    }
    lines_.push_back(std::move(line));
  }

  const std::vector<ordered_json>& lines() const noexcept { return lines_; }

 private:
  std::string path_;
  std::vector<ordered_json> lines_;
};

struct ResumePoint {
  WeightArchive weights;
  std::size_t next_epoch = 0;
};

struct TrainOptions {
  TrainLog* log = nullptr;
  std::string checkpoint_dir;  // per-epoch checkpoints when set
  std::optional<ResumePoint> resume;
  std::optional<std::size_t> stop_after_epoch;  // end early, as if interrupted
};

struct EpochRecord {
  std::string stage;
  std::size_t epoch = 0;
  ordered_json metrics;
  double seconds = 0.0;
  std::string checkpoint;
};

// Runs fn(i) for i in [0, n) on `threads` workers with a static partition.
// fn must only write to slot i of its outputs.
template <typename Fn>
void parallel_for(std::size_t n, std::size_t threads, Fn fn) {
  threads = std::max<std::size_t>(1, std::min(threads, n));
  if (threads == 1) {
    for (std::size_t i = 0; i < n; ++i) fn(i);
    return;
  }
  std::vector<std::thread> pool;
  std::vector<std::exception_ptr> errors(threads);
  for (std::size_t w = 0; w < threads; ++w) {
    pool.emplace_back([&, w] {
      try {
        for (std::size_t i = w; i < n; i += threads) fn(i);
      } catch (...) {
        errors[w] = std::current_exception();
      }
    });
  }
  for (auto& t : pool) t.join();
  for (auto& e : errors) {
    if (e) std::rethrow_exception(e);
  }
}

// Generator-derived features of every sample, computed once; the
// generator is only read.
inline std::vector<FlowFeatures> compute_flow_features(const Generator& gen, const std::vector<Sample>& samples,
                                                       double tau, std::size_t threads = 1) {
  std::vector<FlowFeatures> out(samples.size());
  parallel_for(samples.size(), threads,
               [&](std::size_t i) { out[i] = flow_features(gen.generate_flow(samples[i].history), tau); });
  return out;
}

namespace detail {

inline std::vector<std::size_t> shuffled_order(std::size_t n, Rng& rng) {
  std::vector<std::size_t> order(n);
  for (std::size_t i = 0; i < n; ++i) order[i] = i;
  for (std::size_t i = n; i > 1; --i) std::swap(order[i - 1], order[rng.below(i)]);
  return order;
}

inline void clip_and_step(ParameterSet& params, double clip, double lr) {
  if (clip > 0.0) {
    const double norm = params.grad_norm();
    if (norm > clip) params.scale_grad(clip / norm);
  }
  params.sgd_step(lr);
  params.zero_grad();
}

inline std::string epoch_checkpoint(const TrainOptions& opts, const std::string& stage, std::size_t epoch,
                                    const ParameterSet& params) {
  if (opts.checkpoint_dir.empty()) return "";
  std::filesystem::create_directories(opts.checkpoint_dir);
  const std::string stem = (std::filesystem::path(opts.checkpoint_dir) /
                            (stage + "-epoch" + std::to_string(epoch + 1)))
                               .string();
  save_archive(export_weights(params), stem);
  return stem;
}

// Rows of the large id tables see only the samples that touch them, so
// their batch-averaged gradients are small; they step `scale` times further.
// Scene, behavior and position tables are hit by every sample and keep the
// base rate.
inline void set_embedding_lr_scale(ParameterSet& params, double scale) {
  for (Parameter& p : params.all()) {
    p.lr_scale = (p.name == "item_embedding" || p.name == "user_embedding") ? scale : 1.0;
  }
}

inline std::size_t first_epoch(const TrainOptions& opts, ParameterSet& params) {
  if (!opts.resume) return 0;
  import_weights(params, opts.resume->weights);
  return opts.resume->next_epoch;
}

inline std::size_t last_epoch(const TrainOptions& opts, std::size_t epochs) {
  return opts.stop_after_epoch ? std::min(epochs, *opts.stop_after_epoch) : epochs;
}

inline double seconds_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

}  // namespace detail

inline const std::set<std::string>& embedding_tensor_names() {
  static const std::set<std::string> names{"item_embedding", "scene_embedding", "behavior_embedding"};
  return names;
}

// Names present in both with identical shapes.
inline std::set<std::string> compatible_tensor_names(const ParameterSet& params, const WeightArchive& archive) {
  std::set<std::string> out;
  for (const auto& t : archive.tensors) {
    const Parameter* p = params.find(t.name);
    if (p != nullptr && p->value.same_shape(t.value)) out.insert(t.name);
  }
  return out;
}

// ------------------------------------------------------------ data

// Generated from the config unless train_path/test_path name JSONL splits.
inline Dataset prepare_dataset(const RunConfig& cfg) {
  if (cfg.train_path.empty() && cfg.test_path.empty()) return generate_synthetic_dataset(synth_config(cfg));
  if (cfg.train_path.empty() || cfg.test_path.empty()) {
    throw ConfigError(cfg.train_path.empty() ? "train_path" : "test_path", "train_path and test_path go together");
  }
  Dataset ds;
  ds.n_users = cfg.n_users;
  ds.n_items = cfg.n_items;
  ds.n_scenes = cfg.n_scenes;
  ds.window = cfg.T;
  ds.train = load_samples(cfg.train_path);
  ds.test = load_samples(cfg.test_path);
  for (const Sample& s : ds.train) validate_sample(s, ds);
  for (const Sample& s : ds.test) validate_sample(s, ds);
  return ds;
}

inline std::string hex64(std::uint64_t h) {
  static const char* digits = "0123456789abcdef";
  std::string out(16, '0');
  for (int i = 15; i >= 0; --i, h >>= 4) out[static_cast<std::size_t>(i)] = digits[h & 0xf];
  return out;
}

inline std::string dataset_checksum(const Dataset& ds) {
  return hex64(fnv1a64(serialize_samples(ds.test), fnv1a64(serialize_samples(ds.train))));
}

// ------------------------------------------------------------ discriminator

struct DiscriminatorTrainSpec {
  std::string stage;   // "base", "stage2", or a baseline name
  std::size_t epochs = 5;
  double lr = 0.05;
  double lambda = 0.0;  // TSP weight; pairs are only drawn when > 0
  std::size_t pair_window = 4;
};

struct DiscriminatorTrainResult {
  std::vector<EpochRecord> epochs;
  std::vector<Stage2Components> epoch_means;  // ce and tsp means, total = ce + lambda * tsp
  std::size_t steps = 0;
  std::size_t diff_pair_calls = 0;
  std::size_t paired_samples = 0;
};

// Minibatch SGD on CE (+ lambda * TSP). CE is averaged over the batch and
// TSP over the batch's paired samples.
inline DiscriminatorTrainResult train_discriminator(Discriminator& disc, const std::vector<Sample>& train,
                                                    const std::vector<FlowFeatures>* flows, const RunConfig& cfg,
                                                    const DiscriminatorTrainSpec& spec, const TrainOptions& opts = {}) {
  if (train.empty()) throw Error("argument", spec.stage + ": empty training split");
  if (disc.config().use_flow && (flows == nullptr || flows->size() != train.size())) {
    throw Error("argument", spec.stage + ": flow features required for every training sample");
  }
  const bool use_tsp = disc.config().use_calibration && spec.lambda > 0.0;
  const SampleIndex index(train);
  ParameterSet& params = disc.params();
  detail::set_embedding_lr_scale(params, cfg.embedding_lr_scale);
  params.zero_grad();

  DiscriminatorTrainResult result;
  const std::size_t start = detail::first_epoch(opts, params);
  const std::size_t stop = detail::last_epoch(opts, spec.epochs);
  for (std::size_t epoch = start; epoch < stop; ++epoch) {
    const auto t0 = std::chrono::steady_clock::now();
    Rng rng = Rng::derived(cfg.seed, spec.stage + "-epoch", epoch);
    const std::vector<std::size_t> order = detail::shuffled_order(train.size(), rng);
    double ce_sum = 0.0, tsp_sum = 0.0;
    std::size_t paired_total = 0;

    for (std::size_t b = 0; b < order.size(); b += cfg.batch_size) {
      const std::size_t end = std::min(order.size(), b + cfg.batch_size);
      const std::size_t batch = end - b;

      // Batch assembly: diff pairs are fixed before any forward pass.
      std::vector<std::optional<PairedSample>> pairs(batch);
      std::size_t paired = 0;
      if (use_tsp) {
        for (std::size_t i = 0; i < batch; ++i) {
          ++result.diff_pair_calls;
          pairs[i] = sample_diff_pair(index, train[order[b + i]], spec.pair_window, rng);
          if (pairs[i]) ++paired;
        }
      }

      double batch_ce = 0.0, batch_tsp = 0.0;
      for (std::size_t i = 0; i < batch; ++i) {
        const std::size_t idx = order[b + i];
        const Sample& s = train[idx];
        Tape tape;
        const DiscriminatorOutput out = disc.forward(tape, s, flows != nullptr ? &(*flows)[idx] : nullptr);
        Var ce = bce_with_logits(out.logit, s.label);
        Var loss = ad::scale(ce, 1.0 / static_cast<double>(batch));
        batch_ce += ce.value()[0];
        if (pairs[i]) {
          const Sample& diff = *pairs[i]->diff;
          Var c_diff = disc.calibration(tape, diff.target_item, diff.history);
          Var tsp = tsp_loss(*out.calibration, c_diff, diff.label);
          batch_tsp += tsp.value()[0];
          loss = ad::add(loss, ad::scale(tsp, spec.lambda / static_cast<double>(paired)));
        }
        tape.backward(loss);
      }
      detail::clip_and_step(params, cfg.grad_clip, spec.lr);
      ++result.steps;

      ce_sum += batch_ce;
      tsp_sum += batch_tsp;
      paired_total += paired;
      if (opts.log != nullptr && spec.stage == "stage2") {
        const double ce_mean = batch_ce / static_cast<double>(batch);
        const double tsp_mean = paired > 0 ? batch_tsp / static_cast<double>(paired) : 0.0;
        ordered_json line;
        line["stage"] = spec.stage;
        line["epoch"] = epoch + 1;
        line["step"] = result.steps;
        line["ce"] = ce_mean;
        line["tsp"] = tsp_mean;
        line["paired"] = paired;
        line["total"] = ce_mean + spec.lambda * tsp_mean;
        opts.log->write(std::move(line));
      }
    }

    Stage2Components m;
    m.ce = ce_sum / static_cast<double>(train.size());
    m.tsp = paired_total > 0 ? tsp_sum / static_cast<double>(paired_total) : 0.0;
    m.total = m.ce + spec.lambda * m.tsp;
    m.paired = paired_total > 0;
    result.epoch_means.push_back(m);
    result.paired_samples += paired_total;

    EpochRecord rec;
    rec.stage = spec.stage;
    rec.epoch = epoch + 1;
    rec.metrics["ce"] = m.ce;
    rec.metrics["tsp"] = m.tsp;
    rec.metrics["total"] = m.total;
    rec.metrics["paired_fraction"] = static_cast<double>(paired_total) / static_cast<double>(train.size());
    rec.checkpoint = detail::epoch_checkpoint(opts, spec.stage, epoch, params);
    rec.seconds = detail::seconds_since(t0);
    if (opts.log != nullptr && spec.stage != "stage2") {
      ordered_json line;
      line["stage"] = spec.stage;
      line["epoch"] = epoch + 1;
      line["ce"] = m.ce;
      opts.log->write(std::move(line));
    }
    result.epochs.push_back(std::move(rec));
  }
  return result;
}

// ------------------------------------------------------------ base model

// The click model without any generator features: attention pooling, no
// calibration net, trained on CE alone.
inline DiscriminatorConfig base_model_config(const RunConfig& cfg) {
  DiscriminatorConfig d = discriminator_config(cfg);
  d.use_flow = false;
  d.use_calibration = false;
  d.pooling = HistoryPooling::attention;
  return d;
}

struct BaseResult {
  WeightArchive weights;
  DiscriminatorTrainResult train;
};

inline BaseResult train_base_model(const Dataset& ds, const RunConfig& cfg, const TrainOptions& opts = {}) {
  validate(cfg);
  Discriminator base(base_model_config(cfg), derive_seed(cfg.seed, "base-init"));
  DiscriminatorTrainSpec spec{"base", cfg.epochs_base, cfg.lr_base, 0.0, cfg.pair_window()};
  BaseResult r;
  r.train = train_discriminator(base, ds.train, nullptr, cfg, spec, opts);
  r.weights = export_weights(base.params());
  return r;
}

// ------------------------------------------------------------ stage 1

// Generator at step 0: embeddings copied from the base model when weight
// initialisation is on, fresh otherwise.
inline Generator make_stage1_generator(const RunConfig& cfg, const WeightArchive* base) {
  Generator gen(generator_config(cfg), derive_seed(cfg.seed, "generator-init"));
  if (cfg.use_weight_init) {
    if (base == nullptr) throw Error("argument", "weight initialisation needs base model weights");
    import_weights(gen.params(), *base, embedding_tensor_names());
    if (cfg.transfer_attention) {
      WeightArchive renamed;
      for (std::size_t b = 0; b < cfg.encoder_blocks; ++b) {
        for (const char* w : {"wq", "wk", "wv"}) {
          if (const NamedTensor* t = base->find(std::string("interest.") + w)) {
            renamed.tensors.push_back({"generator.block" + std::to_string(b) + "." + w, t->value});
          }
        }
      }
      import_weights(gen.params(), renamed);
    }
  }
  return gen;
}

struct Stage1Result {
  WeightArchive weights;  // phi*
  std::vector<Stage1Components> epoch_means;
  std::vector<EpochRecord> epochs;
  std::size_t steps = 0;
};

inline Stage1Result run_stage1(Generator& gen, const std::vector<Sample>& train, const RunConfig& cfg,
                               const TrainOptions& opts = {}) {
  if (train.empty()) throw Error("argument", "stage1: empty training split");
  const Stage1Weights w{cfg.alpha, cfg.beta, cfg.tau};
  ParameterSet& params = gen.params();
  detail::set_embedding_lr_scale(params, cfg.embedding_lr_scale);
  params.zero_grad();

  Stage1Result result;
  const std::size_t start = detail::first_epoch(opts, params);
  const std::size_t stop = detail::last_epoch(opts, cfg.epochs_stage1);
  for (std::size_t epoch = start; epoch < stop; ++epoch) {
    const auto t0 = std::chrono::steady_clock::now();
    Rng rng = Rng::derived(cfg.seed, "stage1-epoch", epoch);
    const std::vector<std::size_t> order = detail::shuffled_order(train.size(), rng);
    Stage1Components sum;

    for (std::size_t b = 0; b < order.size(); b += cfg.batch_size) {
      const std::size_t end = std::min(order.size(), b + cfg.batch_size);
      const std::size_t batch = end - b;

      std::vector<std::vector<std::vector<std::size_t>>> negatives(batch);
      std::vector<std::size_t> pool;
      if (cfg.negative_mode == NegativeMode::in_batch) {
        for (std::size_t i = b; i < end; ++i) {
          const auto& f = train[order[i]].future_items;
          pool.insert(pool.end(), f.begin(), f.end());
        }
      }
      for (std::size_t i = 0; i < batch; ++i) {
        const Sample& s = train[order[b + i]];
        for (std::size_t t = 0; t < s.future_items.size(); ++t) {
          std::vector<std::size_t> negs;
          if (cfg.negative_mode == NegativeMode::in_batch) {
            negs = sample_in_batch_negatives(s.future_items[t], pool, cfg.k, rng);
          }
          if (negs.empty()) negs = sample_negatives(s, t, cfg.k, cfg.n_items, rng);
          negatives[i].push_back(std::move(negs));
        }
      }

      for (std::size_t i = 0; i < batch; ++i) {
        const Sample& s = train[order[b + i]];
        Tape tape;
        Var flow = gen.forward(tape, s.history);
        const auto candidates = gather_candidates(tape, params, gen.item_table(), s, negatives[i]);
        const Stage1Terms terms = stage1_loss(flow, candidates, cfg.H, w);
        tape.backward(terms.total, 1.0 / static_cast<double>(batch));
        const Stage1Components c = components_of(terms);
        sum.total += c.total;
        sum.infonce += c.infonce;
        sum.diversity += c.diversity;
        sum.velocity += c.velocity;
      }
      detail::clip_and_step(params, cfg.grad_clip, cfg.lr_stage1);
      ++result.steps;
    }

    const double n = static_cast<double>(train.size());
    const Stage1Components m{sum.total / n, sum.infonce / n, sum.diversity / n, sum.velocity / n};
    result.epoch_means.push_back(m);
    if (opts.log != nullptr) {
      const std::pair<const char*, double> parts[] = {{"L_G", m.infonce}, {"L_div", m.diversity}, {"L_vel", m.velocity}};
      for (const auto& [name, value] : parts) {
        ordered_json line;
        line["stage"] = "stage1";
        line["epoch"] = epoch + 1;
        line["component"] = name;
        line["value"] = value;
        opts.log->write(std::move(line));
      }
    }
    EpochRecord rec;
    rec.stage = "stage1";
    rec.epoch = epoch + 1;
    rec.metrics["total"] = m.total;
    rec.metrics["L_G"] = m.infonce;
    rec.metrics["L_div"] = m.diversity;
    rec.metrics["L_vel"] = m.velocity;
    rec.checkpoint = detail::epoch_checkpoint(opts, "stage1", epoch, params);
    rec.seconds = detail::seconds_since(t0);
    result.epochs.push_back(std::move(rec));
  }
  result.weights = export_weights(params);
  return result;
}

// ------------------------------------------------------------ stage 2

// Fine-tuning click model at step 0. With weight initialisation the
// embedding tables come from phi* (so the target embedding queries the
// flow in the space it was trained in) and every other tensor whose shape
// matches comes from the base model.
inline Discriminator make_stage2_discriminator(const RunConfig& cfg, const WeightArchive* base,
                                               const WeightArchive* phi) {
  Discriminator disc(discriminator_config(cfg), derive_seed(cfg.seed, "discriminator-init"));
  if (cfg.use_weight_init) {
    if (base == nullptr || phi == nullptr) throw Error("argument", "weight initialisation needs base and generator weights");
    import_weights(disc.params(), *base, compatible_tensor_names(disc.params(), *base));
    import_weights(disc.params(), *phi, embedding_tensor_names());
  }
  return disc;
}

struct Stage2Result {
  WeightArchive weights;  // theta*
  DiscriminatorTrainResult train;
  std::string generator_digest_before;
  std::string generator_digest_after;
  double generator_grad_norm = 0.0;
};

// The generator is only read: its flows enter the click model as constants.
inline Stage2Result run_stage2(Discriminator& disc, const Generator& gen, const std::vector<Sample>& train,
                               const RunConfig& cfg, const TrainOptions& opts = {}) {
  Stage2Result r;
  r.generator_digest_before = export_weights(gen.params()).digest();
  std::vector<FlowFeatures> flows;
  if (disc.config().use_flow) flows = compute_flow_features(gen, train, cfg.tau, cfg.threads);
  DiscriminatorTrainSpec spec{"stage2", cfg.epochs_stage2, cfg.lr_stage2, cfg.effective_lambda(), cfg.pair_window()};
  r.train = train_discriminator(disc, train, disc.config().use_flow ? &flows : nullptr, cfg, spec, opts);
  r.generator_digest_after = export_weights(gen.params()).digest();
  r.generator_grad_norm = gen.params().grad_norm();
  if (r.generator_digest_before != r.generator_digest_after || r.generator_grad_norm != 0.0) {
    throw Error("internal", "stage2 modified the frozen generator");
  }
  r.weights = export_weights(disc.params());
  return r;
}

// ------------------------------------------------------------ pipeline

struct PipelineResult {
  BaseResult base;
  Stage1Result stage1;
  Stage2Result stage2;
};

struct PipelineModels {
  Generator generator;
  Discriminator discriminator;
};

// Base model, Stage 1 and Stage 2 in sequence.
inline std::pair<PipelineResult, PipelineModels> run_pipeline(const Dataset& ds, const RunConfig& cfg,
                                                              TrainLog* log = nullptr,
                                                              const std::string& checkpoint_dir = "") {
  validate(cfg);
  TrainOptions opts;
  opts.log = log;
  opts.checkpoint_dir = checkpoint_dir;
  PipelineResult r;
  r.base = train_base_model(ds, cfg, opts);
  Generator gen = make_stage1_generator(cfg, &r.base.weights);
  r.stage1 = run_stage1(gen, ds.train, cfg, opts);
  Discriminator disc = make_stage2_discriminator(cfg, &r.base.weights, &r.stage1.weights);
  r.stage2 = run_stage2(disc, gen, ds.train, cfg, opts);
  return {std::move(r), PipelineModels{std::move(gen), std::move(disc)}};
}

}  // namespace amen
