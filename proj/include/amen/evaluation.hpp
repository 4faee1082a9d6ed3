#pragma once

// AUC, test-set scoring, the flow probe, calibration-score densities and
// the ablation harness.

#include <algorithm>
#include <cmath>
#include <functional>
#include <map>
#include <numeric>
#include <optional>
#include <string>
#include <vector>

#include "amen/training.hpp"

namespace amen {

// Mann-Whitney AUC from average ranks; ties count one half. The statistic
// is accumulated in half-units as an integer, so the result equals direct
// pair counting bit for bit.
inline double auc(const std::vector<double>& scores, const std::vector<int>& labels) {
  if (scores.size() != labels.size()) throw DimensionError("auc: scores and labels differ in length");
  std::vector<std::size_t> order(scores.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return scores[a] < scores[b]; });
  std::int64_t n_pos = 0;
  for (int y : labels) n_pos += y != 0;
  const std::int64_t n_neg = static_cast<std::int64_t>(labels.size()) - n_pos;
  if (n_pos == 0 || n_neg == 0) throw Error("argument", "undefined AUC: both classes are required");

  // Twice the rank sum of positives; ranks are 1-based, a tie group spanning
  // ranks [lo, hi] gets (lo + hi) / 2 each.
  std::int64_t twice_rank_sum = 0;
  for (std::size_t i = 0; i < order.size();) {
    std::size_t j = i;
    while (j < order.size() && scores[order[j]] == scores[order[i]]) ++j;
    std::int64_t pos_in_group = 0;
    for (std::size_t g = i; g < j; ++g) pos_in_group += labels[order[g]] != 0;
    twice_rank_sum += pos_in_group * static_cast<std::int64_t>(i + 1 + j);
    i = j;
  }
  const std::int64_t twice_u = twice_rank_sum - n_pos * (n_pos + 1);
  return static_cast<double>(twice_u) / static_cast<double>(2 * n_pos * n_neg);
}

// ------------------------------------------------------------ scoring

struct ScoredSplit {
  std::vector<double> prob;
  std::vector<double> calibration;  // c_t0 of every sample
  std::vector<int> labels;
};

inline ScoredSplit score_split(const Discriminator& disc, const std::vector<FlowFeatures>* flows,
                               const std::vector<Sample>& samples, std::size_t threads = 1) {
  if (disc.config().use_flow && (flows == nullptr || flows->size() != samples.size())) {
    throw Error("argument", "score_split: flow features required for every sample");
  }
  ScoredSplit out;
  out.prob.resize(samples.size());
  out.calibration.resize(samples.size());
  out.labels.resize(samples.size());
  parallel_for(samples.size(), threads, [&](std::size_t i) {
    const Sample& s = samples[i];
    out.prob[i] = disc.predict(s, flows != nullptr ? &(*flows)[i] : nullptr);
    out.calibration[i] = disc.calibration_score(s.target_item, s.history);
    out.labels[i] = s.label;
  });
  return out;
}

struct CalibrationStats {
  double pos_mean = 0.0;
  double neg_mean = 0.0;
  double gap = 0.0;  // pos_mean - neg_mean
  double support = 0.0;  // max - min over both classes
};

inline CalibrationStats calibration_stats(const std::vector<double>& c, const std::vector<int>& labels) {
  if (c.empty()) throw Error("argument", "calibration_stats: empty split");
  CalibrationStats s;
  double n_pos = 0.0, n_neg = 0.0;
  for (std::size_t i = 0; i < c.size(); ++i) {
    if (labels[i] != 0) {
      s.pos_mean += c[i];
      n_pos += 1.0;
    } else {
      s.neg_mean += c[i];
      n_neg += 1.0;
    }
  }
  if (n_pos == 0.0 || n_neg == 0.0) throw Error("argument", "calibration_stats: both classes are required");
  s.pos_mean /= n_pos;
  s.neg_mean /= n_neg;
  s.gap = s.pos_mean - s.neg_mean;
  const auto [lo, hi] = std::minmax_element(c.begin(), c.end());
  s.support = *hi - *lo;
  return s;
}

// Held-out flow statistics: mean |h_i . h_j| / tau over head pairs and
// states, and the mean velocity loss per flow.
struct FlowStats {
  double mean_head_similarity = 0.0;
  double velocity_loss = 0.0;
};

inline FlowStats flow_stats(const std::vector<FlowFeatures>& flows, std::size_t heads, double tau) {
  FlowStats st;
  if (flows.empty() || heads < 2) return st;
  double sim = 0.0, n_sim = 0.0, vel = 0.0;
  for (const FlowFeatures& f : flows) {
    const NextInterestFlow flow{f.flow, heads};
    for (std::size_t t = 0; t < flow.horizon(); ++t) {
      const FlowState state = flow.state(t);
      for (std::size_t i = 0; i < heads; ++i) {
        for (std::size_t j = i + 1; j < heads; ++j) {
          sim += std::abs(dot(state.head(i), state.head(j))) / tau;
          n_sim += 1.0;
        }
      }
    }
    if (flow.horizon() >= 3) vel += velocity_loss(flow);
  }
  st.mean_head_similarity = sim / n_sim;
  st.velocity_loss = vel / static_cast<double>(flows.size());
  return st;
}

// ------------------------------------------------------------ probes

// Row i: alignment weights over the flow generated from `history` when
// probe item i is the query.
inline Matrix nif_probe(const Generator& gen, const Discriminator& disc, const Moveline& history,
                        const std::vector<std::size_t>& probe_items) {
  if (probe_items.empty()) throw Error("argument", "nif_probe: no probe items");
  const NextInterestFlow flow = gen.generate_flow(history);
  Matrix out(probe_items.size(), flow.horizon());
  for (std::size_t i = 0; i < probe_items.size(); ++i) {
    const Vector w = disc.alignment_weights(probe_items[i], flow.states);
    for (std::size_t t = 0; t < w.size(); ++t) out(i, t) = w[t];
  }
  return out;
}

inline double entropy(std::span<const double> p) {
  double h = 0.0;
  for (double x : p) {
    if (x > 0.0) h -= x * std::log(x);
  }
  return h;
}

// A moveline of `length` events whose items all belong to `category`,
// drawn uniformly from that category's items.
inline Moveline concentrated_moveline(const Dataset& ds, std::size_t category, std::size_t length, Rng& rng) {
  std::vector<std::size_t> items;
  for (std::size_t i = 0; i < ds.item_category.size(); ++i) {
    if (ds.item_category[i] == category) items.push_back(i);
  }
  if (items.empty()) throw Error("argument", "concentrated_moveline: category has no items");
  Moveline m;
  for (std::size_t j = 0; j < length; ++j) {
    Event e;
    e.item_id = items[rng.below(items.size())];
    e.scene_id = rng.below(std::max<std::size_t>(ds.n_scenes, 1));
    e.behavior_type = kClick;
    e.timestamp = static_cast<std::int64_t>(j);
    m.events.push_back(e);
  }
  return m;
}

struct ProbeSet {
  Moveline history;
  std::size_t category = 0;
  std::vector<std::size_t> items;
  std::vector<bool> in_category;
};

// `per_side` probe items from the history's category and as many from
// other categories.
inline ProbeSet make_probe_set(const Dataset& ds, std::size_t category, std::size_t length, std::size_t per_side,
                               std::uint64_t seed) {
  if (ds.item_category.empty()) throw Error("argument", "probe: dataset has no item categories");
  Rng rng = Rng::derived(seed, "nif-probe");
  ProbeSet p;
  p.category = category;
  p.history = concentrated_moveline(ds, category, length, rng);
  std::vector<std::size_t> inside, outside;
  for (std::size_t i = 0; i < ds.item_category.size(); ++i) (ds.item_category[i] == category ? inside : outside).push_back(i);
  // Distinct items per side (partial Fisher-Yates).
  auto take = [&](std::vector<std::size_t>& pool, bool flag) {
    const std::size_t n = std::min(per_side, pool.size());
    for (std::size_t i = 0; i < n; ++i) {
      std::swap(pool[i], pool[i + rng.below(pool.size() - i)]);
      p.items.push_back(pool[i]);
      p.in_category.push_back(flag);
    }
  };
  take(inside, true);
  take(outside, false);
  return p;
}

// ------------------------------------------------------------ density

struct ScoreDensity {
  std::vector<double> bin_centers;
  std::vector<double> pos_mass;
  std::vector<double> neg_mass;
  double min = 0.0;
  double max = 0.0;
};

// Equal-width bins over the pooled min/max of both classes; each class
// histogram is normalised to mass 1.
inline ScoreDensity score_density(const std::vector<double>& scores, const std::vector<int>& labels, std::size_t bins) {
  if (bins < 2) throw Error("argument", "score_density: bins must be >= 2");
  if (scores.empty()) throw Error("argument", "score_density: empty split");
  if (scores.size() != labels.size()) throw DimensionError("score_density: scores and labels differ in length");
  ScoreDensity d;
  const auto [lo, hi] = std::minmax_element(scores.begin(), scores.end());
  d.min = *lo;
  d.max = *hi;
  const double width = (d.max - d.min) / static_cast<double>(bins);
  d.bin_centers.resize(bins);
  for (std::size_t b = 0; b < bins; ++b) d.bin_centers[b] = d.min + (static_cast<double>(b) + 0.5) * width;
  d.pos_mass.assign(bins, 0.0);
  d.neg_mass.assign(bins, 0.0);
  double n_pos = 0.0, n_neg = 0.0;
  for (std::size_t i = 0; i < scores.size(); ++i) {
    std::size_t b = 0;
    if (width > 0.0) b = std::min(bins - 1, static_cast<std::size_t>((scores[i] - d.min) / width));
    if (labels[i] != 0) {
      d.pos_mass[b] += 1.0;
      n_pos += 1.0;
    } else {
      d.neg_mass[b] += 1.0;
      n_neg += 1.0;
    }
  }
  if (n_pos == 0.0 || n_neg == 0.0) throw Error("argument", "score_density: both classes are required");
  for (std::size_t b = 0; b < bins; ++b) {
    d.pos_mass[b] /= n_pos;
    d.neg_mass[b] /= n_neg;
  }
  return d;
}

inline std::string density_csv(const ScoreDensity& d) {
  std::string out = "bin_center,pos_mass,neg_mass\n";
  for (std::size_t b = 0; b < d.bin_centers.size(); ++b) {
    out += detail::double_string(d.bin_centers[b]) + "," + detail::double_string(d.pos_mass[b]) + "," +
           detail::double_string(d.neg_mass[b]) + "\n";
  }
  return out;
}

inline std::string probe_csv(const Matrix& weights, const std::vector<std::size_t>& items,
                             const std::vector<std::size_t>& categories, const std::vector<bool>& in_category) {
  std::string out = "probe_item,category,in_category";
  for (std::size_t t = 0; t < weights.cols(); ++t) out += ",t" + std::to_string(t + 1);
  out += ",entropy\n";
  for (std::size_t i = 0; i < weights.rows(); ++i) {
    out += std::to_string(items[i]) + ",";
    out += (i < categories.size() ? std::to_string(categories[i]) : "") + ",";
    out += (i < in_category.size() ? (in_category[i] ? "1" : "0") : "");
    for (std::size_t t = 0; t < weights.cols(); ++t) out += "," + detail::double_string(weights(i, t));
    out += "," + detail::double_string(entropy(weights.row(i))) + "\n";
  }
  return out;
}

// ------------------------------------------------------------ ablation

enum class RowKind { pooled_mlp, target_attention, amen };

struct AblationRow {
  std::string name;
  std::string label;
  RowKind kind = RowKind::amen;
  std::function<void(RunConfig&)> modify;  // applied to the seed's config
};

inline std::vector<AblationRow> default_ablation_rows() {
  auto keep = [](RunConfig&) {};
  return {
      {"pooled_mlp_baseline", "Pooled-MLP baseline", RowKind::pooled_mlp, keep},
      {"target_attention_baseline", "Target-attention baseline", RowKind::target_attention, keep},
      {"amen_full", "AMEN (full)", RowKind::amen, keep},
      {"wo_nif", "w/o Next Interest Flow", RowKind::amen, [](RunConfig& c) { c.use_nif = false; }},
      {"wo_tsp", "w/o TSP", RowKind::amen, [](RunConfig& c) { c.use_tsp = false; }},
      {"wo_sem_align", "w/o Sem. Align.", RowKind::amen, [](RunConfig& c) { c.use_sem_align = false; }},
      {"wo_weight_init", "w/o Weight Init.", RowKind::amen, [](RunConfig& c) { c.use_weight_init = false; }},
      {"wo_diversity", "w/o Diversity Loss", RowKind::amen, [](RunConfig& c) { c.alpha = 0.0; }},
      {"wo_velocity", "w/o Velocity Loss", RowKind::amen, [](RunConfig& c) { c.beta = 0.0; }},
  };
}

inline constexpr const char* kBaselineRow = "pooled_mlp_baseline";

// Baselines get the same discriminator training budget as the full model
// (base epochs + fine-tuning epochs).
inline DiscriminatorConfig baseline_config(const RunConfig& cfg, RowKind kind) {
  DiscriminatorConfig d = base_model_config(cfg);
  d.pooling = kind == RowKind::pooled_mlp ? HistoryPooling::mean : HistoryPooling::attention;
  return d;
}

inline ordered_json stage2_summary(const Stage2Components& c) {
  ordered_json j;
  j["ce"] = c.ce;
  j["tsp"] = c.tsp;
  j["total"] = c.total;
  return j;
}

inline ordered_json stage1_summary(const Stage1Components& c) {
  ordered_json j;
  j["L_G"] = c.infonce;
  j["L_div"] = c.diversity;
  j["L_vel"] = c.velocity;
  j["total"] = c.total;
  return j;
}

inline ordered_json feature_flags(const RunConfig& c, RowKind kind) {
  ordered_json j;
  const bool amen = kind == RowKind::amen;
  j["nif"] = amen && c.use_nif;
  j["tsp"] = amen && c.use_tsp;
  j["sem_align"] = amen && c.use_nif && c.use_sem_align;
  j["weight_init"] = amen && c.use_weight_init;
  j["pooling"] = kind == RowKind::pooled_mlp ? "mean" : "attention";
  j["alpha"] = amen ? c.alpha : 0.0;
  j["beta"] = amen ? c.beta : 0.0;
  j["lambda"] = amen ? c.effective_lambda() : 0.0;
  return j;
}

template <typename T>
std::vector<double> epoch_totals(const std::vector<T>& means) {
  std::vector<double> out;
  for (const auto& m : means) out.push_back(m.total);
  return out;
}

// One seed of one row: trains what the row needs and scores the test split.
struct RowOutcome {
  ordered_json per_seed;  // {"seed","auc",...}
  double auc = 0.0;
  std::optional<Stage1Components> stage1;
  Stage2Components stage2;
};

// Everything one seed shares across rows.
class SeedContext {
 public:
  SeedContext(const RunConfig& cfg, std::size_t threads) : cfg_(cfg), threads_(threads), ds_(prepare_dataset(cfg)) {}

  const Dataset& dataset() const noexcept { return ds_; }
  const RunConfig& config() const noexcept { return cfg_; }

  const BaseResult& base() {
    if (!base_) base_ = train_base_model(ds_, cfg_);
    return *base_;
  }

  struct Stage1Entry {
    Generator generator;
    Stage1Result result;
    std::vector<FlowFeatures> train_flows;
    std::vector<FlowFeatures> test_flows;
  };

  // Stage 1 depends only on alpha, beta and weight initialisation.
  Stage1Entry& stage1(const RunConfig& c) {
    const std::string key = detail::double_string(c.alpha) + "|" + detail::double_string(c.beta) + "|" +
                            (c.use_weight_init ? "1" : "0");
    auto it = stage1_.find(key);
    if (it != stage1_.end()) return it->second;
    Generator gen = make_stage1_generator(c, c.use_weight_init ? &base().weights : nullptr);
    Stage1Result r = run_stage1(gen, ds_.train, c);
    auto train_flows = compute_flow_features(gen, ds_.train, c.tau, threads_);
    auto test_flows = compute_flow_features(gen, ds_.test, c.tau, threads_);
    return stage1_.emplace(key, Stage1Entry{std::move(gen), std::move(r), std::move(train_flows), std::move(test_flows)})
        .first->second;
  }

  RowOutcome run_row(const AblationRow& row) {
    RunConfig c = cfg_;
    row.modify(c);
    validate(c);
    RowOutcome out;
    out.per_seed["seed"] = c.seed;
    if (row.kind != RowKind::amen) {
      Discriminator disc(baseline_config(c, row.kind), derive_seed(c.seed, row.name + "-init"));
      DiscriminatorTrainSpec spec{row.name, c.epochs_base + c.epochs_stage2, c.lr_base, 0.0, c.pair_window()};
      const DiscriminatorTrainResult tr = train_discriminator(disc, ds_.train, nullptr, c, spec);
      const ScoredSplit scored = score_split(disc, nullptr, ds_.test, threads_);
      out.auc = auc(scored.prob, scored.labels);
      out.stage2 = tr.epoch_means.back();
      out.per_seed["auc"] = out.auc;
      out.per_seed["stage2_epoch_total"] = epoch_totals(tr.epoch_means);
      return out;
    }
    Stage1Entry& s1 = stage1(c);
    Discriminator disc = make_stage2_discriminator(c, c.use_weight_init ? &base().weights : nullptr,
                                                   c.use_weight_init ? &s1.result.weights : nullptr);
    Stage2Result s2 = run_stage2_with_flows(disc, s1, c);
    const ScoredSplit scored = score_split(disc, c.use_nif ? &s1.test_flows : nullptr, ds_.test, threads_);
    out.auc = auc(scored.prob, scored.labels);
    out.stage1 = s1.result.epoch_means.back();
    out.stage2 = s2.train.epoch_means.back();
    out.per_seed["auc"] = out.auc;
    out.per_seed["stage1_epoch_total"] = epoch_totals(s1.result.epoch_means);
    out.per_seed["stage2_epoch_total"] = epoch_totals(s2.train.epoch_means);
    const FlowStats fs = flow_stats(s1.test_flows, c.H, c.tau);
    out.per_seed["flow"] = {{"mean_head_similarity", fs.mean_head_similarity}, {"velocity_loss", fs.velocity_loss}};
    if (disc.config().use_calibration) {
      const CalibrationStats cs = calibration_stats(scored.calibration, scored.labels);
      out.per_seed["calibration"] = {
          {"pos_mean", cs.pos_mean}, {"neg_mean", cs.neg_mean}, {"gap", cs.gap}, {"support", cs.support}};
    }
    out.per_seed["diff_pair_calls"] = s2.train.diff_pair_calls;
    return out;
  }

 private:
  // run_stage2 with the cached train flows instead of recomputing them.
  Stage2Result run_stage2_with_flows(Discriminator& disc, const Stage1Entry& s1, const RunConfig& c) {
    Stage2Result r;
    r.generator_digest_before = s1.result.weights.digest();
    DiscriminatorTrainSpec spec{"stage2", c.epochs_stage2, c.lr_stage2, c.effective_lambda(), c.pair_window()};
    r.train = train_discriminator(disc, ds_.train, disc.config().use_flow ? &s1.train_flows : nullptr, c, spec);
    r.generator_digest_after = export_weights(s1.generator.params()).digest();
    r.generator_grad_norm = s1.generator.params().grad_norm();
    if (r.generator_digest_before != r.generator_digest_after || r.generator_grad_norm != 0.0) {
      throw Error("internal", "stage2 modified the frozen generator");
    }
    r.weights = export_weights(disc.params());
    return r;
  }

  RunConfig cfg_;
  std::size_t threads_;
  Dataset ds_;
  std::optional<BaseResult> base_;
  std::map<std::string, Stage1Entry> stage1_;
};

// Seed-averaged AUC per row and delta AUC against the pooled-MLP row.
// Output carries no timings, so equal inputs give equal bytes.
inline ordered_json run_ablation_suite(const RunConfig& cfg, const std::vector<std::size_t>& seeds,
                                       const std::vector<AblationRow>& rows = default_ablation_rows(),
                                       std::size_t threads = 1) {
  validate(cfg);
  if (seeds.empty()) throw ConfigError("eval_seeds", "need at least one seed");
  std::vector<std::vector<RowOutcome>> outcomes(rows.size());
  for (std::size_t seed : seeds) {
    RunConfig c = cfg;
    c.seed = seed;
    SeedContext ctx(c, threads);
    for (std::size_t r = 0; r < rows.size(); ++r) outcomes[r].push_back(ctx.run_row(rows[r]));
  }

  ordered_json report;
  report["baseline"] = kBaselineRow;
  report["seeds"] = seeds;
  report["bundle_layout_version"] = kBundleLayoutVersion;
  report["rows"] = ordered_json::array();
  std::optional<double> baseline_auc;
  for (std::size_t r = 0; r < rows.size(); ++r) {
    if (rows[r].name == kBaselineRow) {
      double m = 0.0;
      for (const auto& o : outcomes[r]) m += o.auc;
      baseline_auc = m / static_cast<double>(outcomes[r].size());
    }
  }
  for (std::size_t r = 0; r < rows.size(); ++r) {
    RunConfig c = cfg;
    rows[r].modify(c);
    const double n = static_cast<double>(seeds.size());
    double mean_auc = 0.0;
    Stage2Components s2;
    Stage1Components s1;
    bool has_s1 = false;
    ordered_json per_seed = ordered_json::array();
    std::vector<double> aucs;
    for (const auto& o : outcomes[r]) {
      mean_auc += o.auc;
      aucs.push_back(o.auc);
      s2.ce += o.stage2.ce / n;
      s2.tsp += o.stage2.tsp / n;
      s2.total += o.stage2.total / n;
      if (o.stage1) {
        has_s1 = true;
        s1.infonce += o.stage1->infonce / n;
        s1.diversity += o.stage1->diversity / n;
        s1.velocity += o.stage1->velocity / n;
        s1.total += o.stage1->total / n;
      }
      per_seed.push_back(o.per_seed);
    }
    mean_auc /= n;
    ordered_json row;
    row["name"] = rows[r].name;
    row["label"] = rows[r].label;
    row["auc"] = mean_auc;
    row["delta_auc"] = baseline_auc ? ordered_json(mean_auc - *baseline_auc) : ordered_json(nullptr);
    row["auc_per_seed"] = aucs;
    row["features"] = feature_flags(c, rows[r].kind);
    row["losses"] = {{"stage1", has_s1 ? stage1_summary(s1) : ordered_json(nullptr)}, {"stage2", stage2_summary(s2)}};
    row["per_seed"] = std::move(per_seed);
    report["rows"].push_back(std::move(row));
  }
  return report;
}

}  // namespace amen
