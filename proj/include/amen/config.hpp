#pragma once

// RunConfig and its flat `key = value` text format. Precedence is
// defaults < file < overrides. Every field is registered once in
// config_fields(), which drives parsing, --help listings and the echo into
// run manifests.

#include <charconv>
#include <cstdint>
#include <functional>
#include <sstream>
#include <string>
#include <vector>

#include "amen/discriminator.hpp"
#include "amen/error.hpp"
#include "amen/generator.hpp"
#include "amen/moveline.hpp"
#include "json.hpp"

namespace amen {

enum class NegativeMode { uniform, in_batch };

struct RunConfig {
  std::uint64_t seed = 1;

  // synthetic world
  std::size_t n_users = 2000;
  std::size_t n_items = 500;
  std::size_t n_categories = 20;
  std::size_t n_scenes = 4;
  std::size_t moveline_length = 30;
  std::size_t samples_per_user = 6;
  std::size_t latent_dim = 8;
  double drift_rate = 0.3;
  double switch_prob = 0.1;
  double click_noise = 0.5;
  double explore_prob = 0.2;
  double item_spread = 0.3;
  double interest_sharpness = 6.0;
  double affinity_gain = 4.0;
  double affinity_offset = -1.6;
  SplitMode split = SplitMode::by_user;
  double test_fraction = 0.2;

  // objectives
  std::size_t T = 4;
  std::size_t tsp_window = 0;  // 0: same as T
  std::size_t H = 4;
  std::size_t d_head = 8;
  double tau = 0.07;
  double alpha = 0.1;
  double beta = 0.1;
  double lambda = 0.5;
  std::size_t k = 16;
  NegativeMode negative_mode = NegativeMode::uniform;

  // optimisation
  double lr_base = 0.05;
  double lr_stage1 = 0.05;
  double lr_stage2 = 0.05;
  std::size_t epochs_base = 5;
  std::size_t epochs_stage1 = 5;
  std::size_t epochs_stage2 = 5;
  std::size_t batch_size = 64;
  double grad_clip = 5.0;  // global-norm clip per batch; 0 disables
  double embedding_lr_scale = 16.0;  // step multiplier of the sparse embedding tables

  // architecture
  std::size_t encoder_blocks = 2;
  std::size_t encoder_heads = 1;
  std::size_t max_history = 20;
  std::size_t ffn_hidden = 0;
  std::vector<std::size_t> merge_hidden{128, 64};
  std::vector<std::size_t> calib_hidden{16};
  bool use_positions = true;
  double align_scale = 0.0;
  bool use_user_profile = true;
  bool use_interactions = true;

  // ablation switches
  bool use_nif = true;
  bool use_tsp = true;
  bool use_sem_align = true;
  bool use_weight_init = true;
  bool transfer_attention = false;

  // files and evaluation
  std::string train_path;
  std::string test_path;
  std::string base_checkpoint;
  std::string generator_checkpoint;
  std::string discriminator_checkpoint;
  bool write_ground_truth = false;
  std::size_t threads = 1;
  std::vector<std::size_t> eval_seeds{1, 2, 3};
  std::size_t density_bins = 20;
  std::vector<std::size_t> probe_items;
  std::size_t probe_category = 0;
  std::size_t probe_per_side = 4;

  std::size_t dim() const noexcept { return H * d_head; }
  std::size_t pair_window() const noexcept { return tsp_window == 0 ? T : tsp_window; }
  // lambda as applied; zero when TSP is ablated.
  double effective_lambda() const noexcept { return use_tsp ? lambda : 0.0; }
};

namespace detail {

inline std::string trim(std::string s) {
  const auto b = s.find_first_not_of(" \t\r\n");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t\r\n");
  s = s.substr(b, e - b + 1);
  if (s.size() >= 2 && (s.front() == '"' || s.front() == '\'') && s.back() == s.front()) s = s.substr(1, s.size() - 2);
  return s;
}

inline std::uint64_t parse_u64(const std::string& key, const std::string& v) {
  std::uint64_t out = 0;
  auto [ptr, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
  if (ec != std::errc{} || ptr != v.data() + v.size()) throw ConfigError(key, "expected a non-negative integer, got '" + v + "'");
  return out;
}

inline double parse_double(const std::string& key, const std::string& v) {
  try {
    std::size_t pos = 0;
    const double out = std::stod(v, &pos);
    if (pos != v.size()) throw std::invalid_argument(v);
    return out;
  } catch (const std::exception&) {
    throw ConfigError(key, "expected a number, got '" + v + "'");
  }
}

inline bool parse_bool(const std::string& key, const std::string& v) {
  if (v == "true" || v == "1") return true;
  if (v == "false" || v == "0") return false;
  throw ConfigError(key, "expected true or false, got '" + v + "'");
}

inline std::vector<std::size_t> parse_list(const std::string& key, std::string v) {
  if (!v.empty() && v.front() == '[' && v.back() == ']') v = v.substr(1, v.size() - 2);
  std::vector<std::size_t> out;
  std::stringstream ss(v);
  std::string item;
  while (std::getline(ss, item, ',')) {
    item = trim(item);
    if (!item.empty()) out.push_back(static_cast<std::size_t>(parse_u64(key, item)));
  }
  return out;
}

inline std::string list_string(const std::vector<std::size_t>& v) {
  std::string s;
  for (std::size_t i = 0; i < v.size(); ++i) s += (i ? "," : "") + std::to_string(v[i]);
  return s;
}

inline std::string double_string(double v) {
  std::ostringstream ss;
  ss.precision(17);
  ss << v;
  return ss.str();
}

}  // namespace detail

struct ConfigField {
  std::string name;
  std::string help;
  std::function<void(RunConfig&, const std::string&)> set;
  std::function<nlohmann::ordered_json(const RunConfig&)> get;
};

inline const std::vector<ConfigField>& config_fields() {
  using nlohmann::ordered_json;
  static const std::vector<ConfigField> fields = [] {
    std::vector<ConfigField> f;
    auto size_field = [&f](std::string name, std::string help, std::size_t RunConfig::*m) {
      f.push_back({name, std::move(help),
                   [m, name](RunConfig& c, const std::string& v) { c.*m = static_cast<std::size_t>(detail::parse_u64(name, v)); },
                   [m](const RunConfig& c) { return ordered_json(c.*m); }});
    };
    auto double_field = [&f](std::string name, std::string help, double RunConfig::*m) {
      f.push_back({name, std::move(help), [m, name](RunConfig& c, const std::string& v) { c.*m = detail::parse_double(name, v); },
                   [m](const RunConfig& c) { return ordered_json(c.*m); }});
    };
    auto bool_field = [&f](std::string name, std::string help, bool RunConfig::*m) {
      f.push_back({name, std::move(help), [m, name](RunConfig& c, const std::string& v) { c.*m = detail::parse_bool(name, v); },
                   [m](const RunConfig& c) { return ordered_json(c.*m); }});
    };
    auto string_field = [&f](std::string name, std::string help, std::string RunConfig::*m) {
      f.push_back({name, std::move(help), [m](RunConfig& c, const std::string& v) { c.*m = v; },
                   [m](const RunConfig& c) { return ordered_json(c.*m); }});
    };
    auto list_field = [&f](std::string name, std::string help, std::vector<std::size_t> RunConfig::*m) {
      f.push_back({name, std::move(help), [m, name](RunConfig& c, const std::string& v) { c.*m = detail::parse_list(name, v); },
                   [m](const RunConfig& c) { return ordered_json(c.*m); }});
    };

    f.push_back({"seed", "master seed for every random stream",
                 [](RunConfig& c, const std::string& v) { c.seed = detail::parse_u64("seed", v); },
                 [](const RunConfig& c) { return ordered_json(c.seed); }});
    size_field("n_users", "synthetic users", &RunConfig::n_users);
    size_field("n_items", "item vocabulary size", &RunConfig::n_items);
    size_field("n_categories", "synthetic item categories", &RunConfig::n_categories);
    size_field("n_scenes", "scene vocabulary size", &RunConfig::n_scenes);
    size_field("moveline_length", "events per user moveline", &RunConfig::moveline_length);
    size_field("samples_per_user", "samples cut from the end of each moveline", &RunConfig::samples_per_user);
    size_field("latent_dim", "dimension of the synthetic interest space", &RunConfig::latent_dim);
    double_field("drift_rate", "interest step size toward the target category, in [0,1]", &RunConfig::drift_rate);
    double_field("switch_prob", "per-step probability of a new target category", &RunConfig::switch_prob);
    double_field("click_noise", "stddev of the click logit noise", &RunConfig::click_noise);
    double_field("explore_prob", "probability an event item is drawn uniformly", &RunConfig::explore_prob);
    double_field("item_spread", "item scatter around the category centroid", &RunConfig::item_spread);
    double_field("interest_sharpness", "softmax sharpness of interest-driven category draws", &RunConfig::interest_sharpness);
    double_field("affinity_gain", "click logit gain on interest-item affinity", &RunConfig::affinity_gain);
    double_field("affinity_offset", "click logit offset", &RunConfig::affinity_offset);
    f.push_back({"split", "train/test split: by-user or by-time",
                 [](RunConfig& c, const std::string& v) {
                   if (v == "by-user") c.split = SplitMode::by_user;
                   else if (v == "by-time") c.split = SplitMode::by_time;
                   else throw ConfigError("split", "expected by-user or by-time, got '" + v + "'");
                 },
                 [](const RunConfig& c) { return ordered_json(c.split == SplitMode::by_user ? "by-user" : "by-time"); }});
    double_field("test_fraction", "fraction of users (by-user) held out for test", &RunConfig::test_fraction);

    size_field("T", "prediction window: flow states per sample", &RunConfig::T);
    size_field("tsp_window", "diff-pair window (0: same as T)", &RunConfig::tsp_window);
    size_field("H", "flow heads", &RunConfig::H);
    size_field("d_head", "dimension of each flow head", &RunConfig::d_head);
    double_field("tau", "similarity temperature", &RunConfig::tau);
    double_field("alpha", "weight of the diversity loss", &RunConfig::alpha);
    double_field("beta", "weight of the velocity loss", &RunConfig::beta);
    double_field("lambda", "weight of the TSP loss", &RunConfig::lambda);
    size_field("k", "negatives per horizon", &RunConfig::k);
    f.push_back({"negative_mode", "negative sampling: uniform or in-batch",
                 [](RunConfig& c, const std::string& v) {
                   if (v == "uniform") c.negative_mode = NegativeMode::uniform;
                   else if (v == "in-batch") c.negative_mode = NegativeMode::in_batch;
                   else throw ConfigError("negative_mode", "expected uniform or in-batch, got '" + v + "'");
                 },
                 [](const RunConfig& c) { return ordered_json(c.negative_mode == NegativeMode::uniform ? "uniform" : "in-batch"); }});

    double_field("lr_base", "SGD learning rate of the base model", &RunConfig::lr_base);
    double_field("lr_stage1", "SGD learning rate of pre-training", &RunConfig::lr_stage1);
    double_field("lr_stage2", "SGD learning rate of fine-tuning", &RunConfig::lr_stage2);
    size_field("epochs_base", "epochs of the base model", &RunConfig::epochs_base);
    size_field("epochs_stage1", "epochs of pre-training", &RunConfig::epochs_stage1);
    size_field("epochs_stage2", "epochs of fine-tuning", &RunConfig::epochs_stage2);
    size_field("batch_size", "samples per SGD step", &RunConfig::batch_size);
    double_field("grad_clip", "global gradient-norm clip per step (0 disables)", &RunConfig::grad_clip);
    double_field("embedding_lr_scale", "learning-rate multiplier of embedding tables", &RunConfig::embedding_lr_scale);

    size_field("encoder_blocks", "generator encoder blocks", &RunConfig::encoder_blocks);
    size_field("encoder_heads", "attention heads per encoder block", &RunConfig::encoder_heads);
    size_field("max_history", "most recent events kept from a moveline", &RunConfig::max_history);
    size_field("ffn_hidden", "generator feed-forward width (0: d)", &RunConfig::ffn_hidden);
    list_field("merge_hidden", "hidden widths of the merge MLP", &RunConfig::merge_hidden);
    list_field("calib_hidden", "hidden widths of the calibration net", &RunConfig::calib_hidden);
    bool_field("use_positions", "add recency position embeddings", &RunConfig::use_positions);
    double_field("align_scale", "alignment attention scale (0: 1/sqrt(d))", &RunConfig::align_scale);
    bool_field("use_user_profile", "user id embedding in the click model", &RunConfig::use_user_profile);
    bool_field("use_interactions", "elementwise target products in the click model", &RunConfig::use_interactions);

    bool_field("use_nif", "feed flow features to the click model", &RunConfig::use_nif);
    bool_field("use_tsp", "TSP loss and calibration term", &RunConfig::use_tsp);
    bool_field("use_sem_align", "attend over the flow (false: plain mean)", &RunConfig::use_sem_align);
    bool_field("use_weight_init", "initialise across stages from trained weights", &RunConfig::use_weight_init);
    bool_field("transfer_attention", "also copy the base model's interest attention into every encoder block",
               &RunConfig::transfer_attention);

    string_field("train_path", "train split JSONL (empty: generate)", &RunConfig::train_path);
    string_field("test_path", "test split JSONL (empty: generate)", &RunConfig::test_path);
    string_field("base_checkpoint", "base model checkpoint stem", &RunConfig::base_checkpoint);
    string_field("generator_checkpoint", "generator checkpoint stem", &RunConfig::generator_checkpoint);
    string_field("discriminator_checkpoint", "click model checkpoint stem", &RunConfig::discriminator_checkpoint);
    bool_field("write_ground_truth", "also write latent trajectories", &RunConfig::write_ground_truth);
    size_field("threads", "worker threads for evaluation", &RunConfig::threads);
    list_field("eval_seeds", "seeds of the ablation suite", &RunConfig::eval_seeds);
    size_field("density_bins", "histogram bins of the score density", &RunConfig::density_bins);
    list_field("probe_items", "probe items for the flow probe (empty: drawn around probe_category)", &RunConfig::probe_items);
    size_field("probe_category", "category of the synthetic probe moveline", &RunConfig::probe_category);
    size_field("probe_per_side", "automatic probe items inside and outside the category", &RunConfig::probe_per_side);
    return f;
  }();
  return fields;
}

inline void set_config_value(RunConfig& cfg, const std::string& key, const std::string& value) {
  for (const auto& f : config_fields()) {
    if (f.name == key) {
      f.set(cfg, detail::trim(value));
      return;
    }
  }
  throw ConfigError(key, "unknown config key");
}

// `key=value`, as given to --set.
inline void apply_override(RunConfig& cfg, const std::string& assignment) {
  const auto eq = assignment.find('=');
  if (eq == std::string::npos) throw ConfigError(assignment, "override must look like key=value");
  set_config_value(cfg, detail::trim(assignment.substr(0, eq)), assignment.substr(eq + 1));
}

inline void apply_config_text(RunConfig& cfg, const std::string& text, const std::string& origin) {
  std::istringstream in(text);
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    const auto hash = line.find('#');
    if (hash != std::string::npos) line = line.substr(0, hash);
    line = detail::trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) {
      throw ConfigError(origin + ":" + std::to_string(lineno), "expected key = value");
    }
    set_config_value(cfg, detail::trim(line.substr(0, eq)), line.substr(eq + 1));
  }
}

inline RunConfig load_config(const std::string& path, const std::vector<std::string>& overrides = {}) {
  RunConfig cfg;
  apply_config_text(cfg, read_text_file(path), path);
  for (const auto& o : overrides) apply_override(cfg, o);
  return cfg;
}

inline nlohmann::ordered_json config_to_json(const RunConfig& cfg) {
  nlohmann::ordered_json j;
  for (const auto& f : config_fields()) j[f.name] = f.get(cfg);
  return j;
}

inline SynthConfig synth_config(const RunConfig& c) {
  SynthConfig s;
  s.n_users = c.n_users;
  s.n_items = c.n_items;
  s.n_categories = c.n_categories;
  s.n_scenes = c.n_scenes;
  s.moveline_length = c.moveline_length;
  s.window = c.T;
  s.drift_rate = c.drift_rate;
  s.click_noise = c.click_noise;
  s.seed = c.seed;
  s.samples_per_user = c.samples_per_user;
  s.latent_dim = c.latent_dim;
  s.switch_prob = c.switch_prob;
  s.explore_prob = c.explore_prob;
  s.item_spread = c.item_spread;
  s.interest_sharpness = c.interest_sharpness;
  s.affinity_gain = c.affinity_gain;
  s.affinity_offset = c.affinity_offset;
  s.split = c.split;
  s.test_fraction = c.test_fraction;
  return s;
}

inline void validate(const RunConfig& c) {
  if (c.beta > 0.0 && c.T < 3) throw ConfigError("T", "T ≥ 3 required for velocity loss (beta > 0)");
  validate(synth_config(c));
  if (c.H < 2) throw ConfigError("H", "H ≥ 2 required for the diversity loss");
  if (c.d_head < 1) throw ConfigError("d_head", "must be >= 1");
  if (!(c.tau > 0.0)) throw ConfigError("tau", "must be > 0");
  if (c.alpha < 0.0) throw ConfigError("alpha", "must be >= 0");
  if (c.beta < 0.0) throw ConfigError("beta", "must be >= 0");
  if (c.lambda < 0.0) throw ConfigError("lambda", "must be >= 0");
  if (c.k < 1) throw ConfigError("k", "must be >= 1");
  if (c.k >= c.n_items) throw ConfigError("k", "must be below n_items");
  if (!(c.lr_base > 0.0)) throw ConfigError("lr_base", "must be > 0");
  if (!(c.lr_stage1 > 0.0)) throw ConfigError("lr_stage1", "must be > 0");
  if (!(c.lr_stage2 > 0.0)) throw ConfigError("lr_stage2", "must be > 0");
  if (c.batch_size < 1) throw ConfigError("batch_size", "must be >= 1");
  if (c.grad_clip < 0.0) throw ConfigError("grad_clip", "must be >= 0");
  if (!(c.embedding_lr_scale > 0.0)) throw ConfigError("embedding_lr_scale", "must be > 0");
  if (c.encoder_heads < 1 || c.dim() % c.encoder_heads != 0) throw ConfigError("encoder_heads", "must divide H * d_head");
  if (c.max_history < 1) throw ConfigError("max_history", "must be >= 1");
  if (c.threads < 1) throw ConfigError("threads", "must be >= 1");
  if (c.density_bins < 2) throw ConfigError("density_bins", "must be >= 2");
  if (c.eval_seeds.empty()) throw ConfigError("eval_seeds", "need at least one seed");
}

inline GeneratorConfig generator_config(const RunConfig& c) {
  GeneratorConfig g;
  g.n_items = c.n_items;
  g.n_scenes = c.n_scenes;
  g.horizon = c.T;
  g.flow_heads = c.H;
  g.head_dim = c.d_head;
  g.blocks = c.encoder_blocks;
  g.encoder_heads = c.encoder_heads;
  g.max_history = c.max_history;
  g.ffn_hidden = c.ffn_hidden;
  g.use_positions = c.use_positions;
  return g;
}

// Click-model layout for the full model under the config's ablation flags.
inline DiscriminatorConfig discriminator_config(const RunConfig& c) {
  DiscriminatorConfig d;
  d.n_items = c.n_items;
  d.n_scenes = c.n_scenes;
  d.n_users = c.n_users;
  d.emb_dim = c.dim();
  d.flow_dim = c.dim();
  d.horizon = c.T;
  d.tau = c.tau;
  d.use_flow = c.use_nif;
  d.use_calibration = c.use_tsp;
  d.flow_summary = c.use_sem_align ? FlowSummary::attention : FlowSummary::mean;
  d.max_history = c.max_history;
  d.use_positions = c.use_positions;
  d.merge_hidden = c.merge_hidden;
  d.calib_hidden = c.calib_hidden;
  d.align_scale = c.align_scale;
  d.use_user_profile = c.use_user_profile;
  d.use_interactions = c.use_interactions;
  return d;
}

}  // namespace amen
