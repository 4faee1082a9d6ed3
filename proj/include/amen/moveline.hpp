#pragma once

// Movelines, training samples and the synthetic click world.
//
// The synthetic world: categories have unit centroids in a small latent
// space, items scatter around their category centroid, and every user
// carries a latent interest vector that walks toward a current target
// category (step size = drift_rate) while the target occasionally switches.
// Each step emits one event whose item is either an exploration draw
// (uniform) or an interest draw (category by softmax affinity, item uniform
// inside it). The click label of an event is
//   Bernoulli(sigmoid(gain * <interest, item> + offset + N(0, click_noise))).

#include <algorithm>
#include <cstdint>
#include <fstream>
#include <optional>
#include <sstream>
#include <string>
#include <unordered_set>
#include <vector>

#include "amen/error.hpp"
#include "amen/rng.hpp"
#include "amen/tensor.hpp"
#include "json.hpp"

namespace amen {

enum Behavior : std::uint32_t { kView = 0, kClick = 1, kPurchase = 2 };
inline constexpr std::size_t kBehaviorVocab = 3;

struct Event {
  std::size_t item_id = 0;
  std::size_t scene_id = 0;
  std::size_t behavior_type = kView;
  std::int64_t timestamp = 0;

  friend bool operator==(const Event&, const Event&) = default;
};

struct Moveline {
  std::vector<Event> events;

  std::size_t size() const noexcept { return events.size(); }
  bool empty() const noexcept { return events.empty(); }
  friend bool operator==(const Moveline&, const Moveline&) = default;
};

struct Sample {
  std::size_t user_id = 0;
  std::size_t target_item = 0;
  Moveline history;
  int label = 0;
  std::int64_t t0 = 0;
  std::vector<std::size_t> future_items;

  friend bool operator==(const Sample&, const Sample&) = default;
};

struct PairedSample {
  const Sample* target = nullptr;
  const Sample* diff = nullptr;
};

enum class SplitMode { by_user, by_time };

struct SynthConfig {
  std::size_t n_users = 2000;
  std::size_t n_items = 500;
  std::size_t n_categories = 20;
  std::size_t n_scenes = 4;
  std::size_t moveline_length = 30;
  std::size_t window = 4;  // T: future items per sample
  double drift_rate = 0.3;
  double click_noise = 0.5;
  std::uint64_t seed = 1;

  std::size_t samples_per_user = 6;
  std::size_t latent_dim = 8;
  double switch_prob = 0.1;
  double explore_prob = 0.2;
  double item_spread = 0.3;
  double interest_sharpness = 6.0;
  double affinity_gain = 4.0;
  double affinity_offset = -1.6;
  SplitMode split = SplitMode::by_user;
  double test_fraction = 0.2;
};

inline void validate(const SynthConfig& c) {
  auto need = [](bool ok, const char* field, const char* what) {
    if (!ok) throw ConfigError(field, what);
  };
  need(c.n_users >= 1, "n_users", "must be >= 1");
  need(c.n_items >= 2, "n_items", "must be >= 2");
  need(c.n_categories >= 1, "n_categories", "must be >= 1");
  need(c.n_categories <= c.n_items, "n_categories", "must not exceed n_items");
  need(c.n_scenes >= 1, "n_scenes", "must be >= 1");
  need(c.window >= 3, "T", "T >= 3 required by the dataset window");
  need(c.samples_per_user >= 1, "samples_per_user", "must be >= 1");
  need(c.moveline_length >= c.window + c.samples_per_user, "moveline_length",
       "must be >= T + samples_per_user");
  need(c.latent_dim >= 1, "latent_dim", "must be >= 1");
  need(c.drift_rate >= 0.0 && c.drift_rate <= 1.0, "drift_rate", "must lie in [0, 1]");
  need(c.click_noise >= 0.0, "click_noise", "must be >= 0");
  need(c.switch_prob >= 0.0 && c.switch_prob <= 1.0, "switch_prob", "must lie in [0, 1]");
  need(c.explore_prob >= 0.0 && c.explore_prob <= 1.0, "explore_prob", "must lie in [0, 1]");
  need(c.test_fraction >= 0.0 && c.test_fraction < 1.0, "test_fraction", "must lie in [0, 1)");
}

// Latent state kept next to the dataset for diagnostics.
struct UserTruth {
  std::size_t user_id = 0;
  std::vector<Vector> trajectory;  // interest vector per step
  std::vector<double> affinity;    // logit before noise, per step
  std::vector<std::size_t> target_category;
};

struct Dataset {
  std::size_t n_users = 0;
  std::size_t n_items = 0;
  std::size_t n_scenes = 0;
  std::size_t n_behaviors = kBehaviorVocab;
  std::size_t window = 0;
  std::vector<Sample> train;
  std::vector<Sample> test;

  // Ground truth, only present for generated data.
  std::vector<std::size_t> item_category;
  Matrix category_centroids;
  Matrix item_vectors;
  std::vector<UserTruth> truth;
};

namespace detail {

inline void normalize(Vector& v) {
  double n = 0.0;
  for (double x : v) n += x * x;
  n = std::sqrt(n);
  if (n > 0.0) {
    for (double& x : v) x /= n;
  }
}

}  // namespace detail

inline Dataset generate_synthetic_dataset(const SynthConfig& cfg) {
  validate(cfg);
  Dataset ds;
  ds.n_users = cfg.n_users;
  ds.n_items = cfg.n_items;
  ds.n_scenes = cfg.n_scenes;
  ds.window = cfg.window;

  Rng world = Rng::derived(cfg.seed, "synth-world");
  ds.category_centroids = Matrix(cfg.n_categories, cfg.latent_dim);
  for (std::size_t k = 0; k < cfg.n_categories; ++k) {
    Vector c(cfg.latent_dim);
    for (double& x : c) x = world.normal();
    detail::normalize(c);
    std::copy(c.begin(), c.end(), ds.category_centroids.row(k).begin());
  }
  ds.item_category.resize(cfg.n_items);
  ds.item_vectors = Matrix(cfg.n_items, cfg.latent_dim);
  std::vector<std::vector<std::size_t>> items_of(cfg.n_categories);
  for (std::size_t i = 0; i < cfg.n_items; ++i) {
    // Round-robin keeps every category populated.
    const std::size_t k = i % cfg.n_categories;
    ds.item_category[i] = k;
    items_of[k].push_back(i);
    Vector v = ds.category_centroids.row_copy(k);
    for (double& x : v) x += cfg.item_spread * world.normal();
    detail::normalize(v);
    std::copy(v.begin(), v.end(), ds.item_vectors.row(i).begin());
  }

  std::vector<bool> in_test(cfg.n_users, false);
  if (cfg.split == SplitMode::by_user) {
    std::vector<std::size_t> order(cfg.n_users);
    for (std::size_t u = 0; u < cfg.n_users; ++u) order[u] = u;
    Rng split = Rng::derived(cfg.seed, "synth-split");
    for (std::size_t i = order.size(); i > 1; --i) std::swap(order[i - 1], order[split.below(i)]);
    const auto n_test = static_cast<std::size_t>(std::floor(cfg.test_fraction * static_cast<double>(cfg.n_users)));
    for (std::size_t i = 0; i < n_test; ++i) in_test[order[i]] = true;
  }

  ds.truth.resize(cfg.n_users);
  for (std::size_t u = 0; u < cfg.n_users; ++u) {
    Rng rng = Rng::derived(cfg.seed, "synth-user", u);
    UserTruth& truth = ds.truth[u];
    truth.user_id = u;
    std::size_t target = rng.below(cfg.n_categories);
    Vector interest = ds.category_centroids.row_copy(target);
    std::vector<Event> events;
    events.reserve(cfg.moveline_length);
    for (std::size_t s = 0; s < cfg.moveline_length; ++s) {
      if (rng.bernoulli(cfg.switch_prob)) target = rng.below(cfg.n_categories);
      const auto centroid = ds.category_centroids.row(target);
      for (std::size_t j = 0; j < interest.size(); ++j) {
        interest[j] = (1.0 - cfg.drift_rate) * interest[j] + cfg.drift_rate * centroid[j];
      }
      std::size_t item;
      if (rng.bernoulli(cfg.explore_prob)) {
        item = rng.below(cfg.n_items);
      } else {
        Vector logits(cfg.n_categories);
        for (std::size_t k = 0; k < cfg.n_categories; ++k) {
          logits[k] = cfg.interest_sharpness * dot(interest, ds.category_centroids.row(k));
        }
        const Vector p = softmax(logits);
        double r = rng.uniform();
        std::size_t k = 0;
        while (k + 1 < p.size() && r >= p[k]) r -= p[k++];
        item = items_of[k][rng.below(items_of[k].size())];
      }
      const double affinity = cfg.affinity_gain * dot(interest, ds.item_vectors.row(item)) + cfg.affinity_offset;
      const double noise = cfg.click_noise > 0.0 ? rng.normal(0.0, cfg.click_noise) : 0.0;
      const bool click = rng.bernoulli(sigmoid(affinity + noise));
      std::size_t behavior = kView;
      if (click) behavior = rng.bernoulli(0.2) ? kPurchase : kClick;
      events.push_back(Event{item, rng.below(cfg.n_scenes), behavior, static_cast<std::int64_t>(s)});
      truth.trajectory.push_back(interest);
      truth.affinity.push_back(affinity);
      truth.target_category.push_back(target);
    }

    const std::size_t last_t0 = cfg.moveline_length - cfg.window;
    const std::size_t first_t0 = last_t0 + 1 - cfg.samples_per_user;
    for (std::size_t t0 = first_t0; t0 <= last_t0; ++t0) {
      Sample smp;
      smp.user_id = u;
      smp.t0 = events[t0].timestamp;
      smp.target_item = events[t0].item_id;
      smp.label = events[t0].behavior_type == kView ? 0 : 1;
      smp.history.events.assign(events.begin(), events.begin() + static_cast<std::ptrdiff_t>(t0));
      for (std::size_t t = 0; t < cfg.window; ++t) smp.future_items.push_back(events[t0 + t].item_id);
      bool test = in_test[u];
      if (cfg.split == SplitMode::by_time) test = cfg.test_fraction > 0.0 && t0 == last_t0;
      (test ? ds.test : ds.train).push_back(std::move(smp));
    }
  }
  return ds;
}

// Checks the Sample invariants against a vocabulary; throws on violation.
inline void validate_sample(const Sample& s, const Dataset& ds) {
  auto fail = [&](const std::string& what) {
    throw Error("data", "sample user " + std::to_string(s.user_id) + " t0 " + std::to_string(s.t0) + ": " + what);
  };
  if (s.user_id >= ds.n_users) fail("user_id out of range");
  if (s.target_item >= ds.n_items) fail("target_item out of range");
  if (s.label != 0 && s.label != 1) fail("label must be 0 or 1");
  if (s.future_items.size() != ds.window) fail("future_items must have exactly T entries");
  for (std::size_t id : s.future_items) {
    if (id >= ds.n_items) fail("future item out of range");
  }
  std::int64_t prev = INT64_MIN;
  for (const Event& e : s.history.events) {
    if (e.item_id >= ds.n_items) fail("history item out of range");
    if (e.scene_id >= ds.n_scenes) fail("history scene out of range");
    if (e.behavior_type >= ds.n_behaviors) fail("history behavior out of range");
    if (e.timestamp <= prev) fail("history timestamps not strictly increasing");
    if (e.timestamp >= s.t0) fail("history event not before t0");
    prev = e.timestamp;
  }
}

// k distinct item ids drawn uniformly from the vocabulary, excluding `positive`.
inline std::vector<std::size_t> sample_negatives(std::size_t positive, std::size_t k, std::size_t vocab, Rng& rng) {
  if (k == 0) throw Error("argument", "sample_negatives: k must be >= 1");
  if (k >= vocab) {
    throw Error("argument", "sample_negatives: k = " + std::to_string(k) + " must be below vocabulary size " +
                                std::to_string(vocab));
  }
  std::vector<std::size_t> out;
  out.reserve(k);
  if (2 * k < vocab) {
    std::unordered_set<std::size_t> seen;
    while (out.size() < k) {
      const std::size_t id = rng.below(vocab);
      if (id == positive || !seen.insert(id).second) continue;
      out.push_back(id);
    }
  } else {
    // Dense case: partial Fisher-Yates over the candidates.
    std::vector<std::size_t> pool;
    pool.reserve(vocab - 1);
    for (std::size_t i = 0; i < vocab; ++i) {
      if (i != positive) pool.push_back(i);
    }
    for (std::size_t i = 0; i < k; ++i) {
      std::swap(pool[i], pool[i + rng.below(pool.size() - i)]);
      out.push_back(pool[i]);
    }
  }
  return out;
}

// Negatives for horizon t of a sample.
inline std::vector<std::size_t> sample_negatives(const Sample& sample, std::size_t t, std::size_t k,
                                                 std::size_t vocab, Rng& rng) {
  if (t >= sample.future_items.size()) throw Error("argument", "sample_negatives: timestep outside window");
  return sample_negatives(sample.future_items[t], k, vocab, rng);
}

// In-batch alternative: distinct ids taken from `pool` (other samples'
// future items), excluding the positive. Returns fewer than k when the
// pool is too small.
inline std::vector<std::size_t> sample_in_batch_negatives(std::size_t positive, const std::vector<std::size_t>& pool,
                                                          std::size_t k, Rng& rng) {
  std::vector<std::size_t> candidates;
  std::unordered_set<std::size_t> seen;
  for (std::size_t id : pool) {
    if (id != positive && seen.insert(id).second) candidates.push_back(id);
  }
  std::sort(candidates.begin(), candidates.end());
  const std::size_t n = std::min(k, candidates.size());
  for (std::size_t i = 0; i < n; ++i) std::swap(candidates[i], candidates[i + rng.below(candidates.size() - i)]);
  candidates.resize(n);
  return candidates;
}

// Per-user index of a split for diff-pair lookup.
class SampleIndex {
 public:
  explicit SampleIndex(const std::vector<Sample>& samples) : samples_(&samples) {
    for (std::size_t i = 0; i < samples.size(); ++i) {
      const std::size_t u = samples[i].user_id;
      if (u >= by_user_.size()) by_user_.resize(u + 1);
      by_user_[u].push_back(i);
    }
  }

  const std::vector<Sample>& samples() const { return *samples_; }

  const std::vector<std::size_t>& of_user(std::size_t user) const {
    static const std::vector<std::size_t> none;
    return user < by_user_.size() ? by_user_[user] : none;
  }

 private:
  const std::vector<Sample>* samples_;
  std::vector<std::vector<std::size_t>> by_user_;
};

// Same user, different t0 within `window`, opposite label; uniform among
// the candidates. nullopt when there is none.
inline std::optional<PairedSample> sample_diff_pair(const SampleIndex& index, const Sample& target,
                                                    std::size_t window, Rng& rng) {
  std::vector<const Sample*> candidates;
  for (std::size_t i : index.of_user(target.user_id)) {
    const Sample& s = index.samples()[i];
    const std::int64_t gap = s.t0 > target.t0 ? s.t0 - target.t0 : target.t0 - s.t0;
    if (gap == 0 || gap > static_cast<std::int64_t>(window) || s.label == target.label) continue;
    candidates.push_back(&s);
  }
  if (candidates.empty()) return std::nullopt;
  return PairedSample{&target, candidates[rng.below(candidates.size())]};
}

// ---------------------------------------------------------------- JSONL

using ordered_json = nlohmann::ordered_json;

inline ordered_json sample_to_json(const Sample& s) {
  ordered_json j;
  j["user_id"] = s.user_id;
  j["t0"] = s.t0;
  j["target_item"] = s.target_item;
  j["label"] = s.label;
  ordered_json hist = ordered_json::array();
  for (const Event& e : s.history.events) {
    ordered_json ev;
    ev["item"] = e.item_id;
    ev["scene"] = e.scene_id;
    ev["behavior"] = e.behavior_type;
    ev["ts"] = e.timestamp;
    hist.push_back(std::move(ev));
  }
  j["history"] = std::move(hist);
  j["future_items"] = s.future_items;
  return j;
}

inline Sample sample_from_json(const nlohmann::json& j) {
  Sample s;
  s.user_id = j.at("user_id").get<std::size_t>();
  s.t0 = j.at("t0").get<std::int64_t>();
  s.target_item = j.at("target_item").get<std::size_t>();
  s.label = j.at("label").get<int>();
  for (const auto& ev : j.at("history")) {
    s.history.events.push_back(Event{ev.at("item").get<std::size_t>(), ev.at("scene").get<std::size_t>(),
                                     ev.at("behavior").get<std::size_t>(), ev.at("ts").get<std::int64_t>()});
  }
  s.future_items = j.at("future_items").get<std::vector<std::size_t>>();
  return s;
}

inline std::string serialize_samples(const std::vector<Sample>& samples) {
  std::string out;
  for (const Sample& s : samples) {
    out += sample_to_json(s).dump();
    out += '\n';
  }
  return out;
}

inline std::vector<Sample> parse_samples(std::istream& in, const std::string& origin) {
  std::vector<Sample> out;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    try {
      out.push_back(sample_from_json(nlohmann::json::parse(line)));
    } catch (const nlohmann::json::exception& e) {
      throw Error("data", origin + ":" + std::to_string(lineno) + ": " + e.what());
    }
  }
  return out;
}

inline void write_text_file(const std::string& path, const std::string& text) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw Error("io", "cannot open " + path + " for writing");
  f << text;
  if (!f) throw Error("io", "failed writing " + path);
}

inline std::string read_text_file(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw Error("io", "cannot open " + path);
  std::ostringstream ss;
  ss << f.rdbuf();
  return ss.str();
}

inline std::vector<Sample> load_samples(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw Error("io", "cannot open " + path);
  return parse_samples(f, path);
}

inline std::string serialize_truth(const Dataset& ds) {
  std::string out;
  for (const UserTruth& t : ds.truth) {
    ordered_json j;
    j["user_id"] = t.user_id;
    j["trajectory"] = t.trajectory;
    j["affinity"] = t.affinity;
    j["target_category"] = t.target_category;
    out += j.dump();
    out += '\n';
  }
  return out;
}

inline double base_click_rate(const std::vector<Sample>& samples) {
  if (samples.empty()) return 0.0;
  double pos = 0.0;
  for (const Sample& s : samples) pos += s.label;
  return pos / static_cast<double>(samples.size());
}

}  // namespace amen
