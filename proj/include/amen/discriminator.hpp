#pragma once

// Stage-2 click model: target-conditioned interest pooling over the
// history, semantic alignment of the target against the generated flow,
// a merge MLP over the feature bundle, and a calibration net whose score
// is added to the main logit and trained by the pairwise TSP loss.

#include <cmath>
#include <optional>
#include <string>
#include <vector>

#include "amen/autodiff.hpp"
#include "amen/embedding.hpp"
#include "amen/generator.hpp"
#include "amen/moveline.hpp"
#include "amen/nn.hpp"

namespace amen {

// Order of the merge-MLP input. Bump when it changes.
inline constexpr int kBundleLayoutVersion = 1;

enum class FlowSummary { attention, mean };
enum class HistoryPooling { attention, mean };

// Generator-derived inputs of one sample; constants during fine-tuning.
struct FlowFeatures {
  Matrix flow;  // T x d
  double mean_diversity_score = 0.0;
  Vector v_first;  // f_{t0+1} - f_{t0}
};

inline FlowFeatures flow_features(const NextInterestFlow& flow, double tau) {
  FlowFeatures f;
  f.flow = flow.states;
  f.mean_diversity_score = mean_diversity_score(flow, tau);
  f.v_first = flow.horizon() >= 2 ? velocity(flow).front() : Vector(flow.dim(), 0.0);
  return f;
}

// Concatenated in this order: a_flow, h_user, mean S_div, v_first, e_t0,
// user profile, h_user * e_t0, a_flow * q / tau (q: the alignment query,
// tau: the pre-training temperature, so the product sums to the flow's
// InfoNCE logit for the target). Flow
// entries are absent without flow features; the products and the profile
// are switchable.
struct FeatureBundle {
  std::optional<Vector> a_flow;
  Vector h_user;
  std::optional<double> mean_diversity_score;
  std::optional<Vector> v_first;
  Vector target_embedding;
  std::optional<Vector> user_profile;
  std::optional<Vector> interest_match;
  std::optional<Vector> flow_match;

  Vector concat() const {
    Vector z;
    auto append = [&z](const Vector& v) { z.insert(z.end(), v.begin(), v.end()); };
    if (a_flow) append(*a_flow);
    append(h_user);
    if (mean_diversity_score) z.push_back(*mean_diversity_score);
    if (v_first) append(*v_first);
    append(target_embedding);
    if (user_profile) append(*user_profile);
    if (interest_match) append(*interest_match);
    if (flow_match) append(*flow_match);
    return z;
  }
};

inline Vector hadamard(const Vector& a, const Vector& b) {
  if (a.size() != b.size()) throw DimensionError("hadamard: length mismatch");
  Vector out(a.size());
  for (std::size_t i = 0; i < a.size(); ++i) out[i] = a[i] * b[i];
  return out;
}

// attention(query = target, keys = values = flow states, scale).
inline AttentionResult semantic_alignment(std::span<const double> target_emb, const Matrix& flow, double scale = 0.0) {
  if (flow.rows() == 0) throw DimensionError("semantic_alignment: empty flow");
  if (scale == 0.0) scale = 1.0 / std::sqrt(static_cast<double>(flow.cols()));
  return attention(target_emb, flow, flow, scale);
}

// -log sigmoid(sign(y1) * (c1 - c0)), sign = +1 for a click, -1 otherwise.
inline double tsp_loss(double c_t0, double c_t1, int y_t1) {
  const double sign = y_t1 != 0 ? 1.0 : -1.0;
  return softplus(-sign * (c_t1 - c_t0));
}

inline Var tsp_loss(Var c_t0, Var c_t1, int y_t1) {
  const double sign = y_t1 != 0 ? 1.0 : -1.0;
  return ad::softplus(ad::scale(ad::sub(c_t1, c_t0), -sign));
}

inline double binary_cross_entropy(int y, double prob) {
  return y != 0 ? -std::log(prob) : -std::log1p(-prob);
}

// CE of sigmoid(logit) against y without forming the probability.
inline Var bce_with_logits(Var logit, int y) {
  return ad::softplus(y != 0 ? ad::scale(logit, -1.0) : logit);
}

struct Stage2Components {
  double total = 0.0;
  double ce = 0.0;
  double tsp = 0.0;
  bool paired = false;
};

// total = CE(y, y_hat) + lambda * tsp; an absent tsp term contributes 0.
inline Stage2Components stage2_loss(double y_hat, int y, std::optional<double> tsp_term, double lambda) {
  if (!(y_hat > 0.0 && y_hat < 1.0)) throw Error("argument", "stage2_loss: prediction must lie in (0, 1)");
  Stage2Components c;
  c.ce = binary_cross_entropy(y, y_hat);
  c.paired = tsp_term.has_value();
  c.tsp = tsp_term.value_or(0.0);
  c.total = c.ce + lambda * c.tsp;
  return c;
}

struct DiscriminatorConfig {
  std::size_t n_items = 500;
  std::size_t n_scenes = 4;
  std::size_t n_behaviors = kBehaviorVocab;
  std::size_t n_users = 2000;
  std::size_t emb_dim = 32;
  std::size_t flow_dim = 32;
  std::size_t horizon = 4;
  double tau = 0.07;  // for the diversity score feature
  bool use_flow = true;
  bool use_calibration = true;
  FlowSummary flow_summary = FlowSummary::attention;
  HistoryPooling pooling = HistoryPooling::attention;
  std::size_t max_history = 20;
  bool use_positions = true;
  std::vector<std::size_t> merge_hidden{128, 64};
  std::vector<std::size_t> calib_hidden{16};
  double align_scale = 0.0;  // 0 means 1/sqrt(flow_dim)
  bool use_user_profile = true;
  bool use_interactions = true;  // h_user * e_t0 (and a_flow * e_t0) appended

  std::size_t bundle_dim() const noexcept {
    std::size_t n = 2 * emb_dim;
    if (use_user_profile) n += emb_dim;
    if (use_interactions) n += emb_dim;
    if (use_flow) n += 2 * flow_dim + 1;
    if (use_flow && use_interactions) n += flow_dim;
    return n;
  }
};

struct DiscriminatorOutput {
  Var logit_main;
  std::optional<Var> calibration;
  Var logit;
};

class Discriminator {
 public:
  Discriminator(const DiscriminatorConfig& cfg, std::uint64_t seed) : cfg_(cfg) {
    if (cfg_.emb_dim < 1) throw ConfigError("emb_dim", "must be >= 1");
    if (cfg_.use_flow && cfg_.flow_dim < 1) throw ConfigError("flow_dim", "must be >= 1");
    Rng rng = Rng::derived(seed, "discriminator-init");
    const std::size_t e = cfg_.emb_dim;
    item_ = EmbeddingTable::create(params_, "item_embedding", cfg_.n_items, e, rng);
    scene_ = EmbeddingTable::create(params_, "scene_embedding", cfg_.n_scenes, e, rng);
    behavior_ = EmbeddingTable::create(params_, "behavior_embedding", cfg_.n_behaviors, e, rng);
    user_ = EmbeddingTable::create(params_, "user_embedding", cfg_.n_users, e, rng);
    position_ = EmbeddingTable::create(params_, "disc.position_embedding", cfg_.max_history, e, rng);
    interest_ = make_pool("interest", rng);
    calib_pool_ = make_pool("calib", rng);
    std::vector<std::size_t> calib_dims{2 * e};
    calib_dims.insert(calib_dims.end(), cfg_.calib_hidden.begin(), cfg_.calib_hidden.end());
    calib_dims.push_back(1);
    calib_mlp_ = Mlp::create(params_, "calib.mlp", calib_dims, rng);
    std::vector<std::size_t> merge_dims{cfg_.bundle_dim()};
    merge_dims.insert(merge_dims.end(), cfg_.merge_hidden.begin(), cfg_.merge_hidden.end());
    merge_dims.push_back(1);
    merge_ = Mlp::create(params_, "merge", merge_dims, rng);
    if (cfg_.use_flow && cfg_.flow_dim != e) {
      align_proj_ = params_.add("align.proj", xavier_uniform(e, cfg_.flow_dim, rng));
    }
  }

  const DiscriminatorConfig& config() const noexcept { return cfg_; }
  ParameterSet& params() noexcept { return params_; }
  const ParameterSet& params() const noexcept { return params_; }
  const EmbeddingTable& item_table() const noexcept { return item_; }
  const Mlp& calibration_net() const noexcept { return calib_mlp_; }
  const Mlp& merge_net() const noexcept { return merge_; }
  ParamId interest_default() const noexcept { return interest_.fallback; }

  double align_scale() const {
    return cfg_.align_scale > 0.0 ? cfg_.align_scale : 1.0 / std::sqrt(static_cast<double>(cfg_.flow_dim));
  }

  DiscriminatorOutput forward(Tape& tape, const Sample& s, const FlowFeatures* flow) {
    return forward_impl(*this, tape, s, flow);
  }
  DiscriminatorOutput forward(Tape& tape, const Sample& s, const FlowFeatures* flow) const {
    return forward_impl(*this, tape, s, flow);
  }

  Var calibration(Tape& tape, std::size_t target_item, const Moveline& history) {
    return calibration_impl(*this, tape, target_item, history);
  }
  Var calibration(Tape& tape, std::size_t target_item, const Moveline& history) const {
    return calibration_impl(*this, tape, target_item, history);
  }

  // ------------------------------------------------ inference helpers

  Vector user_interest_repr(std::size_t target_item, const Moveline& history) const {
    Tape tape(false);
    Var e = item_.gather(tape, params_, {target_item});
    return pool_impl(*this, tape, interest_, e, history).value().row_copy(0);
  }

  double calibration_score(std::size_t target_item, const Moveline& history) const {
    Tape tape(false);
    return calibration(tape, target_item, history).value()[0];
  }

  FeatureBundle bundle(const Sample& s, const FlowFeatures* flow) const {
    FeatureBundle b;
    b.target_embedding = item_.lookup(params_, s.target_item);
    b.h_user = user_interest_repr(s.target_item, s.history);
    if (cfg_.use_user_profile) b.user_profile = user_.lookup(params_, s.user_id);
    if (cfg_.use_interactions) b.interest_match = hadamard(b.h_user, b.target_embedding);
    if (cfg_.use_flow) {
      if (flow == nullptr) throw Error("argument", "discriminator uses flow features but none were given");
      b.a_flow = align_plain(b.target_embedding, flow->flow);
      b.mean_diversity_score = flow->mean_diversity_score;
      b.v_first = flow->v_first;
      if (cfg_.use_interactions) {
        b.flow_match = hadamard(*b.a_flow, align_proj_ ? project(b.target_embedding) : b.target_embedding);
        for (double& x : *b.flow_match) x /= cfg_.tau;
      }
    }
    return b;
  }

  double main_logit(const FeatureBundle& bundle) const { return mlp_apply(params_, merge_, bundle.concat())[0]; }

  // sigmoid(main + c); the calibration term is dropped when disabled.
  double predict(const FeatureBundle& bundle, double c_t0) const {
    return sigmoid(main_logit(bundle) + (cfg_.use_calibration ? c_t0 : 0.0));
  }

  double predict(const Sample& s, const FlowFeatures* flow) const {
    Tape tape(false);
    return sigmoid(forward(tape, s, flow).logit.value()[0]);
  }

  Vector alignment_weights(std::size_t target_item, const Matrix& flow) const {
    Vector q = item_.lookup(params_, target_item);
    if (cfg_.use_flow && cfg_.flow_dim != cfg_.emb_dim) q = project(q);
    return semantic_alignment(q, flow, align_scale()).weights;
  }

 private:
  struct Pool {
    ParamId wq, wk, wv, fallback;
  };

  Pool make_pool(const std::string& tag, Rng& rng) {
    const std::size_t e = cfg_.emb_dim;
    Pool p;
    p.wq = params_.add(tag + ".wq", xavier_uniform(e, e, rng));
    p.wk = params_.add(tag + ".wk", xavier_uniform(e, e, rng));
    p.wv = params_.add(tag + ".wv", xavier_uniform(e, e, rng));
    p.fallback = params_.add(tag + ".default", normal_matrix(1, e, kEmbeddingInitStddev, rng));
    return p;
  }

  Vector project(const Vector& q) const {
    const Matrix& w = params_[*align_proj_].value;
    return amen::matmul(Matrix::row_vector(q), w).row_copy(0);
  }

  Vector align_plain(const Vector& target, const Matrix& flow) const {
    if (cfg_.flow_summary == FlowSummary::mean) {
      Vector m(flow.cols(), 0.0);
      for (std::size_t r = 0; r < flow.rows(); ++r) {
        for (std::size_t c = 0; c < flow.cols(); ++c) m[c] += flow(r, c) / static_cast<double>(flow.rows());
      }
      return m;
    }
    const Vector q = align_proj_ ? project(target) : target;
    return semantic_alignment(q, flow, align_scale()).output;
  }

  template <typename Self>
  static std::optional<Var> embed_history(Self& self, Tape& tape, const Moveline& history) {
    const std::size_t keep = std::min(history.size(), self.cfg_.max_history);
    if (keep == 0) return std::nullopt;
    const std::size_t first = history.size() - keep;
    std::vector<std::size_t> items, scenes, behaviors, positions;
    for (std::size_t j = first; j < history.size(); ++j) {
      const Event& e = history.events[j];
      items.push_back(e.item_id);
      scenes.push_back(e.scene_id);
      behaviors.push_back(e.behavior_type);
      positions.push_back(history.size() - 1 - j);
    }
    auto& params = self.params_;
    Var x = ad::add(ad::add(self.item_.gather(tape, params, std::move(items)),
                            self.scene_.gather(tape, params, std::move(scenes))),
                    self.behavior_.gather(tape, params, std::move(behaviors)));
    if (self.cfg_.use_positions) x = ad::add(x, self.position_.gather(tape, params, std::move(positions)));
    return x;
  }

  template <typename Self>
  static Var pool_impl(Self& self, Tape& tape, const Pool& pool, Var target, const Moveline& history) {
    auto& params = self.params_;
    const std::optional<Var> hist = embed_history(self, tape, history);
    if (!hist) return tape.param(params[pool.fallback]);
    if (self.cfg_.pooling == HistoryPooling::mean) return ad::mean_rows(*hist);
    Var q = ad::matmul(target, tape.param(params[pool.wq]));
    Var k = ad::matmul(*hist, tape.param(params[pool.wk]));
    Var v = ad::matmul(*hist, tape.param(params[pool.wv]));
    return attend(q, k, v, 1.0 / std::sqrt(static_cast<double>(self.cfg_.emb_dim)));
  }

  template <typename Self>
  static Var calibration_impl(Self& self, Tape& tape, std::size_t target_item, const Moveline& history) {
    Var e = self.item_.gather(tape, self.params_, {target_item});
    Var pooled = pool_impl(self, tape, self.calib_pool_, e, history);
    return self.calib_mlp_.forward(tape, self.params_, ad::concat_cols({pooled, e}));
  }

  template <typename Self>
  static DiscriminatorOutput forward_impl(Self& self, Tape& tape, const Sample& s, const FlowFeatures* flow) {
    auto& params = self.params_;
    const DiscriminatorConfig& cfg = self.cfg_;
    Var e = self.item_.gather(tape, params, {s.target_item});
    Var h_user = pool_impl(self, tape, self.interest_, e, s.history);

    std::vector<Var> parts;
    std::optional<Var> flow_match;
    if (cfg.use_flow) {
      if (flow == nullptr) throw Error("argument", "discriminator uses flow features but none were given");
      Var states = tape.constant(flow->flow);
      Var q = self.align_proj_ ? ad::matmul(e, tape.param(params[*self.align_proj_])) : e;
      Var a_flow = cfg.flow_summary == FlowSummary::mean ? ad::mean_rows(states)
                                                         : attend(q, states, states, self.align_scale());
      if (cfg.use_interactions) flow_match = ad::scale(ad::mul(a_flow, q), 1.0 / cfg.tau);
      parts.push_back(a_flow);
      parts.push_back(h_user);
      parts.push_back(tape.constant(Matrix(1, 1, flow->mean_diversity_score)));
      parts.push_back(tape.constant(Matrix::row_vector(flow->v_first)));
    } else {
      parts.push_back(h_user);
    }
    parts.push_back(e);
    if (cfg.use_user_profile) parts.push_back(self.user_.gather(tape, params, {s.user_id}));
    if (cfg.use_interactions) parts.push_back(ad::mul(h_user, e));
    if (flow_match) parts.push_back(*flow_match);
    Var z = ad::concat_cols(parts);
    DiscriminatorOutput out{self.merge_.forward(tape, params, z), std::nullopt, Var{}};
    out.logit = out.logit_main;
    if (cfg.use_calibration) {
      out.calibration = calibration_impl(self, tape, s.target_item, s.history);
      out.logit = ad::add(out.logit_main, *out.calibration);
    }
    return out;
  }

  DiscriminatorConfig cfg_;
  ParameterSet params_;
  EmbeddingTable item_, scene_, behavior_, user_, position_;
  Pool interest_, calib_pool_;
  Mlp calib_mlp_, merge_;
  std::optional<ParamId> align_proj_;
};

}  // namespace amen
