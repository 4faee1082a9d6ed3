#pragma once

// Stage-1 flow generator and its objectives.
//
// Input sequence: [BOS, e_1 .. e_L, q_1 .. q_T] where e_j = item + scene +
// behavior (+ recency position) embeddings of the truncated history and q_t
// are learned horizon queries. Causal encoder blocks run over it; a final
// H-head attention block reads the T horizon rows and its per-head outputs
// are concatenated without an output projection, so each flow state splits
// exactly into H sub-vectors of head_dim. All T states come out of one pass
// and depend on the history only.

#include <cmath>
#include <optional>
#include <string>
#include <vector>

#include "amen/autodiff.hpp"
#include "amen/embedding.hpp"
#include "amen/moveline.hpp"
#include "amen/nn.hpp"

namespace amen {

struct FlowState {
  Vector values;
  std::size_t heads = 1;

  std::size_t dim() const noexcept { return values.size(); }
  std::size_t head_dim() const noexcept { return values.size() / heads; }
  std::span<const double> head(std::size_t i) const {
    return std::span<const double>(values).subspan(i * head_dim(), head_dim());
  }
};

struct NextInterestFlow {
  Matrix states;  // T x d
  std::size_t heads = 1;

  std::size_t horizon() const noexcept { return states.rows(); }
  std::size_t dim() const noexcept { return states.cols(); }
  FlowState state(std::size_t t) const { return FlowState{states.row_copy(t), heads}; }
};

// ------------------------------------------------------------- losses

struct Stage1Weights {
  double alpha = 0.1;
  double beta = 0.1;
  double tau = 0.07;
};

struct Stage1Components {
  double total = 0.0;
  double infonce = 0.0;
  double diversity = 0.0;  // summed over states
  double velocity = 0.0;
};

namespace detail {

inline void require_tau(double tau) {
  if (!(tau > 0.0)) throw Error("argument", "temperature tau must be > 0");
}

inline std::size_t pair_count(std::size_t heads) { return heads * (heads - 1) / 2; }

}  // namespace detail

// Sum over horizons of -log softmax over {positive} u negatives. Row 0 of
// every candidate block is the positive.
inline Var infonce_loss(Var flow, const std::vector<Var>& candidates, double tau) {
  detail::require_tau(tau);
  Tape& tape = *flow.tape;
  const std::size_t horizon = flow.value().rows();
  if (candidates.size() != horizon) throw DimensionError("infonce_loss: one candidate block per horizon required");
  std::optional<Var> total;
  for (std::size_t t = 0; t < horizon; ++t) {
    if (candidates[t].value().rows() < 2) throw Error("argument", "infonce_loss: empty negative set");
    Var logits = ad::scale(ad::matmul_nt(ad::slice_rows(flow, t, 1), candidates[t]), 1.0 / tau);
    Var term = ad::cross_entropy_logits(logits, 0);
    total = total ? ad::add(*total, term) : term;
  }
  return total ? *total : tape.constant(Matrix(1, 1));
}

inline double infonce_loss(const NextInterestFlow& flow, const std::vector<Vector>& positives,
                           const std::vector<std::vector<Vector>>& negatives, double tau) {
  if (positives.size() != flow.horizon() || negatives.size() != flow.horizon()) {
    throw DimensionError("infonce_loss: positives/negatives must have one entry per horizon");
  }
  Tape tape(false);
  Var f = tape.constant(flow.states);
  std::vector<Var> candidates;
  for (std::size_t t = 0; t < flow.horizon(); ++t) {
    if (negatives[t].empty()) throw Error("argument", "infonce_loss: empty negative set");
    std::vector<Vector> rows{positives[t]};
    rows.insert(rows.end(), negatives[t].begin(), negatives[t].end());
    candidates.push_back(tape.constant(Matrix::from_rows(rows)));
  }
  return infonce_loss(f, candidates, tau).value()[0];
}

// Mean over head pairs of (h_i . h_j / tau)^2 for one 1 x d state.
inline Var diversity_loss(Var state, std::size_t heads, double tau) {
  detail::require_tau(tau);
  if (heads < 2) throw Error("argument", "diversity_loss: needs H >= 2 heads");
  const std::size_t d = state.value().size();
  if (d % heads != 0) throw DimensionError("diversity_loss: state dim not divisible by H");
  Tape& tape = *state.tape;
  Var h = ad::reshape(state, heads, d / heads);
  Var sims = ad::scale(ad::matmul_nt(h, h), 1.0 / tau);
  Matrix upper(heads, heads);
  for (std::size_t i = 0; i < heads; ++i) {
    for (std::size_t j = i + 1; j < heads; ++j) upper(i, j) = 1.0;
  }
  Var pairs = ad::mul(sims, tape.constant(std::move(upper)));
  return ad::scale(ad::sum_squares(pairs), 1.0 / static_cast<double>(detail::pair_count(heads)));
}

inline double diversity_loss(const FlowState& state, double tau) {
  Tape tape(false);
  return diversity_loss(tape.constant(Matrix::row_vector(state.values)), state.heads, tau).value()[0];
}

// S_div = 1 - diversity loss of the state. Not clamped.
inline double diversity_score(const FlowState& state, double tau) { return 1.0 - diversity_loss(state, tau); }

inline double mean_diversity_score(const NextInterestFlow& flow, double tau) {
  double s = 0.0;
  for (std::size_t t = 0; t < flow.horizon(); ++t) s += diversity_score(flow.state(t), tau);
  return s / static_cast<double>(flow.horizon());
}

// v_t = f_t - f_{t-1}, t = 1 .. T-1.
inline std::vector<Vector> velocity(const NextInterestFlow& flow) {
  if (flow.horizon() < 2) throw Error("argument", "velocity: needs T >= 2");
  std::vector<Vector> out;
  for (std::size_t t = 1; t < flow.horizon(); ++t) {
    Vector v(flow.dim());
    for (std::size_t c = 0; c < v.size(); ++c) v[c] = flow.states(t, c) - flow.states(t - 1, c);
    out.push_back(std::move(v));
  }
  return out;
}

// Sum of squared second differences of the T x d flow.
inline Var velocity_loss(Var flow) {
  const std::size_t horizon = flow.value().rows();
  if (horizon < 3) throw Error("argument", "T >= 3 required for velocity loss");
  const std::size_t n = horizon - 2;
  Var accel = ad::add(ad::sub(ad::slice_rows(flow, 2, n), ad::scale(ad::slice_rows(flow, 1, n), 2.0)),
                      ad::slice_rows(flow, 0, n));
  return ad::sum_squares(accel);
}

inline double velocity_loss(const NextInterestFlow& flow) {
  Tape tape(false);
  return velocity_loss(tape.constant(flow.states)).value()[0];
}

struct Stage1Terms {
  Var total;
  Var infonce;
  std::optional<Var> diversity;
  std::optional<Var> velocity;
};

// total = InfoNCE + alpha * sum_t diversity(f_t) + beta * velocity.
// A term whose weight is zero is still computed when it is defined, so
// it can be logged.
inline Stage1Terms stage1_loss(Var flow, const std::vector<Var>& candidates, std::size_t heads,
                               const Stage1Weights& w) {
  if (w.alpha < 0.0 || w.beta < 0.0) throw Error("argument", "stage1_loss: alpha and beta must be >= 0");
  Stage1Terms terms{infonce_loss(flow, candidates, w.tau), {}, {}, {}};
  terms.infonce = terms.total;
  const std::size_t horizon = flow.value().rows();
  if (heads >= 2) {
    std::optional<Var> div;
    for (std::size_t t = 0; t < horizon; ++t) {
      Var term = diversity_loss(ad::slice_rows(flow, t, 1), heads, w.tau);
      div = div ? ad::add(*div, term) : term;
    }
    terms.diversity = div;
    if (w.alpha > 0.0) terms.total = ad::add(terms.total, ad::scale(*div, w.alpha));
  } else if (w.alpha > 0.0) {
    throw Error("argument", "diversity_loss: needs H >= 2 heads");
  }
  if (horizon >= 3) {
    terms.velocity = velocity_loss(flow);
    if (w.beta > 0.0) terms.total = ad::add(terms.total, ad::scale(*terms.velocity, w.beta));
  } else if (w.beta > 0.0) {
    throw Error("argument", "T >= 3 required for velocity loss");
  }
  return terms;
}

inline Stage1Components components_of(const Stage1Terms& terms) {
  Stage1Components c;
  c.total = terms.total.value()[0];
  c.infonce = terms.infonce.value()[0];
  c.diversity = terms.diversity ? terms.diversity->value()[0] : 0.0;
  c.velocity = terms.velocity ? terms.velocity->value()[0] : 0.0;
  return c;
}

inline Stage1Components stage1_loss(const NextInterestFlow& flow, const std::vector<Vector>& positives,
                                    const std::vector<std::vector<Vector>>& negatives, const Stage1Weights& w) {
  if (positives.size() != flow.horizon() || negatives.size() != flow.horizon()) {
    throw DimensionError("stage1_loss: positives/negatives must have one entry per horizon");
  }
  Tape tape(false);
  Var f = tape.constant(flow.states);
  std::vector<Var> candidates;
  for (std::size_t t = 0; t < flow.horizon(); ++t) {
    if (negatives[t].empty()) throw Error("argument", "infonce_loss: empty negative set");
    std::vector<Vector> rows{positives[t]};
    rows.insert(rows.end(), negatives[t].begin(), negatives[t].end());
    candidates.push_back(tape.constant(Matrix::from_rows(rows)));
  }
  return components_of(stage1_loss(f, candidates, flow.heads, w));
}

// ------------------------------------------------------------- model

struct GeneratorConfig {
  std::size_t n_items = 500;
  std::size_t n_scenes = 4;
  std::size_t n_behaviors = kBehaviorVocab;
  std::size_t horizon = 4;     // T
  std::size_t flow_heads = 4;  // H
  std::size_t head_dim = 8;
  std::size_t blocks = 2;
  std::size_t encoder_heads = 1;
  std::size_t max_history = 20;
  std::size_t ffn_hidden = 0;  // 0 means d
  bool use_positions = true;

  std::size_t dim() const noexcept { return flow_heads * head_dim; }
};

inline void validate(const GeneratorConfig& c) {
  if (c.horizon < 1) throw ConfigError("T", "must be >= 1");
  if (c.flow_heads < 1) throw ConfigError("H", "must be >= 1");
  if (c.head_dim < 1) throw ConfigError("d_head", "must be >= 1");
  if (c.encoder_heads < 1 || c.dim() % c.encoder_heads != 0) {
    throw ConfigError("encoder_heads", "must divide d = H * d_head");
  }
  if (c.max_history < 1) throw ConfigError("max_history", "must be >= 1");
  if (c.n_items < 1 || c.n_scenes < 1 || c.n_behaviors < 1) throw ConfigError("vocab", "must be >= 1");
}

class Generator {
 public:
  Generator(const GeneratorConfig& cfg, std::uint64_t seed) : cfg_(cfg) {
    validate(cfg_);
    Rng rng = Rng::derived(seed, "generator-init");
    const std::size_t d = cfg_.dim();
    item_ = EmbeddingTable::create(params_, "item_embedding", cfg_.n_items, d, rng);
    scene_ = EmbeddingTable::create(params_, "scene_embedding", cfg_.n_scenes, d, rng);
    behavior_ = EmbeddingTable::create(params_, "behavior_embedding", cfg_.n_behaviors, d, rng);
    position_ = EmbeddingTable::create(params_, "generator.position_embedding", cfg_.max_history, d, rng);
    bos_ = params_.add("generator.bos", normal_matrix(1, d, kEmbeddingInitStddev, rng));
    queries_ = params_.add("generator.horizon_queries", normal_matrix(cfg_.horizon, d, 1.0 / std::sqrt(double(d)), rng));
    const std::size_t hidden = cfg_.ffn_hidden == 0 ? d : cfg_.ffn_hidden;
    for (std::size_t b = 0; b < cfg_.blocks; ++b) {
      const std::string tag = "generator.block" + std::to_string(b);
      Block blk;
      blk.wq = params_.add(tag + ".wq", xavier_uniform(d, d, rng));
      blk.wk = params_.add(tag + ".wk", xavier_uniform(d, d, rng));
      blk.wv = params_.add(tag + ".wv", xavier_uniform(d, d, rng));
      blk.wo = params_.add(tag + ".wo", xavier_uniform(d, d, rng));
      blk.ffn = Mlp::create(params_, tag + ".ffn", {d, hidden, d}, rng);
      blocks_.push_back(blk);
    }
    flow_wq_ = params_.add("generator.flow.wq", xavier_uniform(d, d, rng));
    flow_wk_ = params_.add("generator.flow.wk", xavier_uniform(d, d, rng));
    flow_wv_ = params_.add("generator.flow.wv", xavier_uniform(d, d, rng));
  }

  const GeneratorConfig& config() const noexcept { return cfg_; }
  ParameterSet& params() noexcept { return params_; }
  const ParameterSet& params() const noexcept { return params_; }
  const EmbeddingTable& item_table() const noexcept { return item_; }

  // T x d flow on the tape. Gradients reach the parameters only through a
  // mutable generator.
  Var forward(Tape& tape, const Moveline& history) { return forward_impl(*this, tape, history); }
  Var forward(Tape& tape, const Moveline& history) const { return forward_impl(*this, tape, history); }

  NextInterestFlow generate_flow(const Moveline& history) const {
    Tape tape(false);
    return NextInterestFlow{forward(tape, history).value(), cfg_.flow_heads};
  }

 private:
  struct Block {
    ParamId wq, wk, wv, wo;
    Mlp ffn;
  };

  template <typename Self>
  static Var forward_impl(Self& self, Tape& tape, const Moveline& history) {
    auto& params = self.params_;
    const GeneratorConfig& cfg = self.cfg_;
    const std::size_t d = cfg.dim();
    const std::size_t keep = std::min(history.size(), cfg.max_history);
    const std::size_t first = history.size() - keep;

    std::vector<Var> rows{tape.param(params[self.bos_])};
    if (keep > 0) {
      std::vector<std::size_t> items, scenes, behaviors, positions;
      for (std::size_t j = first; j < history.size(); ++j) {
        const Event& e = history.events[j];
        items.push_back(e.item_id);
        scenes.push_back(e.scene_id);
        behaviors.push_back(e.behavior_type);
        positions.push_back(history.size() - 1 - j);  // recency
      }
      Var ev = ad::add(ad::add(self.item_.gather(tape, params, std::move(items)),
                               self.scene_.gather(tape, params, std::move(scenes))),
                       self.behavior_.gather(tape, params, std::move(behaviors)));
      if (cfg.use_positions) ev = ad::add(ev, self.position_.gather(tape, params, std::move(positions)));
      rows.push_back(ev);
    }
    rows.push_back(tape.param(params[self.queries_]));
    Var x = ad::concat_rows(rows);
    const std::size_t n = x.value().rows();

    const std::size_t eh = cfg.encoder_heads;
    const std::size_t ed = d / eh;
    for (const Block& blk : self.blocks_) {
      Var q = ad::matmul(x, tape.param(params[blk.wq]));
      Var k = ad::matmul(x, tape.param(params[blk.wk]));
      Var v = ad::matmul(x, tape.param(params[blk.wv]));
      std::vector<Var> heads;
      for (std::size_t h = 0; h < eh; ++h) {
        heads.push_back(attend(ad::slice_cols(q, h * ed, ed), ad::slice_cols(k, h * ed, ed),
                               ad::slice_cols(v, h * ed, ed), 1.0 / std::sqrt(double(ed)), std::size_t{0}));
      }
      Var a = eh == 1 ? heads.front() : ad::concat_cols(heads);
      x = ad::add(x, ad::matmul(a, tape.param(params[blk.wo])));
      x = ad::add(x, blk.ffn.forward(tape, params, x));
    }

    const std::size_t horizon = cfg.horizon;
    const std::size_t hd = cfg.head_dim;
    Var q = ad::matmul(ad::slice_rows(x, n - horizon, horizon), tape.param(params[self.flow_wq_]));
    Var k = ad::matmul(x, tape.param(params[self.flow_wk_]));
    Var v = ad::matmul(x, tape.param(params[self.flow_wv_]));
    std::vector<Var> heads;
    for (std::size_t h = 0; h < cfg.flow_heads; ++h) {
      heads.push_back(attend(ad::slice_cols(q, h * hd, hd), ad::slice_cols(k, h * hd, hd),
                             ad::slice_cols(v, h * hd, hd), 1.0 / std::sqrt(double(hd)), n - horizon));
    }
    return cfg.flow_heads == 1 ? heads.front() : ad::concat_cols(heads);
  }

  GeneratorConfig cfg_;
  ParameterSet params_;
  EmbeddingTable item_, scene_, behavior_, position_;
  ParamId bos_, queries_;
  std::vector<Block> blocks_;
  ParamId flow_wq_, flow_wk_, flow_wv_;
};

// Candidate blocks (positive first) for every horizon of a sample.
template <typename Params>
std::vector<Var> gather_candidates(Tape& tape, Params& params, const EmbeddingTable& items, const Sample& sample,
                                   const std::vector<std::vector<std::size_t>>& negatives) {
  std::vector<Var> out;
  for (std::size_t t = 0; t < sample.future_items.size(); ++t) {
    std::vector<std::size_t> ids{sample.future_items[t]};
    ids.insert(ids.end(), negatives[t].begin(), negatives[t].end());
    out.push_back(items.gather(tape, params, std::move(ids)));
  }
  return out;
}

}  // namespace amen
