#pragma once

// Shared helpers for the test suites: random fixtures, brute-force loss
// oracles written without the library's tape, and a finite-difference
// gradient checker.

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <functional>
#include <string>
#include <vector>

#include "amen/evaluation.hpp"

namespace amen::testing {

inline Matrix random_matrix(std::size_t r, std::size_t c, Rng& rng, double stddev = 1.0) {
  Matrix m(r, c);
  for (double& v : m.values()) v = rng.normal(0.0, stddev);
  return m;
}

inline Vector random_vector(std::size_t n, Rng& rng, double stddev = 1.0) {
  Vector v(n);
  for (double& x : v) x = rng.normal(0.0, stddev);
  return v;
}

inline std::filesystem::path scratch_dir(const std::string& name) {
  auto p = std::filesystem::temp_directory_path() / ("amen-test-" + name);
  std::filesystem::remove_all(p);
  std::filesystem::create_directories(p);
  return p;
}

// ------------------------------------------------------------ oracles
// Plain loops over std::vector; no Matrix ops, no tape.

namespace oracle {

inline double dot(const std::vector<double>& a, const std::vector<double>& b) {
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
  return s;
}

inline double log_softplus(double x) {  // log(1 + e^x), stable
  return x > 0.0 ? x + std::log1p(std::exp(-x)) : std::log1p(std::exp(x));
}

// flow[t] is one state; cands[t][0] the positive, the rest negatives.
inline double infonce(const std::vector<std::vector<double>>& flow,
                      const std::vector<std::vector<std::vector<double>>>& cands, double tau) {
  double total = 0.0;
  for (std::size_t t = 0; t < flow.size(); ++t) {
    std::vector<double> z;
    for (const auto& c : cands[t]) z.push_back(dot(flow[t], c) / tau);
    const double m = *std::max_element(z.begin(), z.end());
    double s = 0.0;
    for (double x : z) s += std::exp(x - m);
    total += (m + std::log(s)) - z[0];
  }
  return total;
}

inline double diversity(const std::vector<double>& state, std::size_t heads, double tau) {
  const std::size_t hd = state.size() / heads;
  double s = 0.0;
  std::size_t pairs = 0;
  for (std::size_t i = 0; i < heads; ++i) {
    for (std::size_t j = i + 1; j < heads; ++j) {
      double d = 0.0;
      for (std::size_t c = 0; c < hd; ++c) d += state[i * hd + c] * state[j * hd + c];
      s += (d / tau) * (d / tau);
      ++pairs;
    }
  }
  return s / static_cast<double>(pairs);
}

inline double velocity(const std::vector<std::vector<double>>& flow) {
  double s = 0.0;
  for (std::size_t t = 2; t < flow.size(); ++t) {
    for (std::size_t c = 0; c < flow[t].size(); ++c) {
      const double a = (flow[t][c] - flow[t - 1][c]) - (flow[t - 1][c] - flow[t - 2][c]);
      s += a * a;
    }
  }
  return s;
}

inline double stage1(const std::vector<std::vector<double>>& flow,
                     const std::vector<std::vector<std::vector<double>>>& cands, std::size_t heads, double alpha,
                     double beta, double tau) {
  double div = 0.0;
  for (const auto& s : flow) div += diversity(s, heads, tau);
  return infonce(flow, cands, tau) + alpha * div + beta * velocity(flow);
}

inline double tsp(double c_t0, double c_t1, int y_t1) {
  const double sign = y_t1 ? 1.0 : -1.0;
  return log_softplus(-sign * (c_t1 - c_t0));
}

inline double stage2(double y_hat, int y, bool paired, double tsp_term, double lambda) {
  const double ce = y ? -std::log(y_hat) : -std::log(1.0 - y_hat);
  return ce + (paired ? lambda * tsp_term : 0.0);
}

// O(n^2) pair counting, ties counted as halves; returns twice the count
// over pairs so the comparison with the library is exact.
inline double auc_pairs(const std::vector<double>& s, const std::vector<int>& y) {
  long long twice = 0, pos = 0, neg = 0;
  for (std::size_t i = 0; i < s.size(); ++i) (y[i] ? pos : neg) += 1;
  for (std::size_t i = 0; i < s.size(); ++i) {
    if (!y[i]) continue;
    for (std::size_t j = 0; j < s.size(); ++j) {
      if (y[j]) continue;
      twice += s[i] > s[j] ? 2 : (s[i] == s[j] ? 1 : 0);
    }
  }
  return static_cast<double>(twice) / (2.0 * static_cast<double>(pos) * static_cast<double>(neg));
}

}  // namespace oracle

inline std::vector<std::vector<double>> rows_of(const Matrix& m) {
  std::vector<std::vector<double>> out;
  for (std::size_t r = 0; r < m.rows(); ++r) out.push_back(m.row_copy(r));
  return out;
}

// ------------------------------------------------------------ gradcheck

struct GradReport {
  double max_rel = 0.0;
  std::size_t checked = 0;
  std::string worst;
};

// |a - n| / max(|a| + |n|, floor). The floor keeps round-off on
// near-zero gradients from dominating.
inline double rel_error(double a, double n, double floor = 1e-6) {
  return std::abs(a - n) / std::max(std::abs(a) + std::abs(n), floor);
}

// `loss(tape)` must build a scalar from tape.param(...) of `params`.
// Checks every entry of every tensor (or a strided subset when a tensor
// has more than `max_per_tensor` entries).
inline GradReport gradcheck(ParameterSet& params, const std::function<Var(Tape&)>& loss, double eps = 1e-5,
                            std::size_t max_per_tensor = 4096) {
  params.zero_grad();
  {
    Tape tape;
    tape.backward(loss(tape));
  }
  auto eval = [&] {
    Tape tape(false);
    return loss(tape).value()[0];
  };
  GradReport rep;
  for (Parameter& p : params.all()) {
    const Matrix analytic = p.grad;
    const std::size_t n = p.value.size();
    const std::size_t stride = std::max<std::size_t>(1, n / max_per_tensor);
    for (std::size_t i = 0; i < n; i += stride) {
      double& x = p.value.values()[i];
      const double saved = x;
      x = saved + eps;
      const double up = eval();
      x = saved - eps;
      const double down = eval();
      x = saved;
      const double numeric = (up - down) / (2.0 * eps);
      const double e = rel_error(analytic.values()[i], numeric);
      ++rep.checked;
      if (e > rep.max_rel) {
        rep.max_rel = e;
        rep.worst = p.name + "[" + std::to_string(i) + "] analytic " + std::to_string(analytic.values()[i]) +
                    " numeric " + std::to_string(numeric);
      }
    }
  }
  params.zero_grad();
  return rep;
}

// ------------------------------------------------------------ fixtures

inline Moveline random_moveline(std::size_t n, std::size_t items, std::size_t scenes, Rng& rng) {
  Moveline m;
  for (std::size_t j = 0; j < n; ++j) {
    Event e;
    e.item_id = rng.below(items);
    e.scene_id = rng.below(scenes);
    e.behavior_type = rng.below(kBehaviorVocab);
    e.timestamp = static_cast<std::int64_t>(j);
    m.events.push_back(e);
  }
  return m;
}

inline GeneratorConfig tiny_generator_config(std::size_t T = 3, std::size_t H = 2, std::size_t hd = 3) {
  GeneratorConfig c;
  c.n_items = 12;
  c.n_scenes = 2;
  c.horizon = T;
  c.flow_heads = H;
  c.head_dim = hd;
  c.blocks = 1;
  c.max_history = 5;
  return c;
}

inline DiscriminatorConfig tiny_discriminator_config(std::size_t flow_dim = 6, std::size_t emb_dim = 4) {
  DiscriminatorConfig c;
  c.n_items = 12;
  c.n_scenes = 2;
  c.n_users = 5;
  c.emb_dim = emb_dim;
  c.flow_dim = flow_dim;
  c.horizon = 3;
  c.max_history = 5;
  c.merge_hidden = {5};
  c.calib_hidden = {3};
  c.tau = 0.5;
  return c;
}

// A small world that trains in well under a second per stage.
inline RunConfig tiny_run_config(std::uint64_t seed = 3) {
  RunConfig c;
  c.seed = seed;
  c.n_users = 60;
  c.n_items = 40;
  c.n_categories = 4;
  c.moveline_length = 14;
  c.samples_per_user = 3;
  c.max_history = 8;
  c.H = 2;
  c.d_head = 3;
  c.k = 5;
  c.batch_size = 16;
  c.epochs_base = 2;
  c.epochs_stage1 = 2;
  c.epochs_stage2 = 2;
  c.merge_hidden = {8};
  c.calib_hidden = {4};
  c.encoder_blocks = 1;
  c.eval_seeds = {1};
  return c;
}

}  // namespace amen::testing
