#include <gtest/gtest.h>

#include "support.hpp"

namespace amen {
namespace {

namespace oracle = testing::oracle;
using testing::random_matrix;
using testing::random_vector;
using testing::rows_of;

const double kLn2 = std::log(2.0);

// ------------------------------------------------------------ InfoNCE

TEST(InfoNce, UniformCaseIsLn2) {
  NextInterestFlow f{Matrix{{0.3, -0.2}}, 1};
  EXPECT_NEAR(infonce_loss(f, {{1.0, 1.0}}, {{{1.0, 1.0}}}, 0.7), kLn2, 1e-12);
}

TEST(InfoNce, HandSoftmax) {
  NextInterestFlow f{Matrix{{1.0, 0.0}}, 1};
  const double v = infonce_loss(f, {{1.0, 0.0}}, {{{0.0, 1.0}}}, 1.0);
  EXPECT_NEAR(v, -std::log(std::exp(1.0) / (std::exp(1.0) + 1.0)), 1e-15);
  EXPECT_NEAR(v, 0.313262, 1e-6);
}

TEST(InfoNce, Errors) {
  NextInterestFlow f{Matrix{{1.0, 0.0}}, 1};
  EXPECT_THROW(infonce_loss(f, {{1.0, 0.0}}, {{{0.0, 1.0}}}, 0.0), Error);
  EXPECT_THROW(infonce_loss(f, {{1.0, 0.0}}, {{}}, 1.0), Error);
}

TEST(InfoNce, MatchesOracleAndIsMonotoneInPositive) {
  Rng rng(1);
  for (int i = 0; i < 100; ++i) {
    const std::size_t T = 1 + rng.below(5), d = 1 + rng.below(16), k = 1 + rng.below(6);
    const double tau = rng.uniform(0.1, 2.0);
    const Matrix flow = random_matrix(T, d, rng);
    std::vector<Vector> pos;
    std::vector<std::vector<Vector>> neg(T);
    std::vector<std::vector<std::vector<double>>> cands(T);
    for (std::size_t t = 0; t < T; ++t) {
      pos.push_back(random_vector(d, rng));
      cands[t].push_back(pos[t]);
      for (std::size_t j = 0; j < k; ++j) {
        neg[t].push_back(random_vector(d, rng));
        cands[t].push_back(neg[t].back());
      }
    }
    const double v = infonce_loss(NextInterestFlow{flow, 1}, pos, neg, tau);
    EXPECT_NEAR(v, oracle::infonce(rows_of(flow), cands, tau), 1e-10);
    EXPECT_GT(v, 0.0);

    // Moving the positive toward the state raises its similarity.
    std::vector<Vector> closer = pos;
    for (std::size_t c = 0; c < d; ++c) closer[0][c] += 0.1 * flow(0, c);
    EXPECT_LT(infonce_loss(NextInterestFlow{flow, 1}, closer, neg, tau), v);
  }
}

// ------------------------------------------------------------ diversity

FlowState state_of(const Vector& v, std::size_t heads) { return FlowState{v, heads}; }

TEST(Diversity, ClosedForms) {
  EXPECT_EQ(diversity_loss(state_of({1, 0, 0, 1}, 2), 1.0), 0.0);
  EXPECT_EQ(diversity_score(state_of({1, 0, 0, 1}, 2), 1.0), 1.0);
  EXPECT_NEAR(diversity_loss(state_of({0.6, 0.8, 0.6, 0.8}, 2), 1.0), 1.0, 1e-12);
  EXPECT_NEAR(diversity_loss(state_of({0.6, 0.8, 0.6, 0.8}, 2), 0.5), 4.0, 1e-12);
  EXPECT_NEAR(diversity_score(state_of({0.6, 0.8, 0.6, 0.8}, 2), 1.0), 0.0, 1e-12);
  EXPECT_NEAR(diversity_score(state_of({0.6, 0.8, 0.6, 0.8}, 2), 0.5), -3.0, 1e-12);
  EXPECT_THROW(diversity_loss(state_of({1, 2}, 1), 1.0), Error);
  EXPECT_THROW(diversity_loss(state_of({1, 2, 3, 4}, 2), 0.0), Error);
}

TEST(Diversity, OracleAndHeadPermutation) {
  Rng rng(2);
  for (int i = 0; i < 100; ++i) {
    const std::size_t H = 2 + rng.below(3), hd = 1 + rng.below(4);
    const double tau = rng.uniform(0.1, 2.0);
    const Vector v = random_vector(H * hd, rng);
    const double l = diversity_loss(state_of(v, H), tau);
    EXPECT_NEAR(l, oracle::diversity(v, H, tau), 1e-10 * std::max(1.0, l));
    EXPECT_GE(l, 0.0);
    // Reverse the head order.
    Vector p(v.size());
    for (std::size_t h = 0; h < H; ++h)
      for (std::size_t c = 0; c < hd; ++c) p[(H - 1 - h) * hd + c] = v[h * hd + c];
    EXPECT_NEAR(diversity_loss(state_of(p, H), tau), l, 1e-10 * std::max(1.0, l));
  }
}

// ------------------------------------------------------------ velocity

TEST(Velocity, Examples) {
  const NextInterestFlow scalar{Matrix{{0}, {1}, {3}}, 1};
  const auto v = velocity(scalar);
  ASSERT_EQ(v.size(), 2u);
  EXPECT_EQ(v[0], (Vector{1}));
  EXPECT_EQ(v[1], (Vector{2}));
  EXPECT_EQ(velocity_loss(scalar), 1.0);

  const NextInterestFlow constant{Matrix{{2, 1}, {2, 1}, {2, 1}, {2, 1}}, 1};
  for (const auto& x : velocity(constant)) EXPECT_EQ(x, (Vector{0, 0}));

  Matrix lin(5, 3);
  for (std::size_t t = 0; t < 5; ++t)
    for (std::size_t c = 0; c < 3; ++c) lin(t, c) = double(t) * (0.5 + double(c));
  EXPECT_NEAR(velocity_loss(NextInterestFlow{lin, 1}), 0.0, 1e-24);

  EXPECT_THROW(velocity(NextInterestFlow{Matrix{{1.0}}, 1}), Error);
  EXPECT_THROW(velocity_loss(NextInterestFlow{Matrix{{1.0}, {2.0}}, 1}), Error);
}

TEST(Velocity, OracleAndTranslationInvariance) {
  Rng rng(3);
  for (int i = 0; i < 100; ++i) {
    const std::size_t T = 3 + rng.below(3), d = 1 + rng.below(16);
    Matrix f = random_matrix(T, d, rng);
    const double l = velocity_loss(NextInterestFlow{f, 1});
    EXPECT_NEAR(l, oracle::velocity(rows_of(f)), 1e-12 * std::max(1.0, l));
    const Vector shift = random_vector(d, rng, 5.0);
    for (std::size_t t = 0; t < T; ++t)
      for (std::size_t c = 0; c < d; ++c) f(t, c) += shift[c];
    EXPECT_NEAR(velocity_loss(NextInterestFlow{f, 1}), l, 1e-10);
  }
}

// ------------------------------------------------------------ stage-1 total

TEST(Stage1Loss, DegenerateWeightsAndComposition) {
  Rng rng(4);
  for (int i = 0; i < 100; ++i) {
    const std::size_t T = 3 + rng.below(3), H = 2 + rng.below(3), hd = 1 + rng.below(4), d = H * hd;
    const double tau = rng.uniform(0.2, 2.0), alpha = rng.uniform(), beta = rng.uniform();
    const Matrix flow = random_matrix(T, d, rng);
    std::vector<Vector> pos;
    std::vector<std::vector<Vector>> neg(T);
    for (std::size_t t = 0; t < T; ++t) {
      pos.push_back(random_vector(d, rng));
      for (int j = 0; j < 3; ++j) neg[t].push_back(random_vector(d, rng));
    }
    const NextInterestFlow f{flow, H};
    const double nce = infonce_loss(f, pos, neg, tau);
    EXPECT_EQ(stage1_loss(f, pos, neg, {0.0, 0.0, tau}).total, nce);

    const Stage1Components c = stage1_loss(f, pos, neg, {alpha, beta, tau});
    double div = 0.0;
    for (std::size_t t = 0; t < T; ++t) div += diversity_loss(f.state(t), tau);
    const double vel = velocity_loss(f);
    EXPECT_NEAR(c.infonce, nce, 1e-12);
    EXPECT_NEAR(c.diversity, div, 1e-12 * std::max(1.0, div));
    EXPECT_NEAR(c.velocity, vel, 1e-12 * std::max(1.0, vel));
    EXPECT_NEAR(c.total, nce + alpha * div + beta * vel, 1e-12 * std::max(1.0, c.total));
  }
}

TEST(Stage1Loss, OrthogonalHeadsAddNothing) {
  // H=2, d_head=2: head 0 on axis 0, head 1 on axis 1 in every state.
  const Matrix flow{{1, 0, 0, 2}, {2, 0, 0, 1}, {3, 0, 0, 5}};
  const NextInterestFlow f{flow, 2};
  const std::vector<Vector> pos{{1, 0, 0, 0}, {0, 1, 0, 0}, {0, 0, 1, 0}};
  const std::vector<std::vector<Vector>> neg{{{0, 0, 0, 1}}, {{1, 1, 0, 0}}, {{0, 0, 0, 1}}};
  EXPECT_EQ(stage1_loss(f, pos, neg, {1.0, 0.0, 1.0}).total, infonce_loss(f, pos, neg, 1.0));
}

// ------------------------------------------------------------ generator

TEST(Generator, ShapeAndDeterminism) {
  Rng rng(5);
  const Generator g(testing::tiny_generator_config(4, 3, 2), 7);
  for (std::size_t n : {0u, 1u, 3u, 9u}) {
    const Moveline m = testing::random_moveline(n, 12, 2, rng);
    const auto f = g.generate_flow(m);
    EXPECT_EQ(f.horizon(), 4u);
    EXPECT_EQ(f.dim(), 6u);
    EXPECT_EQ(f.heads, 3u);
    EXPECT_TRUE(f.states.all_finite());
    EXPECT_EQ(f.states, g.generate_flow(m).states);
  }
}

TEST(Generator, TruncatesToMostRecentEvents) {
  Rng rng(6);
  const Generator g(testing::tiny_generator_config(), 3);
  Moveline m = testing::random_moveline(9, 12, 2, rng);
  Moveline tail;
  tail.events.assign(m.events.end() - 5, m.events.end());
  EXPECT_EQ(g.generate_flow(m).states, g.generate_flow(tail).states);
}

TEST(Generator, ZeroParametersGiveEqualStates) {
  Rng rng(7);
  Generator g(testing::tiny_generator_config(4, 2, 3), 3);
  for (auto& p : g.params().all()) p.value.fill(0.0);
  const auto f = g.generate_flow(testing::random_moveline(4, 12, 2, rng));
  for (std::size_t t = 1; t < 4; ++t) EXPECT_EQ(f.states.row_copy(t), f.states.row_copy(0));
}

// Every generator tensor through the stage-1 objective.
TEST(Generator, Stage1GradientsMatchFiniteDifferences) {
  Rng rng(8);
  for (int trial = 0; trial < 3; ++trial) {
    Generator g(testing::tiny_generator_config(3, 2, 2 + trial), 10 + trial);
    // Larger than the default init so every path carries signal.
    for (auto& p : g.params().all())
      for (double& v : p.value.values()) v += rng.normal(0.0, 0.3);
    Sample s;
    s.history = testing::random_moveline(2 + trial, 12, 2, rng);
    s.future_items = {rng.below(12), rng.below(12), rng.below(12)};
    std::vector<std::vector<std::size_t>> negs;
    for (std::size_t t = 0; t < 3; ++t) negs.push_back(sample_negatives(s, t, 3, 12, rng));
    const Stage1Weights w{0.3, 0.2, 0.8};
    const auto rep = testing::gradcheck(g.params(), [&](Tape& tape) {
      Var flow = g.forward(tape, s.history);
      return stage1_loss(flow, gather_candidates(tape, g.params(), g.item_table(), s, negs), 2, w).total;
    });
    EXPECT_LT(rep.max_rel, 1e-4) << rep.worst;
    EXPECT_GT(rep.checked, 100u);
  }
}

// ------------------------------------------------------------ discriminator

TEST(Alignment, Examples) {
  const Matrix one{{0.2, -3.0}};
  EXPECT_EQ(semantic_alignment(std::vector<double>{1, 1}, one).output, one.row_copy(0));

  const Matrix same{{0.5, 1.5}, {0.5, 1.5}, {0.5, 1.5}};
  const auto s = semantic_alignment(std::vector<double>{4, -1}, same).output;
  EXPECT_NEAR(s[0], 0.5, 1e-15);
  EXPECT_NEAR(s[1], 1.5, 1e-15);

  const Matrix eye{{1, 0}, {0, 1}};
  const auto r = semantic_alignment(std::vector<double>{1, 0}, eye);
  const double w = 1.0 / (1.0 + std::exp(-1.0 / std::sqrt(2.0)));
  EXPECT_NEAR(r.output[0], w, 1e-15);
  // softmax([1/sqrt(2), 0]) = [0.669762, 0.330238]
  EXPECT_NEAR(r.output[0], 0.669762, 1e-6);
  EXPECT_NEAR(r.output[1], 0.330238, 1e-6);
}

TEST(Alignment, ConvexHull) {
  Rng rng(9);
  for (int i = 0; i < 200; ++i) {
    const std::size_t T = 1 + rng.below(6), d = 1 + rng.below(8);
    const Matrix f = random_matrix(T, d, rng);
    const auto a = semantic_alignment(random_vector(d, rng, 3.0), f).output;
    for (std::size_t c = 0; c < d; ++c) {
      double lo = f(0, c), hi = f(0, c);
      for (std::size_t t = 1; t < T; ++t) lo = std::min(lo, f(t, c)), hi = std::max(hi, f(t, c));
      EXPECT_GE(a[c], lo - 1e-10);
      EXPECT_LE(a[c], hi + 1e-10);
    }
  }
}

TEST(Tsp, Examples) {
  EXPECT_NEAR(tsp_loss(0.3, 0.3, 1), kLn2, 1e-15);
  EXPECT_NEAR(tsp_loss(-1.0, -1.0, 0), kLn2, 1e-15);
  EXPECT_NEAR(tsp_loss(0.0, 2.0, 1), -std::log(sigmoid(2.0)), 1e-15);
  EXPECT_NEAR(tsp_loss(0.0, 2.0, 1), 0.126928, 1e-6);
  EXPECT_NEAR(tsp_loss(0.0, -2.0, 0), 0.126928, 1e-6);
  Rng rng(10);
  for (int i = 0; i < 100; ++i) {
    const double a = rng.normal(0, 5), b = rng.normal(0, 5);
    const int y = rng.bernoulli(0.5);
    EXPECT_GT(tsp_loss(a, b, y), 0.0);
    EXPECT_NEAR(tsp_loss(a, b, y), oracle::tsp(a, b, y), 1e-12);
  }
  EXPECT_LT(tsp_loss(0.0, 40.0, 1), 1e-15);
}

TEST(Stage2Loss, Examples) {
  EXPECT_NEAR(stage2_loss(0.5, 1, std::nullopt, 0.0).total, kLn2, 1e-15);
  EXPECT_NEAR(stage2_loss(0.5, 1, kLn2, 1.0).total, 2.0 * kLn2, 1e-15);
  EXPECT_EQ(stage2_loss(0.3, 0, std::nullopt, 5.0).tsp, 0.0);
  EXPECT_THROW(stage2_loss(1.0, 1, std::nullopt, 0.0), Error);
  Rng rng(11);
  for (int i = 0; i < 100; ++i) {
    const double p = rng.uniform(0.01, 0.99), t = rng.uniform(0.0, 3.0), l = rng.uniform();
    const int y = rng.bernoulli(0.5);
    const bool paired = rng.bernoulli(0.5);
    const auto c = stage2_loss(p, y, paired ? std::optional<double>(t) : std::nullopt, l);
    EXPECT_NEAR(c.total, oracle::stage2(p, y, paired, t, l), 1e-12);
  }
}

FlowFeatures random_flow_features(std::size_t T, std::size_t H, std::size_t d, Rng& rng) {
  return flow_features(NextInterestFlow{random_matrix(T, d, rng), H}, 0.5);
}

Sample random_sample(Rng& rng, std::size_t history) {
  Sample s;
  s.user_id = rng.below(5);
  s.target_item = rng.below(12);
  s.label = rng.bernoulli(0.5);
  s.history = testing::random_moveline(history, 12, 2, rng);
  return s;
}

TEST(Discriminator, PredictIsSigmoidOfMainPlusCalibration) {
  Rng rng(12);
  Discriminator d(testing::tiny_discriminator_config(), 3);
  const Sample s = random_sample(rng, 3);
  const FlowFeatures ff = random_flow_features(3, 2, 6, rng);
  const FeatureBundle b = d.bundle(s, &ff);
  EXPECT_EQ(b.concat().size(), d.config().bundle_dim());
  const double main = d.main_logit(b);
  EXPECT_NEAR(d.predict(b, 0.0 - main), 0.5, 1e-15);
  EXPECT_NEAR(d.predict(b, 1.0 - main), sigmoid(1.0), 1e-15);
  double prev = 0.0;
  for (double c = -3.0; c <= 3.0; c += 0.5) {
    const double p = d.predict(b, c);
    EXPECT_GT(p, prev);
    prev = p;
  }
  EXPECT_NEAR(d.predict(s, &ff), sigmoid(main + d.calibration_score(s.target_item, s.history)), 1e-12);
}

TEST(Discriminator, ZeroMainAndCalibrationGiveHalf) {
  Rng rng(13);
  Discriminator d(testing::tiny_discriminator_config(), 3);
  for (auto& p : d.params().all()) {
    if (p.name.rfind("merge.", 0) == 0 || p.name.rfind("calib.mlp", 0) == 0) p.value.fill(0.0);
  }
  const Sample s = random_sample(rng, 2);
  const FlowFeatures ff = random_flow_features(3, 2, 6, rng);
  EXPECT_EQ(d.calibration_score(s.target_item, s.history), 0.0);
  EXPECT_EQ(d.predict(s, &ff), 0.5);
}

TEST(Discriminator, HandSetCalibrationNet) {
  DiscriminatorConfig c = testing::tiny_discriminator_config();
  c.calib_hidden = {};
  Discriminator d(c, 3);
  ParameterSet& ps = d.params();
  const Mlp& net = d.calibration_net();
  Matrix w(2 * c.emb_dim, 1);
  w(c.emb_dim, 0) = 2.0;  // first coordinate of e_t0
  ps[net.weights[0]].value = w;
  ps[net.biases[0]].value = Matrix{{0.25}};
  const Vector e = d.item_table().lookup(ps, 7);
  Moveline empty;
  EXPECT_NEAR(d.calibration_score(7, empty), 2.0 * e[0] + 0.25, 1e-15);
}

TEST(Discriminator, UserInterestContracts) {
  Rng rng(14);
  DiscriminatorConfig c = testing::tiny_discriminator_config();
  c.use_positions = false;
  Discriminator d(c, 3);
  Moveline empty;
  const Vector fallback = d.params()[d.interest_default()].value.row_copy(0);
  EXPECT_EQ(d.user_interest_repr(3, empty), fallback);

  Moveline one = testing::random_moveline(1, 12, 2, rng);
  const Vector h1 = d.user_interest_repr(3, one);
  const Parameter* wv = d.params().find("interest.wv");
  const Vector ev = [&] {
    Vector x(c.emb_dim, 0.0);
    for (const char* t : {"item_embedding", "scene_embedding", "behavior_embedding"}) {
      const std::size_t row = std::string(t) == "item_embedding"    ? one.events[0].item_id
                              : std::string(t) == "scene_embedding" ? one.events[0].scene_id
                                                                    : one.events[0].behavior_type;
      for (std::size_t k = 0; k < c.emb_dim; ++k) x[k] += d.params().find(t)->value(row, k);
    }
    return amen::matmul(Matrix::row_vector(x), wv->value).row_copy(0);
  }();
  for (std::size_t k = 0; k < c.emb_dim; ++k) EXPECT_NEAR(h1[k], ev[k], 1e-15);

  // Swapping two events with the same embedding inputs changes nothing.
  Moveline m = testing::random_moveline(4, 12, 2, rng);
  m.events[3] = m.events[1];
  Moveline swapped = m;
  std::swap(swapped.events[1], swapped.events[3]);
  const Vector a = d.user_interest_repr(5, m), b = d.user_interest_repr(5, swapped);
  for (std::size_t k = 0; k < c.emb_dim; ++k) EXPECT_NEAR(a[k], b[k], 1e-15);
}

TEST(Discriminator, AblationBundlesDropTheirFeatures) {
  Rng rng(15);
  DiscriminatorConfig full = testing::tiny_discriminator_config();
  const Sample s = random_sample(rng, 3);
  const FlowFeatures ff = random_flow_features(3, 2, 6, rng);

  const auto b_full = Discriminator(full, 1).bundle(s, &ff);
  EXPECT_TRUE(b_full.a_flow && b_full.mean_diversity_score && b_full.v_first);

  DiscriminatorConfig no_nif = full;
  no_nif.use_flow = false;
  const auto b_nif = Discriminator(no_nif, 1).bundle(s, nullptr);
  EXPECT_FALSE(b_nif.a_flow || b_nif.mean_diversity_score || b_nif.v_first);
  EXPECT_EQ(b_nif.concat().size(), no_nif.bundle_dim());

  DiscriminatorConfig mean = full;
  mean.flow_summary = FlowSummary::mean;
  const auto b_mean = Discriminator(mean, 1).bundle(s, &ff);
  for (std::size_t c = 0; c < 6; ++c) {
    double m = 0.0;
    for (std::size_t t = 0; t < 3; ++t) m += ff.flow(t, c) / 3.0;
    EXPECT_NEAR((*b_mean.a_flow)[c], m, 1e-15);
  }

  DiscriminatorConfig no_tsp = full;
  no_tsp.use_calibration = false;
  Discriminator d(no_tsp, 1);
  Tape tape(false);
  const auto out = d.forward(tape, s, &ff);
  EXPECT_FALSE(out.calibration.has_value());
  EXPECT_EQ(out.logit.value()[0], out.logit_main.value()[0]);
}

// All click-model tensors through CE + lambda * TSP, with flow features
// entering as constants.
TEST(Discriminator, Stage2GradientsMatchFiniteDifferences) {
  Rng rng(16);
  for (int trial = 0; trial < 3; ++trial) {
    DiscriminatorConfig c = testing::tiny_discriminator_config(trial == 1 ? 4 : 6);
    c.flow_summary = trial == 2 ? FlowSummary::mean : FlowSummary::attention;
    Discriminator d(c, 20 + trial);
    for (auto& p : d.params().all())
      for (double& v : p.value.values()) v += rng.normal(0.0, 0.3);
    Sample s = random_sample(rng, 3), diff = random_sample(rng, 2);
    diff.user_id = s.user_id;
    diff.label = 1 - s.label;
    const FlowFeatures ff = random_flow_features(3, 2, c.flow_dim, rng);
    const double lambda = 0.7;
    const auto rep = testing::gradcheck(d.params(), [&](Tape& tape) {
      const auto out = d.forward(tape, s, &ff);
      Var loss = bce_with_logits(out.logit, s.label);
      Var c_diff = d.calibration(tape, diff.target_item, diff.history);
      return ad::add(loss, ad::scale(tsp_loss(*out.calibration, c_diff, diff.label), lambda));
    });
    EXPECT_LT(rep.max_rel, 1e-4) << rep.worst;
  }
}

TEST(Discriminator, BceWithLogitsMatchesCrossEntropy) {
  Tape t(false);
  for (double z : {-3.0, -0.2, 0.0, 1.5}) {
    for (int y : {0, 1}) {
      EXPECT_NEAR(bce_with_logits(t.constant(Matrix{{z}}), y).value()[0], binary_cross_entropy(y, sigmoid(z)), 1e-12);
    }
  }
}

}  // namespace
}  // namespace amen
