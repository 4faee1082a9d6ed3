#include <gtest/gtest.h>

#include "support.hpp"

namespace amen {
namespace {

using testing::gradcheck;
using testing::random_matrix;

TEST(Matrix, ShapeAndAccess) {
  Matrix m{{1, 2, 3}, {4, 5, 6}};
  EXPECT_EQ(m.rows(), 2u);
  EXPECT_EQ(m.cols(), 3u);
  EXPECT_EQ(m(1, 2), 6.0);
  EXPECT_EQ(m.shape_string(), "2x3");
  EXPECT_THROW(Matrix(2, 2, std::vector<double>(3)), DimensionError);
}

TEST(Matrix, MatmulVariantsAgree) {
  Rng rng(11);
  for (int trial = 0; trial < 20; ++trial) {
    const std::size_t n = 1 + rng.below(5), k = 1 + rng.below(5), m = 1 + rng.below(5);
    const Matrix a = random_matrix(n, k, rng), b = random_matrix(k, m, rng);
    const Matrix ab = matmul(a, b);
    Matrix bt(m, k);
    for (std::size_t i = 0; i < k; ++i)
      for (std::size_t j = 0; j < m; ++j) bt(j, i) = b(i, j);
    Matrix at(k, n);
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = 0; j < k; ++j) at(j, i) = a(i, j);
    const Matrix nt = matmul_nt(a, bt), tn = matmul_tn(at, b);
    for (std::size_t i = 0; i < ab.size(); ++i) {
      EXPECT_NEAR(ab.values()[i], nt.values()[i], 1e-12);
      EXPECT_NEAR(ab.values()[i], tn.values()[i], 1e-12);
    }
  }
  EXPECT_THROW(matmul(Matrix(2, 3), Matrix(2, 3)), DimensionError);
}

TEST(Attention, SingleKeyReturnsItsValue) {
  const Matrix k{{0.3, -1.0}}, v{{2.0, 5.0}};
  const auto r = attention(std::vector<double>{7.0, 1.0}, k, v, 0.5);
  ASSERT_EQ(r.weights.size(), 1u);
  EXPECT_EQ(r.weights[0], 1.0);
  EXPECT_EQ(r.output, (Vector{2.0, 5.0}));
}

TEST(Attention, HandComputedTwoKeys) {
  const Matrix kv{{1, 0}, {0, 1}};
  const auto r = attention(std::vector<double>{1.0, 0.0}, kv, kv, 1.0);
  const double w0 = std::exp(1.0) / (std::exp(1.0) + 1.0);
  EXPECT_NEAR(r.weights[0], w0, 1e-15);
  EXPECT_NEAR(r.weights[0], 0.73106, 1e-5);
  EXPECT_NEAR(r.weights[1], 0.26894, 1e-5);
  EXPECT_NEAR(r.output[0], 0.73106, 1e-5);
  EXPECT_NEAR(r.output[1], 0.26894, 1e-5);
}

TEST(Attention, IdenticalKeysGiveColumnMean) {
  const Matrix k{{1, 2}, {1, 2}, {1, 2}}, v{{1, 0}, {2, 3}, {6, 3}};
  const auto r = attention(std::vector<double>{0.4, -0.2}, k, v, 1.0);
  EXPECT_NEAR(r.output[0], 3.0, 1e-12);
  EXPECT_NEAR(r.output[1], 2.0, 1e-12);
}

TEST(Attention, Errors) {
  const Matrix k(2, 3), v(2, 3);
  EXPECT_THROW(attention(std::vector<double>{1, 2}, k, v, 1.0), DimensionError);
  EXPECT_THROW(attention(std::vector<double>{1, 2, 3}, Matrix(0, 3), Matrix(0, 3), 1.0), DimensionError);
  EXPECT_THROW(attention(std::vector<double>{1, 2, 3}, k, Matrix(3, 3), 1.0), DimensionError);
  EXPECT_THROW(attention(std::vector<double>{1, 2, 3}, k, v, 0.0), Error);
}

TEST(Attention, WeightsFormADistributionAndIgnoreLogitShift) {
  Rng rng(5);
  for (int trial = 0; trial < 50; ++trial) {
    const std::size_t t = 1 + rng.below(8), d = 1 + rng.below(8);
    const Matrix k = random_matrix(t, d, rng), v = random_matrix(t, d, rng);
    Vector q = testing::random_vector(d, rng);
    const auto r = attention(q, k, v, 0.7);
    double s = 0.0;
    for (double w : r.weights) {
      EXPECT_GE(w, 0.0);
      s += w;
    }
    EXPECT_NEAR(s, 1.0, 1e-12);

    // A key column of ones with an extra query coordinate shifts every
    // logit by the same constant.
    Matrix k2(t, d + 1);
    for (std::size_t j = 0; j < t; ++j) {
      for (std::size_t c = 0; c < d; ++c) k2(j, c) = k(j, c);
      k2(j, d) = 1.0;
    }
    Vector q2 = q;
    q2.push_back(rng.normal(0.0, 3.0));
    const auto r2 = attention(q2, k2, v, 0.7);
    for (std::size_t c = 0; c < d; ++c) EXPECT_NEAR(r.output[c], r2.output[c], 1e-10);
  }
}

TEST(Mlp, ZeroWeightsGiveZeroOutput) {
  ParameterSet ps;
  Rng rng(1);
  Mlp mlp = Mlp::create(ps, "m", {3, 4, 2}, rng);
  for (auto& p : ps.all()) p.value.fill(0.0);
  EXPECT_EQ(mlp_apply(ps, mlp, Vector{1, -2, 3}), (Vector{0.0, 0.0}));
}

TEST(Mlp, IdentityLayer) {
  ParameterSet ps;
  Rng rng(1);
  Mlp mlp = Mlp::create(ps, "m", {3, 3}, rng);
  ps[mlp.weights[0]].value = Matrix{{1, 0, 0}, {0, 1, 0}, {0, 0, 1}};
  EXPECT_EQ(mlp_apply(ps, mlp, Vector{1.5, -2, 3}), (Vector{1.5, -2, 3}));
}

TEST(Mlp, HandSetOneTwoOne) {
  ParameterSet ps;
  Rng rng(1);
  Mlp mlp = Mlp::create(ps, "m", {1, 2, 1}, rng);
  ps[mlp.weights[0]].value = Matrix{{1.0, -1.0}};
  ps[mlp.biases[0]].value = Matrix{{0.5, 0.25}};
  ps[mlp.weights[1]].value = Matrix{{2.0}, {3.0}};
  ps[mlp.biases[1]].value = Matrix{{-1.0}};
  // x=2: hidden relu([2.5, -1.75]) = [2.5, 0]; out = 5 - 1 = 4
  EXPECT_EQ(mlp_apply(ps, mlp, Vector{2.0})[0], 4.0);
  // x=-1: hidden relu([-0.5, 1.25]) = [0, 1.25]; out = 3.75 - 1
  EXPECT_EQ(mlp_apply(ps, mlp, Vector{-1.0})[0], 2.75);
  EXPECT_THROW(mlp_apply(ps, mlp, Vector{1.0, 2.0}), DimensionError);

  Tape tape(false);
  EXPECT_EQ(mlp.forward(tape, std::as_const(ps), tape.constant(Matrix{{2.0}})).value()[0], 4.0);
}

TEST(Sgd, Examples) {
  Matrix p{{1.0}}, g{{0.5}};
  sgd_update(p, g, 0.1);
  EXPECT_DOUBLE_EQ(p(0, 0), 0.95);

  Matrix z{{1.0, 2.0}};
  sgd_update(z, Matrix(1, 2), 0.3);
  EXPECT_EQ(z, (Matrix{{1.0, 2.0}}));

  Matrix a{{0.25, -3.0}}, b = a;
  const Matrix c{{0.5, 0.125}};
  sgd_update(a, c, 0.25);
  sgd_update(a, c, 0.25);
  sgd_update(b, c, 0.5);
  EXPECT_EQ(a, b);

  EXPECT_THROW(sgd_update(a, Matrix(2, 2), 0.1), DimensionError);
  EXPECT_THROW(sgd_update(a, c, 0.0), Error);
}

TEST(Rng, DerivedStreamsAreReproducibleAndDistinct) {
  Rng a = Rng::derived(42, "x", 3), b = Rng::derived(42, "x", 3), c = Rng::derived(42, "x", 4);
  bool differs = false;
  for (int i = 0; i < 16; ++i) {
    const auto va = a.below(1000000), vb = b.below(1000000), vc = c.below(1000000);
    EXPECT_EQ(va, vb);
    differs |= va != vc;
  }
  EXPECT_TRUE(differs);
}

// ------------------------------------------------------------ op gradients

// Sum of the op output weighted by a fixed random matrix, so every output
// entry carries a distinct upstream gradient.
Var weighted(Tape& t, Var y, const Matrix& w) { return ad::sum(ad::mul(y, t.constant(w))); }

struct OpCase {
  const char* name;
  // Builds inputs as parameters; returns the loss builder.
  std::function<std::function<Var(Tape&)>(ParameterSet&, Rng&)> make;
};

std::vector<OpCase> op_cases() {
  auto dims = [](Rng& rng) { return std::pair{1 + rng.below(8), 1 + rng.below(8)}; };
  std::vector<OpCase> cases;
  auto unary = [&](const char* name, std::function<Var(Var)> op, double shift = 0.0) {
    cases.push_back({name, [=](ParameterSet& ps, Rng& rng) {
                       auto [r, c] = dims(rng);
                       Matrix x = random_matrix(r, c, rng);
                       for (double& v : x.values()) {
                         v += shift;
                         if (std::abs(v) < 1e-3) v = 0.5;  // keep away from relu kinks
                       }
                       const ParamId a = ps.add("a", x);
                       Tape probe(false);
                       const Matrix w = random_matrix(op(probe.constant(x)).value().rows(),
                                                      op(probe.constant(x)).value().cols(), rng);
                       return std::function<Var(Tape&)>([&ps, a, w, op](Tape& t) {
                         return weighted(t, op(t.param(ps[a])), w);
                       });
                     }});
  };
  auto binary = [&](const char* name, std::function<Var(Var, Var)> op,
                    std::function<std::pair<std::pair<std::size_t, std::size_t>, std::pair<std::size_t, std::size_t>>(Rng&)>
                        shapes) {
    cases.push_back({name, [=](ParameterSet& ps, Rng& rng) {
                       auto [sa, sb] = shapes(rng);
                       const Matrix xa = random_matrix(sa.first, sa.second, rng);
                       const Matrix xb = random_matrix(sb.first, sb.second, rng);
                       const ParamId a = ps.add("a", xa), b = ps.add("b", xb);
                       Tape probe(false);
                       const Matrix& y = op(probe.constant(xa), probe.constant(xb)).value();
                       const Matrix w = random_matrix(y.rows(), y.cols(), rng);
                       return std::function<Var(Tape&)>([&ps, a, b, w, op](Tape& t) {
                         return weighted(t, op(t.param(ps[a]), t.param(ps[b])), w);
                       });
                     }});
  };
  auto same = [dims](Rng& rng) {
    auto s = dims(rng);
    return std::pair{s, s};
  };
  binary("add", ad::add, same);
  binary("sub", ad::sub, same);
  binary("mul", ad::mul, same);
  binary("add_row", ad::add_row, [dims](Rng& rng) {
    auto s = dims(rng);
    return std::pair{s, std::pair<std::size_t, std::size_t>{1, s.second}};
  });
  binary("matmul", ad::matmul, [](Rng& rng) {
    const std::size_t n = 1 + rng.below(8), k = 1 + rng.below(8), m = 1 + rng.below(8);
    return std::pair{std::pair{n, k}, std::pair{k, m}};
  });
  binary("matmul_nt", ad::matmul_nt, [](Rng& rng) {
    const std::size_t n = 1 + rng.below(8), k = 1 + rng.below(8), m = 1 + rng.below(8);
    return std::pair{std::pair{n, k}, std::pair{m, k}};
  });
  binary("concat_cols", [](Var a, Var b) { return ad::concat_cols({a, b}); }, [](Rng& rng) {
    const std::size_t r = 1 + rng.below(8);
    return std::pair{std::pair{r, 1 + rng.below(8)}, std::pair{r, 1 + rng.below(8)}};
  });
  binary("concat_rows", [](Var a, Var b) { return ad::concat_rows({a, b}); }, [](Rng& rng) {
    const std::size_t c = 1 + rng.below(8);
    return std::pair{std::pair{1 + rng.below(8), c}, std::pair{1 + rng.below(8), c}};
  });
  binary("attend", [](Var q, Var kv) { return attend(q, kv, kv, 0.6); }, [](Rng& rng) {
    const std::size_t d = 1 + rng.below(8);
    return std::pair{std::pair{1 + rng.below(8), d}, std::pair{1 + rng.below(8), d}};
  });
  unary("scale", [](Var a) { return ad::scale(a, -1.7); });
  unary("relu", ad::relu);
  unary("softplus", ad::softplus);
  unary("sum", ad::sum);
  unary("sum_squares", ad::sum_squares);
  unary("mean_rows", ad::mean_rows);
  unary("slice_rows", [](Var a) {
    const std::size_t r = a.value().rows();
    return ad::slice_rows(a, r / 2, r - r / 2);
  });
  unary("slice_cols", [](Var a) {
    const std::size_t c = a.value().cols();
    return ad::slice_cols(a, c / 3, c - c / 3);
  });
  unary("reshape", [](Var a) { return ad::reshape(a, 1, a.value().size()); });
  unary("softmax_rows", [](Var a) { return ad::softmax_rows(a); });
  unary("softmax_rows_causal", [](Var a) { return ad::softmax_rows(a, std::size_t{0}); });
  unary("cross_entropy_logits", [](Var a) {
    Var row = ad::reshape(a, 1, a.value().size());
    return ad::cross_entropy_logits(row, a.value().size() / 2);
  });
  cases.push_back({"gather", [](ParameterSet& ps, Rng& rng) {
                     const std::size_t vocab = 2 + rng.below(7), d = 1 + rng.below(8);
                     const ParamId tbl = ps.add("table", random_matrix(vocab, d, rng));
                     std::vector<std::size_t> ids;
                     for (std::size_t i = 0, n = 1 + rng.below(6); i < n; ++i) ids.push_back(rng.below(vocab));
                     const Matrix w = random_matrix(ids.size(), d, rng);
                     return std::function<Var(Tape&)>(
                         [&ps, tbl, ids, w](Tape& t) { return weighted(t, t.gather(ps[tbl], ids), w); });
                   }});
  return cases;
}

TEST(Gradients, EveryOpMatchesCentralDifferences) {
  for (const OpCase& op : op_cases()) {
    Rng rng = Rng::derived(2024, op.name);
    double worst = 0.0;
    for (int config = 0; config < 25; ++config) {
      ParameterSet ps;
      const auto loss = op.make(ps, rng);
      const auto rep = gradcheck(ps, loss);
      EXPECT_LT(rep.max_rel, 1e-4) << op.name << " config " << config << ": " << rep.worst;
      worst = std::max(worst, rep.max_rel);
    }
    SCOPED_TRACE(op.name);
    EXPECT_LT(worst, 1e-4);
  }
}

TEST(Gradients, GatherTouchesOnlyGatheredRows) {
  ParameterSet ps;
  Rng rng(9);
  const ParamId tbl = ps.add("table", random_matrix(10, 4, rng));
  Tape tape;
  tape.backward(ad::sum_squares(tape.gather(ps[tbl], {2, 7, 2})));
  for (std::size_t r = 0; r < 10; ++r) {
    for (std::size_t c = 0; c < 4; ++c) {
      if (r == 2 || r == 7) {
        EXPECT_NE(ps[tbl].grad(r, c), 0.0);
      } else {
        EXPECT_EQ(ps[tbl].grad(r, c), 0.0);
      }
    }
  }
}

TEST(Gradients, NoGradTapeRefusesBackward) {
  ParameterSet ps;
  Rng rng(2);
  const ParamId a = ps.add("a", random_matrix(3, 3, rng));
  Tape tape(false);
  Var y = ad::sum_squares(tape.param(ps[a]));
  EXPECT_FALSE(tape.needs_grad(y));
  EXPECT_THROW(tape.backward(y), Error);
  EXPECT_EQ(ps.grad_norm(), 0.0);
}

TEST(Values, FiniteInFiniteOut) {
  Rng rng(4);
  for (int i = 0; i < 50; ++i) {
    Tape t(false);
    Var x = t.constant(random_matrix(3, 4, rng, 30.0));
    Var y = ad::softmax_rows(ad::softplus(ad::matmul_nt(x, x)));
    EXPECT_TRUE(y.value().all_finite());
    EXPECT_TRUE(ad::cross_entropy_logits(ad::slice_rows(ad::scale(x, 40.0), 0, 1), 1).value().all_finite());
  }
}

}  // namespace
}  // namespace amen
