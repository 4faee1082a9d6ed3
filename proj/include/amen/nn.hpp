#pragma once

#include <cmath>
#include <optional>
#include <string>
#include <vector>

#include "amen/autodiff.hpp"
#include "amen/rng.hpp"

namespace amen {

// uniform(-a, a), a = sqrt(6 / (fan_in + fan_out))
inline Matrix xavier_uniform(std::size_t fan_in, std::size_t fan_out, Rng& rng) {
  const double a = std::sqrt(6.0 / static_cast<double>(fan_in + fan_out));
  Matrix m(fan_in, fan_out);
  for (double& v : m.values()) v = rng.uniform(-a, a);
  return m;
}

inline Matrix normal_matrix(std::size_t rows, std::size_t cols, double stddev, Rng& rng) {
  Matrix m(rows, cols);
  for (double& v : m.values()) v = rng.normal(0.0, stddev);
  return m;
}

enum class Activation { relu, identity };

// Affine layers x * W + b, W stored fan_in x fan_out. Hidden layers use
// `hidden`, the last one `output`.
struct Mlp {
  std::vector<ParamId> weights;
  std::vector<ParamId> biases;
  Activation hidden = Activation::relu;
  Activation output = Activation::identity;

  static Mlp create(ParameterSet& params, const std::string& prefix, const std::vector<std::size_t>& dims,
                    Rng& rng) {
    if (dims.size() < 2) throw DimensionError("mlp " + prefix + ": need at least input and output dims");
    Mlp mlp;
    for (std::size_t l = 0; l + 1 < dims.size(); ++l) {
      const std::string tag = prefix + ".l" + std::to_string(l);
      mlp.weights.push_back(params.add(tag + ".w", xavier_uniform(dims[l], dims[l + 1], rng)));
      mlp.biases.push_back(params.add(tag + ".b", Matrix(1, dims[l + 1])));
    }
    return mlp;
  }

  std::size_t input_dim(const ParameterSet& params) const { return params[weights.front()].value.rows(); }
  std::size_t output_dim(const ParameterSet& params) const { return params[weights.back()].value.cols(); }

  template <typename Params>
  Var forward(Tape& tape, Params& params, Var x) const {
    for (std::size_t l = 0; l < weights.size(); ++l) {
      x = ad::add_row(ad::matmul(x, tape.param(params[weights[l]])), tape.param(params[biases[l]]));
      const Activation act = l + 1 == weights.size() ? output : hidden;
      if (act == Activation::relu) x = ad::relu(x);
    }
    return x;
  }
};

inline Vector mlp_apply(const ParameterSet& params, const Mlp& mlp, std::span<const double> input) {
  Vector x(input.begin(), input.end());
  for (std::size_t l = 0; l < mlp.weights.size(); ++l) {
    const Matrix& w = params[mlp.weights[l]].value;
    const Matrix& b = params[mlp.biases[l]].value;
    if (w.rows() != x.size()) {
      throw DimensionError("mlp_apply: layer " + std::to_string(l) + " expects " + std::to_string(w.rows()) +
                           " inputs, got " + std::to_string(x.size()));
    }
    Vector y(b.values().begin(), b.values().end());
    for (std::size_t i = 0; i < w.rows(); ++i) {
      if (x[i] == 0.0) continue;
      for (std::size_t j = 0; j < w.cols(); ++j) y[j] += x[i] * w(i, j);
    }
    const Activation act = l + 1 == mlp.weights.size() ? mlp.output : mlp.hidden;
    if (act == Activation::relu) {
      for (double& v : y) v = v > 0.0 ? v : 0.0;
    }
    x = std::move(y);
  }
  return x;
}

// softmax(scale * q k^T [masked]) v on the tape.
inline Var attend(Var queries, Var keys, Var values, double scale,
                  std::optional<std::size_t> causal_offset = std::nullopt) {
  Var scores = ad::scale(ad::matmul_nt(queries, keys), scale);
  return ad::matmul(ad::softmax_rows(scores, causal_offset), values);
}

}  // namespace amen
