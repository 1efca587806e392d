// SPDX-License-Identifier: Apache-2.0
#include "cchp/autodiff.hpp"

#include <gtest/gtest.h>

#include <functional>
#include <random>

using namespace cchp;
using ad::Tape;
using ad::Var;

namespace {

Matrix random_matrix(Eigen::Index r, Eigen::Index c, std::mt19937_64& g, double lo = -1.0, double hi = 1.0) {
  std::uniform_real_distribution<double> u(lo, hi);
  Matrix m(r, c);
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = u(g);
  return m;
}

// Scalar f(params) built on a tape; reduces matrix outputs against a fixed random weighting.
using Builder = std::function<Var(Tape&, const std::vector<Var>&)>;

double max_rel_error(std::vector<Parameter>& params, const Builder& build) {
  Tape tape;
  std::vector<Var> vars;
  for (auto& p : params) {
    p.grad.resize(0, 0);
    vars.push_back(tape.parameter(p));
  }
  tape.backward(build(tape, vars));
  double worst = 0.0;
  for (auto& p : params) {
    if (p.grad.size() == 0) p.grad = Matrix::Zero(p.value.rows(), p.value.cols());
    if (p.grad.rows() != p.value.rows() || p.grad.cols() != p.value.cols()) return 1.0;
    for (Eigen::Index i = 0; i < p.value.size(); ++i) {
      const double old = p.value.data()[i];
      const double h = 1e-6;
      auto eval = [&] {
        Tape t(false);
        std::vector<Var> vs;
        for (auto& q : params) vs.push_back(t.constant(q.value));
        return build(t, vs).scalar();
      };
      p.value.data()[i] = old + h;
      const double up = eval();
      p.value.data()[i] = old - h;
      const double down = eval();
      p.value.data()[i] = old;
      const double fd = (up - down) / (2 * h);
      const double an = p.grad.data()[i];
      const double err = std::abs(fd - an) / std::max(1e-6, std::abs(fd) + std::abs(an));
      worst = std::max(worst, err);
    }
  }
  return worst;
}

double check(std::vector<Parameter> params, const Builder& build) { return max_rel_error(params, build); }

Var reduce(Tape& t, const Var& x, std::uint64_t seed = 99) {
  std::mt19937_64 g(seed);
  return ad::sum(ad::hadamard(x, t.constant(random_matrix(x.rows(), x.cols(), g))));
}

}  // namespace

TEST(Autodiff, ElementwiseOpsMatchFiniteDifferences) {
  std::mt19937_64 g(1);
  const std::vector<std::pair<const char*, std::function<Var(const Var&)>>> ops{
      {"relu", [](const Var& x) { return ad::relu(x); }},
      {"sigmoid", [](const Var& x) { return ad::sigmoid(x); }},
      {"tanh", [](const Var& x) { return ad::tanh(x); }},
      {"softplus", [](const Var& x) { return ad::softplus(x, 1e-6); }},
      {"exp", [](const Var& x) { return ad::exp(x); }},
      {"square", [](const Var& x) { return ad::square(x); }},
      {"scale", [](const Var& x) { return ad::scale(x, -2.5); }},
  };
  for (const auto& [name, op] : ops) {
    Matrix v = random_matrix(3, 4, g);
    // keep away from the relu kink
    for (Eigen::Index i = 0; i < v.size(); ++i) {
      if (std::abs(v.data()[i]) < 0.05) v.data()[i] = 0.3;
    }
    const double err = check({{"x", v, {}}}, [&](Tape& t, const auto& p) { return reduce(t, op(p[0])); });
    EXPECT_LT(err, 1e-6) << name;
  }
  const double err = check({{"x", random_matrix(2, 5, g, 0.2, 2.0), {}}},
                           [](Tape& t, const auto& p) { return reduce(t, ad::sqrt(p[0])); });
  EXPECT_LT(err, 1e-6);
}

TEST(Autodiff, StructuralOpsMatchFiniteDifferences) {
  std::mt19937_64 g(2);
  std::vector<Parameter> ps{{"a", random_matrix(4, 3, g), {}}, {"b", random_matrix(3, 5, g), {}},
                            {"row", random_matrix(1, 5, g), {}}};
  EXPECT_LT(check(ps, [](Tape& t, const auto& p) { return reduce(t, ad::add_row(ad::matmul(p[0], p[1]), p[2])); }),
            1e-6);
  EXPECT_LT(check(ps, [](Tape& t, const auto& p) {
              const Var m = ad::matmul(p[0], p[1]);
              return reduce(t, ad::concat_cols({ad::slice_cols(m, 1, 3), ad::repeat_rows(p[2], 4)}));
            }),
            1e-6);
  EXPECT_LT(check(ps, [](Tape& t, const auto& p) {
              const Var m = ad::matmul(p[0], p[1]);
              const std::vector<Var> parts{ad::slice_rows(m, 2, 2), p[2]};
              return reduce(t, ad::reshape(ad::concat_rows(parts), 5, 3));
            }),
            1e-6);
  EXPECT_LT(check(ps, [](Tape& t, const auto& p) {
              const Var m = ad::matmul(p[0], p[1]);
              return reduce(t, ad::gather_rows(m, {3, -1, 0, 3}));
            }),
            1e-6);
  EXPECT_LT(check(ps, [](Tape& t, const auto& p) {
              const Var m = ad::matmul(p[0], p[1]);
              return reduce(t, ad::segment_sum(m, {1, 0, -1, 1}, {0.5, 2.0, 1.0, -1.0}, 2));
            }),
            1e-6);
  EXPECT_LT(check(ps, [](Tape& t, const auto& p) {
              const Var m = ad::matmul(p[0], p[1]);
              return reduce(t, ad::sub(ad::hadamard(m, m), ad::add(m, ad::repeat_rows(p[2], 4))));
            }),
            1e-6);
}

TEST(Autodiff, FusedAttentionMatchesFiniteDifferences) {
  std::mt19937_64 g(3);
  const Matrix values = random_matrix(2 * 4, 3, g);
  Matrix mask = Matrix::Ones(2, 4);
  mask(1, 3) = 0.0;
  std::vector<Parameter> ps{{"q", random_matrix(2, 5, g), {}}, {"k", random_matrix(8, 5, g), {}}};
  EXPECT_LT(check(ps, [&](Tape& t, const auto& p) { return reduce(t, ad::masked_attention(p[0], p[1], values, mask)); }),
            1e-6);
}

TEST(Autodiff, FusedGaussianTermsMatchFiniteDifferences) {
  std::mt19937_64 g(4);
  const Matrix y = random_matrix(3, 4, g);
  Vector w(3);
  w << 1.0, 0.0, 2.0;
  std::vector<Parameter> ps{{"m", random_matrix(3, 4, g), {}}, {"v", random_matrix(3, 4, g, 0.1, 1.5), {}},
                            {"m2", random_matrix(3, 4, g), {}}, {"v2", random_matrix(3, 4, g, 0.1, 1.5), {}}};
  EXPECT_LT(check(ps, [&](Tape&, const auto& p) { return ad::gaussian_nll(y, p[0], p[1], w); }), 1e-6);
  EXPECT_LT(check(ps, [&](Tape&, const auto& p) { return ad::gaussian_kl(p[0], p[1], p[2], p[3], w); }), 1e-6);
}

TEST(Autodiff, SharedParameterAccumulatesGradient) {
  Parameter p{"x", Matrix::Constant(1, 1, 3.0), {}};
  Tape t;
  const Var a = t.parameter(p);
  const Var b = t.parameter(p);  // same binding
  t.backward(ad::sum(ad::hadamard(a, b)));
  EXPECT_DOUBLE_EQ(p.grad(0, 0), 6.0);
}

TEST(Autodiff, InferenceTapeRecordsNoGradients) {
  Parameter p{"x", Matrix::Constant(2, 2, 1.0), {}};
  Tape t(false);
  const Var y = ad::relu(t.parameter(p));
  EXPECT_FALSE(t.recording());
  EXPECT_DOUBLE_EQ(y.value().sum(), 4.0);
}

TEST(Autodiff, ShapeMismatchThrows) {
  Tape t;
  const Var a = t.constant(Matrix::Zero(2, 3));
  const Var b = t.constant(Matrix::Zero(2, 2));
  EXPECT_THROW(ad::matmul(a, b), std::invalid_argument);
  EXPECT_THROW(ad::add(a, b), std::invalid_argument);
  EXPECT_THROW(ad::segment_sum(a, {0}, {1.0}, 1), std::invalid_argument);
}
