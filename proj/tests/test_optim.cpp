// SPDX-License-Identifier: Apache-2.0
#include <gtest/gtest.h>

#include <cmath>

#include "ectrace/optim.hpp"

using namespace ectrace::ad;

namespace {

// Hand-unrolled Adam recurrence for one scalar.
struct ScalarAdam {
  double m = 0, v = 0;
  int t = 0;
  double step(double p, double g, double lr, double b1 = 0.9, double b2 = 0.999, double eps = 1e-8) {
    ++t;
    m = b1 * m + (1 - b1) * g;
    v = b2 * v + (1 - b2) * g * g;
    const double mh = m / (1 - std::pow(b1, t));
    const double vh = v / (1 - std::pow(b2, t));
    return p - lr * mh / (std::sqrt(vh) + eps);
  }
};

}  // namespace

TEST(Optim, AdamMatchesRecurrence) {
  std::vector<double> p{1.0, -2.0};
  AdamState st;
  ScalarAdam a0, a1;
  double r0 = 1.0, r1 = -2.0;
  for (int k = 0; k < 25; ++k) {
    const std::vector<double> g{std::sin(k * 0.7), 0.1 * k - 1};
    adam_step<double>(p, g, st, 0.01);
    r0 = a0.step(r0, g[0], 0.01);
    r1 = a1.step(r1, g[1], 0.01);
    EXPECT_DOUBLE_EQ(p[0], r0);
    EXPECT_DOUBLE_EQ(p[1], r1);
  }
  EXPECT_EQ(st.t, 25u);
}

TEST(Optim, FirstStepMovesByLearningRate) {
  // With bias correction the first update is lr * g / (|g| + eps).
  std::vector<double> p{0.0};
  AdamState st;
  adam_step<double>(p, std::vector<double>{3.0}, st, 0.05);
  EXPECT_NEAR(p[0], -0.05, 1e-9);
}

TEST(Optim, AdamWDecouplesDecay) {
  std::vector<double> p{2.0}, q{2.0};
  AdamState s1, s2;
  adamw_step<double>(p, std::vector<double>{0.0}, s1, 0.1, 0.5);
  EXPECT_DOUBLE_EQ(p[0], 2.0 * (1 - 0.1 * 0.5));
  adamw_step<double>(q, std::vector<double>{1.0}, s2, 0.1, 0.5);
  ScalarAdam ref;
  EXPECT_DOUBLE_EQ(q[0], ref.step(2.0 * 0.95, 1.0, 0.1));
}

TEST(Optim, OptimizerMinimizesQuadratic) {
  Tensor<double> w({2}, std::vector<double>{3.0, -4.0}, true);
  Optimizer<double> opt({w}, AdamSettings{0.1}, false);
  for (int i = 0; i < 500; ++i) {
    Graph<double> g;
    auto loss = sum_squares(g, w);
    opt.zero_grad();
    g.backward(loss);
    opt.step();
  }
  EXPECT_NEAR(w[0], 0.0, 1e-2);
  EXPECT_NEAR(w[1], 0.0, 1e-2);
}

TEST(Optim, SizeMismatch) {
  std::vector<double> p{1.0, 2.0};
  AdamState st;
  EXPECT_THROW(adam_step<double>(p, std::vector<double>{1.0}, st, 0.1), ShapeMismatch);
}
