// SPDX-License-Identifier: Apache-2.0

#include <doctest.h>

#include <cmath>

#include "cpa/adam.hpp"
#include "cpa/error.hpp"

using namespace cpa;

TEST_CASE("first Adam step moves each entry by the learning rate against its gradient") {
  Tensor p = Tensor::row_vector({1.0, -2.0, 0.5});
  AdamState adam(AdamConfig{0.1});
  adam.step(p, Tensor::row_vector({3.0, -0.5, 0.0}));
  CHECK(p[0] == doctest::Approx(0.9).epsilon(1e-7));
  CHECK(p[1] == doctest::Approx(-1.9).epsilon(1e-7));
  CHECK(p[2] == 0.5);
  CHECK(adam.step_count() == 1);
}

TEST_CASE("Adam matches a hand-rolled reference over several steps") {
  AdamConfig c{0.01, 0.0, 0.8, 0.9, 1e-8};
  Tensor p = Tensor::row_vector({0.3});
  AdamState adam(c);
  double x = 0.3, m = 0.0, v = 0.0;
  for (int t = 1; t <= 5; ++t) {
    const double g = 2.0 * x - 1.0;
    adam.step(p, Tensor::row_vector({2.0 * p[0] - 1.0}));
    m = c.beta1 * m + (1 - c.beta1) * g;
    v = c.beta2 * v + (1 - c.beta2) * g * g;
    const double mh = m / (1 - std::pow(c.beta1, t));
    const double vh = v / (1 - std::pow(c.beta2, t));
    x -= c.learning_rate * mh / (std::sqrt(vh) + c.epsilon);
    CHECK(p[0] == doctest::Approx(x).epsilon(1e-14));
  }
}

TEST_CASE("decoupled weight decay shrinks parameters with zero gradient") {
  Tensor p = Tensor::row_vector({2.0});
  AdamState adam(AdamConfig{0.1, 0.5});
  adam.step(p, Tensor::row_vector({0.0}));
  CHECK(p[0] == doctest::Approx(2.0 * (1 - 0.05)));
}

TEST_CASE("Adam rejects mismatched shapes and counts") {
  Tensor p = Tensor::row_vector({1.0, 2.0});
  AdamState adam;
  CHECK_THROWS_AS(adam.step(p, Tensor::row_vector({1.0})), ValidationError);
  adam.step(p, Tensor::row_vector({1.0, 1.0}));
  Tensor q = Tensor::row_vector({1.0});
  Tensor* both[] = {&p, &q};
  const Tensor grads[] = {Tensor::row_vector({1.0, 1.0}), Tensor::row_vector({1.0})};
  CHECK_THROWS_AS(adam.step(both, grads), ValidationError);
}
