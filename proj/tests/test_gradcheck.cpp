#include "support/op_cases.hpp"

#include <doctest.h>

using namespace pomni;
using namespace pomni::testing;

TEST_CASE("every operator matches central differences at 20 random points") {
  for (const auto& c : op_cases()) {
    const auto r = run_case(c, 20240611, 20);
    INFO(c.name << " rel error " << r.max_rel_error);
    CHECK(r.max_rel_error <= 1e-4);
  }
}

TEST_CASE("stop_gradient blocks and straight_through forwards") {
  Tape<double> tape;
  auto x = tape.input(Tensor<double>::from({3}, {1.0, -2.0, 0.5}));
  auto y = tape.input(Tensor<double>::from({3}, {4.0, 4.0, 4.0}));
  auto loss = sum(add(stop_gradient(x), straight_through(y, x)));
  tape.backward(loss);
  auto gx = tape.grad(x);
  auto gy = tape.grad(y);
  for (Index i = 0; i < 3; ++i) {
    CHECK(gx[i] == doctest::Approx(1.0));
    CHECK(gy[i] == 0.0);
  }
  CHECK(loss.value().item() == doctest::Approx(-0.5 + 12.0));
}
