#include <cstring>
#include <vector>

#include "doctest.h"
#include "kae/autodiff.hpp"
#include "kae/common.hpp"

using namespace kae;
using namespace kae::ad;

namespace {

Tensor random_tensor(std::vector<std::int64_t> shape, Rng& rng, double lo = -1.5,
                     double hi = 1.5) {
  Tensor t(std::move(shape));
  for (std::int64_t i = 0; i < t.numel(); ++i) t[i] = rng.uniform(lo, hi);
  return t;
}

// Weighted scalar readout so the check exercises a distinct adjoint per
// output entry instead of the all-ones seed sum() would give.
Value weighted_readout(Value v, Rng& rng) {
  Tensor w = random_tensor(v.val().shape(), rng, 0.2, 1.0);
  return dot(v, v.tape->constant(w));
}

}  // namespace

TEST_CASE("forward evaluate and gradient on x -> square -> sum") {
  Tape t;
  Value x = t.input("x", Tensor({3}, {1.0, 2.0, 3.0}), true);
  Value loss = sum(square(x));
  t.mark_output("loss", loss);

  CHECK(loss.scalar() == doctest::Approx(14.0).epsilon(1e-15));

  auto out = t.evaluate({{"x", Tensor({3}, {1.0, 2.0, 3.0})}});
  REQUIRE(out.size() == 1);
  CHECK(out[0].second[0] == doctest::Approx(14.0).epsilon(1e-15));

  t.backward(loss);
  Tensor g = t.grad("x");
  CHECK(g[0] == doctest::Approx(2.0));
  CHECK(g[1] == doctest::Approx(4.0));
  CHECK(g[2] == doctest::Approx(6.0));
}

TEST_CASE("gradients accumulate across leaf reuse") {
  // y = sum(x*x + x) -> dy/dx = 2x + 1
  Tape t;
  Value x = t.input("x", Tensor({4}, {0.5, -1.0, 2.0, 0.0}), true);
  Value y = sum(add(mul(x, x), x));
  t.backward(y);
  Tensor g = t.grad("x");
  const double expect[4] = {2.0, -1.0, 5.0, 1.0};
  for (int i = 0; i < 4; ++i) CHECK(g[i] == doctest::Approx(expect[i]));
}

TEST_CASE("every primitive passes the central finite-difference oracle") {
  const double h = 1e-5;
  const double tol = 1e-5;
  Rng rng(20260816);

  SUBCASE("add / sub / mul") {
    Tape t;
    Value a = t.input("a", random_tensor({3, 4}, rng), true);
    Value b = t.input("b", random_tensor({3, 4}, rng), true);
    Value out = mul(sub(add(a, b), mul(a, b)), b);
    Value loss = weighted_readout(out, rng);
    CHECK(finite_difference_check(t, loss, "a", h) < tol);
    CHECK(finite_difference_check(t, loss, "b", h) < tol);
  }

  SUBCASE("matmul") {
    Tape t;
    Value a = t.input("a", random_tensor({3, 4}, rng), true);
    Value b = t.input("b", random_tensor({4, 2}, rng), true);
    Value loss = weighted_readout(matmul(a, b), rng);
    CHECK(finite_difference_check(t, loss, "a", h) < tol);
    CHECK(finite_difference_check(t, loss, "b", h) < tol);
  }

  SUBCASE("reshape") {
    Tape t;
    Value a = t.input("a", random_tensor({3, 4}, rng), true);
    Value loss = weighted_readout(reshape(a, {2, 6}), rng);
    CHECK(finite_difference_check(t, loss, "a", h) < tol);
  }

  SUBCASE("concat along both axes") {
    Tape t;
    Value a = t.input("a", random_tensor({2, 3}, rng), true);
    Value b = t.input("b", random_tensor({2, 3}, rng), true);
    Value out = concat(concat(a, b, 0), concat(b, a, 0), 1);
    Value loss = weighted_readout(out, rng);
    CHECK(finite_difference_check(t, loss, "a", h) < tol);
    CHECK(finite_difference_check(t, loss, "b", h) < tol);
  }

  SUBCASE("slice") {
    Tape t;
    Value a = t.input("a", random_tensor({3, 5}, rng), true);
    Value out = add(slice(a, 1, 1, 3), slice(a, 1, 2, 3));
    Value loss = weighted_readout(out, rng);
    CHECK(finite_difference_check(t, loss, "a", h) < tol);
  }

  SUBCASE("sum and mean") {
    Tape t;
    Value a = t.input("a", random_tensor({4, 3}, rng), true);
    Value loss = add(sum(mul(a, a)), mean(a));
    CHECK(finite_difference_check(t, loss, "a", h) < tol);
  }

  SUBCASE("tanh / silu / square / cos / softplus") {
    Tape t;
    Value a = t.input("a", random_tensor({17}, rng), true);
    Value out = add(add(tanh(a), silu(a)), add(square(a), cos(a)));
    Value loss = weighted_readout(add(out, softplus(a)), rng);
    CHECK(finite_difference_check(t, loss, "a", h) < tol);
  }

  SUBCASE("sqrt away from zero") {
    Tape t;
    Value a = t.input("a", random_tensor({11}, rng, 0.5, 2.0), true);
    Value loss = weighted_readout(sqrt(a), rng);
    CHECK(finite_difference_check(t, loss, "a", h) < tol);
  }

  SUBCASE("recip away from zero") {
    Tape t;
    Value a = t.input("a", random_tensor({11}, rng, 0.5, 2.0), true);
    Value loss = weighted_readout(recip(a), rng);
    CHECK(finite_difference_check(t, loss, "a", h) < tol);
  }
}

TEST_CASE("deep composite graph passes the oracle") {
  Rng rng(7);
  Tape t;
  Value a = t.input("a", random_tensor({4, 4}, rng), true);
  Value b = t.input("b", random_tensor({4, 1}, rng), true);
  Value z = matmul(a, b);
  for (int i = 0; i < 3; ++i) z = silu(add(matmul(a, z), b));
  Value loss = add(norm2(z), mse(z, b));
  CHECK(finite_difference_check(t, loss, "a", 1e-5) < 1e-5);
  CHECK(finite_difference_check(t, loss, "b", 1e-5) < 1e-5);
}

TEST_CASE("stop_grad blocks the reverse sweep but replays forward") {
  Tape t;
  Value x = t.input("x", Tensor({2}, {1.0, 2.0}), true);
  Value y = sum(mul(stop_grad(x), x));  // d/dx treats first factor constant
  t.backward(y);
  Tensor g = t.grad("x");
  CHECK(g[0] == doctest::Approx(1.0));
  CHECK(g[1] == doctest::Approx(2.0));

  t.set_leaf("x", Tensor({2}, {3.0, 4.0}));
  t.replay();
  CHECK(y.scalar() == doctest::Approx(25.0));
}

TEST_CASE("replay is bit-identical") {
  Rng rng(99);
  Tape t;
  Value a = t.input("a", random_tensor({8, 8}, rng), true);
  Value b = t.input("b", random_tensor({8, 8}, rng), true);
  Value z = matmul(silu(matmul(a, b)), tanh(sub(a, b)));
  Value loss = mean(square(z));
  const double first = loss.scalar();
  std::vector<double> vals1 = z.val().values();
  t.replay();
  const double second = loss.scalar();
  std::vector<double> vals2 = z.val().values();
  CHECK(std::memcmp(&first, &second, sizeof(double)) == 0);
  REQUIRE(vals1.size() == vals2.size());
  CHECK(std::memcmp(vals1.data(), vals2.data(),
                    vals1.size() * sizeof(double)) == 0);
}

TEST_CASE("non-finite forward values raise NumericError") {
  Tape t;
  Value a = t.input("a", Tensor({2}, {1.0, 0.0}), false);
  CHECK_THROWS_AS((void)recip(a), NumericError);  // 1/0
  Tape t2;
  CHECK_THROWS_AS(
      (void)t2.input("bad", Tensor({1}, {std::nan("")}), false),
      NumericError);
}

TEST_CASE("shape and usage errors are rejected") {
  Tape t;
  Value a = t.input("a", Tensor({2, 3}), true);
  Value b = t.input("b", Tensor({3, 3}), false);
  CHECK_THROWS_AS((void)add(a, b), NumericError);
  CHECK_THROWS_AS((void)matmul(b, a), NumericError);   // inner dim mismatch
  CHECK_THROWS_AS((void)reshape(a, {4, 2}), NumericError);
  CHECK_THROWS_AS((void)slice(a, 1, 2, 2), NumericError);
  CHECK_THROWS_AS((void)concat(a, b, 1), NumericError);
  CHECK_THROWS_AS((void)t.input("a", Tensor({1}), false), NumericError);
  CHECK_THROWS_AS(t.set_leaf("a", Tensor({3, 2})), NumericError);
  CHECK_THROWS_AS(t.set_leaf("nope", Tensor({1})), NumericError);

  // backward demands a scalar loss and a fresh forward state
  Value m = mul(a, a);
  CHECK_THROWS_AS(t.backward(m), NumericError);
  Value s = sum(m);
  t.set_leaf("a", Tensor({2, 3}));
  CHECK_THROWS_AS(t.backward(s), NumericError);  // stale
  t.replay();
  t.backward(s);
  CHECK(t.grad("a").numel() == 6);

  CHECK_THROWS_AS((void)finite_difference_check(t, s, "a", 0.0), ConfigError);
  CHECK_THROWS_AS((void)finite_difference_check(t, s, "a", -1e-5),
                  ConfigError);
}

TEST_CASE("a corrupted backward rule is caught by the oracle") {
  Rng rng(4242);
  Tape t;
  Value a = t.input("a", random_tensor({6}, rng), true);
  Value loss = weighted_readout(tanh(a), rng);
  CHECK(finite_difference_check(t, loss, "a", 1e-5) < 1e-7);

  t.inject_backward_fault(Op::tanh, 1.01);
  CHECK(finite_difference_check(t, loss, "a", 1e-5) > 1e-3);
  t.inject_backward_fault(Op::tanh, 1.0);
  CHECK(finite_difference_check(t, loss, "a", 1e-5) < 1e-7);
}

TEST_CASE("gradient map covers requires_grad leaves in creation order") {
  Tape t;
  Value a = t.input("a", Tensor({2}, {1.0, 2.0}), true);
  Value c = t.input("c", Tensor({2}, {5.0, 5.0}), false);
  Value b = t.input("b", Tensor({2}, {3.0, 4.0}), true);
  Value loss = sum(mul(add(a, b), c));
  t.backward(loss);
  auto grads = t.gradients();
  REQUIRE(grads.size() == 2);
  CHECK(grads[0].first == "a");
  CHECK(grads[1].first == "b");
  CHECK(grads[0].second[0] == doctest::Approx(5.0));
  CHECK(grads[1].second[1] == doctest::Approx(5.0));
}
