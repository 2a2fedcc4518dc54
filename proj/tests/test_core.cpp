#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cstring>
#include <random>

#include "unsq/gradcheck.hpp"
#include "unsq/ops.hpp"
#include "unsq/tape.hpp"
#include "unsq/tensor.hpp"

using namespace unsq;

namespace {
const Shape kOne{1, 1, 1, 1};

TensorXd vec(std::initializer_list<double> vals, bool rg = false) {
  return TensorXd::from_values(Shape{1, 1, 1, static_cast<Eigen::Index>(vals.size())}, vals, rg);
}
}  // namespace

TEST_CASE("tensor construction and validation") {
  auto t = TensorXd::from_values(Shape{1, 2, 2, 1}, {1, 2, 3, 4});
  CHECK(t.size() == 4);
  CHECK(t.shape().str() == "1x2x2x1");
  CHECK(t.values()[3] == 4.0);

  CHECK_THROWS_AS(TensorXd::from_values(Shape{1, 1, 1, 2}, {1, 2, 3}), Error);
  CHECK_THROWS_WITH_AS(vec({1.0, std::numeric_limits<double>::quiet_NaN()}),
                       doctest::Contains("non-finite value at flat index 1"), Error);
  CHECK_THROWS_AS(vec({std::numeric_limits<double>::infinity()}), Error);
}

TEST_CASE("elementwise ops") {
  Tape<double> tape(false);
  SUBCASE("add") {
    auto y = add(tape, vec({1, 2}), vec({3, 4}));
    CHECK(y.values()[0] == 4.0);
    CHECK(y.values()[1] == 6.0);
  }
  SUBCASE("scalar-mul identity") {
    auto x = vec({-1.5, 0.25, 3});
    auto y = scalar_mul(tape, x, 1.0);
    CHECK(std::memcmp(x.data(), y.data(), sizeof(double) * 3) == 0);
  }
  SUBCASE("exp of log") {
    auto x = vec({0.5, 2.0});
    auto y = exp(tape, log(tape, x));
    CHECK(y.values()[0] == doctest::Approx(0.5).epsilon(1e-12));
    CHECK(y.values()[1] == doctest::Approx(2.0).epsilon(1e-12));
  }
  SUBCASE("shape mismatch") {
    CHECK_THROWS_AS(add(tape, vec({1, 2}), vec({1, 2, 3})), ShapeError);
    CHECK_THROWS_AS(mul(tape, vec({1, 2}), TensorXd::zeros(Shape{1, 2, 1, 1})), ShapeError);
  }
  SUBCASE("log rejects non-positive input naming the index") {
    CHECK_THROWS_WITH_AS(log(tape, vec({1.0, 0.0})), doctest::Contains("flat index 1"), Error);
    CHECK_THROWS_AS(log(tape, vec({-2.0})), Error);
  }
}

TEST_CASE("reductions") {
  Tape<double> tape(false);
  CHECK(sum(tape, vec({1, 2, 3, 4})).item() == 10.0);
  CHECK(mean(tape, vec({1, 2, 3, 4})).item() == 2.5);
  CHECK(sum(tape, TensorXd::zeros(Shape{2, 3, 4, 5})).item() == 0.0);
  CHECK(sum(tape, vec({7})).shape() == kOne);
}

TEST_CASE("backward basics") {
  SUBCASE("sum gives ones") {
    auto x = TensorXd::from_values(Shape{1, 1, 2, 2}, {1, 2, 3, 4}, true);
    Tape<double> tape;
    tape.register_leaf(x);
    tape.backward(sum(tape, x));
    for (Eigen::Index i = 0; i < 4; ++i) CHECK(x.grad()[i] == 1.0);
  }
  SUBCASE("x^2 gives 2x") {
    auto x = vec({3.0}, true);
    Tape<double> tape;
    tape.register_leaf(x);
    tape.backward(sum(tape, mul(tape, x, x)));
    CHECK(x.grad()[0] == 6.0);
  }
  SUBCASE("mean gives 1/n") {
    auto x = TensorXd::zeros(Shape{2, 1, 2, 2}, true);
    Tape<double> tape;
    tape.register_leaf(x);
    tape.backward(mean(tape, x));
    for (Eigen::Index i = 0; i < 8; ++i) CHECK(x.grad()[i] == 0.125);
  }
  SUBCASE("accumulation: y = x + x") {
    auto x = vec({1, 2, 3}, true);
    Tape<double> tape;
    tape.register_leaf(x);
    tape.backward(sum(tape, add(tape, x, x)));
    for (Eigen::Index i = 0; i < 3; ++i) CHECK(x.grad()[i] == 2.0);
  }
  SUBCASE("unreached leaf gets zero grads") {
    auto x = vec({1.0}, true);
    auto other = vec({5.0}, true);
    Tape<double> tape;
    tape.register_leaf(x);
    tape.register_leaf(other);
    tape.backward(sum(tape, mul(tape, x, x)));
    CHECK(other.grad_allocated());
    CHECK(other.grad()[0] == 0.0);
  }
  SUBCASE("loss must be scalar") {
    auto x = vec({1, 2}, true);
    Tape<double> tape;
    tape.register_leaf(x);
    auto y = add(tape, x, x);
    CHECK_THROWS_AS(tape.backward(y), Error);
  }
  SUBCASE("loss must come from this tape") {
    auto x = vec({1.0}, true);
    Tape<double> a;
    a.register_leaf(x);
    auto y = sum(a, x);
    Tape<double> b;
    CHECK_THROWS_AS(b.backward(y), Error);
  }
}

TEST_CASE("grad_check") {
  SUBCASE("linear case is near-exact") {
    std::mt19937_64 rng(7);
    auto x = TensorXd::zeros(Shape{1, 2, 3, 3});
    for (Eigen::Index i = 0; i < x.size(); ++i) {
      x.values()[i] = static_cast<double>(rng() >> 11) * 0x1.0p-53 - 0.5;
    }
    auto f = [](Tape<double>& t, const TensorXd& v) { return sum(t, v); };
    auto report = grad_check(f, x, 1e-5, 1e-4);
    CHECK(report.pass);
    CHECK(report.max_rel_error < 1e-10);
  }
  SUBCASE("sum of exp across seeds") {
    for (std::uint64_t seed = 1; seed <= 5; ++seed) {
      std::mt19937_64 rng(seed);
      auto x = TensorXd::zeros(Shape{1, 1, 4, 4});
      for (Eigen::Index i = 0; i < x.size(); ++i) {
        x.values()[i] = 2.0 * (static_cast<double>(rng() >> 11) * 0x1.0p-53) - 1.0;
      }
      auto f = [](Tape<double>& t, const TensorXd& v) { return sum(t, exp(t, v)); };
      auto report = grad_check(f, x, 1e-5, 1e-4);
      CHECK(report.pass);
      CHECK(report.checked == 16);
    }
  }
  SUBCASE("non-finite f is an error, not a pass") {
    auto x = vec({1.0});
    auto f = [](Tape<double>& t, const TensorXd& v) { return sum(t, exp(t, scalar_mul(t, v, 1000.0))); };
    CHECK_THROWS_AS(grad_check(f, x, 1e-5, 1e-4), Error);
  }
  SUBCASE("non-scalar f is an error") {
    auto x = vec({1.0, 2.0});
    auto f = [](Tape<double>&, const TensorXd& v) { return v; };
    CHECK_THROWS_AS(grad_check(f, x, 1e-5, 1e-4), ShapeError);
  }
  SUBCASE("subset sampling limits probes") {
    auto x = TensorXd::zeros(Shape{1, 1, 8, 8});
    auto f = [](Tape<double>& t, const TensorXd& v) { return sum(t, mul(t, v, v)); };
    GradCheckOptions opt;
    opt.max_checks = 10;
    opt.subset_seed = 3;
    auto report = grad_check(f, x, 1e-5, 1e-4, opt);
    CHECK(report.checked == 10);
    CHECK(report.pass);
  }
}

TEST_CASE("repeat runs are bit-identical") {
  auto run = [](std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    auto x = TensorXd::zeros(Shape{2, 2, 3, 3}, true);
    for (Eigen::Index i = 0; i < x.size(); ++i) {
      x.values()[i] = static_cast<double>(rng() >> 11) * 0x1.0p-53 - 0.5;
    }
    Tape<double> tape;
    tape.register_leaf(x);
    auto y = mean(tape, mul(tape, exp(tape, x), add(tape, x, x)));
    tape.backward(y);
    std::vector<double> out(x.grad().data(), x.grad().data() + x.size());
    out.push_back(y.item());
    return out;
  };
  auto a = run(42), b = run(42), c = run(43);
  CHECK(std::memcmp(a.data(), b.data(), a.size() * sizeof(double)) == 0);
  CHECK(std::memcmp(a.data(), c.data(), a.size() * sizeof(double)) != 0);
}
