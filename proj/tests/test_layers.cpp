#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <cstring>
#include <random>

#include "unsq/layers.hpp"

#include "reference_ops.hpp"

using namespace unsq;
using refops::random_tensor;

namespace {

double max_abs_diff(const TensorXd& a, const TensorXd& b) {
  REQUIRE(a.shape() == b.shape());
  return (a.values() - b.values()).abs().maxCoeff();
}

}  // namespace

TEST_CASE("conv2d basics") {
  Tape<double> tape(false);
  SUBCASE("identity kernel reproduces the input") {
    std::mt19937_64 rng(1);
    auto x = random_tensor(Shape{1, 1, 5, 5}, rng);
    ConvParams<double> p = ConvParams<double>::zeros(1, 1, 3);
    p.weight.values()[4] = 1.0;  // center tap
    auto y = conv2d(tape, x, p, Padding::Same);
    CHECK(max_abs_diff(y, x) == 0.0);
  }
  SUBCASE("all-ones 2x2 valid kernel sums the entries") {
    auto x = TensorXd::from_values(Shape{1, 1, 2, 2}, {1, 2, 3, 4});
    ConvParams<double> p{TensorXd::ones(Shape{1, 1, 2, 2}), TensorXd::zeros(Shape{1, 1, 1, 1})};
    auto y = conv2d(tape, x, p, Padding::Valid);
    CHECK(y.shape() == Shape{1, 1, 1, 1});
    CHECK(y.item() == 10.0);
  }
  SUBCASE("channel mismatch") {
    auto x = TensorXd::zeros(Shape{1, 3, 4, 4});
    auto p = ConvParams<double>::zeros(2, 2, 3);
    CHECK_THROWS_AS(conv2d(tape, x, p, Padding::Same), ShapeError);
  }
  SUBCASE("valid padding needs room for the kernel") {
    auto x = TensorXd::zeros(Shape{1, 1, 2, 2});
    auto p = ConvParams<double>::zeros(1, 1, 3);
    CHECK_THROWS_AS(conv2d(tape, x, p, Padding::Valid), ShapeError);
  }
  SUBCASE("kernel size limits") {
    CHECK_THROWS_AS(ConvParams<double>::zeros(1, 1, 4), ShapeError);
    CHECK_THROWS_AS(ConvParams<double>::zeros(1, 1, 0), ShapeError);
  }
}

TEST_CASE("conv2d matches the nested-loop reference") {
  Tape<double> tape(false);
  std::mt19937_64 rng(99);
  for (int trial = 0; trial < 40; ++trial) {
    const Eigen::Index k = 1 + static_cast<Eigen::Index>(rng() % 3);
    const Eigen::Index n = 1 + static_cast<Eigen::Index>(rng() % 2);
    const Eigen::Index ci = 1 + static_cast<Eigen::Index>(rng() % 3);
    const Eigen::Index co = 1 + static_cast<Eigen::Index>(rng() % 3);
    const Eigen::Index h = k + static_cast<Eigen::Index>(rng() % (7 - k));
    const Eigen::Index w = k + static_cast<Eigen::Index>(rng() % (7 - k));
    const Eigen::Index stride = 1 + static_cast<Eigen::Index>(rng() % 2);
    const Padding pad = (rng() % 2 == 0) ? Padding::Same : Padding::Valid;
    auto x = random_tensor(Shape{n, ci, h, w}, rng);
    ConvParams<double> p{random_tensor(Shape{co, ci, k, k}, rng), random_tensor(Shape{1, co, 1, 1}, rng)};
    auto got = conv2d(tape, x, p, pad, stride);
    auto want = refops::conv2d(x, p.weight, p.bias, pad, stride);
    CHECK(max_abs_diff(got, want) < 1e-12);
  }
}

TEST_CASE("max_pool2d") {
  Tape<double> tape(false);
  SUBCASE("single window") {
    auto x = TensorXd::from_values(Shape{1, 1, 2, 2}, {1, 2, 3, 4});
    auto r = max_pool2d(tape, x);
    CHECK(r.output.item() == 4.0);
    CHECK((*r.argmax)[0] == 3);
  }
  SUBCASE("ties go to the lowest flat index") {
    auto x = TensorXd::full(Shape{1, 1, 4, 4}, 7.0);
    auto r = max_pool2d(tape, x);
    CHECK((*r.argmax)[0] == 0);
    CHECK((*r.argmax)[1] == 2);
    CHECK((*r.argmax)[2] == 8);
    CHECK((*r.argmax)[3] == 10);
  }
  SUBCASE("odd dims tell the caller to resize") {
    auto x = TensorXd::zeros(Shape{1, 1, 5, 4});
    CHECK_THROWS_WITH_AS(max_pool2d(tape, x), doctest::Contains("resize the input to even dimensions"),
                         ShapeError);
  }
  SUBCASE("matches the reference") {
    std::mt19937_64 rng(5);
    for (int trial = 0; trial < 20; ++trial) {
      const Eigen::Index h = 2 * (1 + static_cast<Eigen::Index>(rng() % 3));
      const Eigen::Index w = 2 * (1 + static_cast<Eigen::Index>(rng() % 3));
      auto x = random_tensor(Shape{2, 2, h, w}, rng);
      auto got = max_pool2d(tape, x).output;
      CHECK(max_abs_diff(got, refops::max_pool2d(x)) == 0.0);
    }
  }
  SUBCASE("backward routes each output grad to exactly one cell") {
    std::mt19937_64 rng(11);
    auto x = random_tensor(Shape{1, 1, 6, 6}, rng);
    x.set_requires_grad(true);
    auto c = random_tensor(Shape{1, 1, 3, 3}, rng, 0.5, 1.5);
    Tape<double> t;
    t.register_leaf(x);
    auto p = max_pool2d(t, x);
    t.backward(sum(t, mul(t, p.output, c)));
    Eigen::Index nonzero = 0;
    for (Eigen::Index i = 0; i < x.size(); ++i) nonzero += x.grad()[i] != 0.0 ? 1 : 0;
    CHECK(nonzero == 9);
    CHECK(x.grad().sum() == doctest::Approx(c.values().sum()).epsilon(1e-12));
  }
}

TEST_CASE("conv_transpose2d") {
  Tape<double> tape(false);
  SUBCASE("single pixel expansion") {
    auto x = TensorXd::from_values(Shape{1, 1, 1, 1}, {3.0});
    ConvParams<double> p{TensorXd::from_values(Shape{1, 1, 2, 2}, {1, 2, 3, 4}),
                         TensorXd::zeros(Shape{1, 1, 1, 1})};
    auto y = conv_transpose2d(tape, x, p);
    CHECK(y.shape() == Shape{1, 1, 2, 2});
    CHECK(y.values()[0] == 3.0);
    CHECK(y.values()[1] == 6.0);
    CHECK(y.values()[2] == 9.0);
    CHECK(y.values()[3] == 12.0);
  }
  SUBCASE("zero input broadcasts the bias") {
    std::mt19937_64 rng(2);
    auto x = TensorXd::zeros(Shape{1, 2, 3, 3});
    ConvParams<double> p{random_tensor(Shape{3, 2, 2, 2}, rng),
                         TensorXd::from_values(Shape{1, 3, 1, 1}, {0.5, -1.0, 2.0})};
    auto y = conv_transpose2d(tape, x, p);
    for (Eigen::Index c = 0; c < 3; ++c) {
      for (Eigen::Index i = 0; i < 36; ++i) {
        CHECK(y.values()[c * 36 + i] == p.bias.values()[c]);
      }
    }
  }
  SUBCASE("only the 2x2 stride-2 configuration exists") {
    auto x = TensorXd::zeros(Shape{1, 1, 2, 2});
    auto p3 = ConvParams<double>::zeros(1, 1, 3);
    CHECK_THROWS_WITH_AS(conv_transpose2d(tape, x, p3),
                         doctest::Contains("only 2x2 kernels with stride 2"), Error);
    auto p2 = ConvParams<double>::zeros(1, 1, 2);
    CHECK_THROWS_AS(conv_transpose2d(tape, x, p2, 1), Error);
  }
  SUBCASE("matches the reference") {
    std::mt19937_64 rng(21);
    for (int trial = 0; trial < 20; ++trial) {
      const Eigen::Index ci = 1 + static_cast<Eigen::Index>(rng() % 4);
      const Eigen::Index co = 1 + static_cast<Eigen::Index>(rng() % 3);
      const Eigen::Index h = 1 + static_cast<Eigen::Index>(rng() % 3);
      auto x = random_tensor(Shape{2, ci, h, h}, rng);
      ConvParams<double> p{random_tensor(Shape{co, ci, 2, 2}, rng), random_tensor(Shape{1, co, 1, 1}, rng)};
      auto got = conv_transpose2d(tape, x, p);
      CHECK(max_abs_diff(got, refops::conv_transpose2d(x, p.weight, p.bias)) < 1e-12);
    }
  }
}

TEST_CASE("concat_channels") {
  Tape<double> tape(false);
  SUBCASE("shape law and ordering") {
    std::mt19937_64 rng(3);
    auto a = random_tensor(Shape{1, 2, 4, 4}, rng);
    auto b = random_tensor(Shape{1, 3, 4, 4}, rng);
    auto y = concat_channels(tape, a, b);
    CHECK(y.shape() == Shape{1, 5, 4, 4});
    CHECK(std::memcmp(y.data(), a.data(), sizeof(double) * 32) == 0);
    CHECK(std::memcmp(y.data() + 32, b.data(), sizeof(double) * 48) == 0);
  }
  SUBCASE("zero-channel operand is the identity") {
    std::mt19937_64 rng(4);
    auto a = random_tensor(Shape{1, 2, 3, 3}, rng);
    auto empty = TensorXd::zeros(Shape{1, 0, 3, 3});
    auto y = concat_channels(tape, a, empty);
    CHECK(y.shape() == a.shape());
    CHECK(max_abs_diff(y, a) == 0.0);
  }
  SUBCASE("mismatch") {
    CHECK_THROWS_AS(concat_channels(tape, TensorXd::zeros(Shape{1, 1, 4, 4}),
                                    TensorXd::zeros(Shape{1, 1, 4, 5})),
                    ShapeError);
    CHECK_THROWS_AS(concat_channels(tape, TensorXd::zeros(Shape{2, 1, 4, 4}),
                                    TensorXd::zeros(Shape{1, 1, 4, 4})),
                    ShapeError);
  }
  SUBCASE("backward splits the gradient") {
    auto a = TensorXd::zeros(Shape{1, 2, 2, 2}, true);
    auto b = TensorXd::zeros(Shape{1, 1, 2, 2}, true);
    Tape<double> t;
    t.register_leaf(a);
    t.register_leaf(b);
    t.backward(sum(t, concat_channels(t, a, b)));
    CHECK((a.grad() == 1.0).all());
    CHECK((b.grad() == 1.0).all());
  }
}

TEST_CASE("batch_norm2d") {
  SUBCASE("constant channels normalize to zero") {
    Tape<double> tape(false);
    auto x = TensorXd::zeros(Shape{2, 3, 4, 4});
    for (Eigen::Index i = 0; i < x.size(); ++i) x.values()[i] = static_cast<double>((i / 16) % 3) + 1.0;
    auto p = BatchNormParams<double>::init(3);
    auto y = batch_norm2d(tape, x, p, Mode::Train);
    CHECK(y.values().abs().maxCoeff() == 0.0);
  }
  SUBCASE("gamma zero collapses to beta") {
    Tape<double> tape(false);
    std::mt19937_64 rng(6);
    auto x = random_tensor(Shape{2, 2, 3, 3}, rng);
    auto p = BatchNormParams<double>::init(2);
    p.gamma = TensorXd::zeros(Shape{1, 2, 1, 1}, true);
    p.beta = TensorXd::from_values(Shape{1, 2, 1, 1}, {0.25, -1.5}, true);
    auto y = batch_norm2d(tape, x, p, Mode::Train);
    for (Eigen::Index i = 0; i < y.size(); ++i) {
      CHECK(y.values()[i] == p.beta.values()[(i / 9) % 2]);
    }
  }
  SUBCASE("train mode statistics and running update") {
    Tape<double> tape(false);
    std::mt19937_64 rng(7);
    auto x = random_tensor(Shape{4, 3, 5, 5}, rng);
    auto p = BatchNormParams<double>::init(3);
    auto y = batch_norm2d(tape, x, p, Mode::Train);
    const Eigen::Index per = 4 * 25;
    for (Eigen::Index c = 0; c < 3; ++c) {
      double mean = 0, var = 0, xmean = 0, xvar = 0;
      for (Eigen::Index n = 0; n < 4; ++n) {
        for (Eigen::Index i = 0; i < 25; ++i) {
          mean += y.values()[y.flat_index(n, c, i / 5, i % 5)];
          xmean += x.values()[x.flat_index(n, c, i / 5, i % 5)];
        }
      }
      mean /= static_cast<double>(per);
      xmean /= static_cast<double>(per);
      for (Eigen::Index n = 0; n < 4; ++n) {
        for (Eigen::Index i = 0; i < 25; ++i) {
          var += std::pow(y.values()[y.flat_index(n, c, i / 5, i % 5)] - mean, 2);
          xvar += std::pow(x.values()[x.flat_index(n, c, i / 5, i % 5)] - xmean, 2);
        }
      }
      var /= static_cast<double>(per);
      xvar /= static_cast<double>(per);
      CHECK(std::abs(mean) < 1e-10);
      CHECK(std::abs(var - xvar / (xvar + 1e-5)) < 1e-6);
      CHECK(p.running_mean.values()[c] == doctest::Approx(0.1 * xmean).epsilon(1e-12));
      CHECK(p.running_var.values()[c] == doctest::Approx(0.9 + 0.1 * xvar).epsilon(1e-12));
    }
  }
  SUBCASE("eval mode uses running stats and mutates nothing") {
    Tape<double> tape(false);
    std::mt19937_64 rng(8);
    auto x = random_tensor(Shape{2, 2, 4, 4}, rng);
    auto p = BatchNormParams<double>::init(2);
    p.running_mean = TensorXd::from_values(Shape{1, 2, 1, 1}, {0.5, -0.25});
    p.running_var = TensorXd::from_values(Shape{1, 2, 1, 1}, {2.0, 0.5});
    const auto rm = p.running_mean.clone(false);
    auto y = batch_norm2d(tape, x, p, Mode::Eval);
    for (Eigen::Index i = 0; i < y.size(); ++i) {
      const Eigen::Index c = (i / 16) % 2;
      const double want = (x.values()[i] - p.running_mean.values()[c]) /
                          std::sqrt(p.running_var.values()[c] + 1e-5);
      CHECK(y.values()[i] == doctest::Approx(want).epsilon(1e-12));
    }
    CHECK(max_abs_diff(p.running_mean, rm) == 0.0);
  }
  SUBCASE("guards") {
    Tape<double> tape(false);
    auto p = BatchNormParams<double>::init(2);
    CHECK_THROWS_AS(batch_norm2d(tape, TensorXd::zeros(Shape{1, 3, 4, 4}), p, Mode::Train), ShapeError);
    CHECK_THROWS_AS(batch_norm2d(tape, TensorXd::zeros(Shape{1, 2, 1, 1}), p, Mode::Train), Error);
    CHECK_THROWS_AS(BatchNormParams<double>::init(2, 0.0), Error);
    CHECK_THROWS_AS(BatchNormParams<double>::init(2, 0.1, 0.0), Error);
  }
}

TEST_CASE("softmax_temperature") {
  Tape<double> tape(false);
  SUBCASE("symmetry") {
    auto z = TensorXd::from_values(Shape{1, 2, 1, 1}, {1.7, 1.7});
    auto p = softmax_temperature(tape, z, 3.0);
    CHECK(p.values()[0] == 0.5);
    CHECK(p.values()[1] == 0.5);
  }
  SUBCASE("logit gap 1 at T=1") {
    auto z = TensorXd::from_values(Shape{1, 2, 1, 1}, {0.0, 1.0});
    auto p = softmax_temperature(tape, z, 1.0);
    CHECK(p.values()[1] == doctest::Approx(0.7310585786300049).epsilon(1e-12));
    CHECK(p.values()[0] == doctest::Approx(0.2689414213699951).epsilon(1e-12));
  }
  SUBCASE("z/T scale equivalence") {
    auto z2 = TensorXd::from_values(Shape{1, 2, 1, 1}, {0.0, 2.0});
    auto z1 = TensorXd::from_values(Shape{1, 2, 1, 1}, {0.0, 1.0});
    auto a = softmax_temperature(tape, z2, 2.0);
    auto b = softmax_temperature(tape, z1, 1.0);
    CHECK(std::memcmp(a.data(), b.data(), 2 * sizeof(double)) == 0);
  }
  SUBCASE("high temperature flattens") {
    auto z = TensorXd::from_values(Shape{1, 2, 1, 1}, {5.0, -5.0});
    auto p = softmax_temperature(tape, z, 1000.0);
    CHECK(std::abs(p.values()[0] - 0.5) < 1e-2);
    CHECK(std::abs(p.values()[1] - 0.5) < 1e-2);
  }
  SUBCASE("channel sums and range") {
    std::mt19937_64 rng(9);
    auto z = random_tensor(Shape{2, 2, 4, 4}, rng, -30, 30);
    for (double T : {0.5, 1.0, 7.0}) {
      auto p = softmax_temperature(tape, z, T);
      for (Eigen::Index n = 0; n < 2; ++n) {
        for (Eigen::Index i = 0; i < 16; ++i) {
          const double p0 = p.values()[p.flat_index(n, 0, i / 4, i % 4)];
          const double p1 = p.values()[p.flat_index(n, 1, i / 4, i % 4)];
          // exp of a finite log-probability, so strictly positive even when
          // the other channel rounds to 1.0
          CHECK(p0 > 0.0);
          CHECK(p1 > 0.0);
          CHECK(p0 <= 1.0);
          CHECK(p1 <= 1.0);
          CHECK(std::abs(p0 + p1 - 1.0) <= 1e-12);
        }
      }
    }
  }
  SUBCASE("argmax invariant under temperature") {
    std::mt19937_64 rng(10);
    auto z = random_tensor(Shape{1, 2, 8, 8}, rng, -3, 3);
    auto p1 = softmax_temperature(tape, z, 1.0);
    auto p9 = softmax_temperature(tape, z, 9.0);
    for (Eigen::Index i = 0; i < 64; ++i) {
      const bool a = p1.values()[i + 64] > p1.values()[i];
      const bool b = p9.values()[i + 64] > p9.values()[i];
      CHECK(a == b);
    }
  }
  SUBCASE("guards") {
    auto z = TensorXd::zeros(Shape{1, 2, 1, 1});
    CHECK_THROWS_AS(softmax_temperature(tape, z, 0.0), Error);
    CHECK_THROWS_AS(softmax_temperature(tape, z, -1.0), Error);
    CHECK_THROWS_AS(softmax_temperature(tape, TensorXd::zeros(Shape{1, 3, 1, 1}), 1.0), ShapeError);
  }
}

TEST_CASE("weighted_cross_entropy") {
  Tape<double> tape(false);
  SUBCASE("single foreground pixel at even odds") {
    auto z = TensorXd::zeros(Shape{1, 2, 1, 1});
    auto y = TensorXd::ones(Shape{1, 1, 1, 1});
    auto l = weighted_cross_entropy(tape, z, y, ClassWeights{17.8, 1.0});
    CHECK(l.item() == doctest::Approx(17.8 * std::log(2.0)).epsilon(1e-12));
  }
  SUBCASE("single background pixel at even odds") {
    auto z = TensorXd::zeros(Shape{1, 2, 1, 1});
    auto y = TensorXd::zeros(Shape{1, 1, 1, 1});
    auto l = weighted_cross_entropy(tape, z, y, ClassWeights{17.8, 1.0});
    CHECK(l.item() == doctest::Approx(std::log(2.0)).epsilon(1e-12));
  }
  SUBCASE("unit weights equal the unweighted reference") {
    std::mt19937_64 rng(12);
    auto z = random_tensor(Shape{3, 2, 4, 4}, rng, -3, 3);
    auto y = TensorXd::zeros(Shape{3, 1, 4, 4});
    for (Eigen::Index i = 0; i < y.size(); ++i) y.values()[i] = (rng() % 3 == 0) ? 1.0 : 0.0;
    auto l = weighted_cross_entropy(tape, z, y, ClassWeights{1.0, 1.0});
    CHECK(l.item() == doctest::Approx(refops::cross_entropy(z, y)).epsilon(1e-12));
  }
  SUBCASE("non-binary target") {
    auto z = TensorXd::zeros(Shape{1, 2, 1, 1});
    auto y = TensorXd::full(Shape{1, 1, 1, 1}, 0.5);
    CHECK_THROWS_WITH_AS(weighted_cross_entropy(tape, z, y, ClassWeights{}),
                         doctest::Contains("non-binary target"), Error);
  }
  SUBCASE("pixel permutation invariance") {
    std::mt19937_64 rng(13);
    auto z = random_tensor(Shape{1, 2, 2, 4}, rng, -2, 2);
    auto y = TensorXd::zeros(Shape{1, 1, 2, 4});
    for (Eigen::Index i = 0; i < 8; ++i) y.values()[i] = (rng() % 2) ? 1.0 : 0.0;
    std::vector<Eigen::Index> perm{5, 2, 7, 0, 3, 6, 1, 4};
    auto zp = TensorXd::zeros(Shape{1, 2, 2, 4});
    auto yp = TensorXd::zeros(Shape{1, 1, 2, 4});
    for (Eigen::Index i = 0; i < 8; ++i) {
      zp.values()[perm[i]] = z.values()[i];
      zp.values()[8 + perm[i]] = z.values()[8 + i];
      yp.values()[perm[i]] = y.values()[i];
    }
    const ClassWeights w{2.5, 0.5};
    const double a = weighted_cross_entropy(tape, z, y, w).item();
    const double b = weighted_cross_entropy(tape, zp, yp, w).item();
    CHECK(a == doctest::Approx(b).epsilon(1e-12));
  }
  SUBCASE("pure-foreground loss is linear in w_f") {
    std::mt19937_64 rng(14);
    auto z = random_tensor(Shape{1, 2, 4, 4}, rng, -2, 2);
    auto y = TensorXd::ones(Shape{1, 1, 4, 4});
    const double l1 = weighted_cross_entropy(tape, z, y, ClassWeights{1.3, 1.0}).item();
    const double l2 = weighted_cross_entropy(tape, z, y, ClassWeights{2.6, 1.0}).item();
    CHECK(l2 == doctest::Approx(2.0 * l1).epsilon(1e-12));
  }
  SUBCASE("weight validation") {
    auto z = TensorXd::zeros(Shape{1, 2, 1, 1});
    auto y = TensorXd::zeros(Shape{1, 1, 1, 1});
    CHECK_THROWS_AS(weighted_cross_entropy(tape, z, y, ClassWeights{-1.0, 1.0}), Error);
    CHECK_THROWS_AS(weighted_cross_entropy(tape, z, y, ClassWeights{0.0, 0.0}), Error);
  }
}

TEST_CASE("soft_cross_entropy") {
  SUBCASE("teacher equal to student gives entropy and zero gradient") {
    std::mt19937_64 rng(15);
    auto z = random_tensor(Shape{2, 2, 4, 4}, rng, -2, 2);
    z.set_requires_grad(true);
    Tape<double> dead(false);
    auto probs = softmax_temperature(dead, z, 1.0);
    double entropy = 0;
    for (Eigen::Index n = 0; n < 2; ++n) {
      for (Eigen::Index i = 0; i < 16; ++i) {
        const double p0 = probs.values()[probs.flat_index(n, 0, i / 4, i % 4)];
        const double p1 = probs.values()[probs.flat_index(n, 1, i / 4, i % 4)];
        entropy -= p0 * std::log(p0) + p1 * std::log(p1);
      }
    }
    entropy /= 32.0;
    Tape<double> t;
    t.register_leaf(z);
    auto l = soft_cross_entropy(t, z, probs, 1.0, ClassWeights{1.0, 1.0});
    CHECK(l.item() == doctest::Approx(entropy).epsilon(1e-12));
    t.backward(l);
    CHECK(z.grad().abs().maxCoeff() < 1e-10);
  }
  SUBCASE("one-hot teacher at T=1 reduces to the hard loss") {
    std::mt19937_64 rng(16);
    auto z = random_tensor(Shape{2, 2, 3, 3}, rng, -2, 2);
    auto y = TensorXd::zeros(Shape{2, 1, 3, 3});
    for (Eigen::Index i = 0; i < y.size(); ++i) y.values()[i] = (rng() % 2) ? 1.0 : 0.0;
    auto onehot = TensorXd::zeros(Shape{2, 2, 3, 3});
    for (Eigen::Index n = 0; n < 2; ++n) {
      for (Eigen::Index i = 0; i < 9; ++i) {
        const double fg = y.values()[n * 9 + i];
        onehot.values()[onehot.flat_index(n, 0, i / 3, i % 3)] = 1.0 - fg;
        onehot.values()[onehot.flat_index(n, 1, i / 3, i % 3)] = fg;
      }
    }
    Tape<double> tape(false);
    const ClassWeights w{3.0, 0.5};
    const double soft = soft_cross_entropy(tape, z, onehot, 1.0, w).item();
    const double hard = weighted_cross_entropy(tape, z, y, w).item();
    CHECK(soft == doctest::Approx(hard).epsilon(1e-10));
  }
  SUBCASE("analytic gradient") {
    std::mt19937_64 rng(17);
    const double T = 4.0;
    const ClassWeights w{2.0, 0.75};
    auto z = random_tensor(Shape{1, 2, 4, 4}, rng, -2, 2);
    z.set_requires_grad(true);
    Tape<double> dead(false);
    auto teacher = softmax_temperature(dead, random_tensor(Shape{1, 2, 4, 4}, rng, -2, 2), T);
    Tape<double> t;
    t.register_leaf(z);
    t.backward(soft_cross_entropy(t, z, teacher, T, w));
    auto p = softmax_temperature(dead, z, T);
    const double N = 16.0;
    for (Eigen::Index i = 0; i < 16; ++i) {
      const double t0 = teacher.values()[i], t1 = teacher.values()[16 + i];
      const double mass = w.foreground * t1 + w.background * t0;
      const double g0 = (p.values()[i] * mass - w.background * t0) / (T * N);
      const double g1 = (p.values()[16 + i] * mass - w.foreground * t1) / (T * N);
      CHECK(z.grad()[i] == doctest::Approx(g0).epsilon(1e-12));
      CHECK(z.grad()[16 + i] == doctest::Approx(g1).epsilon(1e-12));
    }
  }
  SUBCASE("unnormalized teacher is rejected") {
    Tape<double> tape(false);
    auto z = TensorXd::zeros(Shape{1, 2, 1, 1});
    auto bad = TensorXd::from_values(Shape{1, 2, 1, 1}, {0.6, 0.6});
    CHECK_THROWS_AS(soft_cross_entropy(tape, z, bad, 1.0, ClassWeights{}), Error);
  }
  SUBCASE("temperature must be positive") {
    Tape<double> tape(false);
    auto z = TensorXd::zeros(Shape{1, 2, 1, 1});
    auto probs = TensorXd::from_values(Shape{1, 2, 1, 1}, {0.5, 0.5});
    CHECK_THROWS_AS(soft_cross_entropy(tape, z, probs, 0.0, ClassWeights{}), Error);
  }
}
