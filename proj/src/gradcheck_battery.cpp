#include "unsq/gradcheck_battery.hpp"

#include <cmath>
#include <functional>
#include <random>

#include "unsq/layers.hpp"
#include "unsq/unet.hpp"

namespace unsq {

namespace {

double unit_uniform(std::mt19937_64& rng) { return static_cast<double>(rng() >> 11) * 0x1.0p-53; }

TensorXd uniform_tensor(Shape s, std::mt19937_64& rng, double lo, double hi) {
  TensorXd t = TensorXd::zeros(s);
  for (Eigen::Index i = 0; i < t.size(); ++i) t.values()[i] = lo + (hi - lo) * unit_uniform(rng);
  return t;
}

// Keeps every entry at least `margin` away from zero so relu probes at
// eps = 1e-5 cannot cross the kink.
TensorXd away_from_zero(TensorXd t, double margin) {
  auto& v = t.values();
  for (Eigen::Index i = 0; i < v.size(); ++i) {
    if (std::abs(v[i]) < margin) v[i] = v[i] < 0 ? -margin : margin;
  }
  return t;
}

// Pairwise-distinct entries with gaps well above 2*eps, so pooling argmaxes
// are stable under probing.
TensorXd distinct_tensor(Shape s, std::mt19937_64& rng) {
  TensorXd t = TensorXd::zeros(s);
  std::vector<Eigen::Index> order(static_cast<std::size_t>(s.size()));
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = static_cast<Eigen::Index>(i);
  for (std::size_t i = order.size(); i > 1; --i) {
    std::swap(order[i - 1], order[static_cast<std::size_t>(rng() % i)]);
  }
  for (Eigen::Index i = 0; i < t.size(); ++i) {
    t.values()[order[static_cast<std::size_t>(i)]] =
        0.05 * static_cast<double>(i) + 0.02 * unit_uniform(rng) - 1.0;
  }
  return t;
}

TensorXd binary_mask(Shape s, std::mt19937_64& rng, double fg_prob) {
  TensorXd t = TensorXd::zeros(s);
  for (Eigen::Index i = 0; i < t.size(); ++i) t.values()[i] = unit_uniform(rng) < fg_prob ? 1.0 : 0.0;
  return t;
}

TensorXd softmax_probs(const TensorXd& logits, double temperature) {
  Tape<double> dead(false);
  return softmax_temperature(dead, logits, temperature);
}

void merge_into(GradCheckReport& agg, const GradCheckReport& r) {
  if (r.max_rel_error > agg.max_rel_error) {
    agg.max_rel_error = r.max_rel_error;
    agg.worst_index = r.worst_index;
    agg.worst_analytic = r.worst_analytic;
    agg.worst_numeric = r.worst_numeric;
  }
  agg.checked += r.checked;
  agg.skipped += r.skipped;
  agg.pass = agg.pass && r.pass;
}

using LossFn = std::function<TensorXd(Tape<double>&)>;

// In-place finite-difference check for parameters a model owns internally:
// one analytic backward over all leaves, then central differences obtained by
// perturbing each probe tensor's values directly.
GradCheckReport check_owned_params(const LossFn& loss_fn, std::vector<TensorXd> leaves,
                                   std::vector<TensorXd> probes, double epsilon, double tolerance,
                                   GradCheckOptions opt) {
  for (auto& t : leaves) t.zero_grad();
  Tape<double> tape(true);
  for (auto& t : leaves) tape.register_leaf(t);
  TensorXd y = loss_fn(tape);
  if (y.size() != 1) throw ShapeError("gradcheck battery: loss must be scalar, got " + y.shape().str());
  tape.backward(y);
  std::vector<Eigen::ArrayXd> analytic;
  analytic.reserve(probes.size());
  for (auto& p : probes) analytic.push_back(p.grad());

  auto eval = [&]() -> double {
    Tape<double> dead(false);
    double v = loss_fn(dead).item();
    if (!std::isfinite(v)) throw Error("gradcheck battery: loss is not finite");
    return v;
  };
  const double y0 = eval();

  GradCheckReport report;
  report.pass = true;
  for (std::size_t pi = 0; pi < probes.size(); ++pi) {
    TensorXd& p = probes[pi];
    std::vector<Eigen::Index> indices(static_cast<std::size_t>(p.size()));
    std::iota(indices.begin(), indices.end(), Eigen::Index(0));
    if (opt.max_checks > 0 && opt.max_checks < p.size()) {
      std::mt19937_64 rng(opt.subset_seed + 0x9E3779B97F4A7C15ull * (pi + 1));
      std::shuffle(indices.begin(), indices.end(), rng);
      indices.resize(static_cast<std::size_t>(opt.max_checks));
      std::sort(indices.begin(), indices.end());
    }
    GradCheckReport r;
    for (Eigen::Index i : indices) {
      const double orig = p.values()[i];
      const double a = analytic[pi][i];
      double best_rel = std::numeric_limits<double>::infinity();
      double best_numeric = 0.0;
      bool usable = false;
      // Nominal step first, then a finer and a coarser one when it disagrees:
      // a probe straddling a relu/pooling kink settles once the step no
      // longer reaches across it, and cancellation noise on a near-zero
      // gradient settles under the larger step. A genuinely wrong gradient
      // disagrees at every scale.
      for (const double e : {epsilon, epsilon / 8.0, epsilon * 8.0}) {
        p.values()[i] = orig + e;
        const double yp = eval();
        p.values()[i] = orig - e;
        const double ym = eval();
        p.values()[i] = orig;
        if (opt.curvature_skip > 0 && std::abs(yp - 2.0 * y0 + ym) / (e * e) > opt.curvature_skip) {
          continue;
        }
        usable = true;
        const double numeric = (yp - ym) / (2.0 * e);
        // what a central difference of the loss can resolve at this step
        const double fd_noise =
            32.0 * std::numeric_limits<double>::epsilon() * std::max(1.0, std::abs(y0)) / e;
        const double denom = std::max({std::abs(a), std::abs(numeric), 1e-8, fd_noise / tolerance});
        const double rel = std::abs(a - numeric) / denom;
        if (rel < best_rel) {
          best_rel = rel;
          best_numeric = numeric;
        }
        if (rel < tolerance) break;
      }
      if (!usable) {
        ++r.skipped;
        continue;
      }
      if (best_rel > r.max_rel_error) {
        r.max_rel_error = best_rel;
        r.worst_index = i;
        r.worst_analytic = a;
        r.worst_numeric = best_numeric;
      }
      ++r.checked;
    }
    r.pass = r.max_rel_error < tolerance;
    merge_into(report, r);
  }
  return report;
}

struct Battery {
  const BatteryOptions& opt;
  std::vector<BatteryCase> cases;

  std::mt19937_64 rng_for(std::uint64_t salt, int seed_index) const {
    return std::mt19937_64(opt.base_seed + 0x9E3779B97F4A7C15ull * salt +
                           static_cast<std::uint64_t>(seed_index));
  }

  // Aggregates grad_check over the seed axis into one named case.
  template <typename MakeF>
  void add(const std::string& name, MakeF&& make) {
    GradCheckReport agg;
    agg.pass = true;
    for (int s = 0; s < opt.seeds; ++s) {
      merge_into(agg, make(s));
    }
    cases.push_back(BatteryCase{name, agg});
  }
};

}  // namespace

const BatteryCase* BatteryResult::worst() const {
  const BatteryCase* w = nullptr;
  for (const auto& c : cases) {
    if (w == nullptr || c.report.max_rel_error > w->report.max_rel_error) w = &c;
  }
  return w;
}

BatteryResult run_gradcheck_battery(const BatteryOptions& opt) {
  Battery b{opt, {}};
  const double eps = opt.epsilon;
  const double tol = opt.tolerance;

  b.add("ops.exp-sum", [&](int s) {
    auto rng = b.rng_for(1, s);
    TensorXd x = uniform_tensor(Shape{2, 3, 4, 5}, rng, -1, 1);
    auto f = [](Tape<double>& t, const TensorXd& v) { return sum(t, exp(t, v)); };
    return grad_check(f, x, eps, tol);
  });

  b.add("ops.log-mean", [&](int s) {
    auto rng = b.rng_for(2, s);
    TensorXd x = uniform_tensor(Shape{1, 2, 3, 4}, rng, -1, 1);
    auto f = [](Tape<double>& t, const TensorXd& v) { return mean(t, log(t, scalar_add(t, v, 2.5))); };
    return grad_check(f, x, eps, tol);
  });

  b.add("ops.arith", [&](int s) {
    auto rng = b.rng_for(3, s);
    TensorXd x = uniform_tensor(Shape{2, 1, 3, 3}, rng, -1, 1);
    auto f = [](Tape<double>& t, const TensorXd& v) {
      TensorXd a = add(t, v, scalar_mul(t, v, 0.5));
      TensorXd c = sub(t, mul(t, a, v), negate(t, v));
      return sum(t, c);
    };
    return grad_check(f, x, eps, tol);
  });

  b.add("relu", [&](int s) {
    auto rng = b.rng_for(4, s);
    TensorXd x = away_from_zero(uniform_tensor(Shape{2, 2, 4, 4}, rng, -1, 1), 1e-3);
    TensorXd c = uniform_tensor(Shape{2, 2, 4, 4}, rng, -1, 1);
    auto f = [&](Tape<double>& t, const TensorXd& v) { return sum(t, mul(t, relu(t, v), c)); };
    return grad_check(f, x, eps, tol);
  });

  // conv2d: probe input, weight, and bias for the padded stride-1 case, then
  // input/weight for the stride-2, valid, and 1x1 variants.
  b.add("conv2d.same", [&](int s) {
    auto rng = b.rng_for(5, s);
    TensorXd x = uniform_tensor(Shape{2, 2, 5, 5}, rng, -1, 1);
    auto p = ConvParams<double>::he_init(3, 2, 3, rng);
    GradCheckReport agg;
    agg.pass = true;
    auto fx = [&](Tape<double>& t, const TensorXd& v) { return sum(t, conv2d(t, v, p, Padding::Same)); };
    merge_into(agg, grad_check(fx, x, eps, tol));
    auto fw = [&](Tape<double>& t, const TensorXd& v) {
      ConvParams<double> q{v, p.bias};
      return sum(t, conv2d(t, x, q, Padding::Same));
    };
    merge_into(agg, grad_check(fw, p.weight, eps, tol));
    auto fb = [&](Tape<double>& t, const TensorXd& v) {
      ConvParams<double> q{p.weight, v};
      return sum(t, conv2d(t, x, q, Padding::Same));
    };
    merge_into(agg, grad_check(fb, p.bias, eps, tol));
    return agg;
  });

  b.add("conv2d.same-stride2", [&](int s) {
    auto rng = b.rng_for(6, s);
    TensorXd x = uniform_tensor(Shape{1, 2, 5, 5}, rng, -1, 1);
    auto p = ConvParams<double>::he_init(2, 2, 3, rng);
    GradCheckReport agg;
    agg.pass = true;
    auto fx = [&](Tape<double>& t, const TensorXd& v) {
      return sum(t, conv2d(t, v, p, Padding::Same, 2));
    };
    merge_into(agg, grad_check(fx, x, eps, tol));
    auto fw = [&](Tape<double>& t, const TensorXd& v) {
      ConvParams<double> q{v, p.bias};
      return sum(t, conv2d(t, x, q, Padding::Same, 2));
    };
    merge_into(agg, grad_check(fw, p.weight, eps, tol));
    return agg;
  });

  b.add("conv2d.valid", [&](int s) {
    auto rng = b.rng_for(7, s);
    TensorXd x = uniform_tensor(Shape{1, 3, 6, 6}, rng, -1, 1);
    auto p = ConvParams<double>::he_init(2, 3, 3, rng);
    GradCheckReport agg;
    agg.pass = true;
    auto fx = [&](Tape<double>& t, const TensorXd& v) { return sum(t, conv2d(t, v, p, Padding::Valid)); };
    merge_into(agg, grad_check(fx, x, eps, tol));
    auto fw = [&](Tape<double>& t, const TensorXd& v) {
      ConvParams<double> q{v, p.bias};
      return sum(t, conv2d(t, x, q, Padding::Valid));
    };
    merge_into(agg, grad_check(fw, p.weight, eps, tol));
    return agg;
  });

  b.add("conv2d.1x1", [&](int s) {
    auto rng = b.rng_for(8, s);
    TensorXd x = uniform_tensor(Shape{2, 3, 4, 4}, rng, -1, 1);
    auto p = ConvParams<double>::he_init(2, 3, 1, rng);
    GradCheckReport agg;
    agg.pass = true;
    auto fx = [&](Tape<double>& t, const TensorXd& v) { return sum(t, conv2d(t, v, p, Padding::Same)); };
    merge_into(agg, grad_check(fx, x, eps, tol));
    auto fw = [&](Tape<double>& t, const TensorXd& v) {
      ConvParams<double> q{v, p.bias};
      return sum(t, conv2d(t, x, q, Padding::Same));
    };
    merge_into(agg, grad_check(fw, p.weight, eps, tol));
    return agg;
  });

  b.add("conv_transpose2d", [&](int s) {
    auto rng = b.rng_for(9, s);
    TensorXd x = uniform_tensor(Shape{2, 4, 3, 3}, rng, -1, 1);
    auto p = ConvParams<double>::he_init(2, 4, 2, rng);
    GradCheckReport agg;
    agg.pass = true;
    auto fx = [&](Tape<double>& t, const TensorXd& v) { return sum(t, conv_transpose2d(t, v, p)); };
    merge_into(agg, grad_check(fx, x, eps, tol));
    auto fw = [&](Tape<double>& t, const TensorXd& v) {
      ConvParams<double> q{v, p.bias};
      return sum(t, conv_transpose2d(t, x, q));
    };
    merge_into(agg, grad_check(fw, p.weight, eps, tol));
    auto fb = [&](Tape<double>& t, const TensorXd& v) {
      ConvParams<double> q{p.weight, v};
      return sum(t, conv_transpose2d(t, x, q));
    };
    merge_into(agg, grad_check(fb, p.bias, eps, tol));
    return agg;
  });

  b.add("max_pool2d", [&](int s) {
    auto rng = b.rng_for(10, s);
    TensorXd x = distinct_tensor(Shape{1, 2, 6, 6}, rng);
    auto f = [](Tape<double>& t, const TensorXd& v) {
      TensorXd p = max_pool2d(t, v).output;
      return sum(t, mul(t, p, p));
    };
    return grad_check(f, x, eps, tol);
  });

  b.add("batch_norm2d.train", [&](int s) {
    auto rng = b.rng_for(11, s);
    TensorXd x = uniform_tensor(Shape{3, 2, 4, 4}, rng, -1, 1);
    TensorXd c = uniform_tensor(Shape{3, 2, 4, 4}, rng, -1, 1);
    auto bp = BatchNormParams<double>::init(2);
    bp.gamma = uniform_tensor(Shape{1, 2, 1, 1}, rng, 0.5, 1.5);
    bp.beta = uniform_tensor(Shape{1, 2, 1, 1}, rng, -0.5, 0.5);
    GradCheckReport agg;
    agg.pass = true;
    auto fx = [&](Tape<double>& t, const TensorXd& v) {
      return sum(t, mul(t, batch_norm2d(t, v, bp, Mode::Train), c));
    };
    merge_into(agg, grad_check(fx, x, eps, tol));
    auto fg = [&](Tape<double>& t, const TensorXd& v) {
      BatchNormParams<double> q = bp;
      q.gamma = v;
      return sum(t, mul(t, batch_norm2d(t, x, q, Mode::Train), c));
    };
    merge_into(agg, grad_check(fg, bp.gamma, eps, tol));
    auto fb = [&](Tape<double>& t, const TensorXd& v) {
      BatchNormParams<double> q = bp;
      q.beta = v;
      return sum(t, mul(t, batch_norm2d(t, x, q, Mode::Train), c));
    };
    merge_into(agg, grad_check(fb, bp.beta, eps, tol));
    return agg;
  });

  b.add("batch_norm2d.eval", [&](int s) {
    auto rng = b.rng_for(12, s);
    TensorXd x = uniform_tensor(Shape{2, 3, 4, 4}, rng, -1, 1);
    TensorXd c = uniform_tensor(Shape{2, 3, 4, 4}, rng, -1, 1);
    auto bp = BatchNormParams<double>::init(3);
    bp.gamma = uniform_tensor(Shape{1, 3, 1, 1}, rng, 0.5, 1.5);
    bp.beta = uniform_tensor(Shape{1, 3, 1, 1}, rng, -0.5, 0.5);
    bp.running_mean = uniform_tensor(Shape{1, 3, 1, 1}, rng, -0.3, 0.3);
    bp.running_var = uniform_tensor(Shape{1, 3, 1, 1}, rng, 0.5, 1.5);
    GradCheckReport agg;
    agg.pass = true;
    auto fx = [&](Tape<double>& t, const TensorXd& v) {
      return sum(t, mul(t, batch_norm2d(t, v, bp, Mode::Eval), c));
    };
    merge_into(agg, grad_check(fx, x, eps, tol));
    auto fg = [&](Tape<double>& t, const TensorXd& v) {
      BatchNormParams<double> q = bp;
      q.gamma = v;
      return sum(t, mul(t, batch_norm2d(t, x, q, Mode::Eval), c));
    };
    merge_into(agg, grad_check(fg, bp.gamma, eps, tol));
    return agg;
  });

  b.add("concat_channels", [&](int s) {
    auto rng = b.rng_for(13, s);
    TensorXd x = uniform_tensor(Shape{2, 2, 3, 3}, rng, -1, 1);
    TensorXd y = uniform_tensor(Shape{2, 3, 3, 3}, rng, -1, 1);
    TensorXd c = uniform_tensor(Shape{2, 5, 3, 3}, rng, -1, 1);
    GradCheckReport agg;
    agg.pass = true;
    auto fa = [&](Tape<double>& t, const TensorXd& v) {
      return sum(t, mul(t, concat_channels(t, v, y), c));
    };
    merge_into(agg, grad_check(fa, x, eps, tol));
    auto fb = [&](Tape<double>& t, const TensorXd& v) {
      return sum(t, mul(t, concat_channels(t, x, v), c));
    };
    merge_into(agg, grad_check(fb, y, eps, tol));
    return agg;
  });

  for (double T : {1.0, 3.0}) {
    b.add("softmax_temperature.T" + std::to_string(static_cast<int>(T)), [&, T](int s) {
      auto rng = b.rng_for(14 + static_cast<std::uint64_t>(T), s);
      TensorXd x = uniform_tensor(Shape{2, 2, 4, 4}, rng, -2, 2);
      TensorXd c = uniform_tensor(Shape{2, 2, 4, 4}, rng, -1, 1);
      auto f = [&](Tape<double>& t, const TensorXd& v) {
        return sum(t, mul(t, softmax_temperature(t, v, T), c));
      };
      return grad_check(f, x, eps, tol);
    });
  }

  b.add("weighted_cross_entropy", [&](int s) {
    auto rng = b.rng_for(20, s);
    TensorXd logits = uniform_tensor(Shape{2, 2, 4, 4}, rng, -2, 2);
    TensorXd target = binary_mask(Shape{2, 1, 4, 4}, rng, 0.3);
    const ClassWeights w{2.3, 0.7};
    auto f = [&](Tape<double>& t, const TensorXd& v) { return weighted_cross_entropy(t, v, target, w); };
    return grad_check(f, logits, eps, tol);
  });

  for (double T : {1.0, 4.0}) {
    b.add("soft_cross_entropy.T" + std::to_string(static_cast<int>(T)), [&, T](int s) {
      auto rng = b.rng_for(22 + static_cast<std::uint64_t>(T), s);
      TensorXd logits = uniform_tensor(Shape{2, 2, 4, 4}, rng, -2, 2);
      TensorXd teacher = softmax_probs(uniform_tensor(Shape{2, 2, 4, 4}, rng, -2, 2), T);
      const ClassWeights w{1.8, 0.9};
      auto f = [&](Tape<double>& t, const TensorXd& v) { return soft_cross_entropy(t, v, teacher, T, w); };
      return grad_check(f, logits, eps, tol);
    });
  }

  if (opt.include_unet) {
    // End to end: weighted CE on a 2-Unet forward pass, probing a random
    // subset of every trainable tensor. Probes that straddle a relu or
    // pooling kink are filtered by the second-difference test.
    for (const bool bn : {false, true}) {
      b.add(bn ? "unet2.loss.batch-norm" : "unet2.loss.plain", [&, bn](int s) {
        UnetConfig cfg;
        cfg.start_channels = 2;
        cfg.batch_norm_contracting = bn;
        auto model = UnetModel<double>::build(cfg, opt.base_seed + 100 + static_cast<std::uint64_t>(s));
        auto rng = b.rng_for(30, s);
        // Freshly built biases are exactly zero, which parks whole relu-dead
        // regions of this narrow net precisely on the kink where one-sided
        // and central differences legitimately disagree; a bounded jitter on
        // every parameter restores general position.
        for (auto& p : model.parameters()) {
          const TensorXd noise = away_from_zero(uniform_tensor(p.shape(), rng, -0.06, 0.06), 0.015);
          p.values() += noise.values();
        }
        // 32x32 keeps the bottleneck at 2x2, large enough for train-mode
        // batch-norm statistics
        TensorXd x = uniform_tensor(Shape{1, 1, 32, 32}, rng, 0, 1);
        TensorXd target = binary_mask(Shape{1, 1, 32, 32}, rng, 0.25);
        const ClassWeights w{3.0, 1.0};
        LossFn loss_fn = [&](Tape<double>& t) -> TensorXd {
          TensorXd logits = model.forward(t, x, Mode::Train);
          return weighted_cross_entropy(t, logits, target, w);
        };
        GradCheckOptions gopt;
        gopt.max_checks = 4;
        gopt.subset_seed = opt.base_seed + static_cast<std::uint64_t>(s) * 977;
        gopt.curvature_skip = 1e4;
        return check_owned_params(loss_fn, model.parameters(), model.parameters(), eps, tol, gopt);
      });
    }
  }

  BatteryResult result;
  result.cases = std::move(b.cases);
  for (const auto& c : result.cases) {
    result.max_rel_error = std::max(result.max_rel_error, c.report.max_rel_error);
    result.pass = result.pass && c.report.pass;
  }
  return result;
}

}  // namespace unsq
