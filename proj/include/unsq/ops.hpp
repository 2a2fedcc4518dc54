#pragma once

#include <cmath>
#include <string>

#include "unsq/tape.hpp"
#include "unsq/tensor.hpp"

namespace unsq {

namespace detail {

template <typename Scalar>
void check_same_shape(const char* op, const Tensor<Scalar>& a, const Tensor<Scalar>& b) {
  if (!(a.shape() == b.shape())) {
    throw ShapeError(std::string(op) + ": shape mismatch " + a.shape().str() + " vs " + b.shape().str());
  }
}

template <typename Scalar>
void finite_check(const char* op, const Tensor<Scalar>& t) {
  if (!check_finite_enabled()) return;
  const auto& v = t.values();
  for (Eigen::Index i = 0; i < v.size(); ++i) {
    if (!std::isfinite(static_cast<double>(v[i]))) {
      throw Error(std::string(op) + ": non-finite output at flat index " + std::to_string(i));
    }
  }
}

template <typename Scalar>
bool wants_grad(const Tape<Scalar>& tape, const Tensor<Scalar>& a) {
  return tape.recording() && a.requires_grad();
}

template <typename Scalar>
bool wants_grad(const Tape<Scalar>& tape, const Tensor<Scalar>& a, const Tensor<Scalar>& b) {
  return tape.recording() && (a.requires_grad() || b.requires_grad());
}

}  // namespace detail

template <typename Scalar>
Tensor<Scalar> add(Tape<Scalar>& tape, const Tensor<Scalar>& a, const Tensor<Scalar>& b) {
  detail::check_same_shape("add", a, b);
  auto out = Tensor<Scalar>::from_expr(a.shape(), a.values() + b.values());
  detail::finite_check("add", out);
  if (detail::wants_grad(tape, a, b)) {
    out.set_requires_grad(true);
    auto ai = a.impl(), bi = b.impl(), oi = out.impl();
    tape.record("add", oi, [ai, bi, oi] {
      if (ai->requires_grad) accumulate_grad(*ai, oi->grad);
      if (bi->requires_grad) accumulate_grad(*bi, oi->grad);
    });
  }
  return out;
}

template <typename Scalar>
Tensor<Scalar> sub(Tape<Scalar>& tape, const Tensor<Scalar>& a, const Tensor<Scalar>& b) {
  detail::check_same_shape("sub", a, b);
  auto out = Tensor<Scalar>::from_expr(a.shape(), a.values() - b.values());
  detail::finite_check("sub", out);
  if (detail::wants_grad(tape, a, b)) {
    out.set_requires_grad(true);
    auto ai = a.impl(), bi = b.impl(), oi = out.impl();
    tape.record("sub", oi, [ai, bi, oi] {
      if (ai->requires_grad) accumulate_grad(*ai, oi->grad);
      if (bi->requires_grad) accumulate_grad<Scalar>(*bi, -oi->grad);
    });
  }
  return out;
}

// Hadamard product.
template <typename Scalar>
Tensor<Scalar> mul(Tape<Scalar>& tape, const Tensor<Scalar>& a, const Tensor<Scalar>& b) {
  detail::check_same_shape("mul", a, b);
  auto out = Tensor<Scalar>::from_expr(a.shape(), a.values() * b.values());
  detail::finite_check("mul", out);
  if (detail::wants_grad(tape, a, b)) {
    out.set_requires_grad(true);
    auto ai = a.impl(), bi = b.impl(), oi = out.impl();
    tape.record("mul", oi, [ai, bi, oi] {
      if (ai->requires_grad) accumulate_grad<Scalar>(*ai, oi->grad * bi->values);
      if (bi->requires_grad) accumulate_grad<Scalar>(*bi, oi->grad * ai->values);
    });
  }
  return out;
}

template <typename Scalar>
Tensor<Scalar> scalar_mul(Tape<Scalar>& tape, const Tensor<Scalar>& a, Scalar k) {
  auto out = Tensor<Scalar>::from_expr(a.shape(), a.values() * k);
  detail::finite_check("scalar_mul", out);
  if (detail::wants_grad(tape, a)) {
    out.set_requires_grad(true);
    auto ai = a.impl(), oi = out.impl();
    tape.record("scalar_mul", oi, [ai, oi, k] { accumulate_grad<Scalar>(*ai, oi->grad * k); });
  }
  return out;
}

template <typename Scalar>
Tensor<Scalar> scalar_add(Tape<Scalar>& tape, const Tensor<Scalar>& a, Scalar k) {
  auto out = Tensor<Scalar>::from_expr(a.shape(), a.values() + k);
  detail::finite_check("scalar_add", out);
  if (detail::wants_grad(tape, a)) {
    out.set_requires_grad(true);
    auto ai = a.impl(), oi = out.impl();
    tape.record("scalar_add", oi, [ai, oi] { accumulate_grad(*ai, oi->grad); });
  }
  return out;
}

template <typename Scalar>
Tensor<Scalar> exp(Tape<Scalar>& tape, const Tensor<Scalar>& a) {
  auto out = Tensor<Scalar>::from_expr(a.shape(), a.values().exp());
  detail::finite_check("exp", out);
  if (detail::wants_grad(tape, a)) {
    out.set_requires_grad(true);
    auto ai = a.impl(), oi = out.impl();
    tape.record("exp", oi, [ai, oi] { accumulate_grad<Scalar>(*ai, oi->grad * oi->values); });
  }
  return out;
}

template <typename Scalar>
Tensor<Scalar> log(Tape<Scalar>& tape, const Tensor<Scalar>& a) {
  const auto& v = a.values();
  for (Eigen::Index i = 0; i < v.size(); ++i) {
    if (!(v[i] > Scalar(0))) {
      throw Error("log: non-positive input at flat index " + std::to_string(i));
    }
  }
  auto out = Tensor<Scalar>::from_expr(a.shape(), v.log());
  detail::finite_check("log", out);
  if (detail::wants_grad(tape, a)) {
    out.set_requires_grad(true);
    auto ai = a.impl(), oi = out.impl();
    tape.record("log", oi, [ai, oi] { accumulate_grad<Scalar>(*ai, oi->grad / ai->values); });
  }
  return out;
}

template <typename Scalar>
Tensor<Scalar> negate(Tape<Scalar>& tape, const Tensor<Scalar>& a) {
  auto out = Tensor<Scalar>::from_expr(a.shape(), -a.values());
  detail::finite_check("negate", out);
  if (detail::wants_grad(tape, a)) {
    out.set_requires_grad(true);
    auto ai = a.impl(), oi = out.impl();
    tape.record("negate", oi, [ai, oi] { accumulate_grad<Scalar>(*ai, -oi->grad); });
  }
  return out;
}

namespace detail {

// Serial flat-order accumulation; reductions are kept reassociation-free so
// results are reproducible bit-for-bit.
template <typename Scalar>
Scalar flat_sum(const typename Tensor<Scalar>::Array& v) {
  Scalar acc = 0;
  for (Eigen::Index i = 0; i < v.size(); ++i) acc += v[i];
  return acc;
}

}  // namespace detail

template <typename Scalar>
Tensor<Scalar> sum(Tape<Scalar>& tape, const Tensor<Scalar>& a) {
  if (a.size() == 0) throw ShapeError("sum: empty tensor");
  auto out = Tensor<Scalar>::full(Shape{1, 1, 1, 1}, detail::flat_sum<Scalar>(a.values()));
  detail::finite_check("sum", out);
  if (detail::wants_grad(tape, a)) {
    out.set_requires_grad(true);
    auto ai = a.impl(), oi = out.impl();
    tape.record("sum", oi, [ai, oi] {
      accumulate_grad<Scalar>(*ai, TensorImpl<Scalar>::Array::Constant(ai->values.size(), oi->grad[0]));
    });
  }
  return out;
}

template <typename Scalar>
Tensor<Scalar> mean(Tape<Scalar>& tape, const Tensor<Scalar>& a) {
  if (a.size() == 0) throw ShapeError("mean: empty tensor");
  const Scalar inv = Scalar(1) / static_cast<Scalar>(a.size());
  auto out = Tensor<Scalar>::full(Shape{1, 1, 1, 1}, detail::flat_sum<Scalar>(a.values()) * inv);
  detail::finite_check("mean", out);
  if (detail::wants_grad(tape, a)) {
    out.set_requires_grad(true);
    auto ai = a.impl(), oi = out.impl();
    tape.record("mean", oi, [ai, oi, inv] {
      accumulate_grad<Scalar>(*ai, TensorImpl<Scalar>::Array::Constant(ai->values.size(), oi->grad[0] * inv));
    });
  }
  return out;
}

}  // namespace unsq
