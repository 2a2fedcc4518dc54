#pragma once

#include <Eigen/Core>
#include <cmath>
#include <initializer_list>
#include <memory>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "unsq/common.hpp"

namespace unsq {

// Dense 4-D shape, (batch, channels, rows, cols). Values are stored flat in
// row-major (n, c, h, w) order, so a single (n, c) plane is contiguous.
struct Shape {
  Eigen::Index n = 0;
  Eigen::Index c = 0;
  Eigen::Index h = 0;
  Eigen::Index w = 0;

  Eigen::Index size() const { return n * c * h * w; }
  Eigen::Index plane() const { return h * w; }
  bool operator==(const Shape&) const = default;

  std::string str() const {
    std::ostringstream os;
    os << n << "x" << c << "x" << h << "x" << w;
    return os.str();
  }
};

template <typename Scalar>
struct TensorImpl {
  using Array = Eigen::Array<Scalar, Eigen::Dynamic, 1>;

  Shape shape;
  Array values;
  Array grad;  // size 0 until backward touches this tensor
  bool requires_grad = false;

  bool grad_allocated() const { return grad.size() == values.size() && values.size() > 0; }
  void ensure_grad() {
    if (!grad_allocated()) grad = Array::Zero(values.size());
  }
};

// Shared-storage handle to a dense 4-D array with an optional gradient
// buffer. Copies are cheap and alias the same storage; a Tensor is immutable
// after construction except through values()/grad() by code that owns it.
template <typename Scalar>
class Tensor {
 public:
  using Array = Eigen::Array<Scalar, Eigen::Dynamic, 1>;

  Tensor() = default;

  static Tensor zeros(Shape s, bool requires_grad = false) {
    return Tensor(s, Array::Zero(s.size()), requires_grad);
  }

  static Tensor full(Shape s, Scalar v, bool requires_grad = false) {
    return Tensor(s, Array::Constant(s.size(), v), requires_grad);
  }

  static Tensor ones(Shape s, bool requires_grad = false) { return full(s, Scalar(1), requires_grad); }

  // User-facing construction rejects non-finite values outright.
  static Tensor from_array(Shape s, Array vals, bool requires_grad = false) {
    if (vals.size() != s.size()) {
      throw ShapeError("tensor: " + std::to_string(vals.size()) + " values for shape " + s.str());
    }
    for (Eigen::Index i = 0; i < vals.size(); ++i) {
      if (!std::isfinite(static_cast<double>(vals[i]))) {
        throw Error("tensor: non-finite value at flat index " + std::to_string(i));
      }
    }
    return Tensor(s, std::move(vals), requires_grad);
  }

  static Tensor from_values(Shape s, std::initializer_list<Scalar> vals, bool requires_grad = false) {
    Array a(static_cast<Eigen::Index>(vals.size()));
    Eigen::Index i = 0;
    for (Scalar v : vals) a[i++] = v;
    return from_array(s, std::move(a), requires_grad);
  }

  static Tensor from_vector(Shape s, const std::vector<Scalar>& vals, bool requires_grad = false) {
    Array a(static_cast<Eigen::Index>(vals.size()));
    for (Eigen::Index i = 0; i < a.size(); ++i) a[i] = vals[static_cast<std::size_t>(i)];
    return from_array(s, std::move(a), requires_grad);
  }

  // Internal construction path for op outputs; finiteness is only asserted
  // when UNSQ_CHECK_FINITE=1 (see ops).
  static Tensor from_expr(Shape s, Array vals, bool requires_grad = false) {
    return Tensor(s, std::move(vals), requires_grad);
  }

  bool defined() const { return impl_ != nullptr; }
  const Shape& shape() const { return impl_->shape; }
  Eigen::Index size() const { return impl_->shape.size(); }

  Array& values() { return impl_->values; }
  const Array& values() const { return impl_->values; }
  Scalar* data() { return impl_->values.data(); }
  const Scalar* data() const { return impl_->values.data(); }

  bool requires_grad() const { return impl_->requires_grad; }
  void set_requires_grad(bool rg) { impl_->requires_grad = rg; }

  Eigen::Index flat_index(Eigen::Index n, Eigen::Index c, Eigen::Index h, Eigen::Index w) const {
    const Shape& s = impl_->shape;
    return ((n * s.c + c) * s.h + h) * s.w + w;
  }
  Scalar& at(Eigen::Index n, Eigen::Index c, Eigen::Index h, Eigen::Index w) {
    return impl_->values[flat_index(n, c, h, w)];
  }
  Scalar at(Eigen::Index n, Eigen::Index c, Eigen::Index h, Eigen::Index w) const {
    return impl_->values[flat_index(n, c, h, w)];
  }

  // Scalar extraction for 1x1x1x1 tensors (losses).
  Scalar item() const {
    if (size() != 1) throw ShapeError("item(): tensor of shape " + shape().str() + " is not scalar");
    return impl_->values[0];
  }

  bool grad_allocated() const { return impl_->grad_allocated(); }
  Array& grad() {
    impl_->ensure_grad();
    return impl_->grad;
  }
  const Array& grad() const {
    if (!impl_->grad_allocated()) throw Error("grad(): no gradient on tensor of shape " + shape().str());
    return impl_->grad;
  }
  Tensor grad_tensor() const { return Tensor(shape(), grad(), false); }
  void zero_grad() {
    if (impl_->grad.size() > 0) impl_->grad.setZero();
  }

  // Deep copy of values (gradient buffer is not copied).
  Tensor clone(bool requires_grad) const { return Tensor(shape(), impl_->values, requires_grad); }

  std::shared_ptr<TensorImpl<Scalar>> impl() const { return impl_; }

 private:
  Tensor(Shape s, Array vals, bool requires_grad) : impl_(std::make_shared<TensorImpl<Scalar>>()) {
    impl_->shape = s;
    impl_->values = std::move(vals);
    impl_->requires_grad = requires_grad;
  }

  std::shared_ptr<TensorImpl<Scalar>> impl_;
};

using TensorXd = Tensor<double>;
using TensorXf = Tensor<float>;

template <typename Scalar>
void accumulate_grad(TensorImpl<Scalar>& t, const typename TensorImpl<Scalar>::Array& g) {
  t.ensure_grad();
  t.grad += g;
}

}  // namespace unsq
