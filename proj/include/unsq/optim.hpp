#pragma once

#include <cmath>
#include <string>
#include <vector>

#include "unsq/tensor.hpp"

namespace unsq {

enum class OptimizerKind { SgdMomentum, Adam };

struct OptimizerSpec {
  OptimizerKind kind = OptimizerKind::Adam;
  double learning_rate = 1e-3;
  double momentum = 0.9;  // beta1 for Adam
  double beta2 = 0.999;
  double weight_decay = 0.0;

  void validate() const {
    if (!(learning_rate > 0)) throw Error("optimizer: learning_rate must be positive");
    if (momentum < 0 || momentum >= 1) throw Error("optimizer: momentum/beta1 must be in [0,1)");
    if (beta2 < 0 || beta2 >= 1) throw Error("optimizer: beta2 must be in [0,1)");
    if (weight_decay < 0) throw Error("optimizer: weight_decay must be non-negative");
  }
};

template <typename Scalar>
struct OptimizerState {
  using Array = typename TensorImpl<Scalar>::Array;
  std::vector<Array> m;  // momentum / first moment
  std::vector<Array> v;  // second moment (Adam)
  std::int64_t step = 0;
};

// One update over all parameters from their accumulated gradients.
// SGD-momentum: v <- mu*v + g; p <- p - lr*v.
// Adam: bias-corrected first/second moments, eps = 1e-8.
template <typename Scalar>
void optimizer_step(std::vector<Tensor<Scalar>>& params, const OptimizerSpec& spec,
                    OptimizerState<Scalar>& state) {
  using Array = typename TensorImpl<Scalar>::Array;
  spec.validate();
  if (state.step == 0 && state.m.empty()) {
    state.m.reserve(params.size());
    for (auto& p : params) state.m.emplace_back(Array::Zero(p.size()));
    if (spec.kind == OptimizerKind::Adam) {
      state.v.reserve(params.size());
      for (auto& p : params) state.v.emplace_back(Array::Zero(p.size()));
    }
  }
  if (state.m.size() != params.size()) {
    throw Error("optimizer_step: state tracks " + std::to_string(state.m.size()) + " tensors, got " +
                std::to_string(params.size()));
  }
  state.step += 1;
  const Scalar lr = static_cast<Scalar>(spec.learning_rate);
  const Scalar wd = static_cast<Scalar>(spec.weight_decay);
  for (std::size_t i = 0; i < params.size(); ++i) {
    auto& p = params[i];
    if (state.m[i].size() != p.size()) {
      throw Error("optimizer_step: parameter " + std::to_string(i) + " changed size");
    }
    Array g = p.grad_allocated() ? Array(p.grad()) : Array(Array::Zero(p.size()));
    if (wd != Scalar(0)) g += wd * p.values();
    if (spec.kind == OptimizerKind::SgdMomentum) {
      const Scalar mu = static_cast<Scalar>(spec.momentum);
      state.m[i] = mu * state.m[i] + g;
      p.values() -= lr * state.m[i];
    } else {
      const Scalar b1 = static_cast<Scalar>(spec.momentum);
      const Scalar b2 = static_cast<Scalar>(spec.beta2);
      const Scalar eps = Scalar(1e-8);
      state.m[i] = b1 * state.m[i] + (Scalar(1) - b1) * g;
      state.v[i] = b2 * state.v[i] + (Scalar(1) - b2) * g.square();
      const Scalar c1 = Scalar(1) - std::pow(b1, static_cast<Scalar>(state.step));
      const Scalar c2 = Scalar(1) - std::pow(b2, static_cast<Scalar>(state.step));
      p.values() -= lr * (state.m[i] / c1) / ((state.v[i] / c2).sqrt() + eps);
    }
  }
}

template <typename Scalar>
void zero_grads(std::vector<Tensor<Scalar>>& params) {
  for (auto& p : params) p.zero_grad();
}

}  // namespace unsq
