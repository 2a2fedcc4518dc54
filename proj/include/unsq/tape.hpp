#pragma once

#include <functional>
#include <memory>
#include <string>
#include <unordered_set>
#include <utility>
#include <vector>

#include "unsq/tensor.hpp"

namespace unsq {

// Reverse-mode autodiff record. Ops append nodes in execution order, which
// is a topological order by construction; backward() walks it in reverse.
// A tape is rebuilt for every forward pass (define-by-run) and is strictly
// single-threaded. Gradients accumulate additively into tensors' grad
// buffers and persist until explicitly zeroed by the caller.
template <typename Scalar>
class Tape {
 public:
  using Impl = TensorImpl<Scalar>;

  explicit Tape(bool recording = true) : recording_(recording) {}

  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  bool recording() const { return recording_; }

  void record(const char* op, std::shared_ptr<Impl> output, std::function<void()> backward) {
    nodes_.push_back(Node{op, std::move(output), std::move(backward)});
    outputs_.insert(nodes_.back().output.get());
  }

  void register_leaf(const Tensor<Scalar>& t) { leaves_.push_back(t.impl()); }

  const std::vector<std::shared_ptr<Impl>>& leaves() const { return leaves_; }

  std::size_t size() const { return nodes_.size(); }

  bool produced_here(const Tensor<Scalar>& t) const { return outputs_.count(t.impl().get()) > 0; }

  // Seeds d(loss)/d(loss) = 1 and sweeps the record backwards. Nodes whose
  // output never received a gradient are dead branches and are skipped.
  // Registered leaves that stay unreached end up with zero gradients.
  void backward(const Tensor<Scalar>& loss) {
    if (!loss.defined() || loss.size() != 1) {
      throw ShapeError("backward: loss must be a scalar tensor");
    }
    if (!produced_here(loss)) {
      throw Error("backward: loss was not produced on this tape");
    }
    loss.impl()->ensure_grad();
    loss.impl()->grad[0] += Scalar(1);
    for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it) {
      if (!it->output->grad_allocated()) continue;
      it->backward();
    }
    for (auto& leaf : leaves_) leaf->ensure_grad();
  }

 private:
  struct Node {
    const char* op;
    std::shared_ptr<Impl> output;
    std::function<void()> backward;
  };

  bool recording_;
  std::vector<Node> nodes_;
  std::unordered_set<const Impl*> outputs_;
  std::vector<std::shared_ptr<Impl>> leaves_;
};

using TapeXd = Tape<double>;
using TapeXf = Tape<float>;

}  // namespace unsq
