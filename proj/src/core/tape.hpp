#pragma once

#include <functional>
#include <memory>
#include <utility>
#include <vector>

#include "tensor.hpp"

namespace mfen {

// One value in a recorded computation. The gradient buffer is allocated on
// first use so forward-only passes stay lean.
template <typename S>
struct Node {
  Tensor<S> value;
  Tensor<S> grad;
  bool needs_grad = false;

  Tensor<S>& ensure_grad() {
    if (grad.numel() != value.numel()) grad = Tensor<S>::zeros(value.shape);
    return grad;
  }
  bool has_grad() const { return grad.numel() == value.numel(); }
};

template <typename S>
using NodeRef = std::shared_ptr<Node<S>>;

// Reverse-mode tape. Ops append a backward step as they run; backward()
// replays the steps last-to-first. With recording off the ops skip the
// closures entirely (inference mode).
template <typename S>
class Tape {
 public:
  bool recording = true;

  NodeRef<S> leaf(Tensor<S> value, bool needs_grad = false) {
    auto n = std::make_shared<Node<S>>();
    n->value = std::move(value);
    n->needs_grad = needs_grad;
    return n;
  }

  NodeRef<S> make_node(Tensor<S> value) {
    auto n = std::make_shared<Node<S>>();
    n->value = std::move(value);
    n->needs_grad = recording;
    return n;
  }

  void push(std::function<void()> back) {
    if (recording) steps_.push_back(std::move(back));
  }

  void backward() {
    for (auto it = steps_.rbegin(); it != steps_.rend(); ++it) (*it)();
  }

  void clear() { steps_.clear(); }

  std::size_t size() const { return steps_.size(); }

 private:
  std::vector<std::function<void()>> steps_;
};

}  // namespace mfen
