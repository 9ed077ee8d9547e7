#ifndef NHL_TAPE_HPP
#define NHL_TAPE_HPP

// Reverse-mode differentiation over the small op set the model uses.
// A tape records one forward pass; backward() consumes it exactly once.

#include "nhl/ops.hpp"

#include <functional>
#include <map>
#include <string>
#include <utility>
#include <vector>

namespace nhl {

template <typename T>
class GradientTape {
 public:
  struct Var {
    std::size_t id = 0;
  };
  using BackwardFn = std::function<void(GradientTape&, const Tensor<T>&)>;

  /// Leaf that never receives a gradient (inputs, frozen buffers).
  Var constant(Tensor<T> value) { return push(std::move(value), false, {}, {}); }

  /// Named leaf. Only parameters with requires_grad appear in backward()'s result.
  Var parameter(std::string name, Tensor<T> value, bool requires_grad) {
    Var v = push(std::move(value), requires_grad, {}, {});
    nodes_[v.id].name = std::move(name);
    return v;
  }

  /// Records an op output. The backward function runs only if the output needs a gradient.
  Var record(Tensor<T> value, std::initializer_list<Var> inputs, BackwardFn backward) {
    bool needs = false;
    for (Var in : inputs) needs = needs || nodes_.at(in.id).requires_grad;
    return push(std::move(value), needs, {}, needs ? std::move(backward) : BackwardFn{});
  }

  const Tensor<T>& value(Var v) const { return nodes_.at(v.id).value; }
  bool requires_grad(Var v) const { return nodes_.at(v.id).requires_grad; }
  std::size_t size() const { return nodes_.size(); }
  bool consumed() const { return consumed_; }

  /// Adds `grad` into the gradient of `v`; ignored for nodes that need none.
  void accumulate(Var v, Tensor<T> grad) {
    Node& node = nodes_.at(v.id);
    if (!node.requires_grad) return;
    if (grad.shape() != node.value.shape())
      throw DimensionError("gradient shape " + shape_string(grad.shape()) + " != value shape " +
                           shape_string(node.value.shape()));
    if (node.grad.empty()) {
      node.grad = std::move(grad);
    } else {
      for (Index i = 0; i < node.grad.size(); ++i) node.grad[i] += grad[i];
    }
  }

  /// Gradients of a scalar `loss` for every trainable parameter leaf.
  std::map<std::string, Tensor<T>> backward(Var loss) {
    if (consumed_) throw UsageError("gradient tape already consumed by a previous backward pass");
    consumed_ = true;
    if (nodes_.at(loss.id).value.size() != 1) throw UsageError("backward requires a scalar loss");
    std::map<std::string, Tensor<T>> grads;
    if (!nodes_[loss.id].requires_grad) return grads;
    nodes_[loss.id].grad = Tensor<T>(nodes_[loss.id].value.shape(), T(1));
    for (std::size_t i = loss.id + 1; i-- > 0;) {
      Node& node = nodes_[i];
      if (!node.requires_grad || node.grad.empty()) continue;
      if (node.backward) {
        Tensor<T> g = std::move(node.grad);
        node.grad = Tensor<T>();
        node.backward(*this, g);
      } else if (!node.name.empty()) {
        grads.emplace(node.name, std::move(node.grad));
      }
    }
    // Parameters the loss does not depend on still get an explicit zero gradient.
    for (const Node& node : nodes_)
      if (node.requires_grad && !node.backward && !node.name.empty() && !grads.contains(node.name))
        grads.emplace(node.name, Tensor<T>(node.value.shape()));
    return grads;
  }

 private:
  struct Node {
    Tensor<T> value;
    Tensor<T> grad;
    bool requires_grad = false;
    std::string name;
    BackwardFn backward;
  };

  Var push(Tensor<T> value, bool requires_grad, std::string name, BackwardFn backward) {
    if (consumed_) throw UsageError("cannot record onto a consumed gradient tape");
    nodes_.push_back(Node{std::move(value), Tensor<T>(), requires_grad, std::move(name), std::move(backward)});
    return Var{nodes_.size() - 1};
  }

  std::vector<Node> nodes_;
  bool consumed_ = false;
};

/// Differentiable counterparts of the primitives in ops.hpp.
namespace ag {

template <typename T>
using Var = typename GradientTape<T>::Var;

template <typename T>
Var<T> conv2d(GradientTape<T>& tape, Var<T> x, Var<T> w, Index stride, Index padding) {
  Tensor<T> out = nhl::conv2d(tape.value(x), tape.value(w), stride, padding);
  return tape.record(std::move(out), {x, w}, [x, w, stride, padding](GradientTape<T>& t, const Tensor<T>& g) {
    const Tensor<T>& input = t.value(x);
    const Tensor<T>& kernel = t.value(w);
    if (t.requires_grad(w)) t.accumulate(w, conv2d_backward_weight(g, input, kernel.shape(), stride, padding));
    if (t.requires_grad(x)) t.accumulate(x, conv2d_backward_input(g, kernel, input.shape(), stride, padding));
  });
}

template <typename T>
struct BatchNormOut {
  Var<T> out;
  std::vector<double> mean, var;
};

/// Batch norm in batch-stats mode, or with the given running statistics when
/// `running_mean` / `running_var` are non-null.
template <typename T>
BatchNormOut<T> batchnorm(GradientTape<T>& tape, Var<T> x, Var<T> gamma, Var<T> beta,
                          const Tensor<T>* running_mean = nullptr, const Tensor<T>* running_var = nullptr) {
  auto [y, cache] = running_mean
                        ? batchnorm_inference(tape.value(x), tape.value(gamma), tape.value(beta), *running_mean,
                                              *running_var)
                        : batchnorm_forward(tape.value(x), tape.value(gamma), tape.value(beta));
  BatchNormOut<T> result;
  result.mean = cache.mean;
  result.var = cache.var;
  const bool needs = tape.requires_grad(x) || tape.requires_grad(gamma) || tape.requires_grad(beta);
  if (!needs) cache.normalized = Tensor<T>();
  result.out = tape.record(std::move(y), {x, gamma, beta},
                           [x, gamma, beta, cache = std::move(cache)](GradientTape<T>& t, const Tensor<T>& g) {
                             BatchNormGrads<T> grads = batchnorm_backward(g, cache, t.value(gamma));
                             t.accumulate(gamma, std::move(grads.gamma));
                             t.accumulate(beta, std::move(grads.beta));
                             if (t.requires_grad(x)) t.accumulate(x, std::move(grads.input));
                           });
  return result;
}

template <typename T>
Var<T> relu(GradientTape<T>& tape, Var<T> x) {
  Tensor<T> y = nhl::relu(tape.value(x));
  // The op's own output is read back through its node id, which is the next slot.
  const Var<T> self{tape.size()};
  return tape.record(std::move(y), {x}, [x, self](GradientTape<T>& t, const Tensor<T>& g) {
    t.accumulate(x, relu_backward(g, t.value(self)));
  });
}

template <typename T>
Var<T> add(GradientTape<T>& tape, Var<T> a, Var<T> b) {
  const Tensor<T>& va = tape.value(a);
  const Tensor<T>& vb = tape.value(b);
  if (va.shape() != vb.shape()) throw DimensionError("add: shapes differ");
  Tensor<T> y(va.shape());
  for (Index i = 0; i < y.size(); ++i) y[i] = va[i] + vb[i];
  return tape.record(std::move(y), {a, b}, [a, b](GradientTape<T>& t, const Tensor<T>& g) {
    t.accumulate(a, g);
    t.accumulate(b, g);
  });
}

template <typename T>
Var<T> global_avg_pool(GradientTape<T>& tape, Var<T> x) {
  return tape.record(nhl::global_avg_pool(tape.value(x)), {x}, [x](GradientTape<T>& t, const Tensor<T>& g) {
    t.accumulate(x, global_avg_pool_backward(g, t.value(x).shape()));
  });
}

template <typename T>
Var<T> linear(GradientTape<T>& tape, Var<T> x, Var<T> w, Var<T> b) {
  return tape.record(nhl::linear(tape.value(x), tape.value(w), tape.value(b)), {x, w, b},
                     [x, w, b](GradientTape<T>& t, const Tensor<T>& g) {
                       LinearGrads<T> grads = linear_backward(g, t.value(x), t.value(w));
                       t.accumulate(w, std::move(grads.weight));
                       t.accumulate(b, std::move(grads.bias));
                       if (t.requires_grad(x)) t.accumulate(x, std::move(grads.input));
                     });
}

template <typename T>
Var<T> sum(GradientTape<T>& tape, Var<T> x) {
  double acc = 0.0;
  for (T v : tape.value(x).data()) acc += static_cast<double>(v);
  return tape.record(Tensor<T>({1}, {static_cast<T>(acc)}), {x}, [x](GradientTape<T>& t, const Tensor<T>& g) {
    t.accumulate(x, Tensor<T>(t.value(x).shape(), g[0]));
  });
}

/// Batch-mean softmax entropy of N x C logits (nats).
template <typename T>
Var<T> entropy(GradientTape<T>& tape, Var<T> logits) {
  const std::vector<double> h = entropy_rows(tape.value(logits));
  double acc = 0.0;
  for (double v : h) acc += v;
  acc /= static_cast<double>(h.size());
  return tape.record(Tensor<T>({1}, {static_cast<T>(acc)}), {logits},
                     [logits](GradientTape<T>& t, const Tensor<T>& g) {
                       Tensor<T> grad = entropy_backward(t.value(logits));
                       for (T& v : grad.data()) v *= g[0];
                       t.accumulate(logits, std::move(grad));
                     });
}

template <typename T>
Var<T> cross_entropy(GradientTape<T>& tape, Var<T> logits, std::vector<int> labels) {
  const double loss = nhl::cross_entropy(tape.value(logits), labels);
  return tape.record(Tensor<T>({1}, {static_cast<T>(loss)}), {logits},
                     [logits, labels = std::move(labels)](GradientTape<T>& t, const Tensor<T>& g) {
                       Tensor<T> grad = cross_entropy_backward(t.value(logits), labels);
                       for (T& v : grad.data()) v *= g[0];
                       t.accumulate(logits, std::move(grad));
                     });
}

}  // namespace ag
}  // namespace nhl

#endif  // NHL_TAPE_HPP
