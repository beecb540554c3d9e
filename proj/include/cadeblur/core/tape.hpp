#pragma once

#include <cstddef>
#include <deque>
#include <functional>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include "cadeblur/core/tensor.hpp"

namespace cadeblur {

/// A trainable tensor together with its accumulated gradient.
class Parameter {
 public:
  Parameter(std::string name, Tensor value, std::size_t id)
      : value(std::move(value)), grad(this->value.shape()), name_(std::move(name)), id_(id) {}

  const std::string& name() const noexcept { return name_; }
  std::size_t id() const noexcept { return id_; }
  void zero_grad() { grad.fill(0.0); }

  Tensor value;
  Tensor grad;

 private:
  std::string name_;
  std::size_t id_;
};

class Tape;

/// Handle to a value recorded on a Tape.
struct Var {
  Tape* tape = nullptr;
  std::size_t id = 0;

  const Tensor& value() const;
  const Shape& shape() const { return value().shape(); }
  std::size_t dim(std::size_t axis) const { return shape().at(axis); }
};

/// One recorded operation. `backward` reads the gradient of `output` and
/// accumulates into the gradients of `inputs`.
struct TapeNode {
  std::string op;
  std::vector<std::size_t> inputs;
  std::size_t output = 0;
  std::function<void(const Tensor& dy)> backward;
};

/// Linear record of differentiable operations, replayed in reverse by
/// backward(). Parameters bound to a tape accumulate straight into
/// Parameter::grad.
class Tape {
 public:
  explicit Tape(bool record = true) : record_(record) {}

  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  bool recording() const noexcept { return record_; }

  Var constant(Tensor v) { return add_slot(std::move(v), nullptr, false); }

  /// A leaf whose gradient is kept on the tape (inputs under gradient check).
  Var leaf(Tensor v) { return add_slot(std::move(v), nullptr, record_); }

  Var param(Parameter& p) {
    if (auto it = bound_.find(&p); it != bound_.end()) return Var{this, it->second};
    Var v = add_slot(Tensor{}, &p, record_);
    bound_.emplace(&p, v.id);
    return v;
  }

  const Tensor& value(Var v) const {
    const Slot& s = slots_.at(v.id);
    return s.param ? s.param->value : s.value;
  }

  bool requires_grad(Var v) const { return slots_.at(v.id).requires_grad; }

  /// Gradient buffer of v, zero-initialised on first access.
  Tensor& grad(Var v) {
    Slot& s = slots_.at(v.id);
    if (s.param) return s.param->grad;
    if (s.grad.empty()) s.grad = Tensor(value(v).shape());
    return s.grad;
  }

  bool has_grad(Var v) const {
    const Slot& s = slots_.at(v.id);
    return s.param != nullptr || !s.grad.empty();
  }

  /// Records an op. When no input requires a gradient (or recording is
  /// off) only the value is stored.
  Var push(std::string op, Tensor value, std::initializer_list<Var> inputs,
           std::function<void(const Tensor& dy)> backward) {
    bool needs = false;
    for (const Var& in : inputs) needs = needs || requires_grad(in);
    needs = needs && record_;
    Var out = add_slot(std::move(value), nullptr, needs);
    if (needs) {
      TapeNode node;
      node.op = std::move(op);
      for (const Var& in : inputs) node.inputs.push_back(in.id);
      node.output = out.id;
      node.backward = std::move(backward);
      nodes_.push_back(std::move(node));
    }
    return out;
  }

  /// Reverse replay from a scalar. Gradients accumulate (callers zero
  /// parameter gradients between steps).
  void backward(Var loss) {
    if (value(loss).size() != 1) {
      throw DimensionError("backward() requires a scalar loss, got shape " + shape_string(value(loss).shape()));
    }
    if (!requires_grad(loss)) return;
    grad(loss)[0] += 1.0;
    for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it) {
      Slot& out = slots_[it->output];
      if (out.grad.empty()) continue;
      it->backward(out.grad);
    }
  }

  /// Op names in recording order.
  std::vector<std::string> trace() const {
    std::vector<std::string> ops;
    ops.reserve(nodes_.size());
    for (const auto& n : nodes_) ops.push_back(n.op);
    return ops;
  }

  const std::vector<TapeNode>& nodes() const noexcept { return nodes_; }
  std::size_t size() const noexcept { return slots_.size(); }

 private:
  struct Slot {
    Tensor value;
    Parameter* param = nullptr;
    bool requires_grad = false;
    Tensor grad;
  };

  Var add_slot(Tensor v, Parameter* p, bool requires_grad) {
    slots_.push_back(Slot{std::move(v), p, requires_grad, Tensor{}});
    return Var{this, slots_.size() - 1};
  }

  bool record_;
  std::deque<Slot> slots_;
  std::vector<TapeNode> nodes_;
  std::unordered_map<Parameter*, std::size_t> bound_;
};

inline const Tensor& Var::value() const { return tape->value(*this); }

}  // namespace cadeblur
