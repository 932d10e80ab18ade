#pragma once

// Reverse-mode differentiation over a recorded tape.
//
// Every op appends one node holding its output value and, when any input
// needs a gradient, a closure that pushes the output gradient back into the
// inputs' gradient buffers. Nodes are appended after their inputs, so the
// tape is always in topological order and backward is a reverse sweep.

#include <cstdint>
#include <deque>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "gseg/tensor.hpp"

namespace gseg {

/// A learnable tensor plus its accumulated gradient.
struct Parameter {
  std::string name;
  Tensor value;
  Tensor grad;

  Parameter() = default;
  Parameter(std::string n, Tensor v)
      : name(std::move(n)), value(std::move(v)), grad(value.shape()) {}

  void zero_grad() { grad = Tensor(value.shape()); }
};

class Tape;

class Var {
 public:
  Var() = default;

  bool valid() const { return tape_ != nullptr; }
  Tape& tape() const { return *tape_; }
  std::size_t id() const { return id_; }

  const Tensor& value() const;
  const Shape& shape() const { return value().shape(); }
  bool requires_grad() const;

 private:
  friend class Tape;
  Var(Tape* tape, std::size_t id) : tape_(tape), id_(id) {}

  Tape* tape_ = nullptr;
  std::size_t id_ = 0;
};

class Tape {
 public:
  using BackwardFn = std::function<void(Tape&, const Tensor& grad_out)>;

  /// A tape built with record_gradients == false never stores backward
  /// closures; used for inference and finite-difference probes.
  explicit Tape(bool record_gradients = true) : recording_(record_gradients) {}

  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Var constant(Tensor value);
  Var variable(Tensor value);
  /// Leaf bound to a parameter; backward() adds the leaf's gradient into
  /// param.grad.
  Var parameter(Parameter& param);

  Var record(Tensor value, std::span<const Var> inputs, BackwardFn backward);
  Var record(Tensor value, std::initializer_list<Var> inputs, BackwardFn backward) {
    return record(std::move(value), std::span<const Var>(inputs.begin(), inputs.size()),
                  std::move(backward));
  }

  bool recording() const { return recording_; }
  bool requires_grad(Var v) const { return node(v).requires_grad; }
  const Tensor& value(Var v) const { return node(v).value; }

  /// Gradient buffer of v, zero-initialized on first access.
  Tensor& grad(Var v);
  bool has_grad(Var v) const { return !node(v).grad.empty(); }

  /// Seeds d(root)/d(root) = 1 and sweeps the tape backwards. root must hold
  /// a single element.
  void backward(Var root);

  std::size_t size() const { return nodes_.size(); }

 private:
  struct Node {
    Tensor value;
    Tensor grad;
    bool requires_grad = false;
    Parameter* param = nullptr;
    BackwardFn backward;
  };

  const Node& node(Var v) const;
  Node& node(Var v);

  bool recording_;
  std::deque<Node> nodes_;
};

namespace ops {

enum class SizeRounding {
  exact,  // (H + 2p - k) must be divisible by the stride
  floor,  // trailing rows/cols that do not fill a window are dropped
};

Var add(Var a, Var b);
Var sub(Var a, Var b);
Var mul(Var a, Var b);
Var scale(Var a, double factor);
Var relu(Var a);
Var sigmoid(Var a);
Var sum(Var a);
Var mean(Var a);

Var reshape(Var a, Shape shape);

/// Concatenation along axis 1; all other dims must agree.
Var concat_channels(Var a, Var b);

/// out[i] = a[source[i]]; backward scatter-adds. Used for every value
/// permutation (filter expansion, feature transforms).
Var gather(Var a, std::shared_ptr<const std::vector<std::int64_t>> source, Shape out_shape);

/// Cross-correlation: x [B,C,H,W], w [K,C,k,k] with odd k, zero padding.
Var conv2d(Var x, Var w, int stride, int padding,
           SizeRounding rounding = SizeRounding::exact);

/// x [B,C,...] plus b[C] broadcast over every trailing axis.
Var add_channel_bias(Var x, Var b);

/// Non-overlapping 2x2 max over the last two axes. Ties resolve to the first
/// element in row-major window order.
Var max_pool2d(Var x);

/// Nearest-neighbour replication over the last two axes.
Var upsample_nearest(Var x, int factor);

/// Arithmetic mean over `axis`, which is removed from the shape.
Var mean_axis(Var x, int axis);

/// Mean binary cross-entropy on logits; target must be exactly 0 or 1.
Var bce_with_logits(Var logits, const Tensor& target);

struct BatchNormState {
  Tensor running_mean;
  Tensor running_var;
  double momentum = 0.1;
  double eps = 1e-5;

  BatchNormState() = default;
  explicit BatchNormState(std::int64_t channels)
      : running_mean(Shape{channels}, 0.0), running_var(Shape{channels}, 1.0) {}
};

/// Per-channel normalization with statistics pooled over every axis except
/// axis 1. In training mode batch statistics are used and, when `state` is
/// non-null and `update_running` set, the running averages move towards them.
Var batch_norm(Var x, Var gamma, Var beta, BatchNormState* state, bool training,
               bool update_running = true);

}  // namespace ops

struct GradCheckOptions {
  double epsilon = 1e-5;
  /// 0 checks every coordinate; otherwise a seeded sample per tensor.
  std::int64_t max_coords_per_tensor = 0;
  std::uint64_t seed = 0;
};

/// Central differences against tape gradients. f must build its graph on the
/// given tape and register each checked parameter through tape.parameter().
/// Returns max over coordinates of |a-b| / max(1, |a|, |b|).
double finite_diff_check(const std::function<Var(Tape&)>& f,
                         std::span<Parameter* const> params,
                         const GradCheckOptions& options = {});

/// Convenience form: f receives one leaf per input tensor.
double finite_diff_check(const std::function<Var(Tape&, std::span<const Var>)>& f,
                         std::vector<Tensor> inputs, const GradCheckOptions& options = {});

}  // namespace gseg
