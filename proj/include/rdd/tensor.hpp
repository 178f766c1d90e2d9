#pragma once

#include <cstddef>
#include <functional>
#include <initializer_list>
#include <memory>
#include <string>
#include <vector>

#include "rdd/errors.hpp"
#include "rdd/rng.hpp"

namespace rdd {

class Tape;

using Shape = std::vector<int>;

std::size_t shape_numel(const Shape& shape);
std::string shape_str(const Shape& shape);

namespace detail {

struct Node {
  Shape shape;
  std::vector<double> data;
  std::vector<double> grad;  // sized lazily by Tape::backward
  bool requires_grad = false;
  Tape* tape = nullptr;
};

}  // namespace detail

// Dense row-major f64 tensor. Copying a Tensor shares the underlying
// buffer (it is a handle); clone()/detach() make deep copies. A rank-0
// tensor holds a single scalar.
class Tensor {
 public:
  Tensor() : Tensor(Shape{}) {}
  explicit Tensor(Shape shape, double fill = 0.0);
  Tensor(Shape shape, std::vector<double> data);

  const Shape& shape() const { return node_->shape; }
  int rank() const { return static_cast<int>(node_->shape.size()); }
  int dim(int i) const { return node_->shape[static_cast<std::size_t>(i)]; }
  std::size_t size() const { return node_->data.size(); }

  double* data() { return node_->data.data(); }
  const double* data() const { return node_->data.data(); }
  std::vector<double>& vec() { return node_->data; }
  const std::vector<double>& vec() const { return node_->data; }

  // Scalar access; throws unless size() == 1.
  double value() const;

  double at(std::initializer_list<int> idx) const;

  bool requires_grad() const { return node_->requires_grad; }
  Tape* tape() const { return node_->tape; }

  bool has_grad() const { return !node_->grad.empty(); }
  // Populated gradient; throws if backward has not touched this tensor.
  const std::vector<double>& grad() const;
  Tensor grad_tensor() const;

  // Deep copy detached from any tape; never accumulates gradient.
  Tensor detach() const;
  Tensor clone() const { return detach(); }

  std::shared_ptr<detail::Node> node() const { return node_; }

 private:
  friend class Tape;
  std::shared_ptr<detail::Node> node_;
};

// Records operations for reverse-mode differentiation. One tape per
// training run; a tape and its tensors belong to a single thread.
class Tape {
 public:
  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  // Leaf tensor with requires_grad set, living on this tape.
  Tensor variable(Shape shape, std::vector<double> data);
  Tensor variable(const Tensor& init);

  // `involved` must list every node whose grad the closure reads or writes.
  void record(std::vector<std::shared_ptr<detail::Node>> involved,
              std::function<void()> backward_fn);

  // Populates grad on every requires_grad tensor reachable from `loss`.
  // Calling twice without recording new operations is an error.
  void backward(const Tensor& loss);

  // Drops all recorded operations; leaf variables stay usable.
  void clear();

  std::size_t num_records() const { return records_.size(); }

 private:
  struct Record {
    std::vector<std::shared_ptr<detail::Node>> nodes;
    std::function<void()> fn;
  };
  std::vector<Record> records_;
  bool backward_done_ = false;
};

namespace detail {

// Common tape of the inputs (throws ConfigError on a mix of two tapes);
// nullptr when every input is a constant.
Tape* op_tape(std::initializer_list<const Tensor*> inputs);
bool op_requires_grad(std::initializer_list<const Tensor*> inputs);
// Marks `out` as a gradient-carrying product of `tape`.
void mark_output(Tensor& out, Tape* tape);

}  // namespace detail

// ---- creation -------------------------------------------------------------

Tensor zeros(const Shape& shape);
Tensor full(const Shape& shape, double v);
Tensor scalar_tensor(double v);
Tensor randn(const Shape& shape, Rng& rng, double stddev = 1.0);
Tensor rand_uniform(const Shape& shape, Rng& rng, double lo, double hi);

// ---- elementwise ------------------------------------------------------

Tensor relu(const Tensor& x);
Tensor sigmoid(const Tensor& x);
Tensor softplus(const Tensor& x);
Tensor exp(const Tensor& x);
Tensor log(const Tensor& x);
Tensor abs(const Tensor& x);
Tensor neg(const Tensor& x);
Tensor pow_scalar(const Tensor& x, double p);
Tensor scale(const Tensor& x, double c);
Tensor add_scalar(const Tensor& x, double c);

// Binary ops accept equal shapes or a single-element operand broadcast
// against the other; anything else is a ConfigError.
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);

inline Tensor operator+(const Tensor& a, const Tensor& b) { return add(a, b); }
inline Tensor operator-(const Tensor& a, const Tensor& b) { return sub(a, b); }
inline Tensor operator*(const Tensor& a, const Tensor& b) { return mul(a, b); }

// ---- reductions -------------------------------------------------------

// Empty `axes` reduces over everything to a rank-0 scalar. Axes must be
// valid for the shape; an empty reduction extent is a ConfigError.
Tensor sum(const Tensor& x, const std::vector<int>& axes = {});
Tensor mean(const Tensor& x, const std::vector<int>& axes = {});
Tensor l1_norm(const Tensor& x, const std::vector<int>& axes = {});
// sqrt of sum of squares; gradient at the exact-zero vector is zero.
Tensor l2_norm(const Tensor& x, const std::vector<int>& axes = {});

// ---- structure --------------------------------------------------------

// Cross-correlation, input [N,C,H,W] x kernel [K,C,kh,kw] -> [N,K,H',W'].
Tensor conv2d(const Tensor& input, const Tensor& kernel, int stride,
              int padding);
Tensor add_channel_bias(const Tensor& x, const Tensor& bias);  // x [N,K,H,W], bias [K]
Tensor upsample_nearest2(const Tensor& x);                     // [N,C,H,W] -> [N,C,2H,2W]
// Bilinear read of feature [C,H,W] at real (x, y); out-of-range
// coordinates clamp to the border. Differentiable w.r.t. the feature.
Tensor bilinear_sample(const Tensor& feature, double x, double y);
Tensor select_image(const Tensor& batch, int index);  // [N,...] -> [...]
Tensor stack(const std::vector<Tensor>& parts);       // k x [...] -> [k,...]
Tensor reshape(const Tensor& x, Shape new_shape);

}  // namespace rdd
