#include "rdd/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <sstream>
#include <utility>

namespace rdd {

std::size_t shape_numel(const Shape& shape) {
  std::size_t n = 1;
  for (int d : shape) {
    if (d < 0) throw ConfigError("negative dimension in shape " + shape_str(shape));
    n *= static_cast<std::size_t>(d);
  }
  return n;
}

std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << "[";
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "," : "") << shape[i];
  os << "]";
  return os.str();
}

Tensor::Tensor(Shape shape, double fill) {
  node_ = std::make_shared<detail::Node>();
  std::size_t n = shape_numel(shape);
  node_->shape = std::move(shape);
  node_->data.assign(n, fill);
}

Tensor::Tensor(Shape shape, std::vector<double> data) {
  if (shape_numel(shape) != data.size())
    throw ConfigError("data length " + std::to_string(data.size()) +
                      " does not match shape " + shape_str(shape));
  node_ = std::make_shared<detail::Node>();
  node_->shape = std::move(shape);
  node_->data = std::move(data);
}

double Tensor::value() const {
  if (size() != 1) throw UsageError("value() on non-scalar tensor " + shape_str(shape()));
  return node_->data[0];
}

double Tensor::at(std::initializer_list<int> idx) const {
  if (idx.size() != node_->shape.size())
    throw UsageError("index rank mismatch for shape " + shape_str(shape()));
  std::size_t flat = 0;
  std::size_t axis = 0;
  for (int i : idx) {
    flat = flat * static_cast<std::size_t>(node_->shape[axis]) + static_cast<std::size_t>(i);
    ++axis;
  }
  return node_->data[flat];
}

const std::vector<double>& Tensor::grad() const {
  if (node_->grad.empty())
    throw UsageError("gradient not populated; run Tape::backward first");
  return node_->grad;
}

Tensor Tensor::grad_tensor() const { return Tensor(node_->shape, grad()); }

Tensor Tensor::detach() const {
  Tensor out(node_->shape, node_->data);
  return out;
}

Tensor Tape::variable(Shape shape, std::vector<double> data) {
  Tensor t(std::move(shape), std::move(data));
  t.node_->requires_grad = true;
  t.node_->tape = this;
  return t;
}

Tensor Tape::variable(const Tensor& init) {
  return variable(init.shape(), init.vec());
}

void Tape::record(std::vector<std::shared_ptr<detail::Node>> involved,
                  std::function<void()> backward_fn) {
  backward_done_ = false;
  records_.push_back(Record{std::move(involved), std::move(backward_fn)});
}

void Tape::backward(const Tensor& loss) {
  if (loss.size() != 1) throw UsageError("backward: loss must be scalar, got " + shape_str(loss.shape()));
  if (loss.tape() != this) throw UsageError("backward: loss does not live on this tape");
  if (backward_done_) throw UsageError("backward already run on this tape; record new operations first");
  backward_done_ = true;
  for (auto& rec : records_)
    for (auto& n : rec.nodes)
      if (n->requires_grad) n->grad.assign(n->data.size(), 0.0);
  loss.node()->grad.assign(1, 1.0);
  for (auto it = records_.rbegin(); it != records_.rend(); ++it) it->fn();
}

void Tape::clear() {
  records_.clear();
  backward_done_ = false;
}

namespace detail {

Tape* op_tape(std::initializer_list<const Tensor*> inputs) {
  Tape* tape = nullptr;
  for (const Tensor* t : inputs) {
    Tape* tt = t->tape();
    if (!tt) continue;
    if (tape && tape != tt) throw ConfigError("operands live on different tapes");
    tape = tt;
  }
  return tape;
}

bool op_requires_grad(std::initializer_list<const Tensor*> inputs) {
  for (const Tensor* t : inputs)
    if (t->requires_grad()) return true;
  return false;
}

void mark_output(Tensor& out, Tape* tape) {
  out.node()->tape = tape;
  out.node()->requires_grad = true;
}

}  // namespace detail

namespace {

using detail::Node;
using NodePtr = std::shared_ptr<Node>;

// Shared body for differentiable unary maps: y = f(x), dx += df(x, y) * gy.
template <typename F, typename DF>
Tensor unary_op(const Tensor& x, F f, DF df) {
  Tensor y(x.shape());
  const double* xd = x.data();
  double* yd = y.data();
  for (std::size_t i = 0; i < x.size(); ++i) yd[i] = f(xd[i]);
  Tape* tape = detail::op_tape({&x});
  if (tape && x.requires_grad()) {
    detail::mark_output(y, tape);
    NodePtr xn = x.node(), yn = y.node();
    tape->record({xn, yn}, [xn, yn, df] {
      for (std::size_t i = 0; i < xn->data.size(); ++i)
        xn->grad[i] += df(xn->data[i], yn->data[i]) * yn->grad[i];
    });
  }
  return y;
}

enum class BinKind { kAdd, kSub, kMul };

Tensor binary_op(const Tensor& a, const Tensor& b, BinKind kind) {
  const bool a_scalar = a.size() == 1;
  const bool b_scalar = b.size() == 1;
  if (!(a.shape() == b.shape() || a_scalar || b_scalar))
    throw ConfigError("incompatible shapes " + shape_str(a.shape()) + " vs " +
                      shape_str(b.shape()) +
                      " (only equal-shape or scalar broadcasting)");
  const Tensor& big = (a_scalar && !b_scalar) ? b : a;
  Tensor y(big.shape());
  const double* ad = a.data();
  const double* bd = b.data();
  double* yd = y.data();
  const std::size_t n = y.size();
  const std::size_t as = a_scalar ? 0 : 1;
  const std::size_t bs = b_scalar ? 0 : 1;
  switch (kind) {
    case BinKind::kAdd:
      for (std::size_t i = 0; i < n; ++i) yd[i] = ad[i * as] + bd[i * bs];
      break;
    case BinKind::kSub:
      for (std::size_t i = 0; i < n; ++i) yd[i] = ad[i * as] - bd[i * bs];
      break;
    case BinKind::kMul:
      for (std::size_t i = 0; i < n; ++i) yd[i] = ad[i * as] * bd[i * bs];
      break;
  }
  Tape* tape = detail::op_tape({&a, &b});
  if (tape && detail::op_requires_grad({&a, &b})) {
    detail::mark_output(y, tape);
    NodePtr an = a.node(), bn = b.node(), yn = y.node();
    tape->record({an, bn, yn}, [an, bn, yn, kind, as, bs, n] {
      const std::vector<double>& gy = yn->grad;
      for (std::size_t i = 0; i < n; ++i) {
        double g = gy[i];
        switch (kind) {
          case BinKind::kAdd:
            if (an->requires_grad) an->grad[i * as] += g;
            if (bn->requires_grad) bn->grad[i * bs] += g;
            break;
          case BinKind::kSub:
            if (an->requires_grad) an->grad[i * as] += g;
            if (bn->requires_grad) bn->grad[i * bs] -= g;
            break;
          case BinKind::kMul:
            if (an->requires_grad) an->grad[i * as] += bn->data[i * bs] * g;
            if (bn->requires_grad) bn->grad[i * bs] += an->data[i * as] * g;
            break;
        }
      }
    });
  }
  return y;
}

void check_axes(const Shape& shape, const std::vector<int>& axes) {
  for (int ax : axes) {
    if (ax < 0 || ax >= static_cast<int>(shape.size()))
      throw ConfigError("reduction axis " + std::to_string(ax) +
                        " invalid for shape " + shape_str(shape));
  }
}

// Maps each flat input index to the flat index of the axes-reduced output.
struct ReducePlan {
  Shape out_shape;
  std::vector<std::size_t> out_index;  // per input element
  std::size_t extent = 1;              // elements folded into each output cell
};

ReducePlan make_reduce_plan(const Shape& shape, std::vector<int> axes) {
  ReducePlan plan;
  const std::size_t n = shape_numel(shape);
  if (axes.empty()) {
    for (std::size_t i = 0; i < shape.size(); ++i) axes.push_back(static_cast<int>(i));
  }
  check_axes(shape, axes);
  std::sort(axes.begin(), axes.end());
  axes.erase(std::unique(axes.begin(), axes.end()), axes.end());
  std::vector<bool> reduced(shape.size(), false);
  for (int ax : axes) reduced[static_cast<std::size_t>(ax)] = true;
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (reduced[i]) plan.extent *= static_cast<std::size_t>(shape[i]);
    else plan.out_shape.push_back(shape[i]);
  }
  if (plan.extent == 0 || n == 0)
    throw ConfigError("empty reduction extent for shape " + shape_str(shape));
  plan.out_index.resize(n);
  std::vector<std::size_t> idx(shape.size(), 0);
  for (std::size_t flat = 0; flat < n; ++flat) {
    std::size_t out = 0;
    for (std::size_t d = 0; d < shape.size(); ++d) {
      if (!reduced[d]) out = out * static_cast<std::size_t>(shape[d]) + idx[d];
    }
    plan.out_index[flat] = out;
    for (std::size_t d = shape.size(); d-- > 0;) {
      if (++idx[d] < static_cast<std::size_t>(shape[d])) break;
      idx[d] = 0;
    }
  }
  return plan;
}

enum class RedKind { kSum, kMean, kL1, kL2 };

Tensor reduce_op(const Tensor& x, const std::vector<int>& axes, RedKind kind) {
  ReducePlan plan = make_reduce_plan(x.shape(), axes);
  Tensor y(plan.out_shape);
  const double* xd = x.data();
  double* yd = y.data();
  const std::size_t n = x.size();
  for (std::size_t i = 0; i < n; ++i) {
    double v = xd[i];
    switch (kind) {
      case RedKind::kSum:
      case RedKind::kMean: yd[plan.out_index[i]] += v; break;
      case RedKind::kL1: yd[plan.out_index[i]] += std::fabs(v); break;
      case RedKind::kL2: yd[plan.out_index[i]] += v * v; break;
    }
  }
  const double inv_extent = 1.0 / static_cast<double>(plan.extent);
  if (kind == RedKind::kMean)
    for (std::size_t o = 0; o < y.size(); ++o) yd[o] *= inv_extent;
  if (kind == RedKind::kL2)
    for (std::size_t o = 0; o < y.size(); ++o) yd[o] = std::sqrt(yd[o]);
  Tape* tape = detail::op_tape({&x});
  if (tape && x.requires_grad()) {
    detail::mark_output(y, tape);
    NodePtr xn = x.node(), yn = y.node();
    auto out_index = std::move(plan.out_index);
    tape->record({xn, yn}, [xn, yn, out_index, kind, inv_extent] {
      for (std::size_t i = 0; i < xn->data.size(); ++i) {
        double g = yn->grad[out_index[i]];
        double v = xn->data[i];
        switch (kind) {
          case RedKind::kSum: xn->grad[i] += g; break;
          case RedKind::kMean: xn->grad[i] += g * inv_extent; break;
          case RedKind::kL1:
            xn->grad[i] += g * (v > 0.0 ? 1.0 : (v < 0.0 ? -1.0 : 0.0));
            break;
          case RedKind::kL2: {
            double norm = yn->data[out_index[i]];
            // subgradient 0 at the exact-zero vector
            if (norm > 0.0) xn->grad[i] += g * v / norm;
            break;
          }
        }
      }
    });
  }
  return y;
}

}  // namespace

// ---- creation -------------------------------------------------------------

Tensor zeros(const Shape& shape) { return Tensor(shape, 0.0); }

Tensor full(const Shape& shape, double v) { return Tensor(shape, v); }

Tensor scalar_tensor(double v) { return Tensor(Shape{}, std::vector<double>{v}); }

Tensor randn(const Shape& shape, Rng& rng, double stddev) {
  Tensor t(shape);
  for (std::size_t i = 0; i < t.size(); ++i) t.data()[i] = rng.normal() * stddev;
  return t;
}

Tensor rand_uniform(const Shape& shape, Rng& rng, double lo, double hi) {
  Tensor t(shape);
  for (std::size_t i = 0; i < t.size(); ++i) t.data()[i] = rng.uniform(lo, hi);
  return t;
}

// ---- elementwise ------------------------------------------------------

Tensor relu(const Tensor& x) {
  return unary_op(
      x, [](double v) { return v > 0.0 ? v : 0.0; },
      [](double v, double) { return v > 0.0 ? 1.0 : 0.0; });
}

Tensor sigmoid(const Tensor& x) {
  return unary_op(
      x,
      [](double v) {
        return v >= 0.0 ? 1.0 / (1.0 + std::exp(-v))
                        : std::exp(v) / (1.0 + std::exp(v));
      },
      [](double, double y) { return y * (1.0 - y); });
}

Tensor softplus(const Tensor& x) {
  return unary_op(
      x,
      [](double v) { return std::log1p(std::exp(-std::fabs(v))) + (v > 0.0 ? v : 0.0); },
      [](double v, double) {
        return v >= 0.0 ? 1.0 / (1.0 + std::exp(-v))
                        : std::exp(v) / (1.0 + std::exp(v));
      });
}

Tensor exp(const Tensor& x) {
  return unary_op(
      x, [](double v) { return std::exp(v); },
      [](double, double y) { return y; });
}

Tensor log(const Tensor& x) {
  return unary_op(
      x, [](double v) { return std::log(v); },
      [](double v, double) { return 1.0 / v; });
}

Tensor abs(const Tensor& x) {
  return unary_op(
      x, [](double v) { return std::fabs(v); },
      [](double v, double) { return v > 0.0 ? 1.0 : (v < 0.0 ? -1.0 : 0.0); });
}

Tensor neg(const Tensor& x) {
  return unary_op(
      x, [](double v) { return -v; }, [](double, double) { return -1.0; });
}

Tensor pow_scalar(const Tensor& x, double p) {
  return unary_op(
      x, [p](double v) { return std::pow(v, p); },
      [p](double v, double) { return p * std::pow(v, p - 1.0); });
}

Tensor scale(const Tensor& x, double c) {
  return unary_op(
      x, [c](double v) { return v * c; }, [c](double, double) { return c; });
}

Tensor add_scalar(const Tensor& x, double c) {
  return unary_op(
      x, [c](double v) { return v + c; }, [](double, double) { return 1.0; });
}

Tensor add(const Tensor& a, const Tensor& b) { return binary_op(a, b, BinKind::kAdd); }
Tensor sub(const Tensor& a, const Tensor& b) { return binary_op(a, b, BinKind::kSub); }
Tensor mul(const Tensor& a, const Tensor& b) { return binary_op(a, b, BinKind::kMul); }

// ---- reductions -------------------------------------------------------

Tensor sum(const Tensor& x, const std::vector<int>& axes) { return reduce_op(x, axes, RedKind::kSum); }
Tensor mean(const Tensor& x, const std::vector<int>& axes) { return reduce_op(x, axes, RedKind::kMean); }
Tensor l1_norm(const Tensor& x, const std::vector<int>& axes) { return reduce_op(x, axes, RedKind::kL1); }
Tensor l2_norm(const Tensor& x, const std::vector<int>& axes) { return reduce_op(x, axes, RedKind::kL2); }

// ---- structure --------------------------------------------------------

Tensor conv2d(const Tensor& input, const Tensor& kernel, int stride, int padding) {
  if (input.rank() != 4 || kernel.rank() != 4)
    throw ConfigError("conv2d expects 4D input and kernel, got " +
                      shape_str(input.shape()) + " and " + shape_str(kernel.shape()));
  if (stride < 1) throw ConfigError("conv2d stride must be >= 1");
  if (padding < 0) throw ConfigError("conv2d padding must be >= 0");
  const int N = input.dim(0), C = input.dim(1), H = input.dim(2), W = input.dim(3);
  const int K = kernel.dim(0), KC = kernel.dim(1), kh = kernel.dim(2), kw = kernel.dim(3);
  if (C != KC)
    throw ConfigError("conv2d channel mismatch: input C=" + std::to_string(C) +
                      ", kernel C=" + std::to_string(KC));
  if (kh > H + 2 * padding || kw > W + 2 * padding)
    throw ConfigError("conv2d kernel larger than padded input");
  const int OH = (H + 2 * padding - kh) / stride + 1;
  const int OW = (W + 2 * padding - kw) / stride + 1;
  Tensor out(Shape{N, K, OH, OW});

  const double* in = input.data();
  const double* ker = kernel.data();
  double* o = out.data();
  auto in_at = [&](int n, int c) { return in + (static_cast<std::size_t>(n) * C + c) * H * W; };
  auto out_at = [&](int n, int k) { return o + (static_cast<std::size_t>(n) * K + k) * OH * OW; };

  for (int n = 0; n < N; ++n) {
    for (int k = 0; k < K; ++k) {
      double* orow0 = out_at(n, k);
      for (int c = 0; c < C; ++c) {
        const double* irow0 = in_at(n, c);
        const double* kbase = ker + ((static_cast<std::size_t>(k) * C + c) * kh) * kw;
        for (int i = 0; i < kh; ++i) {
          for (int j = 0; j < kw; ++j) {
            const double w = kbase[i * kw + j];
            if (w == 0.0) continue;
            for (int oh = 0; oh < OH; ++oh) {
              const int ih = oh * stride + i - padding;
              if (ih < 0 || ih >= H) continue;
              const double* irow = irow0 + static_cast<std::size_t>(ih) * W;
              double* orow = orow0 + static_cast<std::size_t>(oh) * OW;
              for (int ow = 0; ow < OW; ++ow) {
                const int iw = ow * stride + j - padding;
                if (iw < 0 || iw >= W) continue;
                orow[ow] += w * irow[iw];
              }
            }
          }
        }
      }
    }
  }

  Tape* tape = detail::op_tape({&input, &kernel});
  if (tape && detail::op_requires_grad({&input, &kernel})) {
    detail::mark_output(out, tape);
    NodePtr in_n = input.node(), ker_n = kernel.node(), out_n = out.node();
    tape->record({in_n, ker_n, out_n}, [in_n, ker_n, out_n, N, C, H, W, K, kh,
                                        kw, OH, OW, stride, padding] {
      const double* go = out_n->grad.data();
      for (int n = 0; n < N; ++n) {
        for (int k = 0; k < K; ++k) {
          const double* gorow0 = go + (static_cast<std::size_t>(n) * K + k) * OH * OW;
          for (int c = 0; c < C; ++c) {
            const std::size_t in_off = (static_cast<std::size_t>(n) * C + c) * H * W;
            const std::size_t ker_off = (static_cast<std::size_t>(k) * C + c) * kh * kw;
            for (int i = 0; i < kh; ++i) {
              for (int j = 0; j < kw; ++j) {
                const double w = ker_n->data[ker_off + i * kw + j];
                double gw = 0.0;
                for (int oh = 0; oh < OH; ++oh) {
                  const int ih = oh * stride + i - padding;
                  if (ih < 0 || ih >= H) continue;
                  const double* gorow = gorow0 + static_cast<std::size_t>(oh) * OW;
                  const std::size_t irow = in_off + static_cast<std::size_t>(ih) * W;
                  for (int ow = 0; ow < OW; ++ow) {
                    const int iw = ow * stride + j - padding;
                    if (iw < 0 || iw >= W) continue;
                    const double g = gorow[ow];
                    if (in_n->requires_grad) in_n->grad[irow + iw] += w * g;
                    gw += in_n->data[irow + iw] * g;
                  }
                }
                if (ker_n->requires_grad) ker_n->grad[ker_off + i * kw + j] += gw;
              }
            }
          }
        }
      }
    });
  }
  return out;
}

Tensor add_channel_bias(const Tensor& x, const Tensor& bias) {
  if (x.rank() != 4 || bias.rank() != 1 || bias.dim(0) != x.dim(1))
    throw ConfigError("add_channel_bias expects [N,K,H,W] and [K], got " +
                      shape_str(x.shape()) + " and " + shape_str(bias.shape()));
  const int N = x.dim(0), K = x.dim(1);
  const std::size_t plane = static_cast<std::size_t>(x.dim(2)) * x.dim(3);
  Tensor y(x.shape());
  const double* xd = x.data();
  const double* bd = bias.data();
  double* yd = y.data();
  for (int n = 0; n < N; ++n)
    for (int k = 0; k < K; ++k) {
      const std::size_t off = (static_cast<std::size_t>(n) * K + k) * plane;
      for (std::size_t p = 0; p < plane; ++p) yd[off + p] = xd[off + p] + bd[k];
    }
  Tape* tape = detail::op_tape({&x, &bias});
  if (tape && detail::op_requires_grad({&x, &bias})) {
    detail::mark_output(y, tape);
    NodePtr xn = x.node(), bn = bias.node(), yn = y.node();
    tape->record({xn, bn, yn}, [xn, bn, yn, N, K, plane] {
      for (int n = 0; n < N; ++n)
        for (int k = 0; k < K; ++k) {
          const std::size_t off = (static_cast<std::size_t>(n) * K + k) * plane;
          double gb = 0.0;
          for (std::size_t p = 0; p < plane; ++p) {
            const double g = yn->grad[off + p];
            if (xn->requires_grad) xn->grad[off + p] += g;
            gb += g;
          }
          if (bn->requires_grad) bn->grad[k] += gb;
        }
    });
  }
  return y;
}

Tensor upsample_nearest2(const Tensor& x) {
  if (x.rank() != 4)
    throw ConfigError("upsample_nearest2 expects [N,C,H,W], got " + shape_str(x.shape()));
  const int N = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
  Tensor y(Shape{N, C, 2 * H, 2 * W});
  const double* xd = x.data();
  double* yd = y.data();
  for (int nc = 0; nc < N * C; ++nc) {
    const double* xp = xd + static_cast<std::size_t>(nc) * H * W;
    double* yp = yd + static_cast<std::size_t>(nc) * 4 * H * W;
    for (int h = 0; h < H; ++h)
      for (int w = 0; w < W; ++w) {
        const double v = xp[h * W + w];
        double* row = yp + (2 * h) * 2 * W + 2 * w;
        row[0] = v;
        row[1] = v;
        row[2 * W] = v;
        row[2 * W + 1] = v;
      }
  }
  Tape* tape = detail::op_tape({&x});
  if (tape && x.requires_grad()) {
    detail::mark_output(y, tape);
    NodePtr xn = x.node(), yn = y.node();
    tape->record({xn, yn}, [xn, yn, N, C, H, W] {
      for (int nc = 0; nc < N * C; ++nc) {
        double* gx = xn->grad.data() + static_cast<std::size_t>(nc) * H * W;
        const double* gy = yn->grad.data() + static_cast<std::size_t>(nc) * 4 * H * W;
        for (int h = 0; h < H; ++h)
          for (int w = 0; w < W; ++w) {
            const double* row = gy + (2 * h) * 2 * W + 2 * w;
            gx[h * W + w] += row[0] + row[1] + row[2 * W] + row[2 * W + 1];
          }
      }
    });
  }
  return y;
}

Tensor bilinear_sample(const Tensor& feature, double x, double y) {
  if (feature.rank() != 3)
    throw ConfigError("bilinear_sample expects [C,H,W], got " + shape_str(feature.shape()));
  const int C = feature.dim(0), H = feature.dim(1), W = feature.dim(2);
  // clamp to the border so the sample stays smooth at box edges
  x = std::min(std::max(x, 0.0), static_cast<double>(W - 1));
  y = std::min(std::max(y, 0.0), static_cast<double>(H - 1));
  const int x0 = std::min(static_cast<int>(std::floor(x)), W - 1);
  const int y0 = std::min(static_cast<int>(std::floor(y)), H - 1);
  const int x1 = std::min(x0 + 1, W - 1);
  const int y1 = std::min(y0 + 1, H - 1);
  const double wx = x - x0, wy = y - y0;
  const double w00 = (1.0 - wy) * (1.0 - wx), w01 = (1.0 - wy) * wx;
  const double w10 = wy * (1.0 - wx), w11 = wy * wx;
  Tensor out(Shape{C});
  const double* fd = feature.data();
  for (int c = 0; c < C; ++c) {
    const double* p = fd + static_cast<std::size_t>(c) * H * W;
    out.data()[c] = w00 * p[y0 * W + x0] + w01 * p[y0 * W + x1] +
                    w10 * p[y1 * W + x0] + w11 * p[y1 * W + x1];
  }
  Tape* tape = detail::op_tape({&feature});
  if (tape && feature.requires_grad()) {
    detail::mark_output(out, tape);
    NodePtr fn = feature.node(), on = out.node();
    tape->record({fn, on}, [fn, on, C, H, W, x0, x1, y0, y1, w00, w01, w10, w11] {
      for (int c = 0; c < C; ++c) {
        const double g = on->grad[c];
        double* gp = fn->grad.data() + static_cast<std::size_t>(c) * H * W;
        gp[y0 * W + x0] += w00 * g;
        gp[y0 * W + x1] += w01 * g;
        gp[y1 * W + x0] += w10 * g;
        gp[y1 * W + x1] += w11 * g;
      }
    });
  }
  return out;
}

Tensor select_image(const Tensor& batch, int index) {
  if (batch.rank() < 1) throw ConfigError("select_image expects rank >= 1");
  const int N = batch.dim(0);
  if (index < 0 || index >= N)
    throw ConfigError("select_image index " + std::to_string(index) +
                      " out of range for " + shape_str(batch.shape()));
  Shape sub(batch.shape().begin() + 1, batch.shape().end());
  const std::size_t stride = shape_numel(sub);
  Tensor out(sub);
  const double* src = batch.data() + static_cast<std::size_t>(index) * stride;
  std::copy(src, src + stride, out.data());
  Tape* tape = detail::op_tape({&batch});
  if (tape && batch.requires_grad()) {
    detail::mark_output(out, tape);
    NodePtr bn = batch.node(), on = out.node();
    tape->record({bn, on}, [bn, on, index, stride] {
      double* g = bn->grad.data() + static_cast<std::size_t>(index) * stride;
      for (std::size_t i = 0; i < stride; ++i) g[i] += on->grad[i];
    });
  }
  return out;
}

Tensor stack(const std::vector<Tensor>& parts) {
  if (parts.empty()) throw ConfigError("stack of zero tensors");
  const Shape& sub = parts[0].shape();
  for (const Tensor& p : parts)
    if (p.shape() != sub)
      throw ConfigError("stack shape mismatch: " + shape_str(p.shape()) +
                        " vs " + shape_str(sub));
  const std::size_t stride = shape_numel(sub);
  Shape out_shape;
  out_shape.push_back(static_cast<int>(parts.size()));
  out_shape.insert(out_shape.end(), sub.begin(), sub.end());
  Tensor out(out_shape);
  for (std::size_t p = 0; p < parts.size(); ++p)
    std::copy(parts[p].data(), parts[p].data() + stride, out.data() + p * stride);

  std::vector<const Tensor*> ptrs;
  Tape* tape = nullptr;
  bool needs_grad = false;
  for (const Tensor& p : parts) {
    Tape* tt = p.tape();
    if (tt) {
      if (tape && tape != tt) throw ConfigError("stack operands on different tapes");
      tape = tt;
    }
    needs_grad = needs_grad || p.requires_grad();
  }
  if (tape && needs_grad) {
    detail::mark_output(out, tape);
    std::vector<NodePtr> nodes;
    nodes.reserve(parts.size() + 1);
    for (const Tensor& p : parts) nodes.push_back(p.node());
    NodePtr on = out.node();
    std::vector<NodePtr> inputs = nodes;
    nodes.push_back(on);
    tape->record(nodes, [inputs, on, stride] {
      for (std::size_t p = 0; p < inputs.size(); ++p) {
        if (!inputs[p]->requires_grad) continue;
        const double* g = on->grad.data() + p * stride;
        for (std::size_t i = 0; i < stride; ++i) inputs[p]->grad[i] += g[i];
      }
    });
  }
  return out;
}

Tensor reshape(const Tensor& x, Shape new_shape) {
  if (shape_numel(new_shape) != x.size())
    throw ConfigError("reshape to " + shape_str(new_shape) + " changes element count");
  Tensor out(std::move(new_shape), x.vec());
  Tape* tape = detail::op_tape({&x});
  if (tape && x.requires_grad()) {
    detail::mark_output(out, tape);
    NodePtr xn = x.node(), on = out.node();
    tape->record({xn, on}, [xn, on] {
      for (std::size_t i = 0; i < xn->data.size(); ++i) xn->grad[i] += on->grad[i];
    });
  }
  return out;
}

}  // namespace rdd
