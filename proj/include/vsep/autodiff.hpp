#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <memory>
#include <random>
#include <string>
#include <utility>
#include <vector>

#include "vsep/common.hpp"

namespace vsep::ad {

// Dense double-precision tensor participating in a tape-based reverse-mode
// graph. Gradients live next to the values and accumulate across backward
// passes until explicitly zeroed.
struct Tensor {
  std::vector<int> shape;
  std::vector<double> data;
  std::vector<double> grad;
  bool requires_grad = false;

  Tensor() = default;
  explicit Tensor(std::vector<int> s, double fill = 0.0) : shape(std::move(s)) {
    data.assign(static_cast<size_t>(count(shape)), fill);
  }

  static std::int64_t count(const std::vector<int>& s) {
    std::int64_t n = 1;
    for (int d : s) n *= d;
    return n;
  }

  std::int64_t numel() const { return static_cast<std::int64_t>(data.size()); }
  int dim(int i) const { return shape[static_cast<size_t>(i)]; }
  int rank() const { return static_cast<int>(shape.size()); }

  void ensure_grad() {
    if (grad.size() != data.size()) grad.assign(data.size(), 0.0);
  }
  void zero_grad() { std::fill(grad.begin(), grad.end(), 0.0); }
  void add_grad(std::int64_t i, double v) { grad[static_cast<size_t>(i)] += v; }
};

using TensorPtr = std::shared_ptr<Tensor>;

inline TensorPtr make_tensor(std::vector<int> shape, double fill = 0.0) {
  return std::make_shared<Tensor>(std::move(shape), fill);
}

inline TensorPtr tensor_of(std::vector<int> shape, std::vector<double> values) {
  auto t = std::make_shared<Tensor>(std::move(shape));
  if (static_cast<std::int64_t>(values.size()) != t->numel()) {
    throw ShapeError("tensor_of: value count does not match shape");
  }
  t->data = std::move(values);
  return t;
}

struct ParamEntry {
  std::string name;
  TensorPtr tensor;
  bool trainable = true;
};

// Records ops as they execute; reverse playback of the tape is a valid
// topological order for backward. Also owns the registry of named
// parameters and buffers so the optimizer and checkpoints can walk them.
class Graph {
 public:
  TensorPtr parameter(const std::string& name, std::vector<int> shape) {
    auto t = make_tensor(std::move(shape));
    t->requires_grad = true;
    t->ensure_grad();
    register_entry(name, t, true);
    return t;
  }

  TensorPtr buffer(const std::string& name, std::vector<int> shape, double fill = 0.0) {
    auto t = make_tensor(std::move(shape), fill);
    register_entry(name, t, false);
    return t;
  }

  const std::vector<ParamEntry>& registry() const { return params_; }

  TensorPtr find(const std::string& name) const {
    for (const auto& e : params_) {
      if (e.name == name) return e.tensor;
    }
    return nullptr;
  }

  std::vector<TensorPtr> trainable() const {
    std::vector<TensorPtr> out;
    for (const auto& e : params_) {
      if (e.trainable) out.push_back(e.tensor);
    }
    return out;
  }

  bool recording() const { return recording_; }
  void set_recording(bool on) { recording_ = on; }

  void record(std::function<void()> backfn) {
    if (recording_) tape_.push_back(std::move(backfn));
  }

  void clear_tape() { tape_.clear(); }
  size_t tape_size() const { return tape_.size(); }

  void zero_grad() {
    for (auto& e : params_) {
      if (e.trainable) e.tensor->zero_grad();
    }
  }

  // Seeds d(loss)/d(loss) = 1 and plays the tape backwards, accumulating
  // into every reachable tensor's grad. Consumes the tape.
  void backward(const TensorPtr& loss) {
    if (loss->numel() != 1) throw ValueError("backward: loss must be scalar");
    loss->ensure_grad();
    loss->grad[0] += 1.0;
    for (auto it = tape_.rbegin(); it != tape_.rend(); ++it) (*it)();
    tape_.clear();
  }

 private:
  void register_entry(const std::string& name, const TensorPtr& t, bool trainable) {
    if (find(name)) throw ValueError("duplicate parameter name: " + name);
    params_.push_back({name, t, trainable});
  }

  std::vector<std::function<void()>> tape_;
  std::vector<ParamEntry> params_;
  bool recording_ = true;
};

class NoGradGuard {
 public:
  explicit NoGradGuard(Graph& g) : g_(g), prev_(g.recording()) { g_.set_recording(false); }
  ~NoGradGuard() { g_.set_recording(prev_); }
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  Graph& g_;
  bool prev_;
};

// Multiply-accumulate instrumentation. When enabled, the conv/matmul kernels
// switch to counted variants that bump the counter once per scalar multiply
// (padding taps included, matching the dense-lowering cost convention).
namespace macs {
inline thread_local long long counter = 0;
inline thread_local bool enabled = false;

struct CountGuard {
  bool prev;
  CountGuard() : prev(enabled) {
    enabled = true;
    counter = 0;
  }
  ~CountGuard() { enabled = prev; }
};
}  // namespace macs

namespace detail {

inline bool grad_needed(const Graph& g, std::initializer_list<const TensorPtr*> ins) {
  if (!g.recording()) return false;
  for (auto* p : ins) {
    if (*p && (*p)->requires_grad) return true;
  }
  return false;
}

inline void check_4d(const TensorPtr& t, const char* what) {
  if (t->rank() != 4) throw ShapeError(std::string(what) + ": tensor must be 4-D (NCHW)");
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Elementwise and shape ops
// ---------------------------------------------------------------------------

inline TensorPtr add(Graph& g, const TensorPtr& a, const TensorPtr& b) {
  if (a->shape != b->shape) throw ShapeError("add: shape mismatch");
  auto out = make_tensor(a->shape);
  for (std::int64_t i = 0; i < a->numel(); ++i) out->data[i] = a->data[i] + b->data[i];
  if (detail::grad_needed(g, {&a, &b})) {
    out->requires_grad = true;
    out->ensure_grad();
    g.record([a, b, out] {
      if (a->requires_grad) {
        a->ensure_grad();
        for (std::int64_t i = 0; i < a->numel(); ++i) a->grad[i] += out->grad[i];
      }
      if (b->requires_grad) {
        b->ensure_grad();
        for (std::int64_t i = 0; i < b->numel(); ++i) b->grad[i] += out->grad[i];
      }
    });
  }
  return out;
}

inline TensorPtr sub(Graph& g, const TensorPtr& a, const TensorPtr& b) {
  if (a->shape != b->shape) throw ShapeError("sub: shape mismatch");
  auto out = make_tensor(a->shape);
  for (std::int64_t i = 0; i < a->numel(); ++i) out->data[i] = a->data[i] - b->data[i];
  if (detail::grad_needed(g, {&a, &b})) {
    out->requires_grad = true;
    out->ensure_grad();
    g.record([a, b, out] {
      if (a->requires_grad) {
        a->ensure_grad();
        for (std::int64_t i = 0; i < a->numel(); ++i) a->grad[i] += out->grad[i];
      }
      if (b->requires_grad) {
        b->ensure_grad();
        for (std::int64_t i = 0; i < b->numel(); ++i) b->grad[i] -= out->grad[i];
      }
    });
  }
  return out;
}

inline TensorPtr mul(Graph& g, const TensorPtr& a, const TensorPtr& b) {
  if (a->shape != b->shape) throw ShapeError("mul: shape mismatch");
  auto out = make_tensor(a->shape);
  for (std::int64_t i = 0; i < a->numel(); ++i) out->data[i] = a->data[i] * b->data[i];
  if (detail::grad_needed(g, {&a, &b})) {
    out->requires_grad = true;
    out->ensure_grad();
    g.record([a, b, out] {
      if (a->requires_grad) {
        a->ensure_grad();
        for (std::int64_t i = 0; i < a->numel(); ++i) a->grad[i] += out->grad[i] * b->data[i];
      }
      if (b->requires_grad) {
        b->ensure_grad();
        for (std::int64_t i = 0; i < b->numel(); ++i) b->grad[i] += out->grad[i] * a->data[i];
      }
    });
  }
  return out;
}

inline TensorPtr add_scalar(Graph& g, const TensorPtr& a, double c) {
  auto out = make_tensor(a->shape);
  for (std::int64_t i = 0; i < a->numel(); ++i) out->data[i] = a->data[i] + c;
  if (detail::grad_needed(g, {&a})) {
    out->requires_grad = true;
    out->ensure_grad();
    g.record([a, out] {
      a->ensure_grad();
      for (std::int64_t i = 0; i < a->numel(); ++i) a->grad[i] += out->grad[i];
    });
  }
  return out;
}

inline TensorPtr mul_scalar(Graph& g, const TensorPtr& a, double c) {
  auto out = make_tensor(a->shape);
  for (std::int64_t i = 0; i < a->numel(); ++i) out->data[i] = a->data[i] * c;
  if (detail::grad_needed(g, {&a})) {
    out->requires_grad = true;
    out->ensure_grad();
    g.record([a, out, c] {
      a->ensure_grad();
      for (std::int64_t i = 0; i < a->numel(); ++i) a->grad[i] += out->grad[i] * c;
    });
  }
  return out;
}

inline TensorPtr leaky_relu(Graph& g, const TensorPtr& x, double slope = 0.2) {
  auto out = make_tensor(x->shape);
  for (std::int64_t i = 0; i < x->numel(); ++i) {
    out->data[i] = x->data[i] > 0.0 ? x->data[i] : slope * x->data[i];
  }
  if (detail::grad_needed(g, {&x})) {
    out->requires_grad = true;
    out->ensure_grad();
    g.record([x, out, slope] {
      x->ensure_grad();
      for (std::int64_t i = 0; i < x->numel(); ++i) {
        x->grad[i] += out->grad[i] * (x->data[i] > 0.0 ? 1.0 : slope);
      }
    });
  }
  return out;
}

inline TensorPtr relu(Graph& g, const TensorPtr& x) { return leaky_relu(g, x, 0.0); }

inline TensorPtr sigmoid(Graph& g, const TensorPtr& x) {
  auto out = make_tensor(x->shape);
  for (std::int64_t i = 0; i < x->numel(); ++i) {
    const double v = x->data[i];
    out->data[i] = v >= 0.0 ? 1.0 / (1.0 + std::exp(-v)) : std::exp(v) / (1.0 + std::exp(v));
  }
  if (detail::grad_needed(g, {&x})) {
    out->requires_grad = true;
    out->ensure_grad();
    g.record([x, out] {
      x->ensure_grad();
      for (std::int64_t i = 0; i < x->numel(); ++i) {
        const double y = out->data[i];
        x->grad[i] += out->grad[i] * y * (1.0 - y);
      }
    });
  }
  return out;
}

// log(1 + x); the standard compression for linear-magnitude spectrogram input.
inline TensorPtr log1p_compress(Graph& g, const TensorPtr& x) {
  auto out = make_tensor(x->shape);
  for (std::int64_t i = 0; i < x->numel(); ++i) out->data[i] = std::log1p(x->data[i]);
  if (detail::grad_needed(g, {&x})) {
    out->requires_grad = true;
    out->ensure_grad();
    g.record([x, out] {
      x->ensure_grad();
      for (std::int64_t i = 0; i < x->numel(); ++i) {
        x->grad[i] += out->grad[i] / (1.0 + x->data[i]);
      }
    });
  }
  return out;
}

inline TensorPtr sqrt_elem(Graph& g, const TensorPtr& x) {
  auto out = make_tensor(x->shape);
  for (std::int64_t i = 0; i < x->numel(); ++i) out->data[i] = std::sqrt(x->data[i]);
  if (detail::grad_needed(g, {&x})) {
    out->requires_grad = true;
    out->ensure_grad();
    g.record([x, out] {
      x->ensure_grad();
      for (std::int64_t i = 0; i < x->numel(); ++i) {
        x->grad[i] += out->grad[i] * 0.5 / out->data[i];
      }
    });
  }
  return out;
}

inline TensorPtr reshape(Graph& g, const TensorPtr& x, std::vector<int> shape) {
  if (Tensor::count(shape) != x->numel()) throw ShapeError("reshape: element count mismatch");
  auto out = make_tensor(std::move(shape));
  out->data = x->data;
  if (detail::grad_needed(g, {&x})) {
    out->requires_grad = true;
    out->ensure_grad();
    g.record([x, out] {
      x->ensure_grad();
      for (std::int64_t i = 0; i < x->numel(); ++i) x->grad[i] += out->grad[i];
    });
  }
  return out;
}

inline TensorPtr concat(Graph& g, const std::vector<TensorPtr>& xs, int axis) {
  if (xs.empty()) throw ValueError("concat: no inputs");
  const int rank = xs[0]->rank();
  if (axis < 0 || axis >= rank) throw ShapeError("concat: axis out of range");
  int axis_total = 0;
  for (const auto& x : xs) {
    if (x->rank() != rank) throw ShapeError("concat: rank mismatch");
    for (int d = 0; d < rank; ++d) {
      if (d != axis && x->dim(d) != xs[0]->dim(d)) throw ShapeError("concat: shape mismatch");
    }
    axis_total += x->dim(axis);
  }
  std::vector<int> out_shape = xs[0]->shape;
  out_shape[static_cast<size_t>(axis)] = axis_total;
  auto out = make_tensor(out_shape);

  // outer = product of dims before axis, inner = product after.
  std::int64_t outer = 1, inner = 1;
  for (int d = 0; d < axis; ++d) outer *= xs[0]->dim(d);
  for (int d = axis + 1; d < rank; ++d) inner *= xs[0]->dim(d);

  std::int64_t offset = 0;
  for (const auto& x : xs) {
    const std::int64_t span = x->dim(axis) * inner;
    for (std::int64_t o = 0; o < outer; ++o) {
      std::copy_n(x->data.begin() + o * span, span,
                  out->data.begin() + o * axis_total * inner + offset);
    }
    offset += span;
  }

  if (g.recording() &&
      std::any_of(xs.begin(), xs.end(), [](const TensorPtr& x) { return x->requires_grad; })) {
    out->requires_grad = true;
    out->ensure_grad();
    g.record([xs, out, outer, inner, axis_total] {
      std::int64_t offset = 0;
      for (const auto& x : xs) {
        const std::int64_t span = x->data.size() / static_cast<size_t>(outer);
        if (x->requires_grad) {
          x->ensure_grad();
          for (std::int64_t o = 0; o < outer; ++o) {
            const double* src = out->grad.data() + o * axis_total * inner + offset;
            double* dst = x->grad.data() + o * span;
            for (std::int64_t i = 0; i < span; ++i) dst[i] += src[i];
          }
        }
        offset += span;
      }
    });
  }
  return out;
}

// Contiguous slice along the outermost axis.
inline TensorPtr narrow(Graph& g, const TensorPtr& x, int start, int len) {
  if (x->rank() < 1) throw ShapeError("narrow: scalar input");
  const int n = x->dim(0);
  if (start < 0 || len < 1 || start + len > n) throw ShapeError("narrow: range out of bounds");
  const std::int64_t inner = x->numel() / n;
  std::vector<int> shape = x->shape;
  shape[0] = len;
  auto out = make_tensor(shape);
  std::copy_n(x->data.begin() + start * inner, len * inner, out->data.begin());
  if (detail::grad_needed(g, {&x})) {
    out->requires_grad = true;
    out->ensure_grad();
    g.record([x, out, start, inner, len] {
      x->ensure_grad();
      for (std::int64_t i = 0; i < len * inner; ++i) {
        x->grad[start * inner + i] += out->grad[i];
      }
    });
  }
  return out;
}

inline TensorPtr sum_all(Graph& g, const TensorPtr& x) {
  auto out = make_tensor({1});
  double acc = 0.0;
  for (double v : x->data) acc += v;
  out->data[0] = acc;
  if (detail::grad_needed(g, {&x})) {
    out->requires_grad = true;
    out->ensure_grad();
    g.record([x, out] {
      x->ensure_grad();
      for (std::int64_t i = 0; i < x->numel(); ++i) x->grad[i] += out->grad[0];
    });
  }
  return out;
}

// Max over all elements, gradient routed to the first (row-major) maximum.
inline TensorPtr max_all(Graph& g, const TensorPtr& x) {
  if (x->numel() == 0) throw ShapeError("max_all: empty tensor");
  auto out = make_tensor({1});
  std::int64_t arg = 0;
  double best = x->data[0];
  for (std::int64_t i = 1; i < x->numel(); ++i) {
    if (x->data[i] > best) {
      best = x->data[i];
      arg = i;
    }
  }
  out->data[0] = best;
  if (detail::grad_needed(g, {&x})) {
    out->requires_grad = true;
    out->ensure_grad();
    g.record([x, out, arg] {
      x->ensure_grad();
      x->grad[arg] += out->grad[0];
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// Linear algebra
// ---------------------------------------------------------------------------

inline TensorPtr matmul(Graph& g, const TensorPtr& a, const TensorPtr& b) {
  if (a->rank() != 2 || b->rank() != 2) throw ShapeError("matmul: need 2-D operands");
  const int m = a->dim(0), k = a->dim(1), k2 = b->dim(0), n = b->dim(1);
  if (k != k2) throw ShapeError("matmul: inner dimension mismatch");
  auto out = make_tensor({m, n});
  const double* pa = a->data.data();
  const double* pb = b->data.data();
  double* po = out->data.data();
  if (macs::enabled) {
    for (int i = 0; i < m; ++i) {
      for (int j = 0; j < n; ++j) {
        double acc = 0.0;
        for (int t = 0; t < k; ++t) {
          ++macs::counter;
          acc += pa[i * k + t] * pb[t * n + j];
        }
        po[i * n + j] = acc;
      }
    }
  } else {
    for (int i = 0; i < m; ++i) {
      for (int t = 0; t < k; ++t) {
        const double av = pa[i * k + t];
        const double* brow = pb + static_cast<std::int64_t>(t) * n;
        double* orow = po + static_cast<std::int64_t>(i) * n;
        for (int j = 0; j < n; ++j) orow[j] += av * brow[j];
      }
    }
  }
  if (detail::grad_needed(g, {&a, &b})) {
    out->requires_grad = true;
    out->ensure_grad();
    g.record([a, b, out, m, k, n] {
      const double* go = out->grad.data();
      if (a->requires_grad) {
        a->ensure_grad();
        for (int i = 0; i < m; ++i) {
          for (int t = 0; t < k; ++t) {
            double acc = 0.0;
            for (int j = 0; j < n; ++j) acc += go[i * n + j] * b->data[t * n + j];
            a->grad[i * k + t] += acc;
          }
        }
      }
      if (b->requires_grad) {
        b->ensure_grad();
        for (int t = 0; t < k; ++t) {
          for (int j = 0; j < n; ++j) {
            double acc = 0.0;
            for (int i = 0; i < m; ++i) acc += a->data[i * k + t] * go[i * n + j];
            b->grad[t * n + j] += acc;
          }
        }
      }
    });
  }
  return out;
}

// Outer product of two tensors viewed as flat vectors.
inline TensorPtr outer(Graph& g, const TensorPtr& u, const TensorPtr& v) {
  const int m = static_cast<int>(u->numel());
  const int n = static_cast<int>(v->numel());
  auto out = make_tensor({m, n});
  for (int i = 0; i < m; ++i) {
    for (int j = 0; j < n; ++j) {
      if (macs::enabled) ++macs::counter;
      out->data[static_cast<std::int64_t>(i) * n + j] = u->data[i] * v->data[j];
    }
  }
  if (detail::grad_needed(g, {&u, &v})) {
    out->requires_grad = true;
    out->ensure_grad();
    g.record([u, v, out, m, n] {
      const double* go = out->grad.data();
      if (u->requires_grad) {
        u->ensure_grad();
        for (int i = 0; i < m; ++i) {
          double acc = 0.0;
          for (int j = 0; j < n; ++j) acc += go[i * n + j] * v->data[j];
          u->grad[i] += acc;
        }
      }
      if (v->requires_grad) {
        v->ensure_grad();
        for (int j = 0; j < n; ++j) {
          double acc = 0.0;
          for (int i = 0; i < m; ++i) acc += go[i * n + j] * u->data[i];
          v->grad[j] += acc;
        }
      }
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// Convolutions
// ---------------------------------------------------------------------------

namespace detail {

struct ConvDims {
  int n, c, h, w;       // input
  int o, k;             // filters (square kernel)
  int stride, pad, dil;
  int ho, wo;           // output
};

inline ConvDims conv_dims(const TensorPtr& x, const TensorPtr& w, int stride, int pad, int dil) {
  check_4d(x, "conv2d");
  if (w->rank() != 4 || w->dim(2) != w->dim(3)) {
    throw ShapeError("conv2d: weight must be (O,I,K,K)");
  }
  if (stride < 1 || pad < 0 || dil < 1) throw ValueError("conv2d: bad stride/pad/dilation");
  ConvDims d{};
  d.n = x->dim(0);
  d.c = x->dim(1);
  d.h = x->dim(2);
  d.w = x->dim(3);
  d.o = w->dim(0);
  d.k = w->dim(2);
  d.stride = stride;
  d.pad = pad;
  d.dil = dil;
  if (w->dim(1) != d.c) throw ShapeError("conv2d: input channels do not match weight");
  d.ho = (d.h + 2 * pad - dil * (d.k - 1) - 1) / stride + 1;
  d.wo = (d.w + 2 * pad - dil * (d.k - 1) - 1) / stride + 1;
  if (d.h + 2 * pad < dil * (d.k - 1) + 1 || d.ho <= 0 || d.wo <= 0) {
    throw ShapeError("conv2d: non-positive output extent");
  }
  return d;
}

}  // namespace detail

inline TensorPtr conv2d(Graph& g, const TensorPtr& x, const TensorPtr& w, const TensorPtr& bias,
                        int stride, int pad, int dilation = 1) {
  const auto d = detail::conv_dims(x, w, stride, pad, dilation);
  if (bias && bias->numel() != d.o) throw ShapeError("conv2d: bias size mismatch");
  auto out = make_tensor({d.n, d.o, d.ho, d.wo});

  const double* px = x->data.data();
  const double* pw = w->data.data();
  double* po = out->data.data();
  const std::int64_t x_n = static_cast<std::int64_t>(d.c) * d.h * d.w;
  const std::int64_t x_c = static_cast<std::int64_t>(d.h) * d.w;
  const std::int64_t o_n = static_cast<std::int64_t>(d.o) * d.ho * d.wo;
  const std::int64_t o_c = static_cast<std::int64_t>(d.ho) * d.wo;

  for (int n = 0; n < d.n; ++n) {
    for (int o = 0; o < d.o; ++o) {
      double* oplane = po + n * o_n + o * o_c;
      const double bv = bias ? bias->data[o] : 0.0;
      for (std::int64_t i = 0; i < o_c; ++i) oplane[i] = bv;
      for (int c = 0; c < d.c; ++c) {
        const double* xplane = px + n * x_n + c * x_c;
        for (int kh = 0; kh < d.k; ++kh) {
          for (int kw = 0; kw < d.k; ++kw) {
            const double wv = pw[((static_cast<std::int64_t>(o) * d.c + c) * d.k + kh) * d.k + kw];
            for (int oh = 0; oh < d.ho; ++oh) {
              const int ih = oh * d.stride - d.pad + kh * d.dil;
              const bool row_ok = ih >= 0 && ih < d.h;
              for (int ow = 0; ow < d.wo; ++ow) {
                if (macs::enabled) ++macs::counter;
                if (!row_ok) continue;
                const int iw = ow * d.stride - d.pad + kw * d.dil;
                if (iw < 0 || iw >= d.w) continue;
                oplane[static_cast<std::int64_t>(oh) * d.wo + ow] +=
                    wv * xplane[static_cast<std::int64_t>(ih) * d.w + iw];
              }
            }
          }
        }
      }
    }
  }

  if (detail::grad_needed(g, {&x, &w, &bias})) {
    out->requires_grad = true;
    out->ensure_grad();
    g.record([x, w, bias, out, d, x_n, x_c, o_n, o_c] {
      const double* go = out->grad.data();
      const bool need_x = x->requires_grad;
      const bool need_w = w->requires_grad;
      const bool need_b = bias && bias->requires_grad;
      if (need_x) x->ensure_grad();
      if (need_w) w->ensure_grad();
      if (need_b) bias->ensure_grad();
      for (int n = 0; n < d.n; ++n) {
        for (int o = 0; o < d.o; ++o) {
          const double* gplane = go + n * o_n + o * o_c;
          if (need_b) {
            double acc = 0.0;
            for (std::int64_t i = 0; i < o_c; ++i) acc += gplane[i];
            bias->grad[o] += acc;
          }
          if (!need_x && !need_w) continue;
          for (int c = 0; c < d.c; ++c) {
            const double* xplane = x->data.data() + n * x_n + c * x_c;
            double* gx = need_x ? x->grad.data() + n * x_n + c * x_c : nullptr;
            for (int kh = 0; kh < d.k; ++kh) {
              for (int kw = 0; kw < d.k; ++kw) {
                const std::int64_t widx =
                    ((static_cast<std::int64_t>(o) * d.c + c) * d.k + kh) * d.k + kw;
                const double wv = w->data[widx];
                double wacc = 0.0;
                for (int oh = 0; oh < d.ho; ++oh) {
                  const int ih = oh * d.stride - d.pad + kh * d.dil;
                  if (ih < 0 || ih >= d.h) continue;
                  for (int ow = 0; ow < d.wo; ++ow) {
                    const int iw = ow * d.stride - d.pad + kw * d.dil;
                    if (iw < 0 || iw >= d.w) continue;
                    const double gv = gplane[static_cast<std::int64_t>(oh) * d.wo + ow];
                    if (need_x) gx[static_cast<std::int64_t>(ih) * d.w + iw] += gv * wv;
                    if (need_w) wacc += gv * xplane[static_cast<std::int64_t>(ih) * d.w + iw];
                  }
                }
                if (need_w) w->grad[widx] += wacc;
              }
            }
          }
        }
      }
    });
  }
  return out;
}

inline TensorPtr conv_transpose2d(Graph& g, const TensorPtr& x, const TensorPtr& w,
                                  const TensorPtr& bias, int stride, int pad) {
  detail::check_4d(x, "conv_transpose2d");
  if (w->rank() != 4 || w->dim(2) != w->dim(3)) {
    throw ShapeError("conv_transpose2d: weight must be (I,O,K,K)");
  }
  if (stride < 1 || pad < 0) throw ValueError("conv_transpose2d: bad stride/pad");
  const int n_ = x->dim(0), ci = x->dim(1), h = x->dim(2), ww = x->dim(3);
  if (w->dim(0) != ci) throw ShapeError("conv_transpose2d: input channels do not match weight");
  const int co = w->dim(1), k = w->dim(2);
  const int ho = (h - 1) * stride - 2 * pad + k;
  const int wo = (ww - 1) * stride - 2 * pad + k;
  if (ho <= 0 || wo <= 0) throw ShapeError("conv_transpose2d: non-positive output extent");
  if (bias && bias->numel() != co) throw ShapeError("conv_transpose2d: bias size mismatch");

  auto out = make_tensor({n_, co, ho, wo});
  const std::int64_t x_n = static_cast<std::int64_t>(ci) * h * ww;
  const std::int64_t x_c = static_cast<std::int64_t>(h) * ww;
  const std::int64_t o_n = static_cast<std::int64_t>(co) * ho * wo;
  const std::int64_t o_c = static_cast<std::int64_t>(ho) * wo;

  if (bias) {
    for (int n = 0; n < n_; ++n) {
      for (int o = 0; o < co; ++o) {
        double* oplane = out->data.data() + n * o_n + o * o_c;
        for (std::int64_t i = 0; i < o_c; ++i) oplane[i] = bias->data[o];
      }
    }
  }

  // Scatter: every input position contributes a KxK patch per out channel.
  for (int n = 0; n < n_; ++n) {
    for (int i = 0; i < ci; ++i) {
      const double* xplane = x->data.data() + n * x_n + i * x_c;
      for (int o = 0; o < co; ++o) {
        double* oplane = out->data.data() + n * o_n + o * o_c;
        const double* wk = w->data.data() + (static_cast<std::int64_t>(i) * co + o) * k * k;
        for (int ih = 0; ih < h; ++ih) {
          for (int iw = 0; iw < ww; ++iw) {
            const double xv = xplane[static_cast<std::int64_t>(ih) * ww + iw];
            for (int kh = 0; kh < k; ++kh) {
              const int oh = ih * stride - pad + kh;
              const bool row_ok = oh >= 0 && oh < ho;
              for (int kw = 0; kw < k; ++kw) {
                if (macs::enabled) ++macs::counter;
                if (!row_ok) continue;
                const int ow = iw * stride - pad + kw;
                if (ow < 0 || ow >= wo) continue;
                oplane[static_cast<std::int64_t>(oh) * wo + ow] += xv * wk[kh * k + kw];
              }
            }
          }
        }
      }
    }
  }

  if (detail::grad_needed(g, {&x, &w, &bias})) {
    out->requires_grad = true;
    out->ensure_grad();
    g.record([x, w, bias, out, n_, ci, co, h, ww, k, ho, wo, stride, pad, x_n, x_c, o_n, o_c] {
      const double* go = out->grad.data();
      const bool need_x = x->requires_grad;
      const bool need_w = w->requires_grad;
      const bool need_b = bias && bias->requires_grad;
      if (need_x) x->ensure_grad();
      if (need_w) w->ensure_grad();
      if (need_b) bias->ensure_grad();
      if (need_b) {
        for (int n = 0; n < n_; ++n) {
          for (int o = 0; o < co; ++o) {
            const double* gplane = go + n * o_n + o * o_c;
            double acc = 0.0;
            for (std::int64_t i = 0; i < o_c; ++i) acc += gplane[i];
            bias->grad[o] += acc;
          }
        }
      }
      if (!need_x && !need_w) return;
      for (int n = 0; n < n_; ++n) {
        for (int i = 0; i < ci; ++i) {
          const double* xplane = x->data.data() + n * x_n + i * x_c;
          double* gx = need_x ? x->grad.data() + n * x_n + i * x_c : nullptr;
          for (int o = 0; o < co; ++o) {
            const double* gplane = go + n * o_n + o * o_c;
            const std::int64_t wbase = (static_cast<std::int64_t>(i) * co + o) * k * k;
            for (int ih = 0; ih < h; ++ih) {
              for (int iw = 0; iw < ww; ++iw) {
                const double xv = xplane[static_cast<std::int64_t>(ih) * ww + iw];
                double xacc = 0.0;
                for (int kh = 0; kh < k; ++kh) {
                  const int oh = ih * stride - pad + kh;
                  if (oh < 0 || oh >= ho) continue;
                  for (int kw = 0; kw < k; ++kw) {
                    const int ow = iw * stride - pad + kw;
                    if (ow < 0 || ow >= wo) continue;
                    const double gv = gplane[static_cast<std::int64_t>(oh) * wo + ow];
                    if (need_x) xacc += gv * w->data[wbase + kh * k + kw];
                    if (need_w) w->grad[wbase + kh * k + kw] += gv * xv;
                  }
                }
                if (need_x) gx[static_cast<std::int64_t>(ih) * ww + iw] += xacc;
              }
            }
          }
        }
      }
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// Normalization and pooling
// ---------------------------------------------------------------------------

inline TensorPtr batchnorm2d(Graph& g, const TensorPtr& x, const TensorPtr& gamma,
                             const TensorPtr& beta, const TensorPtr& running_mean,
                             const TensorPtr& running_var, bool training,
                             double momentum = 0.1, double eps = 1e-5) {
  detail::check_4d(x, "batchnorm2d");
  const int n_ = x->dim(0), c_ = x->dim(1), h = x->dim(2), w = x->dim(3);
  if (gamma->numel() != c_ || beta->numel() != c_ || running_mean->numel() != c_ ||
      running_var->numel() != c_) {
    throw ShapeError("batchnorm2d: per-channel parameter length mismatch");
  }
  const std::int64_t plane = static_cast<std::int64_t>(h) * w;
  const std::int64_t cnt = static_cast<std::int64_t>(n_) * plane;

  std::vector<double> mean(c_), var(c_);
  if (training) {
    for (int c = 0; c < c_; ++c) {
      double m = 0.0;
      for (int n = 0; n < n_; ++n) {
        const double* p = x->data.data() + (static_cast<std::int64_t>(n) * c_ + c) * plane;
        for (std::int64_t i = 0; i < plane; ++i) m += p[i];
      }
      m /= static_cast<double>(cnt);
      double v = 0.0;
      for (int n = 0; n < n_; ++n) {
        const double* p = x->data.data() + (static_cast<std::int64_t>(n) * c_ + c) * plane;
        for (std::int64_t i = 0; i < plane; ++i) {
          const double d = p[i] - m;
          v += d * d;
        }
      }
      v /= static_cast<double>(cnt);  // population variance
      mean[c] = m;
      var[c] = v;
      running_mean->data[c] = (1.0 - momentum) * running_mean->data[c] + momentum * m;
      running_var->data[c] = (1.0 - momentum) * running_var->data[c] + momentum * v;
    }
  } else {
    for (int c = 0; c < c_; ++c) {
      mean[c] = running_mean->data[c];
      var[c] = running_var->data[c];
    }
  }

  auto out = make_tensor(x->shape);
  auto xhat = std::make_shared<std::vector<double>>(x->data.size());
  std::vector<double> invstd(c_);
  for (int c = 0; c < c_; ++c) invstd[c] = 1.0 / std::sqrt(var[c] + eps);
  for (int n = 0; n < n_; ++n) {
    for (int c = 0; c < c_; ++c) {
      const std::int64_t base = (static_cast<std::int64_t>(n) * c_ + c) * plane;
      const double m = mean[c], is = invstd[c], gm = gamma->data[c], bt = beta->data[c];
      for (std::int64_t i = 0; i < plane; ++i) {
        const double xh = (x->data[base + i] - m) * is;
        (*xhat)[base + i] = xh;
        out->data[base + i] = gm * xh + bt;
      }
    }
  }

  if (detail::grad_needed(g, {&x, &gamma, &beta})) {
    out->requires_grad = true;
    out->ensure_grad();
    auto invstd_p = std::make_shared<std::vector<double>>(std::move(invstd));
    g.record([x, gamma, beta, out, xhat, invstd_p, n_, c_, plane, cnt, training] {
      const double* go = out->grad.data();
      const bool need_x = x->requires_grad;
      if (need_x) x->ensure_grad();
      const bool need_g = gamma->requires_grad;
      const bool need_b = beta->requires_grad;
      if (need_g) gamma->ensure_grad();
      if (need_b) beta->ensure_grad();
      for (int c = 0; c < c_; ++c) {
        double sum_g = 0.0, sum_gx = 0.0;
        for (int n = 0; n < n_; ++n) {
          const std::int64_t base = (static_cast<std::int64_t>(n) * c_ + c) * plane;
          for (std::int64_t i = 0; i < plane; ++i) {
            sum_g += go[base + i];
            sum_gx += go[base + i] * (*xhat)[base + i];
          }
        }
        if (need_g) gamma->grad[c] += sum_gx;
        if (need_b) beta->grad[c] += sum_g;
        if (!need_x) continue;
        const double gm = gamma->data[c], is = (*invstd_p)[c];
        if (training) {
          const double inv_cnt = 1.0 / static_cast<double>(cnt);
          for (int n = 0; n < n_; ++n) {
            const std::int64_t base = (static_cast<std::int64_t>(n) * c_ + c) * plane;
            for (std::int64_t i = 0; i < plane; ++i) {
              x->grad[base + i] += gm * is *
                  (go[base + i] - inv_cnt * sum_g - (*xhat)[base + i] * inv_cnt * sum_gx);
            }
          }
        } else {
          for (int n = 0; n < n_; ++n) {
            const std::int64_t base = (static_cast<std::int64_t>(n) * c_ + c) * plane;
            for (std::int64_t i = 0; i < plane; ++i) x->grad[base + i] += gm * is * go[base + i];
          }
        }
      }
    });
  }
  return out;
}

// Windowed maxima; gradient goes to the first (row-major) max of each window.
inline TensorPtr max_pool2d(Graph& g, const TensorPtr& x, int k, int stride) {
  detail::check_4d(x, "max_pool2d");
  if (k < 1 || stride < 1) throw ValueError("max_pool2d: bad kernel/stride");
  const int n_ = x->dim(0), c_ = x->dim(1), h = x->dim(2), w = x->dim(3);
  if (k > h || k > w) throw ShapeError("max_pool2d: window exceeds extent");
  const int ho = (h - k) / stride + 1;
  const int wo = (w - k) / stride + 1;
  auto out = make_tensor({n_, c_, ho, wo});
  auto argmax = std::make_shared<std::vector<std::int64_t>>(out->data.size());
  const std::int64_t plane = static_cast<std::int64_t>(h) * w;

  std::int64_t oi = 0;
  for (int n = 0; n < n_; ++n) {
    for (int c = 0; c < c_; ++c) {
      const std::int64_t base = (static_cast<std::int64_t>(n) * c_ + c) * plane;
      for (int oh = 0; oh < ho; ++oh) {
        for (int ow = 0; ow < wo; ++ow, ++oi) {
          double best = -std::numeric_limits<double>::infinity();
          std::int64_t arg = -1;
          for (int kh = 0; kh < k; ++kh) {
            for (int kw = 0; kw < k; ++kw) {
              const std::int64_t idx =
                  base + static_cast<std::int64_t>(oh * stride + kh) * w + (ow * stride + kw);
              if (x->data[idx] > best) {
                best = x->data[idx];
                arg = idx;
              }
            }
          }
          out->data[oi] = best;
          (*argmax)[oi] = arg;
        }
      }
    }
  }

  if (detail::grad_needed(g, {&x})) {
    out->requires_grad = true;
    out->ensure_grad();
    g.record([x, out, argmax] {
      x->ensure_grad();
      for (std::int64_t i = 0; i < out->numel(); ++i) x->grad[(*argmax)[i]] += out->grad[i];
    });
  }
  return out;
}

// Global spatial mean: (N,C,H,W) -> (N,C).
inline TensorPtr spatial_avg_pool(Graph& g, const TensorPtr& x) {
  detail::check_4d(x, "spatial_avg_pool");
  const int n_ = x->dim(0), c_ = x->dim(1);
  const std::int64_t plane = static_cast<std::int64_t>(x->dim(2)) * x->dim(3);
  auto out = make_tensor({n_, c_});
  for (int n = 0; n < n_; ++n) {
    for (int c = 0; c < c_; ++c) {
      const double* p = x->data.data() + (static_cast<std::int64_t>(n) * c_ + c) * plane;
      double acc = 0.0;
      for (std::int64_t i = 0; i < plane; ++i) acc += p[i];
      out->data[static_cast<std::int64_t>(n) * c_ + c] = acc / static_cast<double>(plane);
    }
  }
  if (detail::grad_needed(g, {&x})) {
    out->requires_grad = true;
    out->ensure_grad();
    g.record([x, out, n_, c_, plane] {
      x->ensure_grad();
      for (int n = 0; n < n_; ++n) {
        for (int c = 0; c < c_; ++c) {
          const double gv =
              out->grad[static_cast<std::int64_t>(n) * c_ + c] / static_cast<double>(plane);
          double* p = x->grad.data() + (static_cast<std::int64_t>(n) * c_ + c) * plane;
          for (std::int64_t i = 0; i < plane; ++i) p[i] += gv;
        }
      }
    });
  }
  return out;
}

// phi on tensors: mean over alpha consecutive columns of the last axis.
inline TensorPtr time_mean_pool(Graph& g, const TensorPtr& x, int alpha) {
  detail::check_4d(x, "time_mean_pool");
  if (alpha < 1) throw ValueError("time_mean_pool: alpha must be >= 1");
  const int w = x->dim(3);
  if (w % alpha != 0) throw ValueError("resolution mismatch");
  if (alpha == 1) return x;
  const int n_ = x->dim(0), c_ = x->dim(1), h = x->dim(2);
  const int wo = w / alpha;
  auto out = make_tensor({n_, c_, h, wo});
  const std::int64_t rows = static_cast<std::int64_t>(n_) * c_ * h;
  for (std::int64_t r = 0; r < rows; ++r) {
    const double* src = x->data.data() + r * w;
    double* dst = out->data.data() + r * wo;
    for (int c = 0; c < wo; ++c) {
      double acc = 0.0;
      for (int j = 0; j < alpha; ++j) acc += src[c * alpha + j];
      dst[c] = acc / alpha;
    }
  }
  if (detail::grad_needed(g, {&x})) {
    out->requires_grad = true;
    out->ensure_grad();
    g.record([x, out, rows, w, wo, alpha] {
      x->ensure_grad();
      for (std::int64_t r = 0; r < rows; ++r) {
        const double* gsrc = out->grad.data() + r * wo;
        double* gdst = x->grad.data() + r * w;
        for (int c = 0; c < wo; ++c) {
          const double gv = gsrc[c] / alpha;
          for (int j = 0; j < alpha; ++j) gdst[c * alpha + j] += gv;
        }
      }
    });
  }
  return out;
}

// phi^-1 on tensors: nearest-neighbor repetition along the last axis.
inline TensorPtr time_repeat(Graph& g, const TensorPtr& x, int alpha) {
  detail::check_4d(x, "time_repeat");
  if (alpha < 1) throw ValueError("time_repeat: alpha must be >= 1");
  if (alpha == 1) return x;
  const int n_ = x->dim(0), c_ = x->dim(1), h = x->dim(2), w = x->dim(3);
  const int wo = w * alpha;
  auto out = make_tensor({n_, c_, h, wo});
  const std::int64_t rows = static_cast<std::int64_t>(n_) * c_ * h;
  for (std::int64_t r = 0; r < rows; ++r) {
    const double* src = x->data.data() + r * w;
    double* dst = out->data.data() + r * wo;
    for (int c = 0; c < w; ++c) {
      for (int j = 0; j < alpha; ++j) dst[c * alpha + j] = src[c];
    }
  }
  if (detail::grad_needed(g, {&x})) {
    out->requires_grad = true;
    out->ensure_grad();
    g.record([x, out, rows, w, wo, alpha] {
      x->ensure_grad();
      for (std::int64_t r = 0; r < rows; ++r) {
        const double* gsrc = out->grad.data() + r * wo;
        double* gdst = x->grad.data() + r * w;
        for (int c = 0; c < w; ++c) {
          double acc = 0.0;
          for (int j = 0; j < alpha; ++j) acc += gsrc[c * alpha + j];
          gdst[c] += acc;
        }
      }
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// Losses
// ---------------------------------------------------------------------------

// Mean binary cross entropy on logits, computed in the stable form
// max(z,0) - z*t + log(1+exp(-|z|)).
inline TensorPtr bce_with_logits(Graph& g, const TensorPtr& logits, const TensorPtr& targets) {
  if (logits->shape != targets->shape) throw ShapeError("bce_with_logits: shape mismatch");
  for (double t : targets->data) {
    if (!(t >= 0.0 && t <= 1.0)) throw ValueError("bce_with_logits: target outside [0,1]");
  }
  const std::int64_t n = logits->numel();
  auto out = make_tensor({1});
  double acc = 0.0;
  for (std::int64_t i = 0; i < n; ++i) {
    const double z = logits->data[i];
    const double t = targets->data[i];
    acc += std::max(z, 0.0) - z * t + std::log1p(std::exp(-std::abs(z)));
  }
  out->data[0] = acc / static_cast<double>(n);
  if (detail::grad_needed(g, {&logits})) {
    out->requires_grad = true;
    out->ensure_grad();
    g.record([logits, targets, out, n] {
      logits->ensure_grad();
      const double gv = out->grad[0] / static_cast<double>(n);
      for (std::int64_t i = 0; i < n; ++i) {
        const double z = logits->data[i];
        const double s =
            z >= 0.0 ? 1.0 / (1.0 + std::exp(-z)) : std::exp(z) / (1.0 + std::exp(z));
        logits->grad[i] += gv * (s - targets->data[i]);
      }
    });
  }
  return out;
}

// Probability-space BCE on a scalar that is already post-sigmoid. The
// probability is clamped to [1e-12, 1-1e-12]; in the clamped region the value
// is constant, so the gradient there is zero.
inline TensorPtr bce_prob(Graph& g, const TensorPtr& p, double y) {
  if (p->numel() != 1) throw ShapeError("bce_prob: probability must be scalar");
  if (!(y >= 0.0 && y <= 1.0)) throw ValueError("bce_prob: target outside [0,1]");
  constexpr double kClamp = 1e-12;
  const double raw = p->data[0];
  const double pc = std::clamp(raw, kClamp, 1.0 - kClamp);
  auto out = make_tensor({1});
  out->data[0] = -(y * std::log(pc) + (1.0 - y) * std::log(1.0 - pc));
  if (detail::grad_needed(g, {&p})) {
    out->requires_grad = true;
    out->ensure_grad();
    g.record([p, out, y, raw, pc] {
      p->ensure_grad();
      if (raw > 1e-12 && raw < 1.0 - 1e-12) {
        p->grad[0] += out->grad[0] * (pc - y) / (pc * (1.0 - pc));
      }
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// Gradient checking
// ---------------------------------------------------------------------------

// Compares backward() gradients against central finite differences
// (f(p+eps)-f(p-eps))/(2*eps). Returns the max relative error, with the
// denominator floored at 1 so near-zero gradients compare absolutely.
template <typename LossFn>
double check_gradients(Graph& g, LossFn&& f, const std::vector<TensorPtr>& params,
                       double eps = 1e-4) {
  for (const auto& p : params) {
    p->ensure_grad();
    p->zero_grad();
  }
  g.clear_tape();
  TensorPtr loss = f();
  g.backward(loss);

  std::vector<std::vector<double>> analytic;
  analytic.reserve(params.size());
  for (const auto& p : params) analytic.push_back(p->grad);

  double max_err = 0.0;
  for (size_t pi = 0; pi < params.size(); ++pi) {
    auto& p = params[pi];
    for (std::int64_t i = 0; i < p->numel(); ++i) {
      const double orig = p->data[i];
      double lp, lm;
      {
        NoGradGuard ng(g);
        p->data[i] = orig + eps;
        lp = f()->data[0];
        p->data[i] = orig - eps;
        lm = f()->data[0];
        p->data[i] = orig;
      }
      const double numeric = (lp - lm) / (2.0 * eps);
      const double a = analytic[pi][i];
      const double denom = std::max({1.0, std::abs(a), std::abs(numeric)});
      max_err = std::max(max_err, std::abs(a - numeric) / denom);
    }
  }
  for (const auto& p : params) p->zero_grad();
  return max_err;
}

// ---------------------------------------------------------------------------
// Initialization
// ---------------------------------------------------------------------------

inline void fill_normal(std::mt19937_64& rng, const TensorPtr& t, double stddev) {
  std::normal_distribution<double> dist(0.0, stddev);
  for (auto& v : t->data) v = dist(rng);
}

inline void fill_value(const TensorPtr& t, double v) {
  std::fill(t->data.begin(), t->data.end(), v);
}

}  // namespace vsep::ad
