#pragma once

// Dense 64-bit float tensors with reverse-mode automatic differentiation
// and a deterministic counter-based RNG. Single-threaded graph build and
// backward; tensors without graph links are safe to share read-only.

#include <cmath>
#include <cstdint>
#include <functional>
#include <memory>
#include <numeric>
#include <sstream>
#include <stdexcept>
#include <string>
#include <unordered_set>
#include <vector>

namespace menglan {

// Error taxonomy: shape/dimension violations, contract violations
// (preconditions), and configuration errors. The CLI maps these to
// distinct exit codes.
struct DimensionError : std::runtime_error {
  using std::runtime_error::runtime_error;
};
struct ContractError : std::runtime_error {
  using std::runtime_error::runtime_error;
};
struct ConfigError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

using Shape = std::vector<std::size_t>;

inline std::size_t shape_numel(const Shape& s) {
  std::size_t n = 1;
  for (std::size_t e : s) n *= e;
  return n;
}

inline std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << "[";
  for (std::size_t i = 0; i < s.size(); ++i) os << (i ? "x" : "") << s[i];
  os << "]";
  return os.str();
}

/// Deterministic RNG: splitmix64 state advance, identical draw sequence for
/// identical seeds on every platform. Uniform doubles take the top 53 bits.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : state_(seed) {}

  std::uint64_t next_u64() {
    std::uint64_t z = (state_ += 0x9E3779B97F4A7C15ull);
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ull;
    z = (z ^ (z >> 27)) * 0x94D049BB133111EBull;
    return z ^ (z >> 31);
  }

  /// Uniform in [0, 1).
  double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  /// Derive a child generator by a fixed label; all module RNGs flow from one
  /// root seed this way.
  Rng fork(const std::string& label) const {
    std::uint64_t h = 0xCBF29CE484222325ull;  // FNV-1a 64
    for (unsigned char c : label) {
      h ^= c;
      h *= 0x100000001B3ull;
    }
    Rng child(state_ ^ h);
    child.next_u64();
    return child;
  }

 private:
  std::uint64_t state_;
};

/// Dense row-major tensor. Copying a Tensor copies the handle (shared
/// storage); ops produce fresh tensors. A tensor participates in the autodiff
/// graph when requires_grad is set on it or on any ancestor. backward() may
/// be invoked once per constructed graph; gradients accumulate into leaves
/// until zero_grad().
class Tensor {
  struct Impl {
    Shape shape;
    std::vector<double> data;
    std::vector<double> grad;  // sized lazily
    bool requires_grad = false;
    bool in_graph = false;
    std::vector<std::shared_ptr<Impl>> parents;
    std::function<void(Impl&)> backprop;  // scatter out.grad into parents
  };

 public:
  Tensor() : p_(std::make_shared<Impl>()) {}

  explicit Tensor(Shape shape, double fill = 0.0) : p_(std::make_shared<Impl>()) {
    p_->shape = std::move(shape);
    p_->data.assign(shape_numel(p_->shape), fill);
  }

  static Tensor scalar(double v) {
    Tensor t(Shape{1});
    t.p_->data[0] = v;
    return t;
  }

  static Tensor from_vector(Shape shape, std::vector<double> values) {
    if (shape_numel(shape) != values.size())
      throw DimensionError("from_vector: shape " + shape_str(shape) + " does not hold " +
                           std::to_string(values.size()) + " values");
    Tensor t;
    t.p_->shape = std::move(shape);
    t.p_->data = std::move(values);
    return t;
  }

  const Shape& shape() const { return p_->shape; }
  std::size_t size() const { return p_->data.size(); }
  std::size_t dim(std::size_t i) const { return p_->shape.at(i); }
  std::size_t rank() const { return p_->shape.size(); }

  const std::vector<double>& data() const { return p_->data; }
  std::vector<double>& mut_data() { return p_->data; }
  double operator[](std::size_t i) const { return p_->data[i]; }
  double& at(std::size_t i) { return p_->data[i]; }

  bool requires_grad() const { return p_->requires_grad; }
  Tensor& set_requires_grad(bool v = true) {
    p_->requires_grad = v;
    return *this;
  }
  /// True when gradients must flow through this tensor.
  bool tracked() const { return p_->requires_grad || p_->in_graph; }

  bool has_grad() const { return !p_->grad.empty(); }
  const std::vector<double>& grad() const {
    if (p_->grad.empty())
      throw ContractError("grad accessed before backward populated it");
    return p_->grad;
  }
  std::vector<double>& mut_grad() {
    ensure_grad();
    return p_->grad;
  }
  void zero_grad() { p_->grad.assign(p_->data.size(), 0.0); }
  void drop_grad() { p_->grad.clear(); }

  /// Detached copy of the values (no graph link, no grad).
  Tensor detach_copy() const {
    Tensor t;
    t.p_->shape = p_->shape;
    t.p_->data = p_->data;
    return t;
  }

  /// Reverse-mode backward from a scalar loss. Gradients are accumulated
  /// into every tracked tensor reachable from this one.
  void backward() const {
    if (size() != 1)
      throw ContractError("backward() requires a scalar loss, got shape " +
                          shape_str(p_->shape));
    // iterative post-order over parents
    std::vector<Impl*> order;
    std::unordered_set<Impl*> seen;
    std::vector<std::pair<Impl*, std::size_t>> stack{{p_.get(), 0}};
    seen.insert(p_.get());
    while (!stack.empty()) {
      auto& [node, idx] = stack.back();
      if (idx < node->parents.size()) {
        Impl* parent = node->parents[idx++].get();
        if (seen.insert(parent).second) stack.push_back({parent, 0});
      } else {
        order.push_back(node);
        stack.pop_back();
      }
    }
    for (Impl* n : order)
      if (n->grad.size() != n->data.size()) n->grad.assign(n->data.size(), 0.0);
    p_->grad[0] += 1.0;
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
      Impl* n = *it;
      if (n->backprop) n->backprop(*n);
    }
  }

  /// Builds a graph node. The caller fills the output's data, then attaches
  /// a backward closure via the returned tensor's grad/parent accessors.
  /// `backward` receives the finished output node and must add into each
  /// tracked parent's grad buffer.
  static Tensor custom_op(Shape out_shape, std::vector<Tensor> parents,
                          std::function<void(Tensor out, std::vector<Tensor> parents)> backward) {
    Tensor out(std::move(out_shape));
    bool tracked = false;
    for (const auto& par : parents) tracked = tracked || par.tracked();
    if (tracked && backward) {
      out.p_->in_graph = true;
      for (auto& par : parents) out.p_->parents.push_back(par.p_);
      std::vector<Tensor> pcopy = parents;
      Tensor out_handle = out;
      out.p_->backprop = [backward = std::move(backward), pcopy,
                          out_handle](Impl&) mutable { backward(out_handle, pcopy); };
    }
    return out;
  }

  void ensure_grad() {
    if (p_->grad.size() != p_->data.size()) p_->grad.assign(p_->data.size(), 0.0);
  }

  bool same_storage(const Tensor& other) const { return p_ == other.p_; }

 private:
  std::shared_ptr<Impl> p_;
};

namespace detail {
inline void check_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  if (a.shape() != b.shape())
    throw DimensionError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) +
                         " vs " + shape_str(b.shape()));
}
}  // namespace detail

// ---- elementwise ----------------------------------------------------------

inline Tensor add(const Tensor& a, const Tensor& b) {
  detail::check_same_shape(a, b, "add");
  Tensor out = Tensor::custom_op(a.shape(), {a, b}, [](Tensor out, std::vector<Tensor> p) {
    const auto& g = out.grad();
    if (p[0].tracked()) {
      auto& ga = p[0].mut_grad();
      for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
    }
    if (p[1].tracked()) {
      auto& gb = p[1].mut_grad();
      for (std::size_t i = 0; i < g.size(); ++i) gb[i] += g[i];
    }
  });
  for (std::size_t i = 0; i < out.size(); ++i) out.at(i) = a[i] + b[i];
  return out;
}

inline Tensor sub(const Tensor& a, const Tensor& b) {
  detail::check_same_shape(a, b, "sub");
  Tensor out = Tensor::custom_op(a.shape(), {a, b}, [](Tensor out, std::vector<Tensor> p) {
    const auto& g = out.grad();
    if (p[0].tracked()) {
      auto& ga = p[0].mut_grad();
      for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
    }
    if (p[1].tracked()) {
      auto& gb = p[1].mut_grad();
      for (std::size_t i = 0; i < g.size(); ++i) gb[i] -= g[i];
    }
  });
  for (std::size_t i = 0; i < out.size(); ++i) out.at(i) = a[i] - b[i];
  return out;
}

inline Tensor mul(const Tensor& a, const Tensor& b) {
  detail::check_same_shape(a, b, "mul");
  Tensor out = Tensor::custom_op(a.shape(), {a, b}, [](Tensor out, std::vector<Tensor> p) {
    const auto& g = out.grad();
    if (p[0].tracked()) {
      auto& ga = p[0].mut_grad();
      for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * p[1][i];
    }
    if (p[1].tracked()) {
      auto& gb = p[1].mut_grad();
      for (std::size_t i = 0; i < g.size(); ++i) gb[i] += g[i] * p[0][i];
    }
  });
  for (std::size_t i = 0; i < out.size(); ++i) out.at(i) = a[i] * b[i];
  return out;
}

/// Scalar-tensor product; the only broadcasting form supported.
inline Tensor scale(const Tensor& a, double s) {
  Tensor out = Tensor::custom_op(a.shape(), {a}, [s](Tensor out, std::vector<Tensor> p) {
    const auto& g = out.grad();
    if (p[0].tracked()) {
      auto& ga = p[0].mut_grad();
      for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * s;
    }
  });
  for (std::size_t i = 0; i < out.size(); ++i) out.at(i) = a[i] * s;
  return out;
}

inline Tensor add_scalar(const Tensor& a, double s) {
  Tensor out = Tensor::custom_op(a.shape(), {a}, [](Tensor out, std::vector<Tensor> p) {
    const auto& g = out.grad();
    if (p[0].tracked()) {
      auto& ga = p[0].mut_grad();
      for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
    }
  });
  for (std::size_t i = 0; i < out.size(); ++i) out.at(i) = a[i] + s;
  return out;
}

/// Tag dispatch for the elementwise entry point.
enum class EwTag { add, sub, mul };

inline Tensor elementwise(EwTag tag, const Tensor& a, const Tensor& b) {
  switch (tag) {
    case EwTag::add: return add(a, b);
    case EwTag::sub: return sub(a, b);
    case EwTag::mul: return mul(a, b);
  }
  throw ConfigError("elementwise: unknown op tag");
}

// ---- reductions -----------------------------------------------------------

inline Tensor sum(const Tensor& a) {
  Tensor out = Tensor::custom_op(Shape{1}, {a}, [](Tensor out, std::vector<Tensor> p) {
    double g = out.grad()[0];
    if (p[0].tracked()) {
      auto& ga = p[0].mut_grad();
      for (double& v : ga) v += g;
    }
  });
  out.at(0) = std::accumulate(a.data().begin(), a.data().end(), 0.0);
  return out;
}

inline Tensor mean(const Tensor& a) {
  if (a.size() == 0) throw ContractError("mean of empty tensor");
  return scale(sum(a), 1.0 / static_cast<double>(a.size()));
}

// ---- matmul ---------------------------------------------------------------

/// Standard 2-D matrix product a[m x k] * b[k x n].
inline Tensor matmul(const Tensor& a, const Tensor& b) {
  if (a.rank() != 2 || b.rank() != 2 || a.dim(1) != b.dim(0))
    throw DimensionError("matmul: incompatible shapes " + shape_str(a.shape()) + " and " +
                         shape_str(b.shape()));
  const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
  Tensor out = Tensor::custom_op(Shape{m, n}, {a, b}, [m, k, n](Tensor out, std::vector<Tensor> p) {
    const auto& g = out.grad();
    const auto& av = p[0].data();
    const auto& bv = p[1].data();
    if (p[0].tracked()) {  // dA = G * B^T
      auto& ga = p[0].mut_grad();
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j) {
          double gij = g[i * n + j];
          for (std::size_t t = 0; t < k; ++t) ga[i * k + t] += gij * bv[t * n + j];
        }
    }
    if (p[1].tracked()) {  // dB = A^T * G
      auto& gb = p[1].mut_grad();
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t t = 0; t < k; ++t) {
          double ait = av[i * k + t];
          for (std::size_t j = 0; j < n; ++j) gb[t * n + j] += ait * g[i * n + j];
        }
    }
  });
  const auto& av = a.data();
  const auto& bv = b.data();
  auto& ov = out.mut_data();
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t t = 0; t < k; ++t) {
      double ait = av[i * k + t];
      if (ait == 0.0) continue;
      for (std::size_t j = 0; j < n; ++j) ov[i * n + j] += ait * bv[t * n + j];
    }
  return out;
}

/// Batched matmul a[B x m x k] * b[B x k x n].
inline Tensor bmm(const Tensor& a, const Tensor& b) {
  if (a.rank() != 3 || b.rank() != 3 || a.dim(0) != b.dim(0) || a.dim(2) != b.dim(1))
    throw DimensionError("bmm: incompatible shapes " + shape_str(a.shape()) + " and " +
                         shape_str(b.shape()));
  const std::size_t B = a.dim(0), m = a.dim(1), k = a.dim(2), n = b.dim(2);
  Tensor out =
      Tensor::custom_op(Shape{B, m, n}, {a, b}, [B, m, k, n](Tensor out, std::vector<Tensor> p) {
        const auto& g = out.grad();
        const auto& av = p[0].data();
        const auto& bv = p[1].data();
        for (std::size_t s = 0; s < B; ++s) {
          const double* gs = g.data() + s * m * n;
          const double* as = av.data() + s * m * k;
          const double* bs = bv.data() + s * k * n;
          if (p[0].tracked()) {
            double* ga = p[0].mut_grad().data() + s * m * k;
            for (std::size_t i = 0; i < m; ++i)
              for (std::size_t j = 0; j < n; ++j) {
                double gij = gs[i * n + j];
                for (std::size_t t = 0; t < k; ++t) ga[i * k + t] += gij * bs[t * n + j];
              }
          }
          if (p[1].tracked()) {
            double* gb = p[1].mut_grad().data() + s * k * n;
            for (std::size_t i = 0; i < m; ++i)
              for (std::size_t t = 0; t < k; ++t) {
                double ait = as[i * k + t];
                for (std::size_t j = 0; j < n; ++j) gb[t * n + j] += ait * gs[i * n + j];
              }
          }
        }
      });
  auto& ov = out.mut_data();
  for (std::size_t s = 0; s < B; ++s) {
    const double* as = a.data().data() + s * m * k;
    const double* bs = b.data().data() + s * k * n;
    double* os = ov.data() + s * m * n;
    for (std::size_t i = 0; i < m; ++i)
      for (std::size_t t = 0; t < k; ++t) {
        double ait = as[i * k + t];
        if (ait == 0.0) continue;
        for (std::size_t j = 0; j < n; ++j) os[i * n + j] += ait * bs[t * n + j];
      }
  }
  return out;
}

// ---- shape manipulation ---------------------------------------------------

inline Tensor reshape(const Tensor& a, Shape new_shape) {
  if (shape_numel(new_shape) != a.size())
    throw DimensionError("reshape: " + shape_str(a.shape()) + " -> " + shape_str(new_shape) +
                         " changes element count");
  Tensor out = Tensor::custom_op(new_shape, {a}, [](Tensor out, std::vector<Tensor> p) {
    const auto& g = out.grad();
    if (p[0].tracked()) {
      auto& ga = p[0].mut_grad();
      for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
    }
  });
  out.mut_data() = a.data();
  return out;
}

/// Swap the last two axes of a rank>=2 tensor.
inline Tensor transpose_last2(const Tensor& a) {
  if (a.rank() < 2) throw DimensionError("transpose_last2: rank < 2");
  Shape s = a.shape();
  const std::size_t m = s[s.size() - 2], n = s[s.size() - 1];
  std::swap(s[s.size() - 2], s[s.size() - 1]);
  const std::size_t B = a.size() / (m * n);
  Tensor out = Tensor::custom_op(s, {a}, [B, m, n](Tensor out, std::vector<Tensor> p) {
    const auto& g = out.grad();
    if (!p[0].tracked()) return;
    auto& ga = p[0].mut_grad();
    for (std::size_t b = 0; b < B; ++b)
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j)
          ga[b * m * n + i * n + j] += g[b * m * n + j * m + i];
  });
  auto& ov = out.mut_data();
  const auto& av = a.data();
  for (std::size_t b = 0; b < B; ++b)
    for (std::size_t i = 0; i < m; ++i)
      for (std::size_t j = 0; j < n; ++j)
        ov[b * m * n + j * m + i] = av[b * m * n + i * n + j];
  return out;
}

/// Swap axes 1 and 2 of a rank-4 tensor [a x b x c x d] -> [a x c x b x d].
inline Tensor swap_axes12(const Tensor& x) {
  if (x.rank() != 4) throw DimensionError("swap_axes12: rank-4 tensor required");
  const std::size_t A = x.dim(0), Bd = x.dim(1), C = x.dim(2), D = x.dim(3);
  Tensor out = Tensor::custom_op(Shape{A, C, Bd, D}, {x},
                                 [A, Bd, C, D](Tensor out, std::vector<Tensor> p) {
    const auto& g = out.grad();
    if (!p[0].tracked()) return;
    auto& gx = p[0].mut_grad();
    for (std::size_t a = 0; a < A; ++a)
      for (std::size_t b = 0; b < Bd; ++b)
        for (std::size_t c = 0; c < C; ++c)
          for (std::size_t d = 0; d < D; ++d)
            gx[((a * Bd + b) * C + c) * D + d] += g[((a * C + c) * Bd + b) * D + d];
  });
  auto& ov = out.mut_data();
  const auto& xv = x.data();
  for (std::size_t a = 0; a < A; ++a)
    for (std::size_t b = 0; b < Bd; ++b)
      for (std::size_t c = 0; c < C; ++c)
        for (std::size_t d = 0; d < D; ++d)
          ov[((a * C + c) * Bd + b) * D + d] = xv[((a * Bd + b) * C + c) * D + d];
  return out;
}

/// Concatenate along `axis`; all other extents must agree.
inline Tensor concat(const Tensor& a, const Tensor& b, std::size_t axis) {
  if (a.rank() != b.rank() || axis >= a.rank())
    throw DimensionError("concat: rank mismatch or bad axis");
  for (std::size_t i = 0; i < a.rank(); ++i)
    if (i != axis && a.dim(i) != b.dim(i))
      throw DimensionError("concat: shapes " + shape_str(a.shape()) + " and " +
                           shape_str(b.shape()) + " differ off-axis");
  Shape s = a.shape();
  s[axis] += b.dim(axis);
  std::size_t outer = 1, inner = 1;
  for (std::size_t i = 0; i < axis; ++i) outer *= s[i];
  for (std::size_t i = axis + 1; i < s.size(); ++i) inner *= s[i];
  const std::size_t ea = a.dim(axis), eb = b.dim(axis);
  Tensor out = Tensor::custom_op(s, {a, b},
                                 [outer, inner, ea, eb](Tensor out, std::vector<Tensor> p) {
    const auto& g = out.grad();
    const std::size_t stride = (ea + eb) * inner;
    if (p[0].tracked()) {
      auto& ga = p[0].mut_grad();
      for (std::size_t o = 0; o < outer; ++o)
        for (std::size_t i = 0; i < ea * inner; ++i)
          ga[o * ea * inner + i] += g[o * stride + i];
    }
    if (p[1].tracked()) {
      auto& gb = p[1].mut_grad();
      for (std::size_t o = 0; o < outer; ++o)
        for (std::size_t i = 0; i < eb * inner; ++i)
          gb[o * eb * inner + i] += g[o * stride + ea * inner + i];
    }
  });
  auto& ov = out.mut_data();
  const std::size_t stride = (ea + eb) * inner;
  for (std::size_t o = 0; o < outer; ++o) {
    for (std::size_t i = 0; i < ea * inner; ++i)
      ov[o * stride + i] = a.data()[o * ea * inner + i];
    for (std::size_t i = 0; i < eb * inner; ++i)
      ov[o * stride + ea * inner + i] = b.data()[o * eb * inner + i];
  }
  return out;
}

// ---- softmax --------------------------------------------------------------

/// Row-wise softmax over the last axis, max-subtracted for stability.
inline Tensor softmax_lastdim(const Tensor& x) {
  if (x.rank() < 1) throw DimensionError("softmax_lastdim: rank >= 1 required");
  const std::size_t n = x.dim(x.rank() - 1);
  const std::size_t rows = x.size() / n;
  Tensor out = Tensor::custom_op(x.shape(), {x}, [rows, n](Tensor out, std::vector<Tensor> p) {
    const auto& g = out.grad();
    const auto& y = out.data();
    if (!p[0].tracked()) return;
    auto& gx = p[0].mut_grad();
    for (std::size_t r = 0; r < rows; ++r) {
      const double* yr = y.data() + r * n;
      const double* gr = g.data() + r * n;
      double dot = 0.0;
      for (std::size_t j = 0; j < n; ++j) dot += yr[j] * gr[j];
      for (std::size_t j = 0; j < n; ++j) gx[r * n + j] += yr[j] * (gr[j] - dot);
    }
  });
  auto& ov = out.mut_data();
  const auto& xv = x.data();
  for (std::size_t r = 0; r < rows; ++r) {
    const double* xr = xv.data() + r * n;
    double mx = xr[0];
    for (std::size_t j = 1; j < n; ++j) mx = std::max(mx, xr[j]);
    double z = 0.0;
    for (std::size_t j = 0; j < n; ++j) z += std::exp(xr[j] - mx);
    for (std::size_t j = 0; j < n; ++j) ov[r * n + j] = std::exp(xr[j] - mx) / z;
  }
  return out;
}

}  // namespace menglan
