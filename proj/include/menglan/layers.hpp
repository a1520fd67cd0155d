#pragma once

// Layer vocabulary: shared and position-specific (non-shared) 1-D
// convolution, max pooling, dense, batch normalization with separate
// train/inference statistics, inverted dropout, activations, and
// scaled-dot-product (multi-head) attention.
//
// Batched inputs carry shape [N x ch x W]; the 2-D [ch x W] entry points
// below wrap the batched kernels with N = 1. Convolutions use the
// cross-correlation convention (no kernel flip) and zero padding.

#include <algorithm>
#include <cmath>
#include <string>

#include "menglan/tensor.hpp"

namespace menglan {

enum class Mode { train, inference };

enum class Activation { relu, tanh, sigmoid, softsign };

inline Activation activation_from_string(const std::string& tag) {
  if (tag == "relu") return Activation::relu;
  if (tag == "tanh") return Activation::tanh;
  if (tag == "sigmoid") return Activation::sigmoid;
  if (tag == "softsign") return Activation::softsign;
  throw ConfigError("unknown activation tag '" + tag + "'");
}

inline std::string to_string(Activation a) {
  switch (a) {
    case Activation::relu: return "relu";
    case Activation::tanh: return "tanh";
    case Activation::sigmoid: return "sigmoid";
    case Activation::softsign: return "softsign";
  }
  return "?";
}

inline Tensor activation(Activation tag, const Tensor& x) {
  Tensor out = Tensor::custom_op(x.shape(), {x}, [tag](Tensor out, std::vector<Tensor> p) {
    const auto& g = out.grad();
    const auto& y = out.data();
    const auto& xv = p[0].data();
    if (!p[0].tracked()) return;
    auto& gx = p[0].mut_grad();
    switch (tag) {
      case Activation::relu:
        for (std::size_t i = 0; i < g.size(); ++i) gx[i] += xv[i] > 0.0 ? g[i] : 0.0;
        break;
      case Activation::tanh:
        for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i] * (1.0 - y[i] * y[i]);
        break;
      case Activation::sigmoid:
        for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i] * y[i] * (1.0 - y[i]);
        break;
      case Activation::softsign:
        for (std::size_t i = 0; i < g.size(); ++i) {
          double d = 1.0 + std::abs(xv[i]);
          gx[i] += g[i] / (d * d);
        }
        break;
    }
  });
  auto& ov = out.mut_data();
  const auto& xv = x.data();
  switch (tag) {
    case Activation::relu:
      for (std::size_t i = 0; i < ov.size(); ++i) ov[i] = std::max(0.0, xv[i]);
      break;
    case Activation::tanh:
      for (std::size_t i = 0; i < ov.size(); ++i) ov[i] = std::tanh(xv[i]);
      break;
    case Activation::sigmoid:
      for (std::size_t i = 0; i < ov.size(); ++i) ov[i] = 1.0 / (1.0 + std::exp(-xv[i]));
      break;
    case Activation::softsign:
      for (std::size_t i = 0; i < ov.size(); ++i) ov[i] = xv[i] / (1.0 + std::abs(xv[i]));
      break;
  }
  return out;
}

// ---- shared 1-D convolution -------------------------------------------------

struct SharedConv1dParams {
  Tensor kernels;  // [out_ch x in_ch x k]
  Tensor bias;     // [out_ch]
  std::size_t stride = 1;
  std::size_t padding = 0;

  std::size_t out_channels() const { return kernels.dim(0); }
  std::size_t in_channels() const { return kernels.dim(1); }
  std::size_t kernel_width() const { return kernels.dim(2); }
};

inline SharedConv1dParams make_shared_conv(std::size_t out_ch, std::size_t in_ch,
                                           std::size_t k, std::size_t stride,
                                           std::size_t padding, Rng& rng) {
  if (k < 1 || stride < 1) throw ConfigError("conv: k and stride must be >= 1");
  SharedConv1dParams p;
  p.kernels = Tensor(Shape{out_ch, in_ch, k});
  double bound = std::sqrt(1.0 / static_cast<double>(in_ch * k));
  for (auto& v : p.kernels.mut_data()) v = rng.uniform(-bound, bound);
  p.kernels.set_requires_grad();
  p.bias = Tensor(Shape{out_ch});
  p.bias.set_requires_grad();
  p.stride = stride;
  p.padding = padding;
  return p;
}

inline std::size_t conv_out_width(std::size_t W, std::size_t k, std::size_t stride,
                                  std::size_t padding) {
  if (W + 2 * padding < k)
    throw DimensionError("conv: input width " + std::to_string(W) + " (+2*" +
                         std::to_string(padding) + " pad) smaller than kernel " +
                         std::to_string(k));
  return (W + 2 * padding - k) / stride + 1;
}

/// Batched shared-kernel cross-correlation, x[N x in_ch x W] -> [N x out_ch x W'].
inline Tensor conv1d_shared_batched(const Tensor& x, const SharedConv1dParams& p) {
  if (x.rank() != 3 || x.dim(1) != p.in_channels())
    throw DimensionError("conv1d_shared: input " + shape_str(x.shape()) +
                         " does not match kernels " + shape_str(p.kernels.shape()));
  const std::size_t N = x.dim(0), C = x.dim(1), W = x.dim(2);
  const std::size_t OC = p.out_channels(), K = p.kernel_width();
  const std::size_t stride = p.stride, pad = p.padding;
  const std::size_t Wo = conv_out_width(W, K, stride, pad);
  Tensor out = Tensor::custom_op(
      Shape{N, OC, Wo}, {x, p.kernels, p.bias},
      [N, C, W, OC, K, Wo, stride, pad](Tensor out, std::vector<Tensor> p) {
        const auto& g = out.grad();
        const auto& xv = p[0].data();
        const auto& kv = p[1].data();
        for (std::size_t n = 0; n < N; ++n)
          for (std::size_t oc = 0; oc < OC; ++oc)
            for (std::size_t ow = 0; ow < Wo; ++ow) {
              double go = g[(n * OC + oc) * Wo + ow];
              if (go == 0.0) continue;
              if (p[2].tracked()) p[2].mut_grad()[oc] += go;
              for (std::size_t c = 0; c < C; ++c)
                for (std::size_t u = 0; u < K; ++u) {
                  std::ptrdiff_t iw =
                      static_cast<std::ptrdiff_t>(ow * stride + u) - static_cast<std::ptrdiff_t>(pad);
                  if (iw < 0 || iw >= static_cast<std::ptrdiff_t>(W)) continue;
                  if (p[1].tracked())
                    p[1].mut_grad()[(oc * C + c) * K + u] += go * xv[(n * C + c) * W + iw];
                  if (p[0].tracked())
                    p[0].mut_grad()[(n * C + c) * W + iw] += go * kv[(oc * C + c) * K + u];
                }
            }
      });
  auto& ov = out.mut_data();
  const auto& xv = x.data();
  const auto& kv = p.kernels.data();
  const auto& bv = p.bias.data();
  for (std::size_t n = 0; n < N; ++n)
    for (std::size_t oc = 0; oc < OC; ++oc)
      for (std::size_t ow = 0; ow < Wo; ++ow) {
        double acc = bv[oc];
        for (std::size_t c = 0; c < C; ++c)
          for (std::size_t u = 0; u < K; ++u) {
            std::ptrdiff_t iw =
                static_cast<std::ptrdiff_t>(ow * stride + u) - static_cast<std::ptrdiff_t>(pad);
            if (iw < 0 || iw >= static_cast<std::ptrdiff_t>(W)) continue;
            acc += xv[(n * C + c) * W + iw] * kv[(oc * C + c) * K + u];
          }
        ov[(n * OC + oc) * Wo + ow] = acc;
      }
  return out;
}

inline Tensor conv1d_shared(const Tensor& x, const SharedConv1dParams& p) {
  if (x.rank() != 2) throw DimensionError("conv1d_shared: [ch x W] input required");
  Tensor batched = reshape(x, Shape{1, x.dim(0), x.dim(1)});
  Tensor y = conv1d_shared_batched(batched, p);
  return reshape(y, Shape{y.dim(1), y.dim(2)});
}

// ---- local (non-shared) 1-D convolution -------------------------------------

/// Position-specific kernels: one [out_ch x in_ch x k] block and one
/// [out_ch] bias per output position along the time axis.
struct LocalKernelBank {
  Tensor kernels;  // [positions x out_ch x in_ch x k]
  Tensor bias;     // [positions x out_ch]
  std::size_t stride = 1;
  std::size_t padding = 0;

  std::size_t positions() const { return kernels.dim(0); }
  std::size_t out_channels() const { return kernels.dim(1); }
  std::size_t in_channels() const { return kernels.dim(2); }
  std::size_t kernel_width() const { return kernels.dim(3); }
};

inline LocalKernelBank make_local_bank(std::size_t positions, std::size_t out_ch,
                                       std::size_t in_ch, std::size_t k, std::size_t stride,
                                       std::size_t padding, Rng& rng) {
  if (k < 1 || stride < 1) throw ConfigError("local conv: k and stride must be >= 1");
  LocalKernelBank b;
  b.kernels = Tensor(Shape{positions, out_ch, in_ch, k});
  double bound = std::sqrt(1.0 / static_cast<double>(in_ch * k));
  for (auto& v : b.kernels.mut_data()) v = rng.uniform(-bound, bound);
  b.kernels.set_requires_grad();
  b.bias = Tensor(Shape{positions, out_ch});
  b.bias.set_requires_grad();
  b.stride = stride;
  b.padding = padding;
  return b;
}

inline Tensor conv1d_local_batched(const Tensor& x, const LocalKernelBank& bank) {
  if (x.rank() != 3 || x.dim(1) != bank.in_channels())
    throw DimensionError("conv1d_local: input " + shape_str(x.shape()) +
                         " does not match bank " + shape_str(bank.kernels.shape()));
  const std::size_t N = x.dim(0), C = x.dim(1), W = x.dim(2);
  const std::size_t OC = bank.out_channels(), K = bank.kernel_width();
  const std::size_t stride = bank.stride, pad = bank.padding;
  const std::size_t Wo = conv_out_width(W, K, stride, pad);
  if (bank.positions() != Wo)
    throw ConfigError("conv1d_local: bank holds " + std::to_string(bank.positions()) +
                      " positions but output width is " + std::to_string(Wo));
  Tensor out = Tensor::custom_op(
      Shape{N, OC, Wo}, {x, bank.kernels, bank.bias},
      [N, C, W, OC, K, Wo, stride, pad](Tensor out, std::vector<Tensor> p) {
        const auto& g = out.grad();
        const auto& xv = p[0].data();
        const auto& kv = p[1].data();
        for (std::size_t n = 0; n < N; ++n)
          for (std::size_t oc = 0; oc < OC; ++oc)
            for (std::size_t ow = 0; ow < Wo; ++ow) {
              double go = g[(n * OC + oc) * Wo + ow];
              if (go == 0.0) continue;
              if (p[2].tracked()) p[2].mut_grad()[ow * OC + oc] += go;
              for (std::size_t c = 0; c < C; ++c)
                for (std::size_t u = 0; u < K; ++u) {
                  std::ptrdiff_t iw =
                      static_cast<std::ptrdiff_t>(ow * stride + u) - static_cast<std::ptrdiff_t>(pad);
                  if (iw < 0 || iw >= static_cast<std::ptrdiff_t>(W)) continue;
                  std::size_t ki = ((ow * OC + oc) * C + c) * K + u;
                  if (p[1].tracked()) p[1].mut_grad()[ki] += go * xv[(n * C + c) * W + iw];
                  if (p[0].tracked()) p[0].mut_grad()[(n * C + c) * W + iw] += go * kv[ki];
                }
            }
      });
  auto& ov = out.mut_data();
  const auto& xv = x.data();
  const auto& kv = bank.kernels.data();
  const auto& bv = bank.bias.data();
  for (std::size_t n = 0; n < N; ++n)
    for (std::size_t oc = 0; oc < OC; ++oc)
      for (std::size_t ow = 0; ow < Wo; ++ow) {
        double acc = bv[ow * OC + oc];
        for (std::size_t c = 0; c < C; ++c)
          for (std::size_t u = 0; u < K; ++u) {
            std::ptrdiff_t iw =
                static_cast<std::ptrdiff_t>(ow * stride + u) - static_cast<std::ptrdiff_t>(pad);
            if (iw < 0 || iw >= static_cast<std::ptrdiff_t>(W)) continue;
            acc += xv[(n * C + c) * W + iw] * kv[((ow * OC + oc) * C + c) * K + u];
          }
        ov[(n * OC + oc) * Wo + ow] = acc;
      }
  return out;
}

inline Tensor conv1d_local(const Tensor& x, const LocalKernelBank& bank) {
  if (x.rank() != 2) throw DimensionError("conv1d_local: [ch x W] input required");
  Tensor batched = reshape(x, Shape{1, x.dim(0), x.dim(1)});
  Tensor y = conv1d_local_batched(batched, bank);
  return reshape(y, Shape{y.dim(1), y.dim(2)});
}

// ---- max pooling ------------------------------------------------------------

/// Per-channel window maxima; gradient routes to the first maximal index.
inline Tensor maxpool1d_batched(const Tensor& x, std::size_t window, std::size_t stride) {
  if (x.rank() != 3) throw DimensionError("maxpool1d: [N x ch x W] input required");
  if (window < 1 || stride < 1) throw ConfigError("maxpool1d: window and stride must be >= 1");
  const std::size_t N = x.dim(0), C = x.dim(1), W = x.dim(2);
  if (W < window)
    throw DimensionError("maxpool1d: width " + std::to_string(W) + " < window " +
                         std::to_string(window));
  const std::size_t Wo = (W - window) / stride + 1;
  auto argmax = std::make_shared<std::vector<std::size_t>>(N * C * Wo);
  Tensor out = Tensor::custom_op(Shape{N, C, Wo}, {x},
                                 [argmax](Tensor out, std::vector<Tensor> p) {
    const auto& g = out.grad();
    if (!p[0].tracked()) return;
    auto& gx = p[0].mut_grad();
    for (std::size_t i = 0; i < g.size(); ++i) gx[(*argmax)[i]] += g[i];
  });
  auto& ov = out.mut_data();
  const auto& xv = x.data();
  for (std::size_t n = 0; n < N; ++n)
    for (std::size_t c = 0; c < C; ++c)
      for (std::size_t ow = 0; ow < Wo; ++ow) {
        std::size_t base = (n * C + c) * W + ow * stride;
        std::size_t best = base;
        for (std::size_t u = 1; u < window; ++u)
          if (xv[base + u] > xv[best]) best = base + u;
        std::size_t oi = (n * C + c) * Wo + ow;
        ov[oi] = xv[best];
        (*argmax)[oi] = best;
      }
  return out;
}

inline Tensor maxpool1d(const Tensor& x, std::size_t window, std::size_t stride) {
  if (x.rank() != 2) throw DimensionError("maxpool1d: [ch x W] input required");
  Tensor batched = reshape(x, Shape{1, x.dim(0), x.dim(1)});
  Tensor y = maxpool1d_batched(batched, window, stride);
  return reshape(y, Shape{y.dim(1), y.dim(2)});
}

// ---- batch normalization ----------------------------------------------------

/// Per-channel batch normalization state. Train mode normalizes with the
/// batch statistics over N x W and folds them into the running estimates;
/// inference mode reads the running statistics and mutates nothing.
struct BatchNormState {
  Tensor gamma;         // [ch]
  Tensor beta;          // [ch]
  Tensor running_mean;  // [ch], plain buffers (never tracked)
  Tensor running_var;   // [ch]
  double momentum = 0.1;
  double epsilon = 1e-5;

  std::size_t channels() const { return gamma.dim(0); }
};

inline BatchNormState make_batchnorm(std::size_t ch, double momentum = 0.1,
                                     double epsilon = 1e-5) {
  if (momentum <= 0.0 || momentum >= 1.0) throw ConfigError("batchnorm: momentum in (0,1)");
  if (epsilon <= 0.0) throw ConfigError("batchnorm: epsilon > 0");
  BatchNormState s;
  s.gamma = Tensor(Shape{ch}, 1.0);
  s.gamma.set_requires_grad();
  s.beta = Tensor(Shape{ch});
  s.beta.set_requires_grad();
  s.running_mean = Tensor(Shape{ch}, 0.0);
  s.running_var = Tensor(Shape{ch}, 1.0);
  s.momentum = momentum;
  s.epsilon = epsilon;
  return s;
}

inline Tensor batchnorm(const Tensor& x, BatchNormState& s, Mode mode) {
  if (x.rank() != 3 || x.dim(1) != s.channels())
    throw DimensionError("batchnorm: input " + shape_str(x.shape()) + " vs " +
                         std::to_string(s.channels()) + " channels");
  const std::size_t N = x.dim(0), C = x.dim(1), W = x.dim(2);
  const std::size_t M = N * W;  // reduction size per channel
  const double eps = s.epsilon;

  if (mode == Mode::inference) {
    Tensor out = Tensor::custom_op(
        x.shape(), {x, s.gamma, s.beta},
        [N, C, W, eps, rm = s.running_mean, rv = s.running_var](Tensor out,
                                                                std::vector<Tensor> p) {
          const auto& g = out.grad();
          const auto& xv = p[0].data();
          for (std::size_t c = 0; c < C; ++c) {
            double inv = 1.0 / std::sqrt(rv[c] + eps);
            double gam = p[1][c];
            for (std::size_t n = 0; n < N; ++n)
              for (std::size_t w = 0; w < W; ++w) {
                std::size_t i = (n * C + c) * W + w;
                if (p[0].tracked()) p[0].mut_grad()[i] += g[i] * gam * inv;
                if (p[1].tracked()) p[1].mut_grad()[c] += g[i] * (xv[i] - rm[c]) * inv;
                if (p[2].tracked()) p[2].mut_grad()[c] += g[i];
              }
          }
        });
    auto& ov = out.mut_data();
    const auto& xv = x.data();
    for (std::size_t c = 0; c < C; ++c) {
      double inv = 1.0 / std::sqrt(s.running_var[c] + eps);
      for (std::size_t n = 0; n < N; ++n)
        for (std::size_t w = 0; w < W; ++w) {
          std::size_t i = (n * C + c) * W + w;
          ov[i] = (xv[i] - s.running_mean[c]) * inv * s.gamma[c] + s.beta[c];
        }
    }
    return out;
  }

  if (M < 2) throw ContractError("batchnorm: train mode needs N*W >= 2 per channel");

  // batch statistics (biased variance, matching the running-stat update)
  auto mu = std::make_shared<std::vector<double>>(C, 0.0);
  auto var = std::make_shared<std::vector<double>>(C, 0.0);
  auto xhat = std::make_shared<std::vector<double>>(x.size());
  const auto& xv = x.data();
  for (std::size_t c = 0; c < C; ++c) {
    double m = 0.0;
    for (std::size_t n = 0; n < N; ++n)
      for (std::size_t w = 0; w < W; ++w) m += xv[(n * C + c) * W + w];
    m /= static_cast<double>(M);
    double v = 0.0;
    for (std::size_t n = 0; n < N; ++n)
      for (std::size_t w = 0; w < W; ++w) {
        double d = xv[(n * C + c) * W + w] - m;
        v += d * d;
      }
    v /= static_cast<double>(M);
    (*mu)[c] = m;
    (*var)[c] = v;
  }

  Tensor out = Tensor::custom_op(
      x.shape(), {x, s.gamma, s.beta},
      [N, C, W, M, eps, mu, var, xhat](Tensor out, std::vector<Tensor> p) {
        const auto& g = out.grad();
        for (std::size_t c = 0; c < C; ++c) {
          double inv = 1.0 / std::sqrt((*var)[c] + eps);
          double gam = p[1][c];
          double sum_g = 0.0, sum_gx = 0.0;
          for (std::size_t n = 0; n < N; ++n)
            for (std::size_t w = 0; w < W; ++w) {
              std::size_t i = (n * C + c) * W + w;
              sum_g += g[i];
              sum_gx += g[i] * (*xhat)[i];
            }
          if (p[1].tracked()) p[1].mut_grad()[c] += sum_gx;
          if (p[2].tracked()) p[2].mut_grad()[c] += sum_g;
          if (p[0].tracked()) {
            auto& gx = p[0].mut_grad();
            double Md = static_cast<double>(M);
            for (std::size_t n = 0; n < N; ++n)
              for (std::size_t w = 0; w < W; ++w) {
                std::size_t i = (n * C + c) * W + w;
                gx[i] += gam * inv / Md * (Md * g[i] - sum_g - (*xhat)[i] * sum_gx);
              }
          }
        }
      });
  auto& ov = out.mut_data();
  for (std::size_t c = 0; c < C; ++c) {
    double inv = 1.0 / std::sqrt((*var)[c] + eps);
    for (std::size_t n = 0; n < N; ++n)
      for (std::size_t w = 0; w < W; ++w) {
        std::size_t i = (n * C + c) * W + w;
        double h = (xv[i] - (*mu)[c]) * inv;
        (*xhat)[i] = h;
        ov[i] = h * s.gamma[c] + s.beta[c];
      }
  }
  // running <- (1-m)*running + m*batch
  for (std::size_t c = 0; c < C; ++c) {
    s.running_mean.at(c) = (1.0 - s.momentum) * s.running_mean[c] + s.momentum * (*mu)[c];
    s.running_var.at(c) = (1.0 - s.momentum) * s.running_var[c] + s.momentum * (*var)[c];
  }
  return out;
}

// ---- dropout ----------------------------------------------------------------

/// Inverted dropout: train mode zeroes with probability p and scales
/// survivors by 1/(1-p); inference is the identity.
inline Tensor dropout(const Tensor& x, double rate, Rng& rng, Mode mode) {
  if (rate < 0.0 || rate > 1.0) throw ConfigError("dropout: rate in [0,1]");
  if (mode == Mode::inference || rate == 0.0) return x;
  if (rate == 1.0) throw ConfigError("dropout: rate 1.0 in train mode zeroes everything");
  auto mask = std::make_shared<std::vector<double>>(x.size());
  double keep = 1.0 - rate;
  for (auto& m : *mask) m = rng.uniform() < rate ? 0.0 : 1.0 / keep;
  Tensor out = Tensor::custom_op(x.shape(), {x}, [mask](Tensor out, std::vector<Tensor> p) {
    const auto& g = out.grad();
    if (!p[0].tracked()) return;
    auto& gx = p[0].mut_grad();
    for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i] * (*mask)[i];
  });
  auto& ov = out.mut_data();
  for (std::size_t i = 0; i < ov.size(); ++i) ov[i] = x[i] * (*mask)[i];
  return out;
}

// ---- dense ------------------------------------------------------------------

/// Adds a per-column bias to every row of x[rows x m].
inline Tensor add_bias(const Tensor& x, const Tensor& b) {
  if (x.rank() != 2 || b.rank() != 1 || x.dim(1) != b.dim(0))
    throw DimensionError("add_bias: " + shape_str(x.shape()) + " + " + shape_str(b.shape()));
  const std::size_t rows = x.dim(0), m = x.dim(1);
  Tensor out = Tensor::custom_op(x.shape(), {x, b}, [rows, m](Tensor out, std::vector<Tensor> p) {
    const auto& g = out.grad();
    if (p[0].tracked()) {
      auto& gx = p[0].mut_grad();
      for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i];
    }
    if (p[1].tracked()) {
      auto& gb = p[1].mut_grad();
      for (std::size_t r = 0; r < rows; ++r)
        for (std::size_t j = 0; j < m; ++j) gb[j] += g[r * m + j];
    }
  });
  auto& ov = out.mut_data();
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t j = 0; j < m; ++j) ov[r * m + j] = x[r * m + j] + b[j];
  return out;
}

struct DenseParams {
  Tensor weight;  // [n x m]
  Tensor bias;    // [m]
};

inline DenseParams make_dense(std::size_t n, std::size_t m, Rng& rng) {
  DenseParams d;
  d.weight = Tensor(Shape{n, m});
  double bound = std::sqrt(1.0 / static_cast<double>(n));
  for (auto& v : d.weight.mut_data()) v = rng.uniform(-bound, bound);
  d.weight.set_requires_grad();
  d.bias = Tensor(Shape{m});
  d.bias.set_requires_grad();
  return d;
}

/// x[rows x n] * W[n x m] + b, row-batched.
inline Tensor dense(const Tensor& x, const DenseParams& d) {
  Tensor x2 = x.rank() == 1 ? reshape(x, Shape{1, x.dim(0)}) : x;
  Tensor y = add_bias(matmul(x2, d.weight), d.bias);
  if (x.rank() == 1) return reshape(y, Shape{y.dim(1)});
  return y;
}

// ---- attention --------------------------------------------------------------

/// softmax(Q K^T / sqrt(d)) V for Q,K,V of shape [... x L x d]; leading axes
/// are treated as batch.
inline Tensor scaled_dot_attention(const Tensor& q, const Tensor& k, const Tensor& v) {
  if (q.shape() != k.shape() || q.shape() != v.shape())
    throw DimensionError("scaled_dot_attention: Q/K/V shapes must agree");
  const std::size_t d = q.dim(q.rank() - 1);
  bool was_2d = q.rank() == 2;
  Tensor q3 = was_2d ? reshape(q, Shape{1, q.dim(0), q.dim(1)}) : q;
  Tensor k3 = was_2d ? reshape(k, Shape{1, k.dim(0), k.dim(1)}) : k;
  Tensor v3 = was_2d ? reshape(v, Shape{1, v.dim(0), v.dim(1)}) : v;
  Tensor scores = scale(bmm(q3, transpose_last2(k3)), 1.0 / std::sqrt(static_cast<double>(d)));
  Tensor weights = softmax_lastdim(scores);
  Tensor out = bmm(weights, v3);
  if (was_2d) return reshape(out, Shape{out.dim(1), out.dim(2)});
  return out;
}

/// Packed projections for h heads over d_model; h * d_head == d_model.
struct AttentionHeadParams {
  Tensor wq;  // [d_model x d_model] (h head blocks side by side)
  Tensor wk;
  Tensor wv;
  Tensor wo;  // [d_model x d_model]
  std::size_t heads = 1;

  std::size_t d_model() const { return wq.dim(0); }
  std::size_t d_head() const { return d_model() / heads; }
};

inline AttentionHeadParams make_attention(std::size_t d_model, std::size_t heads, Rng& rng) {
  if (heads < 1 || d_model % heads != 0)
    throw ConfigError("attention: d_model " + std::to_string(d_model) +
                      " not divisible by heads " + std::to_string(heads));
  AttentionHeadParams a;
  double bound = std::sqrt(1.0 / static_cast<double>(d_model));
  for (Tensor* w : {&a.wq, &a.wk, &a.wv, &a.wo}) {
    *w = Tensor(Shape{d_model, d_model});
    for (auto& v : w->mut_data()) v = rng.uniform(-bound, bound);
    w->set_requires_grad();
  }
  a.heads = heads;
  return a;
}

/// Self-attention over the time axis: x[N x L x d_model] -> same shape.
inline Tensor multi_head_attention_batched(const Tensor& x, const AttentionHeadParams& a) {
  if (x.rank() != 3 || x.dim(2) != a.d_model())
    throw DimensionError("multi_head_attention: input " + shape_str(x.shape()) +
                         " vs d_model " + std::to_string(a.d_model()));
  const std::size_t N = x.dim(0), L = x.dim(1), dm = a.d_model();
  const std::size_t h = a.heads, dh = a.d_head();
  Tensor flat = reshape(x, Shape{N * L, dm});
  auto split_heads = [&](const Tensor& proj) {
    // [N*L x dm] -> [N x h x L x dh] -> flatten to [N*h x L x dh]
    Tensor t = swap_axes12(reshape(proj, Shape{N, L, h, dh}));
    return reshape(t, Shape{N * h, L, dh});
  };
  Tensor q = split_heads(matmul(flat, a.wq));
  Tensor k = split_heads(matmul(flat, a.wk));
  Tensor v = split_heads(matmul(flat, a.wv));
  Tensor heads_out = scaled_dot_attention(q, k, v);  // [N*h x L x dh]
  Tensor merged = swap_axes12(reshape(heads_out, Shape{N, h, L, dh}));  // [N x L x h x dh]
  Tensor concat_heads = reshape(merged, Shape{N * L, dm});
  return reshape(matmul(concat_heads, a.wo), Shape{N, L, dm});
}

inline Tensor multi_head_attention(const Tensor& x, const AttentionHeadParams& a) {
  if (x.rank() != 2) throw DimensionError("multi_head_attention: [L x d_model] input required");
  Tensor y = multi_head_attention_batched(reshape(x, Shape{1, x.dim(0), x.dim(1)}), a);
  return reshape(y, Shape{y.dim(1), y.dim(2)});
}

}  // namespace menglan
