#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <string>
#include <type_traits>
#include <vector>

#include "covidx/autodiff.hpp"
#include "covidx/rng.hpp"

// Differentiable layer primitives. Every op validates its arguments, checks
// the result for non-finite values and records a backward closure when any
// input needs a gradient. Convolution is cross-correlation (no kernel flip).

namespace covidx {

enum class Mode { train, infer };
enum class PoolKind { max, avg, global_avg };

inline constexpr double kBatchNormEpsilon = 1e-5;
inline constexpr double kBatchNormMomentum = 0.9;
inline constexpr double kProbabilityFloor = 1e-12;

inline std::size_t conv_out_extent(std::size_t in, std::size_t k, std::size_t stride,
                                   std::size_t pad) {
  return (in + 2 * pad - k) / stride + 1;
}

/// While alive, fingerprints the piecewise-linear branches taken on this
/// thread: relu signs and max-pool winners.
class BranchTrace {
 public:
  BranchTrace() : prev_(active()) { active() = this; }
  ~BranchTrace() { active() = prev_; }
  BranchTrace(const BranchTrace&) = delete;
  BranchTrace& operator=(const BranchTrace&) = delete;

  void mix(std::uint64_t v) { hash_ = (hash_ ^ v) * 0x100000001b3ULL; }
  std::uint64_t hash() const { return hash_; }
  static BranchTrace*& active() {
    thread_local BranchTrace* current = nullptr;
    return current;
  }

 private:
  BranchTrace* prev_;
  std::uint64_t hash_ = 0xcbf29ce484222325ULL;
};

namespace detail {

inline void require(bool cond, const std::string& msg) {
  if (!cond) fail(ErrorKind::data, msg);
}

inline void require_rank(const Shape& s, std::size_t rank, const char* op) {
  require(s.size() == rank, std::string(op) + ": expected rank " + std::to_string(rank) +
                                " input, got " + shape_str(s));
}

struct ConvGeometry {
  std::size_t batch, in_c, in_h, in_w, kh, kw, stride, pad, out_h, out_w;
};

inline ConvGeometry conv_geometry(const Shape& x, std::size_t kh, std::size_t kw,
                                  std::size_t stride, std::size_t pad, const char* op) {
  require(stride >= 1, std::string(op) + ": stride must be positive");
  require(x[2] + 2 * pad >= kh && x[3] + 2 * pad >= kw,
          std::string(op) + ": window " + std::to_string(kh) + "x" + std::to_string(kw) +
              " larger than padded input " + shape_str(x));
  return {x[0], x[1], x[2], x[3], kh, kw, stride, pad,
          conv_out_extent(x[2], kh, stride, pad), conv_out_extent(x[3], kw, stride, pad)};
}

// Unfolds one image [C,H,W] into col [C*kh*kw, out_h*out_w].
template <class T>
void im2col(const T* img, const ConvGeometry& g, T* col) {
  const std::size_t plane = g.out_h * g.out_w;
  for (std::size_t c = 0; c < g.in_c; ++c) {
    for (std::size_t ki = 0; ki < g.kh; ++ki) {
      for (std::size_t kj = 0; kj < g.kw; ++kj) {
        T* row = col + ((c * g.kh + ki) * g.kw + kj) * plane;
        for (std::size_t oh = 0; oh < g.out_h; ++oh) {
          const long ih = static_cast<long>(oh * g.stride + ki) - static_cast<long>(g.pad);
          T* dst = row + oh * g.out_w;
          if (ih < 0 || ih >= static_cast<long>(g.in_h)) {
            std::fill(dst, dst + g.out_w, T(0));
            continue;
          }
          const T* src = img + (c * g.in_h + static_cast<std::size_t>(ih)) * g.in_w;
          for (std::size_t ow = 0; ow < g.out_w; ++ow) {
            const long iw = static_cast<long>(ow * g.stride + kj) - static_cast<long>(g.pad);
            dst[ow] = (iw < 0 || iw >= static_cast<long>(g.in_w))
                          ? T(0)
                          : src[static_cast<std::size_t>(iw)];
          }
        }
      }
    }
  }
}

template <class T>
void col2im_add(const T* col, const ConvGeometry& g, T* img) {
  const std::size_t plane = g.out_h * g.out_w;
  for (std::size_t c = 0; c < g.in_c; ++c) {
    for (std::size_t ki = 0; ki < g.kh; ++ki) {
      for (std::size_t kj = 0; kj < g.kw; ++kj) {
        const T* row = col + ((c * g.kh + ki) * g.kw + kj) * plane;
        for (std::size_t oh = 0; oh < g.out_h; ++oh) {
          const long ih = static_cast<long>(oh * g.stride + ki) - static_cast<long>(g.pad);
          if (ih < 0 || ih >= static_cast<long>(g.in_h)) continue;
          T* dst = img + (c * g.in_h + static_cast<std::size_t>(ih)) * g.in_w;
          for (std::size_t ow = 0; ow < g.out_w; ++ow) {
            const long iw = static_cast<long>(ow * g.stride + kj) - static_cast<long>(g.pad);
            if (iw >= 0 && iw < static_cast<long>(g.in_w)) {
              dst[static_cast<std::size_t>(iw)] += row[oh * g.out_w + ow];
            }
          }
        }
      }
    }
  }
}

template <class T>
std::vector<std::shared_ptr<Node<T>>> nodes_of(std::initializer_list<const Var<T>*> vars) {
  std::vector<std::shared_ptr<Node<T>>> out;
  for (const Var<T>* v : vars) {
    if (v && v->defined()) out.push_back(v->node());
  }
  return out;
}

}  // namespace detail

/// 2-D cross-correlation with symmetric zero padding. `bias` may be an
/// undefined Var for bias-free convolutions.
template <class T>
Var<T> conv2d(const Var<T>& input, const Var<T>& kernels, const Var<T>& bias,
              std::size_t stride, std::size_t padding) {
  const Shape& xs = input.shape();
  const Shape& ws = kernels.shape();
  detail::require_rank(xs, 4, "conv2d");
  detail::require_rank(ws, 4, "conv2d kernels");
  detail::require(ws[1] == xs[1], "conv2d: channel mismatch, input has " +
                                      std::to_string(xs[1]) + " channels, kernels expect " +
                                      std::to_string(ws[1]));
  const std::size_t out_c = ws[0];
  if (bias.defined()) {
    detail::require(bias.shape() == Shape{out_c}, "conv2d: bias shape must be (Cout)");
  }
  const auto g = detail::conv_geometry(xs, ws[2], ws[3], stride, padding, "conv2d");
  const std::size_t plane = g.out_h * g.out_w;
  const std::size_t red = g.in_c * g.kh * g.kw;

  Tensor<T> out({g.batch, out_c, g.out_h, g.out_w});
  std::vector<T> col(red * plane);
  const T* w = kernels.value().data();
  for (std::size_t n = 0; n < g.batch; ++n) {
    detail::im2col(input.value().data() + n * g.in_c * g.in_h * g.in_w, g, col.data());
    for (std::size_t o = 0; o < out_c; ++o) {
      T* dst = out.data() + (n * out_c + o) * plane;
      const T b0 = bias.defined() ? bias.value()[o] : T(0);
      std::fill(dst, dst + plane, b0);
      const T* wrow = w + o * red;
      for (std::size_t r = 0; r < red; ++r) {
        const T wv = wrow[r];
        const T* src = col.data() + r * plane;
        for (std::size_t j = 0; j < plane; ++j) dst[j] += wv * src[j];
      }
    }
  }

  return detail::make_result<T>(
      "conv2d", std::move(out), detail::nodes_of<T>({&input, &kernels, &bias}),
      [g, out_c, plane, red, stride, padding, has_bias = bias.defined()](Node<T>& self) {
        Node<T>& x = *self.inputs[0];
        Node<T>& k = *self.inputs[1];
        Node<T>* b = has_bias ? self.inputs[2].get() : nullptr;
        const T* dout = self.grad.data();
        std::vector<T> col(red * plane);
        std::vector<T> dcol(red * plane);
        for (std::size_t n = 0; n < g.batch; ++n) {
          const T* dn = dout + n * out_c * plane;
          if (k.requires_grad) {
            detail::im2col(x.value.data() + n * g.in_c * g.in_h * g.in_w, g, col.data());
            T* dw = k.grad_buffer().data();
            for (std::size_t o = 0; o < out_c; ++o) {
              const T* drow = dn + o * plane;
              for (std::size_t r = 0; r < red; ++r) {
                const T* src = col.data() + r * plane;
                T acc = T(0);
                for (std::size_t j = 0; j < plane; ++j) acc += drow[j] * src[j];
                dw[o * red + r] += acc;
              }
            }
          }
          if (b && b->requires_grad) {
            T* db = b->grad_buffer().data();
            for (std::size_t o = 0; o < out_c; ++o) {
              const T* drow = dn + o * plane;
              T acc = T(0);
              for (std::size_t j = 0; j < plane; ++j) acc += drow[j];
              db[o] += acc;
            }
          }
          if (x.requires_grad) {
            std::fill(dcol.begin(), dcol.end(), T(0));
            const T* w = k.value.data();
            for (std::size_t o = 0; o < out_c; ++o) {
              const T* drow = dn + o * plane;
              for (std::size_t r = 0; r < red; ++r) {
                const T wv = w[o * red + r];
                T* dst = dcol.data() + r * plane;
                for (std::size_t j = 0; j < plane; ++j) dst[j] += wv * drow[j];
              }
            }
            detail::col2im_add(dcol.data(), g,
                               x.grad_buffer().data() + n * g.in_c * g.in_h * g.in_w);
          }
        }
      });
}

/// Per-channel spatial convolution; kernels are (C,1,k,k).
template <class T>
Var<T> depthwise_conv2d(const Var<T>& input, const Var<T>& kernels, const Var<T>& bias,
                        std::size_t stride, std::size_t padding) {
  const Shape& xs = input.shape();
  const Shape& ws = kernels.shape();
  detail::require_rank(xs, 4, "depthwise_conv2d");
  detail::require_rank(ws, 4, "depthwise_conv2d kernels");
  detail::require(ws[0] == xs[1] && ws[1] == 1,
                  "depthwise_conv2d: kernel count " + std::to_string(ws[0]) +
                      " does not match channel count " + std::to_string(xs[1]));
  if (bias.defined()) {
    detail::require(bias.shape() == Shape{xs[1]}, "depthwise_conv2d: bias shape must be (C)");
  }
  const auto g = detail::conv_geometry(xs, ws[2], ws[3], stride, padding, "depthwise_conv2d");

  // Visits every (output, input, kernel) triple of one channel plane.
  auto for_each_tap = [g](auto&& fn) {
    for (std::size_t n = 0; n < g.batch; ++n) {
      for (std::size_t c = 0; c < g.in_c; ++c) {
        for (std::size_t oh = 0; oh < g.out_h; ++oh) {
          for (std::size_t ow = 0; ow < g.out_w; ++ow) {
            const std::size_t oi = ((n * g.in_c + c) * g.out_h + oh) * g.out_w + ow;
            for (std::size_t ki = 0; ki < g.kh; ++ki) {
              const long ih = static_cast<long>(oh * g.stride + ki) - static_cast<long>(g.pad);
              if (ih < 0 || ih >= static_cast<long>(g.in_h)) continue;
              for (std::size_t kj = 0; kj < g.kw; ++kj) {
                const long iw = static_cast<long>(ow * g.stride + kj) - static_cast<long>(g.pad);
                if (iw < 0 || iw >= static_cast<long>(g.in_w)) continue;
                const std::size_t ii =
                    ((n * g.in_c + c) * g.in_h + static_cast<std::size_t>(ih)) * g.in_w +
                    static_cast<std::size_t>(iw);
                fn(oi, ii, (c * g.kh + ki) * g.kw + kj);
              }
            }
          }
        }
      }
    }
  };

  Tensor<T> out({g.batch, g.in_c, g.out_h, g.out_w});
  if (bias.defined()) {
    const std::size_t plane = g.out_h * g.out_w;
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = bias.value()[(i / plane) % g.in_c];
  }
  const T* x = input.value().data();
  const T* w = kernels.value().data();
  T* y = out.data();
  for_each_tap([&](std::size_t oi, std::size_t ii, std::size_t ki) { y[oi] += w[ki] * x[ii]; });

  return detail::make_result<T>(
      "depthwise_conv2d", std::move(out), detail::nodes_of<T>({&input, &kernels, &bias}),
      [g, for_each_tap, has_bias = bias.defined()](Node<T>& self) {
        Node<T>& xn = *self.inputs[0];
        Node<T>& kn = *self.inputs[1];
        const T* dy = self.grad.data();
        if (kn.requires_grad) {
          T* dw = kn.grad_buffer().data();
          const T* x = xn.value.data();
          for_each_tap([&](std::size_t oi, std::size_t ii, std::size_t ki) { dw[ki] += dy[oi] * x[ii]; });
        }
        if (xn.requires_grad) {
          T* dx = xn.grad_buffer().data();
          const T* w = kn.value.data();
          for_each_tap([&](std::size_t oi, std::size_t ii, std::size_t ki) { dx[ii] += dy[oi] * w[ki]; });
        }
        if (has_bias && self.inputs[2]->requires_grad) {
          T* db = self.inputs[2]->grad_buffer().data();
          const std::size_t plane = g.out_h * g.out_w;
          for (std::size_t i = 0; i < self.grad.size(); ++i) db[(i / plane) % g.in_c] += dy[i];
        }
      });
}

/// Max / average pooling over square windows, or global average pooling
/// to (B,C,1,1). Max pooling ignores padded positions; average pooling
/// counts them as zeros.
template <class T>
Var<T> pool2d(const Var<T>& input, PoolKind kind, std::size_t window = 2,
              std::size_t stride = 2, std::size_t padding = 0) {
  const Shape& xs = input.shape();
  detail::require_rank(xs, 4, "pool2d");
  const std::size_t B = xs[0], C = xs[1], H = xs[2], W = xs[3];

  if (kind == PoolKind::global_avg) {
    const std::size_t plane = H * W;
    Tensor<T> out({B, C, 1, 1});
    for (std::size_t i = 0; i < B * C; ++i) {
      T acc = T(0);
      for (std::size_t j = 0; j < plane; ++j) acc += input.value()[i * plane + j];
      out[i] = acc / static_cast<T>(plane);
    }
    return detail::make_result<T>("global_avg_pool", std::move(out),
                                  detail::nodes_of<T>({&input}), [plane](Node<T>& self) {
                                    T* dx = self.inputs[0]->grad_buffer().data();
                                    for (std::size_t i = 0; i < self.grad.size(); ++i) {
                                      const T share = self.grad[i] / static_cast<T>(plane);
                                      for (std::size_t j = 0; j < plane; ++j) dx[i * plane + j] += share;
                                    }
                                  });
  }

  detail::require(window >= 1 && stride >= 1, "pool2d: window and stride must be positive");
  detail::require(window <= H + 2 * padding && window <= W + 2 * padding,
                  "pool2d: window " + std::to_string(window) + " exceeds spatial extent " +
                      shape_str(xs));
  detail::require(padding < window, "pool2d: padding must be smaller than the window");
  const std::size_t Ho = conv_out_extent(H, window, stride, padding);
  const std::size_t Wo = conv_out_extent(W, window, stride, padding);
  Tensor<T> out({B, C, Ho, Wo});
  const T* x = input.value().data();

  if (kind == PoolKind::max) {
    std::vector<std::size_t> argmax(out.size());
    for (std::size_t bc = 0; bc < B * C; ++bc) {
      for (std::size_t oh = 0; oh < Ho; ++oh) {
        for (std::size_t ow = 0; ow < Wo; ++ow) {
          T best = -std::numeric_limits<T>::infinity();
          std::size_t best_i = 0;
          for (std::size_t ki = 0; ki < window; ++ki) {
            const long ih = static_cast<long>(oh * stride + ki) - static_cast<long>(padding);
            if (ih < 0 || ih >= static_cast<long>(H)) continue;
            for (std::size_t kj = 0; kj < window; ++kj) {
              const long iw = static_cast<long>(ow * stride + kj) - static_cast<long>(padding);
              if (iw < 0 || iw >= static_cast<long>(W)) continue;
              const std::size_t i = (bc * H + static_cast<std::size_t>(ih)) * W +
                                    static_cast<std::size_t>(iw);
              if (x[i] > best) {
                best = x[i];
                best_i = i;
              }
            }
          }
          const std::size_t oi = (bc * Ho + oh) * Wo + ow;
          out[oi] = best;
          argmax[oi] = best_i;
        }
      }
    }
    if (auto* trace = BranchTrace::active()) {
      for (std::size_t w : argmax) trace->mix(w);
    }
    return detail::make_result<T>("max_pool", std::move(out), detail::nodes_of<T>({&input}),
                                  [argmax = std::move(argmax)](Node<T>& self) {
                                    T* dx = self.inputs[0]->grad_buffer().data();
                                    for (std::size_t i = 0; i < argmax.size(); ++i) {
                                      dx[argmax[i]] += self.grad[i];
                                    }
                                  });
  }

  const T inv_area = T(1) / static_cast<T>(window * window);
  auto for_each_window = [=](auto&& fn) {
    for (std::size_t bc = 0; bc < B * C; ++bc) {
      for (std::size_t oh = 0; oh < Ho; ++oh) {
        for (std::size_t ow = 0; ow < Wo; ++ow) {
          const std::size_t oi = (bc * Ho + oh) * Wo + ow;
          for (std::size_t ki = 0; ki < window; ++ki) {
            const long ih = static_cast<long>(oh * stride + ki) - static_cast<long>(padding);
            if (ih < 0 || ih >= static_cast<long>(H)) continue;
            for (std::size_t kj = 0; kj < window; ++kj) {
              const long iw = static_cast<long>(ow * stride + kj) - static_cast<long>(padding);
              if (iw < 0 || iw >= static_cast<long>(W)) continue;
              fn(oi, (bc * H + static_cast<std::size_t>(ih)) * W + static_cast<std::size_t>(iw));
            }
          }
        }
      }
    }
  };
  for_each_window([&](std::size_t oi, std::size_t ii) { out[oi] += x[ii]; });
  for (std::size_t i = 0; i < out.size(); ++i) out[i] *= inv_area;
  return detail::make_result<T>(
      "avg_pool", std::move(out), detail::nodes_of<T>({&input}),
      [for_each_window, inv_area](Node<T>& self) {
        T* dx = self.inputs[0]->grad_buffer().data();
        const T* dy = self.grad.data();
        for_each_window([&](std::size_t oi, std::size_t ii) { dx[ii] += dy[oi] * inv_area; });
      });
}

/// Collapses every axis after the first: (B, ...) -> (B, N).
template <class T>
Var<T> flatten(const Var<T>& input) {
  const Shape& xs = input.shape();
  const std::size_t rest = shape_numel(xs) / xs[0];
  return detail::make_result<T>("flatten", input.value().reshaped({xs[0], rest}),
                                detail::nodes_of<T>({&input}), [](Node<T>& self) {
                                  Node<T>& x = *self.inputs[0];
                                  x.accumulate(self.grad.reshaped(x.value.shape()));
                                });
}

/// Affine map (B,N) x (N,M) + (M).
template <class T>
Var<T> dense(const Var<T>& input, const Var<T>& weight, const Var<T>& bias) {
  const Shape& xs = input.shape();
  const Shape& ws = weight.shape();
  detail::require_rank(xs, 2, "dense");
  detail::require_rank(ws, 2, "dense weight");
  detail::require(xs[1] == ws[0], "dense: inner extent mismatch " + shape_str(xs) + " x " +
                                      shape_str(ws));
  const std::size_t B = xs[0], N = xs[1], M = ws[1];
  if (bias.defined()) detail::require(bias.shape() == Shape{M}, "dense: bias shape must be (M)");
  Tensor<T> out({B, M});
  const T* x = input.value().data();
  const T* w = weight.value().data();
  for (std::size_t b = 0; b < B; ++b) {
    T* row = out.data() + b * M;
    if (bias.defined()) std::copy_n(bias.value().data(), M, row);
    for (std::size_t n = 0; n < N; ++n) {
      const T xv = x[b * N + n];
      for (std::size_t m = 0; m < M; ++m) row[m] += xv * w[n * M + m];
    }
  }
  return detail::make_result<T>(
      "dense", std::move(out), detail::nodes_of<T>({&input, &weight, &bias}),
      [B, N, M, has_bias = bias.defined()](Node<T>& self) {
        Node<T>& xn = *self.inputs[0];
        Node<T>& wn = *self.inputs[1];
        const T* dy = self.grad.data();
        if (xn.requires_grad) {
          T* dx = xn.grad_buffer().data();
          const T* w = wn.value.data();
          for (std::size_t b = 0; b < B; ++b) {
            for (std::size_t n = 0; n < N; ++n) {
              T acc = T(0);
              for (std::size_t m = 0; m < M; ++m) acc += dy[b * M + m] * w[n * M + m];
              dx[b * N + n] += acc;
            }
          }
        }
        if (wn.requires_grad) {
          T* dw = wn.grad_buffer().data();
          const T* x = xn.value.data();
          for (std::size_t n = 0; n < N; ++n) {
            for (std::size_t m = 0; m < M; ++m) {
              T acc = T(0);
              for (std::size_t b = 0; b < B; ++b) acc += x[b * N + n] * dy[b * M + m];
              dw[n * M + m] += acc;
            }
          }
        }
        if (has_bias && self.inputs[2]->requires_grad) {
          T* db = self.inputs[2]->grad_buffer().data();
          for (std::size_t m = 0; m < M; ++m) {
            T acc = T(0);
            for (std::size_t b = 0; b < B; ++b) acc += dy[b * M + m];
            db[m] += acc;
          }
        }
      });
}

/// Elementwise max(0, x); the subgradient at exactly 0 is 0.
template <class T>
Var<T> relu(const Var<T>& input) {
  Tensor<T> out = input.value();
  for (T& v : out.values()) v = v > T(0) ? v : T(0);
  if (auto* trace = BranchTrace::active()) {
    for (std::size_t i = 0; i < out.size(); ++i) trace->mix(out[i] > T(0) ? i + 1 : 0);
  }
  return detail::make_result<T>("relu", std::move(out), detail::nodes_of<T>({&input}),
                                [](Node<T>& self) {
                                  Node<T>& x = *self.inputs[0];
                                  T* dx = x.grad_buffer().data();
                                  for (std::size_t i = 0; i < self.grad.size(); ++i) {
                                    if (x.value[i] > T(0)) dx[i] += self.grad[i];
                                  }
                                });
}

/// Row-wise softmax over (B,K) with max subtraction.
template <class T>
Var<T> softmax(const Var<T>& input) {
  const Shape& xs = input.shape();
  detail::require_rank(xs, 2, "softmax");
  detail::require(xs[1] >= 2, "softmax: need at least two classes");
  detail::check_finite_or_throw(input.value().all_finite(), "softmax input");
  const std::size_t B = xs[0], K = xs[1];
  Tensor<T> out(xs);
  for (std::size_t b = 0; b < B; ++b) {
    const T* x = input.value().data() + b * K;
    T* y = out.data() + b * K;
    const T mx = *std::max_element(x, x + K);
    T total = T(0);
    for (std::size_t k = 0; k < K; ++k) {
      y[k] = std::exp(x[k] - mx);
      total += y[k];
    }
    for (std::size_t k = 0; k < K; ++k) y[k] /= total;
  }
  return detail::make_result<T>("softmax", std::move(out), detail::nodes_of<T>({&input}),
                                [B, K](Node<T>& self) {
                                  T* dx = self.inputs[0]->grad_buffer().data();
                                  for (std::size_t b = 0; b < B; ++b) {
                                    const T* y = self.value.data() + b * K;
                                    const T* dy = self.grad.data() + b * K;
                                    T dot = T(0);
                                    for (std::size_t k = 0; k < K; ++k) dot += dy[k] * y[k];
                                    for (std::size_t k = 0; k < K; ++k) {
                                      dx[b * K + k] += y[k] * (dy[k] - dot);
                                    }
                                  }
                                });
}

template <class T>
struct BatchNormStats {
  Tensor<T> mean;
  Tensor<T> var;

  explicit BatchNormStats(std::size_t channels = 1)
      : mean({channels}, T(0)), var({channels}, T(1)) {}
};

/// Per-channel normalisation of (B,C,H,W). Train mode uses biased batch
/// statistics and, when `stats` is given, folds them into the running
/// averages; infer mode normalises with the running averages.
template <class T>
Var<T> batch_norm(const Var<T>& input, const Var<T>& scale, const Var<T>& shift, Mode mode,
                  std::type_identity_t<BatchNormStats<T>>* stats) {
  const Shape& xs = input.shape();
  detail::require_rank(xs, 4, "batch_norm");
  const std::size_t B = xs[0], C = xs[1], plane = xs[2] * xs[3];
  const std::size_t count = B * plane;
  detail::require(scale.shape() == Shape{C} && shift.shape() == Shape{C},
                  "batch_norm: scale/shift must have shape (C)");
  if (mode == Mode::train) {
    detail::require(count >= 2, "batch_norm: train mode needs at least two values per channel");
  } else {
    detail::require(stats != nullptr, "batch_norm: infer mode needs running statistics");
  }

  const T eps = static_cast<T>(kBatchNormEpsilon);
  const T* x = input.value().data();
  std::vector<T> mean(C), inv_std(C);
  for (std::size_t c = 0; c < C; ++c) {
    if (mode == Mode::train) {
      T acc = T(0);
      for (std::size_t b = 0; b < B; ++b) {
        const T* p = x + (b * C + c) * plane;
        for (std::size_t j = 0; j < plane; ++j) acc += p[j];
      }
      const T mu = acc / static_cast<T>(count);
      T sq = T(0);
      for (std::size_t b = 0; b < B; ++b) {
        const T* p = x + (b * C + c) * plane;
        for (std::size_t j = 0; j < plane; ++j) sq += (p[j] - mu) * (p[j] - mu);
      }
      const T var = sq / static_cast<T>(count);
      mean[c] = mu;
      inv_std[c] = T(1) / std::sqrt(var + eps);
      if (stats) {
        const T m = static_cast<T>(kBatchNormMomentum);
        stats->mean[c] = m * stats->mean[c] + (T(1) - m) * mu;
        stats->var[c] = m * stats->var[c] + (T(1) - m) * var;
      }
    } else {
      mean[c] = stats->mean[c];
      inv_std[c] = T(1) / std::sqrt(stats->var[c] + eps);
    }
  }

  Tensor<T> xhat(xs);
  Tensor<T> out(xs);
  for (std::size_t b = 0; b < B; ++b) {
    for (std::size_t c = 0; c < C; ++c) {
      const std::size_t base = (b * C + c) * plane;
      const T g = scale.value()[c], s = shift.value()[c];
      for (std::size_t j = 0; j < plane; ++j) {
        xhat[base + j] = (x[base + j] - mean[c]) * inv_std[c];
        out[base + j] = g * xhat[base + j] + s;
      }
    }
  }

  return detail::make_result<T>(
      "batch_norm", std::move(out), detail::nodes_of<T>({&input, &scale, &shift}),
      [B, C, plane, count, mode, inv_std = std::move(inv_std),
       xhat = std::move(xhat)](Node<T>& self) {
        Node<T>& xn = *self.inputs[0];
        Node<T>& gn = *self.inputs[1];
        Node<T>& sn = *self.inputs[2];
        const T* dy = self.grad.data();
        for (std::size_t c = 0; c < C; ++c) {
          T sum_dy = T(0), sum_dy_xhat = T(0);
          for (std::size_t b = 0; b < B; ++b) {
            const std::size_t base = (b * C + c) * plane;
            for (std::size_t j = 0; j < plane; ++j) {
              sum_dy += dy[base + j];
              sum_dy_xhat += dy[base + j] * xhat[base + j];
            }
          }
          if (gn.requires_grad) gn.grad_buffer()[c] += sum_dy_xhat;
          if (sn.requires_grad) sn.grad_buffer()[c] += sum_dy;
          if (!xn.requires_grad) continue;
          T* dx = xn.grad_buffer().data();
          const T g = gn.value[c];
          const T n = static_cast<T>(count);
          for (std::size_t b = 0; b < B; ++b) {
            const std::size_t base = (b * C + c) * plane;
            for (std::size_t j = 0; j < plane; ++j) {
              if (mode == Mode::train) {
                dx[base + j] += g * inv_std[c] / n *
                                (n * dy[base + j] - sum_dy - xhat[base + j] * sum_dy_xhat);
              } else {
                dx[base + j] += g * inv_std[c] * dy[base + j];
              }
            }
          }
        }
      });
}

/// Stacks (B,Ci,H,W) inputs along the channel axis in argument order.
template <class T>
Var<T> concat_channels(const std::vector<Var<T>>& inputs) {
  detail::require(!inputs.empty(), "concat: no inputs");
  const Shape& first = inputs.front().shape();
  detail::require_rank(first, 4, "concat");
  std::size_t channels = 0;
  for (const auto& v : inputs) {
    const Shape& s = v.shape();
    detail::require(s.size() == 4 && s[0] == first[0] && s[2] == first[2] && s[3] == first[3],
                    "concat: incompatible shapes " + shape_str(first) + " and " + shape_str(s));
    channels += s[1];
  }
  const std::size_t B = first[0], plane = first[2] * first[3];
  Tensor<T> out({B, channels, first[2], first[3]});
  std::vector<std::size_t> offsets;
  std::size_t offset = 0;
  for (const auto& v : inputs) {
    offsets.push_back(offset);
    const std::size_t ci = v.shape()[1];
    for (std::size_t b = 0; b < B; ++b) {
      std::copy_n(v.value().data() + b * ci * plane, ci * plane,
                  out.data() + (b * channels + offset) * plane);
    }
    offset += ci;
  }
  std::vector<std::shared_ptr<Node<T>>> nodes;
  for (const auto& v : inputs) nodes.push_back(v.node());
  return detail::make_result<T>(
      "concat", std::move(out), std::move(nodes),
      [B, channels, plane, offsets = std::move(offsets)](Node<T>& self) {
        for (std::size_t i = 0; i < self.inputs.size(); ++i) {
          Node<T>& in = *self.inputs[i];
          if (!in.requires_grad) continue;
          const std::size_t ci = in.value.shape()[1];
          T* dx = in.grad_buffer().data();
          for (std::size_t b = 0; b < B; ++b) {
            const T* src = self.grad.data() + (b * channels + offsets[i]) * plane;
            T* dst = dx + b * ci * plane;
            for (std::size_t j = 0; j < ci * plane; ++j) dst[j] += src[j];
          }
        }
      });
}

/// Elementwise sum of two or more identically shaped tensors.
template <class T>
Var<T> add(const std::vector<Var<T>>& inputs) {
  detail::require(inputs.size() >= 2, "add: need at least two inputs");
  Tensor<T> out = inputs.front().value();
  for (std::size_t i = 1; i < inputs.size(); ++i) {
    detail::require(inputs[i].shape() == out.shape(),
                    "add: shape mismatch " + shape_str(out.shape()) + " vs " +
                        shape_str(inputs[i].shape()));
    out += inputs[i].value();
  }
  std::vector<std::shared_ptr<Node<T>>> nodes;
  for (const auto& v : inputs) nodes.push_back(v.node());
  return detail::make_result<T>("add", std::move(out), std::move(nodes), [](Node<T>& self) {
    for (auto& in : self.inputs) {
      if (in->requires_grad) in->accumulate(self.grad);
    }
  });
}

/// Inverted dropout; identity in infer mode or at rate 0.
template <class T>
Var<T> dropout(const Var<T>& input, double rate, Mode mode, Rng& rng) {
  detail::require(rate >= 0.0 && rate < 1.0, "dropout: rate must lie in [0,1)");
  if (mode == Mode::infer || rate == 0.0) return input;
  const T keep_scale = static_cast<T>(1.0 / (1.0 - rate));
  Tensor<T> mask(input.shape());
  for (T& m : mask.values()) m = rng.uniform() < rate ? T(0) : keep_scale;
  Tensor<T> out = input.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] *= mask[i];
  return detail::make_result<T>("dropout", std::move(out), detail::nodes_of<T>({&input}),
                                [mask = std::move(mask)](Node<T>& self) {
                                  T* dx = self.inputs[0]->grad_buffer().data();
                                  for (std::size_t i = 0; i < mask.size(); ++i) {
                                    dx[i] += self.grad[i] * mask[i];
                                  }
                                });
}

/// Mean over the batch of -ln(p_true), with p clamped below at 1e-12.
template <class T>
Var<T> cross_entropy(const Var<T>& probabilities, const Tensor<T>& targets) {
  const Shape& ps = probabilities.shape();
  detail::require_rank(ps, 2, "cross_entropy");
  detail::require(targets.shape() == ps, "cross_entropy: targets shape " +
                                             shape_str(targets.shape()) + " vs " + shape_str(ps));
  const std::size_t B = ps[0], K = ps[1];
  std::vector<std::size_t> truth(B);
  for (std::size_t b = 0; b < B; ++b) {
    std::size_t ones = 0;
    for (std::size_t k = 0; k < K; ++k) {
      const T t = targets[b * K + k];
      if (t == T(1)) {
        ++ones;
        truth[b] = k;
      } else if (t != T(0)) {
        ones = 2;
      }
    }
    detail::require(ones == 1, "cross_entropy: target row " + std::to_string(b) + " is not one-hot");
  }
  const T floor = static_cast<T>(kProbabilityFloor);
  T total = T(0);
  for (std::size_t b = 0; b < B; ++b) {
    total -= std::log(std::max(probabilities.value()[b * K + truth[b]], floor));
  }
  Tensor<T> out({1}, total / static_cast<T>(B));
  return detail::make_result<T>(
      "cross_entropy", std::move(out), detail::nodes_of<T>({&probabilities}),
      [B, K, floor, truth = std::move(truth)](Node<T>& self) {
        Node<T>& p = *self.inputs[0];
        T* dp = p.grad_buffer().data();
        const T g = self.grad[0] / static_cast<T>(B);
        for (std::size_t b = 0; b < B; ++b) {
          const T pv = p.value[b * K + truth[b]];
          if (pv > floor) dp[b * K + truth[b]] -= g / pv;
        }
      });
}

/// Sum of squared elements, as a (1) tensor.
template <class T>
Var<T> sum_squares(const Var<T>& input) {
  T acc = T(0);
  for (T v : input.value().values()) acc += v * v;
  return detail::make_result<T>("sum_squares", Tensor<T>({1}, acc), detail::nodes_of<T>({&input}),
                                [](Node<T>& self) {
                                  Node<T>& x = *self.inputs[0];
                                  T* dx = x.grad_buffer().data();
                                  for (std::size_t i = 0; i < x.value.size(); ++i) {
                                    dx[i] += T(2) * x.value[i] * self.grad[0];
                                  }
                                });
}

/// Inner product with a fixed weight tensor of the same shape, as a (1)
/// tensor. Reduces any op output to a scalar probe.
template <class T>
Var<T> inner(const Var<T>& input, const Tensor<T>& weights) {
  input.value().require_same_shape(weights, "inner");
  T acc = T(0);
  for (std::size_t i = 0; i < weights.size(); ++i) acc += input.value()[i] * weights[i];
  return detail::make_result<T>("inner", Tensor<T>({1}, acc), detail::nodes_of<T>({&input}),
                                [weights](Node<T>& self) {
                                  T* dx = self.inputs[0]->grad_buffer().data();
                                  for (std::size_t i = 0; i < weights.size(); ++i) {
                                    dx[i] += weights[i] * self.grad[0];
                                  }
                                });
}

}  // namespace covidx
