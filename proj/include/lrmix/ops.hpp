#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <memory>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "lrmix/autograd.hpp"
#include "lrmix/gemm.hpp"
#include "lrmix/tensor.hpp"

// Differentiable operations over Var<T>. Each op computes its forward value
// eagerly and records a closure that maps the output gradient back onto the
// inputs that require one.

namespace lrmix {

namespace detail {

inline void require_same_shape(const Shape& a, const Shape& b, const char* op) {
  if (a != b) throw UsageError(std::string(op) + ": shape mismatch " + shape_str(a) + " vs " + shape_str(b));
}

inline void require_rank4(const Shape& s, const char* op) {
  if (s.size() != 4) throw ConfigError(std::string(op) + ": expected N x C x H x W, got " + shape_str(s));
}

// Output columns [lo, hi) whose input column ow * stride + kj - pad lies inside [0, width).
inline std::pair<std::size_t, std::size_t> valid_span(std::size_t out_w, std::size_t width, std::size_t stride,
                                                      std::size_t kj, std::size_t pad) {
  const std::size_t lo = kj >= pad ? 0 : (pad - kj + stride - 1) / stride;
  if (width + pad <= kj) return {0, 0};
  const std::size_t hi = std::min(out_w, (width + pad - kj - 1) / stride + 1);
  return {std::min(lo, hi), hi};
}

// Unfolds one C x H x W sample into a (C*k*k) x (Ho*Wo) matrix.
template <class T>
void im2col(const T* img, std::size_t channels, std::size_t height, std::size_t width, std::size_t k,
            std::size_t stride, std::size_t pad, std::size_t out_h, std::size_t out_w, T* cols) {
  const auto h_in = static_cast<std::ptrdiff_t>(height);
  for (std::size_t c = 0; c < channels; ++c) {
    const T* plane = img + c * height * width;
    for (std::size_t ki = 0; ki < k; ++ki) {
      for (std::size_t kj = 0; kj < k; ++kj) {
        T* row = cols + ((c * k + ki) * k + kj) * out_h * out_w;
        const auto [lo, hi] = valid_span(out_w, width, stride, kj, pad);
        const auto shift = static_cast<std::ptrdiff_t>(kj) - static_cast<std::ptrdiff_t>(pad);
        for (std::size_t oh = 0; oh < out_h; ++oh) {
          const auto ih = static_cast<std::ptrdiff_t>(oh * stride + ki) - static_cast<std::ptrdiff_t>(pad);
          T* dst = row + oh * out_w;
          if (ih < 0 || ih >= h_in) {
            std::fill(dst, dst + out_w, T(0));
            continue;
          }
          const T* src = plane + ih * static_cast<std::ptrdiff_t>(width) + shift;
          std::fill(dst, dst + lo, T(0));
          if (stride == 1) {
            std::copy(src + lo, src + hi, dst + lo);
          } else {
            for (std::size_t ow = lo; ow < hi; ++ow) dst[ow] = src[ow * stride];
          }
          std::fill(dst + hi, dst + out_w, T(0));
        }
      }
    }
  }
}

// Adjoint of im2col: scatters-adds the columns back onto the image.
template <class T>
void col2im(const T* cols, std::size_t channels, std::size_t height, std::size_t width, std::size_t k,
            std::size_t stride, std::size_t pad, std::size_t out_h, std::size_t out_w, T* img) {
  const auto h_in = static_cast<std::ptrdiff_t>(height);
  for (std::size_t c = 0; c < channels; ++c) {
    T* plane = img + c * height * width;
    for (std::size_t ki = 0; ki < k; ++ki) {
      for (std::size_t kj = 0; kj < k; ++kj) {
        const T* row = cols + ((c * k + ki) * k + kj) * out_h * out_w;
        const auto [lo, hi] = valid_span(out_w, width, stride, kj, pad);
        const auto shift = static_cast<std::ptrdiff_t>(kj) - static_cast<std::ptrdiff_t>(pad);
        for (std::size_t oh = 0; oh < out_h; ++oh) {
          const auto ih = static_cast<std::ptrdiff_t>(oh * stride + ki) - static_cast<std::ptrdiff_t>(pad);
          if (ih < 0 || ih >= h_in) continue;
          const T* src = row + oh * out_w;
          T* dst = plane + ih * static_cast<std::ptrdiff_t>(width) + shift;
          if (stride == 1) {
            for (std::size_t ow = lo; ow < hi; ++ow) dst[ow] += src[ow];
          } else {
            for (std::size_t ow = lo; ow < hi; ++ow) dst[ow * stride] += src[ow];
          }
        }
      }
    }
  }
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Elementwise arithmetic and reductions

template <class T>
Var<T> add(const Var<T>& a, const Var<T>& b) {
  detail::require_same_shape(a.shape(), b.shape(), "add");
  Tensor<T> out(a.shape());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.value()[i] + b.value()[i];
  return make_result<T>(
      std::move(out), {a, b},
      [](Node<T>& self) {
        accumulate_grad(self.parents[0], self.grad);
        accumulate_grad(self.parents[1], self.grad);
      },
      "add");
}

template <class T>
Var<T> sub(const Var<T>& a, const Var<T>& b) {
  detail::require_same_shape(a.shape(), b.shape(), "sub");
  Tensor<T> out(a.shape());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.value()[i] - b.value()[i];
  return make_result<T>(
      std::move(out), {a, b},
      [](Node<T>& self) {
        accumulate_grad(self.parents[0], self.grad);
        if (self.parents[1]->requires_grad) {
          auto& g = self.parents[1]->grad_buffer();
          for (std::size_t i = 0; i < g.size(); ++i) g[i] -= self.grad[i];
        }
      },
      "sub");
}

template <class T>
Var<T> mul(const Var<T>& a, const Var<T>& b) {
  detail::require_same_shape(a.shape(), b.shape(), "mul");
  Tensor<T> out(a.shape());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.value()[i] * b.value()[i];
  return make_result<T>(
      std::move(out), {a, b},
      [](Node<T>& self) {
        auto& pa = self.parents[0];
        auto& pb = self.parents[1];
        if (pa->requires_grad) {
          auto& g = pa->grad_buffer();
          for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * pb->value[i];
        }
        if (pb->requires_grad) {
          auto& g = pb->grad_buffer();
          for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * pa->value[i];
        }
      },
      "mul");
}

template <class T>
Var<T> scale(const Var<T>& x, T factor) {
  Tensor<T> out(x.shape());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = x.value()[i] * factor;
  return make_result<T>(
      std::move(out), {x},
      [factor](Node<T>& self) {
        auto& p = self.parents[0];
        if (!p->requires_grad) return;
        auto& g = p->grad_buffer();
        for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * factor;
      },
      "scale");
}

template <class T>
Var<T> add_scalar(const Var<T>& x, T offset) {
  Tensor<T> out(x.shape());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = x.value()[i] + offset;
  return make_result<T>(
      std::move(out), {x}, [](Node<T>& self) { accumulate_grad(self.parents[0], self.grad); }, "add_scalar");
}

template <class T>
Var<T> square(const Var<T>& x) {
  Tensor<T> out(x.shape());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = x.value()[i] * x.value()[i];
  return make_result<T>(
      std::move(out), {x},
      [](Node<T>& self) {
        auto& p = self.parents[0];
        if (!p->requires_grad) return;
        auto& g = p->grad_buffer();
        for (std::size_t i = 0; i < g.size(); ++i) g[i] += T(2) * p->value[i] * self.grad[i];
      },
      "square");
}

// Subgradient at 0 is 0.
template <class T>
Var<T> abs(const Var<T>& x) {
  Tensor<T> out(x.shape());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = std::abs(x.value()[i]);
  return make_result<T>(
      std::move(out), {x},
      [](Node<T>& self) {
        auto& p = self.parents[0];
        if (!p->requires_grad) return;
        auto& g = p->grad_buffer();
        for (std::size_t i = 0; i < g.size(); ++i) {
          const T v = p->value[i];
          g[i] += v > T(0) ? self.grad[i] : (v < T(0) ? -self.grad[i] : T(0));
        }
      },
      "abs");
}

template <class T>
Var<T> sum(const Var<T>& x) {
  T acc = 0;
  for (T v : x.value().data()) acc += v;
  return make_result<T>(
      Tensor<T>::scalar(acc), {x},
      [](Node<T>& self) {
        auto& p = self.parents[0];
        if (!p->requires_grad) return;
        auto& g = p->grad_buffer();
        const T d = self.grad[0];
        for (auto& v : g.data()) v += d;
      },
      "sum");
}

template <class T>
Var<T> mean(const Var<T>& x) {
  T acc = 0;
  for (T v : x.value().data()) acc += v;
  const T inv = T(1) / static_cast<T>(x.value().size());
  return make_result<T>(
      Tensor<T>::scalar(acc * inv), {x},
      [inv](Node<T>& self) {
        auto& p = self.parents[0];
        if (!p->requires_grad) return;
        auto& g = p->grad_buffer();
        const T d = self.grad[0] * inv;
        for (auto& v : g.data()) v += d;
      },
      "mean");
}

// ---------------------------------------------------------------------------
// Activations

// Subgradient at exactly 0 is 0.
template <class T>
Var<T> relu(const Var<T>& x) {
  Tensor<T> out(x.shape());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = x.value()[i] > T(0) ? x.value()[i] : T(0);
  return make_result<T>(
      std::move(out), {x},
      [](Node<T>& self) {
        auto& p = self.parents[0];
        if (!p->requires_grad) return;
        auto& g = p->grad_buffer();
        for (std::size_t i = 0; i < g.size(); ++i)
          if (p->value[i] > T(0)) g[i] += self.grad[i];
      },
      "relu");
}

template <class T>
Var<T> leaky_relu(const Var<T>& x, T slope) {
  Tensor<T> out(x.shape());
  for (std::size_t i = 0; i < out.size(); ++i) {
    const T v = x.value()[i];
    out[i] = v > T(0) ? v : slope * v;
  }
  return make_result<T>(
      std::move(out), {x},
      [slope](Node<T>& self) {
        auto& p = self.parents[0];
        if (!p->requires_grad) return;
        auto& g = p->grad_buffer();
        for (std::size_t i = 0; i < g.size(); ++i) g[i] += p->value[i] > T(0) ? self.grad[i] : slope * self.grad[i];
      },
      "leaky_relu");
}

template <class T>
Var<T> tanh(const Var<T>& x) {
  Tensor<T> out(x.shape());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = std::tanh(x.value()[i]);
  return make_result<T>(
      std::move(out), {x},
      [](Node<T>& self) {
        auto& p = self.parents[0];
        if (!p->requires_grad) return;
        auto& g = p->grad_buffer();
        for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * (T(1) - self.value[i] * self.value[i]);
      },
      "tanh");
}

// ---------------------------------------------------------------------------
// Convolution

inline std::size_t conv_out_size(std::size_t in, std::size_t k, std::size_t stride, std::size_t pad) {
  if (in + 2 * pad < k) throw ConfigError("convolution window larger than padded input");
  return (in + 2 * pad - k) / stride + 1;
}

inline std::size_t conv_transpose_out_size(std::size_t in, std::size_t k, std::size_t stride, std::size_t pad) {
  const std::size_t full = (in - 1) * stride + k;
  if (full <= 2 * pad) throw ConfigError("transposed convolution padding too large");
  return full - 2 * pad;
}

/// input N x Cin x H x W, weight Cout x Cin x k x k, bias Cout (may be undefined).
template <class T>
Var<T> conv2d(const Var<T>& input, const Var<T>& weight, const Var<T>& bias, std::size_t stride,
              std::size_t padding) {
  detail::require_rank4(input.shape(), "conv2d");
  detail::require_rank4(weight.shape(), "conv2d weight");
  const std::size_t n = input.dim(0), cin = input.dim(1), h = input.dim(2), w = input.dim(3);
  const std::size_t cout = weight.dim(0), k = weight.dim(2);
  if (weight.dim(1) != cin)
    throw ConfigError("conv2d: input has " + std::to_string(cin) + " channels but weight expects " +
                      std::to_string(weight.dim(1)));
  if (weight.dim(3) != k) throw ConfigError("conv2d: only square kernels are supported");
  if (k < 1 || stride < 1) throw ConfigError("conv2d: kernel and stride must be >= 1");
  const bool has_bias = bias.defined();
  if (has_bias && bias.value().size() != cout) throw ConfigError("conv2d: bias length must equal Cout");
  const std::size_t oh = conv_out_size(h, k, stride, padding);
  const std::size_t ow = conv_out_size(w, k, stride, padding);
  const std::size_t kk = cin * k * k, positions = oh * ow;

  Tensor<T> out(Shape{n, cout, oh, ow});
  std::shared_ptr<T[]> cols(new T[n * kk * positions]);
  const T* wptr = weight.value().data().data();
  for (std::size_t b = 0; b < n; ++b) {
    T* col = cols.get() + b * kk * positions;
    detail::im2col(input.value().data().data() + b * cin * h * w, cin, h, w, k, stride, padding, oh, ow, col);
    T* dst = out.data().data() + b * cout * positions;
    detail::gemm<T>(false, false, cout, positions, kk, T(1), wptr, col, T(0), dst);
    if (has_bias) {
      for (std::size_t c = 0; c < cout; ++c) {
        const T bv = bias.value()[c];
        for (std::size_t p = 0; p < positions; ++p) dst[c * positions + p] += bv;
      }
    }
  }

  std::vector<Var<T>> inputs{input, weight};
  if (has_bias) inputs.push_back(bias);
  return make_result<T>(
      std::move(out), std::move(inputs),
      [=](Node<T>& self) {
        auto& px = self.parents[0];
        auto& pw = self.parents[1];
        const T* gout = self.grad.data().data();
        if (has_bias && self.parents[2]->requires_grad) {
          auto& gb = self.parents[2]->grad_buffer();
          for (std::size_t b = 0; b < n; ++b)
            for (std::size_t c = 0; c < cout; ++c) {
              T acc = 0;
              const T* g = gout + (b * cout + c) * positions;
              for (std::size_t p = 0; p < positions; ++p) acc += g[p];
              gb[c] += acc;
            }
        }
        if (pw->requires_grad) {
          T* gw = pw->grad_buffer().data().data();
          for (std::size_t b = 0; b < n; ++b)
            detail::gemm<T>(false, true, cout, kk, positions, T(1), gout + b * cout * positions,
                            cols.get() + b * kk * positions, T(1), gw);
        }
        if (px->requires_grad) {
          T* gx = px->grad_buffer().data().data();
          std::unique_ptr<T[]> dcol(new T[kk * positions]);
          for (std::size_t b = 0; b < n; ++b) {
            detail::gemm<T>(true, false, kk, positions, cout, T(1), pw->value.data().data(),
                            gout + b * cout * positions, T(0), dcol.get());
            detail::col2im(dcol.get(), cin, h, w, k, stride, padding, oh, ow, gx + b * cin * h * w);
          }
        }
      },
      "conv2d");
}

/// input N x Cin x H x W, weight Cin x Cout x k x k (the layout of the conv2d
/// whose adjoint this is), bias Cout (may be undefined).
template <class T>
Var<T> conv_transpose2d(const Var<T>& input, const Var<T>& weight, const Var<T>& bias, std::size_t stride,
                        std::size_t padding) {
  detail::require_rank4(input.shape(), "conv_transpose2d");
  detail::require_rank4(weight.shape(), "conv_transpose2d weight");
  const std::size_t n = input.dim(0), cin = input.dim(1), h = input.dim(2), w = input.dim(3);
  const std::size_t cout = weight.dim(1), k = weight.dim(2);
  if (weight.dim(0) != cin)
    throw ConfigError("conv_transpose2d: input has " + std::to_string(cin) + " channels but weight expects " +
                      std::to_string(weight.dim(0)));
  if (weight.dim(3) != k) throw ConfigError("conv_transpose2d: only square kernels are supported");
  if (stride < 1) throw ConfigError("conv_transpose2d: stride must be >= 1");
  const bool has_bias = bias.defined();
  if (has_bias && bias.value().size() != cout) throw ConfigError("conv_transpose2d: bias length must equal Cout");
  const std::size_t oh = conv_transpose_out_size(h, k, stride, padding);
  const std::size_t ow = conv_transpose_out_size(w, k, stride, padding);
  if (conv_out_size(oh, k, stride, padding) != h || conv_out_size(ow, k, stride, padding) != w)
    throw ConfigError("conv_transpose2d: geometry is not the adjoint of a conv2d");
  const std::size_t kk = cout * k * k, positions = h * w;

  Tensor<T> out(Shape{n, cout, oh, ow});
  std::unique_ptr<T[]> col(new T[kk * positions]);
  for (std::size_t b = 0; b < n; ++b) {
    detail::gemm<T>(true, false, kk, positions, cin, T(1), weight.value().data().data(),
                    input.value().data().data() + b * cin * positions, T(0), col.get());
    T* dst = out.data().data() + b * cout * oh * ow;
    detail::col2im(col.get(), cout, oh, ow, k, stride, padding, h, w, dst);
    if (has_bias)
      for (std::size_t c = 0; c < cout; ++c) {
        const T bv = bias.value()[c];
        for (std::size_t p = 0; p < oh * ow; ++p) dst[c * oh * ow + p] += bv;
      }
  }

  std::vector<Var<T>> inputs{input, weight};
  if (has_bias) inputs.push_back(bias);
  return make_result<T>(
      std::move(out), std::move(inputs),
      [=](Node<T>& self) {
        auto& px = self.parents[0];
        auto& pw = self.parents[1];
        const T* gout = self.grad.data().data();
        if (has_bias && self.parents[2]->requires_grad) {
          auto& gb = self.parents[2]->grad_buffer();
          for (std::size_t b = 0; b < n; ++b)
            for (std::size_t c = 0; c < cout; ++c) {
              T acc = 0;
              const T* g = gout + (b * cout + c) * oh * ow;
              for (std::size_t p = 0; p < oh * ow; ++p) acc += g[p];
              gb[c] += acc;
            }
        }
        if (!px->requires_grad && !pw->requires_grad) return;
        std::unique_ptr<T[]> dcol(new T[kk * positions]);
        for (std::size_t b = 0; b < n; ++b) {
          detail::im2col(gout + b * cout * oh * ow, cout, oh, ow, k, stride, padding, h, w, dcol.get());
          if (px->requires_grad)
            detail::gemm<T>(false, false, cin, positions, kk, T(1), pw->value.data().data(), dcol.get(), T(1),
                            px->grad_buffer().data().data() + b * cin * positions);
          if (pw->requires_grad)
            detail::gemm<T>(false, true, cin, kk, positions, T(1), px->value.data().data() + b * cin * positions,
                            dcol.get(), T(1), pw->grad_buffer().data().data());
        }
      },
      "conv_transpose2d");
}

// ---------------------------------------------------------------------------
// Shape manipulation

/// Concatenates two N x C x H x W tensors along channels.
template <class T>
Var<T> concat_channels(const Var<T>& a, const Var<T>& b) {
  detail::require_rank4(a.shape(), "concat_channels");
  detail::require_rank4(b.shape(), "concat_channels");
  if (a.dim(0) != b.dim(0) || a.dim(2) != b.dim(2) || a.dim(3) != b.dim(3))
    throw ConfigError("concat_channels: incompatible shapes " + shape_str(a.shape()) + " and " +
                      shape_str(b.shape()));
  const std::size_t n = a.dim(0), ca = a.dim(1), cb = b.dim(1), plane = a.dim(2) * a.dim(3);
  Tensor<T> out(Shape{n, ca + cb, a.dim(2), a.dim(3)});
  for (std::size_t s = 0; s < n; ++s) {
    std::copy_n(a.value().data().data() + s * ca * plane, ca * plane, out.data().data() + s * (ca + cb) * plane);
    std::copy_n(b.value().data().data() + s * cb * plane, cb * plane,
                out.data().data() + (s * (ca + cb) + ca) * plane);
  }
  return make_result<T>(
      std::move(out), {a, b},
      [=](Node<T>& self) {
        const T* g = self.grad.data().data();
        if (self.parents[0]->requires_grad) {
          T* ga = self.parents[0]->grad_buffer().data().data();
          for (std::size_t s = 0; s < n; ++s)
            for (std::size_t i = 0; i < ca * plane; ++i) ga[s * ca * plane + i] += g[s * (ca + cb) * plane + i];
        }
        if (self.parents[1]->requires_grad) {
          T* gb = self.parents[1]->grad_buffer().data().data();
          for (std::size_t s = 0; s < n; ++s)
            for (std::size_t i = 0; i < cb * plane; ++i)
              gb[s * cb * plane + i] += g[(s * (ca + cb) + ca) * plane + i];
        }
      },
      "concat_channels");
}

/// Channels [begin, end) of an N x C x H x W tensor.
template <class T>
Var<T> slice_channels(const Var<T>& x, std::size_t begin, std::size_t end) {
  detail::require_rank4(x.shape(), "slice_channels");
  const std::size_t n = x.dim(0), c = x.dim(1), plane = x.dim(2) * x.dim(3);
  if (begin >= end || end > c) throw ConfigError("slice_channels: invalid channel range");
  const std::size_t width = end - begin;
  Tensor<T> out(Shape{n, width, x.dim(2), x.dim(3)});
  for (std::size_t s = 0; s < n; ++s)
    std::copy_n(x.value().data().data() + (s * c + begin) * plane, width * plane,
                out.data().data() + s * width * plane);
  return make_result<T>(
      std::move(out), {x},
      [=](Node<T>& self) {
        auto& p = self.parents[0];
        if (!p->requires_grad) return;
        T* g = p->grad_buffer().data().data();
        for (std::size_t s = 0; s < n; ++s)
          for (std::size_t i = 0; i < width * plane; ++i)
            g[(s * c + begin) * plane + i] += self.grad[s * width * plane + i];
      },
      "slice_channels");
}

/// Repeats a batch-1 tensor `copies` times along the batch axis.
template <class T>
Var<T> broadcast_batch(const Var<T>& x, std::size_t copies) {
  if (x.shape().empty() || x.dim(0) != 1) throw UsageError("broadcast_batch expects a leading batch dimension of 1");
  Shape shape = x.shape();
  shape[0] = copies;
  const std::size_t block = x.value().size();
  Tensor<T> out(shape);
  for (std::size_t s = 0; s < copies; ++s) std::copy_n(x.value().data().data(), block, out.data().data() + s * block);
  return make_result<T>(
      std::move(out), {x},
      [=](Node<T>& self) {
        auto& p = self.parents[0];
        if (!p->requires_grad) return;
        auto& g = p->grad_buffer();
        for (std::size_t s = 0; s < copies; ++s)
          for (std::size_t i = 0; i < block; ++i) g[i] += self.grad[s * block + i];
      },
      "broadcast_batch");
}

/// Mean over the leading batch axis, keeping it as size 1.
template <class T>
Var<T> batch_mean(const Var<T>& x) {
  Shape shape = x.shape();
  const std::size_t n = shape.at(0);
  shape[0] = 1;
  const std::size_t block = x.value().size() / n;
  Tensor<T> out(shape);
  const T inv = T(1) / static_cast<T>(n);
  for (std::size_t s = 0; s < n; ++s)
    for (std::size_t i = 0; i < block; ++i) out[i] += x.value()[s * block + i];
  for (auto& v : out.data()) v *= inv;
  return make_result<T>(
      std::move(out), {x},
      [=](Node<T>& self) {
        auto& p = self.parents[0];
        if (!p->requires_grad) return;
        auto& g = p->grad_buffer();
        for (std::size_t s = 0; s < n; ++s)
          for (std::size_t i = 0; i < block; ++i) g[s * block + i] += self.grad[i] * inv;
      },
      "batch_mean");
}

/// Non-overlapping max pooling with a square window (stride == window).
template <class T>
Var<T> max_pool2d(const Var<T>& x, std::size_t window = 2) {
  detail::require_rank4(x.shape(), "max_pool2d");
  const std::size_t n = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
  if (h % window || w % window) throw ConfigError("max_pool2d: spatial dims must be divisible by the window");
  const std::size_t oh = h / window, ow = w / window;
  Tensor<T> out(Shape{n, c, oh, ow});
  auto argmax = std::make_shared<std::vector<std::uint32_t>>(out.size());
  const T* src = x.value().data().data();
  for (std::size_t plane = 0; plane < n * c; ++plane) {
    for (std::size_t i = 0; i < oh; ++i)
      for (std::size_t j = 0; j < ow; ++j) {
        std::size_t best = (plane * h + i * window) * w + j * window;
        for (std::size_t di = 0; di < window; ++di)
          for (std::size_t dj = 0; dj < window; ++dj) {
            const std::size_t idx = (plane * h + i * window + di) * w + j * window + dj;
            if (src[idx] > src[best]) best = idx;
          }
        const std::size_t o = (plane * oh + i) * ow + j;
        out[o] = src[best];
        (*argmax)[o] = static_cast<std::uint32_t>(best);
      }
  }
  return make_result<T>(
      std::move(out), {x},
      [argmax](Node<T>& self) {
        auto& p = self.parents[0];
        if (!p->requires_grad) return;
        auto& g = p->grad_buffer();
        for (std::size_t o = 0; o < argmax->size(); ++o) g[(*argmax)[o]] += self.grad[o];
      },
      "max_pool2d");
}

// ---------------------------------------------------------------------------
// Gram matrix

/// Per-sample Gram matrices: N x C x H x W -> N x C x C, each scaled by
/// 1 / (C * H * W).
template <class T>
Var<T> gram(const Var<T>& feature) {
  detail::require_rank4(feature.shape(), "gram");
  const std::size_t n = feature.dim(0), c = feature.dim(1), hw = feature.dim(2) * feature.dim(3);
  const T norm = T(1) / static_cast<T>(c * hw);
  Tensor<T> out(Shape{n, c, c});
  for (std::size_t s = 0; s < n; ++s) {
    const T* f = feature.value().data().data() + s * c * hw;
    detail::gemm<T>(false, true, c, c, hw, norm, f, f, T(0), out.data().data() + s * c * c);
  }
  return make_result<T>(
      std::move(out), {feature},
      [=](Node<T>& self) {
        auto& p = self.parents[0];
        if (!p->requires_grad) return;
        std::vector<T> sym(c * c);
        for (std::size_t s = 0; s < n; ++s) {
          const T* g = self.grad.data().data() + s * c * c;
          for (std::size_t i = 0; i < c; ++i)
            for (std::size_t j = 0; j < c; ++j) sym[i * c + j] = g[i * c + j] + g[j * c + i];
          detail::gemm<T>(false, false, c, hw, c, norm, sym.data(), p->value.data().data() + s * c * hw, T(1),
                          p->grad_buffer().data().data() + s * c * hw);
        }
      },
      "gram");
}

// ---------------------------------------------------------------------------
// Fused reductions used by the losses

/// mean(|a - b|)
template <class T>
Var<T> mean_abs_diff(const Var<T>& a, const Var<T>& b) {
  detail::require_same_shape(a.shape(), b.shape(), "mean_abs_diff");
  T acc = 0;
  for (std::size_t i = 0; i < a.value().size(); ++i) acc += std::abs(a.value()[i] - b.value()[i]);
  const T inv = T(1) / static_cast<T>(a.value().size());
  return make_result<T>(
      Tensor<T>::scalar(acc * inv), {a, b},
      [inv](Node<T>& self) {
        auto& pa = self.parents[0];
        auto& pb = self.parents[1];
        const T d = self.grad[0] * inv;
        for (std::size_t i = 0; i < pa->value.size(); ++i) {
          const T diff = pa->value[i] - pb->value[i];
          const T s = diff > T(0) ? d : (diff < T(0) ? -d : T(0));
          if (pa->requires_grad) pa->grad_buffer()[i] += s;
          if (pb->requires_grad) pb->grad_buffer()[i] -= s;
        }
      },
      "mean_abs_diff");
}

/// mean((a - b)^2)
template <class T>
Var<T> mean_squared_diff(const Var<T>& a, const Var<T>& b) {
  detail::require_same_shape(a.shape(), b.shape(), "mean_squared_diff");
  T acc = 0;
  for (std::size_t i = 0; i < a.value().size(); ++i) {
    const T d = a.value()[i] - b.value()[i];
    acc += d * d;
  }
  const T inv = T(1) / static_cast<T>(a.value().size());
  return make_result<T>(
      Tensor<T>::scalar(acc * inv), {a, b},
      [inv](Node<T>& self) {
        auto& pa = self.parents[0];
        auto& pb = self.parents[1];
        const T d = self.grad[0] * inv * T(2);
        for (std::size_t i = 0; i < pa->value.size(); ++i) {
          const T s = d * (pa->value[i] - pb->value[i]);
          if (pa->requires_grad) pa->grad_buffer()[i] += s;
          if (pb->requires_grad) pb->grad_buffer()[i] -= s;
        }
      },
      "mean_squared_diff");
}

/// sum((a - b)^2)
template <class T>
Var<T> sum_squared_diff(const Var<T>& a, const Var<T>& b) {
  detail::require_same_shape(a.shape(), b.shape(), "sum_squared_diff");
  T acc = 0;
  for (std::size_t i = 0; i < a.value().size(); ++i) {
    const T d = a.value()[i] - b.value()[i];
    acc += d * d;
  }
  return make_result<T>(
      Tensor<T>::scalar(acc), {a, b},
      [](Node<T>& self) {
        auto& pa = self.parents[0];
        auto& pb = self.parents[1];
        const T d = self.grad[0] * T(2);
        for (std::size_t i = 0; i < pa->value.size(); ++i) {
          const T s = d * (pa->value[i] - pb->value[i]);
          if (pa->requires_grad) pa->grad_buffer()[i] += s;
          if (pb->requires_grad) pb->grad_buffer()[i] -= s;
        }
      },
      "sum_squared_diff");
}

/// mean((x - target)^2) for a constant target.
template <class T>
Var<T> mean_squared_to(const Var<T>& x, T target) {
  T acc = 0;
  for (T v : x.value().data()) acc += (v - target) * (v - target);
  const T inv = T(1) / static_cast<T>(x.value().size());
  return make_result<T>(
      Tensor<T>::scalar(acc * inv), {x},
      [inv, target](Node<T>& self) {
        auto& p = self.parents[0];
        if (!p->requires_grad) return;
        auto& g = p->grad_buffer();
        const T d = self.grad[0] * inv * T(2);
        for (std::size_t i = 0; i < g.size(); ++i) g[i] += d * (p->value[i] - target);
      },
      "mean_squared_to");
}

/// Mean per-pixel softmax cross-entropy. logits N x K x H x W, labels N*H*W
/// class indices in [0, K).
template <class T>
Var<T> softmax_cross_entropy(const Var<T>& logits, std::span<const std::int32_t> labels) {
  detail::require_rank4(logits.shape(), "softmax_cross_entropy");
  const std::size_t n = logits.dim(0), k = logits.dim(1), hw = logits.dim(2) * logits.dim(3);
  if (labels.size() != n * hw) throw UsageError("softmax_cross_entropy: label count does not match logits");
  auto probs = std::make_shared<std::vector<T>>(logits.value().size());
  auto targets = std::make_shared<std::vector<std::int32_t>>(labels.begin(), labels.end());
  T loss = 0;
  const T* z = logits.value().data().data();
  for (std::size_t s = 0; s < n; ++s)
    for (std::size_t p = 0; p < hw; ++p) {
      const std::int32_t label = labels[s * hw + p];
      if (label < 0 || static_cast<std::size_t>(label) >= k)
        throw UsageError("softmax_cross_entropy: label " + std::to_string(label) + " out of range");
      T mx = -std::numeric_limits<T>::infinity();
      for (std::size_t c = 0; c < k; ++c) mx = std::max(mx, z[(s * k + c) * hw + p]);
      T denom = 0;
      for (std::size_t c = 0; c < k; ++c) {
        const T e = std::exp(z[(s * k + c) * hw + p] - mx);
        (*probs)[(s * k + c) * hw + p] = e;
        denom += e;
      }
      for (std::size_t c = 0; c < k; ++c) (*probs)[(s * k + c) * hw + p] /= denom;
      loss -= std::log(std::max((*probs)[(s * k + static_cast<std::size_t>(label)) * hw + p],
                                std::numeric_limits<T>::min()));
    }
  const T inv = T(1) / static_cast<T>(n * hw);
  return make_result<T>(
      Tensor<T>::scalar(loss * inv), {logits},
      [=](Node<T>& self) {
        auto& p = self.parents[0];
        if (!p->requires_grad) return;
        auto& g = p->grad_buffer();
        const T d = self.grad[0] * inv;
        for (std::size_t s = 0; s < n; ++s)
          for (std::size_t q = 0; q < hw; ++q) {
            const auto label = static_cast<std::size_t>((*targets)[s * hw + q]);
            for (std::size_t c = 0; c < k; ++c) {
              const std::size_t idx = (s * k + c) * hw + q;
              g[idx] += d * ((*probs)[idx] - (c == label ? T(1) : T(0)));
            }
          }
      },
      "softmax_cross_entropy");
}

}  // namespace lrmix
