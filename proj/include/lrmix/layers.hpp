#pragma once

#include <cmath>
#include <cstdint>
#include <memory>
#include <random>
#include <string>
#include <vector>

#include "lrmix/autograd.hpp"
#include "lrmix/ops.hpp"

namespace lrmix {

using Rng = std::mt19937_64;

/// He-uniform initialisation for a weight with the given fan-in.
template <class T>
Tensor<T> he_uniform(Shape shape, std::size_t fan_in, Rng& rng) {
  const double bound = std::sqrt(6.0 / static_cast<double>(fan_in));
  std::uniform_real_distribution<double> dist(-bound, bound);
  Tensor<T> t(std::move(shape));
  for (auto& v : t.data()) v = static_cast<T>(dist(rng));
  return t;
}

// ---------------------------------------------------------------------------
// Batch-instance normalisation
//
//   y = (rho * xhat_bn + (1 - rho) * xhat_in) * gamma + beta
//
// xhat_bn normalises each channel over (N, H, W); xhat_in normalises each
// channel of each sample over (H, W). In inference mode the batch branch uses
// the running statistics instead of the batch moments.

template <class T>
struct BinRunningStats {
  Tensor<T>* mean = nullptr;
  Tensor<T>* var = nullptr;
  T momentum = T(0.1);
};

template <class T>
Var<T> batch_instance_norm(const Var<T>& x, const Var<T>& gamma, const Var<T>& beta, const Var<T>& rho, T eps,
                           bool training = true, BinRunningStats<T> running = {}) {
  detail::require_rank4(x.shape(), "batch_instance_norm");
  const std::size_t n = x.dim(0), c = x.dim(1), hw = x.dim(2) * x.dim(3);
  for (const auto* p : {&gamma, &beta, &rho})
    if (p->value().size() != c) throw ConfigError("batch_instance_norm: per-channel parameter length must equal C");
  if (!training && (!running.mean || !running.var))
    throw UsageError("batch_instance_norm: inference mode needs running statistics");

  const T* src = x.value().data().data();
  auto xb = std::make_shared<std::vector<T>>(x.value().size());  // batch-normalised
  auto xi = std::make_shared<std::vector<T>>(x.value().size());  // instance-normalised
  auto inv_b = std::make_shared<std::vector<T>>(c);
  auto inv_i = std::make_shared<std::vector<T>>(n * c);

  const std::size_t m = n * hw;
  for (std::size_t ch = 0; ch < c; ++ch) {
    T mu = 0, var = 0;
    if (training) {
      double acc = 0;
      for (std::size_t s = 0; s < n; ++s)
        for (std::size_t p = 0; p < hw; ++p) acc += src[(s * c + ch) * hw + p];
      mu = static_cast<T>(acc / static_cast<double>(m));
      double sq = 0;
      for (std::size_t s = 0; s < n; ++s)
        for (std::size_t p = 0; p < hw; ++p) {
          const double d = src[(s * c + ch) * hw + p] - mu;
          sq += d * d;
        }
      var = static_cast<T>(sq / static_cast<double>(m));
      if (running.mean && running.var) {
        const T unbiased = m > 1 ? var * static_cast<T>(m) / static_cast<T>(m - 1) : var;
        (*running.mean)[ch] = (T(1) - running.momentum) * (*running.mean)[ch] + running.momentum * mu;
        (*running.var)[ch] = (T(1) - running.momentum) * (*running.var)[ch] + running.momentum * unbiased;
      }
    } else {
      mu = (*running.mean)[ch];
      var = (*running.var)[ch];
    }
    const T inv = T(1) / std::sqrt(var + eps);
    (*inv_b)[ch] = inv;
    for (std::size_t s = 0; s < n; ++s)
      for (std::size_t p = 0; p < hw; ++p) {
        const std::size_t idx = (s * c + ch) * hw + p;
        (*xb)[idx] = (src[idx] - mu) * inv;
      }
  }
  for (std::size_t s = 0; s < n; ++s)
    for (std::size_t ch = 0; ch < c; ++ch) {
      const T* plane = src + (s * c + ch) * hw;
      double acc = 0;
      for (std::size_t p = 0; p < hw; ++p) acc += plane[p];
      const T mu = static_cast<T>(acc / static_cast<double>(hw));
      double sq = 0;
      for (std::size_t p = 0; p < hw; ++p) sq += (plane[p] - mu) * (plane[p] - mu);
      const T inv = T(1) / std::sqrt(static_cast<T>(sq / static_cast<double>(hw)) + eps);
      (*inv_i)[s * c + ch] = inv;
      for (std::size_t p = 0; p < hw; ++p) (*xi)[(s * c + ch) * hw + p] = (plane[p] - mu) * inv;
    }

  Tensor<T> out(x.shape());
  for (std::size_t s = 0; s < n; ++s)
    for (std::size_t ch = 0; ch < c; ++ch) {
      const T r = rho.value()[ch], g = gamma.value()[ch], b = beta.value()[ch];
      for (std::size_t p = 0; p < hw; ++p) {
        const std::size_t idx = (s * c + ch) * hw + p;
        out[idx] = (r * (*xb)[idx] + (T(1) - r) * (*xi)[idx]) * g + b;
      }
    }

  return make_result<T>(
      std::move(out), {x, gamma, beta, rho},
      [=](Node<T>& self) {
        auto& px = self.parents[0];
        auto& pg = self.parents[1];
        auto& pb = self.parents[2];
        auto& pr = self.parents[3];
        const T* dy = self.grad.data().data();
        std::vector<T> gb(self.grad.size()), gi(self.grad.size());
        for (std::size_t ch = 0; ch < c; ++ch) {
          const T r = pr->value[ch], g = pg->value[ch];
          T d_gamma = 0, d_beta = 0, d_rho = 0;
          for (std::size_t s = 0; s < n; ++s)
            for (std::size_t p = 0; p < hw; ++p) {
              const std::size_t idx = (s * c + ch) * hw + p;
              const T mix = r * (*xb)[idx] + (T(1) - r) * (*xi)[idx];
              d_gamma += dy[idx] * mix;
              d_beta += dy[idx];
              d_rho += dy[idx] * g * ((*xb)[idx] - (*xi)[idx]);
              gb[idx] = dy[idx] * g * r;
              gi[idx] = dy[idx] * g * (T(1) - r);
            }
          if (pg->requires_grad) pg->grad_buffer()[ch] += d_gamma;
          if (pb->requires_grad) pb->grad_buffer()[ch] += d_beta;
          if (pr->requires_grad) pr->grad_buffer()[ch] += d_rho;
        }
        if (!px->requires_grad) return;
        auto& dx = px->grad_buffer();
        for (std::size_t ch = 0; ch < c; ++ch) {
          const T inv = (*inv_b)[ch];
          if (training) {
            T sum_g = 0, sum_gx = 0;
            for (std::size_t s = 0; s < n; ++s)
              for (std::size_t p = 0; p < hw; ++p) {
                const std::size_t idx = (s * c + ch) * hw + p;
                sum_g += gb[idx];
                sum_gx += gb[idx] * (*xb)[idx];
              }
            const T mean_g = sum_g / static_cast<T>(m), mean_gx = sum_gx / static_cast<T>(m);
            for (std::size_t s = 0; s < n; ++s)
              for (std::size_t p = 0; p < hw; ++p) {
                const std::size_t idx = (s * c + ch) * hw + p;
                dx[idx] += inv * (gb[idx] - mean_g - (*xb)[idx] * mean_gx);
              }
          } else {
            for (std::size_t s = 0; s < n; ++s)
              for (std::size_t p = 0; p < hw; ++p) dx[(s * c + ch) * hw + p] += inv * gb[(s * c + ch) * hw + p];
          }
        }
        for (std::size_t s = 0; s < n; ++s)
          for (std::size_t ch = 0; ch < c; ++ch) {
            const std::size_t base = (s * c + ch) * hw;
            T sum_g = 0, sum_gx = 0;
            for (std::size_t p = 0; p < hw; ++p) {
              sum_g += gi[base + p];
              sum_gx += gi[base + p] * (*xi)[base + p];
            }
            const T mean_g = sum_g / static_cast<T>(hw), mean_gx = sum_gx / static_cast<T>(hw);
            const T inv = (*inv_i)[s * c + ch];
            for (std::size_t p = 0; p < hw; ++p)
              dx[base + p] += inv * (gi[base + p] - mean_g - (*xi)[base + p] * mean_gx);
          }
      },
      "batch_instance_norm");
}

// ---------------------------------------------------------------------------
// Spectral normalisation
//
// The weight is viewed as a rows x cols matrix with rows = shape[0]. Power
// iteration refines the persistent left singular vector `u`; the returned
// weight is W / sigma with sigma = u^T W v, differentiable in W for fixed u, v.

namespace detail {

template <class T>
T normalize_in_place(std::vector<T>& v) {
  T sq = 0;
  for (T x : v) sq += x * x;
  const T norm = std::sqrt(sq);
  const T inv = T(1) / std::max(norm, T(1e-12));
  for (T& x : v) x *= inv;
  return norm;
}

template <class T>
std::vector<T> mat_vec(const T* w, std::size_t rows, std::size_t cols, const std::vector<T>& v) {
  std::vector<T> out(rows, T(0));
  for (std::size_t r = 0; r < rows; ++r) {
    T acc = 0;
    for (std::size_t k = 0; k < cols; ++k) acc += w[r * cols + k] * v[k];
    out[r] = acc;
  }
  return out;
}

template <class T>
std::vector<T> mat_t_vec(const T* w, std::size_t rows, std::size_t cols, const std::vector<T>& u) {
  std::vector<T> out(cols, T(0));
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t k = 0; k < cols; ++k) out[k] += w[r * cols + k] * u[r];
  return out;
}

}  // namespace detail

/// W / (u^T W v) with u and v held constant.
template <class T>
Var<T> divide_by_sigma(const Var<T>& weight, std::vector<T> u, std::vector<T> v) {
  const std::size_t rows = weight.dim(0), cols = weight.value().size() / rows;
  if (u.size() != rows || v.size() != cols) throw ConfigError("divide_by_sigma: singular vector length mismatch");
  const T* w = weight.value().data().data();
  const auto wv = detail::mat_vec(w, rows, cols, v);
  T sigma = 0;
  for (std::size_t r = 0; r < rows; ++r) sigma += u[r] * wv[r];
  Tensor<T> out(weight.shape());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = w[i] / sigma;
  return make_result<T>(
      std::move(out), {weight},
      [=](Node<T>& self) {
        auto& p = self.parents[0];
        if (!p->requires_grad) return;
        T gw = 0;
        for (std::size_t i = 0; i < self.grad.size(); ++i) gw += self.grad[i] * p->value[i];
        const T coef = gw / (sigma * sigma);
        auto& g = p->grad_buffer();
        for (std::size_t r = 0; r < rows; ++r)
          for (std::size_t k = 0; k < cols; ++k) {
            const std::size_t idx = r * cols + k;
            g[idx] += self.grad[idx] / sigma - coef * u[r] * v[k];
          }
      },
      "spectral_normalize");
}

/// Spectrally normalised view of `weight`. Runs `iters` power iterations that
/// update `u_state` in place; with iters == 0 the stored u is used as is
/// (inference). A numerically zero weight is returned unchanged.
template <class T>
Var<T> spectral_normalize(const Var<T>& weight, Tensor<T>& u_state, int iters = 1) {
  const std::size_t rows = weight.dim(0), cols = weight.value().size() / rows;
  if (u_state.size() != rows) throw ConfigError("spectral_normalize: u has wrong length");
  const T* w = weight.value().data().data();
  std::vector<T> u(u_state.data().begin(), u_state.data().end());
  std::vector<T> v = detail::mat_t_vec(w, rows, cols, u);
  detail::normalize_in_place(v);
  for (int it = 0; it < iters; ++it) {
    if (it > 0) {
      v = detail::mat_t_vec(w, rows, cols, u);
      detail::normalize_in_place(v);
    }
    u = detail::mat_vec(w, rows, cols, v);
    detail::normalize_in_place(u);
  }
  std::copy(u.begin(), u.end(), u_state.data().begin());
  const auto wv = detail::mat_vec(w, rows, cols, v);
  T sigma = 0;
  for (std::size_t r = 0; r < rows; ++r) sigma += u[r] * wv[r];
  if (!(std::abs(sigma) > T(1e-12))) return weight;
  return divide_by_sigma(weight, std::move(u), std::move(v));
}

template <class T>
Tensor<T> random_unit_vector(std::size_t n, Rng& rng) {
  std::normal_distribution<double> dist(0.0, 1.0);
  std::vector<T> v(n);
  for (auto& x : v) x = static_cast<T>(dist(rng));
  detail::normalize_in_place(v);
  return Tensor<T>(Shape{n}, std::move(v));
}

// ---------------------------------------------------------------------------
// Layers

template <class T>
class Conv2d {
 public:
  Conv2d() = default;
  Conv2d(std::size_t in_channels, std::size_t out_channels, std::size_t kernel, std::size_t stride,
         std::size_t padding, bool spectral, Rng& rng)
      : weight(he_uniform<T>(Shape{out_channels, in_channels, kernel, kernel}, in_channels * kernel * kernel, rng)),
        bias(Tensor<T>(Shape{out_channels})),
        stride_(stride),
        padding_(padding),
        spectral_(spectral) {
    if (spectral_) u_ = random_unit_vector<T>(out_channels, rng);
  }

  Var<T> forward(const Var<T>& x, bool training) {
    return conv2d(x, effective_weight_var(training), bias.var(), stride_, padding_);
  }

  /// Weight as used by the forward pass, without touching the u state.
  Tensor<T> effective_weight() {
    if (!spectral_) return weight.value();
    Tensor<T> u = u_;
    NoGradGuard guard;
    return spectral_normalize(weight.var(), u, 0).value();
  }

  void collect(const std::string& prefix, NamedState<T>& state) {
    state.parameters.emplace_back(prefix + ".weight", &weight);
    state.parameters.emplace_back(prefix + ".bias", &bias);
    if (spectral_) state.buffers.emplace_back(prefix + ".sn_u", &u_);
  }

  bool spectral() const noexcept { return spectral_; }
  Tensor<T>& u_state() noexcept { return u_; }

  Parameter<T> weight;
  Parameter<T> bias;

 private:
  Var<T> effective_weight_var(bool training) {
    if (!spectral_) return weight.var();
    return spectral_normalize(weight.var(), u_, training ? 1 : 0);
  }

  std::size_t stride_ = 1;
  std::size_t padding_ = 0;
  bool spectral_ = false;
  Tensor<T> u_;
};

template <class T>
class ConvTranspose2d {
 public:
  ConvTranspose2d() = default;
  ConvTranspose2d(std::size_t in_channels, std::size_t out_channels, std::size_t kernel, std::size_t stride,
                  std::size_t padding, bool spectral, Rng& rng)
      : weight(he_uniform<T>(Shape{in_channels, out_channels, kernel, kernel}, in_channels * kernel * kernel / (stride * stride), rng)),
        bias(Tensor<T>(Shape{out_channels})),
        stride_(stride),
        padding_(padding),
        spectral_(spectral) {
    if (spectral_) u_ = random_unit_vector<T>(in_channels, rng);
  }

  Var<T> forward(const Var<T>& x, bool training) {
    Var<T> w = spectral_ ? spectral_normalize(weight.var(), u_, training ? 1 : 0) : weight.var();
    return conv_transpose2d(x, w, bias.var(), stride_, padding_);
  }

  Tensor<T> effective_weight() {
    if (!spectral_) return weight.value();
    Tensor<T> u = u_;
    NoGradGuard guard;
    return spectral_normalize(weight.var(), u, 0).value();
  }

  void collect(const std::string& prefix, NamedState<T>& state) {
    state.parameters.emplace_back(prefix + ".weight", &weight);
    state.parameters.emplace_back(prefix + ".bias", &bias);
    if (spectral_) state.buffers.emplace_back(prefix + ".sn_u", &u_);
  }

  Tensor<T>& u_state() noexcept { return u_; }

  Parameter<T> weight;
  Parameter<T> bias;

 private:
  std::size_t stride_ = 2;
  std::size_t padding_ = 1;
  bool spectral_ = false;
  Tensor<T> u_;
};

/// Learnable per-channel gate between batch and instance normalisation.
template <class T>
class BatchInstanceNorm {
 public:
  BatchInstanceNorm() = default;
  explicit BatchInstanceNorm(std::size_t channels, T eps = T(1e-5))
      : gamma(Tensor<T>(Shape{channels}, T(1))),
        beta(Tensor<T>(Shape{channels})),
        rho(Tensor<T>(Shape{channels}, T(0.5))),
        running_mean_(Shape{channels}),
        running_var_(Shape{channels}, T(1)),
        eps_(eps) {
    rho.set_clamp(T(0), T(1));
  }

  Var<T> forward(const Var<T>& x, bool training) {
    return batch_instance_norm(x, gamma.var(), beta.var(), rho.var(), eps_, training,
                               BinRunningStats<T>{&running_mean_, &running_var_, T(0.1)});
  }

  void collect(const std::string& prefix, NamedState<T>& state) {
    state.parameters.emplace_back(prefix + ".gamma", &gamma);
    state.parameters.emplace_back(prefix + ".beta", &beta);
    state.parameters.emplace_back(prefix + ".rho", &rho);
    state.buffers.emplace_back(prefix + ".running_mean", &running_mean_);
    state.buffers.emplace_back(prefix + ".running_var", &running_var_);
  }

  Parameter<T> gamma;
  Parameter<T> beta;
  Parameter<T> rho;

 private:
  Tensor<T> running_mean_;
  Tensor<T> running_var_;
  T eps_ = T(1e-5);
};

}  // namespace lrmix
