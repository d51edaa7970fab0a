#pragma once

#include <Eigen/Core>
#include <cmath>
#include <cstdint>
#include <limits>
#include <memory>
#include <string>
#include <vector>

#ifdef _OPENMP
#include <omp.h>
#endif

#include "cloak/rng.hpp"
#include "cloak/tensor.hpp"

namespace cloak {

template <typename T>
struct ParamRef {
  std::string name;
  TensorT<T>* value = nullptr;
  TensorT<T>* grad = nullptr;
};

/// Named array that must be serialized but is not learned (BatchNorm
/// running statistics). Parameters are state too; collect_state returns both.
template <typename T>
struct StateRef {
  std::string name;
  TensorT<T>* value = nullptr;
};

template <typename T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using MapRM = Eigen::Map<RowMat<T>>;
template <typename T>
using CMapRM = Eigen::Map<const RowMat<T>>;

/// Base class of every network building block.
///
/// Two evaluation paths exist on purpose: forward() records whatever the
/// layer needs for backward() and is single-writer, while infer() is const,
/// records nothing, and is safe to call concurrently from many threads.
template <typename T>
class Layer {
 public:
  explicit Layer(std::string name) : name_(std::move(name)) {}
  virtual ~Layer() = default;

  const std::string& name() const { return name_; }

  virtual TensorT<T> forward(const TensorT<T>& x) = 0;
  virtual TensorT<T> infer(const TensorT<T>& x) const = 0;
  virtual TensorT<T> backward(const TensorT<T>& dy, bool accumulate_param_grads) = 0;

  virtual void collect_params(const std::string& prefix, std::vector<ParamRef<T>>& out) {}
  virtual void collect_state(const std::string& prefix, std::vector<StateRef<T>>& out) {}
  virtual void set_training(bool training) { training_ = training; }
  virtual void init(Rng& rng) {}

  virtual Shape3 out_shape(const Shape3& in) const = 0;
  virtual std::int64_t param_count() const { return 0; }
  /// Multiply-accumulate count of one forward pass over a single image.
  virtual std::int64_t macs(const Shape3& in) const { return 0; }

 protected:
  std::string name_;
  bool training_ = true;
};

namespace detail {

/// Kaiming-uniform fill: zero-mean, variance scaled by fan-in, with the
/// leaky-slope correction. Draws through Rng for reproducibility.
template <typename T>
void kaiming_uniform(TensorT<T>& w, int fan_in, double slope, Rng& rng) {
  double gain2 = 2.0 / (1.0 + slope * slope);
  double bound = std::sqrt(3.0 * gain2 / static_cast<double>(fan_in));
  for (std::int64_t i = 0; i < w.numel(); ++i)
    w[i] = static_cast<T>(rng.uniform(-bound, bound));
}

inline int conv_out_dim(int in, int k, int stride, int pad) {
  return (in + 2 * pad - k) / stride + 1;
}

inline int omp_tid() {
#ifdef _OPENMP
  return omp_get_thread_num();
#else
  return 0;
#endif
}

inline int threads_for(std::int64_t work_items) {
#ifdef _OPENMP
  int t = omp_get_max_threads();
  if (work_items < t) t = static_cast<int>(work_items);
  return t > 0 ? t : 1;
#else
  (void)work_items;
  return 1;
#endif
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Dense 2-d convolution (im2col + GEMM)
// ---------------------------------------------------------------------------

template <typename T>
class Conv2d : public Layer<T> {
 public:
  Conv2d(std::string name, int in_ch, int out_ch, int ksize, int stride, int pad,
         bool bias, double init_slope = 0.01)
      : Layer<T>(std::move(name)),
        in_ch_(in_ch),
        out_ch_(out_ch),
        k_(ksize),
        stride_(stride),
        pad_(pad),
        has_bias_(bias),
        init_slope_(init_slope),
        w_(1, out_ch, in_ch * ksize * ksize, 1),
        gw_(1, out_ch, in_ch * ksize * ksize, 1) {
    if (bias) {
      b_ = TensorT<T>(1, out_ch, 1, 1);
      gb_ = TensorT<T>(1, out_ch, 1, 1);
    }
  }

  void init(Rng& rng) override {
    detail::kaiming_uniform(w_, in_ch_ * k_ * k_, init_slope_, rng);
    if (has_bias_) b_.fill(T(0));
  }

  Shape3 out_shape(const Shape3& in) const override {
    return {out_ch_, detail::conv_out_dim(in.h, k_, stride_, pad_),
            detail::conv_out_dim(in.w, k_, stride_, pad_)};
  }

  std::int64_t param_count() const override {
    return static_cast<std::int64_t>(out_ch_) * in_ch_ * k_ * k_ + (has_bias_ ? out_ch_ : 0);
  }

  std::int64_t macs(const Shape3& in) const override {
    Shape3 o = out_shape(in);
    return static_cast<std::int64_t>(k_) * k_ * in_ch_ * out_ch_ * o.h * o.w;
  }

  TensorT<T> infer(const TensorT<T>& x) const override { return compute(x); }

  TensorT<T> forward(const TensorT<T>& x) override {
    x_ = x;
    return compute(x);
  }

  TensorT<T> backward(const TensorT<T>& dy, bool accumulate) override {
    const TensorT<T>& x = x_;
    const int N = x.n(), oh = dy.h(), ow = dy.w();
    const int K = in_ch_ * k_ * k_, ohw = oh * ow, ihw = x.h() * x.w();
    TensorT<T> dx(N, in_ch_, x.h(), x.w());

    const int nthreads = detail::threads_for(N);
    std::vector<TensorT<T>> dw_part, db_part;
    if (accumulate) {
      dw_part.assign(nthreads, TensorT<T>::zeros_like(w_));
      if (has_bias_) db_part.assign(nthreads, TensorT<T>::zeros_like(b_));
    }

#pragma omp parallel for schedule(static) num_threads(nthreads)
    for (int n = 0; n < N; ++n) {
      const int tid = detail::omp_tid();
      std::vector<T> col;
      const T* xin = x.data() + static_cast<std::int64_t>(n) * in_ch_ * ihw;
      const T* colp = xin;
      if (!is_pointwise()) {
        col.resize(static_cast<std::size_t>(K) * ohw);
        im2col(xin, x.h(), x.w(), oh, ow, col.data());
        colp = col.data();
      }
      CMapRM<T> dym(dy.data() + static_cast<std::int64_t>(n) * out_ch_ * ohw, out_ch_, ohw);
      if (accumulate) {
        MapRM<T> dwm(dw_part[tid].data(), out_ch_, K);
        dwm.noalias() += dym * CMapRM<T>(colp, K, ohw).transpose();
        if (has_bias_) {
          for (int oc = 0; oc < out_ch_; ++oc) db_part[tid][oc] += dym.row(oc).sum();
        }
      }
      // gradient w.r.t. input
      T* dxp = dx.data() + static_cast<std::int64_t>(n) * in_ch_ * ihw;
      if (is_pointwise()) {
        MapRM<T> dxm(dxp, K, ihw);
        dxm.noalias() = CMapRM<T>(w_.data(), out_ch_, K).transpose() * dym;
      } else {
        std::vector<T> dcol(static_cast<std::size_t>(K) * ohw);
        MapRM<T> dcolm(dcol.data(), K, ohw);
        dcolm.noalias() = CMapRM<T>(w_.data(), out_ch_, K).transpose() * dym;
        col2im(dcol.data(), x.h(), x.w(), oh, ow, dxp);
      }
    }

    if (accumulate) {
      for (int t = 0; t < nthreads; ++t)
        for (std::int64_t i = 0; i < gw_.numel(); ++i) gw_[i] += dw_part[t][i];
      if (has_bias_)
        for (int t = 0; t < nthreads; ++t)
          for (std::int64_t i = 0; i < gb_.numel(); ++i) gb_[i] += db_part[t][i];
    }
    return dx;
  }

  void collect_params(const std::string& prefix, std::vector<ParamRef<T>>& out) override {
    out.push_back({prefix + this->name_ + ".weight", &w_, &gw_});
    if (has_bias_) out.push_back({prefix + this->name_ + ".bias", &b_, &gb_});
  }

  void collect_state(const std::string& prefix, std::vector<StateRef<T>>& out) override {
    out.push_back({prefix + this->name_ + ".weight", &w_});
    if (has_bias_) out.push_back({prefix + this->name_ + ".bias", &b_});
  }

 private:
  bool is_pointwise() const { return k_ == 1 && stride_ == 1 && pad_ == 0; }

  TensorT<T> compute(const TensorT<T>& x) const {
    if (x.c() != in_ch_)
      throw ShapeError(this->name_ + ": expected " + std::to_string(in_ch_) +
                       " input channels, got " + std::to_string(x.c()));
    const int N = x.n();
    const int oh = detail::conv_out_dim(x.h(), k_, stride_, pad_);
    const int ow = detail::conv_out_dim(x.w(), k_, stride_, pad_);
    const int K = in_ch_ * k_ * k_, ohw = oh * ow, ihw = x.h() * x.w();
    TensorT<T> y(N, out_ch_, oh, ow);

#pragma omp parallel for schedule(static) num_threads(detail::threads_for(N))
    for (int n = 0; n < N; ++n) {
      std::vector<T> col;
      const T* xin = x.data() + static_cast<std::int64_t>(n) * in_ch_ * ihw;
      const T* colp = xin;
      if (!is_pointwise()) {
        col.resize(static_cast<std::size_t>(K) * ohw);
        im2col(xin, x.h(), x.w(), oh, ow, col.data());
        colp = col.data();
      }
      MapRM<T> ym(y.data() + static_cast<std::int64_t>(n) * out_ch_ * ohw, out_ch_, ohw);
      ym.noalias() = CMapRM<T>(w_.data(), out_ch_, K) * CMapRM<T>(colp, K, ohw);
      if (has_bias_) {
        for (int oc = 0; oc < out_ch_; ++oc) ym.row(oc).array() += b_[oc];
      }
    }
    return y;
  }

  void im2col(const T* x, int ih, int iw, int oh, int ow, T* col) const {
    for (int ic = 0; ic < in_ch_; ++ic) {
      for (int ky = 0; ky < k_; ++ky) {
        for (int kx = 0; kx < k_; ++kx) {
          T* dst = col + (static_cast<std::int64_t>(ic) * k_ * k_ + ky * k_ + kx) *
                             (static_cast<std::int64_t>(oh) * ow);
          const T* src = x + static_cast<std::int64_t>(ic) * ih * iw;
          for (int oy = 0; oy < oh; ++oy) {
            const int iy = oy * stride_ - pad_ + ky;
            if (iy < 0 || iy >= ih) {
              for (int ox = 0; ox < ow; ++ox) *dst++ = T(0);
              continue;
            }
            for (int ox = 0; ox < ow; ++ox) {
              const int ix = ox * stride_ - pad_ + kx;
              *dst++ = (ix >= 0 && ix < iw) ? src[iy * iw + ix] : T(0);
            }
          }
        }
      }
    }
  }

  void col2im(const T* col, int ih, int iw, int oh, int ow, T* dx) const {
    std::fill(dx, dx + static_cast<std::int64_t>(in_ch_) * ih * iw, T(0));
    for (int ic = 0; ic < in_ch_; ++ic) {
      for (int ky = 0; ky < k_; ++ky) {
        for (int kx = 0; kx < k_; ++kx) {
          const T* src = col + (static_cast<std::int64_t>(ic) * k_ * k_ + ky * k_ + kx) *
                                   (static_cast<std::int64_t>(oh) * ow);
          T* dst = dx + static_cast<std::int64_t>(ic) * ih * iw;
          for (int oy = 0; oy < oh; ++oy) {
            const int iy = oy * stride_ - pad_ + ky;
            if (iy < 0 || iy >= ih) {
              src += ow;
              continue;
            }
            for (int ox = 0; ox < ow; ++ox) {
              const int ix = ox * stride_ - pad_ + kx;
              if (ix >= 0 && ix < iw) dst[iy * iw + ix] += src[ox];
            }
            src += ow;
          }
        }
      }
    }
  }

  int in_ch_, out_ch_, k_, stride_, pad_;
  bool has_bias_;
  double init_slope_;
  TensorT<T> w_, gw_, b_, gb_;
  TensorT<T> x_;
};

// ---------------------------------------------------------------------------
// Depthwise 3x3 convolution (one filter per channel, direct loops)
// ---------------------------------------------------------------------------

template <typename T>
class DepthwiseConv2d : public Layer<T> {
 public:
  DepthwiseConv2d(std::string name, int channels, int ksize, int stride, int pad,
                  bool bias, double init_slope = 0.01)
      : Layer<T>(std::move(name)),
        ch_(channels),
        k_(ksize),
        stride_(stride),
        pad_(pad),
        has_bias_(bias),
        init_slope_(init_slope),
        w_(1, channels, ksize, ksize),
        gw_(1, channels, ksize, ksize) {
    if (bias) {
      b_ = TensorT<T>(1, channels, 1, 1);
      gb_ = TensorT<T>(1, channels, 1, 1);
    }
  }

  void init(Rng& rng) override {
    detail::kaiming_uniform(w_, k_ * k_, init_slope_, rng);
    if (has_bias_) b_.fill(T(0));
  }

  Shape3 out_shape(const Shape3& in) const override {
    return {ch_, detail::conv_out_dim(in.h, k_, stride_, pad_),
            detail::conv_out_dim(in.w, k_, stride_, pad_)};
  }

  std::int64_t param_count() const override {
    return static_cast<std::int64_t>(ch_) * k_ * k_ + (has_bias_ ? ch_ : 0);
  }

  std::int64_t macs(const Shape3& in) const override {
    Shape3 o = out_shape(in);
    return static_cast<std::int64_t>(k_) * k_ * ch_ * o.h * o.w;
  }

  TensorT<T> infer(const TensorT<T>& x) const override { return compute(x); }

  TensorT<T> forward(const TensorT<T>& x) override {
    x_ = x;
    return compute(x);
  }

  TensorT<T> backward(const TensorT<T>& dy, bool accumulate) override {
    const TensorT<T>& x = x_;
    const int N = x.n(), ih = x.h(), iw = x.w(), oh = dy.h(), ow = dy.w();
    TensorT<T> dx(N, ch_, ih, iw);
    const int nthreads = detail::threads_for(static_cast<std::int64_t>(N) * ch_);
    std::vector<TensorT<T>> dw_part, db_part;
    if (accumulate) {
      dw_part.assign(nthreads, TensorT<T>::zeros_like(w_));
      if (has_bias_) db_part.assign(nthreads, TensorT<T>(1, ch_, 1, 1));
    }

#pragma omp parallel for schedule(static) collapse(2) num_threads(nthreads)
    for (int n = 0; n < N; ++n) {
      for (int c = 0; c < ch_; ++c) {
        const int tid = detail::omp_tid();
        const T* xs = &x.at(n, c, 0, 0);
        const T* dys = &dy.at(n, c, 0, 0);
        T* dxs = &dx.at(n, c, 0, 0);
        std::fill(dxs, dxs + static_cast<std::int64_t>(ih) * iw, T(0));
        const T* wc = &w_.at(0, c, 0, 0);
        T* dwc = accumulate ? &dw_part[tid].at(0, c, 0, 0) : nullptr;
        T dbsum = T(0);
        for (int oy = 0; oy < oh; ++oy) {
          for (int ox = 0; ox < ow; ++ox) {
            const T g = dys[oy * ow + ox];
            if (accumulate) dbsum += g;
            for (int ky = 0; ky < k_; ++ky) {
              const int iy = oy * stride_ - pad_ + ky;
              if (iy < 0 || iy >= ih) continue;
              for (int kx = 0; kx < k_; ++kx) {
                const int ix = ox * stride_ - pad_ + kx;
                if (ix < 0 || ix >= iw) continue;
                if (accumulate) dwc[ky * k_ + kx] += g * xs[iy * iw + ix];
                dxs[iy * iw + ix] += g * wc[ky * k_ + kx];
              }
            }
          }
        }
        if (accumulate && has_bias_) db_part[tid][c] += dbsum;
      }
    }

    if (accumulate) {
      for (int t = 0; t < nthreads; ++t)
        for (std::int64_t i = 0; i < gw_.numel(); ++i) gw_[i] += dw_part[t][i];
      if (has_bias_)
        for (int t = 0; t < nthreads; ++t)
          for (std::int64_t i = 0; i < gb_.numel(); ++i) gb_[i] += db_part[t][i];
    }
    return dx;
  }

  void collect_params(const std::string& prefix, std::vector<ParamRef<T>>& out) override {
    out.push_back({prefix + this->name_ + ".weight", &w_, &gw_});
    if (has_bias_) out.push_back({prefix + this->name_ + ".bias", &b_, &gb_});
  }

  void collect_state(const std::string& prefix, std::vector<StateRef<T>>& out) override {
    out.push_back({prefix + this->name_ + ".weight", &w_});
    if (has_bias_) out.push_back({prefix + this->name_ + ".bias", &b_});
  }

 private:
  TensorT<T> compute(const TensorT<T>& x) const {
    if (x.c() != ch_)
      throw ShapeError(this->name_ + ": expected " + std::to_string(ch_) +
                       " channels, got " + std::to_string(x.c()));
    const int N = x.n(), ih = x.h(), iw = x.w();
    const int oh = detail::conv_out_dim(ih, k_, stride_, pad_);
    const int ow = detail::conv_out_dim(iw, k_, stride_, pad_);
    TensorT<T> y(N, ch_, oh, ow);

#pragma omp parallel for schedule(static) collapse(2) num_threads(detail::threads_for(static_cast<std::int64_t>(N) * ch_))
    for (int n = 0; n < N; ++n) {
      for (int c = 0; c < ch_; ++c) {
        const T* xs = &x.at(n, c, 0, 0);
        T* ys = &y.at(n, c, 0, 0);
        const T* wc = &w_.at(0, c, 0, 0);
        const T bias = has_bias_ ? b_[c] : T(0);
        for (int oy = 0; oy < oh; ++oy) {
          for (int ox = 0; ox < ow; ++ox) {
            T acc = bias;
            for (int ky = 0; ky < k_; ++ky) {
              const int iy = oy * stride_ - pad_ + ky;
              if (iy < 0 || iy >= ih) continue;
              for (int kx = 0; kx < k_; ++kx) {
                const int ix = ox * stride_ - pad_ + kx;
                if (ix < 0 || ix >= iw) continue;
                acc += wc[ky * k_ + kx] * xs[iy * iw + ix];
              }
            }
            ys[oy * ow + ox] = acc;
          }
        }
      }
    }
    return y;
  }

  int ch_, k_, stride_, pad_;
  bool has_bias_;
  double init_slope_;
  TensorT<T> w_, gw_, b_, gb_;
  TensorT<T> x_;
};

// ---------------------------------------------------------------------------
// Batch normalization
// ---------------------------------------------------------------------------

template <typename T>
class BatchNorm2d : public Layer<T> {
 public:
  BatchNorm2d(std::string name, int channels, double eps = 1e-5, double momentum = 0.1)
      : Layer<T>(std::move(name)),
        ch_(channels),
        eps_(eps),
        momentum_(momentum),
        gamma_(1, channels, 1, 1),
        beta_(1, channels, 1, 1),
        ggamma_(1, channels, 1, 1),
        gbeta_(1, channels, 1, 1),
        running_mean_(1, channels, 1, 1),
        running_var_(1, channels, 1, 1),
        invstd_(1, channels, 1, 1) {
    gamma_.fill(T(1));
    running_var_.fill(T(1));
  }

  void init(Rng&) override {
    gamma_.fill(T(1));
    beta_.fill(T(0));
    running_mean_.fill(T(0));
    running_var_.fill(T(1));
  }

  Shape3 out_shape(const Shape3& in) const override { return in; }
  std::int64_t param_count() const override { return 2 * ch_; }

  TensorT<T> infer(const TensorT<T>& x) const override {
    TensorT<T> y(x.n(), x.c(), x.h(), x.w());
    const std::int64_t hw = static_cast<std::int64_t>(x.h()) * x.w();
    for (int n = 0; n < x.n(); ++n) {
      for (int c = 0; c < ch_; ++c) {
        const T istd = T(1) / std::sqrt(running_var_[c] + static_cast<T>(eps_));
        const T scale = gamma_[c] * istd;
        const T shift = beta_[c] - running_mean_[c] * scale;
        const T* xs = &x.at(n, c, 0, 0);
        T* ys = &y.at(n, c, 0, 0);
        for (std::int64_t i = 0; i < hw; ++i) ys[i] = xs[i] * scale + shift;
      }
    }
    return y;
  }

  TensorT<T> forward(const TensorT<T>& x) override {
    const int N = x.n();
    const std::int64_t hw = static_cast<std::int64_t>(x.h()) * x.w();
    const std::int64_t M = N * hw;
    TensorT<T> y(x.n(), x.c(), x.h(), x.w());
    xhat_ = TensorT<T>(x.n(), x.c(), x.h(), x.w());
    batch_m_ = M;

    if (this->training_) {
#pragma omp parallel for schedule(static)
      for (int c = 0; c < ch_; ++c) {
        double sum = 0, sq = 0;
        for (int n = 0; n < N; ++n) {
          const T* xs = &x.at(n, c, 0, 0);
          for (std::int64_t i = 0; i < hw; ++i) {
            sum += xs[i];
            sq += static_cast<double>(xs[i]) * xs[i];
          }
        }
        const double mean = sum / static_cast<double>(M);
        double var = sq / static_cast<double>(M) - mean * mean;
        if (var < 0) var = 0;  // guard against rounding
        const T istd = static_cast<T>(1.0 / std::sqrt(var + eps_));
        invstd_[c] = istd;
        for (int n = 0; n < N; ++n) {
          const T* xs = &x.at(n, c, 0, 0);
          T* xh = &xhat_.at(n, c, 0, 0);
          T* ys = &y.at(n, c, 0, 0);
          for (std::int64_t i = 0; i < hw; ++i) {
            xh[i] = (xs[i] - static_cast<T>(mean)) * istd;
            ys[i] = gamma_[c] * xh[i] + beta_[c];
          }
        }
        const double unbiased = (M > 1) ? var * static_cast<double>(M) / (M - 1) : var;
        running_mean_[c] =
            static_cast<T>((1.0 - momentum_) * running_mean_[c] + momentum_ * mean);
        running_var_[c] =
            static_cast<T>((1.0 - momentum_) * running_var_[c] + momentum_ * unbiased);
      }
    } else {
#pragma omp parallel for schedule(static)
      for (int c = 0; c < ch_; ++c) {
        const T istd = T(1) / std::sqrt(running_var_[c] + static_cast<T>(eps_));
        invstd_[c] = istd;
        for (int n = 0; n < N; ++n) {
          const T* xs = &x.at(n, c, 0, 0);
          T* xh = &xhat_.at(n, c, 0, 0);
          T* ys = &y.at(n, c, 0, 0);
          for (std::int64_t i = 0; i < hw; ++i) {
            xh[i] = (xs[i] - running_mean_[c]) * istd;
            ys[i] = gamma_[c] * xh[i] + beta_[c];
          }
        }
      }
    }
    used_batch_stats_ = this->training_;
    return y;
  }

  TensorT<T> backward(const TensorT<T>& dy, bool accumulate) override {
    const int N = dy.n();
    const std::int64_t hw = static_cast<std::int64_t>(dy.h()) * dy.w();
    const std::int64_t M = batch_m_;
    TensorT<T> dx(dy.n(), dy.c(), dy.h(), dy.w());

#pragma omp parallel for schedule(static)
    for (int c = 0; c < ch_; ++c) {
      double s1 = 0, s2 = 0;
      for (int n = 0; n < N; ++n) {
        const T* dys = &dy.at(n, c, 0, 0);
        const T* xh = &xhat_.at(n, c, 0, 0);
        for (std::int64_t i = 0; i < hw; ++i) {
          s1 += dys[i];
          s2 += static_cast<double>(dys[i]) * xh[i];
        }
      }
      if (accumulate) {
        gbeta_[c] += static_cast<T>(s1);
        ggamma_[c] += static_cast<T>(s2);
      }
      const T g = gamma_[c] * invstd_[c];
      if (used_batch_stats_) {
        const T m1 = static_cast<T>(s1 / static_cast<double>(M));
        const T m2 = static_cast<T>(s2 / static_cast<double>(M));
        for (int n = 0; n < N; ++n) {
          const T* dys = &dy.at(n, c, 0, 0);
          const T* xh = &xhat_.at(n, c, 0, 0);
          T* dxs = &dx.at(n, c, 0, 0);
          for (std::int64_t i = 0; i < hw; ++i) dxs[i] = g * (dys[i] - m1 - xh[i] * m2);
        }
      } else {
        for (int n = 0; n < N; ++n) {
          const T* dys = &dy.at(n, c, 0, 0);
          T* dxs = &dx.at(n, c, 0, 0);
          for (std::int64_t i = 0; i < hw; ++i) dxs[i] = g * dys[i];
        }
      }
    }
    return dx;
  }

  void collect_params(const std::string& prefix, std::vector<ParamRef<T>>& out) override {
    out.push_back({prefix + this->name_ + ".gamma", &gamma_, &ggamma_});
    out.push_back({prefix + this->name_ + ".beta", &beta_, &gbeta_});
  }

  void collect_state(const std::string& prefix, std::vector<StateRef<T>>& out) override {
    out.push_back({prefix + this->name_ + ".gamma", &gamma_});
    out.push_back({prefix + this->name_ + ".beta", &beta_});
    out.push_back({prefix + this->name_ + ".running_mean", &running_mean_});
    out.push_back({prefix + this->name_ + ".running_var", &running_var_});
  }

 private:
  int ch_;
  double eps_, momentum_;
  TensorT<T> gamma_, beta_, ggamma_, gbeta_;
  TensorT<T> running_mean_, running_var_;
  TensorT<T> invstd_, xhat_;
  std::int64_t batch_m_ = 0;
  bool used_batch_stats_ = true;
};

// ---------------------------------------------------------------------------
// Activations and shape ops
// ---------------------------------------------------------------------------

/// Leaky rectifier; slope 0 gives a plain ReLU.
template <typename T>
class LeakyReLU : public Layer<T> {
 public:
  LeakyReLU(std::string name, double slope) : Layer<T>(std::move(name)), slope_(slope) {}

  Shape3 out_shape(const Shape3& in) const override { return in; }

  TensorT<T> infer(const TensorT<T>& x) const override {
    TensorT<T> y = x;
    const T s = static_cast<T>(slope_);
    for (std::int64_t i = 0; i < y.numel(); ++i)
      if (y[i] < T(0)) y[i] *= s;
    return y;
  }

  TensorT<T> forward(const TensorT<T>& x) override {
    y_ = infer(x);
    return y_;
  }

  TensorT<T> backward(const TensorT<T>& dy, bool) override {
    TensorT<T> dx = dy;
    const T s = static_cast<T>(slope_);
    for (std::int64_t i = 0; i < dx.numel(); ++i)
      if (y_[i] <= T(0)) dx[i] *= s;
    return dx;
  }

 private:
  double slope_;
  TensorT<T> y_;
};

/// Saturating output nonlinearity mapping to (0, 1); used as the last stage
/// of image-to-image networks so outputs stay in the valid pixel range.
template <typename T>
class Sigmoid : public Layer<T> {
 public:
  explicit Sigmoid(std::string name) : Layer<T>(std::move(name)) {}

  Shape3 out_shape(const Shape3& in) const override { return in; }

  TensorT<T> infer(const TensorT<T>& x) const override {
    TensorT<T> y = x;
    for (std::int64_t i = 0; i < y.numel(); ++i) y[i] = T(1) / (T(1) + std::exp(-y[i]));
    return y;
  }

  TensorT<T> forward(const TensorT<T>& x) override {
    y_ = infer(x);
    return y_;
  }

  TensorT<T> backward(const TensorT<T>& dy, bool) override {
    TensorT<T> dx = dy;
    for (std::int64_t i = 0; i < dx.numel(); ++i) dx[i] *= y_[i] * (T(1) - y_[i]);
    return dx;
  }

 private:
  TensorT<T> y_;
};

/// 2x nearest-neighbour upsampling: every input pixel is replicated into
/// the corresponding 2x2 output block.
template <typename T>
class NearestUpsample2x : public Layer<T> {
 public:
  explicit NearestUpsample2x(std::string name) : Layer<T>(std::move(name)) {}

  Shape3 out_shape(const Shape3& in) const override { return {in.c, in.h * 2, in.w * 2}; }

  TensorT<T> infer(const TensorT<T>& x) const override {
    const int N = x.n(), C = x.c(), H = x.h(), W = x.w();
    TensorT<T> y(N, C, H * 2, W * 2);
    for (int n = 0; n < N; ++n)
      for (int c = 0; c < C; ++c) {
        const T* xs = &x.at(n, c, 0, 0);
        T* ys = &y.at(n, c, 0, 0);
        for (int i = 0; i < H; ++i)
          for (int j = 0; j < W; ++j) {
            const T v = xs[i * W + j];
            T* o = ys + (2 * i) * (2 * W) + 2 * j;
            o[0] = v;
            o[1] = v;
            o[2 * W] = v;
            o[2 * W + 1] = v;
          }
      }
    return y;
  }

  TensorT<T> forward(const TensorT<T>& x) override { return infer(x); }

  TensorT<T> backward(const TensorT<T>& dy, bool) override {
    const int N = dy.n(), C = dy.c(), H = dy.h() / 2, W = dy.w() / 2;
    TensorT<T> dx(N, C, H, W);
    for (int n = 0; n < N; ++n)
      for (int c = 0; c < C; ++c) {
        const T* dys = &dy.at(n, c, 0, 0);
        T* dxs = &dx.at(n, c, 0, 0);
        for (int i = 0; i < H; ++i)
          for (int j = 0; j < W; ++j) {
            const T* o = dys + (2 * i) * (2 * W) + 2 * j;
            dxs[i * W + j] = o[0] + o[1] + o[2 * W] + o[2 * W + 1];
          }
      }
    return dx;
  }
};

template <typename T>
class MaxPool2d : public Layer<T> {
 public:
  MaxPool2d(std::string name, int ksize, int stride, int pad)
      : Layer<T>(std::move(name)), k_(ksize), stride_(stride), pad_(pad) {}

  Shape3 out_shape(const Shape3& in) const override {
    return {in.c, detail::conv_out_dim(in.h, k_, stride_, pad_),
            detail::conv_out_dim(in.w, k_, stride_, pad_)};
  }

  TensorT<T> infer(const TensorT<T>& x) const override { return compute(x, nullptr); }

  TensorT<T> forward(const TensorT<T>& x) override {
    in_h_ = x.h();
    in_w_ = x.w();
    return compute(x, &idx_);
  }

  TensorT<T> backward(const TensorT<T>& dy, bool) override {
    const int N = dy.n(), C = dy.c();
    const std::int64_t ohw = static_cast<std::int64_t>(dy.h()) * dy.w();
    TensorT<T> dx(N, C, in_h_, in_w_);
    for (int n = 0; n < N; ++n)
      for (int c = 0; c < C; ++c) {
        const T* dys = &dy.at(n, c, 0, 0);
        T* dxs = &dx.at(n, c, 0, 0);
        const std::int32_t* ix = idx_.data() + (static_cast<std::int64_t>(n) * C + c) * ohw;
        for (std::int64_t i = 0; i < ohw; ++i)
          if (ix[i] >= 0) dxs[ix[i]] += dys[i];
      }
    return dx;
  }

 private:
  TensorT<T> compute(const TensorT<T>& x, std::vector<std::int32_t>* idx) const {
    const int N = x.n(), C = x.c(), ih = x.h(), iw = x.w();
    const int oh = detail::conv_out_dim(ih, k_, stride_, pad_);
    const int ow = detail::conv_out_dim(iw, k_, stride_, pad_);
    TensorT<T> y(N, C, oh, ow);
    if (idx) idx->assign(static_cast<std::size_t>(N) * C * oh * ow, -1);
    for (int n = 0; n < N; ++n)
      for (int c = 0; c < C; ++c) {
        const T* xs = &x.at(n, c, 0, 0);
        T* ys = &y.at(n, c, 0, 0);
        std::int32_t* ix =
            idx ? idx->data() + (static_cast<std::int64_t>(n) * C + c) *
                                    (static_cast<std::int64_t>(oh) * ow)
                : nullptr;
        for (int oy = 0; oy < oh; ++oy)
          for (int ox = 0; ox < ow; ++ox) {
            T best = -std::numeric_limits<T>::infinity();
            std::int32_t besti = -1;
            for (int ky = 0; ky < k_; ++ky) {
              const int iy = oy * stride_ - pad_ + ky;
              if (iy < 0 || iy >= ih) continue;
              for (int kx = 0; kx < k_; ++kx) {
                const int ixp = ox * stride_ - pad_ + kx;
                if (ixp < 0 || ixp >= iw) continue;
                if (xs[iy * iw + ixp] > best) {
                  best = xs[iy * iw + ixp];
                  besti = iy * iw + ixp;
                }
              }
            }
            ys[oy * ow + ox] = besti >= 0 ? best : T(0);
            if (ix) ix[oy * ow + ox] = besti;
          }
      }
    return y;
  }

  int k_, stride_, pad_;
  int in_h_ = 0, in_w_ = 0;
  mutable std::vector<std::int32_t> idx_;
};

/// Global average pooling to a (n, c, 1, 1) feature vector.
template <typename T>
class GlobalAvgPool : public Layer<T> {
 public:
  explicit GlobalAvgPool(std::string name) : Layer<T>(std::move(name)) {}

  Shape3 out_shape(const Shape3& in) const override { return {in.c, 1, 1}; }

  TensorT<T> infer(const TensorT<T>& x) const override {
    const std::int64_t hw = static_cast<std::int64_t>(x.h()) * x.w();
    TensorT<T> y(x.n(), x.c(), 1, 1);
    for (int n = 0; n < x.n(); ++n)
      for (int c = 0; c < x.c(); ++c) {
        const T* xs = &x.at(n, c, 0, 0);
        double s = 0;
        for (std::int64_t i = 0; i < hw; ++i) s += xs[i];
        y.at(n, c, 0, 0) = static_cast<T>(s / static_cast<double>(hw));
      }
    return y;
  }

  TensorT<T> forward(const TensorT<T>& x) override {
    in_h_ = x.h();
    in_w_ = x.w();
    return infer(x);
  }

  TensorT<T> backward(const TensorT<T>& dy, bool) override {
    const std::int64_t hw = static_cast<std::int64_t>(in_h_) * in_w_;
    TensorT<T> dx(dy.n(), dy.c(), in_h_, in_w_);
    for (int n = 0; n < dy.n(); ++n)
      for (int c = 0; c < dy.c(); ++c) {
        const T g = dy.at(n, c, 0, 0) / static_cast<T>(hw);
        T* dxs = &dx.at(n, c, 0, 0);
        for (std::int64_t i = 0; i < hw; ++i) dxs[i] = g;
      }
    return dx;
  }

 private:
  int in_h_ = 0, in_w_ = 0;
};

/// Fully connected layer; flattens (n, c, h, w) to (n, c*h*w) on the way in.
template <typename T>
class Linear : public Layer<T> {
 public:
  Linear(std::string name, int in_features, int out_features, bool bias = true)
      : Layer<T>(std::move(name)),
        in_(in_features),
        out_(out_features),
        has_bias_(bias),
        w_(1, out_features, in_features, 1),
        gw_(1, out_features, in_features, 1) {
    if (bias) {
      b_ = TensorT<T>(1, out_features, 1, 1);
      gb_ = TensorT<T>(1, out_features, 1, 1);
    }
  }

  void init(Rng& rng) override {
    detail::kaiming_uniform(w_, in_, 0.0, rng);
    if (has_bias_) b_.fill(T(0));
  }

  Shape3 out_shape(const Shape3& in) const override { return {out_, 1, 1}; }
  std::int64_t param_count() const override {
    return static_cast<std::int64_t>(in_) * out_ + (has_bias_ ? out_ : 0);
  }
  std::int64_t macs(const Shape3&) const override {
    return static_cast<std::int64_t>(in_) * out_;
  }

  TensorT<T> infer(const TensorT<T>& x) const override { return compute(x); }

  TensorT<T> forward(const TensorT<T>& x) override {
    x_ = x;
    return compute(x);
  }

  TensorT<T> backward(const TensorT<T>& dy, bool accumulate) override {
    const int N = dy.n();
    CMapRM<T> dym(dy.data(), N, out_);
    CMapRM<T> xm(x_.data(), N, in_);
    if (accumulate) {
      MapRM<T> gwm(gw_.data(), out_, in_);
      gwm.noalias() += dym.transpose() * xm;
      if (has_bias_)
        for (int j = 0; j < out_; ++j) gb_[j] += dym.col(j).sum();
    }
    TensorT<T> dx(x_.n(), x_.c(), x_.h(), x_.w());
    MapRM<T> dxm(dx.data(), N, in_);
    dxm.noalias() = dym * CMapRM<T>(w_.data(), out_, in_);
    return dx;
  }

  void collect_params(const std::string& prefix, std::vector<ParamRef<T>>& out) override {
    out.push_back({prefix + this->name_ + ".weight", &w_, &gw_});
    if (has_bias_) out.push_back({prefix + this->name_ + ".bias", &b_, &gb_});
  }

  void collect_state(const std::string& prefix, std::vector<StateRef<T>>& out) override {
    out.push_back({prefix + this->name_ + ".weight", &w_});
    if (has_bias_) out.push_back({prefix + this->name_ + ".bias", &b_});
  }

 private:
  TensorT<T> compute(const TensorT<T>& x) const {
    if (x.image_size() != in_)
      throw ShapeError(this->name_ + ": expected " + std::to_string(in_) +
                       " input features, got " + std::to_string(x.image_size()));
    const int N = x.n();
    TensorT<T> y(N, out_, 1, 1);
    MapRM<T> ym(y.data(), N, out_);
    ym.noalias() = CMapRM<T>(x.data(), N, in_) * CMapRM<T>(w_.data(), out_, in_).transpose();
    if (has_bias_)
      for (int j = 0; j < out_; ++j) ym.col(j).array() += b_[j];
    return y;
  }

  int in_, out_;
  bool has_bias_;
  TensorT<T> w_, gw_, b_, gb_;
  TensorT<T> x_;
};

}  // namespace cloak
