#ifndef VOLNET_LAYERS_HPP
#define VOLNET_LAYERS_HPP

#include <Eigen/Dense>

#include <algorithm>
#include <array>
#include <cmath>
#include <limits>
#include <random>
#include <string>
#include <utility>
#include <vector>

#include "volnet/error.hpp"
#include "volnet/parallel.hpp"
#include "volnet/tensor.hpp"

namespace volnet {

enum class Padding { same, valid };
enum class Mode { train, infer };

// Output extent and leading pad for one spatial axis. 'same' follows the usual
// ceil(in / stride) rule with the odd pad cell placed after the data.
struct AxisWindow {
  Index out = 0;
  Index pad_before = 0;
};

inline AxisWindow window_geometry(Index in, Index kernel, Index stride, Padding padding) {
  if (kernel < 1 || stride < 1) fail(ErrorCode::InvalidConfig, "kernel and stride must be positive");
  if (padding == Padding::valid) {
    if (kernel > in)
      fail(ErrorCode::ShapeMismatch,
           "kernel " + std::to_string(kernel) + " larger than input extent " + std::to_string(in));
    return {(in - kernel) / stride + 1, 0};
  }
  const Index out = (in + stride - 1) / stride;
  const Index pad_total = std::max<Index>((out - 1) * stride + kernel - in, 0);
  return {out, pad_total / 2};
}

// ---------------------------------------------------------------------------
// 3D convolution (cross-correlation, no kernel flip) lowered to a GEMM over an
// im2col patch matrix.

template <typename Scalar>
struct ConvParams {
  Tensor<Scalar> weights;  // [C_out, C_in, k, k, k]
  Tensor<Scalar> biases;   // [C_out]
};

template <typename Scalar>
struct ConvGrads {
  Tensor<Scalar> weights;
  Tensor<Scalar> biases;
};

struct ConvGeometry {
  Index c_in = 0, c_out = 0, kernel = 0, stride = 1;
  std::array<Index, 3> in{}, out{}, pad{};

  Index patch() const { return c_in * kernel * kernel * kernel; }
  Index in_positions() const { return in[0] * in[1] * in[2]; }
  Index out_positions() const { return out[0] * out[1] * out[2]; }
  bool pointwise() const { return kernel == 1 && stride == 1; }
};

namespace detail {

template <typename Scalar>
ConvGeometry conv_geometry(const Shape& sample_shape, const ConvParams<Scalar>& params, Padding padding,
                           Index stride) {
  const Shape& w = params.weights.shape();
  if (sample_shape.size() != 4) fail(ErrorCode::ShapeMismatch, "conv input must be [C,D,H,W]");
  if (w.size() != 5 || w[2] != w[3] || w[3] != w[4])
    fail(ErrorCode::ShapeMismatch, "conv weights must be [C_out,C_in,k,k,k], got " + shape_string(w));
  if (w[1] != sample_shape[0])
    fail(ErrorCode::ShapeMismatch, "conv expects " + std::to_string(w[1]) + " input channels, got " +
                                       shape_string(sample_shape));
  if (params.biases.shape() != Shape{w[0]}) fail(ErrorCode::ShapeMismatch, "conv bias shape");
  ConvGeometry g;
  g.c_in = w[1];
  g.c_out = w[0];
  g.kernel = w[2];
  g.stride = stride;
  for (int a = 0; a < 3; ++a) {
    g.in[a] = sample_shape[a + 1];
    const AxisWindow win = window_geometry(g.in[a], g.kernel, stride, padding);
    g.out[a] = win.out;
    g.pad[a] = win.pad_before;
  }
  return g;
}

// Output positions [lo, hi) along one axis whose input index o*stride - pad + kk
// falls inside [0, in).
inline std::pair<Index, Index> valid_range(Index out, Index in, Index stride, Index pad, Index kk) {
  const Index shift = kk - pad;  // input = o * stride + shift
  const Index lo = shift >= 0 ? 0 : (-shift + stride - 1) / stride;
  const Index hi = in - shift <= 0 ? 0 : std::min(out, (in - shift + stride - 1) / stride);
  return {std::min(lo, hi), hi};
}

// Gathers input patches into a [patch, out_positions] row-major matrix.
template <typename Scalar, typename Cols>
void im2col(const Scalar* x, const ConvGeometry& g, Cols& cols) {
  const Index k = g.kernel, s = g.stride;
  const Index inh = g.in[1], inw = g.in[2];
  const Index oh_n = g.out[1], ow_n = g.out[2];
  for (Index c = 0; c < g.c_in; ++c)
    for (Index kd = 0; kd < k; ++kd)
      for (Index kh = 0; kh < k; ++kh)
        for (Index kw = 0; kw < k; ++kw) {
          const Index row = ((c * k + kd) * k + kh) * k + kw;
          Scalar* dst = cols.data() + row * g.out_positions();
          const Scalar* channel = x + c * g.in_positions();
          const auto [d_lo, d_hi] = valid_range(g.out[0], g.in[0], s, g.pad[0], kd);
          const auto [h_lo, h_hi] = valid_range(oh_n, inh, s, g.pad[1], kh);
          const auto [w_lo, w_hi] = valid_range(ow_n, inw, s, g.pad[2], kw);
          for (Index od = 0; od < g.out[0]; ++od) {
            if (od < d_lo || od >= d_hi) {
              std::fill_n(dst, oh_n * ow_n, Scalar(0));
              dst += oh_n * ow_n;
              continue;
            }
            const Index id = od * s - g.pad[0] + kd;
            for (Index oh = 0; oh < oh_n; ++oh, dst += ow_n) {
              if (oh < h_lo || oh >= h_hi) {
                std::fill_n(dst, ow_n, Scalar(0));
                continue;
              }
              const Index ih = oh * s - g.pad[1] + kh;
              const Scalar* src = channel + (id * inh + ih) * inw - g.pad[2] + kw;
              std::fill_n(dst, w_lo, Scalar(0));
              if (s == 1) {
                std::copy(src + w_lo, src + w_hi, dst + w_lo);
              } else {
                for (Index ow = w_lo; ow < w_hi; ++ow) dst[ow] = src[ow * s];
              }
              std::fill(dst + w_hi, dst + ow_n, Scalar(0));
            }
          }
        }
}

// Adjoint of im2col: scatters patch gradients back onto the input grid.
template <typename Scalar, typename Cols>
void col2im(const Cols& cols, const ConvGeometry& g, Scalar* dx) {
  const Index k = g.kernel, s = g.stride;
  const Index inh = g.in[1], inw = g.in[2];
  const Index oh_n = g.out[1], ow_n = g.out[2];
  for (Index c = 0; c < g.c_in; ++c)
    for (Index kd = 0; kd < k; ++kd)
      for (Index kh = 0; kh < k; ++kh)
        for (Index kw = 0; kw < k; ++kw) {
          const Index row = ((c * k + kd) * k + kh) * k + kw;
          const Scalar* plane = cols.data() + row * g.out_positions();
          Scalar* channel = dx + c * g.in_positions();
          const auto [d_lo, d_hi] = valid_range(g.out[0], g.in[0], s, g.pad[0], kd);
          const auto [h_lo, h_hi] = valid_range(oh_n, inh, s, g.pad[1], kh);
          const auto [w_lo, w_hi] = valid_range(ow_n, inw, s, g.pad[2], kw);
          for (Index od = d_lo; od < d_hi; ++od) {
            const Index id = od * s - g.pad[0] + kd;
            for (Index oh = h_lo; oh < h_hi; ++oh) {
              const Index ih = oh * s - g.pad[1] + kh;
              const Scalar* src = plane + (od * oh_n + oh) * ow_n;
              Scalar* dst = channel + (id * inh + ih) * inw - g.pad[2] + kw;
              for (Index ow = w_lo; ow < w_hi; ++ow) dst[ow * s] += src[ow];
            }
          }
        }
}

template <typename Scalar>
using RowMatrix = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename Scalar>
using RowMap = Eigen::Map<RowMatrix<Scalar>>;
template <typename Scalar>
using ConstRowMap = Eigen::Map<const RowMatrix<Scalar>>;

template <typename Scalar>
void conv_forward_sample(const Scalar* x, const ConvParams<Scalar>& p, const ConvGeometry& g, Scalar* y) {
  ConstRowMap<Scalar> w(p.weights.data(), g.c_out, g.patch());
  RowMap<Scalar> out(y, g.c_out, g.out_positions());
  if (g.pointwise()) {
    ConstRowMap<Scalar> cols(x, g.c_in, g.in_positions());
    out.noalias() = w * cols;
  } else {
    RowMatrix<Scalar> cols(g.patch(), g.out_positions());
    im2col(x, g, cols);
    out.noalias() = w * cols;
  }
  out.colwise() += p.biases.vec();
}

// Accumulates dW, db into the given buffers and writes dx (overwritten).
template <typename Scalar>
void conv_backward_sample(const Scalar* x, const ConvParams<Scalar>& p, const ConvGeometry& g, const Scalar* dy,
                          Scalar* dx, RowMatrix<Scalar>& dw, Eigen::Matrix<Scalar, Eigen::Dynamic, 1>& db) {
  ConstRowMap<Scalar> w(p.weights.data(), g.c_out, g.patch());
  ConstRowMap<Scalar> grad(dy, g.c_out, g.out_positions());
  db.noalias() += grad.rowwise().sum();
  if (g.pointwise()) {
    ConstRowMap<Scalar> cols(x, g.c_in, g.in_positions());
    dw.noalias() += grad * cols.transpose();
    RowMap<Scalar>(dx, g.c_in, g.in_positions()).noalias() = w.transpose() * grad;
    return;
  }
  RowMatrix<Scalar> cols(g.patch(), g.out_positions());
  im2col(x, g, cols);
  dw.noalias() += grad * cols.transpose();
  RowMatrix<Scalar> dcols = w.transpose() * grad;
  std::fill_n(dx, g.c_in * g.in_positions(), Scalar(0));
  col2im(dcols, g, dx);
}

}  // namespace detail

template <typename Scalar>
Tensor<Scalar> conv3d_forward(const Tensor<Scalar>& x, const ConvParams<Scalar>& params, Padding padding,
                              Index stride = 1) {
  const ConvGeometry g = detail::conv_geometry(x.shape(), params, padding, stride);
  Tensor<Scalar> y({g.c_out, g.out[0], g.out[1], g.out[2]});
  detail::conv_forward_sample(x.data(), params, g, y.data());
  return y;
}

template <typename Scalar>
struct ConvBackward {
  Tensor<Scalar> grad_input;
  ConvGrads<Scalar> grads;
};

template <typename Scalar>
ConvBackward<Scalar> conv3d_backward(const Tensor<Scalar>& x, const ConvParams<Scalar>& params,
                                     const Tensor<Scalar>& upstream, Padding padding, Index stride = 1) {
  const ConvGeometry g = detail::conv_geometry(x.shape(), params, padding, stride);
  if (upstream.shape() != Shape{g.c_out, g.out[0], g.out[1], g.out[2]})
    fail(ErrorCode::ShapeMismatch, "conv upstream gradient " + shape_string(upstream.shape()));
  detail::RowMatrix<Scalar> dw = detail::RowMatrix<Scalar>::Zero(g.c_out, g.patch());
  Eigen::Matrix<Scalar, Eigen::Dynamic, 1> db = Eigen::Matrix<Scalar, Eigen::Dynamic, 1>::Zero(g.c_out);
  ConvBackward<Scalar> out{Tensor<Scalar>(x.shape()), {Tensor<Scalar>(params.weights.shape()),
                                                      Tensor<Scalar>(params.biases.shape())}};
  detail::conv_backward_sample(x.data(), params, g, upstream.data(), out.grad_input.data(), dw, db);
  out.grads.weights.vec() = Eigen::Map<const Eigen::Matrix<Scalar, Eigen::Dynamic, 1>>(dw.data(), dw.size());
  out.grads.biases.vec() = db;
  return out;
}

// Batched variants over [N, C, D, H, W]; samples run on the worker pool and
// per-sample weight gradients are summed in sample order.
template <typename Scalar>
Tensor<Scalar> conv3d_forward_batch(const Tensor<Scalar>& x, const ConvParams<Scalar>& params, Padding padding,
                                    Index stride = 1) {
  if (x.rank() != 5) fail(ErrorCode::ShapeMismatch, "batched conv input must be [N,C,D,H,W]");
  const Index n = x.dim(0);
  const ConvGeometry g = detail::conv_geometry({x.dim(1), x.dim(2), x.dim(3), x.dim(4)}, params, padding, stride);
  Tensor<Scalar> y({n, g.c_out, g.out[0], g.out[1], g.out[2]});
  const Index in_block = g.c_in * g.in_positions();
  const Index out_block = g.c_out * g.out_positions();
  parallel_for(std::size_t(n), [&](std::size_t i) {
    detail::conv_forward_sample(x.data() + Index(i) * in_block, params, g, y.data() + Index(i) * out_block);
  });
  return y;
}

template <typename Scalar>
ConvBackward<Scalar> conv3d_backward_batch(const Tensor<Scalar>& x, const ConvParams<Scalar>& params,
                                           const Tensor<Scalar>& upstream, Padding padding, Index stride = 1) {
  if (x.rank() != 5) fail(ErrorCode::ShapeMismatch, "batched conv input must be [N,C,D,H,W]");
  const Index n = x.dim(0);
  const ConvGeometry g = detail::conv_geometry({x.dim(1), x.dim(2), x.dim(3), x.dim(4)}, params, padding, stride);
  if (upstream.shape() != Shape{n, g.c_out, g.out[0], g.out[1], g.out[2]})
    fail(ErrorCode::ShapeMismatch, "conv upstream gradient " + shape_string(upstream.shape()));
  using Vec = Eigen::Matrix<Scalar, Eigen::Dynamic, 1>;
  std::vector<detail::RowMatrix<Scalar>> dws(std::size_t(n), detail::RowMatrix<Scalar>::Zero(g.c_out, g.patch()));
  std::vector<Vec> dbs(std::size_t(n), Vec::Zero(g.c_out));
  ConvBackward<Scalar> out{Tensor<Scalar>(x.shape()), {Tensor<Scalar>(params.weights.shape()),
                                                      Tensor<Scalar>(params.biases.shape())}};
  const Index in_block = g.c_in * g.in_positions();
  const Index out_block = g.c_out * g.out_positions();
  parallel_for(std::size_t(n), [&](std::size_t i) {
    detail::conv_backward_sample(x.data() + Index(i) * in_block, params, g, upstream.data() + Index(i) * out_block,
                                 out.grad_input.data() + Index(i) * in_block, dws[i], dbs[i]);
  });
  auto dw = out.grads.weights.matrix(g.c_out, g.patch());
  for (Index i = 0; i < n; ++i) {
    dw += dws[std::size_t(i)];
    out.grads.biases.vec() += dbs[std::size_t(i)];
  }
  return out;
}

// ---------------------------------------------------------------------------
// Batch normalization over (N, D, H, W) per channel.

template <typename Scalar>
struct BatchNormParams {
  Tensor<Scalar> gamma, beta;                // trainable
  Tensor<Scalar> running_mean, running_var;  // running statistics

  explicit BatchNormParams(Index channels = 1)
      : gamma({channels}, Scalar(1)),
        beta({channels}, Scalar(0)),
        running_mean({channels}, Scalar(0)),
        running_var({channels}, Scalar(1)) {}
};

struct BatchNormOptions {
  double momentum = 0.1;
  double epsilon = 1e-5;
};

template <typename Scalar>
struct BatchNormCache {
  Mode mode = Mode::infer;
  Tensor<Scalar> x_hat;
  Eigen::VectorXd inv_std;
};

template <typename Scalar>
struct BatchNormBackward {
  Tensor<Scalar> grad_input;
  Tensor<Scalar> grad_gamma;
  Tensor<Scalar> grad_beta;
};

namespace detail {

inline void bn_layout(const Shape& shape, Index channels, Index& n, Index& spatial) {
  if (shape.size() < 2 || shape[1] != channels)
    fail(ErrorCode::ShapeMismatch, "batch-norm input " + shape_string(shape) + " vs " +
                                       std::to_string(channels) + " channels");
  n = shape[0];
  spatial = shape_size(shape) / (n * channels);
}

}  // namespace detail

template <typename Scalar>
Tensor<Scalar> batchnorm3d(const Tensor<Scalar>& x, BatchNormParams<Scalar>& params, Mode mode,
                           const BatchNormOptions& options = {}, BatchNormCache<Scalar>* cache = nullptr) {
  const Index channels = params.gamma.size();
  Index n = 0, spatial = 0;
  detail::bn_layout(x.shape(), channels, n, spatial);
  const Index count = n * spatial;
  if (mode == Mode::train && count < 2)
    fail(ErrorCode::DegenerateBatch, "batch-norm needs at least two values per channel in train mode");

  Eigen::VectorXd mean(channels), inv_std(channels);
  for (Index c = 0; c < channels; ++c) {
    if (mode == Mode::train) {
      double sum = 0.0;
      for (Index i = 0; i < n; ++i) {
        const Scalar* p = x.data() + (i * channels + c) * spatial;
        for (Index s = 0; s < spatial; ++s) sum += double(p[s]);
      }
      const double mu = sum / double(count);
      double sq = 0.0;
      for (Index i = 0; i < n; ++i) {
        const Scalar* p = x.data() + (i * channels + c) * spatial;
        for (Index s = 0; s < spatial; ++s) {
          const double d = double(p[s]) - mu;
          sq += d * d;
        }
      }
      const double var = sq / double(count);
      mean[c] = mu;
      inv_std[c] = 1.0 / std::sqrt(var + options.epsilon);
      params.running_mean[c] =
          Scalar((1.0 - options.momentum) * double(params.running_mean[c]) + options.momentum * mu);
      params.running_var[c] =
          Scalar((1.0 - options.momentum) * double(params.running_var[c]) + options.momentum * var);
    } else {
      mean[c] = double(params.running_mean[c]);
      inv_std[c] = 1.0 / std::sqrt(double(params.running_var[c]) + options.epsilon);
    }
  }

  Tensor<Scalar> y(x.shape());
  Tensor<Scalar> x_hat;
  if (cache != nullptr) x_hat = Tensor<Scalar>(x.shape());
  for (Index i = 0; i < n; ++i)
    for (Index c = 0; c < channels; ++c) {
      const Index base = (i * channels + c) * spatial;
      const double g = double(params.gamma[c]), b = double(params.beta[c]);
      for (Index s = 0; s < spatial; ++s) {
        const double h = (double(x[base + s]) - mean[c]) * inv_std[c];
        if (cache != nullptr) x_hat[base + s] = Scalar(h);
        y[base + s] = Scalar(g * h + b);
      }
    }
  if (cache != nullptr) {
    cache->mode = mode;
    cache->x_hat = std::move(x_hat);
    cache->inv_std = std::move(inv_std);
  }
  return y;
}

template <typename Scalar>
BatchNormBackward<Scalar> batchnorm3d_backward(const BatchNormCache<Scalar>& cache,
                                               const BatchNormParams<Scalar>& params,
                                               const Tensor<Scalar>& upstream) {
  const Index channels = params.gamma.size();
  if (upstream.shape() != cache.x_hat.shape())
    fail(ErrorCode::ShapeMismatch, "batch-norm upstream gradient " + shape_string(upstream.shape()));
  Index n = 0, spatial = 0;
  detail::bn_layout(upstream.shape(), channels, n, spatial);
  const double count = double(n * spatial);
  BatchNormBackward<Scalar> out{Tensor<Scalar>(upstream.shape()), Tensor<Scalar>({channels}),
                                Tensor<Scalar>({channels})};
  for (Index c = 0; c < channels; ++c) {
    double sum_g = 0.0, sum_gh = 0.0;
    for (Index i = 0; i < n; ++i) {
      const Index base = (i * channels + c) * spatial;
      for (Index s = 0; s < spatial; ++s) {
        sum_g += double(upstream[base + s]);
        sum_gh += double(upstream[base + s]) * double(cache.x_hat[base + s]);
      }
    }
    out.grad_beta[c] = Scalar(sum_g);
    out.grad_gamma[c] = Scalar(sum_gh);
    const double scale = double(params.gamma[c]) * cache.inv_std[c];
    for (Index i = 0; i < n; ++i) {
      const Index base = (i * channels + c) * spatial;
      for (Index s = 0; s < spatial; ++s) {
        const double g = double(upstream[base + s]);
        if (cache.mode == Mode::train) {
          out.grad_input[base + s] =
              Scalar(scale * (g - sum_g / count - double(cache.x_hat[base + s]) * sum_gh / count));
        } else {
          out.grad_input[base + s] = Scalar(scale * g);
        }
      }
    }
  }
  return out;
}

// ---------------------------------------------------------------------------

template <typename Scalar>
Tensor<Scalar> relu(const Tensor<Scalar>& x) {
  return Tensor<Scalar>(x.shape(), x.vec().cwiseMax(Scalar(0)).eval());
}

// Subgradient 0 at the kink.
template <typename Scalar>
Tensor<Scalar> relu_backward(const Tensor<Scalar>& x, const Tensor<Scalar>& upstream) {
  if (x.shape() != upstream.shape()) fail(ErrorCode::ShapeMismatch, "relu upstream gradient shape");
  return Tensor<Scalar>(x.shape(), (x.vec().array() > Scalar(0)).select(upstream.vec(), Scalar(0)).eval());
}

// ---------------------------------------------------------------------------
// Max pooling. Argmax holds the flat input offset that produced each output;
// ties keep the first position of the window in row-major order.

template <typename Scalar>
struct MaxPoolResult {
  Tensor<Scalar> output;
  std::vector<Index> argmax;
};

namespace detail {

struct PoolGeometry {
  Index pool = 0, stride = 0;
  std::array<Index, 3> in{}, out{}, pad{};
};

inline PoolGeometry pool_geometry(const Shape& spatial, Index pool, Index stride, Padding padding) {
  if (pool < 1 || stride < 1) fail(ErrorCode::InvalidConfig, "pool size and stride must be positive");
  PoolGeometry g{pool, stride, {}, {}, {}};
  for (int a = 0; a < 3; ++a) {
    g.in[a] = spatial[std::size_t(a)];
    const AxisWindow win = window_geometry(g.in[a], pool, stride, padding);
    g.out[a] = win.out;
    g.pad[a] = win.pad_before;
  }
  return g;
}

// Running maximum along one axis of a strided view. Entries are visited in
// increasing input index and replaced only on a strict increase, so the first
// occurrence wins.
template <typename Scalar>
void max_along_axis(const Scalar* values, const Index* index, Index in, Index out, Index pool, Index stride,
                    Index pad, Index lines, Index line_stride, Index elem_stride, Index out_line_stride,
                    Index out_elem_stride, Scalar* out_values, Index* out_index) {
  if (line_stride == 1 && out_line_stride == 1 && index) {
    // Lines are adjacent: sweep them together, one window row at a time.
    for (Index o = 0; o < out; ++o) {
      const Index start = o * stride - pad;
      const Index lo = std::max<Index>(start, 0), hi = std::min(start + pool, in);
      if (lo >= hi) fail(ErrorCode::ShapeMismatch, "max-pool window contains only padding");
      Scalar* ov = out_values + o * out_elem_stride;
      Index* oi = out_index + o * out_elem_stride;
      std::copy_n(values + lo * elem_stride, lines, ov);
      std::copy_n(index + lo * elem_stride, lines, oi);
      for (Index i = lo + 1; i < hi; ++i) {
        const Scalar* v = values + i * elem_stride;
        const Index* ix = index + i * elem_stride;
        for (Index l = 0; l < lines; ++l)
          if (v[l] > ov[l]) {
            ov[l] = v[l];
            oi[l] = ix[l];
          }
      }
    }
    return;
  }
  for (Index l = 0; l < lines; ++l) {
    const Scalar* v = values + l * line_stride;
    const Index* ix = index ? index + l * line_stride : nullptr;
    for (Index o = 0; o < out; ++o) {
      const Index start = o * stride - pad;
      const Index lo = std::max<Index>(start, 0), hi = std::min(start + pool, in);
      if (lo >= hi) fail(ErrorCode::ShapeMismatch, "max-pool window contains only padding");
      Index best = lo;
      for (Index i = lo + 1; i < hi; ++i)
        if (v[i * elem_stride] > v[best * elem_stride]) best = i;
      out_values[l * out_line_stride + o * out_elem_stride] = v[best * elem_stride];
      out_index[l * out_line_stride + o * out_elem_stride] = ix ? ix[best * elem_stride] : best;
    }
  }
}

// One channel plane: writes out[positions] and argmax (offsets relative to
// `x`, shifted by `base`). Separable: along w, then h, then d. Taking the first
// maximum at every stage selects the first maximum in row-major window order.
template <typename Scalar>
void maxpool_plane(const Scalar* x, const PoolGeometry& g, Scalar* out, Index* argmax, Index base) {
  const Index d = g.in[0], h = g.in[1], w = g.in[2];
  const Index od = g.out[0], oh = g.out[1], ow = g.out[2];
  // Pass 1: [d, h, ow], indices are w offsets turned into flat offsets below.
  std::vector<Scalar> v1(std::size_t(d * h * ow));
  std::vector<Index> i1(v1.size());
  max_along_axis<Scalar>(x, nullptr, w, ow, g.pool, g.stride, g.pad[2], d * h, w, 1, ow, 1, v1.data(), i1.data());
  for (Index line = 0; line < d * h; ++line)
    for (Index o = 0; o < ow; ++o) i1[std::size_t(line * ow + o)] += line * w;
  // Pass 2: [d, oh, ow].
  std::vector<Scalar> v2(std::size_t(d * oh * ow));
  std::vector<Index> i2(v2.size());
  for (Index z = 0; z < d; ++z)
    max_along_axis<Scalar>(v1.data() + z * h * ow, i1.data() + z * h * ow, h, oh, g.pool, g.stride, g.pad[1], ow, 1,
                           ow, 1, ow, v2.data() + z * oh * ow, i2.data() + z * oh * ow);
  // Pass 3: [od, oh, ow].
  std::vector<Index> i3(std::size_t(od * oh * ow));
  max_along_axis<Scalar>(v2.data(), i2.data(), d, od, g.pool, g.stride, g.pad[0], oh * ow, 1, oh * ow, 1, oh * ow,
                         out, i3.data());
  for (std::size_t i = 0; i < i3.size(); ++i) argmax[i] = base + i3[i];
}

}  // namespace detail

// x: [C, D, H, W] or [N, C, D, H, W]; pooling runs per plane.
template <typename Scalar>
MaxPoolResult<Scalar> maxpool3d(const Tensor<Scalar>& x, Index pool, Index stride, Padding padding) {
  if (x.rank() != 4 && x.rank() != 5) fail(ErrorCode::ShapeMismatch, "max-pool input must be 4-D or 5-D");
  const Index lead = x.rank() - 3;
  const Shape spatial(x.shape().begin() + lead, x.shape().end());
  const detail::PoolGeometry g = detail::pool_geometry(spatial, pool, stride, padding);
  Shape out_shape(x.shape().begin(), x.shape().begin() + lead);
  out_shape.insert(out_shape.end(), g.out.begin(), g.out.end());
  const Index planes = shape_size(Shape(x.shape().begin(), x.shape().begin() + lead));
  const Index in_plane = g.in[0] * g.in[1] * g.in[2];
  const Index out_plane = g.out[0] * g.out[1] * g.out[2];
  MaxPoolResult<Scalar> result{Tensor<Scalar>(out_shape), std::vector<Index>(std::size_t(planes * out_plane))};
  parallel_for(std::size_t(planes), [&](std::size_t p) {
    const Index pi = Index(p);
    detail::maxpool_plane(x.data() + pi * in_plane, g, result.output.data() + pi * out_plane,
                          result.argmax.data() + pi * out_plane, pi * in_plane);
  });
  return result;
}

// Routes each upstream value to its recorded argmax.
template <typename Scalar>
Tensor<Scalar> maxpool3d_backward(const std::vector<Index>& argmax, const Shape& input_shape,
                                  const Tensor<Scalar>& upstream) {
  if (Index(argmax.size()) != upstream.size()) fail(ErrorCode::ShapeMismatch, "max-pool upstream gradient size");
  Tensor<Scalar> grad(input_shape);
  for (Index i = 0; i < upstream.size(); ++i) grad[argmax[std::size_t(i)]] += upstream[i];
  return grad;
}

// ---------------------------------------------------------------------------
// Global average pooling: [C,D,H,W] -> [C], or [N,C,D,H,W] -> [N,C].

template <typename Scalar>
Tensor<Scalar> avgpool3d_global(const Tensor<Scalar>& x) {
  if (x.rank() != 4 && x.rank() != 5) fail(ErrorCode::ShapeMismatch, "global pool input must be 4-D or 5-D");
  const Index lead = x.rank() - 3;
  Shape out_shape(x.shape().begin(), x.shape().begin() + lead);
  const Index planes = shape_size(out_shape);
  const Index spatial = x.size() / planes;
  Tensor<Scalar> out(out_shape);
  for (Index p = 0; p < planes; ++p) {
    double sum = 0.0;
    for (Index s = 0; s < spatial; ++s) sum += double(x[p * spatial + s]);
    out[p] = Scalar(sum / double(spatial));
  }
  return out;
}

template <typename Scalar>
Tensor<Scalar> avgpool3d_global_backward(const Shape& input_shape, const Tensor<Scalar>& upstream) {
  Tensor<Scalar> grad(input_shape);
  const Index planes = upstream.size();
  if (planes == 0 || grad.size() % planes != 0) fail(ErrorCode::ShapeMismatch, "global pool upstream gradient");
  const Index spatial = grad.size() / planes;
  for (Index p = 0; p < planes; ++p)
    grad.vec().segment(p * spatial, spatial).setConstant(upstream[p] / Scalar(spatial));
  return grad;
}

// ---------------------------------------------------------------------------
// Inverted dropout. The mask stores 0 or 1/keep_prob per element and is reused
// by the backward pass.

template <typename Scalar>
struct DropoutResult {
  Tensor<Scalar> output;
  Tensor<Scalar> mask;
};

template <typename Scalar, typename Rng>
DropoutResult<Scalar> dropout(const Tensor<Scalar>& x, double keep_prob, Mode mode, Rng& rng) {
  if (!(keep_prob > 0.0 && keep_prob <= 1.0))
    fail(ErrorCode::InvalidConfig, "keep probability must lie in (0, 1]");
  DropoutResult<Scalar> result{x, Tensor<Scalar>(x.shape(), Scalar(1))};
  if (mode == Mode::infer || keep_prob == 1.0) return result;
  std::bernoulli_distribution keep(keep_prob);
  const Scalar scale = Scalar(1.0 / keep_prob);
  for (Index i = 0; i < x.size(); ++i) result.mask[i] = keep(rng) ? scale : Scalar(0);
  result.output.vec() = x.vec().cwiseProduct(result.mask.vec());
  return result;
}

template <typename Scalar>
Tensor<Scalar> dropout_backward(const Tensor<Scalar>& mask, const Tensor<Scalar>& upstream) {
  if (mask.shape() != upstream.shape()) fail(ErrorCode::ShapeMismatch, "dropout upstream gradient shape");
  return Tensor<Scalar>(mask.shape(), mask.vec().cwiseProduct(upstream.vec()).eval());
}

// ---------------------------------------------------------------------------
// Fully connected layer on [F_in] or [N, F_in].

template <typename Scalar>
struct DenseParams {
  Tensor<Scalar> weights;  // [F_out, F_in]
  Tensor<Scalar> biases;   // [F_out]
};

template <typename Scalar>
struct DenseBackward {
  Tensor<Scalar> grad_input;
  Tensor<Scalar> grad_weights;
  Tensor<Scalar> grad_biases;
};

namespace detail {

template <typename Scalar>
void dense_dims(const Tensor<Scalar>& x, const DenseParams<Scalar>& p, Index& n, Index& f_in, Index& f_out) {
  if (p.weights.rank() != 2) fail(ErrorCode::ShapeMismatch, "dense weights must be [F_out, F_in]");
  f_out = p.weights.dim(0);
  f_in = p.weights.dim(1);
  if (p.biases.shape() != Shape{f_out}) fail(ErrorCode::ShapeMismatch, "dense bias shape");
  if (x.rank() == 1 && x.dim(0) == f_in) {
    n = 1;
  } else if (x.rank() == 2 && x.dim(1) == f_in) {
    n = x.dim(0);
  } else {
    fail(ErrorCode::ShapeMismatch, "dense input " + shape_string(x.shape()) + " vs F_in " + std::to_string(f_in));
  }
}

}  // namespace detail

template <typename Scalar>
Tensor<Scalar> dense(const Tensor<Scalar>& x, const DenseParams<Scalar>& params) {
  Index n = 0, f_in = 0, f_out = 0;
  detail::dense_dims(x, params, n, f_in, f_out);
  Tensor<Scalar> y(x.rank() == 1 ? Shape{f_out} : Shape{n, f_out});
  auto out = y.matrix(n, f_out);
  out.noalias() = x.matrix(n, f_in) * params.weights.matrix(f_out, f_in).transpose();
  out.rowwise() += params.biases.vec().transpose();
  return y;
}

template <typename Scalar>
DenseBackward<Scalar> dense_backward(const Tensor<Scalar>& x, const DenseParams<Scalar>& params,
                                     const Tensor<Scalar>& upstream) {
  Index n = 0, f_in = 0, f_out = 0;
  detail::dense_dims(x, params, n, f_in, f_out);
  if (upstream.size() != n * f_out) fail(ErrorCode::ShapeMismatch, "dense upstream gradient shape");
  DenseBackward<Scalar> out{Tensor<Scalar>(x.shape()), Tensor<Scalar>(params.weights.shape()),
                            Tensor<Scalar>(params.biases.shape())};
  const auto g = upstream.matrix(n, f_out);
  out.grad_input.matrix(n, f_in).noalias() = g * params.weights.matrix(f_out, f_in);
  out.grad_weights.matrix(f_out, f_in).noalias() = g.transpose() * x.matrix(n, f_in);
  out.grad_biases.vec() = g.colwise().sum().transpose();
  return out;
}

// ---------------------------------------------------------------------------
// Softmax over the last axis of [K] or [N, K], max-subtracted.

template <typename Scalar>
Tensor<Scalar> softmax(const Tensor<Scalar>& logits) {
  if (logits.rank() != 1 && logits.rank() != 2) fail(ErrorCode::InvalidShape, "softmax expects [K] or [N,K]");
  const Index k = logits.shape().back();
  if (k < 2) fail(ErrorCode::InvalidShape, "softmax needs at least two classes");
  if (!all_finite(logits)) fail(ErrorCode::NumericError, "non-finite logits");
  const Index n = logits.size() / k;
  Tensor<Scalar> probs(logits.shape());
  for (Index i = 0; i < n; ++i) {
    const auto row = logits.vec().segment(i * k, k).template cast<double>();
    const Eigen::VectorXd e = (row.array() - row.maxCoeff()).exp();
    probs.vec().segment(i * k, k) = (e / e.sum()).template cast<Scalar>();
  }
  return probs;
}

inline constexpr double kProbabilityFloor = 1e-12;

template <typename Scalar>
struct CrossEntropy {
  double loss = 0.0;
  Tensor<Scalar> grad_logits;  // gradient of the (mean) loss w.r.t. softmax inputs
};

namespace detail {

template <typename Scalar>
Index one_hot_index(const Scalar* target, Index k) {
  Index hot = -1;
  for (Index j = 0; j < k; ++j) {
    if (target[j] == Scalar(1) && hot < 0) {
      hot = j;
    } else if (target[j] != Scalar(0)) {
      fail(ErrorCode::InvalidTarget, "target is not one-hot");
    }
  }
  if (hot < 0) fail(ErrorCode::InvalidTarget, "target has no hot entry");
  return hot;
}

}  // namespace detail

// Categorical cross-entropy of softmax outputs. For [N, K] inputs the loss is
// the batch mean and the gradient is scaled by 1/N.
template <typename Scalar>
CrossEntropy<Scalar> cross_entropy(const Tensor<Scalar>& probabilities, const Tensor<Scalar>& one_hot_target) {
  if (probabilities.shape() != one_hot_target.shape())
    fail(ErrorCode::ShapeMismatch, "probabilities and target shapes differ");
  if (probabilities.rank() != 1 && probabilities.rank() != 2)
    fail(ErrorCode::InvalidShape, "cross-entropy expects [K] or [N,K]");
  const Index k = probabilities.shape().back();
  const Index n = probabilities.size() / k;
  CrossEntropy<Scalar> out{0.0, Tensor<Scalar>(probabilities.shape())};
  for (Index i = 0; i < n; ++i) {
    const Index hot = detail::one_hot_index(one_hot_target.data() + i * k, k);
    out.loss -= std::log(std::max(double(probabilities[i * k + hot]), kProbabilityFloor));
  }
  out.loss /= double(n);
  out.grad_logits.vec() = (probabilities.vec() - one_hot_target.vec()) / Scalar(n);
  return out;
}

}  // namespace volnet

#endif  // VOLNET_LAYERS_HPP
