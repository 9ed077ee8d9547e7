#ifndef NHL_OPS_HPP
#define NHL_OPS_HPP

// Numeric primitives shared by the model, the gradient tape and the Hebbian
// layer. Reductions over batch/spatial axes accumulate in double and store the
// result in the tensor scalar type; matrix products use Eigen's GEMM, which
// accumulates in the scalar type.

#include "nhl/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <string>
#include <vector>

namespace nhl {

inline constexpr double kBatchNormEps = 1e-5;

namespace detail {

inline void require(bool ok, const std::string& what) {
  if (!ok) throw DimensionError(what);
}

template <typename T>
void require_rank(const Tensor<T>& t, Index r, const char* name) {
  if (t.rank() != r)
    throw DimensionError(std::string(name) + ": expected rank " + std::to_string(r) + ", got " +
                         shape_string(t.shape()));
}

}  // namespace detail

template <typename T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b) {
  detail::require_rank(a, 2, "matmul lhs");
  detail::require_rank(b, 2, "matmul rhs");
  detail::require(a.dim(1) == b.dim(0), "matmul: inner dimensions differ " + shape_string(a.shape()) +
                                            " x " + shape_string(b.shape()));
  Tensor<T> out({a.dim(0), b.dim(1)});
  out.matrix().noalias() = a.matrix() * b.matrix();
  return out;
}

/// Output geometry of a convolution / patch extraction.
struct ConvGeometry {
  Index batch = 0, channels = 0, height = 0, width = 0;
  Index kernel_h = 0, kernel_w = 0, stride = 1, padding = 0;
  Index out_h = 0, out_w = 0;

  Index patch_size() const { return channels * kernel_h * kernel_w; }
  Index positions() const { return out_h * out_w; }
};

inline ConvGeometry conv_geometry(const Shape& input, Index kh, Index kw, Index stride, Index padding) {
  if (input.size() != 4) throw DimensionError("convolution input must be N x C x H x W, got " + shape_string(input));
  if (stride < 1) throw DimensionError("convolution stride must be >= 1");
  if (padding < 0) throw DimensionError("convolution padding must be >= 0");
  ConvGeometry g;
  g.batch = input[0];
  g.channels = input[1];
  g.height = input[2];
  g.width = input[3];
  g.kernel_h = kh;
  g.kernel_w = kw;
  g.stride = stride;
  g.padding = padding;
  const Index span_h = g.height + 2 * padding - kh;
  const Index span_w = g.width + 2 * padding - kw;
  if (kh < 1 || kw < 1 || span_h < 0 || span_w < 0)
    throw DimensionError("convolution kernel " + std::to_string(kh) + "x" + std::to_string(kw) +
                         " exceeds padded input " + shape_string(input));
  if (span_h % stride != 0 || span_w % stride != 0)
    throw DimensionError("convolution output size is not integral for input " + shape_string(input) +
                         ", kernel " + std::to_string(kh) + ", stride " + std::to_string(stride) +
                         ", padding " + std::to_string(padding));
  g.out_h = span_h / stride + 1;
  g.out_w = span_w / stride + 1;
  return g;
}

namespace detail {

// One image -> D x L column matrix (D = C*kh*kw in (c, i, j) order, L = out_h*out_w).
template <typename T>
void image_to_columns(const T* image, const ConvGeometry& g, T* cols) {
  const Index L = g.positions();
  for (Index c = 0; c < g.channels; ++c) {
    const T* plane = image + c * g.height * g.width;
    for (Index i = 0; i < g.kernel_h; ++i) {
      for (Index j = 0; j < g.kernel_w; ++j) {
        T* row = cols + ((c * g.kernel_h + i) * g.kernel_w + j) * L;
        for (Index oh = 0; oh < g.out_h; ++oh) {
          const Index h = oh * g.stride - g.padding + i;
          T* dst = row + oh * g.out_w;
          if (h < 0 || h >= g.height) {
            std::fill(dst, dst + g.out_w, T(0));
            continue;
          }
          for (Index ow = 0; ow < g.out_w; ++ow) {
            const Index w = ow * g.stride - g.padding + j;
            dst[ow] = (w < 0 || w >= g.width) ? T(0) : plane[h * g.width + w];
          }
        }
      }
    }
  }
}

// Adjoint of image_to_columns: accumulates columns back into an image.
template <typename T>
void columns_to_image(const T* cols, const ConvGeometry& g, T* image) {
  const Index L = g.positions();
  for (Index c = 0; c < g.channels; ++c) {
    T* plane = image + c * g.height * g.width;
    for (Index i = 0; i < g.kernel_h; ++i) {
      for (Index j = 0; j < g.kernel_w; ++j) {
        const T* row = cols + ((c * g.kernel_h + i) * g.kernel_w + j) * L;
        for (Index oh = 0; oh < g.out_h; ++oh) {
          const Index h = oh * g.stride - g.padding + i;
          if (h < 0 || h >= g.height) continue;
          for (Index ow = 0; ow < g.out_w; ++ow) {
            const Index w = ow * g.stride - g.padding + j;
            if (w >= 0 && w < g.width) plane[h * g.width + w] += row[oh * g.out_w + ow];
          }
        }
      }
    }
  }
}

}  // namespace detail

/// Patch matrix: one row per output location, rows ordered (image, out_row, out_col);
/// columns ordered (channel, kernel_row, kernel_col), matching a K x C x kh x kw kernel
/// flattened to K x D.
template <typename T>
Tensor<T> im2col(const Tensor<T>& input, Index kh, Index kw, Index stride, Index padding) {
  const ConvGeometry g = conv_geometry(input.shape(), kh, kw, stride, padding);
  const Index D = g.patch_size(), L = g.positions();
  Tensor<T> out({g.batch * L, D});
  std::vector<T> cols(static_cast<std::size_t>(D * L));
  const Index image_size = g.channels * g.height * g.width;
  for (Index n = 0; n < g.batch; ++n) {
    detail::image_to_columns(input.raw() + n * image_size, g, cols.data());
    MatrixMap<T>(out.raw() + n * L * D, L, D) = ConstMatrixMap<T>(cols.data(), D, L).transpose();
  }
  return out;
}

/// Cross-correlation with zero padding.
template <typename T>
Tensor<T> conv2d(const Tensor<T>& input, const Tensor<T>& kernel, Index stride, Index padding) {
  detail::require_rank(kernel, 4, "conv2d kernel");
  const ConvGeometry g = conv_geometry(input.shape(), kernel.dim(2), kernel.dim(3), stride, padding);
  detail::require(kernel.dim(1) == g.channels, "conv2d: kernel channels " + std::to_string(kernel.dim(1)) +
                                                   " != input channels " + std::to_string(g.channels));
  const Index K = kernel.dim(0), D = g.patch_size(), L = g.positions();
  Tensor<T> out({g.batch, K, g.out_h, g.out_w});
  std::vector<T> cols(static_cast<std::size_t>(D * L));
  ConstMatrixMap<T> weights(kernel.raw(), K, D);
  const Index image_size = g.channels * g.height * g.width;
  for (Index n = 0; n < g.batch; ++n) {
    detail::image_to_columns(input.raw() + n * image_size, g, cols.data());
    MatrixMap<T>(out.raw() + n * K * L, K, L).noalias() = weights * ConstMatrixMap<T>(cols.data(), D, L);
  }
  return out;
}

/// Gradient of conv2d with respect to its input.
template <typename T>
Tensor<T> conv2d_backward_input(const Tensor<T>& grad_out, const Tensor<T>& kernel, const Shape& input_shape,
                                Index stride, Index padding) {
  const ConvGeometry g = conv_geometry(input_shape, kernel.dim(2), kernel.dim(3), stride, padding);
  const Index K = kernel.dim(0), D = g.patch_size(), L = g.positions();
  Tensor<T> grad_in(input_shape);
  RowMatrix<T> cols(D, L);
  ConstMatrixMap<T> weights(kernel.raw(), K, D);
  const Index image_size = g.channels * g.height * g.width;
  for (Index n = 0; n < g.batch; ++n) {
    cols.noalias() = weights.transpose() * ConstMatrixMap<T>(grad_out.raw() + n * K * L, K, L);
    detail::columns_to_image(cols.data(), g, grad_in.raw() + n * image_size);
  }
  return grad_in;
}

/// Gradient of conv2d with respect to its kernel.
template <typename T>
Tensor<T> conv2d_backward_weight(const Tensor<T>& grad_out, const Tensor<T>& input, const Shape& kernel_shape,
                                 Index stride, Index padding) {
  const ConvGeometry g = conv_geometry(input.shape(), kernel_shape[2], kernel_shape[3], stride, padding);
  const Index K = kernel_shape[0], D = g.patch_size(), L = g.positions();
  Tensor<T> grad_w(kernel_shape);
  MatrixMap<T> gw(grad_w.raw(), K, D);
  std::vector<T> cols(static_cast<std::size_t>(D * L));
  const Index image_size = g.channels * g.height * g.width;
  for (Index n = 0; n < g.batch; ++n) {
    detail::image_to_columns(input.raw() + n * image_size, g, cols.data());
    gw.noalias() += ConstMatrixMap<T>(grad_out.raw() + n * K * L, K, L) *
                    ConstMatrixMap<T>(cols.data(), D, L).transpose();
  }
  return grad_w;
}

/// What batch-norm backward needs from the forward pass.
template <typename T>
struct BatchNormCache {
  Tensor<T> normalized;            // x_hat
  std::vector<double> mean, var;   // biased batch statistics per channel
  std::vector<double> inv_std;
  bool batch_stats = true;
};

/// Batch normalization using the current batch's per-channel mean and biased variance.
template <typename T>
std::pair<Tensor<T>, BatchNormCache<T>> batchnorm_forward(const Tensor<T>& x, const Tensor<T>& gamma,
                                                          const Tensor<T>& beta, double eps = kBatchNormEps) {
  detail::require_rank(x, 4, "batchnorm input");
  const Index N = x.dim(0), C = x.dim(1), HW = x.dim(2) * x.dim(3);
  detail::require(gamma.size() == C && beta.size() == C, "batchnorm: affine parameters do not match channels");
  if (N * HW < 2) throw ParameterError("batchnorm with batch statistics needs at least 2 values per channel");
  const double M = static_cast<double>(N * HW);
  BatchNormCache<T> cache;
  cache.normalized = Tensor<T>(x.shape());
  cache.mean.assign(static_cast<std::size_t>(C), 0.0);
  cache.var.assign(static_cast<std::size_t>(C), 0.0);
  cache.inv_std.assign(static_cast<std::size_t>(C), 0.0);
  Tensor<T> y(x.shape());
  const T* xp = x.raw();
  for (Index c = 0; c < C; ++c) {
    double sum = 0.0;
    for (Index n = 0; n < N; ++n) {
      const T* p = xp + (n * C + c) * HW;
      for (Index i = 0; i < HW; ++i) sum += static_cast<double>(p[i]);
    }
    const double mean = sum / M;
    double sq = 0.0;
    for (Index n = 0; n < N; ++n) {
      const T* p = xp + (n * C + c) * HW;
      for (Index i = 0; i < HW; ++i) {
        const double d = static_cast<double>(p[i]) - mean;
        sq += d * d;
      }
    }
    const double var = sq / M;
    const double inv_std = 1.0 / std::sqrt(var + eps);
    const double g = static_cast<double>(gamma[c]), b = static_cast<double>(beta[c]);
    for (Index n = 0; n < N; ++n) {
      const Index off = (n * C + c) * HW;
      for (Index i = 0; i < HW; ++i) {
        const T xhat = static_cast<T>((static_cast<double>(xp[off + i]) - mean) * inv_std);
        cache.normalized[off + i] = xhat;
        y[off + i] = static_cast<T>(g * static_cast<double>(xhat) + b);
      }
    }
    cache.mean[static_cast<std::size_t>(c)] = mean;
    cache.var[static_cast<std::size_t>(c)] = var;
    cache.inv_std[static_cast<std::size_t>(c)] = inv_std;
  }
  return {std::move(y), std::move(cache)};
}

/// Batch normalization with stored (running) statistics.
template <typename T>
std::pair<Tensor<T>, BatchNormCache<T>> batchnorm_inference(const Tensor<T>& x, const Tensor<T>& gamma,
                                                            const Tensor<T>& beta, const Tensor<T>& running_mean,
                                                            const Tensor<T>& running_var,
                                                            double eps = kBatchNormEps) {
  detail::require_rank(x, 4, "batchnorm input");
  const Index N = x.dim(0), C = x.dim(1), HW = x.dim(2) * x.dim(3);
  detail::require(gamma.size() == C && beta.size() == C && running_mean.size() == C && running_var.size() == C,
                  "batchnorm: parameters do not match channels");
  BatchNormCache<T> cache;
  cache.batch_stats = false;
  cache.normalized = Tensor<T>(x.shape());
  Tensor<T> y(x.shape());
  for (Index c = 0; c < C; ++c) {
    const double mean = static_cast<double>(running_mean[c]);
    const double var = static_cast<double>(running_var[c]);
    const double inv_std = 1.0 / std::sqrt(var + eps);
    const double g = static_cast<double>(gamma[c]), b = static_cast<double>(beta[c]);
    for (Index n = 0; n < N; ++n) {
      const Index off = (n * C + c) * HW;
      for (Index i = 0; i < HW; ++i) {
        const T xhat = static_cast<T>((static_cast<double>(x[off + i]) - mean) * inv_std);
        cache.normalized[off + i] = xhat;
        y[off + i] = static_cast<T>(g * static_cast<double>(xhat) + b);
      }
    }
    cache.mean.push_back(mean);
    cache.var.push_back(var);
    cache.inv_std.push_back(inv_std);
  }
  return {std::move(y), std::move(cache)};
}

template <typename T>
struct BatchNormGrads {
  Tensor<T> input, gamma, beta;
};

/// Exact gradient of either batch-norm mode. In batch-stats mode the gradient
/// flows through the batch mean and variance.
template <typename T>
BatchNormGrads<T> batchnorm_backward(const Tensor<T>& grad_out, const BatchNormCache<T>& cache,
                                     const Tensor<T>& gamma) {
  const Tensor<T>& xhat = cache.normalized;
  const Index N = xhat.dim(0), C = xhat.dim(1), HW = xhat.dim(2) * xhat.dim(3);
  const double M = static_cast<double>(N * HW);
  BatchNormGrads<T> grads{Tensor<T>(xhat.shape()), Tensor<T>({C}), Tensor<T>({C})};
  for (Index c = 0; c < C; ++c) {
    double sum_dy = 0.0, sum_dy_xhat = 0.0;
    for (Index n = 0; n < N; ++n) {
      const Index off = (n * C + c) * HW;
      for (Index i = 0; i < HW; ++i) {
        const double dy = static_cast<double>(grad_out[off + i]);
        sum_dy += dy;
        sum_dy_xhat += dy * static_cast<double>(xhat[off + i]);
      }
    }
    grads.beta[c] = static_cast<T>(sum_dy);
    grads.gamma[c] = static_cast<T>(sum_dy_xhat);
    const double scale = static_cast<double>(gamma[c]) * cache.inv_std[static_cast<std::size_t>(c)];
    for (Index n = 0; n < N; ++n) {
      const Index off = (n * C + c) * HW;
      for (Index i = 0; i < HW; ++i) {
        const double dy = static_cast<double>(grad_out[off + i]);
        if (cache.batch_stats) {
          grads.input[off + i] = static_cast<T>(
              scale / M * (M * dy - sum_dy - static_cast<double>(xhat[off + i]) * sum_dy_xhat));
        } else {
          grads.input[off + i] = static_cast<T>(scale * dy);
        }
      }
    }
  }
  return grads;
}

/// Temperature softmax along `axis`, max-subtracted and evaluated in double.
template <typename T>
Tensor<T> softmax(const Tensor<T>& u, double temperature, Index axis = -1) {
  if (!(temperature > 0.0)) throw ParameterError("softmax temperature must be > 0");
  if (u.rank() == 0) throw DimensionError("softmax of an empty tensor");
  if (axis < 0) axis += u.rank();
  if (axis < 0 || axis >= u.rank()) throw DimensionError("softmax axis out of range");
  Index outer = 1, inner = 1;
  for (Index i = 0; i < axis; ++i) outer *= u.dim(i);
  for (Index i = axis + 1; i < u.rank(); ++i) inner *= u.dim(i);
  const Index len = u.dim(axis);
  Tensor<T> y(u.shape());
  std::vector<double> buf(static_cast<std::size_t>(len));
  for (Index o = 0; o < outer; ++o) {
    for (Index in = 0; in < inner; ++in) {
      const Index base = o * len * inner + in;
      double mx = -std::numeric_limits<double>::infinity();
      for (Index k = 0; k < len; ++k) mx = std::max(mx, static_cast<double>(u[base + k * inner]) / temperature);
      double total = 0.0;
      for (Index k = 0; k < len; ++k) {
        buf[static_cast<std::size_t>(k)] = std::exp(static_cast<double>(u[base + k * inner]) / temperature - mx);
        total += buf[static_cast<std::size_t>(k)];
      }
      for (Index k = 0; k < len; ++k) y[base + k * inner] = static_cast<T>(buf[static_cast<std::size_t>(k)] / total);
    }
  }
  return y;
}

/// Row-wise log-softmax of an N x C matrix (temperature 1).
template <typename T>
Tensor<T> log_softmax_rows(const Tensor<T>& logits) {
  detail::require_rank(logits, 2, "log_softmax logits");
  const Index N = logits.dim(0), C = logits.dim(1);
  Tensor<T> out(logits.shape());
  for (Index n = 0; n < N; ++n) {
    const T* z = logits.raw() + n * C;
    double mx = -std::numeric_limits<double>::infinity();
    for (Index c = 0; c < C; ++c) mx = std::max(mx, static_cast<double>(z[c]));
    double total = 0.0;
    for (Index c = 0; c < C; ++c) total += std::exp(static_cast<double>(z[c]) - mx);
    const double lse = mx + std::log(total);
    for (Index c = 0; c < C; ++c) out[n * C + c] = static_cast<T>(static_cast<double>(z[c]) - lse);
  }
  return out;
}

template <typename T>
Tensor<T> relu(const Tensor<T>& x) {
  Tensor<T> y(x.shape());
  for (Index i = 0; i < x.size(); ++i) y[i] = x[i] > T(0) ? x[i] : T(0);
  return y;
}

template <typename T>
Tensor<T> relu_backward(const Tensor<T>& grad_out, const Tensor<T>& output) {
  Tensor<T> g(output.shape());
  for (Index i = 0; i < output.size(); ++i) g[i] = output[i] > T(0) ? grad_out[i] : T(0);
  return g;
}

template <typename T>
Tensor<T> maxpool2d(const Tensor<T>& x, Index kernel, Index stride) {
  const ConvGeometry g = conv_geometry(x.shape(), kernel, kernel, stride, 0);
  Tensor<T> y({g.batch, g.channels, g.out_h, g.out_w});
  for (Index n = 0; n < g.batch; ++n)
    for (Index c = 0; c < g.channels; ++c)
      for (Index oh = 0; oh < g.out_h; ++oh)
        for (Index ow = 0; ow < g.out_w; ++ow) {
          T best = x.at(n, c, oh * stride, ow * stride);
          for (Index i = 0; i < kernel; ++i)
            for (Index j = 0; j < kernel; ++j) best = std::max(best, x.at(n, c, oh * stride + i, ow * stride + j));
          y.at(n, c, oh, ow) = best;
        }
  return y;
}

/// N x C x H x W -> N x C spatial mean.
template <typename T>
Tensor<T> global_avg_pool(const Tensor<T>& x) {
  detail::require_rank(x, 4, "global_avg_pool input");
  const Index N = x.dim(0), C = x.dim(1), HW = x.dim(2) * x.dim(3);
  Tensor<T> y({N, C});
  for (Index nc = 0; nc < N * C; ++nc) {
    double sum = 0.0;
    for (Index i = 0; i < HW; ++i) sum += static_cast<double>(x[nc * HW + i]);
    y[nc] = static_cast<T>(sum / static_cast<double>(HW));
  }
  return y;
}

template <typename T>
Tensor<T> global_avg_pool_backward(const Tensor<T>& grad_out, const Shape& input_shape) {
  const Index HW = input_shape[2] * input_shape[3];
  Tensor<T> g(input_shape);
  for (Index nc = 0; nc < grad_out.size(); ++nc) {
    const T v = static_cast<T>(static_cast<double>(grad_out[nc]) / static_cast<double>(HW));
    std::fill(g.raw() + nc * HW, g.raw() + (nc + 1) * HW, v);
  }
  return g;
}

/// y = x W^T + b with x: N x F, W: O x F, b: O.
template <typename T>
Tensor<T> linear(const Tensor<T>& x, const Tensor<T>& weight, const Tensor<T>& bias) {
  detail::require_rank(x, 2, "linear input");
  detail::require_rank(weight, 2, "linear weight");
  const Index N = x.dim(0), F = x.dim(1), O = weight.dim(0);
  detail::require(weight.dim(1) == F && bias.size() == O, "linear: weight " + shape_string(weight.shape()) +
                                                              " incompatible with input " + shape_string(x.shape()));
  Tensor<T> y({N, O});
  for (Index n = 0; n < N; ++n)
    for (Index o = 0; o < O; ++o) {
      double acc = static_cast<double>(bias[o]);
      for (Index f = 0; f < F; ++f) acc += static_cast<double>(x[n * F + f]) * static_cast<double>(weight[o * F + f]);
      y[n * O + o] = static_cast<T>(acc);
    }
  return y;
}

template <typename T>
struct LinearGrads {
  Tensor<T> input, weight, bias;
};

template <typename T>
LinearGrads<T> linear_backward(const Tensor<T>& grad_out, const Tensor<T>& x, const Tensor<T>& weight) {
  const Index N = x.dim(0), F = x.dim(1), O = weight.dim(0);
  LinearGrads<T> g{Tensor<T>(x.shape()), Tensor<T>(weight.shape()), Tensor<T>({O})};
  for (Index n = 0; n < N; ++n)
    for (Index f = 0; f < F; ++f) {
      double acc = 0.0;
      for (Index o = 0; o < O; ++o) acc += static_cast<double>(grad_out[n * O + o]) * static_cast<double>(weight[o * F + f]);
      g.input[n * F + f] = static_cast<T>(acc);
    }
  for (Index o = 0; o < O; ++o) {
    for (Index f = 0; f < F; ++f) {
      double acc = 0.0;
      for (Index n = 0; n < N; ++n) acc += static_cast<double>(grad_out[n * O + o]) * static_cast<double>(x[n * F + f]);
      g.weight[o * F + f] = static_cast<T>(acc);
    }
    double acc = 0.0;
    for (Index n = 0; n < N; ++n) acc += static_cast<double>(grad_out[n * O + o]);
    g.bias[o] = static_cast<T>(acc);
  }
  return g;
}

/// Mean cross-entropy of N x C logits against integer labels.
template <typename T>
double cross_entropy(const Tensor<T>& logits, const std::vector<int>& labels) {
  detail::require_rank(logits, 2, "cross_entropy logits");
  const Index N = logits.dim(0), C = logits.dim(1);
  detail::require(static_cast<Index>(labels.size()) == N, "cross_entropy: label count != batch size");
  const Tensor<T> logp = log_softmax_rows(logits);
  double total = 0.0;
  for (Index n = 0; n < N; ++n) {
    const int y = labels[static_cast<std::size_t>(n)];
    if (y < 0 || y >= C) throw ParameterError("cross_entropy: label " + std::to_string(y) + " out of range");
    total -= static_cast<double>(logp[n * C + y]);
  }
  return total / static_cast<double>(N);
}

/// d cross_entropy / d logits = (softmax - onehot) / N.
template <typename T>
Tensor<T> cross_entropy_backward(const Tensor<T>& logits, const std::vector<int>& labels) {
  const Index N = logits.dim(0), C = logits.dim(1);
  const Tensor<T> logp = log_softmax_rows(logits);
  Tensor<T> g(logits.shape());
  for (Index n = 0; n < N; ++n)
    for (Index c = 0; c < C; ++c) {
      const double p = std::exp(static_cast<double>(logp[n * C + c]));
      const double onehot = c == labels[static_cast<std::size_t>(n)] ? 1.0 : 0.0;
      g[n * C + c] = static_cast<T>((p - onehot) / static_cast<double>(N));
    }
  return g;
}

/// Per-row Shannon entropy (nats) of softmax(logits).
template <typename T>
std::vector<double> entropy_rows(const Tensor<T>& logits) {
  const Tensor<T> logp = log_softmax_rows(logits);
  const Index N = logits.dim(0), C = logits.dim(1);
  std::vector<double> h(static_cast<std::size_t>(N), 0.0);
  for (Index n = 0; n < N; ++n) {
    double acc = 0.0;
    for (Index c = 0; c < C; ++c) {
      const double lp = static_cast<double>(logp[n * C + c]);
      acc -= std::exp(lp) * lp;
    }
    h[static_cast<std::size_t>(n)] = acc;
  }
  return h;
}

/// Gradient of the batch-mean entropy: dH/dz_j = -p_j (log p_j + H) / N.
template <typename T>
Tensor<T> entropy_backward(const Tensor<T>& logits) {
  const Tensor<T> logp = log_softmax_rows(logits);
  const Index N = logits.dim(0), C = logits.dim(1);
  Tensor<T> g(logits.shape());
  for (Index n = 0; n < N; ++n) {
    double h = 0.0;
    for (Index c = 0; c < C; ++c) {
      const double lp = static_cast<double>(logp[n * C + c]);
      h -= std::exp(lp) * lp;
    }
    for (Index c = 0; c < C; ++c) {
      const double lp = static_cast<double>(logp[n * C + c]);
      g[n * C + c] = static_cast<T>(-std::exp(lp) * (lp + h) / static_cast<double>(N));
    }
  }
  return g;
}

template <typename T>
std::vector<int> argmax_rows(const Tensor<T>& logits) {
  const Index N = logits.dim(0), C = logits.dim(1);
  std::vector<int> out(static_cast<std::size_t>(N));
  for (Index n = 0; n < N; ++n) {
    const T* z = logits.raw() + n * C;
    out[static_cast<std::size_t>(n)] = static_cast<int>(std::max_element(z, z + C) - z);
  }
  return out;
}

}  // namespace nhl

#endif  // NHL_OPS_HPP
