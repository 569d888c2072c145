#ifndef TDSA_NN_HPP_
#define TDSA_NN_HPP_

#include <algorithm>
#include <cmath>
#include <limits>
#include <string>
#include <vector>

#include <Eigen/Core>

#include "tdsa/tape.hpp"
#include "tdsa/tensor.hpp"

// Layer primitives for the backbone: convolution, batch norm, max pooling and
// a dense layer. Convolutions lower to GEMM through im2col.
namespace tdsa::nn {

template <typename T>
using RowMatrix = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using MatMap = Eigen::Map<RowMatrix<T>>;
template <typename T>
using ConstMatMap = Eigen::Map<const RowMatrix<T>>;

struct ConvGeometry {
  std::size_t in_c, in_h, in_w, k, pad, out_h, out_w;
  std::size_t patch() const { return in_c * k * k; }
  std::size_t positions() const { return out_h * out_w; }
};

namespace detail {

// Valid output-column range [lo, hi) for kernel column kx.
inline std::pair<std::size_t, std::size_t> valid_cols(const ConvGeometry& g, std::size_t kx) {
  const long lo = std::max<long>(0, static_cast<long>(g.pad) - static_cast<long>(kx));
  const long hi = std::min<long>(static_cast<long>(g.out_w),
                                 static_cast<long>(g.in_w + g.pad) - static_cast<long>(kx));
  return {static_cast<std::size_t>(lo), static_cast<std::size_t>(std::max(lo, hi))};
}

// cols is (in_c*k*k) x ld row-major; this image fills columns [0, out_h*out_w).
template <typename T>
void im2col(const T* img, const ConvGeometry& g, T* cols, std::size_t ld) {
  for (std::size_t c = 0; c < g.in_c; ++c) {
    for (std::size_t ky = 0; ky < g.k; ++ky) {
      for (std::size_t kx = 0; kx < g.k; ++kx) {
        T* row = cols + ((c * g.k + ky) * g.k + kx) * ld;
        const auto [lo, hi] = valid_cols(g, kx);
        for (std::size_t oy = 0; oy < g.out_h; ++oy) {
          T* dst = row + oy * g.out_w;
          const long iy = static_cast<long>(oy + ky) - static_cast<long>(g.pad);
          if (iy < 0 || iy >= static_cast<long>(g.in_h)) {
            std::fill(dst, dst + g.out_w, T(0));
            continue;
          }
          const T* src = img + (c * g.in_h + static_cast<std::size_t>(iy)) * g.in_w + kx - g.pad;
          std::fill(dst, dst + lo, T(0));
          std::copy(src + lo, src + hi, dst + lo);
          std::fill(dst + hi, dst + g.out_w, T(0));
        }
      }
    }
  }
}

template <typename T>
void col2im_add(const T* cols, const ConvGeometry& g, T* img, std::size_t ld) {
  for (std::size_t c = 0; c < g.in_c; ++c) {
    for (std::size_t ky = 0; ky < g.k; ++ky) {
      for (std::size_t kx = 0; kx < g.k; ++kx) {
        const T* row = cols + ((c * g.k + ky) * g.k + kx) * ld;
        const auto [lo, hi] = valid_cols(g, kx);
        for (std::size_t oy = 0; oy < g.out_h; ++oy) {
          const long iy = static_cast<long>(oy + ky) - static_cast<long>(g.pad);
          if (iy < 0 || iy >= static_cast<long>(g.in_h)) continue;
          const T* src = row + oy * g.out_w;
          T* dst = img + (c * g.in_h + static_cast<std::size_t>(iy)) * g.in_w + kx - g.pad;
          for (std::size_t ox = lo; ox < hi; ++ox) dst[ox] += src[ox];
        }
      }
    }
  }
}

// Samples per GEMM so that the lowered block stays around 4M entries.
inline std::size_t conv_chunk(const ConvGeometry& g, std::size_t n) {
  const std::size_t per = std::max<std::size_t>(1, g.patch() * g.positions());
  return std::clamp<std::size_t>((std::size_t{1} << 22) / per, 1, n);
}

}  // namespace detail

// Stride-1 square convolution with zero padding.
// x: N x C x H x W, weight: O x C x k x k, bias: 1 x O x 1 x 1.
template <typename T>
Var<T> conv2d(const Var<T>& x, const Var<T>& weight, const Var<T>& bias, std::size_t pad) {
  const Shape xs = x.shape();
  const Shape ws = weight.shape();
  if (ws.c != xs.c || ws.h != ws.w) {
    throw DimensionError("conv2d: weight " + ws.str() + " incompatible with input " + xs.str());
  }
  if (bias.shape() != Shape{1, ws.n, 1, 1}) throw DimensionError("conv2d: bias shape " + bias.shape().str());
  if (xs.h + 2 * pad < ws.h || xs.w + 2 * pad < ws.w) throw DimensionError("conv2d: kernel larger than input");
  const ConvGeometry g{xs.c, xs.h, xs.w, ws.h, pad, xs.h + 2 * pad - ws.h + 1, xs.w + 2 * pad - ws.w + 1};
  const std::size_t O = ws.n, P = g.positions(), K = g.patch();
  const std::size_t chunk = detail::conv_chunk(g, xs.n);
  Tensor4<T> out(Shape{xs.n, O, g.out_h, g.out_w});
  std::vector<T> cols(K * P * chunk);
  RowMatrix<T> Y(O, P * chunk);
  ConstMatMap<T> W(weight.value().data().data(), O, K);
  const T* bv = bias.value().data().data();
  for (std::size_t b0 = 0; b0 < xs.n; b0 += chunk) {
    const std::size_t nb = std::min(chunk, xs.n - b0), ld = nb * P;
    for (std::size_t j = 0; j < nb; ++j) detail::im2col(&x.value().at(b0 + j, 0, 0, 0), g, cols.data() + j * P, ld);
    auto Yb = Y.leftCols(ld);
    Yb.noalias() = W * ConstMatMap<T>(cols.data(), K, ld);
    for (std::size_t j = 0; j < nb; ++j)
      for (std::size_t o = 0; o < O; ++o) {
        T* dst = &out.at(b0 + j, o, 0, 0);
        const T* src = Yb.data() + o * Y.cols() + j * P;
        for (std::size_t p = 0; p < P; ++p) dst[p] = src[p] + bv[o];
      }
  }
  return x.tape->record(
      std::move(out), {x.id, weight.id, bias.id},
      [ix = x.id, iw = weight.id, ib = bias.id, g, O, P, K, chunk](Tape<T>& t, std::size_t self) {
        const Tensor4<T>& gy = t.grad(self);
        auto* gx = t.grad_sink(ix);
        auto* gw = t.grad_sink(iw);
        auto* gb = t.grad_sink(ib);
        const Tensor4<T>& xv = t.value(ix);
        ConstMatMap<T> W(t.value(iw).data().data(), O, K);
        std::vector<T> cols(K * P * chunk);
        RowMatrix<T> dY(O, P * chunk);
        for (std::size_t b0 = 0; b0 < gy.n(); b0 += chunk) {
          const std::size_t nb = std::min(chunk, gy.n() - b0), ld = nb * P;
          for (std::size_t j = 0; j < nb; ++j)
            for (std::size_t o = 0; o < O; ++o) {
              std::copy_n(&gy.at(b0 + j, o, 0, 0), P, dY.data() + o * dY.cols() + j * P);
            }
          auto dYb = dY.leftCols(ld);
          if (gb) {
            for (std::size_t o = 0; o < O; ++o) (*gb)[o] += dYb.row(o).sum();
          }
          if (gw) {
            for (std::size_t j = 0; j < nb; ++j) detail::im2col(&xv.at(b0 + j, 0, 0, 0), g, cols.data() + j * P, ld);
            MatMap<T> dW(gw->data().data(), O, K);
            dW.noalias() += dYb * ConstMatMap<T>(cols.data(), K, ld).transpose();
          }
          if (gx) {
            MatMap<T> dcols(cols.data(), K, ld);
            dcols.noalias() = W.transpose() * dYb;
            for (std::size_t j = 0; j < nb; ++j) detail::col2im_add(cols.data() + j * P, g, &gx->at(b0 + j, 0, 0, 0), ld);
          }
        }
      },
      "conv2d");
}

// Batch statistics of a training-mode batch-norm call, for running averages.
template <typename T>
struct BatchStats {
  std::vector<T> mean;
  std::vector<T> var;  // biased (divides by count)
  std::size_t count = 0;
};

// Training-mode batch norm: normalizes with per-channel batch statistics.
// gamma, beta: 1 x C x 1 x 1.
template <typename T>
Var<T> batch_norm_train(const Var<T>& x, const Var<T>& gamma, const Var<T>& beta, T eps,
                        BatchStats<T>* stats = nullptr) {
  const Shape s = x.shape();
  if (gamma.shape() != Shape{1, s.c, 1, 1} || beta.shape() != Shape{1, s.c, 1, 1}) {
    throw DimensionError("batch_norm: affine params must be 1 x " + std::to_string(s.c) + " x 1 x 1");
  }
  const std::size_t M = s.n * s.plane();
  if (M == 0) throw DimensionError("batch_norm: empty batch");
  const Tensor4<T>& xv = x.value();
  std::vector<T> mean(s.c, T(0)), var(s.c, T(0)), inv_std(s.c);
  for (std::size_t c = 0; c < s.c; ++c) {
    T acc = T(0);
    for (std::size_t b = 0; b < s.n; ++b)
      for (T v : xv.plane(b, c)) acc += v;
    mean[c] = acc / static_cast<T>(M);
    T sq = T(0);
    for (std::size_t b = 0; b < s.n; ++b)
      for (T v : xv.plane(b, c)) sq += (v - mean[c]) * (v - mean[c]);
    var[c] = sq / static_cast<T>(M);
    inv_std[c] = T(1) / std::sqrt(var[c] + eps);
  }
  Tensor4<T> xhat(s);
  Tensor4<T> out(s);
  const T* gm = gamma.value().data().data();
  const T* bt = beta.value().data().data();
  for (std::size_t b = 0; b < s.n; ++b) {
    for (std::size_t c = 0; c < s.c; ++c) {
      auto in = xv.plane(b, c);
      auto xh = xhat.plane(b, c);
      auto o = out.plane(b, c);
      for (std::size_t i = 0; i < in.size(); ++i) {
        xh[i] = (in[i] - mean[c]) * inv_std[c];
        o[i] = gm[c] * xh[i] + bt[c];
      }
    }
  }
  if (stats) *stats = BatchStats<T>{mean, var, M};
  return x.tape->record(
      std::move(out), {x.id, gamma.id, beta.id},
      [ix = x.id, ig = gamma.id, ib = beta.id, xhat = std::move(xhat), inv_std = std::move(inv_std), M](
          Tape<T>& t, std::size_t self) {
        const Tensor4<T>& gy = t.grad(self);
        const Shape s = gy.shape();
        auto* gx = t.grad_sink(ix);
        auto* gg = t.grad_sink(ig);
        auto* gb = t.grad_sink(ib);
        const T* gm = t.value(ig).data().data();
        for (std::size_t c = 0; c < s.c; ++c) {
          T sum_dy = T(0), sum_dy_xhat = T(0);
          for (std::size_t b = 0; b < s.n; ++b) {
            auto dy = gy.plane(b, c);
            auto xh = xhat.plane(b, c);
            for (std::size_t i = 0; i < dy.size(); ++i) {
              sum_dy += dy[i];
              sum_dy_xhat += dy[i] * xh[i];
            }
          }
          if (gg) (*gg)[c] += sum_dy_xhat;
          if (gb) (*gb)[c] += sum_dy;
          if (gx) {
            const T k = gm[c] * inv_std[c] / static_cast<T>(M);
            for (std::size_t b = 0; b < s.n; ++b) {
              auto dy = gy.plane(b, c);
              auto xh = xhat.plane(b, c);
              auto dx = gx->plane(b, c);
              for (std::size_t i = 0; i < dy.size(); ++i) {
                dx[i] += k * (static_cast<T>(M) * dy[i] - sum_dy - xh[i] * sum_dy_xhat);
              }
            }
          }
        }
      },
      "batch_norm_train");
}

// Inference-mode batch norm with fixed statistics (constants, no gradient).
template <typename T>
Var<T> batch_norm_eval(const Var<T>& x, const Var<T>& gamma, const Var<T>& beta, std::span<const T> running_mean,
                       std::span<const T> running_var, T eps) {
  const Shape s = x.shape();
  if (gamma.shape() != Shape{1, s.c, 1, 1} || beta.shape() != Shape{1, s.c, 1, 1} ||
      running_mean.size() != s.c || running_var.size() != s.c) {
    throw DimensionError("batch_norm_eval: parameter sizes do not match " + std::to_string(s.c) + " channels");
  }
  std::vector<T> inv_std(s.c);
  for (std::size_t c = 0; c < s.c; ++c) inv_std[c] = T(1) / std::sqrt(running_var[c] + eps);
  const Tensor4<T>& xv = x.value();
  Tensor4<T> out(s);
  const T* gm = gamma.value().data().data();
  const T* bt = beta.value().data().data();
  for (std::size_t b = 0; b < s.n; ++b) {
    for (std::size_t c = 0; c < s.c; ++c) {
      auto in = xv.plane(b, c);
      auto o = out.plane(b, c);
      for (std::size_t i = 0; i < in.size(); ++i) o[i] = gm[c] * (in[i] - running_mean[c]) * inv_std[c] + bt[c];
    }
  }
  return x.tape->record(
      std::move(out), {x.id, gamma.id, beta.id},
      [ix = x.id, ig = gamma.id, ib = beta.id, inv_std = std::move(inv_std),
       mean = std::vector<T>(running_mean.begin(), running_mean.end())](Tape<T>& t, std::size_t self) {
        const Tensor4<T>& gy = t.grad(self);
        const Tensor4<T>& xv = t.value(ix);
        const T* gm = t.value(ig).data().data();
        auto* gx = t.grad_sink(ix);
        auto* gg = t.grad_sink(ig);
        auto* gb = t.grad_sink(ib);
        for (std::size_t b = 0; b < gy.n(); ++b) {
          for (std::size_t c = 0; c < gy.c(); ++c) {
            auto dy = gy.plane(b, c);
            auto in = xv.plane(b, c);
            for (std::size_t i = 0; i < dy.size(); ++i) {
              if (gx) gx->plane(b, c)[i] += dy[i] * gm[c] * inv_std[c];
              if (gg) (*gg)[c] += dy[i] * (in[i] - mean[c]) * inv_std[c];
              if (gb) (*gb)[c] += dy[i];
            }
          }
        }
      },
      "batch_norm_eval");
}

// Non-overlapping max pooling with window `k`; trailing rows/cols that do not
// fill a window are dropped. Ties route to the first element in scan order.
template <typename T>
Var<T> max_pool2d(const Var<T>& x, std::size_t k) {
  const Shape s = x.shape();
  if (k == 0 || s.h < k || s.w < k) throw DimensionError("max_pool2d: window larger than input " + s.str());
  const std::size_t oh = s.h / k, ow = s.w / k;
  Tensor4<T> out(Shape{s.n, s.c, oh, ow});
  std::vector<std::size_t> argmax(out.size());
  const Tensor4<T>& xv = x.value();
  for (std::size_t b = 0; b < s.n; ++b) {
    for (std::size_t c = 0; c < s.c; ++c) {
      for (std::size_t oy = 0; oy < oh; ++oy) {
        for (std::size_t ox = 0; ox < ow; ++ox) {
          std::size_t best = xv.index(b, c, oy * k, ox * k);
          for (std::size_t dy = 0; dy < k; ++dy) {
            for (std::size_t dx = 0; dx < k; ++dx) {
              const std::size_t i = xv.index(b, c, oy * k + dy, ox * k + dx);
              if (xv[i] > xv[best]) best = i;
            }
          }
          const std::size_t o = out.index(b, c, oy, ox);
          out[o] = xv[best];
          argmax[o] = best;
        }
      }
    }
  }
  return x.tape->record(std::move(out), {x.id},
                        [ix = x.id, argmax = std::move(argmax)](Tape<T>& t, std::size_t self) {
                          auto* gx = t.grad_sink(ix);
                          if (!gx) return;
                          const Tensor4<T>& g = t.grad(self);
                          for (std::size_t i = 0; i < g.size(); ++i) (*gx)[argmax[i]] += g[i];
                        },
                        "max_pool2d");
}

// Dense layer on N x K x 1 x 1 input. weight: O x K x 1 x 1, bias: 1 x O x 1 x 1.
template <typename T>
Var<T> linear(const Var<T>& x, const Var<T>& weight, const Var<T>& bias) {
  const Shape xs = x.shape();
  const Shape ws = weight.shape();
  if (xs.h != 1 || xs.w != 1 || ws.c != xs.c || ws.h != 1 || ws.w != 1) {
    throw DimensionError("linear: input " + xs.str() + " incompatible with weight " + ws.str());
  }
  if (bias.shape() != Shape{1, ws.n, 1, 1}) throw DimensionError("linear: bias shape " + bias.shape().str());
  const std::size_t N = xs.n, K = xs.c, O = ws.n;
  Tensor4<T> out(Shape{N, O, 1, 1});
  ConstMatMap<T> X(x.value().data().data(), N, K);
  ConstMatMap<T> W(weight.value().data().data(), O, K);
  MatMap<T> Y(out.data().data(), N, O);
  Y.noalias() = X * W.transpose();
  for (std::size_t n = 0; n < N; ++n)
    for (std::size_t o = 0; o < O; ++o) Y(n, o) += bias.value()[o];
  return x.tape->record(std::move(out), {x.id, weight.id, bias.id},
                        [ix = x.id, iw = weight.id, ib = bias.id, N, K, O](Tape<T>& t, std::size_t self) {
                          ConstMatMap<T> dY(t.grad(self).data().data(), N, O);
                          if (auto* gx = t.grad_sink(ix)) {
                            MatMap<T> dX(gx->data().data(), N, K);
                            dX.noalias() += dY * ConstMatMap<T>(t.value(iw).data().data(), O, K);
                          }
                          if (auto* gw = t.grad_sink(iw)) {
                            MatMap<T> dW(gw->data().data(), O, K);
                            dW.noalias() += dY.transpose() * ConstMatMap<T>(t.value(ix).data().data(), N, K);
                          }
                          if (auto* gb = t.grad_sink(ib)) {
                            for (std::size_t o = 0; o < O; ++o) (*gb)[o] += dY.col(o).sum();
                          }
                        },
                        "linear");
}

}  // namespace tdsa::nn

#endif  // TDSA_NN_HPP_
