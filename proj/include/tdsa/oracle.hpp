#ifndef TDSA_ORACLE_HPP_
#define TDSA_ORACLE_HPP_

#include <cmath>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "tdsa/error.hpp"
#include "tdsa/loss.hpp"
#include "tdsa/tensor.hpp"

// Independent references for the loss stack. Everything here is written as
// straight loops over the Tensor4 container; nothing calls into ops, nn or
// the resample tap tables.
namespace tdsa::oracle {

struct FdConfig {
  double step = 1e-6;
};

using ScalarFn = std::function<double(const Tensor4<double>&)>;

// Central differences, one coordinate at a time.
inline Tensor4<double> fd_gradient(const ScalarFn& f, const Tensor4<double>& x, const FdConfig& cfg = {}) {
  if (!(cfg.step > 0.0)) throw ContractError("fd_gradient: step must be positive");
  Tensor4<double> probe = x;
  Tensor4<double> grad(x.shape());
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double orig = probe[i];
    probe[i] = orig + cfg.step;
    const double up = f(probe);
    probe[i] = orig - cfg.step;
    const double down = f(probe);
    probe[i] = orig;
    if (!std::isfinite(up) || !std::isfinite(down)) {
      throw NumericError("fd_gradient: non-finite function value at coordinate " + std::to_string(i));
    }
    grad[i] = (up - down) / (2.0 * cfg.step);
  }
  return grad;
}

// Relative error with a small absolute floor so that coordinates whose true
// gradient is ~0 are judged on absolute error instead.
inline double rel_error(double a, double b, double floor = 1e-6) {
  const double scale = std::max({std::abs(a), std::abs(b), floor});
  return std::abs(a - b) / scale;
}

inline double max_rel_error(const Tensor4<double>& a, const Tensor4<double>& b, double floor = 1e-6) {
  require_same_shape(a.shape(), b.shape(), "max_rel_error");
  double worst = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) worst = std::max(worst, rel_error(a[i], b[i], floor));
  return worst;
}

// ---------------------------------------------------------------------------
// Naive-loop loss formulas.

// Batch-mean cross entropy of softmax(scores[b][:]) against labels.
inline double naive_cross_entropy(const std::vector<std::vector<double>>& scores, std::span<const int> labels) {
  double total = 0.0;
  for (std::size_t b = 0; b < scores.size(); ++b) {
    double denom = 0.0;
    for (double s : scores[b]) denom += std::exp(s);
    total += -std::log(std::exp(scores[b][static_cast<std::size_t>(labels[b])]) / denom);
  }
  return total / static_cast<double>(scores.size());
}

// g(F^i) for every sample and class: mean over pixels of the max over the
// masked channels of the group.
inline std::vector<std::vector<double>> naive_class_responses(const Tensor4<double>& f, std::size_t classes,
                                                              std::size_t xi, const MaskSet& masks) {
  std::vector<std::vector<double>> g(f.n(), std::vector<double>(classes, 0.0));
  for (std::size_t b = 0; b < f.n(); ++b) {
    for (std::size_t i = 0; i < classes; ++i) {
      double acc = 0.0;
      for (std::size_t y = 0; y < f.h(); ++y) {
        for (std::size_t x = 0; x < f.w(); ++x) {
          double best = masks.groups[i][0] * f.at(b, i * xi, y, x);
          for (std::size_t m = 1; m < xi; ++m) {
            double v = masks.groups[i][m] * f.at(b, i * xi + m, y, x);
            if (v > best) best = v;
          }
          acc += best;
        }
      }
      g[b][i] = acc / static_cast<double>(f.h() * f.w());
    }
  }
  return g;
}

inline double naive_discriminality(const Tensor4<double>& f, std::span<const int> labels, std::size_t classes,
                                   std::size_t xi, const MaskSet& masks) {
  return naive_cross_entropy(naive_class_responses(f, classes, xi, masks), labels);
}

// h(F^i) for one sample and class group.
inline double naive_group_diversity(const Tensor4<double>& f, std::size_t b, std::size_t i, std::size_t xi) {
  std::vector<double> denom(xi, 0.0);
  for (std::size_t m = 0; m < xi; ++m)
    for (std::size_t y = 0; y < f.h(); ++y)
      for (std::size_t x = 0; x < f.w(); ++x) denom[m] += std::exp(f.at(b, i * xi + m, y, x));
  double h = 0.0;
  for (std::size_t y = 0; y < f.h(); ++y) {
    for (std::size_t x = 0; x < f.w(); ++x) {
      double best = 0.0;
      for (std::size_t m = 0; m < xi; ++m) best = std::max(best, std::exp(f.at(b, i * xi + m, y, x)) / denom[m]);
      h += best;
    }
  }
  return h;
}

inline double naive_diversity(const Tensor4<double>& f, std::size_t classes, std::size_t xi) {
  double total = 0.0;
  for (std::size_t b = 0; b < f.n(); ++b) {
    double per_sample = 0.0;
    for (std::size_t i = 0; i < classes; ++i) per_sample += naive_group_diversity(f, b, i, xi);
    total += per_sample / static_cast<double>(classes);
  }
  return total / static_cast<double>(f.n());
}

// 1-D interpolation kernel weight at distance d from the sample point.
inline double naive_kernel(UpsampleMethod m, double d) {
  const double ad = std::abs(d);
  switch (m) {
    case UpsampleMethod::kBilinear:
      return ad < 1.0 ? 1.0 - ad : 0.0;
    case UpsampleMethod::kBicubic: {
      const double a = -0.5;
      if (ad <= 1.0) return (a + 2.0) * ad * ad * ad - (a + 3.0) * ad * ad + 1.0;
      if (ad < 2.0) return a * ad * ad * ad - 5.0 * a * ad * ad + 8.0 * a * ad - 4.0 * a;
      return 0.0;
    }
    case UpsampleMethod::kNearest:
      break;
  }
  return 0.0;
}

// Value of channel (b, c) of `src` resampled at output pixel (oy, ox) of an
// out_h x out_w grid; half-pixel centers, clamped borders, full 2-D sum.
inline double naive_sample(const Tensor4<double>& src, std::size_t b, std::size_t c, std::size_t oy, std::size_t ox,
                           std::size_t out_h, std::size_t out_w, UpsampleMethod m) {
  const long ih = static_cast<long>(src.h()), iw = static_cast<long>(src.w());
  const double sy = (oy + 0.5) * static_cast<double>(ih) / static_cast<double>(out_h) - 0.5;
  const double sx = (ox + 0.5) * static_cast<double>(iw) / static_cast<double>(out_w) - 0.5;
  const auto cy = [ih](long v) { return static_cast<std::size_t>(v < 0 ? 0 : (v >= ih ? ih - 1 : v)); };
  const auto cx = [iw](long v) { return static_cast<std::size_t>(v < 0 ? 0 : (v >= iw ? iw - 1 : v)); };
  if (m == UpsampleMethod::kNearest) {
    return src.at(b, c, cy(static_cast<long>(std::floor(sy + 0.5))), cx(static_cast<long>(std::floor(sx + 0.5))));
  }
  const long radius = m == UpsampleMethod::kBicubic ? 2 : 1;
  const long y0 = static_cast<long>(std::floor(sy));
  const long x0 = static_cast<long>(std::floor(sx));
  double acc = 0.0;
  for (long yy = y0 - radius + 1; yy <= y0 + radius; ++yy) {
    const double wy = naive_kernel(m, sy - static_cast<double>(yy));
    for (long xx = x0 - radius + 1; xx <= x0 + radius; ++xx) {
      const double wx = naive_kernel(m, sx - static_cast<double>(xx));
      acc += wy * wx * src.at(b, c, cy(yy), cx(xx));
    }
  }
  return acc;
}

// F_l' computed pixel by pixel.
inline Tensor4<double> naive_attention(const Tensor4<double>& mid, const Tensor4<double>& high, std::size_t repeat,
                                       UpsampleMethod m) {
  Tensor4<double> out(mid.shape());
  for (std::size_t b = 0; b < mid.n(); ++b) {
    for (std::size_t c = 0; c < mid.c(); ++c) {
      for (std::size_t y = 0; y < mid.h(); ++y) {
        for (std::size_t x = 0; x < mid.w(); ++x) {
          const double up = naive_sample(high, b, c / repeat, y, x, mid.h(), mid.w(), m);
          out.at(b, c, y, x) = mid.at(b, c, y, x) / (1.0 + std::exp(-up));
        }
      }
    }
  }
  return out;
}

// All loss components, recomputed from scratch with explicit loops.
inline LossBreakdown reference_losses(const Tensor4<double>& logits, const Tensor4<double>& high,
                                      const Tensor4<double>& mid, std::span<const int> labels,
                                      const StageSpec& spec_high, const StageSpec& spec_mid, const LossConfig& cfg,
                                      const MaskSet& masks_high, const MaskSet& masks_mid) {
  const std::size_t S = spec_high.num_classes;
  LossBreakdown r;
  std::vector<std::vector<double>> z(logits.n(), std::vector<double>(S));
  for (std::size_t b = 0; b < logits.n(); ++b)
    for (std::size_t k = 0; k < S; ++k) z[b][k] = logits.at(b, k, 0, 0);
  r.ce = naive_cross_entropy(z, labels);
  if (cfg.mu == 0.0) {
    r.total = r.ce;
    return r;
  }
  const std::size_t repeat = spec_mid.channels_per_class / spec_high.channels_per_class;
  r.dis_high = naive_discriminality(high, labels, S, spec_high.channels_per_class, masks_high);
  r.div_high = naive_diversity(high, S, spec_high.channels_per_class);
  r.mc_high = r.dis_high - cfg.lambda * r.div_high;
  const Tensor4<double> attended = naive_attention(mid, high, repeat, cfg.upsample);
  r.dis_mid = naive_discriminality(attended, labels, S, spec_mid.channels_per_class, masks_mid);
  r.div_mid = naive_diversity(attended, S, spec_mid.channels_per_class);
  r.mc_mid = r.dis_mid - cfg.lambda * r.div_mid;
  r.tdsa = r.mc_high + r.mc_mid;
  r.total = r.ce + cfg.mu * r.tdsa;
  return r;
}

}  // namespace tdsa::oracle

#endif  // TDSA_ORACLE_HPP_
