#ifndef TDSA_RESAMPLE_HPP_
#define TDSA_RESAMPLE_HPP_

#include <algorithm>
#include <array>
#include <cmath>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "tdsa/tape.hpp"
#include "tdsa/tensor.hpp"

namespace tdsa {

enum class UpsampleMethod { kNearest, kBilinear, kBicubic };

inline std::string_view to_string(UpsampleMethod m) {
  switch (m) {
    case UpsampleMethod::kNearest: return "nearest";
    case UpsampleMethod::kBilinear: return "bilinear";
    case UpsampleMethod::kBicubic: return "bicubic";
  }
  return "?";
}

inline std::optional<UpsampleMethod> parse_upsample_method(std::string_view s) {
  if (s == "nearest") return UpsampleMethod::kNearest;
  if (s == "bilinear") return UpsampleMethod::kBilinear;
  if (s == "bicubic") return UpsampleMethod::kBicubic;
  return std::nullopt;
}

namespace resample {

// Catmull-Rom family parameter.
inline constexpr double kCubicA = -0.5;

struct Tap {
  std::size_t src;
  double weight;
};

// Interpolation taps for every output index along one axis.
// Source coordinate: src = (dst + 0.5) * in / out - 0.5, indices clamped to
// [0, in). Weights of each output index sum to one.
inline std::vector<std::vector<Tap>> axis_taps(std::size_t in, std::size_t out, UpsampleMethod m) {
  std::vector<std::vector<Tap>> taps(out);
  const double scale = static_cast<double>(in) / static_cast<double>(out);
  const auto clamp = [in](long i) {
    return static_cast<std::size_t>(std::clamp<long>(i, 0, static_cast<long>(in) - 1));
  };
  for (std::size_t d = 0; d < out; ++d) {
    const double center = (static_cast<double>(d) + 0.5) * scale;
    const double src = center - 0.5;
    switch (m) {
      case UpsampleMethod::kNearest:
        taps[d].push_back({clamp(static_cast<long>(std::floor(center))), 1.0});
        break;
      case UpsampleMethod::kBilinear: {
        const long x0 = static_cast<long>(std::floor(src));
        const double f = src - static_cast<double>(x0);
        taps[d].push_back({clamp(x0), 1.0 - f});
        taps[d].push_back({clamp(x0 + 1), f});
        break;
      }
      case UpsampleMethod::kBicubic: {
        const long x0 = static_cast<long>(std::floor(src));
        const double f = src - static_cast<double>(x0);
        const double a = kCubicA;
        // Distances to taps x0-1, x0, x0+1, x0+2 are 1+f, f, 1-f, 2-f.
        const auto near = [a](double x) { return ((a + 2) * x - (a + 3)) * x * x + 1; };
        const auto far = [a](double x) { return ((a * x - 5 * a) * x + 8 * a) * x - 4 * a; };
        const std::array<double, 4> w = {far(1 + f), near(f), near(1 - f), far(2 - f)};
        for (int k = 0; k < 4; ++k) taps[d].push_back({clamp(x0 - 1 + k), w[k]});
        break;
      }
    }
  }
  return taps;
}

// Separable resample of one plane; no size restriction.
template <typename T>
void resample_plane(std::span<const T> in, std::size_t ih, std::size_t iw, std::span<T> out, std::size_t oh,
                    std::size_t ow, const std::vector<std::vector<Tap>>& ty,
                    const std::vector<std::vector<Tap>>& tx) {
  std::vector<double> rows(ih * ow);
  for (std::size_t y = 0; y < ih; ++y) {
    for (std::size_t x = 0; x < ow; ++x) {
      double acc = 0.0;
      for (const Tap& t : tx[x]) acc += t.weight * static_cast<double>(in[y * iw + t.src]);
      rows[y * ow + x] = acc;
    }
  }
  for (std::size_t y = 0; y < oh; ++y) {
    for (std::size_t x = 0; x < ow; ++x) {
      double acc = 0.0;
      for (const Tap& t : ty[y]) acc += t.weight * rows[t.src * ow + x];
      out[y * ow + x] = static_cast<T>(acc);
    }
  }
}

// Adjoint of resample_plane: scatters output gradients back through the same
// weights and adds them into `grad_in`.
template <typename T>
void resample_plane_adjoint(std::span<const T> grad_out, std::size_t oh, std::size_t ow, std::span<T> grad_in,
                            std::size_t ih, std::size_t iw, const std::vector<std::vector<Tap>>& ty,
                            const std::vector<std::vector<Tap>>& tx) {
  std::vector<double> rows(ih * ow, 0.0);
  for (std::size_t y = 0; y < oh; ++y) {
    for (const Tap& t : ty[y]) {
      for (std::size_t x = 0; x < ow; ++x) rows[t.src * ow + x] += t.weight * static_cast<double>(grad_out[y * ow + x]);
    }
  }
  for (std::size_t y = 0; y < ih; ++y) {
    for (std::size_t x = 0; x < ow; ++x) {
      for (const Tap& t : tx[x]) {
        grad_in[y * iw + t.src] += static_cast<T>(t.weight * rows[y * ow + x]);
      }
    }
  }
}

}  // namespace resample

// Plain tensor resize (any direction). Used for image loading and heatmaps.
template <typename T>
Tensor4<T> resize(const Tensor4<T>& t, UpsampleMethod m, std::size_t out_h, std::size_t out_w) {
  const Shape s = t.shape();
  if (out_h == 0 || out_w == 0) throw DimensionError("resize: empty output size");
  const auto ty = resample::axis_taps(s.h, out_h, m);
  const auto tx = resample::axis_taps(s.w, out_w, m);
  Tensor4<T> out(Shape{s.n, s.c, out_h, out_w});
  for (std::size_t b = 0; b < s.n; ++b) {
    for (std::size_t c = 0; c < s.c; ++c) {
      resample::resample_plane<T>(t.plane(b, c), s.h, s.w, out.plane(b, c), out_h, out_w, ty, tx);
    }
  }
  return out;
}

// Differentiable upsample to (out_h, out_w); downscaling is rejected.
template <typename T>
Var<T> upsample(const Var<T>& a, UpsampleMethod m, std::size_t out_h, std::size_t out_w) {
  const Shape s = a.shape();
  if (out_h < s.h || out_w < s.w) {
    throw ContractError("upsample: cannot downscale " + std::to_string(s.h) + "x" + std::to_string(s.w) + " to " +
                        std::to_string(out_h) + "x" + std::to_string(out_w));
  }
  auto ty = resample::axis_taps(s.h, out_h, m);
  auto tx = resample::axis_taps(s.w, out_w, m);
  Tensor4<T> out(Shape{s.n, s.c, out_h, out_w});
  const Tensor4<T>& x = a.value();
  for (std::size_t b = 0; b < s.n; ++b) {
    for (std::size_t c = 0; c < s.c; ++c) {
      resample::resample_plane<T>(x.plane(b, c), s.h, s.w, out.plane(b, c), out_h, out_w, ty, tx);
    }
  }
  return a.tape->record(std::move(out), {a.id},
                        [ia = a.id, ty = std::move(ty), tx = std::move(tx)](Tape<T>& t, std::size_t self) {
                          auto* ga = t.grad_sink(ia);
                          if (!ga) return;
                          const Tensor4<T>& g = t.grad(self);
                          const Shape gs = g.shape();
                          for (std::size_t b = 0; b < gs.n; ++b) {
                            for (std::size_t c = 0; c < gs.c; ++c) {
                              resample::resample_plane_adjoint<T>(g.plane(b, c), gs.h, gs.w, ga->plane(b, c),
                                                                  ga->h(), ga->w(), ty, tx);
                            }
                          }
                        },
                        "upsample");
}

// Output channel j is input channel j / k (each channel repeated k times in
// place, so contiguous class groups stay contiguous).
template <typename T>
Var<T> channel_repeat(const Var<T>& a, std::size_t k) {
  if (k < 1) throw ContractError("channel_repeat: k must be >= 1");
  const Tensor4<T>& x = a.value();
  const Shape s = x.shape();
  Tensor4<T> out(Shape{s.n, s.c * k, s.h, s.w});
  for (std::size_t b = 0; b < s.n; ++b) {
    for (std::size_t j = 0; j < s.c * k; ++j) {
      auto src = x.plane(b, j / k);
      std::copy(src.begin(), src.end(), out.plane(b, j).begin());
    }
  }
  return a.tape->record(std::move(out), {a.id},
                        [ia = a.id, k](Tape<T>& t, std::size_t self) {
                          auto* ga = t.grad_sink(ia);
                          if (!ga) return;
                          const Tensor4<T>& g = t.grad(self);
                          for (std::size_t b = 0; b < g.n(); ++b) {
                            for (std::size_t j = 0; j < g.c(); ++j) {
                              auto gp = g.plane(b, j);
                              auto dp = ga->plane(b, j / k);
                              for (std::size_t i = 0; i < gp.size(); ++i) dp[i] += gp[i];
                            }
                          }
                        },
                        "channel_repeat");
}

}  // namespace tdsa

#endif  // TDSA_RESAMPLE_HPP_
