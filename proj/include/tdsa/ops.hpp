#ifndef TDSA_OPS_HPP_
#define TDSA_OPS_HPP_

#include <algorithm>
#include <cmath>
#include <limits>
#include <span>
#include <string>
#include <vector>

#include "tdsa/tape.hpp"
#include "tdsa/tensor.hpp"

// Differentiable primitives. Each op computes its forward value eagerly and
// records a backward rule on the input's tape.
namespace tdsa::ops {

namespace detail {

template <typename T>
Tape<T>& same_tape(const Var<T>& a, const Var<T>& b, const char* op) {
  if (a.tape != b.tape) throw ContractError(std::string(op) + ": operands on different tapes");
  return *a.tape;
}

// Applies dst += src elementwise.
template <typename T>
void add_into(Tensor4<T>& dst, const Tensor4<T>& src) {
  for (std::size_t i = 0; i < dst.size(); ++i) dst[i] += src[i];
}

}  // namespace detail

template <typename T>
Var<T> add(const Var<T>& a, const Var<T>& b) {
  Tape<T>& tape = detail::same_tape(a, b, "add");
  require_same_shape(a.shape(), b.shape(), "add");
  Tensor4<T> out = a.value();
  detail::add_into(out, b.value());
  return tape.record(std::move(out), {a.id, b.id},
                     [ia = a.id, ib = b.id](Tape<T>& t, std::size_t self) {
                       const Tensor4<T>& g = t.grad(self);
                       if (auto* ga = t.grad_sink(ia)) detail::add_into(*ga, g);
                       if (auto* gb = t.grad_sink(ib)) detail::add_into(*gb, g);
                     },
                     "add");
}

template <typename T>
Var<T> sub(const Var<T>& a, const Var<T>& b) {
  Tape<T>& tape = detail::same_tape(a, b, "sub");
  require_same_shape(a.shape(), b.shape(), "sub");
  Tensor4<T> out = a.value();
  const Tensor4<T>& bv = b.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] -= bv[i];
  return tape.record(std::move(out), {a.id, b.id},
                     [ia = a.id, ib = b.id](Tape<T>& t, std::size_t self) {
                       const Tensor4<T>& g = t.grad(self);
                       if (auto* ga = t.grad_sink(ia)) detail::add_into(*ga, g);
                       if (auto* gb = t.grad_sink(ib)) {
                         for (std::size_t i = 0; i < g.size(); ++i) (*gb)[i] -= g[i];
                       }
                     },
                     "sub");
}

// out = a * b elementwise.
template <typename T>
Var<T> mul(const Var<T>& a, const Var<T>& b) {
  Tape<T>& tape = detail::same_tape(a, b, "mul");
  require_same_shape(a.shape(), b.shape(), "mul");
  Tensor4<T> out = a.value();
  const Tensor4<T>& bv = b.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] *= bv[i];
  return tape.record(std::move(out), {a.id, b.id},
                     [ia = a.id, ib = b.id](Tape<T>& t, std::size_t self) {
                       const Tensor4<T>& g = t.grad(self);
                       if (auto* ga = t.grad_sink(ia)) {
                         const Tensor4<T>& bv = t.value(ib);
                         for (std::size_t i = 0; i < g.size(); ++i) (*ga)[i] += g[i] * bv[i];
                       }
                       if (auto* gb = t.grad_sink(ib)) {
                         const Tensor4<T>& av = t.value(ia);
                         for (std::size_t i = 0; i < g.size(); ++i) (*gb)[i] += g[i] * av[i];
                       }
                     },
                     "mul");
}

// out = scale * a + shift
template <typename T>
Var<T> affine(const Var<T>& a, T scale, T shift = T(0)) {
  Tensor4<T> out = a.value();
  for (T& v : out.data()) v = scale * v + shift;
  return a.tape->record(std::move(out), {a.id},
                        [ia = a.id, scale](Tape<T>& t, std::size_t self) {
                          const Tensor4<T>& g = t.grad(self);
                          if (auto* ga = t.grad_sink(ia)) {
                            for (std::size_t i = 0; i < g.size(); ++i) (*ga)[i] += scale * g[i];
                          }
                        },
                        "affine");
}

template <typename T>
Var<T> scale(const Var<T>& a, T s) {
  return affine(a, s, T(0));
}

template <typename T>
Var<T> sigmoid(const Var<T>& a) {
  Tensor4<T> out = a.value();
  for (T& v : out.data()) {
    // Split by sign so exp never overflows.
    if (v >= T(0)) {
      v = T(1) / (T(1) + std::exp(-v));
    } else {
      T e = std::exp(v);
      v = e / (T(1) + e);
    }
  }
  return a.tape->record(std::move(out), {a.id},
                        [ia = a.id](Tape<T>& t, std::size_t self) {
                          const Tensor4<T>& g = t.grad(self);
                          const Tensor4<T>& s = t.value(self);
                          if (auto* ga = t.grad_sink(ia)) {
                            for (std::size_t i = 0; i < g.size(); ++i) {
                              (*ga)[i] += g[i] * s[i] * (T(1) - s[i]);
                            }
                          }
                        },
                        "sigmoid");
}

template <typename T>
Var<T> relu(const Var<T>& a) {
  Tensor4<T> out = a.value();
  for (T& v : out.data()) v = v > T(0) ? v : T(0);
  return a.tape->record(std::move(out), {a.id},
                        [ia = a.id](Tape<T>& t, std::size_t self) {
                          const Tensor4<T>& g = t.grad(self);
                          const Tensor4<T>& x = t.value(ia);
                          if (auto* ga = t.grad_sink(ia)) {
                            for (std::size_t i = 0; i < g.size(); ++i) {
                              if (x[i] > T(0)) (*ga)[i] += g[i];
                            }
                          }
                        },
                        "relu");
}

template <typename T>
Var<T> exp(const Var<T>& a) {
  Tensor4<T> out = a.value();
  for (T& v : out.data()) v = std::exp(v);
  return a.tape->record(std::move(out), {a.id},
                        [ia = a.id](Tape<T>& t, std::size_t self) {
                          const Tensor4<T>& g = t.grad(self);
                          const Tensor4<T>& y = t.value(self);
                          if (auto* ga = t.grad_sink(ia)) {
                            for (std::size_t i = 0; i < g.size(); ++i) (*ga)[i] += g[i] * y[i];
                          }
                        },
                        "exp");
}

// Natural log; non-positive input surfaces as a NumericError from the tape.
template <typename T>
Var<T> log(const Var<T>& a) {
  Tensor4<T> out = a.value();
  for (T& v : out.data()) v = std::log(v);
  return a.tape->record(std::move(out), {a.id},
                        [ia = a.id](Tape<T>& t, std::size_t self) {
                          const Tensor4<T>& g = t.grad(self);
                          const Tensor4<T>& x = t.value(ia);
                          if (auto* ga = t.grad_sink(ia)) {
                            for (std::size_t i = 0; i < g.size(); ++i) (*ga)[i] += g[i] / x[i];
                          }
                        },
                        "log");
}

// Sum of every entry, as a 1x1x1x1 tensor.
template <typename T>
Var<T> sum(const Var<T>& a) {
  T s = T(0);
  for (T v : a.value().data()) s += v;
  return a.tape->record(Tensor4<T>::scalar(s), {a.id},
                        [ia = a.id](Tape<T>& t, std::size_t self) {
                          T g = t.grad(self)[0];
                          if (auto* ga = t.grad_sink(ia)) {
                            for (T& v : ga->data()) v += g;
                          }
                        },
                        "sum");
}

template <typename T>
Var<T> mean(const Var<T>& a) {
  const std::size_t n = a.value().size();
  if (n == 0) throw DimensionError("mean: empty tensor");
  return scale(sum(a), T(1) / static_cast<T>(n));
}

// Softmax over the h*w positions of each (batch, channel) plane, with the
// plane max subtracted before exponentiation.
template <typename T>
Var<T> spatial_softmax(const Var<T>& a) {
  const Tensor4<T>& x = a.value();
  const Shape s = x.shape();
  if (s.plane() == 0) throw DimensionError("spatial_softmax: empty spatial grid");
  Tensor4<T> out(s);
  for (std::size_t b = 0; b < s.n; ++b) {
    for (std::size_t c = 0; c < s.c; ++c) {
      auto in = x.plane(b, c);
      auto o = out.plane(b, c);
      T m = *std::max_element(in.begin(), in.end());
      T z = T(0);
      for (std::size_t i = 0; i < in.size(); ++i) {
        o[i] = std::exp(in[i] - m);
        z += o[i];
      }
      for (T& v : o) v /= z;
    }
  }
  return a.tape->record(std::move(out), {a.id},
                        [ia = a.id](Tape<T>& t, std::size_t self) {
                          const Tensor4<T>& g = t.grad(self);
                          const Tensor4<T>& y = t.value(self);
                          auto* ga = t.grad_sink(ia);
                          if (!ga) return;
                          const Shape s = y.shape();
                          for (std::size_t b = 0; b < s.n; ++b) {
                            for (std::size_t c = 0; c < s.c; ++c) {
                              auto yp = y.plane(b, c);
                              auto gp = g.plane(b, c);
                              auto dp = ga->plane(b, c);
                              T dot = T(0);
                              for (std::size_t i = 0; i < yp.size(); ++i) dot += yp[i] * gp[i];
                              for (std::size_t i = 0; i < yp.size(); ++i) {
                                dp[i] += yp[i] * (gp[i] - dot);
                              }
                            }
                          }
                        },
                        "spatial_softmax");
}

// Positionwise max over consecutive runs of `group` channels:
// N x (G*group) x H x W -> N x G x H x W. Ties go to the first channel in the
// run, which is also where the whole gradient is routed.
template <typename T>
Var<T> group_max(const Var<T>& a, std::size_t group) {
  const Tensor4<T>& x = a.value();
  const Shape s = x.shape();
  if (group == 0 || s.c % group != 0) {
    throw DimensionError("group_max: " + std::to_string(s.c) + " channels not divisible into groups of " +
                         std::to_string(group));
  }
  const std::size_t groups = s.c / group;
  const std::size_t hw = s.plane();
  Tensor4<T> out(Shape{s.n, groups, s.h, s.w});
  std::vector<std::size_t> argmax(out.size());
  for (std::size_t b = 0; b < s.n; ++b) {
    for (std::size_t gi = 0; gi < groups; ++gi) {
      auto o = out.plane(b, gi);
      std::size_t* am = argmax.data() + out.index(b, gi, 0, 0);
      auto first = x.plane(b, gi * group);
      for (std::size_t p = 0; p < hw; ++p) {
        o[p] = first[p];
        am[p] = x.index(b, gi * group, 0, 0) + p;
      }
      for (std::size_t m = 1; m < group; ++m) {
        auto in = x.plane(b, gi * group + m);
        for (std::size_t p = 0; p < hw; ++p) {
          if (in[p] > o[p]) {
            o[p] = in[p];
            am[p] = x.index(b, gi * group + m, 0, 0) + p;
          }
        }
      }
    }
  }
  return a.tape->record(std::move(out), {a.id},
                        [ia = a.id, argmax = std::move(argmax)](Tape<T>& t, std::size_t self) {
                          const Tensor4<T>& g = t.grad(self);
                          if (auto* ga = t.grad_sink(ia)) {
                            for (std::size_t i = 0; i < g.size(); ++i) (*ga)[argmax[i]] += g[i];
                          }
                        },
                        "group_max");
}

// Mean over the spatial grid: N x C x H x W -> N x C x 1 x 1.
template <typename T>
Var<T> global_avg_pool(const Var<T>& a) {
  const Tensor4<T>& x = a.value();
  const Shape s = x.shape();
  if (s.plane() == 0) throw DimensionError("global_avg_pool: empty spatial grid");
  Tensor4<T> out(Shape{s.n, s.c, 1, 1});
  const T inv = T(1) / static_cast<T>(s.plane());
  for (std::size_t b = 0; b < s.n; ++b) {
    for (std::size_t c = 0; c < s.c; ++c) {
      T acc = T(0);
      for (T v : x.plane(b, c)) acc += v;
      out.at(b, c, 0, 0) = acc * inv;
    }
  }
  return a.tape->record(std::move(out), {a.id},
                        [ia = a.id, inv](Tape<T>& t, std::size_t self) {
                          const Tensor4<T>& g = t.grad(self);
                          auto* ga = t.grad_sink(ia);
                          if (!ga) return;
                          const Shape s = ga->shape();
                          for (std::size_t b = 0; b < s.n; ++b) {
                            for (std::size_t c = 0; c < s.c; ++c) {
                              T gv = g.at(b, c, 0, 0) * inv;
                              for (T& v : ga->plane(b, c)) v += gv;
                            }
                          }
                        },
                        "global_avg_pool");
}

// Sum over the spatial grid: N x C x H x W -> N x C x 1 x 1.
template <typename T>
Var<T> spatial_sum(const Var<T>& a) {
  const std::size_t hw = a.shape().plane();
  return scale(global_avg_pool(a), static_cast<T>(hw));
}

// Channels [start, start+count).
template <typename T>
Var<T> channel_slice(const Var<T>& a, std::size_t start, std::size_t count) {
  const Tensor4<T>& x = a.value();
  const Shape s = x.shape();
  if (count == 0 || start + count > s.c) {
    throw DimensionError("channel_slice: [" + std::to_string(start) + ", " +
                         std::to_string(start + count) + ") out of " + std::to_string(s.c));
  }
  Tensor4<T> out(Shape{s.n, count, s.h, s.w});
  for (std::size_t b = 0; b < s.n; ++b) {
    std::copy_n(&x.at(b, start, 0, 0), count * s.plane(), &out.at(b, 0, 0, 0));
  }
  return a.tape->record(std::move(out), {a.id},
                        [ia = a.id, start, count](Tape<T>& t, std::size_t self) {
                          const Tensor4<T>& g = t.grad(self);
                          auto* ga = t.grad_sink(ia);
                          if (!ga) return;
                          const std::size_t len = count * g.h() * g.w();
                          for (std::size_t b = 0; b < g.n(); ++b) {
                            const T* src = &g.at(b, 0, 0, 0);
                            T* dst = &ga->at(b, start, 0, 0);
                            for (std::size_t i = 0; i < len; ++i) dst[i] += src[i];
                          }
                        },
                        "channel_slice");
}

template <typename T>
Var<T> concat_channels(const std::vector<Var<T>>& parts) {
  if (parts.empty()) throw DimensionError("concat_channels: no inputs");
  Tape<T>& tape = *parts.front().tape;
  Shape s = parts.front().shape();
  std::size_t total = 0;
  std::vector<std::size_t> ids;
  for (const Var<T>& p : parts) {
    const Shape& ps = p.shape();
    if (p.tape != &tape) throw ContractError("concat_channels: operands on different tapes");
    if (ps.n != s.n || ps.h != s.h || ps.w != s.w) {
      throw DimensionError("concat_channels: incompatible shapes " + s.str() + " and " + ps.str());
    }
    total += ps.c;
    ids.push_back(p.id);
  }
  Tensor4<T> out(Shape{s.n, total, s.h, s.w});
  std::size_t off = 0;
  for (const Var<T>& p : parts) {
    const Tensor4<T>& x = p.value();
    for (std::size_t b = 0; b < s.n; ++b) {
      std::copy_n(&x.at(b, 0, 0, 0), x.c() * s.plane(), &out.at(b, off, 0, 0));
    }
    off += x.c();
  }
  return tape.record(std::move(out), ids,
                     [ids](Tape<T>& t, std::size_t self) {
                       const Tensor4<T>& g = t.grad(self);
                       std::size_t off = 0;
                       for (std::size_t id : ids) {
                         const std::size_t c = t.value(id).c();
                         if (auto* gp = t.grad_sink(id)) {
                           const std::size_t len = c * g.h() * g.w();
                           for (std::size_t b = 0; b < g.n(); ++b) {
                             const T* src = &g.at(b, off, 0, 0);
                             T* dst = &gp->at(b, 0, 0, 0);
                             for (std::size_t i = 0; i < len; ++i) dst[i] += src[i];
                           }
                         }
                         off += c;
                       }
                     },
                     "concat_channels");
}

// Multiplies channel c of every batch element by mask[c] (broadcast over h*w).
// The mask is a constant.
template <typename T>
Var<T> channel_scale(const Var<T>& a, std::span<const T> mask) {
  const Tensor4<T>& x = a.value();
  const Shape s = x.shape();
  if (mask.size() != s.c) {
    throw DimensionError("channel_scale: mask length " + std::to_string(mask.size()) + " vs " +
                         std::to_string(s.c) + " channels");
  }
  Tensor4<T> out = x;
  for (std::size_t b = 0; b < s.n; ++b) {
    for (std::size_t c = 0; c < s.c; ++c) {
      for (T& v : out.plane(b, c)) v *= mask[c];
    }
  }
  return a.tape->record(std::move(out), {a.id},
                        [ia = a.id, m = std::vector<T>(mask.begin(), mask.end())](Tape<T>& t,
                                                                                  std::size_t self) {
                          const Tensor4<T>& g = t.grad(self);
                          auto* ga = t.grad_sink(ia);
                          if (!ga) return;
                          for (std::size_t b = 0; b < g.n(); ++b) {
                            for (std::size_t c = 0; c < g.c(); ++c) {
                              auto gp = g.plane(b, c);
                              auto dp = ga->plane(b, c);
                              for (std::size_t i = 0; i < gp.size(); ++i) dp[i] += gp[i] * m[c];
                            }
                          }
                        },
                        "channel_scale");
}

// Same value, no gradient path back to `a`.
template <typename T>
Var<T> detach(const Var<T>& a) {
  return a.tape->constant(a.value());
}

// Batch-mean softmax cross entropy. `logits` is N x K x 1 x 1; labels in [0, K).
template <typename T>
Var<T> softmax_cross_entropy(const Var<T>& logits, std::span<const int> labels) {
  const Tensor4<T>& z = logits.value();
  const Shape s = z.shape();
  if (s.h != 1 || s.w != 1) {
    throw DimensionError("softmax_cross_entropy: logits must be N x K x 1 x 1, got " + s.str());
  }
  if (labels.size() != s.n) {
    throw DimensionError("softmax_cross_entropy: " + std::to_string(labels.size()) + " labels for batch " +
                         std::to_string(s.n));
  }
  for (int y : labels) {
    if (y < 0 || static_cast<std::size_t>(y) >= s.c) {
      throw ContractError("softmax_cross_entropy: label " + std::to_string(y) + " outside [0, " +
                          std::to_string(s.c) + ")");
    }
  }
  Tensor4<T> prob(s);
  T loss = T(0);
  for (std::size_t b = 0; b < s.n; ++b) {
    T m = -std::numeric_limits<T>::infinity();
    for (std::size_t k = 0; k < s.c; ++k) m = std::max(m, z.at(b, k, 0, 0));
    T zsum = T(0);
    for (std::size_t k = 0; k < s.c; ++k) {
      prob.at(b, k, 0, 0) = std::exp(z.at(b, k, 0, 0) - m);
      zsum += prob.at(b, k, 0, 0);
    }
    for (std::size_t k = 0; k < s.c; ++k) prob.at(b, k, 0, 0) /= zsum;
    loss += std::log(zsum) + m - z.at(b, static_cast<std::size_t>(labels[b]), 0, 0);
  }
  loss /= static_cast<T>(s.n);
  return logits.tape->record(
      Tensor4<T>::scalar(loss), {logits.id},
      [il = logits.id, prob = std::move(prob), y = std::vector<int>(labels.begin(), labels.end())](
          Tape<T>& t, std::size_t self) {
        auto* gl = t.grad_sink(il);
        if (!gl) return;
        const T g = t.grad(self)[0] / static_cast<T>(prob.n());
        for (std::size_t b = 0; b < prob.n(); ++b) {
          for (std::size_t k = 0; k < prob.c(); ++k) {
            T d = prob.at(b, k, 0, 0) - (static_cast<int>(k) == y[b] ? T(1) : T(0));
            gl->at(b, k, 0, 0) += g * d;
          }
        }
      },
      "softmax_cross_entropy");
}

}  // namespace tdsa::ops

#endif  // TDSA_OPS_HPP_
