#ifndef TDSA_LOSS_HPP_
#define TDSA_LOSS_HPP_

#include <algorithm>
#include <cstdint>
#include <numeric>
#include <optional>
#include <random>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include "tdsa/ops.hpp"
#include "tdsa/resample.hpp"
#include "tdsa/tape.hpp"

namespace tdsa {

// Channel grouping of one feature stage: S classes, xi channels each, class
// i owning the contiguous channels [i*xi, (i+1)*xi).
struct StageSpec {
  std::size_t num_classes = 0;
  std::size_t channels_per_class = 0;

  std::size_t total_channels() const { return num_classes * channels_per_class; }

  void validate() const {
    if (num_classes == 0 || channels_per_class == 0) {
      throw ContractError("StageSpec: class count and channels per class must be positive");
    }
  }
  void require_channels(const Shape& s, const char* op) const {
    validate();
    if (s.c != total_channels()) {
      throw DimensionError(std::string(op) + ": expected " + std::to_string(total_channels()) + " channels (" +
                           std::to_string(num_classes) + " classes x " + std::to_string(channels_per_class) +
                           "), got " + std::to_string(s.c));
    }
  }
};

// Channel-wise attention masks: one 0-1 vector of length xi per class group,
// each with floor(xi/2) zeros.
struct MaskSet {
  std::size_t channels_per_class = 0;
  std::vector<std::vector<std::uint8_t>> groups;

  static MaskSet all_ones(const StageSpec& spec) {
    return {spec.channels_per_class,
            std::vector<std::vector<std::uint8_t>>(spec.num_classes,
                                                   std::vector<std::uint8_t>(spec.channels_per_class, 1))};
  }

  // Flattened per-channel multipliers, group-major.
  template <typename T>
  std::vector<T> channel_mask() const {
    std::vector<T> out;
    out.reserve(groups.size() * channels_per_class);
    for (const auto& g : groups)
      for (std::uint8_t v : g) out.push_back(static_cast<T>(v));
    return out;
  }

  void require_matches(const StageSpec& spec) const {
    if (groups.size() != spec.num_classes || channels_per_class != spec.channels_per_class) {
      throw DimensionError("MaskSet: shape does not match stage (" + std::to_string(spec.num_classes) + " x " +
                           std::to_string(spec.channels_per_class) + ")");
    }
    for (const auto& g : groups) {
      if (g.size() != channels_per_class) throw DimensionError("MaskSet: ragged group");
    }
  }
};

enum class MaskMode { kTrainRandom, kAllOnes };

struct LossConfig {
  double mu = 1.5;
  double lambda = 10.0;
  UpsampleMethod upsample = UpsampleMethod::kBilinear;
  bool detach_attention = false;
  MaskMode mask_mode = MaskMode::kTrainRandom;

  void validate() const {
    if (!(mu >= 0.0) || !(lambda >= 0.0)) throw ContractError("LossConfig: mu and lambda must be >= 0");
  }
};

// Scalar values of every loss component for one evaluation.
struct LossBreakdown {
  double ce = 0, dis_high = 0, div_high = 0, mc_high = 0, dis_mid = 0, div_mid = 0, mc_mid = 0, tdsa = 0,
         total = 0;

  static std::string csv_header() { return "step,ce,dis_high,div_high,mc_high,dis_mid,div_mid,mc_mid,tdsa,total"; }

  std::string csv_row(std::size_t step) const {
    std::ostringstream os;
    os.precision(9);
    os << step << ',' << ce << ',' << dis_high << ',' << div_high << ',' << mc_high << ',' << dis_mid << ','
       << div_mid << ',' << mc_mid << ',' << tdsa << ',' << total;
    return os.str();
  }
};

// Random CWA masks, one per class group: floor(xi/2) zeros placed uniformly.
template <typename Rng>
MaskSet sample_cwa_masks(const StageSpec& spec, Rng& rng) {
  spec.validate();
  const std::size_t xi = spec.channels_per_class;
  MaskSet out{xi, {}};
  std::vector<std::size_t> idx(xi);
  for (std::size_t i = 0; i < spec.num_classes; ++i) {
    std::iota(idx.begin(), idx.end(), std::size_t{0});
    std::shuffle(idx.begin(), idx.end(), rng);
    std::vector<std::uint8_t> m(xi, 1);
    for (std::size_t z = 0; z < xi / 2; ++z) m[idx[z]] = 0;
    out.groups.push_back(std::move(m));
  }
  return out;
}

// Cross-channel max pooling of one group: xi channels -> 1 channel.
template <typename T>
Var<T> ccmp(const Var<T>& group, std::size_t xi) {
  if (group.shape().c != xi) {
    throw DimensionError("ccmp: expected " + std::to_string(xi) + " channels, got " +
                         std::to_string(group.shape().c));
  }
  return ops::group_max(group, xi);
}

// Per-class pooled responses g(F^i) = GAP(CCMP(M_i * F^i)): N x S x 1 x 1.
template <typename T>
Var<T> class_responses(const Var<T>& features, const StageSpec& spec, const MaskSet& masks) {
  spec.require_channels(features.shape(), "class_responses");
  masks.require_matches(spec);
  const std::vector<T> m = masks.channel_mask<T>();
  Var<T> gated = ops::channel_scale(features, std::span<const T>(m));
  return ops::global_avg_pool(ops::group_max(gated, spec.channels_per_class));
}

// Batch-mean cross entropy of softmax(g(F^1..F^S)) against the labels.
template <typename T>
Var<T> discriminality_loss(const Var<T>& features, std::span<const int> labels, const StageSpec& spec,
                           const MaskSet& masks) {
  return ops::softmax_cross_entropy(class_responses(features, spec, masks), labels);
}

// Per-sample, per-class h(F^i): spatial sum of the channel max of the
// spatially softmaxed group. N x S x 1 x 1.
template <typename T>
Var<T> group_diversity(const Var<T>& features, const StageSpec& spec) {
  spec.require_channels(features.shape(), "diversity");
  return ops::spatial_sum(ops::group_max(ops::spatial_softmax(features), spec.channels_per_class));
}

// Mean of h(F^i) over the S groups, then over the batch.
template <typename T>
Var<T> diversity_loss(const Var<T>& features, const StageSpec& spec) {
  return ops::mean(group_diversity(features, spec));
}

template <typename T>
struct StageLoss {
  Var<T> dis;
  Var<T> div;
  Var<T> mc;
};

// L_MC = L_dis - lambda * L_div
template <typename T>
StageLoss<T> mc_loss(const Var<T>& features, std::span<const int> labels, const StageSpec& spec, double lambda,
                     const MaskSet& masks) {
  Var<T> dis = discriminality_loss(features, labels, spec, masks);
  Var<T> div = diversity_loss(features, spec);
  Var<T> mc = ops::sub(dis, ops::scale(div, static_cast<T>(lambda)));
  return {dis, div, mc};
}

// Sigmoid gate built from the high-level map: upsampled to the middle-level
// grid, each channel repeated `repeat` times in place.
template <typename T>
Var<T> attention_gate(const Var<T>& high, std::size_t repeat, UpsampleMethod method, std::size_t out_h,
                      std::size_t out_w, bool detach) {
  Var<T> src = detach ? ops::detach(high) : high;
  return ops::sigmoid(channel_repeat(upsample(src, method, out_h, out_w), repeat));
}

// F_l' = F_l * Sigmoid(Upsample(F_h)), with F_h channels repeated to match.
template <typename T>
Var<T> tdsa_attention(const Var<T>& mid, const Var<T>& high, std::size_t repeat, UpsampleMethod method,
                      bool detach) {
  const Shape ms = mid.shape();
  const Shape hs = high.shape();
  if (repeat < 1 || hs.c * repeat != ms.c) {
    throw DimensionError("tdsa_attention: " + std::to_string(hs.c) + " high channels x repeat " +
                         std::to_string(repeat) + " != " + std::to_string(ms.c) + " middle channels");
  }
  if (hs.n != ms.n) throw DimensionError("tdsa_attention: batch sizes differ");
  return ops::mul(mid, attention_gate(high, repeat, method, ms.h, ms.w, detach));
}

template <typename T>
struct TdsaTerms {
  StageLoss<T> high;
  StageLoss<T> mid;
  Var<T> attended;  // F_l'
  Var<T> tdsa;
};

inline std::size_t stage_repeat(const StageSpec& high, const StageSpec& mid) {
  high.validate();
  mid.validate();
  if (high.num_classes != mid.num_classes) {
    throw ContractError("tdsa_loss: high-level stage has " + std::to_string(high.num_classes) +
                        " classes, middle-level stage " + std::to_string(mid.num_classes));
  }
  if (mid.channels_per_class % high.channels_per_class != 0) {
    throw ContractError("tdsa_loss: middle channels per class must be a multiple of high channels per class");
  }
  return mid.channels_per_class / high.channels_per_class;
}

// L_TDSA = L_MC(F_h) + L_MC(F_l') with caller-supplied masks.
template <typename T>
TdsaTerms<T> tdsa_loss(const Var<T>& high, const Var<T>& mid, std::span<const int> labels,
                       const StageSpec& spec_high, const StageSpec& spec_mid, const LossConfig& cfg,
                       const MaskSet& masks_high, const MaskSet& masks_mid) {
  cfg.validate();
  const std::size_t repeat = stage_repeat(spec_high, spec_mid);
  Var<T> attended = tdsa_attention(mid, high, repeat, cfg.upsample, cfg.detach_attention);
  StageLoss<T> h = mc_loss(high, labels, spec_high, cfg.lambda, masks_high);
  StageLoss<T> m = mc_loss(attended, labels, spec_mid, cfg.lambda, masks_mid);
  return {h, m, attended, ops::add(h.mc, m.mc)};
}

template <typename Rng>
MaskSet masks_for(const StageSpec& spec, const LossConfig& cfg, Rng& rng) {
  return cfg.mask_mode == MaskMode::kAllOnes ? MaskSet::all_ones(spec) : sample_cwa_masks(spec, rng);
}

// Samples one mask set per stage (high first, then middle) from `rng`.
template <typename T, typename Rng>
TdsaTerms<T> tdsa_loss(const Var<T>& high, const Var<T>& mid, std::span<const int> labels,
                       const StageSpec& spec_high, const StageSpec& spec_mid, const LossConfig& cfg, Rng& rng) {
  MaskSet mh = masks_for(spec_high, cfg, rng);
  MaskSet mm = masks_for(spec_mid, cfg, rng);
  return tdsa_loss(high, mid, labels, spec_high, spec_mid, cfg, mh, mm);
}

template <typename T>
struct TotalLoss {
  Var<T> total;
  Var<T> ce;
  std::optional<TdsaTerms<T>> tdsa;  // absent when mu == 0
  LossBreakdown breakdown;
};

// L_total = L_CE(logits) + mu * L_TDSA. With mu == 0 the TDSA branch is not
// built at all and its breakdown columns are zero (plain cross-entropy mode).
template <typename T>
TotalLoss<T> total_loss(const Var<T>& logits, const Var<T>& high, const Var<T>& mid, std::span<const int> labels,
                        const StageSpec& spec_high, const StageSpec& spec_mid, const LossConfig& cfg,
                        const MaskSet& masks_high, const MaskSet& masks_mid) {
  cfg.validate();
  if (logits.shape().c != spec_high.num_classes || logits.shape().h != 1 || logits.shape().w != 1) {
    throw DimensionError("total_loss: logits " + logits.shape().str() + " do not match " +
                         std::to_string(spec_high.num_classes) + " classes");
  }
  TotalLoss<T> out;
  out.ce = ops::softmax_cross_entropy(logits, labels);
  LossBreakdown& bd = out.breakdown;
  bd.ce = static_cast<double>(out.ce.value().item());
  if (cfg.mu == 0.0) {
    stage_repeat(spec_high, spec_mid);
    out.total = out.ce;
    bd.total = bd.ce;
    return out;
  }
  TdsaTerms<T> terms = tdsa_loss(high, mid, labels, spec_high, spec_mid, cfg, masks_high, masks_mid);
  out.total = ops::add(out.ce, ops::scale(terms.tdsa, static_cast<T>(cfg.mu)));
  bd.dis_high = static_cast<double>(terms.high.dis.value().item());
  bd.div_high = static_cast<double>(terms.high.div.value().item());
  bd.mc_high = static_cast<double>(terms.high.mc.value().item());
  bd.dis_mid = static_cast<double>(terms.mid.dis.value().item());
  bd.div_mid = static_cast<double>(terms.mid.div.value().item());
  bd.mc_mid = static_cast<double>(terms.mid.mc.value().item());
  bd.tdsa = static_cast<double>(terms.tdsa.value().item());
  bd.total = static_cast<double>(out.total.value().item());
  out.tdsa = std::move(terms);
  return out;
}

template <typename T, typename Rng>
TotalLoss<T> total_loss(const Var<T>& logits, const Var<T>& high, const Var<T>& mid, std::span<const int> labels,
                        const StageSpec& spec_high, const StageSpec& spec_mid, const LossConfig& cfg, Rng& rng) {
  if (cfg.mu == 0.0) {
    return total_loss(logits, high, mid, labels, spec_high, spec_mid, cfg, MaskSet::all_ones(spec_high),
                      MaskSet::all_ones(spec_mid));
  }
  MaskSet mh = masks_for(spec_high, cfg, rng);
  MaskSet mm = masks_for(spec_mid, cfg, rng);
  return total_loss(logits, high, mid, labels, spec_high, spec_mid, cfg, mh, mm);
}

}  // namespace tdsa

#endif  // TDSA_LOSS_HPP_
