#ifndef TDSA_VISUALIZE_HPP_
#define TDSA_VISUALIZE_HPP_

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "tdsa/trainer.hpp"

namespace tdsa {

// Min-max normalization to 8 bits; a constant map becomes uniform mid-gray.
inline std::vector<std::uint8_t> to_heatmap(std::span<const float> map) {
  std::vector<std::uint8_t> out(map.size(), 128);
  if (map.empty()) return out;
  const auto [lo, hi] = std::minmax_element(map.begin(), map.end());
  const double range = static_cast<double>(*hi) - static_cast<double>(*lo);
  if (!(range > 0)) return out;
  for (std::size_t i = 0; i < map.size(); ++i) {
    const double t = (static_cast<double>(map[i]) - *lo) / range;
    out[i] = static_cast<std::uint8_t>(std::lround(t * 255.0));
  }
  return out;
}

struct ChannelMap {
  enum class Level { kHigh, kMid } level;
  std::size_t channel;  // index within the class group
  Tensor4<float> map;   // 1 x 1 x input_h x input_w
};

// The class's ξ_h high-level channels and ξ_h·ξ_mult gated middle-level
// channels for sample `b` of `out`, upsampled to the input resolution.
inline std::vector<ChannelMap> class_channel_maps(const EvalOutputs& out, std::size_t b, std::size_t cls,
                                                  const TrainConfig& cfg) {
  const BackboneConfig& bc = cfg.backbone;
  if (cls >= bc.num_classes) {
    throw ContractError("class id " + std::to_string(cls) + " out of range for " + std::to_string(bc.num_classes) +
                        " classes");
  }
  std::vector<ChannelMap> maps;
  auto emit = [&](const Tensor4<float>& src, std::size_t xi, ChannelMap::Level level) {
    for (std::size_t k = 0; k < xi; ++k) {
      Tensor4<float> one(Shape{1, 1, src.h(), src.w()});
      const auto plane = src.plane(b, cls * xi + k);
      std::copy(plane.begin(), plane.end(), one.data().begin());
      Tape<float> tape;
      maps.push_back({level, k, upsample(tape.constant(one), cfg.loss.upsample, bc.input_h, bc.input_w).value()});
    }
  };
  emit(out.high, bc.high_spec().channels_per_class, ChannelMap::Level::kHigh);
  emit(out.attended, bc.mid_spec().channels_per_class, ChannelMap::Level::kMid);
  return maps;
}

}  // namespace tdsa

#endif  // TDSA_VISUALIZE_HPP_
