#ifndef TDSA_BACKBONE_HPP_
#define TDSA_BACKBONE_HPP_

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <random>
#include <string>
#include <vector>

#include <json.hpp>

#include "tdsa/loss.hpp"
#include "tdsa/nn.hpp"
#include "tdsa/ops.hpp"
#include "tdsa/tape.hpp"

namespace tdsa {

/*
 * Small VGG-style classifier with two feature taps.
 *
 * widths.size() blocks of (conv3x3-bn-relu) x convs_per_block; a 2x2 max
 * pool separates blocks (the pool right before the last block uses the tap
 * ratio). The middle-level tap is a 1x1 projection of the second-to-last
 * block's output, F_l, with S*xi_high*xi_mult channels. By default F_l is a
 * side branch and the last block consumes the pooled block output; with
 * mid_in_trunk it consumes pool(relu(F_l)) instead, so F_h = F_2(F_l). The
 * high-level tap F_h is a 1x1 projection of the last block to S*xi_high
 * channels, and logits = linear(GAP(F_h)).
 */
struct BackboneConfig {
  std::size_t in_channels = 3;
  std::size_t input_h = 64;
  std::size_t input_w = 64;
  std::vector<std::size_t> widths = {32, 64, 128, 128};
  std::size_t convs_per_block = 2;
  std::size_t num_classes = 8;
  std::size_t xi_high = 3;
  std::size_t xi_mult = 2;
  std::size_t tap_ratio = 2;
  bool mid_in_trunk = false;

  StageSpec high_spec() const { return {num_classes, xi_high}; }
  StageSpec mid_spec() const { return {num_classes, xi_high * xi_mult}; }

  std::size_t mid_size_h() const { return input_h >> (widths.size() - 2); }
  std::size_t mid_size_w() const { return input_w >> (widths.size() - 2); }
  std::size_t high_size_h() const { return mid_size_h() / tap_ratio; }
  std::size_t high_size_w() const { return mid_size_w() / tap_ratio; }

  void validate() const {
    if (widths.size() < 2) throw ContractError("BackboneConfig: need at least two blocks");
    if (num_classes == 0 || xi_high == 0 || xi_mult == 0 || tap_ratio < 2 || convs_per_block == 0) {
      throw ContractError("BackboneConfig: classes, xi, xi_mult and convs_per_block must be positive, tap_ratio >= 2");
    }
    for (std::size_t w : widths) {
      if (w == 0) throw ContractError("BackboneConfig: zero block width");
    }
    const std::size_t div = std::size_t{1} << (widths.size() - 2);
    if (input_h % div != 0 || input_w % div != 0 || mid_size_h() % tap_ratio != 0 ||
        mid_size_w() % tap_ratio != 0 || high_size_h() == 0 || high_size_w() == 0) {
      throw ContractError("BackboneConfig: input " + std::to_string(input_h) + "x" + std::to_string(input_w) +
                          " is not divisible down to both taps");
    }
  }
};

inline nlohmann::json to_json(const BackboneConfig& c) {
  return {{"in_channels", c.in_channels}, {"input_h", c.input_h},         {"input_w", c.input_w},
          {"widths", c.widths},           {"convs_per_block", c.convs_per_block}, {"num_classes", c.num_classes},
          {"xi_high", c.xi_high},         {"xi_mult", c.xi_mult},         {"tap_ratio", c.tap_ratio},
          {"mid_in_trunk", c.mid_in_trunk}};
}

inline BackboneConfig backbone_config_from_json(const nlohmann::json& j) {
  BackboneConfig c;
  c.in_channels = j.at("in_channels").get<std::size_t>();
  c.input_h = j.at("input_h").get<std::size_t>();
  c.input_w = j.at("input_w").get<std::size_t>();
  c.widths = j.at("widths").get<std::vector<std::size_t>>();
  c.convs_per_block = j.at("convs_per_block").get<std::size_t>();
  c.num_classes = j.at("num_classes").get<std::size_t>();
  c.xi_high = j.at("xi_high").get<std::size_t>();
  c.xi_mult = j.at("xi_mult").get<std::size_t>();
  c.tap_ratio = j.at("tap_ratio").get<std::size_t>();
  c.mid_in_trunk = j.value("mid_in_trunk", false);
  return c;
}

enum class ParamKind : std::uint8_t {
  kWeight,   // conv / linear kernel: trained, weight-decayed
  kNoDecay,  // bias, batch-norm scale/shift: trained, no decay
  kBuffer,   // batch-norm running statistics: not trained
};

template <typename T>
struct NamedArray {
  std::string name;
  Tensor4<T> value;
  ParamKind kind = ParamKind::kWeight;
};

template <typename T>
struct ModelParams {
  std::vector<NamedArray<T>> arrays;

  std::size_t index_of(const std::string& name) const {
    for (std::size_t i = 0; i < arrays.size(); ++i) {
      if (arrays[i].name == name) return i;
    }
    throw ContractError("ModelParams: no array named " + name);
  }
  Tensor4<T>& operator[](const std::string& name) { return arrays[index_of(name)].value; }
  const Tensor4<T>& operator[](const std::string& name) const { return arrays[index_of(name)].value; }

  bool all_finite() const {
    for (const auto& a : arrays) {
      if (!a.value.all_finite()) return false;
    }
    return true;
  }

  template <typename U>
  ModelParams<U> cast() const {
    ModelParams<U> out;
    for (const auto& a : arrays) out.arrays.push_back({a.name, a.value.template cast<U>(), a.kind});
    return out;
  }
};

namespace backbone_detail {

inline std::string conv_name(std::size_t block, std::size_t conv) {
  return "block" + std::to_string(block) + ".conv" + std::to_string(conv);
}
inline std::string bn_name(std::size_t block, std::size_t conv) {
  return "block" + std::to_string(block) + ".bn" + std::to_string(conv);
}

}  // namespace backbone_detail

// Kaiming-normal (std = sqrt(2 / fan_in)) kernels, zero biases, unit BN
// scale, zero BN shift. Arrays are drawn in declaration order.
template <typename T, typename Rng>
ModelParams<T> init_params(const BackboneConfig& cfg, Rng& rng) {
  cfg.validate();
  using backbone_detail::bn_name;
  using backbone_detail::conv_name;
  ModelParams<T> p;
  auto kaiming = [&rng](Shape s, std::size_t fan_in) {
    std::normal_distribution<double> dist(0.0, std::sqrt(2.0 / static_cast<double>(fan_in)));
    Tensor4<T> t(s);
    for (T& v : t.data()) v = static_cast<T>(dist(rng));
    return t;
  };
  const std::size_t S = cfg.num_classes;
  const std::size_t mid_c = cfg.mid_spec().total_channels();
  const std::size_t high_c = cfg.high_spec().total_channels();
  std::size_t in_c = cfg.in_channels;
  const std::size_t last = cfg.widths.size() - 1;
  for (std::size_t b = 0; b < cfg.widths.size(); ++b) {
    if (b == last && cfg.mid_in_trunk) in_c = mid_c;
    const std::size_t w = cfg.widths[b];
    for (std::size_t k = 0; k < cfg.convs_per_block; ++k) {
      p.arrays.push_back({conv_name(b, k) + ".weight", kaiming({w, in_c, 3, 3}, in_c * 9), ParamKind::kWeight});
      p.arrays.push_back({bn_name(b, k) + ".gamma", Tensor4<T>({1, w, 1, 1}, T(1)), ParamKind::kNoDecay});
      p.arrays.push_back({bn_name(b, k) + ".beta", Tensor4<T>({1, w, 1, 1}, T(0)), ParamKind::kNoDecay});
      p.arrays.push_back({bn_name(b, k) + ".running_mean", Tensor4<T>({1, w, 1, 1}, T(0)), ParamKind::kBuffer});
      p.arrays.push_back({bn_name(b, k) + ".running_var", Tensor4<T>({1, w, 1, 1}, T(1)), ParamKind::kBuffer});
      in_c = w;
    }
    if (b + 2 == cfg.widths.size()) {
      p.arrays.push_back({"mid_proj.weight", kaiming({mid_c, w, 1, 1}, w), ParamKind::kWeight});
      p.arrays.push_back({"mid_proj.bias", Tensor4<T>(Shape{1, mid_c, 1, 1}), ParamKind::kNoDecay});
    }
  }
  p.arrays.push_back({"high_proj.weight", kaiming({high_c, cfg.widths.back(), 1, 1}, cfg.widths.back()),
                      ParamKind::kWeight});
  p.arrays.push_back({"high_proj.bias", Tensor4<T>(Shape{1, high_c, 1, 1}), ParamKind::kNoDecay});
  p.arrays.push_back({"classifier.weight", kaiming({S, high_c, 1, 1}, high_c), ParamKind::kWeight});
  p.arrays.push_back({"classifier.bias", Tensor4<T>(Shape{1, S, 1, 1}), ParamKind::kNoDecay});
  return p;
}

template <typename T>
struct ForwardResult {
  Var<T> mid;     // F_l
  Var<T> high;    // F_h
  Var<T> logits;  // N x S x 1 x 1
  std::vector<Var<T>> param_vars;  // one per array; buffers are constants
};

inline constexpr double kBatchNormEps = 1e-5;
inline constexpr double kBatchNormMomentum = 0.1;

// Runs the network on `x` with parameter nodes `vars` (one per array of
// `params`, in order). In train mode batch norm uses batch statistics and,
// if `update_running`, folds them into the running buffers of `params`.
template <typename T>
ForwardResult<T> forward_with(Tape<T>& tape, const Tensor4<T>& x, ModelParams<T>& params,
                              const std::vector<Var<T>>& vars, const BackboneConfig& cfg, bool train,
                              bool update_running) {
  using backbone_detail::bn_name;
  using backbone_detail::conv_name;
  cfg.validate();
  const Shape xs = x.shape();
  if (xs.c != cfg.in_channels || xs.h != cfg.input_h || xs.w != cfg.input_w) {
    throw DimensionError("backbone forward: input " + xs.str() + " does not match configured " +
                         std::to_string(cfg.in_channels) + "x" + std::to_string(cfg.input_h) + "x" +
                         std::to_string(cfg.input_w));
  }
  if (vars.size() != params.arrays.size()) throw ContractError("backbone forward: parameter count mismatch");
  auto var = [&](const std::string& name) { return vars[params.index_of(name)]; };
  const T eps = static_cast<T>(kBatchNormEps);

  ForwardResult<T> out;
  out.param_vars = vars;
  Var<T> h = tape.constant(x);
  const std::size_t last = cfg.widths.size() - 1;
  for (std::size_t b = 0; b < cfg.widths.size(); ++b) {
    const std::size_t w = cfg.widths[b];
    Var<T> zero_bias = tape.constant(Tensor4<T>(Shape{1, w, 1, 1}));
    for (std::size_t k = 0; k < cfg.convs_per_block; ++k) {
      h = nn::conv2d(h, var(conv_name(b, k) + ".weight"), zero_bias, 1);
      const std::string bn = bn_name(b, k);
      Var<T> gamma = var(bn + ".gamma"), beta = var(bn + ".beta");
      Tensor4<T>& rmean = params[bn + ".running_mean"];
      Tensor4<T>& rvar = params[bn + ".running_var"];
      if (train) {
        nn::BatchStats<T> st;
        h = nn::batch_norm_train(h, gamma, beta, eps, &st);
        if (update_running) {
          const T mom = static_cast<T>(kBatchNormMomentum);
          const T unbias = st.count > 1 ? static_cast<T>(st.count) / static_cast<T>(st.count - 1) : T(1);
          for (std::size_t c = 0; c < w; ++c) {
            rmean[c] = (T(1) - mom) * rmean[c] + mom * st.mean[c];
            rvar[c] = (T(1) - mom) * rvar[c] + mom * st.var[c] * unbias;
          }
        }
      } else {
        h = nn::batch_norm_eval(h, gamma, beta, std::span<const T>(rmean.data()), std::span<const T>(rvar.data()),
                                eps);
      }
      h = ops::relu(h);
    }
    if (b + 2 == cfg.widths.size()) {
      out.mid = nn::conv2d(h, var("mid_proj.weight"), var("mid_proj.bias"), 0);
      h = nn::max_pool2d(cfg.mid_in_trunk ? ops::relu(out.mid) : h, cfg.tap_ratio);
    } else if (b < last) {
      h = nn::max_pool2d(h, 2);
    }
  }
  out.high = nn::conv2d(h, var("high_proj.weight"), var("high_proj.bias"), 0);
  out.logits = nn::linear(ops::global_avg_pool(out.high), var("classifier.weight"), var("classifier.bias"));
  return out;
}

// Forward with fresh parameter leaves (trainable arrays require gradients
// only in train mode).
template <typename T>
ForwardResult<T> forward(Tape<T>& tape, const Tensor4<T>& x, ModelParams<T>& params, const BackboneConfig& cfg,
                         bool train) {
  std::vector<Var<T>> vars;
  vars.reserve(params.arrays.size());
  for (const auto& a : params.arrays) {
    vars.push_back(a.kind == ParamKind::kBuffer ? tape.constant(a.value) : tape.leaf(a.value, train, a.name));
  }
  return forward_with(tape, x, params, vars, cfg, train, train);
}

// ---------------------------------------------------------------------------
// Checkpoints: <dir>/params.bin holds the named arrays, <dir>/manifest.json
// the configuration and training progress.
//
// params.bin: magic "TDSAPRM1", u32 array count, then per array: u32 name
// length, name bytes, u8 kind, four u32 dims, little-endian float32 values.

template <typename T>
void write_params(std::ostream& os, const ModelParams<T>& p) {
  os.write("TDSAPRM1", 8);
  detail::put_u32le(os, static_cast<std::uint32_t>(p.arrays.size()));
  for (const auto& a : p.arrays) {
    detail::put_u32le(os, static_cast<std::uint32_t>(a.name.size()));
    os.write(a.name.data(), static_cast<std::streamsize>(a.name.size()));
    const char kind = static_cast<char>(a.kind);
    os.write(&kind, 1);
    const Shape& s = a.value.shape();
    for (std::size_t d : {s.n, s.c, s.h, s.w}) detail::put_u32le(os, static_cast<std::uint32_t>(d));
    for (T v : a.value.data()) detail::put_f32le(os, static_cast<float>(v));
  }
}

template <typename T>
ModelParams<T> read_params(std::istream& is) {
  char magic[8];
  if (!is.read(magic, 8) || std::string(magic, 8) != "TDSAPRM1") throw IoError("params: bad magic");
  ModelParams<T> p;
  const std::uint32_t count = detail::get_u32le(is);
  for (std::uint32_t i = 0; i < count; ++i) {
    NamedArray<T> a;
    const std::uint32_t len = detail::get_u32le(is);
    a.name.resize(len);
    char kind = 0;
    if (!is.read(a.name.data(), len) || !is.read(&kind, 1)) throw IoError("params: truncated");
    if (kind > 2) throw IoError("params: bad array kind for " + a.name);
    a.kind = static_cast<ParamKind>(kind);
    Shape s;
    s.n = detail::get_u32le(is);
    s.c = detail::get_u32le(is);
    s.h = detail::get_u32le(is);
    s.w = detail::get_u32le(is);
    a.value = Tensor4<T>(s);
    for (std::size_t k = 0; k < a.value.size(); ++k) a.value[k] = static_cast<T>(detail::get_f32le(is));
    p.arrays.push_back(std::move(a));
  }
  return p;
}

struct CheckpointInfo {
  BackboneConfig backbone;
  nlohmann::json extra;  // loss / training config, free-form
  std::size_t step = 0;
  std::size_t epoch = 0;
};

template <typename T>
void save_checkpoint(const std::filesystem::path& dir, const ModelParams<T>& p, const CheckpointInfo& info) {
  std::filesystem::create_directories(dir);
  {
    std::ofstream os(dir / "params.bin", std::ios::binary);
    if (!os) throw IoError("cannot write " + (dir / "params.bin").string());
    write_params(os, p);
  }
  nlohmann::json m;
  m["format"] = "tdsa-checkpoint-1";
  m["backbone"] = to_json(info.backbone);
  m["config"] = info.extra;
  m["step"] = info.step;
  m["epoch"] = info.epoch;
  nlohmann::json names = nlohmann::json::array();
  for (const auto& a : p.arrays) names.push_back(a.name);
  m["arrays"] = names;
  std::ofstream os(dir / "manifest.json");
  if (!os) throw IoError("cannot write " + (dir / "manifest.json").string());
  os << m.dump(2) << "\n";
}

template <typename T>
ModelParams<T> load_checkpoint(const std::filesystem::path& dir, CheckpointInfo* info = nullptr) {
  std::ifstream ms(dir / "manifest.json");
  std::ifstream ps(dir / "params.bin", std::ios::binary);
  if (!ms || !ps) throw IoError("checkpoint not found in " + dir.string());
  CheckpointInfo parsed;
  try {
    const nlohmann::json m = nlohmann::json::parse(ms);
    parsed.backbone = backbone_config_from_json(m.at("backbone"));
    parsed.extra = m.value("config", nlohmann::json::object());
    parsed.step = m.value("step", std::size_t{0});
    parsed.epoch = m.value("epoch", std::size_t{0});
  } catch (const nlohmann::json::exception& e) {
    throw IoError("bad manifest in " + dir.string() + ": " + e.what());
  }
  ModelParams<T> p = read_params<T>(ps);
  if (info) *info = std::move(parsed);
  return p;
}

}  // namespace tdsa

#endif  // TDSA_BACKBONE_HPP_
