#ifndef TDSA_SELFTEST_HPP_
#define TDSA_SELFTEST_HPP_

#include <chrono>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iomanip>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include "tdsa/backbone.hpp"
#include "tdsa/gradcheck.hpp"
#include "tdsa/loss.hpp"
#include "tdsa/oracle.hpp"
#include "tdsa/resample.hpp"

// Property suites shared by the `selftest` command and the acceptance run.
namespace tdsa::selftest {

struct Options {
  std::uint64_t seed = 20240601;
  // Debug hook: evaluate the mutual-channel kernel with the diversity sign
  // flipped. The identity check must then fail.
  bool corrupt_lambda_sign = false;
};

struct SuiteResult {
  SuiteResult() = default;
  explicit SuiteResult(std::string n) : name(std::move(n)) {}

  std::string name;
  std::size_t cases = 0;
  bool passed = true;
  double worst = 0.0;  // largest observed error, where meaningful
  std::string detail;  // first failure, with case index and seed
  double seconds = 0.0;

  void fail(std::size_t case_index, std::uint64_t seed, const std::string& what) {
    if (!passed) return;
    passed = false;
    std::ostringstream os;
    os << "case " << case_index << " (seed " << seed << "): " << what;
    detail = os.str();
  }
  void check(bool ok, std::size_t case_index, std::uint64_t seed, const std::string& what) {
    if (!ok) fail(case_index, seed, what);
  }
};

namespace detail {

inline Tensor4<double> random_tensor(Shape s, std::mt19937_64& rng, double stddev = 1.0) {
  std::normal_distribution<double> dist(0.0, stddev);
  Tensor4<double> t(s);
  for (double& v : t.data()) v = dist(rng);
  return t;
}

inline std::vector<int> random_labels(std::size_t n, std::size_t classes, std::mt19937_64& rng) {
  std::uniform_int_distribution<int> dist(0, static_cast<int>(classes) - 1);
  std::vector<int> y(n);
  for (int& v : y) v = dist(rng);
  return y;
}

inline std::size_t pick(std::mt19937_64& rng, std::size_t lo, std::size_t hi) {
  return std::uniform_int_distribution<std::size_t>(lo, hi)(rng);
}

inline std::string num(double v) {
  std::ostringstream os;
  os << std::setprecision(6) << v;
  return os.str();
}

inline std::uint64_t case_seed(std::uint64_t seed, std::size_t i) { return seed * 1000003ULL + i; }

}  // namespace detail

inline SuiteResult masks(const Options& opt) {
  SuiteResult r{"masks"};
  for (std::size_t xi = 1; xi <= 8; ++xi) {
    const std::uint64_t seed = detail::case_seed(opt.seed, xi);
    std::mt19937_64 rng(seed);
    for (int draw = 0; draw < 25; ++draw, ++r.cases) {
      const StageSpec spec{4, xi};
      const MaskSet m = sample_cwa_masks(spec, rng);
      for (const auto& g : m.groups) {
        std::size_t zeros = 0;
        for (std::uint8_t v : g) {
          r.check(v == 0 || v == 1, r.cases, seed, "mask entry outside {0,1}");
          zeros += v == 0;
        }
        r.check(zeros == xi / 2, r.cases, seed,
                "xi=" + std::to_string(xi) + " has " + std::to_string(zeros) + " zeros, expected " +
                    std::to_string(xi / 2));
      }
    }
  }
  return r;
}

inline SuiteResult softmax(const Options& opt) {
  SuiteResult r{"softmax"};
  for (std::size_t i = 0; i < 30; ++i, ++r.cases) {
    const std::uint64_t seed = detail::case_seed(opt.seed, 100 + i);
    std::mt19937_64 rng(seed);
    const Shape s{detail::pick(rng, 1, 3), detail::pick(rng, 1, 4), detail::pick(rng, 1, 6), detail::pick(rng, 1, 6)};
    Tensor4<double> x = detail::random_tensor(s, rng, 5.0);
    Tensor4<double> shifted = x;
    const double c = std::uniform_real_distribution<double>(-50, 50)(rng);
    for (double& v : shifted.data()) v += c;
    Tape<double> tape;
    const Tensor4<double> p = ops::spatial_softmax(tape.leaf(x)).value();
    const Tensor4<double> q = ops::spatial_softmax(tape.leaf(shifted)).value();
    for (std::size_t b = 0; b < s.n; ++b)
      for (std::size_t ch = 0; ch < s.c; ++ch) {
        double sum = 0;
        for (double v : p.plane(b, ch)) {
          sum += v;
          r.check(v > 0, r.cases, seed, "non-positive softmax entry");
        }
        r.worst = std::max(r.worst, std::abs(sum - 1));
        r.check(std::abs(sum - 1) < 1e-12, r.cases, seed, "plane sums to " + detail::num(sum));
      }
    const double shift_err = oracle::max_rel_error(p, q, 1e-12);
    r.worst = std::max(r.worst, shift_err);
    r.check(shift_err < 1e-9, r.cases, seed, "shift changed output by " + detail::num(shift_err));
  }
  return r;
}

// Bounds 1 <= h <= min(xi, HW), h = 1 on identical channels, and the
// mutual-channel identity mc = dis - lambda * div.
inline SuiteResult diversity(const Options& opt) {
  SuiteResult r{"diversity"};
  const double lambda = 10.0;
  const double kernel_lambda = opt.corrupt_lambda_sign ? -lambda : lambda;
  for (std::size_t i = 0; i < 30; ++i, ++r.cases) {
    const std::uint64_t seed = detail::case_seed(opt.seed, 200 + i);
    std::mt19937_64 rng(seed);
    const StageSpec spec{detail::pick(rng, 2, 4), detail::pick(rng, 1, 5)};
    const std::size_t n = detail::pick(rng, 1, 3), h = detail::pick(rng, 1, 5), w = detail::pick(rng, 1, 5);
    Tensor4<double> f = detail::random_tensor({n, spec.total_channels(), h, w}, rng, 3.0);
    Tape<double> tape;
    const Tensor4<double> hv = group_diversity(tape.leaf(f), spec).value();
    const double upper = static_cast<double>(std::min(spec.channels_per_class, h * w));
    for (double v : hv.data()) {
      r.check(v >= 1.0 - 1e-12 && v <= upper + 1e-12, r.cases, seed,
              "h = " + detail::num(v) + " outside [1, " + detail::num(upper) + "]");
    }
    // Identical channels within each group.
    Tensor4<double> same = f;
    for (std::size_t b = 0; b < n; ++b)
      for (std::size_t c = 0; c < spec.total_channels(); ++c) {
        const std::size_t lead = (c / spec.channels_per_class) * spec.channels_per_class;
        for (std::size_t p = 0; p < h * w; ++p) same.plane(b, c)[p] = f.plane(b, lead)[p];
      }
    for (double v : group_diversity(tape.leaf(same), spec).value().data()) {
      r.worst = std::max(r.worst, std::abs(v - 1));
      r.check(std::abs(v - 1) < 1e-12, r.cases, seed, "identical channels give h = " + detail::num(v));
    }
    const auto y = detail::random_labels(n, spec.num_classes, rng);
    const MaskSet m = sample_cwa_masks(spec, rng);
    const StageLoss<double> mc = mc_loss(tape.leaf(f), std::span<const int>(y), spec, kernel_lambda, m);
    const double dis = mc.dis.value().item(), div = mc.div.value().item(), got = mc.mc.value().item();
    const double expected = dis - lambda * div;
    const double err = oracle::rel_error(got, expected);
    r.worst = std::max(r.worst, err);
    r.check(err < 1e-12, r.cases, seed,
            "mc = " + detail::num(got) + " but dis - lambda*div = " + detail::num(expected));
  }
  return r;
}

inline SuiteResult attention(const Options& opt) {
  SuiteResult r{"attention"};
  constexpr UpsampleMethod kMethods[] = {UpsampleMethod::kNearest, UpsampleMethod::kBilinear,
                                         UpsampleMethod::kBicubic};
  for (std::size_t i = 0; i < 18; ++i, ++r.cases) {
    const std::uint64_t seed = detail::case_seed(opt.seed, 300 + i);
    std::mt19937_64 rng(seed);
    const UpsampleMethod m = kMethods[i % 3];
    const std::size_t n = detail::pick(rng, 1, 3), ch = detail::pick(rng, 1, 4), rep = detail::pick(rng, 1, 3);
    const std::size_t hh = detail::pick(rng, 1, 4), hw = detail::pick(rng, 1, 4);
    const std::size_t lh = hh * detail::pick(rng, 1, 3), lw = hw * detail::pick(rng, 1, 3);
    Tensor4<double> high = detail::random_tensor({n, ch, hh, hw}, rng, 4.0);
    Tensor4<double> mid = detail::random_tensor({n, ch * rep, lh, lw}, rng);
    Tape<double> tape;
    const Tensor4<double> gate = attention_gate(tape.leaf(high), rep, m, lh, lw, false).value();
    for (double g : gate.data()) r.check(g > 0 && g < 1, r.cases, seed, "gate value " + detail::num(g));
    const Tensor4<double> zero_gated =
        tdsa_attention(tape.leaf(mid), tape.leaf(Tensor4<double>(high.shape())), rep, m, false).value();
    for (std::size_t k = 0; k < mid.size(); ++k) {
      const double err = std::abs(zero_gated[k] - 0.5 * mid[k]);
      r.worst = std::max(r.worst, err);
      r.check(err < 1e-15, r.cases, seed, std::string("F_h = 0 does not halve F_l (") + std::string(to_string(m)) + ")");
    }
  }
  return r;
}

inline SuiteResult breakdown(const Options& opt) {
  SuiteResult r{"breakdown"};
  for (std::size_t i = 0; i < 20; ++i, ++r.cases) {
    const std::uint64_t seed = detail::case_seed(opt.seed, 400 + i);
    std::mt19937_64 rng(seed);
    LossConfig cfg;
    cfg.mu = i % 5 == 0 ? 0.0 : std::uniform_real_distribution<double>(0.1, 3.0)(rng);
    cfg.lambda = std::uniform_real_distribution<double>(0.0, 20.0)(rng);
    const std::size_t S = detail::pick(rng, 2, 4), xi = detail::pick(rng, 1, 3), rep = detail::pick(rng, 1, 2);
    const StageSpec sh{S, xi}, sl{S, xi * rep};
    const std::size_t n = detail::pick(rng, 1, 4);
    Tape<double> tape;
    const auto y = detail::random_labels(n, S, rng);
    auto tl = total_loss(tape.leaf(detail::random_tensor({n, S, 1, 1}, rng)),
                         tape.leaf(detail::random_tensor({n, S * xi, 2, 2}, rng)),
                         tape.leaf(detail::random_tensor({n, S * xi * rep, 4, 4}, rng)), std::span<const int>(y), sh,
                         sl, cfg, rng);
    const LossBreakdown& b = tl.breakdown;
    auto near = [&](double a, double e, const char* what) {
      const double err = oracle::rel_error(a, e);
      r.worst = std::max(r.worst, err);
      r.check(err < 1e-12, r.cases, seed, std::string(what) + ": " + detail::num(a) + " vs " + detail::num(e));
    };
    near(b.mc_high, b.dis_high - cfg.lambda * b.div_high, "mc_high = dis_high - lambda*div_high");
    near(b.mc_mid, b.dis_mid - cfg.lambda * b.div_mid, "mc_mid = dis_mid - lambda*div_mid");
    near(b.tdsa, b.mc_high + b.mc_mid, "tdsa = mc_high + mc_mid");
    near(b.total, b.ce + cfg.mu * b.tdsa, "total = ce + mu*tdsa");
  }
  return r;
}

inline SuiteResult resample(const Options& opt) {
  SuiteResult r{"resample"};
  constexpr UpsampleMethod kMethods[] = {UpsampleMethod::kNearest, UpsampleMethod::kBilinear,
                                         UpsampleMethod::kBicubic};
  for (std::size_t i = 0; i < 24; ++i, ++r.cases) {
    const std::uint64_t seed = detail::case_seed(opt.seed, 500 + i);
    std::mt19937_64 rng(seed);
    const UpsampleMethod m = kMethods[i % 3];
    const std::size_t ih = detail::pick(rng, 1, 5), iw = detail::pick(rng, 1, 5);
    const std::size_t oh = ih * detail::pick(rng, 1, 3) + detail::pick(rng, 0, 2);
    const std::size_t ow = iw * detail::pick(rng, 1, 3) + detail::pick(rng, 0, 2);
    Tensor4<double> x = detail::random_tensor({2, 2, ih, iw}, rng);
    Tape<double> tape;
    const Tensor4<double> out = upsample(tape.leaf(x), m, oh, ow).value();
    for (std::size_t b = 0; b < 2; ++b)
      for (std::size_t c = 0; c < 2; ++c)
        for (std::size_t y = 0; y < oh; ++y)
          for (std::size_t xx = 0; xx < ow; ++xx) {
            const double err = std::abs(out.at(b, c, y, xx) - oracle::naive_sample(x, b, c, y, xx, oh, ow, m));
            r.worst = std::max(r.worst, err);
            r.check(err < 1e-12, r.cases, seed, std::string("differs from per-pixel reference (") + std::string(to_string(m)) + ")");
          }
    const double level = x[0];
    for (double v : upsample(tape.leaf(Tensor4<double>(x.shape(), level)), m, oh, ow).value().data()) {
      r.check(std::abs(v - level) < 1e-12, r.cases, seed, std::string("constant not preserved (") + std::string(to_string(m)) + ")");
    }
  }
  return r;
}

// 50 randomized instances: every loss component from the tape kernels vs the
// explicit-loop reference, relative error <= 1e-9.
inline SuiteResult oracle_equivalence(const Options& opt, std::size_t cases = 50) {
  SuiteResult r{"oracle-equivalence"};
  constexpr UpsampleMethod kMethods[] = {UpsampleMethod::kNearest, UpsampleMethod::kBilinear,
                                         UpsampleMethod::kBicubic};
  constexpr std::size_t kClasses[] = {2, 3, 5};
  for (std::size_t i = 0; i < cases; ++i, ++r.cases) {
    const std::uint64_t seed = detail::case_seed(opt.seed, 600 + i);
    std::mt19937_64 rng(seed);
    const std::size_t S = kClasses[detail::pick(rng, 0, 2)], xi = detail::pick(rng, 1, 3),
                      rep = detail::pick(rng, 1, 2);
    const std::size_t lh = detail::pick(rng, 2, 6), lw = detail::pick(rng, 2, 6);
    const std::size_t hh = detail::pick(rng, 2, lh), hw = detail::pick(rng, 2, lw);
    const std::size_t n = detail::pick(rng, 1, 4);
    const StageSpec sh{S, xi}, sl{S, xi * rep};
    LossConfig cfg;
    cfg.upsample = kMethods[i % 3];
    const auto logits = detail::random_tensor({n, S, 1, 1}, rng, 2.0);
    const auto fh = detail::random_tensor({n, S * xi, hh, hw}, rng, 2.0);
    const auto fl = detail::random_tensor({n, S * xi * rep, lh, lw}, rng, 2.0);
    const auto y = detail::random_labels(n, S, rng);
    const MaskSet mh = sample_cwa_masks(sh, rng), ml = sample_cwa_masks(sl, rng);
    Tape<double> tape;
    const LossBreakdown k =
        total_loss(tape.leaf(logits), tape.leaf(fh), tape.leaf(fl), std::span<const int>(y), sh, sl, cfg, mh, ml)
            .breakdown;
    const LossBreakdown o = oracle::reference_losses(logits, fh, fl, y, sh, sl, cfg, mh, ml);
    const std::pair<const char*, std::pair<double, double>> parts[] = {
        {"ce", {k.ce, o.ce}},           {"dis_high", {k.dis_high, o.dis_high}}, {"div_high", {k.div_high, o.div_high}},
        {"mc_high", {k.mc_high, o.mc_high}}, {"dis_mid", {k.dis_mid, o.dis_mid}},   {"div_mid", {k.div_mid, o.div_mid}},
        {"mc_mid", {k.mc_mid, o.mc_mid}},  {"tdsa", {k.tdsa, o.tdsa}},             {"total", {k.total, o.total}}};
    for (const auto& [name, v] : parts) {
      const double err = oracle::rel_error(v.first, v.second);
      r.worst = std::max(r.worst, err);
      r.check(err <= 1e-9, r.cases, seed,
              std::string(name) + " kernel " + detail::num(v.first) + " vs reference " + detail::num(v.second));
    }
  }
  return r;
}

// Downsized backbone used for the full-model gradient check.
inline BackboneConfig gradcheck_backbone() {
  BackboneConfig c;
  c.in_channels = 2;
  c.input_h = c.input_w = 8;
  c.widths = {3, 4, 3};
  c.convs_per_block = 1;
  c.num_classes = 2;
  c.xi_high = 1;
  c.xi_mult = 2;
  return c;
}

// The full-model loss sits around -30 (the diversity term dominates) and is
// sharply curved: a 1e-6 step loses too much to cancellation, a plain 1e-4
// step too much to truncation. Richardson-combined 5e-5 / 2.5e-5 steps keep
// both an order of magnitude under the tolerance.
inline constexpr double kFdStep = 1e-4;
inline constexpr double kTieTolerance = 1e-3;
inline constexpr std::size_t kTieRedraws = 8;

// Tape gradients of L_total vs central finite differences: w.r.t. logits,
// F_h and F_l on random instances (every upsampling method), then w.r.t.
// every backbone parameter of a downsized model.
inline SuiteResult gradcheck(const Options& opt, double tolerance = 1e-4) {
  SuiteResult r{"gradcheck"};
  constexpr UpsampleMethod kMethods[] = {UpsampleMethod::kNearest, UpsampleMethod::kBilinear,
                                         UpsampleMethod::kBicubic};
  // Inputs are sampled away from ties: a draw where any coordinate's
  // difference quotients straddle a relu / max kink is discarded.
  const GradCheckOptions fd{oracle::FdConfig{kFdStep}, true, kTieTolerance};
  for (std::size_t i = 0; i < 3; ++i, ++r.cases) {
    bool checked = false;
    for (std::size_t attempt = 0; attempt < kTieRedraws && !checked; ++attempt) {
      const std::uint64_t seed = detail::case_seed(opt.seed, 700 + 100 * attempt + i);
      std::mt19937_64 rng(seed);
      const StageSpec sh{2, 2}, sl{2, 4};
      LossConfig cfg;
      cfg.upsample = kMethods[i];
      const auto y = detail::random_labels(2, 2, rng);
      const MaskSet mh = sample_cwa_masks(sh, rng), ml = sample_cwa_masks(sl, rng);
      const GradCheckResult g = tdsa::gradcheck(
          [&](Tape<double>&, const std::vector<Var<double>>& in) {
            return total_loss(in[0], in[1], in[2], std::span<const int>(y), sh, sl, cfg, mh, ml).total;
          },
          {detail::random_tensor({2, 2, 1, 1}, rng), detail::random_tensor({2, 4, 2, 2}, rng),
           detail::random_tensor({2, 8, 4, 4}, rng)},
          fd);
      if (g.ties > 0) continue;
      checked = true;
      static constexpr const char* kNames[] = {"logits", "F_h", "F_l"};
      r.worst = std::max(r.worst, g.max_rel_error);
      r.check(g.max_rel_error <= tolerance, r.cases, seed,
              std::string(kNames[g.worst_input]) + " rel err " + detail::num(g.max_rel_error) + " (" +
                  std::string(to_string(cfg.upsample)) + ")");
    }
    r.check(checked, r.cases, opt.seed, "loss inputs: every draw hit a tie");
  }
  for (double mu : {1.5, 0.0}) {
    bool checked = false;
    for (std::size_t attempt = 0; attempt < kTieRedraws && !checked; ++attempt) {
      const std::uint64_t seed = detail::case_seed(opt.seed, 710 + 10 * attempt + static_cast<std::size_t>(mu * 2));
      std::mt19937_64 rng(seed);
      const BackboneConfig bc = gradcheck_backbone();
      ModelParams<double> params = init_params<double>(bc, rng);
      // Zero-initialized biases leave exact zeros in front of relu.
      std::normal_distribution<double> jitter(0.0, 0.1);
      for (auto& a : params.arrays) {
        if (a.kind != ParamKind::kNoDecay) continue;
        for (double& v : a.value.data()) v += jitter(rng);
      }
      const auto x = detail::random_tensor({2, bc.in_channels, bc.input_h, bc.input_w}, rng);
      const auto y = detail::random_labels(2, bc.num_classes, rng);
      LossConfig cfg;
      cfg.mu = mu;
      const MaskSet mh = sample_cwa_masks(bc.high_spec(), rng), ml = sample_cwa_masks(bc.mid_spec(), rng);
      std::vector<Tensor4<double>> inputs;
      std::vector<std::string> names;
      for (const auto& a : params.arrays) {
        if (a.kind == ParamKind::kBuffer) continue;
        inputs.push_back(a.value);
        names.push_back(a.name);
      }
      const GradCheckResult g = tdsa::gradcheck(
          [&](Tape<double>& t, const std::vector<Var<double>>& in) {
            std::vector<Var<double>> vars;
            std::size_t next = 0;
            for (const auto& a : params.arrays)
              vars.push_back(a.kind == ParamKind::kBuffer ? t.constant(a.value) : in[next++]);
            auto f = forward_with(t, x, params, vars, bc, true, false);
            return total_loss(f.logits, f.high, f.mid, std::span<const int>(y), bc.high_spec(), bc.mid_spec(), cfg,
                              mh, ml)
                .total;
          },
          inputs, fd);
      if (g.ties > 0) continue;
      checked = true;
      r.worst = std::max(r.worst, g.max_rel_error);
      r.check(g.max_rel_error <= tolerance, r.cases, seed,
              "backbone (mu=" + detail::num(mu) + ") " + names[g.worst_input] + " rel err " +
                  detail::num(g.max_rel_error));
    }
    r.check(checked, r.cases, opt.seed,
            "backbone (mu=" + detail::num(mu) + "): every draw hit a tie");
    ++r.cases;
  }
  return r;
}

// Feature dump: logits / F_h / F_l as T4 files plus labels and the stage
// layout, so the loss can be recomputed offline by both paths.
inline void write_dump(const std::filesystem::path& dir, const Tensor4<float>& logits, const Tensor4<float>& high,
                       const Tensor4<float>& mid, std::span<const int> labels, const BackboneConfig& bc,
                       const LossConfig& loss) {
  std::filesystem::create_directories(dir);
  save_t4((dir / "logits.t4").string(), logits);
  save_t4((dir / "high.t4").string(), high);
  save_t4((dir / "mid.t4").string(), mid);
  const nlohmann::json meta{{"labels", std::vector<int>(labels.begin(), labels.end())},
                            {"classes", bc.num_classes},
                            {"xi_high", bc.xi_high},
                            {"xi_mid", bc.mid_spec().channels_per_class},
                            {"mu", loss.mu},
                            {"lambda", loss.lambda},
                            {"upsample", std::string(to_string(loss.upsample))}};
  std::ofstream os(dir / "dump.json");
  if (!(os << meta.dump(2) << "\n")) throw IoError("cannot write " + (dir / "dump.json").string());
}

// Replays a dump through the kernels and the reference loops (all-ones masks).
inline SuiteResult replay(const std::filesystem::path& dir) {
  SuiteResult r{"replay"};
  std::ifstream ms(dir / "dump.json");
  if (!ms) throw IoError("no dump.json in " + dir.string());
  nlohmann::json meta;
  try {
    meta = nlohmann::json::parse(ms);
  } catch (const nlohmann::json::exception& e) {
    throw IoError("bad dump.json: " + std::string(e.what()));
  }
  const auto logits = load_t4<double>((dir / "logits.t4").string());
  const auto high = load_t4<double>((dir / "high.t4").string());
  const auto mid = load_t4<double>((dir / "mid.t4").string());
  const auto labels = meta.at("labels").get<std::vector<int>>();
  const std::size_t S = meta.at("classes").get<std::size_t>();
  const StageSpec sh{S, meta.at("xi_high").get<std::size_t>()}, sl{S, meta.at("xi_mid").get<std::size_t>()};
  LossConfig cfg;
  cfg.mu = meta.at("mu").get<double>();
  cfg.lambda = meta.at("lambda").get<double>();
  const auto method = parse_upsample_method(meta.at("upsample").get<std::string>());
  if (!method) throw IoError("bad upsample method in dump.json");
  cfg.upsample = *method;
  const MaskSet mh = MaskSet::all_ones(sh), ml = MaskSet::all_ones(sl);
  Tape<double> tape;
  const LossBreakdown k =
      total_loss(tape.leaf(logits), tape.leaf(high), tape.leaf(mid), std::span<const int>(labels), sh, sl, cfg, mh, ml)
          .breakdown;
  const LossBreakdown o = oracle::reference_losses(logits, high, mid, labels, sh, sl, cfg, mh, ml);
  r.cases = 1;
  const std::pair<const char*, std::pair<double, double>> parts[] = {
      {"ce", {k.ce, o.ce}}, {"mc_high", {k.mc_high, o.mc_high}}, {"mc_mid", {k.mc_mid, o.mc_mid}},
      {"total", {k.total, o.total}}};
  for (const auto& [name, v] : parts) {
    const double err = oracle::rel_error(v.first, v.second);
    r.worst = std::max(r.worst, err);
    r.check(err <= 1e-9, 0, 0, std::string(name) + " kernel " + detail::num(v.first) + " vs reference " +
                                   detail::num(v.second));
  }
  return r;
}

using Suite = std::function<SuiteResult(const Options&)>;

inline std::vector<std::pair<std::string, Suite>> all_suites() {
  return {{"masks", masks},
          {"softmax", softmax},
          {"diversity", diversity},
          {"attention", attention},
          {"breakdown", breakdown},
          {"resample", resample},
          {"oracle-equivalence", [](const Options& o) { return oracle_equivalence(o); }},
          {"gradcheck", [](const Options& o) { return gradcheck(o); }}};
}

// Runs one suite, turning escaped exceptions into a failure.
inline SuiteResult run(const std::string& name, const Suite& suite, const Options& opt) {
  const auto t0 = std::chrono::steady_clock::now();
  SuiteResult r;
  try {
    r = suite(opt);
  } catch (const std::exception& e) {
    r.name = name;
    r.fail(r.cases, opt.seed, std::string("exception: ") + e.what());
  }
  r.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  return r;
}

// `timings` adds wall-clock seconds per suite; leave it off for output that
// must be reproducible.
inline std::string format_table(const std::vector<SuiteResult>& results, bool timings = true) {
  std::ostringstream os;
  os << std::left << std::setw(20) << "suite" << std::right << std::setw(7) << "cases" << std::setw(13) << "worst err";
  if (timings) os << std::setw(9) << "time";
  os << "  result\n";
  for (const auto& r : results) {
    os << std::left << std::setw(20) << r.name << std::right << std::setw(7) << r.cases << std::setw(13)
       << std::setprecision(3) << r.worst;
    if (timings) os << std::setw(8) << std::fixed << std::setprecision(2) << r.seconds << "s" << std::defaultfloat;
    os << "  " << (r.passed ? "PASS" : "FAIL");
    if (!r.passed) os << "  " << r.detail;
    os << "\n";
  }
  return os.str();
}

}  // namespace tdsa::selftest

#endif  // TDSA_SELFTEST_HPP_
