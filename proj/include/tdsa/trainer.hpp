#ifndef TDSA_TRAINER_HPP_
#define TDSA_TRAINER_HPP_

#include <algorithm>
#include <cmath>
#include <fstream>
#include <functional>
#include <iomanip>
#include <limits>
#include <map>
#include <numeric>
#include <optional>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include "tdsa/backbone.hpp"
#include "tdsa/datagen.hpp"
#include "tdsa/loss.hpp"

namespace tdsa {

struct TrainConfig {
  std::size_t epochs = 60;
  std::size_t batch_size = 32;
  double base_lr = 0.1;
  double lr_factor = 0.1;
  std::vector<std::size_t> milestones = {30, 45};
  double weight_decay = 5e-4;
  double momentum = 0.9;
  std::uint64_t seed = 0;
  std::size_t eval_every = 0;  // 0: evaluate after the last epoch only
  LossConfig loss;
  BackboneConfig backbone;

  void validate() const {
    if (epochs == 0 || batch_size == 0) throw ContractError("TrainConfig: epochs and batch_size must be positive");
    for (std::size_t i = 0; i < milestones.size(); ++i) {
      if (milestones[i] >= epochs || (i > 0 && milestones[i] <= milestones[i - 1])) {
        throw ContractError("TrainConfig: milestones must be strictly increasing and < epochs");
      }
    }
    if (!(base_lr >= 0) || !(weight_decay >= 0) || !(momentum >= 0 && momentum < 1)) {
      throw ContractError("TrainConfig: lr and weight decay must be >= 0, momentum in [0, 1)");
    }
    loss.validate();
    backbone.validate();
    stage_repeat(backbone.high_spec(), backbone.mid_spec());
  }
};

inline double lr_at(std::size_t epoch, const TrainConfig& cfg) {
  const auto passed = std::count_if(cfg.milestones.begin(), cfg.milestones.end(),
                                    [epoch](std::size_t m) { return epoch >= m; });
  return cfg.base_lr * std::pow(cfg.lr_factor, static_cast<double>(passed));
}

// ---------------------------------------------------------------------------
// Config files: flat `key = value` lines, `#` comments.

namespace config_detail {

inline std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

inline std::vector<std::size_t> parse_list(const std::string& v) {
  std::vector<std::size_t> out;
  std::stringstream ss(v);
  std::string item;
  while (std::getline(ss, item, ',')) {
    item = trim(item);
    if (!item.empty()) out.push_back(std::stoul(item));
  }
  return out;
}

inline bool parse_bool(const std::string& v) {
  if (v == "1" || v == "true" || v == "yes" || v == "on") return true;
  if (v == "0" || v == "false" || v == "no" || v == "off") return false;
  throw std::invalid_argument("expected a boolean, got '" + v + "'");
}

}  // namespace config_detail

using ConfigMap = std::map<std::string, std::string>;

inline ConfigMap read_config_file(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw IoError("cannot open config " + path);
  ConfigMap out;
  std::string line;
  for (std::size_t lineno = 1; std::getline(is, line); ++lineno) {
    const auto hash = line.find('#');
    if (hash != std::string::npos) line.resize(hash);
    line = config_detail::trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) {
      throw ContractError(path + ":" + std::to_string(lineno) + ": expected key = value");
    }
    out[config_detail::trim(line.substr(0, eq))] = config_detail::trim(line.substr(eq + 1));
  }
  return out;
}

struct RunConfig {
  TrainConfig train;
  SyntheticSpec data;
};

// Applies recognized keys; throws ContractError naming the first unknown or
// malformed key.
inline void apply_config(RunConfig& rc, const ConfigMap& kv) {
  using namespace config_detail;
  TrainConfig& t = rc.train;
  BackboneConfig& b = t.backbone;
  LossConfig& l = t.loss;
  SyntheticSpec& d = rc.data;
  const std::map<std::string, std::function<void(const std::string&)>> setters = {
      {"epochs", [&](const std::string& v) { t.epochs = std::stoul(v); }},
      {"batch_size", [&](const std::string& v) { t.batch_size = std::stoul(v); }},
      {"lr", [&](const std::string& v) { t.base_lr = std::stod(v); }},
      {"lr_factor", [&](const std::string& v) { t.lr_factor = std::stod(v); }},
      {"milestones", [&](const std::string& v) { t.milestones = parse_list(v); }},
      {"weight_decay", [&](const std::string& v) { t.weight_decay = std::stod(v); }},
      {"momentum", [&](const std::string& v) { t.momentum = std::stod(v); }},
      {"seed", [&](const std::string& v) { t.seed = d.seed = std::stoull(v); }},
      {"eval_every", [&](const std::string& v) { t.eval_every = std::stoul(v); }},
      {"mu", [&](const std::string& v) { l.mu = std::stod(v); }},
      {"lambda", [&](const std::string& v) { l.lambda = std::stod(v); }},
      {"upsample",
       [&](const std::string& v) {
         auto m = parse_upsample_method(v);
         if (!m) throw ContractError("upsample must be nearest, bilinear or bicubic, got '" + v + "'");
         l.upsample = *m;
       }},
      {"detach_attention", [&](const std::string& v) { l.detach_attention = parse_bool(v); }},
      {"xi", [&](const std::string& v) { b.xi_mult = std::stoul(v); }},
      {"xi_high", [&](const std::string& v) { b.xi_high = std::stoul(v); }},
      {"widths", [&](const std::string& v) { b.widths = parse_list(v); }},
      {"convs_per_block", [&](const std::string& v) { b.convs_per_block = std::stoul(v); }},
      {"mid_in_trunk", [&](const std::string& v) { b.mid_in_trunk = parse_bool(v); }},
      {"tap_ratio", [&](const std::string& v) { b.tap_ratio = std::stoul(v); }},
      {"classes", [&](const std::string& v) { b.num_classes = d.num_classes = std::stoul(v); }},
      {"image_size", [&](const std::string& v) { b.input_h = b.input_w = d.image_size = std::stoul(v); }},
      {"train_per_class", [&](const std::string& v) { d.train_per_class = std::stoul(v); }},
      {"test_per_class", [&](const std::string& v) { d.test_per_class = std::stoul(v); }},
      {"global_vocab", [&](const std::string& v) { d.global_vocab = std::stoul(v); }},
      {"local_vocab", [&](const std::string& v) { d.local_vocab = std::stoul(v); }},
      {"noise", [&](const std::string& v) { d.noise = std::stod(v); }},
      {"contrast", [&](const std::string& v) { d.contrast = std::stod(v); }},
      {"decoys", [&](const std::string& v) { d.decoys = std::stoul(v); }},
  };
  for (const auto& [key, value] : kv) {
    auto it = setters.find(key);
    if (it == setters.end()) throw ContractError("unknown config key '" + key + "'");
    try {
      it->second(value);
    } catch (const std::logic_error& e) {
      if (dynamic_cast<const ContractError*>(&e)) throw;
      throw ContractError("bad value for '" + key + "': '" + value + "'");
    }
  }
}

// Every key apply_config understands, with the current values; feeding the
// result back through apply_config reproduces `rc`.
inline ConfigMap config_map(const RunConfig& rc) {
  auto num = [](double v) {
    std::ostringstream os;
    os << std::setprecision(17) << v;
    return os.str();
  };
  auto list = [](const std::vector<std::size_t>& v) {
    std::string out;
    for (std::size_t i = 0; i < v.size(); ++i) out += (i ? "," : "") + std::to_string(v[i]);
    return out;
  };
  const TrainConfig& t = rc.train;
  const BackboneConfig& b = t.backbone;
  const SyntheticSpec& d = rc.data;
  return {{"epochs", std::to_string(t.epochs)},
          {"batch_size", std::to_string(t.batch_size)},
          {"lr", num(t.base_lr)},
          {"lr_factor", num(t.lr_factor)},
          {"milestones", list(t.milestones)},
          {"weight_decay", num(t.weight_decay)},
          {"momentum", num(t.momentum)},
          {"seed", std::to_string(t.seed)},
          {"eval_every", std::to_string(t.eval_every)},
          {"mu", num(t.loss.mu)},
          {"lambda", num(t.loss.lambda)},
          {"upsample", std::string(to_string(t.loss.upsample))},
          {"detach_attention", t.loss.detach_attention ? "true" : "false"},
          {"xi", std::to_string(b.xi_mult)},
          {"xi_high", std::to_string(b.xi_high)},
          {"widths", list(b.widths)},
          {"convs_per_block", std::to_string(b.convs_per_block)},
          {"mid_in_trunk", b.mid_in_trunk ? "true" : "false"},
          {"tap_ratio", std::to_string(b.tap_ratio)},
          {"classes", std::to_string(b.num_classes)},
          {"image_size", std::to_string(b.input_h)},
          {"train_per_class", std::to_string(d.train_per_class)},
          {"test_per_class", std::to_string(d.test_per_class)},
          {"global_vocab", std::to_string(d.global_vocab)},
          {"local_vocab", std::to_string(d.local_vocab)},
          {"noise", num(d.noise)},
          {"contrast", num(d.contrast)},
          {"decoys", std::to_string(d.decoys)}};
}

inline nlohmann::json to_json(const TrainConfig& t) {
  return {{"epochs", t.epochs},
          {"batch_size", t.batch_size},
          {"lr", t.base_lr},
          {"lr_factor", t.lr_factor},
          {"milestones", t.milestones},
          {"weight_decay", t.weight_decay},
          {"momentum", t.momentum},
          {"seed", t.seed},
          {"mu", t.loss.mu},
          {"lambda", t.loss.lambda},
          {"upsample", to_string(t.loss.upsample)},
          {"detach_attention", t.loss.detach_attention}};
}

// ---------------------------------------------------------------------------
// Evaluation.

struct EvalMetrics {
  double accuracy = 0;
  double align_accuracy = 0;  // argmax of per-class pooled F_h responses
  double containment = std::numeric_limits<double>::quiet_NaN();
  std::size_t count = 0;
};

inline std::size_t argmax_row(const Tensor4<float>& t, std::size_t b) {
  const std::size_t k = t.c();
  const float* row = t.data().data() + b * k;
  return static_cast<std::size_t>(std::max_element(row, row + k) - row);
}

inline double top1(const Tensor4<float>& logits, std::span<const int> labels) {
  if (logits.n() != labels.size()) throw DimensionError("top1: batch/label count mismatch");
  if (labels.empty()) return 0.0;
  std::size_t hit = 0;
  for (std::size_t b = 0; b < labels.size(); ++b) hit += argmax_row(logits, b) == static_cast<std::size_t>(labels[b]);
  return static_cast<double>(hit) / static_cast<double>(labels.size());
}

// Fraction of a mid-grid cell covered by the mask, per cell (area average).
inline std::vector<double> mask_coverage(const Mask& m, std::size_t h, std::size_t w, std::size_t gh, std::size_t gw) {
  std::vector<double> cov(gh * gw, 0.0);
  const std::size_t fy = h / gh, fx = w / gw;
  for (std::size_t y = 0; y < gh * fy; ++y)
    for (std::size_t x = 0; x < gw * fx; ++x) cov[(y / fy) * gw + x / fx] += m[y * w + x];
  for (double& c : cov) c /= static_cast<double>(fy * fx);
  return cov;
}

// Share of the true-class group's positive mass of `mid_att` (N x S*xi x gh x gw)
// that falls inside the region mask.
inline double containment_of(const Tensor4<float>& mid_att, std::size_t b, std::size_t label, std::size_t xi,
                             const std::vector<double>& coverage) {
  double inside = 0, total = 0;
  for (std::size_t j = 0; j < xi; ++j) {
    auto plane = mid_att.plane(b, label * xi + j);
    for (std::size_t p = 0; p < plane.size(); ++p) {
      const double v = std::max(0.0f, plane[p]);
      inside += v * coverage[p];
      total += v;
    }
  }
  if (total <= 0) return std::accumulate(coverage.begin(), coverage.end(), 0.0) / static_cast<double>(coverage.size());
  return inside / total;
}

struct EvalOutputs {
  Tensor4<float> logits, mid, high, attended;
};

// Eval-mode forward of one batch plus the gated middle-level map.
inline EvalOutputs eval_forward(const Tensor4<float>& x, const ModelParams<float>& params, const TrainConfig& cfg) {
  Tape<float> tape;
  ModelParams<float>& p = const_cast<ModelParams<float>&>(params);  // eval mode never writes buffers
  auto f = forward(tape, x, p, cfg.backbone, false);
  const std::size_t repeat = stage_repeat(cfg.backbone.high_spec(), cfg.backbone.mid_spec());
  auto att = tdsa_attention(f.mid, f.high, repeat, cfg.loss.upsample, false);
  return {f.logits.value(), f.mid.value(), f.high.value(), att.value()};
}

inline EvalMetrics evaluate(const ModelParams<float>& params, const Dataset& data, const TrainConfig& cfg,
                            std::size_t batch = 64) {
  EvalMetrics m;
  m.count = data.size();
  if (data.size() == 0) return m;
  const StageSpec hs = cfg.backbone.high_spec();
  const MaskSet ones = MaskSet::all_ones(hs);
  std::size_t hit = 0, align_hit = 0;
  double contain = 0;
  for (std::size_t start = 0; start < data.size(); start += batch) {
    std::vector<std::size_t> idx(std::min(batch, data.size() - start));
    std::iota(idx.begin(), idx.end(), start);
    const auto labels = data.gather_labels(idx);
    EvalOutputs out = eval_forward(data.gather(idx), params, cfg);
    Tape<float> t;
    const Tensor4<float> g = class_responses(t.constant(out.high), hs, ones).value();
    for (std::size_t b = 0; b < idx.size(); ++b) {
      const auto y = static_cast<std::size_t>(labels[b]);
      hit += argmax_row(out.logits, b) == y;
      align_hit += argmax_row(g, b) == y;
      if (data.has_regions()) {
        const auto cov = mask_coverage(data.region[idx[b]], data.height, data.width, out.attended.h(),
                                       out.attended.w());
        contain += containment_of(out.attended, b, y, cfg.backbone.mid_spec().channels_per_class, cov);
      }
    }
  }
  const double n = static_cast<double>(data.size());
  m.accuracy = static_cast<double>(hit) / n;
  m.align_accuracy = static_cast<double>(align_hit) / n;
  if (data.has_regions()) m.containment = contain / n;
  return m;
}

// ---------------------------------------------------------------------------
// Training.

struct EpochLog {
  std::size_t epoch = 0;
  std::size_t step = 0;  // optimizer steps taken so far
  double lr = 0;
  LossBreakdown loss;    // mean over the epoch's batches
  std::optional<EvalMetrics> eval;

  static std::string csv_header() {
    return "epoch," + LossBreakdown::csv_header() + ",lr,test_acc,align_acc,containment";
  }
  std::string csv_row() const {
    std::ostringstream os;
    os.precision(9);
    os << epoch << ',' << loss.csv_row(step) << ',' << lr << ',';
    if (eval) os << eval->accuracy << ',' << eval->align_accuracy << ',' << eval->containment;
    else os << ",,";
    return os.str();
  }
};

struct Metrics {
  std::vector<EpochLog> epochs;
  EvalMetrics final_eval;

  void write_csv(const std::string& path) const {
    std::ofstream os(path);
    if (!os) throw IoError("cannot write " + path);
    os << EpochLog::csv_header() << "\n";
    for (const auto& e : epochs) os << e.csv_row() << "\n";
  }
};

struct OptimizerState {
  std::vector<Tensor4<float>> velocity;  // one per array; empty for buffers
};

// v = momentum * v + (g + wd * w);  w -= lr * v. Weight decay on kernels only.
inline void sgd_step(ModelParams<float>& params, const std::vector<Tensor4<float>>& grads, OptimizerState& state,
                     double lr, const TrainConfig& cfg) {
  if (state.velocity.size() != params.arrays.size()) state.velocity.assign(params.arrays.size(), {});
  const float flr = static_cast<float>(lr), mom = static_cast<float>(cfg.momentum),
              wd = static_cast<float>(cfg.weight_decay);
  for (std::size_t i = 0; i < params.arrays.size(); ++i) {
    NamedArray<float>& a = params.arrays[i];
    if (a.kind == ParamKind::kBuffer) continue;
    Tensor4<float>& v = state.velocity[i];
    if (v.empty()) v = Tensor4<float>(a.value.shape());
    const Tensor4<float>& g = grads[i];
    const float decay = a.kind == ParamKind::kWeight ? wd : 0.0f;
    auto& w = a.value.data();
    for (std::size_t k = 0; k < w.size(); ++k) {
      v[k] = mom * v[k] + (g[k] + decay * w[k]);
      w[k] -= flr * v[k];
    }
    if (!a.value.all_finite()) throw NumericError("sgd_step: non-finite values in " + a.name);
  }
}

struct StepResult {
  LossBreakdown loss;
  std::vector<Tensor4<float>> grads;  // aligned with params.arrays; empty for buffers
};

// Forward + loss + backward on one batch (train-mode batch norm, running
// statistics updated).
template <typename Rng>
StepResult train_step(ModelParams<float>& params, const Tensor4<float>& x, std::span<const int> labels,
                      const TrainConfig& cfg, Rng& mask_rng) {
  Tape<float> tape;
  auto f = forward(tape, x, params, cfg.backbone, true);
  auto tl = total_loss(f.logits, f.high, f.mid, labels, cfg.backbone.high_spec(), cfg.backbone.mid_spec(), cfg.loss,
                       mask_rng);
  tape.backward(tl.total);
  StepResult r;
  r.loss = tl.breakdown;
  r.grads.resize(params.arrays.size());
  for (std::size_t i = 0; i < params.arrays.size(); ++i) {
    if (params.arrays[i].kind == ParamKind::kBuffer) continue;
    const auto& g = tape.grad(f.param_vars[i]);
    r.grads[i] = g.empty() ? Tensor4<float>(params.arrays[i].value.shape()) : g;
  }
  return r;
}

struct TrainResult {
  ModelParams<float> params;
  Metrics metrics;
  std::size_t steps = 0;
};

// Independent deterministic streams for init, shuffling and mask sampling.
inline std::mt19937_64 seeded_stream(std::uint64_t seed, std::uint32_t stream) {
  std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32), stream};
  return std::mt19937_64(seq);
}

using EpochCallback = std::function<void(const EpochLog&)>;

inline TrainResult train(const Dataset& data, const TrainConfig& cfg, const Dataset* test = nullptr,
                         const EpochCallback& on_epoch = {}) {
  cfg.validate();
  if (data.size() == 0) throw ContractError("train: empty dataset");
  if (data.height != cfg.backbone.input_h || data.width != cfg.backbone.input_w) {
    throw DimensionError("train: dataset images are " + std::to_string(data.height) + "x" +
                         std::to_string(data.width) + ", model expects " + std::to_string(cfg.backbone.input_h) +
                         "x" + std::to_string(cfg.backbone.input_w));
  }
  for (int y : data.labels) {
    if (y < 0 || static_cast<std::size_t>(y) >= cfg.backbone.num_classes) {
      throw ContractError("train: label " + std::to_string(y) + " out of range for " +
                          std::to_string(cfg.backbone.num_classes) + " classes");
    }
  }
  auto init_rng = seeded_stream(cfg.seed, 1);
  auto shuffle_rng = seeded_stream(cfg.seed, 2);
  auto mask_rng = seeded_stream(cfg.seed, 3);

  TrainResult res;
  res.params = init_params<float>(cfg.backbone, init_rng);
  OptimizerState opt;
  std::vector<std::size_t> order(data.size());
  std::iota(order.begin(), order.end(), 0);

  for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    std::shuffle(order.begin(), order.end(), shuffle_rng);
    const double lr = lr_at(epoch, cfg);
    EpochLog log;
    log.epoch = epoch;
    log.lr = lr;
    std::size_t batches = 0;
    for (std::size_t start = 0; start < order.size(); start += cfg.batch_size, ++batches) {
      const std::span<const std::size_t> idx(order.data() + start, std::min(cfg.batch_size, order.size() - start));
      const auto labels = data.gather_labels(idx);
      StepResult step;
      try {
        step = train_step(res.params, data.gather(idx), labels, cfg, mask_rng);
        sgd_step(res.params, step.grads, opt, lr, cfg);
      } catch (const NumericError& e) {
        throw NumericError("training diverged at epoch " + std::to_string(epoch) + ", batch " +
                           std::to_string(batches) + " (step " + std::to_string(res.steps) + "): " + e.what() +
                           "; last breakdown " + LossBreakdown::csv_header() + " = " + log.loss.csv_row(res.steps));
      }
      ++res.steps;
      LossBreakdown& acc = log.loss;
      const LossBreakdown& s = step.loss;
      acc.ce += s.ce, acc.dis_high += s.dis_high, acc.div_high += s.div_high, acc.mc_high += s.mc_high;
      acc.dis_mid += s.dis_mid, acc.div_mid += s.div_mid, acc.mc_mid += s.mc_mid, acc.tdsa += s.tdsa;
      acc.total += s.total;
    }
    const double nb = static_cast<double>(batches);
    LossBreakdown& acc = log.loss;
    for (double* v : {&acc.ce, &acc.dis_high, &acc.div_high, &acc.mc_high, &acc.dis_mid, &acc.div_mid, &acc.mc_mid,
                      &acc.tdsa, &acc.total}) {
      *v /= nb;
    }
    log.step = res.steps;
    const bool last = epoch + 1 == cfg.epochs;
    if (test && (last || (cfg.eval_every && (epoch + 1) % cfg.eval_every == 0))) {
      log.eval = evaluate(res.params, *test, cfg);
    }
    if (last && log.eval) res.metrics.final_eval = *log.eval;
    res.metrics.epochs.push_back(log);
    if (on_epoch) on_epoch(log);
  }
  return res;
}

}  // namespace tdsa

#endif  // TDSA_TRAINER_HPP_
