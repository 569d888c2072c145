#include <malloc.h>

#include <CLI11.hpp>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <json.hpp>
#include <optional>
#include <string>
#include <vector>

#include "tdsa/selftest.hpp"
#include "tdsa/trainer.hpp"
#include "tdsa/visualize.hpp"

namespace {

namespace fs = std::filesystem;
using namespace tdsa;

enum ExitCode : int { kOk = 0, kCheckFailed = 1, kUsage = 2, kIo = 3 };

// Flags shared by every command; each mirrors a config key and wins over the
// config file.
struct CommonFlags {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::string out;
  std::optional<std::string> upsample;
  std::optional<std::size_t> xi;
  std::optional<double> mu, lambda;
  std::vector<std::string> set;  // extra key=value overrides

  void add_to(CLI::App* cmd, bool out_required) {
    cmd->add_option("--config", config, "key = value config file");
    cmd->add_option("--seed", seed, "run seed (training and data)");
    auto* o = cmd->add_option("--out", out, "output directory");
    if (out_required) o->required();
    cmd->add_option("--upsample", upsample, "nearest, bilinear or bicubic");
    cmd->add_option("--xi", xi, "middle-level channel multiplier");
    cmd->add_option("--mu", mu, "TDSA weight; 0 trains the cross-entropy baseline");
    cmd->add_option("--lambda", lambda, "diversity weight");
    cmd->add_option("--set", set, "override any config key, key=value (repeatable)");
  }

  ConfigMap overrides() const {
    ConfigMap kv;
    for (const auto& s : set) {
      const auto eq = s.find('=');
      if (eq == std::string::npos) throw ContractError("--set expects key=value, got '" + s + "'");
      kv[config_detail::trim(s.substr(0, eq))] = config_detail::trim(s.substr(eq + 1));
    }
    auto put = [&kv](const char* key, const auto& v) {
      if (!v) return;
      std::ostringstream os;
      os << std::setprecision(17) << *v;
      kv[key] = os.str();
    };
    put("seed", seed);
    put("upsample", upsample);
    put("xi", xi);
    put("mu", mu);
    put("lambda", lambda);
    return kv;
  }

  // Defaults <- `base` (e.g. a checkpoint's stored config) <- config file <- flags.
  RunConfig resolve(const ConfigMap& base = {}) const {
    RunConfig rc;
    apply_config(rc, base);
    if (!config.empty()) apply_config(rc, read_config_file(config));
    apply_config(rc, overrides());
    return rc;
  }
};

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream os(path, std::ios::binary);
  if (!os || !(os << text)) throw IoError("cannot write " + path.string());
}

std::string render_config(const ConfigMap& kv) {
  std::string s;
  for (const auto& [k, v] : kv) s += k + " = " + v + "\n";
  return s;
}

nlohmann::json to_json(const EvalMetrics& m) {
  nlohmann::json j{{"accuracy", m.accuracy}, {"align_accuracy", m.align_accuracy}, {"count", m.count}};
  j["containment"] = std::isnan(m.containment) ? nlohmann::json() : nlohmann::json(m.containment);
  return j;
}

void print_eval(const EvalMetrics& m) {
  std::printf("test_acc=%.4f align_acc=%.4f containment=%.4f n=%zu\n", m.accuracy, m.align_accuracy, m.containment,
              m.count);
}

// Train/test splits: a directory tree (root/train, optional root/test) or the
// synthetic generator.
struct Splits {
  Dataset train, test;
  bool has_test = false;
};

Splits load_or_generate(const std::string& data_dir, RunConfig& rc, bool need_train) {
  Splits s;
  if (data_dir.empty()) {
    rc.data.validate();
    if (need_train) s.train = generate_split(rc.data, rc.data.train_per_class, 0);
    s.test = generate_split(rc.data, rc.data.test_per_class, 1);
    s.has_test = true;
    return s;
  }
  const fs::path root(data_dir);
  if (!fs::is_directory(root)) throw ContractError("--data: no such directory " + data_dir);
  const std::size_t h = rc.train.backbone.input_h, w = rc.train.backbone.input_w;
  const bool split_layout = fs::is_directory(root / "train") || fs::is_directory(root / "test");
  if (need_train) s.train = load_dir(split_layout ? root / "train" : root, h, w);
  if (split_layout && fs::is_directory(root / "test")) {
    s.test = load_dir(root / "test", h, w);
    s.has_test = true;
  } else if (!need_train) {
    s.test = load_dir(root, h, w);
    s.has_test = true;
  }
  const Dataset& ref = need_train ? s.train : s.test;
  if (s.has_test && need_train && s.test.class_names != s.train.class_names) {
    throw ContractError("--data: train and test class directories differ");
  }
  rc.train.backbone.num_classes = rc.data.num_classes = ref.num_classes();
  return s;
}

// Checkpoint plus the run config it was trained with; flags may change
// evaluation-time settings but not the architecture.
struct LoadedModel {
  ModelParams<float> params;
  RunConfig rc;
};

LoadedModel load_model(const std::string& dir, const CommonFlags& flags) {
  if (dir.empty() || !fs::is_directory(dir)) throw ContractError("--checkpoint: no such directory '" + dir + "'");
  CheckpointInfo info;
  LoadedModel m;
  m.params = load_checkpoint<float>(dir, &info);
  ConfigMap stored;
  if (info.extra.contains("run")) stored = info.extra["run"].get<ConfigMap>();
  m.rc = flags.resolve(stored);
  if (to_json(m.rc.train.backbone) != to_json(info.backbone)) {
    throw ContractError("flags or config change the architecture stored in " + dir);
  }
  return m;
}

int cmd_selftest(const selftest::Options& opt, const std::vector<std::string>& only, const std::string& replay,
                 const std::string& out) {
  std::vector<selftest::SuiteResult> results;
  for (const auto& [name, suite] : selftest::all_suites()) {
    if (!only.empty() && std::find(only.begin(), only.end(), name) == only.end()) continue;
    results.push_back(selftest::run(name, suite, opt));
  }
  if (!replay.empty()) {
    results.push_back(selftest::run("replay", [&](const selftest::Options&) { return selftest::replay(replay); }, opt));
  }
  if (results.empty()) throw ContractError("--suite matched nothing");
  std::cout << selftest::format_table(results);
  if (!out.empty()) {
    fs::create_directories(out);
    write_text(fs::path(out) / "selftest.txt", selftest::format_table(results, false));
  }
  const bool ok = std::all_of(results.begin(), results.end(), [](const auto& r) { return r.passed; });
  std::cout << (ok ? "all suites passed\n" : "FAILED\n");
  return ok ? kOk : kCheckFailed;
}

int cmd_gen_data(const CommonFlags& flags) {
  RunConfig rc = flags.resolve();
  rc.data.validate();
  const SyntheticData d = generate(rc.data);
  const fs::path out(flags.out);
  save_split(out, "train", d.train);
  save_split(out, "test", d.test);
  ConfigMap kv = config_map(rc);
  write_text(out / "data.cfg", render_config(kv));
  nlohmann::json manifest{{"format", "tdsa-data-1"},
                          {"classes", d.train.class_names},
                          {"train", d.train.size()},
                          {"test", d.test.size()},
                          {"image_size", rc.data.image_size},
                          {"run", kv}};
  write_text(out / "manifest.json", manifest.dump(2) + "\n");
  std::printf("wrote %zu train + %zu test images to %s\n", d.train.size(), d.test.size(), flags.out.c_str());
  return kOk;
}

int cmd_train(const CommonFlags& flags, const std::string& data_dir, bool quiet) {
  RunConfig rc = flags.resolve();
  Splits s = load_or_generate(data_dir, rc, true);
  const fs::path out(flags.out);
  fs::create_directories(out);
  const ConfigMap kv = config_map(rc);
  write_text(out / "config.cfg", render_config(kv));

  TrainResult res = train(s.train, rc.train, s.has_test ? &s.test : nullptr, [&](const EpochLog& e) {
    if (quiet) return;
    std::fprintf(stderr, "epoch %zu  lr %.4g  ce %.4f  tdsa %.4f  total %.4f", e.epoch, e.lr, e.loss.ce, e.loss.tdsa,
                 e.loss.total);
    if (e.eval) std::fprintf(stderr, "  test_acc %.4f  align %.4f", e.eval->accuracy, e.eval->align_accuracy);
    std::fprintf(stderr, "\n");
  });
  res.metrics.write_csv((out / "metrics.csv").string());
  CheckpointInfo info{rc.train.backbone, nlohmann::json{{"run", kv}}, res.steps, rc.train.epochs};
  if (s.has_test) info.extra["final_eval"] = to_json(res.metrics.final_eval);
  save_checkpoint(out / "checkpoint", res.params, info);
  if (s.has_test) print_eval(res.metrics.final_eval);
  return kOk;
}

int cmd_eval(const CommonFlags& flags, const std::string& checkpoint, const std::string& data_dir,
             std::size_t dump) {
  LoadedModel m = load_model(checkpoint, flags);
  Splits s = load_or_generate(data_dir, m.rc, false);
  const EvalMetrics e = evaluate(m.params, s.test, m.rc.train);
  print_eval(e);
  if (!flags.out.empty()) {
    const fs::path out(flags.out);
    fs::create_directories(out);
    write_text(out / "eval.json", to_json(e).dump(2) + "\n");
    if (dump > 0) {
      std::vector<std::size_t> idx(std::min(dump, s.test.size()));
      std::iota(idx.begin(), idx.end(), 0);
      const EvalOutputs o = eval_forward(s.test.gather(idx), m.params, m.rc.train);
      const auto labels = s.test.gather_labels(idx);
      selftest::write_dump(out / "dump", o.logits, o.high, o.mid, labels, m.rc.train.backbone, m.rc.train.loss);
    }
  } else if (dump > 0) {
    throw ContractError("--dump needs --out");
  }
  return kOk;
}

int cmd_visualize(const CommonFlags& flags, const std::string& checkpoint, const std::string& data_dir, long cls,
                  std::size_t limit, bool raw) {
  LoadedModel m = load_model(checkpoint, flags);
  const BackboneConfig& bc = m.rc.train.backbone;
  if (cls < 0 || static_cast<std::size_t>(cls) >= bc.num_classes) {
    throw ContractError("--class " + std::to_string(cls) + " out of range for " + std::to_string(bc.num_classes) +
                        " classes");
  }
  Splits s = load_or_generate(data_dir, m.rc, false);
  std::vector<std::size_t> idx;
  for (std::size_t i = 0; i < s.test.size() && idx.size() < limit; ++i) {
    if (s.test.labels[i] == cls) idx.push_back(i);
  }
  if (idx.empty()) throw ContractError("no samples of class " + std::to_string(cls) + " in the dataset");

  const fs::path out(flags.out);
  fs::create_directories(out);
  const EvalOutputs o = eval_forward(s.test.gather(idx), m.params, m.rc.train);
  std::ostringstream index;
  index << "sample,label,level,channel,file,min,max\n";
  const std::size_t h = bc.input_h, w = bc.input_w, plane = h * w;
  for (std::size_t b = 0; b < idx.size(); ++b) {
    std::ostringstream id;
    id << 's' << std::setw(6) << std::setfill('0') << idx[b];
    PnmImage img{3, h, w, {}};
    for (std::size_t p = 0; p < plane; ++p)
      for (std::size_t ch = 0; ch < 3; ++ch) img.data.push_back(to_u8(s.test.images.data()[(idx[b] * 3 + ch) * plane + p]));
    write_pnm(out / (id.str() + ".ppm"), img);
    for (const ChannelMap& cm : class_channel_maps(o, b, static_cast<std::size_t>(cls), m.rc.train)) {
      const std::string level = cm.level == ChannelMap::Level::kHigh ? "high" : "mid";
      const std::string stem = id.str() + "_" + level + std::to_string(cm.channel);
      const auto values = cm.map.data();
      write_pnm(out / (stem + ".pgm"), PnmImage{1, h, w, to_heatmap(values)});
      if (raw) save_t4((out / (stem + ".t4")).string(), cm.map);
      const auto [lo, hi] = std::minmax_element(values.begin(), values.end());
      index << id.str() << ',' << cls << ',' << level << ',' << cm.channel << ',' << stem << ".pgm,"
            << std::setprecision(9) << *lo << ',' << *hi << '\n';
    }
  }
  write_text(out / "index.csv", index.str());
  std::printf("wrote %zu samples of class %ld to %s\n", idx.size(), cls, flags.out.c_str());
  return kOk;
}

}  // namespace

int main(int argc, char** argv) {
  // The tape allocates and frees many mid-sized buffers per step; keep them
  // on the heap instead of round-tripping through mmap.
  mallopt(M_MMAP_THRESHOLD, 32 << 20);
  mallopt(M_TRIM_THRESHOLD, 256 << 20);

  CLI::App app{"tdsa: top-down spatial attention loss toolkit"};
  app.require_subcommand(1);
  app.set_help_all_flag("--help-all");

  CommonFlags flags;
  selftest::Options st;
  std::vector<std::string> suites;
  std::string replay, checkpoint, data_dir;
  long cls = -1;
  std::size_t limit = 4, dump = 0;
  bool raw = false, quiet = false;

  auto* selftest_cmd = app.add_subcommand("selftest", "oracle equivalence and invariant suites");
  flags.add_to(selftest_cmd, false);
  selftest_cmd->add_option("--suite", suites, "run only the named suites");
  selftest_cmd->add_option("--replay", replay, "also check a feature dump written by `eval --dump`");
  selftest_cmd->add_flag("--corrupt-lambda-sign", st.corrupt_lambda_sign, "debug: flip the diversity sign");

  auto* gradcheck_cmd = app.add_subcommand("gradcheck", "tape gradients vs finite differences");
  flags.add_to(gradcheck_cmd, false);

  auto* gen_cmd = app.add_subcommand("gen-data", "write a synthetic dataset");
  flags.add_to(gen_cmd, true);

  auto* train_cmd = app.add_subcommand("train", "train a model");
  flags.add_to(train_cmd, true);
  train_cmd->add_option("--data", data_dir, "dataset directory (default: synthetic)");
  train_cmd->add_flag("--quiet", quiet, "no per-epoch log");

  auto* eval_cmd = app.add_subcommand("eval", "evaluate a checkpoint");
  flags.add_to(eval_cmd, false);
  eval_cmd->add_option("--checkpoint", checkpoint, "checkpoint directory")->required();
  eval_cmd->add_option("--data", data_dir, "dataset directory (default: the run's synthetic test split)");
  eval_cmd->add_option("--dump", dump, "write features of the first N test samples under --out/dump");

  auto* vis_cmd = app.add_subcommand("visualize", "export per-class channel heatmaps");
  flags.add_to(vis_cmd, true);
  vis_cmd->add_option("--checkpoint", checkpoint, "checkpoint directory")->required();
  vis_cmd->add_option("--data", data_dir, "dataset directory (default: the run's synthetic test split)");
  vis_cmd->add_option("--class", cls, "class id")->required();
  vis_cmd->add_option("--limit", limit, "samples to export")->check(CLI::PositiveNumber);
  vis_cmd->add_flag("--raw", raw, "also write float maps as T4 dumps");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? kOk : kUsage;
  }

  try {
    if (flags.seed) st.seed = *flags.seed;
    if (*selftest_cmd) {
      flags.resolve();
      return cmd_selftest(st, suites, replay, flags.out);
    }
    if (*gradcheck_cmd) return cmd_selftest(st, {"gradcheck"}, "", flags.out);
    if (*gen_cmd) return cmd_gen_data(flags);
    if (*train_cmd) return cmd_train(flags, data_dir, quiet);
    if (*eval_cmd) return cmd_eval(flags, checkpoint, data_dir, dump);
    if (*vis_cmd) return cmd_visualize(flags, checkpoint, data_dir, cls, limit, raw);
  } catch (const IoError& e) {
    std::fprintf(stderr, "I/O error: %s\n", e.what());
    return kIo;
  } catch (const fs::filesystem_error& e) {
    std::fprintf(stderr, "I/O error: %s\n", e.what());
    return kIo;
  } catch (const ContractError& e) {
    std::fprintf(stderr, "usage error: %s\n", e.what());
    return kUsage;
  } catch (const DimensionError& e) {
    std::fprintf(stderr, "usage error: %s\n", e.what());
    return kUsage;
  } catch (const NumericError& e) {
    std::fprintf(stderr, "numeric failure: %s\n", e.what());
    return kCheckFailed;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return kCheckFailed;
  }
  return kUsage;
}
