// Acceptance run: one PASS/FAIL line per criterion, exit 0 iff all pass.

#include <malloc.h>
#include <sys/wait.h>

#include <CLI11.hpp>
#include <chrono>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "tdsa/selftest.hpp"
#include "tdsa/trainer.hpp"

namespace {

namespace fs = std::filesystem;
using namespace tdsa;
using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) { return std::chrono::duration<double>(Clock::now() - t0).count(); }

struct Verdict {
  int id;
  bool pass;
  std::string text;
};

std::vector<Verdict> verdicts;

void report(int id, bool pass, const std::string& text) {
  verdicts.push_back({id, pass, text});
  std::printf("criterion %d [%s] %s\n", id, pass ? "PASS" : "FAIL", text.c_str());
  std::fflush(stdout);
}

std::string fmt(const char* f, auto... args) {
  char buf[512];
  std::snprintf(buf, sizeof buf, f, args...);
  return buf;
}

// ---------------------------------------------------------------------------
// Training runs on the benchmark profile.

struct Variant {
  double mu = 1.5;
  std::size_t xi = 2;
  UpsampleMethod upsample = UpsampleMethod::kBilinear;

  std::string label() const {
    return fmt("mu=%g xi=%zu upsample=%s", mu, xi, std::string(to_string(upsample)).c_str());
  }
  bool operator<(const Variant& o) const {
    return std::tie(mu, xi, upsample) < std::tie(o.mu, o.xi, o.upsample);
  }
};

struct Outcome {
  std::uint64_t seed = 0;
  bool ok = false;
  std::string error;
  EvalMetrics eval;
  double seconds = 0;
};

class Bench {
 public:
  Bench(ConfigMap profile, std::vector<std::uint64_t> seeds, fs::path out)
      : profile_(std::move(profile)), seeds_(std::move(seeds)), out_(std::move(out)) {
    fs::create_directories(out_);
    runs_csv_.open(out_ / "runs.csv");
    if (!runs_csv_) throw IoError("cannot write " + (out_ / "runs.csv").string());
    runs_csv_ << "mu,xi,upsample,seed,ok,accuracy,align_accuracy,containment,seconds\n";
  }

  const std::vector<Outcome>& runs(const Variant& v) {
    auto it = cache_.find(v);
    if (it != cache_.end()) return it->second;
    std::vector<Outcome> outs;
    for (std::uint64_t seed : seeds_) outs.push_back(run_one(v, seed));
    return cache_[v] = std::move(outs);
  }

  static double mean_acc(const std::vector<Outcome>& o) { return mean(o, [](const Outcome& r) { return r.eval.accuracy; }); }
  static double mean_align(const std::vector<Outcome>& o) {
    return mean(o, [](const Outcome& r) { return r.eval.align_accuracy; });
  }
  static double mean_contain(const std::vector<Outcome>& o) {
    return mean(o, [](const Outcome& r) { return r.eval.containment; });
  }
  static double total_seconds(const std::vector<Outcome>& o) {
    double s = 0;
    for (const auto& r : o) s += r.seconds;
    return s;
  }
  static bool all_ok(const std::vector<Outcome>& o) {
    return std::all_of(o.begin(), o.end(), [](const Outcome& r) { return r.ok; });
  }
  const ConfigMap& profile() const { return profile_; }

 private:
  template <typename F>
  static double mean(const std::vector<Outcome>& o, F f) {
    double s = 0;
    for (const auto& r : o) s += f(r);
    return o.empty() ? 0 : s / static_cast<double>(o.size());
  }

  Outcome run_one(const Variant& v, std::uint64_t seed) {
    RunConfig rc;
    apply_config(rc, profile_);
    apply_config(rc, {{"seed", std::to_string(seed)},
                      {"mu", fmt("%.17g", v.mu)},
                      {"xi", std::to_string(v.xi)},
                      {"upsample", std::string(to_string(v.upsample))}});
    Outcome o;
    o.seed = seed;
    const auto t0 = Clock::now();
    try {
      const SyntheticData data = generate(rc.data);
      TrainResult res = train(data.train, rc.train, &data.test);
      o.eval = res.metrics.final_eval;
      o.ok = true;
      const fs::path dir = out_ / fmt("mu%g_xi%zu_%s_seed%llu", v.mu, v.xi, std::string(to_string(v.upsample)).c_str(),
                                      static_cast<unsigned long long>(seed));
      fs::create_directories(dir);
      res.metrics.write_csv((dir / "metrics.csv").string());
    } catch (const NumericError& e) {
      o.error = e.what();
    }
    o.seconds = seconds_since(t0);
    std::printf("  run %-40s seed %llu  acc %.4f  align %.4f  contain %.4f  %.1fs%s%s\n", v.label().c_str(),
                static_cast<unsigned long long>(seed), o.eval.accuracy, o.eval.align_accuracy, o.eval.containment,
                o.seconds, o.ok ? "" : "  DIVERGED: ", o.error.c_str());
    std::fflush(stdout);
    runs_csv_ << v.mu << ',' << v.xi << ',' << to_string(v.upsample) << ',' << seed << ',' << o.ok << ','
              << o.eval.accuracy << ',' << o.eval.align_accuracy << ',' << o.eval.containment << ',' << o.seconds
              << '\n';
    runs_csv_.flush();
    return o;
  }

  ConfigMap profile_;
  std::vector<std::uint64_t> seeds_;
  fs::path out_;
  std::map<Variant, std::vector<Outcome>> cache_;
  std::ofstream runs_csv_;
};

// ---------------------------------------------------------------------------
// Criteria.

void oracle_equivalence() {
  const auto t0 = Clock::now();
  const selftest::SuiteResult r = selftest::oracle_equivalence(selftest::Options{});
  const double s = seconds_since(t0);
  report(1, r.passed && r.cases == 50 && s < 10.0,
         fmt("oracle equivalence: %zu cases, worst rel err %.3g (limit 1e-9), %.2fs (limit 10s)%s%s", r.cases,
             r.worst, s, r.passed ? "" : "; ", r.detail.c_str()));
}

void gradient_fidelity() {
  const auto t0 = Clock::now();
  const selftest::SuiteResult r = selftest::gradcheck(selftest::Options{}, 1e-4);
  const double s = seconds_since(t0);
  report(2, r.passed && s < 120.0,
         fmt("gradient fidelity: logits/F_h/F_l on 3 instances + all parameters of a downsized backbone "
             "(mu 1.5 and 0), worst rel err %.3g (limit 1e-4), %.2fs (limit 120s)%s%s",
             r.worst, s, r.passed ? "" : "; ", r.detail.c_str()));
}

void invariants() {
  const selftest::Options opt;
  std::string failed, summary;
  bool ok = true;
  for (auto suite : {selftest::masks, selftest::softmax, selftest::diversity, selftest::attention, selftest::breakdown}) {
    const selftest::SuiteResult r = selftest::run("", suite, opt);
    summary += fmt("%s %zu/%s ", r.name.c_str(), r.cases, r.passed ? "ok" : "FAIL");
    if (!r.passed) {
      ok = false;
      failed += "; " + r.name + ": " + r.detail;
    }
  }
  report(3, ok, "analytic invariants: " + summary + failed);
}

void trend(Bench& b) {
  const auto& tdsa_runs = b.runs(Variant{1.5});
  const auto& ce_runs = b.runs(Variant{0.0});
  const double secs = Bench::total_seconds(tdsa_runs) + Bench::total_seconds(ce_runs);
  double worst_gap = 1e9;
  for (std::size_t i = 0; i < tdsa_runs.size(); ++i) {
    worst_gap = std::min(worst_gap, tdsa_runs[i].eval.accuracy - ce_runs[i].eval.accuracy);
  }
  const double gap = Bench::mean_acc(tdsa_runs) - Bench::mean_acc(ce_runs);
  const bool ok = Bench::all_ok(tdsa_runs) && Bench::all_ok(ce_runs) && gap >= 0.03 && worst_gap >= -0.01 &&
                  secs < 1800;
  report(4, ok,
         fmt("directional trend: mean test acc TDSA %.4f vs CE %.4f, gap %+.2f points (need >= +3), worst per-seed "
             "gap %+.2f points (need >= -1), %zu seeds, %.0fs (limit 1800s)",
             Bench::mean_acc(tdsa_runs), Bench::mean_acc(ce_runs), 100 * gap, 100 * worst_gap, tdsa_runs.size(),
             secs));
}

void alignment(Bench& b) {
  const auto& tdsa_runs = b.runs(Variant{1.5});
  const auto& ce_runs = b.runs(Variant{0.0});
  const double chance = 1.0 / std::stod(b.profile().at("classes"));
  const double t_acc = Bench::mean_acc(tdsa_runs), t_align = Bench::mean_align(tdsa_runs);
  const double c_align = Bench::mean_align(ce_runs);
  const bool ok = t_align >= t_acc - 0.10 && c_align < 2 * chance;
  report(5, ok,
         fmt("channel alignment: TDSA group-argmax acc %.4f vs logit acc %.4f (need within 10 points); CE group-argmax "
             "acc %.4f (need < %.4f = 2x chance)",
             t_align, t_acc, c_align, 2 * chance));
}

void containment(Bench& b) {
  const double t = Bench::mean_contain(b.runs(Variant{1.5}));
  const double c = Bench::mean_contain(b.runs(Variant{0.0}));
  report(6, t - c >= 0.15,
         fmt("attention containment: TDSA %.4f vs CE %.4f, difference %+.4f (need >= +0.15)", t, c, t - c));
}

void upsample_insensitivity(Bench& b) {
  double lo = 1, hi = 0;
  std::string parts;
  bool ok = true;
  for (UpsampleMethod m : {UpsampleMethod::kNearest, UpsampleMethod::kBilinear, UpsampleMethod::kBicubic}) {
    const auto& r = b.runs(Variant{1.5, 2, m});
    ok = ok && Bench::all_ok(r);
    const double a = Bench::mean_acc(r);
    lo = std::min(lo, a);
    hi = std::max(hi, a);
    parts += fmt("%s %.4f ", std::string(to_string(m)).c_str(), a);
  }
  report(7, ok && hi - lo <= 0.03,
         fmt("upsample insensitivity: mean acc %sspread %.2f points (need <= 3)", parts.c_str(), 100 * (hi - lo)));
}

void xi_sweep(Bench& b) {
  std::string parts;
  bool stable = true;
  double best = 0, best_xi = 0, base = 0;
  for (std::size_t xi : {1, 2, 3, 4}) {
    const auto& r = b.runs(Variant{1.5, xi});
    stable = stable && Bench::all_ok(r);
    const double a = Bench::mean_acc(r);
    if (xi == 1) base = a;
    if (a > best) {
      best = a;
      best_xi = static_cast<double>(xi);
    }
    parts += fmt("xi=%zu %.4f%s ", xi, a, Bench::all_ok(r) ? "" : " (diverged)");
  }
  report(8, stable && best - base >= 0.01,
         fmt("xi sweep: mean acc %sbest xi=%g beats xi=1 by %+.2f points (need >= +1), %s", parts.c_str(), best_xi,
             100 * (best - base), stable ? "no divergence" : "DIVERGED"));
}

// ---------------------------------------------------------------------------
// CLI determinism.

int sh(const std::string& cmd) {
  const int status = std::system((cmd + " > /dev/null 2>&1").c_str());
  return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

std::string slurp(const fs::path& p) {
  std::ifstream is(p, std::ios::binary);
  std::ostringstream os;
  os << is.rdbuf();
  return os.str();
}

void cli_determinism(const std::string& cli, const std::string& profile_path, const fs::path& out) {
  if (cli.empty()) {
    report(9, false, "determinism: no --cli given");
    return;
  }
  const std::string common = " --config " + profile_path + " --seed 3 --set epochs=3 --set milestones=1,2";
  std::vector<std::string> problems;
  std::size_t compared = 0;
  for (const char* rep : {"a", "b"}) {
    const fs::path d = out / "cli" / rep;
    fs::remove_all(d);
    const std::string o = " --out " + (d / "").string();
    const std::vector<std::pair<std::string, std::string>> cmds = {
        {"selftest", cli + " selftest --seed 3 --out " + (d / "selftest").string()},
        {"gen-data", cli + " gen-data" + common + " --out " + (d / "data").string()},
        {"train", cli + " train --quiet" + common + " --out " + (d / "train").string()},
        {"train --data", cli + " train --quiet" + common + " --data " + (d / "data").string() + " --out " +
                             (d / "train_dir").string()},
        {"eval", cli + " eval --checkpoint " + (d / "train/checkpoint").string() + " --dump 4 --out " +
                     (d / "eval").string()},
        {"visualize", cli + " visualize --checkpoint " + (d / "train/checkpoint").string() +
                          " --class 2 --limit 3 --raw --out " + (d / "vis").string()}};
    for (const auto& [name, cmd] : cmds) {
      const int code = sh(cmd);
      if (code != 0) problems.push_back(name + " exited " + std::to_string(code));
    }
  }
  const fs::path a = out / "cli" / "a", b = out / "cli" / "b";
  if (fs::exists(a)) {
    for (const auto& e : fs::recursive_directory_iterator(a)) {
      if (!e.is_regular_file()) continue;
      const fs::path rel = fs::relative(e.path(), a);
      ++compared;
      if (!fs::exists(b / rel) || slurp(e.path()) != slurp(b / rel)) problems.push_back("differs: " + rel.string());
    }
  }
  std::string detail;
  for (std::size_t i = 0; i < std::min<std::size_t>(problems.size(), 5); ++i) detail += "; " + problems[i];
  report(9, problems.empty() && compared > 0,
         fmt("determinism: selftest, gen-data, train (generated and --data), eval --dump, visualize --raw run twice; "
             "%zu output files compared bitwise",
             compared) +
             detail);
}

}  // namespace

int main(int argc, char** argv) {
  mallopt(M_MMAP_THRESHOLD, 32 << 20);
  mallopt(M_TRIM_THRESHOLD, 256 << 20);

  CLI::App app{"TDSA acceptance suite"};
  std::string profile_path, cli, out = "acceptance_out";
  std::vector<std::uint64_t> seeds{0, 1, 2, 3, 4};
  std::vector<int> only;
  app.add_option("--profile", profile_path, "benchmark config file")->required();
  app.add_option("--cli", cli, "path to the tdsa executable");
  app.add_option("--out", out, "scratch directory for run logs");
  app.add_option("--seeds", seeds, "seed set")->delimiter(',');
  app.add_option("--only", only, "criteria to run")->delimiter(',');
  CLI11_PARSE(app, argc, argv);

  auto wanted = [&](int id) { return only.empty() || std::find(only.begin(), only.end(), id) != only.end(); };
  const auto t0 = Clock::now();
  try {
    Bench bench(read_config_file(profile_path), seeds, fs::path(out) / "runs");
    if (wanted(1)) oracle_equivalence();
    if (wanted(2)) gradient_fidelity();
    if (wanted(3)) invariants();
    if (wanted(4)) trend(bench);
    if (wanted(5)) alignment(bench);
    if (wanted(6)) containment(bench);
    if (wanted(7)) upsample_insensitivity(bench);
    if (wanted(8)) xi_sweep(bench);
    if (wanted(9)) cli_determinism(cli, profile_path, out);
  } catch (const std::exception& e) {
    std::printf("acceptance aborted: %s\n", e.what());
    return 2;
  }
  const auto failed = std::count_if(verdicts.begin(), verdicts.end(), [](const Verdict& v) { return !v.pass; });
  std::printf("%zu criteria, %td failed, %.0fs\n", verdicts.size(), failed, seconds_since(t0));
  return failed == 0 ? 0 : 1;
}
