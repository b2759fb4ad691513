// Acceptance harness: one PASS/FAIL line per criterion. Experiments shared by
// several criteria are run once and cached.
#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <map>
#include <numeric>
#include <sstream>
#include <string>
#include <sys/wait.h>
#include <tuple>

#include "CLI11.hpp"
#include "dsfed/config.hpp"
#include "dsfed/distill.hpp"
#include "dsfed/metrics.hpp"
#include "dsfed/report.hpp"
#include "dsfed/rng.hpp"
#include "dsfed/runner.hpp"

using namespace dsfed;
namespace fs = std::filesystem;
using Clock = std::chrono::steady_clock;

namespace {

double seconds_since(Clock::time_point t0) { return std::chrono::duration<double>(Clock::now() - t0).count(); }

std::string fmt(double v, int prec = 4) {
  char b[64];
  std::snprintf(b, sizeof b, "%.*f", prec, v);
  return b;
}

std::string sci(double v) {
  char b[64];
  std::snprintf(b, sizeof b, "%.3g", v);
  return b;
}

struct Outcome {
  bool pass = false;
  std::string detail;
};

std::ofstream g_log;

void report(int id, const std::string& name, const Outcome& o) {
  std::string line = "criterion " + std::to_string(id) + " [" + name + "]: " + (o.pass ? "PASS" : "FAIL") + "  " +
                     o.detail;
  std::printf("%s\n", line.c_str());
  std::fflush(stdout);
  if (g_log) g_log << line << "\n" << std::flush;
}

// ---------------------------------------------------------------- 1

Outcome gradient_correctness() {
  const auto t0 = Clock::now();
  Rng rng(101);
  std::uniform_int_distribution<std::size_t> width(1, 3), depth(1, 3);
  std::uniform_real_distribution<double> u(0, 1);
  double worst = 0;
  for (int net = 0; net < 25; ++net) {
    ModelSpec spec;
    spec.input_size = 6;
    const std::size_t layers = depth(rng);
    for (std::size_t l = 0; l + 1 < layers; ++l) spec.widths.push_back(width(rng));
    spec.widths.push_back(1);
    spec.kernels.assign(spec.widths.size(), net % 2 ? 3 : 1);
    const auto params = init_model(spec, 1000 + net);
    std::vector<double> img(36), mask(36);
    for (auto& x : img) x = u(rng);
    for (auto& x : mask) x = u(rng) < 0.4 ? 1.0 : 0.0;
    const Tensor image = Tensor::from({6, 6}, img), m = Tensor::from({6, 6}, mask);
    // Small random biases keep units away from the ReLU kink at exactly zero.
    auto p = params.values;
    for (auto& x : p) x += 0.05 * (u(rng) - 0.5);
    const double err = gradient_check(
        [&](const Tensor& w) { return supervised_loss(forward(spec, w, image), m); }, p, 1e-6);
    worst = std::max(worst, err);
  }
  const double secs = seconds_since(t0);
  return {worst < 1e-4 && secs < 10.0, "max rel err " + sci(worst) + ", " + fmt(secs, 2) + " s"};
}

// ---------------------------------------------------------------- 2

Outcome fedavg_exactness() {
  Rng rng(202);
  std::uniform_int_distribution<int> kd(1, 8), nd(1, 50);
  std::uniform_real_distribution<double> sd(1, 500);
  std::normal_distribution<double> pd;
  double worst = 0;
  bool perm_exact = true;
  for (int t = 0; t < 100; ++t) {
    const int k = kd(rng);
    ModelSpec spec = ModelSpec::lightweight_default(16);
    std::vector<ModelParams> ps;
    std::vector<double> sizes;
    for (int i = 0; i < k; ++i) {
      ModelParams p{spec, std::vector<double>(spec.param_count())};
      for (auto& v : p.values) v = pd(rng) * nd(rng);
      ps.push_back(std::move(p));
      sizes.push_back(std::floor(sd(rng)));
    }
    const auto avg = fedavg(ps, sizes);
    const double n = std::accumulate(sizes.begin(), sizes.end(), 0.0);
    for (std::size_t j = 0; j < avg.values.size(); ++j) {
      long double ref = 0;
      for (int i = 0; i < k; ++i) ref += static_cast<long double>(sizes[i]) / n * ps[i].values[j];
      worst = std::max(worst, std::abs(avg.values[j] - static_cast<double>(ref)));
    }
    std::vector<int> perm(k);
    std::iota(perm.begin(), perm.end(), 0);
    std::shuffle(perm.begin(), perm.end(), rng);
    std::vector<ModelParams> ps2;
    std::vector<double> s2;
    for (int i : perm) {
      ps2.push_back(ps[i]);
      s2.push_back(sizes[i]);
    }
    perm_exact = perm_exact && fedavg(ps2, s2).values == avg.values;
  }
  return {worst <= 1e-12 && perm_exact,
          "max abs dev " + sci(worst) + ", permutation " + (perm_exact ? "exact" : "NOT exact")};
}

// ---------------------------------------------------------------- 3

std::vector<std::size_t> rank_desc(const std::vector<double>& v) {
  std::vector<std::size_t> idx(v.size());
  std::iota(idx.begin(), idx.end(), 0);
  std::stable_sort(idx.begin(), idx.end(), [&v](std::size_t a, std::size_t b) { return v[a] > v[b]; });
  return idx;
}

Outcome kl_and_score_algebra() {
  Rng rng(303);
  std::uniform_real_distribution<double> u(0, 1), big(0, 5);
  std::normal_distribution<double> nd;
  int bad = 0;
  for (int t = 0; t < 1000; ++t) {
    const std::size_t n = 1 + t % 64;
    std::vector<double> a(n), b(n);
    for (auto& x : a) x = u(rng);
    for (auto& x : b) x = u(rng);
    const Tensor p = Tensor::from({n}, a), q = Tensor::from({n}, b);
    const double d = symmetric_kl(p, q);
    bad += !(d >= 0);
    bad += d != symmetric_kl(q, p);
    bad += symmetric_kl(p, p) != 0.0;
    bad += !(d > 0);  // distinct random maps
    // Maps equal after clamping are at distance zero.
    bad += symmetric_kl(Tensor::from({1}, {0.0}), Tensor::from({1}, {kProbFloor / 2})) != 0.0;
  }
  for (int t = 0; t < 200; ++t) {
    std::vector<double> gt(25), kl(25), neg(25);
    for (auto& x : gt) x = std::round(big(rng) * 8) / 8;
    for (auto& x : kl) x = big(rng);
    for (std::size_t i = 0; i < gt.size(); ++i) neg[i] = -gt[i];
    for (auto norm : {ScoreNorm::MinMax, ScoreNorm::Raw}) {
      bad += rank_desc(learnability_scores(gt, kl, 1.0, norm)) != rank_desc(neg);
      bad += rank_desc(learnability_scores(gt, kl, 0.0, norm)) != rank_desc(kl);
    }
    std::vector<ScoredSample> sc(25), shifted(25);
    const double c = nd(rng) * 10;
    for (std::size_t i = 0; i < 25; ++i) {
      sc[i] = {i, 0, 0, std::round(nd(rng) * 3) / 3, 0};
      shifted[i] = sc[i];
      shifted[i].score += c;
    }
    std::vector<std::size_t> prev;
    for (double r : {0.1, 0.3, 0.5, 0.7, 1.0}) {
      auto pool = full_pool(25);
      pool.selection_rate = r;
      const auto cur = refresh_pool(pool, sc, 0).selected;
      bad += !std::includes(cur.begin(), cur.end(), prev.begin(), prev.end());
      bad += cur != refresh_pool(pool, shifted, 0).selected;
      pool.mode = SelectionMode::SoftmaxSample;
      bad += refresh_pool(pool, sc, t).selected != refresh_pool(pool, shifted, t).selected;
      prev = cur;
    }
  }
  return {bad == 0, std::to_string(bad) + " violations"};
}

// ---------------------------------------------------------------- 4

Outcome metric_algebra() {
  Rng rng(404);
  std::uniform_real_distribution<double> u(0, 1);
  int bad = 0;
  double worst = 0;
  for (int t = 0; t < 1000; ++t) {
    const std::size_t g = 4 + t % 29;
    const double pa = u(rng) * 0.8, pb = u(rng) * 0.8;
    std::vector<double> a(g * g), b(g * g);
    for (auto& x : a) x = u(rng) < pa ? 1.0 : 0.0;
    for (auto& x : b) x = u(rng) < pb ? 1.0 : 0.0;
    std::size_t inter = 0, na = 0, nb = 0;
    for (std::size_t i = 0; i < a.size(); ++i) {
      inter += a[i] == 1.0 && b[i] == 1.0;
      na += a[i] == 1.0;
      nb += b[i] == 1.0;
    }
    const std::size_t uni = na + nb - inter;
    const double d_ref = na + nb == 0 ? 1.0 : 2.0 * inter / double(na + nb);
    const double j_ref = uni == 0 ? 1.0 : double(inter) / double(uni);
    const Tensor ta = Tensor::from({g, g}, a), tb = Tensor::from({g, g}, b);
    const double d = dice(ta, tb), j = iou(ta, tb);
    bad += !(d >= j);
    worst = std::max({worst, std::abs(d - 2 * j / (1 + j)), std::abs(d - d_ref), std::abs(j - j_ref)});
  }
  return {bad == 0 && worst <= 1e-12, "max deviation " + sci(worst) + ", " + std::to_string(bad) +
                                          " ordering violations"};
}

// ---------------------------------------------------------------- 5

Outcome communication(const RunnerConfig& base) {
  ExperimentConfig cfg = base.exp;
  cfg.fed.n_rounds = 100;
  cfg.fed.accounting_only = true;
  const auto t0 = Clock::now();
  const auto rep = run_experiment(cfg);
  const double secs = seconds_since(t0);
  const auto total = rep.ledger.total_bytes();
  const auto predicted = predicted_ledger_bytes(cfg);
  const auto baseline = foundation_baseline_bytes(cfg);
  const double ratio = double(total) / double(baseline);
  const double param_ratio = double(cfg.foundation.param_count()) / double(cfg.lightweight.param_count());
  const bool ok = ratio < 0.15 && total == predicted && secs < 1.0 && param_ratio >= 10 &&
                  cfg.data.n_clients == 4 && ledger_is_lightweight_only(rep.ledger, cfg);
  return {ok, "ledger " + std::to_string(total) + " B, predicted " + std::to_string(predicted) +
                  " B, foundation-transfer " + std::to_string(baseline) + " B, ratio " + fmt(ratio) +
                  ", param ratio " + fmt(param_ratio, 1) + ", " + fmt(secs, 3) + " s"};
}

// ---------------------------------------------------------------- cached experiments

struct Key {
  bool mutual, lg;
  double rate, lambda;
  std::uint64_t seed;
  auto tie() const { return std::tie(mutual, lg, rate, lambda, seed); }
  bool operator<(const Key& o) const { return tie() < o.tie(); }
};

class Runs {
 public:
  explicit Runs(RunnerConfig cfg) : cfg_(std::move(cfg)) {}
  const RunnerConfig& cfg() const { return cfg_; }

  const ExperimentSummary& get(bool mutual, bool lg, double rate, double lambda, std::uint64_t seed) {
    const Key k{mutual, lg, rate, lambda, seed};
    if (auto it = cache_.find(k); it != cache_.end()) return it->second;
    ExperimentConfig e = cfg_.exp;
    e.fed.mutual_kd = mutual;
    e.fed.lg_selection = lg;
    e.fed.selection_rate = rate;
    e.fed.lambda = lambda;
    const auto t0 = Clock::now();
    auto s = run_summary(e, seed);
    const double secs = seconds_since(t0);
    std::printf("  run mutual=%d lg=%d rate=%g lambda=%g seed=%llu: dice %.4f foundation-holdout %.4f (%.1f s)\n",
                mutual, lg, rate, lambda, static_cast<unsigned long long>(seed), s.dice, s.foundation_holdout_dice,
                secs);
    std::fflush(stdout);
    return cache_.emplace(k, s).first->second;
  }

  double mean_dice(bool mutual, bool lg, double rate, double lambda) {
    double acc = 0;
    for (auto seed : cfg_.seeds) acc += get(mutual, lg, rate, lambda, seed).dice;
    return acc / double(cfg_.seeds.size());
  }

 private:
  RunnerConfig cfg_;
  std::map<Key, ExperimentSummary> cache_;
};

// ---------------------------------------------------------------- 6

Outcome compute_reduction(Runs& runs, double& ablation_secs) {
  const auto& c = runs.cfg();
  const double rate = c.exp.fed.selection_rate, lambda = c.exp.fed.lambda;
  const auto t0 = Clock::now();
  for (bool m : {false, true})
    for (bool lg : {false, true})
      for (auto seed : c.seeds) runs.get(m, lg, rate, lambda, seed);
  ablation_secs = seconds_since(t0);
  std::size_t half = 0, full = 0;
  for (auto seed : c.seeds) {
    half += runs.get(true, true, 0.5, lambda, seed).steps.distill;
    full += runs.get(true, true, 1.0, lambda, seed).steps.distill;
  }
  const bool ok = 2 * half == full && full > 0 && ablation_secs < 15 * 60;
  return {ok, "distill evals rate 0.5: " + std::to_string(half) + ", rate 1.0: " + std::to_string(full) +
                  " (ratio " + fmt(full ? double(half) / double(full) : 0.0) + "), ablation grid " +
                  fmt(ablation_secs, 1) + " s"};
}

// ---------------------------------------------------------------- 7

Outcome ablation_direction(Runs& runs) {
  const auto& c = runs.cfg();
  const double rate = c.exp.fed.selection_rate, lambda = c.exp.fed.lambda;
  const double base = runs.mean_dice(false, false, rate, lambda);
  const double lg_only = runs.mean_dice(false, true, rate, lambda);
  const double kd_only = runs.mean_dice(true, false, rate, lambda);
  const double full = runs.mean_dice(true, true, rate, lambda);
  const bool ok = full >= lg_only && full >= kd_only && full >= base + 0.01;
  return {ok, "baseline " + fmt(base) + ", selection only " + fmt(lg_only) + ", mutual KD only " + fmt(kd_only) +
                  ", full " + fmt(full) + " (margin over baseline " + fmt(full - base) + ", need >= 0.01)"};
}

// ---------------------------------------------------------------- 8

Outcome mutual_enhancement(Runs& runs) {
  const auto& c = runs.cfg();
  const double rate = c.exp.fed.selection_rate, lambda = c.exp.fed.lambda;
  double lw_on = 0, lw_off = 0, f_on = 0, f_off = 0;
  int lw_seed_ok = 0, f_seed_ok = 0;
  for (auto seed : c.seeds) {
    const auto& on = runs.get(true, true, rate, lambda, seed);
    const auto& off = runs.get(false, false, rate, lambda, seed);
    lw_on += on.dice;
    lw_off += off.dice;
    f_on += on.foundation_holdout_dice;
    f_off += off.foundation_holdout_dice;
    lw_seed_ok += on.dice >= off.dice;
    f_seed_ok += on.foundation_holdout_dice >= off.foundation_holdout_dice;
  }
  const double n = double(c.seeds.size());
  const bool ok = lw_on > lw_off && f_on > f_off;
  return {ok, "lightweight " + fmt(lw_on / n) + " vs " + fmt(lw_off / n) + " (" + std::to_string(lw_seed_ok) + "/" +
                  std::to_string(c.seeds.size()) + " seeds), foundation holdout " + fmt(f_on / n) + " vs " +
                  fmt(f_off / n) + " (" + std::to_string(f_seed_ok) + "/" + std::to_string(c.seeds.size()) +
                  " seeds)"};
}

// ---------------------------------------------------------------- 9

Outcome sensitivity(Runs& runs) {
  const auto& c = runs.cfg();
  const double lambda = c.exp.fed.lambda, rate = c.exp.fed.selection_rate;
  const double ref = runs.mean_dice(true, true, 1.0, lambda);
  bool rates_ok = true;
  std::string detail = "rate 1.0 " + fmt(ref);
  for (double r : {0.2, 0.5, 0.8}) {
    const double m = runs.mean_dice(true, true, r, lambda);
    rates_ok = rates_ok && m >= ref - 0.01;
    detail += ", " + fmt(r, 1) + " " + fmt(m);
  }
  double lo = 1, hi = 0;
  detail += "; lambda";
  for (double l : {0.1, 0.3, 0.5, 0.7, 0.9}) {
    const double m = runs.mean_dice(true, true, rate, l);
    lo = std::min(lo, m);
    hi = std::max(hi, m);
    detail += " " + fmt(l, 1) + ":" + fmt(m);
  }
  // Determinism of one sweep point, recomputed from scratch.
  ExperimentConfig e = c.exp;
  e.fed.lambda = 0.1;
  const bool det = run_summary(e, c.seeds.front()).dice == runs.get(true, true, rate, 0.1, c.seeds.front()).dice;
  const double spread = hi - lo;
  detail += ", spread " + fmt(spread) + (spread <= 0.05 ? " (<= 0.05)" : " (soft bound 0.05 exceeded)") +
            ", rerun " + (det ? "identical" : "DIFFERS");
  return {rates_ok && det, detail};
}

// ---------------------------------------------------------------- 10

Outcome generator_fidelity(const RunnerConfig& base) {
  int bad = 0, checks = 0;
  double worst_self = 0;
  for (auto seed : base.seeds) {
    ExperimentConfig e = base.exp;
    e.seed = seed;
    const auto g = run_gen_data(e);
    for (std::size_t i = 0; i < g.fidelity.size(); ++i)
      for (std::size_t j = 0; j < g.fidelity[i].size(); ++j) {
        if (i == j) continue;
        ++checks;
        bad += !(g.fidelity[i][i] < g.fidelity[i][j]);
      }
    // Self-distance of each client's generated set.
    const std::size_t n = e.fed.n_generated_per_client;
    for (std::size_t k = 0; k < g.fidelity.size(); ++k) {
      std::vector<Tensor> imgs;
      for (std::size_t i = 0; i < n; ++i) imgs.push_back(g.d_tilde[k * n + i].image);
      worst_self = std::max(worst_self, std::abs(frechet_pixel_distance(imgs, imgs)));
    }
  }
  return {bad == 0 && worst_self < 1e-9, std::to_string(checks - bad) + "/" + std::to_string(checks) +
                                             " own < other comparisons, max self-distance " +
                                             sci(worst_self)};
}

// ---------------------------------------------------------------- 11

std::string slurp(const fs::path& p) {
  std::ifstream f(p, std::ios::binary);
  std::stringstream ss;
  ss << f.rdbuf();
  return ss.str();
}

int shell(const std::string& cmd) {
  const int st = std::system(cmd.c_str());
  return WIFEXITED(st) ? WEXITSTATUS(st) : -1;
}

Outcome determinism(const std::string& cli, const std::string& config, const fs::path& work) {
  const std::string common = cli + " run --config " + config + " --set runner.seeds=0";
  const auto a = work / "det_a", b = work / "det_b", c = work / "det_jobs4";
  for (const auto& d : {a, b, c}) fs::remove_all(d);
  if (shell(common + " --out " + a.string() + " > /dev/null") != 0 ||
      shell(common + " --out " + b.string() + " > /dev/null") != 0 ||
      shell(common + " --jobs 4 --out " + c.string() + " > /dev/null") != 0) {
    return {false, "dsfed run failed"};
  }
  bool same = true, jobs_same = true;
  for (const char* f : {"report.json", "ledger.csv"}) same = same && slurp(a / f) == slurp(b / f);
  for (const char* f : {"report.json", "ledger.csv", "rounds.csv", "manifest.json"})
    jobs_same = jobs_same && slurp(a / f) == slurp(c / f);
  const bool nonempty = !slurp(a / "report.json").empty();
  return {same && jobs_same && nonempty, std::string("repeat ") + (same ? "byte-identical" : "DIFFERS") +
                                             ", --jobs 4 vs 1 " + (jobs_same ? "byte-identical" : "DIFFERS")};
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"dsfed acceptance harness"};
  std::string cli = "dsfed", config, work = "acceptance_work";
  app.add_option("--cli", cli, "path to the dsfed binary");
  app.add_option("--config", config, "experiment config for the directional criteria")->required();
  app.add_option("--work", work, "scratch directory");
  CLI11_PARSE(app, argc, argv);

  fs::create_directories(work);
  g_log.open(fs::path(work) / "acceptance.txt");
  RunnerConfig base;
  try {
    base = load_config(config);
    base.validate();
  } catch (const std::exception& e) {
    std::fprintf(stderr, "config error: %s\n", e.what());
    return 2;
  }

  int failed = 0;
  auto record = [&failed](int id, const std::string& name, const Outcome& o) {
    report(id, name, o);
    failed += !o.pass;
  };
  auto guarded = [&](int id, const std::string& name, auto fn) {
    try {
      record(id, name, fn());
    } catch (const std::exception& e) {
      record(id, name, {false, std::string("exception: ") + e.what()});
    }
  };

  guarded(1, "gradient correctness", gradient_correctness);
  guarded(2, "fedavg exactness", fedavg_exactness);
  guarded(3, "kl/score algebra", kl_and_score_algebra);
  guarded(4, "metric algebra", metric_algebra);
  guarded(5, "communication", [&] { return communication(base); });

  Runs runs(base);
  double ablation_secs = 0;
  guarded(6, "compute reduction", [&] { return compute_reduction(runs, ablation_secs); });
  guarded(7, "ablation direction", [&] { return ablation_direction(runs); });
  guarded(8, "mutual enhancement", [&] { return mutual_enhancement(runs); });
  guarded(9, "sensitivity", [&] { return sensitivity(runs); });
  guarded(10, "generator fidelity", [&] { return generator_fidelity(base); });
  guarded(11, "determinism", [&] { return determinism(cli, config, work); });

  std::printf("%d of 11 criteria failed\n", failed);
  if (g_log) g_log << failed << " of 11 criteria failed\n";
  return failed == 0 ? 0 : 1;
}
