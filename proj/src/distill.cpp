#include "dsfed/distill.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <stdexcept>

#include "dsfed/rng.hpp"

namespace dsfed {

std::string to_string(SelectionMode m) { return m == SelectionMode::TopK ? "topk" : "softmax"; }
std::string to_string(ScoreNorm n) { return n == ScoreNorm::MinMax ? "minmax" : "raw"; }

SelectionMode selection_mode_from_string(const std::string& s) {
  if (s == "topk") return SelectionMode::TopK;
  if (s == "softmax") return SelectionMode::SoftmaxSample;
  throw std::invalid_argument("unknown selection mode '" + s + "' (expected topk or softmax)");
}

ScoreNorm score_norm_from_string(const std::string& s) {
  if (s == "minmax") return ScoreNorm::MinMax;
  if (s == "raw") return ScoreNorm::Raw;
  throw std::invalid_argument("unknown score normalisation '" + s + "' (expected minmax or raw)");
}

double symmetric_kl(const Tensor& p, const Tensor& q) {
  if (p.shape() != q.shape()) {
    throw ShapeError("symmetric_kl: shape mismatch " + shape_str(p.shape()) + " vs " + shape_str(q.shape()));
  }
  auto dp = p.data(), dq = q.data();
  double acc = 0;
  for (std::size_t i = 0; i < dp.size(); ++i) {
    const double a = std::clamp(dp[i], kProbFloor, 1.0 - kProbFloor);
    const double b = std::clamp(dq[i], kProbFloor, 1.0 - kProbFloor);
    // KL(a||b) + KL(b||a) = (a - b) * (logit a - logit b); the form is
    // symmetric under swapping a and b bit for bit.
    const double la = std::log(a) - std::log1p(-a);
    const double lb = std::log(b) - std::log1p(-b);
    acc += (a - b) * (la - lb);
  }
  return acc / static_cast<double>(dp.size());
}

Tensor symmetric_kl_loss(const Tensor& p, const Tensor& q) {
  if (p.shape() != q.shape()) {
    throw ShapeError("symmetric_kl_loss: shape mismatch " + shape_str(p.shape()) + " vs " + shape_str(q.shape()));
  }
  Tensor a = clamp(p, kProbFloor, 1.0 - kProbFloor);
  Tensor b = clamp(q, kProbFloor, 1.0 - kProbFloor);
  Tensor la = log(a) - log(rsub_scalar(1.0, a));
  Tensor lb = log(b) - log(rsub_scalar(1.0, b));
  return mean((a - b) * (la - lb));
}

std::vector<double> learnability_scores(std::span<const double> l_gt, std::span<const double> l_kl, double lambda,
                                        ScoreNorm norm) {
  if (!(lambda >= 0.0 && lambda <= 1.0)) throw std::invalid_argument("learnability_scores: lambda must lie in [0,1]");
  if (l_gt.size() != l_kl.size()) throw std::invalid_argument("learnability_scores: length mismatch");
  auto normalise = [norm](std::span<const double> v) {
    std::vector<double> out(v.begin(), v.end());
    if (norm == ScoreNorm::Raw || out.empty()) return out;
    const auto [lo, hi] = std::minmax_element(out.begin(), out.end());
    const double mn = *lo, range = *hi - *lo;
    for (auto& x : out) x = range > 0 ? (x - mn) / range : 0.0;
    return out;
  };
  const auto gt = normalise(l_gt);
  const auto kl = normalise(l_kl);
  std::vector<double> s(gt.size());
  for (std::size_t i = 0; i < s.size(); ++i) s[i] = lambda * (-gt[i]) + (1.0 - lambda) * kl[i];
  return s;
}

std::vector<ScoredSample> score_samples(std::span<const GeneratedSample> d_tilde, const ModelParams& foundation,
                                        const ModelParams& lightweight, double lambda, ScoreNorm norm, int round) {
  if (d_tilde.empty()) throw std::invalid_argument("score_samples: empty generated set");
  if (!(lambda >= 0.0 && lambda <= 1.0)) throw std::invalid_argument("score_samples: lambda must lie in [0,1]");
  const Tensor fp = Tensor::from({foundation.values.size()}, foundation.values);
  const Tensor lp = Tensor::from({lightweight.values.size()}, lightweight.values);
  std::vector<double> gt(d_tilde.size()), kl(d_tilde.size());
  for (std::size_t i = 0; i < d_tilde.size(); ++i) {
    const Tensor pf = forward(foundation.spec, fp, d_tilde[i].image);
    const Tensor pl = forward(lightweight.spec, lp, d_tilde[i].image);
    gt[i] = supervised_loss(pf, d_tilde[i].mask).item();
    kl[i] = symmetric_kl(pf, pl);
  }
  const auto s = learnability_scores(gt, kl, lambda, norm);
  std::vector<ScoredSample> out(d_tilde.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = {i, gt[i], kl[i], s[i], round};
  return out;
}

std::size_t selection_count(double rate, std::size_t n) {
  if (!(rate > 0.0 && rate <= 1.0)) throw std::invalid_argument("selection rate must lie in (0,1]");
  const auto k = static_cast<std::size_t>(std::llround(rate * static_cast<double>(n)));
  return std::clamp<std::size_t>(k, 1, n);
}

SamplePool full_pool(std::size_t n) {
  SamplePool p;
  p.n_total = n;
  p.selected.resize(n);
  std::iota(p.selected.begin(), p.selected.end(), 0);
  return p;
}

SamplePool refresh_pool(const SamplePool& pool, std::span<const ScoredSample> scores, std::uint64_t seed) {
  const std::size_t n = pool.n_total;
  if (scores.size() != n) throw std::invalid_argument("refresh_pool: scores must cover the whole generated set");
  std::vector<double> s(n);
  for (const auto& sc : scores) {
    if (sc.index >= n) throw std::invalid_argument("refresh_pool: score index out of range");
    s[sc.index] = sc.score;
  }
  SamplePool out = pool;
  const std::size_t k = selection_count(pool.selection_rate, n);
  out.selected.clear();
  if (k == n) {
    out.selected = full_pool(n).selected;
    return out;
  }
  if (pool.mode == SelectionMode::TopK) {
    std::vector<std::size_t> order(n);
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(), [&s](std::size_t a, std::size_t b) { return s[a] > s[b]; });
    out.selected.assign(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(k));
  } else {
    // Successive weighted draws; weights exp(s - max) so a common shift cancels.
    const double mx = *std::max_element(s.begin(), s.end());
    std::vector<double> w(n);
    for (std::size_t i = 0; i < n; ++i) w[i] = std::exp(s[i] - mx);
    Rng rng(seed);
    std::uniform_real_distribution<double> u01(0.0, 1.0);
    std::vector<bool> taken(n, false);
    for (std::size_t draw = 0; draw < k; ++draw) {
      double total = 0;
      for (std::size_t i = 0; i < n; ++i)
        if (!taken[i]) total += w[i];
      const double target = u01(rng) * total;
      double acc = 0;
      std::size_t pick = n;
      for (std::size_t i = 0; i < n; ++i) {
        if (taken[i]) continue;
        acc += w[i];
        pick = i;
        if (acc > target) break;
      }
      taken[pick] = true;
      out.selected.push_back(pick);
    }
  }
  std::sort(out.selected.begin(), out.selected.end());
  return out;
}

namespace {

// The reverse-KL term has 1/p gradients near the probability floor; one bad
// batch early on can otherwise wipe out the foundation model.
void clip_grad(Tensor& params, double max_norm) {
  if (max_norm <= 0 || !params.has_grad()) return;
  auto g = params.mutable_grad();
  double sq = 0;
  for (double v : g) sq += v * v;
  const double norm = std::sqrt(sq);
  if (norm <= max_norm) return;
  const double f = max_norm / norm;
  for (double& v : g) v *= f;
}

}  // namespace

DistillResult mutual_distill_phase(const ModelParams& foundation, const ModelParams& lightweight,
                                   std::span<const GeneratedSample> d_tilde, const SamplePool& pool,
                                   const DistillConfig& cfg, std::uint64_t seed) {
  if (pool.selected.empty()) throw std::invalid_argument("mutual_distill_phase: empty selection");
  if (cfg.batch_size == 0) throw std::invalid_argument("mutual_distill_phase: batch_size must be positive");
  for (auto i : pool.selected) {
    if (i >= d_tilde.size()) throw std::invalid_argument("mutual_distill_phase: pool index out of range");
  }
  DistillResult res{foundation, lightweight, {}};
  res.stats.pool_size = d_tilde.size();
  res.stats.selected = pool.selected.size();
  if (cfg.epochs == 0) return res;

  Tensor fparams = Tensor::from({foundation.values.size()}, foundation.values, cfg.mutual);
  Tensor lparams = Tensor::from({lightweight.values.size()}, lightweight.values, true);
  OptimizerState fopt(cfg.lr, cfg.momentum, foundation.values.size());
  OptimizerState lopt(cfg.lr, cfg.momentum, lightweight.values.size());

  Rng rng(seed);
  std::vector<std::size_t> order = pool.selected;
  for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    std::shuffle(order.begin(), order.end(), rng);
    for (std::size_t start = 0; start < order.size(); start += cfg.batch_size) {
      const std::size_t end = std::min(order.size(), start + cfg.batch_size);
      const double scale = 1.0 / static_cast<double>(end - start);
      for (std::size_t b = start; b < end; ++b) {
        const auto& smp = d_tilde[order[b]];
        Tensor pf = forward(foundation.spec, fparams, smp.image);
        Tensor pl = forward(lightweight.spec, lparams, smp.image);
        Tensor loss = symmetric_kl_loss(pf, pl) + mul_scalar(supervised_loss(pl, smp.mask), cfg.alpha);
        if (cfg.mutual) loss = loss + mul_scalar(supervised_loss(pf, smp.mask), cfg.alpha);
        mul_scalar(loss, scale).backward();
        ++res.stats.sample_evals;
      }
      clip_grad(lparams, cfg.clip_norm);
      sgd_step(lparams, lopt);
      if (cfg.mutual) {
        clip_grad(fparams, cfg.clip_norm);
        sgd_step(fparams, fopt);
      }
      ++res.stats.grad_steps;
    }
  }
  res.foundation.values = fparams.values();
  res.lightweight.values = lparams.values();
  return res;
}

double mean_pool_kl(const ModelParams& foundation, const ModelParams& lightweight,
                    std::span<const GeneratedSample> d_tilde, const SamplePool& pool) {
  if (pool.selected.empty()) throw std::invalid_argument("mean_pool_kl: empty selection");
  double acc = 0;
  for (auto i : pool.selected) {
    acc += symmetric_kl(forward(foundation, d_tilde[i].image), forward(lightweight, d_tilde[i].image));
  }
  return acc / static_cast<double>(pool.selected.size());
}

}  // namespace dsfed
