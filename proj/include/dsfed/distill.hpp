#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "dsfed/generator.hpp"
#include "dsfed/models.hpp"
#include "dsfed/tensor.hpp"

namespace dsfed {

enum class SelectionMode { TopK, SoftmaxSample };
enum class ScoreNorm { MinMax, Raw };

std::string to_string(SelectionMode m);
std::string to_string(ScoreNorm n);
SelectionMode selection_mode_from_string(const std::string& s);
ScoreNorm score_norm_from_string(const std::string& s);

struct ScoredSample {
  std::size_t index = 0;  // position in the generated set
  double l_gt = 0;
  double l_kl = 0;
  double score = 0;
  int round_scored = 0;
};

struct SamplePool {
  std::size_t n_total = 0;
  std::vector<std::size_t> selected;  // ascending
  double selection_rate = 1.0;
  SelectionMode mode = SelectionMode::TopK;
};

/// Mean over pixels of KL(Bern(p)||Bern(q)) + KL(Bern(q)||Bern(p)) after
/// clamping both maps to [kProbFloor, 1-kProbFloor].
double symmetric_kl(const Tensor& p, const Tensor& q);

/// Differentiable form of symmetric_kl. Gradients flow into whichever
/// argument requires them.
Tensor symmetric_kl_loss(const Tensor& p, const Tensor& q);

/// s_i = lambda * (-gt_i) + (1 - lambda) * kl_i, with each term min-max
/// normalised over the set first unless `norm` is Raw.
std::vector<double> learnability_scores(std::span<const double> l_gt, std::span<const double> l_kl, double lambda,
                                        ScoreNorm norm);

std::vector<ScoredSample> score_samples(std::span<const GeneratedSample> d_tilde, const ModelParams& foundation,
                                        const ModelParams& lightweight, double lambda, ScoreNorm norm = ScoreNorm::MinMax,
                                        int round = 0);

/// round(rate * n), at least 1.
std::size_t selection_count(double rate, std::size_t n);

/// TopK keeps the highest scores (ties to the lower index). SoftmaxSample
/// draws without replacement with probability proportional to exp(score).
SamplePool refresh_pool(const SamplePool& pool, std::span<const ScoredSample> scores, std::uint64_t seed);

/// A pool holding every index, as used when learnability selection is off.
SamplePool full_pool(std::size_t n);

struct DistillConfig {
  std::size_t epochs = 1;
  std::size_t batch_size = 4;
  double lr = 0.02;
  double momentum = 0.5;
  double alpha = 0.5;  // weight of the supervised anchor on both models
  bool mutual = true;
  double clip_norm = 1.0;  // per-model gradient L2 norm cap, 0 = off
};

struct DistillStats {
  std::size_t pool_size = 0;
  std::size_t selected = 0;
  double mean_score = 0;
  double mean_l_gt = 0;
  double mean_l_kl = 0;
  std::size_t grad_steps = 0;
  std::size_t sample_evals = 0;      // samples processed inside gradient steps
  std::size_t scoring_forwards = 0;  // forward passes spent on scoring
};

struct DistillResult {
  ModelParams foundation;
  ModelParams lightweight;
  DistillStats stats;
};

/// Minibatch distillation over the selected pool. Per sample the loss is
/// symmetric_kl(pF, pL) + alpha * (L_sup(pF, m) + L_sup(pL, m)). With
/// mutual=false the foundation output is a constant target and only the
/// lightweight model moves.
DistillResult mutual_distill_phase(const ModelParams& foundation, const ModelParams& lightweight,
                                   std::span<const GeneratedSample> d_tilde, const SamplePool& pool,
                                   const DistillConfig& cfg, std::uint64_t seed);

/// Mean symmetric_kl between the two models over the selected pool.
double mean_pool_kl(const ModelParams& foundation, const ModelParams& lightweight,
                    std::span<const GeneratedSample> d_tilde, const SamplePool& pool);

}  // namespace dsfed
