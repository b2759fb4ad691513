#include "dsfed/runner.hpp"

#include <stdexcept>

#include "dsfed/rng.hpp"

namespace dsfed {

ExperimentSummary summarize(const ExperimentReport& rep, std::uint64_t seed) {
  return {seed, rep.mean_dice, rep.mean_iou, rep.mean_foundation_test_dice, rep.mean_foundation_holdout_dice,
          rep.steps};
}

ExperimentSummary run_summary(ExperimentConfig cfg, std::uint64_t seed, std::size_t jobs) {
  cfg.seed = seed;
  return summarize(run_experiment(cfg, jobs), seed);
}

namespace {
template <class F>
double mean_of(const std::vector<ExperimentSummary>& runs, F f) {
  if (runs.empty()) return 0;
  double s = 0;
  for (const auto& r : runs) s += f(r);
  return s / static_cast<double>(runs.size());
}
}  // namespace

double AblationCell::mean_dice() const {
  return mean_of(runs, [](const auto& r) { return r.dice; });
}
double AblationCell::mean_iou() const {
  return mean_of(runs, [](const auto& r) { return r.iou; });
}
double AblationCell::mean_foundation_holdout_dice() const {
  return mean_of(runs, [](const auto& r) { return r.foundation_holdout_dice; });
}
std::size_t AblationCell::distill_evals() const {
  std::size_t n = 0;
  for (const auto& r : runs) n += r.steps.distill;
  return n;
}
std::size_t AblationCell::distill_grad_steps() const {
  std::size_t n = 0;
  for (const auto& r : runs) n += r.steps.distill_grad_steps;
  return n;
}

std::vector<AblationCell> run_ablation(const RunnerConfig& cfg, std::size_t jobs) {
  cfg.validate();
  std::vector<AblationCell> cells;
  for (bool mutual : {false, true})
    for (bool lg : {false, true}) {
      AblationCell cell{mutual, lg, {}};
      ExperimentConfig e = cfg.exp;
      e.fed.mutual_kd = mutual;
      e.fed.lg_selection = lg;
      for (auto seed : cfg.seeds) cell.runs.push_back(run_summary(e, seed, jobs));
      cells.push_back(std::move(cell));
    }
  return cells;
}

double ablation_step_ratio(const std::vector<AblationCell>& cells, std::size_t i) {
  const AblationCell* ref = nullptr;
  for (const auto& c : cells)
    if (c.mutual_kd && !c.lg_selection) ref = &c;
  if (ref == nullptr) throw std::invalid_argument("ablation_step_ratio: no full-pool reference cell");
  const auto denom = ref->distill_evals();
  return denom == 0 ? 0.0 : static_cast<double>(cells.at(i).distill_evals()) / static_cast<double>(denom);
}

std::vector<SweepRow> run_sweep(const RunnerConfig& cfg, std::size_t jobs) {
  cfg.validate();
  std::vector<SweepRow> rows;
  for (double v : cfg.sweep_values) {
    ExperimentConfig e = cfg.exp;
    if (cfg.sweep_param == "lambda") {
      e.fed.lambda = v;
    } else {
      e.fed.selection_rate = v;
    }
    for (auto seed : cfg.seeds) rows.push_back({cfg.sweep_param, v, run_summary(e, seed, jobs)});
  }
  return rows;
}

GenDataResult run_gen_data(const ExperimentConfig& cfg) {
  cfg.validate();
  // The fidelity report fits a 3-d Gaussian per set.
  if (cfg.fed.n_generated_per_client < 10 || cfg.data.samples_per_client < 10) {
    throw ConfigError("gen-data: federation.n_generated_per_client and data.samples_per_client must be >= 10");
  }
  FederationSpec data = cfg.data;
  data.seed = cfg.seed;
  const auto federation = make_federation(data);
  GenDataResult res;
  std::vector<std::vector<Tensor>> banks;
  for (const auto& c : federation) {
    res.generators.push_back(fit_generator(c));
    banks.push_back(c.mask_bank);
  }
  const std::size_t n = cfg.fed.n_generated_per_client;
  res.d_tilde = build_global_set(res.generators, banks, n, derive_seed(cfg.seed, {kTagGlobalSet}));
  res.dtilde_bytes = encode_dtilde(res.d_tilde, federation.size(), n, cfg.data.grid);

  const std::size_t k = federation.size();
  res.fidelity.assign(k, std::vector<double>(k, 0.0));
  for (std::size_t i = 0; i < k; ++i) {
    std::vector<Tensor> gen;
    for (const auto& s : res.d_tilde)
      if (s.source_client == static_cast<int>(i)) gen.push_back(s.image);
    for (std::size_t j = 0; j < k; ++j) {
      std::vector<Tensor> real;
      for (const auto& s : federation[j].samples) real.push_back(s.image);
      res.fidelity[i][j] = frechet_pixel_distance(gen, real);
    }
  }
  return res;
}

}  // namespace dsfed
