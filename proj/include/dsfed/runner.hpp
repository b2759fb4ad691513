#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "dsfed/config.hpp"

namespace dsfed {

/// The numbers an ablation or sweep cell keeps from one experiment.
struct ExperimentSummary {
  std::uint64_t seed = 0;
  double dice = 0, iou = 0;
  double foundation_test_dice = 0, foundation_holdout_dice = 0;
  StepCounts steps;
};

ExperimentSummary summarize(const ExperimentReport& rep, std::uint64_t seed);
ExperimentSummary run_summary(ExperimentConfig cfg, std::uint64_t seed, std::size_t jobs = 1);

struct AblationCell {
  bool mutual_kd = false, lg_selection = false;
  std::vector<ExperimentSummary> runs;  // one per seed
  double mean_dice() const;
  double mean_iou() const;
  double mean_foundation_holdout_dice() const;
  std::size_t distill_evals() const;       // summed over seeds
  std::size_t distill_grad_steps() const;  // summed over seeds
};

/// Cells in the order (off,off), (off,on), (on,off), (on,on) for
/// (mutual_kd, lg_selection); every cell shares the seed list.
std::vector<AblationCell> run_ablation(const RunnerConfig& cfg, std::size_t jobs = 1);

/// Distillation evaluations of a cell relative to the full-pool cell
/// (mutual on, selection off) under the same budget.
double ablation_step_ratio(const std::vector<AblationCell>& cells, std::size_t i);

struct SweepRow {
  std::string param;
  double value = 0;
  ExperimentSummary run;
};

std::vector<SweepRow> run_sweep(const RunnerConfig& cfg, std::size_t jobs = 1);

/// Asynchronous phase on its own: every client of the federation fits a
/// generator and the server materialises the generated set.
struct GenDataResult {
  std::vector<GeneratorParams> generators;
  std::vector<GeneratedSample> d_tilde;
  std::vector<std::vector<double>> fidelity;  // [generated client][real client]
  std::vector<std::uint8_t> dtilde_bytes;
};

GenDataResult run_gen_data(const ExperimentConfig& cfg);

}  // namespace dsfed
