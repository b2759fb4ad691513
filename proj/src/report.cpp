#include "dsfed/report.hpp"

#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <stdexcept>

namespace dsfed {

using nlohmann::json;

std::string fmt_num(double v) {
  char buf[32];
  for (int prec = 1; prec <= 17; ++prec) {
    std::snprintf(buf, sizeof buf, "%.*g", prec, v);
    if (std::strtod(buf, nullptr) == v) break;
  }
  return buf;
}

void write_text_file(const std::string& path, const std::string& text) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("cannot write " + path);
  f << text;
  if (!f) throw std::runtime_error("write failed: " + path);
}

json manifest_json(const RunnerConfig& cfg, const std::string& command, const std::vector<std::string>& outputs) {
  json conf = json::object();
  for (const auto& [k, v] : config_entries(cfg)) conf[k] = v;
  return {{"artifact", "dsfed"},
          {"version", kArtifactVersion},
          {"command", command},
          {"seed", cfg.exp.seed},
          {"config", conf},
          {"outputs", outputs}};
}

namespace {

json metric(const MetricResult& m) { return {{"dice", m.dice}, {"iou", m.iou}, {"n", m.n_samples}}; }

json steps_json(const StepCounts& s) {
  return {{"local", s.local},
          {"server", s.server},
          {"distill", s.distill},
          {"distill_grad_steps", s.distill_grad_steps},
          {"scoring_forwards", s.scoring_forwards}};
}

json generator_json(const GeneratorParams& g) {
  return {{"source_client", g.source_client},     {"fg_mean", g.est_fg_mean},
          {"fg_std", g.est_fg_std},               {"bg_mean", g.est_bg_mean},
          {"bg_std", g.est_bg_std},               {"texture_freq", g.est_texture_freq},
          {"noise_sigma", g.est_noise_sigma},     {"fg_fraction", g.est_fg_fraction}};
}

double mean(const std::vector<double>& v) {
  if (v.empty()) return 0;
  double s = 0;
  for (double x : v) s += x;
  return s / static_cast<double>(v.size());
}

}  // namespace

json report_json(const ExperimentReport& rep, const ExperimentConfig& cfg) {
  json folds = json::array();
  for (const auto& f : rep.folds) {
    json rounds = json::array();
    for (const auto& r : f.rounds) {
      rounds.push_back({{"round", r.round},
                        {"client_train_loss", r.client_train_loss},
                        {"lightweight_test", metric(r.lightweight_test)},
                        {"foundation_test", metric(r.foundation_test)},
                        {"foundation_holdout", metric(r.foundation_holdout)},
                        {"distill",
                         {{"pool_size", r.distill.pool_size},
                          {"selected", r.distill.selected},
                          {"mean_score", r.distill.mean_score},
                          {"mean_l_gt", r.distill.mean_l_gt},
                          {"mean_l_kl", r.distill.mean_l_kl}}},
                        {"bytes_cum", r.bytes_cum},
                        {"steps", steps_json(r.steps)}});
    }
    json gens = json::array();
    for (const auto& g : f.generators) gens.push_back(generator_json(g));
    json final_round = f.rounds.empty() ? json() : json{{"dice", f.rounds.back().lightweight_test.dice},
                                                        {"iou", f.rounds.back().lightweight_test.iou}};
    folds.push_back({{"held_out", f.held_out},
                     {"final", final_round},
                     {"generators", gens},
                     {"steps", steps_json(f.steps)},
                     {"rounds", rounds}});
  }
  return {{"summary",
           {{"mean_dice", rep.mean_dice},
            {"mean_iou", rep.mean_iou},
            {"mean_foundation_test_dice", rep.mean_foundation_test_dice},
            {"mean_foundation_holdout_dice", rep.mean_foundation_holdout_dice},
            {"n_folds", rep.folds.size()}}},
          {"communication",
           {{"ledger_bytes", rep.ledger.total_bytes()},
            {"predicted_bytes", predicted_ledger_bytes(cfg)},
            {"foundation_baseline_bytes", foundation_baseline_bytes(cfg)},
            {"ratio_to_foundation_baseline", static_cast<double>(rep.ledger.total_bytes()) /
                                                  static_cast<double>(foundation_baseline_bytes(cfg))},
            {"lightweight_params", cfg.lightweight.param_count()},
            {"foundation_params", cfg.foundation.param_count()}}},
          {"steps", steps_json(rep.steps)},
          {"folds", folds}};
}

std::string rounds_csv(const ExperimentReport& rep) {
  std::string s = std::string(kRoundsColumns) + "\n";
  for (std::size_t fi = 0; fi < rep.folds.size(); ++fi) {
    const auto& f = rep.folds[fi];
    for (const auto& r : f.rounds) {
      s += std::to_string(fi) + "," + std::to_string(f.held_out) + "," + std::to_string(r.round) + "," +
           fmt_num(mean(r.client_train_loss)) + "," + fmt_num(r.lightweight_test.dice) + "," +
           fmt_num(r.lightweight_test.iou) + "," + fmt_num(r.foundation_test.dice) + "," +
           fmt_num(r.foundation_holdout.dice) + "," + std::to_string(r.distill.pool_size) + "," +
           std::to_string(r.distill.selected) + "," + fmt_num(r.distill.mean_score) + "," +
           fmt_num(r.distill.mean_l_gt) + "," + fmt_num(r.distill.mean_l_kl) + "," + std::to_string(r.steps.local) +
           "," + std::to_string(r.steps.server) + "," + std::to_string(r.steps.distill) + "," +
           std::to_string(r.steps.distill_grad_steps) + "," + std::to_string(r.steps.scoring_forwards) + "," +
           std::to_string(r.bytes_cum) + "\n";
    }
  }
  return s;
}

std::string ledger_csv(const CommLedger& ledger) {
  std::string s = std::string(kLedgerColumns) + "\n";
  for (const auto& e : ledger.entries()) {
    s += std::to_string(e.fold) + "," + std::to_string(e.round) + "," + to_string(e.direction) + "," +
         to_string(e.payload) + "," + std::to_string(e.client) + "," + std::to_string(e.bytes) + "\n";
  }
  return s;
}

std::string ablation_csv(const std::vector<AblationCell>& cells) {
  std::string s = kAblationColumnsPrefix;
  if (!cells.empty())
    for (const auto& r : cells.front().runs) s += ",dice_seed" + std::to_string(r.seed);
  s += std::string(",") + kAblationColumnsSuffix + "\n";
  for (std::size_t i = 0; i < cells.size(); ++i) {
    const auto& c = cells[i];
    s += std::string(c.mutual_kd ? "on" : "off") + "," + (c.lg_selection ? "on" : "off") + "," +
         fmt_num(c.mean_dice()) + "," + fmt_num(c.mean_iou());
    for (const auto& r : c.runs) s += "," + fmt_num(r.dice);
    s += "," + fmt_num(c.mean_foundation_holdout_dice()) + "," + std::to_string(c.distill_evals()) + "," +
         std::to_string(c.distill_grad_steps()) + "," + fmt_num(ablation_step_ratio(cells, i)) + "\n";
  }
  return s;
}

std::string sweep_csv(const std::vector<SweepRow>& rows) {
  std::string s = std::string(kSweepColumns) + "\n";
  for (const auto& r : rows) {
    s += r.param + "," + fmt_num(r.value) + "," + std::to_string(r.run.seed) + "," + fmt_num(r.run.dice) + "," +
         fmt_num(r.run.iou) + "," + fmt_num(r.run.foundation_holdout_dice) + "," + std::to_string(r.run.steps.distill) +
         "\n";
  }
  return s;
}

json gen_data_json(const GenDataResult& res, const ExperimentConfig& cfg) {
  json gens = json::array();
  for (const auto& g : res.generators) gens.push_back(generator_json(g));
  const std::size_t k = res.fidelity.size();
  bool diag_ok = true;
  for (std::size_t i = 0; i < k; ++i)
    for (std::size_t j = 0; j < k; ++j)
      if (i != j && !(res.fidelity[i][i] < res.fidelity[i][j])) diag_ok = false;
  return {{"n_clients", k},
          {"n_per_client", cfg.fed.n_generated_per_client},
          {"grid", cfg.data.grid},
          {"d_tilde_size", res.d_tilde.size()},
          {"dtilde_bytes", res.dtilde_bytes.size()},
          {"generators", gens},
          {"fidelity", res.fidelity},
          {"own_client_closest", diag_ok}};
}

}  // namespace dsfed
