#pragma once

#include <string>
#include <vector>

#include "json.hpp"

#include "dsfed/runner.hpp"

namespace dsfed {

inline constexpr const char* kArtifactVersion = "1.0.0";

// Column sets are fixed per file; `dsfed --help` prints them.
inline constexpr const char* kRoundsColumns =
    "fold,held_out,round,train_loss_mean,dice,iou,foundation_test_dice,foundation_holdout_dice,"
    "pool_size,selected,mean_score,mean_l_gt,mean_l_kl,steps_local,steps_server,steps_distill,"
    "distill_grad_steps,scoring_forwards,bytes_cum";
inline constexpr const char* kLedgerColumns = "fold,round,direction,payload,client,bytes";
inline constexpr const char* kAblationColumnsPrefix = "mutual_kd,lg_selection,mean_dice,mean_iou";
inline constexpr const char* kAblationColumnsSuffix =
    "mean_foundation_holdout_dice,distill_evals,distill_grad_steps,step_ratio";
inline constexpr const char* kSweepColumns =
    "param,value,seed,dice,iou,foundation_holdout_dice,distill_steps";

nlohmann::json manifest_json(const RunnerConfig& cfg, const std::string& command,
                             const std::vector<std::string>& outputs);
nlohmann::json report_json(const ExperimentReport& rep, const ExperimentConfig& cfg);

std::string rounds_csv(const ExperimentReport& rep);
std::string ledger_csv(const CommLedger& ledger);
std::string ablation_csv(const std::vector<AblationCell>& cells);
std::string sweep_csv(const std::vector<SweepRow>& rows);
nlohmann::json gen_data_json(const GenDataResult& res, const ExperimentConfig& cfg);

/// Shortest decimal that round-trips.
std::string fmt_num(double v);

void write_text_file(const std::string& path, const std::string& text);

}  // namespace dsfed
