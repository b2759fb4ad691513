#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "dsfed/distill.hpp"
#include "dsfed/generator.hpp"
#include "dsfed/metrics.hpp"
#include "dsfed/models.hpp"
#include "dsfed/synth.hpp"

namespace dsfed {

enum class EvalProtocol { LeaveOneOut, FixedTest };
std::string to_string(EvalProtocol p);
EvalProtocol eval_protocol_from_string(const std::string& s);

struct FederationConfig {
  std::size_t n_rounds = 100;
  std::size_t local_steps = 10;
  std::size_t batch_size = 4;
  double lr_client = 0.05;
  double lr_server = 0.05;
  double lr_distill = 0.02;
  double momentum = 0.5;
  double lambda = 0.5;
  double selection_rate = 0.5;
  SelectionMode selection_mode = SelectionMode::TopK;
  ScoreNorm score_norm = ScoreNorm::MinMax;
  double distill_alpha = 0.5;
  std::size_t distill_epochs = 1;
  double distill_clip = 1.0;
  std::size_t server_steps = 2;          // per round
  std::size_t server_warmup_steps = 100;  // once, in the asynchronous phase
  // Server-side pretraining of the foundation model on a public corpus of
  // random-style renders (no client data), before any federation starts.
  std::size_t pretrain_steps = 600;
  std::size_t pretrain_samples = 128;
  std::size_t n_generated_per_client = 16;
  std::size_t n_holdout_per_client = 8;
  bool mutual_kd = true;
  bool lg_selection = true;
  EvalProtocol eval_protocol = EvalProtocol::LeaveOneOut;
  int test_client = 0;  // used by FixedTest
  double threshold = 0.5;
  bool accounting_only = false;

  bool distillation_enabled() const { return mutual_kd || lg_selection; }
};

struct ExperimentConfig {
  std::uint64_t seed = 0;
  FederationSpec data;
  ModelSpec lightweight = ModelSpec::lightweight_default();
  ModelSpec foundation = ModelSpec::foundation_default();
  FederationConfig fed;
  std::string dtilde_path;  // optional pre-built generated set

  /// Throws ConfigError listing every offending field.
  void validate() const;
};

class ConfigError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

// ---------------------------------------------------------------- ledger

enum class Direction { ClientToServer, ServerToClient };
enum class PayloadKind { LightweightParams, GeneratorParams, MaskBank };
std::string to_string(Direction d);
std::string to_string(PayloadKind k);

struct LedgerEntry {
  int fold = 0;
  int round = 0;  // 0 = asynchronous phase
  Direction direction = Direction::ClientToServer;
  PayloadKind payload = PayloadKind::LightweightParams;
  int client = 0;
  std::size_t bytes = 0;
};

/// Append-only record of every cross-party transfer.
class CommLedger {
 public:
  void append(const LedgerEntry& e) { entries_.push_back(e); }
  const std::vector<LedgerEntry>& entries() const { return entries_; }
  std::size_t total_bytes() const;
  std::size_t bytes_through(int fold, int round) const;

 private:
  std::vector<LedgerEntry> entries_;
};

/// Ledger total predicted from the config alone.
std::size_t predicted_ledger_bytes(const ExperimentConfig& cfg);
/// Bytes a foundation-transfer federation would move over the same rounds
/// (full foundation model down and up per training client per round).
std::size_t foundation_baseline_bytes(const ExperimentConfig& cfg);
std::size_t fold_count(const ExperimentConfig& cfg);

// ---------------------------------------------------------------- training

struct TrainResult {
  ModelParams params;
  std::vector<double> step_losses;  // mean minibatch loss per step
  std::size_t sample_evals = 0;
};

/// SGD on supervised_loss over (image, mask) pairs, minibatches drawn
/// uniformly with replacement from `seed`.
TrainResult train_supervised(const ModelParams& start, std::span<const Tensor> images, std::span<const Tensor> masks,
                             std::size_t steps, std::size_t batch_size, double lr, double momentum,
                             std::uint64_t seed);

TrainResult local_train(const ClientDataset& client, const ModelParams& params, std::size_t steps,
                        std::size_t batch_size, double lr, double momentum, std::uint64_t seed);

/// Dataset-size-weighted mean of client parameter vectors.
ModelParams fedavg(std::span<const ModelParams> client_params, std::span<const double> sizes);

TrainResult server_finetune_foundation(const ModelParams& foundation, std::span<const GeneratedSample> d_tilde,
                                       std::size_t steps, std::size_t batch_size, double lr, double momentum,
                                       std::uint64_t seed);

/// Public corpus for foundation pretraining: every sample has its own style
/// drawn from the federation's style ranges, from a seed stream no client uses.
std::vector<TaskSample> make_pretrain_corpus(const FederationSpec& data, std::size_t n, std::uint64_t seed);

/// init_model followed by pretraining on the public corpus (memoised per
/// process; identical for every fold, cell and sweep point of a seed).
ModelParams pretrained_foundation(const ExperimentConfig& cfg);

// ---------------------------------------------------------------- rounds

struct StepCounts {
  std::size_t local = 0;    // sample evaluations in client gradient steps
  std::size_t server = 0;   // sample evaluations in foundation fine-tuning (incl. warm-up)
  std::size_t distill = 0;  // sample evaluations in distillation gradient steps
  std::size_t distill_grad_steps = 0;
  std::size_t scoring_forwards = 0;

  StepCounts& operator+=(const StepCounts& o);
};

struct RoundReport {
  int round = 0;
  std::vector<double> client_train_loss;
  MetricResult lightweight_test;
  MetricResult foundation_test;
  MetricResult foundation_holdout;
  DistillStats distill;
  std::size_t bytes_cum = 0;
  StepCounts steps;
};

struct FoldReport {
  int held_out = 0;
  std::vector<GeneratorParams> generators;
  std::vector<RoundReport> rounds;
  StepCounts steps;
};

struct ExperimentReport {
  std::vector<FoldReport> folds;
  CommLedger ledger;
  double mean_dice = 0;  // global lightweight model on the test domain, final round
  double mean_iou = 0;
  double mean_foundation_test_dice = 0;
  double mean_foundation_holdout_dice = 0;
  StepCounts steps;
};

/// Server and client state of one cross-validation fold.
struct FoldState {
  int fold = 0;
  LeaveOneOutSplit split;
  std::vector<GeneratorParams> generators;
  std::vector<GeneratedSample> d_tilde;
  std::vector<GeneratedSample> d_holdout;
  ModelParams foundation;
  ModelParams lightweight;
  SamplePool pool;
  int round = 0;
  StepCounts warmup;
};

/// Asynchronous phase: clients fit and upload generators and mask banks, the
/// server builds the generated sets and initialises (and warms up) both models.
FoldState init_fold(const ExperimentConfig& cfg, const std::vector<ClientDataset>& federation, int held_out,
                    int fold_index, CommLedger& ledger);

/// One synchronous round: broadcast, local training, upload + FedAvg, server
/// fine-tuning, optional distillation, evaluation.
RoundReport run_round(FoldState& state, const ExperimentConfig& cfg, CommLedger& ledger, std::size_t jobs = 1);

ExperimentReport run_experiment(const ExperimentConfig& cfg, std::size_t jobs = 1);

/// Foundation model never crosses the wire; every ledger payload is one of
/// the three client-facing kinds.
bool ledger_is_lightweight_only(const CommLedger& ledger, const ExperimentConfig& cfg);

}  // namespace dsfed
