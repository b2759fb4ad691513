#include "dsfed/federation.hpp"

#include <algorithm>
#include <atomic>
#include <cstring>
#include <map>
#include <mutex>
#include <numeric>
#include <sstream>
#include <thread>

#include "dsfed/bytes.hpp"
#include "dsfed/rng.hpp"

namespace dsfed {

std::string to_string(EvalProtocol p) { return p == EvalProtocol::LeaveOneOut ? "leave_one_out" : "fixed_test"; }

EvalProtocol eval_protocol_from_string(const std::string& s) {
  if (s == "leave_one_out") return EvalProtocol::LeaveOneOut;
  if (s == "fixed_test") return EvalProtocol::FixedTest;
  throw std::invalid_argument("unknown eval protocol '" + s + "' (expected leave_one_out or fixed_test)");
}

std::string to_string(Direction d) { return d == Direction::ClientToServer ? "client_to_server" : "server_to_client"; }

std::string to_string(PayloadKind k) {
  switch (k) {
    case PayloadKind::LightweightParams: return "lightweight_params";
    case PayloadKind::GeneratorParams: return "generator_params";
    case PayloadKind::MaskBank: return "mask_bank";
  }
  return "?";
}

void ExperimentConfig::validate() const {
  std::vector<std::string> errs;
  auto check = [&errs](bool ok, const std::string& msg) {
    if (!ok) errs.push_back(msg);
  };
  auto num = [](double v) {
    std::ostringstream os;
    os << v;
    return os.str();
  };
  check(fed.lambda >= 0.0 && fed.lambda <= 1.0, "federation.lambda: must lie in [0,1], got " + num(fed.lambda));
  check(fed.selection_rate > 0.0 && fed.selection_rate <= 1.0,
        "federation.selection_rate: must lie in (0,1], got " + num(fed.selection_rate));
  check(fed.n_rounds >= 1, "federation.n_rounds: must be >= 1");
  check(fed.batch_size >= 1, "federation.batch_size: must be >= 1");
  check(fed.lr_client > 0, "federation.lr_client: must be positive");
  check(fed.lr_server > 0, "federation.lr_server: must be positive");
  check(fed.lr_distill > 0, "federation.lr_distill: must be positive");
  check(fed.momentum >= 0 && fed.momentum < 1, "federation.momentum: must lie in [0,1)");
  check(fed.distill_alpha >= 0, "federation.distill_alpha: must be non-negative");
  check(fed.distill_clip >= 0, "federation.distill_clip: must be non-negative");
  check(fed.n_generated_per_client >= 1, "federation.n_generated_per_client: must be >= 1");
  check(fed.n_holdout_per_client >= 1, "federation.n_holdout_per_client: must be >= 1");
  check(fed.threshold > 0 && fed.threshold < 1, "federation.threshold: must lie in (0,1)");
  check(data.n_clients >= 2, "data.n_clients: must be >= 2");
  check(data.samples_per_client >= kMinFitSamples, "data.samples_per_client: must be >= 5");
  check(data.grid >= 16, "data.grid: must be >= 16");
  check(fed.eval_protocol != EvalProtocol::FixedTest ||
            (fed.test_client >= 0 && static_cast<std::size_t>(fed.test_client) < data.n_clients),
        "federation.test_client: must name an existing client");
  try {
    data.styles.validate();
  } catch (const std::exception& e) {
    errs.push_back(std::string("data.style: ") + e.what());
  }
  for (const auto* spec : {&lightweight, &foundation}) {
    const std::string key = spec == &lightweight ? "model.lightweight" : "model.foundation";
    try {
      spec->validate();
    } catch (const std::exception& e) {
      errs.push_back(key + ": " + e.what());
    }
    check(spec->input_size == data.grid, key + ".input_size: must equal data.grid");
  }
  if (!errs.empty()) {
    std::string msg;
    for (const auto& e : errs) msg += e + "\n";
    msg.pop_back();
    throw ConfigError(msg);
  }
}

// ---------------------------------------------------------------- ledger

std::size_t CommLedger::total_bytes() const {
  std::size_t n = 0;
  for (const auto& e : entries_) n += e.bytes;
  return n;
}

std::size_t CommLedger::bytes_through(int fold, int round) const {
  std::size_t n = 0;
  for (const auto& e : entries_)
    if (e.fold == fold && e.round <= round) n += e.bytes;
  return n;
}

std::size_t fold_count(const ExperimentConfig& cfg) {
  return cfg.fed.eval_protocol == EvalProtocol::LeaveOneOut ? cfg.data.n_clients : 1;
}

std::size_t predicted_ledger_bytes(const ExperimentConfig& cfg) {
  const std::size_t k_train = cfg.data.n_clients - 1;
  const std::size_t per_client_async =
      kGeneratorParamsBytes + mask_bank_bytes(cfg.data.samples_per_client, cfg.data.grid);
  const std::size_t per_client_round = 2 * serialized_params_bytes(cfg.lightweight.param_count());
  return fold_count(cfg) * k_train * (per_client_async + cfg.fed.n_rounds * per_client_round);
}

std::size_t foundation_baseline_bytes(const ExperimentConfig& cfg) {
  const std::size_t k_train = cfg.data.n_clients - 1;
  return fold_count(cfg) * k_train * cfg.fed.n_rounds * 2 * serialized_params_bytes(cfg.foundation.param_count());
}

bool ledger_is_lightweight_only(const CommLedger& ledger, const ExperimentConfig& cfg) {
  const std::size_t lw = serialized_params_bytes(cfg.lightweight.param_count());
  const std::size_t gen = kGeneratorParamsBytes;
  const std::size_t bank = mask_bank_bytes(cfg.data.samples_per_client, cfg.data.grid);
  for (const auto& e : ledger.entries()) {
    switch (e.payload) {
      case PayloadKind::LightweightParams:
        if (e.bytes != lw) return false;
        break;
      case PayloadKind::GeneratorParams:
        if (e.bytes != gen || e.direction != Direction::ClientToServer) return false;
        break;
      case PayloadKind::MaskBank:
        if (e.bytes != bank || e.direction != Direction::ClientToServer) return false;
        break;
    }
  }
  return true;
}

// ---------------------------------------------------------------- training

StepCounts& StepCounts::operator+=(const StepCounts& o) {
  local += o.local;
  server += o.server;
  distill += o.distill;
  distill_grad_steps += o.distill_grad_steps;
  scoring_forwards += o.scoring_forwards;
  return *this;
}

TrainResult train_supervised(const ModelParams& start, std::span<const Tensor> images, std::span<const Tensor> masks,
                             std::size_t steps, std::size_t batch_size, double lr, double momentum,
                             std::uint64_t seed) {
  if (images.empty()) throw std::invalid_argument("train_supervised: empty dataset");
  if (images.size() != masks.size()) throw std::invalid_argument("train_supervised: image/mask count mismatch");
  if (batch_size == 0) throw std::invalid_argument("train_supervised: batch_size must be positive");
  TrainResult res{start, {}, 0};
  if (steps == 0) return res;
  Tensor params = Tensor::from({start.values.size()}, start.values, true);
  OptimizerState opt(lr, momentum, start.values.size());
  Rng rng(seed);
  std::uniform_int_distribution<std::size_t> pick(0, images.size() - 1);
  const double scale = 1.0 / static_cast<double>(batch_size);
  for (std::size_t step = 0; step < steps; ++step) {
    double batch_loss = 0;
    for (std::size_t b = 0; b < batch_size; ++b) {
      const std::size_t i = pick(rng);
      Tensor loss = supervised_loss(forward(start.spec, params, images[i]), masks[i]);
      batch_loss += loss.item();
      mul_scalar(loss, scale).backward();
      ++res.sample_evals;
    }
    sgd_step(params, opt);
    res.step_losses.push_back(batch_loss * scale);
  }
  res.params.values = params.values();
  return res;
}

TrainResult local_train(const ClientDataset& client, const ModelParams& params, std::size_t steps,
                        std::size_t batch_size, double lr, double momentum, std::uint64_t seed) {
  if (client.samples.empty()) {
    throw std::invalid_argument("local_train: client " + std::to_string(client.domain_id) + " has no data");
  }
  std::vector<Tensor> images, masks;
  for (const auto& s : client.samples) {
    images.push_back(s.image);
    masks.push_back(s.mask);
  }
  return train_supervised(params, images, masks, steps, batch_size, lr, momentum, seed);
}

ModelParams fedavg(std::span<const ModelParams> client_params, std::span<const double> sizes) {
  if (client_params.empty()) throw std::invalid_argument("fedavg: no client parameters");
  if (client_params.size() != sizes.size()) throw std::invalid_argument("fedavg: one size per client required");
  const ModelSpec& spec = client_params.front().spec;
  double n = 0;
  for (std::size_t k = 0; k < sizes.size(); ++k) {
    if (!(sizes[k] > 0)) throw std::invalid_argument("fedavg: client dataset sizes must be positive");
    if (!(client_params[k].spec == spec) || client_params[k].values.size() != spec.param_count()) {
      throw std::invalid_argument("fedavg: client " + std::to_string(k) + " has a different model spec");
    }
    n += sizes[k];
  }
  ModelParams out{spec, std::vector<double>(spec.param_count(), 0.0)};
  if (client_params.size() == 1) {
    out.values = client_params.front().values;
    return out;
  }
  // Sum in a canonical client order (by size, then parameters) so that
  // reordering the clients cannot change a single bit, and accumulate
  // offsets from the first of them so identical inputs come back unchanged.
  std::vector<std::size_t> order(client_params.size());
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    if (sizes[a] != sizes[b]) return sizes[a] < sizes[b];
    return client_params[a].values < client_params[b].values;
  });
  const auto& base = client_params[order.front()].values;
  for (std::size_t i = 0; i < base.size(); ++i) {
    double acc = 0;
    for (auto k : order) acc += (sizes[k] / n) * (client_params[k].values[i] - base[i]);
    out.values[i] = base[i] + acc;
  }
  return out;
}

TrainResult server_finetune_foundation(const ModelParams& foundation, std::span<const GeneratedSample> d_tilde,
                                       std::size_t steps, std::size_t batch_size, double lr, double momentum,
                                       std::uint64_t seed) {
  if (d_tilde.empty()) throw std::invalid_argument("server_finetune_foundation: empty generated set");
  std::vector<Tensor> images, masks;
  for (const auto& s : d_tilde) {
    images.push_back(s.image);
    masks.push_back(s.mask);
  }
  return train_supervised(foundation, images, masks, steps, batch_size, lr, momentum, seed);
}

// ---------------------------------------------------------------- rounds

namespace {

// Runs fn(i) for i in [0, n) on up to `jobs` threads. Results must be written
// to per-index slots so the outcome is independent of scheduling.
template <class Fn>
void parallel_for(std::size_t n, std::size_t jobs, Fn fn) {
  if (jobs <= 1 || n <= 1) {
    for (std::size_t i = 0; i < n; ++i) fn(i);
    return;
  }
  std::atomic<std::size_t> next{0};
  std::vector<std::exception_ptr> errors(n);
  std::vector<std::thread> pool;
  for (std::size_t t = 0; t < std::min(jobs, n); ++t) {
    pool.emplace_back([&] {
      for (std::size_t i = next++; i < n; i = next++) {
        try {
          fn(i);
        } catch (...) {
          errors[i] = std::current_exception();
        }
      }
    });
  }
  for (auto& th : pool) th.join();
  for (auto& e : errors)
    if (e) std::rethrow_exception(e);
}

MetricResult evaluate_generated(const ModelParams& model, std::span<const GeneratedSample> set, double threshold) {
  std::vector<Tensor> images, masks;
  for (const auto& s : set) {
    images.push_back(s.image);
    masks.push_back(s.mask);
  }
  return evaluate_pairs(model, images, masks, threshold);
}

std::uint64_t fnv1a(std::uint64_t h, const void* p, std::size_t n) {
  const auto* b = static_cast<const unsigned char*>(p);
  for (std::size_t i = 0; i < n; ++i) h = (h ^ b[i]) * 0x100000001b3ULL;
  return h;
}

// Server-side training runs are pure functions of (start params, data,
// budget, seed) and repeat across ablation cells and sweep points sharing a
// seed, so they are memoised per process.
TrainResult cached_train(const ModelParams& start, std::span<const Tensor> images, std::span<const Tensor> masks,
                         std::size_t steps, std::size_t batch_size, double lr, double momentum, std::uint64_t seed) {
  static std::mutex mu;
  static std::map<std::vector<std::uint64_t>, TrainResult> cache;
  std::uint64_t h = 0xcbf29ce484222325ULL;
  h = fnv1a(h, start.values.data(), start.values.size() * sizeof(double));
  for (std::size_t i = 0; i < images.size(); ++i) {
    h = fnv1a(h, images[i].data().data(), images[i].size() * sizeof(double));
    h = fnv1a(h, masks[i].data().data(), masks[i].size() * sizeof(double));
  }
  std::uint64_t lr_bits = 0, mom_bits = 0;
  std::memcpy(&lr_bits, &lr, sizeof lr_bits);
  std::memcpy(&mom_bits, &momentum, sizeof mom_bits);
  std::vector<std::uint64_t> key{h, images.size(), start.values.size(), steps, batch_size, lr_bits, mom_bits, seed};
  {
    std::lock_guard lock(mu);
    if (auto it = cache.find(key); it != cache.end() && it->second.params.spec == start.spec) return it->second;
  }
  auto res = train_supervised(start, images, masks, steps, batch_size, lr, momentum, seed);
  std::lock_guard lock(mu);
  if (cache.size() >= 256) cache.clear();
  cache.emplace(std::move(key), res);
  return res;
}

}  // namespace

std::vector<TaskSample> make_pretrain_corpus(const FederationSpec& data, std::size_t n, std::uint64_t seed) {
  std::vector<TaskSample> out;
  out.reserve(n);
  for (std::size_t i = 0; i < n; ++i) {
    const auto style = sample_style(data.styles, derive_seed(seed, {kTagPretrain, kTagStyle, i}));
    Tensor mask = gen_mask(derive_seed(seed, {kTagPretrain, kTagMask, i}), data.grid);
    Tensor image = render(mask, style, derive_seed(seed, {kTagPretrain, kTagRender, i}));
    out.push_back({image, mask, -1});
  }
  return out;
}

ModelParams pretrained_foundation(const ExperimentConfig& cfg) {
  const auto& fc = cfg.fed;
  auto init = init_model(cfg.foundation, derive_seed(cfg.seed, {kTagInitFoundation}));
  if (fc.pretrain_steps == 0) return init;
  const auto corpus = make_pretrain_corpus(cfg.data, fc.pretrain_samples, cfg.seed);
  std::vector<Tensor> images, masks;
  for (const auto& smp : corpus) {
    images.push_back(smp.image);
    masks.push_back(smp.mask);
  }
  return cached_train(init, images, masks, fc.pretrain_steps, fc.batch_size, fc.lr_server, fc.momentum,
                      derive_seed(cfg.seed, {kTagPretrain}))
      .params;
}

FoldState init_fold(const ExperimentConfig& cfg, const std::vector<ClientDataset>& federation, int held_out,
                    int fold_index, CommLedger& ledger) {
  const auto& fc = cfg.fed;
  FoldState st;
  st.fold = fold_index;
  st.split = split_leave_one_out(federation, held_out);

  // Client side: fit and upload. Server side: decode what arrived.
  std::vector<std::vector<Tensor>> banks;
  for (const auto& client : st.split.train_clients) {
    GeneratorParams gen{};
    gen.source_client = client.domain_id;
    if (!fc.accounting_only) gen = fit_generator(client);
    const auto gen_bytes = serialize_generator(gen);
    ledger.append({fold_index, 0, Direction::ClientToServer, PayloadKind::GeneratorParams, client.domain_id,
                   gen_bytes.size()});
    st.generators.push_back(deserialize_generator(gen_bytes));

    const auto bank_bytes = serialize_mask_bank(client.mask_bank, cfg.data.grid);
    ledger.append({fold_index, 0, Direction::ClientToServer, PayloadKind::MaskBank, client.domain_id,
                   bank_bytes.size()});
    banks.push_back(deserialize_mask_bank(bank_bytes));
  }

  st.lightweight = init_model(cfg.lightweight, derive_seed(cfg.seed, {kTagInitLightweight}));
  if (fc.accounting_only) return st;
  st.foundation = pretrained_foundation(cfg);

  if (!cfg.dtilde_path.empty()) {
    auto file = decode_dtilde(read_file_bytes(cfg.dtilde_path));
    for (auto& s : file.samples) {
      if (s.source_client == held_out) continue;
      s.index = st.d_tilde.size();
      st.d_tilde.push_back(s);
    }
    if (st.d_tilde.empty()) throw std::runtime_error("generated set file holds no training-client samples");
  } else {
    st.d_tilde = build_global_set(st.generators, banks, fc.n_generated_per_client, derive_seed(cfg.seed, {kTagGlobalSet}));
  }
  st.d_holdout = build_global_set(st.generators, banks, fc.n_holdout_per_client, derive_seed(cfg.seed, {kTagHoldoutSet}));

  std::vector<Tensor> images, masks;
  for (const auto& smp : st.d_tilde) {
    images.push_back(smp.image);
    masks.push_back(smp.mask);
  }
  auto warm = cached_train(st.foundation, images, masks, fc.server_warmup_steps, fc.batch_size, fc.lr_server,
                           fc.momentum, derive_seed(cfg.seed, {kTagWarmup, static_cast<std::uint64_t>(fold_index)}));
  st.foundation = std::move(warm.params);
  st.warmup.server = warm.sample_evals;

  st.pool = full_pool(st.d_tilde.size());
  st.pool.selection_rate = fc.selection_rate;
  st.pool.mode = fc.selection_mode;
  return st;
}

RoundReport run_round(FoldState& st, const ExperimentConfig& cfg, CommLedger& ledger, std::size_t jobs) {
  const auto& fc = cfg.fed;
  const int r = ++st.round;
  const auto fold = static_cast<std::uint64_t>(st.fold);
  RoundReport rep;
  rep.round = r;
  const auto& clients = st.split.train_clients;
  const std::size_t k_train = clients.size();

  // (1) broadcast the global lightweight model
  const auto down = serialize_params(st.lightweight.values);
  std::vector<ModelParams> received(k_train);
  for (std::size_t k = 0; k < k_train; ++k) {
    ledger.append({st.fold, r, Direction::ServerToClient, PayloadKind::LightweightParams, clients[k].domain_id, down.size()});
    received[k] = ModelParams{cfg.lightweight, deserialize_params(down)};
  }

  // (2) local training
  std::vector<TrainResult> local(k_train);
  if (!fc.accounting_only) {
    parallel_for(k_train, jobs, [&](std::size_t k) {
      local[k] = local_train(clients[k], received[k], fc.local_steps, fc.batch_size, fc.lr_client, fc.momentum,
                             derive_seed(cfg.seed, {kTagLocalTrain, fold, static_cast<std::uint64_t>(r),
                                                    static_cast<std::uint64_t>(clients[k].domain_id)}));
    });
  } else {
    for (std::size_t k = 0; k < k_train; ++k) local[k].params = received[k];
  }

  // (3) upload and aggregate, in fixed client order
  std::vector<ModelParams> uploaded;
  std::vector<double> sizes;
  for (std::size_t k = 0; k < k_train; ++k) {
    const auto up = serialize_params(local[k].params.values);
    ledger.append({st.fold, r, Direction::ClientToServer, PayloadKind::LightweightParams, clients[k].domain_id, up.size()});
    uploaded.push_back(ModelParams{cfg.lightweight, deserialize_params(up)});
    sizes.push_back(static_cast<double>(clients[k].samples.size()));
    rep.client_train_loss.push_back(local[k].step_losses.empty() ? 0.0 : local[k].step_losses.back());
    rep.steps.local += local[k].sample_evals;
  }
  st.lightweight = fedavg(uploaded, sizes);
  rep.bytes_cum = ledger.bytes_through(st.fold, r);
  if (fc.accounting_only) return rep;

  // (4) foundation fine-tuning on the generated set
  auto ft = server_finetune_foundation(st.foundation, st.d_tilde, fc.server_steps, fc.batch_size, fc.lr_server,
                                       fc.momentum, derive_seed(cfg.seed, {kTagServerTrain, fold, static_cast<std::uint64_t>(r)}));
  st.foundation = std::move(ft.params);
  rep.steps.server += ft.sample_evals;

  // (5) learnability-guided mutual distillation
  if (fc.distillation_enabled()) {
    std::vector<ScoredSample> scores;
    if (fc.lg_selection) {
      scores = score_samples(st.d_tilde, st.foundation, st.lightweight, fc.lambda, fc.score_norm, r);
      rep.steps.scoring_forwards += 2 * st.d_tilde.size();
      st.pool = refresh_pool(st.pool, scores, derive_seed(cfg.seed, {kTagPool, fold, static_cast<std::uint64_t>(r)}));
    } else {
      st.pool.selected = full_pool(st.d_tilde.size()).selected;
    }
    DistillConfig dc{fc.distill_epochs, fc.batch_size, fc.lr_distill, fc.momentum, fc.distill_alpha, fc.mutual_kd,
                    fc.distill_clip};
    auto res = mutual_distill_phase(st.foundation, st.lightweight, st.d_tilde, st.pool, dc,
                                    derive_seed(cfg.seed, {kTagDistill, fold, static_cast<std::uint64_t>(r)}));
    st.foundation = std::move(res.foundation);
    st.lightweight = std::move(res.lightweight);
    rep.distill = res.stats;
    rep.distill.scoring_forwards = rep.steps.scoring_forwards;
    if (!scores.empty()) {
      for (auto i : st.pool.selected) {
        rep.distill.mean_score += scores[i].score;
        rep.distill.mean_l_gt += scores[i].l_gt;
        rep.distill.mean_l_kl += scores[i].l_kl;
      }
      const auto n = static_cast<double>(st.pool.selected.size());
      rep.distill.mean_score /= n;
      rep.distill.mean_l_gt /= n;
      rep.distill.mean_l_kl /= n;
    }
    rep.steps.distill += res.stats.sample_evals;
    rep.steps.distill_grad_steps += res.stats.grad_steps;
  }

  // (6) evaluation of the deployed (lightweight) model and the server model
  rep.lightweight_test = evaluate(st.lightweight, st.split.test_set, fc.threshold);
  rep.foundation_test = evaluate(st.foundation, st.split.test_set, fc.threshold);
  rep.foundation_holdout = evaluate_generated(st.foundation, st.d_holdout, fc.threshold);
  return rep;
}

ExperimentReport run_experiment(const ExperimentConfig& cfg, std::size_t jobs) {
  cfg.validate();
  FederationSpec data = cfg.data;
  data.seed = cfg.seed;
  const auto federation = make_federation(data);

  std::vector<int> held_out;
  if (cfg.fed.eval_protocol == EvalProtocol::LeaveOneOut) {
    for (const auto& c : federation) held_out.push_back(c.domain_id);
  } else {
    held_out.push_back(cfg.fed.test_client);
  }

  ExperimentReport rep;
  for (std::size_t f = 0; f < held_out.size(); ++f) {
    FoldState st = init_fold(cfg, federation, held_out[f], static_cast<int>(f), rep.ledger);
    FoldReport fr;
    fr.held_out = held_out[f];
    fr.generators = st.generators;
    fr.steps = st.warmup;
    for (std::size_t r = 0; r < cfg.fed.n_rounds; ++r) {
      fr.rounds.push_back(run_round(st, cfg, rep.ledger, jobs));
      fr.steps += fr.rounds.back().steps;
    }
    const auto& last = fr.rounds.back();
    rep.mean_dice += last.lightweight_test.dice;
    rep.mean_iou += last.lightweight_test.iou;
    rep.mean_foundation_test_dice += last.foundation_test.dice;
    rep.mean_foundation_holdout_dice += last.foundation_holdout.dice;
    rep.steps += fr.steps;
    rep.folds.push_back(std::move(fr));
  }
  const auto nf = static_cast<double>(rep.folds.size());
  rep.mean_dice /= nf;
  rep.mean_iou /= nf;
  rep.mean_foundation_test_dice /= nf;
  rep.mean_foundation_holdout_dice /= nf;
  return rep;
}

}  // namespace dsfed
