// dsfed: desk-scale federated segmentation with a server-side foundation model.
#include <cstdlib>
#include <filesystem>
#include <iostream>
#include <string>
#include <vector>

#include "CLI11.hpp"

#include "dsfed/bytes.hpp"
#include "dsfed/config.hpp"
#include "dsfed/report.hpp"
#include "dsfed/runner.hpp"

namespace fs = std::filesystem;
using namespace dsfed;

namespace {

struct Common {
  std::string config_path;
  std::vector<std::string> overrides;
  std::string out_dir;
  std::size_t jobs = 1;
};

RunnerConfig resolve(const Common& c) {
  RunnerConfig cfg = c.config_path.empty() ? RunnerConfig{} : load_config(c.config_path);
  for (const auto& o : c.overrides) apply_override(cfg, o);
  cfg.validate();
  return cfg;
}

std::string output_dir(const Common& c) {
  if (!c.out_dir.empty()) return c.out_dir;
  if (const char* env = std::getenv("OUTPUT_DIR"); env != nullptr && *env) return env;
  return "out";
}

void write_manifest(const fs::path& dir, const RunnerConfig& cfg, const std::string& cmd,
                    const std::vector<std::string>& outputs) {
  write_text_file((dir / "manifest.json").string(), manifest_json(cfg, cmd, outputs).dump(2) + "\n");
}

int cmd_run(const Common& c) {
  const auto cfg = resolve(c);
  const fs::path dir = output_dir(c);
  fs::create_directories(dir);
  const auto rep = run_experiment(cfg.exp, c.jobs);
  write_manifest(dir, cfg, "run", {"report.json", "rounds.csv", "ledger.csv"});
  write_text_file((dir / "report.json").string(), report_json(rep, cfg.exp).dump(2) + "\n");
  write_text_file((dir / "rounds.csv").string(), rounds_csv(rep));
  write_text_file((dir / "ledger.csv").string(), ledger_csv(rep.ledger));
  std::cout << "mean dice " << fmt_num(rep.mean_dice) << "  iou " << fmt_num(rep.mean_iou) << "  bytes "
            << rep.ledger.total_bytes() << "\n";
  return 0;
}

int cmd_ablate(const Common& c) {
  const auto cfg = resolve(c);
  const fs::path dir = output_dir(c);
  fs::create_directories(dir);
  const auto cells = run_ablation(cfg, c.jobs);
  write_manifest(dir, cfg, "ablate", {"ablation.csv"});
  const auto csv = ablation_csv(cells);
  write_text_file((dir / "ablation.csv").string(), csv);
  std::cout << csv;
  return 0;
}

int cmd_sweep(const Common& c) {
  const auto cfg = resolve(c);
  const fs::path dir = output_dir(c);
  fs::create_directories(dir);
  const auto rows = run_sweep(cfg, c.jobs);
  write_manifest(dir, cfg, "sweep", {"sweep.csv"});
  const auto csv = sweep_csv(rows);
  write_text_file((dir / "sweep.csv").string(), csv);
  std::cout << csv;
  return 0;
}

int cmd_gen_data(const Common& c) {
  const auto cfg = resolve(c);
  const fs::path dir = output_dir(c);
  fs::create_directories(dir);
  const auto res = run_gen_data(cfg.exp);
  write_manifest(dir, cfg, "gen-data", {"dtilde.bin", "report.json"});
  write_file_bytes((dir / "dtilde.bin").string(), res.dtilde_bytes);
  const auto rep = gen_data_json(res, cfg.exp);
  write_text_file((dir / "report.json").string(), rep.dump(2) + "\n");
  std::cout << "generated " << res.d_tilde.size() << " samples, own-client closest: "
            << (rep["own_client_closest"].get<bool>() ? "yes" : "no") << "\n";
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"dsfed: desk-scale federated segmentation simulator"};
  app.require_subcommand(1);
  app.footer(std::string("Exit codes: 0 success, 1 runtime failure, 2 config or validation failure.\n"
                         "Output columns:\n  rounds.csv   ") +
             kRoundsColumns + "\n  ledger.csv   " + kLedgerColumns + "\n  ablation.csv " + kAblationColumnsPrefix +
             ",dice_seed<s>...," + kAblationColumnsSuffix + "\n  sweep.csv    " + kSweepColumns +
             "\nOUTPUT_DIR is used when --out is absent.");

  Common common;
  auto add_common = [&common](CLI::App* sub) {
    sub->add_option("--config", common.config_path, "config file (key = value, [section] headers)");
    sub->add_option("--set", common.overrides, "override, dotted.key=value (repeatable)");
    sub->add_option("--out", common.out_dir, "output directory");
    sub->add_option("--jobs", common.jobs, "worker threads for per-client training")->check(CLI::PositiveNumber);
  };
  auto* run = app.add_subcommand("run", "run one experiment: manifest.json report.json rounds.csv ledger.csv");
  auto* ablate = app.add_subcommand("ablate", "mutual KD x LG selection grid over the seed list: ablation.csv");
  auto* sweep = app.add_subcommand("sweep", "runner.sweep_param over runner.sweep_values: sweep.csv");
  auto* gen = app.add_subcommand("gen-data", "fit generators and write dtilde.bin plus a fidelity report");
  for (auto* s : {run, ablate, sweep, gen}) add_common(s);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? 0 : 2;
  }

  try {
    if (*run) return cmd_run(common);
    if (*ablate) return cmd_ablate(common);
    if (*sweep) return cmd_sweep(common);
    if (*gen) return cmd_gen_data(common);
  } catch (const ConfigError& e) {
    std::cerr << "config error:\n" << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 1;
}
