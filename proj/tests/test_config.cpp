#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <sys/wait.h>
#include <unistd.h>

#include "dsfed/config.hpp"
#include "dsfed/report.hpp"

using namespace dsfed;
namespace fs = std::filesystem;

namespace {

std::string slurp(const fs::path& p) {
  std::ifstream f(p, std::ios::binary);
  std::stringstream ss;
  ss << f.rdbuf();
  return ss.str();
}

// Small enough to run in a couple of seconds.
const char* kTiny =
    "--set data.grid=16 --set data.samples_per_client=8 --set federation.n_rounds=1 "
    "--set federation.local_steps=2 --set federation.pretrain_steps=5 --set federation.pretrain_samples=8 "
    "--set federation.server_warmup_steps=5 --set federation.n_generated_per_client=4 "
    "--set federation.n_holdout_per_client=2 --set runner.seeds=0";

int run_cli(const std::string& args) {
  const char* bin = std::getenv("DSFED_BIN");
  REQUIRE(bin != nullptr);
  const std::string cmd = std::string(bin) + " " + args + " >/dev/null 2>&1";
  const int st = std::system(cmd.c_str());
  return WIFEXITED(st) ? WEXITSTATUS(st) : -1;
}

fs::path scratch(const std::string& name) {
  auto p = fs::temp_directory_path() / ("dsfed_test_" + std::to_string(::getpid())) / name;
  fs::remove_all(p);
  return p;
}

}  // namespace

TEST_CASE("parse sections, comments and lists") {
  const auto c = parse_config(
      "# top\nseed = 7\n[federation]\nlambda = 0.25   # inline\nmutual_kd = off\n"
      "selection_mode = softmax\n[model.lightweight]\nwidths = 4, 4, 1\n[runner]\nseeds = 3,4\n");
  CHECK(c.exp.seed == 7);
  CHECK(c.exp.fed.lambda == 0.25);
  CHECK_FALSE(c.exp.fed.mutual_kd);
  CHECK(c.exp.fed.selection_mode == SelectionMode::SoftmaxSample);
  CHECK(c.exp.lightweight.widths == std::vector<std::size_t>{4, 4, 1});
  CHECK(c.seeds == std::vector<std::uint64_t>{3, 4});
}

TEST_CASE("errors carry source, line and key") {
  try {
    parse_config("seed = 1\n[federation]\nbogus = 3\nlambda = x\n", "my.cfg");
    FAIL("expected ConfigError");
  } catch (const ConfigError& e) {
    const std::string m = e.what();
    CHECK(m.find("my.cfg:3: federation.bogus: unknown key") != std::string::npos);
    CHECK(m.find("my.cfg:4: federation.lambda") != std::string::npos);
  }
  CHECK_THROWS_AS(parse_config("[federation\n"), ConfigError);
  CHECK_THROWS_AS(parse_config("just words\n"), ConfigError);
  CHECK_THROWS_AS(load_config("/definitely/not/here.cfg"), ConfigError);
  RunnerConfig c;
  CHECK_THROWS_AS(apply_override(c, "federation.lambda"), ConfigError);
  CHECK_THROWS_AS(apply_override(c, "federation.n_rounds=-1"), ConfigError);
  CHECK_THROWS_AS(apply_override(c, "federation.mutual_kd=maybe"), ConfigError);
}

TEST_CASE("overrides and grid coupling") {
  RunnerConfig c;
  apply_override(c, "data.grid = 16");
  CHECK(c.exp.lightweight.input_size == 16);
  CHECK(c.exp.foundation.input_size == 16);
  apply_override(c, "federation.lambda=0.9");
  CHECK(c.exp.fed.lambda == 0.9);
  c.exp.fed.lambda = 1.5;
  CHECK_THROWS_AS(c.validate(), ConfigError);
  c.exp.fed.lambda = 0.5;
  c.sweep_param = "lambda";
  c.sweep_values = {0.1, 2.0};
  CHECK_THROWS_AS(c.validate(), ConfigError);
  CHECK_THROWS_AS(apply_override(c, "runner.sweep_param=momentum"), ConfigError);
}

TEST_CASE("dump round-trips") {
  RunnerConfig c;
  apply_override(c, "federation.lr_client=0.1");
  apply_override(c, "federation.selection_rate=0.3");
  apply_override(c, "runner.sweep_param=lambda");
  apply_override(c, "runner.sweep_values=0.1,0.3");
  const auto again = parse_config(dump_config(c));
  CHECK(config_entries(again) == config_entries(c));
  CHECK(again.exp.fed.lr_client == 0.1);
}

TEST_CASE("shipped configs parse") {
  for (const char* name : {"default.cfg", "desk.cfg"}) {
    const auto c = load_config(std::string(DSFED_SOURCE_DIR) + "/configs/" + name);
    CHECK_NOTHROW(c.validate());
  }
}

TEST_CASE("cli exit codes") {
  const auto out = scratch("codes");
  CHECK(run_cli("run --config /definitely/not/here.cfg --out " + out.string()) == 2);
  CHECK(run_cli("run --set federation.lambda=1.5 --out " + out.string()) == 2);
  CHECK(run_cli("run --set federation.nope=1 --out " + out.string()) == 2);
  CHECK(run_cli("frobnicate") == 2);
  CHECK(run_cli(std::string("run ") + kTiny + " --set data.dtilde_path=/definitely/not/here.bin --out " +
                out.string()) == 1);
}

TEST_CASE("cli run is deterministic and writes every artifact") {
  const auto a = scratch("a"), b = scratch("b"), c = scratch("c");
  REQUIRE(run_cli(std::string("run ") + kTiny + " --out " + a.string()) == 0);
  REQUIRE(run_cli(std::string("run ") + kTiny + " --out " + b.string()) == 0);
  REQUIRE(run_cli(std::string("run ") + kTiny + " --jobs 3 --out " + c.string()) == 0);
  for (const char* f : {"manifest.json", "report.json", "rounds.csv", "ledger.csv"}) {
    CHECK(fs::exists(a / f));
    CHECK(slurp(a / f) == slurp(b / f));
  }
  CHECK(slurp(a / "report.json") == slurp(c / "report.json"));
  CHECK(slurp(a / "ledger.csv") == slurp(c / "ledger.csv"));
  const auto rounds = slurp(a / "rounds.csv");
  CHECK(rounds.substr(0, rounds.find('\n')) == kRoundsColumns);
  const auto ledger = slurp(a / "ledger.csv");
  CHECK(ledger.substr(0, ledger.find('\n')) == kLedgerColumns);
}

TEST_CASE("gen-data output feeds run") {
  const auto g = scratch("gen"), g2 = scratch("gen2"), r = scratch("fromgen");
  const std::string sizes = " --set data.samples_per_client=10 --set federation.n_generated_per_client=10";
  CHECK(run_cli(std::string("gen-data ") + kTiny + " --out " + g.string()) == 2);
  REQUIRE(run_cli(std::string("gen-data ") + kTiny + sizes + " --out " + g.string()) == 0);
  REQUIRE(run_cli(std::string("gen-data ") + kTiny + sizes + " --out " + g2.string()) == 0);
  CHECK(fs::exists(g / "dtilde.bin"));
  CHECK(slurp(g / "dtilde.bin") == slurp(g2 / "dtilde.bin"));
  CHECK(slurp(g / "report.json").find("own_client_closest") != std::string::npos);
  REQUIRE(run_cli(std::string("run ") + kTiny + " --set data.dtilde_path=" + (g / "dtilde.bin").string() +
                  " --out " + r.string()) == 0);
  CHECK(fs::exists(r / "report.json"));
}

TEST_CASE("cli ablate and sweep tables") {
  const auto a = scratch("ablate"), s = scratch("sweep");
  REQUIRE(run_cli(std::string("ablate ") + kTiny + " --out " + a.string()) == 0);
  const auto abl = slurp(a / "ablation.csv");
  std::size_t lines = 0;
  for (char ch : abl) lines += ch == '\n';
  CHECK(lines == 5);
  REQUIRE(run_cli(std::string("sweep ") + kTiny + " --set runner.sweep_param=lambda --set runner.sweep_values=0.1,0.9 --out " +
                  s.string()) == 0);
  const auto sw = slurp(s / "sweep.csv");
  CHECK(sw.substr(0, sw.find('\n')) == kSweepColumns);
  CHECK(sw.find("\nlambda,0.1,0,") != std::string::npos);
  CHECK(sw.find("\nlambda,0.9,0,") != std::string::npos);
}
