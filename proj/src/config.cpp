#include "dsfed/config.hpp"

#include <charconv>
#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <functional>
#include <sstream>

namespace dsfed {

namespace {

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

std::string fmt_double(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  // prefer the shortest representation that round-trips
  for (int prec = 1; prec <= 17; ++prec) {
    char b2[32];
    std::snprintf(b2, sizeof b2, "%.*g", prec, v);
    if (std::strtod(b2, nullptr) == v) return b2;
  }
  return buf;
}

std::uint64_t to_u64(const std::string& v) {
  std::uint64_t out = 0;
  const auto* end = v.data() + v.size();
  auto [p, ec] = std::from_chars(v.data(), end, out);
  if (ec != std::errc() || p != end) throw ConfigError("expected a non-negative integer, got '" + v + "'");
  return out;
}

double to_double(const std::string& v) {
  std::size_t pos = 0;
  double out = 0;
  try {
    out = std::stod(v, &pos);
  } catch (const std::exception&) {
    pos = 0;
  }
  if (pos == 0 || pos != v.size()) throw ConfigError("expected a number, got '" + v + "'");
  return out;
}

bool to_bool(const std::string& v) {
  if (v == "true" || v == "1" || v == "on") return true;
  if (v == "false" || v == "0" || v == "off") return false;
  throw ConfigError("expected true or false, got '" + v + "'");
}

template <class T, class F>
std::vector<T> to_list(const std::string& v, F conv) {
  std::vector<T> out;
  std::stringstream ss(v);
  std::string item;
  while (std::getline(ss, item, ',')) out.push_back(conv(trim(item)));
  if (out.empty()) throw ConfigError("expected a comma separated list");
  return out;
}

template <class T, class F>
std::string join(const std::vector<T>& xs, F fmt) {
  std::string s;
  for (std::size_t i = 0; i < xs.size(); ++i) s += (i ? "," : "") + fmt(xs[i]);
  return s;
}

struct Field {
  std::string key;
  std::function<void(RunnerConfig&, const std::string&)> set;
  std::function<std::string(const RunnerConfig&)> get;
};

#define DSFED_UINT(key, member)                                                               \
  Field {                                                                                     \
    key, [](RunnerConfig& c, const std::string& v) { c.member = to_u64(v); },                 \
        [](const RunnerConfig& c) { return std::to_string(c.member); }                        \
  }
#define DSFED_DOUBLE(key, member)                                                             \
  Field {                                                                                     \
    key, [](RunnerConfig& c, const std::string& v) { c.member = to_double(v); },              \
        [](const RunnerConfig& c) { return fmt_double(c.member); }                            \
  }
#define DSFED_BOOL(key, member)                                                               \
  Field {                                                                                     \
    key, [](RunnerConfig& c, const std::string& v) { c.member = to_bool(v); },                \
        [](const RunnerConfig& c) { return std::string(c.member ? "true" : "false"); }        \
  }
#define DSFED_SIZES(key, member)                                                              \
  Field {                                                                                     \
    key,                                                                                      \
        [](RunnerConfig& c, const std::string& v) {                                           \
          c.member = to_list<std::size_t>(v, [](const std::string& s) { return to_u64(s); }); \
        },                                                                                    \
        [](const RunnerConfig& c) {                                                           \
          return join(c.member, [](std::size_t x) { return std::to_string(x); });             \
        }                                                                                     \
  }

const std::vector<Field>& fields() {
  static const std::vector<Field> table = {
      DSFED_UINT("seed", exp.seed),
      DSFED_UINT("data.n_clients", exp.data.n_clients),
      DSFED_UINT("data.samples_per_client", exp.data.samples_per_client),
      {"data.grid",
       [](RunnerConfig& c, const std::string& v) {
         c.exp.data.grid = to_u64(v);
         c.exp.lightweight.input_size = c.exp.data.grid;
         c.exp.foundation.input_size = c.exp.data.grid;
       },
       [](const RunnerConfig& c) { return std::to_string(c.exp.data.grid); }},
      DSFED_DOUBLE("data.style.fg_mean_min", exp.data.styles.fg_mean_min),
      DSFED_DOUBLE("data.style.fg_mean_max", exp.data.styles.fg_mean_max),
      DSFED_DOUBLE("data.style.bg_mean_min", exp.data.styles.bg_mean_min),
      DSFED_DOUBLE("data.style.bg_mean_max", exp.data.styles.bg_mean_max),
      DSFED_DOUBLE("data.style.fg_std_max", exp.data.styles.fg_std_max),
      DSFED_DOUBLE("data.style.bg_std_max", exp.data.styles.bg_std_max),
      DSFED_DOUBLE("data.style.texture_freq_min", exp.data.styles.texture_freq_min),
      DSFED_DOUBLE("data.style.texture_freq_max", exp.data.styles.texture_freq_max),
      DSFED_DOUBLE("data.style.noise_sigma_min", exp.data.styles.noise_sigma_min),
      DSFED_DOUBLE("data.style.noise_sigma_max", exp.data.styles.noise_sigma_max),
      DSFED_DOUBLE("data.style.contrast_min", exp.data.styles.contrast_min),
      DSFED_DOUBLE("data.style.contrast_max", exp.data.styles.contrast_max),
      {"data.dtilde_path", [](RunnerConfig& c, const std::string& v) { c.exp.dtilde_path = v; },
       [](const RunnerConfig& c) { return c.exp.dtilde_path; }},
      DSFED_SIZES("model.lightweight.widths", exp.lightweight.widths),
      DSFED_SIZES("model.lightweight.kernels", exp.lightweight.kernels),
      DSFED_SIZES("model.foundation.widths", exp.foundation.widths),
      DSFED_SIZES("model.foundation.kernels", exp.foundation.kernels),
      DSFED_UINT("federation.n_rounds", exp.fed.n_rounds),
      DSFED_UINT("federation.local_steps", exp.fed.local_steps),
      DSFED_UINT("federation.batch_size", exp.fed.batch_size),
      DSFED_DOUBLE("federation.lr_client", exp.fed.lr_client),
      DSFED_DOUBLE("federation.lr_server", exp.fed.lr_server),
      DSFED_DOUBLE("federation.lr_distill", exp.fed.lr_distill),
      DSFED_DOUBLE("federation.momentum", exp.fed.momentum),
      DSFED_DOUBLE("federation.lambda", exp.fed.lambda),
      DSFED_DOUBLE("federation.selection_rate", exp.fed.selection_rate),
      {"federation.selection_mode",
       [](RunnerConfig& c, const std::string& v) {
         try {
           c.exp.fed.selection_mode = selection_mode_from_string(v);
         } catch (const std::invalid_argument& e) {
           throw ConfigError(e.what());
         }
       },
       [](const RunnerConfig& c) { return to_string(c.exp.fed.selection_mode); }},
      {"federation.score_norm",
       [](RunnerConfig& c, const std::string& v) {
         try {
           c.exp.fed.score_norm = score_norm_from_string(v);
         } catch (const std::invalid_argument& e) {
           throw ConfigError(e.what());
         }
       },
       [](const RunnerConfig& c) { return to_string(c.exp.fed.score_norm); }},
      DSFED_DOUBLE("federation.distill_alpha", exp.fed.distill_alpha),
      DSFED_UINT("federation.distill_epochs", exp.fed.distill_epochs),
      DSFED_DOUBLE("federation.distill_clip", exp.fed.distill_clip),
      DSFED_UINT("federation.server_steps", exp.fed.server_steps),
      DSFED_UINT("federation.server_warmup_steps", exp.fed.server_warmup_steps),
      DSFED_UINT("federation.pretrain_steps", exp.fed.pretrain_steps),
      DSFED_UINT("federation.pretrain_samples", exp.fed.pretrain_samples),
      DSFED_UINT("federation.n_generated_per_client", exp.fed.n_generated_per_client),
      DSFED_UINT("federation.n_holdout_per_client", exp.fed.n_holdout_per_client),
      DSFED_BOOL("federation.mutual_kd", exp.fed.mutual_kd),
      DSFED_BOOL("federation.lg_selection", exp.fed.lg_selection),
      {"federation.eval_protocol",
       [](RunnerConfig& c, const std::string& v) {
         try {
           c.exp.fed.eval_protocol = eval_protocol_from_string(v);
         } catch (const std::invalid_argument& e) {
           throw ConfigError(e.what());
         }
       },
       [](const RunnerConfig& c) { return to_string(c.exp.fed.eval_protocol); }},
      {"federation.test_client",
       [](RunnerConfig& c, const std::string& v) { c.exp.fed.test_client = static_cast<int>(to_u64(v)); },
       [](const RunnerConfig& c) { return std::to_string(c.exp.fed.test_client); }},
      DSFED_DOUBLE("federation.threshold", exp.fed.threshold),
      DSFED_BOOL("federation.accounting_only", exp.fed.accounting_only),
      {"runner.seeds",
       [](RunnerConfig& c, const std::string& v) {
         c.seeds = to_list<std::uint64_t>(v, [](const std::string& s) { return to_u64(s); });
       },
       [](const RunnerConfig& c) { return join(c.seeds, [](std::uint64_t x) { return std::to_string(x); }); }},
      {"runner.sweep_param",
       [](RunnerConfig& c, const std::string& v) {
         if (v != "lambda" && v != "selection_rate") {
           throw ConfigError("expected lambda or selection_rate, got '" + v + "'");
         }
         c.sweep_param = v;
       },
       [](const RunnerConfig& c) { return c.sweep_param; }},
      {"runner.sweep_values",
       [](RunnerConfig& c, const std::string& v) { c.sweep_values = to_list<double>(v, to_double); },
       [](const RunnerConfig& c) { return join(c.sweep_values, fmt_double); }},
  };
  return table;
}

#undef DSFED_UINT
#undef DSFED_DOUBLE
#undef DSFED_BOOL
#undef DSFED_SIZES

}  // namespace

void RunnerConfig::validate() const {
  std::string errs;
  try {
    exp.validate();
  } catch (const ConfigError& e) {
    errs = e.what();
  }
  auto add = [&errs](const std::string& m) { errs += (errs.empty() ? "" : "\n") + m; };
  if (seeds.empty()) add("runner.seeds: at least one seed required");
  if (sweep_values.empty()) add("runner.sweep_values: at least one value required");
  for (double v : sweep_values) {
    if (sweep_param == "lambda" && !(v >= 0 && v <= 1)) {
      add("runner.sweep_values: lambda values must lie in [0,1], got " + fmt_double(v));
    }
    if (sweep_param == "selection_rate" && !(v > 0 && v <= 1)) {
      add("runner.sweep_values: selection_rate values must lie in (0,1], got " + fmt_double(v));
    }
  }
  if (!errs.empty()) throw ConfigError(errs);
}

void set_value(RunnerConfig& cfg, const std::string& key, const std::string& value) {
  for (const auto& f : fields()) {
    if (f.key != key) continue;
    try {
      f.set(cfg, value);
    } catch (const ConfigError& e) {
      throw ConfigError(key + ": " + e.what());
    }
    return;
  }
  throw ConfigError(key + ": unknown key");
}

void apply_override(RunnerConfig& cfg, const std::string& assignment) {
  const auto eq = assignment.find('=');
  if (eq == std::string::npos) throw ConfigError("override '" + assignment + "': expected key=value");
  set_value(cfg, trim(assignment.substr(0, eq)), trim(assignment.substr(eq + 1)));
}

RunnerConfig parse_config(const std::string& text, const std::string& source) {
  RunnerConfig cfg;
  std::istringstream in(text);
  std::string line, section, errs;
  for (int lineno = 1; std::getline(in, line); ++lineno) {
    const auto hash = line.find('#');
    if (hash != std::string::npos) line.resize(hash);
    line = trim(line);
    if (line.empty()) continue;
    const std::string where = source + ":" + std::to_string(lineno) + ": ";
    if (line.front() == '[') {
      if (line.back() != ']') {
        errs += where + "unterminated section header\n";
        continue;
      }
      section = trim(line.substr(1, line.size() - 2));
      continue;
    }
    const auto eq = line.find('=');
    if (eq == std::string::npos) {
      errs += where + "expected key = value\n";
      continue;
    }
    std::string key = trim(line.substr(0, eq));
    if (!section.empty()) key = section + "." + key;
    try {
      set_value(cfg, key, trim(line.substr(eq + 1)));
    } catch (const ConfigError& e) {
      errs += where + e.what() + "\n";
    }
  }
  if (!errs.empty()) {
    errs.pop_back();
    throw ConfigError(errs);
  }
  return cfg;
}

RunnerConfig load_config(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw ConfigError(path + ": cannot open config file");
  std::stringstream ss;
  ss << f.rdbuf();
  return parse_config(ss.str(), path);
}

std::vector<std::pair<std::string, std::string>> config_entries(const RunnerConfig& cfg) {
  std::vector<std::pair<std::string, std::string>> out;
  for (const auto& f : fields()) out.emplace_back(f.key, f.get(cfg));
  return out;
}

std::string dump_config(const RunnerConfig& cfg) {
  std::string s;
  for (const auto& [k, v] : config_entries(cfg)) s += k + " = " + v + "\n";
  return s;
}

}  // namespace dsfed
