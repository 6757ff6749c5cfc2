// cssl: run, validate and compare continuous self-supervised learning
// experiments described by JSON configs.

#include <iostream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "cssl/experiment.hpp"

namespace {

constexpr int kExitOk = 0;
constexpr int kExitError = 1;
constexpr int kExitInvalid = 2;
constexpr int kExitIncomplete = 3;

struct LoadedConfig {
  cssl::ExperimentConfig config;
  std::string text;
};

LoadedConfig load(const std::string& path) {
  LoadedConfig out;
  try {
    out.text = cssl::read_text(path);
  } catch (const cssl::IoError& e) {
    throw cssl::ConfigValidationError(std::vector<cssl::Diagnostic>{{"<file>", e.what()}});
  }
  cssl::Json j;
  try {
    j = cssl::Json::parse(out.text);
  } catch (const cssl::Json::parse_error& e) {
    throw cssl::ConfigValidationError(std::vector<cssl::Diagnostic>{{"<file>", path + ": " + e.what()}});
  }
  out.config = cssl::parse_config(j);
  cssl::apply_env_overrides(out.config);
  return out;
}

void print_diagnostics(const cssl::ConfigValidationError& e) {
  std::cerr << "config is invalid:\n";
  for (const auto& d : e.diagnostics()) std::cerr << "  " << d.field << ": " << d.message << "\n";
}

void print_aggregates(const cssl::ExperimentResult& r) {
  for (const auto& a : r.aggregates) {
    std::cout << a.method << ": accuracy " << a.final_accuracy_mean << " +- " << a.final_accuracy_std
              << ", correlation " << a.steady_state_correlation_mean << ", idle " << a.idle_fraction_mean;
    if (a.forgetting_mean) std::cout << ", forgetting " << *a.forgetting_mean;
    std::cout << "  (" << a.runs << " runs)\n";
  }
}

int cmd_run(const std::string& path, const std::vector<std::string>& only, bool quiet) {
  const LoadedConfig lc = load(path);
  cssl::ExecutionOptions opts;
  opts.config_text = lc.text;
  opts.only_methods = only;
  if (!quiet) opts.progress = &std::cerr;
  const cssl::ExperimentResult r = cssl::run_experiment(lc.config, opts);
  print_aggregates(r);
  if (r.analytics) std::cout << "analytics rows: " << r.analytics->rows.size() << "\n";
  std::cout << "output: " << r.output_dir->string() << "\n";
  if (!r.all_completed()) {
    std::cerr << "some runs stopped early; partial logs are in the output directory\n";
    return kExitIncomplete;
  }
  return kExitOk;
}

int cmd_validate(const std::string& path, bool print_resolved) {
  const LoadedConfig lc = load(path);
  if (print_resolved) std::cout << cssl::to_json(lc.config).dump(2) << "\n";
  std::cout << path << ": ok (" << cssl::to_string(lc.config.kind) << ", " << lc.config.methods.size()
            << " methods, " << lc.config.seeds.size() << " seeds)\n";
  return kExitOk;
}

int cmd_analytics(const std::string& path) {
  LoadedConfig lc = load(path);
  lc.config.kind = cssl::ExperimentKind::analytics_only;
  cssl::ExecutionOptions opts;
  opts.config_text = lc.text;
  const cssl::ExperimentResult r = cssl::run_experiment(lc.config, opts);
  std::cout << "analytics rows: " << r.analytics->rows.size() << "\n";
  std::cout << "output: " << (*r.output_dir / "analytics.csv").string() << "\n";
  return kExitOk;
}

int cmd_compare(const std::vector<std::string>& dirs, const std::string& out) {
  std::vector<std::filesystem::path> paths(dirs.begin(), dirs.end());
  std::optional<std::filesystem::path> out_dir;
  if (!out.empty()) out_dir = out;
  const cssl::ComparisonResult r = cssl::compare_runs(paths, out_dir);
  for (const auto& w : r.warnings) std::cerr << "warning: " << w << "\n";
  for (const auto& run : r.summary["runs"]) {
    std::cout << run["label"].get<std::string>() << ": final accuracy " << run["final_accuracy"].dump()
              << " (delta " << run["final_accuracy_delta"].dump() << "), forgetting " << run["forgetting"].dump()
              << " (delta " << run["forgetting_delta"].dump() << ")\n";
  }
  if (out_dir) std::cout << "output: " << (*out_dir / "comparison.csv").string() << "\n";
  return kExitOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Continuous self-supervised learning experiments"};
  app.require_subcommand(1);

  std::string config_path;
  std::vector<std::string> only;
  bool quiet = false;
  auto* run = app.add_subcommand("run", "Run every method and seed of an experiment config");
  run->add_option("config", config_path, "Experiment config (JSON)")->required();
  run->add_option("--only", only, "Restrict to these method names");
  run->add_flag("-q,--quiet", quiet, "No per-run progress on stderr");

  bool print_resolved = false;
  auto* val = app.add_subcommand("validate", "Check a config and report every invalid field");
  val->add_option("config", config_path, "Experiment config (JSON)")->required();
  val->add_flag("--print-resolved", print_resolved, "Print the config with all defaults filled in");

  auto* ana = app.add_subcommand("analytics", "Correlation likelihood sweep over the config's analytics grid");
  ana->add_option("config", config_path, "Experiment config (JSON)")->required();

  std::vector<std::string> dirs;
  std::string out;
  auto* cmp = app.add_subcommand("compare", "Align checkpoint metrics across run directories");
  cmp->add_option("dirs", dirs, "Run or experiment directories")->required();
  cmp->add_option("-o,--out", out, "Write comparison.csv and comparison.json here");

  CLI11_PARSE(app, argc, argv);

  try {
    if (*run) return cmd_run(config_path, only, quiet);
    if (*val) return cmd_validate(config_path, print_resolved);
    if (*ana) return cmd_analytics(config_path);
    if (*cmp) return cmd_compare(dirs, out);
  } catch (const cssl::ConfigValidationError& e) {
    print_diagnostics(e);
    return kExitInvalid;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitError;
  }
  return kExitError;
}
