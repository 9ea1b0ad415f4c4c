#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "cola/cola.hpp"

namespace {

struct Options {
  std::string config;
  std::vector<std::uint64_t> seeds;
  std::string out;
  std::string sources;
  std::string city;
  std::string checkpoint;
  std::string real;
  std::string sim;
  std::optional<double> tau;
  bool no_half_open = false;
  bool no_post_hoc = false;
  bool combinations = false;
  bool quiet = false;
};

std::vector<std::string> split_list(const std::string& s) {
  std::vector<std::string> out;
  std::stringstream ss(s);
  std::string item;
  while (std::getline(ss, item, ','))
    if (!item.empty()) out.push_back(item);
  return out;
}

cola::RunConfig effective_config(const Options& o) {
  cola::RunConfig cfg = cola::load_run_config(o.config);
  if (!o.seeds.empty()) cfg.seeds = o.seeds;
  if (!o.out.empty()) cfg.output = o.out;
  if (!o.city.empty()) {
    cfg.city(o.city);
    cfg.target = o.city;
  }
  if (!o.sources.empty()) cfg.sources = split_list(o.sources);
  if (o.no_half_open) cfg.half_open = false;
  if (o.no_post_hoc) cfg.post_hoc = false;
  if (o.tau) cfg.simulation.tau = *o.tau;
  cfg.verbose = !o.quiet;
  return cfg;
}

void print_paths(const std::vector<std::filesystem::path>& paths) {
  for (const auto& p : paths) std::cout << p.generic_string() << '\n';
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Cross-city trajectory simulation"};
  app.require_subcommand(1);
  Options o;

  auto common = [&](CLI::App* cmd) {
    cmd->add_option("--config", o.config, "run configuration (JSON)")->required()->check(CLI::ExistingFile);
    cmd->add_option("--seed", o.seeds, "seed; repeat for several trials");
    cmd->add_option("--out", o.out, "output root");
    cmd->add_option("--city", o.city, "target city");
    cmd->add_flag("--quiet", o.quiet, "no per-epoch log lines");
  };
  auto model_flags = [&](CLI::App* cmd) {
    cmd->add_flag("--no-half-open", o.no_half_open, "share every parameter");
    cmd->add_option("--sources", o.sources, "comma-separated source cities");
  };
  auto sim_flags = [&](CLI::App* cmd) {
    cmd->add_flag("--no-post-hoc", o.no_post_hoc, "sample from the raw softmax");
    cmd->add_option("--tau", o.tau, "adjustment exponent");
  };

  auto* synth = app.add_subcommand("synth", "generate synthetic cities");
  common(synth);
  auto* ingest = app.add_subcommand("ingest", "ingest raw check-in files");
  common(ingest);
  auto* train = app.add_subcommand("train", "single-city training");
  common(train);
  model_flags(train);
  auto* transfer = app.add_subcommand("transfer", "cross-city transfer");
  common(transfer);
  model_flags(transfer);
  transfer->add_flag("--combinations", o.combinations, "run every subset of the sources");
  auto* simulate = app.add_subcommand("simulate", "generate trajectories");
  common(simulate);
  sim_flags(simulate);
  simulate->add_flag("--no-half-open", o.no_half_open, "checkpoint was trained without private parameters");
  simulate->add_option("--checkpoint", o.checkpoint, "target checkpoint")->check(CLI::ExistingFile);
  auto* evaluate = app.add_subcommand("evaluate", "score simulated trajectories");
  common(evaluate);
  evaluate->add_option("--real", o.real, "real trajectories (split-file format)")->check(CLI::ExistingFile);
  evaluate->add_option("--sim", o.sim, "simulated trajectories")->check(CLI::ExistingFile);
  auto* ablate = app.add_subcommand("ablate", "2x2 ablation of the two components");
  common(ablate);
  ablate->add_option("--sources", o.sources, "comma-separated source cities");
  ablate->add_option("--tau", o.tau, "adjustment exponent");
  auto* report = app.add_subcommand("report", "summarize evaluation reports");
  common(report);

  CLI11_PARSE(app, argc, argv);

  try {
    const cola::RunConfig cfg = effective_config(o);
    if (synth->parsed()) {
      print_paths(cola::cmd_synth(cfg));
    } else if (ingest->parsed()) {
      print_paths(cola::cmd_ingest(cfg));
    } else if (train->parsed()) {
      print_paths(cola::cmd_train(cfg));
    } else if (transfer->parsed()) {
      print_paths(cola::cmd_transfer(cfg, o.combinations));
    } else if (simulate->parsed()) {
      std::optional<std::filesystem::path> ckpt;
      if (!o.checkpoint.empty()) ckpt = o.checkpoint;
      print_paths(cola::cmd_simulate(cfg, ckpt));
    } else if (evaluate->parsed()) {
      std::optional<std::filesystem::path> real, sim;
      if (!o.real.empty()) real = o.real;
      if (!o.sim.empty()) sim = o.sim;
      print_paths(cola::cmd_evaluate(cfg, real, sim));
    } else if (ablate->parsed()) {
      cola::write_ablation_table(std::cout, cola::cmd_ablate(cfg));
    } else if (report->parsed()) {
      cola::cmd_report(cfg, &std::cout);
    }
  } catch (const cola::Error& e) {
    std::cerr << "error[" << cola::to_string(e.kind()) << "]: " << e.what() << '\n';
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error[internal]: " << e.what() << '\n';
    return 3;
  }
  return 0;
}
