#include <cstdint>
#include <iostream>
#include <optional>
#include <string>

#include "CLI11.hpp"
#include "kdiff/experiment.hpp"

namespace {

namespace ex = kdiff::experiment;

struct Options {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::optional<std::string> out;
};

int run(const std::string& command, const Options& opts) {
  ex::ExperimentConfig cfg = ex::load_config(opts.config);
  if (opts.seed) cfg.seed = *opts.seed;
  if (opts.out) cfg.output_dir = *opts.out;
  const ex::Report report = ex::run(command, cfg);
  for (const auto& file : report.files) std::cout << "wrote " << file.string() << '\n';
  for (const auto& check : report.checks) {
    if (check.passed) {
      std::cout << "check passed: " << check.name << '\n';
    } else {
      std::cerr << "check failed: " << check.name;
      if (!check.detail.empty()) std::cerr << " (" << check.detail << ")";
      std::cerr << '\n';
    }
  }
  return report.ok() ? 0 : 1;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Optimal prediction-target laboratory for linear diffusion models", "kdiff-lab"};
  app.require_subcommand(1);
  Options opts;
  std::string chosen;
  for (const char* name : {"theory", "dynamics", "train", "sample"}) {
    CLI::App* sub = app.add_subcommand(name);
    sub->add_option("--config", opts.config, "Path to the JSON config file")->required()->check(CLI::ExistingFile);
    sub->add_option("--seed", opts.seed, "Override the global seed");
    sub->add_option("--out", opts.out, "Override the output directory");
    sub->callback([&chosen, name] { chosen = name; });
  }
  app.get_subcommand("theory")->description("Optimal loss over a k grid and the optimal k");
  app.get_subcommand("dynamics")->description("Gradient flow of the linear model toward equilibrium");
  app.get_subcommand("train")->description("Train a toy network with a learnable prediction target");
  app.get_subcommand("sample")->description("Integrate the velocity field from noise to data");
  CLI11_PARSE(app, argc, argv);

  try {
    return run(chosen, opts);
  } catch (const kdiff::Error& e) {
    std::cerr << "error: " << e.name() << ": " << e.what() << '\n';
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 2;
  }
}
