// calmargin: train, evaluate, calibrate and rank calibration losses on the synthetic task.

#include <filesystem>
#include <iostream>
#include <string>

#include <CLI11.hpp>

#include "calmargin/harness.hpp"

int main(int argc, char** argv) {
  CLI::App app{"Margin-based calibration losses: experiment runner"};
  app.require_subcommand(1, 1);

  std::string config_path;
  std::string out_dir;
  bool force = false;

  for (const char* name : {"train", "eval", "calibrate", "perturb", "rank", "reliability"}) {
    auto* sub = app.add_subcommand(name);
    sub->add_option("--config", config_path, "Experiment config (JSON)")->required();
    sub->add_option("--out", out_dir, "Run directory (overrides output_dir)");
    sub->add_flag("--force", force, "Overwrite a completed run");
  }

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 1;
  }

  const std::string command_name = app.get_subcommands().front()->get_name();
  try {
    const auto command = calmargin::parse_command(command_name);
    auto config = calmargin::load_config(config_path);
    if (!out_dir.empty()) config.output_dir = std::filesystem::absolute(out_dir);
    calmargin::run_command(command, config, {force, calmargin::threads_from_env()});
    std::cout << command_name << ": done (" << config.output_dir.string() << ")\n";
    return 0;
  } catch (const calmargin::Error& e) {
    std::cerr << command_name << ": " << calmargin::to_string(e.code()) << ": " << e.what()
              << "\n";
    return calmargin::exit_code_for(e.code());
  } catch (const std::exception& e) {
    std::cerr << command_name << ": " << e.what() << "\n";
    return 2;
  }
}
