#include <cstdlib>
#include <iostream>

#include <CLI11.hpp>

#include "fktlab/cli.hpp"
#include "fktlab/errors.hpp"

namespace {

// Exit codes by error category.
enum Exit : int {
  ok = 0,
  unexpected = 1,
  config = 2,
  io = 3,
  data = 4,
  parameter = 5,
  numeric = 6,
};

int report(const char* category, int code, const std::exception& e) {
  std::cerr << "fktlab: " << category << " error: " << e.what() << "\n";
  return code;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Filter-level continual learning experiments with sharing and omission of frozen subnetworks"};
  app.require_subcommand(1);

  std::string config_path;
  std::string output_dir;
  auto* run = app.add_subcommand("run", "Run the experiment described by a config file");
  run->add_option("config", config_path, "Config file")->required();
  run->add_option("-o,--output-dir", output_dir, "Output directory (overrides config and FKTLAB_OUTPUT_DIR)");
  auto* validate = app.add_subcommand("validate", "Parse a config file and report problems without running");
  validate->add_option("config", config_path, "Config file")->required();
  auto* presets = app.add_subcommand("presets", "List the named task sequences");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? Exit::ok : Exit::config;
  }

  try {
    if (*presets) {
      for (const auto& name : fktlab::preset_names()) {
        const auto p = fktlab::make_preset(name);
        std::cout << name << "\t" << p.spec.tasks.size() << " tasks\t" << p.description << "\n";
      }
      return Exit::ok;
    }
    if (*validate) {
      const auto cfg = fktlab::load_config(config_path);
      const auto seq = fktlab::build_run_sequence(cfg);
      std::cout << config_path << ": ok (" << fktlab::to_string(cfg.protocol) << ", " << seq.size() << " tasks, "
                << cfg.seeds.size() << " trial(s))\n";
      return Exit::ok;
    }
    std::optional<std::filesystem::path> out;
    if (const char* env = std::getenv("FKTLAB_OUTPUT_DIR"); env && *env) out = env;
    if (!output_dir.empty()) out = output_dir;
    const auto paths = fktlab::run_config(config_path, out);
    std::cout << paths.results_csv.string() << "\n"
              << paths.results_json.string() << "\n"
              << paths.scores_csv.string() << "\n";
    return Exit::ok;
  } catch (const fktlab::ConfigError& e) {
    return report("config", Exit::config, e);
  } catch (const fktlab::IoError& e) {
    return report("io", Exit::io, e);
  } catch (const fktlab::FormatError& e) {
    return report("data", Exit::data, e);
  } catch (const fktlab::ConsistencyError& e) {
    return report("data", Exit::data, e);
  } catch (const fktlab::SequenceError& e) {
    return report("data", Exit::data, e);
  } catch (const fktlab::NumericDivergenceError& e) {
    return report("numeric", Exit::numeric, e);
  } catch (const fktlab::Error& e) {
    return report("parameter", Exit::parameter, e);
  } catch (const std::exception& e) {
    return report("unexpected", Exit::unexpected, e);
  }
}
