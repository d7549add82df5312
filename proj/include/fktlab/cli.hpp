#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "fktlab/protocols.hpp"
#include "fktlab/taskgen.hpp"

namespace fktlab {

enum class ProtocolKind { two_task, three_task, sequence };

const char* to_string(ProtocolKind k);
ProtocolKind parse_protocol(const std::string& s);

// Parsed run description. The file format is described in README.md.
struct RunConfig {
  ProtocolKind protocol = ProtocolKind::sequence;
  std::optional<std::string> preset;
  std::uint64_t data_seed = 0;
  SequenceSpec spec;                 // explicit tasks when no preset is named
  std::vector<std::size_t> subset;   // 1-based positions kept from the sequence
  SharingStrategy strategy;
  bool family_manual = true;         // manual plan derived from task families
  std::size_t alpha = 0, beta = 0, gamma = 0;
  ThreeTaskDecision decision = ThreeTaskDecision::share_both;
  ProtocolConfig protocol_cfg;
  std::vector<std::uint64_t> seeds;  // one per trial
  std::filesystem::path output_dir = "results";
};

// Line-oriented "key = value" text with [section] headers. Errors name the
// offending key and line.
RunConfig parse_config(const std::string& text, const std::string& origin = "<config>");
RunConfig load_config(const std::filesystem::path& path);

TaskSequence build_run_sequence(const RunConfig& cfg);

// One ExperimentResult per seed, run sequentially.
std::vector<ExperimentResult> run_trials(const RunConfig& cfg);

inline constexpr const char* kResultsHeader = "protocol,seed,tasks,decision,task_acc,mean_acc,A,P,FKT";

struct ReportPaths {
  std::filesystem::path results_csv;
  std::filesystem::path results_json;
  std::filesystem::path scores_csv;
};

// results.csv (per-seed rows then a mean row), results.json with the same
// values, and scores.csv with every usefulness report.
ReportPaths emit_report(const std::vector<ExperimentResult>& results, const std::filesystem::path& dir);

std::string results_csv(const std::vector<ExperimentResult>& results);
std::string results_json(const std::vector<ExperimentResult>& results);
std::string scores_csv(const std::vector<ExperimentResult>& results);

// Parse, run and report. output_override replaces the configured directory.
ReportPaths run_config(const std::filesystem::path& path,
                       const std::optional<std::filesystem::path>& output_override = std::nullopt);

}  // namespace fktlab
