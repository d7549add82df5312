#pragma once

#include <cstdint>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include "fktlab/masks.hpp"
#include "fktlab/network.hpp"
#include "fktlab/taskgen.hpp"
#include "fktlab/usefulness.hpp"

namespace fktlab {

// Dense relu stack; with normalize set, each hidden layer is followed by a
// parameter-free batch normalization.
struct Architecture {
  std::vector<std::size_t> hidden = {32, 32, 32};
  bool normalize = false;
};

NetworkState build_network(const Shape& input_shape, const Architecture& arch, std::uint64_t seed);

struct ProtocolConfig {
  TrainConfig train;
  Architecture arch;
  double prune_fraction = 0.65;
  bool squared = true;
  bool fkt = false;  // also train the solo baseline of each scored pair
};

// Protocol defaults for a named preset: its architecture and batch size.
ProtocolConfig preset_config(const Preset& preset);

enum class StrategyKind { share_all, share_none, share_lowest, omit_lowest, manual };

const char* to_string(StrategyKind k);
StrategyKind parse_strategy(const std::string& s);

struct SharingStrategy {
  StrategyKind kind = StrategyKind::share_all;
  std::map<TaskId, std::set<TaskId>> manual_plan;  // target -> sources

  void validate() const;
};

// Every task shares all earlier tasks of the same family.
std::map<TaskId, std::set<TaskId>> family_plan(const std::vector<std::string>& families);

// Share/omit decision for every frozen task when training `target`, expanded
// so that an included task brings every task embedded in its stored mask.
std::map<TaskId, Decision> decide_sharing(const SharingStrategy& strategy,
                                          const std::map<TaskId, double>& scores,
                                          const SubnetworkRegistry& registry, TaskId target);

enum class ThreeTaskDecision { share_both, omit_beta, omit_alpha };

const char* to_string(ThreeTaskDecision d);
ThreeTaskDecision parse_three_task_decision(const std::string& s);

struct DecisionPoint {
  TaskId task{};
  std::map<TaskId, Decision> decisions;
  std::vector<UsefulnessReport> reports;
};

struct ExperimentResult {
  std::string protocol;
  std::uint64_t seed = 0;
  std::vector<TaskId> tasks;  // sequence positions in training order
  std::string decision;
  std::vector<std::pair<TaskId, double>> task_acc;  // final accuracy per task
  double mean_acc = 0.0;
  std::optional<double> activation;
  std::optional<double> connectivity;
  std::optional<double> fkt;
  std::vector<DecisionPoint> decision_points;
  std::vector<std::string> warnings;
  double wall_seconds = 0.0;

  // Test-split logits under (M_t, H_t) right after each task committed and
  // again once the protocol finished.
  std::map<TaskId, Tensor> completion_logits;
  std::map<TaskId, Tensor> final_logits;
  std::map<TaskId, double> completion_acc;

  // Decisions that were in force while each task trained.
  std::map<TaskId, std::map<TaskId, Decision>> executed;
  std::size_t constraint_violations = 0;  // validator result after every task
};

// Mutable state of one protocol run.
struct Learner {
  NetworkState net;
  SubnetworkRegistry registry;
  ProtocolConfig cfg;
  std::uint64_t seed = 0;

  Learner(const Shape& input_shape, const ProtocolConfig& cfg, std::uint64_t seed);

  // Full gate of the current sharing decisions plus all unfrozen filters.
  FilterMask gate_for(const std::map<TaskId, Decision>& decisions) const;

  // Reinitialize, train under the decisions, prune, freeze, finetune, commit.
  // Returns the test accuracy under (M_t, H_t).
  double learn(const TaskDataset& data, TaskId task, const std::map<TaskId, Decision>& decisions,
               std::vector<std::string>* warnings = nullptr);

  double accuracy(const TaskDataset& data, TaskId task) const;
  Tensor logits(const TaskDataset& data, TaskId task) const;
};

ExperimentResult run_two_task(const TaskSequence& seq, std::size_t alpha, std::size_t beta,
                              const ProtocolConfig& cfg, std::uint64_t seed);

ExperimentResult run_three_task(const TaskSequence& seq, std::size_t alpha, std::size_t beta,
                                std::size_t gamma, ThreeTaskDecision decision,
                                const ProtocolConfig& cfg, std::uint64_t seed);

ExperimentResult run_sequence(const TaskSequence& seq, const SharingStrategy& strategy,
                              const ProtocolConfig& cfg, std::uint64_t seed);

}  // namespace fktlab
