#pragma once

#include <cstddef>
#include <cstdint>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <utility>
#include <vector>

#include "fktlab/filter_mask.hpp"
#include "fktlab/network.hpp"

namespace fktlab {

enum class Decision { included, omitted };

const char* to_string(Decision d);

// Per-task subnetwork bookkeeping. A task is registered by freeze_task and
// committed (weights snapshotted, head sealed) by commit_task after its
// finetuning phase.
struct TaskRecord {
  TaskId id{};
  FilterMask mask;          // stored M_t: newly frozen plus every shared mask
  FilterMask newly_frozen;  // filters frozen by this task
  FilterMask excluded;      // filters outside M_t when the task froze
  std::set<TaskId> shared;  // subnetworks shared while training the task
  bool committed = false;
};

class SubnetworkRegistry {
 public:
  SubnetworkRegistry() = default;
  explicit SubnetworkRegistry(std::vector<std::size_t> widths);
  static SubnetworkRegistry for_network(const NetworkState& net) {
    return SubnetworkRegistry(net.filter_widths());
  }

  const std::vector<std::size_t>& widths() const noexcept { return widths_; }
  // Tasks in freeze order.
  const std::vector<TaskId>& tasks() const noexcept { return order_; }
  bool contains(TaskId t) const { return records_.contains(t); }
  const TaskRecord& record(TaskId t) const;
  const FilterMask& mask(TaskId t) const { return record(t).mask; }

  // Union of every task's newly frozen filters.
  const FilterMask& frozen() const noexcept { return frozen_; }
  FilterMask unfrozen() const { return frozen_.complement(); }
  // Union of all stored masks.
  FilterMask all_masks() const;
  std::optional<TaskId> owner(std::size_t layer, std::size_t filter) const;

  // Every task whose subnetwork is embedded in M_t through sharing, t itself
  // excluded (transitive over the recorded shared sets).
  std::set<TaskId> embedded_tasks(TaskId t) const;

  const std::map<TaskId, Decision>& decisions() const noexcept { return decisions_; }
  void set_decisions(std::map<TaskId, Decision> d) { decisions_ = std::move(d); }

  // Snapshot of a frozen filter's incoming weights, taken at commit time.
  const std::vector<double>* snapshot(std::size_t layer, std::size_t filter) const;

  // Replaces a stored mask without any checks. Diagnostic hook used to
  // exercise the validator.
  void overwrite_mask(TaskId t, FilterMask mask);

 private:
  friend const FilterMask& freeze_task(NetworkState&, SubnetworkRegistry&, TaskId,
                                       const FilterMask&, const std::set<TaskId>&);
  friend void commit_task(NetworkState&, SubnetworkRegistry&, TaskId);

  TaskRecord& mutable_record(TaskId t);

  std::vector<std::size_t> widths_;
  std::map<TaskId, TaskRecord> records_;
  std::vector<TaskId> order_;
  FilterMask frozen_;
  std::vector<std::vector<int>> owner_;  // 0 = unowned
  std::map<TaskId, Decision> decisions_;
  std::map<std::pair<std::size_t, std::size_t>, std::vector<double>> snapshots_;
};

struct PruneResult {
  FilterMask kept;    // surviving unfrozen filters
  FilterMask pruned;  // unfrozen filters whose weights were zeroed
};

// Zeroes round(k * n_unfrozen) unfrozen filters per layer, smallest L2 norm
// first (ties -> lower index), then zeroes every non-frozen weight in the next
// layer (or the head of `head_task`, for the last layer) that reads a pruned
// filter. Layers without unfrozen filters prune nothing.
PruneResult prune_layerwise(NetworkState& net, const SubnetworkRegistry& registry, double k,
                            std::optional<TaskId> head_task = std::nullopt);

// Number of filters pruned from n unfrozen ones (round half up).
std::size_t prune_count(double k, std::size_t n_unfrozen);

// Stores M_t = kept + the masks of shared_now and marks kept as frozen.
// Incoming weights of kept filters from any filter outside M_t are zeroed so
// the new subnetwork depends on nothing but M_t.
const FilterMask& freeze_task(NetworkState& net, SubnetworkRegistry& registry, TaskId task,
                              const FilterMask& kept, const std::set<TaskId>& shared_now);

// Ends a task's finetuning: snapshots its newly frozen weights and seals its head.
void commit_task(NetworkState& net, SubnetworkRegistry& registry, TaskId task);

// Smallest superset of seed closed under "a member's nonzero-weight inputs in
// the previous layer are members".
FilterMask dependency_closure(const NetworkState& net, const FilterMask& seed);

// current_trainable plus the stored mask of every included task.
FilterMask effective_gate(const SubnetworkRegistry& registry,
                          const std::map<TaskId, Decision>& decisions,
                          const FilterMask& current_trainable);

struct ConstraintViolation {
  enum class Kind { frozen_modified, missing_dependency, dangling_weight };
  Kind kind;
  std::size_t layer;
  std::size_t filter;
  std::string detail;
};

const char* to_string(ConstraintViolation::Kind k);

// Empty iff (1) committed frozen weights equal their snapshot, (2) every
// stored mask is dependency-closed, (3) no frozen filter has a nonzero weight
// from a filter that was outside its task's mask when the task froze.
std::vector<ConstraintViolation> validate_constraints(const NetworkState& net,
                                                      const SubnetworkRegistry& registry);

// Redraws every exactly-zero weight of a non-frozen filter uniformly in
// [-1/sqrt(fan_in), 1/sqrt(fan_in)]. Returns the number of redrawn weights.
std::size_t reinitialize_pruned(NetworkState& net, const SubnetworkRegistry& registry,
                                std::uint64_t seed);

// Training permissions for a new task: every weight of a non-frozen filter.
TrainableMask training_mask(const NetworkState& net, const SubnetworkRegistry& registry);

// Finetuning permissions for a just-frozen task: weights of its newly frozen
// filters that read inputs or members of M_t.
TrainableMask finetune_mask(const NetworkState& net, const SubnetworkRegistry& registry,
                            TaskId task);

}  // namespace fktlab
