#include "fktlab/masks.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <span>
#include <tuple>

#include "fktlab/errors.hpp"
#include "fktlab/rng.hpp"

namespace fktlab {

namespace {

bool any_nonzero(std::span<const double> w) {
  return std::any_of(w.begin(), w.end(), [](double v) { return v != 0.0; });
}

void require_matching(const NetworkState& net, const SubnetworkRegistry& registry) {
  if (net.filter_widths() != registry.widths()) {
    throw DimensionError(0, "registry layer widths do not match the network");
  }
}

}  // namespace

const char* to_string(Decision d) { return d == Decision::included ? "included" : "omitted"; }

const char* to_string(ConstraintViolation::Kind k) {
  switch (k) {
    case ConstraintViolation::Kind::frozen_modified:
      return "frozen_modified";
    case ConstraintViolation::Kind::missing_dependency:
      return "missing_dependency";
    case ConstraintViolation::Kind::dangling_weight:
      return "dangling_weight";
  }
  return "?";
}

SubnetworkRegistry::SubnetworkRegistry(std::vector<std::size_t> widths)
    : widths_(std::move(widths)), frozen_(widths_, false) {
  for (auto w : widths_) owner_.emplace_back(w, 0);
}

const TaskRecord& SubnetworkRegistry::record(TaskId t) const {
  auto it = records_.find(t);
  if (it == records_.end()) throw UnknownTaskError(to_int(t));
  return it->second;
}

TaskRecord& SubnetworkRegistry::mutable_record(TaskId t) {
  auto it = records_.find(t);
  if (it == records_.end()) throw UnknownTaskError(to_int(t));
  return it->second;
}

FilterMask SubnetworkRegistry::all_masks() const {
  FilterMask m(widths_, false);
  for (const auto& [id, rec] : records_) m |= rec.mask;
  return m;
}

std::optional<TaskId> SubnetworkRegistry::owner(std::size_t layer, std::size_t filter) const {
  const int o = owner_.at(layer).at(filter);
  if (o == 0) return std::nullopt;
  return TaskId{o};
}

std::set<TaskId> SubnetworkRegistry::embedded_tasks(TaskId t) const {
  std::set<TaskId> out;
  std::vector<TaskId> stack(record(t).shared.begin(), record(t).shared.end());
  while (!stack.empty()) {
    const TaskId cur = stack.back();
    stack.pop_back();
    if (!out.insert(cur).second) continue;
    for (TaskId s : record(cur).shared) stack.push_back(s);
  }
  return out;
}

const std::vector<double>* SubnetworkRegistry::snapshot(std::size_t layer, std::size_t filter) const {
  auto it = snapshots_.find({layer, filter});
  return it == snapshots_.end() ? nullptr : &it->second;
}

void SubnetworkRegistry::overwrite_mask(TaskId t, FilterMask mask) {
  if (mask.widths() != widths_) throw DimensionError(0, "mask widths do not match the registry");
  mutable_record(t).mask = std::move(mask);
}

std::size_t prune_count(double k, std::size_t n_unfrozen) {
  return static_cast<std::size_t>(std::floor(k * static_cast<double>(n_unfrozen) + 0.5));
}

PruneResult prune_layerwise(NetworkState& net, const SubnetworkRegistry& registry, double k,
                            std::optional<TaskId> head_task) {
  if (!(k >= 0.0 && k <= 1.0)) throw ParameterError("prune fraction must lie in [0, 1]");
  require_matching(net, registry);
  const auto widths = net.filter_widths();
  PruneResult res{FilterMask(widths, false), FilterMask(widths, false)};
  const FilterMask& frozen = registry.frozen();

  for (std::size_t l = 0; l < widths.size(); ++l) {
    std::vector<std::size_t> unfrozen;
    for (std::size_t f = 0; f < widths[l]; ++f) {
      if (!frozen.test(l, f)) unfrozen.push_back(f);
    }
    std::vector<double> norm2(widths[l], 0.0);
    for (auto f : unfrozen) {
      for (double v : net.filter_weights(l, f)) norm2[f] += v * v;
    }
    std::stable_sort(unfrozen.begin(), unfrozen.end(),
                     [&](std::size_t a, std::size_t b) { return norm2[a] < norm2[b]; });
    const std::size_t n_prune = prune_count(k, unfrozen.size());
    for (std::size_t j = 0; j < unfrozen.size(); ++j) {
      const std::size_t f = unfrozen[j];
      if (j < n_prune) {
        res.pruned.set(l, f);
        for (double& v : net.filter_weights(l, f)) v = 0.0;
      } else {
        res.kept.set(l, f);
      }
    }
  }

  // Everything downstream of a pruned filter goes too.
  for (std::size_t l = 0; l < widths.size(); ++l) {
    const auto pruned = res.pruned.members(l);
    if (pruned.empty()) continue;
    if (l + 1 < widths.size()) {
      for (std::size_t g = 0; g < widths[l + 1]; ++g) {
        if (frozen.test(l + 1, g)) continue;
        for (auto f : pruned) {
          for (double& v : net.edge_weights(l + 1, g, f)) v = 0.0;
        }
      }
    } else if (head_task && net.has_head(*head_task) && !net.head(*head_task).sealed) {
      Tensor& hw = net.head(*head_task).weights;
      for (std::size_t c = 0; c < hw.rows(); ++c) {
        for (auto f : pruned) hw.at(c, f) = 0.0;
      }
    }
  }
  return res;
}

const FilterMask& freeze_task(NetworkState& net, SubnetworkRegistry& registry, TaskId task,
                              const FilterMask& kept, const std::set<TaskId>& shared_now) {
  require_matching(net, registry);
  if (registry.contains(task)) throw ParameterError("task " + to_string(task) + " is already frozen");
  if (kept.widths() != registry.widths()) throw DimensionError(0, "kept mask widths do not match the registry");
  if (kept.intersects(registry.frozen_)) {
    throw FrozenOverlapError("kept filters of task " + to_string(task) + " overlap frozen filters");
  }
  TaskRecord rec;
  rec.id = task;
  rec.newly_frozen = kept;
  rec.mask = kept;
  for (TaskId s : shared_now) rec.mask |= registry.record(s).mask;
  rec.excluded = rec.mask.complement();
  rec.shared = shared_now;

  for (std::size_t l = 1; l < kept.layer_count(); ++l) {
    const auto outside = rec.excluded.members(l - 1);
    for (auto g : kept.members(l)) {
      for (auto s : outside) {
        for (double& v : net.edge_weights(l, g, s)) v = 0.0;
      }
    }
  }

  registry.frozen_ |= kept;
  for (std::size_t l = 0; l < kept.layer_count(); ++l) {
    for (auto f : kept.members(l)) registry.owner_[l][f] = to_int(task);
  }
  registry.order_.push_back(task);
  return registry.records_.emplace(task, std::move(rec)).first->second.mask;
}

void commit_task(NetworkState& net, SubnetworkRegistry& registry, TaskId task) {
  TaskRecord& rec = registry.mutable_record(task);
  for (std::size_t l = 0; l < rec.newly_frozen.layer_count(); ++l) {
    for (auto f : rec.newly_frozen.members(l)) {
      auto w = net.filter_weights(l, f);
      registry.snapshots_[{l, f}] = std::vector<double>(w.begin(), w.end());
    }
  }
  rec.committed = true;
  if (net.has_head(task)) net.seal_head(task);
}

FilterMask dependency_closure(const NetworkState& net, const FilterMask& seed) {
  if (seed.widths() != net.filter_widths()) throw DimensionError(0, "mask widths do not match the network");
  FilterMask out = seed;
  for (std::size_t l = out.layer_count(); l-- > 1;) {
    const std::size_t width_below = out.width(l - 1);
    for (auto f : out.members(l)) {
      for (std::size_t s = 0; s < width_below; ++s) {
        if (!out.test(l - 1, s) && any_nonzero(net.edge_weights(l, f, s))) out.set(l - 1, s);
      }
    }
  }
  return out;
}

FilterMask effective_gate(const SubnetworkRegistry& registry,
                          const std::map<TaskId, Decision>& decisions,
                          const FilterMask& current_trainable) {
  for (const auto& [t, d] : decisions) {
    if (!registry.contains(t)) throw UnknownTaskError(to_int(t));
  }
  FilterMask gate = current_trainable;
  for (TaskId t : registry.tasks()) {
    auto it = decisions.find(t);
    if (it == decisions.end()) {
      throw ParameterError("no share/omit decision for frozen task " + to_string(t));
    }
    if (it->second == Decision::included) gate |= registry.mask(t);
  }
  return gate;
}

std::vector<ConstraintViolation> validate_constraints(const NetworkState& net,
                                                      const SubnetworkRegistry& registry) {
  require_matching(net, registry);
  using Kind = ConstraintViolation::Kind;
  std::vector<ConstraintViolation> out;
  const auto widths = registry.widths();

  // Edges already reported as dangling are not reported again below.
  std::set<std::tuple<std::size_t, std::size_t, std::size_t>> dangling;

  for (TaskId t : registry.tasks()) {
    const TaskRecord& rec = registry.record(t);
    for (std::size_t l = 0; l < widths.size(); ++l) {
      const std::size_t fan = net.trainable_spec(l).fan_in();
      const std::size_t per_source = l == 0 ? fan : fan / widths[l - 1];
      for (auto g : rec.newly_frozen.members(l)) {
        std::vector<std::uint8_t> skip(fan, 0);
        if (l > 0) {
          for (std::size_t s = 0; s < widths[l - 1]; ++s) {
            if (!rec.excluded.test(l - 1, s) || !any_nonzero(net.edge_weights(l, g, s))) continue;
            dangling.insert({l, g, s});
            std::fill_n(skip.begin() + static_cast<std::ptrdiff_t>(s * per_source), per_source, 1);
            out.push_back({Kind::dangling_weight, l, g,
                           "nonzero weight from filter " + std::to_string(s) + " of layer " +
                               std::to_string(l - 1) + " outside M_" + to_string(t)});
          }
        }
        if (!rec.committed) continue;
        const auto* snap = registry.snapshot(l, g);
        const auto w = net.filter_weights(l, g);
        bool modified = snap == nullptr;
        for (std::size_t i = 0; !modified && i < fan; ++i) {
          if (!skip[i] && w[i] != (*snap)[i]) modified = true;
        }
        if (modified) {
          out.push_back({Kind::frozen_modified, l, g,
                         "weights of filter frozen by task " + to_string(t) + " differ from snapshot"});
        }
      }
    }
  }

  for (TaskId t : registry.tasks()) {
    const FilterMask& m = registry.mask(t);
    std::set<std::pair<std::size_t, std::size_t>> missing;
    for (std::size_t l = 1; l < widths.size(); ++l) {
      for (auto g : m.members(l)) {
        for (std::size_t s = 0; s < widths[l - 1]; ++s) {
          if (m.test(l - 1, s) || dangling.contains({l, g, s})) continue;
          if (any_nonzero(net.edge_weights(l, g, s))) missing.insert({l - 1, s});
        }
      }
    }
    for (const auto& [l, s] : missing) {
      out.push_back({Kind::missing_dependency, l, s,
                     "M_" + to_string(t) + " lacks an upstream filter its members read"});
    }
  }
  return out;
}

std::size_t reinitialize_pruned(NetworkState& net, const SubnetworkRegistry& registry,
                                std::uint64_t seed) {
  require_matching(net, registry);
  std::size_t count = 0;
  const FilterMask& frozen = registry.frozen();
  for (std::size_t l = 0; l < net.trainable_count(); ++l) {
    Rng rng(derive_seed(seed, {l}));
    const double b = init_bound(net.trainable_spec(l).fan_in());
    for (std::size_t f = 0; f < frozen.width(l); ++f) {
      if (frozen.test(l, f)) continue;
      for (double& v : net.filter_weights(l, f)) {
        if (v != 0.0) continue;
        v = rng.uniform(-b, b);
        ++count;
      }
    }
  }
  return count;
}

TrainableMask training_mask(const NetworkState& net, const SubnetworkRegistry& registry) {
  require_matching(net, registry);
  TrainableMask m;
  const FilterMask& frozen = registry.frozen();
  for (std::size_t l = 0; l < net.trainable_count(); ++l) {
    const std::size_t fan = net.trainable_spec(l).fan_in();
    std::vector<std::uint8_t> bits(net.weights()[l].size(), 0);
    for (std::size_t f = 0; f < frozen.width(l); ++f) {
      if (!frozen.test(l, f)) std::fill_n(bits.begin() + static_cast<std::ptrdiff_t>(f * fan), fan, 1);
    }
    m.layers.push_back(std::move(bits));
  }
  m.head = true;
  return m;
}

TrainableMask finetune_mask(const NetworkState& net, const SubnetworkRegistry& registry, TaskId task) {
  require_matching(net, registry);
  const TaskRecord& rec = registry.record(task);
  const auto widths = registry.widths();
  TrainableMask m;
  for (std::size_t l = 0; l < net.trainable_count(); ++l) {
    const std::size_t fan = net.trainable_spec(l).fan_in();
    const std::size_t per_source = l == 0 ? fan : fan / widths[l - 1];
    std::vector<std::uint8_t> bits(net.weights()[l].size(), 0);
    for (auto f : rec.newly_frozen.members(l)) {
      for (std::size_t i = 0; i < fan; ++i) {
        const bool reads_member = l == 0 || rec.mask.test(l - 1, i / per_source);
        bits[f * fan + i] = reads_member ? 1 : 0;
      }
    }
    m.layers.push_back(std::move(bits));
  }
  m.head = true;
  return m;
}

}  // namespace fktlab
