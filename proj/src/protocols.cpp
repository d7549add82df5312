#include "fktlab/protocols.hpp"

#include <chrono>
#include <numeric>

#include "fktlab/errors.hpp"
#include "fktlab/rng.hpp"

namespace fktlab {

namespace {

constexpr std::uint64_t kNetTag = 0x6e6574;
constexpr std::uint64_t kTrainTag = 0x747261696e;
constexpr std::uint64_t kReinitTag = 0x7265696e6974;

const TaskDataset& task_at(const TaskSequence& seq, std::size_t position) {
  if (position < 1 || position > seq.size()) {
    throw ParameterError("task position " + std::to_string(position) + " outside 1.." + std::to_string(seq.size()));
  }
  return seq.tasks[position - 1];
}

TaskId id_of(std::size_t position) { return TaskId{static_cast<int>(position)}; }

void record_completion(ExperimentResult& r, const Learner& l, const TaskDataset& data, TaskId t, double acc) {
  r.completion_logits[t] = l.logits(data, t);
  r.completion_acc[t] = acc;
  r.constraint_violations += validate_constraints(l.net, l.registry).size();
}

void record_final(ExperimentResult& r, const Learner& l, const TaskSequence& seq) {
  for (const auto& [t, logits] : r.completion_logits) {
    r.final_logits[t] = l.logits(task_at(seq, static_cast<std::size_t>(to_int(t))), t);
  }
}

void finish(ExperimentResult& r, std::chrono::steady_clock::time_point start) {
  double sum = 0.0;
  for (const auto& [t, a] : r.task_acc) sum += a;
  r.mean_acc = r.task_acc.empty() ? 0.0 : sum / static_cast<double>(r.task_acc.size());
  r.wall_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
}

}  // namespace

NetworkState build_network(const Shape& input_shape, const Architecture& arch, std::uint64_t seed) {
  if (arch.hidden.empty()) throw ParameterError("architecture needs at least one hidden layer");
  std::vector<LayerSpec> layers;
  std::size_t in = shape_volume(input_shape);
  for (auto w : arch.hidden) {
    if (w == 0) throw ParameterError("hidden widths must be positive");
    if (arch.normalize) {
      layers.push_back(LayerSpec::dense(in, w, Activation::identity));
      layers.push_back(LayerSpec::normalize(w, Activation::relu));
    } else {
      layers.push_back(LayerSpec::dense(in, w, Activation::relu));
    }
    in = w;
  }
  return NetworkState(input_shape, std::move(layers), seed);
}

ProtocolConfig preset_config(const Preset& preset) {
  ProtocolConfig cfg;
  cfg.arch.hidden = preset.hidden;
  cfg.arch.normalize = preset.normalize;
  cfg.train.batch_size = preset.batch_size;
  return cfg;
}

const char* to_string(StrategyKind k) {
  switch (k) {
    case StrategyKind::share_all:
      return "share_all";
    case StrategyKind::share_none:
      return "share_none";
    case StrategyKind::share_lowest:
      return "share_lowest";
    case StrategyKind::omit_lowest:
      return "omit_lowest";
    case StrategyKind::manual:
      return "manual";
  }
  return "?";
}

StrategyKind parse_strategy(const std::string& s) {
  for (auto k : {StrategyKind::share_all, StrategyKind::share_none, StrategyKind::share_lowest,
                 StrategyKind::omit_lowest, StrategyKind::manual}) {
    if (s == to_string(k)) return k;
  }
  throw ConfigError("unknown strategy '" + s +
                    "' (choices: share_all, share_none, share_lowest, omit_lowest, manual)");
}

void SharingStrategy::validate() const {
  if (kind != StrategyKind::manual && !manual_plan.empty()) {
    throw ParameterError("a sharing plan is only valid for the manual strategy");
  }
  for (const auto& [target, sources] : manual_plan) {
    for (TaskId s : sources) {
      if (to_int(s) < 1 || to_int(s) >= to_int(target)) {
        throw ParameterError("plan for task " + to_string(target) + " references task " + to_string(s) +
                             ", which is not an earlier task");
      }
    }
  }
}

std::map<TaskId, std::set<TaskId>> family_plan(const std::vector<std::string>& families) {
  std::map<TaskId, std::set<TaskId>> plan;
  for (std::size_t t = 1; t < families.size(); ++t) {
    std::set<TaskId> src;
    for (std::size_t s = 0; s < t; ++s) {
      if (families[s] == families[t]) src.insert(id_of(s + 1));
    }
    if (!src.empty()) plan[id_of(t + 1)] = std::move(src);
  }
  return plan;
}

std::map<TaskId, Decision> decide_sharing(const SharingStrategy& strategy,
                                          const std::map<TaskId, double>& scores,
                                          const SubnetworkRegistry& registry, TaskId target) {
  strategy.validate();
  const auto& frozen = registry.tasks();
  std::set<TaskId> include;

  std::optional<TaskId> lowest;
  if (strategy.kind == StrategyKind::share_lowest || strategy.kind == StrategyKind::omit_lowest) {
    for (TaskId t : frozen) {
      auto it = scores.find(t);
      if (it == scores.end()) throw MissingScoreError(to_int(t));
      // Strict comparison keeps the earliest task on ties.
      if (!lowest || it->second < scores.at(*lowest)) lowest = t;
    }
  }

  switch (strategy.kind) {
    case StrategyKind::share_all:
      include.insert(frozen.begin(), frozen.end());
      break;
    case StrategyKind::share_none:
      break;
    case StrategyKind::share_lowest:
      if (lowest) include.insert(*lowest);
      break;
    case StrategyKind::omit_lowest:
      for (TaskId t : frozen) {
        if (t != lowest) include.insert(t);
      }
      break;
    case StrategyKind::manual:
      if (auto it = strategy.manual_plan.find(target); it != strategy.manual_plan.end()) {
        for (TaskId s : it->second) {
          if (!registry.contains(s)) throw UnknownTaskError(to_int(s));
          include.insert(s);
        }
      }
      break;
  }

  std::set<TaskId> expanded = include;
  for (TaskId t : include) {
    const auto emb = registry.embedded_tasks(t);
    expanded.insert(emb.begin(), emb.end());
  }
  std::map<TaskId, Decision> out;
  for (TaskId t : frozen) out[t] = expanded.contains(t) ? Decision::included : Decision::omitted;
  return out;
}

const char* to_string(ThreeTaskDecision d) {
  switch (d) {
    case ThreeTaskDecision::share_both:
      return "share_both";
    case ThreeTaskDecision::omit_beta:
      return "omit_beta";
    case ThreeTaskDecision::omit_alpha:
      return "omit_alpha";
  }
  return "?";
}

ThreeTaskDecision parse_three_task_decision(const std::string& s) {
  for (auto d : {ThreeTaskDecision::share_both, ThreeTaskDecision::omit_beta, ThreeTaskDecision::omit_alpha}) {
    if (s == to_string(d)) return d;
  }
  throw ConfigError("unknown decision '" + s + "' (choices: share_both, omit_beta, omit_alpha)");
}

Learner::Learner(const Shape& input_shape, const ProtocolConfig& c, std::uint64_t s)
    : net(build_network(input_shape, c.arch, derive_seed(s, {kNetTag}))),
      registry(SubnetworkRegistry::for_network(net)),
      cfg(c),
      seed(s) {
  cfg.train.validate();
  if (!(cfg.prune_fraction >= 0.0 && cfg.prune_fraction <= 1.0)) {
    throw ParameterError("prune fraction must lie in [0, 1]");
  }
}

FilterMask Learner::gate_for(const std::map<TaskId, Decision>& decisions) const {
  return effective_gate(registry, decisions, registry.unfrozen());
}

double Learner::learn(const TaskDataset& data, TaskId task, const std::map<TaskId, Decision>& decisions,
                      std::vector<std::string>* warnings) {
  const FilterMask free = registry.unfrozen();
  for (std::size_t l = 0; l < free.layer_count(); ++l) {
    if (!free.any(l) && warnings) {
      warnings->push_back("task " + to_string(task) + ": layer " + std::to_string(l) +
                          " has no unfrozen filters left");
    }
  }
  reinitialize_pruned(net, registry, derive_seed(seed, {kReinitTag, static_cast<std::uint64_t>(to_int(task))}));
  registry.set_decisions(decisions);
  const FilterMask gate = gate_for(decisions);

  TrainConfig tc = cfg.train;
  tc.seed = derive_seed(seed, {kTrainTag});
  train_task(net, data, task, training_mask(net, registry), gate, tc, Phase::train);

  const PruneResult pr = prune_layerwise(net, registry, cfg.prune_fraction, task);
  std::set<TaskId> shared_now;
  for (const auto& [t, d] : decisions) {
    if (d == Decision::included) shared_now.insert(t);
  }
  freeze_task(net, registry, task, pr.kept, shared_now);
  train_task(net, data, task, finetune_mask(net, registry, task), registry.mask(task), tc, Phase::finetune);
  commit_task(net, registry, task);
  return accuracy(data, task);
}

double Learner::accuracy(const TaskDataset& data, TaskId task) const {
  return evaluate(net, data, registry.mask(task), task);
}

Tensor Learner::logits(const TaskDataset& data, TaskId task) const {
  return task_logits(net, data, registry.mask(task), task);
}

ExperimentResult run_two_task(const TaskSequence& seq, std::size_t alpha, std::size_t beta,
                              const ProtocolConfig& cfg, std::uint64_t seed) {
  const auto start = std::chrono::steady_clock::now();
  if (alpha == beta) throw ParameterError("two-task protocol needs distinct tasks");
  const TaskDataset& da = task_at(seq, alpha);
  const TaskDataset& db = task_at(seq, beta);
  const TaskId a = id_of(alpha), b = id_of(beta);

  ExperimentResult r;
  r.protocol = "two_task";
  r.seed = seed;
  r.tasks = {a, b};
  r.decision = "share";

  Learner l(seq.sample_shape, cfg, seed);
  r.executed[a] = {};
  record_completion(r, l, da, a, l.learn(da, a, {}, &r.warnings));

  std::optional<Learner> solo;
  if (cfg.fkt) solo = l;

  const std::map<TaskId, Decision> share{{a, Decision::included}};
  r.executed[b] = share;
  const double acc = l.learn(db, b, share, &r.warnings);
  record_completion(r, l, db, b, acc);

  // S_alpha is frozen, so its activations on beta's data do not depend on
  // whether they are taken before or after training beta.
  const ActivationCapture cap = capture(l.net, db, l.net.full_gate());
  UsefulnessReport rep = usefulness_report(cap, l.registry, a, b, cfg.squared);
  if (solo) {
    const double acc_solo = solo->learn(db, b, {{a, Decision::omitted}}, &r.warnings);
    rep.fkt = fkt(acc, acc_solo);
    r.fkt = rep.fkt;
  }
  r.activation = rep.activation;
  r.connectivity = rep.connectivity;
  r.decision_points.push_back({b, share, {rep}});
  r.task_acc = {{b, acc}};
  record_final(r, l, seq);
  finish(r, start);
  return r;
}

ExperimentResult run_three_task(const TaskSequence& seq, std::size_t alpha, std::size_t beta,
                                std::size_t gamma, ThreeTaskDecision decision,
                                const ProtocolConfig& cfg, std::uint64_t seed) {
  const auto start = std::chrono::steady_clock::now();
  if (alpha == beta || alpha == gamma || beta == gamma) {
    throw ParameterError("three-task protocol needs pairwise distinct tasks");
  }
  const TaskDataset& da = task_at(seq, alpha);
  const TaskDataset& db = task_at(seq, beta);
  const TaskDataset& dg = task_at(seq, gamma);
  const TaskId a = id_of(alpha), b = id_of(beta), g = id_of(gamma);

  ExperimentResult r;
  r.protocol = "three_task";
  r.seed = seed;
  r.tasks = {a, b, g};
  r.decision = to_string(decision);

  Learner l(seq.sample_shape, cfg, seed);
  r.executed[a] = {};
  record_completion(r, l, da, a, l.learn(da, a, {}, &r.warnings));

  const std::map<TaskId, Decision> for_beta{{a, Decision::omitted}};
  r.executed[b] = for_beta;
  record_completion(r, l, db, b, l.learn(db, b, for_beta, &r.warnings));

  std::map<TaskId, Decision> for_gamma{{a, Decision::included}, {b, Decision::included}};
  if (decision == ThreeTaskDecision::omit_beta) for_gamma[b] = Decision::omitted;
  if (decision == ThreeTaskDecision::omit_alpha) for_gamma[a] = Decision::omitted;

  const ActivationCapture cap = capture(l.net, dg, l.net.full_gate());
  DecisionPoint dp{g, for_gamma, {}};
  for (TaskId src : {a, b}) dp.reports.push_back(usefulness_report(cap, l.registry, src, g, cfg.squared));

  r.executed[g] = for_gamma;
  const double acc = l.learn(dg, g, for_gamma, &r.warnings);
  record_completion(r, l, dg, g, acc);
  r.decision_points.push_back(std::move(dp));
  r.task_acc = {{g, acc}};
  record_final(r, l, seq);
  finish(r, start);
  return r;
}

ExperimentResult run_sequence(const TaskSequence& seq, const SharingStrategy& strategy,
                              const ProtocolConfig& cfg, std::uint64_t seed) {
  const auto start = std::chrono::steady_clock::now();
  if (seq.size() == 0) throw SequenceError("empty task sequence");
  strategy.validate();

  ExperimentResult r;
  r.protocol = "sequence";
  r.seed = seed;
  r.decision = to_string(strategy.kind);

  Learner l(seq.sample_shape, cfg, seed);
  for (std::size_t pos = 1; pos <= seq.size(); ++pos) {
    const TaskDataset& data = task_at(seq, pos);
    const TaskId t = id_of(pos);
    r.tasks.push_back(t);

    std::map<TaskId, Decision> decisions;
    if (!l.registry.tasks().empty()) {
      const ActivationCapture cap = capture(l.net, data, l.net.full_gate());
      DecisionPoint dp{t, {}, {}};
      std::map<TaskId, double> scores;
      for (TaskId src : l.registry.tasks()) {
        dp.reports.push_back(usefulness_report(cap, l.registry, src, t, cfg.squared));
        scores[src] = dp.reports.back().connectivity;
      }
      decisions = decide_sharing(strategy, scores, l.registry, t);
      dp.decisions = decisions;
      r.decision_points.push_back(std::move(dp));
    }
    r.executed[t] = decisions;
    record_completion(r, l, data, t, l.learn(data, t, decisions, &r.warnings));
  }
  for (TaskId t : r.tasks) {
    r.task_acc.emplace_back(t, l.accuracy(task_at(seq, static_cast<std::size_t>(to_int(t))), t));
  }
  record_final(r, l, seq);
  finish(r, start);
  return r;
}

}  // namespace fktlab
