// Acceptance suite: one PASS/FAIL line per criterion.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <numeric>
#include <sstream>
#include <string>
#include <vector>

#include "fktlab/cli.hpp"
#include "fktlab/errors.hpp"
#include "fktlab/mask_io.hpp"
#include "fktlab/masks.hpp"
#include "fktlab/protocols.hpp"
#include "fktlab/taskgen.hpp"
#include "fktlab/usefulness.hpp"
#include "score_oracles.hpp"
#include "test_support.hpp"

using namespace fktlab;
using namespace fktlab::testing;
namespace fs = std::filesystem;

namespace {

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) {
  return std::chrono::duration<double>(Clock::now() - t0).count();
}

struct Outcome {
  bool pass = false;
  std::string detail;
};

std::string fmt(const char* f, double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, f, v);
  return buf;
}

// ---------------------------------------------------------------------------
// Random networks and schedules

struct RandomNet {
  NetworkState net;
  Shape input;
};

// 2-4 trainable layers with 4-16 filters each; about half start with conv layers.
RandomNet random_net(Rng& rng) {
  const std::size_t depth = 2 + rng.below(3);
  std::vector<std::size_t> widths;
  for (std::size_t i = 0; i < depth; ++i) widths.push_back(4 + rng.below(13));
  std::vector<LayerSpec> layers;
  Shape input;
  if (rng.uniform() < 0.5) {
    const std::size_t convs = 1 + rng.below(std::min<std::size_t>(2, depth - 1));
    input = {2, 5, 5};
    std::size_t in = 2;
    for (std::size_t i = 0; i < depth; ++i) {
      if (i < convs) {
        layers.push_back(LayerSpec::conv2d(in, widths[i], 2));
      } else {
        layers.push_back(LayerSpec::dense(in, widths[i]));
      }
      in = widths[i];
    }
  } else {
    const std::size_t in0 = 3 + rng.below(6);
    input = {in0};
    std::size_t in = in0;
    for (auto w : widths) {
      layers.push_back(LayerSpec::dense(in, w));
      in = w;
    }
  }
  return {NetworkState(input, std::move(layers), rng.next()), input};
}

TaskDataset random_data(const Shape& input, int classes, std::size_t per_class, Rng& rng) {
  TaskDataset d;
  d.name = "random";
  d.class_count = classes;
  Shape shape = {per_class * static_cast<std::size_t>(classes)};
  shape.insert(shape.end(), input.begin(), input.end());
  d.features = random_tensor(shape, rng);
  for (std::size_t i = 0; i < shape[0]; ++i) d.labels.push_back(static_cast<int>(i % static_cast<std::size_t>(classes)));
  // A class-dependent shift gives the training something to learn.
  const std::size_t row = d.features.row_size();
  for (std::size_t i = 0; i < shape[0]; ++i) d.features.data()[i * row + static_cast<std::size_t>(d.labels[i]) % row] += 2.0;
  assign_stratified_split(d, 0.25);
  return d;
}

// One task on a raw network: reinit, train under a random share/omit gate,
// prune, freeze, finetune, commit.
void real_task_cycle(NetworkState& net, SubnetworkRegistry& reg, TaskId task, const TaskDataset& data,
                     double k, Rng& rng) {
  reinitialize_pruned(net, reg, rng.next());
  std::map<TaskId, Decision> decisions;
  std::set<TaskId> shared;
  for (TaskId t : reg.tasks()) {
    const bool inc = rng.uniform() < 0.5;
    decisions[t] = inc ? Decision::included : Decision::omitted;
    if (inc) shared.insert(t);
  }
  reg.set_decisions(decisions);
  TrainConfig tc;
  tc.epochs_train = 2;
  tc.epochs_finetune = 1;
  tc.batch_size = 8;
  tc.lr_initial = 0.05;
  tc.seed = rng.next();
  train_task(net, data, task, training_mask(net, reg), effective_gate(reg, decisions, reg.unfrozen()), tc, Phase::train);
  const auto pr = prune_layerwise(net, reg, k, task);
  freeze_task(net, reg, task, pr.kept, shared);
  train_task(net, data, task, finetune_mask(net, reg, task), reg.mask(task), tc, Phase::finetune);
  commit_task(net, reg, task);
}

bool edge_nonzero(const NetworkState& net, std::size_t l, std::size_t g, std::size_t s) {
  const auto e = net.edge_weights(l, g, s);
  return std::any_of(e.begin(), e.end(), [](double v) { return v != 0.0; });
}

bool single(const std::vector<ConstraintViolation>& v, ConstraintViolation::Kind kind, std::size_t l, std::size_t f) {
  return v.size() == 1 && v[0].kind == kind && v[0].layer == l && v[0].filter == f;
}

// ---------------------------------------------------------------------------

Outcome criterion1() {
  const auto t0 = Clock::now();
  Rng rng(101);
  std::size_t clean = 0, violations = 0;
  std::size_t inj_tried[3] = {0, 0, 0}, inj_ok[3] = {0, 0, 0};
  for (int trial = 0; trial < 100; ++trial) {
    auto [net, input] = random_net(rng);
    auto reg = SubnetworkRegistry::for_network(net);
    const int tasks = 2 + static_cast<int>(rng.below(3));
    const double ks[] = {0.3, 0.5, 0.65};
    for (int t = 1; t <= tasks; ++t) {
      const auto data = random_data(input, 2, 8, rng);
      real_task_cycle(net, reg, TaskId{t}, data, ks[rng.below(3)], rng);
    }
    const auto v = validate_constraints(net, reg);
    violations += v.size();
    clean += v.empty();

    // Constraint 1: nudge one committed weight that reads a member (or the input).
    for (TaskId t : reg.tasks()) {
      const auto& rec = reg.record(t);
      bool done = false;
      for (std::size_t l = 0; l < rec.newly_frozen.layer_count() && !done; ++l) {
        for (auto g : rec.newly_frozen.members(l)) {
          std::size_t src = 0;
          if (l > 0) {
            const auto m = rec.mask.members(l - 1);
            if (m.empty()) continue;
            src = m.front();
          }
          NetworkState bad = net;
          const std::size_t per = l == 0 ? 1 : net.trainable_spec(l).fan_in() / net.filter_widths()[l - 1];
          bad.filter_weights(l, g)[src * per] += 1e-9;
          ++inj_tried[0];
          inj_ok[0] += single(validate_constraints(bad, reg), ConstraintViolation::Kind::frozen_modified, l, g);
          done = true;
          break;
        }
      }
      if (done) break;
    }

    // Constraint 2: drop an upstream member that some member reads.
    for (TaskId t : reg.tasks()) {
      const FilterMask& m = reg.mask(t);
      std::optional<std::pair<std::size_t, std::size_t>> target;
      for (std::size_t l = 1; l < m.layer_count() && !target; ++l) {
        for (auto g : m.members(l)) {
          for (auto s : m.members(l - 1)) {
            if (!target && edge_nonzero(net, l, g, s)) target = {l - 1, s};
          }
        }
      }
      if (!target) continue;
      SubnetworkRegistry bad = reg;
      FilterMask broken = m;
      broken.set(target->first, target->second, false);
      bad.overwrite_mask(t, broken);
      ++inj_tried[1];
      inj_ok[1] += single(validate_constraints(net, bad), ConstraintViolation::Kind::missing_dependency,
                          target->first, target->second);
      break;
    }

    // Constraint 3: a nonzero weight from an excluded filter into a frozen one.
    for (TaskId t : reg.tasks()) {
      const auto& rec = reg.record(t);
      std::optional<std::tuple<std::size_t, std::size_t, std::size_t>> edge;
      for (std::size_t l = 1; l < rec.newly_frozen.layer_count() && !edge; ++l) {
        const auto outside = rec.excluded.members(l - 1);
        const auto frozen = rec.newly_frozen.members(l);
        if (!outside.empty() && !frozen.empty()) edge = {l, frozen.front(), outside.front()};
      }
      if (!edge) continue;
      const auto [l, g, s] = *edge;
      NetworkState bad = net;
      bad.edge_weights(l, g, s)[0] = 0.5;
      ++inj_tried[2];
      inj_ok[2] += single(validate_constraints(bad, reg), ConstraintViolation::Kind::dangling_weight, l, g);
      break;
    }
  }
  const double secs = seconds_since(t0);
  Outcome o;
  o.pass = clean == 100 && violations == 0 && secs < 60.0;
  for (int i = 0; i < 3; ++i) o.pass = o.pass && inj_tried[i] > 0 && inj_ok[i] == inj_tried[i];
  o.detail = std::to_string(clean) + "/100 schedules clean; injections detected " + std::to_string(inj_ok[0]) + "/" +
             std::to_string(inj_tried[0]) + " frozen_modified, " + std::to_string(inj_ok[1]) + "/" +
             std::to_string(inj_tried[1]) + " missing_dependency, " + std::to_string(inj_ok[2]) + "/" +
             std::to_string(inj_tried[2]) + " dangling_weight; " + fmt("%.1fs", secs);
  return o;
}

Outcome criterion2() {
  Rng rng(202);
  std::size_t compared = 0, mismatched = 0;
  for (int trial = 0; trial < 20; ++trial) {
    ProtocolConfig cfg;
    const std::size_t depth = 2 + rng.below(2);
    cfg.arch.hidden.clear();
    for (std::size_t i = 0; i < depth; ++i) cfg.arch.hidden.push_back(4 + rng.below(13));
    cfg.arch.normalize = rng.uniform() < 0.5;
    cfg.prune_fraction = 0.3 + 0.4 * rng.uniform();
    cfg.train.epochs_train = 3;
    cfg.train.epochs_finetune = 1;
    cfg.train.batch_size = 8;
    const Shape input = {4 + rng.below(5)};
    Learner learner(input, cfg, rng.next());
    const Tensor probes = random_tensor({16, input[0]}, rng);

    std::map<TaskId, std::vector<Tensor>> at_freeze;
    const int tasks = 3 + static_cast<int>(rng.below(3));
    for (int t = 1; t <= tasks; ++t) {
      std::map<TaskId, Decision> d;
      for (TaskId s : learner.registry.tasks()) d[s] = rng.uniform() < 0.5 ? Decision::included : Decision::omitted;
      learner.learn(random_data(input, 2 + static_cast<int>(rng.below(2)), 10, rng), TaskId{t}, d);
      at_freeze[TaskId{t}] = capture_activations(learner.net, probes, learner.registry.mask(TaskId{t}));
    }
    for (const auto& [t, before] : at_freeze) {
      const auto after = capture_activations(learner.net, probes, learner.registry.mask(t));
      for (std::size_t l = 0; l < before.size(); ++l) {
        ++compared;
        mismatched += !after[l].bit_equal(before[l]);
      }
    }
  }
  return {mismatched == 0 && compared > 0,
          std::to_string(compared - mismatched) + "/" + std::to_string(compared) +
              " frozen layer captures bit-identical on 16 probes over 20 schedules"};
}

Outcome criterion3(const TaskSequence& seq, const ProtocolConfig& cfg) {
  std::vector<ExperimentResult> runs;
  runs.push_back(run_two_task(seq, 2, 6, cfg, 1));
  for (auto d : {ThreeTaskDecision::share_both, ThreeTaskDecision::omit_beta, ThreeTaskDecision::omit_alpha}) {
    runs.push_back(run_three_task(seq, 2, 1, 6, d, cfg, 1));
  }
  for (auto kind : {StrategyKind::share_all, StrategyKind::share_none, StrategyKind::share_lowest,
                    StrategyKind::omit_lowest, StrategyKind::manual}) {
    SharingStrategy s;
    s.kind = kind;
    if (kind == StrategyKind::manual) s.manual_plan = family_plan(seq.families);
    runs.push_back(run_sequence(seq, s, cfg, 1));
  }
  std::size_t checked = 0, bad = 0;
  for (const auto& r : runs) {
    for (const auto& [t, logits] : r.completion_logits) {
      ++checked;
      bad += !logits.bit_equal(r.final_logits.at(t));
    }
    if (r.protocol == "sequence") {
      for (const auto& [t, acc] : r.task_acc) bad += acc != r.completion_acc.at(t);
    }
  }
  return {bad == 0 && checked > 0, std::to_string(checked - bad) + "/" + std::to_string(checked) +
                                       " task logits bit-identical after later training across " +
                                       std::to_string(runs.size()) + " protocol runs"};
}

Outcome criterion4() {
  Rng rng(404);
  const TaskId task{1};
  double worst = 0.0;
  int nets = 0, resampled = 0;
  while (nets < 100) {
    const std::size_t in = 2 + rng.below(5);
    std::vector<LayerSpec> layers;
    std::size_t prev = in;
    for (int l = 0; l < 3; ++l) {
      const std::size_t w = 3 + rng.below(6);
      layers.push_back(LayerSpec::dense(prev, w));
      prev = w;
    }
    NetworkState net({in}, layers, rng.next());
    const int classes = 2 + static_cast<int>(rng.below(3));
    net.add_head(task, classes, rng.next());
    const std::size_t n = 2 + rng.below(4);
    const Tensor batch = random_tensor({n, in}, rng, -2.0, 2.0);
    // Keep every relu pre-activation well away from zero so h cannot cross a kink.
    if (min_relu_margin(net, batch, net.full_gate()) < 1e-2) {
      ++resampled;
      continue;
    }
    std::vector<int> labels;
    for (std::size_t i = 0; i < n; ++i) labels.push_back(static_cast<int>(rng.below(static_cast<std::size_t>(classes))));
    GradCheckOptions opt;
    opt.step = 1e-5;
    worst = std::max(worst, grad_check(net, batch, labels, task, opt).max_rel_error);
    ++nets;
  }
  return {worst <= 1e-4, "max relative error " + fmt("%.3g", worst) + " over 100 nets (" +
                             std::to_string(resampled) + " near-kink draws resampled)"};
}

Outcome criterion5() {
  Rng rng(505);
  double worst = 0.0;
  for (int trial = 0; trial < 100; ++trial) {
    std::vector<std::size_t> widths;
    const std::size_t layers = 2 + rng.below(3);
    for (std::size_t l = 0; l < layers; ++l) widths.push_back(2 + rng.below(7));
    const auto cap = random_capture(widths, 8 + rng.below(8), 2, rng);
    const FilterMask m = random_mask(widths, rng);
    for (bool sq : {true, false}) {
      worst = std::max(worst, std::abs(activation_score(cap, m, sq) - activation_oracle(cap, m, sq)));
      ConnectivityOptions opt;
      opt.squared = sq;
      worst = std::max(worst, std::abs(connectivity_score(cap, m, opt).score - connectivity_oracle(cap, m, sq)));
    }
    ConnectivityOptions other;
    other.order = ClassOrder::average_then_square;
    worst = std::max(worst, std::abs(connectivity_score(cap, m, other).score - connectivity_oracle(cap, m, true, false)));
  }
  return {worst <= 1e-10, "max |score - oracle| " + fmt("%.3g", worst) + " over 100 captures"};
}

Outcome criterion6() {
  Rng rng(606);
  std::size_t layers_checked = 0, failures = 0, weights_scanned = 0;
  for (int trial = 0; trial < 40; ++trial) {
    auto [base, input] = random_net(rng);
    auto base_reg = SubnetworkRegistry::for_network(base);
    const int prior = static_cast<int>(rng.below(3));
    for (int t = 1; t <= prior; ++t) {
      reinitialize_pruned(base, base_reg, rng.next());
      synthetic_task_cycle(base, base_reg, TaskId{t}, {}, 0.5, rng);
    }
    reinitialize_pruned(base, base_reg, rng.next());
    const TaskId task{prior + 1};
    base.add_head(task, 3, rng.next());
    perturb_trainable(base, training_mask(base, base_reg), rng);

    for (double k : {0.0, 0.3, 0.65, 1.0}) {
      NetworkState net = base;
      const auto widths = net.filter_widths();
      const FilterMask& frozen = base_reg.frozen();
      const auto pr = prune_layerwise(net, base_reg, k, task);

      for (std::size_t l = 0; l < widths.size(); ++l) {
        ++layers_checked;
        std::vector<std::pair<double, std::size_t>> norms;
        for (std::size_t f = 0; f < widths[l]; ++f) {
          if (frozen.test(l, f)) continue;
          double n2 = 0;
          for (double v : base.filter_weights(l, f)) n2 += v * v;
          norms.emplace_back(std::sqrt(n2), f);
        }
        std::sort(norms.begin(), norms.end());
        const auto expect_n = static_cast<std::size_t>(std::round(k * static_cast<double>(norms.size())));
        std::vector<std::size_t> expect;
        for (std::size_t j = 0; j < expect_n; ++j) expect.push_back(norms[j].second);
        std::sort(expect.begin(), expect.end());
        bool ok = pr.pruned.members(l) == expect;
        for (auto f : expect) {
          for (double v : net.filter_weights(l, f)) ok = ok && v == 0.0;
        }
        // Downstream scan: every non-frozen weight reading a pruned filter is zero,
        // every frozen weight is untouched.
        if (l + 1 < widths.size()) {
          for (std::size_t g = 0; g < widths[l + 1]; ++g) {
            for (std::size_t s = 0; s < widths[l]; ++s) {
              const auto e = net.edge_weights(l + 1, g, s);
              const auto e0 = base.edge_weights(l + 1, g, s);
              for (std::size_t i = 0; i < e.size(); ++i) {
                ++weights_scanned;
                if (frozen.test(l + 1, g)) {
                  ok = ok && e[i] == e0[i];
                } else if (pr.pruned.test(l, s) || pr.pruned.test(l + 1, g)) {
                  ok = ok && e[i] == 0.0;
                } else {
                  ok = ok && e[i] == e0[i];
                }
              }
            }
          }
        } else {
          const Tensor& hw = net.head(task).weights;
          for (std::size_t c = 0; c < hw.rows(); ++c) {
            for (std::size_t f = 0; f < widths[l]; ++f) {
              ++weights_scanned;
              ok = ok && (pr.pruned.test(l, f) ? hw.at(c, f) == 0.0 : hw.at(c, f) == base.head(task).weights.at(c, f));
            }
          }
        }
        failures += !ok;
      }
    }
  }
  return {failures == 0, std::to_string(layers_checked - failures) + "/" + std::to_string(layers_checked) +
                             " layers exact for k in {0, 0.3, 0.65, 1}; " + std::to_string(weights_scanned) +
                             " downstream weights scanned"};
}

// Spearman correlation with average ranks for ties.
double spearman(const std::vector<double>& x, const std::vector<double>& y) {
  auto ranks = [](const std::vector<double>& v) {
    std::vector<std::size_t> idx(v.size());
    std::iota(idx.begin(), idx.end(), 0);
    std::sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) { return v[a] < v[b]; });
    std::vector<double> r(v.size());
    for (std::size_t i = 0; i < idx.size();) {
      std::size_t j = i;
      while (j + 1 < idx.size() && v[idx[j + 1]] == v[idx[i]]) ++j;
      for (std::size_t k = i; k <= j; ++k) r[idx[k]] = (static_cast<double>(i + j) / 2.0) + 1.0;
      i = j + 1;
    }
    return r;
  };
  const auto rx = ranks(x), ry = ranks(y);
  const double mx = std::accumulate(rx.begin(), rx.end(), 0.0) / static_cast<double>(rx.size());
  const double my = std::accumulate(ry.begin(), ry.end(), 0.0) / static_cast<double>(ry.size());
  double sxy = 0, sxx = 0, syy = 0;
  for (std::size_t i = 0; i < rx.size(); ++i) {
    sxy += (rx[i] - mx) * (ry[i] - my);
    sxx += (rx[i] - mx) * (rx[i] - mx);
    syy += (ry[i] - my) * (ry[i] - my);
  }
  if (sxx == 0 || syy == 0) return 0.0;
  return sxy / std::sqrt(sxx * syy);
}

Outcome criterion7(const TaskSequence& seq, const ProtocolConfig& cfg) {
  const auto t0 = Clock::now();
  const std::size_t beta = 6;
  int strong = 0;
  std::string rhos;
  for (std::uint64_t seed : {1, 2, 3}) {
    std::vector<double> p, acc;
    for (std::size_t alpha : {1, 2, 3, 4}) {
      const auto r = run_two_task(seq, alpha, beta, cfg, seed);
      p.push_back(*r.connectivity);
      acc.push_back(r.task_acc.front().second);
    }
    const double rho = spearman(p, acc);
    strong += rho <= -0.5;
    rhos += (rhos.empty() ? "" : ", ") + fmt("%.2f", rho);
  }
  const double secs = seconds_since(t0);
  return {strong >= 2 && secs < 600.0, "Spearman(P, Acc) per seed [" + rhos + "], " + std::to_string(strong) +
                                           "/3 at or below -0.5; " + fmt("%.1fs", secs)};
}

Outcome criterion8(const TaskSequence& seq, const ProtocolConfig& cfg) {
  // alpha = synth0 and gamma = synth2 share a family; beta = perm0 does not.
  double with_alpha = 0, with_beta = 0;
  for (std::uint64_t seed : {1, 2, 3}) {
    with_alpha += run_three_task(seq, 2, 1, 6, ThreeTaskDecision::omit_beta, cfg, seed).task_acc.front().second;
    with_beta += run_three_task(seq, 2, 1, 6, ThreeTaskDecision::omit_alpha, cfg, seed).task_acc.front().second;
  }
  with_alpha /= 3;
  with_beta /= 3;
  const double gap = 100.0 * (with_alpha - with_beta);
  return {gap >= 1.0, "mean Acc^alpha_gamma " + fmt("%.4f", with_alpha) + " vs Acc^beta_gamma " +
                          fmt("%.4f", with_beta) + " (gap " + fmt("%.2f", gap) + " pp)"};
}

Outcome criterion9(const TaskSequence& seq, const ProtocolConfig& cfg) {
  TaskSequence four;
  four.sample_shape = seq.sample_shape;
  for (std::size_t i = 0; i < 4; ++i) {
    four.tasks.push_back(seq.tasks[i]);
    four.families.push_back(seq.families[i]);
  }
  bool ok = true;
  double worst = INFINITY;
  std::string detail;
  for (std::uint64_t seed : {1, 2, 3}) {
    auto mean_of = [&](StrategyKind kind) {
      SharingStrategy s;
      s.kind = kind;
      if (kind == StrategyKind::manual) s.manual_plan = family_plan(four.families);
      return run_sequence(four, s, cfg, seed).mean_acc;
    };
    const double manual = mean_of(StrategyKind::manual);
    const double best = std::max(mean_of(StrategyKind::share_all), mean_of(StrategyKind::share_lowest));
    const double margin = 100.0 * (manual - best);
    worst = std::min(worst, margin);
    ok = ok && margin >= -1.0;
    detail += (detail.empty() ? "" : ", ") + fmt("%.4f", manual) + " vs " + fmt("%.4f", best);
  }
  return {ok, "manual vs max(share_all, share_lowest) per seed [" + detail + "], worst margin " +
                  fmt("%.2f", worst) + " pp"};
}

Outcome criterion10() {
  std::ifstream in(fs::path(FKTLAB_SOURCE_DIR) / "README.md");
  std::stringstream ss;
  ss << in.rdbuf();
  const std::string readme = ss.str();
  const bool states = readme.find("not reproducible at desk scale") != std::string::npos;
  const bool substitutes = readme.find("trend") != std::string::npos;
  return {states && substitutes, states ? "README states the substitution of trend checks for absolute numbers"
                                        : "README lacks the desk-scale reproducibility statement"};
}

Outcome criterion11() {
  bool ok = true;
  std::string detail;
  const auto dir = fs::temp_directory_path() / "fktlab_acceptance_repro";
  fs::remove_all(dir);
  fs::create_directories(dir);

  const fs::path cfg = fs::path(FKTLAB_SOURCE_DIR) / "configs" / "sequence_explicit.ini";
  auto slurp = [](const fs::path& p) {
    std::ifstream f(p, std::ios::binary);
    std::stringstream s;
    s << f.rdbuf();
    return s.str();
  };
  const auto a = run_config(cfg, dir / "a");
  const auto b = run_config(cfg, dir / "b");
  const bool csv_same = slurp(a.results_csv) == slurp(b.results_csv) && !slurp(a.results_csv).empty();
  ok = ok && csv_same;
  detail += csv_same ? "results.csv byte-identical" : "results.csv differs";

  Rng rng(1111);
  int idx_ok = 0;
  for (int i = 0; i < 10; ++i) {
    TaskDataset d;
    d.name = "rt";
    d.class_count = 2 + static_cast<int>(rng.below(8));
    const std::size_t n = 5 + rng.below(20), r = 1 + rng.below(30), c = 1 + rng.below(30);
    d.features = Tensor({n, 1, r, c});
    for (double& v : d.features.data()) v = static_cast<double>(rng.below(256)) / 255.0;
    for (std::size_t j = 0; j < n; ++j) d.labels.push_back(static_cast<int>(j % static_cast<std::size_t>(d.class_count)));
    write_idx(d, dir / "img", dir / "lab");
    const auto back = load_idx(dir / "img", dir / "lab");
    idx_ok += back.features.bit_equal(d.features) && back.labels == d.labels;
  }
  ok = ok && idx_ok == 10;
  detail += "; IDX " + std::to_string(idx_ok) + "/10";

  int mask_ok = 0;
  for (int i = 0; i < 20; ++i) {
    MaskTable table;
    const std::size_t layers = 1 + rng.below(4);
    std::vector<std::size_t> widths;
    for (std::size_t l = 0; l < layers; ++l) widths.push_back(1 + rng.below(40));
    const int tasks = static_cast<int>(rng.below(5));
    for (int t = 1; t <= tasks; ++t) table[TaskId{t * 3}] = random_mask(widths, rng);
    const auto bytes = encode_masks(table);
    const bool bin = decode_masks(bytes) == table && encode_masks(decode_masks(bytes)) == bytes;
    const bool js = masks_from_json(masks_to_json(table)) == table;
    write_masks(dir / "m.bin", table);
    const bool file = read_masks(dir / "m.bin") == table;
    mask_ok += bin && js && file;
  }
  ok = ok && mask_ok == 20;
  detail += "; mask tables " + std::to_string(mask_ok) + "/20";
  fs::remove_all(dir);
  return {ok, detail};
}

}  // namespace

int main() {
  const auto preset = make_preset("mpc-mini");
  const TaskSequence seq = build_sequence(preset.spec);
  const ProtocolConfig cfg = preset_config(preset);

  const std::vector<std::pair<int, std::function<Outcome()>>> criteria = {
      {1, criterion1},
      {2, criterion2},
      {3, [&] { return criterion3(seq, cfg); }},
      {4, criterion4},
      {5, criterion5},
      {6, criterion6},
      {7, [&] { return criterion7(seq, cfg); }},
      {8, [&] { return criterion8(seq, cfg); }},
      {9, [&] { return criterion9(seq, cfg); }},
      {10, criterion10},
      {11, criterion11},
  };
  int failed = 0;
  for (const auto& [id, run] : criteria) {
    Outcome o;
    try {
      o = run();
    } catch (const std::exception& e) {
      o = {false, std::string("exception: ") + e.what()};
    }
    failed += !o.pass;
    std::printf("criterion %d: %s  %s\n", id, o.pass ? "PASS" : "FAIL", o.detail.c_str());
    std::fflush(stdout);
  }
  return failed == 0 ? 0 : 1;
}
