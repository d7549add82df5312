#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <set>

#include "fktlab/errors.hpp"
#include "fktlab/mask_io.hpp"
#include "fktlab/masks.hpp"
#include "test_support.hpp"

using namespace fktlab;
using fktlab::testing::make_mlp;
using fktlab::testing::perturb_trainable;
using fktlab::testing::random_tensor;
using fktlab::testing::synthetic_task_cycle;

namespace {

FilterMask random_mask(const std::vector<std::size_t>& widths, Rng& rng, double p = 0.5) {
  FilterMask m(widths, false);
  for (std::size_t l = 0; l < widths.size(); ++l) {
    for (std::size_t f = 0; f < widths[l]; ++f) m.set(l, f, rng.uniform() < p);
  }
  return m;
}

std::vector<double> flat_weights(const NetworkState& net) {
  std::vector<double> out;
  for (const auto& w : net.weights()) out.insert(out.end(), w.data().begin(), w.data().end());
  return out;
}

bool all_zero(std::span<const double> w) {
  return std::all_of(w.begin(), w.end(), [](double v) { return v == 0.0; });
}

// Reachability on the reversed weight graph, written as a plain BFS.
FilterMask reachability_oracle(const NetworkState& net, const FilterMask& seed) {
  const auto widths = net.filter_widths();
  std::vector<std::pair<std::size_t, std::size_t>> queue;
  FilterMask seen(widths, false);
  for (std::size_t l = 0; l < widths.size(); ++l) {
    for (std::size_t f = 0; f < widths[l]; ++f) {
      if (seed.test(l, f)) {
        seen.set(l, f);
        queue.emplace_back(l, f);
      }
    }
  }
  for (std::size_t q = 0; q < queue.size(); ++q) {
    const auto [l, f] = queue[q];
    if (l == 0) continue;
    for (std::size_t s = 0; s < widths[l - 1]; ++s) {
      const auto e = net.edge_weights(l, f, s);
      const bool nz = std::any_of(e.begin(), e.end(), [](double v) { return v != 0.0; });
      if (nz && !seen.test(l - 1, s)) {
        seen.set(l - 1, s);
        queue.emplace_back(l - 1, s);
      }
    }
  }
  return seen;
}

bool net_edge_nonzero(const NetworkState& net, std::size_t l, std::size_t g, std::size_t s) {
  const auto e = net.edge_weights(l, g, s);
  return std::any_of(e.begin(), e.end(), [](double v) { return v != 0.0; });
}

struct TwoTaskState {
  NetworkState net;
  SubnetworkRegistry reg;
};

TwoTaskState two_task_state(std::uint64_t seed, bool share) {
  Rng rng(seed);
  TwoTaskState s{make_mlp({6, 8, 8, 6}, 2, seed), {}};
  s.reg = SubnetworkRegistry::for_network(s.net);
  synthetic_task_cycle(s.net, s.reg, TaskId{1}, {}, 0.5, rng);
  reinitialize_pruned(s.net, s.reg, seed + 1);
  std::set<TaskId> shared;
  if (share) shared.insert(TaskId{1});
  synthetic_task_cycle(s.net, s.reg, TaskId{2}, shared, 0.5, rng);
  return s;
}

}  // namespace

TEST_CASE("prune count rounds half up") {
  CHECK(prune_count(0.65, 100) == 65);
  CHECK(prune_count(0.0, 17) == 0);
  CHECK(prune_count(1.0, 17) == 17);
  CHECK(prune_count(0.5, 3) == 2);
  CHECK(prune_count(0.3, 10) == 3);
}

TEST_CASE("prune with k = 0 changes nothing") {
  auto net = make_mlp({5, 7, 4}, 2, 3);
  auto reg = SubnetworkRegistry::for_network(net);
  const auto before = flat_weights(net);
  const auto r = prune_layerwise(net, reg, 0.0, TaskId{1});
  CHECK(r.pruned.none());
  CHECK(r.kept == FilterMask(net.filter_widths(), true));
  CHECK(flat_weights(net) == before);
}

TEST_CASE("prune rejects fractions outside [0, 1]") {
  auto net = make_mlp({3, 4}, 2, 1);
  auto reg = SubnetworkRegistry::for_network(net);
  CHECK_THROWS_AS(prune_layerwise(net, reg, -0.01), ParameterError);
  CHECK_THROWS_AS(prune_layerwise(net, reg, 1.5), ParameterError);
  CHECK_THROWS_AS(prune_layerwise(net, reg, std::nan("")), ParameterError);
}

TEST_CASE("prune removes the smallest-norm filters and their downstream weights") {
  auto net = make_mlp({4, 10, 5}, 3, 11);
  auto reg = SubnetworkRegistry::for_network(net);
  // Filter f of layer 0 gets L2 norm norms[f].
  const std::vector<double> norms = {7, 3, 10, 1, 5, 9, 2, 8, 4, 6};
  for (std::size_t f = 0; f < 10; ++f) {
    auto w = net.filter_weights(0, f);
    double n2 = 0;
    for (double v : w) n2 += v * v;
    for (double& v : w) v *= norms[f] / std::sqrt(n2);
  }
  // Layer 1 norms are well separated as well.
  for (std::size_t f = 0; f < 5; ++f) {
    for (double& v : net.filter_weights(1, f)) v = (f + 1) * 0.1;
  }
  const auto r = prune_layerwise(net, reg, 0.3, TaskId{1});
  CHECK(r.pruned.members(0) == std::vector<std::size_t>{1, 3, 6});  // norms 3, 1, 2
  CHECK(r.pruned.members(1) == std::vector<std::size_t>{0, 1});      // round(1.5) = 2
  for (auto f : r.pruned.members(0)) CHECK(all_zero(net.filter_weights(0, f)));
  // Full scan: a layer-1 weight is zero iff its row was pruned or it reads a
  // pruned layer-0 filter.
  for (std::size_t g = 0; g < 5; ++g) {
    for (std::size_t s = 0; s < 10; ++s) {
      const bool expect_zero = r.pruned.test(1, g) || r.pruned.test(0, s);
      CHECK((net.edge_weights(1, g, s)[0] == 0.0) == expect_zero);
    }
  }
  const Tensor& hw = net.head(TaskId{1}).weights;
  for (std::size_t c = 0; c < hw.rows(); ++c) {
    for (std::size_t f = 0; f < 5; ++f) CHECK((hw.at(c, f) == 0.0) == r.pruned.test(1, f));
  }
}

TEST_CASE("prune ties go to the lower index and frozen filters are skipped") {
  auto net = make_mlp({2, 6}, 2, 5);
  auto reg = SubnetworkRegistry::for_network(net);
  for (std::size_t f = 0; f < 6; ++f) {
    for (double& v : net.filter_weights(0, f)) v = 1.0;
  }
  FilterMask kept(net.filter_widths(), false);
  kept.set(0, 0);
  kept.set(0, 1);
  freeze_task(net, reg, TaskId{1}, kept, {});
  const auto r = prune_layerwise(net, reg, 0.5, TaskId{2});
  CHECK(r.pruned.members(0) == std::vector<std::size_t>{2, 3});
  CHECK(r.kept.members(0) == std::vector<std::size_t>{4, 5});
  CHECK(net.filter_weights(0, 0)[0] == 1.0);
  CHECK(net.filter_weights(0, 1)[0] == 1.0);
}

TEST_CASE("prune on a fully frozen layer prunes nothing there") {
  auto net = make_mlp({3, 2, 4}, 2, 8);
  auto reg = SubnetworkRegistry::for_network(net);
  FilterMask kept(net.filter_widths(), false);
  kept.set(0, 0);
  kept.set(0, 1);
  freeze_task(net, reg, TaskId{1}, kept, {});
  const auto r = prune_layerwise(net, reg, 0.5, TaskId{2});
  CHECK(r.pruned.count(0) == 0);
  CHECK(r.pruned.count(1) == 2);
}

TEST_CASE("freeze stores kept plus shared masks") {
  auto net = make_mlp({4, 6, 6, 5}, 2, 21);
  auto reg = SubnetworkRegistry::for_network(net);
  Rng rng(4);
  const auto widths = net.filter_widths();
  const FilterMask k1 = random_mask(widths, rng);
  CHECK(freeze_task(net, reg, TaskId{1}, k1, {}) == k1);

  FilterMask k2 = random_mask(widths, rng);
  k2.subtract(reg.frozen());
  const FilterMask& m2 = freeze_task(net, reg, TaskId{2}, k2, {TaskId{1}});
  CHECK(k1.subset_of(m2));
  CHECK(k2.subset_of(m2));

  FilterMask k3 = random_mask(widths, rng);
  k3.subtract(reg.frozen());
  const FilterMask& m3 = freeze_task(net, reg, TaskId{3}, k3, {TaskId{1}, TaskId{2}});
  // |M_3| = |kept| + |M_1 u M_2| - |overlap|, counted by enumeration.
  std::size_t in_union = 0, overlap = 0, expected = 0;
  for (std::size_t l = 0; l < widths.size(); ++l) {
    for (std::size_t f = 0; f < widths[l]; ++f) {
      const bool u = reg.mask(TaskId{1}).test(l, f) || reg.mask(TaskId{2}).test(l, f);
      in_union += u;
      overlap += u && k3.test(l, f);
      expected += u || k3.test(l, f);
    }
  }
  CHECK(m3.count() == k3.count() + in_union - overlap);
  CHECK(m3.count() == expected);
  CHECK(reg.frozen() == (k1 | k2 | k3));
  CHECK(reg.tasks() == std::vector<TaskId>{TaskId{1}, TaskId{2}, TaskId{3}});
  CHECK(reg.embedded_tasks(TaskId{3}) == std::set<TaskId>{TaskId{1}, TaskId{2}});
}

TEST_CASE("freeze errors") {
  auto net = make_mlp({3, 4, 4}, 2, 2);
  auto reg = SubnetworkRegistry::for_network(net);
  FilterMask k(net.filter_widths(), false);
  k.set(0, 1);
  freeze_task(net, reg, TaskId{1}, k, {});
  CHECK_THROWS_AS(freeze_task(net, reg, TaskId{2}, k, {}), FrozenOverlapError);
  FilterMask k2(net.filter_widths(), false);
  k2.set(1, 0);
  CHECK_THROWS_AS(freeze_task(net, reg, TaskId{2}, k2, {TaskId{7}}), UnknownTaskError);
  CHECK_THROWS_AS(freeze_task(net, reg, TaskId{1}, k2, {}), ParameterError);
}

TEST_CASE("freeze cuts inputs from outside the mask") {
  auto net = make_mlp({3, 4, 4}, 2, 9);
  auto reg = SubnetworkRegistry::for_network(net);
  FilterMask k(net.filter_widths(), false);
  k.set(0, 0);
  k.set(1, 2);
  freeze_task(net, reg, TaskId{1}, k, {});
  for (std::size_t s = 0; s < 4; ++s) {
    CHECK((net.edge_weights(1, 2, s)[0] == 0.0) == (s != 0));
  }
  CHECK(!all_zero(net.filter_weights(0, 0)));
}

TEST_CASE("closure of a filter with no nonzero inputs adds nothing") {
  auto net = make_mlp({3, 4, 4}, 2, 6);
  for (double& v : net.filter_weights(1, 3)) v = 0.0;
  FilterMask seed(net.filter_widths(), false);
  seed.set(1, 3);
  CHECK(dependency_closure(net, seed) == seed);
}

TEST_CASE("closure follows a single nonzero path") {
  auto net = make_mlp({3, 4, 4, 4}, 2, 6);
  for (auto& w : net.weights()) w.fill(0.0);
  net.edge_weights(2, 1, 3)[0] = 0.5;
  net.edge_weights(1, 3, 0)[0] = -0.2;
  net.edge_weights(1, 2, 1)[0] = 0.7;  // off the path
  FilterMask seed(net.filter_widths(), false);
  seed.set(2, 1);
  FilterMask want(net.filter_widths(), false);
  want.set(2, 1);
  want.set(1, 3);
  want.set(0, 0);
  CHECK(dependency_closure(net, seed) == want);
  CHECK(reachability_oracle(net, seed) == want);
}

TEST_CASE("closure matches reachability and is idempotent") {
  Rng rng(77);
  for (int trial = 0; trial < 50; ++trial) {
    auto net = make_mlp({3, 5, 6, 4}, 2, 100 + trial);
    for (auto& w : net.weights()) {
      for (double& v : w.data()) {
        if (rng.uniform() < 0.7) v = 0.0;
      }
    }
    const FilterMask seed = random_mask(net.filter_widths(), rng, 0.2);
    const FilterMask c = dependency_closure(net, seed);
    CHECK(seed.subset_of(c));
    CHECK(c == reachability_oracle(net, seed));
    CHECK(dependency_closure(net, c) == c);
  }
}

TEST_CASE("effective gate enumerates included masks") {
  auto net = make_mlp({4, 6, 6}, 2, 31);
  auto reg = SubnetworkRegistry::for_network(net);
  const auto widths = net.filter_widths();
  FilterMask k1(widths, false), k2(widths, false);
  k1.set(0, 0);
  k1.set(1, 0);
  k2.set(0, 1);
  k2.set(1, 1);
  freeze_task(net, reg, TaskId{1}, k1, {});
  freeze_task(net, reg, TaskId{2}, k2, {});
  const FilterMask trainable = reg.unfrozen();

  CHECK(effective_gate(reg, {{TaskId{1}, Decision::omitted}, {TaskId{2}, Decision::omitted}},
                       trainable) == trainable);

  const FilterMask g = effective_gate(
      reg, {{TaskId{1}, Decision::included}, {TaskId{2}, Decision::omitted}}, trainable);
  for (std::size_t l = 0; l < widths.size(); ++l) {
    for (std::size_t f = 0; f < widths[l]; ++f) {
      CHECK(g.test(l, f) == (k1.test(l, f) || trainable.test(l, f)));
    }
  }
  CHECK_THROWS_AS(effective_gate(reg, {{TaskId{1}, Decision::included}}, trainable), ParameterError);
  CHECK_THROWS_AS(effective_gate(reg,
                                 {{TaskId{1}, Decision::included},
                                  {TaskId{2}, Decision::included},
                                  {TaskId{5}, Decision::included}},
                                 trainable),
                  UnknownTaskError);
}

TEST_CASE("omission zeroes activations without touching weights") {
  auto s = two_task_state(41, false);
  const auto before = flat_weights(s.net);
  Rng rng(3);
  const Tensor probe = random_tensor({9, 6}, rng);
  const FilterMask gate = effective_gate(
      s.reg, {{TaskId{1}, Decision::omitted}, {TaskId{2}, Decision::included}}, s.reg.unfrozen());
  const auto cap = capture_activations(s.net, probe, gate);
  const FilterMask only1 = s.reg.mask(TaskId{1});
  for (std::size_t l = 0; l < cap.size(); ++l) {
    for (auto f : only1.members(l)) {
      for (std::size_t n = 0; n < 9; ++n) CHECK(cap[l].at(n, f) == 0.0);
    }
  }
  CHECK(flat_weights(s.net) == before);
}

TEST_CASE("states built by module operations validate clean") {
  for (std::uint64_t seed = 1; seed <= 10; ++seed) {
    for (bool share : {false, true}) {
      auto s = two_task_state(seed, share);
      CHECK(validate_constraints(s.net, s.reg).empty());
      for (TaskId t : s.reg.tasks()) {
        CHECK(dependency_closure(s.net, s.reg.mask(t)) == s.reg.mask(t));
      }
    }
  }
}

TEST_CASE("injected dangling weight is reported once at its target") {
  auto s = two_task_state(5, true);
  const TaskRecord& r2 = s.reg.record(TaskId{2});
  // A frozen layer-1 filter of task 2 and a layer-0 filter outside M_2.
  REQUIRE(!r2.newly_frozen.members(1).empty());
  REQUIRE(!r2.excluded.members(0).empty());
  const std::size_t g = r2.newly_frozen.members(1).front();
  const std::size_t src = r2.excluded.members(0).front();
  s.net.edge_weights(1, g, src)[0] = 0.25;
  const auto v = validate_constraints(s.net, s.reg);
  REQUIRE(v.size() == 1);
  CHECK(v[0].kind == ConstraintViolation::Kind::dangling_weight);
  CHECK(v[0].layer == 1);
  CHECK(v[0].filter == g);
}

TEST_CASE("removing an upstream filter from a mask is a missing dependency") {
  auto s = two_task_state(6, true);
  const FilterMask& m1 = s.reg.mask(TaskId{1});
  // Find a member of layer 1 reading a member of layer 0 via a nonzero weight.
  std::optional<std::size_t> target;
  for (auto g : m1.members(1)) {
    for (auto src : m1.members(0)) {
      if (!target && net_edge_nonzero(s.net, 1, g, src)) target = src;
    }
  }
  REQUIRE(target);
  FilterMask broken = m1;
  broken.set(0, *target, false);
  s.reg.overwrite_mask(TaskId{1}, broken);
  const auto v = validate_constraints(s.net, s.reg);
  REQUIRE(v.size() == 1);
  CHECK(v[0].kind == ConstraintViolation::Kind::missing_dependency);
  CHECK(v[0].layer == 0);
  CHECK(v[0].filter == *target);
}

TEST_CASE("modifying a committed weight is reported once") {
  auto s = two_task_state(7, false);
  const FilterMask& k1 = s.reg.record(TaskId{1}).newly_frozen;
  const std::size_t f = k1.members(0).front();
  s.net.filter_weights(0, f)[1] += 1e-9;
  const auto v = validate_constraints(s.net, s.reg);
  REQUIRE(v.size() == 1);
  CHECK(v[0].kind == ConstraintViolation::Kind::frozen_modified);
  CHECK(v[0].layer == 0);
  CHECK(v[0].filter == f);
}

TEST_CASE("commit seals the head") {
  auto s = two_task_state(8, false);
  CHECK(s.net.head(TaskId{1}).sealed);
  CHECK(s.net.head(TaskId{2}).sealed);
}

TEST_CASE("reinitialization leaves frozen weights alone and respects bounds") {
  auto s = two_task_state(12, false);
  prune_layerwise(s.net, s.reg, 0.5, std::nullopt);
  const auto pruned_state = s.net;
  const std::size_t n = reinitialize_pruned(s.net, s.reg, 99);
  auto again = pruned_state;
  CHECK(reinitialize_pruned(again, s.reg, 99) == n);
  CHECK(flat_weights(again) == flat_weights(s.net));

  const FilterMask& frozen = s.reg.frozen();
  std::size_t redrawn = 0;
  for (std::size_t l = 0; l < s.net.trainable_count(); ++l) {
    const double b = 1.0 / std::sqrt(static_cast<double>(s.net.trainable_spec(l).fan_in()));
    for (std::size_t f = 0; f < frozen.width(l); ++f) {
      const auto w = s.net.filter_weights(l, f);
      const auto old = pruned_state.filter_weights(l, f);
      if (frozen.test(l, f)) {
        CHECK(std::equal(w.begin(), w.end(), old.begin()));
        continue;
      }
      for (std::size_t i = 0; i < w.size(); ++i) {
        if (old[i] != 0.0) {
          CHECK(w[i] == old[i]);
        } else {
          ++redrawn;
          CHECK(std::abs(w[i]) <= b);
        }
      }
    }
  }
  CHECK(redrawn == n);
  CHECK(n > 0);
  CHECK(validate_constraints(s.net, s.reg).empty());
}

TEST_CASE("frozen features survive later tasks bit for bit") {
  Rng rng(19);
  auto net = make_mlp({6, 8, 8, 6}, 2, 19);
  auto reg = SubnetworkRegistry::for_network(net);
  const Tensor probe = random_tensor({16, 6}, rng);
  synthetic_task_cycle(net, reg, TaskId{1}, {}, 0.4, rng);
  const auto at_freeze = capture_activations(net, probe, reg.mask(TaskId{1}));
  const auto logits_before = forward_with_capture(net, probe, reg.mask(TaskId{1}), TaskId{1}).logits;
  for (int t = 2; t <= 4; ++t) {
    reinitialize_pruned(net, reg, 1000 + t);
    std::set<TaskId> shared;
    if (t % 2 == 0) shared.insert(TaskId{t - 1});
    synthetic_task_cycle(net, reg, TaskId{t}, shared, 0.4, rng);
  }
  const auto later = capture_activations(net, probe, reg.mask(TaskId{1}));
  for (auto f_l = std::size_t{0}; f_l < later.size(); ++f_l) {
    for (auto f : reg.mask(TaskId{1}).members(f_l)) {
      for (std::size_t n = 0; n < 16; ++n) CHECK(later[f_l].at(n, f) == at_freeze[f_l].at(n, f));
    }
  }
  CHECK(forward_with_capture(net, probe, reg.mask(TaskId{1}), TaskId{1}).logits.bit_equal(logits_before));
  CHECK(validate_constraints(net, reg).empty());
}

TEST_CASE("trainable masks") {
  auto net = make_mlp({3, 4, 4}, 2, 14);
  auto reg = SubnetworkRegistry::for_network(net);
  FilterMask k(net.filter_widths(), false);
  k.set(0, 1);
  k.set(1, 2);
  freeze_task(net, reg, TaskId{1}, k, {});
  const auto tm = training_mask(net, reg);
  for (std::size_t i = 0; i < 3; ++i) CHECK(tm.layers[0][1 * 3 + i] == 0);
  CHECK(tm.layers[0][0] == 1);
  const auto fm = finetune_mask(net, reg, TaskId{1});
  CHECK(std::count(fm.layers[0].begin(), fm.layers[0].end(), 1) == 3);
  CHECK(std::count(fm.layers[1].begin(), fm.layers[1].end(), 1) == 1);
  CHECK(fm.layers[1][2 * 4 + 1] == 1);
}

TEST_CASE("binary mask encoding is little-endian and bit-packed") {
  MaskTable t;
  t.emplace(TaskId{3}, FilterMask(std::vector<std::vector<std::uint8_t>>{{1, 0, 0, 0, 0, 0, 0, 0, 1}, {0, 1}}));
  const auto bytes = encode_masks(t);
  const std::vector<std::uint8_t> want = {1, 0, 0, 0,  3, 0, 0, 0,  2, 0, 0, 0,  9, 0, 0, 0,
                                          0x01, 0x01, 2, 0, 0, 0, 0x02};
  CHECK(bytes == want);
  CHECK(decode_masks(bytes) == t);
  auto truncated = bytes;
  truncated.pop_back();
  CHECK_THROWS_AS(decode_masks(truncated), FormatError);
  auto trailing = bytes;
  trailing.push_back(0);
  CHECK_THROWS_AS(decode_masks(trailing), FormatError);
  auto padded = bytes;
  padded.at(22) = 0x82;
  CHECK_THROWS_AS(decode_masks(padded), FormatError);
}

TEST_CASE("mask round trips are exact") {
  Rng rng(1234);
  for (int trial = 0; trial < 30; ++trial) {
    MaskTable t;
    const std::size_t layers = 1 + rng.below(4);
    std::vector<std::size_t> widths;
    for (std::size_t l = 0; l < layers; ++l) widths.push_back(1 + rng.below(20));
    const std::size_t tasks = rng.below(5);
    for (std::size_t k = 0; k < tasks; ++k) t.emplace(TaskId{static_cast<int>(k + 1)}, random_mask(widths, rng));
    CHECK(decode_masks(encode_masks(t)) == t);
    CHECK(masks_from_json(nlohmann::json::parse(masks_to_json(t).dump())) == t);
  }
  const auto path = std::filesystem::temp_directory_path() / "fktlab_masks_roundtrip.bin";
  MaskTable t;
  t.emplace(TaskId{1}, random_mask({5, 9, 16}, rng));
  write_masks(path, t);
  CHECK(read_masks(path) == t);
  std::filesystem::remove(path);
}
