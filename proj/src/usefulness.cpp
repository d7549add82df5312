#include "fktlab/usefulness.hpp"

#include <algorithm>
#include <cmath>

#include "fktlab/errors.hpp"
#include "fktlab/format.hpp"

namespace fktlab {

namespace {

void require_layers(const ActivationCapture& cap, const FilterMask& mask) {
  cap.validate();
  if (mask.layer_count() != cap.layers.size()) {
    throw DimensionError(0, "mask has " + std::to_string(mask.layer_count()) + " layers, capture has " +
                                std::to_string(cap.layers.size()));
  }
  for (std::size_t l = 0; l < cap.layers.size(); ++l) {
    if (mask.width(l) != cap.layers[l].row_size()) {
      throw DimensionError(l, "mask width does not match captured filters");
    }
  }
}

}  // namespace

void ActivationCapture::validate() const {
  if (labels.empty()) throw EmptyDatasetError("activation capture has no samples");
  if (class_count < 1) throw ParameterError("activation capture needs at least one class");
  for (std::size_t l = 0; l < layers.size(); ++l) {
    if (layers[l].rank() != 2 || layers[l].rows() != labels.size()) {
      throw DimensionError(l, "captured layer row count differs from label count");
    }
  }
  for (int y : labels) {
    if (y < 0 || y >= class_count) throw ParameterError("label " + std::to_string(y) + " out of range");
  }
}

ActivationCapture capture(const NetworkState& net, const TaskDataset& data, const FilterMask& gate,
                          Split split) {
  const auto idx = data.indices(split);
  if (idx.empty()) throw EmptyDatasetError("no samples in " + data.name);
  ActivationCapture cap;
  cap.layers = capture_activations(net, gather_rows(data.features, idx), gate);
  cap.class_count = data.class_count;
  for (auto i : idx) cap.labels.push_back(data.labels[i]);
  return cap;
}

double activation_score(const ActivationCapture& cap, const FilterMask& mask, bool squared) {
  require_layers(cap, mask);
  const std::size_t n = cap.samples();
  double total = 0.0;
  std::size_t used = 0;
  for (std::size_t l = 0; l < cap.layers.size(); ++l) {
    const auto members = mask.members(l);
    if (members.empty()) continue;
    double layer_sum = 0.0;
    for (std::size_t s = 0; s < n; ++s) {
      double m = 0.0;
      for (auto i : members) {
        const double a = cap.layers[l].at(s, i);
        m += squared ? a * a : a;
      }
      layer_sum += m / static_cast<double>(members.size());
    }
    total += layer_sum / static_cast<double>(n);
    ++used;
  }
  if (used == 0) throw EmptySubnetworkError("subnetwork has no member filters");
  return total / static_cast<double>(used);
}

double pearson(std::span<const double> x, std::span<const double> y) {
  if (x.size() != y.size() || x.empty()) throw ParameterError("pearson needs equal nonempty series");
  const double n = static_cast<double>(x.size());
  double mx = 0.0, my = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    mx += x[i];
    my += y[i];
  }
  mx /= n;
  my /= n;
  double sxy = 0.0, sxx = 0.0, syy = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double dx = x[i] - mx, dy = y[i] - my;
    sxy += dx * dy;
    sxx += dx * dx;
    syy += dy * dy;
  }
  if (sxx == 0.0 || syy == 0.0) return 0.0;
  return std::clamp(sxy / std::sqrt(sxx * syy), -1.0, 1.0);
}

Connectivity connectivity_score(const ActivationCapture& cap, const FilterMask& mask,
                                ConnectivityOptions opts) {
  require_layers(cap, mask);
  std::vector<std::vector<std::size_t>> by_class(static_cast<std::size_t>(cap.class_count));
  for (std::size_t s = 0; s < cap.samples(); ++s) by_class[static_cast<std::size_t>(cap.labels[s])].push_back(s);
  std::vector<std::size_t> present;
  for (std::size_t c = 0; c < by_class.size(); ++c) {
    if (by_class[c].empty()) continue;
    if (by_class[c].size() < 2) throw InsufficientSamplesError(static_cast<int>(c), by_class[c].size());
    present.push_back(c);
  }

  // Column of filter f in layer l restricted to class c.
  auto column = [&](std::size_t l, std::size_t f, std::size_t c) {
    std::vector<double> v;
    v.reserve(by_class[c].size());
    for (auto s : by_class[c]) v.push_back(cap.layers[l].at(s, f));
    return v;
  };

  Connectivity out;
  double total = 0.0;
  std::size_t used = 0;
  for (std::size_t l = 0; l + 1 < cap.layers.size(); ++l) {
    const auto I = mask.members(l);
    const auto J = mask.members(l + 1);
    if (I.empty() || J.empty()) {
      out.layer_rho.push_back(std::nullopt);
      continue;
    }
    std::vector<std::vector<std::vector<double>>> ci, cj;  // [class][filter][sample]
    for (auto c : present) {
      ci.emplace_back();
      cj.emplace_back();
      for (auto i : I) ci.back().push_back(column(l, i, c));
      for (auto j : J) cj.back().push_back(column(l + 1, j, c));
    }
    double sum = 0.0;
    for (std::size_t a = 0; a < I.size(); ++a) {
      for (std::size_t b = 0; b < J.size(); ++b) {
        double acc = 0.0;
        for (std::size_t k = 0; k < present.size(); ++k) {
          const double r = pearson(ci[k][a], cj[k][b]);
          acc += (opts.squared && opts.order == ClassOrder::square_then_average) ? r * r : r;
        }
        double v = acc / static_cast<double>(present.size());
        if (opts.squared && opts.order == ClassOrder::average_then_square) v = v * v;
        sum += v;
      }
    }
    const double rho = sum / static_cast<double>(I.size() * J.size());
    out.layer_rho.push_back(rho);
    total += rho;
    ++used;
  }
  if (used == 0) {
    throw EmptySubnetworkError("subnetwork has no pair of consecutive layers with members");
  }
  out.score = total / static_cast<double>(used);
  return out;
}

Connectivity connectivity_score(const ActivationCapture& cap, const SubnetworkRegistry& registry,
                                TaskId source, ConnectivityOptions opts) {
  return connectivity_score(cap, registry.mask(source), opts);
}

double fkt(double acc_shared, double acc_solo) {
  auto ok = [](double a) { return a >= 0.0 && a <= 1.0; };
  if (!ok(acc_shared) || !ok(acc_solo)) throw ParameterError("accuracies must lie in [0, 1]");
  return acc_shared - acc_solo;
}

UsefulnessReport usefulness_report(const ActivationCapture& cap, const SubnetworkRegistry& registry,
                                   TaskId source, TaskId target, bool squared) {
  const FilterMask& m = registry.mask(source);
  const auto conn = connectivity_score(cap, m, {squared, ClassOrder::square_then_average});
  UsefulnessReport r;
  r.source = source;
  r.target = target;
  r.activation = activation_score(cap, m, squared);
  r.layer_rho = conn.layer_rho;
  r.connectivity = conn.score;
  return r;
}

std::string usefulness_csv_header(std::size_t layer_pairs) {
  std::string s = "source,target,A,P";
  for (std::size_t l = 0; l < layer_pairs; ++l) s += ",layer" + std::to_string(l);
  return s + ",fkt";
}

std::string usefulness_csv_row(const UsefulnessReport& r, std::size_t layer_pairs) {
  std::string s = to_string(r.source) + "," + to_string(r.target) + "," + format_double(r.activation) +
                  "," + format_double(r.connectivity);
  for (std::size_t l = 0; l < layer_pairs; ++l) {
    s += ",";
    if (l < r.layer_rho.size() && r.layer_rho[l]) s += format_double(*r.layer_rho[l]);
  }
  s += ",";
  if (r.fkt) s += format_double(*r.fkt);
  return s;
}

}  // namespace fktlab
