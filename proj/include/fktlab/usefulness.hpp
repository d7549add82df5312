#pragma once

#include <optional>
#include <string>
#include <vector>

#include "fktlab/dataset.hpp"
#include "fktlab/filter_mask.hpp"
#include "fktlab/masks.hpp"
#include "fktlab/network.hpp"
#include "fktlab/tensor.hpp"

namespace fktlab {

// Pooled activations of every trainable layer on one task's samples.
struct ActivationCapture {
  std::vector<Tensor> layers;  // [N x filters] per trainable layer
  std::vector<int> labels;
  int class_count = 0;

  std::size_t samples() const { return labels.size(); }
  void validate() const;
};

ActivationCapture capture(const NetworkState& net, const TaskDataset& data, const FilterMask& gate,
                          Split split = Split::train);

// Mean over samples and non-empty layers of the per-layer member mean.
double activation_score(const ActivationCapture& cap, const FilterMask& mask, bool squared);

// When per-class correlations are squared relative to the class average.
enum class ClassOrder { square_then_average, average_then_square };

struct ConnectivityOptions {
  bool squared = true;
  ClassOrder order = ClassOrder::square_then_average;
};

struct Connectivity {
  // One entry per consecutive layer pair (l, l+1); empty when either side has
  // no member filters.
  std::vector<std::optional<double>> layer_rho;
  double score = 0.0;
};

// Pearson correlation; 0 when either series has zero variance.
double pearson(std::span<const double> x, std::span<const double> y);

Connectivity connectivity_score(const ActivationCapture& cap, const FilterMask& mask,
                                ConnectivityOptions opts = {});
Connectivity connectivity_score(const ActivationCapture& cap, const SubnetworkRegistry& registry,
                                TaskId source, ConnectivityOptions opts = {});

double fkt(double acc_shared, double acc_solo);

struct UsefulnessReport {
  TaskId source{};
  TaskId target{};
  double activation = 0.0;
  std::vector<std::optional<double>> layer_rho;
  double connectivity = 0.0;
  std::optional<double> fkt;
};

UsefulnessReport usefulness_report(const ActivationCapture& cap, const SubnetworkRegistry& registry,
                                   TaskId source, TaskId target, bool squared);

// source,target,A,P,layer0..layer{pairs-1},fkt
std::string usefulness_csv_header(std::size_t layer_pairs);
std::string usefulness_csv_row(const UsefulnessReport& r, std::size_t layer_pairs);

}  // namespace fktlab
