#pragma once

#include <cstddef>
#include <string>
#include <vector>

#include "fktlab/tensor.hpp"

namespace fktlab {

enum class Split { train, test, all };

// Samples (X_t, Y_t) of one task. features has shape [N, sample dims...];
// labels are in [0, class_count). train_idx and test_idx partition [0, N).
struct TaskDataset {
  std::string name;
  Tensor features;
  std::vector<int> labels;
  int class_count = 0;
  std::vector<std::size_t> train_idx;
  std::vector<std::size_t> test_idx;

  std::size_t size() const noexcept { return labels.size(); }
  Shape sample_shape() const;
  std::vector<std::size_t> indices(Split split) const;

  // Throws ConsistencyError when an invariant does not hold: label range,
  // finite features, split partition, and >= 1 training sample per class.
  void validate() const;
};

// Deterministic per-class split: within each class, in index order, the first
// ceil((1 - test_fraction) * n_c) samples go to training (at least one).
void assign_stratified_split(TaskDataset& data, double test_fraction);

// Batch of the selected rows plus their labels.
struct Batch {
  Tensor inputs;
  std::vector<int> labels;
};
Batch make_batch(const TaskDataset& data, const std::vector<std::size_t>& rows);

}  // namespace fktlab
