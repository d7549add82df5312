#include "fktlab/dataset.hpp"

#include <algorithm>
#include <cmath>

#include "fktlab/errors.hpp"

namespace fktlab {

Shape TaskDataset::sample_shape() const {
  const Shape& s = features.shape();
  return Shape(s.begin() + 1, s.end());
}

std::vector<std::size_t> TaskDataset::indices(Split split) const {
  switch (split) {
    case Split::train:
      return train_idx;
    case Split::test:
      return test_idx;
    case Split::all:
      break;
  }
  std::vector<std::size_t> all(size());
  for (std::size_t i = 0; i < all.size(); ++i) all[i] = i;
  return all;
}

void TaskDataset::validate() const {
  if (labels.empty()) throw EmptyDatasetError("dataset '" + name + "' is empty");
  if (features.rank() < 2 || features.rows() != labels.size()) {
    throw ConsistencyError("dataset '" + name + "': feature rows do not match label count");
  }
  if (class_count < 1) throw ConsistencyError("dataset '" + name + "': class_count must be positive");
  for (int y : labels) {
    if (y < 0 || y >= class_count) {
      throw ConsistencyError("dataset '" + name + "': label " + std::to_string(y) +
                             " outside [0, " + std::to_string(class_count) + ")");
    }
  }
  for (double v : features.data()) {
    if (!std::isfinite(v)) throw ConsistencyError("dataset '" + name + "': non-finite feature value");
  }
  std::vector<int> seen(size(), 0);
  for (auto i : train_idx) {
    if (i >= size() || seen[i]++) throw ConsistencyError("dataset '" + name + "': bad train index");
  }
  for (auto i : test_idx) {
    if (i >= size() || seen[i]++) throw ConsistencyError("dataset '" + name + "': bad test index");
  }
  if (std::find(seen.begin(), seen.end(), 0) != seen.end()) {
    throw ConsistencyError("dataset '" + name + "': train/test split does not cover all samples");
  }
  std::vector<int> per_class(static_cast<std::size_t>(class_count), 0);
  for (auto i : train_idx) ++per_class[static_cast<std::size_t>(labels[i])];
  for (int c = 0; c < class_count; ++c) {
    if (per_class[static_cast<std::size_t>(c)] == 0) {
      throw ConsistencyError("dataset '" + name + "': class " + std::to_string(c) +
                             " has no training sample");
    }
  }
}

void assign_stratified_split(TaskDataset& data, double test_fraction) {
  if (!(test_fraction >= 0.0 && test_fraction < 1.0)) {
    throw ParameterError("test fraction must be in [0, 1)");
  }
  std::vector<std::vector<std::size_t>> by_class(static_cast<std::size_t>(data.class_count));
  for (std::size_t i = 0; i < data.size(); ++i) {
    by_class.at(static_cast<std::size_t>(data.labels[i])).push_back(i);
  }
  data.train_idx.clear();
  data.test_idx.clear();
  for (const auto& members : by_class) {
    const auto n = members.size();
    auto n_train = static_cast<std::size_t>(std::ceil((1.0 - test_fraction) * static_cast<double>(n)));
    n_train = std::clamp<std::size_t>(n_train, std::min<std::size_t>(n, 1), n);
    for (std::size_t j = 0; j < n; ++j) {
      (j < n_train ? data.train_idx : data.test_idx).push_back(members[j]);
    }
  }
  std::sort(data.train_idx.begin(), data.train_idx.end());
  std::sort(data.test_idx.begin(), data.test_idx.end());
}

Batch make_batch(const TaskDataset& data, const std::vector<std::size_t>& rows) {
  Batch b{gather_rows(data.features, rows), {}};
  b.labels.reserve(rows.size());
  for (auto r : rows) b.labels.push_back(data.labels[r]);
  return b;
}

}  // namespace fktlab
