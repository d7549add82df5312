#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <variant>
#include <vector>

#include "fktlab/dataset.hpp"
#include "fktlab/tensor.hpp"

namespace fktlab {

inline constexpr std::uint32_t kIdxImageMagic = 0x00000803;
inline constexpr std::uint32_t kIdxLabelMagic = 0x00000801;

// IDX image stream -> [N, 1, rows, cols] with bytes scaled to [0, 1].
Tensor parse_idx_images(std::span<const std::uint8_t> bytes);
std::vector<int> parse_idx_labels(std::span<const std::uint8_t> bytes);

// Reads an image/label file pair. Classes are 0..max label; the split is
// stratified with the given test fraction.
TaskDataset load_idx(const std::filesystem::path& images, const std::filesystem::path& labels,
                     double test_fraction = 0.2);

// Writes features (values in [0, 1], rounded to bytes) and labels. Sample
// shape must be [1, rows, cols] or [rows, cols].
void write_idx(const TaskDataset& data, const std::filesystem::path& images,
               const std::filesystem::path& labels);

// Permutation of [0, d) drawn from perm_seed; seed 0 is the identity.
std::vector<std::size_t> pixel_permutation(std::size_t d, std::uint64_t perm_seed);

// Same permutation of the flattened sample applied to every sample.
TaskDataset permute_task(const TaskDataset& base, std::uint64_t perm_seed);

struct SynthSpec {
  std::size_t dim = 16;
  int classes = 4;
  double similarity = 0.5;  // weight of the anchor means, in [0, 1]
  double noise = 0.5;       // isotropic Gaussian sigma
  std::size_t samples = 400;
  std::uint64_t seed = 1;         // task-private means and sample draws
  std::uint64_t anchor_seed = 0;  // means shared by every task with this anchor
  // Per-sample Gaussian shift along one unit direction drawn from anchor_seed;
  // tasks with the same anchor share the direction.
  double nuisance = 0.0;
  double test_fraction = 0.25;
  std::optional<Shape> shape;  // sample shape, volume dim; default [dim]
};

// [classes x dim] class means s * a_c + (1 - s) * b_c.
Tensor synth_class_means(const SynthSpec& spec);
TaskDataset synth_task(const SynthSpec& spec);

struct IdxSource {
  std::filesystem::path images;
  std::filesystem::path labels;
  double test_fraction = 0.2;
};
using BaseSource = std::variant<IdxSource, SynthSpec>;
struct PermutedSource {
  BaseSource base;
  std::uint64_t perm_seed = 0;
};
using TaskSource = std::variant<IdxSource, SynthSpec, PermutedSource>;

struct TaskDescriptor {
  std::string name;
  std::string family;  // free-form grouping label used by presets
  TaskSource source;
};

struct SequenceSpec {
  std::vector<TaskDescriptor> tasks;
  std::optional<Shape> common_shape;
};

struct TaskSequence {
  std::vector<TaskDataset> tasks;
  std::vector<std::string> families;
  Shape sample_shape;

  std::size_t size() const { return tasks.size(); }
};

// Nearest-neighbour resize of every sample's trailing two axes to the
// trailing two axes of target (leading axes must agree).
TaskDataset resize_nearest(const TaskDataset& data, const Shape& target);

TaskDataset materialize(const TaskDescriptor& d);
TaskSequence build_sequence(const SequenceSpec& spec);

struct Preset {
  std::string name;
  std::string description;
  SequenceSpec spec;
  std::vector<std::size_t> hidden;  // dense hidden widths used by default
  bool normalize = true;            // batch normalization after each hidden layer
  std::size_t batch_size = 32;
};

std::vector<std::string> preset_names();
// data_seed shifts every generator seed of the preset; 0 gives the reference data.
Preset make_preset(const std::string& name, std::uint64_t data_seed = 0);

}  // namespace fktlab
