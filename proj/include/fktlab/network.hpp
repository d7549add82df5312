#pragma once

#include <cstddef>
#include <cstdint>
#include <map>
#include <optional>
#include <span>
#include <vector>

#include "fktlab/dataset.hpp"
#include "fktlab/filter_mask.hpp"
#include "fktlab/tensor.hpp"

namespace fktlab {

enum class LayerKind { dense, conv2d, normalize };
enum class Activation { relu, identity };

// One entry of the layer stack. Dense and conv2d layers are trainable and own
// filters; a normalize layer standardizes the preceding layer's filters over
// the batch (and spatial positions) without any learned parameters.
//
// Conv layers use stride 1 and valid padding. A dense layer that follows a
// conv layer reads the per-filter spatial mean (global average pooling).
struct LayerSpec {
  LayerKind kind = LayerKind::dense;
  std::size_t in_filters = 0;
  std::size_t out_filters = 0;
  std::size_t kernel = 1;
  Activation activation = Activation::relu;

  static LayerSpec dense(std::size_t in, std::size_t out, Activation act = Activation::relu) {
    return {LayerKind::dense, in, out, 1, act};
  }
  static LayerSpec conv2d(std::size_t in, std::size_t out, std::size_t kernel,
                          Activation act = Activation::relu) {
    return {LayerKind::conv2d, in, out, kernel, act};
  }
  static LayerSpec normalize(std::size_t filters, Activation act = Activation::identity) {
    return {LayerKind::normalize, filters, filters, 1, act};
  }

  bool trainable() const noexcept { return kind != LayerKind::normalize; }
  // Weights per output filter.
  std::size_t fan_in() const noexcept {
    return kind == LayerKind::conv2d ? in_filters * kernel * kernel : in_filters;
  }
};

struct TrainConfig {
  std::size_t epochs_train = 30;
  std::size_t epochs_finetune = 10;
  std::size_t batch_size = 64;
  double lr_initial = 0.1;
  double lr_decay_factor = 10.0;
  double lr_floor = 1e-4;
  std::uint64_t seed = 0;

  void validate() const;
};

enum class Phase { train, finetune };

// Learning rate for a 0-based epoch of a phase lasting `epochs` epochs: divided
// by lr_decay_factor at 1/2 and again at 3/4 of the phase, never below
// lr_floor. A zero initial rate stays zero.
double scheduled_lr(const TrainConfig& cfg, std::size_t epoch, std::size_t epochs);

struct Head {
  Tensor weights;  // [classes x feature width]
  bool sealed = false;
};

// Per-weight update permissions, parallel to NetworkState::weights().
struct TrainableMask {
  std::vector<std::vector<std::uint8_t>> layers;
  bool head = true;
};

class NetworkState {
 public:
  NetworkState(Shape input_shape, std::vector<LayerSpec> layers, std::uint64_t seed);

  const Shape& input_shape() const noexcept { return input_shape_; }
  const std::vector<LayerSpec>& layers() const noexcept { return layers_; }
  std::uint64_t seed() const noexcept { return seed_; }

  // Trainable layers are addressed by their rank among dense/conv2d layers.
  std::size_t trainable_count() const noexcept { return trainable_.size(); }
  const LayerSpec& trainable_spec(std::size_t l) const { return layers_.at(trainable_.at(l)); }
  std::size_t stack_index(std::size_t l) const { return trainable_.at(l); }
  std::vector<std::size_t> filter_widths() const;
  std::size_t feature_width() const;

  std::vector<Tensor>& weights() noexcept { return weights_; }
  const std::vector<Tensor>& weights() const noexcept { return weights_; }

  // Incoming weights of filter f in trainable layer l (length fan_in).
  std::span<double> filter_weights(std::size_t l, std::size_t f);
  std::span<const double> filter_weights(std::size_t l, std::size_t f) const;
  // Weights of filter f in layer l that read source filter s of layer l-1 (or
  // input channel s when l == 0): one entry for dense, kernel^2 for conv.
  std::span<double> edge_weights(std::size_t l, std::size_t f, std::size_t s);
  std::span<const double> edge_weights(std::size_t l, std::size_t f, std::size_t s) const;

  bool has_head(TaskId task) const { return heads_.contains(task); }
  const Head& head(TaskId task) const;
  Head& head(TaskId task);
  void add_head(TaskId task, int classes, std::uint64_t seed);
  void seal_head(TaskId task);
  const std::map<TaskId, Head>& heads() const noexcept { return heads_; }

  // Gate with every filter on.
  FilterMask full_gate() const { return FilterMask(filter_widths(), true); }
  // Everything trainable (all weights plus the head).
  TrainableMask all_trainable() const;

 private:
  Shape input_shape_;
  std::vector<LayerSpec> layers_;
  std::vector<std::size_t> trainable_;
  std::vector<Tensor> weights_;
  std::map<TaskId, Head> heads_;
  std::uint64_t seed_;
};

// Uniform in [-1/sqrt(fan_in), 1/sqrt(fan_in)].
double init_bound(std::size_t fan_in);

struct ForwardResult {
  Tensor logits;                 // [N x classes]
  std::vector<Tensor> capture;   // per trainable layer, [N x filters]
};

// Forward pass through the gated network and the head of `task`. Captured
// values are taken at the end of each trainable layer's block (after any
// trailing normalize layers); conv maps are reduced to their spatial mean.
ForwardResult forward_with_capture(const NetworkState& net, const Tensor& batch,
                                   const FilterMask& gate, TaskId task);

// Same capture without evaluating any head.
std::vector<Tensor> capture_activations(const NetworkState& net, const Tensor& batch,
                                        const FilterMask& gate);

enum class LossKind { cross_entropy, squared };

struct Gradients {
  std::vector<Tensor> weights;
  Tensor head;
  double loss = 0.0;
  std::vector<double> sample_losses;
};

Gradients compute_gradients(const NetworkState& net, const Tensor& batch,
                            std::span<const int> labels, TaskId task,
                            const FilterMask& gate, LossKind loss = LossKind::cross_entropy);

struct EpochStats {
  double loss = 0.0;
  double accuracy = 0.0;
  double lr = 0.0;
};

struct TrainingLog {
  std::vector<EpochStats> epochs;
};

// SGD over the training split with cross-entropy loss. Weights whose trainable
// bit is 0 are never written. Creates the task head when missing; a sealed
// head is an error.
TrainingLog train_task(NetworkState& net, const TaskDataset& data, TaskId task,
                       const TrainableMask& trainable, const FilterMask& gate,
                       const TrainConfig& cfg, Phase phase = Phase::train);

// Fraction of rows whose argmax (lowest index on ties) equals the label.
double accuracy_from_logits(const Tensor& logits, std::span<const int> labels);

double evaluate(const NetworkState& net, const TaskDataset& data, const FilterMask& gate,
                TaskId task, Split split = Split::test);

Tensor task_logits(const NetworkState& net, const TaskDataset& data, const FilterMask& gate,
                   TaskId task, Split split = Split::test);

struct GradCheckOptions {
  std::optional<TrainableMask> trainable;
  std::optional<FilterMask> gate;
  LossKind loss = LossKind::cross_entropy;
  double step = 1e-5;
};

struct GradCheckResult {
  double max_rel_error = 0.0;
  Gradients analytic;  // masked: entries with trainable bit 0 are exactly 0
};

// Compares analytic gradients against central finite differences over every
// trainable weight: max |g - g_fd| / max(1, |g_fd|).
GradCheckResult grad_check(const NetworkState& net, const Tensor& batch,
                           std::span<const int> labels, TaskId task,
                           const GradCheckOptions& options = {});

// Smallest |pre-activation| over gated-on relu units; callers resample inputs
// when this is close to a kink.
double min_relu_margin(const NetworkState& net, const Tensor& batch, const FilterMask& gate);

}  // namespace fktlab
