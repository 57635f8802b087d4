#pragma once

#include <cstdint>
#include <vector>

#include "commlearn/rng.hpp"
#include "commlearn/tensor.hpp"

namespace commlearn {

enum class ArchKind { linear_toy, mlp2, mlp3, cnn3 };

const char* arch_kind_name(ArchKind kind);
ArchKind arch_kind_from_name(const std::string& name);

// Optimizee architecture. mlp2/mlp3 are fully connected nets with two/three
// ReLU hidden layers of hidden_width nodes. cnn3 is three 3x3 same-padding
// conv layers (hidden_width channels at stride 2, then 2*hidden_width at
// stride 1 twice) with ReLU, flattened into a linear classifier head; the
// default hidden_width of 32 gives the 32/64/64 channel stack.
struct ArchSpec {
  ArchKind kind = ArchKind::mlp2;
  std::vector<std::int64_t> input_shape;  // e.g. {28, 28, 1} or {16}
  int num_classes = 0;
  int hidden_width = 128;

  static ArchSpec linear_toy(std::vector<std::int64_t> input, int classes);
  static ArchSpec mlp2(std::vector<std::int64_t> input, int classes, int width = 128);
  static ArchSpec mlp3(std::vector<std::int64_t> input, int classes, int width = 128);
  static ArchSpec cnn3(std::vector<std::int64_t> input, int classes, int base_channels = 32);

  std::int64_t input_size() const;
  void validate() const;
};

struct Batch {
  Tensor inputs;            // [B, ...input dims]
  std::vector<int> labels;  // values in [0, num_classes)

  std::int64_t batch_size() const { return static_cast<std::int64_t>(labels.size()); }
};

// Deterministic in (arch, seed). Weights are truncated-normal with
// std = sqrt(1/fan_in), biases zero.
ModelParams init_params(const ArchSpec& arch, std::uint64_t seed);

// Mean softmax cross-entropy over the batch plus its exact reverse-mode
// gradient. Loss reductions accumulate in double; softmax subtracts the
// row max before exponentiating.
struct LossAndGrad {
  double loss;
  ModelParams grads;
};
LossAndGrad loss_and_grad(const ArchSpec& arch, const ModelParams& params, const Batch& batch);
double loss_only(const ArchSpec& arch, const ModelParams& params, const Batch& batch);

// Spatial output size of a same-padded conv layer: ceil(in / stride).
std::int64_t conv_same_out_dim(std::int64_t in, int stride);

}  // namespace commlearn
