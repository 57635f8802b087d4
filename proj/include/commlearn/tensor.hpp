#pragma once

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "commlearn/errors.hpp"

namespace commlearn {

// Dense row-major tensor of doubles. Values are expected to stay finite; the
// training loops treat NaN/Inf as a divergence condition.
struct Tensor {
  std::vector<std::int64_t> shape;
  std::vector<double> data;

  Tensor() = default;
  Tensor(std::vector<std::int64_t> shape_, std::vector<double> data_);

  static Tensor zeros(std::vector<std::int64_t> shape);
  static Tensor full(std::vector<std::int64_t> shape, double value);

  std::int64_t size() const { return static_cast<std::int64_t>(data.size()); }
  bool same_shape(const Tensor& other) const { return shape == other.shape; }
  bool all_finite() const;
};

std::int64_t shape_size(const std::vector<std::int64_t>& shape);
std::string shape_to_string(const std::vector<std::int64_t>& shape);

// Folding rule for per-tensor row/column statistics: rank >= 2 folds to
// (prod of leading dims) x (last dim); rank 1 is treated as (n x 1).
std::pair<std::int64_t, std::int64_t> folded_dims(const std::vector<std::int64_t>& shape);

struct NamedTensor {
  std::string name;
  Tensor tensor;
};

// Ordered parameter list of an optimizee network. Order and shapes are a pure
// function of the architecture, so two instances combine elementwise.
using ModelParams = std::vector<NamedTensor>;

void check_same_structure(const ModelParams& a, const ModelParams& b, const char* context);

std::int64_t param_count(const ModelParams& p);
ModelParams zeros_like(const ModelParams& p);

// y += alpha * x, elementwise over all tensors.
void axpy(ModelParams& y, double alpha, const ModelParams& x);
void scale(ModelParams& p, double alpha);
// a - b as a new value.
ModelParams subtract(const ModelParams& a, const ModelParams& b);
bool all_finite(const ModelParams& p);
double max_abs_diff(const ModelParams& a, const ModelParams& b);
bool bitwise_equal(const ModelParams& a, const ModelParams& b);

}  // namespace commlearn
