#pragma once

#include <cstdint>
#include <string>

#include "commlearn/nn.hpp"
#include "commlearn/rng.hpp"
#include "commlearn/tensor.hpp"

namespace commlearn {

enum class Split { train, valid, test };

struct SplitRange {
  std::int64_t begin = 0;
  std::int64_t end = 0;
  std::int64_t size() const { return end - begin; }
};

// Inputs are scaled to [0,1]; no mean/std normalization is applied.
struct Dataset {
  Tensor inputs;            // [N, ...dims]
  std::vector<int> labels;  // length N
  int num_classes = 0;
  SplitRange train;
  SplitRange valid;
  SplitRange test;

  std::int64_t num_examples() const { return static_cast<std::int64_t>(labels.size()); }
  const SplitRange& split(Split s) const;
  std::vector<std::int64_t> example_shape() const;  // dims without the leading N
};

struct SyntheticSpec {
  int num_classes = 2;
  int dims = 2;
  int samples_per_class = 100;
  double cluster_std = 0.15;
  std::uint64_t seed = 0;
};

// IDX image/label pair (Fashion-MNIST layout). Accepts gzip-compressed files.
// Carves the trailing 10% of examples into the validation split.
Dataset load_idx_pair(const std::string& images_path, const std::string& labels_path);

// CIFAR-10 binary batches: every data_batch_*.bin in dir (sorted) forms
// train+valid; test_batch.bin, when present, forms the test split. Records are
// 1 label byte + 3072 channel-planar bytes, converted to HWC layout.
Dataset load_cifar_binary(const std::string& dir_path);

// Gaussian clusters, one per class, means inside [0.25, 0.75]^dims and samples
// clamped to [0,1]. Split 80/10/10. Deterministic in spec.seed.
Dataset make_synthetic(const SyntheticSpec& spec);

// Uniform sampling with replacement from the given split.
Batch sample_minibatch(const Dataset& ds, Split split, std::int64_t size, RngStream& stream);

}  // namespace commlearn
