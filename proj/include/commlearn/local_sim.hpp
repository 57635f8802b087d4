#pragma once

#include <cstdint>
#include <memory>
#include <string>
#include <vector>

#include "commlearn/data.hpp"
#include "commlearn/nn.hpp"
#include "commlearn/tensor.hpp"

namespace commlearn {

// Abort threshold for any training loss; above it (or non-finite) a run is
// flagged diverged.
inline constexpr double kDivergenceLossLimit = 1e4;

struct RoundConfig {
  int workers = 1;       // K
  int local_steps = 1;   // H
  double gamma = 0.1;    // local learning rate
  int b_loc = 128;       // local batch size

  std::int64_t effective_batch() const {
    return static_cast<std::int64_t>(workers) * local_steps * b_loc;
  }
  void validate() const;
};

// Per-worker weight deltas for one communication round.
// delta^(k) = w_start - w_end^(k); average is their elementwise mean.
struct WorkerDeltas {
  std::vector<ModelParams> per_worker;
  ModelParams average;

  int workers() const { return static_cast<int>(per_worker.size()); }
};

struct TrainingCurve {
  std::vector<double> losses;  // one entry per communication round, t = 1..T
  std::int64_t comm_rounds = 0;
  std::uint64_t seed = 0;
  std::string optimizer;
  std::string config;
  bool diverged = false;
};

struct TrainTask {
  const Dataset* dataset = nullptr;
  ArchSpec arch;
  RoundConfig round;
};

// Global update strategy applied once per communication round. Implementations
// may be stateful (momentum buffers, optimizer accumulators); a fresh instance
// is used per training run.
class GlobalOptimizer {
 public:
  virtual ~GlobalOptimizer() = default;
  virtual std::string name() const = 0;
  virtual ModelParams step(const ModelParams& w, const WorkerDeltas& deltas) = 0;
};

// One communication round: K workers start from identical w, each takes H
// local SGD steps (w <- w - gamma * grad) on fresh minibatches, and reports
// delta^(k) = w - w_H^(k). Workers run in parallel; RNG paths are keyed by
// (seed, round, worker), so the result is identical to serial execution.
WorkerDeltas local_round(const ArchSpec& arch, const ModelParams& w, const RoundConfig& cfg,
                         const Dataset& ds, std::uint64_t seed, std::int64_t round);

// Runs T communication rounds under the given global optimizer, recording the
// monitoring loss (one fresh train minibatch of size b_loc, evaluated at the
// post-update weights) per round. Divergence yields a partial curve with the
// diverged flag set.
TrainingCurve run_training(const TrainTask& task, GlobalOptimizer& opt, std::int64_t rounds,
                           std::uint64_t seed);

enum class BaselineKind { sgd, adam };

struct BaselineHyper {
  double lr = 0.1;
  double beta1 = 0.9;    // adam only
  double beta2 = 0.999;  // adam only
  double eps = 1e-8;     // adam only
};

// Non-local baseline: per step, one gradient on a batch of K*H*b_loc samples
// and one SGD or Adam update; each step counts as one communication round.
TrainingCurve run_nonlocal_baseline(const TrainTask& task, BaselineKind kind,
                                    const BaselineHyper& hyper, std::int64_t rounds,
                                    std::uint64_t seed);

}  // namespace commlearn
