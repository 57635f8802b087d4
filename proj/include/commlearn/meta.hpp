#pragma once

#include <cstdint>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "commlearn/global_opt.hpp"
#include "commlearn/local_sim.hpp"

namespace commlearn {

struct TaskSpec {
  const Dataset* dataset = nullptr;
  ArchSpec arch;
  RoundConfig round;
  Split objective = Split::train;
};

struct MetaConfig {
  int steps = 5000;
  int task_batch = 8;   // particles per meta-step; must equal 2 * pes_pairs
  int pes_pairs = 4;    // antithetic pairs per meta-step
  int trunc_min = 100;
  int trunc_max = 1000;
  double pes_sigma = 0.01;
  int segment_len = 10;
  double lr_peak = 3e-3;
  double lr_init = 3e-10;
  double lr_final = 1e-3;
  int warmup = 100;
  double weight_decay = 1e-4;
  int checkpoint_every = 500;

  void validate() const;
};

// Warmup-cosine schedule: linear from lr_init to lr_peak over the first
// `warmup` steps, then cosine from lr_peak down to lr_final at step steps-1.
double lr_schedule(std::int64_t step, const MetaConfig& cfg);

// N = round(exp(uniform(ln trunc_min, ln trunc_max))).
std::int64_t sample_truncation(int trunc_min, int trunc_max, RngStream& stream);

// --- PES ----------------------------------------------------------------------

// One antithetic pair of unroll particles. Both members share episode
// boundaries, task instance, and data streams; xi accumulates the raw
// perturbations applied since the episode started.
struct PesPair {
  std::vector<double> xi;
  std::int64_t rounds_remaining = 0;
  std::int64_t episode = -1;  // -1 means not yet initialized
  bool diverged = false;
};

struct SegmentOutcome {
  double mean_loss = 0.0;
  bool diverged = false;
};

// Domain hook evaluated by the PES estimator. `reset` installs a fresh task
// instance for a pair; `run_segment` advances one antithetic member of the
// pair by `rounds` under the perturbed flat phi and returns the segment's
// mean loss. sign is +1/-1. run_segment may be called concurrently for
// distinct (pair_index, sign) combinations.
class PesProblem {
 public:
  virtual ~PesProblem() = default;
  virtual void reset(int pair_index, std::int64_t episode) = 0;
  virtual SegmentOutcome run_segment(int pair_index, int sign, const std::vector<double>& phi,
                                     std::int64_t rounds) = 0;
};

struct PesStepResult {
  std::vector<double> grad;
  double mean_loss = 0.0;
  int num_diverged = 0;  // pairs flagged diverged this step
};

// One PES meta-step over all pairs: draws a fresh eps per pair, evaluates
// both antithetic members for min(segment_len, remaining) rounds, accumulates
// xi, and averages (L+ - L-) / (2 sigma^2) * xi over pairs. Pairs whose
// episode ends (or that diverged) are reset before their next segment.
PesStepResult pes_gradient(const std::vector<double>& phi, std::vector<PesPair>& pairs,
                           PesProblem& problem, double sigma, std::int64_t segment_len,
                           int trunc_min, int trunc_max, std::uint64_t seed,
                           std::int64_t step_index);

// --- AdamW ----------------------------------------------------------------

struct AdamWState {
  std::vector<double> m;
  std::vector<double> v;
  std::int64_t t = 0;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

void adamw_step(AdamWState& state, std::vector<double>& phi, const std::vector<double>& grad,
                double lr, double weight_decay);

// --- Meta-objective over the real task -----------------------------------------

struct MetaParticle {
  ModelParams w;
  AggregateState u;
  std::int64_t rounds_done = 0;  // rounds advanced within the current episode
};

struct SegmentStreams {
  std::uint64_t seed = 0;
  int pair_index = 0;
  std::int64_t episode = 0;
};

// Advances the particle by `rounds` communication rounds under phi and returns
// the mean over rounds and workers of the loss on fresh minibatches from the
// objective split, evaluated at the post-update weights. On divergence the
// loss is clipped at 20 ln(num_classes) and the outcome is flagged.
SegmentOutcome meta_objective_segment(const OptimizerParams& phi, MetaParticle& particle,
                                      const TaskSpec& task, std::int64_t rounds,
                                      const SegmentStreams& streams);

// --- Meta-training ---------------------------------------------------------

struct MetaLogRow {
  std::int64_t meta_step = 0;
  double lr = 0.0;
  double mean_meta_loss = 0.0;
  int num_diverged = 0;
};

struct MetaTrainResult {
  OptimizerParams phi;
  std::vector<MetaLogRow> log;
};

using MetaCheckpointHook =
    std::function<void(std::int64_t step, const OptimizerParams& phi)>;

// Meta-trains phi with PES + AdamW under the warmup-cosine schedule. Pairs are
// assigned round-robin over the given tasks; every pair samples its own
// initial weights. Aborts with MetaTrainError if every pair in a step
// diverges.
MetaTrainResult meta_train(const MetaConfig& cfg, OptVariant variant,
                           const std::vector<TaskSpec>& tasks, std::uint64_t seed,
                           const MetaCheckpointHook& checkpoint_hook = nullptr);

std::string meta_log_to_csv(const std::vector<MetaLogRow>& log);

}  // namespace commlearn
