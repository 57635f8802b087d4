#pragma once

#include <cstdint>
#include <functional>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "commlearn/local_sim.hpp"

namespace commlearn {

// Named value lists enumerated as a cross product in key order.
struct SweepGrid {
  std::string family;  // sgd | adam | local_sgd | slowmo
  std::vector<std::pair<std::string, std::vector<double>>> values;
};

// Appendix-style default grids: sgd/adam sweep the learning rate, local_sgd
// the local rate, slowmo (gamma, alpha*gamma, beta).
SweepGrid default_grid(const std::string& family);

using HyperPoint = std::map<std::string, double>;

std::vector<HyperPoint> enumerate_grid(const SweepGrid& grid);

struct AggregatedCurve {
  std::vector<double> mean;
  std::vector<double> stderr_;  // sample std / sqrt(n); zeros for n = 1
  int num_seeds = 0;
};

AggregatedCurve aggregate(const std::vector<TrainingCurve>& curves);

// Smallest 1-based round with mean loss <= threshold.
std::optional<std::int64_t> rounds_to_loss(const AggregatedCurve& curve, double threshold);

// Ratio of rounds the reference needs to reach its own minimum mean loss to
// the rounds `other` needs to reach the same value; nullopt when other never
// gets there.
std::optional<double> speedup(const AggregatedCurve& reference, const AggregatedCurve& other);

// Per-seed variant: the threshold is still the reference mean curve's minimum,
// but the ratio is computed against each seed curve of `other` and averaged;
// seeds that never reach the threshold are ignored.
struct PerSeedSpeedup {
  double mean = 0.0;
  double stderr_ = 0.0;
  int seeds_counted = 0;
};
std::optional<PerSeedSpeedup> speedup_per_seed(const AggregatedCurve& reference,
                                               const std::vector<TrainingCurve>& other_curves);

struct SweepPointResult {
  HyperPoint point;
  AggregatedCurve curve;
  double final_mean_loss = 0.0;
  bool diverged = false;
};

struct SweepResult {
  HyperPoint best;
  std::size_t best_index = 0;
  std::vector<SweepPointResult> all;
};

using RunFn = std::function<TrainingCurve(const HyperPoint&, std::uint64_t seed)>;

// Evaluates every grid point across the given seeds, selecting the minimizer
// of the final-round mean loss with ties broken by grid order. Diverged points
// are excluded; if every point diverges a SweepError is thrown. `run` may be
// invoked concurrently and must not share mutable state between calls.
SweepResult sweep(const SweepGrid& grid, const std::vector<std::uint64_t>& seeds,
                  const RunFn& run);

struct OptimizerReport {
  std::string name;
  AggregatedCurve curve;
  std::vector<TrainingCurve> raw;
  HyperPoint hyperparameters;
};

struct BenchReport {
  std::vector<OptimizerReport> optimizers;
  std::string reference;  // optimizer name speedups are measured against
  double loss_threshold = 0.2;
  std::string config_snapshot;
  bool per_seed_speedups = false;
};

struct EmittedFiles {
  std::string curves_csv;
  std::string metrics_json;
  std::string summary_txt;
};

// Writes curves CSV (round,optimizer,loss_mean,loss_stderr), metrics JSON and
// a plain-text summary table. Re-running with the same report is
// byte-identical.
EmittedFiles emit_report(const BenchReport& report, const std::string& out_dir);

std::string curves_to_csv(const BenchReport& report);
std::string metrics_to_json(const BenchReport& report);
std::string summary_table(const BenchReport& report);

}  // namespace commlearn
