#pragma once

#include <array>
#include <cstdint>
#include <memory>
#include <string>
#include <vector>

#include "commlearn/features.hpp"
#include "commlearn/local_sim.hpp"
#include "commlearn/tensor.hpp"

namespace commlearn {

enum class OptVariant { lopt_a, lagg_a, lopt_plain, lagg_plain };

const char* variant_name(OptVariant v);
OptVariant variant_from_name(const std::string& name);
bool variant_uses_ada(OptVariant v);
bool variant_is_worker_aware(OptVariant v);

struct MlpLayer {
  int in = 0;
  int out = 0;
  std::vector<double> weights;  // row-major in x out
  std::vector<double> biases;   // out
};

// Per-parameter 2-hidden-layer, 32-unit ReLU MLP mapping n_in features to
// (d_p, m_p). Plus the seven learnable decay coefficients (raw, pre-sigmoid)
// and the fixed update-rule constants lambda1 = lambda2 = 0.001.
struct OptimizerParams {
  OptVariant variant = OptVariant::lopt_a;
  int workers = 0;  // K; required for the worker-aware variants
  std::array<MlpLayer, 3> mlp;
  std::array<double, 7> betas_raw = default_betas_raw();
  double lambda1 = 1e-3;
  double lambda2 = 1e-3;

  int input_width() const;
  std::int64_t mlp_param_count() const;
  std::int64_t flat_size() const;  // MLP params + 7 raw betas

  // Flat layout: layer weights then biases, in layer order, then betas_raw.
  std::vector<double> to_flat() const;
  void from_flat(const std::vector<double>& flat);

  void validate() const;
};

inline constexpr int kOptHiddenWidth = 32;
inline constexpr int kOptOutputs = 2;  // (d_p, m_p)

int variant_input_width(OptVariant v, int workers);

// Zero MLP weights: the optimizer is an exact identity update.
OptimizerParams make_optimizer(OptVariant v, int workers = 0);
// Truncated-normal hidden layers, zero output layer; still an identity update
// at the starting point, but perturbations produce gradients.
OptimizerParams init_optimizer(OptVariant v, int workers, std::uint64_t seed);

// Per-parameter update directives produced by the MLP.
struct UpdateDirective {
  ModelParams d;  // directions
  ModelParams m;  // magnitudes
};

// Runs the MLP row-wise over per-parameter feature rows. Block shapes must
// match the model; row width must equal input_width().
UpdateDirective mlp_forward(const OptimizerParams& phi, const FeatureMatrix& inputs,
                            const ModelParams& like);

// p <- p - lambda1 * d * exp(lambda2 * m), elementwise.
ModelParams apply_learned(const ModelParams& w, const UpdateDirective& dir, double lambda1,
                          double lambda2);

// Local SGD branch: w' = w - mean_k(delta^(k)).
ModelParams apply_average(const ModelParams& w, const WorkerDeltas& deltas);

// Server-side momentum. The buffer stores gamma * u, so the recursion
//   u' = beta u + delta/gamma,  w' = w - alpha gamma u'
// is computed as buf' = beta buf + delta, w' = w - alpha buf', which is the
// same update and reduces exactly to averaging at (beta=0, alpha=1).
struct SlowMoState {
  ModelParams buffer;  // gamma * u
  double alpha = 1.0;
  double beta = 0.0;
  double gamma = 0.1;
};

SlowMoState init_slowmo(const ArchSpec& arch, double alpha, double beta, double gamma);
ModelParams apply_slowmo(SlowMoState& state, const ModelParams& w, const WorkerDeltas& deltas);

// Full learned-optimizer rounds. Both update the accumulator state, build the
// 38 Ada columns, append the normalized delta column(s), and apply the
// exponential-magnitude update.
ModelParams lopt_a_step(const OptimizerParams& phi, const ModelParams& w, AggregateState& u,
                        const WorkerDeltas& deltas);
ModelParams lagg_a_step(const OptimizerParams& phi, const ModelParams& w, AggregateState& u,
                        const WorkerDeltas& deltas);

// Ablation variants: raw delta columns only, no Ada features, no state.
ModelParams plain_variant_step(const OptimizerParams& phi, const ModelParams& w,
                               const WorkerDeltas& deltas);

// --- GlobalOptimizer adapters for run_training -------------------------------

std::unique_ptr<GlobalOptimizer> make_average_optimizer();
std::unique_ptr<GlobalOptimizer> make_slowmo_optimizer(const ArchSpec& arch, double alpha,
                                                       double beta, double gamma);
std::unique_ptr<GlobalOptimizer> make_learned_optimizer(const OptimizerParams& phi,
                                                        const ArchSpec& arch);

// --- Checkpoint I/O -----------------------------------------------------------

// Versioned JSON document with variant, K, n_in, betas_raw, layer shapes and
// flat weight arrays. Loading validates widths and parameter counts.
std::string checkpoint_to_json(const OptimizerParams& phi);
OptimizerParams checkpoint_from_json(const std::string& text);
void save_checkpoint(const OptimizerParams& phi, const std::string& path);
OptimizerParams load_checkpoint(const std::string& path);

}  // namespace commlearn
