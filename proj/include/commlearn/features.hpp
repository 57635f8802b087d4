#pragma once

#include <array>
#include <cmath>
#include <cstdint>
#include <vector>

#include "commlearn/nn.hpp"
#include "commlearn/tensor.hpp"

namespace commlearn {

// Epsilon used inside every guarded reciprocal square root and RMS
// normalization.
inline constexpr double kFeatureEps = 1e-8;

inline double guarded_rsqrt(double x) { return 1.0 / std::sqrt(x + kFeatureEps); }

// Decay coefficients beta_1..beta_7, each in (0,1). Stored in phi as
// unconstrained raw values mapped through a sigmoid.
struct DecayCoeffs {
  std::array<double, 7> beta;
};

double sigmoid(double x);
double logit(double p);
DecayCoeffs decay_from_raw(const std::array<double, 7>& raw);

// Raw values whose sigmoid gives {0.1, 0.5, 0.9} for the momentum and
// row/column timescales and 0.999 for the second-moment decay.
std::array<double, 7> default_betas_raw();

// Accumulators tracked across rounds:
//   m_i <- beta_i m_i + (1 - beta_i) delta          (i = 1..3)
//   v   <- beta_4 v + (1 - beta_4) delta^2
//   r_i <- beta_{4+i} r_i + (1 - beta_{4+i}) row_mean(delta^2)
//   c_i <- beta_{4+i} c_i + (1 - beta_{4+i}) col_mean(delta^2)
// Row/column means fold each tensor to 2-D: (prod of leading dims) x (last
// dim); 1-D tensors fold to (n x 1), so their row stats are per-element and
// their column stats are scalars.
struct AggregateState {
  ModelParams m1, m2, m3;
  ModelParams v;
  std::vector<Tensor> r1, r2, r3;  // per tensor, shape (rows)
  std::vector<Tensor> c1, c2, c3;  // per tensor, shape (cols)
  std::int64_t t = 0;
};

AggregateState init_state(const ArchSpec& arch);
AggregateState init_state_like(const ModelParams& params);

void update_state(AggregateState& u, const ModelParams& delta, const DecayCoeffs& betas);

// Fixed column catalog of the 38 shared input features. Delta-based inputs
// (the averaged delta or per-worker deltas) are appended by the optimizer.
enum AdaCol : int {
  kColW = 0,
  kColM1 = 1,          // m1..m3 at 1..3
  kColV = 4,
  kColMOverSqrtV1 = 5, // 5..7
  kColRsqrtV = 8,
  kColDeltaFac1 = 9,   // delta * row_factor_i * col_factor_i, 9..11
  kColRTiled1 = 12,    // 12..14
  kColCTiled1 = 15,    // 15..17
  kColRsqrtR1 = 18,    // 18..20
  kColRsqrtC1 = 21,    // 21..23
  kColMFac1 = 24,      // m_i * row_factor_i * col_factor_i, 24..26
  kColTime1 = 27,      // tanh(t/x), 27..37
  kAdaColumns = 38,
};

inline constexpr std::array<double, 11> kTimestepScales = {
    1, 3, 10, 30, 100, 300, 1000, 3000, 1e4, 3e4, 1e5};
inline constexpr int kNumTimestepFeatures = 11;

// Per-parameter feature rows, one block per parameter tensor.
struct FeatureMatrix {
  struct Block {
    std::int64_t rows = 0;
    int cols = 0;
    std::vector<double> values;  // row-major rows x cols

    double at(std::int64_t r, int c) const { return values[r * cols + c]; }
  };
  std::vector<Block> blocks;
};

// Computes the 38 Ada + timestep columns from (w, u, delta). u must already be
// updated for the current round; timestep features use u.t.
FeatureMatrix compute_features(const ModelParams& w, const AggregateState& u,
                               const ModelParams& delta_avg);

// Divides every non-timestep column by its per-tensor RMS (eps-guarded, so
// all-zero columns stay zero). Timestep columns are left untouched.
void normalize_features(FeatureMatrix& f);

// RMS normalization used for the appended delta columns as well.
void normalize_column_rms(std::vector<double>& values, std::int64_t rows, int cols, int col);

}  // namespace commlearn
