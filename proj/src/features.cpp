#include "commlearn/features.hpp"

#include <cmath>

#include "commlearn/errors.hpp"
#include "commlearn/parallel.hpp"

namespace commlearn {

double sigmoid(double x) {
  if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

double logit(double p) {
  if (!(p > 0.0) || !(p < 1.0)) throw ConfigError("logit needs p in (0, 1)");
  return std::log(p / (1.0 - p));
}

DecayCoeffs decay_from_raw(const std::array<double, 7>& raw) {
  DecayCoeffs out;
  for (int i = 0; i < 7; ++i) out.beta[i] = sigmoid(raw[i]);
  return out;
}

std::array<double, 7> default_betas_raw() {
  return {logit(0.1), logit(0.5), logit(0.9), logit(0.999),
          logit(0.1), logit(0.5), logit(0.9)};
}

AggregateState init_state_like(const ModelParams& params) {
  AggregateState u;
  u.m1 = zeros_like(params);
  u.m2 = zeros_like(params);
  u.m3 = zeros_like(params);
  u.v = zeros_like(params);
  for (const NamedTensor& p : params) {
    auto [rows, cols] = folded_dims(p.tensor.shape);
    for (auto* vec : {&u.r1, &u.r2, &u.r3}) vec->push_back(Tensor::zeros({rows}));
    for (auto* vec : {&u.c1, &u.c2, &u.c3}) vec->push_back(Tensor::zeros({cols}));
  }
  u.t = 0;
  return u;
}

AggregateState init_state(const ArchSpec& arch) {
  return init_state_like(init_params(arch, 0));
}

namespace {

void ema_params(ModelParams& acc, const ModelParams& x, double beta) {
  for (std::size_t p = 0; p < acc.size(); ++p) {
    double* a = acc[p].tensor.data.data();
    const double* xp = x[p].tensor.data.data();
    const std::int64_t n = static_cast<std::int64_t>(acc[p].tensor.data.size());
    parallel_for(n, [&](std::int64_t i) { a[i] = beta * a[i] + (1.0 - beta) * xp[i]; });
  }
}

void ema_params_sq(ModelParams& acc, const ModelParams& x, double beta) {
  for (std::size_t p = 0; p < acc.size(); ++p) {
    double* a = acc[p].tensor.data.data();
    const double* xp = x[p].tensor.data.data();
    const std::int64_t n = static_cast<std::int64_t>(acc[p].tensor.data.size());
    parallel_for(n, [&](std::int64_t i) {
      a[i] = beta * a[i] + (1.0 - beta) * xp[i] * xp[i];
    });
  }
}

}  // namespace

void update_state(AggregateState& u, const ModelParams& delta, const DecayCoeffs& betas) {
  check_same_structure(u.m1, delta, "aggregate state update");
  u.t += 1;
  ema_params(u.m1, delta, betas.beta[0]);
  ema_params(u.m2, delta, betas.beta[1]);
  ema_params(u.m3, delta, betas.beta[2]);
  ema_params_sq(u.v, delta, betas.beta[3]);

  for (std::size_t p = 0; p < delta.size(); ++p) {
    const Tensor& d = delta[p].tensor;
    auto [rows, cols] = folded_dims(d.shape);
    std::vector<double> row_mean(rows, 0.0), col_mean(cols, 0.0);
    for (std::int64_t j = 0; j < rows; ++j) {
      const double* dr = d.data.data() + j * cols;
      double acc = 0.0;
      for (std::int64_t l = 0; l < cols; ++l) {
        const double sq = dr[l] * dr[l];
        acc += sq;
        col_mean[l] += sq;
      }
      row_mean[j] = acc / static_cast<double>(cols);
    }
    for (std::int64_t l = 0; l < cols; ++l) col_mean[l] /= static_cast<double>(rows);

    const double* br = &betas.beta[4];
    Tensor* rs[3] = {&u.r1[p], &u.r2[p], &u.r3[p]};
    Tensor* cs[3] = {&u.c1[p], &u.c2[p], &u.c3[p]};
    for (int i = 0; i < 3; ++i) {
      for (std::int64_t j = 0; j < rows; ++j) {
        rs[i]->data[j] = br[i] * rs[i]->data[j] + (1.0 - br[i]) * row_mean[j];
      }
      for (std::int64_t l = 0; l < cols; ++l) {
        cs[i]->data[l] = br[i] * cs[i]->data[l] + (1.0 - br[i]) * col_mean[l];
      }
    }
  }
}

FeatureMatrix compute_features(const ModelParams& w, const AggregateState& u,
                               const ModelParams& delta_avg) {
  check_same_structure(w, delta_avg, "feature computation");
  check_same_structure(w, u.m1, "feature computation");

  std::array<double, kNumTimestepFeatures> time_feat;
  for (int i = 0; i < kNumTimestepFeatures; ++i) {
    time_feat[i] = std::tanh(static_cast<double>(u.t) / kTimestepScales[i]);
  }

  FeatureMatrix f;
  f.blocks.resize(w.size());
  for (std::size_t p = 0; p < w.size(); ++p) {
    const Tensor& wt = w[p].tensor;
    auto [rows, cols] = folded_dims(wt.shape);
    const std::int64_t n = rows * cols;

    // Adafactor-style factors: vhat_{jl} ~ r_j c_l / mean(r), so the update
    // scaling splits into rsqrt(r_j / mean(r)) * rsqrt(c_l).
    const Tensor* r[3] = {&u.r1[p], &u.r2[p], &u.r3[p]};
    const Tensor* c[3] = {&u.c1[p], &u.c2[p], &u.c3[p]};
    std::vector<double> row_factor[3], col_factor[3];
    for (int i = 0; i < 3; ++i) {
      double mean_r = 0.0;
      for (double x : r[i]->data) mean_r += x;
      mean_r /= static_cast<double>(rows);
      row_factor[i].resize(rows);
      for (std::int64_t j = 0; j < rows; ++j) {
        row_factor[i][j] = guarded_rsqrt(r[i]->data[j] / (mean_r + kFeatureEps));
      }
      col_factor[i].resize(cols);
      for (std::int64_t l = 0; l < cols; ++l) {
        col_factor[i][l] = guarded_rsqrt(c[i]->data[l]);
      }
    }

    const ModelParams& m1 = u.m1;
    const ModelParams& m2 = u.m2;
    const ModelParams& m3 = u.m3;
    const double* ms[3] = {m1[p].tensor.data.data(), m2[p].tensor.data.data(),
                           m3[p].tensor.data.data()};
    const double* vp = u.v[p].tensor.data.data();
    const double* wp = wt.data.data();
    const double* dp = delta_avg[p].tensor.data.data();

    FeatureMatrix::Block& blk = f.blocks[p];
    blk.rows = n;
    blk.cols = kAdaColumns;
    blk.values.resize(n * kAdaColumns);
    parallel_for(n, [&](std::int64_t e) {
      const std::int64_t j = e / cols;
      const std::int64_t l = e % cols;
      double* out = blk.values.data() + e * kAdaColumns;
      const double rsv = guarded_rsqrt(vp[e]);
      out[kColW] = wp[e];
      out[kColV] = vp[e];
      out[kColRsqrtV] = rsv;
      for (int i = 0; i < 3; ++i) {
        const double fac = row_factor[i][j] * col_factor[i][l];
        out[kColM1 + i] = ms[i][e];
        out[kColMOverSqrtV1 + i] = ms[i][e] * rsv;
        out[kColDeltaFac1 + i] = dp[e] * fac;
        out[kColRTiled1 + i] = r[i]->data[j];
        out[kColCTiled1 + i] = c[i]->data[l];
        out[kColRsqrtR1 + i] = guarded_rsqrt(r[i]->data[j]);
        out[kColRsqrtC1 + i] = guarded_rsqrt(c[i]->data[l]);
        out[kColMFac1 + i] = ms[i][e] * fac;
      }
      for (int i = 0; i < kNumTimestepFeatures; ++i) out[kColTime1 + i] = time_feat[i];
    });
  }
  return f;
}

void normalize_column_rms(std::vector<double>& values, std::int64_t rows, int cols,
                          int col) {
  double ss = 0.0;
  for (std::int64_t r = 0; r < rows; ++r) {
    const double x = values[r * cols + col];
    ss += x * x;
  }
  const double factor = guarded_rsqrt(ss / static_cast<double>(rows));
  parallel_for(rows, [&](std::int64_t r) { values[r * cols + col] *= factor; });
}

void normalize_features(FeatureMatrix& f) {
  for (FeatureMatrix::Block& blk : f.blocks) {
    for (int c = 0; c < kColTime1; ++c) {
      normalize_column_rms(blk.values, blk.rows, blk.cols, c);
    }
  }
}

}  // namespace commlearn
