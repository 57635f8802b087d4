#include "commlearn/local_sim.hpp"

#include <cmath>
#include <exception>

#include "commlearn/errors.hpp"
#include "commlearn/parallel.hpp"
#include "commlearn/rng.hpp"

namespace commlearn {

void RoundConfig::validate() const {
  if (workers < 1) throw ConfigError("K must be at least 1");
  if (local_steps < 1) throw ConfigError("H must be at least 1");
  if (!(gamma > 0.0) || !std::isfinite(gamma)) throw ConfigError("gamma must be positive");
  if (b_loc < 1) throw ConfigError("b_loc must be at least 1");
}

namespace {

bool loss_diverged(double loss) {
  return !std::isfinite(loss) || loss > kDivergenceLossLimit;
}

void check_task(const TrainTask& task) {
  if (!task.dataset) throw ConfigError("training task has no dataset");
  task.arch.validate();
  task.round.validate();
}

}  // namespace

WorkerDeltas local_round(const ArchSpec& arch, const ModelParams& w, const RoundConfig& cfg,
                         const Dataset& ds, std::uint64_t seed, std::int64_t round) {
  cfg.validate();
  const int K = cfg.workers;
  WorkerDeltas out;
  out.per_worker.resize(K);

  // Exceptions (including divergence) must not escape the parallel region;
  // collect them per worker and rethrow the lowest-indexed one afterwards.
  std::vector<std::exception_ptr> failures(K);
  parallel_for(K, [&](std::int64_t k) {
    try {
      ModelParams wk = w;
      RngStream stream(seed, {static_cast<std::uint64_t>(StreamPurpose::local_batch),
                              static_cast<std::uint64_t>(round),
                              static_cast<std::uint64_t>(k)});
      for (int h = 0; h < cfg.local_steps; ++h) {
        Batch batch = sample_minibatch(ds, Split::train, cfg.b_loc, stream);
        LossAndGrad lg = loss_and_grad(arch, wk, batch);
        if (loss_diverged(lg.loss)) {
          throw DivergenceError("local training loss " + std::to_string(lg.loss) +
                                    " exceeded the divergence limit",
                                round, static_cast<int>(k), h, lg.loss);
        }
        axpy(wk, -cfg.gamma, lg.grads);
      }
      out.per_worker[k] = subtract(w, wk);
    } catch (...) {
      failures[k] = std::current_exception();
    }
  });
  for (const std::exception_ptr& e : failures) {
    if (e) std::rethrow_exception(e);
  }

  out.average = zeros_like(w);
  const double inv_k = 1.0 / K;
  for (int k = 0; k < K; ++k) axpy(out.average, inv_k, out.per_worker[k]);
  return out;
}

namespace {

// Shared round loop for run_training and the non-local baselines. step_fn
// consumes the round's deltas and returns the updated weights.
template <typename StepFn>
TrainingCurve run_rounds(const TrainTask& task, const RoundConfig& round_cfg,
                         StepFn&& step_fn, std::int64_t rounds, std::uint64_t seed,
                         const std::string& opt_name) {
  check_task(task);
  if (rounds < 0) throw ConfigError("round count must be non-negative");

  TrainingCurve curve;
  curve.seed = seed;
  curve.optimizer = opt_name;

  ModelParams w = init_params(task.arch, seed);
  for (std::int64_t t = 1; t <= rounds; ++t) {
    WorkerDeltas deltas;
    try {
      deltas = local_round(task.arch, w, round_cfg, *task.dataset, seed, t);
    } catch (const DivergenceError&) {
      curve.diverged = true;
      break;
    }
    w = step_fn(w, deltas, t);

    RngStream monitor(seed, {static_cast<std::uint64_t>(StreamPurpose::monitor_batch),
                             static_cast<std::uint64_t>(t)});
    Batch batch = sample_minibatch(*task.dataset, Split::train, task.round.b_loc, monitor);
    const double loss = loss_only(task.arch, w, batch);
    if (!std::isfinite(loss)) {
      curve.diverged = true;
      break;
    }
    curve.losses.push_back(loss);
    if (loss > kDivergenceLossLimit) {
      curve.diverged = true;
      break;
    }
  }
  curve.comm_rounds = static_cast<std::int64_t>(curve.losses.size());
  return curve;
}

}  // namespace

TrainingCurve run_training(const TrainTask& task, GlobalOptimizer& opt, std::int64_t rounds,
                           std::uint64_t seed) {
  return run_rounds(
      task, task.round,
      [&opt](const ModelParams& w, const WorkerDeltas& deltas, std::int64_t) {
        return opt.step(w, deltas);
      },
      rounds, seed, opt.name());
}

TrainingCurve run_nonlocal_baseline(const TrainTask& task, BaselineKind kind,
                                    const BaselineHyper& hyper, std::int64_t rounds,
                                    std::uint64_t seed) {
  check_task(task);
  if (!(hyper.lr > 0.0) || !std::isfinite(hyper.lr)) throw ConfigError("lr must be positive");

  // One worker, one step, the whole K*H*b_loc sample budget in a single batch.
  RoundConfig big;
  big.workers = 1;
  big.local_steps = 1;
  big.b_loc = static_cast<int>(task.round.effective_batch());

  if (kind == BaselineKind::sgd) {
    big.gamma = hyper.lr;
    return run_rounds(
        task, big,
        [](const ModelParams& w, const WorkerDeltas& deltas, std::int64_t) {
          ModelParams next = w;
          axpy(next, -1.0, deltas.average);
          return next;
        },
        rounds, seed, "sgd");
  }

  if (hyper.beta1 < 0.0 || hyper.beta1 >= 1.0 || hyper.beta2 < 0.0 || hyper.beta2 >= 1.0) {
    throw ConfigError("adam betas must lie in [0, 1)");
  }
  if (!(hyper.eps > 0.0)) throw ConfigError("adam eps must be positive");

  // gamma = 1 makes the round delta equal the raw minibatch gradient.
  big.gamma = 1.0;
  ModelParams m, v;
  bool init = false;
  return run_rounds(
      task, big,
      [&](const ModelParams& w, const WorkerDeltas& deltas, std::int64_t t) {
        if (!init) {
          m = zeros_like(w);
          v = zeros_like(w);
          init = true;
        }
        const ModelParams& g = deltas.average;
        const double bc1 = 1.0 - std::pow(hyper.beta1, static_cast<double>(t));
        const double bc2 = 1.0 - std::pow(hyper.beta2, static_cast<double>(t));
        ModelParams next = w;
        for (std::size_t p = 0; p < w.size(); ++p) {
          const std::size_t n = w[p].tensor.data.size();
          const double* gp = g[p].tensor.data.data();
          double* mp = m[p].tensor.data.data();
          double* vp = v[p].tensor.data.data();
          double* wp = next[p].tensor.data.data();
          parallel_for(static_cast<std::int64_t>(n), [&](std::int64_t i) {
            mp[i] = hyper.beta1 * mp[i] + (1.0 - hyper.beta1) * gp[i];
            vp[i] = hyper.beta2 * vp[i] + (1.0 - hyper.beta2) * gp[i] * gp[i];
            const double mhat = mp[i] / bc1;
            const double vhat = vp[i] / bc2;
            wp[i] -= hyper.lr * mhat / (std::sqrt(vhat) + hyper.eps);
          });
        }
        return next;
      },
      rounds, seed, "adam");
}

}  // namespace commlearn
