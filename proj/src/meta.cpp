#include "commlearn/meta.hpp"

#include <algorithm>
#include <cmath>
#include <exception>
#include <iomanip>
#include <sstream>

#include "commlearn/errors.hpp"
#include "commlearn/parallel.hpp"

namespace commlearn {

namespace {
// Leading tag for per-(pair, episode) run seeds; outside the StreamPurpose
// range so derived keys cannot collide with purpose-keyed paths.
constexpr std::uint64_t kRunSeedTag = 0xC0FFEE;
}  // namespace

void MetaConfig::validate() const {
  if (steps < 1) throw ConfigError("meta steps must be at least 1");
  if (pes_pairs < 1) throw ConfigError("need at least one antithetic pair");
  if (task_batch != 2 * pes_pairs) {
    throw ConfigError("task_batch must equal 2 * pes_pairs (" +
                      std::to_string(2 * pes_pairs) + "), got " +
                      std::to_string(task_batch));
  }
  if (trunc_min < 1 || trunc_max < trunc_min) {
    throw ConfigError("truncation range must satisfy 1 <= trunc_min <= trunc_max");
  }
  if (!(pes_sigma > 0.0)) throw ConfigError("pes_sigma must be positive");
  if (segment_len < 1) throw ConfigError("segment_len must be at least 1");
  if (!(lr_peak > 0.0) || !(lr_init > 0.0) || !(lr_final > 0.0)) {
    throw ConfigError("learning rates must be positive");
  }
  if (warmup < 0 || warmup >= steps) throw ConfigError("warmup must lie in [0, steps)");
  if (weight_decay < 0.0) throw ConfigError("weight decay must be non-negative");
  if (checkpoint_every < 1) throw ConfigError("checkpoint_every must be at least 1");
}

double lr_schedule(std::int64_t step, const MetaConfig& cfg) {
  if (step < 0) throw ConfigError("schedule step must be non-negative");
  if (step < cfg.warmup) {
    return cfg.lr_init +
           (cfg.lr_peak - cfg.lr_init) * static_cast<double>(step) / cfg.warmup;
  }
  const std::int64_t last = cfg.steps - 1;
  if (step >= last) return cfg.lr_final;
  if (step == cfg.warmup) return cfg.lr_peak;
  const double progress = static_cast<double>(step - cfg.warmup) /
                          static_cast<double>(last - cfg.warmup);
  const double cosine = 0.5 * (1.0 + std::cos(progress * 3.14159265358979323846));
  return cfg.lr_final + (cfg.lr_peak - cfg.lr_final) * cosine;
}

std::int64_t sample_truncation(int trunc_min, int trunc_max, RngStream& stream) {
  if (trunc_min < 1 || trunc_max < trunc_min) {
    throw ConfigError("bad truncation range");
  }
  const double lo = std::log(static_cast<double>(trunc_min));
  const double hi = std::log(static_cast<double>(trunc_max));
  const double x = std::exp(lo + (hi - lo) * stream.next_uniform());
  const auto n = static_cast<std::int64_t>(std::llround(x));
  return std::clamp<std::int64_t>(n, trunc_min, trunc_max);
}

// --- PES ----------------------------------------------------------------------

PesStepResult pes_gradient(const std::vector<double>& phi, std::vector<PesPair>& pairs,
                           PesProblem& problem, double sigma, std::int64_t segment_len,
                           int trunc_min, int trunc_max, std::uint64_t seed,
                           std::int64_t step_index) {
  if (pairs.empty()) throw ConfigError("pes_gradient needs at least one pair");
  if (!(sigma > 0.0)) throw ConfigError("sigma must be positive");
  if (segment_len < 1) throw ConfigError("segment_len must be at least 1");
  const std::size_t dim = phi.size();
  const int num_pairs = static_cast<int>(pairs.size());

  // Episode bookkeeping and perturbation draws are serial; only the segment
  // rollouts run in parallel.
  std::vector<std::vector<double>> eps(num_pairs);
  std::vector<std::vector<double>> plus(num_pairs), minus(num_pairs);
  std::vector<std::int64_t> rounds(num_pairs);
  for (int p = 0; p < num_pairs; ++p) {
    PesPair& pair = pairs[p];
    if (pair.episode < 0 || pair.rounds_remaining <= 0 || pair.diverged) {
      pair.episode += 1;
      RngStream trunc(seed, {static_cast<std::uint64_t>(StreamPurpose::truncation),
                             static_cast<std::uint64_t>(p),
                             static_cast<std::uint64_t>(pair.episode)});
      pair.rounds_remaining = sample_truncation(trunc_min, trunc_max, trunc);
      pair.xi.assign(dim, 0.0);
      pair.diverged = false;
      problem.reset(p, pair.episode);
    }
    if (pair.xi.size() != dim) {
      throw ShapeError("pair xi has stale dimension " + std::to_string(pair.xi.size()));
    }
    rounds[p] = std::min<std::int64_t>(segment_len, pair.rounds_remaining);

    RngStream pert(seed, {static_cast<std::uint64_t>(StreamPurpose::pes_perturbation),
                          static_cast<std::uint64_t>(step_index),
                          static_cast<std::uint64_t>(p)});
    eps[p].resize(dim);
    plus[p].resize(dim);
    minus[p].resize(dim);
    for (std::size_t i = 0; i < dim; ++i) {
      const double e = sigma * pert.next_normal();
      eps[p][i] = e;
      plus[p][i] = phi[i] + e;
      minus[p][i] = phi[i] - e;
    }
  }

  std::vector<SegmentOutcome> outcomes(2 * num_pairs);
  std::vector<std::exception_ptr> failures(2 * num_pairs);
  parallel_for(2 * num_pairs, [&](std::int64_t idx) {
    const int p = static_cast<int>(idx / 2);
    const int sign = (idx % 2 == 0) ? 1 : -1;
    try {
      outcomes[idx] =
          problem.run_segment(p, sign, sign > 0 ? plus[p] : minus[p], rounds[p]);
    } catch (...) {
      failures[idx] = std::current_exception();
    }
  });
  for (const std::exception_ptr& e : failures) {
    if (e) std::rethrow_exception(e);
  }

  PesStepResult result;
  result.grad.assign(dim, 0.0);
  const double denom = 2.0 * sigma * sigma * num_pairs;
  for (int p = 0; p < num_pairs; ++p) {
    PesPair& pair = pairs[p];
    for (std::size_t i = 0; i < dim; ++i) pair.xi[i] += eps[p][i];
    const SegmentOutcome& up = outcomes[2 * p];
    const SegmentOutcome& down = outcomes[2 * p + 1];
    const double scale = (up.mean_loss - down.mean_loss) / denom;
    for (std::size_t i = 0; i < dim; ++i) result.grad[i] += scale * pair.xi[i];
    result.mean_loss += 0.5 * (up.mean_loss + down.mean_loss) / num_pairs;
    pair.rounds_remaining -= rounds[p];
    if (up.diverged || down.diverged) {
      pair.diverged = true;
      result.num_diverged += 1;
    }
  }
  return result;
}

// --- AdamW ----------------------------------------------------------------

void adamw_step(AdamWState& state, std::vector<double>& phi, const std::vector<double>& grad,
                double lr, double weight_decay) {
  const std::size_t dim = phi.size();
  if (grad.size() != dim) throw ShapeError("gradient dimension mismatch");
  if (state.m.empty()) {
    state.m.assign(dim, 0.0);
    state.v.assign(dim, 0.0);
  }
  if (state.m.size() != dim) throw ShapeError("adamw state dimension mismatch");
  state.t += 1;
  const double bc1 = 1.0 - std::pow(state.beta1, static_cast<double>(state.t));
  const double bc2 = 1.0 - std::pow(state.beta2, static_cast<double>(state.t));
  for (std::size_t i = 0; i < dim; ++i) {
    state.m[i] = state.beta1 * state.m[i] + (1.0 - state.beta1) * grad[i];
    state.v[i] = state.beta2 * state.v[i] + (1.0 - state.beta2) * grad[i] * grad[i];
    const double mhat = state.m[i] / bc1;
    const double vhat = state.v[i] / bc2;
    phi[i] -= lr * (mhat / (std::sqrt(vhat) + state.eps) + weight_decay * phi[i]);
  }
}

// --- Meta-objective -------------------------------------------------------------

SegmentOutcome meta_objective_segment(const OptimizerParams& phi, MetaParticle& particle,
                                      const TaskSpec& task, std::int64_t rounds,
                                      const SegmentStreams& streams) {
  if (!task.dataset) throw ConfigError("meta task has no dataset");
  if (rounds < 1) throw ConfigError("segment needs at least one round");
  const double clip = 20.0 * std::log(static_cast<double>(task.arch.num_classes));
  const std::uint64_t run_seed =
      derive_key({streams.seed, kRunSeedTag, static_cast<std::uint64_t>(streams.pair_index),
                  static_cast<std::uint64_t>(streams.episode)});

  SegmentOutcome out;
  double total = 0.0;
  std::int64_t done = 0;
  for (std::int64_t r = 1; r <= rounds; ++r) {
    const std::int64_t t = particle.rounds_done + r;
    WorkerDeltas deltas;
    try {
      deltas = local_round(task.arch, particle.w, task.round, *task.dataset, run_seed, t);
    } catch (const DivergenceError&) {
      out.diverged = true;
      break;
    }
    switch (phi.variant) {
      case OptVariant::lopt_a:
        particle.w = lopt_a_step(phi, particle.w, particle.u, deltas);
        break;
      case OptVariant::lagg_a:
        particle.w = lagg_a_step(phi, particle.w, particle.u, deltas);
        break;
      default:
        particle.w = plain_variant_step(phi, particle.w, deltas);
        break;
    }
    double round_loss = 0.0;
    for (int k = 0; k < task.round.workers; ++k) {
      RngStream obj(run_seed, {static_cast<std::uint64_t>(StreamPurpose::objective_batch),
                               static_cast<std::uint64_t>(t),
                               static_cast<std::uint64_t>(k)});
      Batch batch = sample_minibatch(*task.dataset, task.objective, task.round.b_loc, obj);
      round_loss += loss_only(task.arch, particle.w, batch);
    }
    round_loss /= task.round.workers;
    done = r;
    if (!std::isfinite(round_loss) || round_loss >= clip) {
      total += clip;
      out.diverged = true;
      break;
    }
    total += round_loss;
  }
  particle.rounds_done += out.diverged ? done : rounds;
  if (out.diverged && done < rounds) {
    // Unreached rounds count at the ceiling so both antithetic members
    // normalize over the same segment length.
    total += clip * static_cast<double>(rounds - done);
  }
  out.mean_loss = total / static_cast<double>(rounds);
  return out;
}

// --- Meta-training ---------------------------------------------------------

namespace {

class MetaProblem final : public PesProblem {
 public:
  MetaProblem(const std::vector<TaskSpec>& tasks, OptimizerParams proto, int num_pairs,
              std::uint64_t root)
      : tasks_(tasks), proto_(std::move(proto)), root_(root) {
    particles_.resize(2 * num_pairs);
    episodes_.assign(num_pairs, -1);
  }

  void reset(int pair_index, std::int64_t episode) override {
    const TaskSpec& task = task_for(pair_index);
    const std::uint64_t w_seed =
        derive_key({root_, static_cast<std::uint64_t>(StreamPurpose::episode_init),
                    static_cast<std::uint64_t>(pair_index),
                    static_cast<std::uint64_t>(episode)});
    for (int s = 0; s < 2; ++s) {
      MetaParticle& particle = particles_[2 * pair_index + s];
      particle.w = init_params(task.arch, w_seed);
      particle.u = init_state_like(particle.w);
      particle.rounds_done = 0;
    }
    episodes_[pair_index] = episode;
  }

  SegmentOutcome run_segment(int pair_index, int sign, const std::vector<double>& flat,
                             std::int64_t rounds) override {
    OptimizerParams phi = proto_;
    phi.from_flat(flat);
    MetaParticle& particle = particles_[2 * pair_index + (sign > 0 ? 0 : 1)];
    SegmentStreams streams;
    streams.seed = root_;
    streams.pair_index = pair_index;
    streams.episode = episodes_[pair_index];
    return meta_objective_segment(phi, particle, task_for(pair_index), rounds, streams);
  }

 private:
  const TaskSpec& task_for(int pair_index) const {
    return tasks_[static_cast<std::size_t>(pair_index) % tasks_.size()];
  }

  const std::vector<TaskSpec>& tasks_;
  OptimizerParams proto_;
  std::uint64_t root_;
  std::vector<MetaParticle> particles_;
  std::vector<std::int64_t> episodes_;
};

}  // namespace

MetaTrainResult meta_train(const MetaConfig& cfg, OptVariant variant,
                           const std::vector<TaskSpec>& tasks, std::uint64_t seed,
                           const MetaCheckpointHook& checkpoint_hook) {
  cfg.validate();
  if (tasks.empty()) throw ConfigError("meta-training needs at least one task");
  for (const TaskSpec& task : tasks) {
    if (!task.dataset) throw ConfigError("meta task has no dataset");
    task.arch.validate();
    task.round.validate();
  }
  int workers = tasks.front().round.workers;
  if (variant_is_worker_aware(variant)) {
    for (const TaskSpec& task : tasks) {
      if (task.round.workers != workers) {
        throw ConfigError("worker-aware variants need the same K across tasks");
      }
    }
  }

  OptimizerParams phi = init_optimizer(variant, workers, seed);
  std::vector<double> flat = phi.to_flat();
  std::vector<PesPair> pairs(cfg.pes_pairs);
  MetaProblem problem(tasks, phi, cfg.pes_pairs, seed);
  AdamWState adam;

  MetaTrainResult result;
  result.log.reserve(cfg.steps);
  for (int step = 0; step < cfg.steps; ++step) {
    PesStepResult pes =
        pes_gradient(flat, pairs, problem, cfg.pes_sigma, cfg.segment_len, cfg.trunc_min,
                     cfg.trunc_max, seed, step);
    if (pes.num_diverged == cfg.pes_pairs) {
      throw MetaTrainError("every PES pair diverged at meta-step " + std::to_string(step));
    }
    const double lr = lr_schedule(step, cfg);
    adamw_step(adam, flat, pes.grad, lr, cfg.weight_decay);
    result.log.push_back({step, lr, pes.mean_loss, pes.num_diverged});
    if (checkpoint_hook &&
        ((step + 1) % cfg.checkpoint_every == 0 || step + 1 == cfg.steps)) {
      phi.from_flat(flat);
      checkpoint_hook(step + 1, phi);
    }
  }
  phi.from_flat(flat);
  result.phi = std::move(phi);
  return result;
}

std::string meta_log_to_csv(const std::vector<MetaLogRow>& log) {
  std::ostringstream out;
  out << "meta_step,lr,mean_meta_loss,num_diverged\n";
  out << std::setprecision(12);
  for (const MetaLogRow& row : log) {
    out << row.meta_step << ',' << row.lr << ',' << row.mean_meta_loss << ','
        << row.num_diverged << '\n';
  }
  return out.str();
}

}  // namespace commlearn
