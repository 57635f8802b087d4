// Acceptance gate. Each criterion prints exactly one [PASS]/[FAIL] line with
// the measured values; the process exits nonzero if any gated criterion fails.
// Criterion 8 (the multi-hour FMNIST benchmark) is documented in the README
// and deliberately not gated here, so it prints as [SKIP].
//
// Usage: acceptance [criterion-number ...]   (default: all gated criteria)

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <functional>
#include <map>
#include <memory>
#include <numeric>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "commlearn/bench.hpp"
#include "commlearn/data.hpp"
#include "commlearn/features.hpp"
#include "commlearn/global_opt.hpp"
#include "commlearn/local_sim.hpp"
#include "commlearn/meta.hpp"
#include "commlearn/nn.hpp"
#include "commlearn/rng.hpp"
#include "commlearn/tensor.hpp"

using namespace commlearn;

namespace {

struct Outcome {
  bool pass = false;
  std::string detail;
};

std::string fmt(double v) {
  std::ostringstream os;
  os.precision(4);
  os << v;
  return os.str();
}

// ---- criterion 1: meta-parameter counts --------------------------------------

Outcome criterion_counts() {
  const std::int64_t lopt = make_optimizer(OptVariant::lopt_a).mlp_param_count();
  std::map<int, std::int64_t> lagg;
  for (int k : {8, 16, 32}) lagg[k] = make_optimizer(OptVariant::lagg_a, k).mlp_param_count();
  const bool ok = lopt == 2402 && lagg[8] == 2626 && lagg[16] == 2882 && lagg[32] == 3394;
  std::ostringstream os;
  os << "lopt_a " << lopt << " (want 2402), lagg_a K=8/16/32 " << lagg[8] << "/" << lagg[16]
     << "/" << lagg[32] << " (want 2626/2882/3394)";
  return {ok, os.str()};
}

// ---- criterion 2: gradient correctness ----------------------------------------

Batch random_batch(const ArchSpec& arch, std::int64_t batch, std::uint64_t seed) {
  std::vector<std::int64_t> shape = arch.input_shape;
  shape.insert(shape.begin(), batch);
  Tensor inputs = Tensor::zeros(shape);
  RngStream stream(seed);
  for (auto& v : inputs.data) v = stream.next_uniform();
  std::vector<int> labels(batch);
  for (auto& y : labels) y = static_cast<int>(stream.next_below(arch.num_classes));
  return Batch{std::move(inputs), std::move(labels)};
}

// Central finite differences over every coordinate; returns the worst
// |fd - analytic| relative to max(|fd|, |analytic|) with a 1e-6 absolute floor.
double gradcheck_worst(const ArchSpec& arch, std::uint64_t seed, std::int64_t batch) {
  ModelParams params = init_params(arch, seed);
  Batch b = random_batch(arch, batch, seed + 1);
  const ModelParams analytic = loss_and_grad(arch, params, b).grads;
  const double h = 1e-5;
  double worst = 0.0;
  for (std::size_t t = 0; t < params.size(); ++t) {
    for (std::size_t i = 0; i < params[t].tensor.data.size(); ++i) {
      const double saved = params[t].tensor.data[i];
      params[t].tensor.data[i] = saved + h;
      const double lp = loss_only(arch, params, b);
      params[t].tensor.data[i] = saved - h;
      const double lm = loss_only(arch, params, b);
      params[t].tensor.data[i] = saved;
      const double fd = (lp - lm) / (2.0 * h);
      const double an = analytic[t].tensor.data[i];
      // 1e-6 absolute floor, then the relative bound applies.
      const double err = std::abs(fd - an);
      if (err <= 1e-6) continue;
      worst = std::max(worst, err / std::max(std::abs(fd), std::abs(an)));
    }
  }
  return worst;
}

Outcome criterion_gradients() {
  struct Case {
    ArchSpec arch;
    std::int64_t batch;
    const char* label;
  };
  const std::vector<Case> cases = {
      {ArchSpec::mlp2({8}, 3, 16), 8, "mlp2"},
      {ArchSpec::mlp3({6}, 3, 12), 6, "mlp3"},
      {ArchSpec::cnn3({8, 8, 2}, 3, 8), 4, "cnn3"},
  };
  bool ok = true;
  std::ostringstream os;
  for (const auto& c : cases) {
    const double worst = gradcheck_worst(c.arch, 42, c.batch);
    ok = ok && worst < 1e-4;
    os << c.label << " max rel err " << fmt(worst) << "; ";
  }
  os << "(bound 1e-4, abs floor 1e-6)";
  return {ok, os.str()};
}

// ---- criterion 3: reduction equivalences --------------------------------------

Outcome criterion_reductions() {
  SyntheticSpec sspec;
  sspec.num_classes = 4;
  sspec.dims = 8;
  sspec.samples_per_class = 120;
  sspec.seed = 5;
  const Dataset data = make_synthetic(sspec);
  const ArchSpec arch = ArchSpec::mlp2({8}, 4, 8);

  // (a) K=1, H=1 averaging vs plain SGD at the same lr, bitwise over 50 rounds.
  TrainTask task_a{&data, arch, RoundConfig{1, 1, 0.2, 32}};
  auto avg_opt = make_average_optimizer();
  const TrainingCurve avg_a = run_training(task_a, *avg_opt, 50, 9001);
  const TrainingCurve sgd = run_nonlocal_baseline(task_a, BaselineKind::sgd,
                                                  BaselineHyper{0.2, 0.9, 0.999, 1e-8}, 50, 9001);
  bool ok_a = avg_a.losses.size() == 50 && sgd.losses.size() == 50;
  int mismatch_a = 0;
  for (std::size_t i = 0; ok_a && i < 50; ++i)
    if (avg_a.losses[i] != sgd.losses[i]) ++mismatch_a;
  ok_a = ok_a && mismatch_a == 0;

  // (b) SlowMo(beta=0, alpha=1) vs local-SGD averaging, elementwise, 50 rounds.
  TrainTask task_b{&data, arch, RoundConfig{4, 2, 0.3, 32}};
  auto avg_opt_b = make_average_optimizer();
  const TrainingCurve avg_b = run_training(task_b, *avg_opt_b, 50, 9002);
  auto slowmo = make_slowmo_optimizer(arch, 1.0, 0.0, task_b.round.gamma);
  const TrainingCurve slow = run_training(task_b, *slowmo, 50, 9002);
  bool ok_b = avg_b.losses.size() == 50 && slow.losses.size() == 50;
  double max_diff = 0.0;
  for (std::size_t i = 0; ok_b && i < 50; ++i) {
    max_diff = std::max(max_diff, std::abs(avg_b.losses[i] - slow.losses[i]));
    if (avg_b.losses[i] != slow.losses[i]) ok_b = false;
  }

  std::ostringstream os;
  os << "K=1/H=1 avg vs SGD: " << (ok_a ? "bitwise equal" : "MISMATCH") << " over 50 rounds; "
     << "SlowMo(0,1) vs averaging: max |diff| " << fmt(max_diff);
  return {ok_a && ok_b, os.str()};
}

// ---- criterion 4: PES oracle on a quadratic ------------------------------------

class QuadraticProblem : public PesProblem {
 public:
  void reset(int, std::int64_t) override {}
  SegmentOutcome run_segment(int, int, const std::vector<double>& phi, std::int64_t) override {
    double s = 0.0;
    for (double v : phi) s += v * v;
    return {0.5 * s, false};
  }
};

Outcome criterion_pes() {
  const int dims = 10;
  const int num_pairs = 1200;
  const double sigma = 0.01;
  const std::vector<double> phi(dims, 1.0);
  QuadraticProblem problem;
  std::vector<PesPair> pairs(1);
  std::vector<std::vector<double>> samples;
  samples.reserve(num_pairs);
  for (int s = 0; s < num_pairs; ++s) {
    // trunc_min = trunc_max = segment 1: every step is an independent pair.
    PesStepResult r = pes_gradient(phi, pairs, problem, sigma, 1, 1, 1, 321, s);
    samples.push_back(std::move(r.grad));
  }
  double worst_z = 0.0;
  bool ok = true;
  for (int i = 0; i < dims; ++i) {
    double mean = 0.0;
    for (const auto& g : samples) mean += g[i];
    mean /= num_pairs;
    double var = 0.0;
    for (const auto& g : samples) var += (g[i] - mean) * (g[i] - mean);
    var /= (num_pairs - 1);
    const double stderr_i = std::sqrt(var / num_pairs);
    const double z = std::abs(mean - phi[i]) / stderr_i;
    worst_z = std::max(worst_z, z);
    if (z > 3.0) ok = false;
  }
  std::ostringstream os;
  os << num_pairs << " antithetic pairs, worst |z| " << fmt(worst_z) << " (bound 3 MC stderr)";
  return {ok, os.str()};
}

// ---- criterion 5: schedule endpoints and truncation sampling --------------------

Outcome criterion_schedule() {
  MetaConfig cfg;  // defaults: warmup 100, steps 5000, 3e-10 / 3e-3 / 1e-3
  const bool ends = lr_schedule(0, cfg) == 3e-10 && lr_schedule(100, cfg) == 3e-3 &&
                    lr_schedule(cfg.steps - 1, cfg) == 1e-3;

  RngStream stream(777, {static_cast<std::uint64_t>(StreamPurpose::truncation)});
  const int n = 100000;
  std::vector<std::int64_t> draws(n);
  bool in_range = true;
  for (int i = 0; i < n; ++i) {
    draws[i] = sample_truncation(100, 1000, stream);
    if (draws[i] < 100 || draws[i] > 1000) in_range = false;
  }
  std::nth_element(draws.begin(), draws.begin() + n / 2, draws.end());
  const double median = static_cast<double>(draws[n / 2]);
  const bool med_ok = std::abs(median - 316.0) <= 0.05 * 316.0;

  std::ostringstream os;
  os << "lr(0)=3e-10, lr(100)=3e-3, lr(final)=1e-3 " << (ends ? "exact" : "MISMATCH")
     << "; truncation median " << median << " (want 316 +/- 5%), range "
     << (in_range ? "ok" : "VIOLATED");
  return {ends && in_range && med_ok, os.str()};
}

// ---- criterion 6: metric semantics ----------------------------------------------

Outcome criterion_metrics() {
  // Identity speedup on genuine local SGD curves.
  SyntheticSpec sspec;
  sspec.num_classes = 3;
  sspec.dims = 6;
  sspec.samples_per_class = 100;
  sspec.seed = 11;
  const Dataset data = make_synthetic(sspec);
  TrainTask task{&data, ArchSpec::mlp2({6}, 3, 8), RoundConfig{2, 2, 0.3, 16}};
  std::vector<TrainingCurve> runs;
  for (std::uint64_t s : {1, 2, 3}) {
    auto opt = make_average_optimizer();
    runs.push_back(run_training(task, *opt, 60, s));
  }
  const AggregatedCurve agg = aggregate(runs);
  const auto self_speedup = speedup(agg, agg);
  const bool identity = self_speedup.has_value() && *self_speedup == 1.0;

  // rounds_to_loss monotonicity over 1000 random curves.
  RngStream stream(555);
  bool monotone = true;
  for (int c = 0; c < 1000 && monotone; ++c) {
    AggregatedCurve curve;
    const int len = 5 + static_cast<int>(stream.next_below(60));
    double level = 1.0 + stream.next_uniform();
    for (int i = 0; i < len; ++i) {
      level += 0.3 * stream.next_normal() - 0.05;
      curve.mean.push_back(std::max(1e-3, level));
    }
    curve.stderr_.assign(curve.mean.size(), 0.0);
    curve.num_seeds = 1;
    const double a = 0.5 + 1.5 * stream.next_uniform();
    const double b = a + stream.next_uniform();  // looser threshold
    const auto ra = rounds_to_loss(curve, a);
    const auto rb = rounds_to_loss(curve, b);
    if (ra.has_value()) {
      if (!rb.has_value() || *rb > *ra) monotone = false;
    }
  }

  // "--" convention when an optimizer never reaches the reference minimum.
  BenchReport report;
  report.reference = "local_sgd";
  OptimizerReport ref;
  ref.name = "local_sgd";
  ref.curve.mean = {1.0, 0.6, 0.3};
  ref.curve.stderr_ = {0.0, 0.0, 0.0};
  ref.curve.num_seeds = 1;
  OptimizerReport never;
  never.name = "slowmo";
  never.curve.mean = {1.0, 0.9, 0.8};
  never.curve.stderr_ = {0.0, 0.0, 0.0};
  never.curve.num_seeds = 1;
  report.optimizers = {ref, never};
  const std::string table = summary_table(report);
  const std::string json = metrics_to_json(report);
  bool hyphen = false;
  std::istringstream lines(table);
  std::string line;
  while (std::getline(lines, line))
    if (line.find("slowmo") != std::string::npos && line.find("--") != std::string::npos)
      hyphen = true;
  const bool json_null = json.find("\"speedup_vs_reference\": null") != std::string::npos;

  std::ostringstream os;
  os << "speedup(ref,ref) = " << (identity ? "1.00 exact" : "WRONG") << "; monotonicity "
     << (monotone ? "held over 1000 curves" : "VIOLATED") << "; never-reaches renders \"--\" "
     << ((hyphen && json_null) ? "and null in JSON" : "MISSING");
  return {identity && monotone && hyphen && json_null, os.str()};
}

// ---- criteria 7 and 9: desk-scale end-to-end -----------------------------------

struct DeskScale {
  Dataset data;
  ArchSpec arch;
  RoundConfig round;
  double gamma_star = 0.0;
  AggregatedCurve reference;
  MetaConfig meta;
  TaskSpec task;
  OptimizerParams lopt_a;
  OptimizerParams lagg_a;
  std::optional<double> lopt_speedup;
  std::optional<double> lagg_speedup;
  double minutes = 0.0;
};

constexpr int kDeskRounds = 300;
const std::vector<std::uint64_t> kEvalSeeds = {201, 202, 203, 204, 205,
                                               206, 207, 208, 209, 210};

AggregatedCurve evaluate_learned(const DeskScale& d, const OptimizerParams& phi) {
  std::vector<TrainingCurve> runs;
  for (std::uint64_t seed : kEvalSeeds) {
    auto opt = make_learned_optimizer(phi, d.arch);
    TrainTask task{&d.data, d.arch, d.round};
    runs.push_back(run_training(task, *opt, kDeskRounds, seed));
  }
  return aggregate(runs);
}

std::unique_ptr<DeskScale> g_desk;

DeskScale& desk_scale() {
  if (g_desk) return *g_desk;
  const auto t0 = std::chrono::steady_clock::now();
  auto d = std::make_unique<DeskScale>();

  SyntheticSpec sspec;
  sspec.num_classes = 4;
  sspec.dims = 16;
  sspec.samples_per_class = 250;
  sspec.cluster_std = 0.2;
  sspec.seed = 77;
  d->data = make_synthetic(sspec);
  d->arch = ArchSpec::mlp2({16}, 4, 16);
  d->round = RoundConfig{4, 4, 0.1, 32};

  // Tune local SGD's gamma on the default grid, then build the 10-seed
  // reference at the winner.
  const SweepGrid grid = default_grid("local_sgd");
  const std::vector<std::uint64_t> sweep_seeds = {1, 2, 3};
  const SweepResult sw = sweep(grid, sweep_seeds, [&](const HyperPoint& p, std::uint64_t seed) {
    TrainTask task{&d->data, d->arch, d->round};
    task.round.gamma = p.at("gamma");
    auto opt = make_average_optimizer();
    return run_training(task, *opt, kDeskRounds, seed);
  });
  d->gamma_star = sw.best.at("gamma");
  d->round.gamma = d->gamma_star;

  std::vector<TrainingCurve> ref_runs;
  for (std::uint64_t seed : kEvalSeeds) {
    TrainTask task{&d->data, d->arch, d->round};
    auto opt = make_average_optimizer();
    ref_runs.push_back(run_training(task, *opt, kDeskRounds, seed));
  }
  d->reference = aggregate(ref_runs);

  d->meta = MetaConfig{};
  d->meta.steps = 2200;
  d->meta.task_batch = 8;
  d->meta.pes_pairs = 4;
  d->meta.trunc_min = 30;
  d->meta.trunc_max = 300;
  d->meta.segment_len = 10;
  d->meta.checkpoint_every = 1000000;
  d->task = TaskSpec{&d->data, d->arch, d->round, Split::train};

  d->lopt_a = meta_train(d->meta, OptVariant::lopt_a, {d->task}, 13).phi;
  d->lagg_a = meta_train(d->meta, OptVariant::lagg_a, {d->task}, 13).phi;

  d->lopt_speedup = speedup(d->reference, evaluate_learned(*d, d->lopt_a));
  d->lagg_speedup = speedup(d->reference, evaluate_learned(*d, d->lagg_a));

  d->minutes = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count() / 60.0;
  g_desk = std::move(d);
  return *g_desk;
}

Outcome criterion_desk_scale() {
  DeskScale& d = desk_scale();
  const bool lopt_ok = d.lopt_speedup.has_value() && *d.lopt_speedup >= 2.0;
  const bool lagg_ok = d.lagg_speedup.has_value() && *d.lagg_speedup >= 2.0;
  std::ostringstream os;
  os << "gamma* = " << d.gamma_star << ", speedup lopt_a "
     << (d.lopt_speedup ? fmt(*d.lopt_speedup) : std::string("--")) << "x, lagg_a "
     << (d.lagg_speedup ? fmt(*d.lagg_speedup) : std::string("--"))
     << "x (want >= 2.0 each), pipeline " << fmt(d.minutes) << " min";
  return {lopt_ok && lagg_ok, os.str()};
}

// Meta-evaluation loss: the meta objective (mean objective-split loss over
// rounds and workers, divergence clipped) on a full-length fresh run.
double meta_eval_loss(const DeskScale& d, const OptimizerParams& phi, std::uint64_t seed) {
  MetaParticle particle;
  particle.w = init_params(d.arch, derive_key({seed, static_cast<std::uint64_t>(
                                                         StreamPurpose::episode_init)}));
  particle.u = init_state(d.arch);
  SegmentStreams streams{seed, 0, 0};
  return meta_objective_segment(phi, particle, d.task, kDeskRounds, streams).mean_loss;
}

Outcome criterion_ablation() {
  DeskScale& d = desk_scale();
  const OptimizerParams plain = meta_train(d.meta, OptVariant::lopt_plain, {d.task}, 13).phi;
  double mean_a = 0.0;
  double mean_plain = 0.0;
  for (std::uint64_t seed : kEvalSeeds) {
    mean_a += meta_eval_loss(d, d.lopt_a, seed);
    mean_plain += meta_eval_loss(d, plain, seed);
  }
  mean_a /= kEvalSeeds.size();
  mean_plain /= kEvalSeeds.size();
  std::ostringstream os;
  os << "10-seed mean meta-eval loss: lopt_a " << fmt(mean_a) << " vs lopt_plain "
     << fmt(mean_plain) << " (want lopt_a <= lopt_plain)";
  return {mean_a <= mean_plain, os.str()};
}

struct Criterion {
  int id;
  const char* label;
  std::function<Outcome()> run;
};

}  // namespace

int main(int argc, char** argv) {
  const std::vector<Criterion> criteria = {
      {1, "meta-parameter counts", criterion_counts},
      {2, "gradient correctness", criterion_gradients},
      {3, "reduction equivalences", criterion_reductions},
      {4, "PES quadratic oracle", criterion_pes},
      {5, "schedule endpoints and truncation", criterion_schedule},
      {6, "metric semantics", criterion_metrics},
      {7, "desk-scale end-to-end speedup", criterion_desk_scale},
      {9, "Ada-feature ablation", criterion_ablation},
  };
  std::set<int> wanted;
  for (int i = 1; i < argc; ++i) wanted.insert(std::atoi(argv[i]));

  int failures = 0;
  for (const auto& c : criteria) {
    if (!wanted.empty() && !wanted.count(c.id)) continue;
    Outcome out;
    try {
      out = c.run();
    } catch (const std::exception& e) {
      out = {false, std::string("exception: ") + e.what()};
    }
    std::printf("[%s] criterion %d: %s (%s)\n", out.pass ? "PASS" : "FAIL", c.id, c.label,
                out.detail.c_str());
    std::fflush(stdout);
    if (!out.pass) ++failures;
    if (c.id == 7 && (wanted.empty() || wanted.count(8))) {
      std::printf("[SKIP] criterion 8: extended FMNIST benchmark (multi-hour run; "
                  "documented in README, not CI-gated)\n");
      std::fflush(stdout);
    }
  }
  if (failures > 0) std::printf("%d criterion(s) failed\n", failures);
  return failures == 0 ? 0 : 1;
}
