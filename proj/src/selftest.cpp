#include <cmath>
#include <cstdio>

#include "commlearn/bench.hpp"
#include "commlearn/config.hpp"
#include "commlearn/features.hpp"
#include "commlearn/global_opt.hpp"
#include "commlearn/local_sim.hpp"
#include "commlearn/meta.hpp"
#include "commlearn/nn.hpp"
#include "commlearn/parallel.hpp"
#include "commlearn/rng.hpp"

namespace commlearn {

namespace {

Dataset selftest_dataset() {
  SyntheticSpec spec;
  spec.num_classes = 4;
  spec.dims = 8;
  spec.samples_per_class = 50;
  spec.cluster_std = 0.2;
  spec.seed = 7;
  return make_synthetic(spec);
}

TrainTask selftest_task(const Dataset& ds, int workers, int local_steps, double gamma) {
  TrainTask task;
  task.dataset = &ds;
  task.arch = ArchSpec::mlp2(ds.example_shape(), ds.num_classes, 8);
  task.round.workers = workers;
  task.round.local_steps = local_steps;
  task.round.gamma = gamma;
  task.round.b_loc = 16;
  return task;
}

bool curves_equal(const TrainingCurve& a, const TrainingCurve& b) {
  if (a.losses.size() != b.losses.size()) return false;
  for (std::size_t i = 0; i < a.losses.size(); ++i) {
    if (a.losses[i] != b.losses[i]) return false;
  }
  return true;
}

bool gradcheck_linear() {
  Dataset ds = selftest_dataset();
  ArchSpec arch = ArchSpec::linear_toy(ds.example_shape(), ds.num_classes);
  ModelParams params = init_params(arch, 3);
  RngStream stream(11, {2});
  Batch batch = sample_minibatch(ds, Split::train, 16, stream);
  LossAndGrad lg = loss_and_grad(arch, params, batch);
  const double h = 1e-6;
  for (std::size_t p = 0; p < params.size(); ++p) {
    std::vector<double>& data = params[p].tensor.data;
    for (std::size_t i = 0; i < data.size(); i += data.size() / 4 + 1) {
      const double keep = data[i];
      data[i] = keep + h;
      const double up = loss_only(arch, params, batch);
      data[i] = keep - h;
      const double down = loss_only(arch, params, batch);
      data[i] = keep;
      const double fd = (up - down) / (2 * h);
      const double an = lg.grads[p].tensor.data[i];
      if (std::abs(fd - an) > 1e-5 * (1.0 + std::abs(an))) return false;
    }
  }
  return true;
}

}  // namespace

int run_selftest(std::FILE* out) {
  int failures = 0;
  auto check = [&](const char* name, bool ok) {
    std::fprintf(out, "%s %s\n", ok ? "ok  " : "FAIL", name);
    if (!ok) ++failures;
  };

  {
    RngStream a(42, {1, 2});
    RngStream b(42, {1, 2});
    RngStream c(42, {1, 3});
    bool same = true, uniform_ok = true;
    bool differs = false;
    for (int i = 0; i < 64; ++i) {
      const double ua = a.next_uniform();
      const double ub = b.next_uniform();
      const double uc = c.next_uniform();
      same = same && ua == ub;
      differs = differs || ua != uc;
      uniform_ok = uniform_ok && ua >= 0.0 && ua < 1.0;
    }
    check("rng streams are reproducible and keyed", same && differs && uniform_ok);
  }

  {
    auto [r2, c2] = folded_dims({6, 4});
    auto [r4, c4] = folded_dims({2, 3, 4, 5});
    auto [r1, c1] = folded_dims({7});
    check("tensor folding conventions",
          r2 == 6 && c2 == 4 && r4 == 24 && c4 == 5 && r1 == 7 && c1 == 1);
  }

  check("analytic gradients match finite differences", gradcheck_linear());

  {
    Dataset ds = selftest_dataset();
    TrainTask task = selftest_task(ds, 1, 1, 0.2);
    auto avg = make_average_optimizer();
    TrainingCurve lhs = run_training(task, *avg, 5, 123);
    BaselineHyper hyper;
    hyper.lr = 0.2;
    TrainingCurve rhs = run_nonlocal_baseline(task, BaselineKind::sgd, hyper, 5, 123);
    check("K=1, H=1 averaging equals the SGD baseline bitwise", curves_equal(lhs, rhs));
  }

  {
    Dataset ds = selftest_dataset();
    TrainTask task = selftest_task(ds, 4, 2, 0.2);
    auto avg = make_average_optimizer();
    auto slowmo = make_slowmo_optimizer(task.arch, 1.0, 0.0, task.round.gamma);
    TrainingCurve lhs = run_training(task, *avg, 5, 5);
    TrainingCurve rhs = run_training(task, *slowmo, 5, 5);
    check("slowmo at beta=0, alpha=1 equals averaging bitwise", curves_equal(lhs, rhs));
  }

  {
    Dataset ds = selftest_dataset();
    TrainTask task = selftest_task(ds, 4, 2, 0.2);
    ModelParams w = init_params(task.arch, 9);
    WorkerDeltas serial, parallel;
    {
      ThreadLimit limit(1);
      serial = local_round(task.arch, w, task.round, ds, 9, 1);
    }
    parallel = local_round(task.arch, w, task.round, ds, 9, 1);
    check("parallel round matches the serial round bitwise",
          bitwise_equal(serial.average, parallel.average));
  }

  {
    Dataset ds = selftest_dataset();
    TrainTask task = selftest_task(ds, 4, 2, 0.2);
    OptimizerParams phi = make_optimizer(OptVariant::lopt_a);
    ModelParams w = init_params(task.arch, 13);
    WorkerDeltas deltas = local_round(task.arch, w, task.round, ds, 13, 1);
    AggregateState u = init_state_like(w);
    ModelParams w2 = lopt_a_step(phi, w, u, deltas);
    check("zero-weight learned optimizer is an identity update", bitwise_equal(w, w2));
  }

  {
    const bool counts = make_optimizer(OptVariant::lopt_a).mlp_param_count() == 2402 &&
                        make_optimizer(OptVariant::lagg_a, 8).mlp_param_count() == 2626 &&
                        make_optimizer(OptVariant::lagg_a, 16).mlp_param_count() == 2882 &&
                        make_optimizer(OptVariant::lagg_a, 32).mlp_param_count() == 3394;
    check("learned optimizer parameter counts", counts);
  }

  {
    OptimizerParams phi = init_optimizer(OptVariant::lagg_a, 8, 21);
    OptimizerParams back = checkpoint_from_json(checkpoint_to_json(phi));
    check("checkpoint round-trip is exact", back.to_flat() == phi.to_flat() &&
                                                back.variant == phi.variant &&
                                                back.workers == phi.workers);
  }

  {
    MetaConfig cfg;
    const double start = lr_schedule(0, cfg);
    const double peak = lr_schedule(cfg.warmup, cfg);
    const double last = lr_schedule(cfg.steps - 1, cfg);
    check("meta learning-rate schedule endpoints",
          start == cfg.lr_init && peak == cfg.lr_peak &&
              std::abs(last - cfg.lr_final) < 1e-15);
  }

  {
    Dataset ds = selftest_dataset();
    ArchSpec arch = ArchSpec::mlp2(ds.example_shape(), ds.num_classes, 8);
    ModelParams zero = zeros_like(init_params(arch, 0));
    RngStream stream(3, {4});
    Batch batch = sample_minibatch(ds, Split::train, 32, stream);
    const double loss = loss_only(arch, zero, batch);
    check("zero network gives the ln(C) loss",
          std::abs(loss - std::log(static_cast<double>(ds.num_classes))) < 1e-12);
  }

  return failures;
}

}  // namespace commlearn
