// Times the OpenMP kernels against their serial execution and checks that
// both produce bitwise-identical results.

#include <chrono>
#include <cstdio>
#include <functional>
#include <string>
#include <vector>

#include "commlearn/data.hpp"
#include "commlearn/features.hpp"
#include "commlearn/global_opt.hpp"
#include "commlearn/local_sim.hpp"
#include "commlearn/nn.hpp"
#include "commlearn/parallel.hpp"

namespace {

using namespace commlearn;
using Clock = std::chrono::steady_clock;

double time_best_ms(int repeats, const std::function<void()>& fn) {
  double best = 1e300;
  for (int r = 0; r < repeats; ++r) {
    const auto t0 = Clock::now();
    fn();
    const auto t1 = Clock::now();
    best = std::min(best, std::chrono::duration<double, std::milli>(t1 - t0).count());
  }
  return best;
}

struct Row {
  std::string name;
  double serial_ms = 0.0;
  double parallel_ms = 0.0;
  double max_diff = 0.0;
};

Row bench(const std::string& name, int repeats, const std::function<void()>& fn,
          const std::function<double()>& diff_against_serial) {
  Row row;
  row.name = name;
  {
    ThreadLimit limit(1);
    row.serial_ms = time_best_ms(repeats, fn);
  }
  row.parallel_ms = time_best_ms(repeats, fn);
  row.max_diff = diff_against_serial();
  return row;
}

}  // namespace

int main(int argc, char** argv) {
  int repeats = 3;
  for (int i = 1; i < argc; ++i) {
    const std::string arg = argv[i];
    if (arg == "--repeat" && i + 1 < argc) {
      repeats = std::atoi(argv[++i]);
    } else if (arg == "--threads" && i + 1 < argc) {
      set_max_threads(std::atoi(argv[++i]));
    } else {
      std::fprintf(stderr, "usage: kernels_bench [--repeat R] [--threads N]\n");
      return 2;
    }
  }

  SyntheticSpec spec;
  spec.num_classes = 10;
  spec.dims = 64;
  spec.samples_per_class = 200;
  spec.seed = 1;
  const Dataset ds = make_synthetic(spec);

  std::vector<Row> rows;

  {
    const ArchSpec arch = ArchSpec::mlp2(ds.example_shape(), ds.num_classes, 256);
    const ModelParams params = init_params(arch, 1);
    RngStream stream(2, {1});
    const Batch batch = sample_minibatch(ds, Split::train, 256, stream);
    LossAndGrad out;
    rows.push_back(bench(
        "mlp2 loss_and_grad", repeats, [&] { out = loss_and_grad(arch, params, batch); },
        [&] {
          ThreadLimit limit(1);
          const LossAndGrad ref = loss_and_grad(arch, params, batch);
          return std::max(std::abs(ref.loss - out.loss), max_abs_diff(ref.grads, out.grads));
        }));
  }

  {
    SyntheticSpec img_spec;
    img_spec.num_classes = 10;
    img_spec.dims = 16 * 16 * 3;
    img_spec.samples_per_class = 40;
    img_spec.seed = 2;
    Dataset img = make_synthetic(img_spec);
    img.inputs.shape = {img.num_examples(), 16, 16, 3};
    const ArchSpec arch = ArchSpec::cnn3(img.example_shape(), img.num_classes, 16);
    const ModelParams params = init_params(arch, 3);
    RngStream stream(4, {1});
    const Batch batch = sample_minibatch(img, Split::train, 32, stream);
    LossAndGrad out;
    rows.push_back(bench(
        "cnn3 loss_and_grad", repeats, [&] { out = loss_and_grad(arch, params, batch); },
        [&] {
          ThreadLimit limit(1);
          const LossAndGrad ref = loss_and_grad(arch, params, batch);
          return std::max(std::abs(ref.loss - out.loss), max_abs_diff(ref.grads, out.grads));
        }));
  }

  {
    TrainTask task;
    task.dataset = &ds;
    task.arch = ArchSpec::mlp2(ds.example_shape(), ds.num_classes, 128);
    task.round.workers = 8;
    task.round.local_steps = 2;
    task.round.gamma = 0.1;
    task.round.b_loc = 64;
    const ModelParams w = init_params(task.arch, 5);
    WorkerDeltas out;
    rows.push_back(bench(
        "local_round K=8 H=2", repeats,
        [&] { out = local_round(task.arch, w, task.round, ds, 5, 1); },
        [&] {
          ThreadLimit limit(1);
          const WorkerDeltas ref = local_round(task.arch, w, task.round, ds, 5, 1);
          return max_abs_diff(ref.average, out.average);
        }));
  }

  {
    TrainTask task;
    task.dataset = &ds;
    task.arch = ArchSpec::mlp2(ds.example_shape(), ds.num_classes, 128);
    task.round.workers = 8;
    task.round.local_steps = 2;
    task.round.gamma = 0.1;
    task.round.b_loc = 64;
    const ModelParams w = init_params(task.arch, 6);
    const WorkerDeltas deltas = local_round(task.arch, w, task.round, ds, 6, 1);
    const OptimizerParams phi = init_optimizer(OptVariant::lagg_a, 8, 7);
    ModelParams out;
    rows.push_back(bench(
        "lagg_a step", repeats,
        [&] {
          AggregateState u = init_state_like(w);
          out = lagg_a_step(phi, w, u, deltas);
        },
        [&] {
          ThreadLimit limit(1);
          AggregateState u = init_state_like(w);
          const ModelParams ref = lagg_a_step(phi, w, u, deltas);
          return max_abs_diff(ref, out);
        }));
  }

  std::printf("threads: %d, repeats: %d (best-of)\n\n", max_threads(), repeats);
  std::printf("%-22s %12s %12s %9s %12s\n", "kernel", "serial ms", "parallel ms",
              "speedup", "max |diff|");
  bool all_exact = true;
  for (const Row& row : rows) {
    std::printf("%-22s %12.3f %12.3f %8.2fx %12g\n", row.name.c_str(), row.serial_ms,
                row.parallel_ms, row.serial_ms / row.parallel_ms, row.max_diff);
    all_exact = all_exact && row.max_diff == 0.0;
  }
  std::printf("\nserial/parallel results %s\n", all_exact ? "are bitwise identical"
                                                          : "DIFFER");
  return all_exact ? 0 : 1;
}
