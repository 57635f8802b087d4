#include <atomic>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "doctest.h"

#include "commlearn/bench.hpp"
#include "commlearn/errors.hpp"
#include "commlearn/rng.hpp"

using namespace commlearn;

namespace {

TrainingCurve curve_of(std::vector<double> losses, std::uint64_t seed = 0,
                       const std::string& name = "x", bool diverged = false) {
  TrainingCurve c;
  c.losses = std::move(losses);
  c.comm_rounds = static_cast<std::int64_t>(c.losses.size());
  c.seed = seed;
  c.optimizer = name;
  c.diverged = diverged;
  return c;
}

AggregatedCurve agg_of(std::vector<double> mean) {
  AggregatedCurve a;
  a.mean = std::move(mean);
  a.stderr_.assign(a.mean.size(), 0.0);
  a.num_seeds = 1;
  return a;
}

std::string slurp(const std::filesystem::path& p) {
  std::ifstream f(p, std::ios::binary);
  std::ostringstream ss;
  ss << f.rdbuf();
  return ss.str();
}

}  // namespace

TEST_CASE("default grids carry the published values") {
  SweepGrid sgd = default_grid("sgd");
  REQUIRE(sgd.values.size() == 1);
  CHECK(sgd.values[0].first == "lr");
  CHECK(sgd.values[0].second.size() == 11);
  CHECK(sgd.values[0].second.front() == 1.0);
  CHECK(sgd.values[0].second.back() == 1e-5);

  SweepGrid local = default_grid("local_sgd");
  CHECK(local.values[0].first == "gamma");
  CHECK(local.values[0].second == std::vector<double>{1, 0.5, 0.3, 0.1});

  SweepGrid slowmo = default_grid("slowmo");
  REQUIRE(slowmo.values.size() == 3);
  CHECK(slowmo.values[0].first == "gamma");
  CHECK(slowmo.values[1].first == "alpha_gamma");
  CHECK(slowmo.values[2].first == "beta");
  CHECK(slowmo.values[2].second.front() == 0.99);
  CHECK(slowmo.values[2].second.back() == 0.5);

  CHECK_THROWS_AS(default_grid("momentum"), ConfigError);
}

TEST_CASE("grid enumeration is an odometer with the last axis fastest") {
  SweepGrid grid;
  grid.family = "sgd";
  grid.values = {{"a", {1, 2}}, {"b", {10, 20, 30}}};
  std::vector<HyperPoint> pts = enumerate_grid(grid);
  REQUIRE(pts.size() == 6);
  CHECK(pts[0] == HyperPoint{{"a", 1}, {"b", 10}});
  CHECK(pts[1] == HyperPoint{{"a", 1}, {"b", 20}});
  CHECK(pts[2] == HyperPoint{{"a", 1}, {"b", 30}});
  CHECK(pts[3] == HyperPoint{{"a", 2}, {"b", 10}});
  CHECK(pts[5] == HyperPoint{{"a", 2}, {"b", 30}});
}

TEST_CASE("aggregate means, sample stderr, and the n=1 convention") {
  AggregatedCurve a = aggregate({curve_of({1, 1}), curve_of({3, 3})});
  CHECK(a.num_seeds == 2);
  CHECK(a.mean == std::vector<double>{2, 2});
  CHECK(a.stderr_ == std::vector<double>{1, 1});

  AggregatedCurve single = aggregate({curve_of({5, 4})});
  CHECK(single.stderr_ == std::vector<double>{0, 0});
}

TEST_CASE("aggregate truncates to the shortest curve") {
  AggregatedCurve a = aggregate({curve_of({1, 2, 3, 4, 5}), curve_of({1, 2, 3})});
  CHECK(a.mean.size() == 3);
}

TEST_CASE("rounds_to_loss finds the first 1-based crossing") {
  AggregatedCurve c = agg_of({1.0, 0.5, 0.2, 0.2});
  CHECK(rounds_to_loss(c, 1.0) == 1);
  CHECK(rounds_to_loss(c, 0.5) == 2);
  CHECK(rounds_to_loss(c, 0.2) == 3);
  CHECK(rounds_to_loss(c, 0.1) == std::nullopt);
}

TEST_CASE("rounds_to_loss is monotone in the threshold") {
  RngStream s(13, {1});
  for (int trial = 0; trial < 1000; ++trial) {
    std::vector<double> losses(20);
    for (auto& l : losses) l = s.next_uniform();
    AggregatedCurve c = agg_of(losses);
    double t1 = s.next_uniform();
    double t2 = s.next_uniform();
    if (t1 > t2) std::swap(t1, t2);
    auto r1 = rounds_to_loss(c, t1);
    auto r2 = rounds_to_loss(c, t2);
    if (r1) {
      REQUIRE(r2.has_value());  // a looser threshold is reached at least as early
      CHECK(*r1 >= *r2);
    }
  }
}

TEST_CASE("speedup against itself is exactly 1") {
  AggregatedCurve ref = agg_of({4, 3, 2, 1});
  CHECK(speedup(ref, ref) == 1.0);
}

TEST_CASE("speedup doubles when the rounds halve, and degrades to nullopt") {
  AggregatedCurve ref = agg_of({4, 3, 2, 1});
  AggregatedCurve fast = agg_of({2, 1, 1, 1});
  CHECK(speedup(ref, fast) == 2.0);
  AggregatedCurve never = agg_of({4, 4, 4, 4});
  CHECK(speedup(ref, never) == std::nullopt);
}

TEST_CASE("per-seed speedups average over the seeds that reach the target") {
  AggregatedCurve ref = agg_of({4, 3, 2, 1});
  std::vector<TrainingCurve> seeds = {
      curve_of({2, 1, 2, 2}, 1),  // reaches at round 2 -> ratio 2
      curve_of({2, 2, 2, 1}, 2),  // reaches at round 4 -> ratio 1
      curve_of({2, 2, 2, 2}, 3),  // never reaches -> ignored
  };
  auto ps = speedup_per_seed(ref, seeds);
  REQUIRE(ps.has_value());
  CHECK(ps->seeds_counted == 2);
  CHECK(ps->mean == doctest::Approx(1.5).epsilon(1e-12));
  CHECK(ps->stderr_ == doctest::Approx(0.5).epsilon(1e-12));

  std::vector<TrainingCurve> hopeless = {curve_of({9, 9, 9, 9}, 1)};
  CHECK(!speedup_per_seed(ref, hopeless).has_value());
}

TEST_CASE("sweep picks the final-loss minimizer over mean curves") {
  SweepGrid grid;
  grid.family = "sgd";
  grid.values = {{"lr", {1.0, 0.5, 0.1}}};
  std::atomic<int> calls{0};
  SweepResult r = sweep(grid, {1, 2}, [&](const HyperPoint& p, std::uint64_t seed) {
    calls.fetch_add(1);
    double lr = p.at("lr");
    // a fake run whose final loss is minimized at lr = 0.5
    double bias = seed == 1 ? 0.01 : -0.01;
    return curve_of({1.0, std::abs(lr - 0.5) + bias}, seed);
  });
  CHECK(calls.load() == 6);
  CHECK(r.best.at("lr") == 0.5);
  CHECK(r.best_index == 1);
  REQUIRE(r.all.size() == 3);
  CHECK(r.all[1].final_mean_loss == doctest::Approx(0.0).epsilon(1e-12));
  CHECK(r.all[1].curve.num_seeds == 2);
}

TEST_CASE("sweep breaks ties by grid order") {
  SweepGrid grid;
  grid.family = "sgd";
  grid.values = {{"lr", {1.0, 0.5}}};
  SweepResult r = sweep(grid, {1}, [&](const HyperPoint&, std::uint64_t seed) {
    return curve_of({1.0, 0.5}, seed);
  });
  CHECK(r.best.at("lr") == 1.0);
  CHECK(r.best_index == 0);
}

TEST_CASE("diverged points are excluded; all-diverged sweeps throw") {
  SweepGrid grid;
  grid.family = "sgd";
  grid.values = {{"lr", {1.0, 0.5}}};
  SweepResult r = sweep(grid, {1}, [&](const HyperPoint& p, std::uint64_t seed) {
    // the better final loss belongs to a diverged run and must not win
    if (p.at("lr") == 1.0) return curve_of({0.1}, seed, "x", true);
    return curve_of({1.0, 0.9}, seed);
  });
  CHECK(r.best.at("lr") == 0.5);
  CHECK(r.all[0].diverged);

  CHECK_THROWS_AS(sweep(grid, {1},
                        [&](const HyperPoint&, std::uint64_t seed) {
                          return curve_of({0.1}, seed, "x", true);
                        }),
                  SweepError);
}

TEST_CASE("report renders csv, json and a summary with -- for unreached targets") {
  BenchReport report;
  report.reference = "local_sgd";
  report.loss_threshold = 0.2;
  report.config_snapshot = "[task]\nK = 4\n";

  OptimizerReport ref;
  ref.name = "local_sgd";
  ref.raw = {curve_of({1.0, 0.4, 0.1}, 1, "local_sgd"), curve_of({1.2, 0.6, 0.3}, 2, "local_sgd")};
  ref.curve = aggregate(ref.raw);
  ref.hyperparameters = {{"gamma", 0.3}};
  report.optimizers.push_back(ref);

  OptimizerReport slow;
  slow.name = "adam";
  slow.raw = {curve_of({2.0, 1.5, 1.0}, 1, "adam")};
  slow.curve = aggregate(slow.raw);
  slow.hyperparameters = {{"lr", 0.001}};
  report.optimizers.push_back(slow);

  std::string csv = curves_to_csv(report);
  CHECK(csv.substr(0, 38) == "round,optimizer,loss_mean,loss_stderr\n");
  CHECK(csv.find("local_sgd") != std::string::npos);
  CHECK(csv.find("adam") != std::string::npos);

  std::string json_text = metrics_to_json(report);
  CHECK(json_text.find("\"reference\"") != std::string::npos);
  CHECK(json_text.find("\"speedup_vs_reference\": null") != std::string::npos);

  std::string table = summary_table(report);
  CHECK(table.find("local_sgd") != std::string::npos);
  CHECK(table.find("--") != std::string::npos);  // adam never reaches the target

  // byte-identical re-emission
  CHECK(curves_to_csv(report) == csv);
  CHECK(metrics_to_json(report) == json_text);
  CHECK(summary_table(report) == table);

  namespace fs = std::filesystem;
  fs::path dir = fs::temp_directory_path() / "commlearn_test_report";
  fs::remove_all(dir);
  EmittedFiles files = emit_report(report, dir.string());
  CHECK(slurp(files.curves_csv) == csv);
  CHECK(slurp(files.metrics_json) == json_text + "\n");
  CHECK(slurp(files.summary_txt) == table);
  emit_report(report, dir.string());
  CHECK(slurp(files.curves_csv) == csv);  // re-emission is byte-identical
  fs::remove_all(dir);
}
