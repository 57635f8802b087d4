#include "commlearn/bench.hpp"

#include <algorithm>
#include <cmath>
#include <exception>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <limits>
#include <sstream>

#include "json.hpp"

#include "commlearn/errors.hpp"
#include "commlearn/parallel.hpp"

namespace commlearn {

namespace {

const std::vector<double> kLrGrid = {1,    5e-1, 1e-1, 5e-2, 1e-2, 5e-3,
                                     1e-3, 5e-4, 1e-4, 5e-5, 1e-5};
const std::vector<double> kGammaGrid = {1, 0.5, 0.3, 0.1};
const std::vector<double> kBetaGrid = {0.99, 0.95, 0.9,  0.85, 0.8, 0.75,
                                       0.7,  0.65, 0.6,  0.55, 0.5};

}  // namespace

SweepGrid default_grid(const std::string& family) {
  SweepGrid grid;
  grid.family = family;
  if (family == "sgd" || family == "adam") {
    grid.values = {{"lr", kLrGrid}};
  } else if (family == "local_sgd") {
    grid.values = {{"gamma", kGammaGrid}};
  } else if (family == "slowmo") {
    grid.values = {{"gamma", kGammaGrid}, {"alpha_gamma", kLrGrid}, {"beta", kBetaGrid}};
  } else {
    throw ConfigError("unknown sweep family '" + family + "'");
  }
  return grid;
}

std::vector<HyperPoint> enumerate_grid(const SweepGrid& grid) {
  if (grid.values.empty()) throw ConfigError("sweep grid has no axes");
  for (const auto& [name, list] : grid.values) {
    if (list.empty()) throw ConfigError("sweep axis '" + name + "' has no values");
  }
  std::vector<HyperPoint> points;
  std::size_t total = 1;
  for (const auto& axis : grid.values) total *= axis.second.size();
  points.reserve(total);
  std::vector<std::size_t> idx(grid.values.size(), 0);
  for (;;) {
    HyperPoint p;
    for (std::size_t a = 0; a < grid.values.size(); ++a) {
      p[grid.values[a].first] = grid.values[a].second[idx[a]];
    }
    points.push_back(std::move(p));
    // odometer increment, last axis fastest
    std::size_t a = grid.values.size();
    while (a-- > 0) {
      if (++idx[a] < grid.values[a].second.size()) break;
      idx[a] = 0;
      if (a == 0) return points;
    }
  }
}

AggregatedCurve aggregate(const std::vector<TrainingCurve>& curves) {
  if (curves.empty()) throw ConfigError("cannot aggregate zero curves");
  std::size_t len = curves.front().losses.size();
  for (const TrainingCurve& c : curves) len = std::min(len, c.losses.size());
  AggregatedCurve out;
  out.num_seeds = static_cast<int>(curves.size());
  out.mean.resize(len);
  out.stderr_.resize(len);
  const double n = static_cast<double>(curves.size());
  for (std::size_t t = 0; t < len; ++t) {
    double mean = 0.0;
    for (const TrainingCurve& c : curves) mean += c.losses[t];
    mean /= n;
    double var = 0.0;
    if (curves.size() > 1) {
      for (const TrainingCurve& c : curves) {
        const double d = c.losses[t] - mean;
        var += d * d;
      }
      var /= (n - 1.0);
    }
    out.mean[t] = mean;
    out.stderr_[t] = curves.size() > 1 ? std::sqrt(var / n) : 0.0;
  }
  return out;
}

std::optional<std::int64_t> rounds_to_loss(const AggregatedCurve& curve, double threshold) {
  for (std::size_t t = 0; t < curve.mean.size(); ++t) {
    if (curve.mean[t] <= threshold) return static_cast<std::int64_t>(t) + 1;
  }
  return std::nullopt;
}

std::optional<double> speedup(const AggregatedCurve& reference, const AggregatedCurve& other) {
  if (reference.mean.empty()) return std::nullopt;
  const double target = *std::min_element(reference.mean.begin(), reference.mean.end());
  const auto t_ref = rounds_to_loss(reference, target);
  const auto t_other = rounds_to_loss(other, target);
  if (!t_ref || !t_other) return std::nullopt;
  return static_cast<double>(*t_ref) / static_cast<double>(*t_other);
}

std::optional<PerSeedSpeedup> speedup_per_seed(const AggregatedCurve& reference,
                                               const std::vector<TrainingCurve>& other_curves) {
  if (reference.mean.empty() || other_curves.empty()) return std::nullopt;
  const double target = *std::min_element(reference.mean.begin(), reference.mean.end());
  const auto t_ref = rounds_to_loss(reference, target);
  if (!t_ref) return std::nullopt;
  std::vector<double> ratios;
  for (const TrainingCurve& c : other_curves) {
    for (std::size_t t = 0; t < c.losses.size(); ++t) {
      if (c.losses[t] <= target) {
        ratios.push_back(static_cast<double>(*t_ref) / static_cast<double>(t + 1));
        break;
      }
    }
  }
  if (ratios.empty()) return std::nullopt;
  PerSeedSpeedup out;
  out.seeds_counted = static_cast<int>(ratios.size());
  for (double r : ratios) out.mean += r;
  out.mean /= ratios.size();
  if (ratios.size() > 1) {
    double var = 0.0;
    for (double r : ratios) var += (r - out.mean) * (r - out.mean);
    var /= (ratios.size() - 1.0);
    out.stderr_ = std::sqrt(var / ratios.size());
  }
  return out;
}

SweepResult sweep(const SweepGrid& grid, const std::vector<std::uint64_t>& seeds,
                  const RunFn& run) {
  if (seeds.empty()) throw ConfigError("sweep needs at least one seed");
  const std::vector<HyperPoint> points = enumerate_grid(grid);
  const std::int64_t num_points = static_cast<std::int64_t>(points.size());
  const std::int64_t num_seeds = static_cast<std::int64_t>(seeds.size());

  std::vector<TrainingCurve> curves(num_points * num_seeds);
  std::vector<std::exception_ptr> failures(num_points * num_seeds);
  parallel_for(num_points * num_seeds, [&](std::int64_t idx) {
    try {
      curves[idx] = run(points[idx / num_seeds], seeds[idx % num_seeds]);
    } catch (...) {
      failures[idx] = std::current_exception();
    }
  });
  for (const std::exception_ptr& e : failures) {
    if (e) std::rethrow_exception(e);
  }

  SweepResult result;
  result.all.resize(num_points);
  bool have_best = false;
  double best_loss = std::numeric_limits<double>::infinity();
  for (std::int64_t p = 0; p < num_points; ++p) {
    SweepPointResult& pr = result.all[p];
    pr.point = points[p];
    std::vector<TrainingCurve> point_curves(curves.begin() + p * num_seeds,
                                            curves.begin() + (p + 1) * num_seeds);
    for (const TrainingCurve& c : point_curves) pr.diverged = pr.diverged || c.diverged;
    pr.curve = aggregate(point_curves);
    pr.final_mean_loss = pr.curve.mean.empty() ? std::numeric_limits<double>::infinity()
                                               : pr.curve.mean.back();
    if (!pr.diverged && pr.final_mean_loss < best_loss) {
      best_loss = pr.final_mean_loss;
      result.best = pr.point;
      result.best_index = static_cast<std::size_t>(p);
      have_best = true;
    }
  }
  if (!have_best) {
    throw SweepError("every point of the '" + grid.family + "' sweep diverged");
  }
  return result;
}

namespace {

std::string hyper_to_string(const HyperPoint& point) {
  std::ostringstream out;
  out << std::setprecision(6);
  bool first = true;
  for (const auto& [key, value] : point) {
    if (!first) out << ' ';
    out << key << '=' << value;
    first = false;
  }
  return out.str();
}

const OptimizerReport& find_reference(const BenchReport& report) {
  for (const OptimizerReport& opt : report.optimizers) {
    if (opt.name == report.reference) return opt;
  }
  throw ConfigError("reference optimizer '" + report.reference + "' is not in the report");
}

}  // namespace

std::string curves_to_csv(const BenchReport& report) {
  std::ostringstream out;
  out << "round,optimizer,loss_mean,loss_stderr\n";
  out << std::setprecision(12);
  for (const OptimizerReport& opt : report.optimizers) {
    for (std::size_t t = 0; t < opt.curve.mean.size(); ++t) {
      out << (t + 1) << ',' << opt.name << ',' << opt.curve.mean[t] << ','
          << opt.curve.stderr_[t] << '\n';
    }
  }
  return out.str();
}

std::string metrics_to_json(const BenchReport& report) {
  const OptimizerReport& ref = find_reference(report);
  nlohmann::ordered_json doc;
  doc["reference"] = report.reference;
  doc["loss_threshold"] = report.loss_threshold;
  nlohmann::ordered_json opts = nlohmann::ordered_json::array();
  for (const OptimizerReport& opt : report.optimizers) {
    nlohmann::ordered_json o;
    o["name"] = opt.name;
    nlohmann::ordered_json hp;
    for (const auto& [key, value] : opt.hyperparameters) hp[key] = value;
    o["hyperparameters"] = std::move(hp);
    o["num_seeds"] = opt.curve.num_seeds;
    o["rounds"] = opt.curve.mean.size();
    o["final_loss_mean"] = opt.curve.mean.empty() ? nullptr
                                                  : nlohmann::ordered_json(opt.curve.mean.back());
    o["final_loss_stderr"] =
        opt.curve.stderr_.empty() ? nullptr : nlohmann::ordered_json(opt.curve.stderr_.back());
    const auto reach = rounds_to_loss(opt.curve, report.loss_threshold);
    o["rounds_to_threshold"] = reach ? nlohmann::ordered_json(*reach) : nullptr;
    const auto sp = speedup(ref.curve, opt.curve);
    o["speedup_vs_reference"] = sp ? nlohmann::ordered_json(*sp) : nullptr;
    if (report.per_seed_speedups) {
      const auto ps = speedup_per_seed(ref.curve, opt.raw);
      if (ps) {
        o["per_seed_speedup"] = {{"mean", ps->mean},
                                 {"stderr", ps->stderr_},
                                 {"seeds_counted", ps->seeds_counted}};
      } else {
        o["per_seed_speedup"] = nullptr;
      }
    }
    opts.push_back(std::move(o));
  }
  doc["optimizers"] = std::move(opts);
  doc["config"] = report.config_snapshot;
  return doc.dump(1);
}

std::string summary_table(const BenchReport& report) {
  const OptimizerReport& ref = find_reference(report);
  std::ostringstream out;
  out << std::left << std::setw(14) << "optimizer" << std::setw(34) << "hyperparameters"
      << std::setw(22) << "final loss" << std::setw(12) << "rounds<=thr" << std::setw(10)
      << "speedup" << '\n';
  for (const OptimizerReport& opt : report.optimizers) {
    std::ostringstream loss;
    if (opt.curve.mean.empty()) {
      loss << "--";
    } else {
      loss << std::setprecision(4) << opt.curve.mean.back() << " +/- "
           << std::setprecision(2) << opt.curve.stderr_.back();
    }
    std::ostringstream reach;
    const auto r = rounds_to_loss(opt.curve, report.loss_threshold);
    if (r) {
      reach << *r;
    } else {
      reach << "--";
    }
    std::ostringstream sp;
    const auto s = speedup(ref.curve, opt.curve);
    if (s) {
      sp << std::setprecision(3) << *s;
    } else {
      sp << "--";
    }
    out << std::left << std::setw(14) << opt.name << std::setw(34)
        << hyper_to_string(opt.hyperparameters) << std::setw(22) << loss.str()
        << std::setw(12) << reach.str() << std::setw(10) << sp.str() << '\n';
  }
  return out.str();
}

EmittedFiles emit_report(const BenchReport& report, const std::string& out_dir) {
  namespace fs = std::filesystem;
  std::error_code ec;
  fs::create_directories(out_dir, ec);
  if (ec) throw ConfigError("cannot create output directory '" + out_dir + "'");

  EmittedFiles files;
  files.curves_csv = (fs::path(out_dir) / "curves.csv").string();
  files.metrics_json = (fs::path(out_dir) / "metrics.json").string();
  files.summary_txt = (fs::path(out_dir) / "summary.txt").string();

  const std::pair<const std::string*, std::string> outputs[] = {
      {&files.curves_csv, curves_to_csv(report)},
      {&files.metrics_json, metrics_to_json(report) + "\n"},
      {&files.summary_txt, summary_table(report)},
  };
  for (const auto& [path, text] : outputs) {
    std::ofstream f(*path, std::ios::binary);
    if (!f) throw ConfigError("cannot write '" + *path + "'");
    f << text;
  }
  return files;
}

}  // namespace commlearn
