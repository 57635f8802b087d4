// commlearn: meta-train learned global optimizers, benchmark them against
// local SGD / SlowMo / SGD / Adam, and emit communication-round reports.

#include <atomic>
#include <cstdio>
#include <cstdlib>
#include <exception>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "json.hpp"

#include "commlearn/bench.hpp"
#include "commlearn/config.hpp"
#include "commlearn/errors.hpp"
#include "commlearn/global_opt.hpp"
#include "commlearn/meta.hpp"
#include "commlearn/parallel.hpp"

namespace {

namespace fs = std::filesystem;
using namespace commlearn;

struct CommonOpts {
  std::string config;
  std::string data_dir;
  std::string out;
  int jobs = 0;
  std::optional<std::uint64_t> seed;
};

std::string resolve_data_dir(const CommonOpts& opts) {
  if (!opts.data_dir.empty()) return opts.data_dir;
  if (const char* env = std::getenv("COMMLEARN_DATA_DIR")) {
    if (*env) return env;
  }
  return "data";
}

std::string resolve_out_dir(const CommonOpts& opts, const std::string& from_config) {
  if (!opts.out.empty()) return opts.out;
  if (!from_config.empty()) return from_config;
  throw ConfigError("no output directory: set 'out' in the config or pass --out");
}

void write_text_file(const fs::path& path, const std::string& text) {
  fs::create_directories(path.parent_path());
  std::ofstream f(path, std::ios::binary);
  if (!f) throw ConfigError("cannot write '" + path.string() + "'");
  f << text;
}

struct BuiltTask {
  Dataset dataset;
  TrainTask task;
};

BuiltTask build_task(const TaskConfig& cfg, const std::string& data_dir) {
  BuiltTask built;
  built.dataset = build_dataset(cfg, data_dir);
  built.task.dataset = &built.dataset;
  built.task.arch = build_arch(cfg, built.dataset);
  built.task.round = build_round_config(cfg);
  return built;
}

HyperPoint hyper_for(const TaskConfig& task, const OptimizerConfig& opt) {
  HyperPoint p;
  if (opt.kind == "sgd" || opt.kind == "adam") {
    p["lr"] = opt.lr;
  } else if (opt.kind == "slowmo") {
    p["gamma"] = task.gamma;
    p["alpha"] = opt.alpha;
    p["beta"] = opt.beta;
  } else if (opt.kind == "local_sgd") {
    p["gamma"] = task.gamma;
  }
  return p;
}

// Fresh per-run instance because several optimizers carry state across rounds.
TrainingCurve run_one(const TrainTask& task, const OptimizerConfig& opt,
                      const OptimizerParams* phi, std::int64_t rounds, std::uint64_t seed) {
  if (opt.kind == "sgd" || opt.kind == "adam") {
    BaselineHyper hyper;
    hyper.lr = opt.lr;
    const BaselineKind kind = opt.kind == "sgd" ? BaselineKind::sgd : BaselineKind::adam;
    return run_nonlocal_baseline(task, kind, hyper, rounds, seed);
  }
  std::unique_ptr<GlobalOptimizer> go;
  if (opt.kind == "local_sgd") {
    go = make_average_optimizer();
  } else if (opt.kind == "slowmo") {
    go = make_slowmo_optimizer(task.arch, opt.alpha, opt.beta, task.round.gamma);
  } else {
    go = make_learned_optimizer(*phi, task.arch);
  }
  TrainingCurve curve = run_training(task, *go, rounds, seed);
  curve.optimizer = opt.name;
  return curve;
}

std::string raw_curves_csv(const std::vector<OptimizerReport>& optimizers) {
  std::ostringstream out;
  out << "optimizer,seed,round,loss,diverged\n";
  out << std::setprecision(17);
  for (const OptimizerReport& opt : optimizers) {
    for (const TrainingCurve& curve : opt.raw) {
      for (std::size_t t = 0; t < curve.losses.size(); ++t) {
        out << opt.name << ',' << curve.seed << ',' << (t + 1) << ',' << curve.losses[t]
            << ',' << (curve.diverged ? 1 : 0) << '\n';
      }
    }
  }
  return out.str();
}

int cmd_selftest() {
  const int failures = run_selftest(stdout);
  if (failures > 0) {
    std::fprintf(stderr, "selftest: %d check(s) failed\n", failures);
    return 1;
  }
  std::fprintf(stderr, "selftest: all checks passed\n");
  return 0;
}

int cmd_meta_train(const CommonOpts& opts) {
  ParsedConfig parsed = parse_config(opts.config);
  if (parsed.kind != ConfigKind::meta_train) {
    throw ConfigError("'" + opts.config + "' is not a meta-training config ([meta] section)");
  }
  const MetaTrainFile& cfg = *parsed.meta;
  const std::string out_dir = resolve_out_dir(opts, cfg.meta.out);
  BuiltTask built = build_task(cfg.task, resolve_data_dir(opts));

  TaskSpec spec;
  spec.dataset = built.task.dataset;
  spec.arch = built.task.arch;
  spec.round = built.task.round;
  spec.objective = cfg.meta.objective == "valid" ? Split::valid : Split::train;

  const std::uint64_t seed = opts.seed.value_or(cfg.meta.seed);
  const OptVariant variant = variant_from_name(cfg.meta.variant);

  fs::create_directories(out_dir);
  write_text_file(fs::path(out_dir) / "config.ini", serialize_config(cfg));

  std::fprintf(stderr, "[meta-train] %s, %d steps, seed %llu -> %s\n",
               cfg.meta.variant.c_str(), cfg.meta.meta.steps,
               static_cast<unsigned long long>(seed), out_dir.c_str());
  MetaTrainResult result = meta_train(
      cfg.meta.meta, variant, {spec}, seed,
      [&](std::int64_t step, const OptimizerParams& phi) {
        char name[64];
        std::snprintf(name, sizeof(name), "checkpoint_%06lld.json",
                      static_cast<long long>(step));
        save_checkpoint(phi, (fs::path(out_dir) / name).string());
        std::fprintf(stderr, "[meta-train] step %lld/%d: checkpoint %s\n",
                     static_cast<long long>(step), cfg.meta.meta.steps, name);
      });

  save_checkpoint(result.phi, (fs::path(out_dir) / "checkpoint_final.json").string());
  write_text_file(fs::path(out_dir) / "meta_log.csv", meta_log_to_csv(result.log));
  const double final_loss = result.log.empty() ? 0.0 : result.log.back().mean_meta_loss;
  std::fprintf(stderr, "[meta-train] done; final mean meta-loss %.6f\n", final_loss);
  return 0;
}

BenchReport evaluate_report(const RunConfig& cfg, const BuiltTask& built,
                            const std::vector<std::uint64_t>& seeds) {
  // Checkpoints load once up front so config errors surface before any run.
  std::vector<std::optional<OptimizerParams>> phis(cfg.optimizers.size());
  for (std::size_t i = 0; i < cfg.optimizers.size(); ++i) {
    const OptimizerConfig& opt = cfg.optimizers[i];
    if (opt.kind == "sgd" || opt.kind == "adam" || opt.kind == "local_sgd" ||
        opt.kind == "slowmo") {
      continue;
    }
    OptimizerParams phi = load_checkpoint(opt.checkpoint);
    if (phi.variant != variant_from_name(opt.kind)) {
      throw ConfigError("checkpoint '" + opt.checkpoint + "' holds a " +
                        variant_name(phi.variant) + " optimizer, config says " + opt.kind);
    }
    if (variant_is_worker_aware(phi.variant) && phi.workers != cfg.task.K) {
      throw ConfigError("checkpoint '" + opt.checkpoint + "' was trained for K=" +
                        std::to_string(phi.workers) + " but the task has K=" +
                        std::to_string(cfg.task.K));
    }
    phis[i] = std::move(phi);
  }

  const std::int64_t num_opts = static_cast<std::int64_t>(cfg.optimizers.size());
  const std::int64_t num_seeds = static_cast<std::int64_t>(seeds.size());
  std::vector<TrainingCurve> curves(num_opts * num_seeds);
  std::vector<std::exception_ptr> failures(num_opts * num_seeds);
  std::atomic<int> done{0};
  parallel_for(num_opts * num_seeds, [&](std::int64_t idx) {
    const std::int64_t o = idx / num_seeds;
    const std::int64_t s = idx % num_seeds;
    try {
      curves[idx] = run_one(built.task, cfg.optimizers[o],
                            phis[o] ? &*phis[o] : nullptr, cfg.run.T, seeds[s]);
    } catch (...) {
      failures[idx] = std::current_exception();
    }
    const int k = ++done;
    std::fprintf(stderr, "[evaluate] %d/%lld runs finished (%s seed %llu)\n", k,
                 static_cast<long long>(num_opts * num_seeds),
                 cfg.optimizers[o].name.c_str(),
                 static_cast<unsigned long long>(seeds[s]));
  });
  for (const std::exception_ptr& e : failures) {
    if (e) std::rethrow_exception(e);
  }

  BenchReport report;
  report.loss_threshold = cfg.run.loss_threshold;
  report.per_seed_speedups = cfg.run.per_seed_speedups;
  report.config_snapshot = serialize_config(cfg);
  for (std::int64_t o = 0; o < num_opts; ++o) {
    OptimizerReport opt_report;
    opt_report.name = cfg.optimizers[o].name;
    opt_report.hyperparameters = hyper_for(cfg.task, cfg.optimizers[o]);
    opt_report.raw.assign(curves.begin() + o * num_seeds,
                          curves.begin() + (o + 1) * num_seeds);
    for (const TrainingCurve& c : opt_report.raw) {
      if (c.diverged) {
        std::fprintf(stderr, "[evaluate] warning: %s diverged at seed %llu\n",
                     opt_report.name.c_str(), static_cast<unsigned long long>(c.seed));
      }
    }
    opt_report.curve = aggregate(opt_report.raw);
    report.optimizers.push_back(std::move(opt_report));
  }
  report.reference = report.optimizers.front().name;
  for (const OptimizerReport& opt : report.optimizers) {
    if (opt.name == "local_sgd") {
      report.reference = "local_sgd";
      break;
    }
  }
  return report;
}

int cmd_evaluate(const CommonOpts& opts) {
  ParsedConfig parsed = parse_config(opts.config);
  if (parsed.kind != ConfigKind::run) {
    throw ConfigError("'" + opts.config + "' is not a run config ([run] section)");
  }
  const RunConfig& cfg = *parsed.run;
  const std::string out_dir = resolve_out_dir(opts, cfg.run.out);
  BuiltTask built = build_task(cfg.task, resolve_data_dir(opts));
  const std::vector<std::uint64_t> seeds =
      opts.seed ? std::vector<std::uint64_t>{*opts.seed} : cfg.run.seeds;

  BenchReport report = evaluate_report(cfg, built, seeds);
  fs::create_directories(out_dir);
  write_text_file(fs::path(out_dir) / "config.ini", serialize_config(cfg));
  write_text_file(fs::path(out_dir) / "raw_curves.csv", raw_curves_csv(report.optimizers));
  EmittedFiles files = emit_report(report, out_dir);
  std::fprintf(stderr, "[evaluate] wrote %s, %s, %s\n", files.curves_csv.c_str(),
               files.metrics_json.c_str(), files.summary_txt.c_str());
  return 0;
}

int cmd_sweep(const CommonOpts& opts) {
  ParsedConfig parsed = parse_config(opts.config);
  if (parsed.kind != ConfigKind::sweep) {
    throw ConfigError("'" + opts.config + "' is not a sweep config ([sweep] section)");
  }
  const SweepFile& cfg = *parsed.sweep;
  const std::string out_dir = resolve_out_dir(opts, cfg.sweep.out);
  BuiltTask built = build_task(cfg.task, resolve_data_dir(opts));
  const std::vector<std::uint64_t> seeds =
      opts.seed ? std::vector<std::uint64_t>{*opts.seed} : cfg.sweep.seeds;

  SweepGrid grid = default_grid(cfg.sweep.family);
  auto override_axis = [&grid](const std::string& name, const std::vector<double>& vals) {
    if (vals.empty()) return;
    for (auto& axis : grid.values) {
      if (axis.first == name) {
        axis.second = vals;
        return;
      }
    }
    throw ConfigError("the '" + grid.family + "' grid has no '" + name + "' axis");
  };
  override_axis("gamma", cfg.sweep.gammas);
  override_axis("beta", cfg.sweep.betas);
  if (grid.family == "slowmo") {
    if (!cfg.sweep.alphas.empty()) {
      // literal alpha values replace the alpha*gamma product axis
      for (auto& axis : grid.values) {
        if (axis.first == "alpha_gamma") axis = {"alpha", cfg.sweep.alphas};
      }
    }
    if (!cfg.sweep.lrs.empty()) override_axis("alpha_gamma", cfg.sweep.lrs);
  } else {
    override_axis("lr", cfg.sweep.lrs);
  }

  std::fprintf(stderr, "[sweep] family %s: %zu points x %zu seeds, T=%lld\n",
               grid.family.c_str(), enumerate_grid(grid).size(), seeds.size(),
               static_cast<long long>(cfg.sweep.T));

  const RunFn run = [&](const HyperPoint& point, std::uint64_t seed) {
    TrainTask task = built.task;
    OptimizerConfig opt;
    opt.kind = cfg.sweep.family;
    opt.name = cfg.sweep.family;
    if (opt.kind == "sgd" || opt.kind == "adam") {
      opt.lr = point.at("lr");
    } else {
      task.round.gamma = point.at("gamma");
      if (opt.kind == "slowmo") {
        opt.alpha = point.count("alpha") ? point.at("alpha")
                                         : point.at("alpha_gamma") / point.at("gamma");
        opt.beta = point.at("beta");
      }
    }
    return run_one(task, opt, nullptr, cfg.sweep.T, seed);
  };

  SweepResult result = sweep(grid, seeds, run);

  // one row per grid point, axes in sorted key order
  std::ostringstream csv;
  csv << std::setprecision(12);
  bool header = false;
  for (const SweepPointResult& pr : result.all) {
    if (!header) {
      for (const auto& [key, value] : pr.point) csv << key << ',';
      csv << "final_mean_loss,diverged\n";
      header = true;
    }
    for (const auto& [key, value] : pr.point) csv << value << ',';
    csv << pr.final_mean_loss << ',' << (pr.diverged ? 1 : 0) << '\n';
  }

  nlohmann::ordered_json best;
  best["family"] = grid.family;
  for (const auto& [key, value] : result.best) best[key] = value;
  best["final_mean_loss"] = result.all[result.best_index].final_mean_loss;
  best["seeds"] = seeds;
  best["T"] = cfg.sweep.T;

  fs::create_directories(out_dir);
  write_text_file(fs::path(out_dir) / "config.ini", serialize_config(cfg));
  write_text_file(fs::path(out_dir) / "sweep_results.csv", csv.str());
  write_text_file(fs::path(out_dir) / "best.json", best.dump(1) + "\n");
  std::ostringstream msg;
  msg << "[sweep] best:";
  for (const auto& [key, value] : result.best) msg << ' ' << key << '=' << value;
  msg << " (final mean loss " << result.all[result.best_index].final_mean_loss << ")\n";
  std::fprintf(stderr, "%s", msg.str().c_str());
  return 0;
}

int cmd_report(const CommonOpts& opts) {
  const std::string out_dir = opts.out;
  if (out_dir.empty()) throw ConfigError("report needs --out pointing at an evaluate output");
  ParsedConfig parsed = parse_config((fs::path(out_dir) / "config.ini").string());
  if (parsed.kind != ConfigKind::run) {
    throw ConfigError("'" + out_dir + "' does not hold an evaluate run");
  }
  const RunConfig& cfg = *parsed.run;

  std::ifstream raw(fs::path(out_dir) / "raw_curves.csv");
  if (!raw) throw ConfigError("cannot open '" + out_dir + "/raw_curves.csv'");
  std::string line;
  if (!std::getline(raw, line) || line != "optimizer,seed,round,loss,diverged") {
    throw DataFormatError("raw_curves.csv has an unexpected header");
  }
  std::map<std::string, std::map<std::uint64_t, TrainingCurve>> grouped;
  std::vector<std::pair<std::string, std::uint64_t>> order;
  int line_no = 1;
  while (std::getline(raw, line)) {
    ++line_no;
    if (line.empty()) continue;
    std::istringstream row(line);
    std::string name, field;
    if (!std::getline(row, name, ',')) break;
    TrainingCurve* curve = nullptr;
    std::uint64_t seed = 0;
    try {
      std::getline(row, field, ',');
      seed = std::stoull(field);
      if (!grouped[name].count(seed)) order.emplace_back(name, seed);
      curve = &grouped[name][seed];
      std::getline(row, field, ',');  // round, implied by position
      std::getline(row, field, ',');
      curve->losses.push_back(std::stod(field));
      std::getline(row, field, ',');
      curve->diverged = field == "1";
    } catch (const std::exception&) {
      throw DataFormatError("raw_curves.csv:" + std::to_string(line_no) + ": bad row");
    }
    curve->seed = seed;
    curve->optimizer = name;
  }

  BenchReport report;
  report.loss_threshold = cfg.run.loss_threshold;
  report.per_seed_speedups = cfg.run.per_seed_speedups;
  report.config_snapshot = serialize_config(cfg);
  for (const OptimizerConfig& opt : cfg.optimizers) {
    if (!grouped.count(opt.name)) {
      throw DataFormatError("raw_curves.csv holds no curves for optimizer '" + opt.name + "'");
    }
    OptimizerReport opt_report;
    opt_report.name = opt.name;
    opt_report.hyperparameters = hyper_for(cfg.task, opt);
    for (const auto& [name, seed] : order) {
      if (name == opt.name) opt_report.raw.push_back(grouped[name][seed]);
    }
    opt_report.curve = aggregate(opt_report.raw);
    report.optimizers.push_back(std::move(opt_report));
  }
  report.reference = report.optimizers.front().name;
  for (const OptimizerReport& opt : report.optimizers) {
    if (opt.name == "local_sgd") {
      report.reference = "local_sgd";
      break;
    }
  }

  emit_report(report, out_dir);
  std::fputs(summary_table(report).c_str(), stdout);
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"communication-efficient local SGD with learned global optimizers"};
  app.require_subcommand(1);

  CommonOpts opts;
  auto add_common = [&](CLI::App* sub, bool needs_config) {
    if (needs_config) {
      sub->add_option("--config", opts.config, "experiment config file")->required();
    }
    sub->add_option("--data-dir", opts.data_dir,
                    "dataset root (default $COMMLEARN_DATA_DIR or ./data)");
    sub->add_option("--out", opts.out, "output directory (overrides config)");
    sub->add_option("--jobs", opts.jobs, "max worker threads (0 = all cores)");
    sub->add_option("--seed", opts.seed, "override the config seed(s)");
  };

  CLI::App* meta = app.add_subcommand("meta-train", "meta-train a learned optimizer");
  add_common(meta, true);
  CLI::App* eval = app.add_subcommand("evaluate", "run the benchmark defined by a config");
  add_common(eval, true);
  CLI::App* swp = app.add_subcommand("sweep", "grid-search baseline hyperparameters");
  add_common(swp, true);
  CLI::App* rep = app.add_subcommand("report", "regenerate reports from stored curves");
  add_common(rep, false);
  app.add_subcommand("selftest", "run the built-in invariant checks");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    std::fprintf(stderr, "%s\n%s", e.what(), app.help().c_str());
    return 2;
  }

  set_max_threads(opts.jobs);
  try {
    if (app.got_subcommand("selftest")) return cmd_selftest();
    if (app.got_subcommand(meta)) return cmd_meta_train(opts);
    if (app.got_subcommand(eval)) return cmd_evaluate(opts);
    if (app.got_subcommand(swp)) return cmd_sweep(opts);
    if (app.got_subcommand(rep)) return cmd_report(opts);
  } catch (const Error& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 1;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "unexpected error: %s\n", e.what());
    return 1;
  }
  return 2;
}
