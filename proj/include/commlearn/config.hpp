#pragma once

#include <cstdint>
#include <cstdio>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "commlearn/bench.hpp"
#include "commlearn/data.hpp"
#include "commlearn/meta.hpp"

namespace commlearn {

// [task] section: dataset + architecture + round configuration.
struct TaskConfig {
  std::string dataset;  // synthetic | fmnist | cifar10
  // synthetic parameters
  int num_classes = 2;
  int dims = 2;
  int samples_per_class = 100;
  double cluster_std = 0.15;
  std::uint64_t data_seed = 0;
  // architecture
  std::string arch;  // linear_toy | mlp2 | mlp3 | cnn3
  int hidden_width = 0;  // 0 = architecture default
  // round configuration
  int K = 0;
  int H = 0;
  double gamma = 0.0;
  int b_loc = 128;
};

// [optimizer] / [optimizer:NAME] section.
struct OptimizerConfig {
  std::string name;
  std::string kind;  // local_sgd | slowmo | sgd | adam | lopt_a | lagg_a | lopt_plain | lagg_plain
  double lr = 0.0;          // sgd/adam
  double alpha = 1.0;       // slowmo
  double beta = 0.0;        // slowmo
  std::string checkpoint;   // learned variants
};

// [run] section.
struct RunSection {
  std::int64_t T = 0;
  std::vector<std::uint64_t> seeds;
  std::string out;
  double loss_threshold = 0.2;
  bool per_seed_speedups = false;
};

// [meta] section.
struct MetaSection {
  MetaConfig meta;
  std::string variant;  // lopt_a | lagg_a | lopt_plain | lagg_plain
  std::string objective = "train";  // train | validation
  std::uint64_t seed = 0;
  std::string out;
};

// [sweep] section.
struct SweepSection {
  std::string family;
  std::vector<std::uint64_t> seeds = {1, 2, 3};
  std::int64_t T = 0;
  std::string out;
  // optional grid overrides; empty means the default grid for the family
  std::vector<double> gammas, alphas, betas, lrs;
};

struct RunConfig {
  TaskConfig task;
  RunSection run;
  std::vector<OptimizerConfig> optimizers;
};

struct MetaTrainFile {
  TaskConfig task;
  MetaSection meta;
};

struct SweepFile {
  TaskConfig task;
  SweepSection sweep;
};

enum class ConfigKind { run, meta_train, sweep };

struct ParsedConfig {
  ConfigKind kind;
  std::optional<RunConfig> run;
  std::optional<MetaTrainFile> meta;
  std::optional<SweepFile> sweep;
};

// Parses the key = value section format. Unknown sections or keys are
// rejected with the offending line number; missing required fields are
// reported by name.
ParsedConfig parse_config(const std::string& path);
ParsedConfig parse_config_text(const std::string& text, const std::string& origin = "<string>");

// Serializations round-trip: parse(serialize(cfg)) == cfg.
std::string serialize_config(const RunConfig& cfg);
std::string serialize_config(const MetaTrainFile& cfg);
std::string serialize_config(const SweepFile& cfg);

bool operator==(const TaskConfig& a, const TaskConfig& b);
bool operator==(const OptimizerConfig& a, const OptimizerConfig& b);
bool operator==(const RunSection& a, const RunSection& b);
bool operator==(const RunConfig& a, const RunConfig& b);

// Materializes the configured dataset; file-backed datasets resolve relative
// to data_dir (from --data-dir or COMMLEARN_DATA_DIR).
Dataset build_dataset(const TaskConfig& task, const std::string& data_dir);
ArchSpec build_arch(const TaskConfig& task, const Dataset& ds);
RoundConfig build_round_config(const TaskConfig& task);

// Invariant suite behind the `selftest` subcommand. Prints one line per check
// to `out`; returns the number of failures.
int run_selftest(std::FILE* out);

}  // namespace commlearn
