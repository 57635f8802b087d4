#include "commlearn/config.hpp"

#include <algorithm>
#include <charconv>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "commlearn/errors.hpp"
#include "commlearn/global_opt.hpp"

namespace commlearn {

namespace {

std::string trim(const std::string& s) {
  std::size_t a = s.find_first_not_of(" \t\r");
  if (a == std::string::npos) return "";
  std::size_t b = s.find_last_not_of(" \t\r");
  return s.substr(a, b - a + 1);
}

struct Entry {
  std::string key;
  std::string value;
  int line = 0;
  bool used = false;
};

struct Section {
  std::string name;  // "optimizer" sections keep the full "optimizer:foo" header
  int line = 0;
  std::vector<Entry> entries;
};

[[noreturn]] void fail_at(const std::string& origin, int line, const std::string& msg) {
  throw ConfigError(origin + ":" + std::to_string(line) + ": " + msg);
}

std::vector<Section> split_sections(const std::string& text, const std::string& origin) {
  std::vector<Section> sections;
  std::istringstream in(text);
  std::string raw;
  int line = 0;
  while (std::getline(in, raw)) {
    ++line;
    const std::string s = trim(raw);
    if (s.empty() || s[0] == '#' || s[0] == ';') continue;
    if (s.front() == '[') {
      if (s.back() != ']' || s.size() < 3) fail_at(origin, line, "malformed section header");
      sections.push_back({trim(s.substr(1, s.size() - 2)), line, {}});
      continue;
    }
    const std::size_t eq = s.find('=');
    if (eq == std::string::npos) fail_at(origin, line, "expected 'key = value'");
    if (sections.empty()) fail_at(origin, line, "entry outside any section");
    Entry e;
    e.key = trim(s.substr(0, eq));
    e.value = trim(s.substr(eq + 1));
    e.line = line;
    if (e.key.empty()) fail_at(origin, line, "empty key");
    for (const Entry& prev : sections.back().entries) {
      if (prev.key == e.key) {
        fail_at(origin, line, "duplicate key '" + e.key + "' in [" + sections.back().name + "]");
      }
    }
    sections.back().entries.push_back(std::move(e));
  }
  return sections;
}

// Marks entries as consumed; leftover keys are reported as unknown.
class SectionReader {
 public:
  SectionReader(Section& sec, const std::string& origin) : sec_(sec), origin_(origin) {}

  std::optional<std::string> maybe(const std::string& key) {
    for (Entry& e : sec_.entries) {
      if (e.key == key) {
        e.used = true;
        return e.value;
      }
    }
    return std::nullopt;
  }

  std::string require(const std::string& key) {
    auto v = maybe(key);
    if (!v) {
      fail_at(origin_, sec_.line,
              "missing required key '" + key + "' in [" + sec_.name + "]");
    }
    return *v;
  }

  int line_of(const std::string& key) const {
    for (const Entry& e : sec_.entries) {
      if (e.key == key) return e.line;
    }
    return sec_.line;
  }

  void finish() {
    for (const Entry& e : sec_.entries) {
      if (!e.used) {
        fail_at(origin_, e.line, "unknown key '" + e.key + "' in [" + sec_.name + "]");
      }
    }
  }

  const std::string& origin() const { return origin_; }
  const Section& section() const { return sec_; }

 private:
  Section& sec_;
  const std::string& origin_;
};

double parse_double(SectionReader& r, const std::string& key, const std::string& value) {
  char* end = nullptr;
  const double x = std::strtod(value.c_str(), &end);
  if (end == value.c_str() || *end != '\0') {
    fail_at(r.origin(), r.line_of(key), "'" + key + "' is not a number: '" + value + "'");
  }
  return x;
}

long long parse_int(SectionReader& r, const std::string& key, const std::string& value) {
  char* end = nullptr;
  const long long x = std::strtoll(value.c_str(), &end, 10);
  if (end == value.c_str() || *end != '\0') {
    fail_at(r.origin(), r.line_of(key), "'" + key + "' is not an integer: '" + value + "'");
  }
  return x;
}

std::uint64_t parse_u64(SectionReader& r, const std::string& key, const std::string& value) {
  char* end = nullptr;
  const unsigned long long x = std::strtoull(value.c_str(), &end, 10);
  if (end == value.c_str() || *end != '\0' || value[0] == '-') {
    fail_at(r.origin(), r.line_of(key),
            "'" + key + "' is not a non-negative integer: '" + value + "'");
  }
  return x;
}

bool parse_bool(SectionReader& r, const std::string& key, const std::string& value) {
  if (value == "true" || value == "1") return true;
  if (value == "false" || value == "0") return false;
  fail_at(r.origin(), r.line_of(key), "'" + key + "' must be true or false");
}

std::vector<std::string> split_list(const std::string& value) {
  std::vector<std::string> parts;
  std::string cur;
  for (char c : value) {
    if (c == ' ' || c == '\t' || c == ',') {
      if (!cur.empty()) parts.push_back(std::move(cur));
      cur.clear();
    } else {
      cur.push_back(c);
    }
  }
  if (!cur.empty()) parts.push_back(std::move(cur));
  return parts;
}

std::vector<std::uint64_t> parse_seed_list(SectionReader& r, const std::string& key,
                                           const std::string& value) {
  std::vector<std::uint64_t> seeds;
  for (const std::string& part : split_list(value)) {
    seeds.push_back(parse_u64(r, key, part));
  }
  if (seeds.empty()) fail_at(r.origin(), r.line_of(key), "'" + key + "' lists no seeds");
  return seeds;
}

std::vector<double> parse_double_list(SectionReader& r, const std::string& key,
                                      const std::string& value) {
  std::vector<double> out;
  for (const std::string& part : split_list(value)) {
    out.push_back(parse_double(r, key, part));
  }
  if (out.empty()) fail_at(r.origin(), r.line_of(key), "'" + key + "' lists no values");
  return out;
}

TaskConfig parse_task(Section& sec, const std::string& origin) {
  SectionReader r(sec, origin);
  TaskConfig t;
  t.dataset = r.require("dataset");
  if (t.dataset != "synthetic" && t.dataset != "fmnist" && t.dataset != "cifar10") {
    fail_at(origin, r.line_of("dataset"), "dataset must be synthetic, fmnist or cifar10");
  }
  t.arch = r.require("arch");
  try {
    arch_kind_from_name(t.arch);
  } catch (const ConfigError& e) {
    fail_at(origin, r.line_of("arch"), e.what());
  }
  t.K = static_cast<int>(parse_int(r, "K", r.require("K")));
  t.H = static_cast<int>(parse_int(r, "H", r.require("H")));
  t.gamma = parse_double(r, "gamma", r.require("gamma"));
  if (auto v = r.maybe("b_loc")) t.b_loc = static_cast<int>(parse_int(r, "b_loc", *v));
  if (auto v = r.maybe("hidden_width")) {
    t.hidden_width = static_cast<int>(parse_int(r, "hidden_width", *v));
  }
  if (t.dataset == "synthetic") {
    if (auto v = r.maybe("num_classes")) {
      t.num_classes = static_cast<int>(parse_int(r, "num_classes", *v));
    }
    if (auto v = r.maybe("dims")) t.dims = static_cast<int>(parse_int(r, "dims", *v));
    if (auto v = r.maybe("samples_per_class")) {
      t.samples_per_class = static_cast<int>(parse_int(r, "samples_per_class", *v));
    }
    if (auto v = r.maybe("cluster_std")) t.cluster_std = parse_double(r, "cluster_std", *v);
    if (auto v = r.maybe("data_seed")) t.data_seed = parse_u64(r, "data_seed", *v);
  }
  r.finish();
  return t;
}

RunSection parse_run(Section& sec, const std::string& origin) {
  SectionReader r(sec, origin);
  RunSection run;
  run.T = parse_int(r, "T", r.require("T"));
  run.seeds = parse_seed_list(r, "seeds", r.require("seeds"));
  if (auto v = r.maybe("out")) run.out = *v;
  if (auto v = r.maybe("loss_threshold")) {
    run.loss_threshold = parse_double(r, "loss_threshold", *v);
  }
  if (auto v = r.maybe("per_seed_speedups")) {
    run.per_seed_speedups = parse_bool(r, "per_seed_speedups", *v);
  }
  r.finish();
  return run;
}

OptimizerConfig parse_optimizer(Section& sec, const std::string& origin) {
  SectionReader r(sec, origin);
  OptimizerConfig opt;
  const std::size_t colon = sec.name.find(':');
  if (colon != std::string::npos) opt.name = trim(sec.name.substr(colon + 1));
  opt.kind = r.require("kind");
  if (opt.name.empty()) opt.name = opt.kind;
  if (opt.kind == "sgd" || opt.kind == "adam") {
    opt.lr = parse_double(r, "lr", r.require("lr"));
  } else if (opt.kind == "slowmo") {
    if (auto v = r.maybe("alpha")) opt.alpha = parse_double(r, "alpha", *v);
    if (auto v = r.maybe("beta")) opt.beta = parse_double(r, "beta", *v);
  } else if (opt.kind == "local_sgd") {
    // no extra keys
  } else {
    try {
      variant_from_name(opt.kind);
    } catch (const ConfigError&) {
      fail_at(origin, r.line_of("kind"), "unknown optimizer kind '" + opt.kind + "'");
    }
    opt.checkpoint = r.require("checkpoint");
  }
  r.finish();
  return opt;
}

MetaSection parse_meta(Section& sec, const std::string& origin) {
  SectionReader r(sec, origin);
  MetaSection m;
  m.variant = r.require("variant");
  try {
    variant_from_name(m.variant);
  } catch (const ConfigError& e) {
    fail_at(origin, r.line_of("variant"), e.what());
  }
  if (auto v = r.maybe("objective")) {
    if (*v != "train" && *v != "valid") {
      fail_at(origin, r.line_of("objective"), "objective must be train or valid");
    }
    m.objective = *v;
  }
  if (auto v = r.maybe("seed")) m.seed = parse_u64(r, "seed", *v);
  if (auto v = r.maybe("out")) m.out = *v;
  MetaConfig& c = m.meta;
  if (auto v = r.maybe("steps")) c.steps = static_cast<int>(parse_int(r, "steps", *v));
  if (auto v = r.maybe("task_batch")) {
    c.task_batch = static_cast<int>(parse_int(r, "task_batch", *v));
  }
  if (auto v = r.maybe("pes_pairs")) {
    c.pes_pairs = static_cast<int>(parse_int(r, "pes_pairs", *v));
  }
  if (auto v = r.maybe("trunc_min")) {
    c.trunc_min = static_cast<int>(parse_int(r, "trunc_min", *v));
  }
  if (auto v = r.maybe("trunc_max")) {
    c.trunc_max = static_cast<int>(parse_int(r, "trunc_max", *v));
  }
  if (auto v = r.maybe("pes_sigma")) c.pes_sigma = parse_double(r, "pes_sigma", *v);
  if (auto v = r.maybe("segment_len")) {
    c.segment_len = static_cast<int>(parse_int(r, "segment_len", *v));
  }
  if (auto v = r.maybe("lr_peak")) c.lr_peak = parse_double(r, "lr_peak", *v);
  if (auto v = r.maybe("lr_init")) c.lr_init = parse_double(r, "lr_init", *v);
  if (auto v = r.maybe("lr_final")) c.lr_final = parse_double(r, "lr_final", *v);
  if (auto v = r.maybe("warmup")) c.warmup = static_cast<int>(parse_int(r, "warmup", *v));
  if (auto v = r.maybe("weight_decay")) c.weight_decay = parse_double(r, "weight_decay", *v);
  if (auto v = r.maybe("checkpoint_every")) {
    c.checkpoint_every = static_cast<int>(parse_int(r, "checkpoint_every", *v));
  }
  r.finish();
  return m;
}

SweepSection parse_sweep(Section& sec, const std::string& origin) {
  SectionReader r(sec, origin);
  SweepSection s;
  s.family = r.require("family");
  if (s.family != "sgd" && s.family != "adam" && s.family != "local_sgd" &&
      s.family != "slowmo") {
    fail_at(origin, r.line_of("family"), "family must be sgd, adam, local_sgd or slowmo");
  }
  s.T = parse_int(r, "T", r.require("T"));
  if (auto v = r.maybe("seeds")) s.seeds = parse_seed_list(r, "seeds", *v);
  if (auto v = r.maybe("out")) s.out = *v;
  if (auto v = r.maybe("gammas")) s.gammas = parse_double_list(r, "gammas", *v);
  if (auto v = r.maybe("alphas")) s.alphas = parse_double_list(r, "alphas", *v);
  if (auto v = r.maybe("betas")) s.betas = parse_double_list(r, "betas", *v);
  if (auto v = r.maybe("lrs")) s.lrs = parse_double_list(r, "lrs", *v);
  r.finish();
  return s;
}

std::string fmt_double(double x) {
  char buf[64];
  const auto res = std::to_chars(buf, buf + sizeof(buf), x);
  return std::string(buf, res.ptr);
}

std::string fmt_list(const std::vector<double>& xs) {
  std::string out;
  for (std::size_t i = 0; i < xs.size(); ++i) {
    if (i) out += ' ';
    out += fmt_double(xs[i]);
  }
  return out;
}

std::string fmt_seeds(const std::vector<std::uint64_t>& xs) {
  std::string out;
  for (std::size_t i = 0; i < xs.size(); ++i) {
    if (i) out += ' ';
    out += std::to_string(xs[i]);
  }
  return out;
}

void serialize_task(std::ostringstream& out, const TaskConfig& t) {
  out << "[task]\n";
  out << "dataset = " << t.dataset << '\n';
  if (t.dataset == "synthetic") {
    out << "num_classes = " << t.num_classes << '\n';
    out << "dims = " << t.dims << '\n';
    out << "samples_per_class = " << t.samples_per_class << '\n';
    out << "cluster_std = " << fmt_double(t.cluster_std) << '\n';
    out << "data_seed = " << t.data_seed << '\n';
  }
  out << "arch = " << t.arch << '\n';
  if (t.hidden_width > 0) out << "hidden_width = " << t.hidden_width << '\n';
  out << "K = " << t.K << '\n';
  out << "H = " << t.H << '\n';
  out << "gamma = " << fmt_double(t.gamma) << '\n';
  out << "b_loc = " << t.b_loc << '\n';
}

}  // namespace

ParsedConfig parse_config_text(const std::string& text, const std::string& origin) {
  std::vector<Section> sections = split_sections(text, origin);

  Section* task_sec = nullptr;
  Section* run_sec = nullptr;
  Section* meta_sec = nullptr;
  Section* sweep_sec = nullptr;
  std::vector<Section*> opt_secs;
  for (Section& sec : sections) {
    const bool is_opt = sec.name == "optimizer" || sec.name.rfind("optimizer:", 0) == 0;
    Section** slot = nullptr;
    if (sec.name == "task") {
      slot = &task_sec;
    } else if (sec.name == "run") {
      slot = &run_sec;
    } else if (sec.name == "meta") {
      slot = &meta_sec;
    } else if (sec.name == "sweep") {
      slot = &sweep_sec;
    } else if (is_opt) {
      opt_secs.push_back(&sec);
      continue;
    } else {
      fail_at(origin, sec.line, "unknown section [" + sec.name + "]");
    }
    if (*slot) fail_at(origin, sec.line, "duplicate section [" + sec.name + "]");
    *slot = &sec;
  }
  if (!task_sec) throw ConfigError(origin + ": missing required section [task]");

  const int modes = (run_sec != nullptr) + (meta_sec != nullptr) + (sweep_sec != nullptr);
  if (modes != 1) {
    throw ConfigError(origin + ": exactly one of [run], [meta] or [sweep] is required");
  }

  ParsedConfig parsed;
  TaskConfig task = parse_task(*task_sec, origin);
  if (run_sec) {
    if (opt_secs.empty()) {
      throw ConfigError(origin + ": a [run] config needs at least one [optimizer:*] section");
    }
    RunConfig cfg;
    cfg.task = std::move(task);
    cfg.run = parse_run(*run_sec, origin);
    for (Section* sec : opt_secs) {
      OptimizerConfig opt = parse_optimizer(*sec, origin);
      for (const OptimizerConfig& prev : cfg.optimizers) {
        if (prev.name == opt.name) {
          fail_at(origin, sec->line, "duplicate optimizer name '" + opt.name + "'");
        }
      }
      cfg.optimizers.push_back(std::move(opt));
    }
    parsed.kind = ConfigKind::run;
    parsed.run = std::move(cfg);
    return parsed;
  }
  if (!opt_secs.empty()) {
    fail_at(origin, opt_secs.front()->line,
            "[optimizer:*] sections are only valid in a [run] config");
  }
  if (meta_sec) {
    MetaTrainFile cfg;
    cfg.task = std::move(task);
    cfg.meta = parse_meta(*meta_sec, origin);
    parsed.kind = ConfigKind::meta_train;
    parsed.meta = std::move(cfg);
    return parsed;
  }
  SweepFile cfg;
  cfg.task = std::move(task);
  cfg.sweep = parse_sweep(*sweep_sec, origin);
  parsed.kind = ConfigKind::sweep;
  parsed.sweep = std::move(cfg);
  return parsed;
}

ParsedConfig parse_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config file '" + path + "'");
  std::ostringstream buf;
  buf << in.rdbuf();
  return parse_config_text(buf.str(), path);
}

std::string serialize_config(const RunConfig& cfg) {
  std::ostringstream out;
  serialize_task(out, cfg.task);
  out << "\n[run]\n";
  out << "T = " << cfg.run.T << '\n';
  out << "seeds = " << fmt_seeds(cfg.run.seeds) << '\n';
  if (!cfg.run.out.empty()) out << "out = " << cfg.run.out << '\n';
  out << "loss_threshold = " << fmt_double(cfg.run.loss_threshold) << '\n';
  out << "per_seed_speedups = " << (cfg.run.per_seed_speedups ? "true" : "false") << '\n';
  for (const OptimizerConfig& opt : cfg.optimizers) {
    out << "\n[optimizer:" << opt.name << "]\n";
    out << "kind = " << opt.kind << '\n';
    if (opt.kind == "sgd" || opt.kind == "adam") {
      out << "lr = " << fmt_double(opt.lr) << '\n';
    } else if (opt.kind == "slowmo") {
      out << "alpha = " << fmt_double(opt.alpha) << '\n';
      out << "beta = " << fmt_double(opt.beta) << '\n';
    } else if (opt.kind != "local_sgd") {
      out << "checkpoint = " << opt.checkpoint << '\n';
    }
  }
  return out.str();
}

std::string serialize_config(const MetaTrainFile& cfg) {
  std::ostringstream out;
  serialize_task(out, cfg.task);
  const MetaConfig& c = cfg.meta.meta;
  out << "\n[meta]\n";
  out << "variant = " << cfg.meta.variant << '\n';
  out << "objective = " << cfg.meta.objective << '\n';
  out << "seed = " << cfg.meta.seed << '\n';
  if (!cfg.meta.out.empty()) out << "out = " << cfg.meta.out << '\n';
  out << "steps = " << c.steps << '\n';
  out << "task_batch = " << c.task_batch << '\n';
  out << "pes_pairs = " << c.pes_pairs << '\n';
  out << "trunc_min = " << c.trunc_min << '\n';
  out << "trunc_max = " << c.trunc_max << '\n';
  out << "pes_sigma = " << fmt_double(c.pes_sigma) << '\n';
  out << "segment_len = " << c.segment_len << '\n';
  out << "lr_peak = " << fmt_double(c.lr_peak) << '\n';
  out << "lr_init = " << fmt_double(c.lr_init) << '\n';
  out << "lr_final = " << fmt_double(c.lr_final) << '\n';
  out << "warmup = " << c.warmup << '\n';
  out << "weight_decay = " << fmt_double(c.weight_decay) << '\n';
  out << "checkpoint_every = " << c.checkpoint_every << '\n';
  return out.str();
}

std::string serialize_config(const SweepFile& cfg) {
  std::ostringstream out;
  serialize_task(out, cfg.task);
  out << "\n[sweep]\n";
  out << "family = " << cfg.sweep.family << '\n';
  out << "seeds = " << fmt_seeds(cfg.sweep.seeds) << '\n';
  out << "T = " << cfg.sweep.T << '\n';
  if (!cfg.sweep.out.empty()) out << "out = " << cfg.sweep.out << '\n';
  if (!cfg.sweep.gammas.empty()) out << "gammas = " << fmt_list(cfg.sweep.gammas) << '\n';
  if (!cfg.sweep.alphas.empty()) out << "alphas = " << fmt_list(cfg.sweep.alphas) << '\n';
  if (!cfg.sweep.betas.empty()) out << "betas = " << fmt_list(cfg.sweep.betas) << '\n';
  if (!cfg.sweep.lrs.empty()) out << "lrs = " << fmt_list(cfg.sweep.lrs) << '\n';
  return out.str();
}

bool operator==(const TaskConfig& a, const TaskConfig& b) {
  return a.dataset == b.dataset && a.num_classes == b.num_classes && a.dims == b.dims &&
         a.samples_per_class == b.samples_per_class && a.cluster_std == b.cluster_std &&
         a.data_seed == b.data_seed && a.arch == b.arch &&
         a.hidden_width == b.hidden_width && a.K == b.K && a.H == b.H &&
         a.gamma == b.gamma && a.b_loc == b.b_loc;
}

bool operator==(const OptimizerConfig& a, const OptimizerConfig& b) {
  return a.name == b.name && a.kind == b.kind && a.lr == b.lr && a.alpha == b.alpha &&
         a.beta == b.beta && a.checkpoint == b.checkpoint;
}

bool operator==(const RunSection& a, const RunSection& b) {
  return a.T == b.T && a.seeds == b.seeds && a.out == b.out &&
         a.loss_threshold == b.loss_threshold &&
         a.per_seed_speedups == b.per_seed_speedups;
}

bool operator==(const RunConfig& a, const RunConfig& b) {
  return a.task == b.task && a.run == b.run && a.optimizers == b.optimizers;
}

Dataset build_dataset(const TaskConfig& task, const std::string& data_dir) {
  if (task.dataset == "synthetic") {
    SyntheticSpec spec;
    spec.num_classes = task.num_classes;
    spec.dims = task.dims;
    spec.samples_per_class = task.samples_per_class;
    spec.cluster_std = task.cluster_std;
    spec.seed = task.data_seed;
    return make_synthetic(spec);
  }
  namespace fs = std::filesystem;
  const fs::path root = data_dir.empty() ? fs::path(".") : fs::path(data_dir);
  if (task.dataset == "fmnist") {
    auto pick = [&](const std::string& stem) -> std::string {
      for (const char* suffix : {".gz", ""}) {
        const fs::path p = root / "fmnist" / (stem + suffix);
        if (fs::exists(p)) return p.string();
      }
      throw DataFormatError("cannot find " + (root / "fmnist" / stem).string() +
                            "[.gz]; set --data-dir or COMMLEARN_DATA_DIR");
    };
    return load_idx_pair(pick("train-images-idx3-ubyte"), pick("train-labels-idx1-ubyte"));
  }
  if (task.dataset == "cifar10") {
    const fs::path dir = root / "cifar-10-batches-bin";
    if (!fs::is_directory(dir)) {
      throw DataFormatError("cannot find " + dir.string() +
                            "; set --data-dir or COMMLEARN_DATA_DIR");
    }
    return load_cifar_binary(dir.string());
  }
  throw ConfigError("unknown dataset '" + task.dataset + "'");
}

ArchSpec build_arch(const TaskConfig& task, const Dataset& ds) {
  const ArchKind kind = arch_kind_from_name(task.arch);
  const std::vector<std::int64_t> input = ds.example_shape();
  switch (kind) {
    case ArchKind::linear_toy:
      return ArchSpec::linear_toy(input, ds.num_classes);
    case ArchKind::mlp2:
      return ArchSpec::mlp2(input, ds.num_classes,
                            task.hidden_width > 0 ? task.hidden_width : 128);
    case ArchKind::mlp3:
      return ArchSpec::mlp3(input, ds.num_classes,
                            task.hidden_width > 0 ? task.hidden_width : 128);
    case ArchKind::cnn3:
      return ArchSpec::cnn3(input, ds.num_classes,
                            task.hidden_width > 0 ? task.hidden_width : 32);
  }
  throw ConfigError("unknown architecture '" + task.arch + "'");
}

RoundConfig build_round_config(const TaskConfig& task) {
  RoundConfig cfg;
  cfg.workers = task.K;
  cfg.local_steps = task.H;
  cfg.gamma = task.gamma;
  cfg.b_loc = task.b_loc;
  cfg.validate();
  return cfg;
}

}  // namespace commlearn
