#include "commlearn/global_opt.hpp"

#include <cctype>
#include <cmath>
#include <cstring>
#include <fstream>
#include <sstream>

#include "json.hpp"

#include "commlearn/errors.hpp"
#include "commlearn/parallel.hpp"

namespace commlearn {

const char* variant_name(OptVariant v) {
  switch (v) {
    case OptVariant::lopt_a: return "lopt_a";
    case OptVariant::lagg_a: return "lagg_a";
    case OptVariant::lopt_plain: return "lopt_plain";
    case OptVariant::lagg_plain: return "lagg_plain";
  }
  throw ConfigError("unknown optimizer variant");
}

OptVariant variant_from_name(const std::string& name) {
  std::string s = name;
  for (char& c : s) {
    if (c == '-') c = '_';
    c = static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
  }
  if (s == "lopt_a") return OptVariant::lopt_a;
  if (s == "lagg_a") return OptVariant::lagg_a;
  if (s == "lopt_plain" || s == "lopt") return OptVariant::lopt_plain;
  if (s == "lagg_plain" || s == "lagg") return OptVariant::lagg_plain;
  throw ConfigError("unknown optimizer variant '" + name + "'");
}

bool variant_uses_ada(OptVariant v) {
  return v == OptVariant::lopt_a || v == OptVariant::lagg_a;
}

bool variant_is_worker_aware(OptVariant v) {
  return v == OptVariant::lagg_a || v == OptVariant::lagg_plain;
}

int variant_input_width(OptVariant v, int workers) {
  const bool aware = variant_is_worker_aware(v);
  if (aware && workers < 1) {
    throw ConfigError("worker-aware optimizer needs K >= 1");
  }
  const int delta_cols = aware ? workers : 1;
  return (variant_uses_ada(v) ? kAdaColumns : 0) + delta_cols;
}

int OptimizerParams::input_width() const { return variant_input_width(variant, workers); }

std::int64_t OptimizerParams::mlp_param_count() const {
  std::int64_t n = 0;
  for (const MlpLayer& l : mlp) n += static_cast<std::int64_t>(l.in) * l.out + l.out;
  return n;
}

std::int64_t OptimizerParams::flat_size() const { return mlp_param_count() + 7; }

std::vector<double> OptimizerParams::to_flat() const {
  std::vector<double> flat;
  flat.reserve(flat_size());
  for (const MlpLayer& l : mlp) {
    flat.insert(flat.end(), l.weights.begin(), l.weights.end());
    flat.insert(flat.end(), l.biases.begin(), l.biases.end());
  }
  flat.insert(flat.end(), betas_raw.begin(), betas_raw.end());
  return flat;
}

void OptimizerParams::from_flat(const std::vector<double>& flat) {
  if (static_cast<std::int64_t>(flat.size()) != flat_size()) {
    throw ShapeError("flat vector has " + std::to_string(flat.size()) +
                     " entries, optimizer needs " + std::to_string(flat_size()));
  }
  std::size_t pos = 0;
  for (MlpLayer& l : mlp) {
    std::copy(flat.begin() + pos, flat.begin() + pos + l.weights.size(), l.weights.begin());
    pos += l.weights.size();
    std::copy(flat.begin() + pos, flat.begin() + pos + l.biases.size(), l.biases.begin());
    pos += l.biases.size();
  }
  std::copy(flat.begin() + pos, flat.end(), betas_raw.begin());
}

void OptimizerParams::validate() const {
  const int n_in = input_width();
  const int expect_in[3] = {n_in, kOptHiddenWidth, kOptHiddenWidth};
  const int expect_out[3] = {kOptHiddenWidth, kOptHiddenWidth, kOptOutputs};
  for (int i = 0; i < 3; ++i) {
    const MlpLayer& l = mlp[i];
    if (l.in != expect_in[i] || l.out != expect_out[i]) {
      throw ConfigError("optimizer layer " + std::to_string(i) + " is " +
                        std::to_string(l.in) + "x" + std::to_string(l.out) +
                        ", expected " + std::to_string(expect_in[i]) + "x" +
                        std::to_string(expect_out[i]));
    }
    if (l.weights.size() != static_cast<std::size_t>(l.in) * l.out ||
        l.biases.size() != static_cast<std::size_t>(l.out)) {
      throw ConfigError("optimizer layer " + std::to_string(i) + " storage mismatch");
    }
    for (double x : l.weights) {
      if (!std::isfinite(x)) throw ConfigError("non-finite optimizer weight");
    }
    for (double x : l.biases) {
      if (!std::isfinite(x)) throw ConfigError("non-finite optimizer bias");
    }
  }
  for (double x : betas_raw) {
    if (!std::isfinite(x)) throw ConfigError("non-finite decay parameter");
  }
  if (!(lambda1 > 0.0) || !(lambda2 > 0.0)) {
    throw ConfigError("lambda constants must be positive");
  }
}

OptimizerParams make_optimizer(OptVariant v, int workers) {
  OptimizerParams phi;
  phi.variant = v;
  phi.workers = variant_is_worker_aware(v) ? workers : 0;
  const int n_in = variant_input_width(v, workers);
  const int ins[3] = {n_in, kOptHiddenWidth, kOptHiddenWidth};
  const int outs[3] = {kOptHiddenWidth, kOptHiddenWidth, kOptOutputs};
  for (int i = 0; i < 3; ++i) {
    phi.mlp[i].in = ins[i];
    phi.mlp[i].out = outs[i];
    phi.mlp[i].weights.assign(static_cast<std::size_t>(ins[i]) * outs[i], 0.0);
    phi.mlp[i].biases.assign(outs[i], 0.0);
  }
  return phi;
}

OptimizerParams init_optimizer(OptVariant v, int workers, std::uint64_t seed) {
  OptimizerParams phi = make_optimizer(v, workers);
  for (int i = 0; i < 2; ++i) {  // output layer stays zero
    MlpLayer& l = phi.mlp[i];
    const double std_dev = std::sqrt(1.0 / l.in);
    RngStream stream(seed, {static_cast<std::uint64_t>(StreamPurpose::param_init),
                            static_cast<std::uint64_t>(i)});
    for (double& w : l.weights) {
      double z;
      do {
        z = stream.next_normal();
      } while (std::abs(z) > 2.0);
      w = std_dev * z;
    }
  }
  return phi;
}

UpdateDirective mlp_forward(const OptimizerParams& phi, const FeatureMatrix& inputs,
                            const ModelParams& like) {
  phi.validate();
  if (inputs.blocks.size() != like.size()) {
    throw ShapeError("feature matrix has " + std::to_string(inputs.blocks.size()) +
                     " blocks for " + std::to_string(like.size()) + " tensors");
  }
  UpdateDirective dir;
  dir.d = zeros_like(like);
  dir.m = zeros_like(like);
  const int n_in = phi.input_width();
  for (std::size_t p = 0; p < like.size(); ++p) {
    const FeatureMatrix::Block& blk = inputs.blocks[p];
    const std::int64_t n = static_cast<std::int64_t>(like[p].tensor.data.size());
    if (blk.rows != n || blk.cols != n_in) {
      throw ShapeError("feature block for " + like[p].name + " is " +
                       std::to_string(blk.rows) + "x" + std::to_string(blk.cols) +
                       ", expected " + std::to_string(n) + "x" + std::to_string(n_in));
    }
    double* dp = dir.d[p].tensor.data.data();
    double* mp = dir.m[p].tensor.data.data();
    parallel_for(n, [&](std::int64_t r) {
      const double* x = blk.values.data() + r * n_in;
      double h1[kOptHiddenWidth], h2[kOptHiddenWidth];
      {
        const MlpLayer& l = phi.mlp[0];
        for (int o = 0; o < l.out; ++o) h1[o] = l.biases[o];
        for (int i = 0; i < l.in; ++i) {
          const double xv = x[i];
          const double* wr = l.weights.data() + static_cast<std::size_t>(i) * l.out;
          for (int o = 0; o < l.out; ++o) h1[o] += xv * wr[o];
        }
        for (int o = 0; o < l.out; ++o) h1[o] = h1[o] > 0.0 ? h1[o] : 0.0;
      }
      {
        const MlpLayer& l = phi.mlp[1];
        for (int o = 0; o < l.out; ++o) h2[o] = l.biases[o];
        for (int i = 0; i < l.in; ++i) {
          const double xv = h1[i];
          const double* wr = l.weights.data() + static_cast<std::size_t>(i) * l.out;
          for (int o = 0; o < l.out; ++o) h2[o] += xv * wr[o];
        }
        for (int o = 0; o < l.out; ++o) h2[o] = h2[o] > 0.0 ? h2[o] : 0.0;
      }
      {
        const MlpLayer& l = phi.mlp[2];
        double out[kOptOutputs];
        for (int o = 0; o < l.out; ++o) out[o] = l.biases[o];
        for (int i = 0; i < l.in; ++i) {
          const double xv = h2[i];
          const double* wr = l.weights.data() + static_cast<std::size_t>(i) * l.out;
          for (int o = 0; o < l.out; ++o) out[o] += xv * wr[o];
        }
        dp[r] = out[0];
        mp[r] = out[1];
      }
    });
  }
  return dir;
}

ModelParams apply_learned(const ModelParams& w, const UpdateDirective& dir, double lambda1,
                          double lambda2) {
  check_same_structure(w, dir.d, "learned update");
  ModelParams out = w;
  for (std::size_t p = 0; p < w.size(); ++p) {
    double* op = out[p].tensor.data.data();
    const double* dp = dir.d[p].tensor.data.data();
    const double* mp = dir.m[p].tensor.data.data();
    const std::int64_t n = static_cast<std::int64_t>(w[p].tensor.data.size());
    parallel_for(n, [&](std::int64_t i) {
      op[i] -= lambda1 * dp[i] * std::exp(lambda2 * mp[i]);
    });
  }
  return out;
}

ModelParams apply_average(const ModelParams& w, const WorkerDeltas& deltas) {
  ModelParams out = w;
  axpy(out, -1.0, deltas.average);
  return out;
}

SlowMoState init_slowmo(const ArchSpec& arch, double alpha, double beta, double gamma) {
  if (!(alpha > 0.0)) throw ConfigError("slowmo alpha must be positive");
  if (beta < 0.0 || beta >= 1.0) throw ConfigError("slowmo beta must lie in [0, 1)");
  if (!(gamma > 0.0)) throw ConfigError("slowmo gamma must be positive");
  SlowMoState s;
  s.buffer = zeros_like(init_params(arch, 0));
  s.alpha = alpha;
  s.beta = beta;
  s.gamma = gamma;
  return s;
}

ModelParams apply_slowmo(SlowMoState& state, const ModelParams& w, const WorkerDeltas& deltas) {
  check_same_structure(state.buffer, deltas.average, "slowmo update");
  ModelParams out = w;
  for (std::size_t p = 0; p < w.size(); ++p) {
    double* buf = state.buffer[p].tensor.data.data();
    const double* avg = deltas.average[p].tensor.data.data();
    double* op = out[p].tensor.data.data();
    const std::int64_t n = static_cast<std::int64_t>(w[p].tensor.data.size());
    parallel_for(n, [&](std::int64_t i) {
      buf[i] = state.beta * buf[i] + avg[i];
      op[i] -= state.alpha * buf[i];
    });
  }
  return out;
}

namespace {

// Copies the shared Ada columns, appends raw delta column(s), then applies the
// per-tensor RMS normalization to everything except the timestep columns.
FeatureMatrix assemble_inputs(const OptimizerParams& phi, const ModelParams& w,
                              const AggregateState* u, const WorkerDeltas& deltas) {
  const bool ada = variant_uses_ada(phi.variant);
  const bool aware = variant_is_worker_aware(phi.variant);
  if (aware && deltas.workers() != phi.workers) {
    throw ConfigError("optimizer was trained for K=" + std::to_string(phi.workers) +
                      " but the round has K=" + std::to_string(deltas.workers()));
  }
  const int delta_cols = aware ? deltas.workers() : 1;
  const int n_in = phi.input_width();

  FeatureMatrix ada_feat;
  if (ada) ada_feat = compute_features(w, *u, deltas.average);

  FeatureMatrix f;
  f.blocks.resize(w.size());
  for (std::size_t p = 0; p < w.size(); ++p) {
    const std::int64_t n = static_cast<std::int64_t>(w[p].tensor.data.size());
    FeatureMatrix::Block& blk = f.blocks[p];
    blk.rows = n;
    blk.cols = n_in;
    blk.values.resize(n * n_in);
    const FeatureMatrix::Block* src = ada ? &ada_feat.blocks[p] : nullptr;
    const int base = ada ? kAdaColumns : 0;
    parallel_for(n, [&](std::int64_t r) {
      double* row = blk.values.data() + r * n_in;
      if (src) std::memcpy(row, src->values.data() + r * kAdaColumns,
                           kAdaColumns * sizeof(double));
      if (aware) {
        for (int k = 0; k < delta_cols; ++k) {
          row[base + k] = deltas.per_worker[k][p].tensor.data[r];
        }
      } else {
        row[base] = deltas.average[p].tensor.data[r];
      }
    });
    if (ada) {
      for (int c = 0; c < kColTime1; ++c) normalize_column_rms(blk.values, n, n_in, c);
    }
    for (int k = 0; k < delta_cols; ++k) {
      normalize_column_rms(blk.values, n, n_in, base + k);
    }
  }
  return f;
}

ModelParams learned_step(const OptimizerParams& phi, const ModelParams& w,
                         AggregateState* u, const WorkerDeltas& deltas) {
  if (variant_uses_ada(phi.variant)) {
    update_state(*u, deltas.average, decay_from_raw(phi.betas_raw));
  }
  FeatureMatrix inputs = assemble_inputs(phi, w, u, deltas);
  UpdateDirective dir = mlp_forward(phi, inputs, w);
  return apply_learned(w, dir, phi.lambda1, phi.lambda2);
}

}  // namespace

ModelParams lopt_a_step(const OptimizerParams& phi, const ModelParams& w, AggregateState& u,
                        const WorkerDeltas& deltas) {
  if (phi.variant != OptVariant::lopt_a) throw ConfigError("phi is not a lopt_a optimizer");
  return learned_step(phi, w, &u, deltas);
}

ModelParams lagg_a_step(const OptimizerParams& phi, const ModelParams& w, AggregateState& u,
                        const WorkerDeltas& deltas) {
  if (phi.variant != OptVariant::lagg_a) throw ConfigError("phi is not a lagg_a optimizer");
  return learned_step(phi, w, &u, deltas);
}

ModelParams plain_variant_step(const OptimizerParams& phi, const ModelParams& w,
                               const WorkerDeltas& deltas) {
  if (variant_uses_ada(phi.variant)) {
    throw ConfigError("plain_variant_step needs a plain variant");
  }
  return learned_step(phi, w, nullptr, deltas);
}

namespace {

class AverageOptimizer final : public GlobalOptimizer {
 public:
  std::string name() const override { return "local_sgd"; }
  ModelParams step(const ModelParams& w, const WorkerDeltas& deltas) override {
    return apply_average(w, deltas);
  }
};

class SlowMoOptimizer final : public GlobalOptimizer {
 public:
  SlowMoOptimizer(const ArchSpec& arch, double alpha, double beta, double gamma)
      : state_(init_slowmo(arch, alpha, beta, gamma)) {}
  std::string name() const override { return "slowmo"; }
  ModelParams step(const ModelParams& w, const WorkerDeltas& deltas) override {
    return apply_slowmo(state_, w, deltas);
  }

 private:
  SlowMoState state_;
};

class LearnedOptimizer final : public GlobalOptimizer {
 public:
  LearnedOptimizer(OptimizerParams phi, const ArchSpec& arch)
      : phi_(std::move(phi)) {
    phi_.validate();
    if (variant_uses_ada(phi_.variant)) state_ = init_state(arch);
  }
  std::string name() const override { return variant_name(phi_.variant); }
  ModelParams step(const ModelParams& w, const WorkerDeltas& deltas) override {
    if (variant_uses_ada(phi_.variant)) return learned_step(phi_, w, &state_, deltas);
    return learned_step(phi_, w, nullptr, deltas);
  }

 private:
  OptimizerParams phi_;
  AggregateState state_;
};

}  // namespace

std::unique_ptr<GlobalOptimizer> make_average_optimizer() {
  return std::make_unique<AverageOptimizer>();
}

std::unique_ptr<GlobalOptimizer> make_slowmo_optimizer(const ArchSpec& arch, double alpha,
                                                       double beta, double gamma) {
  return std::make_unique<SlowMoOptimizer>(arch, alpha, beta, gamma);
}

std::unique_ptr<GlobalOptimizer> make_learned_optimizer(const OptimizerParams& phi,
                                                        const ArchSpec& arch) {
  return std::make_unique<LearnedOptimizer>(phi, arch);
}

// --- Checkpoint I/O -----------------------------------------------------------

namespace {
constexpr const char* kCheckpointFormat = "commlearn-optimizer";
constexpr int kCheckpointVersion = 1;
}  // namespace

std::string checkpoint_to_json(const OptimizerParams& phi) {
  phi.validate();
  nlohmann::json doc;
  doc["format"] = kCheckpointFormat;
  doc["version"] = kCheckpointVersion;
  doc["variant"] = variant_name(phi.variant);
  doc["workers"] = phi.workers;
  doc["input_width"] = phi.input_width();
  doc["hidden_width"] = kOptHiddenWidth;
  doc["lambda1"] = phi.lambda1;
  doc["lambda2"] = phi.lambda2;
  doc["betas_raw"] = phi.betas_raw;
  nlohmann::json layers = nlohmann::json::array();
  for (const MlpLayer& l : phi.mlp) {
    layers.push_back({{"in", l.in}, {"out", l.out}, {"weights", l.weights},
                      {"biases", l.biases}});
  }
  doc["layers"] = std::move(layers);
  return doc.dump(1);
}

OptimizerParams checkpoint_from_json(const std::string& text) {
  nlohmann::json doc;
  try {
    doc = nlohmann::json::parse(text);
  } catch (const nlohmann::json::exception& e) {
    throw CheckpointError(std::string("checkpoint is not valid JSON: ") + e.what());
  }
  try {
    if (doc.at("format").get<std::string>() != kCheckpointFormat) {
      throw CheckpointError("unrecognized checkpoint format field");
    }
    if (doc.at("version").get<int>() != kCheckpointVersion) {
      throw CheckpointError("unsupported checkpoint version");
    }
    OptimizerParams phi = make_optimizer(
        variant_from_name(doc.at("variant").get<std::string>()),
        doc.value("workers", 0));
    phi.lambda1 = doc.at("lambda1").get<double>();
    phi.lambda2 = doc.at("lambda2").get<double>();
    const auto betas = doc.at("betas_raw").get<std::vector<double>>();
    if (betas.size() != 7) throw CheckpointError("betas_raw must hold 7 values");
    std::copy(betas.begin(), betas.end(), phi.betas_raw.begin());
    const auto& layers = doc.at("layers");
    if (!layers.is_array() || layers.size() != 3) {
      throw CheckpointError("checkpoint must hold exactly 3 layers");
    }
    for (int i = 0; i < 3; ++i) {
      MlpLayer& l = phi.mlp[i];
      if (layers[i].at("in").get<int>() != l.in ||
          layers[i].at("out").get<int>() != l.out) {
        throw CheckpointError("layer " + std::to_string(i) +
                              " shape does not match the declared variant");
      }
      const auto w = layers[i].at("weights").get<std::vector<double>>();
      const auto b = layers[i].at("biases").get<std::vector<double>>();
      if (w.size() != l.weights.size() || b.size() != l.biases.size()) {
        throw CheckpointError("layer " + std::to_string(i) + " has wrong array sizes");
      }
      l.weights = w;
      l.biases = b;
    }
    if (doc.at("input_width").get<int>() != phi.input_width()) {
      throw CheckpointError("declared input width is inconsistent with the variant");
    }
    phi.validate();
    return phi;
  } catch (const nlohmann::json::exception& e) {
    throw CheckpointError(std::string("malformed checkpoint: ") + e.what());
  } catch (const ConfigError& e) {
    throw CheckpointError(std::string("malformed checkpoint: ") + e.what());
  }
}

void save_checkpoint(const OptimizerParams& phi, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw CheckpointError("cannot open '" + path + "' for writing");
  out << checkpoint_to_json(phi) << '\n';
  if (!out) throw CheckpointError("failed writing checkpoint to '" + path + "'");
}

OptimizerParams load_checkpoint(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw CheckpointError("cannot open checkpoint '" + path + "'");
  std::ostringstream buf;
  buf << in.rdbuf();
  return checkpoint_from_json(buf.str());
}

}  // namespace commlearn
