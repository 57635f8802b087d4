#include "commlearn/nn.hpp"

#include <cmath>
#include <cstring>
#include <string>
#include <vector>

#include "commlearn/errors.hpp"
#include "commlearn/parallel.hpp"

namespace commlearn {

const char* arch_kind_name(ArchKind kind) {
  switch (kind) {
    case ArchKind::linear_toy: return "linear_toy";
    case ArchKind::mlp2: return "mlp2";
    case ArchKind::mlp3: return "mlp3";
    case ArchKind::cnn3: return "cnn3";
  }
  throw ConfigError("unknown architecture kind");
}

ArchKind arch_kind_from_name(const std::string& name) {
  if (name == "linear_toy") return ArchKind::linear_toy;
  if (name == "mlp2") return ArchKind::mlp2;
  if (name == "mlp3") return ArchKind::mlp3;
  if (name == "cnn3") return ArchKind::cnn3;
  throw ConfigError("unknown architecture '" + name + "'");
}

ArchSpec ArchSpec::linear_toy(std::vector<std::int64_t> input, int classes) {
  ArchSpec a;
  a.kind = ArchKind::linear_toy;
  a.input_shape = std::move(input);
  a.num_classes = classes;
  a.hidden_width = 0;
  return a;
}

ArchSpec ArchSpec::mlp2(std::vector<std::int64_t> input, int classes, int width) {
  ArchSpec a;
  a.kind = ArchKind::mlp2;
  a.input_shape = std::move(input);
  a.num_classes = classes;
  a.hidden_width = width;
  return a;
}

ArchSpec ArchSpec::mlp3(std::vector<std::int64_t> input, int classes, int width) {
  ArchSpec a = mlp2(std::move(input), classes, width);
  a.kind = ArchKind::mlp3;
  return a;
}

ArchSpec ArchSpec::cnn3(std::vector<std::int64_t> input, int classes, int base_channels) {
  ArchSpec a;
  a.kind = ArchKind::cnn3;
  a.input_shape = std::move(input);
  a.num_classes = classes;
  a.hidden_width = base_channels;
  return a;
}

std::int64_t ArchSpec::input_size() const {
  std::int64_t n = 1;
  for (std::int64_t d : input_shape) n *= d;
  return n;
}

void ArchSpec::validate() const {
  if (input_shape.empty()) throw ConfigError("architecture needs a non-empty input shape");
  for (std::int64_t d : input_shape) {
    if (d <= 0) throw ConfigError("input shape has a non-positive dimension");
  }
  if (num_classes < 2) throw ConfigError("need at least two classes");
  if (kind != ArchKind::linear_toy && hidden_width < 1) {
    throw ConfigError("hidden width must be positive");
  }
  if (kind == ArchKind::cnn3 && input_shape.size() != 3) {
    throw ConfigError("cnn3 expects a rank-3 [H, W, C] input shape");
  }
}

std::int64_t conv_same_out_dim(std::int64_t in, int stride) {
  if (in < 1 || stride < 1) throw ShapeError("bad conv dimensions");
  return (in + stride - 1) / stride;
}

namespace {

enum class LayerOp { dense, conv };

struct LayerPlan {
  LayerOp op = LayerOp::dense;
  bool relu = false;
  // dense
  std::int64_t in = 0, out = 0;
  // conv (3x3, same padding)
  std::int64_t in_h = 0, in_w = 0, in_c = 0, out_h = 0, out_w = 0, out_c = 0;
  int stride = 1;

  std::int64_t fan_in() const { return op == LayerOp::dense ? in : 9 * in_c; }
  std::int64_t out_elems(std::int64_t batch) const {
    return op == LayerOp::dense ? batch * out : batch * out_h * out_w * out_c;
  }
  std::vector<std::int64_t> weight_shape() const {
    if (op == LayerOp::dense) return {in, out};
    return {3, 3, in_c, out_c};
  }
  std::vector<std::int64_t> bias_shape() const {
    return {op == LayerOp::dense ? out : out_c};
  }
};

std::vector<LayerPlan> plan_layers(const ArchSpec& arch) {
  arch.validate();
  std::vector<LayerPlan> plan;
  auto dense = [&](std::int64_t in, std::int64_t out, bool relu) {
    LayerPlan p;
    p.op = LayerOp::dense;
    p.in = in;
    p.out = out;
    p.relu = relu;
    plan.push_back(p);
  };
  switch (arch.kind) {
    case ArchKind::linear_toy:
      dense(arch.input_size(), arch.num_classes, false);
      break;
    case ArchKind::mlp2:
      dense(arch.input_size(), arch.hidden_width, true);
      dense(arch.hidden_width, arch.hidden_width, true);
      dense(arch.hidden_width, arch.num_classes, false);
      break;
    case ArchKind::mlp3:
      dense(arch.input_size(), arch.hidden_width, true);
      dense(arch.hidden_width, arch.hidden_width, true);
      dense(arch.hidden_width, arch.hidden_width, true);
      dense(arch.hidden_width, arch.num_classes, false);
      break;
    case ArchKind::cnn3: {
      std::int64_t h = arch.input_shape[0];
      std::int64_t w = arch.input_shape[1];
      std::int64_t c = arch.input_shape[2];
      const std::int64_t channels[3] = {arch.hidden_width, 2 * arch.hidden_width,
                                        2 * arch.hidden_width};
      const int strides[3] = {2, 1, 1};
      for (int i = 0; i < 3; ++i) {
        LayerPlan p;
        p.op = LayerOp::conv;
        p.relu = true;
        p.in_h = h;
        p.in_w = w;
        p.in_c = c;
        p.out_c = channels[i];
        p.stride = strides[i];
        p.out_h = conv_same_out_dim(h, p.stride);
        p.out_w = conv_same_out_dim(w, p.stride);
        plan.push_back(p);
        h = p.out_h;
        w = p.out_w;
        c = p.out_c;
      }
      dense(h * w * c, arch.num_classes, false);
      break;
    }
  }
  return plan;
}

std::string layer_name(const LayerPlan& p, std::size_t index) {
  const char* base = p.op == LayerOp::dense ? "fc" : "conv";
  return base + std::to_string(index);
}

void check_params(const std::vector<LayerPlan>& plan, const ModelParams& params) {
  if (params.size() != plan.size() * 2) {
    throw ShapeError("parameter list has " + std::to_string(params.size()) +
                     " tensors, expected " + std::to_string(plan.size() * 2));
  }
  for (std::size_t i = 0; i < plan.size(); ++i) {
    const Tensor& w = params[2 * i].tensor;
    const Tensor& b = params[2 * i + 1].tensor;
    if (w.shape != plan[i].weight_shape() || b.shape != plan[i].bias_shape()) {
      throw ShapeError("parameter tensor " + params[2 * i].name +
                       " does not match the architecture");
    }
  }
}

double truncated_normal(RngStream& stream) {
  for (;;) {
    double z = stream.next_normal();
    if (std::abs(z) <= 2.0) return z;
  }
}

// Dense: y[b,o] = bias[o] + sum_i x[b,i] w[i,o]. Row-parallel, serial inner sum.
void dense_forward(const double* x, const double* w, const double* bias, double* y,
                   std::int64_t batch, std::int64_t in, std::int64_t out) {
  parallel_for(batch, [&](std::int64_t b) {
    const double* xb = x + b * in;
    double* yb = y + b * out;
    for (std::int64_t o = 0; o < out; ++o) yb[o] = bias[o];
    for (std::int64_t i = 0; i < in; ++i) {
      double xv = xb[i];
      const double* wr = w + i * out;
      for (std::int64_t o = 0; o < out; ++o) yb[o] += xv * wr[o];
    }
  });
}

void dense_backward(const double* x, const double* w, const double* dy, double* dx,
                    double* dw, double* db, std::int64_t batch, std::int64_t in,
                    std::int64_t out) {
  if (dx) {
    parallel_for(batch, [&](std::int64_t b) {
      const double* dyb = dy + b * out;
      double* dxb = dx + b * in;
      for (std::int64_t i = 0; i < in; ++i) {
        const double* wr = w + i * out;
        double acc = 0.0;
        for (std::int64_t o = 0; o < out; ++o) acc += dyb[o] * wr[o];
        dxb[i] = acc;
      }
    });
  }
  parallel_for(in * out, [&](std::int64_t idx) {
    std::int64_t i = idx / out;
    std::int64_t o = idx % out;
    double acc = 0.0;
    for (std::int64_t b = 0; b < batch; ++b) acc += x[b * in + i] * dy[b * out + o];
    dw[idx] = acc;
  });
  parallel_for(out, [&](std::int64_t o) {
    double acc = 0.0;
    for (std::int64_t b = 0; b < batch; ++b) acc += dy[b * out + o];
    db[o] = acc;
  });
}

struct ConvPad {
  std::int64_t h_begin = 0, w_begin = 0;
};

ConvPad same_padding(const LayerPlan& p) {
  auto begin = [](std::int64_t in, std::int64_t out, int stride) {
    std::int64_t total = (out - 1) * stride + 3 - in;
    if (total < 0) total = 0;
    return total / 2;
  };
  return {begin(p.in_h, p.out_h, p.stride), begin(p.in_w, p.out_w, p.stride)};
}

// NHWC activations, HWIO kernel.
void conv_forward(const double* x, const double* k, const double* bias, double* y,
                  std::int64_t batch, const LayerPlan& p) {
  const ConvPad pad = same_padding(p);
  parallel_for(batch * p.out_h * p.out_w, [&](std::int64_t idx) {
    std::int64_t ow = idx % p.out_w;
    std::int64_t oh = (idx / p.out_w) % p.out_h;
    std::int64_t b = idx / (p.out_w * p.out_h);
    double* yo = y + idx * p.out_c;
    for (std::int64_t oc = 0; oc < p.out_c; ++oc) yo[oc] = bias[oc];
    for (std::int64_t kh = 0; kh < 3; ++kh) {
      std::int64_t ih = oh * p.stride - pad.h_begin + kh;
      if (ih < 0 || ih >= p.in_h) continue;
      for (std::int64_t kw = 0; kw < 3; ++kw) {
        std::int64_t iw = ow * p.stride - pad.w_begin + kw;
        if (iw < 0 || iw >= p.in_w) continue;
        const double* xi = x + ((b * p.in_h + ih) * p.in_w + iw) * p.in_c;
        const double* kr = k + (kh * 3 + kw) * p.in_c * p.out_c;
        for (std::int64_t ic = 0; ic < p.in_c; ++ic) {
          double xv = xi[ic];
          const double* kc = kr + ic * p.out_c;
          for (std::int64_t oc = 0; oc < p.out_c; ++oc) yo[oc] += xv * kc[oc];
        }
      }
    }
  });
}

void conv_backward(const double* x, const double* k, const double* dy, double* dx,
                   double* dk, double* db, std::int64_t batch, const LayerPlan& p) {
  const ConvPad pad = same_padding(p);
  if (dx) {
    parallel_for(batch * p.in_h * p.in_w, [&](std::int64_t idx) {
      std::int64_t iw = idx % p.in_w;
      std::int64_t ih = (idx / p.in_w) % p.in_h;
      std::int64_t b = idx / (p.in_w * p.in_h);
      double* dxi = dx + idx * p.in_c;
      for (std::int64_t ic = 0; ic < p.in_c; ++ic) dxi[ic] = 0.0;
      for (std::int64_t kh = 0; kh < 3; ++kh) {
        std::int64_t num = ih + pad.h_begin - kh;
        if (num < 0 || num % p.stride != 0) continue;
        std::int64_t oh = num / p.stride;
        if (oh >= p.out_h) continue;
        for (std::int64_t kw = 0; kw < 3; ++kw) {
          std::int64_t numw = iw + pad.w_begin - kw;
          if (numw < 0 || numw % p.stride != 0) continue;
          std::int64_t ow = numw / p.stride;
          if (ow >= p.out_w) continue;
          const double* dyo = dy + ((b * p.out_h + oh) * p.out_w + ow) * p.out_c;
          const double* kr = k + (kh * 3 + kw) * p.in_c * p.out_c;
          for (std::int64_t ic = 0; ic < p.in_c; ++ic) {
            const double* kc = kr + ic * p.out_c;
            double acc = 0.0;
            for (std::int64_t oc = 0; oc < p.out_c; ++oc) acc += dyo[oc] * kc[oc];
            dxi[ic] += acc;
          }
        }
      }
    });
  }
  parallel_for(9 * p.in_c * p.out_c, [&](std::int64_t idx) {
    std::int64_t oc = idx % p.out_c;
    std::int64_t ic = (idx / p.out_c) % p.in_c;
    std::int64_t kw = (idx / (p.out_c * p.in_c)) % 3;
    std::int64_t kh = idx / (p.out_c * p.in_c * 3);
    double acc = 0.0;
    for (std::int64_t b = 0; b < batch; ++b) {
      for (std::int64_t oh = 0; oh < p.out_h; ++oh) {
        std::int64_t ih = oh * p.stride - pad.h_begin + kh;
        if (ih < 0 || ih >= p.in_h) continue;
        for (std::int64_t ow = 0; ow < p.out_w; ++ow) {
          std::int64_t iw = ow * p.stride - pad.w_begin + kw;
          if (iw < 0 || iw >= p.in_w) continue;
          acc += x[((b * p.in_h + ih) * p.in_w + iw) * p.in_c + ic] *
                 dy[((b * p.out_h + oh) * p.out_w + ow) * p.out_c + oc];
        }
      }
    }
    dk[idx] = acc;
  });
  parallel_for(p.out_c, [&](std::int64_t oc) {
    double acc = 0.0;
    const std::int64_t spatial = batch * p.out_h * p.out_w;
    for (std::int64_t s = 0; s < spatial; ++s) acc += dy[s * p.out_c + oc];
    db[oc] = acc;
  });
}

void relu_inplace(double* a, std::int64_t n) {
  parallel_for(n, [&](std::int64_t i) {
    if (a[i] < 0.0) a[i] = 0.0;
  });
}

// Post-activation values double as the mask: a > 0 iff the pre-activation was.
void relu_backward_inplace(const double* a, double* da, std::int64_t n) {
  parallel_for(n, [&](std::int64_t i) {
    if (a[i] <= 0.0) da[i] = 0.0;
  });
}

void check_batch(const ArchSpec& arch, const Batch& batch) {
  if (batch.labels.empty()) throw ShapeError("empty batch");
  std::vector<std::int64_t> expect;
  expect.push_back(batch.batch_size());
  expect.insert(expect.end(), arch.input_shape.begin(), arch.input_shape.end());
  if (batch.inputs.shape != expect) {
    throw ShapeError("batch inputs have shape " + shape_to_string(batch.inputs.shape) +
                     ", expected " + shape_to_string(expect));
  }
  for (int label : batch.labels) {
    if (label < 0 || label >= arch.num_classes) {
      throw DataFormatError("label " + std::to_string(label) + " outside [0, " +
                            std::to_string(arch.num_classes) + ")");
    }
  }
}

struct ForwardPass {
  // acts[0] is the input, acts[i+1] the (post-ReLU) output of layer i.
  std::vector<std::vector<double>> acts;
};

ForwardPass run_forward(const std::vector<LayerPlan>& plan, const ModelParams& params,
                        const Batch& batch) {
  const std::int64_t B = batch.batch_size();
  ForwardPass fp;
  fp.acts.resize(plan.size() + 1);
  fp.acts[0] = batch.inputs.data;
  for (std::size_t i = 0; i < plan.size(); ++i) {
    const LayerPlan& p = plan[i];
    const double* w = params[2 * i].tensor.data.data();
    const double* b = params[2 * i + 1].tensor.data.data();
    std::vector<double>& y = fp.acts[i + 1];
    y.resize(p.out_elems(B));
    if (p.op == LayerOp::dense) {
      dense_forward(fp.acts[i].data(), w, b, y.data(), B, p.in, p.out);
    } else {
      conv_forward(fp.acts[i].data(), w, b, y.data(), B, p);
    }
    if (p.relu) relu_inplace(y.data(), static_cast<std::int64_t>(y.size()));
  }
  return fp;
}

// Mean cross-entropy from logits; optionally writes d(loss)/d(logits).
double softmax_ce(const std::vector<double>& logits, const std::vector<int>& labels,
                  std::int64_t classes, std::vector<double>* dlogits) {
  const std::int64_t B = static_cast<std::int64_t>(labels.size());
  if (dlogits) dlogits->assign(logits.size(), 0.0);
  std::vector<double> row_loss(B);
  parallel_for(B, [&](std::int64_t b) {
    const double* l = logits.data() + b * classes;
    double mx = l[0];
    for (std::int64_t c = 1; c < classes; ++c) mx = std::max(mx, l[c]);
    double sum = 0.0;
    for (std::int64_t c = 0; c < classes; ++c) sum += std::exp(l[c] - mx);
    row_loss[b] = mx + std::log(sum) - l[labels[b]];
    if (dlogits) {
      double* d = dlogits->data() + b * classes;
      for (std::int64_t c = 0; c < classes; ++c) {
        d[c] = std::exp(l[c] - mx) / sum;
      }
      d[labels[b]] -= 1.0;
      for (std::int64_t c = 0; c < classes; ++c) d[c] /= static_cast<double>(B);
    }
  });
  double total = 0.0;
  for (std::int64_t b = 0; b < B; ++b) total += row_loss[b];
  return total / static_cast<double>(B);
}

}  // namespace

ModelParams init_params(const ArchSpec& arch, std::uint64_t seed) {
  const std::vector<LayerPlan> plan = plan_layers(arch);
  ModelParams params;
  params.reserve(plan.size() * 2);
  for (std::size_t i = 0; i < plan.size(); ++i) {
    const LayerPlan& p = plan[i];
    Tensor w = Tensor::zeros(p.weight_shape());
    const double std_dev = std::sqrt(1.0 / static_cast<double>(p.fan_in()));
    RngStream stream(seed, {static_cast<std::uint64_t>(StreamPurpose::param_init),
                            static_cast<std::uint64_t>(i)});
    for (double& v : w.data) v = std_dev * truncated_normal(stream);
    const std::string name = layer_name(p, i);
    params.push_back({name + ".weight", std::move(w)});
    params.push_back({name + ".bias", Tensor::zeros(p.bias_shape())});
  }
  return params;
}

LossAndGrad loss_and_grad(const ArchSpec& arch, const ModelParams& params,
                          const Batch& batch) {
  const std::vector<LayerPlan> plan = plan_layers(arch);
  check_params(plan, params);
  check_batch(arch, batch);
  const std::int64_t B = batch.batch_size();

  ForwardPass fp = run_forward(plan, params, batch);

  LossAndGrad result;
  std::vector<double> dcur;
  result.loss = softmax_ce(fp.acts.back(), batch.labels, arch.num_classes, &dcur);

  result.grads = zeros_like(params);
  std::vector<double> dprev;
  for (std::size_t ri = plan.size(); ri-- > 0;) {
    const LayerPlan& p = plan[ri];
    const std::vector<double>& x = fp.acts[ri];
    const std::vector<double>& y = fp.acts[ri + 1];
    if (p.relu) relu_backward_inplace(y.data(), dcur.data(), static_cast<std::int64_t>(y.size()));
    const double* w = params[2 * ri].tensor.data.data();
    double* dw = result.grads[2 * ri].tensor.data.data();
    double* db = result.grads[2 * ri + 1].tensor.data.data();
    const bool need_dx = ri > 0;
    dprev.assign(need_dx ? x.size() : 0, 0.0);
    if (p.op == LayerOp::dense) {
      dense_backward(x.data(), w, dcur.data(), need_dx ? dprev.data() : nullptr, dw, db,
                     B, p.in, p.out);
    } else {
      conv_backward(x.data(), w, dcur.data(), need_dx ? dprev.data() : nullptr, dw, db,
                    B, p);
    }
    dcur.swap(dprev);
  }
  return result;
}

double loss_only(const ArchSpec& arch, const ModelParams& params, const Batch& batch) {
  const std::vector<LayerPlan> plan = plan_layers(arch);
  check_params(plan, params);
  check_batch(arch, batch);
  ForwardPass fp = run_forward(plan, params, batch);
  return softmax_ce(fp.acts.back(), batch.labels, arch.num_classes, nullptr);
}

}  // namespace commlearn
