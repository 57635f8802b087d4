#include "commlearn/tensor.hpp"

#include <cmath>
#include <cstring>
#include <sstream>

#include "commlearn/parallel.hpp"

#include <atomic>

#include <omp.h>

namespace commlearn {

namespace {
std::atomic<int> g_max_threads{0};  // 0 = use the OpenMP default

int default_omp_threads() {
  static const int n = omp_get_max_threads();
  return n;
}
}  // namespace

void set_max_threads(int n) {
  const int fallback = default_omp_threads();  // capture before the first override
  g_max_threads.store(n < 0 ? 0 : n);
  omp_set_num_threads(n > 0 ? n : fallback);
}

int max_threads() {
  int n = g_max_threads.load();
  return n == 0 ? default_omp_threads() : n;
}

namespace detail {
bool omp_enabled(std::int64_t n) {
  if (n < 2) return false;
  if (g_max_threads.load() == 1) return false;
  return !omp_in_parallel();
}
}  // namespace detail

Tensor::Tensor(std::vector<std::int64_t> shape_, std::vector<double> data_)
    : shape(std::move(shape_)), data(std::move(data_)) {
  if (shape_size(shape) != static_cast<std::int64_t>(data.size())) {
    throw ShapeError("tensor data length " + std::to_string(data.size()) +
                     " does not match shape " + shape_to_string(shape));
  }
}

Tensor Tensor::zeros(std::vector<std::int64_t> shape) { return full(std::move(shape), 0.0); }

Tensor Tensor::full(std::vector<std::int64_t> shape, double value) {
  std::int64_t n = shape_size(shape);
  if (n < 0) throw ShapeError("negative dimension in shape " + shape_to_string(shape));
  Tensor t;
  t.shape = std::move(shape);
  t.data.assign(static_cast<std::size_t>(n), value);
  return t;
}

bool Tensor::all_finite() const {
  for (double v : data) {
    if (!std::isfinite(v)) return false;
  }
  return true;
}

std::int64_t shape_size(const std::vector<std::int64_t>& shape) {
  std::int64_t n = 1;
  for (std::int64_t d : shape) {
    if (d < 0) return -1;
    n *= d;
  }
  return n;
}

std::string shape_to_string(const std::vector<std::int64_t>& shape) {
  std::ostringstream os;
  os << "(";
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << ", ";
    os << shape[i];
  }
  os << ")";
  return os.str();
}

std::pair<std::int64_t, std::int64_t> folded_dims(const std::vector<std::int64_t>& shape) {
  if (shape.empty()) return {1, 1};
  if (shape.size() == 1) return {shape[0], 1};
  std::int64_t rows = 1;
  for (std::size_t i = 0; i + 1 < shape.size(); ++i) rows *= shape[i];
  return {rows, shape.back()};
}

void check_same_structure(const ModelParams& a, const ModelParams& b, const char* context) {
  if (a.size() != b.size()) {
    throw ShapeError(std::string(context) + ": parameter lists of size " +
                     std::to_string(a.size()) + " vs " + std::to_string(b.size()));
  }
  for (std::size_t i = 0; i < a.size(); ++i) {
    if (!a[i].tensor.same_shape(b[i].tensor)) {
      throw ShapeError(std::string(context) + ": tensor '" + a[i].name + "' has shape " +
                       shape_to_string(a[i].tensor.shape) + " vs " +
                       shape_to_string(b[i].tensor.shape));
    }
  }
}

std::int64_t param_count(const ModelParams& p) {
  std::int64_t n = 0;
  for (const auto& t : p) n += t.tensor.size();
  return n;
}

ModelParams zeros_like(const ModelParams& p) {
  ModelParams out;
  out.reserve(p.size());
  for (const auto& t : p) out.push_back({t.name, Tensor::zeros(t.tensor.shape)});
  return out;
}

void axpy(ModelParams& y, double alpha, const ModelParams& x) {
  check_same_structure(y, x, "axpy");
  for (std::size_t i = 0; i < y.size(); ++i) {
    double* yd = y[i].tensor.data.data();
    const double* xd = x[i].tensor.data.data();
    std::int64_t n = y[i].tensor.size();
    for (std::int64_t j = 0; j < n; ++j) yd[j] += alpha * xd[j];
  }
}

void scale(ModelParams& p, double alpha) {
  for (auto& t : p) {
    for (double& v : t.tensor.data) v *= alpha;
  }
}

ModelParams subtract(const ModelParams& a, const ModelParams& b) {
  check_same_structure(a, b, "subtract");
  ModelParams out = a;
  for (std::size_t i = 0; i < out.size(); ++i) {
    double* od = out[i].tensor.data.data();
    const double* bd = b[i].tensor.data.data();
    std::int64_t n = out[i].tensor.size();
    for (std::int64_t j = 0; j < n; ++j) od[j] -= bd[j];
  }
  return out;
}

bool all_finite(const ModelParams& p) {
  for (const auto& t : p) {
    if (!t.tensor.all_finite()) return false;
  }
  return true;
}

double max_abs_diff(const ModelParams& a, const ModelParams& b) {
  check_same_structure(a, b, "max_abs_diff");
  double m = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const auto& ad = a[i].tensor.data;
    const auto& bd = b[i].tensor.data;
    for (std::size_t j = 0; j < ad.size(); ++j) m = std::max(m, std::fabs(ad[j] - bd[j]));
  }
  return m;
}

bool bitwise_equal(const ModelParams& a, const ModelParams& b) {
  if (a.size() != b.size()) return false;
  for (std::size_t i = 0; i < a.size(); ++i) {
    if (!a[i].tensor.same_shape(b[i].tensor)) return false;
    const auto& ad = a[i].tensor.data;
    const auto& bd = b[i].tensor.data;
    if (std::memcmp(ad.data(), bd.data(), ad.size() * sizeof(double)) != 0) return false;
  }
  return true;
}

}  // namespace commlearn
