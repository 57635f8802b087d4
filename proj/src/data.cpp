#include "commlearn/data.hpp"

#include <zlib.h>

#include <algorithm>
#include <cstring>
#include <filesystem>
#include <utility>
#include <vector>

#include "commlearn/errors.hpp"

namespace commlearn {

const SplitRange& Dataset::split(Split s) const {
  switch (s) {
    case Split::train: return train;
    case Split::valid: return valid;
    case Split::test: return test;
  }
  throw DataFormatError("unknown split");
}

std::vector<std::int64_t> Dataset::example_shape() const {
  if (inputs.shape.empty()) throw DataFormatError("dataset has no input tensor");
  return {inputs.shape.begin() + 1, inputs.shape.end()};
}

namespace {

// gzread passes uncompressed bytes through unchanged, so one reader covers
// both plain and .gz files.
std::vector<unsigned char> read_file(const std::string& path) {
  gzFile f = gzopen(path.c_str(), "rb");
  if (!f) throw DataFormatError("cannot open '" + path + "'");
  std::vector<unsigned char> bytes;
  unsigned char chunk[1 << 16];
  for (;;) {
    int got = gzread(f, chunk, sizeof(chunk));
    if (got < 0) {
      gzclose(f);
      throw DataFormatError("read error in '" + path + "'");
    }
    if (got == 0) break;
    bytes.insert(bytes.end(), chunk, chunk + got);
  }
  gzclose(f);
  return bytes;
}

std::uint32_t read_be32(const unsigned char* p) {
  return (std::uint32_t(p[0]) << 24) | (std::uint32_t(p[1]) << 16) |
         (std::uint32_t(p[2]) << 8) | std::uint32_t(p[3]);
}

struct IdxContent {
  std::vector<std::uint32_t> dims;
  const unsigned char* payload;
};

IdxContent parse_idx(const std::vector<unsigned char>& bytes, const std::string& path,
                     std::uint32_t expected_magic) {
  if (bytes.size() < 4) throw DataFormatError("'" + path + "' is too short for IDX");
  std::uint32_t magic = read_be32(bytes.data());
  if (magic != expected_magic) {
    throw DataFormatError("'" + path + "' has IDX magic " + std::to_string(magic) +
                          ", expected " + std::to_string(expected_magic));
  }
  std::size_t rank = magic & 0xff;
  if (bytes.size() < 4 + 4 * rank) throw DataFormatError("'" + path + "' truncated header");
  IdxContent out;
  std::uint64_t total = 1;
  for (std::size_t i = 0; i < rank; ++i) {
    std::uint32_t d = read_be32(bytes.data() + 4 + 4 * i);
    out.dims.push_back(d);
    total *= d;
  }
  if (bytes.size() != 4 + 4 * rank + total) {
    throw DataFormatError("'" + path + "' payload size mismatch");
  }
  out.payload = bytes.data() + 4 + 4 * rank;
  return out;
}

int max_label_plus_one(const std::vector<int>& labels, const std::string& origin) {
  int mx = -1;
  for (int l : labels) {
    if (l < 0) throw DataFormatError(origin + ": negative label");
    mx = std::max(mx, l);
  }
  if (mx < 1) throw DataFormatError(origin + ": fewer than two classes present");
  return mx + 1;
}

}  // namespace

Dataset load_idx_pair(const std::string& images_path, const std::string& labels_path) {
  const std::vector<unsigned char> img_bytes = read_file(images_path);
  const std::vector<unsigned char> lab_bytes = read_file(labels_path);
  IdxContent img = parse_idx(img_bytes, images_path, 0x803);
  IdxContent lab = parse_idx(lab_bytes, labels_path, 0x801);
  if (img.dims.size() != 3) {
    throw DataFormatError("'" + images_path + "' is not a rank-3 image file");
  }
  if (img.dims[0] != lab.dims[0]) {
    throw DataFormatError("image/label example counts differ (" +
                          std::to_string(img.dims[0]) + " vs " +
                          std::to_string(lab.dims[0]) + ")");
  }
  const std::int64_t n = img.dims[0];
  const std::int64_t rows = img.dims[1];
  const std::int64_t cols = img.dims[2];
  if (n == 0) throw DataFormatError("'" + images_path + "' holds no examples");

  Dataset ds;
  ds.inputs = Tensor::zeros({n, rows, cols, 1});
  const std::int64_t pixels = n * rows * cols;
  for (std::int64_t i = 0; i < pixels; ++i) {
    ds.inputs.data[i] = img.payload[i] / 255.0;
  }
  ds.labels.resize(n);
  for (std::int64_t i = 0; i < n; ++i) ds.labels[i] = lab.payload[i];
  ds.num_classes = max_label_plus_one(ds.labels, labels_path);
  const std::int64_t train_end = n - n / 10;
  ds.train = {0, train_end};
  ds.valid = {train_end, n};
  ds.test = {n, n};
  return ds;
}

Dataset load_cifar_binary(const std::string& dir_path) {
  namespace fs = std::filesystem;
  if (!fs::is_directory(dir_path)) {
    throw DataFormatError("'" + dir_path + "' is not a directory");
  }
  std::vector<std::string> train_files;
  std::string test_file;
  for (const auto& entry : fs::directory_iterator(dir_path)) {
    const std::string name = entry.path().filename().string();
    if (name.rfind("data_batch_", 0) == 0 && name.size() > 4 &&
        name.substr(name.size() - 4) == ".bin") {
      train_files.push_back(entry.path().string());
    } else if (name == "test_batch.bin") {
      test_file = entry.path().string();
    }
  }
  if (train_files.empty()) {
    throw DataFormatError("no data_batch_*.bin files in '" + dir_path + "'");
  }
  std::sort(train_files.begin(), train_files.end());

  constexpr std::int64_t kRecord = 1 + 3 * 32 * 32;
  Dataset ds;
  std::vector<double> values;
  auto append_file = [&](const std::string& path) -> std::int64_t {
    const std::vector<unsigned char> bytes = read_file(path);
    if (bytes.empty() || bytes.size() % kRecord != 0) {
      throw DataFormatError("'" + path + "' is not a whole number of CIFAR records");
    }
    const std::int64_t count = static_cast<std::int64_t>(bytes.size()) / kRecord;
    for (std::int64_t r = 0; r < count; ++r) {
      const unsigned char* rec = bytes.data() + r * kRecord;
      ds.labels.push_back(rec[0]);
      const unsigned char* planes = rec + 1;  // 1024 R, 1024 G, 1024 B
      for (std::int64_t pix = 0; pix < 32 * 32; ++pix) {
        for (int c = 0; c < 3; ++c) {
          values.push_back(planes[c * 1024 + pix] / 255.0);
        }
      }
    }
    return count;
  };

  std::int64_t train_total = 0;
  for (const std::string& path : train_files) train_total += append_file(path);
  std::int64_t test_total = 0;
  if (!test_file.empty()) test_total = append_file(test_file);

  const std::int64_t n = train_total + test_total;
  ds.inputs = Tensor({n, 32, 32, 3}, std::move(values));
  ds.num_classes = max_label_plus_one(ds.labels, dir_path);
  const std::int64_t train_end = train_total - train_total / 10;
  ds.train = {0, train_end};
  ds.valid = {train_end, train_total};
  ds.test = {train_total, n};
  return ds;
}

Dataset make_synthetic(const SyntheticSpec& spec) {
  if (spec.num_classes < 2) throw ConfigError("synthetic data needs at least two classes");
  if (spec.dims < 1) throw ConfigError("synthetic data needs at least one dimension");
  if (spec.samples_per_class < 1) throw ConfigError("need at least one sample per class");
  if (spec.cluster_std < 0.0) throw ConfigError("cluster std must be non-negative");

  RngStream stream(spec.seed,
                   {static_cast<std::uint64_t>(StreamPurpose::synthetic_data)});
  std::vector<double> means(static_cast<std::size_t>(spec.num_classes) * spec.dims);
  for (double& m : means) m = 0.25 + 0.5 * stream.next_uniform();

  const std::int64_t n =
      static_cast<std::int64_t>(spec.num_classes) * spec.samples_per_class;
  Dataset ds;
  ds.num_classes = spec.num_classes;
  ds.inputs = Tensor::zeros({n, spec.dims});
  ds.labels.resize(n);
  // Interleave classes so any contiguous split stays balanced, then shuffle.
  std::int64_t row = 0;
  for (int i = 0; i < spec.samples_per_class; ++i) {
    for (int c = 0; c < spec.num_classes; ++c, ++row) {
      ds.labels[row] = c;
      double* x = ds.inputs.data.data() + row * spec.dims;
      const double* mu = means.data() + static_cast<std::size_t>(c) * spec.dims;
      for (int d = 0; d < spec.dims; ++d) {
        x[d] = std::clamp(mu[d] + spec.cluster_std * stream.next_normal(), 0.0, 1.0);
      }
    }
  }
  for (std::int64_t i = n - 1; i > 0; --i) {
    std::int64_t j = stream.next_below(i + 1);
    std::swap(ds.labels[i], ds.labels[j]);
    for (int d = 0; d < spec.dims; ++d) {
      std::swap(ds.inputs.data[i * spec.dims + d], ds.inputs.data[j * spec.dims + d]);
    }
  }
  const std::int64_t train_end = n * 8 / 10;
  const std::int64_t valid_end = n * 9 / 10;
  ds.train = {0, train_end};
  ds.valid = {train_end, valid_end};
  ds.test = {valid_end, n};
  return ds;
}

Batch sample_minibatch(const Dataset& ds, Split split, std::int64_t size,
                       RngStream& stream) {
  if (size < 1) throw ConfigError("minibatch size must be positive");
  const SplitRange& range = ds.split(split);
  if (range.size() <= 0) throw DataFormatError("requested split is empty");

  const std::vector<std::int64_t> ex_shape = ds.example_shape();
  std::int64_t ex_size = 1;
  for (std::int64_t d : ex_shape) ex_size *= d;

  Batch batch;
  std::vector<std::int64_t> shape;
  shape.push_back(size);
  shape.insert(shape.end(), ex_shape.begin(), ex_shape.end());
  batch.inputs = Tensor::zeros(shape);
  batch.labels.resize(size);
  for (std::int64_t i = 0; i < size; ++i) {
    const std::int64_t idx = range.begin + stream.next_below(range.size());
    batch.labels[i] = ds.labels[idx];
    std::memcpy(batch.inputs.data.data() + i * ex_size,
                ds.inputs.data.data() + idx * ex_size, ex_size * sizeof(double));
  }
  return batch;
}

}  // namespace commlearn
