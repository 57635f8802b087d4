#pragma once

#include <stdexcept>
#include <string>

namespace commlearn {

struct Error : std::runtime_error {
  explicit Error(const std::string& msg) : std::runtime_error(msg) {}
};

struct ShapeError : Error {
  using Error::Error;
};

// Malformed or truncated dataset files (IDX, CIFAR binary).
struct DataFormatError : Error {
  using Error::Error;
};

struct ConfigError : Error {
  using Error::Error;
};

struct CheckpointError : Error {
  using Error::Error;
};

// Raised when a training loss goes non-finite or above the abort threshold.
struct DivergenceError : Error {
  DivergenceError(const std::string& msg, long round, int worker, int step, double loss)
      : Error(msg), round(round), worker(worker), step(step), loss(loss) {}
  long round;
  int worker;  // -1 when not attributable to a single worker
  int step;    // local step index, -1 when not applicable
  double loss;
};

struct SweepError : Error {
  using Error::Error;
};

struct MetaTrainError : Error {
  using Error::Error;
};

}  // namespace commlearn
