#pragma once

#include <cstdint>
#include <initializer_list>

namespace commlearn {

// Purpose tags for deriving independent substreams. Each (root, round, worker,
// purpose, ...) path yields its own stream, so workers and rounds can be
// evaluated in any order without changing the sampled values.
enum class StreamPurpose : std::uint64_t {
  param_init = 1,
  local_batch = 2,
  monitor_batch = 3,
  objective_batch = 4,
  synthetic_data = 5,
  pes_perturbation = 6,
  truncation = 7,
  episode_init = 8,
};

std::uint64_t derive_key(std::initializer_list<std::uint64_t> parts);

// Counter-based generator: value(i) = mix(key + i * gamma). Stateless apart
// from the counter, so a stream is fully described by (key, counter).
class RngStream {
 public:
  explicit RngStream(std::uint64_t key) : key_(key) {}
  RngStream(std::uint64_t root, std::initializer_list<std::uint64_t> path)
      : RngStream(derive_key_with_root(root, path)) {}

  std::uint64_t next_u64();
  double next_uniform();           // [0, 1)
  double next_normal();            // standard normal, Box-Muller
  std::int64_t next_below(std::int64_t n);  // uniform in [0, n)

  std::uint64_t key() const { return key_; }
  std::uint64_t counter() const { return counter_; }

 private:
  static std::uint64_t derive_key_with_root(std::uint64_t root,
                                            std::initializer_list<std::uint64_t> path);
  std::uint64_t key_;
  std::uint64_t counter_ = 0;
};

}  // namespace commlearn
