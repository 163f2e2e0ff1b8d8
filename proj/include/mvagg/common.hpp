#pragma once

#include <cstdint>
#include <functional>
#include <stdexcept>
#include <string>
#include <vector>

namespace mvagg {

struct Error : std::runtime_error {
  using std::runtime_error::runtime_error;
};
struct ShapeError : Error {
  using Error::Error;
};
struct GeometryError : Error {
  using Error::Error;
};
struct ConfigError : Error {
  using Error::Error;
};
struct IoError : Error {
  using Error::Error;
};
struct NumericError : Error {
  using Error::Error;
};

// Deterministic 64-bit generator (splitmix64). Same seed gives the same
// sequence on every platform; std:: distributions are avoided on purpose.
class Rng {
 public:
  explicit Rng(uint64_t seed) : state_(seed) {}

  uint64_t next();
  double uniform();  // [0, 1)
  double uniform(double lo, double hi);
  int uniform_int(int lo, int hi);  // inclusive bounds
  double normal();
  // Independent child stream; advances this generator once.
  Rng fork(uint64_t stream);

 private:
  uint64_t state_;
  bool has_spare_ = false;
  double spare_ = 0.0;
};

uint64_t mix64(uint64_t a, uint64_t b);

// Deterministic parallel loop: [0, n) split into contiguous chunks, each
// handled by exactly one thread, so results never depend on thread count.
void parallel_for(int64_t n, const std::function<void(int64_t, int64_t)>& chunk);
int thread_count();
void set_thread_count(int n);

std::string format_shape(const std::vector<int>& shape);

uint64_t fnv1a_file(const std::string& path);
uint64_t fnv1a_bytes(const void* data, size_t len);

}  // namespace mvagg
