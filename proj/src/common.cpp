#include "mvagg/common.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdlib>
#include <fstream>
#include <mutex>
#include <thread>

namespace mvagg {

uint64_t Rng::next() {
  state_ += 0x9e3779b97f4a7c15ULL;
  uint64_t z = state_;
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

double Rng::uniform() { return static_cast<double>(next() >> 11) * 0x1.0p-53; }

double Rng::uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

int Rng::uniform_int(int lo, int hi) {
  if (hi < lo) throw Error("Rng::uniform_int: empty range");
  uint64_t span = static_cast<uint64_t>(hi) - static_cast<uint64_t>(lo) + 1;
  return lo + static_cast<int>(next() % span);
}

double Rng::normal() {
  if (has_spare_) {
    has_spare_ = false;
    return spare_;
  }
  double u1 = uniform();
  if (u1 < 1e-300) u1 = 1e-300;
  double u2 = uniform();
  double r = std::sqrt(-2.0 * std::log(u1));
  double a = 2.0 * 3.14159265358979323846 * u2;
  spare_ = r * std::sin(a);
  has_spare_ = true;
  return r * std::cos(a);
}

Rng Rng::fork(uint64_t stream) { return Rng(mix64(next(), stream)); }

uint64_t mix64(uint64_t a, uint64_t b) {
  uint64_t z = a ^ (b + 0x9e3779b97f4a7c15ULL + (a << 6) + (a >> 2));
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

namespace {
std::atomic<int> g_threads{0};
thread_local bool tl_in_parallel = false;
}  // namespace

int thread_count() {
  int t = g_threads.load(std::memory_order_relaxed);
  if (t > 0) return t;
  int def = 0;
  if (const char* env = std::getenv("MVAGG_THREADS")) def = std::atoi(env);
  if (def < 1) def = static_cast<int>(std::thread::hardware_concurrency());
  if (def < 1) def = 1;
  if (def > 16) def = 16;
  g_threads.store(def, std::memory_order_relaxed);
  return def;
}

void set_thread_count(int n) {
  if (n < 1) n = 1;
  g_threads.store(n, std::memory_order_relaxed);
}

void parallel_for(int64_t n, const std::function<void(int64_t, int64_t)>& chunk) {
  if (n <= 0) return;
  int threads = tl_in_parallel ? 1 : thread_count();
  if (threads > n) threads = static_cast<int>(n);
  if (threads <= 1) {
    chunk(0, n);
    return;
  }
  const int64_t per = (n + threads - 1) / threads;
  std::vector<std::thread> workers;
  workers.reserve(threads - 1);
  std::atomic<bool> failed{false};
  std::exception_ptr first_error;
  static std::mutex err_mutex;
  for (int i = 1; i < threads; ++i) {
    int64_t lo = i * per;
    int64_t hi = std::min<int64_t>(n, lo + per);
    if (lo >= hi) break;
    workers.emplace_back([&, lo, hi] {
      tl_in_parallel = true;
      try {
        chunk(lo, hi);
      } catch (...) {
        std::lock_guard<std::mutex> g(err_mutex);
        if (!failed.exchange(true)) first_error = std::current_exception();
      }
    });
  }
  tl_in_parallel = true;
  try {
    chunk(0, std::min<int64_t>(per, n));
  } catch (...) {
    std::lock_guard<std::mutex> g(err_mutex);
    if (!failed.exchange(true)) first_error = std::current_exception();
  }
  tl_in_parallel = false;
  for (auto& w : workers) w.join();
  if (failed.load()) std::rethrow_exception(first_error);
}

std::string format_shape(const std::vector<int>& shape) {
  std::string s = "[";
  for (size_t i = 0; i < shape.size(); ++i) {
    if (i) s += ",";
    s += std::to_string(shape[i]);
  }
  s += "]";
  return s;
}

uint64_t fnv1a_bytes(const void* data, size_t len) {
  const unsigned char* p = static_cast<const unsigned char*>(data);
  uint64_t h = 0xcbf29ce484222325ULL;
  for (size_t i = 0; i < len; ++i) {
    h ^= p[i];
    h *= 0x100000001b3ULL;
  }
  return h;
}

uint64_t fnv1a_file(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw IoError("fnv1a_file: cannot open " + path);
  uint64_t h = 0xcbf29ce484222325ULL;
  char buf[65536];
  while (f) {
    f.read(buf, sizeof(buf));
    std::streamsize got = f.gcount();
    for (std::streamsize i = 0; i < got; ++i) {
      h ^= static_cast<unsigned char>(buf[i]);
      h *= 0x100000001b3ULL;
    }
  }
  return h;
}

}  // namespace mvagg
