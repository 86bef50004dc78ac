#pragma once

#include <Eigen/Dense>

#include <atomic>
#include <cstdint>
#include <mutex>
#include <stdexcept>
#include <string>
#include <thread>
#include <vector>

namespace lkc {

using Vec = Eigen::VectorXd;
using Mat = Eigen::MatrixXd;

/// Base class for all errors raised by this library.
struct Error : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct InvalidModel : Error { using Error::Error; };
struct NonConvergence : Error { using Error::Error; };
struct DegenerateProblem : Error { using Error::Error; };
struct ZeroNormalizer : Error { using Error::Error; };
struct NotAbsolutelyContinuous : Error { using Error::Error; };
struct NonErgodicPolicy : Error { using Error::Error; };
struct EmptyCluster : Error { using Error::Error; };
struct ZeroLikelihood : Error { using Error::Error; };
struct NumericalUnderflow : Error { using Error::Error; };
struct SingularCovariance : Error { using Error::Error; };
struct BoundDecrease : Error { using Error::Error; };
struct CostIncrease : Error { using Error::Error; };
struct CapExceeded : Error { using Error::Error; };
struct BudgetExceeded : Error { using Error::Error; };
struct ConfigError : Error { using Error::Error; };
struct IoError : Error { using Error::Error; };

inline std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

/// Derives a stream seed from a root seed. Stream 0 is distinct from the
/// root itself, so derived generators never alias the root generator.
inline std::uint64_t derive_seed(std::uint64_t root, std::uint64_t stream) {
  return splitmix64(root ^ splitmix64(stream + 1));
}

/// Applies fn(i) for i in [0, n) across worker threads and collects the
/// results in index order, so the output is independent of scheduling.
template <typename T, typename Fn>
std::vector<T> parallel_map(std::size_t n, Fn&& fn) {
  std::vector<T> out(n);
  unsigned workers = std::min<std::size_t>(n, std::max(1u, std::thread::hardware_concurrency()));
  if (workers <= 1) {
    for (std::size_t i = 0; i < n; ++i) out[i] = fn(i);
    return out;
  }
  std::atomic<std::size_t> next{0};
  std::vector<std::thread> pool;
  pool.reserve(workers);
  std::exception_ptr first_error;
  std::mutex err_mutex;
  for (unsigned w = 0; w < workers; ++w) {
    pool.emplace_back([&] {
      for (;;) {
        std::size_t i = next.fetch_add(1);
        if (i >= n) return;
        try {
          out[i] = fn(i);
        } catch (...) {
          std::lock_guard<std::mutex> lock(err_mutex);
          if (!first_error) first_error = std::current_exception();
          return;
        }
      }
    });
  }
  for (auto& t : pool) t.join();
  if (first_error) std::rethrow_exception(first_error);
  return out;
}

/// FNV-1a over a byte string; used to stamp output files with the hash of
/// the configuration that produced them.
inline std::uint64_t fnv1a64(const std::string& s) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : s) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

inline bool approx_unit_sum(const Vec& v, double tol = 1e-12) {
  return std::abs(v.sum() - 1.0) <= tol;
}

}  // namespace lkc
