#pragma once

// Shared plumbing: deterministic parallel loops, seed derivation, file helpers.

#include <atomic>
#include <cstdint>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <functional>
#include <random>
#include <stdexcept>
#include <string>
#include <thread>
#include <vector>

namespace issm {

// Thrown on precondition / input-validation failures (CLI exit code 1).
using ValidationError = std::invalid_argument;
// Everything else (I/O, non-convergence, internal) surfaces as
// std::runtime_error (CLI exit code 2).

inline int thread_count() {
  static int n = [] {
    if (const char* env = std::getenv("ISSM_THREADS")) {
      int v = std::atoi(env);
      if (v > 0) return v;
    }
    unsigned hc = std::thread::hardware_concurrency();
    return hc > 0 ? static_cast<int>(hc) : 1;
  }();
  return n;
}

// Static-partition parallel loop. Each index is processed by exactly one
// thread and every per-index write goes to distinct state, so results are
// identical for any thread count.
template <typename Fn>
void parallel_for(int64_t begin, int64_t end, Fn&& fn) {
  const int64_t n = end - begin;
  if (n <= 0) return;
  int nt = thread_count();
  if (nt <= 1 || n < 2 * nt) {
    for (int64_t i = begin; i < end; ++i) fn(i);
    return;
  }
  if (nt > n) nt = static_cast<int>(n);
  std::vector<std::thread> pool;
  pool.reserve(nt - 1);
  const int64_t chunk = (n + nt - 1) / nt;
  for (int t = 1; t < nt; ++t) {
    int64_t lo = begin + t * chunk;
    int64_t hi = std::min(end, lo + chunk);
    if (lo >= hi) break;
    pool.emplace_back([lo, hi, &fn] {
      for (int64_t i = lo; i < hi; ++i) fn(i);
    });
  }
  for (int64_t i = begin; i < std::min(end, begin + chunk); ++i) fn(i);
  for (auto& th : pool) th.join();
}

inline uint64_t fnv1a64(const void* data, size_t n, uint64_t h = 0xcbf29ce484222325ULL) {
  const auto* p = static_cast<const uint8_t*>(data);
  for (size_t i = 0; i < n; ++i) {
    h ^= p[i];
    h *= 0x100000001b3ULL;
  }
  return h;
}

inline uint64_t fnv1a64(const std::string& s) { return fnv1a64(s.data(), s.size()); }

inline uint64_t mix_seed(uint64_t a, uint64_t b) {
  uint64_t z = a + 0x9e3779b97f4a7c15ULL * (b + 1);
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

// Per-entity RNG stream: stable under any scheduling of the outer loop.
inline std::mt19937_64 seeded_rng(uint64_t seed, const std::string& tag = {}) {
  return std::mt19937_64(tag.empty() ? seed : mix_seed(seed, fnv1a64(tag)));
}

inline std::vector<char> read_file_bytes(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("cannot open file: " + path);
  f.seekg(0, std::ios::end);
  std::vector<char> buf(static_cast<size_t>(f.tellg()));
  f.seekg(0);
  f.read(buf.data(), static_cast<std::streamsize>(buf.size()));
  if (!f) throw std::runtime_error("short read: " + path);
  return buf;
}

// Atomic replace: write to a sibling temp file, then rename over the target.
inline void write_file_atomic(const std::string& path, const void* data, size_t n) {
  namespace fs = std::filesystem;
  fs::path target(path);
  fs::path tmp = target;
  tmp += ".tmp";
  {
    std::ofstream f(tmp, std::ios::binary | std::ios::trunc);
    if (!f) throw std::runtime_error("cannot write file: " + tmp.string());
    f.write(static_cast<const char*>(data), static_cast<std::streamsize>(n));
    f.flush();
    if (!f) throw std::runtime_error("write failed: " + tmp.string());
  }
  std::error_code ec;
  fs::rename(tmp, target, ec);
  if (ec) {
    fs::remove(tmp, ec);
    throw std::runtime_error("rename failed for " + path);
  }
}

inline void write_file_atomic(const std::string& path, const std::string& text) {
  write_file_atomic(path, text.data(), text.size());
}

inline uint64_t file_checksum(const std::string& path) {
  auto bytes = read_file_bytes(path);
  return fnv1a64(bytes.data(), bytes.size());
}

}  // namespace issm
