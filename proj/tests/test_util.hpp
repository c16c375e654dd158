#pragma once

// Shared helpers and independent oracles for the test suites.

#include <atomic>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include <unistd.h>

#include "sam3d/rng.hpp"

namespace testutil {

class TempDir {
 public:
  TempDir() {
    static std::atomic<int> counter{0};
    path_ = std::filesystem::temp_directory_path() /
            ("sam3d_test_" + std::to_string(::getpid()) + "_" + std::to_string(counter++));
    std::filesystem::remove_all(path_);
    std::filesystem::create_directories(path_);
  }
  ~TempDir() {
    std::error_code ec;
    std::filesystem::remove_all(path_, ec);
  }
  TempDir(const TempDir&) = delete;
  TempDir& operator=(const TempDir&) = delete;

  const std::filesystem::path& path() const { return path_; }

 private:
  std::filesystem::path path_;
};

template <typename A, typename B>
double cosine(std::span<const A> a, const std::vector<B>& b) {
  double dot = 0, na = 0, nb = 0;
  for (std::size_t i = 0; i < b.size(); ++i) {
    dot += static_cast<double>(a[i]) * b[i];
    na += static_cast<double>(a[i]) * a[i];
    nb += static_cast<double>(b[i]) * b[i];
  }
  return dot / std::sqrt(na * nb);
}

// Point count per object drawn straight from the power law: one uniform per
// object from the scene's size stream (stream id 1), scaled by (j + 1)^-alpha.
inline std::vector<int> power_law_sizes(std::uint64_t seed, int n, int lo, int hi, double alpha) {
  sam3d::Rng rng(sam3d::derive_seed(seed, 1));
  std::vector<int> out;
  for (int j = 0; j < n; ++j) {
    const double u = lo + (hi - lo) * rng.uniform();
    const double v = u / std::pow(j + 1.0, alpha);
    out.push_back(std::max(1, static_cast<int>(std::lround(v))));
  }
  return out;
}

}  // namespace testutil
