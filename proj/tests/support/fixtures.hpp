#pragma once

#include <cmath>
#include <filesystem>
#include <string>
#include <vector>

#include "twotower/common.hpp"
#include "twotower/data.hpp"
#include "twotower/towers.hpp"

namespace twotower::testing {

// Fresh scratch directory under the system temp dir, removed on destruction.
class TempDir {
 public:
  explicit TempDir(const std::string& tag) {
    Rng rng(static_cast<std::uint64_t>(std::hash<std::string>{}(tag)) ^
            static_cast<std::uint64_t>(reinterpret_cast<std::uintptr_t>(this)));
    path_ = std::filesystem::temp_directory_path() / ("twotower_" + tag + "_" + std::to_string(rng.next() % 1000000007));
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
  std::filesystem::path operator/(const std::string& name) const { return path_ / name; }

 private:
  std::filesystem::path path_;
};

inline Matrix random_matrix(std::size_t rows, std::size_t cols, Rng& rng, double scale = 1.0) {
  Matrix m(static_cast<Eigen::Index>(rows), static_cast<Eigen::Index>(cols));
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = scale * rng.normal();
  return m;
}

// Small synthetic corpus split with default ratios.
inline SplitDataset small_dataset(std::size_t users = 200, std::size_t items = 300, std::uint64_t seed = 3,
                                  std::size_t per_user = 20) {
  SynthConfig sc;
  sc.n_users = users;
  sc.n_items = items;
  sc.n_clusters = 5;
  sc.interactions_per_user = per_user;
  sc.seed = seed;
  SplitConfig split;
  split.seed = seed;
  return build_splits(synth_generate(sc), split);
}

inline double relative_error(double a, double b) {
  const double denom = std::max({std::abs(a), std::abs(b), 1e-8});
  return std::abs(a - b) / denom;
}

}  // namespace twotower::testing
