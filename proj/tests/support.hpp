#pragma once

#include "camrank/grid.hpp"
#include "oracles/metric_oracles.hpp"

#include <filesystem>
#include <random>
#include <string>

namespace testing {

inline oracle::Map to_map(const camrank::Grid& g) {
  oracle::Map m{static_cast<int>(g.rows()), static_cast<int>(g.cols()), {}};
  for (Eigen::Index y = 0; y < g.rows(); ++y)
    for (Eigen::Index x = 0; x < g.cols(); ++x) m.v.push_back(g(y, x));
  return m;
}

inline camrank::Grid random_grid(std::mt19937_64& rng, int h, int w) {
  std::uniform_real_distribution<double> u(0.0, 1.0);
  camrank::Grid g(h, w);
  for (Eigen::Index i = 0; i < g.size(); ++i) g.data()[i] = u(rng);
  return g;
}

// Random binary mask; `density` is the foreground probability.
inline camrank::Grid random_mask(std::mt19937_64& rng, int h, int w, double density = 0.4) {
  std::bernoulli_distribution b(density);
  camrank::Grid g(h, w);
  for (Eigen::Index i = 0; i < g.size(); ++i) g.data()[i] = b(rng) ? 1.0 : 0.0;
  return g;
}

// Fresh empty directory under the system temp dir.
inline std::filesystem::path scratch_dir(const std::string& name) {
  auto dir = std::filesystem::temp_directory_path() / ("camrank_test_" + name);
  std::filesystem::remove_all(dir);
  std::filesystem::create_directories(dir);
  return dir;
}

}  // namespace testing
