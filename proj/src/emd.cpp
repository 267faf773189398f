#include "camrank/emd.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <vector>

namespace camrank::metrics {
namespace {

constexpr double kMassTol = 1e-14;
constexpr double kFlowTol = 1e-16;

struct Site {
  double x;
  double y;
  double mass;
};

Grid block_sum(const Grid& g, int factor) {
  const auto rows = (g.rows() + factor - 1) / factor;
  const auto cols = (g.cols() + factor - 1) / factor;
  Grid out = Grid::Zero(rows, cols);
  for (Eigen::Index y = 0; y < g.rows(); ++y) {
    for (Eigen::Index x = 0; x < g.cols(); ++x) out(y / factor, x / factor) += g(y, x);
  }
  return out;
}

Grid unit_mass(const Grid& g) {
  if ((g < 0.0).any()) throw ValidationError("earth_movers_distance: negative mass");
  const double total = g.sum();
  if (total <= 0.0) return Grid::Constant(g.rows(), g.cols(), 1.0 / static_cast<double>(g.size()));
  return g / total;
}

}  // namespace

double transport_cost(const Grid& supply, const Grid& demand, double pixel_pitch) {
  require_same_shape(supply, demand, "transport_cost");
  // Mass shared by both maps at the same pixel stays put at zero cost; with a metric
  // ground distance some optimal plan always does this.
  std::vector<Site> sources;
  std::vector<Site> sinks;
  for (Eigen::Index y = 0; y < supply.rows(); ++y) {
    for (Eigen::Index x = 0; x < supply.cols(); ++x) {
      const double net = supply(y, x) - demand(y, x);
      if (net > kMassTol) sources.push_back({double(x), double(y), net});
      if (net < -kMassTol) sinks.push_back({double(x), double(y), -net});
    }
  }
  const std::size_t n = sources.size();
  const std::size_t m = sinks.size();
  if (n == 0 || m == 0) return 0.0;

  Matrix cost(n, m);
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < m; ++j) {
      cost(i, j) = pixel_pitch * std::hypot(sources[i].x - sinks[j].x, sources[i].y - sinks[j].y);
    }
  }
  Matrix flow = Matrix::Zero(n, m);
  std::vector<double> left(n), need(m);
  for (std::size_t i = 0; i < n; ++i) left[i] = sources[i].mass;
  for (std::size_t j = 0; j < m; ++j) need[j] = sinks[j].mass;

  // Nodes 0..n-1 are sources, n..n+m-1 sinks. Reduced cost of u->v: c + p(u) - p(v).
  const std::size_t nodes = n + m;
  std::vector<double> potential(nodes, 0.0), dist(nodes);
  std::vector<long> pred(nodes);
  std::vector<char> done(nodes);
  constexpr double kInf = std::numeric_limits<double>::infinity();

  auto supply_left = [&] {
    for (double v : left)
      if (v > kMassTol) return true;
    return false;
  };

  while (supply_left()) {
    std::fill(dist.begin(), dist.end(), kInf);
    std::fill(pred.begin(), pred.end(), -1);
    std::fill(done.begin(), done.end(), 0);
    for (std::size_t i = 0; i < n; ++i) {
      if (left[i] > kMassTol) dist[i] = 0.0;
    }
    long target = -1;
    for (;;) {
      long u = -1;
      double best = kInf;
      for (std::size_t v = 0; v < nodes; ++v) {
        if (!done[v] && dist[v] < best) {
          best = dist[v];
          u = static_cast<long>(v);
        }
      }
      if (u < 0) break;
      done[u] = 1;
      if (static_cast<std::size_t>(u) >= n) {
        const std::size_t j = u - n;
        if (need[j] > kMassTol) {
          target = u;
          break;
        }
        for (std::size_t i = 0; i < n; ++i) {
          if (done[i] || flow(i, j) <= kFlowTol) continue;
          const double rc = std::max(0.0, -cost(i, j) + potential[u] - potential[i]);
          if (dist[u] + rc < dist[i]) {
            dist[i] = dist[u] + rc;
            pred[i] = u;
          }
        }
      } else {
        const std::size_t i = u;
        for (std::size_t j = 0; j < m; ++j) {
          const std::size_t v = n + j;
          if (done[v]) continue;
          const double rc = std::max(0.0, cost(i, j) + potential[i] - potential[v]);
          if (dist[u] + rc < dist[v]) {
            dist[v] = dist[u] + rc;
            pred[v] = u;
          }
        }
      }
    }
    if (target < 0) break;

    const double reach = dist[target];
    for (std::size_t v = 0; v < nodes; ++v) potential[v] += std::min(dist[v], reach);

    double delta = need[target - n];
    long v = target;
    while (pred[v] >= 0) {
      const long u = pred[v];
      if (static_cast<std::size_t>(u) >= n) delta = std::min(delta, flow(v, u - n));
      v = u;
    }
    delta = std::min(delta, left[v]);

    left[v] -= delta;
    need[target - n] -= delta;
    v = target;
    while (pred[v] >= 0) {
      const long u = pred[v];
      if (static_cast<std::size_t>(u) < n) {
        flow(u, v - n) += delta;
      } else {
        flow(v, u - n) -= delta;
      }
      v = u;
    }
  }
  return (cost.array() * flow.array()).sum();
}

double earth_movers_distance(const Grid& a, const Grid& b) {
  require_same_shape(a, b, "earth_movers_distance");
  const int side = static_cast<int>(std::max(a.rows(), a.cols()));
  if (side <= kExactEmdSide) return transport_cost(unit_mass(a), unit_mass(b));
  const int factor = (side + kExactEmdSide - 1) / kExactEmdSide;
  return transport_cost(block_sum(unit_mass(a), factor), block_sum(unit_mass(b), factor),
                        static_cast<double>(factor));
}

}  // namespace camrank::metrics
