#pragma once

// Earth mover's distance as a plain linear program, solved with a dense two-phase
// tableau simplex. Slow but simple; for grids up to about 8x8.

#include <algorithm>
#include <cmath>
#include <limits>
#include <stdexcept>
#include <vector>

namespace oracle {

class Simplex {
 public:
  // min c.x  s.t.  A x = b, x >= 0, with b >= 0.
  Simplex(std::vector<std::vector<double>> a, std::vector<double> b, std::vector<double> c)
      : rows_(a.size()), vars_(c.size()), cost_(std::move(c)) {
    cols_ = vars_ + rows_ + 1;
    t_.assign(rows_ + 1, std::vector<double>(cols_, 0.0));
    basis_.resize(rows_);
    for (std::size_t i = 0; i < rows_; ++i) {
      for (std::size_t j = 0; j < vars_; ++j) t_[i][j] = a[i][j];
      t_[i][vars_ + i] = 1.0;
      t_[i][cols_ - 1] = b[i];
      basis_[i] = vars_ + i;
    }
  }

  double solve() {
    // Phase 1: minimize the sum of artificials.
    auto& obj = t_[rows_];
    std::fill(obj.begin(), obj.end(), 0.0);
    for (std::size_t i = 0; i < rows_; ++i) {
      for (std::size_t j = 0; j < cols_; ++j) {
        if (j < vars_ || j == cols_ - 1) obj[j] -= t_[i][j];
      }
    }
    run(vars_ + rows_);
    if (-obj[cols_ - 1] > 1e-9) throw std::runtime_error("oracle LP infeasible");
    // Drive zero-level artificials out of the basis.
    for (std::size_t i = 0; i < rows_; ++i) {
      if (basis_[i] < vars_) continue;
      for (std::size_t j = 0; j < vars_; ++j) {
        if (std::fabs(t_[i][j]) > 1e-9) {
          pivot(i, j);
          break;
        }
      }
    }
    // Phase 2 objective in terms of the current basis.
    std::fill(obj.begin(), obj.end(), 0.0);
    for (std::size_t j = 0; j < vars_; ++j) obj[j] = cost_[j];
    for (std::size_t i = 0; i < rows_; ++i) {
      const std::size_t bv = basis_[i];
      if (bv >= vars_ || cost_[bv] == 0.0) continue;
      const double f = cost_[bv];
      for (std::size_t j = 0; j < cols_; ++j) obj[j] -= f * t_[i][j];
    }
    run(vars_);
    return -obj[cols_ - 1];
  }

 private:
  void pivot(std::size_t r, std::size_t c) {
    const double p = t_[r][c];
    for (auto& v : t_[r]) v /= p;
    for (std::size_t i = 0; i <= rows_; ++i) {
      if (i == r) continue;
      const double f = t_[i][c];
      if (f == 0.0) continue;
      for (std::size_t j = 0; j < cols_; ++j) t_[i][j] -= f * t_[r][j];
    }
    basis_[r] = c;
  }

  // Dantzig's rule, falling back to Bland's rule after a run of degenerate pivots.
  void run(std::size_t enterable) {
    const double tol = 1e-12;
    int degenerate = 0;
    for (int iter = 0; iter < 200000; ++iter) {
      const auto& obj = t_[rows_];
      std::size_t enter = enterable;
      if (degenerate < 50) {
        double best = -tol;
        for (std::size_t j = 0; j < enterable; ++j) {
          if (obj[j] < best) {
            best = obj[j];
            enter = j;
          }
        }
      } else {
        for (std::size_t j = 0; j < enterable; ++j) {
          if (obj[j] < -tol) {
            enter = j;
            break;
          }
        }
      }
      if (enter == enterable) return;
      std::size_t leave = rows_;
      double ratio = std::numeric_limits<double>::infinity();
      for (std::size_t i = 0; i < rows_; ++i) {
        if (t_[i][enter] > 1e-12) {
          const double q = t_[i][cols_ - 1] / t_[i][enter];
          if (q < ratio - 1e-15 || (q <= ratio + 1e-15 && leave < rows_ && basis_[i] < basis_[leave])) {
            ratio = q;
            leave = i;
          }
        }
      }
      if (leave == rows_) throw std::runtime_error("oracle LP unbounded");
      degenerate = ratio < 1e-15 ? degenerate + 1 : 0;
      pivot(leave, enter);
    }
    throw std::runtime_error("oracle LP iteration limit");
  }

  std::size_t rows_, vars_, cols_;
  std::vector<double> cost_;
  std::vector<std::vector<double>> t_;
  std::vector<std::size_t> basis_;
};

// Both maps row-major h x w, nonnegative; each is scaled to unit mass (all-zero maps
// become uniform). Ground distance: Euclidean between pixel centres.
inline double emd_lp(int h, int w, const std::vector<double>& p, const std::vector<double>& q) {
  auto unit = [](std::vector<double> v) {
    double s = 0;
    for (double x : v) s += x;
    for (auto& x : v) x = s > 0 ? x / s : 1.0 / static_cast<double>(v.size());
    return v;
  };
  const auto a = unit(p), b = unit(q);
  std::vector<int> src, dst;
  for (int i = 0; i < h * w; ++i) {
    if (a[i] > 0) src.push_back(i);
    if (b[i] > 0) dst.push_back(i);
  }
  const std::size_t n = src.size(), m = dst.size();
  std::vector<double> cost(n * m);
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < m; ++j) {
      const double dx = src[i] % w - dst[j] % w, dy = src[i] / w - dst[j] / w;
      cost[i * m + j] = std::sqrt(dx * dx + dy * dy);
    }
  }
  // All supply rows plus all but the last demand row (the last one is implied).
  std::vector<std::vector<double>> A;
  std::vector<double> rhs;
  for (std::size_t i = 0; i < n; ++i) {
    std::vector<double> row(n * m, 0.0);
    for (std::size_t j = 0; j < m; ++j) row[i * m + j] = 1.0;
    A.push_back(std::move(row));
    rhs.push_back(a[src[i]]);
  }
  for (std::size_t j = 0; j + 1 < m; ++j) {
    std::vector<double> row(n * m, 0.0);
    for (std::size_t i = 0; i < n; ++i) row[i * m + j] = 1.0;
    A.push_back(std::move(row));
    rhs.push_back(b[dst[j]]);
  }
  return Simplex(std::move(A), std::move(rhs), std::move(cost)).solve();
}

// One-row maps: EMD is the L1 distance between the cumulative distributions.
inline double emd_1d(const std::vector<double>& p, const std::vector<double>& q) {
  double sp = 0, sq = 0;
  for (double x : p) sp += x;
  for (double x : q) sq += x;
  double cp = 0, cq = 0, total = 0;
  for (std::size_t i = 0; i + 1 < p.size(); ++i) {
    cp += p[i] / sp;
    cq += q[i] / sq;
    total += std::fabs(cp - cq);
  }
  return total;
}

}  // namespace oracle
