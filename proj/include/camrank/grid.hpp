#pragma once

#include <Eigen/Dense>

#include <cstdint>
#include <stdexcept>
#include <string>

namespace camrank {

// Dense 2-D grids are stored row-major so that pixel (x, y) lives at y * width + x
// in every container of the project, including the autodiff tensors.
template <typename Scalar>
using GridT = Eigen::Array<Scalar, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

using Grid = GridT<double>;
using LabelGrid = GridT<int>;

template <typename Scalar>
using MatrixT = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

using Matrix = MatrixT<double>;

struct Point {
  int x = 0;
  int y = 0;

  friend bool operator==(const Point&, const Point&) = default;
};

// Input or invariant violation. The CLI maps it to exit code 1.
class ValidationError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Multi-channel image, channel-major: data.row(c) holds one height x width plane.
struct Tensor {
  int channels = 0;
  int height = 0;
  int width = 0;
  Matrix data;

  Tensor() = default;
  Tensor(int c, int h, int w) : channels(c), height(h), width(w), data(Matrix::Zero(c, h * w)) {}

  Eigen::Map<Matrix> plane(int c) { return {data.row(c).data(), height, width}; }
  Eigen::Map<const Matrix> plane(int c) const { return {data.row(c).data(), height, width}; }
};

inline void require_same_shape(Eigen::Index rows_a, Eigen::Index cols_a, Eigen::Index rows_b,
                               Eigen::Index cols_b, const char* what) {
  if (rows_a != rows_b || cols_a != cols_b) {
    throw ValidationError(std::string(what) + ": shape mismatch (" + std::to_string(rows_a) + "x" +
                          std::to_string(cols_a) + " vs " + std::to_string(rows_b) + "x" +
                          std::to_string(cols_b) + ")");
  }
}

template <typename DA, typename DB>
void require_same_shape(const Eigen::DenseBase<DA>& a, const Eigen::DenseBase<DB>& b, const char* what) {
  require_same_shape(a.rows(), a.cols(), b.rows(), b.cols(), what);
}

}  // namespace camrank
