#pragma once

// Minimal reverse-mode automatic differentiation over channel-major feature tensors.
//
// A Var holds a C x (H*W) row-major matrix plus its logical shape. Plain 2-D matrices use
// shape {rows, 1, cols}. Operations record their parents and a backward closure; calling
// backward() on a scalar walks the graph in reverse topological order and accumulates
// gradients into every node that requires them (parameters are leaves that do).

#include "camrank/geometry.hpp"
#include "camrank/grid.hpp"

#include <functional>
#include <memory>
#include <span>
#include <vector>

namespace camrank::ad {

struct Shape {
  int channels = 0;
  int height = 0;
  int width = 0;

  int pixels() const { return height * width; }
  friend bool operator==(const Shape&, const Shape&) = default;
};

class Node;
using Var = std::shared_ptr<Node>;

class Node {
 public:
  Node(Matrix value, Shape shape, bool requires_grad);

  const Matrix& value() const { return value_; }
  Matrix& mutable_value() { return value_; }
  const Shape& shape() const { return shape_; }
  bool requires_grad() const { return requires_grad_; }

  bool has_grad() const { return grad_.size() != 0; }
  const Matrix& grad() const { return grad_; }
  void zero_grad() { grad_.resize(0, 0); }

  // Adds g into the gradient (no-op for nodes that do not require one).
  template <typename Derived>
  void accumulate(const Eigen::MatrixBase<Derived>& g) {
    if (!requires_grad_) return;
    if (grad_.size() == 0) {
      grad_ = g;
    } else {
      grad_ += g;
    }
  }

  // Scalar value of a 1x1 node.
  double item() const { return value_(0, 0); }

 private:
  friend Var make_op(Matrix, Shape, std::vector<Var>, std::function<void(const Matrix&)>);
  friend void backward(const Var&, double);

  Matrix value_;
  Matrix grad_;
  Shape shape_;
  bool requires_grad_;
  std::vector<Var> parents_;
  std::function<void(const Matrix&)> backward_;
};

// Builds an operation node. The closure receives the upstream gradient and must
// accumulate into the parents; it is dropped when no parent requires a gradient.
Var make_op(Matrix value, Shape shape, std::vector<Var> parents, std::function<void(const Matrix&)> fn);

Var constant(Matrix value, Shape shape);
Var constant(const Tensor& t);
Var parameter(Matrix value, Shape shape);
Var scalar(double v);

// Accumulates d(root)/d(node) * seed into every reachable leaf requiring a gradient;
// interior nodes hold the gradient of this pass only.
void backward(const Var& root, double seed = 1.0);

Tensor to_tensor(const Var& v);

// --- operations ---------------------------------------------------------------------------

struct ConvSpec {
  int kernel = 3;
  int stride = 1;
  int padding = 1;
  int dilation = 1;
};

// weight: Cout x (Cin*k*k), bias: Cout x 1.
Var conv2d(const Var& x, const Var& weight, const Var& bias, const ConvSpec& spec);

Var relu(const Var& x);
Var sigmoid(const Var& x);
Var add(const Var& a, const Var& b);
Var sub(const Var& a, const Var& b);
Var mul(const Var& a, const Var& b);
Var one_minus(const Var& x);
Var scale(const Var& x, double s);
Var scale_by(const Var& x, const Var& s);  // s is 1x1
Var sum(std::span<const Var> terms);      // same-shape sum

// x: C x H x W, gate: 1 x H x W broadcast over channels.
Var mul_channels(const Var& x, const Var& gate);

Var concat_channels(std::span<const Var> parts);
Var reshape(const Var& x, Shape shape);
// Stacks 2-D matrices with equal column counts.
Var concat_rows(std::span<const Var> parts);

// Bilinear resampling with half-pixel centres (corner pixels not aligned).
Var resize_bilinear(const Var& x, int height, int width);
Matrix bilinear_weights(int out_size, int in_size);

// Both operands are treated as plain 2-D matrices.
Var matmul(const Var& a, const Var& b, bool transpose_a = false, bool transpose_b = false);
Var softmax_rows(const Var& x);

// x: n x d, weight: o x d, bias: o x 1 -> n x o.
Var linear(const Var& x, const Var& weight, const Var& bias);

// Bilinear ROI pooling: one row per box holding C x out x out values. Boxes are in input
// pixels; spatial_scale maps them onto the feature grid. Gradients flow to the features
// only.
Var roi_align(const Var& features, std::span<const Box> boxes, double spatial_scale, int out_size,
              int sampling_ratio = 2);

// Row r of x as a C x out x out tensor view (copy).
Var row_as_tensor(const Var& x, int row, Shape shape);

// Scalar objective defined by an external value-and-gradient routine.
struct ScalarTerm {
  double value = 0.0;
  std::vector<Matrix> grads;  // one per input, same shape as its value
};
using ScalarFn = std::function<ScalarTerm(std::span<const Matrix* const>)>;
Var scalar_term(std::vector<Var> inputs, const ScalarFn& fn);

}  // namespace camrank::ad
