#include "camrank/autodiff.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>
#include <unordered_set>
#include <utility>

namespace camrank::ad {

Node::Node(Matrix value, Shape shape, bool requires_grad)
    : value_(std::move(value)), shape_(shape), requires_grad_(requires_grad) {
  if (value_.rows() != shape_.channels || value_.cols() != shape_.pixels()) {
    throw std::logic_error("autodiff: value does not match its shape");
  }
}

Var make_op(Matrix value, Shape shape, std::vector<Var> parents, std::function<void(const Matrix&)> fn) {
  bool needs = false;
  for (const auto& p : parents) needs = needs || p->requires_grad();
  auto node = std::make_shared<Node>(std::move(value), shape, needs);
  if (needs) {
    node->parents_ = std::move(parents);
    node->backward_ = std::move(fn);
  }
  return node;
}

Var constant(Matrix value, Shape shape) { return std::make_shared<Node>(std::move(value), shape, false); }

Var constant(const Tensor& t) { return constant(t.data, {t.channels, t.height, t.width}); }

Var parameter(Matrix value, Shape shape) { return std::make_shared<Node>(std::move(value), shape, true); }

Var scalar(double v) { return constant(Matrix::Constant(1, 1, v), {1, 1, 1}); }

void backward(const Var& root, double seed) {
  if (root->value().size() != 1) throw std::logic_error("backward: root must be a scalar");
  if (!root->requires_grad()) return;
  std::vector<Node*> order;
  std::unordered_set<Node*> seen;
  std::vector<std::pair<Node*, std::size_t>> stack{{root.get(), 0}};
  seen.insert(root.get());
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->parents_.size()) {
      Node* parent = node->parents_[next++].get();
      if (parent->requires_grad() && seen.insert(parent).second) stack.emplace_back(parent, 0);
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }
  // Interior nodes start fresh on every pass; only leaves accumulate across calls.
  for (Node* n : order) {
    if (!n->parents_.empty()) n->zero_grad();
  }
  root->accumulate(Matrix::Constant(1, 1, seed));
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node* n = *it;
    if (n->backward_ && n->has_grad()) n->backward_(n->grad_);
  }
}

Tensor to_tensor(const Var& v) {
  Tensor t;
  t.channels = v->shape().channels;
  t.height = v->shape().height;
  t.width = v->shape().width;
  t.data = v->value();
  return t;
}

// --- convolution ---------------------------------------------------------------------------

namespace {

int conv_out(int in, const ConvSpec& s) {
  return (in + 2 * s.padding - s.dilation * (s.kernel - 1) - 1) / s.stride + 1;
}

Matrix im2col(const Matrix& x, const Shape& in, const ConvSpec& s, int oh, int ow) {
  const int k = s.kernel;
  Matrix cols = Matrix::Zero(static_cast<Eigen::Index>(in.channels) * k * k, oh * ow);
  for (int c = 0; c < in.channels; ++c) {
    const double* src = x.row(c).data();
    for (int ky = 0; ky < k; ++ky) {
      for (int kx = 0; kx < k; ++kx) {
        double* dst = cols.row((c * k + ky) * k + kx).data();
        for (int oy = 0; oy < oh; ++oy) {
          const int iy = oy * s.stride - s.padding + ky * s.dilation;
          if (iy < 0 || iy >= in.height) continue;
          for (int ox = 0; ox < ow; ++ox) {
            const int ix = ox * s.stride - s.padding + kx * s.dilation;
            if (ix < 0 || ix >= in.width) continue;
            dst[oy * ow + ox] = src[iy * in.width + ix];
          }
        }
      }
    }
  }
  return cols;
}

Matrix col2im(const Matrix& cols, const Shape& in, const ConvSpec& s, int oh, int ow) {
  const int k = s.kernel;
  Matrix x = Matrix::Zero(in.channels, in.pixels());
  for (int c = 0; c < in.channels; ++c) {
    double* dst = x.row(c).data();
    for (int ky = 0; ky < k; ++ky) {
      for (int kx = 0; kx < k; ++kx) {
        const double* src = cols.row((c * k + ky) * k + kx).data();
        for (int oy = 0; oy < oh; ++oy) {
          const int iy = oy * s.stride - s.padding + ky * s.dilation;
          if (iy < 0 || iy >= in.height) continue;
          for (int ox = 0; ox < ow; ++ox) {
            const int ix = ox * s.stride - s.padding + kx * s.dilation;
            if (ix < 0 || ix >= in.width) continue;
            dst[iy * in.width + ix] += src[oy * ow + ox];
          }
        }
      }
    }
  }
  return x;
}

bool is_pointwise(const ConvSpec& s) { return s.kernel == 1 && s.stride == 1 && s.padding == 0; }

}  // namespace

Var conv2d(const Var& x, const Var& weight, const Var& bias, const ConvSpec& spec) {
  const Shape in = x->shape();
  const int k = spec.kernel;
  if (weight->value().cols() != static_cast<Eigen::Index>(in.channels) * k * k) {
    throw std::logic_error("conv2d: weight does not match input channels");
  }
  const int oh = conv_out(in.height, spec);
  const int ow = conv_out(in.width, spec);
  if (oh <= 0 || ow <= 0) throw std::logic_error("conv2d: empty output");
  const auto cout = static_cast<int>(weight->value().rows());

  auto cols = std::make_shared<Matrix>(is_pointwise(spec) ? x->value() : im2col(x->value(), in, spec, oh, ow));
  Matrix out = weight->value() * (*cols);
  out.colwise() += bias->value().col(0);

  Node* px = x.get();
  Node* pw = weight.get();
  Node* pb = bias.get();
  return make_op(std::move(out), {cout, oh, ow}, {x, weight, bias}, [=](const Matrix& g) {
    if (pw->requires_grad()) pw->accumulate(g * cols->transpose());
    if (pb->requires_grad()) pb->accumulate(g.rowwise().sum());
    if (px->requires_grad()) {
      Matrix gcols = pw->value().transpose() * g;
      if (is_pointwise(spec)) {
        px->accumulate(gcols);
      } else {
        px->accumulate(col2im(gcols, in, spec, oh, ow));
      }
    }
  });
}

// --- elementwise ---------------------------------------------------------------------------

Var relu(const Var& x) {
  Matrix out = x->value().cwiseMax(0.0);
  Node* px = x.get();
  return make_op(out, x->shape(), {x}, [px](const Matrix& g) {
    px->accumulate((px->value().array() > 0.0).select(g, 0.0));
  });
}

Var sigmoid(const Var& x) {
  auto out = std::make_shared<Matrix>((1.0 / (1.0 + (-x->value().array()).exp())).matrix());
  Node* px = x.get();
  return make_op(*out, x->shape(), {x}, [px, out](const Matrix& g) {
    px->accumulate((g.array() * out->array() * (1.0 - out->array())).matrix());
  });
}

namespace {

void require_same(const Var& a, const Var& b, const char* what) {
  if (!(a->shape() == b->shape())) throw std::logic_error(std::string(what) + ": shape mismatch");
}

}  // namespace

Var add(const Var& a, const Var& b) {
  require_same(a, b, "add");
  Node* pa = a.get();
  Node* pb = b.get();
  return make_op(a->value() + b->value(), a->shape(), {a, b}, [pa, pb](const Matrix& g) {
    pa->accumulate(g);
    pb->accumulate(g);
  });
}

Var sub(const Var& a, const Var& b) {
  require_same(a, b, "sub");
  Node* pa = a.get();
  Node* pb = b.get();
  return make_op(a->value() - b->value(), a->shape(), {a, b}, [pa, pb](const Matrix& g) {
    pa->accumulate(g);
    pb->accumulate(-g);
  });
}

Var mul(const Var& a, const Var& b) {
  require_same(a, b, "mul");
  Node* pa = a.get();
  Node* pb = b.get();
  return make_op(a->value().cwiseProduct(b->value()), a->shape(), {a, b}, [pa, pb](const Matrix& g) {
    if (pa->requires_grad()) pa->accumulate(g.cwiseProduct(pb->value()));
    if (pb->requires_grad()) pb->accumulate(g.cwiseProduct(pa->value()));
  });
}

Var one_minus(const Var& x) {
  Node* px = x.get();
  return make_op((1.0 - x->value().array()).matrix(), x->shape(), {x},
                 [px](const Matrix& g) { px->accumulate(-g); });
}

Var scale(const Var& x, double s) {
  Node* px = x.get();
  return make_op(x->value() * s, x->shape(), {x}, [px, s](const Matrix& g) { px->accumulate(g * s); });
}

Var scale_by(const Var& x, const Var& s) {
  if (s->value().size() != 1) throw std::logic_error("scale_by: factor must be 1x1");
  Node* px = x.get();
  Node* ps = s.get();
  return make_op(x->value() * s->item(), x->shape(), {x, s}, [px, ps](const Matrix& g) {
    if (px->requires_grad()) px->accumulate(g * ps->item());
    if (ps->requires_grad()) ps->accumulate(Matrix::Constant(1, 1, g.cwiseProduct(px->value()).sum()));
  });
}

Var sum(std::span<const Var> terms) {
  if (terms.empty()) throw std::logic_error("sum: no terms");
  Matrix total = terms[0]->value();
  for (std::size_t i = 1; i < terms.size(); ++i) {
    require_same(terms[0], terms[i], "sum");
    total += terms[i]->value();
  }
  std::vector<Node*> nodes;
  for (const auto& t : terms) nodes.push_back(t.get());
  return make_op(std::move(total), terms[0]->shape(), {terms.begin(), terms.end()},
                 [nodes](const Matrix& g) {
                   for (Node* n : nodes) n->accumulate(g);
                 });
}

Var mul_channels(const Var& x, const Var& gate) {
  const Shape sx = x->shape(), sg = gate->shape();
  if (sg.channels != 1 || sg.height != sx.height || sg.width != sx.width) {
    throw std::logic_error("mul_channels: gate must be 1 x H x W matching the input");
  }
  Matrix out = x->value().array().rowwise() * gate->value().row(0).array();
  Node* px = x.get();
  Node* pg = gate.get();
  return make_op(std::move(out), sx, {x, gate}, [px, pg](const Matrix& g) {
    if (px->requires_grad()) px->accumulate((g.array().rowwise() * pg->value().row(0).array()).matrix());
    if (pg->requires_grad()) pg->accumulate((g.array() * px->value().array()).colwise().sum().matrix());
  });
}

// --- layout --------------------------------------------------------------------------------

Var concat_channels(std::span<const Var> parts) {
  if (parts.empty()) throw std::logic_error("concat_channels: no inputs");
  const Shape first = parts[0]->shape();
  int channels = 0;
  for (const auto& p : parts) {
    if (p->shape().height != first.height || p->shape().width != first.width) {
      throw std::logic_error("concat_channels: spatial mismatch");
    }
    channels += p->shape().channels;
  }
  Matrix out(channels, first.pixels());
  std::vector<std::pair<Node*, int>> offsets;
  int row = 0;
  for (const auto& p : parts) {
    out.middleRows(row, p->shape().channels) = p->value();
    offsets.emplace_back(p.get(), row);
    row += p->shape().channels;
  }
  return make_op(std::move(out), {channels, first.height, first.width}, {parts.begin(), parts.end()},
                 [offsets](const Matrix& g) {
                   for (auto [node, start] : offsets) {
                     if (node->requires_grad()) node->accumulate(g.middleRows(start, node->shape().channels));
                   }
                 });
}

Var concat_rows(std::span<const Var> parts) {
  if (parts.empty()) throw std::logic_error("concat_rows: no inputs");
  const auto cols = parts[0]->value().cols();
  Eigen::Index rows = 0;
  for (const auto& p : parts) {
    if (p->value().cols() != cols) throw std::logic_error("concat_rows: width mismatch");
    rows += p->value().rows();
  }
  Matrix out(rows, cols);
  std::vector<std::pair<Node*, Eigen::Index>> offsets;
  Eigen::Index row = 0;
  for (const auto& p : parts) {
    out.middleRows(row, p->value().rows()) = p->value();
    offsets.emplace_back(p.get(), row);
    row += p->value().rows();
  }
  return make_op(std::move(out), {static_cast<int>(rows), 1, static_cast<int>(cols)}, {parts.begin(), parts.end()},
                 [offsets](const Matrix& g) {
                   for (auto [node, start] : offsets) {
                     if (node->requires_grad()) node->accumulate(g.middleRows(start, node->value().rows()));
                   }
                 });
}

Var reshape(const Var& x, Shape shape) {
  if (static_cast<Eigen::Index>(shape.channels) * shape.pixels() != x->value().size()) {
    throw std::logic_error("reshape: element count mismatch");
  }
  Matrix out = Eigen::Map<const Matrix>(x->value().data(), shape.channels, shape.pixels());
  Node* px = x.get();
  const Shape from = x->shape();
  return make_op(std::move(out), shape, {x}, [px, from](const Matrix& g) {
    px->accumulate(Eigen::Map<const Matrix>(g.data(), from.channels, from.pixels()));
  });
}

Matrix bilinear_weights(int out_size, int in_size) {
  Matrix r = Matrix::Zero(out_size, in_size);
  const double scale = static_cast<double>(in_size) / out_size;
  for (int o = 0; o < out_size; ++o) {
    double src = (o + 0.5) * scale - 0.5;
    if (src < 0.0) src = 0.0;
    int i0 = static_cast<int>(std::floor(src));
    if (i0 > in_size - 1) i0 = in_size - 1;
    const int i1 = i0 < in_size - 1 ? i0 + 1 : i0;
    const double l1 = src - i0;
    r(o, i0) += 1.0 - l1;
    r(o, i1) += l1;
  }
  return r;
}

Var resize_bilinear(const Var& x, int height, int width) {
  const Shape in = x->shape();
  if (in.height == height && in.width == width) return x;
  auto ry = std::make_shared<Matrix>(bilinear_weights(height, in.height));
  auto rx = std::make_shared<Matrix>(bilinear_weights(width, in.width));
  Matrix out(in.channels, height * width);
  for (int c = 0; c < in.channels; ++c) {
    Eigen::Map<const Matrix> src(x->value().row(c).data(), in.height, in.width);
    Eigen::Map<Matrix> dst(out.row(c).data(), height, width);
    dst.noalias() = (*ry) * src * rx->transpose();
  }
  Node* px = x.get();
  return make_op(std::move(out), {in.channels, height, width}, {x}, [=](const Matrix& g) {
    Matrix gx(in.channels, in.pixels());
    for (int c = 0; c < in.channels; ++c) {
      Eigen::Map<const Matrix> src(g.row(c).data(), height, width);
      Eigen::Map<Matrix> dst(gx.row(c).data(), in.height, in.width);
      dst.noalias() = ry->transpose() * src * (*rx);
    }
    px->accumulate(gx);
  });
}

// --- matrix ops ----------------------------------------------------------------------------

Var matmul(const Var& a, const Var& b, bool transpose_a, bool transpose_b) {
  const Matrix& av = a->value();
  const Matrix& bv = b->value();
  Matrix out;
  if (!transpose_a && !transpose_b) out = av * bv;
  if (transpose_a && !transpose_b) out = av.transpose() * bv;
  if (!transpose_a && transpose_b) out = av * bv.transpose();
  if (transpose_a && transpose_b) out = av.transpose() * bv.transpose();
  const auto rows = static_cast<int>(out.rows());
  const auto cols = static_cast<int>(out.cols());
  Node* pa = a.get();
  Node* pb = b.get();
  return make_op(std::move(out), {rows, 1, cols}, {a, b}, [=](const Matrix& g) {
    const Matrix& A = pa->value();
    const Matrix& B = pb->value();
    if (pa->requires_grad()) {
      // d/d op(A) = G op(B)^T
      Matrix gop = transpose_b ? Matrix(g * B) : Matrix(g * B.transpose());
      if (transpose_a) {
        pa->accumulate(gop.transpose());
      } else {
        pa->accumulate(gop);
      }
    }
    if (pb->requires_grad()) {
      // d/d op(B) = op(A)^T G
      Matrix gop = transpose_a ? Matrix(A * g) : Matrix(A.transpose() * g);
      if (transpose_b) {
        pb->accumulate(gop.transpose());
      } else {
        pb->accumulate(gop);
      }
    }
  });
}

Var softmax_rows(const Var& x) {
  Matrix v = x->value();
  for (Eigen::Index r = 0; r < v.rows(); ++r) {
    const double m = v.row(r).maxCoeff();
    v.row(r) = (v.row(r).array() - m).exp().matrix();
    v.row(r) /= v.row(r).sum();
  }
  auto out = std::make_shared<Matrix>(std::move(v));
  Node* px = x.get();
  return make_op(*out, x->shape(), {x}, [px, out](const Matrix& g) {
    const Eigen::VectorXd dots = g.cwiseProduct(*out).rowwise().sum();
    px->accumulate((out->array() * (g.colwise() - dots).array()).matrix());
  });
}

Var linear(const Var& x, const Var& weight, const Var& bias) {
  if (x->value().cols() != weight->value().cols()) throw std::logic_error("linear: width mismatch");
  Matrix out = x->value() * weight->value().transpose();
  out.rowwise() += bias->value().col(0).transpose();
  const auto rows = static_cast<int>(out.rows());
  const auto cols = static_cast<int>(out.cols());
  Node* px = x.get();
  Node* pw = weight.get();
  Node* pb = bias.get();
  return make_op(std::move(out), {rows, 1, cols}, {x, weight, bias}, [=](const Matrix& g) {
    if (px->requires_grad()) px->accumulate(g * pw->value());
    if (pw->requires_grad()) pw->accumulate(g.transpose() * px->value());
    if (pb->requires_grad()) pb->accumulate(g.colwise().sum().transpose());
  });
}

// --- ROI pooling ---------------------------------------------------------------------------

namespace {

struct Tap {
  int bin;
  int pixel;
  double weight;
};

// Bilinear taps of one ROI, shared by all channels.
std::vector<Tap> roi_taps(const Box& box, double spatial_scale, int out_size, int sampling, int height,
                          int width) {
  std::vector<Tap> taps;
  const double x1 = box.x1 * spatial_scale - 0.5;
  const double y1 = box.y1 * spatial_scale - 0.5;
  const double bin_w = (box.x2 - box.x1) * spatial_scale / out_size;
  const double bin_h = (box.y2 - box.y1) * spatial_scale / out_size;
  const double norm = 1.0 / (sampling * sampling);
  for (int py = 0; py < out_size; ++py) {
    for (int px = 0; px < out_size; ++px) {
      const int bin = py * out_size + px;
      for (int iy = 0; iy < sampling; ++iy) {
        double y = y1 + py * bin_h + (iy + 0.5) * bin_h / sampling;
        for (int ix = 0; ix < sampling; ++ix) {
          double x = x1 + px * bin_w + (ix + 0.5) * bin_w / sampling;
          if (y < -1.0 || y > height || x < -1.0 || x > width) continue;
          double yy = std::max(y, 0.0);
          double xx = std::max(x, 0.0);
          int y0 = static_cast<int>(yy);
          int x0 = static_cast<int>(xx);
          int y1i, x1i;
          if (y0 >= height - 1) {
            y0 = y1i = height - 1;
            yy = y0;
          } else {
            y1i = y0 + 1;
          }
          if (x0 >= width - 1) {
            x0 = x1i = width - 1;
            xx = x0;
          } else {
            x1i = x0 + 1;
          }
          const double ly = yy - y0, lx = xx - x0;
          const double hy = 1.0 - ly, hx = 1.0 - lx;
          taps.push_back({bin, y0 * width + x0, hy * hx * norm});
          taps.push_back({bin, y0 * width + x1i, hy * lx * norm});
          taps.push_back({bin, y1i * width + x0, ly * hx * norm});
          taps.push_back({bin, y1i * width + x1i, ly * lx * norm});
        }
      }
    }
  }
  return taps;
}

}  // namespace

Var roi_align(const Var& features, std::span<const Box> boxes, double spatial_scale, int out_size,
              int sampling_ratio) {
  const Shape in = features->shape();
  const int bins = out_size * out_size;
  const auto n = static_cast<int>(boxes.size());
  auto taps = std::make_shared<std::vector<std::vector<Tap>>>();
  taps->reserve(boxes.size());
  for (const auto& b : boxes) {
    taps->push_back(roi_taps(b, spatial_scale, out_size, sampling_ratio, in.height, in.width));
  }
  Matrix out = Matrix::Zero(n, static_cast<Eigen::Index>(in.channels) * bins);
  const Matrix& f = features->value();
  for (int r = 0; r < n; ++r) {
    for (int c = 0; c < in.channels; ++c) {
      const double* src = f.row(c).data();
      double* dst = out.row(r).data() + static_cast<Eigen::Index>(c) * bins;
      for (const auto& t : (*taps)[r]) dst[t.bin] += t.weight * src[t.pixel];
    }
  }
  Node* pf = features.get();
  return make_op(std::move(out), {n, 1, in.channels * bins}, {features}, [=](const Matrix& g) {
    Matrix gf = Matrix::Zero(in.channels, in.pixels());
    for (int r = 0; r < n; ++r) {
      for (int c = 0; c < in.channels; ++c) {
        double* dst = gf.row(c).data();
        const double* src = g.row(r).data() + static_cast<Eigen::Index>(c) * bins;
        for (const auto& t : (*taps)[r]) dst[t.pixel] += t.weight * src[t.bin];
      }
    }
    pf->accumulate(gf);
  });
}

Var row_as_tensor(const Var& x, int row, Shape shape) {
  if (static_cast<Eigen::Index>(shape.channels) * shape.pixels() != x->value().cols()) {
    throw std::logic_error("row_as_tensor: element count mismatch");
  }
  Matrix out = Eigen::Map<const Matrix>(x->value().row(row).data(), shape.channels, shape.pixels());
  Node* px = x.get();
  return make_op(std::move(out), shape, {x}, [px, row](const Matrix& g) {
    Matrix gx = Matrix::Zero(px->value().rows(), px->value().cols());
    gx.row(row) = Eigen::Map<const Eigen::RowVectorXd>(g.data(), g.size());
    px->accumulate(gx);
  });
}

Var scalar_term(std::vector<Var> inputs, const ScalarFn& fn) {
  std::vector<const Matrix*> values;
  for (const auto& v : inputs) values.push_back(&v->value());
  auto term = std::make_shared<ScalarTerm>(fn(values));
  if (term->grads.size() != inputs.size()) throw std::logic_error("scalar_term: gradient count mismatch");
  std::vector<Node*> nodes;
  for (const auto& v : inputs) nodes.push_back(v.get());
  const double value = term->value;
  return make_op(Matrix::Constant(1, 1, value), {1, 1, 1}, std::move(inputs), [nodes, term](const Matrix& g) {
    const double up = g(0, 0);
    for (std::size_t i = 0; i < nodes.size(); ++i) {
      if (nodes[i]->requires_grad()) nodes[i]->accumulate(term->grads[i] * up);
    }
  });
}

}  // namespace camrank::ad
