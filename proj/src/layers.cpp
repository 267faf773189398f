#include "camrank/layers.hpp"

#include <cmath>
#include <stdexcept>

namespace camrank::nn {

Var ParameterStore::add(const std::string& name, Matrix init, ad::Shape shape) {
  if (index_.count(name) != 0) throw std::logic_error("duplicate parameter " + name);
  auto v = ad::parameter(std::move(init), shape);
  index_[name] = entries_.size();
  entries_.emplace_back(name, v);
  return v;
}

Var ParameterStore::find(const std::string& name) const {
  auto it = index_.find(name);
  if (it == index_.end()) return nullptr;
  return entries_[it->second].second;
}

std::size_t ParameterStore::scalar_count() const {
  std::size_t n = 0;
  for (const auto& [name, v] : entries_) n += static_cast<std::size_t>(v->value().size());
  return n;
}

void ParameterStore::zero_grad() {
  for (auto& [name, v] : entries_) v->zero_grad();
}

Matrix Initializer::he_normal(int rows, int cols, int fan_in) {
  std::normal_distribution<double> dist(0.0, std::sqrt(2.0 / fan_in));
  Matrix m(rows, cols);
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = dist(rng_);
  return m;
}

Conv2d::Conv2d(ParameterStore& store, Initializer& init, const std::string& name, int in_channels,
               int out_channels, int kernel, int stride, int dilation) {
  const int fan_in = in_channels * kernel * kernel;
  weight_ = store.add(name + ".weight", init.he_normal(out_channels, fan_in, fan_in),
                      {out_channels, 1, fan_in});
  bias_ = store.add(name + ".bias", Matrix::Zero(out_channels, 1), {out_channels, 1, 1});
  spec_ = {kernel, stride, dilation * (kernel - 1) / 2, dilation};
}

Var Conv2d::operator()(const Var& x) const { return ad::conv2d(x, weight_, bias_, spec_); }

Linear::Linear(ParameterStore& store, Initializer& init, const std::string& name, int in_features,
               int out_features, double init_scale) {
  Matrix w = init.he_normal(out_features, in_features, in_features) * init_scale;
  weight_ = store.add(name + ".weight", std::move(w), {out_features, 1, in_features});
  bias_ = store.add(name + ".bias", Matrix::Zero(out_features, 1), {out_features, 1, 1});
}

Var Linear::operator()(const Var& x) const { return ad::linear(x, weight_, bias_); }

Adam::Adam(const ParameterStore& store, AdamOptions options) : store_(store), options_(options) {
  for (const auto& [name, v] : store_.entries()) {
    m_.push_back(Matrix::Zero(v->value().rows(), v->value().cols()));
    v_.push_back(Matrix::Zero(v->value().rows(), v->value().cols()));
  }
}

void Adam::set_multiplier(const std::string& prefix, double multiplier) {
  multipliers_.emplace_back(prefix, multiplier);
}

void Adam::step() {
  ++t_;
  const double c1 = 1.0 - std::pow(options_.beta1, static_cast<double>(t_));
  const double c2 = 1.0 - std::pow(options_.beta2, static_cast<double>(t_));
  const auto& entries = store_.entries();
  for (std::size_t i = 0; i < entries.size(); ++i) {
    const auto& [name, param] = entries[i];
    if (!param->has_grad()) continue;
    double mult = 1.0;
    std::size_t best = 0;
    for (const auto& [prefix, value] : multipliers_) {
      if (name.rfind(prefix, 0) == 0 && prefix.size() >= best) {
        best = prefix.size();
        mult = value;
      }
    }
    const Matrix& g = param->grad();
    m_[i] = options_.beta1 * m_[i] + (1.0 - options_.beta1) * g;
    v_[i] = options_.beta2 * v_[i] + (1.0 - options_.beta2) * g.cwiseProduct(g);
    const double lr = options_.learning_rate * mult;
    param->mutable_value().array() -=
        lr * (m_[i].array() / c1) / ((v_[i].array() / c2).sqrt() + options_.epsilon);
  }
}

}  // namespace camrank::nn
