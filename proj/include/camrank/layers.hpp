#pragma once

#include "camrank/autodiff.hpp"

#include <cstdint>
#include <map>
#include <random>
#include <string>
#include <vector>

namespace camrank::nn {

using ad::Var;

// Named, ordered collection of trainable tensors.
class ParameterStore {
 public:
  Var add(const std::string& name, Matrix init, ad::Shape shape);

  const std::vector<std::pair<std::string, Var>>& entries() const { return entries_; }
  Var find(const std::string& name) const;
  std::size_t size() const { return entries_.size(); }
  std::size_t scalar_count() const;

  void zero_grad();

 private:
  std::vector<std::pair<std::string, Var>> entries_;
  std::map<std::string, std::size_t> index_;
};

// He-normal initializer seeded once per model.
class Initializer {
 public:
  explicit Initializer(std::uint64_t seed) : rng_(seed) {}
  Matrix he_normal(int rows, int cols, int fan_in);

 private:
  std::mt19937_64 rng_;
};

class Conv2d {
 public:
  Conv2d() = default;
  Conv2d(ParameterStore& store, Initializer& init, const std::string& name, int in_channels,
         int out_channels, int kernel, int stride = 1, int dilation = 1);

  Var operator()(const Var& x) const;
  const Var& weight() const { return weight_; }
  const Var& bias() const { return bias_; }

 private:
  Var weight_;
  Var bias_;
  ad::ConvSpec spec_;
};

class Linear {
 public:
  Linear() = default;
  Linear(ParameterStore& store, Initializer& init, const std::string& name, int in_features,
         int out_features, double init_scale = 1.0);

  Var operator()(const Var& x) const;

 private:
  Var weight_;
  Var bias_;
};

struct AdamOptions {
  double learning_rate = 5e-5;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
};

class Adam {
 public:
  Adam(const ParameterStore& store, AdamOptions options);

  // Per-parameter learning-rate multiplier, matched by name prefix (longest wins).
  void set_multiplier(const std::string& prefix, double multiplier);
  void step();
  long steps() const { return t_; }

 private:
  const ParameterStore& store_;
  AdamOptions options_;
  std::vector<Matrix> m_;
  std::vector<Matrix> v_;
  std::vector<std::pair<std::string, double>> multipliers_;
  long t_ = 0;
};

}  // namespace camrank::nn
