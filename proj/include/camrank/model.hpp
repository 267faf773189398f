#pragma once

// Joint fixation / camouflage / ranking network.
//
// A four-stage extractor feeds two decoders of identical structure: the fixation decoder
// sees the raw stage features, the camouflage decoder sees them gated by 1 - F. Each
// decoder projects every stage to C channels, applies dual residual attention and a dense
// ASPP block, merges the stages top-down and ends in a one-channel sigmoid head at input
// resolution. The ranking branch builds a feature pyramid on the same stages and runs a
// two-stage detector with rank classification and a class-agnostic mask head.

#include "camrank/autodiff.hpp"
#include "camrank/data.hpp"
#include "camrank/detection.hpp"
#include "camrank/layers.hpp"
#include "camrank/losses.hpp"

#include <json.hpp>

#include <array>
#include <optional>
#include <random>
#include <vector>

namespace camrank::model {

using ad::Var;

struct ModelConfig {
  int stem_channels = 8;
  std::array<int, 4> stage_channels{16, 24, 32, 48};
  int decoder_channels = 32;  // C
  std::vector<int> aspp_dilations{3, 6, 12, 18};
  int aspp_growth = 8;
  double attention_init = 0.1;

  int fpn_channels = 32;
  detection::AnchorConfig anchors;
  double iou_pos = 0.7;
  double iou_det = 0.5;
  double proposal_nms = 0.7;
  int pre_nms_top_k = 200;
  int post_nms_top_k_train = 64;
  int post_nms_top_k_test = 32;
  int rpn_batch = 128;
  double rpn_positive_fraction = 0.5;
  int roi_batch = 64;
  double roi_positive_fraction = 0.25;
  int box_pool = 7;
  int mask_pool = 14;
  int box_hidden = 64;
  int mask_channels = 16;

  double score_threshold = 0.05;
  double detection_nms = 0.5;
  int max_detections = 10;
  double mask_threshold = 0.5;

  void validate() const;
  nlohmann::ordered_json to_json() const;
  static ModelConfig from_json(const nlohmann::json& j);

  // Smallest useful network, for gradient checks.
  static ModelConfig toy();
};

struct StageFeatures {
  std::array<Var, 4> s;  // strides 4, 8, 16, 32
};

// Stage outputs of the extractor. The input height and width must be multiples of 16;
// below a multiple of 32 the deepest stage rounds up.
class FeatureExtractor {
 public:
  FeatureExtractor() = default;
  FeatureExtractor(nn::ParameterStore& store, nn::Initializer& init, const ModelConfig& cfg);
  StageFeatures operator()(const Var& image) const;

 private:
  struct Stage {
    nn::Conv2d down, conv1, conv2;
  };
  nn::Conv2d stem_;
  std::array<Stage, 4> stages_;
};

// x + gamma_p * PAM(x) + gamma_c * CAM(x).
class DualResidualAttention {
 public:
  DualResidualAttention() = default;
  DualResidualAttention(nn::ParameterStore& store, nn::Initializer& init, const std::string& name, int channels,
                        double gamma_init);
  Var operator()(const Var& x) const;

  Var gamma_position() const { return gamma_p_; }
  Var gamma_channel() const { return gamma_c_; }

 private:
  nn::Conv2d query_, key_, value_;
  Var gamma_p_, gamma_c_;
};

// Densely connected dilated convolutions fused back to the input width.
class DenseAspp {
 public:
  DenseAspp() = default;
  DenseAspp(nn::ParameterStore& store, nn::Initializer& init, const std::string& name, int channels,
            std::span<const int> dilations, int growth);
  Var operator()(const Var& x) const;

 private:
  std::vector<nn::Conv2d> branches_;
  nn::Conv2d fuse_;
};

class Decoder {
 public:
  Decoder() = default;
  Decoder(nn::ParameterStore& store, nn::Initializer& init, const std::string& name, const ModelConfig& cfg);

  // Probability map 1 x H x W.
  Var operator()(const StageFeatures& f, int height, int width) const;

 private:
  std::array<nn::Conv2d, 4> project_;
  std::array<DualResidualAttention, 4> attention_;
  std::array<DenseAspp, 4> aspp_;
  std::array<nn::Conv2d, 3> merge_;
  nn::Conv2d head_;
};

// s_i * resize(1 - F) for every stage. F must be a 1 x H x W map in [0, 1].
StageFeatures reverse_attention(const StageFeatures& f, const Var& fixation);

struct InstanceProposal {
  Box box;
  double objectness = 0.0;
  std::array<double, 4> rank_logits{};
  std::array<double, 4> box_deltas{};
  Grid mask;  // mask_pool x mask_pool probabilities over the box
  int rank = 0;
  double score = 0.0;
};

// Mask probabilities resampled over the box and placed on an h x w canvas.
Grid paste_mask(const InstanceProposal& p, int height, int width);

struct RankingLosses {
  Var rpn, rank, mask;
};

class RankingBranch {
 public:
  RankingBranch() = default;
  RankingBranch(nn::ParameterStore& store, nn::Initializer& init, const ModelConfig& cfg);

  struct Pyramid {
    std::array<Var, 4> p;
    std::array<int, 4> stride{4, 8, 16, 32};
  };
  Pyramid pyramid(const StageFeatures& f) const;

  struct RpnOutput {
    std::array<Var, 4> objectness;  // A x h x w
    std::array<Var, 4> deltas;      // 4A x h x w
    std::array<std::vector<Box>, 4> anchors;
  };
  RpnOutput rpn(const Pyramid& p) const;

  // Scored, decoded, clipped and NMS-filtered proposals, best first.
  std::vector<std::pair<Box, double>> proposals(const RpnOutput& out, int height, int width, int top_k) const;

  // Pyramid level (0..3) used for pooling a box.
  static int level_for(const Box& b);

  RankingLosses losses(const Pyramid& p, const RpnOutput& out, const data::Sample& sample,
                       const losses::SimilarityPrior& prior, std::mt19937_64& rng) const;

  std::vector<InstanceProposal> detect(const Pyramid& p, const RpnOutput& out, int height, int width) const;

 private:
  Var pool(const Pyramid& p, std::span<const Box> boxes, int out_size) const;
  std::pair<Var, Var> box_head(const Var& pooled) const;
  std::vector<Var> mask_head(const Var& pooled, int n) const;

  ModelConfig cfg_;
  std::array<nn::Conv2d, 4> lateral_, smooth_;
  nn::Conv2d rpn_conv_, rpn_cls_, rpn_reg_;
  nn::Linear fc1_, fc2_, cls_, reg_;
  nn::Conv2d mask1_, mask2_, mask_out_;
};

struct ForwardOutput {
  StageFeatures stages;
  Var fixation;      // 1 x H x W
  Var segmentation;  // 1 x H x W
};

struct Prediction {
  Grid fixation;
  Grid segmentation;
  std::vector<InstanceProposal> instances;
};

struct StepResult {
  losses::LossReport report;
  Var objective;
};

class RankNet {
 public:
  RankNet(const ModelConfig& cfg, std::uint64_t seed);

  const ModelConfig& config() const { return cfg_; }
  nn::ParameterStore& parameters() { return store_; }
  const nn::ParameterStore& parameters() const { return store_; }

  ForwardOutput forward(const Tensor& image) const;

  // L_f and L_c only; the ranking branch is skipped.
  StepResult joint_loss(const data::Sample& sample, double lambda) const;

  // Full objective L_fc + L for one sample.
  StepResult loss(const data::Sample& sample, double lambda, const losses::SimilarityPrior& prior,
                  std::mt19937_64& rng) const;

  Prediction predict(const Tensor& image) const;

 private:
  ModelConfig cfg_;
  nn::ParameterStore store_;
  FeatureExtractor extractor_;
  Decoder fixation_decoder_;
  Decoder camouflage_decoder_;
  RankingBranch ranking_;
};

}  // namespace camrank::model
