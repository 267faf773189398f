#include "camrank/model.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

namespace camrank::model {

using detection::Deltas;

// --- configuration -------------------------------------------------------------------------

void ModelConfig::validate() const {
  auto positive = [](int v, const char* what) {
    if (v <= 0) throw ValidationError(std::string("model config: ") + what + " must be positive");
  };
  positive(stem_channels, "stem_channels");
  for (int c : stage_channels) positive(c, "stage_channels");
  positive(decoder_channels, "decoder_channels");
  positive(aspp_growth, "aspp_growth");
  positive(fpn_channels, "fpn_channels");
  positive(pre_nms_top_k, "pre_nms_top_k");
  positive(post_nms_top_k_train, "post_nms_top_k_train");
  positive(post_nms_top_k_test, "post_nms_top_k_test");
  positive(rpn_batch, "rpn_batch");
  positive(roi_batch, "roi_batch");
  positive(box_pool, "box_pool");
  positive(mask_pool, "mask_pool");
  positive(box_hidden, "box_hidden");
  positive(mask_channels, "mask_channels");
  positive(max_detections, "max_detections");
  if (aspp_dilations.empty()) throw ValidationError("model config: aspp_dilations is empty");
  for (int d : aspp_dilations) positive(d, "aspp_dilations");
  if (anchors.scales.empty() || anchors.ratios.empty()) throw ValidationError("model config: empty anchor set");
  for (double v : anchors.scales) {
    if (!(v > 0.0)) throw ValidationError("model config: anchor scales must be positive");
  }
  for (double v : anchors.ratios) {
    if (!(v > 0.0)) throw ValidationError("model config: anchor ratios must be positive");
  }
  for (double t : {iou_pos, iou_det, proposal_nms, detection_nms, rpn_positive_fraction, roi_positive_fraction,
                   mask_threshold}) {
    if (!(t > 0.0 && t < 1.0)) throw ValidationError("model config: thresholds and fractions must lie in (0,1)");
  }
  if (!(score_threshold >= 0.0 && score_threshold < 1.0)) {
    throw ValidationError("model config: score_threshold must lie in [0,1)");
  }
}

nlohmann::ordered_json ModelConfig::to_json() const {
  nlohmann::ordered_json j;
  j["stem_channels"] = stem_channels;
  j["stage_channels"] = stage_channels;
  j["decoder_channels"] = decoder_channels;
  j["aspp_dilations"] = aspp_dilations;
  j["aspp_growth"] = aspp_growth;
  j["attention_init"] = attention_init;
  j["fpn_channels"] = fpn_channels;
  j["anchor_scales"] = anchors.scales;
  j["anchor_ratios"] = anchors.ratios;
  j["iou_pos"] = iou_pos;
  j["iou_det"] = iou_det;
  j["proposal_nms"] = proposal_nms;
  j["pre_nms_top_k"] = pre_nms_top_k;
  j["post_nms_top_k_train"] = post_nms_top_k_train;
  j["post_nms_top_k_test"] = post_nms_top_k_test;
  j["rpn_batch"] = rpn_batch;
  j["rpn_positive_fraction"] = rpn_positive_fraction;
  j["roi_batch"] = roi_batch;
  j["roi_positive_fraction"] = roi_positive_fraction;
  j["box_pool"] = box_pool;
  j["mask_pool"] = mask_pool;
  j["box_hidden"] = box_hidden;
  j["mask_channels"] = mask_channels;
  j["score_threshold"] = score_threshold;
  j["detection_nms"] = detection_nms;
  j["max_detections"] = max_detections;
  j["mask_threshold"] = mask_threshold;
  return j;
}

ModelConfig ModelConfig::from_json(const nlohmann::json& j) {
  ModelConfig c;
  auto get = [&](const char* key, auto& field) {
    if (j.contains(key)) field = j.at(key).get<std::decay_t<decltype(field)>>();
  };
  try {
    get("stem_channels", c.stem_channels);
    get("stage_channels", c.stage_channels);
    get("decoder_channels", c.decoder_channels);
    get("aspp_dilations", c.aspp_dilations);
    get("aspp_growth", c.aspp_growth);
    get("attention_init", c.attention_init);
    get("fpn_channels", c.fpn_channels);
    get("anchor_scales", c.anchors.scales);
    get("anchor_ratios", c.anchors.ratios);
    get("iou_pos", c.iou_pos);
    get("iou_det", c.iou_det);
    get("proposal_nms", c.proposal_nms);
    get("pre_nms_top_k", c.pre_nms_top_k);
    get("post_nms_top_k_train", c.post_nms_top_k_train);
    get("post_nms_top_k_test", c.post_nms_top_k_test);
    get("rpn_batch", c.rpn_batch);
    get("rpn_positive_fraction", c.rpn_positive_fraction);
    get("roi_batch", c.roi_batch);
    get("roi_positive_fraction", c.roi_positive_fraction);
    get("box_pool", c.box_pool);
    get("mask_pool", c.mask_pool);
    get("box_hidden", c.box_hidden);
    get("mask_channels", c.mask_channels);
    get("score_threshold", c.score_threshold);
    get("detection_nms", c.detection_nms);
    get("max_detections", c.max_detections);
    get("mask_threshold", c.mask_threshold);
  } catch (const nlohmann::json::exception& e) {
    throw ValidationError(std::string("model config: ") + e.what());
  }
  c.validate();
  return c;
}

ModelConfig ModelConfig::toy() {
  ModelConfig c;
  c.stem_channels = 3;
  c.stage_channels = {4, 4, 4, 4};
  c.decoder_channels = 4;
  c.aspp_dilations = {1, 2};
  c.aspp_growth = 2;
  c.fpn_channels = 4;
  c.rpn_batch = 16;
  c.roi_batch = 8;
  c.box_pool = 3;
  c.mask_pool = 4;
  c.box_hidden = 8;
  c.mask_channels = 3;
  return c;
}

// --- extractor -----------------------------------------------------------------------------

FeatureExtractor::FeatureExtractor(nn::ParameterStore& store, nn::Initializer& init, const ModelConfig& cfg) {
  stem_ = nn::Conv2d(store, init, "backbone.stem", 3, cfg.stem_channels, 3, 2);
  int in = cfg.stem_channels;
  for (int i = 0; i < 4; ++i) {
    const std::string name = "backbone.stage" + std::to_string(i + 1);
    const int c = cfg.stage_channels[static_cast<std::size_t>(i)];
    stages_[static_cast<std::size_t>(i)] = {nn::Conv2d(store, init, name + ".down", in, c, 3, 2),
                                            nn::Conv2d(store, init, name + ".conv1", c, c, 3),
                                            nn::Conv2d(store, init, name + ".conv2", c, c, 3)};
    in = c;
  }
}

StageFeatures FeatureExtractor::operator()(const Var& image) const {
  const auto& shape = image->shape();
  if (shape.height % 16 != 0 || shape.width % 16 != 0 || shape.height == 0 || shape.width == 0) {
    throw ValidationError("feature extractor: input height and width must be positive multiples of 16");
  }
  StageFeatures out;
  Var x = ad::relu(stem_(image));
  for (std::size_t i = 0; i < 4; ++i) {
    const Var y = ad::relu(stages_[i].down(x));
    x = ad::relu(ad::add(y, stages_[i].conv2(ad::relu(stages_[i].conv1(y)))));
    out.s[i] = x;
  }
  return out;
}

// --- decoder blocks ------------------------------------------------------------------------

DualResidualAttention::DualResidualAttention(nn::ParameterStore& store, nn::Initializer& init,
                                             const std::string& name, int channels, double gamma_init) {
  const int reduced = std::max(1, channels / 8);
  query_ = nn::Conv2d(store, init, name + ".query", channels, reduced, 1);
  key_ = nn::Conv2d(store, init, name + ".key", channels, reduced, 1);
  value_ = nn::Conv2d(store, init, name + ".value", channels, channels, 1);
  gamma_p_ = store.add(name + ".gamma_position", Matrix::Constant(1, 1, gamma_init), {1, 1, 1});
  gamma_c_ = store.add(name + ".gamma_channel", Matrix::Constant(1, 1, gamma_init), {1, 1, 1});
}

Var DualResidualAttention::operator()(const Var& x) const {
  const ad::Shape s = x->shape();
  // Position attention: every pixel attends over all pixels.
  const Var affinity = ad::softmax_rows(ad::matmul(query_(x), key_(x), true, false));
  const Var position = ad::reshape(ad::matmul(value_(x), affinity, false, true), s);
  // Channel attention on the raw channels, favouring dissimilar channels.
  const Var channel_affinity = ad::softmax_rows(ad::scale(ad::matmul(x, x, false, true), -1.0));
  const Var channel = ad::reshape(ad::matmul(channel_affinity, x), s);
  return ad::add(x, ad::add(ad::scale_by(position, gamma_p_), ad::scale_by(channel, gamma_c_)));
}

DenseAspp::DenseAspp(nn::ParameterStore& store, nn::Initializer& init, const std::string& name, int channels,
                     std::span<const int> dilations, int growth) {
  int in = channels;
  for (std::size_t k = 0; k < dilations.size(); ++k) {
    branches_.emplace_back(store, init, name + ".d" + std::to_string(dilations[k]), in, growth, 3, 1, dilations[k]);
    in += growth;
  }
  fuse_ = nn::Conv2d(store, init, name + ".fuse", in, channels, 1);
}

Var DenseAspp::operator()(const Var& x) const {
  std::vector<Var> stack{x};
  for (const auto& branch : branches_) stack.push_back(ad::relu(branch(ad::concat_channels(stack))));
  return ad::relu(fuse_(ad::concat_channels(stack)));
}

Decoder::Decoder(nn::ParameterStore& store, nn::Initializer& init, const std::string& name, const ModelConfig& cfg) {
  const int c = cfg.decoder_channels;
  for (std::size_t i = 0; i < 4; ++i) {
    const std::string stage = name + ".stage" + std::to_string(i + 1);
    project_[i] = nn::Conv2d(store, init, stage + ".project", cfg.stage_channels[i], c, 3);
    attention_[i] = DualResidualAttention(store, init, stage + ".dra", c, cfg.attention_init);
    aspp_[i] = DenseAspp(store, init, stage + ".aspp", c, cfg.aspp_dilations, cfg.aspp_growth);
  }
  for (std::size_t i = 0; i < 3; ++i) {
    merge_[i] = nn::Conv2d(store, init, name + ".merge" + std::to_string(i + 1), 2 * c, c, 3);
  }
  head_ = nn::Conv2d(store, init, name + ".head", c, 1, 1);
}

Var Decoder::operator()(const StageFeatures& f, int height, int width) const {
  std::array<Var, 4> a;
  for (std::size_t i = 0; i < 4; ++i) a[i] = aspp_[i](attention_[i](ad::relu(project_[i](f.s[i]))));
  Var m = a[3];
  for (int i = 2; i >= 0; --i) {
    const auto& s = a[static_cast<std::size_t>(i)]->shape();
    const std::array<Var, 2> parts{a[static_cast<std::size_t>(i)], ad::resize_bilinear(m, s.height, s.width)};
    m = ad::relu(merge_[static_cast<std::size_t>(i)](ad::concat_channels(parts)));
  }
  return ad::sigmoid(ad::resize_bilinear(head_(m), height, width));
}

StageFeatures reverse_attention(const StageFeatures& f, const Var& fixation) {
  const auto& fs = fixation->shape();
  if (fs.channels != 1) throw ValidationError("reverse_attention: the fixation map must have one channel");
  const Matrix& v = fixation->value();
  if (!v.allFinite() || v.minCoeff() < 0.0 || v.maxCoeff() > 1.0) {
    throw ValidationError("reverse_attention: the fixation map must lie in [0,1]");
  }
  const Var gate = ad::one_minus(fixation);
  StageFeatures out;
  for (std::size_t i = 0; i < 4; ++i) {
    const auto& s = f.s[i]->shape();
    out.s[i] = ad::mul_channels(f.s[i], ad::resize_bilinear(gate, s.height, s.width));
  }
  return out;
}

// --- ranking branch ------------------------------------------------------------------------

Grid paste_mask(const InstanceProposal& p, int height, int width) {
  Grid out = Grid::Zero(height, width);
  const auto m = p.mask.rows();
  if (m == 0) return out;
  const double bw = std::max(p.box.width(), 1e-6), bh = std::max(p.box.height(), 1e-6);
  const int x0 = std::max(0, static_cast<int>(std::floor(p.box.x1)));
  const int x1 = std::min(width, static_cast<int>(std::ceil(p.box.x2)));
  const int y0 = std::max(0, static_cast<int>(std::floor(p.box.y1)));
  const int y1 = std::min(height, static_cast<int>(std::ceil(p.box.y2)));
  auto coord = [](double u, Eigen::Index n, Eigen::Index& lo, Eigen::Index& hi, double& frac) {
    u = std::clamp(u, 0.0, static_cast<double>(n - 1));
    lo = static_cast<Eigen::Index>(std::floor(u));
    hi = std::min(lo + 1, n - 1);
    frac = u - static_cast<double>(lo);
  };
  for (int y = y0; y < y1; ++y) {
    const double cy = y + 0.5;
    if (cy < p.box.y1 || cy > p.box.y2) continue;
    Eigen::Index ylo, yhi;
    double fy;
    coord((cy - p.box.y1) / bh * static_cast<double>(m) - 0.5, m, ylo, yhi, fy);
    for (int x = x0; x < x1; ++x) {
      const double cx = x + 0.5;
      if (cx < p.box.x1 || cx > p.box.x2) continue;
      Eigen::Index xlo, xhi;
      double fx;
      coord((cx - p.box.x1) / bw * static_cast<double>(p.mask.cols()) - 0.5, p.mask.cols(), xlo, xhi, fx);
      out(y, x) = (1 - fy) * ((1 - fx) * p.mask(ylo, xlo) + fx * p.mask(ylo, xhi)) +
                  fy * ((1 - fx) * p.mask(yhi, xlo) + fx * p.mask(yhi, xhi));
    }
  }
  return out;
}

RankingBranch::RankingBranch(nn::ParameterStore& store, nn::Initializer& init, const ModelConfig& cfg) : cfg_(cfg) {
  const int c = cfg.fpn_channels;
  for (std::size_t i = 0; i < 4; ++i) {
    const std::string level = "rank.fpn.p" + std::to_string(i + 2);
    lateral_[i] = nn::Conv2d(store, init, level + ".lateral", cfg.stage_channels[i], c, 1);
    smooth_[i] = nn::Conv2d(store, init, level + ".smooth", c, c, 3);
  }
  const int a = cfg.anchors.per_location();
  rpn_conv_ = nn::Conv2d(store, init, "rank.rpn.conv", c, c, 3);
  rpn_cls_ = nn::Conv2d(store, init, "rank.rpn.cls", c, a, 1);
  rpn_reg_ = nn::Conv2d(store, init, "rank.rpn.reg", c, 4 * a, 1);
  rpn_cls_.weight()->mutable_value() *= 0.1;
  rpn_reg_.weight()->mutable_value() *= 0.1;
  const int pooled = c * cfg.box_pool * cfg.box_pool;
  fc1_ = nn::Linear(store, init, "rank.box.fc1", pooled, cfg.box_hidden);
  fc2_ = nn::Linear(store, init, "rank.box.fc2", cfg.box_hidden, cfg.box_hidden);
  cls_ = nn::Linear(store, init, "rank.box.cls", cfg.box_hidden, losses::kRankClasses, 0.1);
  reg_ = nn::Linear(store, init, "rank.box.reg", cfg.box_hidden, 4, 0.1);
  mask1_ = nn::Conv2d(store, init, "rank.mask.conv1", c, cfg.mask_channels, 3);
  mask2_ = nn::Conv2d(store, init, "rank.mask.conv2", cfg.mask_channels, cfg.mask_channels, 3);
  mask_out_ = nn::Conv2d(store, init, "rank.mask.logits", cfg.mask_channels, 1, 1);
}

RankingBranch::Pyramid RankingBranch::pyramid(const StageFeatures& f) const {
  Pyramid out;
  Var top = lateral_[3](f.s[3]);
  out.p[3] = smooth_[3](top);
  for (int i = 2; i >= 0; --i) {
    const auto k = static_cast<std::size_t>(i);
    const auto& s = f.s[k]->shape();
    top = ad::add(lateral_[k](f.s[k]), ad::resize_bilinear(top, s.height, s.width));
    out.p[k] = smooth_[k](top);
  }
  return out;
}

RankingBranch::RpnOutput RankingBranch::rpn(const Pyramid& p) const {
  RpnOutput out;
  for (std::size_t i = 0; i < 4; ++i) {
    const Var h = ad::relu(rpn_conv_(p.p[i]));
    out.objectness[i] = rpn_cls_(h);
    out.deltas[i] = rpn_reg_(h);
    const auto& s = p.p[i]->shape();
    out.anchors[i] = detection::level_anchors(s.height, s.width, p.stride[i], cfg_.anchors);
  }
  return out;
}

namespace {

double sigmoid(double z) { return 1.0 / (1.0 + std::exp(-z)); }

// Flat anchor index -> (level, row in the A x HW matrix, pixel).
struct AnchorRef {
  std::size_t level;
  int a;
  int pixel;
};

std::vector<AnchorRef> anchor_refs(const RankingBranch::RpnOutput& out, int per_location) {
  std::vector<AnchorRef> refs;
  for (std::size_t l = 0; l < 4; ++l) {
    const int n = static_cast<int>(out.anchors[l].size());
    for (int i = 0; i < n; ++i) refs.push_back({l, i % per_location, i / per_location});
  }
  return refs;
}

Deltas rpn_deltas(const RankingBranch::RpnOutput& out, const AnchorRef& r) {
  const Matrix& d = out.deltas[r.level]->value();
  return {d(4 * r.a, r.pixel), d(4 * r.a + 1, r.pixel), d(4 * r.a + 2, r.pixel), d(4 * r.a + 3, r.pixel)};
}

std::vector<int> top_indices(std::span<const double> scores, int k) {
  std::vector<int> order(scores.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](int a, int b) { return scores[a] > scores[b]; });
  if (static_cast<int>(order.size()) > k) order.resize(static_cast<std::size_t>(k));
  return order;
}

Matrix as_row_block(const Matrix& v) { return Eigen::Map<const Matrix>(v.data(), 1, v.size()); }

}  // namespace

std::vector<std::pair<Box, double>> RankingBranch::proposals(const RpnOutput& out, int height, int width,
                                                             int top_k) const {
  const int a = cfg_.anchors.per_location();
  std::vector<Box> boxes;
  std::vector<double> scores;
  for (std::size_t l = 0; l < 4; ++l) {
    const Matrix& cls = out.objectness[l]->value();
    const int n = static_cast<int>(out.anchors[l].size());
    std::vector<double> level_scores(static_cast<std::size_t>(n));
    for (int i = 0; i < n; ++i) level_scores[static_cast<std::size_t>(i)] = sigmoid(cls(i % a, i / a));
    for (int i : top_indices(level_scores, cfg_.pre_nms_top_k)) {
      const AnchorRef r{l, i % a, i / a};
      const Box b = detection::clip(detection::decode(out.anchors[l][static_cast<std::size_t>(i)], rpn_deltas(out, r)),
                                    height, width);
      if (b.width() < 1e-3 || b.height() < 1e-3) continue;
      boxes.push_back(b);
      scores.push_back(level_scores[static_cast<std::size_t>(i)]);
    }
  }
  std::vector<std::pair<Box, double>> result;
  for (int k : detection::nms(boxes, scores, cfg_.proposal_nms)) {
    if (static_cast<int>(result.size()) >= top_k) break;
    result.emplace_back(boxes[static_cast<std::size_t>(k)], scores[static_cast<std::size_t>(k)]);
  }
  return result;
}

int RankingBranch::level_for(const Box& b) {
  const double side = std::sqrt(std::max(b.area(), 0.0));
  if (side <= 0.0) return 0;
  const int k = static_cast<int>(std::floor(4.0 + std::log2(side / 224.0)));
  return std::clamp(k, 2, 5) - 2;
}

Var RankingBranch::pool(const Pyramid& p, std::span<const Box> boxes, int out_size) const {
  // Rows come back in input order; boxes are pooled level by level and scattered.
  std::vector<Var> parts;
  std::vector<std::vector<int>> members(4);
  for (std::size_t i = 0; i < boxes.size(); ++i) members[static_cast<std::size_t>(level_for(boxes[i]))].push_back(static_cast<int>(i));
  std::vector<int> order;
  for (std::size_t l = 0; l < 4; ++l) {
    if (members[l].empty()) continue;
    std::vector<Box> group;
    for (int i : members[l]) group.push_back(boxes[static_cast<std::size_t>(i)]);
    parts.push_back(ad::roi_align(p.p[l], group, 1.0 / p.stride[l], out_size));
    order.insert(order.end(), members[l].begin(), members[l].end());
  }
  const Var stacked = ad::concat_rows(parts);
  bool sorted = std::is_sorted(order.begin(), order.end());
  if (sorted) return stacked;
  // Undo the level grouping with a permutation matrix.
  Matrix perm = Matrix::Zero(static_cast<Eigen::Index>(order.size()), static_cast<Eigen::Index>(order.size()));
  for (std::size_t r = 0; r < order.size(); ++r) perm(order[r], static_cast<Eigen::Index>(r)) = 1.0;
  const auto n = static_cast<int>(order.size());
  return ad::matmul(ad::constant(perm, {n, 1, n}), stacked);
}

std::pair<Var, Var> RankingBranch::box_head(const Var& pooled) const {
  const Var h = ad::relu(fc2_(ad::relu(fc1_(pooled))));
  return {cls_(h), reg_(h)};
}

std::vector<Var> RankingBranch::mask_head(const Var& pooled, int n) const {
  std::vector<Var> out;
  const ad::Shape s{cfg_.fpn_channels, cfg_.mask_pool, cfg_.mask_pool};
  for (int r = 0; r < n; ++r) {
    const Var x = ad::row_as_tensor(pooled, r, s);
    out.push_back(mask_out_(ad::relu(mask2_(ad::relu(mask1_(x))))));
  }
  return out;
}

RankingLosses RankingBranch::losses(const Pyramid& p, const RpnOutput& out, const data::Sample& sample,
                                    const losses::SimilarityPrior& prior, std::mt19937_64& rng) const {
  const int height = sample.height(), width = sample.width();
  std::vector<Box> gts;
  for (const auto& inst : sample.instances) gts.push_back(inst.box);

  // Region proposal objective over a balanced anchor sample.
  const int per_loc = cfg_.anchors.per_location();
  const auto refs = anchor_refs(out, per_loc);
  std::vector<Box> anchors;
  for (const auto& level : out.anchors) anchors.insert(anchors.end(), level.begin(), level.end());
  const auto matches = detection::match_proposals(anchors, gts, cfg_.iou_pos, cfg_.iou_det);
  const auto labels = detection::rpn_labels(matches, anchors, gts);
  std::vector<int> candidates, candidate_labels;
  for (std::size_t i = 0; i < anchors.size(); ++i) {
    // Anchors in the ambiguous band are neither positive nor negative.
    if (labels[i] == 0 && matches[i].best_iou >= 0.3) continue;
    candidates.push_back(static_cast<int>(i));
    candidate_labels.push_back(labels[i]);
  }
  std::vector<int> chosen;
  for (int k : detection::sample_balanced(candidate_labels, cfg_.rpn_batch, cfg_.rpn_positive_fraction, rng)) {
    chosen.push_back(candidates[static_cast<std::size_t>(k)]);
  }

  losses::RpnTargets rpn_t;
  const auto k = static_cast<Eigen::Index>(chosen.size());
  rpn_t.target_deltas = Matrix::Zero(k, 4);
  for (Eigen::Index r = 0; r < k; ++r) {
    const auto i = static_cast<std::size_t>(chosen[static_cast<std::size_t>(r)]);
    rpn_t.labels.push_back(labels[i]);
    if (labels[i] > 0) {
      const Deltas d = detection::encode(anchors[i], gts[static_cast<std::size_t>(matches[i].gt_index)]);
      for (int j = 0; j < 4; ++j) rpn_t.target_deltas(r, j) = d[static_cast<std::size_t>(j)];
    }
  }
  std::vector<Var> rpn_inputs(out.objectness.begin(), out.objectness.end());
  rpn_inputs.insert(rpn_inputs.end(), out.deltas.begin(), out.deltas.end());
  RankingLosses result;
  result.rpn = ad::scalar_term(rpn_inputs, [&](std::span<const Matrix* const> v) {
    losses::RpnTargets t = rpn_t;
    t.objectness = Matrix(k, 1);
    t.deltas = Matrix(k, 4);
    for (Eigen::Index r = 0; r < k; ++r) {
      const auto& ref = refs[static_cast<std::size_t>(chosen[static_cast<std::size_t>(r)])];
      t.objectness(r, 0) = (*v[ref.level])(ref.a, ref.pixel);
      for (int j = 0; j < 4; ++j) t.deltas(r, j) = (*v[4 + ref.level])(4 * ref.a + j, ref.pixel);
    }
    const auto loss = losses::rpn_loss(t);
    ad::ScalarTerm term;
    term.value = loss.value;
    for (const Matrix* m : v) term.grads.push_back(Matrix::Zero(m->rows(), m->cols()));
    for (Eigen::Index r = 0; r < k; ++r) {
      const auto& ref = refs[static_cast<std::size_t>(chosen[static_cast<std::size_t>(r)])];
      term.grads[ref.level](ref.a, ref.pixel) += loss.grad_objectness(r, 0);
      for (int j = 0; j < 4; ++j) term.grads[4 + ref.level](4 * ref.a + j, ref.pixel) += loss.grad_deltas(r, j);
    }
    return term;
  });

  // ROI sample: detached proposals plus the ground-truth boxes.
  std::vector<Box> rois;
  for (const auto& [box, score] : proposals(out, height, width, cfg_.post_nms_top_k_train)) rois.push_back(box);
  rois.insert(rois.end(), gts.begin(), gts.end());
  const auto roi_matches = detection::match_proposals(rois, gts, cfg_.iou_pos, cfg_.iou_det);
  std::vector<int> roi_labels(rois.size());
  for (std::size_t i = 0; i < rois.size(); ++i) roi_labels[i] = roi_matches[i].detection_positive ? 1 : 0;
  const auto picked = detection::sample_balanced(roi_labels, cfg_.roi_batch, cfg_.roi_positive_fraction, rng);

  std::vector<Box> sampled;
  losses::RankTargets rank_t;
  rank_t.target_deltas = Matrix::Zero(static_cast<Eigen::Index>(picked.size()), 4);
  std::vector<Box> positives;
  std::vector<int> positive_gt;
  for (std::size_t r = 0; r < picked.size(); ++r) {
    const auto i = static_cast<std::size_t>(picked[r]);
    sampled.push_back(rois[i]);
    int rank = 0;
    if (roi_labels[i]) {
      const auto g = static_cast<std::size_t>(roi_matches[i].gt_index);
      rank = sample.instances[g].rank;
      const Deltas d = detection::encode(rois[i], gts[g], detection::kRoiDeltaWeights);
      for (int j = 0; j < 4; ++j) rank_t.target_deltas(static_cast<Eigen::Index>(r), j) = d[static_cast<std::size_t>(j)];
      positives.push_back(rois[i]);
      positive_gt.push_back(static_cast<int>(g));
    }
    rank_t.ranks.push_back(rank);
  }

  const auto [logits, deltas] = box_head(pool(p, sampled, cfg_.box_pool));
  result.rank = ad::scalar_term({logits, deltas}, [&](std::span<const Matrix* const> v) {
    losses::RankTargets t = rank_t;
    t.logits = *v[0];
    t.deltas = *v[1];
    const auto loss = losses::rank_head_loss(t, prior);
    return ad::ScalarTerm{loss.value, {loss.grad_logits, loss.grad_deltas}};
  });

  // Mask head on positive ROIs only.
  if (positives.empty()) {
    result.mask = ad::scalar(0.0);
    return result;
  }
  const int m = cfg_.mask_pool;
  losses::MaskTargets mask_t;
  for (std::size_t r = 0; r < positives.size(); ++r) {
    const auto& inst = sample.instances[static_cast<std::size_t>(positive_gt[r])];
    const Var gt_mask = ad::constant(Matrix(Eigen::Map<const MatrixT<std::uint8_t>>(inst.mask.data(), 1, inst.mask.size())
                                                .cast<double>()),
                                     {1, height, width});
    const std::array<Box, 1> box{positives[r]};
    const Matrix pooled = ad::roi_align(gt_mask, box, 1.0, m)->value();
    mask_t.targets.push_back((pooled.array() >= 0.5).cast<double>().matrix());
  }
  const auto mask_logits = mask_head(pool(p, positives, m), static_cast<int>(positives.size()));
  result.mask = ad::scalar_term(mask_logits, [&](std::span<const Matrix* const> v) {
    losses::MaskTargets t;
    t.targets = mask_t.targets;
    for (const Matrix* x : v) t.logits.push_back(as_row_block(*x));
    const auto loss = losses::mask_loss(t);
    return ad::ScalarTerm{loss.value, loss.grads};
  });
  return result;
}

std::vector<InstanceProposal> RankingBranch::detect(const Pyramid& p, const RpnOutput& out, int height,
                                                    int width) const {
  const auto props = proposals(out, height, width, cfg_.post_nms_top_k_test);
  if (props.empty()) return {};
  std::vector<Box> rois;
  for (const auto& pr : props) rois.push_back(pr.first);
  const auto [logits_var, deltas_var] = box_head(pool(p, rois, cfg_.box_pool));
  const Matrix& logits = logits_var->value();
  const Matrix& deltas = deltas_var->value();

  std::vector<InstanceProposal> candidates;
  for (int c = 1; c < losses::kRankClasses; ++c) {
    std::vector<InstanceProposal> cls;
    std::vector<Box> boxes;
    std::vector<double> scores;
    for (std::size_t i = 0; i < rois.size(); ++i) {
      const auto r = static_cast<Eigen::Index>(i);
      const double top = logits.row(r).maxCoeff();
      const Eigen::RowVectorXd e = (logits.row(r).array() - top).exp().matrix();
      const double prob = e(c) / e.sum();
      if (prob < cfg_.score_threshold) continue;
      InstanceProposal ip;
      for (int j = 0; j < 4; ++j) {
        ip.rank_logits[static_cast<std::size_t>(j)] = logits(r, j);
        ip.box_deltas[static_cast<std::size_t>(j)] = deltas(r, j);
      }
      ip.box = detection::clip(detection::decode(rois[i], ip.box_deltas, detection::kRoiDeltaWeights), height, width);
      if (ip.box.width() < 1e-3 || ip.box.height() < 1e-3) continue;
      ip.objectness = props[i].second;
      ip.rank = c;
      ip.score = prob;
      boxes.push_back(ip.box);
      scores.push_back(prob);
      cls.push_back(ip);
    }
    for (int k : detection::nms(boxes, scores, cfg_.detection_nms)) candidates.push_back(cls[static_cast<std::size_t>(k)]);
  }
  std::stable_sort(candidates.begin(), candidates.end(),
                   [](const InstanceProposal& a, const InstanceProposal& b) { return a.score > b.score; });
  if (static_cast<int>(candidates.size()) > cfg_.max_detections) {
    candidates.resize(static_cast<std::size_t>(cfg_.max_detections));
  }
  if (candidates.empty()) return candidates;

  std::vector<Box> final_boxes;
  for (const auto& ip : candidates) final_boxes.push_back(ip.box);
  const auto masks = mask_head(pool(p, final_boxes, cfg_.mask_pool), static_cast<int>(final_boxes.size()));
  for (std::size_t i = 0; i < candidates.size(); ++i) {
    const Matrix& v = masks[i]->value();
    candidates[i].mask = Eigen::Map<const Grid>(v.data(), cfg_.mask_pool, cfg_.mask_pool).unaryExpr(
        [](double z) { return sigmoid(z); });
  }
  return candidates;
}

// --- full network --------------------------------------------------------------------------

RankNet::RankNet(const ModelConfig& cfg, std::uint64_t seed) : cfg_(cfg) {
  cfg_.validate();
  nn::Initializer init(seed);
  extractor_ = FeatureExtractor(store_, init, cfg_);
  fixation_decoder_ = Decoder(store_, init, "fixation", cfg_);
  camouflage_decoder_ = Decoder(store_, init, "camouflage", cfg_);
  ranking_ = RankingBranch(store_, init, cfg_);
}

ForwardOutput RankNet::forward(const Tensor& image) const {
  if (image.channels != 3) throw ValidationError("model: expected a 3-channel image");
  ForwardOutput out;
  out.stages = extractor_(ad::constant((image.data.array() - 0.5).matrix(), {3, image.height, image.width}));
  out.fixation = fixation_decoder_(out.stages, image.height, image.width);
  out.segmentation = camouflage_decoder_(reverse_attention(out.stages, out.fixation), image.height, image.width);
  return out;
}

namespace {

Var map_loss_term(const Var& pred, const Grid& gt, const std::function<losses::MapLoss(const Grid&, const Grid&)>& f) {
  const auto h = gt.rows(), w = gt.cols();
  return ad::scalar_term({pred}, [&](std::span<const Matrix* const> v) {
    const Grid p = Eigen::Map<const Grid>(v[0]->data(), h, w);
    const auto loss = f(p, gt);
    return ad::ScalarTerm{loss.value, {Eigen::Map<const Matrix>(loss.grad.data(), 1, h * w)}};
  });
}

}  // namespace

StepResult RankNet::joint_loss(const data::Sample& sample, double lambda) const {
  const ForwardOutput out = forward(sample.image);
  const int window = losses::structure_window(sample.height());
  const Var lf = map_loss_term(out.fixation, sample.fix_gt, losses::fixation_loss);
  const Var lc = map_loss_term(out.segmentation, sample.seg_gt,
                               [window](const Grid& p, const Grid& g) { return losses::structure_loss(p, g, window); });
  StepResult r;
  r.report = losses::make_report(lf->item(), lc->item(), lambda, 0.0, 0.0, 0.0);
  r.objective = ad::add(lf, ad::scale(lc, lambda));
  return r;
}

StepResult RankNet::loss(const data::Sample& sample, double lambda, const losses::SimilarityPrior& prior,
                         std::mt19937_64& rng) const {
  const ForwardOutput out = forward(sample.image);
  const int window = losses::structure_window(sample.height());
  const Var lf = map_loss_term(out.fixation, sample.fix_gt, losses::fixation_loss);
  const Var lc = map_loss_term(out.segmentation, sample.seg_gt,
                               [window](const Grid& p, const Grid& g) { return losses::structure_loss(p, g, window); });
  const auto pyr = ranking_.pyramid(out.stages);
  const auto rpn = ranking_.rpn(pyr);
  const RankingLosses rl = ranking_.losses(pyr, rpn, sample, prior, rng);
  StepResult r;
  r.report = losses::make_report(lf->item(), lc->item(), lambda, rl.rpn->item(), rl.rank->item(), rl.mask->item());
  const std::array<Var, 3> ranking{rl.rpn, rl.rank, rl.mask};
  r.objective = ad::add(ad::add(lf, ad::scale(lc, lambda)), ad::sum(ranking));
  return r;
}

Prediction RankNet::predict(const Tensor& image) const {
  const ForwardOutput out = forward(image);
  Prediction p;
  p.fixation = Eigen::Map<const Grid>(out.fixation->value().data(), image.height, image.width);
  p.segmentation = Eigen::Map<const Grid>(out.segmentation->value().data(), image.height, image.width);
  const auto pyr = ranking_.pyramid(out.stages);
  p.instances = ranking_.detect(pyr, ranking_.rpn(pyr), image.height, image.width);
  return p;
}

}  // namespace camrank::model
