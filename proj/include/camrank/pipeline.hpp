#pragma once

// Training and evaluation drivers.

#include "camrank/checkpoint.hpp"
#include "camrank/data.hpp"
#include "camrank/losses.hpp"
#include "camrank/model.hpp"

#include <json.hpp>

#include <filesystem>
#include <iosfwd>
#include <map>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

namespace camrank::pipeline {

// Training stopped on a non-finite loss; the message names the component.
class DivergenceError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct TrainConfig {
  int input_size = 352;
  int batch_size = 10;
  int iterations = 10000;
  double learning_rate = 5e-5;
  double lambda = 1.0;
  std::uint64_t seed = 7;
  bool hflip = true;
  int checkpoint_every = 500;
  int keep_checkpoints = 3;
  std::string prior = "affine";  // affine | uniform
  // Learning-rate multipliers per parameter group.
  double lr_backbone = 1.0;
  double lr_fixation = 1.0;
  double lr_camouflage = 1.0;
  double lr_rank = 1.0;
  model::ModelConfig model;

  // `key = value` lines; '#' starts a comment. Model fields use a `model.` prefix and
  // lists are comma separated.
  static TrainConfig parse(const std::string& text);
  static TrainConfig load(const std::filesystem::path& file);
  void validate() const;

  // Fully expanded settings in a stable order; hashed into reports.
  std::string canonical() const;
  std::string hash() const;

  losses::SimilarityPrior similarity_prior() const;
};

struct LogEntry {
  long iteration = 0;
  losses::LossReport report;
  double smoothed = 0.0;
};

nlohmann::ordered_json to_json(const LogEntry& e);
LogEntry log_entry_from_json(const nlohmann::json& j);
std::vector<LogEntry> read_log(const std::filesystem::path& file);

struct TrainOutcome {
  std::filesystem::path checkpoint;  // final
  std::filesystem::path log;
  std::vector<LogEntry> entries;
};

// Writes <out>/train_log.jsonl, <out>/config.txt and <out>/checkpoints/ckpt_<iter>.bin.
TrainOutcome train(const TrainConfig& config, const data::DatasetManifest& manifest,
                   const std::filesystem::path& out, std::ostream* progress = nullptr);

// --- evaluation ----------------------------------------------------------------------------

struct EvalOptions {
  std::optional<int> input_size;
  int n_shuffles = 100;
  std::uint64_t seed = 0;
  double paint_score = 0.5;
};

struct PredictedMaps {
  Grid fixation;
  Grid segmentation;
  LabelGrid rank;
  std::vector<model::InstanceProposal> instances;
};

// Paints binarized instance masks with their rank, highest score on top. Instances
// scoring below `min_score` are skipped.
LabelGrid rank_map_from_instances(const std::vector<model::InstanceProposal>& instances, int height, int width,
                                  double min_score = 0.0, double mask_threshold = 0.5);

PredictedMaps predict_maps(const model::RankNet& net, const Tensor& image, const EvalOptions& options);

// Metric name -> value; null marks a metric whose label layer is absent.
nlohmann::ordered_json score_sample(const PredictedMaps& pred, const data::Sample& sample,
                                    std::span<const Point> shuffle_pool, const EvalOptions& options);

// {"meta": ..., "per_image": [...], "mean": {...}}; mean over the images where a metric
// is present.
nlohmann::ordered_json evaluate(const checkpoint::Loaded& ckpt, const data::DatasetManifest& manifest,
                                const EvalOptions& options);

// Same report for precomputed predictions: segmentation in <pred>/gt/<id>.png or
// <pred>/<id>.png, fixation in <pred>/fix/ and ranks in <pred>/rank/. Fixation and rank
// metrics are scored only when requested.
nlohmann::ordered_json score_directory(const std::filesystem::path& pred, const data::DatasetManifest& manifest,
                                       const EvalOptions& options, bool ranks, bool fixations);

// Writes {fix,gt,rank}/<stem>.png and instances/<stem>.json under `out`.
void write_prediction(const std::filesystem::path& out, const std::string& stem, const PredictedMaps& maps);

}  // namespace camrank::pipeline
