#pragma once

// Dataset layout, validation and the seeded synthetic camouflage-scene generator.
//
//   <root>/manifest.json
//   <root>/images/<id>.png       RGB
//   <root>/gt/<id>.png           binary mask, 0 / 255
//   <root>/fix/<id>.png          fixation density, 0..255
//   <root>/rank/<id>.png         literal ranks 0..3
//   <root>/instances/<id>.json   [{id, rank, box, mask}] with masks as <id>_<k>.png

#include "camrank/geometry.hpp"
#include "camrank/grid.hpp"

#include <array>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <random>
#include <string>
#include <vector>

namespace camrank::data {

struct Instance {
  std::string id;
  Box box;
  int rank = 0;
  GridT<std::uint8_t> mask;  // 0 / 1
};

struct Sample {
  std::string id;
  Tensor image;      // 3 x h x w in [0, 1]
  Grid seg_gt;       // binary
  Grid fix_gt;       // density in [0, 1]
  LabelGrid rank_gt; // {0,1,2,3}
  std::vector<Instance> instances;
  bool has_instances = false;

  // Label layers are optional on disk; an absent layer is an empty grid.
  bool has_seg() const { return seg_gt.size() != 0; }
  bool has_fix() const { return fix_gt.size() != 0; }
  bool has_rank() const { return rank_gt.size() != 0; }

  int height() const { return image.height; }
  int width() const { return image.width; }

  // Fixated pixels recovered from the density map.
  std::vector<Point> fixation_points() const;

  // Throws ValidationError naming the offending layer.
  void validate() const;
  // Throws unless every label layer is present.
  void require_complete() const;
};

struct DatasetManifest {
  std::filesystem::path root;
  std::string split = "train";
  std::vector<std::string> ids;
  std::uint64_t seed = 0;

  static DatasetManifest load(const std::filesystem::path& root);
  void save() const;
  // Every id unique and resolvable to an image.
  void validate() const;
};

// Relative frequency of ranks {1, 2, 3} among synthesized instances.
struct DifficultySpec {
  std::array<double, 3> rank_weights{1.0, 1.0, 1.0};
  int min_instances = 1;
  int max_instances = 3;

  static DifficultySpec all_easiest() { return {{0.0, 0.0, 1.0}, 1, 3}; }
};

// Colour offset between a synthetic object and its background, per rank 1..3.
inline constexpr std::array<double, 3> kRankContrast{0.07, 0.16, 0.30};

// With require_labels a missing label layer is an error naming the layer; otherwise the
// layer is left empty.
Sample load_sample(const DatasetManifest& manifest, const std::string& id, std::optional<int> size = {},
                   bool require_labels = true);
void write_sample(const std::filesystem::path& root, const Sample& sample);

Sample synthesize_sample(std::mt19937_64& rng, int size, const DifficultySpec& spec, const std::string& id);
DatasetManifest synthesize(std::uint64_t seed, int n, int size, const DifficultySpec& spec,
                           const std::filesystem::path& out);

Sample resize(const Sample& s, int size);
Sample hflip(const Sample& s);

// Visiting order for one epoch: a pure function of (seed, epoch).
std::vector<int> epoch_order(int n, std::uint64_t seed, int epoch);

}  // namespace camrank::data
