#pragma once

// Eye-tracker fixation logs -> per-instance detection delays -> camouflage ranks.

#include "camrank/grid.hpp"

#include <filesystem>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <utility>
#include <vector>

namespace camrank::annotation {

inline constexpr int kBackground = 0;
inline constexpr int kHardest = 1;
inline constexpr int kMedian = 2;
inline constexpr int kEasiest = 3;

struct GazeSample {
  double t = 0.0;  // seconds
  int x = 0;       // pixel column
  int y = 0;       // pixel row
};

struct FixationSession {
  std::string observer_id;
  std::string image_id;
  double t0 = 0.0;
  std::vector<GazeSample> points;

  // Throws ValidationError unless points are time-sorted, start at or after t0 and
  // fall inside a height x width image.
  void validate(int height, int width) const;
  double duration() const;
};

struct InstanceMask {
  std::string instance_id;
  std::string image_id;
  GridT<std::uint8_t> mask;  // nonzero = foreground

  void validate() const;
};

struct DelayEntry {
  std::vector<std::optional<double>> per_observer_delays;
  double delay = 1.0;
};

struct DetectionDelayTable {
  std::map<std::string, DelayEntry> entries;
};

struct RankThresholds {
  double low = 1.0 / 3.0;
  double high = 2.0 / 3.0;

  void validate() const;
};

struct RankAnnotation {
  LabelGrid rank_map;
  std::map<std::string, int> instance_ranks;
};

struct AnnotateOptions {
  // Chebyshev radius around a fixation pixel that still counts as "on" the instance.
  int hit_tolerance = 0;
};

// Median of an unordered sample; the sample is sorted internally.
double median(std::span<const double> values);

std::optional<double> observer_delay(const FixationSession& session, const InstanceMask& inst,
                                     const AnnotateOptions& options = {});

// Missed-instance rule: strictly more than half missing -> 1. Otherwise missing
// observers are dropped and the median of the rest is normalized and clamped to [0, 1].
double instance_delay(std::span<const std::optional<double>> observer_delays, double normalizer);
double instance_delay(std::span<const FixationSession> sessions, const InstanceMask& inst,
                      double normalizer, const AnnotateOptions& options = {});

// Longest session duration; the default per-image normalizer.
double default_normalizer(std::span<const FixationSession> sessions);

DetectionDelayTable build_delay_table(std::span<const FixationSession> sessions,
                                      std::span<const InstanceMask> instances, double normalizer,
                                      const AnnotateOptions& options = {});

int rank_for_delay(double delay, const RankThresholds& thresholds);

RankAnnotation quantize_ranks(const DetectionDelayTable& delays, std::span<const InstanceMask> instances,
                              const RankThresholds& thresholds);

// --- file formats -------------------------------------------------------------------------

FixationSession read_session_csv(const std::filesystem::path& path);
void write_session_csv(const std::filesystem::path& path, const FixationSession& session);

// Reads every `<image_id>_<instance_id>.png` in a directory.
std::vector<InstanceMask> read_instance_masks(const std::filesystem::path& dir);

struct AnnotateSummary {
  int images = 0;
  int instances = 0;
};

// Runs the whole annotation over a sessions directory and a masks directory, writing
// `<image_id>.png` rank maps and `<image_id>.json` sidecars into out_dir.
AnnotateSummary annotate_directory(const std::filesystem::path& sessions_dir,
                                   const std::filesystem::path& masks_dir,
                                   const std::filesystem::path& out_dir,
                                   const RankThresholds& thresholds,
                                   std::optional<double> normalizer,
                                   const AnnotateOptions& options = {});

}  // namespace camrank::annotation
