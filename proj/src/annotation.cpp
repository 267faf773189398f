#include "camrank/annotation.hpp"

#include "camrank/image_io.hpp"

#include <json.hpp>

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <sstream>

namespace camrank::annotation {

void FixationSession::validate(int height, int width) const {
  for (std::size_t k = 0; k < points.size(); ++k) {
    const auto& p = points[k];
    if (p.t < t0) {
      throw ValidationError("session " + observer_id + "/" + image_id + ": sample " +
                            std::to_string(k) + " precedes t0");
    }
    if (k > 0 && p.t < points[k - 1].t) {
      throw ValidationError("session " + observer_id + "/" + image_id + ": samples not time-sorted");
    }
    if (p.x < 0 || p.y < 0 || p.x >= width || p.y >= height) {
      throw ValidationError("session " + observer_id + "/" + image_id + ": sample " +
                            std::to_string(k) + " outside the image");
    }
  }
}

double FixationSession::duration() const {
  return points.empty() ? 0.0 : points.back().t - t0;
}

void InstanceMask::validate() const {
  if ((mask != 0).count() == 0) {
    throw ValidationError("instance " + image_id + "_" + instance_id + " has an empty mask");
  }
}

void RankThresholds::validate() const {
  if (!(0.0 < low && low < high && high < 1.0)) {
    throw ValidationError("rank thresholds must satisfy 0 < low < high < 1");
  }
}

double median(std::span<const double> values) {
  if (values.empty()) throw ValidationError("empty sample");
  std::vector<double> sorted(values.begin(), values.end());
  std::sort(sorted.begin(), sorted.end());
  const std::size_t n = sorted.size();
  if (n % 2 == 1) return sorted[n / 2];
  return (sorted[n / 2 - 1] + sorted[n / 2]) / 2.0;
}

namespace {

bool hits(const GridT<std::uint8_t>& mask, int x, int y, int tolerance) {
  const int rows = static_cast<int>(mask.rows());
  const int cols = static_cast<int>(mask.cols());
  for (int yy = std::max(0, y - tolerance); yy <= std::min(rows - 1, y + tolerance); ++yy) {
    for (int xx = std::max(0, x - tolerance); xx <= std::min(cols - 1, x + tolerance); ++xx) {
      if (mask(yy, xx) != 0) return true;
    }
  }
  return false;
}

}  // namespace

std::optional<double> observer_delay(const FixationSession& session, const InstanceMask& inst,
                                     const AnnotateOptions& options) {
  if (session.image_id != inst.image_id) {
    throw ValidationError("session image " + session.image_id + " does not match instance image " +
                          inst.image_id);
  }
  std::vector<double> offsets;
  for (const auto& p : session.points) {
    if (hits(inst.mask, p.x, p.y, options.hit_tolerance)) offsets.push_back(p.t - session.t0);
  }
  if (offsets.empty()) return std::nullopt;
  return median(offsets);
}

double instance_delay(std::span<const std::optional<double>> observer_delays, double normalizer) {
  if (!(normalizer > 0.0)) throw ValidationError("normalizer must be positive");
  if (observer_delays.empty()) throw ValidationError("no observers");
  std::vector<double> seen;
  for (const auto& d : observer_delays) {
    if (d) seen.push_back(*d);
  }
  const std::size_t missing = observer_delays.size() - seen.size();
  if (2 * missing > observer_delays.size()) return 1.0;
  return std::clamp(median(seen) / normalizer, 0.0, 1.0);
}

double instance_delay(std::span<const FixationSession> sessions, const InstanceMask& inst,
                      double normalizer, const AnnotateOptions& options) {
  std::vector<std::optional<double>> delays;
  delays.reserve(sessions.size());
  for (const auto& s : sessions) delays.push_back(observer_delay(s, inst, options));
  return instance_delay(delays, normalizer);
}

double default_normalizer(std::span<const FixationSession> sessions) {
  double budget = 0.0;
  for (const auto& s : sessions) budget = std::max(budget, s.duration());
  if (!(budget > 0.0)) throw ValidationError("cannot derive a normalizer from empty sessions");
  return budget;
}

DetectionDelayTable build_delay_table(std::span<const FixationSession> sessions,
                                      std::span<const InstanceMask> instances, double normalizer,
                                      const AnnotateOptions& options) {
  DetectionDelayTable table;
  for (const auto& inst : instances) {
    DelayEntry entry;
    for (const auto& s : sessions) entry.per_observer_delays.push_back(observer_delay(s, inst, options));
    entry.delay = instance_delay(entry.per_observer_delays, normalizer);
    table.entries[inst.instance_id] = std::move(entry);
  }
  return table;
}

int rank_for_delay(double delay, const RankThresholds& thresholds) {
  if (delay > thresholds.high) return kHardest;
  if (delay > thresholds.low) return kMedian;
  return kEasiest;
}

RankAnnotation quantize_ranks(const DetectionDelayTable& delays, std::span<const InstanceMask> instances,
                              const RankThresholds& thresholds) {
  thresholds.validate();
  RankAnnotation out;
  if (instances.empty()) return out;
  const auto rows = instances.front().mask.rows();
  const auto cols = instances.front().mask.cols();
  out.rank_map = LabelGrid::Zero(rows, cols);
  for (const auto& inst : instances) {
    require_same_shape(inst.mask, instances.front().mask, "quantize_ranks");
    auto it = delays.entries.find(inst.instance_id);
    if (it == delays.entries.end()) {
      throw ValidationError("no delay for instance " + inst.instance_id);
    }
    const int rank = rank_for_delay(it->second.delay, thresholds);
    out.instance_ranks[inst.instance_id] = rank;
    for (Eigen::Index i = 0; i < inst.mask.size(); ++i) {
      if (inst.mask.data()[i] == 0) continue;
      if (out.rank_map.data()[i] != kBackground) {
        throw ValidationError("instance " + inst.instance_id + " overlaps another instance");
      }
      out.rank_map.data()[i] = rank;
    }
  }
  return out;
}

// --- file formats -------------------------------------------------------------------------

namespace {

std::vector<std::string> split_csv(const std::string& line) {
  std::vector<std::string> fields;
  std::stringstream ss(line);
  std::string field;
  while (std::getline(ss, field, ',')) {
    field.erase(0, field.find_first_not_of(" \t\r"));
    field.erase(field.find_last_not_of(" \t\r") + 1);
    fields.push_back(field);
  }
  return fields;
}

double parse_double(const std::string& s, const std::filesystem::path& path) {
  try {
    std::size_t used = 0;
    double v = std::stod(s, &used);
    if (used != s.size()) throw std::invalid_argument(s);
    return v;
  } catch (const std::exception&) {
    throw ValidationError(path.string() + ": not a number: '" + s + "'");
  }
}

}  // namespace

FixationSession read_session_csv(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ValidationError("missing file: " + path.string());
  std::vector<std::vector<std::string>> rows;
  std::string line;
  while (std::getline(in, line)) {
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    rows.push_back(split_csv(line));
  }
  std::size_t cursor = 0;
  if (cursor < rows.size() && rows[cursor] == std::vector<std::string>{"observer_id", "image_id", "t0"}) {
    ++cursor;
  }
  if (cursor >= rows.size() || rows[cursor].size() != 3) {
    throw ValidationError(path.string() + ": expected an `observer_id,image_id,t0` record");
  }
  FixationSession session;
  session.observer_id = rows[cursor][0];
  session.image_id = rows[cursor][1];
  session.t0 = parse_double(rows[cursor][2], path);
  ++cursor;
  if (cursor < rows.size() && rows[cursor] == std::vector<std::string>{"t", "x", "y"}) ++cursor;
  for (; cursor < rows.size(); ++cursor) {
    const auto& r = rows[cursor];
    if (r.size() != 3) throw ValidationError(path.string() + ": expected `t,x,y` rows");
    session.points.push_back({parse_double(r[0], path),
                              static_cast<int>(std::lround(parse_double(r[1], path))),
                              static_cast<int>(std::lround(parse_double(r[2], path)))});
  }
  return session;
}

void write_session_csv(const std::filesystem::path& path, const FixationSession& session) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out << std::setprecision(17);
  out << "observer_id,image_id,t0\n" << session.observer_id << ',' << session.image_id << ','
      << session.t0 << "\nt,x,y\n";
  for (const auto& p : session.points) out << p.t << ',' << p.x << ',' << p.y << '\n';
}

std::vector<InstanceMask> read_instance_masks(const std::filesystem::path& dir) {
  if (!std::filesystem::is_directory(dir)) throw ValidationError("not a directory: " + dir.string());
  std::vector<std::filesystem::path> files;
  for (const auto& e : std::filesystem::directory_iterator(dir)) {
    if (e.is_regular_file() && e.path().extension() == ".png") files.push_back(e.path());
  }
  std::sort(files.begin(), files.end());
  std::vector<InstanceMask> out;
  for (const auto& f : files) {
    const std::string stem = f.stem().string();
    const auto cut = stem.rfind('_');
    if (cut == std::string::npos || cut == 0 || cut + 1 == stem.size()) {
      throw ValidationError("mask file name must be <image_id>_<instance_id>.png: " + f.string());
    }
    InstanceMask inst;
    inst.image_id = stem.substr(0, cut);
    inst.instance_id = stem.substr(cut + 1);
    inst.mask = io::read_gray8(f);
    inst.validate();
    out.push_back(std::move(inst));
  }
  return out;
}

AnnotateSummary annotate_directory(const std::filesystem::path& sessions_dir,
                                   const std::filesystem::path& masks_dir,
                                   const std::filesystem::path& out_dir,
                                   const RankThresholds& thresholds,
                                   std::optional<double> normalizer,
                                   const AnnotateOptions& options) {
  thresholds.validate();
  if (!std::filesystem::is_directory(sessions_dir)) {
    throw ValidationError("not a directory: " + sessions_dir.string());
  }
  std::map<std::string, std::vector<FixationSession>> sessions_by_image;
  std::vector<std::filesystem::path> csvs;
  for (const auto& e : std::filesystem::directory_iterator(sessions_dir)) {
    if (e.is_regular_file() && e.path().extension() == ".csv") csvs.push_back(e.path());
  }
  std::sort(csvs.begin(), csvs.end());
  for (const auto& f : csvs) {
    auto s = read_session_csv(f);
    sessions_by_image[s.image_id].push_back(std::move(s));
  }
  std::map<std::string, std::vector<InstanceMask>> masks_by_image;
  for (auto& m : read_instance_masks(masks_dir)) masks_by_image[m.image_id].push_back(std::move(m));

  std::filesystem::create_directories(out_dir);
  AnnotateSummary summary;
  for (const auto& [image_id, instances] : masks_by_image) {
    auto it = sessions_by_image.find(image_id);
    if (it == sessions_by_image.end()) throw ValidationError("no sessions for image " + image_id);
    const auto& sessions = it->second;
    const int h = static_cast<int>(instances.front().mask.rows());
    const int w = static_cast<int>(instances.front().mask.cols());
    for (const auto& s : sessions) s.validate(h, w);
    const double norm = normalizer ? *normalizer : default_normalizer(sessions);
    const auto table = build_delay_table(sessions, instances, norm, options);
    const auto ranks = quantize_ranks(table, instances, thresholds);

    io::write_gray8(out_dir / (image_id + ".png"), ranks.rank_map.cast<std::uint8_t>());
    nlohmann::ordered_json sidecar = nlohmann::ordered_json::object();
    for (const auto& [instance_id, entry] : table.entries) {
      sidecar[instance_id] = {{"delay", entry.delay}, {"rank", ranks.instance_ranks.at(instance_id)}};
    }
    std::ofstream(out_dir / (image_id + ".json")) << sidecar.dump(2) << '\n';
    ++summary.images;
    summary.instances += static_cast<int>(instances.size());
  }
  return summary;
}

}  // namespace camrank::annotation
