#include "camrank/data.hpp"

#include "camrank/autodiff.hpp"
#include "camrank/detection.hpp"
#include "camrank/image_io.hpp"
#include "camrank/metrics.hpp"

#include <json.hpp>

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numbers>
#include <set>

namespace camrank::data {

namespace fs = std::filesystem;
using nlohmann::json;

std::vector<Point> Sample::fixation_points() const { return metrics::density_peaks(fix_gt); }

void Sample::validate() const {
  const auto h = image.height, w = image.width;
  if (image.channels != 3 || h <= 0 || w <= 0) throw ValidationError(id + ": image layer must be a non-empty RGB image");
  if (has_seg()) {
    require_same_shape(seg_gt.rows(), seg_gt.cols(), h, w, (id + ": binary layer").c_str());
    if (((seg_gt != 0.0) && (seg_gt != 1.0)).any()) throw ValidationError(id + ": binary layer is not binary");
  }
  if (has_fix()) {
    require_same_shape(fix_gt.rows(), fix_gt.cols(), h, w, (id + ": fixation layer").c_str());
    if ((fix_gt < 0.0).any() || (fix_gt > 1.0).any()) throw ValidationError(id + ": fixation layer outside [0,1]");
  }
  if (has_rank()) {
    require_same_shape(rank_gt.rows(), rank_gt.cols(), h, w, (id + ": rank layer").c_str());
    if ((rank_gt < 0).any() || (rank_gt > 3).any()) {
      throw ValidationError(id + ": rank layer holds values outside {0,1,2,3}");
    }
    if (has_seg()) {
      for (Eigen::Index i = 0; i < rank_gt.size(); ++i) {
        if (rank_gt.data()[i] != 0 && seg_gt.data()[i] == 0.0) {
          throw ValidationError(id + ": rank layer marks background pixels of the binary layer");
        }
      }
    }
  }
  for (const auto& inst : instances) {
    require_same_shape(inst.mask.rows(), inst.mask.cols(), h, w, (id + ": instance " + inst.id).c_str());
    if (inst.rank < 1 || inst.rank > 3) throw ValidationError(id + ": instance " + inst.id + " has an invalid rank");
    if ((inst.mask != 0).count() == 0) throw ValidationError(id + ": instance " + inst.id + " is empty");
    for (Eigen::Index i = 0; i < inst.mask.size(); ++i) {
      if (inst.mask.data()[i] == 0) continue;
      if (has_seg() && seg_gt.data()[i] == 0.0) {
        throw ValidationError(id + ": instance " + inst.id + " overlaps the background of the binary layer");
      }
      if (has_rank() && rank_gt.data()[i] != inst.rank) {
        throw ValidationError(id + ": instance " + inst.id + " disagrees with the rank layer");
      }
    }
  }
}

void Sample::require_complete() const {
  if (!has_seg()) throw ValidationError(id + ": missing binary layer");
  if (!has_fix()) throw ValidationError(id + ": missing fixation layer");
  if (!has_rank()) throw ValidationError(id + ": missing rank layer");
  if (!has_instances) throw ValidationError(id + ": missing instances layer");
}

// --- manifest ------------------------------------------------------------------------------

DatasetManifest DatasetManifest::load(const fs::path& root) {
  std::ifstream in(root / "manifest.json");
  if (!in) throw ValidationError("missing manifest: " + (root / "manifest.json").string());
  DatasetManifest m;
  m.root = root;
  try {
    json j;
    in >> j;
    m.split = j.value("split", "train");
    m.seed = j.value("seed", std::uint64_t{0});
    m.ids = j.at("entries").get<std::vector<std::string>>();
  } catch (const json::exception& e) {
    throw ValidationError("malformed manifest: " + std::string(e.what()));
  }
  m.validate();
  return m;
}

void DatasetManifest::save() const {
  fs::create_directories(root);
  nlohmann::ordered_json j;
  j["split"] = split;
  j["seed"] = seed;
  j["entries"] = ids;
  std::ofstream(root / "manifest.json") << j.dump(2) << '\n';
}

void DatasetManifest::validate() const {
  if (split != "train" && split != "test") throw ValidationError("manifest split must be train or test");
  std::set<std::string> seen;
  for (const auto& id : ids) {
    if (!seen.insert(id).second) throw ValidationError("duplicate sample id " + id);
    if (!fs::exists(root / "images" / (id + ".png")) && !fs::exists(root / "images" / (id + ".jpg"))) {
      throw ValidationError(id + ": missing image layer");
    }
  }
}

// --- sample io -----------------------------------------------------------------------------

namespace {

std::optional<fs::path> layer_file(const fs::path& root, const char* layer, const std::string& id) {
  fs::path p = root / layer / (id + ".png");
  if (!fs::exists(p)) return std::nullopt;
  return p;
}

}  // namespace

Sample load_sample(const DatasetManifest& manifest, const std::string& id, std::optional<int> size,
                   bool require_labels) {
  if (std::find(manifest.ids.begin(), manifest.ids.end(), id) == manifest.ids.end()) {
    throw ValidationError("sample " + id + " is not in the manifest");
  }
  const fs::path& root = manifest.root;
  Sample s;
  s.id = id;
  fs::path image = root / "images" / (id + ".png");
  if (!fs::exists(image)) image = root / "images" / (id + ".jpg");
  if (!fs::exists(image)) throw ValidationError(id + ": missing image layer");
  s.image = io::read_rgb(image);
  if (auto p = layer_file(root, "gt", id)) s.seg_gt = (io::read_gray8(*p) > 127).cast<double>();
  if (auto p = layer_file(root, "fix", id)) s.fix_gt = io::read_unit_map(*p);
  if (auto p = layer_file(root, "rank", id)) s.rank_gt = io::read_gray8(*p).cast<int>();

  const fs::path inst_file = root / "instances" / (id + ".json");
  s.has_instances = fs::exists(inst_file);
  if (require_labels) s.require_complete();
  if (!s.has_instances) {
    s.validate();
    if (size && (*size != s.height() || *size != s.width())) s = resize(s, *size);
    return s;
  }
  std::ifstream in(inst_file);
  try {
    json j;
    in >> j;
    for (const auto& e : j.at("instances")) {
      Instance inst;
      inst.id = e.at("id").get<std::string>();
      inst.rank = e.at("rank").get<int>();
      const fs::path mask_file = root / "instances" / e.at("mask").get<std::string>();
      if (!fs::exists(mask_file)) throw ValidationError(id + ": missing instance mask " + mask_file.string());
      inst.mask = (io::read_gray8(mask_file) != 0).cast<std::uint8_t>();
      if ((inst.mask != 0).count() == 0) throw ValidationError(id + ": instance " + inst.id + " is empty");
      inst.box = detection::mask_box(inst.mask);
      s.instances.push_back(std::move(inst));
    }
  } catch (const json::exception& e) {
    throw ValidationError(id + ": malformed instances layer: " + e.what());
  }
  s.validate();
  if (size && (*size != s.height() || *size != s.width())) s = resize(s, *size);
  return s;
}

void write_sample(const fs::path& root, const Sample& s) {
  io::write_rgb(root / "images" / (s.id + ".png"), s.image);
  if (s.has_seg()) io::write_gray8(root / "gt" / (s.id + ".png"), (s.seg_gt * 255.0).cast<std::uint8_t>());
  if (s.has_fix()) io::write_unit_map(root / "fix" / (s.id + ".png"), s.fix_gt);
  if (s.has_rank()) io::write_gray8(root / "rank" / (s.id + ".png"), s.rank_gt.cast<std::uint8_t>());
  if (!s.has_instances) return;
  nlohmann::ordered_json list = nlohmann::ordered_json::array();
  for (const auto& inst : s.instances) {
    const std::string mask_name = s.id + "_" + inst.id + ".png";
    io::write_gray8(root / "instances" / mask_name, (inst.mask * std::uint8_t{255}).eval());
    list.push_back({{"id", inst.id},
                    {"rank", inst.rank},
                    {"box", {inst.box.x1, inst.box.y1, inst.box.x2, inst.box.y2}},
                    {"mask", mask_name}});
  }
  nlohmann::ordered_json j;
  j["instances"] = list;
  fs::create_directories(root / "instances");
  std::ofstream(root / "instances" / (s.id + ".json")) << j.dump(2) << '\n';
}

// --- geometry transforms -------------------------------------------------------------------

namespace {

template <typename Scalar>
GridT<Scalar> nearest(const GridT<Scalar>& g, int size) {
  GridT<Scalar> out(size, size);
  for (int y = 0; y < size; ++y) {
    const auto sy = std::min<Eigen::Index>(g.rows() - 1, static_cast<Eigen::Index>((y + 0.5) * g.rows() / size));
    for (int x = 0; x < size; ++x) {
      const auto sx = std::min<Eigen::Index>(g.cols() - 1, static_cast<Eigen::Index>((x + 0.5) * g.cols() / size));
      out(y, x) = g(sy, sx);
    }
  }
  return out;
}

Grid bilinear(const Grid& g, int size) {
  const Matrix ry = ad::bilinear_weights(size, static_cast<int>(g.rows()));
  const Matrix rx = ad::bilinear_weights(size, static_cast<int>(g.cols()));
  return (ry * g.matrix() * rx.transpose()).array();
}

}  // namespace

Sample resize(const Sample& s, int size) {
  Sample out;
  out.id = s.id;
  out.has_instances = s.has_instances;
  out.image = Tensor(3, size, size);
  for (int c = 0; c < 3; ++c) out.image.plane(c) = bilinear(Grid(s.image.plane(c).array()), size).matrix();
  if (s.has_seg()) out.seg_gt = nearest(s.seg_gt, size);
  if (s.has_fix()) out.fix_gt = bilinear(s.fix_gt, size).cwiseMax(0.0).cwiseMin(1.0);
  if (s.has_rank()) out.rank_gt = nearest(s.rank_gt, size);
  for (const auto& inst : s.instances) {
    Instance r = inst;
    r.mask = nearest(inst.mask, size);
    if ((r.mask != 0).count() == 0) continue;
    r.box = detection::mask_box(r.mask);
    out.instances.push_back(std::move(r));
  }
  return out;
}

Sample hflip(const Sample& s) {
  Sample out = s;
  for (int c = 0; c < 3; ++c) out.image.plane(c) = s.image.plane(c).rowwise().reverse().eval();
  out.seg_gt = s.seg_gt.rowwise().reverse().eval();
  out.fix_gt = s.fix_gt.rowwise().reverse().eval();
  out.rank_gt = s.rank_gt.rowwise().reverse().eval();
  for (auto& inst : out.instances) {
    inst.mask = inst.mask.rowwise().reverse().eval();
    inst.box = detection::mask_box(inst.mask);
  }
  return out;
}

std::vector<int> epoch_order(int n, std::uint64_t seed, int epoch) {
  std::vector<int> order(static_cast<std::size_t>(n));
  for (int i = 0; i < n; ++i) order[static_cast<std::size_t>(i)] = i;
  std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                    static_cast<std::uint32_t>(epoch)};
  std::mt19937_64 rng(seq);
  std::shuffle(order.begin(), order.end(), rng);
  return order;
}

// --- synthesis -----------------------------------------------------------------------------

namespace {

struct Texture {
  struct Wave {
    double fx, fy, phase, amplitude;
  };
  std::array<std::vector<Wave>, 3> waves;

  static Texture random(std::mt19937_64& rng, int size) {
    std::uniform_real_distribution<double> freq(1.0, 6.0), phase(0.0, 2.0 * std::numbers::pi),
        amp(0.5, 1.0), sign(-1.0, 1.0);
    Texture t;
    for (auto& channel : t.waves) {
      for (int k = 0; k < 4; ++k) {
        channel.push_back({freq(rng) * (sign(rng) < 0 ? -1 : 1) / size, freq(rng) / size, phase(rng), amp(rng)});
      }
    }
    return t;
  }

  // Value in roughly [-1, 1].
  double at(int c, int x, int y) const {
    double v = 0.0, norm = 0.0;
    for (const auto& w : waves[static_cast<std::size_t>(c)]) {
      v += w.amplitude * std::sin(2.0 * std::numbers::pi * (w.fx * x + w.fy * y) + w.phase);
      norm += w.amplitude;
    }
    return v / norm;
  }
};

int pick_rank(std::mt19937_64& rng, const DifficultySpec& spec) {
  std::discrete_distribution<int> d(spec.rank_weights.begin(), spec.rank_weights.end());
  return d(rng) + 1;
}

}  // namespace

Sample synthesize_sample(std::mt19937_64& rng, int size, const DifficultySpec& spec, const std::string& id) {
  if (size <= 0 || size % 32 != 0) throw ValidationError("synthetic size must be a positive multiple of 32");
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  const double kTextureAmp = 0.12;
  const double kGrain = 0.02;

  Sample s;
  s.id = id;
  s.image = Tensor(3, size, size);
  s.seg_gt = Grid::Zero(size, size);
  s.fix_gt = Grid::Zero(size, size);
  s.rank_gt = LabelGrid::Zero(size, size);
  s.has_instances = true;

  std::array<double, 3> base{};
  for (auto& b : base) b = 0.3 + 0.4 * unit(rng);
  const Texture background = Texture::random(rng, size);
  for (int y = 0; y < size; ++y) {
    for (int x = 0; x < size; ++x) {
      for (int c = 0; c < 3; ++c) {
        s.image.plane(c)(y, x) = base[c] + kTextureAmp * background.at(c, x, y) + kGrain * (unit(rng) - 0.5);
      }
    }
  }

  std::uniform_int_distribution<int> count(spec.min_instances, spec.max_instances);
  const int wanted = count(rng);
  GridT<std::uint8_t> occupied = GridT<std::uint8_t>::Zero(size, size);
  const double sigma = size / 32.0;
  std::vector<std::array<double, 2>> eyes;

  for (int k = 0, attempts = 0; k < wanted && attempts < 200; ++attempts) {
    const double rx = size * (0.10 + 0.08 * unit(rng));
    const double ry = size * (0.10 + 0.08 * unit(rng));
    const double cx = rx + 1.0 + unit(rng) * (size - 2.0 * rx - 2.0);
    const double cy = ry + 1.0 + unit(rng) * (size - 2.0 * ry - 2.0);
    GridT<std::uint8_t> mask = GridT<std::uint8_t>::Zero(size, size);
    bool clash = false;
    for (int y = 0; y < size && !clash; ++y) {
      for (int x = 0; x < size; ++x) {
        const double dx = (x + 0.5 - cx) / rx, dy = (y + 0.5 - cy) / ry;
        if (dx * dx + dy * dy > 1.0) continue;
        // Keep a two-pixel gap between instances.
        for (int yy = std::max(0, y - 2); yy <= std::min(size - 1, y + 2) && !clash; ++yy) {
          for (int xx = std::max(0, x - 2); xx <= std::min(size - 1, x + 2); ++xx) {
            if (occupied(yy, xx)) {
              clash = true;
              break;
            }
          }
        }
        mask(y, x) = 1;
      }
    }
    if (clash || (mask != 0).count() == 0) continue;

    const int rank = pick_rank(rng, spec);
    const double contrast = kRankContrast[static_cast<std::size_t>(rank - 1)];
    std::array<double, 3> offset{};
    double norm = 0.0;
    for (auto& o : offset) {
      o = unit(rng) - 0.5;
      norm += o * o;
    }
    norm = std::sqrt(norm);
    for (auto& o : offset) o = contrast * o / norm * std::sqrt(3.0);
    const Texture skin = Texture::random(rng, size);

    // Discriminative spot: a small high-contrast disc near the middle of the object.
    const double angle = 2.0 * std::numbers::pi * unit(rng);
    const double reach = 0.45 * unit(rng);
    const double ex = cx + reach * rx * std::cos(angle);
    const double ey = cy + reach * ry * std::sin(angle);
    const double eye_r = std::max(1.5, size / 40.0);
    const double eye_shift = unit(rng) < 0.5 ? -0.35 : 0.35;

    for (int y = 0; y < size; ++y) {
      for (int x = 0; x < size; ++x) {
        if (!mask(y, x)) continue;
        const bool in_eye = std::hypot(x + 0.5 - ex, y + 0.5 - ey) <= eye_r;
        for (int c = 0; c < 3; ++c) {
          double v = base[c] + offset[c] + kTextureAmp * skin.at(c, x, y) + kGrain * (unit(rng) - 0.5);
          if (in_eye) v += eye_shift;
          s.image.plane(c)(y, x) = v;
        }
        s.seg_gt(y, x) = 1.0;
        s.rank_gt(y, x) = rank;
        occupied(y, x) = 1;
      }
    }
    eyes.push_back({ex, ey});
    Instance inst;
    inst.id = std::to_string(k);
    inst.rank = rank;
    inst.mask = mask;
    inst.box = detection::mask_box(mask);
    s.instances.push_back(std::move(inst));
    ++k;
  }

  for (int y = 0; y < size; ++y) {
    for (int x = 0; x < size; ++x) {
      double v = 0.0;
      for (const auto& e : eyes) {
        const double dx = x + 0.5 - e[0], dy = y + 0.5 - e[1];
        v = std::max(v, std::exp(-(dx * dx + dy * dy) / (2.0 * sigma * sigma)));
      }
      s.fix_gt(y, x) = v;
    }
  }
  if (s.fix_gt.maxCoeff() > 0.0) s.fix_gt /= s.fix_gt.maxCoeff();
  s.image.data = s.image.data.cwiseMax(0.0).cwiseMin(1.0);
  return s;
}

DatasetManifest synthesize(std::uint64_t seed, int n, int size, const DifficultySpec& spec, const fs::path& out) {
  if (n < 1) throw ValidationError("synthesize: n must be at least 1");
  if (size <= 0 || size % 32 != 0) throw ValidationError("synthesize: size must be a positive multiple of 32");
  std::mt19937_64 rng(seed);
  DatasetManifest m;
  m.root = out;
  m.seed = seed;
  for (int i = 0; i < n; ++i) {
    char name[32];
    std::snprintf(name, sizeof(name), "syn_%04d", i);
    const Sample s = synthesize_sample(rng, size, spec, name);
    write_sample(out, s);
    m.ids.push_back(name);
  }
  m.save();
  return m;
}

}  // namespace camrank::data
