#include "camrank/data.hpp"
#include "camrank/image_io.hpp"
#include "support.hpp"

#include <doctest.h>

#include <algorithm>
#include <fstream>
#include <iterator>
#include <map>

using namespace camrank;
using namespace camrank::data;
namespace fs = std::filesystem;

namespace {

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), {}};
}

// Every file under root, relative path -> bytes.
std::map<std::string, std::string> tree(const fs::path& root) {
  std::map<std::string, std::string> out;
  for (const auto& e : fs::recursive_directory_iterator(root)) {
    if (e.is_regular_file()) out[fs::relative(e.path(), root).string()] = slurp(e.path());
  }
  return out;
}

DatasetManifest single(const fs::path& root, const Sample& s) {
  write_sample(root, s);
  DatasetManifest m{root, "train", {s.id}, 0};
  m.save();
  return m;
}

}  // namespace

TEST_CASE("write then load is lossless on label layers") {
  std::mt19937_64 rng(1);
  const Sample s = synthesize_sample(rng, 64, {}, "a");
  const auto root = testing::scratch_dir("roundtrip");
  const auto m = single(root, s);
  const Sample back = load_sample(DatasetManifest::load(root), "a");
  CHECK(back.height() == 64);
  CHECK(back.seg_gt.isApprox(s.seg_gt));
  CHECK((back.seg_gt == s.seg_gt).all());
  CHECK((back.rank_gt == s.rank_gt).all());
  CHECK((back.fix_gt - s.fix_gt).abs().maxCoeff() <= 0.5 / 255 + 1e-12);
  CHECK((back.image.data - s.image.data).cwiseAbs().maxCoeff() <= 0.5 / 255 + 1e-12);
  REQUIRE(back.instances.size() == s.instances.size());
  for (std::size_t i = 0; i < s.instances.size(); ++i) {
    CHECK(back.instances[i].id == s.instances[i].id);
    CHECK(back.instances[i].rank == s.instances[i].rank);
    CHECK((back.instances[i].mask == s.instances[i].mask).all());
    CHECK(back.instances[i].box == s.instances[i].box);
  }
  CHECK_THROWS_AS(load_sample(m, "nope"), ValidationError);
}

TEST_CASE("rank value outside the domain is rejected") {
  std::mt19937_64 rng(2);
  const Sample s = synthesize_sample(rng, 32, {}, "a");
  const auto root = testing::scratch_dir("rank7");
  const auto m = single(root, s);
  auto r = io::read_gray8(root / "rank" / "a.png");
  r(0, 0) = 7;
  io::write_gray8(root / "rank" / "a.png", r);
  CHECK_THROWS_WITH_AS(load_sample(m, "a"), doctest::Contains("rank layer"), ValidationError);
}

TEST_CASE("instance over background is rejected") {
  std::mt19937_64 rng(3);
  Sample s = synthesize_sample(rng, 32, {}, "a");
  const auto root = testing::scratch_dir("overlap");
  const auto m = single(root, s);
  // Grow the first instance mask onto a background pixel.
  Eigen::Index bg = 0;
  while (s.seg_gt.data()[bg] != 0.0) ++bg;
  auto mask = io::read_gray8(root / "instances" / ("a_" + s.instances[0].id + ".png"));
  mask.data()[bg] = 255;
  io::write_gray8(root / "instances" / ("a_" + s.instances[0].id + ".png"), mask);
  CHECK_THROWS_WITH_AS(load_sample(m, "a"), doctest::Contains("background"), ValidationError);
}

TEST_CASE("validation of in-memory samples") {
  std::mt19937_64 rng(4);
  const Sample s = synthesize_sample(rng, 32, {}, "a");
  CHECK_NOTHROW(s.validate());
  Sample wrong = s;
  wrong.instances[0].rank = wrong.instances[0].rank % 3 + 1;
  CHECK_THROWS_AS(wrong.validate(), ValidationError);
  Sample grey = s;
  grey.seg_gt(0, 0) = 0.5;
  CHECK_THROWS_AS(grey.validate(), ValidationError);
  Sample stray = s;
  Eigen::Index bg = 0;
  while (s.seg_gt.data()[bg] != 0.0) ++bg;
  stray.rank_gt.data()[bg] = 2;
  CHECK_THROWS_AS(stray.validate(), ValidationError);
}

TEST_CASE("missing layers are named") {
  std::mt19937_64 rng(5);
  const Sample s = synthesize_sample(rng, 32, {}, "a");
  const auto root = testing::scratch_dir("missing");
  const auto m = single(root, s);
  fs::remove(root / "fix" / "a.png");
  CHECK_THROWS_WITH_AS(load_sample(m, "a"), doctest::Contains("fixation"), ValidationError);
  const Sample partial = load_sample(m, "a", {}, false);
  CHECK_FALSE(partial.has_fix());
  CHECK(partial.has_seg());
  fs::remove(root / "images" / "a.png");
  CHECK_THROWS_WITH_AS(load_sample(m, "a"), doctest::Contains("image"), ValidationError);
  CHECK_THROWS_AS(DatasetManifest::load(root), ValidationError);
}

TEST_CASE("manifest checks") {
  const auto root = testing::scratch_dir("manifest");
  std::ofstream(root / "manifest.json") << "{\"split\": \"train\"}";
  CHECK_THROWS_AS(DatasetManifest::load(root), ValidationError);
  std::ofstream(root / "manifest.json") << "not json";
  CHECK_THROWS_AS(DatasetManifest::load(root), ValidationError);
  CHECK_THROWS_AS(DatasetManifest::load(root / "absent"), ValidationError);

  std::mt19937_64 rng(6);
  const auto m = single(root, synthesize_sample(rng, 32, {}, "a"));
  DatasetManifest dup = m;
  dup.ids.push_back("a");
  CHECK_THROWS_AS(dup.validate(), ValidationError);
  DatasetManifest split = m;
  split.split = "val";
  CHECK_THROWS_AS(split.validate(), ValidationError);
}

TEST_CASE("synthesis is reproducible") {
  const auto a = testing::scratch_dir("synth_a"), b = testing::scratch_dir("synth_b");
  synthesize(11, 3, 64, {}, a);
  synthesize(11, 3, 64, {}, b);
  CHECK(tree(a) == tree(b));
  const auto c = testing::scratch_dir("synth_c");
  synthesize(12, 3, 64, {}, c);
  CHECK(tree(a) != tree(c));
}

TEST_CASE("five synthetic samples pass validation") {
  const auto root = testing::scratch_dir("synth5");
  const auto m = synthesize(7, 5, 64, {}, root);
  REQUIRE(m.ids.size() == 5);
  const auto loaded = DatasetManifest::load(root);
  for (const auto& id : loaded.ids) {
    const Sample s = load_sample(loaded, id);
    CHECK(s.height() == 64);
    CHECK(s.instances.size() >= 1);
    CHECK(s.instances.size() <= 3);
    CHECK(s.fix_gt.maxCoeff() == doctest::Approx(1.0).epsilon(0.01));
    CHECK(s.image.data.minCoeff() >= 0.0);
    CHECK(s.image.data.maxCoeff() <= 1.0);
  }
  CHECK_THROWS_AS(synthesize(1, 0, 64, {}, root), ValidationError);
  CHECK_THROWS_AS(synthesize(1, 2, 48, {}, root), ValidationError);
}

TEST_CASE("all-easiest difficulty") {
  std::mt19937_64 rng(8);
  for (int i = 0; i < 10; ++i) {
    const Sample s = synthesize_sample(rng, 64, DifficultySpec::all_easiest(), "e");
    for (const auto& inst : s.instances) CHECK(inst.rank == 3);
    CHECK((s.rank_gt == 0 || s.rank_gt == 3).all());
  }
}

TEST_CASE("lower contrast means a harder rank") {
  CHECK(kRankContrast[0] < kRankContrast[1]);
  CHECK(kRankContrast[1] < kRankContrast[2]);
  // Object-to-background colour distance, averaged over many scenes, follows the ranks.
  std::mt19937_64 rng(9);
  std::array<double, 3> total{};
  std::array<int, 3> count{};
  for (int i = 0; i < 60; ++i) {
    const Sample s = synthesize_sample(rng, 64, {}, "c");
    Eigen::Vector3d bg = Eigen::Vector3d::Zero();
    double nbg = 0;
    for (Eigen::Index p = 0; p < s.seg_gt.size(); ++p) {
      if (s.seg_gt.data()[p] != 0.0) continue;
      bg += s.image.data.col(p);
      nbg += 1;
    }
    bg /= nbg;
    for (const auto& inst : s.instances) {
      Eigen::Vector3d fg = Eigen::Vector3d::Zero();
      double n = 0;
      for (Eigen::Index p = 0; p < inst.mask.size(); ++p) {
        if (inst.mask.data()[p] == 0) continue;
        fg += s.image.data.col(p);
        n += 1;
      }
      total[static_cast<std::size_t>(inst.rank - 1)] += (fg / n - bg).norm();
      ++count[static_cast<std::size_t>(inst.rank - 1)];
    }
  }
  for (int r = 0; r < 3; ++r) REQUIRE(count[static_cast<std::size_t>(r)] > 0);
  CHECK(total[0] / count[0] < total[1] / count[1]);
  CHECK(total[1] / count[1] < total[2] / count[2]);
}

TEST_CASE("resize and flip") {
  std::mt19937_64 rng(10);
  const Sample s = synthesize_sample(rng, 64, {}, "r");
  const Sample small = resize(s, 32);
  CHECK(small.height() == 32);
  CHECK_NOTHROW(small.validate());
  CHECK((small.rank_gt == 0 || small.rank_gt == 1 || small.rank_gt == 2 || small.rank_gt == 3).all());
  for (Eigen::Index y = 0; y < 32; ++y)
    for (Eigen::Index x = 0; x < 32; ++x) CHECK(small.rank_gt(y, x) == s.rank_gt(2 * y + 1, 2 * x + 1));

  const Sample f = hflip(s);
  CHECK_NOTHROW(f.validate());
  CHECK(f.rank_gt(5, 0) == s.rank_gt(5, 63));
  CHECK(f.image.plane(1)(7, 3) == s.image.plane(1)(7, 60));
  const Sample ff = hflip(f);
  CHECK((ff.rank_gt == s.rank_gt).all());
  CHECK(ff.image.data == s.image.data);
  CHECK(ff.instances[0].box == s.instances[0].box);
}

TEST_CASE("epoch order is a pure function of seed and epoch") {
  const auto a = epoch_order(20, 7, 3);
  CHECK(a == epoch_order(20, 7, 3));
  CHECK(a != epoch_order(20, 7, 4));
  CHECK(a != epoch_order(20, 8, 3));
  auto sorted = a;
  std::sort(sorted.begin(), sorted.end());
  for (int i = 0; i < 20; ++i) CHECK(sorted[static_cast<std::size_t>(i)] == i);
}

TEST_CASE("fixation points sit on the density peaks") {
  std::mt19937_64 rng(12);
  const Sample s = synthesize_sample(rng, 64, {}, "f");
  const auto pts = s.fixation_points();
  CHECK(pts.size() >= 1);
  CHECK(pts.size() <= s.instances.size());
  for (const auto& p : pts) CHECK(s.seg_gt(p.y, p.x) == 1.0);
}
