#include "camrank/annotation.hpp"
#include "camrank/image_io.hpp"
#include "support.hpp"

#include <doctest.h>
#include <json.hpp>

#include <fstream>

using namespace camrank;
using namespace camrank::annotation;

namespace {

// 4x4 image; the instance covers the left two columns.
InstanceMask left_block(const std::string& id = "a") {
  InstanceMask m{id, "img", GridT<std::uint8_t>::Zero(4, 4)};
  m.mask.leftCols(2).setConstant(255);
  return m;
}

FixationSession session(const std::string& observer, std::vector<GazeSample> pts, double t0 = 0.0) {
  return {observer, "img", t0, std::move(pts)};
}

// Observer whose on-mask hits arrive at `delay` seconds.
FixationSession hit_at(const std::string& observer, double delay) {
  return session(observer, {{0.5 * delay, 3, 3}, {delay, 0, 1}, {delay + 5.0, 3, 0}});
}

FixationSession miss(const std::string& observer) { return session(observer, {{1.0, 3, 3}, {2.0, 2, 0}}); }

}  // namespace

TEST_CASE("median") {
  CHECK(median(std::vector<double>{1, 2, 3}) == 2.0);
  CHECK(median(std::vector<double>{4, 1, 3, 2}) == 2.5);
  CHECK(median(std::vector<double>{5}) == 5.0);
  CHECK_THROWS_WITH_AS(median(std::vector<double>{}), "empty sample", ValidationError);
}

TEST_CASE("observer delay is the median of on-mask hit times") {
  const auto inst = left_block();
  CHECK(*observer_delay(session("o", {{1.0, 0, 0}, {2.0, 3, 3}, {3.0, 1, 2}, {9.0, 0, 3}}), inst) == 3.0);
  CHECK(*observer_delay(session("o", {{2.0, 1, 1}, {4.0, 0, 2}}), inst) == 3.0);
  CHECK_FALSE(observer_delay(miss("o"), inst).has_value());
  // Times are measured from the session start.
  CHECK(*observer_delay(session("o", {{11.0, 0, 0}}, 10.0), inst) == 1.0);
  auto other = inst;
  other.image_id = "other";
  CHECK_THROWS_AS(observer_delay(miss("o"), other), ValidationError);
}

TEST_CASE("hit tolerance widens the instance") {
  const auto inst = left_block();
  const auto s = session("o", {{1.0, 2, 0}});
  CHECK_FALSE(observer_delay(s, inst).has_value());
  CHECK(*observer_delay(s, inst, {.hit_tolerance = 1}) == 1.0);
}

TEST_CASE("instance delay rules") {
  const auto inst = left_block();
  std::vector<FixationSession> six;
  for (int i = 0; i < 2; ++i) six.push_back(hit_at("h" + std::to_string(i), 2.0));
  for (int i = 0; i < 4; ++i) six.push_back(miss("m" + std::to_string(i)));
  CHECK(instance_delay(six, inst, 10.0) == 1.0);

  std::vector<FixationSession> same;
  for (int i = 0; i < 6; ++i) same.push_back(hit_at("o" + std::to_string(i), 2.0));
  CHECK(instance_delay(same, inst, 10.0) == doctest::Approx(0.2).epsilon(1e-15));

  std::vector<FixationSession> dropped{hit_at("a", 1), hit_at("b", 2), miss("c"), hit_at("d", 3), miss("e"),
                                       hit_at("f", 4)};
  CHECK(instance_delay(dropped, inst, 10.0) == 0.25);

  // Exactly half missing is not "more than half".
  std::vector<std::optional<double>> half{1.0, std::nullopt, 3.0, std::nullopt};
  CHECK(instance_delay(half, 4.0) == 0.5);
  std::vector<std::optional<double>> most{1.0, std::nullopt, std::nullopt};
  CHECK(instance_delay(most, 4.0) == 1.0);

  CHECK(instance_delay(std::vector<std::optional<double>>{30.0}, 10.0) == 1.0);
  CHECK_THROWS_AS(instance_delay(same, inst, 0.0), ValidationError);
  CHECK_THROWS_AS(instance_delay(same, inst, -1.0), ValidationError);
}

TEST_CASE("quantization into ranks") {
  const RankThresholds t;
  CHECK(rank_for_delay(1.0, t) == kHardest);
  CHECK(rank_for_delay(0.0, t) == kEasiest);
  CHECK(rank_for_delay(0.1, t) == 3);
  CHECK(rank_for_delay(0.5, t) == 2);
  CHECK(rank_for_delay(0.9, t) == 1);
  CHECK(rank_for_delay(2.0 / 3.0, t) == 2);
  CHECK(rank_for_delay(1.0 / 3.0, t) == 3);

  CHECK_THROWS_AS((RankThresholds{0.6, 0.4}.validate()), ValidationError);
  CHECK_THROWS_AS((RankThresholds{0.0, 0.4}.validate()), ValidationError);
  CHECK_THROWS_AS((RankThresholds{0.4, 1.0}.validate()), ValidationError);
}

TEST_CASE("rank map painting") {
  std::vector<InstanceMask> inst(3);
  const std::vector<double> delays{0.1, 0.5, 0.9};
  DetectionDelayTable table;
  for (int i = 0; i < 3; ++i) {
    inst[i] = {std::to_string(i), "img", GridT<std::uint8_t>::Zero(3, 4)};
    inst[i].mask(i, i) = 1;
    table.entries[inst[i].instance_id].delay = delays[i];
  }
  const auto r = quantize_ranks(table, inst, {});
  CHECK(r.instance_ranks.at("0") == 3);
  CHECK(r.instance_ranks.at("1") == 2);
  CHECK(r.instance_ranks.at("2") == 1);
  CHECK(r.rank_map(0, 0) == 3);
  CHECK(r.rank_map(1, 1) == 2);
  CHECK(r.rank_map(2, 2) == 1);
  CHECK(r.rank_map.sum() == 6);

  inst[1].mask(0, 0) = 1;
  CHECK_THROWS_AS(quantize_ranks(table, inst, {}), ValidationError);
}

TEST_CASE("session validation") {
  CHECK_NOTHROW(session("o", {{0.0, 0, 0}, {1.0, 3, 3}}).validate(4, 4));
  CHECK_THROWS_AS(session("o", {{2.0, 0, 0}, {1.0, 3, 3}}).validate(4, 4), ValidationError);
  CHECK_THROWS_AS(session("o", {{1.0, 4, 0}}).validate(4, 4), ValidationError);
  CHECK_THROWS_AS(session("o", {{1.0, 0, 0}}, 2.0).validate(4, 4), ValidationError);
  InstanceMask empty{"a", "img", GridT<std::uint8_t>::Zero(2, 2)};
  CHECK_THROWS_AS(empty.validate(), ValidationError);
}

TEST_CASE("annotate a directory end to end") {
  const auto root = testing::scratch_dir("annotate");
  const auto sessions = root / "sessions", masks = root / "masks", out = root / "out";
  std::filesystem::create_directories(sessions);
  std::filesystem::create_directories(masks);

  auto a = left_block("a");
  InstanceMask b{"b", "img", GridT<std::uint8_t>::Zero(4, 4)};
  b.mask(3, 3) = 255;
  io::write_gray8(masks / "img_a.png", a.mask);
  io::write_gray8(masks / "img_b.png", b.mask);
  // Observer 1 sees a at 1s and never b; observer 2 sees a at 1s and b at 9s.
  write_session_csv(sessions / "o1.csv", session("o1", {{1.0, 0, 0}, {10.0, 2, 2}}));
  write_session_csv(sessions / "o2.csv", session("o2", {{1.0, 1, 1}, {9.0, 3, 3}, {10.0, 2, 2}}));

  const auto summary = annotate_directory(sessions, masks, out, {}, std::nullopt);
  CHECK(summary.images == 1);
  CHECK(summary.instances == 2);
  const auto map = io::read_gray8(out / "img.png");
  CHECK(map(0, 0) == 3);
  CHECK(map(3, 3) == 1);
  CHECK(map(2, 2) == 0);
  std::ifstream in(out / "img.json");
  const auto j = nlohmann::json::parse(in);
  CHECK(j["a"]["delay"].get<double>() == 0.1);
  CHECK(j["b"]["delay"].get<double>() == 0.9);
  CHECK(j["b"]["rank"].get<int>() == 1);

  const auto round = read_session_csv(sessions / "o2.csv");
  CHECK(round.observer_id == "o2");
  REQUIRE(round.points.size() == 3);
  CHECK(round.points[1].t == 9.0);
  CHECK(round.points[1].x == 3);
}
