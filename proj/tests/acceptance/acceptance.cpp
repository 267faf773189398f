// One PASS/FAIL line per acceptance criterion. Exit status is the number of failures.

#include "camrank/annotation.hpp"
#include "camrank/detection.hpp"
#include "camrank/losses.hpp"
#include "camrank/metrics.hpp"
#include "camrank/model.hpp"
#include "camrank/pipeline.hpp"
#include "model_gradcheck.hpp"
#include "oracles/sweep.hpp"
#include "support.hpp"

#include <chrono>
#include <cmath>
#include <fstream>
#include <functional>
#include <iostream>
#include <iterator>
#include <optional>
#include <sstream>

using namespace camrank;
namespace fs = std::filesystem;

namespace {

constexpr int kSweepGrids = 240;
constexpr double kClosedFormTol = 1e-9;
constexpr double kEmdTol = 1e-6;
constexpr double kSweepSeconds = 120;

constexpr double kGradTol = 1e-4;
constexpr double kGradSeconds = 300;

constexpr int kOverfitSamples = 5;
constexpr int kOverfitSize = 64;
constexpr int kOverfitIterations = 300;
constexpr double kOverfitLossRatio = 0.10;
constexpr double kOverfitSMeasure = 0.9;
constexpr double kOverfitRankMae = 0.1;
constexpr double kOverfitSeconds = 600;

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) {
  return std::chrono::duration<double>(Clock::now() - t0).count();
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), {}};
}

struct Outcome {
  bool pass = true;
  std::ostringstream detail;

  void require(bool ok, const std::string& what) {
    if (!ok) {
      pass = false;
      detail << " [failed: " << what << "]";
    }
  }
};

LabelGrid labels(int h, int w, std::initializer_list<int> v) {
  LabelGrid g(h, w);
  std::copy(v.begin(), v.end(), g.data());
  return g;
}

// --- criteria ------------------------------------------------------------------------------

void metric_oracles(Outcome& o) {
  const auto t0 = Clock::now();
  const auto r = oracle::metric_sweep(kSweepGrids, 2024);
  const double secs = seconds_since(t0);
  double closed = 0.0, emd = 0.0;
  for (const auto& [name, err] : r.max_error) {
    if (name.rfind("EMD", 0) == 0) {
      emd = std::max(emd, err);
    } else {
      closed = std::max(closed, err);
    }
  }
  o.detail << r.grids << " grids, " << r.max_error.size() << " metrics, closed-form err " << closed << ", EMD err "
           << emd << ", " << secs << " s";
  o.require(r.grids >= 200, "grid count");
  o.require(closed <= kClosedFormTol, "closed-form tolerance");
  o.require(emd <= kEmdTol, "EMD tolerance");
  o.require(secs < kSweepSeconds, "runtime");
}

void rank_mae(Outcome& o) {
  namespace m = metrics;
  // 2x2: |0-0| + |2-1| + |3-3| + |0-2| = 3 over 4 pixels.
  const double a = m::r_mae(labels(2, 2, {0, 2, 3, 0}), labels(2, 2, {0, 1, 3, 2}));
  o.require(a == 0.75, "2x2 fixture");

  // 4x4: an easiest object in the top-left 2x2 block and a hardest one in the bottom row.
  const LabelGrid gt = labels(4, 4, {3, 3, 0, 0,
                                     3, 3, 0, 0,
                                     0, 0, 0, 0,
                                     1, 1, 1, 1});
  const LabelGrid pred = labels(4, 4, {1, 3, 0, 0,
                                       2, 3, 0, 2,
                                       0, 0, 0, 0,
                                       1, 1, 0, 3});
  // 2 + 1 + 2 + 1 + 2 = 8 over 16 pixels.
  const double b = m::r_mae(pred, gt);
  o.require(b == 0.5, "4x4 fixture");

  LabelGrid as_hardest = gt, as_median = gt;
  as_hardest.topLeftCorner(2, 2).setConstant(1);
  as_median.topLeftCorner(2, 2).setConstant(2);
  const double hard = m::r_mae(as_hardest, gt), med = m::r_mae(as_median, gt);
  o.require(hard == 0.5 && med == 0.25, "block values");
  o.require(hard > med, "easiest-as-hardest worse than easiest-as-median");
  o.detail << "2x2 " << a << ", 4x4 " << b << ", easiest->hardest " << hard << " > easiest->median " << med;
}

void annotation_rules(Outcome& o) {
  using namespace annotation;
  InstanceMask inst{"a", "img", GridT<std::uint8_t>::Zero(4, 4)};
  inst.mask.leftCols(2).setConstant(255);
  auto session = [](const std::string& obs, std::vector<GazeSample> pts) {
    return FixationSession{obs, "img", 0.0, std::move(pts)};
  };
  auto hit_at = [&](const std::string& obs, double t) {
    return session(obs, {{0.5 * t, 3, 3}, {t, 0, 1}, {t + 5.0, 3, 0}});
  };
  auto miss = [&](const std::string& obs) { return session(obs, {{1.0, 3, 3}, {2.0, 2, 0}}); };

  // Per observer: median of the on-instance fixation times.
  const auto d1 = observer_delay(session("o", {{1.0, 0, 0}, {2.0, 3, 3}, {3.0, 1, 2}, {9.0, 0, 3}}), inst);
  o.require(d1 && *d1 == 3.0, "observer median, odd count");
  const auto d2 = observer_delay(session("o", {{2.0, 1, 1}, {4.0, 0, 2}}), inst);
  o.require(d2 && *d2 == 3.0, "observer median, even count");

  // Across observers: median of the rest once missing observers are dropped.
  const std::vector<FixationSession> four_hits{hit_at("a", 1), hit_at("b", 2), miss("c"), hit_at("d", 3), miss("e"),
                                               hit_at("f", 4)};
  const double d_med = instance_delay(four_hits, inst, 10.0);
  o.require(d_med == 0.25, "instance median");

  std::vector<FixationSession> most_missed{hit_at("a", 1), hit_at("b", 2)};
  for (int i = 0; i < 4; ++i) most_missed.push_back(miss("m" + std::to_string(i)));
  const double d_missed = instance_delay(most_missed, inst, 10.0);
  o.require(d_missed == 1.0, "more than half missed gives delay 1.0");
  const std::vector<std::optional<double>> half{1.0, std::nullopt, 3.0, std::nullopt};
  o.require(instance_delay(half, 4.0) == 0.5, "exactly half missed is not more than half");
  o.require(rank_for_delay(d_missed, RankThresholds{}) == kHardest, "missed instance ranks hardest");
  o.detail << "observer medians " << *d1 << "/" << *d2 << ", instance median " << d_med << ", missed delay "
           << d_missed;
}

void similarity_prior(Outcome& o) {
  const auto p = losses::SimilarityPrior::affine_default();
  o.require(p(2, 0) == 0.4, "S_p(2,0) = 0.4");
  bool diag = true, mono = true;
  for (int n = 0; n < 4; ++n) {
    diag = diag && p(n, n) > 0.0;
    for (int m1 = 0; m1 < 4; ++m1)
      for (int m2 = 0; m2 < 4; ++m2)
        if (std::abs(m1 - n) < std::abs(m2 - n)) mono = mono && p(m1, n) <= p(m2, n);
  }
  o.require(diag, "positive diagonal");
  o.require(mono, "distance monotonicity");

  std::mt19937_64 rng(11);
  std::normal_distribution<double> g(0.0, 2.0);
  std::uniform_int_distribution<int> cls(0, 3);
  double worst = 0.0;
  for (int t = 0; t < 50; ++t) {
    Matrix logits(7, 4);
    std::vector<int> truth(7);
    for (Eigen::Index i = 0; i < logits.size(); ++i) logits.data()[i] = g(rng);
    for (auto& c : truth) c = cls(rng);
    double ce = 0.0;
    for (int r = 0; r < 7; ++r) {
      double z = 0.0;
      for (int c = 0; c < 4; ++c) z += std::exp(logits(r, c));
      ce += std::log(z) - logits(r, truth[static_cast<std::size_t>(r)]);
    }
    worst = std::max(worst,
                     std::fabs(losses::weighted_rank_loss(logits, truth, losses::SimilarityPrior::uniform()).value - ce / 7));
  }
  o.require(worst <= 1e-12, "uniform prior equals cross-entropy");
  o.detail << "S_p(2,0) = " << p(2, 0) << ", uniform-prior vs CE max diff " << worst;
}

void gradient_checks(Outcome& o) {
  const auto t0 = Clock::now();
  std::mt19937_64 rng(31);
  const Grid gt = testing::random_mask(rng, 16, 16);
  const Grid density = testing::random_grid(rng, 16, 16);
  Grid p = 0.02 + 0.96 * testing::random_grid(rng, 16, 16).array();

  const auto f = losses::fixation_loss(p, density);
  const auto e_fix = testing::check_gradient(p, f.grad, [&] { return losses::fixation_loss(p, density).value; });
  const int window = losses::structure_window(16);
  const auto s = losses::structure_loss(p, gt, window);
  const auto e_struct =
      testing::check_gradient(p, s.grad, [&] { return losses::structure_loss(p, gt, window).value; });

  Matrix logits(6, 4);
  std::normal_distribution<double> n(0.0, 1.5);
  for (Eigen::Index i = 0; i < logits.size(); ++i) logits.data()[i] = n(rng);
  const std::vector<int> truth{3, 0, 2, 1, 0, 2};
  const auto prior = losses::SimilarityPrior::affine_default();
  const auto w = losses::weighted_rank_loss(logits, truth, prior);
  const auto e_rank =
      testing::check_gradient(logits, w.grad, [&] { return losses::weighted_rank_loss(logits, truth, prior).value; });

  model::RankNet net(model::ModelConfig::toy(), 8);
  std::mt19937_64 gen(3);
  const auto sample = data::resize(data::synthesize_sample(gen, 32, {}, "toy"), 16);
  const auto joint =
      testing::check_model_gradient(net, [&] { return net.joint_loss(sample, 1.0).objective; }, 8, 1);
  const double secs = seconds_since(t0);

  o.require(e_fix.max_rel < kGradTol, "fixation_loss");
  o.require(e_struct.max_rel < kGradTol, "structure_loss");
  o.require(e_rank.max_rel < kGradTol, "weighted_rank_loss");
  o.require(joint.result.max_rel < kGradTol, "joint loss (" + joint.worst + ")");
  o.require(secs < kGradSeconds, "runtime");
  o.detail << "rel err (abs err) fixation " << e_fix.max_rel << " (" << e_fix.max_abs << "), structure "
           << e_struct.max_rel << " (" << e_struct.max_abs << "), rank " << e_rank.max_rel << " (" << e_rank.max_abs
           << "), joint " << joint.result.max_rel << " (" << joint.result.max_abs << ") over "
           << joint.result.checked << " entries, " << secs << " s";
}

void reverse_attention(Outcome& o) {
  std::mt19937_64 rng(41);
  const std::array<int, 4> sides{8, 4, 2, 1};
  auto stages = [&] {
    model::StageFeatures f;
    for (std::size_t i = 0; i < 4; ++i) {
      const ad::Shape sh{3, sides[i], sides[i]};
      f.s[i] = ad::constant(testing::random_param(rng, sh)->value(), sh);
    }
    return f;
  };
  auto map = [](const Grid& g) { return ad::constant(Eigen::Map<const Matrix>(g.data(), 1, g.size()), {1, 32, 32}); };

  bool ones_zero = true, zeros_identity = true, monotone = true;
  for (int t = 0; t < 25; ++t) {
    const auto f = stages();
    const auto a = model::reverse_attention(f, map(Grid::Ones(32, 32)));
    const auto b = model::reverse_attention(f, map(Grid::Zero(32, 32)));
    const Grid lo = testing::random_grid(rng, 32, 32);
    const Grid hi = lo + (1.0 - lo) * testing::random_grid(rng, 32, 32);
    const auto l = model::reverse_attention(f, map(lo));
    const auto h = model::reverse_attention(f, map(hi));
    for (std::size_t i = 0; i < 4; ++i) {
      ones_zero = ones_zero && (a.s[i]->value().array() == 0.0).all();
      zeros_identity = zeros_identity && a.s[i]->value().size() == f.s[i]->value().size() &&
                       b.s[i]->value() == f.s[i]->value();
      monotone = monotone && (h.s[i]->value().array().abs() <= l.s[i]->value().array().abs()).all();
    }
  }
  o.require(ones_zero, "F = 1 gives zero");
  o.require(zeros_identity, "F = 0 gives identity");
  o.require(monotone, "monotone suppression");
  o.detail << "25 random stage sets, 4 stages each";
}

struct OverfitRun {
  pipeline::TrainOutcome train;
  nlohmann::ordered_json report;
  double seconds = 0.0;
};

pipeline::TrainConfig overfit_config() {
  pipeline::TrainConfig c;
  c.input_size = kOverfitSize;
  c.batch_size = kOverfitSamples;
  c.iterations = kOverfitIterations;
  c.learning_rate = 1e-3;
  c.seed = 7;
  c.hflip = false;
  c.checkpoint_every = kOverfitIterations;
  c.keep_checkpoints = 1;
  return c;
}

OverfitRun overfit_run(const data::DatasetManifest& manifest, const fs::path& out) {
  const auto t0 = Clock::now();
  OverfitRun r;
  r.train = pipeline::train(overfit_config(), manifest, out);
  pipeline::EvalOptions opt;
  opt.seed = 7;
  r.report = pipeline::evaluate(checkpoint::load(r.train.checkpoint), manifest, opt);
  r.seconds = seconds_since(t0);
  std::ofstream(out / "report.json") << r.report.dump(2) << '\n';
  return r;
}

void loss_identities(Outcome& o, const OverfitRun& run) {
  const auto log = pipeline::read_log(run.train.log);
  long bad_fc = 0, bad_total = 0;
  for (const auto& e : log) {
    const auto& r = e.report;
    if (!(r.l_fc == r.l_f + r.lambda * r.l_c)) ++bad_fc;
    if (!(r.l_total == r.l_rpn + r.l_rank + r.l_mask)) ++bad_total;
  }
  o.require(pipeline::TrainConfig{}.lambda == 1.0, "default lambda is 1");
  o.require(!log.empty(), "log has entries");
  o.require(bad_fc == 0, "L_fc identity");
  o.require(bad_total == 0, "L identity");
  o.detail << log.size() << " logged reports, " << bad_fc << " L_fc and " << bad_total << " L mismatches";
}

void overfit(Outcome& o, const OverfitRun& run) {
  const auto log = pipeline::read_log(run.train.log);
  o.require(log.size() == static_cast<std::size_t>(kOverfitIterations), "iteration count");
  if (log.empty()) return;
  const double initial = log.front().report.objective();
  const double final_smoothed = log.back().smoothed;
  const double s = run.report["mean"]["S_alpha"].get<double>();
  const double r = run.report["mean"]["r_MAE"].get<double>();
  o.require(final_smoothed < kOverfitLossRatio * initial, "loss ratio");
  o.require(s > kOverfitSMeasure, "S-measure");
  o.require(r < kOverfitRankMae, "r_MAE");
  o.require(run.seconds < kOverfitSeconds, "runtime");
  o.detail << "loss " << initial << " -> " << final_smoothed << " (" << 100 * final_smoothed / initial << "%), S "
           << s << ", r_MAE " << r << ", " << run.seconds << " s";
}

void determinism(Outcome& o, const OverfitRun& a, const OverfitRun& b) {
  o.require(slurp(a.train.log) == slurp(b.train.log), "training logs");
  o.require(slurp(a.train.checkpoint) == slurp(b.train.checkpoint), "checkpoints");
  o.require(a.report.dump() == b.report.dump(), "evaluation reports");
  o.detail << "logs " << slurp(a.train.log).size() << " bytes, reports " << a.report.dump().size() << " bytes";
}

void detection_geometry(Outcome& o) {
  using detection::iou;
  const Box a{0, 0, 10, 10};
  o.require(iou(a, Box{20, 20, 30, 30}) == 0.0, "disjoint");
  o.require(iou(a, Box{10, 0, 20, 10}) == 0.0, "touching");
  o.require(iou(a, a) == 1.0, "identity");
  o.require(iou(a, Box{5, 0, 15, 10}) == 1.0 / 3.0, "one-third overlap");

  const std::vector<Box> gt{a};
  // IoU 0.8, 0.7, 0.6, 0.5, 0.4
  const std::vector<Box> props{{0, 0, 10, 8}, {0, 0, 10, 7}, {0, 0, 10, 6}, {0, 0, 10, 5}, {0, 0, 10, 4}};
  const auto m = detection::match_proposals(props, gt, 0.7, 0.5);
  const bool rpn[] = {true, false, false, false, false};
  const bool det[] = {true, true, true, true, false};
  for (std::size_t i = 0; i < props.size(); ++i) {
    o.require(m[i].rpn_positive == rpn[i], "RPN gate at IoU " + std::to_string(m[i].best_iou));
    o.require(m[i].detection_positive == det[i], "detection gate at IoU " + std::to_string(m[i].best_iou));
  }
  o.detail << "IoU 0/1/" << iou(a, Box{5, 0, 15, 10}) << ", gates at 0.7 (RPN) and 0.5 (detection)";
}

}  // namespace

int main() {
  std::cout.precision(6);
  int failures = 0;
  auto report = [&](const std::string& name, const std::function<void(Outcome&)>& body) {
    Outcome o;
    try {
      body(o);
    } catch (const std::exception& e) {
      o.pass = false;
      o.detail << " [exception: " << e.what() << "]";
    }
    if (!o.pass) ++failures;
    std::cout << (o.pass ? "PASS" : "FAIL") << "  " << name << ": " << o.detail.str() << std::endl;
  };

  report("metric-oracle equivalence", metric_oracles);
  report("r_MAE exactness", rank_mae);
  report("annotation pipeline", annotation_rules);
  report("similarity-prior constants", similarity_prior);
  report("gradient checks", gradient_checks);
  report("reverse-attention invariants", reverse_attention);

  std::optional<OverfitRun> first, second;
  std::string setup_error;
  try {
    const auto root = testing::scratch_dir("acceptance");
    const auto manifest = data::synthesize(7, kOverfitSamples, kOverfitSize, {}, root / "data");
    first = overfit_run(manifest, root / "run_a");
    second = overfit_run(manifest, root / "run_b");
  } catch (const std::exception& e) {
    setup_error = e.what();
  }
  auto with_runs = [&](const std::function<void(Outcome&)>& body) {
    return [&, body](Outcome& o) {
      if (!first || !second) throw std::runtime_error("training run failed: " + setup_error);
      body(o);
    };
  };
  report("loss identities", with_runs([&](Outcome& o) { loss_identities(o, *first); }));
  report("overfit smoke test", with_runs([&](Outcome& o) { overfit(o, *first); }));
  report("determinism", with_runs([&](Outcome& o) { determinism(o, *first, *second); }));
  report("detection geometry", detection_geometry);

  std::cout << (failures == 0 ? "all criteria pass" : std::to_string(failures) + " criteria fail") << std::endl;
  return failures;
}
