#include "camrank/pipeline.hpp"

#include "camrank/image_io.hpp"
#include "camrank/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <ostream>
#include <sstream>

namespace camrank::pipeline {

namespace fs = std::filesystem;
using nlohmann::json;
using nlohmann::ordered_json;

// --- config --------------------------------------------------------------------------------

namespace {

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

json parse_value(const std::string& key, const std::string& raw) {
  std::string text = raw;
  if (text.find(',') != std::string::npos && text.front() != '[') text = "[" + text + "]";
  try {
    return json::parse(text);
  } catch (const json::exception&) {
    throw ValidationError("config: cannot parse value of " + key + ": '" + raw + "'");
  }
}

template <typename T>
T as(const std::string& key, const json& v) {
  try {
    return v.get<T>();
  } catch (const json::exception&) {
    throw ValidationError("config: wrong type for " + key);
  }
}

}  // namespace

TrainConfig TrainConfig::parse(const std::string& text) {
  TrainConfig c;
  json model = c.model.to_json();
  std::istringstream in(text);
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (const auto hash = line.find('#'); hash != std::string::npos) line.resize(hash);
    line = trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw ValidationError("config line " + std::to_string(lineno) + ": expected key = value");
    const std::string key = trim(line.substr(0, eq));
    const std::string raw = trim(line.substr(eq + 1));
    if (raw.empty()) throw ValidationError("config: empty value for " + key);
    if (key.rfind("model.", 0) == 0) {
      const std::string field = key.substr(6);
      if (!model.contains(field)) throw ValidationError("config: unknown key " + key);
      model[field] = parse_value(key, raw);
      continue;
    }
    if (key == "prior") {
      c.prior = raw;
      continue;
    }
    const json v = parse_value(key, raw);
    if (key == "input_size") c.input_size = as<int>(key, v);
    else if (key == "batch_size") c.batch_size = as<int>(key, v);
    else if (key == "iterations") c.iterations = as<int>(key, v);
    else if (key == "learning_rate") c.learning_rate = as<double>(key, v);
    else if (key == "lambda") c.lambda = as<double>(key, v);
    else if (key == "seed") c.seed = as<std::uint64_t>(key, v);
    else if (key == "hflip") c.hflip = as<bool>(key, v);
    else if (key == "checkpoint_every") c.checkpoint_every = as<int>(key, v);
    else if (key == "keep_checkpoints") c.keep_checkpoints = as<int>(key, v);
    else if (key == "lr_backbone") c.lr_backbone = as<double>(key, v);
    else if (key == "lr_fixation") c.lr_fixation = as<double>(key, v);
    else if (key == "lr_camouflage") c.lr_camouflage = as<double>(key, v);
    else if (key == "lr_rank") c.lr_rank = as<double>(key, v);
    else if (key == "anchor_scales") model["anchor_scales"] = v;
    else if (key == "anchor_ratios") model["anchor_ratios"] = v;
    else if (key == "iou_pos") model["iou_pos"] = v;
    else if (key == "iou_det") model["iou_det"] = v;
    else throw ValidationError("config: unknown key " + key);
  }
  c.model = model::ModelConfig::from_json(model);
  c.validate();
  return c;
}

TrainConfig TrainConfig::load(const fs::path& file) {
  std::ifstream in(file);
  if (!in) throw ValidationError("cannot read config " + file.string());
  std::stringstream ss;
  ss << in.rdbuf();
  return parse(ss.str());
}

void TrainConfig::validate() const {
  if (input_size <= 0 || input_size % 32 != 0) throw ValidationError("config: input_size must be a positive multiple of 32");
  if (batch_size <= 0) throw ValidationError("config: batch_size must be positive");
  if (iterations < 0) throw ValidationError("config: iterations must be non-negative");
  if (!(learning_rate > 0.0)) throw ValidationError("config: learning_rate must be positive");
  if (!(lambda > 0.0)) throw ValidationError("config: lambda must be positive");
  if (checkpoint_every <= 0) throw ValidationError("config: checkpoint_every must be positive");
  if (keep_checkpoints <= 0) throw ValidationError("config: keep_checkpoints must be positive");
  for (double m : {lr_backbone, lr_fixation, lr_camouflage, lr_rank}) {
    if (!(m > 0.0)) throw ValidationError("config: learning-rate multipliers must be positive");
  }
  if (prior != "affine" && prior != "uniform") throw ValidationError("config: prior must be affine or uniform");
  model.validate();
}

std::string TrainConfig::canonical() const {
  std::ostringstream out;
  out.precision(17);
  out << "batch_size=" << batch_size << '\n'
      << "checkpoint_every=" << checkpoint_every << '\n'
      << "hflip=" << (hflip ? "true" : "false") << '\n'
      << "input_size=" << input_size << '\n'
      << "iterations=" << iterations << '\n'
      << "keep_checkpoints=" << keep_checkpoints << '\n'
      << "lambda=" << lambda << '\n'
      << "learning_rate=" << learning_rate << '\n'
      << "lr_backbone=" << lr_backbone << '\n'
      << "lr_camouflage=" << lr_camouflage << '\n'
      << "lr_fixation=" << lr_fixation << '\n'
      << "lr_rank=" << lr_rank << '\n'
      << "prior=" << prior << '\n'
      << "seed=" << seed << '\n';
  const auto model_json = model.to_json();
  for (const auto& [key, value] : model_json.items()) out << "model." << key << '=' << value.dump() << '\n';
  return out.str();
}

std::string TrainConfig::hash() const { return checkpoint::hex(checkpoint::fnv1a(canonical())); }

losses::SimilarityPrior TrainConfig::similarity_prior() const {
  return prior == "uniform" ? losses::SimilarityPrior::uniform() : losses::SimilarityPrior::affine_default();
}

// --- log -----------------------------------------------------------------------------------

ordered_json to_json(const LogEntry& e) {
  ordered_json j;
  j["iter"] = e.iteration;
  j["L_f"] = e.report.l_f;
  j["L_c"] = e.report.l_c;
  j["lambda"] = e.report.lambda;
  j["L_fc"] = e.report.l_fc;
  j["L_rpn"] = e.report.l_rpn;
  j["L_rank"] = e.report.l_rank;
  j["L_mask"] = e.report.l_mask;
  j["L"] = e.report.l_total;
  j["total"] = e.report.objective();
  j["smoothed"] = e.smoothed;
  return j;
}

LogEntry log_entry_from_json(const json& j) {
  LogEntry e;
  e.iteration = j.at("iter").get<long>();
  e.report.l_f = j.at("L_f").get<double>();
  e.report.l_c = j.at("L_c").get<double>();
  e.report.lambda = j.at("lambda").get<double>();
  e.report.l_fc = j.at("L_fc").get<double>();
  e.report.l_rpn = j.at("L_rpn").get<double>();
  e.report.l_rank = j.at("L_rank").get<double>();
  e.report.l_mask = j.at("L_mask").get<double>();
  e.report.l_total = j.at("L").get<double>();
  e.smoothed = j.at("smoothed").get<double>();
  return e;
}

std::vector<LogEntry> read_log(const fs::path& file) {
  std::ifstream in(file);
  if (!in) throw ValidationError("cannot read log " + file.string());
  std::vector<LogEntry> out;
  std::string line;
  while (std::getline(in, line)) {
    if (!line.empty()) out.push_back(log_entry_from_json(json::parse(line)));
  }
  return out;
}

// --- training ------------------------------------------------------------------------------

namespace {

void check_finite(const losses::LossReport& r, long iteration) {
  const std::pair<const char*, double> parts[] = {{"L_f", r.l_f},       {"L_c", r.l_c},     {"L_rpn", r.l_rpn},
                                                  {"L_rank", r.l_rank}, {"L_mask", r.l_mask}};
  for (const auto& [name, v] : parts) {
    if (!std::isfinite(v)) {
      throw DivergenceError("training diverged at iteration " + std::to_string(iteration) + ": " + name +
                            " is not finite");
    }
  }
}

fs::path checkpoint_path(const fs::path& dir, long iteration) {
  char name[32];
  std::snprintf(name, sizeof(name), "ckpt_%06ld.bin", iteration);
  return dir / name;
}

void prune_checkpoints(const fs::path& dir, int keep) {
  std::vector<fs::path> files;
  for (const auto& e : fs::directory_iterator(dir)) {
    const auto name = e.path().filename().string();
    if (name.rfind("ckpt_", 0) == 0 && e.path().extension() == ".bin") files.push_back(e.path());
  }
  std::sort(files.begin(), files.end());
  for (std::size_t i = 0; i + static_cast<std::size_t>(keep) < files.size(); ++i) fs::remove(files[i]);
}

}  // namespace

TrainOutcome train(const TrainConfig& config, const data::DatasetManifest& manifest, const fs::path& out,
                   std::ostream* progress) {
  config.validate();
  if (manifest.ids.empty()) throw ValidationError("train: the manifest lists no samples");
  std::vector<data::Sample> samples;
  for (const auto& id : manifest.ids) {
    samples.push_back(data::load_sample(manifest, id, config.input_size));
  }

  fs::create_directories(out / "checkpoints");
  std::ofstream(out / "config.txt") << config.canonical();
  TrainOutcome outcome;
  outcome.log = out / "train_log.jsonl";
  std::ofstream log(outcome.log, std::ios::trunc);

  model::RankNet net(config.model, config.seed);
  nn::Adam adam(net.parameters(), {config.learning_rate, 0.9, 0.999, 1e-8});
  adam.set_multiplier("backbone.", config.lr_backbone);
  adam.set_multiplier("fixation.", config.lr_fixation);
  adam.set_multiplier("camouflage.", config.lr_camouflage);
  adam.set_multiplier("rank.", config.lr_rank);
  const auto prior = config.similarity_prior();
  std::mt19937_64 rng(config.seed ^ 0x9e3779b97f4a7c15ULL);

  const int n = static_cast<int>(samples.size());
  int epoch = 0;
  std::size_t cursor = 0;
  std::vector<int> order = data::epoch_order(n, config.seed, epoch);
  double smoothed = 0.0;

  for (long it = 1; it <= config.iterations; ++it) {
    net.parameters().zero_grad();
    double sums[5] = {0, 0, 0, 0, 0};
    for (int b = 0; b < config.batch_size; ++b) {
      if (cursor == order.size()) {
        order = data::epoch_order(n, config.seed, ++epoch);
        cursor = 0;
      }
      const data::Sample& base = samples[static_cast<std::size_t>(order[cursor++])];
      const bool flip = config.hflip && std::uniform_int_distribution<int>(0, 1)(rng) == 1;
      const auto step = flip ? net.loss(data::hflip(base), config.lambda, prior, rng)
                             : net.loss(base, config.lambda, prior, rng);
      check_finite(step.report, it);
      ad::backward(step.objective, 1.0 / config.batch_size);
      sums[0] += step.report.l_f;
      sums[1] += step.report.l_c;
      sums[2] += step.report.l_rpn;
      sums[3] += step.report.l_rank;
      sums[4] += step.report.l_mask;
    }
    const double bs = config.batch_size;
    LogEntry entry;
    entry.iteration = it;
    entry.report = losses::make_report(sums[0] / bs, sums[1] / bs, config.lambda, sums[2] / bs, sums[3] / bs,
                                       sums[4] / bs);
    check_finite(entry.report, it);
    smoothed = it == 1 ? entry.report.objective() : 0.9 * smoothed + 0.1 * entry.report.objective();
    entry.smoothed = smoothed;
    log << to_json(entry).dump() << '\n';
    log.flush();
    outcome.entries.push_back(entry);
    adam.step();

    if (progress && (it == 1 || it % 10 == 0 || it == config.iterations)) {
      *progress << "iter " << it << " total " << entry.report.objective() << " smoothed " << smoothed << '\n';
    }
    if (it % config.checkpoint_every == 0) {
      checkpoint::save(checkpoint_path(out / "checkpoints", it), net, config.seed, it);
      prune_checkpoints(out / "checkpoints", config.keep_checkpoints);
    }
  }
  outcome.checkpoint = checkpoint_path(out / "checkpoints", config.iterations);
  if (!fs::exists(outcome.checkpoint)) {
    checkpoint::save(outcome.checkpoint, net, config.seed, config.iterations);
    prune_checkpoints(out / "checkpoints", config.keep_checkpoints);
  }
  return outcome;
}

// --- evaluation ----------------------------------------------------------------------------

LabelGrid rank_map_from_instances(const std::vector<model::InstanceProposal>& instances, int height, int width,
                                  double min_score, double mask_threshold) {
  LabelGrid out = LabelGrid::Zero(height, width);
  std::vector<std::size_t> order(instances.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t a, std::size_t b) { return instances[a].score > instances[b].score; });
  GridT<bool> painted = GridT<bool>::Constant(height, width, false);
  for (std::size_t i : order) {
    const auto& inst = instances[i];
    if (inst.score < min_score || inst.rank < 1 || inst.rank > 3) continue;
    const Grid mask = model::paste_mask(inst, height, width);
    for (Eigen::Index k = 0; k < mask.size(); ++k) {
      if (mask.data()[k] >= mask_threshold && !painted.data()[k]) {
        out.data()[k] = inst.rank;
        painted.data()[k] = true;
      }
    }
  }
  return out;
}

PredictedMaps predict_maps(const model::RankNet& net, const Tensor& image, const EvalOptions& options) {
  const auto p = net.predict(image);
  PredictedMaps maps;
  maps.fixation = p.fixation;
  maps.segmentation = p.segmentation;
  maps.instances = p.instances;
  maps.rank = rank_map_from_instances(p.instances, image.height, image.width, options.paint_score,
                                      net.config().mask_threshold);
  return maps;
}

ordered_json score_sample(const PredictedMaps& pred, const data::Sample& s, std::span<const Point> pool,
                          const EvalOptions& options) {
  ordered_json m;
  const std::vector<std::string> seg_keys{"S_alpha", "F_mean", "E_mean", "MAE"};
  const std::vector<std::string> fix_keys{"SIM", "CC", "EMD", "KLD", "NSS", "AUC_J", "AUC_B", "sAUC"};
  for (const auto& k : seg_keys) m[k] = nullptr;
  for (const auto& k : fix_keys) m[k] = nullptr;
  m["r_MAE"] = nullptr;
  m["MAE_rank"] = nullptr;

  if (s.has_seg() && pred.segmentation.size() != 0) {
    m["S_alpha"] = metrics::s_measure(pred.segmentation, s.seg_gt);
    m["F_mean"] = metrics::mean_f_measure(pred.segmentation, s.seg_gt);
    m["E_mean"] = metrics::mean_e_measure(pred.segmentation, s.seg_gt);
    m["MAE"] = metrics::mae(pred.segmentation, s.seg_gt);
  }
  if (s.has_fix() && pred.fixation.size() != 0) {
    const auto points = s.fixation_points();
    if (!points.empty()) {
      metrics::FixationOptions fo;
      fo.n_shuffles = options.n_shuffles;
      fo.seed = options.seed;
      fo.shuffle_pool = pool;
      const auto f = metrics::fixation_metrics(pred.fixation, s.fix_gt, points, fo);
      m["SIM"] = f.sim;
      m["CC"] = f.cc;
      m["EMD"] = f.emd;
      m["KLD"] = f.kld;
      m["NSS"] = f.nss;
      m["AUC_J"] = f.auc_judd;
      m["AUC_B"] = f.auc_borji;
      if (f.sauc) m["sAUC"] = *f.sauc;
    }
  }
  if (s.has_rank() && pred.rank.size() != 0) {
    m["r_MAE"] = metrics::r_mae(pred.rank, s.rank_gt);
    m["MAE_rank"] = metrics::mae((pred.rank > 0).cast<double>(), (s.rank_gt > 0).cast<double>());
  }
  return m;
}

namespace {

template <typename Predict>
ordered_json build_report(const data::DatasetManifest& manifest, const EvalOptions& options, ordered_json meta,
                          Predict&& predict) {
  std::vector<data::Sample> samples;
  for (const auto& id : manifest.ids) samples.push_back(data::load_sample(manifest, id, options.input_size, false));
  std::vector<std::vector<Point>> points(samples.size());
  for (std::size_t i = 0; i < samples.size(); ++i) {
    if (samples[i].has_fix()) points[i] = samples[i].fixation_points();
  }

  ordered_json per_image = ordered_json::array();
  std::map<std::string, std::pair<double, int>> totals;
  std::vector<std::string> keys;
  for (std::size_t i = 0; i < samples.size(); ++i) {
    std::vector<Point> pool;
    for (std::size_t j = 0; j < samples.size(); ++j) {
      if (j != i && samples[j].height() == samples[i].height() && samples[j].width() == samples[i].width()) {
        pool.insert(pool.end(), points[j].begin(), points[j].end());
      }
    }
    const PredictedMaps maps = predict(samples[i]);
    ordered_json scores = score_sample(maps, samples[i], pool, options);
    for (const auto& [k, v] : scores.items()) {
      if (totals.find(k) == totals.end()) keys.push_back(k);
      auto& t = totals[k];
      if (!v.is_null()) {
        t.first += v.template get<double>();
        ++t.second;
      }
    }
    per_image.push_back({{"id", samples[i].id}, {"metrics", scores}});
  }
  ordered_json mean;
  ordered_json absent = ordered_json::array();
  for (const auto& k : keys) {
    const auto& t = totals[k];
    if (t.second == 0) {
      mean[k] = nullptr;
      absent.push_back(k);
    } else {
      mean[k] = t.first / t.second;
    }
  }
  meta["split"] = manifest.split;
  meta["images"] = samples.size();
  meta["absent"] = absent;
  ordered_json report;
  report["meta"] = meta;
  report["per_image"] = per_image;
  report["mean"] = mean;
  return report;
}

}  // namespace

ordered_json evaluate(const checkpoint::Loaded& ckpt, const data::DatasetManifest& manifest,
                      const EvalOptions& options) {
  const model::RankNet& net = *ckpt.net;
  ordered_json meta;
  ordered_json cfg = net.config().to_json();
  cfg["input_size"] = options.input_size ? *options.input_size : 0;
  cfg["n_shuffles"] = options.n_shuffles;
  cfg["paint_score"] = options.paint_score;
  meta["config_hash"] = checkpoint::hex(checkpoint::fnv1a(cfg.dump()));
  meta["seed"] = ckpt.meta.seed;
  meta["checkpoint_id"] = ckpt.meta.id;
  meta["checkpoint_iteration"] = ckpt.meta.iteration;
  return build_report(manifest, options, meta,
                      [&](const data::Sample& s) { return predict_maps(net, s.image, options); });
}

ordered_json score_directory(const fs::path& pred, const data::DatasetManifest& manifest, const EvalOptions& options,
                             bool ranks, bool fixations) {
  ordered_json meta;
  meta["config_hash"] = checkpoint::hex(checkpoint::fnv1a(std::string(ranks ? "r" : "-") + (fixations ? "f" : "-") +
                                                          std::to_string(options.n_shuffles)));
  meta["seed"] = options.seed;
  meta["checkpoint_id"] = nullptr;
  return build_report(manifest, options, meta, [&](const data::Sample& s) {
    PredictedMaps maps;
    auto find = [&](const char* layer) -> std::optional<fs::path> {
      for (const fs::path& p : {pred / layer / (s.id + ".png"), pred / (s.id + ".png")}) {
        if (fs::exists(p)) return p;
        if (std::string(layer) != "gt") break;
      }
      return std::nullopt;
    };
    auto check = [&](Eigen::Index rows, Eigen::Index cols) {
      require_same_shape(rows, cols, s.height(), s.width(), ("prediction for " + s.id).c_str());
    };
    const auto seg = find("gt");
    if (!seg) throw ValidationError("missing segmentation prediction for " + s.id);
    maps.segmentation = io::read_unit_map(*seg);
    check(maps.segmentation.rows(), maps.segmentation.cols());
    if (fixations) {
      const auto fix = find("fix");
      if (!fix) throw ValidationError("missing fixation prediction for " + s.id);
      maps.fixation = io::read_unit_map(*fix);
      check(maps.fixation.rows(), maps.fixation.cols());
    }
    if (ranks) {
      const auto rank = find("rank");
      if (!rank) throw ValidationError("missing rank prediction for " + s.id);
      maps.rank = io::read_gray8(*rank).cast<int>();
      check(maps.rank.rows(), maps.rank.cols());
    }
    return maps;
  });
}

void write_prediction(const fs::path& out, const std::string& stem, const PredictedMaps& maps) {
  io::write_unit_map(out / "fix" / (stem + ".png"), maps.fixation);
  io::write_unit_map(out / "gt" / (stem + ".png"), maps.segmentation);
  io::write_gray8(out / "rank" / (stem + ".png"), maps.rank.cast<std::uint8_t>());
  ordered_json list = ordered_json::array();
  for (const auto& p : maps.instances) {
    list.push_back({{"box", {p.box.x1, p.box.y1, p.box.x2, p.box.y2}},
                    {"rank", p.rank},
                    {"score", p.score},
                    {"objectness", p.objectness},
                    {"rank_logits", p.rank_logits}});
  }
  fs::create_directories(out / "instances");
  std::ofstream(out / "instances" / (stem + ".json")) << ordered_json{{"instances", list}}.dump(2) << '\n';
}

}  // namespace camrank::pipeline
