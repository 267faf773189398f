// Command-line entry point: synth, annotate, train, eval, infer, score.
//
// Exit codes: 0 success, 1 invalid input, 2 runtime failure. Relative output paths are
// resolved against $CAMRANK_OUT when it is set.

#include "camrank/annotation.hpp"
#include "camrank/checkpoint.hpp"
#include "camrank/data.hpp"
#include "camrank/image_io.hpp"
#include "camrank/pipeline.hpp"

#include <CLI11.hpp>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>

namespace fs = std::filesystem;
using namespace camrank;

namespace {

fs::path output_path(const std::string& p) {
  fs::path path(p);
  if (path.is_absolute()) return path;
  if (const char* root = std::getenv("CAMRANK_OUT"); root && *root) return fs::path(root) / path;
  return path;
}

void write_json(const fs::path& file, const nlohmann::ordered_json& j) {
  if (file.has_parent_path()) fs::create_directories(file.parent_path());
  std::ofstream out(file);
  if (!out) throw std::runtime_error("cannot write " + file.string());
  out << j.dump(2) << '\n';
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"camouflage localization, segmentation and ranking"};
  app.require_subcommand(1);

  // synth
  auto* synth = app.add_subcommand("synth", "write a seeded synthetic corpus");
  std::string synth_out;
  int synth_n = 10, synth_size = 64;
  std::uint64_t synth_seed = 7;
  std::string synth_split = "train", synth_ranks = "mixed";
  synth->add_option("--out", synth_out, "output directory")->required();
  synth->add_option("--n", synth_n, "number of samples");
  synth->add_option("--size", synth_size, "image side, a multiple of 32");
  synth->add_option("--seed", synth_seed, "generator seed");
  synth->add_option("--split", synth_split, "train or test");
  synth->add_option("--ranks", synth_ranks, "mixed or easiest");

  // annotate
  auto* annotate = app.add_subcommand("annotate", "rank instances from gaze sessions");
  std::string sessions, masks, annotate_out;
  std::optional<double> normalizer;
  annotation::RankThresholds thresholds;
  annotation::AnnotateOptions annotate_options;
  annotate->add_option("--sessions", sessions, "directory of session CSV files")->required();
  annotate->add_option("--masks", masks, "directory of <image>_<instance>.png masks")->required();
  annotate->add_option("--out", annotate_out, "output directory")->required();
  annotate->add_option("--normalizer", normalizer, "delay normalizer in seconds");
  std::vector<double> threshold_pair;
  annotate->add_option("--thresholds", threshold_pair, "low,high delay cut points")->delimiter(',')->expected(2);
  annotate->add_option("--tolerance", annotate_options.hit_tolerance, "hit radius in pixels");

  // train
  auto* train = app.add_subcommand("train", "train a model");
  std::string config_file, train_data, train_out;
  train->add_option("--config", config_file, "key = value config file");
  train->add_option("--data", train_data, "dataset root")->required();
  train->add_option("--out", train_out, "run directory")->required();

  // eval
  auto* eval = app.add_subcommand("eval", "evaluate a checkpoint");
  std::string eval_ckpt, eval_data, eval_out;
  pipeline::EvalOptions eval_options;
  eval->add_option("--ckpt", eval_ckpt, "checkpoint file")->required();
  eval->add_option("--data", eval_data, "dataset root")->required();
  eval->add_option("--out", eval_out, "report file")->required();
  eval->add_option("--size", eval_options.input_size, "resize inputs to this side");
  eval->add_option("--shuffles", eval_options.n_shuffles, "negative draws for AUC-Borji and sAUC");
  eval->add_option("--seed", eval_options.seed, "seed for the AUC negatives");

  // infer
  auto* infer = app.add_subcommand("infer", "predict maps for one image");
  std::string infer_ckpt, infer_image, infer_out;
  infer->add_option("--ckpt", infer_ckpt, "checkpoint file")->required();
  infer->add_option("--image", infer_image, "input image")->required();
  infer->add_option("--out", infer_out, "output directory")->required();

  // score
  auto* score = app.add_subcommand("score", "score precomputed predictions");
  std::string score_pred, score_data, score_out;
  bool score_ranks = false, score_fixations = false;
  pipeline::EvalOptions score_options;
  score->add_option("--pred", score_pred, "prediction root: gt/ or flat PNGs, plus fix/ and rank/")->required();
  score->add_option("--gt,--data", score_data, "dataset root")->required();
  score->add_option("--report,--out", score_out, "report file")->required();
  score->add_flag("--ranks", score_ranks, "score rank maps");
  score->add_flag("--fixations", score_fixations, "score fixation maps");
  score->add_option("--shuffles", score_options.n_shuffles, "negative draws for AUC-Borji and sAUC");
  score->add_option("--seed", score_options.seed, "seed for the AUC negatives");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return 1;
  }

  try {
    if (*synth) {
      if (synth_split != "train" && synth_split != "test") throw ValidationError("--split must be train or test");
      data::DifficultySpec spec;
      if (synth_ranks == "easiest") {
        spec = data::DifficultySpec::all_easiest();
      } else if (synth_ranks != "mixed") {
        throw ValidationError("--ranks must be mixed or easiest");
      }
      auto m = data::synthesize(synth_seed, synth_n, synth_size, spec, output_path(synth_out));
      m.split = synth_split;
      m.save();
      std::cout << "wrote " << m.ids.size() << " samples to " << m.root.string() << '\n';
    } else if (*annotate) {
      if (!threshold_pair.empty()) thresholds = {threshold_pair[0], threshold_pair[1]};
      const auto summary = annotation::annotate_directory(sessions, masks, output_path(annotate_out), thresholds,
                                                          normalizer, annotate_options);
      std::cout << "annotated " << summary.instances << " instances in " << summary.images << " images\n";
    } else if (*train) {
      const auto cfg = config_file.empty() ? pipeline::TrainConfig{} : pipeline::TrainConfig::load(config_file);
      const auto manifest = data::DatasetManifest::load(train_data);
      const auto outcome = pipeline::train(cfg, manifest, output_path(train_out), &std::cout);
      std::cout << "checkpoint " << outcome.checkpoint.string() << '\n';
    } else if (*eval) {
      const auto ckpt = checkpoint::load(eval_ckpt);
      const auto manifest = data::DatasetManifest::load(eval_data);
      const auto report = pipeline::evaluate(ckpt, manifest, eval_options);
      write_json(output_path(eval_out), report);
      std::cout << report["mean"].dump(2) << '\n';
    } else if (*infer) {
      const auto ckpt = checkpoint::load(infer_ckpt);
      const Tensor image = io::read_rgb(infer_image);
      const auto maps = pipeline::predict_maps(*ckpt.net, image, {});
      pipeline::write_prediction(output_path(infer_out), fs::path(infer_image).stem().string(), maps);
      std::cout << maps.instances.size() << " instances\n";
    } else if (*score) {
      const auto manifest = data::DatasetManifest::load(score_data);
      const auto report = pipeline::score_directory(score_pred, manifest, score_options, score_ranks, score_fixations);
      write_json(output_path(score_out), report);
      std::cout << report["mean"].dump(2) << '\n';
    }
  } catch (const ValidationError& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 2;
  }
  return 0;
}
