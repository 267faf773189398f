#include "support.hpp"

#include <doctest.h>
#include <json.hpp>

#include <cstdlib>
#include <fstream>
#include <sys/wait.h>

namespace fs = std::filesystem;

namespace {

int run(const std::string& args, const fs::path& out_root = {}) {
  std::string cmd;
  if (!out_root.empty()) cmd = "CAMRANK_OUT='" + out_root.string() + "' ";
  cmd += std::string("'") + CAMRANK_CLI_PATH + "' " + args + " >/dev/null 2>&1";
  const int status = std::system(cmd.c_str());
  REQUIRE(WIFEXITED(status));
  return WEXITSTATUS(status);
}

nlohmann::json read_json(const fs::path& p) {
  std::ifstream in(p);
  return nlohmann::json::parse(in);
}

}  // namespace

TEST_CASE("usage errors exit with 1") {
  CHECK(run("") == 1);
  CHECK(run("frobnicate") == 1);
  CHECK(run("synth") == 1);
  CHECK(run("--help") == 0);
}

TEST_CASE("synth, train, eval, infer and score") {
  const auto dir = testing::scratch_dir("cli");
  const std::string d = "'" + dir.string() + "'";

  // Relative outputs land under CAMRANK_OUT.
  CHECK(run("synth --out data --n 2 --size 64 --seed 3", dir) == 0);
  CHECK(fs::exists(dir / "data" / "manifest.json"));
  CHECK(run("synth --out bad --n 2 --size 48", dir) == 1);
  CHECK(run("synth --out bad --n 2 --ranks most", dir) == 1);
  CHECK(run("synth --out bad --n 2 --split val", dir) == 1);

  CHECK(run("synth --out " + d + "/easy --n 2 --size 64 --ranks easiest --split test") == 0);
  const auto easy = read_json(dir / "easy" / "manifest.json");
  CHECK(easy["split"] == "test");

  std::ofstream(dir / "bad.cfg") << "iterations = many\n";
  CHECK(run("train --config " + d + "/bad.cfg --data " + d + "/data --out run") == 1);
  std::ofstream(dir / "run.cfg") << "input_size = 64\nbatch_size = 1\niterations = 2\n"
                                  << "model.stem_channels = 3\nmodel.stage_channels = 4,4,4,4\n"
                                  << "model.decoder_channels = 4\nmodel.fpn_channels = 4\n";
  CHECK(run("train --config " + d + "/run.cfg --data " + d + "/missing --out run", dir) == 1);
  CHECK(run("train --config " + d + "/run.cfg --data " + d + "/data --out run", dir) == 0);
  const auto ckpt = dir / "run" / "checkpoints" / "ckpt_000002.bin";
  REQUIRE(fs::exists(ckpt));
  CHECK(fs::exists(dir / "run" / "train_log.jsonl"));

  const std::string c = "'" + ckpt.string() + "'";
  CHECK(run("eval --ckpt " + c + " --data " + d + "/data --out report.json --shuffles 2", dir) == 0);
  const auto report = read_json(dir / "report.json");
  CHECK(report["per_image"].size() == 2);
  CHECK(report["mean"].contains("r_MAE"));
  CHECK(run("eval --ckpt " + d + "/data/manifest.json --data " + d + "/data --out r.json", dir) == 1);
  // The report path is an existing directory: a runtime failure, not bad input.
  CHECK(run("eval --ckpt " + c + " --data " + d + "/data --out data --shuffles 2", dir) == 2);

  const auto id = report["per_image"][0]["id"].get<std::string>();
  CHECK(run("infer --ckpt " + c + " --image " + d + "/data/images/" + id + ".png --out pred", dir) == 0);
  CHECK(fs::exists(dir / "pred" / "rank" / (id + ".png")));
  CHECK(fs::exists(dir / "pred" / "instances" / (id + ".json")));
  CHECK(run("infer --ckpt " + c + " --image " + d + "/nothing.png --out pred", dir) == 1);

  CHECK(run("score --pred " + d + "/data --gt " + d + "/data --report self.json --ranks", dir) == 0);
  const auto self = read_json(dir / "self.json");
  CHECK(self["mean"]["MAE"] == 0.0);
  CHECK(self["mean"]["r_MAE"] == 0.0);
  CHECK(self["mean"]["CC"].is_null());
  CHECK(run("score --pred " + d + "/pred --gt " + d + "/data --report x.json", dir) == 1);
}

TEST_CASE("annotate rejects a missing session directory") {
  const auto dir = testing::scratch_dir("cli_annotate");
  const std::string d = "'" + dir.string() + "'";
  CHECK(run("annotate --sessions " + d + "/none --masks " + d + " --out ann") == 1);
}
