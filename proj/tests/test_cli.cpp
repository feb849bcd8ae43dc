#include <algorithm>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "all4one/cli.hpp"
#include "doctest.h"

using namespace all4one;

namespace {

namespace fs = std::filesystem;

struct Run {
  int code;
  std::string out;
  std::string err;
};

Run run(const std::vector<std::string>& args) {
  std::ostringstream out, err;
  const int code = cli_main(args, out, err);
  return {code, out.str(), err.str()};
}

std::string slurp(const fs::path& p) {
  std::ifstream is(p, std::ios::binary);
  std::ostringstream ss;
  ss << is.rdbuf();
  return ss.str();
}

constexpr const char* kTinyConfig = R"({
  "dataset": {"input_dim": 8, "samples": 64, "test_samples": 24, "num_classes": 4},
  "model": {"encoder_widths": [12], "projector_widths": [16, 8], "predictor_widths": [16, 8],
            "transformer_layers": 1, "transformer_heads": 2},
  "batch_size": 16, "steps": 6, "warmup_steps": 1, "k_neighbours": 3, "queue_capacity": 32
})";

fs::path scratch(const std::string& name) {
  const auto dir = fs::temp_directory_path() / ("all4one_cli_" + name);
  fs::remove_all(dir);
  fs::create_directories(dir);
  return dir;
}

fs::path write_file(const fs::path& p, const std::string& text) {
  std::ofstream(p) << text;
  return p;
}

}  // namespace

TEST_CASE("usage errors exit 1") {
  auto r = run({});
  CHECK(r.code == kExitUsage);
  CHECK(r.err.find("train") != std::string::npos);

  r = run({"frobnicate"});
  CHECK(r.code == kExitUsage);

  r = run({"train"});
  CHECK(r.code == kExitUsage);
  CHECK(r.err.find("--config") != std::string::npos);

  r = run({"train", "--config", "/nonexistent/cfg.json"});
  CHECK(r.code == kExitUsage);
  CHECK(r.err.find("/nonexistent/cfg.json") != std::string::npos);

  r = run({"eval", "--checkpoint", "/nonexistent/ckpt.bin"});
  CHECK(r.code == kExitUsage);
  CHECK(r.err.find("/nonexistent/ckpt.bin") != std::string::npos);

  r = run({"gradcheck", "--module", "nope"});
  CHECK(r.code == kExitUsage);
}

TEST_CASE("help exits 0") {
  const auto r = run({"--help"});
  CHECK(r.code == kExitOk);
  CHECK(r.out.find("gradcheck") != std::string::npos);
}

TEST_CASE("config errors exit 1") {
  const auto dir = scratch("badcfg");
  const auto cfg = write_file(dir / "cfg.json", R"({"unknown_key": 3})");
  const auto r = run({"train", "--config", cfg.string(), "--out", (dir / "run").string()});
  CHECK(r.code == kExitUsage);
  CHECK(r.err.find("unknown_key") != std::string::npos);
  fs::remove_all(dir);
}

TEST_CASE("gradcheck passes on a fresh build") {
  const auto r = run({"gradcheck"});
  CHECK(r.code == kExitOk);
  for (const char* module : {"neighbour", "centroid", "redundancy", "total", "mhsa", "encoder_layer",
                             "batchnorm", "train_step/psi"}) {
    CHECK(r.out.find(module) != std::string::npos);
  }
  CHECK(r.out.find("FAIL") == std::string::npos);

  const auto one = run({"gradcheck", "--module", "redundancy"});
  CHECK(one.code == kExitOk);
  CHECK(one.out.rfind("redundancy max_rel_error ", 0) == 0);
}

TEST_CASE("train, eval and export round trip") {
  const auto dir = scratch("roundtrip");
  const auto cfg = write_file(dir / "cfg.json", kTinyConfig);
  const auto out_dir = dir / "run";

  auto r = run({"train", "--config", cfg.string(), "--out", out_dir.string(), "--log-every", "2"});
  REQUIRE(r.code == kExitOk);
  CHECK(r.out.find("step 6 ") != std::string::npos);
  const auto ckpt = out_dir / "checkpoint.bin";
  REQUIRE(fs::exists(ckpt));
  REQUIRE(fs::exists(out_dir / "metrics.csv"));
  const auto ckpt_bytes = slurp(ckpt);

  r = run({"eval", "--checkpoint", ckpt.string()});
  CHECK(r.code == kExitOk);
  CHECK(r.out.find("\"knn_top1\"") != std::string::npos);
  CHECK(slurp(out_dir / "report.json") == r.out);
  CHECK(slurp(ckpt) == ckpt_bytes);

  r = run({"eval", "--checkpoint", ckpt.string(), "--dataset", R"({"input_dim": 8, "test_samples": 40, "samples": 64, "num_classes": 4})",
           "--report", (dir / "other.json").string(), "--projector-only", "--k", "3"});
  CHECK(r.code == kExitOk);
  CHECK(r.out.find("\"test_size\": 40") != std::string::npos);
  CHECK(r.out.find("\"k\": 3") != std::string::npos);
  CHECK(fs::exists(dir / "other.json"));

  r = run({"eval", "--checkpoint", ckpt.string(), "--dataset", R"({"input_dim": 5})"});
  CHECK(r.code == kExitUsage);

  const auto csv = dir / "emb.csv";
  r = run({"export", "--checkpoint", ckpt.string(), "--out", csv.string(), "--split", "test"});
  CHECK(r.code == kExitOk);
  const auto text = slurp(csv);
  CHECK(std::count(text.begin(), text.end(), '\n') == 25);
  r = run({"export", "--checkpoint", ckpt.string(), "--out", csv.string(), "--split", "test"});
  CHECK(slurp(csv) == text);

  r = run({"export", "--checkpoint", ckpt.string(), "--out", csv.string(), "--split", "validation"});
  CHECK(r.code == kExitUsage);
  fs::remove_all(dir);
}

TEST_CASE("numeric divergence exits 2") {
  const auto dir = scratch("diverge");
  std::string text = kTinyConfig;
  text.insert(text.rfind('}'), R"(, "base_lr": 1e300)");
  const auto cfg = write_file(dir / "cfg.json", text);
  const auto r = run({"train", "--config", cfg.string(), "--out", (dir / "run").string(), "--log-every", "0"});
  CHECK(r.code == kExitNumeric);
  CHECK(r.err.find("numeric failure") != std::string::npos);
  fs::remove_all(dir);
}
