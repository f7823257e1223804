#include <gtest/gtest.h>

#include <sys/wait.h>

#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <string>

#include "clan_forge/export.hpp"

namespace fs = std::filesystem;

namespace {

struct Result {
  int code;
  std::string err;
};

const fs::path& scratch() {
  static const fs::path p = [] {
    fs::path d = fs::temp_directory_path() / "clan_forge_cli_test";
    fs::remove_all(d);
    fs::create_directories(d);
    return d;
  }();
  return p;
}

Result run(const std::string& args) {
  const fs::path err = scratch() / "stderr.txt";
  const std::string cmd = std::string(CLAN_FORGE_CLI) + " " + args + " > /dev/null 2> " + err.string();
  const int status = std::system(cmd.c_str());
  std::ifstream in(err);
  return {WEXITSTATUS(status), std::string(std::istreambuf_iterator<char>(in), {})};
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), {}};
}

void write(const fs::path& p, const std::string& s) { std::ofstream(p) << s; }

// Small data so CLI round trips stay fast.
const std::string kSmall =
    R"({"data": {"source_train": 8, "target_train": 8, "source_eval": 4, "target_eval": 4}, "eval_every": 2})";

}  // namespace

TEST(Cli, GenDataIsByteIdentical) {
  const fs::path cfg = scratch() / "small.json";
  write(cfg, kSmall);
  ASSERT_EQ(run("gen-data --seed 7 --config " + cfg.string() + " --out " + (scratch() / "d1").string()).code, 0);
  ASSERT_EQ(run("gen-data --seed 7 --config " + cfg.string() + " --out " + (scratch() / "d2").string()).code, 0);
  for (const char* f : {"manifest.json", "source_train.images.f64", "target_eval.labels.u8", "config.json"}) {
    EXPECT_EQ(slurp(scratch() / "d1" / f), slurp(scratch() / "d2" / f)) << f;
  }
}

TEST(Cli, TrainWritesArtifacts) {
  const fs::path cfg = scratch() / "small.json";
  write(cfg, kSmall);
  const fs::path out = scratch() / "train";
  const Result r = run("train --method clan --iters 3 --config " + cfg.string() + " --out " + out.string());
  ASSERT_EQ(r.code, 0) << r.err;
  for (const char* f : {"run.jsonl", "metrics.csv", "checkpoint.json", "checkpoint_init.json", "config.json",
                        "losses.svg", "ccd.svg"}) {
    EXPECT_TRUE(fs::exists(out / f)) << f;
  }
  const auto cfg_out = nlohmann::json::parse(slurp(out / "config.json"));
  EXPECT_EQ(cfg_out.at("iterations"), 3);
  EXPECT_EQ(cfg_out.at("data").at("source_train"), 8);
  const auto table = clan_forge::parse_csv(slurp(out / "metrics.csv"));
  EXPECT_EQ(table.rows.size(), 3u);  // iterations 0, 2, 3

  // eval and ccd on the produced checkpoints
  const Result e = run("eval --config " + cfg.string() + " --checkpoint " + (out / "checkpoint.json").string() +
                       " --out " + (scratch() / "eval").string());
  EXPECT_EQ(e.code, 0) << e.err;
  EXPECT_TRUE(fs::exists(scratch() / "eval" / "eval.json"));
  const Result c = run("ccd --config " + cfg.string() + " --checkpoint " + (out / "checkpoint.json").string() +
                       " --init " + (out / "checkpoint_init.json").string() + " --out " + (scratch() / "ccd").string());
  EXPECT_EQ(c.code, 0) << c.err;
  EXPECT_TRUE(fs::exists(scratch() / "ccd" / "ccd.json"));
}

TEST(Cli, BadConfigExitsTwoNamingKey) {
  const fs::path cfg = scratch() / "bad.json";
  write(cfg, R"({"lambda_locale": 3})");
  const Result r = run("train --config " + cfg.string() + " --out " + (scratch() / "bad").string());
  EXPECT_EQ(r.code, 2);
  EXPECT_NE(r.err.find("\"key\":\"lambda_locale\""), std::string::npos) << r.err;

  const Result v = run("train --epsilon -1 --iters 1 --out " + (scratch() / "bad2").string());
  EXPECT_EQ(v.code, 2);
  EXPECT_NE(v.err.find("\"key\":\"epsilon\""), std::string::npos) << v.err;

  const Result m = run("train --method dann --out " + (scratch() / "bad3").string());
  EXPECT_EQ(m.code, 2);
  EXPECT_NE(m.err.find("\"key\":\"method\""), std::string::npos) << m.err;
}

TEST(Cli, UnknownFlagIsAnError) {
  const Result r = run("train --no-such-flag --out " + (scratch() / "x").string());
  EXPECT_EQ(r.code, 2);
}

TEST(Cli, MissingDatasetIsRuntimeFailure) {
  const Result r = run("train --iters 1 --data /nonexistent/data --out " + (scratch() / "nodata").string());
  EXPECT_EQ(r.code, 1);
  EXPECT_NE(r.err.find("dataset not found"), std::string::npos) << r.err;
}

TEST(Cli, SweepPaperGridWritesEightRows) {
  const fs::path cfg = scratch() / "small.json";
  write(cfg, kSmall);
  const fs::path out = scratch() / "sweep";
  const Result r = run("sweep --grid paper --iters 2 --config " + cfg.string() + " --out " + out.string());
  ASSERT_EQ(r.code, 0) << r.err;
  const auto table = clan_forge::parse_csv(slurp(out / "sweep.csv"));
  EXPECT_EQ(table.rows.size(), 8u);
  EXPECT_TRUE(fs::exists(out / "sweep.svg"));
}

TEST(Cli, GradCheckExitCodes) {
  EXPECT_EQ(run("grad-check --seed 3").code, 0);
  const Result r = run("grad-check --inject-fault softmax");
  EXPECT_EQ(r.code, 1);
  EXPECT_NE(r.err.find("softmax"), std::string::npos);
}
