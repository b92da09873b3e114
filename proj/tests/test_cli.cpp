#include <gtest/gtest.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <sys/wait.h>
#include <unistd.h>

#include <nlohmann/json.hpp>

namespace fs = std::filesystem;
using json = nlohmann::json;

namespace {

const std::string kCli = UNIMATCH_CLI_PATH;
const std::string kQuick = std::string(UNIMATCH_SOURCE_DIR) + "/configs/quick.json";

fs::path scratch(const std::string& name) {
  const fs::path p = fs::temp_directory_path() / ("unimatch_cli_" + name + "_" + std::to_string(::getpid()));
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

int run(const std::string& args, const fs::path& log = "/dev/null") {
  const std::string cmd = kCli + " " + args + " > " + log.string() + " 2>&1";
  const int st = std::system(cmd.c_str());
  return WIFEXITED(st) ? WEXITSTATUS(st) : -1;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

}  // namespace

TEST(CliSplit, DefaultSyntheticSixteenthHasThirteenLabeled) {
  const auto dir = scratch("split");
  ASSERT_EQ(run("split --ratio 1/16 --seed 3 --out " + (dir / "a.json").string()), 0);
  ASSERT_EQ(run("split --ratio 1/16 --seed 3 --out " + (dir / "b.json").string()), 0);
  const auto m = json::parse(slurp(dir / "a.json"));
  EXPECT_EQ(m.at("labeled_ids").size(), 13u);
  EXPECT_EQ(m.at("unlabeled_ids").size(), 187u);
  EXPECT_EQ(slurp(dir / "a.json"), slurp(dir / "b.json"));
  fs::remove_all(dir);
}

TEST(CliExitCodes, ConfigurationErrorsExitTwo) {
  EXPECT_EQ(run("split --ratio 1/1000"), 2);
  EXPECT_EQ(run("train --set no.such.key=1"), 2);
  EXPECT_EQ(run("train --set tau=2"), 2);
  EXPECT_EQ(run("train --config /nonexistent/config.json"), 2);
  EXPECT_EQ(run("frobnicate"), 2);
  EXPECT_EQ(run("ablate not_an_axis --config " + kQuick), 2);
  EXPECT_EQ(run("ablate variant z --config " + kQuick), 2);
}

TEST(CliExitCodes, HelpExitsZero) { EXPECT_EQ(run("--help"), 0); }

TEST(CliTrain, RunsEvaluatesAndIsReproducible) {
  const auto dir = scratch("train");
  ASSERT_EQ(run("train --deterministic --config " + kQuick + " --out " + (dir / "a").string()), 0);
  ASSERT_EQ(run("train --deterministic --config " + kQuick + " --out " + (dir / "b").string()), 0);
  EXPECT_EQ(slurp(dir / "a" / "metrics.jsonl"), slurp(dir / "b" / "metrics.jsonl"));
  EXPECT_TRUE(fs::exists(dir / "a" / "config.json"));

  const auto out = dir / "eval.txt";
  ASSERT_EQ(run("eval " + (dir / "a" / "teacher.ckpt").string(), out), 0);
  EXPECT_NE(slurp(out).find("mean"), std::string::npos);
  const auto log = slurp(dir / "a" / "metrics.jsonl");
  EXPECT_NE(log.find("\"eval_checkpoint\""), std::string::npos);
  fs::remove_all(dir);
}

TEST(CliTrain, NumericalAbortExitsThree) {
  const auto dir = scratch("nan");
  EXPECT_EQ(run("train --config " + kQuick + " --set lr=1e30 --out " + (dir / "r").string()), 3);
  EXPECT_TRUE(fs::exists(dir / "r" / "nan_dump.json"));
  fs::remove_all(dir);
}

TEST(CliTrain, RunRootFromEnvironment) {
  const auto dir = scratch("root");
  ::setenv("UNIMATCH_RUN_ROOT", dir.c_str(), 1);
  ASSERT_EQ(run("train --config " + kQuick + " --set epochs=1"), 0);
  ::unsetenv("UNIMATCH_RUN_ROOT");
  std::vector<fs::path> runs(fs::directory_iterator(dir), fs::directory_iterator{});
  ASSERT_EQ(runs.size(), 1u);
  const auto name = runs[0].filename().string();
  EXPECT_EQ(name.size(), 16u + 1u + 16u);  // <hash>-<YYYYMMDDTHHMMSSZ>
  const auto snap = json::parse(slurp(runs[0] / "config.json"));
  EXPECT_EQ(snap.at("config_hash").get<std::string>(), name.substr(0, 16));
  fs::remove_all(dir);
}

TEST(CliAblate, OneRowPerValue) {
  const auto dir = scratch("ablate");
  ASSERT_EQ(run("ablate tau 0,0.9 --config " + kQuick + " --set epochs=1 --out " + (dir / "t").string()), 0);
  const auto s = json::parse(slurp(dir / "t" / "summary.json"));
  ASSERT_EQ(s.at("rows").size(), 2u);
  EXPECT_EQ(s.at("rows")[0].at("tau"), "0");
  EXPECT_EQ(s.at("rows")[1].at("tau"), "0.9");
  EXPECT_TRUE(fs::exists(dir / "t" / "summary.md"));
  fs::remove_all(dir);
}
