#include <gtest/gtest.h>

#include <filesystem>
#include <sstream>

#include "navseg/cli.hpp"

using namespace navseg;
namespace fs = std::filesystem;

namespace {

struct CliRun {
  int code;
  std::string out;
  std::string err;
};

CliRun run(std::vector<std::string> args) {
  std::ostringstream out, err;
  const int code = cli_dispatch(args, out, err);
  return {code, out.str(), err.str()};
}

class CliFiles : public ::testing::Test {
 protected:
  fs::path dir;
  void SetUp() override {
    dir = fs::temp_directory_path() /
          ("navseg_cli_" + std::string(::testing::UnitTest::GetInstance()->current_test_info()->name()));
    fs::remove_all(dir);
    fs::create_directories(dir);
  }
  void TearDown() override { fs::remove_all(dir); }
  std::string p(const std::string& name) const { return (dir / name).string(); }
};

}  // namespace

TEST(FrameSize, ParsesWidthFirst) {
  const auto f = parse_frame_size("512x256");
  EXPECT_EQ(f.width, 512u);
  EXPECT_EQ(f.height, 256u);
  for (const char* bad : {"512", "x256", "512x", "0x8", "ax8", "8x-8"}) {
    EXPECT_THROW(parse_frame_size(bad), CLI::ValidationError) << bad;
  }
}

TEST(Cli, CostMatchesReport) {
  const CliRun r = run({"cost", "--variant", "pruned", "--input", "512x256"});
  ASSERT_EQ(r.code, 0) << r.err;
  const auto expected = to_json(network_cost_report(table_spec(Variant::pruned), {1, 3, 256, 512}));
  EXPECT_EQ(nlohmann::json::parse(r.out), expected);
}

TEST(Cli, DescribeListsEveryBlock) {
  const CliRun r = run({"describe", "--variant", "full", "--json"});
  ASSERT_EQ(r.code, 0) << r.err;
  const auto j = nlohmann::json::parse(r.out);
  ASSERT_EQ(j["blocks"].size(), 30u);
  EXPECT_EQ(j["blocks"][6]["output"], "64x32x128");
  EXPECT_EQ(j["params"], count_params(build_network<float>(Variant::full)));
  const CliRun pruned = run({"describe", "--variant", "pruned"});
  EXPECT_NE(pruned.out.find("64x32x64"), std::string::npos);
}

TEST(Cli, DeterministicStdout) {
  for (const auto& args : std::vector<std::vector<std::string>>{{"describe"}, {"cost", "--variant", "pruned"}}) {
    EXPECT_EQ(run(args).out, run(args).out);
  }
}

TEST(Cli, UsageErrorsExitOne) {
  EXPECT_EQ(run({}).code, 1);
  EXPECT_EQ(run({"frobnicate"}).code, 1);
  EXPECT_EQ(run({"cost", "--no-such-flag"}).code, 1);
  EXPECT_EQ(run({"cost", "--variant", "tiny"}).code, 1);
  const CliRun bad = run({"cost", "--input", "512by256"});
  EXPECT_EQ(bad.code, 1);
  EXPECT_NE(bad.err.find("WxH"), std::string::npos);
  EXPECT_TRUE(bad.out.empty());
}

TEST(Cli, IndivisibleInputIsDataError) {
  const CliRun r = run({"bench", "--variant", "pruned", "--input", "100x60", "--iterations", "1", "--warmup", "0"});
  EXPECT_EQ(r.code, 2);
  EXPECT_NE(r.err.find("divisible by 8"), std::string::npos);
}

TEST_F(CliFiles, SynthIsReproducible) {
  const CliRun a = run({"synth", "--dataset", p("a"), "--count", "3", "--input", "16x8", "--seed", "5"});
  const CliRun b = run({"synth", "--dataset", p("b"), "--count", "3", "--input", "16x8", "--seed", "5"});
  ASSERT_EQ(a.code, 0) << a.err;
  EXPECT_EQ(a.out, b.out);
  for (const char* f : {"images/0002.ppm", "labels/0002.pgm"}) {
    EXPECT_EQ(detail::read_file(dir / "a" / f), detail::read_file(dir / "b" / f));
  }
}

TEST_F(CliFiles, PipelineFromSynthToInference) {
  ASSERT_EQ(run({"synth", "--dataset", p("ds"), "--count", "4", "--input", "32x16", "--seed", "2"}).code, 0);
  const CliRun t = run({"train", "--dataset", p("ds"), "--out", p("full.lseg"), "--steps", "2", "--batch", "2"});
  ASSERT_EQ(t.code, 0) << t.err;
  EXPECT_EQ(t.out.rfind("step,loss,accuracy\n", 0), 0u);

  const auto model_bytes = detail::read_file(p("full.lseg"));
  const CliRun pr = run({"prune", "--model", p("full.lseg"), "--out", p("pruned.lseg"), "--plan", p("plan.json")});
  ASSERT_EQ(pr.code, 0) << pr.err;
  const auto summary = nlohmann::json::parse(pr.out);
  EXPECT_EQ(summary["params_after"], count_params(build_network<float>(Variant::pruned)));
  EXPECT_LT(summary["file_bytes_after"].get<std::uint64_t>(), summary["file_bytes_before"].get<std::uint64_t>());
  EXPECT_EQ(detail::read_file(p("full.lseg")), model_bytes);
  EXPECT_TRUE(fs::exists(p("plan.json")));

  const CliRun ft = run({"finetune", "--model", p("pruned.lseg"), "--dataset", p("ds"), "--out", p("ft.lseg"),
                      "--steps", "1", "--batch", "2"});
  ASSERT_EQ(ft.code, 0) << ft.err;
  EXPECT_TRUE(nlohmann::json::parse(ft.out).contains("after"));

  const auto image_bytes = detail::read_file(dir / "ds/images/0000.ppm");
  const CliRun inf = run({"infer", "--model", p("ft.lseg"), "--image", p("ds/images/0000.ppm"), "--out", p("m.pgm")});
  ASSERT_EQ(inf.code, 0) << inf.err;
  const Mask m = load_mask(p("m.pgm"));
  EXPECT_EQ(m.height, 16u);
  EXPECT_EQ(m.width, 32u);
  EXPECT_EQ(detail::read_file(dir / "ds/images/0000.ppm"), image_bytes);

  const CliRun ev = run({"eval", "--model", p("ft.lseg"), "--dataset", p("ds")});
  ASSERT_EQ(ev.code, 0) << ev.err;
  EXPECT_EQ(nlohmann::json::parse(ev.out)["tp"].get<std::uint64_t>() +
                nlohmann::json::parse(ev.out)["fn"].get<std::uint64_t>() +
                nlohmann::json::parse(ev.out)["tn"].get<std::uint64_t>() +
                nlohmann::json::parse(ev.out)["fp"].get<std::uint64_t>(),
            4u * 32 * 16);

  EXPECT_EQ(run({"prune", "--model", p("pruned.lseg"), "--out", p("again.lseg")}).code, 2);
  EXPECT_EQ(run({"prune", "--model", p("full.lseg"), "--out", p("full.lseg")}).code, 1);
}

TEST_F(CliFiles, DataAndNumericFailures) {
  ASSERT_EQ(run({"synth", "--dataset", p("ds"), "--count", "2", "--input", "16x16"}).code, 0);
  EXPECT_EQ(run({"eval", "--model", p("missing.lseg"), "--dataset", p("ds")}).code, 2);
  detail::write_file(p("junk.lseg"), {'N', 'O', 'P', 'E', 0, 0, 0, 0, 0, 0, 0, 0, 0, 0});
  const CliRun junk = run({"eval", "--model", p("junk.lseg"), "--dataset", p("ds")});
  EXPECT_EQ(junk.code, 2);
  EXPECT_NE(junk.err.find("magic"), std::string::npos) << junk.err;
  const CliRun nan = run({"train", "--dataset", p("ds"), "--out", p("x.lseg"), "--steps", "20", "--lr", "1e6"});
  EXPECT_EQ(nan.code, 3) << nan.err;
}

TEST(Cli, BenchJsonArithmetic) {
  const CliRun r = run({"bench", "--variant", "pruned", "--input", "32x16", "--iterations", "2", "--warmup", "1", "--json"});
  ASSERT_EQ(r.code, 0) << r.err;
  const auto j = nlohmann::json::parse(r.out);
  EXPECT_NEAR(j["max_fps"].get<double>(), 1000.0 / j["mean_ms"].get<double>(), 1e-9);
  EXPECT_LE(j["p50_ms"].get<double>(), j["p95_ms"].get<double>());
}
