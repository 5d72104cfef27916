#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>
#include <sstream>

#include "cli.hpp"
#include "msholo/png_io.hpp"

using namespace msholo;
namespace fs = std::filesystem;

namespace {

fs::path scratch(const std::string& name) {
  const fs::path p = fs::temp_directory_path() / ("msholo_test_" + name);
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

int run(std::vector<std::string> args, std::string* out_text = nullptr, std::string* err_text = nullptr) {
  args.insert(args.begin(), "msholo");
  std::vector<const char*> argv;
  for (const auto& a : args) argv.push_back(a.c_str());
  std::ostringstream out, err;
  const int code = cli_main(static_cast<int>(argv.size()), argv.data(), out, err);
  if (out_text) *out_text = out.str();
  if (err_text) *err_text = err.str();
  return code;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

}  // namespace

TEST(Cli, ExitCodes) {
  std::string out, err;
  EXPECT_EQ(run({"selftest"}, &out), kExitOk);
  EXPECT_NE(out.find("gradient-finite-difference"), std::string::npos);
  EXPECT_EQ(run({"frobnicate"}), kExitUsage);
  EXPECT_EQ(run({"--config", "/nonexistent/c.json", "selftest"}, nullptr, &err), kExitIo);
  EXPECT_NE(err.find("code=io"), std::string::npos);
  EXPECT_EQ(run({"--set", "scene.path=/nonexistent/s.json", "render-target", "--output", scratch("rt").string()},
                nullptr, &err),
            kExitConfig);
  EXPECT_NE(err.find("code=config"), std::string::npos);
  EXPECT_EQ(run({"--set", "bogus.key=1", "selftest"}), kExitConfig);
}

TEST(Cli, MetricsOfIdenticalImages) {
  const fs::path dir = scratch("cli_metrics");
  std::vector<double> v(16 * 16);
  for (std::size_t i = 0; i < v.size(); ++i) v[i] = double(i % 7) / 7.0;
  write_png(dir / "a.png", IntensityImage({16, 16}, 1.0, v), 16);
  std::string out;
  EXPECT_EQ(run({"metrics", "--image", (dir / "a.png").string(), "--reference", (dir / "a.png").string()}, &out),
            kExitOk);
  EXPECT_NE(out.find("psnr"), std::string::npos);
  fs::remove_all(dir);
}

TEST(Cli, SpacingSweepCsvIsDeterministic) {
  const fs::path dir = scratch("cli_sweep");
  const std::vector<std::string> common{"--set", "slm.rows=16",     "--set", "slm.cols=16",
                                        "--set", "optimize.iterations=3", "--set",
                                        "sweep.spacings_rad_per_mm=[0,60]", "--set", "sweep.contrast_window=8",
                                        "--set", "sweep.grating_foci=1",    "--set", "sources.grid.rows=2",
                                        "--set", "sources.grid.cols=2"};
  auto a = common;
  a.insert(a.end(), {"analyze", "spacing", "--output", (dir / "a.csv").string()});
  auto b = common;
  b.insert(b.end(), {"--threads", "2", "analyze", "spacing", "--output", (dir / "b.csv").string()});
  ASSERT_EQ(run(a), kExitOk);
  ASSERT_EQ(run(b), kExitOk);
  const std::string ca = slurp(dir / "a.csv");
  EXPECT_EQ(ca, slurp(dir / "b.csv"));
  int lines = 0;
  for (char ch : ca) lines += ch == '\n';
  EXPECT_EQ(lines, 3);
  EXPECT_EQ(ca.rfind("spacing_rad_per_mm,psnr_db,ssim,contrast_nyquist,sources_in_region", 0), 0u);
  fs::remove_all(dir);
}

TEST(Cli, OptimizeWritesArtifactsAndResumes) {
  const fs::path dir = scratch("cli_opt");
  const std::vector<std::string> common{"--set", "slm.rows=16", "--set", "slm.cols=16", "--set",
                                        "optimize.iterations=4"};
  auto a = common;
  a.insert(a.end(), {"optimize", "--output", dir.string()});
  ASSERT_EQ(run(a), kExitOk);
  for (const char* f : {"history.csv", "metrics.csv", "config.json", "manifest.txt"})
    EXPECT_TRUE(fs::exists(dir / f)) << f;
  EXPECT_TRUE(fs::exists(dir / "checkpoint"));
  auto b = common;
  b.insert(b.end(), {"optimize", "--output", (dir / "more").string(), "--resume", (dir / "checkpoint").string()});
  EXPECT_EQ(run(b), kExitOk);
  std::string out;
  EXPECT_EQ(run({"eyebox", "--checkpoint", (dir / "checkpoint").string()}, &out), kExitOk);
  EXPECT_NE(out.find("peak_to_mean"), std::string::npos);
  fs::remove_all(dir);
}
