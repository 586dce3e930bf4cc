#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <random>

#include "latchkit/error.hpp"
#include "latchkit/eval.hpp"
#include "latchkit/pipeline.hpp"

namespace latchkit {
namespace {

namespace fs = std::filesystem;

TEST(Eval, FrechetOfIdenticalSetsIsZero) {
  std::mt19937_64 rng(3);
  std::normal_distribution<double> n;
  std::vector<std::vector<double>> a(40, std::vector<double>(6));
  for (auto& v : a)
    for (auto& x : v) x = n(rng);
  EXPECT_NEAR(frechet_distance(a, a), 0.0, 1e-6);
}

TEST(Eval, FrechetOfShiftedSetIsSquaredShift) {
  std::mt19937_64 rng(4);
  std::normal_distribution<double> n;
  std::vector<std::vector<double>> a(50, std::vector<double>(4)), b;
  for (auto& v : a)
    for (auto& x : v) x = n(rng);
  for (auto v : a) {
    for (auto& x : v) x += 0.5;
    b.push_back(v);
  }
  EXPECT_NEAR(frechet_distance(a, b), 4 * 0.25, 1e-6);
}

TEST(Eval, FrechetNeedsTwoVectors) {
  std::vector<std::vector<double>> one{{1.0, 2.0}};
  EXPECT_THROW(frechet_distance(one, one), InvalidArgument);
}

TEST(Eval, SelfAlignment) {
  Clip clip = synth(dataset_spec(1234, 3));
  Tensor wave = Tensor::from({kSamples}, clip.samples);
  std::vector<ControlTrack> targets;
  for (auto k : {ControlKind::kIntensity, ControlKind::kPitch, ControlKind::kBeats})
    targets.push_back(extract_track(k, wave));
  auto d = alignment(wave, targets);
  EXPECT_EQ(d.at(ControlKind::kIntensity), 0.0);
  // BCE of a probability track against itself is its mean entropy.
  EXPECT_GE(d.at(ControlKind::kBeats), 0.0);
  EXPECT_LT(d.at(ControlKind::kBeats), 0.7);
}

TEST(Eval, BandEnergiesOfSilenceAreFinite) {
  std::vector<real> silent(kSamples, 0);
  auto e = band_energies(silent);
  ASSERT_EQ(e.size(), size_t(kBands));
  for (double x : e) EXPECT_TRUE(std::isfinite(x));
}

TEST(Eval, SignTest) {
  EXPECT_NEAR(sign_test_p(5, 5), 1.0 / 32, 1e-12);
  EXPECT_NEAR(sign_test_p(0, 7), 1.0, 1e-12);
  EXPECT_NEAR(sign_test_p(4, 5), 6.0 / 32, 1e-12);
  EXPECT_EQ(median({3, 1, 2}), 2.0);
  EXPECT_EQ(median({4, 1, 2, 3}), 2.5);
}

class PipelineSmoke : public ::testing::Test {
 protected:
  static void SetUpTestSuite() {
    root_ = fs::temp_directory_path() / "latchkit_pipeline_smoke";
    fs::remove_all(root_);
    fs::create_directories(root_);
    std::ofstream(root_ / "tiny.ini") << "[paths]\nworkdir = w\n"
                                         "[data]\nclips = 6\nheldout = 4\n"
                                         "[train]\nbatch = 2\n"
                                         "[vae]\nsteps = 2\ncrop = 1024\nlr = 2e-3\n"
                                         "[denoiser]\nsteps = 2\ncrop_frames = 16\n"
                                         "[heads]\nsteps = 2\ncrop_frames = 16\n"
                                         "[sampler]\nsteps = 8\n";
  }
  static void TearDownTestSuite() { fs::remove_all(root_); }
  static fs::path root_;
};
fs::path PipelineSmoke::root_;

TEST_F(PipelineSmoke, PhasesGenerateEvaluate) {
  Workspace ws = Workspace::open((root_ / "tiny.ini").string());
  EXPECT_EQ(fs::path(ws.dir()), root_ / "w");
  EXPECT_THROW(ws.train_denoiser(), MissingPrerequisite);

  ws.train_vae();
  ws.train_denoiser();
  EXPECT_TRUE(fs::exists(ws.path("vae_curve.csv")));
  EXPECT_TRUE(fs::exists(ws.path("denoiser_curve.csv")));
  try {
    ws.load_latch(ControlKind::kIntensity, NoiseMode::kClean);
    FAIL() << "expected MissingPrerequisite";
  } catch (const MissingPrerequisite& e) {
    EXPECT_NE(std::string(e.what()).find("train latch"), std::string::npos) << e.what();
  }
  ws.train_latch(ControlKind::kIntensity, NoiseMode::kClean);

  GenerateOptions o;
  o.kinds = {ControlKind::kIntensity};
  o.latch_mode = NoiseMode::kClean;
  o.runs = 2;
  o.seed = 5;
  o.out = (root_ / "run").string();
  auto recs = generate(ws, o);
  ASSERT_EQ(recs.size(), 2u);
  for (const auto& r : recs) {
    EXPECT_EQ(r.seed, 5u + uint64_t(r.run));
    EXPECT_EQ(r.reference, ws.heldout_start() + r.run);
    EXPECT_EQ(r.guided_steps, 2);  // 20% of 8 steps, rounded up
    EXPECT_EQ(r.targets.size(), 3u);
  }
  for (const char* f : {"config.ini", "manifest.ini", "runs.csv", "guidance.csv", "run_000.wav", "run_001_targets.csv"})
    EXPECT_TRUE(fs::exists(root_ / "run" / f)) << f;

  EvalReport rep = evaluate(o.out, 4);
  ASSERT_EQ(rep.rows.size(), 2u);
  EXPECT_TRUE(std::isfinite(rep.spectral_fd));
  EXPECT_GE(rep.spectral_fd, 0.0);
  EXPECT_TRUE(fs::exists(root_ / "run" / "report.csv"));
  EXPECT_THROW(evaluate((root_ / "nowhere").string()), MissingPrerequisite);
}

}  // namespace
}  // namespace latchkit
