#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <random>

#include "latchkit/training.hpp"
#include "test_util.hpp"

namespace latchkit {
namespace {

namespace fs = std::filesystem;
using testing::random_tensor;

fs::path temp_file(const std::string& name) { return fs::temp_directory_path() / ("latchkit_train_" + name); }

std::string read_bytes(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  return {std::istreambuf_iterator<char>(is), {}};
}

Tensor column(std::vector<real> v) {
  const int64_t n = int64_t(v.size());
  return Tensor::from({n, 1}, std::move(v));
}

TEST(SparseBce, HandCase) {
  // Logits giving BCE 0.1 on three below-threshold targets and 0.9 on one above.
  const real lo = real(std::log(std::exp(0.1) - 1.0));
  const real hi = real(-std::log(std::exp(0.9) - 1.0));
  Tensor logits = column({lo, lo, lo, hi});
  Tensor targets = column({0, 0, 0, 1});
  EXPECT_NEAR(sparse_bce(logits, targets).item(), 0.5, 1e-6);
  EXPECT_NEAR(ops::bce_with_logits(logits, targets).item(), 0.3, 1e-6);
}

TEST(SparseBce, AllAboveThresholdIsPlainMean) {
  std::mt19937_64 rng(3);
  Tensor logits = random_tensor({32, 4}, rng);
  Tensor targets = random_tensor({32, 4}, rng, 0.2, 1.0);
  EXPECT_NEAR(sparse_bce(logits, targets).item(), ops::bce_with_logits(logits, targets).item(), 1e-6);
  Tensor below = random_tensor({32, 4}, rng, 0.0, 0.19);
  EXPECT_NEAR(sparse_bce(logits, below).item(), ops::bce_with_logits(logits, below).item(), 1e-6);
}

TEST(SparseBce, MinimumAtTargets) {
  std::mt19937_64 rng(4);
  Tensor logits = random_tensor({16, 3}, rng, -3, 3);
  Tensor targets = ops::sigmoid(logits).detach();
  logits.set_requires_grad(true);
  Graph g;
  Tensor loss = sparse_bce(logits, targets);
  g.backward(loss);
  for (real gr : logits.grad()) EXPECT_NEAR(gr, 0.0, 1e-6);
  // Partition-averaged binary entropy.
  double hb = 0, ha = 0;
  int nb = 0, na = 0;
  for (real p : targets.data()) {
    const double h = -(p * std::log(double(p)) + (1 - p) * std::log(1.0 - p));
    if (p < 0.2) hb += h, ++nb;
    else ha += h, ++na;
  }
  ASSERT_GT(nb, 0);
  ASSERT_GT(na, 0);
  EXPECT_NEAR(loss.item(), 0.5 * hb / nb + 0.5 * ha / na, 1e-5);
}

TEST(SparseBce, NonNegative) {
  std::mt19937_64 rng(5);
  for (int trial = 0; trial < 50; ++trial) {
    Tensor logits = random_tensor({8, 2}, rng, -6, 6);
    Tensor targets = random_tensor({8, 2}, rng, 0, 1);
    EXPECT_GE(sparse_bce(logits, targets).item(), 0.0);
  }
  EXPECT_THROW(sparse_bce(Tensor::zeros({2, 1}), Tensor::zeros({3, 1})), ShapeError);
}

TEST(HeadLoss, DistancePerKind) {
  Tensor pred = column({1, 2});
  Tensor target = column({0, 0});
  EXPECT_NEAR(head_loss(ControlKind::kIntensity, pred, target).item(), 2.5, 1e-6);
  Tensor t2 = column({0.5, 0.5});
  EXPECT_NEAR(head_loss(ControlKind::kBeats, pred, t2).item(), ops::bce_with_logits(pred, t2).item(), 1e-7);
  EXPECT_NEAR(head_loss(ControlKind::kPitch, pred, target).item(), sparse_bce(pred, target).item(), 1e-7);
}

TEST(ConfigFile, ParsesSectionsAndTypes) {
  Config c = Config::parse("[train]\nlr = 0.001\nbatch = 8\n[guidance]\nbackend = latch\nflag = yes\n");
  EXPECT_DOUBLE_EQ(c.get("train.lr", 0.0), 0.001);
  EXPECT_EQ(c.get("train.batch", 1), 8);
  EXPECT_EQ(c.get("guidance.backend", std::string()), "latch");
  EXPECT_TRUE(c.get("guidance.flag", false));
  EXPECT_EQ(c.get("missing.key", 7), 7);
  EXPECT_THROW(c.get("guidance.backend", 1.0), InvalidArgument);
  EXPECT_THROW(c.get("train.lr", int64_t(0)), InvalidArgument);
  EXPECT_THROW(Config::load("/nonexistent/latchkit.ini"), Error);
  Config back = Config::parse(c.to_string());
  EXPECT_EQ(back.values(), c.values());
}

TEST(ConfigFile, TrainConfigOverridesAndValidates) {
  TrainConfig t = TrainConfig::from(Config::parse("[train]\nbatch = 4\nlr = 0.01\n[vae]\ncrop = 1024\n"));
  EXPECT_EQ(t.batch, 4);
  EXPECT_DOUBLE_EQ(t.adam.lr, 0.01);
  EXPECT_EQ(t.vae_crop, 1024);
  TrainConfig d = TrainConfig::from(Config());
  EXPECT_EQ(d.clips, 4096);
  EXPECT_EQ(d.batch, 16);
  EXPECT_DOUBLE_EQ(d.adam.lr, 3e-4);
  EXPECT_EQ(d.vae_steps, 5000);
  EXPECT_EQ(d.denoiser_steps, 20000);
  EXPECT_EQ(d.head_steps, 3000);
  EXPECT_THROW(TrainConfig::from(Config::parse("[vae]\ncrop = 100\n")), InvalidArgument);
  EXPECT_THROW(TrainConfig::from(Config::parse("[train]\nbatch = 0\n")), InvalidArgument);
}

TEST(Optimizer, FirstAdamStepMovesByLearningRate) {
  ParamSet ps;
  Tensor w = ps.add("w", Tensor::from({3}, {1, -2, 3}));
  Adam opt(ps, {.lr = 0.1});
  Graph g;
  g.backward(ops::sum(ops::square(w)));
  opt.step();
  // Bias-corrected first step is lr * g / (|g| + eps).
  EXPECT_NEAR(w.data()[0], 0.9, 1e-6);
  EXPECT_NEAR(w.data()[1], -1.9, 1e-6);
  EXPECT_NEAR(w.data()[2], 2.9, 1e-6);
  EXPECT_FALSE(w.has_grad());
  EXPECT_EQ(opt.steps(), 1);
}

TEST(Curves, CsvFormat) {
  const auto path = temp_file("curve.csv").string();
  write_curve_csv(path, {{0, 1.5}, {10, 0.25}});
  EXPECT_EQ(read_bytes(path), "step,loss\n0,1.5\n10,0.25\n");
  fs::remove(path);
}

TEST(Spectra, SineLandsInItsBin) {
  const int n = 256;
  std::vector<real> w(2048);
  for (size_t i = 0; i < w.size(); ++i) w[i] = real(std::sin(2 * M_PI * 20.0 * double(i) / n));
  Tensor mag = stft_magnitude(Tensor::from({2048}, w), n, n / 4);
  EXPECT_EQ(mag.shape(), (Shape{1 + (2048 - n) / (n / 4), n / 2 + 1}));
  for (int64_t f = 0; f < mag.dim(0); ++f) {
    int best = 0;
    auto row = mag.data().subspan(size_t(f * mag.dim(1)), size_t(mag.dim(1)));
    for (int k = 1; k < mag.dim(1); ++k)
      if (row[size_t(k)] > row[size_t(best)]) best = k;
    EXPECT_EQ(best, 20);
  }
  EXPECT_NEAR(reconstruction_loss(Tensor::from({2048}, w), Tensor::from({2048}, w)).item(), 0.0, 1e-6);
  EXPECT_GT(snr_db(w, w), 200.0);
}

// A fixed batch trained for 100 steps: the loss falls over every 20-step window.
TEST(Smoke, AutoencoderOverfitsFixedBatch) {
  Vae vae(0);
  Adam opt(vae.params(), {.lr = 1e-3});
  std::vector<real> x;
  for (int c = 0; c < 2; ++c) {
    Clip clip = synth(dataset_spec(9, c));
    x.insert(x.end(), clip.samples.begin(), clip.samples.begin() + 1024);
  }
  std::vector<double> window;
  double prev = 1e30;
  for (int step = 0; step < 100; ++step) {
    Graph g;
    double total = 0;
    Tensor loss;
    for (int c = 0; c < 2; ++c) {
      Tensor wave = Tensor::from({1024}, std::vector<real>(x.begin() + c * 1024, x.begin() + (c + 1) * 1024));
      Tensor l = reconstruction_loss(vae.decode_raw(vae.encode_raw(wave)), wave);
      loss = loss.defined() ? ops::add(loss, l) : l;
    }
    total = loss.item();
    g.backward(loss);
    opt.step();
    window.push_back(total);
    if (window.size() == 20) {
      double m = 0;
      for (double v : window) m += v;
      m /= 20;
      EXPECT_LT(m, prev) << "window ending at step " << step;
      prev = m;
      window.clear();
    }
  }
}

TEST(Trajectories, BackwardHeadNeedsTrajectories) {
  TrainConfig cfg;
  cfg.head_steps = 1;
  try {
    train_latch(ControlKind::kBeats, NoiseMode::kBackward, nullptr, nullptr, cfg);
    FAIL() << "expected a missing prerequisite";
  } catch (const MissingPrerequisite& e) {
    EXPECT_EQ(e.phase(), "trajectories");
  }
  EXPECT_THROW(read_trajectory_dataset("/nonexistent/traj.ltj"), MissingPrerequisite);
}

TEST(Trajectories, OneRunEveryStepSharesOneTarget) {
  Vae vae(1);
  vae.set_trained(true);
  Denoiser den(2);
  NoiseSchedule sched(100);
  TrajectoryDataset ds = build_trajectory_dataset(den, vae, sched, 1, 1, 5, 1.0);
  ASSERT_EQ(ds.trajectories.size(), 1u);
  EXPECT_EQ(ds.records(), 100u);
  const auto& tr = ds.trajectories[0];
  for (int k = 0; k < 100; ++k) {
    EXPECT_EQ(tr.records[size_t(k)].step, k);
    EXPECT_DOUBLE_EQ(tr.records[size_t(k)].t, sched.time(k));
  }
  for (auto kind : {ControlKind::kIntensity, ControlKind::kPitch, ControlKind::kBeats})
    EXPECT_EQ(tr.targets.at(kind).shape(), (Shape{kFrames, kind_dims(kind)}));

  // Targets are the features of the run's own decoded output.
  SampleOptions opts;
  opts.class_id = tr.class_id;
  opts.cfg_scale = 1.0;
  opts.seed = tr.seed;
  Tensor z0 = sample(den, sched, {kFrames, kLatentChannels}, opts).z0;
  Tensor beats = extract_beats(vae.decode(z0));
  EXPECT_EQ(beats.data().size(), tr.targets.at(ControlKind::kBeats).data().size());
  for (size_t i = 0; i < beats.data().size(); ++i)
    EXPECT_EQ(beats.data()[i], tr.targets.at(ControlKind::kBeats).data()[i]);

  const auto path = temp_file("traj.ltj").string();
  write_trajectory_dataset(path, ds);
  TrajectoryDataset back = read_trajectory_dataset(path);
  EXPECT_EQ(back.steps, 100);
  EXPECT_EQ(back.records(), 100u);
  const auto& r0 = back.trajectories[0].records[37];
  for (size_t i = 0; i < r0.z_t.data().size(); ++i) {
    ASSERT_EQ(r0.z_t.data()[i], tr.records[37].z_t.data()[i]);
    ASSERT_EQ(r0.z0_hat.data()[i], tr.records[37].z0_hat.data()[i]);
  }
  fs::remove(path);
}

TEST(Determinism, AutoencoderTrainingIsReproducible) {
  TrainConfig cfg;
  cfg.clips = 8;
  cfg.vae_steps = 3;
  cfg.batch = 2;
  cfg.vae_crop = 1024;
  const auto a = temp_file("vae_a.lch1").string(), b = temp_file("vae_b.lch1").string();
  train_vae(cfg).save(a);
  train_vae(cfg).save(b);
  EXPECT_EQ(read_bytes(a), read_bytes(b));
  cfg.seed = 1;
  const auto c = temp_file("vae_c.lch1").string();
  train_vae(cfg).save(c);
  EXPECT_NE(read_bytes(a), read_bytes(c));
  for (const auto& p : {a, b, c}) fs::remove(p);
}

}  // namespace
}  // namespace latchkit
