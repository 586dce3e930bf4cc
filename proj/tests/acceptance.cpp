// End-to-end acceptance run: trains the desk-scale stack, then prints one
// PASS/FAIL line per criterion. Exit status is nonzero if any criterion fails.

#include <CLI11.hpp>

#include <chrono>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <iostream>

#include "latchkit/checks.hpp"
#include "latchkit/eval.hpp"
#include "latchkit/pipeline.hpp"

namespace fs = std::filesystem;
using namespace latchkit;

namespace {

double now() {
  static const auto t0 = std::chrono::steady_clock::now();
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

void note(const std::string& msg) { std::fprintf(stderr, "[%7.1fs] %s\n", now(), msg.c_str()); }

std::string fmt(const char* f, double a = 0, double b = 0, double c = 0, double d = 0) {
  char buf[256];
  std::snprintf(buf, sizeof buf, f, a, b, c, d);
  return buf;
}

template <class F>
CheckResult run(int id, std::string name, F&& body) {
  CheckResult r;
  r.id = id;
  r.name = std::move(name);
  const double start = now();
  try {
    body(r);
  } catch (const std::exception& e) {
    r.pass = false;
    r.detail = std::string("error: ") + e.what();
  }
  r.seconds = now() - start;
  return r;
}

void train_stack(const Workspace& ws, int trajectories, int stride) {
  note("training autoencoder");
  ws.train_vae();
  note("training denoiser");
  ws.train_denoiser();
  note("recording trajectories");
  ws.build_trajectories(trajectories, stride, 0);
  for (auto k : {ControlKind::kBeats, ControlKind::kIntensity}) {
    note(std::string("training backward head ") + kind_name(k));
    ws.train_latch(k, NoiseMode::kBackward);
  }
  for (auto k : {ControlKind::kIntensity, ControlKind::kPitch, ControlKind::kBeats}) {
    note(std::string("training clean head ") + kind_name(k));
    ws.train_latch(k, NoiseMode::kClean);
  }
}

std::vector<double> distances(const std::vector<RunRecord>& recs, ControlKind kind) {
  std::vector<double> out;
  for (const auto& r : recs)
    out.push_back(alignment(Tensor::from({int64_t(r.wave.size())}, r.wave), r.targets).at(kind));
  return out;
}

struct Paired {
  double guided = 0, unguided = 0;
  int wins = 0, trials = 0;
  double p = 1;
};

Paired pair_up(const std::vector<double>& g, const std::vector<double>& u) {
  Paired s;
  s.guided = median(g);
  s.unguided = median(u);
  for (size_t i = 0; i < g.size(); ++i) {
    if (g[i] == u[i]) continue;
    ++s.trials;
    if (g[i] < u[i]) ++s.wins;
  }
  s.p = s.trials ? sign_test_p(s.wins, s.trials) : 1.0;
  return s;
}

std::string describe(const char* what, const Paired& s) {
  return std::string(what) +
         fmt(" median %.4f guided vs %.4f unguided (ratio %.3f)", s.guided, s.unguided, s.guided / s.unguided) +
         fmt(", %.0f/%.0f wins, sign test p=%.2g", s.wins, s.trials, s.p);
}

}  // namespace

int main(int argc, char** argv) {
  now();
  CLI::App app{"latchkit acceptance run"};
  std::string config, dir = "acceptance", cli;
  bool reuse = false;
  int runs = 32, trajectories = 32, stride = 5, profile_runs = 4, heldout = 256;
  uint64_t seed = 1000;
  app.add_option("--config", config, "Stack configuration")->required();
  app.add_option("--dir", dir, "Scratch directory")->capture_default_str();
  app.add_option("--cli", cli, "latchkit executable for the selftest criterion");
  app.add_flag("--reuse", reuse, "Reuse checkpoints already present in --dir");
  app.add_option("--runs", runs, "Paired runs for the steering criteria")->capture_default_str();
  app.add_option("--seed", seed, "Base seed for generation")->capture_default_str();
  CLI11_PARSE(app, argc, argv);

  std::vector<CheckResult> results;
  auto report = [&](CheckResult r) {
    std::cout << format_result(r) << std::endl;
    results.push_back(std::move(r));
  };

  report(check_autodiff());
  report(check_v_identity());
  report(check_sampler_oracle());
  report(check_neutrality());

  Config cfg = Config::load(config);
  cfg.set("paths.workdir", fs::absolute(fs::path(dir) / "work").string());
  cfg.set("data.heldout", std::to_string(heldout));
  Workspace ws(cfg);
  bool trained = true;
  try {
    if (!reuse || !fs::exists(ws.latch_path(ControlKind::kBeats, NoiseMode::kClean))) {
      fs::remove_all(ws.dir());
      train_stack(ws, trajectories, stride);
    }
  } catch (const std::exception& e) {
    trained = false;
    note(std::string("training failed: ") + e.what());
  }

  std::vector<RunRecord> unguided, guided_beats;
  if (trained) {
    GenerateOptions base;
    base.runs = runs;
    base.seed = seed;
    base.write_files = true;
    note("unguided runs");
    base.out = (fs::path(dir) / "unguided").string();
    unguided = generate(ws, base);
  }

  report(run(5, "steering", [&](CheckResult& r) {
    if (!trained) throw std::runtime_error("stack not trained");
    GenerateOptions o;
    o.backend = Backend::kLatch;
    o.kinds = {ControlKind::kBeats};
    o.latch_mode = NoiseMode::kBackward;
    o.runs = runs;
    o.seed = seed;
    o.out = (fs::path(dir) / "beats").string();
    note("guided beats runs");
    guided_beats = generate(ws, o);
    const Paired s = pair_up(distances(guided_beats, ControlKind::kBeats), distances(unguided, ControlKind::kBeats));
    r.pass = s.guided <= 0.6 * s.unguided && s.p < 0.05;
    r.detail = describe("beats BCE", s) + "; needs ratio <= 0.6 and p < 0.05";
  }));

  report(run(6, "multi-control", [&](CheckResult& r) {
    if (!trained) throw std::runtime_error("stack not trained");
    GenerateOptions o;
    o.backend = Backend::kLatch;
    o.kinds = {ControlKind::kBeats, ControlKind::kIntensity};
    o.latch_mode = NoiseMode::kBackward;
    o.runs = runs;
    o.seed = seed;
    o.out = (fs::path(dir) / "beats_intensity").string();
    note("guided beats+intensity runs");
    auto recs = generate(ws, o);
    const Paired b = pair_up(distances(recs, ControlKind::kBeats), distances(unguided, ControlKind::kBeats));
    const Paired i =
        pair_up(distances(recs, ControlKind::kIntensity), distances(unguided, ControlKind::kIntensity));
    r.pass = b.guided < b.unguided && i.guided < i.unguided;
    r.detail = describe("beats BCE", b) + "; " + describe("intensity MSE", i);
  }));

  report(run(7, "compute", [&](CheckResult& r) {
    if (!trained) throw std::runtime_error("stack not trained");
    note("profiling");
    auto rows = profile(ws, {Backend::kLatch, Backend::kEndToEnd}, {ControlKind::kBeats}, profile_runs, seed);
    write_profile_csv((fs::path(dir) / "profile.csv").string(), rows);
    const ProfileRow& l = rows[0];
    const ProfileRow& e = rows[1];
    r.pass = l.step_seconds <= 0.5 * e.step_seconds && l.peak_bytes < e.peak_bytes;
    r.detail = fmt("guided step %.4fs latch vs %.4fs end-to-end (ratio %.3f), ", l.step_seconds, e.step_seconds,
                   l.step_seconds / e.step_seconds) +
               fmt("peak %.1f MB vs %.1f MB", l.peak_bytes / 1e6, e.peak_bytes / 1e6);
  }));

  report(run(8, "fidelity", [&](CheckResult& r) {
    if (!trained) throw std::runtime_error("stack not trained");
    note("scoring heads on held-out clips");
    Vae vae = ws.load_vae();
    LatentSet held = encode_dataset(vae, ws.train().data_seed, ws.heldout_start(), heldout, true);
    LatentSet train = encode_dataset(vae, ws.train().data_seed, 0, ws.train().clips, true);
    const double inten = evaluate_latch(ws.load_latch(ControlKind::kIntensity, NoiseMode::kClean), held);
    const double inten_base = constant_baseline(ControlKind::kIntensity, train, held);
    r.pass = inten < 2.0;
    r.detail = fmt("intensity MSE %.3f dB^2 (< 2.0; constant %.2f)", inten, inten_base);
    for (auto k : {ControlKind::kBeats, ControlKind::kPitch}) {
      const double loss = evaluate_latch(ws.load_latch(k, NoiseMode::kClean), held);
      const double base = constant_baseline(k, train, held);
      r.pass = r.pass && loss < base;
      r.detail += std::string(", ") + kind_name(k) + fmt(" %.4f vs constant %.4f", loss, base);
    }
    r.detail += fmt(", %.0f held-out clips", double(heldout));
  }));

  report(check_recipes());

  report(run(10, "determinism", [&](CheckResult& r) {
    if (cli.empty()) throw std::runtime_error("no --cli executable given");
    const std::string log = (fs::path(dir) / "selftest.log").string();
    const int rc = std::system(("\"" + cli + "\" selftest > \"" + log + "\" 2>&1").c_str());
    r.pass = rc == 0;
    r.detail = std::string("latchkit selftest ") + (rc == 0 ? "passed" : "failed") + ", log " + log;
  }));

  int failed = 0;
  for (const auto& r : results) failed += !r.pass;
  std::cout << "acceptance: " << results.size() - failed << "/" << results.size() << " criteria passed" << std::endl;
  return failed ? 1 : 0;
}
