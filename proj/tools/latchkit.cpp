#include <CLI11.hpp>

#include <cstdio>
#include <filesystem>
#include <iostream>
#include <sstream>
#include <unistd.h>

#include "latchkit/checks.hpp"
#include "latchkit/error.hpp"
#include "latchkit/pipeline.hpp"

namespace fs = std::filesystem;
using namespace latchkit;

namespace {

enum Exit { kOk = 0, kUsage = 1, kMissing = 2, kNumeric = 3 };

std::vector<ControlKind> parse_kinds(const std::vector<std::string>& names) {
  std::vector<ControlKind> out;
  for (const auto& n : names) {
    std::stringstream ss(n);
    std::string item;
    while (std::getline(ss, item, ','))
      if (!item.empty()) out.push_back(parse_kind(item));
  }
  return out;
}

Progress printer() {
  return [](const std::string& phase, int step, double loss) {
    std::fprintf(stderr, "%s step %d loss %.5f\n", phase.c_str(), step, loss);
  };
}

struct Args {
  std::string config = "latchkit.ini";
  std::optional<uint64_t> seed;
  int jobs = 1;
  std::string backend = "latch";
  std::string profile_backends = "latch,end_to_end";
  std::vector<std::string> kinds;
  std::string mode = "backward";
  std::optional<double> mask_fraction;
  std::string out;
  std::string phase;
  int n = 32, stride = 5, runs = 8, heldout = 64;
  std::string targets;
};

Workspace open_workspace(const Args& a) {
  if (!fs::exists(a.config)) throw InvalidArgument("config file not found: " + a.config);
  return Workspace::open(a.config);
}

int run_train(const Args& a) {
  Workspace ws = open_workspace(a);
  if (a.phase == "vae") {
    ws.train_vae(printer());
  } else if (a.phase == "denoiser") {
    ws.train_denoiser(printer());
  } else if (a.phase == "latch" || a.phase == "readout") {
    auto kinds = parse_kinds(a.kinds);
    if (kinds.empty()) throw InvalidArgument("train " + a.phase + " needs --kind");
    for (auto k : kinds) {
      if (a.phase == "latch") ws.train_latch(k, parse_mode(a.mode), printer());
      else ws.train_readout(k, printer());
    }
  } else {
    throw InvalidArgument("unknown training phase '" + a.phase + "' (vae, denoiser, latch, readout)");
  }
  std::printf("%s: written to %s\n", a.phase.c_str(), ws.dir().c_str());
  return kOk;
}

int run_trajectories(const Args& a) {
  Workspace ws = open_workspace(a);
  ws.build_trajectories(a.n, a.stride, a.seed.value_or(0));
  std::printf("trajectories: %d runs, stride %d -> %s\n", a.n, a.stride, ws.trajectories_path().c_str());
  return kOk;
}

GenerateOptions generate_options(const Args& a) {
  GenerateOptions o;
  o.backend = parse_backend(a.backend);
  o.kinds = parse_kinds(a.kinds);
  o.latch_mode = parse_mode(a.mode);
  o.runs = a.runs;
  o.seed = a.seed.value_or(0);
  o.jobs = a.jobs;
  o.mask_fraction = a.mask_fraction;
  o.targets_csv = a.targets;
  return o;
}

int run_generate(const Args& a) {
  if (a.out.empty()) throw InvalidArgument("generate needs --out");
  Workspace ws = open_workspace(a);
  GenerateOptions o = generate_options(a);
  o.out = a.out;
  auto recs = generate(ws, o);
  for (const auto& r : recs)
    std::printf("run %03d class %d seed %llu guided_steps %d %.2fs\n", r.run, r.class_id,
                static_cast<unsigned long long>(r.seed), r.guided_steps, r.seconds);
  std::printf("generate: %zu runs -> %s\n", recs.size(), a.out.c_str());
  return kOk;
}

int run_evaluate(const Args& a) {
  if (a.out.empty()) throw InvalidArgument("evaluate needs --out (a run directory)");
  EvalReport rep = evaluate(a.out, a.heldout);
  for (const auto& [k, v] : rep.median_alignment) std::printf("median %s distance %.5f\n", kind_name(k), v);
  std::printf("spectral FD %.4f\nreport: %s\n", rep.spectral_fd, (fs::path(a.out) / "report.csv").c_str());
  return kOk;
}

int run_profile(const Args& a) {
  Workspace ws = open_workspace(a);
  std::vector<Backend> backends;
  {
    std::stringstream ss(a.profile_backends);
    std::string item;
    while (std::getline(ss, item, ','))
      if (!item.empty()) backends.push_back(parse_backend(item));
  }
  auto kinds = parse_kinds(a.kinds);
  if (kinds.empty()) kinds = {ControlKind::kBeats};
  auto rows = profile(ws, backends, kinds, a.runs, a.seed.value_or(0), a.mask_fraction);
  for (const auto& r : rows)
    std::printf("%-10s run %.3fs  guided step %.4fs  peak %lld bytes  (unguided run %.3fs)\n",
                backend_name(r.backend), r.run_seconds, r.step_seconds, static_cast<long long>(r.peak_bytes),
                r.unguided_seconds);
  if (!a.out.empty()) write_profile_csv(a.out, rows);
  return kOk;
}

int run_selftest(const Args&) {
  bool ok = true;
  auto report = [&](const CheckResult& r) {
    std::cout << format_result(r) << std::endl;
    ok = ok && r.pass;
  };
  report(check_autodiff());
  report(check_v_identity());
  report(check_neutrality());
  report(check_recipes());
  const fs::path scratch = fs::temp_directory_path() / ("latchkit_selftest_" + std::to_string(::getpid()));
  report(check_generate_determinism(scratch.string()));
  fs::remove_all(scratch);
  std::cout << "selftest: " << (ok ? "PASS" : "FAIL") << std::endl;
  return ok ? kOk : kUsage;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"latchkit: selective training-free guidance on a toy latent audio diffusion stack"};
  app.require_subcommand(1);
  Args a;
  app.add_option("-c,--config", a.config, "INI configuration file")->capture_default_str();
  app.add_option("--seed", a.seed, "Base seed");
  app.add_option("--jobs", a.jobs, "Parallel workers")->check(CLI::PositiveNumber);

  auto* train = app.add_subcommand("train", "Train one phase: vae, denoiser, latch, readout");
  train->add_option("phase", a.phase, "Phase")->required();
  train->add_option("--kind", a.kinds, "Control kinds (intensity, pitch, beats)");
  train->add_option("--mode", a.mode, "Noise mode for latch heads (clean, forward, backward)")->capture_default_str();

  auto* traj = app.add_subcommand("trajectories", "Record denoiser trajectories for backward-noise heads");
  traj->add_option("--n", a.n, "Sampling runs")->capture_default_str();
  traj->add_option("--stride", a.stride, "Record every n-th step")->capture_default_str();

  auto* gen = app.add_subcommand("generate", "Seeded generation into a run directory");
  gen->add_option("--backend", a.backend, "latch, end_to_end or readout")->capture_default_str();
  gen->add_option("--kind", a.kinds, "Guided controls (omit for unguided)");
  gen->add_option("--mode", a.mode, "Noise mode of the latch heads")->capture_default_str();
  gen->add_option("--mask-fraction", a.mask_fraction, "Guide the first fraction of steps")->check(CLI::Range(0.0, 1.0));
  gen->add_option("--runs", a.runs, "Number of runs")->capture_default_str();
  gen->add_option("--targets", a.targets, "Fixed control targets CSV for every run");
  gen->add_option("--out", a.out, "Run directory")->required();

  auto* eval = app.add_subcommand("evaluate", "Score a run directory");
  eval->add_option("--out", a.out, "Run directory")->required();
  eval->add_option("--heldout", a.heldout, "Held-out clips for the spectral distance")->capture_default_str();

  auto* prof = app.add_subcommand("profile", "Time guided sampling per backend");
  prof->add_option("--backend", a.profile_backends, "Comma-separated backends")->capture_default_str();
  prof->add_option("--kind", a.kinds, "Guided controls");
  prof->add_option("--mask-fraction", a.mask_fraction, "Guide the first fraction of steps")->check(CLI::Range(0.0, 1.0));
  prof->add_option("--runs", a.runs, "Runs per backend")->capture_default_str();
  prof->add_option("--out", a.out, "CSV output");

  auto* self = app.add_subcommand("selftest", "Built-in correctness checks");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return kUsage;
  }

  try {
    if (train->parsed()) return run_train(a);
    if (traj->parsed()) return run_trajectories(a);
    if (gen->parsed()) return run_generate(a);
    if (eval->parsed()) return run_evaluate(a);
    if (prof->parsed()) return run_profile(a);
    if (self->parsed()) return run_selftest(a);
  } catch (const MissingPrerequisite& e) {
    std::cerr << "error: " << e.what() << std::endl;
    return kMissing;
  } catch (const NumericalError& e) {
    std::cerr << "numerical error: " << e.what() << std::endl;
    return kNumeric;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << std::endl;
    return kUsage;
  }
  return kUsage;
}
