#include "latchkit/checks.hpp"

#include <chrono>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <sstream>

#include "latchkit/gradcheck.hpp"
#include "latchkit/guidance.hpp"
#include "latchkit/pipeline.hpp"

LATCHKIT_BEGIN_NAMESPACE

namespace fs = std::filesystem;

namespace {

template <class F>
CheckResult timed(int id, std::string name, F&& body) {
  CheckResult r;
  r.id = id;
  r.name = std::move(name);
  const auto start = std::chrono::steady_clock::now();
  try {
    body(r);
  } catch (const std::exception& e) {
    r.pass = false;
    r.detail = std::string("error: ") + e.what();
  }
  r.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  return r;
}

std::string fmt(const char* f, double a, double b = 0, double c = 0) {
  char buf[256];
  std::snprintf(buf, sizeof buf, f, a, b, c);
  return buf;
}

bool identical(const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape()) return false;
  auto x = a.data(), y = b.data();
  return std::equal(x.begin(), x.end(), y.begin());
}

std::string read_bytes(const fs::path& p) {
  std::ifstream is(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(is), {}};
}

}  // namespace

std::string format_result(const CheckResult& r) {
  std::ostringstream os;
  os << "criterion " << r.id << " " << r.name << ": " << (r.pass ? "PASS" : "FAIL") << " (" << r.detail << ") ["
     << fmt("%.1f", r.seconds) << "s]";
  return os.str();
}

CheckResult check_autodiff() {
  return timed(1, "autodiff", [](CheckResult& r) {
    int failed = 0, total = 0;
    double worst_prim = 0, worst_comp = 0;
    std::string first_fail;
    for (const auto& c : f64::run_gradient_checks()) {
      ++total;
      (c.tolerance < 5e-4 ? worst_prim : worst_comp) =
          std::max(c.tolerance < 5e-4 ? worst_prim : worst_comp, c.error);
      if (!c.passed()) {
        ++failed;
        if (first_fail.empty()) first_fail = c.name + " " + fmt("%.2e", c.error);
      }
    }
    r.pass = failed == 0;
    r.detail = std::to_string(total - failed) + "/" + std::to_string(total) + " checks, worst primitive " +
               fmt("%.1e", worst_prim) + " (< 1e-4), worst composite " + fmt("%.1e", worst_comp) + " (< 1e-3)";
    if (failed) r.detail += ", first failure " + first_fail;
  });
}

CheckResult check_v_identity(int trials, uint64_t seed) {
  return timed(2, "v-identity", [&](CheckResult& r) {
    Rng rng(seed);
    double worst = 0;
    for (int i = 0; i < trials; ++i) {
      const double t = rng.uniform();
      Tensor z = rng.normal({16, 8}), v = rng.normal({16, 8});
      VSplit sp = v_split(z, v, t);
      const auto [a, s] = NoiseSchedule::at(t);
      auto z0 = sp.z0.data(), eps = sp.eps.data(), zt = z.data();
      for (size_t j = 0; j < zt.size(); ++j) worst = std::max(worst, std::abs(a * z0[j] + s * eps[j] - zt[j]));
    }
    r.pass = worst < 1e-5;
    r.detail = std::to_string(trials) + " draws, max |alpha z0 + sigma eps - z_t| = " + fmt("%.2e", worst);
  });
}

CheckResult check_sampler_oracle(uint64_t seed) {
  return timed(3, "sampler-oracle", [&](CheckResult& r) {
    const double m = 0.5, s = 1.0;
    GaussianVelocityModel model(m, s);
    SampleOptions opts;
    opts.cfg_scale = 1.0;
    opts.seed = seed;
    auto res = sample(model, NoiseSchedule(100, 0.0), {10000, 1}, opts);
    double mean = 0, var = 0;
    for (real x : res.z0.data()) mean += x;
    mean /= 10000.0;
    for (real x : res.z0.data()) var += (x - mean) * (x - mean);
    var /= 9999.0;
    const double mean_tol = 0.03 * (1 + std::abs(m));
    r.pass = std::abs(mean - m) <= mean_tol && std::abs(var - s * s) <= 0.05 * s * s;
    r.detail = fmt("mean %.4f vs %.2f (tol %.3f), ", mean, m, mean_tol) +
               fmt("variance %.4f vs %.2f (tol 5%%)", var, s * s);
  });
}

CheckResult check_neutrality(int steps) {
  return timed(4, "neutrality", [&](CheckResult& r) {
    Vae vae(11);
    vae.set_trained(true);
    Denoiser den(12);
    LatchHead latch(ControlKind::kBeats, NoiseMode::kBackward, 13);
    ReadoutHead readout(ControlKind::kBeats, 14);
    GuidanceModels models;
    models.denoiser = &den;
    models.vae = &vae;
    models.latch[ControlKind::kBeats] = &latch;
    models.readout[ControlKind::kBeats] = &readout;
    Clip clip = synth(dataset_spec(1234, 5));
    std::vector<ControlTarget> targets{
        {ControlKind::kBeats, extract_beats(Tensor::from({kSamples}, clip.samples)).detach(), 1.0}};
    const NoiseSchedule sched(steps);
    const uint64_t seed = 77;
    const Tensor base = guided_sample(models, GuidanceConfig::defaults(Backend::kLatch, steps), {}, sched, 1, seed).z0;
    int ok = 0, total = 0;
    std::string bad;
    for (auto backend : {Backend::kLatch, Backend::kEndToEnd, Backend::kReadout}) {
      GuidanceConfig off = GuidanceConfig::defaults(backend, steps);
      off.mask = make_mask(steps, 0.0);
      GuidanceConfig zero = GuidanceConfig::defaults(backend, steps);
      zero.rho = zero.mu = zero.gamma = 0;
      for (const auto* cfg : {&off, &zero}) {
        ++total;
        if (identical(guided_sample(models, *cfg, targets, sched, 1, seed).z0, base)) ++ok;
        else bad += std::string(bad.empty() ? "" : ", ") + backend_name(backend) + (cfg == &off ? "/mask" : "/zero");
      }
    }
    r.pass = ok == total;
    r.detail = std::to_string(ok) + "/" + std::to_string(total) +
               " bit-identical (all-false mask and zero strengths, 3 backends, T=" + std::to_string(steps) + ")";
    if (!bad.empty()) r.detail += ", differs: " + bad;
  });
}

CheckResult check_recipes() {
  return timed(9, "recipes", [](CheckResult& r) {
    const real lo = real(std::log(std::exp(0.1) - 1.0));
    const real hi = real(-std::log(std::exp(0.9) - 1.0));
    Tensor logits = Tensor::from({4, 1}, {lo, lo, lo, hi});
    Tensor targets = Tensor::from({4, 1}, {0, 0, 0, 1});
    const double sparse = sparse_bce(logits, targets).item();
    const double plain = ops::bce_with_logits(logits, targets).item();
    const bool bce_ok = std::abs(sparse - 0.5) < 1e-6 && std::abs(plain - 0.3) < 1e-6;

    std::vector<double> q(40);
    for (int i = 0; i < 40; ++i) q[size_t(i)] = 0.3 * i * i - 2.0 * i + 1.0;
    const auto yq = savgol(q, 9, 2);
    double quad_err = 0;
    for (int i = 4; i < 36; ++i) quad_err = std::max(quad_err, std::abs(yq[size_t(i)] - q[size_t(i)]));
    std::vector<double> imp(11, 0.0);
    imp[5] = 1.0;
    const double center = savgol(imp, 5, 2)[5];
    const bool sg_ok = quad_err < 1e-10 && std::abs(center - 17.0 / 35.0) < 1e-9;

    auto count = [](const std::vector<bool>& m) { return int(std::count(m.begin(), m.end(), true)); };
    const auto m20 = make_mask(100, 0.2);
    bool front = true;
    for (int i = 0; i < 100; ++i) front = front && m20[size_t(i)] == (i < 20);
    const bool mask_ok = front && count(m20) == 20 && count(make_mask(10, 0.0)) == 0 && count(make_mask(10, 1.0)) == 10;

    r.pass = bce_ok && sg_ok && mask_ok;
    r.detail = fmt("sparse BCE %.7f (plain %.7f), ", sparse, plain) +
               fmt("Savitzky-Golay quadratic err %.1e, impulse centre %.12f, ", quad_err, center) +
               "masks " + (mask_ok ? "20/0/10" : "wrong");
  });
}

CheckResult check_generate_determinism(const std::string& scratch_dir) {
  return timed(10, "determinism", [&](CheckResult& r) {
    const fs::path root(scratch_dir);
    fs::remove_all(root);
    fs::create_directories(root);
    Config cfg = Config::parse(
        "[paths]\nworkdir = work\n"
        "[data]\nclips = 8\nheldout = 4\n"
        "[train]\nbatch = 2\nlog_every = 100\n"
        "[vae]\nsteps = 3\ncrop = 1024\n"
        "[denoiser]\nsteps = 3\ncrop_frames = 32\n"
        "[heads]\nsteps = 3\ncrop_frames = 32\n"
        "[sampler]\nsteps = 10\n");
    Workspace ws(cfg, root.string());
    ws.train_vae();
    ws.train_denoiser();
    ws.build_trajectories(2, 5, 3);
    ws.train_latch(ControlKind::kBeats, NoiseMode::kBackward);

    GenerateOptions opts;
    opts.kinds = {ControlKind::kBeats};
    opts.runs = 3;
    opts.seed = 21;
    opts.out = (root / "a").string();
    generate(ws, opts);
    opts.out = (root / "b").string();
    opts.jobs = 3;
    generate(ws, opts);

    int files = 0, same = 0;
    std::string bad;
    for (const auto& e : fs::directory_iterator(root / "a")) {
      const auto name = e.path().filename().string();
      if (name == "runs.csv") continue;  // wall times
      ++files;
      if (read_bytes(e.path()) == read_bytes(root / "b" / name)) ++same;
      else bad += (bad.empty() ? "" : ", ") + name;
    }
    r.pass = files > 0 && same == files;
    r.detail = std::to_string(same) + "/" + std::to_string(files) +
               " output files byte-identical across two seeded generate runs (1 and 3 jobs)";
    if (!bad.empty()) r.detail += ", differs: " + bad;
  });
}

LATCHKIT_END_NAMESPACE
