#include "latchkit/pipeline.hpp"

#include <atomic>
#include <chrono>
#include <cstdio>
#include <exception>
#include <filesystem>
#include <fstream>
#include <mutex>
#include <sstream>
#include <thread>

#include "latchkit/arena.hpp"
#include "latchkit/eval.hpp"

LATCHKIT_BEGIN_NAMESPACE

namespace fs = std::filesystem;

namespace {

const std::vector<ControlKind> kAllKinds = {ControlKind::kIntensity, ControlKind::kPitch, ControlKind::kBeats};

std::string run_name(int i) {
  char buf[16];
  std::snprintf(buf, sizeof buf, "run_%03d", i);
  return buf;
}

std::string join_kinds(const std::vector<ControlKind>& kinds) {
  std::string s;
  for (auto k : kinds) s += (s.empty() ? "" : ",") + std::string(kind_name(k));
  return s;
}

void write_text(const std::string& path, const std::string& text) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw Error("cannot write " + path);
  os << text;
}

Tensor wave_tensor(const std::vector<real>& samples) {
  return Tensor::from({int64_t(samples.size())}, samples);
}

template <class F>
void parallel_for(int n, int jobs, F&& body) {
  if (jobs <= 1 || n <= 1) {
    for (int i = 0; i < n; ++i) body(i);
    return;
  }
  std::atomic<int> next{0};
  std::exception_ptr error;
  std::mutex mu;
  std::vector<std::thread> pool;
  for (int j = 0; j < std::min(jobs, n); ++j) {
    pool.emplace_back([&] {
      for (int i = next++; i < n; i = next++) {
        try {
          body(i);
        } catch (...) {
          std::lock_guard<std::mutex> lock(mu);
          if (!error) error = std::current_exception();
        }
      }
    });
  }
  for (auto& t : pool) t.join();
  if (error) std::rethrow_exception(error);
}

}  // namespace

Workspace::Workspace(Config cfg, std::string base_dir) : cfg_(std::move(cfg)), train_(TrainConfig::from(cfg_)) {
  fs::path d = cfg_.get("paths.workdir", std::string("work"));
  if (d.is_relative()) d = fs::path(base_dir) / d;
  dir_ = d.lexically_normal().string();
  if (steps() < 1) throw InvalidArgument("sampler.steps must be at least 1");
}

Workspace Workspace::open(const std::string& config_path) {
  Config cfg = Config::load(config_path);
  fs::path base = fs::path(config_path).parent_path();
  return Workspace(std::move(cfg), base.empty() ? "." : base.string());
}

std::string Workspace::path(const std::string& file) const { return (fs::path(dir_) / file).string(); }

std::string Workspace::latch_path(ControlKind kind, NoiseMode mode) const {
  return path(std::string("latch_") + kind_name(kind) + "_" + mode_name(mode) + ".lch1");
}

std::string Workspace::readout_path(ControlKind kind) const {
  return path(std::string("readout_") + kind_name(kind) + ".lch1");
}

int Workspace::steps() const { return cfg_.get("sampler.steps", 100); }
double Workspace::cfg_scale() const { return cfg_.get("sampler.cfg_scale", 7.0); }
NoiseSchedule Workspace::schedule() const { return NoiseSchedule(steps(), cfg_.get("sampler.eta", 1.0)); }

namespace {

void require_file(const std::string& file, const std::string& phase, const std::string& command) {
  if (!fs::exists(file))
    throw MissingPrerequisite(phase, "missing " + file + "; run `latchkit " + command + "` first");
}

}  // namespace

Vae Workspace::load_vae() const {
  require_file(vae_path(), "vae", "train vae");
  return Vae::load(vae_path());
}

Denoiser Workspace::load_denoiser() const {
  require_file(denoiser_path(), "denoiser", "train denoiser");
  return Denoiser::load(denoiser_path());
}

LatchHead Workspace::load_latch(ControlKind kind, NoiseMode mode) const {
  require_file(latch_path(kind, mode), "latch",
               std::string("train latch --kind ") + kind_name(kind) + " --mode " + mode_name(mode));
  return LatchHead::load(latch_path(kind, mode));
}

ReadoutHead Workspace::load_readout(ControlKind kind) const {
  require_file(readout_path(kind), "readout", std::string("train readout --kind ") + kind_name(kind));
  return ReadoutHead::load(readout_path(kind));
}

TrajectoryDataset Workspace::load_trajectories() const {
  require_file(trajectories_path(), "trajectories", "trajectories");
  return read_trajectory_dataset(trajectories_path());
}

namespace {

// Per-phase learning rate: `<section>.lr` overrides `train.lr`.
TrainConfig phase_config(const Config& c, TrainConfig t, const char* section) {
  t.adam.lr = c.get(std::string(section) + ".lr", t.adam.lr);
  if (t.adam.lr <= 0) throw InvalidArgument(std::string(section) + ".lr must be positive");
  return t;
}

}  // namespace

void Workspace::train_vae(const Progress& progress) const {
  fs::create_directories(dir_);
  Curve curve;
  Vae vae = latchkit::train_vae(phase_config(cfg_, train_, "vae"), &curve, progress);
  vae.save(vae_path());
  write_curve_csv(path("vae_curve.csv"), curve);
}

void Workspace::train_denoiser(const Progress& progress) const {
  Vae vae = load_vae();
  fs::create_directories(dir_);
  LatentSet data = encode_dataset(vae, train_.data_seed, 0, train_.clips, false);
  Curve curve;
  Denoiser den = latchkit::train_denoiser(vae, data, phase_config(cfg_, train_, "denoiser"), &curve, progress);
  den.save(denoiser_path());
  write_curve_csv(path("denoiser_curve.csv"), curve);
}

void Workspace::build_trajectories(int n, int stride, uint64_t seed) const {
  Denoiser den = load_denoiser();
  Vae vae = load_vae();
  TrajectoryDataset ds = build_trajectory_dataset(den, vae, schedule(), n, stride, seed, cfg_scale());
  write_trajectory_dataset(trajectories_path(), ds);
}

void Workspace::train_latch(ControlKind kind, NoiseMode mode, const Progress& progress) const {
  Curve curve;
  std::optional<LatchHead> head;
  if (mode == NoiseMode::kBackward) {
    TrajectoryDataset traj = load_trajectories();
    head = latchkit::train_latch(kind, mode, nullptr, &traj, phase_config(cfg_, train_, "heads"), &curve, progress);
  } else {
    Vae vae = load_vae();
    LatentSet data = encode_dataset(vae, train_.data_seed, 0, train_.clips, true);
    head = latchkit::train_latch(kind, mode, &data, nullptr, phase_config(cfg_, train_, "heads"), &curve, progress);
  }
  fs::create_directories(dir_);
  head->save(latch_path(kind, mode));
  write_curve_csv(path(std::string("latch_") + kind_name(kind) + "_" + mode_name(mode) + "_curve.csv"), curve);
}

void Workspace::train_readout(ControlKind kind, const Progress& progress) const {
  Denoiser den = load_denoiser();
  Vae vae = load_vae();
  LatentSet data = encode_dataset(vae, train_.data_seed, 0, train_.clips, true);
  Curve curve;
  ReadoutHead head = latchkit::train_readout(kind, den, data, phase_config(cfg_, train_, "heads"), &curve, progress);
  fs::create_directories(dir_);
  head.save(readout_path(kind));
  write_curve_csv(path(std::string("readout_") + kind_name(kind) + "_curve.csv"), curve);
}

GuidanceConfig guidance_config(const Workspace& ws, const GenerateOptions& opts) {
  Config c = ws.config();
  c.set("guidance.backend", backend_name(opts.backend));
  GuidanceConfig g = GuidanceConfig::from(c, ws.steps());
  if (!c.has("sampler.cfg_scale")) g.cfg_scale = ws.cfg_scale();
  if (opts.mask_fraction) g.mask = make_mask(ws.steps(), *opts.mask_fraction);
  g.validate(ws.steps());
  return g;
}

namespace {

// Models shared read-only by every run of a generation.
struct LoadedStack {
  Vae vae;
  Denoiser den;
  std::map<ControlKind, LatchHead> latch;
  std::map<ControlKind, ReadoutHead> readout;

  GuidanceModels models() const {
    GuidanceModels m;
    m.denoiser = &den;
    m.vae = &vae;
    for (const auto& [k, h] : latch) m.latch[k] = &h;
    for (const auto& [k, h] : readout) m.readout[k] = &h;
    return m;
  }
};

LoadedStack load_stack(const Workspace& ws, const GenerateOptions& opts) {
  LoadedStack s{ws.load_vae(), ws.load_denoiser(), {}, {}};
  for (auto k : opts.kinds) {
    if (opts.backend == Backend::kLatch) s.latch.emplace(k, ws.load_latch(k, opts.latch_mode));
    if (opts.backend == Backend::kReadout) s.readout.emplace(k, ws.load_readout(k));
  }
  return s;
}

std::vector<RunRecord> run_all(const Workspace& ws, const LoadedStack& stack, const GuidanceConfig& gcfg,
                               const GenerateOptions& opts, const std::vector<ControlTrack>& fixed) {
  if (opts.runs < 1) throw InvalidArgument("need at least one run");
  if (opts.jobs < 1) throw InvalidArgument("--jobs must be at least 1");
  for (const auto& t : fixed)
    if (t.frames() != kFrames)
      throw ShapeError(std::string(kind_name(t.kind)) + " target has " + std::to_string(t.frames()) +
                       " frames; latents have " + std::to_string(kFrames));
  const NoiseSchedule sched = ws.schedule();
  const GuidanceModels models = stack.models();
  std::vector<RunRecord> out(size_t(opts.runs));
  parallel_for(opts.runs, opts.jobs, [&](int i) {
    RunRecord& r = out[size_t(i)];
    r.run = i;
    r.seed = opts.seed + uint64_t(i);
    if (fixed.empty()) {
      r.reference = ws.heldout_start() + i;
      WorldSpec spec = dataset_spec(ws.train().data_seed, r.reference);
      Clip clip = synth(spec);
      r.class_id = spec.class_label;
      Tensor w = wave_tensor(clip.samples);
      for (auto k : kAllKinds) r.targets.push_back(extract_track(k, w));
    } else {
      r.class_id = i % kClasses;
      r.targets = fixed;
    }
    std::vector<ControlTrack> guided;
    for (auto k : opts.kinds) {
      auto it = std::find_if(r.targets.begin(), r.targets.end(), [&](const ControlTrack& t) { return t.kind == k; });
      if (it == r.targets.end()) throw InvalidArgument(std::string("no ") + kind_name(k) + " target track");
      guided.push_back(*it);
    }
    const int64_t live0 = arena::live_bytes();
    if (opts.jobs <= 1) arena::reset_peak();
    const auto start = std::chrono::steady_clock::now();
    GuidedResult res = guided_sample(models, gcfg, make_targets(gcfg, guided), sched, r.class_id, r.seed);
    r.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    r.peak_bytes = arena::peak_bytes() - live0;
    r.z0 = res.z0;
    r.guided_steps = res.guided_steps;
    r.diagnostics = res.diagnostics;
    if (!res.diagnostics.empty()) {
      std::vector<double> sec;
      for (const auto& d : res.diagnostics) sec.push_back(d.seconds);
      r.step_seconds = median(sec);
    }
    NoGradGuard ng;
    r.wave = stack.vae.decode(res.z0).to_vector();
  });
  return out;
}

void write_run_dir(const Workspace& ws, const GenerateOptions& opts, const GuidanceConfig& gcfg,
                   const std::vector<RunRecord>& runs) {
  const fs::path dir(opts.out);
  fs::create_directories(dir);
  write_text((dir / "config.ini").string(), ws.config().to_string());

  std::ostringstream m;
  m.precision(17);
  int guided_mask = 0;
  for (bool b : gcfg.mask) guided_mask += b;
  m << "[run]\n"
    << "backend = " << backend_name(opts.backend) << "\n"
    << "kinds = " << join_kinds(opts.kinds) << "\n"
    << "latch_mode = " << mode_name(opts.latch_mode) << "\n"
    << "runs = " << opts.runs << "\n"
    << "seed = " << opts.seed << "\n"
    << "steps = " << ws.steps() << "\n"
    << "guided_mask_steps = " << guided_mask << "\n"
    << "rho = " << gcfg.rho << "\nmu = " << gcfg.mu << "\ngamma = " << gcfg.gamma << "\n"
    << "n_iter = " << gcfg.n_iter << "\nn_recur = " << gcfg.n_recur << "\n"
    << "cfg_scale = " << gcfg.cfg_scale << "\n"
    << "targets = " << (opts.targets_csv.empty() ? std::string("heldout") : opts.targets_csv) << "\n"
    << "data_seed = " << ws.train().data_seed << "\n"
    << "heldout_start = " << ws.heldout_start() << "\n"
    << "[checkpoints]\n"
    << "vae = " << ws.vae_path() << "\nvae_digest = " << file_digest(ws.vae_path()) << "\n"
    << "denoiser = " << ws.denoiser_path() << "\ndenoiser_digest = " << file_digest(ws.denoiser_path()) << "\n";
  for (auto k : opts.kinds) {
    std::string p;
    if (opts.backend == Backend::kLatch) p = ws.latch_path(k, opts.latch_mode);
    else if (opts.backend == Backend::kReadout) p = ws.readout_path(k);
    else continue;
    m << "head_" << kind_name(k) << " = " << p << "\nhead_" << kind_name(k) << "_digest = " << file_digest(p)
      << "\n";
  }
  write_text((dir / "manifest.ini").string(), m.str());

  std::ostringstream rc;
  rc.precision(9);
  rc << "run,class,seed,reference,guided_steps,seconds,step_seconds,peak_bytes\n";
  std::vector<std::vector<GuidanceDiag>> diags;
  for (const auto& r : runs) {
    rc << r.run << "," << r.class_id << "," << r.seed << "," << r.reference << "," << r.guided_steps << ","
       << r.seconds << "," << r.step_seconds << "," << r.peak_bytes << "\n";
    const std::string name = run_name(r.run);
    write_wav((dir / (name + ".wav")).string(), r.wave);
    write_tracks_csv((dir / (name + "_targets.csv")).string(), r.targets);
    diags.push_back(r.diagnostics);
  }
  write_text((dir / "runs.csv").string(), rc.str());
  if (!opts.kinds.empty()) write_guidance_csv((dir / "guidance.csv").string(), diags);
}

}  // namespace

std::vector<RunRecord> generate(const Workspace& ws, const GenerateOptions& opts) {
  if (opts.write_files && opts.out.empty()) throw InvalidArgument("generate needs an output directory (--out)");
  const GuidanceConfig gcfg = guidance_config(ws, opts);
  std::vector<ControlTrack> fixed;
  if (!opts.targets_csv.empty()) fixed = read_tracks_csv(opts.targets_csv);
  const LoadedStack stack = load_stack(ws, opts);
  auto runs = run_all(ws, stack, gcfg, opts, fixed);
  if (opts.write_files) write_run_dir(ws, opts, gcfg, runs);
  return runs;
}

namespace {

std::vector<std::vector<std::string>> read_csv_rows(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw Error("cannot read " + path);
  std::vector<std::vector<std::string>> rows;
  std::string line;
  std::getline(is, line);  // header
  while (std::getline(is, line)) {
    if (line.empty()) continue;
    std::vector<std::string> cells;
    std::stringstream ss(line);
    for (std::string cell; std::getline(ss, cell, ',');) cells.push_back(cell);
    rows.push_back(std::move(cells));
  }
  return rows;
}

}  // namespace

EvalReport evaluate(const std::string& run_dir, int heldout) {
  const fs::path dir(run_dir);
  const fs::path manifest = dir / "manifest.ini";
  if (!fs::exists(manifest))
    throw MissingPrerequisite("generate", "run directory " + run_dir +
                                              " has no manifest.ini; run `latchkit generate --out " + run_dir +
                                              "` first");
  if (heldout < 2) throw InvalidArgument("evaluation needs at least two held-out clips");
  const Config m = Config::load(manifest.string());
  const int n = m.get("run.runs", 0);
  if (n < 1) throw Error("run directory " + run_dir + " lists no runs");
  const auto rows = read_csv_rows((dir / "runs.csv").string());
  if (int(rows.size()) != n) throw Error("runs.csv does not match the manifest");

  EvalReport report;
  std::vector<std::vector<double>> generated, reference;
  std::map<ControlKind, std::vector<double>> per_kind;
  for (int i = 0; i < n; ++i) {
    const std::string name = run_name(i);
    const auto samples = read_wav((dir / (name + ".wav")).string());
    const auto targets = read_tracks_csv((dir / (name + "_targets.csv")).string());
    ReportRow row;
    row.run = name;
    row.class_id = std::stoi(rows[size_t(i)].at(1));
    row.seed = std::stoull(rows[size_t(i)].at(2));
    row.guided_steps = std::stoi(rows[size_t(i)].at(4));
    row.seconds = std::stod(rows[size_t(i)].at(5));
    row.peak_bytes = std::stoll(rows[size_t(i)].at(7));
    row.alignment = alignment(wave_tensor(samples), targets);
    for (const auto& [k, v] : row.alignment) per_kind[k].push_back(v);
    generated.push_back(band_energies(samples));
    report.rows.push_back(std::move(row));
  }
  for (const auto& [k, v] : per_kind) report.median_alignment[k] = median(v);

  const uint64_t data_seed = uint64_t(m.get("run.data_seed", int64_t(1234)));
  const int64_t start = m.get("run.heldout_start", int64_t(0));
  for (int j = 0; j < heldout; ++j) reference.push_back(band_energies(synth(dataset_spec(data_seed, start + j)).samples));
  report.spectral_fd = generated.size() >= 2 ? frechet_distance(generated, reference) : 0.0;

  std::ostringstream os;
  os.precision(9);
  os << "run,class,seed,intensity_mse,pitch_bce,beats_bce,seconds,guided_steps,peak_bytes,spectral_fd\n";
  auto cell = [](const std::map<ControlKind, double>& a, ControlKind k) {
    auto it = a.find(k);
    std::ostringstream c;
    c.precision(9);
    if (it != a.end()) c << it->second;
    return c.str();
  };
  for (const auto& r : report.rows) {
    os << r.run << "," << r.class_id << "," << r.seed;
    for (auto k : kAllKinds) os << "," << cell(r.alignment, k);
    os << "," << r.seconds << "," << r.guided_steps << "," << r.peak_bytes << ",\n";
  }
  os << "median,,";
  for (auto k : kAllKinds) os << "," << cell(report.median_alignment, k);
  os << ",,,," << report.spectral_fd << "\n";
  write_text((dir / "report.csv").string(), os.str());
  return report;
}

std::vector<ProfileRow> profile(const Workspace& ws, const std::vector<Backend>& backends,
                                const std::vector<ControlKind>& kinds, int runs, uint64_t seed,
                                std::optional<double> mask_fraction) {
  if (kinds.empty()) throw InvalidArgument("profiling needs at least one control kind");
  std::vector<ProfileRow> out;
  GenerateOptions base;
  base.runs = runs;
  base.seed = seed;
  base.write_files = false;
  base.mask_fraction = mask_fraction;
  std::vector<double> unguided;
  {
    GenerateOptions u = base;
    u.backend = Backend::kLatch;
    for (const auto& r : generate(ws, u)) unguided.push_back(r.seconds);
  }
  for (auto b : backends) {
    GenerateOptions o = base;
    o.backend = b;
    o.kinds = kinds;
    ProfileRow row;
    row.backend = b;
    row.runs = runs;
    std::vector<double> run_s, step_s;
    for (const auto& r : generate(ws, o)) {
      run_s.push_back(r.seconds);
      for (const auto& d : r.diagnostics) step_s.push_back(d.seconds);
      row.peak_bytes = std::max(row.peak_bytes, r.peak_bytes);
    }
    row.run_seconds = median(run_s);
    row.step_seconds = step_s.empty() ? 0.0 : median(step_s);
    row.unguided_seconds = median(unguided);
    out.push_back(row);
  }
  return out;
}

void write_profile_csv(const std::string& path, const std::vector<ProfileRow>& rows) {
  std::ostringstream os;
  os.precision(9);
  os << "backend,runs,median_run_seconds,median_guided_step_seconds,peak_bytes,unguided_run_seconds\n";
  for (const auto& r : rows)
    os << backend_name(r.backend) << "," << r.runs << "," << r.run_seconds << "," << r.step_seconds << ","
       << r.peak_bytes << "," << r.unguided_seconds << "\n";
  write_text(path, os.str());
}

std::string file_digest(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw Error("cannot read " + path);
  uint64_t h = 1469598103934665603ull;
  char buf[1 << 16];
  while (is) {
    is.read(buf, sizeof buf);
    for (std::streamsize i = 0; i < is.gcount(); ++i) {
      h ^= uint8_t(buf[i]);
      h *= 1099511628211ull;
    }
  }
  char out[17];
  std::snprintf(out, sizeof out, "%016llx", static_cast<unsigned long long>(h));
  return out;
}

LATCHKIT_END_NAMESPACE
