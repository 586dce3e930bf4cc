#include "latchkit/training.hpp"

#include <boost/property_tree/ini_parser.hpp>
#include <boost/property_tree/ptree.hpp>
#include <cmath>
#include <fstream>
#include <mutex>
#include <sstream>

#include "latchkit/binio.hpp"

LATCHKIT_BEGIN_NAMESPACE

// --------------------------------------------------------------------- config

Config Config::load(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw Error("cannot read config " + path);
  std::stringstream ss;
  ss << is.rdbuf();
  return parse(ss.str());
}

Config Config::parse(const std::string& text) {
  namespace pt = boost::property_tree;
  pt::ptree tree;
  std::istringstream is(text);
  try {
    pt::read_ini(is, tree);
  } catch (const pt::ini_parser_error& e) {
    throw InvalidArgument(std::string("config: ") + e.what());
  }
  Config c;
  for (const auto& [section, node] : tree) {
    if (node.empty()) {
      c.values_[section] = node.data();
      continue;
    }
    for (const auto& [key, leaf] : node) c.values_[section + "." + key] = leaf.data();
  }
  return c;
}

std::string Config::get(const std::string& key, const std::string& fallback) const {
  auto it = values_.find(key);
  return it == values_.end() ? fallback : it->second;
}

double Config::get(const std::string& key, double fallback) const {
  auto it = values_.find(key);
  if (it == values_.end()) return fallback;
  try {
    size_t used = 0;
    double v = std::stod(it->second, &used);
    if (used != it->second.size()) throw std::invalid_argument("trailing");
    return v;
  } catch (const std::exception&) {
    throw InvalidArgument("config " + key + ": '" + it->second + "' is not a number");
  }
}

int64_t Config::get(const std::string& key, int64_t fallback) const {
  auto it = values_.find(key);
  if (it == values_.end()) return fallback;
  try {
    size_t used = 0;
    long long v = std::stoll(it->second, &used);
    if (used != it->second.size()) throw std::invalid_argument("trailing");
    return v;
  } catch (const std::exception&) {
    throw InvalidArgument("config " + key + ": '" + it->second + "' is not an integer");
  }
}

bool Config::get(const std::string& key, bool fallback) const {
  auto it = values_.find(key);
  if (it == values_.end()) return fallback;
  const std::string& v = it->second;
  if (v == "1" || v == "true" || v == "yes" || v == "on") return true;
  if (v == "0" || v == "false" || v == "no" || v == "off") return false;
  throw InvalidArgument("config " + key + ": '" + v + "' is not a boolean");
}

std::string Config::to_string() const {
  std::map<std::string, std::vector<std::pair<std::string, std::string>>> sections;
  for (const auto& [k, v] : values_) {
    auto dot = k.find('.');
    if (dot == std::string::npos) sections[""].emplace_back(k, v);
    else sections[k.substr(0, dot)].emplace_back(k.substr(dot + 1), v);
  }
  std::ostringstream os;
  for (const auto& [sec, kvs] : sections) {
    if (!sec.empty()) os << "[" << sec << "]\n";
    for (const auto& [k, v] : kvs) os << k << " = " << v << "\n";
    os << "\n";
  }
  return os.str();
}

TrainConfig TrainConfig::from(const Config& c) {
  TrainConfig t;
  t.clips = c.get("data.clips", t.clips);
  t.heldout = c.get("data.heldout", t.heldout);
  t.data_seed = uint64_t(c.get("data.seed", int64_t(t.data_seed)));
  t.seed = uint64_t(c.get("train.seed", int64_t(t.seed)));
  t.batch = c.get("train.batch", t.batch);
  t.adam.lr = c.get("train.lr", t.adam.lr);
  t.adam.beta1 = c.get("train.beta1", t.adam.beta1);
  t.adam.beta2 = c.get("train.beta2", t.adam.beta2);
  t.adam.eps = c.get("train.eps", t.adam.eps);
  t.log_every = c.get("train.log_every", t.log_every);
  t.vae_steps = c.get("vae.steps", t.vae_steps);
  t.vae_crop = c.get("vae.crop", t.vae_crop);
  t.silence_fraction = c.get("vae.silence_fraction", t.silence_fraction);
  t.denoiser_steps = c.get("denoiser.steps", t.denoiser_steps);
  t.denoiser_crop = c.get("denoiser.crop_frames", t.denoiser_crop);
  t.class_dropout = c.get("denoiser.class_dropout", t.class_dropout);
  t.head_steps = c.get("heads.steps", t.head_steps);
  t.head_crop = c.get("heads.crop_frames", t.head_crop);
  t.sparse_threshold = c.get("heads.sparse_threshold", t.sparse_threshold);
  if (t.clips <= 0 || t.heldout < 0 || t.batch <= 0 || t.adam.lr <= 0 || t.vae_steps < 0 ||
      t.denoiser_steps < 0 || t.head_steps < 0 || t.log_every <= 0)
    throw InvalidArgument("training config values must be positive");
  if (t.vae_crop <= 0 || t.vae_crop % kHop != 0 || t.vae_crop > kSamples)
    throw InvalidArgument("vae.crop must be a multiple of 64 up to 16384");
  if (t.denoiser_crop <= 0 || t.denoiser_crop > kFrames || t.head_crop <= 0 || t.head_crop > kFrames)
    throw InvalidArgument("crop_frames must lie in [1, 256]");
  return t;
}

void write_curve_csv(const std::string& path, const Curve& curve) {
  std::ofstream os(path);
  if (!os) throw Error("cannot write " + path);
  os << "step,loss\n";
  os.precision(9);
  for (const auto& p : curve) os << p.step << "," << p.loss << "\n";
}

// ----------------------------------------------------------------------- adam

Adam::Adam(ParamSet& params, AdamConfig cfg) : params_(params), cfg_(cfg) {
  for (const auto& [name, t] : params_.items()) {
    m_.emplace_back(size_t(t.numel()), 0.0);
    v_.emplace_back(size_t(t.numel()), 0.0);
  }
}

void Adam::step() {
  ++t_;
  const double c1 = 1.0 - std::pow(cfg_.beta1, double(t_));
  const double c2 = 1.0 - std::pow(cfg_.beta2, double(t_));
  auto& items = params_.items();
  for (size_t i = 0; i < items.size(); ++i) {
    Tensor p = items[i].second;
    if (!p.has_grad()) continue;
    auto g = p.grad();
    auto w = p.mutable_data();
    auto& m = m_[i];
    auto& v = v_[i];
    for (size_t j = 0; j < w.size(); ++j) {
      const double gj = g[j];
      m[j] = cfg_.beta1 * m[j] + (1 - cfg_.beta1) * gj;
      v[j] = cfg_.beta2 * v[j] + (1 - cfg_.beta2) * gj * gj;
      w[j] = real(double(w[j]) - cfg_.lr * (m[j] / c1) / (std::sqrt(v[j] / c2) + cfg_.eps));
    }
    p.zero_grad();
  }
}

// --------------------------------------------------------------------- losses

namespace {

struct Dft {
  Tensor window, cos, sin;
};

const Dft& dft(int n) {
  static std::mutex mu;
  static std::map<int, Dft> cache;
  std::lock_guard<std::mutex> lock(mu);
  auto it = cache.find(n);
  if (it != cache.end()) return it->second;
  const int bins = n / 2 + 1;
  std::vector<real> w(static_cast<size_t>(n)), c(static_cast<size_t>(n * bins)), s(static_cast<size_t>(n * bins));
  const double norm = 1.0 / std::sqrt(double(n));
  for (int j = 0; j < n; ++j) {
    w[j] = real(0.5 - 0.5 * std::cos(2 * M_PI * j / n));
    for (int k = 0; k < bins; ++k) {
      const double a = 2 * M_PI * double(j) * k / n;
      c[size_t(j * bins + k)] = real(std::cos(a) * norm);
      s[size_t(j * bins + k)] = real(-std::sin(a) * norm);
    }
  }
  Dft d{Tensor::from({n}, w), Tensor::from({n, bins}, c), Tensor::from({n, bins}, s)};
  return cache.emplace(n, std::move(d)).first->second;
}

Tensor flat(const Tensor& x) { return x.rank() == 1 ? x : ops::reshape(x, {x.numel()}); }

void check_finite(double loss, const std::string& phase, int step) {
  if (!std::isfinite(loss))
    throw NumericalError(phase + ": loss became non-finite at step " + std::to_string(step));
}

void log_step(Curve* curve, const Progress& progress, const std::string& phase, int step, int steps, int every,
              double loss) {
  if (curve) curve->push_back({step, loss});
  if (progress && (step % every == 0 || step + 1 == steps)) progress(phase, step, loss);
}

}  // namespace

Tensor stft_magnitude(const Tensor& wave, int n_fft, int hop) {
  Tensor x = flat(wave);
  const int64_t n = x.numel();
  if (n < n_fft) throw ShapeError("signal shorter than the FFT size");
  const int64_t frames = 1 + (n - n_fft) / hop;
  std::vector<int64_t> idx(size_t(frames * n_fft));
  for (int64_t f = 0; f < frames; ++f)
    for (int j = 0; j < n_fft; ++j) idx[size_t(f * n_fft + j)] = f * hop + j;
  const Dft& d = dft(n_fft);
  Tensor fr = ops::mul(ops::gather(x, idx, {frames, n_fft}), d.window);
  Tensor re = ops::matmul(fr, d.cos);
  Tensor im = ops::matmul(fr, d.sin);
  return ops::sqrt(ops::add_scalar(ops::add(ops::square(re), ops::square(im)), real(1e-8)));
}

Tensor reconstruction_loss(const Tensor& recon, const Tensor& target) {
  Tensor r = flat(recon);
  Tensor t = flat(target).detach();
  Tensor loss = ops::mse(r, t);
  for (int n : {256, 512, 1024}) {
    if (r.numel() < n) continue;
    Tensor tm;
    {
      NoGradGuard ng;
      tm = stft_magnitude(t, n, n / 4);
    }
    loss = ops::add(loss, ops::mse(stft_magnitude(r, n, n / 4), tm));
  }
  return loss;
}

double snr_db(std::span<const real> reference, std::span<const real> estimate) {
  if (reference.size() != estimate.size()) throw ShapeError("snr: length mismatch");
  double s = 0, e = 0;
  for (size_t i = 0; i < reference.size(); ++i) {
    s += double(reference[i]) * reference[i];
    const double d = double(reference[i]) - estimate[i];
    e += d * d;
  }
  return 10.0 * std::log10((s + 1e-30) / (e + 1e-30));
}

Tensor sparse_bce(const Tensor& logits, const Tensor& targets, double threshold) {
  if (logits.shape() != targets.shape()) throw ShapeError("sparse_bce: shape mismatch");
  Tensor el = ops::bce_with_logits_elementwise(logits, targets);
  auto tv = targets.data();
  std::vector<real> below(tv.size()), above(tv.size());
  double nb = 0, na = 0;
  for (size_t i = 0; i < tv.size(); ++i) {
    const bool b = double(tv[i]) < threshold;
    below[i] = b ? 1 : 0;
    above[i] = b ? 0 : 1;
    (b ? nb : na) += 1;
  }
  auto part = [&](std::vector<real> mask, double count) {
    return ops::scale(ops::sum(ops::mul(el, Tensor::from(targets.shape(), std::move(mask)))), real(1.0 / count));
  };
  if (nb == 0) return part(above, na);
  if (na == 0) return part(below, nb);
  return ops::add(ops::scale(part(below, nb), real(0.5)), ops::scale(part(above, na), real(0.5)));
}

Tensor head_loss(ControlKind kind, const Tensor& pred, const Tensor& target, double threshold) {
  if (pred.shape() != target.shape())
    throw ShapeError("head loss: prediction " + to_string(pred.shape()) + " vs target " + to_string(target.shape()));
  switch (kind) {
    case ControlKind::kIntensity: return ops::mse(pred, target);
    case ControlKind::kPitch: return sparse_bce(pred, target, threshold);
    case ControlKind::kBeats: return ops::bce_with_logits(pred, target);
  }
  throw InvalidArgument("unknown control kind");
}

// ---------------------------------------------------------------------- data

LatentSet encode_dataset(const Vae& vae, uint64_t data_seed, int64_t first, int64_t count, bool with_targets) {
  NoGradGuard ng;
  LatentSet set;
  for (int64_t i = 0; i < count; ++i) {
    WorldSpec spec = dataset_spec(data_seed, first + i);
    Clip clip = synth(spec);
    Tensor z = vae.encode(Tensor::from({kSamples}, clip.samples));
    set.z.push_back(z);
    set.labels.push_back(spec.class_label);
    if (with_targets) {
      Tensor w = vae.decode(z);
      for (auto kind : {ControlKind::kIntensity, ControlKind::kPitch, ControlKind::kBeats})
        set.targets[kind].push_back(extract(kind, w));
    }
  }
  return set;
}

// ---------------------------------------------------------------- autoencoder

Vae train_vae(const TrainConfig& cfg, Curve* curve, const Progress& progress) {
  Vae vae(cfg.seed);
  Adam opt(vae.params(), cfg.adam);
  Rng rng(cfg.seed, 11);
  const int crop = cfg.vae_crop;
  for (int step = 0; step < cfg.vae_steps; ++step) {
    Graph g;
    Tensor total;
    for (int b = 0; b < cfg.batch; ++b) {
      std::vector<real> x(size_t(crop), 0);
      if (rng.uniform() >= cfg.silence_fraction) {
        Clip clip = synth(dataset_spec(cfg.data_seed, rng.uniform_int(cfg.clips)));
        const int64_t start = kHop * rng.uniform_int((kSamples - crop) / kHop + 1);
        std::copy_n(clip.samples.begin() + start, crop, x.begin());
      }
      Tensor xt = Tensor::from({crop}, std::move(x));
      Tensor loss = reconstruction_loss(vae.decode_raw(vae.encode_raw(xt)), xt);
      total = total.defined() ? ops::add(total, loss) : loss;
    }
    total = ops::scale(total, real(1.0 / cfg.batch));
    const double lv = total.item();
    check_finite(lv, "vae", step);
    g.backward(total);
    opt.step();
    log_step(curve, progress, "vae", step, cfg.vae_steps, cfg.log_every, lv);
  }
  calibrate_latent_scale(vae, cfg);
  vae.set_trained(true);
  return vae;
}

void calibrate_latent_scale(Vae& vae, const TrainConfig& cfg, int64_t count) {
  NoGradGuard ng;
  double ss = 0;
  int64_t n = 0;
  for (int64_t i = 0; i < count; ++i) {
    Clip clip = synth(dataset_spec(cfg.data_seed, i % cfg.clips));
    Tensor z = vae.encode_raw(Tensor::from({kSamples}, clip.samples));
    for (real v : z.data()) ss += double(v) * v;
    n += z.numel();
  }
  const double rms = std::sqrt(ss / double(n));
  vae.set_latent_scale(rms > 1e-8 ? rms : 1.0);
}

// ------------------------------------------------------------------- denoiser

namespace {

Tensor crop_frames(const Tensor& x, int64_t start, int64_t len) {
  return len == x.dim(0) ? x : ops::slice(x, 0, start, start + len);
}

}  // namespace

Denoiser train_denoiser(const Vae& vae, const LatentSet& data, const TrainConfig& cfg, Curve* curve,
                        const Progress& progress) {
  if (!vae.trained()) throw MissingPrerequisite("vae", "denoiser training needs a trained autoencoder");
  if (data.size() == 0) throw InvalidArgument("denoiser training needs a nonempty latent set");
  Denoiser den(cfg.seed);
  Adam opt(den.params(), cfg.adam);
  Rng rng(cfg.seed, 12);
  const int64_t crop = cfg.denoiser_crop;
  for (int step = 0; step < cfg.denoiser_steps; ++step) {
    Graph g;
    Tensor total;
    for (int b = 0; b < cfg.batch; ++b) {
      const auto i = size_t(rng.uniform_int(int64_t(data.size())));
      const int64_t start = rng.uniform_int(kFrames - crop + 1);
      Tensor z0 = crop_frames(data.z[i], start, crop).detach();
      const double t = rng.uniform();
      Tensor eps = rng.normal(z0.shape());
      const int cls = rng.uniform() < cfg.class_dropout ? den.null_class() : data.labels[i];
      Tensor loss = ops::mse(den.velocity(forward_diffuse(z0, t, eps), t, cls), v_target(z0, eps, t));
      total = total.defined() ? ops::add(total, loss) : loss;
    }
    total = ops::scale(total, real(1.0 / cfg.batch));
    const double lv = total.item();
    check_finite(lv, "denoiser", step);
    g.backward(total);
    opt.step();
    log_step(curve, progress, "denoiser", step, cfg.denoiser_steps, cfg.log_every, lv);
  }
  den.set_trained(true);
  return den;
}

VLoss evaluate_denoiser(const Denoiser& den, const LatentSet& data, uint64_t seed, int draws_per_clip) {
  NoGradGuard ng;
  Rng rng(seed, 13);
  double loss = 0, s1 = 0, s2 = 0;
  int64_t n = 0, count = 0;
  for (size_t i = 0; i < data.size(); ++i) {
    for (int d = 0; d < draws_per_clip; ++d) {
      const double t = rng.uniform();
      Tensor eps = rng.normal(data.z[i].shape());
      Tensor target = v_target(data.z[i], eps, t);
      loss += ops::mse(den.velocity(forward_diffuse(data.z[i], t, eps), t, data.labels[i]), target).item();
      ++count;
      for (real v : target.data()) {
        s1 += v;
        s2 += double(v) * v;
      }
      n += target.numel();
    }
  }
  const double mean = s1 / double(n);
  return {loss / double(count), s2 / double(n) - mean * mean};
}

// --------------------------------------------------------------- trajectories

size_t TrajectoryDataset::records() const {
  size_t n = 0;
  for (const auto& t : trajectories) n += t.records.size();
  return n;
}

TrajectoryDataset build_trajectory_dataset(const Denoiser& den, const Vae& vae, const NoiseSchedule& sched, int n,
                                           int stride, uint64_t seed, double cfg_scale) {
  if (n < 1 || stride < 1) throw InvalidArgument("trajectories: n and stride must be positive");
  TrajectoryDataset ds;
  ds.steps = sched.steps();
  ds.stride = stride;
  for (int i = 0; i < n; ++i) {
    SampleOptions opts;
    opts.class_id = i % kClasses;
    opts.cfg_scale = cfg_scale;
    opts.seed = seed + uint64_t(i);
    opts.record = true;
    SampleResult res = sample(den, sched, {kFrames, kLatentChannels}, opts);
    Trajectory tr;
    tr.class_id = opts.class_id;
    tr.seed = opts.seed;
    {
      NoGradGuard ng;
      Tensor w = vae.decode(res.z0);
      for (auto kind : {ControlKind::kIntensity, ControlKind::kPitch, ControlKind::kBeats})
        tr.targets[kind] = extract(kind, w);
    }
    for (int k = 0; k < sched.steps(); k += stride)
      tr.records.push_back({k, sched.time(k), res.states[size_t(k)], res.z0_hats[size_t(k)]});
    ds.trajectories.push_back(std::move(tr));
  }
  return ds;
}

namespace {
constexpr char kTrajMagic[5] = "LTJ1";
}

void write_trajectory_dataset(const std::string& path, const TrajectoryDataset& ds) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw Error("cannot write " + path);
  os.write(kTrajMagic, 4);
  binio::put<uint32_t>(os, uint32_t(ds.steps));
  binio::put<uint32_t>(os, uint32_t(ds.stride));
  binio::put<uint32_t>(os, uint32_t(ds.trajectories.size()));
  for (const auto& tr : ds.trajectories) {
    binio::put<uint32_t>(os, uint32_t(tr.class_id));
    binio::put<uint64_t>(os, tr.seed);
    const Tensor& any = tr.records.empty() ? tr.targets.begin()->second : tr.records.front().z_t;
    binio::put<uint32_t>(os, uint32_t(any.dim(0)));
    for (auto kind : {ControlKind::kIntensity, ControlKind::kPitch, ControlKind::kBeats})
      binio::put_floats(os, tr.targets.at(kind).data());
    binio::put<uint32_t>(os, uint32_t(tr.records.size()));
    for (const auto& r : tr.records) {
      binio::put<uint32_t>(os, uint32_t(r.step));
      binio::put<double>(os, r.t);
      binio::put_floats(os, r.z_t.data());
      binio::put_floats(os, r.z0_hat.data());
    }
  }
  if (!os) throw Error("write failed for " + path);
}

TrajectoryDataset read_trajectory_dataset(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw MissingPrerequisite("trajectories", "trajectory dataset " + path + " not found; run `trajectories`");
  binio::expect_magic(is, kTrajMagic, path);
  TrajectoryDataset ds;
  ds.steps = int(binio::get<uint32_t>(is));
  ds.stride = int(binio::get<uint32_t>(is));
  const auto n = binio::get<uint32_t>(is);
  for (uint32_t i = 0; i < n; ++i) {
    Trajectory tr;
    tr.class_id = int(binio::get<uint32_t>(is));
    tr.seed = binio::get<uint64_t>(is);
    const int64_t frames = binio::get<uint32_t>(is);
    for (auto kind : {ControlKind::kIntensity, ControlKind::kPitch, ControlKind::kBeats}) {
      Tensor t = Tensor::zeros({frames, kind_dims(kind)});
      binio::get_floats(is, t.mutable_data());
      tr.targets[kind] = t;
    }
    const auto nrec = binio::get<uint32_t>(is);
    for (uint32_t r = 0; r < nrec; ++r) {
      TrajectoryRecord rec;
      rec.step = int(binio::get<uint32_t>(is));
      rec.t = binio::get<double>(is);
      rec.z_t = Tensor::zeros({frames, kLatentChannels});
      rec.z0_hat = Tensor::zeros({frames, kLatentChannels});
      binio::get_floats(is, rec.z_t.mutable_data());
      binio::get_floats(is, rec.z0_hat.mutable_data());
      tr.records.push_back(std::move(rec));
    }
    ds.trajectories.push_back(std::move(tr));
  }
  return ds;
}

// ---------------------------------------------------------------------- heads

// Per-dimension mean target in head output units (logits for probabilities).
std::vector<double> constant_prediction(ControlKind kind, const std::vector<const Tensor*>& targets) {
  const int dims = kind_dims(kind);
  std::vector<double> mean(size_t(dims), 0.0);
  int64_t rows = 0;
  for (const Tensor* t : targets) {
    auto v = t->data();
    for (int64_t f = 0; f < t->dim(0); ++f)
      for (int d = 0; d < dims; ++d) mean[size_t(d)] += v[size_t(f * dims + d)];
    rows += t->dim(0);
  }
  if (rows == 0) throw InvalidArgument("constant prediction needs targets");
  for (auto& m : mean) {
    m /= double(rows);
    if (kind != ControlKind::kIntensity) {
      m = std::clamp(m, 1e-6, 1 - 1e-6);
      m = std::log(m / (1 - m));
    }
  }
  return mean;
}

namespace {

// Starts the output layer at the constant prediction so training spends its
// steps on structure rather than on drifting the offset (dB values sit far
// from zero).
void init_output_bias(Model& head, const std::vector<double>& level) {
  Tensor b = head.params().get("out.b");
  auto v = b.mutable_data();
  for (size_t i = 0; i < v.size(); ++i) v[i] = real(level[i]);
}

}  // namespace

LatchHead train_latch(ControlKind kind, NoiseMode mode, const LatentSet* data, const TrajectoryDataset* traj,
                      const TrainConfig& cfg, Curve* curve, const Progress& progress) {
  if (mode == NoiseMode::kBackward) {
    if (!traj || traj->records() == 0)
      throw MissingPrerequisite("trajectories",
                                "backward-simulated heads need a trajectory dataset; run `trajectories` first");
  } else if (!data || data->size() == 0 || !data->targets.count(kind)) {
    throw InvalidArgument("clean and forward heads need latents with control targets");
  }
  LatchHead head(kind, mode, cfg.seed);
  {
    std::vector<const Tensor*> targets;
    if (mode == NoiseMode::kBackward)
      for (const auto& tr : traj->trajectories) targets.push_back(&tr.targets.at(kind));
    else
      for (const auto& t : data->targets.at(kind)) targets.push_back(&t);
    init_output_bias(head, constant_prediction(kind, targets));
  }
  Adam opt(head.params(), cfg.adam);
  Rng rng(cfg.seed, 14);
  const int64_t crop = cfg.head_crop;
  const std::string phase = std::string("latch-") + kind_name(kind) + "-" + mode_name(mode);
  for (int step = 0; step < cfg.head_steps; ++step) {
    Graph g;
    Tensor total;
    for (int b = 0; b < cfg.batch; ++b) {
      Tensor input, target;
      std::optional<double> t;
      if (mode == NoiseMode::kBackward) {
        const auto& tr = traj->trajectories[size_t(rng.uniform_int(int64_t(traj->trajectories.size())))];
        const auto& rec = tr.records[size_t(rng.uniform_int(int64_t(tr.records.size())))];
        input = rec.z0_hat;
        target = tr.targets.at(kind);
        t = rec.t;
      } else {
        const auto i = size_t(rng.uniform_int(int64_t(data->size())));
        input = data->z[i];
        target = data->targets.at(kind)[i];
        if (mode == NoiseMode::kForward) {
          t = rng.uniform();
          input = forward_diffuse(input, *t, rng.normal(input.shape()));
        }
      }
      const int64_t start = rng.uniform_int(input.dim(0) - crop + 1);
      Tensor pred = head.predict(crop_frames(input, start, crop).detach(), t);
      Tensor loss = head_loss(kind, pred, crop_frames(target, start, crop).detach(), cfg.sparse_threshold);
      total = total.defined() ? ops::add(total, loss) : loss;
    }
    total = ops::scale(total, real(1.0 / cfg.batch));
    const double lv = total.item();
    check_finite(lv, phase, step);
    g.backward(total);
    opt.step();
    log_step(curve, progress, phase, step, cfg.head_steps, cfg.log_every, lv);
  }
  head.set_trained(true);
  return head;
}

ReadoutHead train_readout(ControlKind kind, const Denoiser& den, const LatentSet& data, const TrainConfig& cfg,
                          Curve* curve, const Progress& progress) {
  if (!den.trained()) throw MissingPrerequisite("denoiser", "readout training needs a trained denoiser");
  if (data.size() == 0 || !data.targets.count(kind)) throw InvalidArgument("readout training needs targets");
  ReadoutHead head(kind, cfg.seed);
  {
    std::vector<const Tensor*> targets;
    for (const auto& t : data.targets.at(kind)) targets.push_back(&t);
    init_output_bias(head, constant_prediction(kind, targets));
  }
  Adam opt(head.params(), cfg.adam);
  Rng rng(cfg.seed, 15);
  const int64_t crop = cfg.head_crop;
  const std::string phase = std::string("readout-") + kind_name(kind);
  for (int step = 0; step < cfg.head_steps; ++step) {
    Graph g;
    Tensor total;
    for (int b = 0; b < cfg.batch; ++b) {
      const auto i = size_t(rng.uniform_int(int64_t(data.size())));
      const double t = rng.uniform();
      const int64_t start = rng.uniform_int(kFrames - crop + 1);
      Tensor z0 = crop_frames(data.z[i], start, crop).detach();
      Tensor tap;
      {
        NoGradGuard ng;
        tap = den.forward(forward_diffuse(z0, t, rng.normal(z0.shape())), t, data.labels[i], true).tap;
      }
      Tensor target = crop_frames(data.targets.at(kind)[i], start, crop).detach();
      Tensor loss = head_loss(kind, head.predict(tap, t), target, cfg.sparse_threshold);
      total = total.defined() ? ops::add(total, loss) : loss;
    }
    total = ops::scale(total, real(1.0 / cfg.batch));
    const double lv = total.item();
    check_finite(lv, phase, step);
    g.backward(total);
    opt.step();
    log_step(curve, progress, phase, step, cfg.head_steps, cfg.log_every, lv);
  }
  head.set_trained(true);
  return head;
}

double evaluate_latch(const LatchHead& head, const LatentSet& data, std::optional<double> t, uint64_t seed) {
  NoGradGuard ng;
  if (!data.targets.count(head.kind())) throw InvalidArgument("evaluation set has no targets for this kind");
  double total = 0;
  for (size_t i = 0; i < data.size(); ++i) {
    Tensor input = data.z[i];
    std::optional<double> tt;
    if (head.mode() != NoiseMode::kClean) {
      tt = t.value_or(0.0);
      if (*tt > 0) {
        Rng rng(seed, 0x100 + i);
        input = forward_diffuse(input, *tt, rng.normal(input.shape()));
      }
    }
    total += head_loss(head.kind(), head.predict(input, tt), data.targets.at(head.kind())[i]).item();
  }
  return total / double(data.size());
}

double constant_baseline(ControlKind kind, const LatentSet& reference, const LatentSet& data, double threshold) {
  NoGradGuard ng;
  std::vector<const Tensor*> ref;
  for (const auto& t : reference.targets.at(kind)) ref.push_back(&t);
  const auto level = constant_prediction(kind, ref);
  double total = 0;
  for (const auto& target : data.targets.at(kind)) {
    std::vector<real> pred(size_t(target.numel()));
    for (size_t j = 0; j < pred.size(); ++j) pred[j] = real(level[j % level.size()]);
    total += head_loss(kind, Tensor::from(target.shape(), std::move(pred)), target, threshold).item();
  }
  return total / double(data.targets.at(kind).size());
}

LATCHKIT_END_NAMESPACE
