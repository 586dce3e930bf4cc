#include "latchkit/world.hpp"

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <fstream>
#include <map>
#include <numbers>
#include <sstream>

#include "latchkit/binio.hpp"
#include "latchkit/ops.hpp"

LATCHKIT_BEGIN_NAMESPACE

namespace {

constexpr int kFrameLength = 256;
constexpr int kEnvLength = 128;
constexpr int kSavgolWindow = 9;
constexpr int kSavgolOrder = 2;
constexpr double kPi = std::numbers::pi;

int click_samples() { return static_cast<int>(std::lround(kClickSeconds * kSampleRate)); }

// Every click uses the same burst so that the autoencoder can learn it.
const std::vector<double>& click_template() {
  static const std::vector<double> burst = [] {
    const int n = click_samples();
    std::vector<double> c(static_cast<size_t>(n));
    Rng rng(0x5eed, 7);
    for (int j = 0; j < n; ++j) {
      c[static_cast<size_t>(j)] = kClickAmplitude * (1.0 - static_cast<double>(j) / n) * (2.0 * rng.uniform() - 1.0);
    }
    return c;
  }();
  return burst;
}

double envelope_at(const std::vector<double>& knots, double u) {
  if (knots.size() == 1) return knots[0];
  const double pos = u * static_cast<double>(knots.size() - 1);
  const size_t i = std::min(static_cast<size_t>(pos), knots.size() - 2);
  const double frac = pos - static_cast<double>(i);
  return knots[i] * (1.0 - frac) + knots[i + 1] * frac;
}

double osc(int cls, double phase) {
  const double frac = phase - std::floor(phase);
  switch (cls) {
    case 0: return std::sin(2.0 * kPi * frac);
    case 1: return 2.0 * frac - 1.0;
    default: return frac < 0.5 ? 1.0 : -1.0;
  }
}

double osc_rms(int cls) {
  switch (cls) {
    case 0: return std::sqrt(0.5);
    case 1: return std::sqrt(1.0 / 3.0);
    default: return 1.0;
  }
}

double to_db(double rms) { return 20.0 * std::log10(rms + 1e-6); }

std::vector<double> hann(int n) {
  std::vector<double> w(static_cast<size_t>(n));
  for (int j = 0; j < n; ++j) w[static_cast<size_t>(j)] = 0.5 * (1.0 - std::cos(2.0 * kPi * j / n));
  return w;
}

Tensor to_tensor(Shape shape, const std::vector<double>& v) {
  return Tensor::from(std::move(shape), std::vector<real>(v.begin(), v.end()));
}

// Frame f is centered on the middle of hop cell f; out-of-range samples read 0.
std::vector<int64_t> frame_index(int length, int offset) {
  std::vector<int64_t> idx(static_cast<size_t>(kFrames) * length);
  for (int f = 0; f < kFrames; ++f) {
    for (int j = 0; j < length; ++j) {
      const int64_t s = static_cast<int64_t>(f) * kHop + offset + j;
      idx[static_cast<size_t>(f) * length + j] = (s < 0 || s >= kSamples) ? -1 : s;
    }
  }
  return idx;
}

struct Tables {
  std::vector<int64_t> frames = frame_index(kFrameLength, kHop / 2 - kFrameLength / 2);
  std::vector<int64_t> env_frames = frame_index(kEnvLength, kHop / 2 - kEnvLength / 2);
  Tensor hann_frame;
  Tensor env_weights;  // [kEnvLength, 1], normalized Hann
  Tensor dft_cos, dft_sin;  // [256, 129]
  Tensor matched;  // [129, 16]
  Tensor smoother;  // [kFrames, kFrames]

  Tables() {
    const auto w = hann(kFrameLength);
    hann_frame = to_tensor({kFrameLength}, w);
    const auto we = hann(kEnvLength);
    double total = 0;
    for (double v : we) total += v;
    std::vector<double> scaled(we.size());
    // Weighted mean square; a sine of amplitude A gives A^2 / 2.
    for (size_t j = 0; j < we.size(); ++j) scaled[j] = we[j] / total;
    env_weights = to_tensor({kEnvLength, 1}, scaled);

    const int bins = kFrameLength / 2 + 1;
    std::vector<double> c(static_cast<size_t>(kFrameLength) * bins), s(c.size());
    for (int j = 0; j < kFrameLength; ++j) {
      for (int b = 0; b < bins; ++b) {
        const double a = 2.0 * kPi * j * b / kFrameLength;
        c[static_cast<size_t>(j) * bins + b] = std::cos(a);
        s[static_cast<size_t>(j) * bins + b] = -std::sin(a);
      }
    }
    dft_cos = to_tensor({kFrameLength, bins}, c);
    dft_sin = to_tensor({kFrameLength, bins}, s);

    // Column k: unit-norm magnitude spectrum of a windowed sinusoid at bin k.
    std::vector<double> m(static_cast<size_t>(bins) * kPitchBins);
    for (int k = 0; k < kPitchBins; ++k) {
      const double f = pitch_frequency(k);
      std::vector<double> mag(static_cast<size_t>(bins));
      double norm = 0;
      for (int b = 0; b < bins; ++b) {
        double re = 0, im = 0;
        for (int j = 0; j < kFrameLength; ++j) {
          const double x = w[static_cast<size_t>(j)] * std::sin(2.0 * kPi * f * j / kSampleRate);
          re += x * c[static_cast<size_t>(j) * bins + b];
          im += x * s[static_cast<size_t>(j) * bins + b];
        }
        mag[static_cast<size_t>(b)] = std::hypot(re, im);
        norm += mag[static_cast<size_t>(b)] * mag[static_cast<size_t>(b)];
      }
      norm = std::sqrt(norm);
      for (int b = 0; b < bins; ++b) m[static_cast<size_t>(b) * kPitchBins + k] = mag[static_cast<size_t>(b)] / norm;
    }
    matched = to_tensor({bins, kPitchBins}, m);
    smoother = savgol_matrix(kFrames, kSavgolWindow, kSavgolOrder);
  }
};

const Tables& tables() {
  static const Tables t;
  return t;
}

Tensor flat_wave(const Tensor& wave) {
  if (wave.numel() != kSamples) {
    throw ShapeError("extractor: expected " + std::to_string(kSamples) + " samples, got shape " +
                     to_string(wave.shape()));
  }
  return wave.rank() == 1 ? wave : ops::reshape(wave, {kSamples});
}

int mirror(int i, int n) {
  if (n == 1) return 0;
  const int period = 2 * (n - 1);
  i %= period;
  if (i < 0) i += period;
  return i < n ? i : period - i;
}

void check_savgol(int window, int polyorder) {
  if (window < 1 || window % 2 == 0) throw Error("savgol: window must be a positive odd number, got " + std::to_string(window));
  if (polyorder < 0 || polyorder >= window) {
    throw Error("savgol: polyorder " + std::to_string(polyorder) + " must be below the window " + std::to_string(window));
  }
}

}  // namespace

const char* kind_name(ControlKind kind) {
  switch (kind) {
    case ControlKind::kIntensity: return "intensity";
    case ControlKind::kPitch: return "pitch";
    case ControlKind::kBeats: return "beats";
  }
  return "?";
}

ControlKind parse_kind(const std::string& name) {
  if (name == "intensity") return ControlKind::kIntensity;
  if (name == "pitch") return ControlKind::kPitch;
  if (name == "beats") return ControlKind::kBeats;
  throw Error("unknown control kind '" + name + "' (expected intensity, pitch or beats)");
}

int kind_dims(ControlKind kind) { return kind == ControlKind::kPitch ? kPitchBins : 1; }

double pitch_frequency(int bin) { return 110.0 * std::pow(2.0, bin / 5.0); }

std::vector<double> beat_times(const WorldSpec& spec) {
  if (!(spec.bpm > 0)) throw Error("synth: tempo must be positive");
  const double duration = static_cast<double>(kSamples) / kSampleRate;
  const double period = 60.0 / spec.bpm;
  const int count = static_cast<int>(std::floor((duration - spec.beat_phase) / period));
  std::vector<double> t;
  for (int i = 0; i < count; ++i) t.push_back(spec.beat_phase + i * period);
  return t;
}

Clip synth(const WorldSpec& spec) {
  if (spec.pitches.empty()) throw Error("synth: empty pitch sequence");
  if (spec.envelope.empty()) throw Error("synth: empty envelope");
  if (spec.class_label < 0 || spec.class_label >= kClasses) throw Error("synth: class label out of range");
  for (int p : spec.pitches) {
    if (p < 0 || p >= kPitchBins) throw Error("synth: pitch bin " + std::to_string(p) + " off the grid");
  }
  const size_t nseg = spec.pitches.size();
  auto segment = [&](int64_t i) { return std::min(static_cast<size_t>(i * static_cast<int64_t>(nseg) / kSamples), nseg - 1); };

  std::vector<double> x(kSamples);
  double phase = 0;
  for (int i = 0; i < kSamples; ++i) {
    const double env = envelope_at(spec.envelope, static_cast<double>(i) / (kSamples - 1));
    x[static_cast<size_t>(i)] = env * osc(spec.class_label, phase);
    phase += pitch_frequency(spec.pitches[segment(i)]) / kSampleRate;
    phase -= std::floor(phase);
  }
  std::vector<double> beats = spec.clicks ? beat_times(spec) : std::vector<double>{};
  const auto& burst = click_template();
  for (double bt : beats) {
    const auto start = static_cast<int64_t>(std::lround(bt * kSampleRate));
    for (size_t j = 0; j < burst.size(); ++j) {
      const int64_t s = start + static_cast<int64_t>(j);
      if (s < kSamples) x[static_cast<size_t>(s)] += burst[j];
    }
  }

  Clip clip;
  clip.samples.resize(kSamples);
  for (int i = 0; i < kSamples; ++i) clip.samples[static_cast<size_t>(i)] = static_cast<real>(std::clamp(x[static_cast<size_t>(i)], -1.0, 1.0));

  std::vector<double> db(kFrames), pitch(static_cast<size_t>(kFrames) * kPitchBins, 0.0), beat(kFrames, 0.0);
  for (int f = 0; f < kFrames; ++f) {
    const int center = f * kHop + kHop / 2;
    db[static_cast<size_t>(f)] = to_db(envelope_at(spec.envelope, static_cast<double>(center) / (kSamples - 1)) * osc_rms(spec.class_label));
    pitch[static_cast<size_t>(f) * kPitchBins + spec.pitches[segment(center)]] = 1.0;
  }
  for (double bt : beats) {
    const auto f = static_cast<int64_t>(std::lround(bt * kSampleRate)) / kHop;
    if (f < kFrames) beat[static_cast<size_t>(f)] = 1.0;
  }
  clip.intensity = {ControlKind::kIntensity, to_tensor({kFrames, 1}, savgol(db, kSavgolWindow, kSavgolOrder))};
  clip.pitch = {ControlKind::kPitch, to_tensor({kFrames, kPitchBins}, pitch)};
  clip.beats = {ControlKind::kBeats, to_tensor({kFrames, 1}, beat)};
  return clip;
}

WorldSpec random_spec(Rng& rng) {
  WorldSpec s;
  s.class_label = static_cast<int>(rng.uniform_int(kClasses));
  s.envelope.resize(5);
  for (auto& k : s.envelope) k = 0.05 + 0.20 * rng.uniform();
  s.pitches.resize(static_cast<size_t>(1 + rng.uniform_int(4)));
  for (auto& p : s.pitches) p = static_cast<int>(rng.uniform_int(kPitchBins));
  s.bpm = 60.0 + 120.0 * rng.uniform();
  s.beat_phase = rng.uniform() * 60.0 / s.bpm;
  return s;
}

WorldSpec dataset_spec(uint64_t seed, int64_t index) {
  Rng rng(seed, 0x10000 + static_cast<uint64_t>(index));
  return random_spec(rng);
}

Tensor extract_intensity(const Tensor& wave) {
  const auto& tb = tables();
  Tensor x = flat_wave(wave);
  Tensor frames = ops::gather(x, tb.frames, {kFrames, kFrameLength});
  Tensor ms = ops::mean(ops::square(frames), 1, true);  // [F, 1]
  Tensor rms = ops::sqrt(ops::add_scalar(ms, real(1e-20)));
  Tensor db = ops::scale(ops::log(ops::add_scalar(rms, real(1e-6))), static_cast<real>(20.0 / std::numbers::ln10));
  return ops::matmul(tb.smoother, db);
}

Tensor extract_pitch(const Tensor& wave) {
  const auto& tb = tables();
  Tensor x = flat_wave(wave);
  Tensor frames = ops::mul(ops::gather(x, tb.frames, {kFrames, kFrameLength}), tb.hann_frame);
  Tensor re = ops::matmul(frames, tb.dft_cos);
  Tensor im = ops::matmul(frames, tb.dft_sin);
  Tensor mag = ops::sqrt(ops::add_scalar(ops::add(ops::square(re), ops::square(im)), real(1e-12)));
  Tensor pooled = ops::matmul(mag, tb.matched);  // [F, 16]
  // Temperature 0.1 relative to the frame maximum; the 1e-3 floor keeps
  // silent frames near uniform.
  Tensor denom = ops::scale(ops::add_scalar(ops::max_last(pooled), real(1e-3)), real(0.1));
  Tensor logits = ops::transpose(ops::div(ops::transpose(pooled), ops::reshape(denom, {kFrames})));
  return ops::softmax(logits);
}

Tensor extract_beats(const Tensor& wave) {
  const auto& tb = tables();
  Tensor x = flat_wave(wave);
  // RMS amplitude envelope: a zero-mean click on top of a louder tone still
  // adds energy, whereas it would average out of |x|.
  Tensor win = ops::gather(ops::square(x), tb.env_frames, {kFrames, kEnvLength});
  auto amplitude = [](const Tensor& ms) {
    return ops::scale(ops::sqrt(ops::add_scalar(ms, real(1e-12))), static_cast<real>(std::numbers::sqrt2));
  };
  Tensor env = amplitude(ops::matmul(win, tb.env_weights));  // [F, 1]
  // The frame before the clip is silence.
  Tensor before = amplitude(Tensor::zeros({1, 1}));
  Tensor prev = ops::concat({before, ops::slice(env, 0, 0, kFrames - 1)}, 0);
  Tensor rise = ops::relu(ops::sub(env, prev));
  Tensor p = ops::add_scalar(ops::scale(ops::sigmoid(ops::scale(rise, real(10))), real(2)), real(-1));
  return ops::clamp(p, real(0), real(1));
}

Tensor extract(ControlKind kind, const Tensor& wave) {
  switch (kind) {
    case ControlKind::kIntensity: return extract_intensity(wave);
    case ControlKind::kPitch: return extract_pitch(wave);
    case ControlKind::kBeats: return extract_beats(wave);
  }
  throw Error("extract: unknown kind");
}

ControlTrack extract_track(ControlKind kind, const Tensor& wave) {
  NoGradGuard no_grad;
  return {kind, extract(kind, wave).detach()};
}

std::vector<double> savgol_coefficients(int window, int polyorder) {
  check_savgol(window, polyorder);
  const int h = window / 2;
  Eigen::MatrixXd a(window, polyorder + 1);
  for (int i = 0; i < window; ++i) {
    for (int p = 0; p <= polyorder; ++p) a(i, p) = std::pow(static_cast<double>(i - h), p);
  }
  // Row 0 of the pseudo-inverse evaluates the fitted polynomial at the center.
  Eigen::MatrixXd pinv = a.completeOrthogonalDecomposition().pseudoInverse();
  std::vector<double> c(static_cast<size_t>(window));
  for (int i = 0; i < window; ++i) c[static_cast<size_t>(i)] = pinv(0, i);
  return c;
}

std::vector<double> savgol(const std::vector<double>& x, int window, int polyorder) {
  check_savgol(window, polyorder);
  const int n = static_cast<int>(x.size());
  if (n < window) throw Error("savgol: series of length " + std::to_string(n) + " is shorter than the window");
  const auto c = savgol_coefficients(window, polyorder);
  const int h = window / 2;
  std::vector<double> y(x.size());
  for (int i = 0; i < n; ++i) {
    double acc = 0;
    for (int k = 0; k < window; ++k) acc += c[static_cast<size_t>(k)] * x[static_cast<size_t>(mirror(i + k - h, n))];
    y[static_cast<size_t>(i)] = acc;
  }
  return y;
}

Tensor savgol_matrix(int n, int window, int polyorder) {
  check_savgol(window, polyorder);
  if (n < window) throw Error("savgol: series of length " + std::to_string(n) + " is shorter than the window");
  const auto c = savgol_coefficients(window, polyorder);
  const int h = window / 2;
  std::vector<double> m(static_cast<size_t>(n) * n, 0.0);
  for (int i = 0; i < n; ++i) {
    for (int k = 0; k < window; ++k) m[static_cast<size_t>(i) * n + mirror(i + k - h, n)] += c[static_cast<size_t>(k)];
  }
  return to_tensor({n, n}, m);
}

std::vector<double> resample_track(const std::vector<double>& x, int target_frames) {
  if (target_frames < 1) throw Error("resample_track: target_frames must be at least 1");
  if (x.size() < 2) throw Error("resample_track: need at least two input frames");
  if (static_cast<int>(x.size()) == target_frames) return x;
  std::vector<double> y(static_cast<size_t>(target_frames));
  const double scale = target_frames == 1 ? 0.0 : static_cast<double>(x.size() - 1) / (target_frames - 1);
  for (int i = 0; i < target_frames; ++i) {
    const double pos = i * scale;
    const size_t j = std::min(static_cast<size_t>(pos), x.size() - 2);
    const double frac = pos - static_cast<double>(j);
    y[static_cast<size_t>(i)] = x[j] * (1.0 - frac) + x[j + 1] * frac;
  }
  y.back() = target_frames == 1 ? x.front() : x.back();
  return y;
}

void write_wav(const std::string& path, const std::vector<real>& samples, int sample_rate) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw Error("cannot write " + path);
  const auto data_bytes = static_cast<uint32_t>(samples.size() * 2);
  os.write("RIFF", 4);
  binio::put<uint32_t>(os, 36 + data_bytes);
  os.write("WAVEfmt ", 8);
  binio::put<uint32_t>(os, 16);
  binio::put<uint16_t>(os, 1);  // PCM
  binio::put<uint16_t>(os, 1);  // mono
  binio::put<uint32_t>(os, static_cast<uint32_t>(sample_rate));
  binio::put<uint32_t>(os, static_cast<uint32_t>(sample_rate * 2));
  binio::put<uint16_t>(os, 2);
  binio::put<uint16_t>(os, 16);
  os.write("data", 4);
  binio::put<uint32_t>(os, data_bytes);
  for (real v : samples) {
    const double c = std::clamp(static_cast<double>(v), -1.0, 1.0);
    binio::put<int16_t>(os, static_cast<int16_t>(std::lround(c * 32767.0)));
  }
  if (!os) throw Error("write failed: " + path);
}

std::vector<real> read_wav(const std::string& path, int* sample_rate) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw Error("cannot read " + path);
  char tag[4];
  is.read(tag, 4);
  if (!is || std::string(tag, 4) != "RIFF") throw Error(path + ": not a RIFF file");
  binio::get<uint32_t>(is);
  is.read(tag, 4);
  if (!is || std::string(tag, 4) != "WAVE") throw Error(path + ": not a WAVE file");
  uint16_t channels = 0, bits = 0;
  uint32_t rate = 0;
  while (true) {
    is.read(tag, 4);
    if (!is) throw Error(path + ": missing data chunk");
    const auto size = binio::get<uint32_t>(is);
    const std::string id(tag, 4);
    if (id == "fmt ") {
      const auto format = binio::get<uint16_t>(is);
      channels = binio::get<uint16_t>(is);
      rate = binio::get<uint32_t>(is);
      binio::get<uint32_t>(is);
      binio::get<uint16_t>(is);
      bits = binio::get<uint16_t>(is);
      if (format != 1 || bits != 16 || channels != 1) throw Error(path + ": only 16-bit PCM mono is supported");
      is.ignore(size - 16);
    } else if (id == "data") {
      if (bits == 0) throw Error(path + ": data chunk before fmt chunk");
      std::vector<real> out(size / 2);
      for (auto& v : out) v = static_cast<real>(binio::get<int16_t>(is) / 32767.0);
      if (sample_rate) *sample_rate = static_cast<int>(rate);
      return out;
    } else {
      is.ignore(size);
    }
  }
}

void write_tracks_csv(const std::string& path, const std::vector<ControlTrack>& tracks) {
  std::ofstream os(path);
  if (!os) throw Error("cannot write " + path);
  os << "frame,kind,dim,value\n";
  char buf[64];
  for (const auto& tr : tracks) {
    auto v = tr.values.data();
    for (int64_t f = 0; f < tr.frames(); ++f) {
      for (int64_t d = 0; d < tr.dims(); ++d) {
        std::snprintf(buf, sizeof buf, "%.9g", static_cast<double>(v[static_cast<size_t>(f * tr.dims() + d)]));
        os << f << ',' << kind_name(tr.kind) << ',' << d << ',' << buf << '\n';
      }
    }
  }
  if (!os) throw Error("write failed: " + path);
}

std::vector<ControlTrack> read_tracks_csv(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw Error("cannot read " + path);
  std::string line;
  std::getline(is, line);
  if (line.rfind("frame,kind,dim,value", 0) != 0) throw Error(path + ": expected header frame,kind,dim,value");
  struct Acc {
    int64_t frames = 0, dims = 0;
    std::map<std::pair<int64_t, int64_t>, double> v;
  };
  std::map<ControlKind, Acc> acc;
  std::vector<ControlKind> order;
  int lineno = 1;
  while (std::getline(is, line)) {
    ++lineno;
    if (line.empty()) continue;
    std::stringstream ss(line);
    std::string f, k, d, val;
    if (!std::getline(ss, f, ',') || !std::getline(ss, k, ',') || !std::getline(ss, d, ',') || !std::getline(ss, val)) {
      throw Error(path + ":" + std::to_string(lineno) + ": malformed row");
    }
    const ControlKind kind = parse_kind(k);
    if (!acc.count(kind)) order.push_back(kind);
    auto& a = acc[kind];
    const int64_t fi = std::stoll(f), di = std::stoll(d);
    if (fi < 0 || di < 0) throw Error(path + ":" + std::to_string(lineno) + ": negative index");
    a.frames = std::max(a.frames, fi + 1);
    a.dims = std::max(a.dims, di + 1);
    a.v[{fi, di}] = std::stod(val);
  }
  std::vector<ControlTrack> out;
  for (ControlKind kind : order) {
    const auto& a = acc[kind];
    if (static_cast<int64_t>(a.v.size()) != a.frames * a.dims) throw Error(path + ": incomplete " + kind_name(kind) + " track");
    Tensor t = Tensor::zeros({a.frames, a.dims});
    auto dst = t.mutable_data();
    for (const auto& [key, value] : a.v) dst[static_cast<size_t>(key.first * a.dims + key.second)] = static_cast<real>(value);
    out.push_back({kind, t});
  }
  return out;
}

LATCHKIT_END_NAMESPACE
