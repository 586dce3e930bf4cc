#include "latchkit/models.hpp"

#include <cmath>
#include <fstream>
#include <sstream>

#include "latchkit/binio.hpp"

LATCHKIT_BEGIN_NAMESPACE

namespace {

constexpr char kMagic[5] = "LCH1";
constexpr int64_t kRopePositions = 4096;

Tensor as_column(const Tensor& wave) {
  if (wave.rank() == 1) return ops::reshape(wave, {wave.dim(0), 1});
  if (wave.rank() == 2 && wave.dim(1) == 1) return wave;
  throw ShapeError("waveform must be [N] or [N, 1], got " + to_string(wave.shape()));
}

void check_latent(const Tensor& z) {
  if (z.rank() != 2 || z.dim(1) != kLatentChannels)
    throw ShapeError("latent must be [frames, 8], got " + to_string(z.shape()));
}

uint64_t mix(uint64_t seed, uint64_t tag) { return seed * 0x9e3779b97f4a7c15ULL + tag; }

}  // namespace

void save_checkpoint(const std::string& path, const Meta& meta, const ParamSet& params) {
  std::ostringstream header;
  binio::put<uint16_t>(header, static_cast<uint16_t>(meta.size()));
  for (const auto& [k, v] : meta) {
    binio::put_string(header, k);
    binio::put_string(header, v);
  }
  binio::put<uint32_t>(header, static_cast<uint32_t>(params.items().size()));
  uint64_t offset = 0;
  for (const auto& [name, t] : params.items()) {
    binio::put_string(header, name);
    binio::put<uint8_t>(header, static_cast<uint8_t>(t.rank()));
    for (int64_t d : t.shape()) binio::put<uint32_t>(header, static_cast<uint32_t>(d));
    binio::put<uint64_t>(header, offset);
    offset += static_cast<uint64_t>(t.numel());
  }
  std::ofstream os(path, std::ios::binary);
  if (!os) throw Error("cannot write checkpoint " + path);
  os.write(kMagic, 4);
  const std::string h = header.str();
  binio::put<uint32_t>(os, static_cast<uint32_t>(h.size()));
  os.write(h.data(), static_cast<std::streamsize>(h.size()));
  for (const auto& [name, t] : params.items()) binio::put_floats(os, t.data());
  if (!os) throw Error("write failed for " + path);
}

Checkpoint load_checkpoint(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw Error("cannot open checkpoint " + path);
  binio::expect_magic(is, kMagic, path);
  binio::get<uint32_t>(is);
  Checkpoint ck;
  const auto nmeta = binio::get<uint16_t>(is);
  for (int i = 0; i < nmeta; ++i) {
    std::string k = binio::get_string(is);
    ck.meta[k] = binio::get_string(is);
  }
  const auto n = binio::get<uint32_t>(is);
  std::vector<std::pair<std::string, Shape>> entries;
  std::vector<uint64_t> offsets;
  for (uint32_t i = 0; i < n; ++i) {
    std::string name = binio::get_string(is);
    Shape shape(binio::get<uint8_t>(is));
    for (auto& d : shape) d = binio::get<uint32_t>(is);
    offsets.push_back(binio::get<uint64_t>(is));
    entries.emplace_back(std::move(name), std::move(shape));
  }
  uint64_t expected = 0;
  for (size_t i = 0; i < entries.size(); ++i) {
    if (offsets[i] != expected) throw Error(path + ": non-contiguous payload at " + entries[i].first);
    Tensor t = Tensor::zeros(entries[i].second);
    binio::get_floats(is, t.mutable_data());
    expected += static_cast<uint64_t>(t.numel());
    ck.params.emplace_back(entries[i].first, t);
  }
  return ck;
}

void load_params(const Checkpoint& ckpt, ParamSet& params) {
  if (ckpt.params.size() != params.items().size())
    throw ShapeError("checkpoint holds " + std::to_string(ckpt.params.size()) + " tensors, model expects " +
                     std::to_string(params.items().size()));
  for (const auto& [name, src] : ckpt.params) {
    Tensor dst = params.get(name);
    if (dst.shape() != src.shape()) throw ShapeError("shape mismatch for " + name);
    auto s = src.data();
    std::copy(s.begin(), s.end(), dst.mutable_data().begin());
  }
}

bool Model::trained() const {
  auto it = meta_.find("trained");
  return it != meta_.end() && it->second == "1";
}

void Model::set_trained(bool flag) { meta_["trained"] = flag ? "1" : "0"; }

void Model::restore(const std::string& path, const std::string& type) {
  Checkpoint ck = load_checkpoint(path);
  auto it = ck.meta.find("type");
  if (it == ck.meta.end() || it->second != type)
    throw Error(path + ": expected a " + type + " checkpoint");
  load_params(ck, params_);
  meta_ = ck.meta;
}

// ---------------------------------------------------------------- autoencoder

Vae::Vae(uint64_t seed) {
  Rng rng(mix(seed, 1));
  const int ch[5] = {1, 16, 32, 64, kLatentChannels};
  enc_[0] = nn::Conv(params_, "enc0", 1, 16, 7, {1, 3, 1}, false, rng);
  for (int i = 1; i < 4; ++i)
    enc_[i] = nn::Conv(params_, "enc" + std::to_string(i), ch[i], ch[i + 1], 8, {4, 2, 1}, false, rng);
  dec_in_ = nn::Conv(params_, "dec_in", kLatentChannels, 64, 8, {4, 2, 1}, true, rng);
  const int dch[3] = {64, 32, 16};
  for (int s = 0; s < 3; ++s) {
    res_[2 * s] = nn::ResidualUnit(params_, "res" + std::to_string(2 * s), dch[s], 1, rng);
    res_[2 * s + 1] = nn::ResidualUnit(params_, "res" + std::to_string(2 * s + 1), dch[s], 3, rng);
    if (s < 2) up_[s] = nn::Conv(params_, "up" + std::to_string(s), dch[s], dch[s + 1], 8, {4, 2, 1}, true, rng);
  }
  dec_out_ = nn::Conv(params_, "dec_out", 16, 1, 7, {1, 3, 1}, false, rng);
  meta_["type"] = "vae";
  meta_["latent_scale"] = "1";
  set_trained(false);
}

Vae Vae::load(const std::string& path) {
  Vae v;
  v.restore(path, "vae");
  return v;
}

double Vae::latent_scale() const { return std::stod(meta_.at("latent_scale")); }

void Vae::set_latent_scale(double s) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.9g", s);
  meta_["latent_scale"] = buf;
}

void Vae::require_trained() const {
  if (!trained()) throw MissingPrerequisite("vae", "autoencoder parameters are untrained; run `train vae` first");
}

Tensor Vae::encode_raw(const Tensor& wave) const {
  Tensor x = as_column(wave);
  if (x.dim(0) % kHop != 0 || x.dim(0) == 0)
    throw ShapeError("waveform length must be a positive multiple of 64");
  x = ops::gelu(enc_[0](x));
  x = ops::gelu(enc_[1](x));
  x = ops::gelu(enc_[2](x));
  return enc_[3](x);
}

Tensor Vae::decode_raw(const Tensor& z) const {
  check_latent(z);
  Tensor x = dec_in_(z);
  for (int s = 0; s < 3; ++s) {
    x = res_[2 * s + 1](res_[2 * s](x));
    x = ops::gelu(x);
    x = s < 2 ? up_[s](x) : dec_out_(x);
  }
  return ops::tanh(x);
}

Tensor Vae::encode(const Tensor& wave) const {
  require_trained();
  return ops::scale(encode_raw(wave), real(1.0 / latent_scale()));
}

Tensor Vae::decode(const Tensor& z) const {
  require_trained();
  return decode_raw(ops::scale(z, real(latent_scale())));
}

// ------------------------------------------------------------------- denoiser

Denoiser::Denoiser(uint64_t seed) : rope_(kRopePositions, kDim / kHeads) {
  Rng rng(mix(seed, 2));
  in_ = nn::Linear(params_, "in", kLatentChannels, kDim, rng);
  time_ = nn::Linear(params_, "time", nn::kFourierDims, kDim, rng);
  class_table_ = params_.add("class", nn::uniform({kClasses + 1, kDim}, 1.0, rng));
  for (int i = 0; i < kLayers; ++i)
    layers_[i] = nn::TransformerLayer(params_, "layer" + std::to_string(i), kDim, kHeads, 2 * kDim, rng);
  ln_out_ = nn::LayerNorm(params_, "ln_out", kDim);
  out_ = nn::Linear(params_, "out", kDim, kLatentChannels, rng);
  meta_["type"] = "denoiser";
  set_trained(false);
}

Denoiser Denoiser::load(const std::string& path) {
  Denoiser d;
  d.restore(path, "denoiser");
  return d;
}

DenoiseOutput Denoiser::forward(const Tensor& z_t, double t, int class_id, bool tap_only) const {
  check_latent(z_t);
  if (class_id < 0 || class_id > kClasses) throw InvalidArgument("invalid class id " + std::to_string(class_id));
  if (!(t >= 0.0 && t <= 1.0)) throw InvalidArgument("t outside [0, 1]");
  const int64_t F = z_t.dim(0);
  if (F + 2 > kRopePositions) throw ShapeError("sequence too long");
  Tensor h = ops::concat({ops::gather_rows(class_table_, {class_id}), time_(nn::fourier_features(t)), in_(z_t)}, 0);
  DenoiseOutput out;
  for (int i = 0; i < kLayers; ++i) {
    h = layers_[i](h, rope_);
    if (i + 1 == kTapLayer) {
      out.tap = ops::slice(h, 0, 2, F + 2);
      if (tap_only) return out;
    }
  }
  out.v = out_(ln_out_(ops::slice(h, 0, 2, F + 2)));
  return out;
}

Tensor Denoiser::velocity(const Tensor& z_t, double t, int class_id) const { return forward(z_t, t, class_id).v; }

// ---------------------------------------------------------------------- heads

const char* mode_name(NoiseMode mode) {
  switch (mode) {
    case NoiseMode::kClean: return "clean";
    case NoiseMode::kForward: return "forward";
    case NoiseMode::kBackward: return "backward";
  }
  return "?";
}

NoiseMode parse_mode(const std::string& name) {
  if (name == "clean") return NoiseMode::kClean;
  if (name == "forward" || name == "F") return NoiseMode::kForward;
  if (name == "backward" || name == "B") return NoiseMode::kBackward;
  throw InvalidArgument("unknown noise mode '" + name + "' (clean, forward, backward)");
}

LatchHead::LatchHead(ControlKind kind, NoiseMode mode, uint64_t seed)
    : kind_(kind), mode_(mode), rope_(kRopePositions, kDim / kHeads) {
  Rng rng(mix(seed, 3));
  in_ = nn::Linear(params_, "in", kLatentChannels, kDim, rng);
  if (mode != NoiseMode::kClean) time_ = nn::Linear(params_, "time", nn::kFourierDims, kDim, rng);
  for (int i = 0; i < kLayers; ++i)
    layers_[i] = nn::TransformerLayer(params_, "layer" + std::to_string(i), kDim, kHeads, 2 * kDim, rng);
  ln_out_ = nn::LayerNorm(params_, "ln_out", kDim);
  out_ = nn::Linear(params_, "out", kDim, kind_dims(kind), rng);
  meta_["type"] = "latch";
  meta_["kind"] = kind_name(kind);
  meta_["noise_mode"] = mode_name(mode);
  set_trained(false);
}

LatchHead LatchHead::load(const std::string& path) {
  Checkpoint ck = load_checkpoint(path);
  if (!ck.meta.count("kind") || !ck.meta.count("noise_mode")) throw Error(path + ": not a latent-control head");
  LatchHead h(parse_kind(ck.meta["kind"]), parse_mode(ck.meta["noise_mode"]));
  h.restore(path, "latch");
  return h;
}

Tensor LatchHead::predict(const Tensor& z, std::optional<double> t) const {
  check_latent(z);
  const int64_t F = z.dim(0);
  if (F + 1 > kRopePositions) throw ShapeError("sequence too long");
  Tensor h = in_(z);
  const bool conditioned = mode_ != NoiseMode::kClean;
  if (conditioned) {
    if (!t) throw InvalidArgument(std::string("noise-conditioned head (") + mode_name(mode_) + ") requires t");
    h = ops::concat({time_(nn::fourier_features(*t)), h}, 0);
  }
  for (const auto& layer : layers_) h = layer(h, rope_);
  if (conditioned) h = ops::slice(h, 0, 1, F + 1);
  return out_(ln_out_(h));
}

ReadoutHead::ReadoutHead(ControlKind kind, uint64_t seed) : kind_(kind) {
  Rng rng(mix(seed, 4));
  in_ = nn::Linear(params_, "in", Denoiser::kDim, kHidden, rng);
  time_ = nn::Linear(params_, "time", nn::kFourierDims, kHidden, rng);
  hidden_ = nn::Linear(params_, "hidden", kHidden, kHidden, rng);
  out_ = nn::Linear(params_, "out", kHidden, kind_dims(kind), rng);
  meta_["type"] = "readout";
  meta_["kind"] = kind_name(kind);
  set_trained(false);
}

ReadoutHead ReadoutHead::load(const std::string& path) {
  Checkpoint ck = load_checkpoint(path);
  if (!ck.meta.count("kind")) throw Error(path + ": not a readout head");
  ReadoutHead h(parse_kind(ck.meta["kind"]));
  h.restore(path, "readout");
  return h;
}

Tensor ReadoutHead::predict(const Tensor& tap, double t) const {
  if (tap.rank() != 2 || tap.dim(1) != Denoiser::kDim)
    throw ShapeError("readout expects [frames, 128], got " + to_string(tap.shape()));
  Tensor h = ops::gelu(ops::add(in_(tap), ops::reshape(time_(nn::fourier_features(t)), {kHidden})));
  h = ops::gelu(hidden_(h));
  return out_(h);
}

LATCHKIT_END_NAMESPACE
