#pragma once

// The learnable stack: a deterministic convolutional autoencoder, a
// v-prediction transformer denoiser with an activation tap, latent-control
// heads and readout heads. All forwards are pure and differentiable.

#include <map>
#include <optional>
#include <string>

#include "latchkit/diffusion.hpp"
#include "latchkit/nn.hpp"
#include "latchkit/world.hpp"

LATCHKIT_BEGIN_NAMESPACE

inline constexpr int kLatentChannels = 8;

using Meta = std::map<std::string, std::string>;

struct Checkpoint {
  Meta meta;
  std::vector<std::pair<std::string, Tensor>> params;
};

// Format: "LCH1", u32 header length, header, float32 payload. The header
// holds u16 meta count, (key, value) strings, u32 parameter count and per
// parameter (name, u8 rank, u32 dims..., u64 payload offset in floats).
void save_checkpoint(const std::string& path, const Meta& meta, const ParamSet& params);
Checkpoint load_checkpoint(const std::string& path);
// Copies checkpoint values into a set with matching names and shapes.
void load_params(const Checkpoint& ckpt, ParamSet& params);

class Model {
 public:
  virtual ~Model() = default;
  ParamSet& params() { return params_; }
  const ParamSet& params() const { return params_; }
  int64_t param_count() const { return params_.count(); }
  Meta& meta() { return meta_; }
  const Meta& meta() const { return meta_; }
  bool trained() const;
  void set_trained(bool flag);
  void save(const std::string& path) const { save_checkpoint(path, meta_, params_); }

 protected:
  // Restores parameters and meta, checking the model type tag.
  void restore(const std::string& path, const std::string& type);

  ParamSet params_;
  Meta meta_;
};

class Vae : public Model {
 public:
  explicit Vae(uint64_t seed = 0);
  static Vae load(const std::string& path);

  // Waveform [N] or [N, 1] with N a multiple of 64 -> latents [N / 64, 8],
  // divided by the latent scale. Requires trained parameters.
  Tensor encode(const Tensor& wave) const;
  // Latents [F, 8] -> waveform [64 F, 1]. Requires trained parameters.
  Tensor decode(const Tensor& z) const;
  // Unscaled versions without the trained check, used while training.
  Tensor encode_raw(const Tensor& wave) const;
  Tensor decode_raw(const Tensor& z) const;

  double latent_scale() const;
  void set_latent_scale(double s);

 private:
  void require_trained() const;
  nn::Conv enc_[4];
  nn::Conv up_[3];
  nn::ResidualUnit res_[6];
  nn::Conv dec_in_, dec_out_;
};

struct DenoiseOutput {
  Tensor v;    // same shape as z_t
  Tensor tap;  // [frames, 128], output of transformer layer 2
};

class Denoiser : public Model, public VelocityModel {
 public:
  static constexpr int kDim = 128;
  static constexpr int kLayers = 4;
  static constexpr int kHeads = 4;
  static constexpr int kTapLayer = 2;

  explicit Denoiser(uint64_t seed = 0);
  static Denoiser load(const std::string& path);

  // class_id in [0, kClasses]; kClasses is the null class. With tap_only the
  // layers after the tap are skipped and v is left undefined.
  DenoiseOutput forward(const Tensor& z_t, double t, int class_id, bool tap_only = false) const;
  Tensor velocity(const Tensor& z_t, double t, int class_id) const override;
  int null_class() const override { return kClasses; }

 private:
  nn::Linear in_, time_, out_;
  Tensor class_table_;
  nn::TransformerLayer layers_[kLayers];
  nn::LayerNorm ln_out_;
  nn::Rope rope_;
};

enum class NoiseMode { kClean, kForward, kBackward };
const char* mode_name(NoiseMode mode);
NoiseMode parse_mode(const std::string& name);

class LatchHead : public Model {
 public:
  static constexpr int kDim = 64;
  static constexpr int kLayers = 2;
  static constexpr int kHeads = 4;

  LatchHead(ControlKind kind, NoiseMode mode, uint64_t seed = 0);
  static LatchHead load(const std::string& path);

  ControlKind kind() const { return kind_; }
  NoiseMode mode() const { return mode_; }
  // Latents [F, 8] -> [F, dims]: dB values for intensity, logits otherwise.
  // t is required for noise-conditioned heads and ignored by clean heads.
  Tensor predict(const Tensor& z, std::optional<double> t = std::nullopt) const;

 private:
  ControlKind kind_;
  NoiseMode mode_;
  nn::Linear in_, time_, out_;
  nn::TransformerLayer layers_[kLayers];
  nn::LayerNorm ln_out_;
  nn::Rope rope_;
};

class ReadoutHead : public Model {
 public:
  static constexpr int kHidden = 64;

  explicit ReadoutHead(ControlKind kind, uint64_t seed = 0);
  static ReadoutHead load(const std::string& path);

  ControlKind kind() const { return kind_; }
  // Tapped activation [F, 128] -> [F, dims].
  Tensor predict(const Tensor& tap, double t) const;

 private:
  ControlKind kind_;
  nn::Linear in_, time_, hidden_, out_;
};

LATCHKIT_END_NAMESPACE
