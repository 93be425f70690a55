#pragma once

#include <array>
#include <cstdint>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "glsm/data.hpp"
#include "glsm/nn.hpp"
#include "glsm/optim.hpp"
#include "glsm/rng.hpp"
#include "glsm/serialize.hpp"
#include "glsm/tensor.hpp"

namespace glsm {

struct RvqConfig {
  std::size_t hidden = 256;
  std::size_t d_code = 128;
  std::size_t codebook_size = 1024;
  std::size_t layers = 4;
  std::size_t downsample = 4;  // two stride-2 blocks
  double commitment = 0.25;
  double ema_decay = 0.99;
  std::size_t dead_window = 256;  // batches without use before a reset
  std::size_t steps = 30000;
  std::size_t batch = 8;
  std::size_t window = 64;
  double lr = 2e-4;
  std::uint64_t seed = 0;
};

nlohmann::json to_json(const RvqConfig& c);
RvqConfig rvq_config_from_json(const nlohmann::json& j);

struct NearestCode {
  std::size_t index = 0;
  double distance2 = 0.0;
};

// Arg-min squared L2 over the rows of `codebook` (C x d); ties go to the
// lowest index.
NearestCode quantize_layer(std::span<const double> v, const Tensor& codebook);

struct QuantizationResult {
  std::vector<std::vector<std::uint32_t>> indices;  // [layer][row]
  Tensor quantized;                                 // forward = sum of codes, gradient straight through
  std::vector<std::vector<double>> codes;           // [layer] selected codes, rows x d
  std::vector<std::vector<double>> residuals;       // [layer] residual entering the layer
  std::vector<double> final_residual;
  Tensor commitment;                                // scalar, already weighted
};

// Layer l quantizes r_l = r_{l-1} - code_{l-1}, r_0 = latent.
QuantizationResult residual_quantize(const Tensor& latent, const std::vector<Tensor>& codebooks,
                                     double commitment_weight);

/// Residual-VQ autoencoder for one body region.
class RegionCodec {
 public:
  RegionCodec() = default;
  RegionCodec(std::size_t width, const RvqConfig& config, std::uint64_t seed, bool zero_init_out = false);

  std::size_t width() const { return width_; }
  const RvqConfig& config() const { return config_; }

  // Normalised frames (B*T x width) to latents (B*T/4 x d_code) and back.
  Tensor encode_normalised(const Tensor& x, std::size_t seq_len) const;
  Tensor decode_normalised(const Tensor& z, std::size_t latent_len) const;

  // Raw region frames T x width <-> latent T/4 x d_code. decode() takes any
  // latent (typically a quantized one) and returns raw frames.
  Tensor encode(const Tensor& frames) const;
  Tensor decode(const Tensor& latent) const;
  QuantizationResult quantize(const Tensor& latent) const;
  // encode -> residual quantize -> decode, raw units.
  Tensor reconstruct(const Tensor& frames) const;
  // Snaps a latent to its residual code sum.
  Tensor snap(const Tensor& latent) const;

  Tensor normalise(const Tensor& frames) const;
  Tensor denormalise(const Tensor& frames) const;
  void fit_normalisation(const std::vector<Tensor>& clips);

  // Codebooks are updated by EMA, not by the optimizer.
  ParamList parameters() const;
  std::vector<Tensor>& codebooks() { return codebooks_; }
  const std::vector<Tensor>& codebooks() const { return codebooks_; }
  const std::vector<std::vector<double>>& usage() const { return usage_; }

  // One training step on a batch of normalised windows; returns
  // {reconstruction, commitment}. Initialises codebooks on first call.
  std::pair<double, double> train_step(const Tensor& batch, std::size_t seq_len, Adam& opt, Rng& rng);

  // Code perplexity of each layer over the given latents.
  std::vector<double> perplexity(const std::vector<Tensor>& latents) const;

  void save(Checkpoint& ckpt, const std::string& prefix) const;
  void load(const Checkpoint& ckpt, const std::string& prefix);

 private:
  void ema_update(const QuantizationResult& q, Rng& rng);

  std::size_t width_ = 0;
  RvqConfig config_;
  Conv1d enc_in_, enc_down1_, enc_res1a_, enc_res1b_, enc_down2_, enc_res2a_, enc_res2b_, enc_out_;
  Conv1d dec_in_, dec_res1a_, dec_res1b_, dec_up1_, dec_res2a_, dec_res2b_, dec_up2_, dec_out_;
  std::vector<Tensor> codebooks_;
  std::vector<std::vector<double>> ema_count_, ema_sum_;
  std::vector<std::vector<double>> usage_;                // lifetime use counts
  std::vector<std::vector<std::size_t>> unused_batches_;  // current idle streak
  bool initialised_ = false;
  std::vector<double> channel_mean_, channel_scale_;
};

struct RvqTrainLog {
  std::size_t step;
  std::size_t region;
  double recon;
  double commitment;
};

/// One codec per body region, trained independently.
struct RvqCodecs {
  RvqConfig config;
  std::array<RegionCodec, kNumRegions> regions;

  Checkpoint to_checkpoint() const;
  static RvqCodecs from_checkpoint(const Checkpoint& ckpt);
};

using RvqLogFn = std::function<void(const RvqTrainLog&)>;

// Trains on non-overlapping windows of the given samples. Throws
// NumericError if the loss stops being finite.
RvqCodecs train_rvq(const std::vector<CorpusSample>& corpus, const RvqConfig& config,
                    const RvqLogFn& log = {});

// Mean squared reconstruction error per region in raw channel units.
std::array<double, kNumRegions> reconstruction_mse(const RvqCodecs& codecs,
                                                   const std::vector<CorpusSample>& samples);

}  // namespace glsm
