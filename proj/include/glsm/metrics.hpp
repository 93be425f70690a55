#pragma once

#include <cstdint>
#include <vector>

#include "glsm/data.hpp"
#include "glsm/nn.hpp"
#include "glsm/serialize.hpp"
#include "glsm/tensor.hpp"

namespace glsm {

struct GaussianStats {
  std::size_t dim = 0;
  std::vector<double> mean;  // dim
  std::vector<double> cov;   // dim x dim, row-major, unbiased
};

// Rows of `features` (N x F) are samples; N >= 2.
GaussianStats gaussian_stats(const Tensor& features);
double fgd_from_stats(const GaussianStats& real, const GaussianStats& gen);
double fgd(const Tensor& real_features, const Tensor& gen_features);

// Mean pairwise L1 distance with prefactor 1/(2N(N-1)) over ordered pairs.
// Clips are T x C with equal shapes.
double l1_diversity(const std::vector<Tensor>& clips);
// Subtracts each clip's per-channel time mean.
std::vector<Tensor> neutralize_translation(const std::vector<Tensor>& clips);
// l1_diversity of the neutralized clips; what evaluation reports.
double motion_diversity(const std::vector<Tensor>& clips);

struct BeatParams {
  double prominence = 0.1;  // fraction of the velocity range
  double sigma = 3.0;       // frames
};

// Per-frame velocity of the upper-body channels; v[0] = 0 and
// v[t] = ||x_t - x_{t-1}|| for t >= 1.
std::vector<double> upper_velocity(const Tensor& upper);
std::vector<std::uint32_t> extract_beats_from_upper(const Tensor& upper, double prominence = 0.1);
std::vector<std::uint32_t> extract_gesture_beats(const MotionSequence& motion,
                                                 double prominence = 0.1);

struct BeatSets {
  std::vector<std::uint32_t> gesture;
  std::vector<std::uint32_t> audio;
};

// Mean over gesture beats of exp(-d^2 / (2 sigma^2)) with d the distance to
// the nearest audio beat. Empty gesture set gives 0 (with a warning).
double beat_constancy(const BeatSets& beats, double sigma = 3.0);
// Same kernel pooled over every gesture beat of every set.
double pooled_beat_constancy(const std::vector<BeatSets>& sets, double sigma = 3.0);
double bc_gap(double bc_generated, double bc_ground_truth);

// BC of motions against their speech tracks' beats.
double motion_beat_constancy(const std::vector<MotionSequence>& motions,
                             const std::vector<SpeechTrack>& speech, const BeatParams& params = {});

double face_mse(const Tensor& generated, const Tensor& ground_truth);

struct FeatureExtractorConfig {
  std::size_t hidden = 48;
  std::size_t feature = 64;
  std::size_t window = 64;
  std::size_t steps = 400;
  std::size_t batch = 8;
  double lr = 1e-3;
  std::uint64_t seed = 1234;
};

/// Convolutional sequence autoencoder over full-body frames. The feature of
/// a clip is the time-mean of its bottleneck codes.
class FeatureExtractor {
 public:
  FeatureExtractor() = default;
  explicit FeatureExtractor(const FeatureExtractorConfig& config);

  // Fits normalisation statistics and weights on `clips` (each T x 100),
  // returns the final reconstruction loss.
  double train(const std::vector<Tensor>& clips);

  std::vector<double> features(const Tensor& clip) const;
  // N x feature matrix.
  Tensor features(const std::vector<Tensor>& clips) const;

  Checkpoint to_checkpoint() const;
  static FeatureExtractor from_checkpoint(const Checkpoint& ckpt);
  const FeatureExtractorConfig& config() const { return config_; }

  // Bottleneck codes (T/4 x feature) and reconstruction for a batch of
  // normalised clips stacked along rows.
  Tensor encode(const Tensor& x, std::size_t seq_len) const;
  Tensor decode(const Tensor& z, std::size_t latent_len) const;
  ParamList parameters() const;

 private:
  Tensor normalise(const Tensor& clip) const;

  FeatureExtractorConfig config_;
  Conv1d down1_, down2_;
  Linear bottleneck_;
  Conv1d up1_, up2_;
  std::vector<double> channel_mean_, channel_scale_;
};

}  // namespace glsm
