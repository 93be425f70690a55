#pragma once

#include <array>
#include <cstdint>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "glsm/conditioning.hpp"
#include "glsm/data.hpp"
#include "glsm/generator.hpp"
#include "glsm/optim.hpp"
#include "glsm/rng.hpp"
#include "glsm/rvq.hpp"
#include "glsm/tensor.hpp"

namespace glsm {

// ---- timestep distributions ----

enum class TimeSamplerKind { Uniform, LogitNormal, Mode, CosMap, Beta };

struct TimeSampler {
  TimeSamplerKind kind = TimeSamplerKind::Beta;
  double alpha = 2.0;  // beta
  double beta = 1.2;
  double location = 0.0;  // logit-normal
  double scale = 1.0;
  double mode_scale = 1.29;  // mode
};

std::string time_sampler_name(TimeSamplerKind k);
// "uniform", "logit-normal", "mode", "cosmap", "beta".
TimeSamplerKind parse_time_sampler(const std::string& name);
nlohmann::json to_json(const TimeSampler& s);
TimeSampler time_sampler_from_json(const nlohmann::json& j);

// Draws t strictly inside (0, 1). Throws std::invalid_argument on invalid
// parameters.
double sample_timestep(const TimeSampler& sampler, Rng& rng);
double beta_pdf(double t, double alpha, double beta);
// Marsaglia-Tsang gamma variate with unit scale.
double sample_gamma(double shape, Rng& rng);

// ---- objectives ----

// Field evaluated on a batch grid whose rows are grouped by sample: one t
// and one d per sample, rows per sample = x.rows() / t.size().
using VelocityField =
    std::function<Tensor(const Tensor& x, std::span<const double> t, std::span<const double> d)>;

// (1 - t) x0 + t x1 with a per-sample t. Throws ShapeError on mismatch.
Tensor interpolate(const Tensor& x0, const Tensor& x1, std::span<const double> t);
Tensor interpolate(const Tensor& x0, const Tensor& x1, double t);

// Mean squared error of the d = 0 prediction against x1 - x0.
Tensor flow_loss(const VelocityField& field, const Tensor& x0, const Tensor& x1, std::span<const double> t);

// Regresses f(x_t, t, 2d) onto the average of two gradient-stopped steps of
// size d: f1 = f(x_t, t, d_teacher), x' = x_t + d f1, f2 = f(x', t + d,
// d_teacher). d_teacher defaults to d; the finest level passes 0 so that it
// is anchored to the instantaneous velocity. Throws std::invalid_argument
// when t + 2d > 1.
Tensor shortcut_consistency_loss(const VelocityField& field, const Tensor& x_t, std::span<const double> t,
                                 std::span<const double> d, std::span<const double> d_teacher = {});

// ---- model ----

struct FlowPlan {
  double consistency_fraction = 0.25;  // k
  std::size_t min_step_log2 = 7;       // D = {2^-min_step_log2, ..., 1}
  double condition_dropout = 0.1;
  TimeSampler sampler;
  std::size_t steps = 5000;
  std::size_t batch = 16;
  std::size_t window = 64;
  double lr = 2e-4;
  double clip_norm = 1.0;
  std::uint64_t seed = 0;
};

nlohmann::json to_json(const FlowPlan& p);
FlowPlan flow_plan_from_json(const nlohmann::json& j);

// Step sizes usable for shortcut sampling under a plan.
std::vector<double> trained_step_sizes(std::size_t min_step_log2);

/// Generator plus the per-region latent standardisation it was trained with.
class FlowModel {
 public:
  FlowModel() = default;
  FlowModel(const GeneratorConfig& gen, std::size_t min_step_log2);

  Generator& generator() { return generator_; }
  const Generator& generator() const { return generator_; }
  std::size_t min_step_log2() const { return min_step_log2_; }
  bool trained() const { return trained_; }
  void mark_trained() { trained_ = true; }

  // Field over standardised latents for a fixed condition.
  VelocityField bind(const SpeechCondition& cond) const;

  // Latent grid (frames * regions x d_latent) from per-region latents, and back.
  Tensor to_grid(const std::array<Tensor, kNumRegions>& latents) const;
  std::array<Tensor, kNumRegions> from_grid(const Tensor& grid) const;
  void fit_standardisation(const std::vector<Tensor>& raw_grids);
  Tensor standardise(const Tensor& raw_grid) const;
  Tensor destandardise(const Tensor& grid) const;

  Checkpoint to_checkpoint() const;
  static FlowModel from_checkpoint(const Checkpoint& ckpt);

 private:
  Generator generator_;
  std::size_t min_step_log2_ = 7;
  bool trained_ = false;
  std::vector<double> mean_, scale_;  // regions x d_latent
};

struct LatentExample {
  Tensor grid;  // standardised, frames * regions x d_latent
  SpeechTrack speech;
  std::size_t frames = 0;
};

// Encodes fixed-length windows with the trained codecs (raw, unstandardised grids).
std::vector<Tensor> encode_windows(const RvqCodecs& codecs, const FlowModel& model,
                                   const std::vector<CorpusSample>& windows);
std::vector<LatentExample> latent_dataset(const RvqCodecs& codecs, const FlowModel& model,
                                          const std::vector<CorpusSample>& windows);

struct FlowStepLog {
  std::size_t step = 0;
  double flow_loss = 0.0;
  double consistency_loss = 0.0;
  std::vector<double> t;            // flow-matching samples of this step
  std::vector<double> sample_loss;  // their per-sample losses
};

class FlowTrainer {
 public:
  FlowTrainer(FlowModel& model, const FlowPlan& plan);
  FlowStepLog step(const std::vector<LatentExample>& data);
  std::size_t steps_done() const { return step_; }

 private:
  FlowModel& model_;
  FlowPlan plan_;
  Adam opt_;
  Rng rng_;
  std::size_t step_ = 0;
};

using FlowLogFn = std::function<void(const FlowStepLog&)>;

// Trains for plan.steps; throws NumericError on a non-finite loss.
void train_flow(FlowModel& model, const std::vector<LatentExample>& data, const FlowPlan& plan,
                const FlowLogFn& log = {});

struct LossProfile {
  std::vector<double> bin_mean;
  std::vector<std::size_t> bin_count;
  std::vector<double> t;     // per evaluated sample
  std::vector<double> loss;  // per evaluated sample

  double mean_over(double lo, double hi) const;  // mean of bin means whose centres lie in [lo, hi]
};

LossProfile make_loss_profile(std::span<const double> t, std::span<const double> loss, std::size_t bins = 20);
// Flow loss with uniform t, `repeats` draws per example.
LossProfile profile_loss_over_t(const FlowModel& model, const std::vector<LatentExample>& data,
                                std::size_t repeats, std::uint64_t seed, std::size_t bins = 20);

}  // namespace glsm
