#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "glsm/data.hpp"
#include "glsm/flow.hpp"
#include "glsm/rvq.hpp"
#include "glsm/tensor.hpp"

namespace glsm {

struct SamplingConfig {
  std::size_t steps = 8;  // M
  double guidance = 2.0;  // s
  std::uint64_t seed = 0;
  bool snap_codes = false;
  double clamp = 3.0;     // decoded motion is clipped to [-clamp, clamp]
};

// f_null + s (f_cond - f_null) at (x, t, d).
Tensor guided_field(const VelocityField& cond, const VelocityField& null, const Tensor& x,
                    std::span<const double> t, std::span<const double> d, double scale);

// Step-size conditioning value for an M-step trajectory: 1/M when it is one
// of the trained dyadic sizes, otherwise 0 (velocity mode).
double step_condition(std::size_t steps, std::size_t min_step_log2);

struct Trajectory {
  std::vector<double> times;   // t_0 = 0, ..., t_M = 1
  std::vector<Tensor> states;  // x at each time
  std::vector<Tensor> fields;  // guided field used at each step
};

// Euler integration x <- x + (1/M) f(x, t, d_cond) from t = 0 to 1. When
// `null` is empty the conditional field is used unguided.
Tensor euler_sample(const VelocityField& cond, const VelocityField& null, const Tensor& x0, std::size_t batch,
                    std::size_t steps, double d_cond, double guidance, Trajectory* trajectory = nullptr);

// Standard-normal latent grid for sample `index` of a run, independent of
// how samples are batched.
Tensor initial_noise(std::uint64_t seed, std::size_t index, std::size_t rows, std::size_t cols);

// Samples one motion per speech track. Throws std::invalid_argument for an
// untrained model.
std::vector<MotionSequence> sample(const FlowModel& model, const RvqCodecs& codecs,
                                   const std::vector<const SpeechTrack*>& tracks, const SamplingConfig& config);

struct GenerationResult {
  std::vector<MotionSequence> sequences;
  std::vector<double> seconds;  // wall clock per sequence
  double aits = 0.0;            // mean of `seconds`
};

// One sequence at a time, timed individually.
GenerationResult batch_generate(const FlowModel& model, const RvqCodecs& codecs,
                                const std::vector<const SpeechTrack*>& tracks, const SamplingConfig& config);

}  // namespace glsm
