#include "glsm/sampler.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <stdexcept>

#include "glsm/ops.hpp"

namespace glsm {

Tensor guided_field(const VelocityField& cond, const VelocityField& null, const Tensor& x,
                    std::span<const double> t, std::span<const double> d, double scale) {
  NoGradGuard guard;
  if (scale == 1.0 || !null) return cond(x, t, d);
  Tensor fn = null(x, t, d);
  if (scale == 0.0) return fn;
  Tensor fc = cond(x, t, d);
  std::vector<double> out(fc.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = fn.at(i) + scale * (fc.at(i) - fn.at(i));
  return Tensor(fc.shape(), std::move(out));
}

double step_condition(std::size_t steps, std::size_t min_step_log2) {
  if (steps == 0) throw std::invalid_argument("sampling needs at least one step");
  for (double d : trained_step_sizes(min_step_log2))
    if (d * static_cast<double>(steps) == 1.0) return d;
  return 0.0;
}

Tensor euler_sample(const VelocityField& cond, const VelocityField& null, const Tensor& x0, std::size_t batch,
                    std::size_t steps, double d_cond, double guidance, Trajectory* traj) {
  if (steps == 0) throw std::invalid_argument("sampling needs at least one step");
  NoGradGuard guard;
  const double dt = 1.0 / static_cast<double>(steps);
  Tensor x(x0.shape(), std::vector<double>(x0.values().begin(), x0.values().end()));
  const std::vector<double> d(batch, d_cond);
  if (traj) {
    traj->times = {0.0};
    traj->states = {x};
    traj->fields.clear();
  }
  for (std::size_t i = 0; i < steps; ++i) {
    const std::vector<double> t(batch, static_cast<double>(i) * dt);
    Tensor f = guided_field(cond, null, x, t, d, guidance);
    std::vector<double> next(x.numel());
    for (std::size_t k = 0; k < next.size(); ++k) next[k] = x.at(k) + dt * f.at(k);
    x = Tensor(x.shape(), std::move(next));
    if (traj) {
      traj->times.push_back(static_cast<double>(i + 1) * dt);
      traj->states.push_back(x);
      traj->fields.push_back(f);
    }
  }
  return x;
}

Tensor initial_noise(std::uint64_t seed, std::size_t index, std::size_t rows, std::size_t cols) {
  Rng rng(mix_seed(seed, 0x5a0000 + index));
  std::vector<double> v(rows * cols);
  for (auto& x : v) x = rng.normal();
  return Tensor({rows, cols}, std::move(v));
}

namespace {

std::vector<MotionSequence> sample_from(const FlowModel& model, const RvqCodecs& codecs,
                                        const std::vector<const SpeechTrack*>& tracks, const SamplingConfig& config,
                                        std::size_t first_index) {
  if (!model.trained()) throw std::invalid_argument("untrained model (parameter manifest missing)");
  std::vector<MotionSequence> out;
  if (tracks.empty()) return out;
  NoGradGuard guard;
  const auto& gc = model.generator().config();
  const std::size_t n = gc.regions, w = gc.d_latent;
  const double d_cond = step_condition(config.steps, model.min_step_log2());

  std::size_t start = 0;
  while (start < tracks.size()) {
    // Consecutive tracks of equal length share a batch.
    const std::size_t len = tracks[start]->envelope.numel();
    std::size_t end = start + 1;
    while (end < tracks.size() && tracks[end]->envelope.numel() == len) ++end;
    const std::vector<const SpeechTrack*> group(tracks.begin() + static_cast<std::ptrdiff_t>(start),
                                                tracks.begin() + static_cast<std::ptrdiff_t>(end));
    const std::size_t b = group.size(), frames = len / 4, rows = frames * n;
    std::vector<double> noise;
    for (std::size_t i = 0; i < b; ++i) {
      Tensor z = initial_noise(config.seed, first_index + start + i, rows, w);
      noise.insert(noise.end(), z.values().begin(), z.values().end());
    }
    const auto cond = model.bind(model.generator().speech().encode(group));
    const auto null = model.bind(model.generator().speech().null_condition(b, frames));
    Tensor x = euler_sample(cond, null, Tensor({b * rows, w}, noise), b, config.steps, d_cond, config.guidance);

    for (std::size_t i = 0; i < b; ++i) {
      std::vector<std::size_t> idx(rows);
      for (std::size_t k = 0; k < rows; ++k) idx[k] = i * rows + k;
      auto latents = model.from_grid(model.destandardise(ops::gather_rows(x, idx)));
      MotionSequence m;
      m.id = static_cast<std::uint32_t>(first_index + start + i);
      for (std::size_t r = 0; r < kNumRegions; ++r) {
        const auto& codec = codecs.regions[r];
        const Tensor lat = config.snap_codes ? codec.snap(latents[r]) : latents[r];
        Tensor y = codec.decode(lat);
        auto v = y.values_mut();
        for (auto& e : v) e = std::clamp(e, -config.clamp, config.clamp);
        m.regions[r] = y;
      }
      out.push_back(std::move(m));
    }
    start = end;
  }
  return out;
}

}  // namespace

std::vector<MotionSequence> sample(const FlowModel& model, const RvqCodecs& codecs,
                                   const std::vector<const SpeechTrack*>& tracks, const SamplingConfig& config) {
  return sample_from(model, codecs, tracks, config, 0);
}

GenerationResult batch_generate(const FlowModel& model, const RvqCodecs& codecs,
                                const std::vector<const SpeechTrack*>& tracks, const SamplingConfig& config) {
  GenerationResult res;
  for (std::size_t i = 0; i < tracks.size(); ++i) {
    const auto t0 = std::chrono::steady_clock::now();
    auto seq = sample_from(model, codecs, {tracks[i]}, config, i);
    const auto t1 = std::chrono::steady_clock::now();
    res.sequences.push_back(std::move(seq[0]));
    res.seconds.push_back(std::chrono::duration<double>(t1 - t0).count());
  }
  if (!res.seconds.empty()) {
    double s = 0.0;
    for (double v : res.seconds) s += v;
    res.aits = s / static_cast<double>(res.seconds.size());
  }
  return res;
}

}  // namespace glsm
