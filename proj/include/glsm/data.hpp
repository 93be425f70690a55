#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "glsm/tensor.hpp"

namespace glsm {

enum class Region : std::uint8_t { Upper = 0, Hands = 1, Lower = 2, Face = 3 };
inline constexpr std::size_t kNumRegions = 4;

struct BodyRegionSpec {
  Region id;
  std::size_t width;
};

// upper 24, hands 48, lower 12, face 16 (total 100).
const std::array<BodyRegionSpec, kNumRegions>& body_regions();
std::size_t region_width(Region r);
std::size_t total_width();
const char* region_name(Region r);

struct MotionSequence {
  std::uint32_t id = 0;
  std::uint16_t frame_rate = 30;
  std::array<Tensor, kNumRegions> regions;  // each T x width

  std::size_t frames() const { return regions[0].rows(); }
  const Tensor& region(Region r) const { return regions[static_cast<std::size_t>(r)]; }
};

struct SpeechTrack {
  Tensor envelope;                    // {T}, values in [0, 1]
  std::vector<std::uint32_t> beats;   // ascending frame indices
  std::vector<std::uint16_t> tokens;  // one per frame, < kTokenVocab
};

inline constexpr std::size_t kTokenVocab = 64;

enum class Split : std::uint8_t { Train = 0, Val = 1, Test = 2, Generated = 3 };
const char* split_name(Split s);

struct CorpusSample {
  MotionSequence motion;
  SpeechTrack speech;
  Split split = Split::Train;
};

/// Fixed parameters of the procedural corpus.
struct CorpusRecipe {
  double tempo_min = 0.8;  // beats per second
  double tempo_max = 2.0;
  double tempo_jitter = 0.1;
  std::array<double, 3> burst_amplitudes{0.6, 1.0, 1.4};
  double damping = 0.08;    // per frame
  double frequency = 0.4;   // rad per frame
  double rise = 0.3;        // per frame
  std::size_t burst_frames = 64;
  double envelope_decay = 4.0;  // frames
  double motion_noise = 0.002;
  double face_noise = 0.05;
  // Row r gives how strongly region r is driven by each region's source
  // signal (upper bursts, hand tremor, lower drift, face envelope).
  std::array<std::array<double, kNumRegions>, kNumRegions> coupling{{
      {1.0, 0.0, 0.0, 0.0},
      {0.8, 0.4, 0.0, 0.0},
      {0.15, 0.0, 1.0, 0.0},
      {0.1, 0.0, 0.0, 1.0},
  }};
};

const CorpusRecipe& default_recipe();

// Deterministic in (seed, count, frames); sample i depends only on (seed, i).
std::vector<CorpusSample> gen_corpus(std::uint64_t seed, std::size_t count, std::size_t frames);
CorpusSample gen_sample(std::uint64_t seed, std::uint32_t index, std::size_t frames);

// Upper-body channels of one isolated burst starting at `onset` (T x 24).
Tensor single_burst_upper(std::size_t frames, std::size_t onset, double amplitude);
// Frame at which a burst starting at `onset` comes to rest.
std::size_t burst_rest_frame(std::size_t onset);

// Corpus file: "GLSC", u16 version, u32 record count, then per sample: u32 id,
// u8 split, u16 frame rate, u32 T, four region tensors, envelope tensor,
// u32 beat count + u32 beats, T u16 token ids. Tensors use the shared
// container format.
void write_corpus(const std::vector<CorpusSample>& samples, const std::filesystem::path& path);
std::vector<CorpusSample> read_corpus(const std::filesystem::path& path);

struct SplitRatios {
  double train = 0.8;
  double val = 0.1;
  double test = 0.1;
};

// Orders samples by a hash of (id, seed) and assigns contiguous blocks whose
// sizes follow `ratios` (largest-remainder rounding).
void split_corpus(std::vector<CorpusSample>& samples, const SplitRatios& ratios,
                  std::uint64_t seed = 0);

std::vector<CorpusSample> filter_split(const std::vector<CorpusSample>& samples, Split split);

// Non-overlapping windows of `window` frames; beats and tokens are re-based.
std::vector<CorpusSample> cut_windows(const std::vector<CorpusSample>& samples, std::size_t window);

// All regions concatenated column-wise, T x 100.
Tensor full_body(const MotionSequence& m);
bool samples_equal(const CorpusSample& a, const CorpusSample& b);

}  // namespace glsm
