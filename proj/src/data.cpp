#include "glsm/data.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <numbers>
#include <numeric>
#include <stdexcept>

#include "glsm/rng.hpp"
#include "glsm/serialize.hpp"

namespace glsm {

namespace {

constexpr std::array<BodyRegionSpec, kNumRegions> kRegions{{
    {Region::Upper, 24},
    {Region::Hands, 48},
    {Region::Lower, 12},
    {Region::Face, 16},
}};

constexpr char kCorpusMagic[4] = {'G', 'L', 'S', 'C'};
constexpr std::uint16_t kCorpusVersion = 1;
constexpr std::size_t kUpperPairs = 12;
constexpr double kTwoPi = 2.0 * std::numbers::pi;

// Fixed mixing structure shared by every sample of every corpus.
struct Structure {
  std::array<double, kUpperPairs> pair_weight{};
  std::array<double, kUpperPairs> pair_phase{};
  std::array<double, kUpperPairs> pair_spin{};
  std::vector<double> hand_proj;   // 48 x 24
  std::vector<double> lower_proj;  // 12 x 24
  std::vector<double> face_proj;   // 16 x 24
  std::array<double, 16> face_pattern{};
};

const Structure& structure() {
  static const Structure s = [] {
    Structure st;
    Rng rng(0x6c736d2d636f7270ULL);
    for (std::size_t m = 0; m < kUpperPairs; ++m) {
      st.pair_weight[m] = rng.uniform(0.5, 1.0);
      st.pair_phase[m] = rng.uniform(0.0, kTwoPi);
      st.pair_spin[m] = rng.uniform() < 0.5 ? -1.0 : 1.0;
    }
    auto fill = [&](std::vector<double>& v, std::size_t n, double scale) {
      v.resize(n);
      for (auto& x : v) x = rng.normal() * scale;
    };
    fill(st.hand_proj, 48 * 24, 1.2 / std::sqrt(24.0));
    fill(st.lower_proj, 12 * 24, 1.0 / std::sqrt(24.0));
    fill(st.face_proj, 16 * 24, 1.0 / std::sqrt(24.0));
    for (auto& p : st.face_pattern) p = (rng.uniform() < 0.5 ? -1.0 : 1.0) * rng.uniform(0.5, 1.5);
    return st;
  }();
  return s;
}

struct Burst {
  std::size_t onset;
  double amplitude;
  double phase;
};

// Adds the upper-body displacement of one burst to `upper` (T x 24).
void add_burst(std::vector<double>& upper, std::size_t frames, const Burst& b,
               const CorpusRecipe& rc) {
  const auto& st = structure();
  for (std::size_t tau = 0; tau <= rc.burst_frames && b.onset + tau < frames; ++tau) {
    const double t = static_cast<double>(tau);
    const double attack = 1.0 - std::exp(-rc.rise * t);
    // Squared attack: velocity starts from zero, so a burst has no inner minimum.
    const double radius = b.amplitude * std::exp(-rc.damping * t) * attack * attack;
    double* row = upper.data() + (b.onset + tau) * 24;
    for (std::size_t m = 0; m < kUpperPairs; ++m) {
      const double angle = st.pair_spin[m] * rc.frequency * t + b.phase + st.pair_phase[m];
      row[2 * m] += radius * st.pair_weight[m] * std::cos(angle);
      row[2 * m + 1] += radius * st.pair_weight[m] * std::sin(angle);
    }
  }
}

std::size_t tempo_bin(double tempo, const CorpusRecipe& rc) {
  const double u = (tempo - rc.tempo_min) / (rc.tempo_max - rc.tempo_min);
  return std::min<std::size_t>(15, static_cast<std::size_t>(std::max(0.0, u) * 16.0));
}

}  // namespace

const std::array<BodyRegionSpec, kNumRegions>& body_regions() { return kRegions; }
std::size_t region_width(Region r) { return kRegions[static_cast<std::size_t>(r)].width; }

std::size_t total_width() {
  std::size_t w = 0;
  for (const auto& r : kRegions) w += r.width;
  return w;
}

const char* region_name(Region r) {
  switch (r) {
    case Region::Upper: return "upper";
    case Region::Hands: return "hands";
    case Region::Lower: return "lower";
    case Region::Face: return "face";
  }
  return "?";
}

const char* split_name(Split s) {
  switch (s) {
    case Split::Train: return "train";
    case Split::Val: return "val";
    case Split::Test: return "test";
    case Split::Generated: return "generated";
  }
  return "?";
}

const CorpusRecipe& default_recipe() {
  static const CorpusRecipe r;
  return r;
}

CorpusSample gen_sample(std::uint64_t seed, std::uint32_t index, std::size_t frames) {
  if (frames < 64) throw std::invalid_argument("gen_corpus: frames must be at least 64");
  const auto& rc = default_recipe();
  const auto& st = structure();
  Rng rng(mix_seed(seed, index));
  const std::size_t T = frames;

  const double tempo = rng.uniform(rc.tempo_min, rc.tempo_max);
  const double interval = 30.0 / tempo;
  std::vector<Burst> bursts;
  std::vector<std::size_t> amp_class;
  double pos = rng.uniform(2.0, interval);
  while (true) {
    const auto b = static_cast<std::size_t>(std::lround(pos));
    if (b + 2 > T) break;
    const std::size_t cls = rng.index(3);
    bursts.push_back({b, rc.burst_amplitudes[cls], rng.uniform(0.0, kTwoPi)});
    amp_class.push_back(cls);
    pos += interval * rng.uniform(1.0 - rc.tempo_jitter, 1.0 + rc.tempo_jitter);
  }
  const std::size_t delay = 1 + rng.index(3);

  // Upper body: one damped rotating burst per beat.
  std::vector<double> upper(T * 24, 0.0);
  for (const auto& b : bursts) add_burst(upper, T, b, rc);

  // Onset envelope: pre-attack one frame early, peak on the beat, exponential decay.
  std::vector<double> env(T, 0.0);
  for (const auto& b : bursts) {
    const double peak = b.amplitude / rc.burst_amplitudes.back();
    if (b.onset >= 1) env[b.onset - 1] += 0.35 * peak;
    for (std::size_t t = b.onset; t < T; ++t)
      env[t] += peak * std::exp(-static_cast<double>(t - b.onset) / rc.envelope_decay);
  }
  for (auto& e : env) e = std::clamp(e + std::abs(rng.normal()) * 0.015, 0.0, 1.0);

  // Hands follow the upper body through the coupling matrix with a short delay.
  std::vector<double> hands(T * 48, 0.0);
  std::array<double, 48> tremor_phase{};
  for (auto& p : tremor_phase) p = rng.uniform(0.0, kTwoPi);
  for (std::size_t t = 0; t < T; ++t) {
    for (std::size_t c = 0; c < 48; ++c) {
      double v = 0.0;
      if (t >= delay) {
        const double* src = upper.data() + (t - delay) * 24;
        for (std::size_t j = 0; j < 24; ++j) v += st.hand_proj[c * 24 + j] * src[j];
      }
      const double tremor = 0.1 * std::sin(kTwoPi * 2.5 * static_cast<double>(t) / 30.0 + tremor_phase[c]);
      hands[t * 48 + c] = rc.coupling[1][0] * v + rc.coupling[1][1] * tremor;
    }
  }

  // Lower body: slow drift plus a weak upper-body coupling.
  std::vector<double> lower(T * 12, 0.0);
  for (std::size_t c = 0; c < 12; ++c) {
    std::array<double, 2> freq{}, phase{};
    for (std::size_t j = 0; j < 2; ++j) {
      freq[j] = rng.uniform(0.05, 0.3);
      phase[j] = rng.uniform(0.0, kTwoPi);
    }
    for (std::size_t t = 0; t < T; ++t) {
      double drift = 0.0;
      for (std::size_t j = 0; j < 2; ++j)
        drift += 0.4 * std::sin(kTwoPi * freq[j] * static_cast<double>(t) / 30.0 + phase[j]);
      double coupled = 0.0;
      for (std::size_t j = 0; j < 24; ++j) coupled += st.lower_proj[c * 24 + j] * upper[t * 24 + j];
      lower[t * 12 + c] = rc.coupling[2][2] * drift + rc.coupling[2][0] * coupled;
    }
  }

  // Face: smoothed envelope pattern plus noise.
  std::vector<double> face(T * 16, 0.0);
  for (std::size_t t = 0; t < T; ++t) {
    double smooth = 0.0;
    std::size_t n = 0;
    for (std::size_t u = (t >= 2 ? t - 2 : 0); u <= std::min(T - 1, t + 2); ++u, ++n) smooth += env[u];
    smooth /= static_cast<double>(n);
    for (std::size_t c = 0; c < 16; ++c) {
      double coupled = 0.0;
      for (std::size_t j = 0; j < 24; ++j) coupled += st.face_proj[c * 24 + j] * upper[t * 24 + j];
      face[t * 16 + c] = rc.coupling[3][3] * st.face_pattern[c] * smooth +
                         rc.coupling[3][0] * coupled + rng.normal() * rc.face_noise;
    }
  }

  for (auto* v : {&upper, &hands, &lower})
    for (auto& x : *v) x += rng.normal() * rc.motion_noise;

  CorpusSample s;
  s.motion.id = index;
  s.motion.frame_rate = 30;
  s.motion.regions = {Tensor({T, 24}, std::move(upper)), Tensor({T, 48}, std::move(hands)),
                      Tensor({T, 12}, std::move(lower)), Tensor({T, 16}, std::move(face))};
  s.speech.envelope = Tensor({T}, std::move(env));
  const std::size_t bin = tempo_bin(tempo, rc);
  s.speech.tokens.assign(T, static_cast<std::uint16_t>(bin * 4));
  for (std::size_t k = 0; k < bursts.size(); ++k) {
    s.speech.beats.push_back(static_cast<std::uint32_t>(bursts[k].onset));
    const std::size_t end = k + 1 < bursts.size() ? bursts[k + 1].onset : T;
    for (std::size_t t = bursts[k].onset; t < end; ++t)
      s.speech.tokens[t] = static_cast<std::uint16_t>(bin * 4 + 1 + amp_class[k]);
  }
  return s;
}

std::vector<CorpusSample> gen_corpus(std::uint64_t seed, std::size_t count, std::size_t frames) {
  if (count < 1) throw std::invalid_argument("gen_corpus: count must be at least 1");
  std::vector<CorpusSample> out;
  out.reserve(count);
  for (std::size_t i = 0; i < count; ++i) out.push_back(gen_sample(seed, static_cast<std::uint32_t>(i), frames));
  return out;
}

Tensor single_burst_upper(std::size_t frames, std::size_t onset, double amplitude) {
  std::vector<double> upper(frames * 24, 0.0);
  add_burst(upper, frames, {onset, amplitude, 0.0}, default_recipe());
  return Tensor({frames, 24}, std::move(upper));
}

std::size_t burst_rest_frame(std::size_t onset) { return onset + default_recipe().burst_frames; }

void write_corpus(const std::vector<CorpusSample>& samples, const std::filesystem::path& path) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw std::runtime_error("cannot open corpus for writing: " + path.string());
  os.write(kCorpusMagic, 4);
  binio::put_u16(os, kCorpusVersion);
  binio::put_u32(os, static_cast<std::uint32_t>(samples.size()));
  for (const auto& s : samples) {
    binio::put_u32(os, s.motion.id);
    binio::put_u8(os, static_cast<std::uint8_t>(s.split));
    binio::put_u16(os, s.motion.frame_rate);
    binio::put_u32(os, static_cast<std::uint32_t>(s.motion.frames()));
    for (const auto& r : s.motion.regions) write_tensor(os, r);
    write_tensor(os, s.speech.envelope);
    binio::put_u32(os, static_cast<std::uint32_t>(s.speech.beats.size()));
    for (auto b : s.speech.beats) binio::put_u32(os, b);
    for (auto tok : s.speech.tokens) binio::put_u16(os, tok);
  }
  if (!os) throw std::runtime_error("failed writing corpus: " + path.string());
}

std::vector<CorpusSample> read_corpus(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("corpus not found: " + path.string());
  const std::string magic = binio::get_bytes(is, 4);
  if (std::memcmp(magic.data(), kCorpusMagic, 4) != 0)
    throw FormatError("version mismatch: bad corpus magic bytes");
  const auto version = binio::get_u16(is);
  if (version != kCorpusVersion)
    throw FormatError("version mismatch: corpus format " + std::to_string(version));
  const auto count = binio::get_u32(is);
  std::vector<CorpusSample> out;
  out.reserve(count);
  for (std::uint32_t i = 0; i < count; ++i) {
    CorpusSample s;
    s.motion.id = binio::get_u32(is);
    const auto tag = binio::get_u8(is);
    if (tag > 3) throw FormatError("unknown split tag " + std::to_string(tag));
    s.split = static_cast<Split>(tag);
    s.motion.frame_rate = binio::get_u16(is);
    const auto T = binio::get_u32(is);
    for (std::size_t r = 0; r < kNumRegions; ++r) {
      s.motion.regions[r] = read_tensor(is);
      if (s.motion.regions[r].shape() != Shape{T, kRegions[r].width})
        throw FormatError("region tensor shape does not match header");
    }
    s.speech.envelope = read_tensor(is);
    if (s.speech.envelope.numel() != T) throw FormatError("envelope length does not match header");
    s.speech.beats.resize(binio::get_u32(is));
    for (auto& b : s.speech.beats) b = binio::get_u32(is);
    s.speech.tokens.resize(T);
    for (auto& tok : s.speech.tokens) tok = binio::get_u16(is);
    out.push_back(std::move(s));
  }
  return out;
}

void split_corpus(std::vector<CorpusSample>& samples, const SplitRatios& ratios, std::uint64_t seed) {
  const std::array<double, 3> r{ratios.train, ratios.val, ratios.test};
  for (double x : r)
    if (!(x >= 0.0)) throw std::invalid_argument("split_corpus: ratios must be non-negative");
  if (std::abs(r[0] + r[1] + r[2] - 1.0) > 1e-9)
    throw std::invalid_argument("split_corpus: ratios must sum to 1");
  const std::size_t n = samples.size();
  // Largest-remainder apportionment.
  std::array<std::size_t, 3> counts{};
  std::array<std::pair<double, std::size_t>, 3> rem{};
  std::size_t assigned = 0;
  for (std::size_t k = 0; k < 3; ++k) {
    const double exact = r[k] * static_cast<double>(n);
    counts[k] = static_cast<std::size_t>(std::floor(exact));
    rem[k] = {exact - static_cast<double>(counts[k]), k};
    assigned += counts[k];
  }
  std::stable_sort(rem.begin(), rem.end(), [](auto a, auto b) { return a.first > b.first; });
  for (std::size_t k = 0; assigned < n; ++k, ++assigned) ++counts[rem[k % 3].second];

  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    return mix_seed(samples[a].motion.id, seed) < mix_seed(samples[b].motion.id, seed);
  });
  std::size_t pos = 0;
  for (std::size_t k = 0; k < 3; ++k)
    for (std::size_t j = 0; j < counts[k]; ++j) samples[order[pos++]].split = static_cast<Split>(k);
}

std::vector<CorpusSample> filter_split(const std::vector<CorpusSample>& samples, Split split) {
  std::vector<CorpusSample> out;
  for (const auto& s : samples)
    if (s.split == split) out.push_back(s);
  return out;
}

std::vector<CorpusSample> cut_windows(const std::vector<CorpusSample>& samples, std::size_t window) {
  std::vector<CorpusSample> out;
  for (const auto& s : samples) {
    const std::size_t T = s.motion.frames();
    for (std::size_t start = 0; start + window <= T; start += window) {
      CorpusSample w;
      w.split = s.split;
      w.motion.id = s.motion.id;
      w.motion.frame_rate = s.motion.frame_rate;
      for (std::size_t r = 0; r < kNumRegions; ++r) {
        const auto& src = s.motion.regions[r];
        const std::size_t c = src.cols();
        std::vector<double> v(src.values().begin() + static_cast<std::ptrdiff_t>(start * c),
                              src.values().begin() + static_cast<std::ptrdiff_t>((start + window) * c));
        w.motion.regions[r] = Tensor({window, c}, std::move(v));
      }
      const auto env = s.speech.envelope.values();
      w.speech.envelope = Tensor({window}, std::vector<double>(env.begin() + static_cast<std::ptrdiff_t>(start),
                                                               env.begin() + static_cast<std::ptrdiff_t>(start + window)));
      for (auto b : s.speech.beats)
        if (b >= start && b < start + window) w.speech.beats.push_back(static_cast<std::uint32_t>(b - start));
      w.speech.tokens.assign(s.speech.tokens.begin() + static_cast<std::ptrdiff_t>(start),
                             s.speech.tokens.begin() + static_cast<std::ptrdiff_t>(start + window));
      out.push_back(std::move(w));
    }
  }
  return out;
}

Tensor full_body(const MotionSequence& m) {
  const std::size_t T = m.frames(), W = total_width();
  std::vector<double> v(T * W);
  for (std::size_t t = 0; t < T; ++t) {
    std::size_t off = 0;
    for (const auto& r : m.regions) {
      const std::size_t c = r.cols();
      std::copy_n(r.values().begin() + static_cast<std::ptrdiff_t>(t * c), c,
                  v.begin() + static_cast<std::ptrdiff_t>(t * W + off));
      off += c;
    }
  }
  return Tensor({T, W}, std::move(v));
}

bool samples_equal(const CorpusSample& a, const CorpusSample& b) {
  auto same = [](const Tensor& x, const Tensor& y) {
    return x.shape() == y.shape() && std::equal(x.values().begin(), x.values().end(), y.values().begin());
  };
  if (a.split != b.split || a.motion.id != b.motion.id || a.motion.frame_rate != b.motion.frame_rate)
    return false;
  for (std::size_t r = 0; r < kNumRegions; ++r)
    if (!same(a.motion.regions[r], b.motion.regions[r])) return false;
  return same(a.speech.envelope, b.speech.envelope) && a.speech.beats == b.speech.beats &&
         a.speech.tokens == b.speech.tokens;
}

}  // namespace glsm
