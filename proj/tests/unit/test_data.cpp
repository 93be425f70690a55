#include <doctest.h>

#include <algorithm>
#include <filesystem>
#include <fstream>

#include "glsm/data.hpp"
#include "glsm/metrics.hpp"
#include "glsm/rng.hpp"
#include "glsm/serialize.hpp"

using namespace glsm;

namespace {

std::filesystem::path temp_file(const std::string& name) {
  return std::filesystem::temp_directory_path() / ("glsm_test_data_" + name);
}

// Circularly shifts each track's beats by a random offset in [T/4, 3T/4).
std::vector<SpeechTrack> phase_shuffled(const std::vector<CorpusSample>& corpus, std::uint64_t seed) {
  Rng rng(seed);
  std::vector<SpeechTrack> out;
  for (const auto& s : corpus) {
    SpeechTrack t = s.speech;
    const std::size_t n = s.motion.frames();
    const std::size_t off = n / 4 + rng.index(n / 2);
    for (auto& b : t.beats) b = static_cast<std::uint32_t>((b + off) % n);
    std::sort(t.beats.begin(), t.beats.end());
    out.push_back(std::move(t));
  }
  return out;
}

}  // namespace

TEST_CASE("region layout") {
  CHECK(body_regions().size() == 4);
  CHECK(total_width() == 100);
  CHECK(region_width(Region::Upper) == 24);
  CHECK(region_width(Region::Hands) == 48);
  CHECK(region_width(Region::Lower) == 12);
  CHECK(region_width(Region::Face) == 16);
}

TEST_CASE("gen_corpus shapes and determinism") {
  auto a = gen_corpus(7, 10, 256);
  auto b = gen_corpus(7, 10, 256);
  REQUIRE(a.size() == 10);
  for (std::size_t i = 0; i < a.size(); ++i) {
    CHECK(samples_equal(a[i], b[i]));
    for (const auto& spec : body_regions())
      CHECK(a[i].motion.region(spec.id).shape() == Shape{256, spec.width});
    CHECK(a[i].speech.envelope.numel() == 256);
    CHECK(a[i].speech.tokens.size() == 256);
  }
  auto c = gen_corpus(8, 10, 256);
  CHECK_FALSE(samples_equal(a[0], c[0]));

  CHECK_THROWS_AS(gen_corpus(7, 0, 256), std::invalid_argument);
  CHECK_THROWS_AS(gen_corpus(7, 1, 63), std::invalid_argument);
}

TEST_CASE("speech track invariants") {
  for (const auto& s : gen_corpus(3, 20, 200)) {
    const auto& beats = s.speech.beats;
    REQUIRE_FALSE(beats.empty());
    for (std::size_t k = 1; k < beats.size(); ++k) CHECK(beats[k] > beats[k - 1]);
    CHECK(beats.back() < 200);
    const auto env = s.speech.envelope.values();
    for (double e : env) {
      CHECK(e >= 0.0);
      CHECK(e <= 1.0);
    }
    // A local maximum of the envelope within one frame of each beat.
    for (auto b : beats) {
      bool found = false;
      for (std::size_t t = (b >= 1 ? b - 1 : 0); t <= std::min<std::size_t>(b + 1, 199); ++t) {
        const bool left = t == 0 || env[t] >= env[t - 1];
        const bool right = t == 199 || env[t] >= env[t + 1];
        found = found || (left && right);
      }
      CHECK_MESSAGE(found, "beat " << b);
    }
    for (auto tok : s.speech.tokens) CHECK(tok < kTokenVocab);
    for (const auto& r : s.motion.regions)
      for (double v : r.values()) CHECK(std::isfinite(v));
  }
}

TEST_CASE("tokens encode tempo and amplitude class") {
  auto s = gen_sample(11, 0, 256);
  const auto first = s.speech.beats.front();
  CHECK(s.speech.tokens[0] % 4 == 0);
  CHECK(s.speech.tokens[first] % 4 != 0);
  // Tempo bin is constant across a sequence.
  for (auto tok : s.speech.tokens) CHECK(tok / 4 == s.speech.tokens[0] / 4);
}

TEST_CASE("coupling matrix is non-diagonal") {
  const auto& c = default_recipe().coupling;
  bool off_diagonal = false;
  for (std::size_t r = 0; r < kNumRegions; ++r)
    for (std::size_t k = 0; k < kNumRegions; ++k)
      if (r != k && c[r][k] != 0.0) off_diagonal = true;
  CHECK(off_diagonal);
}

TEST_CASE("corpus file round trip") {
  auto corpus = gen_corpus(5, 6, 96);
  split_corpus(corpus, {});
  const auto path = temp_file("roundtrip.glsm");
  write_corpus(corpus, path);
  auto back = read_corpus(path);
  REQUIRE(back.size() == corpus.size());
  for (std::size_t i = 0; i < back.size(); ++i) CHECK(samples_equal(back[i], corpus[i]));
  std::filesystem::remove(path);
}

TEST_CASE("empty corpus is a header-only file") {
  const auto path = temp_file("empty.glsm");
  write_corpus({}, path);
  CHECK(std::filesystem::file_size(path) == 4 + 2 + 4);
  CHECK(read_corpus(path).empty());
  std::filesystem::remove(path);
}

TEST_CASE("corpus read errors") {
  auto corpus = gen_corpus(5, 2, 64);
  const auto path = temp_file("corrupt.glsm");
  write_corpus(corpus, path);
  {
    std::fstream f(path, std::ios::in | std::ios::out | std::ios::binary);
    f.seekp(0);
    f.write("XXXX", 4);
  }
  CHECK_THROWS_WITH_AS(read_corpus(path), doctest::Contains("version mismatch"), FormatError);

  write_corpus(corpus, path);
  std::filesystem::resize_file(path, std::filesystem::file_size(path) - 10);
  CHECK_THROWS_WITH_AS(read_corpus(path), doctest::Contains("truncated"), FormatError);
  std::filesystem::remove(path);
  CHECK_THROWS(read_corpus(path));
}

TEST_CASE("split_corpus ratios") {
  auto corpus = gen_corpus(1, 100, 64);
  split_corpus(corpus, {1.0, 0.0, 0.0});
  for (const auto& s : corpus) CHECK(s.split == Split::Train);

  split_corpus(corpus, {0.8, 0.1, 0.1}, 42);
  std::array<int, 3> counts{};
  for (const auto& s : corpus) ++counts[static_cast<std::size_t>(s.split)];
  CHECK(std::abs(counts[0] - 80) <= 1);
  CHECK(std::abs(counts[1] - 10) <= 1);
  CHECK(std::abs(counts[2] - 10) <= 1);

  auto again = corpus;
  split_corpus(again, {0.8, 0.1, 0.1}, 42);
  for (std::size_t i = 0; i < corpus.size(); ++i) CHECK(again[i].split == corpus[i].split);

  CHECK_THROWS_AS(split_corpus(corpus, {0.5, 0.1, 0.1}), std::invalid_argument);
  CHECK_THROWS_AS(split_corpus(corpus, {1.2, -0.1, -0.1}), std::invalid_argument);
}

TEST_CASE("cut_windows rebases beats and tokens") {
  auto corpus = gen_corpus(2, 3, 256);
  auto w = cut_windows(corpus, 64);
  REQUIRE(w.size() == 12);
  const auto& src = corpus[0];
  const auto& second = w[1];
  CHECK(second.motion.frames() == 64);
  CHECK(second.motion.region(Region::Hands).at(0, 5) == src.motion.region(Region::Hands).at(64, 5));
  CHECK(second.speech.tokens[0] == src.speech.tokens[64]);
  for (auto b : second.speech.beats) {
    CHECK(b < 64);
    CHECK(std::find(src.speech.beats.begin(), src.speech.beats.end(), b + 64) != src.speech.beats.end());
  }
}

TEST_CASE("full_body concatenates regions") {
  auto s = gen_sample(4, 0, 64);
  Tensor fb = full_body(s.motion);
  CHECK(fb.shape() == Shape{64, 100});
  CHECK(fb.at(10, 0) == s.motion.region(Region::Upper).at(10, 0));
  CHECK(fb.at(10, 24) == s.motion.region(Region::Hands).at(10, 0));
  CHECK(fb.at(10, 72) == s.motion.region(Region::Lower).at(10, 0));
  CHECK(fb.at(10, 99) == s.motion.region(Region::Face).at(10, 15));
}

TEST_CASE("corpus carries beat coupling") {
  auto corpus = gen_corpus(7, 64, 256);
  std::vector<MotionSequence> motions;
  std::vector<SpeechTrack> speech;
  for (const auto& s : corpus) {
    motions.push_back(s.motion);
    speech.push_back(s.speech);
  }
  const double bc = motion_beat_constancy(motions, speech);
  const double shuffled = motion_beat_constancy(motions, phase_shuffled(corpus, 3));
  MESSAGE("corpus BC " << bc << ", phase-shuffled " << shuffled);
  CHECK(bc >= 0.6);
  CHECK(bc >= shuffled + 0.2);

  // Per-sample BC also clears the bar.
  for (std::size_t i = 0; i < 8; ++i)
    CHECK(beat_constancy({extract_gesture_beats(motions[i]), speech[i].beats}) >= 0.6);
}
