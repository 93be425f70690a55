#include <doctest.h>

#include <algorithm>
#include <cmath>

#include "glsm/conditioning.hpp"
#include "glsm/ops.hpp"
#include "gradcheck.hpp"

using namespace glsm;
using glsm::testing::grad_check;
using glsm::testing::random_tensor;
using glsm::testing::weighted_sum;

namespace {

SpeechTrack random_track(std::size_t t, Rng& rng) {
  SpeechTrack s;
  std::vector<double> env(t);
  for (auto& e : env) e = rng.uniform();
  s.envelope = Tensor({t}, env);
  for (std::size_t i = 0; i < t; ++i) s.tokens.push_back(static_cast<std::uint16_t>(rng.index(kTokenVocab)));
  return s;
}

ConditioningConfig small_config() {
  ConditioningConfig c;
  c.d_model = 8;
  c.heads = 2;
  c.ffn = 6;
  c.cross_layers = 2;
  return c;
}

}  // namespace

TEST_CASE("encode_speech shapes and constant input") {
  Rng rng(1);
  ConditioningConfig cfg;
  SpeechEncoder enc(cfg, rng);
  auto track = random_track(64, rng);
  auto c = enc.encode(track);
  CHECK(c.features.shape() == Shape{16, 256});
  CHECK(c.frames == 16);
  CHECK(!c.is_null(0));

  SpeechTrack flat;
  flat.envelope = Tensor({64});
  flat.tokens.assign(64, 5);
  auto f = enc.encode(flat);
  for (std::size_t j = 1; j < 16; ++j)
    for (std::size_t k = 0; k < 256; ++k) REQUIRE(f.features.at(j, k) == f.features.at(0, k));

  SpeechTrack bad = track;
  bad.tokens.pop_back();
  CHECK_THROWS_AS(enc.encode(bad), ShapeError);
  auto odd = random_track(62, rng);
  CHECK_THROWS_AS(enc.encode(odd), ShapeError);
  auto other = random_track(32, rng);
  std::vector<const SpeechTrack*> mixed{&track, &other};
  CHECK_THROWS_AS(enc.encode(mixed), ShapeError);
}

TEST_CASE("encode_speech gradient check") {
  Rng rng(2);
  SpeechEncoder enc(small_config(), rng);
  auto a = random_track(12, rng), b = random_track(12, rng);
  std::vector<const SpeechTrack*> tracks{&a, &b};
  ParamList params;
  enc.collect(params, "speech");
  auto r = grad_check([&] { return weighted_sum(enc.encode(tracks).features); }, tensors_of(params));
  CHECK_MESSAGE(r.max_rel_err < 1e-4, r.worst);
}

TEST_CASE("null condition is a learned constant and isolates the speech path") {
  Rng rng(3);
  auto cfg = small_config();
  SpeechEncoder enc(cfg, rng);
  FusionStack fuse(cfg, rng);
  auto n = enc.null_condition(2, 3);
  bool nonzero = false;
  for (std::size_t r = 0; r < 6; ++r)
    for (std::size_t k = 0; k < 8; ++k) {
      CHECK(n.features.at(r, k) == enc.null_embedding().at(k));
      nonzero = nonzero || enc.null_embedding().at(k) != 0.0;
    }
  CHECK(nonzero);

  auto ta = random_track(12, rng), tb = random_track(12, rng);
  const std::vector<std::uint8_t> drop{1};
  auto ca = enc.apply_null(enc.encode(ta), drop);
  auto cb = enc.apply_null(enc.encode(tb), drop);
  CHECK(ca.is_null(0));
  Tensor tokens = random_tensor({3 * 4, 8}, rng, 1.0, false);
  auto ya = fuse(tokens, 4, ca), yb = fuse(tokens, 4, cb);
  for (std::size_t k = 0; k < ya.numel(); ++k) REQUIRE(ya.at(k) == yb.at(k));

  auto live = fuse(tokens, 4, enc.encode(ta));
  CHECK(live.shape() == tokens.shape());
  double diff = 0.0;
  for (std::size_t k = 0; k < ya.numel(); ++k) diff += std::abs(live.at(k) - ya.at(k));
  CHECK(diff > 1e-6);
}

TEST_CASE("mixed batch keeps live samples intact") {
  Rng rng(4);
  SpeechEncoder enc(small_config(), rng);
  auto a = random_track(8, rng), b = random_track(8, rng);
  std::vector<const SpeechTrack*> tracks{&a, &b};
  auto c = enc.encode(tracks);
  auto m = enc.apply_null(c, std::vector<std::uint8_t>{0, 1});
  CHECK(!m.is_null(0));
  CHECK(m.is_null(1));
  for (std::size_t r = 0; r < 2; ++r)
    for (std::size_t k = 0; k < 8; ++k) {
      CHECK(m.features.at(r, k) == c.features.at(r, k));
      CHECK(m.features.at(2 + r, k) == enc.null_embedding().at(k));
    }
}

TEST_CASE("single speech frame gives unit attention weight") {
  Rng rng(5);
  auto cfg = small_config();
  SpeechEncoder enc(cfg, rng);
  FusionStack fuse(cfg, rng);
  auto c = enc.encode(random_track(4, rng));
  REQUIRE(c.frames == 1);
  Tensor tokens = random_tensor({4, 8}, rng, 1.0, false);
  for (std::size_t l = 0; l < fuse.layers(); ++l)
    for (double w : fuse.attention_weights(l, tokens, 4, c)) CHECK(w == 1.0);
}

TEST_CASE("dropout_condition rates") {
  Rng rng(6);
  SpeechEncoder enc(small_config(), rng);
  auto c = enc.encode(random_track(8, rng));
  Rng draw(7);
  for (int i = 0; i < 100; ++i) {
    CHECK(!dropout_condition(c, 0.0, draw, enc).is_null(0));
    CHECK(dropout_condition(c, 1.0, draw, enc).is_null(0));
  }
  int nulls = 0;
  for (int i = 0; i < 10000; ++i) nulls += dropout_condition(c, 0.1, draw, enc).is_null(0);
  CHECK(std::abs(nulls / 10000.0 - 0.1) <= 0.01);
  CHECK_THROWS_AS(dropout_mask(1, 1.5, draw), std::invalid_argument);
  CHECK_THROWS_AS(dropout_mask(1, -0.1, draw), std::invalid_argument);
}

TEST_CASE("fuse gradient check") {
  Rng rng(8);
  auto cfg = small_config();
  SpeechEncoder enc(cfg, rng);
  FusionStack fuse(cfg, rng);
  auto a = random_track(8, rng), b = random_track(8, rng);
  std::vector<const SpeechTrack*> tracks{&a, &b};
  Tensor tokens = random_tensor({2 * 2 * 3, 8}, rng);
  ParamList params;
  fuse.collect(params, "fusion");
  enc.collect(params, "speech");
  auto inputs = tensors_of(params);
  inputs.push_back(tokens);
  auto r = grad_check([&] { return weighted_sum(fuse(tokens, 3, enc.encode(tracks))); }, inputs);
  CHECK_MESSAGE(r.max_rel_err < 1e-4, r.worst);
}

TEST_CASE("cross-attention has no positional encoding over keys") {
  Rng rng(9);
  auto cfg = small_config();
  cfg.aligned_injection = false;
  SpeechEncoder enc(cfg, rng);
  FusionStack fuse(cfg, rng);
  auto c = enc.encode(random_track(16, rng));
  const std::size_t frames = c.frames;  // 4
  const std::vector<std::size_t> perm{2, 0, 3, 1};
  SpeechCondition p = c;
  p.features = ops::gather_rows(c.features, perm);
  Tensor tokens = random_tensor({frames * 2, 8}, rng, 1.0, false);

  auto y = fuse.block(0, tokens, 2, c), yp = fuse.block(0, tokens, 2, p);
  for (std::size_t k = 0; k < y.numel(); ++k) CHECK(yp.at(k) == doctest::Approx(y.at(k)).epsilon(1e-12));

  // Weight on key perm[j] in the original equals weight on key j after permuting.
  auto w = fuse.attention_weights(0, tokens, 2, c), wp = fuse.attention_weights(0, tokens, 2, p);
  const std::size_t rows = w.size() / frames;
  for (std::size_t q = 0; q < rows; ++q)
    for (std::size_t j = 0; j < frames; ++j)
      CHECK(wp[q * frames + j] == doctest::Approx(w[q * frames + perm[j]]).epsilon(1e-12));

  // Frame-aligned injection, when enabled, follows the permuted frames.
  auto cfg2 = small_config();
  Rng rng2(9);
  SpeechEncoder enc2(cfg2, rng2);
  FusionStack fuse2(cfg2, rng2);
  auto in = fuse2.inject(tokens, 2, c);
  for (std::size_t j = 0; j < frames; ++j)
    for (std::size_t t = 0; t < 2; ++t)
      for (std::size_t k = 0; k < 8; ++k)
        CHECK(in.at(j * 2 + t, k) == tokens.at(j * 2 + t, k) + c.features.at(j, k));
  CHECK_THROWS_AS(fuse2(random_tensor({5, 8}, rng, 1.0, false), 2, c), ShapeError);
}
