#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <numeric>
#include <set>

#include "glsm/generator.hpp"
#include "glsm/ops.hpp"
#include "gradcheck.hpp"

using namespace glsm;
using glsm::testing::grad_check;
using glsm::testing::random_tensor;
using glsm::testing::weighted_sum;

namespace {

GeneratorConfig toy_config() {
  GeneratorConfig c;
  c.blocks = 2;
  c.d_model = 8;
  c.ffn = 8;
  c.heads = 2;
  c.step_embed = 8;
  c.regions = 4;
  c.d_latent = 3;
  c.max_frames = 4;
  c.cross_layers = 1;
  c.cross_ffn = 8;
  c.seed = 11;
  return c;
}

SpeechTrack random_track(std::size_t t, Rng& rng) {
  SpeechTrack s;
  std::vector<double> env(t);
  for (auto& e : env) e = rng.uniform();
  s.envelope = Tensor({t}, env);
  for (std::size_t i = 0; i < t; ++i) s.tokens.push_back(static_cast<std::uint16_t>(rng.index(kTokenVocab)));
  return s;
}

void zero(Tensor t) {
  for (auto& v : t.values_mut()) v = 0.0;
}

double max_abs_diff(const Tensor& a, const Tensor& b) {
  double m = 0.0;
  for (std::size_t k = 0; k < a.numel(); ++k) m = std::max(m, std::abs(a.at(k) - b.at(k)));
  return m;
}

}  // namespace

TEST_CASE("step size validation and index embedding ids") {
  CHECK(step_index(0.0) == 0);
  CHECK(step_index(1.0) == 1);
  CHECK(step_index(0.5) == 2);
  CHECK(step_index(1.0 / 128.0) == 8);
  CHECK(valid_step_size(0.25));
  CHECK(!valid_step_size(0.3));
  CHECK(!valid_step_size(1.0 / 256.0));
  CHECK_THROWS_AS(step_index(0.05), std::invalid_argument);
}

TEST_CASE("token layout permutations are inverse bijections") {
  const auto a = frame_to_region_major(2, 5, 3), b = region_to_frame_major(2, 5, 3);
  CHECK(std::set<std::size_t>(a.begin(), a.end()).size() == a.size());
  for (std::size_t i = 0; i < a.size(); ++i) {
    CHECK(a[b[i]] == i);
    CHECK(b[a[i]] == i);
  }
  // Region-major row (b=1, r=2, j=4) holds frame-major row (b=1, j=4, r=2).
  CHECK(a[(1 * 3 + 2) * 5 + 4] == (1 * 5 + 4) * 3 + 2);
}

TEST_CASE("forward shape and input validation") {
  Generator g(toy_config());
  Rng rng(1);
  auto track = random_track(12, rng);
  auto cond = g.speech().encode(track);
  Tensor x = random_tensor({3 * 4, 3}, rng, 1.0, false);
  const std::vector<double> t{0.3}, d{0.25};
  auto y = g.forward(x, 1, 3, t, d, cond);
  CHECK(y.shape() == x.shape());
  CHECK_THROWS_AS(g.forward(x, 1, 3, std::vector<double>{1.5}, d, cond), std::invalid_argument);
  CHECK_THROWS_AS(g.forward(x, 1, 3, t, std::vector<double>{0.3}, cond), std::invalid_argument);
  CHECK_THROWS_AS(g.forward(x, 1, 2, t, d, cond), ShapeError);
  Tensor wide = random_tensor({5 * 4, 3}, rng, 1.0, false);
  auto long_cond = g.speech().encode(random_track(20, rng));
  CHECK_THROWS_AS(g.forward(wide, 1, 5, t, d, long_cond), ShapeError);  // beyond max_frames
  auto again = g.forward(x, 1, 3, t, d, cond);
  for (std::size_t k = 0; k < y.numel(); ++k) CHECK(again.at(k) == y.at(k));
}

TEST_CASE("full 2-block generator gradient check") {
  Generator g(toy_config());
  Rng rng(2);
  auto a = random_track(12, rng), b = random_track(12, rng);
  std::vector<const SpeechTrack*> tracks{&a, &b};
  Tensor x = random_tensor({2 * 3 * 4, 3}, rng);
  const std::vector<double> t{0.2, 0.7}, d{0.0, 0.125};
  auto inputs = tensors_of(g.parameters());
  // Non-zero relative tables so their gradients are exercised away from zero.
  for (auto& p : g.parameters())
    if (p.name.find("_bias") != std::string::npos)
      for (auto& v : Tensor(p.tensor).values_mut()) v = rng.normal() * 0.3;
  inputs.push_back(x);
  auto r = grad_check([&] { return weighted_sum(g.forward(x, 2, 3, t, d, g.speech().encode(tracks))); }, inputs);
  CHECK_MESSAGE(r.max_rel_err < 1e-4, r.worst);
}

TEST_CASE("spatial attention over one region is the value path") {
  auto cfg = toy_config();
  cfg.regions = 1;
  Generator g(cfg);
  Rng rng(3);
  Tensor h = random_tensor({2 * 3, 8}, rng, 1.0, false);
  const auto& blk = g.blocks()[0];
  auto y = g.spatial_attention(0, h, 2, 3);
  auto expect = ops::add(h, blk.spatial.out(blk.spatial.value(blk.norm_spatial(h))));
  CHECK(max_abs_diff(y, expect) < 1e-12);

  // Temporal attention over a single frame reduces the same way.
  auto yt = g.temporal_attention(0, h, 6, 1);
  auto expect_t = ops::add(h, blk.temporal.out(blk.temporal.value(blk.norm_temporal(h))));
  CHECK(max_abs_diff(yt, expect_t) < 1e-12);
}

TEST_CASE("zeroed query and key projections average values uniformly") {
  Generator g(toy_config());
  auto& blk = g.blocks()[0];
  zero(blk.spatial.query.weight);
  zero(blk.spatial.query.bias);
  zero(blk.spatial.key.weight);
  zero(blk.spatial.key.bias);
  zero(blk.spatial_bias);
  Rng rng(4);
  Tensor h = random_tensor({2 * 4, 8}, rng, 1.0, false);
  auto y = g.spatial_attention(0, h, 1, 2);
  auto v = blk.spatial.value(blk.norm_spatial(h));
  std::vector<double> avg(8 * 2, 0.0);
  for (std::size_t j = 0; j < 2; ++j)
    for (std::size_t r = 0; r < 4; ++r)
      for (std::size_t k = 0; k < 8; ++k) avg[j * 8 + k] += v.at(j * 4 + r, k) / 4.0;
  std::vector<double> rep(8 * 8);
  for (std::size_t i = 0; i < 8; ++i)
    for (std::size_t k = 0; k < 8; ++k) rep[i * 8 + k] = avg[(i / 4) * 8 + k];
  auto expect = ops::add(h, blk.spatial.out(Tensor({8, 8}, rep)));
  CHECK(max_abs_diff(y, expect) < 1e-12);
}

TEST_CASE("attention locality") {
  Generator g(toy_config());
  Rng rng(5);
  const std::size_t frames = 3, n = 4;
  Tensor h = random_tensor({frames * n, 8}, rng, 1.0, false);

  // Spatial: perturbing frame 1 leaves frames 0 and 2 unchanged.
  Tensor hf = Tensor(h.shape(), std::vector<double>(h.values().begin(), h.values().end()));
  for (std::size_t r = 0; r < n; ++r) hf.values_mut()[(1 * n + r) * 8] += 0.5;
  auto s0 = g.spatial_attention(0, h, 1, frames), s1 = g.spatial_attention(0, hf, 1, frames);
  for (std::size_t i = 0; i < frames * n; ++i) {
    double diff = 0.0;
    for (std::size_t k = 0; k < 8; ++k) diff += std::abs(s0.at(i, k) - s1.at(i, k));
    if (i / n == 1) CHECK(diff > 0.0);
    else CHECK(diff == 0.0);
  }

  // Temporal: perturbing region 2 leaves the other regions unchanged.
  Tensor hr = Tensor(h.shape(), std::vector<double>(h.values().begin(), h.values().end()));
  for (std::size_t j = 0; j < frames; ++j) hr.values_mut()[(j * n + 2) * 8 + 3] -= 0.7;
  auto t0 = g.temporal_attention(0, h, 1, frames), t1 = g.temporal_attention(0, hr, 1, frames);
  for (std::size_t i = 0; i < frames * n; ++i) {
    double diff = 0.0;
    for (std::size_t k = 0; k < 8; ++k) diff += std::abs(t0.at(i, k) - t1.at(i, k));
    if (i % n == 2) CHECK(diff > 0.0);
    else CHECK(diff == 0.0);
  }
}

TEST_CASE("time permutation equivariance without positional content") {
  Generator g(toy_config());
  for (auto& b : g.blocks()) {
    zero(b.spatial_bias);
    zero(b.temporal_bias);
  }
  Rng rng(6);
  const std::size_t frames = 4, n = 4;
  Tensor h = random_tensor({frames * n, 8}, rng, 1.0, false);
  const std::vector<std::size_t> fperm{3, 1, 0, 2};
  std::vector<std::size_t> rows;
  for (std::size_t j : fperm)
    for (std::size_t r = 0; r < n; ++r) rows.push_back(j * n + r);
  auto cond = g.speech().null_condition(1, frames);
  auto y = g.trunk(h, 1, frames, cond);
  auto yp = g.trunk(ops::gather_rows(h, rows), 1, frames, cond);
  CHECK(max_abs_diff(yp, ops::gather_rows(y, rows)) < 1e-10);
}

TEST_CASE("zeroed attention and feed-forward weights leave the trunk as identity") {
  Generator g(toy_config());
  for (auto& p : g.parameters()) {
    const auto& nm = p.name;
    const bool attn = nm.find(".spatial.") != std::string::npos || nm.find(".temporal.") != std::string::npos ||
                      nm.find(".attn.") != std::string::npos;
    if (attn || nm.find(".ffn.") != std::string::npos) zero(p.tensor);
  }
  Rng rng(7);
  auto track = random_track(12, rng);
  auto cond = g.speech().encode(track);
  Tensor x = random_tensor({3 * 4, 3}, rng, 1.0, false);
  const std::vector<double> t{0.4}, d{0.5};
  auto tokens = g.embed_tokens(x, 1, 3, t, d);
  auto out = g.trunk(tokens, 1, 3, cond);
  auto expect = g.fusion().inject(tokens, 4, cond);
  for (std::size_t k = 0; k < out.numel(); ++k) REQUIRE(out.at(k) == expect.at(k));

  // The trunk input is the token projection plus tables plus step embedding.
  auto find = [&](const std::string& name) {
    for (auto& p : g.parameters())
      if (p.name == name) return p.tensor;
    FAIL("missing " << name);
    return Tensor();
  };
  auto proj = ops::grouped_linear(x, find("in.weight"), find("in.bias"));
  auto step = g.step_embedding(t, d);
  auto spatial = find("pos.spatial"), temporal = find("pos.temporal");
  for (std::size_t i = 0; i < 12; ++i)
    for (std::size_t k = 0; k < 8; ++k) {
      const double want = proj.at(i, k) + spatial.at(i % 4, k) + temporal.at(i / 4, k) + step.at(0, k);
      CHECK(tokens.at(i, k) == doctest::Approx(want).epsilon(1e-14));
    }
}

TEST_CASE("ablation flags change parameter count and outputs") {
  auto base = toy_config();
  auto no_s = base, no_t = base, no_p = base, rev = base;
  no_s.spatial = false;
  no_t.temporal = false;
  no_p.positional = false;
  rev.temporal_first = true;
  Rng rng(8);
  auto track = random_track(12, rng);
  Tensor x = random_tensor({3 * 4, 3}, rng, 1.0, false);
  const std::vector<double> t{0.5}, d{0.0};
  std::vector<std::size_t> counts;
  std::vector<Tensor> outs;
  for (const auto& c : {base, no_s, no_t, no_p, rev}) {
    Generator g(c);
    counts.push_back(parameter_count(g.parameters()));
    outs.push_back(g.forward(x, 1, 3, t, d, g.speech().encode(track)));
  }
  CHECK(std::set<std::size_t>(counts.begin(), counts.begin() + 4).size() == 4);
  CHECK(counts[4] == counts[0]);
  for (std::size_t i = 0; i < outs.size(); ++i)
    for (std::size_t j = i + 1; j < outs.size(); ++j) CHECK(max_abs_diff(outs[i], outs[j]) > 1e-9);
}

TEST_CASE("step embedding is injective on the training grid") {
  auto cfg = toy_config();
  cfg.d_model = 16;
  cfg.step_embed = 16;
  Generator g(cfg);
  std::vector<double> ts, ds;
  for (std::size_t i = 0; i <= 128; ++i)
    for (std::size_t k = 0; k <= kMaxStepLog2 + 1; ++k) {
      ts.push_back(static_cast<double>(i) / 128.0);
      ds.push_back(k == 0 ? 0.0 : std::ldexp(1.0, -static_cast<int>(k - 1)));
    }
  NoGradGuard guard;
  auto e = g.step_embedding(ts, ds);
  double min_dist = 1e300;
  for (std::size_t a = 0; a < ts.size(); ++a)
    for (std::size_t b = a + 1; b < ts.size(); ++b) {
      double s = 0.0;
      for (std::size_t k = 0; k < 16; ++k) s += std::abs(e.at(a, k) - e.at(b, k));
      min_dist = std::min(min_dist, s);
    }
  CHECK(min_dist > 1e-6);
}

TEST_CASE("checkpoint round trip") {
  auto cfg = toy_config();
  Generator g(cfg);
  Rng rng(9);
  for (auto& p : g.parameters())
    for (auto& v : Tensor(p.tensor).values_mut()) v += rng.normal() * 0.01;
  Checkpoint ck;
  g.save(ck, "gen.");
  const auto path = std::filesystem::temp_directory_path() / "glsm_test_generator.glck";
  save_checkpoint(path, ck);
  Generator h(cfg);
  h.load(load_checkpoint(path), "gen.");
  std::filesystem::remove(path);
  auto track = random_track(12, rng);
  Tensor x = random_tensor({3 * 4, 3}, rng, 1.0, false);
  const std::vector<double> t{0.1}, d{1.0};
  auto a = g.forward(x, 1, 3, t, d, g.speech().encode(track));
  auto b = h.forward(x, 1, 3, t, d, h.speech().encode(track));
  for (std::size_t k = 0; k < a.numel(); ++k) REQUIRE(a.at(k) == b.at(k));

  auto other = cfg;
  other.positional = false;
  Generator wrong(other);
  Checkpoint missing;
  wrong.save(missing, "gen.");
  CHECK_THROWS_AS(h.load(missing, "gen."), FormatError);
}
