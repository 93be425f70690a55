#include <doctest.h>

#include <cmath>

#include "glsm/sampler.hpp"
#include "gradcheck.hpp"
#include "pipeline_fixture.hpp"

using namespace glsm;
using glsm::testing::random_tensor;

namespace {

VelocityField constant(double c) {
  return [c](const Tensor& x, std::span<const double>, std::span<const double>) {
    return Tensor::full(x.shape(), c);
  };
}

}  // namespace

TEST_CASE("guided_field arithmetic") {
  Tensor x({1, 1}, {0.3});
  const std::vector<double> t{0.5}, d{0.125};
  auto fc = constant(2.0), fn = constant(1.0);
  CHECK(guided_field(fc, fn, x, t, d, 2.0).item() == 3.0);
  CHECK(guided_field(fc, fn, x, t, d, 1.0).item() == 2.0);
  CHECK(guided_field(fc, fn, x, t, d, 0.0).item() == 1.0);

  Rng rng(1);
  Tensor w = random_tensor({3, 3}, rng, 1.0, false);
  Tensor xs = random_tensor({2, 3}, rng, 1.0, false);
  VelocityField a = [&](const Tensor& in, std::span<const double>, std::span<const double>) {
    return ops::matmul(in, w);
  };
  VelocityField b = [](const Tensor& in, std::span<const double>, std::span<const double>) { return in; };
  auto g0 = guided_field(a, b, xs, t, d, 0.0), g1 = guided_field(a, b, xs, t, d, 1.0),
       g2 = guided_field(a, b, xs, t, d, 2.0);
  for (std::size_t k = 0; k < 6; ++k) CHECK(g1.at(k) == doctest::Approx(0.5 * (g0.at(k) + g2.at(k))).epsilon(1e-13));
}

TEST_CASE("step conditioning for a step budget") {
  CHECK(step_condition(1, 7) == 1.0);
  CHECK(step_condition(8, 7) == 0.125);
  CHECK(step_condition(128, 7) == 1.0 / 128.0);
  CHECK(step_condition(20, 7) == 0.0);
  CHECK(step_condition(16, 3) == 0.0);
  CHECK_THROWS_AS(step_condition(0, 7), std::invalid_argument);
}

TEST_CASE("Euler integration oracles") {
  Rng rng(2);
  Tensor x0 = random_tensor({4, 3}, rng, 1.0, false), target = random_tensor({4, 3}, rng, 1.0, false);
  std::vector<double> v(12);
  for (std::size_t i = 0; i < 12; ++i) v[i] = target.at(i) - x0.at(i);
  VelocityField straight = [&](const Tensor&, std::span<const double>, std::span<const double>) {
    return Tensor({4, 3}, v);
  };
  Tensor one = euler_sample(straight, {}, x0, 2, 1, 1.0, 1.0);
  Tensor many = euler_sample(straight, {}, x0, 2, 128, 1.0 / 128, 1.0);
  for (std::size_t m : {1u, 2u, 4u, 8u, 20u}) {
    Tensor y = euler_sample(straight, {}, x0, 2, m, 0.0, 1.0);
    for (std::size_t k = 0; k < 12; ++k) CHECK(std::abs(y.at(k) - target.at(k)) < 1e-12);
  }
  for (std::size_t k = 0; k < 12; ++k) CHECK(std::abs(one.at(k) - many.at(k)) < 1e-10);

  // One step is x0 + f(x0, 0, 1).
  std::vector<double> seen_t, seen_d;
  VelocityField lin = [&](const Tensor& x, std::span<const double> t, std::span<const double> d) {
    seen_t.push_back(t[0]);
    seen_d.push_back(d[0]);
    return ops::scale(x, -0.5);
  };
  Trajectory traj;
  Tensor y = euler_sample(lin, {}, x0, 2, 1, 1.0, 1.0, &traj);
  for (std::size_t k = 0; k < 12; ++k) CHECK(y.at(k) == x0.at(k) + 1.0 * (-0.5 * x0.at(k)));
  CHECK(seen_t == std::vector<double>{0.0});
  CHECK(seen_d == std::vector<double>{1.0});
  CHECK(traj.times == std::vector<double>{0.0, 1.0});
  CHECK(traj.states.size() == 2);

  // M-step trajectory of a shortcut-consistent field equals the 2M-step one.
  Tensor four = euler_sample(straight, {}, x0, 2, 4, 0.25, 1.0), eight = euler_sample(straight, {}, x0, 2, 8, 0.125, 1.0);
  for (std::size_t k = 0; k < 12; ++k) CHECK(std::abs(four.at(k) - eight.at(k)) < 1e-12);
}

TEST_CASE("sampling a trained tiny model") {
  auto p = glsm::testing::tiny_pipeline(30);
  std::vector<const SpeechTrack*> tracks;
  for (std::size_t i = 0; i < 3; ++i) tracks.push_back(&p.windows[i].speech);
  SamplingConfig cfg;
  CHECK(cfg.steps == 8);
  CHECK(cfg.guidance == 2.0);
  auto a = sample(p.model, p.codecs, tracks, cfg);
  auto b = sample(p.model, p.codecs, tracks, cfg);
  REQUIRE(a.size() == 3);
  for (std::size_t i = 0; i < 3; ++i)
    for (std::size_t r = 0; r < kNumRegions; ++r) {
      REQUIRE(a[i].regions[r].shape() == p.windows[i].motion.regions[r].shape());
      for (std::size_t k = 0; k < a[i].regions[r].numel(); ++k) {
        REQUIRE(a[i].regions[r].at(k) == b[i].regions[r].at(k));
        REQUIRE(std::abs(a[i].regions[r].at(k)) <= 3.0);
      }
    }
  SamplingConfig other = cfg;
  other.seed = 1;
  auto c = sample(p.model, p.codecs, tracks, other);
  double diff = 0.0;
  for (std::size_t k = 0; k < c[0].regions[0].numel(); ++k) diff += std::abs(c[0].regions[0].at(k) - a[0].regions[0].at(k));
  CHECK(diff > 1e-6);

  // Per-sequence generation matches batched generation up to GEMM blocking.
  auto timed = batch_generate(p.model, p.codecs, tracks, cfg);
  REQUIRE(timed.sequences.size() == 3);
  CHECK(timed.aits > 0.0);
  for (std::size_t k = 0; k < a[2].regions[1].numel(); ++k)
    CHECK(timed.sequences[2].regions[1].at(k) == doctest::Approx(a[2].regions[1].at(k)).epsilon(1e-9));
  CHECK(batch_generate(p.model, p.codecs, {}, cfg).sequences.empty());

  SamplingConfig snap = cfg;
  snap.snap_codes = true;
  snap.steps = 20;
  auto s = sample(p.model, p.codecs, tracks, snap);
  for (double v : s[0].regions[3].values()) CHECK(std::isfinite(v));

  FlowModel untrained(glsm::testing::tiny_generator(p.codecs.config.d_code), 3);
  CHECK_THROWS_AS(sample(untrained, p.codecs, tracks, cfg), std::invalid_argument);
}
