#include <doctest.h>

#include <cmath>
#include <filesystem>

#include "glsm/data.hpp"
#include "glsm/metrics.hpp"
#include "glsm/rng.hpp"

using namespace glsm;

namespace {

using LMat = std::vector<std::vector<long double>>;

// Cyclic Jacobi eigendecomposition in extended precision; returns
// eigenvalues and fills `vecs` with eigenvectors as columns.
std::vector<long double> jacobi_eigen(LMat a, LMat& vecs) {
  const std::size_t n = a.size();
  vecs.assign(n, std::vector<long double>(n, 0.0L));
  for (std::size_t i = 0; i < n; ++i) vecs[i][i] = 1.0L;
  for (int sweep = 0; sweep < 100; ++sweep) {
    long double off = 0.0L;
    for (std::size_t p = 0; p < n; ++p)
      for (std::size_t q = p + 1; q < n; ++q) off += a[p][q] * a[p][q];
    if (off < 1e-40L) break;
    for (std::size_t p = 0; p < n; ++p)
      for (std::size_t q = p + 1; q < n; ++q) {
        if (std::fabs(a[p][q]) < 1e-300L) continue;
        const long double theta = (a[q][q] - a[p][p]) / (2.0L * a[p][q]);
        const long double t = (theta >= 0 ? 1.0L : -1.0L) / (std::fabs(theta) + std::sqrt(theta * theta + 1.0L));
        const long double c = 1.0L / std::sqrt(t * t + 1.0L), s = t * c;
        for (std::size_t k = 0; k < n; ++k) {
          const long double akp = a[k][p], akq = a[k][q];
          a[k][p] = c * akp - s * akq;
          a[k][q] = s * akp + c * akq;
        }
        for (std::size_t k = 0; k < n; ++k) {
          const long double apk = a[p][k], aqk = a[q][k];
          a[p][k] = c * apk - s * aqk;
          a[q][k] = s * apk + c * aqk;
        }
        for (std::size_t k = 0; k < n; ++k) {
          const long double vkp = vecs[k][p], vkq = vecs[k][q];
          vecs[k][p] = c * vkp - s * vkq;
          vecs[k][q] = s * vkp + c * vkq;
        }
      }
  }
  std::vector<long double> ev(n);
  for (std::size_t i = 0; i < n; ++i) ev[i] = a[i][i];
  return ev;
}

LMat mul(const LMat& a, const LMat& b) {
  const std::size_t n = a.size();
  LMat c(n, std::vector<long double>(n, 0.0L));
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t k = 0; k < n; ++k)
      for (std::size_t j = 0; j < n; ++j) c[i][j] += a[i][k] * b[k][j];
  return c;
}

LMat sqrt_psd(const LMat& m) {
  LMat v;
  auto ev = jacobi_eigen(m, v);
  const std::size_t n = m.size();
  LMat r(n, std::vector<long double>(n, 0.0L));
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < n; ++j)
      for (std::size_t k = 0; k < n; ++k) r[i][j] += v[i][k] * std::sqrt(std::max(ev[k], 0.0L)) * v[j][k];
  return r;
}

// Independent Frechet distance from mean/covariance.
long double oracle_fgd(const std::vector<long double>& mr, const LMat& sr, const std::vector<long double>& mg,
                       const LMat& sg) {
  const std::size_t n = mr.size();
  long double d = 0.0L;
  for (std::size_t i = 0; i < n; ++i) d += (mr[i] - mg[i]) * (mr[i] - mg[i]);
  for (std::size_t i = 0; i < n; ++i) d += sr[i][i] + sg[i][i];
  const LMat root = sqrt_psd(sr);
  LMat inner = mul(mul(root, sg), root);
  LMat v;
  for (auto ev : jacobi_eigen(inner, v)) d -= 2.0L * std::sqrt(std::max(ev, 0.0L));
  return d;
}

LMat random_spd(std::size_t n, Rng& rng) {
  LMat a(n, std::vector<long double>(n));
  for (auto& row : a)
    for (auto& x : row) x = rng.normal();
  LMat s(n, std::vector<long double>(n, 0.0L));
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < n; ++j) {
      for (std::size_t k = 0; k < n; ++k) s[i][j] += a[i][k] * a[j][k];
      s[i][j] /= static_cast<long double>(n);
    }
  for (std::size_t i = 0; i < n; ++i) s[i][i] += 0.1L;
  return s;
}

GaussianStats to_stats(const std::vector<long double>& m, const LMat& s) {
  GaussianStats g;
  g.dim = m.size();
  for (auto x : m) g.mean.push_back(static_cast<double>(x));
  for (const auto& row : s)
    for (auto x : row) g.cov.push_back(static_cast<double>(x));
  return g;
}

Tensor random_features(std::size_t n, std::size_t f, Rng& rng, double shift = 0.0) {
  std::vector<double> v(n * f);
  for (auto& x : v) x = rng.normal() + shift;
  return Tensor({n, f}, std::move(v));
}

}  // namespace

TEST_CASE("fgd identity and analytic 1-D case") {
  Rng rng(1);
  Tensor x = random_features(50, 8, rng);
  CHECK(std::abs(fgd(x, x)) <= 1e-8);

  GaussianStats r{1, {0.0}, {1.0}}, g{1, {1.0}, {1.0}};
  CHECK(fgd_from_stats(r, g) == 1.0);
}

TEST_CASE("fgd matches extended-precision Jacobi oracle") {
  Rng rng(2);
  for (std::size_t n : {2u, 5u, 12u}) {
    for (int rep = 0; rep < 3; ++rep) {
      std::vector<long double> mr(n), mg(n);
      for (auto& m : mr) m = rng.normal();
      for (auto& m : mg) m = rng.normal();
      LMat sr = random_spd(n, rng), sg = random_spd(n, rng);
      const double got = fgd_from_stats(to_stats(mr, sr), to_stats(mg, sg));
      const long double want = oracle_fgd(mr, sr, mg, sg);
      CHECK(std::abs(got - static_cast<double>(want)) / std::max(1e-12, std::abs(static_cast<double>(want))) < 1e-6);
    }
  }
}

TEST_CASE("fgd is symmetric and non-negative") {
  Rng rng(3);
  for (int rep = 0; rep < 5; ++rep) {
    Tensor a = random_features(40, 6, rng);
    Tensor b = random_features(40, 6, rng, 0.3);
    const double ab = fgd(a, b), ba = fgd(b, a);
    CHECK(ab >= 0.0);
    CHECK(ab == doctest::Approx(ba).epsilon(1e-9));
  }
  CHECK_THROWS_AS(fgd(random_features(1, 3, rng), random_features(5, 3, rng)), std::invalid_argument);
  CHECK_THROWS_AS(fgd(random_features(5, 3, rng), random_features(5, 4, rng)), ShapeError);
}

TEST_CASE("gaussian_stats covariance is symmetric") {
  Rng rng(4);
  auto s = gaussian_stats(random_features(30, 7, rng));
  for (std::size_t i = 0; i < 7; ++i)
    for (std::size_t j = 0; j < 7; ++j) CHECK(std::abs(s.cov[i * 7 + j] - s.cov[j * 7 + i]) <= 1e-9);
}

TEST_CASE("l1_diversity cases") {
  Rng rng(5);
  Tensor clip = random_features(10, 3, rng);
  CHECK(l1_diversity({clip, clip, clip}) == 0.0);

  Tensor a({1, 1}, {0}), b({1, 1}, {4});
  CHECK(l1_diversity({a, b}) == 2.0);

  CHECK_THROWS_AS(l1_diversity({clip}), std::invalid_argument);
  CHECK_THROWS_AS(l1_diversity({clip, random_features(9, 3, rng)}), ShapeError);
}

TEST_CASE("motion_diversity neutralises translation") {
  Rng rng(8);
  Tensor c = random_features(8, 4, rng), d = random_features(8, 4, rng), e = random_features(8, 4, rng);
  auto map = [](const Tensor& t, auto f) {
    std::vector<double> v(t.values().begin(), t.values().end());
    for (auto& x : v) x = f(x);
    return Tensor(t.shape(), std::move(v));
  };
  const double base = motion_diversity({c, d, e});
  auto up3 = [](double x) { return x + 3.0; };
  auto times = [](double x) { return 2.5 * x; };
  CHECK(motion_diversity({map(c, up3), map(d, up3), map(e, up3)}) == doctest::Approx(base).epsilon(1e-12));
  CHECK(motion_diversity({map(c, times), map(d, times), map(e, times)}) ==
        doctest::Approx(2.5 * base).epsilon(1e-12));

  // A per-clip offset is removed entirely.
  auto up7 = [](double x) { return x + 7.0; };
  CHECK(motion_diversity({c, map(c, up7)}) == doctest::Approx(0.0).epsilon(1e-12));
  CHECK(l1_diversity({c, map(c, up7)}) > 1.0);
}

TEST_CASE("extract_gesture_beats") {
  Tensor still = Tensor::full({64, 24}, 0.7);
  CHECK(extract_beats_from_upper(still).empty());

  Tensor burst = single_burst_upper(128, 50, 1.0);
  auto beats = extract_beats_from_upper(burst);
  REQUIRE(beats.size() == 1);
  const long rest = static_cast<long>(burst_rest_frame(50));
  CHECK(std::abs(static_cast<long>(beats[0]) - rest) <= 3);

  for (const auto& s : gen_corpus(9, 4, 200)) {
    auto b = extract_gesture_beats(s.motion);
    for (std::size_t k = 0; k < b.size(); ++k) {
      CHECK(b[k] < 200);
      if (k) CHECK(b[k] > b[k - 1]);
    }
  }
}

TEST_CASE("beat_constancy oracles") {
  BeatSets same{{10, 40, 70}, {10, 40, 70}};
  CHECK(beat_constancy(same) == 1.0);

  BeatSets one{{13}, {10, 60}};
  CHECK(std::abs(beat_constancy(one, 3.0) - std::exp(-0.5)) <= 1e-12);

  BeatSets extra = one;
  extra.audio.push_back(200);
  CHECK(beat_constancy(extra, 3.0) == beat_constancy(one, 3.0));

  BeatSets shifted{{18, 47, 80}, {15, 45, 77}}, base{{3, 32, 65}, {0, 30, 62}};
  CHECK(beat_constancy(shifted) == doctest::Approx(beat_constancy(base)).epsilon(1e-15));

  CHECK(beat_constancy({{}, {1, 2}}) == 0.0);
}

TEST_CASE("bc_gap") {
  CHECK(bc_gap(0.5, 0.5) == 0.0);
  CHECK(bc_gap(0.714, 0.703) == doctest::Approx(0.011).epsilon(1e-9));
  CHECK(bc_gap(0.3, 0.8) == bc_gap(0.8, 0.3));
}

TEST_CASE("face_mse") {
  Tensor ones = Tensor::full({4, 16}, 1.0), zeros({4, 16});
  CHECK(face_mse(ones, ones) == 0.0);
  CHECK(face_mse(ones, zeros) == 1.0);
  CHECK_THROWS_AS(face_mse(ones, Tensor({3, 16})), ShapeError);

  Rng rng(6);
  Tensor a = random_features(30, 16, rng), b = random_features(30, 16, rng);
  // Reverse-order accumulation as a second summation path.
  long double s = 0.0L;
  for (std::size_t i = a.numel(); i-- > 0;) s += (a.at(i) - b.at(i)) * (a.at(i) - b.at(i));
  CHECK(std::abs(face_mse(a, b) - static_cast<double>(s / a.numel())) <= 1e-12);
}

TEST_CASE("feature extractor is deterministic and separates distributions") {
  auto corpus = cut_windows(gen_corpus(21, 12, 128), 64);
  std::vector<Tensor> clips;
  for (const auto& s : corpus) clips.push_back(full_body(s.motion));
  FeatureExtractorConfig cfg;
  cfg.steps = 60;
  FeatureExtractor fx(cfg);
  fx.train(clips);

  auto f1 = fx.features(clips[0]);
  auto f2 = fx.features(clips[0]);
  CHECK(f1 == f2);
  CHECK(f1.size() == 64);

  Rng rng(7);
  std::vector<Tensor> noise;
  for (std::size_t i = 0; i < clips.size(); ++i) noise.push_back(random_features(64, 100, rng));
  Tensor real = fx.features(clips);
  CHECK(fgd(real, real) <= 1e-8);
  CHECK(fgd(real, fx.features(noise)) > 1.0);

  const auto path = std::filesystem::temp_directory_path() / "glsm_test_fx.glck";
  save_checkpoint(path, fx.to_checkpoint());
  auto fx2 = FeatureExtractor::from_checkpoint(load_checkpoint(path));
  CHECK(fx2.features(clips[3]) == fx.features(clips[3]));
  std::filesystem::remove(path);
}
