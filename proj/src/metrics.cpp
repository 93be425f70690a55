#include "glsm/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <iostream>
#include <limits>
#include <stdexcept>

#include <Eigen/Dense>

#include "glsm/ops.hpp"
#include "glsm/optim.hpp"
#include "glsm/rng.hpp"

namespace glsm {

namespace {

using Mat = Eigen::MatrixXd;

Mat cov_matrix(const GaussianStats& s) {
  Mat m(s.dim, s.dim);
  for (std::size_t i = 0; i < s.dim; ++i)
    for (std::size_t j = 0; j < s.dim; ++j) m(i, j) = s.cov[i * s.dim + j];
  return 0.5 * (m + m.transpose());
}

Mat psd_sqrt(const Mat& m) {
  Eigen::SelfAdjointEigenSolver<Mat> es(m);
  const Eigen::VectorXd ev = es.eigenvalues().cwiseMax(0.0).cwiseSqrt();
  return es.eigenvectors() * ev.asDiagonal() * es.eigenvectors().transpose();
}

}  // namespace

GaussianStats gaussian_stats(const Tensor& features) {
  if (features.rank() != 2) throw ShapeError("gaussian_stats: expected N x F features");
  const std::size_t n = features.rows(), f = features.cols();
  if (n < 2) throw std::invalid_argument("gaussian_stats: need at least 2 samples");
  GaussianStats s;
  s.dim = f;
  s.mean.assign(f, 0.0);
  s.cov.assign(f * f, 0.0);
  const auto x = features.values();
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t c = 0; c < f; ++c) s.mean[c] += x[i * f + c];
  for (auto& m : s.mean) m /= static_cast<double>(n);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t a = 0; a < f; ++a) {
      const double da = x[i * f + a] - s.mean[a];
      for (std::size_t b = a; b < f; ++b) s.cov[a * f + b] += da * (x[i * f + b] - s.mean[b]);
    }
  for (std::size_t a = 0; a < f; ++a)
    for (std::size_t b = a; b < f; ++b) {
      s.cov[a * f + b] /= static_cast<double>(n - 1);
      s.cov[b * f + a] = s.cov[a * f + b];
    }
  return s;
}

double fgd_from_stats(const GaussianStats& real, const GaussianStats& gen) {
  if (real.dim != gen.dim) throw ShapeError("fgd: feature widths differ");
  double mean_term = 0.0;
  for (std::size_t i = 0; i < real.dim; ++i) mean_term += (real.mean[i] - gen.mean[i]) * (real.mean[i] - gen.mean[i]);
  const Mat sr = cov_matrix(real), sg = cov_matrix(gen);
  const Mat root_r = psd_sqrt(sr);
  Mat inner = root_r * sg * root_r;
  inner = 0.5 * (inner + inner.transpose());
  Eigen::SelfAdjointEigenSolver<Mat> es(inner, Eigen::EigenvaluesOnly);
  const double cross = es.eigenvalues().cwiseMax(0.0).cwiseSqrt().sum();
  const double d = mean_term + sr.trace() + sg.trace() - 2.0 * cross;
  return std::max(d, 0.0);
}

double fgd(const Tensor& real_features, const Tensor& gen_features) {
  return fgd_from_stats(gaussian_stats(real_features), gaussian_stats(gen_features));
}

double l1_diversity(const std::vector<Tensor>& clips) {
  const std::size_t n = clips.size();
  if (n < 2) throw std::invalid_argument("l1_diversity: need at least 2 clips");
  for (const auto& c : clips)
    if (c.shape() != clips[0].shape()) throw ShapeError("l1_diversity: clip shapes differ");
  double total = 0.0;
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < n; ++j) {
      if (i == j) continue;
      const auto a = clips[i].values(), b = clips[j].values();
      for (std::size_t k = 0; k < a.size(); ++k) total += std::abs(a[k] - b[k]);
    }
  return total / (2.0 * static_cast<double>(n) * static_cast<double>(n - 1));
}

std::vector<Tensor> neutralize_translation(const std::vector<Tensor>& clips) {
  std::vector<Tensor> out;
  out.reserve(clips.size());
  for (const auto& clip : clips) {
    const std::size_t t_len = clip.rows(), c_len = clip.cols();
    const auto x = clip.values();
    std::vector<double> mean(c_len, 0.0);
    for (std::size_t t = 0; t < t_len; ++t)
      for (std::size_t c = 0; c < c_len; ++c) mean[c] += x[t * c_len + c];
    for (auto& m : mean) m /= static_cast<double>(t_len);
    std::vector<double> v(x.size());
    for (std::size_t t = 0; t < t_len; ++t)
      for (std::size_t c = 0; c < c_len; ++c) v[t * c_len + c] = x[t * c_len + c] - mean[c];
    out.emplace_back(clip.shape(), std::move(v));
  }
  return out;
}

double motion_diversity(const std::vector<Tensor>& clips) { return l1_diversity(neutralize_translation(clips)); }

std::vector<double> upper_velocity(const Tensor& upper) {
  const std::size_t t_len = upper.rows(), c = upper.cols();
  const auto x = upper.values();
  std::vector<double> v(t_len, 0.0);
  for (std::size_t t = 1; t < t_len; ++t) {
    double s = 0.0;
    for (std::size_t j = 0; j < c; ++j) {
      const double d = x[t * c + j] - x[(t - 1) * c + j];
      s += d * d;
    }
    v[t] = std::sqrt(s);
  }
  return v;
}

std::vector<std::uint32_t> extract_beats_from_upper(const Tensor& upper, double prominence) {
  const std::size_t n = upper.rows();
  std::vector<std::uint32_t> beats;
  if (n < 3) return beats;
  const std::vector<double> v = upper_velocity(upper);
  const auto [lo, hi] = std::minmax_element(v.begin() + 1, v.end());
  const double range = *hi - *lo;
  if (!(range > 1e-12)) return beats;
  const double threshold = prominence * range;

  std::size_t a = 1;
  while (a < n) {
    std::size_t b = a;
    while (b + 1 < n && v[b + 1] == v[a]) ++b;
    const bool entered = a > 1 && v[a - 1] > v[a];
    const bool at_end = b + 1 == n;
    const bool exits = !at_end && v[b + 1] > v[a];
    if (entered && (exits || (at_end && b > a))) {
      double left = v[a];
      for (std::size_t k = a; k-- > 1 && v[k] >= v[a];) left = std::max(left, v[k]);
      double drop = left - v[a];
      if (!at_end) {
        double right = v[a];
        for (std::size_t k = b + 1; k < n && v[k] >= v[a]; ++k) right = std::max(right, v[k]);
        drop = std::min(drop, right - v[a]);
      }
      if (drop >= threshold) beats.push_back(static_cast<std::uint32_t>(a));
    }
    a = b + 1;
  }
  return beats;
}

std::vector<std::uint32_t> extract_gesture_beats(const MotionSequence& motion, double prominence) {
  return extract_beats_from_upper(motion.region(Region::Upper), prominence);
}

namespace {

// Sum of kernel values and count of gesture beats.
std::pair<double, std::size_t> kernel_sum(const BeatSets& s, double sigma) {
  double total = 0.0;
  if (s.audio.empty()) return {0.0, s.gesture.size()};
  for (auto g : s.gesture) {
    double best = std::numeric_limits<double>::infinity();
    for (auto a : s.audio) best = std::min(best, std::abs(static_cast<double>(g) - static_cast<double>(a)));
    total += std::exp(-best * best / (2.0 * sigma * sigma));
  }
  return {total, s.gesture.size()};
}

}  // namespace

double beat_constancy(const BeatSets& beats, double sigma) {
  if (beats.gesture.empty()) {
    std::cerr << "warning: beat_constancy with no gesture beats; reporting 0\n";
    return 0.0;
  }
  if (beats.audio.empty()) throw std::invalid_argument("beat_constancy: audio beat set is empty");
  const auto [total, count] = kernel_sum(beats, sigma);
  return total / static_cast<double>(count);
}

double pooled_beat_constancy(const std::vector<BeatSets>& sets, double sigma) {
  double total = 0.0;
  std::size_t count = 0;
  for (const auto& s : sets) {
    const auto [t, c] = kernel_sum(s, sigma);
    total += t;
    count += c;
  }
  if (count == 0) {
    std::cerr << "warning: beat_constancy with no gesture beats; reporting 0\n";
    return 0.0;
  }
  return total / static_cast<double>(count);
}

double bc_gap(double bc_generated, double bc_ground_truth) { return std::abs(bc_generated - bc_ground_truth); }

double motion_beat_constancy(const std::vector<MotionSequence>& motions,
                             const std::vector<SpeechTrack>& speech, const BeatParams& params) {
  if (motions.size() != speech.size()) throw std::invalid_argument("motion_beat_constancy: count mismatch");
  std::vector<BeatSets> sets;
  for (std::size_t i = 0; i < motions.size(); ++i)
    sets.push_back({extract_gesture_beats(motions[i], params.prominence), speech[i].beats});
  return pooled_beat_constancy(sets, params.sigma);
}

double face_mse(const Tensor& generated, const Tensor& ground_truth) {
  if (generated.shape() != ground_truth.shape()) throw ShapeError("face_mse: shape mismatch");
  const auto a = generated.values(), b = ground_truth.values();
  if (a.empty()) return 0.0;
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += (a[i] - b[i]) * (a[i] - b[i]);
  return s / static_cast<double>(a.size());
}

// ---------------------------------------------------------------------------

FeatureExtractor::FeatureExtractor(const FeatureExtractorConfig& config) : config_(config) {
  Rng rng(config.seed);
  const std::size_t w = total_width();
  down1_ = Conv1d(w, config.hidden, 3, 2, rng);
  down2_ = Conv1d(config.hidden, config.hidden, 3, 2, rng);
  bottleneck_ = Linear(config.hidden, config.feature, rng);
  up1_ = Conv1d(config.feature, config.hidden, 3, 1, rng);
  up2_ = Conv1d(config.hidden, w, 3, 1, rng);
  channel_mean_.assign(w, 0.0);
  channel_scale_.assign(w, 1.0);
}

ParamList FeatureExtractor::parameters() const {
  ParamList p;
  down1_.collect(p, "down1");
  down2_.collect(p, "down2");
  bottleneck_.collect(p, "bottleneck");
  up1_.collect(p, "up1");
  up2_.collect(p, "up2");
  return p;
}

Tensor FeatureExtractor::encode(const Tensor& x, std::size_t seq_len) const {
  Tensor h = ops::gelu(down1_(x, seq_len));
  h = ops::gelu(down2_(h, (seq_len + 1) / 2));
  return bottleneck_(h);
}

Tensor FeatureExtractor::decode(const Tensor& z, std::size_t latent_len) const {
  Tensor h = ops::upsample_rows(z, latent_len, 2);
  h = ops::gelu(up1_(h, latent_len * 2));
  h = ops::upsample_rows(h, latent_len * 2, 2);
  return up2_(h, latent_len * 4);
}

Tensor FeatureExtractor::normalise(const Tensor& clip) const {
  const std::size_t c = clip.cols();
  if (c != channel_mean_.size()) throw ShapeError("feature extractor: expected full-body frames");
  std::vector<double> v(clip.values().begin(), clip.values().end());
  for (std::size_t i = 0; i < v.size(); ++i) v[i] = (v[i] - channel_mean_[i % c]) / channel_scale_[i % c];
  return Tensor({clip.rows(), c}, std::move(v));
}

double FeatureExtractor::train(const std::vector<Tensor>& clips) {
  if (clips.empty()) throw std::invalid_argument("feature extractor: no training clips");
  const std::size_t w = total_width(), win = config_.window;
  std::vector<double> sum(w, 0.0), sq(w, 0.0);
  double count = 0.0;
  for (const auto& c : clips) {
    if (c.cols() != w || c.rows() < win) throw ShapeError("feature extractor: clip too short or wrong width");
    const auto x = c.values();
    for (std::size_t i = 0; i < x.size(); ++i) {
      sum[i % w] += x[i];
      sq[i % w] += x[i] * x[i];
    }
    count += static_cast<double>(c.rows());
  }
  for (std::size_t j = 0; j < w; ++j) {
    channel_mean_[j] = sum[j] / count;
    channel_scale_[j] = std::sqrt(std::max(sq[j] / count - channel_mean_[j] * channel_mean_[j], 0.0)) + 1e-6;
  }
  std::vector<Tensor> norm;
  for (const auto& c : clips) norm.push_back(normalise(c));

  Adam opt(tensors_of(parameters()), AdamConfig{.lr = config_.lr});
  Rng rng(mix_seed(config_.seed, 1));
  double last = 0.0;
  for (std::size_t step = 0; step < config_.steps; ++step) {
    std::vector<double> batch;
    batch.reserve(config_.batch * win * w);
    for (std::size_t b = 0; b < config_.batch; ++b) {
      const Tensor& c = norm[rng.index(norm.size())];
      const std::size_t start = rng.index(c.rows() - win + 1);
      const auto x = c.values();
      batch.insert(batch.end(), x.begin() + static_cast<std::ptrdiff_t>(start * w),
                   x.begin() + static_cast<std::ptrdiff_t>((start + win) * w));
    }
    Tensor x({config_.batch * win, w}, std::move(batch));
    opt.zero_grad();
    Tensor loss = ops::mse(decode(encode(x, win), win / 4), x);
    backward(loss);
    opt.step();
    last = loss.item();
  }
  return last;
}

std::vector<double> FeatureExtractor::features(const Tensor& clip) const {
  const std::size_t t_len = clip.rows() - clip.rows() % 4;
  if (t_len < 4) throw ShapeError("feature extractor: clip shorter than 4 frames");
  NoGradGuard guard;
  Tensor x = normalise(clip);
  if (t_len != clip.rows()) {
    std::vector<std::size_t> idx(t_len);
    for (std::size_t i = 0; i < t_len; ++i) idx[i] = i;
    x = ops::gather_rows(x, idx);
  }
  const Tensor z = encode(x, t_len);
  const std::size_t f = z.cols(), rows = z.rows();
  std::vector<double> out(f, 0.0);
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t j = 0; j < f; ++j) out[j] += z.at(r, j);
  for (auto& o : out) o /= static_cast<double>(rows);
  return out;
}

Tensor FeatureExtractor::features(const std::vector<Tensor>& clips) const {
  std::vector<double> all;
  for (const auto& c : clips) {
    const auto f = features(c);
    all.insert(all.end(), f.begin(), f.end());
  }
  return Tensor({clips.size(), config_.feature}, std::move(all));
}

Checkpoint FeatureExtractor::to_checkpoint() const {
  Checkpoint ck;
  ck.config = {{"kind", "feature_extractor"},
               {"hidden", config_.hidden},
               {"feature", config_.feature},
               {"window", config_.window},
               {"steps", config_.steps},
               {"batch", config_.batch},
               {"lr", config_.lr},
               {"seed", config_.seed}};
  for (const auto& p : parameters()) ck.tensors[p.name] = p.tensor;
  ck.tensors["channel_mean"] = Tensor({channel_mean_.size()}, channel_mean_);
  ck.tensors["channel_scale"] = Tensor({channel_scale_.size()}, channel_scale_);
  return ck;
}

FeatureExtractor FeatureExtractor::from_checkpoint(const Checkpoint& ckpt) {
  if (ckpt.config.value("kind", "") != "feature_extractor")
    throw FormatError("checkpoint does not hold a feature extractor");
  FeatureExtractorConfig c;
  c.hidden = ckpt.config.at("hidden");
  c.feature = ckpt.config.at("feature");
  c.window = ckpt.config.at("window");
  c.steps = ckpt.config.at("steps");
  c.batch = ckpt.config.at("batch");
  c.lr = ckpt.config.at("lr");
  c.seed = ckpt.config.at("seed");
  FeatureExtractor fx(c);
  for (auto& p : fx.parameters()) {
    const auto it = ckpt.tensors.find(p.name);
    if (it == ckpt.tensors.end()) throw FormatError("checkpoint missing tensor " + p.name);
    if (it->second.shape() != p.tensor.shape()) throw FormatError("checkpoint shape mismatch for " + p.name);
    std::copy(it->second.values().begin(), it->second.values().end(), p.tensor.values_mut().begin());
  }
  const auto& m = ckpt.tensors.at("channel_mean");
  const auto& s = ckpt.tensors.at("channel_scale");
  fx.channel_mean_.assign(m.values().begin(), m.values().end());
  fx.channel_scale_.assign(s.values().begin(), s.values().end());
  return fx;
}

}  // namespace glsm
