#include "glsm/flow.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <stdexcept>

#include "glsm/ops.hpp"

namespace glsm {

std::string time_sampler_name(TimeSamplerKind k) {
  switch (k) {
    case TimeSamplerKind::Uniform: return "uniform";
    case TimeSamplerKind::LogitNormal: return "logit-normal";
    case TimeSamplerKind::Mode: return "mode";
    case TimeSamplerKind::CosMap: return "cosmap";
    case TimeSamplerKind::Beta: return "beta";
  }
  return "unknown";
}

TimeSamplerKind parse_time_sampler(const std::string& name) {
  for (auto k : {TimeSamplerKind::Uniform, TimeSamplerKind::LogitNormal, TimeSamplerKind::Mode,
                 TimeSamplerKind::CosMap, TimeSamplerKind::Beta})
    if (time_sampler_name(k) == name) return k;
  throw std::invalid_argument("unknown time sampler '" + name + "'");
}

nlohmann::json to_json(const TimeSampler& s) {
  return {{"kind", time_sampler_name(s.kind)}, {"alpha", s.alpha}, {"beta", s.beta},
          {"location", s.location},            {"scale", s.scale}, {"mode_scale", s.mode_scale}};
}

TimeSampler time_sampler_from_json(const nlohmann::json& j) {
  TimeSampler s;
  s.kind = parse_time_sampler(j.at("kind"));
  s.alpha = j.at("alpha");
  s.beta = j.at("beta");
  s.location = j.at("location");
  s.scale = j.at("scale");
  s.mode_scale = j.at("mode_scale");
  return s;
}

double sample_gamma(double shape, Rng& rng) {
  if (!(shape > 0.0)) throw std::invalid_argument("gamma shape must be positive");
  if (shape < 1.0) {
    double u = 0.0;
    while (u == 0.0) u = rng.uniform();
    return sample_gamma(shape + 1.0, rng) * std::pow(u, 1.0 / shape);
  }
  const double d = shape - 1.0 / 3.0, c = 1.0 / std::sqrt(9.0 * d);
  while (true) {
    double x = 0.0, v = 0.0;
    do {
      x = rng.normal();
      v = 1.0 + c * x;
    } while (v <= 0.0);
    v = v * v * v;
    const double u = rng.uniform();
    if (u < 1.0 - 0.0331 * x * x * x * x) return d * v;
    if (u > 0.0 && std::log(u) < 0.5 * x * x + d * (1.0 - v + std::log(v))) return d * v;
  }
}

double beta_pdf(double t, double alpha, double beta) {
  if (t <= 0.0 || t >= 1.0) return 0.0;
  const double log_b = std::lgamma(alpha) + std::lgamma(beta) - std::lgamma(alpha + beta);
  return std::exp((alpha - 1.0) * std::log(t) + (beta - 1.0) * std::log1p(-t) - log_b);
}

double sample_timestep(const TimeSampler& s, Rng& rng) {
  switch (s.kind) {
    case TimeSamplerKind::Beta:
      if (!(s.alpha > 0.0 && s.beta > 0.0)) throw std::invalid_argument("beta sampler needs alpha, beta > 0");
      break;
    case TimeSamplerKind::LogitNormal:
      if (!(s.scale > 0.0)) throw std::invalid_argument("logit-normal scale must be positive");
      break;
    case TimeSamplerKind::Mode:
      if (!(s.mode_scale >= -1.0 && s.mode_scale <= 2.0 / (std::numbers::pi - 2.0)))
        throw std::invalid_argument("mode scale outside [-1, 2/(pi-2)]");
      break;
    default: break;
  }
  while (true) {
    double t = 0.0;
    switch (s.kind) {
      case TimeSamplerKind::Uniform: t = rng.uniform(); break;
      case TimeSamplerKind::LogitNormal: t = 1.0 / (1.0 + std::exp(-(s.location + s.scale * rng.normal()))); break;
      case TimeSamplerKind::Mode: {
        const double u = rng.uniform();
        const double c = std::cos(std::numbers::pi * u / 2.0);
        t = 1.0 - u - s.mode_scale * (c * c - 1.0 + u);
        break;
      }
      case TimeSamplerKind::CosMap: t = 1.0 - 1.0 / (std::tan(std::numbers::pi * rng.uniform() / 2.0) + 1.0); break;
      case TimeSamplerKind::Beta: {
        const double x = sample_gamma(s.alpha, rng), y = sample_gamma(s.beta, rng);
        t = x / (x + y);
        break;
      }
    }
    if (t > 0.0 && t < 1.0) return t;
  }
}

namespace {

std::size_t rows_per_sample(const Tensor& x, std::size_t batch) {
  if (batch == 0 || x.rank() != 2 || x.rows() % batch != 0) throw ShapeError("grid rows not divisible by batch");
  return x.rows() / batch;
}

}  // namespace

Tensor interpolate(const Tensor& x0, const Tensor& x1, std::span<const double> t) {
  if (x0.shape() != x1.shape()) throw ShapeError("interpolate: shape mismatch");
  const std::size_t per = rows_per_sample(x0, t.size()) * x0.cols();
  std::vector<double> out(x0.numel());
  for (std::size_t b = 0; b < t.size(); ++b) {
    if (!(t[b] >= 0.0 && t[b] <= 1.0)) throw std::invalid_argument("interpolate: t outside [0, 1]");
    for (std::size_t i = b * per; i < (b + 1) * per; ++i) out[i] = (1.0 - t[b]) * x0.at(i) + t[b] * x1.at(i);
  }
  return Tensor(x0.shape(), std::move(out));
}

Tensor interpolate(const Tensor& x0, const Tensor& x1, double t) {
  return interpolate(x0, x1, std::span<const double>(&t, 1));
}

Tensor flow_loss(const VelocityField& field, const Tensor& x0, const Tensor& x1, std::span<const double> t) {
  Tensor xt = interpolate(x0, x1, t);
  std::vector<double> v(x0.numel());
  for (std::size_t i = 0; i < v.size(); ++i) v[i] = x1.at(i) - x0.at(i);
  const std::vector<double> zero(t.size(), 0.0);
  return ops::mse(field(xt, t, zero), Tensor(x0.shape(), std::move(v)));
}

Tensor shortcut_consistency_loss(const VelocityField& field, const Tensor& x_t, std::span<const double> t,
                                 std::span<const double> d, std::span<const double> d_teacher) {
  const std::size_t b = t.size();
  if (d.size() != b || (!d_teacher.empty() && d_teacher.size() != b))
    throw ShapeError("consistency: one d per sample required");
  const std::size_t per = rows_per_sample(x_t, b) * x_t.cols();
  std::vector<double> t2(b), d2(b), dt(b);
  for (std::size_t i = 0; i < b; ++i) {
    if (t[i] + 2.0 * d[i] > 1.0) throw std::invalid_argument("consistency: t + 2d exceeds 1");
    t2[i] = t[i] + d[i];
    d2[i] = 2.0 * d[i];
    dt[i] = d_teacher.empty() ? d[i] : d_teacher[i];
  }
  Tensor target;
  {
    NoGradGuard guard;
    Tensor f1 = field(x_t, t, dt);
    std::vector<double> xs(x_t.numel());
    for (std::size_t i = 0; i < xs.size(); ++i) xs[i] = x_t.at(i) + d[i / per] * f1.at(i);
    Tensor f2 = field(Tensor(x_t.shape(), std::move(xs)), t2, dt);
    std::vector<double> tg(x_t.numel());
    for (std::size_t i = 0; i < tg.size(); ++i) tg[i] = 0.5 * (f1.at(i) + f2.at(i));
    target = Tensor(x_t.shape(), std::move(tg));
  }
  return ops::mse(field(x_t, t, d2), target);
}

nlohmann::json to_json(const FlowPlan& p) {
  return {{"consistency_fraction", p.consistency_fraction},
          {"min_step_log2", p.min_step_log2},
          {"condition_dropout", p.condition_dropout},
          {"sampler", to_json(p.sampler)},
          {"steps", p.steps},
          {"batch", p.batch},
          {"window", p.window},
          {"lr", p.lr},
          {"clip_norm", p.clip_norm},
          {"seed", p.seed}};
}

FlowPlan flow_plan_from_json(const nlohmann::json& j) {
  FlowPlan p;
  p.consistency_fraction = j.at("consistency_fraction");
  p.min_step_log2 = j.at("min_step_log2");
  p.condition_dropout = j.at("condition_dropout");
  p.sampler = time_sampler_from_json(j.at("sampler"));
  p.steps = j.at("steps");
  p.batch = j.at("batch");
  p.window = j.at("window");
  p.lr = j.at("lr");
  p.clip_norm = j.at("clip_norm");
  p.seed = j.at("seed");
  return p;
}

std::vector<double> trained_step_sizes(std::size_t min_step_log2) {
  std::vector<double> out;
  for (std::size_t k = 0; k <= min_step_log2; ++k) out.push_back(std::ldexp(1.0, -static_cast<int>(k)));
  return out;
}

FlowModel::FlowModel(const GeneratorConfig& gen, std::size_t min_step_log2)
    : generator_(gen), min_step_log2_(min_step_log2) {
  if (min_step_log2 > kMaxStepLog2) throw std::invalid_argument("min_step_log2 exceeds the step embedding range");
  mean_.assign(gen.regions * gen.d_latent, 0.0);
  scale_.assign(gen.regions * gen.d_latent, 1.0);
}

VelocityField FlowModel::bind(const SpeechCondition& cond) const {
  return [this, cond](const Tensor& x, std::span<const double> t, std::span<const double> d) {
    const std::size_t n = generator_.config().regions;
    const std::size_t frames = rows_per_sample(x, t.size()) / n;
    return generator_.forward(x, t.size(), frames, t, d, cond);
  };
}

Tensor FlowModel::to_grid(const std::array<Tensor, kNumRegions>& latents) const {
  const auto& c = generator_.config();
  if (c.regions != kNumRegions) throw ShapeError("to_grid: model does not cover all body regions");
  const std::size_t frames = latents[0].rows(), w = c.d_latent;
  std::vector<double> g(frames * kNumRegions * w);
  for (std::size_t r = 0; r < kNumRegions; ++r) {
    if (latents[r].rows() != frames || latents[r].cols() != w) throw ShapeError("to_grid: latent shape mismatch");
    for (std::size_t j = 0; j < frames; ++j)
      for (std::size_t k = 0; k < w; ++k) g[(j * kNumRegions + r) * w + k] = latents[r].at(j, k);
  }
  return Tensor({frames * kNumRegions, w}, std::move(g));
}

std::array<Tensor, kNumRegions> FlowModel::from_grid(const Tensor& grid) const {
  const std::size_t w = generator_.config().d_latent;
  if (grid.cols() != w || grid.rows() % kNumRegions != 0) throw ShapeError("from_grid: grid shape mismatch");
  const std::size_t frames = grid.rows() / kNumRegions;
  std::array<Tensor, kNumRegions> out;
  for (std::size_t r = 0; r < kNumRegions; ++r) {
    std::vector<double> v(frames * w);
    for (std::size_t j = 0; j < frames; ++j)
      for (std::size_t k = 0; k < w; ++k) v[j * w + k] = grid.at(j * kNumRegions + r, k);
    out[r] = Tensor({frames, w}, std::move(v));
  }
  return out;
}

void FlowModel::fit_standardisation(const std::vector<Tensor>& grids) {
  const auto& c = generator_.config();
  const std::size_t n = c.regions, w = c.d_latent;
  std::vector<long double> s(n * w, 0.0L), s2(n * w, 0.0L);
  std::vector<std::size_t> count(n, 0);
  for (const auto& g : grids) {
    if (g.cols() != w || g.rows() % n != 0) throw ShapeError("fit_standardisation: grid shape mismatch");
    for (std::size_t i = 0; i < g.rows(); ++i) {
      ++count[i % n];
      for (std::size_t k = 0; k < w; ++k) {
        const long double v = g.at(i, k);
        s[(i % n) * w + k] += v;
        s2[(i % n) * w + k] += v * v;
      }
    }
  }
  if (count[0] < 2) throw std::invalid_argument("fit_standardisation: not enough latents");
  for (std::size_t r = 0; r < n; ++r)
    for (std::size_t k = 0; k < w; ++k) {
      const long double m = s[r * w + k] / count[r];
      const long double var = s2[r * w + k] / count[r] - m * m;
      mean_[r * w + k] = static_cast<double>(m);
      scale_[r * w + k] = std::max(1e-6, std::sqrt(static_cast<double>(std::max(var, 0.0L))));
    }
}

Tensor FlowModel::standardise(const Tensor& g) const {
  const std::size_t n = generator_.config().regions, w = generator_.config().d_latent;
  std::vector<double> v(g.numel());
  for (std::size_t i = 0; i < g.rows(); ++i)
    for (std::size_t k = 0; k < w; ++k) v[i * w + k] = (g.at(i, k) - mean_[(i % n) * w + k]) / scale_[(i % n) * w + k];
  return Tensor(g.shape(), std::move(v));
}

Tensor FlowModel::destandardise(const Tensor& g) const {
  const std::size_t n = generator_.config().regions, w = generator_.config().d_latent;
  std::vector<double> v(g.numel());
  for (std::size_t i = 0; i < g.rows(); ++i)
    for (std::size_t k = 0; k < w; ++k) v[i * w + k] = g.at(i, k) * scale_[(i % n) * w + k] + mean_[(i % n) * w + k];
  return Tensor(g.shape(), std::move(v));
}

Checkpoint FlowModel::to_checkpoint() const {
  Checkpoint ck;
  ck.config = {{"kind", "flow"},
               {"generator", to_json(generator_.config())},
               {"min_step_log2", min_step_log2_},
               {"trained", trained_}};
  generator_.save(ck, "gen.");
  ck.tensors["latent_mean"] = Tensor({mean_.size()}, mean_);
  ck.tensors["latent_scale"] = Tensor({scale_.size()}, scale_);
  return ck;
}

FlowModel FlowModel::from_checkpoint(const Checkpoint& ck) {
  if (!ck.config.contains("kind") || ck.config.at("kind") != "flow")
    throw FormatError("checkpoint is not a flow model (parameter manifest missing)");
  FlowModel m(generator_config_from_json(ck.config.at("generator")), ck.config.at("min_step_log2"));
  m.generator_.load(ck, "gen.");
  m.trained_ = ck.config.at("trained");
  for (auto* field : {&m.mean_, &m.scale_}) {
    const auto it = ck.tensors.find(field == &m.mean_ ? "latent_mean" : "latent_scale");
    if (it == ck.tensors.end() || it->second.numel() != field->size())
      throw FormatError("checkpoint missing latent standardisation");
    field->assign(it->second.values().begin(), it->second.values().end());
  }
  return m;
}

std::vector<Tensor> encode_windows(const RvqCodecs& codecs, const FlowModel& model,
                                   const std::vector<CorpusSample>& windows) {
  std::vector<Tensor> out;
  out.reserve(windows.size());
  for (const auto& w : windows) {
    std::array<Tensor, kNumRegions> lat;
    for (std::size_t r = 0; r < kNumRegions; ++r) lat[r] = codecs.regions[r].encode(w.motion.regions[r]);
    out.push_back(model.to_grid(lat));
  }
  return out;
}

std::vector<LatentExample> latent_dataset(const RvqCodecs& codecs, const FlowModel& model,
                                          const std::vector<CorpusSample>& windows) {
  const auto grids = encode_windows(codecs, model, windows);
  std::vector<LatentExample> out;
  for (std::size_t i = 0; i < windows.size(); ++i)
    out.push_back({model.standardise(grids[i]), windows[i].speech, grids[i].rows() / kNumRegions});
  return out;
}

FlowTrainer::FlowTrainer(FlowModel& model, const FlowPlan& plan)
    : model_(model),
      plan_(plan),
      opt_(tensors_of(model.generator().parameters()), AdamConfig{plan.lr, 0.9, 0.999, 1e-8, plan.clip_norm}),
      rng_(mix_seed(plan.seed, 0xf10)) {
  if (plan.batch == 0) throw std::invalid_argument("flow batch must be positive");
  if (!(plan.consistency_fraction >= 0.0 && plan.consistency_fraction <= 1.0))
    throw std::invalid_argument("consistency fraction must lie in [0, 1]");
  if (plan.min_step_log2 != model.min_step_log2())
    throw std::invalid_argument("plan step range differs from the model's");
}

FlowStepLog FlowTrainer::step(const std::vector<LatentExample>& data) {
  if (data.empty()) throw std::invalid_argument("flow training needs data");
  const std::size_t b = plan_.batch;
  const auto n_c = static_cast<std::size_t>(std::lround(plan_.consistency_fraction * static_cast<double>(b)));
  const std::size_t n_f = b - n_c;
  const std::size_t frames = data[0].frames;
  const std::size_t rows = data[0].grid.rows(), w = data[0].grid.cols(), per = rows * w;

  std::vector<const SpeechTrack*> tracks;
  std::vector<double> x1v(b * per), x0v(b * per);
  for (std::size_t i = 0; i < b; ++i) {
    const auto& ex = data[rng_.index(data.size())];
    if (ex.grid.rows() != rows) throw ShapeError("flow batch mixes window lengths");
    tracks.push_back(&ex.speech);
    std::copy(ex.grid.values().begin(), ex.grid.values().end(), x1v.begin() + static_cast<std::ptrdiff_t>(i * per));
  }
  for (auto& v : x0v) v = rng_.normal();

  std::vector<double> t(b), d(b, 0.0), half(b, 0.0), teacher(b, 0.0);
  for (std::size_t i = 0; i < n_f; ++i) t[i] = sample_timestep(plan_.sampler, rng_);
  for (std::size_t i = n_f; i < b; ++i) {
    const std::size_t level = rng_.index(plan_.min_step_log2 + 1);
    const double student = std::ldexp(1.0, -static_cast<int>(level));
    half[i] = student / 2.0;
    teacher[i] = level == plan_.min_step_log2 ? 0.0 : half[i];
    const auto slots = static_cast<std::size_t>(std::lround(1.0 / half[i])) - 1;  // t + 2h <= 1
    t[i] = static_cast<double>(rng_.index(slots)) * half[i];
    d[i] = student;
  }
  Tensor x0({b * rows, w}, x0v), x1({b * rows, w}, x1v);
  Tensor xt = interpolate(x0, x1, t);

  const auto& gen = model_.generator();
  SpeechCondition cond = gen.speech().encode(tracks);
  cond = gen.speech().apply_null(cond, dropout_mask(b, plan_.condition_dropout, rng_));

  std::vector<double> target(b * per);
  for (std::size_t i = 0; i < n_f * per; ++i) target[i] = x1v[i] - x0v[i];
  if (n_c > 0) {
    NoGradGuard guard;
    std::vector<std::size_t> sub_rows;
    for (std::size_t i = n_f; i < b; ++i)
      for (std::size_t j = 0; j < frames; ++j) sub_rows.push_back(i * frames + j);
    SpeechCondition sub;
    sub.features = ops::gather_rows(cond.features, sub_rows);
    sub.batch = n_c;
    sub.frames = frames;
    sub.null_mask.assign(cond.null_mask.begin() + static_cast<std::ptrdiff_t>(n_f), cond.null_mask.end());
    std::vector<double> xs(xt.values().begin() + static_cast<std::ptrdiff_t>(n_f * per), xt.values().end());
    const std::vector<double> ts(t.begin() + static_cast<std::ptrdiff_t>(n_f), t.end());
    const std::vector<double> dt(teacher.begin() + static_cast<std::ptrdiff_t>(n_f), teacher.end());
    Tensor xsub({n_c * rows, w}, xs);
    Tensor f1 = gen.forward(xsub, n_c, frames, ts, dt, sub);
    std::vector<double> t2(n_c);
    for (std::size_t i = 0; i < n_c; ++i) {
      t2[i] = ts[i] + half[n_f + i];
      for (std::size_t k = 0; k < per; ++k) xs[i * per + k] += half[n_f + i] * f1.at(i * per + k);
    }
    Tensor f2 = gen.forward(Tensor({n_c * rows, w}, xs), n_c, frames, t2, dt, sub);
    for (std::size_t k = 0; k < n_c * per; ++k) target[n_f * per + k] = 0.5 * (f1.at(k) + f2.at(k));
  }

  Tensor pred = gen.forward(xt, b, frames, t, d, cond);
  std::vector<double> weight(b * per);
  for (std::size_t i = 0; i < b; ++i) {
    const double wgt = 1.0 / static_cast<double>((i < n_f ? n_f : n_c) * per);
    std::fill_n(weight.begin() + static_cast<std::ptrdiff_t>(i * per), per, wgt);
  }
  Tensor diff = ops::sub(pred, Tensor(pred.shape(), target));
  Tensor loss = ops::sum(ops::mul(ops::mul(diff, diff), Tensor(pred.shape(), std::move(weight))));
  if (!std::isfinite(loss.item())) throw NumericError("flow loss is not finite");

  FlowStepLog log;
  log.step = step_++;
  for (std::size_t i = 0; i < b; ++i) {
    double s = 0.0;
    for (std::size_t k = i * per; k < (i + 1) * per; ++k) s += diff.at(k) * diff.at(k);
    s /= static_cast<double>(per);
    if (i < n_f) {
      log.t.push_back(t[i]);
      log.sample_loss.push_back(s);
      log.flow_loss += s / static_cast<double>(n_f);
    } else {
      log.consistency_loss += s / static_cast<double>(n_c);
    }
  }
  backward(loss);
  opt_.step();
  opt_.zero_grad();
  return log;
}

void train_flow(FlowModel& model, const std::vector<LatentExample>& data, const FlowPlan& plan,
                const FlowLogFn& log) {
  FlowTrainer trainer(model, plan);
  for (std::size_t s = 0; s < plan.steps; ++s) {
    auto l = trainer.step(data);
    if (log) log(l);
  }
  model.mark_trained();
}

double LossProfile::mean_over(double lo, double hi) const {
  const std::size_t bins = bin_mean.size();
  double s = 0.0;
  std::size_t n = 0;
  for (std::size_t i = 0; i < bins; ++i) {
    const double centre = (static_cast<double>(i) + 0.5) / static_cast<double>(bins);
    if (centre >= lo && centre <= hi && bin_count[i] > 0) {
      s += bin_mean[i];
      ++n;
    }
  }
  return n ? s / static_cast<double>(n) : 0.0;
}

LossProfile make_loss_profile(std::span<const double> t, std::span<const double> loss, std::size_t bins) {
  if (t.size() != loss.size()) throw std::invalid_argument("loss profile: t and loss sizes differ");
  if (bins == 0) throw std::invalid_argument("loss profile: need at least one bin");
  LossProfile p;
  p.bin_mean.assign(bins, 0.0);
  p.bin_count.assign(bins, 0);
  p.t.assign(t.begin(), t.end());
  p.loss.assign(loss.begin(), loss.end());
  for (std::size_t i = 0; i < t.size(); ++i) {
    const auto b = std::min(bins - 1, static_cast<std::size_t>(t[i] * static_cast<double>(bins)));
    p.bin_mean[b] += loss[i];
    ++p.bin_count[b];
  }
  for (std::size_t b = 0; b < bins; ++b)
    if (p.bin_count[b]) p.bin_mean[b] /= static_cast<double>(p.bin_count[b]);
  return p;
}

LossProfile profile_loss_over_t(const FlowModel& model, const std::vector<LatentExample>& data,
                                std::size_t repeats, std::uint64_t seed, std::size_t bins) {
  NoGradGuard guard;
  Rng rng(mix_seed(seed, 0x9f0));
  TimeSampler uniform;
  uniform.kind = TimeSamplerKind::Uniform;
  std::vector<double> ts, losses;
  constexpr std::size_t kChunk = 16;
  for (std::size_t rep = 0; rep < repeats; ++rep)
    for (std::size_t start = 0; start < data.size(); start += kChunk) {
      const std::size_t b = std::min(kChunk, data.size() - start);
      const std::size_t rows = data[start].grid.rows(), w = data[start].grid.cols(), per = rows * w;
      std::vector<const SpeechTrack*> tracks;
      std::vector<double> x1v(b * per), x0v(b * per), t(b);
      for (std::size_t i = 0; i < b; ++i) {
        const auto& ex = data[start + i];
        tracks.push_back(&ex.speech);
        std::copy(ex.grid.values().begin(), ex.grid.values().end(), x1v.begin() + static_cast<std::ptrdiff_t>(i * per));
        t[i] = sample_timestep(uniform, rng);
      }
      for (auto& v : x0v) v = rng.normal();
      Tensor x0({b * rows, w}, x0v), x1({b * rows, w}, x1v);
      const auto field = model.bind(model.generator().speech().encode(tracks));
      const std::vector<double> zero(b, 0.0);
      Tensor pred = field(interpolate(x0, x1, t), t, zero);
      for (std::size_t i = 0; i < b; ++i) {
        double s = 0.0;
        for (std::size_t k = i * per; k < (i + 1) * per; ++k) {
          const double e = pred.at(k) - (x1v[k] - x0v[k]);
          s += e * e;
        }
        ts.push_back(t[i]);
        losses.push_back(s / static_cast<double>(per));
      }
    }
  return make_loss_profile(ts, losses, bins);
}

}  // namespace glsm
