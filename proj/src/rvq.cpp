#include "glsm/rvq.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <stdexcept>

#include "glsm/ops.hpp"

namespace glsm {

nlohmann::json to_json(const RvqConfig& c) {
  return {{"hidden", c.hidden},         {"d_code", c.d_code},     {"codebook_size", c.codebook_size},
          {"layers", c.layers},         {"downsample", c.downsample}, {"commitment", c.commitment},
          {"ema_decay", c.ema_decay},   {"dead_window", c.dead_window}, {"steps", c.steps},
          {"batch", c.batch},           {"window", c.window},     {"lr", c.lr},
          {"seed", c.seed}};
}

RvqConfig rvq_config_from_json(const nlohmann::json& j) {
  RvqConfig c;
  c.hidden = j.at("hidden");
  c.d_code = j.at("d_code");
  c.codebook_size = j.at("codebook_size");
  c.layers = j.at("layers");
  c.downsample = j.at("downsample");
  c.commitment = j.at("commitment");
  c.ema_decay = j.at("ema_decay");
  c.dead_window = j.at("dead_window");
  c.steps = j.at("steps");
  c.batch = j.at("batch");
  c.window = j.at("window");
  c.lr = j.at("lr");
  c.seed = j.at("seed");
  return c;
}

NearestCode quantize_layer(std::span<const double> v, const Tensor& codebook) {
  if (!codebook.defined()) throw std::invalid_argument("quantize_layer: empty codebook");
  const std::size_t c = codebook.rows(), d = codebook.cols();
  if (v.size() != d) throw ShapeError("quantize_layer: vector width does not match codebook");
  const auto cb = codebook.values();
  NearestCode best{0, std::numeric_limits<double>::infinity()};
  for (std::size_t i = 0; i < c; ++i) {
    double s = 0.0;
    for (std::size_t j = 0; j < d; ++j) {
      const double diff = cb[i * d + j] - v[j];
      s += diff * diff;
    }
    if (s < best.distance2) best = {i, s};
  }
  return best;
}

QuantizationResult residual_quantize(const Tensor& latent, const std::vector<Tensor>& codebooks,
                                     double commitment_weight) {
  if (codebooks.empty()) throw std::invalid_argument("residual_quantize: no codebooks");
  const std::size_t n = latent.rows(), d = latent.cols();
  QuantizationResult q;
  std::vector<double> residual(latent.values().begin(), latent.values().end());
  std::vector<double> sum(n * d, 0.0);
  Tensor commitment = Tensor::scalar(0.0);
  std::vector<double> prefix(n * d, 0.0);
  for (const auto& cb : codebooks) {
    if (cb.cols() != d) throw ShapeError("residual_quantize: codebook width mismatch");
    std::vector<std::uint32_t> idx(n);
    std::vector<double> code(n * d);
    for (std::size_t r = 0; r < n; ++r) {
      const auto hit = quantize_layer(std::span<const double>(residual).subspan(r * d, d), cb);
      idx[r] = static_cast<std::uint32_t>(hit.index);
      const auto entry = cb.values().subspan(hit.index * d, d);
      for (std::size_t j = 0; j < d; ++j) code[r * d + j] = entry[j];
    }
    // Residual entering this layer as a graph node: latent minus earlier codes.
    Tensor r_node = ops::sub(latent, Tensor({n, d}, prefix));
    commitment = ops::add(commitment, ops::mse(r_node, Tensor({n, d}, code)));
    q.residuals.push_back(residual);
    for (std::size_t k = 0; k < n * d; ++k) {
      residual[k] -= code[k];
      sum[k] += code[k];
      prefix[k] += code[k];
    }
    q.indices.push_back(std::move(idx));
    q.codes.push_back(std::move(code));
  }
  q.final_residual = std::move(residual);
  q.quantized = ops::stop_gradient_replace(latent, Tensor({n, d}, std::move(sum)));
  q.commitment = ops::scale(commitment, commitment_weight);
  return q;
}

// ---------------------------------------------------------------------------

RegionCodec::RegionCodec(std::size_t width, const RvqConfig& config, std::uint64_t seed, bool zero_init_out)
    : width_(width), config_(config) {
  if (config.downsample != 4) throw std::invalid_argument("rvq: downsample factor must be 4 (two stride-2 blocks)");
  if (config.layers == 0 || config.codebook_size == 0) throw std::invalid_argument("rvq: empty codebook");
  Rng rng(seed);
  const std::size_t h = config.hidden, d = config.d_code;
  enc_in_ = Conv1d(width, h, 3, 1, rng);
  enc_down1_ = Conv1d(h, h, 3, 2, rng);
  enc_res1a_ = Conv1d(h, h, 3, 1, rng);
  enc_res1b_ = Conv1d(h, h, 3, 1, rng);
  enc_down2_ = Conv1d(h, h, 3, 2, rng);
  enc_res2a_ = Conv1d(h, h, 3, 1, rng);
  enc_res2b_ = Conv1d(h, h, 3, 1, rng);
  enc_out_ = Conv1d(h, d, 3, 1, rng, zero_init_out);
  dec_in_ = Conv1d(d, h, 3, 1, rng);
  dec_res1a_ = Conv1d(h, h, 3, 1, rng);
  dec_res1b_ = Conv1d(h, h, 3, 1, rng);
  dec_up1_ = Conv1d(h, h, 3, 1, rng);
  dec_res2a_ = Conv1d(h, h, 3, 1, rng);
  dec_res2b_ = Conv1d(h, h, 3, 1, rng);
  dec_up2_ = Conv1d(h, h, 3, 1, rng);
  dec_out_ = Conv1d(h, width, 3, 1, rng);
  codebooks_.resize(config.layers);
  for (auto& cb : codebooks_) cb = Tensor({config.codebook_size, d});
  ema_count_.assign(config.layers, std::vector<double>(config.codebook_size, 0.0));
  ema_sum_.assign(config.layers, std::vector<double>(config.codebook_size * d, 0.0));
  usage_.assign(config.layers, std::vector<double>(config.codebook_size, 0.0));
  unused_batches_.assign(config.layers, std::vector<std::size_t>(config.codebook_size, 0));
  channel_mean_.assign(width, 0.0);
  channel_scale_.assign(width, 1.0);
}

ParamList RegionCodec::parameters() const {
  ParamList p;
  enc_in_.collect(p, "enc.in");
  enc_down1_.collect(p, "enc.down1");
  enc_res1a_.collect(p, "enc.res1a");
  enc_res1b_.collect(p, "enc.res1b");
  enc_down2_.collect(p, "enc.down2");
  enc_res2a_.collect(p, "enc.res2a");
  enc_res2b_.collect(p, "enc.res2b");
  enc_out_.collect(p, "enc.out");
  dec_in_.collect(p, "dec.in");
  dec_res1a_.collect(p, "dec.res1a");
  dec_res1b_.collect(p, "dec.res1b");
  dec_up1_.collect(p, "dec.up1");
  dec_res2a_.collect(p, "dec.res2a");
  dec_res2b_.collect(p, "dec.res2b");
  dec_up2_.collect(p, "dec.up2");
  dec_out_.collect(p, "dec.out");
  return p;
}

Tensor RegionCodec::encode_normalised(const Tensor& x, std::size_t seq_len) const {
  if (seq_len % 4 != 0) throw ShapeError("rvq encode: T must be divisible by 4, got " + std::to_string(seq_len));
  if (x.cols() != width_) throw ShapeError("rvq encode: region width mismatch");
  using ops::add, ops::gelu;
  const std::size_t half = seq_len / 2, quarter = seq_len / 4;
  Tensor h = enc_in_(x, seq_len);
  h = enc_down1_(h, seq_len);
  h = add(h, enc_res1b_(gelu(enc_res1a_(gelu(h), half)), half));
  h = enc_down2_(h, half);
  h = add(h, enc_res2b_(gelu(enc_res2a_(gelu(h), quarter)), quarter));
  return enc_out_(h, quarter);
}

Tensor RegionCodec::decode_normalised(const Tensor& z, std::size_t latent_len) const {
  if (z.cols() != config_.d_code) throw ShapeError("rvq decode: latent width mismatch");
  using ops::add, ops::gelu;
  const std::size_t l2 = latent_len * 2, l4 = latent_len * 4;
  Tensor h = dec_in_(z, latent_len);
  h = add(h, dec_res1b_(gelu(dec_res1a_(gelu(h), latent_len)), latent_len));
  h = dec_up1_(ops::upsample_linear_rows(h, latent_len, 2), l2);
  h = add(h, dec_res2b_(gelu(dec_res2a_(gelu(h), l2)), l2));
  h = dec_up2_(ops::upsample_linear_rows(h, l2, 2), l4);
  return dec_out_(h, l4);
}

Tensor RegionCodec::normalise(const Tensor& frames) const {
  if (frames.cols() != width_) throw ShapeError("rvq: region width mismatch");
  std::vector<double> v(frames.values().begin(), frames.values().end());
  for (std::size_t i = 0; i < v.size(); ++i) v[i] = (v[i] - channel_mean_[i % width_]) / channel_scale_[i % width_];
  return Tensor(frames.shape(), std::move(v));
}

Tensor RegionCodec::denormalise(const Tensor& frames) const {
  std::vector<double> v(frames.values().begin(), frames.values().end());
  for (std::size_t i = 0; i < v.size(); ++i) v[i] = v[i] * channel_scale_[i % width_] + channel_mean_[i % width_];
  return Tensor(frames.shape(), std::move(v));
}

void RegionCodec::fit_normalisation(const std::vector<Tensor>& clips) {
  std::vector<double> sum(width_, 0.0), sq(width_, 0.0);
  double count = 0.0;
  for (const auto& c : clips) {
    if (c.cols() != width_) throw ShapeError("rvq: region width mismatch");
    const auto x = c.values();
    for (std::size_t i = 0; i < x.size(); ++i) {
      sum[i % width_] += x[i];
      sq[i % width_] += x[i] * x[i];
    }
    count += static_cast<double>(c.rows());
  }
  if (count == 0.0) throw std::invalid_argument("rvq: no frames to fit normalisation");
  for (std::size_t j = 0; j < width_; ++j) {
    channel_mean_[j] = sum[j] / count;
    channel_scale_[j] = std::sqrt(std::max(sq[j] / count - channel_mean_[j] * channel_mean_[j], 0.0)) + 1e-6;
  }
}

Tensor RegionCodec::encode(const Tensor& frames) const {
  NoGradGuard guard;
  return encode_normalised(normalise(frames), frames.rows()).detach();
}

Tensor RegionCodec::decode(const Tensor& latent) const {
  NoGradGuard guard;
  return denormalise(decode_normalised(latent, latent.rows()));
}

QuantizationResult RegionCodec::quantize(const Tensor& latent) const {
  NoGradGuard guard;
  return residual_quantize(latent, codebooks_, config_.commitment);
}

Tensor RegionCodec::snap(const Tensor& latent) const { return quantize(latent).quantized.detach(); }

Tensor RegionCodec::reconstruct(const Tensor& frames) const { return decode(snap(encode(frames))); }

void RegionCodec::ema_update(const QuantizationResult& q, Rng& rng) {
  const std::size_t d = config_.d_code, c = config_.codebook_size;
  const double decay = config_.ema_decay, eps = 1e-5;
  const std::size_t n = q.indices.front().size();
  for (std::size_t l = 0; l < codebooks_.size(); ++l) {
    std::vector<double> count(c, 0.0), sum(c * d, 0.0);
    const auto& res = q.residuals[l];
    for (std::size_t r = 0; r < n; ++r) {
      const std::size_t i = q.indices[l][r];
      count[i] += 1.0;
      for (std::size_t j = 0; j < d; ++j) sum[i * d + j] += res[r * d + j];
    }
    auto& ec = ema_count_[l];
    auto& es = ema_sum_[l];
    double total = 0.0;
    for (std::size_t i = 0; i < c; ++i) {
      ec[i] = decay * ec[i] + (1.0 - decay) * count[i];
      total += ec[i];
      usage_[l][i] += count[i];
    }
    for (std::size_t k = 0; k < c * d; ++k) es[k] = decay * es[k] + (1.0 - decay) * sum[k];
    auto cb = codebooks_[l].values_mut();
    for (std::size_t i = 0; i < c; ++i) {
      const double smoothed = (ec[i] + eps) / (total + static_cast<double>(c) * eps) * total;
      for (std::size_t j = 0; j < d; ++j) cb[i * d + j] = es[i * d + j] / smoothed;
    }
    // Dead-code reset to a random residual from this batch.
    for (std::size_t i = 0; i < c; ++i) {
      unused_batches_[l][i] = count[i] > 0.0 ? 0 : unused_batches_[l][i] + 1;
      if (unused_batches_[l][i] >= config_.dead_window) {
        const std::size_t r = rng.index(n);
        for (std::size_t j = 0; j < d; ++j) {
          cb[i * d + j] = res[r * d + j];
          es[i * d + j] = res[r * d + j];
        }
        ec[i] = 1.0;
        unused_batches_[l][i] = 0;
      }
    }
  }
}

std::pair<double, double> RegionCodec::train_step(const Tensor& batch, std::size_t seq_len, Adam& opt, Rng& rng) {
  Tensor z = encode_normalised(batch, seq_len);
  if (!initialised_) {
    // Each layer starts from random rows of the residual it will see.
    const std::size_t d = config_.d_code, c = config_.codebook_size;
    std::vector<double> residual(z.values().begin(), z.values().end());
    const std::size_t n = z.rows();
    for (std::size_t l = 0; l < codebooks_.size(); ++l) {
      auto cb = codebooks_[l].values_mut();
      for (std::size_t i = 0; i < c; ++i) {
        const std::size_t r = rng.index(n);
        for (std::size_t j = 0; j < d; ++j) cb[i * d + j] = residual[r * d + j] + 0.01 * rng.normal();
      }
      ema_sum_[l].assign(cb.begin(), cb.end());
      ema_count_[l].assign(c, 1.0);
      for (std::size_t r = 0; r < n; ++r) {
        const auto hit = quantize_layer(std::span<const double>(residual).subspan(r * d, d), codebooks_[l]);
        for (std::size_t j = 0; j < d; ++j) residual[r * d + j] -= cb[hit.index * d + j];
      }
    }
    initialised_ = true;
  }
  QuantizationResult q = residual_quantize(z, codebooks_, config_.commitment);
  Tensor recon = decode_normalised(q.quantized, seq_len / 4);
  Tensor rec_loss = ops::mse(recon, batch);
  Tensor loss = ops::add(rec_loss, q.commitment);
  if (!std::isfinite(loss.item())) throw NumericError("rvq training diverged: loss is not finite");
  opt.zero_grad();
  backward(loss);
  opt.step();
  ema_update(q, rng);
  return {rec_loss.item(), q.commitment.item()};
}

std::vector<double> RegionCodec::perplexity(const std::vector<Tensor>& latents) const {
  std::vector<double> out;
  for (std::size_t l = 0; l < codebooks_.size(); ++l) {
    std::vector<double> count(config_.codebook_size, 0.0);
    double total = 0.0;
    for (const auto& z : latents) {
      const auto q = quantize(z);
      for (auto i : q.indices[l]) {
        count[i] += 1.0;
        total += 1.0;
      }
    }
    double h = 0.0;
    for (double c : count)
      if (c > 0.0) h -= (c / total) * std::log(c / total);
    out.push_back(std::exp(h));
  }
  return out;
}

void RegionCodec::save(Checkpoint& ckpt, const std::string& prefix) const {
  for (const auto& p : parameters()) ckpt.tensors[prefix + p.name] = p.tensor;
  for (std::size_t l = 0; l < codebooks_.size(); ++l) {
    ckpt.tensors[prefix + "codebook." + std::to_string(l)] = codebooks_[l];
    ckpt.tensors[prefix + "usage." + std::to_string(l)] = Tensor({usage_[l].size()}, usage_[l]);
  }
  ckpt.tensors[prefix + "channel_mean"] = Tensor({width_}, channel_mean_);
  ckpt.tensors[prefix + "channel_scale"] = Tensor({width_}, channel_scale_);
}

namespace {

const Tensor& find_tensor(const Checkpoint& ckpt, const std::string& name, const Shape& shape) {
  const auto it = ckpt.tensors.find(name);
  if (it == ckpt.tensors.end()) throw FormatError("checkpoint missing tensor " + name);
  if (it->second.shape() != shape) throw FormatError("checkpoint shape mismatch for " + name);
  return it->second;
}

void copy_into(Tensor& dst, const Tensor& src) {
  std::copy(src.values().begin(), src.values().end(), dst.values_mut().begin());
}

}  // namespace

void RegionCodec::load(const Checkpoint& ckpt, const std::string& prefix) {
  for (auto& p : parameters()) copy_into(p.tensor, find_tensor(ckpt, prefix + p.name, p.tensor.shape()));
  for (std::size_t l = 0; l < codebooks_.size(); ++l) {
    copy_into(codebooks_[l], find_tensor(ckpt, prefix + "codebook." + std::to_string(l), codebooks_[l].shape()));
    const auto& u = find_tensor(ckpt, prefix + "usage." + std::to_string(l), {config_.codebook_size});
    usage_[l].assign(u.values().begin(), u.values().end());
    ema_sum_[l].assign(codebooks_[l].values().begin(), codebooks_[l].values().end());
    ema_count_[l].assign(config_.codebook_size, 1.0);
  }
  const auto& m = find_tensor(ckpt, prefix + "channel_mean", {width_});
  const auto& s = find_tensor(ckpt, prefix + "channel_scale", {width_});
  channel_mean_.assign(m.values().begin(), m.values().end());
  channel_scale_.assign(s.values().begin(), s.values().end());
  initialised_ = true;
}

Checkpoint RvqCodecs::to_checkpoint() const {
  Checkpoint ck;
  ck.config = {{"kind", "rvq"}, {"rvq", to_json(config)}};
  for (std::size_t r = 0; r < kNumRegions; ++r)
    regions[r].save(ck, std::string(region_name(static_cast<Region>(r))) + ".");
  return ck;
}

RvqCodecs RvqCodecs::from_checkpoint(const Checkpoint& ckpt) {
  if (ckpt.config.value("kind", "") != "rvq") throw FormatError("checkpoint does not hold RVQ codecs");
  RvqCodecs c;
  c.config = rvq_config_from_json(ckpt.config.at("rvq"));
  for (std::size_t r = 0; r < kNumRegions; ++r) {
    c.regions[r] = RegionCodec(body_regions()[r].width, c.config, 0);
    c.regions[r].load(ckpt, std::string(region_name(static_cast<Region>(r))) + ".");
  }
  return c;
}

namespace {

std::vector<Tensor> region_clips(const std::vector<CorpusSample>& windows, std::size_t r) {
  std::vector<Tensor> out;
  out.reserve(windows.size());
  for (const auto& w : windows) out.push_back(w.motion.regions[r]);
  return out;
}

}  // namespace

RvqCodecs train_rvq(const std::vector<CorpusSample>& corpus, const RvqConfig& config, const RvqLogFn& log) {
  if (corpus.empty()) throw std::invalid_argument("train_rvq: empty corpus");
  const auto windows = cut_windows(corpus, config.window);
  if (windows.empty()) throw std::invalid_argument("train_rvq: sequences shorter than the training window");
  RvqCodecs out;
  out.config = config;
  for (std::size_t r = 0; r < kNumRegions; ++r) {
    const std::size_t width = body_regions()[r].width;
    RegionCodec codec(width, config, mix_seed(config.seed, 100 + r));
    const auto clips = region_clips(windows, r);
    codec.fit_normalisation(clips);
    std::vector<Tensor> norm;
    norm.reserve(clips.size());
    for (const auto& c : clips) norm.push_back(codec.normalise(c));

    Adam opt(tensors_of(codec.parameters()), AdamConfig{.lr = config.lr});
    Rng rng(mix_seed(config.seed, 200 + r));
    const std::size_t rows = config.window * width;
    for (std::size_t step = 0; step < config.steps; ++step) {
      std::vector<double> batch;
      batch.reserve(config.batch * rows);
      for (std::size_t b = 0; b < config.batch; ++b) {
        const auto v = norm[rng.index(norm.size())].values();
        batch.insert(batch.end(), v.begin(), v.end());
      }
      const auto [rec, com] =
          codec.train_step(Tensor({config.batch * config.window, width}, std::move(batch)), config.window, opt, rng);
      if (log) log({step, r, rec, com});
    }
    out.regions[r] = std::move(codec);
  }
  return out;
}

std::array<double, kNumRegions> reconstruction_mse(const RvqCodecs& codecs, const std::vector<CorpusSample>& samples) {
  std::array<double, kNumRegions> out{};
  for (std::size_t r = 0; r < kNumRegions; ++r) {
    const auto& codec = codecs.regions[r];
    double total = 0.0;
    std::size_t count = 0;
    for (const auto& s : samples) {
      const auto& frames = s.motion.regions[r];
      const Tensor a = codec.reconstruct(frames);
      const Tensor& b = frames;
      for (std::size_t k = 0; k < a.numel(); ++k) total += (a.at(k) - b.at(k)) * (a.at(k) - b.at(k));
      count += a.numel();
    }
    out[r] = count ? total / static_cast<double>(count) : 0.0;
  }
  return out;
}

}  // namespace glsm
