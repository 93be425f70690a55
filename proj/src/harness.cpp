#include "glsm/harness.hpp"

#include <sys/utsname.h>

#include <Eigen/Core>
#include <algorithm>
#include <atomic>
#include <charconv>
#include <cmath>
#include <cstdlib>
#include <exception>
#include <fstream>
#include <mutex>
#include <sstream>
#include <thread>

#include "glsm/rng.hpp"

namespace glsm {

namespace {

// ---- INI plumbing -------------------------------------------------------

struct Binding {
  std::string section;
  std::string key;
  std::function<std::string()> get;
  std::function<void(const std::string&)> set;
};

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

[[noreturn]] void bad_value(const std::string& key, const std::string& value, const char* what) {
  throw ConfigError("config: " + key + " = '" + value + "' is not " + what);
}

template <class Int>
Int parse_int(const std::string& key, const std::string& v) {
  Int out{};
  auto [p, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
  if (ec != std::errc() || p != v.data() + v.size()) bad_value(key, v, "a non-negative integer");
  return out;
}

double parse_double(const std::string& key, const std::string& v) {
  double out = 0.0;
  auto [p, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
  if (ec != std::errc() || p != v.data() + v.size() || !std::isfinite(out)) bad_value(key, v, "a finite number");
  return out;
}

bool parse_bool(const std::string& key, const std::string& v) {
  if (v == "true" || v == "1" || v == "on" || v == "yes") return true;
  if (v == "false" || v == "0" || v == "off" || v == "no") return false;
  bad_value(key, v, "a boolean");
}

std::string fmt(double v) {
  char buf[64];
  auto [p, ec] = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, p);
}

std::vector<Binding> bindings(RunConfig& c) {
  std::vector<Binding> b;
  auto size = [&](const char* s, const char* k, std::size_t& f) {
    b.push_back({s, k, [&f] { return std::to_string(f); },
                 [&f, k](const std::string& v) { f = parse_int<std::size_t>(k, v); }});
  };
  auto u64 = [&](const char* s, const char* k, std::uint64_t& f) {
    b.push_back({s, k, [&f] { return std::to_string(f); },
                 [&f, k](const std::string& v) { f = parse_int<std::uint64_t>(k, v); }});
  };
  auto real = [&](const char* s, const char* k, double& f) {
    b.push_back({s, k, [&f] { return fmt(f); }, [&f, k](const std::string& v) { f = parse_double(k, v); }});
  };
  auto flag = [&](const char* s, const char* k, bool& f) {
    b.push_back({s, k, [&f] { return std::string(f ? "true" : "false"); },
                 [&f, k](const std::string& v) { f = parse_bool(k, v); }});
  };
  auto text = [&](const char* s, const char* k, std::string& f) {
    b.push_back({s, k, [&f] { return f; }, [&f](const std::string& v) { f = v; }});
  };

  text("run", "name", c.name);
  u64("run", "seed", c.seed);
  text("run", "out_dir", c.out_dir);

  u64("corpus", "seed", c.corpus.seed);
  size("corpus", "count", c.corpus.count);
  size("corpus", "frames", c.corpus.frames);
  real("corpus", "train", c.corpus.split.train);
  real("corpus", "val", c.corpus.split.val);
  real("corpus", "test", c.corpus.split.test);
  u64("corpus", "split_seed", c.corpus.split_seed);

  size("rvq", "hidden", c.rvq.hidden);
  size("rvq", "d_code", c.rvq.d_code);
  size("rvq", "codebook_size", c.rvq.codebook_size);
  size("rvq", "layers", c.rvq.layers);
  real("rvq", "commitment", c.rvq.commitment);
  real("rvq", "ema_decay", c.rvq.ema_decay);
  size("rvq", "dead_window", c.rvq.dead_window);
  size("rvq", "steps", c.rvq.steps);
  size("rvq", "batch", c.rvq.batch);
  size("rvq", "window", c.rvq.window);
  real("rvq", "lr", c.rvq.lr);
  u64("rvq", "seed", c.rvq.seed);

  size("generator", "blocks", c.generator.blocks);
  size("generator", "d_model", c.generator.d_model);
  size("generator", "ffn", c.generator.ffn);
  size("generator", "heads", c.generator.heads);
  size("generator", "step_embed", c.generator.step_embed);
  size("generator", "cross_layers", c.generator.cross_layers);
  size("generator", "cross_ffn", c.generator.cross_ffn);
  flag("generator", "spatial", c.generator.spatial);
  flag("generator", "temporal", c.generator.temporal);
  flag("generator", "positional", c.generator.positional);
  flag("generator", "temporal_first", c.generator.temporal_first);
  flag("generator", "aligned_injection", c.generator.aligned_injection);

  real("flow", "consistency_fraction", c.flow.consistency_fraction);
  size("flow", "min_step_log2", c.flow.min_step_log2);
  real("flow", "condition_dropout", c.flow.condition_dropout);
  b.push_back({"flow", "time_sampler", [&c] { return std::string(time_sampler_name(c.flow.sampler.kind)); },
               [&c](const std::string& v) {
                 try {
                   c.flow.sampler.kind = parse_time_sampler(v);
                 } catch (const std::exception&) {
                   bad_value("time_sampler", v, "a known time sampler");
                 }
               }});
  real("flow", "beta_alpha", c.flow.sampler.alpha);
  real("flow", "beta_beta", c.flow.sampler.beta);
  real("flow", "logit_location", c.flow.sampler.location);
  real("flow", "logit_scale", c.flow.sampler.scale);
  real("flow", "mode_scale", c.flow.sampler.mode_scale);
  size("flow", "steps", c.flow.steps);
  size("flow", "batch", c.flow.batch);
  size("flow", "window", c.flow.window);
  real("flow", "lr", c.flow.lr);
  real("flow", "clip_norm", c.flow.clip_norm);

  size("sampler", "steps", c.sampler.steps);
  real("sampler", "guidance", c.sampler.guidance);
  u64("sampler", "seed", c.sampler.seed);
  flag("sampler", "snap_codes", c.sampler.snap_codes);
  real("sampler", "clamp", c.sampler.clamp);

  size("eval", "window", c.eval.window);
  size("eval", "feature_hidden", c.eval.features.hidden);
  size("eval", "feature_dim", c.eval.features.feature);
  size("eval", "feature_window", c.eval.features.window);
  size("eval", "feature_steps", c.eval.features.steps);
  size("eval", "feature_batch", c.eval.features.batch);
  real("eval", "feature_lr", c.eval.features.lr);
  u64("eval", "feature_seed", c.eval.features.seed);
  real("eval", "beat_prominence", c.eval.beats.prominence);
  real("eval", "beat_sigma", c.eval.beats.sigma);
  b.push_back({"eval", "seeds",
               [&c] {
                 std::string s;
                 for (std::size_t i = 0; i < c.eval.seeds.size(); ++i)
                   s += (i ? "," : "") + std::to_string(c.eval.seeds[i]);
                 return s;
               },
               [&c](const std::string& v) {
                 std::vector<std::uint64_t> seeds;
                 std::stringstream ss(v);
                 std::string item;
                 while (std::getline(ss, item, ',')) seeds.push_back(parse_int<std::uint64_t>("seeds", trim(item)));
                 c.eval.seeds = std::move(seeds);
               }});
  return b;
}

Binding* find_binding(std::vector<Binding>& all, const std::string& section, const std::string& key) {
  for (auto& b : all)
    if (b.section == section && b.key == key) return &b;
  return nullptr;
}

void assign(std::vector<Binding>& all, const std::string& section, const std::string& key, const std::string& value) {
  bool known_section = false;
  for (const auto& b : all) known_section = known_section || b.section == section;
  if (!known_section) throw ConfigError("config: unknown section [" + section + "]");
  Binding* b = find_binding(all, section, key);
  if (!b) throw ConfigError("config: unknown key '" + key + "' in section [" + section + "]");
  b->set(value);
}

std::uint64_t fnv1a(const std::string& s) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char ch : s) {
    h ^= ch;
    h *= 0x100000001b3ULL;
  }
  return h;
}

double median_of(std::vector<double> v) {
  if (v.empty()) return 0.0;
  std::sort(v.begin(), v.end());
  const std::size_t n = v.size();
  return n % 2 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

}  // namespace

// ---- RunConfig ----------------------------------------------------------

RunConfig parse_run_config(const std::string& text, const RunConfig& base) {
  RunConfig c = base;
  auto all = bindings(c);
  std::istringstream in(text);
  std::string line, section;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    const auto hash = line.find_first_of("#;");
    if (hash != std::string::npos) line.erase(hash);
    line = trim(line);
    if (line.empty()) continue;
    if (line.front() == '[') {
      if (line.back() != ']') throw ConfigError("config: line " + std::to_string(lineno) + ": bad section header");
      section = trim(line.substr(1, line.size() - 2));
      continue;
    }
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw ConfigError("config: line " + std::to_string(lineno) + ": expected key = value");
    if (section.empty()) throw ConfigError("config: line " + std::to_string(lineno) + ": key outside a section");
    assign(all, section, trim(line.substr(0, eq)), trim(line.substr(eq + 1)));
  }
  validate(c);
  return c;
}

RunConfig load_run_config(const std::filesystem::path& path, const RunConfig& base) {
  std::ifstream in(path);
  if (!in) throw ConfigError("config not found: " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  return parse_run_config(ss.str(), base);
}

void apply_override(RunConfig& config, const std::string& assignment) {
  const auto eq = assignment.find('=');
  const auto dot = assignment.find('.');
  if (eq == std::string::npos || dot == std::string::npos || dot > eq)
    throw ConfigError("override '" + assignment + "' is not section.key=value");
  auto all = bindings(config);
  assign(all, trim(assignment.substr(0, dot)), trim(assignment.substr(dot + 1, eq - dot - 1)),
         trim(assignment.substr(eq + 1)));
}

std::string to_ini(const RunConfig& config) {
  RunConfig c = config;
  const auto all = bindings(c);
  std::string out, section;
  for (const auto& b : all) {
    if (b.section != section) {
      out += (section.empty() ? "[" : "\n[") + b.section + "]\n";
      section = b.section;
    }
    out += b.key + " = " + b.get() + "\n";
  }
  return out;
}

void validate(const RunConfig& c) {
  auto need = [](bool ok, const std::string& msg) {
    if (!ok) throw ConfigError("config: " + msg);
  };
  need(c.corpus.count > 0 && c.corpus.frames > 0, "corpus count and frames must be positive");
  const auto& s = c.corpus.split;
  need(s.train >= 0 && s.val >= 0 && s.test > 0 && std::abs(s.train + s.val + s.test - 1.0) < 1e-9,
       "split ratios must be non-negative, sum to 1 and leave a test split");
  need(c.rvq.downsample == 4, "rvq downsample is fixed at 4");
  need(c.rvq.layers > 0 && c.rvq.codebook_size > 0 && c.rvq.d_code > 0 && c.rvq.hidden > 0, "rvq sizes must be positive");
  need(c.rvq.window % 4 == 0 && c.rvq.window > 0, "rvq window must be a positive multiple of 4");
  need(c.rvq.window <= c.corpus.frames, "rvq window exceeds corpus frames");
  need(c.rvq.ema_decay > 0 && c.rvq.ema_decay < 1, "rvq ema_decay must lie in (0, 1)");
  need(c.rvq.steps > 0 && c.rvq.batch > 0 && c.rvq.lr > 0, "rvq steps, batch and lr must be positive");
  const auto& g = c.generator;
  need(g.d_model > 0 && g.heads > 0 && g.d_model % g.heads == 0, "generator heads must divide d_model");
  need(g.d_model % 2 == 0, "generator d_model must be even");
  need(g.ffn > 0 && g.cross_ffn > 0 && g.step_embed > 0 && g.step_embed % 2 == 0,
       "generator ffn widths and an even step_embed are required");
  need(c.flow.window % 4 == 0 && c.flow.window > 0 && c.flow.window <= c.corpus.frames,
       "flow window must be a positive multiple of 4 within the corpus length");
  need(c.flow.consistency_fraction >= 0 && c.flow.consistency_fraction <= 1, "consistency_fraction must lie in [0, 1]");
  need(c.flow.min_step_log2 <= kMaxStepLog2, "min_step_log2 exceeds the supported step sizes");
  need(c.flow.condition_dropout >= 0 && c.flow.condition_dropout <= 1, "condition_dropout must lie in [0, 1]");
  need(c.flow.steps > 0 && c.flow.batch > 0 && c.flow.lr > 0, "flow steps, batch and lr must be positive");
  need(c.flow.sampler.alpha > 0 && c.flow.sampler.beta > 0 && c.flow.sampler.scale > 0,
       "time sampler parameters must be positive");
  need(c.sampler.steps > 0, "sampler steps must be positive");
  need(c.sampler.clamp > 0, "sampler clamp must be positive");
  need(c.eval.window % 4 == 0 && c.eval.window > 0 && c.eval.window <= c.flow.window,
       "eval window must be a positive multiple of 4 no longer than the flow window");
  need(c.eval.features.window % 4 == 0 && c.eval.features.window <= c.eval.window,
       "feature window must be a multiple of 4 no longer than the eval window");
  need(!c.eval.seeds.empty(), "eval seeds must not be empty");
  need(c.eval.beats.sigma > 0 && c.eval.beats.prominence >= 0, "beat parameters out of range");
}

std::string config_hash(const RunConfig& config) {
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(fnv1a(to_ini(config))));
  return buf;
}

RunConfig preset(const std::string& name) {
  RunConfig c;
  c.name = name;
  c.out_dir = "runs/" + name;
  if (name == "paper") {
    c.rvq.steps = 30000;
    c.flow.steps = 30000;
    c.flow.min_step_log2 = kMaxStepLog2;
    c.flow.sampler.kind = TimeSamplerKind::Beta;
    return c;
  }
  if (name == "desk") {
    c.rvq.hidden = 48;
    c.rvq.d_code = 16;
    c.rvq.codebook_size = 256;
    c.rvq.steps = 3000;
    c.rvq.lr = 1e-3;
    c.rvq.dead_window = 64;
    c.rvq.seed = 1;
    c.generator.blocks = 4;
    c.generator.d_model = 64;
    c.generator.ffn = 128;
    c.generator.heads = 4;
    c.generator.step_embed = 64;
    c.generator.cross_layers = 2;
    c.generator.cross_ffn = 128;
    c.flow.sampler.kind = TimeSamplerKind::Beta;
    c.flow.min_step_log2 = 3;
    c.flow.steps = 2000;
    c.flow.batch = 8;
    c.flow.lr = 1e-3;
    return c;
  }
  if (name == "smoke") {
    c.corpus.count = 24;
    c.corpus.frames = 128;
    c.rvq.hidden = 12;
    c.rvq.d_code = 4;
    c.rvq.codebook_size = 16;
    c.rvq.layers = 2;
    c.rvq.steps = 40;
    c.rvq.window = 32;
    c.rvq.lr = 1e-3;
    c.rvq.dead_window = 16;
    c.generator.blocks = 1;
    c.generator.d_model = 16;
    c.generator.ffn = 32;
    c.generator.heads = 2;
    c.generator.step_embed = 16;
    c.generator.cross_layers = 1;
    c.generator.cross_ffn = 32;
    c.flow.sampler.kind = TimeSamplerKind::Beta;
    c.flow.min_step_log2 = 3;
    c.flow.steps = 30;
    c.flow.batch = 8;
    c.flow.window = 32;
    c.flow.lr = 2e-3;
    c.eval.window = 32;
    c.eval.features.hidden = 8;
    c.eval.features.feature = 8;
    c.eval.features.window = 32;
    c.eval.features.steps = 20;
    c.eval.features.batch = 4;
    return c;
  }
  throw ConfigError("unknown preset '" + name + "'");
}

std::vector<std::string> preset_names() { return {"smoke", "desk", "paper"}; }

GeneratorConfig resolved_generator(const RunConfig& config) {
  GeneratorConfig g = config.generator;
  g.d_latent = config.rvq.d_code;
  g.max_frames = config.flow.window / 4;
  g.seed = config.seed;
  return g;
}

RunConfig with_seed(RunConfig config, std::uint64_t seed) {
  config.seed = seed;
  return config;
}

// ---- logging ------------------------------------------------------------

struct JsonlLog::Sink {
  std::ofstream out;
  std::mutex mu;
};

JsonlLog::JsonlLog(const std::filesystem::path& path) : sink_(std::make_shared<Sink>()) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  sink_->out.open(path, std::ios::app);
  if (!sink_->out) throw std::runtime_error("cannot open log " + path.string());
}

void JsonlLog::write(const nlohmann::json& record) {
  if (!sink_) return;
  std::lock_guard<std::mutex> lock(sink_->mu);
  sink_->out << record.dump() << '\n';
  sink_->out.flush();
}

// ---- pipeline stages ----------------------------------------------------

std::vector<CorpusSample> make_corpus(const CorpusParams& params) {
  auto samples = gen_corpus(params.seed, params.count, params.frames);
  split_corpus(samples, params.split, params.split_seed);
  return samples;
}

std::vector<CorpusSample> load_corpus(const std::filesystem::path& path) {
  if (path.empty() || !std::filesystem::exists(path)) throw std::runtime_error("corpus not found: " + path.string());
  return read_corpus(path);
}

RvqCodecs train_codecs(const RunConfig& config, const std::vector<CorpusSample>& corpus, JsonlLog* log) {
  const auto train = filter_split(corpus, Split::Train);
  if (train.empty()) throw std::runtime_error("corpus has no training split");
  RvqLogFn fn;
  if (log && log->enabled())
    fn = [log](const RvqTrainLog& l) {
      if (l.step % 10 == 0)
        log->write({{"stage", "rvq"}, {"step", l.step}, {"region", region_name(static_cast<Region>(l.region))},
                    {"recon", l.recon}, {"commitment", l.commitment}});
    };
  return train_rvq(train, config.rvq, fn);
}

FeatureExtractor train_features(const RunConfig& config, const std::vector<CorpusSample>& corpus) {
  const auto windows = cut_windows(filter_split(corpus, Split::Train), config.eval.window);
  std::vector<Tensor> clips;
  for (const auto& w : windows) clips.push_back(full_body(w.motion));
  FeatureExtractor fx(config.eval.features);
  fx.train(clips);
  return fx;
}

FlowModel train_flow_model(const RunConfig& config, const RvqCodecs& codecs, const std::vector<CorpusSample>& corpus,
                           JsonlLog* log) {
  validate(config);
  if (codecs.config.d_code != config.rvq.d_code) throw ConfigError("codec width differs from rvq.d_code");
  const auto windows = cut_windows(filter_split(corpus, Split::Train), config.flow.window);
  if (windows.empty()) throw std::runtime_error("no training windows for the flow window");
  FlowModel model(resolved_generator(config), config.flow.min_step_log2);
  model.fit_standardisation(encode_windows(codecs, model, windows));
  const auto data = latent_dataset(codecs, model, windows);
  FlowPlan plan = config.flow;
  plan.seed = config.seed;
  FlowLogFn fn;
  if (log && log->enabled()) {
    const std::string name = config.name;
    fn = [log, name](const FlowStepLog& l) {
      if (l.step % 10 == 0)
        log->write({{"stage", "flow"}, {"run", name}, {"step", l.step}, {"flow_loss", l.flow_loss},
                    {"consistency_loss", l.consistency_loss}});
    };
  }
  train_flow(model, data, plan, fn);
  return model;
}

Checkpoint flow_checkpoint(const FlowModel& model, const RunConfig& config) {
  Checkpoint ckpt = model.to_checkpoint();
  ckpt.config["run_config"] = to_ini(config);
  ckpt.config["config_hash"] = config_hash(config);
  return ckpt;
}

std::optional<std::string> checkpoint_config_hash(const Checkpoint& ckpt) {
  if (!ckpt.config.contains("config_hash")) return std::nullopt;
  return ckpt.config.at("config_hash").get<std::string>();
}

// ---- evaluation ---------------------------------------------------------

EvalContext make_eval_context(const RunConfig& config, const RvqCodecs& codecs, const FeatureExtractor& features,
                               const std::vector<CorpusSample>& corpus) {
  EvalContext ctx;
  ctx.config = config;
  ctx.codecs = &codecs;
  ctx.features = &features;
  ctx.clips = cut_windows(filter_split(corpus, Split::Test), config.eval.window);
  if (ctx.clips.size() < 2) throw std::runtime_error("test split too small to evaluate");
  std::vector<Tensor> gt;
  std::vector<MotionSequence> motions;
  for (const auto& c : ctx.clips) {
    ctx.speech.push_back(c.speech);
    gt.push_back(full_body(c.motion));
    motions.push_back(c.motion);
  }
  ctx.real = gaussian_stats(features.features(gt));
  ctx.bc_ground_truth = motion_beat_constancy(motions, ctx.speech, config.eval.beats);
  return ctx;
}

ReportRow evaluate(const FlowModel& model, const EvalContext& ctx, const SamplingConfig& sampler,
                   const std::string& variant, std::vector<MotionSequence>* generated) {
  std::vector<const SpeechTrack*> tracks;
  for (const auto& s : ctx.speech) tracks.push_back(&s);
  auto res = batch_generate(model, *ctx.codecs, tracks, sampler);
  std::vector<Tensor> clips;
  double mse = 0.0;
  for (std::size_t i = 0; i < res.sequences.size(); ++i) {
    clips.push_back(full_body(res.sequences[i]));
    mse += face_mse(res.sequences[i].region(Region::Face), ctx.clips[i].motion.region(Region::Face));
  }
  ReportRow row;
  row.variant = variant;
  row.fgd = fgd_from_stats(ctx.real, gaussian_stats(ctx.features->features(clips)));
  row.bc = motion_beat_constancy(res.sequences, ctx.speech, ctx.config.eval.beats);
  row.bc_gap = bc_gap(row.bc, ctx.bc_ground_truth);
  row.bc_gt = ctx.bc_ground_truth;
  row.diversity = motion_diversity(clips);
  row.mse = mse / static_cast<double>(res.sequences.size());
  row.aits = res.aits;
  row.seed = sampler.seed;
  if (generated) *generated = std::move(res.sequences);
  return row;
}

ReportRow median_row(const std::vector<ReportRow>& rows) {
  if (rows.empty()) throw std::invalid_argument("median_row: no rows");
  auto field = [&](double ReportRow::*f) {
    std::vector<double> v;
    for (const auto& r : rows) v.push_back(r.*f);
    return median_of(std::move(v));
  };
  ReportRow m;
  m.variant = rows.front().variant;
  m.fgd = field(&ReportRow::fgd);
  m.bc = field(&ReportRow::bc);
  m.bc_gap = field(&ReportRow::bc_gap);
  m.bc_gt = field(&ReportRow::bc_gt);
  m.diversity = field(&ReportRow::diversity);
  m.mse = field(&ReportRow::mse);
  m.aits = field(&ReportRow::aits);
  m.seed = rows.front().seed;
  if (rows.size() > 1) {
    double mean = 0.0, ss = 0.0;
    for (const auto& r : rows) mean += r.fgd;
    mean /= static_cast<double>(rows.size());
    for (const auto& r : rows) ss += (r.fgd - mean) * (r.fgd - mean);
    m.fgd_std = std::sqrt(ss / static_cast<double>(rows.size() - 1));
  }
  for (std::size_t i = 0; i < rows.size(); ++i) {
    const std::string sep = i ? ";" : "";
    if (!rows[i].checkpoint.empty()) m.checkpoint += sep + rows[i].checkpoint;
    m.config_hash += sep + rows[i].config_hash;
  }
  return m;
}

// ---- reports ------------------------------------------------------------

nlohmann::json config_echo(const RunConfig& config) {
  return {{"hash", config_hash(config)}, {"ini", to_ini(config)}};
}

nlohmann::json environment_fingerprint() {
  nlohmann::json env;
  env["compiler"] = __VERSION__;
  env["cxx_standard"] = static_cast<long>(__cplusplus);
  env["eigen"] = std::to_string(EIGEN_WORLD_VERSION) + "." + std::to_string(EIGEN_MAJOR_VERSION) + "." +
                 std::to_string(EIGEN_MINOR_VERSION);
#ifdef NDEBUG
  env["build"] = "release";
#else
  env["build"] = "debug";
#endif
  utsname u{};
  if (uname(&u) == 0) env["system"] = std::string(u.sysname) + " " + u.release + " " + u.machine;
  env["variant_threads"] = variant_threads();
  env["precision"] = "double";
  return env;
}

namespace {

nlohmann::json row_json(const ReportRow& r, bool timing) {
  nlohmann::json j = {{"variant", r.variant},       {"fgd", r.fgd},
                      {"bc", r.bc},                 {"bc_gt", r.bc_gt},
                      {"bc_gap", r.bc_gap},         {"diversity", r.diversity},
                      {"face_mse", r.mse},          {"fgd_std", r.fgd_std},
                      {"seed", r.seed},             {"checkpoint", r.checkpoint},
                      {"config_hash", r.config_hash}};
  if (timing) j["aits_seconds"] = r.aits;
  return j;
}

}  // namespace

nlohmann::json to_json(const ExperimentReport& report, bool timing) {
  nlohmann::json j;
  j["name"] = report.name;
  j["seeds"] = report.seeds;
  j["rows"] = nlohmann::json::array();
  for (const auto& r : report.rows) j["rows"].push_back(row_json(r, timing));
  j["seed_rows"] = nlohmann::json::array();
  for (const auto& r : report.seed_rows) j["seed_rows"].push_back(row_json(r, timing));
  j["trends"] = nlohmann::json::object();
  // Trends over wall-clock time are not reproducible, so they go with timing.
  for (const auto& [k, v] : report.trends)
    if (timing || k.rfind("aits", 0) != 0) j["trends"][k] = v;
  j["notes"] = report.notes;
  j["config"] = report.config;
  j["environment"] = environment_fingerprint();
  j["extra"] = report.extra;
  return j;
}

std::string to_markdown(const ExperimentReport& report) {
  std::ostringstream md;
  md << "# " << report.name << "\n\n";
  md << "| Variant | FGD | BC | BC gap | Diversity | MSE | AITS (s) |\n";
  md << "|---|---|---|---|---|---|---|\n";
  std::size_t best = 0;
  for (std::size_t i = 1; i < report.rows.size(); ++i)
    if (report.rows[i].fgd < report.rows[best].fgd) best = i;
  char buf[256];
  for (std::size_t i = 0; i < report.rows.size(); ++i) {
    const auto& r = report.rows[i];
    const char* b = i == best ? "**" : "";
    std::snprintf(buf, sizeof buf, "| %s | %s%.4f%s | %.4f | %.4f | %.4f | %.4f | %.4f |\n", r.variant.c_str(), b,
                  r.fgd, b, r.bc, r.bc_gap, r.diversity, r.mse, r.aits);
    md << buf;
  }
  if (!report.seeds.empty()) {
    md << "\nSeeds:";
    for (auto s : report.seeds) md << ' ' << s;
    md << " (rows are medians)\n";
  }
  if (!report.trends.empty()) {
    md << "\n## Trends\n\n";
    for (const auto& [k, v] : report.trends) md << "- " << k << ": " << (v ? "holds" : "does not hold") << "\n";
  }
  if (!report.notes.empty()) {
    md << "\n## Notes\n\n";
    for (const auto& n : report.notes) md << "- " << n << "\n";
  }
  return md.str();
}

void write_report(const ExperimentReport& report, const std::filesystem::path& dir, const std::string& stem) {
  std::filesystem::create_directories(dir);
  auto put = [&](const std::string& name, const std::string& text) {
    std::ofstream out(dir / name);
    if (!out) throw std::runtime_error("cannot write " + (dir / name).string());
    out << text;
  };
  put(stem + ".json", to_json(report, true).dump(2) + "\n");
  put(stem + ".metrics.json", to_json(report, false).dump(2) + "\n");
  put(stem + ".md", to_markdown(report));
}

// ---- variants -----------------------------------------------------------

FlowModel ModelStore::obtain(const RunConfig& config, const RvqCodecs& codecs, const std::vector<CorpusSample>& corpus,
                             const std::string& variant, std::string* path_out) const {
  const std::string hash = config_hash(config);
  if (dir.empty()) return train_flow_model(config, codecs, corpus, log);
  const auto path = dir / (variant + "-" + hash + ".ckpt");
  if (path_out) *path_out = path.string();
  if (std::filesystem::exists(path)) {
    const Checkpoint ckpt = load_checkpoint(path);
    if (checkpoint_config_hash(ckpt) == hash) return FlowModel::from_checkpoint(ckpt);
  }
  // The same config saved under another variant name (e.g. "beta" and "full").
  if (std::filesystem::is_directory(dir))
    for (const auto& entry : std::filesystem::directory_iterator(dir)) {
      const std::string name = entry.path().filename().string();
      const std::string suffix = "-" + hash + ".ckpt";
      if (name.size() <= suffix.size() || name.compare(name.size() - suffix.size(), suffix.size(), suffix) != 0)
        continue;
      const Checkpoint ckpt = load_checkpoint(entry.path());
      if (checkpoint_config_hash(ckpt) != hash) continue;
      if (path_out) *path_out = entry.path().string();
      return FlowModel::from_checkpoint(ckpt);
    }
  FlowModel model = train_flow_model(config, codecs, corpus, log);
  std::filesystem::create_directories(dir);
  // Write then rename so an interrupted run never leaves a truncated cache.
  const auto tmp = path.string() + ".tmp";
  save_checkpoint(tmp, flow_checkpoint(model, config));
  std::filesystem::rename(tmp, path);
  return model;
}

std::size_t variant_threads() {
  const char* env = std::getenv("GLSM_THREADS");
  if (!env || !*env) return 1;
  std::size_t n = 0;
  const std::string s(env);
  auto [p, ec] = std::from_chars(s.data(), s.data() + s.size(), n);
  if (ec != std::errc() || p != s.data() + s.size() || n == 0) return 1;
  return n;
}

void run_parallel(std::size_t n, const std::function<void(std::size_t)>& fn) {
  const std::size_t workers = std::min(n, variant_threads());
  if (workers <= 1) {
    for (std::size_t i = 0; i < n; ++i) fn(i);
    return;
  }
  std::atomic<std::size_t> next{0};
  std::exception_ptr first;
  std::mutex mu;
  std::vector<std::thread> pool;
  for (std::size_t w = 0; w < workers; ++w)
    pool.emplace_back([&] {
      for (std::size_t i = next++; i < n; i = next++) {
        try {
          fn(i);
        } catch (...) {
          std::lock_guard<std::mutex> lock(mu);
          if (!first) first = std::current_exception();
        }
      }
    });
  for (auto& t : pool) t.join();
  if (first) std::rethrow_exception(first);
}

const std::vector<std::size_t>& ablation_step_counts() {
  static const std::vector<std::size_t> v{1, 2, 4, 8, 20};
  return v;
}

const std::vector<double>& ablation_guidance_scales() {
  static const std::vector<double> v{1.0, 1.5, 2.0, 2.5, 3.0};
  return v;
}

const std::vector<std::string>& time_sampler_variants() {
  static const std::vector<std::string> v{"uniform", "logit-normal", "mode", "cosmap", "beta"};
  return v;
}

const std::vector<std::string>& module_variants() {
  static const std::vector<std::string> v{"full", "no-spatial", "no-temporal", "no-positional"};
  return v;
}

RunConfig time_sampler_variant(const RunConfig& base, const std::string& variant) {
  RunConfig c = base;
  try {
    c.flow.sampler.kind = parse_time_sampler(variant);
  } catch (const std::exception&) {
    throw ConfigError("unknown time-sampler variant '" + variant + "'");
  }
  return c;
}

RunConfig module_variant(const RunConfig& base, const std::string& variant) {
  RunConfig c = base;
  if (variant == "full") return c;
  if (variant == "no-spatial") c.generator.spatial = false;
  else if (variant == "no-temporal") c.generator.temporal = false;
  else if (variant == "no-positional") c.generator.positional = false;
  else throw ConfigError("unknown module variant '" + variant + "'");
  return c;
}

LossProfile held_out_profile(const FlowModel& model, const EvalContext& ctx, std::size_t repeats) {
  const auto data = latent_dataset(*ctx.codecs, model, ctx.clips);
  return profile_loss_over_t(model, data, repeats, mix_seed(ctx.config.seed, 0x9f0));
}

// ---- ablations ----------------------------------------------------------

namespace {

ExperimentReport sweep(const std::string& name, const FlowModel& model, const EvalContext& ctx,
                       const std::string& checkpoint, std::size_t count,
                       const std::function<std::pair<std::string, SamplingConfig>(std::size_t, std::uint64_t)>& make) {
  ExperimentReport rep;
  rep.name = name;
  rep.seeds = ctx.config.eval.seeds;
  rep.config = config_echo(ctx.config);
  const std::string hash = config_hash(ctx.config);
  std::vector<std::vector<ReportRow>> per(count);
  for (std::uint64_t seed : rep.seeds)
    for (std::size_t i = 0; i < count; ++i) {
      auto [variant, sc] = make(i, seed);
      ReportRow r = evaluate(model, ctx, sc, variant);
      r.checkpoint = checkpoint;
      r.config_hash = hash;
      per[i].push_back(r);
      rep.seed_rows.push_back(r);
    }
  for (const auto& rows : per) rep.rows.push_back(median_row(rows));
  return rep;
}

// Trains (or loads) every variant x seed and evaluates it with the base
// sampler config.
ExperimentReport train_sweep(const std::string& name, const EvalContext& ctx, const std::vector<CorpusSample>& corpus,
                             const ModelStore& store, const std::vector<std::string>& variants,
                             const std::function<RunConfig(const RunConfig&, const std::string&)>& edit,
                             std::vector<std::vector<LossProfile>>* profiles) {
  ExperimentReport rep;
  rep.name = name;
  rep.seeds = ctx.config.eval.seeds;
  rep.config = config_echo(ctx.config);
  const std::size_t ns = rep.seeds.size(), jobs = variants.size() * ns;
  for (const auto& v : variants) edit(ctx.config, v);  // reject unknown names before training anything
  std::vector<ReportRow> rows(jobs);
  if (profiles) profiles->assign(variants.size(), std::vector<LossProfile>(ns));
  run_parallel(jobs, [&](std::size_t j) {
    const std::size_t vi = j / ns, si = j % ns;
    const RunConfig cfg = with_seed(edit(ctx.config, variants[vi]), rep.seeds[si]);
    std::string path;
    const FlowModel model = store.obtain(cfg, *ctx.codecs, corpus, variants[vi] + "-seed" + std::to_string(rep.seeds[si]),
                                         &path);
    ReportRow r = evaluate(model, ctx, ctx.config.sampler, variants[vi]);
    r.seed = rep.seeds[si];
    r.checkpoint = path;
    r.config_hash = config_hash(cfg);
    rows[j] = r;
    if (profiles) (*profiles)[vi][si] = held_out_profile(model, ctx);
  });
  for (std::size_t vi = 0; vi < variants.size(); ++vi) {
    std::vector<ReportRow> mine(rows.begin() + static_cast<std::ptrdiff_t>(vi * ns),
                                rows.begin() + static_cast<std::ptrdiff_t>((vi + 1) * ns));
    rep.rows.push_back(median_row(mine));
  }
  rep.seed_rows = std::move(rows);
  return rep;
}

const ReportRow* find_row(const ExperimentReport& rep, const std::string& variant) {
  for (const auto& r : rep.rows)
    if (r.variant == variant) return &r;
  return nullptr;
}

}  // namespace

ExperimentReport ablate_steps(const FlowModel& model, const EvalContext& ctx, const std::string& checkpoint) {
  const auto& ms = ablation_step_counts();
  auto rep = sweep("ablate-steps", model, ctx, checkpoint, ms.size(), [&](std::size_t i, std::uint64_t seed) {
    SamplingConfig sc = ctx.config.sampler;
    sc.steps = ms[i];
    sc.seed = seed;
    return std::make_pair("M=" + std::to_string(ms[i]), sc);
  });
  const auto* m1 = find_row(rep, "M=1");
  const auto* m8 = find_row(rep, "M=8");
  rep.trends["fgd_m8_le_m1"] = m8->fgd <= m1->fgd;
  bool increasing = true;
  for (std::size_t i = 1; i < rep.rows.size(); ++i) increasing = increasing && rep.rows[i].aits > rep.rows[i - 1].aits;
  rep.trends["aits_increasing_in_m"] = increasing;
  rep.notes.push_back("step sizes d = 1/M are used for trained dyadic M, otherwise d = 0");
  return rep;
}

ExperimentReport ablate_cfg(const FlowModel& model, const EvalContext& ctx, const std::string& checkpoint) {
  const auto& scales = ablation_guidance_scales();
  auto rep = sweep("ablate-cfg", model, ctx, checkpoint, scales.size(), [&](std::size_t i, std::uint64_t seed) {
    SamplingConfig sc = ctx.config.sampler;
    sc.guidance = scales[i];
    sc.seed = seed;
    return std::make_pair("s=" + fmt(scales[i]), sc);
  });
  rep.notes.push_back("evaluation-only sweep; no trend is asserted because desk-scale differences can sit within "
                      "seed noise (see fgd_std)");
  rep.notes.push_back("s=1 samples the conditional field alone");
  return rep;
}

ExperimentReport ablate_time_sampler(const EvalContext& ctx, const std::vector<CorpusSample>& corpus,
                                     const ModelStore& store, std::vector<std::string> variants) {
  if (variants.empty()) variants = time_sampler_variants();
  std::vector<std::vector<LossProfile>> profiles;
  auto rep = train_sweep("ablate-time-sampler", ctx, corpus, store, variants, time_sampler_variant, &profiles);
  nlohmann::json prof = nlohmann::json::object();
  for (std::size_t vi = 0; vi < variants.size(); ++vi) {
    std::vector<double> hi, mid;
    nlohmann::json seeds = nlohmann::json::array();
    for (const auto& p : profiles[vi]) {
      hi.push_back(p.mean_over(0.9, 1.0));
      mid.push_back(p.mean_over(0.4, 0.6));
      seeds.push_back({{"bin_mean", p.bin_mean}, {"bin_count", p.bin_count}, {"late", hi.back()}, {"middle", mid.back()}});
    }
    prof[variants[vi]] = {{"seeds", seeds}, {"late_median", median_of(hi)}, {"middle_median", median_of(mid)}};
  }
  rep.extra["loss_profiles"] = prof;
  const auto* beta = find_row(rep, "beta");
  const auto* uniform = find_row(rep, "uniform");
  if (beta && uniform) rep.trends["beta_fgd_le_uniform"] = beta->fgd <= uniform->fgd;
  if (prof.contains("uniform"))
    rep.trends["uniform_late_loss_gt_middle"] =
        prof["uniform"]["late_median"].get<double>() > prof["uniform"]["middle_median"].get<double>();
  rep.notes.push_back("identical step budget, batch and seeds for every variant");
  rep.notes.push_back("loss profiles bin the held-out flow loss over t in [0, 1] (20 bins); late = t in [0.9, 1], "
                      "middle = t in [0.4, 0.6]");
  return rep;
}

ExperimentReport ablate_modules(const EvalContext& ctx, const std::vector<CorpusSample>& corpus,
                                const ModelStore& store, std::vector<std::string> variants) {
  if (variants.empty()) variants = module_variants();
  auto rep = train_sweep("ablate-modules", ctx, corpus, store, variants, module_variant, nullptr);
  if (const auto* full = find_row(rep, "full")) {
    bool le_all = true;
    for (const auto& r : rep.rows) le_all = le_all && full->fgd <= r.fgd;
    rep.trends["full_fgd_le_ablations"] = le_all;
  }
  if (const auto* nt = find_row(rep, "no-temporal")) {
    bool worst = true;
    for (const auto& r : rep.rows) worst = worst && nt->fgd >= r.fgd;
    rep.trends["no_temporal_worst"] = worst;
  }
  return rep;
}

}  // namespace glsm
