// Command-line front end: gen-data, train-rvq, train-flow, sample, eval,
// ablate, profile-t.

#include <CLI11.hpp>

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>

#include "glsm/harness.hpp"

namespace fs = std::filesystem;
using namespace glsm;

namespace {

struct Common {
  std::string config;
  std::string preset = "desk";
  std::vector<std::string> sets;
  std::string out;
};

void add_common(CLI::App* app, Common& c, const char* out_help) {
  app->add_option("--config", c.config, "INI run config (overrides the preset)");
  app->add_option("--preset", c.preset, "base preset: smoke, desk or paper")->capture_default_str();
  app->add_option("--set", c.sets, "section.key=value override, repeatable");
  app->add_option("--out", c.out, out_help);
}

// Preset, then an optional base stored in a checkpoint, then the config
// file, then --set overrides.
RunConfig resolve(const Common& c, const std::optional<std::string>& stored = std::nullopt) {
  RunConfig cfg = preset(c.preset);
  if (stored && c.config.empty()) cfg = parse_run_config(*stored, cfg);
  if (!c.config.empty()) cfg = load_run_config(c.config, cfg);
  for (const auto& s : c.sets) apply_override(cfg, s);
  validate(cfg);
  return cfg;
}

fs::path out_dir(const Common& c, const RunConfig& cfg) { return c.out.empty() ? fs::path(cfg.out_dir) : fs::path(c.out); }

void write_text(const fs::path& path, const std::string& text) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out << text;
}

// Refuses to overwrite any input of the command.
void guard_outputs(const std::vector<fs::path>& outputs, const std::vector<std::string>& inputs) {
  for (const auto& o : outputs)
    for (const auto& i : inputs)
      if (!i.empty() && fs::exists(i) && fs::exists(o) && fs::equivalent(o, i))
        throw std::runtime_error("output " + o.string() + " would overwrite input " + i);
}

void write_summary(const fs::path& dir, const std::string& command, const RunConfig& cfg, nlohmann::json body) {
  body["command"] = command;
  body["config_hash"] = config_hash(cfg);
  body["environment"] = environment_fingerprint();
  write_text(dir / (command + ".config.ini"), to_ini(cfg));
  write_text(dir / (command + ".report.json"), body.dump(2) + "\n");
}

Checkpoint load_flow_checkpoint(const std::string& path) {
  if (path.empty() || !fs::exists(path)) throw std::runtime_error("checkpoint not found: " + path);
  return load_checkpoint(path);
}

std::optional<std::string> stored_config(const Checkpoint& ckpt) {
  if (!ckpt.config.contains("run_config")) return std::nullopt;
  return ckpt.config.at("run_config").get<std::string>();
}

RvqCodecs load_codecs(const std::string& path) {
  if (path.empty() || !fs::exists(path)) throw std::runtime_error("rvq checkpoint not found: " + path);
  return RvqCodecs::from_checkpoint(load_checkpoint(path));
}

// Loads --features when given, otherwise trains the extractor and caches it
// in the output directory.
FeatureExtractor obtain_features(const std::string& path, const RunConfig& cfg,
                                 const std::vector<CorpusSample>& corpus, const fs::path& dir) {
  if (!path.empty()) {
    if (!fs::exists(path)) throw std::runtime_error("feature checkpoint not found: " + path);
    return FeatureExtractor::from_checkpoint(load_checkpoint(path));
  }
  FeatureExtractor fx = train_features(cfg, corpus);
  fs::create_directories(dir);
  save_checkpoint(dir / "features.ckpt", fx.to_checkpoint());
  return fx;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"GestureLSM desk-scale toolkit"};
  app.require_subcommand(1);

  // gen-data
  Common gd;
  std::optional<std::uint64_t> gd_seed;
  std::optional<std::size_t> gd_count, gd_frames;
  auto* gen = app.add_subcommand("gen-data", "generate and split the synthetic corpus");
  add_common(gen, gd, "corpus file to write");
  gen->add_option("--seed", gd_seed, "corpus seed");
  gen->add_option("--count", gd_count, "number of sequences");
  gen->add_option("--frames", gd_frames, "frames per sequence");

  // train-rvq
  Common tr;
  std::string tr_corpus;
  auto* rvq = app.add_subcommand("train-rvq", "train the per-region residual VQ codecs");
  add_common(rvq, tr, "output directory");
  rvq->add_option("--corpus", tr_corpus, "corpus file");

  // train-flow
  Common tf;
  std::string tf_corpus, tf_rvq;
  std::optional<std::uint64_t> tf_seed;
  auto* flow = app.add_subcommand("train-flow", "train the shortcut flow generator");
  add_common(flow, tf, "output directory");
  flow->add_option("--corpus", tf_corpus, "corpus file");
  flow->add_option("--rvq", tf_rvq, "rvq checkpoint");
  flow->add_option("--seed", tf_seed, "training seed");

  // sample / eval share their sampling flags
  struct SampleArgs {
    Common common;
    std::string corpus, rvq, checkpoint, features, split = "test";
    std::optional<std::size_t> steps;
    std::optional<double> cfg;
    std::optional<std::uint64_t> seed;
  } sa, ev;
  auto add_sampling = [](CLI::App* sub, SampleArgs& a) {
    add_common(sub, a.common, "output directory");
    sub->add_option("--corpus", a.corpus, "corpus file");
    sub->add_option("--rvq", a.rvq, "rvq checkpoint");
    sub->add_option("--checkpoint", a.checkpoint, "flow checkpoint");
    sub->add_option("--steps", a.steps, "sampling steps M (default 8)");
    sub->add_option("--cfg", a.cfg, "guidance scale s (default 2.0)");
    sub->add_option("--seed", a.seed, "sampling seed");
  };
  auto* smp = app.add_subcommand("sample", "generate motion for a corpus split");
  add_sampling(smp, sa);
  smp->add_option("--split", sa.split, "train, val or test")->capture_default_str();
  auto* evl = app.add_subcommand("eval", "score generated motion on the test split");
  add_sampling(evl, ev);
  evl->add_option("--features", ev.features, "feature-extractor checkpoint (trained when omitted)");

  // ablate
  Common ab;
  std::string ab_kind, ab_corpus, ab_rvq, ab_checkpoint, ab_features;
  std::vector<std::string> ab_variants;
  auto* abl = app.add_subcommand("ablate", "run one ablation table");
  add_common(abl, ab, "output directory");
  abl->add_option("--kind", ab_kind, "steps, time-sampler, modules or cfg")
      ->required()
      ->check(CLI::IsMember({"steps", "time-sampler", "modules", "cfg"}));
  abl->add_option("--corpus", ab_corpus, "corpus file");
  abl->add_option("--rvq", ab_rvq, "rvq checkpoint");
  abl->add_option("--checkpoint", ab_checkpoint, "flow checkpoint (steps, cfg)");
  abl->add_option("--features", ab_features, "feature-extractor checkpoint");
  abl->add_option("--variants", ab_variants, "subset of variants (trained ablations)");

  // profile-t
  Common pt;
  std::string pt_corpus, pt_rvq, pt_checkpoint;
  std::size_t pt_repeats = 4;
  auto* prof = app.add_subcommand("profile-t", "held-out flow loss binned over t");
  add_common(prof, pt, "output directory");
  prof->add_option("--corpus", pt_corpus, "corpus file");
  prof->add_option("--rvq", pt_rvq, "rvq checkpoint");
  prof->add_option("--checkpoint", pt_checkpoint, "flow checkpoint");
  prof->add_option("--repeats", pt_repeats, "noise draws per clip")->capture_default_str();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e);
  }

  try {
    if (*gen) {
      RunConfig cfg = resolve(gd);
      if (gd_seed) cfg.corpus.seed = *gd_seed;
      if (gd_count) cfg.corpus.count = *gd_count;
      if (gd_frames) cfg.corpus.frames = *gd_frames;
      validate(cfg);
      const fs::path file = gd.out.empty() ? fs::path(cfg.out_dir) / "corpus.glsm" : fs::path(gd.out);
      const auto corpus = make_corpus(cfg.corpus);
      if (file.has_parent_path()) fs::create_directories(file.parent_path());
      write_corpus(corpus, file);
      std::size_t counts[3] = {0, 0, 0};
      for (const auto& s : corpus) ++counts[static_cast<int>(s.split)];
      write_summary(file.has_parent_path() ? file.parent_path() : fs::path("."), "gen-data", cfg,
                    {{"corpus", file.string()},
                     {"sequences", corpus.size()},
                     {"frames", cfg.corpus.frames},
                     {"splits", {{"train", counts[0]}, {"val", counts[1]}, {"test", counts[2]}}}});
      std::printf("wrote %zu sequences to %s\n", corpus.size(), file.string().c_str());
    } else if (*rvq) {
      const RunConfig cfg = resolve(tr);
      const auto corpus = load_corpus(tr_corpus);
      const fs::path dir = out_dir(tr, cfg);
      guard_outputs({dir / "rvq.ckpt"}, {tr_corpus});
      JsonlLog log(dir / "train-rvq.log.jsonl");
      const auto codecs = train_codecs(cfg, corpus, &log);
      save_checkpoint(dir / "rvq.ckpt", codecs.to_checkpoint());
      const auto held = reconstruction_mse(codecs, filter_split(corpus, Split::Test));
      nlohmann::json mse;
      for (std::size_t r = 0; r < kNumRegions; ++r) mse[region_name(static_cast<Region>(r))] = held[r];
      write_summary(dir, "train-rvq", cfg, {{"checkpoint", (dir / "rvq.ckpt").string()}, {"test_mse", mse}});
      std::printf("wrote %s\n", (dir / "rvq.ckpt").string().c_str());
    } else if (*flow) {
      RunConfig cfg = resolve(tf);
      if (tf_seed) cfg.seed = *tf_seed;
      const auto corpus = load_corpus(tf_corpus);
      const auto codecs = load_codecs(tf_rvq);
      const fs::path dir = out_dir(tf, cfg);
      guard_outputs({dir / "flow.ckpt"}, {tf_corpus, tf_rvq});
      JsonlLog log(dir / "train-flow.log.jsonl");
      const FlowModel model = train_flow_model(cfg, codecs, corpus, &log);
      save_checkpoint(dir / "flow.ckpt", flow_checkpoint(model, cfg));
      write_summary(dir, "train-flow", cfg, {{"checkpoint", (dir / "flow.ckpt").string()}, {"steps", cfg.flow.steps}});
      std::printf("wrote %s\n", (dir / "flow.ckpt").string().c_str());
    } else if (*smp || *evl) {
      SampleArgs& a = *smp ? sa : ev;
      // The corpus is checked first so a missing one is reported as such.
      const auto corpus = load_corpus(a.corpus);
      const Checkpoint ckpt = load_flow_checkpoint(a.checkpoint);
      RunConfig cfg = resolve(a.common, stored_config(ckpt));
      if (a.steps) cfg.sampler.steps = *a.steps;
      if (a.cfg) cfg.sampler.guidance = *a.cfg;
      if (a.seed) cfg.sampler.seed = *a.seed;
      validate(cfg);
      const FlowModel model = FlowModel::from_checkpoint(ckpt);
      const auto codecs = load_codecs(a.rvq);
      const fs::path dir = out_dir(a.common, cfg);
      if (*smp) {
        Split split = Split::Test;
        if (a.split == "train") split = Split::Train;
        else if (a.split == "val") split = Split::Val;
        else if (a.split != "test") throw std::runtime_error("unknown split '" + a.split + "'");
        const auto clips = cut_windows(filter_split(corpus, split), cfg.eval.window);
        std::vector<const SpeechTrack*> tracks;
        for (const auto& c : clips) tracks.push_back(&c.speech);
        const auto motions = sample(model, codecs, tracks, cfg.sampler);
        std::vector<CorpusSample> out;
        for (std::size_t i = 0; i < clips.size(); ++i) out.push_back({motions[i], clips[i].speech, Split::Generated});
        guard_outputs({dir / "samples.glsm"}, {a.corpus, a.rvq, a.checkpoint});
        fs::create_directories(dir);
        write_corpus(out, dir / "samples.glsm");
        write_summary(dir, "sample", cfg,
                      {{"samples", (dir / "samples.glsm").string()},
                       {"count", out.size()},
                       {"steps", cfg.sampler.steps},
                       {"guidance", cfg.sampler.guidance},
                       {"seed", cfg.sampler.seed}});
        std::printf("wrote %zu samples to %s\n", out.size(), (dir / "samples.glsm").string().c_str());
      } else {
        const auto fx = obtain_features(a.features, cfg, corpus, dir);
        const auto ctx = make_eval_context(cfg, codecs, fx, corpus);
        ExperimentReport rep;
        rep.name = "eval";
        rep.seeds = {cfg.sampler.seed};
        ReportRow row = evaluate(model, ctx, cfg.sampler, "M=" + std::to_string(cfg.sampler.steps));
        row.checkpoint = a.checkpoint;
        row.config_hash = config_hash(cfg);
        rep.rows = {row};
        rep.seed_rows = {row};
        rep.config = config_echo(cfg);
        write_report(rep, dir, "eval");
        write_text(dir / "eval.config.ini", to_ini(cfg));
        std::printf("FGD %.4f  BC %.4f  BC gap %.4f  Div %.4f  MSE %.4f  AITS %.4fs\n", row.fgd, row.bc, row.bc_gap,
                    row.diversity, row.mse, row.aits);
      }
    } else if (*abl) {
      const auto corpus = load_corpus(ab_corpus);
      std::optional<Checkpoint> ckpt;
      if (ab_kind == "steps" || ab_kind == "cfg") ckpt = load_flow_checkpoint(ab_checkpoint);
      const RunConfig cfg = resolve(ab, ckpt ? stored_config(*ckpt) : std::nullopt);
      const auto codecs = load_codecs(ab_rvq);
      const fs::path dir = out_dir(ab, cfg);
      const auto fx = obtain_features(ab_features, cfg, corpus, dir);
      const auto ctx = make_eval_context(cfg, codecs, fx, corpus);
      JsonlLog log(dir / ("ablate-" + ab_kind + ".log.jsonl"));
      const ModelStore store{dir / "models", &log};
      ExperimentReport rep;
      if (ab_kind == "steps") rep = ablate_steps(FlowModel::from_checkpoint(*ckpt), ctx, ab_checkpoint);
      else if (ab_kind == "cfg") rep = ablate_cfg(FlowModel::from_checkpoint(*ckpt), ctx, ab_checkpoint);
      else if (ab_kind == "time-sampler") rep = ablate_time_sampler(ctx, corpus, store, ab_variants);
      else rep = ablate_modules(ctx, corpus, store, ab_variants);
      write_report(rep, dir, "ablate-" + ab_kind);
      write_text(dir / ("ablate-" + ab_kind + ".config.ini"), to_ini(cfg));
      std::cout << to_markdown(rep);
    } else if (*prof) {
      const auto corpus = load_corpus(pt_corpus);
      const Checkpoint ckpt = load_flow_checkpoint(pt_checkpoint);
      const RunConfig cfg = resolve(pt, stored_config(ckpt));
      const FlowModel model = FlowModel::from_checkpoint(ckpt);
      const auto codecs = load_codecs(pt_rvq);
      EvalContext ctx;
      ctx.config = cfg;
      ctx.codecs = &codecs;
      ctx.clips = cut_windows(filter_split(corpus, Split::Test), cfg.eval.window);
      const auto p = held_out_profile(model, ctx, pt_repeats);
      const fs::path dir = out_dir(pt, cfg);
      write_summary(dir, "profile-t", cfg,
                    {{"checkpoint", pt_checkpoint},
                     {"bin_mean", p.bin_mean},
                     {"bin_count", p.bin_count},
                     {"late", p.mean_over(0.9, 1.0)},
                     {"middle", p.mean_over(0.4, 0.6)}});
      for (std::size_t b = 0; b < p.bin_mean.size(); ++b)
        std::printf("t in [%.2f, %.2f): %.5f\n", b / 20.0, (b + 1) / 20.0, p.bin_mean[b]);
    }
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 1;
  }
  return 0;
}
