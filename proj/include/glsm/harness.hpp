#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <memory>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "glsm/data.hpp"
#include "glsm/flow.hpp"
#include "glsm/metrics.hpp"
#include "glsm/rvq.hpp"
#include "glsm/sampler.hpp"

namespace glsm {

class ConfigError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

struct CorpusParams {
  std::uint64_t seed = 7;
  std::size_t count = 256;
  std::size_t frames = 256;
  SplitRatios split;
  std::uint64_t split_seed = 7;
};

struct EvalParams {
  std::size_t window = 64;  // test clips are cut to this many frames
  FeatureExtractorConfig features;
  BeatParams beats;
  std::vector<std::uint64_t> seeds{0, 1, 2};  // medians are taken over these
};

/// Everything a run needs. Written next to its outputs as INI text.
///
/// `seed` is the training seed: it initialises the generator and drives the
/// flow trainer. The generator's latent width and frame budget follow from
/// the RVQ code width and the flow window.
struct RunConfig {
  std::string name = "desk";
  std::uint64_t seed = 0;
  std::string out_dir = "runs/desk";
  CorpusParams corpus;
  RvqConfig rvq;
  GeneratorConfig generator;
  FlowPlan flow;
  SamplingConfig sampler;
  EvalParams eval;
};

// Flat `key = value` lines under `[section]` headers; `#` and `;` start
// comments. Unknown sections or keys and malformed values throw ConfigError.
RunConfig parse_run_config(const std::string& text, const RunConfig& base = {});
RunConfig load_run_config(const std::filesystem::path& path, const RunConfig& base = {});
// `section.key=value`.
void apply_override(RunConfig& config, const std::string& assignment);
std::string to_ini(const RunConfig& config);
// Throws ConfigError on inconsistent values.
void validate(const RunConfig& config);
// 16 hex digits of a hash of the resolved INI text.
std::string config_hash(const RunConfig& config);

// "smoke" (seconds), "desk" (the acceptance scale), "paper" (full-size).
RunConfig preset(const std::string& name);
std::vector<std::string> preset_names();

// Generator config actually trained under `config`.
GeneratorConfig resolved_generator(const RunConfig& config);
RunConfig with_seed(RunConfig config, std::uint64_t seed);

/// Append-only JSON-lines log. A default-constructed log discards records.
class JsonlLog {
 public:
  JsonlLog() = default;
  explicit JsonlLog(const std::filesystem::path& path);
  void write(const nlohmann::json& record);
  bool enabled() const { return sink_ != nullptr; }

 private:
  struct Sink;
  std::shared_ptr<Sink> sink_;
};

std::vector<CorpusSample> make_corpus(const CorpusParams& params);
// Throws std::runtime_error("corpus not found: ...") for a missing file.
std::vector<CorpusSample> load_corpus(const std::filesystem::path& path);

RvqCodecs train_codecs(const RunConfig& config, const std::vector<CorpusSample>& corpus,
                       JsonlLog* log = nullptr);
FeatureExtractor train_features(const RunConfig& config, const std::vector<CorpusSample>& corpus);

// Train-split windows, standardisation and flow training under `config`.
FlowModel train_flow_model(const RunConfig& config, const RvqCodecs& codecs,
                           const std::vector<CorpusSample>& corpus, JsonlLog* log = nullptr);

// Flow checkpoint carrying the run config and its hash.
Checkpoint flow_checkpoint(const FlowModel& model, const RunConfig& config);
std::optional<std::string> checkpoint_config_hash(const Checkpoint& ckpt);

/// Held-out material shared by every evaluation of one corpus and codec.
struct EvalContext {
  RunConfig config;
  const RvqCodecs* codecs = nullptr;
  const FeatureExtractor* features = nullptr;
  std::vector<CorpusSample> clips;  // test windows
  std::vector<SpeechTrack> speech;
  GaussianStats real;
  double bc_ground_truth = 0.0;
};

EvalContext make_eval_context(const RunConfig& config, const RvqCodecs& codecs, const FeatureExtractor& features,
                               const std::vector<CorpusSample>& corpus);

struct ReportRow {
  std::string variant;
  double fgd = 0.0;
  double bc = 0.0;
  double bc_gap = 0.0;
  double bc_gt = 0.0;
  double diversity = 0.0;
  double mse = 0.0;   // face-region MSE against ground truth
  double aits = 0.0;  // seconds
  double fgd_std = 0.0;  // across seeds, median rows only
  std::uint64_t seed = 0;
  std::string checkpoint;
  std::string config_hash;
};

// Samples every test clip with `sampler` and scores the result.
ReportRow evaluate(const FlowModel& model, const EvalContext& ctx, const SamplingConfig& sampler,
                   const std::string& variant, std::vector<MotionSequence>* generated = nullptr);

// Per-field median over rows of one variant; fgd_std is the sample standard
// deviation of FGD.
ReportRow median_row(const std::vector<ReportRow>& rows);

struct ExperimentReport {
  std::string name;
  std::vector<ReportRow> rows;       // one per variant (seed medians)
  std::vector<ReportRow> seed_rows;  // every individual run
  std::vector<std::uint64_t> seeds;
  std::map<std::string, bool> trends;
  std::vector<std::string> notes;
  nlohmann::json config = nlohmann::json::object();  // {hash, ini} of the evaluating run
  nlohmann::json extra = nlohmann::json::object();
};

// {hash, ini} echo of a run config for reports.
nlohmann::json config_echo(const RunConfig& config);

nlohmann::json environment_fingerprint();
// Timing fields (aits) are dropped when `timing` is false, which leaves only
// values that are reproducible bit for bit.
nlohmann::json to_json(const ExperimentReport& report, bool timing = true);
std::string to_markdown(const ExperimentReport& report);
// Writes <stem>.json, <stem>.metrics.json (no timing) and <stem>.md.
void write_report(const ExperimentReport& report, const std::filesystem::path& dir, const std::string& stem);

/// Where ablations keep variant checkpoints (<variant>-<hash>.ckpt). Any
/// checkpoint whose stored config hash matches the requested config is loaded
/// instead of retrained, whatever variant name it was saved under.
struct ModelStore {
  std::filesystem::path dir;  // empty: train in memory, never save
  JsonlLog* log = nullptr;

  FlowModel obtain(const RunConfig& config, const RvqCodecs& codecs, const std::vector<CorpusSample>& corpus,
                   const std::string& variant, std::string* path_out = nullptr) const;
};

// Upper bound on concurrently trained variants (GLSM_THREADS, default 1).
std::size_t variant_threads();
// Runs fn(0..n-1) on up to variant_threads() threads; the first exception is
// rethrown after all workers finish.
void run_parallel(std::size_t n, const std::function<void(std::size_t)>& fn);

const std::vector<std::size_t>& ablation_step_counts();  // {1, 2, 4, 8, 20}
const std::vector<double>& ablation_guidance_scales();   // {1, 1.5, 2, 2.5, 3}

// Step budgets M on one checkpoint; medians over sampling seeds.
ExperimentReport ablate_steps(const FlowModel& model, const EvalContext& ctx, const std::string& checkpoint = {});

// Time-sampler variants trained under one budget; medians over training
// seeds. Per-variant held-out loss-over-t profiles go to `extra`.
ExperimentReport ablate_time_sampler(const EvalContext& ctx, const std::vector<CorpusSample>& corpus,
                                     const ModelStore& store, std::vector<std::string> variants = {});

// full / no-spatial / no-temporal / no-positional.
ExperimentReport ablate_modules(const EvalContext& ctx, const std::vector<CorpusSample>& corpus,
                                const ModelStore& store, std::vector<std::string> variants = {});

// Guidance scales on one checkpoint; evaluation only, no trend asserted.
ExperimentReport ablate_cfg(const FlowModel& model, const EvalContext& ctx, const std::string& checkpoint = {});

// Variant name -> config edit, for the trained ablations.
RunConfig time_sampler_variant(const RunConfig& base, const std::string& variant);
RunConfig module_variant(const RunConfig& base, const std::string& variant);
const std::vector<std::string>& time_sampler_variants();  // uniform, logit-normal, mode, cosmap, beta
const std::vector<std::string>& module_variants();        // full, no-spatial, no-temporal, no-positional

// Held-out loss over t for a trained model (test windows, fixed seed).
LossProfile held_out_profile(const FlowModel& model, const EvalContext& ctx, std::size_t repeats = 4);

}  // namespace glsm
