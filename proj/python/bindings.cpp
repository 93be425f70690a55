#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>
#include <pybind11/stl/filesystem.h>

#include "glsm/harness.hpp"

namespace py = pybind11;
using namespace glsm;

namespace {

py::array_t<double> to_numpy(const Tensor& t) {
  std::vector<py::ssize_t> shape(t.shape().begin(), t.shape().end());
  py::array_t<double> out(shape);
  std::copy(t.values().begin(), t.values().end(), out.mutable_data());
  return out;
}

Tensor from_numpy(const py::array_t<double, py::array::c_style | py::array::forcecast>& a) {
  Shape shape(a.shape(), a.shape() + a.ndim());
  return Tensor(shape, std::vector<double>(a.data(), a.data() + a.size()));
}

py::dict motion_dict(const MotionSequence& m) {
  py::dict d;
  for (std::size_t r = 0; r < kNumRegions; ++r) d[region_name(static_cast<Region>(r))] = to_numpy(m.regions[r]);
  return d;
}

py::object json_to_py(const nlohmann::json& j) {
  return py::module_::import("json").attr("loads")(j.dump());
}

std::vector<const SpeechTrack*> tracks_of(const std::vector<CorpusSample>& samples) {
  std::vector<const SpeechTrack*> tracks;
  for (const auto& s : samples) tracks.push_back(&s.speech);
  return tracks;
}

}  // namespace

PYBIND11_MODULE(_core, m) {
  m.doc() = "GestureLSM desk-scale toolkit";

  py::register_exception<ConfigError>(m, "ConfigError", PyExc_ValueError);

  py::class_<RunConfig>(m, "RunConfig")
      .def(py::init<>())
      .def_readwrite("name", &RunConfig::name)
      .def_readwrite("seed", &RunConfig::seed)
      .def_readwrite("out_dir", &RunConfig::out_dir)
      .def("to_ini", [](const RunConfig& c) { return to_ini(c); })
      .def("hash", [](const RunConfig& c) { return config_hash(c); })
      .def("override", [](RunConfig& c, const std::string& a) { apply_override(c, a); validate(c); return c; },
           py::arg("assignment"))
      .def("__repr__", [](const RunConfig& c) { return "<RunConfig " + c.name + " " + config_hash(c) + ">"; });

  m.def("preset", &preset, py::arg("name"));
  m.def("preset_names", &preset_names);
  m.def("parse_config", [](const std::string& text, const RunConfig& base) { return parse_run_config(text, base); },
        py::arg("text"), py::arg("base") = RunConfig{});

  py::class_<CorpusSample>(m, "CorpusSample")
      .def_property_readonly("id", [](const CorpusSample& s) { return s.motion.id; })
      .def_property_readonly("split", [](const CorpusSample& s) { return std::string(split_name(s.split)); })
      .def_property_readonly("frames", [](const CorpusSample& s) { return s.motion.frames(); })
      .def_property_readonly("motion", [](const CorpusSample& s) { return motion_dict(s.motion); })
      .def_property_readonly("envelope", [](const CorpusSample& s) { return to_numpy(s.speech.envelope); })
      .def_property_readonly("beats", [](const CorpusSample& s) { return s.speech.beats; })
      .def_property_readonly("tokens", [](const CorpusSample& s) { return s.speech.tokens; });

  m.def("make_corpus", [](const RunConfig& c) { return make_corpus(c.corpus); }, py::arg("config"));
  m.def("write_corpus", &write_corpus, py::arg("samples"), py::arg("path"));
  m.def("read_corpus", &load_corpus, py::arg("path"));
  m.def("filter_split", [](const std::vector<CorpusSample>& s, const std::string& split) {
    for (Split k : {Split::Train, Split::Val, Split::Test, Split::Generated})
      if (split == split_name(k)) return filter_split(s, k);
    throw py::value_error("unknown split: " + split);
  });

  m.def("test_windows", [](const RunConfig& c, const std::vector<CorpusSample>& s) {
    return cut_windows(filter_split(s, Split::Test), c.eval.window);
  }, py::arg("config"), py::arg("corpus"));

  py::class_<RvqCodecs>(m, "Codecs")
      .def("save", [](const RvqCodecs& c, const std::filesystem::path& p) { save_checkpoint(p, c.to_checkpoint()); })
      .def_static("load", [](const std::filesystem::path& p) { return RvqCodecs::from_checkpoint(load_checkpoint(p)); })
      .def("reconstruct", [](const RvqCodecs& c, const std::string& region, const py::array_t<double>& x) {
        for (std::size_t r = 0; r < kNumRegions; ++r)
          if (region == region_name(static_cast<Region>(r))) {
            const auto& codec = c.regions[r];
            return to_numpy(codec.decode(codec.snap(codec.encode(from_numpy(x)))));
          }
        throw py::value_error("unknown region: " + region);
      });

  py::class_<FeatureExtractor>(m, "FeatureExtractor")
      .def("save", [](const FeatureExtractor& f, const std::filesystem::path& p) { save_checkpoint(p, f.to_checkpoint()); })
      .def_static("load",
                  [](const std::filesystem::path& p) { return FeatureExtractor::from_checkpoint(load_checkpoint(p)); });

  py::class_<FlowModel>(m, "FlowModel")
      .def_static("load", [](const std::filesystem::path& p) { return FlowModel::from_checkpoint(load_checkpoint(p)); })
      .def("save", [](const FlowModel& f, const std::filesystem::path& p, const RunConfig& c) {
        save_checkpoint(p, flow_checkpoint(f, c));
      }, py::arg("path"), py::arg("config"));

  m.def("train_codecs", [](const RunConfig& c, const std::vector<CorpusSample>& s) {
    py::gil_scoped_release nogil;
    return train_codecs(c, s);
  });
  m.def("train_features", [](const RunConfig& c, const std::vector<CorpusSample>& s) {
    py::gil_scoped_release nogil;
    return train_features(c, s);
  });
  m.def("train_flow", [](const RunConfig& c, const RvqCodecs& codecs, const std::vector<CorpusSample>& s) {
    py::gil_scoped_release nogil;
    return train_flow_model(c, codecs, s);
  });

  m.def("sample", [](const FlowModel& model, const RvqCodecs& codecs, const std::vector<CorpusSample>& conditions,
                     std::size_t steps, double guidance, std::uint64_t seed) {
    SamplingConfig sc;
    sc.steps = steps;
    sc.guidance = guidance;
    sc.seed = seed;
    std::vector<MotionSequence> out;
    {
      py::gil_scoped_release nogil;
      out = sample(model, codecs, tracks_of(conditions), sc);
    }
    py::list result;
    for (const auto& mo : out) result.append(motion_dict(mo));
    return result;
  }, py::arg("model"), py::arg("codecs"), py::arg("conditions"), py::arg("steps") = 8, py::arg("guidance") = 2.0,
     py::arg("seed") = 0);

  // Scores `model` on the config's test windows; returns the report as a dict.
  m.def("evaluate", [](const RunConfig& c, const FlowModel& model, const RvqCodecs& codecs,
                       const FeatureExtractor& features, const std::vector<CorpusSample>& corpus, bool timing) {
    ExperimentReport rep;
    {
      py::gil_scoped_release nogil;
      const auto ctx = make_eval_context(c, codecs, features, corpus);
      rep.name = "eval";
      rep.seeds = {c.sampler.seed};
      ReportRow row = evaluate(model, ctx, c.sampler, "M=" + std::to_string(c.sampler.steps));
      row.config_hash = config_hash(c);
      rep.rows = {row};
      rep.seed_rows = {row};
      rep.config = config_echo(c);
    }
    return json_to_py(to_json(rep, timing));
  }, py::arg("config"), py::arg("model"), py::arg("codecs"), py::arg("features"), py::arg("corpus"),
     py::arg("timing") = true);

  m.def("ablate_steps", [](const RunConfig& c, const FlowModel& model, const RvqCodecs& codecs,
                           const FeatureExtractor& features, const std::vector<CorpusSample>& corpus, bool timing) {
    ExperimentReport rep;
    {
      py::gil_scoped_release nogil;
      rep = ablate_steps(model, make_eval_context(c, codecs, features, corpus));
    }
    return json_to_py(to_json(rep, timing));
  }, py::arg("config"), py::arg("model"), py::arg("codecs"), py::arg("features"), py::arg("corpus"),
     py::arg("timing") = true);

  m.def("beat_constancy", [](std::vector<std::uint32_t> gesture, std::vector<std::uint32_t> audio, double sigma) {
    return beat_constancy(BeatSets{std::move(gesture), std::move(audio)}, sigma);
  }, py::arg("gesture"), py::arg("audio"), py::arg("sigma") = 3.0);
  m.def("bc_gap", &bc_gap);
  m.def("gesture_beats", [](const py::array_t<double>& upper, double prominence) {
    return extract_beats_from_upper(from_numpy(upper), prominence);
  }, py::arg("upper"), py::arg("prominence") = 0.1);
  m.def("fgd", [](const py::array_t<double>& real, const py::array_t<double>& gen) {
    return fgd(from_numpy(real), from_numpy(gen));
  });
  m.def("l1_diversity", [](const std::vector<py::array_t<double>>& clips) {
    std::vector<Tensor> ts;
    for (const auto& c : clips) ts.push_back(from_numpy(c));
    return l1_diversity(ts);
  });
}
