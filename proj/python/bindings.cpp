#include <pybind11/pybind11.h>
#include <pybind11/stl.h>

#include <sstream>

#include "rubricrefine/cli.hpp"
#include "rubricrefine/engine.hpp"
#include "rubricrefine/errors.hpp"

namespace py = pybind11;
namespace rr = rubricrefine;
using nlohmann::json;

namespace {

// Structured values cross the boundary as JSON text and are decoded by the
// stdlib json module, which keeps the binding free of per-type converters.
py::object to_py(const json& j) { return py::module_::import("json").attr("loads")(j.dump()); }

json from_py(const py::handle& obj) {
  return json::parse(py::module_::import("json").attr("dumps")(obj).cast<std::string>());
}

rr::ScoreScale scale_of(int lo, int hi) { return rr::ScoreScale{lo, hi, {}}; }

rr::ScoreScale scale_from(const py::object& scale) {
  if (scale.is_none()) return rr::asap_p1_scale();
  return from_py(scale).get<rr::ScoreScale>();
}

json essay_json(const rr::EssayRecord& e) {
  return json{{"essay_id", e.essay_id},
              {"prompt_id", e.prompt_id},
              {"essay_prompt", e.essay_prompt},
              {"response", e.response},
              {"human_score", e.human_score},
              {"second_rater_score", e.second_rater_score ? json(*e.second_rater_score) : json(nullptr)},
              {"human_label", e.human_label ? json(*e.human_label) : json(nullptr)},
              {"split", rr::to_string(e.split)}};
}

rr::EssayRecord essay_from(const json& j) {
  rr::EssayRecord e;
  e.essay_id = j.at("essay_id").get<std::string>();
  e.prompt_id = j.value("prompt_id", "");
  e.essay_prompt = j.value("essay_prompt", "");
  e.response = j.at("response").get<std::string>();
  e.human_score = j.at("human_score").get<int>();
  if (j.contains("human_label") && !j.at("human_label").is_null()) e.human_label = j.at("human_label").get<std::string>();
  return e;
}

std::vector<rr::EssayRecord> essays_from(const py::handle& list) {
  std::vector<rr::EssayRecord> out;
  for (const auto& j : from_py(list)) out.push_back(essay_from(j));
  return out;
}

py::object refine_scripted(const py::list& train, const py::list& val, const py::dict& fixture,
                           const py::object& config, const py::object& seed_rubric, const py::object& scale) {
  rr::RefinementConfig cfg;
  if (!config.is_none()) cfg = from_py(config).get<rr::RefinementConfig>();
  cfg.scorer.backend = rr::BackendKind::scripted;
  cfg.scorer.fixture_path = "inline";
  cfg.refiner = cfg.scorer;
  const auto s = scale_from(scale);
  rr::Splits data;
  data.train = essays_from(train);
  data.val = essays_from(val);
  const rr::Rubric seed = seed_rubric.is_none() ? rr::seed_rubric(rr::SeedRubricKind::simplest, s)
                                                : rr::Rubric{seed_rubric.cast<std::string>(), {"user", 0, 0, {}}};
  auto backend = std::make_shared<rr::ScriptedBackend>(from_py(fixture));
  const auto no_sleep = [](std::chrono::milliseconds) {};
  const rr::Engine engine(cfg, s, rr::ModelClient(cfg.scorer, backend, no_sleep),
                          rr::ModelClient(cfg.refiner, backend, no_sleep));
  json record;
  {
    py::gil_scoped_release release;
    record = rr::comparable_json(engine.run_experiment(seed, data));
  }
  return to_py(record);
}

py::tuple run_cli(const std::vector<std::string>& args) {
  std::vector<std::string> storage{"rubric-refine"};
  storage.insert(storage.end(), args.begin(), args.end());
  std::vector<char*> argv;
  for (auto& a : storage) argv.push_back(a.data());
  std::ostringstream out, err;
  int code;
  {
    py::gil_scoped_release release;
    code = rr::run_cli(static_cast<int>(argv.size()), argv.data(), out, err);
  }
  return py::make_tuple(code, out.str(), err.str());
}

}  // namespace

PYBIND11_MODULE(_core, m) {
  m.doc() = "Native core of rubricrefine";

  auto config_error = py::register_exception<rr::ConfigError>(m, "ConfigError", PyExc_ValueError);
  py::register_exception<rr::DataError>(m, "DataError", PyExc_ValueError);
  py::register_exception<rr::IoError>(m, "IoError", PyExc_OSError);
  py::register_exception<rr::BackendError>(m, "BackendError", PyExc_RuntimeError);
  (void)config_error;

  m.def(
      "qwk", [](const std::vector<int>& a, const std::vector<int>& b, int lo, int hi) {
        return to_py(json(rr::qwk(a, b, scale_of(lo, hi))));
      },
      py::arg("a"), py::arg("b"), py::arg("min") = 1, py::arg("max") = 6,
      "Quadratic weighted kappa over the fixed score range [min, max].");
  m.def(
      "qwk_with_exclusions",
      [](const std::vector<std::optional<int>>& a, const std::vector<std::optional<int>>& b, int lo, int hi) {
        return to_py(json(rr::qwk_with_exclusions(a, b, scale_of(lo, hi))));
      },
      py::arg("a"), py::arg("b"), py::arg("min") = 1, py::arg("max") = 6,
      "QWK over pairs where both ratings are present; None marks a missing rating.");
  m.def(
      "qwk_on_labels",
      [](const std::vector<std::string>& a, const std::vector<std::string>& b, const std::vector<std::string>& order) {
        return to_py(json(rr::qwk_on_labels(a, b, order)));
      },
      py::arg("a"), py::arg("b"), py::arg("ordered_labels"));
  m.def(
      "aggregate", [](const std::vector<double>& values) {
        std::vector<rr::QwkReport> reports;
        for (double v : values) reports.push_back(rr::QwkReport{.qwk = v});
        const auto agg = rr::aggregate(reports);
        return py::make_tuple(agg.mean_qwk, agg.std_qwk);
      },
      py::arg("values"), "Mean and population standard deviation of repeated QWKs.");

  m.def("toefl_scale", [] { return to_py(json(rr::toefl_scale())); });
  m.def(
      "map_score", [](int score, const py::object& scale) { return rr::map_score(score, scale_from(scale)); },
      py::arg("score"), py::arg("scale"));
  m.def(
      "load_corpus",
      [](const std::string& path, const std::string& format, const py::object& scale, const std::string& score_column,
         const std::vector<std::string>& prompt_ids) {
        rr::LoadOptions options;
        options.score_column = score_column;
        options.prompt_ids = prompt_ids;
        py::list out;
        for (const auto& e : rr::load_corpus(path, rr::corpus_format_from_string(format), scale_from(scale), options)) {
          out.append(to_py(essay_json(e)));
        }
        return out;
      },
      py::arg("path"), py::arg("format") = "asap_tsv", py::arg("scale") = py::none(),
      py::arg("score_column") = "domain1_score", py::arg("prompt_ids") = std::vector<std::string>{});

  m.def(
      "seed_rubric", [](const std::string& kind, int lo, int hi) {
        return rr::seed_rubric(rr::seed_kind_from_string(kind), scale_of(lo, hi)).text;
      },
      py::arg("kind") = "simplest", py::arg("min") = 1, py::arg("max") = 6);
  m.def(
      "render_scoring_prompt",
      [](const std::string& rubric, const std::string& essay_prompt, const std::string& response) {
        rr::EssayRecord e;
        e.essay_prompt = essay_prompt;
        e.response = response;
        return rr::render_scoring_prompt(rr::Rubric{rubric, {}}, e);
      },
      py::arg("rubric"), py::arg("essay_prompt"), py::arg("response"));
  m.def(
      "render_refinement_prompt",
      [](const std::string& rubric, const py::list& examples) {
        std::vector<rr::FeedbackExample> batch;
        for (const auto& j : from_py(examples)) batch.push_back(j.get<rr::FeedbackExample>());
        return rr::render_refinement_prompt(rr::Rubric{rubric, {}}, batch);
      },
      py::arg("rubric"), py::arg("examples"));
  m.def("extract_rubric", [](const std::string& text) { return rr::extract_rubric(text); }, py::arg("text"));
  m.def(
      "parse_rating",
      [](const std::string& text, int lo, int hi) {
        const auto r = rr::parse_rating(text, scale_of(lo, hi));
        py::dict d;
        d["status"] = std::string(rr::to_string(r.status));
        d["score"] = r.score ? py::object(py::int_(*r.score)) : py::object(py::none());
        d["rationale"] = r.rationale;
        return d;
      },
      py::arg("text"), py::arg("min") = 1, py::arg("max") = 6);

  m.def("model_preset", [](const std::string& name) { return to_py(json(rr::model_preset(name))); }, py::arg("name"));
  m.def("model_preset_names", &rr::model_preset_names);

  m.def("refine_scripted", &refine_scripted, py::arg("train"), py::arg("val"), py::arg("fixture"),
        py::arg("config") = py::none(), py::arg("seed_rubric") = py::none(), py::arg("scale") = py::none(),
        "Runs the refinement experiment against a scripted model fixture and returns the run record.");
  m.def("run_cli", &run_cli, py::arg("args"),
        "Runs the rubric-refine command line in-process; returns (exit_code, stdout, stderr).");
}
