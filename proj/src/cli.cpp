#include "rubricrefine/cli.hpp"

#include <CLI11.hpp>

#include <cstdio>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <sstream>

#include "rubricrefine/errors.hpp"

namespace rubricrefine {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

json optional_path(const std::optional<std::string>& p) { return p ? json(*p) : json(nullptr); }

std::optional<std::string> read_optional_path(const json& j, const char* key) {
  if (!j.contains(key) || j.at(key).is_null()) return std::nullopt;
  return j.at(key).get<std::string>();
}

std::string read_text(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

std::string fixed(double v, int digits = 4) {
  std::ostringstream ss;
  ss << std::fixed << std::setprecision(digits) << v;
  return ss.str();
}

}  // namespace

fs::path CliConfig::resolve(const std::string& path) const {
  const fs::path p(path);
  return p.is_absolute() ? p : base_dir / p;
}

void to_json(json& j, const CliConfig& c) {
  json load{{"score_column", c.task.load.score_column},
            {"second_rater_column", c.task.load.second_rater_column},
            {"prompt_ids", c.task.load.prompt_ids},
            {"index_file", c.task.load.index_file}};
  j = json{{"task",
            {{"corpus", c.task.corpus},
             {"format", to_string(c.task.format)},
             {"scale", c.task.scale},
             {"load", load},
             {"prompt_files", c.task.prompt_files}}},
           {"split", c.split},
           {"refinement", c.refinement},
           {"seed_rubric", {{"kind", to_string(c.seed_rubric.kind)}, {"file", optional_path(c.seed_rubric.file)}}},
           {"templates",
            {{"scoring", optional_path(c.templates.scoring)},
             {"refinement", optional_path(c.templates.refinement)},
             {"example_format", optional_path(c.templates.example_format)}}},
           {"run_dir", c.run_dir},
           {"verbosity", c.verbosity}};
}

void from_json(const json& j, CliConfig& c) {
  const auto base = c.base_dir;
  c = CliConfig{};
  c.base_dir = base;
  if (j.contains("task")) {
    const auto& t = j.at("task");
    c.task.corpus = t.value("corpus", "");
    if (t.contains("format")) c.task.format = corpus_format_from_string(t.at("format").get<std::string>());
    if (t.contains("scale")) t.at("scale").get_to(c.task.scale);
    if (t.contains("load")) {
      const auto& l = t.at("load");
      c.task.load.score_column = l.value("score_column", c.task.load.score_column);
      c.task.load.second_rater_column = l.value("second_rater_column", c.task.load.second_rater_column);
      if (l.contains("prompt_ids")) {
        for (const auto& id : l.at("prompt_ids")) {
          c.task.load.prompt_ids.push_back(id.is_string() ? id.get<std::string>() : id.dump());
        }
      }
      c.task.load.index_file = l.value("index_file", c.task.load.index_file);
    }
    if (t.contains("prompt_files")) t.at("prompt_files").get_to(c.task.prompt_files);
  }
  if (j.contains("split")) j.at("split").get_to(c.split);
  if (j.contains("refinement")) j.at("refinement").get_to(c.refinement);
  if (j.contains("seed_rubric")) {
    const auto& s = j.at("seed_rubric");
    if (s.contains("kind")) c.seed_rubric.kind = seed_kind_from_string(s.at("kind").get<std::string>());
    c.seed_rubric.file = read_optional_path(s, "file");
  }
  if (j.contains("templates")) {
    const auto& t = j.at("templates");
    c.templates.scoring = read_optional_path(t, "scoring");
    c.templates.refinement = read_optional_path(t, "refinement");
    c.templates.example_format = read_optional_path(t, "example_format");
  }
  c.run_dir = j.value("run_dir", c.run_dir);
  c.verbosity = j.value("verbosity", c.verbosity);
}

void apply_override(json& doc, std::string_view assignment) {
  const auto eq = assignment.find('=');
  if (eq == std::string_view::npos || eq == 0) {
    throw ConfigError("override must look like dotted.path=value, got '" + std::string(assignment) + "'");
  }
  const std::string path(assignment.substr(0, eq));
  const std::string raw(assignment.substr(eq + 1));
  json value;
  try {
    value = json::parse(raw);
  } catch (const json::exception&) {
    value = raw;
  }
  json* node = &doc;
  std::size_t start = 0;
  for (;;) {
    const auto dot = path.find('.', start);
    const auto key = path.substr(start, dot == std::string::npos ? std::string::npos : dot - start);
    if (key.empty()) throw ConfigError("empty key in override path '" + path + "'");
    if (!node->is_object()) *node = json::object();
    node = &(*node)[key];
    if (dot == std::string::npos) break;
    start = dot + 1;
  }
  *node = std::move(value);
}

namespace {

json read_config_doc(const fs::path& path) {
  if (!fs::exists(path)) throw ConfigError("config file not found: " + path.string());
  try {
    return json::parse(read_text(path));
  } catch (const json::exception& e) {
    throw ConfigError("config " + path.string() + " is not valid JSON: " + e.what());
  }
}

}  // namespace

CliConfig load_cli_config(const fs::path& path) {
  const json doc = read_config_doc(path);
  CliConfig config;
  config.base_dir = path.parent_path().empty() ? fs::path(".") : path.parent_path();
  try {
    from_json(doc, config);
  } catch (const json::exception& e) {
    throw ConfigError("config " + path.string() + ": " + e.what());
  }
  return config;
}

std::vector<EssayRecord> prepare_corpus(const CliConfig& config, const std::optional<fs::path>& manifest) {
  if (config.task.corpus.empty()) throw ConfigError("task.corpus is not set");
  const auto corpus_path = config.resolve(config.task.corpus);
  if (!fs::exists(corpus_path)) throw ConfigError("corpus not found: " + corpus_path.string());
  auto options = config.task.load;
  for (const auto& [id, file] : config.task.prompt_files) {
    const auto p = config.resolve(file);
    if (!fs::exists(p)) throw ConfigError("prompt file not found: " + p.string());
    options.prompt_texts[id] = read_text(p);
  }
  auto records = make_splits(load_corpus(corpus_path, config.task.format, config.task.scale, options), config.split);
  if (manifest && fs::exists(*manifest)) {
    const auto expected = read_split_manifest(*manifest);
    bool same = expected.size() == records.size();
    for (const auto& r : records) {
      const auto it = expected.find(r.essay_id);
      if (it == expected.end() || it->second != r.split) same = false;
    }
    if (!same) {
      throw ConfigError("split assignment differs from " + manifest->string() +
                        "; the corpus or split settings changed since that run");
    }
  }
  return records;
}

namespace {

struct Overrides {
  std::string config_path;
  std::vector<std::string> sets;
  std::optional<std::string> seed_kind;
  std::optional<std::string> rubric_file;
  std::optional<int> trials;
  std::optional<int> iterations;
  std::optional<int> batch_size;
  std::optional<int> repeats;
  std::optional<std::string> run_dir;
  std::optional<std::string> backend;
  std::optional<std::string> fixture;
};

void add_common(CLI::App* cmd, Overrides& o) {
  cmd->add_option("--config", o.config_path, "Config document (JSON)")->required();
  cmd->add_option("--set", o.sets, "Override a config field: dotted.path=value");
  cmd->add_option("--run-dir", o.run_dir, "Run directory");
  cmd->add_option("--backend", o.backend, "Model backend for scorer and refiner")
      ->check(CLI::IsMember({"http", "scripted"}));
  cmd->add_option("--fixture", o.fixture, "Scripted backend fixture file");
}

/// Builds the effective config: file, then --set, then dedicated flags.
CliConfig effective_config(const Overrides& o) {
  const fs::path path(o.config_path);
  // Overrides go onto the raw document so that an omitted refiner still
  // inherits the final scorer settings.
  const auto base = load_cli_config(path);
  json doc = read_config_doc(path);
  for (const auto& s : o.sets) apply_override(doc, s);
  auto set = [&](const char* p, json v) { apply_override(doc, std::string(p) + "=" + v.dump()); };
  const bool own_refiner = doc.contains("refinement") && doc["refinement"].contains("refiner");
  if (o.seed_kind) set("seed_rubric.kind", *o.seed_kind == "simplified" ? "simplified_human" : *o.seed_kind);
  if (o.trials) set("refinement.trials", *o.trials);
  if (o.iterations) set("refinement.iterations", *o.iterations);
  if (o.batch_size) set("refinement.batch_size", *o.batch_size);
  if (o.repeats) set("refinement.eval_repeats", *o.repeats);
  if (o.run_dir) set("run_dir", *o.run_dir);
  if (o.backend) {
    const auto kind = *o.backend == "http" ? "http_chat" : "scripted";
    set("refinement.scorer.backend", kind);
    if (own_refiner) set("refinement.refiner.backend", kind);
  }
  if (o.fixture) {
    // Paths given on the command line are relative to the working directory.
    const auto abs = fs::absolute(*o.fixture).lexically_normal().string();
    set("refinement.scorer.fixture_path", abs);
    if (own_refiner) set("refinement.refiner.fixture_path", abs);
  }
  CliConfig config;
  config.base_dir = base.base_dir;
  try {
    from_json(doc, config);
  } catch (const json::exception& e) {
    throw ConfigError(std::string("invalid config after overrides: ") + e.what());
  }
  config.task.scale.validate();
  return config;
}

ModelConfig resolved_model(const CliConfig& c, ModelConfig m) {
  if (!m.fixture_path.empty()) m.fixture_path = c.resolve(m.fixture_path).string();
  if (!m.audit_dir.empty()) m.audit_dir = c.resolve(m.audit_dir).string();
  return m;
}

PromptTemplates load_templates(const CliConfig& c) {
  auto path = [&](const std::optional<std::string>& p) -> std::optional<fs::path> {
    if (!p) return std::nullopt;
    const auto r = c.resolve(*p);
    if (!fs::exists(r)) throw ConfigError("template file not found: " + r.string());
    return r;
  };
  return PromptTemplates::load(path(c.templates.scoring), path(c.templates.refinement),
                               path(c.templates.example_format));
}

Engine make_engine(const CliConfig& c) {
  auto cfg = c.refinement;
  cfg.scorer = resolved_model(c, cfg.scorer);
  cfg.refiner = resolved_model(c, cfg.refiner);
  cfg.validate();
  return Engine(cfg, c.task.scale, ModelClient::create(cfg.scorer), ModelClient::create(cfg.refiner),
                load_templates(c));
}

fs::path required_file(const CliConfig& c, const std::string& p, const char* what) {
  const auto r = c.resolve(p);
  if (!fs::exists(r)) throw ConfigError(std::string(what) + " not found: " + r.string());
  return r;
}

fs::path cli_path(const std::string& p, const char* what) {
  const fs::path r(p);
  if (!fs::exists(r)) throw ConfigError(std::string(what) + " not found: " + r.string());
  return r;
}

int cmd_refine(const Overrides& o, std::ostream& out, std::ostream& err) {
  auto config = effective_config(o);
  if (o.rubric_file) config.seed_rubric.file = fs::absolute(*o.rubric_file).string();
  const fs::path run_dir = config.resolve(config.run_dir);

  std::optional<fs::path> seed_file;
  if (config.seed_rubric.kind != SeedRubricKind::simplest) {
    if (!config.seed_rubric.file) {
      throw ConfigError("seed rubric '" + std::string(to_string(config.seed_rubric.kind)) +
                        "' needs --rubric-file or seed_rubric.file");
    }
    seed_file = required_file(config, *config.seed_rubric.file, "seed rubric file");
  }
  const auto seed = seed_rubric(config.seed_rubric.kind, config.task.scale, seed_file);

  const auto records = prepare_corpus(config, run_dir / "splits.jsonl");
  const auto splits = partition(records);
  config.refinement.validate_against(splits);
  auto engine = make_engine(config);

  RunStore store(run_dir, json(config), seed, config.refinement.iterations, config.refinement.trials);
  write_split_manifest(run_dir / "splits.jsonl", records);

  const int verbosity = config.verbosity;
  engine.set_progress([&err, verbosity](const IterationLog& log) {
    if (verbosity <= 0) return;
    err << "trial " << log.trial << " iteration " << log.iteration << ": ";
    if (log.iteration == 0) {
      err << "seed QWK " << fixed(*log.candidate_qwk);
    } else if (log.candidate_qwk) {
      err << "candidate QWK " << fixed(*log.candidate_qwk) << (log.accepted ? " accepted" : " rejected");
    } else {
      err << "failed (" << log.failure.value_or("unknown") << ")";
    }
    err << ", best " << fixed(log.best_qwk_after) << "\n";
  });
  for (int k = 1; k <= config.refinement.trials; ++k) {
    const auto done = store.load_trial(k).size();
    if (done > 0) {
      err << "trial " << k << ": resuming after " << done - 1 << " completed iteration(s)\n";
    }
  }

  const auto record = engine.run_experiment(seed, splits, &store);
  out << "best validation QWK " << fixed(*record.best_qwk) << " (trial " << *record.best_trial << ")\n";
  out << "best rubric: " << (run_dir / "best_rubric.txt").string() << "\n";
  return kExitOk;
}

int cmd_evaluate(const Overrides& o, std::ostream& out, std::ostream&) {
  const auto config = effective_config(o);
  const fs::path run_dir = config.resolve(config.run_dir);
  fs::path rubric_path;
  if (o.rubric_file) {
    rubric_path = cli_path(*o.rubric_file, "rubric file");
  } else {
    rubric_path = run_dir / "best_rubric.txt";
    if (!fs::exists(rubric_path)) throw ConfigError("no --rubric-file and no " + rubric_path.string());
  }
  Rubric rubric;
  rubric.text = read_text(rubric_path);
  rubric.lineage.seed_name = "file";
  rubric.validate();

  const auto records = prepare_corpus(config, run_dir / "splits.jsonl");
  const auto splits = partition(records);
  if (splits.test.empty()) throw ConfigError("test split is empty");
  const auto engine = make_engine(config);
  const auto report = engine.final_evaluation(rubric, splits.test, config.refinement.eval_repeats);

  std::error_code ec;
  fs::create_directories(run_dir, ec);
  if (ec) throw IoError("cannot create " + run_dir.string() + ": " + ec.message());
  {
    std::ofstream f(run_dir / "final_eval.json", std::ios::binary | std::ios::trunc);
    if (!f) throw IoError("cannot write " + (run_dir / "final_eval.json").string());
    f << json(report).dump(2) << "\n";
  }
  out << "qwk mean " << fixed(report.mean_qwk, 3) << " std " << fixed(report.std_qwk, 3) << " over "
      << report.runs.size() << " run(s)\n";
  return kExitOk;
}

int cmd_score(const Overrides& o, const std::string& essay_file, const std::optional<std::string>& prompt_file,
              std::ostream& out, std::ostream& err) {
  const auto config = effective_config(o);
  if (!o.rubric_file) throw ConfigError("score needs --rubric-file");
  Rubric rubric;
  rubric.text = read_text(cli_path(*o.rubric_file, "rubric file"));
  rubric.validate();
  EssayRecord essay;
  essay.essay_id = fs::path(essay_file).stem().string();
  essay.response = sanitize_utf8(read_text(cli_path(essay_file, "essay file")));
  if (prompt_file) essay.essay_prompt = sanitize_utf8(read_text(cli_path(*prompt_file, "prompt file")));

  const auto model = resolved_model(config, config.refinement.scorer);
  const auto client = ModelClient::create(model);
  const auto outcome = score_essay(client, rubric, essay, config.task.scale, config.refinement.parse_retry,
                                   load_templates(config), CallTag{.purpose = CallPurpose::single});
  if (outcome.parse_status != ParseStatus::ok) {
    err << "could not read a score (" << to_string(outcome.parse_status) << ") after " << outcome.attempts
        << " attempt(s); raw output follows\n";
    out << outcome.raw_output << "\n";
    return kExitParse;
  }
  out << "Rationale: " << outcome.rationale << "\n";
  out << "Score: " << *outcome.predicted_score << "\n";
  return kExitOk;
}

int cmd_report(const std::string& dir, const std::optional<std::string>& plot_data, std::ostream& out) {
  const auto record = RunStore::load(dir);
  out << "# Run report: " << dir << "\n\n";
  out << "| trial | status | seed val QWK | best val QWK | accepted | iterations |\n";
  out << "|---|---|---|---|---|---|\n";
  for (const auto& t : record.trials) {
    std::string status;
    const int done = t.logs.empty() ? 0 : static_cast<int>(t.logs.size()) - 1;
    if (t.logs.empty()) {
      status = "not started";
    } else if (!t.complete) {
      status = "in progress";
    } else {
      status = "complete";
    }
    if (!t.logs.empty() && t.acceptances() == 0) status += " (seed rubric retained)";
    out << "| " << t.trial << " | " << status << " | " << (t.logs.empty() ? "-" : fixed(t.seed_qwk)) << " | "
        << (t.logs.empty() ? "-" : fixed(t.best_qwk)) << " | " << t.acceptances() << " | " << done << "/"
        << record.iterations << " |\n";
  }
  out << "\n## Acceptance trace\n\n";
  for (const auto& t : record.trials) {
    out << "- trial " << t.trial << ":";
    if (t.logs.size() <= 1) out << " (no iterations)";
    for (std::size_t i = 1; i < t.logs.size(); ++i) {
      const auto& l = t.logs[i];
      out << " it" << l.iteration << "=";
      if (l.candidate_qwk) {
        out << fixed(*l.candidate_qwk) << (l.accepted ? " accepted" : " rejected");
      } else {
        out << "failed";
      }
      out << (i + 1 < t.logs.size() ? ";" : "");
    }
    out << "\n";
  }
  out << "\n## Selection\n\n";
  if (record.best_trial) {
    out << "Overall best: trial " << *record.best_trial << ", validation QWK " << fixed(*record.best_qwk) << "\n";
  } else {
    out << "Overall best: not available (no completed trial)\n";
  }
  out << "\n## Test evaluation\n\n";
  if (record.final_eval) {
    out << "QWK mean " << fixed(record.final_eval->mean_qwk) << " ± " << fixed(record.final_eval->std_qwk)
        << " over " << record.final_eval->runs.size() << " run(s)\n";
  } else {
    out << "not run\n";
  }
  if (plot_data) {
    std::ofstream csv(*plot_data, std::ios::binary | std::ios::trunc);
    if (!csv) throw IoError("cannot write " + *plot_data);
    csv << "trial,iteration,candidate_qwk,best_qwk,accepted\n";
    for (const auto& t : record.trials) {
      for (const auto& l : t.logs) {
        csv << t.trial << "," << l.iteration << "," << (l.candidate_qwk ? fixed(*l.candidate_qwk, 6) : "") << ","
            << fixed(l.best_qwk_after, 6) << "," << (l.accepted ? 1 : 0) << "\n";
      }
    }
  }
  return kExitOk;
}

}  // namespace

int run_cli(int argc, char** argv, std::ostream& out, std::ostream& err) {
  CLI::App app{"Iterative rubric refinement for LLM essay scoring", "rubric-refine"};
  app.require_subcommand(1);

  Overrides refine_o, eval_o, score_o;
  std::string essay_file;
  std::optional<std::string> prompt_file;
  std::string report_dir;
  std::optional<std::string> plot_data;

  auto* refine = app.add_subcommand("refine", "Run rubric refinement trials and write a run directory");
  add_common(refine, refine_o);
  refine->add_option("--seed-rubric", refine_o.seed_kind, "Seed rubric kind")
      ->check(CLI::IsMember({"simplest", "simplified", "simplified_human", "human"}));
  refine->add_option("--rubric-file", refine_o.rubric_file, "Seed rubric text for simplified/human seeds");
  refine->add_option("--trials", refine_o.trials, "Number of trials");
  refine->add_option("--iterations", refine_o.iterations, "Refinement iterations per trial");
  refine->add_option("--batch-size", refine_o.batch_size, "Mini-batch size");

  auto* evaluate = app.add_subcommand("evaluate", "Score the test split repeatedly with a rubric");
  add_common(evaluate, eval_o);
  evaluate->add_option("--rubric-file", eval_o.rubric_file, "Rubric to evaluate (default: run best)");
  evaluate->add_option("--repeats", eval_o.repeats, "Evaluation repeats");

  auto* score = app.add_subcommand("score", "Score a single essay");
  add_common(score, score_o);
  score->add_option("--rubric-file", score_o.rubric_file, "Rubric text file")->required();
  score->add_option("--essay-file", essay_file, "Essay text file")->required();
  score->add_option("--prompt-file", prompt_file, "Writing task text file");

  auto* report = app.add_subcommand("report", "Summarize a run directory");
  report->add_option("--run-dir", report_dir, "Run directory")->required();
  report->add_option("--plot-data", plot_data, "Write a CSV of the QWK trajectory");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e, out, err);
    return code == 0 ? kExitOk : kExitConfig;
  }

  try {
    if (*refine) return cmd_refine(refine_o, out, err);
    if (*evaluate) return cmd_evaluate(eval_o, out, err);
    if (*score) return cmd_score(score_o, essay_file, prompt_file, out, err);
    if (*report) return cmd_report(report_dir, plot_data, out);
  } catch (const ConfigError& e) {
    err << "configuration error: " << e.what() << "\n";
    return kExitConfig;
  } catch (const IoError& e) {
    err << "io error: " << e.what() << "\n";
    return kExitIo;
  } catch (const DataError& e) {
    err << "data error: " << e.what() << "\n";
    return kExitIo;
  } catch (const BackendError& e) {
    err << "backend error: " << e.what() << "\n";
    return kExitBackend;
  } catch (const nlohmann::json::exception& e) {
    err << "configuration error: " << e.what() << "\n";
    return kExitConfig;
  }
  return kExitConfig;
}

}  // namespace rubricrefine
