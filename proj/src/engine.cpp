#include "rubricrefine/engine.hpp"

#include <algorithm>
#include <atomic>
#include <ctime>
#include <exception>
#include <fstream>
#include <sstream>
#include <thread>

#include "rubricrefine/errors.hpp"

namespace rubricrefine {

namespace fs = std::filesystem;
using nlohmann::json;

std::string utc_timestamp() {
  const auto now = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  std::tm tm{};
  gmtime_r(&now, &tm);
  char buf[32];
  std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", &tm);
  return buf;
}

// ---------------------------------------------------------------------------
// Config

void RefinementConfig::validate() const {
  if (iterations < 1) throw ConfigError("iterations must be >= 1");
  if (batch_size < 1) throw ConfigError("batch_size must be >= 1");
  if (trials < 1) throw ConfigError("trials must be >= 1");
  if (parse_retry < 0) throw ConfigError("parse_retry must be >= 0");
  if (eval_repeats < 1) throw ConfigError("eval_repeats must be >= 1");
  scorer.validate();
  refiner.validate();
}

void RefinementConfig::validate_against(const Splits& splits) const {
  validate();
  if (static_cast<std::size_t>(batch_size) > splits.train.size()) {
    throw ConfigError("batch_size " + std::to_string(batch_size) + " exceeds the train split size " +
                      std::to_string(splits.train.size()));
  }
  if (splits.val.empty()) throw ConfigError("validation split is empty");
}

void to_json(json& j, const RefinementConfig& c) {
  j = json{{"iterations", c.iterations},
           {"batch_size", c.batch_size},
           {"trials", c.trials},
           {"rng_seed", c.rng_seed},
           {"scorer", c.scorer},
           {"refiner", c.refiner},
           {"parse_retry", c.parse_retry},
           {"eval_on_labels", c.eval_on_labels},
           {"eval_repeats", c.eval_repeats}};
}

void from_json(const json& j, RefinementConfig& c) {
  c = RefinementConfig{};
  if (j.contains("iterations")) j.at("iterations").get_to(c.iterations);
  if (j.contains("batch_size")) j.at("batch_size").get_to(c.batch_size);
  if (j.contains("trials")) j.at("trials").get_to(c.trials);
  if (j.contains("rng_seed")) j.at("rng_seed").get_to(c.rng_seed);
  if (j.contains("scorer")) j.at("scorer").get_to(c.scorer);
  if (j.contains("refiner")) {
    j.at("refiner").get_to(c.refiner);
  } else {
    c.refiner = c.scorer;
  }
  if (j.contains("parse_retry")) j.at("parse_retry").get_to(c.parse_retry);
  if (j.contains("eval_on_labels")) j.at("eval_on_labels").get_to(c.eval_on_labels);
  if (j.contains("eval_repeats")) j.at("eval_repeats").get_to(c.eval_repeats);
}

// ---------------------------------------------------------------------------
// Logs

void to_json(json& j, const IterationLog& l) {
  j = json{{"trial", l.trial},
           {"iteration", l.iteration},
           {"batch_essay_ids", l.batch_essay_ids},
           {"feedback", l.feedback},
           {"candidate_rubric", l.candidate_rubric ? json(*l.candidate_rubric) : json(nullptr)},
           {"candidate_qwk", l.candidate_qwk ? json(*l.candidate_qwk) : json(nullptr)},
           {"candidate_report", l.candidate_report ? json(*l.candidate_report) : json(nullptr)},
           {"accepted", l.accepted},
           {"best_qwk_after", l.best_qwk_after},
           {"failure", l.failure ? json(*l.failure) : json(nullptr)},
           {"timestamp", l.timestamp}};
}

void from_json(const json& j, IterationLog& l) {
  l = IterationLog{};
  j.at("trial").get_to(l.trial);
  j.at("iteration").get_to(l.iteration);
  j.at("batch_essay_ids").get_to(l.batch_essay_ids);
  j.at("feedback").get_to(l.feedback);
  if (!j.at("candidate_rubric").is_null()) l.candidate_rubric = j.at("candidate_rubric").get<Rubric>();
  if (!j.at("candidate_qwk").is_null()) l.candidate_qwk = j.at("candidate_qwk").get<double>();
  if (j.contains("candidate_report") && !j.at("candidate_report").is_null()) {
    l.candidate_report = j.at("candidate_report").get<QwkReport>();
  }
  j.at("accepted").get_to(l.accepted);
  j.at("best_qwk_after").get_to(l.best_qwk_after);
  if (!j.at("failure").is_null()) l.failure = j.at("failure").get<std::string>();
  l.timestamp = j.value("timestamp", "");
}

int TrialResult::acceptances() const {
  return static_cast<int>(std::count_if(logs.begin(), logs.end(), [](const IterationLog& l) { return l.accepted; }));
}

json comparable_json(const RunRecord& r) {
  json trials = json::array();
  for (const auto& t : r.trials) {
    json logs = json::array();
    for (const auto& l : t.logs) {
      json lj = l;
      lj.erase("timestamp");
      logs.push_back(std::move(lj));
    }
    trials.push_back({{"trial", t.trial},
                      {"best", t.best},
                      {"best_qwk", t.best_qwk},
                      {"seed_qwk", t.seed_qwk},
                      {"complete", t.complete},
                      {"logs", std::move(logs)}});
  }
  return json{{"config", r.config_snapshot},
              {"seed", r.seed},
              {"trials", std::move(trials)},
              {"best_trial", r.best_trial ? json(*r.best_trial) : json(nullptr)},
              {"best", r.best ? json(*r.best) : json(nullptr)},
              {"best_qwk", r.best_qwk ? json(*r.best_qwk) : json(nullptr)},
              {"final_eval", r.final_eval ? json(*r.final_eval) : json(nullptr)}};
}

// ---------------------------------------------------------------------------
// Run directory

namespace {

std::string read_text(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void write_atomic(const fs::path& path, const std::string& content) {
  const auto tmp = fs::path(path.string() + ".tmp");
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot write " + tmp.string());
    out << content;
    out.flush();
    if (!out) throw IoError("failed writing " + tmp.string());
  }
  std::error_code ec;
  fs::rename(tmp, path, ec);
  if (ec) throw IoError("cannot move " + tmp.string() + " into place: " + ec.message());
}

json read_json(const fs::path& path) {
  const auto text = read_text(path);
  try {
    return json::parse(text);
  } catch (const json::exception& e) {
    throw DataError(path.string() + " is corrupt: " + e.what());
  }
}

/// Parses iterations.jsonl. A torn trailing line is dropped (and the file
/// rewritten when `repair` is set); damage elsewhere is an error.
std::vector<IterationLog> read_iterations(const fs::path& file, bool repair) {
  std::vector<IterationLog> logs;
  if (!fs::exists(file)) return logs;
  const auto text = read_text(file);
  std::vector<std::string> lines;
  std::size_t start = 0;
  while (start < text.size()) {
    auto pos = text.find('\n', start);
    const bool terminated = pos != std::string::npos;
    if (!terminated) pos = text.size();
    lines.push_back(text.substr(start, pos - start) + (terminated ? "\n" : ""));
    start = pos + 1;
  }
  bool torn = false;
  for (std::size_t i = 0; i < lines.size(); ++i) {
    const bool last = i + 1 == lines.size();
    const bool terminated = !lines[i].empty() && lines[i].back() == '\n';
    try {
      if (!terminated) throw DataError("unterminated line");
      logs.push_back(json::parse(lines[i]).get<IterationLog>());
    } catch (const std::exception& e) {
      if (!last) throw DataError(file.string() + " line " + std::to_string(i + 1) + " is corrupt: " + e.what());
      torn = true;
    }
  }
  for (std::size_t i = 0; i < logs.size(); ++i) {
    if (logs[i].iteration != static_cast<int>(i)) {
      throw DataError(file.string() + ": expected iteration " + std::to_string(i) + ", found " +
                      std::to_string(logs[i].iteration));
    }
  }
  if (torn && repair) {
    std::string content;
    for (const auto& l : logs) content += json(l).dump() + "\n";
    write_atomic(file, content);
  }
  return logs;
}

/// Replays persisted logs into the trial's running state.
void restore_best(const Rubric& seed, const std::vector<IterationLog>& logs, Rubric& best, double& best_qwk) {
  best = seed;
  best_qwk = logs.empty() ? 0.0 : logs.front().best_qwk_after;
  for (std::size_t i = 1; i < logs.size(); ++i) {
    if (logs[i].accepted) {
      if (!logs[i].candidate_rubric || !logs[i].candidate_qwk) {
        throw DataError("accepted iteration " + std::to_string(i) + " has no candidate");
      }
      best = *logs[i].candidate_rubric;
      best_qwk = *logs[i].candidate_qwk;
    }
  }
}

}  // namespace

RunStore::RunStore(fs::path dir, const json& config_snapshot, const Rubric& seed, int iterations, int trials)
    : dir_(std::move(dir)) {
  std::error_code ec;
  fs::create_directories(dir_, ec);
  if (ec) throw IoError("cannot create run directory " + dir_.string() + ": " + ec.message());
  const auto run_json = dir_ / "run.json";
  if (fs::exists(run_json)) {
    const auto existing = read_json(run_json);
    if (existing.value("config", json{}) != config_snapshot ||
        existing.value("seed_rubric", json{}).value("text", "") != seed.text) {
      throw ConfigError("run directory " + dir_.string() +
                        " holds a run with a different configuration or seed rubric");
    }
    return;
  }
  const json doc{{"config", config_snapshot},
                 {"seed_rubric", seed},
                 {"iterations", iterations},
                 {"trials", trials},
                 {"created_at", utc_timestamp()}};
  write_atomic(run_json, doc.dump(2) + "\n");
}

fs::path RunStore::trial_dir(int trial) const { return dir_ / ("trial-" + std::to_string(trial)); }

std::vector<IterationLog> RunStore::load_trial(int trial) const {
  return read_iterations(trial_dir(trial) / "iterations.jsonl", true);
}

void RunStore::append(const IterationLog& log) const {
  const auto dir = trial_dir(log.trial);
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) throw IoError("cannot create " + dir.string() + ": " + ec.message());
  std::ofstream out(dir / "iterations.jsonl", std::ios::app | std::ios::binary);
  if (!out) throw IoError("cannot append to " + (dir / "iterations.jsonl").string());
  out << json(log).dump() << '\n';
  out.flush();
  if (!out) throw IoError("failed writing " + (dir / "iterations.jsonl").string());
}

void RunStore::write_trial_best(int trial, const Rubric& best) const {
  write_atomic(trial_dir(trial) / "best_rubric.txt", best.text);
}

void RunStore::write_best(const Rubric& best) const { write_atomic(dir_ / "best_rubric.txt", best.text); }

void RunStore::write_final_eval(const AggregateReport& report) const {
  write_atomic(dir_ / "final_eval.json", json(report).dump(2) + "\n");
}

RunRecord RunStore::load(const fs::path& dir) {
  const auto run_json = dir / "run.json";
  if (!fs::is_directory(dir) || !fs::exists(run_json)) {
    throw IoError("not a run directory (no run.json): " + dir.string());
  }
  const auto doc = read_json(run_json);
  RunRecord record;
  try {
    record.config_snapshot = doc.at("config");
    record.seed = doc.at("seed_rubric").get<Rubric>();
    record.iterations = doc.at("iterations").get<int>();
    record.trials_planned = doc.at("trials").get<int>();
    record.created_at = doc.value("created_at", "");
  } catch (const json::exception& e) {
    throw DataError(run_json.string() + " is missing fields: " + e.what());
  }
  for (int k = 1; k <= record.trials_planned; ++k) {
    TrialResult trial;
    trial.trial = k;
    trial.logs = read_iterations(dir / ("trial-" + std::to_string(k)) / "iterations.jsonl", false);
    restore_best(record.seed, trial.logs, trial.best, trial.best_qwk);
    trial.seed_qwk = trial.logs.empty() ? 0.0 : trial.logs.front().best_qwk_after;
    trial.complete = static_cast<int>(trial.logs.size()) == record.iterations + 1;
    record.trials.push_back(std::move(trial));
  }
  for (const auto& t : record.trials) {
    if (!t.complete) continue;
    if (!record.best_qwk || t.best_qwk > *record.best_qwk) {
      record.best_qwk = t.best_qwk;
      record.best_trial = t.trial;
      record.best = t.best;
    }
  }
  if (fs::exists(dir / "final_eval.json")) {
    try {
      record.final_eval = read_json(dir / "final_eval.json").get<AggregateReport>();
    } catch (const json::exception& e) {
      throw DataError("final_eval.json is corrupt: " + std::string(e.what()));
    }
  }
  return record;
}

// ---------------------------------------------------------------------------
// Engine

Engine::Engine(RefinementConfig config, ScoreScale scale, ModelClient scorer, ModelClient refiner,
               PromptTemplates templates)
    : config_(std::move(config)),
      scale_(std::move(scale)),
      scorer_(std::move(scorer)),
      refiner_(std::move(refiner)),
      templates_(std::move(templates)) {
  config_.validate();
  scale_.validate();
  templates_.validate();
  if (config_.eval_on_labels && !scale_.has_labels()) {
    throw ConfigError("eval_on_labels needs a scale with a label mapping");
  }
}

Rng Engine::iteration_rng(std::uint64_t seed, int trial, int iteration) {
  return Rng(mix_seed({seed, static_cast<std::uint64_t>(trial), static_cast<std::uint64_t>(iteration)}));
}

std::vector<ScoringOutcome> Engine::score_all(const Rubric& rubric, std::span<const EssayRecord> essays,
                                              const CallTag& base_tag) const {
  std::vector<ScoringOutcome> outcomes(essays.size());
  const auto workers = std::min<std::size_t>(static_cast<std::size_t>(std::max(1, scorer_.config().concurrency)),
                                             essays.size());
  std::atomic<std::size_t> next{0};
  std::exception_ptr error;
  std::mutex error_mutex;
  auto work = [&] {
    for (;;) {
      const auto i = next.fetch_add(1);
      if (i >= essays.size()) return;
      try {
        CallTag tag = base_tag;
        tag.essay_id = essays[i].essay_id;
        outcomes[i] = score_essay(scorer_, rubric, essays[i], scale_, config_.parse_retry, templates_, tag);
      } catch (...) {
        std::lock_guard lock(error_mutex);
        if (!error) error = std::current_exception();
        next.store(essays.size());
      }
    }
  };
  if (workers <= 1) {
    work();
  } else {
    std::vector<std::jthread> pool;
    pool.reserve(workers);
    for (std::size_t w = 0; w < workers; ++w) pool.emplace_back(work);
  }
  if (error) std::rethrow_exception(error);
  return outcomes;
}

QwkReport Engine::evaluate_rubric(const Rubric& rubric, std::span<const EssayRecord> essays,
                                  CallTag base_tag) const {
  if (essays.empty()) throw ConfigError("cannot evaluate a rubric on zero essays");
  const auto outcomes = score_all(rubric, essays, base_tag);
  if (config_.eval_on_labels) {
    std::vector<std::optional<std::string>> predicted(essays.size());
    std::vector<std::optional<std::string>> human(essays.size());
    for (std::size_t i = 0; i < essays.size(); ++i) {
      if (outcomes[i].predicted_score) predicted[i] = map_score(*outcomes[i].predicted_score, scale_);
      human[i] = essays[i].human_label ? *essays[i].human_label : map_score(essays[i].human_score, scale_);
    }
    const auto labels = scale_.ordered_labels();
    return qwk_on_labels_with_exclusions(predicted, human, labels);
  }
  std::vector<std::optional<int>> predicted(essays.size());
  std::vector<std::optional<int>> human(essays.size());
  for (std::size_t i = 0; i < essays.size(); ++i) {
    predicted[i] = outcomes[i].predicted_score;
    human[i] = essays[i].human_score;
  }
  return qwk_with_exclusions(predicted, human, scale_);
}

RefineStep Engine::refine_once(const Rubric& best, std::span<const EssayRecord> train, Rng& rng, int trial,
                               int iteration) const {
  const auto b = static_cast<std::size_t>(config_.batch_size);
  if (train.size() < b) {
    throw ConfigError("batch_size " + std::to_string(b) + " exceeds the train split size " +
                      std::to_string(train.size()));
  }
  RefineStep step;
  std::vector<EssayRecord> batch;
  batch.reserve(b);
  for (auto idx : sample_indices(rng, train.size(), b)) {
    batch.push_back(train[idx]);
    step.batch_essay_ids.push_back(train[idx].essay_id);
  }

  const auto outcomes = score_all(best, batch, CallTag{.purpose = CallPurpose::batch, .trial = trial, .iteration = iteration});
  for (std::size_t i = 0; i < batch.size(); ++i) {
    const auto& o = outcomes[i];
    if (o.parse_status != ParseStatus::ok || !o.predicted_score) continue;
    step.feedback.push_back(FeedbackExample{batch[i].essay_prompt, batch[i].response, o.rationale,
                                            *o.predicted_score, batch[i].human_score, batch[i].human_label});
  }
  if (step.feedback.empty()) {
    step.failure = "empty feedback";
    return step;
  }

  const auto prompt = render_refinement_prompt(best, step.feedback, templates_);
  const auto completion = refiner_.complete(prompt, CallTag{.purpose = CallPurpose::refinement, .trial = trial, .iteration = iteration});
  if (!completion.ok) {
    step.failure = "refiner transport failure: " + completion.error;
    return step;
  }
  try {
    Rubric candidate;
    candidate.text = extract_rubric(completion.text);
    candidate.lineage = RubricLineage{best.lineage.seed_name, trial, iteration, best.hash()};
    step.candidate = std::move(candidate);
  } catch (const DataError& e) {
    step.failure = std::string("rubric extraction failed: ") + e.what();
  }
  return step;
}

TrialResult Engine::run_trial(const Rubric& seed, const Splits& data, int trial_index, const RunStore* store) const {
  config_.validate_against(data);
  seed.validate();
  TrialResult result;
  result.trial = trial_index;
  if (store) result.logs = store->load_trial(trial_index);
  if (static_cast<int>(result.logs.size()) > config_.iterations + 1) {
    throw DataError("trial " + std::to_string(trial_index) + " has more iterations on disk than configured");
  }

  auto record = [&](IterationLog log) {
    log.timestamp = utc_timestamp();
    if (store) store->append(log);
    if (progress_) progress_(log);
    result.logs.push_back(std::move(log));
  };

  if (result.logs.empty()) {
    const auto report = evaluate_rubric(seed, data.val, CallTag{.purpose = CallPurpose::validation, .trial = trial_index, .iteration = 0});
    IterationLog log;
    log.trial = trial_index;
    log.iteration = 0;
    log.candidate_rubric = seed;
    log.candidate_qwk = report.qwk;
    log.candidate_report = report;
    log.best_qwk_after = report.qwk;
    record(std::move(log));
  } else {
    result.resumed_iterations = static_cast<int>(result.logs.size()) - 1;
  }

  Rubric best;
  double best_qwk = 0.0;
  restore_best(seed, result.logs, best, best_qwk);
  result.seed_qwk = result.logs.front().best_qwk_after;

  for (int t = static_cast<int>(result.logs.size()); t <= config_.iterations; ++t) {
    auto rng = iteration_rng(config_.rng_seed, trial_index, t);
    auto step = refine_once(best, data.train, rng, trial_index, t);
    IterationLog log;
    log.trial = trial_index;
    log.iteration = t;
    log.batch_essay_ids = std::move(step.batch_essay_ids);
    log.feedback = std::move(step.feedback);
    log.failure = std::move(step.failure);
    if (step.candidate) {
      const auto report = evaluate_rubric(*step.candidate, data.val, CallTag{.purpose = CallPurpose::validation, .trial = trial_index, .iteration = t});
      log.candidate_qwk = report.qwk;
      log.candidate_report = report;
      if (report.qwk > best_qwk) {
        best = *step.candidate;
        best_qwk = report.qwk;
        log.accepted = true;
      }
      log.candidate_rubric = std::move(step.candidate);
    }
    log.best_qwk_after = best_qwk;
    record(std::move(log));
  }

  result.best = best;
  result.best_qwk = best_qwk;
  result.complete = true;
  if (store) store->write_trial_best(trial_index, best);
  return result;
}

RunRecord Engine::run_experiment(const Rubric& seed, const Splits& data, RunStore* store) const {
  config_.validate_against(data);
  RunRecord record;
  record.config_snapshot = config_;
  record.seed = seed;
  record.iterations = config_.iterations;
  record.trials_planned = config_.trials;
  record.created_at = utc_timestamp();
  for (int k = 1; k <= config_.trials; ++k) {
    record.trials.push_back(run_trial(seed, data, k, store));
    const auto& t = record.trials.back();
    if (!record.best_qwk || t.best_qwk > *record.best_qwk) {
      record.best_qwk = t.best_qwk;
      record.best_trial = t.trial;
      record.best = t.best;
    }
  }
  if (store) {
    store->write_best(*record.best);
    const auto persisted = RunStore::load(store->dir());
    record.config_snapshot = persisted.config_snapshot;
    record.created_at = persisted.created_at;
    record.final_eval = persisted.final_eval;
  }
  return record;
}

AggregateReport Engine::final_evaluation(const Rubric& rubric, std::span<const EssayRecord> test, int repeats) const {
  if (repeats < 1) throw ConfigError("repeats must be >= 1");
  std::vector<QwkReport> runs;
  for (int r = 1; r <= repeats; ++r) {
    runs.push_back(evaluate_rubric(rubric, test, CallTag{.purpose = CallPurpose::test, .repeat = r}));
  }
  return aggregate(runs);
}

}  // namespace rubricrefine
