#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "rubricrefine/dataset.hpp"
#include "rubricrefine/metrics.hpp"
#include "rubricrefine/model_client.hpp"
#include "rubricrefine/prompts.hpp"
#include "rubricrefine/random.hpp"

namespace rubricrefine {

struct RefinementConfig {
  int iterations = 10;
  int batch_size = 10;
  int trials = 3;
  std::uint64_t rng_seed = 0;
  ModelConfig scorer;
  ModelConfig refiner;
  int parse_retry = 2;
  /// Compare label buckets instead of raw scores (TOEFL11-style tasks).
  bool eval_on_labels = false;
  /// Test-set evaluation repeats.
  int eval_repeats = 3;

  void validate() const;
  /// Also checks batch_size against the train split size.
  void validate_against(const Splits& splits) const;

  bool operator==(const RefinementConfig&) const = default;
};

void to_json(nlohmann::json& j, const RefinementConfig& config);
void from_json(const nlohmann::json& j, RefinementConfig& config);

/// One line of trial-<k>/iterations.jsonl. Iteration 0 records the seed
/// rubric's validation score; iterations 1..T are refinement attempts.
struct IterationLog {
  int trial = 1;
  int iteration = 0;
  std::vector<std::string> batch_essay_ids;
  std::vector<FeedbackExample> feedback;
  std::optional<Rubric> candidate_rubric;
  std::optional<double> candidate_qwk;
  std::optional<QwkReport> candidate_report;
  bool accepted = false;
  double best_qwk_after = 0.0;
  std::optional<std::string> failure;
  std::string timestamp;
};

void to_json(nlohmann::json& j, const IterationLog& log);
void from_json(const nlohmann::json& j, IterationLog& log);

struct TrialResult {
  int trial = 1;
  Rubric best;
  double best_qwk = 0.0;
  double seed_qwk = 0.0;
  std::vector<IterationLog> logs;  // includes the iteration-0 seed entry
  bool complete = false;
  /// Iterations restored from disk rather than executed.
  int resumed_iterations = 0;

  int acceptances() const;
};

struct RunRecord {
  nlohmann::json config_snapshot;
  Rubric seed;
  int iterations = 0;
  int trials_planned = 0;
  std::vector<TrialResult> trials;
  std::optional<int> best_trial;
  std::optional<Rubric> best;
  std::optional<double> best_qwk;
  std::optional<AggregateReport> final_eval;
  std::string created_at;
};

/// Drops timestamps so two records can be compared for reproducibility.
nlohmann::json comparable_json(const RunRecord& record);

/// On-disk layout of one experiment:
///   run.json, splits.jsonl, best_rubric.txt, final_eval.json,
///   trial-<k>/iterations.jsonl, trial-<k>/best_rubric.txt
class RunStore {
 public:
  /// Creates the directory and run.json, or verifies that an existing
  /// run.json carries the same config snapshot (ConfigError otherwise).
  RunStore(std::filesystem::path dir, const nlohmann::json& config_snapshot, const Rubric& seed,
           int iterations, int trials);

  const std::filesystem::path& dir() const { return dir_; }
  std::filesystem::path trial_dir(int trial) const;

  /// Completed iteration logs for a trial. A torn final line from an
  /// interrupted write is discarded.
  std::vector<IterationLog> load_trial(int trial) const;
  void append(const IterationLog& log) const;
  void write_trial_best(int trial, const Rubric& best) const;
  void write_best(const Rubric& best) const;
  void write_final_eval(const AggregateReport& report) const;

  /// Reconstructs everything persisted so far. Throws IoError/DataError
  /// for a missing or corrupt directory.
  static RunRecord load(const std::filesystem::path& dir);

 private:
  std::filesystem::path dir_;
};

struct RefineStep {
  std::optional<Rubric> candidate;
  std::vector<FeedbackExample> feedback;
  std::vector<std::string> batch_essay_ids;
  std::optional<std::string> failure;
};

using ProgressFn = std::function<void(const IterationLog&)>;

/// Iterative rubric refinement with validation-QWK hill climbing.
class Engine {
 public:
  Engine(RefinementConfig config, ScoreScale scale, ModelClient scorer, ModelClient refiner,
         PromptTemplates templates = PromptTemplates::defaults());

  /// Scores every essay (concurrently, bounded by the scorer's limit) and
  /// returns QWK against the human scores. Parse failures are excluded.
  QwkReport evaluate_rubric(const Rubric& rubric, std::span<const EssayRecord> essays,
                            CallTag base_tag = {.purpose = CallPurpose::validation}) const;

  /// Samples a mini-batch, scores it under `best`, and asks the refiner for
  /// a new rubric.
  RefineStep refine_once(const Rubric& best, std::span<const EssayRecord> train, Rng& rng,
                         int trial = 1, int iteration = 1) const;

  /// One trial of T refinement iterations. With a store, completed
  /// iterations are appended as they finish and a partial trial resumes
  /// where it stopped.
  TrialResult run_trial(const Rubric& seed, const Splits& data, int trial_index,
                        const RunStore* store = nullptr) const;

  /// All trials, then the overall best by validation QWK (ties go to the
  /// lowest trial index).
  RunRecord run_experiment(const Rubric& seed, const Splits& data, RunStore* store = nullptr) const;

  /// Evaluates `rubric` on the test split `repeats` times.
  AggregateReport final_evaluation(const Rubric& rubric, std::span<const EssayRecord> test,
                                   int repeats) const;

  void set_progress(ProgressFn fn) { progress_ = std::move(fn); }
  /// Per-iteration batch RNG, a pure function of (seed, trial, iteration).
  static Rng iteration_rng(std::uint64_t seed, int trial, int iteration);

  const RefinementConfig& config() const { return config_; }
  const ScoreScale& scale() const { return scale_; }

 private:
  std::vector<ScoringOutcome> score_all(const Rubric& rubric, std::span<const EssayRecord> essays,
                                        const CallTag& base_tag) const;

  RefinementConfig config_;
  ScoreScale scale_;
  ModelClient scorer_;
  ModelClient refiner_;
  PromptTemplates templates_;
  ProgressFn progress_;
};

/// UTC time as ISO-8601.
std::string utc_timestamp();

}  // namespace rubricrefine
