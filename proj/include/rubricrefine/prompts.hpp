#pragma once

#include <filesystem>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <string_view>

#include <nlohmann/json.hpp>

#include "rubricrefine/dataset.hpp"

namespace rubricrefine {

struct RubricLineage {
  std::string seed_name;
  int trial = 0;
  int iteration = 0;  // 0 for seeds
  std::optional<std::string> parent_hash;

  bool operator==(const RubricLineage&) const = default;
};

struct Rubric {
  std::string text;
  RubricLineage lineage;

  std::string hash() const;
  /// Throws ConfigError on empty text or inconsistent lineage.
  void validate() const;

  bool operator==(const Rubric&) const = default;
};

enum class SeedRubricKind { simplest, simplified_human, human };

SeedRubricKind seed_kind_from_string(std::string_view name);
std::string_view to_string(SeedRubricKind kind);

/// (rationale, predicted score, true score, essay prompt, response) tuple
/// shown to the refiner.
struct FeedbackExample {
  std::string essay_prompt;
  std::string response;
  std::string rationale;
  int predicted_score = 0;
  int true_score = 0;
  /// When the human label is only known as a level, it is shown instead of
  /// true_score.
  std::optional<std::string> true_label;

  bool operator==(const FeedbackExample&) const = default;
};

enum class TemplateName { scoring, refinement, example_format };

struct PromptTemplates {
  std::string scoring;
  std::string refinement;
  std::string example_format;

  /// The stock templates.
  static PromptTemplates defaults();

  /// Defaults with any provided file replacing the matching template.
  static PromptTemplates load(const std::optional<std::filesystem::path>& scoring,
                              const std::optional<std::filesystem::path>& refinement,
                              const std::optional<std::filesystem::path>& example_format);

  /// Checks that each body carries its required placeholders.
  void validate() const;
};

/// Literal `{name}` substitution in one pass over `body`; values are never
/// rescanned. Throws ConfigError for a placeholder with no value.
std::string render_template(std::string_view body, const std::map<std::string, std::string>& values);

std::string render_scoring_prompt(const Rubric& rubric, const EssayRecord& essay,
                                  const PromptTemplates& templates = PromptTemplates::defaults());

std::string render_example_block(const FeedbackExample& fb,
                                 const PromptTemplates& templates = PromptTemplates::defaults());

std::string render_refinement_prompt(const Rubric& current, std::span<const FeedbackExample> batch,
                                     const PromptTemplates& templates = PromptTemplates::defaults());

/// Contents of the last complete ``` fenced block, fence language tag
/// dropped. Throws DataError when there is no usable block.
std::string extract_rubric(std::string_view model_output);

/// Simplest seeds are rendered from the scale; other kinds read `user_file`
/// verbatim.
Rubric seed_rubric(SeedRubricKind kind, const ScoreScale& scale,
                   const std::optional<std::filesystem::path>& user_file = std::nullopt);

std::string simplest_rubric_text(const ScoreScale& scale);

void to_json(nlohmann::json& j, const Rubric& rubric);
void from_json(const nlohmann::json& j, Rubric& rubric);
void to_json(nlohmann::json& j, const FeedbackExample& fb);
void from_json(const nlohmann::json& j, FeedbackExample& fb);

}  // namespace rubricrefine
