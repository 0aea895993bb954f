#include "rubricrefine/prompts.hpp"

#include <fstream>
#include <sstream>
#include <vector>

#include "rubricrefine/errors.hpp"
#include "rubricrefine/random.hpp"

namespace rubricrefine {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

constexpr std::string_view kScoringTemplate =
    R"(You are a rater for writing responses on a high-stakes English language exam for second language learners. You will be provided with a prompt and the test-taker's response. Your rating should be based on the rubric below, following the specified format.

# Essay Prompt
"""{essay_prompt}"""
# Response
"""{response}"""
# Rubric
"""{rubric}"""
# Output format:
Rationale: [<<<Your rationale here.>>>]
Rating: [<<<Your rating here.>>>])";

constexpr std::string_view kRefinementTemplate =
    R"(I provided an assistant with the following rubrics to perform an essay grading task for me:
```
{current_rubric}
```

The following are examples of different inputs to the assistant, the rationales for scores from the assistant, the scores from the assistant, and desired scores which I would like the assistant to achieve.
```
{examples}
```
Please analyze the rubrics and the examples, and then propose new rubrics that will help the assistant to perform better on this task.

Read all the assistant responses and reflect on the rationales given by the assistant. Identify any patterns or common themes in the rationales that led to correct or incorrect ratings. Consider how the rubrics could be adjusted to better align with these patterns by providing clearer/detailed guidelines for the assistant to follow.

Provide the new rubrics within ``` blocks.)";

constexpr std::string_view kExampleTemplate = R"(Input for the assistant:
Essay Prompt:
"""{essay_prompt}"""
Essay to be rated:
"""{response}"""
Rationale from the assistant:
"""{rationale}"""
Score from the assistant:
"""{rating}"""
Desired score:
"""{desired_rating}""")";

constexpr std::string_view kRationaleFormatLine = "Rationale: [<<<Your rationale here.>>>]";
constexpr std::string_view kRatingFormatLine = "Rating: [<<<Your rating here.>>>]";

std::string read_text(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

bool is_placeholder_char(char c) { return (c >= 'a' && c <= 'z') || c == '_'; }

void require(std::string_view body, std::string_view what, std::initializer_list<std::string_view> needles) {
  for (auto n : needles) {
    if (body.find(n) == std::string_view::npos) {
      throw ConfigError(std::string(what) + " template is missing " + std::string(n));
    }
  }
}

}  // namespace

std::string Rubric::hash() const { return content_hash(text); }

void Rubric::validate() const {
  if (text.empty()) throw ConfigError("rubric text is empty");
  if ((lineage.iteration == 0) != !lineage.parent_hash.has_value()) {
    throw ConfigError("rubric lineage: iteration 0 must have no parent and vice versa");
  }
}

SeedRubricKind seed_kind_from_string(std::string_view name) {
  if (name == "simplest") return SeedRubricKind::simplest;
  if (name == "simplified" || name == "simplified_human") return SeedRubricKind::simplified_human;
  if (name == "human") return SeedRubricKind::human;
  throw ConfigError("unknown seed rubric kind '" + std::string(name) + "'");
}

std::string_view to_string(SeedRubricKind kind) {
  switch (kind) {
    case SeedRubricKind::simplest: return "simplest";
    case SeedRubricKind::simplified_human: return "simplified_human";
    case SeedRubricKind::human: return "human";
  }
  return "simplest";
}

PromptTemplates PromptTemplates::defaults() {
  return {std::string(kScoringTemplate), std::string(kRefinementTemplate),
          std::string(kExampleTemplate)};
}

PromptTemplates PromptTemplates::load(const std::optional<fs::path>& scoring,
                                      const std::optional<fs::path>& refinement,
                                      const std::optional<fs::path>& example_format) {
  auto t = defaults();
  if (scoring) t.scoring = read_text(*scoring);
  if (refinement) t.refinement = read_text(*refinement);
  if (example_format) t.example_format = read_text(*example_format);
  t.validate();
  return t;
}

void PromptTemplates::validate() const {
  require(scoring, "scoring",
          {"{essay_prompt}", "{response}", "{rubric}", kRationaleFormatLine, kRatingFormatLine});
  require(refinement, "refinement", {"{current_rubric}", "{examples}"});
  require(example_format, "example_format",
          {"{essay_prompt}", "{response}", "{rationale}", "{rating}", "{desired_rating}"});
}

std::string render_template(std::string_view body, const std::map<std::string, std::string>& values) {
  std::string out;
  out.reserve(body.size());
  std::size_t i = 0;
  while (i < body.size()) {
    if (body[i] == '{') {
      std::size_t j = i + 1;
      while (j < body.size() && is_placeholder_char(body[j])) ++j;
      if (j > i + 1 && j < body.size() && body[j] == '}') {
        const std::string name(body.substr(i + 1, j - i - 1));
        const auto it = values.find(name);
        if (it == values.end()) throw ConfigError("unresolved placeholder {" + name + "}");
        out += it->second;
        i = j + 1;
        continue;
      }
    }
    out.push_back(body[i]);
    ++i;
  }
  return out;
}

std::string render_scoring_prompt(const Rubric& rubric, const EssayRecord& essay,
                                  const PromptTemplates& templates) {
  rubric.validate();
  return render_template(templates.scoring, {{"essay_prompt", essay.essay_prompt},
                                             {"response", essay.response},
                                             {"rubric", rubric.text}});
}

std::string render_example_block(const FeedbackExample& fb, const PromptTemplates& templates) {
  return render_template(
      templates.example_format,
      {{"essay_prompt", fb.essay_prompt},
       {"response", fb.response},
       {"rationale", fb.rationale},
       {"rating", std::to_string(fb.predicted_score)},
       {"desired_rating", fb.true_label ? *fb.true_label : std::to_string(fb.true_score)}});
}

std::string render_refinement_prompt(const Rubric& current, std::span<const FeedbackExample> batch,
                                     const PromptTemplates& templates) {
  current.validate();
  if (batch.empty()) throw ConfigError("refinement prompt needs at least one feedback example");
  std::string examples;
  for (std::size_t i = 0; i < batch.size(); ++i) {
    if (i > 0) examples += "\n\n";
    examples += render_example_block(batch[i], templates);
  }
  return render_template(templates.refinement,
                         {{"current_rubric", current.text}, {"examples", examples}});
}

std::string extract_rubric(std::string_view output) {
  // Line-oriented scan: a fence is a line whose first non-blank characters
  // are ```; text after an opening fence is a language tag and is dropped.
  std::vector<std::string_view> lines;
  std::size_t start = 0;
  while (start <= output.size()) {
    auto pos = output.find('\n', start);
    if (pos == std::string_view::npos) pos = output.size();
    auto line = output.substr(start, pos - start);
    if (!line.empty() && line.back() == '\r') line.remove_suffix(1);
    lines.push_back(line);
    start = pos + 1;
  }
  auto fence = [](std::string_view line) {
    const auto b = line.find_first_not_of(" \t");
    return b != std::string_view::npos && line.substr(b).starts_with("```");
  };

  std::optional<std::string> last;
  bool inside = false;
  std::string current;
  bool first_line = true;
  for (auto line : lines) {
    if (fence(line)) {
      if (!inside) {
        inside = true;
        current.clear();
        first_line = true;
      } else {
        inside = false;
        last = current;
      }
      continue;
    }
    if (inside) {
      if (!first_line) current.push_back('\n');
      current.append(line);
      first_line = false;
    }
  }
  if (!last) throw DataError("model output contains no complete ``` fenced block");
  const auto b = last->find_first_not_of(" \t\r\n");
  if (b == std::string::npos) throw DataError("last fenced block in model output is empty");
  const auto e = last->find_last_not_of(" \t\r\n");
  return last->substr(b, e - b + 1);
}

std::string simplest_rubric_text(const ScoreScale& scale) {
  return "Based on the response's content, rate the response on a scale of " +
         std::to_string(scale.min) + " to " + std::to_string(scale.max) + ".";
}

Rubric seed_rubric(SeedRubricKind kind, const ScoreScale& scale,
                   const std::optional<fs::path>& user_file) {
  Rubric rubric;
  rubric.lineage.seed_name = std::string(to_string(kind));
  if (kind == SeedRubricKind::simplest) {
    scale.validate();
    rubric.text = simplest_rubric_text(scale);
  } else {
    if (!user_file) {
      throw ConfigError("seed rubric '" + std::string(to_string(kind)) +
                        "' needs a rubric file (--rubric-file)");
    }
    rubric.text = read_text(*user_file);
  }
  rubric.validate();
  return rubric;
}

void to_json(json& j, const Rubric& r) {
  j = json{{"text", r.text},
           {"hash", r.hash()},
           {"seed_name", r.lineage.seed_name},
           {"trial", r.lineage.trial},
           {"iteration", r.lineage.iteration},
           {"parent_hash", r.lineage.parent_hash ? json(*r.lineage.parent_hash) : json(nullptr)}};
}

void from_json(const json& j, Rubric& r) {
  r = Rubric{};
  j.at("text").get_to(r.text);
  r.lineage.seed_name = j.value("seed_name", "");
  r.lineage.trial = j.value("trial", 0);
  r.lineage.iteration = j.value("iteration", 0);
  if (j.contains("parent_hash") && !j.at("parent_hash").is_null()) {
    r.lineage.parent_hash = j.at("parent_hash").get<std::string>();
  }
}

void to_json(json& j, const FeedbackExample& fb) {
  j = json{{"essay_prompt", fb.essay_prompt},
           {"response", fb.response},
           {"rationale", fb.rationale},
           {"predicted_score", fb.predicted_score},
           {"true_score", fb.true_score}};
  if (fb.true_label) j["true_label"] = *fb.true_label;
}

void from_json(const json& j, FeedbackExample& fb) {
  fb = FeedbackExample{};
  j.at("essay_prompt").get_to(fb.essay_prompt);
  j.at("response").get_to(fb.response);
  j.at("rationale").get_to(fb.rationale);
  j.at("predicted_score").get_to(fb.predicted_score);
  j.at("true_score").get_to(fb.true_score);
  if (j.contains("true_label")) fb.true_label = j.at("true_label").get<std::string>();
}

}  // namespace rubricrefine
