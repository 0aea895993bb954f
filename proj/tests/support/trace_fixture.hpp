#pragma once

// Scripted fixtures with hand-computable validation QWKs.
//
// The validation set holds 20 essays, ten scored 2 and ten scored 5. A
// rubric scores every essay correctly except the first `flips`, which get
// the other value. With only two categories in play and balanced human
// marginals, kappa reduces to 1 - flips / 10 regardless of which essays
// flip, so a rubric's validation QWK is fixed by its flip count.

#include <string>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "rubricrefine/dataset.hpp"
#include "rubricrefine/random.hpp"
#include "support/synthetic.hpp"

namespace testing_support {

inline std::vector<rubricrefine::EssayRecord> trace_val_essays() {
  std::vector<rubricrefine::EssayRecord> out;
  for (int i = 0; i < 20; ++i) {
    rubricrefine::EssayRecord r;
    r.essay_id = "v" + std::to_string(i);
    r.prompt_id = "1";
    r.essay_prompt = "Write a letter to your local newspaper about computers.";
    r.human_score = i % 2 == 0 ? 2 : 5;
    r.response = essay_text(r.human_score, 100 + i);
    out.push_back(r);
  }
  return out;
}

inline double trace_qwk(int flips) { return 1.0 - flips / 10.0; }

struct TraceRubric {
  std::string text;
  int flips = 0;
};

/// Scorer and refiner in one fixture. Batch scoring echoes the human score
/// through the length rule; validation scoring follows each rubric's flip
/// count; the refiner answers iteration t with refiner_texts[t - 1] (the
/// last entry repeats).
inline nlohmann::json trace_fixture(const std::vector<TraceRubric>& rubrics,
                                    const std::vector<std::string>& refiner_texts) {
  using nlohmann::json;
  json routes = json::array();
  routes.push_back({{"match", {{"purpose", "batch"}}},
                    {"score_rule", {{"words_per_point", kWordsPerPoint}, {"offset", 0}, {"min", 1}, {"max", 6}}}});
  std::vector<std::string> fenced;
  for (const auto& t : refiner_texts) fenced.push_back("Here is the revision.\n```\n" + t + "\n```");
  routes.push_back({{"match", {{"purpose", "refinement"}}}, {"replies", fenced}, {"cursor", "iteration"}});

  const auto val = trace_val_essays();
  for (const auto& r : rubrics) {
    const auto hash = rubricrefine::content_hash(r.text);
    for (std::size_t i = 0; i < val.size(); ++i) {
      const int human = val[i].human_score;
      const int predicted = static_cast<int>(i) < r.flips ? 7 - human : human;
      routes.push_back({{"match", {{"rubric_hash", hash}, {"prompt_contains", "\"\"\"" + val[i].response + "\"\"\""}}},
                        {"replies", json::array({"Rationale: [scripted]\nRating: [" + std::to_string(predicted) + "]"})}});
    }
  }
  return json{{"seed", 11}, {"routes", routes}};
}

}  // namespace testing_support
