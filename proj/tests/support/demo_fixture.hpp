#pragma once

// A rubric-conditional scripted model for end-to-end runs over synthetic
// essays: any rubric mentioning kImprovedMarker scores by length with no
// noise (perfect agreement), every other rubric scores by length with seeded
// noise, and the refiner always proposes the improved rubric.

#include <string>

#include <nlohmann/json.hpp>

#include "support/synthetic.hpp"

namespace testing_support {

inline const std::string kImprovedMarker = "Count the words";
inline const std::string kImprovedRubric =
    "Count the words in the response. Award one point for every ten words, from 1 to 6.";

inline nlohmann::json demo_fixture(int seed_noise = 2, int lo = 1, int hi = 6) {
  using nlohmann::json;
  const json exact{{"words_per_point", kWordsPerPoint}, {"offset", 0}, {"noise", 0}, {"min", lo}, {"max", hi}};
  json noisy = exact;
  noisy["noise"] = seed_noise;
  return json{
      {"seed", 5},
      {"routes",
       json::array({
           json{{"match", {{"purpose", "refinement"}}},
                {"replies", json::array({"Revised rubric:\n```\n" + kImprovedRubric + "\n```"})}},
           json{{"match", {{"rubric_contains", kImprovedMarker}}}, {"score_rule", exact}},
           json{{"score_rule", noisy}},
       })}};
}

}  // namespace testing_support
