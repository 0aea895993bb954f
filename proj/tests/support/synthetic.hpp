#pragma once

// Synthetic essays whose word count encodes the human score, so a scripted
// length rule with words_per_point = kWordsPerPoint and offset 0 recovers the
// score exactly.

#include <string>
#include <vector>

#include "rubricrefine/dataset.hpp"

namespace testing_support {

inline constexpr int kWordsPerPoint = 10;

inline std::string essay_text(int score, int variant) {
  std::string text;
  const int words = score * kWordsPerPoint + kWordsPerPoint / 2;
  for (int w = 0; w < words; ++w) {
    if (w > 0) text.push_back(' ');
    text += "w" + std::to_string((variant * 31 + w) % 97);
  }
  return text;
}

/// `n` essays with scores cycling through [lo, hi].
inline std::vector<rubricrefine::EssayRecord> synthetic_essays(int n, int lo, int hi, const std::string& prefix = "e") {
  std::vector<rubricrefine::EssayRecord> out;
  for (int i = 0; i < n; ++i) {
    rubricrefine::EssayRecord r;
    r.essay_id = prefix + std::to_string(i);
    r.prompt_id = "1";
    r.essay_prompt = "Write a letter to your local newspaper about computers.";
    r.human_score = lo + (i * 7 + i / 3) % (hi - lo + 1);
    r.response = essay_text(r.human_score, i);
    out.push_back(r);
  }
  return out;
}

}  // namespace testing_support
