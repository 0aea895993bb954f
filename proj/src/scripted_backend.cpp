// Scripted backend fixture format (JSON):
//
//   {
//     "seed": 7,
//     "routes": [
//       { "match": { "purpose": "refinement", "rubric_contains": "scale of 1 to 6" },
//         "replies": ["```\nImproved rubric\n```"], "cursor": "iteration" },
//       { "match": { "rubric_hash": "0123abcd..." },
//         "score_rule": { "words_per_point": 40, "offset": 1, "noise": 0, "min": 1, "max": 6 } },
//       { "match": { "prompt_contains": "# Rubric" },
//         "replies": ["Rating: [oops]", "Rationale: [ok]\nRating: [3]"], "fail_first": 1 }
//     ]
//   }
//
// The first route whose every match key holds answers. Match keys:
// prompt_hash (content_hash of the full prompt), prompt_contains,
// rubric_contains / rubric_hash (the rubric embedded in a scoring or
// refinement prompt), purpose. Replies are picked per logical call
// (CallTag::context_key), so retries walk the list while independent calls
// start fresh; the last reply repeats once the list runs out. Nothing
// depends on call order, which keeps concurrent and resumed runs
// reproducible.

#include <fstream>
#include <sstream>

#include "rubricrefine/errors.hpp"
#include "rubricrefine/model_client.hpp"
#include "rubricrefine/random.hpp"

namespace rubricrefine {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

std::optional<std::string_view> between(std::string_view text, std::string_view open,
                                        std::string_view close, bool last_close) {
  const auto b = text.find(open);
  if (b == std::string_view::npos) return std::nullopt;
  const auto start = b + open.size();
  const auto e = last_close ? text.rfind(close) : text.find(close, start);
  if (e == std::string_view::npos || e < start) return std::nullopt;
  return text.substr(start, e - start);
}

/// Rubric embedded in a rendered scoring or refinement prompt.
std::optional<std::string_view> embedded_rubric(std::string_view prompt) {
  if (auto r = between(prompt, "# Rubric\n\"\"\"", "\"\"\"\n# Output format:", true)) return r;
  return between(prompt, "```\n", "\n```\n", false);
}

std::optional<std::string_view> embedded_response(std::string_view prompt) {
  return between(prompt, "# Response\n\"\"\"", "\"\"\"\n# Rubric\n", false);
}

std::size_t word_count(std::string_view text) {
  std::istringstream in{std::string(text)};
  std::size_t n = 0;
  std::string w;
  while (in >> w) ++n;
  return n;
}

CallPurpose purpose_from_string(const std::string& s) {
  if (s == "validation") return CallPurpose::validation;
  if (s == "batch") return CallPurpose::batch;
  if (s == "refinement") return CallPurpose::refinement;
  if (s == "test") return CallPurpose::test;
  if (s == "single") return CallPurpose::single;
  throw ConfigError("unknown call purpose '" + s + "' in fixture");
}

}  // namespace

ScriptedBackend::ScriptedBackend(json fixture) {
  try {
    seed_ = fixture.value("seed", std::uint64_t{0});
    for (const auto& r : fixture.at("routes")) {
      Route route;
      if (r.contains("match")) {
        const auto& m = r.at("match");
        if (m.contains("prompt_hash")) route.prompt_hash = m.at("prompt_hash").get<std::string>();
        if (m.contains("prompt_contains")) route.prompt_contains = m.at("prompt_contains").get<std::string>();
        if (m.contains("rubric_contains")) route.rubric_contains = m.at("rubric_contains").get<std::string>();
        if (m.contains("rubric_hash")) route.rubric_hash = m.at("rubric_hash").get<std::string>();
        if (m.contains("purpose")) route.purpose = purpose_from_string(m.at("purpose").get<std::string>());
      }
      if (r.contains("replies")) r.at("replies").get_to(route.replies);
      route.cursor = r.value("cursor", std::string("call"));
      if (route.cursor != "call" && route.cursor != "iteration") {
        throw ConfigError("fixture cursor must be 'call' or 'iteration'");
      }
      route.fail_first = r.value("fail_first", 0);
      if (r.contains("score_rule")) {
        const auto& s = r.at("score_rule");
        ScoreRule rule;
        rule.words_per_point = s.value("words_per_point", rule.words_per_point);
        rule.offset = s.value("offset", rule.offset);
        rule.noise = s.value("noise", rule.noise);
        rule.min = s.value("min", rule.min);
        rule.max = s.value("max", rule.max);
        if (rule.words_per_point <= 0.0 || rule.noise < 0 || rule.min > rule.max) {
          throw ConfigError("invalid score_rule in fixture");
        }
        route.score_rule = rule;
      }
      if (route.replies.empty() && !route.score_rule && route.fail_first == 0) {
        throw ConfigError("fixture route needs replies or a score_rule");
      }
      routes_.push_back(std::move(route));
    }
  } catch (const json::exception& e) {
    throw ConfigError(std::string("malformed scripted fixture: ") + e.what());
  }
}

std::shared_ptr<ScriptedBackend> ScriptedBackend::from_file(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ConfigError("cannot open scripted fixture " + path.string());
  json fixture;
  try {
    fixture = json::parse(in);
  } catch (const json::exception& e) {
    throw ConfigError("fixture " + path.string() + " is not valid JSON: " + e.what());
  }
  return std::make_shared<ScriptedBackend>(std::move(fixture));
}

RawReply ScriptedBackend::send(const std::string& prompt, const CallTag& tag) {
  const auto rubric = embedded_rubric(prompt);
  for (std::size_t i = 0; i < routes_.size(); ++i) {
    const auto& r = routes_[i];
    if (r.purpose && *r.purpose != tag.purpose) continue;
    if (r.prompt_hash && content_hash(prompt) != *r.prompt_hash) continue;
    if (r.prompt_contains && prompt.find(*r.prompt_contains) == std::string::npos) continue;
    if (r.rubric_contains && (!rubric || rubric->find(*r.rubric_contains) == std::string_view::npos)) continue;
    if (r.rubric_hash && (!rubric || content_hash(*rubric) != *r.rubric_hash)) continue;
    return RawReply{reply_for(r, i, prompt, tag), TokenUsage{static_cast<long>(prompt.size() / 4), 16}};
  }
  throw BackendError("scripted fixture has no route for prompt " + content_hash(prompt) + " (" +
                     tag.context_key() + ")");
}

std::string ScriptedBackend::reply_for(const Route& route, std::size_t route_index,
                                       const std::string& prompt, const CallTag& tag) {
  const auto key = std::to_string(route_index) + "|" + content_hash(prompt) + "|" + tag.context_key();
  std::size_t index = 0;
  {
    std::lock_guard lock(mutex_);
    if (failures_[key] < route.fail_first) {
      ++failures_[key];
      throw TransientError("scripted transient failure");
    }
    index = cursors_[key]++;
  }
  if (route.cursor == "iteration") index = static_cast<std::size_t>(std::max(tag.iteration - 1, 0));

  if (route.score_rule) {
    const auto& rule = *route.score_rule;
    const auto response = embedded_response(prompt).value_or(std::string_view(prompt));
    const auto words = word_count(response);
    int score = rule.offset + static_cast<int>(static_cast<double>(words) / rule.words_per_point);
    if (rule.noise > 0) {
      const auto h = mix_seed({seed_, fnv1a64(prompt), fnv1a64(tag.context_key()),
                               static_cast<std::uint64_t>(tag.attempt)});
      score += static_cast<int>(h % static_cast<std::uint64_t>(2 * rule.noise + 1)) - rule.noise;
    }
    score = std::clamp(score, rule.min, rule.max);
    return "Rationale: [The response runs " + std::to_string(words) + " words.]\nRating: [" +
           std::to_string(score) + "]";
  }
  if (route.replies.empty()) throw BackendError("scripted route has no replies");
  return route.replies[std::min(index, route.replies.size() - 1)];
}

}  // namespace rubricrefine
