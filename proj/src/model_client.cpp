#include "rubricrefine/model_client.hpp"

#include <algorithm>
#include <cctype>
#include <charconv>
#include <condition_variable>
#include <cstdlib>
#include <fstream>
#include <thread>

#include "rubricrefine/errors.hpp"

namespace rubricrefine {

namespace fs = std::filesystem;
using nlohmann::json;
using std::chrono::milliseconds;

std::string_view to_string(BackendKind kind) {
  return kind == BackendKind::http_chat ? "http_chat" : "scripted";
}

BackendKind backend_kind_from_string(std::string_view name) {
  if (name == "http" || name == "http_chat") return BackendKind::http_chat;
  if (name == "scripted") return BackendKind::scripted;
  throw ConfigError("unknown backend '" + std::string(name) + "'");
}

void ModelConfig::validate() const {
  if (model_name.empty()) throw ConfigError("model_name is empty");
  if (temperature < 0.0) throw ConfigError("temperature must be >= 0");
  if (top_p && !(*top_p > 0.0 && *top_p <= 1.0)) throw ConfigError("top_p must lie in (0, 1]");
  if (top_k && *top_k <= 0) throw ConfigError("top_k must be positive");
  if (max_tokens <= 0) throw ConfigError("max_tokens must be positive");
  if (request_timeout.count() <= 0) throw ConfigError("request_timeout must be positive");
  if (max_retries < 0) throw ConfigError("max_retries must be >= 0");
  if (concurrency < 1) throw ConfigError("concurrency must be >= 1");
  if (backend == BackendKind::http_chat) {
    if (endpoint_url.empty()) throw ConfigError("endpoint_url is empty");
    if (api_key_env_var.empty()) throw ConfigError("api_key_env_var is empty");
  } else if (fixture_path.empty()) {
    throw ConfigError("scripted backend needs a fixture path");
  }
}

namespace {

ModelConfig openai_base(std::string model) {
  ModelConfig c;
  c.model_name = std::move(model);
  c.endpoint_url = "https://api.openai.com/v1/chat/completions";
  c.api_key_env_var = "OPENAI_API_KEY";
  return c;
}

ModelConfig openrouter_base(std::string model) {
  ModelConfig c;
  c.model_name = std::move(model);
  c.endpoint_url = "https://openrouter.ai/api/v1/chat/completions";
  c.api_key_env_var = "OPENROUTER_API_KEY";
  return c;
}

}  // namespace

ModelConfig model_preset(std::string_view name) {
  if (name == "gpt-4.1") {
    auto c = openai_base("gpt-4.1");
    c.temperature = 1.0;
    c.max_tokens = 8192;
    return c;
  }
  if (name == "gpt-5-mini") {
    auto c = openai_base("gpt-5-mini");
    c.temperature = 1.0;
    c.max_tokens = 8192;
    c.reasoning_budget = ReasoningBudget{std::nullopt, "low"};
    return c;
  }
  if (name == "gemini-2.5-flash") {
    auto c = openrouter_base("google/gemini-2.5-flash");
    c.temperature = 1.0;
    c.max_tokens = 8192;
    c.reasoning_budget = ReasoningBudget{0, std::nullopt};
    return c;
  }
  if (name == "gemini-2.5-pro") {
    auto c = openrouter_base("google/gemini-2.5-pro");
    c.temperature = 1.0;
    c.max_tokens = 8192;
    c.reasoning_budget = ReasoningBudget{1024, std::nullopt};
    return c;
  }
  if (name == "qwen3-next-80b-a3b-instruct") {
    auto c = openrouter_base("qwen/qwen3-next-80b-a3b-instruct");
    c.temperature = 0.7;
    c.top_p = 0.8;
    c.top_k = 20;
    c.max_tokens = 8192;
    return c;
  }
  throw ConfigError("unknown model preset '" + std::string(name) + "'");
}

std::vector<std::string> model_preset_names() {
  return {"gpt-4.1", "gpt-5-mini", "gemini-2.5-flash", "gemini-2.5-pro",
          "qwen3-next-80b-a3b-instruct"};
}

void to_json(json& j, const ModelConfig& c) {
  std::vector<long long> backoff;
  for (auto d : c.retry_backoff) backoff.push_back(d.count());
  j = json{{"backend", to_string(c.backend)},
           {"model_name", c.model_name},
           {"endpoint_url", c.endpoint_url},
           {"api_key_env_var", c.api_key_env_var},
           {"temperature", c.temperature},
           {"top_p", c.top_p ? json(*c.top_p) : json(nullptr)},
           {"top_k", c.top_k ? json(*c.top_k) : json(nullptr)},
           {"max_tokens", c.max_tokens},
           {"request_timeout_ms", c.request_timeout.count()},
           {"max_retries", c.max_retries},
           {"retry_backoff_ms", backoff},
           {"concurrency", c.concurrency},
           {"fixture_path", c.fixture_path},
           {"audit_dir", c.audit_dir}};
  if (c.reasoning_budget) {
    json r = json::object();
    if (c.reasoning_budget->max_tokens) r["max_tokens"] = *c.reasoning_budget->max_tokens;
    if (c.reasoning_budget->effort) r["effort"] = *c.reasoning_budget->effort;
    j["reasoning_budget"] = r;
  } else {
    j["reasoning_budget"] = nullptr;
  }
}

void from_json(const json& j, ModelConfig& c) {
  if (j.contains("preset")) {
    c = model_preset(j.at("preset").get<std::string>());
  } else {
    c = ModelConfig{};
  }
  if (j.contains("backend")) c.backend = backend_kind_from_string(j.at("backend").get<std::string>());
  if (j.contains("model_name")) j.at("model_name").get_to(c.model_name);
  if (j.contains("endpoint_url")) j.at("endpoint_url").get_to(c.endpoint_url);
  if (j.contains("api_key_env_var")) j.at("api_key_env_var").get_to(c.api_key_env_var);
  if (j.contains("temperature")) j.at("temperature").get_to(c.temperature);
  if (j.contains("top_p")) {
    c.top_p = j.at("top_p").is_null() ? std::nullopt : std::optional(j.at("top_p").get<double>());
  }
  if (j.contains("top_k")) {
    c.top_k = j.at("top_k").is_null() ? std::nullopt : std::optional(j.at("top_k").get<int>());
  }
  if (j.contains("max_tokens")) j.at("max_tokens").get_to(c.max_tokens);
  if (j.contains("request_timeout_ms")) c.request_timeout = milliseconds{j.at("request_timeout_ms").get<long long>()};
  if (j.contains("max_retries")) j.at("max_retries").get_to(c.max_retries);
  if (j.contains("retry_backoff_ms")) {
    c.retry_backoff.clear();
    for (auto v : j.at("retry_backoff_ms")) c.retry_backoff.emplace_back(v.get<long long>());
  }
  if (j.contains("concurrency")) j.at("concurrency").get_to(c.concurrency);
  if (j.contains("fixture_path")) j.at("fixture_path").get_to(c.fixture_path);
  if (j.contains("audit_dir")) j.at("audit_dir").get_to(c.audit_dir);
  if (j.contains("reasoning_budget")) {
    const auto& r = j.at("reasoning_budget");
    if (r.is_null()) {
      c.reasoning_budget.reset();
    } else {
      ReasoningBudget b;
      if (r.contains("max_tokens")) b.max_tokens = r.at("max_tokens").get<int>();
      if (r.contains("effort")) b.effort = r.at("effort").get<std::string>();
      c.reasoning_budget = b;
    }
  }
}

std::string_view to_string(CallPurpose purpose) {
  switch (purpose) {
    case CallPurpose::validation: return "validation";
    case CallPurpose::batch: return "batch";
    case CallPurpose::refinement: return "refinement";
    case CallPurpose::test: return "test";
    case CallPurpose::single: return "single";
  }
  return "single";
}

std::string CallTag::context_key() const {
  return std::string(to_string(purpose)) + "/t" + std::to_string(trial) + "/i" +
         std::to_string(iteration) + "/r" + std::to_string(repeat) + "/" + essay_id;
}

// ---------------------------------------------------------------------------
// Audit log

namespace {

json tag_json(const CallTag& t) {
  return json{{"purpose", to_string(t.purpose)}, {"trial", t.trial},     {"iteration", t.iteration},
              {"repeat", t.repeat},              {"essay_id", t.essay_id}, {"attempt", t.attempt}};
}

}  // namespace

AuditLog::AuditLog(fs::path dir) {
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) throw IoError("cannot create audit directory " + dir.string() + ": " + ec.message());
  file_ = dir / "calls.jsonl";
}

void AuditLog::record(AuditEntry entry) {
  std::lock_guard lock(mutex_);
  if (file_) {
    std::ofstream out(*file_, std::ios::app | std::ios::binary);
    out << json{{"tag", tag_json(entry.tag)},
                {"model", entry.model_name},
                {"ok", entry.ok},
                {"error", entry.error},
                {"transport_attempts", entry.transport_attempts},
                {"prompt", entry.prompt},
                {"response", entry.response}}
               .dump()
        << '\n';
  }
  entries_.push_back(std::move(entry));
}

std::vector<AuditEntry> AuditLog::entries() const {
  std::lock_guard lock(mutex_);
  return entries_;
}

std::size_t AuditLog::size() const {
  std::lock_guard lock(mutex_);
  return entries_.size();
}

// ---------------------------------------------------------------------------
// Client

struct ModelClient::Gate {
  explicit Gate(int slots) : free(slots) {}
  std::mutex mutex;
  std::condition_variable cv;
  int free;

  void acquire() {
    std::unique_lock lock(mutex);
    cv.wait(lock, [&] { return free > 0; });
    --free;
  }
  void release() {
    {
      std::lock_guard lock(mutex);
      ++free;
    }
    cv.notify_one();
  }
};

ModelClient::ModelClient(ModelConfig config, std::shared_ptr<Backend> backend, Sleeper sleeper)
    : config_(std::move(config)),
      backend_(std::move(backend)),
      sleeper_(sleeper ? std::move(sleeper) : Sleeper([](milliseconds d) { std::this_thread::sleep_for(d); })),
      gate_(std::make_shared<Gate>(std::max(1, config_.concurrency))) {
  if (!backend_) throw ConfigError("model client needs a backend");
  if (!config_.audit_dir.empty()) audit_ = std::make_shared<AuditLog>(fs::path(config_.audit_dir));
}

ModelClient ModelClient::create(const ModelConfig& config, Sleeper sleeper) {
  config.validate();
  std::shared_ptr<Backend> backend;
  if (config.backend == BackendKind::http_chat) {
    backend = std::make_shared<HttpChatBackend>(config);
  } else {
    backend = ScriptedBackend::from_file(config.fixture_path);
  }
  return ModelClient(config, std::move(backend), std::move(sleeper));
}

CompletionResult ModelClient::complete(const std::string& prompt, const CallTag& tag) const {
  CompletionResult result;
  const auto started = std::chrono::steady_clock::now();
  auto finish = [&] {
    result.latency = std::chrono::duration_cast<milliseconds>(std::chrono::steady_clock::now() - started);
    if (audit_) {
      audit_->record(AuditEntry{tag, config_.model_name, prompt, result.ok ? result.text : std::string{},
                                result.ok, result.error, result.attempts});
    }
  };
  for (int attempt = 0; attempt <= config_.max_retries; ++attempt) {
    ++result.attempts;
    gate_->acquire();
    try {
      auto reply = backend_->send(prompt, tag);
      gate_->release();
      result.ok = true;
      result.text = std::move(reply.text);
      result.usage = reply.usage;
      result.error.clear();
      break;
    } catch (const TransientError& e) {
      gate_->release();
      result.error = e.what();
    } catch (const std::exception& e) {
      gate_->release();
      result.error = e.what();
      finish();
      throw;
    }
    if (attempt < config_.max_retries && !config_.retry_backoff.empty()) {
      const auto idx = std::min<std::size_t>(static_cast<std::size_t>(attempt), config_.retry_backoff.size() - 1);
      sleeper_(config_.retry_backoff[idx]);
    }
  }
  finish();
  return result;
}

// ---------------------------------------------------------------------------
// Output contract parsing

std::string_view to_string(ParseStatus status) {
  switch (status) {
    case ParseStatus::ok: return "ok";
    case ParseStatus::score_out_of_range: return "score_out_of_range";
    case ParseStatus::malformed: return "malformed";
    case ParseStatus::transport_failure: return "transport_failure";
  }
  return "malformed";
}

ParseStatus parse_status_from_string(std::string_view name) {
  if (name == "ok") return ParseStatus::ok;
  if (name == "score_out_of_range") return ParseStatus::score_out_of_range;
  if (name == "malformed") return ParseStatus::malformed;
  if (name == "transport_failure") return ParseStatus::transport_failure;
  throw ConfigError("unknown parse status '" + std::string(name) + "'");
}

namespace {

bool is_alpha(char c) { return std::isalpha(static_cast<unsigned char>(c)) != 0; }
bool is_digit(char c) { return c >= '0' && c <= '9'; }

char lower(char c) { return static_cast<char>(std::tolower(static_cast<unsigned char>(c))); }

struct Marker {
  std::size_t begin;  // first char of the marker, including leading '*'
  std::size_t end;    // one past the ':' and any trailing '*'
};

/// Last occurrence of `word` (case-insensitive, not inside another word)
/// followed by optional '*' or spaces and a ':'.
std::optional<Marker> find_last_marker(std::string_view text, std::string_view word) {
  std::optional<Marker> found;
  for (std::size_t p = 0; p + word.size() <= text.size(); ++p) {
    bool match = true;
    for (std::size_t k = 0; k < word.size(); ++k) {
      if (lower(text[p + k]) != word[k]) {
        match = false;
        break;
      }
    }
    if (!match) continue;
    if (p > 0 && is_alpha(text[p - 1])) continue;
    std::size_t q = p + word.size();
    while (q < text.size() && (text[q] == '*' || text[q] == ' ')) ++q;
    if (q >= text.size() || text[q] != ':') continue;
    ++q;
    while (q < text.size() && text[q] == '*') ++q;
    std::size_t b = p;
    while (b > 0 && text[b - 1] == '*') --b;
    found = Marker{b, q};
  }
  return found;
}

std::string trim_copy(std::string_view s) {
  const auto* ws = " \t\r\n";
  const auto b = s.find_first_not_of(ws);
  if (b == std::string_view::npos) return {};
  const auto e = s.find_last_not_of(ws);
  return std::string(s.substr(b, e - b + 1));
}

std::string clean_rationale(std::string_view s) {
  auto t = trim_copy(s);
  if (t.size() >= 2 && t.front() == '[' && t.back() == ']') t = trim_copy(std::string_view(t).substr(1, t.size() - 2));
  return t;
}

}  // namespace

ParsedRating parse_rating(std::string_view raw, const ScoreScale& scale) {
  ParsedRating out;
  const auto rating = find_last_marker(raw, "rating");
  if (!rating) {
    out.status = ParseStatus::malformed;
    out.detail = "no Rating: line";
    out.rationale = clean_rationale(raw.substr(0, std::min<std::size_t>(raw.size(), 4000)));
    return out;
  }

  if (const auto rationale = find_last_marker(raw, "rationale")) {
    if (rationale->begin < rating->begin) {
      out.rationale = clean_rationale(raw.substr(rationale->end, rating->begin - rationale->end));
    } else {
      out.rationale = clean_rationale(raw.substr(rationale->end));
    }
  } else {
    out.rationale = clean_rationale(raw.substr(0, rating->begin));
  }

  std::size_t q = rating->end;
  while (q < raw.size() && (raw[q] == ' ' || raw[q] == '\t' || raw[q] == '*' || raw[q] == '"')) ++q;
  if (q < raw.size() && raw[q] == '[') ++q;
  while (q < raw.size() && (raw[q] == ' ' || raw[q] == '"')) ++q;
  const std::size_t num_begin = q;
  if (q < raw.size() && (raw[q] == '-' || raw[q] == '+')) ++q;
  const std::size_t digits_begin = q;
  while (q < raw.size() && is_digit(raw[q])) ++q;
  if (q == digits_begin) {
    out.status = ParseStatus::malformed;
    out.detail = "rating is not an integer";
    return out;
  }
  if (q + 1 < raw.size() && (raw[q] == '.' || raw[q] == ',') && is_digit(raw[q + 1])) {
    out.status = ParseStatus::malformed;
    out.detail = "rating is not an integer";
    return out;
  }
  if (q - digits_begin > 6) {
    out.status = ParseStatus::score_out_of_range;
    out.detail = "rating has too many digits";
    return out;
  }
  int value = 0;
  const char* first = raw.data() + (raw[num_begin] == '+' ? num_begin + 1 : num_begin);
  std::from_chars(first, raw.data() + q, value);
  if (!scale.contains(value)) {
    out.status = ParseStatus::score_out_of_range;
    out.detail = "rating " + std::to_string(value) + " outside " + std::to_string(scale.min) + ".." +
                 std::to_string(scale.max);
    return out;
  }
  out.status = ParseStatus::ok;
  out.score = value;
  return out;
}

ScoringOutcome score_essay(const ModelClient& client, const Rubric& rubric, const EssayRecord& essay,
                           const ScoreScale& scale, int parse_retry, const PromptTemplates& templates,
                           CallTag tag) {
  const auto prompt = render_scoring_prompt(rubric, essay, templates);
  if (tag.essay_id.empty()) tag.essay_id = essay.essay_id;
  ScoringOutcome outcome;
  const int max_attempts = 1 + std::max(0, parse_retry);
  for (int attempt = 0; attempt < max_attempts; ++attempt) {
    tag.attempt = attempt;
    ++outcome.attempts;
    const auto completion = client.complete(prompt, tag);
    outcome.latency += completion.latency;
    if (completion.usage) {
      if (!outcome.token_usage) outcome.token_usage = TokenUsage{};
      outcome.token_usage->input += completion.usage->input;
      outcome.token_usage->output += completion.usage->output;
    }
    if (!completion.ok) {
      outcome.raw_output.clear();
      outcome.rationale.clear();
      outcome.predicted_score.reset();
      outcome.parse_status = ParseStatus::transport_failure;
      return outcome;
    }
    outcome.raw_output = completion.text;
    auto parsed = parse_rating(completion.text, scale);
    outcome.rationale = std::move(parsed.rationale);
    outcome.parse_status = parsed.status;
    outcome.predicted_score = parsed.score;
    if (parsed.status == ParseStatus::ok) return outcome;
  }
  return outcome;
}

void to_json(json& j, const ScoringOutcome& o) {
  j = json{{"raw_output", o.raw_output},
           {"rationale", o.rationale},
           {"predicted_score", o.predicted_score ? json(*o.predicted_score) : json(nullptr)},
           {"parse_status", to_string(o.parse_status)},
           {"attempts", o.attempts},
           {"latency_ms", o.latency.count()}};
  if (o.token_usage) j["token_usage"] = {{"input", o.token_usage->input}, {"output", o.token_usage->output}};
}

}  // namespace rubricrefine
