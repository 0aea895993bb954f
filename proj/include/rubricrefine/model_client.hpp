#pragma once

#include <chrono>
#include <filesystem>
#include <functional>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include <nlohmann/json.hpp>

#include "rubricrefine/dataset.hpp"
#include "rubricrefine/prompts.hpp"

namespace rubricrefine {

enum class BackendKind { http_chat, scripted };

std::string_view to_string(BackendKind kind);
BackendKind backend_kind_from_string(std::string_view name);

/// Provider-specific reasoning knobs, passed through without interpretation.
struct ReasoningBudget {
  std::optional<int> max_tokens;
  std::optional<std::string> effort;

  bool operator==(const ReasoningBudget&) const = default;
};

struct ModelConfig {
  BackendKind backend = BackendKind::http_chat;
  std::string model_name = "gpt-4.1";
  std::string endpoint_url = "https://api.openai.com/v1/chat/completions";
  /// Name of the environment variable holding the key, never the key.
  std::string api_key_env_var = "OPENAI_API_KEY";
  double temperature = 1.0;
  std::optional<double> top_p;
  std::optional<int> top_k;
  int max_tokens = 8192;
  std::optional<ReasoningBudget> reasoning_budget;
  std::chrono::milliseconds request_timeout{120'000};
  int max_retries = 3;
  /// Delay before retry i is retry_backoff[min(i, size - 1)].
  std::vector<std::chrono::milliseconds> retry_backoff{std::chrono::milliseconds{1000},
                                                       std::chrono::milliseconds{2000},
                                                       std::chrono::milliseconds{4000}};
  /// Upper bound on in-flight calls issued through one client.
  int concurrency = 4;
  /// Scripted backend fixture file.
  std::string fixture_path;
  /// When set, every call is mirrored to <audit_dir>/calls.jsonl.
  std::string audit_dir;

  void validate() const;

  bool operator==(const ModelConfig&) const = default;
};

/// Sampling settings for a named model class: gpt-4.1, gpt-5-mini,
/// gemini-2.5-flash, gemini-2.5-pro, qwen3-next-80b-a3b-instruct.
ModelConfig model_preset(std::string_view name);
std::vector<std::string> model_preset_names();

void to_json(nlohmann::json& j, const ModelConfig& config);
void from_json(const nlohmann::json& j, ModelConfig& config);

/// Why a model call was made; drives audit entries and scripted replies.
enum class CallPurpose { validation, batch, refinement, test, single };

std::string_view to_string(CallPurpose purpose);

struct CallTag {
  CallPurpose purpose = CallPurpose::single;
  int trial = 0;
  int iteration = 0;
  int repeat = 0;
  std::string essay_id;
  /// Sampling attempt within one scoring call (parse retries).
  int attempt = 0;

  /// Identifies the logical call, ignoring the attempt number.
  std::string context_key() const;
};

struct TokenUsage {
  long input = 0;
  long output = 0;
};

struct RawReply {
  std::string text;
  std::optional<TokenUsage> usage;
};

/// A failure worth retrying: timeouts, connection errors, 408/429/5xx.
class TransientError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// One request/response exchange. Implementations must be thread-safe.
/// Throw TransientError for retryable failures and BackendError for
/// permanent ones.
class Backend {
 public:
  virtual ~Backend() = default;
  virtual RawReply send(const std::string& prompt, const CallTag& tag) = 0;
};

/// OpenAI-compatible chat-completions endpoint. The whole prompt is sent as
/// a single user message.
class HttpChatBackend final : public Backend {
 public:
  /// Throws ConfigError when the API key variable is unset or the URL is
  /// unusable; no request is made.
  explicit HttpChatBackend(ModelConfig config);

  RawReply send(const std::string& prompt, const CallTag& tag) override;

  /// The request body for `prompt` (no credentials inside).
  nlohmann::json build_payload(const std::string& prompt) const;

 private:
  ModelConfig config_;
  std::string api_key_;
  std::string scheme_host_port_;
  std::string path_;
};

/// Wraps a callable; used by tests and the Python bindings.
class FunctionBackend final : public Backend {
 public:
  using Fn = std::function<RawReply(const std::string&, const CallTag&)>;
  explicit FunctionBackend(Fn fn) : fn_(std::move(fn)) {}
  RawReply send(const std::string& prompt, const CallTag& tag) override { return fn_(prompt, tag); }

 private:
  Fn fn_;
};

/// Deterministic stand-in for a model, driven by a JSON fixture. See
/// scripted_backend.cpp for the fixture format.
class ScriptedBackend final : public Backend {
 public:
  /// Length-driven scoring: score = offset + floor(words / words_per_point)
  /// plus a seeded uniform noise term in [-noise, noise], clamped to
  /// [min, max].
  struct ScoreRule {
    double words_per_point = 50.0;
    int offset = 0;
    int noise = 0;
    int min = 1;
    int max = 6;
  };

  struct Route {
    std::optional<std::string> prompt_hash;
    std::optional<std::string> prompt_contains;
    std::optional<std::string> rubric_contains;
    std::optional<std::string> rubric_hash;
    std::optional<CallPurpose> purpose;
    std::vector<std::string> replies;
    /// "call": advance per logical call context; "iteration": index by
    /// the tag's iteration (1-based).
    std::string cursor = "call";
    std::optional<ScoreRule> score_rule;
    /// Replies that fail transiently before the route starts answering,
    /// counted per call context.
    int fail_first = 0;
  };

  explicit ScriptedBackend(nlohmann::json fixture);
  static std::shared_ptr<ScriptedBackend> from_file(const std::filesystem::path& path);

  RawReply send(const std::string& prompt, const CallTag& tag) override;

 private:
  std::string reply_for(const Route& route, std::size_t route_index, const std::string& prompt,
                        const CallTag& tag);

  std::vector<Route> routes_;
  std::uint64_t seed_ = 0;
  std::mutex mutex_;
  std::map<std::string, std::size_t> cursors_;
  std::map<std::string, int> failures_;
};

struct AuditEntry {
  CallTag tag;
  std::string model_name;
  std::string prompt;
  std::string response;
  bool ok = false;
  std::string error;
  int transport_attempts = 0;
};

/// Thread-safe record of every completion call. Keeps entries in memory
/// and optionally appends them to <dir>/calls.jsonl.
class AuditLog {
 public:
  AuditLog() = default;
  explicit AuditLog(std::filesystem::path dir);

  void record(AuditEntry entry);
  std::vector<AuditEntry> entries() const;
  std::size_t size() const;

 private:
  mutable std::mutex mutex_;
  std::vector<AuditEntry> entries_;
  std::optional<std::filesystem::path> file_;
};

struct CompletionResult {
  bool ok = false;
  std::string text;
  std::string error;
  int attempts = 0;
  std::chrono::milliseconds latency{0};
  std::optional<TokenUsage> usage;
};

using Sleeper = std::function<void(std::chrono::milliseconds)>;

/// Retrying, concurrency-bounded front end to a Backend.
class ModelClient {
 public:
  ModelClient(ModelConfig config, std::shared_ptr<Backend> backend, Sleeper sleeper = {});

  /// Builds the backend named by config.backend.
  static ModelClient create(const ModelConfig& config, Sleeper sleeper = {});

  /// Sends `prompt`, retrying transient failures up to max_retries times.
  /// Exhausted retries come back as ok == false; permanent failures throw
  /// BackendError.
  CompletionResult complete(const std::string& prompt, const CallTag& tag = {}) const;

  const ModelConfig& config() const { return config_; }
  void set_audit_log(std::shared_ptr<AuditLog> log) { audit_ = std::move(log); }
  const std::shared_ptr<AuditLog>& audit_log() const { return audit_; }

 private:
  struct Gate;

  ModelConfig config_;
  std::shared_ptr<Backend> backend_;
  Sleeper sleeper_;
  std::shared_ptr<Gate> gate_;
  std::shared_ptr<AuditLog> audit_;
};

enum class ParseStatus { ok, score_out_of_range, malformed, transport_failure };

std::string_view to_string(ParseStatus status);
ParseStatus parse_status_from_string(std::string_view name);

struct ParsedRating {
  ParseStatus status = ParseStatus::malformed;
  std::string rationale;
  std::optional<int> score;  // present only when status == ok
  std::string detail;
};

/// Reads the `Rationale:` / `Rating:` output contract. Total: every input
/// yields ok or a typed failure.
ParsedRating parse_rating(std::string_view raw, const ScoreScale& scale);

struct ScoringOutcome {
  std::string raw_output;
  std::string rationale;
  std::optional<int> predicted_score;
  ParseStatus parse_status = ParseStatus::malformed;
  int attempts = 0;
  std::chrono::milliseconds latency{0};
  std::optional<TokenUsage> token_usage;
};

/// Renders, completes, and parses; unparseable replies are re-sampled up
/// to `parse_retry` more times.
ScoringOutcome score_essay(const ModelClient& client, const Rubric& rubric, const EssayRecord& essay,
                           const ScoreScale& scale, int parse_retry = 2,
                           const PromptTemplates& templates = PromptTemplates::defaults(),
                           CallTag tag = {});

void to_json(nlohmann::json& j, const ScoringOutcome& outcome);

}  // namespace rubricrefine
