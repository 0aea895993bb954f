#define CPPHTTPLIB_OPENSSL_SUPPORT
#include <httplib.h>

#include <cstdlib>

#include "rubricrefine/errors.hpp"
#include "rubricrefine/model_client.hpp"

namespace rubricrefine {

using nlohmann::json;

namespace {

bool retryable_status(int status) { return status == 408 || status == 429 || status >= 500; }

std::string snippet(const std::string& body) {
  constexpr std::size_t kMax = 300;
  return body.size() <= kMax ? body : body.substr(0, kMax) + "...";
}

}  // namespace

HttpChatBackend::HttpChatBackend(ModelConfig config) : config_(std::move(config)) {
  const char* key = std::getenv(config_.api_key_env_var.c_str());
  if (key == nullptr || *key == '\0') {
    throw ConfigError("environment variable " + config_.api_key_env_var +
                      " (API key for " + config_.model_name + ") is not set");
  }
  api_key_ = key;

  const auto& url = config_.endpoint_url;
  const auto scheme_end = url.find("://");
  if (scheme_end == std::string::npos) throw ConfigError("endpoint_url lacks a scheme: " + url);
  const auto scheme = url.substr(0, scheme_end);
  if (scheme != "http" && scheme != "https") throw ConfigError("unsupported endpoint scheme: " + scheme);
  const auto path_begin = url.find('/', scheme_end + 3);
  scheme_host_port_ = url.substr(0, path_begin);
  path_ = path_begin == std::string::npos ? "/" : url.substr(path_begin);
}

json HttpChatBackend::build_payload(const std::string& prompt) const {
  json payload{{"model", config_.model_name},
               {"messages", json::array({json{{"role", "user"}, {"content", prompt}}})},
               {"temperature", config_.temperature}};
  if (config_.top_p) payload["top_p"] = *config_.top_p;
  if (config_.top_k) payload["top_k"] = *config_.top_k;
  if (config_.reasoning_budget && config_.reasoning_budget->effort) {
    // Effort-style reasoning models take the completion cap under this name.
    payload["reasoning_effort"] = *config_.reasoning_budget->effort;
    payload["max_completion_tokens"] = config_.max_tokens;
  } else {
    payload["max_tokens"] = config_.max_tokens;
  }
  if (config_.reasoning_budget && config_.reasoning_budget->max_tokens) {
    payload["reasoning"] = {{"max_tokens", *config_.reasoning_budget->max_tokens}};
  }
  return payload;
}

RawReply HttpChatBackend::send(const std::string& prompt, const CallTag&) {
  httplib::Client client(scheme_host_port_);
  const auto secs = config_.request_timeout.count() / 1000;
  const auto usecs = (config_.request_timeout.count() % 1000) * 1000;
  client.set_connection_timeout(secs, usecs);
  client.set_read_timeout(secs, usecs);
  client.set_write_timeout(secs, usecs);

  const httplib::Headers headers{{"Authorization", "Bearer " + api_key_}};
  const auto res = client.Post(path_, headers, build_payload(prompt).dump(), "application/json");
  if (!res) throw TransientError("request failed: " + httplib::to_string(res.error()));
  if (res->status < 200 || res->status >= 300) {
    const auto msg = "HTTP " + std::to_string(res->status) + ": " + snippet(res->body);
    if (retryable_status(res->status)) throw TransientError(msg);
    throw BackendError(msg);
  }

  RawReply reply;
  try {
    const auto body = json::parse(res->body);
    const auto& content = body.at("choices").at(0).at("message").at("content");
    if (!content.is_string()) throw TransientError("response has no text content");
    reply.text = content.get<std::string>();
    if (body.contains("usage") && body.at("usage").is_object()) {
      const auto& u = body.at("usage");
      reply.usage = TokenUsage{u.value("prompt_tokens", 0L), u.value("completion_tokens", 0L)};
    }
  } catch (const json::exception& e) {
    throw TransientError(std::string("unreadable response body: ") + e.what());
  }
  return reply;
}

}  // namespace rubricrefine
