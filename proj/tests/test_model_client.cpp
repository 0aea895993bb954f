#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>
#include <httplib.h>

#include <atomic>
#include <cstdlib>
#include <fstream>
#include <random>
#include <thread>

#include "rubricrefine/errors.hpp"
#include "rubricrefine/model_client.hpp"
#include "support/temp_dir.hpp"

using namespace rubricrefine;
using nlohmann::json;
using std::chrono::milliseconds;
using testing_support::slurp;
using testing_support::TempDir;

namespace {

constexpr const char* kKeyVar = "RR_TEST_API_KEY";
constexpr const char* kSecret = "sk-test-4f9a1c7e-do-not-log";

ModelConfig scripted_config() {
  ModelConfig c;
  c.backend = BackendKind::scripted;
  c.fixture_path = "inline";
  return c;
}

ModelClient scripted_client(json fixture, ModelConfig config = scripted_config(),
                            Sleeper sleeper = [](milliseconds) {}) {
  return ModelClient(std::move(config), std::make_shared<ScriptedBackend>(std::move(fixture)), std::move(sleeper));
}

json reply_route(std::vector<std::string> replies) {
  return json{{"routes", json::array({json{{"replies", std::move(replies)}}})}};
}

Rubric rubric_of(const std::string& text) { return Rubric{text, {"simplest", 0, 0, std::nullopt}}; }

EssayRecord essay_of(const std::string& id) {
  EssayRecord e;
  e.essay_id = id;
  e.essay_prompt = "P";
  e.response = "E";
  e.human_score = 3;
  return e;
}

/// Local chat-completions endpoint answering from a queue of statuses.
class FakeServer {
 public:
  explicit FakeServer(std::vector<int> statuses) : statuses_(std::move(statuses)) {
    server_.Post("/v1/chat/completions", [this](const httplib::Request& req, httplib::Response& res) {
      std::lock_guard lock(mutex_);
      bodies_.push_back(req.body);
      auth_.push_back(req.get_header_value("Authorization"));
      const int status = calls_ < statuses_.size() ? statuses_[calls_] : 200;
      ++calls_;
      res.status = status;
      if (status == 200) {
        res.set_content(R"({"choices":[{"message":{"role":"assistant","content":"Rationale: [fine]\nRating: [4]"}}],)"
                        R"("usage":{"prompt_tokens":12,"completion_tokens":5}})",
                        "application/json");
      } else {
        res.set_content(R"({"error":"nope"})", "application/json");
      }
    });
    port_ = server_.bind_to_any_port("127.0.0.1");
    thread_ = std::thread([this] { server_.listen_after_bind(); });
    server_.wait_until_ready();
  }
  ~FakeServer() {
    server_.stop();
    thread_.join();
  }

  std::string url() const { return "http://127.0.0.1:" + std::to_string(port_) + "/v1/chat/completions"; }
  std::size_t calls() {
    std::lock_guard lock(mutex_);
    return calls_;
  }
  std::vector<std::string> bodies() {
    std::lock_guard lock(mutex_);
    return bodies_;
  }
  std::vector<std::string> auth() {
    std::lock_guard lock(mutex_);
    return auth_;
  }

 private:
  httplib::Server server_;
  std::thread thread_;
  int port_ = 0;
  std::mutex mutex_;
  std::vector<int> statuses_;
  std::size_t calls_ = 0;
  std::vector<std::string> bodies_;
  std::vector<std::string> auth_;
};

ModelConfig http_config(const std::string& url) {
  auto c = model_preset("gpt-4.1");
  c.endpoint_url = url;
  c.api_key_env_var = kKeyVar;
  c.request_timeout = milliseconds{5000};
  return c;
}

}  // namespace

TEST_CASE("scripted backend echoes canned replies") {
  const auto client = scripted_client(reply_route({"Rationale: [ok]\nRating: [3]"}));
  const auto r = client.complete("anything");
  CHECK(r.ok);
  CHECK(r.text == "Rationale: [ok]\nRating: [3]");
  CHECK(r.attempts == 1);
}

TEST_CASE("transient failures are retried") {
  std::vector<milliseconds> slept;
  auto fixture = reply_route({"done"});
  fixture["routes"][0]["fail_first"] = 2;
  const auto client = scripted_client(fixture, scripted_config(), [&](milliseconds d) { slept.push_back(d); });
  const auto r = client.complete("p");
  CHECK(r.ok);
  CHECK(r.text == "done");
  CHECK(r.attempts == 3);
  CHECK(slept == std::vector<milliseconds>{milliseconds{1000}, milliseconds{2000}});

  SUBCASE("exhaustion is reported, not thrown") {
    auto always = reply_route({"never"});
    always["routes"][0]["fail_first"] = 100;
    auto config = scripted_config();
    config.max_retries = 2;
    const auto c = scripted_client(always, config);
    const auto e = c.complete("p");
    CHECK_FALSE(e.ok);
    CHECK(e.attempts == 3);
    CHECK(e.error.find("transient") != std::string::npos);
  }
}

TEST_CASE("permanent backend errors propagate") {
  const auto client = scripted_client(json{{"routes", json::array({json{{"match", {{"prompt_contains", "xyz"}}},
                                                                        {"replies", {"r"}}}})}});
  CHECK_THROWS_AS(client.complete("no match"), BackendError);
  CHECK(client.complete("has xyz").text == "r");
}

TEST_CASE("concurrency limit holds") {
  std::atomic<int> in_flight{0}, peak{0};
  auto backend = std::make_shared<FunctionBackend>([&](const std::string&, const CallTag&) {
    const int now = ++in_flight;
    int p = peak.load();
    while (now > p && !peak.compare_exchange_weak(p, now)) {
    }
    std::this_thread::sleep_for(milliseconds{5});
    --in_flight;
    return RawReply{"ok", std::nullopt};
  });
  auto config = scripted_config();
  config.concurrency = 2;
  const ModelClient client(config, backend);
  std::vector<std::jthread> threads;
  for (int i = 0; i < 8; ++i) threads.emplace_back([&] { CHECK(client.complete("p").ok); });
  threads.clear();
  CHECK(peak.load() <= 2);
  CHECK(peak.load() >= 1);
}

TEST_CASE("http backend needs its key before any request") {
  ::unsetenv(kKeyVar);
  FakeServer server({});
  auto config = http_config(server.url());
  CHECK_THROWS_AS(ModelClient::create(config), ConfigError);
  CHECK(server.calls() == 0);
}

TEST_CASE("http backend round trip") {
  ::setenv(kKeyVar, kSecret, 1);
  TempDir dir;

  SUBCASE("server error then success") {
    FakeServer server({500, 200});
    auto config = http_config(server.url());
    config.audit_dir = (dir / "audit").string();
    std::vector<milliseconds> slept;
    const auto client = ModelClient::create(config, [&](milliseconds d) { slept.push_back(d); });
    const auto r = client.complete("Score this.");
    CHECK(r.ok);
    CHECK(r.attempts == 2);
    CHECK(r.text == "Rationale: [fine]\nRating: [4]");
    REQUIRE(r.usage);
    CHECK(r.usage->input == 12);
    CHECK(server.calls() == 2);
    CHECK(slept.size() == 1);

    for (const auto& a : server.auth()) CHECK(a == std::string("Bearer ") + kSecret);
    const auto body = json::parse(server.bodies().at(0));
    CHECK(body.at("model") == "gpt-4.1");
    CHECK(body.at("temperature") == 1.0);
    CHECK(body.at("max_tokens") == 8192);
    CHECK(body.at("messages").size() == 1);
    CHECK(body.at("messages")[0].at("role") == "user");
    CHECK(body.at("messages")[0].at("content") == "Score this.");

    const auto audit = slurp(dir / "audit" / "calls.jsonl");
    CHECK(audit.find("Score this.") != std::string::npos);
    CHECK(audit.find(kSecret) == std::string::npos);
    CHECK(json(config).dump().find(kSecret) == std::string::npos);
    CHECK(client.audit_log()->size() == 1);
  }
  SUBCASE("unauthorized is permanent") {
    FakeServer server({401});
    const auto client = ModelClient::create(http_config(server.url()), [](milliseconds) {});
    try {
      client.complete("p");
      FAIL("expected BackendError");
    } catch (const BackendError& e) {
      CHECK(std::string(e.what()).find("401") != std::string::npos);
      CHECK(std::string(e.what()).find(kSecret) == std::string::npos);
    }
    CHECK(server.calls() == 1);
  }
  SUBCASE("rate limits are retried") {
    FakeServer server({429, 503, 200});
    const auto client = ModelClient::create(http_config(server.url()), [](milliseconds) {});
    const auto r = client.complete("p");
    CHECK(r.ok);
    CHECK(r.attempts == 3);
  }
  SUBCASE("unreachable endpoint exhausts retries") {
    auto config = http_config("http://127.0.0.1:1/v1/chat/completions");
    config.max_retries = 1;
    config.request_timeout = milliseconds{500};
    const auto r = ModelClient::create(config, [](milliseconds) {}).complete("p");
    CHECK_FALSE(r.ok);
    CHECK(r.attempts == 2);
  }
  ::unsetenv(kKeyVar);
}

TEST_CASE("request payloads per preset") {
  ::setenv(kKeyVar, kSecret, 1);
  auto payload = [](const std::string& preset) {
    auto c = model_preset(preset);
    c.api_key_env_var = kKeyVar;
    return HttpChatBackend(c).build_payload("p");
  };
  const auto mini = payload("gpt-5-mini");
  CHECK(mini.at("reasoning_effort") == "low");
  CHECK(mini.at("max_completion_tokens") == 8192);
  CHECK_FALSE(mini.contains("max_tokens"));
  const auto flash = payload("gemini-2.5-flash");
  CHECK(flash.at("reasoning").at("max_tokens") == 0);
  CHECK(flash.at("max_tokens") == 8192);
  const auto qwen = payload("qwen3-next-80b-a3b-instruct");
  CHECK(qwen.at("temperature") == 0.7);
  CHECK(qwen.at("top_p") == 0.8);
  CHECK(qwen.at("top_k") == 20);
  CHECK(payload("gpt-4.1").dump().find(kSecret) == std::string::npos);
  ::unsetenv(kKeyVar);
}

TEST_CASE("presets") {
  for (const auto& name : model_preset_names()) CHECK_NOTHROW(model_preset(name).validate());
  CHECK_THROWS_AS(model_preset("gpt-2"), ConfigError);
  const auto pro = model_preset("gemini-2.5-pro");
  CHECK(pro.temperature == 1.0);
  CHECK(pro.max_tokens == 8192);
  CHECK(pro.reasoning_budget->max_tokens == 1024);
  CHECK(pro.api_key_env_var == "OPENROUTER_API_KEY");

  const auto j = json::parse(R"({"preset": "qwen3-next-80b-a3b-instruct", "concurrency": 8})");
  const auto c = j.get<ModelConfig>();
  CHECK(c.top_k == 20);
  CHECK(c.concurrency == 8);
  const json round = c;
  CHECK(round.get<ModelConfig>() == c);
}

TEST_CASE("config validation") {
  auto c = ModelConfig{};
  c.max_retries = -1;
  CHECK_THROWS_AS(c.validate(), ConfigError);
  c = ModelConfig{};
  c.request_timeout = milliseconds{0};
  CHECK_THROWS_AS(c.validate(), ConfigError);
  c = scripted_config();
  c.fixture_path.clear();
  CHECK_THROWS_AS(c.validate(), ConfigError);
}

TEST_CASE("parse_rating basics") {
  const auto s = asap_p1_scale();
  const auto ok = parse_rating("Rationale: [clear thesis]\nRating: [4]", s);
  CHECK(ok.status == ParseStatus::ok);
  CHECK(ok.score == 4);
  CHECK(ok.rationale == "clear thesis");
  CHECK(parse_rating("Rating: [7]", s).status == ParseStatus::score_out_of_range);
  CHECK_FALSE(parse_rating("Rating: [7]", s).score);
  CHECK(parse_rating("Rationale: [x]\nRating: [three]", s).status == ParseStatus::malformed);
  CHECK(parse_rating("Rating: [5]", toefl_scale()).score == 5);
  CHECK(parse_rating("Rating: [6]", toefl_scale()).status == ParseStatus::score_out_of_range);
}

TEST_CASE("hand-labeled malformed outputs") {
  std::ifstream in(std::string(RR_FIXTURE_DIR) + "/malformed_outputs.json");
  const auto cases = json::parse(in);
  REQUIRE(cases.size() == 20);
  for (const auto& c : cases) {
    const auto id = c.at("id").get<std::string>();
    INFO(id);
    const auto r = parse_rating(c.at("output").get<std::string>(), asap_p1_scale());
    CHECK(to_string(r.status) == c.at("status").get<std::string>());
    if (c.contains("score")) {
      CHECK(r.score == c.at("score").get<int>());
    } else {
      CHECK_FALSE(r.score);
    }
    if (c.contains("rationale")) CHECK(r.rationale == c.at("rationale").get<std::string>());
  }
}

TEST_CASE("parse_rating never crashes") {
  std::mt19937_64 gen(12345);
  const std::vector<std::string> tokens{"Rating", "rating", "RATING", "Rationale", ":", "[", "]", "**", "\"",
                                        " ",      "\n",     "-",      "+",         ".", "4", "7", "99999999999999",
                                        "0",      "\xff",   "\xe2\x82", "```",     "<<<", "\t"};
  const auto s = asap_p1_scale();
  for (int i = 0; i < 10'000; ++i) {
    std::string text;
    const int len = static_cast<int>(gen() % 24);
    for (int k = 0; k < len; ++k) {
      if (gen() % 4 == 0) {
        text.push_back(static_cast<char>(gen() % 256));
      } else {
        text += tokens[gen() % tokens.size()];
      }
    }
    const auto r = parse_rating(text, s);
    CHECK((r.status == ParseStatus::ok) == r.score.has_value());
    if (r.score) CHECK(s.contains(*r.score));
    CHECK(r.status != ParseStatus::transport_failure);
  }
}

TEST_CASE("score_essay") {
  const auto s = asap_p1_scale();
  SUBCASE("single reply") {
    const auto client = scripted_client(reply_route({"Rationale: [weak support]\nRating: [2]"}));
    const auto o = score_essay(client, rubric_of("R"), essay_of("e1"), s);
    CHECK(o.parse_status == ParseStatus::ok);
    CHECK(o.predicted_score == 2);
    CHECK(o.rationale == "weak support");
    CHECK(o.attempts == 1);
  }
  SUBCASE("re-asks after malformed replies") {
    const auto client = scripted_client(reply_route({"I think 5.", "Rating: [five]", "Rating: [5]"}));
    const auto o = score_essay(client, rubric_of("R"), essay_of("e1"), s, 2);
    CHECK(o.parse_status == ParseStatus::ok);
    CHECK(o.predicted_score == 5);
    CHECK(o.attempts == 3);
  }
  SUBCASE("out of range is re-asked too") {
    const auto client = scripted_client(reply_route({"Rating: [9]", "Rating: [6]"}));
    const auto o = score_essay(client, rubric_of("R"), essay_of("e1"), s, 2);
    CHECK(o.predicted_score == 6);
    CHECK(o.attempts == 2);
  }
  SUBCASE("gibberish exhausts the budget") {
    const auto client = scripted_client(reply_route({"gibberish"}));
    const auto o = score_essay(client, rubric_of("R"), essay_of("e1"), s, 2);
    CHECK(o.parse_status == ParseStatus::malformed);
    CHECK_FALSE(o.predicted_score);
    CHECK(o.attempts == 3);
    CHECK(o.raw_output == "gibberish");
  }
  SUBCASE("transport failure stops immediately") {
    auto fixture = reply_route({"Rating: [3]"});
    fixture["routes"][0]["fail_first"] = 100;
    auto config = scripted_config();
    config.max_retries = 0;
    const auto client = scripted_client(fixture, config);
    const auto o = score_essay(client, rubric_of("R"), essay_of("e1"), s, 2);
    CHECK(o.parse_status == ParseStatus::transport_failure);
    CHECK(o.attempts == 1);
  }
  SUBCASE("independent essays start fresh") {
    const auto client = scripted_client(reply_route({"Rating: [1]", "Rating: [2]"}));
    CHECK(score_essay(client, rubric_of("R"), essay_of("a"), s).predicted_score == 1);
    CHECK(score_essay(client, rubric_of("R"), essay_of("b"), s).predicted_score == 1);
  }
}

TEST_CASE("scripted score rule") {
  const json fixture{{"seed", 3},
                     {"routes", json::array({json{{"score_rule", {{"words_per_point", 2}, {"offset", 1}, {"min", 1}, {"max", 6}}}}})}};
  const auto client = scripted_client(fixture);
  auto essay = essay_of("e");
  essay.response = "one two three four five";
  const auto o = score_essay(client, rubric_of("R"), essay, asap_p1_scale());
  CHECK(o.predicted_score == 3);
  essay.response = std::string(200, 'x') + " y z w v u t s r q p o n m";
  CHECK(score_essay(client, rubric_of("R"), essay, asap_p1_scale()).predicted_score == 6);
}

TEST_CASE("audit log records every call") {
  TempDir dir;
  auto config = scripted_config();
  config.audit_dir = (dir / "audit").string();
  const auto client = scripted_client(reply_route({"x"}), config);
  client.complete("a", CallTag{.purpose = CallPurpose::batch, .trial = 1, .iteration = 2, .essay_id = "e1"});
  client.complete("b");
  const auto entries = client.audit_log()->entries();
  REQUIRE(entries.size() == 2);
  CHECK(entries[0].tag.purpose == CallPurpose::batch);
  CHECK(entries[0].response == "x");
  std::ifstream in(dir / "audit" / "calls.jsonl");
  std::string line;
  int lines = 0;
  while (std::getline(in, line)) {
    CHECK(json::parse(line).contains("tag"));
    ++lines;
  }
  CHECK(lines == 2);
}
