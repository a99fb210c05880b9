#include <catch2/catch_amalgamated.hpp>

#include <atomic>
#include <cstdio>
#include <fstream>
#include <thread>

#include "karma/gateway.hpp"
#include "karma/gateway_http.hpp"

using namespace karma;

namespace {

ChatRequest req_for(const std::string& tag, const std::string& payload,
                    const std::string& system = "You are a test.") {
    ChatRequest r;
    r.tag = tag;
    r.system_prompt = system;
    r.user_payload = payload;
    return r;
}

// Backend that fails with a scripted error sequence before succeeding.
class FlakyBackend : public ChatBackend {
public:
    explicit FlakyBackend(int failures, BackendError::Kind kind = BackendError::Kind::Transient)
        : failures_(failures), kind_(kind) {}

    ChatResponse complete(const ChatRequest&) override {
        ++attempts_seen;
        if (attempts_seen <= failures_) throw BackendError(kind_, "induced failure");
        ChatResponse r;
        r.text = "ok";
        r.prompt_tokens = 3;
        r.completion_tokens = 1;
        r.backend_id = id();
        return r;
    }

    std::string id() const override { return "flaky"; }

    int attempts_seen = 0;

private:
    int failures_;
    BackendError::Kind kind_;
};

GatewayOptions fast_opts(int retries = 3, int max_in_flight = 4) {
    GatewayOptions o;
    o.retries = retries;
    o.backoff_base = std::chrono::milliseconds(1);
    o.max_in_flight = max_in_flight;
    return o;
}

std::string temp_path(const char* stem) {
    return std::string(std::getenv("TMPDIR") ? std::getenv("TMPDIR") : "/tmp") + "/" + stem;
}

}  // namespace

TEST_CASE("scripted rule matches tag and payload substring") {
    ScriptedBackend backend({{"EEA", "Aspirin", "{\"entities\":[]}"}});
    auto resp = backend.complete(req_for("EEA", "Find entities in: Aspirin treats headache."));
    CHECK(resp.text == "{\"entities\":[]}");
    CHECK(resp.backend_id == "scripted");
}

TEST_CASE("scripted no-match without default is a script gap") {
    ScriptedBackend backend({{"EEA", "Aspirin", "x"}});
    try {
        backend.complete(req_for("REA", "something else"));
        FAIL("expected script gap");
    } catch (const BackendError& e) {
        CHECK(e.kind() == BackendError::Kind::ScriptGap);
    }
}

TEST_CASE("scripted default catches the fallthrough") {
    ScriptedBackend backend({{"EEA", "Aspirin", "x"}}, "default body");
    CHECK(backend.complete(req_for("REA", "anything")).text == "default body");
}

TEST_CASE("first matching rule wins") {
    ScriptedBackend backend({
        {"EEA", "Aspirin", "first"},
        {"EEA", "Aspirin", "second"},
    });
    CHECK(backend.complete(req_for("EEA", "Aspirin")).text == "first");
}

TEST_CASE("empty tag and empty match are wildcards") {
    ScriptedBackend backend({{"", "needle", "by-payload"}, {"RA", "", "by-tag"}});
    CHECK(backend.complete(req_for("ZZZ", "has needle inside")).text == "by-payload");
    CHECK(backend.complete(req_for("RA", "no match words")).text == "by-tag");
}

TEST_CASE("regex rules match with re: prefix") {
    ScriptedBackend backend({{"", "re:score [0-9]+", "regex hit"}});
    CHECK(backend.complete(req_for("RA", "the score 42 is high")).text == "regex hit");
    CHECK_THROWS_AS(backend.complete(req_for("RA", "score none")), BackendError);
}

TEST_CASE("scripted token accounting uses word counts") {
    ScriptedBackend backend({{"", "", "a b c"}});
    auto resp = backend.complete(req_for("T", "one two three", "sys prompt"));
    CHECK(resp.prompt_tokens == 5);  // 2 system + 3 payload
    CHECK(resp.completion_tokens == 3);
}

TEST_CASE("scripted backend is a pure function of rules and request") {
    std::vector<ScriptedRule> rules = {{"A", "x", "r1"}, {"", "", "r2"}};
    ScriptedBackend b1(rules), b2(rules);
    for (const auto& r : {req_for("A", "x marks"), req_for("B", "anything")}) {
        auto r1 = b1.complete(r), r2 = b2.complete(r);
        CHECK(r1.text == r2.text);
        CHECK(r1.prompt_tokens == r2.prompt_tokens);
        CHECK(r1.completion_tokens == r2.completion_tokens);
    }
}

TEST_CASE("empty ledger is all zero") {
    Gateway gw(std::make_shared<ScriptedBackend>(std::vector<ScriptedRule>{}, "d"), fast_opts());
    auto report = gw.ledger_report();
    CHECK(report.global.calls == 0);
    CHECK(report.global.prompt_tokens == 0);
    CHECK(report.global.completion_tokens == 0);
    CHECK(report.per_tag.empty());
}

TEST_CASE("ledger totals match hand sums") {
    // word counts give prompt/completion pairs (10,20), (5,5), (1,0)
    Gateway gw(std::make_shared<ScriptedBackend>(
                   std::vector<ScriptedRule>{
                       {"A", "", "c c c c c c c c c c c c c c c c c c c c"},
                       {"B", "lead", "r r r r r"},
                   },
                   ""),
               fast_opts());
    gw.complete(req_for("A", "w w w w w w w w w", "s"));
    gw.complete(req_for("B", "lead w w w", "s"));
    gw.complete(req_for("B", "", "s"));  // default "" -> 0 completion words
    auto report = gw.ledger_report();
    CHECK(report.global.prompt_tokens == 16);
    CHECK(report.global.completion_tokens == 25);
    CHECK(report.global.calls == 3);
    CHECK(report.per_tag.at("A").prompt_tokens == 10);
    CHECK(report.per_tag.at("A").completion_tokens == 20);
    CHECK(report.per_tag.at("B").prompt_tokens == 6);
    CHECK(report.per_tag.at("B").completion_tokens == 5);
    CHECK(report.per_tag.at("B").calls == 2);
}

TEST_CASE("per-tag totals partition the global totals") {
    Gateway gw(std::make_shared<ScriptedBackend>(std::vector<ScriptedRule>{}, "x y z"),
               fast_opts());
    std::mt19937 rng(3);
    for (int i = 0; i < 40; ++i) {
        std::string payload(1 + rng() % 7, 'p');
        std::string spaced;
        for (char c : payload) (spaced += c) += ' ';
        gw.complete(req_for(i % 2 ? "REA" : "EEA", spaced));
    }
    auto report = gw.ledger_report();
    long prompt = 0, completion = 0, calls = 0;
    for (const auto& [tag, t] : report.per_tag) {
        prompt += t.prompt_tokens;
        completion += t.completion_tokens;
        calls += t.calls;
    }
    CHECK(prompt == report.global.prompt_tokens);
    CHECK(completion == report.global.completion_tokens);
    CHECK(calls == report.global.calls);

    // oracle: recompute from the raw call log
    long log_prompt = 0;
    for (const auto& rec : gw.call_log()) log_prompt += rec.prompt_tokens;
    CHECK(log_prompt == report.global.prompt_tokens);
}

TEST_CASE("transient failures retry and record one logical call") {
    auto flaky = std::make_shared<FlakyBackend>(2);
    Gateway gw(flaky, fast_opts(3));
    auto resp = gw.complete(req_for("T", "x"));
    CHECK(resp.text == "ok");
    CHECK(flaky->attempts_seen == 3);
    auto log = gw.call_log();
    REQUIRE(log.size() == 1);
    CHECK(log[0].attempts == 3);
    CHECK(gw.ledger_report().global.calls == 1);
}

TEST_CASE("exhausted retries become backend-unavailable") {
    auto flaky = std::make_shared<FlakyBackend>(10);
    Gateway gw(flaky, fast_opts(3));
    try {
        gw.complete(req_for("T", "x"));
        FAIL("expected unavailable");
    } catch (const BackendError& e) {
        CHECK(e.kind() == BackendError::Kind::Unavailable);
    }
    CHECK(flaky->attempts_seen == 3);
    CHECK(gw.ledger_report().global.calls == 0);  // only completed calls count
}

TEST_CASE("non-transient errors do not retry") {
    auto flaky = std::make_shared<FlakyBackend>(10, BackendError::Kind::ScriptGap);
    Gateway gw(flaky, fast_opts(3));
    CHECK_THROWS_AS(gw.complete(req_for("T", "x")), BackendError);
    CHECK(flaky->attempts_seen == 1);
}

TEST_CASE("gateway is safe under concurrent calls") {
    Gateway gw(std::make_shared<ScriptedBackend>(std::vector<ScriptedRule>{}, "r r r"),
               fast_opts(3, 2));
    std::vector<std::thread> workers;
    for (int w = 0; w < 4; ++w)
        workers.emplace_back([&gw, w] {
            for (int i = 0; i < 25; ++i)
                gw.complete(req_for("tag" + std::to_string(w), "p q"));
        });
    for (auto& t : workers) t.join();
    auto report = gw.ledger_report();
    CHECK(report.global.calls == 100);
    long per_tag_calls = 0;
    for (const auto& [tag, t] : report.per_tag) per_tag_calls += t.calls;
    CHECK(per_tag_calls == 100);
}

TEST_CASE("rules load from a jsonl file") {
    auto path = temp_path("karma_rules.jsonl");
    {
        std::ofstream out(path);
        out << R"({"tag":"EEA","match":"Aspirin","response":"{\"entities\":[]}"})" << "\n";
        out << "\n";
        out << R"({"tag":"","match":"","response":"fallback"})" << "\n";
    }
    auto rules = load_rules(path);
    REQUIRE(rules.size() == 2);
    CHECK(rules[0].tag == "EEA");
    CHECK(rules[1].response == "fallback");
    ScriptedBackend backend(rules);
    CHECK(backend.complete(req_for("EEA", "about Aspirin")).text == "{\"entities\":[]}");
    CHECK(backend.complete(req_for("Q", "nothing")).text == "fallback");

    {
        std::ofstream out(path);
        out << "{broken\n";
    }
    CHECK_THROWS_AS(load_rules(path), InvalidInputError);
    std::remove(path.c_str());
}

TEST_CASE("ledger report serializes with and without timings") {
    Gateway gw(std::make_shared<ScriptedBackend>(std::vector<ScriptedRule>{}, "one"), fast_opts());
    gw.complete(req_for("RA", "a b"));
    auto report = gw.ledger_report();
    auto with = report.to_json(true);
    auto without = report.to_json(false);
    CHECK(with.find("latency_ms") != std::string::npos);
    CHECK(without.find("latency_ms") == std::string::npos);
    CHECK(without.find("\"RA\":{\"calls\":1,\"prompt_tokens\":6,\"completion_tokens\":1}") !=
          std::string::npos);
}

// --- live HTTP backend against a local server ---

namespace {

struct TestServer {
    httplib::Server server;
    std::thread thread;
    int port = 0;
    std::atomic<int> hits{0};

    explicit TestServer(std::function<void(const httplib::Request&, httplib::Response&, int)> fn) {
        server.Post("/v1/chat/completions",
                    [this, fn](const httplib::Request& req, httplib::Response& res) {
                        fn(req, res, ++hits);
                    });
        port = server.bind_to_any_port("127.0.0.1");
        thread = std::thread([this] { server.listen_after_bind(); });
        server.wait_until_ready();
    }

    ~TestServer() {
        server.stop();
        thread.join();
    }

    HttpChatBackend::Options options() const {
        HttpChatBackend::Options o;
        o.base_url = "http://127.0.0.1:" + std::to_string(port);
        o.api_key_env = "KARMA_TEST_ABSENT_KEY";
        return o;
    }
};

void reply_ok(httplib::Response& res, const std::string& content, bool usage = true) {
    nlohmann::json body = {
        {"choices", {{{"message", {{"role", "assistant"}, {"content", content}}}}}}};
    if (usage) body["usage"] = {{"prompt_tokens", 11}, {"completion_tokens", 7}};
    res.set_content(body.dump(), "application/json");
}

}  // namespace

TEST_CASE("http backend round-trips an openai-shaped exchange") {
    TestServer server([](const httplib::Request& req, httplib::Response& res, int) {
        auto j = nlohmann::json::parse(req.body);
        REQUIRE(j["messages"].size() == 2);
        CHECK(j["messages"][0]["role"] == "system");
        CHECK(j["temperature"].get<double>() == 0.0);
        reply_ok(res, "model says: " + j["messages"][1]["content"].get<std::string>());
    });
    Gateway gw(std::make_shared<HttpChatBackend>(server.options()), fast_opts());
    auto resp = gw.complete(req_for("EEA", "hello"));
    CHECK(resp.text == "model says: hello");
    CHECK(resp.prompt_tokens == 11);
    CHECK(resp.completion_tokens == 7);
    CHECK(resp.backend_id.rfind("http:", 0) == 0);
}

TEST_CASE("http 5xx retries then succeeds") {
    TestServer server([](const httplib::Request&, httplib::Response& res, int hit) {
        if (hit < 3) {
            res.status = 503;
            return;
        }
        reply_ok(res, "recovered");
    });
    Gateway gw(std::make_shared<HttpChatBackend>(server.options()), fast_opts(3));
    auto resp = gw.complete(req_for("RA", "x"));
    CHECK(resp.text == "recovered");
    CHECK(server.hits == 3);
    auto log = gw.call_log();
    REQUIRE(log.size() == 1);
    CHECK(log[0].attempts == 3);
}

TEST_CASE("http 429 is transient, 400 is not") {
    TestServer server([](const httplib::Request&, httplib::Response& res, int hit) {
        res.status = hit == 1 ? 429 : 400;
        res.set_content("bad request body", "text/plain");
    });
    Gateway gw(std::make_shared<HttpChatBackend>(server.options()), fast_opts(3));
    try {
        gw.complete(req_for("RA", "x"));
        FAIL("expected failure");
    } catch (const BackendError& e) {
        CHECK(e.kind() == BackendError::Kind::Unavailable);  // 400 after one retry of the 429
    }
    CHECK(server.hits == 2);
}

TEST_CASE("http missing usage falls back to word counts") {
    TestServer server([](const httplib::Request&, httplib::Response& res, int) {
        reply_ok(res, "three word reply", /*usage=*/false);
    });
    Gateway gw(std::make_shared<HttpChatBackend>(server.options()), fast_opts());
    auto resp = gw.complete(req_for("SA", "two words", "sys"));
    CHECK(resp.prompt_tokens == 3);
    CHECK(resp.completion_tokens == 3);
}

TEST_CASE("unreachable host is transient then unavailable") {
    HttpChatBackend::Options o;
    o.base_url = "http://127.0.0.1:9";  // discard port, nothing listens
    o.api_key_env = "KARMA_TEST_ABSENT_KEY";
    o.timeout_seconds = 1;
    Gateway gw(std::make_shared<HttpChatBackend>(o), fast_opts(2));
    try {
        gw.complete(req_for("T", "x"));
        FAIL("expected unavailable");
    } catch (const BackendError& e) {
        CHECK(e.kind() == BackendError::Kind::Unavailable);
    }
}
