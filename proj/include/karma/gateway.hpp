#pragma once

#include <chrono>
#include <fstream>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <regex>
#include <semaphore>
#include <string>
#include <thread>
#include <vector>

#include <json.hpp>

#include "errors.hpp"
#include "util.hpp"

namespace karma {

struct ChatRequest {
    std::string system_prompt;
    std::string user_payload;
    double temperature = 0.0;
    int max_tokens = 1024;
    std::string tag;  // agent name, keys the accounting ledger
};

struct ChatResponse {
    std::string text;
    long prompt_tokens = 0;
    long completion_tokens = 0;
    std::chrono::microseconds latency{0};
    std::string backend_id;
};

class ChatBackend {
public:
    virtual ~ChatBackend() = default;
    // One attempt; retry policy lives in the Gateway.
    virtual ChatResponse complete(const ChatRequest& req) = 0;
    virtual std::string id() const = 0;
};

// One scripted rule. Empty tag matches any tag; empty match matches any
// payload; match prefixed "re:" is a regex, otherwise a substring test.
struct ScriptedRule {
    std::string tag;
    std::string match;
    std::string response;
};

class ScriptedBackend : public ChatBackend {
public:
    explicit ScriptedBackend(std::vector<ScriptedRule> rules,
                             std::optional<std::string> default_response = std::nullopt)
        : rules_(std::move(rules)), default_response_(std::move(default_response)) {}

    ChatResponse complete(const ChatRequest& req) override {
        const std::string* body = nullptr;
        for (const auto& rule : rules_) {
            if (!rule.tag.empty() && rule.tag != req.tag) continue;
            if (!matches(rule.match, req.user_payload)) continue;
            body = &rule.response;
            break;  // first match wins
        }
        if (!body) {
            if (!default_response_)
                throw BackendError(BackendError::Kind::ScriptGap,
                                   "no scripted rule for tag=" + req.tag + " payload \"" +
                                       truncate_words(req.user_payload, 12) + "...\"");
            body = &*default_response_;
        }
        ChatResponse resp;
        resp.text = *body;
        resp.prompt_tokens =
            static_cast<long>(word_count(req.system_prompt) + word_count(req.user_payload));
        resp.completion_tokens = static_cast<long>(word_count(resp.text));
        resp.backend_id = id();
        return resp;
    }

    std::string id() const override { return "scripted"; }

    size_t rule_count() const { return rules_.size(); }

private:
    static bool matches(const std::string& pattern, const std::string& payload) {
        if (pattern.empty()) return true;
        if (pattern.rfind("re:", 0) == 0)
            return std::regex_search(payload, std::regex(pattern.substr(3)));
        return payload.find(pattern) != std::string::npos;
    }

    std::vector<ScriptedRule> rules_;
    std::optional<std::string> default_response_;
};

inline std::vector<ScriptedRule> load_rules(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw InvalidInputError("cannot read rules file: " + path);
    std::vector<ScriptedRule> rules;
    std::string line;
    size_t lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        if (trim(line).empty()) continue;
        nlohmann::json j;
        try {
            j = nlohmann::json::parse(line);
        } catch (const nlohmann::json::exception& e) {
            throw InvalidInputError(path + ":" + std::to_string(lineno) + ": " + e.what());
        }
        ScriptedRule r;
        r.tag = j.value("tag", "");
        r.match = j.value("match", "");
        r.response = j.value("response", "");
        rules.push_back(std::move(r));
    }
    return rules;
}

struct TagTotals {
    long prompt_tokens = 0;
    long completion_tokens = 0;
    long calls = 0;
    std::chrono::microseconds latency{0};
};

struct CallRecord {
    std::string tag;
    long prompt_tokens = 0;
    long completion_tokens = 0;
    int attempts = 1;
    std::chrono::microseconds latency{0};
};

struct LedgerReport {
    std::map<std::string, TagTotals> per_tag;
    TagTotals global;

    // Cost-report serialization; latency in ms so the report is unit-stable.
    std::string to_json(bool include_timings = true) const {
        auto one = [&](const TagTotals& t) {
            std::string s = "{\"calls\":" + std::to_string(t.calls) +
                            ",\"prompt_tokens\":" + std::to_string(t.prompt_tokens) +
                            ",\"completion_tokens\":" + std::to_string(t.completion_tokens);
            if (include_timings)
                s += ",\"latency_ms\":" + format_score(t.latency.count() / 1000.0);
            return s + "}";
        };
        std::string out = "{\"global\":" + one(global) + ",\"per_tag\":{";
        bool first = true;
        for (const auto& [tag, totals] : per_tag) {
            if (!first) out.push_back(',');
            first = false;
            out += json_quote(tag) + ":" + one(totals);
        }
        return out + "}}";
    }
};

struct GatewayOptions {
    int retries = 3;                            // attempts, not extra tries
    std::chrono::milliseconds backoff_base{1000};  // 1s, then 2s, then 4s
    int max_in_flight = 4;
};

// Single choke-point for model calls: bounds concurrency, applies the retry
// policy to transient failures, and keeps the token/latency ledger.
class Gateway {
public:
    explicit Gateway(std::shared_ptr<ChatBackend> backend, GatewayOptions opts = {})
        : backend_(std::move(backend)),
          opts_(opts),
          slots_(opts.max_in_flight > 0 ? opts.max_in_flight : 1) {
        if (opts_.retries < 1) throw ConfigError("retries must be >= 1");
    }

    ChatResponse complete(const ChatRequest& req) {
        slots_.acquire();
        struct Release {
            std::counting_semaphore<>& s;
            ~Release() { s.release(); }
        } release{slots_};

        std::chrono::microseconds total_latency{0};
        int attempt = 0;
        while (true) {
            ++attempt;
            auto start = std::chrono::steady_clock::now();
            try {
                ChatResponse resp = backend_->complete(req);
                auto elapsed = std::chrono::duration_cast<std::chrono::microseconds>(
                    std::chrono::steady_clock::now() - start);
                resp.latency = total_latency + elapsed;
                record(req.tag, resp, attempt);
                return resp;
            } catch (const BackendError& e) {
                total_latency += std::chrono::duration_cast<std::chrono::microseconds>(
                    std::chrono::steady_clock::now() - start);
                if (e.kind() != BackendError::Kind::Transient) throw;
                if (attempt >= opts_.retries)
                    throw BackendError(BackendError::Kind::Unavailable,
                                       std::string("retries exhausted: ") + e.what());
                std::this_thread::sleep_for(opts_.backoff_base * (1 << (attempt - 1)));
            }
        }
    }

    LedgerReport ledger_report() const {
        std::lock_guard<std::mutex> lock(mu_);
        LedgerReport report;
        for (const auto& rec : log_) {
            for (TagTotals* t : {&report.per_tag[rec.tag], &report.global}) {
                t->prompt_tokens += rec.prompt_tokens;
                t->completion_tokens += rec.completion_tokens;
                t->calls += 1;
                t->latency += rec.latency;
            }
        }
        return report;
    }

    std::vector<CallRecord> call_log() const {
        std::lock_guard<std::mutex> lock(mu_);
        return log_;
    }

    const ChatBackend& backend() const { return *backend_; }

private:
    void record(const std::string& tag, const ChatResponse& resp, int attempts) {
        std::lock_guard<std::mutex> lock(mu_);
        log_.push_back({tag, resp.prompt_tokens, resp.completion_tokens, attempts, resp.latency});
    }

    std::shared_ptr<ChatBackend> backend_;
    GatewayOptions opts_;
    std::counting_semaphore<> slots_;
    mutable std::mutex mu_;
    std::vector<CallRecord> log_;
};

}  // namespace karma
