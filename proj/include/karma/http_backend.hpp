#pragma once

#include <chrono>
#include <map>
#include <string>

#include <httplib.h>
#include <json.hpp>

#include "errors.hpp"
#include "gateway.hpp"

namespace karma {

struct HttpBackendConfig {
    std::string base_url = "https://api.openai.com/v1";
    std::string model = "gpt-4o";
    std::string api_key;
    std::map<std::string, std::string> model_overrides;  // agent tag -> model
    int timeout_seconds = 60;
};

// OpenAI-compatible chat completions client. One attempt per call; the
// gateway owns the retry schedule, so transient transport faults and
// 429/5xx statuses surface as Transient and everything else is final.
class HttpBackend : public ChatBackend {
public:
    explicit HttpBackend(HttpBackendConfig cfg) : cfg_(std::move(cfg)) {
        auto scheme_end = cfg_.base_url.find("://");
        if (scheme_end == std::string::npos)
            throw ConfigError("base_url must start with http:// or https://: " + cfg_.base_url);
        auto path_start = cfg_.base_url.find('/', scheme_end + 3);
        if (path_start == std::string::npos) {
            origin_ = cfg_.base_url;
        } else {
            origin_ = cfg_.base_url.substr(0, path_start);
            path_prefix_ = cfg_.base_url.substr(path_start);
        }
        while (!path_prefix_.empty() && path_prefix_.back() == '/') path_prefix_.pop_back();
    }

    ChatResponse complete(const ChatRequest& req) override {
        nlohmann::json body = {
            {"model", model_for(req.tag)},
            {"messages",
             {{{"role", "system"}, {"content", req.system_prompt}},
              {{"role", "user"}, {"content", req.user_payload}}}},
            {"temperature", req.temperature},
            {"max_tokens", req.max_tokens},
        };

        httplib::Client client(origin_);
        client.set_connection_timeout(std::chrono::seconds(cfg_.timeout_seconds));
        client.set_read_timeout(std::chrono::seconds(cfg_.timeout_seconds));
        client.set_write_timeout(std::chrono::seconds(cfg_.timeout_seconds));
        httplib::Headers headers;
        if (!cfg_.api_key.empty())
            headers.emplace("Authorization", "Bearer " + cfg_.api_key);

        auto res = client.Post(path_prefix_ + "/chat/completions", headers, body.dump(),
                               "application/json");
        if (!res)
            throw BackendError(BackendError::Kind::Transient,
                               "transport error: " + httplib::to_string(res.error()));
        if (res->status == 429 || res->status >= 500)
            throw BackendError(BackendError::Kind::Transient,
                               "HTTP " + std::to_string(res->status) + " from " + origin_);
        if (res->status != 200)
            throw BackendError(BackendError::Kind::Unavailable,
                               "HTTP " + std::to_string(res->status) + ": " +
                                   truncate_words(res->body, 40));

        nlohmann::json parsed = nlohmann::json::parse(res->body, nullptr, false);
        if (parsed.is_discarded() || !parsed.contains("choices") ||
            !parsed["choices"].is_array() || parsed["choices"].empty() ||
            !parsed["choices"][0].contains("message") ||
            !parsed["choices"][0]["message"].contains("content") ||
            !parsed["choices"][0]["message"]["content"].is_string())
            throw BackendError(BackendError::Kind::Unavailable,
                               "malformed completion response from " + origin_);

        ChatResponse out;
        out.text = parsed["choices"][0]["message"]["content"].get<std::string>();
        if (parsed.contains("usage") && parsed["usage"].is_object()) {
            const auto& usage = parsed["usage"];
            if (usage.contains("prompt_tokens") && usage["prompt_tokens"].is_number())
                out.prompt_tokens = usage["prompt_tokens"].get<long>();
            if (usage.contains("completion_tokens") && usage["completion_tokens"].is_number())
                out.completion_tokens = usage["completion_tokens"].get<long>();
        }
        if (out.prompt_tokens < 0) out.prompt_tokens = 0;
        if (out.completion_tokens < 0) out.completion_tokens = 0;
        out.backend_id = id();
        return out;
    }

    std::string id() const override { return "live:" + cfg_.model; }

    const std::string& origin() const { return origin_; }
    const std::string& path_prefix() const { return path_prefix_; }

private:
    std::string model_for(const std::string& tag) const {
        auto it = cfg_.model_overrides.find(tag);
        return it != cfg_.model_overrides.end() ? it->second : cfg_.model;
    }

    HttpBackendConfig cfg_;
    std::string origin_;
    std::string path_prefix_;
};

}  // namespace karma
