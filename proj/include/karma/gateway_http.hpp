#pragma once

// Live OpenAI-compatible chat client. Kept out of gateway.hpp so that the
// heavy httplib include is only paid where a live backend is constructed.

#include <cstdlib>
#include <map>
#include <string>

#include <httplib.h>
#include <json.hpp>

#include "errors.hpp"
#include "gateway.hpp"
#include "util.hpp"

namespace karma {

class HttpChatBackend : public ChatBackend {
public:
    struct Options {
        std::string base_url = "http://localhost:8080";  // scheme://host[:port]
        std::string path_prefix = "/v1";
        std::string model = "deepseek-v3";
        std::map<std::string, std::string> model_by_tag;  // optional per-agent override
        std::string api_key_env = "KARMA_API_KEY";
        int timeout_seconds = 60;
    };

    explicit HttpChatBackend(Options opts) : opts_(std::move(opts)) {
        if (const char* key = std::getenv(opts_.api_key_env.c_str())) api_key_ = key;
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

        httplib::Client client(opts_.base_url);
        client.set_connection_timeout(opts_.timeout_seconds);
        client.set_read_timeout(opts_.timeout_seconds);
        httplib::Headers headers;
        if (!api_key_.empty()) headers.emplace("Authorization", "Bearer " + api_key_);

        auto res = client.Post(opts_.path_prefix + "/chat/completions", headers, body.dump(),
                               "application/json");
        if (!res)
            throw BackendError(BackendError::Kind::Transient,
                               "transport error: " + httplib::to_string(res.error()));
        if (res->status == 429 || res->status >= 500)
            throw BackendError(BackendError::Kind::Transient,
                               "http " + std::to_string(res->status));
        if (res->status != 200)
            throw BackendError(BackendError::Kind::Unavailable,
                               "http " + std::to_string(res->status) + ": " +
                                   truncate_words(res->body, 40));

        nlohmann::json j;
        try {
            j = nlohmann::json::parse(res->body);
        } catch (const nlohmann::json::exception& e) {
            throw BackendError(BackendError::Kind::Transient,
                               std::string("unparseable response body: ") + e.what());
        }
        ChatResponse resp;
        try {
            resp.text = j.at("choices").at(0).at("message").at("content").get<std::string>();
        } catch (const nlohmann::json::exception& e) {
            throw BackendError(BackendError::Kind::Transient,
                               std::string("response missing choices: ") + e.what());
        }
        if (j.contains("usage")) {
            resp.prompt_tokens = j["usage"].value("prompt_tokens", 0);
            resp.completion_tokens = j["usage"].value("completion_tokens", 0);
        } else {
            // no usage block: approximate with whitespace word counts
            resp.prompt_tokens =
                static_cast<long>(word_count(req.system_prompt) + word_count(req.user_payload));
            resp.completion_tokens = static_cast<long>(word_count(resp.text));
        }
        resp.backend_id = id();
        return resp;
    }

    std::string id() const override { return "http:" + opts_.model; }

private:
    const std::string& model_for(const std::string& tag) const {
        auto it = opts_.model_by_tag.find(tag);
        return it == opts_.model_by_tag.end() ? opts_.model : it->second;
    }

    Options opts_;
    std::string api_key_;
};

}  // namespace karma
