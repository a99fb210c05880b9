#pragma once

#include <fstream>
#include <map>
#include <string>
#include <vector>

#include "errors.hpp"
#include "pipeline.hpp"

namespace karma {

// Everything a run needs beyond the corpus itself: pipeline knobs plus
// backend wiring. File values load first; command-line flags override.
struct AppConfig {
    PipelineConfig pipeline;
    std::string ablation = "none";  // none | no-summarizer | no-cra | no-evaluator
    std::string rules_path;
    std::string ontology_path;
    std::string prompt_dir;
    std::string base_url = "https://api.openai.com/v1";
    std::string model = "gpt-4o";
    std::map<std::string, std::string> model_overrides;  // agent tag -> model
    std::string api_key_env = "KARMA_API_KEY";
    int max_in_flight = 4;
    int retries = 3;
    int timeout_seconds = 60;

    // Folds the ablation name into the pipeline switches.
    void finalize() {
        pipeline.use_summarizer = true;
        pipeline.use_conflict_resolution = true;
        pipeline.use_evaluator = true;
        if (ablation == "none") {
        } else if (ablation == "no-summarizer") {
            pipeline.use_summarizer = false;
        } else if (ablation == "no-cra") {
            pipeline.use_conflict_resolution = false;
        } else if (ablation == "no-evaluator") {
            pipeline.use_evaluator = false;
        } else {
            throw ConfigError("unknown ablation \"" + ablation +
                              "\" (expected none, no-summarizer, no-cra, no-evaluator)");
        }
    }
};

namespace detail {

inline double config_double(const std::string& key, const std::string& value) {
    try {
        size_t used = 0;
        double d = std::stod(value, &used);
        if (used != value.size()) throw std::invalid_argument(value);
        return d;
    } catch (const std::exception&) {
        throw ConfigError(key + ": not a number: \"" + value + "\"");
    }
}

inline long config_long(const std::string& key, const std::string& value) {
    try {
        size_t used = 0;
        long v = std::stol(value, &used);
        if (used != value.size()) throw std::invalid_argument(value);
        return v;
    } catch (const std::exception&) {
        throw ConfigError(key + ": not an integer: \"" + value + "\"");
    }
}

inline std::vector<double> config_weights(const std::string& key, const std::string& value) {
    std::vector<double> out;
    if (trim(value).empty()) return out;  // identity weights
    for (const auto& part : split(value, ',')) out.push_back(config_double(key, trim(part)));
    return out;
}

}  // namespace detail

inline void apply_config_entry(AppConfig& cfg, const std::string& key,
                               const std::string& value) {
    if (key == "delta") {
        cfg.pipeline.delta = detail::config_double(key, value);
    } else if (key == "skip_threshold") {
        cfg.pipeline.skip_threshold = detail::config_double(key, value);
    } else if (key == "rho") {
        cfg.pipeline.rho = detail::config_double(key, value);
    } else if (key == "theta") {
        cfg.pipeline.theta_default = detail::config_double(key, value);
    } else if (key.rfind("theta.", 0) == 0) {
        std::string relation = key.substr(6);
        if (relation.empty()) throw ConfigError("theta override without a relation name");
        cfg.pipeline.theta_overrides[relation] = detail::config_double(key, value);
    } else if (key == "integrate_threshold") {
        cfg.pipeline.integrate_threshold = detail::config_double(key, value);
    } else if (key == "escalation") {
        cfg.pipeline.escalation = detail::config_double(key, value);
    } else if (key == "alpha") {
        cfg.pipeline.weights.alpha = detail::config_weights(key, value);
    } else if (key == "beta") {
        cfg.pipeline.weights.beta = detail::config_weights(key, value);
    } else if (key == "gamma") {
        cfg.pipeline.weights.gamma = detail::config_weights(key, value);
    } else if (key == "word_limit") {
        cfg.pipeline.word_limit = static_cast<int>(detail::config_long(key, value));
    } else if (key == "seed") {
        cfg.pipeline.seed = static_cast<uint64_t>(detail::config_long(key, value));
    } else if (key == "workers") {
        cfg.pipeline.worker_count = static_cast<int>(detail::config_long(key, value));
    } else if (key == "ablation") {
        cfg.ablation = value;
    } else if (key == "backend") {
        if (value != "scripted" && value != "live")
            throw ConfigError("backend must be scripted or live, got \"" + value + "\"");
        cfg.pipeline.backend = value;
    } else if (key == "rules") {
        cfg.rules_path = value;
    } else if (key == "ontology") {
        cfg.ontology_path = value;
    } else if (key == "prompts") {
        cfg.prompt_dir = value;
    } else if (key == "base_url") {
        cfg.base_url = value;
    } else if (key == "model") {
        cfg.model = value;
    } else if (key.rfind("model.", 0) == 0) {
        std::string tag = key.substr(6);
        if (tag.empty()) throw ConfigError("model override without an agent tag");
        cfg.model_overrides[tag] = value;
    } else if (key == "api_key_env") {
        cfg.api_key_env = value;
    } else if (key == "max_in_flight") {
        cfg.max_in_flight = static_cast<int>(detail::config_long(key, value));
    } else if (key == "retries") {
        cfg.retries = static_cast<int>(detail::config_long(key, value));
    } else if (key == "timeout_seconds") {
        cfg.timeout_seconds = static_cast<int>(detail::config_long(key, value));
    } else {
        throw ConfigError("unknown config key \"" + key + "\"");
    }
}

// Plain key=value lines; blank lines and # comments are skipped.
inline AppConfig load_config(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw ConfigError("cannot read config file: " + path);
    AppConfig cfg;
    std::string line;
    size_t lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        std::string text = trim(line);
        if (text.empty() || text[0] == '#') continue;
        auto eq = text.find('=');
        if (eq == std::string::npos)
            throw ConfigError(path + ":" + std::to_string(lineno) + ": expected key=value");
        std::string key = trim(text.substr(0, eq));
        std::string value = trim(text.substr(eq + 1));
        if (key.empty())
            throw ConfigError(path + ":" + std::to_string(lineno) + ": empty key");
        try {
            apply_config_entry(cfg, key, value);
        } catch (const ConfigError& e) {
            throw ConfigError(path + ":" + std::to_string(lineno) + ": " + e.what());
        }
    }
    return cfg;
}

}  // namespace karma
