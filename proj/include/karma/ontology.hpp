#pragma once

#include <fstream>
#include <map>
#include <optional>
#include <string>

#include <json.hpp>

#include "errors.hpp"
#include "kg.hpp"
#include "util.hpp"

namespace karma {

struct DictEntry {
    std::string id;
    std::string type;
};

// Surface-form dictionary backing the extraction filter and id lookup.
// Lookups are case-insensitive on the trimmed mention.
class Dictionary {
public:
    void add(const std::string& form, const std::string& id, const std::string& type) {
        std::string key = to_lower(trim(form));
        if (key.empty()) return;
        by_form_.emplace(key, DictEntry{id, type});  // first writer wins
    }

    std::optional<DictEntry> lookup(const std::string& mention) const {
        auto it = by_form_.find(to_lower(trim(mention)));
        if (it == by_form_.end()) return std::nullopt;
        return it->second;
    }

    size_t size() const { return by_form_.size(); }

    static Dictionary from_graph(const KnowledgeGraph& graph) {
        Dictionary d;
        for (const auto& [id, e] : graph.entities())
            for (const auto& form : e.surface_forms) d.add(form, id, e.entity_type);
        return d;
    }

private:
    std::map<std::string, DictEntry> by_form_;
};

// JSONL: {"id":...,"type":...,"surface_forms":[...]} per line.
inline Dictionary load_dictionary(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw InvalidInputError("cannot read ontology file: " + path);
    Dictionary d;
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
        const std::string id = j.value("id", "");
        const std::string type = j.value("type", "Other");
        if (id.empty())
            throw InvalidInputError(path + ":" + std::to_string(lineno) + ": missing id");
        for (const auto& f : j.value("surface_forms", nlohmann::json::array()))
            d.add(f.get<std::string>(), id, type);
    }
    return d;
}

}  // namespace karma
