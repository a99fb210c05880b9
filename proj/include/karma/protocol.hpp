#pragma once

#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <string>
#include <variant>
#include <vector>

#include <json.hpp>

#include "errors.hpp"
#include "gateway.hpp"
#include "util.hpp"

namespace karma {

// --- prompt templates ---

struct PromptTemplate {
    std::string agent;
    std::string body;  // placeholders written {{name}}
    std::string version;
};

// Single left-to-right pass, so substituted values are never re-scanned.
inline std::string render(const PromptTemplate& tmpl,
                          const std::map<std::string, std::string>& bindings) {
    std::string out;
    out.reserve(tmpl.body.size());
    size_t i = 0;
    const std::string& body = tmpl.body;
    while (i < body.size()) {
        size_t open = body.find("{{", i);
        if (open == std::string::npos) {
            out.append(body, i, body.size() - i);
            break;
        }
        out.append(body, i, open - i);
        size_t close = body.find("}}", open + 2);
        if (close == std::string::npos)
            throw TemplateError("unterminated placeholder in template for " + tmpl.agent);
        std::string name = body.substr(open + 2, close - open - 2);
        auto it = bindings.find(name);
        if (it == bindings.end())
            throw TemplateError("unbound placeholder {{" + name + "}} in template for " +
                                tmpl.agent);
        out += it->second;
        i = close + 2;
    }
    return out;
}

class PromptCatalog {
public:
    void put(PromptTemplate tmpl) { by_agent_[tmpl.agent] = std::move(tmpl); }

    const PromptTemplate& get(const std::string& agent) const {
        auto it = by_agent_.find(agent);
        if (it == by_agent_.end()) throw TemplateError("no prompt template for agent " + agent);
        return it->second;
    }

    bool has(const std::string& agent) const { return by_agent_.count(agent) > 0; }
    size_t size() const { return by_agent_.size(); }

    // One text file per agent: "agent: X\nversion: N\n---\n<body>".
    static PromptCatalog load_dir(const std::string& dir) {
        namespace fs = std::filesystem;
        if (!fs::is_directory(dir)) throw InvalidInputError("prompt dir not found: " + dir);
        PromptCatalog catalog;
        std::vector<fs::path> files;
        for (const auto& entry : fs::directory_iterator(dir))
            if (entry.is_regular_file() && entry.path().extension() == ".txt")
                files.push_back(entry.path());
        std::sort(files.begin(), files.end());
        for (const auto& path : files) {
            std::ifstream in(path, std::ios::binary);
            std::string text((std::istreambuf_iterator<char>(in)),
                             std::istreambuf_iterator<char>());
            catalog.put(parse_prompt_file(path.string(), text));
        }
        if (catalog.size() == 0) throw InvalidInputError("prompt dir has no .txt files: " + dir);
        return catalog;
    }

private:
    static PromptTemplate parse_prompt_file(const std::string& path, const std::string& text) {
        size_t sep = text.find("\n---\n");
        if (sep == std::string::npos)
            throw InvalidInputError(path + ": missing front-matter separator ---");
        PromptTemplate tmpl;
        for (const auto& line : split(text.substr(0, sep), '\n')) {
            auto colon = line.find(':');
            if (colon == std::string::npos) continue;
            std::string key = trim(line.substr(0, colon));
            std::string value = trim(line.substr(colon + 1));
            if (key == "agent") tmpl.agent = value;
            else if (key == "version") tmpl.version = value;
        }
        if (tmpl.agent.empty()) throw InvalidInputError(path + ": front matter lacks agent");
        if (tmpl.version.empty()) throw InvalidInputError(path + ": front matter lacks version");
        tmpl.body = text.substr(sep + 5);
        return tmpl;
    }

    std::map<std::string, PromptTemplate> by_agent_;
};

// --- message shapes, one variant per agent ---

struct DocumentMetadata {
    std::string title = "N/A";
    std::string authors = "N/A";
    std::string journal = "N/A";
    std::string pub_date = "N/A";
    std::string doi = "N/A";
    std::string pmid = "N/A";

    bool operator==(const DocumentMetadata&) const = default;
};

struct IaMessage {
    DocumentMetadata metadata;
    std::string content;
    bool error = false;

    bool operator==(const IaMessage&) const = default;
};

struct RaSegment {
    std::string text;
    double score = 0.0;
    bool operator==(const RaSegment&) const = default;
};

struct RaMessage {
    std::vector<RaSegment> segments;
    bool operator==(const RaMessage&) const = default;
};

struct SaSummary {
    std::string original_text;
    std::string summary;
    double score = 0.0;
    bool operator==(const SaSummary&) const = default;
};

struct SaMessage {
    std::vector<SaSummary> summaries;
    bool operator==(const SaMessage&) const = default;
};

struct EeaEntity {
    std::string mention;
    std::string type;
    std::string normalized_id;  // prefixed identifier or "N/A"
    bool operator==(const EeaEntity&) const = default;
};

struct EeaMessage {
    std::vector<EeaEntity> entities;
    bool operator==(const EeaMessage&) const = default;
};

struct ReaRelation {
    std::string head;
    std::string relation;
    std::string tail;
    double confidence = 1.0;  // optional on the wire
    bool operator==(const ReaRelation&) const = default;
};

struct ReaMessage {
    std::vector<ReaRelation> relationships;
    bool operator==(const ReaMessage&) const = default;
};

struct SaaAlignment {
    std::string id;
    std::string proposed_type;
    std::string status;  // mapped | new
    bool operator==(const SaaAlignment&) const = default;
};

struct SaaRelationMap {
    std::string relation;
    std::string closest_match;
    std::string status;  // mapped | new
    bool operator==(const SaaRelationMap&) const = default;
};

struct SaaMessage {
    std::vector<SaaAlignment> alignments;
    std::vector<SaaRelationMap> new_relations;
    bool operator==(const SaaMessage&) const = default;
};

struct CraMessage {
    std::string decision;  // Contradict | Agree | Ambiguous
    std::string action;    // discard | review | integrate
    std::string rationale;
    bool operator==(const CraMessage&) const = default;
};

struct EaTriplet {
    std::string head;
    std::string relation;
    std::string tail;
    double score = 0.0;
    bool operator==(const EaTriplet&) const = default;
};

// channel selects the wire field: final_confidence / final_clarity / final_relevance
struct EaMessage {
    std::string channel;
    std::vector<EaTriplet> final_triplets;
    bool operator==(const EaMessage&) const = default;
};

struct JudgeMessage {
    std::string verdict;  // likely correct | uncertain | likely incorrect
    bool operator==(const JudgeMessage&) const = default;
};

struct QaJudgeMessage {
    std::string verdict;  // plausible | implausible
    bool operator==(const QaJudgeMessage&) const = default;
};

using AgentMessage = std::variant<IaMessage, RaMessage, SaMessage, EeaMessage, ReaMessage,
                                  SaaMessage, CraMessage, EaMessage, JudgeMessage, QaJudgeMessage>;

// --- parsing ---

// First balanced JSON object/array in the text, string-escape aware.
inline std::optional<std::string> extract_first_json(const std::string& raw) {
    size_t start = raw.find_first_of("{[");
    while (start != std::string::npos) {
        char open = raw[start];
        char close = open == '{' ? '}' : ']';
        int depth = 0;
        bool in_string = false;
        bool escaped = false;
        for (size_t i = start; i < raw.size(); ++i) {
            char c = raw[i];
            if (in_string) {
                if (escaped) escaped = false;
                else if (c == '\\') escaped = true;
                else if (c == '"') in_string = false;
                continue;
            }
            if (c == '"') in_string = true;
            else if (c == open) ++depth;
            else if (c == close) {
                if (--depth == 0) return raw.substr(start, i - start + 1);
            }
        }
        start = raw.find_first_of("{[", start + 1);
    }
    return std::nullopt;
}

namespace detail {

inline nlohmann::json parse_json_or_throw(const std::string& raw) {
    size_t from = 0;
    while (true) {
        size_t start = raw.find_first_of("{[", from);
        if (start == std::string::npos)
            throw ParseError(ParseError::Kind::NoJson, "no JSON value found in output");
        auto slice = extract_first_json(raw.substr(start));
        if (!slice) throw ParseError(ParseError::Kind::NoJson, "no JSON value found in output");
        nlohmann::json j = nlohmann::json::parse(*slice, nullptr, false);
        if (!j.is_discarded()) return j;
        // balanced braces but not valid JSON; advance past this opener and retry
        from = start + 1;
    }
}

inline void warn_unknown_fields(const nlohmann::json& obj,
                                std::initializer_list<const char*> known,
                                const std::string& where, std::vector<std::string>* warnings) {
    if (!warnings || !obj.is_object()) return;
    for (const auto& [key, value] : obj.items()) {
        bool is_known = false;
        for (const char* k : known)
            if (key == k) {
                is_known = true;
                break;
            }
        if (!is_known) warnings->push_back(where + ": unknown field \"" + key + "\" ignored");
    }
}

inline const nlohmann::json& require(const nlohmann::json& obj, const char* field,
                                     const std::string& where) {
    if (!obj.is_object() || !obj.contains(field))
        throw ParseError(ParseError::Kind::SchemaViolation, where + ": missing field " + field);
    return obj.at(field);
}

inline std::string require_string(const nlohmann::json& obj, const char* field,
                                  const std::string& where) {
    const auto& v = require(obj, field, where);
    if (!v.is_string())
        throw ParseError(ParseError::Kind::SchemaViolation,
                         where + ": field " + field + " must be a string");
    return v.get<std::string>();
}

inline double require_unit_score(const nlohmann::json& obj, const char* field,
                                 const std::string& where) {
    const auto& v = require(obj, field, where);
    if (!v.is_number())
        throw ParseError(ParseError::Kind::SchemaViolation,
                         where + ": field " + field + " must be a number");
    double d = v.get<double>();
    if (!(d >= 0.0 && d <= 1.0))
        throw ParseError(ParseError::Kind::SchemaViolation,
                         where + ": field " + field + " outside [0,1]");
    return d;
}

// metadata values may be strings, arrays of strings, or absent
inline std::string metadata_field(const nlohmann::json& meta, const char* field) {
    if (!meta.contains(field)) return "N/A";
    const auto& v = meta.at(field);
    if (v.is_string()) {
        std::string s = trim(v.get<std::string>());
        return s.empty() ? "N/A" : s;
    }
    if (v.is_array()) {
        std::string joined;
        for (const auto& item : v) {
            if (!item.is_string()) continue;
            if (!joined.empty()) joined += "; ";
            joined += item.get<std::string>();
        }
        return joined.empty() ? "N/A" : joined;
    }
    if (v.is_number_integer()) return std::to_string(v.get<long long>());
    return "N/A";
}

}  // namespace detail

inline IaMessage parse_ia(const std::string& raw, std::vector<std::string>* warnings = nullptr) {
    auto j = detail::parse_json_or_throw(raw);
    detail::warn_unknown_fields(j, {"metadata", "content", "error"}, "IA", warnings);
    IaMessage msg;
    const auto& meta = detail::require(j, "metadata", "IA");
    if (!meta.is_object())
        throw ParseError(ParseError::Kind::SchemaViolation, "IA: metadata must be an object");
    detail::warn_unknown_fields(meta, {"title", "authors", "journal", "pub_date", "doi", "pmid"},
                                "IA.metadata", warnings);
    msg.metadata.title = detail::metadata_field(meta, "title");
    msg.metadata.authors = detail::metadata_field(meta, "authors");
    msg.metadata.journal = detail::metadata_field(meta, "journal");
    msg.metadata.pub_date = detail::metadata_field(meta, "pub_date");
    msg.metadata.doi = detail::metadata_field(meta, "doi");
    msg.metadata.pmid = detail::metadata_field(meta, "pmid");
    msg.content = detail::require_string(j, "content", "IA");
    msg.error = j.value("error", false);
    return msg;
}

inline RaMessage parse_ra(const std::string& raw, std::vector<std::string>* warnings = nullptr) {
    auto j = detail::parse_json_or_throw(raw);
    detail::warn_unknown_fields(j, {"segments"}, "RA", warnings);
    const auto& segments = detail::require(j, "segments", "RA");
    if (!segments.is_array())
        throw ParseError(ParseError::Kind::SchemaViolation, "RA: segments must be an array");
    RaMessage msg;
    for (const auto& s : segments) {
        detail::warn_unknown_fields(s, {"text", "score"}, "RA.segment", warnings);
        RaSegment seg;
        seg.text = detail::require_string(s, "text", "RA.segment");
        seg.score = detail::require_unit_score(s, "score", "RA.segment");
        msg.segments.push_back(std::move(seg));
    }
    return msg;
}

inline SaMessage parse_sa(const std::string& raw, std::vector<std::string>* warnings = nullptr) {
    auto j = detail::parse_json_or_throw(raw);
    detail::warn_unknown_fields(j, {"summaries"}, "SA", warnings);
    const auto& summaries = detail::require(j, "summaries", "SA");
    if (!summaries.is_array())
        throw ParseError(ParseError::Kind::SchemaViolation, "SA: summaries must be an array");
    SaMessage msg;
    for (const auto& s : summaries) {
        detail::warn_unknown_fields(s, {"original_text", "summary", "score"}, "SA.summary",
                                    warnings);
        SaSummary sum;
        sum.original_text = detail::require_string(s, "original_text", "SA.summary");
        sum.summary = detail::require_string(s, "summary", "SA.summary");
        sum.score = detail::require_unit_score(s, "score", "SA.summary");
        msg.summaries.push_back(std::move(sum));
    }
    return msg;
}

inline EeaMessage parse_eea(const std::string& raw, std::vector<std::string>* warnings = nullptr) {
    auto j = detail::parse_json_or_throw(raw);
    detail::warn_unknown_fields(j, {"entities"}, "EEA", warnings);
    const auto& entities = detail::require(j, "entities", "EEA");
    if (!entities.is_array())
        throw ParseError(ParseError::Kind::SchemaViolation, "EEA: entities must be an array");
    EeaMessage msg;
    for (const auto& e : entities) {
        detail::warn_unknown_fields(e, {"mention", "type", "normalized_id"}, "EEA.entity",
                                    warnings);
        EeaEntity ent;
        ent.mention = detail::require_string(e, "mention", "EEA.entity");
        ent.type = detail::require_string(e, "type", "EEA.entity");
        ent.normalized_id = detail::require_string(e, "normalized_id", "EEA.entity");
        if (ent.mention.empty())
            throw ParseError(ParseError::Kind::SchemaViolation, "EEA: empty mention");
        if (ent.normalized_id != "N/A" && ent.normalized_id.find(':') == std::string::npos)
            throw ParseError(ParseError::Kind::SchemaViolation,
                             "EEA: normalized_id must be prefixed or \"N/A\", got \"" +
                                 ent.normalized_id + "\"");
        msg.entities.push_back(std::move(ent));
    }
    return msg;
}

inline ReaMessage parse_rea(const std::string& raw, std::vector<std::string>* warnings = nullptr) {
    auto j = detail::parse_json_or_throw(raw);
    detail::warn_unknown_fields(j, {"relationships"}, "REA", warnings);
    const auto& rels = detail::require(j, "relationships", "REA");
    if (!rels.is_array())
        throw ParseError(ParseError::Kind::SchemaViolation, "REA: relationships must be an array");
    ReaMessage msg;
    for (const auto& r : rels) {
        detail::warn_unknown_fields(r, {"head", "relation", "tail", "confidence"}, "REA.relation",
                                    warnings);
        ReaRelation rel;
        rel.head = detail::require_string(r, "head", "REA.relation");
        rel.relation = detail::require_string(r, "relation", "REA.relation");
        rel.tail = detail::require_string(r, "tail", "REA.relation");
        if (rel.head.empty() || rel.relation.empty() || rel.tail.empty())
            throw ParseError(ParseError::Kind::SchemaViolation, "REA: empty triplet field");
        if (r.is_object() && r.contains("confidence"))
            rel.confidence = detail::require_unit_score(r, "confidence", "REA.relation");
        msg.relationships.push_back(std::move(rel));
    }
    return msg;
}

inline SaaMessage parse_saa(const std::string& raw, std::vector<std::string>* warnings = nullptr) {
    auto j = detail::parse_json_or_throw(raw);
    detail::warn_unknown_fields(j, {"alignments", "new_relations"}, "SAA", warnings);
    SaaMessage msg;
    const auto& alignments = detail::require(j, "alignments", "SAA");
    if (!alignments.is_array())
        throw ParseError(ParseError::Kind::SchemaViolation, "SAA: alignments must be an array");
    for (const auto& a : alignments) {
        detail::warn_unknown_fields(a, {"id", "proposed_type", "status"}, "SAA.alignment",
                                    warnings);
        SaaAlignment al;
        al.id = detail::require_string(a, "id", "SAA.alignment");
        al.proposed_type = detail::require_string(a, "proposed_type", "SAA.alignment");
        al.status = detail::require_string(a, "status", "SAA.alignment");
        if (al.status != "mapped" && al.status != "new")
            throw ParseError(ParseError::Kind::SchemaViolation,
                             "SAA: status must be mapped|new, got \"" + al.status + "\"");
        msg.alignments.push_back(std::move(al));
    }
    if (j.contains("new_relations")) {
        const auto& rels = j.at("new_relations");
        if (!rels.is_array())
            throw ParseError(ParseError::Kind::SchemaViolation,
                             "SAA: new_relations must be an array");
        for (const auto& r : rels) {
            detail::warn_unknown_fields(r, {"relation", "closest_match", "status"},
                                        "SAA.new_relation", warnings);
            SaaRelationMap m;
            m.relation = detail::require_string(r, "relation", "SAA.new_relation");
            m.closest_match = detail::require_string(r, "closest_match", "SAA.new_relation");
            m.status = detail::require_string(r, "status", "SAA.new_relation");
            if (m.status != "mapped" && m.status != "new")
                throw ParseError(ParseError::Kind::SchemaViolation,
                                 "SAA: relation status must be mapped|new");
            msg.new_relations.push_back(std::move(m));
        }
    }
    return msg;
}

inline CraMessage parse_cra(const std::string& raw, std::vector<std::string>* warnings = nullptr) {
    auto j = detail::parse_json_or_throw(raw);
    detail::warn_unknown_fields(j, {"decision", "resolution"}, "CRA", warnings);
    CraMessage msg;
    msg.decision = detail::require_string(j, "decision", "CRA");
    if (msg.decision != "Contradict" && msg.decision != "Agree" && msg.decision != "Ambiguous")
        throw ParseError(ParseError::Kind::SchemaViolation,
                         "CRA: decision must be Contradict|Agree|Ambiguous, got \"" +
                             msg.decision + "\"");
    const auto& res = detail::require(j, "resolution", "CRA");
    if (!res.is_object())
        throw ParseError(ParseError::Kind::SchemaViolation, "CRA: resolution must be an object");
    detail::warn_unknown_fields(res, {"action", "rationale"}, "CRA.resolution", warnings);
    msg.action = detail::require_string(res, "action", "CRA.resolution");
    if (msg.action != "discard" && msg.action != "review" && msg.action != "integrate")
        throw ParseError(ParseError::Kind::SchemaViolation,
                         "CRA: action must be discard|review|integrate, got \"" + msg.action +
                             "\"");
    msg.rationale = res.value("rationale", "");
    return msg;
}

inline EaMessage parse_ea(const std::string& raw, const std::string& channel,
                          std::vector<std::string>* warnings = nullptr) {
    if (channel != "confidence" && channel != "clarity" && channel != "relevance")
        throw InvalidInputError("unknown evaluator channel: " + channel);
    const std::string field = "final_" + channel;
    auto j = detail::parse_json_or_throw(raw);
    detail::warn_unknown_fields(j, {"final_triplets"}, "EA", warnings);
    const auto& triplets = detail::require(j, "final_triplets", "EA");
    if (!triplets.is_array())
        throw ParseError(ParseError::Kind::SchemaViolation, "EA: final_triplets must be an array");
    EaMessage msg;
    msg.channel = channel;
    for (const auto& t : triplets) {
        if (warnings && t.is_object())
            for (const auto& [key, value] : t.items())
                if (key != "head" && key != "relation" && key != "tail" && key != field)
                    warnings->push_back("EA.triplet: unknown field \"" + key + "\" ignored");
        EaTriplet et;
        et.head = detail::require_string(t, "head", "EA.triplet");
        et.relation = detail::require_string(t, "relation", "EA.triplet");
        et.tail = detail::require_string(t, "tail", "EA.triplet");
        et.score = detail::require_unit_score(t, field.c_str(), "EA.triplet");
        msg.final_triplets.push_back(std::move(et));
    }
    return msg;
}

inline JudgeMessage parse_judge(const std::string& raw,
                                std::vector<std::string>* warnings = nullptr) {
    auto j = detail::parse_json_or_throw(raw);
    detail::warn_unknown_fields(j, {"verdict"}, "JUDGE", warnings);
    JudgeMessage msg;
    msg.verdict = detail::require_string(j, "verdict", "JUDGE");
    if (msg.verdict != "likely correct" && msg.verdict != "uncertain" &&
        msg.verdict != "likely incorrect")
        throw ParseError(ParseError::Kind::SchemaViolation,
                         "JUDGE: verdict must be likely correct|uncertain|likely incorrect");
    return msg;
}

inline QaJudgeMessage parse_qa_judge(const std::string& raw,
                                     std::vector<std::string>* warnings = nullptr) {
    auto j = detail::parse_json_or_throw(raw);
    detail::warn_unknown_fields(j, {"verdict"}, "QA_JUDGE", warnings);
    QaJudgeMessage msg;
    msg.verdict = detail::require_string(j, "verdict", "QA_JUDGE");
    if (msg.verdict != "plausible" && msg.verdict != "implausible")
        throw ParseError(ParseError::Kind::SchemaViolation,
                         "QA_JUDGE: verdict must be plausible|implausible");
    return msg;
}

// Agent names used for gateway tags, prompt files, and dispatch.
inline const std::vector<std::string>& agent_names() {
    static const std::vector<std::string> names = {
        "IA",  "RA",            "SA",         "EEA",          "REA",   "SAA",
        "CRA", "EA_confidence", "EA_clarity", "EA_relevance", "JUDGE", "QA_JUDGE"};
    return names;
}

inline AgentMessage parse_message(const std::string& agent, const std::string& raw,
                                  std::vector<std::string>* warnings = nullptr) {
    if (agent == "IA") return parse_ia(raw, warnings);
    if (agent == "RA") return parse_ra(raw, warnings);
    if (agent == "SA") return parse_sa(raw, warnings);
    if (agent == "EEA") return parse_eea(raw, warnings);
    if (agent == "REA") return parse_rea(raw, warnings);
    if (agent == "SAA") return parse_saa(raw, warnings);
    if (agent == "CRA") return parse_cra(raw, warnings);
    if (agent == "EA_confidence") return parse_ea(raw, "confidence", warnings);
    if (agent == "EA_clarity") return parse_ea(raw, "clarity", warnings);
    if (agent == "EA_relevance") return parse_ea(raw, "relevance", warnings);
    if (agent == "JUDGE") return parse_judge(raw, warnings);
    if (agent == "QA_JUDGE") return parse_qa_judge(raw, warnings);
    throw InvalidInputError("unknown agent: " + agent);
}

// --- serialization (minimal: optional fields at their defaults are omitted) ---

inline nlohmann::json to_json(const IaMessage& m) {
    nlohmann::json meta = {{"title", m.metadata.title},   {"authors", m.metadata.authors},
                           {"journal", m.metadata.journal}, {"pub_date", m.metadata.pub_date},
                           {"doi", m.metadata.doi},       {"pmid", m.metadata.pmid}};
    nlohmann::json j = {{"metadata", meta}, {"content", m.content}};
    if (m.error) j["error"] = true;
    return j;
}

inline nlohmann::json to_json(const RaMessage& m) {
    nlohmann::json segments = nlohmann::json::array();
    for (const auto& s : m.segments) segments.push_back({{"text", s.text}, {"score", s.score}});
    return {{"segments", segments}};
}

inline nlohmann::json to_json(const SaMessage& m) {
    nlohmann::json summaries = nlohmann::json::array();
    for (const auto& s : m.summaries)
        summaries.push_back(
            {{"original_text", s.original_text}, {"summary", s.summary}, {"score", s.score}});
    return {{"summaries", summaries}};
}

inline nlohmann::json to_json(const EeaMessage& m) {
    nlohmann::json entities = nlohmann::json::array();
    for (const auto& e : m.entities)
        entities.push_back(
            {{"mention", e.mention}, {"type", e.type}, {"normalized_id", e.normalized_id}});
    return {{"entities", entities}};
}

inline nlohmann::json to_json(const ReaMessage& m) {
    nlohmann::json rels = nlohmann::json::array();
    for (const auto& r : m.relationships) {
        nlohmann::json rel = {{"head", r.head}, {"relation", r.relation}, {"tail", r.tail}};
        if (r.confidence != 1.0) rel["confidence"] = r.confidence;
        rels.push_back(std::move(rel));
    }
    return {{"relationships", rels}};
}

inline nlohmann::json to_json(const SaaMessage& m) {
    nlohmann::json alignments = nlohmann::json::array();
    for (const auto& a : m.alignments)
        alignments.push_back(
            {{"id", a.id}, {"proposed_type", a.proposed_type}, {"status", a.status}});
    nlohmann::json j = {{"alignments", alignments}};
    if (!m.new_relations.empty()) {
        nlohmann::json rels = nlohmann::json::array();
        for (const auto& r : m.new_relations)
            rels.push_back({{"relation", r.relation},
                            {"closest_match", r.closest_match},
                            {"status", r.status}});
        j["new_relations"] = rels;
    }
    return j;
}

inline nlohmann::json to_json(const CraMessage& m) {
    nlohmann::json res = {{"action", m.action}};
    if (!m.rationale.empty()) res["rationale"] = m.rationale;
    return {{"decision", m.decision}, {"resolution", res}};
}

inline nlohmann::json to_json(const EaMessage& m) {
    const std::string field = "final_" + m.channel;
    nlohmann::json triplets = nlohmann::json::array();
    for (const auto& t : m.final_triplets) {
        nlohmann::json j = {{"head", t.head}, {"relation", t.relation}, {"tail", t.tail}};
        j[field] = t.score;
        triplets.push_back(std::move(j));
    }
    return {{"final_triplets", triplets}};
}

inline nlohmann::json to_json(const JudgeMessage& m) { return {{"verdict", m.verdict}}; }
inline nlohmann::json to_json(const QaJudgeMessage& m) { return {{"verdict", m.verdict}}; }

inline std::string serialize_message(const AgentMessage& msg) {
    return std::visit([](const auto& m) { return to_json(m).dump(); }, msg);
}

// --- repair policy ---

struct AuditRecord {
    std::string kind;  // parse_failure | skip | field_warning | truncation | drop
    std::string agent;
    std::string doc_id;
    std::string detail;
    std::string raw;  // offending model output, when applicable
};

using AuditLog = std::vector<AuditRecord>;

inline const char* repair_instruction() {
    return "\nReturn ONLY valid JSON matching the schema.";
}

// One gateway call, one parse; on parse failure re-asks once with the
// corrective instruction. Second failure skips the item with an audit trail.
// Backend errors propagate to the caller untouched.
template <typename Parser>
auto ask_and_parse(Gateway& gateway, const ChatRequest& req, Parser parse, AuditLog& audit,
                   const std::string& doc_id = "")
    -> std::optional<decltype(parse(std::string()))> {
    auto attempt = [&](const ChatRequest& r) -> std::optional<decltype(parse(std::string()))> {
        ChatResponse resp = gateway.complete(r);
        try {
            return parse(resp.text);
        } catch (const ParseError& e) {
            audit.push_back({"parse_failure", req.tag, doc_id, e.what(), resp.text});
            return std::nullopt;
        }
    };
    if (auto msg = attempt(req)) return msg;
    ChatRequest retry = req;
    retry.user_payload += repair_instruction();
    if (auto msg = attempt(retry)) return msg;
    audit.push_back({"skip", req.tag, doc_id, "unparseable after one repair retry", ""});
    return std::nullopt;
}

}  // namespace karma
