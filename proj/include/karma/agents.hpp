#pragma once

#include <cmath>
#include <cstdio>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include <json.hpp>

#include "embedding.hpp"
#include "errors.hpp"
#include "gateway.hpp"
#include "kg.hpp"
#include "ontology.hpp"
#include "protocol.hpp"
#include "util.hpp"

namespace karma {

// --- stage data carried between agents ---

struct RawDocument {
    std::string doc_id;
    std::string text;
    std::map<std::string, std::string> metadata_hints;  // title, authors, doi, ...
};

struct Document {
    std::string doc_id;
    DocumentMetadata metadata;
    std::string content;
    bool error = false;
};

struct Segment {
    std::string doc_id;
    int seg_index = 0;
    std::string text;
    double relevance = 0.0;
};

struct Summary {
    std::string doc_id;
    int seg_index = 0;
    std::string original_text;
    std::string summary;
    double score = 0.0;

    bool omitted() const { return summary == "[OMITTED]"; }
};

struct ExtractedEntity {
    std::string mention;
    std::string entity_type;
    std::string canonical_id;  // provisional mention text while needs_mint
    bool is_new = false;
    bool needs_mint = false;
};

struct CandidateTriplet {
    std::string head;
    std::string relation;
    std::string tail;
    double extraction_confidence = 1.0;
    std::string doc_id;
    int seg_index = 0;
    double seg_relevance = 0.0;
};

struct VerificationSignals {
    std::vector<double> confidence;  // v
    std::vector<double> clarity;     // c
    std::vector<double> relevance;   // r
    std::string conflict_status = "None";
};

struct EvaluatorWeights {
    std::vector<double> alpha;  // empty list means identity weights
    std::vector<double> beta;
    std::vector<double> gamma;
};

struct EvalResult {
    double confidence = 0.0;
    double clarity = 0.0;
    double relevance = 0.0;
    bool integrated = false;

    double mean() const { return (confidence + clarity + relevance) / 3.0; }
};

struct ConflictOutcome {
    std::string decision = "None";  // None | Agree | Ambiguous | Contradict
    std::string action = "integrate";
    std::string rationale;
};

// What align_schema decided; the caller applies it to the graph.
struct SchemaResolution {
    std::map<std::string, std::string> entity_types;  // id -> final type
    std::map<std::string, bool> entity_mapped;        // id -> status == mapped
    std::set<std::string> new_types;                  // types absent from the schema
    std::map<std::string, std::string> relation_rewrites;  // extracted -> vocabulary name
    std::vector<SaaRelationMap> new_relations;
};

// Shared handles each stage call needs.
struct StageEnv {
    Gateway* gateway = nullptr;
    const PromptCatalog* catalog = nullptr;
    AuditLog* audit = nullptr;
};

// Assigns stable LOCAL ids to mentions with no ontology or graph match.
// Call order defines the numbering, so keep minting on one thread.
class MintTable {
public:
    const std::string& id_for(const std::string& mention) {
        auto key = to_lower(trim(mention));
        auto it = ids_.find(key);
        if (it != ids_.end()) return it->second;
        char buf[16];
        std::snprintf(buf, sizeof(buf), "LOCAL:%05u", next_++);
        return ids_.emplace(key, buf).first->second;
    }

    size_t size() const { return ids_.size(); }

private:
    std::map<std::string, std::string> ids_;
    unsigned next_ = 1;
};

// Entity types an extraction may claim that never belong in the graph
// unless the ontology already knows the mention.
inline const std::set<std::string>& default_type_blocklist() {
    static const std::set<std::string> blocked = {"Date",         "Event",  "Location",
                                                  "Organization", "Person", "Place"};
    return blocked;
}

inline double sigmoid(double x) { return 1.0 / (1.0 + std::exp(-x)); }

namespace detail {

inline std::string join(const std::vector<std::string>& parts, const std::string& sep = ", ") {
    std::string out;
    for (const auto& p : parts) {
        if (!out.empty()) out += sep;
        out += p;
    }
    return out;
}

inline std::string join(const std::set<std::string>& parts, const std::string& sep = ", ") {
    return join(std::vector<std::string>(parts.begin(), parts.end()), sep);
}

inline ChatRequest stage_request(const StageEnv& env, const std::string& agent,
                                 const std::map<std::string, std::string>& bindings,
                                 const nlohmann::json& payload) {
    ChatRequest req;
    req.tag = agent;
    req.system_prompt = render(env.catalog->get(agent), bindings);
    req.user_payload = payload.dump();
    return req;
}

inline double weighted_sum(const std::vector<double>& signals, const std::vector<double>& weights,
                           const char* channel) {
    if (!weights.empty() && weights.size() < signals.size())
        throw EvaluationError(std::string(channel) + " weight list shorter than signals");
    double sum = 0.0;
    for (size_t i = 0; i < signals.size(); ++i) {
        if (!std::isfinite(signals[i]))
            throw EvaluationError(std::string(channel) + " signal is not finite");
        sum += signals[i] * (weights.empty() ? 1.0 : weights[i]);
    }
    return sum;
}

}  // namespace detail

// --- ingestion ---
// Purely local: transliteration and whitespace cleanup need no model,
// and metadata arrives as hints rather than being mined from PDFs.

inline Document ingest(const RawDocument& raw) {
    Document doc;
    doc.doc_id = raw.doc_id;
    auto hint = [&](const char* key) {
        auto it = raw.metadata_hints.find(key);
        if (it == raw.metadata_hints.end() || trim(it->second).empty()) return std::string("N/A");
        return trim(it->second);
    };
    doc.metadata.title = hint("title");
    doc.metadata.authors = hint("authors");
    doc.metadata.journal = hint("journal");
    doc.metadata.pub_date = hint("pub_date");
    doc.metadata.doi = hint("doi");
    doc.metadata.pmid = hint("pmid");
    doc.content = normalize_whitespace(transliterate(raw.text));
    doc.error = doc.content.empty();
    return doc;
}

// --- reader ---

// Blank-line paragraphs greedily merged until a chunk reaches min_chars;
// the trailing chunk may stay shorter.
inline std::vector<std::string> segment_content(const std::string& content,
                                                size_t min_chars = 200) {
    std::vector<std::string> paragraphs;
    std::string current;
    for (const auto& line : split(content, '\n')) {
        if (trim(line).empty()) {
            if (!current.empty()) paragraphs.push_back(current);
            current.clear();
        } else {
            if (!current.empty()) current += "\n";
            current += line;
        }
    }
    if (!current.empty()) paragraphs.push_back(current);

    std::vector<std::string> chunks;
    std::string chunk;
    for (const auto& p : paragraphs) {
        if (!chunk.empty()) chunk += "\n";
        chunk += p;
        if (chunk.size() >= min_chars) {
            chunks.push_back(chunk);
            chunk.clear();
        }
    }
    if (!chunk.empty()) chunks.push_back(chunk);
    return chunks;
}

// The reader prompt context sends a compact schema digest instead of the
// whole graph; entity payloads would not fit any real context window.
inline nlohmann::json graph_digest(const KnowledgeGraph& graph) {
    return {{"entity_count", graph.entity_count()},
            {"relations", graph.registered_relations()},
            {"types", std::vector<std::string>(graph.type_set().begin(), graph.type_set().end())}};
}

inline std::vector<Segment> read_document(const Document& doc, const KnowledgeGraph& graph,
                                          const StageEnv& env, double delta) {
    std::vector<Segment> kept;
    if (doc.error) return kept;
    auto digest = graph_digest(graph);
    for (const auto& text : segment_content(doc.content)) {
        double relevance = 0.0;
        if (text.size() >= 30) {
            nlohmann::json payload = {{"content", text},
                                      {"graph", digest},
                                      {"metadata", {{"title", doc.metadata.title}}}};
            auto req = detail::stage_request(env, "RA", {}, payload);
            auto msg = ask_and_parse(*env.gateway, req,
                                     [](const std::string& raw) { return parse_ra(raw); },
                                     *env.audit, doc.doc_id);
            if (!msg) continue;  // skipped with audit trail
            relevance = msg->segments.empty() ? 0.0 : msg->segments.front().score;
        }
        if (relevance < delta) continue;
        Segment seg;
        seg.doc_id = doc.doc_id;
        seg.seg_index = static_cast<int>(kept.size());
        seg.text = text;
        seg.relevance = relevance;
        kept.push_back(std::move(seg));
    }
    return kept;
}

// --- summarizer ---

inline Summary summarize(const Segment& seg, const StageEnv& env, double skip_threshold,
                         int word_limit = 100) {
    Summary out;
    out.doc_id = seg.doc_id;
    out.seg_index = seg.seg_index;
    out.original_text = seg.text;
    if (seg.relevance < skip_threshold) {
        out.summary = "[OMITTED]";
        out.score = seg.relevance;
        return out;
    }
    nlohmann::json payload = {
        {"segments", nlohmann::json::array({{{"score", seg.relevance}, {"text", seg.text}}})}};
    auto req = detail::stage_request(
        env, "SA", {{"skip_threshold", format_score(skip_threshold)}}, payload);
    auto msg = ask_and_parse(*env.gateway, req,
                             [](const std::string& raw) { return parse_sa(raw); }, *env.audit,
                             seg.doc_id);
    std::string summary;
    double score = seg.relevance;
    if (msg && !msg->summaries.empty()) {
        summary = msg->summaries.front().summary;
        score = msg->summaries.front().score;
    } else {
        summary = seg.text;  // degrade to the segment itself rather than lose it
    }
    if (summary != "[OMITTED]" && word_count(summary) > static_cast<size_t>(word_limit)) {
        env.audit->push_back({"truncation", "SA", seg.doc_id,
                              "summary clamped to " + std::to_string(word_limit) + " words", ""});
        summary = truncate_words(summary, static_cast<size_t>(word_limit));
    }
    out.summary = std::move(summary);
    out.score = score;
    return out;
}

// --- entity extraction ---

inline std::vector<ExtractedEntity> extract_entities(const Summary& sum,
                                                     const Dictionary& dictionary,
                                                     const EntityIndex& index,
                                                     const EmbeddingProvider& provider,
                                                     const KnowledgeGraph& graph,
                                                     const StageEnv& env, double rho) {
    std::vector<ExtractedEntity> out;
    if (sum.omitted()) return out;
    nlohmann::json payload = {{"summary", sum.summary}};
    auto req = detail::stage_request(env, "EEA", {{"types", detail::join(graph.type_set())}},
                                     payload);
    auto msg = ask_and_parse(*env.gateway, req,
                             [](const std::string& raw) { return parse_eea(raw); }, *env.audit,
                             sum.doc_id);
    if (!msg) return out;

    std::set<std::string> seen;
    for (const auto& e : msg->entities) {
        auto hit = dictionary.lookup(e.mention);
        bool blocked = e.type == "Other" || default_type_blocklist().count(e.type) > 0;
        if (!hit && blocked) {
            env.audit->push_back({"drop", "EEA", sum.doc_id,
                                  "mention \"" + e.mention + "\" typed " + e.type +
                                      " with no ontology entry",
                                  ""});
            continue;
        }
        ExtractedEntity ent;
        ent.mention = e.mention;
        ent.entity_type = hit ? hit->type : e.type;
        if (e.normalized_id != "N/A") {
            ent.canonical_id = e.normalized_id;
        } else if (hit) {
            ent.canonical_id = hit->id;
        } else {
            auto nearest = nearest_entity(index, provider.embed(e.mention), rho);
            if (nearest.novel) {
                ent.canonical_id = e.mention;  // provisional until minted
                ent.needs_mint = true;
            } else {
                ent.canonical_id = nearest.id;
                ent.entity_type = graph.entity(nearest.id).entity_type;
            }
        }
        ent.is_new = ent.needs_mint || !graph.has_entity(ent.canonical_id);
        if (!seen.insert(ent.canonical_id + "\t" + to_lower(ent.mention)).second) continue;
        out.push_back(std::move(ent));
    }
    return out;
}

// --- relation extraction ---

inline double relation_threshold(const std::string& relation, double theta_default,
                                 const std::map<std::string, double>& theta_overrides) {
    auto it = theta_overrides.find(relation);
    return it == theta_overrides.end() ? theta_default : it->second;
}

inline std::vector<CandidateTriplet> extract_relations(
    const Summary& sum, const std::vector<ExtractedEntity>& entities, const KnowledgeGraph& graph,
    const StageEnv& env, double theta_default,
    const std::map<std::string, double>& theta_overrides, double seg_relevance) {
    std::vector<CandidateTriplet> out;
    if (entities.size() < 2) return out;

    nlohmann::json listed = nlohmann::json::array();
    for (const auto& e : entities)
        listed.push_back({{"mention", e.mention}, {"normalized_id", e.canonical_id}});
    nlohmann::json payload = {{"entities", listed}, {"summary", sum.summary}};
    auto req = detail::stage_request(
        env, "REA", {{"relations", detail::join(graph.registered_relations())}}, payload);
    auto msg = ask_and_parse(*env.gateway, req,
                             [](const std::string& raw) { return parse_rea(raw); }, *env.audit,
                             sum.doc_id);
    if (!msg) return out;

    auto resolve = [&](const std::string& name) -> const ExtractedEntity* {
        for (const auto& e : entities)
            if (e.canonical_id == name) return &e;
        for (const auto& e : entities)
            if (to_lower(e.mention) == to_lower(name)) return &e;
        return nullptr;
    };

    std::map<std::string, size_t> by_key;
    for (const auto& r : msg->relationships) {
        const auto* head = resolve(r.head);
        const auto* tail = resolve(r.tail);
        if (!head || !tail) {
            env.audit->push_back({"drop", "REA", sum.doc_id,
                                  "edge endpoint not in extracted entities: (" + r.head + ", " +
                                      r.relation + ", " + r.tail + ")",
                                  ""});
            continue;
        }
        std::string relation = normalize_relation_name(r.relation);
        if (relation.empty()) {
            env.audit->push_back({"drop", "REA", sum.doc_id, "empty relation name", ""});
            continue;
        }
        if (relation.rfind("not_", 0) == 0) {
            env.audit->push_back(
                {"drop", "REA", sum.doc_id, "negated relation \"" + relation + "\"", ""});
            continue;
        }
        if (r.confidence < relation_threshold(relation, theta_default, theta_overrides)) {
            env.audit->push_back({"drop", "REA", sum.doc_id,
                                  "confidence " + format_score(r.confidence) +
                                      " below threshold for " + relation,
                                  ""});
            continue;
        }
        CandidateTriplet t;
        t.head = head->canonical_id;
        t.relation = relation;
        t.tail = tail->canonical_id;
        t.extraction_confidence = r.confidence;
        t.doc_id = sum.doc_id;
        t.seg_index = sum.seg_index;
        t.seg_relevance = seg_relevance;
        auto key = t.head + "\t" + t.relation + "\t" + t.tail;
        auto it = by_key.find(key);
        if (it != by_key.end()) {
            auto& kept = out[it->second];
            kept.extraction_confidence = std::max(kept.extraction_confidence,
                                                  t.extraction_confidence);
            continue;
        }
        by_key.emplace(std::move(key), out.size());
        out.push_back(std::move(t));
    }
    return out;
}

// --- schema alignment ---

inline SchemaResolution align_schema(const std::vector<ExtractedEntity>& unknown_entities,
                                     const std::vector<std::string>& unknown_relations,
                                     const KnowledgeGraph& graph, const StageEnv& env,
                                     const std::string& doc_id) {
    SchemaResolution res;
    if (unknown_entities.empty() && unknown_relations.empty()) return res;

    std::vector<std::string> entity_ids;
    for (const auto& e : unknown_entities) entity_ids.push_back(e.canonical_id);
    nlohmann::json payload = {{"unknown_entities", entity_ids},
                              {"unknown_relations", unknown_relations}};
    auto req = detail::stage_request(env, "SAA",
                                     {{"types", detail::join(graph.type_set())},
                                      {"relations", detail::join(graph.registered_relations())}},
                                     payload);
    auto msg = ask_and_parse(*env.gateway, req,
                             [](const std::string& raw) { return parse_saa(raw); }, *env.audit,
                             doc_id);
    if (!msg) {
        // leave everything unaligned; callers type these entities Other
        for (const auto& e : unknown_entities) {
            res.entity_types[e.canonical_id] = "Other";
            res.entity_mapped[e.canonical_id] = false;
        }
        return res;
    }

    // case-insensitive lookup into the schema's type set; first listed wins
    auto canonical_type = [&](const std::string& proposed) -> std::optional<std::string> {
        for (const auto& t : graph.type_set())
            if (to_lower(t) == to_lower(proposed)) return t;
        return std::nullopt;
    };

    for (const auto& a : msg->alignments) {
        auto known = canonical_type(a.proposed_type);
        res.entity_types[a.id] = known ? *known : a.proposed_type;
        res.entity_mapped[a.id] = a.status == "mapped" && known.has_value();
        if (!known) res.new_types.insert(a.proposed_type);
    }
    for (const auto& e : unknown_entities) {
        if (res.entity_types.count(e.canonical_id)) continue;
        // response never mentioned it; keep the extraction type when valid
        bool valid = graph.has_type(e.entity_type);
        res.entity_types[e.canonical_id] = valid ? e.entity_type : "Other";
        res.entity_mapped[e.canonical_id] = false;
        env.audit->push_back({"field_warning", "SAA", doc_id,
                              "entity " + e.canonical_id + " missing from alignment response",
                              ""});
    }
    for (const auto& r : msg->new_relations) {
        std::string name = normalize_relation_name(r.relation);
        if (name.empty()) continue;
        if (r.status == "mapped" && graph.relation_registered(r.closest_match)) {
            res.relation_rewrites[name] = r.closest_match;
        } else {
            res.new_relations.push_back({name, r.closest_match, r.status});
        }
    }
    return res;
}

// --- conflict resolution ---

inline ConflictOutcome resolve_conflict(const CandidateTriplet& t,
                                        const std::vector<Triplet>& conflicts,
                                        const StageEnv& env, double escalation) {
    ConflictOutcome out;
    if (conflicts.empty()) return out;

    int rank = 0;  // Agree
    bool escalate = false;
    for (const auto& existing : conflicts) {
        nlohmann::json payload = {
            {"t_existing",
             {{"head", existing.head}, {"relation", existing.relation}, {"tail", existing.tail}}},
            {"t_new", {{"head", t.head}, {"relation", t.relation}, {"tail", t.tail}}}};
        auto req = detail::stage_request(env, "CRA", {}, payload);
        auto msg = ask_and_parse(*env.gateway, req,
                                 [](const std::string& raw) { return parse_cra(raw); },
                                 *env.audit, t.doc_id);
        std::string decision = msg ? msg->decision : "Ambiguous";
        int pair_rank = decision == "Contradict" ? 2 : decision == "Ambiguous" ? 1 : 0;
        if (pair_rank > rank || out.decision == "None") {
            rank = std::max(rank, pair_rank);
            out.decision = decision;
            out.rationale = msg ? msg->rationale : "unparseable resolution; defaulting to review";
        }
        if (decision == "Contradict" && t.extraction_confidence >= escalation &&
            existing.confidence >= escalation)
            escalate = true;
    }
    if (rank == 2) {
        out.decision = "Contradict";
        out.action = escalate ? "review" : "discard";
    } else if (rank == 1) {
        out.decision = "Ambiguous";
        out.action = "review";
    } else {
        out.decision = "Agree";
        out.action = "integrate";
    }
    return out;
}

// --- evaluator ---

// Batched per document: one call scores every candidate on one channel.
// Returns triplet key -> score; parse failure leaves the map empty.
inline std::map<std::string, double> evaluate_channel(
    const std::vector<CandidateTriplet>& candidates, const std::string& channel,
    const StageEnv& env) {
    std::map<std::string, double> scores;
    if (candidates.empty()) return scores;
    const std::string agent = "EA_" + channel;

    nlohmann::json listed = nlohmann::json::array();
    for (const auto& t : candidates)
        listed.push_back({{"head", t.head}, {"relation", t.relation}, {"tail", t.tail}});
    nlohmann::json payload = {{"candidates", listed}};
    auto req = detail::stage_request(env, agent, {}, payload);
    auto msg = ask_and_parse(
        *env.gateway, req,
        [&channel](const std::string& raw) { return parse_ea(raw, channel); }, *env.audit,
        candidates.front().doc_id);
    if (!msg) return scores;

    for (const auto& t : msg->final_triplets)
        scores[t.head + "\t" + t.relation + "\t" + t.tail] = t.score;
    for (const auto& t : candidates) {
        auto key = t.head + "\t" + t.relation + "\t" + t.tail;
        if (scores.count(key)) continue;
        env.audit->push_back({"field_warning", agent, t.doc_id,
                              "no " + channel + " score returned for (" + t.head + ", " +
                                  t.relation + ", " + t.tail + ")",
                              ""});
    }
    return scores;
}

inline EvalResult evaluate(const VerificationSignals& signals, const EvaluatorWeights& weights,
                           double integrate_threshold) {
    if (!(integrate_threshold >= 0.0 && integrate_threshold <= 1.0))
        throw ConfigError("integration threshold outside [0,1]");
    EvalResult r;
    r.confidence = sigmoid(detail::weighted_sum(signals.confidence, weights.alpha, "confidence"));
    r.clarity = sigmoid(detail::weighted_sum(signals.clarity, weights.beta, "clarity"));
    r.relevance = sigmoid(detail::weighted_sum(signals.relevance, weights.gamma, "relevance"));
    r.integrated = r.mean() >= integrate_threshold;
    return r;
}

}  // namespace karma
