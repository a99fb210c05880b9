#pragma once

#include <algorithm>
#include <fstream>
#include <map>
#include <set>
#include <string>
#include <vector>

#include <json.hpp>

#include "errors.hpp"
#include "util.hpp"

namespace karma {

enum class Provenance { preexisting, extracted };

inline const char* to_string(Provenance p) {
    return p == Provenance::preexisting ? "preexisting" : "extracted";
}

inline Provenance provenance_from_string(const std::string& s) {
    if (s == "preexisting") return Provenance::preexisting;
    if (s == "extracted") return Provenance::extracted;
    throw InvalidInputError("unknown provenance: " + s);
}

enum class TripletStatus { candidate, integrated, discarded, review };

inline const char* to_string(TripletStatus s) {
    switch (s) {
        case TripletStatus::candidate: return "candidate";
        case TripletStatus::integrated: return "integrated";
        case TripletStatus::discarded: return "discarded";
        case TripletStatus::review: return "review";
    }
    return "?";
}

struct CanonicalEntity {
    std::string id;
    // Insertion order preserved; front() is the primary surface form used for
    // entity embedding.
    std::vector<std::string> surface_forms;
    std::string entity_type = "Other";
    Provenance provenance = Provenance::extracted;

    void add_surface_form(const std::string& form) {
        if (form.empty()) return;
        if (std::find(surface_forms.begin(), surface_forms.end(), form) == surface_forms.end())
            surface_forms.push_back(form);
    }

    const std::string& primary_form() const {
        if (surface_forms.empty()) throw GraphError("entity " + id + " has no surface forms");
        return surface_forms.front();
    }

    bool operator==(const CanonicalEntity& o) const {
        return id == o.id && surface_forms == o.surface_forms &&
               entity_type == o.entity_type && provenance == o.provenance;
    }
};

struct Triplet {
    std::string head;
    std::string relation;
    std::string tail;
    double confidence = 1.0;
    double clarity = 1.0;
    double relevance = 1.0;
    std::string source_doc;
    TripletStatus status = TripletStatus::candidate;

    bool self_loop() const { return head == tail; }

    // (head, relation, tail) is the identity key; duplicates merge.
    std::string key() const { return head + "\t" + relation + "\t" + tail; }

    bool same_scores(const Triplet& o) const {
        return confidence == o.confidence && clarity == o.clarity && relevance == o.relevance;
    }

    bool operator==(const Triplet& o) const {
        return head == o.head && relation == o.relation && tail == o.tail &&
               same_scores(o) && source_doc == o.source_doc;
    }
};

inline void check_score_range(const Triplet& t) {
    for (double v : {t.confidence, t.clarity, t.relevance}) {
        if (!(v >= 0.0 && v <= 1.0))
            throw GraphError("triplet (" + t.head + ", " + t.relation + ", " + t.tail +
                             ") has score outside [0,1]");
    }
}

// Unordered relation-name pairs that cannot both hold for one (head, tail).
class IncompatibilityTable {
public:
    void add(const std::string& a, const std::string& b) {
        if (a == b) throw InvalidInputError("relation cannot be incompatible with itself: " + a);
        pairs_.insert(ordered(a, b));
    }

    bool incompatible(const std::string& a, const std::string& b) const {
        return pairs_.count(ordered(a, b)) > 0;
    }

    size_t size() const { return pairs_.size(); }

    const std::set<std::pair<std::string, std::string>>& pairs() const { return pairs_; }

    static IncompatibilityTable defaults() {
        IncompatibilityTable t;
        t.add("treats", "causes");
        t.add("inhibits", "activates");
        t.add("upregulates", "downregulates");
        return t;
    }

private:
    static std::pair<std::string, std::string> ordered(const std::string& a, const std::string& b) {
        return a < b ? std::make_pair(a, b) : std::make_pair(b, a);
    }

    std::set<std::pair<std::string, std::string>> pairs_;
};

inline std::set<std::string> default_type_set() {
    return {"Disease", "Drug", "Gene", "Protein", "Chemical", "RNA",
            "Pathway", "Phenotype", "Other"};
}

inline std::set<std::string> default_relation_vocab() {
    return {"treats", "causes", "inhibits", "activates", "upregulates",
            "downregulates", "interacts_with", "associated_with"};
}

enum class IntegrationOutcome { inserted, merged, rejected_duplicate };

inline const char* to_string(IntegrationOutcome o) {
    switch (o) {
        case IntegrationOutcome::inserted: return "inserted";
        case IntegrationOutcome::merged: return "merged";
        case IntegrationOutcome::rejected_duplicate: return "rejected_duplicate";
    }
    return "?";
}

class KnowledgeGraph {
public:
    KnowledgeGraph()
        : KnowledgeGraph(default_type_set(), default_relation_vocab(),
                         IncompatibilityTable::defaults()) {}

    KnowledgeGraph(std::set<std::string> type_set, std::set<std::string> registered_relations,
                   IncompatibilityTable incompat)
        : type_set_(std::move(type_set)), incompat_(std::move(incompat)) {
        for (const auto& r : registered_relations) relations_[r] = true;
    }

    // --- schema ---

    const std::set<std::string>& type_set() const { return type_set_; }

    bool has_type(const std::string& t) const { return type_set_.count(t) > 0; }

    void add_type(const std::string& t) { type_set_.insert(t); }

    // Registers a relation name; registered=false records it as a candidate.
    void ensure_relation(const std::string& name, bool registered) {
        auto [it, inserted] = relations_.emplace(name, registered);
        if (!inserted && registered) it->second = true;
    }

    bool relation_known(const std::string& name) const { return relations_.count(name) > 0; }

    bool relation_registered(const std::string& name) const {
        auto it = relations_.find(name);
        return it != relations_.end() && it->second;
    }

    std::vector<std::string> registered_relations() const {
        std::vector<std::string> out;
        for (const auto& [name, reg] : relations_)
            if (reg) out.push_back(name);
        return out;
    }

    const IncompatibilityTable& incompatibility() const { return incompat_; }
    IncompatibilityTable& incompatibility() { return incompat_; }

    // --- entities ---

    const std::string& upsert_entity(const CanonicalEntity& e) {
        if (e.id.empty()) throw GraphError("entity id is empty");
        if (e.surface_forms.empty()) throw GraphError("entity " + e.id + " has no surface forms");
        if (!has_type(e.entity_type))
            throw SchemaError("entity type not in schema: " + e.entity_type);
        auto it = entities_.find(e.id);
        if (it == entities_.end()) {
            it = entities_.emplace(e.id, e).first;
        } else {
            for (const auto& f : e.surface_forms) it->second.add_surface_form(f);
        }
        return it->first;
    }

    bool has_entity(const std::string& id) const { return entities_.count(id) > 0; }

    const CanonicalEntity& entity(const std::string& id) const {
        auto it = entities_.find(id);
        if (it == entities_.end()) throw GraphError("unknown entity: " + id);
        return it->second;
    }

    const std::map<std::string, CanonicalEntity>& entities() const { return entities_; }

    size_t entity_count() const { return entities_.size(); }

    // --- edges ---

    IntegrationOutcome integrate_triplet(const Triplet& t) {
        if (t.status != TripletStatus::candidate) return IntegrationOutcome::rejected_duplicate;
        check_score_range(t);
        if (!has_entity(t.head)) throw GraphError("dangling edge: unknown head " + t.head);
        if (!has_entity(t.tail)) throw GraphError("dangling edge: unknown tail " + t.tail);
        if (t.relation.empty()) throw GraphError("edge with empty relation");
        auto [it, inserted] = edges_.emplace(t.key(), t);
        if (inserted) {
            it->second.status = TripletStatus::integrated;
            return IntegrationOutcome::inserted;
        }
        Triplet& stored = it->second;
        stored.confidence = std::max(stored.confidence, t.confidence);
        stored.clarity = std::max(stored.clarity, t.clarity);
        stored.relevance = std::max(stored.relevance, t.relevance);
        return IntegrationOutcome::merged;
    }

    std::vector<Triplet> find_conflicts(const Triplet& t) const {
        std::vector<Triplet> out;
        for (const auto& [key, e] : edges_) {
            if (e.head == t.head && e.tail == t.tail &&
                incompat_.incompatible(e.relation, t.relation))
                out.push_back(e);
        }
        return out;
    }

    const Triplet* find_edge(const std::string& head, const std::string& relation,
                             const std::string& tail) const {
        Triplet probe{head, relation, tail};
        auto it = edges_.find(probe.key());
        return it == edges_.end() ? nullptr : &it->second;
    }

    const std::map<std::string, Triplet>& edges() const { return edges_; }

    size_t edge_count() const { return edges_.size(); }

    size_t degree_sum(const std::set<std::string>& ids) const {
        for (const auto& id : ids)
            if (!has_entity(id)) throw GraphError("degree_sum over unknown entity: " + id);
        size_t total = 0;
        for (const auto& [key, e] : edges_) {
            if (ids.count(e.head)) ++total;
            if (ids.count(e.tail)) ++total;
        }
        return total;
    }

    // --- rollback support (pipeline transactional commit) ---

    bool remove_edge(const std::string& key) { return edges_.erase(key) > 0; }

    void overwrite_edge(const Triplet& t) { edges_[t.key()] = t; }

    bool remove_entity(const std::string& id) { return entities_.erase(id) > 0; }

    void overwrite_entity(const CanonicalEntity& e) { entities_[e.id] = e; }

    // Serialized state comparison (entities + edges); schema knobs excluded.
    bool operator==(const KnowledgeGraph& o) const {
        return entities_ == o.entities_ && edges_ == o.edges_;
    }

private:
    std::map<std::string, CanonicalEntity> entities_;
    std::map<std::string, Triplet> edges_;  // key() -> integrated triplet
    std::set<std::string> type_set_;
    std::map<std::string, bool> relations_;  // name -> registered
    IncompatibilityTable incompat_;
};

// --- JSONL persistence ---

inline std::string entity_record(const CanonicalEntity& e) {
    std::string line = "{\"kind\":\"entity\",\"id\":" + json_quote(e.id) + ",\"surface_forms\":[";
    for (size_t i = 0; i < e.surface_forms.size(); ++i) {
        if (i) line.push_back(',');
        line += json_quote(e.surface_forms[i]);
    }
    line += "],\"entity_type\":" + json_quote(e.entity_type) +
            ",\"provenance\":" + json_quote(to_string(e.provenance)) + "}";
    return line;
}

inline std::string edge_record(const Triplet& t) {
    return "{\"kind\":\"edge\",\"head\":" + json_quote(t.head) +
           ",\"relation\":" + json_quote(t.relation) + ",\"tail\":" + json_quote(t.tail) +
           ",\"confidence\":" + format_score(t.confidence) +
           ",\"clarity\":" + format_score(t.clarity) +
           ",\"relevance\":" + format_score(t.relevance) +
           ",\"source_doc\":" + json_quote(t.source_doc) + "}";
}

inline void save_kg(const KnowledgeGraph& g, const std::string& path) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw InvalidInputError("cannot write kg file: " + path);
    for (const auto& [id, e] : g.entities()) out << entity_record(e) << "\n";
    for (const auto& [key, t] : g.edges()) out << edge_record(t) << "\n";
}

inline KnowledgeGraph load_kg(const std::string& path,
                              KnowledgeGraph base = KnowledgeGraph()) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw InvalidInputError("cannot read kg file: " + path);
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
        const std::string kind = j.value("kind", "");
        if (kind == "entity") {
            CanonicalEntity e;
            e.id = j.at("id").get<std::string>();
            for (const auto& f : j.value("surface_forms", nlohmann::json::array()))
                e.add_surface_form(f.get<std::string>());
            if (e.surface_forms.empty()) e.add_surface_form(e.id);
            e.entity_type = j.value("entity_type", "Other");
            e.provenance = provenance_from_string(j.value("provenance", "preexisting"));
            if (!base.has_type(e.entity_type)) base.add_type(e.entity_type);
            base.upsert_entity(e);
        } else if (kind == "edge") {
            Triplet t;
            t.head = j.at("head").get<std::string>();
            t.relation = j.at("relation").get<std::string>();
            t.tail = j.at("tail").get<std::string>();
            t.confidence = j.value("confidence", 1.0);
            t.clarity = j.value("clarity", 1.0);
            t.relevance = j.value("relevance", 1.0);
            t.source_doc = j.value("source_doc", "");
            t.status = TripletStatus::candidate;
            if (!base.relation_known(t.relation)) base.ensure_relation(t.relation, false);
            base.integrate_triplet(t);
        } else {
            throw InvalidInputError(path + ":" + std::to_string(lineno) +
                                    ": unknown record kind \"" + kind + "\"");
        }
    }
    return base;
}

}  // namespace karma
