#pragma once

#include <fstream>
#include <map>
#include <set>
#include <string>
#include <vector>

#include <json.hpp>

#include "agents.hpp"
#include "errors.hpp"
#include "kg.hpp"
#include "pipeline.hpp"
#include "protocol.hpp"

namespace karma {

// A ratio or mean whose denominator may be empty. Undefined values are
// flagged, never reported as zero.
struct MetricValue {
    double value = 0.0;
    bool defined = false;

    static MetricValue of(double v) { return {v, true}; }
    static MetricValue undefined() { return {0.0, false}; }
};

struct CoreMeans {
    MetricValue m_con;
    MetricValue m_cla;
    MetricValue m_rel;
    long new_edge_count = 0;
};

struct GraphStats {
    long delta_cov = 0;
    long delta_con = 0;
    MetricValue delta_con_norm;
    long before_degree_sum = 0;
    long after_degree_sum = 0;  // over the preexisting entities only
};

struct JudgeOutcome {
    MetricValue r_lc;
    long likely_correct = 0;
    long total = 0;
    std::map<std::string, std::string> verdicts;  // triplet key -> verdict
};

struct QAHop {
    std::string entity;
    std::string relation;  // empty on the terminal hop
};

enum class QAVerdict { plausible, implausible, unanswered };

struct QAItem {
    std::string question;
    std::vector<QAHop> expected_path;
    QAVerdict judged = QAVerdict::unanswered;
};

struct QaOutcome {
    MetricValue c_qa;
    long plausible = 0;
    long unanswered = 0;
    long total = 0;
};

inline std::vector<Triplet> new_edges(const KnowledgeGraph& before, const KnowledgeGraph& after) {
    std::vector<Triplet> out;
    for (const auto& [key, t] : after.edges())
        if (before.edges().count(key) == 0) out.push_back(t);
    return out;
}

inline CoreMeans core_metrics(const std::vector<Triplet>& edges) {
    CoreMeans m;
    m.new_edge_count = static_cast<long>(edges.size());
    if (edges.empty()) return m;
    double con = 0.0, cla = 0.0, rel = 0.0;
    for (const auto& t : edges) {
        con += t.confidence;
        cla += t.clarity;
        rel += t.relevance;
    }
    double n = static_cast<double>(edges.size());
    m.m_con = MetricValue::of(con / n);
    m.m_cla = MetricValue::of(cla / n);
    m.m_rel = MetricValue::of(rel / n);
    return m;
}

inline std::map<std::string, long> degree_map(const KnowledgeGraph& g) {
    std::map<std::string, long> deg;
    for (const auto& [key, t] : g.edges()) {
        ++deg[t.head];
        ++deg[t.tail];
    }
    return deg;
}

inline GraphStats graph_stats(const KnowledgeGraph& before, const KnowledgeGraph& after) {
    for (const auto& [id, e] : before.entities())
        if (!after.has_entity(id))
            throw GraphError("entity present before the run is missing after: " + id);

    GraphStats s;
    for (const auto& [id, e] : after.entities())
        if (!before.has_entity(id)) ++s.delta_cov;

    auto deg_before = degree_map(before);
    auto deg_after = degree_map(after);
    for (const auto& [id, e] : before.entities()) {
        long db = deg_before.count(id) ? deg_before[id] : 0;
        long da = deg_after.count(id) ? deg_after[id] : 0;
        s.before_degree_sum += db;
        s.after_degree_sum += da;
        s.delta_con += da - db;
    }
    if (s.before_degree_sum > 0)
        s.delta_con_norm = MetricValue::of(static_cast<double>(s.after_degree_sum) /
                                           static_cast<double>(s.before_degree_sum));
    return s;
}

inline MetricValue conflict_ratio(const RunReport& report) {
    if (!report.reconciles())
        throw InvalidInputError("run report counts do not reconcile");
    if (!report.config.use_conflict_resolution) return MetricValue::undefined();
    if (report.candidates == 0) return MetricValue::undefined();
    return MetricValue::of(static_cast<double>(report.discarded_conflict) /
                           static_cast<double>(report.candidates));
}

namespace detail {

inline std::string entity_label(const KnowledgeGraph& g, const std::string& id) {
    if (g.has_entity(id)) {
        const auto& e = g.entity(id);
        if (!e.surface_forms.empty()) return e.primary_form();
    }
    return id;
}

inline std::string parse_verdict(const std::string& raw, const std::set<std::string>& allowed,
                                 const char* where) {
    auto j = parse_json_or_throw(raw);
    std::string v = require_string(j, "verdict", where);
    if (allowed.count(v) == 0)
        throw ParseError(ParseError::Kind::SchemaViolation,
                         std::string(where) + ": unknown verdict \"" + v + "\"");
    return v;
}

}  // namespace detail

// Three-way plausibility judgment per new edge. The denominator is every
// edge handed in; an unreadable verdict counts as uncertain. A backend
// failure omits the metric rather than aborting the report.
inline JudgeOutcome judge_correctness(const std::vector<Triplet>& edges,
                                      const KnowledgeGraph& graph, const StageEnv& env) {
    JudgeOutcome out;
    out.total = static_cast<long>(edges.size());
    if (edges.empty()) return out;
    try {
        for (const auto& t : edges) {
            auto key = t.key();
            auto cached = out.verdicts.find(key);
            if (cached == out.verdicts.end()) {
                nlohmann::json payload = {{"head", detail::entity_label(graph, t.head)},
                                          {"relation", t.relation},
                                          {"tail", detail::entity_label(graph, t.tail)}};
                auto req = detail::stage_request(env, "JUDGE", {}, payload);
                auto verdict = ask_and_parse(
                    *env.gateway, req,
                    [](const std::string& raw) {
                        return detail::parse_verdict(
                            raw, {"likely correct", "uncertain", "likely incorrect"}, "JUDGE");
                    },
                    *env.audit, t.source_doc);
                cached = out.verdicts.emplace(key, verdict ? *verdict : "uncertain").first;
            }
            if (cached->second == "likely correct") ++out.likely_correct;
        }
    } catch (const BackendError& e) {
        env.audit->push_back({"judge_unavailable", "JUDGE", "", e.what(), ""});
        out.verdicts.clear();
        out.likely_correct = 0;
        return out;
    }
    out.r_lc = MetricValue::of(static_cast<double>(out.likely_correct) /
                               static_cast<double>(out.total));
    return out;
}

// Walks each expected path through the graph; a complete path is judged
// for plausibility, a broken one counts as unanswered against the score.
inline QaOutcome qa_coherence(const KnowledgeGraph& graph, std::vector<QAItem>& qa_set,
                              const StageEnv& env) {
    QaOutcome out;
    out.total = static_cast<long>(qa_set.size());
    if (qa_set.empty()) return out;
    try {
        for (auto& item : qa_set) {
            if (item.expected_path.empty())
                throw InvalidInputError("QA item has an empty expected path");
            bool found = true;
            nlohmann::json chain = nlohmann::json::array();
            for (size_t i = 0; found && i + 1 < item.expected_path.size(); ++i) {
                const auto& from = item.expected_path[i];
                const auto& to = item.expected_path[i + 1];
                const Triplet* edge = graph.find_edge(from.entity, from.relation, to.entity);
                if (!edge) {
                    found = false;
                    break;
                }
                chain.push_back({{"head", detail::entity_label(graph, edge->head)},
                                 {"relation", edge->relation},
                                 {"tail", detail::entity_label(graph, edge->tail)}});
            }
            const auto& last = item.expected_path.back();
            if (found && !last.relation.empty()) {
                bool any = false;
                for (const auto& [key, t] : graph.edges())
                    if (t.head == last.entity && t.relation == last.relation) {
                        any = true;
                        break;
                    }
                found = any;
            }
            if (!found || !graph.has_entity(last.entity)) {
                item.judged = QAVerdict::unanswered;
                ++out.unanswered;
                continue;
            }
            nlohmann::json payload = {
                {"question", item.question},
                {"answer", detail::entity_label(graph, last.entity)},
                {"path", chain}};
            auto req = detail::stage_request(env, "QA_JUDGE", {}, payload);
            auto verdict = ask_and_parse(
                *env.gateway, req,
                [](const std::string& raw) {
                    return detail::parse_verdict(raw, {"plausible", "implausible"}, "QA_JUDGE");
                },
                *env.audit, "");
            if (verdict && *verdict == "plausible") {
                item.judged = QAVerdict::plausible;
                ++out.plausible;
            } else {
                item.judged = QAVerdict::implausible;
            }
        }
    } catch (const BackendError& e) {
        env.audit->push_back({"judge_unavailable", "QA_JUDGE", "", e.what(), ""});
        out.plausible = 0;
        out.unanswered = 0;
        return out;
    }
    out.c_qa = MetricValue::of(static_cast<double>(out.plausible) /
                               static_cast<double>(out.total));
    return out;
}

struct MetricsReport {
    CoreMeans core;
    GraphStats stats;
    MetricValue r_cr;
    long removed_by_cra = 0;
    long total_candidates = 0;
    bool cra_enabled = true;
    JudgeOutcome judge;
    QaOutcome qa;

    std::string to_json() const {
        nlohmann::json j;
        auto put = [&](const char* name, const MetricValue& v) {
            if (v.defined)
                j[name] = v.value;
            else
                j[name] = nullptr;
            j[std::string(name) + "_defined"] = v.defined;
        };
        put("M_Con", core.m_con);
        put("M_Cla", core.m_cla);
        put("M_Rel", core.m_rel);
        j["Delta_Cov"] = stats.delta_cov;
        j["Delta_Cov_defined"] = true;
        j["Delta_Con"] = stats.delta_con;
        j["Delta_Con_defined"] = true;
        put("Delta_Con_norm", stats.delta_con_norm);
        put("R_CR", r_cr);
        put("R_LC", judge.r_lc);
        put("C_QA", qa.c_qa);
        j["counts"] = {{"new_edges", core.new_edge_count},
                       {"before_degree_sum", stats.before_degree_sum},
                       {"after_degree_sum", stats.after_degree_sum},
                       {"candidates", total_candidates},
                       {"removed_by_cra", removed_by_cra},
                       {"judged", judge.total},
                       {"likely_correct", judge.likely_correct},
                       {"qa_total", qa.total},
                       {"qa_plausible", qa.plausible},
                       {"qa_unanswered", qa.unanswered}};
        return j.dump(2) + "\n";
    }
};

// Core metrics, graph statistics, and the conflict ratio; the judged
// metrics stay undefined until a judge backend fills them in.
inline MetricsReport compute_metrics(const KnowledgeGraph& before, const KnowledgeGraph& after,
                                     const RunReport& report) {
    MetricsReport m;
    m.core = core_metrics(new_edges(before, after));
    m.stats = graph_stats(before, after);
    m.r_cr = conflict_ratio(report);
    m.removed_by_cra = report.discarded_conflict;
    m.total_candidates = report.candidates;
    m.cra_enabled = report.config.use_conflict_resolution;
    return m;
}

// --- QA set files: one {"question", "expected_path": [{"entity", "relation"}]} per line ---

inline std::vector<QAItem> load_qa_set(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw InvalidInputError("cannot read QA set: " + path);
    std::vector<QAItem> items;
    std::string line;
    size_t lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        if (trim(line).empty()) continue;
        nlohmann::json j = nlohmann::json::parse(line, nullptr, false);
        if (j.is_discarded() || !j.is_object())
            throw InvalidInputError(path + ":" + std::to_string(lineno) + ": not a JSON object");
        QAItem item;
        item.question = detail::require_string(j, "question", "QA set");
        if (!j.contains("expected_path") || !j["expected_path"].is_array() ||
            j["expected_path"].empty())
            throw InvalidInputError(path + ":" + std::to_string(lineno) +
                                    ": expected_path must be a nonempty array");
        for (const auto& hop : j["expected_path"]) {
            QAHop h;
            h.entity = detail::require_string(hop, "entity", "QA hop");
            h.relation = hop.value("relation", "");
            item.expected_path.push_back(std::move(h));
        }
        items.push_back(std::move(item));
    }
    return items;
}

}  // namespace karma
