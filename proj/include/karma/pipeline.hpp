#pragma once

#include <algorithm>
#include <atomic>
#include <chrono>
#include <condition_variable>
#include <deque>
#include <fstream>
#include <map>
#include <mutex>
#include <set>
#include <string>
#include <thread>
#include <vector>

#include <json.hpp>

#include "agents.hpp"
#include "embedding.hpp"
#include "errors.hpp"
#include "gateway.hpp"
#include "kg.hpp"
#include "ontology.hpp"
#include "protocol.hpp"

namespace karma {

struct PipelineConfig {
    double delta = 0.5;            // reader relevance gate
    double skip_threshold = 0.2;   // summarizer omission bound
    double rho = 0.35;             // novelty distance bound
    double theta_default = 0.5;    // relation confidence gate
    std::map<std::string, double> theta_overrides;
    double integrate_threshold = 0.6;
    double escalation = 0.7;       // both-sides bound for review escalation
    EvaluatorWeights weights;
    bool use_summarizer = true;
    bool use_conflict_resolution = true;
    bool use_evaluator = true;
    int worker_count = 1;
    int word_limit = 100;
    uint64_t seed = 1;
    std::string backend = "scripted";

    void validate() const {
        auto unit = [](double v, const char* name) {
            if (!(v >= 0.0 && v <= 1.0))
                throw ConfigError(std::string(name) + " outside [0,1]");
        };
        unit(delta, "delta");
        unit(skip_threshold, "skip_threshold");
        unit(theta_default, "theta");
        unit(integrate_threshold, "integrate_threshold");
        unit(escalation, "escalation");
        for (const auto& [name, v] : theta_overrides) unit(v, ("theta." + name).c_str());
        if (!(rho > 0.0 && rho <= 2.0)) throw ConfigError("rho outside (0,2]");
        if (worker_count < 1) throw ConfigError("worker_count must be >= 1");
        if (word_limit < 1) throw ConfigError("word_limit must be >= 1");
        // Confidence carries two signals (extraction, schema bonus) and
        // relevance two (channel score, segment score); clarity carries one.
        auto arity = [](const std::vector<double>& w, size_t need, const char* name) {
            if (!w.empty() && w.size() < need)
                throw ConfigError(std::string(name) + " needs at least " +
                                  std::to_string(need) + " weights when set");
            for (double v : w)
                if (!std::isfinite(v))
                    throw ConfigError(std::string(name) + " weight is not finite");
        };
        arity(weights.alpha, 2, "alpha");
        arity(weights.beta, 1, "beta");
        arity(weights.gamma, 2, "gamma");
    }
};

struct DocOutcome {
    std::string doc_id;
    bool ingested = false;
    int segments = 0;
    int summaries = 0;   // non-omitted summaries reaching extraction
    int entities = 0;
    int candidates = 0;
    int integrated = 0;
    int discarded_conflict = 0;
    int discarded_evaluator = 0;
    int review = 0;
    int dropped_error = 0;
    bool committed = false;
};

struct ReviewItem {
    Triplet triplet;  // status review; confidence from extraction, 0.5 sentinels
    std::vector<Triplet> conflicts_with;
    std::string rationale;
};

struct RunReport {
    std::vector<DocOutcome> docs;
    AuditLog audit;
    std::vector<std::string> new_entities;   // insertion order
    std::set<std::string> new_types;
    std::vector<std::string> new_relations;  // first-commit order
    std::vector<ReviewItem> review_queue;

    long candidates = 0;
    long integrated = 0;
    long discarded_conflict = 0;
    long discarded_evaluator = 0;
    long review = 0;
    long dropped_error = 0;

    bool complete = true;
    std::string stop_reason;
    PipelineConfig config;
    LedgerReport ledger;
    std::map<std::string, double> stage_millis;

    long discarded_total() const { return discarded_conflict + discarded_evaluator; }

    bool reconciles() const {
        return candidates == integrated + discarded_total() + review + dropped_error;
    }

    std::string to_json(bool include_timings = true) const {
        nlohmann::json j;
        j["complete"] = complete;
        if (!complete) j["stop_reason"] = stop_reason;
        j["config"] = {{"delta", config.delta},
                       {"skip_threshold", config.skip_threshold},
                       {"rho", config.rho},
                       {"theta", config.theta_default},
                       {"integrate_threshold", config.integrate_threshold},
                       {"escalation", config.escalation},
                       {"use_summarizer", config.use_summarizer},
                       {"use_conflict_resolution", config.use_conflict_resolution},
                       {"use_evaluator", config.use_evaluator},
                       {"seed", config.seed},
                       {"backend", config.backend}};
        j["counts"] = {{"candidates", candidates},
                       {"integrated", integrated},
                       {"discarded_conflict", discarded_conflict},
                       {"discarded_evaluator", discarded_evaluator},
                       {"review", review},
                       {"dropped_error", dropped_error}};
        j["new_entities"] = new_entities;
        j["new_types"] = std::vector<std::string>(new_types.begin(), new_types.end());
        j["new_relations"] = new_relations;
        nlohmann::json docs_json = nlohmann::json::array();
        for (const auto& d : docs) {
            docs_json.push_back({{"doc_id", d.doc_id},
                                 {"ingested", d.ingested},
                                 {"segments", d.segments},
                                 {"summaries", d.summaries},
                                 {"entities", d.entities},
                                 {"candidates", d.candidates},
                                 {"integrated", d.integrated},
                                 {"discarded_conflict", d.discarded_conflict},
                                 {"discarded_evaluator", d.discarded_evaluator},
                                 {"review", d.review},
                                 {"dropped_error", d.dropped_error},
                                 {"committed", d.committed}});
        }
        j["documents"] = std::move(docs_json);
        nlohmann::json audit_json = nlohmann::json::array();
        for (const auto& r : audit) {
            nlohmann::json rec = {{"kind", r.kind},
                                  {"agent", r.agent},
                                  {"doc_id", r.doc_id},
                                  {"detail", r.detail}};
            if (!r.raw.empty()) rec["raw"] = r.raw;
            audit_json.push_back(std::move(rec));
        }
        j["audit"] = std::move(audit_json);
        nlohmann::json review_json = nlohmann::json::array();
        for (const auto& item : review_queue)
            review_json.push_back({{"head", item.triplet.head},
                                   {"relation", item.triplet.relation},
                                   {"tail", item.triplet.tail}});
        j["review_queue"] = std::move(review_json);
        j["ledger"] = nlohmann::json::parse(ledger.to_json(include_timings));
        if (include_timings) j["timings_ms"] = stage_millis;
        return j.dump(2) + "\n";
    }
};

struct PipelineResult {
    KnowledgeGraph graph;
    RunReport report;
};

namespace detail {

// Everything one document produced against the base graph, before any
// graph mutation. Workers fill these; the integrator consumes them.
struct DocSnapshot {
    size_t corpus_index = 0;
    std::string doc_id;
    bool processed = false;
    bool failed = false;
    std::string fail_reason;
    bool ingested = false;
    int segment_count = 0;
    int summary_count = 0;
    AuditLog audit;
    std::vector<ExtractedEntity> entities;      // doc-level, deduped
    std::vector<CandidateTriplet> candidates;   // segment order
    SchemaResolution schema;
    std::map<std::string, double> stage_millis;
};

class BoundedQueue {
public:
    explicit BoundedQueue(size_t capacity) : capacity_(capacity ? capacity : 1) {}

    void push(size_t v) {
        std::unique_lock<std::mutex> lock(mu_);
        cv_space_.wait(lock, [&] { return items_.size() < capacity_; });
        items_.push_back(v);
        cv_item_.notify_one();
    }

    bool pop(size_t& v) {
        std::unique_lock<std::mutex> lock(mu_);
        cv_item_.wait(lock, [&] { return closed_ || !items_.empty(); });
        if (items_.empty()) return false;
        v = items_.front();
        items_.pop_front();
        cv_space_.notify_one();
        return true;
    }

    void close() {
        std::lock_guard<std::mutex> lock(mu_);
        closed_ = true;
        cv_item_.notify_all();
    }

private:
    std::mutex mu_;
    std::condition_variable cv_item_;
    std::condition_variable cv_space_;
    std::deque<size_t> items_;
    size_t capacity_;
    bool closed_ = false;
};

class StageTimer {
public:
    StageTimer(std::map<std::string, double>& sink, const char* stage)
        : sink_(sink), stage_(stage), start_(std::chrono::steady_clock::now()) {}

    ~StageTimer() {
        auto us = std::chrono::duration_cast<std::chrono::microseconds>(
            std::chrono::steady_clock::now() - start_);
        sink_[stage_] += static_cast<double>(us.count()) / 1000.0;
    }

private:
    std::map<std::string, double>& sink_;
    const char* stage_;
    std::chrono::steady_clock::time_point start_;
};

inline void snapshot_document(const RawDocument& raw, const KnowledgeGraph& base,
                              const PipelineConfig& cfg, const Dictionary& dictionary,
                              const EntityIndex& index, const EmbeddingProvider& provider,
                              Gateway& gateway, const PromptCatalog& catalog,
                              DocSnapshot& snap) {
    StageEnv env{&gateway, &catalog, &snap.audit};
    snap.doc_id = raw.doc_id;
    snap.processed = true;
    try {
        Document doc;
        {
            StageTimer t(snap.stage_millis, "ingest");
            doc = ingest(raw);
        }
        snap.ingested = !doc.error;
        if (doc.error) {
            snap.audit.push_back({"ingest_error", "IA", raw.doc_id,
                                  "document empty after normalization", ""});
            return;
        }

        std::vector<Segment> segments;
        {
            StageTimer t(snap.stage_millis, "read");
            segments = read_document(doc, base, env, cfg.delta);
        }
        snap.segment_count = static_cast<int>(segments.size());

        std::set<std::string> seen_entities;
        std::set<std::string> seen_relations;
        for (const auto& seg : segments) {
            Summary sum;
            if (cfg.use_summarizer) {
                StageTimer t(snap.stage_millis, "summarize");
                sum = summarize(seg, env, cfg.skip_threshold, cfg.word_limit);
            } else {
                // ablation: the segment text flows to extraction untouched
                sum.doc_id = seg.doc_id;
                sum.seg_index = seg.seg_index;
                sum.original_text = seg.text;
                sum.summary = seg.text;
                sum.score = seg.relevance;
            }
            if (sum.omitted()) continue;
            ++snap.summary_count;

            std::vector<ExtractedEntity> ents;
            {
                StageTimer t(snap.stage_millis, "entity_extraction");
                ents = extract_entities(sum, dictionary, index, provider, base, env, cfg.rho);
            }
            for (const auto& e : ents)
                if (seen_entities.insert(e.canonical_id + "\t" + to_lower(e.mention)).second)
                    snap.entities.push_back(e);

            std::vector<CandidateTriplet> cands;
            {
                StageTimer t(snap.stage_millis, "relation_extraction");
                cands = extract_relations(sum, ents, base, env, cfg.theta_default,
                                          cfg.theta_overrides, seg.relevance);
            }
            for (auto& c : cands) {
                seen_relations.insert(c.relation);
                snap.candidates.push_back(std::move(c));
            }
        }

        std::vector<ExtractedEntity> unknown_entities;
        for (const auto& e : snap.entities)
            if (e.is_new) unknown_entities.push_back(e);
        std::vector<std::string> unknown_relations;
        for (const auto& r : seen_relations)
            if (!base.relation_registered(r)) unknown_relations.push_back(r);
        {
            StageTimer t(snap.stage_millis, "schema_alignment");
            snap.schema = align_schema(unknown_entities, unknown_relations, base, env,
                                       raw.doc_id);
        }
    } catch (const BackendError& e) {
        snap.failed = true;
        snap.fail_reason = e.what();
        snap.audit.push_back({"backend_failure", "", raw.doc_id, e.what(), ""});
    } catch (const std::exception& e) {
        // never let a worker thread die; surface the fault as a failed doc
        snap.failed = true;
        snap.fail_reason = std::string("stage error: ") + e.what();
        snap.audit.push_back({"stage_error", "", raw.doc_id, snap.fail_reason, ""});
    }
}

struct UndoStep {
    enum class Kind { remove_edge, overwrite_edge, remove_entity, overwrite_entity };
    Kind kind;
    std::string key;
    Triplet edge;
    CanonicalEntity entity;
};

inline void unwind(KnowledgeGraph& graph, std::vector<UndoStep>& undo) {
    for (auto it = undo.rbegin(); it != undo.rend(); ++it) {
        switch (it->kind) {
            case UndoStep::Kind::remove_edge: graph.remove_edge(it->key); break;
            case UndoStep::Kind::overwrite_edge: graph.overwrite_edge(it->edge); break;
            case UndoStep::Kind::remove_entity: graph.remove_entity(it->key); break;
            case UndoStep::Kind::overwrite_entity: graph.overwrite_entity(it->entity); break;
        }
    }
    undo.clear();
}

// Applies one snapshot to the graph: schema first, then entities (minting
// local ids), then the verification chain per candidate. Unwinds every graph
// mutation before letting a failure escape.
inline DocOutcome commit_document(DocSnapshot& snap, KnowledgeGraph& graph, MintTable& mint,
                                  const PipelineConfig& cfg, Gateway& gateway,
                                  const PromptCatalog& catalog, RunReport& report) {
    DocOutcome out;
    out.doc_id = snap.doc_id;
    out.ingested = snap.ingested;
    out.segments = snap.segment_count;
    out.summaries = snap.summary_count;
    out.entities = static_cast<int>(snap.entities.size());

    AuditLog commit_audit;
    StageEnv env{&gateway, &catalog, &commit_audit};
    std::vector<UndoStep> undo;
    std::vector<std::string> added_entities;
    std::vector<std::string> added_types;
    std::vector<std::string> added_relations;
    std::vector<ReviewItem> review_items;
    try {
        {
            StageTimer t(snap.stage_millis, "integration");
            for (const auto& ty : snap.schema.new_types) {
                if (graph.has_type(ty)) continue;
                graph.add_type(ty);
                added_types.push_back(ty);
            }
        }

        // provisional id -> (final id, schema-mapped flag)
        std::map<std::string, std::pair<std::string, bool>> resolved;
        {
            StageTimer t(snap.stage_millis, "integration");
            for (const auto& e : snap.entities) {
                auto type_it = snap.schema.entity_types.find(e.canonical_id);
                std::string type =
                    type_it != snap.schema.entity_types.end() ? type_it->second : e.entity_type;
                if (!graph.has_type(type)) {
                    graph.add_type(type);
                    added_types.push_back(type);
                }
                bool mapped = !e.is_new;
                auto mapped_it = snap.schema.entity_mapped.find(e.canonical_id);
                if (mapped_it != snap.schema.entity_mapped.end() && mapped_it->second)
                    mapped = true;
                std::string final_id =
                    e.needs_mint ? mint.id_for(e.mention) : e.canonical_id;
                if (graph.has_entity(final_id)) {
                    undo.push_back({UndoStep::Kind::overwrite_entity, final_id, {},
                                    graph.entity(final_id)});
                } else {
                    undo.push_back({UndoStep::Kind::remove_entity, final_id, {}, {}});
                    added_entities.push_back(final_id);
                }
                CanonicalEntity ent;
                ent.id = final_id;
                ent.surface_forms = {e.mention};
                ent.entity_type = type;
                ent.provenance = Provenance::extracted;
                graph.upsert_entity(ent);
                resolved[e.canonical_id] = {final_id, mapped};
            }
        }

        // rewrite candidates onto final ids and the aligned relation names,
        // then collapse duplicates the rewrite may have created
        std::vector<CandidateTriplet> cands;
        std::vector<bool> cand_mapped;
        {
            StageTimer t(snap.stage_millis, "integration");
            std::map<std::string, size_t> by_key;
            for (const auto& raw_cand : snap.candidates) {
                CandidateTriplet c = raw_cand;
                auto head_it = resolved.find(c.head);
                auto tail_it = resolved.find(c.tail);
                if (head_it == resolved.end() || tail_it == resolved.end())
                    throw GraphError("candidate endpoint missing from entity set: " + c.head +
                                     " / " + c.tail);
                c.head = head_it->second.first;
                c.tail = tail_it->second.first;
                auto rw = snap.schema.relation_rewrites.find(c.relation);
                if (rw != snap.schema.relation_rewrites.end()) c.relation = rw->second;
                if (!graph.relation_known(c.relation)) {
                    graph.ensure_relation(c.relation, false);
                    added_relations.push_back(c.relation);
                }
                bool mapped = graph.relation_registered(c.relation) &&
                              head_it->second.second && tail_it->second.second;
                auto key = c.head + "\t" + c.relation + "\t" + c.tail;
                auto it = by_key.find(key);
                if (it != by_key.end()) {
                    auto& kept = cands[it->second];
                    if (c.extraction_confidence > kept.extraction_confidence) {
                        kept.extraction_confidence = c.extraction_confidence;
                        cand_mapped[it->second] = mapped;
                    }
                    continue;
                }
                by_key.emplace(std::move(key), cands.size());
                cands.push_back(std::move(c));
                cand_mapped.push_back(mapped);
            }
        }
        out.candidates = static_cast<int>(cands.size());

        std::vector<size_t> survivors;
        {
            StageTimer t(snap.stage_millis, "conflict_resolution");
            for (size_t i = 0; i < cands.size(); ++i) {
                const auto& c = cands[i];
                Triplet probe{c.head, c.relation, c.tail, c.extraction_confidence};
                std::vector<Triplet> conflicts =
                    cfg.use_conflict_resolution ? graph.find_conflicts(probe)
                                                : std::vector<Triplet>{};
                ConflictOutcome verdict = resolve_conflict(c, conflicts, env, cfg.escalation);
                if (verdict.action == "discard") {
                    ++out.discarded_conflict;
                    commit_audit.push_back({"conflict_discard", "CRA", c.doc_id,
                                            "(" + c.head + ", " + c.relation + ", " + c.tail +
                                                "): " + verdict.rationale,
                                            ""});
                    continue;
                }
                if (verdict.action == "review") {
                    ++out.review;
                    commit_audit.push_back({"conflict_review", "CRA", c.doc_id,
                                            "(" + c.head + ", " + c.relation + ", " + c.tail +
                                                "): " + verdict.rationale,
                                            ""});
                    Triplet pending{c.head, c.relation, c.tail, c.extraction_confidence,
                                    0.5,    0.5,        c.doc_id};
                    pending.status = TripletStatus::review;
                    review_items.push_back({pending, conflicts, verdict.rationale});
                    continue;
                }
                survivors.push_back(i);
            }
        }

        std::map<std::string, double> clarity_scores;
        std::map<std::string, double> relevance_scores;
        std::vector<CandidateTriplet> surviving;
        for (size_t i : survivors) surviving.push_back(cands[i]);
        if (cfg.use_evaluator && !surviving.empty()) {
            StageTimer t(snap.stage_millis, "evaluation");
            clarity_scores = evaluate_channel(surviving, "clarity", env);
            relevance_scores = evaluate_channel(surviving, "relevance", env);
        }

        {
            StageTimer t(snap.stage_millis, "integration");
            for (size_t i : survivors) {
                const auto& c = cands[i];
                Triplet edge{c.head, c.relation, c.tail};
                edge.source_doc = c.doc_id;
                if (cfg.use_evaluator) {
                    auto key = c.head + "\t" + c.relation + "\t" + c.tail;
                    VerificationSignals sig;
                    sig.confidence = {c.extraction_confidence, cand_mapped[i] ? 0.5 : 0.0};
                    auto cl = clarity_scores.find(key);
                    if (cl != clarity_scores.end()) sig.clarity = {cl->second};
                    auto rv = relevance_scores.find(key);
                    if (rv != relevance_scores.end())
                        sig.relevance = {rv->second, c.seg_relevance};
                    else
                        sig.relevance = {c.seg_relevance};
                    EvalResult eval = evaluate(sig, cfg.weights, cfg.integrate_threshold);
                    if (!eval.integrated) {
                        ++out.discarded_evaluator;
                        commit_audit.push_back(
                            {"evaluator_discard", "EA", c.doc_id,
                             "(" + c.head + ", " + c.relation + ", " + c.tail + "): mean " +
                                 format_score(eval.mean()) + " below " +
                                 format_score(cfg.integrate_threshold),
                             ""});
                        continue;
                    }
                    edge.confidence = eval.confidence;
                    edge.clarity = eval.clarity;
                    edge.relevance = eval.relevance;
                } else {
                    // ablation sentinel: extraction score carried through
                    edge.confidence = c.extraction_confidence;
                    edge.clarity = 0.5;
                    edge.relevance = 0.5;
                }
                const Triplet* prior = graph.find_edge(edge.head, edge.relation, edge.tail);
                if (prior) {
                    undo.push_back({UndoStep::Kind::overwrite_edge, "", *prior, {}});
                } else {
                    undo.push_back({UndoStep::Kind::remove_edge, edge.key(), {}, {}});
                }
                graph.integrate_triplet(edge);
                ++out.integrated;
            }
        }
    } catch (const BackendError&) {
        unwind(graph, undo);
        // every candidate the document carried is lost to the failure
        DocOutcome lost;
        lost.doc_id = snap.doc_id;
        lost.ingested = snap.ingested;
        lost.segments = snap.segment_count;
        lost.summaries = snap.summary_count;
        lost.entities = static_cast<int>(snap.entities.size());
        lost.candidates = static_cast<int>(snap.candidates.size());
        lost.dropped_error = lost.candidates;
        snap.audit.insert(snap.audit.end(), commit_audit.begin(), commit_audit.end());
        report.docs.push_back(lost);
        report.candidates += lost.candidates;
        report.dropped_error += lost.dropped_error;
        throw;
    } catch (...) {
        unwind(graph, undo);
        throw;
    }

    for (const auto& id : added_entities) report.new_entities.push_back(id);
    for (const auto& ty : added_types) report.new_types.insert(ty);
    for (const auto& r : added_relations)
        if (std::find(report.new_relations.begin(), report.new_relations.end(), r) ==
            report.new_relations.end())
            report.new_relations.push_back(r);
    for (auto& item : review_items) report.review_queue.push_back(std::move(item));
    snap.audit.insert(snap.audit.end(), commit_audit.begin(), commit_audit.end());
    out.committed = true;
    report.candidates += out.candidates;
    report.integrated += out.integrated;
    report.discarded_conflict += out.discarded_conflict;
    report.discarded_evaluator += out.discarded_evaluator;
    report.review += out.review;
    report.docs.push_back(out);
    return out;
}

}  // namespace detail

inline PipelineResult run_pipeline(const std::vector<RawDocument>& corpus,
                                   const KnowledgeGraph& base, const PipelineConfig& cfg,
                                   Gateway& gateway, const PromptCatalog& catalog,
                                   const Dictionary& dictionary) {
    cfg.validate();
    PipelineResult result{base, {}};
    RunReport& report = result.report;
    report.config = cfg;

    NgramHashProvider provider(64, cfg.seed, 3);
    EntityIndex index;
    for (const auto& [id, e] : base.entities())
        index.add(id, provider.embed(e.surface_forms.empty() ? id : e.primary_form()));

    // commit order: doc_id, then corpus position for safety on duplicates
    std::vector<size_t> order(corpus.size());
    for (size_t i = 0; i < order.size(); ++i) order[i] = i;
    std::sort(order.begin(), order.end(), [&](size_t a, size_t b) {
        if (corpus[a].doc_id != corpus[b].doc_id) return corpus[a].doc_id < corpus[b].doc_id;
        return a < b;
    });

    std::vector<detail::DocSnapshot> snapshots(corpus.size());
    std::atomic<bool> stop{false};
    {
        detail::BoundedQueue queue(static_cast<size_t>(cfg.worker_count) * 2);
        std::vector<std::thread> workers;
        for (int w = 0; w < cfg.worker_count; ++w) {
            workers.emplace_back([&] {
                size_t idx = 0;
                while (queue.pop(idx)) {
                    if (stop.load()) continue;  // drain without working
                    auto& snap = snapshots[idx];
                    snap.corpus_index = idx;
                    detail::snapshot_document(corpus[idx], base, cfg, dictionary, index,
                                              provider, gateway, catalog, snap);
                    if (snap.failed) stop.store(true);
                }
            });
        }
        for (size_t idx : order) queue.push(idx);
        queue.close();
        for (auto& t : workers) t.join();
    }

    MintTable mint;
    bool halted = false;
    for (size_t idx : order) {
        auto& snap = snapshots[idx];
        snap.doc_id = corpus[idx].doc_id;
        if (halted || !snap.processed || snap.failed) {
            if (snap.failed && report.complete) {
                report.complete = false;
                report.stop_reason = snap.fail_reason;
            }
            halted = true;
            DocOutcome skipped;
            skipped.doc_id = snap.doc_id;
            skipped.ingested = snap.ingested;
            report.docs.push_back(skipped);
            report.audit.insert(report.audit.end(), snap.audit.begin(), snap.audit.end());
            continue;
        }
        try {
            detail::commit_document(snap, result.graph, mint, cfg, gateway, catalog, report);
        } catch (const BackendError& e) {
            report.complete = false;
            report.stop_reason = e.what();
            halted = true;
        }
        report.audit.insert(report.audit.end(), snap.audit.begin(), snap.audit.end());
        for (const auto& [stage, ms] : snap.stage_millis) report.stage_millis[stage] += ms;
    }
    if (halted && report.stop_reason.empty()) {
        report.complete = false;
        report.stop_reason = "snapshot phase aborted";
    }

    report.ledger = gateway.ledger_report();
    return result;
}

// --- review queue files ---

inline void export_review_queue(const RunReport& report, const std::string& path) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw InvalidInputError("cannot write review file: " + path);
    for (const auto& item : report.review_queue) {
        nlohmann::json conflicts = nlohmann::json::array();
        for (const auto& c : item.conflicts_with)
            conflicts.push_back({{"head", c.head},
                                 {"relation", c.relation},
                                 {"tail", c.tail},
                                 {"confidence", c.confidence}});
        nlohmann::json line = {{"head", item.triplet.head},
                               {"relation", item.triplet.relation},
                               {"tail", item.triplet.tail},
                               {"confidence", item.triplet.confidence},
                               {"clarity", item.triplet.clarity},
                               {"relevance", item.triplet.relevance},
                               {"source_doc", item.triplet.source_doc},
                               {"rationale", item.rationale},
                               {"conflicts_with", std::move(conflicts)},
                               {"decision", nullptr}};
        out << line.dump() << "\n";
    }
}

struct ReviewImportResult {
    int applied = 0;   // accept or reject decisions acted on
    int pending = 0;   // decision still null
    std::vector<std::string> warnings;

    bool ok() const { return warnings.empty() || applied > 0 || pending > 0; }
};

inline ReviewImportResult import_review_decisions(KnowledgeGraph& graph,
                                                  const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw InvalidInputError("cannot read review file: " + path);
    ReviewImportResult res;
    std::string line;
    size_t lineno = 0;
    auto warn = [&](const std::string& msg) {
        res.warnings.push_back(path + ":" + std::to_string(lineno) + ": " + msg);
    };
    while (std::getline(in, line)) {
        ++lineno;
        if (trim(line).empty()) continue;
        nlohmann::json j = nlohmann::json::parse(line, nullptr, false);
        if (j.is_discarded() || !j.is_object()) {
            warn("not a JSON object");
            continue;
        }
        if (!j.contains("head") || !j.contains("relation") || !j.contains("tail") ||
            !j["head"].is_string() || !j["relation"].is_string() || !j["tail"].is_string()) {
            warn("missing head/relation/tail");
            continue;
        }
        Triplet t;
        t.head = j["head"].get<std::string>();
        t.relation = j["relation"].get<std::string>();
        t.tail = j["tail"].get<std::string>();
        t.confidence = j.value("confidence", 1.0);
        t.clarity = j.value("clarity", 0.5);
        t.relevance = j.value("relevance", 0.5);
        t.source_doc = j.value("source_doc", "");
        auto decision = j.value("decision", nlohmann::json());
        if (decision.is_null()) {
            ++res.pending;
            continue;
        }
        if (!decision.is_string() ||
            (decision != "accept" && decision != "reject")) {
            warn("decision must be null, \"accept\", or \"reject\"");
            continue;
        }
        if (decision == "reject") {
            graph.remove_edge(t.key());  // absent edge is a no-op
            ++res.applied;
            continue;
        }
        if (!graph.has_entity(t.head) || !graph.has_entity(t.tail)) {
            warn("unknown triplet endpoints: " + t.head + " / " + t.tail);
            continue;
        }
        for (double v : {t.confidence, t.clarity, t.relevance}) {
            if (!(v >= 0.0 && v <= 1.0)) {
                warn("score outside [0,1]");
                t.confidence = -1.0;
                break;
            }
        }
        if (t.confidence < 0.0) continue;
        if (!graph.relation_known(t.relation)) graph.ensure_relation(t.relation, false);
        graph.integrate_triplet(t);
        ++res.applied;
    }
    return res;
}

}  // namespace karma
