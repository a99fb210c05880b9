#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <fstream>
#include <random>

#include "karma/agents.hpp"

using namespace karma;

namespace {

std::string fixture(const std::string& name) {
    std::ifstream in(std::string(KARMA_FIXTURE_DIR) + "/appendix_samples/" + name,
                     std::ios::binary);
    REQUIRE(in.good());
    return std::string((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
}

const PromptCatalog& catalog() {
    static PromptCatalog c = PromptCatalog::load_dir(KARMA_PROMPT_DIR);
    return c;
}

// Owns the scripted gateway and audit log one stage test needs.
struct StageHarness {
    std::shared_ptr<ScriptedBackend> backend;
    Gateway gateway;
    AuditLog audit;

    explicit StageHarness(std::vector<ScriptedRule> rules,
                          std::optional<std::string> fallback = std::nullopt)
        : backend(std::make_shared<ScriptedBackend>(std::move(rules), std::move(fallback))),
          gateway(backend, GatewayOptions{}) {}

    StageEnv env() { return {&gateway, &catalog(), &audit}; }

    long calls() { return gateway.ledger_report().global.calls; }

    long audit_count(const std::string& kind) const {
        long n = 0;
        for (const auto& r : audit)
            if (r.kind == kind) ++n;
        return n;
    }
};

// Two paragraphs long enough to stand as separate reader segments.
const char* kAbstractPara =
    "Abstract We tested new antiviral compounds in a randomized controlled trial across three "
    "hospital sites and observed a significant reduction in symptom duration for the treatment "
    "arm compared with placebo over fourteen days of follow-up.";
const char* kMethodsPara =
    "Methods The protocol was approved by the institutional review board and followed standard "
    "double blind procedures with block randomization stratified by site, age group, and "
    "baseline severity to keep the assignment of participants balanced.";

Document doc_with(const std::string& content) {
    RawDocument raw;
    raw.doc_id = "doc-1";
    raw.text = content;
    raw.metadata_hints = {{"title", "Antimicrobial Study"}};
    return ingest(raw);
}

ExtractedEntity entity_of(const std::string& mention, const std::string& type,
                          const std::string& id) {
    ExtractedEntity e;
    e.mention = mention;
    e.entity_type = type;
    e.canonical_id = id;
    return e;
}

Summary summary_of(const std::string& text, double score = 0.9) {
    Summary s;
    s.doc_id = "doc-1";
    s.summary = text;
    s.original_text = text;
    s.score = score;
    return s;
}

}  // namespace

TEST_CASE("sigmoid hits its reference points") {
    CHECK(sigmoid(0.0) == 0.5);
    CHECK(std::abs(sigmoid(2.0) - 0.8807970779778823) < 1e-15);
    CHECK(std::abs(sigmoid(-2.0) - (1.0 - 0.8807970779778823)) < 1e-15);
    CHECK(sigmoid(30.0) < 1.0);
    CHECK(sigmoid(-30.0) > 0.0);
}

TEST_CASE("evaluate with empty signals sits exactly on the boundary") {
    auto r = evaluate(VerificationSignals{}, EvaluatorWeights{}, 0.5);
    CHECK(r.confidence == 0.5);
    CHECK(r.clarity == 0.5);
    CHECK(r.relevance == 0.5);
    CHECK(r.mean() == 0.5);
    CHECK(r.integrated);  // inclusive threshold
    CHECK_FALSE(evaluate(VerificationSignals{}, EvaluatorWeights{}, 0.5000001).integrated);
}

TEST_CASE("evaluate matches hand arithmetic on one confidence signal") {
    VerificationSignals s;
    s.confidence = {2.0};
    EvaluatorWeights w;
    w.alpha = {1.0};
    auto r = evaluate(s, w, 0.6);
    CHECK(std::abs(r.confidence - 0.8807970779778823) < 1e-12);
    CHECK(r.clarity == 0.5);
    CHECK(r.relevance == 0.5);
    CHECK(std::abs(r.mean() - (0.8807970779778823 + 1.0) / 3.0) < 1e-12);
    CHECK(r.integrated);  // mean ~0.6269 over 0.6
    CHECK_FALSE(evaluate(s, w, 0.63).integrated);
}

TEST_CASE("evaluate applies per-signal weights") {
    VerificationSignals s;
    s.confidence = {1.0, 0.5};
    EvaluatorWeights w;
    w.alpha = {2.0, 0.0, 9.9};  // extra weights ignored
    auto r = evaluate(s, w, 0.0);
    CHECK(std::abs(r.confidence - sigmoid(2.0)) < 1e-12);
}

TEST_CASE("threshold one needs saturated signals on every channel") {
    VerificationSignals s;
    s.confidence = {30.0};
    s.clarity = {30.0};
    s.relevance = {30.0};
    auto r = evaluate(s, EvaluatorWeights{}, 1.0);
    CHECK_FALSE(r.integrated);  // strictly below 1 at finite moderate signals
    CHECK(r.confidence < 1.0);
}

TEST_CASE("evaluate rejects bad weights, signals, and thresholds") {
    VerificationSignals s;
    s.confidence = {1.0, 2.0};
    EvaluatorWeights w;
    w.alpha = {1.0};
    CHECK_THROWS_AS(evaluate(s, w, 0.5), EvaluationError);

    VerificationSignals nan_s;
    nan_s.clarity = {std::nan("")};
    CHECK_THROWS_AS(evaluate(nan_s, EvaluatorWeights{}, 0.5), EvaluationError);
    VerificationSignals inf_s;
    inf_s.relevance = {std::numeric_limits<double>::infinity()};
    CHECK_THROWS_AS(evaluate(inf_s, EvaluatorWeights{}, 0.5), EvaluationError);

    CHECK_THROWS_AS(evaluate(s, EvaluatorWeights{}, 1.5), ConfigError);
    CHECK_THROWS_AS(evaluate(s, EvaluatorWeights{}, -0.1), ConfigError);
}

TEST_CASE("raising any weighted signal never lowers its channel score") {
    std::mt19937 rng(90125);
    std::uniform_real_distribution<double> sig(-3.0, 3.0);
    std::uniform_real_distribution<double> wt(0.05, 2.0);
    std::uniform_real_distribution<double> bump(0.01, 1.5);
    std::uniform_int_distribution<size_t> len(1, 6);
    for (int trial = 0; trial < 2000; ++trial) {
        VerificationSignals s;
        EvaluatorWeights w;
        size_t n = len(rng);
        for (size_t i = 0; i < n; ++i) {
            s.confidence.push_back(sig(rng));
            w.alpha.push_back(wt(rng));
        }
        auto base = evaluate(s, w, 0.5);
        size_t at = std::uniform_int_distribution<size_t>(0, n - 1)(rng);
        s.confidence[at] += bump(rng);
        auto raised = evaluate(s, w, 0.5);
        REQUIRE(raised.confidence >= base.confidence);
        CHECK(raised.clarity == base.clarity);
    }
}

TEST_CASE("ingest transliterates and defaults metadata") {
    RawDocument raw;
    raw.doc_id = "d9";
    raw.text = "\xce\xb1-synuclein aggregates at 37\xc2\xb0" "C";
    raw.metadata_hints = {{"doi", "10.1000/x"}};
    auto doc = ingest(raw);
    CHECK_FALSE(doc.error);
    CHECK(doc.content.find("\\alpha-synuclein") != std::string::npos);
    CHECK(doc.content.find(" degC") != std::string::npos);
    CHECK(doc.metadata.doi == "10.1000/x");
    CHECK(doc.metadata.title == "N/A");
    CHECK(doc.metadata.pmid == "N/A");
}

TEST_CASE("ingest flags empty and all-whitespace documents") {
    RawDocument raw;
    raw.doc_id = "d0";
    raw.text = " \n\t  \n ";
    auto doc = ingest(raw);
    CHECK(doc.error);
    CHECK(doc.content.empty());
}

TEST_CASE("ingest preserves unreadable spans verbatim") {
    RawDocument raw;
    raw.doc_id = "d1";
    raw.text = "Intro text.\n\n[UNREADABLE]\n\nConclusion.";
    auto doc = ingest(raw);
    CHECK(doc.content.find("[UNREADABLE]") != std::string::npos);
}

TEST_CASE("segment_content merges paragraphs up to the size floor") {
    std::string shorts = "First tiny.\n\nSecond tiny.\n\nThird tiny.";
    auto merged = segment_content(shorts, 200);
    REQUIRE(merged.size() == 1);
    CHECK(merged[0].find("First tiny.") != std::string::npos);
    CHECK(merged[0].find("Third tiny.") != std::string::npos);

    auto two = segment_content(std::string(kAbstractPara) + "\n\n" + kMethodsPara, 200);
    REQUIRE(two.size() == 2);
    CHECK(two[0].rfind("Abstract", 0) == 0);
    CHECK(two[1].rfind("Methods", 0) == 0);

    // trailing paragraph under the floor still becomes its own chunk
    auto trailing = segment_content(std::string(kAbstractPara) + "\n\nAppendix note.", 200);
    REQUIRE(trailing.size() == 2);
    CHECK(trailing[1] == "Appendix note.");
}

TEST_CASE("reader keeps only segments at or above delta") {
    StageHarness h({
        {"RA", "Abstract We tested", R"({"segments": [{"text": "a", "score": 0.85}]})"},
        {"RA", "Methods The protocol", R"({"segments": [{"text": "m", "score": 0.30}]})"},
    });
    auto doc = doc_with(std::string(kAbstractPara) + "\n\n" + kMethodsPara);
    auto segs = read_document(doc, KnowledgeGraph{}, h.env(), 0.5);
    REQUIRE(segs.size() == 1);
    CHECK(segs[0].relevance == 0.85);
    CHECK(segs[0].seg_index == 0);
    CHECK(segs[0].text.rfind("Abstract", 0) == 0);
    CHECK(h.calls() == 2);

    StageHarness h2({
        {"RA", "Abstract We tested", R"({"segments": [{"text": "a", "score": 0.85}]})"},
        {"RA", "Methods The protocol", R"({"segments": [{"text": "m", "score": 0.30}]})"},
    });
    auto all = read_document(doc, KnowledgeGraph{}, h2.env(), 0.0);
    REQUIRE(all.size() == 2);
    CHECK(all[1].relevance == 0.30);
    CHECK(all[1].seg_index == 1);
}

TEST_CASE("short segments score zero without any model call") {
    StageHarness h({});
    auto doc = doc_with("Tiny note.");
    auto segs = read_document(doc, KnowledgeGraph{}, h.env(), 0.0);
    REQUIRE(segs.size() == 1);
    CHECK(segs[0].relevance == 0.0);
    CHECK(h.calls() == 0);
}

TEST_CASE("reader skips error documents and unscorable segments") {
    StageHarness h({});
    Document err;
    err.error = true;
    CHECK(read_document(err, KnowledgeGraph{}, h.env(), 0.0).empty());

    StageHarness garbage({}, std::string("not json at all"));
    auto doc = doc_with(kAbstractPara);
    auto segs = read_document(doc, KnowledgeGraph{}, garbage.env(), 0.0);
    CHECK(segs.empty());
    CHECK(garbage.audit_count("parse_failure") == 2);
    CHECK(garbage.audit_count("skip") == 1);
}

TEST_CASE("reader payload carries the schema digest, not the graph") {
    KnowledgeGraph g;
    CanonicalEntity e;
    e.id = "MESH:D001241";
    e.surface_forms = {"Aspirin"};
    e.entity_type = "Drug";
    g.upsert_entity(e);
    StageHarness h({{"RA", "\"entity_count\":1", R"({"segments": [{"text": "a", "score": 1.0}]})"}});
    auto segs = read_document(doc_with(kAbstractPara), g, h.env(), 0.5);
    REQUIRE(segs.size() == 1);  // rule only matches when the digest is present
    CHECK(h.calls() == 1);
}

TEST_CASE("summarizer omits low-relevance segments locally") {
    StageHarness h({});
    Segment seg;
    seg.doc_id = "doc-1";
    seg.text = "whatever";
    seg.relevance = 0.1;
    auto sum = summarize(seg, h.env(), 0.2);
    CHECK(sum.summary == "[OMITTED]");
    CHECK(sum.omitted());
    CHECK(sum.score == 0.1);
    CHECK(h.calls() == 0);
}

TEST_CASE("summarizer keeps precise markers from the model output") {
    StageHarness h({{"SA", "control group",
                     fixture("sa.json")}});
    Segment seg;
    seg.doc_id = "doc-1";
    seg.text = "The control group had p=0.01 and the drug arm improved.";
    seg.relevance = 0.75;
    auto sum = summarize(seg, h.env(), 0.2);
    CHECK(sum.summary.find("IL-6") != std::string::npos);  // first fixture summary
    CHECK(sum.score == 0.90);
    CHECK(sum.original_text == seg.text);
    CHECK(h.calls() == 1);

    StageHarness h2({{"SA", "",
                      R"({"summaries": [{"original_text": "x",
                          "summary": "Researchers observed a statistically significant difference (p=0.01) between arms.",
                          "score": 0.75}]})"}});
    auto sum2 = summarize(seg, h2.env(), 0.2);
    CHECK(sum2.summary.find("p=0.01") != std::string::npos);
    CHECK(sum2.score == 0.75);
}

TEST_CASE("summaries over the word limit are clamped with an audit note") {
    std::string longsum;
    for (int i = 0; i < 150; ++i) longsum += "word" + std::to_string(i) + " ";
    StageHarness h({{"SA", "", std::string(R"({"summaries": [{"original_text": "x", "summary": ")") +
                                   trim(longsum) + R"(", "score": 0.9}]})"}});
    Segment seg;
    seg.doc_id = "doc-1";
    seg.text = "long segment";
    seg.relevance = 0.9;
    auto sum = summarize(seg, h.env(), 0.2);
    CHECK(word_count(sum.summary) == 100);
    CHECK(sum.summary.rfind("word0 ", 0) == 0);
    REQUIRE(h.audit_count("truncation") == 1);
    CHECK(h.audit[0].agent == "SA");
}

TEST_CASE("unparseable summaries degrade to the original segment") {
    StageHarness h({}, std::string("no json in me"));
    Segment seg;
    seg.doc_id = "doc-1";
    seg.text = "Aspirin lowered fever in the cohort.";
    seg.relevance = 0.8;
    auto sum = summarize(seg, h.env(), 0.2);
    CHECK(sum.summary == seg.text);
    CHECK(sum.score == 0.8);
    CHECK(h.audit_count("parse_failure") == 2);
    CHECK(h.audit_count("skip") == 1);
}

TEST_CASE("entity extraction resolves the aspirin example end to end") {
    StageHarness h({{"EEA", "Aspirin for headache", fixture("eea.json")}});
    NgramHashProvider provider;
    EntityIndex index;
    auto sum = summary_of("We tested Aspirin for headache relief at a dosage of 100 mg.");
    auto ents = extract_entities(sum, Dictionary{}, index, provider, KnowledgeGraph{}, h.env(),
                                 0.35);
    REQUIRE(ents.size() == 2);
    CHECK(ents[0].mention == "Aspirin");
    CHECK(ents[0].entity_type == "Drug");
    CHECK(ents[0].canonical_id == "MESH:D001241");
    CHECK(ents[0].is_new);  // graph is empty here
    CHECK_FALSE(ents[0].needs_mint);
    CHECK(ents[1].canonical_id == "UMLS:C0018681");
    CHECK(ents[1].entity_type == "Disease");
}

TEST_CASE("omitted summaries produce no extraction call") {
    StageHarness h({});
    NgramHashProvider provider;
    EntityIndex index;
    Summary omitted;
    omitted.summary = "[OMITTED]";
    auto ents = extract_entities(omitted, Dictionary{}, index, provider, KnowledgeGraph{},
                                 h.env(), 0.35);
    CHECK(ents.empty());
    CHECK(h.calls() == 0);
}

TEST_CASE("off-domain mentions without ontology backing are filtered") {
    StageHarness h({{"EEA", "",
                     R"({"entities": [
                         {"mention": "Paris", "type": "Location", "normalized_id": "N/A"},
                         {"mention": "mystery stuff", "type": "Other", "normalized_id": "N/A"},
                         {"mention": "ibuprofen", "type": "Drug", "normalized_id": "N/A"}]})"}});
    NgramHashProvider provider;
    EntityIndex index;
    auto ents = extract_entities(summary_of("Paris hosted a trial of ibuprofen."), Dictionary{},
                                 index, provider, KnowledgeGraph{}, h.env(), 0.35);
    REQUIRE(ents.size() == 1);
    CHECK(ents[0].mention == "ibuprofen");
    CHECK(ents[0].needs_mint);
    CHECK(h.audit_count("drop") == 2);
}

TEST_CASE("ontology hits survive the filter and supply id and type") {
    Dictionary dict;
    dict.add("paris polyphylla", "MESH:C0043421", "Chemical");
    dict.add("acetylsalicylic acid", "MESH:D001241", "Drug");
    StageHarness h({{"EEA", "",
                     R"({"entities": [
                         {"mention": "Paris polyphylla", "type": "Other", "normalized_id": "N/A"},
                         {"mention": "Acetylsalicylic Acid", "type": "Chemical", "normalized_id": "N/A"}]})"}});
    NgramHashProvider provider;
    EntityIndex index;
    auto ents = extract_entities(summary_of("Paris polyphylla extract resembles acetylsalicylic acid."),
                                 dict, index, provider, KnowledgeGraph{}, h.env(), 0.35);
    REQUIRE(ents.size() == 2);
    CHECK(ents[0].canonical_id == "MESH:C0043421");
    CHECK(ents[0].entity_type == "Chemical");  // dictionary type wins
    CHECK(ents[1].canonical_id == "MESH:D001241");
    CHECK(ents[1].entity_type == "Drug");
}

TEST_CASE("unmatched mentions map through the index or get provisional ids") {
    KnowledgeGraph g;
    CanonicalEntity e;
    e.id = "UNIPROT:P01375";
    e.surface_forms = {"TNF-alpha"};
    e.entity_type = "Protein";
    g.upsert_entity(e);
    NgramHashProvider provider;
    EntityIndex index;
    index.add("UNIPROT:P01375", provider.embed("TNF-alpha"));

    StageHarness h({{"EEA", "",
                     R"({"entities": [
                         {"mention": "TNF-alpha", "type": "Gene", "normalized_id": "N/A"},
                         {"mention": "quartz crystal", "type": "Chemical", "normalized_id": "N/A"}]})"}});
    auto ents = extract_entities(summary_of("TNF-alpha binds the quartz crystal sensor."),
                                 Dictionary{}, index, provider, g, h.env(), 0.35);
    REQUIRE(ents.size() == 2);
    CHECK(ents[0].canonical_id == "UNIPROT:P01375");
    CHECK(ents[0].entity_type == "Protein");  // graph type, not the claimed Gene
    CHECK_FALSE(ents[0].is_new);
    CHECK(ents[1].needs_mint);
    CHECK(ents[1].canonical_id == "quartz crystal");
    CHECK(ents[1].is_new);
}

TEST_CASE("mint table numbers mentions stably and case-insensitively") {
    MintTable mint;
    auto a = mint.id_for("XYZ-42");
    CHECK(a == "LOCAL:00001");
    CHECK(mint.id_for("xyz-42") == "LOCAL:00001");
    CHECK(mint.id_for(" XYZ-42 ") == "LOCAL:00001");
    CHECK(mint.id_for("other thing") == "LOCAL:00002");
    CHECK(mint.size() == 2);
}

TEST_CASE("relation extraction keeps the published aspirin pair") {
    StageHarness h({{"REA", "reduce headaches", fixture("rea.json")}});
    std::vector<ExtractedEntity> ents = {
        entity_of("Aspirin", "Drug", "MESH:D001241"),
        entity_of("headaches", "Disease", "UMLS:C0018681"),
        entity_of("prostaglandin", "Chemical", "MESH:D011441"),
    };
    auto sum = summary_of("Aspirin was shown to reduce headaches by inhibiting prostaglandin...");
    auto cands = extract_relations(sum, ents, KnowledgeGraph{}, h.env(), 0.5, {}, 0.85);
    REQUIRE(cands.size() == 2);
    CHECK(cands[0].head == "MESH:D001241");
    CHECK(cands[0].relation == "treats");
    CHECK(cands[0].tail == "UMLS:C0018681");
    CHECK(cands[0].extraction_confidence == 1.0);  // optional on the wire
    CHECK(cands[0].seg_relevance == 0.85);
    CHECK(cands[1].relation == "inhibits");
    CHECK(cands[1].tail == "MESH:D011441");
}

TEST_CASE("one entity means no relation call at all") {
    StageHarness h({});
    auto cands = extract_relations(summary_of("text"), {entity_of("a", "Drug", "X:1")},
                                   KnowledgeGraph{}, h.env(), 0.5, {}, 0.5);
    CHECK(cands.empty());
    CHECK(h.calls() == 0);
}

TEST_CASE("relation confidences below their threshold are filtered") {
    StageHarness h({{"REA", "",
                     R"({"relationships": [
                         {"head": "X:1", "relation": "treats", "tail": "X:2", "confidence": 0.6},
                         {"head": "X:1", "relation": "causes", "tail": "X:2", "confidence": 0.4}]})"}});
    auto cands = extract_relations(summary_of("s"),
                                   {entity_of("a", "Drug", "X:1"), entity_of("b", "Disease", "X:2")},
                                   KnowledgeGraph{}, h.env(), 0.5, {}, 0.5);
    REQUIRE(cands.size() == 1);
    CHECK(cands[0].relation == "treats");
    CHECK(h.audit_count("drop") == 1);
}

TEST_CASE("per-relation threshold overrides beat the default") {
    StageHarness h({{"REA", "",
                     R"({"relationships": [
                         {"head": "X:1", "relation": "treats", "tail": "X:2", "confidence": 0.6},
                         {"head": "X:1", "relation": "causes", "tail": "X:2", "confidence": 0.6}]})"}});
    std::map<std::string, double> theta = {{"treats", 0.7}};
    auto cands = extract_relations(summary_of("s"),
                                   {entity_of("a", "Drug", "X:1"), entity_of("b", "Disease", "X:2")},
                                   KnowledgeGraph{}, h.env(), 0.5, theta, 0.5);
    REQUIRE(cands.size() == 1);
    CHECK(cands[0].relation == "causes");
}

TEST_CASE("relation endpoints resolve by id or mention, else drop") {
    StageHarness h({{"REA", "",
                     R"({"relationships": [
                         {"head": "Aspirin", "relation": "treats", "tail": "UMLS:C0018681"},
                         {"head": "Ghost", "relation": "treats", "tail": "UMLS:C0018681"}]})"}});
    auto cands = extract_relations(summary_of("s"),
                                   {entity_of("Aspirin", "Drug", "MESH:D001241"),
                                    entity_of("headache", "Disease", "UMLS:C0018681")},
                                   KnowledgeGraph{}, h.env(), 0.5, {}, 0.5);
    REQUIRE(cands.size() == 1);
    CHECK(cands[0].head == "MESH:D001241");  // mention resolved to its id
    CHECK(h.audit_count("drop") == 1);
}

TEST_CASE("negated and unnamed relations never pass") {
    StageHarness h({{"REA", "",
                     R"({"relationships": [
                         {"head": "X:1", "relation": "not_treats", "tail": "X:2"},
                         {"head": "X:1", "relation": "Does Not Treat", "tail": "X:2"},
                         {"head": "X:1", "relation": "treats", "tail": "X:2"}]})"}});
    auto cands = extract_relations(summary_of("s"),
                                   {entity_of("a", "Drug", "X:1"), entity_of("b", "Disease", "X:2")},
                                   KnowledgeGraph{}, h.env(), 0.5, {}, 0.5);
    REQUIRE(cands.size() == 2);  // normalized "does_not_treat" is not negation-prefixed
    CHECK(cands[0].relation == "does_not_treat");
    CHECK(cands[1].relation == "treats");
    CHECK(h.audit_count("drop") == 1);
}

TEST_CASE("duplicate relation candidates collapse to the best confidence") {
    StageHarness h({{"REA", "",
                     R"({"relationships": [
                         {"head": "X:1", "relation": "treats", "tail": "X:2", "confidence": 0.6},
                         {"head": "X:1", "relation": "Treats", "tail": "X:2", "confidence": 0.9}]})"}});
    auto cands = extract_relations(summary_of("s"),
                                   {entity_of("a", "Drug", "X:1"), entity_of("b", "Disease", "X:2")},
                                   KnowledgeGraph{}, h.env(), 0.5, {}, 0.5);
    REQUIRE(cands.size() == 1);
    CHECK(cands[0].extraction_confidence == 0.9);
}

TEST_CASE("schema alignment applies the published TNF-alpha example") {
    StageHarness h({{"SAA", "TNF-alpha", fixture("saa.json")}});
    std::vector<ExtractedEntity> unknowns = {
        entity_of("TNF-alpha", "Protein", "TNF-alpha"),
        entity_of("miR-21", "Other", "miR-21"),
    };
    auto res = align_schema(unknowns, {"overexpresses"}, KnowledgeGraph{}, h.env(), "doc-1");
    CHECK(res.entity_types.at("TNF-alpha") == "Protein");
    CHECK(res.entity_mapped.at("TNF-alpha"));
    CHECK(res.entity_types.at("miR-21") == "RNA");
    CHECK_FALSE(res.entity_mapped.at("miR-21"));  // status "new"
    CHECK(res.new_types.empty());                 // Protein and RNA are schema types
    REQUIRE(res.new_relations.size() == 1);
    CHECK(res.new_relations[0].relation == "overexpresses");
    CHECK(res.new_relations[0].closest_match == "upregulates");
    CHECK(res.relation_rewrites.empty());
    CHECK(h.calls() == 1);
}

TEST_CASE("empty alignment input makes no call") {
    StageHarness h({});
    auto res = align_schema({}, {}, KnowledgeGraph{}, h.env(), "doc-1");
    CHECK(res.entity_types.empty());
    CHECK(res.new_relations.empty());
    CHECK(h.calls() == 0);
}

TEST_CASE("mapped relations are rewritten onto the existing vocabulary") {
    StageHarness h({{"SAA", "",
                     R"({"alignments": [],
                         "new_relations": [
                           {"relation": "cures", "closest_match": "treats", "status": "mapped"},
                           {"relation": "melts", "closest_match": "treats", "status": "new"}]})"}});
    auto res = align_schema({entity_of("x", "Drug", "L:1")}, {"cures", "melts"}, KnowledgeGraph{},
                            h.env(), "doc-1");
    REQUIRE(res.relation_rewrites.count("cures") == 1);
    CHECK(res.relation_rewrites.at("cures") == "treats");
    REQUIRE(res.new_relations.size() == 1);
    CHECK(res.new_relations[0].relation == "melts");
}

TEST_CASE("unknown proposed types are collected as schema candidates") {
    StageHarness h({{"SAA", "",
                     R"({"alignments": [
                         {"id": "IL-33", "proposed_type": "Cytokine", "status": "mapped"},
                         {"id": "D:7", "proposed_type": "drug", "status": "mapped"}]})"}});
    auto res = align_schema({entity_of("IL-33", "Other", "IL-33"), entity_of("d", "Other", "D:7")},
                            {}, KnowledgeGraph{}, h.env(), "doc-1");
    CHECK(res.entity_types.at("IL-33") == "Cytokine");
    CHECK_FALSE(res.entity_mapped.at("IL-33"));  // cannot map onto an unknown type
    CHECK(res.new_types.count("Cytokine") == 1);
    CHECK(res.entity_types.at("D:7") == "Drug");  // case folded onto the schema spelling
    CHECK(res.entity_mapped.at("D:7"));
}

TEST_CASE("entities missing from the alignment response stay unaligned") {
    StageHarness h({{"SAA", "",
                     R"({"alignments": [{"id": "A:1", "proposed_type": "Drug", "status": "mapped"}]})"}});
    auto res = align_schema({entity_of("a", "Drug", "A:1"), entity_of("g", "Gadget", "G:1")}, {},
                            KnowledgeGraph{}, h.env(), "doc-1");
    CHECK(res.entity_mapped.at("A:1"));
    CHECK(res.entity_types.at("G:1") == "Other");  // Gadget is not a schema type
    CHECK_FALSE(res.entity_mapped.at("G:1"));
    CHECK(h.audit_count("field_warning") == 1);
}

TEST_CASE("alignment parse failure leaves inputs conservatively typed") {
    StageHarness h({}, std::string("|| broken"));
    auto res = align_schema({entity_of("m", "Protein", "M:1")}, {"zaps"}, KnowledgeGraph{},
                            h.env(), "doc-1");
    CHECK(res.entity_types.at("M:1") == "Other");
    CHECK_FALSE(res.entity_mapped.at("M:1"));
    CHECK(res.new_relations.empty());
    CHECK(h.audit_count("skip") == 1);
}

TEST_CASE("conflict resolution follows the published contradiction flow") {
    StageHarness h({{"CRA", "causes", fixture("cra.json")}});
    CandidateTriplet t;
    t.head = "DrugX";
    t.relation = "treats";
    t.tail = "DiseaseY";
    t.extraction_confidence = 0.9;
    t.doc_id = "doc-1";
    Triplet existing;
    existing.head = "DrugX";
    existing.relation = "causes";
    existing.tail = "DiseaseY";
    existing.confidence = 0.8;
    auto out = resolve_conflict(t, {existing}, h.env(), 0.7);
    CHECK(out.decision == "Contradict");
    CHECK(out.action == "review");  // both sides at or above the escalation bound
    CHECK(out.rationale == "Both have high confidence; manual verification required.");
    CHECK(h.calls() == 1);
}

TEST_CASE("low-confidence contradictions are discarded, not escalated") {
    CandidateTriplet t;
    t.head = "A:1";
    t.relation = "treats";
    t.tail = "B:1";
    t.extraction_confidence = 0.9;
    Triplet existing;
    existing.head = "A:1";
    existing.relation = "causes";
    existing.tail = "B:1";
    existing.confidence = 0.5;

    StageHarness weak({{"CRA", "", fixture("cra.json")}});
    auto out = resolve_conflict(t, {existing}, weak.env(), 0.7);
    CHECK(out.decision == "Contradict");
    CHECK(out.action == "discard");

    t.extraction_confidence = 0.6;
    existing.confidence = 0.9;
    StageHarness weak2({{"CRA", "", fixture("cra.json")}});
    CHECK(resolve_conflict(t, {existing}, weak2.env(), 0.7).action == "discard");
}

TEST_CASE("ambiguous and agreeing verdicts map to review and integrate") {
    CandidateTriplet t;
    t.head = "A:1";
    t.relation = "treats";
    t.tail = "B:1";
    Triplet existing;
    existing.head = "A:1";
    existing.relation = "causes";
    existing.tail = "B:1";

    StageHarness amb({{"CRA", "",
                       R"({"decision": "Ambiguous", "resolution": {"action": "integrate",
                           "rationale": "context differs"}})"}});
    auto out = resolve_conflict(t, {existing}, amb.env(), 0.7);
    CHECK(out.decision == "Ambiguous");
    CHECK(out.action == "review");  // local matrix overrides the model's action
    CHECK(out.rationale == "context differs");

    StageHarness agree({{"CRA", "",
                         R"({"decision": "Agree", "resolution": {"action": "discard"}})"}});
    auto ok = resolve_conflict(t, {existing}, agree.env(), 0.7);
    CHECK(ok.decision == "Agree");
    CHECK(ok.action == "integrate");
}

TEST_CASE("no conflicts means integrate with zero calls") {
    StageHarness h({});
    CandidateTriplet t;
    auto out = resolve_conflict(t, {}, h.env(), 0.7);
    CHECK(out.decision == "None");
    CHECK(out.action == "integrate");
    CHECK(h.calls() == 0);
}

TEST_CASE("unparseable conflict verdicts fall back to review") {
    StageHarness h({}, std::string("shrug"));
    CandidateTriplet t;
    t.head = "A:1";
    t.relation = "treats";
    t.tail = "B:1";
    Triplet existing;
    existing.head = "A:1";
    existing.relation = "causes";
    existing.tail = "B:1";
    auto out = resolve_conflict(t, {existing}, h.env(), 0.7);
    CHECK(out.decision == "Ambiguous");
    CHECK(out.action == "review");
    CHECK(h.audit_count("skip") == 1);
}

TEST_CASE("the worst pairwise verdict wins across conflicts") {
    CandidateTriplet t;
    t.head = "A:1";
    t.relation = "inhibits";
    t.tail = "B:1";
    t.extraction_confidence = 0.95;
    Triplet agree_edge;
    agree_edge.head = "A:1";
    agree_edge.relation = "interacts_with";
    agree_edge.tail = "B:1";
    agree_edge.confidence = 0.9;
    Triplet fight_edge;
    fight_edge.head = "A:1";
    fight_edge.relation = "activates";
    fight_edge.tail = "B:1";
    fight_edge.confidence = 0.9;

    StageHarness h({
        {"CRA", "interacts_with", R"({"decision": "Agree", "resolution": {"action": "integrate"}})"},
        {"CRA", "activates",
         R"({"decision": "Contradict", "resolution": {"action": "review", "rationale": "direct opposition"}})"},
    });
    auto out = resolve_conflict(t, {agree_edge, fight_edge}, h.env(), 0.7);
    CHECK(out.decision == "Contradict");
    CHECK(out.action == "review");
    CHECK(out.rationale == "direct opposition");
    CHECK(h.calls() == 2);
}

TEST_CASE("evaluator channels score batches and note missing triplets") {
    std::vector<CandidateTriplet> cands(2);
    cands[0].head = "DrugA";
    cands[0].relation = "may_treat";
    cands[0].tail = "ConditionB";
    cands[0].doc_id = "doc-1";
    cands[1].head = "EntityX";
    cands[1].relation = "unknownRel";
    cands[1].tail = "EntityY";
    cands[1].doc_id = "doc-1";

    StageHarness h({{"EA_clarity", "", fixture("ea_clarity.json")}});
    auto scores = evaluate_channel(cands, "clarity", h.env());
    REQUIRE(scores.size() == 2);
    CHECK(scores.at("DrugA\tmay_treat\tConditionB") == 0.82);
    CHECK(scores.at("EntityX\tunknownRel\tEntityY") == 0.40);
    auto report = h.gateway.ledger_report();
    CHECK(report.per_tag.count("EA_clarity") == 1);

    StageHarness partial({{"EA_relevance", "",
                           R"({"final_triplets": [{"head": "DrugA", "relation": "may_treat",
                               "tail": "ConditionB", "final_relevance": 0.89}]})"}});
    auto some = evaluate_channel(cands, "relevance", partial.env());
    CHECK(some.size() == 1);
    CHECK(partial.audit_count("field_warning") == 1);
}

TEST_CASE("evaluator channel failures leave the channel empty") {
    std::vector<CandidateTriplet> cands(1);
    cands[0].head = "A:1";
    cands[0].relation = "treats";
    cands[0].tail = "B:1";
    StageHarness h({}, std::string("nah"));
    CHECK(evaluate_channel(cands, "clarity", h.env()).empty());
    CHECK(h.audit_count("skip") == 1);
    StageHarness idle({});
    CHECK(evaluate_channel({}, "clarity", idle.env()).empty());
    CHECK(idle.calls() == 0);
}

TEST_CASE("stage outputs are byte-stable across repeated runs") {
    auto run_once = [](long& calls) {
        StageHarness h({
            {"RA", "Abstract We tested", R"({"segments": [{"text": "a", "score": 0.85}]})"},
            {"RA", "Methods The protocol", R"({"segments": [{"text": "m", "score": 0.30}]})"},
            {"SA", "", fixture("sa.json")},
            {"EEA", "", fixture("eea.json")},
            {"REA", "", fixture("rea.json")},
        });
        auto doc = doc_with(std::string(kAbstractPara) + "\n\n" + kMethodsPara);
        NgramHashProvider provider;
        EntityIndex index;
        std::string trace;
        for (const auto& seg : read_document(doc, KnowledgeGraph{}, h.env(), 0.5)) {
            auto sum = summarize(seg, h.env(), 0.2);
            trace += sum.summary + "|";
            auto ents = extract_entities(sum, Dictionary{}, index, provider, KnowledgeGraph{},
                                         h.env(), 0.35);
            for (const auto& e : ents) trace += e.canonical_id + ",";
            auto cands = extract_relations(sum, ents, KnowledgeGraph{}, h.env(), 0.5, {},
                                           seg.relevance);
            for (const auto& c : cands)
                trace += c.head + ">" + c.relation + ">" + c.tail + ";";
        }
        calls = h.calls();
        return trace;
    };
    long calls_a = 0;
    long calls_b = 0;
    auto a = run_once(calls_a);
    auto b = run_once(calls_b);
    CHECK(a == b);
    CHECK(calls_a == calls_b);
    CHECK_FALSE(a.empty());
}
