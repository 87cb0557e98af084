#pragma once

// Dataset schemas, synthetic key-value corpus generation, completion
// truncation and greedy context packing. Everything here is a pure function
// of its inputs plus an explicit Rng, so corpora and packings replay exactly
// from a seed.

#include <fstream>
#include <optional>
#include <sstream>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "shine/rng.hpp"
#include "shine/tokenizer.hpp"

namespace shine {

struct ContextDoc {
    std::string id;
    std::string raw;
    std::vector<TokenId> tokens;  // encode(raw)
};

struct QATurn {
    std::string question;
    std::string answer;
};

struct QAExample {
    ContextDoc context;
    std::vector<QATurn> turns;
};

enum class Task { recon, comp };

struct CorpusSpec {
    std::int64_t num_docs = 8;
    std::string vocab_profile = "words";  // syllable words; "bytes" draws raw lowercase letters
    std::int64_t min_len = 20;            // token (= byte) lengths
    std::int64_t max_len = 60;
    std::int64_t qa_turns = 3;
};

struct Corpus {
    std::vector<ContextDoc> docs;
    std::vector<QAExample> examples;
};

namespace detail {

inline std::string make_word(Rng& rng, const char* const* syllables, std::size_t n_syll,
                             std::int64_t min_parts, std::int64_t max_parts) {
    const std::int64_t parts = rng.range(min_parts, max_parts);
    std::string w;
    for (std::int64_t i = 0; i < parts; ++i) w += syllables[rng.below(n_syll)];
    return w;
}

}  // namespace detail

// Key-value fact corpus. Keys are drawn from a pool shared by all documents
// (so a question is ambiguous without its context), values are drawn per
// document, and every answer is a verbatim substring of the context.
inline Corpus gen_synthetic_corpus(const CorpusSpec& spec, std::uint64_t seed) {
    if (spec.num_docs <= 0 || spec.min_len <= 0 || spec.max_len < spec.min_len)
        throw std::invalid_argument("gen_synthetic_corpus: empty or inverted spec");
    if (spec.max_len < 12)
        throw std::invalid_argument("gen_synthetic_corpus: max_len too small for one fact");
    if (spec.vocab_profile != "words" && spec.vocab_profile != "bytes")
        throw std::invalid_argument("gen_synthetic_corpus: unknown vocab profile " + spec.vocab_profile);

    static const char* kKeySyll[] = {"ka", "lo", "mi", "ra", "be", "tu", "so", "ne"};
    static const char* kValSyll[] = {"zu", "pi", "vo", "da", "ge", "ru", "ya", "fo"};

    Rng rng(seed ^ 0x5348494E45ull);  // corpus stream

    // shared key pool
    std::vector<std::string> keys;
    for (const char* a : kKeySyll)
        for (const char* b : kKeySyll) keys.push_back(std::string(a) + b);

    Corpus out;
    for (std::int64_t d = 0; d < spec.num_docs; ++d) {
        const std::int64_t target = rng.range(spec.min_len, spec.max_len);
        std::vector<std::size_t> key_order = rng.permutation(keys.size());

        std::string text;
        std::vector<std::pair<std::string, std::string>> facts;
        while (facts.size() < key_order.size()) {
            const std::string& key = keys[key_order[facts.size()]];
            std::string val;
            if (spec.vocab_profile == "words") {
                val = detail::make_word(rng, kValSyll, 8, 1, 2);
            } else {
                const std::int64_t n = rng.range(2, 4);
                for (std::int64_t i = 0; i < n; ++i) val += static_cast<char>('a' + rng.below(26));
            }
            const std::string fact = key + " is " + val + ".";
            const std::int64_t flen = static_cast<std::int64_t>(fact.size()) + (text.empty() ? 0 : 1);
            const std::int64_t len = static_cast<std::int64_t>(text.size());
            if (len + flen > spec.max_len) break;
            if (static_cast<std::int64_t>(facts.size()) >= std::max<std::int64_t>(3, spec.qa_turns) && len >= target) break;
            if (!text.empty()) text += " ";
            text += fact;
            facts.emplace_back(key, val);
        }
        if (facts.empty()) throw std::logic_error("gen_synthetic_corpus: no fact fits max_len");

        ContextDoc doc;
        doc.id = "doc" + std::to_string(d);
        doc.raw = text;
        doc.tokens = Tokenizer::encode(text);
        out.docs.push_back(doc);

        QAExample ex;
        ex.context = doc;
        std::vector<std::size_t> fact_order = rng.permutation(facts.size());
        const std::int64_t turns = std::min<std::int64_t>(spec.qa_turns, static_cast<std::int64_t>(facts.size()));
        for (std::int64_t q = 0; q < turns; ++q) {
            const auto& [key, val] = facts[fact_order[static_cast<std::size_t>(q)]];
            ex.turns.push_back(QATurn{"what is " + key + "?", val});
        }
        out.examples.push_back(std::move(ex));
    }
    return out;
}

// ---------------------------------------------------------------------------
// completion truncation
// ---------------------------------------------------------------------------

struct Truncation {
    std::vector<TokenId> partial;
    std::int64_t removed = 0;  // k
    bool applied = false;      // false when N < 10 (falls back to reconstruction)
};

// Removes the last k tokens, k uniform in [ceil(0.1 N), floor(0.3 N)].
inline Truncation truncate_for_completion(const std::vector<TokenId>& tokens, Rng& rng) {
    const std::int64_t n = static_cast<std::int64_t>(tokens.size());
    Truncation t;
    if (n < 10) {
        t.partial = tokens;
        return t;
    }
    const std::int64_t kmin = (n + 9) / 10;       // ceil(0.1 N)
    const std::int64_t kmax = (3 * n) / 10;       // floor(0.3 N)
    t.removed = rng.range(kmin, kmax);
    t.partial.assign(tokens.begin(), tokens.end() - t.removed);
    t.applied = true;
    return t;
}

// ---------------------------------------------------------------------------
// context packing
// ---------------------------------------------------------------------------

struct PackedSegment {
    std::size_t doc = 0;          // index into the docs list passed to pack_contexts
    Task task = Task::recon;
    std::int64_t input_len = 0;   // tokens fed to the hypernetwork (truncated for comp)
    std::int64_t full_len = 0;    // supervision target length
};

struct PackedItem {
    std::vector<PackedSegment> segments;
    std::vector<std::size_t> order;  // supervision-side permutation of segment indices
    std::int64_t total_len = 0;      // packed input tokens incl. separators
};

struct OversizeWarning {
    std::size_t doc = 0;
    std::int64_t original_len = 0;
    std::int64_t truncated_to = 0;
};

struct PackResult {
    std::vector<PackedItem> items;
    std::vector<OversizeWarning> warnings;
};

// Greedy packing in input order: A <EOT> B <EOT> C. Each segment is
// independently assigned reconstruction with probability lambda, else
// completion (truncated); documents shorter than 10 tokens always
// reconstruct. Only the supervision order is permuted.
inline PackResult pack_contexts(const std::vector<ContextDoc>& docs, std::int64_t max_len,
                                Rng& rng, double lambda = 0.5) {
    if (max_len < 1) throw std::invalid_argument("pack_contexts: max_len must be positive");
    PackResult res;
    PackedItem cur;

    auto flush = [&]() {
        if (cur.segments.empty()) return;
        cur.order = rng.permutation(cur.segments.size());
        res.items.push_back(std::move(cur));
        cur = PackedItem{};
    };

    for (std::size_t di = 0; di < docs.size(); ++di) {
        std::int64_t len = static_cast<std::int64_t>(docs[di].tokens.size());
        if (len > max_len) {
            res.warnings.push_back(OversizeWarning{di, len, max_len});
            len = max_len;
        }
        PackedSegment seg;
        seg.doc = di;
        seg.full_len = len;
        if (len >= 10 && !rng.bernoulli(lambda)) {
            seg.task = Task::comp;
            const std::int64_t kmin = (len + 9) / 10;
            const std::int64_t kmax = (3 * len) / 10;
            seg.input_len = len - rng.range(kmin, kmax);
        } else {
            seg.task = Task::recon;
            seg.input_len = len;
        }
        const std::int64_t sep = cur.segments.empty() ? 0 : 1;
        if (!cur.segments.empty() && cur.total_len + sep + seg.input_len > max_len) flush();
        cur.total_len += (cur.segments.empty() ? 0 : 1) + seg.input_len;
        cur.segments.push_back(seg);
    }
    flush();
    return res;
}

// Materializes the packed input token sequence (truncated segments joined by
// a single EOT separator).
inline std::vector<TokenId> packed_input_tokens(const PackedItem& item, const std::vector<ContextDoc>& docs) {
    std::vector<TokenId> out;
    out.reserve(static_cast<std::size_t>(item.total_len));
    for (std::size_t s = 0; s < item.segments.size(); ++s) {
        if (s) out.push_back(Tokenizer::kEot);
        const PackedSegment& seg = item.segments[s];
        const auto& toks = docs[seg.doc].tokens;
        out.insert(out.end(), toks.begin(), toks.begin() + seg.input_len);
    }
    return out;
}

// ---------------------------------------------------------------------------
// dataset files (one JSON record per line: {"id", "context", "qa":[{"q","a"}]})
// ---------------------------------------------------------------------------

struct DatasetDiagnostic {
    std::int64_t line = 0;
    std::string message;
};

struct Dataset {
    std::vector<ContextDoc> docs;        // every record
    std::vector<QAExample> examples;     // records with at least one QA turn
    std::vector<DatasetDiagnostic> diagnostics;
};

inline Dataset load_dataset(const std::string& path, bool lenient = false) {
    std::ifstream in(path);
    if (!in) throw std::runtime_error("load_dataset: cannot open " + path);
    Dataset ds;
    std::string line;
    std::int64_t lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        if (line.empty()) continue;
        auto fail = [&](const std::string& msg) {
            const std::string full = "line " + std::to_string(lineno) + ": " + msg;
            if (!lenient) throw std::runtime_error("load_dataset: " + full + " in " + path);
            ds.diagnostics.push_back(DatasetDiagnostic{lineno, full});
        };
        nlohmann::json j = nlohmann::json::parse(line, nullptr, false);
        if (j.is_discarded()) { fail("invalid JSON"); continue; }
        if (!j.contains("context") || !j["context"].is_string()) { fail("missing field \"context\""); continue; }
        if (!j.contains("qa") || !j["qa"].is_array()) { fail("missing field \"qa\""); continue; }
        ContextDoc doc;
        doc.id = j.value("id", "line" + std::to_string(lineno));
        doc.raw = j["context"].get<std::string>();
        if (doc.raw.empty()) { fail("empty \"context\""); continue; }
        doc.tokens = Tokenizer::encode(doc.raw);

        std::vector<QATurn> turns;
        bool bad = false;
        for (const auto& qa : j["qa"]) {
            if (!qa.contains("q") || !qa.contains("a") || !qa["q"].is_string() || !qa["a"].is_string()) {
                fail("malformed qa entry (need string fields \"q\" and \"a\")");
                bad = true;
                break;
            }
            if (qa["a"].get<std::string>().empty()) {
                fail("empty answer in qa entry");
                bad = true;
                break;
            }
            turns.push_back(QATurn{qa["q"].get<std::string>(), qa["a"].get<std::string>()});
        }
        if (bad) continue;
        ds.docs.push_back(doc);
        if (!turns.empty()) ds.examples.push_back(QAExample{std::move(doc), std::move(turns)});
    }
    return ds;
}

inline void save_dataset(const std::string& path, const std::vector<QAExample>& examples) {
    std::ofstream out(path);
    if (!out) throw std::runtime_error("save_dataset: cannot open " + path);
    for (const auto& ex : examples) {
        nlohmann::json j;
        j["id"] = ex.context.id;
        j["context"] = ex.context.raw;
        j["qa"] = nlohmann::json::array();
        for (const auto& t : ex.turns) j["qa"].push_back({{"q", t.question}, {"a", t.answer}});
        out << j.dump() << "\n";
    }
}

}  // namespace shine
