#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <set>

#include "shine/corpus.hpp"

using namespace shine;

namespace {

std::string temp_path(const std::string& name) {
    return (std::filesystem::temp_directory_path() / name).string();
}

}  // namespace

TEST_CASE("synthetic corpus: canonical spec yields verifiable QA") {
    CorpusSpec spec;  // 8 docs, lengths 20..60, 3 turns
    Corpus c = gen_synthetic_corpus(spec, 1);
    REQUIRE(c.docs.size() == 8);
    REQUIRE(c.examples.size() == 8);
    for (std::size_t i = 0; i < c.docs.size(); ++i) {
        const auto& doc = c.docs[i];
        CHECK(doc.tokens.size() >= 1);
        CHECK(static_cast<std::int64_t>(doc.tokens.size()) <= spec.max_len);
        CHECK(Tokenizer::decode(doc.tokens) == doc.raw);  // round-trip
        const auto& ex = c.examples[i];
        CHECK(ex.turns.size() == 3);
        for (const auto& t : ex.turns) {
            CHECK(!t.answer.empty());
            CHECK(doc.raw.find(t.answer) != std::string::npos);  // verbatim answer
        }
    }
}

TEST_CASE("synthetic corpus: determinism and seed sensitivity") {
    CorpusSpec spec;
    Corpus a = gen_synthetic_corpus(spec, 1);
    Corpus b = gen_synthetic_corpus(spec, 1);
    REQUIRE(a.docs.size() == b.docs.size());
    for (std::size_t i = 0; i < a.docs.size(); ++i) CHECK(a.docs[i].raw == b.docs[i].raw);

    Corpus c2 = gen_synthetic_corpus(spec, 2);
    bool any_diff = false;
    for (std::size_t i = 0; i < a.docs.size() && i < c2.docs.size(); ++i)
        any_diff = any_diff || (a.docs[i].raw != c2.docs[i].raw);
    CHECK(any_diff);

    CorpusSpec bad;
    bad.num_docs = 0;
    CHECK_THROWS(gen_synthetic_corpus(bad, 1));
}

TEST_CASE("truncate_for_completion bounds and determinism") {
    std::vector<TokenId> tokens(100, 7);
    Rng rng(3);
    for (int i = 0; i < 200; ++i) {
        Truncation t = truncate_for_completion(tokens, rng);
        CHECK(t.applied);
        CHECK(t.removed >= 10);
        CHECK(t.removed <= 30);
        CHECK(t.partial.size() >= 70);
        CHECK(t.partial.size() <= 90);
        // strict prefix
        CHECK(t.partial.size() < tokens.size());
        CHECK(std::equal(t.partial.begin(), t.partial.end(), tokens.begin()));
    }

    Rng r1(9), r2(9);
    CHECK(truncate_for_completion(tokens, r1).removed == truncate_for_completion(tokens, r2).removed);

    std::vector<TokenId> tiny(9, 1);
    Rng r3(0);
    Truncation t = truncate_for_completion(tiny, r3);
    CHECK(!t.applied);
    CHECK(t.partial.size() == 9);
}

TEST_CASE("truncation k is uniform over [0.1N, 0.3N] (chi-square)") {
    std::vector<TokenId> tokens(100, 7);
    Rng rng(12345);
    std::vector<int> hist(21, 0);  // k in 10..30
    const int draws = 10000;
    for (int i = 0; i < draws; ++i) {
        Truncation t = truncate_for_completion(tokens, rng);
        REQUIRE(t.removed >= 10);
        REQUIRE(t.removed <= 30);
        hist[static_cast<std::size_t>(t.removed - 10)]++;
    }
    const double expected = static_cast<double>(draws) / 21.0;
    double chi2 = 0.0;
    for (int h : hist) chi2 += (h - expected) * (h - expected) / expected;
    // chi-square critical value at p=0.01, df=20
    CHECK(chi2 < 37.566);
}

TEST_CASE("pack_contexts: arithmetic and splitting") {
    auto mkdoc = [](int n) {
        ContextDoc d;
        d.raw = std::string(static_cast<std::size_t>(n), 'x');
        d.tokens = Tokenizer::encode(d.raw);
        return d;
    };

    SUBCASE("three short docs fit one item") {
        std::vector<ContextDoc> docs{mkdoc(3), mkdoc(4), mkdoc(5)};
        Rng rng(1);
        PackResult r = pack_contexts(docs, 20, rng, 0.5);
        REQUIRE(r.items.size() == 1);
        CHECK(r.items[0].total_len == 14);  // 3+4+5 + 2 separators
        CHECK(r.items[0].segments.size() == 3);
        // all below the completion threshold: forced reconstruction
        for (const auto& s : r.items[0].segments) CHECK(s.task == Task::recon);
        const auto toks = packed_input_tokens(r.items[0], docs);
        CHECK(toks.size() == 14);
        int eots = 0;
        for (TokenId t : toks) eots += (t == Tokenizer::kEot);
        CHECK(eots == 2);
    }

    SUBCASE("overflow starts a new item") {
        std::vector<ContextDoc> docs{mkdoc(15), mkdoc(10)};
        Rng rng(1);
        // 15 + 1 + 10 > 20; lambda = 1 keeps full reconstruction lengths
        PackResult r = pack_contexts(docs, 20, rng, 1.0);
        CHECK(r.items.size() == 2);
        CHECK(r.items[0].total_len == 15);
        CHECK(r.items[1].total_len == 10);
    }

    SUBCASE("oversize doc truncated with a warning") {
        std::vector<ContextDoc> docs{mkdoc(30)};
        Rng rng(1);
        PackResult r = pack_contexts(docs, 20, rng, 1.0);
        REQUIRE(r.items.size() == 1);
        CHECK(r.items[0].total_len == 20);
        REQUIRE(r.warnings.size() == 1);
        CHECK(r.warnings[0].original_len == 30);
        CHECK(r.warnings[0].truncated_to == 20);
    }

    SUBCASE("order is a permutation of all segments") {
        std::vector<ContextDoc> docs{mkdoc(3), mkdoc(4), mkdoc(5), mkdoc(2)};
        Rng rng(7);
        PackResult r = pack_contexts(docs, 40, rng, 0.5);
        for (const auto& item : r.items) {
            std::set<std::size_t> seen(item.order.begin(), item.order.end());
            CHECK(seen.size() == item.segments.size());
            for (std::size_t o : item.order) CHECK(o < item.segments.size());
        }
    }
}

TEST_CASE("pack_contexts: invariants over random corpora") {
    CorpusSpec spec;
    spec.num_docs = 40;
    Corpus c = gen_synthetic_corpus(spec, 5);
    Rng rng(6);
    PackResult r = pack_contexts(c.docs, 96, rng, 0.5);
    std::size_t seg_total = 0;
    for (const auto& item : r.items) {
        CHECK(item.total_len <= 96);
        std::int64_t want = static_cast<std::int64_t>(item.segments.size()) - 1;
        std::int64_t got = item.total_len;
        for (const auto& s : item.segments) got -= s.input_len;
        CHECK(got == want);  // separators = segments - 1
        seg_total += item.segments.size();
        for (const auto& s : item.segments) {
            if (s.task == Task::comp) {
                // (N-k)/N in [0.7, 0.9]
                CHECK(10 * s.input_len >= 7 * s.full_len);
                CHECK(10 * s.input_len <= 9 * s.full_len);
                CHECK(s.input_len < s.full_len);
            } else {
                CHECK(s.input_len == s.full_len);
            }
        }
    }
    CHECK(seg_total == c.docs.size());

    // determinism given (docs order, seed)
    Rng ra(6);
    PackResult r2 = pack_contexts(c.docs, 96, ra, 0.5);
    REQUIRE(r2.items.size() == r.items.size());
    for (std::size_t i = 0; i < r.items.size(); ++i) {
        CHECK(r2.items[i].order == r.items[i].order);
        CHECK(r2.items[i].total_len == r.items[i].total_len);
    }
}

TEST_CASE("task assignment frequency matches lambda") {
    // all docs long enough to be truncation-eligible
    std::vector<ContextDoc> docs;
    for (int i = 0; i < 8; ++i) {
        ContextDoc d;
        d.raw = std::string(40, static_cast<char>('a' + i));
        d.tokens = Tokenizer::encode(d.raw);
        docs.push_back(d);
    }
    Rng rng(99);
    std::int64_t recon = 0, total = 0;
    for (int rep = 0; rep < 1000; ++rep) {
        PackResult r = pack_contexts(docs, 200, rng, 0.5);
        for (const auto& item : r.items)
            for (const auto& s : item.segments) {
                recon += (s.task == Task::recon);
                ++total;
            }
    }
    const double frac = static_cast<double>(recon) / static_cast<double>(total);
    CHECK(frac >= 0.45);
    CHECK(frac <= 0.55);

    // lambda = 1 reconstructs everything
    Rng r1(3);
    PackResult all_recon = pack_contexts(docs, 200, r1, 1.0);
    for (const auto& item : all_recon.items)
        for (const auto& s : item.segments) CHECK(s.task == Task::recon);
}

TEST_CASE("dataset round trip and validation") {
    const std::string path = temp_path("shine_test_dataset.jsonl");

    SUBCASE("save then load") {
        Corpus c = gen_synthetic_corpus(CorpusSpec{}, 4);
        save_dataset(path, c.examples);
        Dataset ds = load_dataset(path);
        REQUIRE(ds.examples.size() == c.examples.size());
        for (std::size_t i = 0; i < ds.examples.size(); ++i) {
            CHECK(ds.examples[i].context.raw == c.examples[i].context.raw);
            CHECK(ds.examples[i].turns.size() == c.examples[i].turns.size());
        }
        CHECK(ds.diagnostics.empty());
    }

    SUBCASE("one valid line") {
        std::ofstream f(path);
        f << R"({"context": "kalo is vopa.", "qa": [{"q": "what is kalo?", "a": "vopa"}]})" << "\n";
        f.close();
        Dataset ds = load_dataset(path);
        REQUIRE(ds.examples.size() == 1);
        CHECK(ds.examples[0].turns[0].answer == "vopa");
    }

    SUBCASE("missing qa field names line 1") {
        std::ofstream f(path);
        f << R"({"context": "kalo is vopa."})" << "\n";
        f.close();
        bool threw = false;
        try {
            load_dataset(path);
        } catch (const std::exception& e) {
            threw = true;
            CHECK(std::string(e.what()).find("line 1") != std::string::npos);
            CHECK(std::string(e.what()).find("qa") != std::string::npos);
        }
        CHECK(threw);
    }

    SUBCASE("lenient mode keeps valid lines and reports the bad one") {
        std::ofstream f(path);
        f << R"({"context": "a is b.", "qa": []})" << "\n";
        f << R"({"context": "c is d.", "qa": [{"q": "what is c?", "a": "d"}]})" << "\n";
        f << R"({"context": "e is f.", "qa": [{"q": "what is e?", "a": "f"}]})" << "\n";
        f << R"({"qa": []})" << "\n";  // missing context
        f.close();
        Dataset ds = load_dataset(path, /*lenient=*/true);
        CHECK(ds.docs.size() == 3);
        CHECK(ds.examples.size() == 2);
        REQUIRE(ds.diagnostics.size() == 1);
        CHECK(ds.diagnostics[0].line == 4);
        CHECK(ds.diagnostics[0].message.find("context") != std::string::npos);
    }

    std::remove(path.c_str());
}

TEST_CASE("reserved ids never produced by encoding plain text") {
    Rng rng(8);
    for (int rep = 0; rep < 1000; ++rep) {
        std::string s;
        const std::int64_t n = rng.range(0, 40);
        for (std::int64_t i = 0; i < n; ++i) s.push_back(static_cast<char>(rng.below(256)));
        auto ids = Tokenizer::encode(s);
        for (TokenId id : ids) CHECK(!Tokenizer::is_reserved(id));
        CHECK(Tokenizer::decode(ids) == s);  // byte round-trip
    }
    CHECK(Tokenizer::encode("").empty());
}
