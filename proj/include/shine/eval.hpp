#pragma once

// Metrics (token F1, perplexity), the hidden-context multi-turn conversation
// protocol, and the SFT per-context baseline. For SHINE, SFT and Naive the
// original context never enters the generation-time input; access to it is
// mediated by adapter weights alone. Every row records whether the context
// token sequence appeared in the input, so that invariant is assertable.

#include <algorithm>
#include <cctype>
#include <cmath>
#include <map>
#include <set>
#include <string>
#include <vector>

#include "shine/adapters.hpp"
#include "shine/backbone.hpp"
#include "shine/corpus.hpp"
#include "shine/hypernet.hpp"
#include "shine/training.hpp"

namespace shine {

// ---------------------------------------------------------------------------
// token F1 with SQuAD-style answer normalization
// ---------------------------------------------------------------------------

// lowercase, strip punctuation, drop the articles a/an/the, split on
// whitespace.
inline std::vector<std::string> normalize_answer(const std::string& text) {
    std::string cleaned;
    cleaned.reserve(text.size());
    for (unsigned char c : text) {
        if (std::ispunct(c)) continue;
        cleaned.push_back(static_cast<char>(std::tolower(c)));
    }
    std::vector<std::string> toks;
    std::string cur;
    auto flush = [&]() {
        if (!cur.empty() && cur != "a" && cur != "an" && cur != "the") toks.push_back(cur);
        cur.clear();
    };
    for (char c : cleaned) {
        if (std::isspace(static_cast<unsigned char>(c))) flush();
        else cur.push_back(c);
    }
    flush();
    return toks;
}

inline double token_f1(const std::string& prediction, const std::string& gold) {
    const auto p = normalize_answer(prediction);
    const auto g = normalize_answer(gold);
    if (p.empty() && g.empty()) return 1.0;
    if (p.empty() || g.empty()) return 0.0;
    std::map<std::string, int> counts;
    for (const auto& t : g) counts[t]++;
    int common = 0;
    for (const auto& t : p) {
        auto it = counts.find(t);
        if (it != counts.end() && it->second > 0) {
            --it->second;
            ++common;
        }
    }
    if (common == 0) return 0.0;
    const double prec = static_cast<double>(common) / static_cast<double>(p.size());
    const double rec = static_cast<double>(common) / static_cast<double>(g.size());
    return 2.0 * prec * rec / (prec + rec);
}

// ---------------------------------------------------------------------------
// perplexity
// ---------------------------------------------------------------------------

// exp(mean cross-entropy) of `target` given `prompt`.
inline double perplexity(const BackboneModel& model, const AdapterSet* adapters,
                         const std::vector<TokenId>& prompt, const std::vector<TokenId>& target) {
    if (prompt.empty()) throw std::invalid_argument("perplexity: empty prompt");
    if (target.empty()) throw std::invalid_argument("perplexity: empty target");
    std::vector<TokenId> seq = prompt;
    seq.insert(seq.end(), target.begin(), target.end());
    const LmOutput out = forward_lm(model, seq, adapters, false);
    const std::int64_t p0 = static_cast<std::int64_t>(prompt.size()) - 1;
    double total = 0.0;
    for (std::size_t j = 0; j < target.size(); ++j) {
        const std::int64_t p = p0 + static_cast<std::int64_t>(j);
        const std::int64_t vsz = out.logits.dims[1];
        double mx = out.logits.at(p, 0);
        for (std::int64_t k = 1; k < vsz; ++k) mx = std::max(mx, out.logits.at(p, k));
        double denom = 0.0;
        for (std::int64_t k = 0; k < vsz; ++k) denom += std::exp(out.logits.at(p, k) - mx);
        total += mx + std::log(denom) - out.logits.at(p, target[j]);
    }
    return std::exp(total / static_cast<double>(target.size()));
}

// ---------------------------------------------------------------------------
// conversation protocol
// ---------------------------------------------------------------------------

enum class EvalMethod { naive, in_context, sft, shine };

inline EvalMethod eval_method_from_string(const std::string& s) {
    if (s == "naive") return EvalMethod::naive;
    if (s == "in_context" || s == "in-context") return EvalMethod::in_context;
    if (s == "sft") return EvalMethod::sft;
    if (s == "shine") return EvalMethod::shine;
    throw std::invalid_argument("unknown eval method: " + s);
}

inline const char* eval_method_name(EvalMethod m) {
    switch (m) {
        case EvalMethod::naive: return "naive";
        case EvalMethod::in_context: return "in_context";
        case EvalMethod::sft: return "sft";
        case EvalMethod::shine: return "shine";
    }
    return "?";
}

struct EvalRow {
    std::string example_id;
    EvalMethod method = EvalMethod::naive;
    int turn = 0;
    std::string prediction;
    std::string gold;
    double f1 = 0.0;
    bool saw_context = false;  // context token sequence appeared in the generation input
};

inline bool contains_subsequence(const std::vector<TokenId>& haystack, const std::vector<TokenId>& needle) {
    if (needle.empty()) return true;
    return std::search(haystack.begin(), haystack.end(), needle.begin(), needle.end()) != haystack.end();
}

// Turns are answered in order; the history carries previously *generated*
// answers, not gold ones. Only the in-context method sees the raw context.
inline std::vector<EvalRow> run_conversation(const BackboneModel& model, EvalMethod method,
                                             const QAExample& ex, const AdapterSet* adapters,
                                             std::int64_t max_new = 32) {
    const bool wants_adapters = (method == EvalMethod::shine || method == EvalMethod::sft);
    if (wants_adapters && !adapters)
        throw std::invalid_argument(std::string("run_conversation: method ") + eval_method_name(method) +
                                    " requires an adapter set");
    if (!wants_adapters && adapters)
        throw std::invalid_argument(std::string("run_conversation: method ") + eval_method_name(method) +
                                    " must not receive adapters");
    if (method == EvalMethod::shine && adapters->role != AdapterRole::generated)
        throw std::invalid_argument("run_conversation: shine expects generated adapters");

    std::vector<TokenId> input;
    if (method == EvalMethod::in_context) {
        input = ex.context.tokens;
        input.push_back(Tokenizer::kEot);
    }

    const std::set<TokenId> stops{Tokenizer::kEot, Tokenizer::kUser, Tokenizer::kAssistant};
    std::vector<EvalRow> rows;
    for (std::size_t t = 0; t < ex.turns.size(); ++t) {
        input.push_back(Tokenizer::kUser);
        const auto q = Tokenizer::encode(ex.turns[t].question);
        input.insert(input.end(), q.begin(), q.end());
        input.push_back(Tokenizer::kAssistant);

        const auto answer_ids = generate(model, input, adapters, max_new, stops);

        EvalRow row;
        row.example_id = ex.context.id;
        row.method = method;
        row.turn = static_cast<int>(t);
        row.prediction = Tokenizer::decode(answer_ids);
        row.gold = ex.turns[t].answer;
        row.f1 = token_f1(row.prediction, row.gold);
        row.saw_context = contains_subsequence(input, ex.context.tokens);
        rows.push_back(row);

        input.insert(input.end(), answer_ids.begin(), answer_ids.end());
        input.push_back(Tokenizer::kEot);
    }
    return rows;
}

// ---------------------------------------------------------------------------
// SFT baseline: per-context LoRA fine-tuned on the first turns_used QA turns
// ---------------------------------------------------------------------------

struct SftBaselineConfig {
    std::int64_t rank = 8;        // callers pass r_gen to match the generated rank
    std::int64_t epochs = 10;
    std::int64_t turns_used = 5;
    double lr = 5e-3;
    std::uint64_t seed = 0;
};

inline AdapterSet sft_baseline(const BackboneModel& model, const QAExample& ex, const SftBaselineConfig& cfg) {
    if (static_cast<std::int64_t>(ex.turns.size()) < cfg.turns_used)
        throw std::invalid_argument("sft_baseline: example has " + std::to_string(ex.turns.size()) +
                                    " turns, need " + std::to_string(cfg.turns_used));
    Rng rng(cfg.seed ^ 0x5F7Aull);
    AdapterSet set;
    set.rank = cfg.rank;
    set.role = AdapterRole::generated;  // behaves like any applied LoRA
    for (std::int64_t l = 0; l < model.cfg.layers; ++l)
        for (const auto& t : layer_targets(model.cfg)) {
            LoRAPair p;
            p.a = Tensor::randn({t.in_dim, cfg.rank}, rng, 0.02);
            p.b = Tensor::zeros({cfg.rank, t.out_dim});
            p.scale = 1.0;
            set.pairs.emplace(AdapterKey{l, t.name}, std::move(p));
        }
    if (cfg.epochs == 0) return set;  // zero-update adapter: behaves as naive

    AdamW opt(0.9, 0.999, 1e-8, 0.0);
    for (std::int64_t e = 0; e < cfg.epochs; ++e) {
        for (std::int64_t t = 0; t < cfg.turns_used; ++t) {
            Tape tape;
            BackboneGraph bg(tape, model, /*trainable=*/false);
            AdapterNodes nodes;
            nodes.scale = 1.0;
            std::map<AdapterKey, std::pair<V, V>> leaves;
            for (const auto& [key, p] : set.pairs) {
                V a = tape.leaf(p.a, true);
                V b = tape.leaf(p.b, true);
                nodes.ab.emplace(key, std::make_pair(a, b));
                leaves.emplace(key, std::make_pair(a, b));
            }
            SupervisedSeq seq;
            seq.append_turn(Tokenizer::encode(ex.turns[t].question), Tokenizer::encode(ex.turns[t].answer), true);
            V loss = build_sequence_loss(tape, bg, &nodes, seq);
            tape.backward(loss);

            std::map<std::string, Tensor> params, grads;
            for (auto& [key, p] : set.pairs) {
                const std::string base = std::to_string(key.first) + "." + key.second;
                params[base + ".a"] = p.a;
                params[base + ".b"] = p.b;
                grads[base + ".a"] = tape.grad_of(leaves.at(key).first);
                grads[base + ".b"] = tape.grad_of(leaves.at(key).second);
            }
            clip_global_norm(grads, 1.0);
            opt.step(params, grads, cfg.lr);
            for (auto& [key, p] : set.pairs) {
                const std::string base = std::to_string(key.first) + "." + key.second;
                p.a = params.at(base + ".a");
                p.b = params.at(base + ".b");
            }
        }
    }
    return set;
}

// ---------------------------------------------------------------------------
// aggregation
// ---------------------------------------------------------------------------

struct MethodAggregate {
    EvalMethod method = EvalMethod::naive;
    std::vector<double> turn_mean_f1;
    double mean_f1 = 0.0;
    std::int64_t rows = 0;
};

inline std::vector<MethodAggregate> aggregate_results(const std::vector<EvalRow>& rows) {
    std::map<EvalMethod, MethodAggregate> by;
    std::map<EvalMethod, std::vector<std::pair<double, std::int64_t>>> turn_acc;
    for (const auto& r : rows) {
        auto& agg = by[r.method];
        agg.method = r.method;
        agg.mean_f1 += r.f1;
        agg.rows += 1;
        auto& ta = turn_acc[r.method];
        if (static_cast<std::size_t>(r.turn) >= ta.size()) ta.resize(static_cast<std::size_t>(r.turn) + 1, {0.0, 0});
        ta[static_cast<std::size_t>(r.turn)].first += r.f1;
        ta[static_cast<std::size_t>(r.turn)].second += 1;
    }
    std::vector<MethodAggregate> out;
    for (auto& [m, agg] : by) {
        agg.mean_f1 /= static_cast<double>(agg.rows);
        for (const auto& [sum, n] : turn_acc[m]) agg.turn_mean_f1.push_back(n ? sum / static_cast<double>(n) : 0.0);
        out.push_back(agg);
    }
    return out;
}

// ---------------------------------------------------------------------------
// reconstruction probe (pretraining-quality check)
// ---------------------------------------------------------------------------

struct ReconProbe {
    bool exact_match = false;
    double ppl = 0.0;
};

// Generates adapters from the context, then asks the adapted model to
// reproduce the context from the <recon> command alone.
inline ReconProbe probe_reconstruction(const BackboneModel& model, const Hypernet& hn,
                                       const std::vector<TokenId>& ctx) {
    const AdapterSet ad = generate_lora(model, hn, ctx);
    const std::vector<TokenId> prompt{Tokenizer::kUser, Tokenizer::kRecon, Tokenizer::kAssistant};
    const auto gen = generate(model, prompt, &ad, static_cast<std::int64_t>(ctx.size()) + 8,
                              {Tokenizer::kEot, Tokenizer::kUser});
    ReconProbe probe;
    probe.exact_match = (gen == ctx);
    probe.ppl = perplexity(model, &ad, prompt, ctx);
    return probe;
}

}  // namespace shine
