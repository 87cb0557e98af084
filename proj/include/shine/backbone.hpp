#pragma once

// Toy decoder-only causal LM with the architecture the cost model assumes:
// grouped-query attention (KV width H/4), SwiGLU MLP (inner 3H), RMSNorm
// pre-layernorm, rotary positions continuing through any appended rows.
// One graph builder serves training and inference; inference simply never
// calls backward.

#include <algorithm>
#include <cstdint>
#include <map>
#include <set>
#include <stdexcept>
#include <string>
#include <vector>

#include "shine/adapters.hpp"
#include "shine/autodiff.hpp"
#include "shine/checkpoint.hpp"
#include "shine/config.hpp"
#include "shine/tokenizer.hpp"

namespace shine {

struct BackboneModel {
    BackboneConfig cfg;
    std::map<std::string, Tensor> params;

    static BackboneModel init(const BackboneConfig& cfg, Rng& rng, double init_std = 0.02) {
        cfg.validate();
        BackboneModel m;
        m.cfg = cfg;
        const std::int64_t h = cfg.hidden;
        // residual-branch outputs scaled down with depth
        const double resid_std = init_std / std::sqrt(2.0 * static_cast<double>(cfg.layers));
        m.params["tok_emb"] = Tensor::randn({cfg.vocab, h}, rng, init_std);
        m.params["lm_head"] = Tensor::randn({h, cfg.vocab}, rng, init_std);
        m.params["final_norm"] = Tensor::full({h}, 1.0);
        for (std::int64_t l = 0; l < cfg.layers; ++l) {
            const std::string p = "layers." + std::to_string(l) + ".";
            m.params[p + "attn_norm"] = Tensor::full({h}, 1.0);
            m.params[p + "mlp_norm"] = Tensor::full({h}, 1.0);
            m.params[p + "wq"] = Tensor::randn({h, h}, rng, init_std);
            m.params[p + "wk"] = Tensor::randn({h, cfg.kv_width()}, rng, init_std);
            m.params[p + "wv"] = Tensor::randn({h, cfg.kv_width()}, rng, init_std);
            m.params[p + "wo"] = Tensor::randn({h, h}, rng, resid_std);
            m.params[p + "wgate"] = Tensor::randn({h, cfg.mlp_inner()}, rng, init_std);
            m.params[p + "wup"] = Tensor::randn({h, cfg.mlp_inner()}, rng, init_std);
            m.params[p + "wdown"] = Tensor::randn({cfg.mlp_inner(), h}, rng, resid_std);
        }
        return m;
    }

    void save(const std::string& dir) const {
        ckpt::Store store;
        store.tensors = params;
        store.scalars["cfg.layers"] = {static_cast<std::uint64_t>(cfg.layers)};
        store.scalars["cfg.hidden"] = {static_cast<std::uint64_t>(cfg.hidden)};
        store.scalars["cfg.heads"] = {static_cast<std::uint64_t>(cfg.heads)};
        store.scalars["cfg.vocab"] = {static_cast<std::uint64_t>(cfg.vocab)};
        store.scalars["cfg.max_pos"] = {static_cast<std::uint64_t>(cfg.max_pos)};
        ckpt::save(dir, store);
    }

    static BackboneModel load(const std::string& dir) {
        const ckpt::Store store = ckpt::load(dir);
        BackboneModel m;
        m.cfg.layers = static_cast<std::int64_t>(store.scalar("cfg.layers"));
        m.cfg.hidden = static_cast<std::int64_t>(store.scalar("cfg.hidden"));
        m.cfg.heads = static_cast<std::int64_t>(store.scalar("cfg.heads"));
        m.cfg.vocab = static_cast<std::int64_t>(store.scalar("cfg.vocab"));
        m.cfg.max_pos = static_cast<std::int64_t>(store.scalar("cfg.max_pos"));
        m.cfg.validate();
        m.params = store.tensors;
        return m;
    }
};

// Adapter matrices as graph nodes; generated adapters arrive here straight
// from the M2P output so gradients reach the hypernetwork.
struct AdapterNodes {
    double scale = 1.0;
    std::map<AdapterKey, std::pair<V, V>> ab;

    const std::pair<V, V>* find(std::int64_t layer, const std::string& target) const {
        auto it = ab.find({layer, target});
        return it == ab.end() ? nullptr : &it->second;
    }
};

struct ForwardResult {
    V logits;               // S x V
    std::vector<V> hidden;  // per-layer outputs, when captured
};

// Binds a model's parameters to a tape (each weight becomes one leaf, cached
// so repeated forwards in the same tape share leaves).
class BackboneGraph {
public:
    BackboneGraph(Tape& tape, const BackboneModel& model, bool trainable = false)
        : tape_(tape), model_(model), trainable_(trainable) {}

    Tape& tape() { return tape_; }
    const BackboneModel& model() const { return model_; }
    const std::map<std::string, V>& leaves() const { return leaves_; }

    V param(const std::string& name) {
        auto it = leaves_.find(name);
        if (it != leaves_.end()) return it->second;
        auto pit = model_.params.find(name);
        if (pit == model_.params.end()) throw std::invalid_argument("backbone: unknown parameter " + name);
        V v = tape_.leaf(pit->second, trainable_);
        leaves_.emplace(name, v);
        return v;
    }

    V embed(const std::vector<TokenId>& tokens) {
        for (TokenId t : tokens)
            if (t < 0 || t >= model_.cfg.vocab) throw std::out_of_range("backbone: token id out of vocabulary");
        return tape_.embedding(param("tok_emb"), tokens);
    }

    // Forward from an embedded input (rows may include non-token embeddings
    // such as memory vectors). Positions continue across all rows.
    ForwardResult forward_embedded(V x0, const AdapterNodes* adapters, bool capture_hidden) {
        adapters_ = adapters;
        const std::int64_t s = tape_.val(x0).dims[0];
        if (s > model_.cfg.max_pos)
            throw std::invalid_argument("backbone: sequence length " + std::to_string(s) + " exceeds max_pos " +
                                        std::to_string(model_.cfg.max_pos) + "; truncate the context");
        std::vector<std::int64_t> pos(static_cast<std::size_t>(s));
        for (std::int64_t i = 0; i < s; ++i) pos[static_cast<std::size_t>(i)] = i;

        const auto& cfg = model_.cfg;
        ForwardResult out;
        V x = x0;
        for (std::int64_t l = 0; l < cfg.layers; ++l) {
            const std::string p = "layers." + std::to_string(l) + ".";
            V h = tape_.rmsnorm(x, param(p + "attn_norm"));
            V q = tape_.rope(linear_(h, l, "q"), pos, cfg.head_dim(), cfg.rope_theta);
            V k = tape_.rope(linear_(h, l, "k"), pos, cfg.head_dim(), cfg.rope_theta);
            V v = linear_(h, l, "v");
            V a = tape_.attention(q, k, v, cfg.heads, cfg.kv_heads(), /*causal=*/true, s);
            x = tape_.add(x, linear_(a, l, "o"));
            V h2 = tape_.rmsnorm(x, param(p + "mlp_norm"));
            V gated = tape_.mul(tape_.silu(linear_(h2, l, "gate")), linear_(h2, l, "up"));
            x = tape_.add(x, linear_(gated, l, "down"));
            if (capture_hidden) out.hidden.push_back(x);
        }
        V f = tape_.rmsnorm(x, param("final_norm"));
        out.logits = tape_.matmul(f, param("lm_head"));
        adapters_ = nullptr;
        return out;
    }

    ForwardResult forward_tokens(const std::vector<TokenId>& tokens, const AdapterNodes* adapters,
                                 bool capture_hidden) {
        if (tokens.empty()) throw std::invalid_argument("backbone: empty token sequence");
        return forward_embedded(embed(tokens), adapters, capture_hidden);
    }

    AdapterNodes lift(const AdapterSet& set) {
        AdapterNodes nodes;
        for (const auto& [key, p] : set.pairs) {
            V a = tape_.constant(p.a);
            V b = tape_.constant(p.b);
            nodes.ab.emplace(key, std::make_pair(a, b));
            nodes.scale = p.scale;  // uniform per set
        }
        return nodes;
    }

private:
    V linear_(V x, std::int64_t layer, const std::string& target) {
        V y = tape_.matmul(x, param(backbone_weight_name(layer, target)));
        if (adapters_) {
            if (const auto* ab = adapters_->find(layer, target)) {
                V delta = tape_.matmul(tape_.matmul(x, ab->first), ab->second);
                y = tape_.add(y, adapters_->scale == 1.0 ? delta : tape_.scale(delta, adapters_->scale));
            }
        }
        return y;
    }

    Tape& tape_;
    const BackboneModel& model_;
    bool trainable_;
    const AdapterNodes* adapters_ = nullptr;
    std::map<std::string, V> leaves_;
};

struct LmOutput {
    Tensor logits;
    std::vector<Tensor> hidden;  // exactly L slices of width H when requested
};

// Plain-tensor forward pass (builds a throwaway tape, no backward).
inline LmOutput forward_lm(const BackboneModel& model, const std::vector<TokenId>& tokens,
                           const AdapterSet* adapters = nullptr, bool capture_hidden = false) {
    Tape tape;
    BackboneGraph g(tape, model, false);
    AdapterNodes nodes;
    if (adapters) nodes = g.lift(*adapters);
    ForwardResult r = g.forward_tokens(tokens, adapters ? &nodes : nullptr, capture_hidden);
    LmOutput out;
    out.logits = tape.val(r.logits);
    for (V h : r.hidden) out.hidden.push_back(tape.val(h));
    return out;
}

// Greedy decoding; stops after producing any stop id (excluded from the
// returned continuation) or after max_new tokens.
inline std::vector<TokenId> generate(const BackboneModel& model, const std::vector<TokenId>& prompt,
                                     const AdapterSet* adapters, std::int64_t max_new,
                                     const std::set<TokenId>& stop_ids = {}) {
    if (prompt.empty()) throw std::invalid_argument("generate: prompt must be non-empty");
    std::vector<TokenId> seq = prompt;
    std::vector<TokenId> out;
    for (std::int64_t i = 0; i < max_new; ++i) {
        const LmOutput lm = forward_lm(model, seq, adapters, false);
        const std::int64_t last = lm.logits.dims[0] - 1;
        std::int64_t best = 0;
        double best_v = lm.logits.at(last, 0);
        for (std::int64_t j = 1; j < model.cfg.vocab; ++j) {
            if (lm.logits.at(last, j) > best_v) {
                best_v = lm.logits.at(last, j);
                best = j;
            }
        }
        const TokenId tok = static_cast<TokenId>(best);
        if (stop_ids.count(tok)) break;
        out.push_back(tok);
        seq.push_back(tok);
    }
    return out;
}

}  // namespace shine
