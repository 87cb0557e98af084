#pragma once

// The SHINE core: memory sizing, memory extraction through the Meta-LoRA
// backbone, the memory-to-parameter transformer (learned layer/token
// positional tables, alternating bidirectional column/row attention, one
// shared SwiGLU MLP, post-layernorm), and reshape-to-LoRA in four layouts
// plus the optional coupled-attention mask.

#include <cstdint>
#include <map>
#include <stdexcept>
#include <string>
#include <vector>

#include "shine/adapters.hpp"
#include "shine/autodiff.hpp"
#include "shine/backbone.hpp"
#include "shine/config.hpp"
#include "shine/costmodel.hpp"

namespace shine {

inline std::int64_t memory_length(std::int64_t r, std::int64_t d, std::int64_t h) {
    return static_cast<std::int64_t>(cost::memory_length(static_cast<cost::u64>(r), static_cast<cost::u64>(d),
                                                         static_cast<cost::u64>(h)));
}

// ---------------------------------------------------------------------------
// coupled cross-attention mask
// ---------------------------------------------------------------------------

struct CouplingMask {
    Tensor mask;                          // M x M, 1 = may attend
    std::vector<std::int64_t> block_of;   // token -> flat block index (2*target + side), -1 = unassigned tail
};

// Each memory token owns H consecutive entries of the flattened layer slice.
// A token belongs to the (target, A/B) block holding the plurality of its
// entries (ties resolve to the earlier block; the unused tail beyond rD can
// also win, leaving the token unassigned). mask[p][q] is true iff p and q
// are assigned to the A and B blocks (either order) of the same target.
inline CouplingMask build_coupling_mask(const std::vector<TargetSpec>& targets, std::int64_t r,
                                        std::int64_t m, std::int64_t h) {
    std::int64_t rd = 0;
    for (const auto& t : targets) rd += r * (t.in_dim + t.out_dim);
    if (m * h < rd) throw std::invalid_argument("build_coupling_mask: M*H < r*D");

    struct Block { std::int64_t begin, end; };
    std::vector<Block> blocks;  // 2k = A of target k, 2k+1 = B of target k
    std::int64_t cursor = 0;
    for (const auto& t : targets) {
        blocks.push_back({cursor, cursor + t.in_dim * r});
        cursor += t.in_dim * r;
        blocks.push_back({cursor, cursor + r * t.out_dim});
        cursor += r * t.out_dim;
    }

    CouplingMask out;
    out.mask = Tensor({m, m});
    out.block_of.assign(static_cast<std::size_t>(m), -1);
    for (std::int64_t p = 0; p < m; ++p) {
        const std::int64_t lo = p * h, hi = (p + 1) * h;
        std::int64_t best = -1, best_overlap = 0;
        for (std::size_t b = 0; b < blocks.size(); ++b) {
            const std::int64_t ov = std::max<std::int64_t>(
                0, std::min(hi, blocks[b].end) - std::max(lo, blocks[b].begin));
            if (ov > best_overlap) {
                best_overlap = ov;
                best = static_cast<std::int64_t>(b);
            }
        }
        const std::int64_t tail = std::max<std::int64_t>(0, hi - std::max(lo, rd));
        if (tail > best_overlap) best = -1;
        out.block_of[static_cast<std::size_t>(p)] = best;
    }
    for (std::int64_t p = 0; p < m; ++p) {
        const std::int64_t bp = out.block_of[static_cast<std::size_t>(p)];
        if (bp < 0) continue;
        for (std::int64_t q = 0; q < m; ++q) {
            const std::int64_t bq = out.block_of[static_cast<std::size_t>(q)];
            if (bq < 0) continue;
            if ((bp / 2 == bq / 2) && (bp % 2 != bq % 2)) out.mask.at(p, q) = 1.0;
        }
    }
    return out;
}

// Attention needs at least one attendable key per row; rows with none (tail
// tokens, or a side whose partner block owns no token) fall back to self.
inline Tensor effective_coupling_mask(const CouplingMask& cm) {
    Tensor eff = cm.mask;
    const std::int64_t m = eff.dims[0];
    for (std::int64_t p = 0; p < m; ++p) {
        double s = 0.0;
        for (std::int64_t q = 0; q < m; ++q) s += eff.at(p, q);
        if (s == 0.0) eff.at(p, p) = 1.0;
    }
    return eff;
}

// ---------------------------------------------------------------------------
// reshape to LoRA
// ---------------------------------------------------------------------------

struct ReshapedLora {
    std::string target;
    V a;  // I x r
    V b;  // r x O
};

// Walks the flattened M x H slice in target order, consuming I*r values for
// A then r*O for B. The mode letters choose where the rank axis sits in the
// raw layout: A is read as I x r ("r") or as the transpose of r x I ("l");
// B as r x O ("l") or as the transpose of O x r ("r").
inline std::vector<ReshapedLora> reshape_to_lora(Tape& tape, V slice, const std::vector<TargetSpec>& targets,
                                                 std::int64_t r, ReshapeMode mode) {
    const Tensor& ts = tape.val(slice);
    std::int64_t rd = 0;
    for (const auto& t : targets) rd += r * (t.in_dim + t.out_dim);
    if (ts.numel() < rd)
        throw std::invalid_argument("reshape_to_lora: slice holds " + std::to_string(ts.numel()) +
                                    " values but needs r*D = " + std::to_string(rd));
    const bool a_transposed = (mode == ReshapeMode::lr || mode == ReshapeMode::ll);
    const bool b_transposed = (mode == ReshapeMode::rr || mode == ReshapeMode::lr);

    std::vector<ReshapedLora> out;
    std::int64_t cursor = 0;
    for (const auto& t : targets) {
        ReshapedLora rl;
        rl.target = t.name;
        rl.a = tape.reshape_slice(slice, cursor, t.in_dim, r, a_transposed);
        cursor += t.in_dim * r;
        rl.b = tape.reshape_slice(slice, cursor, r, t.out_dim, b_transposed);
        cursor += r * t.out_dim;
        out.push_back(rl);
    }
    return out;
}

// ---------------------------------------------------------------------------
// hypernetwork state
// ---------------------------------------------------------------------------

struct Hypernet {
    BackboneConfig bb;
    HypernetConfig cfg;
    std::int64_t mem_len = 0;  // M
    std::map<std::string, Tensor> params;

    static Hypernet init(const BackboneConfig& bb, const HypernetConfig& cfg, Rng& rng) {
        bb.validate();
        cfg.validate(bb);
        Hypernet hn;
        hn.bb = bb;
        hn.cfg = cfg;
        hn.mem_len = memory_length(cfg.r_gen, layer_dim_sum(bb), bb.hidden);
        const std::int64_t h = bb.hidden, m = hn.mem_len, l = bb.layers;
        const double std = cfg.init_std;
        hn.params["m"] = Tensor::randn({m, h}, rng, std);
        hn.params["p_layer"] = Tensor::randn({l, h}, rng, std);
        hn.params["p_token"] = Tensor::randn({m, h}, rng, std);
        for (std::int64_t i = 0; i < cfg.m2p_layers; ++i) {
            const std::string p = "m2p." + std::to_string(i) + ".";
            hn.params[p + "wq"] = Tensor::randn({h, h}, rng, std);
            hn.params[p + "wk"] = Tensor::randn({h, h}, rng, std);
            hn.params[p + "wv"] = Tensor::randn({h, h}, rng, std);
            hn.params[p + "wo"] = Tensor::randn({h, h}, rng, std);
            hn.params[p + "ln1_g"] = Tensor::full({h}, 1.0);
            hn.params[p + "ln1_b"] = Tensor::zeros({h});
            // the trailing layernorm of the last layer feeds reshape directly;
            // a small gain keeps the initial generated LoRA gentle
            hn.params[p + "ln2_g"] = Tensor::full({h}, i + 1 == cfg.m2p_layers ? cfg.out_norm_gain : 1.0);
            hn.params[p + "ln2_b"] = Tensor::zeros({h});
        }
        hn.params["m2p.mlp.wgate"] = Tensor::randn({h, 2 * h}, rng, std);
        hn.params["m2p.mlp.wup"] = Tensor::randn({h, 2 * h}, rng, std);
        hn.params["m2p.mlp.wdown"] = Tensor::randn({2 * h, h}, rng, std);
        for (std::int64_t li = 0; li < l; ++li) {
            for (const auto& t : layer_targets(bb)) {
                const std::string p = "meta." + std::to_string(li) + "." + t.name;
                hn.params[p + ".a"] = Tensor::randn({t.in_dim, cfg.r_meta}, rng, std);
                hn.params[p + ".b"] = Tensor::zeros({cfg.r_meta, t.out_dim});
            }
        }
        return hn;
    }

    // Meta-LoRA view (e.g. for merging or inspection).
    AdapterSet meta_lora() const {
        AdapterSet set;
        set.rank = cfg.r_meta;
        set.role = AdapterRole::meta;
        for (std::int64_t li = 0; li < bb.layers; ++li) {
            for (const auto& t : layer_targets(bb)) {
                const std::string p = "meta." + std::to_string(li) + "." + t.name;
                LoRAPair pair;
                pair.a = params.at(p + ".a");
                pair.b = params.at(p + ".b");
                pair.scale = 1.0 / static_cast<double>(cfg.r_meta);
                set.pairs.emplace(AdapterKey{li, t.name}, std::move(pair));
            }
        }
        return set;
    }

    void save(const std::string& dir) const {
        ckpt::Store store;
        store.tensors = params;
        store.scalars["cfg.r_gen"] = {static_cast<std::uint64_t>(cfg.r_gen)};
        store.scalars["cfg.r_meta"] = {static_cast<std::uint64_t>(cfg.r_meta)};
        store.scalars["cfg.m2p_layers"] = {static_cast<std::uint64_t>(cfg.m2p_layers)};
        store.scalars["cfg.m2p_heads"] = {static_cast<std::uint64_t>(cfg.m2p_heads)};
        store.scalars["cfg.mode"] = {static_cast<std::uint64_t>(cfg.mode)};
        store.scalars["cfg.coupling_kind"] = {static_cast<std::uint64_t>(cfg.coupling.kind)};
        store.scalars["cfg.coupling_k"] = {static_cast<std::uint64_t>(cfg.coupling.mixed_k)};
        store.scalars["mem_len"] = {static_cast<std::uint64_t>(mem_len)};
        ckpt::save(dir, store);
    }

    static Hypernet load(const std::string& dir, const BackboneConfig& bb) {
        const ckpt::Store store = ckpt::load(dir);
        Hypernet hn;
        hn.bb = bb;
        hn.cfg.r_gen = static_cast<std::int64_t>(store.scalar("cfg.r_gen"));
        hn.cfg.r_meta = static_cast<std::int64_t>(store.scalar("cfg.r_meta"));
        hn.cfg.m2p_layers = static_cast<std::int64_t>(store.scalar("cfg.m2p_layers"));
        hn.cfg.m2p_heads = static_cast<std::int64_t>(store.scalar("cfg.m2p_heads"));
        hn.cfg.mode = static_cast<ReshapeMode>(store.scalar("cfg.mode"));
        hn.cfg.coupling.kind = static_cast<CouplingSpec::Kind>(store.scalar("cfg.coupling_kind"));
        hn.cfg.coupling.mixed_k = static_cast<std::int64_t>(store.scalar("cfg.coupling_k"));
        hn.mem_len = static_cast<std::int64_t>(store.scalar("mem_len"));
        hn.params = store.tensors;
        if (hn.mem_len != memory_length(hn.cfg.r_gen, layer_dim_sum(bb), bb.hidden))
            throw std::runtime_error("hypernet checkpoint: memory length inconsistent with backbone dims");
        return hn;
    }
};

// ---------------------------------------------------------------------------
// graph builder
// ---------------------------------------------------------------------------

class HypernetGraph {
public:
    HypernetGraph(Tape& tape, const Hypernet& hn, BackboneGraph& bg, bool trainable)
        : tape_(tape), hn_(hn), bg_(bg), trainable_(trainable) {
        if (hn.cfg.coupling.kind != CouplingSpec::Kind::off) {
            CouplingMask cm = build_coupling_mask(layer_targets(hn.bb), hn.cfg.r_gen, hn.mem_len, hn.bb.hidden);
            coupled_mask_ = effective_coupling_mask(cm);
        }
    }

    V param(const std::string& name) {
        auto it = leaves_.find(name);
        if (it != leaves_.end()) return it->second;
        auto pit = hn_.params.find(name);
        if (pit == hn_.params.end()) throw std::invalid_argument("hypernet: unknown parameter " + name);
        V v = tape_.leaf(pit->second, trainable_);
        leaves_.emplace(name, v);
        return v;
    }

    const std::map<std::string, V>& leaves() const { return leaves_; }

    AdapterNodes meta_adapter_nodes() {
        AdapterNodes nodes;
        nodes.scale = 1.0 / static_cast<double>(hn_.cfg.r_meta);
        for (std::int64_t l = 0; l < hn_.bb.layers; ++l)
            for (const auto& t : layer_targets(hn_.bb)) {
                const std::string p = "meta." + std::to_string(l) + "." + t.name;
                nodes.ab.emplace(AdapterKey{l, t.name}, std::make_pair(param(p + ".a"), param(p + ".b")));
            }
        return nodes;
    }

    // Runs [context; memory embeddings] through the Meta-LoRA backbone and
    // stacks the per-layer hidden slices of the last M rows: (L*M) x H.
    V extract_memory(const std::vector<TokenId>& context) {
        const std::int64_t n = static_cast<std::int64_t>(context.size());
        const std::int64_t m = hn_.mem_len;
        if (n + m > hn_.bb.max_pos)
            throw std::invalid_argument("extract_memory: context (" + std::to_string(n) + ") + memory (" +
                                        std::to_string(m) + ") tokens exceed max_pos " +
                                        std::to_string(hn_.bb.max_pos) + "; truncate the context");
        V x0 = context.empty() ? param("m") : tape_.concat_rows({bg_.embed(context), param("m")});
        AdapterNodes meta = meta_adapter_nodes();
        ForwardResult fr = bg_.forward_embedded(x0, &meta, /*capture_hidden=*/true);
        std::vector<V> slices;
        for (V h : fr.hidden) slices.push_back(tape_.slice_rows(h, n, n + m));
        return tape_.concat_rows(slices);
    }

    // Memory-to-parameter transformer; preserves the (L*M) x H shape.
    V m2p_forward(V mem) {
        const std::int64_t l = hn_.bb.layers, m = hn_.mem_len;
        if (tape_.val(mem).dims[0] != l * m || tape_.val(mem).cols() != hn_.bb.hidden)
            throw std::invalid_argument("m2p_forward: memory tensor shape mismatch");

        V x = tape_.add_block(mem, param("p_layer"));  // row l*M+j gets P_layer[l]
        x = tape_.add_cycle(x, param("p_token"));      // row l*M+j gets P_token[j]

        // column layout: row j*L + l <- l*M + j
        std::vector<std::int64_t> col_perm(static_cast<std::size_t>(l * m));
        std::vector<std::int64_t> col_inv(static_cast<std::size_t>(l * m));
        for (std::int64_t li = 0; li < l; ++li)
            for (std::int64_t j = 0; j < m; ++j) {
                col_perm[static_cast<std::size_t>(j * l + li)] = li * m + j;
                col_inv[static_cast<std::size_t>(li * m + j)] = j * l + li;
            }

        const std::int64_t lp = hn_.cfg.m2p_layers;
        const std::int64_t row_layers = lp / 2;
        std::int64_t row_seen = 0;
        for (std::int64_t i = 0; i < lp; ++i) {
            const std::string p = "m2p." + std::to_string(i) + ".";
            const bool column = (i % 2 == 0);  // odd layers (1-based) mix across backbone layers
            V att;
            if (column) {
                V xp = tape_.permute_rows(x, col_perm);
                V a = attend_(xp, p, l, nullptr);
                att = tape_.permute_rows(a, col_inv);
            } else {
                ++row_seen;
                const Tensor* mask = nullptr;
                if (hn_.cfg.coupling.kind == CouplingSpec::Kind::full) mask = &coupled_mask_;
                else if (hn_.cfg.coupling.kind == CouplingSpec::Kind::mixed &&
                         row_seen > row_layers - std::min(hn_.cfg.coupling.mixed_k, row_layers))
                    mask = &coupled_mask_;
                att = attend_(x, p, m, mask);
            }
            x = tape_.layernorm(tape_.add(x, att), param(p + "ln1_g"), param(p + "ln1_b"));
            V gated = tape_.mul(tape_.silu(tape_.matmul(x, param("m2p.mlp.wgate"))),
                                tape_.matmul(x, param("m2p.mlp.wup")));
            V y = tape_.matmul(gated, param("m2p.mlp.wdown"));
            x = tape_.layernorm(tape_.add(x, y), param(p + "ln2_g"), param(p + "ln2_b"));
        }
        return x;
    }

    // Slice i of the M2P output generates the adapters of backbone layer i.
    AdapterNodes generated_adapters(V mhat) {
        const std::int64_t m = hn_.mem_len;
        AdapterNodes nodes;
        nodes.scale = 1.0;  // the trailing layernorm governs magnitude
        const auto targets = layer_targets(hn_.bb);
        for (std::int64_t l = 0; l < hn_.bb.layers; ++l) {
            V slice = tape_.slice_rows(mhat, l * m, (l + 1) * m);
            for (const auto& rl : reshape_to_lora(tape_, slice, targets, hn_.cfg.r_gen, hn_.cfg.mode))
                nodes.ab.emplace(AdapterKey{l, rl.target}, std::make_pair(rl.a, rl.b));
        }
        return nodes;
    }

    AdapterNodes build_generated(const std::vector<TokenId>& context) {
        return generated_adapters(m2p_forward(extract_memory(context)));
    }

private:
    V attend_(V x, const std::string& prefix, std::int64_t block_len, const Tensor* mask) {
        V q = tape_.matmul(x, param(prefix + "wq"));
        V k = tape_.matmul(x, param(prefix + "wk"));
        V v = tape_.matmul(x, param(prefix + "wv"));
        V a = tape_.attention(q, k, v, hn_.cfg.m2p_heads, hn_.cfg.m2p_heads, /*causal=*/false, block_len, mask);
        return tape_.matmul(a, param(prefix + "wo"));
    }

    Tape& tape_;
    const Hypernet& hn_;
    BackboneGraph& bg_;
    bool trainable_;
    Tensor coupled_mask_;
    std::map<std::string, V> leaves_;
};

// ---------------------------------------------------------------------------
// plain-tensor entry points
// ---------------------------------------------------------------------------

// Memory tensor as (L, M, H).
inline Tensor extract_memory_tensor(const BackboneModel& bb, const Hypernet& hn,
                                    const std::vector<TokenId>& context) {
    Tape tape;
    BackboneGraph bg(tape, bb, false);
    HypernetGraph hg(tape, hn, bg, false);
    Tensor flat = tape.val(hg.extract_memory(context));
    Tensor out;
    out.dims = {bb.cfg.layers, hn.mem_len, bb.cfg.hidden};
    out.v = std::move(flat.v);
    return out;
}

inline Tensor m2p_forward_tensor(const BackboneModel& bb, const Hypernet& hn, const Tensor& mem) {
    if (mem.rank() != 3 || mem.dims[0] != bb.cfg.layers || mem.dims[1] != hn.mem_len || mem.dims[2] != bb.cfg.hidden)
        throw std::invalid_argument("m2p_forward_tensor: expected (L, M, H) memory tensor");
    Tape tape;
    BackboneGraph bg(tape, bb, false);
    HypernetGraph hg(tape, hn, bg, false);
    Tensor flat;
    flat.dims = {mem.dims[0] * mem.dims[1], mem.dims[2]};
    flat.v = mem.v;
    Tensor res = tape.val(hg.m2p_forward(tape.constant(flat)));
    Tensor out;
    out.dims = mem.dims;
    out.v = std::move(res.v);
    return out;
}

// Context -> Memory -> Generated LoRA, one forward pass, no stochastic ops.
inline AdapterSet generate_lora(const BackboneModel& bb, const Hypernet& hn,
                                const std::vector<TokenId>& context) {
    Tape tape;
    BackboneGraph bg(tape, bb, false);
    HypernetGraph hg(tape, hn, bg, false);
    AdapterNodes nodes = hg.build_generated(context);
    AdapterSet set;
    set.rank = hn.cfg.r_gen;
    set.role = AdapterRole::generated;
    for (const auto& [key, ab] : nodes.ab) {
        LoRAPair p;
        p.a = tape.val(ab.first);
        p.b = tape.val(ab.second);
        p.scale = nodes.scale;
        set.pairs.emplace(key, std::move(p));
    }
    return set;
}

}  // namespace shine
