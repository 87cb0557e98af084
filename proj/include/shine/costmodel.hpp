#pragma once

// Analytic FLOPs and peak-memory model for the four adaptation methods.
// Pure integer arithmetic (1 MAC = 2 FLOPs), so every figure is exact and
// platform independent. The backbone is assumed to use GQA with key/value
// width H/4 and a SwiGLU MLP with intermediate width 3H; the memory-to-
// parameter transformer uses full-width attention and a SwiGLU MLP with
// intermediate width 2H.

#include <cstdint>
#include <stdexcept>
#include <string>

namespace shine::cost {

using u64 = std::uint64_t;

enum class Method { naive, in_context, sft, shine };

inline Method method_from_string(const std::string& s) {
    if (s == "naive") return Method::naive;
    if (s == "in_context" || s == "in-context") return Method::in_context;
    if (s == "sft") return Method::sft;
    if (s == "shine") return Method::shine;
    throw std::invalid_argument("unknown method: " + s);
}

inline const char* method_name(Method m) {
    switch (m) {
        case Method::naive: return "naive";
        case Method::in_context: return "in_context";
        case Method::sft: return "sft";
        case Method::shine: return "shine";
    }
    return "?";
}

// M = ceil(r*D / H); guarantees M*H >= r*D.
inline u64 memory_length(u64 r, u64 d, u64 h) {
    if (r == 0 || d == 0 || h == 0) throw std::invalid_argument("memory_length: inputs must be positive");
    return (r * d + h - 1) / h;
}

// Sum of input+output dims over the seven per-layer projections: 18.5*H.
inline u64 layer_dim_sum(u64 h) {
    if (h % 2 != 0) throw std::invalid_argument("layer_dim_sum: H must be even");
    return 37 * h / 2;
}

// Full forward over N tokens, no KV cache: L(23NH^2 + 4N^2H) + 2HV.
inline u64 llm_flops_no_kv(u64 n, u64 h, u64 l, u64 v) {
    return l * (23 * n * h * h + 4 * n * n * h) + 2 * h * v;
}

// One decoding step against N cached tokens: L(23H^2 + 4NH) + 2HV.
inline u64 llm_flops_kv_step(u64 n, u64 h, u64 l, u64 v) {
    return l * (23 * h * h + 4 * n * h) + 2 * h * v;
}

// Full forward of the M2P transformer over a length-n sequence (one layer
// costs 20nH^2 + 4n^2H: full-width QKVO projections plus SwiGLU at 2H).
inline u64 hypernet_layer_flops(u64 n, u64 h) { return 20 * n * h * h + 4 * n * n * h; }

// One-time LoRA-generation cost: extraction pass over C+M tokens plus the
// alternating column/row M2P transformer (L'/2 layers along each axis).
struct ShineAmortized {
    u64 extraction = 0;  // FLOPs_1
    u64 m2p = 0;         // FLOPs_2
    u64 total() const { return extraction + m2p; }
};

inline ShineAmortized shine_amortized_flops_parts(u64 c, u64 r, u64 h, u64 l, u64 lp) {
    if (r == 0 || h == 0 || l == 0 || lp == 0) throw std::invalid_argument("shine_amortized_flops: inputs must be positive");
    const u64 m = memory_length(r, layer_dim_sum(h), h);
    ShineAmortized out;
    out.extraction = l * (23 * (c + m) * h * h + 4 * (c + m) * (c + m) * h);
    out.m2p = lp * m * (20 * l * h * h + 4 * l * l * h) / 2 + lp * l * (20 * m * h * h + 4 * m * m * h) / 2;
    return out;
}

inline u64 shine_amortized_flops(u64 c, u64 r, u64 h, u64 l, u64 lp) {
    return shine_amortized_flops_parts(c, r, h, l, lp).total();
}

// T fine-tuning iterations at forward+backward ~ 3x forward, loss over all
// C positions: 3T[L(23CH^2 + 4C^2H) + 2CHV].
inline u64 sft_amortized_flops(u64 c, u64 t, u64 h, u64 l, u64 v) {
    return 3 * t * (l * (23 * c * h * h + 4 * c * c * h) + 2 * c * h * v);
}

inline u64 amortized_flops(Method m, u64 c, u64 t, u64 r, u64 h, u64 l, u64 lp, u64 v) {
    switch (m) {
        case Method::naive:
        case Method::in_context: return 0;
        case Method::sft: return sft_amortized_flops(c, t, h, l, v);
        case Method::shine: return shine_amortized_flops(c, r, h, l, lp);
    }
    throw std::invalid_argument("amortized_flops: unknown method");
}

// Per-answer generation cost. Naive/SFT/SHINE process I input tokens; the
// in-context method additionally carries the C context tokens.
inline u64 generation_flops(u64 i, u64 c, Method m, bool kv_cache, u64 h, u64 l, u64 v) {
    const u64 n = (m == Method::in_context) ? i + c : i;
    return kv_cache ? llm_flops_kv_step(n, h, l, v) : llm_flops_no_kv(n, h, l, v);
}

enum class MemRegime { efficient, standard_attention, kv_cache };

inline MemRegime regime_from_string(const std::string& s) {
    if (s == "efficient") return MemRegime::efficient;
    if (s == "standard_attention" || s == "standard") return MemRegime::standard_attention;
    if (s == "kv_cache" || s == "kv") return MemRegime::kv_cache;
    throw std::invalid_argument("unknown memory regime: " + s);
}

// Peak extra scalars beyond parameters: 4LNH (efficient attention),
// + LN^2 when the attention matrix is materialized, L*N*H/2 for the KV cache.
inline u64 peak_memory(u64 n, u64 h, u64 l, MemRegime regime) {
    switch (regime) {
        case MemRegime::efficient: return 4 * l * n * h;
        case MemRegime::standard_attention: return 4 * l * n * h + l * n * n;
        case MemRegime::kv_cache: return l * n * h / 2;
    }
    throw std::invalid_argument("peak_memory: unknown regime");
}

// Attention-matmul cost of one column+row layer pair vs. two full-attention
// layers over the flattened L*M sequence. The ratio is (L+M)/(2LM).
inline u64 axial_pair_attention_matmul_flops(u64 l, u64 m, u64 h) {
    return 4 * m * l * h * (l + m);
}

inline u64 full_pair_attention_matmul_flops(u64 l, u64 m, u64 h) {
    return 2 * 4 * (l * m) * (l * m) * h;
}

// Exact check of (L+M)/(2LM) <= num/den without floating point.
inline bool axial_ratio_leq(u64 l, u64 m, u64 num, u64 den) {
    return den * (l + m) <= 2 * l * m * num;
}

inline double axial_saving_ratio(u64 l, u64 m) {
    return static_cast<double>(l + m) / (2.0 * static_cast<double>(l) * static_cast<double>(m));
}

struct CostInputs {
    u64 h = 64;    // hidden width
    u64 l = 4;     // backbone layers
    u64 v = 512;   // vocabulary size
    u64 lp = 2;    // M2P depth
    u64 r = 2;     // generated LoRA rank
    u64 c = 50;    // context tokens
    u64 i = 10;    // generation input tokens (prompt + history + question)
    u64 t = 10;    // SFT iterations
};

struct MethodCost {
    Method method;
    u64 amortized;
    u64 gen_no_kv;
    u64 gen_kv;
    u64 mem_efficient;
    u64 mem_standard;
    u64 mem_kv_cache;
};

struct CostReport {
    CostInputs in;
    u64 memory_tokens = 0;  // M
    MethodCost methods[4];
};

inline CostReport cost_report(const CostInputs& in) {
    CostReport rep;
    rep.in = in;
    rep.memory_tokens = memory_length(in.r, layer_dim_sum(in.h), in.h);
    const Method order[4] = {Method::naive, Method::in_context, Method::sft, Method::shine};
    for (int k = 0; k < 4; ++k) {
        const Method m = order[k];
        const u64 n = (m == Method::in_context) ? in.i + in.c : in.i;
        rep.methods[k] = MethodCost{
            m,
            amortized_flops(m, in.c, in.t, in.r, in.h, in.l, in.lp, in.v),
            generation_flops(in.i, in.c, m, false, in.h, in.l, in.v),
            generation_flops(in.i, in.c, m, true, in.h, in.l, in.v),
            peak_memory(n, in.h, in.l, MemRegime::efficient),
            peak_memory(n, in.h, in.l, MemRegime::standard_attention),
            peak_memory(n, in.h, in.l, MemRegime::kv_cache),
        };
    }
    return rep;
}

}  // namespace shine::cost
