#pragma once

// LoRA data model shared by Meta-LoRA and generated LoRA: y = x W + s (x A) B
// with A: I x r and B: r x O. AdapterSets are immutable values after
// creation and cover the seven projections of every backbone layer.

#include <cstdint>
#include <map>
#include <stdexcept>
#include <string>
#include <utility>

#include "shine/checkpoint.hpp"
#include "shine/config.hpp"
#include "shine/rng.hpp"
#include "shine/tensor.hpp"

namespace shine {

struct LoRAPair {
    Tensor a;  // I x r
    Tensor b;  // r x O
    double scale = 1.0;
};

enum class AdapterRole { meta, generated };

using AdapterKey = std::pair<std::int64_t, std::string>;  // (layer, target)

struct AdapterSet {
    std::int64_t rank = 0;
    AdapterRole role = AdapterRole::generated;
    std::map<AdapterKey, LoRAPair> pairs;

    const LoRAPair* find(std::int64_t layer, const std::string& target) const {
        auto it = pairs.find({layer, target});
        return it == pairs.end() ? nullptr : &it->second;
    }
};

inline std::string backbone_weight_name(std::int64_t layer, const std::string& target) {
    return "layers." + std::to_string(layer) + ".w" + target;
}

// A ~ N(0, init_std^2), B = 0, scale = 1/r: a fresh Meta-LoRA is a no-op on
// the backbone until trained.
inline AdapterSet init_meta_lora(const BackboneConfig& cfg, std::int64_t r_meta, Rng& rng,
                                 double init_std = 0.02) {
    if (r_meta < 1) throw std::invalid_argument("init_meta_lora: rank must be >= 1");
    AdapterSet set;
    set.rank = r_meta;
    set.role = AdapterRole::meta;
    const auto targets = layer_targets(cfg);
    for (std::int64_t l = 0; l < cfg.layers; ++l) {
        for (const auto& t : targets) {
            LoRAPair p;
            p.a = Tensor::randn({t.in_dim, r_meta}, rng, init_std);
            p.b = Tensor::zeros({r_meta, t.out_dim});
            p.scale = 1.0 / static_cast<double>(r_meta);
            set.pairs.emplace(AdapterKey{l, t.name}, std::move(p));
        }
    }
    return set;
}

// r*D parameters per layer, r*D*L in total.
inline std::int64_t total_lora_params_per_layer(const BackboneConfig& cfg, std::int64_t r) {
    if (r < 1) throw std::invalid_argument("total_lora_params: rank must be >= 1");
    return r * layer_dim_sum(cfg);
}

inline std::int64_t total_lora_params(const BackboneConfig& cfg, std::int64_t r) {
    return total_lora_params_per_layer(cfg, r) * cfg.layers;
}

// Copy-on-merge: W' = W + scale * A * B for every adapted target. The input
// weight map is left untouched.
inline std::map<std::string, Tensor> merge_lora(const std::map<std::string, Tensor>& weights,
                                                const AdapterSet& set) {
    std::map<std::string, Tensor> merged = weights;
    for (const auto& [key, p] : set.pairs) {
        const std::string wname = backbone_weight_name(key.first, key.second);
        auto it = merged.find(wname);
        if (it == merged.end()) throw std::invalid_argument("merge_lora: no backbone weight for target " + wname);
        Tensor& w = it->second;
        if (p.a.dims[0] != w.dims[0] || p.b.dims[1] != w.dims[1] || p.a.dims[1] != p.b.dims[0])
            throw std::invalid_argument("merge_lora: dim mismatch at " + wname + " (W " + w.shape_str() +
                                        ", A " + p.a.shape_str() + ", B " + p.b.shape_str() + ")");
        Tensor delta = matmul(p.a, p.b);
        for (std::size_t i = 0; i < w.v.size(); ++i) w.v[i] += p.scale * delta.v[i];
    }
    return merged;
}

// ---------------------------------------------------------------------------
// checkpoint serialization (same manifest + blob format as the backbone)
// ---------------------------------------------------------------------------

inline void save_adapters(const std::string& dir, const AdapterSet& set) {
    ckpt::Store store;
    store.scalars["lora.rank"] = {static_cast<std::uint64_t>(set.rank)};
    store.scalars["lora.role"] = {set.role == AdapterRole::meta ? 0ull : 1ull};
    for (const auto& [key, p] : set.pairs) {
        const std::string base = "lora." + std::to_string(key.first) + "." + key.second;
        store.tensors[base + ".a"] = p.a;
        store.tensors[base + ".b"] = p.b;
        store.tensors[base + ".scale"] = Tensor::from_values({1}, {p.scale});
    }
    ckpt::save(dir, store);
}

inline AdapterSet load_adapters(const std::string& dir) {
    const ckpt::Store store = ckpt::load(dir);
    AdapterSet set;
    set.rank = static_cast<std::int64_t>(store.scalar("lora.rank"));
    set.role = store.scalar("lora.role") == 0 ? AdapterRole::meta : AdapterRole::generated;
    for (const auto& [name, t] : store.tensors) {
        if (name.size() < 7 || name.compare(name.size() - 2, 2, ".a") != 0) continue;
        // lora.<layer>.<target>.a
        const std::string body = name.substr(5, name.size() - 7);
        const auto dotpos = body.find('.');
        if (dotpos == std::string::npos) continue;
        const std::int64_t layer = std::stoll(body.substr(0, dotpos));
        const std::string target = body.substr(dotpos + 1);
        LoRAPair p;
        p.a = t;
        p.b = store.tensor("lora." + body + ".b");
        p.scale = store.tensor("lora." + body + ".scale").v[0];
        set.pairs.emplace(AdapterKey{layer, target}, std::move(p));
    }
    if (set.pairs.empty()) throw std::runtime_error("load_adapters: no LoRA pairs in " + dir);
    return set;
}

}  // namespace shine
