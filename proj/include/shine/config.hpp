#pragma once

// Run configuration: backbone architecture, hypernetwork settings and the
// training recipe. A run directory always carries the resolved config it ran
// with (JSON), and CLI flags override file values.

#include <cstdint>
#include <fstream>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

namespace shine {

// Decoder-only backbone with the ratios the cost model assumes: key/value
// projection width H/4 and SwiGLU intermediate width 3H.
struct BackboneConfig {
    std::int64_t layers = 4;
    std::int64_t hidden = 64;
    std::int64_t heads = 4;
    std::int64_t vocab = 512;
    std::int64_t max_pos = 512;
    double rope_theta = 10000.0;

    std::int64_t kv_width() const { return hidden / 4; }
    std::int64_t mlp_inner() const { return 3 * hidden; }
    std::int64_t head_dim() const { return hidden / heads; }
    std::int64_t kv_heads() const { return kv_width() / head_dim(); }

    void validate() const {
        if (layers < 1 || hidden < 1 || heads < 1 || vocab < 262)
            throw std::invalid_argument("BackboneConfig: layers/hidden/heads positive, vocab must cover reserved ids");
        if (hidden % heads != 0) throw std::invalid_argument("BackboneConfig: hidden not divisible by heads");
        if (hidden % 4 != 0) throw std::invalid_argument("BackboneConfig: hidden must be divisible by 4 (kv width H/4)");
        if (kv_width() % head_dim() != 0)
            throw std::invalid_argument("BackboneConfig: kv width must be a multiple of the head dim");
        if (head_dim() % 2 != 0) throw std::invalid_argument("BackboneConfig: head dim must be even (rotary pairs)");
    }
};

struct TargetSpec {
    std::string name;
    std::int64_t in_dim = 0;
    std::int64_t out_dim = 0;
};

// The seven per-layer linear targets, in generation order.
inline std::vector<TargetSpec> layer_targets(const BackboneConfig& cfg) {
    const std::int64_t h = cfg.hidden, kv = cfg.kv_width(), inner = cfg.mlp_inner();
    return {
        {"q", h, h}, {"k", h, kv}, {"v", h, kv}, {"o", h, h},
        {"gate", h, inner}, {"up", h, inner}, {"down", inner, h},
    };
}

// D = sum of input+output dims over the layer's linear targets (18.5 H here).
inline std::int64_t layer_dim_sum(const BackboneConfig& cfg) {
    std::int64_t d = 0;
    for (const auto& t : layer_targets(cfg)) d += t.in_dim + t.out_dim;
    return d;
}

enum class ReshapeMode { rl, rr, lr, ll };

inline ReshapeMode reshape_mode_from_string(const std::string& s) {
    if (s == "rl") return ReshapeMode::rl;
    if (s == "rr") return ReshapeMode::rr;
    if (s == "lr") return ReshapeMode::lr;
    if (s == "ll") return ReshapeMode::ll;
    throw std::invalid_argument("unknown reshape mode: " + s);
}

inline const char* reshape_mode_name(ReshapeMode m) {
    switch (m) {
        case ReshapeMode::rl: return "rl";
        case ReshapeMode::rr: return "rr";
        case ReshapeMode::lr: return "lr";
        case ReshapeMode::ll: return "ll";
    }
    return "?";
}

// Coupled cross-attention: off, every row-attention layer masked, or only the
// last `mixed_k` row-attention layers masked.
struct CouplingSpec {
    enum class Kind { off, full, mixed };
    Kind kind = Kind::off;
    std::int64_t mixed_k = 0;

    static CouplingSpec from_string(const std::string& s) {
        CouplingSpec c;
        if (s == "off") return c;
        if (s == "full") { c.kind = Kind::full; return c; }
        if (s.rfind("mixed:", 0) == 0) {
            c.kind = Kind::mixed;
            c.mixed_k = std::stoll(s.substr(6));
            if (c.mixed_k < 0) throw std::invalid_argument("coupling mixed:k needs k >= 0");
            return c;
        }
        throw std::invalid_argument("unknown coupling spec: " + s + " (off|full|mixed:<k>)");
    }

    std::string to_string() const {
        switch (kind) {
            case Kind::off: return "off";
            case Kind::full: return "full";
            case Kind::mixed: return "mixed:" + std::to_string(mixed_k);
        }
        return "off";
    }
};

struct HypernetConfig {
    std::int64_t r_gen = 2;
    std::int64_t r_meta = 8;
    std::int64_t m2p_layers = 2;  // must be even: column/row alternation completes in pairs
    std::int64_t m2p_heads = 1;
    ReshapeMode mode = ReshapeMode::rl;
    CouplingSpec coupling;
    double init_std = 0.02;
    double out_norm_gain = 0.1;  // gain init of the trailing layernorm feeding reshape

    void validate(const BackboneConfig& bb) const {
        if (r_gen < 1 || r_meta < 1) throw std::invalid_argument("HypernetConfig: ranks must be >= 1");
        if (m2p_layers < 2 || m2p_layers % 2 != 0)
            throw std::invalid_argument("HypernetConfig: m2p_layers must be even and >= 2");
        if (m2p_heads < 1 || bb.hidden % m2p_heads != 0)
            throw std::invalid_argument("HypernetConfig: m2p_heads must divide hidden");
    }
};

struct TrainConfig {
    std::string stage = "pretrain";  // pretrain | ift
    double lambda = 0.5;
    double lr = 5e-5;                // stage defaults: 5e-5 pretrain, 3e-5 ift (1e-5 refinement)
    double warmup_frac = 0.05;
    std::int64_t epochs = 1;
    std::int64_t max_steps = 0;      // 0: epoch-driven
    std::int64_t batch_size = 2;
    std::int64_t max_context_len = 96;
    std::uint64_t seed = 0;
    double clip_norm = 1.0;
    double weight_decay = 0.01;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double adam_eps = 1e-8;
    std::int64_t ckpt_interval = 0;  // 0: only final
    std::string optimizer = "adamw";

    // backbone language-model warmup phase: gives the frozen LM something
    // to say before the hypernetwork trains against it
    std::int64_t backbone_steps = 400;
    double backbone_lr = 1e-3;

    void validate() const {
        if (lambda < 0.0 || lambda > 1.0) throw std::invalid_argument("TrainConfig: lambda must be in [0,1]");
        if (stage != "pretrain" && stage != "ift") throw std::invalid_argument("TrainConfig: stage must be pretrain|ift");
        if (epochs < 0 || batch_size < 1 || max_context_len < 1)
            throw std::invalid_argument("TrainConfig: bad epochs/batch/context length");
        if (optimizer != "adamw") throw std::invalid_argument("TrainConfig: unknown optimizer " + optimizer);
    }
};

struct RunConfig {
    BackboneConfig backbone;
    HypernetConfig hypernet;
    TrainConfig train;
    std::string data_path;
    std::string out_dir;
    std::uint64_t seed = 1;

    void validate() const {
        backbone.validate();
        hypernet.validate(backbone);
        train.validate();
    }
};

// ---------------------------------------------------------------------------
// JSON (de)serialization
// ---------------------------------------------------------------------------

inline nlohmann::json to_json(const RunConfig& c) {
    nlohmann::json j;
    j["backbone"] = {{"layers", c.backbone.layers}, {"hidden", c.backbone.hidden},
                     {"heads", c.backbone.heads},   {"vocab", c.backbone.vocab},
                     {"max_pos", c.backbone.max_pos}, {"rope_theta", c.backbone.rope_theta}};
    j["hypernet"] = {{"r_gen", c.hypernet.r_gen},       {"r_meta", c.hypernet.r_meta},
                     {"m2p_layers", c.hypernet.m2p_layers}, {"m2p_heads", c.hypernet.m2p_heads},
                     {"mode", reshape_mode_name(c.hypernet.mode)},
                     {"coupling", c.hypernet.coupling.to_string()},
                     {"init_std", c.hypernet.init_std},
                     {"out_norm_gain", c.hypernet.out_norm_gain}};
    j["train"] = {{"stage", c.train.stage},       {"lambda", c.train.lambda},
                  {"lr", c.train.lr},             {"warmup_frac", c.train.warmup_frac},
                  {"epochs", c.train.epochs},     {"max_steps", c.train.max_steps},
                  {"batch_size", c.train.batch_size}, {"max_context_len", c.train.max_context_len},
                  {"seed", c.train.seed},         {"clip_norm", c.train.clip_norm},
                  {"weight_decay", c.train.weight_decay}, {"beta1", c.train.beta1},
                  {"beta2", c.train.beta2},       {"adam_eps", c.train.adam_eps},
                  {"ckpt_interval", c.train.ckpt_interval}, {"optimizer", c.train.optimizer},
                  {"backbone_steps", c.train.backbone_steps}, {"backbone_lr", c.train.backbone_lr}};
    j["data_path"] = c.data_path;
    j["out_dir"] = c.out_dir;
    j["seed"] = c.seed;
    return j;
}

inline RunConfig run_config_from_json(const nlohmann::json& j) {
    RunConfig c;
    if (j.contains("backbone")) {
        const auto& b = j["backbone"];
        c.backbone.layers = b.value("layers", c.backbone.layers);
        c.backbone.hidden = b.value("hidden", c.backbone.hidden);
        c.backbone.heads = b.value("heads", c.backbone.heads);
        c.backbone.vocab = b.value("vocab", c.backbone.vocab);
        c.backbone.max_pos = b.value("max_pos", c.backbone.max_pos);
        c.backbone.rope_theta = b.value("rope_theta", c.backbone.rope_theta);
    }
    if (j.contains("hypernet")) {
        const auto& h = j["hypernet"];
        c.hypernet.r_gen = h.value("r_gen", c.hypernet.r_gen);
        c.hypernet.r_meta = h.value("r_meta", c.hypernet.r_meta);
        c.hypernet.m2p_layers = h.value("m2p_layers", c.hypernet.m2p_layers);
        c.hypernet.m2p_heads = h.value("m2p_heads", c.hypernet.m2p_heads);
        c.hypernet.mode = reshape_mode_from_string(h.value("mode", std::string("rl")));
        c.hypernet.coupling = CouplingSpec::from_string(h.value("coupling", std::string("off")));
        c.hypernet.init_std = h.value("init_std", c.hypernet.init_std);
        c.hypernet.out_norm_gain = h.value("out_norm_gain", c.hypernet.out_norm_gain);
    }
    if (j.contains("train")) {
        const auto& t = j["train"];
        c.train.stage = t.value("stage", c.train.stage);
        c.train.lambda = t.value("lambda", c.train.lambda);
        c.train.lr = t.value("lr", c.train.lr);
        c.train.warmup_frac = t.value("warmup_frac", c.train.warmup_frac);
        c.train.epochs = t.value("epochs", c.train.epochs);
        c.train.max_steps = t.value("max_steps", c.train.max_steps);
        c.train.batch_size = t.value("batch_size", c.train.batch_size);
        c.train.max_context_len = t.value("max_context_len", c.train.max_context_len);
        c.train.seed = t.value("seed", c.train.seed);
        c.train.clip_norm = t.value("clip_norm", c.train.clip_norm);
        c.train.weight_decay = t.value("weight_decay", c.train.weight_decay);
        c.train.beta1 = t.value("beta1", c.train.beta1);
        c.train.beta2 = t.value("beta2", c.train.beta2);
        c.train.adam_eps = t.value("adam_eps", c.train.adam_eps);
        c.train.ckpt_interval = t.value("ckpt_interval", c.train.ckpt_interval);
        c.train.optimizer = t.value("optimizer", c.train.optimizer);
        c.train.backbone_steps = t.value("backbone_steps", c.train.backbone_steps);
        c.train.backbone_lr = t.value("backbone_lr", c.train.backbone_lr);
    }
    c.data_path = j.value("data_path", c.data_path);
    c.out_dir = j.value("out_dir", c.out_dir);
    c.seed = j.value("seed", c.seed);
    return c;
}

inline RunConfig load_run_config(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw std::runtime_error("config: cannot open " + path);
    nlohmann::json j;
    in >> j;
    return run_config_from_json(j);
}

inline void save_run_config(const std::string& path, const RunConfig& c) {
    std::ofstream out(path);
    if (!out) throw std::runtime_error("config: cannot write " + path);
    out << to_json(c).dump(2) << "\n";
}

}  // namespace shine
