#pragma once

// Two-stage training recipe: self-supervised pretraining (reconstruction +
// completion over packed contexts) and instruction fine-tuning with
// answer-token masking. The backbone stays frozen; gradients reach the M2P
// transformer, the Meta-LoRA matrices and the initial memory embeddings.
// Data schedules are derived statelessly from (seed, epoch), so resuming
// from a checkpoint replays the exact trajectory.

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <set>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "shine/backbone.hpp"
#include "shine/checkpoint.hpp"
#include "shine/config.hpp"
#include "shine/corpus.hpp"
#include "shine/hypernet.hpp"

namespace shine {

// ---------------------------------------------------------------------------
// chat template
// ---------------------------------------------------------------------------

// Minimal chat layout with reserved single tokens: every turn reads
// <usr> <prompt tokens> <assistant> <content tokens> <eot>, and the loss
// covers the assistant content plus its terminating <eot>.
struct SupervisedSeq {
    std::vector<TokenId> tokens;
    std::vector<std::uint8_t> is_content;  // token-level: belongs to a supervised span

    void append_turn(const std::vector<TokenId>& prompt, const std::vector<TokenId>& content, bool supervise) {
        push_(Tokenizer::kUser, false);
        for (TokenId t : prompt) push_(t, false);
        push_(Tokenizer::kAssistant, false);
        for (TokenId t : content) push_(t, supervise);
        push_(Tokenizer::kEot, supervise);
    }

    void append_task_turn(Task task, const std::vector<TokenId>& content, bool supervise = true) {
        append_turn({task == Task::recon ? Tokenizer::kRecon : Tokenizer::kComp}, content, supervise);
    }

    // position-level CE inputs: position p predicts tokens[p+1]
    std::vector<std::int32_t> targets() const {
        std::vector<std::int32_t> t(tokens.size(), 0);
        for (std::size_t p = 0; p + 1 < tokens.size(); ++p) t[p] = tokens[p + 1];
        return t;
    }

    std::vector<std::uint8_t> loss_mask() const {
        std::vector<std::uint8_t> on(tokens.size(), 0);
        for (std::size_t p = 0; p + 1 < tokens.size(); ++p) on[p] = is_content[p + 1];
        return on;
    }

private:
    void push_(TokenId t, bool content) {
        tokens.push_back(t);
        is_content.push_back(content ? 1 : 0);
    }
};

inline V build_sequence_loss(Tape& tape, BackboneGraph& bg, const AdapterNodes* adapters,
                             const SupervisedSeq& seq) {
    ForwardResult fr = bg.forward_tokens(seq.tokens, adapters, false);
    return tape.cross_entropy_mean(fr.logits, seq.targets(), seq.loss_mask());
}

// Per-position CE rows of a supervised sequence (analysis only, no tape).
inline std::vector<double> sequence_ce_rows(const BackboneModel& model, const AdapterSet* adapters,
                                            const SupervisedSeq& seq) {
    const LmOutput out = forward_lm(model, seq.tokens, adapters, false);
    const auto targets = seq.targets();
    const auto on = seq.loss_mask();
    std::vector<double> ce;
    for (std::size_t p = 0; p < seq.tokens.size(); ++p) {
        if (!on[p]) continue;
        const std::int64_t vsz = out.logits.dims[1];
        double mx = out.logits.at(static_cast<std::int64_t>(p), 0);
        for (std::int64_t j = 1; j < vsz; ++j) mx = std::max(mx, out.logits.at(static_cast<std::int64_t>(p), j));
        double denom = 0.0;
        for (std::int64_t j = 0; j < vsz; ++j) denom += std::exp(out.logits.at(static_cast<std::int64_t>(p), j) - mx);
        ce.push_back(mx + std::log(denom) - out.logits.at(static_cast<std::int64_t>(p), targets[p]));
    }
    return ce;
}

// ---------------------------------------------------------------------------
// loss graphs
// ---------------------------------------------------------------------------

// J_RECON: adapters from the full context; the adapted LM reproduces the
// context from the <recon> command alone.
inline V build_recon_loss(Tape& tape, BackboneGraph& bg, HypernetGraph& hg,
                          const std::vector<TokenId>& ctx) {
    AdapterNodes gen = hg.build_generated(ctx);
    SupervisedSeq seq;
    seq.append_task_turn(Task::recon, ctx);
    return build_sequence_loss(tape, bg, &gen, seq);
}

// J_COMP: adapters from the truncated prefix; the target is the full context
// (seen prefix plus hidden suffix).
inline V build_comp_loss(Tape& tape, BackboneGraph& bg, HypernetGraph& hg,
                         const std::vector<TokenId>& full, const std::vector<TokenId>& prefix) {
    AdapterNodes gen = hg.build_generated(prefix);
    SupervisedSeq seq;
    seq.append_task_turn(Task::comp, full);
    return build_sequence_loss(tape, bg, &gen, seq);
}

// J_IFT for one (context, question, answer) item: adapters from the
// context; the question and answer sit in the chat template and only the
// answer tokens carry loss.
inline V build_ift_loss(Tape& tape, BackboneGraph& bg, HypernetGraph& hg,
                        const QAExample& ex, std::size_t turn) {
    if (turn >= ex.turns.size()) throw std::invalid_argument("ift loss: turn out of range");
    if (ex.turns[turn].answer.empty()) throw std::invalid_argument("ift loss: empty answer");
    AdapterNodes gen = hg.build_generated(ex.context.tokens);
    SupervisedSeq seq;
    seq.append_turn(Tokenizer::encode(ex.turns[turn].question), Tokenizer::encode(ex.turns[turn].answer), true);
    return build_sequence_loss(tape, bg, &gen, seq);
}

// One packed item: a single hypernetwork pass over the packed input, then
// supervision turns in the item's permuted order.
inline V build_packed_loss(Tape& tape, BackboneGraph& bg, HypernetGraph& hg,
                           const PackedItem& item, const std::vector<ContextDoc>& docs) {
    AdapterNodes gen = hg.build_generated(packed_input_tokens(item, docs));
    SupervisedSeq seq;
    for (std::size_t oi : item.order) {
        const PackedSegment& seg = item.segments[oi];
        std::vector<TokenId> content(docs[seg.doc].tokens.begin(),
                                     docs[seg.doc].tokens.begin() + seg.full_len);
        seq.append_task_turn(seg.task, content);
    }
    return build_sequence_loss(tape, bg, &gen, seq);
}

// ---------------------------------------------------------------------------
// plain-value evaluators
// ---------------------------------------------------------------------------

inline double recon_loss(const BackboneModel& model, const Hypernet& hn, const std::vector<TokenId>& ctx) {
    Tape tape;
    BackboneGraph bg(tape, model, false);
    HypernetGraph hg(tape, hn, bg, false);
    return tape.val(build_recon_loss(tape, bg, hg, ctx)).v[0];
}

struct CompLossResult {
    double value = 0.0;
    bool truncated = false;  // false: context < 10 tokens, fell back to reconstruction prompt
};

inline CompLossResult comp_loss(const BackboneModel& model, const Hypernet& hn,
                                const std::vector<TokenId>& ctx, Rng& rng) {
    Truncation tr = truncate_for_completion(ctx, rng);
    Tape tape;
    BackboneGraph bg(tape, model, false);
    HypernetGraph hg(tape, hn, bg, false);
    CompLossResult res;
    res.truncated = tr.applied;
    if (!tr.applied) {
        res.value = tape.val(build_recon_loss(tape, bg, hg, ctx)).v[0];
        return res;
    }
    res.value = tape.val(build_comp_loss(tape, bg, hg, ctx, tr.partial)).v[0];
    return res;
}

inline double ift_loss(const BackboneModel& model, const Hypernet& hn, const QAExample& ex, std::size_t turn) {
    Tape tape;
    BackboneGraph bg(tape, model, false);
    HypernetGraph hg(tape, hn, bg, false);
    return tape.val(build_ift_loss(tape, bg, hg, ex, turn)).v[0];
}

struct TotalLossResult {
    double total = 0.0;
    double recon = 0.0;
    double comp = 0.0;
};

// J_TOTAL = lambda * J_RECON + (1 - lambda) * J_COMP for one context and one
// truncation draw.
inline TotalLossResult total_loss(const BackboneModel& model, const Hypernet& hn,
                                  const std::vector<TokenId>& ctx, double lambda, Rng& rng) {
    TotalLossResult res;
    res.recon = recon_loss(model, hn, ctx);
    res.comp = comp_loss(model, hn, ctx, rng).value;
    res.total = lambda * res.recon + (1.0 - lambda) * res.comp;
    return res;
}

// ---------------------------------------------------------------------------
// optimizer
// ---------------------------------------------------------------------------

inline double clip_global_norm(std::map<std::string, Tensor>& grads, double max_norm) {
    double sq = 0.0;
    for (const auto& [name, g] : grads)
        for (double x : g.v) sq += x * x;
    const double norm = std::sqrt(sq);
    if (max_norm > 0.0 && norm > max_norm) {
        const double coef = max_norm / (norm + 1e-12);
        for (auto& [name, g] : grads)
            for (double& x : g.v) x *= coef;
    }
    return norm;
}

class AdamW {
public:
    AdamW(double beta1 = 0.9, double beta2 = 0.999, double eps = 1e-8, double weight_decay = 0.01)
        : beta1_(beta1), beta2_(beta2), eps_(eps), wd_(weight_decay) {}

    void step(std::map<std::string, Tensor>& params, const std::map<std::string, Tensor>& grads, double lr) {
        ++t_;
        const double bc1 = 1.0 - std::pow(beta1_, static_cast<double>(t_));
        const double bc2 = 1.0 - std::pow(beta2_, static_cast<double>(t_));
        for (auto& [name, p] : params) {
            auto git = grads.find(name);
            if (git == grads.end()) continue;
            const Tensor& g = git->second;
            Tensor& m = moment_(m_, name, p);
            Tensor& v = moment_(v_, name, p);
            if (m.v.size() != p.v.size() || g.v.size() != p.v.size())
                throw std::runtime_error("adamw: state size mismatch for " + name);
            for (std::size_t i = 0; i < p.v.size(); ++i) {
                m.v[i] = beta1_ * m.v[i] + (1.0 - beta1_) * g.v[i];
                v.v[i] = beta2_ * v.v[i] + (1.0 - beta2_) * g.v[i] * g.v[i];
                const double mhat = m.v[i] / bc1;
                const double vhat = v.v[i] / bc2;
                p.v[i] -= lr * (mhat / (std::sqrt(vhat) + eps_) + wd_ * p.v[i]);
            }
        }
    }

    std::int64_t t() const { return t_; }

    void save_state(ckpt::Store& store) const {
        for (const auto& [name, m] : m_) store.tensors["adam.m." + name] = m;
        for (const auto& [name, v] : v_) store.tensors["adam.v." + name] = v;
        store.scalars["adam.t"] = {static_cast<std::uint64_t>(t_)};
    }

    void load_state(const ckpt::Store& store) {
        m_.clear();
        v_.clear();
        for (const auto& [name, t] : store.tensors) {
            if (name.rfind("adam.m.", 0) == 0) m_[name.substr(7)] = t;
            else if (name.rfind("adam.v.", 0) == 0) v_[name.substr(7)] = t;
        }
        t_ = static_cast<std::int64_t>(store.scalar("adam.t"));
    }

private:
    Tensor& moment_(std::map<std::string, Tensor>& store, const std::string& name, const Tensor& like) {
        auto it = store.find(name);
        if (it == store.end()) it = store.emplace(name, Tensor(like.dims)).first;
        return it->second;
    }

    double beta1_, beta2_, eps_, wd_;
    std::int64_t t_ = 0;
    std::map<std::string, Tensor> m_, v_;
};

// Linear warmup to the peak, then linear decay; lr(0) = 0 and the final step
// sits near zero.
inline double lr_at(double peak, std::int64_t step, std::int64_t total, double warmup_frac) {
    if (total <= 0) return peak;
    const std::int64_t warmup = std::max<std::int64_t>(1, static_cast<std::int64_t>(warmup_frac * static_cast<double>(total)));
    if (step < warmup) return peak * static_cast<double>(step) / static_cast<double>(warmup);
    if (step >= total) return 0.0;
    return peak * static_cast<double>(total - step) / static_cast<double>(total - warmup);
}

// ---------------------------------------------------------------------------
// metrics log
// ---------------------------------------------------------------------------

class MetricsLog {
public:
    MetricsLog() = default;
    explicit MetricsLog(const std::string& path) {
        if (!path.empty()) {
            std::filesystem::create_directories(std::filesystem::path(path).parent_path());
            out_.open(path, std::ios::app);
            if (!out_) throw std::runtime_error("metrics log: cannot open " + path);
        }
    }

    void append(std::int64_t step, const std::string& stage, double loss, double lr) {
        if (!out_.is_open()) return;
        nlohmann::json j{{"step", step}, {"stage", stage}, {"loss", loss}, {"lr", lr}, {"ppl", std::exp(loss)}};
        out_ << j.dump() << "\n";
        out_.flush();
    }

private:
    std::ofstream out_;
};

// ---------------------------------------------------------------------------
// trainer
// ---------------------------------------------------------------------------

// rng stream ids for stateless derivation
namespace stream {
constexpr std::uint64_t kShuffle = 1;
constexpr std::uint64_t kPack = 2;
constexpr std::uint64_t kIft = 3;
constexpr std::uint64_t kBackboneLm = 4;
}  // namespace stream

struct TrainResult {
    std::vector<double> losses;       // per step
    std::int64_t final_step = 0;
};

// called after each applied optimization step with the step index just
// completed (0-based) and its loss
using StepCallback = std::function<void(std::int64_t, double)>;

class Trainer {
public:
    Trainer(const RunConfig& cfg, const BackboneModel& frozen_backbone, Hypernet& hypernet)
        : cfg_(cfg), bb_(frozen_backbone), hn_(hypernet),
          opt_(cfg.train.beta1, cfg.train.beta2, cfg.train.adam_eps, cfg.train.weight_decay) {
        cfg_.validate();
    }

    std::int64_t step() const { return step_; }
    AdamW& optimizer() { return opt_; }

    // One optimization step over a batch of packed items (pretraining) —
    // exposed for tests; the backbone is untouched by construction.
    double pretrain_step(const std::vector<PackedItem>& batch, const std::vector<ContextDoc>& docs) {
        return grad_step_([&](Tape& tape, BackboneGraph& bg, HypernetGraph& hg, std::size_t i) {
            return build_packed_loss(tape, bg, hg, batch[i], docs);
        }, batch.size());
    }

    double ift_step(const std::vector<std::pair<const QAExample*, std::size_t>>& batch) {
        return grad_step_([&](Tape& tape, BackboneGraph& bg, HypernetGraph& hg, std::size_t i) {
            return build_ift_loss(tape, bg, hg, *batch[i].first, batch[i].second);
        }, batch.size());
    }

    // Runs the configured stage. Checkpoints land under out_dir/ckpt_step_N
    // (plus out_dir/ckpt_final) when out_dir is non-empty.
    TrainResult train(const std::vector<ContextDoc>& docs, const std::vector<QAExample>& examples,
                      const std::string& out_dir = "", MetricsLog* log = nullptr,
                      const StepCallback& on_step = {}) {
        const bool pretrain = cfg_.train.stage == "pretrain";
        if (pretrain && docs.empty()) throw std::invalid_argument("train: pretraining needs documents");
        if (!pretrain && examples.empty()) throw std::invalid_argument("train: ift needs QA examples");

        // per-epoch batch schedules are derived from (seed, epoch) alone
        const std::int64_t total = total_steps_(docs, examples);
        TrainResult res;
        std::int64_t epoch = 0;
        std::int64_t pos = step_in_epochs_(docs, examples, step_, epoch);  // resume point

        while (step_ < total) {
            if (pretrain) {
                auto [order, items] = pretrain_epoch_(docs, epoch);
                const std::int64_t nb = batches_(items.size());
                for (; pos < nb && step_ < total; ++pos) {
                    std::vector<PackedItem> batch = slice_batch_(items, pos);
                    const double lr = lr_at(cfg_.train.lr, step_, total, cfg_.train.warmup_frac);
                    const double loss = step_with_lr_(batch, docs, lr);
                    after_step_(loss, lr, res, out_dir, log, on_step);
                }
            } else {
                auto pairs = ift_epoch_(examples, epoch);
                const std::int64_t nb = batches_(pairs.size());
                for (; pos < nb && step_ < total; ++pos) {
                    std::vector<std::pair<const QAExample*, std::size_t>> batch;
                    const std::size_t b0 = static_cast<std::size_t>(pos) * cfg_.train.batch_size;
                    for (std::size_t k = b0; k < std::min(pairs.size(), b0 + cfg_.train.batch_size); ++k)
                        batch.emplace_back(&examples[pairs[k].first], pairs[k].second);
                    const double lr = lr_at(cfg_.train.lr, step_, total, cfg_.train.warmup_frac);
                    const double loss = ift_step_with_lr_(batch, lr);
                    after_step_(loss, lr, res, out_dir, log, on_step);
                }
            }
            ++epoch;
            pos = 0;
            if (cfg_.train.max_steps == 0 && epoch >= cfg_.train.epochs) break;
        }
        res.final_step = step_;
        if (!out_dir.empty()) save_checkpoint(out_dir + "/ckpt_final");
        return res;
    }

    void save_checkpoint(const std::string& dir) const {
        hn_.save(dir + "/model");
        ckpt::Store store;
        opt_.save_state(store);
        store.scalars["step"] = {static_cast<std::uint64_t>(step_)};
        store.scalars["seed"] = {cfg_.train.seed};
        ckpt::save(dir + "/opt", store);
    }

    void load_checkpoint(const std::string& dir) {
        Hypernet loaded = Hypernet::load(dir + "/model", bb_.cfg);
        hn_.params = loaded.params;
        hn_.cfg = loaded.cfg;
        hn_.mem_len = loaded.mem_len;
        const ckpt::Store store = ckpt::load(dir + "/opt");
        opt_.load_state(store);
        step_ = static_cast<std::int64_t>(store.scalar("step"));
        if (store.scalar("seed") != cfg_.train.seed)
            throw std::runtime_error("resume: checkpoint seed differs from config seed; trajectories would diverge");
    }

private:
    template <class BuildFn>
    double grad_step_(const BuildFn& build, std::size_t batch_size) {
        if (batch_size == 0) throw std::invalid_argument("train: empty batch");
        std::map<std::string, Tensor> grads;
        double loss_sum = 0.0;
        const double inv = 1.0 / static_cast<double>(batch_size);
        for (std::size_t i = 0; i < batch_size; ++i) {
            Tape tape;
            BackboneGraph bg(tape, bb_, /*trainable=*/false);
            HypernetGraph hg(tape, hn_, bg, /*trainable=*/true);
            V loss = build(tape, bg, hg, i);
            tape.backward(loss);
            loss_sum += tape.val(loss).v[0];
            for (const auto& [name, leaf] : hg.leaves()) {
                Tensor g = tape.grad_of(leaf);
                auto it = grads.find(name);
                if (it == grads.end()) it = grads.emplace(name, Tensor(g.dims)).first;
                for (std::size_t k = 0; k < g.v.size(); ++k) it->second.v[k] += inv * g.v[k];
            }
        }
        pending_grads_ = std::move(grads);
        return loss_sum * inv;
    }

    double step_with_lr_(const std::vector<PackedItem>& batch, const std::vector<ContextDoc>& docs, double lr) {
        const double loss = pretrain_step(batch, docs);
        apply_grads_(lr);
        return loss;
    }

    double ift_step_with_lr_(const std::vector<std::pair<const QAExample*, std::size_t>>& batch, double lr) {
        const double loss = ift_step(batch);
        apply_grads_(lr);
        return loss;
    }

    void apply_grads_(double lr) {
        clip_global_norm(pending_grads_, cfg_.train.clip_norm);
        opt_.step(hn_.params, pending_grads_, lr);
        pending_grads_.clear();
        ++step_;
    }

    void after_step_(double loss, double lr, TrainResult& res, const std::string& out_dir, MetricsLog* log,
                     const StepCallback& on_step) {
        res.losses.push_back(loss);
        if (log) log->append(step_ - 1, cfg_.train.stage, loss, lr);
        if (!out_dir.empty() && cfg_.train.ckpt_interval > 0 && step_ % cfg_.train.ckpt_interval == 0)
            save_checkpoint(out_dir + "/ckpt_step_" + std::to_string(step_));
        if (on_step) on_step(step_ - 1, loss);
    }

    std::int64_t batches_(std::size_t items) const {
        return static_cast<std::int64_t>((items + cfg_.train.batch_size - 1) / cfg_.train.batch_size);
    }

    std::vector<PackedItem> slice_batch_(const std::vector<PackedItem>& items, std::int64_t b) const {
        std::vector<PackedItem> out;
        const std::size_t b0 = static_cast<std::size_t>(b) * cfg_.train.batch_size;
        for (std::size_t k = b0; k < std::min(items.size(), b0 + cfg_.train.batch_size); ++k)
            out.push_back(items[k]);
        return out;
    }

    // epoch schedule: shuffle doc order then pack; both draws derive from
    // (seed, epoch) so any step can be replayed
    std::pair<std::vector<std::size_t>, std::vector<PackedItem>> pretrain_epoch_(
        const std::vector<ContextDoc>& docs, std::int64_t epoch) const {
        Rng shuffle_rng = Rng::derive(cfg_.train.seed, stream::kShuffle, static_cast<std::uint64_t>(epoch));
        std::vector<std::size_t> order = shuffle_rng.permutation(docs.size());
        std::vector<ContextDoc> shuffled;
        shuffled.reserve(docs.size());
        for (std::size_t i : order) shuffled.push_back(docs[i]);
        Rng pack_rng = Rng::derive(cfg_.train.seed, stream::kPack, static_cast<std::uint64_t>(epoch));
        PackResult pr = pack_contexts(shuffled, cfg_.train.max_context_len, pack_rng, cfg_.train.lambda);
        // remap segment doc indices back to the caller's doc list
        for (auto& item : pr.items)
            for (auto& seg : item.segments) seg.doc = order[seg.doc];
        return {std::move(order), std::move(pr.items)};
    }

    std::vector<std::pair<std::size_t, std::size_t>> ift_epoch_(const std::vector<QAExample>& examples,
                                                                std::int64_t epoch) const {
        std::vector<std::pair<std::size_t, std::size_t>> pairs;
        for (std::size_t e = 0; e < examples.size(); ++e)
            for (std::size_t t = 0; t < examples[e].turns.size(); ++t) pairs.emplace_back(e, t);
        Rng rng = Rng::derive(cfg_.train.seed, stream::kIft, static_cast<std::uint64_t>(epoch));
        rng.shuffle(pairs);
        return pairs;
    }

    std::int64_t total_steps_(const std::vector<ContextDoc>& docs, const std::vector<QAExample>& examples) const {
        if (cfg_.train.max_steps > 0) return cfg_.train.max_steps;
        std::int64_t total = 0;
        for (std::int64_t e = 0; e < cfg_.train.epochs; ++e) {
            if (cfg_.train.stage == "pretrain") total += batches_(pretrain_epoch_(docs, e).second.size());
            else total += batches_(ift_epoch_(examples, e).size());
        }
        return total;
    }

    // locate the (epoch, batch) position of `step` by replaying epoch sizes
    std::int64_t step_in_epochs_(const std::vector<ContextDoc>& docs, const std::vector<QAExample>& examples,
                                 std::int64_t step, std::int64_t& epoch_out) const {
        std::int64_t remaining = step;
        std::int64_t epoch = 0;
        for (;;) {
            const std::int64_t nb = cfg_.train.stage == "pretrain"
                                        ? batches_(pretrain_epoch_(docs, epoch).second.size())
                                        : batches_(ift_epoch_(examples, epoch).size());
            if (remaining < nb) break;
            remaining -= nb;
            ++epoch;
        }
        epoch_out = epoch;
        return remaining;
    }

    RunConfig cfg_;
    const BackboneModel& bb_;
    Hypernet& hn_;
    AdamW opt_;
    std::int64_t step_ = 0;
    std::map<std::string, Tensor> pending_grads_;
};

// ---------------------------------------------------------------------------
// backbone language-model warmup: the hypernetwork adapts a *pretrained*
// LM, so the toy stand-in gets a short LM fit on the corpus (including
// in-context QA sequences) before freezing
// ---------------------------------------------------------------------------

inline std::vector<std::vector<TokenId>> backbone_lm_sequences(const std::vector<ContextDoc>& docs,
                                                               const std::vector<QAExample>& examples) {
    std::vector<std::vector<TokenId>> seqs;
    for (const auto& d : docs) seqs.push_back(d.tokens);
    for (const auto& ex : examples) {
        std::vector<TokenId> s = ex.context.tokens;
        s.push_back(Tokenizer::kEot);
        for (const auto& t : ex.turns) {
            s.push_back(Tokenizer::kUser);
            const auto q = Tokenizer::encode(t.question);
            s.insert(s.end(), q.begin(), q.end());
            s.push_back(Tokenizer::kAssistant);
            const auto a = Tokenizer::encode(t.answer);
            s.insert(s.end(), a.begin(), a.end());
            s.push_back(Tokenizer::kEot);
        }
        seqs.push_back(std::move(s));
    }
    return seqs;
}

inline void pretrain_backbone_lm(BackboneModel& model, const std::vector<ContextDoc>& docs,
                                 const std::vector<QAExample>& examples, const TrainConfig& tc,
                                 MetricsLog* log = nullptr) {
    if (tc.backbone_steps <= 0) return;
    const auto seqs = backbone_lm_sequences(docs, examples);
    if (seqs.empty()) throw std::invalid_argument("pretrain_backbone_lm: no sequences");
    AdamW opt(tc.beta1, tc.beta2, tc.adam_eps, tc.weight_decay);
    for (std::int64_t step = 0; step < tc.backbone_steps; ++step) {
        Rng rng = Rng::derive(tc.seed, stream::kBackboneLm, static_cast<std::uint64_t>(step));
        std::map<std::string, Tensor> grads;
        double loss_sum = 0.0;
        const double inv = 1.0 / static_cast<double>(tc.batch_size);
        for (std::int64_t b = 0; b < tc.batch_size; ++b) {
            const auto& seq = seqs[rng.below(seqs.size())];
            Tape tape;
            BackboneGraph bg(tape, model, /*trainable=*/true);
            ForwardResult fr = bg.forward_tokens(seq, nullptr, false);
            std::vector<std::int32_t> targets(seq.size(), 0);
            std::vector<std::uint8_t> on(seq.size(), 0);
            for (std::size_t p = 0; p + 1 < seq.size(); ++p) {
                targets[p] = seq[p + 1];
                on[p] = 1;
            }
            V loss = tape.cross_entropy_mean(fr.logits, targets, on);
            tape.backward(loss);
            loss_sum += tape.val(loss).v[0];
            for (const auto& [name, leaf] : bg.leaves()) {
                Tensor g = tape.grad_of(leaf);
                auto it = grads.find(name);
                if (it == grads.end()) it = grads.emplace(name, Tensor(g.dims)).first;
                for (std::size_t k = 0; k < g.v.size(); ++k) it->second.v[k] += inv * g.v[k];
            }
        }
        clip_global_norm(grads, tc.clip_norm);
        const double lr = lr_at(tc.backbone_lr, step, tc.backbone_steps, tc.warmup_frac);
        opt.step(model.params, grads, lr);
        if (log) log->append(step, "backbone_lm", loss_sum * inv, lr);
    }
}

}  // namespace shine
