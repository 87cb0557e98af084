// Command-line entry point: synthetic data generation, backbone warmup +
// hypernetwork pretraining, instruction fine-tuning, LoRA generation,
// answering, the four-way evaluation harness, and the analytic cost report.
//
// Exit codes: 0 success, 1 runtime failure, 2 usage error.

#include <CLI11.hpp>

#include <filesystem>
#include <fstream>
#include <iostream>

#include "shine/backbone.hpp"
#include "shine/config.hpp"
#include "shine/corpus.hpp"
#include "shine/costmodel.hpp"
#include "shine/eval.hpp"
#include "shine/hypernet.hpp"
#include "shine/tokenizer.hpp"
#include "shine/training.hpp"

namespace fs = std::filesystem;
using namespace shine;

namespace {

void write_text(const std::string& path, const std::string& body) {
    fs::create_directories(fs::path(path).parent_path());
    std::ofstream out(path);
    if (!out) throw std::runtime_error("cannot write " + path);
    out << body;
}

// Lenient load for QA-consuming commands: skips malformed or no-answer
// records and reports them on stderr with their line numbers.
Dataset load_dataset_lenient(const std::string& path) {
    Dataset ds = load_dataset(path, /*lenient=*/true);
    for (const auto& d : ds.diagnostics) std::cerr << "dataset: skipped " << d.message << "\n";
    return ds;
}

struct CommonTrainArgs {
    std::string config_path;
    std::string data_path;
    std::string out_dir;
    RunConfig overrides;  // merged over file values when flags are present
};

RunConfig resolve_config(CLI::App* cmd, const std::string& config_path, const RunConfig& flag_values) {
    RunConfig cfg = config_path.empty() ? RunConfig{} : load_run_config(config_path);
    auto touched = [&](const std::string& name) { return cmd->count(name) > 0; };
    if (touched("--seed")) { cfg.seed = flag_values.seed; cfg.train.seed = flag_values.seed; }
    if (touched("--steps")) cfg.train.max_steps = flag_values.train.max_steps;
    if (touched("--epochs")) cfg.train.epochs = flag_values.train.epochs;
    if (touched("--batch")) cfg.train.batch_size = flag_values.train.batch_size;
    if (touched("--lr")) cfg.train.lr = flag_values.train.lr;
    if (touched("--lambda")) cfg.train.lambda = flag_values.train.lambda;
    if (touched("--max-context")) cfg.train.max_context_len = flag_values.train.max_context_len;
    if (touched("--warmup")) cfg.train.warmup_frac = flag_values.train.warmup_frac;
    if (touched("--ckpt-interval")) cfg.train.ckpt_interval = flag_values.train.ckpt_interval;
    if (touched("--backbone-steps")) cfg.train.backbone_steps = flag_values.train.backbone_steps;
    if (touched("--backbone-lr")) cfg.train.backbone_lr = flag_values.train.backbone_lr;
    if (touched("--r-gen")) cfg.hypernet.r_gen = flag_values.hypernet.r_gen;
    if (touched("--r-meta")) cfg.hypernet.r_meta = flag_values.hypernet.r_meta;
    if (touched("--m2p-layers")) cfg.hypernet.m2p_layers = flag_values.hypernet.m2p_layers;
    if (touched("--mode")) cfg.hypernet.mode = flag_values.hypernet.mode;
    if (touched("--coupling")) cfg.hypernet.coupling = flag_values.hypernet.coupling;
    if (touched("--hidden")) cfg.backbone.hidden = flag_values.backbone.hidden;
    if (touched("--layers")) cfg.backbone.layers = flag_values.backbone.layers;
    if (touched("--heads")) cfg.backbone.heads = flag_values.backbone.heads;
    if (touched("--vocab")) cfg.backbone.vocab = flag_values.backbone.vocab;
    if (touched("--max-pos")) cfg.backbone.max_pos = flag_values.backbone.max_pos;
    return cfg;
}

void add_train_flags(CLI::App* cmd, CommonTrainArgs& args) {
    cmd->add_option("--config", args.config_path, "run config JSON (flags override file values)");
    cmd->add_option("--data", args.data_path, "dataset JSONL")->required();
    cmd->add_option("--out", args.out_dir, "output run directory")->required();
    cmd->add_option("--seed", args.overrides.seed, "global seed");
    cmd->add_option("--steps", args.overrides.train.max_steps, "max optimization steps (0: epoch-driven)");
    cmd->add_option("--epochs", args.overrides.train.epochs, "training epochs");
    cmd->add_option("--batch", args.overrides.train.batch_size, "batch size");
    cmd->add_option("--lr", args.overrides.train.lr, "peak learning rate");
    cmd->add_option("--lambda", args.overrides.train.lambda, "reconstruction weight in [0,1]");
    cmd->add_option("--max-context", args.overrides.train.max_context_len, "max packed context tokens");
    cmd->add_option("--warmup", args.overrides.train.warmup_frac, "warmup fraction");
    cmd->add_option("--ckpt-interval", args.overrides.train.ckpt_interval, "checkpoint every N steps");
    cmd->add_option("--backbone-steps", args.overrides.train.backbone_steps, "backbone LM warmup steps");
    cmd->add_option("--backbone-lr", args.overrides.train.backbone_lr, "backbone LM warmup lr");
    cmd->add_option("--r-gen", args.overrides.hypernet.r_gen, "generated LoRA rank");
    cmd->add_option("--r-meta", args.overrides.hypernet.r_meta, "meta LoRA rank");
    cmd->add_option("--m2p-layers", args.overrides.hypernet.m2p_layers, "M2P transformer depth (even)");
    cmd->add_option_function<std::string>("--mode",
        [&args](const std::string& s) { args.overrides.hypernet.mode = reshape_mode_from_string(s); },
        "reshape mode rl|rr|lr|ll");
    cmd->add_option_function<std::string>("--coupling",
        [&args](const std::string& s) { args.overrides.hypernet.coupling = CouplingSpec::from_string(s); },
        "coupled attention off|full|mixed:<k>");
    cmd->add_option("--hidden", args.overrides.backbone.hidden, "backbone hidden width");
    cmd->add_option("--layers", args.overrides.backbone.layers, "backbone layers");
    cmd->add_option("--heads", args.overrides.backbone.heads, "backbone attention heads");
    cmd->add_option("--vocab", args.overrides.backbone.vocab, "vocabulary size");
    cmd->add_option("--max-pos", args.overrides.backbone.max_pos, "max sequence length");
}

int cmd_synth_data(const std::string& out_dir, std::int64_t num_docs, std::int64_t min_len,
                   std::int64_t max_len, std::int64_t turns, std::uint64_t seed,
                   const std::string& profile) {
    CorpusSpec spec;
    spec.num_docs = num_docs;
    spec.min_len = min_len;
    spec.max_len = max_len;
    spec.qa_turns = turns;
    spec.vocab_profile = profile;
    Corpus corpus = gen_synthetic_corpus(spec, seed);
    fs::create_directories(out_dir);
    save_dataset(out_dir + "/dataset.jsonl", corpus.examples);
    write_text(out_dir + "/tokenizer.json", Tokenizer::manifest_json());
    nlohmann::json j{{"num_docs", num_docs}, {"min_len", min_len}, {"max_len", max_len},
                     {"qa_turns", turns},    {"seed", seed},       {"vocab_profile", profile}};
    write_text(out_dir + "/synth_config.json", j.dump(2) + "\n");
    std::cout << "wrote " << corpus.docs.size() << " documents with QA to " << out_dir << "/dataset.jsonl\n";
    return 0;
}

int cmd_pretrain(CLI::App* cmd, const CommonTrainArgs& args, const std::string& backbone_ckpt,
                 const std::string& resume) {
    RunConfig cfg = resolve_config(cmd, args.config_path, args.overrides);
    cfg.train.stage = "pretrain";
    cfg.data_path = args.data_path;
    cfg.out_dir = args.out_dir;
    cfg.validate();

    Dataset ds = load_dataset(args.data_path);
    if (ds.docs.empty()) throw std::runtime_error("pretrain: dataset has no documents");

    fs::create_directories(args.out_dir);
    save_run_config(args.out_dir + "/config.json", cfg);
    write_text(args.out_dir + "/tokenizer.json", Tokenizer::manifest_json());
    MetricsLog log(args.out_dir + "/metrics.jsonl");

    BackboneModel backbone;
    if (!backbone_ckpt.empty()) {
        backbone = BackboneModel::load(backbone_ckpt);
        std::cout << "loaded backbone from " << backbone_ckpt << "\n";
    } else {
        Rng rng = Rng::derive(cfg.seed, 100);
        backbone = BackboneModel::init(cfg.backbone, rng);
        std::cout << "backbone warmup: " << cfg.train.backbone_steps << " LM steps\n";
        pretrain_backbone_lm(backbone, ds.docs, ds.examples, cfg.train, &log);
    }
    backbone.save(args.out_dir + "/backbone");

    Rng hrng = Rng::derive(cfg.seed, 101);
    Hypernet hyper = Hypernet::init(backbone.cfg, cfg.hypernet, hrng);
    Trainer trainer(cfg, backbone, hyper);
    if (!resume.empty()) {
        trainer.load_checkpoint(resume);
        std::cout << "resumed from " << resume << " at step " << trainer.step() << "\n";
    }
    TrainResult res = trainer.train(ds.docs, ds.examples, args.out_dir, &log);
    std::cout << "pretraining done: " << res.final_step << " steps, final loss "
              << (res.losses.empty() ? 0.0 : res.losses.back()) << "\n";
    return 0;
}

int cmd_ift(CLI::App* cmd, const CommonTrainArgs& args, const std::string& run_dir,
            const std::string& hypernet_ckpt) {
    RunConfig cfg = resolve_config(cmd, args.config_path.empty() && fs::exists(run_dir + "/config.json")
                                            ? run_dir + "/config.json"
                                            : args.config_path,
                                   args.overrides);
    cfg.train.stage = "ift";
    if (cmd->count("--lr") == 0) cfg.train.lr = 3e-5;  // stage default
    cfg.data_path = args.data_path;
    cfg.out_dir = args.out_dir;

    Dataset ds = load_dataset_lenient(args.data_path);
    if (ds.examples.empty()) throw std::runtime_error("ift: dataset has no QA examples");

    BackboneModel backbone = BackboneModel::load(run_dir + "/backbone");
    const std::string hn_path = hypernet_ckpt.empty() ? run_dir + "/ckpt_final/model" : hypernet_ckpt;
    Hypernet hyper = Hypernet::load(hn_path, backbone.cfg);
    cfg.hypernet = hyper.cfg;
    cfg.backbone = backbone.cfg;
    cfg.validate();

    fs::create_directories(args.out_dir);
    save_run_config(args.out_dir + "/config.json", cfg);
    write_text(args.out_dir + "/tokenizer.json", Tokenizer::manifest_json());
    if (fs::absolute(args.out_dir) != fs::absolute(run_dir)) backbone.save(args.out_dir + "/backbone");
    MetricsLog log(args.out_dir + "/metrics.jsonl");

    Trainer trainer(cfg, backbone, hyper);
    TrainResult res = trainer.train(ds.docs, ds.examples, args.out_dir, &log);
    std::cout << "ift done: " << res.final_step << " steps, final loss "
              << (res.losses.empty() ? 0.0 : res.losses.back()) << "\n";
    return 0;
}

int cmd_gen_lora(const std::string& run_dir, const std::string& ckpt, const std::string& context_file,
                 const std::string& out_dir) {
    BackboneModel backbone = BackboneModel::load(run_dir + "/backbone");
    const std::string hn_path = ckpt.empty() ? run_dir + "/ckpt_final/model" : ckpt;
    Hypernet hyper = Hypernet::load(hn_path, backbone.cfg);

    std::ifstream in(context_file);
    if (!in) throw std::runtime_error("gen-lora: cannot open " + context_file);
    std::string text((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    while (!text.empty() && (text.back() == '\n' || text.back() == '\r')) text.pop_back();
    if (text.empty()) throw std::runtime_error("gen-lora: empty context file");

    const auto ctx = Tokenizer::encode(text);
    AdapterSet set = generate_lora(backbone, hyper, ctx);
    save_adapters(out_dir, set);
    nlohmann::json j{{"run", run_dir}, {"context_file", context_file},
                     {"context_tokens", ctx.size()}, {"rank", set.rank}};
    write_text(out_dir + "/gen_config.json", j.dump(2) + "\n");
    std::cout << "wrote generated adapter set (rank " << set.rank << ", "
              << set.pairs.size() << " targets) to " << out_dir << "\n";
    return 0;
}

int cmd_answer(const std::string& run_dir, const std::string& adapters_dir, const std::string& question,
               std::int64_t max_new) {
    BackboneModel backbone = BackboneModel::load(run_dir + "/backbone");
    AdapterSet set = load_adapters(adapters_dir);
    std::vector<TokenId> input{Tokenizer::kUser};
    const auto q = Tokenizer::encode(question);
    input.insert(input.end(), q.begin(), q.end());
    input.push_back(Tokenizer::kAssistant);
    const auto out = generate(backbone, input, &set, max_new,
                              {Tokenizer::kEot, Tokenizer::kUser, Tokenizer::kAssistant});
    std::cout << Tokenizer::decode(out) << "\n";
    return 0;
}

int cmd_eval(const std::string& run_dir, const std::string& ckpt, const std::string& data_path,
             const std::string& out_dir, const std::string& methods_csv, std::int64_t sft_epochs,
             std::int64_t sft_turns, double sft_lr, std::int64_t max_new, std::uint64_t seed) {
    BackboneModel backbone = BackboneModel::load(run_dir + "/backbone");
    const std::string hn_path = ckpt.empty() ? run_dir + "/ckpt_final/model" : ckpt;
    Hypernet hyper = Hypernet::load(hn_path, backbone.cfg);
    Dataset ds = load_dataset_lenient(data_path);
    if (ds.examples.empty()) throw std::runtime_error("eval: dataset has no QA examples");

    std::vector<EvalMethod> methods;
    {
        std::stringstream ss(methods_csv);
        std::string tok;
        while (std::getline(ss, tok, ','))
            if (!tok.empty()) methods.push_back(eval_method_from_string(tok));
    }
    if (methods.empty()) throw std::runtime_error("eval: no methods selected");

    fs::create_directories(out_dir);
    std::ofstream results(out_dir + "/results.jsonl");
    if (!results) throw std::runtime_error("eval: cannot write results to " + out_dir);

    std::vector<EvalRow> all_rows;
    double recon_ppl_sum = 0.0;
    std::int64_t recon_ppl_n = 0;
    for (const auto& ex : ds.examples) {
        for (EvalMethod m : methods) {
            AdapterSet assets;
            const AdapterSet* ad = nullptr;
            if (m == EvalMethod::shine) {
                assets = generate_lora(backbone, hyper, ex.context.tokens);
                ad = &assets;
                const std::vector<TokenId> recon_prompt{Tokenizer::kUser, Tokenizer::kRecon, Tokenizer::kAssistant};
                recon_ppl_sum += perplexity(backbone, &assets, recon_prompt, ex.context.tokens);
                recon_ppl_n += 1;
            } else if (m == EvalMethod::sft) {
                SftBaselineConfig sc;
                sc.rank = hyper.cfg.r_gen;  // matching the generated rank
                sc.epochs = sft_epochs;
                sc.turns_used = std::min<std::int64_t>(sft_turns, static_cast<std::int64_t>(ex.turns.size()));
                if (sc.turns_used < sft_turns)
                    std::cerr << "eval: example " << ex.context.id << " has only " << ex.turns.size()
                              << " turns; sft uses " << sc.turns_used << "\n";
                sc.lr = sft_lr;
                sc.seed = seed;
                assets = sft_baseline(backbone, ex, sc);
                ad = &assets;
            }
            for (const auto& row : run_conversation(backbone, m, ex, ad, max_new)) {
                all_rows.push_back(row);
                nlohmann::json j{{"example", row.example_id}, {"method", eval_method_name(row.method)},
                                 {"turn", row.turn},          {"prediction", row.prediction},
                                 {"gold", row.gold},          {"f1", row.f1},
                                 {"saw_context", row.saw_context}};
                results << j.dump() << "\n";
            }
        }
    }
    results.close();

    const auto aggs = aggregate_results(all_rows);
    std::size_t max_turns = 0;
    for (const auto& a : aggs) max_turns = std::max(max_turns, a.turn_mean_f1.size());

    // summary table
    std::cout << "method       mean_F1";
    for (std::size_t t = 0; t < max_turns; ++t) std::cout << "  turn" << t;
    std::cout << "\n";
    char buf[64];
    for (const auto& a : aggs) {
        std::snprintf(buf, sizeof buf, "%-12s %7.4f", eval_method_name(a.method), a.mean_f1);
        std::cout << buf;
        for (std::size_t t = 0; t < max_turns; ++t) {
            if (t < a.turn_mean_f1.size()) std::snprintf(buf, sizeof buf, " %6.4f", a.turn_mean_f1[t]);
            else std::snprintf(buf, sizeof buf, "      -");
            std::cout << buf;
        }
        std::cout << "\n";
    }
    if (recon_ppl_n > 0)
        std::cout << "shine reconstruction ppl (mean over contexts): "
                  << recon_ppl_sum / static_cast<double>(recon_ppl_n) << "\n";

    // plot data: turn index vs mean F1 per method
    {
        std::ofstream plot(out_dir + "/plot_f1_by_turn.csv");
        plot << "turn";
        for (const auto& a : aggs) plot << "," << eval_method_name(a.method);
        plot << "\n";
        for (std::size_t t = 0; t < max_turns; ++t) {
            plot << t;
            for (const auto& a : aggs) {
                plot << ",";
                if (t < a.turn_mean_f1.size()) plot << a.turn_mean_f1[t];
            }
            plot << "\n";
        }
    }
    nlohmann::json cfgj{{"run", run_dir},       {"data", data_path},   {"methods", methods_csv},
                        {"sft_epochs", sft_epochs}, {"sft_turns", sft_turns}, {"sft_lr", sft_lr},
                        {"max_new", max_new},   {"seed", seed}};
    write_text(out_dir + "/eval_config.json", cfgj.dump(2) + "\n");
    return 0;
}

int cmd_cost(const cost::CostInputs& in, const std::string& out_file) {
    const cost::CostReport rep = cost_report(in);
    std::cout << "inputs: H=" << in.h << " L=" << in.l << " V=" << in.v << " L'=" << in.lp
              << " r=" << in.r << " C=" << in.c << " I=" << in.i << " T=" << in.t
              << "  (M=" << rep.memory_tokens << ")\n";
    std::cout << "method       amortizable_flops  gen_flops_no_kv  gen_flops_kv  mem_eff  mem_std  mem_kv\n";
    char buf[160];
    for (const auto& m : rep.methods) {
        std::snprintf(buf, sizeof buf, "%-12s %18llu %16llu %13llu %8llu %8llu %7llu\n",
                      cost::method_name(m.method),
                      static_cast<unsigned long long>(m.amortized),
                      static_cast<unsigned long long>(m.gen_no_kv),
                      static_cast<unsigned long long>(m.gen_kv),
                      static_cast<unsigned long long>(m.mem_efficient),
                      static_cast<unsigned long long>(m.mem_standard),
                      static_cast<unsigned long long>(m.mem_kv_cache));
        std::cout << buf;
    }
    if (!out_file.empty()) {
        nlohmann::json j;
        j["inputs"] = {{"H", in.h}, {"L", in.l}, {"V", in.v}, {"Lp", in.lp},
                       {"r", in.r}, {"C", in.c}, {"I", in.i}, {"T", in.t}};
        j["memory_tokens"] = rep.memory_tokens;
        j["methods"] = nlohmann::json::array();
        for (const auto& m : rep.methods)
            j["methods"].push_back({{"method", cost::method_name(m.method)},
                                    {"amortizable_flops", m.amortized},
                                    {"generation_flops_no_kv", m.gen_no_kv},
                                    {"generation_flops_kv", m.gen_kv},
                                    {"peak_memory_efficient", m.mem_efficient},
                                    {"peak_memory_standard_attention", m.mem_standard},
                                    {"peak_memory_kv_cache", m.mem_kv_cache}});
        write_text(out_file, j.dump(2) + "\n");
        std::cout << "report written to " << out_file << "\n";
    }
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"SHINE: context-to-LoRA hypernetwork (toy scale)"};
    app.require_subcommand(1);

    // synth-data
    auto* synth = app.add_subcommand("synth-data", "generate a synthetic key-value QA corpus");
    std::string synth_out, synth_profile = "words";
    std::int64_t synth_docs = 8, synth_min = 20, synth_max = 60, synth_turns = 3;
    std::uint64_t synth_seed = 1;
    synth->add_option("--out", synth_out, "output directory")->required();
    synth->add_option("--num-docs", synth_docs, "number of documents");
    synth->add_option("--min-len", synth_min, "min document tokens");
    synth->add_option("--max-len", synth_max, "max document tokens");
    synth->add_option("--turns", synth_turns, "QA turns per document");
    synth->add_option("--seed", synth_seed, "generator seed");
    synth->add_option("--profile", synth_profile, "vocab profile: words|bytes");

    // pretrain
    auto* pre = app.add_subcommand("pretrain", "backbone warmup + hypernetwork pretraining");
    CommonTrainArgs pre_args;
    std::string pre_backbone, pre_resume;
    add_train_flags(pre, pre_args);
    pre->add_option("--backbone-ckpt", pre_backbone, "reuse an existing backbone checkpoint");
    pre->add_option("--resume", pre_resume, "resume from a training checkpoint directory");

    // ift
    auto* ift = app.add_subcommand("ift", "instruction fine-tuning of a pretrained hypernetwork");
    CommonTrainArgs ift_args;
    std::string ift_run, ift_ckpt;
    add_train_flags(ift, ift_args);
    ift->add_option("--run", ift_run, "pretraining run directory")->required();
    ift->add_option("--ckpt", ift_ckpt, "hypernet checkpoint (default: <run>/ckpt_final/model)");

    // gen-lora
    auto* gen = app.add_subcommand("gen-lora", "compress a context file into a LoRA adapter checkpoint");
    std::string gen_run, gen_ckpt, gen_ctx, gen_out;
    gen->add_option("--run", gen_run, "run directory")->required();
    gen->add_option("--ckpt", gen_ckpt, "hypernet checkpoint override");
    gen->add_option("--context-file", gen_ctx, "text file with the context")->required();
    gen->add_option("--out", gen_out, "adapter checkpoint directory")->required();

    // answer
    auto* ans = app.add_subcommand("answer", "answer a question with a generated adapter (no context)");
    std::string ans_run, ans_adapters, ans_question;
    std::int64_t ans_max_new = 32;
    ans->add_option("--run", ans_run, "run directory")->required();
    ans->add_option("--adapters", ans_adapters, "adapter checkpoint directory")->required();
    ans->add_option("--question", ans_question, "question text")->required();
    ans->add_option("--max-new", ans_max_new, "max generated tokens");

    // eval
    auto* ev = app.add_subcommand("eval", "multi-turn QA evaluation across methods");
    std::string ev_run, ev_ckpt, ev_data, ev_out, ev_methods = "naive,in_context,sft,shine";
    std::int64_t ev_sft_epochs = 10, ev_sft_turns = 5, ev_max_new = 32;
    double ev_sft_lr = 5e-3;
    std::uint64_t ev_seed = 1;
    ev->add_option("--run", ev_run, "run directory")->required();
    ev->add_option("--ckpt", ev_ckpt, "hypernet checkpoint override");
    ev->add_option("--data", ev_data, "dataset JSONL")->required();
    ev->add_option("--out", ev_out, "output directory")->required();
    ev->add_option("--methods", ev_methods, "comma list: naive,in_context,sft,shine");
    ev->add_option("--sft-epochs", ev_sft_epochs, "SFT baseline epochs");
    ev->add_option("--sft-turns", ev_sft_turns, "QA turns used by the SFT baseline");
    ev->add_option("--sft-lr", ev_sft_lr, "SFT baseline learning rate");
    ev->add_option("--max-new", ev_max_new, "max generated tokens per answer");
    ev->add_option("--seed", ev_seed, "baseline seed");

    // cost
    auto* cost_cmd = app.add_subcommand("cost", "analytic FLOPs and peak-memory report");
    cost::CostInputs ci;
    std::string cost_out;
    cost_cmd->add_option("--H", ci.h, "hidden width");
    cost_cmd->add_option("--L", ci.l, "backbone layers");
    cost_cmd->add_option("--V", ci.v, "vocabulary size");
    cost_cmd->add_option("--Lp", ci.lp, "M2P depth");
    cost_cmd->add_option("--r", ci.r, "generated LoRA rank");
    cost_cmd->add_option("--C", ci.c, "context tokens");
    cost_cmd->add_option("--I", ci.i, "generation input tokens");
    cost_cmd->add_option("--T", ci.t, "SFT iterations");
    cost_cmd->add_option("--out", cost_out, "machine-readable report path");

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::CallForAllHelp& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        app.exit(e);
        return 2;
    }

    try {
        if (synth->parsed())
            return cmd_synth_data(synth_out, synth_docs, synth_min, synth_max, synth_turns, synth_seed,
                                  synth_profile);
        if (pre->parsed()) return cmd_pretrain(pre, pre_args, pre_backbone, pre_resume);
        if (ift->parsed()) return cmd_ift(ift, ift_args, ift_run, ift_ckpt);
        if (gen->parsed()) return cmd_gen_lora(gen_run, gen_ckpt, gen_ctx, gen_out);
        if (ans->parsed()) return cmd_answer(ans_run, ans_adapters, ans_question, ans_max_new);
        if (ev->parsed())
            return cmd_eval(ev_run, ev_ckpt, ev_data, ev_out, ev_methods, ev_sft_epochs, ev_sft_turns,
                            ev_sft_lr, ev_max_new, ev_seed);
        if (cost_cmd->parsed()) return cmd_cost(ci, cost_out);
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
    return 2;
}
