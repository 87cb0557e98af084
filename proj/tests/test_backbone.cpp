#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <filesystem>

#include "shine/backbone.hpp"

using namespace shine;

namespace {

BackboneConfig toy_cfg() {
    BackboneConfig c;
    c.layers = 3;
    c.hidden = 32;
    c.heads = 4;
    c.vocab = 300;
    c.max_pos = 64;
    return c;
}

}  // namespace

TEST_CASE("config invariants") {
    BackboneConfig c;  // toy defaults: L=4, H=64, heads=4, V=512
    c.validate();
    CHECK(c.kv_width() == 16);
    CHECK(c.mlp_inner() == 192);
    CHECK(c.kv_heads() == 1);
    CHECK(layer_targets(c).size() == 7);

    BackboneConfig bad = c;
    bad.heads = 3;
    CHECK_THROWS(bad.validate());
    bad = c;
    bad.vocab = 100;  // cannot hold the reserved control ids
    CHECK_THROWS(bad.validate());
}

TEST_CASE("logits shape and hidden capture") {
    Rng rng(1);
    BackboneModel m = BackboneModel::init(toy_cfg(), rng);
    const auto tokens = Tokenizer::encode("kalo is vopa.");
    LmOutput out = forward_lm(m, tokens, nullptr, true);
    CHECK(out.logits.dims[0] == static_cast<std::int64_t>(tokens.size()));
    CHECK(out.logits.dims[1] == m.cfg.vocab);
    REQUIRE(out.hidden.size() == static_cast<std::size_t>(m.cfg.layers));
    for (const auto& h : out.hidden) {
        CHECK(h.dims[0] == static_cast<std::int64_t>(tokens.size()));
        CHECK(h.dims[1] == m.cfg.hidden);
    }
    CHECK(out.logits.all_finite());

    std::vector<TokenId> too_long(m.cfg.max_pos + 1, 5);
    CHECK_THROWS(forward_lm(m, too_long));
}

TEST_CASE("causality: prefix logits unchanged by appended or perturbed suffix") {
    Rng rng(2);
    BackboneModel m = BackboneModel::init(toy_cfg(), rng);
    auto tokens = Tokenizer::encode("mira is zunu. kalo is vopa.");
    const std::int64_t n = 10;
    std::vector<TokenId> prefix(tokens.begin(), tokens.begin() + n);

    const Tensor full = forward_lm(m, tokens).logits;
    const Tensor pre = forward_lm(m, prefix).logits;
    double drift = 0.0;
    for (std::int64_t p = 0; p < n; ++p)
        for (std::int64_t j = 0; j < m.cfg.vocab; ++j)
            drift = std::max(drift, std::fabs(full.at(p, j) - pre.at(p, j)));
    CHECK(drift <= 1e-6);

    // suffix perturbation leaves earlier positions untouched
    auto perturbed = tokens;
    perturbed[15] = 'z';
    const Tensor pert = forward_lm(m, perturbed).logits;
    double before = 0.0, at_or_after = 0.0;
    for (std::int64_t p = 0; p < static_cast<std::int64_t>(tokens.size()); ++p)
        for (std::int64_t j = 0; j < m.cfg.vocab; ++j) {
            const double d = std::fabs(pert.at(p, j) - full.at(p, j));
            (p < 15 ? before : at_or_after) = std::max(p < 15 ? before : at_or_after, d);
        }
    CHECK(before <= 1e-6);
    CHECK(at_or_after > 1e-6);  // the change is visible from its own position on
}

TEST_CASE("forward is a pure function of weights and tokens") {
    Rng rng(3);
    BackboneModel m = BackboneModel::init(toy_cfg(), rng);
    const auto tokens = Tokenizer::encode("beli is ruki.");
    const Tensor a = forward_lm(m, tokens).logits;
    const Tensor b = forward_lm(m, tokens).logits;
    CHECK(a.v == b.v);
}

TEST_CASE("greedy generation determinism and stop handling") {
    Rng rng(4);
    BackboneModel m = BackboneModel::init(toy_cfg(), rng);
    const auto prompt = Tokenizer::encode("kalo");
    CHECK(generate(m, prompt, nullptr, 0).empty());
    const auto g1 = generate(m, prompt, nullptr, 8);
    const auto g2 = generate(m, prompt, nullptr, 8);
    CHECK(g1 == g2);
    CHECK(g1.size() <= 8);
    CHECK_THROWS(generate(m, {}, nullptr, 4));
}

TEST_CASE("checkpoint save/load is bit-exact") {
    Rng rng(5);
    BackboneModel m = BackboneModel::init(toy_cfg(), rng);
    const std::string dir = (std::filesystem::temp_directory_path() / "shine_backbone_ckpt").string();
    m.save(dir);
    BackboneModel back = BackboneModel::load(dir);
    CHECK(back.cfg.layers == m.cfg.layers);
    CHECK(back.cfg.vocab == m.cfg.vocab);
    REQUIRE(back.params.size() == m.params.size());
    for (const auto& [name, t] : m.params) CHECK(back.params.at(name).v == t.v);

    // corrupting the blob is refused with hash detail
    {
        std::fstream f(dir + "/tensors.bin", std::ios::in | std::ios::out | std::ios::binary);
        f.seekp(100);
        char byte = 0x5A;
        f.write(&byte, 1);
    }
    bool threw = false;
    try {
        BackboneModel::load(dir);
    } catch (const std::exception& e) {
        threw = true;
        CHECK(std::string(e.what()).find("hash mismatch") != std::string::npos);
    }
    CHECK(threw);
    std::filesystem::remove_all(dir);
}
