#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "fd_check.hpp"
#include "shine/autodiff.hpp"
#include "shine/rng.hpp"

using namespace shine;
using shine::testing::fd_check;
using shine::testing::FdReport;

namespace {

// Builds a scalar graph via `build` (which must store the root node back
// into l[0] and return the loss value), backprops, and finite-difference
// checks the gradient with respect to every listed parameter tensor.
void check_op(std::vector<Tensor*> params,
              const std::function<double(Tape&, std::vector<V>&)>& build,
              double tol = 1e-6) {
    for (std::size_t pi = 0; pi < params.size(); ++pi) {
        Tape tg;
        std::vector<V> lg;
        for (Tensor* p : params) lg.push_back(tg.leaf(*p, true));
        std::vector<V> dg = lg;
        build(tg, dg);
        // dg[0] now holds the scalar root by convention
        tg.backward(dg[0]);
        Tensor analytic = tg.grad_of(lg[pi]);

        auto f = [&]() {
            Tape tf;
            std::vector<V> lf;
            for (Tensor* p : params) lf.push_back(tf.leaf(*p, true));
            std::vector<V> df = lf;
            return build(tf, df);
        };
        FdReport rep = fd_check(*params[pi], analytic, f);
        INFO("param ", pi, " max_rel_err=", rep.max_rel_err);
        CHECK(rep.max_rel_err < tol);
    }
}

// Scalarize an arbitrary node by a fixed random projection.
V project(Tape& t, V x, Rng& rng) {
    Tensor w({t.val(x).numel(), 1});
    for (auto& v : w.v) v = rng.gauss(0.0, 1.0);
    V flat = t.reshape(x, {1, t.val(x).numel()});
    return t.matmul(flat, t.constant(w));
}

}  // namespace

TEST_CASE("matmul/add/mul/silu gradients match finite differences") {
    Rng rng(7);
    Tensor a = Tensor::randn({3, 4}, rng, 0.8);
    Tensor b = Tensor::randn({4, 5}, rng, 0.8);
    Tensor c = Tensor::randn({3, 5}, rng, 0.8);
    check_op({&a, &b, &c}, [](Tape& t, std::vector<V>& l) {
        V mm = t.matmul(l[0], l[1]);
        V s = t.silu(t.mul(t.add(mm, l[2]), t.sub(mm, l[2])));
        Rng prng(11);
        V out = project(t, s, prng);
        l[0] = out;
        return t.val(out).v[0];
    });
}

TEST_CASE("transpose, reshape, slicing, concat and permute gradients") {
    Rng rng(13);
    Tensor a = Tensor::randn({5, 4}, rng, 1.0);
    Tensor b = Tensor::randn({2, 4}, rng, 1.0);
    check_op({&a, &b}, [](Tape& t, std::vector<V>& l) {
        V cat = t.concat_rows({l[0], l[1]});                  // 7x4
        V perm = t.permute_rows(cat, {6, 0, 2, 1, 5, 3, 4});  // 7x4
        V s = t.slice_rows(perm, 1, 6);                       // 5x4
        V tr = t.transpose(s);                                // 4x5
        V rs = t.reshape(tr, {2, 10});
        V sl = t.reshape_slice(rs, 3, 4, 3, false);
        V sl2 = t.reshape_slice(rs, 3, 4, 3, true);
        V comb = t.add(sl, t.scale(sl2, 0.5));
        Rng prng(5);
        V out = project(t, comb, prng);
        l[0] = out;
        return t.val(out).v[0];
    });
}

TEST_CASE("rmsnorm and layernorm gradients") {
    Rng rng(21);
    Tensor x = Tensor::randn({4, 6}, rng, 1.2);
    Tensor g = Tensor::randn({6}, rng, 0.3);
    Tensor b = Tensor::randn({6}, rng, 0.3);
    for (auto& v : g.v) v += 1.0;
    check_op({&x, &g, &b}, [](Tape& t, std::vector<V>& l) {
        V rn = t.rmsnorm(l[0], l[1]);
        V ln = t.layernorm(rn, l[1], l[2]);
        Rng prng(3);
        V out = project(t, ln, prng);
        l[0] = out;
        return t.val(out).v[0];
    }, 5e-6);
}

TEST_CASE("broadcast add gradients (positional tables)") {
    Rng rng(31);
    Tensor x = Tensor::randn({6, 3}, rng, 1.0);  // L=2 blocks of M=3
    Tensor pl = Tensor::randn({2, 3}, rng, 1.0);
    Tensor pt = Tensor::randn({3, 3}, rng, 1.0);
    check_op({&x, &pl, &pt}, [](Tape& t, std::vector<V>& l) {
        V y = t.add_block(l[0], l[1]);
        y = t.add_cycle(y, l[2]);
        Rng prng(9);
        V out = project(t, y, prng);
        l[0] = out;
        return t.val(out).v[0];
    });
}

TEST_CASE("embedding gradient scatters into the table") {
    Rng rng(41);
    Tensor table = Tensor::randn({7, 4}, rng, 1.0);
    check_op({&table}, [](Tape& t, std::vector<V>& l) {
        V e = t.embedding(l[0], {1, 3, 3, 0, 6});
        Rng prng(2);
        V out = project(t, e, prng);
        l[0] = out;
        return t.val(out).v[0];
    });
}

TEST_CASE("rope rotation gradient and norm preservation") {
    Rng rng(51);
    Tensor x = Tensor::randn({5, 8}, rng, 1.0);  // 2 heads x dim 4
    {
        Tape t;
        V xv = t.leaf(x, false);
        V r = t.rope(xv, {0, 1, 2, 3, 4}, 4);
        for (std::int64_t i = 0; i < 5; ++i) {
            double n0 = 0.0, n1 = 0.0;
            for (std::int64_t j = 0; j < 8; ++j) {
                n0 += x.at(i, j) * x.at(i, j);
                n1 += t.val(r).at(i, j) * t.val(r).at(i, j);
            }
            CHECK(n0 == doctest::Approx(n1).epsilon(1e-12));
        }
    }
    check_op({&x}, [](Tape& t, std::vector<V>& l) {
        V r = t.rope(l[0], {3, 1, 4, 1, 5}, 4);
        Rng prng(6);
        V out = project(t, r, prng);
        l[0] = out;
        return t.val(out).v[0];
    });
}

TEST_CASE("attention gradients: causal, GQA, blocks and masks") {
    Rng rng(61);

    SUBCASE("causal single block with grouped KV") {
        Tensor q = Tensor::randn({6, 8}, rng, 0.7);  // 4 heads x dim 2
        Tensor k = Tensor::randn({6, 4}, rng, 0.7);  // 2 kv heads
        Tensor v = Tensor::randn({6, 4}, rng, 0.7);
        check_op({&q, &k, &v}, [](Tape& t, std::vector<V>& l) {
            V a = t.attention(l[0], l[1], l[2], 4, 2, true, 6);
            Rng prng(8);
            V out = project(t, a, prng);
            l[0] = out;
            return t.val(out).v[0];
        });
    }

    SUBCASE("bidirectional blocks") {
        Tensor q = Tensor::randn({6, 4}, rng, 0.7);
        Tensor k = Tensor::randn({6, 4}, rng, 0.7);
        Tensor v = Tensor::randn({6, 4}, rng, 0.7);
        check_op({&q, &k, &v}, [](Tape& t, std::vector<V>& l) {
            V a = t.attention(l[0], l[1], l[2], 1, 1, false, 3);  // 2 blocks of 3
            Rng prng(8);
            V out = project(t, a, prng);
            l[0] = out;
            return t.val(out).v[0];
        });
    }

    SUBCASE("masked bidirectional attention") {
        Tensor q = Tensor::randn({4, 4}, rng, 0.7);
        Tensor k = Tensor::randn({4, 4}, rng, 0.7);
        Tensor v = Tensor::randn({4, 4}, rng, 0.7);
        Tensor mask({4, 4});
        // ring mask incl. self
        for (int i = 0; i < 4; ++i) {
            mask.at(i, i) = 1.0;
            mask.at(i, (i + 1) % 4) = 1.0;
        }
        check_op({&q, &k, &v}, [mask](Tape& t, std::vector<V>& l) {
            V a = t.attention(l[0], l[1], l[2], 2, 2, false, 4, &mask);
            Rng prng(8);
            V out = project(t, a, prng);
            l[0] = out;
            return t.val(out).v[0];
        });
    }

    SUBCASE("single-token block reduces to the value row") {
        Tensor q = Tensor::randn({3, 4}, rng, 1.0);
        Tensor k = Tensor::randn({3, 4}, rng, 1.0);
        Tensor v = Tensor::randn({3, 4}, rng, 1.0);
        Tape t;
        V a = t.attention(t.leaf(q), t.leaf(k), t.leaf(v), 2, 2, false, 1);
        CHECK(max_abs_diff(t.val(a), v) < 1e-12);
    }
}

TEST_CASE("cross entropy mean matches manual computation and gradients") {
    Rng rng(71);
    Tensor logits = Tensor::randn({4, 5}, rng, 1.0);
    std::vector<std::int32_t> targets{1, 0, 3, 2};
    std::vector<std::uint8_t> on{1, 0, 1, 1};

    double manual = 0.0;
    int cnt = 0;
    for (int p = 0; p < 4; ++p) {
        if (!on[p]) continue;
        double mx = logits.at(p, 0);
        for (int j = 1; j < 5; ++j) mx = std::max(mx, logits.at(p, j));
        double denom = 0.0;
        for (int j = 0; j < 5; ++j) denom += std::exp(logits.at(p, j) - mx);
        manual += mx + std::log(denom) - logits.at(p, targets[p]);
        ++cnt;
    }
    manual /= cnt;

    Tape t;
    V l = t.leaf(logits, true);
    V ce = t.cross_entropy_mean(l, targets, on);
    CHECK(t.val(ce).v[0] == doctest::Approx(manual).epsilon(1e-12));

    check_op({&logits}, [&](Tape& tt, std::vector<V>& lv) {
        V c = tt.cross_entropy_mean(lv[0], targets, on);
        lv[0] = c;
        return tt.val(c).v[0];
    });

    CHECK_THROWS(t.cross_entropy_mean(l, targets, {0, 0, 0, 0}));
}

TEST_CASE("gradient accumulates when a node fans out") {
    Tensor a = Tensor::from_values({1, 1}, {2.0});
    Tape t;
    V x = t.leaf(a, true);
    V y = t.add(t.mul(x, x), t.scale(x, 3.0));  // x^2 + 3x -> dy/dx = 2x+3 = 7
    t.backward(y);
    CHECK(t.grad_of(x).v[0] == doctest::Approx(7.0));
}

TEST_CASE("frozen leaves receive no gradient but pass it through") {
    Tensor a = Tensor::from_values({1, 2}, {1.0, 2.0});
    Tensor w = Tensor::from_values({2, 1}, {3.0, 4.0});
    Tape t;
    V av = t.leaf(a, true);
    V wv = t.leaf(w, false);  // frozen
    V y = t.matmul(av, wv);
    t.backward(y);
    CHECK(t.grad_of(wv).v[0] == 0.0);
    CHECK(t.grad_of(av).v[0] == doctest::Approx(3.0));
    CHECK(t.grad_of(av).v[1] == doctest::Approx(4.0));
}
