#pragma once

// Tape-based reverse-mode differentiation over Tensor. The graph is rebuilt
// per step (dynamic); nodes are appended in topological order so backward is
// a single reverse sweep. Gradients accumulate, so a node may feed any number
// of consumers.

#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <span>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "shine/tensor.hpp"

namespace shine {

class Tape {
public:
    struct V {
        std::int32_t id = -1;
        bool valid() const { return id >= 0; }
    };

    V leaf(Tensor value, bool requires_grad = false) {
        return push_(std::move(value), requires_grad, nullptr);
    }

    V constant(Tensor value) { return leaf(std::move(value), false); }

    const Tensor& val(V x) const { return nodes_[check_(x)].value; }

    // Gradient of a node after backward(); zeros if the node was never touched.
    Tensor grad_of(V x) const {
        const Node& n = nodes_[check_(x)];
        if (n.grad.empty()) return Tensor(n.value.dims);
        return n.grad;
    }

    bool requires_grad(V x) const { return nodes_[check_(x)].needs; }

    std::size_t size() const { return nodes_.size(); }

    void backward(V root) {
        Node& r = nodes_[check_(root)];
        if (r.value.numel() != 1) throw std::invalid_argument("backward: root must be scalar");
        grad_buf_(root.id).v[0] += 1.0;
        for (std::int32_t i = root.id; i >= 0; --i) {
            Node& n = nodes_[static_cast<std::size_t>(i)];
            if (n.back && !n.grad.empty()) n.back();
        }
    }

    // ---------------- elementwise ----------------

    V add(V a, V b) {
        const Tensor& ta = val(a);
        const Tensor& tb = val(b);
        if (!ta.same_shape(tb)) throw std::invalid_argument("add: shape mismatch " + ta.shape_str() + " vs " + tb.shape_str());
        Tensor out = ta;
        for (std::size_t i = 0; i < out.v.size(); ++i) out.v[i] += tb.v[i];
        return unary2_(std::move(out), a, b, [this](V o, V a2, V b2) {
            const Tensor& g = nodes_[o.id].grad;
            if (needs_(a2)) acc_(a2, g);
            if (needs_(b2)) acc_(b2, g);
        });
    }

    V sub(V a, V b) {
        const Tensor& ta = val(a);
        const Tensor& tb = val(b);
        if (!ta.same_shape(tb)) throw std::invalid_argument("sub: shape mismatch");
        Tensor out = ta;
        for (std::size_t i = 0; i < out.v.size(); ++i) out.v[i] -= tb.v[i];
        return unary2_(std::move(out), a, b, [this](V o, V a2, V b2) {
            const Tensor& g = nodes_[o.id].grad;
            if (needs_(a2)) acc_(a2, g);
            if (needs_(b2)) {
                Tensor& gb = grad_buf_(b2.id);
                for (std::size_t i = 0; i < g.v.size(); ++i) gb.v[i] -= g.v[i];
            }
        });
    }

    V mul(V a, V b) {
        const Tensor& ta = val(a);
        const Tensor& tb = val(b);
        if (!ta.same_shape(tb)) throw std::invalid_argument("mul: shape mismatch");
        Tensor out = ta;
        for (std::size_t i = 0; i < out.v.size(); ++i) out.v[i] *= tb.v[i];
        return unary2_(std::move(out), a, b, [this](V o, V a2, V b2) {
            const Tensor& g = nodes_[o.id].grad;
            if (needs_(a2)) {
                Tensor& ga = grad_buf_(a2.id);
                const Tensor& vb = val(b2);
                for (std::size_t i = 0; i < g.v.size(); ++i) ga.v[i] += g.v[i] * vb.v[i];
            }
            if (needs_(b2)) {
                Tensor& gb = grad_buf_(b2.id);
                const Tensor& va = val(a2);
                for (std::size_t i = 0; i < g.v.size(); ++i) gb.v[i] += g.v[i] * va.v[i];
            }
        });
    }

    V scale(V a, double c) {
        Tensor out = val(a);
        for (auto& x : out.v) x *= c;
        return unary_(std::move(out), a, [this, c](V o, V a2) {
            const Tensor& g = nodes_[o.id].grad;
            Tensor& ga = grad_buf_(a2.id);
            for (std::size_t i = 0; i < g.v.size(); ++i) ga.v[i] += c * g.v[i];
        });
    }

    V silu(V a) {
        const Tensor& ta = val(a);
        Tensor out = ta;
        for (auto& x : out.v) x = x / (1.0 + std::exp(-x));
        return unary_(std::move(out), a, [this](V o, V a2) {
            const Tensor& g = nodes_[o.id].grad;
            const Tensor& x = val(a2);
            Tensor& ga = grad_buf_(a2.id);
            for (std::size_t i = 0; i < g.v.size(); ++i) {
                const double s = 1.0 / (1.0 + std::exp(-x.v[i]));
                ga.v[i] += g.v[i] * s * (1.0 + x.v[i] * (1.0 - s));
            }
        });
    }

    // ---------------- linear algebra ----------------

    V matmul(V a, V b) {
        const Tensor& ta = val(a);
        const Tensor& tb = val(b);
        if (ta.rank() != 2 || tb.rank() != 2 || ta.dims[1] != tb.dims[0])
            throw std::invalid_argument("matmul: shape mismatch " + ta.shape_str() + " x " + tb.shape_str());
        Tensor out({ta.dims[0], tb.dims[1]});
        matmul_acc_nn(ta.v.data(), tb.v.data(), out.v.data(), ta.dims[0], ta.dims[1], tb.dims[1]);
        return unary2_(std::move(out), a, b, [this](V o, V a2, V b2) {
            const Tensor& g = nodes_[o.id].grad;
            const Tensor& va = val(a2);
            const Tensor& vb = val(b2);
            const std::int64_t m = va.dims[0], k = va.dims[1], n = vb.dims[1];
            if (needs_(a2)) matmul_acc_nt(g.v.data(), vb.v.data(), grad_buf_(a2.id).v.data(), m, n, k);
            if (needs_(b2)) matmul_acc_tn(va.v.data(), g.v.data(), grad_buf_(b2.id).v.data(), m, k, n);
        });
    }

    V transpose(V a) {
        const Tensor& ta = val(a);
        if (ta.rank() != 2) throw std::invalid_argument("transpose: rank != 2");
        Tensor out({ta.dims[1], ta.dims[0]});
        for (std::int64_t i = 0; i < ta.dims[0]; ++i)
            for (std::int64_t j = 0; j < ta.dims[1]; ++j)
                out.v[static_cast<std::size_t>(j * ta.dims[0] + i)] = ta.v[static_cast<std::size_t>(i * ta.dims[1] + j)];
        return unary_(std::move(out), a, [this](V o, V a2) {
            const Tensor& g = nodes_[o.id].grad;
            Tensor& ga = grad_buf_(a2.id);
            const std::int64_t r = ga.dims[0], c = ga.dims[1];
            for (std::int64_t i = 0; i < r; ++i)
                for (std::int64_t j = 0; j < c; ++j)
                    ga.v[static_cast<std::size_t>(i * c + j)] += g.v[static_cast<std::size_t>(j * r + i)];
        });
    }

    // ---------------- shape ----------------

    V reshape(V a, std::vector<std::int64_t> dims) {
        const Tensor& ta = val(a);
        if (Tensor::numel_of(dims) != ta.numel()) throw std::invalid_argument("reshape: numel mismatch");
        Tensor out;
        out.dims = std::move(dims);
        out.v = ta.v;
        return unary_(std::move(out), a, [this](V o, V a2) {
            const Tensor& g = nodes_[o.id].grad;
            Tensor& ga = grad_buf_(a2.id);
            for (std::size_t i = 0; i < g.v.size(); ++i) ga.v[i] += g.v[i];
        });
    }

    V slice_rows(V a, std::int64_t r0, std::int64_t r1) {
        const Tensor& ta = val(a);
        const std::int64_t c = ta.cols();
        if (ta.rank() < 1 || r0 < 0 || r1 > ta.dims[0] || r0 >= r1)
            throw std::invalid_argument("slice_rows: bad range");
        Tensor out({r1 - r0, c});
        std::copy(ta.v.begin() + r0 * c, ta.v.begin() + r1 * c, out.v.begin());
        return unary_(std::move(out), a, [this, r0, c](V o, V a2) {
            const Tensor& g = nodes_[o.id].grad;
            Tensor& ga = grad_buf_(a2.id);
            double* dst = ga.v.data() + r0 * c;
            for (std::size_t i = 0; i < g.v.size(); ++i) dst[i] += g.v[i];
        });
    }

    V concat_rows(const std::vector<V>& parts) {
        if (parts.empty()) throw std::invalid_argument("concat_rows: empty");
        const std::int64_t c = val(parts[0]).cols();
        std::int64_t rows = 0;
        for (V p : parts) {
            if (val(p).cols() != c) throw std::invalid_argument("concat_rows: col mismatch");
            rows += val(p).dims[0];
        }
        Tensor out({rows, c});
        std::int64_t r = 0;
        for (V p : parts) {
            const Tensor& tp = val(p);
            std::copy(tp.v.begin(), tp.v.end(), out.v.begin() + r * c);
            r += tp.dims[0];
        }
        bool any = false;
        for (V p : parts) any = any || needs_(p);
        V o = push_(std::move(out), any, nullptr);
        if (any) {
            std::vector<V> ps = parts;
            nodes_[o.id].back = [this, o, ps, c]() {
                const Tensor& g = nodes_[o.id].grad;
                std::int64_t r2 = 0;
                for (V p : ps) {
                    const std::int64_t pr = val(p).dims[0];
                    if (needs_(p)) {
                        Tensor& gp = grad_buf_(p.id);
                        const double* src = g.v.data() + r2 * c;
                        for (std::size_t i = 0; i < gp.v.size(); ++i) gp.v[i] += src[i];
                    }
                    r2 += pr;
                }
            };
        }
        return o;
    }

    // out[i, :] = in[perm[i], :]
    V permute_rows(V a, std::vector<std::int64_t> perm) {
        const Tensor& ta = val(a);
        const std::int64_t c = ta.cols();
        if (static_cast<std::int64_t>(perm.size()) != ta.dims[0])
            throw std::invalid_argument("permute_rows: size mismatch");
        Tensor out({ta.dims[0], c});
        for (std::size_t i = 0; i < perm.size(); ++i)
            std::copy(ta.v.begin() + perm[i] * c, ta.v.begin() + (perm[i] + 1) * c,
                      out.v.begin() + static_cast<std::int64_t>(i) * c);
        return unary_(std::move(out), a, [this, perm = std::move(perm), c](V o, V a2) {
            const Tensor& g = nodes_[o.id].grad;
            Tensor& ga = grad_buf_(a2.id);
            for (std::size_t i = 0; i < perm.size(); ++i) {
                double* dst = ga.v.data() + perm[i] * c;
                const double* src = g.v.data() + static_cast<std::int64_t>(i) * c;
                for (std::int64_t j = 0; j < c; ++j) dst[j] += src[j];
            }
        });
    }

    // Reads `rows*cols` contiguous values from the row-major flattening of `a`
    // starting at `offset`. transposed=false fills the output row-major;
    // transposed=true fills it so that out^T is row-major in the source.
    V reshape_slice(V a, std::int64_t offset, std::int64_t rows, std::int64_t cols, bool transposed) {
        const Tensor& ta = val(a);
        if (offset < 0 || offset + rows * cols > ta.numel())
            throw std::invalid_argument("reshape_slice: range out of bounds");
        Tensor out({rows, cols});
        if (!transposed) {
            std::copy(ta.v.begin() + offset, ta.v.begin() + offset + rows * cols, out.v.begin());
        } else {
            for (std::int64_t i = 0; i < rows; ++i)
                for (std::int64_t j = 0; j < cols; ++j)
                    out.v[static_cast<std::size_t>(i * cols + j)] = ta.v[static_cast<std::size_t>(offset + j * rows + i)];
        }
        return unary_(std::move(out), a, [this, offset, rows, cols, transposed](V o, V a2) {
            const Tensor& g = nodes_[o.id].grad;
            Tensor& ga = grad_buf_(a2.id);
            if (!transposed) {
                for (std::int64_t i = 0; i < rows * cols; ++i) ga.v[static_cast<std::size_t>(offset + i)] += g.v[static_cast<std::size_t>(i)];
            } else {
                for (std::int64_t i = 0; i < rows; ++i)
                    for (std::int64_t j = 0; j < cols; ++j)
                        ga.v[static_cast<std::size_t>(offset + j * rows + i)] += g.v[static_cast<std::size_t>(i * cols + j)];
            }
        });
    }

    // ---------------- broadcast adds (positional tables) ----------------

    // x has R rows, p has P rows, R % P == 0; out[i] = x[i] + p[i % P]
    V add_cycle(V x, V p) {
        const Tensor& tx = val(x);
        const Tensor& tp = val(p);
        const std::int64_t c = tx.cols(), pr = tp.dims[0];
        if (tp.cols() != c || tx.dims[0] % pr != 0) throw std::invalid_argument("add_cycle: shape mismatch");
        Tensor out = tx;
        for (std::int64_t i = 0; i < tx.dims[0]; ++i) {
            const double* src = tp.v.data() + (i % pr) * c;
            double* dst = out.v.data() + i * c;
            for (std::int64_t j = 0; j < c; ++j) dst[j] += src[j];
        }
        return unary2_(std::move(out), x, p, [this, pr, c](V o, V x2, V p2) {
            const Tensor& g = nodes_[o.id].grad;
            const std::int64_t r = val(x2).dims[0];
            if (needs_(x2)) acc_(x2, g);
            if (needs_(p2)) {
                Tensor& gp = grad_buf_(p2.id);
                for (std::int64_t i = 0; i < r; ++i) {
                    double* dst = gp.v.data() + (i % pr) * c;
                    const double* src = g.v.data() + i * c;
                    for (std::int64_t j = 0; j < c; ++j) dst[j] += src[j];
                }
            }
        });
    }

    // x has R rows, p has P rows, R % P == 0; out[i] = x[i] + p[i / (R/P)]
    V add_block(V x, V p) {
        const Tensor& tx = val(x);
        const Tensor& tp = val(p);
        const std::int64_t c = tx.cols(), pr = tp.dims[0];
        if (tp.cols() != c || tx.dims[0] % pr != 0) throw std::invalid_argument("add_block: shape mismatch");
        const std::int64_t rep = tx.dims[0] / pr;
        Tensor out = tx;
        for (std::int64_t i = 0; i < tx.dims[0]; ++i) {
            const double* src = tp.v.data() + (i / rep) * c;
            double* dst = out.v.data() + i * c;
            for (std::int64_t j = 0; j < c; ++j) dst[j] += src[j];
        }
        return unary2_(std::move(out), x, p, [this, rep, c](V o, V x2, V p2) {
            const Tensor& g = nodes_[o.id].grad;
            const std::int64_t r = val(x2).dims[0];
            if (needs_(x2)) acc_(x2, g);
            if (needs_(p2)) {
                Tensor& gp = grad_buf_(p2.id);
                for (std::int64_t i = 0; i < r; ++i) {
                    double* dst = gp.v.data() + (i / rep) * c;
                    const double* src = g.v.data() + i * c;
                    for (std::int64_t j = 0; j < c; ++j) dst[j] += src[j];
                }
            }
        });
    }

    // ---------------- lookups ----------------

    V embedding(V table, std::vector<std::int32_t> ids) {
        const Tensor& tt = val(table);
        if (tt.rank() != 2) throw std::invalid_argument("embedding: table rank != 2");
        const std::int64_t c = tt.dims[1];
        Tensor out({static_cast<std::int64_t>(ids.size()), c});
        for (std::size_t i = 0; i < ids.size(); ++i) {
            if (ids[i] < 0 || ids[i] >= tt.dims[0]) throw std::out_of_range("embedding: id out of range");
            std::copy(tt.v.begin() + ids[i] * c, tt.v.begin() + (ids[i] + 1) * c,
                      out.v.begin() + static_cast<std::int64_t>(i) * c);
        }
        return unary_(std::move(out), table, [this, ids = std::move(ids), c](V o, V t2) {
            const Tensor& g = nodes_[o.id].grad;
            Tensor& gt = grad_buf_(t2.id);
            for (std::size_t i = 0; i < ids.size(); ++i) {
                double* dst = gt.v.data() + ids[i] * c;
                const double* src = g.v.data() + static_cast<std::int64_t>(i) * c;
                for (std::int64_t j = 0; j < c; ++j) dst[j] += src[j];
            }
        });
    }

    // ---------------- normalization ----------------

    V rmsnorm(V x, V gain, double eps = 1e-6) {
        const Tensor& tx = val(x);
        const Tensor& tg = val(gain);
        const std::int64_t r = tx.dims[0], c = tx.cols();
        if (tg.numel() != c) throw std::invalid_argument("rmsnorm: gain size mismatch");
        Tensor out({r, c});
        Tensor inv({r});
        for (std::int64_t i = 0; i < r; ++i) {
            const double* xr = tx.v.data() + i * c;
            double ms = 0.0;
            for (std::int64_t j = 0; j < c; ++j) ms += xr[j] * xr[j];
            const double rinv = 1.0 / std::sqrt(ms / static_cast<double>(c) + eps);
            inv.v[static_cast<std::size_t>(i)] = rinv;
            double* yr = out.v.data() + i * c;
            for (std::int64_t j = 0; j < c; ++j) yr[j] = xr[j] * rinv * tg.v[static_cast<std::size_t>(j)];
        }
        return unary2_(std::move(out), x, gain, [this, inv = std::move(inv), r, c](V o, V x2, V g2) {
            const Tensor& g = nodes_[o.id].grad;
            const Tensor& tx2 = val(x2);
            const Tensor& tg2 = val(g2);
            for (std::int64_t i = 0; i < r; ++i) {
                const double* xr = tx2.v.data() + i * c;
                const double* gr = g.v.data() + i * c;
                const double rinv = inv.v[static_cast<std::size_t>(i)];
                if (needs_(g2)) {
                    Tensor& gg = grad_buf_(g2.id);
                    for (std::int64_t j = 0; j < c; ++j) gg.v[static_cast<std::size_t>(j)] += gr[j] * xr[j] * rinv;
                }
                if (needs_(x2)) {
                    double s = 0.0;
                    for (std::int64_t j = 0; j < c; ++j) s += gr[j] * tg2.v[static_cast<std::size_t>(j)] * xr[j];
                    const double coef = rinv * rinv * rinv * s / static_cast<double>(c);
                    Tensor& gx = grad_buf_(x2.id);
                    double* gxr = gx.v.data() + i * c;
                    for (std::int64_t j = 0; j < c; ++j)
                        gxr[j] += gr[j] * tg2.v[static_cast<std::size_t>(j)] * rinv - xr[j] * coef;
                }
            }
        });
    }

    V layernorm(V x, V gain, V bias, double eps = 1e-6) {
        const Tensor& tx = val(x);
        const Tensor& tg = val(gain);
        const Tensor& tb = val(bias);
        const std::int64_t r = tx.dims[0], c = tx.cols();
        if (tg.numel() != c || tb.numel() != c) throw std::invalid_argument("layernorm: param size mismatch");
        Tensor out({r, c});
        Tensor xhat({r, c});
        Tensor sig({r});
        for (std::int64_t i = 0; i < r; ++i) {
            const double* xr = tx.v.data() + i * c;
            double mu = 0.0;
            for (std::int64_t j = 0; j < c; ++j) mu += xr[j];
            mu /= static_cast<double>(c);
            double var = 0.0;
            for (std::int64_t j = 0; j < c; ++j) var += (xr[j] - mu) * (xr[j] - mu);
            var /= static_cast<double>(c);
            const double s = 1.0 / std::sqrt(var + eps);
            sig.v[static_cast<std::size_t>(i)] = s;
            for (std::int64_t j = 0; j < c; ++j) {
                const double xh = (xr[j] - mu) * s;
                xhat.v[static_cast<std::size_t>(i * c + j)] = xh;
                out.v[static_cast<std::size_t>(i * c + j)] = xh * tg.v[static_cast<std::size_t>(j)] + tb.v[static_cast<std::size_t>(j)];
            }
        }
        bool any = needs_(x) || needs_(gain) || needs_(bias);
        V o = push_(std::move(out), any, nullptr);
        if (any) {
            nodes_[o.id].back = [this, o, x, gain, bias, xhat = std::move(xhat), sig = std::move(sig), r, c]() {
                const Tensor& g = nodes_[o.id].grad;
                const Tensor& tg2 = val(gain);
                for (std::int64_t i = 0; i < r; ++i) {
                    const double* gr = g.v.data() + i * c;
                    const double* xh = xhat.v.data() + i * c;
                    if (needs_(gain)) {
                        Tensor& gg = grad_buf_(gain.id);
                        for (std::int64_t j = 0; j < c; ++j) gg.v[static_cast<std::size_t>(j)] += gr[j] * xh[j];
                    }
                    if (needs_(bias)) {
                        Tensor& gb = grad_buf_(bias.id);
                        for (std::int64_t j = 0; j < c; ++j) gb.v[static_cast<std::size_t>(j)] += gr[j];
                    }
                    if (needs_(x)) {
                        double m1 = 0.0, m2 = 0.0;
                        for (std::int64_t j = 0; j < c; ++j) {
                            const double dxh = gr[j] * tg2.v[static_cast<std::size_t>(j)];
                            m1 += dxh;
                            m2 += dxh * xh[j];
                        }
                        m1 /= static_cast<double>(c);
                        m2 /= static_cast<double>(c);
                        const double s = sig.v[static_cast<std::size_t>(i)];
                        Tensor& gx = grad_buf_(x.id);
                        double* gxr = gx.v.data() + i * c;
                        for (std::int64_t j = 0; j < c; ++j) {
                            const double dxh = gr[j] * tg2.v[static_cast<std::size_t>(j)];
                            gxr[j] += s * (dxh - m1 - xh[j] * m2);
                        }
                    }
                }
            };
        }
        return o;
    }

    // ---------------- rotary positions ----------------

    // x: S x (n_heads*head_dim); rotates adjacent pairs within each head.
    V rope(V x, std::vector<std::int64_t> positions, std::int64_t head_dim, double theta = 10000.0) {
        const Tensor& tx = val(x);
        const std::int64_t r = tx.dims[0], c = tx.cols();
        if (head_dim % 2 != 0 || c % head_dim != 0) throw std::invalid_argument("rope: bad head_dim");
        if (static_cast<std::int64_t>(positions.size()) != r) throw std::invalid_argument("rope: positions size mismatch");
        const std::int64_t half = head_dim / 2;
        Tensor freqs({half});
        for (std::int64_t i = 0; i < half; ++i)
            freqs.v[static_cast<std::size_t>(i)] = std::pow(theta, -2.0 * static_cast<double>(i) / static_cast<double>(head_dim));
        Tensor out = tx;
        apply_rope_(out, positions, freqs, head_dim, +1.0);
        return unary_(std::move(out), x, [this, positions = std::move(positions), freqs = std::move(freqs), head_dim](V o, V x2) {
            Tensor g = nodes_[o.id].grad;
            apply_rope_(g, positions, freqs, head_dim, -1.0);  // rotation is orthogonal
            acc_(x2, g);
        });
    }

    // ---------------- attention ----------------

    // q: S x (n_heads*hd); k,v: S x (n_kv*hd). S must be a multiple of
    // block_len; attention is independent within each block (block_len == S
    // gives ordinary self-attention). mask, when given, is block_len x
    // block_len with 1 = may attend; it is shared by all blocks and heads.
    V attention(V q, V k, V v, std::int64_t n_heads, std::int64_t n_kv, bool causal,
                std::int64_t block_len, const Tensor* mask = nullptr) {
        const Tensor& tq = val(q);
        const Tensor& tk = val(k);
        const Tensor& tv = val(v);
        const std::int64_t s = tq.dims[0];
        if (tk.dims[0] != s || tv.dims[0] != s) throw std::invalid_argument("attention: row mismatch");
        if (n_heads <= 0 || n_kv <= 0 || n_heads % n_kv != 0) throw std::invalid_argument("attention: bad head counts");
        const std::int64_t hd = tq.cols() / n_heads;
        if (hd * n_heads != tq.cols() || hd * n_kv != tk.cols() || tk.cols() != tv.cols())
            throw std::invalid_argument("attention: width mismatch");
        if (block_len <= 0 || s % block_len != 0) throw std::invalid_argument("attention: bad block_len");
        if (mask && (mask->dims[0] != block_len || mask->cols() != block_len))
            throw std::invalid_argument("attention: mask shape mismatch");
        const std::int64_t nblocks = s / block_len;
        const std::int64_t group = n_heads / n_kv;
        const double sc = 1.0 / std::sqrt(static_cast<double>(hd));

        Tensor out({s, n_heads * hd});
        Tensor probs({nblocks, n_heads, block_len, block_len});
        const std::int64_t b2 = block_len * block_len;
        for (std::int64_t b = 0; b < nblocks; ++b) {
            const std::int64_t row0 = b * block_len;
            for (std::int64_t h = 0; h < n_heads; ++h) {
                const std::int64_t hk = h / group;
                double* pblk = probs.v.data() + (b * n_heads + h) * b2;
                for (std::int64_t i = 0; i < block_len; ++i) {
                    const double* qi = tq.v.data() + (row0 + i) * tq.cols() + h * hd;
                    double mx = -std::numeric_limits<double>::infinity();
                    for (std::int64_t j = 0; j < block_len; ++j) {
                        double sv = -std::numeric_limits<double>::infinity();
                        if ((!causal || j <= i) && (!mask || mask->v[static_cast<std::size_t>(i * block_len + j)] != 0.0)) {
                            const double* kj = tk.v.data() + (row0 + j) * tk.cols() + hk * hd;
                            double acc = 0.0;
                            for (std::int64_t d = 0; d < hd; ++d) acc += qi[d] * kj[d];
                            sv = acc * sc;
                        }
                        pblk[i * block_len + j] = sv;
                        if (sv > mx) mx = sv;
                    }
                    if (mx == -std::numeric_limits<double>::infinity())
                        throw std::runtime_error("attention: row with no attendable position");
                    double denom = 0.0;
                    for (std::int64_t j = 0; j < block_len; ++j) {
                        double& e = pblk[i * block_len + j];
                        e = (e == -std::numeric_limits<double>::infinity()) ? 0.0 : std::exp(e - mx);
                        denom += e;
                    }
                    double* orow = out.v.data() + (row0 + i) * out.cols() + h * hd;
                    for (std::int64_t j = 0; j < block_len; ++j) {
                        const double p = pblk[i * block_len + j] / denom;
                        pblk[i * block_len + j] = p;
                        if (p != 0.0) {
                            const double* vj = tv.v.data() + (row0 + j) * tv.cols() + hk * hd;
                            for (std::int64_t d = 0; d < hd; ++d) orow[d] += p * vj[d];
                        }
                    }
                }
            }
        }

        bool any = needs_(q) || needs_(k) || needs_(v);
        V o = push_(std::move(out), any, nullptr);
        if (any) {
            nodes_[o.id].back = [this, o, q, k, v, probs = std::move(probs),
                                 n_heads, n_kv, block_len, nblocks, hd, group, sc]() {
                const Tensor& g = nodes_[o.id].grad;
                const Tensor& tq2 = val(q);
                const Tensor& tk2 = val(k);
                const Tensor& tv2 = val(v);
                Tensor* gq = needs_(q) ? &grad_buf_(q.id) : nullptr;
                Tensor* gk = needs_(k) ? &grad_buf_(k.id) : nullptr;
                Tensor* gv = needs_(v) ? &grad_buf_(v.id) : nullptr;
                const std::int64_t b2 = block_len * block_len;
                std::vector<double> dp(static_cast<std::size_t>(b2));
                for (std::int64_t b = 0; b < nblocks; ++b) {
                    const std::int64_t row0 = b * block_len;
                    for (std::int64_t h = 0; h < n_heads; ++h) {
                        const std::int64_t hk = h / group;
                        const double* pblk = probs.v.data() + (b * n_heads + h) * b2;
                        for (std::int64_t i = 0; i < block_len; ++i) {
                            const double* grow = g.v.data() + (row0 + i) * g.cols() + h * hd;
                            // dP = dO V^T and dV += P^T dO
                            double rsum = 0.0;
                            for (std::int64_t j = 0; j < block_len; ++j) {
                                const double p = pblk[i * block_len + j];
                                const double* vj = tv2.v.data() + (row0 + j) * tv2.cols() + hk * hd;
                                double acc = 0.0;
                                for (std::int64_t d = 0; d < hd; ++d) acc += grow[d] * vj[d];
                                dp[static_cast<std::size_t>(j)] = acc;
                                rsum += acc * p;
                                if (gv && p != 0.0) {
                                    double* gvj = gv->v.data() + (row0 + j) * tv2.cols() + hk * hd;
                                    for (std::int64_t d = 0; d < hd; ++d) gvj[d] += p * grow[d];
                                }
                            }
                            // dS = P o (dP - rowsum(dP o P)); dQ += dS K sc; dK += dS^T Q sc
                            const double* qi = tq2.v.data() + (row0 + i) * tq2.cols() + h * hd;
                            for (std::int64_t j = 0; j < block_len; ++j) {
                                const double p = pblk[i * block_len + j];
                                if (p == 0.0) continue;
                                const double ds = p * (dp[static_cast<std::size_t>(j)] - rsum) * sc;
                                const double* kj = tk2.v.data() + (row0 + j) * tk2.cols() + hk * hd;
                                if (gq) {
                                    double* gqi = gq->v.data() + (row0 + i) * tq2.cols() + h * hd;
                                    for (std::int64_t d = 0; d < hd; ++d) gqi[d] += ds * kj[d];
                                }
                                if (gk) {
                                    double* gkj = gk->v.data() + (row0 + j) * tk2.cols() + hk * hd;
                                    for (std::int64_t d = 0; d < hd; ++d) gkj[d] += ds * qi[d];
                                }
                            }
                        }
                    }
                }
            };
        }
        return o;
    }

    // ---------------- loss ----------------

    // Mean cross-entropy over positions with on[p] != 0. logits: S x V.
    V cross_entropy_mean(V logits, std::vector<std::int32_t> targets, std::vector<std::uint8_t> on) {
        const Tensor& tl = val(logits);
        const std::int64_t s = tl.dims[0], vsz = tl.cols();
        if (static_cast<std::int64_t>(targets.size()) != s || static_cast<std::int64_t>(on.size()) != s)
            throw std::invalid_argument("cross_entropy_mean: size mismatch");
        std::int64_t count = 0;
        double total = 0.0;
        Tensor lse({s});
        for (std::int64_t p = 0; p < s; ++p) {
            if (!on[static_cast<std::size_t>(p)]) continue;
            const std::int32_t t = targets[static_cast<std::size_t>(p)];
            if (t < 0 || t >= vsz) throw std::out_of_range("cross_entropy_mean: target out of range");
            const double* row = tl.v.data() + p * vsz;
            double mx = row[0];
            for (std::int64_t j = 1; j < vsz; ++j) mx = std::max(mx, row[j]);
            double denom = 0.0;
            for (std::int64_t j = 0; j < vsz; ++j) denom += std::exp(row[j] - mx);
            const double l = mx + std::log(denom);
            lse.v[static_cast<std::size_t>(p)] = l;
            total += l - row[t];
            ++count;
        }
        if (count == 0) throw std::invalid_argument("cross_entropy_mean: no active position");
        Tensor out({1});
        out.v[0] = total / static_cast<double>(count);
        return unary_(std::move(out), logits,
                      [this, targets = std::move(targets), on = std::move(on), lse = std::move(lse), s, vsz, count](V o, V l2) {
            const double gscale = nodes_[o.id].grad.v[0] / static_cast<double>(count);
            const Tensor& tl2 = val(l2);
            Tensor& gl = grad_buf_(l2.id);
            for (std::int64_t p = 0; p < s; ++p) {
                if (!on[static_cast<std::size_t>(p)]) continue;
                const double* row = tl2.v.data() + p * vsz;
                double* grow = gl.v.data() + p * vsz;
                const double l = lse.v[static_cast<std::size_t>(p)];
                for (std::int64_t j = 0; j < vsz; ++j) grow[j] += gscale * std::exp(row[j] - l);
                grow[targets[static_cast<std::size_t>(p)]] -= gscale;
            }
        });
    }

private:
    struct Node {
        Tensor value;
        Tensor grad;
        std::function<void()> back;
        bool needs = false;
    };

    std::vector<Node> nodes_;

    std::int32_t check_(V x) const {
        if (!x.valid() || static_cast<std::size_t>(x.id) >= nodes_.size())
            throw std::out_of_range("Tape: invalid node id");
        return x.id;
    }

    bool needs_(V x) const { return nodes_[check_(x)].needs; }

    Tensor& grad_buf_(std::int32_t id) {
        Node& n = nodes_[static_cast<std::size_t>(id)];
        if (n.grad.empty()) n.grad = Tensor(n.value.dims);
        return n.grad;
    }

    void acc_(V x, const Tensor& g) {
        Tensor& gx = grad_buf_(x.id);
        for (std::size_t i = 0; i < g.v.size(); ++i) gx.v[i] += g.v[i];
    }

    V push_(Tensor value, bool needs, std::function<void()> back) {
        nodes_.push_back(Node{std::move(value), Tensor{}, std::move(back), needs});
        return V{static_cast<std::int32_t>(nodes_.size() - 1)};
    }

    template <class F>
    V unary_(Tensor out, V a, F f) {
        const bool needs = needs_(a);
        V o = push_(std::move(out), needs, nullptr);
        if (needs) nodes_[o.id].back = [this, o, a, f = std::move(f)]() { f(o, a); };
        return o;
    }

    template <class F>
    V unary2_(Tensor out, V a, V b, F f) {
        const bool needs = needs_(a) || needs_(b);
        V o = push_(std::move(out), needs, nullptr);
        if (needs) nodes_[o.id].back = [this, o, a, b, f = std::move(f)]() { f(o, a, b); };
        return o;
    }

    static void apply_rope_(Tensor& x, const std::vector<std::int64_t>& positions,
                            const Tensor& freqs, std::int64_t head_dim, double sign) {
        const std::int64_t r = x.dims[0], c = x.cols();
        const std::int64_t half = head_dim / 2;
        for (std::int64_t i = 0; i < r; ++i) {
            const double pos = static_cast<double>(positions[static_cast<std::size_t>(i)]);
            double* row = x.v.data() + i * c;
            for (std::int64_t h0 = 0; h0 < c; h0 += head_dim) {
                for (std::int64_t d = 0; d < half; ++d) {
                    const double ang = sign * pos * freqs.v[static_cast<std::size_t>(d)];
                    const double cs = std::cos(ang), sn = std::sin(ang);
                    double& a = row[h0 + 2 * d];
                    double& b = row[h0 + 2 * d + 1];
                    const double na = a * cs - b * sn;
                    const double nb = a * sn + b * cs;
                    a = na;
                    b = nb;
                }
            }
        }
    }
};

using V = Tape::V;

}  // namespace shine
