// SPDX-License-Identifier: Apache-2.0
//
// Dense row-major tensors with reverse-mode autodiff on an explicit tape.
//
// The scalar type is a template parameter: float is the fast training mode,
// double is the checking mode used by the finite-difference oracle. A value
// participates in differentiation once it carries a tape node id; primitives
// record a pull-back closure on the tape whenever any input carries one.
// Backward replays the closures in reverse recording order, so gradient
// accumulation order is fixed and two runs over identical inputs produce
// bit-identical gradients.

#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <numeric>
#include <string>
#include <vector>

#include "minivlm/errors.hpp"

namespace minivlm {

using Shape = std::vector<std::size_t>;

inline std::size_t shape_numel(const Shape& s) {
    std::size_t n = 1;
    for (std::size_t e : s) n *= e;
    return n;
}

inline std::string shape_str(const Shape& s) {
    std::string r = "[";
    for (std::size_t i = 0; i < s.size(); ++i) {
        if (i) r += ",";
        r += std::to_string(s[i]);
    }
    return r + "]";
}

template <class Real>
class Tape;

template <class Real>
struct Tensor {
    Shape shape;
    std::vector<Real> data;
    Tape<Real>* tape = nullptr;
    int node = -1;

    Tensor() = default;

    Tensor(Shape s, std::vector<Real> values) : shape(std::move(s)), data(std::move(values)) {
        for (std::size_t e : shape)
            if (e < 1) throw ShapeMismatch("tensor extent must be >= 1");
        if (shape_numel(shape) != data.size())
            throw ShapeMismatch("tensor data length does not match shape " + shape_str(shape));
    }

    static Tensor zeros(Shape s) {
        std::size_t n = shape_numel(s);
        return Tensor(std::move(s), std::vector<Real>(n, Real(0)));
    }

    static Tensor full(Shape s, Real v) {
        std::size_t n = shape_numel(s);
        return Tensor(std::move(s), std::vector<Real>(n, v));
    }

    static Tensor scalar(Real v) { return Tensor({1}, {v}); }

    static Tensor identity(std::size_t n) {
        Tensor t = zeros({n, n});
        for (std::size_t i = 0; i < n; ++i) t.data[i * n + i] = Real(1);
        return t;
    }

    std::size_t numel() const { return data.size(); }
    std::size_t rank() const { return shape.size(); }
    bool recorded() const { return node >= 0; }

    // rank-2 accessors used throughout the model code
    std::size_t rows() const { return shape.at(0); }
    std::size_t cols() const { return shape.at(1); }
    Real& at(std::size_t i, std::size_t j) { return data[i * shape[1] + j]; }
    Real at(std::size_t i, std::size_t j) const { return data[i * shape[1] + j]; }

    template <class Other>
    static Tensor from(const Tensor<Other>& o) {
        std::vector<Real> v(o.data.size());
        for (std::size_t i = 0; i < v.size(); ++i) v[i] = static_cast<Real>(o.data[i]);
        return Tensor(o.shape, std::move(v));
    }
};

// Recorded program. Nodes are gradient slots; operations are pull-back
// closures over node ids. Invariant: an operation's inputs precede its
// output, so a single reverse sweep completes the chain rule.
template <class Real>
class Tape {
public:
    int alloc_node(std::size_t numel) {
        sizes_.push_back(numel);
        return static_cast<int>(sizes_.size()) - 1;
    }

    // Leaf registration: returns a copy of `t` bound to this tape.
    Tensor<Real> watch(const Tensor<Real>& t) {
        Tensor<Real> out = t;
        out.tape = this;
        out.node = alloc_node(t.numel());
        return out;
    }

    void record(std::vector<int> inputs, int output, std::function<void(Tape&)> pull) {
        for (int in : inputs)
            if (in >= output) throw Error("tape op inputs must precede the output");
        ops_.push_back({std::move(inputs), output, std::move(pull)});
    }

    // Reverse accumulation from a scalar loss. Gradients of nodes with no
    // path to the loss stay zero.
    void backward(const Tensor<Real>& loss) {
        if (loss.numel() != 1) throw NotScalarLoss();
        grads_.assign(sizes_.size(), {});
        for (std::size_t i = 0; i < sizes_.size(); ++i) grads_[i].assign(sizes_[i], Real(0));
        if (loss.node < 0) return;  // constant loss: all gradients are zero
        if (loss.tape != this) throw NotScalarLoss("loss was not recorded on this tape");
        grads_[loss.node][0] = Real(1);
        for (auto it = ops_.rbegin(); it != ops_.rend(); ++it) it->pull(*this);
    }

    std::vector<Real>& grad(int node) { return grads_.at(node); }
    const std::vector<Real>& grad(int node) const { return grads_.at(node); }
    const std::vector<Real>& grad(const Tensor<Real>& t) const { return grads_.at(t.node); }

    std::size_t num_nodes() const { return sizes_.size(); }
    std::size_t num_ops() const { return ops_.size(); }

private:
    struct OpRec {
        std::vector<int> inputs;
        int output;
        std::function<void(Tape&)> pull;
    };
    std::vector<std::size_t> sizes_;
    std::vector<std::vector<Real>> grads_;
    std::vector<OpRec> ops_;
};

namespace detail {

template <class Real>
Tape<Real>* common_tape(std::initializer_list<const Tensor<Real>*> ts) {
    Tape<Real>* tape = nullptr;
    for (const Tensor<Real>* t : ts) {
        if (!t->recorded()) continue;
        if (tape && t->tape != tape) throw Error("operands live on different tapes");
        tape = t->tape;
    }
    return tape;
}

template <class Real>
void bind(Tensor<Real>& out, Tape<Real>* tape) {
    out.tape = tape;
    out.node = tape->alloc_node(out.numel());
}

template <class Real>
void axpy(std::vector<Real>& acc, const std::vector<Real>& g) {
    for (std::size_t i = 0; i < acc.size(); ++i) acc[i] += g[i];
}

// Keep only ids of operands that are actually on the tape.
inline std::vector<int> real_inputs(std::initializer_list<int> ids) {
    std::vector<int> out;
    for (int id : ids)
        if (id >= 0) out.push_back(id);
    return out;
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Elementwise and structural primitives
// ---------------------------------------------------------------------------

template <class Real>
Tensor<Real> add(const Tensor<Real>& a, const Tensor<Real>& b) {
    if (a.shape != b.shape) throw ShapeMismatch("add: " + shape_str(a.shape) + " vs " + shape_str(b.shape));
    Tensor<Real> out = a;
    out.tape = nullptr;
    out.node = -1;
    for (std::size_t i = 0; i < out.data.size(); ++i) out.data[i] += b.data[i];
    if (Tape<Real>* tape = detail::common_tape<Real>({&a, &b})) {
        detail::bind(out, tape);
        int an = a.node, bn = b.node, on = out.node;
        tape->record(detail::real_inputs({an, bn}), on, [=](Tape<Real>& t) {
            const auto& g = t.grad(on);
            if (an >= 0) detail::axpy(t.grad(an), g);
            if (bn >= 0) detail::axpy(t.grad(bn), g);
        });
    }
    return out;
}

template <class Real>
Tensor<Real> mul(const Tensor<Real>& a, const Tensor<Real>& b) {
    if (a.shape != b.shape) throw ShapeMismatch("mul: " + shape_str(a.shape) + " vs " + shape_str(b.shape));
    Tensor<Real> out(a.shape, a.data);
    for (std::size_t i = 0; i < out.data.size(); ++i) out.data[i] *= b.data[i];
    if (Tape<Real>* tape = detail::common_tape<Real>({&a, &b})) {
        detail::bind(out, tape);
        int an = a.node, bn = b.node, on = out.node;
        tape->record(detail::real_inputs({an, bn}), on,
                     [=, av = a.data, bv = b.data](Tape<Real>& t) {
                         const auto& g = t.grad(on);
                         if (an >= 0) {
                             auto& ga = t.grad(an);
                             for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * bv[i];
                         }
                         if (bn >= 0) {
                             auto& gb = t.grad(bn);
                             for (std::size_t i = 0; i < g.size(); ++i) gb[i] += g[i] * av[i];
                         }
                     });
    }
    return out;
}

template <class Real>
Tensor<Real> scale(const Tensor<Real>& a, Real s) {
    Tensor<Real> out(a.shape, a.data);
    for (Real& v : out.data) v *= s;
    if (Tape<Real>* tape = detail::common_tape<Real>({&a})) {
        detail::bind(out, tape);
        int an = a.node, on = out.node;
        tape->record({an}, on, [=](Tape<Real>& t) {
            const auto& g = t.grad(on);
            auto& ga = t.grad(an);
            for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * s;
        });
    }
    return out;
}

// x: [n, d], bias: [d]; adds bias to every row. The only broadcast in v1.
template <class Real>
Tensor<Real> add_bias(const Tensor<Real>& x, const Tensor<Real>& bias) {
    if (x.rank() != 2 || bias.rank() != 1 || bias.shape[0] != x.shape[1])
        throw ShapeMismatch("add_bias: " + shape_str(x.shape) + " vs " + shape_str(bias.shape));
    std::size_t n = x.shape[0], d = x.shape[1];
    Tensor<Real> out(x.shape, x.data);
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < d; ++j) out.data[i * d + j] += bias.data[j];
    if (Tape<Real>* tape = detail::common_tape<Real>({&x, &bias})) {
        detail::bind(out, tape);
        int xn = x.node, bn = bias.node, on = out.node;
        tape->record(detail::real_inputs({xn, bn}), on, [=](Tape<Real>& t) {
            const auto& g = t.grad(on);
            if (xn >= 0) detail::axpy(t.grad(xn), g);
            if (bn >= 0) {
                auto& gb = t.grad(bn);
                for (std::size_t i = 0; i < n; ++i)
                    for (std::size_t j = 0; j < d; ++j) gb[j] += g[i * d + j];
            }
        });
    }
    return out;
}

template <class Real>
Tensor<Real> transpose2(const Tensor<Real>& a) {
    if (a.rank() != 2) throw ShapeMismatch("transpose2 needs rank 2, got " + shape_str(a.shape));
    std::size_t m = a.shape[0], n = a.shape[1];
    Tensor<Real> out = Tensor<Real>::zeros({n, m});
    for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j) out.data[j * m + i] = a.data[i * n + j];
    if (Tape<Real>* tape = detail::common_tape<Real>({&a})) {
        detail::bind(out, tape);
        int an = a.node, on = out.node;
        tape->record({an}, on, [=](Tape<Real>& t) {
            const auto& g = t.grad(on);
            auto& ga = t.grad(an);
            for (std::size_t i = 0; i < m; ++i)
                for (std::size_t j = 0; j < n; ++j) ga[i * n + j] += g[j * m + i];
        });
    }
    return out;
}

template <class Real>
Tensor<Real> slice_cols(const Tensor<Real>& x, std::size_t c0, std::size_t w) {
    if (x.rank() != 2 || c0 + w > x.shape[1])
        throw ShapeMismatch("slice_cols out of range on " + shape_str(x.shape));
    std::size_t n = x.shape[0], d = x.shape[1];
    Tensor<Real> out = Tensor<Real>::zeros({n, w});
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < w; ++j) out.data[i * w + j] = x.data[i * d + c0 + j];
    if (Tape<Real>* tape = detail::common_tape<Real>({&x})) {
        detail::bind(out, tape);
        int xn = x.node, on = out.node;
        tape->record({xn}, on, [=](Tape<Real>& t) {
            const auto& g = t.grad(on);
            auto& gx = t.grad(xn);
            for (std::size_t i = 0; i < n; ++i)
                for (std::size_t j = 0; j < w; ++j) gx[i * d + c0 + j] += g[i * w + j];
        });
    }
    return out;
}

template <class Real>
Tensor<Real> concat_cols(const std::vector<Tensor<Real>>& parts) {
    if (parts.empty()) throw ShapeMismatch("concat_cols: empty");
    std::size_t n = parts[0].shape.at(0), d = 0;
    for (const auto& p : parts) {
        if (p.rank() != 2 || p.shape[0] != n) throw ShapeMismatch("concat_cols: row mismatch");
        d += p.shape[1];
    }
    Tensor<Real> out = Tensor<Real>::zeros({n, d});
    std::size_t off = 0;
    for (const auto& p : parts) {
        std::size_t w = p.shape[1];
        for (std::size_t i = 0; i < n; ++i)
            for (std::size_t j = 0; j < w; ++j) out.data[i * d + off + j] = p.data[i * w + j];
        off += w;
    }
    Tape<Real>* tape = nullptr;
    for (const auto& p : parts)
        if (p.recorded()) tape = p.tape;
    if (tape) {
        detail::bind(out, tape);
        std::vector<int> ins, nodes;
        std::vector<std::size_t> widths;
        for (const auto& p : parts) {
            if (p.node >= 0) ins.push_back(p.node);
            widths.push_back(p.shape[1]);
            nodes.push_back(p.node);
        }
        int on = out.node;
        tape->record(ins, on, [=](Tape<Real>& t) {
            const auto& g = t.grad(on);
            std::size_t o = 0;
            for (std::size_t k = 0; k < nodes.size(); ++k) {
                std::size_t w = widths[k];
                if (nodes[k] >= 0) {
                    auto& gp = t.grad(nodes[k]);
                    for (std::size_t i = 0; i < n; ++i)
                        for (std::size_t j = 0; j < w; ++j) gp[i * w + j] += g[i * d + o + j];
                }
                o += w;
            }
        });
    }
    return out;
}

template <class Real>
Tensor<Real> concat_rows(const std::vector<Tensor<Real>>& parts) {
    if (parts.empty()) throw ShapeMismatch("concat_rows: empty");
    std::size_t d = parts[0].shape.at(1), n = 0;
    for (const auto& p : parts) {
        if (p.rank() != 2 || p.shape[1] != d) throw ShapeMismatch("concat_rows: col mismatch");
        n += p.shape[0];
    }
    Tensor<Real> out = Tensor<Real>::zeros({n, d});
    std::size_t off = 0;
    for (const auto& p : parts) {
        std::copy(p.data.begin(), p.data.end(), out.data.begin() + off);
        off += p.data.size();
    }
    Tape<Real>* tape = nullptr;
    for (const auto& p : parts)
        if (p.recorded()) tape = p.tape;
    if (tape) {
        detail::bind(out, tape);
        std::vector<int> ins, nodes;
        std::vector<std::size_t> counts;
        for (const auto& p : parts) {
            if (p.node >= 0) ins.push_back(p.node);
            nodes.push_back(p.node);
            counts.push_back(p.data.size());
        }
        int on = out.node;
        tape->record(ins, on, [=](Tape<Real>& t) {
            const auto& g = t.grad(on);
            std::size_t o = 0;
            for (std::size_t k = 0; k < nodes.size(); ++k) {
                if (nodes[k] >= 0) {
                    auto& gp = t.grad(nodes[k]);
                    for (std::size_t i = 0; i < counts[k]; ++i) gp[i] += g[o + i];
                }
                o += counts[k];
            }
        });
    }
    return out;
}

// Row-major relabeling of the extents; the buffer and the tape node are
// unchanged.
template <class Real>
Tensor<Real> reshape(const Tensor<Real>& x, Shape shape) {
    if (shape_numel(shape) != x.numel())
        throw ShapeMismatch("reshape: " + shape_str(x.shape) + " -> " + shape_str(shape));
    Tensor<Real> out(std::move(shape), x.data);
    out.tape = x.tape;
    out.node = x.node;
    return out;
}

// Row gather: out[t] = table[ids[t]]. Gradient scatters back into the table.
template <class Real>
Tensor<Real> embed_rows(const Tensor<Real>& table, const std::vector<int>& ids) {
    if (table.rank() != 2) throw ShapeMismatch("embed_rows: table must be rank 2");
    std::size_t v = table.shape[0], d = table.shape[1], L = ids.size();
    if (L == 0) throw ShapeMismatch("embed_rows: empty id list");
    Tensor<Real> out = Tensor<Real>::zeros({L, d});
    for (std::size_t t = 0; t < L; ++t) {
        if (ids[t] < 0 || static_cast<std::size_t>(ids[t]) >= v)
            throw ShapeMismatch("embed_rows: id out of vocabulary");
        std::copy(table.data.begin() + ids[t] * d, table.data.begin() + (ids[t] + 1) * d,
                  out.data.begin() + t * d);
    }
    if (Tape<Real>* tape = detail::common_tape<Real>({&table})) {
        detail::bind(out, tape);
        int tn = table.node, on = out.node;
        tape->record({tn}, on, [=](Tape<Real>& t) {
            const auto& g = t.grad(on);
            auto& gt = t.grad(tn);
            for (std::size_t r = 0; r < L; ++r)
                for (std::size_t j = 0; j < d; ++j) gt[ids[r] * d + j] += g[r * d + j];
        });
    }
    return out;
}

template <class Real>
Tensor<Real> sum_all(const Tensor<Real>& x) {
    Real s = std::accumulate(x.data.begin(), x.data.end(), Real(0));
    Tensor<Real> out = Tensor<Real>::scalar(s);
    if (Tape<Real>* tape = detail::common_tape<Real>({&x})) {
        detail::bind(out, tape);
        int xn = x.node, on = out.node;
        tape->record({xn}, on, [=](Tape<Real>& t) {
            Real g = t.grad(on)[0];
            auto& gx = t.grad(xn);
            for (Real& v : gx) v += g;
        });
    }
    return out;
}

// ---------------------------------------------------------------------------
// Nonlinearities
// ---------------------------------------------------------------------------

template <class Real>
Tensor<Real> swish(const Tensor<Real>& x) {
    Tensor<Real> out(x.shape, x.data);
    for (Real& v : out.data) {
        Real s = Real(1) / (Real(1) + std::exp(-v));
        v = v * s;
    }
    if (Tape<Real>* tape = detail::common_tape<Real>({&x})) {
        detail::bind(out, tape);
        int xn = x.node, on = out.node;
        tape->record({xn}, on, [=, xv = x.data](Tape<Real>& t) {
            const auto& g = t.grad(on);
            auto& gx = t.grad(xn);
            for (std::size_t i = 0; i < g.size(); ++i) {
                Real s = Real(1) / (Real(1) + std::exp(-xv[i]));
                gx[i] += g[i] * s * (Real(1) + xv[i] * (Real(1) - s));
            }
        });
    }
    return out;
}

template <class Real>
Tensor<Real> gelu(const Tensor<Real>& x) {
    const Real inv_sqrt2 = Real(0.7071067811865475244);
    const Real inv_sqrt2pi = Real(0.3989422804014326779);
    Tensor<Real> out(x.shape, x.data);
    for (Real& v : out.data) v = v * Real(0.5) * (Real(1) + std::erf(v * inv_sqrt2));
    if (Tape<Real>* tape = detail::common_tape<Real>({&x})) {
        detail::bind(out, tape);
        int xn = x.node, on = out.node;
        tape->record({xn}, on, [=, xv = x.data](Tape<Real>& t) {
            const auto& g = t.grad(on);
            auto& gx = t.grad(xn);
            for (std::size_t i = 0; i < g.size(); ++i) {
                Real cdf = Real(0.5) * (Real(1) + std::erf(xv[i] * inv_sqrt2));
                Real pdf = inv_sqrt2pi * std::exp(Real(-0.5) * xv[i] * xv[i]);
                gx[i] += g[i] * (cdf + xv[i] * pdf);
            }
        });
    }
    return out;
}

// ---------------------------------------------------------------------------
// Linear algebra
// ---------------------------------------------------------------------------

template <class Real>
Tensor<Real> matmul(const Tensor<Real>& a, const Tensor<Real>& b) {
    if (a.rank() != 2 || b.rank() != 2 || a.shape[1] != b.shape[0])
        throw ShapeMismatch("matmul: " + shape_str(a.shape) + " x " + shape_str(b.shape));
    std::size_t m = a.shape[0], k = a.shape[1], n = b.shape[1];
    Tensor<Real> out = Tensor<Real>::zeros({m, n});
    for (std::size_t i = 0; i < m; ++i)
        for (std::size_t t = 0; t < k; ++t) {
            Real av = a.data[i * k + t];
            if (av == Real(0)) continue;
            for (std::size_t j = 0; j < n; ++j) out.data[i * n + j] += av * b.data[t * n + j];
        }
    if (Tape<Real>* tape = detail::common_tape<Real>({&a, &b})) {
        detail::bind(out, tape);
        int an = a.node, bn = b.node, on = out.node;
        tape->record(detail::real_inputs({an, bn}), on,
                     [=, av = a.data, bv = b.data](Tape<Real>& t) {
                         const auto& g = t.grad(on);
                         if (an >= 0) {  // dA = G * B^T
                             auto& ga = t.grad(an);
                             for (std::size_t i = 0; i < m; ++i)
                                 for (std::size_t p = 0; p < k; ++p) {
                                     Real s = 0;
                                     for (std::size_t j = 0; j < n; ++j)
                                         s += g[i * n + j] * bv[p * n + j];
                                     ga[i * k + p] += s;
                                 }
                         }
                         if (bn >= 0) {  // dB = A^T * G
                             auto& gb = t.grad(bn);
                             for (std::size_t p = 0; p < k; ++p)
                                 for (std::size_t i = 0; i < m; ++i) {
                                     Real s = av[i * k + p];
                                     if (s == Real(0)) continue;
                                     for (std::size_t j = 0; j < n; ++j)
                                         gb[p * n + j] += s * g[i * n + j];
                                 }
                         }
                     });
    }
    return out;
}

// Non-overlapping 2x2 windows, stride 2.
// x: [C_in, H, W], w: [C_out, C_in, 2, 2], b: [C_out] -> [C_out, H/2, W/2]
template <class Real>
Tensor<Real> conv2x2_s2(const Tensor<Real>& x, const Tensor<Real>& w, const Tensor<Real>& b) {
    if (x.rank() != 3) throw ShapeMismatch("conv2x2_s2: input must be [C,H,W]");
    if (w.rank() != 4 || w.shape[2] != 2 || w.shape[3] != 2 || w.shape[1] != x.shape[0])
        throw ShapeMismatch("conv2x2_s2: kernel must be [C_out,C_in,2,2]");
    if (b.rank() != 1 || b.shape[0] != w.shape[0]) throw ShapeMismatch("conv2x2_s2: bias mismatch");
    std::size_t ci = x.shape[0], h = x.shape[1], wd = x.shape[2], co = w.shape[0];
    if (h % 2 != 0 || wd % 2 != 0) throw OddGrid("conv2x2_s2: H and W must be even");
    std::size_t oh = h / 2, ow = wd / 2;
    Tensor<Real> out = Tensor<Real>::zeros({co, oh, ow});
    auto xat = [&](std::size_t c, std::size_t i, std::size_t j) { return x.data[(c * h + i) * wd + j]; };
    auto wat = [&](std::size_t o, std::size_t c, std::size_t p, std::size_t q) {
        return w.data[((o * ci + c) * 2 + p) * 2 + q];
    };
    for (std::size_t o = 0; o < co; ++o)
        for (std::size_t i = 0; i < oh; ++i)
            for (std::size_t j = 0; j < ow; ++j) {
                Real s = b.data[o];
                for (std::size_t c = 0; c < ci; ++c)
                    for (std::size_t p = 0; p < 2; ++p)
                        for (std::size_t q = 0; q < 2; ++q)
                            s += wat(o, c, p, q) * xat(c, 2 * i + p, 2 * j + q);
                out.data[(o * oh + i) * ow + j] = s;
            }
    if (Tape<Real>* tape = detail::common_tape<Real>({&x, &w, &b})) {
        detail::bind(out, tape);
        int xn = x.node, wn = w.node, bn = b.node, on = out.node;
        tape->record(detail::real_inputs({xn, wn, bn}), on,
                     [=, xv = x.data, wv = w.data](Tape<Real>& t) {
                         const auto& g = t.grad(on);
                         auto gat = [&](std::size_t o, std::size_t i, std::size_t j) {
                             return g[(o * oh + i) * ow + j];
                         };
                         if (bn >= 0) {
                             auto& gb = t.grad(bn);
                             for (std::size_t o = 0; o < co; ++o)
                                 for (std::size_t i = 0; i < oh; ++i)
                                     for (std::size_t j = 0; j < ow; ++j) gb[o] += gat(o, i, j);
                         }
                         if (wn >= 0) {
                             auto& gw = t.grad(wn);
                             for (std::size_t o = 0; o < co; ++o)
                                 for (std::size_t c = 0; c < ci; ++c)
                                     for (std::size_t p = 0; p < 2; ++p)
                                         for (std::size_t q = 0; q < 2; ++q) {
                                             Real s = 0;
                                             for (std::size_t i = 0; i < oh; ++i)
                                                 for (std::size_t j = 0; j < ow; ++j)
                                                     s += gat(o, i, j) *
                                                          xv[(c * h + 2 * i + p) * wd + 2 * j + q];
                                             gw[((o * ci + c) * 2 + p) * 2 + q] += s;
                                         }
                         }
                         if (xn >= 0) {
                             auto& gx = t.grad(xn);
                             for (std::size_t o = 0; o < co; ++o)
                                 for (std::size_t c = 0; c < ci; ++c)
                                     for (std::size_t p = 0; p < 2; ++p)
                                         for (std::size_t q = 0; q < 2; ++q) {
                                             Real wq = wv[((o * ci + c) * 2 + p) * 2 + q];
                                             if (wq == Real(0)) continue;
                                             for (std::size_t i = 0; i < oh; ++i)
                                                 for (std::size_t j = 0; j < ow; ++j)
                                                     gx[(c * h + 2 * i + p) * wd + 2 * j + q] +=
                                                         wq * gat(o, i, j);
                                         }
                         }
                     });
    }
    return out;
}

// Gated feed-forward: (swish(xW) .* xV) * W2
template <class Real>
Tensor<Real> swiglu(const Tensor<Real>& x, const Tensor<Real>& w, const Tensor<Real>& v,
                    const Tensor<Real>& w2) {
    return matmul(mul(swish(matmul(x, w)), matmul(x, v)), w2);
}

// ---------------------------------------------------------------------------
// Normalizations and softmax
// ---------------------------------------------------------------------------

// Max-subtracted exponential normalization along `axis`.
template <class Real>
Tensor<Real> softmax(const Tensor<Real>& x, std::size_t axis) {
    if (axis >= x.rank()) throw ShapeMismatch("softmax: bad axis");
    for (Real v : x.data)
        if (!std::isfinite(v)) throw NonFiniteInput("softmax input is not finite");
    std::size_t n = x.shape[axis];
    std::size_t inner = 1;
    for (std::size_t a = axis + 1; a < x.rank(); ++a) inner *= x.shape[a];
    std::size_t outer = x.numel() / (n * inner);
    Tensor<Real> out(x.shape, x.data);
    auto for_each_slice = [&](auto&& fn) {
        for (std::size_t ou = 0; ou < outer; ++ou)
            for (std::size_t in = 0; in < inner; ++in) {
                std::size_t base = ou * n * inner + in;
                fn(base, inner);
            }
    };
    for_each_slice([&](std::size_t base, std::size_t stride) {
        Real mx = out.data[base];
        for (std::size_t i = 1; i < n; ++i) mx = std::max(mx, out.data[base + i * stride]);
        Real sum = 0;
        for (std::size_t i = 0; i < n; ++i) {
            Real e = std::exp(out.data[base + i * stride] - mx);
            out.data[base + i * stride] = e;
            sum += e;
        }
        for (std::size_t i = 0; i < n; ++i) out.data[base + i * stride] /= sum;
    });
    if (Tape<Real>* tape = detail::common_tape<Real>({&x})) {
        detail::bind(out, tape);
        int xn = x.node, on = out.node;
        tape->record({xn}, on, [=, yv = out.data](Tape<Real>& t) {
            const auto& g = t.grad(on);
            auto& gx = t.grad(xn);
            for (std::size_t ou = 0; ou < outer; ++ou)
                for (std::size_t in = 0; in < inner; ++in) {
                    std::size_t base = ou * n * inner + in;
                    Real dot = 0;
                    for (std::size_t i = 0; i < n; ++i)
                        dot += g[base + i * inner] * yv[base + i * inner];
                    for (std::size_t i = 0; i < n; ++i)
                        gx[base + i * inner] +=
                            yv[base + i * inner] * (g[base + i * inner] - dot);
                }
        });
    }
    return out;
}

// Softmax over the causal prefix of each row of a square score matrix:
// row i is normalized over columns j <= i, columns j > i are zero.
template <class Real>
Tensor<Real> causal_softmax(const Tensor<Real>& x) {
    if (x.rank() != 2 || x.shape[0] != x.shape[1])
        throw ShapeMismatch("causal_softmax: scores must be square");
    for (Real v : x.data)
        if (!std::isfinite(v)) throw NonFiniteInput("causal_softmax input is not finite");
    std::size_t L = x.shape[0];
    Tensor<Real> out = Tensor<Real>::zeros({L, L});
    for (std::size_t i = 0; i < L; ++i) {
        Real mx = x.data[i * L];
        for (std::size_t j = 1; j <= i; ++j) mx = std::max(mx, x.data[i * L + j]);
        Real sum = 0;
        for (std::size_t j = 0; j <= i; ++j) {
            Real e = std::exp(x.data[i * L + j] - mx);
            out.data[i * L + j] = e;
            sum += e;
        }
        for (std::size_t j = 0; j <= i; ++j) out.data[i * L + j] /= sum;
    }
    if (Tape<Real>* tape = detail::common_tape<Real>({&x})) {
        detail::bind(out, tape);
        int xn = x.node, on = out.node;
        tape->record({xn}, on, [=, yv = out.data](Tape<Real>& t) {
            const auto& g = t.grad(on);
            auto& gx = t.grad(xn);
            for (std::size_t i = 0; i < L; ++i) {
                Real dot = 0;
                for (std::size_t j = 0; j <= i; ++j) dot += g[i * L + j] * yv[i * L + j];
                for (std::size_t j = 0; j <= i; ++j)
                    gx[i * L + j] += yv[i * L + j] * (g[i * L + j] - dot);
            }
        });
    }
    return out;
}

// Softmax over an arbitrary per-row admissible set of a square score matrix.
// allow[i*L+j] marks whether row i may attend column j; every row needs at
// least one admissible column. Disallowed entries are zero in the output.
template <class Real>
Tensor<Real> masked_softmax(const Tensor<Real>& x, const std::vector<bool>& allow) {
    if (x.rank() != 2 || x.shape[0] != x.shape[1])
        throw ShapeMismatch("masked_softmax: scores must be square");
    std::size_t L = x.shape[0];
    if (allow.size() != L * L) throw ShapeMismatch("masked_softmax: mask size mismatch");
    for (Real v : x.data)
        if (!std::isfinite(v)) throw NonFiniteInput("masked_softmax input is not finite");
    Tensor<Real> out = Tensor<Real>::zeros({L, L});
    for (std::size_t i = 0; i < L; ++i) {
        bool any = false;
        Real mx = 0;
        for (std::size_t j = 0; j < L; ++j) {
            if (!allow[i * L + j]) continue;
            mx = any ? std::max(mx, x.data[i * L + j]) : x.data[i * L + j];
            any = true;
        }
        if (!any) throw ShapeMismatch("masked_softmax: row with no admissible column");
        Real sum = 0;
        for (std::size_t j = 0; j < L; ++j) {
            if (!allow[i * L + j]) continue;
            Real e = std::exp(x.data[i * L + j] - mx);
            out.data[i * L + j] = e;
            sum += e;
        }
        for (std::size_t j = 0; j < L; ++j)
            if (allow[i * L + j]) out.data[i * L + j] /= sum;
    }
    if (Tape<Real>* tape = detail::common_tape<Real>({&x})) {
        detail::bind(out, tape);
        int xn = x.node, on = out.node;
        tape->record({xn}, on, [=, yv = out.data](Tape<Real>& t) {
            const auto& g = t.grad(on);
            auto& gx = t.grad(xn);
            for (std::size_t i = 0; i < L; ++i) {
                Real dot = 0;
                for (std::size_t j = 0; j < L; ++j) dot += g[i * L + j] * yv[i * L + j];
                for (std::size_t j = 0; j < L; ++j)
                    if (allow[i * L + j])
                        gx[i * L + j] += yv[i * L + j] * (g[i * L + j] - dot);
            }
        });
    }
    return out;
}

// Mean-centered variance normalization with learned scale, per row.
template <class Real>
Tensor<Real> layer_norm_rows(const Tensor<Real>& x, const Tensor<Real>& gain,
                             Real eps = Real(1e-5)) {
    if (x.rank() != 2 || gain.rank() != 1 || gain.shape[0] != x.shape[1])
        throw ShapeMismatch("layer_norm_rows: " + shape_str(x.shape) + " vs " + shape_str(gain.shape));
    std::size_t n = x.shape[0], d = x.shape[1];
    Tensor<Real> out = Tensor<Real>::zeros({n, d});
    std::vector<Real> xhat(n * d), inv_sigma(n);
    for (std::size_t i = 0; i < n; ++i) {
        Real mean = 0;
        for (std::size_t j = 0; j < d; ++j) mean += x.data[i * d + j];
        mean /= Real(d);
        Real var = 0;
        for (std::size_t j = 0; j < d; ++j) {
            Real c = x.data[i * d + j] - mean;
            var += c * c;
        }
        var /= Real(d);
        Real is = Real(1) / std::sqrt(var + eps);
        inv_sigma[i] = is;
        for (std::size_t j = 0; j < d; ++j) {
            xhat[i * d + j] = (x.data[i * d + j] - mean) * is;
            out.data[i * d + j] = xhat[i * d + j] * gain.data[j];
        }
    }
    if (Tape<Real>* tape = detail::common_tape<Real>({&x, &gain})) {
        detail::bind(out, tape);
        int xn = x.node, gn = gain.node, on = out.node;
        tape->record(detail::real_inputs({xn, gn}), on,
                     [=, gv = gain.data](Tape<Real>& t) {
                         const auto& g = t.grad(on);
                         if (gn >= 0) {
                             auto& gg = t.grad(gn);
                             for (std::size_t i = 0; i < n; ++i)
                                 for (std::size_t j = 0; j < d; ++j)
                                     gg[j] += g[i * d + j] * xhat[i * d + j];
                         }
                         if (xn >= 0) {
                             auto& gx = t.grad(xn);
                             for (std::size_t i = 0; i < n; ++i) {
                                 Real mean_dh = 0, mean_dh_xhat = 0;
                                 for (std::size_t j = 0; j < d; ++j) {
                                     Real dh = g[i * d + j] * gv[j];
                                     mean_dh += dh;
                                     mean_dh_xhat += dh * xhat[i * d + j];
                                 }
                                 mean_dh /= Real(d);
                                 mean_dh_xhat /= Real(d);
                                 for (std::size_t j = 0; j < d; ++j) {
                                     Real dh = g[i * d + j] * gv[j];
                                     gx[i * d + j] += inv_sigma[i] *
                                         (dh - mean_dh - xhat[i * d + j] * mean_dh_xhat);
                                 }
                             }
                         }
                     });
    }
    return out;
}

// Root-mean-square normalization with learned scale, per row (no centering).
template <class Real>
Tensor<Real> rms_norm_rows(const Tensor<Real>& x, const Tensor<Real>& gain, Real eps = Real(1e-5)) {
    if (x.rank() != 2 || gain.rank() != 1 || gain.shape[0] != x.shape[1])
        throw ShapeMismatch("rms_norm_rows: " + shape_str(x.shape) + " vs " + shape_str(gain.shape));
    std::size_t n = x.shape[0], d = x.shape[1];
    Tensor<Real> out = Tensor<Real>::zeros({n, d});
    std::vector<Real> inv_r(n);
    for (std::size_t i = 0; i < n; ++i) {
        Real ms = 0;
        for (std::size_t j = 0; j < d; ++j) ms += x.data[i * d + j] * x.data[i * d + j];
        ms /= Real(d);
        Real ir = Real(1) / std::sqrt(ms + eps);
        inv_r[i] = ir;
        for (std::size_t j = 0; j < d; ++j) out.data[i * d + j] = x.data[i * d + j] * ir * gain.data[j];
    }
    if (Tape<Real>* tape = detail::common_tape<Real>({&x, &gain})) {
        detail::bind(out, tape);
        int xn = x.node, gn = gain.node, on = out.node;
        tape->record(detail::real_inputs({xn, gn}), on,
                     [=, xv = x.data, gv = gain.data](Tape<Real>& t) {
                         const auto& g = t.grad(on);
                         if (gn >= 0) {
                             auto& gg = t.grad(gn);
                             for (std::size_t i = 0; i < n; ++i)
                                 for (std::size_t j = 0; j < d; ++j)
                                     gg[j] += g[i * d + j] * xv[i * d + j] * inv_r[i];
                         }
                         if (xn >= 0) {
                             auto& gx = t.grad(xn);
                             for (std::size_t i = 0; i < n; ++i) {
                                 Real dot = 0;
                                 for (std::size_t j = 0; j < d; ++j)
                                     dot += g[i * d + j] * gv[j] * xv[i * d + j];
                                 Real ir = inv_r[i];
                                 Real c = dot * ir * ir * ir / Real(d);
                                 for (std::size_t j = 0; j < d; ++j)
                                     gx[i * d + j] += g[i * d + j] * gv[j] * ir - xv[i * d + j] * c;
                             }
                         }
                     });
    }
    return out;
}

// ---------------------------------------------------------------------------
// Per-row expert routing
// ---------------------------------------------------------------------------

// y[i] = x[i] * (route_alt[i] ? w_alt : w_main). Row i's gradient flows only
// into the expert that produced it.
template <class Real>
Tensor<Real> routed_linear(const Tensor<Real>& x, const std::vector<bool>& route_alt,
                           const Tensor<Real>& w_main, const Tensor<Real>& w_alt) {
    if (x.rank() != 2 || w_main.rank() != 2 || w_alt.rank() != 2)
        throw ShapeMismatch("routed_linear: rank-2 operands required");
    if (w_main.shape != w_alt.shape || w_main.shape[0] != x.shape[1])
        throw ShapeMismatch("routed_linear: " + shape_str(x.shape) + " x " + shape_str(w_main.shape));
    std::size_t L = x.shape[0], k = x.shape[1], n = w_main.shape[1];
    if (route_alt.size() != L) throw ShapeMismatch("routed_linear: route length mismatch");
    Tensor<Real> out = Tensor<Real>::zeros({L, n});
    for (std::size_t i = 0; i < L; ++i) {
        const Real* w = route_alt[i] ? w_alt.data.data() : w_main.data.data();
        for (std::size_t t = 0; t < k; ++t) {
            Real xv = x.data[i * k + t];
            if (xv == Real(0)) continue;
            for (std::size_t j = 0; j < n; ++j) out.data[i * n + j] += xv * w[t * n + j];
        }
    }
    if (Tape<Real>* tape = detail::common_tape<Real>({&x, &w_main, &w_alt})) {
        detail::bind(out, tape);
        int xn = x.node, mn = w_main.node, an = w_alt.node, on = out.node;
        tape->record(detail::real_inputs({xn, mn, an}), on,
                     [=, xv = x.data, wm = w_main.data, wa = w_alt.data](Tape<Real>& t) {
                         const auto& g = t.grad(on);
                         for (std::size_t i = 0; i < L; ++i) {
                             bool alt = route_alt[i];
                             const std::vector<Real>& w = alt ? wa : wm;
                             if (xn >= 0) {
                                 auto& gx = t.grad(xn);
                                 for (std::size_t p = 0; p < k; ++p) {
                                     Real s = 0;
                                     for (std::size_t j = 0; j < n; ++j)
                                         s += g[i * n + j] * w[p * n + j];
                                     gx[i * k + p] += s;
                                 }
                             }
                             int wnode = alt ? an : mn;
                             if (wnode >= 0) {
                                 auto& gw = t.grad(wnode);
                                 for (std::size_t p = 0; p < k; ++p) {
                                     Real s = xv[i * k + p];
                                     if (s == Real(0)) continue;
                                     for (std::size_t j = 0; j < n; ++j)
                                         gw[p * n + j] += s * g[i * n + j];
                                 }
                             }
                         }
                     });
    }
    return out;
}

// ---------------------------------------------------------------------------
// Loss
// ---------------------------------------------------------------------------

// Mean cross-entropy over the rows selected by `row_mask`.
// logits: [L, V]; targets[t] is the gold class for row t (only read when
// row_mask[t] is set).
template <class Real>
Tensor<Real> masked_cross_entropy(const Tensor<Real>& logits, const std::vector<int>& targets,
                                  const std::vector<bool>& row_mask) {
    if (logits.rank() != 2) throw ShapeMismatch("masked_cross_entropy: logits must be [L,V]");
    std::size_t L = logits.shape[0], V = logits.shape[1];
    if (targets.size() != L || row_mask.size() != L)
        throw ShapeMismatch("masked_cross_entropy: mask/target length mismatch");
    std::size_t count = 0;
    for (bool m : row_mask) count += m ? 1 : 0;
    if (count == 0) throw EmptyTarget("masked_cross_entropy: no selected rows");
    Real loss = 0;
    for (std::size_t t = 0; t < L; ++t) {
        if (!row_mask[t]) continue;
        if (targets[t] < 0 || static_cast<std::size_t>(targets[t]) >= V)
            throw ShapeMismatch("masked_cross_entropy: target out of range");
        Real mx = logits.data[t * V];
        for (std::size_t j = 1; j < V; ++j) mx = std::max(mx, logits.data[t * V + j]);
        Real sum = 0;
        for (std::size_t j = 0; j < V; ++j) sum += std::exp(logits.data[t * V + j] - mx);
        loss += (mx + std::log(sum)) - logits.data[t * V + targets[t]];
    }
    Tensor<Real> out = Tensor<Real>::scalar(loss / Real(count));
    if (Tape<Real>* tape = detail::common_tape<Real>({&logits})) {
        detail::bind(out, tape);
        int ln = logits.node, on = out.node;
        tape->record({ln}, on, [=, zv = logits.data](Tape<Real>& t) {
            Real g = t.grad(on)[0] / Real(count);
            auto& gl = t.grad(ln);
            for (std::size_t r = 0; r < L; ++r) {
                if (!row_mask[r]) continue;
                Real mx = zv[r * V];
                for (std::size_t j = 1; j < V; ++j) mx = std::max(mx, zv[r * V + j]);
                Real sum = 0;
                for (std::size_t j = 0; j < V; ++j) sum += std::exp(zv[r * V + j] - mx);
                for (std::size_t j = 0; j < V; ++j) {
                    Real p = std::exp(zv[r * V + j] - mx) / sum;
                    gl[r * V + j] += g * (p - (static_cast<std::size_t>(targets[r]) == j ? Real(1) : Real(0)));
                }
            }
        });
    }
    return out;
}

}  // namespace minivlm
