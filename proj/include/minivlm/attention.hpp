// SPDX-License-Identifier: Apache-2.0
//
// Multi-head scaled dot-product attention over already-projected Q/K/V,
// shared by the image encoder (full attention) and the language decoder
// (causal attention).

#pragma once

#include <cmath>
#include <vector>

#include "minivlm/tensor.hpp"

namespace minivlm {

// Optional capture of the normalized attention weights, one [L,L] matrix per
// head per layer, for tests that assert row-normalization.
template <class Real>
struct AttnTrace {
    std::vector<Tensor<Real>> weights;
};

template <class Real>
Tensor<Real> attention_core(const Tensor<Real>& q, const Tensor<Real>& k, const Tensor<Real>& v,
                            std::size_t heads, bool causal, AttnTrace<Real>* trace = nullptr) {
    if (q.rank() != 2 || q.shape != k.shape || q.shape != v.shape)
        throw ShapeMismatch("attention_core: Q/K/V shapes must match");
    std::size_t d = q.shape[1];
    if (heads == 0 || d % heads != 0) throw ShapeMismatch("attention_core: heads must divide width");
    std::size_t dh = d / heads;
    Real inv_sqrt = Real(1) / std::sqrt(Real(dh));
    std::vector<Tensor<Real>> ctx;
    ctx.reserve(heads);
    for (std::size_t h = 0; h < heads; ++h) {
        auto qh = slice_cols(q, h * dh, dh);
        auto kh = slice_cols(k, h * dh, dh);
        auto vh = slice_cols(v, h * dh, dh);
        auto scores = scale(matmul(qh, transpose2(kh)), inv_sqrt);
        auto weights = causal ? causal_softmax(scores) : softmax(scores, 1);
        if (trace) trace->weights.push_back(Tensor<Real>(weights.shape, weights.data));
        ctx.push_back(matmul(weights, vh));
    }
    return concat_cols(ctx);
}

}  // namespace minivlm
