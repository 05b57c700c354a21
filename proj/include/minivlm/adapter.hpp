// SPDX-License-Identifier: Apache-2.0
//
// Vision-to-language bridge: a 2x2 stride-2 convolution over the encoder's
// feature grid (sequence length divided by four) followed by a SwiGLU
// projection into the decoder's embedding width. The conv keeps the channel
// count; the width change is the SwiGLU's job.

#pragma once

#include <string>

#include "minivlm/checkpoint.hpp"
#include "minivlm/rng.hpp"
#include "minivlm/tensor.hpp"

namespace minivlm {

struct AdapterConfig {
    std::size_t in_dim = 32;    // encoder embed width
    std::size_t hidden_dim = 0; // 0 means the default 4*out_dim
    std::size_t out_dim = 64;   // decoder embed width
    std::size_t grid_h = 4;
    std::size_t grid_w = 4;

    std::size_t hidden() const { return hidden_dim ? hidden_dim : 4 * out_dim; }

    void validate() const {
        if (in_dim < 1 || out_dim < 1 || grid_h < 1 || grid_w < 1)
            throw ShapeMismatch("adapter dims must be >= 1");
        if (grid_h % 2 != 0 || grid_w % 2 != 0)
            throw OddGrid("adapter grid must be even");
    }
};

// (grid_h/2) * (grid_w/2)
inline std::size_t adapter_output_len(std::size_t grid_h, std::size_t grid_w) {
    if (grid_h % 2 != 0 || grid_w % 2 != 0) throw OddGrid("adapter grid must be even");
    return (grid_h / 2) * (grid_w / 2);
}

template <class Real>
void init_adapter_params(const AdapterConfig& cfg, Rng& rng, ParamStore<Real>& store) {
    cfg.validate();
    auto uniform = [&](Shape shape, double s) {
        auto t = Tensor<Real>::zeros(std::move(shape));
        for (auto& v : t.data) v = static_cast<Real>(rng.uniform(-s, s));
        return t;
    };
    double sc = 1.0 / std::sqrt(4.0 * cfg.in_dim);
    double si = 1.0 / std::sqrt(static_cast<double>(cfg.in_dim));
    double sh = 1.0 / std::sqrt(static_cast<double>(cfg.hidden()));
    store.add("adapter.conv.w", uniform({cfg.in_dim, cfg.in_dim, 2, 2}, sc));
    store.add("adapter.conv.b", Tensor<Real>::zeros({cfg.in_dim}));
    store.add("adapter.swiglu.W", uniform({cfg.in_dim, cfg.hidden()}, si));
    store.add("adapter.swiglu.V", uniform({cfg.in_dim, cfg.hidden()}, si));
    store.add("adapter.swiglu.W2", uniform({cfg.hidden(), cfg.out_dim}, sh));
    store.add("adapter.swiglu.bW", Tensor<Real>::zeros({cfg.hidden()}));
    store.add("adapter.swiglu.bV", Tensor<Real>::zeros({cfg.hidden()}));
    store.add("adapter.swiglu.bW2", Tensor<Real>::zeros({cfg.out_dim}));
}

// 2x2 stride-2 convolution applied to a feature sequence laid out on an
// (grid_h, grid_w) grid: [grid_h*grid_w, dim] -> [grid_h*grid_w/4, dim].
// Shared by the adapter and the video frontend's extra compression conv.
template <class Real>
Tensor<Real> seq_conv2x2_s2(const Tensor<Real>& features, std::size_t grid_h, std::size_t grid_w,
                            const Tensor<Real>& w, const Tensor<Real>& b) {
    if (features.rank() != 2 || features.shape[0] != grid_h * grid_w)
        throw ShapeMismatch("seq_conv2x2_s2: sequence length must equal grid_h*grid_w");
    if (grid_h % 2 != 0 || grid_w % 2 != 0) throw OddGrid("seq_conv2x2_s2: grid must be even");
    std::size_t dim = features.shape[1];
    auto grid = reshape(transpose2(features), {dim, grid_h, grid_w});
    auto conv = conv2x2_s2(grid, w, b);
    return transpose2(reshape(conv, {dim, (grid_h / 2) * (grid_w / 2)}));
}

// Convolution stage of the adapter alone, exposed for the locality property.
template <class Real>
Tensor<Real> adapt_conv_stage(const Tensor<Real>& features, const AdapterConfig& cfg,
                              const ParamStore<Real>& p) {
    cfg.validate();
    if (features.rank() == 2 && features.shape[1] != cfg.in_dim)
        throw ShapeMismatch("adapt: feature width mismatch");
    return seq_conv2x2_s2(features, cfg.grid_h, cfg.grid_w, p.get("adapter.conv.w"),
                          p.get("adapter.conv.b"));
}

// Sequence [grid_h*grid_w, in_dim] -> [grid_h*grid_w/4, out_dim].
template <class Real>
Tensor<Real> adapt(const Tensor<Real>& features, const AdapterConfig& cfg,
                   const ParamStore<Real>& p) {
    auto seq = adapt_conv_stage(features, cfg, p);
    auto gate = swish(add_bias(matmul(seq, p.get("adapter.swiglu.W")), p.get("adapter.swiglu.bW")));
    auto lin = add_bias(matmul(seq, p.get("adapter.swiglu.V")), p.get("adapter.swiglu.bV"));
    return add_bias(matmul(mul(gate, lin), p.get("adapter.swiglu.W2")), p.get("adapter.swiglu.bW2"));
}

}  // namespace minivlm
