// SPDX-License-Identifier: Apache-2.0
//
// Toy ViT encoder: patchify, linear embed, learned positional embeddings,
// pre-norm transformer blocks with full self-attention. A desk-scale stand-in
// for a large pre-trained image encoder; the defaults reproduce the production-
// scale token counts (patch 14: 1344px -> 9216 tokens, 1120px -> 6400).

#pragma once

#include <string>
#include <vector>

#include "minivlm/attention.hpp"
#include "minivlm/checkpoint.hpp"
#include "minivlm/image.hpp"
#include "minivlm/rng.hpp"
#include "minivlm/tensor.hpp"

namespace minivlm {

struct VitConfig {
    std::size_t patch_size = 14;
    std::size_t embed_dim = 32;
    std::size_t depth = 1;
    std::size_t heads = 2;
    std::size_t grid_h = 4;
    std::size_t grid_w = 4;
    std::size_t channels = 1;
    std::size_t mlp_hidden() const { return 4 * embed_dim; }
    std::size_t n_patches() const { return grid_h * grid_w; }
    std::size_t patch_dim() const { return patch_size * patch_size * channels; }

    void validate() const {
        if (patch_size < 1 || embed_dim < 1 || heads < 1 || grid_h < 1 || grid_w < 1)
            throw ShapeMismatch("vit config extents must be >= 1");
        if (embed_dim % heads != 0) throw ShapeMismatch("vit embed_dim must divide by heads");
    }
};

// (resolution / patch_size)^2
inline std::size_t token_count(std::size_t resolution, std::size_t patch_size) {
    if (patch_size == 0 || resolution % patch_size != 0)
        throw IndivisibleImage("resolution not divisible by patch size");
    std::size_t g = resolution / patch_size;
    return g * g;
}

// ImageGrid -> [n_patches, patch_size^2 * C]; row-major patch order, and
// within a patch channel-major then row-major pixels.
template <class Real>
Tensor<Real> patchify(const ImageGrid& img, std::size_t patch_size) {
    if (patch_size == 0 || img.height % patch_size != 0 || img.width % patch_size != 0)
        throw IndivisibleImage("image extents not divisible by patch size");
    std::size_t gh = img.height / patch_size, gw = img.width / patch_size;
    std::size_t pd = patch_size * patch_size * img.channels;
    Tensor<Real> out = Tensor<Real>::zeros({gh * gw, pd});
    for (std::size_t py = 0; py < gh; ++py)
        for (std::size_t px = 0; px < gw; ++px) {
            std::size_t row = py * gw + px;
            std::size_t o = 0;
            for (std::size_t c = 0; c < img.channels; ++c)
                for (std::size_t dy = 0; dy < patch_size; ++dy)
                    for (std::size_t dx = 0; dx < patch_size; ++dx)
                        out.data[row * pd + o++] = static_cast<Real>(
                            img.at(c, py * patch_size + dy, px * patch_size + dx));
        }
    return out;
}

template <class Real>
void init_vit_params(const VitConfig& cfg, Rng& rng, ParamStore<Real>& store) {
    cfg.validate();
    auto uniform = [&](Shape shape, double s) {
        auto t = Tensor<Real>::zeros(std::move(shape));
        for (auto& v : t.data) v = static_cast<Real>(rng.uniform(-s, s));
        return t;
    };
    double se = 1.0 / std::sqrt(static_cast<double>(cfg.patch_dim()));
    double sd = 1.0 / std::sqrt(static_cast<double>(cfg.embed_dim));
    double sh = 1.0 / std::sqrt(static_cast<double>(cfg.mlp_hidden()));
    store.add("vit.embed.w", uniform({cfg.patch_dim(), cfg.embed_dim}, se));
    store.add("vit.embed.b", Tensor<Real>::zeros({cfg.embed_dim}));
    store.add("vit.pos", uniform({cfg.n_patches(), cfg.embed_dim}, 0.02));
    for (std::size_t i = 0; i < cfg.depth; ++i) {
        std::string p = "vit." + std::to_string(i) + ".";
        store.add(p + "ln1.g", Tensor<Real>::full({cfg.embed_dim}, Real(1)));
        for (const char* name : {"attn.q", "attn.k", "attn.v", "attn.o"})
            store.add(p + name, uniform({cfg.embed_dim, cfg.embed_dim}, sd));
        store.add(p + "ln2.g", Tensor<Real>::full({cfg.embed_dim}, Real(1)));
        store.add(p + "fc1.w", uniform({cfg.embed_dim, cfg.mlp_hidden()}, sd));
        store.add(p + "fc1.b", Tensor<Real>::zeros({cfg.mlp_hidden()}));
        store.add(p + "fc2.w", uniform({cfg.mlp_hidden(), cfg.embed_dim}, sh));
        store.add(p + "fc2.b", Tensor<Real>::zeros({cfg.embed_dim}));
    }
}

// patches: [n_patches, patch_dim] -> [n_patches, embed_dim]
template <class Real>
Tensor<Real> vit_forward(const Tensor<Real>& patches, const VitConfig& cfg,
                         const ParamStore<Real>& p, AttnTrace<Real>* trace = nullptr) {
    cfg.validate();
    if (patches.rank() != 2 || patches.shape[0] != cfg.n_patches())
        throw ShapeMismatch("vit_forward: patch count must equal grid_h*grid_w");
    if (patches.shape[1] != cfg.patch_dim())
        throw ShapeMismatch("vit_forward: patch width must equal patch_size^2*C");
    auto x = add(add_bias(matmul(patches, p.get("vit.embed.w")), p.get("vit.embed.b")),
                 p.get("vit.pos"));
    for (std::size_t i = 0; i < cfg.depth; ++i) {
        std::string pre = "vit." + std::to_string(i) + ".";
        auto normed = layer_norm_rows(x, p.get(pre + "ln1.g"));
        auto q = matmul(normed, p.get(pre + "attn.q"));
        auto k = matmul(normed, p.get(pre + "attn.k"));
        auto v = matmul(normed, p.get(pre + "attn.v"));
        auto ctx = attention_core(q, k, v, cfg.heads, /*causal=*/false, trace);
        x = add(x, matmul(ctx, p.get(pre + "attn.o")));
        auto normed2 = layer_norm_rows(x, p.get(pre + "ln2.g"));
        auto h = gelu(add_bias(matmul(normed2, p.get(pre + "fc1.w")), p.get(pre + "fc1.b")));
        x = add(x, add_bias(matmul(h, p.get(pre + "fc2.w")), p.get(pre + "fc2.b")));
    }
    return x;
}

}  // namespace minivlm
