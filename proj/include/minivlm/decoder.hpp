// SPDX-License-Identifier: Apache-2.0
//
// Causal language decoder over mixed text/vision sequences.
//
// Routing: with visual_expert set, every attention projection and every FFN
// weight comes in a lang/vis pair and each token uses the pair member that
// matches its modality tag; with the flag clear one shared weight set serves
// all tokens (the co-training configuration). Attention over vision tokens
// is causal like text by default; bidirectional_vision lets tokens inside
// one contiguous vision run attend to the whole run.

#pragma once

#include <string>
#include <vector>

#include "minivlm/attention.hpp"
#include "minivlm/checkpoint.hpp"
#include "minivlm/rng.hpp"
#include "minivlm/tensor.hpp"

namespace minivlm {

enum class Modality { Text, Vision };

// Per-position embedding + modality tag + position id. Text positions carry
// their token id; vision positions carry kNoToken.
template <class Real>
struct MixedSequence {
    static constexpr int kNoToken = -1;

    Tensor<Real> emb;               // [L, d]
    std::vector<Modality> mask;     // length L
    std::vector<int> ids;           // length L, kNoToken at vision positions
    std::vector<int> positions;     // 0..L-1

    std::size_t length() const { return mask.size(); }

    void validate() const {
        if (emb.rank() != 2 || emb.shape[0] != mask.size() || ids.size() != mask.size() ||
            positions.size() != mask.size())
            throw ShapeMismatch("mixed sequence: field lengths disagree");
        for (std::size_t i = 0; i < positions.size(); ++i)
            if (positions[i] != static_cast<int>(i))
                throw ShapeMismatch("mixed sequence: positions must run 0..L-1");
    }

    std::vector<bool> vision_flags() const {
        std::vector<bool> f(mask.size());
        for (std::size_t i = 0; i < mask.size(); ++i) f[i] = mask[i] == Modality::Vision;
        return f;
    }
};

struct DecoderConfig {
    bool visual_expert = true;        // true: routed weights; false: shared weights
    std::size_t embed_dim = 64;
    std::size_t depth = 2;
    std::size_t heads = 4;
    std::size_t vocab_size = 259;
    std::size_t ffn_hidden = 0;       // 0 means the default 4*embed_dim
    bool bidirectional_vision = false;

    std::size_t ffn() const { return ffn_hidden ? ffn_hidden : 4 * embed_dim; }

    void validate() const {
        if (embed_dim < 1 || heads < 1 || vocab_size < 1)
            throw ShapeMismatch("decoder config extents must be >= 1");
        if (embed_dim % heads != 0) throw ShapeMismatch("decoder embed_dim must divide by heads");
    }
};

// Order: prompt text, then vision tokens, then answer text. Positions are
// sequential over the whole mixed sequence.
template <class Real>
MixedSequence<Real> assemble_sequence(const std::vector<int>& prompt_tokens,
                                      const Tensor<Real>& image_features,
                                      const std::vector<int>& answer_tokens,
                                      const Tensor<Real>& embed_table) {
    if (embed_table.rank() != 2) throw ShapeMismatch("assemble_sequence: bad embedding table");
    std::size_t d = embed_table.shape[1];
    std::size_t n_vis = image_features.numel() == 0 ? 0 : image_features.shape[0];
    if (n_vis > 0 && (image_features.rank() != 2 || image_features.shape[1] != d))
        throw DimMismatch("assemble_sequence: vision feature width != embedding width");

    MixedSequence<Real> seq;
    std::vector<Tensor<Real>> parts;
    if (!prompt_tokens.empty()) parts.push_back(embed_rows(embed_table, prompt_tokens));
    if (n_vis > 0) parts.push_back(image_features);
    if (!answer_tokens.empty()) parts.push_back(embed_rows(embed_table, answer_tokens));
    if (parts.empty()) throw ShapeMismatch("assemble_sequence: empty sequence");
    seq.emb = parts.size() == 1 ? parts[0] : concat_rows(parts);

    for (int id : prompt_tokens) {
        seq.mask.push_back(Modality::Text);
        seq.ids.push_back(id);
    }
    for (std::size_t i = 0; i < n_vis; ++i) {
        seq.mask.push_back(Modality::Vision);
        seq.ids.push_back(MixedSequence<Real>::kNoToken);
    }
    for (int id : answer_tokens) {
        seq.mask.push_back(Modality::Text);
        seq.ids.push_back(id);
    }
    for (std::size_t i = 0; i < seq.mask.size(); ++i) seq.positions.push_back(static_cast<int>(i));
    seq.validate();
    return seq;
}

template <class Real>
struct AttnParamRefs {
    const Tensor<Real>& q;
    const Tensor<Real>& k;
    const Tensor<Real>& v;
    const Tensor<Real>& o;
};

template <class Real>
struct FfnParamRefs {
    const Tensor<Real>& W;
    const Tensor<Real>& V;
    const Tensor<Real>& W2;
};

namespace detail {

// Admissible attention pattern: causal, optionally widened so that tokens of
// one contiguous vision run see the whole run.
inline std::vector<bool> attention_pattern(const std::vector<Modality>& mask,
                                           bool bidirectional_vision) {
    std::size_t L = mask.size();
    std::vector<bool> allow(L * L, false);
    for (std::size_t i = 0; i < L; ++i)
        for (std::size_t j = 0; j <= i; ++j) allow[i * L + j] = true;
    if (bidirectional_vision) {
        std::size_t i = 0;
        while (i < L) {
            if (mask[i] == Modality::Vision) {
                std::size_t j = i;
                while (j < L && mask[j] == Modality::Vision) ++j;
                for (std::size_t a = i; a < j; ++a)
                    for (std::size_t b = i; b < j; ++b) allow[a * L + b] = true;
                i = j;
            } else {
                ++i;
            }
        }
    }
    return allow;
}

template <class Real>
Tensor<Real> routed_heads(const Tensor<Real>& q, const Tensor<Real>& k, const Tensor<Real>& v,
                          std::size_t heads, const std::vector<bool>& allow,
                          AttnTrace<Real>* trace) {
    std::size_t d = q.shape[1], dh = d / heads;
    Real inv_sqrt = Real(1) / std::sqrt(Real(dh));
    std::vector<Tensor<Real>> ctx;
    for (std::size_t h = 0; h < heads; ++h) {
        auto qh = slice_cols(q, h * dh, dh);
        auto kh = slice_cols(k, h * dh, dh);
        auto vh = slice_cols(v, h * dh, dh);
        auto weights = masked_softmax(scale(matmul(qh, transpose2(kh)), inv_sqrt), allow);
        if (trace) trace->weights.push_back(Tensor<Real>(weights.shape, weights.data));
        ctx.push_back(matmul(weights, vh));
    }
    return concat_cols(ctx);
}

}  // namespace detail

// Routed multi-head attention over raw activations (callers normalize).
template <class Real>
Tensor<Real> routed_attention(const Tensor<Real>& x, const std::vector<Modality>& mask,
                              const AttnParamRefs<Real>& lang, const AttnParamRefs<Real>& vis,
                              std::size_t heads, bool bidirectional_vision = false,
                              AttnTrace<Real>* trace = nullptr) {
    if (x.rank() != 2 || x.shape[0] != mask.size())
        throw ShapeMismatch("routed_attention: sequence length mismatch");
    auto route = std::vector<bool>(mask.size());
    for (std::size_t i = 0; i < mask.size(); ++i) route[i] = mask[i] == Modality::Vision;
    auto q = routed_linear(x, route, lang.q, vis.q);
    auto k = routed_linear(x, route, lang.k, vis.k);
    auto v = routed_linear(x, route, lang.v, vis.v);
    auto allow = detail::attention_pattern(mask, bidirectional_vision);
    auto ctx = detail::routed_heads(q, k, v, heads, allow, trace);
    return routed_linear(ctx, route, lang.o, vis.o);
}

// Routed SwiGLU-form FFN over raw activations.
template <class Real>
Tensor<Real> routed_ffn(const Tensor<Real>& x, const std::vector<Modality>& mask,
                        const FfnParamRefs<Real>& lang, const FfnParamRefs<Real>& vis) {
    if (x.rank() != 2 || x.shape[0] != mask.size())
        throw ShapeMismatch("routed_ffn: sequence length mismatch");
    auto route = std::vector<bool>(mask.size());
    for (std::size_t i = 0; i < mask.size(); ++i) route[i] = mask[i] == Modality::Vision;
    auto gate = swish(routed_linear(x, route, lang.W, vis.W));
    auto lin = routed_linear(x, route, lang.V, vis.V);
    return routed_linear(mul(gate, lin), route, lang.W2, vis.W2);
}

// Single-layer operations on a mixed sequence (causal, unnormed).
template <class Real>
Tensor<Real> expert_attention(const MixedSequence<Real>& seq, const AttnParamRefs<Real>& lang,
                              const AttnParamRefs<Real>& vis, std::size_t heads,
                              AttnTrace<Real>* trace = nullptr) {
    seq.validate();
    return routed_attention(seq.emb, seq.mask, lang, vis, heads, false, trace);
}

template <class Real>
Tensor<Real> expert_ffn(const MixedSequence<Real>& seq, const FfnParamRefs<Real>& lang,
                        const FfnParamRefs<Real>& vis) {
    seq.validate();
    return routed_ffn(seq.emb, seq.mask, lang, vis);
}

template <class Real>
void init_decoder_params(const DecoderConfig& cfg, Rng& rng, ParamStore<Real>& store) {
    cfg.validate();
    auto uniform = [&](Shape shape, double s) {
        auto t = Tensor<Real>::zeros(std::move(shape));
        for (auto& v : t.data) v = static_cast<Real>(rng.uniform(-s, s));
        return t;
    };
    std::size_t d = cfg.embed_dim, h = cfg.ffn();
    double sd = 1.0 / std::sqrt(static_cast<double>(d));
    double sh = 1.0 / std::sqrt(static_cast<double>(h));
    store.add("dec.embed", uniform({cfg.vocab_size, d}, 0.02));
    std::vector<std::string> experts = {"lang"};
    if (cfg.visual_expert) experts.push_back("vis");
    for (std::size_t i = 0; i < cfg.depth; ++i) {
        std::string pre = "dec." + std::to_string(i) + ".";
        store.add(pre + "norm1.g", Tensor<Real>::full({d}, Real(1)));
        for (const auto& e : experts)
            for (const char* name : {"attn.q.", "attn.k.", "attn.v.", "attn.o."})
                store.add(pre + name + e, uniform({d, d}, sd));
        store.add(pre + "norm2.g", Tensor<Real>::full({d}, Real(1)));
        for (const auto& e : experts) {
            store.add(pre + "ffn.W." + e, uniform({d, h}, sd));
            store.add(pre + "ffn.V." + e, uniform({d, h}, sd));
            store.add(pre + "ffn.W2." + e, uniform({h, d}, sh));
        }
    }
    store.add("dec.norm.g", Tensor<Real>::full({d}, Real(1)));
    store.add("dec.head", uniform({d, cfg.vocab_size}, sd));
}

// Full decoder: depth x pre-norm (routed attention, routed FFN) blocks, then
// final norm and vocabulary projection. With visual_expert clear, every
// routed pair is the shared lang weight set.
template <class Real>
Tensor<Real> decoder_forward(const MixedSequence<Real>& seq, const DecoderConfig& cfg,
                             const ParamStore<Real>& p, AttnTrace<Real>* trace = nullptr) {
    cfg.validate();
    seq.validate();
    if (seq.emb.shape[1] != cfg.embed_dim)
        throw ShapeMismatch("decoder_forward: sequence width must equal embed_dim");
    Tensor<Real> x = seq.emb;
    for (std::size_t i = 0; i < cfg.depth; ++i) {
        std::string pre = "dec." + std::to_string(i) + ".";
        auto expert = [&](const char* stem, const char* which) -> const Tensor<Real>& {
            return p.get(pre + stem + (cfg.visual_expert ? which : "lang"));
        };
        AttnParamRefs<Real> lang{p.get(pre + "attn.q.lang"), p.get(pre + "attn.k.lang"),
                                 p.get(pre + "attn.v.lang"), p.get(pre + "attn.o.lang")};
        AttnParamRefs<Real> vis{expert("attn.q.", "vis"), expert("attn.k.", "vis"),
                                expert("attn.v.", "vis"), expert("attn.o.", "vis")};
        auto normed = rms_norm_rows(x, p.get(pre + "norm1.g"));
        x = add(x, routed_attention(normed, seq.mask, lang, vis, cfg.heads,
                                    cfg.bidirectional_vision, trace));
        FfnParamRefs<Real> flang{p.get(pre + "ffn.W.lang"), p.get(pre + "ffn.V.lang"),
                                 p.get(pre + "ffn.W2.lang")};
        FfnParamRefs<Real> fvis{expert("ffn.W.", "vis"), expert("ffn.V.", "vis"),
                                expert("ffn.W2.", "vis")};
        auto normed2 = rms_norm_rows(x, p.get(pre + "norm2.g"));
        x = add(x, routed_ffn(normed2, seq.mask, flang, fvis));
    }
    return matmul(rms_norm_rows(x, p.get("dec.norm.g")), p.get("dec.head"));
}

}  // namespace minivlm
