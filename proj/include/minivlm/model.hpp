// SPDX-License-Identifier: Apache-2.0
//
// Whole-model bundle: encoder + adapter + extra video conv + decoder, one
// named parameter store, self-describing checkpoints, and greedy decoding.
//
// Checkpoints carry the architecture as scalar "meta.*" tensors inside the
// same container, so `infer` can rebuild a model from the file alone.

#pragma once

#include <cmath>
#include <string>
#include <vector>

#include "minivlm/adapter.hpp"
#include "minivlm/checkpoint.hpp"
#include "minivlm/decoder.hpp"
#include "minivlm/video.hpp"
#include "minivlm/vit.hpp"

namespace minivlm {

struct VlmConfig {
    VitConfig vit;
    AdapterConfig adapter;
    DecoderConfig dec;
    VideoConfig video;

    void validate() const {
        vit.validate();
        adapter.validate();
        dec.validate();
        video.validate();
        if (adapter.in_dim != vit.embed_dim)
            throw ShapeMismatch("model: adapter.in_dim must equal vit.embed_dim");
        if (adapter.out_dim != dec.embed_dim)
            throw ShapeMismatch("model: adapter.out_dim must equal dec.embed_dim");
        if (adapter.grid_h != vit.grid_h || adapter.grid_w != vit.grid_w)
            throw ShapeMismatch("model: adapter grid must equal vit grid");
    }

    // Toy model used by tests and the default training config.
    static VlmConfig tiny() {
        VlmConfig cfg;
        cfg.vit.patch_size = 2;
        cfg.vit.embed_dim = 16;
        cfg.vit.depth = 1;
        cfg.vit.heads = 2;
        cfg.vit.grid_h = 4;
        cfg.vit.grid_w = 4;
        cfg.vit.channels = 1;
        cfg.adapter.in_dim = 16;
        cfg.adapter.hidden_dim = 32;
        cfg.adapter.out_dim = 64;
        cfg.adapter.grid_h = 4;
        cfg.adapter.grid_w = 4;
        cfg.dec.visual_expert = true;
        cfg.dec.embed_dim = 64;
        cfg.dec.depth = 2;
        cfg.dec.heads = 4;
        cfg.dec.vocab_size = ByteTokenizer::vocab_size();
        cfg.dec.ffn_hidden = 128;
        cfg.video.n_frames = 24;
        return cfg;
    }
};

template <class Real>
struct VlmModel {
    VlmConfig cfg;
    ParamStore<Real> params;
};

namespace detail {

template <class Real>
void add_meta(ParamStore<Real>& store, const std::string& name, double v) {
    store.add("meta." + name, Tensor<Real>({1}, {static_cast<Real>(v)}));
}

template <class Real>
double meta_value(const ParamStore<Real>& store, const std::string& name) {
    return static_cast<double>(store.get("meta." + name).data[0]);
}

}  // namespace detail

template <class Real>
VlmModel<Real> init_model(const VlmConfig& cfg, std::uint64_t seed) {
    cfg.validate();
    VlmModel<Real> model;
    model.cfg = cfg;
    Rng rng(seed);
    auto& p = model.params;
    detail::add_meta(p, "vit.patch", static_cast<double>(cfg.vit.patch_size));
    detail::add_meta(p, "vit.embed", static_cast<double>(cfg.vit.embed_dim));
    detail::add_meta(p, "vit.depth", static_cast<double>(cfg.vit.depth));
    detail::add_meta(p, "vit.heads", static_cast<double>(cfg.vit.heads));
    detail::add_meta(p, "vit.grid_h", static_cast<double>(cfg.vit.grid_h));
    detail::add_meta(p, "vit.grid_w", static_cast<double>(cfg.vit.grid_w));
    detail::add_meta(p, "vit.channels", static_cast<double>(cfg.vit.channels));
    detail::add_meta(p, "adapter.hidden", static_cast<double>(cfg.adapter.hidden()));
    detail::add_meta(p, "dec.embed", static_cast<double>(cfg.dec.embed_dim));
    detail::add_meta(p, "dec.depth", static_cast<double>(cfg.dec.depth));
    detail::add_meta(p, "dec.heads", static_cast<double>(cfg.dec.heads));
    detail::add_meta(p, "dec.vocab", static_cast<double>(cfg.dec.vocab_size));
    detail::add_meta(p, "dec.ffn", static_cast<double>(cfg.dec.ffn()));
    detail::add_meta(p, "dec.visual_expert", cfg.dec.visual_expert ? 1 : 0);
    detail::add_meta(p, "dec.bidirectional_vision", cfg.dec.bidirectional_vision ? 1 : 0);
    detail::add_meta(p, "video.n_frames", static_cast<double>(cfg.video.n_frames));
    init_vit_params(cfg.vit, rng, p);
    init_adapter_params(cfg.adapter, rng, p);
    {
        std::size_t d = cfg.vit.embed_dim;
        double sc = 1.0 / std::sqrt(4.0 * d);
        auto w = Tensor<Real>::zeros({d, d, 2, 2});
        for (auto& v : w.data) v = static_cast<Real>(rng.uniform(-sc, sc));
        p.add("video.conv.w", std::move(w));
        p.add("video.conv.b", Tensor<Real>::zeros({d}));
    }
    init_decoder_params(cfg.dec, rng, p);
    return model;
}

template <class Real>
VlmConfig config_from_store(const ParamStore<Real>& p) {
    VlmConfig cfg;
    cfg.vit.patch_size = static_cast<std::size_t>(detail::meta_value(p, "vit.patch"));
    cfg.vit.embed_dim = static_cast<std::size_t>(detail::meta_value(p, "vit.embed"));
    cfg.vit.depth = static_cast<std::size_t>(detail::meta_value(p, "vit.depth"));
    cfg.vit.heads = static_cast<std::size_t>(detail::meta_value(p, "vit.heads"));
    cfg.vit.grid_h = static_cast<std::size_t>(detail::meta_value(p, "vit.grid_h"));
    cfg.vit.grid_w = static_cast<std::size_t>(detail::meta_value(p, "vit.grid_w"));
    cfg.vit.channels = static_cast<std::size_t>(detail::meta_value(p, "vit.channels"));
    cfg.adapter.in_dim = cfg.vit.embed_dim;
    cfg.adapter.hidden_dim = static_cast<std::size_t>(detail::meta_value(p, "adapter.hidden"));
    cfg.adapter.grid_h = cfg.vit.grid_h;
    cfg.adapter.grid_w = cfg.vit.grid_w;
    cfg.dec.embed_dim = static_cast<std::size_t>(detail::meta_value(p, "dec.embed"));
    cfg.adapter.out_dim = cfg.dec.embed_dim;
    cfg.dec.depth = static_cast<std::size_t>(detail::meta_value(p, "dec.depth"));
    cfg.dec.heads = static_cast<std::size_t>(detail::meta_value(p, "dec.heads"));
    cfg.dec.vocab_size = static_cast<std::size_t>(detail::meta_value(p, "dec.vocab"));
    cfg.dec.ffn_hidden = static_cast<std::size_t>(detail::meta_value(p, "dec.ffn"));
    cfg.dec.visual_expert = detail::meta_value(p, "dec.visual_expert") != 0;
    cfg.dec.bidirectional_vision = detail::meta_value(p, "dec.bidirectional_vision") != 0;
    cfg.video.n_frames = static_cast<std::size_t>(detail::meta_value(p, "video.n_frames"));
    return cfg;
}

template <class Real>
void save_model(const VlmModel<Real>& model, const std::string& path) {
    save_checkpoint(model.params, path);
}

template <class Real>
VlmModel<Real> load_model(const std::string& path) {
    VlmModel<Real> model;
    model.params = load_checkpoint<Real>(path);
    model.cfg = config_from_store(model.params);
    model.cfg.validate();
    return model;
}

// Parameter group of a tensor name: the prefix before the first dot, with
// "dec" exposed under the trainer-facing name "decoder".
inline std::string group_of(const std::string& param_name) {
    auto dot = param_name.find('.');
    std::string head = dot == std::string::npos ? param_name : param_name.substr(0, dot);
    if (head == "dec") return "decoder";
    return head;
}

// Image -> vision tokens ready for the decoder.
template <class Real>
Tensor<Real> encode_image(const ImageGrid& img, const VlmConfig& cfg, const ParamStore<Real>& p) {
    auto patches = patchify<Real>(img, cfg.vit.patch_size);
    auto feats = vit_forward(patches, cfg.vit, p);
    return adapt(feats, cfg.adapter, p);
}

// Greedy decoding: repeatedly extend the sequence with the argmax token
// until EOS or the budget runs out. Ties break toward the lowest id.
template <class Real>
std::string generate(const VlmModel<Real>& model, MixedSequence<Real> seq,
                     std::size_t max_tokens) {
    const auto& table = model.params.get("dec.embed");
    std::vector<int> out_ids;
    for (std::size_t step = 0; step < max_tokens; ++step) {
        auto logits = decoder_forward(seq, model.cfg.dec, model.params);
        std::size_t L = logits.shape[0], V = logits.shape[1];
        int best = 0;
        Real best_v = logits.at(L - 1, 0);
        for (std::size_t j = 1; j < V; ++j)
            if (logits.at(L - 1, j) > best_v) {
                best_v = logits.at(L - 1, j);
                best = static_cast<int>(j);
            }
        if (best == ByteTokenizer::kEos) break;
        out_ids.push_back(best);
        seq.emb = concat_rows<Real>({seq.emb, embed_rows(table, {best})});
        seq.mask.push_back(Modality::Text);
        seq.ids.push_back(best);
        seq.positions.push_back(static_cast<int>(seq.positions.size()));
    }
    return ByteTokenizer::decode(out_ids);
}

}  // namespace minivlm
