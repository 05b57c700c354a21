// SPDX-License-Identifier: Apache-2.0
//
// Named gradient checks over every differentiable operation, at toy sizes,
// in the 64-bit checking mode. Backs the `gradcheck` CLI subcommand.

#pragma once

#include <string>
#include <vector>

#include "minivlm/adapter.hpp"
#include "minivlm/decoder.hpp"
#include "minivlm/gradcheck.hpp"
#include "minivlm/vit.hpp"

namespace minivlm {

struct GradCheckResult {
    std::string name;
    double max_rel_error;
};

namespace detail {

inline Tensor<double> rand_t(Shape shape, Rng& rng, double s = 1.0) {
    auto t = Tensor<double>::zeros(std::move(shape));
    for (auto& v : t.data) v = rng.uniform(-s, s);
    return t;
}

template <class Fn>
double check_params(const ParamStore<double>& params, const std::vector<Tensor<double>>& extra,
                    Fn&& fn) {
    std::vector<std::string> names;
    std::vector<Tensor<double>> inputs = extra;
    for (const auto& [name, t] : params) {
        names.push_back(name);
        inputs.push_back(t);
    }
    std::size_t n_extra = extra.size();
    return grad_check<double>(
        [&](Tape<double>&, const std::vector<Tensor<double>>& in) {
            ParamStore<double> bound;
            for (std::size_t i = n_extra; i < in.size(); ++i)
                bound.add(names[i - n_extra], in[i]);
            return fn(bound, in);
        },
        inputs);
}

}  // namespace detail

// Runs every check whose name contains `filter` (all when empty).
inline std::vector<GradCheckResult> run_gradcheck_suite(const std::string& filter = "") {
    std::vector<GradCheckResult> results;
    auto want = [&](const std::string& name) {
        return filter.empty() || name.find(filter) != std::string::npos;
    };
    Rng rng(2024);

    if (want("matmul")) {
        auto a = detail::rand_t({3, 4}, rng), b = detail::rand_t({4, 2}, rng);
        results.push_back({"matmul", grad_check<double>(
            [](Tape<double>&, const std::vector<Tensor<double>>& in) {
                return sum_all(matmul(in[0], in[1]));
            },
            {a, b})});
    }
    if (want("conv2x2_s2")) {
        auto x = detail::rand_t({2, 4, 6}, rng);
        auto w = detail::rand_t({3, 2, 2, 2}, rng);
        auto b = detail::rand_t({3}, rng);
        results.push_back({"conv2x2_s2", grad_check<double>(
            [](Tape<double>&, const std::vector<Tensor<double>>& in) {
                return sum_all(swish(conv2x2_s2(in[0], in[1], in[2])));
            },
            {x, w, b})});
    }
    if (want("swiglu")) {
        auto x = detail::rand_t({3, 4}, rng), w = detail::rand_t({4, 5}, rng);
        auto v = detail::rand_t({4, 5}, rng), w2 = detail::rand_t({5, 2}, rng);
        results.push_back({"swiglu", grad_check<double>(
            [](Tape<double>&, const std::vector<Tensor<double>>& in) {
                return sum_all(swiglu(in[0], in[1], in[2], in[3]));
            },
            {x, w, v, w2})});
    }
    if (want("softmax")) {
        auto x = detail::rand_t({3, 5}, rng);
        results.push_back({"softmax", grad_check<double>(
            [](Tape<double>&, const std::vector<Tensor<double>>& in) {
                auto s = softmax(in[0], 1);
                return sum_all(mul(s, s));
            },
            {x})});
    }
    if (want("vit_forward")) {
        VitConfig cfg;
        cfg.patch_size = 2;
        cfg.embed_dim = 4;
        cfg.depth = 2;
        cfg.heads = 2;
        cfg.grid_h = cfg.grid_w = 2;
        ParamStore<double> p;
        Rng prng(7);
        init_vit_params(cfg, prng, p);
        auto patches = detail::rand_t({4, 4}, rng, 0.5);
        results.push_back({"vit_forward", detail::check_params(p, {},
            [&](const ParamStore<double>& bound, const std::vector<Tensor<double>>&) {
                auto out = vit_forward(patches, cfg, bound);
                return sum_all(mul(out, out));
            })});
    }
    if (want("adapt")) {
        AdapterConfig cfg;
        cfg.in_dim = 4;
        cfg.hidden_dim = 6;
        cfg.out_dim = 5;
        cfg.grid_h = cfg.grid_w = 4;
        ParamStore<double> p;
        Rng prng(8);
        init_adapter_params(cfg, prng, p);
        auto feats = detail::rand_t({16, 4}, rng);
        results.push_back({"adapt", detail::check_params(p, {feats},
            [&](const ParamStore<double>& bound, const std::vector<Tensor<double>>& in) {
                auto out = adapt(in[0], cfg, bound);
                return sum_all(mul(out, out));
            })});
    }
    if (want("expert_attention") || want("expert_ffn")) {
        Rng srng(9);
        MixedSequence<double> seq;
        seq.emb = detail::rand_t({5, 4}, srng);
        seq.mask = {Modality::Text, Modality::Vision, Modality::Vision, Modality::Text,
                    Modality::Vision};
        seq.ids = {1, -1, -1, 2, -1};
        seq.positions = {0, 1, 2, 3, 4};
        if (want("expert_attention")) {
            std::vector<Tensor<double>> ws;
            for (int i = 0; i < 8; ++i) ws.push_back(detail::rand_t({4, 4}, srng));
            ws.push_back(seq.emb);
            results.push_back({"expert_attention", grad_check<double>(
                [&](Tape<double>&, const std::vector<Tensor<double>>& in) {
                    MixedSequence<double> s = seq;
                    s.emb = in[8];
                    AttnParamRefs<double> lang{in[0], in[1], in[2], in[3]};
                    AttnParamRefs<double> vis{in[4], in[5], in[6], in[7]};
                    auto out = expert_attention(s, lang, vis, 2);
                    return sum_all(mul(out, out));
                },
                ws)});
        }
        if (want("expert_ffn")) {
            std::vector<Tensor<double>> ws = {
                detail::rand_t({4, 6}, srng), detail::rand_t({4, 6}, srng),
                detail::rand_t({6, 4}, srng), detail::rand_t({4, 6}, srng),
                detail::rand_t({4, 6}, srng), detail::rand_t({6, 4}, srng), seq.emb};
            results.push_back({"expert_ffn", grad_check<double>(
                [&](Tape<double>&, const std::vector<Tensor<double>>& in) {
                    MixedSequence<double> s = seq;
                    s.emb = in[6];
                    FfnParamRefs<double> lang{in[0], in[1], in[2]};
                    FfnParamRefs<double> vis{in[3], in[4], in[5]};
                    auto out = expert_ffn(s, lang, vis);
                    return sum_all(mul(out, out));
                },
                ws)});
        }
    }
    if (want("decoder_forward")) {
        DecoderConfig cfg;
        cfg.embed_dim = 4;
        cfg.depth = 2;
        cfg.heads = 2;
        cfg.vocab_size = 7;
        cfg.ffn_hidden = 6;
        ParamStore<double> p;
        Rng prng(10);
        init_decoder_params(cfg, prng, p);
        Rng srng(11);
        MixedSequence<double> seq;
        seq.emb = detail::rand_t({4, 4}, srng);
        seq.mask = {Modality::Text, Modality::Vision, Modality::Text, Modality::Text};
        seq.ids = {1, -1, 3, 5};
        seq.positions = {0, 1, 2, 3};
        std::vector<int> targets = {1, 4, 2, 6};
        std::vector<bool> rows = {false, true, true, true};
        results.push_back({"decoder_forward", detail::check_params(p, {seq.emb},
            [&](const ParamStore<double>& bound, const std::vector<Tensor<double>>& in) {
                MixedSequence<double> s = seq;
                s.emb = in[0];
                auto logits = decoder_forward(s, cfg, bound);
                return masked_cross_entropy(logits, targets, rows);
            })});
    }
    return results;
}

}  // namespace minivlm
