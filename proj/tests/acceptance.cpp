// SPDX-License-Identifier: Apache-2.0
//
// Acceptance suite: one criterion per function, one PASS/FAIL line each,
// nonzero exit when anything fails. Tolerances are pinned in the checks.

#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <functional>
#include <string>
#include <vector>

#include "minivlm/eval.hpp"
#include "minivlm/gradcheck_suite.hpp"
#include "minivlm/model.hpp"
#include "minivlm/tqa.hpp"
#include "minivlm/trainer.hpp"

using namespace minivlm;

namespace {

namespace fs = std::filesystem;

struct Check {
    bool ok = true;
    std::string detail;

    void expect(bool cond, const std::string& what) {
        if (!cond && ok) {
            ok = false;
            detail = what;
        }
    }
};

std::string slurp(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    return std::string((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
}

fs::path scratch_dir() {
    auto dir = fs::temp_directory_path() / "minivlm_acceptance";
    fs::create_directories(dir);
    return dir;
}

Tensor<double> rand_t(Shape shape, Rng& rng, double s = 1.0) {
    auto t = Tensor<double>::zeros(std::move(shape));
    for (auto& v : t.data) v = rng.uniform(-s, s);
    return t;
}

MixedSequence<double> random_sequence(std::size_t L, std::size_t d, Rng& rng, bool mixed) {
    MixedSequence<double> seq;
    seq.emb = rand_t({L, d}, rng);
    for (std::size_t i = 0; i < L; ++i) {
        bool vis = mixed && rng.below(2) == 0;
        seq.mask.push_back(vis ? Modality::Vision : Modality::Text);
        seq.ids.push_back(vis ? -1 : static_cast<int>(rng.below(200)));
        seq.positions.push_back(static_cast<int>(i));
    }
    return seq;
}

double max_abs_diff(const Tensor<double>& a, const Tensor<double>& b) {
    double worst = 0;
    for (std::size_t i = 0; i < a.numel(); ++i)
        worst = std::max(worst, std::abs(a.data[i] - b.data[i]));
    return worst;
}

// --- criterion 1: gradient suite through the CLI ---------------------------

Check criterion_gradients() {
    Check c;
    auto t0 = std::chrono::steady_clock::now();
    std::string cmd = std::string(MINIVLM_CLI_PATH) + " gradcheck 2>/dev/null";
    FILE* pipe = popen(cmd.c_str(), "r");
    c.expect(pipe != nullptr, "failed to spawn the CLI");
    std::string out;
    if (pipe) {
        char buf[256];
        while (std::size_t n = fread(buf, 1, sizeof(buf), pipe)) out.append(buf, n);
        int rc = pclose(pipe);
        c.expect(WEXITSTATUS(rc) == 0, "gradcheck exited nonzero");
    }
    for (const char* name : {"matmul", "conv2x2_s2", "swiglu", "softmax", "vit_forward", "adapt",
                             "expert_attention", "expert_ffn", "decoder_forward"})
        c.expect(out.find(name) != std::string::npos, std::string("missing module ") + name);
    c.expect(out.find("FAIL") == std::string::npos, "a module exceeded 1e-4");
    double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    c.expect(secs < 120.0, "gradcheck exceeded the 2-minute budget");
    return c;
}

// --- criterion 2: quarter-length law ----------------------------------------

Check criterion_quarter_length() {
    Check c;
    Rng rng(202);
    for (int it = 0; it < 50; ++it) {
        AdapterConfig cfg;
        cfg.in_dim = 1 + rng.below(6);
        cfg.out_dim = 1 + rng.below(8);
        cfg.grid_h = 2 * (1 + rng.below(6));
        cfg.grid_w = 2 * (1 + rng.below(6));
        ParamStore<double> p;
        Rng prng(300 + it);
        init_adapter_params(cfg, prng, p);
        auto feats = rand_t({cfg.grid_h * cfg.grid_w, cfg.in_dim}, rng);
        auto out = adapt(feats, cfg, p);
        c.expect(out.shape[0] * 4 == feats.shape[0], "output length * 4 != input length");
    }
    c.expect(token_count(1344, 14) == 9216, "1344px token count");
    c.expect(adapter_output_len(96, 96) == 2304, "1344px adapter output");
    c.expect(token_count(1120, 14) == 6400, "1120px token count");
    c.expect(adapter_output_len(80, 80) == 1600, "1120px adapter output");
    return c;
}

// --- criterion 3: routing equivalences --------------------------------------

Check criterion_routing() {
    Check c;
    DecoderConfig cfg;
    cfg.visual_expert = true;
    cfg.embed_dim = 8;
    cfg.depth = 2;
    cfg.heads = 2;
    cfg.vocab_size = 11;
    cfg.ffn_hidden = 12;

    // (a) all-text equals the expert-free model
    for (int it = 0; it < 5; ++it) {
        ParamStore<double> p;
        Rng prng(400 + it);
        init_decoder_params(cfg, prng, p);
        DecoderConfig shared_cfg = cfg;
        shared_cfg.visual_expert = false;
        ParamStore<double> shared;
        for (const auto& [name, t] : p)
            if (name.rfind(".vis") == std::string::npos) shared.add(name, t);
        Rng rng(500 + it);
        auto seq = random_sequence(6, 8, rng, false);
        c.expect(max_abs_diff(decoder_forward(seq, cfg, p),
                              decoder_forward(seq, shared_cfg, shared)) <= 1e-6,
                 "all-text differs from the expert-free model");
    }

    // (b) tied weights equal the shared-weight mode
    for (int it = 0; it < 5; ++it) {
        ParamStore<double> p;
        Rng prng(600 + it);
        init_decoder_params(cfg, prng, p);
        for (auto& [name, t] : p) {
            auto pos = name.rfind(".vis");
            if (pos != std::string::npos && pos == name.size() - 4)
                t.data = p.get(name.substr(0, pos) + ".lang").data;
        }
        DecoderConfig shared_cfg = cfg;
        shared_cfg.visual_expert = false;
        ParamStore<double> shared;
        for (const auto& [name, t] : p)
            if (name.rfind(".vis") == std::string::npos) shared.add(name, t);
        Rng rng(700 + it);
        auto seq = random_sequence(7, 8, rng, true);
        c.expect(max_abs_diff(decoder_forward(seq, cfg, p),
                              decoder_forward(seq, shared_cfg, shared)) <= 1e-6,
                 "tied weights differ from the shared-weight mode");
    }

    // (c) mixed masks match a per-token brute-force single layer
    for (int it = 0; it < 20; ++it) {
        Rng rng(800 + it);
        std::size_t L = 4 + rng.below(4), d = 8, heads = 2, dh = d / heads;
        auto seq = random_sequence(L, d, rng, true);
        std::vector<Tensor<double>> w;
        for (int i = 0; i < 8; ++i) w.push_back(rand_t({d, d}, rng));
        AttnParamRefs<double> lang{w[0], w[1], w[2], w[3]}, vis{w[4], w[5], w[6], w[7]};
        auto fast = expert_attention(seq, lang, vis, heads);

        // explicit per-token loops, expert chosen by if/else
        auto pick = [&](std::size_t i, int which) -> const Tensor<double>& {
            bool v = seq.mask[i] == Modality::Vision;
            return w[(v ? 4 : 0) + which];
        };
        std::vector<std::vector<double>> q(L), k(L), v(L), ctx(L);
        for (std::size_t i = 0; i < L; ++i) {
            q[i].assign(d, 0);
            k[i].assign(d, 0);
            v[i].assign(d, 0);
            ctx[i].assign(d, 0);
            for (std::size_t a = 0; a < d; ++a)
                for (std::size_t b = 0; b < d; ++b) {
                    q[i][b] += seq.emb.at(i, a) * pick(i, 0).at(a, b);
                    k[i][b] += seq.emb.at(i, a) * pick(i, 1).at(a, b);
                    v[i][b] += seq.emb.at(i, a) * pick(i, 2).at(a, b);
                }
        }
        for (std::size_t h = 0; h < heads; ++h)
            for (std::size_t i = 0; i < L; ++i) {
                std::vector<double> sc(i + 1);
                double mx = -1e300;
                for (std::size_t j = 0; j <= i; ++j) {
                    double s = 0;
                    for (std::size_t t = 0; t < dh; ++t) s += q[i][h * dh + t] * k[j][h * dh + t];
                    sc[j] = s / std::sqrt(static_cast<double>(dh));
                    mx = std::max(mx, sc[j]);
                }
                double sum = 0;
                for (std::size_t j = 0; j <= i; ++j) {
                    sc[j] = std::exp(sc[j] - mx);
                    sum += sc[j];
                }
                for (std::size_t j = 0; j <= i; ++j)
                    for (std::size_t t = 0; t < dh; ++t)
                        ctx[i][h * dh + t] += sc[j] / sum * v[j][h * dh + t];
            }
        double worst = 0;
        for (std::size_t i = 0; i < L; ++i) {
            std::vector<double> out(d, 0);
            for (std::size_t a = 0; a < d; ++a)
                for (std::size_t b = 0; b < d; ++b) out[b] += ctx[i][a] * pick(i, 3).at(a, b);
            for (std::size_t b = 0; b < d; ++b)
                worst = std::max(worst, std::abs(out[b] - fast.at(i, b)));
        }
        c.expect(worst <= 1e-6, "mixed-mask attention diverges from the brute-force oracle");
    }
    return c;
}

// --- criterion 4: causality --------------------------------------------------

Check criterion_causality() {
    Check c;
    DecoderConfig cfg;
    cfg.embed_dim = 8;
    cfg.depth = 2;
    cfg.heads = 2;
    cfg.vocab_size = 9;
    cfg.ffn_hidden = 12;
    ParamStore<double> p;
    Rng prng(900);
    init_decoder_params(cfg, prng, p);
    for (int it = 0; it < 20; ++it) {
        Rng rng(1000 + it);
        std::size_t L = 5 + rng.below(3);
        auto seq = random_sequence(L, 8, rng, true);
        auto base = decoder_forward(seq, cfg, p);
        std::size_t pos = rng.below(L);
        auto bumped = seq;
        for (std::size_t j = 0; j < 8; ++j) bumped.emb.at(pos, j) += 0.3;
        auto out = decoder_forward(bumped, cfg, p);
        for (std::size_t i = 0; i < pos; ++i)
            for (std::size_t jv = 0; jv < cfg.vocab_size; ++jv)
                c.expect(out.at(i, jv) == base.at(i, jv), "logits before position i moved");
        c.expect(max_abs_diff(out, base) > 0, "perturbation had no effect at all");
    }
    return c;
}

// --- criterion 5: overfit oracle ---------------------------------------------

Check criterion_overfit() {
    Check c;
    auto dir = scratch_dir() / "overfit";
    fs::create_directories(dir);
    Rng rng(99);
    std::vector<SftRecord> data;
    for (int i = 0; i < 32; ++i) {
        std::vector<double> vals(64);
        for (auto& v : vals) v = rng.next_unit();
        auto path = (dir / ("img" + std::to_string(i) + ".cgimg")).string();
        save_cgimg(path, ImageGrid(1, 8, 8, vals));
        char prompt[64], answer[64];
        std::snprintf(prompt, sizeof(prompt), "what is in picture %02d?", i);
        std::snprintf(answer, sizeof(answer), "a photo of sample %02d", i);
        data.push_back({prompt, answer, i % 2, path, ""});
    }
    StageConfig s;
    s.lr = 3e-3;
    s.global_batch = 16;
    s.steps = 200;  // within the 300-step budget
    s.trainable_groups = {"vit", "adapter", "decoder", "video"};

    auto t0 = std::chrono::steady_clock::now();
    auto train_once = [&](std::string* bytes) {
        auto model = init_model<float>(VlmConfig::tiny(), 42);
        run_stage(model, data, s, 7);
        *bytes = checkpoint_bytes(model.params);
        return model;
    };
    std::string b1, b2;
    auto model = train_once(&b1);
    train_once(&b2);
    double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    c.expect(b1 == b2, "two seeded runs produced different checkpoints");
    c.expect(secs < 600.0, "training exceeded the 10-minute budget");

    // full-dataset mean answer loss at the final parameters
    double total = 0;
    for (const auto& rec : data) {
        auto ex = prepare_example(rec, model.cfg, model.params);
        auto logits = decoder_forward(ex.seq, model.cfg.dec, model.params);
        total += static_cast<double>(mask_loss(logits, ex.seq, ex.span).data[0]);
    }
    double mean = total / static_cast<double>(data.size());
    char msg[96];
    std::snprintf(msg, sizeof(msg), "final mask_loss %.4f (needs < 0.05)", mean);
    c.expect(mean < 0.05, msg);
    return c;
}

// --- criterion 6: training-recipe fidelity -----------------------------------

Check criterion_recipes() {
    Check c;
    auto s1 = stage_preset("image-stage1");
    c.expect(s1.lr == 1e-5 && s1.global_batch == 2340 && s1.steps == 3000, "image stage 1 constants");
    auto s2 = stage_preset("image-stage2");
    c.expect(s2.global_batch == 1150 && s2.steps == 750, "image stage 2 constants");
    c.expect(s1.vit_lr_ratio == 0.1, "vit rate ratio");
    auto near = [](double a, double b) { return std::abs(a - b) <= 1e-12 * std::max(1.0, std::abs(b)); };
    c.expect(near(lr_for("vit", s1), 1e-6) && lr_for("decoder", s1) == 1e-5, "one-tenth rule");
    c.expect(near(lr_for("vit", s1), 0.1 * lr_for("decoder", s1)), "vit/decoder rate ratio");
    c.expect(stage_preset("video-stage1").lr == 4e-6, "video stage 1 rate");
    c.expect(stage_preset("video-stage2").lr == 1e-6, "video stage 2 rate");

    for (const char* name : {"image-stage1", "image-stage2", "video-stage1", "video-stage2"}) {
        auto preset = stage_preset(name);
        nlohmann::json j = preset;
        auto back = j.get<StageConfig>();
        c.expect(back.lr == preset.lr && back.global_batch == preset.global_batch &&
                     back.steps == preset.steps && back.vit_lr_ratio == preset.vit_lr_ratio &&
                     back.trainable_groups == preset.trainable_groups,
                 std::string("config round-trip for ") + name);
    }

    // freezing invariant
    auto dir = scratch_dir() / "recipes";
    fs::create_directories(dir);
    save_cgimg((dir / "img.cgimg").string(), ImageGrid(1, 8, 8, std::vector<double>(64, 0.5)));
    std::vector<SftRecord> data = {{"look", "dot", 1, (dir / "img.cgimg").string(), ""}};
    auto model = init_model<float>(VlmConfig::tiny(), 9);
    auto before = model.params;
    StageConfig freeze;
    freeze.lr = 1e-3;
    freeze.global_batch = 1;
    freeze.steps = 2;
    freeze.trainable_groups = {"adapter"};
    run_stage(model, data, freeze, 3);
    for (const auto& [name, t] : model.params)
        if (group_of(name) != "adapter")
            c.expect(t.data == before.get(name).data, "frozen tensor moved: " + name);

    // interleave invariant
    for (double r : {0.0, 0.2, 0.5, 0.85, 1.0}) {
        auto tags = mix_schedule(1000, r);
        double text = 0;
        for (bool b : tags) text += b ? 1 : 0;
        c.expect(std::abs(text - r * 1000.0) <= 1.0, "mix_batches window bound");
    }
    return c;
}

// --- criterion 7: video path ---------------------------------------------------

Check criterion_video() {
    Check c;
    auto idx = select_indices(48, 24);
    for (std::size_t i = 0; i < 24; ++i)
        c.expect(idx[i] == 2 * i + 1, "48-frame sampling index mismatch");

    VlmConfig cfg = VlmConfig::tiny();
    cfg.vit.grid_h = cfg.vit.grid_w = 8;  // 64 vit tokens -> 4 per frame after /16
    cfg.adapter.grid_h = cfg.adapter.grid_w = 8;
    auto model = init_model<double>(cfg, 31);
    FrameBundle bundle;
    for (int i = 0; i < 24; ++i) {
        bundle.frames.push_back(ImageGrid(1, 16, 16, std::vector<double>(256, (i % 9) / 10.0)));
        bundle.timestamps.push_back(static_cast<double>(i));
    }
    auto frag = encode_video(bundle, cfg.vit, cfg.adapter, cfg.video, model.params,
                             model.params.get("dec.embed"));

    std::size_t i = 0, groups = 0;
    bool pattern_ok = true;
    while (i < frag.length()) {
        if (frag.mask[i] != Modality::Text) {
            pattern_ok = false;
            break;
        }
        while (i < frag.length() && frag.mask[i] == Modality::Text) ++i;
        std::size_t vis = 0;
        while (i < frag.length() && frag.mask[i] == Modality::Vision) {
            ++vis;
            ++i;
        }
        if (vis != cfg.vit.grid_h * cfg.vit.grid_w / 16) pattern_ok = false;
        ++groups;
    }
    c.expect(pattern_ok, "fragment does not alternate [text, vision] with vit/16 tokens");
    c.expect(groups == 24, "fragment does not repeat exactly 24 times");
    return c;
}

// --- criterion 8: TQA golden suite ----------------------------------------------

Check criterion_tqa_golden() {
    Check c;
    CaptionMap captions{{0, "a courtyard"}, {4, "a kitchen"}};
    auto rendered_map = render_caption_map(captions);
    auto reverse = [&](std::string rendered) {
        auto pos = rendered.find(rendered_map);
        if (pos == std::string::npos) return std::string();
        return rendered.replace(pos, rendered_map.size(), kImagesCaptionSlot);
    };
    c.expect(reverse(render_scene_filter_prompt(captions)) == kSceneFilterTemplate,
             "scene-filter prompt is not byte-identical after reversal");
    c.expect(reverse(render_qa_prompt(captions)) == kQaTemplate,
             "QA prompt is not byte-identical after reversal");
    c.expect(std::string(kCaptionPrompt) == "Give out the detailed description of this image.",
             "caption prompt changed");

    auto rec = parse_qa_response(
        R"({"Human": "At what second does the girl appear?", "Bot": "The girl appears at the 3rd second in the video."})");
    c.expect(rec.has_value() && rec->first == "At what second does the girl appear?" &&
                 rec->second == "The girl appears at the 3rd second in the video.",
             "example QA pair did not parse");
    c.expect(!parse_qa_response("None").has_value(), "the None sentinel did not parse");

    // end-to-end over the checked-in fixtures
    std::string dir = std::string(MINIVLM_GOLDEN_DIR) + "/tqa";
    auto client = MockClient::from_file(dir + "/mock.json");
    std::vector<std::string> manifests;
    for (const char* id : {"vid_a", "vid_b", "vid_c", "vid_d"})
        manifests.push_back(dir + "/" + id + ".manifest");
    auto out = (scratch_dir() / "tqa_out.jsonl").string();
    auto summary = run_pipeline(manifests, client, client, out, {2, 24});
    c.expect(summary.videos == 4 && summary.written == 1 && summary.filtered == 1 &&
                 summary.none == 1 && summary.parse_errors == 1,
             "pipeline summary mismatch");
    c.expect(slurp(out) == slurp(dir + "/expected.jsonl"),
             "pipeline output differs from the golden file");
    return c;
}

// --- criterion 9: checkpoint round-trip ------------------------------------------

Check criterion_checkpoint() {
    Check c;
    for (bool expert : {true, false}) {
        VlmConfig cfg = VlmConfig::tiny();
        cfg.dec.visual_expert = expert;
        auto model = init_model<float>(cfg, expert ? 101 : 102);
        auto dir = scratch_dir();
        auto p1 = (dir / "m1.ckpt").string(), p2 = (dir / "m2.ckpt").string();
        save_model(model, p1);
        auto loaded = load_model<float>(p1);
        save_model(loaded, p2);
        c.expect(slurp(p1) == slurp(p2), "save-load-save changed bytes");
        c.expect(loaded.cfg.dec.visual_expert == expert, "mode lost in round-trip");
        bool has_vis = false;
        for (const auto& [name, t] : loaded.params)
            if (name.size() >= 4 && name.rfind(".vis") == name.size() - 4) has_vis = true;
        c.expect(has_vis == expert, "vis tensors present iff visual_expert");
    }
    return c;
}

// --- criterion 10: short-answer rule ----------------------------------------------

Check criterion_short_answer() {
    Check c;
    Rng rng(1200);
    for (int it = 0; it < 200; ++it) {
        SftRecord rec;
        rec.answer_type = static_cast<int>(rng.below(2));
        std::size_t len = 1 + rng.below(15);
        for (std::size_t i = 0; i < len; ++i)
            rec.answer.push_back(static_cast<char>('a' + rng.below(26)));
        if (rng.below(5) == 0) rec.answer = std::string(kShortAnswerPrefix) + rec.answer;
        auto once = apply_short_answer_prefix(rec);
        auto twice = apply_short_answer_prefix(once);
        c.expect(once.answer == twice.answer, "prefix application is not idempotent");
        if (rec.answer_type == 1) {
            c.expect(once.answer == rec.answer, "type-1 answer was modified");
        } else {
            c.expect(once.answer.rfind(kShortAnswerPrefix, 0) == 0, "type-0 answer lacks prefix");
            std::string tail = once.answer.substr(std::strlen(kShortAnswerPrefix));
            c.expect(tail.rfind(kShortAnswerPrefix, 0) != 0, "prefix applied twice");
        }
    }

    // the masked loss covers the prefix tokens
    auto model = init_model<float>(VlmConfig::tiny(), 55);
    SftRecord rec{"color?", "blue", 0, "", ""};
    auto ex = prepare_example(rec, model.cfg, model.params);
    std::size_t expected_answer_len = std::strlen(kShortAnswerPrefix) + 4 + 1;  // + EOS
    c.expect(ex.span.end - ex.span.begin == expected_answer_len,
             "answer span does not include the prefix tokens");
    auto logits = decoder_forward(ex.seq, model.cfg.dec, model.params);
    auto base = mask_loss(logits, ex.seq, ex.span);
    // changing a gold token inside the prefix must change the loss
    auto mangled = ex.seq;
    mangled.ids[ex.span.begin + 1] = (mangled.ids[ex.span.begin + 1] + 1) % 256;
    auto moved = mask_loss(logits, mangled, ex.span);
    c.expect(std::abs(static_cast<double>(base.data[0]) - static_cast<double>(moved.data[0])) > 0,
             "prefix tokens do not contribute to the loss");
    return c;
}

}  // namespace

int main() {
    struct Criterion {
        const char* name;
        std::function<Check()> run;
    };
    std::vector<Criterion> criteria = {
        {"1. gradient suite < 1e-4 across all operations", criterion_gradients},
        {"2. quarter-length law and production-scale token counts", criterion_quarter_length},
        {"3. routing equivalences (expert-free, tied, oracle)", criterion_routing},
        {"4. causality of the decoder", criterion_causality},
        {"5. overfit oracle with bit-identical reruns", criterion_overfit},
        {"6. training-recipe fidelity and invariants", criterion_recipes},
        {"7. video path sampling, compression, interleave", criterion_video},
        {"8. TQA golden prompts and deterministic pipeline", criterion_tqa_golden},
        {"9. checkpoint round-trip in both decoder modes", criterion_checkpoint},
        {"10. short-answer rule and loss coverage", criterion_short_answer},
    };
    int failures = 0;
    for (auto& cr : criteria) {
        Check c;
        std::string detail;
        try {
            c = cr.run();
            detail = c.detail;
        } catch (const std::exception& e) {
            c.ok = false;
            detail = std::string("exception: ") + e.what();
        }
        if (c.ok) {
            std::printf("PASS  %s\n", cr.name);
        } else {
            std::printf("FAIL  %s  [%s]\n", cr.name, detail.c_str());
            ++failures;
        }
        std::fflush(stdout);
    }
    fs::remove_all(fs::temp_directory_path() / "minivlm_acceptance");
    return failures == 0 ? 0 : 1;
}
