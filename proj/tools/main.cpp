// SPDX-License-Identifier: Apache-2.0
//
// Command-line surface: train, infer, gradcheck, tqa-generate, eval.
// Exit codes: 0 success, 1 contract/usage error, 2 I/O or client failure.

#include <algorithm>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <memory>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "minivlm/eval.hpp"
#include "minivlm/gradcheck_suite.hpp"
#include "minivlm/http_client.hpp"
#include "minivlm/model.hpp"
#include "minivlm/tqa.hpp"
#include "minivlm/trainer.hpp"

namespace {

using namespace minivlm;

struct TrainSpec {
    VlmConfig model = VlmConfig::tiny();
    StageConfig stage;
};

// Config file: stage keys (optionally seeded from "preset"), plus an
// optional flat "model" section for the architecture.
TrainSpec parse_train_config(const nlohmann::json& j) {
    TrainSpec spec;
    if (j.contains("preset")) spec.stage = stage_preset(j.at("preset").get<std::string>());
    {
        StageConfig overlay = spec.stage;
        nlohmann::json stage_keys = j;
        stage_keys.erase("preset");
        stage_keys.erase("model");
        from_json(stage_keys, overlay);
        spec.stage = overlay;
    }
    if (j.contains("model")) {
        const auto& m = j.at("model");
        VlmConfig& c = spec.model;
        c.dec.visual_expert = m.value("visual_expert", c.dec.visual_expert);
        c.dec.embed_dim = m.value("decoder_embed", c.dec.embed_dim);
        c.dec.depth = m.value("decoder_depth", c.dec.depth);
        c.dec.heads = m.value("decoder_heads", c.dec.heads);
        c.dec.ffn_hidden = m.value("ffn_hidden", c.dec.ffn());
        c.dec.bidirectional_vision = m.value("bidirectional_vision", c.dec.bidirectional_vision);
        c.vit.embed_dim = m.value("vit_embed", c.vit.embed_dim);
        c.vit.depth = m.value("vit_depth", c.vit.depth);
        c.vit.heads = m.value("vit_heads", c.vit.heads);
        c.vit.patch_size = m.value("patch_size", c.vit.patch_size);
        c.vit.channels = m.value("channels", c.vit.channels);
        std::size_t grid = m.value("grid", c.vit.grid_h);
        c.vit.grid_h = c.vit.grid_w = grid;
        c.adapter.grid_h = c.adapter.grid_w = grid;
        c.adapter.in_dim = c.vit.embed_dim;
        c.adapter.out_dim = c.dec.embed_dim;
        c.adapter.hidden_dim = m.value("adapter_hidden", c.adapter.hidden());
        c.video.n_frames = m.value("n_frames", c.video.n_frames);
    }
    spec.model.validate();
    spec.stage.validate();
    return spec;
}

int cmd_train(const std::string& config_path, const std::string& data_path,
              const std::string& out_path) {
    std::ifstream f(config_path);
    if (!f) throw IoError("cannot open config: " + config_path);
    nlohmann::json j;
    try {
        f >> j;
    } catch (const nlohmann::json::exception& e) {
        throw IoError("bad config JSON: " + std::string(e.what()));
    }
    auto spec = parse_train_config(j);
    auto dataset = load_sft_dataset(data_path);
    auto model = init_model<float>(spec.model, spec.stage.seed);
    auto trace = run_stage(model, dataset, spec.stage, spec.stage.seed, out_path,
                           out_path + ".trace.csv");
    std::printf("steps %zu\n", trace.entries.size());
    std::printf("final_loss %.6f\n", trace.entries.back().second);
    std::printf("checkpoint %s\n", out_path.c_str());
    return 0;
}

int cmd_infer(const std::string& ckpt, const std::string& image, const std::string& video,
              const std::string& prompt, std::size_t max_tokens) {
    auto model = load_model<float>(ckpt);
    std::vector<int> prompt_ids = {ByteTokenizer::kBos};
    for (int id : ByteTokenizer::encode(prompt)) prompt_ids.push_back(id);
    const auto& table = model.params.get("dec.embed");
    MixedSequence<float> seq;
    if (!video.empty()) {
        auto entries = load_manifest(video);
        auto bundle = select_frames<std::string>(
            entries, model.cfg.video.n_frames,
            [](const std::string& p) { return load_cgimg(p); });
        auto frag = encode_video(bundle, model.cfg.vit, model.cfg.adapter, model.cfg.video,
                                 model.params, table);
        seq = assemble_with_fragment(prompt_ids, frag, {}, table);
    } else {
        auto vision = encode_image(load_cgimg(image), model.cfg, model.params);
        seq = assemble_sequence(prompt_ids, vision, {}, table);
    }
    std::printf("%s\n", generate(model, seq, max_tokens).c_str());
    return 0;
}

int cmd_gradcheck(const std::string& module) {
    auto results = run_gradcheck_suite(module);
    if (results.empty()) throw Error("no gradcheck module matches: " + module);
    bool ok = true;
    for (const auto& r : results) {
        bool pass = r.max_rel_error < 1e-4;
        ok = ok && pass;
        std::printf("%-18s %.3e %s\n", r.name.c_str(), r.max_rel_error, pass ? "ok" : "FAIL");
    }
    return ok ? 0 : 1;
}

int cmd_tqa_generate(const std::string& manifests_dir, const std::string& client_spec,
                     const std::string& out_path, std::size_t max_concurrency) {
    std::unique_ptr<ModelClient> client;
    if (client_spec.rfind("mock:", 0) == 0) {
        client = std::make_unique<MockClient>(MockClient::from_file(client_spec.substr(5)));
    } else if (client_spec.rfind("http://", 0) == 0 || client_spec.rfind("https://", 0) == 0) {
        HttpClientConfig cfg;
        cfg.url = client_spec;
        if (const char* tok = std::getenv("MINIVLM_API_TOKEN")) cfg.auth_token = tok;
        client = std::make_unique<HttpClient>(cfg);
    } else {
        throw Error("client must be mock:FILE or http(s)://URL, got: " + client_spec);
    }
    if (!std::filesystem::is_directory(manifests_dir))
        throw IoError("not a directory: " + manifests_dir);
    std::vector<std::string> manifests;
    for (const auto& entry : std::filesystem::directory_iterator(manifests_dir))
        if (entry.path().extension() == ".manifest") manifests.push_back(entry.path().string());
    std::sort(manifests.begin(), manifests.end());
    PipelineConfig cfg;
    cfg.max_concurrency = max_concurrency;
    auto summary = run_pipeline(manifests, *client, *client, out_path, cfg);
    std::printf("videos %zu\n", summary.videos);
    std::printf("written %zu\n", summary.written);
    std::printf("filtered %zu\n", summary.filtered);
    std::printf("none %zu\n", summary.none);
    std::printf("parse_errors %zu\n", summary.parse_errors);
    std::printf("client_errors %zu\n", summary.client_errors);
    return 0;
}

int cmd_eval(const std::string& pred, const std::string& gold, const std::string& kind) {
    EvalKind k = kind == "choice" ? EvalKind::Choice : EvalKind::Exact;
    auto metrics = evaluate(join_eval_files(pred, gold, k));
    std::printf("accuracy %.3f\n", metrics.accuracy);
    std::printf("n %zu\n", metrics.n);
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"desk-scale vision-language model toolkit"};
    app.require_subcommand(1);

    auto* train = app.add_subcommand("train", "run one training stage");
    std::string train_config, train_data, train_out;
    train->add_option("--config", train_config, "stage config JSON")->required();
    train->add_option("--data", train_data, "JSONL dataset")->required();
    train->add_option("--out", train_out, "checkpoint output path")->required();

    auto* infer = app.add_subcommand("infer", "greedy decoding from a checkpoint");
    std::string infer_ckpt, infer_image, infer_video, infer_prompt;
    std::size_t infer_max_tokens = 64;
    infer->add_option("--ckpt", infer_ckpt, "checkpoint path")->required();
    auto* image_opt = infer->add_option("--image", infer_image, "CGIMG image input");
    auto* video_opt = infer->add_option("--video", infer_video, "video manifest input");
    infer->add_option("--prompt", infer_prompt, "prompt text")->required();
    infer->add_option("--max-tokens", infer_max_tokens, "generation budget");
    image_opt->excludes(video_opt);
    video_opt->excludes(image_opt);

    auto* gradcheck = app.add_subcommand("gradcheck", "finite-difference gradient suite");
    std::string gradcheck_module;
    gradcheck->add_option("--module", gradcheck_module, "run only modules matching this name");

    auto* tqa = app.add_subcommand("tqa-generate", "temporal-grounding QA data pipeline");
    std::string tqa_manifests, tqa_client, tqa_out;
    std::size_t tqa_concurrency = 4;
    tqa->add_option("--manifests", tqa_manifests, "directory of .manifest files")->required();
    tqa->add_option("--client", tqa_client, "mock:FILE or http(s)://URL")->required();
    tqa->add_option("--out", tqa_out, "output JSONL path")->required();
    tqa->add_option("--max-concurrency", tqa_concurrency, "in-flight client call cap");

    auto* eval = app.add_subcommand("eval", "score predictions against gold");
    std::string eval_pred, eval_gold, eval_kind;
    eval->add_option("--pred", eval_pred, "prediction JSONL")->required();
    eval->add_option("--gold", eval_gold, "gold JSONL")->required();
    eval->add_option("--kind", eval_kind, "choice or exact")
        ->required()
        ->check(CLI::IsMember({"choice", "exact"}));

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        app.exit(e);  // prints usage or error text
        return e.get_exit_code() == 0 ? 0 : 1;
    }

    try {
        if (train->parsed()) return cmd_train(train_config, train_data, train_out);
        if (infer->parsed()) {
            if (infer_image.empty() == infer_video.empty())
                throw Error("infer needs exactly one of --image or --video");
            return cmd_infer(infer_ckpt, infer_image, infer_video, infer_prompt,
                             infer_max_tokens);
        }
        if (gradcheck->parsed()) return cmd_gradcheck(gradcheck_module);
        if (tqa->parsed())
            return cmd_tqa_generate(tqa_manifests, tqa_client, tqa_out, tqa_concurrency);
        if (eval->parsed()) return cmd_eval(eval_pred, eval_gold, eval_kind);
    } catch (const IoError& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return 2;
    } catch (const ClientFailure& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return 2;
    } catch (const Error& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return 1;
    } catch (const std::exception& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return 1;
    }
    return 1;
}
