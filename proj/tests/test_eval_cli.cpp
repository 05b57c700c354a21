// SPDX-License-Identifier: Apache-2.0

#include <catch2/catch_amalgamated.hpp>

#include <cstdio>
#include <filesystem>
#include <fstream>

#include "minivlm/eval.hpp"
#include "minivlm/image.hpp"

using namespace minivlm;

namespace {

struct CmdResult {
    int status;
    std::string out;
};

CmdResult run_cmd(const std::string& cmd) {
    std::string full = cmd + " 2>/dev/null";
    FILE* pipe = popen(full.c_str(), "r");
    REQUIRE(pipe != nullptr);
    std::string out;
    char buf[512];
    while (std::size_t n = fread(buf, 1, sizeof(buf), pipe)) out.append(buf, n);
    int rc = pclose(pipe);
    return {WEXITSTATUS(rc), out};
}

const std::string cli = MINIVLM_CLI_PATH;
const std::string golden_dir = MINIVLM_GOLDEN_DIR;

std::string slurp(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    return std::string((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
}

struct TempDir {
    std::filesystem::path dir;
    explicit TempDir(const char* name) {
        dir = std::filesystem::temp_directory_path() / name;
        std::filesystem::remove_all(dir);
        std::filesystem::create_directories(dir);
    }
    ~TempDir() { std::filesystem::remove_all(dir); }
};

}  // namespace

TEST_CASE("extract_choice finds the first standalone letter") {
    REQUIRE(extract_choice("The answer is (B).") == 'B');
    REQUIRE(extract_choice("B") == 'B');
    REQUIRE(extract_choice("Answer: C") == 'C');
    REQUIRE(extract_choice("BEAD") == std::nullopt);  // letters embedded in a word
    REQUIRE(extract_choice("A1") == std::nullopt);
    REQUIRE(extract_choice("nothing here") == std::nullopt);
    REQUIRE(extract_choice("D, not E") == 'D');
}

TEST_CASE("evaluate: accuracy arithmetic and kinds") {
    std::vector<EvalRecord> records = {
        {"1", "The answer is (B).", "B", EvalKind::Choice},
        {"2", "A", "A", EvalKind::Choice},
        {"3", "C", "D", EvalKind::Choice},
        {"4", "E", "E", EvalKind::Choice},
    };
    auto m = evaluate(records);
    REQUIRE(m.n == 4);
    REQUIRE(m.accuracy == Catch::Approx(0.75));

    std::vector<EvalRecord> exact = {
        {"1", "  Blue ", "blue", EvalKind::Exact},
        {"2", "red", "crimson", EvalKind::Exact},
    };
    REQUIRE(evaluate(exact).accuracy == Catch::Approx(0.5));

    REQUIRE_THROWS_AS(evaluate({}), EmptyEvalSet);
}

TEST_CASE("evaluate: records with no extractable letter count as wrong") {
    std::vector<EvalRecord> records = {
        {"1", "no letter", "B", EvalKind::Choice},
        {"2", "B", "B", EvalKind::Choice},
    };
    REQUIRE(evaluate(records).accuracy == Catch::Approx(0.5));
}

TEST_CASE("cli: eval prints fixed-point accuracy and exits 0") {
    TempDir tmp("minivlm_cli_eval");
    {
        std::ofstream p(tmp.dir / "pred.jsonl");
        p << R"({"id": "1", "text": "The answer is (B)."})" << "\n";
        p << R"({"id": "2", "text": "A"})" << "\n";
        p << R"({"id": "3", "text": "C"})" << "\n";
        p << R"({"id": "4", "text": "E"})" << "\n";
        std::ofstream g(tmp.dir / "gold.jsonl");
        g << R"({"id": "1", "text": "B"})" << "\n";
        g << R"({"id": "2", "text": "A"})" << "\n";
        g << R"({"id": "3", "text": "D"})" << "\n";
        g << R"({"id": "4", "text": "E"})" << "\n";
    }
    auto res = run_cmd(cli + " eval --pred " + (tmp.dir / "pred.jsonl").string() + " --gold " +
                       (tmp.dir / "gold.jsonl").string() + " --kind choice");
    REQUIRE(res.status == 0);
    REQUIRE(res.out == "accuracy 0.750\nn 4\n");
}

TEST_CASE("cli: unknown subcommand and missing files map to contract exit codes") {
    REQUIRE(run_cmd(cli + " frobnicate").status == 1);
    REQUIRE(run_cmd(cli).status == 1);
    auto io = run_cmd(cli + " eval --pred /nonexistent.jsonl --gold /nonexistent.jsonl --kind exact");
    REQUIRE(io.status == 2);
    auto badkind = run_cmd(cli + " eval --pred a --gold b --kind sorta");
    REQUIRE(badkind.status == 1);
}

TEST_CASE("cli: gradcheck exits 0 with one line per module") {
    auto res = run_cmd(cli + " gradcheck");
    REQUIRE(res.status == 0);
    for (const char* name : {"matmul", "conv2x2_s2", "swiglu", "softmax", "vit_forward", "adapt",
                             "expert_attention", "expert_ffn", "decoder_forward"})
        REQUIRE(res.out.find(name) != std::string::npos);
    REQUIRE(res.out.find("FAIL") == std::string::npos);

    auto one = run_cmd(cli + " gradcheck --module matmul");
    REQUIRE(one.status == 0);
    REQUIRE(one.out.find("decoder_forward") == std::string::npos);

    REQUIRE(run_cmd(cli + " gradcheck --module nonsense").status == 1);
}

TEST_CASE("cli: train then infer round-trips and decodes reproducibly") {
    TempDir tmp("minivlm_cli_train");
    ImageGrid img(1, 4, 4, std::vector<double>(16, 0.5));
    save_cgimg((tmp.dir / "img.cgimg").string(), img);
    {
        std::ofstream cfg(tmp.dir / "config.json");
        cfg << R"({
  "lr": 1e-3, "global_batch": 2, "steps": 3, "seed": 5,
  "trainable_groups": ["adapter", "decoder"],
  "model": {"decoder_embed": 16, "decoder_depth": 1, "decoder_heads": 2, "ffn_hidden": 32,
            "vit_embed": 8, "vit_depth": 1, "vit_heads": 2, "patch_size": 2, "grid": 2,
            "adapter_hidden": 8}
})";
        std::ofstream data(tmp.dir / "data.jsonl");
        data << R"({"prompt": "hi", "answer": "yes", "type": 0, "image": "img.cgimg"})" << "\n";
        data << R"({"prompt": "lo", "answer": "no", "type": 0, "image": "img.cgimg"})" << "\n";
    }
    // dataset image paths resolve relative to the process cwd; run from tmp
    auto ckpt = (tmp.dir / "model.ckpt").string();
    auto res = run_cmd("cd " + tmp.dir.string() + " && " + cli +
                       " train --config config.json --data data.jsonl --out " + ckpt);
    INFO(res.out);
    REQUIRE(res.status == 0);
    REQUIRE(res.out.find("steps 3") != std::string::npos);
    REQUIRE(res.out.find("checkpoint " + ckpt) != std::string::npos);
    REQUIRE(std::filesystem::exists(ckpt));
    REQUIRE(std::filesystem::exists(ckpt + ".trace.csv"));

    auto infer_cmd = cli + " infer --ckpt " + ckpt + " --image " +
                     (tmp.dir / "img.cgimg").string() + " --prompt hi --max-tokens 8";
    auto out1 = run_cmd(infer_cmd);
    auto out2 = run_cmd(infer_cmd);
    REQUIRE(out1.status == 0);
    REQUIRE(out1.out == out2.out);  // greedy decoding is reproducible

    // exactly one of --image / --video
    auto neither = run_cmd(cli + " infer --ckpt " + ckpt + " --prompt hi");
    REQUIRE(neither.status == 1);
}

TEST_CASE("cli: tqa-generate with the scripted mock reproduces the golden file") {
    TempDir tmp("minivlm_cli_tqa");
    auto out = (tmp.dir / "records.jsonl").string();
    auto res = run_cmd(cli + " tqa-generate --manifests " + golden_dir + "/tqa --client mock:" +
                       golden_dir + "/tqa/mock.json --out " + out + " --max-concurrency 2");
    INFO(res.out);
    REQUIRE(res.status == 0);
    REQUIRE(res.out.find("videos 4") != std::string::npos);
    REQUIRE(res.out.find("written 1") != std::string::npos);
    REQUIRE(res.out.find("filtered 1") != std::string::npos);
    REQUIRE(slurp(out) == slurp(golden_dir + std::string("/tqa/expected.jsonl")));

    auto missing = run_cmd(cli + " tqa-generate --manifests " + golden_dir +
                           "/tqa --client mock:/nonexistent.json --out " + out);
    REQUIRE(missing.status == 2);

    auto badclient = run_cmd(cli + " tqa-generate --manifests " + golden_dir +
                             "/tqa --client carrier-pigeon --out " + out);
    REQUIRE(badclient.status == 1);
}
