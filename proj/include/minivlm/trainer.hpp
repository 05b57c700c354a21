// SPDX-License-Identifier: Apache-2.0
//
// Training recipes: stage configs with per-group learning rates and group
// freezing, answer-span loss masking, the short-answer prefix rule, the
// text/vision batch interleave, the piecewise-constant resolution schedule,
// and the Adam loop itself. Stages are fully deterministic under a fixed
// seed: shuffling, batching, and accumulation order are all pinned.

#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <set>
#include <string>
#include <unordered_map>
#include <vector>

#include <json.hpp>

#include "minivlm/model.hpp"
#include "minivlm/rng.hpp"
#include "minivlm/tensor.hpp"
#include "minivlm/tokenizer.hpp"
#include "minivlm/video.hpp"

namespace minivlm {

inline constexpr const char* kShortAnswerPrefix = "Short Answer: ";

// ---------------------------------------------------------------------------
// Configuration
// ---------------------------------------------------------------------------

struct StageConfig {
    double lr = 1e-5;
    double vit_lr_ratio = 0.1;
    std::size_t global_batch = 8;
    std::size_t steps = 100;
    std::vector<std::string> trainable_groups = {"vit", "adapter", "decoder"};
    std::vector<std::pair<std::size_t, std::size_t>> resolution_schedule;  // (start_step, resolution)
    double text_mix_ratio = 0.0;
    std::uint64_t seed = 0;
    std::size_t default_resolution = 0;  // used when the schedule is empty; 0 accepts any input

    void validate() const {
        if (!(lr > 0)) throw ShapeMismatch("stage: lr must be > 0");
        if (steps < 1) throw ShapeMismatch("stage: steps must be >= 1");
        if (text_mix_ratio < 0 || text_mix_ratio > 1)
            throw ShapeMismatch("stage: text_mix_ratio must lie in [0,1]");
        for (std::size_t i = 0; i < resolution_schedule.size(); ++i) {
            if (i == 0 && resolution_schedule[0].first != 0)
                throw ShapeMismatch("stage: resolution schedule must start at step 0");
            if (i > 0 && resolution_schedule[i].first <= resolution_schedule[i - 1].first)
                throw ShapeMismatch("stage: resolution schedule start_steps must increase");
        }
    }
};

inline void to_json(nlohmann::json& j, const StageConfig& s) {
    j = nlohmann::json{{"lr", s.lr},
                       {"vit_lr_ratio", s.vit_lr_ratio},
                       {"global_batch", s.global_batch},
                       {"steps", s.steps},
                       {"trainable_groups", s.trainable_groups},
                       {"resolution_schedule", s.resolution_schedule},
                       {"text_mix_ratio", s.text_mix_ratio},
                       {"seed", s.seed}};
}

inline void from_json(const nlohmann::json& j, StageConfig& s) {
    s.lr = j.value("lr", s.lr);
    s.vit_lr_ratio = j.value("vit_lr_ratio", s.vit_lr_ratio);
    s.global_batch = j.value("global_batch", s.global_batch);
    s.steps = j.value("steps", s.steps);
    s.trainable_groups = j.value("trainable_groups", s.trainable_groups);
    if (j.contains("resolution_schedule"))
        s.resolution_schedule =
            j.at("resolution_schedule").get<std::vector<std::pair<std::size_t, std::size_t>>>();
    s.text_mix_ratio = j.value("text_mix_ratio", s.text_mix_ratio);
    s.seed = j.value("seed", s.seed);
    s.validate();
}

// Presets carrying the published recipe constants. The video stages pin only
// the learning rates; their step and batch counts are artifact stand-ins.
inline StageConfig stage_preset(const std::string& name) {
    StageConfig s;
    if (name == "image-stage1") {
        s.lr = 1e-5;
        s.global_batch = 2340;
        s.steps = 3000;
        s.trainable_groups = {"vit", "adapter", "decoder"};
    } else if (name == "image-stage2") {
        s.lr = 1e-5;
        s.global_batch = 1150;
        s.steps = 750;
        s.trainable_groups = {"vit", "adapter", "decoder"};
    } else if (name == "video-stage1") {
        s.lr = 4e-6;
        s.global_batch = 32;
        s.steps = 1000;
        s.trainable_groups = {"vit", "adapter", "decoder", "video"};
    } else if (name == "video-stage2") {
        s.lr = 1e-6;
        s.global_batch = 32;
        s.steps = 1000;
        s.trainable_groups = {"vit", "adapter", "decoder", "video"};
    } else {
        throw Error("unknown stage preset: " + name);
    }
    return s;
}

// ---------------------------------------------------------------------------
// Records
// ---------------------------------------------------------------------------

struct SftRecord {
    std::string prompt;
    std::string answer;
    int answer_type = 1;   // 0: concise, 1: comprehensive
    std::string image;     // optional CGIMG path
    std::string video;     // optional manifest path

    void validate() const {
        if (answer.empty()) throw ShapeMismatch("sft record: answer must be non-empty");
        if (answer_type != 0 && answer_type != 1)
            throw ShapeMismatch("sft record: answer_type must be 0 or 1");
    }

    bool is_text_only() const { return image.empty() && video.empty(); }
};

inline void to_json(nlohmann::json& j, const SftRecord& r) {
    j = nlohmann::json{{"prompt", r.prompt}, {"answer", r.answer}, {"type", r.answer_type}};
    if (!r.image.empty()) j["image"] = r.image;
    if (!r.video.empty()) j["video"] = r.video;
}

inline void from_json(const nlohmann::json& j, SftRecord& r) {
    r.prompt = j.value("prompt", "");
    r.answer = j.at("answer").get<std::string>();
    r.answer_type = j.at("type").get<int>();
    r.image = j.value("image", "");
    r.video = j.value("video", "");
    r.validate();
}

// Relative image/video paths in the file resolve against its directory.
inline std::vector<SftRecord> load_sft_dataset(const std::string& path) {
    std::ifstream f(path);
    if (!f) throw IoError("cannot open dataset: " + path);
    auto dir = std::filesystem::path(path).parent_path();
    auto resolve = [&](std::string& p) {
        if (p.empty()) return;
        std::filesystem::path fp(p);
        if (fp.is_relative()) p = (dir / fp).string();
    };
    std::vector<SftRecord> records;
    std::string line;
    while (std::getline(f, line)) {
        if (line.empty()) continue;
        try {
            records.push_back(nlohmann::json::parse(line).get<SftRecord>());
        } catch (const nlohmann::json::exception& e) {
            throw IoError("bad dataset line: " + std::string(e.what()));
        }
        resolve(records.back().image);
        resolve(records.back().video);
    }
    return records;
}

// Concise answers are prefixed so the model can keep the two answer styles
// apart; idempotent, comprehensive answers pass through.
inline SftRecord apply_short_answer_prefix(SftRecord rec) {
    rec.validate();
    if (rec.answer_type == 0 && rec.answer.rfind(kShortAnswerPrefix, 0) != 0)
        rec.answer = kShortAnswerPrefix + rec.answer;
    return rec;
}

// ---------------------------------------------------------------------------
// Loss masking
// ---------------------------------------------------------------------------

// Half-open range of sequence positions holding the answer tokens.
struct AnswerSpan {
    std::size_t begin = 0;
    std::size_t end = 0;
    bool empty() const { return end <= begin; }
};

// Mean next-token cross-entropy over the answer positions only: the row at
// position t-1 predicts the token at position t for every t in the span.
// Prompt and vision positions contribute nothing.
template <class Real>
Tensor<Real> mask_loss(const Tensor<Real>& logits, const MixedSequence<Real>& seq,
                       AnswerSpan span) {
    if (span.empty()) throw EmptyTarget("mask_loss: empty answer span");
    if (span.begin < 1 || span.end > seq.length())
        throw ShapeMismatch("mask_loss: span outside the sequence");
    std::size_t L = seq.length();
    std::vector<int> targets(L, 0);
    std::vector<bool> rows(L, false);
    for (std::size_t t = span.begin; t < span.end; ++t) {
        if (seq.ids[t] == MixedSequence<Real>::kNoToken)
            throw ShapeMismatch("mask_loss: span covers a vision position");
        rows[t - 1] = true;
        targets[t - 1] = seq.ids[t];
    }
    return masked_cross_entropy(logits, targets, rows);
}

// ---------------------------------------------------------------------------
// Rates, freezing, schedules
// ---------------------------------------------------------------------------

inline const std::set<std::string>& known_groups() {
    static const std::set<std::string> g = {"vit", "adapter", "decoder", "video", "meta"};
    return g;
}

// Per-group rate: frozen groups get 0, the encoder runs at lr*vit_lr_ratio,
// everything else at lr. "meta" tensors are bookkeeping and never train.
inline double lr_for(const std::string& group, const StageConfig& stage) {
    if (!known_groups().count(group)) throw UnknownGroup("unknown parameter group: " + group);
    if (group == "meta") return 0.0;
    bool trainable = std::find(stage.trainable_groups.begin(), stage.trainable_groups.end(),
                               group) != stage.trainable_groups.end();
    if (!trainable) return 0.0;
    return group == "vit" ? stage.lr * stage.vit_lr_ratio : stage.lr;
}

// Exactly the named groups receive gradients; validates the names against
// the model's actual parameter groups.
template <class Real>
std::set<std::string> trainable_set(const StageConfig& stage, const VlmModel<Real>& model) {
    std::set<std::string> model_groups;
    for (const auto& [name, t] : model.params) model_groups.insert(group_of(name));
    std::set<std::string> out;
    for (const auto& g : stage.trainable_groups) {
        if (!model_groups.count(g)) throw UnknownGroup("group not in model: " + g);
        out.insert(g);
    }
    return out;
}

// Bresenham-style interleave: batch t is a text batch iff t*ratio crosses an
// integer boundary at t+1.
inline bool text_batch_at(std::size_t t, double ratio) {
    return std::floor(static_cast<double>(t + 1) * ratio) -
               std::floor(static_cast<double>(t) * ratio) >=
           1.0;
}

// First `count` tags of the interleave schedule.
inline std::vector<bool> mix_schedule(std::size_t count, double ratio) {
    std::vector<bool> tags(count);
    for (std::size_t t = 0; t < count; ++t) tags[t] = text_batch_at(t, ratio);
    return tags;
}

// Piecewise-constant lookup: the resolution of the last schedule entry with
// start_step <= step; the config default when the schedule is empty.
inline std::size_t resolution_at(std::size_t step, const StageConfig& stage) {
    std::size_t res = stage.default_resolution;
    for (const auto& [start, r] : stage.resolution_schedule) {
        if (start <= step) res = r;
        else break;
    }
    return res;
}

// ---------------------------------------------------------------------------
// Deterministic sampling and batching
// ---------------------------------------------------------------------------

// Epoch-shuffled index stream with a fixed seed.
class IndexStream {
public:
    IndexStream(std::size_t n, std::uint64_t seed) : rng_(seed), order_(n) {
        for (std::size_t i = 0; i < n; ++i) order_[i] = i;
        rng_.shuffle(order_);
    }

    std::size_t next() {
        if (pos_ == order_.size()) {
            rng_.shuffle(order_);
            pos_ = 0;
        }
        return order_[pos_++];
    }

    bool empty() const { return order_.empty(); }

private:
    Rng rng_;
    std::vector<std::size_t> order_;
    std::size_t pos_ = 0;
};

// Interleaved batch planner over a split dataset. Yields, per step, whether
// the batch is text-only and the record indices that fill it. When the pool
// a tag asks for is empty, the other pool substitutes.
class MixedBatcher {
public:
    MixedBatcher(const std::vector<std::size_t>& text_idx,
                 const std::vector<std::size_t>& vl_idx, double ratio, std::uint64_t seed)
        : text_(text_idx.size(), seed * 2 + 1),
          vl_(vl_idx.size(), seed * 2 + 2),
          text_idx_(text_idx),
          vl_idx_(vl_idx),
          ratio_(ratio) {
        if (text_idx.empty() && vl_idx.empty()) throw EmptyDataset();
    }

    std::vector<std::size_t> next_batch(std::size_t t, std::size_t batch_size) {
        bool text = text_batch_at(t, ratio_);
        if (text && text_idx_.empty()) text = false;
        if (!text && vl_idx_.empty()) text = true;
        std::vector<std::size_t> out(batch_size);
        for (std::size_t i = 0; i < batch_size; ++i)
            out[i] = text ? text_idx_[text_.next()] : vl_idx_[vl_.next()];
        return out;
    }

private:
    IndexStream text_, vl_;
    std::vector<std::size_t> text_idx_, vl_idx_;
    double ratio_;
};

// ---------------------------------------------------------------------------
// Optimizer
// ---------------------------------------------------------------------------

// Adam with (0.9, 0.95), no weight decay, constant per-group rates.
template <class Real>
class Adam {
public:
    explicit Adam(double beta1 = 0.9, double beta2 = 0.95, double eps = 1e-8)
        : beta1_(beta1), beta2_(beta2), eps_(eps) {}

    void step(ParamStore<Real>& params,
              const std::unordered_map<std::string, std::vector<Real>>& grads,
              const std::function<double(const std::string&)>& lr_of) {
        ++t_;
        double bc1 = 1.0 - std::pow(beta1_, static_cast<double>(t_));
        double bc2 = 1.0 - std::pow(beta2_, static_cast<double>(t_));
        for (auto& [name, tensor] : params) {
            auto git = grads.find(name);
            if (git == grads.end()) continue;
            double lr = lr_of(name);
            if (lr == 0.0) continue;
            auto& [m, v] = state_[name];
            if (m.empty()) {
                m.assign(tensor.numel(), Real(0));
                v.assign(tensor.numel(), Real(0));
            }
            const auto& g = git->second;
            for (std::size_t i = 0; i < tensor.numel(); ++i) {
                m[i] = static_cast<Real>(beta1_ * m[i] + (1.0 - beta1_) * g[i]);
                v[i] = static_cast<Real>(beta2_ * v[i] + (1.0 - beta2_) * g[i] * g[i]);
                double mh = m[i] / bc1, vh = v[i] / bc2;
                tensor.data[i] -= static_cast<Real>(lr * mh / (std::sqrt(vh) + eps_));
            }
        }
    }

private:
    double beta1_, beta2_, eps_;
    std::size_t t_ = 0;
    std::unordered_map<std::string, std::pair<std::vector<Real>, std::vector<Real>>> state_;
};

// ---------------------------------------------------------------------------
// Stage runner
// ---------------------------------------------------------------------------

struct LossTrace {
    std::vector<std::pair<std::size_t, double>> entries;

    void write_csv(const std::string& path) const {
        std::ofstream f(path);
        if (!f) throw IoError("cannot open trace for write: " + path);
        f << "step,loss\n";
        char buf[64];
        for (const auto& [step, loss] : entries) {
            std::snprintf(buf, sizeof(buf), "%zu,%.6f\n", step, loss);
            f << buf;
        }
    }
};

// One training example lowered to a sequence plus its answer span.
template <class Real>
struct PreparedExample {
    MixedSequence<Real> seq;
    AnswerSpan span;
};

template <class Real>
PreparedExample<Real> prepare_example(const SftRecord& raw, const VlmConfig& cfg,
                                      const ParamStore<Real>& params) {
    SftRecord rec = apply_short_answer_prefix(raw);
    std::vector<int> prompt_ids = {ByteTokenizer::kBos};
    for (int id : ByteTokenizer::encode(rec.prompt)) prompt_ids.push_back(id);
    std::vector<int> answer_ids = ByteTokenizer::encode(rec.answer);
    answer_ids.push_back(ByteTokenizer::kEos);

    const auto& table = params.get("dec.embed");
    MixedSequence<Real> seq;
    if (!rec.video.empty()) {
        auto entries = load_manifest(rec.video);
        auto bundle = select_frames<std::string>(
            entries, cfg.video.n_frames,
            [](const std::string& path) { return load_cgimg(path); });
        auto frag = encode_video(bundle, cfg.vit, cfg.adapter, cfg.video, params, table);
        seq = assemble_with_fragment(prompt_ids, frag, answer_ids, table);
    } else if (!rec.image.empty()) {
        auto vision = encode_image(load_cgimg(rec.image), cfg, params);
        seq = assemble_sequence(prompt_ids, vision, answer_ids, table);
    } else {
        seq = assemble_sequence(prompt_ids, Tensor<Real>(), answer_ids, table);
    }
    AnswerSpan span{seq.length() - answer_ids.size(), seq.length()};
    return {std::move(seq), span};
}

// `steps` Adam iterations over deterministic shuffled batches. Gradients of
// one step accumulate record by record on a single tape (micro batch 1,
// `global_batch` accumulation steps). Emits the checkpoint and the loss
// trace when paths are given.
template <class Real>
LossTrace run_stage(VlmModel<Real>& model, const std::vector<SftRecord>& dataset,
                    const StageConfig& stage, std::uint64_t seed,
                    const std::string& ckpt_path = "", const std::string& trace_path = "") {
    stage.validate();
    if (dataset.empty()) throw EmptyDataset();
    for (const auto& r : dataset) r.validate();
    auto trainable = trainable_set(stage, model);

    std::vector<std::size_t> text_idx, vl_idx;
    for (std::size_t i = 0; i < dataset.size(); ++i)
        (dataset[i].is_text_only() ? text_idx : vl_idx).push_back(i);
    MixedBatcher batcher(text_idx, vl_idx, stage.text_mix_ratio, seed);

    Adam<Real> opt;
    auto lr_of = [&](const std::string& name) { return lr_for(group_of(name), stage); };
    LossTrace trace;

    for (std::size_t step = 0; step < stage.steps; ++step) {
        std::size_t res = resolution_at(step, stage);
        auto batch = batcher.next_batch(step, stage.global_batch);

        Tape<Real> tape;
        ParamStore<Real> bound;
        for (const auto& [name, t] : model.params)
            bound.add(name, trainable.count(group_of(name)) ? tape.watch(t) : t);

        Tensor<Real> total;
        for (std::size_t idx : batch) {
            const SftRecord& rec = dataset[idx];
            if (res != 0 && !rec.image.empty()) {
                // fixed positional grids: inputs must already match the active resolution
                auto img = load_cgimg(rec.image);
                if (img.height != res || img.width != res)
                    throw IoError("input resolution does not match the schedule at this step");
            }
            auto ex = prepare_example(rec, model.cfg, bound);
            auto logits = decoder_forward(ex.seq, model.cfg.dec, bound);
            auto loss = mask_loss(logits, ex.seq, ex.span);
            total = total.numel() == 0 ? loss : add(total, loss);
        }
        auto mean_loss = scale(total, Real(1) / Real(batch.size()));
        tape.backward(mean_loss);

        std::unordered_map<std::string, std::vector<Real>> grads;
        for (const auto& [name, t] : bound)
            if (t.recorded()) grads[name] = tape.grad(t.node);
        opt.step(model.params, grads, lr_of);
        trace.entries.emplace_back(step, static_cast<double>(mean_loss.data[0]));
    }

    if (!ckpt_path.empty()) save_model(model, ckpt_path);
    if (!trace_path.empty()) trace.write_csv(trace_path);
    return trace;
}

}  // namespace minivlm
