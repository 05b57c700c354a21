// SPDX-License-Identifier: Apache-2.0
//
// Temporal-grounding data factory: caption frames with a vision-model
// client, keep only videos whose captions show significant scene change,
// generate one time-anchored QA pair few-shot, parse strictly, and emit
// JSONL records. Prompt rendering is golden: reversing the documented
// substitution must reproduce the embedded templates byte for byte.

#pragma once

#include <atomic>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <mutex>
#include <optional>
#include <string>
#include <thread>
#include <vector>

#include <json.hpp>

#include "minivlm/errors.hpp"
#include "minivlm/prompts.hpp"
#include "minivlm/video.hpp"

namespace minivlm {

// Ordered map from integer second to caption text.
using CaptionMap = std::map<long long, std::string>;

struct TQARecord {
    std::string video_id;
    std::string question;
    std::string answer;

    void validate() const {
        if (question.empty() || answer.empty())
            throw ShapeMismatch("tqa record: question and answer must be non-empty");
    }
};

// ---------------------------------------------------------------------------
// Clients
// ---------------------------------------------------------------------------

class ModelClient {
public:
    virtual ~ModelClient() = default;
    // Returns the completion for a prompt; throws ClientFailure when the
    // backend cannot answer.
    virtual std::string complete(const std::string& prompt) = 0;
};

// 64-bit FNV-1a over the prompt bytes, as 16 lowercase hex digits. Keys of
// the mock-client response file.
inline std::string prompt_digest(const std::string& prompt) {
    std::uint64_t h = 0xcbf29ce484222325ull;
    for (unsigned char c : prompt) {
        h ^= c;
        h *= 0x100000001b3ull;
    }
    char buf[17];
    std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(h));
    return buf;
}

// Deterministic stand-in for the hosted models: a fixed response per prompt
// digest, loaded from a JSON object file.
class MockClient : public ModelClient {
public:
    explicit MockClient(std::map<std::string, std::string> responses)
        : responses_(std::move(responses)) {}

    static MockClient from_file(const std::string& path) {
        std::ifstream f(path);
        if (!f) throw IoError("cannot open mock client file: " + path);
        nlohmann::json j;
        try {
            f >> j;
        } catch (const nlohmann::json::exception& e) {
            throw IoError("bad mock client file: " + std::string(e.what()));
        }
        std::map<std::string, std::string> responses;
        for (auto it = j.begin(); it != j.end(); ++it)
            responses[it.key()] = it.value().get<std::string>();
        return MockClient(std::move(responses));
    }

    std::string complete(const std::string& prompt) override {
        auto it = responses_.find(prompt_digest(prompt));
        if (it == responses_.end())
            throw ClientFailure("mock has no response for digest " + prompt_digest(prompt));
        return it->second;
    }

private:
    std::map<std::string, std::string> responses_;
};

// ---------------------------------------------------------------------------
// Pipeline stages
// ---------------------------------------------------------------------------

// One caption call per frame with the verbatim caption prompt; keyed by the
// frame's nearest integer second.
inline CaptionMap caption_frames(const FrameBundle& bundle, ModelClient& client) {
    bundle.validate();
    CaptionMap captions;
    for (std::size_t i = 0; i < bundle.frames.size(); ++i) {
        long long key = std::llround(bundle.timestamps[i]);
        if (captions.count(key))
            throw DuplicateSecond("two frames round to second " + std::to_string(key));
        std::string caption = client.complete(kCaptionPrompt);
        if (caption.empty()) throw ClientFailure("empty caption response");
        captions[key] = caption;
    }
    return captions;
}

// Canonical `{images_caption}` rendering: braces-delimited, keys as quoted
// decimal seconds ascending, values as quoted captions, ", " between entries.
inline std::string render_caption_map(const CaptionMap& captions) {
    std::string out = "{";
    bool first = true;
    for (const auto& [sec, caption] : captions) {
        if (!first) out += ", ";
        first = false;
        out += nlohmann::json(std::to_string(sec)).dump();
        out += ": ";
        out += nlohmann::json(caption).dump();
    }
    return out + "}";
}

namespace detail {

inline std::string substitute_captions(const char* tmpl, const CaptionMap& captions) {
    if (captions.empty()) throw EmptyCaptions();
    std::string out = tmpl;
    auto pos = out.find(kImagesCaptionSlot);
    if (pos == std::string::npos) throw Error("template lacks the caption slot");
    return out.replace(pos, std::string(kImagesCaptionSlot).size(), render_caption_map(captions));
}

}  // namespace detail

inline std::string render_scene_filter_prompt(const CaptionMap& captions) {
    return detail::substitute_captions(kSceneFilterTemplate, captions);
}

inline std::string render_qa_prompt(const CaptionMap& captions) {
    return detail::substitute_captions(kQaTemplate, captions);
}

// Normalized yes/no reading of the filter response: trim, lowercase, strip
// trailing punctuation; anything else is ambiguous, never guessed.
inline bool filter_scene(const CaptionMap& captions, ModelClient& client) {
    std::string response = client.complete(render_scene_filter_prompt(captions));
    std::size_t b = response.find_first_not_of(" \t\r\n");
    std::size_t e = response.find_last_not_of(" \t\r\n");
    std::string norm = b == std::string::npos ? "" : response.substr(b, e - b + 1);
    while (!norm.empty() && (norm.back() == '.' || norm.back() == '!' || norm.back() == '?'))
        norm.pop_back();
    for (char& c : norm) c = static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
    if (norm == "yes") return true;
    if (norm == "no") return false;
    throw AmbiguousFilterResponse("filter response was: " + response);
}

// Strict parse of the QA response: the "None" sentinel yields no record;
// otherwise the text must be a JSON object with exactly the keys "Human"
// and "Bot" holding non-empty strings. Code fences are tolerated.
inline std::optional<std::pair<std::string, std::string>> parse_qa_response(
    const std::string& text) {
    auto trim = [](std::string s) {
        std::size_t b = s.find_first_not_of(" \t\r\n");
        if (b == std::string::npos) return std::string();
        std::size_t e = s.find_last_not_of(" \t\r\n");
        return s.substr(b, e - b + 1);
    };
    std::string body = trim(text);
    if (body.rfind("```", 0) == 0) {
        auto nl = body.find('\n');
        if (nl == std::string::npos) throw ParseError("bare code fence");
        body = body.substr(nl + 1);
        auto fence = body.rfind("```");
        if (fence == std::string::npos) throw ParseError("unterminated code fence");
        body = trim(body.substr(0, fence));
    }
    if (body == "None") return std::nullopt;
    nlohmann::json j;
    try {
        j = nlohmann::json::parse(body);
    } catch (const nlohmann::json::exception& e) {
        throw ParseError("QA response is not strict JSON: " + std::string(e.what()));
    }
    if (!j.is_object() || j.size() != 2 || !j.contains("Human") || !j.contains("Bot"))
        throw ParseError("QA response must hold exactly the keys \"Human\" and \"Bot\"");
    if (!j["Human"].is_string() || !j["Bot"].is_string())
        throw ParseError("QA response values must be strings");
    auto q = j["Human"].get<std::string>();
    auto a = j["Bot"].get<std::string>();
    if (q.empty() || a.empty()) throw ParseError("QA response strings must be non-empty");
    return std::make_pair(q, a);
}

// ---------------------------------------------------------------------------
// Pipeline driver
// ---------------------------------------------------------------------------

struct PipelineSummary {
    std::size_t videos = 0;
    std::size_t written = 0;
    std::size_t filtered = 0;       // rejected by the scene filter
    std::size_t none = 0;           // QA model declined with the sentinel
    std::size_t parse_errors = 0;   // malformed QA or ambiguous filter responses
    std::size_t client_errors = 0;  // client failed after retries
};

struct PipelineConfig {
    std::size_t max_concurrency = 1;
    std::size_t frames_per_video = 24;
};

// Per video: select frames, caption, filter, generate, parse. Failures skip
// only the affected video. Records land in out_path as JSON Lines sorted by
// video_id, so output bytes are independent of completion order.
inline PipelineSummary run_pipeline(const std::vector<std::string>& manifest_paths,
                                    ModelClient& caption_client, ModelClient& llm_client,
                                    const std::string& out_path, const PipelineConfig& cfg) {
    struct Slot {
        std::optional<TQARecord> record;
    };
    std::vector<Slot> slots(manifest_paths.size());
    PipelineSummary summary;
    summary.videos = manifest_paths.size();
    std::mutex summary_mu;
    std::atomic<std::size_t> cursor{0};

    auto worker = [&]() {
        for (;;) {
            std::size_t i = cursor.fetch_add(1);
            if (i >= manifest_paths.size()) return;
            const std::string& path = manifest_paths[i];
            std::string video_id = std::filesystem::path(path).stem().string();
            try {
                auto entries = load_manifest(path);
                if (entries.empty()) throw EmptyManifest("empty manifest: " + path);
                std::size_t n = std::min(cfg.frames_per_video, entries.size());
                auto bundle = select_frames<std::string>(
                    entries, n, [](const std::string& p) { return load_cgimg(p); });
                auto captions = caption_frames(bundle, caption_client);
                if (!filter_scene(captions, llm_client)) {
                    std::lock_guard<std::mutex> lk(summary_mu);
                    ++summary.filtered;
                    continue;
                }
                auto qa = parse_qa_response(llm_client.complete(render_qa_prompt(captions)));
                if (!qa) {
                    std::lock_guard<std::mutex> lk(summary_mu);
                    ++summary.none;
                    continue;
                }
                TQARecord rec{video_id, qa->first, qa->second};
                rec.validate();
                slots[i].record = std::move(rec);
            } catch (const ClientFailure&) {
                std::lock_guard<std::mutex> lk(summary_mu);
                ++summary.client_errors;
            } catch (const ParseError&) {
                std::lock_guard<std::mutex> lk(summary_mu);
                ++summary.parse_errors;
            } catch (const AmbiguousFilterResponse&) {
                std::lock_guard<std::mutex> lk(summary_mu);
                ++summary.parse_errors;
            }
        }
    };

    std::size_t n_threads = std::max<std::size_t>(1, std::min(cfg.max_concurrency,
                                                              manifest_paths.size()));
    std::vector<std::thread> pool;
    for (std::size_t t = 0; t < n_threads; ++t) pool.emplace_back(worker);
    for (auto& th : pool) th.join();

    std::vector<TQARecord> records;
    for (auto& slot : slots)
        if (slot.record) records.push_back(std::move(*slot.record));
    std::sort(records.begin(), records.end(),
              [](const TQARecord& a, const TQARecord& b) { return a.video_id < b.video_id; });

    std::ofstream out(out_path, std::ios::binary);
    if (!out) throw IoError("cannot open output: " + out_path);
    for (const auto& rec : records) {
        nlohmann::ordered_json j;
        j["video"] = rec.video_id;
        j["question"] = rec.question;
        j["answer"] = rec.answer;
        out << j.dump() << "\n";
    }
    summary.written = records.size();
    return summary;
}

}  // namespace minivlm
