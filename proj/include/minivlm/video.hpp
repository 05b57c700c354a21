// SPDX-License-Identifier: Apache-2.0
//
// Video input path: uniform frame selection, per-frame timestamp text
// injection, per-frame encoding, and the extra 2x2 compression convolution
// applied to the encoder output before the adapter. The resulting fragment
// interleaves [timestamp text block, vision block] once per frame, in
// timestamp order.

#pragma once

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <sstream>
#include <string>
#include <vector>

#include "minivlm/adapter.hpp"
#include "minivlm/decoder.hpp"
#include "minivlm/image.hpp"
#include "minivlm/tokenizer.hpp"
#include "minivlm/vit.hpp"

namespace minivlm {

// Canonical timestamp text: integer seconds render bare, anything else with
// one decimal place.
inline constexpr const char* kTimestampTemplate = "Time {s}s:";

struct FrameBundle {
    std::vector<ImageGrid> frames;
    std::vector<double> timestamps;  // seconds, non-decreasing

    void validate() const {
        if (frames.size() != timestamps.size())
            throw ShapeMismatch("frame bundle: frame/timestamp count mismatch");
        for (std::size_t i = 0; i < timestamps.size(); ++i) {
            if (timestamps[i] < 0) throw NegativeTimestamp();
            if (i > 0 && timestamps[i] < timestamps[i - 1])
                throw ShapeMismatch("frame bundle: timestamps out of order");
        }
    }
};

struct VideoConfig {
    std::size_t n_frames = 24;
    std::string timestamp_template = kTimestampTemplate;

    void validate() const {
        if (n_frames < 1) throw ShapeMismatch("video config: n_frames must be >= 1");
    }
};

inline std::string render_timestamp(double seconds,
                                    const std::string& tmpl = kTimestampTemplate) {
    if (seconds < 0) throw NegativeTimestamp();
    char buf[64];
    double rounded = std::floor(seconds);
    if (seconds == rounded) {
        std::snprintf(buf, sizeof(buf), "%.0f", seconds);
    } else {
        std::snprintf(buf, sizeof(buf), "%.1f", seconds);
    }
    std::string out = tmpl;
    auto pos = out.find("{s}");
    if (pos == std::string::npos) throw Error("timestamp template lacks {s}");
    return out.replace(pos, 3, buf);
}

// idx_i = floor((i + 0.5) * N / n): centers of n equal bins over N source
// frames. Duplicates appear when N < n.
inline std::vector<std::size_t> select_indices(std::size_t source_len, std::size_t n) {
    if (source_len == 0) throw EmptyManifest();
    std::vector<std::size_t> idx(n);
    for (std::size_t i = 0; i < n; ++i)
        idx[i] = static_cast<std::size_t>((2 * i + 1) * source_len / (2 * n));
    return idx;
}

template <class Entry>
FrameBundle select_frames(const std::vector<std::pair<double, Entry>>& manifest, std::size_t n,
                          const std::function<ImageGrid(const Entry&)>& load) {
    auto idx = select_indices(manifest.size(), n);
    FrameBundle bundle;
    for (std::size_t i : idx) {
        bundle.timestamps.push_back(manifest[i].first);
        bundle.frames.push_back(load(manifest[i].second));
    }
    bundle.validate();
    return bundle;
}

inline FrameBundle select_frames(const std::vector<std::pair<double, ImageGrid>>& manifest,
                                 std::size_t n) {
    return select_frames<ImageGrid>(manifest, n, [](const ImageGrid& g) { return g; });
}

// Manifest file: one line per frame, "{seconds} {path}", seconds strictly
// ascending. Relative paths resolve against the manifest's directory.
inline std::vector<std::pair<double, std::string>> load_manifest(const std::string& path) {
    std::ifstream f(path);
    if (!f) throw IoError("cannot open manifest: " + path);
    auto dir = std::filesystem::path(path).parent_path();
    std::vector<std::pair<double, std::string>> entries;
    std::string line;
    while (std::getline(f, line)) {
        if (line.empty()) continue;
        std::istringstream ls(line);
        double seconds = 0;
        std::string frame_path;
        if (!(ls >> seconds >> frame_path)) throw IoError("bad manifest line: " + line);
        if (seconds < 0) throw NegativeTimestamp();
        if (!entries.empty() && seconds <= entries.back().first)
            throw IoError("manifest timestamps must be strictly ascending");
        std::filesystem::path p(frame_path);
        if (p.is_relative()) p = dir / p;
        entries.emplace_back(seconds, p.string());
    }
    return entries;
}

// A positionless run of sequence content; positions are assigned when the
// fragment is assembled into a full MixedSequence.
template <class Real>
struct MixedFragment {
    std::vector<Tensor<Real>> emb_parts;
    std::vector<Modality> mask;
    std::vector<int> ids;

    std::size_t length() const { return mask.size(); }
};

// Per frame: tokenize the rendered timestamp as text, encode the frame
// (ViT -> extra 2x2 conv -> adapter), append [text block, vision block].
template <class Real>
MixedFragment<Real> encode_video(const FrameBundle& bundle, const VitConfig& vit_cfg,
                                 const AdapterConfig& adapter_cfg, const VideoConfig& video_cfg,
                                 const ParamStore<Real>& p, const Tensor<Real>& embed_table) {
    bundle.validate();
    video_cfg.validate();
    if (vit_cfg.grid_h % 2 != 0 || vit_cfg.grid_w % 2 != 0)
        throw OddGrid("encode_video: encoder grid must be even for the extra conv");
    AdapterConfig acfg = adapter_cfg;
    acfg.grid_h = vit_cfg.grid_h / 2;
    acfg.grid_w = vit_cfg.grid_w / 2;
    acfg.validate();  // grid still even after the extra conv, else OddGrid
    MixedFragment<Real> frag;
    for (std::size_t f = 0; f < bundle.frames.size(); ++f) {
        auto text_ids = ByteTokenizer::encode(
            render_timestamp(bundle.timestamps[f], video_cfg.timestamp_template));
        frag.emb_parts.push_back(embed_rows(embed_table, text_ids));
        for (int id : text_ids) {
            frag.mask.push_back(Modality::Text);
            frag.ids.push_back(id);
        }
        auto patches = patchify<Real>(bundle.frames[f], vit_cfg.patch_size);
        auto feats = vit_forward(patches, vit_cfg, p);
        auto compressed = seq_conv2x2_s2(feats, vit_cfg.grid_h, vit_cfg.grid_w,
                                         p.get("video.conv.w"), p.get("video.conv.b"));
        auto vision = adapt(compressed, acfg, p);
        std::size_t n_vis = vision.shape[0];
        frag.emb_parts.push_back(std::move(vision));
        for (std::size_t i = 0; i < n_vis; ++i) {
            frag.mask.push_back(Modality::Vision);
            frag.ids.push_back(MixedSequence<Real>::kNoToken);
        }
    }
    return frag;
}

// Order: prompt text, then the fragment, then answer text; positions
// sequential over the whole mixed sequence.
template <class Real>
MixedSequence<Real> assemble_with_fragment(const std::vector<int>& prompt_tokens,
                                           const MixedFragment<Real>& frag,
                                           const std::vector<int>& answer_tokens,
                                           const Tensor<Real>& embed_table) {
    std::size_t d = embed_table.shape.at(1);
    for (const auto& part : frag.emb_parts)
        if (part.rank() != 2 || part.shape[1] != d)
            throw DimMismatch("assemble_with_fragment: fragment width != embedding width");
    MixedSequence<Real> seq;
    std::vector<Tensor<Real>> parts;
    if (!prompt_tokens.empty()) parts.push_back(embed_rows(embed_table, prompt_tokens));
    for (const auto& part : frag.emb_parts) parts.push_back(part);
    if (!answer_tokens.empty()) parts.push_back(embed_rows(embed_table, answer_tokens));
    if (parts.empty()) throw ShapeMismatch("assemble_with_fragment: empty sequence");
    seq.emb = parts.size() == 1 ? parts[0] : concat_rows(parts);
    for (int id : prompt_tokens) {
        seq.mask.push_back(Modality::Text);
        seq.ids.push_back(id);
    }
    seq.mask.insert(seq.mask.end(), frag.mask.begin(), frag.mask.end());
    seq.ids.insert(seq.ids.end(), frag.ids.begin(), frag.ids.end());
    for (int id : answer_tokens) {
        seq.mask.push_back(Modality::Text);
        seq.ids.push_back(id);
    }
    for (std::size_t i = 0; i < seq.mask.size(); ++i) seq.positions.push_back(static_cast<int>(i));
    seq.validate();
    return seq;
}

}  // namespace minivlm
