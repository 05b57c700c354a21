// SPDX-License-Identifier: Apache-2.0
//
// Minimal QA evaluation: multiple-choice letter extraction and exact match
// over prediction/gold JSONL files.

#pragma once

#include <algorithm>
#include <cctype>
#include <fstream>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "minivlm/errors.hpp"

namespace minivlm {

enum class EvalKind { Choice, Exact };

struct EvalRecord {
    std::string id;
    std::string prediction;
    std::string gold;
    EvalKind kind = EvalKind::Exact;

    void validate() const {
        if (gold.empty()) throw ShapeMismatch("eval record: gold must be non-empty");
    }
};

struct EvalMetrics {
    double accuracy = 0.0;
    std::size_t n = 0;
};

// First standalone letter A-E: uppercase, with no alphanumeric neighbor.
inline std::optional<char> extract_choice(const std::string& text) {
    for (std::size_t i = 0; i < text.size(); ++i) {
        char c = text[i];
        if (c < 'A' || c > 'E') continue;
        bool left_ok = i == 0 || !std::isalnum(static_cast<unsigned char>(text[i - 1]));
        bool right_ok =
            i + 1 == text.size() || !std::isalnum(static_cast<unsigned char>(text[i + 1]));
        if (left_ok && right_ok) return c;
    }
    return std::nullopt;
}

inline std::string fold_exact(const std::string& s) {
    std::size_t b = s.find_first_not_of(" \t\r\n");
    if (b == std::string::npos) return "";
    std::size_t e = s.find_last_not_of(" \t\r\n");
    std::string out = s.substr(b, e - b + 1);
    std::transform(out.begin(), out.end(), out.begin(),
                   [](unsigned char c) { return static_cast<char>(std::tolower(c)); });
    return out;
}

inline EvalMetrics evaluate(const std::vector<EvalRecord>& records) {
    if (records.empty()) throw EmptyEvalSet();
    std::size_t correct = 0;
    for (const auto& rec : records) {
        rec.validate();
        if (rec.kind == EvalKind::Choice) {
            auto p = extract_choice(rec.prediction);
            auto g = extract_choice(rec.gold);
            if (p && g && *p == *g) ++correct;
        } else {
            if (fold_exact(rec.prediction) == fold_exact(rec.gold)) ++correct;
        }
    }
    return {static_cast<double>(correct) / static_cast<double>(records.size()), records.size()};
}

// JSONL of {"id": ..., "text": ...} keyed by id.
inline std::map<std::string, std::string> load_eval_file(const std::string& path) {
    std::ifstream f(path);
    if (!f) throw IoError("cannot open eval file: " + path);
    std::map<std::string, std::string> out;
    std::string line;
    while (std::getline(f, line)) {
        if (line.empty()) continue;
        try {
            auto j = nlohmann::json::parse(line);
            out[j.at("id").get<std::string>()] = j.at("text").get<std::string>();
        } catch (const nlohmann::json::exception& e) {
            throw IoError("bad eval line: " + std::string(e.what()));
        }
    }
    return out;
}

// Joins predictions onto gold ids; a missing prediction scores as wrong.
inline std::vector<EvalRecord> join_eval_files(const std::string& pred_path,
                                               const std::string& gold_path, EvalKind kind) {
    auto preds = load_eval_file(pred_path);
    auto golds = load_eval_file(gold_path);
    std::vector<EvalRecord> records;
    for (const auto& [id, gold] : golds) {
        auto it = preds.find(id);
        records.push_back({id, it == preds.end() ? "" : it->second, gold, kind});
    }
    return records;
}

}  // namespace minivlm
