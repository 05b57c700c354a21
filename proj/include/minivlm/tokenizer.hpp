// SPDX-License-Identifier: Apache-2.0
//
// Byte-level tokenizer: ids 0..255 are raw bytes, specials follow.

#pragma once

#include <string>
#include <vector>

namespace minivlm {

class ByteTokenizer {
public:
    static constexpr int kBos = 256;
    static constexpr int kEos = 257;
    static constexpr int kPad = 258;

    static constexpr int vocab_size() { return 259; }

    static std::vector<int> encode(const std::string& text) {
        std::vector<int> ids;
        ids.reserve(text.size());
        for (unsigned char c : text) ids.push_back(static_cast<int>(c));
        return ids;
    }

    static std::string decode(const std::vector<int>& ids) {
        std::string out;
        for (int id : ids)
            if (id >= 0 && id < 256) out.push_back(static_cast<char>(id));
        return out;
    }
};

}  // namespace minivlm
