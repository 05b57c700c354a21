// SPDX-License-Identifier: Apache-2.0
//
// Named-tensor store and the CGV2 checkpoint container.
//
// File layout, all integers little-endian:
//   "CGV2" | version u32 | tensor count u32
//   per tensor: name length u32 | UTF-8 name | rank u32 | extents u64 each |
//               raw IEEE-754 binary32 values
// Values are stored as binary32 regardless of the in-memory scalar type, and
// the tensor order is the store order, so save -> load -> save round-trips
// bit-exactly.

#pragma once

#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include "minivlm/errors.hpp"
#include "minivlm/tensor.hpp"

namespace minivlm {

inline constexpr char kCheckpointMagic[4] = {'C', 'G', 'V', '2'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

// Insertion-ordered map from tensor name to tensor. Order is the checkpoint
// order.
template <class Real>
class ParamStore {
public:
    void add(const std::string& name, Tensor<Real> t) {
        if (index_.count(name)) throw Error("duplicate parameter name: " + name);
        index_[name] = items_.size();
        items_.emplace_back(name, std::move(t));
    }

    bool contains(const std::string& name) const { return index_.count(name) != 0; }

    const Tensor<Real>& get(const std::string& name) const {
        auto it = index_.find(name);
        if (it == index_.end()) throw Error("missing parameter: " + name);
        return items_[it->second].second;
    }

    Tensor<Real>& get(const std::string& name) {
        auto it = index_.find(name);
        if (it == index_.end()) throw Error("missing parameter: " + name);
        return items_[it->second].second;
    }

    std::size_t size() const { return items_.size(); }
    auto begin() const { return items_.begin(); }
    auto end() const { return items_.end(); }
    auto begin() { return items_.begin(); }
    auto end() { return items_.end(); }

    template <class Other>
    static ParamStore from(const ParamStore<Other>& o) {
        ParamStore out;
        for (const auto& [name, t] : o) out.add(name, Tensor<Real>::template from<Other>(t));
        return out;
    }

private:
    std::vector<std::pair<std::string, Tensor<Real>>> items_;
    std::unordered_map<std::string, std::size_t> index_;
};

namespace detail {

inline void put_u32(std::string& out, std::uint32_t v) {
    for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

inline void put_u64(std::string& out, std::uint64_t v) {
    for (int i = 0; i < 8; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

inline void put_f32(std::string& out, float v) {
    put_u32(out, std::bit_cast<std::uint32_t>(v));
}

struct ByteReader {
    const std::string& bytes;
    std::size_t pos = 0;

    void need(std::size_t n) const {
        if (pos + n > bytes.size()) throw IoError("checkpoint truncated");
    }
    std::uint32_t u32() {
        need(4);
        std::uint32_t v = 0;
        for (int i = 0; i < 4; ++i) v |= std::uint32_t(static_cast<unsigned char>(bytes[pos++])) << (8 * i);
        return v;
    }
    std::uint64_t u64() {
        need(8);
        std::uint64_t v = 0;
        for (int i = 0; i < 8; ++i) v |= std::uint64_t(static_cast<unsigned char>(bytes[pos++])) << (8 * i);
        return v;
    }
    float f32() { return std::bit_cast<float>(u32()); }
    std::string str(std::size_t n) {
        need(n);
        std::string s = bytes.substr(pos, n);
        pos += n;
        return s;
    }
};

}  // namespace detail

template <class Real>
std::string checkpoint_bytes(const ParamStore<Real>& store) {
    std::string out(kCheckpointMagic, 4);
    detail::put_u32(out, kCheckpointVersion);
    detail::put_u32(out, static_cast<std::uint32_t>(store.size()));
    for (const auto& [name, t] : store) {
        detail::put_u32(out, static_cast<std::uint32_t>(name.size()));
        out += name;
        detail::put_u32(out, static_cast<std::uint32_t>(t.rank()));
        for (std::size_t e : t.shape) detail::put_u64(out, e);
        for (Real v : t.data) detail::put_f32(out, static_cast<float>(v));
    }
    return out;
}

template <class Real>
ParamStore<Real> checkpoint_from_bytes(const std::string& bytes) {
    detail::ByteReader r{bytes};
    if (r.str(4) != std::string(kCheckpointMagic, 4)) throw IoError("bad checkpoint magic");
    std::uint32_t version = r.u32();
    if (version != kCheckpointVersion) throw IoError("unsupported checkpoint version");
    std::uint32_t count = r.u32();
    ParamStore<Real> store;
    for (std::uint32_t i = 0; i < count; ++i) {
        std::string name = r.str(r.u32());
        std::uint32_t rank = r.u32();
        Shape shape(rank);
        std::size_t numel = 1;
        for (std::uint32_t a = 0; a < rank; ++a) {
            shape[a] = static_cast<std::size_t>(r.u64());
            numel *= shape[a];
        }
        std::vector<Real> data(numel);
        for (std::size_t j = 0; j < numel; ++j) data[j] = static_cast<Real>(r.f32());
        store.add(name, Tensor<Real>(std::move(shape), std::move(data)));
    }
    return store;
}

template <class Real>
void save_checkpoint(const ParamStore<Real>& store, const std::string& path) {
    std::ofstream f(path, std::ios::binary);
    if (!f) throw IoError("cannot open for write: " + path);
    std::string bytes = checkpoint_bytes(store);
    f.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!f) throw IoError("write failed: " + path);
}

template <class Real>
ParamStore<Real> load_checkpoint(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw IoError("cannot open for read: " + path);
    std::string bytes((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
    return checkpoint_from_bytes<Real>(bytes);
}

}  // namespace minivlm
