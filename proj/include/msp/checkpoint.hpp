#pragma once

// Binary tensor container. Layout:
//   magic "MSPC" | version u32 | entry count u32
//   per entry: name length u16 | name bytes | dtype u8 (0 = f32) |
//              rank u8 | dims u32[rank] | payload (little-endian f32)
// A JSON document with the run configuration is written alongside the
// container (same path + ".json").

#include <cstdint>
#include <cstring>
#include <fstream>
#include <map>
#include <string>
#include <utility>
#include <vector>

#include "msp/tensor.hpp"

namespace msp {

class IoError : public std::runtime_error {
public:
    explicit IoError(const std::string& what) : std::runtime_error(what) {}
};

constexpr uint32_t kCheckpointVersion = 1;

namespace detail {

template <typename T>
void write_pod(std::ostream& out, T v) {
    out.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <typename T>
T read_pod(std::istream& in, const std::string& path) {
    T v{};
    in.read(reinterpret_cast<char*>(&v), sizeof(T));
    if (!in) throw IoError("truncated checkpoint: " + path);
    return v;
}

}  // namespace detail

// Name -> tensor map with insertion order preserved for byte-stable output.
class Checkpoint {
public:
    void put(const std::string& name, const Tensor& t) {
        if (index_.count(name)) throw IoError("duplicate checkpoint entry: " + name);
        index_[name] = entries_.size();
        entries_.emplace_back(name, t);
    }

    bool has(const std::string& name) const { return index_.count(name) > 0; }

    const Tensor& get(const std::string& name) const {
        auto it = index_.find(name);
        if (it == index_.end()) throw IoError("missing checkpoint entry: " + name);
        return entries_[it->second].second;
    }

    const std::vector<std::pair<std::string, Tensor>>& entries() const { return entries_; }

    void save(const std::string& path) const {
        std::ofstream out(path, std::ios::binary);
        if (!out) throw IoError("cannot open for writing: " + path);
        out.write("MSPC", 4);
        detail::write_pod<uint32_t>(out, kCheckpointVersion);
        detail::write_pod<uint32_t>(out, static_cast<uint32_t>(entries_.size()));
        for (const auto& [name, t] : entries_) {
            detail::write_pod<uint16_t>(out, static_cast<uint16_t>(name.size()));
            out.write(name.data(), static_cast<std::streamsize>(name.size()));
            detail::write_pod<uint8_t>(out, 0);  // dtype f32
            const auto& shape = t.shape();
            detail::write_pod<uint8_t>(out, static_cast<uint8_t>(shape.size()));
            for (int d : shape) detail::write_pod<uint32_t>(out, static_cast<uint32_t>(d));
            out.write(reinterpret_cast<const char*>(t.data().data()),
                      static_cast<std::streamsize>(t.data().size() * sizeof(float)));
        }
        if (!out) throw IoError("write failed: " + path);
    }

    static Checkpoint load(const std::string& path) {
        std::ifstream in(path, std::ios::binary);
        if (!in) throw IoError("cannot open checkpoint: " + path);
        char magic[4];
        in.read(magic, 4);
        if (!in || std::memcmp(magic, "MSPC", 4) != 0)
            throw IoError("bad checkpoint magic: " + path);
        const auto version = detail::read_pod<uint32_t>(in, path);
        if (version != kCheckpointVersion)
            throw IoError("unsupported checkpoint version " + std::to_string(version) + ": " +
                          path);
        const auto count = detail::read_pod<uint32_t>(in, path);
        Checkpoint ck;
        for (uint32_t e = 0; e < count; ++e) {
            const auto name_len = detail::read_pod<uint16_t>(in, path);
            std::string name(name_len, '\0');
            in.read(name.data(), name_len);
            if (!in) throw IoError("truncated checkpoint: " + path);
            const auto dtype = detail::read_pod<uint8_t>(in, path);
            if (dtype != 0) throw IoError("unknown dtype tag in " + path);
            const auto rank = detail::read_pod<uint8_t>(in, path);
            std::vector<int> shape(rank);
            size_t n = 1;
            for (auto& d : shape) {
                d = static_cast<int>(detail::read_pod<uint32_t>(in, path));
                n *= static_cast<size_t>(d);
            }
            std::vector<float> data(n);
            in.read(reinterpret_cast<char*>(data.data()),
                    static_cast<std::streamsize>(n * sizeof(float)));
            if (!in) throw IoError("truncated checkpoint: " + path);
            ck.put(name, Tensor::from_data(std::move(shape), std::move(data)));
        }
        return ck;
    }

private:
    std::vector<std::pair<std::string, Tensor>> entries_;
    std::map<std::string, size_t> index_;
};

// FNV-1a, used to fingerprint the config JSON stored next to checkpoints.
inline uint64_t fnv1a64(const std::string& s) {
    uint64_t h = 1469598103934665603ull;
    for (unsigned char c : s) {
        h ^= c;
        h *= 1099511628211ull;
    }
    return h;
}

inline void write_text_file(const std::string& path, const std::string& text) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw IoError("cannot open for writing: " + path);
    out << text;
    if (!out) throw IoError("write failed: " + path);
}

inline std::string read_text_file(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open: " + path);
    std::string s((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    return s;
}

}  // namespace msp
