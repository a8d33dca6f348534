// Parameter checkpoint files: a text header listing (name, shape, byte offset)
// per tensor plus free-form metadata lines, followed by the raw little-endian
// 64-bit float payload. Round-trips are bit-exact.
#pragma once

#include <bit>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "common.hpp"
#include "tensor.hpp"

namespace worldfuse {

namespace detail {

inline void put_le64(std::string& out, uint64_t v) {
    for (int i = 0; i < 8; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

inline uint64_t get_le64(const unsigned char* p) {
    uint64_t v = 0;
    for (int i = 7; i >= 0; --i) v = (v << 8) | p[i];
    return v;
}

}  // namespace detail

struct Checkpoint {
    ParamStore params;
    std::map<std::string, std::string> meta;
};

// Canonical byte serialization: tensors sorted by name, metadata sorted by key.
inline std::string checkpoint_bytes(const ParamStore& params,
                                    const std::map<std::string, std::string>& meta = {}) {
    std::vector<std::string> names = params.names();
    std::sort(names.begin(), names.end());

    std::ostringstream header;
    header << "worldfuse-checkpoint 1\n";
    for (const auto& [k, v] : meta) {
        if (k.find(' ') != std::string::npos || k.find('\n') != std::string::npos ||
            v.find('\n') != std::string::npos)
            throw argument_error("checkpoint meta keys must be single tokens, values single lines");
        header << "meta " << k << " " << v << "\n";
    }
    uint64_t offset = 0;
    for (const auto& n : names) {
        if (n.find(' ') != std::string::npos)
            throw argument_error("tensor names must not contain spaces: " + n);
        const Tensor& t = params.get(n);
        header << "tensor " << n << " " << t.shape().size();
        for (int d : t.shape()) header << " " << d;
        header << " " << offset << "\n";
        offset += t.size() * 8;
    }
    header << "data " << offset << "\n";

    std::string out = header.str();
    out.reserve(out.size() + offset);
    for (const auto& n : names) {
        const Tensor& t = params.get(n);
        for (double v : t.data()) detail::put_le64(out, std::bit_cast<uint64_t>(v));
    }
    return out;
}

inline Checkpoint checkpoint_from_bytes(const std::string& bytes) {
    std::istringstream in(bytes);
    std::string line;
    if (!std::getline(in, line) || line != "worldfuse-checkpoint 1")
        throw io_error("checkpoint: bad magic line");

    Checkpoint ck;
    struct Entry {
        std::string name;
        Shape shape;
        uint64_t offset;
    };
    std::vector<Entry> entries;
    uint64_t data_len = 0;
    while (std::getline(in, line)) {
        std::istringstream ls(line);
        std::string kind;
        ls >> kind;
        if (kind == "meta") {
            std::string key;
            ls >> key;
            std::string value;
            std::getline(ls, value);
            if (!value.empty() && value[0] == ' ') value.erase(0, 1);
            ck.meta[key] = value;
        } else if (kind == "tensor") {
            Entry e;
            size_t rank = 0;
            ls >> e.name >> rank;
            for (size_t i = 0; i < rank; ++i) {
                int d = 0;
                ls >> d;
                e.shape.push_back(d);
            }
            ls >> e.offset;
            if (!ls) throw io_error("checkpoint: malformed tensor line: " + line);
            entries.push_back(std::move(e));
        } else if (kind == "data") {
            ls >> data_len;
            break;
        } else {
            throw io_error("checkpoint: unknown header line: " + line);
        }
    }
    size_t payload_start = static_cast<size_t>(in.tellg());
    if (bytes.size() - payload_start != data_len)
        throw io_error("checkpoint: payload length mismatch");

    const unsigned char* payload =
        reinterpret_cast<const unsigned char*>(bytes.data()) + payload_start;
    for (const auto& e : entries) {
        size_t n = shape_numel(e.shape);
        std::vector<double> vals(n);
        for (size_t i = 0; i < n; ++i)
            vals[i] = std::bit_cast<double>(detail::get_le64(payload + e.offset + 8 * i));
        ck.params.add(e.name, Tensor::parameter(e.shape, std::move(vals)));
    }
    return ck;
}

inline void save_checkpoint(const std::string& path, const ParamStore& params,
                            const std::map<std::string, std::string>& meta = {}) {
    std::string bytes = checkpoint_bytes(params, meta);
    std::ofstream f(path, std::ios::binary);
    if (!f) throw io_error("cannot open for write: " + path);
    f.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!f) throw io_error("write failed: " + path);
}

inline Checkpoint load_checkpoint(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw io_error("cannot open for read: " + path);
    std::ostringstream ss;
    ss << f.rdbuf();
    return checkpoint_from_bytes(ss.str());
}

// Stable digest of a parameter set plus metadata (used by freezing audits and
// reproducibility manifests).
inline std::string checkpoint_hash(const ParamStore& params,
                                   const std::map<std::string, std::string>& meta = {}) {
    std::string bytes = checkpoint_bytes(params, meta);
    return hex64(fnv1a64(bytes.data(), bytes.size()));
}

}  // namespace worldfuse
