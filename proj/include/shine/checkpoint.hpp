#pragma once

// Checkpoint directory format: a text manifest listing tensor name / dtype /
// shape / byte range / FNV-1a hash, plus a single blob file with the raw
// little-endian payloads. Save -> load is bit-exact; loads verify hashes and
// refuse corrupted entries.

#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "shine/tensor.hpp"

namespace shine::ckpt {

inline std::uint64_t fnv1a64(const void* data, std::size_t n) {
    const auto* p = static_cast<const unsigned char*>(data);
    std::uint64_t h = 0xCBF29CE484222325ull;
    for (std::size_t i = 0; i < n; ++i) {
        h ^= p[i];
        h *= 0x100000001B3ull;
    }
    return h;
}

struct Store {
    std::map<std::string, Tensor> tensors;            // f64 payloads
    std::map<std::string, std::vector<std::uint64_t>> scalars;  // u64 payloads

    bool has(const std::string& name) const { return tensors.count(name) || scalars.count(name); }

    const Tensor& tensor(const std::string& name) const {
        auto it = tensors.find(name);
        if (it == tensors.end()) throw std::runtime_error("checkpoint: missing tensor " + name);
        return it->second;
    }

    std::uint64_t scalar(const std::string& name) const {
        auto it = scalars.find(name);
        if (it == scalars.end() || it->second.empty()) throw std::runtime_error("checkpoint: missing scalar " + name);
        return it->second[0];
    }
};

inline void save(const std::string& dir, const Store& store) {
    namespace fs = std::filesystem;
    fs::create_directories(dir);
    std::ofstream blob(fs::path(dir) / "tensors.bin", std::ios::binary | std::ios::trunc);
    std::ofstream man(fs::path(dir) / "manifest.txt", std::ios::trunc);
    if (!blob || !man) throw std::runtime_error("checkpoint: cannot write " + dir);
    man << "shine-checkpoint v1\n";
    std::uint64_t offset = 0;
    auto emit = [&](const std::string& name, const char* dtype, const std::vector<std::int64_t>& dims,
                    const void* data, std::uint64_t nbytes) {
        man << "tensor " << name << " " << dtype << " " << dims.size();
        for (auto d : dims) man << " " << d;
        man << " " << offset << " " << nbytes << " " << std::hex << fnv1a64(data, nbytes) << std::dec << "\n";
        blob.write(static_cast<const char*>(data), static_cast<std::streamsize>(nbytes));
        offset += nbytes;
    };
    for (const auto& [name, t] : store.tensors)
        emit(name, "f64", t.dims, t.v.data(), t.v.size() * sizeof(double));
    for (const auto& [name, s] : store.scalars)
        emit(name, "u64", {static_cast<std::int64_t>(s.size())}, s.data(), s.size() * sizeof(std::uint64_t));
    if (!blob.good() || !man.good()) throw std::runtime_error("checkpoint: write failed for " + dir);
}

inline Store load(const std::string& dir) {
    namespace fs = std::filesystem;
    std::ifstream man(fs::path(dir) / "manifest.txt");
    if (!man) throw std::runtime_error("checkpoint: missing manifest in " + dir);
    std::ifstream blob(fs::path(dir) / "tensors.bin", std::ios::binary);
    if (!blob) throw std::runtime_error("checkpoint: missing tensors.bin in " + dir);

    std::string header;
    std::getline(man, header);
    if (header != "shine-checkpoint v1") throw std::runtime_error("checkpoint: unknown format in " + dir);

    Store store;
    std::string line;
    while (std::getline(man, line)) {
        if (line.empty()) continue;
        std::istringstream ss(line);
        std::string kind, name, dtype;
        std::size_t ndim = 0;
        ss >> kind >> name >> dtype >> ndim;
        if (kind != "tensor" || ss.fail()) throw std::runtime_error("checkpoint: malformed manifest line: " + line);
        std::vector<std::int64_t> dims(ndim);
        for (auto& d : dims) ss >> d;
        std::uint64_t offset = 0, nbytes = 0, hash = 0;
        ss >> offset >> nbytes >> std::hex >> hash >> std::dec;
        if (ss.fail()) throw std::runtime_error("checkpoint: malformed manifest line: " + line);

        std::vector<char> raw(nbytes);
        blob.seekg(static_cast<std::streamoff>(offset));
        blob.read(raw.data(), static_cast<std::streamsize>(nbytes));
        if (!blob.good()) throw std::runtime_error("checkpoint: short read for tensor " + name);
        const std::uint64_t got = fnv1a64(raw.data(), raw.size());
        if (got != hash) {
            std::ostringstream err;
            err << "checkpoint: hash mismatch for tensor " << name << " (manifest " << std::hex << hash
                << ", blob " << got << ")";
            throw std::runtime_error(err.str());
        }
        if (dtype == "f64") {
            Tensor t(dims);
            if (t.v.size() * sizeof(double) != nbytes) throw std::runtime_error("checkpoint: size mismatch for " + name);
            std::memcpy(t.v.data(), raw.data(), nbytes);
            store.tensors.emplace(name, std::move(t));
        } else if (dtype == "u64") {
            std::vector<std::uint64_t> s(nbytes / sizeof(std::uint64_t));
            std::memcpy(s.data(), raw.data(), nbytes);
            store.scalars.emplace(name, std::move(s));
        } else {
            throw std::runtime_error("checkpoint: unknown dtype " + dtype + " for " + name);
        }
    }
    return store;
}

}  // namespace shine::ckpt
