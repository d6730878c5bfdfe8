#pragma once

// TARC tensor archive: the on-disk format shared by model checkpoints,
// adapters and alignment vectors.
//
//   "TARC" | u32 version=1 | u32 tensor_count
//   per tensor: u16 name_len | name | u8 rank | rank x u64 dims | f32 data
//   u32 json_len | json config block
//
// All integers and floats little-endian. Values are stored as 32-bit floats
// regardless of the in-memory Real type.

#include <cstdint>
#include <cstring>
#include <fstream>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "ftlab/errors.hpp"
#include "ftlab/tensor.hpp"

namespace ftlab {

namespace detail {

inline void ensure_little_endian_host() {
    const std::uint32_t probe = 0x01020304u;
    unsigned char bytes[4];
    std::memcpy(bytes, &probe, 4);
    if (bytes[0] != 0x04) throw Error("TARC writer requires a little-endian host");
}

template <typename T>
void write_le(std::ofstream& out, T value) {
    out.write(reinterpret_cast<const char*>(&value), sizeof(T));
}

template <typename T>
T read_le(std::ifstream& in, std::uint64_t& offset, const char* what) {
    T value{};
    in.read(reinterpret_cast<char*>(&value), sizeof(T));
    if (in.gcount() != static_cast<std::streamsize>(sizeof(T))) {
        throw FormatError(std::string("TARC: truncated while reading ") + what + " at byte offset " +
                          std::to_string(offset));
    }
    offset += sizeof(T);
    return value;
}

}  // namespace detail

template <typename Real>
struct TarcEntry {
    std::string name;
    Tensor<Real> tensor;
};

template <typename Real>
struct TarcArchive {
    std::vector<TarcEntry<Real>> tensors;
    nlohmann::json config;

    const Tensor<Real>* find(const std::string& name) const {
        for (const auto& e : tensors) {
            if (e.name == name) return &e.tensor;
        }
        return nullptr;
    }
};

template <typename Real>
void save_tarc(const TarcArchive<Real>& archive, const std::string& path) {
    detail::ensure_little_endian_host();
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw Error("cannot open '" + path + "' for writing");

    out.write("TARC", 4);
    detail::write_le<std::uint32_t>(out, 1u);
    detail::write_le<std::uint32_t>(out, static_cast<std::uint32_t>(archive.tensors.size()));

    for (const auto& entry : archive.tensors) {
        if (entry.name.size() > 0xffff) throw Error("TARC: tensor name too long: " + entry.name);
        detail::write_le<std::uint16_t>(out, static_cast<std::uint16_t>(entry.name.size()));
        out.write(entry.name.data(), static_cast<std::streamsize>(entry.name.size()));
        const auto& shape = entry.tensor.shape();
        detail::write_le<std::uint8_t>(out, static_cast<std::uint8_t>(shape.size()));
        for (std::size_t d : shape) detail::write_le<std::uint64_t>(out, static_cast<std::uint64_t>(d));
        for (std::size_t i = 0; i < entry.tensor.numel(); ++i) {
            detail::write_le<float>(out, static_cast<float>(entry.tensor.data()[i]));
        }
    }

    const std::string json = archive.config.dump();
    detail::write_le<std::uint32_t>(out, static_cast<std::uint32_t>(json.size()));
    out.write(json.data(), static_cast<std::streamsize>(json.size()));
    if (!out) throw Error("write failure on '" + path + "'");
}

template <typename Real>
TarcArchive<Real> load_tarc(const std::string& path) {
    detail::ensure_little_endian_host();
    std::ifstream in(path, std::ios::binary);
    if (!in) throw Error("cannot open '" + path + "' for reading");
    std::uint64_t offset = 0;

    char magic[4];
    in.read(magic, 4);
    if (in.gcount() != 4 || std::memcmp(magic, "TARC", 4) != 0) {
        throw FormatError("TARC: bad magic bytes at byte offset 0");
    }
    offset += 4;

    const auto version = detail::read_le<std::uint32_t>(in, offset, "version");
    if (version != 1) {
        throw FormatError("TARC: unsupported version " + std::to_string(version) +
                          " at byte offset 4");
    }
    const auto count = detail::read_le<std::uint32_t>(in, offset, "tensor count");

    TarcArchive<Real> archive;
    archive.tensors.reserve(count);
    for (std::uint32_t i = 0; i < count; ++i) {
        const auto name_len = detail::read_le<std::uint16_t>(in, offset, "name length");
        std::string name(name_len, '\0');
        in.read(name.data(), name_len);
        if (in.gcount() != static_cast<std::streamsize>(name_len)) {
            throw FormatError("TARC: truncated tensor name at byte offset " + std::to_string(offset));
        }
        offset += name_len;
        const auto rank = detail::read_le<std::uint8_t>(in, offset, "rank");
        std::vector<std::size_t> shape(rank);
        std::size_t numel = 1;
        for (std::uint8_t r = 0; r < rank; ++r) {
            const auto dim = detail::read_le<std::uint64_t>(in, offset, "dimension");
            if (dim == 0) {
                throw FormatError("TARC: zero dimension in tensor '" + name + "' at byte offset " +
                                  std::to_string(offset));
            }
            shape[r] = static_cast<std::size_t>(dim);
            numel *= shape[r];
        }
        std::vector<Real> values(rank == 0 ? 0 : numel);
        for (std::size_t j = 0; j < values.size(); ++j) {
            values[j] = static_cast<Real>(detail::read_le<float>(in, offset, "tensor data"));
        }
        archive.tensors.push_back({std::move(name), Tensor<Real>::from(std::move(shape), std::move(values))});
    }

    const auto json_len = detail::read_le<std::uint32_t>(in, offset, "config length");
    std::string json(json_len, '\0');
    in.read(json.data(), json_len);
    if (in.gcount() != static_cast<std::streamsize>(json_len)) {
        throw FormatError("TARC: truncated config block at byte offset " + std::to_string(offset));
    }
    try {
        archive.config = nlohmann::json::parse(json);
    } catch (const nlohmann::json::exception& e) {
        throw FormatError("TARC: malformed config block at byte offset " + std::to_string(offset) +
                          ": " + e.what());
    }
    return archive;
}

}  // namespace ftlab
