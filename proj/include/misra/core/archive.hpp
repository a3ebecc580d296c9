#pragma once

#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <string>
#include <utility>
#include <vector>

#include "misra/core/tensor.hpp"

namespace misra {

/// Named float32 tensors in the MSRA container:
///   "MSRA" | u32 version=1 | u32 count | per entry:
///   u16 name_len | name | u8 rank | u32 extents[rank] | f32 payload
/// All integers and floats little-endian.
struct TensorArchive {
    static constexpr std::uint32_t kVersion = 1;

    std::vector<std::pair<std::string, Tensor>> entries;

    void add(std::string name, Tensor t) { entries.emplace_back(std::move(name), std::move(t)); }

    const Tensor* find(const std::string& name) const {
        for (const auto& [n, t] : entries)
            if (n == name) return &t;
        return nullptr;
    }

    std::vector<std::uint8_t> serialize() const {
        std::vector<std::uint8_t> out{'M', 'S', 'R', 'A'};
        put_u32(out, kVersion);
        put_u32(out, static_cast<std::uint32_t>(entries.size()));
        for (const auto& [name, t] : entries) {
            if (name.size() > 0xFFFF) throw DataError("archive entry name too long: " + name.substr(0, 32) + "...");
            if (t.rank() > 0xFF) throw DataError("archive entry rank too large: " + name);
            put_u16(out, static_cast<std::uint16_t>(name.size()));
            out.insert(out.end(), name.begin(), name.end());
            out.push_back(static_cast<std::uint8_t>(t.rank()));
            for (auto e : t.shape()) put_u32(out, static_cast<std::uint32_t>(e));
            for (float v : t.data()) put_u32(out, std::bit_cast<std::uint32_t>(v));
        }
        return out;
    }

    static TensorArchive deserialize(const std::vector<std::uint8_t>& bytes) {
        Reader r{bytes, 0};
        if (bytes.size() < 12 || std::memcmp(bytes.data(), "MSRA", 4) != 0) throw DataError("not an MSRA archive");
        r.pos = 4;
        const auto version = r.u32();
        if (version != kVersion) throw DataError("unsupported MSRA archive version " + std::to_string(version));
        const auto count = r.u32();
        TensorArchive archive;
        for (std::uint32_t e = 0; e < count; ++e) {
            const auto len = r.u16();
            r.need(len);
            std::string name(reinterpret_cast<const char*>(bytes.data() + r.pos), len);
            r.pos += len;
            r.need(1);
            const std::size_t rank = bytes[r.pos++];
            Shape shape(rank);
            for (auto& s : shape) s = r.u32();
            const std::size_t n = misra::numel(shape);
            if (rank == 0 || n == 0) throw DataError("archive entry '" + name + "' has empty shape");
            r.need(4 * n);
            std::vector<float> values(n);
            for (auto& v : values) v = std::bit_cast<float>(r.u32());
            archive.add(std::move(name), Tensor(std::move(shape), std::move(values)));
        }
        if (r.pos != bytes.size()) throw DataError("trailing bytes after MSRA archive entries");
        return archive;
    }

    void save(const std::string& path) const {
        const auto bytes = serialize();
        std::ofstream f(path, std::ios::binary | std::ios::trunc);
        if (!f) throw DataError("cannot open " + path + " for writing");
        f.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
        if (!f) throw DataError("write failed: " + path);
    }

    static TensorArchive load(const std::string& path) {
        std::ifstream f(path, std::ios::binary);
        if (!f) throw DataError("cannot open archive " + path);
        std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
        return deserialize(bytes);
    }

private:
    static void put_u16(std::vector<std::uint8_t>& out, std::uint16_t v) {
        out.push_back(static_cast<std::uint8_t>(v & 0xFF));
        out.push_back(static_cast<std::uint8_t>(v >> 8));
    }
    static void put_u32(std::vector<std::uint8_t>& out, std::uint32_t v) {
        for (int i = 0; i < 4; ++i) out.push_back(static_cast<std::uint8_t>((v >> (8 * i)) & 0xFF));
    }

    struct Reader {
        const std::vector<std::uint8_t>& bytes;
        std::size_t pos;
        void need(std::size_t n) const {
            if (pos + n > bytes.size()) throw DataError("truncated MSRA archive");
        }
        std::uint16_t u16() {
            need(2);
            const auto v = static_cast<std::uint16_t>(bytes[pos] | (bytes[pos + 1] << 8));
            pos += 2;
            return v;
        }
        std::uint32_t u32() {
            need(4);
            std::uint32_t v = 0;
            for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(bytes[pos + i]) << (8 * i);
            pos += 4;
            return v;
        }
    };
};

}  // namespace misra
