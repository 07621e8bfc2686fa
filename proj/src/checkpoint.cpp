#include "nervdiff/checkpoint.hpp"

#include <cstdio>
#include <cstring>
#include <memory>

namespace nervdiff {

namespace {

using Kind = CheckpointError::Kind;

struct FileCloser {
    void operator()(std::FILE* f) const {
        if (f) std::fclose(f);
    }
};
using FilePtr = std::unique_ptr<std::FILE, FileCloser>;

void put_u16(std::string& buf, uint16_t v) {
    buf.push_back(static_cast<char>(v & 0xff));
    buf.push_back(static_cast<char>((v >> 8) & 0xff));
}
void put_u32(std::string& buf, uint32_t v) {
    for (int i = 0; i < 4; ++i) buf.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

struct Reader {
    std::FILE* f;
    bool read(void* dst, size_t n) { return std::fread(dst, 1, n, f) == n; }
    bool u8(uint8_t& v) { return read(&v, 1); }
    bool u16(uint16_t& v) {
        uint8_t b[2];
        if (!read(b, 2)) return false;
        v = static_cast<uint16_t>(b[0] | (b[1] << 8));
        return true;
    }
    bool u32(uint32_t& v) {
        uint8_t b[4];
        if (!read(b, 4)) return false;
        v = static_cast<uint32_t>(b[0]) | (static_cast<uint32_t>(b[1]) << 8) |
            (static_cast<uint32_t>(b[2]) << 16) | (static_cast<uint32_t>(b[3]) << 24);
        return true;
    }
};

}  // namespace

void CheckpointContainer::save(const std::string& path) const {
    std::string buf;
    buf.reserve(64);
    buf.append("NRVD", 4);
    put_u32(buf, kVersion);
    put_u32(buf, static_cast<uint32_t>(entries_.size()));
    put_u32(buf, 0);  // reserved

    FilePtr f(std::fopen(path.c_str(), "wb"));
    if (!f) throw CheckpointError(Kind::io, "cannot open for write: " + path);
    if (std::fwrite(buf.data(), 1, buf.size(), f.get()) != buf.size())
        throw CheckpointError(Kind::io, "write failure: " + path);

    for (const auto& [name, data] : entries_) {
        std::string hdr;
        put_u16(hdr, static_cast<uint16_t>(name.size()));
        hdr.append(name);
        hdr.push_back(static_cast<char>(data.rank()));
        for (Index i = 0; i < data.rank(); ++i) put_u32(hdr, static_cast<uint32_t>(data.dim(i)));
        if (std::fwrite(hdr.data(), 1, hdr.size(), f.get()) != hdr.size())
            throw CheckpointError(Kind::io, "write failure: " + path);
        static_assert(sizeof(float) == 4);
        size_t n = static_cast<size_t>(data.size());
        if (std::fwrite(data.data(), sizeof(float), n, f.get()) != n)
            throw CheckpointError(Kind::io, "write failure: " + path);
    }
    if (std::fflush(f.get()) != 0) throw CheckpointError(Kind::io, "flush failure: " + path);
}

CheckpointContainer CheckpointContainer::load(const std::string& path) {
    FilePtr f(std::fopen(path.c_str(), "rb"));
    if (!f) throw CheckpointError(Kind::io, "cannot open: " + path);
    Reader r{f.get()};

    char magic[4];
    if (!r.read(magic, 4)) throw CheckpointError(Kind::corrupt_header, "short header: " + path);
    if (std::memcmp(magic, "NRVD", 4) != 0)
        throw CheckpointError(Kind::bad_magic, "bad magic in " + path);
    uint32_t version = 0, count = 0, reserved = 0;
    if (!r.u32(version) || !r.u32(count) || !r.u32(reserved))
        throw CheckpointError(Kind::corrupt_header, "short header: " + path);
    if (version != kVersion)
        throw CheckpointError(Kind::bad_version, "unsupported version in " + path);

    CheckpointContainer c;
    for (uint32_t e = 0; e < count; ++e) {
        uint16_t name_len = 0;
        if (!r.u16(name_len)) throw CheckpointError(Kind::truncated, "truncated entry header: " + path);
        std::string name(name_len, '\0');
        if (name_len && !r.read(name.data(), name_len))
            throw CheckpointError(Kind::truncated, "truncated entry name: " + path);
        uint8_t rank = 0;
        if (!r.u8(rank)) throw CheckpointError(Kind::truncated, "truncated entry rank: " + path);
        Shape shape(rank);
        for (uint8_t i = 0; i < rank; ++i) {
            uint32_t d = 0;
            if (!r.u32(d)) throw CheckpointError(Kind::truncated, "truncated entry dims: " + path);
            shape[i] = static_cast<Index>(d);
        }
        Tensor<float> data(shape);
        size_t n = static_cast<size_t>(data.size());
        if (std::fread(data.data(), sizeof(float), n, f.get()) != n)
            throw CheckpointError(Kind::truncated, "truncated payload: " + path);
        if (c.entries_.count(name))
            throw CheckpointError(Kind::duplicate_name, "duplicate entry in file: " + name);
        c.entries_.emplace(name, std::move(data));
    }
    return c;
}

}  // namespace nervdiff
