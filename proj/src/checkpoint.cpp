#include "natimm/checkpoint.hpp"

#include <cstring>
#include <fstream>
#include <unordered_set>

namespace natimm {

namespace {

void put_bytes(std::string& out, const void* p, size_t n) { out.append(static_cast<const char*>(p), n); }

void put_u16(std::string& out, uint16_t v) {
    unsigned char b[2] = {static_cast<unsigned char>(v & 0xff), static_cast<unsigned char>(v >> 8)};
    put_bytes(out, b, 2);
}

void put_u32(std::string& out, uint32_t v) {
    unsigned char b[4];
    for (int i = 0; i < 4; ++i) b[i] = static_cast<unsigned char>((v >> (8 * i)) & 0xff);
    put_bytes(out, b, 4);
}

void put_u64(std::string& out, uint64_t v) {
    unsigned char b[8];
    for (int i = 0; i < 8; ++i) b[i] = static_cast<unsigned char>((v >> (8 * i)) & 0xff);
    put_bytes(out, b, 8);
}

void put_f32(std::string& out, float f) {
    uint32_t bits;
    std::memcpy(&bits, &f, 4);
    put_u32(out, bits);
}

struct Reader {
    const std::string& buf;
    size_t pos = 0;
    const std::string& path;

    [[noreturn]] void fail(const std::string& what) const {
        throw FormatError(path + ": " + what + " at byte offset " + std::to_string(pos));
    }

    void need(size_t n) const {
        if (pos + n > buf.size()) fail("truncated file (need " + std::to_string(n) + " more bytes)");
    }

    uint16_t u16() {
        need(2);
        uint16_t v = static_cast<uint16_t>(static_cast<unsigned char>(buf[pos]) |
                                           (static_cast<unsigned char>(buf[pos + 1]) << 8));
        pos += 2;
        return v;
    }

    uint32_t u32() {
        need(4);
        uint32_t v = 0;
        for (int i = 0; i < 4; ++i) v |= static_cast<uint32_t>(static_cast<unsigned char>(buf[pos + static_cast<size_t>(i)])) << (8 * i);
        pos += 4;
        return v;
    }

    uint64_t u64() {
        need(8);
        uint64_t v = 0;
        for (int i = 0; i < 8; ++i) v |= static_cast<uint64_t>(static_cast<unsigned char>(buf[pos + static_cast<size_t>(i)])) << (8 * i);
        pos += 8;
        return v;
    }

    std::string bytes(size_t n) {
        need(n);
        std::string s = buf.substr(pos, n);
        pos += n;
        return s;
    }
};

}  // namespace

void Checkpoint::add(const std::string& name, const Tensor& t) {
    if (!t.defined()) throw ContractError("checkpoint: undefined tensor for \"" + name + "\"");
    if (name.empty() || name.size() > 0xffff) throw ContractError("checkpoint: bad tensor name length");
    for (const auto& [n, existing] : tensors)
        if (n == name) throw ContractError("checkpoint: duplicate tensor name \"" + name + "\"");
    tensors.emplace_back(name, t);
}

const Tensor* Checkpoint::find(const std::string& name) const {
    for (const auto& [n, t] : tensors)
        if (n == name) return &t;
    return nullptr;
}

void Checkpoint::save(const std::string& path) const {
    std::string out;
    put_bytes(out, kMagic, 4);
    put_u32(out, version);
    put_u64(out, config_blob.size());
    out += config_blob;
    put_u32(out, static_cast<uint32_t>(tensors.size()));
    uint64_t checksum = 0xcbf29ce484222325ull;
    for (const auto& [name, t] : tensors) {
        put_u16(out, static_cast<uint16_t>(name.size()));
        out += name;
        const auto& shape = t.shape();
        if (shape.size() > 0xff) throw ContractError("checkpoint: tensor rank exceeds format limit");
        out.push_back(static_cast<char>(shape.size()));
        for (auto d : shape) put_u64(out, static_cast<uint64_t>(d));
        std::string payload;
        payload.reserve(t.data().size() * 4);
        for (float f : t.data()) put_f32(payload, f);
        checksum = fnv1a64(payload.data(), payload.size(), checksum);
        out += payload;
    }
    put_u64(out, checksum);
    std::ofstream f(path, std::ios::binary | std::ios::trunc);
    if (!f) throw DataError("cannot write checkpoint: " + path);
    f.write(out.data(), static_cast<std::streamsize>(out.size()));
    if (!f) throw DataError("short write on checkpoint: " + path);
}

Checkpoint Checkpoint::load(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw DataError("cannot open checkpoint: " + path);
    std::string buf((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
    Reader r{buf, 0, path};
    {
        r.need(4);
        if (std::memcmp(buf.data(), kMagic, 4) != 0) r.fail("bad magic (not a checkpoint file)");
        r.pos = 4;
    }
    Checkpoint ck;
    ck.version = r.u32();
    if (ck.version != kVersion)
        throw FormatError(path + ": unsupported checkpoint version " + std::to_string(ck.version) + " (expected " +
                          std::to_string(kVersion) + ")");
    const uint64_t blob_len = r.u64();
    ck.config_blob = r.bytes(blob_len);
    const uint32_t count = r.u32();
    uint64_t checksum = 0xcbf29ce484222325ull;
    std::unordered_set<std::string> seen;
    for (uint32_t ti = 0; ti < count; ++ti) {
        const uint16_t name_len = r.u16();
        const std::string name = r.bytes(name_len);
        if (!seen.insert(name).second) r.fail("duplicate tensor name \"" + name + "\"");
        r.need(1);
        const int rank = static_cast<unsigned char>(buf[r.pos]);
        r.pos += 1;
        Shape shape;
        int64_t numel = 1;
        for (int d = 0; d < rank; ++d) {
            const uint64_t dim = r.u64();
            if (dim > (1ull << 32)) r.fail("implausible dimension " + std::to_string(dim));
            shape.push_back(static_cast<int64_t>(dim));
            numel *= static_cast<int64_t>(dim);
        }
        const std::string payload = r.bytes(static_cast<size_t>(numel) * 4);
        checksum = fnv1a64(payload.data(), payload.size(), checksum);
        std::vector<float> data(static_cast<size_t>(numel));
        for (size_t i = 0; i < data.size(); ++i) {
            uint32_t bits = 0;
            for (int b = 0; b < 4; ++b)
                bits |= static_cast<uint32_t>(static_cast<unsigned char>(payload[i * 4 + static_cast<size_t>(b)]))
                        << (8 * b);
            float fv;
            std::memcpy(&fv, &bits, 4);
            data[i] = fv;
        }
        ck.tensors.emplace_back(name, Tensor::from_data(std::move(shape), std::move(data)));
    }
    const uint64_t stored = r.u64();
    if (stored != checksum)
        throw FormatError(path + ": payload checksum mismatch (file corrupt): stored " + std::to_string(stored) +
                          ", computed " + std::to_string(checksum));
    if (r.pos != buf.size()) r.fail("trailing bytes after checksum");
    return ck;
}

}  // namespace natimm
