#include "nr2d3/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <stdexcept>

namespace nr2d3 {
namespace {

constexpr char kMagic[5] = {'N', 'R', '2', 'D', '3'};

void put_u32(std::string& out, std::uint32_t v) {
    for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>(v >> (8 * i)));
}

void put_u64(std::string& out, std::uint64_t v) {
    for (int i = 0; i < 8; ++i) out.push_back(static_cast<char>(v >> (8 * i)));
}

void put_named(std::string& out, const std::string& name) {
    put_u32(out, static_cast<std::uint32_t>(name.size()));
    out += name;
}

struct Cursor {
    const std::string& buf;
    std::size_t at = 0;

    void need(std::size_t n) const {
        if (at + n > buf.size()) throw std::runtime_error("checkpoint: truncated file");
    }
    std::uint32_t u32() {
        need(4);
        std::uint32_t v = 0;
        for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(static_cast<unsigned char>(buf[at + i])) << (8 * i);
        at += 4;
        return v;
    }
    std::uint64_t u64() {
        need(8);
        std::uint64_t v = 0;
        for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(static_cast<unsigned char>(buf[at + i])) << (8 * i);
        at += 8;
        return v;
    }
    std::string bytes(std::size_t n) {
        need(n);
        std::string v = buf.substr(at, n);
        at += n;
        return v;
    }
};

std::string encode_params(const std::vector<std::pair<std::string, Array>>& params) {
    std::string out;
    put_u32(out, static_cast<std::uint32_t>(params.size()));
    for (const auto& [name, value] : params) {
        put_named(out, name);
        const Shape& shape = value.shape();
        put_u32(out, static_cast<std::uint32_t>(shape.size()));
        for (std::int64_t d : shape) put_u64(out, static_cast<std::uint64_t>(d));
        for (std::int64_t i = 0; i < value.numel(); ++i) put_u64(out, std::bit_cast<std::uint64_t>(value[i]));
    }
    return out;
}

std::vector<std::pair<std::string, Array>> decode_params(const std::string& payload) {
    Cursor c{payload};
    const std::uint32_t count = c.u32();
    std::vector<std::pair<std::string, Array>> out;
    out.reserve(count);
    for (std::uint32_t i = 0; i < count; ++i) {
        const std::string name = c.bytes(c.u32());
        const std::uint32_t rank = c.u32();
        Shape shape(rank);
        std::int64_t numel = 1;
        for (std::uint32_t d = 0; d < rank; ++d) {
            shape[d] = static_cast<std::int64_t>(c.u64());
            if (shape[d] < 0) throw std::runtime_error("checkpoint: negative dimension in '" + name + "'");
            numel *= shape[d];
        }
        Array value = Array::zeros(shape);
        for (std::int64_t j = 0; j < numel; ++j) value[j] = std::bit_cast<double>(c.u64());
        out.emplace_back(name, std::move(value));
    }
    if (c.at != payload.size()) throw std::runtime_error("checkpoint: trailing bytes in params section");
    return out;
}

}  // namespace

void save_checkpoint(const std::string& path, const Checkpoint& ck) {
    std::string out;
    out.append(kMagic, sizeof kMagic);
    put_u32(out, kCheckpointVersion);
    put_u32(out, 4);  // section count

    auto section = [&](const std::string& name, const std::string& payload) {
        put_named(out, name);
        put_u64(out, payload.size());
        out += payload;
    };
    section("config", ck.config_text);
    section("params", encode_params(ck.params));
    std::string rng;
    put_u64(rng, ck.rng_state);
    section("rng", rng);
    std::string step;
    put_u64(step, static_cast<std::uint64_t>(ck.step));
    section("step", step);

    std::ofstream f(path, std::ios::binary | std::ios::trunc);
    if (!f) throw std::runtime_error("checkpoint: cannot open '" + path + "' for writing");
    f.write(out.data(), static_cast<std::streamsize>(out.size()));
    if (!f) throw std::runtime_error("checkpoint: short write to '" + path + "'");
}

Checkpoint load_checkpoint(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw std::runtime_error("checkpoint: cannot read '" + path + "'");
    std::string buf((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());

    Cursor c{buf};
    c.need(sizeof kMagic);
    if (std::memcmp(buf.data(), kMagic, sizeof kMagic) != 0)
        throw std::runtime_error("checkpoint: '" + path + "' is not a checkpoint file (bad magic)");
    c.at = sizeof kMagic;
    const std::uint32_t version = c.u32();
    if (version != kCheckpointVersion)
        throw std::runtime_error("checkpoint: format version " + std::to_string(version) + ", expected " +
                                 std::to_string(kCheckpointVersion));
    const std::uint32_t sections = c.u32();

    Checkpoint ck;
    bool have_config = false, have_params = false, have_rng = false, have_step = false;
    for (std::uint32_t s = 0; s < sections; ++s) {
        const std::string name = c.bytes(c.u32());
        const std::uint64_t len = c.u64();
        const std::string payload = c.bytes(static_cast<std::size_t>(len));
        if (name == "config") {
            ck.config_text = payload;
            have_config = true;
        } else if (name == "params") {
            ck.params = decode_params(payload);
            have_params = true;
        } else if (name == "rng") {
            Cursor pc{payload};
            ck.rng_state = pc.u64();
            have_rng = true;
        } else if (name == "step") {
            Cursor pc{payload};
            ck.step = static_cast<std::int64_t>(pc.u64());
            have_step = true;
        } else {
            throw std::runtime_error("checkpoint: unknown section '" + name + "'");
        }
    }
    if (c.at != buf.size()) throw std::runtime_error("checkpoint: trailing bytes after last section");
    if (!have_config || !have_params || !have_rng || !have_step)
        throw std::runtime_error("checkpoint: missing required section");
    return ck;
}

std::uint64_t file_checksum(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw std::runtime_error("checksum: cannot read '" + path + "'");
    std::uint64_t h = 1469598103934665603ULL;
    char chunk[4096];
    while (f.read(chunk, sizeof chunk) || f.gcount() > 0) {
        for (std::streamsize i = 0; i < f.gcount(); ++i) {
            h ^= static_cast<unsigned char>(chunk[i]);
            h *= 1099511628211ULL;
        }
        if (!f) break;
    }
    return h;
}

}  // namespace nr2d3
