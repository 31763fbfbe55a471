#include "anyi2v/rtd.hpp"

#include <array>
#include <bit>
#include <cstring>
#include <fstream>
#include <istream>
#include <ostream>

namespace anyi2v::rtd {

namespace {

void put_u32(std::ostream& out, std::uint32_t v) {
    const std::array<char, 4> b = {static_cast<char>(v & 0xff), static_cast<char>((v >> 8) & 0xff),
                                   static_cast<char>((v >> 16) & 0xff), static_cast<char>((v >> 24) & 0xff)};
    out.write(b.data(), 4);
}

std::uint32_t get_u32(std::istream& in) {
    std::array<unsigned char, 4> b{};
    if (!in.read(reinterpret_cast<char*>(b.data()), 4)) throw InputError("RTD1: truncated header");
    return std::uint32_t(b[0]) | (std::uint32_t(b[1]) << 8) | (std::uint32_t(b[2]) << 16) |
           (std::uint32_t(b[3]) << 24);
}

}  // namespace

void write(std::ostream& out, const Tensor& t) {
    out.write(kMagic, sizeof kMagic);
    put_u32(out, static_cast<std::uint32_t>(t.rank()));
    for (std::size_t d : t.shape()) put_u32(out, static_cast<std::uint32_t>(d));
    for (float v : t.data()) put_u32(out, std::bit_cast<std::uint32_t>(v));
    if (!out) throw Error("RTD1: write failed");
}

Tensor read(std::istream& in) {
    char magic[8];
    if (!in.read(magic, sizeof magic) || std::memcmp(magic, kMagic, sizeof kMagic) != 0) {
        throw InputError("RTD1: bad magic");
    }
    const std::uint32_t rank = get_u32(in);
    if (rank == 0 || rank > 16) throw InputError("RTD1: unsupported rank " + std::to_string(rank));
    Shape shape(rank);
    for (auto& d : shape) {
        d = get_u32(in);
        if (d == 0) throw InputError("RTD1: zero dimension");
    }
    std::vector<float> data(numel(shape));
    for (auto& v : data) {
        std::uint32_t bits;
        try {
            bits = get_u32(in);
        } catch (const InputError&) {
            throw InputError("RTD1: truncated payload");
        }
        v = std::bit_cast<float>(bits);
    }
    return Tensor(std::move(shape), std::move(data));
}

void save(const std::filesystem::path& path, const Tensor& t) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw Error("cannot open " + path.string() + " for writing");
    write(out, t);
}

Tensor load(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw InputError("cannot open " + path.string());
    try {
        return read(in);
    } catch (...) {
        rethrow_with_context(path.string());
    }
}

}  // namespace anyi2v::rtd
