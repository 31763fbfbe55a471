#include "anyi2v/random.hpp"

#include <cmath>
#include <numbers>

namespace anyi2v {

std::uint64_t fnv1a(std::string_view text) {
    std::uint64_t h = 0xcbf29ce484222325ULL;
    for (unsigned char c : text) {
        h ^= c;
        h *= 0x100000001b3ULL;
    }
    return h;
}

std::uint64_t splitmix64(std::uint64_t x) {
    x += 0x9e3779b97f4a7c15ULL;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
    return x ^ (x >> 31);
}

CounterRng::CounterRng(std::uint64_t seed, std::string_view stream)
    : key_(splitmix64(seed ^ splitmix64(fnv1a(stream)))) {}

std::uint64_t CounterRng::bits(std::uint64_t counter) const {
    return splitmix64(key_ ^ splitmix64(counter));
}

double CounterRng::uniform(std::uint64_t counter) const {
    // 53 random bits, shifted off zero.
    return (static_cast<double>(bits(counter) >> 11) + 0.5) * 0x1.0p-53;
}

double CounterRng::normal(std::uint64_t index) const {
    const double u1 = uniform(2 * index);
    const double u2 = uniform(2 * index + 1);
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * std::numbers::pi * u2);
}

std::vector<float> CounterRng::normals(std::size_t count, double scale) const {
    std::vector<float> out(count);
    for (std::size_t i = 0; i < count; ++i) out[i] = static_cast<float>(scale * normal(i));
    return out;
}

}  // namespace anyi2v
