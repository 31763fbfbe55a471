#pragma once

#include <cstdint>
#include <string_view>
#include <vector>

namespace anyi2v {

/// Counter-based generator: value i of stream (seed, name) depends only on
/// those three inputs, so results do not depend on draw order.
class CounterRng {
public:
    CounterRng(std::uint64_t seed, std::string_view stream);

    std::uint64_t bits(std::uint64_t counter) const;
    /// Uniform in the open interval (0, 1).
    double uniform(std::uint64_t counter) const;
    /// Standard normal (Box-Muller on counters 2i and 2i+1).
    double normal(std::uint64_t index) const;

    std::vector<float> normals(std::size_t count, double scale = 1.0) const;

    std::uint64_t key() const { return key_; }

private:
    std::uint64_t key_;
};

std::uint64_t fnv1a(std::string_view text);
std::uint64_t splitmix64(std::uint64_t x);

}  // namespace anyi2v
