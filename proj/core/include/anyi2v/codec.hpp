#pragma once

// Toy linear latent codec: each non-overlapping block x block pixel patch maps
// to one latent cell of `channels` values.
//
// Pixels are scaled to [-1, 1]. The encoder rows are mutually orthogonal: the
// first three are the per-colour block means, the rest seeded random
// directions orthogonalized against them. The decoder is the pseudo-inverse.

#include <cstdint>
#include <vector>

#include "anyi2v/image_io.hpp"
#include "anyi2v/tensor.hpp"

namespace anyi2v {

class ToyCodec {
public:
    ToyCodec(std::size_t channels, std::size_t block, std::uint64_t seed);

    std::size_t channels() const { return channels_; }
    std::size_t block() const { return block_; }

    /// Image of size (H*block) x (W*block) -> latent [1, C, H, W].
    Tensor encode(const Image& image) const;
    /// Latent [f, C, H, W] -> f images.
    std::vector<Image> decode(const Tensor& latent) const;

    /// Encoder matrix [C, 3*block*block], pixel layout (row, col, colour).
    const std::vector<double>& encoder() const { return enc_; }

private:
    std::size_t channels_;
    std::size_t block_;
    std::vector<double> enc_;
    std::vector<double> dec_;  // [3*block*block, C]
};

}  // namespace anyi2v
