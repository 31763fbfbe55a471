#include "anyi2v/codec.hpp"

#include <algorithm>
#include <cmath>

#include "anyi2v/random.hpp"

namespace anyi2v {

ToyCodec::ToyCodec(std::size_t channels, std::size_t block, std::uint64_t seed) : channels_(channels), block_(block) {
    if (channels == 0 || block == 0) throw InputError("codec needs positive channels and block size");
    const std::size_t d = 3 * block * block;
    if (channels > d) throw InputError("codec has more latent channels than pixels per block");
    const double row_norm = 1.0 / double(block);
    enc_.assign(channels * d, 0.0);
    const CounterRng rng(seed, "codec");
    for (std::size_t r = 0; r < channels; ++r) {
        double* row = enc_.data() + r * d;
        if (r < 3) {
            for (std::size_t p = 0; p < block * block; ++p) row[p * 3 + r] = 1.0 / double(block * block);
            continue;
        }
        for (std::size_t i = 0; i < d; ++i) row[i] = rng.normal(r * d + i);
        // Two Gram-Schmidt passes keep the rows orthogonal to working precision.
        for (int pass = 0; pass < 2; ++pass) {
            for (std::size_t q = 0; q < r; ++q) {
                const double* prev = enc_.data() + q * d;
                double dot = 0.0, nn = 0.0;
                for (std::size_t i = 0; i < d; ++i) {
                    dot += row[i] * prev[i];
                    nn += prev[i] * prev[i];
                }
                for (std::size_t i = 0; i < d; ++i) row[i] -= dot / nn * prev[i];
            }
        }
        double norm = 0.0;
        for (std::size_t i = 0; i < d; ++i) norm += row[i] * row[i];
        norm = std::sqrt(norm);
        if (norm < 1e-9) throw NumericError("codec row became degenerate during orthogonalization");
        for (std::size_t i = 0; i < d; ++i) row[i] *= row_norm / norm;
    }
    // Orthogonal rows: the pseudo-inverse is E^T scaled by 1/|row|^2.
    dec_.assign(d * channels, 0.0);
    for (std::size_t r = 0; r < channels; ++r) {
        const double* row = enc_.data() + r * d;
        double nn = 0.0;
        for (std::size_t i = 0; i < d; ++i) nn += row[i] * row[i];
        for (std::size_t i = 0; i < d; ++i) dec_[i * channels + r] = row[i] / nn;
    }
}

Tensor ToyCodec::encode(const Image& image) const {
    if (image.channels != 3) throw InputError("codec expects a 3-channel image");
    if (image.width % block_ != 0 || image.height % block_ != 0) {
        throw ShapeError("image " + std::to_string(image.width) + "x" + std::to_string(image.height) +
                         " is not a multiple of the codec block " + std::to_string(block_));
    }
    const std::size_t h = image.height / block_, w = image.width / block_, d = 3 * block_ * block_;
    std::vector<float> out(channels_ * h * w);
    std::vector<double> patch(d);
    for (std::size_t y = 0; y < h; ++y) {
        for (std::size_t x = 0; x < w; ++x) {
            for (std::size_t py = 0; py < block_; ++py) {
                for (std::size_t px = 0; px < block_; ++px) {
                    for (std::size_t c = 0; c < 3; ++c) {
                        patch[(py * block_ + px) * 3 + c] = image.at(y * block_ + py, x * block_ + px, c) / 127.5 - 1.0;
                    }
                }
            }
            for (std::size_t r = 0; r < channels_; ++r) {
                double acc = 0.0;
                for (std::size_t i = 0; i < d; ++i) acc += enc_[r * d + i] * patch[i];
                out[(r * h + y) * w + x] = static_cast<float>(acc);
            }
        }
    }
    return Tensor({1, channels_, h, w}, std::move(out));
}

std::vector<Image> ToyCodec::decode(const Tensor& latent) const {
    if (latent.rank() != 4 || latent.dim(1) != channels_) {
        throw ShapeError("codec cannot decode latent of shape " + to_string(latent.shape()));
    }
    const std::size_t f = latent.dim(0), h = latent.dim(2), w = latent.dim(3), d = 3 * block_ * block_;
    const auto v = latent.data();
    std::vector<Image> frames;
    for (std::size_t fr = 0; fr < f; ++fr) {
        Image img;
        img.width = w * block_;
        img.height = h * block_;
        img.channels = 3;
        img.pixels.resize(img.width * img.height * 3);
        for (std::size_t y = 0; y < h; ++y) {
            for (std::size_t x = 0; x < w; ++x) {
                for (std::size_t i = 0; i < d; ++i) {
                    double acc = 0.0;
                    for (std::size_t r = 0; r < channels_; ++r) acc += dec_[i * channels_ + r] * v[((fr * channels_ + r) * h + y) * w + x];
                    const double pixel = std::clamp(std::round((acc + 1.0) * 127.5), 0.0, 255.0);
                    const std::size_t p = i / 3, c = i % 3;
                    const std::size_t row = y * block_ + p / block_, col = x * block_ + p % block_;
                    img.pixels[(row * img.width + col) * 3 + c] = static_cast<std::uint8_t>(pixel);
                }
            }
        }
        frames.push_back(std::move(img));
    }
    return frames;
}

}  // namespace anyi2v
