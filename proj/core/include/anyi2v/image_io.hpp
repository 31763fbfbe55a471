#pragma once

// Binary NetPBM (P5 grayscale, P6 colour) with maxval 255.

#include <cstdint>
#include <filesystem>
#include <string>
#include <string_view>
#include <vector>

namespace anyi2v {

struct Image {
    std::size_t width = 0;
    std::size_t height = 0;
    std::size_t channels = 3;  // 1 or 3
    std::vector<std::uint8_t> pixels;  // row-major, interleaved
    std::string modality = "other";

    std::uint8_t at(std::size_t row, std::size_t col, std::size_t channel) const {
        return pixels[(row * width + col) * channels + channel];
    }
};

/// Decodes P5/P6 bytes. Grayscale input is promoted to 3 channels.
Image decode_netpbm(std::string_view bytes);
Image read_netpbm(const std::filesystem::path& path);

/// P5 for 1-channel images, P6 for 3-channel images.
std::string encode_netpbm(const Image& image);
void write_netpbm(const std::filesystem::path& path, const Image& image);

}  // namespace anyi2v
