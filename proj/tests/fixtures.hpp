#pragma once

// Synthetic inputs shared by unit tests, the acceptance binary and benchmarks.

#include <cmath>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include "anyi2v/backbone.hpp"
#include "anyi2v/image_io.hpp"
#include "anyi2v/random.hpp"
#include "anyi2v/traj_control.hpp"

namespace fixture {

/// Small backbone that keeps tests fast: 2 frames, 8x8 latent, narrow widths.
inline anyi2v::BackboneConfig small_config(std::uint64_t seed = 3) {
    anyi2v::BackboneConfig c;
    c.frames = 2;
    c.height = 8;
    c.width = 8;
    c.base_width = 16;
    c.seed = seed;
    return c;
}

inline anyi2v::Tensor noise(const anyi2v::Shape& shape, std::uint64_t seed, const char* stream = "test") {
    return anyi2v::Tensor(shape, anyi2v::CounterRng(seed, stream).normals(anyi2v::numel(shape)));
}

inline anyi2v::TensorD noise_d(const anyi2v::Shape& shape, std::uint64_t seed, const char* stream = "test") {
    return noise(shape, seed, stream).cast<double>();
}

/// White disk of `radius` pixels centred at (cx, cy) on black, 3 channels.
inline anyi2v::Image disk(std::size_t width, std::size_t height, double cx, double cy, double radius) {
    anyi2v::Image im;
    im.width = width;
    im.height = height;
    im.channels = 3;
    im.pixels.resize(width * height * 3);
    for (std::size_t y = 0; y < height; ++y) {
        for (std::size_t x = 0; x < width; ++x) {
            const double d = std::hypot(double(x) + 0.5 - cx, double(y) + 0.5 - cy);
            const std::uint8_t v = d <= radius ? 255 : 0;
            for (std::size_t c = 0; c < 3; ++c) im.pixels[(y * width + x) * 3 + c] = v;
        }
    }
    return im;
}

/// Moving-bump fixture: a disk of radius 8 px in a 64x64 image, tracked by one
/// box group that slides 8 px to the right per frame.
struct MovingBump {
    static constexpr std::size_t kSize = 64;
    static constexpr double kRadius = 8.0;
    std::vector<anyi2v::Box> boxes{{4, 4, 28, 28}, {12, 4, 36, 28}, {20, 4, 44, 28}, {28, 4, 52, 28}};

    anyi2v::TrajectorySpec spec() const {
        anyi2v::TrajectorySpec s;
        s.groups.push_back({boxes, 9});
        s.pca_dim = 64;
        return s;
    }
    double center_x(std::size_t j) const { return (boxes[j].x0 + boxes[j].x1) / 2.0; }
    double center_y(std::size_t j) const { return (boxes[j].y0 + boxes[j].y1) / 2.0; }
    /// The condition image: the disk centred in the first box.
    anyi2v::Image condition() const { return disk(kSize, kSize, center_x(0), center_y(0), kRadius); }

    /// Writes condition.ppm and traj.json into `dir`.
    void write(const std::filesystem::path& dir) const {
        std::filesystem::create_directories(dir);
        anyi2v::write_netpbm(dir / "condition.ppm", condition());
        std::ofstream(dir / "traj.json") << spec().to_json();
    }
};

inline std::filesystem::path scratch_dir(const std::string& name) {
    const auto dir = std::filesystem::temp_directory_path() / ("anyi2v_test_" + name);
    std::filesystem::remove_all(dir);
    std::filesystem::create_directories(dir);
    return dir;
}

}  // namespace fixture
