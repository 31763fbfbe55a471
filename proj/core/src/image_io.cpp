#include "anyi2v/image_io.hpp"

#include <cctype>
#include <fstream>
#include <sstream>

#include "anyi2v/error.hpp"

namespace anyi2v {

namespace {

class HeaderReader {
public:
    explicit HeaderReader(std::string_view bytes) : bytes_(bytes) {}

    std::string token() {
        skip_space_and_comments();
        const std::size_t start = pos_;
        while (pos_ < bytes_.size() && !std::isspace(static_cast<unsigned char>(bytes_[pos_]))) ++pos_;
        if (start == pos_) throw InputError("NetPBM header is truncated");
        return std::string(bytes_.substr(start, pos_ - start));
    }

    std::size_t number(const char* what) {
        const std::string t = token();
        std::size_t value = 0;
        for (char c : t) {
            if (!std::isdigit(static_cast<unsigned char>(c))) throw InputError(std::string("NetPBM ") + what + " is not a number: " + t);
            value = value * 10 + std::size_t(c - '0');
            if (value > (1u << 24)) throw InputError(std::string("NetPBM ") + what + " is too large");
        }
        return value;
    }

    /// Consumes the single whitespace byte that ends the header.
    std::size_t payload_start() {
        if (pos_ >= bytes_.size() || !std::isspace(static_cast<unsigned char>(bytes_[pos_]))) {
            throw InputError("NetPBM header is not terminated by whitespace");
        }
        return pos_ + 1;
    }

private:
    void skip_space_and_comments() {
        while (pos_ < bytes_.size()) {
            if (std::isspace(static_cast<unsigned char>(bytes_[pos_]))) {
                ++pos_;
            } else if (bytes_[pos_] == '#') {
                while (pos_ < bytes_.size() && bytes_[pos_] != '\n') ++pos_;
            } else {
                break;
            }
        }
    }

    std::string_view bytes_;
    std::size_t pos_ = 0;
};

}  // namespace

Image decode_netpbm(std::string_view bytes) {
    HeaderReader header(bytes);
    const std::string magic = header.token();
    std::size_t channels = 0;
    if (magic == "P5") {
        channels = 1;
    } else if (magic == "P6") {
        channels = 3;
    } else if (magic == "P2" || magic == "P3") {
        throw InputError("ASCII NetPBM (" + magic + ") is not supported; use binary P5/P6");
    } else {
        throw InputError("not a P5/P6 NetPBM image (magic '" + magic + "')");
    }
    Image img;
    img.width = header.number("width");
    img.height = header.number("height");
    const std::size_t maxval = header.number("maxval");
    if (img.width == 0 || img.height == 0) throw InputError("NetPBM image has zero size");
    if (maxval != 255) throw InputError("only 8-bit NetPBM (maxval 255) is supported, got maxval " + std::to_string(maxval));
    const std::size_t start = header.payload_start();
    const std::size_t count = img.width * img.height * channels;
    if (bytes.size() < start + count) {
        throw InputError("NetPBM payload is truncated: expected " + std::to_string(count) + " bytes, found " +
                         std::to_string(bytes.size() - std::min(bytes.size(), start)));
    }
    img.channels = 3;
    img.pixels.resize(img.width * img.height * 3);
    for (std::size_t i = 0; i < img.width * img.height; ++i) {
        for (std::size_t c = 0; c < 3; ++c) {
            img.pixels[i * 3 + c] = static_cast<std::uint8_t>(bytes[start + i * channels + (channels == 1 ? 0 : c)]);
        }
    }
    return img;
}

Image read_netpbm(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw InputError("cannot open image " + path.string());
    std::stringstream ss;
    ss << in.rdbuf();
    try {
        return decode_netpbm(ss.str());
    } catch (...) {
        rethrow_with_context(path.string());
    }
}

std::string encode_netpbm(const Image& image) {
    if (image.channels != 1 && image.channels != 3) throw InputError("NetPBM output needs 1 or 3 channels");
    if (image.pixels.size() != image.width * image.height * image.channels) throw InputError("image buffer size mismatch");
    std::string out = (image.channels == 1 ? "P5\n" : "P6\n") + std::to_string(image.width) + " " +
                      std::to_string(image.height) + "\n255\n";
    out.append(reinterpret_cast<const char*>(image.pixels.data()), image.pixels.size());
    return out;
}

void write_netpbm(const std::filesystem::path& path, const Image& image) {
    std::ofstream out(path, std::ios::binary);
    const std::string bytes = encode_netpbm(image);
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw Error("cannot write image " + path.string());
}

}  // namespace anyi2v
