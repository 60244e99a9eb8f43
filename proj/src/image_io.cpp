#include "explicd/image_io.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <stdexcept>

namespace explicd {

namespace {

// Reads the next whitespace-delimited header token, skipping '#' comments.
std::string header_token(std::istream& in) {
    std::string tok;
    char c = 0;
    while (in.get(c)) {
        if (c == '#') {
            std::string skip;
            std::getline(in, skip);
            continue;
        }
        if (std::isspace(static_cast<unsigned char>(c))) {
            if (!tok.empty()) break;
            continue;
        }
        tok.push_back(c);
    }
    return tok;
}

struct NetpbmHeader {
    std::size_t width = 0;
    std::size_t height = 0;
};

NetpbmHeader read_header(std::istream& in, const std::string& magic, const std::filesystem::path& path) {
    if (header_token(in) != magic) throw std::runtime_error(path.string() + ": not a " + magic + " file");
    NetpbmHeader h;
    try {
        h.width = std::stoul(header_token(in));
        h.height = std::stoul(header_token(in));
        if (std::stoul(header_token(in)) != 255) throw std::runtime_error("maxval");
    } catch (const std::exception&) {
        throw std::runtime_error(path.string() + ": malformed " + magic + " header");
    }
    if (h.width == 0 || h.height == 0) throw std::runtime_error(path.string() + ": empty image");
    return h;
}

} // namespace

std::uint8_t to_byte(double v) {
    return static_cast<std::uint8_t>(std::lround(std::clamp(v, 0.0, 1.0) * 255.0));
}

void write_ppm(const Image& image, const std::filesystem::path& path) {
    if (image.channels != 3) throw std::invalid_argument("write_ppm: image must have 3 channels");
    std::ofstream out(path, std::ios::binary);
    if (!out) throw std::runtime_error("cannot write " + path.string());
    out << "P6\n" << image.width << ' ' << image.height << "\n255\n";
    std::vector<char> row(image.width * 3);
    for (std::size_t y = 0; y < image.height; ++y) {
        for (std::size_t x = 0; x < image.width; ++x) {
            for (std::size_t c = 0; c < 3; ++c) row[x * 3 + c] = static_cast<char>(to_byte(image.at(c, y, x)));
        }
        out.write(row.data(), static_cast<std::streamsize>(row.size()));
    }
    if (!out) throw std::runtime_error("write failed for " + path.string());
}

Image read_ppm(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::runtime_error("cannot open " + path.string());
    const auto h = read_header(in, "P6", path);
    std::vector<unsigned char> raw(h.width * h.height * 3);
    in.read(reinterpret_cast<char*>(raw.data()), static_cast<std::streamsize>(raw.size()));
    if (in.gcount() != static_cast<std::streamsize>(raw.size())) throw std::runtime_error(path.string() + ": truncated");
    Image img(3, h.height, h.width);
    for (std::size_t y = 0; y < h.height; ++y) {
        for (std::size_t x = 0; x < h.width; ++x) {
            for (std::size_t c = 0; c < 3; ++c) img.at(c, y, x) = raw[(y * h.width + x) * 3 + c] / 255.0;
        }
    }
    return img;
}

void write_pgm(const GrayImage& image, const std::filesystem::path& path) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw std::runtime_error("cannot write " + path.string());
    out << "P5\n" << image.width << ' ' << image.height << "\n255\n";
    out.write(reinterpret_cast<const char*>(image.pixels.data()), static_cast<std::streamsize>(image.pixels.size()));
    if (!out) throw std::runtime_error("write failed for " + path.string());
}

GrayImage read_pgm(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::runtime_error("cannot open " + path.string());
    const auto h = read_header(in, "P5", path);
    GrayImage img{h.height, h.width, std::vector<std::uint8_t>(h.width * h.height)};
    in.read(reinterpret_cast<char*>(img.pixels.data()), static_cast<std::streamsize>(img.pixels.size()));
    if (in.gcount() != static_cast<std::streamsize>(img.pixels.size())) {
        throw std::runtime_error(path.string() + ": truncated");
    }
    return img;
}

} // namespace explicd
