#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

namespace explicd {

/// Planar (channel-major) image with values in [0, 1].
struct Image {
    std::size_t channels = 0;
    std::size_t height = 0;
    std::size_t width = 0;
    std::vector<double> pixels;

    Image() = default;
    Image(std::size_t c, std::size_t h, std::size_t w) : channels(c), height(h), width(w), pixels(c * h * w, 0.0) {}

    double& at(std::size_t c, std::size_t y, std::size_t x) { return pixels[(c * height + y) * width + x]; }
    double at(std::size_t c, std::size_t y, std::size_t x) const { return pixels[(c * height + y) * width + x]; }

    bool operator==(const Image&) const = default;
};

/// 8-bit single-channel raster.
struct GrayImage {
    std::size_t height = 0;
    std::size_t width = 0;
    std::vector<std::uint8_t> pixels;

    bool operator==(const GrayImage&) const = default;
};

/// Rounds v in [0,1] to the nearest of 256 levels.
std::uint8_t to_byte(double v);

/// Binary PPM (P6). The image must have 3 channels.
void write_ppm(const Image& image, const std::filesystem::path& path);
Image read_ppm(const std::filesystem::path& path);

/// Binary PGM (P5).
void write_pgm(const GrayImage& image, const std::filesystem::path& path);
GrayImage read_pgm(const std::filesystem::path& path);

} // namespace explicd
