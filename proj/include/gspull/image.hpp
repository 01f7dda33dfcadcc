#pragma once

#include "gspull/types.hpp"

#include <filesystem>

namespace gspull {

// Linear RGB in [0, 1]; pixel (x, y) is row y * width + x of `pixels`.
struct Image {
    int width = 0;
    int height = 0;
    Mat pixels = Mat(0, 3);

    Image() = default;
    Image(int w, int h, const Vec3& fill = Vec3::Zero());

    Index pixel_count() const { return static_cast<Index>(width) * height; }
    Index index(int x, int y) const { return static_cast<Index>(y) * width + x; }
    Vec3 at(int x, int y) const { return pixels.row(index(x, y)).transpose(); }
    void set(int x, int y, const Vec3& c) { pixels.row(index(x, y)) = c.transpose(); }
    bool same_size(const Image& o) const { return width == o.width && height == o.height; }

    // Rounds every channel to the nearest multiple of 1/255 after clamping to [0, 1].
    Image quantized() const;
};

// 8-bit RGB PNG. Reading accepts gray, gray+alpha, RGB and RGBA (alpha dropped).
void write_png(const Image& img, const std::filesystem::path& path);
Image read_png(const std::filesystem::path& path);

// ASCII (P3) PPM with maxval 255. Reading also accepts binary P6.
void write_ppm(const Image& img, const std::filesystem::path& path);
Image read_ppm(const std::filesystem::path& path);

// Dispatch on extension (.png, .ppm).
void write_image(const Image& img, const std::filesystem::path& path);
Image read_image(const std::filesystem::path& path);

} // namespace gspull
