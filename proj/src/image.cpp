#include "gspull/image.hpp"

#include <png.h>

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <memory>
#include <sstream>
#include <stdexcept>
#include <vector>

namespace gspull {

Image::Image(int w, int h, const Vec3& fill) : width(w), height(h), pixels(static_cast<Index>(w) * h, 3) {
    if (w < 0 || h < 0) throw std::invalid_argument("Image: negative dimensions");
    pixels.rowwise() = fill.transpose();
}

namespace {

unsigned char to_byte(Real v) {
    const Real c = std::clamp(v, Real(0), Real(1));
    return static_cast<unsigned char>(std::lround(c * Real(255)));
}

std::string ext_of(const std::filesystem::path& p) {
    std::string e = p.extension().string();
    std::transform(e.begin(), e.end(), e.begin(), [](unsigned char c) { return static_cast<char>(std::tolower(c)); });
    return e;
}

struct FileCloser {
    void operator()(std::FILE* f) const {
        if (f) std::fclose(f);
    }
};

} // namespace

Image Image::quantized() const {
    Image out = *this;
    for (Index i = 0; i < out.pixels.size(); ++i)
        out.pixels.data()[i] = static_cast<Real>(to_byte(out.pixels.data()[i])) / Real(255);
    return out;
}

void write_png(const Image& img, const std::filesystem::path& path) {
    std::unique_ptr<std::FILE, FileCloser> fp(std::fopen(path.string().c_str(), "wb"));
    if (!fp) throw std::runtime_error("cannot open for writing: " + path.string());
    png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
    if (!png) throw std::runtime_error("libpng: cannot create write struct");
    png_infop info = png_create_info_struct(png);
    if (!info || setjmp(png_jmpbuf(png))) {
        png_destroy_write_struct(&png, &info);
        throw std::runtime_error("libpng: failed writing " + path.string());
    }
    png_init_io(png, fp.get());
    png_set_IHDR(png, info, static_cast<png_uint_32>(img.width), static_cast<png_uint_32>(img.height), 8,
                 PNG_COLOR_TYPE_RGB, PNG_INTERLACE_NONE, PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
    png_write_info(png, info);
    std::vector<unsigned char> row(static_cast<std::size_t>(img.width) * 3);
    for (int y = 0; y < img.height; ++y) {
        for (int x = 0; x < img.width; ++x)
            for (int c = 0; c < 3; ++c) row[static_cast<std::size_t>(x) * 3 + c] = to_byte(img.pixels(img.index(x, y), c));
        png_write_row(png, row.data());
    }
    png_write_end(png, nullptr);
    png_destroy_write_struct(&png, &info);
}

Image read_png(const std::filesystem::path& path) {
    std::unique_ptr<std::FILE, FileCloser> fp(std::fopen(path.string().c_str(), "rb"));
    if (!fp) throw std::runtime_error("cannot open for reading: " + path.string());
    unsigned char sig[8];
    if (std::fread(sig, 1, 8, fp.get()) != 8 || png_sig_cmp(sig, 0, 8) != 0)
        throw std::runtime_error("not a PNG file: " + path.string());
    png_structp png = png_create_read_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
    if (!png) throw std::runtime_error("libpng: cannot create read struct");
    png_infop info = png_create_info_struct(png);
    if (!info || setjmp(png_jmpbuf(png))) {
        png_destroy_read_struct(&png, &info, nullptr);
        throw std::runtime_error("libpng: failed reading " + path.string());
    }
    png_init_io(png, fp.get());
    png_set_sig_bytes(png, 8);
    png_read_info(png, info);
    const auto w = static_cast<int>(png_get_image_width(png, info));
    const auto h = static_cast<int>(png_get_image_height(png, info));
    const int type = png_get_color_type(png, info);
    if (png_get_bit_depth(png, info) == 16) png_set_strip_16(png);
    if (type == PNG_COLOR_TYPE_PALETTE) png_set_palette_to_rgb(png);
    if (type == PNG_COLOR_TYPE_GRAY || type == PNG_COLOR_TYPE_GRAY_ALPHA) png_set_gray_to_rgb(png);
    if (type == PNG_COLOR_TYPE_GRAY && png_get_bit_depth(png, info) < 8) png_set_expand_gray_1_2_4_to_8(png);
    png_set_strip_alpha(png);
    png_read_update_info(png, info);
    if (png_get_channels(png, info) != 3) {
        png_destroy_read_struct(&png, &info, nullptr);
        throw std::runtime_error("unsupported PNG channel layout: " + path.string());
    }
    Image img(w, h);
    std::vector<unsigned char> row(png_get_rowbytes(png, info));
    for (int y = 0; y < h; ++y) {
        png_read_row(png, row.data(), nullptr);
        for (int x = 0; x < w; ++x)
            for (int c = 0; c < 3; ++c)
                img.pixels(img.index(x, y), c) = static_cast<Real>(row[static_cast<std::size_t>(x) * 3 + c]) / Real(255);
    }
    png_read_end(png, nullptr);
    png_destroy_read_struct(&png, &info, nullptr);
    return img;
}

void write_ppm(const Image& img, const std::filesystem::path& path) {
    std::ofstream out(path);
    if (!out) throw std::runtime_error("cannot open for writing: " + path.string());
    out << "P3\n" << img.width << ' ' << img.height << "\n255\n";
    for (int y = 0; y < img.height; ++y) {
        for (int x = 0; x < img.width; ++x) {
            for (int c = 0; c < 3; ++c) out << static_cast<int>(to_byte(img.pixels(img.index(x, y), c))) << (c < 2 ? ' ' : '\n');
        }
    }
    if (!out) throw std::runtime_error("write failed: " + path.string());
}

Image read_ppm(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::runtime_error("cannot open for reading: " + path.string());
    auto next_token = [&]() {
        std::string tok;
        char ch;
        while (in.get(ch)) {
            if (ch == '#') {
                std::string skip;
                std::getline(in, skip);
                continue;
            }
            if (std::isspace(static_cast<unsigned char>(ch))) {
                if (!tok.empty()) break;
                continue;
            }
            tok.push_back(ch);
        }
        return tok;
    };
    const std::string magic = next_token();
    if (magic != "P3" && magic != "P6") throw std::runtime_error("not a PPM file: " + path.string());
    int w = 0, h = 0, maxval = 0;
    try {
        w = std::stoi(next_token());
        h = std::stoi(next_token());
        maxval = std::stoi(next_token());
    } catch (const std::exception&) {
        throw std::runtime_error("malformed PPM header: " + path.string());
    }
    if (w <= 0 || h <= 0 || maxval <= 0 || maxval > 255) throw std::runtime_error("unsupported PPM header: " + path.string());
    Image img(w, h);
    for (Index i = 0; i < img.pixels.size(); ++i) {
        int v = 0;
        if (magic == "P3") {
            const std::string tok = next_token();
            if (tok.empty()) throw std::runtime_error("truncated PPM: " + path.string());
            v = std::stoi(tok);
        } else {
            char ch;
            if (!in.get(ch)) throw std::runtime_error("truncated PPM: " + path.string());
            v = static_cast<unsigned char>(ch);
        }
        img.pixels.data()[i] = static_cast<Real>(v) / static_cast<Real>(maxval);
    }
    return img;
}

void write_image(const Image& img, const std::filesystem::path& path) {
    const std::string e = ext_of(path);
    if (e == ".png") return write_png(img, path);
    if (e == ".ppm") return write_ppm(img, path);
    throw std::invalid_argument("unknown image format: " + path.string());
}

Image read_image(const std::filesystem::path& path) {
    const std::string e = ext_of(path);
    if (e == ".png") return read_png(path);
    if (e == ".ppm") return read_ppm(path);
    throw std::invalid_argument("unknown image format: " + path.string());
}

} // namespace gspull
