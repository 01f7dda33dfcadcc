#pragma once

// Little-endian binary reading and writing with byte-offset diagnostics.

#include <algorithm>
#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace gspull::io {

class FormatError : public std::runtime_error {
public:
    FormatError(const std::string& what, std::uint64_t offset)
        : std::runtime_error(what + " (at byte offset " + std::to_string(offset) + ")"), offset_(offset) {}
    std::uint64_t offset() const { return offset_; }

private:
    std::uint64_t offset_;
};

template <typename T>
void to_little(T& v) {
    if constexpr (std::endian::native == std::endian::big) {
        auto* b = reinterpret_cast<unsigned char*>(&v);
        std::reverse(b, b + sizeof(T));
    }
}

class Writer {
public:
    void bytes(const void* p, std::size_t n) {
        const auto* c = static_cast<const unsigned char*>(p);
        buf_.insert(buf_.end(), c, c + n);
    }
    template <typename T>
    void put(T v) {
        to_little(v);
        bytes(&v, sizeof(T));
    }
    void f64(double v) { put(v); }
    void u32(std::uint32_t v) { put(v); }
    void u64(std::uint64_t v) { put(v); }
    void magic(const char (&m)[9]) { bytes(m, 8); }

    const std::vector<unsigned char>& data() const { return buf_; }

    void save(const std::filesystem::path& path) const {
        std::ofstream out(path, std::ios::binary | std::ios::trunc);
        if (!out) throw std::runtime_error("cannot open for writing: " + path.string());
        out.write(reinterpret_cast<const char*>(buf_.data()), static_cast<std::streamsize>(buf_.size()));
        if (!out) throw std::runtime_error("write failed: " + path.string());
    }

private:
    std::vector<unsigned char> buf_;
};

class Reader {
public:
    explicit Reader(std::vector<unsigned char> data) : buf_(std::move(data)) {}

    static Reader open(const std::filesystem::path& path) {
        std::ifstream in(path, std::ios::binary);
        if (!in) throw std::runtime_error("cannot open for reading: " + path.string());
        std::vector<unsigned char> data((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
        return Reader(std::move(data));
    }

    void bytes(void* p, std::size_t n, const char* what) {
        if (buf_.size() - pos_ < n)
            throw FormatError(std::string("truncated file while reading ") + what, pos_);
        std::memcpy(p, buf_.data() + pos_, n);
        pos_ += n;
    }
    template <typename T>
    T get(const char* what) {
        T v;
        bytes(&v, sizeof(T), what);
        to_little(v);
        return v;
    }
    double f64(const char* what) { return get<double>(what); }
    std::uint32_t u32(const char* what) { return get<std::uint32_t>(what); }
    std::uint64_t u64(const char* what) { return get<std::uint64_t>(what); }
    void expect_magic(const char (&m)[9]) {
        char got[8];
        const std::uint64_t at = pos_;
        bytes(got, 8, "magic");
        if (std::memcmp(got, m, 8) != 0) throw FormatError(std::string("bad magic, expected ") + m, at);
    }
    void expect_end() const {
        if (pos_ != buf_.size()) throw FormatError("trailing bytes after payload", pos_);
    }

    std::uint64_t offset() const { return pos_; }
    std::uint64_t remaining() const { return buf_.size() - pos_; }

private:
    std::vector<unsigned char> buf_;
    std::size_t pos_ = 0;
};

} // namespace gspull::io
