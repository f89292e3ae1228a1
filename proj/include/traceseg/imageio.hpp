#pragma once

// 8-bit grayscale image IO: binary PGM (P5) and a minimal PNG codec
// (8-bit grayscale, no interlacing) built on zlib. Pixel values map between
// float [0,1] and bytes by round-to-nearest at 255.

#include <zlib.h>

#include <algorithm>
#include <cctype>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <string>
#include <tuple>
#include <vector>

#include "traceseg/tensor.hpp"

namespace traceseg {

inline std::uint8_t to_byte(float v) {
    const float c = std::min(std::max(v, 0.0f), 1.0f);
    return static_cast<std::uint8_t>(std::lround(c * 255.0f));
}

namespace detail {

// Accepts [H,W] or [1,H,W]; returns (H, W, pointer to row-major floats).
template <typename T>
std::tuple<int, int, const T*> gray_view(const Tensor<T>& img) {
    if (img.rank() == 2) return {img.dim(0), img.dim(1), img.ptr()};
    if (img.rank() == 3 && img.dim(0) == 1) return {img.dim(1), img.dim(2), img.ptr()};
    throw ShapeError("grayscale IO expects [H,W] or [1,H,W], got " + shape_str(img.shape));
}

inline std::vector<std::uint8_t> read_file(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw DataError("cannot open image '" + path + "'");
    return std::vector<std::uint8_t>((std::istreambuf_iterator<char>(in)),
                                     std::istreambuf_iterator<char>());
}

}  // namespace detail

// ---------------------------------------------------------------------------
// PGM (P5, maxval 255)
// ---------------------------------------------------------------------------

template <typename T>
void save_pgm(const std::string& path, const Tensor<T>& img) {
    const auto [H, W, p] = detail::gray_view(img);
    std::ofstream out(path, std::ios::binary);
    if (!out) throw DataError("cannot open '" + path + "' for writing");
    out << "P5\n" << W << " " << H << "\n255\n";
    std::vector<std::uint8_t> row(static_cast<std::size_t>(W));
    for (int y = 0; y < H; ++y) {
        for (int x = 0; x < W; ++x)
            row[static_cast<std::size_t>(x)] =
                to_byte(static_cast<float>(p[static_cast<std::size_t>(y) * W + x]));
        out.write(reinterpret_cast<const char*>(row.data()), W);
    }
    if (!out) throw DataError("write failed for '" + path + "'");
}

inline Tensor<float> load_pgm(const std::string& path) {
    const auto bytes = detail::read_file(path);
    std::size_t pos = 0;
    auto next_token = [&]() -> std::string {
        // skip whitespace and '#' comments
        while (pos < bytes.size()) {
            if (bytes[pos] == '#') {
                while (pos < bytes.size() && bytes[pos] != '\n') ++pos;
            } else if (std::isspace(bytes[pos])) {
                ++pos;
            } else {
                break;
            }
        }
        std::string tok;
        while (pos < bytes.size() && !std::isspace(bytes[pos]) && bytes[pos] != '#')
            tok.push_back(static_cast<char>(bytes[pos++]));
        return tok;
    };
    if (next_token() != "P5") throw DataError("'" + path + "' is not a binary PGM (P5) file");
    int W, H, maxval;
    try {
        W = std::stoi(next_token());
        H = std::stoi(next_token());
        maxval = std::stoi(next_token());
    } catch (const std::exception&) {
        throw DataError("malformed PGM header in '" + path + "'");
    }
    if (W <= 0 || H <= 0) throw DataError("bad PGM dimensions in '" + path + "'");
    if (maxval != 255) throw DataError("PGM '" + path + "' is not 8-bit (maxval 255)");
    ++pos;  // single whitespace after maxval
    const std::size_t need = static_cast<std::size_t>(W) * H;
    if (bytes.size() - pos < need) throw DataError("PGM '" + path + "' is truncated");
    Tensor<float> img({H, W});
    for (std::size_t i = 0; i < need; ++i)
        img.ptr()[i] = static_cast<float>(bytes[pos + i]) / 255.0f;
    return img;
}

// ---------------------------------------------------------------------------
// PNG (8-bit grayscale)
// ---------------------------------------------------------------------------

namespace detail {

inline void be32(std::vector<std::uint8_t>& out, std::uint32_t v) {
    out.push_back(static_cast<std::uint8_t>(v >> 24));
    out.push_back(static_cast<std::uint8_t>(v >> 16));
    out.push_back(static_cast<std::uint8_t>(v >> 8));
    out.push_back(static_cast<std::uint8_t>(v));
}

inline std::uint32_t read_be32(const std::uint8_t* p) {
    return (static_cast<std::uint32_t>(p[0]) << 24) | (static_cast<std::uint32_t>(p[1]) << 16) |
           (static_cast<std::uint32_t>(p[2]) << 8) | p[3];
}

inline void png_chunk(std::vector<std::uint8_t>& out, const char type[4],
                      const std::vector<std::uint8_t>& data) {
    be32(out, static_cast<std::uint32_t>(data.size()));
    std::vector<std::uint8_t> body(type, type + 4);
    body.insert(body.end(), data.begin(), data.end());
    out.insert(out.end(), body.begin(), body.end());
    const auto crc = crc32(0L, body.data(), static_cast<uInt>(body.size()));
    be32(out, static_cast<std::uint32_t>(crc));
}

}  // namespace detail

template <typename T>
void save_png_gray(const std::string& path, const Tensor<T>& img) {
    const auto [H, W, p] = detail::gray_view(img);

    // filter byte 0 (None) before each scanline
    std::vector<std::uint8_t> raw(static_cast<std::size_t>(H) * (W + 1));
    for (int y = 0; y < H; ++y) {
        std::uint8_t* row = raw.data() + static_cast<std::size_t>(y) * (W + 1);
        row[0] = 0;
        for (int x = 0; x < W; ++x)
            row[1 + x] = to_byte(static_cast<float>(p[static_cast<std::size_t>(y) * W + x]));
    }
    uLongf comp_len = compressBound(static_cast<uLong>(raw.size()));
    std::vector<std::uint8_t> comp(comp_len);
    if (compress2(comp.data(), &comp_len, raw.data(), static_cast<uLong>(raw.size()), 6) != Z_OK)
        throw DataError("PNG compression failed for '" + path + "'");
    comp.resize(comp_len);

    std::vector<std::uint8_t> out{137, 80, 78, 71, 13, 10, 26, 10};
    std::vector<std::uint8_t> ihdr;
    detail::be32(ihdr, static_cast<std::uint32_t>(W));
    detail::be32(ihdr, static_cast<std::uint32_t>(H));
    ihdr.push_back(8);  // bit depth
    ihdr.push_back(0);  // color type: grayscale
    ihdr.push_back(0);  // compression
    ihdr.push_back(0);  // filter
    ihdr.push_back(0);  // interlace
    detail::png_chunk(out, "IHDR", ihdr);
    detail::png_chunk(out, "IDAT", comp);
    detail::png_chunk(out, "IEND", {});

    std::ofstream f(path, std::ios::binary);
    if (!f) throw DataError("cannot open '" + path + "' for writing");
    f.write(reinterpret_cast<const char*>(out.data()), static_cast<std::streamsize>(out.size()));
    if (!f) throw DataError("write failed for '" + path + "'");
}

inline Tensor<float> load_png_gray(const std::string& path) {
    const auto bytes = detail::read_file(path);
    static const std::uint8_t sig[8] = {137, 80, 78, 71, 13, 10, 26, 10};
    if (bytes.size() < 8 || std::memcmp(bytes.data(), sig, 8) != 0)
        throw DataError("'" + path + "' is not a PNG file");

    int W = 0, H = 0;
    bool saw_ihdr = false;
    std::vector<std::uint8_t> idat;
    std::size_t pos = 8;
    while (pos + 8 <= bytes.size()) {
        const std::uint32_t len = detail::read_be32(bytes.data() + pos);
        if (pos + 12 + len > bytes.size()) throw DataError("PNG '" + path + "' is truncated");
        const char* type = reinterpret_cast<const char*>(bytes.data() + pos + 4);
        const std::uint8_t* data = bytes.data() + pos + 8;
        if (std::memcmp(type, "IHDR", 4) == 0) {
            if (len != 13) throw DataError("PNG '" + path + "' has a malformed IHDR");
            W = static_cast<int>(detail::read_be32(data));
            H = static_cast<int>(detail::read_be32(data + 4));
            const int depth = data[8], color = data[9], interlace = data[12];
            if (depth != 8 || color != 0)
                throw DataError("PNG '" + path + "' is not 8-bit grayscale");
            if (interlace != 0) throw DataError("PNG '" + path + "' uses interlacing");
            saw_ihdr = true;
        } else if (std::memcmp(type, "IDAT", 4) == 0) {
            idat.insert(idat.end(), data, data + len);
        } else if (std::memcmp(type, "IEND", 4) == 0) {
            break;
        }
        pos += 12 + len;
    }
    if (!saw_ihdr || W <= 0 || H <= 0) throw DataError("PNG '" + path + "' is missing its header");
    if (idat.empty()) throw DataError("PNG '" + path + "' has no image data");

    const std::size_t stride = static_cast<std::size_t>(W) + 1;
    std::vector<std::uint8_t> raw(stride * H);
    uLongf raw_len = static_cast<uLongf>(raw.size());
    if (uncompress(raw.data(), &raw_len, idat.data(), static_cast<uLong>(idat.size())) != Z_OK ||
        raw_len != raw.size())
        throw DataError("PNG '" + path + "' has corrupt image data");

    // undo per-row filters (bytes-per-pixel = 1)
    auto paeth = [](int a, int b, int c) {
        const int q = a + b - c, pa = std::abs(q - a), pb = std::abs(q - b), pc = std::abs(q - c);
        if (pa <= pb && pa <= pc) return a;
        return pb <= pc ? b : c;
    };
    Tensor<float> img({H, W});
    std::vector<std::uint8_t> prev(static_cast<std::size_t>(W), 0), cur(static_cast<std::size_t>(W));
    for (int y = 0; y < H; ++y) {
        const std::uint8_t* row = raw.data() + static_cast<std::size_t>(y) * stride;
        const int filter = row[0];
        for (int x = 0; x < W; ++x) {
            const int v = row[1 + x];
            const int a = x > 0 ? cur[static_cast<std::size_t>(x - 1)] : 0;
            const int b = prev[static_cast<std::size_t>(x)];
            const int c = x > 0 ? prev[static_cast<std::size_t>(x - 1)] : 0;
            int r;
            switch (filter) {
                case 0: r = v; break;
                case 1: r = v + a; break;
                case 2: r = v + b; break;
                case 3: r = v + (a + b) / 2; break;
                case 4: r = v + paeth(a, b, c); break;
                default: throw DataError("PNG '" + path + "' uses an unknown filter type");
            }
            cur[static_cast<std::size_t>(x)] = static_cast<std::uint8_t>(r & 0xff);
        }
        for (int x = 0; x < W; ++x)
            img.at(y, x) = static_cast<float>(cur[static_cast<std::size_t>(x)]) / 255.0f;
        std::swap(prev, cur);
    }
    return img;
}

// ---------------------------------------------------------------------------
// Format dispatch by magic bytes.
// ---------------------------------------------------------------------------

inline Tensor<float> load_gray(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw DataError("cannot open image '" + path + "'");
    char head[2] = {0, 0};
    in.read(head, 2);
    in.close();
    if (head[0] == 'P' && head[1] == '5') return load_pgm(path);
    if (static_cast<unsigned char>(head[0]) == 137 && head[1] == 'P') return load_png_gray(path);
    throw DataError("'" + path + "' is neither a P5 PGM nor a PNG image");
}

}  // namespace traceseg
