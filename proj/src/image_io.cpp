#include <png.h>

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <memory>

#include "pcstyle/error.hpp"
#include "pcstyle/image.hpp"

namespace pcstyle {

Tensor Image::to_tensor() const {
    Tensor t({3, height, width});
    const std::size_t plane = static_cast<std::size_t>(height) * width;
    for (std::size_t i = 0; i < plane; ++i)
        for (int c = 0; c < 3; ++c) t[static_cast<std::size_t>(c) * plane + i] = rgb[i * 3 + c];
    return t;
}

Image Image::from_tensor(const Tensor& chw) {
    if (chw.rank() != 3 || chw.dim(0) != 3) {
        throw Error(ErrorCode::ShapeMismatch, "Image::from_tensor expects [3,H,W], got " + shape_string(chw.shape()));
    }
    Image img(chw.dim(1), chw.dim(2));
    const std::size_t plane = static_cast<std::size_t>(img.height) * img.width;
    for (std::size_t i = 0; i < plane; ++i)
        for (int c = 0; c < 3; ++c)
            img.rgb[i * 3 + c] = static_cast<float>(std::clamp(chw[static_cast<std::size_t>(c) * plane + i], 0.0, 1.0));
    return img;
}

namespace {

struct FileCloser {
    void operator()(std::FILE* f) const {
        if (f) std::fclose(f);
    }
};
using FilePtr = std::unique_ptr<std::FILE, FileCloser>;

}  // namespace

Image read_png(const std::filesystem::path& path) {
    FilePtr file(std::fopen(path.c_str(), "rb"));
    if (!file) throw Error(ErrorCode::Load, "cannot open " + path.string());
    png_structp png = png_create_read_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
    png_infop info = png ? png_create_info_struct(png) : nullptr;
    if (!png || !info) {
        png_destroy_read_struct(&png, &info, nullptr);
        throw Error(ErrorCode::Load, "libpng init failed for " + path.string());
    }
    if (setjmp(png_jmpbuf(png))) {
        png_destroy_read_struct(&png, &info, nullptr);
        throw Error(ErrorCode::Load, "malformed PNG " + path.string());
    }
    png_init_io(png, file.get());
    png_read_info(png, info);
    png_set_strip_16(png);
    png_set_palette_to_rgb(png);
    png_set_expand_gray_1_2_4_to_8(png);
    png_set_gray_to_rgb(png);
    png_set_strip_alpha(png);
    png_read_update_info(png, info);
    const int w = static_cast<int>(png_get_image_width(png, info));
    const int h = static_cast<int>(png_get_image_height(png, info));
    std::vector<unsigned char> raw(static_cast<std::size_t>(w) * h * 3);
    std::vector<png_bytep> rows(static_cast<std::size_t>(h));
    for (int y = 0; y < h; ++y) rows[static_cast<std::size_t>(y)] = raw.data() + static_cast<std::size_t>(y) * w * 3;
    png_read_image(png, rows.data());
    png_destroy_read_struct(&png, &info, nullptr);

    Image img(h, w);
    for (std::size_t i = 0; i < raw.size(); ++i) img.rgb[i] = static_cast<float>(raw[i]) / 255.0f;
    return img;
}

void write_png(const std::filesystem::path& path, const Image& image) {
    FilePtr file(std::fopen(path.c_str(), "wb"));
    if (!file) throw Error(ErrorCode::Io, "cannot write " + path.string());
    png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
    png_infop info = png ? png_create_info_struct(png) : nullptr;
    if (!png || !info) {
        png_destroy_write_struct(&png, &info);
        throw Error(ErrorCode::Io, "libpng init failed for " + path.string());
    }
    std::vector<unsigned char> raw(image.rgb.size());
    for (std::size_t i = 0; i < raw.size(); ++i) {
        raw[i] = static_cast<unsigned char>(std::lround(std::clamp(image.rgb[i], 0.0f, 1.0f) * 255.0f));
    }
    std::vector<png_bytep> rows(static_cast<std::size_t>(image.height));
    for (int y = 0; y < image.height; ++y) rows[static_cast<std::size_t>(y)] = raw.data() + static_cast<std::size_t>(y) * image.width * 3;
    if (setjmp(png_jmpbuf(png))) {
        png_destroy_write_struct(&png, &info);
        throw Error(ErrorCode::Io, "PNG encode failed for " + path.string());
    }
    png_init_io(png, file.get());
    png_set_IHDR(png, info, static_cast<png_uint_32>(image.width), static_cast<png_uint_32>(image.height), 8,
                 PNG_COLOR_TYPE_RGB, PNG_INTERLACE_NONE, PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
    png_write_info(png, info);
    png_write_image(png, rows.data());
    png_write_end(png, nullptr);
    png_destroy_write_struct(&png, &info);
}

namespace {

constexpr std::array<char, 4> kDepthMagic{'D', 'P', 'T', 'H'};

void put_u16(std::ostream& out, std::uint16_t v) {
    const unsigned char b[2] = {static_cast<unsigned char>(v & 0xff), static_cast<unsigned char>(v >> 8)};
    out.write(reinterpret_cast<const char*>(b), 2);
}

std::uint16_t get_u16(std::istream& in) {
    unsigned char b[2] = {0, 0};
    in.read(reinterpret_cast<char*>(b), 2);
    return static_cast<std::uint16_t>(b[0] | (b[1] << 8));
}

}  // namespace

DepthMap read_depth(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw Error(ErrorCode::Load, "cannot open " + path.string());
    std::array<char, 4> magic{};
    in.read(magic.data(), 4);
    if (!in || magic != kDepthMagic) throw Error(ErrorCode::Load, "bad depth magic in " + path.string());
    const int h = get_u16(in);
    const int w = get_u16(in);
    DepthMap depth(h, w);
    static_assert(sizeof(float) == 4);
    for (float& v : depth.values) {
        unsigned char b[4];
        in.read(reinterpret_cast<char*>(b), 4);
        const std::uint32_t bits = b[0] | (b[1] << 8) | (b[2] << 16) | (static_cast<std::uint32_t>(b[3]) << 24);
        std::memcpy(&v, &bits, 4);
    }
    if (!in) throw Error(ErrorCode::Load, "truncated depth file " + path.string());
    return depth;
}

void write_depth(const std::filesystem::path& path, const DepthMap& depth) {
    if (depth.height > 0xffff || depth.width > 0xffff) throw Error(ErrorCode::Size, "depth map too large for u16 header");
    std::ofstream out(path, std::ios::binary);
    if (!out) throw Error(ErrorCode::Io, "cannot write " + path.string());
    out.write(kDepthMagic.data(), 4);
    put_u16(out, static_cast<std::uint16_t>(depth.height));
    put_u16(out, static_cast<std::uint16_t>(depth.width));
    for (float v : depth.values) {
        std::uint32_t bits;
        std::memcpy(&bits, &v, 4);
        const unsigned char b[4] = {static_cast<unsigned char>(bits), static_cast<unsigned char>(bits >> 8),
                                    static_cast<unsigned char>(bits >> 16), static_cast<unsigned char>(bits >> 24)};
        out.write(reinterpret_cast<const char*>(b), 4);
    }
    if (!out) throw Error(ErrorCode::Io, "failed writing " + path.string());
}

}  // namespace pcstyle
