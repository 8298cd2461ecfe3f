#pragma once

#include <filesystem>
#include <vector>

#include "pcstyle/tensor.hpp"

namespace pcstyle {

/// Interleaved RGB in [0, 1], row-major.
struct Image {
    int height = 0;
    int width = 0;
    std::vector<float> rgb;

    Image() = default;
    Image(int h, int w, float fill = 0.0f) : height(h), width(w), rgb(static_cast<std::size_t>(h) * w * 3, fill) {}

    float& at(int y, int x, int c) { return rgb[(static_cast<std::size_t>(y) * width + x) * 3 + c]; }
    [[nodiscard]] float at(int y, int x, int c) const { return rgb[(static_cast<std::size_t>(y) * width + x) * 3 + c]; }
    [[nodiscard]] bool empty() const noexcept { return rgb.empty(); }

    /// Channel-first [3, H, W].
    [[nodiscard]] Tensor to_tensor() const;
    /// Accepts [3, H, W]; values are clamped to [0, 1].
    static Image from_tensor(const Tensor& chw);

    friend bool operator==(const Image&, const Image&) = default;
};

/// Scene-unit depth per pixel; 0 marks an invalid sample.
struct DepthMap {
    int height = 0;
    int width = 0;
    std::vector<float> values;

    DepthMap() = default;
    DepthMap(int h, int w, float fill = 0.0f) : height(h), width(w), values(static_cast<std::size_t>(h) * w, fill) {}

    float& at(int y, int x) { return values[static_cast<std::size_t>(y) * width + x]; }
    [[nodiscard]] float at(int y, int x) const { return values[static_cast<std::size_t>(y) * width + x]; }
    [[nodiscard]] bool empty() const noexcept { return values.empty(); }

    friend bool operator==(const DepthMap&, const DepthMap&) = default;
};

Image read_png(const std::filesystem::path& path);
void write_png(const std::filesystem::path& path, const Image& image);

/// Binary depth container: "DPTH", u16 height, u16 width (little-endian), then f32 row-major.
DepthMap read_depth(const std::filesystem::path& path);
void write_depth(const std::filesystem::path& path, const DepthMap& depth);

}  // namespace pcstyle
