#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "pcstyle/autodiff.hpp"
#include "pcstyle/scene.hpp"

namespace pcstyle {

struct EncoderConfig {
    std::array<int, 3> channels{64, 128, 256};
};

/// Three conv3x3 + ReLU blocks with strides 1, 2, 2 (total stride 4). Weights are
/// frozen: they come from a file or a seeded He initialisation.
class ImageEncoder {
public:
    static constexpr int kStride = 4;

    static ImageEncoder random(const EncoderConfig& config, std::uint64_t seed);
    static ImageEncoder load(const std::filesystem::path& path);
    void save(const std::filesystem::path& path) const;

    [[nodiscard]] int stride() const noexcept { return kStride; }
    [[nodiscard]] int channels() const noexcept { return config_.channels[2]; }
    [[nodiscard]] const EncoderConfig& config() const noexcept { return config_; }

    /// [C, ceil(H/4), ceil(W/4)] feature map of an RGB image.
    [[nodiscard]] Tensor encode(const Image& image) const;

    /// Differentiable forward returning the output of every block; input is [3, H, W].
    [[nodiscard]] std::array<ad::Var, 3> stages(const ad::Var& image) const;

private:
    EncoderConfig config_;
    std::array<ad::Var, 3> weights_;
    std::array<ad::Var, 3> biases_;
};

struct FeaturePointCloud {
    Tensor positions;                    // [N, 3]
    Tensor features;                     // [N, D]
    std::vector<std::uint32_t> source_view;
    std::optional<Tensor> colors;        // [N, 3]

    [[nodiscard]] int size() const { return positions.empty() ? 0 : positions.dim(0); }
    [[nodiscard]] int dim() const { return features.empty() ? 0 : features.dim(1); }
    void validate() const;
};

struct CloudBuildOptions {
    /// Voxel edge for multi-view merging; nullopt disables merging, 0 means extent / 256.
    std::optional<double> voxel = 0.0;
    /// Views to lift; empty means all.
    std::vector<int> views;
};

Tensor encode_image(const Image& image, const ImageEncoder& encoder);

FeaturePointCloud build_feature_cloud(const Scene& scene, const ImageEncoder& encoder,
                                      const CloudBuildOptions& options = {});

/// One point per occupied voxel: centroid position, mean feature/colour, source view of
/// the lowest-index member. Output is ordered by (ix, iy, iz).
FeaturePointCloud voxel_dedup(const FeaturePointCloud& cloud, double voxel);

/// Largest bounding-box edge divided by 256.
double default_voxel_size(const FeaturePointCloud& cloud);

/// "FPCL", u32 N, u32 D, u32 flags, then f32 positions, f32 features, u32 tags and
/// optional trailing sections (colours, style text) announced by flags.
struct CloudFileExtras {
    std::string style_text;  // non-empty marks a stylized cloud
};

void write_cloud(const std::filesystem::path& path, const FeaturePointCloud& cloud, const CloudFileExtras& extras = {});
FeaturePointCloud read_cloud(const std::filesystem::path& path, CloudFileExtras* extras = nullptr);

}  // namespace pcstyle
