#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <string>

#include "pcstyle/autodiff.hpp"
#include "pcstyle/feature_cloud.hpp"
#include "pcstyle/params.hpp"
#include "pcstyle/scene.hpp"

namespace pcstyle {

struct SplatConfig {
    int K = 8;
    double radius = 2.0;  // feature-grid pixels
    double blend = 1.0;   // exponent on 1/z in the blend weights
    int stride = 4;       // image pixels per feature-grid pixel

    void validate() const;
};

/// Per-view splat weights. Depends only on positions and camera, so it is computed
/// once and reused while features change.
struct SplatPlan {
    ad::BlendPlan blend;
    Tensor mask;  // [1, h, w], 1 where at least one point contributes
    int covered = 0;
};

/// Every point in front of the camera is projected with the feature-grid intrinsics and
/// touches the pixels closer than `radius` with weight 1 - dist / radius. Per pixel the
/// K nearest contributors (depth, then index) are kept and weighted by w (1/z)^blend,
/// normalised to sum 1. Throws EmptyRender when no point is in front of the camera.
SplatPlan build_splat_plan(const Tensor& positions, const CameraView& view, const SplatConfig& config);

/// [D, h, w] feature map.
ad::Var splat(const ad::Var& features, const SplatPlan& plan);

struct SplatImage {
    Tensor features;  // [D, h, w]
    Tensor mask;      // [1, h, w]
};
SplatImage splat(const FeaturePointCloud& cloud, const CameraView& view, const SplatConfig& config);

struct DecoderConfig {
    int in_channels = 256;                 // point feature width; the coverage mask is appended
    std::array<int, 3> widths{64, 96, 128};
    int head = 32;                         // channels of the full-resolution head
    int upsample = 4;

    void validate() const;
};

/// U-Net: two conv+avg-pool levels down, a bottleneck, two transposed-conv levels up with
/// skip connections, then bilinear upsampling to image resolution and a sigmoid head.
class Decoder {
public:
    static Decoder init(const DecoderConfig& config, std::uint64_t seed);

    [[nodiscard]] const DecoderConfig& config() const noexcept { return config_; }
    [[nodiscard]] const ParamList& parameters() const noexcept { return params_; }
    void set_requires_grad(bool on) const;

    /// features [D, h, w] and mask [1, h, w] -> RGB [3, h*upsample, w*upsample] in (0, 1).
    /// h and w must be multiples of 4.
    [[nodiscard]] ad::Var forward(const ad::Var& features, const ad::Var& mask) const;

    void store(Archive& archive, const std::string& prefix) const;
    static Decoder restore(const Archive& archive, const std::string& prefix);

private:
    [[nodiscard]] const ad::Var& param(std::size_t i) const { return params_[i].second; }

    DecoderConfig config_;
    ParamList params_;
};

Image decode(const Tensor& features, const Tensor& mask, const Decoder& decoder);

/// Differentiable splat + decode: [3, H, W].
ad::Var render(const ad::Var& features, const SplatPlan& plan, const Decoder& decoder);

Image render_view(const FeaturePointCloud& cloud, const CameraView& view, const SplatConfig& config,
                  const Decoder& decoder);

}  // namespace pcstyle
