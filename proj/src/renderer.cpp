#include "pcstyle/renderer.hpp"

#include <algorithm>
#include <cmath>
#include <random>

#include "json.hpp"
#include "pcstyle/error.hpp"

namespace pcstyle {

void SplatConfig::validate() const {
    if (K < 1) throw Error(ErrorCode::Config, "splat K must be >= 1");
    if (!(radius >= 0.5)) throw Error(ErrorCode::Config, "splat radius must be >= 0.5");
    if (!std::isfinite(blend) || blend < 0.0) throw Error(ErrorCode::Config, "splat blend exponent must be >= 0");
    if (stride < 1) throw Error(ErrorCode::Config, "splat stride must be >= 1");
}

SplatPlan build_splat_plan(const Tensor& positions, const CameraView& view, const SplatConfig& config) {
    config.validate();
    if (positions.rank() != 2 || positions.dim(1) != 3) throw Error(ErrorCode::ShapeMismatch, "positions must be [N, 3]");
    const CameraIntrinsics k = view.intrinsics.downscaled(config.stride);
    const int h = k.height, w = k.width;
    const int n = positions.dim(0);

    struct Hit {
        double z;
        int index;
        double weight;
    };
    std::vector<std::vector<Hit>> pixels(static_cast<std::size_t>(h) * w);
    const Eigen::Matrix3d& R = view.pose.rotation;
    const Eigen::Vector3d& t = view.pose.translation;
    const double r = config.radius;
    int in_front = 0;
    for (int i = 0; i < n; ++i) {
        const Eigen::Vector3d p(positions.at(i, 0), positions.at(i, 1), positions.at(i, 2));
        const Eigen::Vector3d c = R * p + t;
        if (c.z() <= kDepthEpsilon) continue;
        ++in_front;
        const double u = k.fx * c.x() / c.z() + k.cx;
        const double v = k.fy * c.y() / c.z() + k.cy;
        const int x0 = std::max(0, static_cast<int>(std::ceil(u - r)));
        const int x1 = std::min(w - 1, static_cast<int>(std::floor(u + r)));
        const int y0 = std::max(0, static_cast<int>(std::ceil(v - r)));
        const int y1 = std::min(h - 1, static_cast<int>(std::floor(v + r)));
        for (int y = y0; y <= y1; ++y) {
            for (int x = x0; x <= x1; ++x) {
                const double dist = std::hypot(x - u, y - v);
                if (dist >= r) continue;
                pixels[static_cast<std::size_t>(y) * w + x].push_back({c.z(), i, 1.0 - dist / r});
            }
        }
    }
    if (in_front == 0) throw Error(ErrorCode::EmptyRender, "no point lies in front of the camera");

    SplatPlan plan;
    plan.blend.height = h;
    plan.blend.width = w;
    plan.blend.offset.reserve(pixels.size() + 1);
    plan.blend.offset.push_back(0);
    plan.mask = Tensor({1, h, w}, 0.0);
    for (std::size_t p = 0; p < pixels.size(); ++p) {
        auto& hits = pixels[p];
        const std::size_t keep = std::min(hits.size(), static_cast<std::size_t>(config.K));
        std::partial_sort(hits.begin(), hits.begin() + static_cast<std::ptrdiff_t>(keep), hits.end(),
                          [](const Hit& a, const Hit& b) { return a.z < b.z || (a.z == b.z && a.index < b.index); });
        double total = 0.0;
        for (std::size_t j = 0; j < keep; ++j) {
            hits[j].weight *= std::pow(1.0 / hits[j].z, config.blend);
            total += hits[j].weight;
        }
        for (std::size_t j = 0; j < keep; ++j) {
            plan.blend.index.push_back(hits[j].index);
            plan.blend.weight.push_back(hits[j].weight / total);
        }
        plan.blend.offset.push_back(static_cast<int>(plan.blend.index.size()));
        if (keep > 0) {
            plan.mask[p] = 1.0;
            ++plan.covered;
        }
    }
    return plan;
}

ad::Var splat(const ad::Var& features, const SplatPlan& plan) { return ad::sparse_blend(features, plan.blend); }

SplatImage splat(const FeaturePointCloud& cloud, const CameraView& view, const SplatConfig& config) {
    if (cloud.size() == 0) throw Error(ErrorCode::EmptyCloud, "cannot splat an empty cloud");
    const SplatPlan plan = build_splat_plan(cloud.positions, view, config);
    return {splat(ad::constant(cloud.features), plan).value(), plan.mask};
}

// ---------------------------------------------------------------------------
// Decoder

namespace {

enum Layer : std::size_t {
    kEnc0a, kEnc0b, kDown1, kDown2, kBottleneck, kUp1, kMerge1, kUp2, kMerge2, kHead, kOut, kLayers
};

}  // namespace

void DecoderConfig::validate() const {
    if (in_channels < 1 || head < 1 || upsample < 1) throw Error(ErrorCode::Config, "decoder sizes must be positive");
    for (int c : widths)
        if (c < 1) throw Error(ErrorCode::Config, "decoder widths must be positive");
}

Decoder Decoder::init(const DecoderConfig& config, std::uint64_t seed) {
    config.validate();
    std::mt19937_64 rng(seed);
    const auto [c1, c2, c3] = config.widths;
    Decoder d;
    d.config_ = config;
    auto conv = [&](const char* name, int in, int out) {
        d.params_.emplace_back(std::string(name) + ".w",
                               ad::Var::parameter(normal_tensor({out, in, 3, 3}, std::sqrt(2.0 / (9.0 * in)), rng)));
        d.params_.emplace_back(std::string(name) + ".b", ad::Var::parameter(Tensor({out}, 0.0)));
    };
    auto convt = [&](const char* name, int in, int out) {
        d.params_.emplace_back(std::string(name) + ".w",
                               ad::Var::parameter(normal_tensor({in, out, 3, 3}, std::sqrt(2.0 / (9.0 * in)), rng)));
        d.params_.emplace_back(std::string(name) + ".b", ad::Var::parameter(Tensor({out}, 0.0)));
    };
    conv("enc0a", config.in_channels + 1, c1);
    conv("enc0b", c1, c1);
    conv("down1", c1, c2);
    conv("down2", c2, c3);
    conv("bottleneck", c3, c3);
    convt("up1", c3, c2);
    conv("merge1", 2 * c2, c2);
    convt("up2", c2, c1);
    conv("merge2", 2 * c1, c1);
    conv("head", c1, config.head);
    conv("out", config.head, 3);
    return d;
}

void Decoder::set_requires_grad(bool on) const {
    for (const auto& [name, var] : params_) {
        ad::Var v = var;
        v.set_requires_grad(on);
    }
}

ad::Var Decoder::forward(const ad::Var& features, const ad::Var& mask) const {
    if (features.value().rank() != 3 || features.shape()[0] != config_.in_channels) {
        throw Error(ErrorCode::ShapeMismatch, "decoder expects [" + std::to_string(config_.in_channels) +
                                                  ", h, w] features, got " + shape_string(features.shape()));
    }
    const int h = features.shape()[1], w = features.shape()[2];
    if (mask.shape() != Shape{1, h, w}) throw Error(ErrorCode::ShapeMismatch, "decoder mask must be [1, h, w]");
    if (h % 4 != 0 || w % 4 != 0) {
        throw Error(ErrorCode::Size, "decoder feature grid must be a multiple of 4, got " + std::to_string(h) + "x" + std::to_string(w));
    }
    auto conv = [&](Layer l, const ad::Var& x) {
        return ad::relu(ad::conv2d(x, param(2 * l), param(2 * l + 1), 1, 1));
    };
    auto up = [&](Layer l, const ad::Var& x) {
        return ad::relu(ad::conv_transpose2d(x, param(2 * l), param(2 * l + 1), 2, 1, 1));
    };
    const ad::Var s0 = conv(kEnc0b, conv(kEnc0a, ad::concat_channels(features, mask)));
    const ad::Var s1 = conv(kDown1, ad::avg_pool2(s0));
    const ad::Var s2 = conv(kBottleneck, conv(kDown2, ad::avg_pool2(s1)));
    const ad::Var u1 = conv(kMerge1, ad::concat_channels(up(kUp1, s2), s1));
    const ad::Var u2 = conv(kMerge2, ad::concat_channels(up(kUp2, u1), s0));
    const int s = config_.upsample;
    const ad::Var big = s == 1 ? u2 : ad::resample(u2, ad::bilinear_resize_map(h, w, h * s, w * s));
    const ad::Var head = conv(kHead, big);
    return ad::sigmoid(ad::conv2d(head, param(2 * kOut), param(2 * kOut + 1), 1, 1));
}

void Decoder::store(Archive& archive, const std::string& prefix) const {
    const nlohmann::json cfg = {{"in_channels", config_.in_channels},
                                {"widths", config_.widths},
                                {"head", config_.head},
                                {"upsample", config_.upsample}};
    archive.put_string(prefix + "config", cfg.dump());
    store_params(archive, prefix, params_);
}

Decoder Decoder::restore(const Archive& archive, const std::string& prefix) {
    if (!archive.has_string(prefix + "config")) throw Error(ErrorCode::Load, "archive holds no decoder");
    DecoderConfig config;
    try {
        const auto j = nlohmann::json::parse(archive.string(prefix + "config"));
        config.in_channels = j.at("in_channels").get<int>();
        config.widths = j.at("widths").get<std::array<int, 3>>();
        config.head = j.at("head").get<int>();
        config.upsample = j.at("upsample").get<int>();
    } catch (const nlohmann::json::exception& e) {
        throw Error(ErrorCode::Load, std::string("bad decoder config: ") + e.what());
    }
    Decoder d = init(config, 0);
    load_params(archive, prefix, d.params_);
    return d;
}

Image decode(const Tensor& features, const Tensor& mask, const Decoder& decoder) {
    return Image::from_tensor(decoder.forward(ad::constant(features), ad::constant(mask)).value());
}

ad::Var render(const ad::Var& features, const SplatPlan& plan, const Decoder& decoder) {
    return decoder.forward(splat(features, plan), ad::constant(plan.mask));
}

Image render_view(const FeaturePointCloud& cloud, const CameraView& view, const SplatConfig& config,
                  const Decoder& decoder) {
    if (cloud.size() == 0) throw Error(ErrorCode::EmptyCloud, "cannot render an empty cloud");
    const SplatPlan plan = build_splat_plan(cloud.positions, view, config);
    return Image::from_tensor(render(ad::constant(cloud.features), plan, decoder).value());
}

}  // namespace pcstyle
