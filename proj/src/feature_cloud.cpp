#include "pcstyle/feature_cloud.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <cstring>
#include <fstream>
#include <numeric>
#include <random>
#include <tuple>

#include "pcstyle/archive.hpp"
#include "pcstyle/error.hpp"

namespace pcstyle {

// ---------------------------------------------------------------------------
// Encoder

ImageEncoder ImageEncoder::random(const EncoderConfig& config, std::uint64_t seed) {
    for (int c : config.channels) {
        if (c < 1) throw Error(ErrorCode::Config, "encoder channels must be >= 1");
    }
    ImageEncoder enc;
    enc.config_ = config;
    std::mt19937_64 rng(seed);
    int in = 3;
    for (std::size_t i = 0; i < 3; ++i) {
        const int out = config.channels[i];
        std::normal_distribution<double> dist(0.0, std::sqrt(2.0 / (in * 9.0)));
        Tensor w({out, in, 3, 3});
        for (double& v : w.data()) v = dist(rng);
        enc.weights_[i] = ad::constant(std::move(w));
        enc.biases_[i] = ad::constant(Tensor({out}, 0.0));
        in = out;
    }
    return enc;
}

ImageEncoder ImageEncoder::load(const std::filesystem::path& path) {
    const Archive archive = read_archive(path);
    if (archive.kind != "encoder") throw Error(ErrorCode::Load, path.string() + " is not an encoder archive");
    ImageEncoder enc;
    int in = 3;
    for (std::size_t i = 0; i < 3; ++i) {
        const Tensor& w = archive.tensor("conv" + std::to_string(i) + ".weight");
        const Tensor& b = archive.tensor("conv" + std::to_string(i) + ".bias");
        if (w.rank() != 4 || w.dim(1) != in || w.dim(2) != 3 || w.dim(3) != 3 || b.shape() != Shape{w.dim(0)}) {
            throw Error(ErrorCode::Load, path.string() + ": encoder block " + std::to_string(i) + " has shape " +
                                             shape_string(w.shape()));
        }
        enc.config_.channels[i] = w.dim(0);
        enc.weights_[i] = ad::constant(w);
        enc.biases_[i] = ad::constant(b);
        in = w.dim(0);
    }
    return enc;
}

void ImageEncoder::save(const std::filesystem::path& path) const {
    Archive archive;
    archive.kind = "encoder";
    for (std::size_t i = 0; i < 3; ++i) {
        archive.put("conv" + std::to_string(i) + ".weight", weights_[i].value());
        archive.put("conv" + std::to_string(i) + ".bias", biases_[i].value());
    }
    write_archive(path, archive);
}

std::array<ad::Var, 3> ImageEncoder::stages(const ad::Var& image) const {
    if (image.value().rank() != 3 || image.shape()[0] != 3) {
        throw Error(ErrorCode::ShapeMismatch, "encoder input must be [3,H,W], got " + shape_string(image.shape()));
    }
    if (image.shape()[1] < kStride || image.shape()[2] < kStride) {
        throw Error(ErrorCode::Size, "image " + shape_string(image.shape()) + " is smaller than the encoder stride");
    }
    constexpr std::array<int, 3> strides{1, 2, 2};
    std::array<ad::Var, 3> out;
    ad::Var x = image;
    for (std::size_t i = 0; i < 3; ++i) {
        x = ad::relu(ad::conv2d(x, weights_[i], biases_[i], strides[i], 1));
        out[i] = x;
    }
    return out;
}

Tensor ImageEncoder::encode(const Image& image) const {
    if (image.height < kStride || image.width < kStride) {
        throw Error(ErrorCode::Size, "image " + std::to_string(image.height) + "x" + std::to_string(image.width) +
                                         " is smaller than the encoder stride");
    }
    return stages(ad::constant(image.to_tensor()))[2].value();
}

Tensor encode_image(const Image& image, const ImageEncoder& encoder) { return encoder.encode(image); }

// ---------------------------------------------------------------------------
// Cloud

void FeaturePointCloud::validate() const {
    const int n = size();
    if (n <= 0) throw Error(ErrorCode::EmptyCloud, "feature cloud has no points");
    if (positions.rank() != 2 || positions.dim(1) != 3) throw Error(ErrorCode::ShapeMismatch, "positions must be [N,3]");
    if (features.rank() != 2 || features.dim(0) != n) throw Error(ErrorCode::ShapeMismatch, "features must be [N,D]");
    if (source_view.size() != static_cast<std::size_t>(n)) throw Error(ErrorCode::ShapeMismatch, "one source tag per point");
    if (colors && colors->shape() != Shape{n, 3}) throw Error(ErrorCode::ShapeMismatch, "colors must be [N,3]");
    if (!positions.all_finite()) throw Error(ErrorCode::Numeric, "non-finite point position");
    if (!features.all_finite()) throw Error(ErrorCode::Numeric, "non-finite point feature");
}

FeaturePointCloud build_feature_cloud(const Scene& scene, const ImageEncoder& encoder, const CloudBuildOptions& options) {
    std::vector<int> views = options.views;
    if (views.empty()) {
        views.resize(scene.views.size());
        std::iota(views.begin(), views.end(), 0);
    }
    const int stride = encoder.stride();
    const int dim = encoder.channels();
    std::vector<double> pos, feat, col;
    std::vector<std::uint32_t> tags;

    for (int vi : views) {
        if (vi < 0 || static_cast<std::size_t>(vi) >= scene.views.size()) {
            throw Error(ErrorCode::Parameter, "view index " + std::to_string(vi) + " out of range");
        }
        const CameraView& view = scene.views[static_cast<std::size_t>(vi)];
        if (view.depth.empty() || view.image.empty()) throw Error(ErrorCode::Validation, "view without image or depth");
        const Tensor fmap = encoder.encode(view.image);
        const int gh = fmap.dim(1), gw = fmap.dim(2);
        for (int gy = 0; gy < gh; ++gy) {
            const int py = std::min(gy * stride + stride / 2, view.image.height - 1);
            for (int gx = 0; gx < gw; ++gx) {
                const int px = std::min(gx * stride + stride / 2, view.image.width - 1);
                const double d = view.depth.at(py, px);
                if (!(d > 0.0)) continue;
                const Eigen::Vector3d p = backproject_pixel(Eigen::Vector2d(px, py), d, view);
                pos.insert(pos.end(), {p.x(), p.y(), p.z()});
                for (int c = 0; c < dim; ++c) feat.push_back(fmap.at(c, gy, gx));
                for (int c = 0; c < 3; ++c) col.push_back(view.image.at(py, px, c));
                tags.push_back(static_cast<std::uint32_t>(vi));
            }
        }
    }
    if (tags.empty()) throw Error(ErrorCode::EmptyCloud, "every sampled depth is invalid");
    const int n = static_cast<int>(tags.size());
    FeaturePointCloud cloud;
    cloud.positions = Tensor({n, 3}, std::move(pos));
    cloud.features = Tensor({n, dim}, std::move(feat));
    cloud.colors = Tensor({n, 3}, std::move(col));
    cloud.source_view = std::move(tags);
    cloud.validate();

    if (!options.voxel) return cloud;
    const double voxel = *options.voxel > 0.0 ? *options.voxel : default_voxel_size(cloud);
    return voxel_dedup(cloud, voxel);
}

double default_voxel_size(const FeaturePointCloud& cloud) {
    std::array<double, 3> lo{}, hi{};
    lo.fill(std::numeric_limits<double>::infinity());
    hi.fill(-std::numeric_limits<double>::infinity());
    for (int i = 0; i < cloud.size(); ++i)
        for (int a = 0; a < 3; ++a) {
            lo[static_cast<std::size_t>(a)] = std::min(lo[static_cast<std::size_t>(a)], cloud.positions.at(i, a));
            hi[static_cast<std::size_t>(a)] = std::max(hi[static_cast<std::size_t>(a)], cloud.positions.at(i, a));
        }
    double extent = 0.0;
    for (std::size_t a = 0; a < 3; ++a) extent = std::max(extent, hi[a] - lo[a]);
    return extent > 0.0 ? extent / 256.0 : 1.0;
}

FeaturePointCloud voxel_dedup(const FeaturePointCloud& cloud, double voxel) {
    if (!(voxel > 0.0) || !std::isfinite(voxel)) throw Error(ErrorCode::Parameter, "voxel size must be > 0");
    cloud.validate();
    const int n = cloud.size(), dim = cloud.dim();
    using Key = std::array<std::int64_t, 3>;
    std::vector<Key> keys(static_cast<std::size_t>(n));
    for (int i = 0; i < n; ++i)
        for (int a = 0; a < 3; ++a)
            keys[static_cast<std::size_t>(i)][static_cast<std::size_t>(a)] =
                static_cast<std::int64_t>(std::floor(cloud.positions.at(i, a) / voxel));
    std::vector<int> order(static_cast<std::size_t>(n));
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(), [&](int a, int b) {
        return keys[static_cast<std::size_t>(a)] < keys[static_cast<std::size_t>(b)];
    });

    std::vector<double> pos, feat, col;
    std::vector<std::uint32_t> tags;
    for (std::size_t start = 0; start < order.size();) {
        std::size_t end = start;
        const Key& key = keys[static_cast<std::size_t>(order[start])];
        while (end < order.size() && keys[static_cast<std::size_t>(order[end])] == key) ++end;
        const double count = static_cast<double>(end - start);
        std::array<double, 3> p{0, 0, 0}, c{0, 0, 0};
        std::vector<double> f(static_cast<std::size_t>(dim), 0.0);
        for (std::size_t m = start; m < end; ++m) {
            const int i = order[m];
            for (int a = 0; a < 3; ++a) p[static_cast<std::size_t>(a)] += cloud.positions.at(i, a);
            for (int k = 0; k < dim; ++k) f[static_cast<std::size_t>(k)] += cloud.features.at(i, k);
            if (cloud.colors)
                for (int a = 0; a < 3; ++a) c[static_cast<std::size_t>(a)] += cloud.colors->at(i, a);
        }
        for (double v : p) pos.push_back(v / count);
        for (double v : f) feat.push_back(v / count);
        if (cloud.colors)
            for (double v : c) col.push_back(v / count);
        tags.push_back(cloud.source_view[static_cast<std::size_t>(order[start])]);
        start = end;
    }
    const int m = static_cast<int>(tags.size());
    FeaturePointCloud out;
    out.positions = Tensor({m, 3}, std::move(pos));
    out.features = Tensor({m, dim}, std::move(feat));
    if (cloud.colors) out.colors = Tensor({m, 3}, std::move(col));
    out.source_view = std::move(tags);
    return out;
}

// ---------------------------------------------------------------------------
// Binary container

namespace {

constexpr std::array<char, 4> kCloudMagic{'F', 'P', 'C', 'L'};
constexpr std::uint32_t kHasColors = 1u << 0;
constexpr std::uint32_t kStylized = 1u << 1;

void put_u32(std::ostream& out, std::uint32_t v) {
    const unsigned char b[4] = {static_cast<unsigned char>(v), static_cast<unsigned char>(v >> 8),
                                static_cast<unsigned char>(v >> 16), static_cast<unsigned char>(v >> 24)};
    out.write(reinterpret_cast<const char*>(b), 4);
}

std::uint32_t get_u32(std::istream& in) {
    unsigned char b[4] = {0, 0, 0, 0};
    in.read(reinterpret_cast<char*>(b), 4);
    return b[0] | (b[1] << 8) | (b[2] << 16) | (static_cast<std::uint32_t>(b[3]) << 24);
}

void put_f32(std::ostream& out, double v) {
    const float f = static_cast<float>(v);
    std::uint32_t bits;
    std::memcpy(&bits, &f, 4);
    put_u32(out, bits);
}

double get_f32(std::istream& in) {
    const std::uint32_t bits = get_u32(in);
    float f;
    std::memcpy(&f, &bits, 4);
    return f;
}

}  // namespace

void write_cloud(const std::filesystem::path& path, const FeaturePointCloud& cloud, const CloudFileExtras& extras) {
    cloud.validate();
    std::ofstream out(path, std::ios::binary);
    if (!out) throw Error(ErrorCode::Io, "cannot write " + path.string());
    std::uint32_t flags = 0;
    if (cloud.colors) flags |= kHasColors;
    if (!extras.style_text.empty()) flags |= kStylized;
    out.write(kCloudMagic.data(), 4);
    put_u32(out, static_cast<std::uint32_t>(cloud.size()));
    put_u32(out, static_cast<std::uint32_t>(cloud.dim()));
    put_u32(out, flags);
    for (double v : cloud.positions.data()) put_f32(out, v);
    for (double v : cloud.features.data()) put_f32(out, v);
    for (std::uint32_t t : cloud.source_view) put_u32(out, t);
    if (cloud.colors)
        for (double v : cloud.colors->data()) put_f32(out, v);
    if (flags & kStylized) {
        put_u32(out, static_cast<std::uint32_t>(extras.style_text.size()));
        out.write(extras.style_text.data(), static_cast<std::streamsize>(extras.style_text.size()));
    }
    if (!out) throw Error(ErrorCode::Io, "failed writing " + path.string());
}

FeaturePointCloud read_cloud(const std::filesystem::path& path, CloudFileExtras* extras) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw Error(ErrorCode::Load, "cannot open " + path.string());
    std::array<char, 4> magic{};
    in.read(magic.data(), 4);
    if (!in || magic != kCloudMagic) throw Error(ErrorCode::Load, "not a feature cloud: " + path.string());
    const int n = static_cast<int>(get_u32(in));
    const int d = static_cast<int>(get_u32(in));
    const std::uint32_t flags = get_u32(in);
    if (!in || n <= 0 || d <= 0) throw Error(ErrorCode::Load, "bad cloud header in " + path.string());
    FeaturePointCloud cloud;
    cloud.positions = Tensor({n, 3});
    cloud.features = Tensor({n, d});
    for (double& v : cloud.positions.data()) v = get_f32(in);
    for (double& v : cloud.features.data()) v = get_f32(in);
    cloud.source_view.resize(static_cast<std::size_t>(n));
    for (auto& t : cloud.source_view) t = get_u32(in);
    if (flags & kHasColors) {
        cloud.colors = Tensor({n, 3});
        for (double& v : cloud.colors->data()) v = get_f32(in);
    }
    std::string style;
    if (flags & kStylized) {
        style.resize(get_u32(in));
        in.read(style.data(), static_cast<std::streamsize>(style.size()));
    }
    if (!in) throw Error(ErrorCode::Load, "truncated cloud file " + path.string());
    if (extras) extras->style_text = std::move(style);
    cloud.validate();
    return cloud;
}

}  // namespace pcstyle
