#include "pcstyle/evaluation.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <random>

#include "pcstyle/error.hpp"
#include "pcstyle/losses.hpp"

namespace pcstyle {

double clip_score(const std::vector<Image>& images, const Tensor& text_embedding, const JointEmbedder& embedder,
                  int n_crops, int patch_size, std::uint64_t seed) {
    if (images.empty()) throw Error(ErrorCode::DegenerateInput, "clip score needs at least one image");
    if (n_crops < 1 || patch_size < 1) throw Error(ErrorCode::Config, "clip score crops must be positive");
    std::mt19937_64 rng(seed);
    const int s = embedder.input_size();
    double total = 0.0;
    for (const Image& img : images) {
        const int p = std::min({patch_size, img.height, img.width});
        const Tensor chw = img.to_tensor();
        const ad::SampleMap resize = ad::bilinear_resize_map(p, p, s, s);
        double acc = 0.0;
        for (int c = 0; c < n_crops; ++c) {
            const int y0 = std::uniform_int_distribution<int>(0, img.height - p)(rng);
            const int x0 = std::uniform_int_distribution<int>(0, img.width - p)(rng);
            Tensor crop({3, p, p});
            for (int ch = 0; ch < 3; ++ch)
                for (int y = 0; y < p; ++y)
                    for (int x = 0; x < p; ++x) crop.at(ch, y, x) = chw.at(ch, y0 + y, x0 + x);
            const Tensor e = embedder.embed_image(ad::resample(ad::constant(std::move(crop)), resize)).value();
            acc += 1.0 - embedding_disparity(e, text_embedding);
        }
        total += acc / n_crops;
    }
    return total / static_cast<double>(images.size());
}

double clip_score(const std::vector<Image>& images, const std::string& style_text, const JointEmbedder& embedder,
                  const std::vector<std::string>& templates, int n_crops, int patch_size, std::uint64_t seed) {
    return clip_score(images, embed_style(style_text, embedder, templates).mean, embedder, n_crops, patch_size, seed);
}

double style_separation(const std::vector<Image>& a, const std::vector<Image>& b, const JointEmbedder& embedder) {
    if (a.empty() || a.size() != b.size()) throw Error(ErrorCode::DegenerateInput, "style separation needs paired renders");
    double total = 0.0;
    for (std::size_t k = 0; k < a.size(); ++k) {
        total += embedding_disparity(embed_image_resized(embedder, a[k]), embed_image_resized(embedder, b[k]));
    }
    return total / static_cast<double>(a.size());
}

ConsistencyPair build_correspondence(const CameraView& view_i, const CameraView& view_j, double tolerance) {
    if (view_i.depth.empty() || view_j.depth.empty()) throw Error(ErrorCode::Load, "correspondence needs depth in both views");
    ConsistencyPair pair;
    pair.height = view_i.depth.height;
    pair.width = view_i.depth.width;
    pair.valid.assign(static_cast<std::size_t>(pair.height) * pair.width, 0);
    const auto& kj = view_j.intrinsics;
    for (int y = 0; y < pair.height; ++y) {
        for (int x = 0; x < pair.width; ++x) {
            const double d = view_i.depth.at(y, x);
            if (!(d > 0.0)) continue;
            const Eigen::Vector3d world = backproject_pixel(Eigen::Vector2d(x, y), d, view_i);
            const Eigen::Vector3d cam = view_j.pose.rotation * world + view_j.pose.translation;
            if (cam.z() <= kDepthEpsilon) continue;
            const int u = static_cast<int>(std::lround(kj.fx * cam.x() / cam.z() + kj.cx));
            const int v = static_cast<int>(std::lround(kj.fy * cam.y() / cam.z() + kj.cy));
            if (u < 0 || v < 0 || u >= view_j.depth.width || v >= view_j.depth.height) continue;
            const double dj = view_j.depth.at(v, u);
            if (!(dj > 0.0) || std::abs(dj - cam.z()) > tolerance * cam.z()) continue;
            pair.matches.push_back({x, y, u, v});
            pair.valid[static_cast<std::size_t>(y) * pair.width + x] = 1;
        }
    }
    return pair;
}

double pair_rmse(const Image& frame_i, const Image& frame_j, const ConsistencyPair& pair) {
    if (pair.matches.empty()) return std::numeric_limits<double>::quiet_NaN();
    double acc = 0.0;
    for (const auto& m : pair.matches) {
        for (int c = 0; c < 3; ++c) {
            const double diff = static_cast<double>(frame_i.at(m.yi, m.xi, c)) - frame_j.at(m.yj, m.xj, c);
            acc += diff * diff;
        }
    }
    return std::sqrt(acc / (3.0 * static_cast<double>(pair.matches.size())));
}

ConsistencyReport consistency_rmse(const std::vector<Image>& frames, const std::vector<CameraView>& cameras, int stride,
                                   double tolerance) {
    if (stride < 1) throw Error(ErrorCode::Config, "stride must be >= 1");
    if (frames.size() != cameras.size()) throw Error(ErrorCode::ShapeMismatch, "one camera per frame is required");
    if (static_cast<int>(frames.size()) < stride + 1) {
        throw Error(ErrorCode::DegenerateInput, "need at least " + std::to_string(stride + 1) + " frames for stride " +
                                                    std::to_string(stride));
    }
    ConsistencyReport report;
    double total = 0.0;
    for (std::size_t t = static_cast<std::size_t>(stride); t < frames.size(); ++t) {
        const std::size_t s = t - static_cast<std::size_t>(stride);
        const auto& fi = frames[s];
        const auto& fj = frames[t];
        if (fi.height != cameras[s].depth.height || fi.width != cameras[s].depth.width || fj.height != cameras[t].depth.height ||
            fj.width != cameras[t].depth.width) {
            throw Error(ErrorCode::ShapeMismatch, "frame size differs from its camera's depth map");
        }
        const double r = pair_rmse(fi, fj, build_correspondence(cameras[s], cameras[t], tolerance));
        report.per_pair.push_back(r);
        if (std::isnan(r)) continue;
        total += r;
        ++report.pairs_used;
    }
    report.rmse = report.pairs_used > 0 ? total / report.pairs_used : std::numeric_limits<double>::quiet_NaN();
    return report;
}

}  // namespace pcstyle
