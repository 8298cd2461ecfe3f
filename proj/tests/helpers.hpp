#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <random>
#include <tuple>
#include <vector>

#include "pcstyle/autodiff.hpp"
#include "pcstyle/renderer.hpp"
#include "pcstyle/tensor.hpp"

namespace pcstyle::test_util {

inline Tensor random_tensor(Shape shape, std::mt19937_64& rng, double lo = -1.0, double hi = 1.0) {
    Tensor t(std::move(shape));
    std::uniform_real_distribution<double> u(lo, hi);
    for (auto& v : t.data()) v = u(rng);
    return t;
}

/// Largest relative error between the analytic gradient of `f` at `x` and central
/// differences, with |a - n| / max(1, |a|, |n|) per element.
inline double gradient_error(const std::function<ad::Var(const ad::Var&)>& f, const Tensor& x, double h = 1e-6) {
    ad::Var p = ad::Var::parameter(x);
    ad::backward(f(p));
    const Tensor g = p.grad();
    double worst = 0.0;
    for (std::size_t i = 0; i < x.size(); ++i) {
        Tensor xp = x, xm = x;
        xp[i] += h;
        xm[i] -= h;
        const double num = (f(ad::constant(xp)).item() - f(ad::constant(xm)).item()) / (2.0 * h);
        const double err = std::abs(num - g[i]) / std::max({1.0, std::abs(num), std::abs(g[i])});
        worst = std::max(worst, err);
    }
    return worst;
}

inline double max_abs_diff(const Tensor& a, const Tensor& b) {
    double m = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
    return m;
}

// Per pixel: every point within the radius, sorted by (depth, index), first K, blended.
inline Tensor brute_splat(const Tensor& pos, const Tensor& feat, const CameraView& view, const SplatConfig& cfg) {
    const CameraIntrinsics k = view.intrinsics.downscaled(cfg.stride);
    const int n = pos.dim(0), d = feat.dim(1);
    Tensor out({d, k.height, k.width}, 0.0);
    for (int y = 0; y < k.height; ++y) {
        for (int x = 0; x < k.width; ++x) {
            std::vector<std::tuple<double, int, double>> hits;
            for (int i = 0; i < n; ++i) {
                const Eigen::Vector3d c = view.pose.rotation * Eigen::Vector3d(pos.at(i, 0), pos.at(i, 1), pos.at(i, 2)) +
                                          view.pose.translation;
                if (c.z() <= 0) continue;
                const double u = k.fx * c.x() / c.z() + k.cx, v = k.fy * c.y() / c.z() + k.cy;
                const double dist = std::sqrt((x - u) * (x - u) + (y - v) * (y - v));
                if (dist < cfg.radius) hits.emplace_back(c.z(), i, (1 - dist / cfg.radius) * std::pow(c.z(), -cfg.blend));
            }
            std::sort(hits.begin(), hits.end());
            if (hits.size() > static_cast<std::size_t>(cfg.K)) hits.resize(static_cast<std::size_t>(cfg.K));
            double total = 0;
            for (const auto& h : hits) total += std::get<2>(h);
            for (const auto& [z, i, w] : hits)
                for (int c = 0; c < d; ++c) out.at(c, y, x) += w / total * feat.at(i, c);
        }
    }
    return out;
}

}  // namespace pcstyle::test_util
