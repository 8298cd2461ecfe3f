#include <Eigen/Geometry>
#include <algorithm>
#include <array>
#include <cmath>
#include <limits>
#include <numbers>
#include <optional>
#include <random>

#include "pcstyle/error.hpp"
#include "pcstyle/scene.hpp"

namespace pcstyle {
namespace {

using Eigen::Vector3d;

enum class Surface { Ground, BigBox, SmallBox };

struct Box {
    Vector3d lo, hi;
};

const Box kBigBox{{-0.5, -0.5, 0.0}, {0.5, 0.5, 1.0}};
const Box kSmallBox{{0.7, -0.9, 0.0}, {1.1, -0.5, 0.4}};
constexpr double kSeedRadius = 4.0;

struct Hit {
    double t;
    Vector3d point;
    Surface surface;
};

std::optional<double> intersect_box(const Vector3d& o, const Vector3d& d, const Box& box) {
    double t0 = 0.0, t1 = std::numeric_limits<double>::infinity();
    for (int a = 0; a < 3; ++a) {
        if (std::abs(d[a]) < 1e-15) {
            if (o[a] < box.lo[a] || o[a] > box.hi[a]) return std::nullopt;
            continue;
        }
        double ta = (box.lo[a] - o[a]) / d[a];
        double tb = (box.hi[a] - o[a]) / d[a];
        if (ta > tb) std::swap(ta, tb);
        t0 = std::max(t0, ta);
        t1 = std::min(t1, tb);
        if (t0 > t1) return std::nullopt;
    }
    if (t0 <= 0.0) return std::nullopt;
    return t0;
}

std::optional<Hit> cast(const Vector3d& origin, const Vector3d& dir) {
    std::optional<Hit> best;
    auto consider = [&](double t, Surface s) {
        if (t > 0.0 && (!best || t < best->t)) best = Hit{t, origin + t * dir, s};
    };
    if (dir.z() < 0.0) consider(-origin.z() / dir.z(), Surface::Ground);
    if (auto t = intersect_box(origin, dir, kBigBox)) consider(*t, Surface::BigBox);
    if (auto t = intersect_box(origin, dir, kSmallBox)) consider(*t, Surface::SmallBox);
    return best;
}

struct Palette {
    std::array<Vector3d, 3> a, b;
};

struct SeedPoint {
    Vector3d position;
    Vector3d color;
};

Vector3d random_color(std::mt19937_64& rng) {
    std::uniform_real_distribution<double> u(0.1, 0.9);
    const double r = u(rng), g = u(rng), b = u(rng);
    return {r, g, b};
}

Vector3d sample_surface_point(std::mt19937_64& rng) {
    std::uniform_real_distribution<double> u(0.0, 1.0);
    // Rough area weighting: ground disc dominates, boxes get a fixed share.
    const double pick = u(rng);
    if (pick < 0.7) {
        const double r = kSeedRadius * std::sqrt(u(rng));
        const double a = 2.0 * std::numbers::pi * u(rng);
        return {r * std::cos(a), r * std::sin(a), 0.0};
    }
    const Box& box = pick < 0.92 ? kBigBox : kSmallBox;
    Vector3d p(box.lo.x() + u(rng) * (box.hi.x() - box.lo.x()), box.lo.y() + u(rng) * (box.hi.y() - box.lo.y()),
               box.lo.z() + u(rng) * (box.hi.z() - box.lo.z()));
    const int axis = static_cast<int>(u(rng) * 3.0) % 3;
    p[axis] = u(rng) < 0.5 ? box.lo[axis] : box.hi[axis];
    if (axis == 2) p.z() = box.hi.z();  // no bottom faces
    return p;
}

double smoothstep(double e0, double e1, double x) {
    const double t = std::clamp((x - e0) / (e1 - e0), 0.0, 1.0);
    return t * t * (3.0 - 2.0 * t);
}

class Texturer {
public:
    Texturer(const std::string& kind, const Palette& palette, std::vector<SeedPoint> seeds)
        : kind_(kind), palette_(palette), seeds_(std::move(seeds)) {
        if (kind_ != "checker" && kind_ != "stripes" && kind_ != "gradient") {
            throw Error(ErrorCode::Parameter, "unknown texture '" + kind_ + "' (checker|stripes|gradient)");
        }
    }

    Vector3d color(const Hit& hit) const {
        const auto s = static_cast<std::size_t>(hit.surface);
        const Vector3d& p = hit.point;
        if (kind_ == "gradient") {
            // One smooth field over all surfaces, so colour depends on position only.
            const Vector3d base = 0.5 * (palette_.a[0] + palette_.b[0]);
            const Vector3d shade(0.04 * p.x(), 0.04 * p.y(), 0.06 * p.z());
            return (base + shade).cwiseMax(0.0).cwiseMin(1.0);
        }
        const double cell = hit.surface == Surface::Ground ? 0.5 : 0.25;
        bool parity;
        if (kind_ == "checker") {
            const long k = static_cast<long>(std::floor(p.x() / cell)) + static_cast<long>(std::floor(p.y() / cell)) +
                           static_cast<long>(std::floor(p.z() / cell));
            parity = (k & 1L) != 0;
        } else {
            parity = (static_cast<long>(std::floor((p.x() + 0.5 * p.y() + p.z()) / cell)) & 1L) != 0;
        }
        Vector3d c = parity ? palette_.a[s] : palette_.b[s];
        // Fade distant ground to its mean colour so far-field pixels do not alias.
        const double fade = hit.surface == Surface::Ground ? smoothstep(3.0, 6.0, p.head<2>().norm()) : 0.0;
        c = (1.0 - fade) * c + fade * 0.5 * (palette_.a[s] + palette_.b[s]);
        if (!seeds_.empty()) {
            const SeedPoint* nearest = &seeds_.front();
            double best = std::numeric_limits<double>::infinity();
            for (const auto& seed : seeds_) {
                const double d = (seed.position - p).squaredNorm();
                if (d < best) {
                    best = d;
                    nearest = &seed;
                }
            }
            const double tint = 0.1 * (1.0 - fade);
            c = (1.0 - tint) * c + tint * nearest->color;
        }
        return c;
    }

private:
    std::string kind_;
    Palette palette_;
    std::vector<SeedPoint> seeds_;
};

float quantize(double v) { return static_cast<float>(std::lround(std::clamp(v, 0.0, 1.0) * 255.0)) / 255.0f; }

}  // namespace

Scene make_synthetic_scene(const SyntheticSpec& spec, std::uint64_t seed) {
    if (spec.n_views < 2) throw Error(ErrorCode::Config, "synthetic scene needs n_views >= 2");
    if (spec.n_points < 0) throw Error(ErrorCode::Config, "n_points must be >= 0");
    if (spec.image_size < 4) throw Error(ErrorCode::Config, "image_size must be >= 4");

    std::mt19937_64 rng(seed);
    Palette palette;
    for (std::size_t s = 0; s < 3; ++s) {
        palette.a[s] = random_color(rng);
        palette.b[s] = random_color(rng);
    }
    std::vector<SeedPoint> seeds;
    if (spec.texture != "gradient") {
        seeds.reserve(static_cast<std::size_t>(spec.n_points));
        for (int i = 0; i < spec.n_points; ++i) {
            const Vector3d p = sample_surface_point(rng);
            seeds.push_back({p, random_color(rng)});
        }
    }
    const Texturer texturer(spec.texture, palette, std::move(seeds));

    Scene scene;
    scene.name = "synthetic-" + std::to_string(seed);
    const int size = spec.image_size;
    CameraIntrinsics k;
    k.fx = k.fy = 1.1 * size;
    k.cx = k.cy = 0.5 * (size - 1);
    k.width = k.height = size;

    const double radius = 3.2, height = 2.2;
    const Vector3d target(0.0, 0.0, 0.35);
    for (int v = 0; v < spec.n_views; ++v) {
        const double az = (20.0 + v * spec.view_step_degrees) * std::numbers::pi / 180.0;
        const Vector3d eye(radius * std::cos(az), radius * std::sin(az), height);
        CameraView view;
        view.intrinsics = k;
        view.pose = CameraPose::look_at(eye, target, Vector3d::UnitZ());
        view.image = Image(size, size);
        view.depth = DepthMap(size, size);
        const Eigen::Matrix3d rt = view.pose.rotation.transpose();
        for (int y = 0; y < size; ++y) {
            for (int x = 0; x < size; ++x) {
                // Camera-space ray with unit z, so the hit parameter is the depth.
                const Vector3d ray_cam((x - k.cx) / k.fx, (y - k.cy) / k.fy, 1.0);
                const auto hit = cast(eye, rt * ray_cam);
                if (!hit) continue;
                view.depth.at(y, x) = static_cast<float>(hit->t);
                const Vector3d c = texturer.color(*hit);
                for (int ch = 0; ch < 3; ++ch) view.image.at(y, x, ch) = quantize(c[ch]);
            }
        }
        scene.views.push_back(std::move(view));
    }
    return scene;
}

}  // namespace pcstyle
