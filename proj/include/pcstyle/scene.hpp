#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include <Eigen/Core>
#include "json.hpp"

#include "pcstyle/image.hpp"

namespace pcstyle {

inline constexpr double kDepthEpsilon = 1e-8;

struct CameraIntrinsics {
    double fx = 1.0, fy = 1.0;
    double cx = 0.0, cy = 0.0;
    int width = 1, height = 1;

    void validate() const;

    /// Intrinsics of the grid obtained by pooling `stride`x`stride` pixel blocks.
    /// Pixel centres sit at integer coordinates, so the principal point maps as (c + 0.5) / s - 0.5.
    [[nodiscard]] CameraIntrinsics downscaled(int stride) const;
};

/// World-to-camera rigid transform: x_cam = rotation * x_world + translation.
struct CameraPose {
    Eigen::Matrix3d rotation = Eigen::Matrix3d::Identity();
    Eigen::Vector3d translation = Eigen::Vector3d::Zero();

    void validate(double tolerance = 1e-6) const;
    [[nodiscard]] Eigen::Vector3d center() const { return -rotation.transpose() * translation; }

    /// Camera at `eye` looking at `target`; image y axis points away from `up`.
    static CameraPose look_at(const Eigen::Vector3d& eye, const Eigen::Vector3d& target, const Eigen::Vector3d& up);
};

struct CameraView {
    CameraIntrinsics intrinsics;
    CameraPose pose;
    Image image;     // may be empty for pose-only views
    DepthMap depth;  // may be empty for pose-only views

    void validate() const;
};

struct Scene {
    std::string name;
    std::vector<CameraView> views;

    void validate() const;
};

struct Projection {
    Eigen::Vector2d pixel;
    double depth = 0.0;
};

Projection project_point(const Eigen::Vector3d& point, const CameraIntrinsics& intrinsics, const CameraPose& pose);
inline Projection project_point(const Eigen::Vector3d& point, const CameraView& view) {
    return project_point(point, view.intrinsics, view.pose);
}

Eigen::Vector3d backproject_pixel(const Eigen::Vector2d& pixel, double depth, const CameraIntrinsics& intrinsics,
                                  const CameraPose& pose);
inline Eigen::Vector3d backproject_pixel(const Eigen::Vector2d& pixel, double depth, const CameraView& view) {
    return backproject_pixel(pixel, depth, view.intrinsics, view.pose);
}

nlohmann::json camera_to_json(const CameraIntrinsics& intrinsics, const CameraPose& pose);
/// Parses one cameras.json entry; throws Validation on a non-rigid rotation.
CameraView camera_from_json(const nlohmann::json& j);

Scene load_scene(const std::filesystem::path& dir);
void save_scene(const Scene& scene, const std::filesystem::path& dir);

struct SyntheticSpec {
    int n_views = 4;
    int n_points = 5000;
    std::string texture = "checker";  // checker | stripes | gradient
    int image_size = 64;
    double view_step_degrees = 12.0;
};

/// Procedural ground plane with two boxes, ray-cast at every pixel centre of every view.
/// Depth maps are exact ray hits; `n_points` coloured seed points tint the checker and
/// stripe textures by nearest-seed (cellular) lookup.
Scene make_synthetic_scene(const SyntheticSpec& spec, std::uint64_t seed);

}  // namespace pcstyle
