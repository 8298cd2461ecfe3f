#include "pcstyle/scene.hpp"

#include <Eigen/Geometry>
#include <cmath>
#include <cstdio>
#include <fstream>

#include "pcstyle/error.hpp"

namespace pcstyle {

void CameraIntrinsics::validate() const {
    if (!(fx > 0.0) || !(fy > 0.0)) throw Error(ErrorCode::Validation, "focal lengths must be positive");
    if (width <= 0 || height <= 0) throw Error(ErrorCode::Validation, "image size must be positive");
    if (!(cx >= 0.0 && cx < width) || !(cy >= 0.0 && cy < height)) {
        throw Error(ErrorCode::Validation, "principal point outside the image");
    }
}

CameraIntrinsics CameraIntrinsics::downscaled(int stride) const {
    if (stride < 1) throw Error(ErrorCode::Parameter, "stride must be >= 1");
    CameraIntrinsics k;
    k.fx = fx / stride;
    k.fy = fy / stride;
    k.cx = (cx + 0.5) / stride - 0.5;
    k.cy = (cy + 0.5) / stride - 0.5;
    k.width = (width + stride - 1) / stride;
    k.height = (height + stride - 1) / stride;
    return k;
}

void CameraPose::validate(double tolerance) const {
    if (!rotation.allFinite() || !translation.allFinite()) throw Error(ErrorCode::Validation, "non-finite pose");
    const double ortho = (rotation.transpose() * rotation - Eigen::Matrix3d::Identity()).cwiseAbs().maxCoeff();
    if (ortho > tolerance) throw Error(ErrorCode::Validation, "rotation is not orthonormal");
    if (std::abs(rotation.determinant() - 1.0) > tolerance) {
        throw Error(ErrorCode::Validation, "rotation determinant is not +1");
    }
}

CameraPose CameraPose::look_at(const Eigen::Vector3d& eye, const Eigen::Vector3d& target, const Eigen::Vector3d& up) {
    const Eigen::Vector3d forward = (target - eye).normalized();
    const Eigen::Vector3d right = forward.cross(up).normalized();
    const Eigen::Vector3d down = forward.cross(right);
    CameraPose pose;
    pose.rotation.row(0) = right.transpose();
    pose.rotation.row(1) = down.transpose();
    pose.rotation.row(2) = forward.transpose();
    pose.translation = -pose.rotation * eye;
    return pose;
}

void CameraView::validate() const {
    intrinsics.validate();
    pose.validate();
    if (!image.empty() && (image.height != intrinsics.height || image.width != intrinsics.width)) {
        throw Error(ErrorCode::Validation, "image size does not match intrinsics");
    }
    if (!depth.empty()) {
        if (depth.height != intrinsics.height || depth.width != intrinsics.width) {
            throw Error(ErrorCode::Validation, "depth size does not match intrinsics");
        }
        for (float d : depth.values) {
            if (!(d >= 0.0f) || !std::isfinite(d)) throw Error(ErrorCode::Validation, "depth must be finite and >= 0");
        }
    }
}

void Scene::validate() const {
    if (views.size() < 2) throw Error(ErrorCode::Validation, "a scene needs at least 2 views");
    for (const auto& v : views) v.validate();
}

Projection project_point(const Eigen::Vector3d& point, const CameraIntrinsics& k, const CameraPose& pose) {
    const Eigen::Vector3d cam = pose.rotation * point + pose.translation;
    if (cam.z() <= kDepthEpsilon) throw Error(ErrorCode::BehindCamera, "point is behind the camera");
    return {Eigen::Vector2d(k.fx * cam.x() / cam.z() + k.cx, k.fy * cam.y() / cam.z() + k.cy), cam.z()};
}

Eigen::Vector3d backproject_pixel(const Eigen::Vector2d& pixel, double depth, const CameraIntrinsics& k,
                                  const CameraPose& pose) {
    if (!(depth > 0.0)) throw Error(ErrorCode::InvalidDepth, "depth must be positive");
    const Eigen::Vector3d cam((pixel.x() - k.cx) / k.fx * depth, (pixel.y() - k.cy) / k.fy * depth, depth);
    return pose.rotation.transpose() * (cam - pose.translation);
}

nlohmann::json camera_to_json(const CameraIntrinsics& k, const CameraPose& pose) {
    nlohmann::json j;
    j["fx"] = k.fx;
    j["fy"] = k.fy;
    j["cx"] = k.cx;
    j["cy"] = k.cy;
    j["width"] = k.width;
    j["height"] = k.height;
    std::vector<double> r(9), t(3);
    for (int i = 0; i < 3; ++i) {
        for (int c = 0; c < 3; ++c) r[static_cast<std::size_t>(i * 3 + c)] = pose.rotation(i, c);
        t[static_cast<std::size_t>(i)] = pose.translation(i);
    }
    j["rotation"] = r;
    j["translation"] = t;
    return j;
}

CameraView camera_from_json(const nlohmann::json& j) {
    CameraView view;
    try {
        view.intrinsics.fx = j.at("fx").get<double>();
        view.intrinsics.fy = j.at("fy").get<double>();
        view.intrinsics.cx = j.at("cx").get<double>();
        view.intrinsics.cy = j.at("cy").get<double>();
        view.intrinsics.width = j.at("width").get<int>();
        view.intrinsics.height = j.at("height").get<int>();
        const auto r = j.at("rotation").get<std::vector<double>>();
        const auto t = j.at("translation").get<std::vector<double>>();
        if (r.size() != 9 || t.size() != 3) throw Error(ErrorCode::Validation, "rotation needs 9 values, translation 3");
        for (int i = 0; i < 3; ++i) {
            for (int c = 0; c < 3; ++c) view.pose.rotation(i, c) = r[static_cast<std::size_t>(i * 3 + c)];
            view.pose.translation(i) = t[static_cast<std::size_t>(i)];
        }
    } catch (const nlohmann::json::exception& e) {
        throw Error(ErrorCode::Validation, std::string("camera entry: ") + e.what());
    }
    view.intrinsics.validate();
    view.pose.validate();
    return view;
}

namespace {

std::string indexed(const char* pattern, std::size_t i) {
    char buf[32];
    std::snprintf(buf, sizeof buf, pattern, static_cast<int>(i));
    return buf;
}

}  // namespace

Scene load_scene(const std::filesystem::path& dir) {
    const auto cameras_path = dir / "cameras.json";
    std::ifstream in(cameras_path);
    if (!in) throw Error(ErrorCode::Load, "missing " + cameras_path.string());
    nlohmann::json doc;
    try {
        in >> doc;
    } catch (const nlohmann::json::exception& e) {
        throw Error(ErrorCode::Load, cameras_path.string() + ": " + e.what());
    }
    if (!doc.contains("views") || !doc["views"].is_array()) {
        throw Error(ErrorCode::Load, cameras_path.string() + ": no \"views\" array");
    }
    Scene scene;
    scene.name = dir.filename().string();
    if (scene.name.empty()) scene.name = dir.parent_path().filename().string();
    const auto& entries = doc["views"];
    for (std::size_t i = 0; i < entries.size(); ++i) {
        const auto image_path = dir / "images" / indexed("%04d.png", i);
        const auto depth_path = dir / "depth" / indexed("%04d.dpth", i);
        if (!std::filesystem::exists(image_path)) throw Error(ErrorCode::Load, "missing image " + image_path.string());
        if (!std::filesystem::exists(depth_path)) throw Error(ErrorCode::Load, "missing depth " + depth_path.string());
        CameraView view = camera_from_json(entries[i]);
        view.image = read_png(image_path);
        view.depth = read_depth(depth_path);
        view.validate();
        scene.views.push_back(std::move(view));
    }
    scene.validate();
    return scene;
}

void save_scene(const Scene& scene, const std::filesystem::path& dir) {
    std::filesystem::create_directories(dir / "images");
    std::filesystem::create_directories(dir / "depth");
    nlohmann::json doc;
    doc["views"] = nlohmann::json::array();
    for (std::size_t i = 0; i < scene.views.size(); ++i) {
        const auto& v = scene.views[i];
        doc["views"].push_back(camera_to_json(v.intrinsics, v.pose));
        write_png(dir / "images" / indexed("%04d.png", i), v.image);
        write_depth(dir / "depth" / indexed("%04d.dpth", i), v.depth);
    }
    std::ofstream out(dir / "cameras.json");
    if (!out) throw Error(ErrorCode::Io, "cannot write " + (dir / "cameras.json").string());
    out << doc.dump(2) << '\n';
}

}  // namespace pcstyle
