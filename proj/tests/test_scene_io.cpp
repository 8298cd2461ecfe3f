#include <gtest/gtest.h>

#include <Eigen/Geometry>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <random>

#include "pcstyle/error.hpp"
#include "pcstyle/image.hpp"
#include "pcstyle/scene.hpp"

using namespace pcstyle;
namespace fs = std::filesystem;

namespace {

CameraIntrinsics intrinsics(double f, double c, int size) {
    CameraIntrinsics k;
    k.fx = k.fy = f;
    k.cx = k.cy = c;
    k.width = k.height = size;
    return k;
}

CameraPose random_pose(std::mt19937_64& rng) {
    std::normal_distribution<double> n(0.0, 1.0);
    const Eigen::Quaterniond q(n(rng), n(rng), n(rng), n(rng));
    CameraPose p;
    p.rotation = q.normalized().toRotationMatrix();
    p.translation = Eigen::Vector3d(n(rng), n(rng), n(rng));
    return p;
}

ErrorCode code_of(const std::function<void()>& f) {
    try {
        f();
    } catch (const Error& e) {
        return e.code();
    }
    ADD_FAILURE() << "expected an Error";
    return ErrorCode::Io;
}

fs::path temp_dir(const std::string& name) {
    const fs::path p = fs::temp_directory_path() / ("pcstyle_test_" + name);
    fs::remove_all(p);
    fs::create_directories(p);
    return p;
}

// Lies on the ground plane or on a face of one of the two boxes of the synthetic scene.
double surface_distance(const Eigen::Vector3d& p) {
    double best = std::abs(p.z());
    const std::array<std::pair<Eigen::Vector3d, Eigen::Vector3d>, 2> boxes{
        {{{-0.5, -0.5, 0.0}, {0.5, 0.5, 1.0}}, {{0.7, -0.9, 0.0}, {1.1, -0.5, 0.4}}}};
    for (const auto& [lo, hi] : boxes) {
        // Distance to the box boundary (inside or outside).
        Eigen::Vector3d outside = (lo - p).cwiseMax(p - hi).cwiseMax(0.0);
        const double inside = std::min({p.x() - lo.x(), hi.x() - p.x(), p.y() - lo.y(), hi.y() - p.y(), p.z() - lo.z(),
                                        hi.z() - p.z()});
        best = std::min(best, outside.norm() > 0.0 ? outside.norm() : inside);
    }
    return best;
}

}  // namespace

TEST(Projection, OpticalAxis) {
    const auto pr = project_point({0, 0, 1}, intrinsics(1, 0, 1), CameraPose{});
    EXPECT_DOUBLE_EQ(pr.pixel.x(), 0.0);
    EXPECT_DOUBLE_EQ(pr.pixel.y(), 0.0);
    EXPECT_DOUBLE_EQ(pr.depth, 1.0);
}

TEST(Projection, HandPinholeArithmetic) {
    const auto pr = project_point({1, 2, 2}, intrinsics(100, 50, 200), CameraPose{});
    EXPECT_DOUBLE_EQ(pr.pixel.x(), 100.0);
    EXPECT_DOUBLE_EQ(pr.pixel.y(), 150.0);
    EXPECT_DOUBLE_EQ(pr.depth, 2.0);
}

TEST(Projection, BehindCamera) {
    EXPECT_EQ(code_of([] { project_point({0, 0, -1}, intrinsics(1, 0, 1), CameraPose{}); }), ErrorCode::BehindCamera);
    EXPECT_EQ(code_of([] { project_point({0, 0, 0}, intrinsics(1, 0, 1), CameraPose{}); }), ErrorCode::BehindCamera);
}

TEST(Backprojection, Examples) {
    EXPECT_TRUE(backproject_pixel({0, 0}, 1.0, intrinsics(1, 0, 1), CameraPose{}).isApprox(Eigen::Vector3d(0, 0, 1)));
    const Eigen::Vector3d p = backproject_pixel({100, 150}, 2.0, intrinsics(100, 50, 200), CameraPose{});
    EXPECT_NEAR((p - Eigen::Vector3d(1, 2, 2)).norm(), 0.0, 1e-12);
    EXPECT_EQ(code_of([] { backproject_pixel({0, 0}, 0.0, intrinsics(1, 0, 1), CameraPose{}); }), ErrorCode::InvalidDepth);
    EXPECT_EQ(code_of([] { backproject_pixel({0, 0}, -1.0, intrinsics(1, 0, 1), CameraPose{}); }), ErrorCode::InvalidDepth);
}

TEST(Backprojection, RoundTripRandom) {
    std::mt19937_64 rng(11);
    std::uniform_real_distribution<double> px(0.0, 640.0), dz(0.05, 50.0);
    const auto k = intrinsics(500.0, 320.0, 640);
    double worst = 0.0, worst_depth = 0.0;
    for (int i = 0; i < 1000; ++i) {
        const CameraPose pose = random_pose(rng);
        const Eigen::Vector2d q(px(rng), px(rng));
        const double d = dz(rng);
        const auto pr = project_point(backproject_pixel(q, d, k, pose), k, pose);
        worst = std::max(worst, (pr.pixel - q).norm());
        worst_depth = std::max(worst_depth, std::abs(pr.depth - d));
    }
    EXPECT_LT(worst, 1e-6);
    EXPECT_LT(worst_depth, 1e-6);
}

TEST(Projection, PoseComposition) {
    // Re-expressing camera-A coordinates in camera B equals projecting the world point through B.
    std::mt19937_64 rng(12);
    const auto k = intrinsics(300.0, 160.0, 320);
    int checked = 0;
    for (int i = 0; i < 500; ++i) {
        const CameraPose a = random_pose(rng), b = random_pose(rng);
        std::normal_distribution<double> n(0.0, 2.0);
        const Eigen::Vector3d world(n(rng), n(rng), n(rng));
        const Eigen::Vector3d in_a = a.rotation * world + a.translation;
        // b <- a: R_b R_a^T (x - t_a) + t_b
        const Eigen::Matrix3d r_ba = b.rotation * a.rotation.transpose();
        const Eigen::Vector3d t_ba = b.translation - r_ba * a.translation;
        CameraPose rel;
        rel.rotation = r_ba;
        rel.translation = t_ba;
        const Eigen::Vector3d in_b = b.rotation * world + b.translation;
        if (in_b.z() <= 0.1) continue;
        const auto direct = project_point(world, k, b);
        const auto composed = project_point(in_a, k, rel);
        EXPECT_LT((direct.pixel - composed.pixel).norm(), 1e-6);
        ++checked;
    }
    EXPECT_GT(checked, 100);
}

TEST(Pose, Validation) {
    CameraPose p;
    EXPECT_NO_THROW(p.validate());
    p.rotation(0, 0) = -1.0;  // reflection: orthonormal, det -1
    EXPECT_EQ(code_of([&] { p.validate(); }), ErrorCode::Validation);
    p.rotation = Eigen::Matrix3d::Identity() * 1.01;
    EXPECT_EQ(code_of([&] { p.validate(); }), ErrorCode::Validation);
    const CameraPose look = CameraPose::look_at({3, 1, 2}, {0, 0, 0.3}, Eigen::Vector3d::UnitZ());
    EXPECT_NO_THROW(look.validate());
    EXPECT_GT(project_point({0, 0, 0.3}, intrinsics(10, 5, 10), look).depth, 0.0);
}

TEST(DepthFile, ByteLayout) {
    const fs::path dir = temp_dir("depth");
    DepthMap d(2, 3);
    for (int i = 0; i < 6; ++i) d.values[static_cast<std::size_t>(i)] = 0.5f * static_cast<float>(i);
    write_depth(dir / "a.dpth", d);
    std::ifstream in(dir / "a.dpth", std::ios::binary);
    std::vector<unsigned char> bytes((std::istreambuf_iterator<char>(in)), {});
    ASSERT_EQ(bytes.size(), 8u + 6u * 4u);
    EXPECT_EQ(std::string(bytes.begin(), bytes.begin() + 4), "DPTH");
    EXPECT_EQ(bytes[4] | (bytes[5] << 8), 2);
    EXPECT_EQ(bytes[6] | (bytes[7] << 8), 3);
    float third;
    std::memcpy(&third, bytes.data() + 8 + 3 * 4, 4);
    EXPECT_EQ(third, 1.5f);
    EXPECT_EQ(read_depth(dir / "a.dpth"), d);

    std::ofstream(dir / "bad.dpth", std::ios::binary) << "NOPE1234";
    EXPECT_EQ(code_of([&] { read_depth(dir / "bad.dpth"); }), ErrorCode::Load);
    std::ofstream trunc(dir / "short.dpth", std::ios::binary);
    trunc.write(reinterpret_cast<const char*>(bytes.data()), 12);
    trunc.close();
    EXPECT_EQ(code_of([&] { read_depth(dir / "short.dpth"); }), ErrorCode::Load);
}

TEST(PngFile, EightBitRoundTrip) {
    const fs::path dir = temp_dir("png");
    Image img(3, 4);
    for (std::size_t i = 0; i < img.rgb.size(); ++i) img.rgb[i] = static_cast<float>(i % 256) / 255.0f;
    write_png(dir / "a.png", img);
    const Image back = read_png(dir / "a.png");
    ASSERT_EQ(back.height, 3);
    ASSERT_EQ(back.width, 4);
    for (std::size_t i = 0; i < img.rgb.size(); ++i) EXPECT_NEAR(back.rgb[i], img.rgb[i], 1e-6);
    EXPECT_EQ(code_of([&] { read_png(dir / "missing.png"); }), ErrorCode::Load);
}

TEST(SceneDirectory, RoundTripAndErrors) {
    SyntheticSpec spec;
    spec.n_views = 3;
    spec.n_points = 50;
    spec.image_size = 16;
    const Scene scene = make_synthetic_scene(spec, 5);
    const fs::path dir = temp_dir("scene");
    save_scene(scene, dir);
    EXPECT_TRUE(fs::exists(dir / "images" / "0002.png"));
    EXPECT_TRUE(fs::exists(dir / "depth" / "0002.dpth"));
    const Scene back = load_scene(dir);
    ASSERT_EQ(back.views.size(), 3u);
    for (std::size_t i = 0; i < 3; ++i) {
        EXPECT_EQ(back.views[i].depth, scene.views[i].depth);
        EXPECT_EQ(back.views[i].image, scene.views[i].image);  // generator output is already 8-bit
        EXPECT_LT((back.views[i].pose.rotation - scene.views[i].pose.rotation).norm(), 1e-12);
        EXPECT_DOUBLE_EQ(back.views[i].intrinsics.fx, scene.views[i].intrinsics.fx);
    }

    fs::remove(dir / "depth" / "0002.dpth");
    try {
        load_scene(dir);
        FAIL() << "expected a load error";
    } catch (const Error& e) {
        EXPECT_EQ(e.code(), ErrorCode::Load);
        EXPECT_NE(std::string(e.what()).find("0002"), std::string::npos);
    }

    save_scene(scene, dir);
    nlohmann::json doc;
    std::ifstream(dir / "cameras.json") >> doc;
    auto& r = doc["views"][1]["rotation"];
    for (int c = 0; c < 3; ++c) r[c] = -r[c].get<double>();  // flip first row: det -1
    std::ofstream(dir / "cameras.json") << doc.dump();
    EXPECT_EQ(code_of([&] { load_scene(dir); }), ErrorCode::Validation);
    EXPECT_EQ(code_of([&] { load_scene(dir / "nowhere"); }), ErrorCode::Load);
}

TEST(Synthetic, Deterministic) {
    SyntheticSpec spec;
    spec.n_views = 4;
    spec.n_points = 5000;
    spec.texture = "checker";
    spec.image_size = 24;
    const Scene a = make_synthetic_scene(spec, 7), b = make_synthetic_scene(spec, 7), c = make_synthetic_scene(spec, 8);
    ASSERT_EQ(a.views.size(), 4u);
    bool any_diff = false;
    for (std::size_t i = 0; i < 4; ++i) {
        EXPECT_EQ(a.views[i].image, b.views[i].image);
        EXPECT_EQ(a.views[i].depth, b.views[i].depth);
        any_diff |= a.views[i].image != c.views[i].image;
    }
    EXPECT_TRUE(any_diff);
    spec.n_views = 1;
    EXPECT_EQ(code_of([&] { make_synthetic_scene(spec, 7); }), ErrorCode::Config);
}

TEST(Synthetic, DepthLiesOnGeneratedSurfaces) {
    SyntheticSpec spec;
    spec.n_views = 3;
    spec.image_size = 32;
    spec.n_points = 100;
    const Scene s = make_synthetic_scene(spec, 7);
    double worst = 0.0;
    int valid = 0;
    for (const auto& v : s.views) {
        for (int y = 0; y < v.depth.height; ++y)
            for (int x = 0; x < v.depth.width; ++x) {
                const double d = v.depth.at(y, x);
                if (d <= 0.0) continue;
                ++valid;
                worst = std::max(worst, surface_distance(backproject_pixel(Eigen::Vector2d(x, y), d, v)));
            }
    }
    EXPECT_GT(valid, 1000);
    EXPECT_LT(worst, 1e-5);
}

TEST(Synthetic, MultiViewConsistent) {
    SyntheticSpec spec;
    spec.n_views = 3;
    spec.image_size = 48;
    spec.n_points = 200;
    const Scene s = make_synthetic_scene(spec, 9);
    const auto& vi = s.views[0];
    const auto& vj = s.views[1];
    int tested = 0, matched = 0;
    for (int y = 0; y < 48; ++y)
        for (int x = 0; x < 48; ++x) {
            const double d = vi.depth.at(y, x);
            if (d <= 0.0) continue;
            const Eigen::Vector3d w = backproject_pixel(Eigen::Vector2d(x, y), d, vi);
            const auto pr = project_point(w, vj);
            const int u = static_cast<int>(std::lround(pr.pixel.x())), v = static_cast<int>(std::lround(pr.pixel.y()));
            if (u < 1 || v < 1 || u >= 47 || v >= 47) continue;
            bool occluded = false;  // also skip neighbourhoods straddling a depth edge
            for (int dy = -1; dy <= 1; ++dy)
                for (int dx = -1; dx <= 1; ++dx) occluded |= std::abs(vj.depth.at(v + dy, u + dx) - pr.depth) > 0.05 * pr.depth;
            if (occluded) continue;
            ++tested;
            bool found = false;
            for (int dy = -1; dy <= 1 && !found; ++dy)
                for (int dx = -1; dx <= 1 && !found; ++dx) {
                    double diff = 0.0;
                    for (int c = 0; c < 3; ++c) diff = std::max(diff, std::abs(double(vj.image.at(v + dy, u + dx, c)) - vi.image.at(y, x, c)));
                    found = diff <= 3.0 / 255.0;  // distant ground fades smoothly
                }
            matched += found;
        }
    EXPECT_GT(tested, 500);
    EXPECT_GE(matched, 0.97 * tested);
}
