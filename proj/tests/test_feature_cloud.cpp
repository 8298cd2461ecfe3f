#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>
#include <map>
#include <random>

#include "helpers.hpp"
#include "pcstyle/error.hpp"
#include "pcstyle/feature_cloud.hpp"
#include "pcstyle/scene.hpp"

using namespace pcstyle;
namespace fs = std::filesystem;

namespace {

EncoderConfig small_encoder() {
    EncoderConfig c;
    c.channels = {8, 12, 16};
    return c;
}

Image random_image(int h, int w, std::mt19937_64& rng) {
    std::uniform_real_distribution<float> u(0.0f, 1.0f);
    Image img(h, w);
    for (auto& v : img.rgb) v = u(rng);
    return img;
}

// Fronto-parallel plane at depth 2, seen by `n` cameras translated along x.
Scene plane_scene(int n, int size, double spacing) {
    Scene s;
    s.name = "plane";
    std::mt19937_64 rng(4);
    for (int v = 0; v < n; ++v) {
        CameraView view;
        view.intrinsics.fx = view.intrinsics.fy = size;
        view.intrinsics.cx = view.intrinsics.cy = 0.5 * (size - 1);
        view.intrinsics.width = view.intrinsics.height = size;
        view.pose.translation = Eigen::Vector3d(-spacing * v, 0.0, 0.0);
        view.image = random_image(size, size, rng);
        view.depth = DepthMap(size, size, 2.0f);
        s.views.push_back(std::move(view));
    }
    return s;
}

FeaturePointCloud random_cloud(int n, int d, std::mt19937_64& rng, double extent = 1.0) {
    FeaturePointCloud c;
    c.positions = test_util::random_tensor({n, 3}, rng, -extent, extent);
    c.features = test_util::random_tensor({n, d}, rng);
    c.source_view.resize(static_cast<std::size_t>(n));
    for (int i = 0; i < n; ++i) c.source_view[static_cast<std::size_t>(i)] = static_cast<std::uint32_t>(i % 3);
    return c;
}

}  // namespace

TEST(Encoder, OutputShape) {
    EncoderConfig ref;
    const ImageEncoder enc = ImageEncoder::random(ref, 1);
    std::mt19937_64 rng(1);
    const Tensor f = enc.encode(random_image(64, 64, rng));
    EXPECT_EQ(f.shape(), (Shape{256, 16, 16}));
    const ImageEncoder small = ImageEncoder::random(small_encoder(), 1);
    EXPECT_EQ(small.encode(random_image(10, 13, rng)).shape(), (Shape{16, 3, 4}));
    EXPECT_EQ(small.channels(), 16);
    EXPECT_EQ(small.stride(), 4);
    try {
        (void)small.encode(random_image(3, 8, rng));
        FAIL();
    } catch (const Error& e) {
        EXPECT_EQ(e.code(), ErrorCode::Size);
    }
}

TEST(Encoder, ConstantImageGivesConstantInterior) {
    const ImageEncoder enc = ImageEncoder::random(small_encoder(), 2);
    Image img(32, 32);
    for (int y = 0; y < 32; ++y)
        for (int x = 0; x < 32; ++x) {
            img.at(y, x, 0) = 0.2f;
            img.at(y, x, 1) = 0.6f;
            img.at(y, x, 2) = 0.9f;
        }
    const Tensor f = enc.encode(img);
    for (int c = 0; c < f.dim(0); ++c)
        for (int y = 1; y < f.dim(1) - 1; ++y)
            for (int x = 1; x < f.dim(2) - 1; ++x) EXPECT_NEAR(f.at(c, y, x), f.at(c, 1, 1), 1e-5);
}

TEST(Encoder, TranslationCovariance) {
    const ImageEncoder enc = ImageEncoder::random(small_encoder(), 3);
    std::mt19937_64 rng(3);
    const Image big = random_image(40, 44, rng);
    Image a(32, 32), b(32, 32);
    for (int y = 0; y < 32; ++y)
        for (int x = 0; x < 32; ++x)
            for (int c = 0; c < 3; ++c) {
                a.at(y, x, c) = big.at(y, x, c);
                b.at(y, x, c) = big.at(y + 4, x + 4, c);
            }
    const Tensor fa = enc.encode(a), fb = enc.encode(b);
    double worst = 0.0;
    for (int c = 0; c < fa.dim(0); ++c)
        for (int y = 1; y < 6; ++y)
            for (int x = 1; x < 6; ++x) worst = std::max(worst, std::abs(fa.at(c, y + 1, x + 1) - fb.at(c, y, x)));
    EXPECT_LT(worst, 1e-5);
}

TEST(Encoder, SaveLoadRoundTrip) {
    const fs::path p = fs::temp_directory_path() / "pcstyle_test_encoder.pcsa";
    const ImageEncoder enc = ImageEncoder::random(small_encoder(), 4);
    enc.save(p);
    const ImageEncoder back = ImageEncoder::load(p);
    std::mt19937_64 rng(4);
    const Image img = random_image(16, 16, rng);
    EXPECT_EQ(enc.encode(img), back.encode(img));
    EXPECT_THROW(ImageEncoder::load(fs::temp_directory_path() / "pcstyle_missing.pcsa"), Error);
}

TEST(FeatureCloud, CountsWithoutDedup) {
    const Scene s = plane_scene(4, 64, 0.3);
    const ImageEncoder enc = ImageEncoder::random(small_encoder(), 5);
    CloudBuildOptions opt;
    opt.voxel = std::nullopt;
    const FeaturePointCloud cloud = build_feature_cloud(s, enc, opt);
    EXPECT_EQ(cloud.size(), 4 * 256);
    EXPECT_EQ(cloud.dim(), 16);

    Scene holes = s;
    for (int y = 0; y < 32; ++y)
        for (int x = 0; x < 64; ++x) holes.views[2].depth.at(y, x) = 0.0f;
    const FeaturePointCloud h = build_feature_cloud(holes, enc, opt);
    EXPECT_EQ(std::count(h.source_view.begin(), h.source_view.end(), 2u), 128);
    EXPECT_EQ(h.size(), 3 * 256 + 128);

    Scene empty = s;
    for (auto& v : empty.views) std::fill(v.depth.values.begin(), v.depth.values.end(), 0.0f);
    try {
        build_feature_cloud(empty, enc, opt);
        FAIL();
    } catch (const Error& e) {
        EXPECT_EQ(e.code(), ErrorCode::EmptyCloud);
    }
}

TEST(FeatureCloud, DedupMergesSharedPlane) {
    // Two views of one plane; a 0.01 voxel merges samples that land close together.
    const Scene s = plane_scene(2, 64, 0.125);
    const ImageEncoder enc = ImageEncoder::random(small_encoder(), 6);
    CloudBuildOptions raw_opt;
    raw_opt.voxel = std::nullopt;
    const FeaturePointCloud raw = build_feature_cloud(s, enc, raw_opt);
    CloudBuildOptions opt;
    opt.voxel = 0.01;
    const FeaturePointCloud merged = build_feature_cloud(s, enc, opt);
    EXPECT_LT(merged.size(), raw.size());
    const double reach = 0.01 * std::sqrt(3.0);
    for (int i = 0; i < merged.size(); ++i) {
        double best = std::numeric_limits<double>::infinity();
        for (int j = 0; j < raw.size(); ++j) {
            double d2 = 0.0;
            for (int a = 0; a < 3; ++a) d2 += std::pow(merged.positions.at(i, a) - raw.positions.at(j, a), 2);
            best = std::min(best, std::sqrt(d2));
        }
        EXPECT_LE(best, reach);
    }
}

TEST(FeatureCloud, PointsReprojectIntoSourceCell) {
    SyntheticSpec spec;
    spec.n_views = 3;
    spec.image_size = 32;
    spec.n_points = 100;
    const Scene s = make_synthetic_scene(spec, 7);
    const ImageEncoder enc = ImageEncoder::random(small_encoder(), 7);
    CloudBuildOptions opt;
    opt.voxel = std::nullopt;
    const FeaturePointCloud cloud = build_feature_cloud(s, enc, opt);
    ASSERT_GT(cloud.size(), 0);
    EXPECT_TRUE(cloud.features.all_finite());
    for (int i = 0; i < cloud.size(); ++i) {
        const CameraView& v = s.views[cloud.source_view[static_cast<std::size_t>(i)]];
        const CameraIntrinsics g = v.intrinsics.downscaled(4);
        const auto pr = project_point({cloud.positions.at(i, 0), cloud.positions.at(i, 1), cloud.positions.at(i, 2)}, g, v.pose);
        const double cx = std::round(pr.pixel.x()), cy = std::round(pr.pixel.y());
        EXPECT_LE(std::abs(pr.pixel.x() - cx), 0.5);
        EXPECT_LE(std::abs(pr.pixel.y() - cy), 0.5);
        EXPECT_LE(std::max(std::abs(pr.pixel.x() - cx), std::abs(pr.pixel.y() - cy)), 0.2);
    }
    // Same inputs, same bits.
    EXPECT_EQ(build_feature_cloud(s, enc, opt).features, cloud.features);
}

TEST(VoxelDedup, SingleVoxelAverages) {
    FeaturePointCloud c;
    c.positions = Tensor({3, 3}, {0.1, 0.1, 0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7});
    c.features = Tensor({3, 2}, {1, 2, 3, 4, 5, 9});
    c.source_view = {2, 0, 1};
    const FeaturePointCloud out = voxel_dedup(c, 1.0);
    ASSERT_EQ(out.size(), 1);
    EXPECT_NEAR(out.positions.at(0, 0), 0.8 / 3, 1e-15);
    EXPECT_NEAR(out.positions.at(0, 2), 1.2 / 3, 1e-15);
    EXPECT_NEAR(out.features.at(0, 0), 3.0, 1e-15);
    EXPECT_NEAR(out.features.at(0, 1), 5.0, 1e-15);
    EXPECT_EQ(out.source_view[0], 2u);  // lowest-index member
}

TEST(VoxelDedup, SeparatedPointsUnchanged) {
    FeaturePointCloud c;
    c.positions = Tensor({3, 3}, {0.05, 0.05, 0.05, 1.05, 0.05, 0.05, 0.05, 2.05, 0.05});
    c.features = Tensor({3, 1}, {1, 2, 3});
    c.source_view = {0, 1, 2};
    const FeaturePointCloud out = voxel_dedup(c, 0.5);
    ASSERT_EQ(out.size(), 3);
    std::multiset<double> got(out.features.data().begin(), out.features.data().end());
    EXPECT_EQ(got, (std::multiset<double>{1, 2, 3}));
    EXPECT_THROW(voxel_dedup(c, 0.0), Error);
    EXPECT_THROW(voxel_dedup(c, -1.0), Error);
}

TEST(VoxelDedup, MatchesHashGridOracle) {
    std::mt19937_64 rng(8);
    for (int trial = 0; trial < 5; ++trial) {
        const FeaturePointCloud c = random_cloud(400, 5, rng);
        const double voxel = 0.2 + 0.1 * trial;
        struct Acc {
            std::array<double, 3> p{};
            std::vector<double> f = std::vector<double>(5, 0.0);
            int n = 0;
            std::uint32_t tag = 0;
        };
        std::map<std::array<long long, 3>, Acc> grid;
        for (int i = 0; i < c.size(); ++i) {
            std::array<long long, 3> k;
            for (int a = 0; a < 3; ++a) k[static_cast<std::size_t>(a)] = static_cast<long long>(std::floor(c.positions.at(i, a) / voxel));
            Acc& acc = grid[k];
            if (acc.n == 0) acc.tag = c.source_view[static_cast<std::size_t>(i)];
            for (int a = 0; a < 3; ++a) acc.p[static_cast<std::size_t>(a)] += c.positions.at(i, a);
            for (int d = 0; d < 5; ++d) acc.f[static_cast<std::size_t>(d)] += c.features.at(i, d);
            ++acc.n;
        }
        const FeaturePointCloud out = voxel_dedup(c, voxel);
        ASSERT_EQ(out.size(), static_cast<int>(grid.size()));
        int row = 0;
        for (const auto& [key, acc] : grid) {
            for (int a = 0; a < 3; ++a) EXPECT_EQ(out.positions.at(row, a), acc.p[static_cast<std::size_t>(a)] / acc.n);
            for (int d = 0; d < 5; ++d) EXPECT_EQ(out.features.at(row, d), acc.f[static_cast<std::size_t>(d)] / acc.n);
            EXPECT_EQ(out.source_view[static_cast<std::size_t>(row)], acc.tag);
            ++row;
        }
    }
}

TEST(CloudFile, RoundTripAndHeader) {
    std::mt19937_64 rng(9);
    FeaturePointCloud c = random_cloud(7, 4, rng);
    c.colors = test_util::random_tensor({7, 3}, rng, 0.0, 1.0);
    const fs::path p = fs::temp_directory_path() / "pcstyle_test_cloud.fpcl";
    write_cloud(p, c, CloudFileExtras{"oil painting"});
    std::ifstream in(p, std::ios::binary);
    char magic[4];
    std::uint32_t n = 0, d = 0;
    in.read(magic, 4);
    in.read(reinterpret_cast<char*>(&n), 4);
    in.read(reinterpret_cast<char*>(&d), 4);
    EXPECT_EQ(std::string(magic, 4), "FPCL");
    EXPECT_EQ(n, 7u);
    EXPECT_EQ(d, 4u);

    CloudFileExtras extras;
    const FeaturePointCloud back = read_cloud(p, &extras);
    EXPECT_EQ(extras.style_text, "oil painting");
    EXPECT_EQ(back.source_view, c.source_view);
    ASSERT_TRUE(back.colors.has_value());
    for (std::size_t i = 0; i < c.features.size(); ++i)
        EXPECT_EQ(back.features[i], static_cast<double>(static_cast<float>(c.features[i])));
    for (std::size_t i = 0; i < c.positions.size(); ++i)
        EXPECT_EQ(back.positions[i], static_cast<double>(static_cast<float>(c.positions[i])));

    std::ofstream(p, std::ios::binary) << "XXXX";
    EXPECT_THROW(read_cloud(p), Error);
}
