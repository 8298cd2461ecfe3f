#include <gtest/gtest.h>

#include <algorithm>
#include <cstring>
#include <random>

#include "helpers.hpp"
#include "pcstyle/archive.hpp"
#include "pcstyle/error.hpp"
#include "pcstyle/renderer.hpp"

using namespace pcstyle;
using test_util::brute_splat;
using test_util::random_tensor;

namespace {

CameraView grid_view(int size, double f, double c) {
    CameraView v;
    v.intrinsics.fx = v.intrinsics.fy = f;
    v.intrinsics.cx = v.intrinsics.cy = c;
    v.intrinsics.width = v.intrinsics.height = size;
    return v;
}

FeaturePointCloud cloud_in_front(int n, int d, std::mt19937_64& rng) {
    FeaturePointCloud c;
    c.positions = Tensor({n, 3});
    std::uniform_real_distribution<double> xy(-1.0, 1.0), z(2.0, 5.0);
    for (int i = 0; i < n; ++i) {
        c.positions.at(i, 2) = z(rng);
        c.positions.at(i, 0) = xy(rng) * c.positions.at(i, 2) * 0.5;
        c.positions.at(i, 1) = xy(rng) * c.positions.at(i, 2) * 0.5;
    }
    c.features = random_tensor({n, d}, rng);
    c.source_view.assign(static_cast<std::size_t>(n), 0);
    return c;
}

DecoderConfig small_decoder(int in = 4) {
    DecoderConfig c;
    c.in_channels = in;
    c.widths = {4, 6, 8};
    c.head = 4;
    return c;
}

}  // namespace

TEST(Splat, SinglePointOnAxis) {
    SplatConfig cfg;
    cfg.K = 1;
    cfg.radius = 1.0;
    cfg.stride = 1;
    const CameraView view = grid_view(16, 10.0, 8.0);
    FeaturePointCloud cloud;
    cloud.positions = Tensor({1, 3}, 0.0);
    cloud.positions.at(0, 2) = 3.0;
    cloud.features = Tensor({1, 2});
    cloud.features.at(0, 0) = 0.25;
    cloud.features.at(0, 1) = -2.0;
    const SplatImage s = splat(cloud, view, cfg);
    for (int y = 0; y < 16; ++y)
        for (int x = 0; x < 16; ++x) {
            const bool centre = x == 8 && y == 8;
            EXPECT_EQ(s.mask.at(0, y, x), centre ? 1.0 : 0.0);
            EXPECT_EQ(s.features.at(0, y, x), centre ? 0.25 : 0.0);
            EXPECT_EQ(s.features.at(1, y, x), centre ? -2.0 : 0.0);
        }
}

TEST(Splat, NearerPointOccludes) {
    SplatConfig cfg;
    cfg.K = 1;
    cfg.radius = 1.5;
    cfg.stride = 1;
    const CameraView view = grid_view(16, 10.0, 8.0);
    FeaturePointCloud cloud;
    cloud.positions = Tensor({2, 3}, 0.0);
    cloud.positions.at(0, 2) = 2.0;
    cloud.positions.at(1, 2) = 1.0;
    cloud.features = Tensor({2, 1});
    cloud.features.at(0, 0) = 5.0;
    cloud.features.at(1, 0) = 7.0;
    const SplatImage s = splat(cloud, view, cfg);
    for (int y = 0; y < 16; ++y) {
        for (int x = 0; x < 16; ++x) {
            if (s.mask.at(0, y, x) > 0) {
                EXPECT_EQ(s.features.at(0, y, x), 7.0);
            }
        }
    }
}

TEST(Splat, DepthTieGoesToLowerIndex) {
    SplatConfig cfg;
    cfg.K = 1;
    cfg.stride = 1;
    const CameraView view = grid_view(16, 10.0, 8.0);
    FeaturePointCloud cloud;
    cloud.positions = Tensor({3, 3}, 0.0);
    for (int i = 0; i < 3; ++i) cloud.positions.at(i, 2) = 2.0;
    cloud.features = Tensor({3, 1});
    cloud.features.at(0, 0) = 1.0;
    cloud.features.at(1, 0) = 2.0;
    cloud.features.at(2, 0) = 3.0;
    EXPECT_EQ(splat(cloud, view, cfg).features.at(0, 8, 8), 1.0);
}

TEST(Splat, MatchesBruteForce) {
    std::mt19937_64 rng(1);
    CameraView view = grid_view(64, 40.0, 31.5);
    view.pose = CameraPose::look_at({0.3, -0.2, -0.5}, {0.0, 0.0, 3.0}, {0.0, -1.0, 0.0});
    for (int n : {200, 1000}) {
        const FeaturePointCloud cloud = cloud_in_front(n, 3, rng);
        for (int k : {1, 2, 8}) {
            SplatConfig cfg;
            cfg.K = k;
            cfg.radius = 2.5;
            cfg.blend = 1.5;
            const SplatImage s = splat(cloud, view, cfg);
            const Tensor ref = brute_splat(cloud.positions, cloud.features, view, cfg);
            EXPECT_LT(test_util::max_abs_diff(s.features, ref), 1e-6) << "n=" << n << " K=" << k;
        }
    }
}

TEST(Splat, WeightsSumToOne) {
    std::mt19937_64 rng(2);
    const FeaturePointCloud cloud = cloud_in_front(300, 1, rng);
    const SplatPlan plan = build_splat_plan(cloud.positions, grid_view(64, 40.0, 31.5), SplatConfig{});
    int covered = 0;
    for (int p = 0; p < plan.blend.height * plan.blend.width; ++p) {
        const int b = plan.blend.offset[static_cast<std::size_t>(p)], e = plan.blend.offset[static_cast<std::size_t>(p) + 1];
        EXPECT_LE(e - b, 8);
        if (e == b) {
            EXPECT_EQ(plan.mask[static_cast<std::size_t>(p)], 0.0);
            continue;
        }
        ++covered;
        double s = 0;
        for (int j = b; j < e; ++j) s += plan.blend.weight[static_cast<std::size_t>(j)];
        EXPECT_NEAR(s, 1.0, 1e-6);
        EXPECT_EQ(plan.mask[static_cast<std::size_t>(p)], 1.0);
    }
    EXPECT_EQ(covered, plan.covered);
    EXPECT_GT(covered, 0);
}

TEST(Splat, GradientWithRespectToFeatures) {
    std::mt19937_64 rng(3);
    const FeaturePointCloud cloud = cloud_in_front(10, 4, rng);
    SplatConfig cfg;
    cfg.radius = 3.0;
    const SplatPlan plan = build_splat_plan(cloud.positions, grid_view(64, 40.0, 31.5), cfg);
    EXPECT_LT(test_util::gradient_error([&](const ad::Var& v) { return ad::sum(splat(v, plan)); }, cloud.features), 1e-4);
    EXPECT_LT(test_util::gradient_error([&](const ad::Var& v) { return ad::sum(ad::square(splat(v, plan))); }, cloud.features),
              1e-4);
}

TEST(Splat, EverythingBehindCameraIsEmptyRender) {
    std::mt19937_64 rng(4);
    FeaturePointCloud cloud = cloud_in_front(20, 2, rng);
    for (int i = 0; i < 20; ++i) cloud.positions.at(i, 2) *= -1.0;
    try {
        (void)splat(cloud, grid_view(64, 40.0, 31.5), SplatConfig{});
        FAIL();
    } catch (const Error& e) {
        EXPECT_EQ(e.code(), ErrorCode::EmptyRender);
    }
    const Decoder dec = Decoder::init(small_decoder(2), 1);
    EXPECT_THROW((void)render_view(cloud, grid_view(64, 40.0, 31.5), SplatConfig{}, dec), Error);
}

TEST(Splat, ConfigValidation) {
    SplatConfig a;
    a.K = 0;
    EXPECT_THROW(a.validate(), Error);
    SplatConfig b;
    b.radius = 0.4;
    EXPECT_THROW(b.validate(), Error);
}

TEST(Decoder, ShapeRangeDeterminism) {
    std::mt19937_64 rng(5);
    const Decoder dec = Decoder::init(small_decoder(), 2);
    const Tensor zeros({4, 8, 8}, 0.0);
    const Tensor mask({1, 8, 8}, 0.0);
    const Tensor out = dec.forward(ad::constant(zeros), ad::constant(mask)).value();
    ASSERT_EQ(out.shape(), (Shape{3, 32, 32}));
    for (double v : out.data()) {
        EXPECT_TRUE(std::isfinite(v));
        EXPECT_GE(v, 0.0);
        EXPECT_LE(v, 1.0);
    }
    const Tensor f = random_tensor({4, 8, 8}, rng);
    const Tensor m = random_tensor({1, 8, 8}, rng, 0.0, 1.0);
    const Tensor a = dec.forward(ad::constant(f), ad::constant(m)).value();
    const Tensor b = dec.forward(ad::constant(f), ad::constant(m)).value();
    EXPECT_EQ(std::memcmp(a.ptr(), b.ptr(), a.size() * sizeof(double)), 0);
}

TEST(Decoder, ShapeMismatch) {
    const Decoder dec = Decoder::init(small_decoder(), 2);
    EXPECT_THROW((void)dec.forward(ad::constant(Tensor({3, 8, 8})), ad::constant(Tensor({1, 8, 8}))), Error);
    EXPECT_THROW((void)dec.forward(ad::constant(Tensor({4, 6, 8})), ad::constant(Tensor({1, 6, 8}))), Error);
    EXPECT_THROW((void)dec.forward(ad::constant(Tensor({4, 8, 8})), ad::constant(Tensor({1, 4, 8}))), Error);
}

TEST(Decoder, EveryInputCellInfluencesTheMean) {
    std::mt19937_64 rng(6);
    const Decoder dec = Decoder::init(small_decoder(), 3);
    ad::Var f = ad::Var::parameter(random_tensor({4, 8, 8}, rng));
    const ad::Var m = ad::constant(Tensor({1, 8, 8}, 1.0));
    ad::backward(ad::mean(dec.forward(f, m)));
    const Tensor g = f.grad();
    for (int y = 0; y < 8; ++y)
        for (int x = 0; x < 8; ++x) {
            double cell = 0;
            for (int c = 0; c < 4; ++c) cell += std::abs(g.at(c, y, x));
            EXPECT_GT(cell, 0.0) << y << "," << x;
        }
    // The analytic gradient agrees with central differences.
    const Tensor small = random_tensor({4, 4, 4}, rng);
    const ad::Var m4 = ad::constant(Tensor({1, 4, 4}, 1.0));
    EXPECT_LT(test_util::gradient_error([&](const ad::Var& v) { return ad::mean(dec.forward(v, m4)); }, small), 1e-5);
}

TEST(Decoder, StoreRestore) {
    std::mt19937_64 rng(7);
    const Decoder dec = Decoder::init(small_decoder(), 4);
    Archive a;
    dec.store(a, "decoder.");
    const Decoder back = Decoder::restore(a, "decoder.");
    EXPECT_EQ(back.config().widths, dec.config().widths);
    EXPECT_EQ(hash_params(back.parameters()), hash_params(dec.parameters()));
    const Tensor f = random_tensor({4, 8, 8}, rng);
    const Tensor m({1, 8, 8}, 1.0);
    EXPECT_EQ(test_util::max_abs_diff(back.forward(ad::constant(f), ad::constant(m)).value(),
                                      dec.forward(ad::constant(f), ad::constant(m)).value()),
              0.0);
}

TEST(RenderView, ComposesSplatAndDecode) {
    std::mt19937_64 rng(8);
    const FeaturePointCloud cloud = cloud_in_front(400, 4, rng);
    const Decoder dec = Decoder::init(small_decoder(), 5);
    const CameraView view = grid_view(64, 40.0, 31.5);
    const Image a = render_view(cloud, view, SplatConfig{}, dec);
    const Image b = render_view(cloud, view, SplatConfig{}, dec);
    EXPECT_EQ(a.height, 64);
    EXPECT_EQ(a.width, 64);
    EXPECT_EQ(a.rgb, b.rgb);
    const SplatImage s = splat(cloud, view, SplatConfig{});
    EXPECT_EQ(decode(s.features, s.mask, dec).rgb, a.rgb);
}
