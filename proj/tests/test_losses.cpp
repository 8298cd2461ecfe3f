#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>
#include <random>

#include "helpers.hpp"
#include "json.hpp"
#include "pcstyle/error.hpp"
#include "pcstyle/losses.hpp"

using namespace pcstyle;
using test_util::gradient_error;
using test_util::random_tensor;
namespace fs = std::filesystem;

namespace {

Tensor solid(int size, double r, double g, double b) {
    Tensor t({3, size, size});
    const double c[3] = {r, g, b};
    for (int ch = 0; ch < 3; ++ch)
        for (int i = 0; i < size * size; ++i) t[static_cast<std::size_t>(ch * size * size + i)] = c[ch];
    return t;
}

Tensor unit_column(const Tensor& projection, int k) {
    const int e = projection.dim(0);
    Tensor v({e});
    double n = 0;
    for (int r = 0; r < e; ++r) n += projection.at(r, k) * projection.at(r, k);
    for (int r = 0; r < e; ++r) v[static_cast<std::size_t>(r)] = projection.at(r, k) / std::sqrt(n);
    return v;
}

Tensor minus(const Tensor& a, const Tensor& b) {
    Tensor out = a;
    for (std::size_t i = 0; i < out.size(); ++i) out[i] -= b[i];
    return out;
}

Tensor basis(int n, int k, double s = 1.0) {
    Tensor v({n}, 0.0);
    v[static_cast<std::size_t>(k)] = s;
    return v;
}

double manual_cos_loss(const Tensor& a, const Tensor& b) {
    double d = 0, na = 0, nb = 0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        d += a[i] * b[i];
        na += a[i] * a[i];
        nb += b[i] * b[i];
    }
    return 1.0 - d / std::sqrt(na * nb);
}

// Exported embedder whose image embedding is the normalised raw histogram.
fs::path histogram_embedder_file() {
    nlohmann::json doc;
    doc["dim"] = 64;
    doc["input_size"] = 8;
    std::vector<std::vector<double>> rows(64, std::vector<double>(64, 0.0));
    for (int i = 0; i < 64; ++i) rows[static_cast<std::size_t>(i)][static_cast<std::size_t>(i)] = 1.0;
    doc["image_projection"] = rows;
    doc["texts"] = nlohmann::json::object();
    const fs::path p = fs::temp_directory_path() / "pcstyle_test_histogram_embedder.json";
    std::ofstream(p) << doc.dump();
    return p;
}

}  // namespace

TEST(CosineDirection, Examples) {
    EXPECT_NEAR(cosine_direction_loss(basis(4, 0), basis(4, 0)), 0.0, 1e-15);
    EXPECT_NEAR(cosine_direction_loss(basis(4, 0), basis(4, 0, -3.0)), 2.0, 1e-15);
    EXPECT_NEAR(cosine_direction_loss(basis(4, 0), basis(4, 2)), 1.0, 1e-15);
    EXPECT_EQ(cosine_direction_loss(Tensor({4}, 0.0), basis(4, 1)), 1.0);
    EXPECT_EQ(cosine_direction_loss(basis(4, 1), Tensor({4}, 1e-10)), 1.0);
    std::mt19937_64 rng(1);
    for (int i = 0; i < 20; ++i) {
        const Tensor a = random_tensor({6}, rng), b = random_tensor({6}, rng);
        const double l = cosine_direction_loss(a, b);
        EXPECT_NEAR(l, manual_cos_loss(a, b), 1e-12);
        EXPECT_GE(l, 0.0);
        EXPECT_LE(l, 2.0);
    }
}

TEST(DirectionalLoss, DegenerateAndConstructed) {
    const StubEmbedder emb(3, 16, 8);
    const TextBank bank(emb, {"{}", "a {} image"});
    const Tensor content = solid(8, 0, 0, 0);
    EXPECT_EQ(directional_loss(ad::constant(content), content, "oil painting", "a Photo", bank).item(), 1.0);

    // Bin-centre colours give one-hot histograms, so embeddings are normalised projection columns.
    const Tensor white = solid(8, 1, 1, 1);
    const Tensor red = solid(8, 1, 0, 0);
    const Tensor& P = emb.projection();
    const Tensor delta = minus(unit_column(P, 63), unit_column(P, 0));
    EXPECT_NEAR(directional_loss(ad::constant(white), content, delta, emb).item(), 0.0, 1e-6);
    const Tensor delta_red = minus(unit_column(P, 48), unit_column(P, 0));
    EXPECT_NEAR(directional_loss(ad::constant(red), content, delta_red, emb).item(), 0.0, 1e-6);
    // Larger inputs are resized first.
    EXPECT_NEAR(directional_loss(ad::constant(solid(20, 1, 1, 1)), solid(12, 0, 0, 0), delta, emb).item(), 0.0, 1e-6);
}

TEST(DirectionalLoss, SwappingTextsMirrorsTheLoss) {
    std::mt19937_64 rng(2);
    const StubEmbedder emb(3, 16, 8);
    const TextBank bank(emb, {"{}", "a {} image"});
    const Tensor content = random_tensor({3, 8, 8}, rng, 0, 1);
    const Tensor rendered = random_tensor({3, 8, 8}, rng, 0, 1);
    const double l = directional_loss(ad::constant(rendered), content, "oil painting", "a Photo", bank).item();
    const double m = directional_loss(ad::constant(rendered), content, "a Photo", "oil painting", bank).item();
    EXPECT_NEAR(l + m, 2.0, 1e-12);
    EXPECT_NEAR(gs_loss(ad::constant(rendered), content, "oil painting", bank).item(), l, 1e-15);
    EXPECT_EQ(gs_loss(ad::constant(content), content, "oil painting", bank).item(), 1.0);
}

TEST(PatchLoss, RejectionExtremes) {
    std::mt19937_64 rng(3);
    const StubEmbedder emb(3, 16, 8);
    const Tensor content = random_tensor({3, 16, 16}, rng, 0, 1);
    const Tensor rendered = random_tensor({3, 16, 16}, rng, 0, 1);
    const Tensor delta = random_tensor({16}, rng);
    PatchConfig cfg;
    cfg.n_patches = 6;
    cfg.patch_size = 8;
    cfg.seed = 5;
    cfg.tau = 2.0;
    EXPECT_EQ(patch_loss(ad::constant(rendered), content, delta, emb, cfg).item(), 0.0);
    cfg.tau = 0.0;
    const auto terms = patch_directional_losses(ad::constant(rendered), content, delta, emb, cfg);
    double mean = 0;
    for (const auto& t : terms) {
        EXPECT_GT(t.item(), 0.0);
        mean += t.item() / 6;
    }
    EXPECT_NEAR(patch_loss(ad::constant(rendered), content, delta, emb, cfg).item(), mean, 1e-12);
}

TEST(PatchLoss, MatchesIndependentRecomputation) {
    std::mt19937_64 rng(4);
    const StubEmbedder emb(7, 16, 8);
    const Tensor content = random_tensor({3, 24, 20}, rng, 0, 1);
    const Tensor rendered = random_tensor({3, 24, 20}, rng, 0, 1);
    const Tensor delta = random_tensor({16}, rng);
    PatchConfig cfg;
    cfg.n_patches = 4;
    cfg.patch_size = 12;
    cfg.seed = 11;
    cfg.tau = 0.9;

    const Tensor e_content = emb.embed_image(ad::resample(ad::constant(content), ad::bilinear_resize_map(24, 20, 8, 8))).value();
    std::mt19937_64 draw(cfg.seed);
    double expected = 0;
    for (int i = 0; i < 4; ++i) {
        const ad::SampleMap map = patch_sample_map(24, 20, 12, cfg.distortion, 8, draw);
        const Tensor e = emb.embed_image(ad::resample(ad::constant(rendered), map)).value();
        const double l = manual_cos_loss(minus(e, e_content), delta);
        expected += (l <= cfg.tau ? 0.0 : l) / 4;
    }
    const double got = patch_loss(ad::constant(rendered), content, delta, emb, cfg).item();
    EXPECT_NEAR(got, expected, 1e-12);
    // Bit-for-bit reproducible.
    EXPECT_EQ(patch_loss(ad::constant(rendered), content, delta, emb, cfg).item(), got);
}

TEST(PatchLoss, SampleMapStaysInsideTheImage) {
    std::mt19937_64 rng(5);
    for (int trial = 0; trial < 20; ++trial) {
        const ad::SampleMap map = patch_sample_map(30, 40, 16, 0.5, 8, rng);
        // A constant image maps to values in [0, 1]: either the constant or the zero fill.
        const Tensor out = ad::resample(ad::constant(solid(1, 1, 1, 1).reshaped({3, 1, 1})), ad::bilinear_resize_map(1, 1, 30, 40))
                               .value();
        const Tensor warped = ad::resample(ad::constant(out), map).value();
        ASSERT_EQ(warped.shape(), (Shape{3, 8, 8}));
        for (double v : warped.data()) {
            EXPECT_GE(v, -1e-12);
            EXPECT_LE(v, 1.0 + 1e-12);
        }
    }
}

TEST(PatchLoss, OversizedPatchIsConfigError) {
    const StubEmbedder emb(3, 16, 8);
    PatchConfig cfg;
    cfg.patch_size = 17;
    cfg.n_patches = 2;
    try {
        (void)patch_loss(ad::constant(solid(16, 0.5, 0.5, 0.5)), solid(16, 0, 0, 0), basis(16, 0), emb, cfg);
        FAIL();
    } catch (const Error& e) {
        EXPECT_EQ(e.code(), ErrorCode::Config);
    }
    PatchConfig bad;
    bad.tau = 2.5;
    EXPECT_THROW(bad.validate(100, 100), Error);
    bad.tau = 0.7;
    bad.n_patches = 0;
    EXPECT_THROW(bad.validate(100, 100), Error);
}

TEST(DivergenceLoss, PairSampling) {
    std::mt19937_64 rng(6);
    const auto all = sample_style_pairs({"a", "b", "c"}, 1.0, rng);
    EXPECT_EQ(all, (std::vector<std::pair<int, int>>{{0, 1}, {0, 2}, {1, 2}}));
    // Same-style pairs never appear.
    const auto some = sample_style_pairs({"a", "a", "b", "b"}, 1.0, rng);
    EXPECT_EQ(some, (std::vector<std::pair<int, int>>{{0, 2}, {0, 3}, {1, 2}, {1, 3}}));
    EXPECT_EQ(sample_style_pairs({"a", "b", "c", "d", "e"}, 0.8, rng).size(), 8u);
    EXPECT_EQ(sample_style_pairs({"a", "b"}, 0.8, rng).size(), 1u);
    std::mt19937_64 r1(9), r2(9);
    EXPECT_EQ(sample_style_pairs({"a", "b", "c", "d", "e"}, 0.5, r1), sample_style_pairs({"a", "b", "c", "d", "e"}, 0.5, r2));
    try {
        (void)sample_style_pairs({"a", "a"}, 0.8, rng);
        FAIL();
    } catch (const Error& e) {
        EXPECT_EQ(e.code(), ErrorCode::Config);
    }
}

TEST(DivergenceLoss, Examples) {
    std::mt19937_64 rng(7);
    const Tensor e = random_tensor({8}, rng);
    const Tensor t1 = random_tensor({8}, rng), t2 = random_tensor({8}, rng);
    EXPECT_EQ(divergence_loss({ad::constant(e), ad::constant(e)}, {t1, t2}, {{0, 1}}).item(), 1.0);

    const StubEmbedder emb(3, 16, 8);
    const Tensor& P = emb.projection();
    const Tensor white = unit_column(P, 63), black = unit_column(P, 0);
    const Tensor img_white = emb.embed_image(ad::constant(solid(8, 1, 1, 1))).value();
    const Tensor img_black = emb.embed_image(ad::constant(solid(8, 0, 0, 0))).value();
    EXPECT_NEAR(divergence_loss({ad::constant(img_white), ad::constant(img_black)}, {white, black}, {{0, 1}}).item(), 0.0, 1e-6);

    // Swapping the members of every pair changes nothing.
    std::vector<ad::Var> imgs;
    std::vector<Tensor> texts;
    for (int i = 0; i < 4; ++i) {
        imgs.push_back(ad::constant(random_tensor({8}, rng)));
        texts.push_back(random_tensor({8}, rng));
    }
    const double fwd = divergence_loss(imgs, texts, {{0, 1}, {1, 3}, {2, 3}}).item();
    std::vector<ad::Var> rimgs(imgs.rbegin(), imgs.rend());
    std::vector<Tensor> rtexts(texts.rbegin(), texts.rend());
    const double rev = divergence_loss(rimgs, rtexts, {{2, 3}, {0, 2}, {0, 1}}).item();
    EXPECT_NEAR(fwd, rev, 1e-12);
    double manual = 0;
    for (auto [i, j] : std::vector<std::pair<int, int>>{{0, 1}, {1, 3}, {2, 3}})
        manual += manual_cos_loss(minus(imgs[static_cast<std::size_t>(i)].value(), imgs[static_cast<std::size_t>(j)].value()),
                                  minus(texts[static_cast<std::size_t>(i)], texts[static_cast<std::size_t>(j)])) / 3;
    EXPECT_NEAR(fwd, manual, 1e-12);
}

TEST(DivergenceLoss, FromRenders) {
    std::mt19937_64 rng(8);
    const StubEmbedder emb(3, 16, 8);
    const TextBank bank(emb, {"{}", "{} art"});
    std::vector<std::pair<ad::Var, std::string>> renders;
    for (const char* s : {"oil painting", "watercolor", "sketch"}) renders.emplace_back(ad::constant(random_tensor({3, 8, 8}, rng, 0, 1)), s);
    const double l = divergence_loss(renders, bank, 1.0, 3).item();
    double manual = 0;
    for (auto [i, j] : std::vector<std::pair<int, int>>{{0, 1}, {0, 2}, {1, 2}}) {
        const auto& [ai, si] = renders[static_cast<std::size_t>(i)];
        const auto& [aj, sj] = renders[static_cast<std::size_t>(j)];
        manual += manual_cos_loss(minus(emb.embed_image(ai).value(), emb.embed_image(aj).value()),
                                  minus(bank.embedding(si), bank.embedding(sj))) / 3;
    }
    EXPECT_NEAR(l, manual, 1e-12);
    renders.resize(1);
    EXPECT_THROW((void)divergence_loss(renders, bank, 0.8, 3), Error);
}

TEST(ContentDisparity, Examples) {
    std::mt19937_64 rng(9);
    const StubEmbedder emb(3, 16, 8);
    const Tensor a = random_tensor({3, 8, 8}, rng, 0, 1), b = random_tensor({3, 8, 8}, rng, 0, 1);
    EXPECT_NEAR(content_disparity(a, a, emb), 0.0, 1e-12);
    EXPECT_EQ(content_disparity(a, b, emb), content_disparity(b, a, emb));
    const auto hist = make_embedder("export:" + histogram_embedder_file().string());
    EXPECT_NEAR(content_disparity(solid(8, 0, 0, 0), solid(8, 1, 1, 1), *hist), 1.0, 1e-12);
    EXPECT_NEAR(content_disparity(solid(8, 1, 0, 0), solid(8, 0, 1, 0), *hist), 1.0, 1e-12);
    EXPECT_EQ(embedding_disparity(Tensor({4}, 0.0), basis(4, 0)), 1.0);
}

TEST(StyleTotal, Sums) {
    EXPECT_DOUBLE_EQ(style_total(0.5, 0.3, 0.1), 0.7);
    EXPECT_EQ(style_total(0, 0, 0), 0.0);
    std::mt19937_64 rng(10);
    std::uniform_real_distribution<double> u(0, 2);
    for (int i = 0; i < 10; ++i) {
        const double p = u(rng), d = u(rng), c = u(rng);
        EXPECT_EQ(style_total(p, d, c), p + d - c);
    }
    LossReport r;
    r.patch = 0.5;
    r.dir = 0.3;
    r.cd = 0.1;
    r.feat = 2.0;
    r.rgb = 4.0;
    r.tv = 10.0;
    r.gs = 0.25;
    LossWeights w;
    w.style = 2.0;
    w.feat = 3.0;
    w.rgb = 0.5;
    w.tv = 0.1;
    finalize_report(r, w);
    EXPECT_DOUBLE_EQ(r.total_style, 0.7);
    EXPECT_DOUBLE_EQ(r.total_content, 8.0);
    const auto j = r.to_json();
    for (const char* k : {"patch", "dir", "cd", "feat", "rgb", "tv", "gs", "total_style", "total_content", "total"}) {
        EXPECT_TRUE(j.contains(k)) << k;
    }
}

TEST(ContentLoss, Examples) {
    std::mt19937_64 rng(11);
    EncoderConfig ec;
    ec.channels = {4, 6, 8};
    const ImageEncoder enc = ImageEncoder::random(ec, 2);
    const Tensor gt = random_tensor({3, 12, 12}, rng, 0.0, 0.85);
    const ContentLoss same = content_loss(ad::constant(gt), gt, enc);
    EXPECT_EQ(same.feat.item(), 0.0);
    EXPECT_EQ(same.rgb.item(), 0.0);

    Tensor shifted = gt;
    for (double& v : shifted.data()) v += 0.1;
    EXPECT_NEAR(content_loss(ad::constant(shifted), gt, enc).rgb.item(), 0.1, 1e-12);

    const Tensor other = random_tensor({3, 12, 12}, rng, 0, 1);
    const ContentLoss l = content_loss(ad::constant(other), gt, enc);
    const auto sa = enc.stages(ad::constant(other));
    const auto sb = enc.stages(ad::constant(gt));
    double feat = 0;
    for (int s = 0; s < 3; ++s) {
        const Tensor& x = sa[static_cast<std::size_t>(s)].value();
        const Tensor& y = sb[static_cast<std::size_t>(s)].value();
        double acc = 0;
        for (int c = 0; c < x.dim(0); ++c)
            for (int i = 0; i < x.dim(1); ++i)
                for (int k = 0; k < x.dim(2); ++k) acc += (x.at(c, i, k) - y.at(c, i, k)) * (x.at(c, i, k) - y.at(c, i, k));
        feat += acc / static_cast<double>(x.size()) / 3;
    }
    EXPECT_NEAR(l.feat.item(), feat, 1e-6);
    EXPECT_GT(l.feat.item(), 0.0);
    EXPECT_THROW((void)content_loss(ad::constant(Tensor({3, 8, 8})), gt, enc), Error);
}

TEST(TvLoss, Examples) {
    EXPECT_EQ(tv_loss(ad::constant(solid(4, 0.3, 0.6, 0.1))).item(), 0.0);
    // Vertical step of height h between columns 1 and 2 of a 4x4 single-channel image:
    // 4 of the 12 horizontal differences equal h, none of the vertical ones.
    const double h = 0.7;
    Tensor step({1, 4, 4}, 0.0);
    for (int y = 0; y < 4; ++y)
        for (int x = 2; x < 4; ++x) step.at(0, y, x) = h;
    EXPECT_NEAR(tv_loss(ad::constant(step)).item(), h * h * 4.0 / 12.0, 1e-15);
}

TEST(LossGradients, MatchFiniteDifferences) {
    std::mt19937_64 rng(12);
    const StubEmbedder emb(5, 16, 8);
    const TextBank bank(emb, {"{}", "a {} picture"});
    const Tensor content = random_tensor({3, 8, 8}, rng, 0.1, 0.9);
    const Tensor probe = random_tensor({3, 8, 8}, rng, 0.1, 0.9);
    constexpr double kTol = 1e-3;
    EXPECT_LT(gradient_error([&](const ad::Var& v) { return directional_loss(v, content, "oil painting", "a Photo", bank); }, probe),
              kTol);
    EXPECT_LT(gradient_error([&](const ad::Var& v) { return gs_loss(v, content, "watercolor", bank); }, probe), kTol);
    PatchConfig pc;
    pc.n_patches = 3;
    pc.patch_size = 6;
    pc.tau = 0.0;
    pc.seed = 4;
    EXPECT_LT(gradient_error([&](const ad::Var& v) { return patch_loss(v, content, "oil painting", "a Photo", bank, pc); }, probe),
              kTol);
    EXPECT_LT(gradient_error([](const ad::Var& v) { return tv_loss(v); }, probe), kTol);
    EncoderConfig ec;
    ec.channels = {4, 4, 4};
    const ImageEncoder enc = ImageEncoder::random(ec, 3);
    EXPECT_LT(gradient_error([&](const ad::Var& v) { return content_loss(v, content, enc).feat; }, probe), kTol);
    EXPECT_LT(gradient_error([&](const ad::Var& v) { return content_loss(v, content, enc).rgb; }, probe), kTol);
    const Tensor other = random_tensor({3, 8, 8}, rng, 0.1, 0.9);
    EXPECT_LT(gradient_error(
                  [&](const ad::Var& v) {
                      return divergence_loss({{v, "oil painting"}, {ad::constant(other), "watercolor"}}, bank, 1.0, 1);
                  },
                  probe),
              kTol);
}

TEST(TextBank, CachesTemplateMeans) {
    const StubEmbedder emb(3, 16, 8);
    const std::vector<std::string> templates{"{}", "a {} image", "{} style"};
    const TextBank bank(emb, templates);
    const Tensor a = bank.embedding("oil painting");
    EXPECT_EQ(test_util::max_abs_diff(a, embed_style("oil painting", emb, templates).mean), 0.0);
    EXPECT_EQ(test_util::max_abs_diff(bank.direction("oil painting"), minus(a, bank.embedding("a Photo"))), 0.0);
    EXPECT_THROW(TextBank(emb, {}), Error);
    EXPECT_THROW(TextBank(emb, {"no slot"}), Error);
}
