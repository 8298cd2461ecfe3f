#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "pcstyle/autodiff.hpp"
#include "pcstyle/feature_cloud.hpp"
#include "pcstyle/params.hpp"
#include "pcstyle/text_style.hpp"

namespace pcstyle {

struct TransformConfig {
    int content_dim = 256;    // D
    int style_dim = 512;      // E
    int compressed_dim = 64;  // d
    int global_width = 1024;  // G
    int predictor_width = 0;  // hidden width of the covariance predictors; 0 means 4 d^2
    /// Replace the learned covariance predictors with closed-form whitening/colouring.
    bool oracle = false;
    bool global_enabled = true;

    [[nodiscard]] int hidden() const { return predictor_width > 0 ? predictor_width : 4 * compressed_dim * compressed_dim; }
    void validate() const;
};

/// Two dense layers on the flattened d x d covariance, producing a d x d factor.
struct CovPredictor {
    ad::Var w1, b1, w2, b2;
};

struct TransformState {
    TransformConfig config;
    ad::Var compress_c_w, compress_c_b;  // [d, D], [d]
    ad::Var compress_s_w, compress_s_b;  // [d, E], [d]
    CovPredictor predictor_c, predictor_s;
    ad::Var decompress_w, decompress_b;  // [D, d], [D]
    ad::Var global_w1, global_b1;        // [G, D], [G]
    ad::Var global_w2, global_b2;        // [D, G], [D]
    ad::Var fuse_w, fuse_b;              // [D, 2D], [D]

    /// Seeded initialisation. With `identity_predictors` the second predictor layer is zero
    /// and its bias is vec(I), so both factors (and T) start as the identity. The fuse layer
    /// starts as [I ; 0].
    static TransformState init(const TransformConfig& config, std::uint64_t seed, bool identity_predictors = true);

    [[nodiscard]] ParamList parameters() const;
    void set_requires_grad(bool on) const;

    void save(const std::filesystem::path& path) const;
    static TransformState load(const std::filesystem::path& path);
    void store(Archive& archive, const std::string& prefix) const;
    static TransformState restore(const Archive& archive, const std::string& prefix);
};

/// Data-driven start: compress_c becomes the top-d principal directions of `content`
/// (decompress its transpose, so decompress(compress(f)) is the PCA reconstruction)
/// and compress_s is re-centred so the mean of the given styles compresses to zero.
void initialize_from_data(TransformState& state, const Tensor& content, const std::vector<const StyleEmbedding*>& styles);

struct ContentStats {
    Tensor mean;  // [d]
    Tensor cov;   // [d, d]
};

/// Column mean and (X - mean)^T (X - mean) / N. Needs N >= 2.
ContentStats content_stats(const Tensor& features);

/// Differentiable covariance of the rows of x; `mean` receives the [1, d] column mean.
ad::Var covariance(const ad::Var& x, ad::Var* mean = nullptr);

/// T = P_s(style_cov) * P_c(content_cov); in oracle mode the closed-form factors.
ad::Var predict_transform(const ad::Var& content_cov, const ad::Var& style_cov, const TransformState& state);

/// C_s^{1/2} C_c^{-1/2} with eigenvalues clamped at 1e-8.
Tensor oracle_transform(const Tensor& content_cov, const Tensor& style_cov);

/// Everything the stylization produces for one (cloud, style) pair, still on the graph.
struct StyleForward {
    ad::Var transform;          // [d, d]
    ad::Var content_mean;       // [1, d] compressed content mean
    ad::Var style_mean;         // [1, d] compressed style mean
    ad::Var compressed;         // [N, d] T (f - mean_c) + mean_s
    ad::Var per_point;          // [N, D] decompressed
    ad::Var global;             // [1, D] stylized global feature, undefined when disabled
    ad::Var features;           // [N, D] fused output (per_point when the global branch is off)
};

StyleForward stylize_features(const ad::Var& features, const Tensor& style_vectors, const TransformState& state);

/// [1, D]: max over points of the pointwise D -> G ReLU map, followed by G -> D.
ad::Var global_feature(const ad::Var& features, const TransformState& state);
/// T (compress_c(g) - content_mean) + style_mean, decompressed to [1, D].
ad::Var stylize_global(const ad::Var& global, const ad::Var& transform, const ad::Var& content_mean,
                       const ad::Var& style_mean, const TransformState& state);
/// fuse([per_point_i ; global]) for every row.
ad::Var fuse_features(const ad::Var& per_point, const ad::Var& global, const TransformState& state);

struct StylizedCloud {
    Tensor positions;   // [N, 3], copied bit-exactly
    Tensor features;    // [N, D]
    Tensor compressed;  // [N, d]
    std::vector<std::uint32_t> source_view;
    std::string style_text;

    /// Feature cloud view of the result, usable by the renderer and the cloud writer.
    [[nodiscard]] FeaturePointCloud as_cloud() const;
};

StylizedCloud apply_style(const FeaturePointCloud& cloud, const StyleEmbedding& style, const TransformState& state);

}  // namespace pcstyle
