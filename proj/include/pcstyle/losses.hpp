#pragma once

#include <cstdint>
#include <map>
#include <mutex>
#include <optional>
#include <random>
#include <string>
#include <utility>
#include <vector>

#include "json.hpp"
#include "pcstyle/autodiff.hpp"
#include "pcstyle/feature_cloud.hpp"
#include "pcstyle/text_style.hpp"

namespace pcstyle {

inline constexpr double kDirectionEpsilon = 1e-8;

struct LossReport {
    double patch = 0.0, dir = 0.0, cd = 0.0, feat = 0.0, rgb = 0.0, tv = 0.0, gs = 0.0;
    double total_style = 0.0;    // patch + dir - cd
    double total_content = 0.0;  // lambda_feat feat + lambda_rgb rgb
    double total = 0.0;

    [[nodiscard]] nlohmann::json to_json() const;
};

struct LossWeights {
    double style = 15.0;
    double feat = 1.0;
    double rgb = 5e-3;
    double tv = 1.3e-6;
    /// Weight of the whole-image directional term; unset means it shares `style`.
    std::optional<double> gs;

    [[nodiscard]] double gs_weight() const { return gs.value_or(style); }
    void validate() const;
};

/// Fills the weighted totals from the component values.
void finalize_report(LossReport& report, const LossWeights& weights);

double style_total(double patch, double dir, double cd);

struct PatchConfig {
    int n_patches = 64;
    int patch_size = 96;
    double tau = 0.7;
    double distortion = 0.5;  // random-perspective distortion scale
    std::uint64_t seed = 0;

    void validate(int height, int width) const;
};

/// Template-averaged text embeddings, computed once per string.
class TextBank {
public:
    TextBank(const JointEmbedder& embedder, std::vector<std::string> templates);

    [[nodiscard]] const JointEmbedder& embedder() const noexcept { return *embedder_; }
    [[nodiscard]] Tensor embedding(const std::string& text) const;
    /// embedding(style) - embedding(source)
    [[nodiscard]] Tensor direction(const std::string& style, const std::string& source = std::string(kSourceText)) const;

private:
    const JointEmbedder* embedder_;
    std::vector<std::string> templates_;
    mutable std::mutex mutex_;
    mutable std::map<std::string, Tensor> cache_;
};

/// 1 - cos(delta_i, delta_t); exactly 1 (and no gradient) when either norm is below 1e-8.
ad::Var cosine_direction_loss(const ad::Var& delta_i, const Tensor& delta_t);
double cosine_direction_loss(const Tensor& delta_i, const Tensor& delta_t);

/// Whole-image directional loss: delta_i = E_I(rendered) - E_I(content).
ad::Var directional_loss(const ad::Var& rendered, const Tensor& content, const Tensor& delta_t, const JointEmbedder& embedder);
ad::Var directional_loss(const ad::Var& rendered, const Tensor& content, const std::string& style_text,
                         const std::string& source_text, const TextBank& bank);

/// Crop, random perspective and resize to the embedder input, folded into one bilinear map.
/// Pixels that the perspective pulls from outside the crop are filled with 0.
ad::SampleMap patch_sample_map(int height, int width, int patch_size, double distortion, int out_size,
                               std::mt19937_64& rng);

/// Per-patch directional losses (before rejection) for the maps drawn from cfg.seed.
std::vector<ad::Var> patch_directional_losses(const ad::Var& rendered, const Tensor& content, const Tensor& delta_t,
                                              const JointEmbedder& embedder, const PatchConfig& cfg);

/// Mean over patches of R(l_i, tau), where R zeroes values at or below tau.
ad::Var patch_loss(const ad::Var& rendered, const Tensor& content, const Tensor& delta_t, const JointEmbedder& embedder,
                   const PatchConfig& cfg);
ad::Var patch_loss(const ad::Var& rendered, const Tensor& content, const std::string& style_text,
                   const std::string& source_text, const TextBank& bank, const PatchConfig& cfg);

/// Unordered pairs (i < j) with different styles; max(1, round(fraction * P)) of them drawn
/// without replacement and returned in ascending order. Fewer than two styles is a Config error.
std::vector<std::pair<int, int>> sample_style_pairs(const std::vector<std::string>& styles, double fraction,
                                                    std::mt19937_64& rng);

/// Mean over pairs of 1 - cos(E_I(img_i) - E_I(img_j), E_T(s_i) - E_T(s_j)).
ad::Var divergence_loss(const std::vector<ad::Var>& image_embeddings, const std::vector<Tensor>& text_embeddings,
                        const std::vector<std::pair<int, int>>& pairs);
ad::Var divergence_loss(const std::vector<std::pair<ad::Var, std::string>>& renders, const TextBank& bank,
                        double pair_fraction, std::uint64_t seed);

/// 1 - cos(a, b) of two embeddings; 1 when either is (near) zero.
double embedding_disparity(const Tensor& ea, const Tensor& eb);
/// 1 - cos(E_I(a), E_I(b)).
double content_disparity(const Tensor& a, const Tensor& b, const JointEmbedder& embedder);

struct ContentLoss {
    ad::Var feat;
    ad::Var rgb;
};

/// feat: mean over the encoder's three stages of the per-stage mean squared difference.
/// rgb: mean absolute pixel difference.
ContentLoss content_loss(const ad::Var& rendered, const Tensor& ground_truth, const ImageEncoder& encoder);

/// mean(dx^2) + mean(dy^2) over forward differences.
ad::Var tv_loss(const ad::Var& image);

ad::Var gs_loss(const ad::Var& rendered, const Tensor& content, const std::string& style_text, const TextBank& bank);

}  // namespace pcstyle
