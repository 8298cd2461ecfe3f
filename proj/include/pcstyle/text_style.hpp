#pragma once

#include <cstdint>
#include <filesystem>
#include <memory>
#include <string>
#include <string_view>
#include <vector>

#include "pcstyle/autodiff.hpp"
#include "pcstyle/image.hpp"

namespace pcstyle {

/// Joint image/text embedding model. Images reach `embed_image` already resized to
/// input_size() x input_size(); use `embed_image_resized` to get that for free.
class JointEmbedder {
public:
    virtual ~JointEmbedder() = default;

    [[nodiscard]] virtual int dim() const = 0;
    [[nodiscard]] virtual int input_size() const = 0;
    [[nodiscard]] virtual Tensor embed_text(std::string_view text) const = 0;
    /// image is [3, S, S]; differentiable w.r.t. the pixels.
    [[nodiscard]] virtual ad::Var embed_image(const ad::Var& image) const = 0;
};

/// Bilinear resize of any [3, H, W] image to the embedder's input size, then embed.
ad::Var embed_image_resized(const JointEmbedder& embedder, const ad::Var& image);
Tensor embed_image_resized(const JointEmbedder& embedder, const Image& image);

/// Offline stand-in for a joint embedder. Images: 4x4x4 soft colour histogram mapped
/// by a fixed random projection. Text: each whitespace token and bigram hashes to a
/// positive 64-bin pseudo-histogram; their normalised sum goes through the same
/// projection, so text and image vectors share one space. Outputs are unit-norm.
class StubEmbedder final : public JointEmbedder {
public:
    static constexpr int kBins = 4;
    static constexpr int kHistogram = kBins * kBins * kBins;

    StubEmbedder(std::uint64_t seed, int dim, int input_size = 224);

    [[nodiscard]] int dim() const override { return dim_; }
    [[nodiscard]] int input_size() const override { return input_size_; }
    [[nodiscard]] Tensor embed_text(std::string_view text) const override;
    [[nodiscard]] ad::Var embed_image(const ad::Var& image) const override;

    /// Pseudo-histogram a text maps to before projection.
    [[nodiscard]] Tensor text_histogram(std::string_view text) const;
    /// [dim, 64]
    [[nodiscard]] const Tensor& projection() const noexcept { return projection_.value(); }

private:
    std::uint64_t seed_;
    int dim_;
    int input_size_;
    ad::Var projection_;
};

std::unique_ptr<JointEmbedder> stub_embedder(std::uint64_t seed, int dim, int input_size = 224);

/// Adapter over an exported model: a JSON file holding a text-embedding table and a
/// linear image head over the same 64-bin colour histogram:
///   {"dim": E, "input_size": S, "image_projection": [[64 floats] x E],
///    "texts": {"<prompt>": [E floats], ...}}
/// Prompts missing from the table raise ErrorCode::Embedder.
class ExportedEmbedder final : public JointEmbedder {
public:
    explicit ExportedEmbedder(const std::filesystem::path& path);

    [[nodiscard]] int dim() const override { return dim_; }
    [[nodiscard]] int input_size() const override { return input_size_; }
    [[nodiscard]] Tensor embed_text(std::string_view text) const override;
    [[nodiscard]] ad::Var embed_image(const ad::Var& image) const override;

private:
    int dim_ = 0;
    int input_size_ = 224;
    ad::Var projection_;
    std::vector<std::pair<std::string, Tensor>> texts_;
};

/// "stub:SEED[:DIM[:SIZE]]" or "export:PATH".
std::unique_ptr<JointEmbedder> make_embedder(std::string_view spec);

std::vector<std::string> default_templates();
std::vector<std::string> load_templates(const std::filesystem::path& path);

/// Replaces the single "{}" placeholder of every template with `style_text`.
std::vector<std::string> expand_templates(std::string_view style_text, const std::vector<std::string>& templates);

struct StyleEmbedding {
    std::string style_text;
    std::vector<std::string> prompts;
    Tensor vectors;  // [M, E]
    Tensor mean;     // [E]
};

StyleEmbedding embed_style(std::string_view style_text, const JointEmbedder& embedder,
                           const std::vector<std::string>& templates);

inline constexpr std::string_view kSourceText = "a Photo";

void write_style_embedding(const std::filesystem::path& path, const StyleEmbedding& style);
StyleEmbedding read_style_embedding(const std::filesystem::path& path);

}  // namespace pcstyle
