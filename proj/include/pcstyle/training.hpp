#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <iosfwd>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include "json.hpp"
#include "pcstyle/feature_cloud.hpp"
#include "pcstyle/losses.hpp"
#include "pcstyle/renderer.hpp"
#include "pcstyle/style_transform.hpp"

namespace pcstyle {

/// One training scene: a directory in the scene layout or a seeded synthetic scene, and
/// optionally the subset of views used for training (the rest stay held out).
struct SceneSource {
    std::filesystem::path dir;
    std::optional<SyntheticSpec> synthetic;
    std::uint64_t synthetic_seed = 0;
    std::vector<int> views;
};

struct TrainConfig {
    int version = 1;
    int batch_size = 4;
    double lr = 1e-4;
    /// Per-stage overrides of `lr`.
    std::optional<double> stage1_lr, stage2_lr;
    double beta1 = 0.9, beta2 = 0.9999, eps = 1e-8;
    LossWeights stage1_weights{0.0, 1.0, 5e-3, 0.0, 0.0};
    LossWeights stage2_weights{};
    int stage1_steps = 500;
    int stage2_steps = 300;
    std::uint64_t seed = 0;
    std::vector<std::string> styles;
    std::vector<SceneSource> scenes;

    EncoderConfig encoder;
    std::uint64_t encoder_seed = 0;
    std::filesystem::path encoder_path;  // empty: seeded random encoder
    std::optional<double> voxel = 0.0;
    /// Stage 1 renders each view from a cloud built without it.
    bool leave_one_out = false;
    DecoderConfig decoder;
    TransformConfig transform;  // content_dim / style_dim are filled in from the encoder and embedder
    SplatConfig splat;
    PatchConfig patch;
    std::string embedder = "stub:0";
    std::filesystem::path templates;  // empty: built-in list
    double pair_fraction = 0.8;
    bool use_divergence = true;
    bool freeze_decoder = true;
    bool data_init = true;

    [[nodiscard]] double stage_lr(int stage) const { return (stage == 1 ? stage1_lr : stage2_lr).value_or(lr); }
    void validate() const;
    [[nodiscard]] nlohmann::json to_json() const;
    /// Unknown keys anywhere in the document raise Config.
    static TrainConfig from_json(const nlohmann::json& j);
    static TrainConfig load(const std::filesystem::path& path);
};

/// Adam with bias correction.
class Adam {
public:
    Adam() = default;
    Adam(ParamList params, double lr, double beta1, double beta2, double eps);

    void step();
    void zero_grad();
    [[nodiscard]] std::int64_t steps() const noexcept { return t_; }

    void store(Archive& archive, const std::string& prefix) const;
    void restore(const Archive& archive, const std::string& prefix);

private:
    ParamList params_;
    std::vector<Tensor> m_, v_;
    double lr_ = 0.0, beta1_ = 0.0, beta2_ = 0.0, eps_ = 0.0;
    std::int64_t t_ = 0;
};

struct Checkpoint {
    TrainConfig config;
    int stage = 1;
    std::int64_t step = 0;
    Decoder decoder;
    std::optional<TransformState> transform;
    Archive optimizer;      // Adam moments of the stage in progress
    std::string rng_state;  // textual std::mt19937_64 state

    void save(const std::filesystem::path& path) const;
    static Checkpoint load(const std::filesystem::path& path);
};

/// Scene plus the views used for training.
struct TrainingScene {
    Scene scene;
    std::vector<int> views;
};

std::vector<TrainingScene> load_training_scenes(const TrainConfig& config);

ImageEncoder make_encoder(const TrainConfig& config);

/// Called after every optimizer step.
using StepCallback = std::function<void(int stage, std::int64_t step, const LossReport& report)>;

/// Writes one JSON object per step: stage, step, loss components, wall-clock milliseconds.
StepCallback json_lines_logger(std::ostream& out);

/// Stage 1: decoder only, content losses between renders of unstylized clouds and the
/// ground-truth views. Continues from `resume` when given (same stage).
Checkpoint train_decoder(const std::vector<TrainingScene>& scenes, const TrainConfig& config,
                         const StepCallback& callback = {}, const Checkpoint* resume = nullptr);

/// Stage 2: style transformation module on top of a stage-1 checkpoint (decoder frozen
/// unless configured otherwise). A stage-2 checkpoint resumes where it stopped.
Checkpoint train_style(const std::vector<TrainingScene>& scenes, const Checkpoint& start, const TrainConfig& config,
                       const StepCallback& callback = {});

/// Inference: encoder cloud of `scene`, style embedding, apply_style.
StylizedCloud stylize_scene(const Scene& scene, const std::string& style_text, const Checkpoint& checkpoint,
                            const JointEmbedder& embedder);
StylizedCloud stylize_cloud(const FeaturePointCloud& cloud, const std::string& style_text, const Checkpoint& checkpoint,
                            const JointEmbedder& embedder);

std::vector<std::string> templates_for(const TrainConfig& config);

}  // namespace pcstyle
