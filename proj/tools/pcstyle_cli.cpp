#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "json.hpp"
#include "pcstyle/error.hpp"
#include "pcstyle/evaluation.hpp"
#include "pcstyle/feature_cloud.hpp"
#include "pcstyle/image.hpp"
#include "pcstyle/renderer.hpp"
#include "pcstyle/scene.hpp"
#include "pcstyle/text_style.hpp"
#include "pcstyle/training.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace pcstyle;

namespace {

constexpr const char* kVersion = "0.1.0";

// Raised for inputs that do not exist; main maps it to exit 1 with the path.
struct MissingInput {
    fs::path path;
};

const fs::path& need(const fs::path& p) {
    if (!fs::exists(p)) throw MissingInput{p};
    return p;
}

std::string frame_name(int i) {
    char buf[16];
    std::snprintf(buf, sizeof buf, "%04d.png", i);
    return buf;
}

struct Manifest {
    std::string command;
    std::vector<std::string> argv;
    json config = json::object();
    std::uint64_t seed = 0;
    std::vector<std::string> outputs;

    void write(const fs::path& where) const {
        json j = {{"command", command},
                  {"argv", argv},
                  {"seed", seed},
                  {"config", config},
                  {"outputs", outputs},
                  {"versions", {{"pcstyle", kVersion}, {"archive", Archive::kVersion}, {"config", 1}}}};
        std::ofstream out(where);
        if (!out) throw Error(ErrorCode::Io, "cannot write manifest " + where.string());
        out << j.dump(2) << "\n";
    }
};

// Manifests go next to file outputs (`<out>.manifest.json`) or inside directory outputs.
fs::path manifest_for_file(const fs::path& out) { return fs::path(out.string() + ".manifest.json"); }

void ensure_parent(const fs::path& p) {
    if (p.has_parent_path()) fs::create_directories(p.parent_path());
}

std::optional<double> parse_voxel(const std::string& v) {
    if (v == "none") return std::nullopt;
    try {
        std::size_t used = 0;
        const double x = std::stod(v, &used);
        if (used != v.size() || x < 0.0) throw std::invalid_argument(v);
        return x;
    } catch (const std::exception&) {
        throw Error(ErrorCode::Config, "--voxel must be a non-negative number or 'none', got '" + v + "'");
    }
}

ImageEncoder encoder_from_spec(const std::string& spec, const EncoderConfig& cfg) {
    if (spec.rfind("random:", 0) == 0) {
        try {
            return ImageEncoder::random(cfg, std::stoull(spec.substr(7)));
        } catch (const std::logic_error&) {
            throw Error(ErrorCode::Config, "bad encoder seed in '" + spec + "'");
        }
    }
    return ImageEncoder::load(need(spec));
}

std::vector<std::string> templates_from(const std::string& path) {
    return path.empty() ? default_templates() : load_templates(need(path));
}

CameraView camera_from_arg(const std::string& camera, const std::string& scene_dir) {
    if (camera.size() > 5 && camera.substr(camera.size() - 5) == ".json") {
        std::ifstream in(need(camera));
        json j;
        try {
            in >> j;
        } catch (const json::exception& e) {
            throw Error(ErrorCode::Load, camera + ": " + e.what());
        }
        return camera_from_json(j);
    }
    int index = 0;
    try {
        std::size_t used = 0;
        index = std::stoi(camera, &used);
        if (used != camera.size()) throw std::invalid_argument(camera);
    } catch (const std::logic_error&) {
        throw Error(ErrorCode::Config, "--camera must be an index, 'all' or a .json pose file");
    }
    if (scene_dir.empty()) throw Error(ErrorCode::Config, "--camera INDEX needs --scene");
    Scene scene = load_scene(need(scene_dir));
    if (index < 0 || index >= static_cast<int>(scene.views.size())) {
        throw Error(ErrorCode::Config, "camera index " + std::to_string(index) + " out of range [0, " +
                                           std::to_string(scene.views.size()) + ")");
    }
    return scene.views[static_cast<std::size_t>(index)];
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Text-guided point-cloud style transfer"};
    app.require_subcommand(1);
    app.set_version_flag("--version", kVersion);

    Manifest manifest;
    manifest.argv.assign(argv, argv + argc);

    // make-synthetic
    SyntheticSpec syn;
    std::uint64_t syn_seed = 0;
    std::string syn_out;
    auto* make_syn = app.add_subcommand("make-synthetic", "Write a seeded synthetic scene directory");
    make_syn->add_option("--views", syn.n_views, "Number of views")->capture_default_str();
    make_syn->add_option("--points", syn.n_points, "Number of colour seed points")->capture_default_str();
    make_syn->add_option("--seed", syn_seed, "Scene seed")->capture_default_str();
    make_syn->add_option("--texture", syn.texture, "checker | stripes | gradient")->capture_default_str();
    make_syn->add_option("--size", syn.image_size, "Image edge in pixels")->capture_default_str();
    make_syn->add_option("--step", syn.view_step_degrees, "Azimuth step between views (degrees)")->capture_default_str();
    make_syn->add_option("--out", syn_out, "Output directory")->required();

    // build-cloud
    std::string bc_scene, bc_encoder = "random:0", bc_voxel = "0", bc_out, bc_config;
    std::vector<int> bc_channels{64, 128, 256}, bc_views;
    auto* build = app.add_subcommand("build-cloud", "Lift encoder features of a scene into a point cloud");
    build->add_option("--scene", bc_scene, "Scene directory")->required();
    build->add_option("--encoder", bc_encoder, "Weights file or random:SEED")->capture_default_str();
    build->add_option("--channels", bc_channels, "Encoder widths for random encoders")->expected(3)->delimiter(',');
    build->add_option("--config", bc_config, "Take encoder and voxel settings from a training config");
    build->add_option("--voxel", bc_voxel, "Voxel edge; 0 = extent/256, 'none' disables merging")->capture_default_str();
    build->add_option("--views", bc_views, "Views to lift (default all)")->delimiter(',');
    build->add_option("--out", bc_out, "Output cloud file")->required();

    // embed-style
    std::string es_text, es_embedder = "stub:0", es_templates, es_out;
    auto* embed = app.add_subcommand("embed-style", "Template-expand a style phrase and embed it");
    embed->add_option("--text", es_text, "Style phrase")->required();
    embed->add_option("--embedder", es_embedder, "stub:SEED[:DIM[:SIZE]] or export:PATH")->capture_default_str();
    embed->add_option("--templates", es_templates, "Templates file (one per line, {} placeholder)");
    embed->add_option("--out", es_out, "Output style embedding file")->required();

    // train
    std::string tr_config, tr_out, tr_from, tr_log;
    int tr_stage = 1;
    std::optional<std::uint64_t> tr_seed;
    std::optional<int> tr_steps;
    auto* train = app.add_subcommand("train", "Stage 1 (decoder) or stage 2 (style transform) training");
    train->add_option("--config", tr_config, "Training config JSON")->required();
    train->add_option("--stage", tr_stage, "1 or 2")->check(CLI::IsMember({1, 2}))->capture_default_str();
    train->add_option("--out", tr_out, "Output checkpoint")->required();
    train->add_option("--from", tr_from, "Checkpoint to start from (stage-1 result for stage 2, or one to resume)");
    train->add_option("--log", tr_log, "JSON-lines training log (default <out>.log.jsonl)");
    train->add_option("--seed", tr_seed, "Seed (the config file wins when it sets one)");
    train->add_option("--steps", tr_steps, "Steps for the chosen stage (the config file wins when it sets one)");

    // stylize
    std::string st_cloud, st_checkpoint, st_style, st_embedder, st_templates, st_out;
    auto* stylize = app.add_subcommand("stylize", "Apply a style phrase to a feature cloud");
    stylize->add_option("--cloud", st_cloud, "Content feature cloud")->required();
    stylize->add_option("--checkpoint", st_checkpoint, "Stage-2 checkpoint")->required();
    stylize->add_option("--style", st_style, "Style phrase")->required();
    stylize->add_option("--embedder", st_embedder, "Embedder spec (default: the checkpoint's)");
    stylize->add_option("--templates", st_templates, "Templates file (default: the checkpoint's)");
    stylize->add_option("--out", st_out, "Output stylized cloud")->required();

    // render
    std::string rd_cloud, rd_camera, rd_scene, rd_checkpoint, rd_out;
    auto* render_cmd = app.add_subcommand("render", "Splat a cloud and decode it to an image");
    render_cmd->add_option("--cloud", rd_cloud, "Feature cloud (content or stylized)")->required();
    render_cmd->add_option("--camera", rd_camera, "View index, 'all', or a camera .json")->required();
    render_cmd->add_option("--scene", rd_scene, "Scene directory for index/all cameras");
    render_cmd->add_option("--checkpoint", rd_checkpoint, "Checkpoint holding the decoder")->required();
    render_cmd->add_option("--out", rd_out, "Output PNG, or directory when --camera all")->required();

    // evaluate
    std::string ev_frames, ev_scene, ev_style, ev_embedder = "stub:0", ev_templates, ev_report;
    int ev_short = 1, ev_long = 7, ev_crops = 64, ev_patch = 96;
    std::uint64_t ev_seed = 0;
    double ev_tol = 0.01;
    auto* evaluate = app.add_subcommand("evaluate", "CLIP-style score and short/long-range consistency of frames");
    evaluate->add_option("--frames", ev_frames, "Directory of %04d.png frames, one per scene view")->required();
    evaluate->add_option("--scene", ev_scene, "Scene directory with the frames' cameras and depth")->required();
    evaluate->add_option("--style", ev_style, "Style phrase")->required();
    evaluate->add_option("--embedder", ev_embedder, "stub:SEED[:DIM[:SIZE]] or export:PATH")->capture_default_str();
    evaluate->add_option("--templates", ev_templates, "Templates file");
    evaluate->add_option("--short", ev_short, "Short-range frame stride")->capture_default_str();
    evaluate->add_option("--long", ev_long, "Long-range frame stride")->capture_default_str();
    evaluate->add_option("--crops", ev_crops, "Crops per frame for the score")->capture_default_str();
    evaluate->add_option("--patch", ev_patch, "Crop edge for the score")->capture_default_str();
    evaluate->add_option("--seed", ev_seed, "Crop seed")->capture_default_str();
    evaluate->add_option("--tolerance", ev_tol, "Relative depth tolerance for correspondences")->capture_default_str();
    evaluate->add_option("--report", ev_report, "Output report JSON")->required();

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::CallForAllHelp& e) {
        return app.exit(e);
    } catch (const CLI::CallForVersion& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        std::cerr << "error: " << e.what() << "\n\n" << app.help();
        return 2;
    }

    try {
        if (*make_syn) {
            manifest.command = "make-synthetic";
            manifest.seed = syn_seed;
            manifest.config = {{"views", syn.n_views},   {"points", syn.n_points},     {"texture", syn.texture},
                               {"size", syn.image_size}, {"step", syn.view_step_degrees}};
            save_scene(make_synthetic_scene(syn, syn_seed), syn_out);
            manifest.outputs = {syn_out};
            manifest.write(fs::path(syn_out) / "manifest.json");
        } else if (*build) {
            manifest.command = "build-cloud";
            EncoderConfig ec;
            ec.channels = {bc_channels[0], bc_channels[1], bc_channels[2]};
            CloudBuildOptions opt;
            opt.voxel = parse_voxel(bc_voxel);
            opt.views = bc_views;
            std::optional<ImageEncoder> encoder;
            if (!bc_config.empty()) {
                const TrainConfig tc = TrainConfig::load(need(bc_config));
                encoder = make_encoder(tc);
                if (build->count("--voxel") == 0) opt.voxel = tc.voxel;
                manifest.seed = tc.encoder_seed;
                manifest.config["train_config"] = tc.to_json();
            } else {
                encoder = encoder_from_spec(bc_encoder, ec);
            }
            const Scene scene = load_scene(need(bc_scene));
            const FeaturePointCloud cloud = build_feature_cloud(scene, *encoder, opt);
            ensure_parent(bc_out);
            write_cloud(bc_out, cloud);
            manifest.config["encoder"] = bc_encoder;
            manifest.config["channels"] = bc_channels;
            manifest.config["voxel"] = bc_voxel;
            manifest.config["points"] = cloud.size();
            manifest.outputs = {bc_out};
            manifest.write(manifest_for_file(bc_out));
        } else if (*embed) {
            manifest.command = "embed-style";
            const auto embedder = make_embedder(es_embedder);
            const StyleEmbedding style = embed_style(es_text, *embedder, templates_from(es_templates));
            ensure_parent(es_out);
            write_style_embedding(es_out, style);
            manifest.config = {{"text", es_text}, {"embedder", es_embedder}, {"templates", es_templates}};
            manifest.outputs = {es_out};
            manifest.write(manifest_for_file(es_out));
        } else if (*train) {
            manifest.command = "train";
            TrainConfig flags;
            if (tr_seed) flags.seed = *tr_seed;
            if (tr_steps) (tr_stage == 1 ? flags.stage1_steps : flags.stage2_steps) = *tr_steps;
            json merged = flags.to_json();
            std::ifstream in(need(tr_config));
            json file;
            try {
                in >> file;
            } catch (const json::exception& e) {
                throw Error(ErrorCode::Config, tr_config + ": " + e.what());
            }
            merged.merge_patch(file);
            const TrainConfig config = TrainConfig::from_json(merged);
            config.validate();
            manifest.seed = config.seed;
            manifest.config = config.to_json();
            manifest.config["stage"] = tr_stage;

            const auto scenes = load_training_scenes(config);
            const fs::path log_path = tr_log.empty() ? fs::path(tr_out + ".log.jsonl") : fs::path(tr_log);
            ensure_parent(tr_out);
            ensure_parent(log_path);
            std::ofstream log(log_path);
            if (!log) throw Error(ErrorCode::Io, "cannot write log " + log_path.string());
            const StepCallback logger = json_lines_logger(log);

            Checkpoint result;
            if (tr_stage == 1) {
                std::optional<Checkpoint> resume;
                if (!tr_from.empty()) resume = Checkpoint::load(need(tr_from));
                result = train_decoder(scenes, config, logger, resume ? &*resume : nullptr);
            } else {
                if (tr_from.empty()) throw Error(ErrorCode::Config, "stage 2 needs --from with a stage-1 checkpoint");
                result = train_style(scenes, Checkpoint::load(need(tr_from)), config, logger);
            }
            result.save(tr_out);
            manifest.outputs = {tr_out, log_path.string()};
            manifest.write(manifest_for_file(tr_out));
        } else if (*stylize) {
            manifest.command = "stylize";
            const Checkpoint ck = Checkpoint::load(need(st_checkpoint));
            const FeaturePointCloud cloud = read_cloud(need(st_cloud));
            const std::string spec = st_embedder.empty() ? ck.config.embedder : st_embedder;
            const auto embedder = make_embedder(spec);
            const auto templates = st_templates.empty() ? templates_for(ck.config) : load_templates(need(st_templates));
            if (!ck.transform) throw Error(ErrorCode::Config, "checkpoint has no style transform; run stage 2 first");
            const StylizedCloud out = apply_style(cloud, embed_style(st_style, *embedder, templates), *ck.transform);
            ensure_parent(st_out);
            write_cloud(st_out, out.as_cloud(), CloudFileExtras{st_style});
            manifest.seed = ck.config.seed;
            manifest.config = {{"style", st_style}, {"embedder", spec}, {"checkpoint", st_checkpoint}, {"cloud", st_cloud}};
            manifest.outputs = {st_out};
            manifest.write(manifest_for_file(st_out));
        } else if (*render_cmd) {
            manifest.command = "render";
            const Checkpoint ck = Checkpoint::load(need(rd_checkpoint));
            const FeaturePointCloud cloud = read_cloud(need(rd_cloud));
            manifest.seed = ck.config.seed;
            manifest.config = {{"cloud", rd_cloud}, {"camera", rd_camera}, {"scene", rd_scene}, {"checkpoint", rd_checkpoint}};
            if (rd_camera == "all") {
                if (rd_scene.empty()) throw Error(ErrorCode::Config, "--camera all needs --scene");
                const Scene scene = load_scene(need(rd_scene));
                fs::create_directories(rd_out);
                for (std::size_t i = 0; i < scene.views.size(); ++i) {
                    const fs::path p = fs::path(rd_out) / frame_name(static_cast<int>(i));
                    write_png(p, render_view(cloud, scene.views[i], ck.config.splat, ck.decoder));
                    manifest.outputs.push_back(p.string());
                }
                manifest.write(fs::path(rd_out) / "manifest.json");
            } else {
                const CameraView view = camera_from_arg(rd_camera, rd_scene);
                ensure_parent(rd_out);
                write_png(rd_out, render_view(cloud, view, ck.config.splat, ck.decoder));
                manifest.outputs = {rd_out};
                manifest.write(manifest_for_file(rd_out));
            }
        } else if (*evaluate) {
            manifest.command = "evaluate";
            manifest.seed = ev_seed;
            const Scene scene = load_scene(need(ev_scene));
            need(ev_frames);
            std::vector<Image> frames;
            for (std::size_t i = 0; i < scene.views.size(); ++i) {
                const fs::path p = fs::path(ev_frames) / frame_name(static_cast<int>(i));
                if (!fs::exists(p)) break;
                frames.push_back(read_png(p));
            }
            if (frames.empty()) throw MissingInput{fs::path(ev_frames) / frame_name(0)};
            std::vector<CameraView> cameras(scene.views.begin(), scene.views.begin() + static_cast<std::ptrdiff_t>(frames.size()));

            const auto embedder = make_embedder(ev_embedder);
            json report;
            report["clip_score"] = clip_score(frames, ev_style, *embedder, templates_from(ev_templates), ev_crops, ev_patch, ev_seed);
            auto consistency = [&](int stride) -> json {
                if (static_cast<int>(frames.size()) < stride + 1) return {{"rmse", nullptr}, {"stride", stride}, {"pairs", json::array()}};
                const ConsistencyReport r = consistency_rmse(frames, cameras, stride, ev_tol);
                json pairs = json::array();
                for (std::size_t k = 0; k < r.per_pair.size(); ++k) {
                    const double v = r.per_pair[k];
                    pairs.push_back({{"i", k}, {"j", k + static_cast<std::size_t>(stride)}, {"rmse", std::isnan(v) ? json(nullptr) : json(v)}});
                }
                return {{"rmse", std::isnan(r.rmse) ? json(nullptr) : json(r.rmse)}, {"stride", stride}, {"pairs_used", r.pairs_used}, {"pairs", pairs}};
            };
            const json s = consistency(ev_short), l = consistency(ev_long);
            report["rmse_short"] = s["rmse"];
            report["rmse_long"] = l["rmse"];
            report["short"] = s;
            report["long"] = l;
            report["frames"] = frames.size();
            report["style"] = ev_style;
            ensure_parent(ev_report);
            std::ofstream out(ev_report);
            if (!out) throw Error(ErrorCode::Io, "cannot write report " + ev_report);
            out << report.dump(2) << "\n";
            manifest.config = {{"style", ev_style}, {"embedder", ev_embedder}, {"short", ev_short}, {"long", ev_long},
                               {"crops", ev_crops}, {"patch", ev_patch}, {"tolerance", ev_tol}};
            manifest.outputs = {ev_report};
            manifest.write(manifest_for_file(ev_report));
        }
    } catch (const MissingInput& m) {
        std::cerr << "error: input not found: " << m.path.string() << "\n";
        return 1;
    } catch (const Error& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
    return 0;
}
