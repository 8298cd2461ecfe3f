#include "pcstyle/training.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <fstream>
#include <numeric>
#include <set>
#include <sstream>

#include "pcstyle/error.hpp"

namespace pcstyle {

using nlohmann::json;

namespace {

void check_keys(const json& j, std::initializer_list<const char*> allowed, const std::string& where) {
    if (!j.is_object()) throw Error(ErrorCode::Config, where + " must be an object");
    for (const auto& [key, value] : j.items()) {
        if (std::none_of(allowed.begin(), allowed.end(), [&](const char* a) { return key == a; })) {
            throw Error(ErrorCode::Config, "unknown key '" + key + "' in " + where);
        }
    }
}

template <typename T>
void read(const json& j, const char* key, T& out) {
    if (j.contains(key)) out = j.at(key).get<T>();
}

json weights_to_json(const LossWeights& w) {
    json j = {{"style", w.style}, {"feat", w.feat}, {"rgb", w.rgb}, {"tv", w.tv}};
    j["gs"] = w.gs ? json(*w.gs) : json(nullptr);
    return j;
}

LossWeights weights_from_json(const json& j, LossWeights w, const std::string& where) {
    check_keys(j, {"style", "feat", "rgb", "tv", "gs"}, where);
    read(j, "style", w.style);
    read(j, "feat", w.feat);
    read(j, "rgb", w.rgb);
    read(j, "tv", w.tv);
    if (j.contains("gs")) w.gs = j.at("gs").is_null() ? std::nullopt : std::optional<double>(j.at("gs").get<double>());
    return w;
}

std::uint64_t mix(std::uint64_t a, std::uint64_t b) {
    std::uint64_t x = a ^ (b + 0x9e3779b97f4a7c15ULL + (a << 6) + (a >> 2));
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
    return x ^ (x >> 31);
}

std::mt19937_64 step_rng(std::uint64_t seed, int stage, std::int64_t step) {
    return std::mt19937_64(mix(mix(seed, static_cast<std::uint64_t>(stage)), static_cast<std::uint64_t>(step)));
}

std::string rng_to_string(const std::mt19937_64& rng) {
    std::ostringstream s;
    s << rng;
    return s.str();
}

Decoder clone(const Decoder& d) {
    Archive a;
    d.store(a, "");
    return Decoder::restore(a, "");
}

TransformState clone(const TransformState& t) {
    Archive a;
    t.store(a, "");
    return TransformState::restore(a, "");
}

struct PreparedView {
    int cloud = 0;
    int view = 0;
    SplatPlan plan;
    Tensor target;  // [3, H, W]
};

struct PreparedScene {
    std::vector<FeaturePointCloud> clouds;
    std::vector<ad::Var> features;
    std::vector<PreparedView> views;
};

FeaturePointCloud cloud_from(const TrainingScene& ts, const ImageEncoder& encoder, const TrainConfig& config,
                             std::vector<int> views) {
    CloudBuildOptions opt;
    opt.voxel = config.voxel;
    opt.views = std::move(views);
    return build_feature_cloud(ts.scene, encoder, opt);
}

std::vector<PreparedScene> prepare(const std::vector<TrainingScene>& scenes, const ImageEncoder& encoder,
                                   const TrainConfig& config, bool leave_one_out) {
    std::vector<PreparedScene> out;
    for (const auto& ts : scenes) {
        PreparedScene ps;
        const bool loo = leave_one_out && ts.views.size() > 1;
        if (!loo) ps.clouds.push_back(cloud_from(ts, encoder, config, ts.views));
        for (int v : ts.views) {
            PreparedView pv;
            pv.view = v;
            if (loo) {
                std::vector<int> others;
                for (int o : ts.views)
                    if (o != v) others.push_back(o);
                ps.clouds.push_back(cloud_from(ts, encoder, config, others));
                pv.cloud = static_cast<int>(ps.clouds.size()) - 1;
            }
            const CameraView& view = ts.scene.views[static_cast<std::size_t>(v)];
            pv.plan = build_splat_plan(ps.clouds[static_cast<std::size_t>(pv.cloud)].positions, view, config.splat);
            pv.target = view.image.to_tensor();
            ps.views.push_back(std::move(pv));
        }
        for (const auto& c : ps.clouds) ps.features.push_back(ad::constant(c.features));
        out.push_back(std::move(ps));
    }
    return out;
}

struct BatchItem {
    int scene;
    int view;  // index into PreparedScene::views
    int style = -1;
};

// Round-robin over scenes; within a batch, views of one scene are drawn without
// replacement (refilled when exhausted), styles likewise over the style list.
std::vector<BatchItem> sample_batch(const std::vector<PreparedScene>& scenes, int n_styles, int batch, std::int64_t step,
                                    std::mt19937_64& rng) {
    std::vector<std::vector<int>> view_pool(scenes.size());
    std::vector<int> style_pool;
    std::vector<BatchItem> items;
    for (int b = 0; b < batch; ++b) {
        const auto s = static_cast<std::size_t>((step * batch + b) % static_cast<std::int64_t>(scenes.size()));
        auto& pool = view_pool[s];
        if (pool.empty()) {
            pool.resize(scenes[s].views.size());
            std::iota(pool.begin(), pool.end(), 0);
            std::shuffle(pool.begin(), pool.end(), rng);
        }
        BatchItem item{static_cast<int>(s), pool.back()};
        pool.pop_back();
        if (n_styles > 0) {
            if (style_pool.empty()) {
                style_pool.resize(static_cast<std::size_t>(n_styles));
                std::iota(style_pool.begin(), style_pool.end(), 0);
                std::shuffle(style_pool.begin(), style_pool.end(), rng);
            }
            item.style = style_pool.back();
            style_pool.pop_back();
        }
        items.push_back(item);
    }
    return items;
}

double elapsed_ms(std::chrono::steady_clock::time_point start) {
    return std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - start).count();
}

}  // namespace

// ---------------------------------------------------------------------------
// Config

void TrainConfig::validate() const {
    if (version != 1) throw Error(ErrorCode::Config, "unsupported config version " + std::to_string(version));
    if (batch_size < 1) throw Error(ErrorCode::Config, "batch_size must be >= 1");
    if (!(lr > 0.0 && stage_lr(1) > 0.0 && stage_lr(2) > 0.0)) throw Error(ErrorCode::Config, "lr must be positive");
    if (!(beta1 >= 0.0 && beta1 < 1.0 && beta2 >= 0.0 && beta2 < 1.0)) throw Error(ErrorCode::Config, "betas must lie in [0, 1)");
    if (!(eps > 0.0)) throw Error(ErrorCode::Config, "eps must be positive");
    if (stage1_steps < 0 || stage2_steps < 0) throw Error(ErrorCode::Config, "step counts must be >= 0");
    stage1_weights.validate();
    stage2_weights.validate();
    splat.validate();
    decoder.validate();
    if (!(pair_fraction > 0.0 && pair_fraction <= 1.0)) throw Error(ErrorCode::Config, "pair_fraction must lie in (0, 1]");
    if (patch.n_patches < 1 || patch.patch_size < 1) throw Error(ErrorCode::Config, "patch settings must be positive");
}

json TrainConfig::to_json() const {
    json scenes_j = json::array();
    for (const auto& s : scenes) {
        json e;
        if (s.synthetic) {
            e["synthetic"] = {{"seed", s.synthetic_seed},
                              {"views", s.synthetic->n_views},
                              {"points", s.synthetic->n_points},
                              {"texture", s.synthetic->texture},
                              {"image_size", s.synthetic->image_size},
                              {"view_step_degrees", s.synthetic->view_step_degrees}};
        } else {
            e["dir"] = s.dir.string();
        }
        if (!s.views.empty()) e["views"] = s.views;
        scenes_j.push_back(e);
    }
    json out = {{"version", version},
            {"batch_size", batch_size},
            {"lr", lr},
            {"betas", {beta1, beta2}},
            {"eps", eps},
            {"stage1_weights", weights_to_json(stage1_weights)},
            {"stage2_weights", weights_to_json(stage2_weights)},
            {"stage1_steps", stage1_steps},
            {"stage2_steps", stage2_steps},
            {"seed", seed},
            {"styles", styles},
            {"scenes", scenes_j},
            {"encoder", {{"channels", encoder.channels}, {"seed", encoder_seed}, {"path", encoder_path.string()}}},
            {"voxel", voxel ? json(*voxel) : json(nullptr)},
            {"leave_one_out", leave_one_out},
            {"decoder", {{"widths", decoder.widths}, {"head", decoder.head}}},
            {"transform",
             {{"compressed_dim", transform.compressed_dim},
              {"global_width", transform.global_width},
              {"predictor_width", transform.predictor_width},
              {"oracle", transform.oracle},
              {"global_enabled", transform.global_enabled}}},
            {"splat", {{"K", splat.K}, {"radius", splat.radius}, {"blend", splat.blend}}},
            {"patch",
             {{"n_patches", patch.n_patches},
              {"patch_size", patch.patch_size},
              {"tau", patch.tau},
              {"distortion", patch.distortion}}},
            {"embedder", embedder},
            {"templates", templates.string()},
            {"pair_fraction", pair_fraction},
            {"use_divergence", use_divergence},
            {"freeze_decoder", freeze_decoder},
            {"data_init", data_init}};
    if (stage1_lr) out["stage1_lr"] = *stage1_lr;
    if (stage2_lr) out["stage2_lr"] = *stage2_lr;
    return out;
}

TrainConfig TrainConfig::from_json(const json& j) {
    TrainConfig c;
    try {
        check_keys(j, {"version", "batch_size", "lr", "stage1_lr", "stage2_lr", "betas", "eps", "stage1_weights", "stage2_weights", "stage1_steps",
                       "stage2_steps", "seed", "styles", "scenes", "encoder", "voxel", "leave_one_out", "decoder",
                       "transform", "splat", "patch", "embedder", "templates", "pair_fraction", "use_divergence",
                       "freeze_decoder", "data_init"},
                   "config");
        read(j, "version", c.version);
        read(j, "batch_size", c.batch_size);
        read(j, "lr", c.lr);
        if (j.contains("stage1_lr")) c.stage1_lr = j.at("stage1_lr").get<double>();
        if (j.contains("stage2_lr")) c.stage2_lr = j.at("stage2_lr").get<double>();
        if (j.contains("betas")) {
            const auto b = j.at("betas").get<std::vector<double>>();
            if (b.size() != 2) throw Error(ErrorCode::Config, "betas needs two values");
            c.beta1 = b[0];
            c.beta2 = b[1];
        }
        read(j, "eps", c.eps);
        if (j.contains("stage1_weights")) c.stage1_weights = weights_from_json(j["stage1_weights"], c.stage1_weights, "stage1_weights");
        if (j.contains("stage2_weights")) c.stage2_weights = weights_from_json(j["stage2_weights"], c.stage2_weights, "stage2_weights");
        read(j, "stage1_steps", c.stage1_steps);
        read(j, "stage2_steps", c.stage2_steps);
        read(j, "seed", c.seed);
        read(j, "styles", c.styles);
        if (j.contains("scenes")) {
            for (const auto& e : j.at("scenes")) {
                check_keys(e, {"dir", "synthetic", "views"}, "scene entry");
                SceneSource s;
                if (e.contains("synthetic") == e.contains("dir")) {
                    throw Error(ErrorCode::Config, "scene entry needs exactly one of 'dir' or 'synthetic'");
                }
                if (e.contains("dir")) s.dir = e.at("dir").get<std::string>();
                if (e.contains("synthetic")) {
                    const json& sj = e.at("synthetic");
                    check_keys(sj, {"seed", "views", "points", "texture", "image_size", "view_step_degrees"}, "synthetic scene");
                    SyntheticSpec spec;
                    read(sj, "seed", s.synthetic_seed);
                    read(sj, "views", spec.n_views);
                    read(sj, "points", spec.n_points);
                    read(sj, "texture", spec.texture);
                    read(sj, "image_size", spec.image_size);
                    read(sj, "view_step_degrees", spec.view_step_degrees);
                    s.synthetic = spec;
                }
                read(e, "views", s.views);
                c.scenes.push_back(std::move(s));
            }
        }
        if (j.contains("encoder")) {
            const json& e = j.at("encoder");
            check_keys(e, {"channels", "seed", "path"}, "encoder");
            read(e, "channels", c.encoder.channels);
            read(e, "seed", c.encoder_seed);
            if (e.contains("path")) c.encoder_path = e.at("path").get<std::string>();
        }
        if (j.contains("voxel")) c.voxel = j.at("voxel").is_null() ? std::nullopt : std::optional<double>(j.at("voxel").get<double>());
        read(j, "leave_one_out", c.leave_one_out);
        if (j.contains("decoder")) {
            const json& d = j.at("decoder");
            check_keys(d, {"widths", "head"}, "decoder");
            read(d, "widths", c.decoder.widths);
            read(d, "head", c.decoder.head);
        }
        if (j.contains("transform")) {
            const json& t = j.at("transform");
            check_keys(t, {"compressed_dim", "global_width", "predictor_width", "oracle", "global_enabled"}, "transform");
            read(t, "compressed_dim", c.transform.compressed_dim);
            read(t, "global_width", c.transform.global_width);
            read(t, "predictor_width", c.transform.predictor_width);
            read(t, "oracle", c.transform.oracle);
            read(t, "global_enabled", c.transform.global_enabled);
        }
        if (j.contains("splat")) {
            const json& s = j.at("splat");
            check_keys(s, {"K", "radius", "blend"}, "splat");
            read(s, "K", c.splat.K);
            read(s, "radius", c.splat.radius);
            read(s, "blend", c.splat.blend);
        }
        if (j.contains("patch")) {
            const json& p = j.at("patch");
            check_keys(p, {"n_patches", "patch_size", "tau", "distortion"}, "patch");
            read(p, "n_patches", c.patch.n_patches);
            read(p, "patch_size", c.patch.patch_size);
            read(p, "tau", c.patch.tau);
            read(p, "distortion", c.patch.distortion);
        }
        read(j, "embedder", c.embedder);
        if (j.contains("templates")) c.templates = j.at("templates").get<std::string>();
        read(j, "pair_fraction", c.pair_fraction);
        read(j, "use_divergence", c.use_divergence);
        read(j, "freeze_decoder", c.freeze_decoder);
        read(j, "data_init", c.data_init);
    } catch (const json::exception& e) {
        throw Error(ErrorCode::Config, std::string("bad config: ") + e.what());
    }
    c.validate();
    return c;
}

TrainConfig TrainConfig::load(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw Error(ErrorCode::Load, "cannot open config " + path.string());
    json j;
    try {
        in >> j;
    } catch (const json::exception& e) {
        throw Error(ErrorCode::Config, path.string() + ": " + e.what());
    }
    return from_json(j);
}

// ---------------------------------------------------------------------------
// Adam

Adam::Adam(ParamList params, double lr, double beta1, double beta2, double eps)
    : params_(std::move(params)), lr_(lr), beta1_(beta1), beta2_(beta2), eps_(eps) {
    for (const auto& [name, var] : params_) {
        m_.emplace_back(var.shape(), 0.0);
        v_.emplace_back(var.shape(), 0.0);
    }
}

void Adam::step() {
    ++t_;
    const double c1 = 1.0 - std::pow(beta1_, static_cast<double>(t_));
    const double c2 = 1.0 - std::pow(beta2_, static_cast<double>(t_));
    for (std::size_t i = 0; i < params_.size(); ++i) {
        ad::Var p = params_[i].second;
        const Tensor g = p.grad();
        Tensor& value = p.mutable_value();
        Tensor& m = m_[i];
        Tensor& v = v_[i];
        for (std::size_t k = 0; k < value.size(); ++k) {
            m[k] = beta1_ * m[k] + (1.0 - beta1_) * g[k];
            v[k] = beta2_ * v[k] + (1.0 - beta2_) * g[k] * g[k];
            value[k] -= lr_ * (m[k] / c1) / (std::sqrt(v[k] / c2) + eps_);
        }
    }
    zero_grad();
}

void Adam::zero_grad() {
    for (auto& [name, var] : params_) {
        ad::Var v = var;
        v.zero_grad();
    }
}

void Adam::store(Archive& archive, const std::string& prefix) const {
    archive.put(prefix + "t", Tensor::scalar(static_cast<double>(t_)));
    for (std::size_t i = 0; i < params_.size(); ++i) {
        archive.put(prefix + "m." + params_[i].first, m_[i]);
        archive.put(prefix + "v." + params_[i].first, v_[i]);
    }
}

void Adam::restore(const Archive& archive, const std::string& prefix) {
    if (!archive.has_tensor(prefix + "t")) throw Error(ErrorCode::Load, "checkpoint has no optimizer state");
    t_ = static_cast<std::int64_t>(archive.tensor(prefix + "t").item());
    for (std::size_t i = 0; i < params_.size(); ++i) {
        const auto& name = params_[i].first;
        const Tensor& m = archive.tensor(prefix + "m." + name);
        const Tensor& v = archive.tensor(prefix + "v." + name);
        if (m.shape() != m_[i].shape() || v.shape() != v_[i].shape()) {
            throw Error(ErrorCode::Load, "optimizer state for " + name + " has the wrong shape");
        }
        m_[i] = m;
        v_[i] = v;
    }
}

// ---------------------------------------------------------------------------
// Checkpoint

void Checkpoint::save(const std::filesystem::path& path) const {
    Archive a;
    a.kind = "checkpoint";
    a.put_string("config", config.to_json().dump());
    a.put_string("rng", rng_state);
    a.put("stage", Tensor::scalar(stage));
    a.put("step", Tensor::scalar(static_cast<double>(step)));
    decoder.store(a, "decoder.");
    if (transform) transform->store(a, "transform.");
    for (const auto& [name, t] : optimizer.tensors) a.put("adam." + name, t);
    write_archive(path, a);
}

Checkpoint Checkpoint::load(const std::filesystem::path& path) {
    const Archive a = read_archive(path);
    if (a.kind != "checkpoint") throw Error(ErrorCode::Load, path.string() + " is not a checkpoint");
    Checkpoint c;
    c.config = TrainConfig::from_json(json::parse(a.string("config")));
    c.rng_state = a.string("rng");
    c.stage = static_cast<int>(a.tensor("stage").item());
    c.step = static_cast<std::int64_t>(a.tensor("step").item());
    c.decoder = Decoder::restore(a, "decoder.");
    if (a.has_string("transform.config")) c.transform = TransformState::restore(a, "transform.");
    for (const auto& [name, t] : a.tensors)
        if (name.starts_with("adam.")) c.optimizer.put(name.substr(5), t);
    return c;
}

// ---------------------------------------------------------------------------

std::vector<TrainingScene> load_training_scenes(const TrainConfig& config) {
    std::vector<TrainingScene> out;
    for (const auto& s : config.scenes) {
        TrainingScene ts;
        ts.scene = s.synthetic ? make_synthetic_scene(*s.synthetic, s.synthetic_seed) : load_scene(s.dir);
        ts.views = s.views;
        out.push_back(std::move(ts));
    }
    return out;
}

ImageEncoder make_encoder(const TrainConfig& config) {
    if (!config.encoder_path.empty()) return ImageEncoder::load(config.encoder_path);
    return ImageEncoder::random(config.encoder, config.encoder_seed);
}

std::vector<std::string> templates_for(const TrainConfig& config) {
    return config.templates.empty() ? default_templates() : load_templates(config.templates);
}

StepCallback json_lines_logger(std::ostream& out) {
    const auto start = std::chrono::steady_clock::now();
    return [&out, start](int stage, std::int64_t step, const LossReport& r) {
        json j = r.to_json();
        j["stage"] = stage;
        j["step"] = step;
        j["wall_ms"] = elapsed_ms(start);
        out << j.dump() << '\n';
        out.flush();
    };
}

namespace {

std::vector<TrainingScene> with_default_views(std::vector<TrainingScene> scenes) {
    if (scenes.empty()) throw Error(ErrorCode::Config, "training needs at least one scene");
    for (auto& ts : scenes) {
        ts.scene.validate();
        if (ts.views.empty()) {
            ts.views.resize(ts.scene.views.size());
            std::iota(ts.views.begin(), ts.views.end(), 0);
        }
        for (int v : ts.views) {
            if (v < 0 || v >= static_cast<int>(ts.scene.views.size())) {
                throw Error(ErrorCode::Config, "scene '" + ts.scene.name + "' has no view " + std::to_string(v));
            }
        }
    }
    return scenes;
}

DecoderConfig decoder_config_for(const TrainConfig& config, int channels) {
    DecoderConfig d = config.decoder;
    d.in_channels = channels;
    d.upsample = config.splat.stride;
    return d;
}

}  // namespace

Checkpoint train_decoder(const std::vector<TrainingScene>& input, const TrainConfig& config, const StepCallback& callback,
                         const Checkpoint* resume) {
    config.validate();
    const auto scenes = with_default_views(input);
    const ImageEncoder encoder = make_encoder(config);

    Checkpoint ck;
    ck.config = config;
    ck.stage = 1;
    if (resume) {
        if (resume->stage != 1) throw Error(ErrorCode::Config, "can only resume stage 1 from a stage-1 checkpoint");
        ck.decoder = clone(resume->decoder);
        ck.step = resume->step;
    } else {
        ck.decoder = Decoder::init(decoder_config_for(config, encoder.channels()), mix(config.seed, 0xdec0de));
    }
    ck.decoder.set_requires_grad(true);
    Adam adam(ck.decoder.parameters(), config.stage_lr(1), config.beta1, config.beta2, config.eps);
    if (resume && resume->step > 0) adam.restore(resume->optimizer, "");

    const auto prepared = prepare(scenes, encoder, config, config.leave_one_out);
    const LossWeights& w = config.stage1_weights;
    std::mt19937_64 rng;
    for (; ck.step < config.stage1_steps; ++ck.step) {
        rng = step_rng(config.seed, 1, ck.step);
        const auto batch = sample_batch(prepared, 0, config.batch_size, ck.step, rng);
        LossReport report;
        std::vector<ad::Var> terms;
        for (const auto& item : batch) {
            const PreparedScene& ps = prepared[static_cast<std::size_t>(item.scene)];
            const PreparedView& pv = ps.views[static_cast<std::size_t>(item.view)];
            const ad::Var rendered = render(ps.features[static_cast<std::size_t>(pv.cloud)], pv.plan, ck.decoder);
            const ContentLoss cl = content_loss(rendered, pv.target, encoder);
            ad::Var term = ad::add(ad::scale(cl.feat, w.feat), ad::scale(cl.rgb, w.rgb));
            if (w.tv > 0.0) {
                const ad::Var tv = tv_loss(rendered);
                term = ad::add(term, ad::scale(tv, w.tv));
                report.tv += tv.item();
            }
            report.feat += cl.feat.item();
            report.rgb += cl.rgb.item();
            terms.push_back(term);
        }
        ad::Var total = terms.front();
        for (std::size_t i = 1; i < terms.size(); ++i) total = ad::add(total, terms[i]);
        total = ad::scale(total, 1.0 / static_cast<double>(terms.size()));
        const double n = static_cast<double>(batch.size());
        report.feat /= n;
        report.rgb /= n;
        report.tv /= n;
        finalize_report(report, w);
        if (!std::isfinite(total.item())) throw Error(ErrorCode::Numeric, "stage-1 loss is not finite at step " + std::to_string(ck.step));
        ad::backward(total);
        adam.step();
        if (callback) callback(1, ck.step, report);
    }
    ck.rng_state = rng_to_string(rng);
    adam.store(ck.optimizer, "");
    return ck;
}

Checkpoint train_style(const std::vector<TrainingScene>& input, const Checkpoint& start, const TrainConfig& config,
                       const StepCallback& callback) {
    config.validate();
    if (config.styles.size() < 2 || std::set<std::string>(config.styles.begin(), config.styles.end()).size() < 2) {
        throw Error(ErrorCode::Config, "stage 2 needs at least two distinct styles");
    }
    if (config.batch_size < 2) throw Error(ErrorCode::Config, "stage 2 needs batch_size >= 2");
    const auto scenes = with_default_views(input);
    const ImageEncoder encoder = make_encoder(config);
    const auto embedder = make_embedder(config.embedder);
    const auto templates = templates_for(config);
    const TextBank bank(*embedder, templates);

    std::vector<StyleEmbedding> styles;
    for (const auto& s : config.styles) styles.push_back(embed_style(s, *embedder, templates));
    std::vector<Tensor> style_text;
    for (const auto& s : config.styles) style_text.push_back(bank.embedding(s));

    const auto prepared = prepare(scenes, encoder, config, false);

    Checkpoint ck;
    ck.config = config;
    ck.stage = 2;
    ck.decoder = clone(start.decoder);
    const bool resuming = start.stage == 2;
    if (resuming) {
        if (!start.transform) throw Error(ErrorCode::Load, "stage-2 checkpoint has no transform state");
        ck.transform = clone(*start.transform);
        ck.step = start.step;
    } else {
        TransformConfig tc = config.transform;
        tc.content_dim = encoder.channels();
        tc.style_dim = embedder->dim();
        ck.transform = TransformState::init(tc, mix(config.seed, 0x57f1e));
        if (config.data_init) {
            std::vector<double> rows;
            int n = 0;
            for (const auto& ps : prepared) {
                for (const auto& c : ps.clouds) {
                    rows.insert(rows.end(), c.features.data().begin(), c.features.data().end());
                    n += c.size();
                }
            }
            std::vector<const StyleEmbedding*> sp;
            for (const auto& s : styles) sp.push_back(&s);
            initialize_from_data(*ck.transform, Tensor({n, tc.content_dim}, std::move(rows)), sp);
        }
    }
    ck.config.transform = ck.transform->config;
    TransformState& state = *ck.transform;

    ParamList trainable = state.parameters();
    state.set_requires_grad(true);
    ck.decoder.set_requires_grad(!config.freeze_decoder);
    if (!config.freeze_decoder) {
        for (const auto& p : ck.decoder.parameters()) trainable.emplace_back("decoder." + p.first, p.second);
    }
    Adam adam(trainable, config.stage_lr(2), config.beta1, config.beta2, config.eps);
    if (resuming && start.step > 0) adam.restore(start.optimizer, "");

    // Content embeddings of every training view, for the disparity term.
    std::vector<std::vector<Tensor>> content_embedding(prepared.size());
    for (std::size_t s = 0; s < prepared.size(); ++s)
        for (const auto& pv : prepared[s].views)
            content_embedding[s].push_back(embed_image_resized(*embedder, ad::constant(pv.target)).value());

    const LossWeights& w = config.stage2_weights;
    std::mt19937_64 rng;
    for (; ck.step < config.stage2_steps; ++ck.step) {
        rng = step_rng(config.seed, 2, ck.step);
        const auto batch = sample_batch(prepared, static_cast<int>(config.styles.size()), config.batch_size, ck.step, rng);
        LossReport report;
        ad::Var total = ad::constant(Tensor::scalar(0.0));
        std::vector<ad::Var> image_embeddings;
        std::vector<Tensor> text_embeddings;
        std::vector<std::string> batch_styles;
        const double inv = 1.0 / static_cast<double>(batch.size());
        for (const auto& item : batch) {
            const PreparedScene& ps = prepared[static_cast<std::size_t>(item.scene)];
            const PreparedView& pv = ps.views[static_cast<std::size_t>(item.view)];
            const auto st = static_cast<std::size_t>(item.style);
            const StyleForward sf = stylize_features(ps.features[static_cast<std::size_t>(pv.cloud)], styles[st].vectors, state);
            const ad::Var rendered = render(sf.features, pv.plan, ck.decoder);
            const Tensor delta_t = bank.direction(config.styles[st]);

            PatchConfig pc = config.patch;
            pc.seed = rng();
            const ad::Var patch = patch_loss(rendered, pv.target, delta_t, *embedder, pc);
            const ad::Var gs = directional_loss(rendered, pv.target, delta_t, *embedder);
            const ContentLoss cl = content_loss(rendered, pv.target, encoder);
            const ad::Var tv = tv_loss(rendered);
            ad::Var term = ad::add(ad::scale(patch, w.style), ad::scale(gs, w.gs_weight()));
            term = ad::add(term, ad::add(ad::scale(cl.feat, w.feat), ad::scale(cl.rgb, w.rgb)));
            term = ad::add(term, ad::scale(tv, w.tv));
            total = ad::add(total, ad::scale(term, inv));
            report.patch += patch.item() * inv;
            report.gs += gs.item() * inv;
            report.feat += cl.feat.item() * inv;
            report.rgb += cl.rgb.item() * inv;
            report.tv += tv.item() * inv;

            image_embeddings.push_back(embed_image_resized(*embedder, rendered));
            text_embeddings.push_back(style_text[st]);
            batch_styles.push_back(config.styles[st]);
        }
        if (config.use_divergence) {
            const auto pairs = sample_style_pairs(batch_styles, config.pair_fraction, rng);
            const ad::Var dir = divergence_loss(image_embeddings, text_embeddings, pairs);
            double cd = 0.0;
            for (const auto& [i, j] : pairs) {
                const BatchItem& a = batch[static_cast<std::size_t>(i)];
                const BatchItem& b = batch[static_cast<std::size_t>(j)];
                const Tensor& ea = content_embedding[static_cast<std::size_t>(a.scene)][static_cast<std::size_t>(a.view)];
                const Tensor& eb = content_embedding[static_cast<std::size_t>(b.scene)][static_cast<std::size_t>(b.view)];
                cd += embedding_disparity(ea, eb);
            }
            cd /= static_cast<double>(pairs.size());
            total = ad::add(total, ad::add_scalar(ad::scale(dir, w.style), -w.style * cd));
            report.dir = dir.item();
            report.cd = cd;
        }
        finalize_report(report, w);
        if (!std::isfinite(total.item())) throw Error(ErrorCode::Numeric, "stage-2 loss is not finite at step " + std::to_string(ck.step));
        ad::backward(total);
        adam.step();
        if (callback) callback(2, ck.step, report);
    }
    ck.decoder.set_requires_grad(false);
    ck.rng_state = rng_to_string(rng);
    adam.store(ck.optimizer, "");
    return ck;
}

StylizedCloud stylize_cloud(const FeaturePointCloud& cloud, const std::string& style_text, const Checkpoint& checkpoint,
                            const JointEmbedder& embedder) {
    if (!checkpoint.transform) throw Error(ErrorCode::Config, "checkpoint has no style transform; run stage 2 first");
    const StyleEmbedding style = embed_style(style_text, embedder, templates_for(checkpoint.config));
    return apply_style(cloud, style, *checkpoint.transform);
}

StylizedCloud stylize_scene(const Scene& scene, const std::string& style_text, const Checkpoint& checkpoint,
                            const JointEmbedder& embedder) {
    const ImageEncoder encoder = make_encoder(checkpoint.config);
    CloudBuildOptions opt;
    opt.voxel = checkpoint.config.voxel;
    return stylize_cloud(build_feature_cloud(scene, encoder, opt), style_text, checkpoint, embedder);
}

}  // namespace pcstyle
