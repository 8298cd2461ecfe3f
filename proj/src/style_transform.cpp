#include "pcstyle/style_transform.hpp"

#include <Eigen/Eigenvalues>
#include <cmath>
#include <random>

#include "json.hpp"
#include "pcstyle/error.hpp"
#include "pcstyle/kernels.hpp"

namespace pcstyle {

namespace {

using MatrixXdR = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

Eigen::Map<const MatrixXdR> as_matrix(const Tensor& t) { return {t.ptr(), t.dim(0), t.dim(1)}; }

Tensor from_matrix(const Eigen::MatrixXd& m) {
    Tensor t({static_cast<int>(m.rows()), static_cast<int>(m.cols())});
    for (int r = 0; r < m.rows(); ++r)
        for (int c = 0; c < m.cols(); ++c) t.at(r, c) = m(r, c);
    return t;
}

Tensor identity(int n) {
    Tensor t({n, n}, 0.0);
    for (int i = 0; i < n; ++i) t.at(i, i) = 1.0;
    return t;
}

ad::Var run_predictor(const CovPredictor& p, const ad::Var& cov, int d) {
    const ad::Var flat = ad::reshape(cov, {1, d * d});
    const ad::Var hidden = ad::relu(ad::linear(flat, p.w1, p.b1));
    return ad::reshape(ad::linear(hidden, p.w2, p.b2), {d, d});
}

CovPredictor make_predictor(int d, int hidden, bool identity_init, std::mt19937_64& rng) {
    CovPredictor p;
    p.w1 = ad::Var::parameter(normal_tensor({hidden, d * d}, std::sqrt(2.0 / (d * d)), rng));
    p.b1 = ad::Var::parameter(Tensor({hidden}, 0.0));
    p.w2 = ad::Var::parameter(identity_init ? Tensor({d * d, hidden}, 0.0)
                                            : normal_tensor({d * d, hidden}, 0.5 / std::sqrt(hidden), rng));
    p.b2 = ad::Var::parameter(identity(d).reshaped({d * d}));
    return p;
}

Eigen::MatrixXd symmetric_power(const Eigen::MatrixXd& m, double power) {
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> eig(0.5 * (m + m.transpose()));
    if (eig.info() != Eigen::Success) throw Error(ErrorCode::Numeric, "eigendecomposition failed");
    const Eigen::VectorXd lambda = eig.eigenvalues().cwiseMax(1e-8).array().pow(power);
    return eig.eigenvectors() * lambda.asDiagonal() * eig.eigenvectors().transpose();
}

void check_shape(const ad::Var& v, const Shape& expected, const char* what) {
    if (v.shape() != expected) {
        throw Error(ErrorCode::ShapeMismatch,
                    std::string(what) + " has shape " + shape_string(v.shape()) + ", expected " + shape_string(expected));
    }
}

nlohmann::json config_to_json(const TransformConfig& c) {
    return {{"content_dim", c.content_dim},   {"style_dim", c.style_dim},
            {"compressed_dim", c.compressed_dim}, {"global_width", c.global_width},
            {"predictor_width", c.predictor_width}, {"oracle", c.oracle},
            {"global_enabled", c.global_enabled}};
}

TransformConfig config_from_json(const nlohmann::json& j) {
    TransformConfig c;
    c.content_dim = j.at("content_dim").get<int>();
    c.style_dim = j.at("style_dim").get<int>();
    c.compressed_dim = j.at("compressed_dim").get<int>();
    c.global_width = j.at("global_width").get<int>();
    c.predictor_width = j.at("predictor_width").get<int>();
    c.oracle = j.at("oracle").get<bool>();
    c.global_enabled = j.at("global_enabled").get<bool>();
    return c;
}

}  // namespace

void TransformConfig::validate() const {
    if (content_dim < 1 || style_dim < 1 || compressed_dim < 1 || global_width < 1 || predictor_width < 0) {
        throw Error(ErrorCode::Config, "transform dimensions must be positive");
    }
    if (compressed_dim > content_dim) throw Error(ErrorCode::Config, "compressed_dim must not exceed content_dim");
}

TransformState TransformState::init(const TransformConfig& config, std::uint64_t seed, bool identity_predictors) {
    config.validate();
    std::mt19937_64 rng(seed);
    const int D = config.content_dim, E = config.style_dim, d = config.compressed_dim, G = config.global_width;
    TransformState s;
    s.config = config;
    s.compress_c_w = ad::Var::parameter(normal_tensor({d, D}, 1.0 / std::sqrt(D), rng));
    s.compress_c_b = ad::Var::parameter(Tensor({d}, 0.0));
    s.compress_s_w = ad::Var::parameter(normal_tensor({d, E}, 1.0 / std::sqrt(E), rng));
    s.compress_s_b = ad::Var::parameter(Tensor({d}, 0.0));
    s.predictor_c = make_predictor(d, config.hidden(), identity_predictors, rng);
    s.predictor_s = make_predictor(d, config.hidden(), identity_predictors, rng);
    s.decompress_w = ad::Var::parameter(normal_tensor({D, d}, 1.0 / std::sqrt(d), rng));
    s.decompress_b = ad::Var::parameter(Tensor({D}, 0.0));
    s.global_w1 = ad::Var::parameter(normal_tensor({G, D}, std::sqrt(2.0 / D), rng));
    s.global_b1 = ad::Var::parameter(Tensor({G}, 0.0));
    s.global_w2 = ad::Var::parameter(normal_tensor({D, G}, 1.0 / std::sqrt(G), rng));
    s.global_b2 = ad::Var::parameter(Tensor({D}, 0.0));
    Tensor fuse({D, 2 * D}, 0.0);
    for (int i = 0; i < D; ++i) fuse.at(i, i) = 1.0;
    s.fuse_w = ad::Var::parameter(std::move(fuse));
    s.fuse_b = ad::Var::parameter(Tensor({D}, 0.0));
    return s;
}

ParamList TransformState::parameters() const {
    return {{"compress_c.w", compress_c_w},   {"compress_c.b", compress_c_b},   {"compress_s.w", compress_s_w},
            {"compress_s.b", compress_s_b},   {"predictor_c.w1", predictor_c.w1}, {"predictor_c.b1", predictor_c.b1},
            {"predictor_c.w2", predictor_c.w2}, {"predictor_c.b2", predictor_c.b2}, {"predictor_s.w1", predictor_s.w1},
            {"predictor_s.b1", predictor_s.b1}, {"predictor_s.w2", predictor_s.w2}, {"predictor_s.b2", predictor_s.b2},
            {"decompress.w", decompress_w},   {"decompress.b", decompress_b},   {"global.w1", global_w1},
            {"global.b1", global_b1},         {"global.w2", global_w2},         {"global.b2", global_b2},
            {"fuse.w", fuse_w},               {"fuse.b", fuse_b}};
}

void TransformState::set_requires_grad(bool on) const {
    for (auto& [name, var] : parameters()) {
        ad::Var v = var;
        v.set_requires_grad(on);
    }
}

void TransformState::store(Archive& archive, const std::string& prefix) const {
    archive.put_string(prefix + "config", config_to_json(config).dump());
    store_params(archive, prefix, parameters());
}

TransformState TransformState::restore(const Archive& archive, const std::string& prefix) {
    if (!archive.has_string(prefix + "config")) throw Error(ErrorCode::Load, "archive holds no transform state");
    TransformConfig config;
    try {
        config = config_from_json(nlohmann::json::parse(archive.string(prefix + "config")));
    } catch (const nlohmann::json::exception& e) {
        throw Error(ErrorCode::Load, std::string("bad transform config: ") + e.what());
    }
    TransformState s = init(config, 0);
    load_params(archive, prefix, s.parameters());
    return s;
}

void TransformState::save(const std::filesystem::path& path) const {
    Archive a;
    a.kind = "transform";
    store(a, "");
    write_archive(path, a);
}

TransformState TransformState::load(const std::filesystem::path& path) {
    const Archive a = read_archive(path);
    if (a.kind != "transform") throw Error(ErrorCode::Load, path.string() + " is not a transform state");
    return restore(a, "");
}

void initialize_from_data(TransformState& state, const Tensor& content, const std::vector<const StyleEmbedding*>& styles) {
    const int D = state.config.content_dim, d = state.config.compressed_dim;
    if (content.rank() != 2 || content.dim(1) != D) throw Error(ErrorCode::ShapeMismatch, "content features must be [N, D]");
    if (content.dim(0) < 2) throw Error(ErrorCode::DegenerateInput, "need at least two content features");
    const ContentStats stats = content_stats(content);
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> eig(as_matrix(stats.cov));
    Tensor cw({d, D}), cb({d}, 0.0), dw({D, d}), db({D});
    for (int k = 0; k < d; ++k) {
        const Eigen::VectorXd u = eig.eigenvectors().col(D - 1 - k);  // descending variance
        double proj = 0.0;
        for (int j = 0; j < D; ++j) {
            cw.at(k, j) = u[j];
            dw.at(j, k) = u[j];
            proj += u[j] * stats.mean[static_cast<std::size_t>(j)];
        }
        cb[static_cast<std::size_t>(k)] = -proj;
    }
    for (int j = 0; j < D; ++j) db[static_cast<std::size_t>(j)] = stats.mean[static_cast<std::size_t>(j)];
    state.compress_c_w.mutable_value() = std::move(cw);
    state.compress_c_b.mutable_value() = std::move(cb);
    state.decompress_w.mutable_value() = std::move(dw);
    state.decompress_b.mutable_value() = std::move(db);

    if (!styles.empty()) {
        const int E = state.config.style_dim;
        std::vector<double> centre(static_cast<std::size_t>(E), 0.0);
        for (const StyleEmbedding* s : styles) {
            if (static_cast<int>(s->mean.size()) != E) throw Error(ErrorCode::ShapeMismatch, "style width mismatch");
            for (int e = 0; e < E; ++e) centre[static_cast<std::size_t>(e)] += s->mean[static_cast<std::size_t>(e)] / styles.size();
        }
        const Tensor& w = state.compress_s_w.value();
        Tensor b({d});
        for (int k = 0; k < d; ++k) {
            double acc = 0.0;
            for (int e = 0; e < E; ++e) acc += w.at(k, e) * centre[static_cast<std::size_t>(e)];
            b[static_cast<std::size_t>(k)] = -acc;
        }
        state.compress_s_b.mutable_value() = std::move(b);
    }
}

ContentStats content_stats(const Tensor& features) {
    if (features.rank() != 2) throw Error(ErrorCode::ShapeMismatch, "features must be [N, d]");
    const int n = features.dim(0), d = features.dim(1);
    if (n < 2) throw Error(ErrorCode::DegenerateInput, "content statistics need at least 2 points, got " + std::to_string(n));
    ContentStats s{Tensor({d}, 0.0), Tensor({d, d}, 0.0)};
    for (int i = 0; i < n; ++i)
        for (int j = 0; j < d; ++j) s.mean[static_cast<std::size_t>(j)] += features.at(i, j);
    for (int j = 0; j < d; ++j) s.mean[static_cast<std::size_t>(j)] /= n;
    Tensor centred = features;
    for (int i = 0; i < n; ++i)
        for (int j = 0; j < d; ++j) centred.at(i, j) -= s.mean[static_cast<std::size_t>(j)];
    kernels::gemm_tn(static_cast<std::size_t>(d), static_cast<std::size_t>(d), static_cast<std::size_t>(n), centred.ptr(),
                     centred.ptr(), s.cov.ptr());
    s.cov *= 1.0 / n;
    return s;
}

ad::Var covariance(const ad::Var& x, ad::Var* mean) {
    if (x.value().rank() != 2) throw Error(ErrorCode::ShapeMismatch, "covariance input must be [N, d]");
    const int n = x.shape()[0];
    if (n < 2) throw Error(ErrorCode::DegenerateInput, "covariance needs at least 2 rows, got " + std::to_string(n));
    const ad::Var m = ad::col_mean(x);
    const ad::Var centred = ad::sub_row(x, m);
    if (mean) *mean = m;
    return ad::scale(ad::matmul(ad::transpose(centred), centred), 1.0 / n);
}

Tensor oracle_transform(const Tensor& content_cov, const Tensor& style_cov) {
    const Eigen::MatrixXd cc = as_matrix(content_cov);
    const Eigen::MatrixXd cs = as_matrix(style_cov);
    return from_matrix(symmetric_power(cs, 0.5) * symmetric_power(cc, -0.5));
}

ad::Var predict_transform(const ad::Var& content_cov, const ad::Var& style_cov, const TransformState& state) {
    const int d = state.config.compressed_dim;
    check_shape(content_cov, {d, d}, "content covariance");
    check_shape(style_cov, {d, d}, "style covariance");
    if (!content_cov.value().all_finite() || !style_cov.value().all_finite()) {
        throw Error(ErrorCode::Numeric, "covariance contains NaN or infinity");
    }
    if (state.config.oracle) return ad::constant(oracle_transform(content_cov.value(), style_cov.value()));
    const ad::Var tc = run_predictor(state.predictor_c, content_cov, d);
    const ad::Var ts = run_predictor(state.predictor_s, style_cov, d);
    return ad::matmul(ts, tc);
}

ad::Var global_feature(const ad::Var& features, const TransformState& state) {
    if (features.value().rank() != 2 || features.shape()[0] < 1) {
        throw Error(ErrorCode::EmptyCloud, "global feature needs at least one point");
    }
    const ad::Var lifted = ad::relu(ad::linear(features, state.global_w1, state.global_b1));
    const int g = state.config.global_width;
    return ad::linear(ad::reshape(ad::max_rows(lifted), {1, g}), state.global_w2, state.global_b2);
}

ad::Var stylize_global(const ad::Var& global, const ad::Var& transform, const ad::Var& content_mean,
                       const ad::Var& style_mean, const TransformState& state) {
    const ad::Var g = ad::linear(global, state.compress_c_w, state.compress_c_b);
    const ad::Var moved = ad::add_row(ad::matmul(ad::sub_row(g, content_mean), ad::transpose(transform)), style_mean);
    return ad::linear(moved, state.decompress_w, state.decompress_b);
}

ad::Var fuse_features(const ad::Var& per_point, const ad::Var& global, const TransformState& state) {
    const int n = per_point.shape()[0];
    check_shape(global, {1, state.config.content_dim}, "global feature");
    return ad::linear(ad::concat_cols(per_point, ad::broadcast_rows(global, n)), state.fuse_w, state.fuse_b);
}

StyleForward stylize_features(const ad::Var& features, const Tensor& style_vectors, const TransformState& state) {
    const auto& cfg = state.config;
    if (features.value().rank() != 2 || features.shape()[0] == 0) throw Error(ErrorCode::EmptyCloud, "cannot stylize an empty cloud");
    if (features.shape()[1] != cfg.content_dim) {
        throw Error(ErrorCode::ShapeMismatch, "cloud features have " + std::to_string(features.shape()[1]) +
                                                   " channels, transform expects " + std::to_string(cfg.content_dim));
    }
    if (style_vectors.rank() != 2 || style_vectors.dim(1) != cfg.style_dim) {
        throw Error(ErrorCode::ShapeMismatch, "style vectors must be [M, " + std::to_string(cfg.style_dim) + "]");
    }
    StyleForward out;
    const ad::Var content = ad::linear(features, state.compress_c_w, state.compress_c_b);
    const ad::Var style = ad::linear(ad::constant(style_vectors), state.compress_s_w, state.compress_s_b);
    const ad::Var content_cov = covariance(content, &out.content_mean);
    const ad::Var style_cov = covariance(style, &out.style_mean);
    out.transform = predict_transform(content_cov, style_cov, state);
    out.compressed = ad::add_row(ad::matmul(ad::sub_row(content, out.content_mean), ad::transpose(out.transform)), out.style_mean);
    out.per_point = ad::linear(out.compressed, state.decompress_w, state.decompress_b);
    if (cfg.global_enabled) {
        out.global = stylize_global(global_feature(features, state), out.transform, out.content_mean, out.style_mean, state);
        out.features = fuse_features(out.per_point, out.global, state);
    } else {
        out.features = out.per_point;
    }
    return out;
}

FeaturePointCloud StylizedCloud::as_cloud() const {
    FeaturePointCloud c;
    c.positions = positions;
    c.features = features;
    c.source_view = source_view;
    return c;
}

StylizedCloud apply_style(const FeaturePointCloud& cloud, const StyleEmbedding& style, const TransformState& state) {
    if (cloud.size() == 0) throw Error(ErrorCode::EmptyCloud, "cannot stylize an empty cloud");
    const StyleForward f = stylize_features(ad::constant(cloud.features), style.vectors, state);
    StylizedCloud out;
    out.positions = cloud.positions;
    out.features = f.features.value();
    out.compressed = f.compressed.value();
    out.source_view = cloud.source_view;
    out.style_text = style.style_text;
    if (!out.features.all_finite()) throw Error(ErrorCode::Numeric, "stylized features are not finite");
    return out;
}

}  // namespace pcstyle
