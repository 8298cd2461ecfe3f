#include "pcstyle/losses.hpp"

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <numeric>
#include <set>

#include "pcstyle/error.hpp"

namespace pcstyle {

namespace {

ad::Var mean_of(const std::vector<ad::Var>& terms) {
    if (terms.empty()) throw Error(ErrorCode::Parameter, "cannot average an empty list of losses");
    ad::Var acc = terms.front();
    for (std::size_t i = 1; i < terms.size(); ++i) acc = ad::add(acc, terms[i]);
    return ad::scale(acc, 1.0 / static_cast<double>(terms.size()));
}

Tensor subtract(const Tensor& a, const Tensor& b) {
    if (a.size() != b.size()) throw Error(ErrorCode::ShapeMismatch, "embedding widths differ");
    Tensor out = a;
    for (std::size_t i = 0; i < out.size(); ++i) out[i] -= b[i];
    return out;
}

double norm(const Tensor& t) {
    double s = 0.0;
    for (double v : t.data()) s += v * v;
    return std::sqrt(s);
}

void require_image(const ad::Var& image, const char* what) {
    if (image.value().rank() != 3 || image.shape()[0] != 3) {
        throw Error(ErrorCode::ShapeMismatch, std::string(what) + " must be [3, H, W], got " + shape_string(image.shape()));
    }
}

// Taps of a difference map: out = x[next] - x[here] along one axis.
ad::SampleMap difference_map(int h, int w, bool horizontal) {
    ad::SampleMap map;
    map.in_h = h;
    map.in_w = w;
    map.out_h = horizontal ? h : h - 1;
    map.out_w = horizontal ? w - 1 : w;
    const std::size_t n = static_cast<std::size_t>(map.out_h) * map.out_w;
    map.index.assign(4 * n, -1);
    map.weight.assign(4 * n, 0.0);
    for (int y = 0; y < map.out_h; ++y) {
        for (int x = 0; x < map.out_w; ++x) {
            const std::size_t base = 4 * (static_cast<std::size_t>(y) * map.out_w + x);
            map.index[base] = y * w + x;
            map.weight[base] = -1.0;
            map.index[base + 1] = horizontal ? y * w + x + 1 : (y + 1) * w + x;
            map.weight[base + 1] = 1.0;
        }
    }
    return map;
}

}  // namespace

nlohmann::json LossReport::to_json() const {
    return {{"patch", patch}, {"dir", dir}, {"cd", cd}, {"feat", feat}, {"rgb", rgb}, {"tv", tv}, {"gs", gs},
            {"total_style", total_style}, {"total_content", total_content}, {"total", total}};
}

void LossWeights::validate() const {
    for (double v : {style, feat, rgb, tv, gs_weight()}) {
        if (!(v >= 0.0) || !std::isfinite(v)) throw Error(ErrorCode::Config, "loss weights must be finite and >= 0");
    }
}

double style_total(double patch, double dir, double cd) { return patch + dir - cd; }

void finalize_report(LossReport& r, const LossWeights& w) {
    r.total_style = style_total(r.patch, r.dir, r.cd);
    r.total_content = w.feat * r.feat + w.rgb * r.rgb;
    r.total = w.style * r.total_style + w.gs_weight() * r.gs + r.total_content + w.tv * r.tv;
}

void PatchConfig::validate(int height, int width) const {
    if (n_patches < 1) throw Error(ErrorCode::Config, "n_patches must be >= 1");
    if (patch_size < 1 || patch_size > std::min(height, width)) {
        throw Error(ErrorCode::Config, "patch_size " + std::to_string(patch_size) + " does not fit a " +
                                           std::to_string(height) + "x" + std::to_string(width) + " image");
    }
    if (!(tau >= 0.0 && tau <= 2.0)) throw Error(ErrorCode::Config, "tau must lie in [0, 2]");
    if (!(distortion >= 0.0 && distortion <= 1.0)) throw Error(ErrorCode::Config, "distortion must lie in [0, 1]");
}

// ---------------------------------------------------------------------------

TextBank::TextBank(const JointEmbedder& embedder, std::vector<std::string> templates)
    : embedder_(&embedder), templates_(std::move(templates)) {
    if (templates_.empty()) throw Error(ErrorCode::Config, "text bank needs at least one template");
    expand_templates("x", templates_);  // validates placeholders up front
}

Tensor TextBank::embedding(const std::string& text) const {
    std::lock_guard lock(mutex_);
    auto it = cache_.find(text);
    if (it == cache_.end()) it = cache_.emplace(text, embed_style(text, *embedder_, templates_).mean).first;
    return it->second;
}

Tensor TextBank::direction(const std::string& style, const std::string& source) const {
    return subtract(embedding(style), embedding(source));
}

// ---------------------------------------------------------------------------

ad::Var cosine_direction_loss(const ad::Var& delta_i, const Tensor& delta_t) {
    if (delta_i.value().size() != delta_t.size()) throw Error(ErrorCode::ShapeMismatch, "direction widths differ");
    const double ni = norm(delta_i.value()), nt = norm(delta_t);
    if (ni < kDirectionEpsilon || nt < kDirectionEpsilon) return ad::constant(Tensor::scalar(1.0));
    Tensor unit_t = delta_t.reshaped(delta_i.shape());
    unit_t *= 1.0 / nt;
    return ad::add_scalar(ad::scale(ad::dot(ad::normalize(delta_i), ad::constant(std::move(unit_t))), -1.0), 1.0);
}

double cosine_direction_loss(const Tensor& delta_i, const Tensor& delta_t) {
    return cosine_direction_loss(ad::constant(delta_i), delta_t).item();
}

ad::Var directional_loss(const ad::Var& rendered, const Tensor& content, const Tensor& delta_t, const JointEmbedder& embedder) {
    require_image(rendered, "rendered image");
    const ad::Var e_render = embed_image_resized(embedder, rendered);
    const Tensor e_content = embed_image_resized(embedder, ad::constant(content)).value();
    return cosine_direction_loss(ad::sub(e_render, ad::constant(e_content)), delta_t);
}

ad::Var directional_loss(const ad::Var& rendered, const Tensor& content, const std::string& style_text,
                         const std::string& source_text, const TextBank& bank) {
    return directional_loss(rendered, content, bank.direction(style_text, source_text), bank.embedder());
}

ad::SampleMap patch_sample_map(int height, int width, int patch_size, double distortion, int out_size,
                               std::mt19937_64& rng) {
    const int P = patch_size;
    auto randint = [&rng](int lo, int hi) {  // inclusive
        return std::uniform_int_distribution<int>(lo, hi)(rng);
    };
    const int oy = randint(0, height - P);
    const int ox = randint(0, width - P);

    const int half = P / 2;
    const int dh = static_cast<int>(distortion * half);
    const std::array<Eigen::Vector2d, 4> start{Eigen::Vector2d(0, 0), Eigen::Vector2d(P - 1, 0),
                                               Eigen::Vector2d(P - 1, P - 1), Eigen::Vector2d(0, P - 1)};
    std::array<Eigen::Vector2d, 4> end;
    end[0] = {randint(0, dh), randint(0, dh)};
    end[1] = {randint(P - dh - 1, P - 1), randint(0, dh)};
    end[2] = {randint(P - dh - 1, P - 1), randint(P - dh - 1, P - 1)};
    end[3] = {randint(0, dh), randint(P - dh - 1, P - 1)};

    // Homography taking output (end) coordinates back to crop (start) coordinates.
    Eigen::Matrix<double, 8, 8> A;
    Eigen::Matrix<double, 8, 1> b;
    for (int i = 0; i < 4; ++i) {
        const double x = end[i].x(), y = end[i].y(), u = start[i].x(), v = start[i].y();
        A.row(2 * i) << x, y, 1, 0, 0, 0, -x * u, -y * u;
        A.row(2 * i + 1) << 0, 0, 0, x, y, 1, -x * v, -y * v;
        b(2 * i) = u;
        b(2 * i + 1) = v;
    }
    const Eigen::Matrix<double, 8, 1> h = A.fullPivLu().solve(b);

    ad::SampleMap map;
    map.in_h = height;
    map.in_w = width;
    map.out_h = map.out_w = out_size;
    const std::size_t n = static_cast<std::size_t>(out_size) * out_size;
    map.index.assign(4 * n, -1);
    map.weight.assign(4 * n, 0.0);
    const double scale = static_cast<double>(P) / out_size;
    for (int y = 0; y < out_size; ++y) {
        const double py = std::clamp((y + 0.5) * scale - 0.5, 0.0, P - 1.0);
        for (int x = 0; x < out_size; ++x) {
            const double px = std::clamp((x + 0.5) * scale - 0.5, 0.0, P - 1.0);
            const double den = h(6) * px + h(7) * py + 1.0;
            const double sx = (h(0) * px + h(1) * py + h(2)) / den;
            const double sy = (h(3) * px + h(4) * py + h(5)) / den;
            const int x0 = static_cast<int>(std::floor(sx)), y0 = static_cast<int>(std::floor(sy));
            const double tx = sx - x0, ty = sy - y0;
            const std::size_t base = 4 * (static_cast<std::size_t>(y) * out_size + x);
            const int xs[4] = {x0, x0 + 1, x0, x0 + 1};
            const int ys[4] = {y0, y0, y0 + 1, y0 + 1};
            const double ws[4] = {(1 - tx) * (1 - ty), tx * (1 - ty), (1 - tx) * ty, tx * ty};
            for (int t = 0; t < 4; ++t) {
                if (xs[t] < 0 || xs[t] >= P || ys[t] < 0 || ys[t] >= P) continue;
                map.index[base + t] = (oy + ys[t]) * width + (ox + xs[t]);
                map.weight[base + t] = ws[t];
            }
        }
    }
    return map;
}

std::vector<ad::Var> patch_directional_losses(const ad::Var& rendered, const Tensor& content, const Tensor& delta_t,
                                              const JointEmbedder& embedder, const PatchConfig& cfg) {
    require_image(rendered, "rendered image");
    const int h = rendered.shape()[1], w = rendered.shape()[2];
    cfg.validate(h, w);
    const Tensor e_content = embed_image_resized(embedder, ad::constant(content)).value();
    std::mt19937_64 rng(cfg.seed);
    std::vector<ad::Var> out;
    out.reserve(static_cast<std::size_t>(cfg.n_patches));
    for (int i = 0; i < cfg.n_patches; ++i) {
        const ad::SampleMap map = patch_sample_map(h, w, cfg.patch_size, cfg.distortion, embedder.input_size(), rng);
        const ad::Var e_patch = embedder.embed_image(ad::resample(rendered, map));
        out.push_back(cosine_direction_loss(ad::sub(e_patch, ad::constant(e_content)), delta_t));
    }
    return out;
}

ad::Var patch_loss(const ad::Var& rendered, const Tensor& content, const Tensor& delta_t, const JointEmbedder& embedder,
                   const PatchConfig& cfg) {
    std::vector<ad::Var> terms = patch_directional_losses(rendered, content, delta_t, embedder, cfg);
    for (auto& t : terms) t = ad::reject_at_or_below(t, cfg.tau);
    return mean_of(terms);
}

ad::Var patch_loss(const ad::Var& rendered, const Tensor& content, const std::string& style_text,
                   const std::string& source_text, const TextBank& bank, const PatchConfig& cfg) {
    return patch_loss(rendered, content, bank.direction(style_text, source_text), bank.embedder(), cfg);
}

std::vector<std::pair<int, int>> sample_style_pairs(const std::vector<std::string>& styles, double fraction,
                                                    std::mt19937_64& rng) {
    if (std::set<std::string>(styles.begin(), styles.end()).size() < 2) {
        throw Error(ErrorCode::Config, "divergence loss needs at least two distinct styles");
    }
    if (!(fraction > 0.0 && fraction <= 1.0)) throw Error(ErrorCode::Config, "pair fraction must lie in (0, 1]");
    std::vector<std::pair<int, int>> pairs;
    for (int i = 0; i < static_cast<int>(styles.size()); ++i)
        for (int j = i + 1; j < static_cast<int>(styles.size()); ++j)
            if (styles[static_cast<std::size_t>(i)] != styles[static_cast<std::size_t>(j)]) pairs.emplace_back(i, j);
    const auto count = std::max<std::size_t>(1, static_cast<std::size_t>(std::lround(fraction * static_cast<double>(pairs.size()))));
    std::shuffle(pairs.begin(), pairs.end(), rng);
    pairs.resize(std::min(count, pairs.size()));
    std::sort(pairs.begin(), pairs.end());
    return pairs;
}

ad::Var divergence_loss(const std::vector<ad::Var>& image_embeddings, const std::vector<Tensor>& text_embeddings,
                        const std::vector<std::pair<int, int>>& pairs) {
    if (image_embeddings.size() != text_embeddings.size()) throw Error(ErrorCode::ShapeMismatch, "one text embedding per image");
    if (pairs.empty()) throw Error(ErrorCode::Config, "divergence loss needs at least one pair");
    std::vector<ad::Var> terms;
    for (const auto& [i, j] : pairs) {
        const auto a = static_cast<std::size_t>(i), b = static_cast<std::size_t>(j);
        terms.push_back(cosine_direction_loss(ad::sub(image_embeddings[a], image_embeddings[b]),
                                              subtract(text_embeddings[a], text_embeddings[b])));
    }
    return mean_of(terms);
}

ad::Var divergence_loss(const std::vector<std::pair<ad::Var, std::string>>& renders, const TextBank& bank,
                        double pair_fraction, std::uint64_t seed) {
    std::vector<std::string> styles;
    std::vector<ad::Var> images;
    std::vector<Tensor> texts;
    for (const auto& [image, style] : renders) styles.push_back(style);
    std::mt19937_64 rng(seed);
    const auto pairs = sample_style_pairs(styles, pair_fraction, rng);
    for (const auto& [image, style] : renders) {
        images.push_back(embed_image_resized(bank.embedder(), image));
        texts.push_back(bank.embedding(style));
    }
    return divergence_loss(images, texts, pairs);
}

double embedding_disparity(const Tensor& ea, const Tensor& eb) {
    if (ea.size() != eb.size()) throw Error(ErrorCode::ShapeMismatch, "embedding widths differ");
    const double na = norm(ea), nb = norm(eb);
    if (na < kDirectionEpsilon || nb < kDirectionEpsilon) return 1.0;
    double d = 0.0;
    for (std::size_t i = 0; i < ea.size(); ++i) d += ea[i] * eb[i];
    return 1.0 - d / (na * nb);
}

double content_disparity(const Tensor& a, const Tensor& b, const JointEmbedder& embedder) {
    return embedding_disparity(embed_image_resized(embedder, ad::constant(a)).value(),
                               embed_image_resized(embedder, ad::constant(b)).value());
}

ContentLoss content_loss(const ad::Var& rendered, const Tensor& ground_truth, const ImageEncoder& encoder) {
    require_image(rendered, "rendered image");
    if (rendered.shape() != ground_truth.shape()) {
        throw Error(ErrorCode::ShapeMismatch, "content loss: " + shape_string(rendered.shape()) + " vs " +
                                                  shape_string(ground_truth.shape()));
    }
    const auto a = encoder.stages(rendered);
    const auto b = encoder.stages(ad::constant(ground_truth));
    std::vector<ad::Var> terms;
    for (std::size_t i = 0; i < a.size(); ++i) terms.push_back(ad::mse(a[i], b[i].value()));
    return {mean_of(terms), ad::l1(rendered, ground_truth)};
}

ad::Var tv_loss(const ad::Var& image) {
    if (image.value().rank() != 3) throw Error(ErrorCode::ShapeMismatch, "tv loss expects [C, H, W]");
    const int h = image.shape()[1], w = image.shape()[2];
    ad::Var total = ad::constant(Tensor::scalar(0.0));
    if (w > 1) total = ad::add(total, ad::mean(ad::square(ad::resample(image, difference_map(h, w, true)))));
    if (h > 1) total = ad::add(total, ad::mean(ad::square(ad::resample(image, difference_map(h, w, false)))));
    return total;
}

ad::Var gs_loss(const ad::Var& rendered, const Tensor& content, const std::string& style_text, const TextBank& bank) {
    return directional_loss(rendered, content, style_text, std::string(kSourceText), bank);
}

}  // namespace pcstyle
