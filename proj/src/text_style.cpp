#include "pcstyle/text_style.hpp"

#include <cmath>
#include <fstream>
#include <random>
#include <sstream>

#include "json.hpp"
#include "pcstyle/archive.hpp"
#include "pcstyle/error.hpp"

namespace pcstyle {

namespace detail {
extern const std::string_view kDefaultTemplatesText;
}

ad::Var embed_image_resized(const JointEmbedder& embedder, const ad::Var& image) {
    if (image.value().rank() != 3 || image.shape()[0] != 3) {
        throw Error(ErrorCode::ShapeMismatch, "embedder input must be [3,H,W], got " + shape_string(image.shape()));
    }
    const int s = embedder.input_size();
    if (image.shape()[1] == s && image.shape()[2] == s) return embedder.embed_image(image);
    return embedder.embed_image(ad::resample(image, ad::bilinear_resize_map(image.shape()[1], image.shape()[2], s, s)));
}

Tensor embed_image_resized(const JointEmbedder& embedder, const Image& image) {
    return embed_image_resized(embedder, ad::constant(image.to_tensor())).value();
}

namespace {

std::uint64_t splitmix64(std::uint64_t x) {
    x += 0x9e3779b97f4a7c15ULL;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
    return x ^ (x >> 31);
}

std::uint64_t fnv1a(std::string_view s) {
    std::uint64_t h = 0xcbf29ce484222325ULL;
    for (unsigned char c : s) {
        h ^= c;
        h *= 0x100000001b3ULL;
    }
    return h;
}

std::vector<std::string> tokenize(std::string_view text) {
    std::vector<std::string> tokens;
    std::istringstream in{std::string(text)};
    std::string tok;
    while (in >> tok) tokens.push_back(tok);
    return tokens;
}

void require_image(const ad::Var& image, int size) {
    if (image.value().rank() != 3 || image.shape()[0] != 3 || image.shape()[1] != size || image.shape()[2] != size) {
        throw Error(ErrorCode::Embedder, "expected a [3," + std::to_string(size) + "," + std::to_string(size) +
                                             "] image, got " + shape_string(image.shape()));
    }
}

ad::Var project_histogram(const ad::Var& image, const ad::Var& projection) {
    const ad::Var hist = ad::reshape(ad::soft_histogram(image, StubEmbedder::kBins), {1, StubEmbedder::kHistogram});
    const ad::Var raw = ad::linear(hist, projection, ad::Var());
    return ad::normalize(ad::reshape(raw, {projection.shape()[0]}));
}

}  // namespace

// ---------------------------------------------------------------------------
// Stub

StubEmbedder::StubEmbedder(std::uint64_t seed, int dim, int input_size)
    : seed_(seed), dim_(dim), input_size_(input_size) {
    if (dim < 8) throw Error(ErrorCode::Config, "stub embedder needs dim >= 8");
    if (input_size < 1) throw Error(ErrorCode::Config, "stub embedder input size must be >= 1");
    std::mt19937_64 rng(splitmix64(seed ^ 0x5eedULL));
    std::normal_distribution<double> normal(0.0, 1.0);
    Tensor p({dim, kHistogram});
    for (double& v : p.data()) v = normal(rng);
    projection_ = ad::constant(std::move(p));
}

Tensor StubEmbedder::text_histogram(std::string_view text) const {
    std::vector<std::string> tokens = tokenize(text);
    if (tokens.empty()) tokens.emplace_back("\x01<empty>");
    std::vector<std::uint64_t> keys;
    for (std::size_t i = 0; i < tokens.size(); ++i) {
        keys.push_back(fnv1a(tokens[i]));
        if (i + 1 < tokens.size()) keys.push_back(fnv1a(tokens[i] + '\x1f' + tokens[i + 1]));
    }
    Tensor hist({kHistogram}, 0.0);
    for (std::uint64_t key : keys) {
        std::mt19937_64 rng(splitmix64(key ^ splitmix64(seed_)));
        std::uniform_real_distribution<double> u(0.0, 1.0);
        for (double& v : hist.data()) {
            const double x = u(rng);
            v += x * x * x;
        }
    }
    double total = 0.0;
    for (double v : hist.data()) total += v;
    hist *= 1.0 / total;
    return hist;
}

Tensor StubEmbedder::embed_text(std::string_view text) const {
    const ad::Var hist = ad::constant(text_histogram(text).reshaped({1, kHistogram}));
    return ad::normalize(ad::reshape(ad::linear(hist, projection_, ad::Var()), {dim_})).value();
}

ad::Var StubEmbedder::embed_image(const ad::Var& image) const {
    require_image(image, input_size_);
    return project_histogram(image, projection_);
}

std::unique_ptr<JointEmbedder> stub_embedder(std::uint64_t seed, int dim, int input_size) {
    return std::make_unique<StubEmbedder>(seed, dim, input_size);
}

// ---------------------------------------------------------------------------
// Exported

ExportedEmbedder::ExportedEmbedder(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw Error(ErrorCode::Load, "cannot open embedder export " + path.string());
    nlohmann::json doc;
    try {
        in >> doc;
        dim_ = doc.at("dim").get<int>();
        input_size_ = doc.value("input_size", 224);
        const auto rows = doc.at("image_projection").get<std::vector<std::vector<double>>>();
        if (static_cast<int>(rows.size()) != dim_) throw Error(ErrorCode::Load, "image_projection needs dim rows");
        Tensor p({dim_, StubEmbedder::kHistogram});
        for (int r = 0; r < dim_; ++r) {
            if (rows[static_cast<std::size_t>(r)].size() != static_cast<std::size_t>(StubEmbedder::kHistogram)) {
                throw Error(ErrorCode::Load, "image_projection rows need 64 entries");
            }
            for (int c = 0; c < StubEmbedder::kHistogram; ++c) p.at(r, c) = rows[static_cast<std::size_t>(r)][static_cast<std::size_t>(c)];
        }
        projection_ = ad::constant(std::move(p));
        for (const auto& [text, vec] : doc.at("texts").items()) {
            auto v = vec.get<std::vector<double>>();
            if (static_cast<int>(v.size()) != dim_) throw Error(ErrorCode::Load, "text vector for '" + text + "' has wrong size");
            texts_.emplace_back(text, Tensor::vector(std::move(v)));
        }
    } catch (const nlohmann::json::exception& e) {
        throw Error(ErrorCode::Load, path.string() + ": " + e.what());
    }
    if (dim_ < 1) throw Error(ErrorCode::Load, path.string() + ": dim must be positive");
}

Tensor ExportedEmbedder::embed_text(std::string_view text) const {
    for (const auto& [t, v] : texts_)
        if (t == text) return v;
    throw Error(ErrorCode::Embedder, "exported embedder has no entry for \"" + std::string(text) + "\"");
}

ad::Var ExportedEmbedder::embed_image(const ad::Var& image) const {
    require_image(image, input_size_);
    return project_histogram(image, projection_);
}

std::unique_ptr<JointEmbedder> make_embedder(std::string_view spec) {
    if (spec.starts_with("export:")) return std::make_unique<ExportedEmbedder>(std::string(spec.substr(7)));
    if (spec.starts_with("stub:")) {
        std::vector<std::uint64_t> parts;
        std::string rest(spec.substr(5));
        std::istringstream in(rest);
        std::string item;
        while (std::getline(in, item, ':')) {
            try {
                std::size_t used = 0;
                parts.push_back(std::stoull(item, &used));
                if (used != item.size()) throw std::invalid_argument(item);
            } catch (const std::exception&) {
                throw Error(ErrorCode::Config, "bad embedder spec '" + std::string(spec) + "'");
            }
        }
        if (parts.empty() || parts.size() > 3) throw Error(ErrorCode::Config, "bad embedder spec '" + std::string(spec) + "'");
        const int dim = parts.size() > 1 ? static_cast<int>(parts[1]) : 512;
        const int size = parts.size() > 2 ? static_cast<int>(parts[2]) : 224;
        return stub_embedder(parts[0], dim, size);
    }
    throw Error(ErrorCode::Config, "embedder must be stub:SEED or export:PATH, got '" + std::string(spec) + "'");
}

// ---------------------------------------------------------------------------
// Templates

namespace {

std::vector<std::string> parse_templates(std::istream& in) {
    std::vector<std::string> out;
    std::string line;
    while (std::getline(in, line)) {
        if (!line.empty() && line.back() == '\r') line.pop_back();
        if (!line.empty()) out.push_back(line);
    }
    return out;
}

}  // namespace

std::vector<std::string> default_templates() {
    std::istringstream in{std::string(detail::kDefaultTemplatesText)};
    return parse_templates(in);
}

std::vector<std::string> load_templates(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw Error(ErrorCode::Load, "cannot open templates file " + path.string());
    return parse_templates(in);
}

std::vector<std::string> expand_templates(std::string_view style_text, const std::vector<std::string>& templates) {
    std::vector<std::string> out;
    out.reserve(templates.size());
    for (const auto& t : templates) {
        const auto pos = t.find("{}");
        if (pos == std::string::npos || t.find("{}", pos + 2) != std::string::npos) {
            throw Error(ErrorCode::Template, "template needs exactly one {} placeholder: \"" + t + "\"");
        }
        out.push_back(t.substr(0, pos) + std::string(style_text) + t.substr(pos + 2));
    }
    return out;
}

StyleEmbedding embed_style(std::string_view style_text, const JointEmbedder& embedder,
                           const std::vector<std::string>& templates) {
    StyleEmbedding s;
    s.style_text = std::string(style_text);
    s.prompts = expand_templates(style_text, templates);
    const int m = static_cast<int>(s.prompts.size());
    const int e = embedder.dim();
    s.vectors = Tensor({m, e});
    s.mean = Tensor({e}, 0.0);
    for (int i = 0; i < m; ++i) {
        const Tensor v = embedder.embed_text(s.prompts[static_cast<std::size_t>(i)]);
        if (v.size() != static_cast<std::size_t>(e)) throw Error(ErrorCode::Embedder, "embedder returned wrong width");
        for (int c = 0; c < e; ++c) s.vectors.at(i, c) = v[static_cast<std::size_t>(c)];
    }
    if (m > 0) {
        for (int c = 0; c < e; ++c) {
            double acc = 0.0;
            for (int i = 0; i < m; ++i) acc += s.vectors.at(i, c);
            s.mean[static_cast<std::size_t>(c)] = acc / m;
        }
    }
    return s;
}

void write_style_embedding(const std::filesystem::path& path, const StyleEmbedding& style) {
    Archive a;
    a.kind = "style";
    a.put("vectors", style.vectors);
    a.put("mean", style.mean);
    a.put_string("style_text", style.style_text);
    std::string prompts;
    for (const auto& p : style.prompts) prompts += p + '\n';
    a.put_string("prompts", prompts);
    write_archive(path, a);
}

StyleEmbedding read_style_embedding(const std::filesystem::path& path) {
    const Archive a = read_archive(path);
    if (a.kind != "style") throw Error(ErrorCode::Load, path.string() + " is not a style embedding");
    StyleEmbedding s;
    s.vectors = a.tensor("vectors");
    s.mean = a.tensor("mean");
    s.style_text = a.string("style_text");
    std::istringstream in(a.string("prompts"));
    std::string line;
    while (std::getline(in, line)) s.prompts.push_back(line);
    return s;
}

}  // namespace pcstyle
