#include "pcstyle/archive.hpp"

#include <algorithm>
#include <array>
#include <cstring>
#include <fstream>

#include "pcstyle/error.hpp"

namespace pcstyle {
namespace {

constexpr std::array<char, 4> kMagic{'P', 'C', 'S', 'A'};
enum : std::uint8_t { kTensorRecord = 1, kStringRecord = 2, kEndRecord = 0xff };

template <class T>
void put(std::ostream& out, T v) {
    static_assert(std::is_trivially_copyable_v<T>);
    out.write(reinterpret_cast<const char*>(&v), sizeof v);
}

template <class T>
T get(std::istream& in, const std::filesystem::path& path) {
    T v{};
    in.read(reinterpret_cast<char*>(&v), sizeof v);
    if (!in) throw Error(ErrorCode::Load, "truncated archive " + path.string());
    return v;
}

void put_string(std::ostream& out, const std::string& s) {
    put<std::uint32_t>(out, static_cast<std::uint32_t>(s.size()));
    out.write(s.data(), static_cast<std::streamsize>(s.size()));
}

std::string get_string(std::istream& in, const std::filesystem::path& path) {
    const auto n = get<std::uint32_t>(in, path);
    std::string s(n, '\0');
    in.read(s.data(), n);
    if (!in) throw Error(ErrorCode::Load, "truncated archive " + path.string());
    return s;
}

}  // namespace

bool Archive::has_tensor(const std::string& name) const {
    return std::any_of(tensors.begin(), tensors.end(), [&](const auto& e) { return e.first == name; });
}

const Tensor& Archive::tensor(const std::string& name) const {
    for (const auto& [n, t] : tensors)
        if (n == name) return t;
    throw Error(ErrorCode::Load, "archive '" + kind + "' has no tensor '" + name + "'");
}

bool Archive::has_string(const std::string& name) const {
    return std::any_of(strings.begin(), strings.end(), [&](const auto& e) { return e.first == name; });
}

const std::string& Archive::string(const std::string& name) const {
    for (const auto& [n, s] : strings)
        if (n == name) return s;
    throw Error(ErrorCode::Load, "archive '" + kind + "' has no entry '" + name + "'");
}

void write_archive(const std::filesystem::path& path, const Archive& archive) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw Error(ErrorCode::Io, "cannot write " + path.string());
    out.write(kMagic.data(), 4);
    put<std::uint32_t>(out, Archive::kVersion);
    put_string(out, archive.kind);
    for (const auto& [name, t] : archive.tensors) {
        put<std::uint8_t>(out, kTensorRecord);
        put_string(out, name);
        put<std::uint32_t>(out, static_cast<std::uint32_t>(t.rank()));
        for (int d : t.shape()) put<std::int32_t>(out, d);
        out.write(reinterpret_cast<const char*>(t.ptr()), static_cast<std::streamsize>(t.size() * sizeof(double)));
    }
    for (const auto& [name, s] : archive.strings) {
        put<std::uint8_t>(out, kStringRecord);
        put_string(out, name);
        put_string(out, s);
    }
    put<std::uint8_t>(out, kEndRecord);
    if (!out) throw Error(ErrorCode::Io, "failed writing " + path.string());
}

Archive read_archive(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw Error(ErrorCode::Load, "cannot open " + path.string());
    std::array<char, 4> magic{};
    in.read(magic.data(), 4);
    if (!in || magic != kMagic) throw Error(ErrorCode::Load, "not an archive: " + path.string());
    const auto version = get<std::uint32_t>(in, path);
    if (version != Archive::kVersion) {
        throw Error(ErrorCode::Load, path.string() + ": unsupported archive version " + std::to_string(version));
    }
    Archive archive;
    archive.kind = get_string(in, path);
    for (;;) {
        const auto tag = get<std::uint8_t>(in, path);
        if (tag == kEndRecord) break;
        std::string name = get_string(in, path);
        if (tag == kTensorRecord) {
            const auto rank = get<std::uint32_t>(in, path);
            if (rank > 8) throw Error(ErrorCode::Load, path.string() + ": implausible tensor rank");
            Shape shape;
            for (std::uint32_t i = 0; i < rank; ++i) shape.push_back(get<std::int32_t>(in, path));
            Tensor t(shape);
            in.read(reinterpret_cast<char*>(t.ptr()), static_cast<std::streamsize>(t.size() * sizeof(double)));
            if (!in) throw Error(ErrorCode::Load, "truncated archive " + path.string());
            archive.tensors.emplace_back(std::move(name), std::move(t));
        } else if (tag == kStringRecord) {
            archive.strings.emplace_back(std::move(name), get_string(in, path));
        } else {
            throw Error(ErrorCode::Load, path.string() + ": unknown record tag");
        }
    }
    return archive;
}

}  // namespace pcstyle
