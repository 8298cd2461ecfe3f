#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <utility>
#include <vector>

#include "pcstyle/tensor.hpp"

namespace pcstyle {

/// Named tensors (stored as f64) plus named text blobs in one binary file:
/// "PCSA", u32 version, kind string, then tagged records. Used for encoder
/// weights and training checkpoints.
struct Archive {
    static constexpr std::uint32_t kVersion = 1;

    std::string kind;
    std::vector<std::pair<std::string, Tensor>> tensors;
    std::vector<std::pair<std::string, std::string>> strings;

    void put(std::string name, Tensor t) { tensors.emplace_back(std::move(name), std::move(t)); }
    void put_string(std::string name, std::string s) { strings.emplace_back(std::move(name), std::move(s)); }

    [[nodiscard]] bool has_tensor(const std::string& name) const;
    [[nodiscard]] const Tensor& tensor(const std::string& name) const;
    [[nodiscard]] bool has_string(const std::string& name) const;
    [[nodiscard]] const std::string& string(const std::string& name) const;
};

void write_archive(const std::filesystem::path& path, const Archive& archive);
Archive read_archive(const std::filesystem::path& path);

}  // namespace pcstyle
