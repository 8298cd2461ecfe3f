#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

namespace pcstyle {

enum class ErrorCode {
    BehindCamera,
    InvalidDepth,
    Load,
    Validation,
    Config,
    Size,
    EmptyCloud,
    Parameter,
    Template,
    DegenerateInput,
    Numeric,
    EmptyRender,
    ShapeMismatch,
    Embedder,
    Io,
};

std::string_view to_string(ErrorCode code) noexcept;

/// Single exception type for the library; `code()` tells callers which contract was violated.
class Error : public std::runtime_error {
public:
    Error(ErrorCode code, const std::string& message)
        : std::runtime_error(std::string(to_string(code)) + ": " + message), code_(code) {}

    [[nodiscard]] ErrorCode code() const noexcept { return code_; }

private:
    ErrorCode code_;
};

}  // namespace pcstyle
