#include "pcstyle/error.hpp"

namespace pcstyle {

std::string_view to_string(ErrorCode code) noexcept {
    switch (code) {
        case ErrorCode::BehindCamera: return "behind-camera";
        case ErrorCode::InvalidDepth: return "invalid-depth";
        case ErrorCode::Load: return "load";
        case ErrorCode::Validation: return "validation";
        case ErrorCode::Config: return "config";
        case ErrorCode::Size: return "size";
        case ErrorCode::EmptyCloud: return "empty-cloud";
        case ErrorCode::Parameter: return "parameter";
        case ErrorCode::Template: return "template";
        case ErrorCode::DegenerateInput: return "degenerate-input";
        case ErrorCode::Numeric: return "numeric";
        case ErrorCode::EmptyRender: return "empty-render";
        case ErrorCode::ShapeMismatch: return "shape-mismatch";
        case ErrorCode::Embedder: return "embedder";
        case ErrorCode::Io: return "io";
    }
    return "unknown";
}

}  // namespace pcstyle
