#include "pcstyle/params.hpp"

#include <cstring>

#include "pcstyle/error.hpp"

namespace pcstyle {

Tensor normal_tensor(Shape shape, double stddev, std::mt19937_64& rng) {
    Tensor t(std::move(shape));
    std::normal_distribution<double> normal(0.0, stddev);
    for (double& v : t.data()) v = normal(rng);
    return t;
}

void store_params(Archive& archive, const std::string& prefix, const ParamList& params) {
    for (const auto& [name, var] : params) archive.put(prefix + name, var.value());
}

void load_params(const Archive& archive, const std::string& prefix, const ParamList& params) {
    for (const auto& [name, var] : params) {
        const std::string key = prefix + name;
        if (!archive.has_tensor(key)) throw Error(ErrorCode::Load, "archive is missing parameter " + key);
        const Tensor& t = archive.tensor(key);
        if (t.shape() != var.shape()) {
            throw Error(ErrorCode::Load, "parameter " + key + " has shape " + shape_string(t.shape()) + ", expected " +
                                             shape_string(var.shape()));
        }
        ad::Var handle = var;
        handle.mutable_value() = t;
    }
}

std::uint64_t hash_params(const ParamList& params) {
    std::uint64_t h = 0xcbf29ce484222325ULL;
    for (const auto& [name, var] : params) {
        for (double v : var.value().data()) {
            unsigned char bytes[sizeof(double)];
            std::memcpy(bytes, &v, sizeof v);
            for (unsigned char b : bytes) {
                h ^= b;
                h *= 0x100000001b3ULL;
            }
        }
    }
    return h;
}

}  // namespace pcstyle
