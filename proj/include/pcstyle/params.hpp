#pragma once

#include <cstdint>
#include <random>
#include <string>
#include <utility>
#include <vector>

#include "pcstyle/archive.hpp"
#include "pcstyle/autodiff.hpp"

namespace pcstyle {

/// Named handles onto trainable leaves. Copies share the underlying nodes.
using ParamList = std::vector<std::pair<std::string, ad::Var>>;

Tensor normal_tensor(Shape shape, double stddev, std::mt19937_64& rng);

void store_params(Archive& archive, const std::string& prefix, const ParamList& params);
/// Overwrites each parameter's value in place; missing names or shape changes raise Load.
void load_params(const Archive& archive, const std::string& prefix, const ParamList& params);

/// FNV-1a over the raw bytes of every value, in list order.
std::uint64_t hash_params(const ParamList& params);

}  // namespace pcstyle
