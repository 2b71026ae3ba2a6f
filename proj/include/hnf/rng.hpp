#pragma once

#include <cstdint>
#include <random>
#include <string>

#include "hnf/tensor.hpp"

namespace hnf {

uint64_t fnv1a(const std::string& s);

/// Uniform double in [0,1) built from the top 53 bits of the generator
/// output, so streams are identical across standard library implementations.
inline double rng_uniform(std::mt19937_64& g) {
    return static_cast<double>(g() >> 11) * 0x1.0p-53;
}

inline double rng_uniform_range(std::mt19937_64& g, double lo, double hi) {
    return lo + (hi - lo) * rng_uniform(g);
}

inline int64_t rng_index(std::mt19937_64& g, int64_t n) {
    return static_cast<int64_t>(rng_uniform(g) * static_cast<double>(n));
}

/// Per-tensor generator: the same (seed, name) pair always yields the same
/// stream regardless of creation order.
std::mt19937_64 named_rng(uint64_t seed, const std::string& name);

Tensor xavier_uniform(Shape shape, uint64_t seed, const std::string& name,
                      DType dtype = DType::F32);

}  // namespace hnf
