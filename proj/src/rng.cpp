#include "hnf/rng.hpp"

#include <cmath>

namespace hnf {

uint64_t fnv1a(const std::string& s) {
    uint64_t h = 1469598103934665603ull;
    for (unsigned char c : s) {
        h ^= c;
        h *= 1099511628211ull;
    }
    return h;
}

std::mt19937_64 named_rng(uint64_t seed, const std::string& name) {
    return std::mt19937_64(seed ^ fnv1a(name));
}

Tensor xavier_uniform(Shape shape, uint64_t seed, const std::string& name, DType dtype) {
    const int64_t fan_in = shape.size() == 2 ? shape[0] : shape[shape.size() - 1];
    const int64_t fan_out = shape.size() == 2 ? shape[1] : shape[shape.size() - 1];
    const double a = std::sqrt(6.0 / static_cast<double>(fan_in + fan_out));
    std::mt19937_64 g = named_rng(seed, name);
    Tensor t(std::move(shape), dtype);
    const int64_t n = t.numel();
    for (int64_t i = 0; i < n; ++i) t.set(i, rng_uniform_range(g, -a, a));
    return t;
}

}  // namespace hnf
