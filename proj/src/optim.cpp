#include "hnf/optim.hpp"

#include <cmath>

#include "hnf/errors.hpp"

namespace hnf {

void AdamOpt::step(ParamSet& params, const std::map<std::string, Tensor>& grads) {
    ++t;
    const double bc1 = 1.0 - std::pow(beta1, static_cast<double>(t));
    const double bc2 = 1.0 - std::pow(beta2, static_cast<double>(t));
    for (const auto& [name, g] : grads) {
        auto it = params.find(name);
        if (it == params.end()) throw UnknownName("adam step for unregistered parameter " + name);
        Tensor& p = it->second;
        if (g.shape() != p.shape())
            throw ShapeMismatch("gradient for " + name + " has shape " + shape_str(g.shape()) +
                                ", parameter has " + shape_str(p.shape()));
        Tensor& mt = m.try_emplace(name, Tensor::zeros(p.shape(), DType::F64)).first->second;
        Tensor& vt = v.try_emplace(name, Tensor::zeros(p.shape(), DType::F64)).first->second;
        const int64_t n = p.numel();
        for (int64_t i = 0; i < n; ++i) {
            const double gi = g.at(i);
            const double mi = beta1 * mt.at(i) + (1.0 - beta1) * gi;
            const double vi = beta2 * vt.at(i) + (1.0 - beta2) * gi * gi;
            mt.set(i, mi);
            vt.set(i, vi);
            const double update = lr * (mi / bc1) / (std::sqrt(vi / bc2) + eps);
            p.set(i, p.at(i) - update);
        }
    }
}

}  // namespace hnf
