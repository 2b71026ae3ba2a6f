#pragma once

#include <cstdint>
#include <map>
#include <string>

#include "hnf/tensor.hpp"

namespace hnf {

/// Adam with bias correction. Moment buffers are keyed by parameter name and
/// created lazily on the first step that touches a parameter.
struct AdamOpt {
    double lr = 1e-3;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    int64_t t = 0;
    std::map<std::string, Tensor> m;
    std::map<std::string, Tensor> v;

    explicit AdamOpt(double lr_ = 1e-3) : lr(lr_) {}

    /// Applies one update to every parameter that has a gradient entry.
    /// Parameters without gradients are left untouched, as are their moments.
    void step(ParamSet& params, const std::map<std::string, Tensor>& grads);
};

}  // namespace hnf
