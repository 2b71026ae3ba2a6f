#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "hnf/expr.hpp"
#include "hnf/patcher.hpp"
#include "hnf/tensor.hpp"

namespace hnf {

struct HnfLayerSpec {
    int64_t patch = 16;
    int64_t k = 10;
};

/// Shape of the three-layer fusion network. Defaults follow the reference
/// setup: 224x224 inputs, d = 64, an inverted pyramid of patch sizes
/// 16/28/32 with kNN degrees 10/6/4.
struct HnfConfig {
    int64_t image_hw = 224;
    int64_t channels = 1;
    int64_t d = 64;
    int64_t heads = 4;
    int64_t ffn_hidden = 128;
    int64_t ode_steps = 8;
    int64_t ode_depth = 1;
    int64_t cheb_k = 3;
    bool tie_directions = false;
    std::vector<HnfLayerSpec> layers{{16, 10}, {28, 6}, {32, 4}};
};

std::string hnf_layer_prefix(int64_t layer);

/// Registers every parameter of the fusion network under layers.<i>.*.
void init_hnf_params(ParamSet& ps, const HnfConfig& cfg, uint64_t seed,
                     DType dtype = DType::F32);

struct MoeOut {
    Expr weights;  // {1,2}, softmax over the two expert logits
    Expr fused;    // {1,d}
};

/// weights = softmax([h_cls ; h_vn] W_g); fused = w0 h_cls + w1 h_vn.
MoeOut moe_gate(Expr h_cls, Expr h_vn, Expr w_g);

struct HnfLayerOut {
    Expr h_cls;    // {1,d}, ODE-encoded cls token
    Expr h_vn;     // {1,d}, Chebyshev-encoded virtual node
    Expr weights;  // {1,2}
    Expr fused;    // {1,d}
    int64_t n = 0;  // patches at this layer's scale
};

/// One fusion layer over a preprocessed image: tokenize at the layer's patch
/// size, optionally add the projected previous fused embedding to the cls
/// token and the virtual-node feature, then run both paths and gate them.
/// The session provides parameter bindings and is used to evaluate patch
/// embeddings for the kNN graph build.
HnfLayerOut hnf_layer_forward(const Tensor& img, const HnfConfig& cfg, int64_t layer,
                              Expr prev_fused, Session& s);

struct HnfOut {
    Expr h_fus;  // {1,d}
    std::vector<Expr> gate_weights;
    std::vector<int64_t> patch_counts;
};

/// Chains the configured layers, threading the fused embedding through the
/// inverted pyramid; returns the last layer's fusion.
HnfOut hnf_forward(const Micrograph& img, const HnfConfig& cfg, Session& s);

}  // namespace hnf
