#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "hnf/expr.hpp"
#include "hnf/tensor.hpp"

namespace hnf {

struct FusionConfig {
    int64_t d = 64;
    int64_t heads = 4;
    int64_t d_h = 16;
};

/// Registers the per-head text/fused projections, the output projection and
/// the classifier under `prefix` ("fusion." by default).
void init_fusion_params(ParamSet& ps, const FusionConfig& cfg, int64_t classes, uint64_t seed,
                        const std::string& prefix = "fusion.", DType dtype = DType::F32);

struct CrossModalOut {
    Expr y_cross;               // {1, d}
    std::vector<Expr> weights;  // per head, {1, 2} over the two modality slots
};

/// Two-slot cross-modal attention over the text and fused embeddings, as a
/// graph over the `prefix` leaves. Both inputs are {1, d}.
CrossModalOut cross_modal_attention_expr(Expr h_text_fus, Expr h_fus, const FusionConfig& cfg,
                                         const std::string& prefix = "fusion.");

/// p = softmax(y w) over `classes` categories. y is {1, d}, w is {d, c}.
Expr classify_expr(Expr y_cross, Expr w);

/// Convenience wrappers evaluating the graphs above on plain tensors.
/// Vectors are {d}; the parameter set must hold the `prefix` weights.
Tensor cross_modal_attention(const Tensor& h_text_fus, const Tensor& h_fus,
                             const ParamSet& params, const FusionConfig& cfg,
                             const std::string& prefix = "fusion.");
Tensor classify(const Tensor& y_cross, const Tensor& w);

/// Index of the largest probability, lowest index on exact ties.
int64_t argmax_index(const Tensor& p);

}  // namespace hnf
