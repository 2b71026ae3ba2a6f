#pragma once

#include <vector>

#include "hnf/expr.hpp"
#include "hnf/tensor.hpp"

namespace hnf {

/// Patch graph with the virtual node at the last index. The adjacency and the
/// normalized operator are plain values (graph topology is data, not a
/// differentiable quantity); node features stay symbolic.
struct VisionGraph {
    Tensor adjacency;  // (n+1)x(n+1) binary
    Expr features;     // (n+1)xd
    Tensor op;         // L-hat, symmetric
    int64_t k = 0;
};

/// A_ij = 1 iff j is among the k nearest neighbors of i (Euclidean on rows)
/// or vice versa; distance ties resolved toward the lower index.
Tensor build_knn_graph(const Tensor& features, int64_t k);

/// Extends A with a node connected to every other and appends vn_vec as its
/// feature row; fills in the normalized operator.
VisionGraph augment_virtual_node(const Tensor& A, Expr X, Expr vn_vec, int64_t k);

/// L-hat = D^{-1/2} (A + I) D^{-1/2} with D the degree matrix of A + I.
Tensor normalized_operator(const Tensor& A);

/// [T_0 X, T_1 X, ..., T_{K-1} X] by the three-term recurrence
/// T_k = 2 L T_{k-1} - T_{k-2}; never forms T_k as a matrix.
std::vector<Expr> cheb_apply(const Tensor& op, Expr X, int64_t K_cheb);

/// E = relu(sum_k T_k X Theta_k); row n is the virtual-node embedding.
Expr cheb_conv(const VisionGraph& g, const std::vector<Expr>& bank);

}  // namespace hnf
