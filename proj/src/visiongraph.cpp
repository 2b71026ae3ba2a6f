#include "hnf/visiongraph.hpp"

#include <algorithm>
#include <cmath>

#include "hnf/errors.hpp"

namespace hnf {

Tensor build_knn_graph(const Tensor& features, int64_t k) {
    const int64_t n = features.dim(0), d = features.dim(1);
    if (k < 1 || k >= n)
        throw KTooLarge("k=" + std::to_string(k) + " with n=" + std::to_string(n));
    Tensor A = Tensor::zeros({n, n});
    std::vector<std::pair<double, int64_t>> cand;
    for (int64_t i = 0; i < n; ++i) {
        cand.clear();
        for (int64_t j = 0; j < n; ++j) {
            if (j == i) continue;
            double d2 = 0;
            for (int64_t c = 0; c < d; ++c) {
                const double diff = features.at(i, c) - features.at(j, c);
                d2 += diff * diff;
            }
            cand.emplace_back(d2, j);
        }
        std::sort(cand.begin(), cand.end());  // pair ordering = distance then lower index
        for (int64_t m = 0; m < k; ++m) {
            const int64_t j = cand[static_cast<std::size_t>(m)].second;
            A.set(i, j, 1.0);
            A.set(j, i, 1.0);
        }
    }
    return A;
}

VisionGraph augment_virtual_node(const Tensor& A, Expr X, Expr vn_vec, int64_t k) {
    const int64_t n = A.dim(0);
    if (A.rank() != 2 || A.dim(1) != n) throw AsymmetricInput("adjacency " + shape_str(A.shape()));
    for (int64_t i = 0; i < n; ++i) {
        if (A.at(i, i) != 0.0) throw AsymmetricInput("nonzero diagonal at " + std::to_string(i));
        for (int64_t j = i + 1; j < n; ++j)
            if (A.at(i, j) != A.at(j, i))
                throw AsymmetricInput("A[" + std::to_string(i) + "," + std::to_string(j) + "]");
    }
    if (X->shape[0] != n)
        throw ShapeMismatch("features " + shape_str(X->shape) + " for n=" + std::to_string(n));
    const int64_t d = X->shape[1];
    if (vn_vec->shape != Shape{d} && vn_vec->shape != Shape{1, d})
        throw ShapeMismatch("vn_vec " + shape_str(vn_vec->shape) + " for d=" + std::to_string(d));
    Tensor aug = Tensor::zeros({n + 1, n + 1});
    for (int64_t i = 0; i < n; ++i) {
        for (int64_t j = 0; j < n; ++j) aug.set(i, j, A.at(i, j));
        aug.set(i, n, 1.0);
        aug.set(n, i, 1.0);
    }
    VisionGraph g;
    g.adjacency = aug;
    g.features = concat({std::move(X), reshape(std::move(vn_vec), {1, d})}, 0);
    g.op = normalized_operator(aug);
    g.k = k;
    return g;
}

Tensor normalized_operator(const Tensor& A) {
    const int64_t n = A.dim(0);
    std::vector<double> deg(static_cast<std::size_t>(n), 0.0);
    for (int64_t i = 0; i < n; ++i) {
        double s = 1.0;  // self-loop
        for (int64_t j = 0; j < n; ++j) s += A.at(i, j);
        if (!(s > 0.0)) throw ZeroDegreeNode("node " + std::to_string(i));
        deg[static_cast<std::size_t>(i)] = s;
    }
    Tensor L = Tensor::zeros({n, n});
    for (int64_t i = 0; i < n; ++i)
        for (int64_t j = 0; j < n; ++j) {
            const double a = A.at(i, j) + (i == j ? 1.0 : 0.0);
            if (a != 0.0)
                L.set(i, j, a / std::sqrt(deg[static_cast<std::size_t>(i)] *
                                          deg[static_cast<std::size_t>(j)]));
        }
    return L;
}

std::vector<Expr> cheb_apply(const Tensor& op, Expr X, int64_t K_cheb) {
    if (K_cheb < 1) throw ShapeMismatch("cheb_apply needs K_cheb >= 1");
    if (op.dim(0) != op.dim(1) || op.dim(0) != X->shape[0])
        throw ShapeMismatch("operator " + shape_str(op.shape()) + " vs features " +
                            shape_str(X->shape));
    std::vector<Expr> terms;
    terms.reserve(static_cast<std::size_t>(K_cheb));
    terms.push_back(X);
    if (K_cheb == 1) return terms;
    Expr L = constant(op);
    terms.push_back(matmul(L, X));
    for (int64_t k = 2; k < K_cheb; ++k)
        terms.push_back(sub(scalar_mul(2.0, matmul(L, terms[static_cast<std::size_t>(k - 1)])),
                            terms[static_cast<std::size_t>(k - 2)]));
    return terms;
}

Expr cheb_conv(const VisionGraph& g, const std::vector<Expr>& bank) {
    if (bank.empty()) throw ShapeMismatch("empty filter bank");
    const int64_t d = g.features->shape[1];
    for (const Expr& theta : bank)
        if (theta->shape != Shape{d, d})
            throw ShapeMismatch("theta " + shape_str(theta->shape) + " for d=" + std::to_string(d));
    auto terms = cheb_apply(g.op, g.features, static_cast<int64_t>(bank.size()));
    Expr acc;
    for (std::size_t k = 0; k < bank.size(); ++k) {
        Expr part = matmul(terms[k], bank[k]);
        acc = acc ? add(std::move(acc), std::move(part)) : std::move(part);
    }
    return relu(std::move(acc));
}

}  // namespace hnf
