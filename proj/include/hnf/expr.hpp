#pragma once

#include <cstdint>
#include <map>
#include <memory>
#include <string>
#include <unordered_map>
#include <vector>

#include "hnf/tensor.hpp"

namespace hnf {

enum class Op {
    Leaf,
    Const,
    MatMul,
    Transpose,
    Add,
    Sub,
    Mul,
    ScalarMul,
    Concat,
    Slice,
    Reshape,
    ReduceSum,
    Mean,
    Sigmoid,
    Relu,
    Tanh,
    Softmax,
    Exp,
    Log,
    Sqrt,
    LayerNorm,
};

const char* op_name(Op op);

struct Node;
using Expr = std::shared_ptr<Node>;

struct Node {
    Op op;
    std::vector<Expr> inputs;
    Shape shape;
    std::string name;    // Leaf only
    Tensor value;        // Const only
    int axis = 0;        // Concat, Slice, Softmax
    int64_t start = 0;   // Slice
    int64_t stop = 0;    // Slice
    double scalar = 0.0; // ScalarMul
    uint64_t id = 0;

    ~Node();
};

Expr leaf(const std::string& name, Shape shape);
Expr constant(Tensor value);
Expr constant_scalar(double v);
Expr matmul(Expr a, Expr b);
Expr transpose(Expr x);
Expr add(Expr a, Expr b);
Expr sub(Expr a, Expr b);
Expr mul(Expr a, Expr b);
Expr scalar_mul(double s, Expr x);
Expr concat(std::vector<Expr> xs, int axis);
Expr slice(Expr x, int axis, int64_t start, int64_t stop);
Expr reshape(Expr x, Shape to);
Expr reduce_sum(Expr x);
Expr mean_all(Expr x);
Expr sigmoid(Expr x);
Expr relu(Expr x);
Expr tanh_(Expr x);
Expr softmax(Expr x, int axis);
Expr exp_(Expr x);
Expr log_(Expr x);
Expr sqrt_(Expr x);
Expr layer_norm(Expr x);

// Composite helpers built from the primitives above.
Expr broadcast_rows(Expr v, int64_t rows);             // {d} or {1,d} -> {rows,d}
Expr rows_sum(Expr x);                                 // {n,m} -> {n,1}
Expr cols_sum(Expr x);                                 // {n,m} -> {1,m}
Expr pick(Expr x, int64_t r, int64_t c);               // {n,m} -> {1}
Expr reverse_rows(Expr x, int64_t fixed_prefix = 0);   // first `fixed_prefix` rows stay in place
Expr affine_rows(Expr x, Expr w, Expr b);              // x{n,k}*w{k,m} + b broadcast over rows

// Rebuilds the graph with the given leaves replaced by other expressions.
Expr substitute(const Expr& e, const std::map<std::string, Expr>& repl);

struct Session {
    DType dtype = DType::F64;
    std::map<std::string, Tensor> bindings;
    // Keyed by Node::id (unique per process) so entries from discarded graphs
    // can never alias freshly allocated nodes.
    std::unordered_map<uint64_t, Tensor> cache;

    void bind(const std::string& name, Tensor t);
    void bind_all(const ParamSet& params);
    void invalidate();
};

Tensor eval(const Expr& e, Session& s);
double eval_scalar(const Expr& e, Session& s);

// Reverse-mode gradients with respect to the named leaves. The root must be
// scalar unless a seed cotangent matching the root shape is supplied.
std::map<std::string, Tensor> grad(const Expr& root, Session& s,
                                   const std::vector<std::string>& wanted);
std::map<std::string, Tensor> grad(const Expr& root, Session& s,
                                   const std::vector<std::string>& wanted, const Tensor& seed);

struct FDReport {
    double max_rel_err = 0.0;
    std::string worst_name;
    int64_t worst_index = -1;
    double analytic = 0.0;
    double numeric = 0.0;
    int64_t checked = 0;
};

// Central-difference check of grad() against re-evaluation of the same graph.
// max_per_leaf == 0 checks every element; otherwise a deterministic stride
// sample of that many elements per leaf.
FDReport finite_diff_check(const Expr& root, Session& s,
                           const std::vector<std::string>& wanted,
                           double eps = 1e-6, int64_t max_per_leaf = 0);

}  // namespace hnf
