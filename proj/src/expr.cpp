#include "hnf/expr.hpp"

#include <Eigen/Dense>

#include <algorithm>
#include <atomic>
#include <cmath>
#include <set>
#include <unordered_set>

#include "hnf/errors.hpp"

namespace hnf {

const char* op_name(Op op) {
    switch (op) {
        case Op::Leaf: return "leaf";
        case Op::Const: return "const";
        case Op::MatMul: return "matmul";
        case Op::Transpose: return "transpose";
        case Op::Add: return "add";
        case Op::Sub: return "sub";
        case Op::Mul: return "mul";
        case Op::ScalarMul: return "scalar_mul";
        case Op::Concat: return "concat";
        case Op::Slice: return "slice";
        case Op::Reshape: return "reshape";
        case Op::ReduceSum: return "reduce_sum";
        case Op::Mean: return "mean";
        case Op::Sigmoid: return "sigmoid";
        case Op::Relu: return "relu";
        case Op::Tanh: return "tanh";
        case Op::Softmax: return "softmax";
        case Op::Exp: return "exp";
        case Op::Log: return "log";
        case Op::Sqrt: return "sqrt";
        case Op::LayerNorm: return "layer_norm";
    }
    return "?";
}

// Destroying a long expression chain through nested shared_ptr releases would
// recurse once per node, so children are handed to a flat drain list instead.
Node::~Node() {
    thread_local std::vector<Expr> drain;
    thread_local bool draining = false;
    for (auto& c : inputs) {
        if (c && c.use_count() == 1) drain.push_back(std::move(c));
    }
    inputs.clear();
    if (draining) return;
    draining = true;
    while (!drain.empty()) {
        Expr e = std::move(drain.back());
        drain.pop_back();
        e.reset();
    }
    draining = false;
}

static uint64_t next_id() {
    static std::atomic<uint64_t> counter{0};
    return counter.fetch_add(1, std::memory_order_relaxed);
}

static Expr make_node(Op op, std::vector<Expr> inputs, Shape shape) {
    auto n = std::make_shared<Node>();
    n->op = op;
    n->inputs = std::move(inputs);
    n->shape = std::move(shape);
    n->id = next_id();
    return n;
}

Expr leaf(const std::string& name, Shape shape) {
    auto n = make_node(Op::Leaf, {}, std::move(shape));
    n->name = name;
    return n;
}

Expr constant(Tensor value) {
    auto n = make_node(Op::Const, {}, value.shape());
    n->value = std::move(value);
    return n;
}

Expr constant_scalar(double v) { return constant(Tensor::scalar(v)); }

Expr matmul(Expr a, Expr b) {
    if (a->shape.size() != 2 || b->shape.size() != 2)
        throw ShapeMismatch("matmul expects rank-2 operands, got " + shape_str(a->shape) + " and " +
                            shape_str(b->shape));
    if (a->shape[1] != b->shape[0])
        throw ShapeMismatch("matmul inner dims " + shape_str(a->shape) + " x " + shape_str(b->shape));
    Shape out{a->shape[0], b->shape[1]};
    return make_node(Op::MatMul, {std::move(a), std::move(b)}, std::move(out));
}

Expr transpose(Expr x) {
    if (x->shape.size() != 2) throw ShapeMismatch("transpose expects rank-2, got " + shape_str(x->shape));
    Shape out{x->shape[1], x->shape[0]};
    return make_node(Op::Transpose, {std::move(x)}, std::move(out));
}

static Shape broadcast_binary_shape(const char* what, const Shape& a, const Shape& b) {
    if (a == b) return a;
    if (shape_numel(a) == 1) return b;
    if (shape_numel(b) == 1) return a;
    throw ShapeMismatch(std::string(what) + " " + shape_str(a) + " vs " + shape_str(b));
}

Expr add(Expr a, Expr b) {
    Shape out = broadcast_binary_shape("add", a->shape, b->shape);
    return make_node(Op::Add, {std::move(a), std::move(b)}, std::move(out));
}

Expr sub(Expr a, Expr b) {
    Shape out = broadcast_binary_shape("sub", a->shape, b->shape);
    return make_node(Op::Sub, {std::move(a), std::move(b)}, std::move(out));
}

Expr mul(Expr a, Expr b) {
    Shape out = broadcast_binary_shape("mul", a->shape, b->shape);
    return make_node(Op::Mul, {std::move(a), std::move(b)}, std::move(out));
}

Expr scalar_mul(double s, Expr x) {
    Shape out = x->shape;
    auto n = make_node(Op::ScalarMul, {std::move(x)}, std::move(out));
    n->scalar = s;
    return n;
}

Expr concat(std::vector<Expr> xs, int axis) {
    if (xs.empty()) throw ShapeMismatch("concat of zero expressions");
    const int rank = static_cast<int>(xs[0]->shape.size());
    if (rank != 1 && rank != 2) throw ShapeMismatch("concat expects rank-1 or rank-2");
    if (axis < 0 || axis >= rank) throw ShapeMismatch("concat axis out of range");
    Shape out = xs[0]->shape;
    for (std::size_t i = 1; i < xs.size(); ++i) {
        const Shape& s = xs[i]->shape;
        if (static_cast<int>(s.size()) != rank)
            throw ShapeMismatch("concat rank mismatch " + shape_str(out) + " vs " + shape_str(s));
        for (int d = 0; d < rank; ++d) {
            if (d == axis) continue;
            if (s[d] != out[d])
                throw ShapeMismatch("concat shape mismatch " + shape_str(xs[0]->shape) + " vs " +
                                    shape_str(s));
        }
        out[axis] += s[axis];
    }
    auto n = make_node(Op::Concat, std::move(xs), std::move(out));
    n->axis = axis;
    return n;
}

Expr slice(Expr x, int axis, int64_t start, int64_t stop) {
    const int rank = static_cast<int>(x->shape.size());
    if (rank != 1 && rank != 2) throw ShapeMismatch("slice expects rank-1 or rank-2");
    if (axis < 0 || axis >= rank) throw ShapeMismatch("slice axis out of range");
    if (start < 0 || stop <= start || stop > x->shape[axis])
        throw ShapeMismatch("slice bounds [" + std::to_string(start) + "," + std::to_string(stop) +
                            ") on " + shape_str(x->shape));
    Shape out = x->shape;
    out[axis] = stop - start;
    auto n = make_node(Op::Slice, {std::move(x)}, std::move(out));
    n->axis = axis;
    n->start = start;
    n->stop = stop;
    return n;
}

Expr reshape(Expr x, Shape to) {
    if (shape_numel(to) != shape_numel(x->shape))
        throw ShapeMismatch("reshape " + shape_str(x->shape) + " -> " + shape_str(to));
    return make_node(Op::Reshape, {std::move(x)}, std::move(to));
}

Expr reduce_sum(Expr x) { return make_node(Op::ReduceSum, {std::move(x)}, {1}); }
Expr mean_all(Expr x) { return make_node(Op::Mean, {std::move(x)}, {1}); }

static Expr unary(Op op, Expr x) {
    Shape out = x->shape;
    return make_node(op, {std::move(x)}, std::move(out));
}

Expr sigmoid(Expr x) { return unary(Op::Sigmoid, std::move(x)); }
Expr relu(Expr x) { return unary(Op::Relu, std::move(x)); }
Expr tanh_(Expr x) { return unary(Op::Tanh, std::move(x)); }
Expr exp_(Expr x) { return unary(Op::Exp, std::move(x)); }
Expr log_(Expr x) { return unary(Op::Log, std::move(x)); }
Expr sqrt_(Expr x) { return unary(Op::Sqrt, std::move(x)); }

Expr softmax(Expr x, int axis) {
    const int rank = static_cast<int>(x->shape.size());
    if (rank != 1 && rank != 2) throw ShapeMismatch("softmax expects rank-1 or rank-2");
    if (axis < 0 || axis >= rank) throw ShapeMismatch("softmax axis out of range");
    Shape out = x->shape;
    auto n = make_node(Op::Softmax, {std::move(x)}, std::move(out));
    n->axis = axis;
    return n;
}

Expr layer_norm(Expr x) {
    const int rank = static_cast<int>(x->shape.size());
    if (rank != 1 && rank != 2) throw ShapeMismatch("layer_norm expects rank-1 or rank-2");
    return unary(Op::LayerNorm, std::move(x));
}

Expr broadcast_rows(Expr v, int64_t rows) {
    if (v->shape.size() == 1) v = reshape(std::move(v), {1, v->shape[0]});
    if (v->shape.size() != 2 || v->shape[0] != 1)
        throw ShapeMismatch("broadcast_rows expects a single row, got " + shape_str(v->shape));
    Expr ones = constant(Tensor::full({rows, 1}, 1.0));
    return matmul(std::move(ones), std::move(v));
}

Expr rows_sum(Expr x) {
    if (x->shape.size() != 2) throw ShapeMismatch("rows_sum expects rank-2");
    Expr ones = constant(Tensor::full({x->shape[1], 1}, 1.0));
    return matmul(std::move(x), std::move(ones));
}

Expr cols_sum(Expr x) {
    if (x->shape.size() != 2) throw ShapeMismatch("cols_sum expects rank-2");
    Expr ones = constant(Tensor::full({1, x->shape[0]}, 1.0));
    return matmul(std::move(ones), std::move(x));
}

Expr pick(Expr x, int64_t r, int64_t c) {
    Expr row = slice(std::move(x), 0, r, r + 1);
    Expr cell = slice(std::move(row), 1, c, c + 1);
    return reshape(std::move(cell), {1});
}

Expr reverse_rows(Expr x, int64_t fixed_prefix) {
    if (x->shape.size() != 2) throw ShapeMismatch("reverse_rows expects rank-2");
    const int64_t n = x->shape[0];
    if (n - fixed_prefix <= 1) return x;
    std::vector<Expr> rows;
    rows.reserve(static_cast<std::size_t>(n));
    for (int64_t i = 0; i < fixed_prefix; ++i) rows.push_back(slice(x, 0, i, i + 1));
    for (int64_t i = n - 1; i >= fixed_prefix; --i) rows.push_back(slice(x, 0, i, i + 1));
    return concat(std::move(rows), 0);
}

Expr affine_rows(Expr x, Expr w, Expr b) {
    const int64_t rows = x->shape[0];
    Expr y = matmul(std::move(x), std::move(w));
    return add(std::move(y), broadcast_rows(std::move(b), rows));
}

Expr substitute(const Expr& root, const std::map<std::string, Expr>& repl) {
    std::unordered_map<const Node*, Expr> memo;
    std::vector<Expr> stack{root};
    while (!stack.empty()) {
        Expr e = stack.back();
        if (memo.count(e.get())) {
            stack.pop_back();
            continue;
        }
        bool ready = true;
        for (auto& c : e->inputs) {
            if (!memo.count(c.get())) {
                stack.push_back(c);
                ready = false;
            }
        }
        if (!ready) continue;
        stack.pop_back();
        if (e->op == Op::Leaf) {
            auto it = repl.find(e->name);
            if (it != repl.end()) {
                if (it->second->shape != e->shape)
                    throw ShapeMismatch("substitute " + e->name + ": " + shape_str(e->shape) +
                                        " vs " + shape_str(it->second->shape));
                memo.emplace(e.get(), it->second);
            } else {
                memo.emplace(e.get(), e);
            }
            continue;
        }
        bool changed = false;
        std::vector<Expr> new_inputs;
        new_inputs.reserve(e->inputs.size());
        for (auto& c : e->inputs) {
            Expr m = memo.at(c.get());
            changed = changed || (m.get() != c.get());
            new_inputs.push_back(std::move(m));
        }
        if (!changed) {
            memo.emplace(e.get(), e);
            continue;
        }
        auto n = std::make_shared<Node>();
        n->op = e->op;
        n->inputs = std::move(new_inputs);
        n->shape = e->shape;
        n->name = e->name;
        n->value = e->value;
        n->axis = e->axis;
        n->start = e->start;
        n->stop = e->stop;
        n->scalar = e->scalar;
        n->id = next_id();
        memo.emplace(e.get(), std::move(n));
    }
    return memo.at(root.get());
}

void Session::bind(const std::string& name, Tensor t) {
    bindings[name] = std::move(t);
    cache.clear();
}

void Session::bind_all(const ParamSet& params) {
    for (const auto& [name, t] : params) bindings[name] = t;
    cache.clear();
}

void Session::invalidate() { cache.clear(); }

namespace {

template <typename T>
using CMap = Eigen::Map<const Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>;
template <typename T>
using MMap = Eigen::Map<Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>;

Tensor reshaped(const Tensor& t, Shape to) {
    Tensor out(std::move(to), t.dtype());
    if (t.dtype() == DType::F32) {
        auto src = t.data<float>();
        auto dst = out.data<float>();
        std::copy(src.begin(), src.end(), dst.begin());
    } else {
        auto src = t.data<double>();
        auto dst = out.data<double>();
        std::copy(src.begin(), src.end(), dst.begin());
    }
    return out;
}

// Rows/cols view of a tensor treated as a 2-D slab for axis-wise kernels.
// Rank-1 tensors behave as a single row.
void slab_dims(const Tensor& t, int64_t& rows, int64_t& cols) {
    if (t.rank() == 2) {
        rows = t.dim(0);
        cols = t.dim(1);
    } else {
        rows = 1;
        cols = t.numel();
    }
}

template <typename T>
Tensor compute_t(const Node& n, const std::vector<const Tensor*>& in, DType dt) {
    Tensor out(n.shape, dt);
    auto ov = out.data<T>();
    switch (n.op) {
        case Op::MatMul: {
            const Tensor& a = *in[0];
            const Tensor& b = *in[1];
            CMap<T> A(a.data<T>().data(), a.dim(0), a.dim(1));
            CMap<T> B(b.data<T>().data(), b.dim(0), b.dim(1));
            MMap<T> C(ov.data(), a.dim(0), b.dim(1));
            C.noalias() = A * B;
            break;
        }
        case Op::Transpose: {
            const Tensor& a = *in[0];
            auto av = a.data<T>();
            const int64_t r = a.dim(0), c = a.dim(1);
            for (int64_t i = 0; i < r; ++i)
                for (int64_t j = 0; j < c; ++j)
                    ov[static_cast<std::size_t>(j * r + i)] = av[static_cast<std::size_t>(i * c + j)];
            break;
        }
        case Op::Add:
        case Op::Sub:
        case Op::Mul: {
            const Tensor& a = *in[0];
            const Tensor& b = *in[1];
            auto av = a.data<T>();
            auto bv = b.data<T>();
            const std::size_t count = ov.size();
            auto apply = [&](auto f) {
                if (a.numel() == b.numel()) {
                    for (std::size_t i = 0; i < count; ++i) ov[i] = f(av[i], bv[i]);
                } else if (a.numel() == 1) {
                    const T s = av[0];
                    for (std::size_t i = 0; i < count; ++i) ov[i] = f(s, bv[i]);
                } else {
                    const T s = bv[0];
                    for (std::size_t i = 0; i < count; ++i) ov[i] = f(av[i], s);
                }
            };
            if (n.op == Op::Add) apply([](T x, T y) { return x + y; });
            else if (n.op == Op::Sub) apply([](T x, T y) { return x - y; });
            else apply([](T x, T y) { return x * y; });
            break;
        }
        case Op::ScalarMul: {
            auto av = in[0]->data<T>();
            const T s = static_cast<T>(n.scalar);
            for (std::size_t i = 0; i < ov.size(); ++i) ov[i] = s * av[i];
            break;
        }
        case Op::Concat: {
            if (n.axis == 0 || n.shape.size() == 1) {
                std::size_t off = 0;
                for (const Tensor* t : in) {
                    auto tv = t->data<T>();
                    std::copy(tv.begin(), tv.end(), ov.begin() + static_cast<std::ptrdiff_t>(off));
                    off += tv.size();
                }
            } else {
                const int64_t rows = n.shape[0], cols = n.shape[1];
                int64_t coff = 0;
                for (const Tensor* t : in) {
                    auto tv = t->data<T>();
                    const int64_t tc = t->dim(1);
                    for (int64_t r = 0; r < rows; ++r)
                        for (int64_t c = 0; c < tc; ++c)
                            ov[static_cast<std::size_t>(r * cols + coff + c)] =
                                tv[static_cast<std::size_t>(r * tc + c)];
                    coff += tc;
                }
            }
            break;
        }
        case Op::Slice: {
            const Tensor& a = *in[0];
            auto av = a.data<T>();
            if (a.rank() == 1 || n.axis == 0) {
                const int64_t cols = a.rank() == 2 ? a.dim(1) : 1;
                const std::size_t from = static_cast<std::size_t>(n.start * cols);
                std::copy(av.begin() + static_cast<std::ptrdiff_t>(from),
                          av.begin() + static_cast<std::ptrdiff_t>(n.stop * cols), ov.begin());
            } else {
                const int64_t rows = a.dim(0), cols = a.dim(1), w = n.stop - n.start;
                for (int64_t r = 0; r < rows; ++r)
                    for (int64_t c = 0; c < w; ++c)
                        ov[static_cast<std::size_t>(r * w + c)] =
                            av[static_cast<std::size_t>(r * cols + n.start + c)];
            }
            break;
        }
        case Op::Reshape: {
            auto av = in[0]->data<T>();
            std::copy(av.begin(), av.end(), ov.begin());
            break;
        }
        case Op::ReduceSum: {
            auto av = in[0]->data<T>();
            T acc = 0;
            for (T v : av) acc += v;
            ov[0] = acc;
            break;
        }
        case Op::Mean: {
            auto av = in[0]->data<T>();
            T acc = 0;
            for (T v : av) acc += v;
            ov[0] = acc / static_cast<T>(av.size());
            break;
        }
        case Op::Sigmoid: {
            auto av = in[0]->data<T>();
            for (std::size_t i = 0; i < ov.size(); ++i) ov[i] = T(1) / (T(1) + std::exp(-av[i]));
            break;
        }
        case Op::Relu: {
            auto av = in[0]->data<T>();
            for (std::size_t i = 0; i < ov.size(); ++i) ov[i] = av[i] > T(0) ? av[i] : T(0);
            break;
        }
        case Op::Tanh: {
            auto av = in[0]->data<T>();
            for (std::size_t i = 0; i < ov.size(); ++i) ov[i] = std::tanh(av[i]);
            break;
        }
        case Op::Exp: {
            auto av = in[0]->data<T>();
            for (std::size_t i = 0; i < ov.size(); ++i) ov[i] = std::exp(av[i]);
            break;
        }
        case Op::Log: {
            auto av = in[0]->data<T>();
            for (std::size_t i = 0; i < ov.size(); ++i) ov[i] = std::log(av[i]);
            break;
        }
        case Op::Sqrt: {
            auto av = in[0]->data<T>();
            for (std::size_t i = 0; i < ov.size(); ++i) ov[i] = std::sqrt(av[i]);
            break;
        }
        case Op::Softmax: {
            const Tensor& a = *in[0];
            auto av = a.data<T>();
            int64_t rows, cols;
            slab_dims(a, rows, cols);
            const bool by_row = (a.rank() == 1) || (n.axis == 1);
            const int64_t outer = by_row ? rows : cols;
            const int64_t inner = by_row ? cols : rows;
            for (int64_t o = 0; o < outer; ++o) {
                auto idx = [&](int64_t k) {
                    return static_cast<std::size_t>(by_row ? o * cols + k : k * cols + o);
                };
                T m = av[idx(0)];
                for (int64_t k = 1; k < inner; ++k) m = std::max(m, av[idx(k)]);
                T denom = 0;
                for (int64_t k = 0; k < inner; ++k) {
                    const T e = std::exp(av[idx(k)] - m);
                    ov[idx(k)] = e;
                    denom += e;
                }
                for (int64_t k = 0; k < inner; ++k) ov[idx(k)] /= denom;
            }
            break;
        }
        case Op::LayerNorm: {
            const Tensor& a = *in[0];
            auto av = a.data<T>();
            int64_t rows, cols;
            slab_dims(a, rows, cols);
            const T eps = static_cast<T>(1e-5);
            for (int64_t r = 0; r < rows; ++r) {
                const std::size_t base = static_cast<std::size_t>(r * cols);
                T mu = 0;
                for (int64_t c = 0; c < cols; ++c) mu += av[base + static_cast<std::size_t>(c)];
                mu /= static_cast<T>(cols);
                T var = 0;
                for (int64_t c = 0; c < cols; ++c) {
                    const T d = av[base + static_cast<std::size_t>(c)] - mu;
                    var += d * d;
                }
                var /= static_cast<T>(cols);
                const T inv = T(1) / std::sqrt(var + eps);
                for (int64_t c = 0; c < cols; ++c)
                    ov[base + static_cast<std::size_t>(c)] =
                        (av[base + static_cast<std::size_t>(c)] - mu) * inv;
            }
            break;
        }
        case Op::Leaf:
        case Op::Const:
            throw UnknownName("compute on leaf/const node");
    }
    return out;
}

Tensor compute_node(const Node& n, const std::vector<const Tensor*>& in, Session& s) {
    if (n.op == Op::Leaf) {
        auto it = s.bindings.find(n.name);
        if (it == s.bindings.end()) throw UnboundLeaf(n.name);
        if (it->second.shape() != n.shape)
            throw ShapeMismatch("leaf " + n.name + " bound " + shape_str(it->second.shape()) +
                                ", declared " + shape_str(n.shape));
        Tensor v = it->second.astype(s.dtype);
        if (!v.all_finite()) throw NonFiniteResult("leaf " + n.name);
        return v;
    }
    if (n.op == Op::Const) return n.value.astype(s.dtype);
    Tensor out = s.dtype == DType::F32 ? compute_t<float>(n, in, s.dtype)
                                       : compute_t<double>(n, in, s.dtype);
    if (!out.all_finite()) throw NonFiniteResult(op_name(n.op));
    return out;
}

// Sums a broadcast gradient back down to a one-element operand when needed.
Tensor reduce_to(const Tensor& g, const Shape& target, DType dt) {
    if (g.shape() == target) return g;
    Tensor out(target, dt);
    double acc = 0.0;
    if (dt == DType::F32) {
        float facc = 0.0f;
        for (float v : g.data<float>()) facc += v;
        out.set(0, facc);
        return out;
    }
    for (double v : g.data<double>()) acc += v;
    out.set(0, acc);
    return out;
}

template <typename T>
void vjp_t(const Node& n, const Tensor& ct, const std::vector<const Tensor*>& in,
           const Tensor& out, const std::vector<char>& need, std::vector<Tensor>& grads, DType dt) {
    auto cv = ct.data<T>();
    switch (n.op) {
        case Op::MatMul: {
            const Tensor& a = *in[0];
            const Tensor& b = *in[1];
            CMap<T> A(a.data<T>().data(), a.dim(0), a.dim(1));
            CMap<T> B(b.data<T>().data(), b.dim(0), b.dim(1));
            CMap<T> G(cv.data(), a.dim(0), b.dim(1));
            if (need[0]) {
                grads[0] = Tensor(a.shape(), dt);
                MMap<T> DA(grads[0].data<T>().data(), a.dim(0), a.dim(1));
                DA.noalias() = G * B.transpose();
            }
            if (need[1]) {
                grads[1] = Tensor(b.shape(), dt);
                MMap<T> DB(grads[1].data<T>().data(), b.dim(0), b.dim(1));
                DB.noalias() = A.transpose() * G;
            }
            break;
        }
        case Op::Transpose: {
            const Tensor& a = *in[0];
            grads[0] = Tensor(a.shape(), dt);
            auto gv = grads[0].data<T>();
            const int64_t r = a.dim(0), c = a.dim(1);
            for (int64_t i = 0; i < r; ++i)
                for (int64_t j = 0; j < c; ++j)
                    gv[static_cast<std::size_t>(i * c + j)] = cv[static_cast<std::size_t>(j * r + i)];
            break;
        }
        case Op::Add: {
            if (need[0]) grads[0] = reduce_to(ct, in[0]->shape(), dt);
            if (need[1]) grads[1] = reduce_to(ct, in[1]->shape(), dt);
            break;
        }
        case Op::Sub: {
            if (need[0]) grads[0] = reduce_to(ct, in[0]->shape(), dt);
            if (need[1]) {
                Tensor neg(ct.shape(), dt);
                auto nv = neg.data<T>();
                for (std::size_t i = 0; i < nv.size(); ++i) nv[i] = -cv[i];
                grads[1] = reduce_to(neg, in[1]->shape(), dt);
            }
            break;
        }
        case Op::Mul: {
            const Tensor& a = *in[0];
            const Tensor& b = *in[1];
            auto av = a.data<T>();
            auto bv = b.data<T>();
            auto scaled = [&](std::span<const T> other, bool other_is_scalar) {
                Tensor g(ct.shape(), dt);
                auto gv = g.data<T>();
                if (other_is_scalar) {
                    const T s = other[0];
                    for (std::size_t i = 0; i < gv.size(); ++i) gv[i] = cv[i] * s;
                } else {
                    for (std::size_t i = 0; i < gv.size(); ++i) gv[i] = cv[i] * other[i];
                }
                return g;
            };
            if (need[0]) grads[0] = reduce_to(scaled(bv, b.numel() == 1), a.shape(), dt);
            if (need[1]) grads[1] = reduce_to(scaled(av, a.numel() == 1), b.shape(), dt);
            break;
        }
        case Op::ScalarMul: {
            grads[0] = Tensor(in[0]->shape(), dt);
            auto gv = grads[0].data<T>();
            const T s = static_cast<T>(n.scalar);
            for (std::size_t i = 0; i < gv.size(); ++i) gv[i] = s * cv[i];
            break;
        }
        case Op::Concat: {
            if (n.axis == 0 || n.shape.size() == 1) {
                std::size_t off = 0;
                for (std::size_t k = 0; k < in.size(); ++k) {
                    const std::size_t cnt = static_cast<std::size_t>(in[k]->numel());
                    if (need[k]) {
                        grads[k] = Tensor(in[k]->shape(), dt);
                        auto gv = grads[k].data<T>();
                        std::copy(cv.begin() + static_cast<std::ptrdiff_t>(off),
                                  cv.begin() + static_cast<std::ptrdiff_t>(off + cnt), gv.begin());
                    }
                    off += cnt;
                }
            } else {
                const int64_t rows = n.shape[0], cols = n.shape[1];
                int64_t coff = 0;
                for (std::size_t k = 0; k < in.size(); ++k) {
                    const int64_t tc = in[k]->dim(1);
                    if (need[k]) {
                        grads[k] = Tensor(in[k]->shape(), dt);
                        auto gv = grads[k].data<T>();
                        for (int64_t r = 0; r < rows; ++r)
                            for (int64_t c = 0; c < tc; ++c)
                                gv[static_cast<std::size_t>(r * tc + c)] =
                                    cv[static_cast<std::size_t>(r * cols + coff + c)];
                    }
                    coff += tc;
                }
            }
            break;
        }
        case Op::Slice: {
            const Tensor& a = *in[0];
            grads[0] = Tensor::zeros(a.shape(), dt);
            auto gv = grads[0].data<T>();
            if (a.rank() == 1 || n.axis == 0) {
                const int64_t cols = a.rank() == 2 ? a.dim(1) : 1;
                std::copy(cv.begin(), cv.end(),
                          gv.begin() + static_cast<std::ptrdiff_t>(n.start * cols));
            } else {
                const int64_t rows = a.dim(0), cols = a.dim(1), w = n.stop - n.start;
                for (int64_t r = 0; r < rows; ++r)
                    for (int64_t c = 0; c < w; ++c)
                        gv[static_cast<std::size_t>(r * cols + n.start + c)] =
                            cv[static_cast<std::size_t>(r * w + c)];
            }
            break;
        }
        case Op::Reshape: {
            grads[0] = reshaped(ct, in[0]->shape());
            break;
        }
        case Op::ReduceSum: {
            grads[0] = Tensor::full(in[0]->shape(), ct.at(0), dt);
            break;
        }
        case Op::Mean: {
            grads[0] = Tensor::full(in[0]->shape(), ct.at(0) / static_cast<double>(in[0]->numel()), dt);
            break;
        }
        case Op::Sigmoid: {
            auto yv = out.data<T>();
            grads[0] = Tensor(in[0]->shape(), dt);
            auto gv = grads[0].data<T>();
            for (std::size_t i = 0; i < gv.size(); ++i) gv[i] = cv[i] * yv[i] * (T(1) - yv[i]);
            break;
        }
        case Op::Relu: {
            auto xv = in[0]->data<T>();
            grads[0] = Tensor(in[0]->shape(), dt);
            auto gv = grads[0].data<T>();
            for (std::size_t i = 0; i < gv.size(); ++i) gv[i] = xv[i] > T(0) ? cv[i] : T(0);
            break;
        }
        case Op::Tanh: {
            auto yv = out.data<T>();
            grads[0] = Tensor(in[0]->shape(), dt);
            auto gv = grads[0].data<T>();
            for (std::size_t i = 0; i < gv.size(); ++i) gv[i] = cv[i] * (T(1) - yv[i] * yv[i]);
            break;
        }
        case Op::Exp: {
            auto yv = out.data<T>();
            grads[0] = Tensor(in[0]->shape(), dt);
            auto gv = grads[0].data<T>();
            for (std::size_t i = 0; i < gv.size(); ++i) gv[i] = cv[i] * yv[i];
            break;
        }
        case Op::Log: {
            auto xv = in[0]->data<T>();
            grads[0] = Tensor(in[0]->shape(), dt);
            auto gv = grads[0].data<T>();
            for (std::size_t i = 0; i < gv.size(); ++i) gv[i] = cv[i] / xv[i];
            break;
        }
        case Op::Sqrt: {
            auto yv = out.data<T>();
            grads[0] = Tensor(in[0]->shape(), dt);
            auto gv = grads[0].data<T>();
            for (std::size_t i = 0; i < gv.size(); ++i) gv[i] = cv[i] / (T(2) * yv[i]);
            break;
        }
        case Op::Softmax: {
            const Tensor& a = *in[0];
            auto yv = out.data<T>();
            grads[0] = Tensor(a.shape(), dt);
            auto gv = grads[0].data<T>();
            int64_t rows, cols;
            slab_dims(a, rows, cols);
            const bool by_row = (a.rank() == 1) || (n.axis == 1);
            const int64_t outer = by_row ? rows : cols;
            const int64_t inner = by_row ? cols : rows;
            for (int64_t o = 0; o < outer; ++o) {
                auto idx = [&](int64_t k) {
                    return static_cast<std::size_t>(by_row ? o * cols + k : k * cols + o);
                };
                T dot = 0;
                for (int64_t k = 0; k < inner; ++k) dot += cv[idx(k)] * yv[idx(k)];
                for (int64_t k = 0; k < inner; ++k) gv[idx(k)] = (cv[idx(k)] - dot) * yv[idx(k)];
            }
            break;
        }
        case Op::LayerNorm: {
            const Tensor& a = *in[0];
            auto xv = a.data<T>();
            auto yv = out.data<T>();
            grads[0] = Tensor(a.shape(), dt);
            auto gv = grads[0].data<T>();
            int64_t rows, cols;
            slab_dims(a, rows, cols);
            const T eps = static_cast<T>(1e-5);
            for (int64_t r = 0; r < rows; ++r) {
                const std::size_t base = static_cast<std::size_t>(r * cols);
                T mu = 0;
                for (int64_t c = 0; c < cols; ++c) mu += xv[base + static_cast<std::size_t>(c)];
                mu /= static_cast<T>(cols);
                T var = 0;
                for (int64_t c = 0; c < cols; ++c) {
                    const T d = xv[base + static_cast<std::size_t>(c)] - mu;
                    var += d * d;
                }
                var /= static_cast<T>(cols);
                const T inv = T(1) / std::sqrt(var + eps);
                T mdy = 0, mdyy = 0;
                for (int64_t c = 0; c < cols; ++c) {
                    const std::size_t i = base + static_cast<std::size_t>(c);
                    mdy += cv[i];
                    mdyy += cv[i] * yv[i];
                }
                mdy /= static_cast<T>(cols);
                mdyy /= static_cast<T>(cols);
                for (int64_t c = 0; c < cols; ++c) {
                    const std::size_t i = base + static_cast<std::size_t>(c);
                    gv[i] = inv * (cv[i] - mdy - yv[i] * mdyy);
                }
            }
            break;
        }
        case Op::Leaf:
        case Op::Const:
            break;
    }
}

void accumulate(Tensor& into, const Tensor& g, DType dt) {
    if (dt == DType::F32) {
        auto a = into.data<float>();
        auto b = g.data<float>();
        for (std::size_t i = 0; i < a.size(); ++i) a[i] += b[i];
    } else {
        auto a = into.data<double>();
        auto b = g.data<double>();
        for (std::size_t i = 0; i < a.size(); ++i) a[i] += b[i];
    }
}

std::vector<const Node*> topo_order(const Expr& root) {
    std::vector<const Node*> order;
    std::unordered_set<const Node*> done;
    struct Frame {
        const Node* n;
        std::size_t next;
    };
    std::vector<Frame> stack{{root.get(), 0}};
    while (!stack.empty()) {
        Frame& f = stack.back();
        if (done.count(f.n)) {
            stack.pop_back();
            continue;
        }
        if (f.next < f.n->inputs.size()) {
            const Node* c = f.n->inputs[f.next++].get();
            if (!done.count(c)) stack.push_back({c, 0});
            continue;
        }
        done.insert(f.n);
        order.push_back(f.n);
        stack.pop_back();
    }
    return order;
}

}  // namespace

Tensor eval(const Expr& root, Session& s) {
    struct Frame {
        const Node* n;
        std::size_t next;
    };
    std::vector<Frame> stack{{root.get(), 0}};
    while (!stack.empty()) {
        Frame& f = stack.back();
        if (s.cache.count(f.n->id)) {
            stack.pop_back();
            continue;
        }
        if (f.next < f.n->inputs.size()) {
            const Node* c = f.n->inputs[f.next++].get();
            if (!s.cache.count(c->id)) stack.push_back({c, 0});
            continue;
        }
        std::vector<const Tensor*> in;
        in.reserve(f.n->inputs.size());
        for (auto& c : f.n->inputs) in.push_back(&s.cache.at(c->id));
        s.cache.emplace(f.n->id, compute_node(*f.n, in, s));
        stack.pop_back();
    }
    return s.cache.at(root->id);
}

double eval_scalar(const Expr& e, Session& s) {
    Tensor t = eval(e, s);
    if (t.numel() != 1) throw ShapeMismatch("expected scalar, got " + shape_str(t.shape()));
    return t.at(0);
}

std::map<std::string, Tensor> grad(const Expr& root, Session& s,
                                   const std::vector<std::string>& wanted) {
    if (shape_numel(root->shape) != 1)
        throw ShapeMismatch("grad root must be scalar, got " + shape_str(root->shape));
    return grad(root, s, wanted, Tensor::full(root->shape, 1.0, s.dtype));
}

std::map<std::string, Tensor> grad(const Expr& root, Session& s,
                                   const std::vector<std::string>& wanted, const Tensor& seed) {
    if (seed.shape() != root->shape)
        throw ShapeMismatch("grad seed " + shape_str(seed.shape()) + " vs root " +
                            shape_str(root->shape));
    eval(root, s);

    const std::vector<const Node*> order = topo_order(root);
    const std::set<std::string> wantset(wanted.begin(), wanted.end());

    std::unordered_map<const Node*, char> needed;
    needed.reserve(order.size());
    for (const Node* n : order) {
        char need = (n->op == Op::Leaf && wantset.count(n->name)) ? 1 : 0;
        for (const auto& c : n->inputs) need = need || needed[c.get()];
        needed[n] = need;
    }

    std::unordered_map<const Node*, Tensor> ct;
    if (needed[root.get()]) {
        ct.emplace(root.get(), seed.astype(s.dtype));
        for (auto it = order.rbegin(); it != order.rend(); ++it) {
            const Node* n = *it;
            if (!needed[n] || n->op == Op::Leaf || n->op == Op::Const) continue;
            auto cit = ct.find(n);
            if (cit == ct.end()) continue;
            std::vector<const Tensor*> in;
            in.reserve(n->inputs.size());
            std::vector<char> need_in;
            need_in.reserve(n->inputs.size());
            bool any = false;
            for (const auto& c : n->inputs) {
                in.push_back(&s.cache.at(c->id));
                const char nc = needed[c.get()];
                need_in.push_back(nc);
                any = any || nc;
            }
            if (any) {
                std::vector<Tensor> grads(n->inputs.size());
                const Tensor& out = s.cache.at(n->id);
                if (s.dtype == DType::F32)
                    vjp_t<float>(*n, cit->second, in, out, need_in, grads, s.dtype);
                else
                    vjp_t<double>(*n, cit->second, in, out, need_in, grads, s.dtype);
                for (std::size_t k = 0; k < grads.size(); ++k) {
                    if (!need_in[k] || grads[k].empty()) continue;
                    const Node* child = n->inputs[k].get();
                    auto [gt, inserted] = ct.try_emplace(child, std::move(grads[k]));
                    if (!inserted) accumulate(gt->second, grads[k], s.dtype);
                }
            }
            ct.erase(cit);
        }
    }

    std::map<std::string, Tensor> result;
    for (const Node* n : order) {
        if (n->op != Op::Leaf || !wantset.count(n->name)) continue;
        auto cit = ct.find(n);
        if (cit == ct.end()) continue;
        auto rit = result.find(n->name);
        if (rit == result.end())
            result.emplace(n->name, cit->second);
        else
            accumulate(rit->second, cit->second, s.dtype);
    }
    for (const std::string& name : wanted) {
        if (result.count(name)) continue;
        auto bit = s.bindings.find(name);
        if (bit == s.bindings.end()) throw UnknownName(name);
        result.emplace(name, Tensor::zeros(bit->second.shape(), s.dtype));
    }
    return result;
}

FDReport finite_diff_check(const Expr& root, Session& s,
                           const std::vector<std::string>& wanted, double eps,
                           int64_t max_per_leaf) {
    const auto analytic = grad(root, s, wanted);
    FDReport rep;
    for (const std::string& name : wanted) {
        auto bit = s.bindings.find(name);
        if (bit == s.bindings.end()) throw UnknownName(name);
        Tensor& base = bit->second;
        const Tensor& ga = analytic.at(name);
        const int64_t n = base.numel();
        int64_t count = n, step = 1;
        if (max_per_leaf > 0 && n > max_per_leaf) {
            count = max_per_leaf;
            step = n / max_per_leaf;
        }
        for (int64_t k = 0; k < count; ++k) {
            const int64_t idx = k * step;
            const double orig = base.at(idx);
            base.set(idx, orig + eps);
            s.invalidate();
            const double fp = eval_scalar(root, s);
            base.set(idx, orig - eps);
            s.invalidate();
            const double fm = eval_scalar(root, s);
            base.set(idx, orig);
            const double num = (fp - fm) / (2.0 * eps);
            const double ana = ga.at(idx);
            const double rel =
                std::fabs(ana - num) / std::max({std::fabs(ana), std::fabs(num), 1e-8});
            ++rep.checked;
            if (rel > rep.max_rel_err) {
                rep.max_rel_err = rel;
                rep.worst_name = name;
                rep.worst_index = idx;
                rep.analytic = ana;
                rep.numeric = num;
            }
        }
    }
    s.invalidate();
    return rep;
}

}  // namespace hnf
