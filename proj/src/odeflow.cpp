#include "hnf/odeflow.hpp"

#include <cmath>

#include "hnf/errors.hpp"
#include "hnf/rng.hpp"

namespace hnf {

namespace {

Expr ln_affine(Expr x, Expr g, Expr b) {
    const int64_t rows = x->shape[0];
    Expr y = layer_norm(std::move(x));
    y = mul(std::move(y), broadcast_rows(std::move(g), rows));
    return add(std::move(y), broadcast_rows(std::move(b), rows));
}

}  // namespace

namespace {

std::string block_prefix(const std::string& prefix, int64_t depth, int64_t b) {
    return depth == 1 ? prefix : prefix + "blk" + std::to_string(b) + ".";
}

}  // namespace

Dynamics make_dynamics(const std::string& prefix, int64_t rows, int64_t d, int64_t heads,
                       int64_t ffn_hidden, int64_t depth) {
    if (heads < 1 || d % heads != 0)
        throw ShapeMismatch("heads=" + std::to_string(heads) + " must divide d=" + std::to_string(d));
    if (depth < 1) throw ShapeMismatch("depth must be >= 1");
    const int64_t dh = d / heads;
    Dynamics dyn;
    dyn.rows = rows;
    dyn.d = d;

    Expr z = leaf(dyn.z_name, {rows, d});
    Expr t = leaf(dyn.t_name, {1});
    auto param = [&](const std::string& name, Shape shape) {
        dyn.param_names.push_back(name);
        return leaf(name, std::move(shape));
    };

    Expr x = add(z, broadcast_rows(mul(t, reshape(param(prefix + "time", {d}), {1, d})), rows));
    const double inv_sqrt_dh = 1.0 / std::sqrt(static_cast<double>(dh));
    for (int64_t b = 0; b < depth; ++b) {
        const std::string bp = block_prefix(prefix, depth, b);
        Expr ln1 = ln_affine(std::move(x), param(bp + "ln1.g", {d}), param(bp + "ln1.b", {d}));

        std::vector<Expr> head_outs;
        head_outs.reserve(static_cast<std::size_t>(heads));
        for (int64_t h = 0; h < heads; ++h) {
            const std::string hp = bp + "heads." + std::to_string(h) + ".";
            Expr q = matmul(ln1, param(hp + "wq", {d, dh}));
            Expr k = matmul(ln1, param(hp + "wk", {d, dh}));
            Expr v = matmul(ln1, param(hp + "wv", {d, dh}));
            Expr attn =
                softmax(scalar_mul(inv_sqrt_dh, matmul(std::move(q), transpose(std::move(k)))), 1);
            head_outs.push_back(matmul(std::move(attn), std::move(v)));
        }
        Expr mha = heads == 1 ? std::move(head_outs[0]) : concat(std::move(head_outs), 1);
        Expr attn_out = matmul(std::move(mha), param(bp + "wo", {d, d}));

        Expr m = ln_affine(std::move(attn_out), param(bp + "ln2.g", {d}), param(bp + "ln2.b", {d}));
        Expr hdn = relu(affine_rows(std::move(m), param(bp + "ffn.w1", {d, ffn_hidden}),
                                    param(bp + "ffn.b1", {ffn_hidden})));
        x = affine_rows(std::move(hdn), param(bp + "ffn.w2", {ffn_hidden, d}),
                        param(bp + "ffn.b2", {d}));
    }
    dyn.f = std::move(x);
    return dyn;
}

void init_dynamics_params(ParamSet& ps, const std::string& prefix, int64_t d, int64_t heads,
                          int64_t ffn_hidden, uint64_t seed, int64_t depth, DType dtype) {
    const int64_t dh = d / heads;
    auto mat = [&](const std::string& name, Shape shape) {
        ps[name] = xavier_uniform(std::move(shape), seed, name, dtype);
    };
    auto fill = [&](const std::string& name, Shape shape, double v) {
        ps[name] = Tensor::full(std::move(shape), v, dtype);
    };
    fill(prefix + "time", {d}, 0.0);
    for (int64_t b = 0; b < depth; ++b) {
        const std::string bp = block_prefix(prefix, depth, b);
        fill(bp + "ln1.g", {d}, 1.0);
        fill(bp + "ln1.b", {d}, 0.0);
        for (int64_t h = 0; h < heads; ++h) {
            const std::string hp = bp + "heads." + std::to_string(h) + ".";
            mat(hp + "wq", {d, dh});
            mat(hp + "wk", {d, dh});
            mat(hp + "wv", {d, dh});
        }
        mat(bp + "wo", {d, d});
        fill(bp + "ln2.g", {d}, 1.0);
        fill(bp + "ln2.b", {d}, 0.0);
        mat(bp + "ffn.w1", {d, ffn_hidden});
        fill(bp + "ffn.b1", {ffn_hidden}, 0.0);
        mat(bp + "ffn.w2", {ffn_hidden, d});
        fill(bp + "ffn.b2", {d}, 0.0);
    }
}

namespace {

Expr dyn_at(const Dynamics& dyn, Expr z, double t) {
    return substitute(dyn.f, {{dyn.z_name, std::move(z)}, {dyn.t_name, constant_scalar(t)}});
}

}  // namespace

OdeUnroll rk4_unroll(const Dynamics& dyn, Expr z0, double t0, double t1, int64_t steps) {
    if (steps < 1 || t1 <= t0) throw ShapeMismatch("rk4 needs steps >= 1 and t1 > t0");
    const double h = (t1 - t0) / static_cast<double>(steps);
    OdeUnroll out;
    out.grid.reserve(static_cast<std::size_t>(steps) + 1);
    out.grid.push_back(z0);
    Expr z = std::move(z0);
    for (int64_t n = 0; n < steps; ++n) {
        const double t = t0 + h * static_cast<double>(n);
        Expr k1 = dyn_at(dyn, z, t);
        Expr k2 = dyn_at(dyn, add(z, scalar_mul(h / 2.0, k1)), t + h / 2.0);
        Expr k3 = dyn_at(dyn, add(z, scalar_mul(h / 2.0, k2)), t + h / 2.0);
        Expr k4 = dyn_at(dyn, add(z, scalar_mul(h, k3)), t + h);
        Expr incr = add(add(std::move(k1), scalar_mul(2.0, std::move(k2))),
                        add(scalar_mul(2.0, std::move(k3)), std::move(k4)));
        z = add(std::move(z), scalar_mul(h / 6.0, std::move(incr)));
        out.grid.push_back(z);
    }
    out.z1 = z;
    return out;
}

namespace {

Tensor axpy(const Tensor& x, double a, const Tensor& y) {  // x + a*y
    Tensor out = x;
    for (int64_t i = 0; i < out.numel(); ++i) out.set(i, out.at(i) + a * y.at(i));
    return out;
}

Tensor eval_dynamics(const Dynamics& dyn, Session& s, const Tensor& z, double t) {
    s.bind(dyn.z_name, z);
    s.bind(dyn.t_name, Tensor::scalar(t, s.dtype));
    try {
        return eval(dyn.f, s);
    } catch (const NonFiniteResult& e) {
        throw NonFiniteState(e.what());
    }
}

}  // namespace

std::array<double, 3> chebyshev_nodes3(double t0, double t1) {
    // Second kind on [-1,1]: cos(pi*j/2) for j=2,1,0 -> {-1,0,1}.
    return {t0, (t0 + t1) / 2.0, t1};
}

ODETrajectory rk4_integrate(const Dynamics& dyn, Session& s, const Tensor& z0, double t0,
                            double t1, int64_t steps) {
    if (steps < 1 || t1 <= t0) throw ShapeMismatch("rk4 needs steps >= 1 and t1 > t0");
    ODETrajectory traj;
    traj.t0 = t0;
    traj.t1 = t1;
    traj.steps = steps;
    const double h = (t1 - t0) / static_cast<double>(steps);
    Tensor z = z0.astype(s.dtype);
    traj.ts.push_back(t0);
    traj.grid.push_back(z);
    for (int64_t n = 0; n < steps; ++n) {
        const double t = t0 + h * static_cast<double>(n);
        Tensor k1 = eval_dynamics(dyn, s, z, t);
        Tensor k2 = eval_dynamics(dyn, s, axpy(z, h / 2.0, k1), t + h / 2.0);
        Tensor k3 = eval_dynamics(dyn, s, axpy(z, h / 2.0, k2), t + h / 2.0);
        Tensor k4 = eval_dynamics(dyn, s, axpy(z, h, k3), t + h);
        Tensor incr = axpy(axpy(k1, 2.0, k2), 1.0, axpy(k4, 2.0, k3));
        z = axpy(z, h / 6.0, incr);
        if (!z.all_finite()) throw NonFiniteState("step " + std::to_string(n));
        traj.ts.push_back(t0 + h * static_cast<double>(n + 1));
        traj.grid.push_back(z);
    }

    traj.cheb_ts = chebyshev_nodes3(t0, t1);
    for (double tc : traj.cheb_ts) {
        bool hit = false;
        for (std::size_t j = 0; j < traj.ts.size(); ++j)
            if (traj.ts[j] == tc) {
                traj.cheb_states.push_back(traj.grid[j]);
                hit = true;
                break;
            }
        if (!hit) traj.cheb_states.push_back(barycentric_eval(traj.ts, traj.grid, tc));
    }
    return traj;
}

Tensor barycentric_eval(const std::vector<double>& node_ts, const std::vector<Tensor>& node_vals,
                        double t) {
    const std::size_t m = node_ts.size();
    if (m == 0 || node_vals.size() != m) throw DegenerateNodes("empty node set");
    for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = i + 1; j < m; ++j)
            if (node_ts[i] == node_ts[j]) throw DegenerateNodes("t=" + std::to_string(node_ts[i]));
    for (std::size_t j = 0; j < m; ++j)
        if (t == node_ts[j]) return node_vals[j];

    std::vector<double> w(m, 1.0);
    for (std::size_t j = 0; j < m; ++j)
        for (std::size_t i = 0; i < m; ++i)
            if (i != j) w[j] /= (node_ts[j] - node_ts[i]);

    double denom = 0.0;
    std::vector<double> coef(m);
    for (std::size_t j = 0; j < m; ++j) {
        coef[j] = w[j] / (t - node_ts[j]);
        denom += coef[j];
    }
    Tensor out = Tensor::zeros(node_vals[0].shape(), node_vals[0].dtype());
    for (std::size_t j = 0; j < m; ++j) {
        const double c = coef[j] / denom;
        for (int64_t i = 0; i < out.numel(); ++i)
            out.set(i, out.at(i) + c * node_vals[j].at(i));
    }
    return out;
}

namespace {

void accumulate_scaled(ParamSet& into, const std::map<std::string, Tensor>& from, double scale) {
    for (const auto& [name, g] : from) {
        auto it = into.find(name);
        if (it == into.end()) {
            Tensor t = Tensor::zeros(g.shape(), g.dtype());
            for (int64_t i = 0; i < t.numel(); ++i) t.set(i, scale * g.at(i));
            into.emplace(name, std::move(t));
        } else {
            for (int64_t i = 0; i < g.numel(); ++i)
                it->second.set(i, it->second.at(i) + scale * g.at(i));
        }
    }
}

// One VJP of the dynamics at (z, t) with the given seed: returns the pullback
// on z plus parameter cotangents.
std::pair<Tensor, std::map<std::string, Tensor>> dyn_vjp(const Dynamics& dyn, Session& s,
                                                         const Tensor& z, double t,
                                                         const Tensor& seed) {
    s.bind(dyn.z_name, z);
    s.bind(dyn.t_name, Tensor::scalar(t, s.dtype));
    std::vector<std::string> wanted = dyn.param_names;
    wanted.push_back(dyn.z_name);
    auto g = grad(dyn.f, s, wanted, seed);
    Tensor dz = g.at(dyn.z_name);
    g.erase(dyn.z_name);
    return {std::move(dz), std::move(g)};
}

Tensor scaled(const Tensor& x, double a) {
    Tensor out = x;
    for (int64_t i = 0; i < out.numel(); ++i) out.set(i, a * out.at(i));
    return out;
}

}  // namespace

AdjointResult adjoint_backward(const ODETrajectory& traj, const Dynamics& dyn, Session& s,
                               const Tensor& dL_dz1, AdjointMode mode) {
    if (traj.grid.size() != static_cast<std::size_t>(traj.steps) + 1 || traj.steps < 1)
        throw TrajectoryMismatch("grid size " + std::to_string(traj.grid.size()));
    if (traj.grid[0].shape() != Shape{dyn.rows, dyn.d})
        throw TrajectoryMismatch("state " + shape_str(traj.grid[0].shape()) + " vs dynamics (" +
                                 std::to_string(dyn.rows) + "," + std::to_string(dyn.d) + ")");
    if (dL_dz1.shape() != traj.grid[0].shape())
        throw TrajectoryMismatch("seed " + shape_str(dL_dz1.shape()));

    const double h = (traj.t1 - traj.t0) / static_cast<double>(traj.steps);
    AdjointResult res;
    Tensor a = dL_dz1.astype(s.dtype);

    if (mode == AdjointMode::cached) {
        for (int64_t n = traj.steps - 1; n >= 0; --n) {
            const Tensor& zn = traj.grid[static_cast<std::size_t>(n)];
            const double t = traj.ts[static_cast<std::size_t>(n)];
            Tensor k1 = eval_dynamics(dyn, s, zn, t);
            Tensor z2 = axpy(zn, h / 2.0, k1);
            Tensor k2 = eval_dynamics(dyn, s, z2, t + h / 2.0);
            Tensor z3 = axpy(zn, h / 2.0, k2);
            Tensor k3 = eval_dynamics(dyn, s, z3, t + h / 2.0);
            Tensor z4 = axpy(zn, h, k3);

            Tensor s4 = scaled(a, h / 6.0);
            auto [dz4, dth4] = dyn_vjp(dyn, s, z4, t + h, s4);
            Tensor s3 = axpy(scaled(a, h / 3.0), h, dz4);
            auto [dz3, dth3] = dyn_vjp(dyn, s, z3, t + h / 2.0, s3);
            Tensor s2 = axpy(scaled(a, h / 3.0), h / 2.0, dz3);
            auto [dz2, dth2] = dyn_vjp(dyn, s, z2, t + h / 2.0, s2);
            Tensor s1 = axpy(scaled(a, h / 6.0), h / 2.0, dz2);
            auto [dz1, dth1] = dyn_vjp(dyn, s, zn, t, s1);

            a = axpy(axpy(axpy(axpy(a, 1.0, dz1), 1.0, dz2), 1.0, dz3), 1.0, dz4);
            accumulate_scaled(res.dtheta, dth1, 1.0);
            accumulate_scaled(res.dtheta, dth2, 1.0);
            accumulate_scaled(res.dtheta, dth3, 1.0);
            accumulate_scaled(res.dtheta, dth4, 1.0);
        }
    } else {
        // Continuous adjoint da/dt = -J^T a integrated from t1 to t0 with the
        // parameter quadrature dq/dt = -a^T df/dtheta; states come from the
        // 3-snapshot interpolation.
        const std::vector<double> cts(traj.cheb_ts.begin(), traj.cheb_ts.end());
        auto z_of = [&](double t) { return barycentric_eval(cts, traj.cheb_states, t); };
        auto rhs = [&](double t, const Tensor& at) {
            auto [dz, dth] = dyn_vjp(dyn, s, z_of(t), t, at);
            for (int64_t i = 0; i < dz.numel(); ++i) dz.set(i, -dz.at(i));
            return std::make_pair(std::move(dz), std::move(dth));
        };
        const double k = -h;
        for (int64_t n = traj.steps; n >= 1; --n) {
            const double t = traj.ts[static_cast<std::size_t>(n)];
            auto [k1, q1] = rhs(t, a);
            auto [k2, q2] = rhs(t + k / 2.0, axpy(a, k / 2.0, k1));
            auto [k3, q3] = rhs(t + k / 2.0, axpy(a, k / 2.0, k2));
            auto [k4, q4] = rhs(t + k, axpy(a, k, k3));
            Tensor incr = axpy(axpy(k1, 2.0, k2), 1.0, axpy(k4, 2.0, k3));
            a = axpy(a, k / 6.0, incr);
            // dq/dt = -a^T df/dtheta, so each stage contributes -k/6 * weight.
            accumulate_scaled(res.dtheta, q1, -k / 6.0);
            accumulate_scaled(res.dtheta, q2, -k / 3.0);
            accumulate_scaled(res.dtheta, q3, -k / 3.0);
            accumulate_scaled(res.dtheta, q4, -k / 6.0);
        }
    }

    for (const std::string& name : dyn.param_names)
        if (!res.dtheta.count(name)) {
            const Tensor& p = param_ref(s.bindings, name);
            res.dtheta.emplace(name, Tensor::zeros(p.shape(), s.dtype));
        }
    res.dz0 = std::move(a);
    return res;
}

Expr bidirectional_encode(Expr tokens, const Dynamics& fwd, const Dynamics& bwd, Expr gate_fp,
                          Expr gate_fpp, int64_t steps) {
    if (tokens->shape != Shape{fwd.rows, fwd.d} || tokens->shape != Shape{bwd.rows, bwd.d})
        throw ShapeMismatch("tokens " + shape_str(tokens->shape) + " vs dynamics state");
    Expr zf = rk4_unroll(fwd, tokens, 0.0, 1.0, steps).z1;
    Expr rev = reverse_rows(tokens, 1);
    Expr zb_rev = rk4_unroll(bwd, std::move(rev), 0.0, 1.0, steps).z1;
    Expr zb = reverse_rows(std::move(zb_rev), 1);
    Expr g = sigmoid(add(matmul(zf, std::move(gate_fp)), matmul(zb, std::move(gate_fpp))));
    Expr one_minus_g = sub(constant_scalar(1.0), g);
    return sigmoid(add(mul(std::move(g), std::move(zf)), mul(std::move(one_minus_g), std::move(zb))));
}

}  // namespace hnf
