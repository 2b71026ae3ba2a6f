#pragma once

#include <array>
#include <string>
#include <vector>

#include "hnf/expr.hpp"
#include "hnf/tensor.hpp"

namespace hnf {

/// Symbolic dz/dt over the state leaf, the time leaf, and named parameters.
/// The expression is shape-specialized to a fixed token count.
struct Dynamics {
    Expr f;
    std::string z_name = "__ode_z";
    std::string t_name = "__ode_t";
    int64_t rows = 0;
    int64_t d = 0;
    std::vector<std::string> param_names;
};

/// Transformer-encoder derivative: time-conditioned input, then `depth`
/// blocks of affine layer norm, multi-head self-attention, layer norm,
/// feed-forward. No residual paths, so all-zero parameters give a zero
/// derivative.
Dynamics make_dynamics(const std::string& prefix, int64_t rows, int64_t d, int64_t heads,
                       int64_t ffn_hidden, int64_t depth = 1);

/// Registers freshly initialized parameters for make_dynamics under prefix.
void init_dynamics_params(ParamSet& ps, const std::string& prefix, int64_t d, int64_t heads,
                          int64_t ffn_hidden, uint64_t seed, int64_t depth = 1,
                          DType dtype = DType::F32);

/// Discrete RK4 solve as one expression graph (exact gradients via grad()).
struct OdeUnroll {
    Expr z1;
    std::vector<Expr> grid;  // steps+1 entries, grid[0] == z0
};
OdeUnroll rk4_unroll(const Dynamics& dyn, Expr z0, double t0, double t1, int64_t steps);

struct ODETrajectory {
    double t0 = 0.0;
    double t1 = 1.0;
    int64_t steps = 0;
    std::vector<double> ts;
    std::vector<Tensor> grid;
    std::array<double, 3> cheb_ts{};
    std::vector<Tensor> cheb_states;
};

/// Numeric fixed-grid RK4 solve; fills the Chebyshev-node snapshots from the
/// grid (bit-exact on grid hits, barycentric over the grid otherwise).
ODETrajectory rk4_integrate(const Dynamics& dyn, Session& s, const Tensor& z0, double t0,
                            double t1, int64_t steps);

/// Second-kind barycentric formula with true weights 1/prod(t_j - t_i); on
/// the 3-node Chebyshev grid of [0,1] these are proportional to (1,-2,1).
Tensor barycentric_eval(const std::vector<double>& node_ts, const std::vector<Tensor>& node_vals,
                        double t);

/// The 3 second-kind Chebyshev points of [t0,t1], ascending.
std::array<double, 3> chebyshev_nodes3(double t0, double t1);

enum class AdjointMode { cached, irdm };

struct AdjointResult {
    ParamSet dtheta;
    Tensor dz0;
};

/// cached: discrete adjoint replaying the stored grid stage-by-stage (matches
/// backprop through the unrolled solver to roundoff). irdm: continuous
/// adjoint ODE integrated backward, with z(t) reconstructed by barycentric
/// interpolation from the 3 Chebyshev-node snapshots.
AdjointResult adjoint_backward(const ODETrajectory& traj, const Dynamics& dyn, Session& s,
                               const Tensor& dL_dz1, AdjointMode mode);

/// Forward ODE on the tokens, backward ODE on the token-reversed sequence
/// (cls row 0 fixed), then g = sigmoid(zf*fp + zb*fpp) and
/// h = sigmoid(g*zf + (1-g)*zb), elementwise per token.
Expr bidirectional_encode(Expr tokens, const Dynamics& fwd, const Dynamics& bwd, Expr gate_fp,
                          Expr gate_fpp, int64_t steps);

}  // namespace hnf
