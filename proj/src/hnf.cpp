#include "hnf/hnf.hpp"

#include "hnf/errors.hpp"
#include "hnf/odeflow.hpp"
#include "hnf/rng.hpp"
#include "hnf/visiongraph.hpp"

namespace hnf {

std::string hnf_layer_prefix(int64_t layer) {
    return "layers." + std::to_string(layer) + ".";
}

void init_hnf_params(ParamSet& ps, const HnfConfig& cfg, uint64_t seed, DType dtype) {
    const int64_t d = cfg.d;
    for (std::size_t li = 0; li < cfg.layers.size(); ++li) {
        const HnfLayerSpec& spec = cfg.layers[li];
        const std::string pre = hnf_layer_prefix(static_cast<int64_t>(li));
        const int64_t n = (cfg.image_hw / spec.patch) * (cfg.image_hw / spec.patch);
        const int64_t pdim = spec.patch * spec.patch * cfg.channels;

        auto mat = [&](const std::string& name, Shape shape) {
            ps[name] = xavier_uniform(std::move(shape), seed, name, dtype);
        };
        mat(pre + "patch.w_e", {pdim, d});
        mat(pre + "patch.e_pos", {n, d});
        ps[pre + "patch.cls"] = Tensor::zeros({d}, dtype);
        if (li > 0) mat(pre + "inject.w_in", {d, d});
        init_dynamics_params(ps, pre + "seq.fwd.", d, cfg.heads, cfg.ffn_hidden, seed,
                             cfg.ode_depth, dtype);
        if (!cfg.tie_directions)
            init_dynamics_params(ps, pre + "seq.bwd.", d, cfg.heads, cfg.ffn_hidden, seed,
                                 cfg.ode_depth, dtype);
        mat(pre + "seq.gate.fp", {d, d});
        mat(pre + "seq.gate.fpp", {d, d});
        ps[pre + "graph.vn"] = Tensor::zeros({d}, dtype);
        for (int64_t kc = 0; kc < cfg.cheb_k; ++kc)
            mat(pre + "graph.cheb.t" + std::to_string(kc), {d, d});
        mat(pre + "moe.w_g", {2 * d, 2});
    }
}

MoeOut moe_gate(Expr h_cls, Expr h_vn, Expr w_g) {
    if (h_cls->shape.size() != 2 || h_cls->shape[0] != 1 || h_cls->shape != h_vn->shape)
        throw ShapeMismatch("moe_gate expects two {1,d} embeddings, got " +
                            shape_str(h_cls->shape) + " and " + shape_str(h_vn->shape));
    const int64_t d = h_cls->shape[1];
    if (w_g->shape != Shape{2 * d, 2})
        throw ShapeMismatch("gate weights " + shape_str(w_g->shape) + " vs expected (" +
                            std::to_string(2 * d) + ",2)");
    MoeOut out;
    Expr pair = concat({h_cls, h_vn}, 1);
    out.weights = softmax(matmul(std::move(pair), std::move(w_g)), 1);
    Expr w0 = slice(out.weights, 1, 0, 1);
    Expr w1 = slice(out.weights, 1, 1, 2);
    out.fused = add(mul(std::move(w0), std::move(h_cls)), mul(std::move(w1), std::move(h_vn)));
    return out;
}

HnfLayerOut hnf_layer_forward(const Tensor& img, const HnfConfig& cfg, int64_t layer,
                              Expr prev_fused, Session& s) {
    const std::string pre = hnf_layer_prefix(layer);
    const HnfLayerSpec& spec = cfg.layers.at(static_cast<std::size_t>(layer));
    const int64_t d = cfg.d;

    Tensor patch_rows = tokenize_patches(img, spec.patch);
    const int64_t n = patch_rows.dim(0);
    ScaleParams sp{leaf(pre + "patch.w_e", {patch_rows.dim(1), d}),
                   leaf(pre + "patch.e_pos", {n, d}), leaf(pre + "patch.cls", {d})};
    PatchSequence seq =
        embed_patches(constant(std::move(patch_rows)), sp, static_cast<int>(layer), spec.patch);

    Expr tokens = seq.tokens;
    Expr inject;
    if (prev_fused) {
        inject = matmul(std::move(prev_fused), leaf(pre + "inject.w_in", {d, d}));
        Expr cls_row = add(slice(tokens, 0, 0, 1), inject);
        tokens = concat({std::move(cls_row), slice(tokens, 0, 1, n + 1)}, 0);
    }

    Dynamics fwd = make_dynamics(pre + "seq.fwd.", n + 1, d, cfg.heads, cfg.ffn_hidden,
                                 cfg.ode_depth);
    Dynamics bwd = cfg.tie_directions
                       ? fwd
                       : make_dynamics(pre + "seq.bwd.", n + 1, d, cfg.heads, cfg.ffn_hidden,
                                       cfg.ode_depth);
    Expr encoded = bidirectional_encode(tokens, fwd, bwd, leaf(pre + "seq.gate.fp", {d, d}),
                                        leaf(pre + "seq.gate.fpp", {d, d}), cfg.ode_steps);

    HnfLayerOut out;
    out.n = n;
    out.h_cls = slice(encoded, 0, 0, 1);

    Expr X = slice(tokens, 0, 1, n + 1);
    Tensor adjacency = build_knn_graph(eval(X, s), spec.k);
    Expr vn = reshape(leaf(pre + "graph.vn", {d}), {1, d});
    if (inject) vn = add(std::move(vn), inject);
    VisionGraph graph = augment_virtual_node(adjacency, std::move(X), std::move(vn), spec.k);

    std::vector<Expr> bank;
    bank.reserve(static_cast<std::size_t>(cfg.cheb_k));
    for (int64_t kc = 0; kc < cfg.cheb_k; ++kc)
        bank.push_back(leaf(pre + "graph.cheb.t" + std::to_string(kc), {d, d}));
    Expr embedded = cheb_conv(graph, bank);
    out.h_vn = slice(std::move(embedded), 0, n, n + 1);

    MoeOut moe = moe_gate(out.h_cls, out.h_vn, leaf(pre + "moe.w_g", {2 * d, 2}));
    out.weights = std::move(moe.weights);
    out.fused = std::move(moe.fused);
    return out;
}

HnfOut hnf_forward(const Micrograph& img, const HnfConfig& cfg, Session& s) {
    if (cfg.layers.empty()) throw ShapeMismatch("no fusion layers configured");
    Tensor pre = preprocess_image(img, cfg.image_hw);
    HnfOut out;
    Expr fused;
    for (std::size_t li = 0; li < cfg.layers.size(); ++li) {
        HnfLayerOut lo = hnf_layer_forward(pre, cfg, static_cast<int64_t>(li), fused, s);
        fused = lo.fused;
        out.gate_weights.push_back(lo.weights);
        out.patch_counts.push_back(lo.n);
    }
    out.h_fus = std::move(fused);
    return out;
}

}  // namespace hnf
