#include "hnf/fusionhead.hpp"

#include <cmath>
#include <utility>

#include "hnf/errors.hpp"
#include "hnf/rng.hpp"

namespace hnf {

void init_fusion_params(ParamSet& ps, const FusionConfig& cfg, int64_t classes, uint64_t seed,
                        const std::string& prefix, DType dtype) {
    if (cfg.heads < 1 || cfg.d_h < 1)
        throw ShapeMismatch("fusion head needs positive head count and width");
    if (classes < 2) throw ShapeMismatch("classifier needs at least two categories");
    auto mat = [&](const std::string& name, Shape shape) {
        ps[name] = xavier_uniform(std::move(shape), seed, name, dtype);
    };
    for (int64_t h = 0; h < cfg.heads; ++h) {
        const std::string hp = prefix + "heads." + std::to_string(h) + ".";
        mat(hp + "wq_text", {cfg.d, cfg.d_h});
        mat(hp + "wq_fus", {cfg.d, cfg.d_h});
        mat(hp + "wk_text", {cfg.d, cfg.d_h});
        mat(hp + "wk_fus", {cfg.d, cfg.d_h});
        mat(hp + "wv_text", {cfg.d, cfg.d_h});
        mat(hp + "wv_fus", {cfg.d, cfg.d_h});
    }
    mat(prefix + "w_o", {cfg.heads * cfg.d_h, cfg.d});
    mat(prefix + "w_cls", {cfg.d, classes});
}

CrossModalOut cross_modal_attention_expr(Expr h_text_fus, Expr h_fus, const FusionConfig& cfg,
                                         const std::string& prefix) {
    const Shape want = {1, cfg.d};
    if (h_text_fus->shape != want || h_fus->shape != want)
        throw ShapeMismatch("cross-modal inputs must both be {1," + std::to_string(cfg.d) +
                            "}, got " + shape_str(h_text_fus->shape) + " and " +
                            shape_str(h_fus->shape));
    CrossModalOut out;
    std::vector<Expr> heads;
    heads.reserve(static_cast<std::size_t>(cfg.heads));
    const double scale = 1.0 / std::sqrt(static_cast<double>(cfg.d_h));
    for (int64_t h = 0; h < cfg.heads; ++h) {
        const std::string hp = prefix + "heads." + std::to_string(h) + ".";
        const Shape pw = {cfg.d, cfg.d_h};
        Expr q_text = matmul(h_text_fus, leaf(hp + "wq_text", pw));
        Expr q_fus = matmul(h_fus, leaf(hp + "wq_fus", pw));
        Expr k_concat = concat({matmul(h_text_fus, leaf(hp + "wk_text", pw)),
                                matmul(h_fus, leaf(hp + "wk_fus", pw))},
                               0);
        Expr v_concat = concat({matmul(h_text_fus, leaf(hp + "wv_text", pw)),
                                matmul(h_fus, leaf(hp + "wv_fus", pw))},
                               0);
        Expr logits = scalar_mul(scale, matmul(add(std::move(q_text), std::move(q_fus)),
                                               transpose(std::move(k_concat))));
        Expr weights = softmax(std::move(logits), 1);
        out.weights.push_back(weights);
        heads.push_back(matmul(std::move(weights), std::move(v_concat)));
    }
    Expr cat = heads.size() == 1 ? heads[0] : concat(std::move(heads), 1);
    out.y_cross = matmul(std::move(cat), leaf(prefix + "w_o", {cfg.heads * cfg.d_h, cfg.d}));
    return out;
}

Expr classify_expr(Expr y_cross, Expr w) {
    if (y_cross->shape.size() != 2 || y_cross->shape[0] != 1)
        throw ShapeMismatch("classifier input must be {1,d}, got " + shape_str(y_cross->shape));
    if (w->shape.size() != 2 || w->shape[0] != y_cross->shape[1] || w->shape[1] < 2)
        throw ShapeMismatch("classifier weights " + shape_str(w->shape) + " incompatible with " +
                            shape_str(y_cross->shape));
    return softmax(matmul(std::move(y_cross), std::move(w)), 1);
}

namespace {

Tensor as_row(const Tensor& v) {
    Tensor row = Tensor::zeros({1, v.numel()}, v.dtype());
    for (int64_t i = 0; i < v.numel(); ++i) row.set(0, i, v.at(i));
    return row;
}

}  // namespace

Tensor cross_modal_attention(const Tensor& h_text_fus, const Tensor& h_fus,
                             const ParamSet& params, const FusionConfig& cfg,
                             const std::string& prefix) {
    if (h_text_fus.numel() != cfg.d || h_fus.numel() != cfg.d)
        throw ShapeMismatch("cross-modal inputs must have " + std::to_string(cfg.d) +
                            " entries, got " + std::to_string(h_text_fus.numel()) + " and " +
                            std::to_string(h_fus.numel()));
    Session s;
    s.bind_all(params);
    s.bind("__cm_text", as_row(h_text_fus));
    s.bind("__cm_fus", as_row(h_fus));
    const CrossModalOut out = cross_modal_attention_expr(leaf("__cm_text", {1, cfg.d}),
                                                         leaf("__cm_fus", {1, cfg.d}), cfg, prefix);
    const Tensor y = eval(out.y_cross, s);
    Tensor flat = Tensor::zeros({cfg.d}, y.dtype());
    for (int64_t i = 0; i < cfg.d; ++i) flat.set(i, y.at(0, i));
    return flat;
}

Tensor classify(const Tensor& y_cross, const Tensor& w) {
    Session s;
    s.bind("__cls_y", as_row(y_cross));
    s.bind("__cls_w", w);
    const Tensor p = eval(
        classify_expr(leaf("__cls_y", {1, y_cross.numel()}), leaf("__cls_w", w.shape())), s);
    Tensor flat = Tensor::zeros({p.dim(1)}, p.dtype());
    for (int64_t i = 0; i < p.dim(1); ++i) flat.set(i, p.at(0, i));
    return flat;
}

int64_t argmax_index(const Tensor& p) {
    if (p.numel() == 0) throw ShapeMismatch("argmax over an empty tensor");
    int64_t best = 0;
    double top = p.at(0);
    for (int64_t i = 1; i < p.numel(); ++i) {
        if (p.at(i) > top) {
            top = p.at(i);
            best = i;
        }
    }
    return best;
}

}  // namespace hnf
