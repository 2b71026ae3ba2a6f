#include <cmath>
#include <string>
#include <vector>

#include <doctest.h>

#include "hnf/errors.hpp"
#include "hnf/expr.hpp"
#include "hnf/hnf.hpp"
#include "hnf/patcher.hpp"
#include "hnf/rng.hpp"
#include "hnf/tensor.hpp"

using namespace hnf;

namespace {

Tensor random_tensor(Shape shape, uint64_t seed, const std::string& name, double lo = -1.0,
                     double hi = 1.0) {
    auto g = named_rng(seed, name);
    Tensor t = Tensor::zeros(shape, DType::F64);
    for (int64_t i = 0; i < t.numel(); ++i) t.set(i, rng_uniform_range(g, lo, hi));
    return t;
}

double max_abs_diff(const Tensor& a, const Tensor& b) {
    REQUIRE(a.shape() == b.shape());
    double worst = 0.0;
    for (int64_t i = 0; i < a.numel(); ++i) worst = std::max(worst, std::abs(a.at(i) - b.at(i)));
    return worst;
}

Micrograph random_image(int64_t hw, uint64_t seed) {
    Micrograph m;
    m.pixels = random_tensor({hw, hw, 1}, seed, "pixels", 0.0, 1.0);
    m.source_id = "synthetic";
    return m;
}

HnfConfig tiny_config() {
    HnfConfig cfg;
    cfg.image_hw = 12;
    cfg.channels = 1;
    cfg.d = 4;
    cfg.heads = 2;
    cfg.ffn_hidden = 6;
    cfg.ode_steps = 2;
    cfg.cheb_k = 2;
    cfg.layers = {{4, 2}, {6, 2}};
    return cfg;
}

}  // namespace

TEST_CASE("moe gate combines the two experts") {
    const int64_t d = 4;
    Expr hc = leaf("hc", {1, d});
    Expr hv = leaf("hv", {1, d});
    Expr wg = leaf("wg", {2 * d, 2});
    MoeOut moe = moe_gate(hc, hv, wg);

    Session s;
    s.bind("hc", random_tensor({1, d}, 1, "hc"));
    s.bind("hv", random_tensor({1, d}, 2, "hv"));

    SUBCASE("zero gate weights give the uniform mixture") {
        s.bind("wg", Tensor::zeros({2 * d, 2}, DType::F64));
        Tensor w = eval(moe.weights, s);
        CHECK(w.at(0, 0) == 0.5);
        CHECK(w.at(0, 1) == 0.5);
        Tensor fused = eval(moe.fused, s);
        for (int64_t j = 0; j < d; ++j)
            CHECK(fused.at(0, j) ==
                  doctest::Approx(0.5 * (s.bindings.at("hc").at(j) + s.bindings.at("hv").at(j)))
                      .epsilon(1e-14));
    }

    SUBCASE("equal experts pass through unchanged for any gate") {
        s.bind("hv", s.bindings.at("hc"));
        s.bind("wg", random_tensor({2 * d, 2}, 3, "wg", -2.0, 2.0));
        Tensor fused = eval(moe.fused, s);
        CHECK(max_abs_diff(fused, s.bindings.at("hc").astype(DType::F64)) < 1e-14);
    }

    SUBCASE("logits (1,-1) land on sigma(2)") {
        Tensor hc_v = Tensor::zeros({1, d}, DType::F64);
        hc_v.set(0, 1.0);
        s.bind("hc", hc_v);
        s.bind("hv", Tensor::zeros({1, d}, DType::F64));
        Tensor wg_v = Tensor::zeros({2 * d, 2}, DType::F64);
        wg_v.set(0, 0, 1.0);
        wg_v.set(0, 1, -1.0);
        s.bind("wg", wg_v);
        Tensor w = eval(moe.weights, s);
        const double sig2 = 1.0 / (1.0 + std::exp(-2.0));
        CHECK(w.at(0, 0) == doctest::Approx(sig2).epsilon(1e-12));
        CHECK(w.at(0, 1) == doctest::Approx(1.0 - sig2).epsilon(1e-12));
        CHECK(w.at(0, 0) == doctest::Approx(0.8808).epsilon(1e-4));
    }

    SUBCASE("weights always form a 2-point distribution") {
        auto g = named_rng(7, "trials");
        for (int trial = 0; trial < 5; ++trial) {
            s.bind("hc", random_tensor({1, d}, 10 + trial, "hc"));
            s.bind("hv", random_tensor({1, d}, 20 + trial, "hv"));
            s.bind("wg", random_tensor({2 * d, 2}, 30 + trial, "wg", -3.0, 3.0));
            s.invalidate();
            Tensor w = eval(moe.weights, s);
            CHECK(w.at(0, 0) >= 0.0);
            CHECK(w.at(0, 1) >= 0.0);
            CHECK(std::abs(w.at(0, 0) + w.at(0, 1) - 1.0) < 1e-6);
        }
        (void)g;
    }

    SUBCASE("shape violations are rejected") {
        CHECK_THROWS_AS(moe_gate(leaf("a", {2, d}), leaf("b", {2, d}), leaf("w", {2 * d, 2})),
                        ShapeMismatch);
        CHECK_THROWS_AS(moe_gate(leaf("a", {1, d}), leaf("b", {1, d}), leaf("w", {d, 2})),
                        ShapeMismatch);
    }
}

TEST_CASE("fusion layer forward") {
    HnfConfig cfg = tiny_config();
    Micrograph img = random_image(cfg.image_hw, 101);
    Tensor pre = preprocess_image(img, cfg.image_hw);
    ParamSet ps;
    init_hnf_params(ps, cfg, 17, DType::F64);

    SUBCASE("absent and zero-projected fused inputs are equivalent") {
        ps["layers.1.inject.w_in"] = Tensor::zeros({cfg.d, cfg.d}, DType::F64);
        Session s;
        s.bind_all(ps);
        HnfLayerOut without = hnf_layer_forward(pre, cfg, 1, nullptr, s);
        Expr prev = constant(random_tensor({1, cfg.d}, 5, "prev"));
        HnfLayerOut with = hnf_layer_forward(pre, cfg, 1, prev, s);
        CHECK(eval(with.h_cls, s).bit_equal(eval(without.h_cls, s)));
        CHECK(eval(with.h_vn, s).bit_equal(eval(without.h_vn, s)));
        CHECK(eval(with.fused, s).bit_equal(eval(without.fused, s)));
    }

    SUBCASE("patch counts follow the layer scale") {
        Session s;
        s.bind_all(ps);
        HnfLayerOut l0 = hnf_layer_forward(pre, cfg, 0, nullptr, s);
        HnfLayerOut l1 = hnf_layer_forward(pre, cfg, 1, nullptr, s);
        CHECK(l0.n == 9);
        CHECK(l1.n == 4);
        CHECK(eval(l0.fused, s).shape() == Shape{1, cfg.d});
        CHECK(eval(l0.weights, s).shape() == Shape{1, 2});
    }
}

TEST_CASE("full fusion network") {
    HnfConfig cfg = tiny_config();
    Micrograph img = random_image(cfg.image_hw, 102);
    ParamSet ps;
    init_hnf_params(ps, cfg, 18, DType::F64);

    SUBCASE("identical images give identical embeddings") {
        Session s1, s2;
        s1.bind_all(ps);
        s2.bind_all(ps);
        Tensor a = eval(hnf_forward(img, cfg, s1).h_fus, s1);
        Tensor b = eval(hnf_forward(img, cfg, s2).h_fus, s2);
        CHECK(a.bit_equal(b));
    }

    SUBCASE("single-layer config matches the layer routine") {
        HnfConfig one = cfg;
        one.layers = {cfg.layers[0]};
        Session s;
        s.bind_all(ps);
        HnfOut full = hnf_forward(img, one, s);
        HnfLayerOut lo = hnf_layer_forward(preprocess_image(img, one.image_hw), one, 0, nullptr, s);
        CHECK(eval(full.h_fus, s).bit_equal(eval(lo.fused, s)));
        CHECK(full.gate_weights.size() == 1);
    }

    SUBCASE("every layer records a valid gate distribution") {
        Session s;
        s.bind_all(ps);
        HnfOut out = hnf_forward(img, cfg, s);
        CHECK(out.gate_weights.size() == cfg.layers.size());
        for (const Expr& w : out.gate_weights) {
            Tensor wv = eval(w, s);
            CHECK(wv.at(0, 0) >= 0.0);
            CHECK(wv.at(0, 1) >= 0.0);
            CHECK(std::abs(wv.at(0, 0) + wv.at(0, 1) - 1.0) < 1e-6);
        }
    }

    SUBCASE("layer order matters") {
        HnfConfig swapped = cfg;
        std::swap(swapped.layers[0], swapped.layers[1]);
        ParamSet ps2;
        init_hnf_params(ps2, swapped, 18, DType::F64);
        Session s1, s2;
        s1.bind_all(ps);
        s2.bind_all(ps2);
        HnfOut a = hnf_forward(img, cfg, s1);
        HnfOut b = hnf_forward(img, swapped, s2);
        CHECK(a.patch_counts == std::vector<int64_t>{9, 4});
        CHECK(b.patch_counts == std::vector<int64_t>{4, 9});
        CHECK(max_abs_diff(eval(a.h_fus, s1), eval(b.h_fus, s2)) > 1e-6);
    }

    SUBCASE("tied directions drop the backward parameter set") {
        HnfConfig tied = cfg;
        tied.tie_directions = true;
        ParamSet tiedps;
        init_hnf_params(tiedps, tied, 18, DType::F64);
        CHECK(tiedps.count("layers.0.seq.bwd.wo") == 0);
        CHECK(tiedps.count("layers.0.seq.fwd.wo") == 1);
        Session s;
        s.bind_all(tiedps);
        CHECK(eval(hnf_forward(img, tied, s).h_fus, s).all_finite());
    }

    SUBCASE("initialization is deterministic") {
        ParamSet again;
        init_hnf_params(again, cfg, 18, DType::F64);
        CHECK(again.size() == ps.size());
        for (const auto& [name, t] : ps) CHECK(again.at(name).bit_equal(t));
    }
}

TEST_CASE("reference scales produce the documented patch counts") {
    HnfConfig cfg;
    cfg.d = 16;
    cfg.heads = 2;
    cfg.ffn_hidden = 16;
    cfg.ode_steps = 2;
    cfg.cheb_k = 2;
    Micrograph img = random_image(224, 103);
    ParamSet ps;
    init_hnf_params(ps, cfg, 19, DType::F64);
    Session s;
    s.bind_all(ps);
    HnfOut out = hnf_forward(img, cfg, s);
    CHECK(out.patch_counts == std::vector<int64_t>{196, 64, 49});
    CHECK(out.gate_weights.size() == 3);
    Tensor h = eval(out.h_fus, s);
    CHECK(h.shape() == Shape{1, 16});
    CHECK(h.all_finite());
}

TEST_CASE("forcing the cls expert isolates the graph path") {
    HnfConfig cfg = tiny_config();
    Micrograph img = random_image(cfg.image_hw, 104);
    Tensor pre = preprocess_image(img, cfg.image_hw);
    ParamSet ps;
    init_hnf_params(ps, cfg, 23, DType::F64);
    Session s;
    s.bind_all(ps);

    // Calibrate each layer's gate so the cls logit wins by a wide margin,
    // using the embeddings produced with earlier layers already forced.
    Expr fused;
    for (int64_t li = 0; li < 2; ++li) {
        HnfLayerOut lo = hnf_layer_forward(pre, cfg, li, fused, s);
        Tensor hc = eval(lo.h_cls, s);
        Tensor hv = eval(lo.h_vn, s);
        std::vector<double> x;
        for (int64_t j = 0; j < cfg.d; ++j) x.push_back(hc.at(0, j));
        for (int64_t j = 0; j < cfg.d; ++j) x.push_back(hv.at(0, j));
        double nrm = 0.0;
        for (double v : x) nrm += v * v;
        Tensor wg = Tensor::zeros({2 * cfg.d, 2}, DType::F64);
        for (std::size_t i = 0; i < x.size(); ++i) {
            wg.set(static_cast<int64_t>(i) * 2 + 0, 25.0 * x[i] / nrm);
            wg.set(static_cast<int64_t>(i) * 2 + 1, -25.0 * x[i] / nrm);
        }
        s.bind(hnf_layer_prefix(li) + "moe.w_g", wg);
        s.invalidate();
        lo = hnf_layer_forward(pre, cfg, li, fused, s);
        fused = lo.fused;
    }

    Session sbase;
    sbase.bindings = s.bindings;
    HnfOut base = hnf_forward(img, cfg, sbase);
    Tensor base_h = eval(base.h_fus, sbase);
    for (const Expr& w : base.gate_weights) CHECK(eval(w, sbase).at(0, 0) > 1.0 - 1e-9);

    Session spert;
    spert.bindings = s.bindings;
    for (int64_t li = 0; li < 2; ++li)
        for (int64_t kc = 0; kc < cfg.cheb_k; ++kc) {
            std::string name = hnf_layer_prefix(li) + "graph.cheb.t" + std::to_string(kc);
            Tensor t = spert.bindings.at(name);
            Tensor noise = random_tensor(t.shape(), 200 + li * 10 + kc, name);
            for (int64_t i = 0; i < t.numel(); ++i) t.set(i, t.at(i) + 0.5 * noise.at(i));
            spert.bind(name, t);
        }
    Tensor pert_h = eval(hnf_forward(img, cfg, spert).h_fus, spert);
    CHECK(max_abs_diff(base_h, pert_h) < 1e-6);

    Session scontrol;
    scontrol.bindings = spert.bindings;
    for (int64_t li = 0; li < 2; ++li)
        scontrol.bind(hnf_layer_prefix(li) + "moe.w_g", ps.at(hnf_layer_prefix(li) + "moe.w_g"));
    Tensor control_h = eval(hnf_forward(img, cfg, scontrol).h_fus, scontrol);
    Session sorig;
    sorig.bindings = s.bindings;
    for (int64_t li = 0; li < 2; ++li)
        sorig.bind(hnf_layer_prefix(li) + "moe.w_g", ps.at(hnf_layer_prefix(li) + "moe.w_g"));
    Tensor orig_h = eval(hnf_forward(img, cfg, sorig).h_fus, sorig);
    CHECK(max_abs_diff(control_h, orig_h) > 1e-6);
}

TEST_CASE("fusion network gradients match finite differences") {
    HnfConfig cfg = tiny_config();
    Micrograph img = random_image(cfg.image_hw, 105);
    ParamSet ps;
    init_hnf_params(ps, cfg, 29, DType::F64);
    Session s;
    s.bind_all(ps);
    HnfOut out = hnf_forward(img, cfg, s);
    Expr loss = reduce_sum(mul(out.h_fus, constant(random_tensor({1, cfg.d}, 30, "probe"))));

    std::vector<std::string> wanted{
        "layers.0.patch.w_e",      "layers.0.patch.cls",     "layers.0.seq.fwd.wo",
        "layers.0.seq.gate.fpp",   "layers.0.graph.vn",      "layers.0.graph.cheb.t1",
        "layers.0.moe.w_g",        "layers.1.inject.w_in",   "layers.1.seq.bwd.ffn.w1",
        "layers.1.patch.e_pos",    "layers.1.graph.cheb.t0", "layers.1.moe.w_g",
        "layers.1.seq.fwd.heads.0.wq"};
    FDReport rep = finite_diff_check(loss, s, wanted, 1e-5, 4);
    CAPTURE(rep.worst_name);
    CAPTURE(rep.worst_index);
    CAPTURE(rep.analytic);
    CAPTURE(rep.numeric);
    CHECK(rep.max_rel_err < 1e-4);
}
