#include <doctest.h>

#include <cmath>

#include "hnf/errors.hpp"
#include "hnf/patcher.hpp"
#include "hnf/rng.hpp"

using namespace hnf;

namespace {

Micrograph uniform_image(int64_t h, int64_t w, int64_t c, double value) {
    Micrograph m;
    m.pixels = Tensor::full({h, w, c}, value);
    m.source_id = "test";
    return m;
}

Tensor random_image(int64_t h, int64_t w, int64_t c, uint64_t seed) {
    std::mt19937_64 g(seed);
    Tensor t({h, w, c}, DType::F64);
    for (int64_t i = 0; i < t.numel(); ++i) t.set(i, rng_uniform(g));
    return t;
}

}  // namespace

TEST_CASE("preprocess normalizes to [-1,1]") {
    Tensor mid = preprocess_image(uniform_image(8, 6, 1, 0.5), 4);
    CHECK(mid.shape() == Shape{4, 4, 1});
    for (int64_t i = 0; i < mid.numel(); ++i) CHECK(mid.at(i) == doctest::Approx(0.0).epsilon(1e-12));

    Tensor one = preprocess_image(uniform_image(8, 6, 3, 1.0), 4);
    for (int64_t i = 0; i < one.numel(); ++i) CHECK(one.at(i) == doctest::Approx(1.0).epsilon(1e-12));

    Tensor big = preprocess_image(uniform_image(1024, 768, 1, 0.25), 224);
    CHECK(big.shape() == Shape{224, 224, 1});

    Micrograph bad = uniform_image(4, 4, 2, 0.5);
    CHECK_THROWS_AS(preprocess_image(bad, 4), UnsupportedChannelCount);
    Micrograph none;
    none.pixels = Tensor({0, 4, 1}, DType::F64);
    CHECK_THROWS_AS(preprocess_image(none, 4), EmptyImage);
}

TEST_CASE("bilinear resize preserves constants and interpolates linears") {
    Tensor img({2, 2, 1}, DType::F64);
    img.set(0, 0.0);
    img.set(1, 1.0);
    img.set(2, 0.0);
    img.set(3, 1.0);
    Tensor up = bilinear_resize(img, 2, 4);
    CHECK(up.at(0) == doctest::Approx(0.0));
    CHECK(up.at(3) == doctest::Approx(1.0));
    CHECK(up.at(1) < up.at(2));  // monotone along the gradient
}

TEST_CASE("tokenize patch counts match the grid formula") {
    Tensor img224 = random_image(224, 224, 1, 3);
    CHECK(tokenize_patches(img224, 16).shape() == Shape{196, 256});
    CHECK(tokenize_patches(img224, 28).shape() == Shape{64, 784});
    CHECK(tokenize_patches(img224, 32).shape() == Shape{49, 1024});
    CHECK_THROWS_AS(tokenize_patches(img224, 15), IndivisiblePatchSize);
}

TEST_CASE("tokenize/reassemble round trip is exact") {
    for (int64_t p : {1, 2, 4}) {
        Tensor img = random_image(4, 4, 3, 40 + static_cast<uint64_t>(p));
        Tensor back = reassemble_patches(tokenize_patches(img, p), 4, p, 3);
        CHECK(back.bit_equal(img));
    }
    Tensor tiny = random_image(2, 2, 1, 9);
    CHECK(reassemble_patches(tokenize_patches(tiny, 1), 2, 1, 1).bit_equal(tiny));
}

TEST_CASE("embed_patches layout and worked examples") {
    const int64_t n = 4, m = 4, d = 4;
    Session s;
    ScaleParams sp;
    sp.w_e = leaf("w_e", {m, d});
    sp.e_pos = leaf("e_pos", {n, d});
    sp.cls = leaf("cls", {d});

    std::mt19937_64 g(17);
    Tensor cls(Shape{d}, DType::F64);
    for (int64_t i = 0; i < d; ++i) cls.set(i, rng_uniform(g));
    s.bind("cls", cls);

    SUBCASE("zero patches, zero e_pos give zero rows under any projection") {
        Tensor w(Shape{m, d}, DType::F64);
        for (int64_t i = 0; i < w.numel(); ++i) w.set(i, rng_uniform(g));
        s.bind("w_e", w);
        s.bind("e_pos", Tensor::zeros({n, d}));
        PatchSequence seq = embed_patches(constant(Tensor::zeros({n, m})), sp, 0, 2);
        Tensor t = eval(seq.tokens, s);
        CHECK(t.shape() == Shape{n + 1, d});
        for (int64_t c = 0; c < d; ++c) CHECK(t.at(0, c) == cls.at(c));
        for (int64_t r = 1; r <= n; ++r)
            for (int64_t c = 0; c < d; ++c) CHECK(t.at(r, c) == 0.0);
    }

    SUBCASE("identity projection reproduces raw patches") {
        Tensor eye = Tensor::zeros({m, d});
        for (int64_t i = 0; i < d; ++i) eye.set(i, i, 1.0);
        s.bind("w_e", eye);
        s.bind("e_pos", Tensor::zeros({n, d}));
        Tensor patches(Shape{n, m}, DType::F64);
        for (int64_t i = 0; i < patches.numel(); ++i) patches.set(i, rng_uniform(g));
        PatchSequence seq = embed_patches(constant(patches), sp, 0, 2);
        Tensor t = eval(seq.tokens, s);
        for (int64_t r = 0; r < n; ++r)
            for (int64_t c = 0; c < d; ++c) CHECK(t.at(r + 1, c) == patches.at(r, c));
    }

    SUBCASE("random case matches a hand matmul+add") {
        Tensor w(Shape{m, d}, DType::F64), pos(Shape{n, d}, DType::F64), x(Shape{n, m}, DType::F64);
        for (int64_t i = 0; i < w.numel(); ++i) w.set(i, rng_uniform(g));
        for (int64_t i = 0; i < pos.numel(); ++i) pos.set(i, rng_uniform(g));
        for (int64_t i = 0; i < x.numel(); ++i) x.set(i, rng_uniform(g));
        s.bind("w_e", w);
        s.bind("e_pos", pos);
        PatchSequence seq = embed_patches(constant(x), sp, 0, 2);
        Tensor t = eval(seq.tokens, s);
        for (int64_t r = 0; r < n; ++r)
            for (int64_t c = 0; c < d; ++c) {
                double acc = pos.at(r, c);
                for (int64_t k = 0; k < m; ++k) acc += x.at(r, k) * w.at(k, c);
                CHECK(t.at(r + 1, c) == doctest::Approx(acc).epsilon(1e-9));
            }
    }

    SUBCASE("embedding is linear in the patches for fixed params") {
        Tensor w(Shape{m, d}, DType::F64), pos(Shape{n, d}, DType::F64), x(Shape{n, m}, DType::F64);
        for (int64_t i = 0; i < w.numel(); ++i) w.set(i, rng_uniform(g));
        for (int64_t i = 0; i < pos.numel(); ++i) pos.set(i, rng_uniform(g));
        for (int64_t i = 0; i < x.numel(); ++i) x.set(i, rng_uniform(g));
        s.bind("w_e", w);
        s.bind("e_pos", pos);
        const double a = 2.75;
        Tensor ax = x;
        for (int64_t i = 0; i < ax.numel(); ++i) ax.set(i, a * ax.at(i));
        Tensor ex = eval(embed_patches(constant(x), sp, 0, 2).tokens, s);
        Tensor eax = eval(embed_patches(constant(ax), sp, 0, 2).tokens, s);
        Tensor e0 = eval(embed_patches(constant(Tensor::zeros({n, m})), sp, 0, 2).tokens, s);
        for (int64_t r = 1; r <= n; ++r)
            for (int64_t c = 0; c < d; ++c)
                CHECK(eax.at(r, c) - e0.at(r, c) ==
                      doctest::Approx(a * (ex.at(r, c) - e0.at(r, c))).epsilon(1e-9));
    }
}

TEST_CASE("scale pyramid follows the configured schedule") {
    Tensor img = preprocess_image(uniform_image(224, 224, 1, 0.6), 224);
    const int64_t d = 8;
    std::vector<int64_t> sizes{16, 28, 32};
    std::vector<ScaleParams> params;
    Session s;
    for (std::size_t i = 0; i < sizes.size(); ++i) {
        const int64_t p = sizes[i];
        const int64_t n = (224 / p) * (224 / p);
        ScaleParams sp;
        const std::string pre = "layers." + std::to_string(i) + ".";
        sp.w_e = leaf(pre + "w_e", {p * p, d});
        sp.e_pos = leaf(pre + "e_pos", {n, d});
        sp.cls = leaf(pre + "cls", {d});
        s.bind(pre + "w_e", xavier_uniform({p * p, d}, 1, pre + "w_e", DType::F64));
        s.bind(pre + "e_pos", Tensor::zeros({n, d}));
        s.bind(pre + "cls", Tensor::zeros({d}));
        params.push_back(sp);
    }
    auto pyr = build_scale_pyramid(img, sizes, params);
    REQUIRE(pyr.size() == 3);
    CHECK(pyr[0].n == 196);
    CHECK(pyr[1].n == 64);
    CHECK(pyr[2].n == 49);
    for (const auto& seq : pyr) {
        Tensor t = eval(seq.tokens, s);
        CHECK(t.shape() == Shape{seq.n + 1, d});
    }

    auto whole = build_scale_pyramid(img, {224}, {[&] {
                                         ScaleParams sp;
                                         sp.w_e = constant(Tensor::zeros({224 * 224, d}));
                                         sp.e_pos = constant(Tensor::zeros({1, d}));
                                         sp.cls = constant(Tensor::zeros({d}));
                                         return sp;
                                     }()});
    CHECK(whole.size() == 1);
    CHECK(whole[0].n == 1);
}

TEST_CASE("equal patch sizes keep distinct parameters per scale") {
    Tensor img = preprocess_image(uniform_image(8, 8, 1, 0.3), 8);
    const int64_t d = 4, p = 4, n = 4;
    Session s;
    std::vector<ScaleParams> params;
    for (int i = 0; i < 2; ++i) {
        const std::string pre = "layers." + std::to_string(i) + ".";
        ScaleParams sp;
        sp.w_e = leaf(pre + "w_e", {p * p, d});
        sp.e_pos = leaf(pre + "e_pos", {n, d});
        sp.cls = leaf(pre + "cls", {d});
        s.bind(pre + "w_e", xavier_uniform({p * p, d}, 7, pre + "w_e", DType::F64));
        s.bind(pre + "e_pos", xavier_uniform({n, d}, 7, pre + "e_pos", DType::F64));
        s.bind(pre + "cls", Tensor::zeros({d}));
        params.push_back(sp);
    }
    auto pyr = build_scale_pyramid(img, {p, p}, params);
    CHECK(pyr[0].n == pyr[1].n);
    Tensor t0 = eval(pyr[0].tokens, s);
    Tensor t1 = eval(pyr[1].tokens, s);
    CHECK_FALSE(t0.bit_equal(t1));  // distinct parameter streams per scale
}
