#include "hnf/patcher.hpp"

#include <algorithm>
#include <cmath>

#include "hnf/errors.hpp"

namespace hnf {

Tensor bilinear_resize(const Tensor& img, int64_t th, int64_t tw) {
    const int64_t h = img.dim(0), w = img.dim(1), c = img.dim(2);
    Tensor out({th, tw, c}, DType::F64);
    const double sy = static_cast<double>(h) / static_cast<double>(th);
    const double sx = static_cast<double>(w) / static_cast<double>(tw);
    auto src = [&](int64_t y, int64_t x, int64_t ch) { return img.at((y * w + x) * c + ch); };
    for (int64_t ty = 0; ty < th; ++ty) {
        const double fy = std::max(0.0, (static_cast<double>(ty) + 0.5) * sy - 0.5);
        const int64_t y0 = std::min(static_cast<int64_t>(fy), h - 1);
        const int64_t y1 = std::min(y0 + 1, h - 1);
        const double wy = fy - static_cast<double>(y0);
        for (int64_t tx = 0; tx < tw; ++tx) {
            const double fx = std::max(0.0, (static_cast<double>(tx) + 0.5) * sx - 0.5);
            const int64_t x0 = std::min(static_cast<int64_t>(fx), w - 1);
            const int64_t x1 = std::min(x0 + 1, w - 1);
            const double wx = fx - static_cast<double>(x0);
            for (int64_t ch = 0; ch < c; ++ch) {
                const double top = src(y0, x0, ch) * (1.0 - wx) + src(y0, x1, ch) * wx;
                const double bot = src(y1, x0, ch) * (1.0 - wx) + src(y1, x1, ch) * wx;
                out.set((ty * tw + tx) * c + ch, top * (1.0 - wy) + bot * wy);
            }
        }
    }
    return out;
}

Tensor preprocess_image(const Micrograph& raw, int64_t target) {
    if (raw.pixels.rank() != 3 || raw.pixels.dim(0) == 0 || raw.pixels.dim(1) == 0)
        throw EmptyImage(raw.source_id.empty() ? "no pixels" : raw.source_id);
    const int64_t c = raw.pixels.dim(2);
    if (c != 1 && c != 3)
        throw UnsupportedChannelCount(std::to_string(c) + " channels in " + raw.source_id);
    Tensor resized = bilinear_resize(raw.pixels, target, target);
    const int64_t n = resized.numel();
    for (int64_t i = 0; i < n; ++i) resized.set(i, (resized.at(i) - 0.5) / 0.5);
    return resized;
}

Tensor tokenize_patches(const Tensor& img, int64_t p) {
    const int64_t h = img.dim(0), w = img.dim(1), c = img.dim(2);
    if (p <= 0 || h % p != 0 || w % p != 0)
        throw IndivisiblePatchSize("p=" + std::to_string(p) + " on " + shape_str(img.shape()));
    const int64_t gh = h / p, gw = w / p, n = gh * gw, cols = p * p * c;
    Tensor out({n, cols}, DType::F64);
    for (int64_t gi = 0; gi < gh; ++gi)
        for (int64_t gj = 0; gj < gw; ++gj) {
            const int64_t row = gi * gw + gj;
            for (int64_t py = 0; py < p; ++py)
                for (int64_t px = 0; px < p; ++px)
                    for (int64_t ch = 0; ch < c; ++ch)
                        out.set(row * cols + (py * p + px) * c + ch,
                                img.at(((gi * p + py) * w + gj * p + px) * c + ch));
        }
    return out;
}

Tensor reassemble_patches(const Tensor& tokens, int64_t size, int64_t p, int64_t c) {
    const int64_t g = size / p, cols = p * p * c;
    if (tokens.dim(0) != g * g || tokens.dim(1) != cols)
        throw ShapeMismatch("reassemble " + shape_str(tokens.shape()));
    Tensor img({size, size, c}, DType::F64);
    for (int64_t gi = 0; gi < g; ++gi)
        for (int64_t gj = 0; gj < g; ++gj) {
            const int64_t row = gi * g + gj;
            for (int64_t py = 0; py < p; ++py)
                for (int64_t px = 0; px < p; ++px)
                    for (int64_t ch = 0; ch < c; ++ch)
                        img.set(((gi * p + py) * size + gj * p + px) * c + ch,
                                tokens.at(row * cols + (py * p + px) * c + ch));
        }
    return img;
}

PatchSequence embed_patches(Expr patches, const ScaleParams& params, int scale_index,
                            int64_t patch_size) {
    const int64_t n = patches->shape[0];
    const int64_t d = params.w_e->shape[1];
    if (params.e_pos->shape != Shape{n, d})
        throw ShapeMismatch("e_pos " + shape_str(params.e_pos->shape) + " for n=" +
                            std::to_string(n) + ", d=" + std::to_string(d));
    Expr body = add(matmul(std::move(patches), params.w_e), params.e_pos);
    Expr cls_row = reshape(params.cls, {1, d});
    PatchSequence seq;
    seq.scale_index = scale_index;
    seq.patch_size = patch_size;
    seq.n = n;
    seq.tokens = concat({std::move(cls_row), std::move(body)}, 0);
    return seq;
}

std::vector<PatchSequence> build_scale_pyramid(const Tensor& img,
                                               const std::vector<int64_t>& patch_sizes,
                                               const std::vector<ScaleParams>& params) {
    if (patch_sizes.size() != params.size())
        throw ShapeMismatch("pyramid: " + std::to_string(patch_sizes.size()) + " sizes, " +
                            std::to_string(params.size()) + " parameter sets");
    std::vector<PatchSequence> out;
    out.reserve(patch_sizes.size());
    for (std::size_t i = 0; i < patch_sizes.size(); ++i) {
        Expr patches = constant(tokenize_patches(img, patch_sizes[i]));
        out.push_back(embed_patches(std::move(patches), params[i], static_cast<int>(i),
                                    patch_sizes[i]));
    }
    return out;
}

}  // namespace hnf
