#pragma once

#include <string>
#include <vector>

#include "hnf/expr.hpp"
#include "hnf/tensor.hpp"

namespace hnf {

/// Raw raster in [0,1], shape {h,w,c}. label < 0 means unlabeled.
struct Micrograph {
    Tensor pixels;
    int label = -1;
    std::string source_id;
};

/// One embedded scale: tokens is (n+1)xd with the cls token at row 0.
struct PatchSequence {
    int scale_index = 0;
    int64_t patch_size = 0;
    int64_t n = 0;
    Expr tokens;
};

/// Per-scale embedding parameters as graph expressions.
struct ScaleParams {
    Expr w_e;    // (p^2 c) x d
    Expr e_pos;  // n x d
    Expr cls;    // d
};

Tensor bilinear_resize(const Tensor& img, int64_t th, int64_t tw);

/// Resize to target x target then map [0,1] -> [-1,1] via (x - 0.5)/0.5.
Tensor preprocess_image(const Micrograph& raw, int64_t target);

/// Rows are patches in raster patch-grid order; columns flatten (py, px, c).
Tensor tokenize_patches(const Tensor& img, int64_t p);
Tensor reassemble_patches(const Tensor& tokens, int64_t size, int64_t p, int64_t c);

PatchSequence embed_patches(Expr patches, const ScaleParams& params, int scale_index,
                            int64_t patch_size);

std::vector<PatchSequence> build_scale_pyramid(const Tensor& img,
                                               const std::vector<int64_t>& patch_sizes,
                                               const std::vector<ScaleParams>& params);

}  // namespace hnf
