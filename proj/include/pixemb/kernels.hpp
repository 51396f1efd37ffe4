#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "pixemb/common.hpp"

namespace pixemb {

// Worker count used by the convolution kernels. Outputs are computed
// element-independently, so results do not depend on this setting.
void set_num_threads(int threads);
int num_threads();

namespace kernels {

struct ConvGeom {
    int n, c, h, w;
    int oc, kh, kw;
    int stride, pad;
    int oh, ow;

    std::int64_t out_numel() const {
        return static_cast<std::int64_t>(n) * oc * oh * ow;
    }
};

// Validates x (N,C,H,W) against w (O,C,KH,KW) and derives output extents.
// `op` names the operation in error messages.
ConvGeom conv_geom(const std::vector<int>& xshape, const std::vector<int>& wshape,
                   int stride, int pad, const char* op);

void conv2d_forward(std::span<const float> x, std::span<const float> w,
                    std::span<float> out, const ConvGeom& g);
// With `accumulate` set, gradients are added to the output buffers instead
// of overwriting them.
void conv2d_backward_input(std::span<const float> dy, std::span<const float> w,
                           std::span<float> dx, const ConvGeom& g, bool accumulate = false);
void conv2d_backward_weight(std::span<const float> dy, std::span<const float> x,
                            std::span<float> dw, const ConvGeom& g, bool accumulate = false);

// out = op(a) · op(b) with op controlled by the transpose flags.
// a is (m,k) pre-op, b is (k,n) pre-op; out is (m,n). When `accumulate` is
// set the product is added to out instead of overwriting it.
void matmul(const float* a, const float* b, float* out, int m, int k, int n,
            bool transpose_a, bool transpose_b, bool accumulate);

struct PoolGeom {
    int n, c, h, w;
    int kernel, stride;
    int oh, ow;
};

PoolGeom pool_geom(const std::vector<int>& xshape, int kernel, int stride, const char* op);

// Max pool; argmax stores the flat input index that won each window (first
// maximum wins so that backward routing is deterministic).
void max_pool_forward(std::span<const float> x, std::span<float> out,
                      std::span<std::int64_t> argmax, const PoolGeom& g);
void mean_pool_forward(std::span<const float> x, std::span<float> out, const PoolGeom& g);

}  // namespace kernels
}  // namespace pixemb
