#include "pixemb/kernels.hpp"

#include <algorithm>
#include <atomic>
#include <limits>

namespace pixemb {

namespace {
std::atomic<int> g_threads{1};
}

void set_num_threads(int threads) { g_threads.store(threads < 1 ? 1 : threads); }
int num_threads() { return g_threads.load(); }

namespace kernels {

ConvGeom conv_geom(const std::vector<int>& xshape, const std::vector<int>& wshape,
                   int stride, int pad, const char* op) {
    if (xshape.size() != 4 || wshape.size() != 4 || xshape[1] != wshape[1]) {
        throw ShapeError(std::string(op) + ": incompatible shapes " + shape_to_string(xshape) +
                         " and " + shape_to_string(wshape));
    }
    if (stride < 1 || pad < 0) {
        throw ShapeError(std::string(op) + ": invalid stride/padding");
    }
    ConvGeom g{};
    g.n = xshape[0];
    g.c = xshape[1];
    g.h = xshape[2];
    g.w = xshape[3];
    g.oc = wshape[0];
    g.kh = wshape[2];
    g.kw = wshape[3];
    g.stride = stride;
    g.pad = pad;
    g.oh = (g.h + 2 * pad - g.kh) / stride + 1;
    g.ow = (g.w + 2 * pad - g.kw) / stride + 1;
    if (g.oh < 1 || g.ow < 1) {
        throw ShapeError(std::string(op) + ": kernel " + shape_to_string(wshape) +
                         " does not fit input " + shape_to_string(xshape));
    }
    return g;
}

void conv2d_forward(std::span<const float> x, std::span<const float> w,
                    std::span<float> out, const ConvGeom& g) {
    std::fill(out.begin(), out.end(), 0.0f);
    const auto rows = static_cast<std::int64_t>(g.n) * g.oc;
    parallel_for(rows, num_threads(), [&](std::int64_t lo, std::int64_t hi) {
        for (std::int64_t r = lo; r < hi; ++r) {
            const int in = static_cast<int>(r / g.oc);
            const int oc = static_cast<int>(r % g.oc);
            for (int oh = 0; oh < g.oh; ++oh) {
                float* orow = out.data() + ((r * g.oh) + oh) * g.ow;
                for (int ic = 0; ic < g.c; ++ic) {
                    for (int ky = 0; ky < g.kh; ++ky) {
                        const int ih = oh * g.stride - g.pad + ky;
                        if (ih < 0 || ih >= g.h) continue;
                        const float* xrow =
                            x.data() + ((static_cast<std::int64_t>(in) * g.c + ic) * g.h + ih) * g.w;
                        const float* wrow =
                            w.data() + ((static_cast<std::int64_t>(oc) * g.c + ic) * g.kh + ky) * g.kw;
                        for (int kx = 0; kx < g.kw; ++kx) {
                            const float wv = wrow[kx];
                            // ow range with iw = ow*stride - pad + kx inside [0, w)
                            int ow_lo = 0;
                            const int off = kx - g.pad;
                            if (off < 0) ow_lo = (-off + g.stride - 1) / g.stride;
                            int ow_hi = g.ow;
                            if (off + (g.ow - 1) * g.stride >= g.w) {
                                ow_hi = (g.w - 1 - off) / g.stride + 1;
                            }
                            if (g.stride == 1) {
                                const float* xq = xrow + off;
                                for (int ow = ow_lo; ow < ow_hi; ++ow) {
                                    orow[ow] += wv * xq[ow];
                                }
                            } else {
                                for (int ow = ow_lo; ow < ow_hi; ++ow) {
                                    orow[ow] += wv * xrow[ow * g.stride + off];
                                }
                            }
                        }
                    }
                }
            }
        }
    });
}

void conv2d_backward_input(std::span<const float> dy, std::span<const float> w,
                           std::span<float> dx, const ConvGeom& g, bool accumulate) {
    if (!accumulate) std::fill(dx.begin(), dx.end(), 0.0f);
    const auto rows = static_cast<std::int64_t>(g.n) * g.c;
    parallel_for(rows, num_threads(), [&](std::int64_t lo, std::int64_t hi) {
        for (std::int64_t r = lo; r < hi; ++r) {
            const int in = static_cast<int>(r / g.c);
            const int ic = static_cast<int>(r % g.c);
            float* dxim = dx.data() + r * g.h * g.w;
            for (int oc = 0; oc < g.oc; ++oc) {
                const float* dyim =
                    dy.data() + (static_cast<std::int64_t>(in) * g.oc + oc) * g.oh * g.ow;
                const float* wtap =
                    w.data() + (static_cast<std::int64_t>(oc) * g.c + ic) * g.kh * g.kw;
                for (int ky = 0; ky < g.kh; ++ky) {
                    for (int oh = 0; oh < g.oh; ++oh) {
                        const int ih = oh * g.stride - g.pad + ky;
                        if (ih < 0 || ih >= g.h) continue;
                        float* dxrow = dxim + static_cast<std::int64_t>(ih) * g.w;
                        const float* dyrow = dyim + static_cast<std::int64_t>(oh) * g.ow;
                        for (int kx = 0; kx < g.kw; ++kx) {
                            const float wv = wtap[ky * g.kw + kx];
                            const int off = kx - g.pad;
                            int ow_lo = 0;
                            if (off < 0) ow_lo = (-off + g.stride - 1) / g.stride;
                            int ow_hi = g.ow;
                            if (off + (g.ow - 1) * g.stride >= g.w) {
                                ow_hi = (g.w - 1 - off) / g.stride + 1;
                            }
                            if (g.stride == 1) {
                                float* dxq = dxrow + off;
                                for (int ow = ow_lo; ow < ow_hi; ++ow) {
                                    dxq[ow] += wv * dyrow[ow];
                                }
                            } else {
                                for (int ow = ow_lo; ow < ow_hi; ++ow) {
                                    dxrow[ow * g.stride + off] += wv * dyrow[ow];
                                }
                            }
                        }
                    }
                }
            }
        }
    });
}

void conv2d_backward_weight(std::span<const float> dy, std::span<const float> x,
                            std::span<float> dw, const ConvGeom& g, bool accumulate) {
    if (!accumulate) std::fill(dw.begin(), dw.end(), 0.0f);
    parallel_for(g.oc, num_threads(), [&](std::int64_t lo, std::int64_t hi) {
        for (std::int64_t oc = lo; oc < hi; ++oc) {
            for (int ic = 0; ic < g.c; ++ic) {
                for (int ky = 0; ky < g.kh; ++ky) {
                    for (int kx = 0; kx < g.kw; ++kx) {
                        const int off = kx - g.pad;
                        int ow_lo = 0;
                        if (off < 0) ow_lo = (-off + g.stride - 1) / g.stride;
                        int ow_hi = g.ow;
                        if (off + (g.ow - 1) * g.stride >= g.w) {
                            ow_hi = (g.w - 1 - off) / g.stride + 1;
                        }
                        double acc = 0.0;
                        for (int in = 0; in < g.n; ++in) {
                            const float* dyim =
                                dy.data() + (static_cast<std::int64_t>(in) * g.oc + oc) * g.oh * g.ow;
                            const float* xim =
                                x.data() + (static_cast<std::int64_t>(in) * g.c + ic) * g.h * g.w;
                            for (int oh = 0; oh < g.oh; ++oh) {
                                const int ih = oh * g.stride - g.pad + ky;
                                if (ih < 0 || ih >= g.h) continue;
                                const float* dyrow = dyim + static_cast<std::int64_t>(oh) * g.ow;
                                const float* xrow = xim + static_cast<std::int64_t>(ih) * g.w;
                                float part = 0.0f;
                                if (g.stride == 1) {
                                    const float* xq = xrow + off;
                                    for (int ow = ow_lo; ow < ow_hi; ++ow) {
                                        part += dyrow[ow] * xq[ow];
                                    }
                                } else {
                                    for (int ow = ow_lo; ow < ow_hi; ++ow) {
                                        part += dyrow[ow] * xrow[ow * g.stride + off];
                                    }
                                }
                                acc += part;
                            }
                        }
                        const auto slot = static_cast<std::size_t>(
                            ((oc * g.c + ic) * g.kh + ky) * g.kw + kx);
                        if (accumulate) {
                            dw[slot] += static_cast<float>(acc);
                        } else {
                            dw[slot] = static_cast<float>(acc);
                        }
                    }
                }
            }
        }
    });
}

void matmul(const float* a, const float* b, float* out, int m, int k, int n,
            bool transpose_a, bool transpose_b, bool accumulate) {
    if (!accumulate) {
        std::fill(out, out + static_cast<std::int64_t>(m) * n, 0.0f);
    }
    for (int i = 0; i < m; ++i) {
        float* orow = out + static_cast<std::int64_t>(i) * n;
        for (int p = 0; p < k; ++p) {
            const float av = transpose_a ? a[static_cast<std::int64_t>(p) * m + i]
                                         : a[static_cast<std::int64_t>(i) * k + p];
            if (transpose_b) {
                for (int j = 0; j < n; ++j) {
                    orow[j] += av * b[static_cast<std::int64_t>(j) * k + p];
                }
            } else {
                const float* brow = b + static_cast<std::int64_t>(p) * n;
                for (int j = 0; j < n; ++j) {
                    orow[j] += av * brow[j];
                }
            }
        }
    }
}

PoolGeom pool_geom(const std::vector<int>& xshape, int kernel, int stride, const char* op) {
    if (xshape.size() != 4) {
        throw ShapeError(std::string(op) + ": expected 4-d input, got " + shape_to_string(xshape));
    }
    if (kernel < 1 || stride < 1 || kernel > xshape[2] || kernel > xshape[3]) {
        throw ShapeError(std::string(op) + ": window " + std::to_string(kernel) +
                         " does not fit input " + shape_to_string(xshape));
    }
    PoolGeom g{};
    g.n = xshape[0];
    g.c = xshape[1];
    g.h = xshape[2];
    g.w = xshape[3];
    g.kernel = kernel;
    g.stride = stride;
    g.oh = (g.h - kernel) / stride + 1;
    g.ow = (g.w - kernel) / stride + 1;
    return g;
}

void max_pool_forward(std::span<const float> x, std::span<float> out,
                      std::span<std::int64_t> argmax, const PoolGeom& g) {
    const auto planes = static_cast<std::int64_t>(g.n) * g.c;
    for (std::int64_t p = 0; p < planes; ++p) {
        const float* xim = x.data() + p * g.h * g.w;
        float* oim = out.data() + p * g.oh * g.ow;
        std::int64_t* aim = argmax.data() + p * g.oh * g.ow;
        for (int oh = 0; oh < g.oh; ++oh) {
            for (int ow = 0; ow < g.ow; ++ow) {
                float best = -std::numeric_limits<float>::infinity();
                std::int64_t best_idx = -1;
                for (int ky = 0; ky < g.kernel; ++ky) {
                    const int ih = oh * g.stride + ky;
                    for (int kx = 0; kx < g.kernel; ++kx) {
                        const int iw = ow * g.stride + kx;
                        const std::int64_t idx = static_cast<std::int64_t>(ih) * g.w + iw;
                        if (xim[idx] > best) {
                            best = xim[idx];
                            best_idx = idx;
                        }
                    }
                }
                oim[static_cast<std::int64_t>(oh) * g.ow + ow] = best;
                aim[static_cast<std::int64_t>(oh) * g.ow + ow] = p * g.h * g.w + best_idx;
            }
        }
    }
}

void mean_pool_forward(std::span<const float> x, std::span<float> out, const PoolGeom& g) {
    const auto planes = static_cast<std::int64_t>(g.n) * g.c;
    const float inv = 1.0f / (static_cast<float>(g.kernel) * g.kernel);
    for (std::int64_t p = 0; p < planes; ++p) {
        const float* xim = x.data() + p * g.h * g.w;
        float* oim = out.data() + p * g.oh * g.ow;
        for (int oh = 0; oh < g.oh; ++oh) {
            for (int ow = 0; ow < g.ow; ++ow) {
                float acc = 0.0f;
                for (int ky = 0; ky < g.kernel; ++ky) {
                    const float* xrow = xim + static_cast<std::int64_t>(oh * g.stride + ky) * g.w;
                    for (int kx = 0; kx < g.kernel; ++kx) {
                        acc += xrow[ow * g.stride + kx];
                    }
                }
                oim[static_cast<std::int64_t>(oh) * g.ow + ow] = acc * inv;
            }
        }
    }
}

}  // namespace kernels
}  // namespace pixemb
