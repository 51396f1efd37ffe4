#include "pixemb/tape.hpp"

#include <algorithm>
#include <cmath>

#include <atomic>

#include "pixemb/kernels.hpp"

namespace pixemb {

std::int64_t Tape::next_serial() {
    static std::atomic<std::int64_t> counter{0};
    return counter.fetch_add(1);
}

namespace {

Tensor make_value(std::vector<int> shape) {
    return Tensor::zeros(std::move(shape));
}

void check_same_shape(const char* op, const Tensor& a, const Tensor& b) {
    if (!same_shape(a, b)) {
        throw ShapeError(std::string(op) + ": incompatible shapes " + shape_to_string(a.shape) +
                         " and " + shape_to_string(b.shape));
    }
}

std::vector<std::int64_t> row_major_strides(const std::vector<int>& shape) {
    std::vector<std::int64_t> strides(shape.size(), 1);
    for (int i = static_cast<int>(shape.size()) - 2; i >= 0; --i) {
        strides[static_cast<std::size_t>(i)] =
            strides[static_cast<std::size_t>(i) + 1] * shape[static_cast<std::size_t>(i) + 1];
    }
    return strides;
}

// dst[i0,i1,...] = src at the permuted index; dst shape is src shape permuted
// by axes.
void permute_copy(const float* src, const std::vector<int>& src_shape,
                  const std::vector<int>& axes, float* dst) {
    const auto rank = src_shape.size();
    std::vector<int> dst_shape(rank);
    for (std::size_t i = 0; i < rank; ++i) {
        dst_shape[i] = src_shape[static_cast<std::size_t>(axes[i])];
    }
    const auto src_strides = row_major_strides(src_shape);
    std::vector<std::int64_t> gather_strides(rank);
    for (std::size_t i = 0; i < rank; ++i) {
        gather_strides[i] = src_strides[static_cast<std::size_t>(axes[i])];
    }
    std::int64_t total = 1;
    for (int e : dst_shape) total *= e;
    std::vector<int> idx(rank, 0);
    for (std::int64_t flat = 0; flat < total; ++flat) {
        std::int64_t src_off = 0;
        for (std::size_t i = 0; i < rank; ++i) {
            src_off += gather_strides[i] * idx[i];
        }
        dst[flat] = src[src_off];
        for (int i = static_cast<int>(rank) - 1; i >= 0; --i) {
            if (++idx[static_cast<std::size_t>(i)] < dst_shape[static_cast<std::size_t>(i)]) break;
            idx[static_cast<std::size_t>(i)] = 0;
        }
    }
}

void accumulate(std::span<float> dst, std::span<const float> src) {
    for (std::size_t i = 0; i < dst.size(); ++i) dst[i] += src[i];
}

}  // namespace

int Tape::push(TapeNode node) {
    nodes_.push_back(std::move(node));
    return static_cast<int>(nodes_.size()) - 1;
}

int Tape::input_id(const Tensor& t) {
    // A live attachment needs both a node id and this tape's serial; a
    // tensor from an older tape is treated as a fresh constant.
    if (t.grad_id >= 0 && t.tape_serial == serial_) {
        if (static_cast<std::size_t>(t.grad_id) >= nodes_.size()) {
            throw Error("tensor grad_id does not belong to this tape");
        }
        return t.grad_id;
    }
    TapeNode node;
    node.kind = "leaf";
    node.shape = t.shape;
    node.value = t.data;
    return push(std::move(node));
}

int Tape::leaf(Tensor& t) {
    TapeNode node;
    node.kind = "leaf";
    node.shape = t.shape;
    node.value = t.data;
    t.grad_id = push(std::move(node));
    t.tape_serial = serial_;
    return t.grad_id;
}

Tensor Tape::custom(std::string kind, const std::vector<Tensor>& inputs, Tensor value,
                    std::function<void(Tape&, const TapeNode&, int)> backward) {
    TapeNode node;
    node.kind = std::move(kind);
    for (const auto& t : inputs) node.inputs.push_back(input_id(t));
    node.shape = value.shape;
    node.value = value.data;
    node.backward = std::move(backward);
    value.grad_id = push(std::move(node));
    value.tape_serial = serial_;
    return value;
}

Tensor Tape::matmul(const Tensor& a, const Tensor& b) {
    if (a.shape.size() != 2 || b.shape.size() != 2 || a.shape[1] != b.shape[0]) {
        throw ShapeError("matmul: incompatible shapes " + shape_to_string(a.shape) + " and " +
                         shape_to_string(b.shape));
    }
    const int m = a.shape[0], k = a.shape[1], n = b.shape[1];
    Tensor out = make_value({m, n});
    kernels::matmul(a.data->data(), b.data->data(), out.data->data(), m, k, n, false, false, false);
    auto a_data = a.data;
    auto b_data = b.data;
    return custom("matmul", {a, b}, std::move(out),
                  [m, k, n, a_data, b_data](Tape& tape, const TapeNode& node, int id) {
                      auto dy = tape.grad(id);
                      kernels::matmul(dy.data(), b_data->data(),
                                      tape.grad_buffer(node.inputs[0]).data(), m, n, k, false, true,
                                      true);
                      kernels::matmul(a_data->data(), dy.data(),
                                      tape.grad_buffer(node.inputs[1]).data(), k, m, n, true, false,
                                      true);
                  });
}

Tensor Tape::conv2d(const Tensor& x, const Tensor& w, int stride, int pad) {
    const auto g = kernels::conv_geom(x.shape, w.shape, stride, pad, "conv2d");
    Tensor out = make_value({g.n, g.oc, g.oh, g.ow});
    kernels::conv2d_forward(x.values(), w.values(), out.values(), g);
    auto x_data = x.data;
    auto w_data = w.data;
    return custom("conv2d", {x, w}, std::move(out),
                  [g, x_data, w_data](Tape& tape, const TapeNode& node, int id) {
                      auto dy = tape.grad(id);
                      kernels::conv2d_backward_input(dy, {w_data->data(), w_data->size()},
                                                     tape.grad_buffer(node.inputs[0]), g,
                                                     /*accumulate=*/true);
                      kernels::conv2d_backward_weight(dy, {x_data->data(), x_data->size()},
                                                      tape.grad_buffer(node.inputs[1]), g,
                                                      /*accumulate=*/true);
                  });
}

Tensor Tape::add(const Tensor& a, const Tensor& b) {
    check_same_shape("add", a, b);
    Tensor out = make_value(a.shape);
    const auto av = a.values();
    const auto bv = b.values();
    auto ov = out.values();
    for (std::size_t i = 0; i < ov.size(); ++i) ov[i] = av[i] + bv[i];
    return custom("add", {a, b}, std::move(out), [](Tape& tape, const TapeNode& node, int id) {
        auto dy = tape.grad(id);
        accumulate(tape.grad_buffer(node.inputs[0]), dy);
        accumulate(tape.grad_buffer(node.inputs[1]), dy);
    });
}

Tensor Tape::scale(const Tensor& x, float factor) {
    Tensor out = make_value(x.shape);
    const auto xv = x.values();
    auto ov = out.values();
    for (std::size_t i = 0; i < ov.size(); ++i) ov[i] = xv[i] * factor;
    return custom("mul-by-scalar", {x}, std::move(out),
                  [factor](Tape& tape, const TapeNode& node, int id) {
                      auto dy = tape.grad(id);
                      auto dst = tape.grad_buffer(node.inputs[0]);
                      for (std::size_t i = 0; i < dst.size(); ++i) dst[i] += dy[i] * factor;
                  });
}

Tensor Tape::relu(const Tensor& x) {
    Tensor out = make_value(x.shape);
    const auto xv = x.values();
    auto ov = out.values();
    for (std::size_t i = 0; i < ov.size(); ++i) ov[i] = xv[i] > 0.0f ? xv[i] : 0.0f;
    auto x_data = x.data;
    return custom("relu", {x}, std::move(out),
                  [x_data](Tape& tape, const TapeNode& node, int id) {
                      auto dy = tape.grad(id);
                      auto dst = tape.grad_buffer(node.inputs[0]);
                      const auto& xv = *x_data;
                      for (std::size_t i = 0; i < dst.size(); ++i) {
                          if (xv[i] > 0.0f) dst[i] += dy[i];
                      }
                  });
}

Tensor Tape::max_pool(const Tensor& x, int kernel, int stride) {
    const auto g = kernels::pool_geom(x.shape, kernel, stride, "max-pool");
    Tensor out = make_value({g.n, g.c, g.oh, g.ow});
    auto argmax = std::make_shared<std::vector<std::int64_t>>(
        static_cast<std::size_t>(out.numel()));
    kernels::max_pool_forward(x.values(), out.values(), {argmax->data(), argmax->size()}, g);
    return custom("max-pool", {x}, std::move(out),
                  [argmax](Tape& tape, const TapeNode& node, int id) {
                      auto dy = tape.grad(id);
                      auto dst = tape.grad_buffer(node.inputs[0]);
                      for (std::size_t i = 0; i < dy.size(); ++i) {
                          dst[static_cast<std::size_t>((*argmax)[i])] += dy[i];
                      }
                  });
}

Tensor Tape::mean_pool(const Tensor& x, int kernel, int stride) {
    const auto g = kernels::pool_geom(x.shape, kernel, stride, "mean-pool");
    Tensor out = make_value({g.n, g.c, g.oh, g.ow});
    kernels::mean_pool_forward(x.values(), out.values(), g);
    return custom("mean-pool", {x}, std::move(out),
                  [g](Tape& tape, const TapeNode& node, int id) {
                      auto dy = tape.grad(id);
                      auto dst = tape.grad_buffer(node.inputs[0]);
                      const float inv = 1.0f / (static_cast<float>(g.kernel) * g.kernel);
                      const auto planes = static_cast<std::int64_t>(g.n) * g.c;
                      for (std::int64_t p = 0; p < planes; ++p) {
                          const float* dyim = dy.data() + p * g.oh * g.ow;
                          float* dxim = dst.data() + p * g.h * g.w;
                          for (int oh = 0; oh < g.oh; ++oh) {
                              for (int ow = 0; ow < g.ow; ++ow) {
                                  const float v = dyim[static_cast<std::int64_t>(oh) * g.ow + ow] * inv;
                                  for (int ky = 0; ky < g.kernel; ++ky) {
                                      float* dxrow =
                                          dxim + static_cast<std::int64_t>(oh * g.stride + ky) * g.w;
                                      for (int kx = 0; kx < g.kernel; ++kx) {
                                          dxrow[ow * g.stride + kx] += v;
                                      }
                                  }
                              }
                          }
                      }
                  });
}

Tensor Tape::batch_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta,
                        BnState& state, float momentum, float eps) {
    if (x.shape.size() != 4) {
        throw ShapeError("batch-norm: expected 4-d input, got " + shape_to_string(x.shape));
    }
    const int channels = x.shape[1];
    if (gamma.numel() != channels || beta.numel() != channels) {
        throw ShapeError("batch-norm: parameter shape " + shape_to_string(gamma.shape) +
                         " does not match channel count of " + shape_to_string(x.shape));
    }
    if (static_cast<int>(state.running_mean.size()) != channels) {
        state.running_mean.assign(static_cast<std::size_t>(channels), 0.0f);
        state.running_var.assign(static_cast<std::size_t>(channels), 1.0f);
    }
    const int n = x.shape[0], h = x.shape[2], w = x.shape[3];
    const std::int64_t plane = static_cast<std::int64_t>(h) * w;
    const std::int64_t m = static_cast<std::int64_t>(n) * plane;

    auto xhat = std::make_shared<std::vector<float>>(x.data->size());
    auto invstd = std::make_shared<std::vector<float>>(static_cast<std::size_t>(channels));
    Tensor out = make_value(x.shape);
    const auto xv = x.values();
    auto ov = out.values();
    for (int c = 0; c < channels; ++c) {
        double sum = 0.0, sq = 0.0;
        for (int in = 0; in < n; ++in) {
            const float* xp = xv.data() + (static_cast<std::int64_t>(in) * channels + c) * plane;
            for (std::int64_t i = 0; i < plane; ++i) {
                sum += xp[i];
                sq += static_cast<double>(xp[i]) * xp[i];
            }
        }
        const float mean = static_cast<float>(sum / static_cast<double>(m));
        const float var = static_cast<float>(sq / static_cast<double>(m)) - mean * mean;
        const float istd = 1.0f / std::sqrt(var + eps);
        (*invstd)[static_cast<std::size_t>(c)] = istd;
        state.running_mean[static_cast<std::size_t>(c)] =
            momentum * state.running_mean[static_cast<std::size_t>(c)] + (1.0f - momentum) * mean;
        state.running_var[static_cast<std::size_t>(c)] =
            momentum * state.running_var[static_cast<std::size_t>(c)] + (1.0f - momentum) * var;
        const float gc = gamma.at(c), bc = beta.at(c);
        for (int in = 0; in < n; ++in) {
            const std::int64_t base = (static_cast<std::int64_t>(in) * channels + c) * plane;
            for (std::int64_t i = 0; i < plane; ++i) {
                const float xh = (xv[static_cast<std::size_t>(base + i)] - mean) * istd;
                (*xhat)[static_cast<std::size_t>(base + i)] = xh;
                ov[static_cast<std::size_t>(base + i)] = gc * xh + bc;
            }
        }
    }
    auto gamma_data = gamma.data;
    return custom(
        "batch-norm", {x, gamma, beta}, std::move(out),
        [xhat, invstd, gamma_data, channels, n, plane, m](Tape& tape, const TapeNode& node, int id) {
            auto dy = tape.grad(id);
            auto dx = tape.grad_buffer(node.inputs[0]);
            auto dgamma = tape.grad_buffer(node.inputs[1]);
            auto dbeta = tape.grad_buffer(node.inputs[2]);
            const float inv_m = 1.0f / static_cast<float>(m);
            for (int c = 0; c < channels; ++c) {
                double sum_dy = 0.0, sum_dy_xhat = 0.0;
                for (int in = 0; in < n; ++in) {
                    const std::int64_t base = (static_cast<std::int64_t>(in) * channels + c) * plane;
                    for (std::int64_t i = 0; i < plane; ++i) {
                        const auto k = static_cast<std::size_t>(base + i);
                        sum_dy += dy[k];
                        sum_dy_xhat += static_cast<double>(dy[k]) * (*xhat)[k];
                    }
                }
                dbeta[static_cast<std::size_t>(c)] += static_cast<float>(sum_dy);
                dgamma[static_cast<std::size_t>(c)] += static_cast<float>(sum_dy_xhat);
                const float gc = (*gamma_data)[static_cast<std::size_t>(c)];
                const float istd = (*invstd)[static_cast<std::size_t>(c)];
                const float mean_dy = static_cast<float>(sum_dy) * inv_m;
                const float mean_dy_xhat = static_cast<float>(sum_dy_xhat) * inv_m;
                for (int in = 0; in < n; ++in) {
                    const std::int64_t base = (static_cast<std::int64_t>(in) * channels + c) * plane;
                    for (std::int64_t i = 0; i < plane; ++i) {
                        const auto k = static_cast<std::size_t>(base + i);
                        dx[k] += gc * istd * (dy[k] - mean_dy - (*xhat)[k] * mean_dy_xhat);
                    }
                }
            }
        });
}

Tensor Tape::softmax_cross_entropy(const Tensor& logits, const std::vector<int>& labels) {
    if (logits.shape.size() != 2 || static_cast<std::size_t>(logits.shape[0]) != labels.size()) {
        throw ShapeError("softmax-cross-entropy: logits " + shape_to_string(logits.shape) +
                         " incompatible with " + std::to_string(labels.size()) + " labels");
    }
    const int n = logits.shape[0], k = logits.shape[1];
    for (int label : labels) {
        if (label < 0 || label >= k) {
            throw ValueError("softmax-cross-entropy: label " + std::to_string(label) +
                             " outside [0, " + std::to_string(k) + ")");
        }
    }
    auto probs = std::make_shared<std::vector<float>>(logits.data->size());
    const auto zv = logits.values();
    double total = 0.0;
    for (int i = 0; i < n; ++i) {
        const float* row = zv.data() + static_cast<std::int64_t>(i) * k;
        float* prow = probs->data() + static_cast<std::int64_t>(i) * k;
        float mx = row[0];
        for (int j = 1; j < k; ++j) mx = std::max(mx, row[j]);
        double denom = 0.0;
        for (int j = 0; j < k; ++j) {
            prow[j] = std::exp(row[j] - mx);
            denom += prow[j];
        }
        const auto inv = static_cast<float>(1.0 / denom);
        for (int j = 0; j < k; ++j) prow[j] *= inv;
        total += std::log(denom) - static_cast<double>(row[labels[static_cast<std::size_t>(i)]] - mx);
    }
    Tensor out = Tensor::from({1}, {static_cast<float>(total / n)});
    auto labels_copy = std::make_shared<std::vector<int>>(labels);
    return custom("softmax-cross-entropy", {logits}, std::move(out),
                  [probs, labels_copy, n, k](Tape& tape, const TapeNode& node, int id) {
                      auto dy = tape.grad(id);
                      auto dst = tape.grad_buffer(node.inputs[0]);
                      const float scale = dy[0] / static_cast<float>(n);
                      for (int i = 0; i < n; ++i) {
                          const std::int64_t base = static_cast<std::int64_t>(i) * k;
                          for (int j = 0; j < k; ++j) {
                              const auto idx = static_cast<std::size_t>(base + j);
                              float g = (*probs)[idx];
                              if (j == (*labels_copy)[static_cast<std::size_t>(i)]) g -= 1.0f;
                              dst[idx] += scale * g;
                          }
                      }
                  });
}

Tensor Tape::gather_columns(const Tensor& matrix, const std::vector<int>& indices) {
    if (matrix.shape.size() != 2) {
        throw ShapeError("gather-columns: expected a matrix, got " + shape_to_string(matrix.shape));
    }
    const int d = matrix.shape[0], n = matrix.shape[1];
    const auto m = static_cast<int>(indices.size());
    for (int idx : indices) {
        if (idx < 0 || idx >= n) {
            throw IndexError("gather-columns: index " + std::to_string(idx) + " outside [0, " +
                             std::to_string(n) + ")");
        }
    }
    Tensor out = make_value({d, m});
    const auto ev = matrix.values();
    auto ov = out.values();
    for (int j = 0; j < d; ++j) {
        const float* erow = ev.data() + static_cast<std::int64_t>(j) * n;
        float* orow = ov.data() + static_cast<std::int64_t>(j) * m;
        for (int i = 0; i < m; ++i) orow[i] = erow[indices[static_cast<std::size_t>(i)]];
    }
    auto idx_copy = std::make_shared<std::vector<int>>(indices);
    return custom("gather-columns", {matrix}, std::move(out),
                  [idx_copy, d, n, m](Tape& tape, const TapeNode& node, int id) {
                      auto dy = tape.grad(id);
                      auto dst = tape.grad_buffer(node.inputs[0]);
                      for (int j = 0; j < d; ++j) {
                          const float* grow = dy.data() + static_cast<std::int64_t>(j) * m;
                          float* drow = dst.data() + static_cast<std::int64_t>(j) * n;
                          for (int i = 0; i < m; ++i) {
                              drow[(*idx_copy)[static_cast<std::size_t>(i)]] += grow[i];
                          }
                      }
                  });
}

Tensor Tape::reshape(const Tensor& x, std::vector<int> shape) {
    std::int64_t numel = 1;
    for (int e : shape) numel *= e;
    if (numel != x.numel()) {
        throw ShapeError("reshape: cannot view " + shape_to_string(x.shape) + " as " +
                         shape_to_string(shape));
    }
    Tensor out;
    out.shape = std::move(shape);
    out.data = x.data;  // same storage; ops never mutate their inputs
    return custom("reshape", {x}, std::move(out),
                  [](Tape& tape, const TapeNode& node, int id) {
                      accumulate(tape.grad_buffer(node.inputs[0]), tape.grad(id));
                  });
}

Tensor Tape::permute(const Tensor& x, const std::vector<int>& axes) {
    const auto rank = x.shape.size();
    if (axes.size() != rank) {
        throw ShapeError("permute: axes rank " + std::to_string(axes.size()) +
                         " does not match input " + shape_to_string(x.shape));
    }
    std::vector<bool> seen(rank, false);
    for (int a : axes) {
        if (a < 0 || static_cast<std::size_t>(a) >= rank || seen[static_cast<std::size_t>(a)]) {
            throw ShapeError("permute: invalid axis order for " + shape_to_string(x.shape));
        }
        seen[static_cast<std::size_t>(a)] = true;
    }
    std::vector<int> out_shape(rank);
    for (std::size_t i = 0; i < rank; ++i) {
        out_shape[i] = x.shape[static_cast<std::size_t>(axes[i])];
    }
    Tensor out = make_value(out_shape);
    permute_copy(x.data->data(), x.shape, axes, out.data->data());
    auto src_shape = x.shape;
    auto axes_copy = axes;
    return custom("permute", {x}, std::move(out),
                  [src_shape, axes_copy, out_shape](Tape& tape, const TapeNode& node, int id) {
                      // The gradient flows through the inverse permutation.
                      std::vector<int> inverse(axes_copy.size());
                      for (std::size_t i = 0; i < axes_copy.size(); ++i) {
                          inverse[static_cast<std::size_t>(axes_copy[i])] = static_cast<int>(i);
                      }
                      auto dy = tape.grad(id);
                      std::vector<float> dx(dy.size());
                      permute_copy(dy.data(), out_shape, inverse, dx.data());
                      accumulate(tape.grad_buffer(node.inputs[0]), {dx.data(), dx.size()});
                  });
}

void Tape::backward(const Tensor& loss) {
    if (backward_done_) {
        throw Error("backward: tape is single-use and backward has already run");
    }
    if (loss.grad_id < 0 || static_cast<std::size_t>(loss.grad_id) >= nodes_.size()) {
        throw Error("backward: loss was not produced on this tape");
    }
    if (loss.numel() != 1) {
        throw Error("backward: loss must be a scalar, got shape " + shape_to_string(loss.shape));
    }
    backward_done_ = true;
    grads_.resize(nodes_.size());
    grad_buffer(loss.grad_id)[0] = 1.0f;
    for (int id = static_cast<int>(nodes_.size()) - 1; id >= 0; --id) {
        const auto& node = nodes_[static_cast<std::size_t>(id)];
        if (!node.backward) continue;
        if (grads_[static_cast<std::size_t>(id)].empty()) continue;  // unreachable from loss
        node.backward(*this, node, id);
    }
}

std::span<const float> Tape::grad(int node_id) {
    return grad_buffer(node_id);
}

std::span<float> Tape::grad_buffer(int node_id) {
    if (node_id < 0 || static_cast<std::size_t>(node_id) >= nodes_.size()) {
        throw Error("grad: unknown node id " + std::to_string(node_id));
    }
    grads_.resize(nodes_.size());
    auto& buf = grads_[static_cast<std::size_t>(node_id)];
    if (buf.empty()) {
        buf.assign(nodes_[static_cast<std::size_t>(node_id)].value->size(), 0.0f);
    }
    return {buf.data(), buf.size()};
}

}  // namespace pixemb
