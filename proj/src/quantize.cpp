#include "pixemb/quantize.hpp"

#include <algorithm>
#include <cmath>

namespace pixemb {

void QuantConfig::validate() const {
    if (activation_bits < 1 || activation_bits > 8) {
        throw ValueError("QuantConfig: activation_bits must be in [1, 8], got " +
                         std::to_string(activation_bits));
    }
    if (weight_bits != 1) {
        throw ValueError("QuantConfig: only 1-bit weights are supported, got " +
                         std::to_string(weight_bits));
    }
    if (!(range_lo < range_hi)) {
        throw ValueError("QuantConfig: empty activation range");
    }
}

int quantize_code(float x, const QuantConfig& cfg) {
    const float lo = cfg.range_lo, hi = cfg.range_hi;
    const auto lvl = static_cast<float>(cfg.levels());
    const float clamped = std::min(std::max(x, lo), hi);
    const float t = (clamped - lo) / (hi - lo);
    int code = static_cast<int>(std::round(t * lvl));
    if (code < 0) code = 0;
    if (code > cfg.levels()) code = cfg.levels();
    return code;
}

float code_to_value(int code, const QuantConfig& cfg) {
    return cfg.range_lo + static_cast<float>(code) * cfg.scale();
}

float quantize_value(float x, const QuantConfig& cfg) {
    return code_to_value(quantize_code(x, cfg), cfg);
}

void quantize_activation_forward(std::span<const float> x, std::span<float> out,
                                 const QuantConfig& cfg) {
    for (std::size_t i = 0; i < x.size(); ++i) out[i] = quantize_value(x[i], cfg);
}

QuantizedTensor quantize_tensor(const Tensor& x, const QuantConfig& cfg) {
    cfg.validate();
    QuantizedTensor q;
    q.shape = x.shape;
    q.bits = cfg.activation_bits;
    q.scale = cfg.scale();
    q.zero_level = static_cast<int>(std::round(-cfg.range_lo / cfg.scale()));
    q.codes.resize(static_cast<std::size_t>(x.numel()));
    const auto xv = x.values();
    for (std::size_t i = 0; i < q.codes.size(); ++i) {
        q.codes[i] = static_cast<std::uint8_t>(quantize_code(xv[i], cfg));
    }
    return q;
}

Tensor dequantize(const QuantizedTensor& q) {
    Tensor t = Tensor::zeros(q.shape);
    auto tv = t.values();
    for (std::size_t i = 0; i < q.codes.size(); ++i) tv[i] = q.dequant(q.codes[i]);
    return t;
}

Tensor quantize_activation(Tape& tape, const Tensor& x, const QuantConfig& cfg) {
    cfg.validate();
    Tensor out = Tensor::zeros(x.shape);
    quantize_activation_forward(x.values(), out.values(), cfg);
    auto x_data = x.data;
    const float lo = cfg.range_lo, hi = cfg.range_hi;
    return tape.custom("quantize-activation", {x}, std::move(out),
                       [x_data, lo, hi](Tape& t, const TapeNode& node, int id) {
                           auto dy = t.grad(id);
                           auto dst = t.grad_buffer(node.inputs[0]);
                           const auto& xv = *x_data;
                           for (std::size_t i = 0; i < dst.size(); ++i) {
                               if (xv[i] >= lo && xv[i] <= hi) dst[i] += dy[i];
                           }
                       });
}

std::vector<float> ste_backward(std::span<const float> upstream, std::span<const float> input,
                                std::optional<std::pair<float, float>> clip_range) {
    if (upstream.size() != input.size()) {
        throw ShapeError("ste-backward: gradient length " + std::to_string(upstream.size()) +
                         " does not match input length " + std::to_string(input.size()));
    }
    std::vector<float> out(upstream.begin(), upstream.end());
    if (clip_range) {
        const float lo = clip_range->first, hi = clip_range->second;
        for (std::size_t i = 0; i < out.size(); ++i) {
            if (input[i] < lo || input[i] > hi) out[i] = 0.0f;
        }
    }
    return out;
}

namespace {

// Channels are slices along axis 0; per_channel=false treats the whole
// tensor as one channel.
std::vector<float> alphas_impl(const Tensor& w, bool per_channel, std::int64_t* zero_channels) {
    if (w.shape.empty()) {
        throw ShapeError("quantize-weight: scalar input " + shape_to_string(w.shape));
    }
    const std::int64_t out_ch = per_channel ? w.shape[0] : 1;
    const std::int64_t per = w.numel() / out_ch;
    std::vector<float> alpha(static_cast<std::size_t>(out_ch));
    const auto wv = w.values();
    for (std::int64_t c = 0; c < out_ch; ++c) {
        double acc = 0.0;
        for (std::int64_t i = 0; i < per; ++i) {
            acc += std::fabs(wv[static_cast<std::size_t>(c * per + i)]);
        }
        const auto a = static_cast<float>(acc / static_cast<double>(per));
        alpha[static_cast<std::size_t>(c)] = a;
        if (a == 0.0f && zero_channels) ++*zero_channels;
    }
    return alpha;
}

}  // namespace

std::vector<float> weight_alphas(const Tensor& w, bool per_channel) {
    std::int64_t zeros = 0;
    auto alpha = alphas_impl(w, per_channel, &zeros);
    if (zeros > 0) {
        warn("quantize-weight: " + std::to_string(zeros) +
             " all-zero output channel(s); scale set to 0");
    }
    return alpha;
}

WeightQuant quantize_weight(Tape& tape, const Tensor& w, bool per_channel) {
    WeightQuant result;
    result.alpha = weight_alphas(w, per_channel);
    const std::int64_t out_ch = static_cast<std::int64_t>(result.alpha.size());
    const std::int64_t per = w.numel() / out_ch;
    Tensor out = Tensor::zeros(w.shape);
    const auto wv = w.values();
    auto ov = out.values();
    for (std::int64_t c = 0; c < out_ch; ++c) {
        const float a = result.alpha[static_cast<std::size_t>(c)];
        for (std::int64_t i = 0; i < per; ++i) {
            const auto k = static_cast<std::size_t>(c * per + i);
            ov[k] = wv[k] < 0.0f ? -a : a;  // sign(0) = +1
        }
    }
    auto alpha = result.alpha;
    result.y = tape.custom("quantize-weight", {w}, std::move(out),
                           [alpha, per](Tape& t, const TapeNode& node, int id) {
                               auto dy = t.grad(id);
                               auto dst = t.grad_buffer(node.inputs[0]);
                               for (std::size_t i = 0; i < dst.size(); ++i) {
                                   const auto c = static_cast<std::size_t>(
                                       static_cast<std::int64_t>(i) / per);
                                   dst[i] += dy[i] * alpha[c];
                               }
                           });
    return result;
}

}  // namespace pixemb
