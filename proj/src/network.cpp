#include "pixemb/network.hpp"

#include <cmath>

#include "pixemb/kernels.hpp"

namespace pixemb {

Preset preset_from_string(const std::string& name) {
    if (name == "fp-first") return Preset::FpFirst;
    if (name == "wq-first") return Preset::WqFirst;
    if (name == "iwq-first") return Preset::IwqFirst;
    if (name == "pixemb-first") return Preset::PixembFirst;
    throw ValueError("unknown preset '" + name +
                     "' (expected fp-first, wq-first, iwq-first or pixemb-first)");
}

const char* preset_name(Preset preset) {
    switch (preset) {
        case Preset::FpFirst: return "fp-first";
        case Preset::WqFirst: return "wq-first";
        case Preset::IwqFirst: return "iwq-first";
        case Preset::PixembFirst: return "pixemb-first";
    }
    return "?";
}

EmbeddingTable ModelGraph::embedding_table() const {
    EmbeddingTable table;
    table.d = d;
    table.quant = act_q;
    table.weights = params.at("embed.table");
    return table;
}

namespace {

struct BlockSpec {
    int in_ch, out_ch, stride;
    bool projection() const { return stride != 1 || in_ch != out_ch; }
};

constexpr int kTrunkWidths[3] = {16, 32, 64};

std::vector<BlockSpec> trunk_blocks() {
    return {{16, 16, 1}, {16, 16, 1}, {16, 32, 2}, {32, 32, 1}, {32, 64, 2}, {64, 64, 1}};
}

Tensor he_normal(std::vector<int> shape, Rng& rng) {
    Tensor t = Tensor::zeros(std::move(shape));
    std::int64_t fan_in = 1;
    for (std::size_t i = 1; i < t.shape.size(); ++i) fan_in *= t.shape[i];
    const float stddev = std::sqrt(2.0f / static_cast<float>(fan_in));
    for (auto& v : *t.data) v = rng.normal(0.0f, stddev);
    return t;
}

// pixels/255 as NCHW float.
Tensor to_float01(const ImageBatch& batch) {
    Tensor t = Tensor::zeros({batch.n, batch.c, batch.h, batch.w});
    auto tv = t.values();
    const auto plane = static_cast<std::int64_t>(batch.h) * batch.w;
    for (int in = 0; in < batch.n; ++in) {
        for (int ih = 0; ih < batch.h; ++ih) {
            for (int iw = 0; iw < batch.w; ++iw) {
                for (int ic = 0; ic < batch.c; ++ic) {
                    const int v = batch.at(in, ih, iw, ic);
                    if (v < 0 || v > 255) {
                        throw ValueError("forward: pixel value " + std::to_string(v) +
                                         " outside 0..255");
                    }
                    tv[static_cast<std::size_t>(
                        (static_cast<std::int64_t>(in) * batch.c + ic) * plane +
                        static_cast<std::int64_t>(ih) * batch.w + iw)] =
                        static_cast<float>(v) / 255.0f;
                }
            }
        }
    }
    return t;
}

PackedAffine fold_bn(const Tensor& gamma, const Tensor& beta, const BnState& state, float eps) {
    PackedAffine a;
    const auto n = gamma.data->size();
    a.scale.resize(n);
    a.bias.resize(n);
    for (std::size_t c = 0; c < n; ++c) {
        const float g = (*gamma.data)[c] / std::sqrt(state.running_var[c] + eps);
        a.scale[c] = g;
        a.bias[c] = (*beta.data)[c] - g * state.running_mean[c];
    }
    return a;
}

void apply_affine(Tensor& x, const PackedAffine& a) {
    const int n = x.shape[0], c = x.shape[1];
    const auto plane = static_cast<std::int64_t>(x.shape[2]) * x.shape[3];
    auto xv = x.values();
    for (int in = 0; in < n; ++in) {
        for (int ic = 0; ic < c; ++ic) {
            const float s = a.scale[static_cast<std::size_t>(ic)];
            const float b = a.bias[static_cast<std::size_t>(ic)];
            float* p = xv.data() + (static_cast<std::int64_t>(in) * c + ic) * plane;
            for (std::int64_t i = 0; i < plane; ++i) p[i] = s * p[i] + b;
        }
    }
}

// Dense alpha_c * sign(w); forward-only twin of quantize_weight.
Tensor binarize_dense(const Tensor& w, bool per_channel) {
    const auto alphas = weight_alphas(w, per_channel);
    Tensor out = Tensor::zeros(w.shape);
    const std::int64_t out_ch = static_cast<std::int64_t>(alphas.size());
    const std::int64_t per = w.numel() / out_ch;
    const auto wv = w.values();
    auto ov = out.values();
    for (std::int64_t c = 0; c < out_ch; ++c) {
        const float a = alphas[static_cast<std::size_t>(c)];
        for (std::int64_t i = 0; i < per; ++i) {
            const auto k = static_cast<std::size_t>(c * per + i);
            ov[k] = wv[k] < 0.0f ? -a : a;
        }
    }
    return out;
}

BnState fresh_bn(int channels) {
    BnState s;
    s.running_mean.assign(static_cast<std::size_t>(channels), 0.0f);
    s.running_var.assign(static_cast<std::size_t>(channels), 1.0f);
    return s;
}

constexpr float kBnMomentum = 0.9f;
constexpr float kBnEps = 1e-5f;

}  // namespace

ModelGraph build_model(Preset preset, int d, int num_classes, const BuildOptions& opts) {
    if (num_classes < 2) {
        throw ValueError("build-model: need at least 2 classes");
    }
    if (preset == Preset::PixembFirst && d < 1) {
        throw ValueError("build-model: pixemb-first requires d >= 1");
    }
    ModelGraph m;
    m.preset = preset;
    m.d = preset == Preset::PixembFirst ? d : 0;
    m.num_classes = num_classes;
    m.input_h = opts.input_h;
    m.input_w = opts.input_w;
    m.quant_head = opts.quant_head;
    m.act_q = QuantConfig{};

    Rng rng(opts.seed ^ 0xa02bdbf7bb3c0a70ull);

    const int first_in = preset == Preset::PixembFirst ? 3 * m.d : 3;
    const int bits = m.act_q.activation_bits;

    // First block.
    switch (preset) {
        case Preset::PixembFirst: {
            LayerConfig embed;
            embed.kind = LayerKind::PixelEmbed;
            embed.d = m.d;
            embed.out_ch = 3 * m.d;
            embed.act_bits = bits;
            m.layers.push_back(embed);
            m.params["embed.table"] = make_embedding_table(m.d, m.act_q, rng).weights;
            break;
        }
        case Preset::IwqFirst: {
            LayerConfig q;
            q.kind = LayerKind::ActivationQuant;
            q.act_bits = bits;
            m.layers.push_back(q);
            break;
        }
        default: break;
    }
    LayerConfig conv1;
    conv1.kind = preset == Preset::FpFirst ? LayerKind::Conv : LayerKind::QuantConv;
    conv1.out_ch = kTrunkWidths[0];
    conv1.kernel = 3;
    conv1.stride = 1;
    conv1.pad = 1;
    conv1.act_bits = conv1.kind == LayerKind::QuantConv ? bits : 0;
    m.layers.push_back(conv1);
    m.params["first.conv.w"] = he_normal({kTrunkWidths[0], first_in, 3, 3}, rng);

    LayerConfig bn1;
    bn1.kind = LayerKind::BatchNorm;
    bn1.out_ch = kTrunkWidths[0];
    m.layers.push_back(bn1);
    m.params["first.bn.gamma"] = Tensor::full({kTrunkWidths[0]}, 1.0f);
    m.params["first.bn.beta"] = Tensor::zeros({kTrunkWidths[0]});
    m.bn["first.bn"] = fresh_bn(kTrunkWidths[0]);

    // Residual trunk.
    int idx = 0;
    for (const auto& spec : trunk_blocks()) {
        LayerConfig block;
        block.kind = LayerKind::ResidualBlock;
        block.out_ch = spec.out_ch;
        block.kernel = 3;
        block.stride = spec.stride;
        block.pad = 1;
        block.act_bits = bits;
        m.layers.push_back(block);
        const std::string p = "block" + std::to_string(idx);
        m.params[p + ".conv1.w"] = he_normal({spec.out_ch, spec.in_ch, 3, 3}, rng);
        m.params[p + ".bn1.gamma"] = Tensor::full({spec.out_ch}, 1.0f);
        m.params[p + ".bn1.beta"] = Tensor::zeros({spec.out_ch});
        m.bn[p + ".bn1"] = fresh_bn(spec.out_ch);
        m.params[p + ".conv2.w"] = he_normal({spec.out_ch, spec.out_ch, 3, 3}, rng);
        m.params[p + ".bn2.gamma"] = Tensor::full({spec.out_ch}, 1.0f);
        m.params[p + ".bn2.beta"] = Tensor::zeros({spec.out_ch});
        m.bn[p + ".bn2"] = fresh_bn(spec.out_ch);
        if (spec.projection()) {
            m.params[p + ".proj.w"] = he_normal({spec.out_ch, spec.in_ch, 1, 1}, rng);
            m.params[p + ".proj_bn.gamma"] = Tensor::full({spec.out_ch}, 1.0f);
            m.params[p + ".proj_bn.beta"] = Tensor::zeros({spec.out_ch});
            m.bn[p + ".proj_bn"] = fresh_bn(spec.out_ch);
        }
        ++idx;
    }

    LayerConfig pool;
    pool.kind = LayerKind::Pool;
    pool.out_ch = kTrunkWidths[2];
    m.layers.push_back(pool);

    if (m.quant_head) {
        LayerConfig hq;
        hq.kind = LayerKind::ActivationQuant;
        hq.act_bits = bits;
        m.layers.push_back(hq);
    }
    LayerConfig fc;
    fc.kind = LayerKind::Fc;
    fc.out_ch = num_classes;
    fc.kernel = 1;
    fc.act_bits = m.quant_head ? bits : 0;
    fc.per_channel_alpha = false;  // uniform scale keeps integer logit order
    m.layers.push_back(fc);
    m.params["head.w"] = he_normal({num_classes, kTrunkWidths[2], 1, 1}, rng);

    LayerConfig head;
    head.kind = LayerKind::ArgmaxHead;
    head.out_ch = num_classes;
    m.layers.push_back(head);

    // Static shape check from (input_h, input_w, 3) down to the class count.
    if (opts.input_h < 8 || opts.input_w < 8) {
        // Two stride-2 stages need at least 2x2 spatial left for pooling.
        if (opts.input_h < 4 || opts.input_w < 4) {
            throw ShapeError("build-model: input " + std::to_string(opts.input_h) + "x" +
                             std::to_string(opts.input_w) + " too small for the 6-block trunk");
        }
    }
    return m;
}

namespace {

struct TrainCtx {
    ModelGraph& m;
    Tape& tape;

    Tensor qconv(const Tensor& x, const std::string& w_name, int stride, int pad,
                 bool quant_weights, bool per_channel = true) {
        Tensor w = m.params.at(w_name);
        if (!quant_weights) {
            return tape.conv2d(x, w, stride, pad);
        }
        WeightQuant wq = quantize_weight(tape, w, per_channel);
        return tape.conv2d(x, wq.y, stride, pad);
    }

    Tensor bn(const Tensor& x, const std::string& name) {
        return tape.batch_norm(x, m.params.at(name + ".gamma"), m.params.at(name + ".beta"),
                               m.bn.at(name), kBnMomentum, kBnEps);
    }
};

}  // namespace

static ForwardResult forward_train(ModelGraph& m, const ImageBatch& batch) {
    auto tape = std::make_shared<Tape>();
    for (auto& [name, param] : m.params) {
        tape->leaf(param);
    }
    TrainCtx ctx{m, *tape};

    Tensor x;
    switch (m.preset) {
        case Preset::PixembFirst:
            x = embed_train(*tape, batch, m.embedding_table());
            break;
        case Preset::IwqFirst:
            x = quantize_activation(*tape, to_float01(batch), m.act_q);
            break;
        default:
            x = to_float01(batch);
            break;
    }
    x = ctx.qconv(x, "first.conv.w", 1, 1, m.preset != Preset::FpFirst);
    x = ctx.bn(x, "first.bn");

    // Float residual stream; activations are quantized where they enter a
    // binary conv, so every conv consumes 2-bit codes while gradients keep a
    // full-precision highway.
    int idx = 0;
    for (const auto& spec : trunk_blocks()) {
        const std::string p = "block" + std::to_string(idx);
        Tensor q1 = quantize_activation(*tape, x, m.act_q);
        Tensor main = ctx.qconv(q1, p + ".conv1.w", spec.stride, 1, true);
        main = ctx.bn(main, p + ".bn1");
        main = quantize_activation(*tape, main, m.act_q);
        main = ctx.qconv(main, p + ".conv2.w", 1, 1, true);
        main = ctx.bn(main, p + ".bn2");
        Tensor skip = x;
        if (spec.projection()) {
            skip = ctx.qconv(q1, p + ".proj.w", spec.stride, 0, true);
            skip = ctx.bn(skip, p + ".proj_bn");
        }
        x = tape->add(main, skip);
        ++idx;
    }

    x = tape->mean_pool(x, x.shape[2], 1);
    if (m.quant_head) {
        x = quantize_activation(*tape, x, m.act_q);
        x = ctx.qconv(x, "head.w", 1, 0, true, /*per_channel=*/false);
    } else {
        x = ctx.qconv(x, "head.w", 1, 0, false);
    }
    Tensor logits = tape->reshape(x, {batch.n, m.num_classes});

    ForwardResult result;
    result.logits = logits;
    result.tape = std::move(tape);
    return result;
}

static Tensor conv_forward_plain(const Tensor& x, const Tensor& w, int stride, int pad) {
    const auto g = kernels::conv_geom(x.shape, w.shape, stride, pad, "conv2d");
    Tensor out = Tensor::zeros({g.n, g.oc, g.oh, g.ow});
    kernels::conv2d_forward(x.values(), w.values(), out.values(), g);
    return out;
}

static Tensor quantize_array(const Tensor& x, const QuantConfig& cfg) {
    Tensor out = Tensor::zeros(x.shape);
    quantize_activation_forward(x.values(), out.values(), cfg);
    return out;
}

static ForwardResult forward_infer_float(const ModelGraph& m, const ImageBatch& batch) {
    Tensor x;
    switch (m.preset) {
        case Preset::PixembFirst:
            x = embed_forward(batch, m.embedding_table());
            break;
        case Preset::IwqFirst:
            x = quantize_array(to_float01(batch), m.act_q);
            break;
        default:
            x = to_float01(batch);
            break;
    }
    auto bn_of = [&](const std::string& name) {
        return fold_bn(m.params.at(name + ".gamma"), m.params.at(name + ".beta"), m.bn.at(name),
                       kBnEps);
    };

    Tensor w1 = m.preset == Preset::FpFirst ? m.params.at("first.conv.w")
                                            : binarize_dense(m.params.at("first.conv.w"), true);
    x = conv_forward_plain(x, w1, 1, 1);
    apply_affine(x, bn_of("first.bn"));

    int idx = 0;
    for (const auto& spec : trunk_blocks()) {
        const std::string p = "block" + std::to_string(idx);
        Tensor q1 = quantize_array(x, m.act_q);
        Tensor main = conv_forward_plain(q1, binarize_dense(m.params.at(p + ".conv1.w"), true),
                                         spec.stride, 1);
        apply_affine(main, bn_of(p + ".bn1"));
        main = quantize_array(main, m.act_q);
        main = conv_forward_plain(main, binarize_dense(m.params.at(p + ".conv2.w"), true), 1, 1);
        apply_affine(main, bn_of(p + ".bn2"));
        Tensor skip = x;
        if (spec.projection()) {
            skip = conv_forward_plain(q1, binarize_dense(m.params.at(p + ".proj.w"), true),
                                      spec.stride, 0);
            apply_affine(skip, bn_of(p + ".proj_bn"));
        }
        auto mv = main.values();
        const auto sv = skip.values();
        for (std::size_t i = 0; i < mv.size(); ++i) mv[i] += sv[i];
        x = main;
        ++idx;
    }

    {
        const auto g = kernels::pool_geom(x.shape, x.shape[2], 1, "mean-pool");
        Tensor pooled = Tensor::zeros({g.n, g.c, g.oh, g.ow});
        kernels::mean_pool_forward(x.values(), pooled.values(), g);
        x = pooled;
    }
    if (m.quant_head) {
        x = quantize_array(x, m.act_q);
        x = conv_forward_plain(x, binarize_dense(m.params.at("head.w"), false), 1, 0);
    } else {
        x = conv_forward_plain(x, m.params.at("head.w"), 1, 0);
    }
    ForwardResult result;
    result.logits = Tensor::from({batch.n, m.num_classes},
                                 std::vector<float>(x.data->begin(), x.data->end()));
    return result;
}

PackedModel compile_packed(const ModelGraph& m) {
    PackedModel p;
    p.preset = m.preset;
    p.d = m.d;
    p.num_classes = m.num_classes;
    p.input_h = m.input_h;
    p.input_w = m.input_w;
    p.quant_head = m.quant_head;
    p.act_q = m.act_q;
    p.layers = m.layers;

    auto bn_of = [&](const std::string& name) {
        return fold_bn(m.params.at(name + ".gamma"), m.params.at(name + ".beta"), m.bn.at(name),
                       kBnEps);
    };

    switch (m.preset) {
        case Preset::PixembFirst:
            p.table = merge_table(m.embedding_table());
            p.first_conv = pack_weights(m.params.at("first.conv.w"), true);
            break;
        case Preset::IwqFirst:
            p.first_conv = pack_weights(m.params.at("first.conv.w"), true);
            break;
        case Preset::WqFirst:
            p.first_dense_w = binarize_dense(m.params.at("first.conv.w"), true);
            break;
        case Preset::FpFirst:
            // Stored as-is; the packed forward refuses to run this preset.
            p.first_dense_w = m.params.at("first.conv.w").clone();
            break;
    }
    p.first_bn = bn_of("first.bn");

    int idx = 0;
    for (const auto& spec : trunk_blocks()) {
        const std::string name = "block" + std::to_string(idx);
        PackedBlock block;
        block.stride = spec.stride;
        block.conv1 = pack_weights(m.params.at(name + ".conv1.w"), true);
        block.bn1 = bn_of(name + ".bn1");
        block.conv2 = pack_weights(m.params.at(name + ".conv2.w"), true);
        block.bn2 = bn_of(name + ".bn2");
        block.projection = spec.projection();
        if (block.projection) {
            block.proj = pack_weights(m.params.at(name + ".proj.w"), true);
            block.proj_bn = bn_of(name + ".proj_bn");
        }
        p.blocks.push_back(std::move(block));
        ++idx;
    }
    if (m.quant_head) {
        p.head = pack_weights(m.params.at("head.w"), false);
    } else {
        p.head_dense_w = m.params.at("head.w").clone();
    }
    return p;
}

ForwardResult forward_packed(const PackedModel& m, const ImageBatch& batch) {
    if (m.preset == Preset::FpFirst) {
        throw ValueError(
            "forward: infer-packed is unsupported for the fp-first preset's first layer");
    }
    QuantizedTensor q;
    Tensor x;  // float intermediates between packed convs

    auto requant = [&](Tensor& t) { return quantize_tensor(t, m.act_q); };

    switch (m.preset) {
        case Preset::PixembFirst: {
            q = embed_infer(batch, m.table);
            auto packed = pack_activations(q);
            auto acc = packed_conv2d(packed, m.first_conv, 1, 1);
            x = accum_to_float(acc, m.first_conv.alpha, q.scale);
            break;
        }
        case Preset::IwqFirst: {
            q.shape = {batch.n, 3, batch.h, batch.w};
            q.bits = m.act_q.activation_bits;
            q.scale = m.act_q.scale();
            q.zero_level = 0;
            q.codes.resize(static_cast<std::size_t>(q.numel()));
            const auto plane = static_cast<std::int64_t>(batch.h) * batch.w;
            for (int in = 0; in < batch.n; ++in) {
                for (int ih = 0; ih < batch.h; ++ih) {
                    for (int iw = 0; iw < batch.w; ++iw) {
                        for (int ic = 0; ic < 3; ++ic) {
                            const int v = batch.at(in, ih, iw, ic);
                            if (v < 0 || v > 255) {
                                throw ValueError("forward: pixel value " + std::to_string(v) +
                                                 " outside 0..255");
                            }
                            q.codes[static_cast<std::size_t>(
                                (static_cast<std::int64_t>(in) * 3 + ic) * plane +
                                static_cast<std::int64_t>(ih) * batch.w + iw)] =
                                static_cast<std::uint8_t>(
                                    quantize_code(static_cast<float>(v) / 255.0f, m.act_q));
                        }
                    }
                }
            }
            auto packed = pack_activations(q);
            auto acc = packed_conv2d(packed, m.first_conv, 1, 1);
            x = accum_to_float(acc, m.first_conv.alpha, q.scale);
            break;
        }
        case Preset::WqFirst:
            x = conv_forward_plain(to_float01(batch), m.first_dense_w, 1, 1);
            break;
        default: break;
    }
    apply_affine(x, m.first_bn);

    for (const auto& block : m.blocks) {
        QuantizedTensor q1 = requant(x);
        auto packed = pack_activations(q1);
        auto acc1 = packed_conv2d(packed, block.conv1, block.stride, 1);
        Tensor main = accum_to_float(acc1, block.conv1.alpha, q1.scale);
        apply_affine(main, block.bn1);
        QuantizedTensor q2 = requant(main);
        auto acc2 = packed_conv2d(pack_activations(q2), block.conv2, 1, 1);
        main = accum_to_float(acc2, block.conv2.alpha, q2.scale);
        apply_affine(main, block.bn2);
        Tensor skip;
        if (block.projection) {
            auto accs = packed_conv2d(packed, block.proj, block.stride, 0);
            skip = accum_to_float(accs, block.proj.alpha, q1.scale);
            apply_affine(skip, block.proj_bn);
        } else {
            skip = std::move(x);
        }
        auto mv = main.values();
        const auto sv = skip.values();
        for (std::size_t i = 0; i < mv.size(); ++i) mv[i] += sv[i];
        x = main;
    }

    Tensor pooled;
    {
        const auto g = kernels::pool_geom(x.shape, x.shape[2], 1, "mean-pool");
        pooled = Tensor::zeros({g.n, g.c, g.oh, g.ow});
        kernels::mean_pool_forward(x.values(), pooled.values(), g);
    }

    ForwardResult result;
    if (m.quant_head) {
        QuantizedTensor hq = quantize_tensor(pooled, m.act_q);
        auto acc = packed_conv2d(pack_activations(hq), m.head, 1, 0);
        result.int_logits = std::move(acc.acc);
        // Uniform head scale: float logits share the accumulator order.
        Tensor logits = Tensor::zeros({batch.n, m.num_classes});
        auto lv = logits.values();
        const float s = m.head.alpha[0] * hq.scale;
        for (std::size_t i = 0; i < lv.size(); ++i) {
            lv[i] = s * static_cast<float>(result.int_logits[i]);
        }
        result.logits = std::move(logits);
    } else {
        Tensor logits4 = conv_forward_plain(pooled, m.head_dense_w, 1, 0);
        result.logits = Tensor::from({batch.n, m.num_classes},
                                     std::vector<float>(logits4.data->begin(), logits4.data->end()));
    }
    return result;
}

ForwardResult forward(ModelGraph& model, const ImageBatch& batch, Mode mode) {
    switch (mode) {
        case Mode::Train: return forward_train(model, batch);
        case Mode::InferFloat: return forward_infer_float(model, batch);
        case Mode::InferPacked: return forward_packed(compile_packed(model), batch);
    }
    throw Error("forward: unknown mode");
}

std::vector<int> argmax_classes(const Tensor& logits) {
    const int n = logits.shape[0], k = logits.shape[1];
    std::vector<int> out(static_cast<std::size_t>(n));
    const auto lv = logits.values();
    for (int i = 0; i < n; ++i) {
        const float* row = lv.data() + static_cast<std::int64_t>(i) * k;
        int best = 0;
        for (int j = 1; j < k; ++j) {
            if (row[j] > row[best]) best = j;
        }
        out[static_cast<std::size_t>(i)] = best;
    }
    return out;
}

}  // namespace pixemb
