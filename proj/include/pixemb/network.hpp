#pragma once

#include <map>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "pixemb/bitpack.hpp"
#include "pixemb/embedding.hpp"
#include "pixemb/quantize.hpp"
#include "pixemb/tape.hpp"

namespace pixemb {

// First-layer treatments compared in the experiments. The trunk behind the
// first block is identical for all four.
enum class Preset { FpFirst, WqFirst, IwqFirst, PixembFirst };

Preset preset_from_string(const std::string& name);
const char* preset_name(Preset preset);

enum class LayerKind : std::uint8_t {
    Conv = 0,
    QuantConv = 1,
    PixelEmbed = 2,
    BatchNorm = 3,
    ActivationQuant = 4,
    Relu = 5,
    Pool = 6,
    Fc = 7,
    ResidualBlock = 8,
    ArgmaxHead = 9,
};

struct LayerConfig {
    LayerKind kind = LayerKind::Conv;
    int out_ch = 0;
    int kernel = 0;
    int stride = 1;
    int pad = 0;
    int d = 0;                      // pixel-embed only
    int act_bits = 0;               // quantizer bitwidth where applicable
    bool per_channel_alpha = true;  // weight-scale granularity

    bool operator==(const LayerConfig&) const = default;
};

struct BuildOptions {
    std::uint64_t seed = 0;
    int input_h = 32;
    int input_w = 32;
    // CIFAR-style setting quantizes the last layer; turning this off mirrors
    // the ImageNet-style float last layer.
    bool quant_head = true;
};

struct ModelGraph {
    Preset preset = Preset::PixembFirst;
    int d = 0;
    int num_classes = 0;
    int input_h = 32, input_w = 32;
    bool quant_head = true;
    QuantConfig act_q;  // 2-bit activations over [0, 1]

    std::vector<LayerConfig> layers;
    std::map<std::string, Tensor> params;
    std::map<std::string, BnState> bn;

    EmbeddingTable embedding_table() const;
};

// Residual trunk: 3 stages x 2 blocks at widths 16/32/64 behind a
// preset-specific first block; quantized conv everywhere else.
ModelGraph build_model(Preset preset, int d, int num_classes, const BuildOptions& opts = {});

enum class Mode { Train, InferFloat, InferPacked };

struct ForwardResult {
    Tensor logits;
    std::shared_ptr<Tape> tape;             // train mode only
    std::vector<std::int32_t> int_logits;   // packed quantized head only
};

// Inference-compiled model: merged embedding table, packed weights, and
// batch-norm folded into per-channel affines.
struct PackedAffine {
    std::vector<float> scale;
    std::vector<float> bias;
};

struct PackedBlock {
    PackedWeights conv1, conv2;
    PackedAffine bn1, bn2;
    int stride = 1;
    bool projection = false;
    PackedWeights proj;
    PackedAffine proj_bn;
};

struct PackedModel {
    Preset preset = Preset::PixembFirst;
    int d = 0;
    int num_classes = 0;
    int input_h = 32, input_w = 32;
    bool quant_head = true;
    QuantConfig act_q;

    MergedTable table;        // pixemb-first
    Tensor first_dense_w;     // fp-first (float) or wq-first (binarized dense)
    PackedWeights first_conv; // iwq-first / pixemb-first
    PackedAffine first_bn;
    std::vector<PackedBlock> blocks;
    PackedWeights head;       // quantized head as a 1x1 packed conv
    Tensor head_dense_w;      // float head variant
    std::vector<LayerConfig> layers;
};

PackedModel compile_packed(const ModelGraph& model);

ForwardResult forward(ModelGraph& model, const ImageBatch& batch, Mode mode);
ForwardResult forward_packed(const PackedModel& model, const ImageBatch& batch);

// Lowest index wins ties.
std::vector<int> argmax_classes(const Tensor& logits);

}  // namespace pixemb
