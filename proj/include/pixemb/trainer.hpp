#pragma once

#include <optional>
#include <string>
#include <vector>

#include "pixemb/dataset.hpp"
#include "pixemb/network.hpp"

namespace pixemb {

struct TrainConfig {
    int batch_size = 64;
    float base_lr = 0.1f;
    float momentum = 0.9f;
    float weight_decay = 5e-4f;
    int total_steps = 0;                // 0: derive from epochs
    float epochs = 3.0f;                // used when total_steps == 0
    std::vector<int> lr_decay_steps;    // empty: 50% and 75% of total
    float lr_decay_factor = 0.1f;
    std::uint64_t seed = 1;
    int eval_every = 0;                 // 0: ~18 eval points
    int eval_batch = 256;
    bool augment = true;
    int threads = 1;

    int resolved_steps(std::int64_t train_size) const;
    void validate(int total) const;
};

struct MetricRecord {
    int step = 0;
    float loss = 0.0f;
    float lr = 0.0f;
    double top1 = 0.0;
    double top5 = 0.0;
    bool has_top5 = false;
};

struct MetricLog {
    std::vector<MetricRecord> records;
    std::string to_csv() const;  // step,loss,lr,top1,top5
};

// Piecewise-constant schedule: base_lr * factor^(boundaries passed).
float lr_at(float base_lr, const std::vector<int>& decay_steps, float factor, int step);

// Horizontal mirror.
ImageBatch hflip(const ImageBatch& batch);
// Crop a batch.h x batch.w window at (oy, ox) out of the zero-padded image;
// offset (pad, pad) reproduces the input.
ImageBatch crop_padded(const ImageBatch& batch, int oy, int ox, int pad);
// Pad 4 zeros per side, random crop, horizontal flip with p=0.5, one draw
// sequence per image from the seeded stream.
ImageBatch augment_batch(const ImageBatch& batch, Rng& rng);

struct EvalResult {
    double top1 = 0.0;
    double top5 = 0.0;
    bool has_top5 = false;
};

enum class EvalPath { Float, Packed };

EvalResult evaluate(const ModelGraph& model, const Dataset& data, EvalPath path,
                    int batch_size = 256);
EvalResult evaluate_packed(const PackedModel& model, const Dataset& data, int batch_size = 256);

// SGD with momentum; weight decay skips the embedding table and batch-norm
// parameters; the table is clamped to the quantizer range after each step.
// Deterministic for a fixed seed. Throws on divergence (non-finite loss),
// naming the step.
MetricLog train(ModelGraph& model, const Dataset& train_data, const Dataset& val_data,
                const TrainConfig& cfg);

}  // namespace pixemb
