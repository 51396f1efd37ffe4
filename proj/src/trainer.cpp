#include "pixemb/trainer.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>

#include "pixemb/kernels.hpp"

namespace pixemb {

int TrainConfig::resolved_steps(std::int64_t train_size) const {
    if (total_steps > 0) return total_steps;
    const auto per_epoch = std::max<std::int64_t>(1, train_size / batch_size);
    return static_cast<int>(std::lround(epochs * static_cast<double>(per_epoch)));
}

void TrainConfig::validate(int total) const {
    if (batch_size < 1 || total < 1) {
        throw ValueError("train config: batch size and steps must be positive");
    }
    for (std::size_t i = 0; i < lr_decay_steps.size(); ++i) {
        if (lr_decay_steps[i] >= total || (i > 0 && lr_decay_steps[i] <= lr_decay_steps[i - 1])) {
            throw ValueError("train config: lr decay steps must be strictly increasing and below " +
                             std::to_string(total));
        }
    }
}

float lr_at(float base_lr, const std::vector<int>& decay_steps, float factor, int step) {
    float lr = base_lr;
    for (const int boundary : decay_steps) {
        if (step >= boundary) lr *= factor;
    }
    return lr;
}

std::string MetricLog::to_csv() const {
    std::string out = "step,loss,lr,top1,top5\n";
    char line[160];
    for (const auto& r : records) {
        if (r.has_top5) {
            std::snprintf(line, sizeof(line), "%d,%.6f,%.6g,%.6f,%.6f\n", r.step, r.loss, r.lr,
                          r.top1, r.top5);
        } else {
            std::snprintf(line, sizeof(line), "%d,%.6f,%.6g,%.6f,\n", r.step, r.loss, r.lr,
                          r.top1);
        }
        out += line;
    }
    return out;
}

ImageBatch hflip(const ImageBatch& batch) {
    ImageBatch out = batch;
    for (int in = 0; in < batch.n; ++in) {
        for (int y = 0; y < batch.h; ++y) {
            for (int x = 0; x < batch.w; ++x) {
                for (int c = 0; c < batch.c; ++c) {
                    out.at(in, y, x, c) = batch.at(in, y, batch.w - 1 - x, c);
                }
            }
        }
    }
    return out;
}

ImageBatch crop_padded(const ImageBatch& batch, int oy, int ox, int pad) {
    ImageBatch out = batch;
    for (int in = 0; in < batch.n; ++in) {
        for (int y = 0; y < batch.h; ++y) {
            const int sy = y + oy - pad;
            for (int x = 0; x < batch.w; ++x) {
                const int sx = x + ox - pad;
                const bool inside = sy >= 0 && sy < batch.h && sx >= 0 && sx < batch.w;
                for (int c = 0; c < batch.c; ++c) {
                    out.at(in, y, x, c) = inside ? batch.at(in, sy, sx, c) : 0;
                }
            }
        }
    }
    return out;
}

ImageBatch augment_batch(const ImageBatch& batch, Rng& rng) {
    constexpr int kPad = 4;
    ImageBatch out = batch;
    ImageBatch one;
    one.n = 1;
    one.h = batch.h;
    one.w = batch.w;
    one.c = batch.c;
    const auto stride = static_cast<std::size_t>(batch.h) * batch.w * batch.c;
    one.pixels.resize(stride);
    for (int in = 0; in < batch.n; ++in) {
        std::copy_n(batch.pixels.begin() + static_cast<std::size_t>(in) * stride, stride,
                    one.pixels.begin());
        ImageBatch img = crop_padded(one, rng.uniform_int(0, 2 * kPad),
                                     rng.uniform_int(0, 2 * kPad), kPad);
        if (rng.bernoulli(0.5)) img = hflip(img);
        std::copy_n(img.pixels.begin(), stride,
                    out.pixels.begin() + static_cast<std::size_t>(in) * stride);
    }
    return out;
}

namespace {

EvalResult accuracy_accumulate(const Tensor& logits, const std::vector<int>& labels,
                               std::int64_t* correct1, std::int64_t* correct5) {
    const int n = logits.shape[0], k = logits.shape[1];
    const auto preds = argmax_classes(logits);
    const auto lv = logits.values();
    for (int i = 0; i < n; ++i) {
        const int label = labels[static_cast<std::size_t>(i)];
        if (preds[static_cast<std::size_t>(i)] == label) ++*correct1;
        if (k >= 5) {
            // Rank of the true class under the tie rule: entries strictly
            // greater, plus equal entries at lower index, come first.
            const float* row = lv.data() + static_cast<std::int64_t>(i) * k;
            int before = 0;
            for (int j = 0; j < k; ++j) {
                if (row[j] > row[label] || (row[j] == row[label] && j < label)) ++before;
            }
            if (before < 5) ++*correct5;
        }
    }
    return {};
}

template <typename ForwardFn>
EvalResult evaluate_impl(const Dataset& data, int num_classes, int batch_size, ForwardFn&& fn) {
    std::int64_t correct1 = 0, correct5 = 0;
    std::int64_t total = data.size();
    std::vector<int> indices;
    for (std::int64_t start = 0; start < total; start += batch_size) {
        const auto count = static_cast<int>(std::min<std::int64_t>(batch_size, total - start));
        indices.resize(static_cast<std::size_t>(count));
        for (int i = 0; i < count; ++i) indices[static_cast<std::size_t>(i)] = static_cast<int>(start) + i;
        const ImageBatch batch = data.batch(indices);
        const auto labels = data.batch_labels(indices);
        const Tensor logits = fn(batch);
        accuracy_accumulate(logits, labels, &correct1, &correct5);
    }
    EvalResult r;
    r.top1 = static_cast<double>(correct1) / static_cast<double>(total);
    r.has_top5 = num_classes >= 5;
    if (r.has_top5) r.top5 = static_cast<double>(correct5) / static_cast<double>(total);
    return r;
}

}  // namespace

EvalResult evaluate(const ModelGraph& model, const Dataset& data, EvalPath path, int batch_size) {
    if (path == EvalPath::Packed) {
        return evaluate_packed(compile_packed(model), data, batch_size);
    }
    auto& m = const_cast<ModelGraph&>(model);  // InferFloat does not mutate parameters
    return evaluate_impl(data, model.num_classes, batch_size, [&](const ImageBatch& batch) {
        return forward(m, batch, Mode::InferFloat).logits;
    });
}

EvalResult evaluate_packed(const PackedModel& model, const Dataset& data, int batch_size) {
    return evaluate_impl(data, model.num_classes, batch_size, [&](const ImageBatch& batch) {
        return forward_packed(model, batch).logits;
    });
}

MetricLog train(ModelGraph& model, const Dataset& train_data, const Dataset& val_data,
                const TrainConfig& cfg) {
    if (train_data.size() < 1) {
        throw ValueError("train: empty dataset");
    }
    const int total = cfg.resolved_steps(train_data.size());
    cfg.validate(total);
    std::vector<int> decay_steps = cfg.lr_decay_steps;
    if (decay_steps.empty() && total >= 4) {
        decay_steps = {total / 2, (3 * total) / 4};
    }
    int eval_every = cfg.eval_every > 0 ? cfg.eval_every : std::max(1, total / 18);
    set_num_threads(cfg.threads);

    Rng shuffle_rng(cfg.seed ^ 0x7f4a7c15ull);
    Rng augment_rng(cfg.seed ^ 0x2545f491ull);

    // Momentum buffers in param-name order.
    std::vector<std::string> names;
    for (const auto& [name, t] : model.params) names.push_back(name);
    std::map<std::string, std::vector<float>> velocity;
    for (const auto& name : names) {
        velocity[name].assign(model.params.at(name).data->size(), 0.0f);
    }
    auto decays = [&](const std::string& name) {
        // No decay on the embedding table or batch-norm parameters.
        return name.find("embed.") == std::string::npos &&
               name.find(".gamma") == std::string::npos &&
               name.find(".beta") == std::string::npos;
    };

    std::vector<int> order(static_cast<std::size_t>(train_data.size()));
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = static_cast<int>(i);
    std::size_t cursor = order.size();  // forces shuffle at step 0

    MetricLog log;
    const bool pixemb = model.preset == Preset::PixembFirst;
    std::vector<int> batch_idx(static_cast<std::size_t>(cfg.batch_size));

    for (int step = 0; step < total; ++step) {
        for (int i = 0; i < cfg.batch_size; ++i) {
            if (cursor >= order.size()) {
                shuffle_rng.shuffle(order);
                cursor = 0;
            }
            batch_idx[static_cast<std::size_t>(i)] = order[cursor++];
        }
        ImageBatch batch = train_data.batch(batch_idx);
        if (cfg.augment) batch = augment_batch(batch, augment_rng);
        const auto labels = train_data.batch_labels(batch_idx);

        auto fwd = forward(model, batch, Mode::Train);
        Tensor loss = fwd.tape->softmax_cross_entropy(fwd.logits, labels);
        const float loss_value = loss.at(0);
        if (!std::isfinite(loss_value)) {
            throw Error("train: loss diverged (non-finite) at step " + std::to_string(step));
        }
        fwd.tape->backward(loss);

        const float lr = lr_at(cfg.base_lr, decay_steps, cfg.lr_decay_factor, step);
        for (const auto& name : names) {
            Tensor& param = model.params.at(name);
            const auto g = fwd.tape->grad(param.grad_id);
            auto& vel = velocity.at(name);
            auto pv = param.values();
            const float wd = decays(name) ? cfg.weight_decay : 0.0f;
            for (std::size_t i = 0; i < pv.size(); ++i) {
                const float grad = g[i] + wd * pv[i];
                vel[i] = cfg.momentum * vel[i] + grad;
                pv[i] -= lr * vel[i];
            }
        }
        if (pixemb) {
            auto tv = model.params.at("embed.table").values();
            for (auto& v : tv) {
                v = std::min(model.act_q.range_hi, std::max(model.act_q.range_lo, v));
            }
        }

        if ((step + 1) % eval_every == 0 || step + 1 == total) {
            MetricRecord rec;
            rec.step = step + 1;
            rec.loss = loss_value;
            rec.lr = lr;
            const auto ev = val_data.size() > 0
                                ? evaluate(model, val_data, EvalPath::Float, cfg.eval_batch)
                                : EvalResult{};
            rec.top1 = ev.top1;
            rec.top5 = ev.top5;
            rec.has_top5 = ev.has_top5;
            log.records.push_back(rec);
        }
    }
    return log;
}

}  // namespace pixemb
