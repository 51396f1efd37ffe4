#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "json.hpp"
#include "pixemb/bench.hpp"
#include "pixemb/bitpack.hpp"
#include "pixemb/dataset.hpp"
#include "pixemb/kernels.hpp"
#include "pixemb/model_io.hpp"
#include "pixemb/trainer.hpp"

namespace fs = std::filesystem;
using json = nlohmann::json;
using namespace pixemb;

namespace {

int env_threads_default() {
    if (const char* env = std::getenv("PIXEMB_THREADS")) {
        const int v = std::atoi(env);
        if (v > 0) return v;
    }
    return 1;
}

void write_text(const std::string& path, const std::string& text) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw ValueError("cannot open " + path + " for writing");
    out << text;
}

// Manifests capture every effective option; re-running a command with
// --config <manifest> reproduces the run.
void write_manifest(const std::string& dir, const std::string& command, const json& options) {
    json manifest;
    manifest["command"] = command;
    manifest["options"] = options;
    write_text(dir + "/manifest.json", manifest.dump(2) + "\n");
}

json load_config_options(const std::string& path, const std::string& command) {
    std::ifstream in(path);
    if (!in) throw ValueError("cannot open config " + path);
    json j = json::parse(in);
    if (j.contains("options")) {
        if (j.contains("command") && j["command"] != command) {
            throw ValueError("config " + path + " is a manifest for '" +
                             j["command"].get<std::string>() + "', not '" + command + "'");
        }
        return j["options"];
    }
    return j;
}

Dataset load_dataset_arg(const std::string& data) {
    // "synthetic[:count[:seed]]" generates the builtin set; anything else is
    // a CIFAR binary file or directory.
    if (data.rfind("synthetic", 0) == 0) {
        int count = 5000;
        std::uint64_t seed = 0;
        std::string rest = data.substr(9);
        if (!rest.empty() && rest[0] == ':') {
            rest = rest.substr(1);
            const auto colon = rest.find(':');
            count = std::stoi(rest.substr(0, colon));
            if (colon != std::string::npos) seed = std::stoull(rest.substr(colon + 1));
        }
        return make_synthetic(count, seed);
    }
    return load_cifar_dir(data);
}

struct TrainArgs {
    std::string preset = "pixemb-first";
    std::string data;
    std::string out = "runs/out";
    std::uint64_t seed = 1;
    int steps = 0;
    float epochs = 3.0f;
    int d = 8;
    int batch_size = 64;
    float lr = 0.1f;
    float momentum = 0.9f;
    float weight_decay = 5e-4f;
    std::vector<int> decay_steps;
    float decay_factor = 0.1f;
    int eval_every = 0;
    int threads = env_threads_default();
    int train_per_class = 0;  // 0: use the whole set minus val
    int val_per_class = 100;
    bool no_augment = false;
    bool float_head = false;

    json to_json() const {
        return json{{"preset", preset},
                    {"data", data},
                    {"out", out},
                    {"seed", seed},
                    {"steps", steps},
                    {"epochs", epochs},
                    {"d", d},
                    {"batch_size", batch_size},
                    {"lr", lr},
                    {"momentum", momentum},
                    {"weight_decay", weight_decay},
                    {"decay_steps", decay_steps},
                    {"decay_factor", decay_factor},
                    {"eval_every", eval_every},
                    {"threads", threads},
                    {"train_per_class", train_per_class},
                    {"val_per_class", val_per_class},
                    {"no_augment", no_augment},
                    {"float_head", float_head}};
    }
    void from_json(const json& j) {
        preset = j.value("preset", preset);
        data = j.value("data", data);
        out = j.value("out", out);
        seed = j.value("seed", seed);
        steps = j.value("steps", steps);
        epochs = j.value("epochs", epochs);
        d = j.value("d", d);
        batch_size = j.value("batch_size", batch_size);
        lr = j.value("lr", lr);
        momentum = j.value("momentum", momentum);
        weight_decay = j.value("weight_decay", weight_decay);
        decay_steps = j.value("decay_steps", decay_steps);
        decay_factor = j.value("decay_factor", decay_factor);
        eval_every = j.value("eval_every", eval_every);
        threads = j.value("threads", threads);
        train_per_class = j.value("train_per_class", train_per_class);
        val_per_class = j.value("val_per_class", val_per_class);
        no_augment = j.value("no_augment", no_augment);
        float_head = j.value("float_head", float_head);
    }
};

int cmd_train(const TrainArgs& args) {
    const Preset preset = preset_from_string(args.preset);
    if (args.data.empty()) throw ValueError("train: --data is required");
    const Dataset full = load_dataset_arg(args.data);
    Dataset train_data, val_data;
    if (args.val_per_class > 0) {
        const int per_class_total =
            static_cast<int>(full.size() / std::max(1, full.num_classes));
        const int train_pc = args.train_per_class > 0 ? args.train_per_class
                                                      : per_class_total - args.val_per_class;
        auto [tr, va] = full.split_per_class(train_pc, args.val_per_class);
        train_data = std::move(tr);
        val_data = std::move(va);
    } else {
        train_data = full;
    }

    BuildOptions opts;
    opts.seed = args.seed;
    opts.quant_head = !args.float_head;
    opts.input_h = train_data.h;
    opts.input_w = train_data.w;
    ModelGraph model = build_model(preset, args.d, train_data.num_classes, opts);

    TrainConfig cfg;
    cfg.batch_size = args.batch_size;
    cfg.base_lr = args.lr;
    cfg.momentum = args.momentum;
    cfg.weight_decay = args.weight_decay;
    cfg.total_steps = args.steps;
    cfg.epochs = args.epochs;
    cfg.lr_decay_steps = args.decay_steps;
    cfg.lr_decay_factor = args.decay_factor;
    cfg.seed = args.seed;
    cfg.eval_every = args.eval_every;
    cfg.augment = !args.no_augment;
    cfg.threads = args.threads;

    fs::create_directories(args.out);
    const MetricLog log = train(model, train_data, val_data, cfg);
    write_text(args.out + "/metrics.csv", log.to_csv());

    const auto train_bytes = save_checkpoint(model);
    write_file(args.out + "/checkpoint.pxeb", train_bytes);
    const auto packed = compile_packed(model);
    const auto infer_bytes = save_checkpoint(packed);
    write_file(args.out + "/infer.pxeb", infer_bytes);
    write_manifest(args.out, "train", args.to_json());

    std::cout << "trained " << args.preset << " for "
              << cfg.resolved_steps(train_data.size()) << " steps\n";
    if (!log.records.empty()) {
        const auto& last = log.records.back();
        std::cout << "final: loss " << last.loss << ", top1 " << last.top1;
        if (last.has_top5) std::cout << ", top5 " << last.top5;
        std::cout << "\n";
    }
    // First-layer storage accounting: float weights vs merged table + signs.
    if (preset == Preset::PixembFirst) {
        const auto& w = model.params.at("first.conv.w");
        const std::size_t float_bytes = (3 * 9 * 16 + static_cast<std::size_t>(0)) * 4;
        const std::size_t packed_bytes =
            merged_payload(packed.table).size() +
            packed.first_conv.sign.size() * 8 + packed.first_conv.alpha.size() * 4;
        std::cout << "first-layer storage: float-baseline " << float_bytes
                  << " B vs table+packed " << packed_bytes << " B (conv "
                  << shape_to_string(w.shape) << ")\n";
    }
    std::cout << "checkpoint: " << args.out << "/checkpoint.pxeb (" << train_bytes.size()
              << " B), infer: " << args.out << "/infer.pxeb (" << infer_bytes.size() << " B)\n";
    return 0;
}

struct EvalArgs {
    std::string checkpoint;
    std::string data;
    std::string path = "float";
    std::string out;
    int threads = env_threads_default();
    int val_per_class = 0;  // 0: evaluate on the whole set

    json to_json() const {
        return json{{"checkpoint", checkpoint}, {"data", data},       {"path", path},
                    {"out", out},               {"threads", threads}, {"val_per_class", val_per_class}};
    }
};

int cmd_eval(const EvalArgs& args) {
    set_num_threads(args.threads);
    const auto ck = load_checkpoint(read_binary_file(args.checkpoint));
    Dataset data = load_dataset_arg(args.data);
    if (args.val_per_class > 0) {
        const int per_class_total =
            static_cast<int>(data.size() / std::max(1, data.num_classes));
        data = data.split_per_class(per_class_total - args.val_per_class, args.val_per_class)
                   .second;
    }
    EvalResult result;
    std::string preset;
    if (args.path == "float") {
        if (ck.mode != kModeTrain) {
            throw ValueError("eval: the float path needs a train-mode checkpoint");
        }
        result = evaluate(*ck.model, data, EvalPath::Float);
        preset = preset_name(ck.model->preset);
    } else if (args.path == "packed") {
        if (ck.mode == kModeInfer) {
            result = evaluate_packed(*ck.packed, data);
            preset = preset_name(ck.packed->preset);
        } else {
            result = evaluate(*ck.model, data, EvalPath::Packed);
            preset = preset_name(ck.model->preset);
        }
    } else {
        throw ValueError("eval: --path must be float or packed");
    }
    char row[160];
    if (result.has_top5) {
        std::snprintf(row, sizeof(row), "%s,%s,%.6f,%.6f\n", preset.c_str(), args.path.c_str(),
                      result.top1, result.top5);
    } else {
        std::snprintf(row, sizeof(row), "%s,%s,%.6f,\n", preset.c_str(), args.path.c_str(),
                      result.top1);
    }
    std::cout << "preset,path,top1,top5\n" << row;
    if (!args.out.empty()) {
        fs::create_directories(fs::path(args.out).parent_path().string().empty()
                                   ? "."
                                   : fs::path(args.out).parent_path().string());
        write_text(args.out, std::string("preset,path,top1,top5\n") + row);
        write_manifest(fs::path(args.out).parent_path().string().empty()
                           ? "."
                           : fs::path(args.out).parent_path().string(),
                       "eval", args.to_json());
    }
    return 0;
}

struct BenchArgs {
    std::vector<std::string> checkpoints;
    std::string data;
    std::string image;  // single-image file: cifar record(s); first image used
    int repeats = 20;
    bool first_layer_only = false;
    std::string out;
    int threads = env_threads_default();

    json to_json() const {
        return json{{"checkpoints", checkpoints},
                    {"data", data},
                    {"image", image},
                    {"repeats", repeats},
                    {"first_layer_only", first_layer_only},
                    {"out", out},
                    {"threads", threads}};
    }
};

ImageBatch bench_image(const BenchArgs& args) {
    Dataset data;
    if (!args.image.empty()) {
        data = load_cifar_file(args.image);
    } else if (!args.data.empty()) {
        data = load_dataset_arg(args.data);
    } else {
        data = make_synthetic(1, 7);
    }
    const std::vector<int> idx = {0};
    return data.batch(idx);
}

int cmd_bench(const BenchArgs& args) {
    set_num_threads(args.threads);
    const ImageBatch image = bench_image(args);
    std::vector<BenchMethod> methods;
    // Keep loaded models alive for the duration of the runs.
    std::vector<std::shared_ptr<void>> keep;

    for (const auto& path : args.checkpoints) {
        const auto ck = load_checkpoint(read_binary_file(path));
        if (ck.mode == kModeInfer) {
            auto packed = std::make_shared<PackedModel>(*ck.packed);
            keep.push_back(packed);
            const std::string name =
                std::string(preset_name(packed->preset)) + "-packed";
            if (args.first_layer_only) {
                if (packed->preset == Preset::PixembFirst) {
                    methods.push_back({name + "-first-layer", [packed, image] {
                                           auto q = embed_infer(image, packed->table);
                                           auto acc = packed_conv2d(pack_activations(q),
                                                                    packed->first_conv, 1, 1);
                                           (void)acc;
                                       }});
                } else if (packed->preset == Preset::IwqFirst) {
                    methods.push_back({name + "-first-layer", [packed, image] {
                                           auto fwd = forward_packed(*packed, image);
                                           (void)fwd;  // no cheap first-layer cut for iwq
                                       }});
                } else {
                    throw ValueError("bench: --first-layer-only needs pixemb or fp checkpoints");
                }
            } else {
                methods.push_back({name, [packed, image] {
                                       auto fwd = forward_packed(*packed, image);
                                       (void)fwd;
                                   }});
            }
        } else {
            auto model = std::make_shared<ModelGraph>(*ck.model);
            keep.push_back(model);
            const std::string name = std::string(preset_name(model->preset)) + "-float";
            if (args.first_layer_only) {
                // Rescale to [0,1] is preprocessing: done outside the timer.
                auto x = std::make_shared<Tensor>(Tensor::zeros({1, 3, image.h, image.w}));
                {
                    auto xv = x->values();
                    const auto plane = static_cast<std::int64_t>(image.h) * image.w;
                    for (int ih = 0; ih < image.h; ++ih)
                        for (int iw = 0; iw < image.w; ++iw)
                            for (int ic = 0; ic < 3; ++ic)
                                xv[static_cast<std::size_t>(ic * plane + ih * image.w + iw)] =
                                    static_cast<float>(image.at(0, ih, iw, ic)) / 255.0f;
                }
                keep.push_back(x);
                methods.push_back({name + "-first-layer", [model, x] {
                                       Tape tape;
                                       Tensor y =
                                           tape.conv2d(*x, model->params.at("first.conv.w"), 1, 1);
                                       (void)y;
                                   }});
            } else {
                methods.push_back({name, [model, image] {
                                       auto fwd = forward(*model, image, Mode::InferFloat);
                                       (void)fwd;
                                   }});
            }
        }
    }
    if (methods.empty()) throw ValueError("bench: no checkpoints given");
    const BenchReport report = run_bench(methods, args.repeats);
    std::cout << "# " << report.machine << ", threads=" << report.threads << "\n"
              << report.to_csv();
    if (!args.out.empty()) {
        write_text(args.out, report.to_csv());
        const auto dir = fs::path(args.out).parent_path().string();
        write_manifest(dir.empty() ? "." : dir, "bench", args.to_json());
    }
    return 0;
}

int cmd_inspect_table(const std::string& checkpoint_path) {
    const auto ck = load_checkpoint(read_binary_file(checkpoint_path));
    MergedTable table;
    if (ck.mode == kModeInfer) {
        if (ck.packed->preset != Preset::PixembFirst) {
            throw ValueError("inspect-table: checkpoint has no embedding table");
        }
        table = ck.packed->table;
    } else {
        if (ck.model->preset != Preset::PixembFirst) {
            throw ValueError("inspect-table: checkpoint has no embedding table");
        }
        table = merge_table(ck.model->embedding_table());
    }
    // One d-digit string per pixel value, base 2^Q, most significant
    // dimension first.
    for (int p = 0; p < kPixelValues; ++p) {
        std::string digits;
        const auto entry = table.entry(p);
        for (int j = 0; j < table.d; ++j) {
            digits += static_cast<char>('0' + entry[static_cast<std::size_t>(j)]);
        }
        std::printf("%3d -> %s\n", p, digits.c_str());
    }
    return 0;
}

struct GenArgs {
    std::string out = "data/synth";
    int count = 5000;
    int test_count = 0;
    std::uint64_t seed = 0;

    json to_json() const {
        return json{
            {"out", out}, {"count", count}, {"test_count", test_count}, {"seed", seed}};
    }
};

int cmd_gen_data(const GenArgs& args) {
    fs::create_directories(args.out);
    const auto data = make_synthetic(args.count, args.seed);
    write_cifar_file(data, args.out + "/data_batch_1.bin");
    if (args.test_count > 0) {
        const auto test = make_synthetic(args.test_count, args.seed + 1);
        write_cifar_file(test, args.out + "/test_batch.bin");
    }
    write_manifest(args.out, "gen-data", args.to_json());
    std::cout << "wrote " << args.count << " images to " << args.out << "\n";
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"pixel-embedding quantized classifier toolkit"};
    app.require_subcommand(1);

    TrainArgs train_args;
    // --config seeds the defaults before flag parsing, so explicit flags win.
    for (int i = 1; i + 1 < argc; ++i) {
        if (std::string(argv[i]) == "--config" && std::string(argv[1]) == "train") {
            try {
                train_args.from_json(load_config_options(argv[i + 1], "train"));
            } catch (const std::exception& e) {
                std::cerr << "error: " << e.what() << "\n";
                return 1;
            }
        }
    }
    std::string train_config;
    auto* train_cmd = app.add_subcommand("train", "train a preset on a dataset");
    train_cmd->add_option("--config", train_config, "JSON config or manifest to start from");
    train_cmd->add_option("--preset", train_args.preset,
                          "fp-first | wq-first | iwq-first | pixemb-first");
    train_cmd->add_option("--data", train_args.data,
                          "CIFAR binary dir/file, or synthetic[:count[:seed]]");
    train_cmd->add_option("--out", train_args.out, "output directory");
    train_cmd->add_option("--seed", train_args.seed, "rng seed");
    train_cmd->add_option("--steps", train_args.steps, "step count (0: epochs-based)");
    train_cmd->add_option("--epochs", train_args.epochs, "epoch budget when --steps 0");
    train_cmd->add_option("--d", train_args.d, "embedding dimension");
    train_cmd->add_option("--batch-size", train_args.batch_size, "batch size");
    train_cmd->add_option("--lr", train_args.lr, "base learning rate");
    train_cmd->add_option("--momentum", train_args.momentum, "sgd momentum");
    train_cmd->add_option("--weight-decay", train_args.weight_decay, "weight decay");
    train_cmd->add_option("--decay-steps", train_args.decay_steps,
                          "lr decay boundaries (default 50%/75%)");
    train_cmd->add_option("--decay-factor", train_args.decay_factor, "lr decay factor");
    train_cmd->add_option("--eval-every", train_args.eval_every, "eval interval in steps");
    train_cmd->add_option("--threads", train_args.threads, "kernel threads");
    train_cmd->add_option("--train-per-class", train_args.train_per_class,
                          "train images per class (0: rest)");
    train_cmd->add_option("--val-per-class", train_args.val_per_class,
                          "held-out images per class");
    train_cmd->add_flag("--no-augment", train_args.no_augment, "disable augmentation");
    train_cmd->add_flag("--float-head", train_args.float_head, "keep the last layer float");

    EvalArgs eval_args;
    auto* eval_cmd = app.add_subcommand("eval", "evaluate a checkpoint");
    eval_cmd->add_option("--checkpoint", eval_args.checkpoint, "checkpoint file")->required();
    eval_cmd->add_option("--data", eval_args.data, "dataset")->required();
    eval_cmd->add_option("--path", eval_args.path, "float | packed");
    eval_cmd->add_option("--out", eval_args.out, "CSV output path");
    eval_cmd->add_option("--threads", eval_args.threads, "kernel threads");
    eval_cmd->add_option("--val-per-class", eval_args.val_per_class,
                         "evaluate only the held-out split of this size");

    BenchArgs bench_args;
    auto* bench_cmd = app.add_subcommand("bench", "timing comparison across checkpoints");
    bench_cmd->add_option("--checkpoint", bench_args.checkpoints, "checkpoint file (repeatable)")
        ->required();
    bench_cmd->add_option("--data", bench_args.data, "dataset for the probe image");
    bench_cmd->add_option("--image", bench_args.image, "single-image CIFAR record file");
    bench_cmd->add_option("--repeats", bench_args.repeats, "timed repetitions per method");
    bench_cmd->add_flag("--first-layer-only", bench_args.first_layer_only,
                        "time only the first layer");
    bench_cmd->add_option("--out", bench_args.out, "CSV output path");
    bench_cmd->add_option("--threads", bench_args.threads, "kernel threads");

    std::string inspect_checkpoint;
    auto* inspect_cmd = app.add_subcommand("inspect-table", "dump the embedding table codes");
    inspect_cmd->add_option("--checkpoint", inspect_checkpoint, "checkpoint file")->required();

    GenArgs gen_args;
    auto* gen_cmd = app.add_subcommand("gen-data", "write the synthetic dataset as CIFAR bins");
    gen_cmd->add_option("--out", gen_args.out, "output directory");
    gen_cmd->add_option("--n", gen_args.count, "image count");
    gen_cmd->add_option("--test-n", gen_args.test_count, "extra held-out file image count");
    gen_cmd->add_option("--seed", gen_args.seed, "generator seed");

    CLI11_PARSE(app, argc, argv);

    try {
        if (train_cmd->parsed()) return cmd_train(train_args);
        if (eval_cmd->parsed()) return cmd_eval(eval_args);
        if (bench_cmd->parsed()) return cmd_bench(bench_args);
        if (inspect_cmd->parsed()) return cmd_inspect_table(inspect_checkpoint);
        if (gen_cmd->parsed()) return cmd_gen_data(gen_args);
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
    return 0;
}
