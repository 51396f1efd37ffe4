#include "pixemb/model_io.hpp"

#include <cstring>
#include <fstream>

namespace pixemb {

namespace {

class Writer {
public:
    void u8(std::uint8_t v) { bytes_.push_back(v); }
    void u16(std::uint16_t v) {
        u8(static_cast<std::uint8_t>(v & 0xff));
        u8(static_cast<std::uint8_t>(v >> 8));
    }
    void u32(std::uint32_t v) {
        u16(static_cast<std::uint16_t>(v & 0xffff));
        u16(static_cast<std::uint16_t>(v >> 16));
    }
    void u64(std::uint64_t v) {
        u32(static_cast<std::uint32_t>(v & 0xffffffffu));
        u32(static_cast<std::uint32_t>(v >> 32));
    }
    void f32(float v) {
        std::uint32_t bits;
        std::memcpy(&bits, &v, 4);
        u32(bits);
    }
    void i32(std::int32_t v) { u32(static_cast<std::uint32_t>(v)); }
    void str(const std::string& s) {
        u16(static_cast<std::uint16_t>(s.size()));
        bytes_.insert(bytes_.end(), s.begin(), s.end());
    }
    void raw(std::span<const std::uint8_t> data) {
        bytes_.insert(bytes_.end(), data.begin(), data.end());
    }
    void floats(std::span<const float> data) {
        for (float v : data) f32(v);
    }
    void words(std::span<const std::uint64_t> data) {
        for (auto v : data) u64(v);
    }
    std::vector<std::uint8_t> take() { return std::move(bytes_); }

private:
    std::vector<std::uint8_t> bytes_;
};

class Reader {
public:
    explicit Reader(std::span<const std::uint8_t> bytes) : bytes_(bytes) {}

    std::size_t offset() const { return offset_; }
    bool done() const { return offset_ == bytes_.size(); }

    void need(std::size_t n, const char* what) {
        if (offset_ + n > bytes_.size()) {
            throw ParseError(std::string("checkpoint truncated while reading ") + what, offset_);
        }
    }
    std::uint8_t u8(const char* what) {
        need(1, what);
        return bytes_[offset_++];
    }
    std::uint16_t u16(const char* what) {
        need(2, what);
        const std::uint16_t v = static_cast<std::uint16_t>(bytes_[offset_]) |
                                static_cast<std::uint16_t>(bytes_[offset_ + 1]) << 8;
        offset_ += 2;
        return v;
    }
    std::uint32_t u32(const char* what) {
        need(4, what);
        std::uint32_t v = 0;
        for (int i = 3; i >= 0; --i) v = (v << 8) | bytes_[offset_ + static_cast<std::size_t>(i)];
        offset_ += 4;
        return v;
    }
    std::uint64_t u64(const char* what) {
        const std::uint64_t lo = u32(what);
        const std::uint64_t hi = u32(what);
        return lo | (hi << 32);
    }
    float f32(const char* what) {
        const std::uint32_t bits = u32(what);
        float v;
        std::memcpy(&v, &bits, 4);
        return v;
    }
    std::int32_t i32(const char* what) { return static_cast<std::int32_t>(u32(what)); }
    std::string str(const char* what) {
        const auto len = u16(what);
        need(len, what);
        std::string s(reinterpret_cast<const char*>(bytes_.data() + offset_), len);
        offset_ += len;
        return s;
    }
    std::vector<float> floats(std::size_t count, const char* what) {
        std::vector<float> out(count);
        for (auto& v : out) v = f32(what);
        return out;
    }
    std::vector<std::uint64_t> words(std::size_t count, const char* what) {
        std::vector<std::uint64_t> out(count);
        for (auto& v : out) v = u64(what);
        return out;
    }
    std::vector<std::uint8_t> raw(std::size_t count, const char* what) {
        need(count, what);
        std::vector<std::uint8_t> out(bytes_.begin() + static_cast<std::ptrdiff_t>(offset_),
                                      bytes_.begin() + static_cast<std::ptrdiff_t>(offset_ + count));
        offset_ += count;
        return out;
    }

private:
    std::span<const std::uint8_t> bytes_;
    std::size_t offset_ = 0;
};

constexpr char kMagic[4] = {'P', 'X', 'E', 'B'};

void write_header(Writer& w, std::uint8_t mode, Preset preset, int d, int num_classes,
                  int input_h, int input_w, bool quant_head, const QuantConfig& q) {
    w.raw(std::span<const std::uint8_t>(reinterpret_cast<const std::uint8_t*>(kMagic), 4));
    w.u16(kCheckpointVersion);
    w.u8(mode);
    w.u8(static_cast<std::uint8_t>(preset));
    w.u16(static_cast<std::uint16_t>(d));
    w.u16(static_cast<std::uint16_t>(num_classes));
    w.u16(static_cast<std::uint16_t>(input_h));
    w.u16(static_cast<std::uint16_t>(input_w));
    w.u8(quant_head ? 1 : 0);
    w.u8(static_cast<std::uint8_t>(q.activation_bits));
    w.u8(static_cast<std::uint8_t>(q.weight_bits));
    w.f32(q.range_lo);
    w.f32(q.range_hi);
}

void write_topology(Writer& w, const std::vector<LayerConfig>& layers) {
    w.u16(static_cast<std::uint16_t>(layers.size()));
    for (const auto& l : layers) {
        w.u32(10);  // record length
        w.u8(static_cast<std::uint8_t>(l.kind));
        w.u16(static_cast<std::uint16_t>(l.out_ch));
        w.u8(static_cast<std::uint8_t>(l.kernel));
        w.u8(static_cast<std::uint8_t>(l.stride));
        w.u8(static_cast<std::uint8_t>(l.pad));
        w.u16(static_cast<std::uint16_t>(l.d));
        w.u8(static_cast<std::uint8_t>(l.act_bits));
        w.u8(l.per_channel_alpha ? 1 : 0);
    }
}

std::vector<LayerConfig> read_topology(Reader& r) {
    const auto count = r.u16("layer count");
    std::vector<LayerConfig> layers(count);
    for (auto& l : layers) {
        const auto len = r.u32("layer record length");
        if (len != 10) {
            throw ParseError("unexpected layer record length " + std::to_string(len),
                             r.offset() - 4);
        }
        l.kind = static_cast<LayerKind>(r.u8("layer kind"));
        l.out_ch = r.u16("layer channels");
        l.kernel = r.u8("layer kernel");
        l.stride = r.u8("layer stride");
        l.pad = r.u8("layer padding");
        l.d = r.u16("layer embedding dim");
        l.act_bits = r.u8("layer activation bits");
        l.per_channel_alpha = r.u8("layer scale granularity") != 0;
    }
    return layers;
}

void write_tensor(Writer& w, const Tensor& t) {
    w.u8(static_cast<std::uint8_t>(t.shape.size()));
    for (int e : t.shape) w.u32(static_cast<std::uint32_t>(e));
    w.floats(t.values());
}

Tensor read_tensor(Reader& r) {
    const int rank = r.u8("tensor rank");
    std::vector<int> shape(static_cast<std::size_t>(rank));
    std::int64_t numel = 1;
    for (auto& e : shape) {
        e = static_cast<int>(r.u32("tensor extent"));
        numel *= e;
    }
    auto values = r.floats(static_cast<std::size_t>(numel), "tensor data");
    return Tensor::from(std::move(shape), std::move(values));
}

void write_packed_weights(Writer& w, const PackedWeights& pw) {
    w.u16(static_cast<std::uint16_t>(pw.out_ch));
    w.u16(static_cast<std::uint16_t>(pw.in_ch));
    w.u8(static_cast<std::uint8_t>(pw.kh));
    w.u8(static_cast<std::uint8_t>(pw.kw));
    w.words(pw.sign);
    w.floats(pw.alpha);
}

PackedWeights read_packed_weights(Reader& r) {
    const int out_ch = r.u16("packed weights out channels");
    const int in_ch = r.u16("packed weights in channels");
    const int kh = r.u8("packed weights kernel height");
    const int kw = r.u8("packed weights kernel width");
    const auto words_per_tap = static_cast<std::size_t>((in_ch + 63) / 64);
    auto sign = r.words(static_cast<std::size_t>(out_ch) * kh * kw * words_per_tap,
                        "packed weight signs");
    auto alpha = r.floats(static_cast<std::size_t>(out_ch), "packed weight scales");
    return make_packed_weights(out_ch, in_ch, kh, kw, std::move(sign), std::move(alpha));
}

void write_affine(Writer& w, const PackedAffine& a) {
    w.u32(static_cast<std::uint32_t>(a.scale.size()));
    w.floats(a.scale);
    w.floats(a.bias);
}

PackedAffine read_affine(Reader& r) {
    const auto channels = r.u32("affine channels");
    PackedAffine a;
    a.scale = r.floats(channels, "affine scale");
    a.bias = r.floats(channels, "affine bias");
    return a;
}

void write_merged_table(Writer& w, const MergedTable& t) {
    w.u16(static_cast<std::uint16_t>(t.d));
    w.u8(static_cast<std::uint8_t>(t.bits));
    w.f32(t.scale);
    w.i32(t.zero_level);
    const auto payload = merged_payload(t);
    w.raw(payload);
}

MergedTable read_merged_table(Reader& r) {
    const int d = r.u16("merged table dim");
    const int bits = r.u8("merged table bits");
    const float scale = r.f32("merged table scale");
    const int zero = r.i32("merged table zero level");
    const auto payload_bytes = (static_cast<std::size_t>(kPixelValues) * d * bits + 7) / 8;
    const auto payload = r.raw(payload_bytes, "merged table payload");
    return merged_from_payload(d, bits, scale, zero, payload);
}

void read_header_common(Reader& r, std::uint8_t* mode, Preset* preset, int* d, int* classes,
                        int* ih, int* iw, bool* quant_head, QuantConfig* q) {
    const auto magic = r.raw(4, "magic");
    if (std::memcmp(magic.data(), kMagic, 4) != 0) {
        throw ParseError("bad magic", 0);
    }
    const auto version = r.u16("version");
    if (version != kCheckpointVersion) {
        throw ParseError("unsupported format version " + std::to_string(version), 4);
    }
    *mode = r.u8("mode");
    if (*mode != kModeTrain && *mode != kModeInfer) {
        throw ParseError("unknown mode byte", r.offset() - 1);
    }
    const auto preset_byte = r.u8("preset");
    if (preset_byte > 3) {
        throw ParseError("unknown preset byte", r.offset() - 1);
    }
    *preset = static_cast<Preset>(preset_byte);
    *d = r.u16("embedding dim");
    *classes = r.u16("class count");
    *ih = r.u16("input height");
    *iw = r.u16("input width");
    *quant_head = r.u8("head flag") != 0;
    q->activation_bits = r.u8("activation bits");
    q->weight_bits = r.u8("weight bits");
    q->range_lo = r.f32("range lo");
    q->range_hi = r.f32("range hi");
}

}  // namespace

std::vector<std::uint8_t> save_checkpoint(const ModelGraph& model) {
    Writer w;
    write_header(w, kModeTrain, model.preset, model.d, model.num_classes, model.input_h,
                 model.input_w, model.quant_head, model.act_q);
    write_topology(w, model.layers);
    w.u32(static_cast<std::uint32_t>(model.params.size()));
    for (const auto& [name, tensor] : model.params) {
        w.str(name);
        write_tensor(w, tensor);
    }
    w.u32(static_cast<std::uint32_t>(model.bn.size()));
    for (const auto& [name, state] : model.bn) {
        w.str(name);
        w.u32(static_cast<std::uint32_t>(state.running_mean.size()));
        w.floats(state.running_mean);
        w.floats(state.running_var);
    }
    return w.take();
}

std::vector<std::uint8_t> save_checkpoint(const PackedModel& model) {
    Writer w;
    write_header(w, kModeInfer, model.preset, model.d, model.num_classes, model.input_h,
                 model.input_w, model.quant_head, model.act_q);
    write_topology(w, model.layers);
    switch (model.preset) {
        case Preset::FpFirst:
            w.u8(0);
            write_tensor(w, model.first_dense_w);
            break;
        case Preset::WqFirst:
            w.u8(1);
            write_tensor(w, model.first_dense_w);
            break;
        case Preset::IwqFirst:
            w.u8(2);
            write_packed_weights(w, model.first_conv);
            break;
        case Preset::PixembFirst:
            w.u8(3);
            write_merged_table(w, model.table);
            write_packed_weights(w, model.first_conv);
            break;
    }
    write_affine(w, model.first_bn);
    w.u16(static_cast<std::uint16_t>(model.blocks.size()));
    for (const auto& b : model.blocks) {
        w.u8(static_cast<std::uint8_t>(b.stride));
        w.u8(b.projection ? 1 : 0);
        write_packed_weights(w, b.conv1);
        write_affine(w, b.bn1);
        write_packed_weights(w, b.conv2);
        write_affine(w, b.bn2);
        if (b.projection) {
            write_packed_weights(w, b.proj);
            write_affine(w, b.proj_bn);
        }
    }
    if (model.quant_head) {
        w.u8(1);
        write_packed_weights(w, model.head);
    } else {
        w.u8(0);
        write_tensor(w, model.head_dense_w);
    }
    return w.take();
}

Checkpoint load_checkpoint(std::span<const std::uint8_t> bytes) {
    Reader r(bytes);
    std::uint8_t mode = 0;
    Preset preset{};
    int d = 0, classes = 0, ih = 0, iw = 0;
    bool quant_head = true;
    QuantConfig q;
    read_header_common(r, &mode, &preset, &d, &classes, &ih, &iw, &quant_head, &q);
    const auto layers = read_topology(r);

    Checkpoint ck;
    ck.mode = mode;
    if (mode == kModeTrain) {
        BuildOptions opts;
        opts.input_h = ih;
        opts.input_w = iw;
        opts.quant_head = quant_head;
        ModelGraph m = build_model(preset, preset == Preset::PixembFirst ? d : 0, classes, opts);
        m.act_q = q;
        if (m.layers != layers) {
            throw ParseError("topology section does not match the preset's layer graph",
                             r.offset());
        }
        const auto param_count = r.u32("parameter count");
        if (param_count != m.params.size()) {
            throw ParseError("unexpected parameter section count", r.offset() - 4);
        }
        for (std::uint32_t i = 0; i < param_count; ++i) {
            const auto name = r.str("parameter name");
            const auto it = m.params.find(name);
            if (it == m.params.end()) {
                throw ParseError("unknown parameter '" + name + "'", r.offset());
            }
            Tensor t = read_tensor(r);
            if (t.shape != it->second.shape) {
                throw ParseError("parameter '" + name + "' has unexpected shape", r.offset());
            }
            it->second = std::move(t);
        }
        const auto bn_count = r.u32("batch-norm state count");
        if (bn_count != m.bn.size()) {
            throw ParseError("unexpected batch-norm section count", r.offset() - 4);
        }
        for (std::uint32_t i = 0; i < bn_count; ++i) {
            const auto name = r.str("batch-norm name");
            const auto it = m.bn.find(name);
            if (it == m.bn.end()) {
                throw ParseError("unknown batch-norm state '" + name + "'", r.offset());
            }
            const auto channels = r.u32("batch-norm channels");
            it->second.running_mean = r.floats(channels, "batch-norm running mean");
            it->second.running_var = r.floats(channels, "batch-norm running variance");
        }
        if (!r.done()) {
            throw ParseError("trailing bytes after checkpoint payload", r.offset());
        }
        ck.model = std::move(m);
        return ck;
    }

    PackedModel p;
    p.preset = preset;
    p.d = d;
    p.num_classes = classes;
    p.input_h = ih;
    p.input_w = iw;
    p.quant_head = quant_head;
    p.act_q = q;
    p.layers = layers;
    const auto tag = r.u8("first layer tag");
    switch (tag) {
        case 0:
        case 1:
            p.first_dense_w = read_tensor(r);
            break;
        case 2:
            p.first_conv = read_packed_weights(r);
            break;
        case 3:
            p.table = read_merged_table(r);
            p.first_conv = read_packed_weights(r);
            break;
        default:
            throw ParseError("unknown first-layer tag", r.offset() - 1);
    }
    p.first_bn = read_affine(r);
    const auto block_count = r.u16("block count");
    for (int i = 0; i < block_count; ++i) {
        PackedBlock b;
        b.stride = r.u8("block stride");
        b.projection = r.u8("block projection flag") != 0;
        b.conv1 = read_packed_weights(r);
        b.bn1 = read_affine(r);
        b.conv2 = read_packed_weights(r);
        b.bn2 = read_affine(r);
        if (b.projection) {
            b.proj = read_packed_weights(r);
            b.proj_bn = read_affine(r);
        }
        p.blocks.push_back(std::move(b));
    }
    if (r.u8("head tag") == 1) {
        p.head = read_packed_weights(r);
    } else {
        p.head_dense_w = read_tensor(r);
    }
    if (!r.done()) {
        throw ParseError("trailing bytes after checkpoint payload", r.offset());
    }
    ck.packed = std::move(p);
    return ck;
}

void write_file(const std::string& path, std::span<const std::uint8_t> bytes) {
    std::ofstream out(path, std::ios::binary);
    if (!out) {
        throw ValueError("cannot open " + path + " for writing");
    }
    out.write(reinterpret_cast<const char*>(bytes.data()),
              static_cast<std::streamsize>(bytes.size()));
    if (!out) {
        throw ValueError("failed to write " + path);
    }
}

std::vector<std::uint8_t> read_binary_file(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) {
        throw ValueError("cannot open " + path);
    }
    in.seekg(0, std::ios::end);
    const auto size = static_cast<std::size_t>(in.tellg());
    in.seekg(0);
    std::vector<std::uint8_t> bytes(size);
    in.read(reinterpret_cast<char*>(bytes.data()), static_cast<std::streamsize>(size));
    if (!in) {
        throw ValueError("failed to read " + path);
    }
    return bytes;
}

}  // namespace pixemb
