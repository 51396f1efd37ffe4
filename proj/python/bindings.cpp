#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>

#include "pixemb/bitpack.hpp"
#include "pixemb/dataset.hpp"
#include "pixemb/embedding.hpp"
#include "pixemb/kernels.hpp"
#include "pixemb/quantize.hpp"

namespace py = pybind11;
using namespace pixemb;

namespace {

QuantConfig make_config(int bits, float lo, float hi) {
    QuantConfig cfg;
    cfg.activation_bits = bits;
    cfg.range_lo = lo;
    cfg.range_hi = hi;
    cfg.validate();
    return cfg;
}

Tensor tensor_from_array(const py::array_t<float, py::array::c_style | py::array::forcecast>& a) {
    std::vector<int> shape(static_cast<std::size_t>(a.ndim()));
    for (py::ssize_t i = 0; i < a.ndim(); ++i) {
        shape[static_cast<std::size_t>(i)] = static_cast<int>(a.shape(i));
    }
    std::vector<float> data(a.data(), a.data() + a.size());
    return Tensor::from(std::move(shape), std::move(data));
}

py::array_t<float> array_from_tensor(const Tensor& t) {
    std::vector<py::ssize_t> shape(t.shape.begin(), t.shape.end());
    py::array_t<float> out(shape);
    std::copy(t.data->begin(), t.data->end(), out.mutable_data());
    return out;
}

ImageBatch batch_from_array(
    const py::array_t<std::uint8_t, py::array::c_style | py::array::forcecast>& a) {
    if (a.ndim() != 4 && a.ndim() != 3) {
        throw ValueError("image must be (H, W, 3) or (N, H, W, 3) uint8");
    }
    const bool batched = a.ndim() == 4;
    ImageBatch b;
    b.n = batched ? static_cast<int>(a.shape(0)) : 1;
    b.h = static_cast<int>(a.shape(batched ? 1 : 0));
    b.w = static_cast<int>(a.shape(batched ? 2 : 1));
    b.c = static_cast<int>(a.shape(batched ? 3 : 2));
    b.pixels.assign(a.data(), a.data() + a.size());
    return b;
}

EmbeddingTable table_from_array(const py::array_t<float, py::array::c_style>& weights, int bits) {
    if (weights.ndim() != 2 || weights.shape(1) != kPixelValues) {
        throw ValueError("table must be (d, 256) float32");
    }
    EmbeddingTable table;
    table.d = static_cast<int>(weights.shape(0));
    table.quant = make_config(bits, 0.0f, 1.0f);
    table.weights = tensor_from_array(weights);
    return table;
}

MergedTable merged_from_array(
    const py::array_t<std::uint8_t, py::array::c_style>& codes, int bits) {
    if (codes.ndim() != 2 || codes.shape(0) != kPixelValues) {
        throw ValueError("merged table must be (256, d) uint8");
    }
    MergedTable m;
    m.d = static_cast<int>(codes.shape(1));
    m.bits = bits;
    const auto cfg = make_config(bits, 0.0f, 1.0f);
    m.scale = cfg.scale();
    m.zero_level = 0;
    m.codes.assign(codes.data(), codes.data() + codes.size());
    return m;
}

}  // namespace

PYBIND11_MODULE(_core, m) {
    m.doc() = "pixel-embedding quantized inference kernels";

    py::register_exception<Error>(m, "PixembError");

    m.def("set_num_threads", &set_num_threads, py::arg("threads"));

    m.def(
        "one_hot",
        [](int p, int n) {
            const auto h = one_hot(p, n);
            py::array_t<float> out(static_cast<py::ssize_t>(h.size()));
            std::copy(h.begin(), h.end(), out.mutable_data());
            return out;
        },
        py::arg("p"), py::arg("n") = kPixelValues);

    m.def(
        "quantize_activation",
        [](const py::array_t<float, py::array::c_style | py::array::forcecast>& x, int bits,
           float lo, float hi) {
            const auto cfg = make_config(bits, lo, hi);
            py::array_t<float> out(std::vector<py::ssize_t>(x.shape(), x.shape() + x.ndim()));
            quantize_activation_forward({x.data(), static_cast<std::size_t>(x.size())},
                                        {out.mutable_data(), static_cast<std::size_t>(out.size())},
                                        cfg);
            return out;
        },
        py::arg("x"), py::arg("bits") = 2, py::arg("lo") = 0.0f, py::arg("hi") = 1.0f);

    m.def(
        "quantize_weight",
        [](const py::array_t<float, py::array::c_style | py::array::forcecast>& w,
           bool per_channel) {
            const Tensor t = tensor_from_array(w);
            const auto alphas = weight_alphas(t, per_channel);
            Tensor out = Tensor::zeros(t.shape);
            const std::int64_t per = t.numel() / static_cast<std::int64_t>(alphas.size());
            for (std::int64_t i = 0; i < t.numel(); ++i) {
                const float a = alphas[static_cast<std::size_t>(i / per)];
                out.at(i) = t.at(i) < 0.0f ? -a : a;
            }
            py::array_t<float> alpha_arr(static_cast<py::ssize_t>(alphas.size()));
            std::copy(alphas.begin(), alphas.end(), alpha_arr.mutable_data());
            return py::make_tuple(array_from_tensor(out), alpha_arr);
        },
        py::arg("w"), py::arg("per_channel") = true);

    m.def(
        "embed_forward",
        [](const py::array_t<std::uint8_t, py::array::c_style | py::array::forcecast>& image,
           const py::array_t<float, py::array::c_style>& table, int bits) {
            return array_from_tensor(
                embed_forward(batch_from_array(image), table_from_array(table, bits)));
        },
        py::arg("image"), py::arg("table"), py::arg("bits") = 2);

    m.def(
        "merge_table",
        [](const py::array_t<float, py::array::c_style>& table, int bits) {
            const auto merged = merge_table(table_from_array(table, bits));
            py::array_t<std::uint8_t> out({py::ssize_t(kPixelValues), py::ssize_t(merged.d)});
            std::copy(merged.codes.begin(), merged.codes.end(), out.mutable_data());
            return out;
        },
        py::arg("table"), py::arg("bits") = 2);

    m.def(
        "merged_payload",
        [](const py::array_t<std::uint8_t, py::array::c_style>& codes, int bits) {
            const auto payload = merged_payload(merged_from_array(codes, bits));
            return py::bytes(reinterpret_cast<const char*>(payload.data()), payload.size());
        },
        py::arg("codes"), py::arg("bits") = 2);

    m.def(
        "embed_infer",
        [](const py::array_t<std::uint8_t, py::array::c_style | py::array::forcecast>& image,
           const py::array_t<std::uint8_t, py::array::c_style>& codes, int bits) {
            const auto q = embed_infer(batch_from_array(image), merged_from_array(codes, bits));
            py::array_t<std::uint8_t> out(
                std::vector<py::ssize_t>(q.shape.begin(), q.shape.end()));
            std::copy(q.codes.begin(), q.codes.end(), out.mutable_data());
            return out;
        },
        py::arg("image"), py::arg("codes"), py::arg("bits") = 2);

    m.def(
        "packed_conv2d",
        [](const py::array_t<std::uint8_t, py::array::c_style | py::array::forcecast>& codes,
           const py::array_t<float, py::array::c_style | py::array::forcecast>& weights,
           int bits, int stride, int pad) {
            if (codes.ndim() != 4 || weights.ndim() != 4) {
                throw ValueError("codes must be (N,C,H,W) uint8, weights (O,I,KH,KW) float32");
            }
            QuantizedTensor q;
            q.shape = {static_cast<int>(codes.shape(0)), static_cast<int>(codes.shape(1)),
                       static_cast<int>(codes.shape(2)), static_cast<int>(codes.shape(3))};
            q.bits = bits;
            const auto cfg = make_config(bits, 0.0f, 1.0f);
            q.scale = cfg.scale();
            q.zero_level = 0;
            q.codes.assign(codes.data(), codes.data() + codes.size());
            const auto pw = pack_weights(tensor_from_array(weights), true);
            const auto acc = packed_conv2d(pack_activations(q), pw, stride, pad);
            py::array_t<std::int32_t> out(
                {py::ssize_t(acc.n), py::ssize_t(acc.c), py::ssize_t(acc.h), py::ssize_t(acc.w)});
            std::copy(acc.acc.begin(), acc.acc.end(), out.mutable_data());
            const Tensor scaled = accum_to_float(acc, pw.alpha, q.scale);
            return py::make_tuple(out, array_from_tensor(scaled));
        },
        py::arg("codes"), py::arg("weights"), py::arg("bits") = 2, py::arg("stride") = 1,
        py::arg("pad") = 0);

    m.def(
        "synthetic_dataset",
        [](int n, std::uint64_t seed) {
            const auto data = make_synthetic(n, seed);
            py::array_t<std::uint8_t> images(
                {py::ssize_t(n), py::ssize_t(data.h), py::ssize_t(data.w), py::ssize_t(3)});
            std::copy(data.pixels.begin(), data.pixels.end(), images.mutable_data());
            py::array_t<std::int32_t> labels{py::ssize_t(n)};
            std::copy(data.labels.begin(), data.labels.end(), labels.mutable_data());
            return py::make_tuple(images, labels);
        },
        py::arg("n"), py::arg("seed") = 0);

    m.attr("__version__") = "0.1.0";
}
