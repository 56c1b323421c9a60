// Python bindings for the peft_forge core.

#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>

#include <sstream>

#include "peft_forge/cli.hpp"
#include "peft_forge/data.hpp"
#include "peft_forge/errors.hpp"
#include "peft_forge/evaluator.hpp"
#include "peft_forge/lora.hpp"
#include "peft_forge/optim.hpp"
#include "peft_forge/quant.hpp"
#include "peft_forge/trainer.hpp"

namespace py = pybind11;
using namespace peft;

namespace {

ModelShape shape_by_name(const std::string& name) {
    if (name == "mistral7b") return mistral7b_shape();
    if (name == "mini") return mini_advisor_config().shape();
    throw ConfigError("unknown shape '" + name + "' (expected mistral7b or mini)");
}

LoraConfig make_lora(std::uint32_t rank, float alpha, const std::vector<std::string>& targets) {
    LoraConfig lc;
    lc.rank = rank;
    lc.alpha = alpha;
    if (!targets.empty()) {
        lc.targets.clear();
        for (const auto& t : targets) lc.targets.push_back(parse_target(t));
    }
    lc.validate();
    return lc;
}

std::vector<float> as_floats(const py::array_t<float, py::array::c_style | py::array::forcecast>& a) {
    return {a.data(), a.data() + a.size()};
}

py::array_t<float> to_array(const std::vector<float>& v, const std::vector<std::size_t>& shape) {
    py::array_t<float> out(shape);
    std::copy(v.begin(), v.end(), out.mutable_data());
    return out;
}

}  // namespace

PYBIND11_MODULE(_core, m) {
    m.doc() = "QLoRA-style fine-tuning toolkit core";

    py::register_exception<Error>(m, "Error");
    py::register_exception<ConfigError>(m, "ConfigError", m.attr("Error"));

    // quant
    m.def("nf4_codebook", [] {
        const auto& cb = quant::nf4_codebook();
        return std::vector<float>(cb.begin(), cb.end());
    });
    m.def("nf4_max_gap", &quant::nf4_max_gap);

    py::class_<quant::QuantizedTensor>(m, "QuantizedTensor")
        .def_property_readonly("shape", &quant::QuantizedTensor::shape)
        .def_property_readonly("block_size", &quant::QuantizedTensor::block_size)
        .def_property_readonly("num_blocks", &quant::QuantizedTensor::num_blocks)
        .def_property_readonly("double_quantized",
                               [](const quant::QuantizedTensor& q) {
                                   return q.scale_encoding() == quant::ScaleEncoding::DoubleQuantized;
                               })
        .def_property_readonly("storage_bytes", &quant::QuantizedTensor::storage_bytes)
        .def("codes",
             [](const quant::QuantizedTensor& q) {
                 std::vector<std::uint8_t> c(q.num_elements());
                 for (std::size_t i = 0; i < c.size(); ++i) c[i] = q.code(i);
                 return c;
             })
        .def("scales", &quant::QuantizedTensor::effective_scales)
        .def("with_double_quantized_scales", &quant::QuantizedTensor::with_double_quantized_scales,
             py::arg("group_size") = quant::kScaleGroupSize)
        .def("dequantize",
             [](const quant::QuantizedTensor& q) { return to_array(quant::dequantize_nf4(q), q.shape()); });

    m.def(
        "quantize_nf4",
        [](const py::array_t<float, py::array::c_style | py::array::forcecast>& values, std::size_t block_size) {
            std::vector<std::size_t> shape(values.shape(), values.shape() + values.ndim());
            if (shape.empty()) shape.push_back(1);
            return quant::quantize_nf4(as_floats(values), shape, block_size);
        },
        py::arg("values"), py::arg("block_size") = quant::kNf4BlockSize);

    m.def(
        "quant_error_stats",
        [](const py::array_t<float, py::array::c_style | py::array::forcecast>& original,
           const quant::QuantizedTensor& q) {
            const auto s = quant::quant_error_stats(as_floats(original), q);
            return py::dict(py::arg("max_abs_err") = s.max_abs_err, py::arg("mean_abs_err") = s.mean_abs_err,
                            py::arg("mse") = s.mse);
        },
        py::arg("original"), py::arg("quantized"));

    // lora
    m.def(
        "lora_param_count",
        [](const std::string& shape, std::uint32_t rank, float alpha, const std::vector<std::string>& targets,
           std::optional<std::uint64_t> nominal_total) {
            const auto pc = lora_param_count(shape_by_name(shape), make_lora(rank, alpha, targets), nominal_total);
            return py::dict(py::arg("trainable") = pc.trainable, py::arg("ratio") = pc.ratio);
        },
        py::arg("shape") = "mistral7b", py::arg("rank") = 16, py::arg("alpha") = 32.0f,
        py::arg("targets") = std::vector<std::string>{}, py::arg("nominal_total") = py::none());

    // optim
    m.def(
        "lr_at",
        [](std::uint64_t step, double peak_lr, std::uint64_t warmup_steps, std::uint64_t total_steps) {
            AdamConfig c;
            c.peak_lr = peak_lr;
            c.warmup_steps = warmup_steps;
            c.total_steps = total_steps;
            c.validate();
            return lr_at(step, c);
        },
        py::arg("step"), py::arg("peak_lr"), py::arg("warmup_steps"), py::arg("total_steps"));

    // data
    m.def("encode_text", &encode_text, py::arg("text"));
    m.def(
        "decode", [](const std::vector<std::int32_t>& ids) { return decode(ids); }, py::arg("ids"));
    m.def(
        "generate_corpus",
        [](std::size_t n, std::uint64_t seed) {
            TemplateProvider provider(seed);
            const auto corpus = generate_corpus(n, seed, provider);
            return corpus_to_jsonl(corpus);
        },
        py::arg("n"), py::arg("seed"), "Template-provider corpus as JSONL text.");

    // trainer
    m.def(
        "plan_phase",
        [](std::size_t dataset_size, std::size_t per_device_batch, std::size_t grad_accum, std::size_t epochs) {
            const auto p = plan_phase(dataset_size, HardwareProfile{"py", per_device_batch, grad_accum, 1}, epochs);
            return py::dict(py::arg("steps_per_epoch") = p.steps_per_epoch, py::arg("total_steps") = p.total_steps);
        },
        py::arg("dataset_size"), py::arg("per_device_batch"), py::arg("grad_accum"), py::arg("epochs"));
    m.def(
        "estimate_memory",
        [](const std::string& shape, std::size_t per_device_batch, std::size_t grad_accum, std::uint32_t rank,
           bool grad_checkpoint, bool double_quantized_scales) {
            const auto b = estimate_memory(shape_by_name(shape), HardwareProfile{"py", per_device_batch, grad_accum, 1},
                                           make_lora(rank, 2.0f * rank, {}), grad_checkpoint,
                                           double_quantized_scales);
            return py::dict(py::arg("base_weights") = b.base_weights, py::arg("scales") = b.scales,
                            py::arg("adapters") = b.adapters, py::arg("gradients") = b.gradients,
                            py::arg("optimizer_state") = b.optimizer_state, py::arg("activations") = b.activations,
                            py::arg("total") = b.total);
        },
        py::arg("shape") = "mistral7b", py::arg("per_device_batch") = 2, py::arg("grad_accum") = 4,
        py::arg("rank") = 16, py::arg("grad_checkpoint") = true, py::arg("double_quantized_scales") = true);

    // evaluator
    m.def(
        "check_markdown",
        [](const std::string& text) {
            const auto r = check_markdown(text);
            return py::dict(py::arg("heading_present") = r.heading_present,
                            py::arg("bullet_list_present") = r.bullet_list_present,
                            py::arg("no_heading_jump") = r.no_heading_jump,
                            py::arg("fences_balanced") = r.fences_balanced, py::arg("compliant") = r.compliant());
        },
        py::arg("text"));
    m.def(
        "compliance_rate", [](const std::vector<std::string>& texts) { return compliance_rate(texts); },
        py::arg("texts"));
    m.def("loss_reduction", &loss_reduction, py::arg("initial"), py::arg("final_loss"));

    // cli
    m.def(
        "run_cli",
        [](const std::vector<std::string>& args) {
            std::ostringstream out;
            std::ostringstream err;
            int code = 0;
            {
                py::gil_scoped_release release;
                code = cli::run(args, out, err);
            }
            return py::make_tuple(code, out.str(), err.str());
        },
        py::arg("args"), "Runs one peft-forge command in-process; returns (exit_code, stdout, stderr).");
}
