#include "peft_forge/lora.hpp"

#include <algorithm>
#include <bit>
#include <cstring>

#include "peft_forge/errors.hpp"
#include "peft_forge/rng.hpp"

namespace peft {

namespace {
constexpr std::array<std::string_view, kNumTargets> kTargetNames = {"q",    "k",  "v",   "o",
                                                                    "gate", "up", "down"};
}

std::string_view target_name(Target t) noexcept {
    return kTargetNames[static_cast<std::size_t>(t)];
}

Target parse_target(std::string_view name) {
    for (std::size_t i = 0; i < kTargetNames.size(); ++i) {
        if (kTargetNames[i] == name) {
            return static_cast<Target>(i);
        }
    }
    throw ConfigError("unknown LoRA target '" + std::string(name) +
                      "' (expected one of q, k, v, o, gate, up, down)");
}

ModelShape mistral7b_shape() {
    ModelShape s;
    s.name = "mistral7b";
    s.n_layers = 32;
    s.d_model = 4096;
    s.vocab_size = 32000;
    s.context_len = 2048;
    constexpr std::size_t kv = 1024;  // 8 KV heads x 128
    constexpr std::size_t hidden = 14336;
    s.projections = {{{4096, 4096}, {4096, kv}, {4096, kv}, {4096, 4096},
                      {4096, hidden}, {4096, hidden}, {hidden, 4096}}};
    std::uint64_t per_layer = 2 * s.d_model;  // two RMSNorm gains
    for (const auto& p : s.projections) {
        per_layer += static_cast<std::uint64_t>(p.d_in) * p.d_out;
    }
    s.total_params = per_layer * s.n_layers + 2ULL * s.vocab_size * s.d_model + s.d_model;
    s.nominal_params = 7'000'000'000ULL;
    return s;
}

void LoraConfig::validate() const {
    if (rank < 1) {
        throw ConfigError("lora rank must be >= 1");
    }
    if (!(alpha > 0.0f)) {
        throw ConfigError("lora alpha must be > 0");
    }
    if (targets.empty()) {
        throw ConfigError("lora targets must be non-empty");
    }
    if (!(init_std >= 0.0f)) {
        throw ConfigError("lora init_std must be >= 0");
    }
    std::array<bool, kNumTargets> seen{};
    for (auto t : targets) {
        const auto i = static_cast<std::size_t>(t);
        if (i >= kNumTargets) {
            throw ConfigError("unknown LoRA target id " + std::to_string(i));
        }
        if (seen[i]) {
            throw ConfigError("duplicate LoRA target '" + std::string(target_name(t)) + "'");
        }
        seen[i] = true;
    }
}

AdapterSet::AdapterSet(std::vector<LoraAdapter> adapters) : adapters_(std::move(adapters)) {
    std::size_t max_layer = 0;
    for (const auto& a : adapters_) {
        max_layer = std::max<std::size_t>(max_layer, a.layer);
    }
    lookup_.assign((max_layer + 1) * kNumTargets, -1);
    for (std::size_t i = 0; i < adapters_.size(); ++i) {
        auto& slot = lookup_[adapters_[i].layer * kNumTargets +
                             static_cast<std::size_t>(adapters_[i].target)];
        if (slot != -1) {
            throw ConfigError("duplicate adapter for layer " + std::to_string(adapters_[i].layer) +
                              " target " + std::string(target_name(adapters_[i].target)));
        }
        slot = static_cast<std::int32_t>(i);
    }
}

std::optional<std::size_t> AdapterSet::index_of(std::size_t layer, Target target) const noexcept {
    const std::size_t key = layer * kNumTargets + static_cast<std::size_t>(target);
    if (key >= lookup_.size() || lookup_[key] < 0) {
        return std::nullopt;
    }
    return static_cast<std::size_t>(lookup_[key]);
}

const LoraAdapter* AdapterSet::find(std::size_t layer, Target target) const noexcept {
    const auto idx = index_of(layer, target);
    return idx ? &adapters_[*idx] : nullptr;
}

std::size_t AdapterSet::parameter_count() const noexcept {
    std::size_t n = 0;
    for (const auto& a : adapters_) {
        n += a.a.size() + a.b.size();
    }
    return n;
}

std::uint64_t AdapterSet::fingerprint() const noexcept {
    std::uint64_t h = 0xCBF29CE484222325ULL;
    auto mix = [&h](std::uint32_t word) {
        for (int k = 0; k < 4; ++k) {
            h ^= (word >> (8 * k)) & 0xFF;
            h *= 0x100000001B3ULL;
        }
    };
    for (const auto& a : adapters_) {
        mix(a.layer);
        mix(static_cast<std::uint32_t>(a.target));
        for (float v : a.a) {
            mix(std::bit_cast<std::uint32_t>(v));
        }
        for (float v : a.b) {
            mix(std::bit_cast<std::uint32_t>(v));
        }
    }
    return h;
}

AdapterSet lora_init(const ModelShape& shape, const LoraConfig& config) {
    config.validate();
    std::array<bool, kNumTargets> enabled{};
    for (auto t : config.targets) {
        enabled[static_cast<std::size_t>(t)] = true;
    }
    Rng rng(config.seed);
    std::vector<LoraAdapter> adapters;
    for (std::size_t layer = 0; layer < shape.n_layers; ++layer) {
        for (auto t : kAllTargets) {
            if (!enabled[static_cast<std::size_t>(t)]) {
                continue;
            }
            const auto& dims = shape.dims(t);
            LoraAdapter a;
            a.layer = static_cast<std::uint32_t>(layer);
            a.target = t;
            a.d_in = dims.d_in;
            a.d_out = dims.d_out;
            a.rank = config.rank;
            a.alpha = config.alpha;
            a.a.resize(static_cast<std::size_t>(config.rank) * dims.d_in);
            for (auto& v : a.a) {
                v = static_cast<float>(rng.normal(0.0, config.init_std));
            }
            a.b.assign(dims.d_out * config.rank, 0.0f);
            adapters.push_back(std::move(a));
        }
    }
    return AdapterSet(std::move(adapters));
}

void lora_forward_rows(const LoraAdapter& adapter, std::span<const double> x, std::size_t rows,
                       std::span<double> u, std::span<double> y_accum) {
    const std::size_t r = adapter.rank;
    const std::size_t din = adapter.d_in;
    const std::size_t dout = adapter.d_out;
    if (x.size() != rows * din || u.size() != rows * r || y_accum.size() != rows * dout) {
        throw ShapeError("lora: activation width does not match adapter (d_in " +
                         std::to_string(din) + ", d_out " + std::to_string(dout) + ")");
    }
    const double s = adapter.scaling();
    for (std::size_t t = 0; t < rows; ++t) {
        const double* xt = x.data() + t * din;
        double* ut = u.data() + t * r;
        for (std::size_t k = 0; k < r; ++k) {
            const float* ak = adapter.a.data() + k * din;
            double acc = 0.0;
            for (std::size_t i = 0; i < din; ++i) {
                acc += static_cast<double>(ak[i]) * xt[i];
            }
            ut[k] = acc;
        }
        double* yt = y_accum.data() + t * dout;
        for (std::size_t o = 0; o < dout; ++o) {
            const float* bo = adapter.b.data() + o * r;
            double acc = 0.0;
            for (std::size_t k = 0; k < r; ++k) {
                acc += static_cast<double>(bo[k]) * ut[k];
            }
            yt[o] += s * acc;
        }
    }
}

void lora_backward_rows(const LoraAdapter& adapter, std::span<const double> x,
                        std::span<const double> u, std::span<const double> dy, std::size_t rows,
                        std::span<double> grad_a, std::span<double> grad_b,
                        std::span<double> dx_accum) {
    const std::size_t r = adapter.rank;
    const std::size_t din = adapter.d_in;
    const std::size_t dout = adapter.d_out;
    if (x.size() != rows * din || u.size() != rows * r || dy.size() != rows * dout ||
        dx_accum.size() != rows * din || grad_a.size() != r * din || grad_b.size() != dout * r) {
        throw ShapeError("lora backward: buffer sizes do not match adapter");
    }
    const double s = adapter.scaling();
    std::vector<double> du(r);
    for (std::size_t t = 0; t < rows; ++t) {
        const double* xt = x.data() + t * din;
        const double* ut = u.data() + t * r;
        const double* dyt = dy.data() + t * dout;
        std::fill(du.begin(), du.end(), 0.0);
        for (std::size_t o = 0; o < dout; ++o) {
            const double g = s * dyt[o];
            if (g == 0.0) {
                continue;
            }
            const float* bo = adapter.b.data() + o * r;
            double* gbo = grad_b.data() + o * r;
            for (std::size_t k = 0; k < r; ++k) {
                gbo[k] += g * ut[k];
                du[k] += g * static_cast<double>(bo[k]);
            }
        }
        double* dxt = dx_accum.data() + t * din;
        for (std::size_t k = 0; k < r; ++k) {
            const double d = du[k];
            const float* ak = adapter.a.data() + k * din;
            double* gak = grad_a.data() + k * din;
            for (std::size_t i = 0; i < din; ++i) {
                gak[i] += d * xt[i];
                dxt[i] += d * static_cast<double>(ak[i]);
            }
        }
    }
}

std::vector<double> lora_contribution(const LoraAdapter& adapter, std::span<const double> x) {
    if (x.size() != adapter.d_in) {
        throw ShapeError("lora_contribution: input width " + std::to_string(x.size()) +
                         " != d_in " + std::to_string(adapter.d_in));
    }
    std::vector<double> u(adapter.rank);
    std::vector<double> y(adapter.d_out, 0.0);
    lora_forward_rows(adapter, x, 1, u, y);
    return y;
}

std::vector<float> lora_merge(std::span<const float> base_weight, const LoraAdapter& adapter) {
    if (base_weight.size() != adapter.d_out * adapter.d_in) {
        throw ShapeError("lora_merge: base weight has " + std::to_string(base_weight.size()) +
                         " elements, adapter expects " +
                         std::to_string(adapter.d_out * adapter.d_in));
    }
    const double s = adapter.scaling();
    const std::size_t r = adapter.rank;
    std::vector<float> merged(base_weight.begin(), base_weight.end());
    for (std::size_t o = 0; o < adapter.d_out; ++o) {
        for (std::size_t i = 0; i < adapter.d_in; ++i) {
            double acc = 0.0;
            for (std::size_t k = 0; k < r; ++k) {
                acc += static_cast<double>(adapter.b[o * r + k]) *
                       static_cast<double>(adapter.a[k * adapter.d_in + i]);
            }
            if (acc != 0.0) {
                merged[o * adapter.d_in + i] =
                    static_cast<float>(static_cast<double>(base_weight[o * adapter.d_in + i]) +
                                       s * acc);
            }
        }
    }
    return merged;
}

ParamCount lora_param_count(const ModelShape& shape, const LoraConfig& config,
                            std::optional<std::uint64_t> nominal_total) {
    config.validate();
    std::uint64_t per_layer = 0;
    for (auto t : config.targets) {
        const auto& d = shape.dims(t);
        per_layer += static_cast<std::uint64_t>(config.rank) * (d.d_in + d.d_out);
    }
    ParamCount out;
    out.trainable = per_layer * shape.n_layers;
    const std::uint64_t denom = nominal_total.value_or(shape.nominal_params);
    out.ratio = denom > 0 ? static_cast<double>(out.trainable) / static_cast<double>(denom) : 0.0;
    return out;
}

}  // namespace peft
