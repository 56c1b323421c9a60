#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

namespace peft {

// Projections an adapter can attach to, in canonical order. The numeric value
// is the target id written to adapter files.
enum class Target : std::uint8_t { Q = 0, K = 1, V = 2, O = 3, Gate = 4, Up = 5, Down = 6 };

inline constexpr std::size_t kNumTargets = 7;
inline constexpr std::array<Target, kNumTargets> kAllTargets = {
    Target::Q, Target::K, Target::V, Target::O, Target::Gate, Target::Up, Target::Down};

std::string_view target_name(Target t) noexcept;
// Throws ConfigError for names outside {q, k, v, o, gate, up, down}.
Target parse_target(std::string_view name);

struct ProjectionDims {
    std::size_t d_in = 0;
    std::size_t d_out = 0;
};

// Weight-free description of a decoder-only transformer: enough to count
// adapter parameters and estimate memory without allocating any tensor.
struct ModelShape {
    std::string name;
    std::size_t n_layers = 0;
    std::size_t d_model = 0;
    std::size_t vocab_size = 0;
    std::size_t context_len = 0;
    std::array<ProjectionDims, kNumTargets> projections{};
    std::uint64_t total_params = 0;    // exact count for this shape
    std::uint64_t nominal_params = 0;  // headline figure ("7B")

    const ProjectionDims& dims(Target t) const noexcept {
        return projections[static_cast<std::size_t>(t)];
    }
};

// 32 layers, d_model 4096, 8 KV heads of 128, MLP 14336, vocab 32000, nominal 7e9.
ModelShape mistral7b_shape();

struct LoraConfig {
    std::uint32_t rank = 8;
    float alpha = 16.0f;
    std::vector<Target> targets{kAllTargets.begin(), kAllTargets.end()};
    float init_std = 0.02f;
    std::uint64_t seed = 0;

    // Throws ConfigError when rank == 0, alpha <= 0, or targets is empty.
    void validate() const;
    friend bool operator==(const LoraConfig&, const LoraConfig&) = default;
};

struct LoraAdapter {
    std::uint32_t layer = 0;
    Target target = Target::Q;
    std::size_t d_in = 0;
    std::size_t d_out = 0;
    std::uint32_t rank = 0;
    float alpha = 0.0f;
    std::vector<float> a;  // rank x d_in, row-major
    std::vector<float> b;  // d_out x rank, row-major

    double scaling() const noexcept { return static_cast<double>(alpha) / rank; }
    friend bool operator==(const LoraAdapter&, const LoraAdapter&) = default;
};

// One adapter per (layer, target), ordered by layer then canonical target order.
class AdapterSet {
public:
    AdapterSet() = default;
    explicit AdapterSet(std::vector<LoraAdapter> adapters);

    std::size_t size() const noexcept { return adapters_.size(); }
    bool empty() const noexcept { return adapters_.empty(); }

    const LoraAdapter& operator[](std::size_t i) const noexcept { return adapters_[i]; }
    LoraAdapter& operator[](std::size_t i) noexcept { return adapters_[i]; }
    auto begin() const noexcept { return adapters_.begin(); }
    auto end() const noexcept { return adapters_.end(); }

    // nullptr when (layer, target) carries no adapter.
    const LoraAdapter* find(std::size_t layer, Target target) const noexcept;
    std::optional<std::size_t> index_of(std::size_t layer, Target target) const noexcept;

    std::size_t parameter_count() const noexcept;
    // FNV-1a over every parameter's bit pattern; changes whenever any weight changes.
    std::uint64_t fingerprint() const noexcept;

    friend bool operator==(const AdapterSet& x, const AdapterSet& y) {
        return x.adapters_ == y.adapters_;
    }

private:
    std::vector<LoraAdapter> adapters_;
    std::vector<std::int32_t> lookup_;  // layer * kNumTargets + target -> index or -1
};

// A ~ Normal(0, init_std^2) from the seeded generator, B = 0.
AdapterSet lora_init(const ModelShape& shape, const LoraConfig& config);

// Row-batched adapter application. x holds `rows` rows of d_in; u receives
// rows x rank intermediates (A x); y_accum gets scaling * B u added in place.
void lora_forward_rows(const LoraAdapter& adapter, std::span<const double> x, std::size_t rows,
                       std::span<double> u, std::span<double> y_accum);

// Reverse of lora_forward_rows. Adds parameter gradients into grad_a / grad_b
// and the input gradient into dx_accum.
void lora_backward_rows(const LoraAdapter& adapter, std::span<const double> x,
                        std::span<const double> u, std::span<const double> dy, std::size_t rows,
                        std::span<double> grad_a, std::span<double> grad_b,
                        std::span<double> dx_accum);

// scaling * B (A x) for a single input vector.
std::vector<double> lora_contribution(const LoraAdapter& adapter, std::span<const double> x);

// W + scaling * B A, for a d_out x d_in row-major base weight.
std::vector<float> lora_merge(std::span<const float> base_weight, const LoraAdapter& adapter);

struct ParamCount {
    std::uint64_t trainable = 0;
    double ratio = 0.0;  // trainable / nominal total
};

// sum over layers and targets of rank * (d_in + d_out). nominal_total overrides
// shape.nominal_params when given.
ParamCount lora_param_count(const ModelShape& shape, const LoraConfig& config,
                            std::optional<std::uint64_t> nominal_total = std::nullopt);

}  // namespace peft
