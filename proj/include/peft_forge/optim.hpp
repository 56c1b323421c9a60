#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <vector>

#include "peft_forge/model.hpp"
#include "peft_forge/quant.hpp"

namespace peft {

struct AdamConfig {
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    double weight_decay = 0.0;
    double peak_lr = 2e-4;
    std::uint64_t warmup_steps = 10;
    std::uint64_t total_steps = 0;
    double max_grad_norm = 1.0;

    void validate() const;
    friend bool operator==(const AdamConfig&, const AdamConfig&) = default;
};

// First and second moments of one parameter tensor, stored as Q8 blocks.
struct TensorMoments {
    std::size_t size = 0;
    std::uint32_t block_size = static_cast<std::uint32_t>(quant::kQ8BlockSize);
    std::vector<quant::Q8Block> m;
    std::vector<quant::Q8Block> v;

    friend bool operator==(const TensorMoments&, const TensorMoments&) = default;
};

// One TensorMoments per adapter matrix, ordered adapter by adapter, A before B.
struct OptState {
    std::vector<TensorMoments> tensors;
    std::uint64_t step_count = 0;

    friend bool operator==(const OptState&, const OptState&) = default;
};

TensorMoments zero_moments(std::size_t size, std::size_t block_size = quant::kQ8BlockSize);
OptState init_opt_state(const AdapterSet& adapters);

class GradAccumulator {
public:
    GradAccumulator(const AdapterSet& adapters, std::size_t target_micro);

    // Adds grads / target_micro. Throws ConfigError once target_micro
    // micro-batches have been added.
    void accumulate(const GradSet& grads);

    bool ready() const noexcept { return micro_count_ == target_micro_; }
    std::size_t micro_count() const noexcept { return micro_count_; }
    std::size_t target_micro() const noexcept { return target_micro_; }
    GradSet& sum() noexcept { return sum_; }
    const GradSet& sum() const noexcept { return sum_; }
    void reset();

private:
    GradSet sum_;
    std::size_t micro_count_ = 0;
    std::size_t target_micro_ = 1;
};

// Returns the pre-clip global L2 norm; rescales in place when it exceeds
// max_norm. Throws DivergenceError on a non-finite gradient.
double clip_global_norm(GradSet& grads, double max_norm);
double clip_global_norm(std::span<double> grads, double max_norm);

// Linear warmup from 0 to peak_lr over warmup_steps, then linear decay to 0 at
// total_steps. Throws ConfigError for step > total_steps.
double lr_at(std::uint64_t step, const AdamConfig& cfg);

// One Adam update on a single tensor. `step` is the 1-based update index used
// for bias correction. Moments are dequantized, updated, and requantized.
void adam8_update(std::span<float> params, std::span<const double> grads, TensorMoments& moments,
                  const AdamConfig& cfg, double lr, std::uint64_t step);

// Applies adam8_update to every adapter matrix and increments step_count.
// Throws DivergenceError (leaving params and state untouched) when any update
// would be non-finite.
void adam8_step(AdapterSet& adapters, const GradSet& grads, OptState& state,
                const AdamConfig& cfg, double lr);

}  // namespace peft
