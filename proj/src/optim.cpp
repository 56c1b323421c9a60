#include "peft_forge/optim.hpp"

#include <cmath>
#include <string>

#include "peft_forge/errors.hpp"

namespace peft {

void AdamConfig::validate() const {
    if (!(beta1 > 0.0 && beta1 < 1.0) || !(beta2 > 0.0 && beta2 < 1.0)) {
        throw ConfigError("adam betas must lie in (0, 1)");
    }
    if (!(eps > 0.0)) {
        throw ConfigError("adam eps must be > 0");
    }
    if (!(weight_decay >= 0.0) || !(peak_lr >= 0.0) || !(max_grad_norm > 0.0)) {
        throw ConfigError("weight_decay and peak_lr must be >= 0, max_grad_norm > 0");
    }
    if (warmup_steps > total_steps) {
        throw ConfigError("warmup_steps (" + std::to_string(warmup_steps) +
                          ") exceeds total_steps (" + std::to_string(total_steps) + ")");
    }
}

TensorMoments zero_moments(std::size_t size, std::size_t block_size) {
    TensorMoments t;
    t.size = size;
    t.block_size = static_cast<std::uint32_t>(block_size);
    const std::vector<float> zeros(size, 0.0f);
    t.m = quant::quantize_q8(zeros, block_size);
    t.v = t.m;
    return t;
}

OptState init_opt_state(const AdapterSet& adapters) {
    OptState st;
    for (const auto& a : adapters) {
        st.tensors.push_back(zero_moments(a.a.size()));
        st.tensors.push_back(zero_moments(a.b.size()));
    }
    return st;
}

// ---------------------------------------------------------------------------

GradAccumulator::GradAccumulator(const AdapterSet& adapters, std::size_t target_micro)
    : sum_(zero_grads(adapters)), target_micro_(target_micro) {
    if (target_micro == 0) {
        throw ConfigError("gradient accumulation target must be >= 1");
    }
}

void GradAccumulator::accumulate(const GradSet& grads) {
    if (micro_count_ >= target_micro_) {
        throw ConfigError("gradient accumulator already holds " + std::to_string(target_micro_) +
                          " micro-batches");
    }
    if (grads.size() != sum_.size()) {
        throw ShapeError("accumulate: gradient set does not match adapters");
    }
    const double scale = 1.0 / static_cast<double>(target_micro_);
    for (std::size_t i = 0; i < sum_.size(); ++i) {
        if (grads[i].a.size() != sum_[i].a.size() || grads[i].b.size() != sum_[i].b.size()) {
            throw ShapeError("accumulate: gradient tensor size mismatch");
        }
        for (std::size_t j = 0; j < sum_[i].a.size(); ++j) {
            sum_[i].a[j] += scale * grads[i].a[j];
        }
        for (std::size_t j = 0; j < sum_[i].b.size(); ++j) {
            sum_[i].b[j] += scale * grads[i].b[j];
        }
    }
    ++micro_count_;
}

void GradAccumulator::reset() {
    for (auto& g : sum_) {
        std::fill(g.a.begin(), g.a.end(), 0.0);
        std::fill(g.b.begin(), g.b.end(), 0.0);
    }
    micro_count_ = 0;
}

// ---------------------------------------------------------------------------

double clip_global_norm(std::span<double> grads, double max_norm) {
    if (!(max_norm > 0.0)) {
        throw ConfigError("max_norm must be > 0");
    }
    double ss = 0.0;
    for (double g : grads) {
        ss += g * g;
    }
    const double norm = std::sqrt(ss);
    if (!std::isfinite(norm)) {
        throw DivergenceError("non-finite gradient norm");
    }
    if (norm > max_norm) {
        const double s = max_norm / norm;
        for (double& g : grads) {
            g *= s;
        }
    }
    return norm;
}

double clip_global_norm(GradSet& grads, double max_norm) {
    if (!(max_norm > 0.0)) {
        throw ConfigError("max_norm must be > 0");
    }
    double ss = 0.0;
    for (const auto& g : grads) {
        for (double x : g.a) {
            ss += x * x;
        }
        for (double x : g.b) {
            ss += x * x;
        }
    }
    const double norm = std::sqrt(ss);
    if (!std::isfinite(norm)) {
        throw DivergenceError("non-finite gradient norm");
    }
    if (norm > max_norm) {
        const double s = max_norm / norm;
        for (auto& g : grads) {
            for (double& x : g.a) {
                x *= s;
            }
            for (double& x : g.b) {
                x *= s;
            }
        }
    }
    return norm;
}

double lr_at(std::uint64_t step, const AdamConfig& cfg) {
    if (step > cfg.total_steps) {
        throw ConfigError("lr_at: step " + std::to_string(step) + " beyond total_steps " +
                          std::to_string(cfg.total_steps));
    }
    if (step < cfg.warmup_steps) {
        return cfg.peak_lr * static_cast<double>(step) / static_cast<double>(cfg.warmup_steps);
    }
    if (cfg.total_steps == cfg.warmup_steps) {
        return cfg.peak_lr;
    }
    const double remaining = static_cast<double>(cfg.total_steps - step);
    return cfg.peak_lr * remaining / static_cast<double>(cfg.total_steps - cfg.warmup_steps);
}

// ---------------------------------------------------------------------------

namespace {

struct PendingUpdate {
    std::vector<float> params;
    TensorMoments moments;
};

PendingUpdate compute_update(std::span<const float> params, std::span<const double> grads,
                             const TensorMoments& moments, const AdamConfig& cfg, double lr,
                             std::uint64_t step) {
    if (params.size() != grads.size() || params.size() != moments.size) {
        throw ShapeError("adam: parameter, gradient and state sizes differ");
    }
    if (!(lr >= 0.0)) {
        throw ConfigError("adam: learning rate must be >= 0");
    }
    const auto m_prev = quant::dequantize_q8(moments.m, moments.size);
    const auto v_prev = quant::dequantize_q8(moments.v, moments.size);

    std::vector<float> m_new(params.size());
    std::vector<float> v_new(params.size());
    PendingUpdate out;
    out.params.assign(params.begin(), params.end());

    const double bc1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(step));
    const double bc2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(step));
    const std::size_t bs = moments.block_size;
    for (std::size_t i = 0; i < params.size(); ++i) {
        const double g = grads[i];
        // A zero v code stands for anything in [0, absmax/254); take the upper
        // edge so the denominator never collapses to eps.
        const auto& vblock = moments.v[i / bs];
        double v_old = v_prev[i];
        if (vblock.codes[i % bs] == 0) {
            v_old = static_cast<double>(vblock.absmax) / (2.0 * quant::kQ8MaxCode);
        }
        const double m = cfg.beta1 * m_prev[i] + (1.0 - cfg.beta1) * g;
        const double v = cfg.beta2 * v_old + (1.0 - cfg.beta2) * g * g;
        const double m_hat = m / bc1;
        const double v_hat = v / bc2;
        double p = params[i];
        p -= lr * cfg.weight_decay * p;
        p -= lr * m_hat / (std::sqrt(v_hat) + cfg.eps);
        // Checked after narrowing: a finite double can still overflow fp32.
        out.params[i] = static_cast<float>(p);
        m_new[i] = static_cast<float>(m);
        v_new[i] = static_cast<float>(v);
        if (!std::isfinite(out.params[i]) || !std::isfinite(m_new[i]) || !std::isfinite(v_new[i])) {
            throw DivergenceError("non-finite Adam update at element " + std::to_string(i),
                                  step);
        }
    }
    out.moments.size = moments.size;
    out.moments.block_size = moments.block_size;
    out.moments.m = quant::quantize_q8(m_new, bs);
    out.moments.v = quant::quantize_q8(v_new, bs);
    return out;
}

}  // namespace

void adam8_update(std::span<float> params, std::span<const double> grads, TensorMoments& moments,
                  const AdamConfig& cfg, double lr, std::uint64_t step) {
    auto upd = compute_update(params, grads, moments, cfg, lr, step);
    std::copy(upd.params.begin(), upd.params.end(), params.begin());
    moments = std::move(upd.moments);
}

void adam8_step(AdapterSet& adapters, const GradSet& grads, OptState& state,
                const AdamConfig& cfg, double lr) {
    if (grads.size() != adapters.size() || state.tensors.size() != 2 * adapters.size()) {
        throw ShapeError("adam8_step: adapters, gradients and optimizer state disagree");
    }
    const std::uint64_t step = state.step_count + 1;
    std::vector<PendingUpdate> pending;
    pending.reserve(state.tensors.size());
    for (std::size_t i = 0; i < adapters.size(); ++i) {
        pending.push_back(
            compute_update(adapters[i].a, grads[i].a, state.tensors[2 * i], cfg, lr, step));
        pending.push_back(
            compute_update(adapters[i].b, grads[i].b, state.tensors[2 * i + 1], cfg, lr, step));
    }
    for (std::size_t i = 0; i < adapters.size(); ++i) {
        adapters[i].a = std::move(pending[2 * i].params);
        adapters[i].b = std::move(pending[2 * i + 1].params);
        state.tensors[2 * i] = std::move(pending[2 * i].moments);
        state.tensors[2 * i + 1] = std::move(pending[2 * i + 1].moments);
    }
    state.step_count = step;
}

}  // namespace peft
