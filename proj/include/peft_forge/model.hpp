#pragma once

// MiniAdvisor: a small decoder-only transformer in the Mistral family layout
// (RMSNorm, rotary positions, grouped-query attention, SiLU-gated MLP, untied
// output head). Base weights are NF4-quantized and frozen; only LoRA adapters
// receive gradients.

#include <array>
#include <cstddef>
#include <cstdint>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "peft_forge/lora.hpp"
#include "peft_forge/quant.hpp"

namespace peft {

struct ModelConfig {
    std::size_t vocab_size = 259;
    std::size_t d_model = 64;
    std::size_t n_layers = 4;
    std::size_t n_heads = 4;
    std::size_t n_kv_heads = 2;
    std::size_t mlp_hidden = 128;
    std::size_t context_len = 256;
    double norm_eps = 1e-5;
    double rope_base = 10000.0;
    std::uint64_t seed = 0;
    // Standard deviation of the frozen projection weights.
    float init_std = 0.02f;
    // Standard deviation of the frozen token embedding.
    float embed_std = 0.02f;
    // Standard deviation of the frozen output head.
    float head_std = 0.02f;

    // Throws ConfigError when a divisibility or size invariant fails.
    void validate() const;

    std::size_t head_dim() const noexcept { return d_model / n_heads; }
    std::size_t kv_dim() const noexcept { return n_kv_heads * head_dim(); }
    ModelShape shape() const;

    friend bool operator==(const ModelConfig&, const ModelConfig&) = default;
};

ModelConfig mini_advisor_config();

// One training example: token ids and per-token label flags. Position t's
// logits are scored against token t+1 when label_mask[t+1] is set.
struct Sequence {
    std::vector<std::int32_t> tokens;
    std::vector<std::uint8_t> label_mask;
};

struct BatchLoss {
    double loss = 0.0;            // mean over sequences of per-sequence mean cross-entropy (nats)
    std::size_t token_count = 0;  // labelled tokens across the batch
};

// Gradient buffers for one adapter, laid out like its a / b matrices.
struct AdapterGrad {
    std::vector<double> a;
    std::vector<double> b;
};
using GradSet = std::vector<AdapterGrad>;

GradSet zero_grads(const AdapterSet& adapters);

namespace detail {

struct LayerCache {
    std::vector<double> x_in;  // T x d
    std::vector<double> rms_attn;
    std::vector<double> h;     // normalized input to attention
    std::vector<double> q;     // T x d, after rotary
    std::vector<double> k;     // T x kv, after rotary
    std::vector<double> v;     // T x kv
    std::vector<double> probs; // heads x T x T, causal rows
    std::vector<double> att;   // T x d
    std::vector<double> x_mid; // residual after attention
    std::vector<double> rms_mlp;
    std::vector<double> h2;    // normalized input to MLP
    std::vector<double> gate;  // T x hidden, pre-activation
    std::vector<double> up;
    std::vector<double> act;   // silu(gate) * up
    std::array<std::vector<double>, kNumTargets> lora_u;  // T x rank per adapted target
    bool complete = false;     // false when only x_in was kept
};

struct SequenceTape {
    std::size_t length = 0;               // positions fed through the network
    std::vector<std::int32_t> targets;    // token at t + 1
    std::vector<double> weights;          // d loss / d (-log p_target) per position
    std::vector<LayerCache> layers;
    std::vector<double> x_final;          // residual stream entering the final norm
    std::vector<double> rms_final;
    std::vector<double> xf;               // normalized final hidden
    std::vector<double> probs;            // T x vocab softmax, empty when recomputed
};

}  // namespace detail

// Activations recorded by forward_loss for backward_lora. With checkpointing
// only each layer's input is kept and the rest is recomputed during backward.
class Tape {
public:
    bool checkpointed() const noexcept { return checkpointed_; }
    std::size_t sequence_count() const noexcept { return seqs_.size(); }
    // heads x T x T attention probabilities of one layer. Empty when checkpointed.
    std::span<const double> attention_probs(std::size_t seq, std::size_t layer) const;

private:
    friend class QuantizedModel;
    const void* model_ = nullptr;
    std::uint64_t adapter_fingerprint_ = 0;
    bool checkpointed_ = false;
    std::vector<detail::SequenceTape> seqs_;
};

class QuantizedModel {
public:
    // Draws base weights Normal(0, std) from the config seed, quantizes them to
    // NF4 with double-quantized scales, and freezes them.
    explicit QuantizedModel(const ModelConfig& config);

    const ModelConfig& config() const noexcept { return config_; }

    // Frozen base weights in a stable order: "embedding", "layers.N.{q,k,v,o,gate,up,down}", "head".
    const std::vector<std::pair<std::string, quant::QuantizedTensor>>& quantized_tensors()
        const noexcept {
        return tensors_;
    }

    // Full-precision values the quantized tensors were built from, regenerated from the seed.
    static std::vector<std::pair<std::string, std::vector<float>>> draw_base_weights(
        const ModelConfig& config);

    BatchLoss forward_loss(const AdapterSet& adapters, std::span<const Sequence> batch,
                           Tape* tape = nullptr, bool checkpoint = false) const;
    GradSet backward_lora(const AdapterSet& adapters, const Tape& tape) const;

    // T x vocab logits for every position of `tokens`.
    std::vector<double> logits(const AdapterSet& adapters,
                               std::span<const std::int32_t> tokens) const;

    // Dequantized view of a projection (d_out x d_in, row-major).
    std::span<const double> dense_weight(std::size_t layer, Target target) const;

private:
    struct DenseLayer {
        std::array<std::vector<double>, kNumTargets> w;   // d_out x d_in
        std::array<std::vector<double>, kNumTargets> wt;  // d_in x d_out
        std::vector<double> attn_norm;
        std::vector<double> mlp_norm;
    };

    friend class IncrementalDecoder;

    void check_adapters(const AdapterSet& adapters) const;
    void check_tokens(std::span<const std::int32_t> tokens) const;
    void layer_forward(std::size_t l, const AdapterSet& adapters, std::size_t T,
                       detail::LayerCache& c, std::vector<double>& x) const;
    void layer_backward(std::size_t l, const AdapterSet& adapters, std::size_t T,
                        const detail::LayerCache& c, std::vector<double>& dx, GradSet& grads) const;
    void head_forward(std::size_t T, detail::SequenceTape& st) const;
    void embed(std::span<const std::int32_t> tokens, std::vector<double>& x) const;
    std::vector<std::size_t> target_dims_in() const;

    ModelConfig config_;
    std::vector<std::pair<std::string, quant::QuantizedTensor>> tensors_;
    std::vector<double> embedding_;  // vocab x d
    std::vector<DenseLayer> layers_;
    std::vector<double> final_norm_;
    std::vector<double> head_;   // vocab x d
    std::vector<double> head_t_; // d x vocab
    std::vector<double> rope_cos_;  // context x head_dim/2
    std::vector<double> rope_sin_;
};

// model_init
inline QuantizedModel model_init(const ModelConfig& config) { return QuantizedModel(config); }

// Position-by-position decoding with cached keys and values. Produces the same
// logits as QuantizedModel::logits on the corresponding prefix.
class IncrementalDecoder {
public:
    IncrementalDecoder(const QuantizedModel& model, const AdapterSet& adapters);

    // Feeds one token at the next position and returns its vocab logits.
    std::vector<double> step(std::int32_t token);
    std::size_t position() const noexcept { return pos_; }

private:
    const QuantizedModel& model_;
    const AdapterSet& adapters_;
    std::size_t pos_ = 0;
    std::vector<std::vector<double>> k_cache_;  // per layer: context x kv
    std::vector<std::vector<double>> v_cache_;
};

struct GenerateOptions {
    std::size_t max_new = 128;
    double temperature = 0.0;  // 0 selects greedy decoding
    std::uint64_t seed = 0;
    std::int32_t end_token = 257;
};

// Returns the prompt followed by generated tokens, stopping after end_token,
// max_new tokens, or a full context. Throws ConfigError on an empty prompt or
// one that does not leave room for a new token.
std::vector<std::int32_t> generate(const QuantizedModel& model, const AdapterSet& adapters,
                                   std::span<const std::int32_t> prompt,
                                   const GenerateOptions& options);

}  // namespace peft
