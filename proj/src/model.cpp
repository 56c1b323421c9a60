#include "peft_forge/model.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>

#include "peft_forge/errors.hpp"
#include "peft_forge/rng.hpp"

namespace peft {
namespace {

// y[t] = W x[t] for T rows, with W given transposed (d_in x d_out) so the inner
// loop is a contiguous axpy.
void matmul_rows(const double* wt, const double* x, std::size_t T, std::size_t din,
                 std::size_t dout, double* y) {
    for (std::size_t t = 0; t < T; ++t) {
        double* yt = y + t * dout;
        std::fill(yt, yt + dout, 0.0);
        const double* xt = x + t * din;
        for (std::size_t i = 0; i < din; ++i) {
            const double xi = xt[i];
            const double* row = wt + i * dout;
            for (std::size_t o = 0; o < dout; ++o) {
                yt[o] += xi * row[o];
            }
        }
    }
}

// dx[t] += W^T dy[t], with W in d_out x d_in layout.
void matmul_rows_backward(const double* w, const double* dy, std::size_t T, std::size_t din,
                          std::size_t dout, double* dx) {
    for (std::size_t t = 0; t < T; ++t) {
        const double* dyt = dy + t * dout;
        double* dxt = dx + t * din;
        for (std::size_t o = 0; o < dout; ++o) {
            const double g = dyt[o];
            if (g == 0.0) {
                continue;
            }
            const double* row = w + o * din;
            for (std::size_t i = 0; i < din; ++i) {
                dxt[i] += g * row[i];
            }
        }
    }
}

void rmsnorm_rows(const double* x, std::size_t T, std::size_t d, const double* gain, double eps,
                  double* y, double* rms_inv) {
    for (std::size_t t = 0; t < T; ++t) {
        const double* xt = x + t * d;
        double ss = 0.0;
        for (std::size_t j = 0; j < d; ++j) {
            ss += xt[j] * xt[j];
        }
        const double r = 1.0 / std::sqrt(ss / static_cast<double>(d) + eps);
        rms_inv[t] = r;
        double* yt = y + t * d;
        for (std::size_t j = 0; j < d; ++j) {
            yt[j] = xt[j] * r * gain[j];
        }
    }
}

void rmsnorm_rows_backward(const double* x, const double* rms_inv, const double* gain,
                           const double* dy, std::size_t T, std::size_t d, double* dx) {
    for (std::size_t t = 0; t < T; ++t) {
        const double* xt = x + t * d;
        const double* dyt = dy + t * d;
        double dot = 0.0;
        for (std::size_t j = 0; j < d; ++j) {
            dot += gain[j] * dyt[j] * xt[j];
        }
        const double r = rms_inv[t];
        const double coef = r * r * r * dot / static_cast<double>(d);
        double* dxt = dx + t * d;
        for (std::size_t j = 0; j < d; ++j) {
            dxt[j] += r * gain[j] * dyt[j] - coef * xt[j];
        }
    }
}

double sigmoid(double z) { return 1.0 / (1.0 + std::exp(-z)); }

}  // namespace

// ---------------------------------------------------------------------------
// Config

void ModelConfig::validate() const {
    if (vocab_size < 1 || d_model < 1 || n_layers < 1 || n_heads < 1 || n_kv_heads < 1 ||
        mlp_hidden < 1) {
        throw ConfigError("model dimensions must all be >= 1");
    }
    if (d_model % n_heads != 0) {
        throw ConfigError("d_model (" + std::to_string(d_model) + ") must be divisible by n_heads (" +
                          std::to_string(n_heads) + ")");
    }
    if (n_heads % n_kv_heads != 0) {
        throw ConfigError("n_heads must be divisible by n_kv_heads");
    }
    if (head_dim() % 2 != 0) {
        throw ConfigError("head_dim must be even for rotary embeddings");
    }
    if (context_len < 2) {
        throw ConfigError("context_len must be >= 2");
    }
    if (!(norm_eps > 0.0) || !(rope_base > 0.0)) {
        throw ConfigError("norm_eps and rope_base must be positive");
    }
    if (!(init_std >= 0.0f) || !(embed_std >= 0.0f) || !(head_std >= 0.0f)) {
        throw ConfigError("init standard deviations must be >= 0");
    }
}

ModelShape ModelConfig::shape() const {
    ModelShape s;
    s.name = "mini";
    s.n_layers = n_layers;
    s.d_model = d_model;
    s.vocab_size = vocab_size;
    s.context_len = context_len;
    const std::size_t kv = kv_dim();
    s.projections = {{{d_model, d_model}, {d_model, kv}, {d_model, kv}, {d_model, d_model},
                      {d_model, mlp_hidden}, {d_model, mlp_hidden}, {mlp_hidden, d_model}}};
    std::uint64_t per_layer = 2 * d_model;
    for (const auto& p : s.projections) {
        per_layer += static_cast<std::uint64_t>(p.d_in) * p.d_out;
    }
    s.total_params = per_layer * n_layers + 2ULL * vocab_size * d_model + d_model;
    s.nominal_params = s.total_params;
    return s;
}

ModelConfig mini_advisor_config() { return ModelConfig{}; }

GradSet zero_grads(const AdapterSet& adapters) {
    GradSet g(adapters.size());
    for (std::size_t i = 0; i < adapters.size(); ++i) {
        g[i].a.assign(adapters[i].a.size(), 0.0);
        g[i].b.assign(adapters[i].b.size(), 0.0);
    }
    return g;
}

std::span<const double> Tape::attention_probs(std::size_t seq, std::size_t layer) const {
    if (seq >= seqs_.size() || layer >= seqs_[seq].layers.size()) {
        throw ShapeError("attention_probs: index out of range");
    }
    return seqs_[seq].layers[layer].probs;
}

// ---------------------------------------------------------------------------
// Construction

std::vector<std::pair<std::string, std::vector<float>>> QuantizedModel::draw_base_weights(
    const ModelConfig& config) {
    config.validate();
    Rng rng(config.seed);
    std::vector<std::pair<std::string, std::vector<float>>> out;
    auto draw = [&rng](std::size_t n, float stddev) {
        std::vector<float> w(n);
        for (auto& v : w) {
            v = static_cast<float>(rng.normal(0.0, stddev));
        }
        return w;
    };
    const ModelShape shape = config.shape();
    out.emplace_back("embedding", draw(config.vocab_size * config.d_model, config.embed_std));
    for (std::size_t l = 0; l < config.n_layers; ++l) {
        for (auto t : kAllTargets) {
            const auto& d = shape.dims(t);
            out.emplace_back("layers." + std::to_string(l) + "." + std::string(target_name(t)),
                             draw(d.d_in * d.d_out, config.init_std));
        }
    }
    out.emplace_back("head", draw(config.vocab_size * config.d_model, config.head_std));
    return out;
}

QuantizedModel::QuantizedModel(const ModelConfig& config) : config_(config) {
    config_.validate();
    const ModelShape shape = config_.shape();
    const std::size_t d = config_.d_model;

    auto raw = draw_base_weights(config_);
    std::size_t idx = 0;
    auto next_dense = [&](std::vector<std::size_t> dims) {
        auto& [name, values] = raw[idx++];
        auto q = quant::quantize_nf4(values, std::move(dims)).with_double_quantized_scales();
        auto deq = quant::dequantize_nf4(q);
        tensors_.emplace_back(name, std::move(q));
        return std::vector<double>(deq.begin(), deq.end());
    };

    embedding_ = next_dense({config_.vocab_size, d});
    layers_.resize(config_.n_layers);
    for (auto& layer : layers_) {
        for (auto t : kAllTargets) {
            const auto& pd = shape.dims(t);
            const auto ti = static_cast<std::size_t>(t);
            layer.w[ti] = next_dense({pd.d_out, pd.d_in});
            layer.wt[ti].resize(pd.d_in * pd.d_out);
            for (std::size_t o = 0; o < pd.d_out; ++o) {
                for (std::size_t i = 0; i < pd.d_in; ++i) {
                    layer.wt[ti][i * pd.d_out + o] = layer.w[ti][o * pd.d_in + i];
                }
            }
        }
        layer.attn_norm.assign(d, 1.0);
        layer.mlp_norm.assign(d, 1.0);
    }
    head_ = next_dense({config_.vocab_size, d});
    head_t_.resize(head_.size());
    for (std::size_t v = 0; v < config_.vocab_size; ++v) {
        for (std::size_t j = 0; j < d; ++j) {
            head_t_[j * config_.vocab_size + v] = head_[v * d + j];
        }
    }
    final_norm_.assign(d, 1.0);

    const std::size_t half = config_.head_dim() / 2;
    rope_cos_.resize(config_.context_len * half);
    rope_sin_.resize(config_.context_len * half);
    for (std::size_t pos = 0; pos < config_.context_len; ++pos) {
        for (std::size_t i = 0; i < half; ++i) {
            const double theta = std::pow(config_.rope_base, -2.0 * static_cast<double>(i) /
                                                                 static_cast<double>(config_.head_dim()));
            const double angle = static_cast<double>(pos) * theta;
            rope_cos_[pos * half + i] = std::cos(angle);
            rope_sin_[pos * half + i] = std::sin(angle);
        }
    }
}

std::span<const double> QuantizedModel::dense_weight(std::size_t layer, Target target) const {
    if (layer >= layers_.size()) {
        throw ShapeError("dense_weight: layer out of range");
    }
    return layers_[layer].w[static_cast<std::size_t>(target)];
}

void QuantizedModel::check_adapters(const AdapterSet& adapters) const {
    const ModelShape shape = config_.shape();
    for (const auto& a : adapters) {
        if (a.layer >= config_.n_layers) {
            throw ShapeError("adapter layer " + std::to_string(a.layer) + " outside the model");
        }
        const auto& pd = shape.dims(a.target);
        if (a.d_in != pd.d_in || a.d_out != pd.d_out || a.a.size() != a.rank * a.d_in ||
            a.b.size() != a.d_out * a.rank) {
            throw ShapeError("adapter for layer " + std::to_string(a.layer) + " target " +
                             std::string(target_name(a.target)) +
                             " does not match the projection shape");
        }
    }
}

void QuantizedModel::check_tokens(std::span<const std::int32_t> tokens) const {
    for (auto tok : tokens) {
        if (tok < 0 || static_cast<std::size_t>(tok) >= config_.vocab_size) {
            throw ConfigError("token id " + std::to_string(tok) + " outside vocabulary of " +
                              std::to_string(config_.vocab_size));
        }
    }
}

// ---------------------------------------------------------------------------
// Layer math

namespace {

void apply_rope(double* x, std::size_t T, std::size_t start_pos, std::size_t heads,
                std::size_t hd, const std::vector<double>& cos_t, const std::vector<double>& sin_t,
                bool inverse) {
    const std::size_t half = hd / 2;
    const std::size_t width = heads * hd;
    for (std::size_t t = 0; t < T; ++t) {
        const double* c = cos_t.data() + (start_pos + t) * half;
        const double* s = sin_t.data() + (start_pos + t) * half;
        for (std::size_t h = 0; h < heads; ++h) {
            double* v = x + t * width + h * hd;
            for (std::size_t i = 0; i < half; ++i) {
                const double a = v[2 * i];
                const double b = v[2 * i + 1];
                const double sn = inverse ? -s[i] : s[i];
                v[2 * i] = a * c[i] - b * sn;
                v[2 * i + 1] = a * sn + b * c[i];
            }
        }
    }
}

}  // namespace

void QuantizedModel::layer_forward(std::size_t l, const AdapterSet& adapters, std::size_t T,
                                   detail::LayerCache& c, std::vector<double>& x) const {
    const auto& cfg = config_;
    const auto& W = layers_[l];
    const std::size_t d = cfg.d_model;
    const std::size_t kv = cfg.kv_dim();
    const std::size_t hd = cfg.head_dim();
    const std::size_t H = cfg.n_heads;
    const std::size_t hidden = cfg.mlp_hidden;
    const std::size_t group = cfg.n_heads / cfg.n_kv_heads;

    auto project = [&](Target target, const std::vector<double>& in, std::size_t din,
                       std::size_t dout, std::vector<double>& out) {
        const auto ti = static_cast<std::size_t>(target);
        out.resize(T * dout);
        matmul_rows(W.wt[ti].data(), in.data(), T, din, dout, out.data());
        if (const auto* a = adapters.find(l, target)) {
            c.lora_u[ti].resize(T * a->rank);
            lora_forward_rows(*a, in, T, c.lora_u[ti], out);
        } else {
            c.lora_u[ti].clear();
        }
    };

    c.x_in = x;
    c.h.resize(T * d);
    c.rms_attn.resize(T);
    rmsnorm_rows(x.data(), T, d, W.attn_norm.data(), cfg.norm_eps, c.h.data(), c.rms_attn.data());

    project(Target::Q, c.h, d, d, c.q);
    project(Target::K, c.h, d, kv, c.k);
    project(Target::V, c.h, d, kv, c.v);
    apply_rope(c.q.data(), T, 0, H, hd, rope_cos_, rope_sin_, false);
    apply_rope(c.k.data(), T, 0, cfg.n_kv_heads, hd, rope_cos_, rope_sin_, false);

    const double scale = 1.0 / std::sqrt(static_cast<double>(hd));
    c.probs.assign(H * T * T, 0.0);
    c.att.assign(T * d, 0.0);
    for (std::size_t h = 0; h < H; ++h) {
        const std::size_t g = h / group;
        for (std::size_t t = 0; t < T; ++t) {
            const double* qv = c.q.data() + t * d + h * hd;
            double* row = c.probs.data() + (h * T + t) * T;
            double mx = -std::numeric_limits<double>::infinity();
            for (std::size_t j = 0; j <= t; ++j) {
                const double* kvec = c.k.data() + j * kv + g * hd;
                double s = 0.0;
                for (std::size_t e = 0; e < hd; ++e) {
                    s += qv[e] * kvec[e];
                }
                row[j] = s * scale;
                mx = std::max(mx, row[j]);
            }
            double sum = 0.0;
            for (std::size_t j = 0; j <= t; ++j) {
                row[j] = std::exp(row[j] - mx);
                sum += row[j];
            }
            double* out = c.att.data() + t * d + h * hd;
            for (std::size_t j = 0; j <= t; ++j) {
                row[j] /= sum;
                const double* vvec = c.v.data() + j * kv + g * hd;
                for (std::size_t e = 0; e < hd; ++e) {
                    out[e] += row[j] * vvec[e];
                }
            }
        }
    }

    std::vector<double> o;
    project(Target::O, c.att, d, d, o);
    c.x_mid.resize(T * d);
    for (std::size_t i = 0; i < T * d; ++i) {
        c.x_mid[i] = x[i] + o[i];
    }

    c.h2.resize(T * d);
    c.rms_mlp.resize(T);
    rmsnorm_rows(c.x_mid.data(), T, d, W.mlp_norm.data(), cfg.norm_eps, c.h2.data(),
                 c.rms_mlp.data());
    project(Target::Gate, c.h2, d, hidden, c.gate);
    project(Target::Up, c.h2, d, hidden, c.up);
    c.act.resize(T * hidden);
    for (std::size_t i = 0; i < T * hidden; ++i) {
        const double z = c.gate[i];
        c.act[i] = z * sigmoid(z) * c.up[i];
    }
    std::vector<double> down;
    project(Target::Down, c.act, hidden, d, down);
    for (std::size_t i = 0; i < T * d; ++i) {
        x[i] = c.x_mid[i] + down[i];
    }
    c.complete = true;
}

void QuantizedModel::layer_backward(std::size_t l, const AdapterSet& adapters, std::size_t T,
                                    const detail::LayerCache& c, std::vector<double>& dx,
                                    GradSet& grads) const {
    const auto& cfg = config_;
    const auto& W = layers_[l];
    const std::size_t d = cfg.d_model;
    const std::size_t kv = cfg.kv_dim();
    const std::size_t hd = cfg.head_dim();
    const std::size_t H = cfg.n_heads;
    const std::size_t hidden = cfg.mlp_hidden;
    const std::size_t group = cfg.n_heads / cfg.n_kv_heads;

    // dy is d loss / d output of the projection; adds d loss / d input into din_accum.
    auto project_back = [&](Target target, const std::vector<double>& in, std::size_t din,
                            std::size_t dout, const std::vector<double>& dy,
                            std::vector<double>& din_accum) {
        const auto ti = static_cast<std::size_t>(target);
        matmul_rows_backward(W.w[ti].data(), dy.data(), T, din, dout, din_accum.data());
        if (const auto idx = adapters.index_of(l, target)) {
            lora_backward_rows(adapters[*idx], in, c.lora_u[ti], dy, T, grads[*idx].a,
                               grads[*idx].b, din_accum);
        }
    };

    // MLP
    std::vector<double> d_act(T * hidden, 0.0);
    project_back(Target::Down, c.act, hidden, d, dx, d_act);
    std::vector<double> d_gate(T * hidden);
    std::vector<double> d_up(T * hidden);
    for (std::size_t i = 0; i < T * hidden; ++i) {
        const double z = c.gate[i];
        const double sg = sigmoid(z);
        const double silu = z * sg;
        d_up[i] = d_act[i] * silu;
        d_gate[i] = d_act[i] * c.up[i] * sg * (1.0 + z * (1.0 - sg));
    }
    std::vector<double> d_h2(T * d, 0.0);
    project_back(Target::Gate, c.h2, d, hidden, d_gate, d_h2);
    project_back(Target::Up, c.h2, d, hidden, d_up, d_h2);
    std::vector<double> dx_mid = dx;
    rmsnorm_rows_backward(c.x_mid.data(), c.rms_mlp.data(), W.mlp_norm.data(), d_h2.data(), T, d,
                          dx_mid.data());

    // Attention
    std::vector<double> d_att(T * d, 0.0);
    project_back(Target::O, c.att, d, d, dx_mid, d_att);
    std::vector<double> dq(T * d, 0.0);
    std::vector<double> dk(T * kv, 0.0);
    std::vector<double> dv(T * kv, 0.0);
    std::vector<double> dp(T);
    const double scale = 1.0 / std::sqrt(static_cast<double>(hd));
    for (std::size_t h = 0; h < H; ++h) {
        const std::size_t g = h / group;
        for (std::size_t t = 0; t < T; ++t) {
            const double* dout = d_att.data() + t * d + h * hd;
            const double* row = c.probs.data() + (h * T + t) * T;
            double pdp = 0.0;
            for (std::size_t j = 0; j <= t; ++j) {
                const double* vvec = c.v.data() + j * kv + g * hd;
                double* dvvec = dv.data() + j * kv + g * hd;
                double s = 0.0;
                for (std::size_t e = 0; e < hd; ++e) {
                    s += dout[e] * vvec[e];
                    dvvec[e] += row[j] * dout[e];
                }
                dp[j] = s;
                pdp += row[j] * s;
            }
            const double* qv = c.q.data() + t * d + h * hd;
            double* dqv = dq.data() + t * d + h * hd;
            for (std::size_t j = 0; j <= t; ++j) {
                const double ds = row[j] * (dp[j] - pdp) * scale;
                const double* kvec = c.k.data() + j * kv + g * hd;
                double* dkvec = dk.data() + j * kv + g * hd;
                for (std::size_t e = 0; e < hd; ++e) {
                    dqv[e] += ds * kvec[e];
                    dkvec[e] += ds * qv[e];
                }
            }
        }
    }
    apply_rope(dq.data(), T, 0, H, hd, rope_cos_, rope_sin_, true);
    apply_rope(dk.data(), T, 0, cfg.n_kv_heads, hd, rope_cos_, rope_sin_, true);

    std::vector<double> d_h(T * d, 0.0);
    project_back(Target::Q, c.h, d, d, dq, d_h);
    project_back(Target::K, c.h, d, kv, dk, d_h);
    project_back(Target::V, c.h, d, kv, dv, d_h);
    rmsnorm_rows_backward(c.x_in.data(), c.rms_attn.data(), W.attn_norm.data(), d_h.data(), T, d,
                          dx_mid.data());
    dx = std::move(dx_mid);
}

void QuantizedModel::embed(std::span<const std::int32_t> tokens, std::vector<double>& x) const {
    const std::size_t d = config_.d_model;
    x.resize(tokens.size() * d);
    for (std::size_t t = 0; t < tokens.size(); ++t) {
        std::copy_n(embedding_.data() + static_cast<std::size_t>(tokens[t]) * d, d,
                    x.data() + t * d);
    }
}

// Fills rms_final, xf and raw logits (stored in st.probs) from st.x_final.
void QuantizedModel::head_forward(std::size_t T, detail::SequenceTape& st) const {
    const std::size_t d = config_.d_model;
    const std::size_t V = config_.vocab_size;
    st.xf.resize(T * d);
    st.rms_final.resize(T);
    rmsnorm_rows(st.x_final.data(), T, d, final_norm_.data(), config_.norm_eps, st.xf.data(),
                 st.rms_final.data());
    st.probs.resize(T * V);
    matmul_rows(head_t_.data(), st.xf.data(), T, d, V, st.probs.data());
}

namespace {

// In-place softmax of each row; returns log-sum-exp per row.
std::vector<double> softmax_rows(std::vector<double>& logits, std::size_t T, std::size_t V) {
    std::vector<double> lse(T);
    for (std::size_t t = 0; t < T; ++t) {
        double* row = logits.data() + t * V;
        const double mx = *std::max_element(row, row + V);
        double sum = 0.0;
        for (std::size_t v = 0; v < V; ++v) {
            sum += std::exp(row[v] - mx);
        }
        lse[t] = mx + std::log(sum);
        for (std::size_t v = 0; v < V; ++v) {
            row[v] = std::exp(row[v] - lse[t]);
        }
    }
    return lse;
}

}  // namespace

// ---------------------------------------------------------------------------
// Loss, gradients, logits

BatchLoss QuantizedModel::forward_loss(const AdapterSet& adapters, std::span<const Sequence> batch,
                                       Tape* tape, bool checkpoint) const {
    if (batch.empty()) {
        throw ConfigError("forward_loss: empty batch");
    }
    check_adapters(adapters);
    const std::size_t V = config_.vocab_size;

    if (tape != nullptr) {
        tape->model_ = this;
        tape->adapter_fingerprint_ = adapters.fingerprint();
        tape->checkpointed_ = checkpoint;
        tape->seqs_.clear();
        tape->seqs_.reserve(batch.size());
    }

    BatchLoss result;
    double loss_sum = 0.0;
    detail::LayerCache scratch;
    const double n_seq = static_cast<double>(batch.size());

    for (std::size_t s = 0; s < batch.size(); ++s) {
        const auto& seq = batch[s];
        if (seq.tokens.size() != seq.label_mask.size()) {
            throw ShapeError("sequence " + std::to_string(s) + ": tokens and label_mask differ in length");
        }
        if (seq.tokens.size() > config_.context_len) {
            throw ConfigError("sequence " + std::to_string(s) + " has length " +
                              std::to_string(seq.tokens.size()) + " > context_len " +
                              std::to_string(config_.context_len));
        }
        std::size_t last_label = 0;
        std::size_t n_labels = 0;
        for (std::size_t t = 1; t < seq.tokens.size(); ++t) {
            if (seq.label_mask[t] != 0) {
                last_label = t;
                ++n_labels;
            }
        }
        if (n_labels == 0) {
            throw ConfigError("sequence " + std::to_string(s) + " has no unmasked labels");
        }
        const std::size_t T = last_label;  // inputs 0..T-1 predict tokens 1..T
        const auto inputs = std::span(seq.tokens).first(T);
        check_tokens(std::span(seq.tokens).first(T + 1));

        detail::SequenceTape st;
        st.length = T;
        st.targets.resize(T);
        st.weights.assign(T, 0.0);
        const double w = 1.0 / (n_seq * static_cast<double>(n_labels));
        for (std::size_t t = 0; t < T; ++t) {
            st.targets[t] = seq.tokens[t + 1];
            if (seq.label_mask[t + 1] != 0) {
                st.weights[t] = w;
            }
        }

        std::vector<double> x;
        embed(inputs, x);
        if (tape != nullptr) {
            st.layers.resize(config_.n_layers);
        }
        for (std::size_t l = 0; l < config_.n_layers; ++l) {
            if (tape != nullptr && !checkpoint) {
                layer_forward(l, adapters, T, st.layers[l], x);
            } else {
                layer_forward(l, adapters, T, scratch, x);
                if (tape != nullptr) {
                    st.layers[l].x_in = std::move(scratch.x_in);
                    st.layers[l].complete = false;
                }
            }
        }
        st.x_final = std::move(x);
        head_forward(T, st);
        std::vector<double> target_logit(T);
        for (std::size_t t = 0; t < T; ++t) {
            target_logit[t] = st.probs[t * V + static_cast<std::size_t>(st.targets[t])];
        }
        const auto lse = softmax_rows(st.probs, T, V);

        double seq_loss = 0.0;
        for (std::size_t t = 0; t < T; ++t) {
            if (st.weights[t] != 0.0) {
                seq_loss += lse[t] - target_logit[t];
            }
        }
        loss_sum += seq_loss / static_cast<double>(n_labels);
        result.token_count += n_labels;

        if (tape != nullptr) {
            if (checkpoint) {
                st.probs.clear();
                st.probs.shrink_to_fit();
                st.xf.clear();
                st.rms_final.clear();
            }
            tape->seqs_.push_back(std::move(st));
        }
    }
    result.loss = loss_sum / n_seq;
    return result;
}

GradSet QuantizedModel::backward_lora(const AdapterSet& adapters, const Tape& tape) const {
    if (tape.model_ != this) {
        throw IntegrityError("backward_lora: tape was recorded on a different model");
    }
    if (tape.adapter_fingerprint_ != adapters.fingerprint()) {
        throw IntegrityError("backward_lora: stale tape (adapters changed since forward)");
    }
    const std::size_t d = config_.d_model;
    const std::size_t V = config_.vocab_size;
    GradSet grads = zero_grads(adapters);

    for (const auto& st_const : tape.seqs_) {
        const std::size_t T = st_const.length;
        detail::SequenceTape head_tmp;
        const detail::SequenceTape* st = &st_const;
        if (st_const.probs.empty()) {
            head_tmp.x_final = st_const.x_final;
            head_forward(T, head_tmp);
            softmax_rows(head_tmp.probs, T, V);
            st = &head_tmp;
        }

        std::vector<double> dlogits(T * V, 0.0);
        for (std::size_t t = 0; t < T; ++t) {
            const double w = st_const.weights[t];
            if (w == 0.0) {
                continue;
            }
            const double* p = st->probs.data() + t * V;
            double* g = dlogits.data() + t * V;
            for (std::size_t v = 0; v < V; ++v) {
                g[v] = w * p[v];
            }
            g[static_cast<std::size_t>(st_const.targets[t])] -= w;
        }
        std::vector<double> dxf(T * d, 0.0);
        matmul_rows_backward(head_.data(), dlogits.data(), T, d, V, dxf.data());
        std::vector<double> dx(T * d, 0.0);
        rmsnorm_rows_backward(st_const.x_final.data(), st->rms_final.data(), final_norm_.data(),
                              dxf.data(), T, d, dx.data());

        detail::LayerCache recomputed;
        for (std::size_t l = config_.n_layers; l-- > 0;) {
            const auto& cache = st_const.layers[l];
            if (cache.complete) {
                layer_backward(l, adapters, T, cache, dx, grads);
            } else {
                std::vector<double> x = cache.x_in;
                layer_forward(l, adapters, T, recomputed, x);
                layer_backward(l, adapters, T, recomputed, dx, grads);
            }
        }
    }
    return grads;
}

std::vector<double> QuantizedModel::logits(const AdapterSet& adapters,
                                           std::span<const std::int32_t> tokens) const {
    if (tokens.empty() || tokens.size() > config_.context_len) {
        throw ConfigError("logits: token count must be in 1..context_len");
    }
    check_adapters(adapters);
    check_tokens(tokens);
    const std::size_t T = tokens.size();
    std::vector<double> x;
    embed(tokens, x);
    detail::LayerCache scratch;
    for (std::size_t l = 0; l < config_.n_layers; ++l) {
        layer_forward(l, adapters, T, scratch, x);
    }
    detail::SequenceTape st;
    st.x_final = std::move(x);
    head_forward(T, st);
    return std::move(st.probs);
}

// ---------------------------------------------------------------------------
// Incremental decoding

IncrementalDecoder::IncrementalDecoder(const QuantizedModel& model, const AdapterSet& adapters)
    : model_(model), adapters_(adapters) {
    model_.check_adapters(adapters_);
    const auto& cfg = model_.config_;
    k_cache_.assign(cfg.n_layers, std::vector<double>(cfg.context_len * cfg.kv_dim(), 0.0));
    v_cache_.assign(cfg.n_layers, std::vector<double>(cfg.context_len * cfg.kv_dim(), 0.0));
}

std::vector<double> IncrementalDecoder::step(std::int32_t token) {
    const auto& cfg = model_.config_;
    if (pos_ >= cfg.context_len) {
        throw ConfigError("decoder: context of " + std::to_string(cfg.context_len) + " is full");
    }
    model_.check_tokens(std::span(&token, 1));
    const std::size_t d = cfg.d_model;
    const std::size_t kv = cfg.kv_dim();
    const std::size_t hd = cfg.head_dim();
    const std::size_t hidden = cfg.mlp_hidden;
    const std::size_t group = cfg.n_heads / cfg.n_kv_heads;
    const std::size_t p = pos_;

    std::vector<double> x;
    model_.embed(std::span(&token, 1), x);
    std::vector<double> h(d), h2(d), q, k, v, o, gate, up, down, u;
    double rms = 0.0;

    for (std::size_t l = 0; l < cfg.n_layers; ++l) {
        const auto& W = model_.layers_[l];
        auto project = [&](Target target, const std::vector<double>& in, std::size_t din,
                           std::size_t dout, std::vector<double>& out) {
            const auto ti = static_cast<std::size_t>(target);
            out.resize(dout);
            matmul_rows(W.wt[ti].data(), in.data(), 1, din, dout, out.data());
            if (const auto* a = adapters_.find(l, target)) {
                u.resize(a->rank);
                lora_forward_rows(*a, in, 1, u, out);
            }
        };
        rmsnorm_rows(x.data(), 1, d, W.attn_norm.data(), cfg.norm_eps, h.data(), &rms);
        project(Target::Q, h, d, d, q);
        project(Target::K, h, d, kv, k);
        project(Target::V, h, d, kv, v);
        apply_rope(q.data(), 1, p, cfg.n_heads, hd, model_.rope_cos_, model_.rope_sin_, false);
        apply_rope(k.data(), 1, p, cfg.n_kv_heads, hd, model_.rope_cos_, model_.rope_sin_, false);
        std::copy(k.begin(), k.end(), k_cache_[l].begin() + static_cast<std::ptrdiff_t>(p * kv));
        std::copy(v.begin(), v.end(), v_cache_[l].begin() + static_cast<std::ptrdiff_t>(p * kv));

        const double scale = 1.0 / std::sqrt(static_cast<double>(hd));
        std::vector<double> att(d, 0.0);
        std::vector<double> row(p + 1);
        for (std::size_t head = 0; head < cfg.n_heads; ++head) {
            const std::size_t g = head / group;
            const double* qv = q.data() + head * hd;
            double mx = -std::numeric_limits<double>::infinity();
            for (std::size_t j = 0; j <= p; ++j) {
                const double* kvec = k_cache_[l].data() + j * kv + g * hd;
                double s = 0.0;
                for (std::size_t e = 0; e < hd; ++e) {
                    s += qv[e] * kvec[e];
                }
                row[j] = s * scale;
                mx = std::max(mx, row[j]);
            }
            double sum = 0.0;
            for (std::size_t j = 0; j <= p; ++j) {
                row[j] = std::exp(row[j] - mx);
                sum += row[j];
            }
            double* out = att.data() + head * hd;
            for (std::size_t j = 0; j <= p; ++j) {
                row[j] /= sum;
                const double* vvec = v_cache_[l].data() + j * kv + g * hd;
                for (std::size_t e = 0; e < hd; ++e) {
                    out[e] += row[j] * vvec[e];
                }
            }
        }
        project(Target::O, att, d, d, o);
        for (std::size_t i = 0; i < d; ++i) {
            x[i] += o[i];
        }
        rmsnorm_rows(x.data(), 1, d, W.mlp_norm.data(), cfg.norm_eps, h2.data(), &rms);
        project(Target::Gate, h2, d, hidden, gate);
        project(Target::Up, h2, d, hidden, up);
        std::vector<double> act(hidden);
        for (std::size_t i = 0; i < hidden; ++i) {
            act[i] = gate[i] * sigmoid(gate[i]) * up[i];
        }
        project(Target::Down, act, hidden, d, down);
        for (std::size_t i = 0; i < d; ++i) {
            x[i] += down[i];
        }
    }
    std::vector<double> xf(d);
    rmsnorm_rows(x.data(), 1, d, model_.final_norm_.data(), cfg.norm_eps, xf.data(), &rms);
    std::vector<double> out(cfg.vocab_size);
    matmul_rows(model_.head_t_.data(), xf.data(), 1, d, cfg.vocab_size, out.data());
    ++pos_;
    return out;
}

std::vector<std::int32_t> generate(const QuantizedModel& model, const AdapterSet& adapters,
                                   std::span<const std::int32_t> prompt,
                                   const GenerateOptions& options) {
    const auto& cfg = model.config();
    if (prompt.empty()) {
        throw ConfigError("generate: prompt is empty");
    }
    if (prompt.size() >= cfg.context_len) {
        throw ConfigError("generate: prompt of " + std::to_string(prompt.size()) +
                          " tokens overflows context_len " + std::to_string(cfg.context_len));
    }
    if (options.temperature < 0.0 || !std::isfinite(options.temperature)) {
        throw ConfigError("generate: temperature must be finite and >= 0");
    }
    std::vector<std::int32_t> out(prompt.begin(), prompt.end());
    if (options.max_new == 0) {
        return out;
    }
    IncrementalDecoder decoder(model, adapters);
    std::vector<double> logits;
    for (auto tok : prompt) {
        logits = decoder.step(tok);
    }
    Rng rng(options.seed);
    for (std::size_t n = 0; n < options.max_new; ++n) {
        std::int32_t next = 0;
        if (options.temperature == 0.0) {
            next = static_cast<std::int32_t>(std::max_element(logits.begin(), logits.end()) -
                                             logits.begin());
        } else {
            const double mx = *std::max_element(logits.begin(), logits.end());
            std::vector<double> p(logits.size());
            double sum = 0.0;
            for (std::size_t i = 0; i < p.size(); ++i) {
                p[i] = std::exp((logits[i] - mx) / options.temperature);
                sum += p[i];
            }
            double r = rng.uniform() * sum;
            next = static_cast<std::int32_t>(p.size() - 1);
            for (std::size_t i = 0; i < p.size(); ++i) {
                r -= p[i];
                if (r < 0.0) {
                    next = static_cast<std::int32_t>(i);
                    break;
                }
            }
        }
        out.push_back(next);
        if (next == options.end_token || out.size() >= cfg.context_len) {
            break;
        }
        if (n + 1 < options.max_new) {
            logits = decoder.step(next);
        }
    }
    return out;
}

}  // namespace peft
