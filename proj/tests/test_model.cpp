#include <cmath>
#include <vector>

#include "doctest.h"
#include "peft_forge/errors.hpp"
#include "peft_forge/model.hpp"
#include "peft_forge/rng.hpp"

using namespace peft;

namespace {

ModelConfig small_config() {
    ModelConfig c;
    c.d_model = 16;
    c.n_layers = 2;
    c.n_heads = 4;
    c.n_kv_heads = 2;
    c.mlp_hidden = 24;
    c.context_len = 16;
    c.seed = 3;
    c.init_std = 0.2f;
    c.embed_std = 1.0f;
    c.head_std = 0.2f;
    return c;
}

// Adapters with non-zero B so gradients reach both factors.
AdapterSet busy_adapters(const ModelConfig& c, std::uint64_t seed) {
    LoraConfig lc;
    lc.rank = 2;
    lc.alpha = 4.0f;
    lc.init_std = 0.2f;
    lc.seed = seed;
    auto set = lora_init(c.shape(), lc);
    Rng rng(seed + 1);
    for (std::size_t i = 0; i < set.size(); ++i) {
        for (auto& v : set[i].b) v = static_cast<float>(rng.normal(0.0, 0.2));
    }
    return set;
}

std::vector<std::int32_t> random_tokens(std::size_t n, std::uint64_t seed, std::int32_t vocab = 256) {
    Rng rng(seed);
    std::vector<std::int32_t> t(n);
    for (auto& x : t) x = static_cast<std::int32_t>(rng.below(static_cast<std::uint64_t>(vocab)));
    return t;
}

Sequence make_sequence(std::size_t n, std::uint64_t seed, std::size_t prompt_len) {
    Sequence s;
    s.tokens = random_tokens(n, seed);
    s.label_mask.assign(n, 1);
    for (std::size_t i = 0; i < prompt_len && i < n; ++i) s.label_mask[i] = 0;
    return s;
}

std::vector<Sequence> small_batch() {
    return {make_sequence(12, 21, 4), make_sequence(9, 22, 2), make_sequence(16, 23, 0)};
}

}  // namespace

TEST_CASE("default MiniAdvisor config is valid and Mistral-shaped") {
    const auto c = mini_advisor_config();
    CHECK_NOTHROW(c.validate());
    CHECK(c.vocab_size == 259);
    const auto s = c.shape();
    CHECK(s.n_layers == c.n_layers);
    CHECK(s.dims(Target::K).d_out == c.kv_dim());
    CHECK(s.dims(Target::Down).d_in == c.mlp_hidden);
    ModelConfig bad = c;
    bad.n_heads = 3;
    CHECK_THROWS_AS(bad.validate(), ConfigError);
    bad = c;
    bad.n_kv_heads = 3;
    CHECK_THROWS_AS(bad.validate(), ConfigError);
    bad = c;
    bad.head_std = -1.0f;
    CHECK_THROWS_AS(bad.validate(), ConfigError);
}

TEST_CASE("an untrained model predicts close to uniform") {
    const auto c = mini_advisor_config();
    const QuantizedModel model(c);
    LoraConfig lc;
    const auto adapters = lora_init(c.shape(), lc);
    std::vector<Sequence> batch{make_sequence(64, 1, 8), make_sequence(40, 2, 8)};
    const auto loss = model.forward_loss(adapters, batch);
    CHECK(std::isfinite(loss.loss));
    CHECK(std::abs(loss.loss - std::log(259.0)) < 0.15 * std::log(259.0));
    CHECK(loss.token_count == 56 + 32);
}

TEST_CASE("base weights are seeded, ordered and stored as double-quantized NF4") {
    const auto c = small_config();
    const QuantizedModel model(c);
    const auto& tensors = model.quantized_tensors();
    REQUIRE(tensors.size() == 2 + 7 * c.n_layers);
    CHECK(tensors.front().first == "embedding");
    CHECK(tensors[1].first == "layers.0.q");
    CHECK(tensors[7].first == "layers.0.down");
    CHECK(tensors.back().first == "head");
    const auto raw = QuantizedModel::draw_base_weights(c);
    REQUIRE(raw.size() == tensors.size());
    for (std::size_t i = 0; i < raw.size(); ++i) {
        CHECK(raw[i].first == tensors[i].first);
        CHECK(tensors[i].second.scale_encoding() == quant::ScaleEncoding::DoubleQuantized);
        CHECK(tensors[i].second == quant::quantize_nf4(raw[i].second, tensors[i].second.shape())
                                       .with_double_quantized_scales());
    }
    CHECK(QuantizedModel(c).quantized_tensors() == tensors);

    const auto deq = quant::dequantize_nf4(tensors[3].second);  // layers.0.v
    const auto dense = model.dense_weight(0, Target::V);
    REQUIRE(dense.size() == deq.size());
    for (std::size_t i = 0; i < deq.size(); ++i) {
        CHECK(dense[i] == static_cast<double>(deq[i]));
    }
}

TEST_CASE("batch loss is the mean of per-sequence mean losses") {
    const auto c = small_config();
    const QuantizedModel model(c);
    const auto adapters = busy_adapters(c, 5);
    const auto batch = small_batch();
    const auto total = model.forward_loss(adapters, batch);
    double sum = 0.0;
    std::size_t tokens = 0;
    for (const auto& s : batch) {
        const auto one = model.forward_loss(adapters, std::span(&s, 1));
        sum += one.loss;
        tokens += one.token_count;
    }
    CHECK(total.loss == doctest::Approx(sum / batch.size()).epsilon(1e-12));
    CHECK(total.token_count == tokens);
    CHECK(tokens == (12 - 4) + (9 - 2) + (16 - 1));
}

TEST_CASE("loss agrees with cross-entropy over logits") {
    const auto c = small_config();
    const QuantizedModel model(c);
    const auto adapters = busy_adapters(c, 6);
    const auto seq = make_sequence(10, 30, 3);
    const auto lg = model.logits(adapters, seq.tokens);
    const std::size_t V = c.vocab_size;
    double ce = 0.0;
    std::size_t n = 0;
    for (std::size_t t = 0; t + 1 < seq.tokens.size(); ++t) {
        if (!seq.label_mask[t + 1]) continue;
        double mx = lg[t * V];
        for (std::size_t v = 0; v < V; ++v) mx = std::max(mx, lg[t * V + v]);
        double z = 0.0;
        for (std::size_t v = 0; v < V; ++v) z += std::exp(lg[t * V + v] - mx);
        ce += mx + std::log(z) - lg[t * V + seq.tokens[t + 1]];
        ++n;
    }
    const auto loss = model.forward_loss(adapters, std::span(&seq, 1));
    CHECK(loss.loss == doctest::Approx(ce / n).epsilon(1e-10));
}

TEST_CASE("adapter gradients match central finite differences") {
    const auto c = small_config();
    const QuantizedModel model(c);
    auto adapters = busy_adapters(c, 7);
    const auto batch = small_batch();
    Tape tape;
    model.forward_loss(adapters, batch, &tape);
    const auto grads = model.backward_lora(adapters, tape);
    REQUIRE(grads.size() == adapters.size());

    auto loss_at = [&](std::size_t ai, bool is_b, std::size_t idx, float value) {
        auto copy = adapters;
        (is_b ? copy[ai].b : copy[ai].a)[idx] = value;
        return model.forward_loss(copy, batch).loss;
    };
    Rng pick(99);
    int checked = 0;
    for (std::size_t ai = 0; ai < adapters.size(); ++ai) {
        for (bool is_b : {false, true}) {
            const auto& param = is_b ? adapters[ai].b : adapters[ai].a;
            const auto& grad = is_b ? grads[ai].b : grads[ai].a;
            for (int k = 0; k < 3; ++k) {
                const auto idx = static_cast<std::size_t>(pick.below(param.size()));
                const float p = param[idx] + 1e-3f;
                const float m = param[idx] - 1e-3f;
                const double fd = (loss_at(ai, is_b, idx, p) - loss_at(ai, is_b, idx, m)) /
                                  (static_cast<double>(p) - m);
                CHECK(std::abs(grad[idx] - fd) <= 1e-6 + 1e-3 * std::abs(fd));
                ++checked;
            }
        }
    }
    CHECK(checked == static_cast<int>(adapters.size() * 6));
}

TEST_CASE("gradient checkpointing reproduces loss and gradients bitwise") {
    const auto c = small_config();
    const QuantizedModel model(c);
    const auto adapters = busy_adapters(c, 8);
    const auto batch = small_batch();
    Tape full;
    Tape ckpt;
    const auto l1 = model.forward_loss(adapters, batch, &full, false);
    const auto l2 = model.forward_loss(adapters, batch, &ckpt, true);
    CHECK(l1.loss == l2.loss);
    CHECK(!full.checkpointed());
    CHECK(ckpt.checkpointed());
    CHECK(ckpt.attention_probs(0, 0).empty());
    const auto g1 = model.backward_lora(adapters, full);
    const auto g2 = model.backward_lora(adapters, ckpt);
    REQUIRE(g1.size() == g2.size());
    for (std::size_t i = 0; i < g1.size(); ++i) {
        CHECK(g1[i].a == g2[i].a);
        CHECK(g1[i].b == g2[i].b);
    }
}

TEST_CASE("attention is causal") {
    const auto c = small_config();
    const QuantizedModel model(c);
    const auto adapters = busy_adapters(c, 9);
    auto tokens = random_tokens(12, 40);
    const auto before = model.logits(adapters, tokens);
    tokens[7] = (tokens[7] + 1) % 256;
    const auto after = model.logits(adapters, tokens);
    const std::size_t V = c.vocab_size;
    for (std::size_t i = 0; i < 7 * V; ++i) {
        CHECK(before[i] == after[i]);
    }
    bool changed = false;
    for (std::size_t i = 7 * V; i < 8 * V; ++i) changed |= before[i] != after[i];
    CHECK(changed);

    Tape tape;
    const auto seq = make_sequence(10, 41, 0);
    model.forward_loss(adapters, std::span(&seq, 1), &tape);
    const auto probs = tape.attention_probs(0, 1);
    const std::size_t T = 9;
    REQUIRE(probs.size() == c.n_heads * T * T);
    for (std::size_t h = 0; h < c.n_heads; ++h) {
        for (std::size_t i = 0; i < T; ++i) {
            double row = 0.0;
            for (std::size_t j = 0; j < T; ++j) {
                const double p = probs[(h * T + i) * T + j];
                if (j > i) CHECK(p == 0.0);
                row += p;
            }
            CHECK(row == doctest::Approx(1.0).epsilon(1e-12));
        }
    }
}

TEST_CASE("incremental decoding reproduces full-sequence logits") {
    const auto c = small_config();
    const QuantizedModel model(c);
    const auto adapters = busy_adapters(c, 10);
    const auto tokens = random_tokens(c.context_len, 50);
    const auto full = model.logits(adapters, tokens);
    IncrementalDecoder dec(model, adapters);
    const std::size_t V = c.vocab_size;
    for (std::size_t t = 0; t < tokens.size(); ++t) {
        const auto row = dec.step(tokens[t]);
        CHECK(dec.position() == t + 1);
        for (std::size_t v = 0; v < V; ++v) {
            CHECK(row[v] == doctest::Approx(full[t * V + v]).epsilon(1e-9));
        }
    }
    CHECK_THROWS_AS(dec.step(1), ConfigError);
}

TEST_CASE("a stale or foreign tape is refused") {
    const auto c = small_config();
    const QuantizedModel model(c);
    const QuantizedModel other(c);
    auto adapters = busy_adapters(c, 11);
    const auto batch = small_batch();
    Tape tape;
    model.forward_loss(adapters, batch, &tape);
    CHECK_THROWS_AS(other.backward_lora(adapters, tape), IntegrityError);
    adapters[0].a[0] += 1.0f;
    CHECK_THROWS_AS(model.backward_lora(adapters, tape), IntegrityError);
}

TEST_CASE("zero-initialized adapters leave the base model unchanged") {
    const auto c = small_config();
    const QuantizedModel model(c);
    LoraConfig lc;
    lc.rank = 2;
    const auto fresh = lora_init(c.shape(), lc);
    lc.seed = 77;
    const auto other = lora_init(c.shape(), lc);
    const auto tokens = random_tokens(8, 60);
    CHECK(model.logits(fresh, tokens) == model.logits(other, tokens));
}

TEST_CASE("forward rejects malformed input") {
    const auto c = small_config();
    const QuantizedModel model(c);
    const auto adapters = busy_adapters(c, 12);
    CHECK_THROWS_AS(model.forward_loss(adapters, std::vector<Sequence>{}), ConfigError);
    Sequence s = make_sequence(6, 1, 0);
    s.label_mask.pop_back();
    CHECK_THROWS_AS(model.forward_loss(adapters, std::span(&s, 1)), ShapeError);
    s = make_sequence(17, 1, 0);
    CHECK_THROWS_AS(model.forward_loss(adapters, std::span(&s, 1)), ConfigError);
    s = make_sequence(6, 1, 6);
    CHECK_THROWS_AS(model.forward_loss(adapters, std::span(&s, 1)), ConfigError);
    s = make_sequence(6, 1, 0);
    s.tokens[2] = 259;
    CHECK_THROWS_AS(model.forward_loss(adapters, std::span(&s, 1)), ConfigError);

    ModelConfig bigger = c;
    bigger.d_model = 32;
    LoraConfig lc;
    const auto mismatched = lora_init(bigger.shape(), lc);
    CHECK_THROWS_AS(model.logits(mismatched, std::vector<std::int32_t>{1, 2}), ShapeError);
}

TEST_CASE("greedy generation is deterministic and respects its limits") {
    const auto c = small_config();
    const QuantizedModel model(c);
    const auto adapters = busy_adapters(c, 13);
    const std::vector<std::int32_t> prompt{256, 72, 105};
    GenerateOptions opt;
    opt.max_new = 5;
    const auto a = generate(model, adapters, prompt, opt);
    CHECK(a == generate(model, adapters, prompt, opt));
    CHECK(std::equal(prompt.begin(), prompt.end(), a.begin()));
    CHECK(a.size() <= prompt.size() + 5);

    // Greedy picks the argmax of the full-sequence logits at each step.
    for (std::size_t t = prompt.size(); t < a.size(); ++t) {
        const auto lg = model.logits(adapters, std::span(a).first(t));
        const std::size_t V = c.vocab_size;
        std::size_t best = 0;
        for (std::size_t v = 1; v < V; ++v) {
            if (lg[(t - 1) * V + v] > lg[(t - 1) * V + best]) best = v;
        }
        CHECK(a[t] == static_cast<std::int32_t>(best));
    }

    opt.max_new = 100;
    const auto longest = generate(model, adapters, prompt, opt);
    CHECK(longest.size() <= c.context_len);

    opt.temperature = 1.0;
    opt.seed = 4;
    CHECK(generate(model, adapters, prompt, opt) == generate(model, adapters, prompt, opt));

    CHECK_THROWS_AS(generate(model, adapters, std::vector<std::int32_t>{}, opt), ConfigError);
    CHECK_THROWS_AS(generate(model, adapters, random_tokens(16, 3), opt), ConfigError);
    opt.temperature = -1.0;
    CHECK_THROWS_AS(generate(model, adapters, prompt, opt), ConfigError);
}
