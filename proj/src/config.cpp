#include "peft_forge/config.hpp"

#include <charconv>
#include <set>

#include "peft_forge/errors.hpp"
#include "peft_forge/io.hpp"

namespace peft {

namespace {

// Shortest decimal that round-trips the float, so 0.02f is written as 0.02.
double float_for_json(float f) {
    char buf[32];
    const auto res = std::to_chars(buf, buf + sizeof(buf), f);
    return std::stod(std::string(buf, res.ptr));
}

void reject_unknown(const nlohmann::json& j, const std::set<std::string>& allowed,
                    const std::string& what) {
    if (!j.is_object()) {
        throw ConfigError(what + ": expected a JSON object");
    }
    for (const auto& [key, _] : j.items()) {
        if (!allowed.contains(key)) {
            throw ConfigError(what + ": unknown field '" + key + "'");
        }
    }
}

template <typename T>
void read_field(const nlohmann::json& j, const char* key, T& out, const std::string& what) {
    if (!j.contains(key)) {
        return;
    }
    const auto& v = j[key];
    if constexpr (std::is_same_v<T, bool>) {
        if (!v.is_boolean()) {
            throw ConfigError(what + ": " + key + " must be a boolean");
        }
    } else if constexpr (std::is_integral_v<T>) {
        if (!v.is_number_integer() || (!v.is_number_unsigned() && v.get<long long>() < 0)) {
            throw ConfigError(what + ": " + key + " must be a non-negative integer");
        }
    } else {
        if (!v.is_number()) {
            throw ConfigError(what + ": " + key + " must be a number");
        }
    }
    out = v.get<T>();
}

}  // namespace

nlohmann::json parse_json_text(const std::string& text, const std::string& what) {
    try {
        return nlohmann::json::parse(text);
    } catch (const nlohmann::json::parse_error& e) {
        throw ConfigError(what + ": invalid JSON: " + e.what());
    }
}

nlohmann::ordered_json model_config_to_json(const ModelConfig& c) {
    nlohmann::ordered_json j;
    j["vocab_size"] = c.vocab_size;
    j["d_model"] = c.d_model;
    j["n_layers"] = c.n_layers;
    j["n_heads"] = c.n_heads;
    j["n_kv_heads"] = c.n_kv_heads;
    j["mlp_hidden"] = c.mlp_hidden;
    j["context_len"] = c.context_len;
    j["norm_eps"] = c.norm_eps;
    j["rope_base"] = c.rope_base;
    j["seed"] = c.seed;
    j["init_std"] = float_for_json(c.init_std);
    j["embed_std"] = float_for_json(c.embed_std);
    j["head_std"] = float_for_json(c.head_std);
    return j;
}

ModelConfig model_config_from_json(const nlohmann::json& j) {
    const std::string what = "model config";
    reject_unknown(j,
                   {"vocab_size", "d_model", "n_layers", "n_heads", "n_kv_heads", "mlp_hidden",
                    "context_len", "norm_eps", "rope_base", "seed", "init_std", "embed_std",
                    "head_std"},
                   what);
    ModelConfig c;
    read_field(j, "vocab_size", c.vocab_size, what);
    read_field(j, "d_model", c.d_model, what);
    read_field(j, "n_layers", c.n_layers, what);
    read_field(j, "n_heads", c.n_heads, what);
    read_field(j, "n_kv_heads", c.n_kv_heads, what);
    read_field(j, "mlp_hidden", c.mlp_hidden, what);
    read_field(j, "context_len", c.context_len, what);
    read_field(j, "norm_eps", c.norm_eps, what);
    read_field(j, "rope_base", c.rope_base, what);
    read_field(j, "seed", c.seed, what);
    read_field(j, "init_std", c.init_std, what);
    read_field(j, "embed_std", c.embed_std, what);
    read_field(j, "head_std", c.head_std, what);
    c.validate();
    return c;
}

nlohmann::ordered_json lora_config_to_json(const LoraConfig& c) {
    nlohmann::ordered_json j;
    j["rank"] = c.rank;
    j["alpha"] = float_for_json(c.alpha);
    auto targets = nlohmann::ordered_json::array();
    for (auto t : c.targets) {
        targets.push_back(std::string(target_name(t)));
    }
    j["targets"] = std::move(targets);
    j["init_std"] = float_for_json(c.init_std);
    j["seed"] = c.seed;
    return j;
}

LoraConfig lora_config_from_json(const nlohmann::json& j) {
    const std::string what = "lora config";
    reject_unknown(j, {"rank", "alpha", "targets", "init_std", "seed"}, what);
    LoraConfig c;
    read_field(j, "rank", c.rank, what);
    read_field(j, "alpha", c.alpha, what);
    read_field(j, "init_std", c.init_std, what);
    read_field(j, "seed", c.seed, what);
    if (j.contains("targets")) {
        if (!j["targets"].is_array()) {
            throw ConfigError(what + ": targets must be an array of names");
        }
        c.targets.clear();
        for (const auto& t : j["targets"]) {
            if (!t.is_string()) {
                throw ConfigError(what + ": targets must be an array of names");
            }
            c.targets.push_back(parse_target(t.get<std::string>()));
        }
    }
    c.validate();
    return c;
}

nlohmann::ordered_json adam_config_to_json(const AdamConfig& c) {
    nlohmann::ordered_json j;
    j["beta1"] = c.beta1;
    j["beta2"] = c.beta2;
    j["eps"] = c.eps;
    j["weight_decay"] = c.weight_decay;
    j["peak_lr"] = c.peak_lr;
    j["warmup_steps"] = c.warmup_steps;
    j["max_grad_norm"] = c.max_grad_norm;
    return j;
}

AdamConfig adam_config_from_json(const nlohmann::json& j) {
    const std::string what = "optimizer config";
    reject_unknown(j,
                   {"beta1", "beta2", "eps", "weight_decay", "peak_lr", "warmup_steps",
                    "max_grad_norm"},
                   what);
    AdamConfig c;
    read_field(j, "beta1", c.beta1, what);
    read_field(j, "beta2", c.beta2, what);
    read_field(j, "eps", c.eps, what);
    read_field(j, "weight_decay", c.weight_decay, what);
    read_field(j, "peak_lr", c.peak_lr, what);
    read_field(j, "warmup_steps", c.warmup_steps, what);
    read_field(j, "max_grad_norm", c.max_grad_norm, what);
    c.total_steps = c.warmup_steps;
    c.validate();
    c.total_steps = 0;
    return c;
}

std::array<std::uint8_t, 32> model_config_hash(const ModelConfig& config) {
    return sha256(model_config_to_json(config).dump());
}

std::string model_config_hash_hex(const ModelConfig& config) {
    return to_hex(model_config_hash(config));
}

ModelFile load_model_file(const std::filesystem::path& path) {
    const auto j = parse_json_text(read_file_text(path), path.string());
    reject_unknown(j, {"model", "optimizer"}, path.string());
    ModelFile f;
    if (j.contains("model")) {
        f.model = model_config_from_json(j["model"]);
    }
    if (j.contains("optimizer")) {
        f.optimizer = adam_config_from_json(j["optimizer"]);
    }
    return f;
}

LoraConfig load_lora_file(const std::filesystem::path& path) {
    return lora_config_from_json(parse_json_text(read_file_text(path), path.string()));
}

}  // namespace peft
