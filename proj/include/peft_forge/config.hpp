#pragma once

// JSON forms of the model, adapter and optimizer configurations. Parsing is
// strict: unknown keys are rejected, missing keys keep their defaults.

#include <filesystem>
#include <string>

#include "json.hpp"
#include "peft_forge/lora.hpp"
#include "peft_forge/model.hpp"
#include "peft_forge/optim.hpp"

namespace peft {

nlohmann::ordered_json model_config_to_json(const ModelConfig& config);
ModelConfig model_config_from_json(const nlohmann::json& j);

nlohmann::ordered_json lora_config_to_json(const LoraConfig& config);
LoraConfig lora_config_from_json(const nlohmann::json& j);

// total_steps is omitted: it is derived per phase from the plan.
nlohmann::ordered_json adam_config_to_json(const AdamConfig& config);
AdamConfig adam_config_from_json(const nlohmann::json& j);

// SHA-256 of the compact model-config JSON. Two models with equal hashes have
// identical frozen weights.
std::string model_config_hash_hex(const ModelConfig& config);
std::array<std::uint8_t, 32> model_config_hash(const ModelConfig& config);

// Model file: {"model": {...}, "optimizer": {...}}; both objects optional.
struct ModelFile {
    ModelConfig model;
    AdamConfig optimizer;
};
ModelFile load_model_file(const std::filesystem::path& path);
LoraConfig load_lora_file(const std::filesystem::path& path);

nlohmann::json parse_json_text(const std::string& text, const std::string& what);

}  // namespace peft
