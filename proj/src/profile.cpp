#include "peft_forge/profile.hpp"

#include "json.hpp"
#include "peft_forge/errors.hpp"
#include "peft_forge/io.hpp"

namespace peft {

void HardwareProfile::validate() const {
    if (per_device_batch < 1 || grad_accum < 1 || devices < 1) {
        throw ConfigError("profile '" + name + "': per_device_batch, grad_accum and devices must be >= 1");
    }
    if (devices != 1) {
        throw ConfigError("profile '" + name + "': only devices = 1 is supported");
    }
}

std::string profile_to_json(const HardwareProfile& profile) {
    nlohmann::ordered_json j;
    j["name"] = profile.name;
    j["per_device_batch"] = profile.per_device_batch;
    j["grad_accum"] = profile.grad_accum;
    j["devices"] = profile.devices;
    return j.dump(2) + "\n";
}

HardwareProfile profile_from_json(const std::string& text) {
    nlohmann::json j;
    try {
        j = nlohmann::json::parse(text);
    } catch (const nlohmann::json::parse_error& e) {
        throw ConfigError(std::string("profile: invalid JSON: ") + e.what());
    }
    if (!j.is_object()) {
        throw ConfigError("profile: expected a JSON object");
    }
    HardwareProfile p;
    for (const auto& [key, value] : j.items()) {
        if (key == "name") {
            if (!value.is_string()) {
                throw ConfigError("profile: name must be a string");
            }
            p.name = value.get<std::string>();
        } else if (key == "per_device_batch" || key == "grad_accum" || key == "devices") {
            if (!value.is_number_integer() || value.get<long long>() < 1) {
                throw ConfigError("profile: " + key + " must be an integer >= 1");
            }
            const auto n = value.get<std::size_t>();
            if (key == "per_device_batch") {
                p.per_device_batch = n;
            } else if (key == "grad_accum") {
                p.grad_accum = n;
            } else {
                p.devices = n;
            }
        } else {
            throw ConfigError("profile: unknown field '" + key + "'");
        }
    }
    if (!j.contains("per_device_batch") || !j.contains("grad_accum")) {
        throw ConfigError("profile: per_device_batch and grad_accum are required");
    }
    p.validate();
    return p;
}

HardwareProfile load_profile(const std::filesystem::path& path) {
    auto p = profile_from_json(read_file_text(path));
    if (p.name.empty()) {
        p.name = path.stem().string();
    }
    return p;
}

}  // namespace peft
