#pragma once

#include <cstddef>
#include <filesystem>
#include <string>

namespace peft {

// A named (per-device batch, accumulation) pair standing in for a GPU class.
struct HardwareProfile {
    std::string name;
    std::size_t per_device_batch = 1;
    std::size_t grad_accum = 1;
    std::size_t devices = 1;

    std::size_t effective_batch() const noexcept { return per_device_batch * grad_accum * devices; }
    // Throws ConfigError when a count is zero or devices != 1.
    void validate() const;

    friend bool operator==(const HardwareProfile&, const HardwareProfile&) = default;
};

HardwareProfile load_profile(const std::filesystem::path& path);
std::string profile_to_json(const HardwareProfile& profile);
HardwareProfile profile_from_json(const std::string& text);

}  // namespace peft
