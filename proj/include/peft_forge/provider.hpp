#pragma once

// HTTP completion provider: one JSON POST per request.
//   request  {"prompt": string, "max_tokens": int, "temperature": number}
//   response {"text": string, "finish_reason": string}
// The credential travels as "Authorization: Bearer <key>".

#include <optional>
#include <string>

#include "peft_forge/data.hpp"
#include "peft_forge/errors.hpp"

namespace peft {

inline constexpr const char* kProviderKeyEnv = "PEFT_FORGE_PROVIDER_KEY";

class ProviderError : public Error {
public:
    enum class Kind { Auth, Timeout, Network, Status, Malformed };

    ProviderError(Kind kind, const std::string& what, int status = 0)
        : Error(what), kind_(kind), status_(status) {}

    Kind kind() const noexcept { return kind_; }
    // HTTP status for Kind::Status and Kind::Auth rejections, 0 otherwise.
    int status() const noexcept { return status_; }

private:
    Kind kind_;
    int status_;
};

struct EndpointConfig {
    std::string url;  // http://host[:port]/path or https://...
    std::optional<std::string> api_key;
    double timeout_seconds = 30.0;
};

// Reads the credential from PEFT_FORGE_PROVIDER_KEY; nullopt when unset or empty.
std::optional<std::string> provider_key_from_env();

// Throws ProviderError(Auth) before any network activity when no key is set,
// and ConfigError for an invalid request or URL.
ProviderResponse fetch_completion(const ProviderRequest& request, const EndpointConfig& endpoint);

class HttpProvider final : public CompletionProvider {
public:
    explicit HttpProvider(EndpointConfig endpoint);
    ProviderResponse complete(const ProviderRequest& request) override;

private:
    EndpointConfig endpoint_;
};

}  // namespace peft
