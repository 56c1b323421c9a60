#define CPPHTTPLIB_OPENSSL_SUPPORT
#include "peft_forge/provider.hpp"

#include <chrono>
#include <cmath>
#include <cstdlib>

#include "httplib.h"
#include "json.hpp"

namespace peft {

namespace {

struct ParsedUrl {
    std::string origin;  // scheme://host[:port]
    std::string path;
};

ParsedUrl parse_url(const std::string& url) {
    const auto scheme_end = url.find("://");
    if (scheme_end == std::string::npos) {
        throw ConfigError("provider URL '" + url + "' needs an http:// or https:// scheme");
    }
    const auto scheme = url.substr(0, scheme_end);
    if (scheme != "http" && scheme != "https") {
        throw ConfigError("provider URL scheme must be http or https, got '" + scheme + "'");
    }
    const auto path_start = url.find('/', scheme_end + 3);
    ParsedUrl p;
    p.origin = url.substr(0, path_start);
    p.path = path_start == std::string::npos ? "/" : url.substr(path_start);
    if (p.origin.size() <= scheme_end + 3) {
        throw ConfigError("provider URL '" + url + "' has no host");
    }
    return p;
}

}  // namespace

std::optional<std::string> provider_key_from_env() {
    const char* v = std::getenv(kProviderKeyEnv);
    if (v == nullptr || *v == '\0') {
        return std::nullopt;
    }
    return std::string(v);
}

ProviderResponse fetch_completion(const ProviderRequest& request, const EndpointConfig& endpoint) {
    if (request.max_tokens < 1) {
        throw ConfigError("provider request: max_tokens must be >= 1");
    }
    if (!(request.temperature >= 0.0)) {
        throw ConfigError("provider request: temperature must be >= 0");
    }
    if (!endpoint.api_key || endpoint.api_key->empty()) {
        throw ProviderError(ProviderError::Kind::Auth,
                            std::string("missing provider credential: set ") + kProviderKeyEnv);
    }
    if (endpoint.url.empty()) {
        throw ConfigError("provider URL is not configured (--provider-url)");
    }
    const auto url = parse_url(endpoint.url);

    nlohmann::ordered_json body;
    body["prompt"] = request.prompt;
    body["max_tokens"] = request.max_tokens;
    body["temperature"] = request.temperature;

    httplib::Client client(url.origin);
    const auto secs = static_cast<time_t>(std::floor(endpoint.timeout_seconds));
    const auto usecs = static_cast<time_t>((endpoint.timeout_seconds - static_cast<double>(secs)) * 1e6);
    client.set_connection_timeout(secs, usecs);
    client.set_read_timeout(secs, usecs);
    client.set_write_timeout(secs, usecs);
    const httplib::Headers headers = {{"Authorization", "Bearer " + *endpoint.api_key}};

    const auto t0 = std::chrono::steady_clock::now();
    auto res = client.Post(url.path, headers, body.dump(), "application/json");
    if (!res) {
        const auto err = res.error();
        const double waited =
            std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
        if (err == httplib::Error::ConnectionTimeout ||
            (err == httplib::Error::Read && waited >= endpoint.timeout_seconds)) {
            throw ProviderError(ProviderError::Kind::Timeout,
                                "provider request timed out after " +
                                    std::to_string(endpoint.timeout_seconds) + " s");
        }
        throw ProviderError(ProviderError::Kind::Network,
                            "provider request failed: " + httplib::to_string(err));
    }
    if (res->status == 401 || res->status == 403) {
        throw ProviderError(ProviderError::Kind::Auth,
                            "provider rejected the credential (HTTP " +
                                std::to_string(res->status) + ")",
                            res->status);
    }
    if (res->status < 200 || res->status >= 300) {
        throw ProviderError(ProviderError::Kind::Status,
                            "provider returned HTTP " + std::to_string(res->status), res->status);
    }

    nlohmann::json j;
    try {
        j = nlohmann::json::parse(res->body);
    } catch (const nlohmann::json::parse_error&) {
        throw ProviderError(ProviderError::Kind::Malformed, "provider response is not JSON");
    }
    if (!j.is_object() || !j.contains("text") || !j["text"].is_string() ||
        !j.contains("finish_reason") || !j["finish_reason"].is_string()) {
        throw ProviderError(ProviderError::Kind::Malformed,
                            "provider response lacks string fields text and finish_reason");
    }
    ProviderResponse out;
    out.text = j["text"].get<std::string>();
    out.finish_reason = j["finish_reason"].get<std::string>();
    return out;
}

HttpProvider::HttpProvider(EndpointConfig endpoint) : endpoint_(std::move(endpoint)) {}

ProviderResponse HttpProvider::complete(const ProviderRequest& request) {
    return fetch_completion(request, endpoint_);
}

}  // namespace peft
