#pragma once

// HTTP transport for the judge protocol: a chat-completions endpoint that
// returns per-token log-probabilities with top-k alternatives. Kept out of
// eval.hpp so only targets that talk to a network pull in the HTTP stack.

#include <cstdlib>
#include <memory>
#include <string>

#include <httplib.h>
#include <json.hpp>

#include "ftlab/errors.hpp"
#include "ftlab/eval.hpp"

namespace ftlab::eval {

namespace detail {

struct ParsedEndpoint {
    std::string base;  // scheme://host:port
    std::string path;  // request path
};

inline ParsedEndpoint parse_endpoint(const std::string& endpoint) {
    const auto scheme_end = endpoint.find("://");
    if (scheme_end == std::string::npos) {
        throw ConfigError("judge endpoint must include a scheme: '" + endpoint + "'");
    }
    const auto path_start = endpoint.find('/', scheme_end + 3);
    ParsedEndpoint parsed;
    if (path_start == std::string::npos) {
        parsed.base = endpoint;
        parsed.path = "/v1/chat/completions";
    } else {
        parsed.base = endpoint.substr(0, path_start);
        parsed.path = endpoint.substr(path_start);
    }
    return parsed;
}

/// Tight integer in [0, 100] or nothing.
inline bool parse_score_token(const std::string& token, int& value) {
    std::size_t b = 0, e = token.size();
    while (b < e && std::isspace(static_cast<unsigned char>(token[b]))) ++b;
    while (e > b && std::isspace(static_cast<unsigned char>(token[e - 1]))) --e;
    if (b == e || e - b > 3) return false;
    int v = 0;
    for (std::size_t i = b; i < e; ++i) {
        if (!std::isdigit(static_cast<unsigned char>(token[i]))) return false;
        v = v * 10 + (token[i] - '0');
    }
    if (v > 100) return false;
    value = v;
    return true;
}

/// Log-probabilities of integer-string tokens 0-100 at the answer position:
/// the first content position whose alternatives contain any such token.
/// Missing integers stay absent from the map.
inline LogitMap extract_score_logits(const nlohmann::json& body) {
    if (!body.contains("choices") || !body["choices"].is_array() || body["choices"].empty()) {
        throw ProtocolError("judge reply has no choices");
    }
    const auto& choice = body["choices"][0];
    if (!choice.contains("logprobs") || choice["logprobs"].is_null() ||
        !choice["logprobs"].contains("content")) {
        throw ProtocolError("judge reply has no logprobs");
    }
    for (const auto& position : choice["logprobs"]["content"]) {
        LogitMap logits;
        auto consider = [&logits](const nlohmann::json& entry) {
            if (!entry.contains("token") || !entry.contains("logprob")) return;
            int score = 0;
            if (!parse_score_token(entry["token"].get<std::string>(), score)) return;
            const double lp = entry["logprob"].get<double>();
            auto it = logits.find(score);
            if (it == logits.end() || it->second < lp) logits[score] = lp;
        };
        consider(position);
        if (position.contains("top_logprobs")) {
            for (const auto& alt : position["top_logprobs"]) consider(alt);
        }
        if (!logits.empty()) return logits;
    }
    return {};
}

}  // namespace detail

/// One judge request over HTTP. Throws TransportError on network failures
/// and non-2xx statuses (retryable) and ProtocolError when the reply lacks
/// logprobs (non-retryable). The bearer token comes from JUDGE_API_KEY.
inline LogitMap judge_http_request(const JudgeClientConfig& cfg, const std::string& prompt) {
    cfg.validate();
    const auto endpoint = detail::parse_endpoint(cfg.endpoint);
    httplib::Client client(endpoint.base);
    client.set_connection_timeout(static_cast<time_t>(cfg.timeout_seconds),
                                  static_cast<time_t>(cfg.timeout_seconds * 1e6) % 1000000);
    client.set_read_timeout(static_cast<time_t>(cfg.timeout_seconds), 0);

    httplib::Headers headers;
    if (const char* key = std::getenv("JUDGE_API_KEY")) {
        headers.emplace("Authorization", std::string("Bearer ") + key);
    }

    const nlohmann::json request{{"model", cfg.model},
                                 {"messages", {{{"role", "user"}, {"content", prompt}}}},
                                 {"max_tokens", 1},
                                 {"logprobs", true},
                                 {"top_logprobs", 20}};

    auto result = client.Post(endpoint.path, headers, request.dump(), "application/json");
    if (!result) {
        throw TransportError("judge request failed: " + httplib::to_string(result.error()));
    }
    if (result->status < 200 || result->status >= 300) {
        throw TransportError("judge endpoint returned HTTP " + std::to_string(result->status));
    }
    nlohmann::json body;
    try {
        body = nlohmann::json::parse(result->body);
    } catch (const nlohmann::json::exception& e) {
        throw ProtocolError(std::string("judge reply is not JSON: ") + e.what());
    }
    return detail::extract_score_logits(body);
}

/// JudgeClient backed by judge_http_request.
class HttpJudgeClient : public JudgeClient {
public:
    explicit HttpJudgeClient(JudgeClientConfig cfg) : cfg_(std::move(cfg)) { cfg_.validate(); }

    LogitMap request_score_logits(const std::string& prompt) override {
        return judge_http_request(cfg_, prompt);
    }

private:
    JudgeClientConfig cfg_;
};

}  // namespace ftlab::eval
