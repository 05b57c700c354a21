// SPDX-License-Identifier: Apache-2.0
//
// HTTP ModelClient: POST {"prompt": text} to a configured URL, expect
// {"text": completion} back. Connection errors, 429 and 5xx are transient
// and retried with doubling backoff; anything else fails immediately.

#pragma once

#include <chrono>
#include <string>
#include <thread>

#include <httplib.h>
#include <json.hpp>

#include "minivlm/tqa.hpp"

namespace minivlm {

struct HttpClientConfig {
    std::string url;         // e.g. http://127.0.0.1:8080/complete
    std::string auth_token;  // sent as a bearer token when non-empty
    int max_attempts = 3;
    int backoff_ms = 100;    // doubles after every failed attempt
};

class HttpClient : public ModelClient {
public:
    explicit HttpClient(HttpClientConfig cfg) : cfg_(std::move(cfg)) {
        auto scheme_end = cfg_.url.find("://");
        if (scheme_end == std::string::npos) throw IoError("bad client url: " + cfg_.url);
        auto path_start = cfg_.url.find('/', scheme_end + 3);
        if (path_start == std::string::npos) {
            base_ = cfg_.url;
            path_ = "/";
        } else {
            base_ = cfg_.url.substr(0, path_start);
            path_ = cfg_.url.substr(path_start);
        }
    }

    std::string complete(const std::string& prompt) override {
        nlohmann::json body{{"prompt", prompt}};
        std::string payload = body.dump();
        int backoff = cfg_.backoff_ms;
        std::string last_error;
        for (int attempt = 0; attempt < cfg_.max_attempts; ++attempt) {
            if (attempt > 0) {
                std::this_thread::sleep_for(std::chrono::milliseconds(backoff));
                backoff *= 2;
            }
            httplib::Client cli(base_);
            if (!cfg_.auth_token.empty()) cli.set_bearer_token_auth(cfg_.auth_token);
            auto res = cli.Post(path_, payload, "application/json");
            if (!res) {
                last_error = "connection failed: " + httplib::to_string(res.error());
                continue;  // transient
            }
            if (res->status == 429 || res->status >= 500) {
                last_error = "status " + std::to_string(res->status);
                continue;  // transient
            }
            if (res->status != 200)
                throw ClientFailure("client request rejected with status " +
                                    std::to_string(res->status));
            try {
                auto j = nlohmann::json::parse(res->body);
                return j.at("text").get<std::string>();
            } catch (const nlohmann::json::exception& e) {
                throw ClientFailure("malformed client response: " + std::string(e.what()));
            }
        }
        throw ClientFailure("client failed after " + std::to_string(cfg_.max_attempts) +
                            " attempts: " + last_error);
    }

private:
    HttpClientConfig cfg_;
    std::string base_, path_;
};

}  // namespace minivlm
