#pragma once

// Generation backends: the seeded toy judge and a remote chat-completion
// endpoint, behind one interface with retries and stop-string truncation.
//
// Remote wire contract (POST <endpoint><path>, JSON):
//   request:  {"model": str, "messages": [{"role": "user", "content": str}],
//              "temperature": num, "top_p": num, "top_k": int,
//              "stop": [str, ...], "max_tokens": int}
//   response: {"choices": [{"message": {"content": str}, "finish_reason": str}],
//              "usage": {"prompt_tokens": int, "completion_tokens": int}}
//   `choices[0].text` is accepted in place of `message.content`; `usage` is optional.

#include <chrono>
#include <cstdint>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "brrm/trace.hpp"

namespace brrm {

struct GenerationRequest {
    std::string prompt;
    std::vector<std::string> stop_strings;
    double temperature = 1.0;
    double top_p = 0.95;
    int top_k = 20;
    int max_new_tokens = 8192;
    int max_total_tokens = 16384;
    // Per-request sampling seed; honored by the toy backend, not sent over the wire.
    std::optional<std::uint64_t> seed;

    void validate() const;
};

// What a backend returns before stop-string truncation.
struct Completion {
    std::string text;
    std::optional<int> prompt_tokens;
    std::optional<int> completion_tokens;
    bool finished_by_length = false;
};

struct GenerationResult {
    std::string text;
    int token_count = 0;
    bool approximate_count = true;
    bool truncated = false;
    int retry_count = 0;
};

class Backend {
  public:
    virtual ~Backend() = default;
    // Throws TransientBackendError for retryable failures and Error(backend) otherwise.
    virtual Completion complete(const GenerationRequest& request) = 0;
};

enum class BackendKind { toy, remote };

const char* to_string(BackendKind kind);
std::optional<BackendKind> backend_kind_from_string(std::string_view s);

struct BackendDescriptor {
    BackendKind kind = BackendKind::toy;
    std::string endpoint;  // e.g. http://127.0.0.1:8000
    std::string path = "/v1/chat/completions";
    std::string model;
    double timeout_seconds = 600.0;
    int max_retries = 3;
    int max_concurrency = 8;
    int backoff_ms = 500;
    // Name of the environment variable holding a bearer token; the value is never logged.
    std::string api_key_env;
    // Logit bonus the toy judge gives to format-valid tokens at each step.
    double toy_format_logit = 5.0;
    int toy_feature_dim = 8;

    void validate() const;
};

struct RetryPolicy {
    int max_retries = 3;
    std::chrono::milliseconds base_delay{500};
};

// Whitespace-separated word count.
int whitespace_tokens(std::string_view text);

// Cuts text before the earliest occurrence of any stop string.
std::string truncate_at_stop(std::string_view text, std::span<const std::string> stops);

// Runs the request with retries on TransientBackendError (exponential backoff),
// then applies stop strings and fills token accounting. Throws Error(backend)
// once retries are exhausted.
GenerationResult generate(Backend& backend, const GenerationRequest& request, const RetryPolicy& retry);

// Toy judge: a softmax-linear policy over hashed prompt features that emits
// one-token turns rendered in the trace wire format. Deterministic per request seed.
class ToyBackend : public Backend {
  public:
    ToyBackend(CriteriaSet criteria, double format_logit = 5.0, int feature_dim = 8, std::uint64_t seed = 7);
    Completion complete(const GenerationRequest& request) override;

  private:
    CriteriaSet criteria_;
    double format_logit_;
    int feature_dim_;
    std::uint64_t seed_;
};

class RemoteBackend : public Backend {
  public:
    explicit RemoteBackend(BackendDescriptor descriptor);
    Completion complete(const GenerationRequest& request) override;

  private:
    BackendDescriptor descriptor_;
};

std::shared_ptr<Backend> make_backend(const BackendDescriptor& descriptor, const CriteriaSet& criteria,
                                      std::uint64_t seed);

}  // namespace brrm
