#include "brrm/backend.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <cstdlib>
#include <random>
#include <thread>

#include <fmt/format.h>
#include <spdlog/spdlog.h>

#include "httplib.h"
#include "json.hpp"

#include "brrm/errors.hpp"
#include "brrm/grpo.hpp"

namespace brrm {

using nlohmann::json;

void GenerationRequest::validate() const {
    if (max_new_tokens < 1) throw input_error("max_new_tokens must be >= 1");
    if (max_new_tokens > max_total_tokens) {
        throw input_error(fmt::format("max_new_tokens ({}) exceeds max_total_tokens ({})", max_new_tokens, max_total_tokens));
    }
    if (!(temperature >= 0.0)) throw input_error("temperature must be >= 0");
    if (!(top_p > 0.0 && top_p <= 1.0)) throw input_error("top_p must lie in (0, 1]");
}

const char* to_string(BackendKind kind) { return kind == BackendKind::remote ? "remote" : "toy"; }

std::optional<BackendKind> backend_kind_from_string(std::string_view s) {
    if (s == "toy") return BackendKind::toy;
    if (s == "remote") return BackendKind::remote;
    return std::nullopt;
}

void BackendDescriptor::validate() const {
    if (kind == BackendKind::remote) {
        if (endpoint.empty()) throw config_error("backend.endpoint is required for remote backends");
        if (model.empty()) throw config_error("backend.model is required for remote backends");
    }
    if (max_retries < 0) throw config_error("backend.max_retries must be >= 0");
    if (max_concurrency < 1) throw config_error("backend.max_concurrency must be >= 1");
    if (!(timeout_seconds > 0.0)) throw config_error("backend.timeout_seconds must be > 0");
    if (backoff_ms < 0) throw config_error("backend.backoff_ms must be >= 0");
    if (toy_feature_dim < 1) throw config_error("backend.toy_feature_dim must be >= 1");
}

int whitespace_tokens(std::string_view text) {
    int n = 0;
    bool in_word = false;
    for (char c : text) {
        bool space = std::isspace(static_cast<unsigned char>(c)) != 0;
        if (!space && !in_word) ++n;
        in_word = !space;
    }
    return n;
}

std::string truncate_at_stop(std::string_view text, std::span<const std::string> stops) {
    std::size_t cut = text.size();
    for (const auto& s : stops) {
        if (s.empty()) continue;
        cut = std::min(cut, text.find(s));
    }
    return std::string(text.substr(0, cut));
}

GenerationResult generate(Backend& backend, const GenerationRequest& request, const RetryPolicy& retry) {
    request.validate();
    GenerationResult out;
    Completion c;
    for (int attempt = 0;; ++attempt) {
        try {
            c = backend.complete(request);
            break;
        } catch (const TransientBackendError& e) {
            if (attempt >= retry.max_retries) {
                throw Error(ErrorKind::backend,
                            fmt::format("backend unavailable after {} retries: {}", retry.max_retries, e.what()));
            }
            auto delay = retry.base_delay * (1LL << std::min(attempt, 20));
            spdlog::warn("generation attempt {} failed ({}); retrying in {} ms", attempt + 1, e.what(), delay.count());
            std::this_thread::sleep_for(delay);
            ++out.retry_count;
        }
    }
    out.text = truncate_at_stop(c.text, request.stop_strings);
    if (c.completion_tokens) {
        out.token_count = *c.completion_tokens;
        out.approximate_count = false;
    } else {
        out.token_count = whitespace_tokens(out.text);
    }
    const int total = out.token_count + c.prompt_tokens.value_or(0);
    out.truncated = c.finished_by_length || out.token_count > request.max_new_tokens || total > request.max_total_tokens;
    return out;
}

namespace {

std::vector<double> hashed_features(std::string_view text, int dim) {
    std::vector<double> x(static_cast<std::size_t>(dim), 0.0);
    std::string word;
    auto flush = [&] {
        if (word.empty()) return;
        std::uint64_t h = mix_seed(0, word);
        x[h % static_cast<std::uint64_t>(dim)] += (h >> 63) ? 1.0 : -1.0;
        word.clear();
    };
    for (char c : text) {
        if (std::isalnum(static_cast<unsigned char>(c))) {
            word.push_back(static_cast<char>(std::tolower(static_cast<unsigned char>(c))));
        } else {
            flush();
        }
    }
    flush();
    double norm = 0.0;
    for (double v : x) norm += v * v;
    if (norm > 0.0) {
        const double scale = std::sqrt(static_cast<double>(dim) / norm);
        for (double& v : x) v *= scale;
    }
    return x;
}

}  // namespace

ToyBackend::ToyBackend(CriteriaSet criteria, double format_logit, int feature_dim, std::uint64_t seed)
    : criteria_(std::move(criteria)), format_logit_(format_logit), feature_dim_(feature_dim), seed_(seed) {}

Completion ToyBackend::complete(const GenerationRequest& request) {
    const PromptKind kind = classify_prompt(request.prompt);
    if (kind == PromptKind::unknown) throw Error(ErrorKind::backend, "toy backend: unrecognized prompt template");

    ToyPolicy policy(feature_dim_);
    {
        std::mt19937_64 wrng(mix_seed(seed_, "toy-backend-weights"));
        std::normal_distribution<double> normal(0.0, 0.5);
        auto p = policy.params();
        for (double& v : p) v = normal(wrng);
        const int bias = feature_dim_;
        for (int a = 0; a < toy::kCriterionTokens; ++a) p[policy.index(0, a, bias)] += format_logit_;
        p[policy.index(1, toy::kVerdictFirst, bias)] += format_logit_;
        p[policy.index(1, toy::kVerdictSecond, bias)] += format_logit_;
    }

    std::mt19937_64 rng(mix_seed(request.seed.value_or(seed_), request.prompt));
    const auto x = hashed_features(request.prompt, feature_dim_);
    auto draw = [&](int step, std::optional<int> prev) {
        auto phi = policy.features(x, prev);
        auto lp = policy.log_probs(step, phi);
        if (request.temperature <= 0.0) {
            return static_cast<int>(std::max_element(lp.begin(), lp.end()) - lp.begin());
        }
        ActionProbs p{};
        double m = *std::max_element(lp.begin(), lp.end()), s = 0.0;
        for (std::size_t j = 0; j < p.size(); ++j) s += p[j] = std::exp((lp[j] - m) / request.temperature);
        double u = static_cast<double>(rng() >> 11) * 0x1.0p-53 * s, acc = 0.0;
        for (int a = 0; a < toy::kVocab; ++a) {
            acc += p[static_cast<std::size_t>(a)];
            if (u < acc) return a;
        }
        return toy::kVocab - 1;
    };

    Completion out;
    switch (kind) {
        case PromptKind::branch:
            out.text = toy::render_branch(draw(0, std::nullopt), criteria_);
            break;
        case PromptKind::branch_verdict: {
            int a0 = draw(0, std::nullopt);
            int a1 = draw(1, a0);
            out.text = toy::render_branch(a0, criteria_);
            if (toy::is_verdict(a1)) out.text += fmt::format("\\boxed{{{}}}\n", a1 == toy::kVerdictFirst ? 1 : 2);
            break;
        }
        case PromptKind::rethink:
        case PromptKind::rethink_from_raw:
        case PromptKind::unconditioned_rethink: {
            std::optional<int> prev = toy::kFiller;
            auto names = focus_dimensions(request.prompt);
            if (!names.empty()) {
                if (const auto* c = criteria_.by_name(names.front()); c && c->id <= toy::kCriterionTokens) prev = c->id - 1;
            }
            out.text = toy::render_rethink(draw(1, prev));
            break;
        }
        case PromptKind::single_turn: {
            int a0 = draw(0, std::nullopt);
            out.text = toy::render_branch(a0, criteria_) + toy::render_rethink(draw(1, a0));
            break;
        }
        case PromptKind::unknown: break;
    }
    return out;
}

RemoteBackend::RemoteBackend(BackendDescriptor descriptor) : descriptor_(std::move(descriptor)) {
    descriptor_.validate();
}

Completion RemoteBackend::complete(const GenerationRequest& request) {
    json body = {
        {"model", descriptor_.model},
        {"messages", json::array({{{"role", "user"}, {"content", request.prompt}}})},
        {"temperature", request.temperature},
        {"top_p", request.top_p},
        {"top_k", request.top_k},
        {"stop", request.stop_strings},
        {"max_tokens", request.max_new_tokens},
    };

    httplib::Client client(descriptor_.endpoint);
    const auto secs = static_cast<time_t>(descriptor_.timeout_seconds);
    client.set_connection_timeout(secs, 0);
    client.set_read_timeout(secs, 0);
    client.set_write_timeout(secs, 0);
    httplib::Headers headers;
    if (!descriptor_.api_key_env.empty()) {
        if (const char* key = std::getenv(descriptor_.api_key_env.c_str()); key && *key) {
            headers.emplace("Authorization", std::string("Bearer ") + key);
        }
    }

    auto res = client.Post(descriptor_.path, headers, body.dump(), "application/json");
    if (!res) throw TransientBackendError(fmt::format("transport error: {}", httplib::to_string(res.error())));
    if (res->status == 429 || res->status >= 500) {
        throw TransientBackendError(fmt::format("server returned HTTP {}", res->status));
    }
    if (res->status != 200) throw Error(ErrorKind::backend, fmt::format("server returned HTTP {}", res->status));

    json reply = json::parse(res->body, nullptr, false);
    if (reply.is_discarded() || !reply.contains("choices") || !reply["choices"].is_array() || reply["choices"].empty()) {
        throw Error(ErrorKind::backend, "malformed completion response: missing choices");
    }
    const json& choice = reply["choices"][0];
    Completion out;
    if (choice.contains("message") && choice["message"].contains("content") && choice["message"]["content"].is_string()) {
        out.text = choice["message"]["content"].get<std::string>();
    } else if (choice.contains("text") && choice["text"].is_string()) {
        out.text = choice["text"].get<std::string>();
    } else {
        throw Error(ErrorKind::backend, "malformed completion response: no generated text");
    }
    if (choice.contains("finish_reason") && choice["finish_reason"].is_string()) {
        out.finished_by_length = choice["finish_reason"] == "length";
    }
    if (reply.contains("usage") && reply["usage"].is_object()) {
        const json& usage = reply["usage"];
        if (usage.contains("completion_tokens") && usage["completion_tokens"].is_number_integer()) {
            out.completion_tokens = usage["completion_tokens"].get<int>();
        }
        if (usage.contains("prompt_tokens") && usage["prompt_tokens"].is_number_integer()) {
            out.prompt_tokens = usage["prompt_tokens"].get<int>();
        }
    }
    return out;
}

std::shared_ptr<Backend> make_backend(const BackendDescriptor& descriptor, const CriteriaSet& criteria,
                                      std::uint64_t seed) {
    descriptor.validate();
    if (descriptor.kind == BackendKind::remote) return std::make_shared<RemoteBackend>(descriptor);
    return std::make_shared<ToyBackend>(criteria, descriptor.toy_format_logit, descriptor.toy_feature_dim, seed);
}

}  // namespace brrm
