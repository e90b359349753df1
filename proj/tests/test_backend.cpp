#include "doctest.h"

#include <cstdlib>
#include <sstream>

#include <spdlog/sinks/ostream_sink.h>
#include <spdlog/spdlog.h>

#include "brrm/backend.hpp"
#include "brrm/errors.hpp"
#include "mock_server.hpp"
#include "support.hpp"

using namespace brrm;
using nlohmann::json;

namespace {

RetryPolicy fast_retry(int n = 3) { return {n, std::chrono::milliseconds(1)}; }

ComparisonItem item() {
    ComparisonItem it;
    it.id = "b1";
    it.prompt = "Name a prime.";
    it.response_1 = "7";
    it.response_2 = "8";
    return it;
}

BackendDescriptor remote_at(const std::string& endpoint) {
    BackendDescriptor d;
    d.kind = BackendKind::remote;
    d.endpoint = endpoint;
    d.model = "judge-test";
    d.timeout_seconds = 5;
    d.backoff_ms = 1;
    return d;
}

}  // namespace

TEST_CASE("request and descriptor validation") {
    GenerationRequest r;
    CHECK_NOTHROW(r.validate());
    r.max_new_tokens = 20000;
    CHECK_THROWS_AS(r.validate(), Error);
    BackendDescriptor d;
    d.kind = BackendKind::remote;
    CHECK_THROWS_WITH_AS(d.validate(), doctest::Contains("backend.endpoint"), Error);
    d.endpoint = "http://x";
    CHECK_THROWS_WITH_AS(d.validate(), doctest::Contains("backend.model"), Error);
}

TEST_CASE("stop strings and token counts") {
    const std::vector<std::string> stops{"\nJUDGMENT:", "STOP"};
    CHECK(truncate_at_stop("abc STOP def\nJUDGMENT: x", stops) == "abc ");
    CHECK(truncate_at_stop("abc\nJUDGMENT: STOP", stops) == "abc");
    CHECK(truncate_at_stop("nothing", stops) == "nothing");
    CHECK(whitespace_tokens("  a b\n\tc  ") == 3);
    CHECK(whitespace_tokens("") == 0);

    test::FnBackend fb([](const GenerationRequest&) { return Completion{"one two three\nJUDGMENT: four", {}, {}, false}; });
    GenerationRequest req;
    req.stop_strings = stops;
    auto g = generate(fb, req, fast_retry());
    CHECK(g.text == "one two three");
    CHECK(g.token_count == 3);
    CHECK(g.approximate_count);
    CHECK_FALSE(g.truncated);

    test::FnBackend reported([](const GenerationRequest&) { return Completion{"x", 100, 40, false}; });
    req.max_new_tokens = 50;
    req.max_total_tokens = 120;
    g = generate(reported, req, fast_retry());
    CHECK(g.token_count == 40);
    CHECK_FALSE(g.approximate_count);
    CHECK(g.truncated);  // 100 + 40 > 120

    test::FnBackend by_length([](const GenerationRequest&) { return Completion{"x", {}, {}, true}; });
    CHECK(generate(by_length, GenerationRequest{}, fast_retry()).truncated);
}

TEST_CASE("retries: fail twice then succeed") {
    int calls = 0;
    test::FnBackend fb([&](const GenerationRequest&) -> Completion {
        if (++calls <= 2) throw TransientBackendError("connection reset");
        return {"ok", {}, {}, false};
    });
    auto g = generate(fb, GenerationRequest{}, fast_retry());
    CHECK(g.text == "ok");
    CHECK(g.retry_count == 2);
    CHECK(calls == 3);
}

TEST_CASE("retries exhausted surface as backend_unavailable") {
    int calls = 0;
    test::FnBackend fb([&](const GenerationRequest&) -> Completion {
        ++calls;
        throw TransientBackendError("down");
    });
    try {
        generate(fb, GenerationRequest{}, fast_retry(2));
        FAIL("expected an error");
    } catch (const Error& e) {
        CHECK(e.kind() == ErrorKind::backend);
    }
    CHECK(calls == 3);
}

TEST_CASE("toy backend is deterministic per seed") {
    const auto c = CriteriaSet::defaults();
    ToyBackend a(c, 5.0, 8, 7), b(c, 5.0, 8, 7);
    GenerationRequest req;
    req.prompt = render_branch_prompt(item(), c);
    std::set<std::string> outputs;
    for (std::uint64_t s = 0; s < 40; ++s) {
        req.seed = s;
        auto x = a.complete(req).text;
        CHECK(x == b.complete(req).text);
        CHECK(parse_branch(x, c).violations.size() <= 3);
        outputs.insert(x);
    }
    CHECK(outputs.size() > 1);

    req.prompt = "not a judge prompt";
    try {
        a.complete(req);
        FAIL("expected an error");
    } catch (const Error& e) {
        CHECK(e.kind() == ErrorKind::backend);
    }

    // Greedy decoding ignores the seed.
    req.prompt = render_branch_prompt(item(), c);
    req.temperature = 0.0;
    req.seed = 1;
    auto g1 = a.complete(req).text;
    req.seed = 2;
    CHECK(a.complete(req).text == g1);
}

TEST_CASE("remote backend sends the documented body and parses the reply") {
    test::MockServer server([](const json&, int) {
        return test::MockServer::Reply{200, test::MockServer::completion("SELECTED: Logical Reasoning\nrest", 12)};
    });
    RemoteBackend rb(remote_at(server.endpoint()));
    GenerationRequest req;
    req.prompt = "hello";
    req.stop_strings = {"\nJUDGMENT:"};
    req.temperature = 0.7;
    req.top_p = 0.95;
    req.top_k = 20;
    req.max_new_tokens = 256;
    req.max_total_tokens = 1024;
    auto g = generate(rb, req, fast_retry());
    CHECK(g.text == "SELECTED: Logical Reasoning\nrest");
    CHECK(g.token_count == 12);
    CHECK_FALSE(g.approximate_count);

    REQUIRE(server.bodies().size() == 1);
    const json want = {{"model", "judge-test"},
                       {"messages", {{{"role", "user"}, {"content", "hello"}}}},
                       {"temperature", 0.7},
                       {"top_p", 0.95},
                       {"top_k", 20},
                       {"stop", {"\nJUDGMENT:"}},
                       {"max_tokens", 256}};
    CHECK(json::parse(server.bodies()[0]) == want);
    CHECK(server.auth_headers()[0].empty());
}

TEST_CASE("remote backend accepts the legacy text field and a length finish") {
    test::MockServer server([](const json&, int) {
        return test::MockServer::Reply{200, R"({"choices":[{"text":"a b c","finish_reason":"length"}]})"};
    });
    RemoteBackend rb(remote_at(server.endpoint()));
    auto g = generate(rb, GenerationRequest{}, fast_retry());
    CHECK(g.text == "a b c");
    CHECK(g.truncated);
    CHECK(g.approximate_count);
}

TEST_CASE("remote backend retries 5xx and 429 but not 4xx") {
    test::MockServer flaky([](const json&, int i) {
        if (i == 0) return test::MockServer::Reply{503, "{}"};
        if (i == 1) return test::MockServer::Reply{429, "{}"};
        return test::MockServer::Reply{200, test::MockServer::completion("fine")};
    });
    RemoteBackend rb(remote_at(flaky.endpoint()));
    auto g = generate(rb, GenerationRequest{}, fast_retry());
    CHECK(g.text == "fine");
    CHECK(g.retry_count == 2);

    test::MockServer bad([](const json&, int) { return test::MockServer::Reply{400, "{}"}; });
    RemoteBackend rb2(remote_at(bad.endpoint()));
    CHECK_THROWS_AS(generate(rb2, GenerationRequest{}, fast_retry()), Error);
    CHECK(bad.bodies().size() == 1);

    test::MockServer garbage([](const json&, int) { return test::MockServer::Reply{200, "not json"}; });
    RemoteBackend rb3(remote_at(garbage.endpoint()));
    CHECK_THROWS_AS(generate(rb3, GenerationRequest{}, fast_retry()), Error);
}

TEST_CASE("unreachable endpoint exhausts retries") {
    int port;
    {
        httplib::Server s;
        port = s.bind_to_any_port("127.0.0.1");
    }
    auto d = remote_at("http://127.0.0.1:" + std::to_string(port));
    d.timeout_seconds = 1;
    RemoteBackend rb(d);
    try {
        generate(rb, GenerationRequest{}, fast_retry(1));
        FAIL("expected an error");
    } catch (const Error& e) {
        CHECK(e.kind() == ErrorKind::backend);
    }
}

TEST_CASE("credential is sent as a bearer token and never logged") {
    const std::string secret = "sk-test-7f3a9c";
    ::setenv("BRRM_TEST_KEY", secret.c_str(), 1);
    std::ostringstream log;
    auto sink = std::make_shared<spdlog::sinks::ostream_sink_mt>(log);
    auto previous = spdlog::default_logger();
    spdlog::set_default_logger(std::make_shared<spdlog::logger>("capture", sink));
    spdlog::set_level(spdlog::level::trace);

    test::MockServer server([](const json&, int i) {
        if (i == 0) return test::MockServer::Reply{500, "{}"};
        return test::MockServer::Reply{200, test::MockServer::completion("ok")};
    });
    auto d = remote_at(server.endpoint());
    d.api_key_env = "BRRM_TEST_KEY";
    RemoteBackend rb(d);
    auto g = generate(rb, GenerationRequest{}, fast_retry());
    spdlog::set_default_logger(previous);
    ::unsetenv("BRRM_TEST_KEY");

    CHECK(g.retry_count == 1);
    for (const auto& h : server.auth_headers()) CHECK(h == "Bearer " + secret);
    CHECK(log.str().find("retrying") != std::string::npos);
    CHECK(log.str().find(secret) == std::string::npos);
}

TEST_CASE("make_backend dispatches on kind") {
    BackendDescriptor d;
    auto toy = make_backend(d, CriteriaSet::defaults(), 7);
    CHECK(dynamic_cast<ToyBackend*>(toy.get()) != nullptr);
    d.kind = BackendKind::remote;
    CHECK_THROWS_AS(make_backend(d, CriteriaSet::defaults(), 7), Error);
    CHECK(backend_kind_from_string("remote") == BackendKind::remote);
    CHECK_FALSE(backend_kind_from_string("local").has_value());
}
