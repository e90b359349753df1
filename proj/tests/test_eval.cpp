#include "doctest.h"

#include <cmath>
#include <filesystem>
#include <random>
#include <regex>
#include <sstream>

#include "brrm/errors.hpp"
#include "brrm/eval.hpp"
#include "support.hpp"

using namespace brrm;

namespace {

OrchestratorConfig quiet_cfg() {
    OrchestratorConfig cfg;
    cfg.retry = {0, std::chrono::milliseconds(0)};
    return cfg;
}

Orchestrator with(std::function<int(const std::string&, const std::string&)> choose) {
    return Orchestrator(std::make_shared<test::FnBackend>(test::judge_fn(std::move(choose))), quiet_cfg());
}

int flip_gold(const std::string& a, const std::string& b) { return 3 - test::pick_gold(a, b); }
int first_always(const std::string&, const std::string&) { return 1; }

// Oracle that stays order-consistent when neither side is gold.
int gold_then_text(const std::string& a, const std::string& b) {
    const bool ga = a.find("[GOLD]") != std::string::npos, gb = b.find("[GOLD]") != std::string::npos;
    if (ga != gb) return ga ? 1 : 2;
    return a < b ? 1 : 2;
}

// Candidates are tagged "[CAND k]"; the judge prefers the higher k.
int later_candidate(const std::string& a, const std::string& b) {
    static const std::regex tag(R"(\[CAND (\d+)\])");
    std::smatch ma, mb;
    std::regex_search(a, ma, tag);
    std::regex_search(b, mb, tag);
    return std::stoi(ma[1]) > std::stoi(mb[1]) ? 1 : 2;
}

std::vector<ComparisonItem> pairwise_items(int n, std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    const char* domains[] = {"chat", "math", "code"};
    std::vector<ComparisonItem> out;
    for (int i = 0; i < n; ++i) {
        ComparisonItem it;
        it.id = "p" + std::to_string(i);
        it.prompt = "Question " + std::to_string(i);
        it.label = 1 + static_cast<int>(rng() % 2);
        const std::string gold = "[GOLD] good answer " + std::to_string(i);
        const std::string other = "weak answer " + std::to_string(i);
        it.response_1 = it.label == 1 ? gold : other;
        it.response_2 = it.label == 1 ? other : gold;
        it.domain = domains[i % 3];
        it.difficulty = static_cast<Difficulty>(rng() % 3);
        out.push_back(it);
    }
    return out;
}

std::vector<ComparisonItem> bon_items(int n, int n_cands, std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    std::vector<ComparisonItem> out;
    for (int i = 0; i < n; ++i) {
        ComparisonItem it;
        it.id = "b" + std::to_string(i);
        it.prompt = "Pick the best " + std::to_string(i);
        it.label = 1 + static_cast<int>(rng() % n_cands);
        for (int k = 1; k <= n_cands; ++k) {
            it.candidates.push_back((k == it.label ? "[GOLD] " : "") + std::string("[CAND ") + std::to_string(k) +
                                    "] candidate text");
        }
        it.response_1 = it.candidates[0];
        it.response_2 = it.candidates[1];
        out.push_back(it);
    }
    return out;
}

}  // namespace

TEST_CASE("dataset loading") {
    std::istringstream three(R"({"id":"a","prompt":"p","response_1":"x","response_2":"y","label":1}
{"id":"b","prompt":"p","response_1":"x","response_2":"y","label":"B","domain":"math","difficulty":"hard"}
{"id":"c","prompt":"p","response_1":"x","response_2":"y","label":"A","score_1":2,"score_2":-1}
)");
    auto ds = parse_dataset(three);
    REQUIRE(ds.items.size() == 3);
    CHECK(ds.rejects.empty());
    CHECK(ds.items[1].label == 2);
    CHECK(ds.items[1].difficulty == Difficulty::hard);
    CHECK(ds.items[2].label == 1);
    CHECK(ds.items[2].score_2 == -1);

    std::istringstream with_bad(R"({"id":"a","prompt":"p","response_1":"x","response_2":"y","label":1}

{"id":"b","prompt":"p","response_1":"x","label":2}
{"id":"c","prompt":"p","response_1":"x","response_2":"y","label":"B"}
not json
{"id":"d","prompt":"p","response_1":"x","response_2":"y","label":"C"}
)");
    ds = parse_dataset(with_bad);
    CHECK(ds.items.size() == 2);
    REQUIRE(ds.rejects.size() == 3);
    CHECK(ds.rejects[0].line == 3);
    CHECK(ds.rejects[1].line == 5);
    CHECK(ds.rejects[2].line == 6);

    std::istringstream none("garbage\n");
    try {
        parse_dataset(none);
        FAIL("expected empty_dataset");
    } catch (const Error& e) {
        CHECK(e.kind() == ErrorKind::empty_dataset);
    }
    try {
        load_dataset("/nonexistent/file.jsonl");
        FAIL("expected io error");
    } catch (const Error& e) {
        CHECK(e.kind() == ErrorKind::io);
    }

    std::istringstream cands(R"({"id":"q","prompt":"p","candidates":["a","b","c"],"label":3})");
    ds = parse_dataset(cands);
    REQUIRE(ds.items.size() == 1);
    CHECK(ds.items[0].response_1 == "a");
    CHECK(ds.items[0].response_2 == "b");
    CHECK(ds.items[0].label == 3);
}

TEST_CASE("pairwise soundness mocks") {
    const auto items = pairwise_items(30, 1);
    EvalConfig cfg;

    auto oracle = evaluate_pairwise(items, with(test::pick_gold), cfg);
    CHECK(oracle.overall_accuracy == 1.0);
    CHECK(oracle.swap_consistency == 1.0);
    CHECK(oracle.malformed_rate == 0.0);
    CHECK(oracle.n_judgments == 60);

    auto flip = evaluate_pairwise(items, with(flip_gold), cfg);
    CHECK(flip.overall_accuracy == 0.0);
    CHECK(flip.swap_consistency == 1.0);

    auto pos = evaluate_pairwise(items, with(first_always), cfg);
    CHECK(pos.overall_accuracy == 0.0);
    CHECK(pos.swap_consistency == 0.0);
    // Single pass: position bias is right exactly when gold is presented first.
    std::size_t gold_first = 0;
    for (const auto& it : items) gold_first += it.label == 1;
    CHECK(pos.single_pass_accuracy == doctest::Approx(static_cast<double>(gold_first) / items.size()));

    EvalConfig off;
    off.swap_control = SwapControl::off;
    auto pos_off = evaluate_pairwise(items, with(first_always), off);
    CHECK(pos_off.overall_accuracy == doctest::Approx(static_cast<double>(gold_first) / items.size()));
    CHECK_FALSE(pos_off.swap_consistency.has_value());
    CHECK(pos_off.n_judgments == 30);
}

TEST_CASE("malformed judgments count as incorrect") {
    auto be = std::make_shared<test::FnBackend>([](const GenerationRequest& req) {
        Completion c;
        c.text = classify_prompt(req.prompt) == PromptKind::branch ? test::branch_text() : "JUDGMENT:\nundecided\n";
        return c;
    });
    Orchestrator orch(be, quiet_cfg());
    auto r = evaluate_pairwise(pairwise_items(5, 2), orch, EvalConfig{});
    CHECK(r.overall_accuracy == 0.0);
    CHECK(r.malformed_rate == 1.0);
    for (const auto& it : r.items) CHECK(it.malformed);
}

TEST_CASE("best-of-n") {
    EvalConfig cfg;
    SUBCASE("N=2 equals pairwise on the same pairs") {
        for (auto choose : {test::pick_gold, flip_gold, first_always}) {
            for (SwapControl sc : {SwapControl::both_orders, SwapControl::off}) {
                cfg.swap_control = sc;
                auto bon = bon_items(20, 2, 3);
                auto pw = bon;
                for (auto& it : pw) it.candidates.clear();
                auto a = evaluate_bon(bon, with(choose), cfg);
                auto b = evaluate_pairwise(pw, with(choose), cfg);
                CHECK(a.overall_accuracy == b.overall_accuracy);
                CHECK(a.swap_consistency == b.swap_consistency);
                CHECK(a.n_correct == b.n_correct);
                for (std::size_t i = 0; i < a.items.size(); ++i) {
                    CHECK(a.items[i].correct == b.items[i].correct);
                    CHECK(a.items[i].verdicts == b.items[i].verdicts);
                }
            }
        }
    }
    SUBCASE("oracle with N=4") {
        auto r = evaluate_bon(bon_items(25, 4, 4), with(gold_then_text), cfg);
        CHECK(r.overall_accuracy == 1.0);
        CHECK(std::isnan(r.single_pass_accuracy));
        CHECK(r.n_judgments == 25 * 3 * 2);
    }
    SUBCASE("later-candidate judge crowns the last candidate") {
        for (int n : {3, 5}) {
            auto items = bon_items(60, n, 5 + n);
            std::size_t gold_last = 0;
            for (const auto& it : items) gold_last += it.label == n;
            auto r = evaluate_bon(items, with(later_candidate), cfg);
            CHECK(r.overall_accuracy == doctest::Approx(static_cast<double>(gold_last) / items.size()));
            for (const auto& it : r.items) CHECK(it.chosen == n);
        }
    }
    SUBCASE("position bias leaves every tournament undecided") {
        auto r = evaluate_bon(bon_items(10, 3, 6), with(first_always), cfg);
        CHECK(r.overall_accuracy == 0.0);
        for (const auto& it : r.items) CHECK_FALSE(it.chosen.has_value());
    }
    SUBCASE("too few candidates") {
        auto items = pairwise_items(2, 1);
        CHECK_THROWS_AS(evaluate_bon(items, with(test::pick_gold), cfg), Error);
    }
}

TEST_CASE("aggregation on a six-item fixture") {
    EvalReport rep;
    auto add = [&](const char* domain, std::optional<Difficulty> d, bool correct, bool errored = false) {
        ItemResult r;
        r.domain = domain ? std::optional<std::string>(domain) : std::nullopt;
        r.difficulty = d;
        r.correct = correct;
        r.errored = errored;
        rep.items.push_back(r);
    };
    add("chat", Difficulty::easy, true);
    add("chat", Difficulty::hard, false);
    add("chat", std::nullopt, true);
    add("math", Difficulty::easy, true);
    add("math", Difficulty::easy, false);
    add(nullptr, Difficulty::hard, true);
    auto dom = aggregate(rep, "domain");
    REQUIRE(dom.size() == 2);
    CHECK(dom["chat"].n == 3);
    CHECK(dom["chat"].accuracy == 2.0 / 3.0);
    CHECK(dom["math"].accuracy == 0.5);
    auto diff = aggregate(rep, "difficulty");
    REQUIRE(diff.size() == 2);  // "normal" has no items and is omitted
    CHECK(diff["easy"].accuracy == 2.0 / 3.0);
    CHECK(diff["hard"].accuracy == 0.5);
    CHECK(diff.count("normal") == 0);
    CHECK_THROWS_AS(aggregate(rep, "language"), Error);
}

TEST_CASE("report invariants") {
    const auto items = pairwise_items(40, 9);
    auto mixed = [](const std::string& a, const std::string& b) {
        // Right on most items, position-biased on ids ending in 7.
        return (a + b).find("7") != std::string::npos ? 1 : test::pick_gold(a, b);
    };
    auto r = evaluate_pairwise(items, with(mixed), EvalConfig{});
    CHECK(r.n_correct + r.n_incorrect + r.n_errored == r.n_items);
    double weighted = 0.0;
    std::size_t n = 0;
    for (const auto& [k, g] : r.per_domain) {
        weighted += g.accuracy * g.n;
        n += g.n;
        CHECK(g.accuracy >= 0.0);
        CHECK(g.accuracy <= 1.0);
    }
    CHECK(n == r.n_items);
    CHECK(std::abs(weighted / n - r.overall_accuracy) < 1e-12);
    CHECK(r.overall_accuracy > 0.0);
    CHECK(r.overall_accuracy < 1.0);

    auto again = evaluate_pairwise(items, with(mixed), EvalConfig{});
    CHECK(to_json(again).dump() == to_json(r).dump());
}

TEST_CASE("strict and lenient backend failures") {
    auto failing = [] {
        return std::make_shared<test::FnBackend>([](const GenerationRequest& req) -> Completion {
            if (req.prompt.find("Question 3\n") != std::string::npos) throw Error(ErrorKind::backend, "boom");
            return test::judge_fn(test::pick_gold)(req);
        });
    };
    const auto items = pairwise_items(6, 3);
    EvalConfig strict;
    CHECK_THROWS_AS(evaluate_pairwise(items, Orchestrator(failing(), quiet_cfg()), strict), Error);

    EvalConfig lenient;
    lenient.strict = false;
    auto r = evaluate_pairwise(items, Orchestrator(failing(), quiet_cfg()), lenient);
    CHECK(r.n_errored == 1);
    CHECK(r.n_correct == 5);
    CHECK(r.overall_accuracy == 1.0);
    CHECK(r.items[3].errored);
    CHECK(r.n_correct + r.n_incorrect + r.n_errored == r.n_items);
}

TEST_CASE("toy backend evaluation is deterministic") {
    OrchestratorConfig cfg = quiet_cfg();
    auto run = [&] {
        Orchestrator orch(std::make_shared<ToyBackend>(CriteriaSet::defaults()), cfg);
        return to_json(evaluate_pairwise(pairwise_items(20, 4), orch, EvalConfig{})).dump();
    };
    CHECK(run() == run());
}
