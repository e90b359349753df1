#include "doctest.h"

#include <filesystem>
#include <fstream>
#include <sstream>

#include <arpa/inet.h>
#include <netinet/in.h>
#include <sys/socket.h>
#include <unistd.h>

#include "json.hpp"

#include "cli.hpp"
#include "mock_server.hpp"
#include "support.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

struct Run {
    int code = 0;
    std::string out;
    std::string err;
};

Run cli(std::vector<std::string> args) {
    args.insert(args.begin(), "brrm");
    std::vector<const char*> argv;
    for (const auto& a : args) argv.push_back(a.c_str());
    std::ostringstream out, err;
    Run r;
    r.code = brrm::cli::run_cli(static_cast<int>(argv.size()), argv.data(), out, err);
    r.out = out.str();
    r.err = err.str();
    return r;
}

std::string slurp(const fs::path& p) {
    std::ifstream in(p, std::ios::binary);
    std::ostringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

struct TempDir {
    fs::path path;
    explicit TempDir(const std::string& name) : path(fs::temp_directory_path() / ("brrm_cli_" + name)) {
        fs::remove_all(path);
        fs::create_directories(path);
    }
    ~TempDir() { fs::remove_all(path); }
    std::string operator/(const std::string& f) const { return (path / f).string(); }
};

void write(const std::string& path, const std::string& content) { std::ofstream(path, std::ios::binary) << content; }

std::string dataset_lines(int n) {
    std::string out;
    for (int i = 0; i < n; ++i) {
        const bool first = i % 2 == 0;
        json j = {{"id", "d" + std::to_string(i)},
                  {"prompt", "Question " + std::to_string(i)},
                  {"response_1", first ? "[GOLD] right" : "wrong"},
                  {"response_2", first ? "wrong" : "[GOLD] right"},
                  {"label", first ? 1 : 2},
                  {"domain", i % 3 ? "chat" : "math"}};
        out += j.dump() + "\n";
    }
    return out;
}

json strip_metadata(json j) {
    j.erase("metadata");
    return j;
}

const std::string kConformance = BRRM_CONFORMANCE_DIR;

}  // namespace

TEST_CASE("validate exit codes") {
    auto ok = cli({"validate", kConformance + "/positive/p01_single_criterion.txt"});
    CHECK(ok.code == 0);
    CHECK(ok.out == "well_formed\n");

    auto bad = cli({"validate", kConformance + "/negative/n01_four_criteria.txt"});
    CHECK(bad.code == 1);
    CHECK(bad.out.find("criteria_count_out_of_range") != std::string::npos);

    auto missing = cli({"validate", "/nonexistent/trace.txt"});
    CHECK(missing.code == 3);
    CHECK(missing.err.find("io") != std::string::npos);

    CHECK(cli({"validate"}).code == 2);
    CHECK(cli({"frobnicate"}).code == 2);
    CHECK(cli({"--version"}).code == 0);
}

TEST_CASE("reward prints the breakdown") {
    auto r = cli({"reward", kConformance + "/positive/p01_single_criterion.txt", "--label", "2"});
    REQUIRE(r.code == 0);
    auto j = json::parse(r.out);
    CHECK(j["well_formed"] == true);
    CHECK((j["composite"] == 0.0 || j["composite"] == -10.0));
    auto m = cli({"reward", kConformance + "/negative/n01_four_criteria.txt", "--label", "1"});
    REQUIRE(m.code == 0);
    CHECK(json::parse(m.out)["composite"] == -100.0);
    CHECK(cli({"reward", kConformance + "/positive/p01_single_criterion.txt", "--label", "3"}).code == 1);
}

TEST_CASE("train-toy") {
    TempDir dir("train");
    SUBCASE("default config runs the full step budget") {
        auto r = cli({"train-toy", "--out", dir / "h.jsonl"});
        REQUIRE(r.code == 0);
        std::istringstream lines(slurp(dir / "h.jsonl"));
        std::string line;
        int n = 0;
        while (std::getline(lines, line)) {
            auto j = json::parse(line);
            for (const char* k : {"step", "loss", "mean_reward", "accuracy", "format_violation_rate"}) CHECK(j.contains(k));
            ++n;
        }
        CHECK(n == 400);
        CHECK(r.out.find("steps: 400") != std::string::npos);
        auto manifest = json::parse(slurp(dir / "h.jsonl.run.json"));
        CHECK(manifest["engine_version"] == "0.1.0");
        CHECK(manifest["config"]["grpo"]["clip_high"] == 0.28);
        CHECK(manifest["metadata"].contains("started_at"));
    }
    SUBCASE("zero steps gives an empty history") {
        auto r = cli({"--set", "grpo.steps=0", "train-toy", "--out", dir / "h0.jsonl"});
        CHECK(r.code == 0);
        CHECK(fs::exists(dir / "h0.jsonl"));
        CHECK(slurp(dir / "h0.jsonl").empty());
    }
    SUBCASE("invalid clip bound is a config error") {
        auto r = cli({"--set", "grpo.clip_high=1.5", "train-toy", "--out", dir / "hx.jsonl"});
        CHECK(r.code == 2);
        CHECK(r.err.find("grpo.clip_high") != std::string::npos);
        CHECK_FALSE(fs::exists(dir / "hx.jsonl"));
    }
    SUBCASE("config file with an unknown key") {
        write(dir / "c.json", R"({"grpo": {"stepz": 3}})");
        auto r = cli({"--config", dir / "c.json", "train-toy", "--out", dir / "hy.jsonl"});
        CHECK(r.code == 2);
        CHECK(r.err.find("grpo.stepz") != std::string::npos);
        CHECK(cli({"--config", dir / "none.json", "train-toy"}).code == 3);
    }
}

// A loopback port that had a socket bound and then released; nothing listens on it.
int closed_port() {
    const int fd = ::socket(AF_INET, SOCK_STREAM, 0);
    sockaddr_in addr{};
    addr.sin_family = AF_INET;
    addr.sin_addr.s_addr = htonl(INADDR_LOOPBACK);
    ::bind(fd, reinterpret_cast<sockaddr*>(&addr), sizeof addr);
    socklen_t len = sizeof addr;
    ::getsockname(fd, reinterpret_cast<sockaddr*>(&addr), &len);
    ::close(fd);
    return ntohs(addr.sin_port);
}

TEST_CASE("eval against a remote mock judge") {
    TempDir dir("eval");
    write(dir / "d.jsonl", dataset_lines(10));
    const auto judge = brrm::test::judge_fn(brrm::test::pick_gold);
    brrm::test::MockServer server([&](const json& body, int) {
        brrm::GenerationRequest req;
        req.prompt = body["messages"][0]["content"].get<std::string>();
        return brrm::test::MockServer::Reply{200, brrm::test::MockServer::completion(judge(req).text)};
    });
    auto r = cli({"--set", "backend.kind=remote", "--set", "backend.endpoint=" + server.endpoint(), "--set",
                  "backend.model=mock-judge", "eval", "--dataset", dir / "d.jsonl", "--out", dir / "report.json"});
    REQUIRE(r.code == 0);
    auto rep = json::parse(slurp(dir / "report.json"));
    CHECK(rep["report"]["overall_accuracy"] == 1.0);
    CHECK(rep["report"]["swap_consistency"] == 1.0);
    CHECK(rep["report"]["n_items"] == 10);
    CHECK(rep["config"]["backend"]["model"] == "mock-judge");
    CHECK(server.bodies().size() == 40);
    CHECK(r.out.find("accuracy: 1.0000") != std::string::npos);

    // A dead endpoint is a backend error.
    const int port = closed_port();
    auto dead = cli({"--set", "backend.kind=remote", "--set", "backend.endpoint=http://127.0.0.1:" + std::to_string(port),
                     "--set", "backend.model=m", "--set", "backend.max_retries=0", "--set", "backend.timeout_seconds=5", "eval", "--dataset", dir / "d.jsonl",
                     "--out", dir / "r2.json"});
    CHECK(dead.code == 4);

    write(dir / "empty.jsonl", "nope\n");
    CHECK(cli({"eval", "--dataset", dir / "empty.jsonl", "--out", dir / "r3.json"}).code == 1);
}

TEST_CASE("analyze a constructed 70/30 trace") {
    TempDir dir("analyze");
    const std::string logic = "The argument holds because each premise supports the stated conclusion.\n";
    const std::string clarity = "The prose reads clearly and the paragraphs feel well organized.\n";
    std::string t1, t2;
    for (int i = 0; i < 7; ++i) t1 += logic;
    for (int i = 0; i < 3; ++i) t2 += clarity;
    write(dir / "t.jsonl", json({{"turn1", t1}, {"turn2", t2}}).dump() + "\n");
    auto r = cli({"analyze", "--traces", dir / "t.jsonl", "--csv", dir / "p.csv", "--summary", dir / "s.json"});
    REQUIRE(r.code == 0);
    const std::string csv = slurp(dir / "p.csv");
    CHECK(csv.find("Logical Reasoning,0.700000,70.00") != std::string::npos);
    CHECK(csv.find("Writing Clarity,0.300000,30.00") != std::string::npos);
    auto s = json::parse(slurp(dir / "s.json"));
    CHECK(s["summary"]["top_k_share"].get<double>() == doctest::Approx(1.0));
    CHECK(s["config"]["analyzer"]["top_k"] == 2);
}

TEST_CASE("rollout archive") {
    TempDir dir("rollout");
    write(dir / "d.jsonl", dataset_lines(2));
    auto r = cli({"rollout", "--dataset", dir / "d.jsonl", "--out", dir / "a.jsonl"});
    REQUIRE(r.code == 0);
    std::istringstream lines(slurp(dir / "a.jsonl"));
    std::string line;
    int n = 0;
    while (std::getline(lines, line)) {
        auto j = json::parse(line);
        CHECK(j["records"].size() == 2);
        CHECK(j.contains("turn1"));
        ++n;
    }
    CHECK(n == 2);
    CHECK(json::parse(slurp(dir / "a.jsonl.run.json"))["records"] == 4);

    auto grouped = cli({"rollout", "--dataset", dir / "d.jsonl", "--out", dir / "g.jsonl", "--k", "4"});
    REQUIRE(grouped.code == 0);
    CHECK(grouped.out.find("traces: 8\nrecords: 16") != std::string::npos);
}

TEST_CASE("artifacts are byte-identical modulo metadata and inputs are untouched") {
    TempDir a("det_a"), b("det_b");
    const std::string data = dataset_lines(12);
    write(a / "d.jsonl", data);
    write(b / "d.jsonl", data);
    for (const TempDir* d : {&a, &b}) {
        REQUIRE(cli({"--set", "grpo.steps=40", "train-toy", "--out", *d / "h.jsonl"}).code == 0);
        REQUIRE(cli({"eval", "--dataset", *d / "d.jsonl", "--out", *d / "e.json"}).code == 0);
        REQUIRE(cli({"rollout", "--dataset", *d / "d.jsonl", "--out", *d / "r.jsonl", "--k", "3"}).code == 0);
    }
    CHECK(slurp(a / "h.jsonl") == slurp(b / "h.jsonl"));
    CHECK(slurp(a / "r.jsonl") == slurp(b / "r.jsonl"));
    for (const char* f : {"h.jsonl.run.json", "e.json", "r.jsonl.run.json"}) {
        CAPTURE(f);
        CHECK(strip_metadata(json::parse(slurp(a / f))).dump() == strip_metadata(json::parse(slurp(b / f))).dump());
    }
    CHECK(slurp(a / "d.jsonl") == data);
}
