#include "cli.hpp"

#include <chrono>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>

#include <fmt/format.h>
#include <spdlog/sinks/stdout_color_sinks.h>
#include <spdlog/spdlog.h>

#include "CLI11.hpp"
#include "json.hpp"

#include "brrm/config.hpp"
#include "brrm/diffusion.hpp"
#include "brrm/errors.hpp"
#include "brrm/eval.hpp"
#include "brrm/grpo.hpp"
#include "brrm/rollout.hpp"
#include "brrm/version.hpp"

namespace brrm::cli {

using nlohmann::json;
namespace fs = std::filesystem;

namespace {

struct Globals {
    std::string config_path;
    std::optional<std::uint64_t> seed;
    std::string log_level;
    std::vector<std::string> overrides;
};

std::string utc_now() {
    const auto t = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
    std::tm tm{};
    gmtime_r(&t, &tm);
    char buf[32];
    std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", &tm);
    return buf;
}

EngineConfig resolve_config(const Globals& g) {
    json overrides = g.config_path.empty() ? json::object() : read_config_file(g.config_path);
    for (const auto& o : g.overrides) apply_override(overrides, o);
    if (g.seed) overrides["seed"] = *g.seed;
    if (!g.log_level.empty()) overrides["log_level"] = g.log_level;
    EngineConfig cfg = config_from_json(overrides);
    spdlog::set_level(spdlog::level::from_str(cfg.log_level));
    return cfg;
}

std::string read_file(const fs::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw io_error(fmt::format("cannot read '{}'", path.string()));
    std::ostringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

void write_file(const fs::path& path, std::string_view content) {
    if (path.has_parent_path()) {
        std::error_code ec;
        fs::create_directories(path.parent_path(), ec);
    }
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw io_error(fmt::format("cannot write '{}'", path.string()));
    out << content;
    if (!out) throw io_error(fmt::format("failed writing '{}'", path.string()));
}

// Provenance wrapper: everything except `metadata` is a pure function of inputs.
json provenance(const EngineConfig& cfg, const std::string& command, const std::string& started) {
    return {{"command", command},
            {"engine_version", kVersion},
            {"config", to_json(cfg)},
            {"metadata", {{"started_at", started}, {"finished_at", utc_now()}}}};
}

json violations_json(const std::vector<FormatViolation>& vs) {
    json arr = json::array();
    for (const auto& v : vs) arr.push_back({{"code", to_string(v.code)}, {"detail", v.detail}});
    return arr;
}

json breakdown_json(const RewardBreakdown& b) {
    return {{"format", b.format},
            {"outcome", b.outcome},
            {"outcome_applied", b.outcome_applied},
            {"composite", b.composite},
            {"turn1_reward", b.turn1_reward},
            {"turn2_reward", b.turn2_reward}};
}

std::shared_ptr<Orchestrator> make_orchestrator(const EngineConfig& cfg) {
    auto backend = make_backend(cfg.backend, cfg.criteria_set(), cfg.seed);
    return std::make_shared<Orchestrator>(std::move(backend), cfg.orchestrator_config());
}

int cmd_validate(const Globals& g, const std::string& path, std::ostream& out) {
    EngineConfig cfg = resolve_config(g);
    const std::string text = read_file(path);
    DeliberationTrace t = parse_trace(text, cfg.criteria_set(), cfg.reward.verdict_scale());
    if (t.well_formed) {
        out << "well_formed\n";
        return kOk;
    }
    for (const auto& v : t.violations) out << to_string(v.code) << ": " << v.detail << "\n";
    return kDomainFailure;
}

int cmd_reward(const Globals& g, const std::string& path, int label, std::optional<int> truth, std::ostream& out) {
    EngineConfig cfg = resolve_config(g);
    auto verdict = verdict_from_int(label);
    if (!verdict) throw input_error(fmt::format("--label must be 1 or 2, got {}", label));
    DeliberationTrace t = parse_trace(read_file(path), cfg.criteria_set(), cfg.reward.verdict_scale());
    RewardBreakdown b = composite_reward(t, *verdict, cfg.reward, truth);
    json j = breakdown_json(b);
    j["well_formed"] = t.well_formed;
    j["violations"] = violations_json(t.violations);
    out << j.dump(2) << "\n";
    return kOk;
}

int cmd_train_toy(const Globals& g, const std::string& out_path, std::ostream& out) {
    EngineConfig cfg = resolve_config(g);
    const std::string started = utc_now();
    ToyEnvironment env(cfg.grpo.feature_dim, cfg.seed);
    ToyPolicy policy(cfg.grpo.feature_dim);
    std::string lines;
    TrainHistory h = train_loop(env, policy, cfg.criteria_set(), cfg.reward, cfg.grpo, [&](const TrainStep& s) {
        json j = {{"step", s.step},
                  {"loss", s.loss},
                  {"mean_reward", s.mean_reward},
                  {"accuracy", s.accuracy},
                  {"format_violation_rate", s.format_violation_rate},
                  {"train_accuracy", s.train_accuracy},
                  {"train_format_violation_rate", s.train_format_violation_rate},
                  {"grad_norm", s.grad_norm},
                  {"rollouts", s.rollouts},
                  {"buffer_records", s.buffer_records}};
        lines += j.dump() + "\n";
        if (s.step % 50 == 0) {
            spdlog::info("step {}: accuracy {:.3f}, format violations {:.4f}", s.step, s.accuracy,
                         s.format_violation_rate);
        }
    });
    write_file(out_path, lines);

    const HeldoutMetrics final = h.steps.empty() ? h.initial : HeldoutMetrics{h.steps.back().accuracy,
                                                                                h.steps.back().format_violation_rate};
    json manifest = provenance(cfg, "train-toy", started);
    manifest["history"] = fs::path(out_path).filename().string();
    manifest["steps"] = h.steps.size();
    manifest["initial"] = {{"accuracy", h.initial.accuracy}, {"format_violation_rate", h.initial.format_violation_rate}};
    manifest["final"] = {{"accuracy", final.accuracy}, {"format_violation_rate", final.format_violation_rate}};
    write_file(out_path + ".run.json", manifest.dump(2) + "\n");
    out << fmt::format("steps: {}\nfinal accuracy: {:.4f}\nfinal format violation rate: {:.4f}\n", h.steps.size(),
                       final.accuracy, final.format_violation_rate);
    return kOk;
}

int cmd_rollout(const Globals& g, const std::string& dataset, const std::string& out_path, int k, std::ostream& out) {
    EngineConfig cfg = resolve_config(g);
    const std::string started = utc_now();
    if (k < 1) throw input_error(fmt::format("--k must be >= 1, got {}", k));
    Dataset ds = load_dataset(dataset);
    auto orch = make_orchestrator(cfg);

    std::vector<std::vector<RolloutResult>> results(ds.items.size());
    parallel_for(ds.items.size(), cfg.eval.concurrency, [&](std::size_t i) {
        if (k == 1) {
            results[i].push_back(orch->rollout_two_turn(ds.items[i], 0));
        } else {
            results[i] = orch->rollout_group(ds.items[i], k).rollouts;
        }
    });

    std::string lines;
    std::size_t traces = 0, records = 0, malformed = 0;
    for (const auto& group : results) {
        for (const auto& r : group) {
            json recs = json::array();
            for (const auto& rec : r.records) {
                recs.push_back({{"turn", to_string(rec.turn)},
                                {"context", rec.context},
                                {"generated", rec.generated},
                                {"reward", rec.reward},
                                {"token_count", rec.token_count},
                                {"approximate_count", rec.approximate_count},
                                {"truncated", rec.truncated}});
            }
            json j = {{"item_id", r.item_id},
                      {"rollout", r.rollout_index},
                      {"mode", to_string(r.mode)},
                      {"turn1", r.trace.branch.raw},
                      {"turn2", r.trace.rethink.raw},
                      {"well_formed", r.trace.well_formed},
                      {"violations", violations_json(r.trace.violations)},
                      {"verdict", r.trace.rethink.verdict ? json(to_int(*r.trace.rethink.verdict)) : json(nullptr)},
                      {"reward", breakdown_json(r.reward)},
                      {"records", recs}};
            lines += j.dump() + "\n";
            ++traces;
            records += r.records.size();
            if (!r.trace.well_formed) ++malformed;
        }
    }
    write_file(out_path, lines);
    json manifest = provenance(cfg, "rollout", started);
    manifest["dataset"] = fs::path(dataset).filename().string();
    manifest["rejected_lines"] = ds.rejects.size();
    manifest["traces"] = traces;
    manifest["records"] = records;
    write_file(out_path + ".run.json", manifest.dump(2) + "\n");
    out << fmt::format("traces: {}\nrecords: {}\nmalformed: {}\n", traces, records, malformed);
    return kOk;
}

int cmd_eval(const Globals& g, const std::string& dataset, const std::string& out_path, bool bon, std::ostream& out) {
    EngineConfig cfg = resolve_config(g);
    const std::string started = utc_now();
    Dataset ds = load_dataset(dataset);
    auto orch = make_orchestrator(cfg);
    EvalReport report = bon ? evaluate_bon(ds.items, *orch, cfg.eval) : evaluate_pairwise(ds.items, *orch, cfg.eval);
    json j = provenance(cfg, "eval", started);
    j["dataset"] = fs::path(dataset).filename().string();
    j["rejects"] = json::array();
    for (const auto& r : ds.rejects) j["rejects"].push_back({{"line", r.line}, {"reason", r.reason}});
    j["report"] = to_json(report);
    write_file(out_path, j.dump(2) + "\n");
    out << fmt::format("items: {}\naccuracy: {:.4f}\n", report.n_items, report.overall_accuracy);
    if (report.swap_consistency) out << fmt::format("swap consistency: {:.4f}\n", *report.swap_consistency);
    out << fmt::format("malformed rate: {:.4f}\n", report.malformed_rate);
    return kOk;
}

std::vector<AnalyzedTrace> load_traces(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw io_error(fmt::format("cannot read traces '{}'", path));
    std::vector<AnalyzedTrace> out;
    std::string line;
    int lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
        json j = json::parse(line, nullptr, false);
        if (j.is_discarded() || !j.is_object()) {
            throw input_error(fmt::format("{}:{}: expected a JSON object", path, lineno));
        }
        AnalyzedTrace t;
        if (j.contains("turn1") || j.contains("turn2")) {
            t.turn1 = j.value("turn1", "");
            t.turn2 = j.value("turn2", "");
        } else if (j.contains("trace")) {
            std::tie(t.turn1, t.turn2) = split_trace(j["trace"].get<std::string>());
        } else {
            throw input_error(fmt::format("{}:{}: needs 'turn1'/'turn2' or 'trace'", path, lineno));
        }
        if (j.contains("turn1_tokens")) t.turn1_tokens = j["turn1_tokens"].get<int>();
        if (j.contains("turn2_tokens")) t.turn2_tokens = j["turn2_tokens"].get<int>();
        out.push_back(std::move(t));
    }
    if (out.empty()) throw input_error(fmt::format("'{}' holds no traces", path));
    return out;
}

int cmd_analyze(const Globals& g, const std::string& traces_path, const std::string& csv_path,
                const std::string& summary_path, std::ostream& out) {
    EngineConfig cfg = resolve_config(g);
    const std::string started = utc_now();
    auto traces = load_traces(traces_path);
    const CriteriaSet criteria = cfg.criteria_set();
    Lexicon lexicon = cfg.analyzer.lexicon_path.empty() ? Lexicon::defaults() : Lexicon::load(cfg.analyzer.lexicon_path);
    std::shared_ptr<Orchestrator> orch;
    std::optional<Attributor> attributor;
    if (cfg.analyzer.attributor == AttributorKind::external_judge) {
        orch = make_orchestrator(cfg);
        attributor.emplace(*orch, lexicon);
    } else {
        attributor.emplace(lexicon);
    }
    AllocationProfile p = allocation_profile(traces, criteria, *attributor);
    write_file(csv_path, profile_csv(p, criteria));
    json j = provenance(cfg, "analyze", started);
    j["traces"] = fs::path(traces_path).filename().string();
    j["summary"] = profile_summary(p, criteria, cfg.analyzer.top_k);
    write_file(summary_path, j.dump(2) + "\n");
    const auto c = concentration_metrics(p, cfg.analyzer.top_k);
    out << fmt::format("traces: {}\ntop-{} share: {:.4f}\nentropy: {:.4f}\nunattributed: {:.4f}\n", p.n_traces, c.k,
                       c.top_k_share, c.entropy, p.unattributed);
    return kOk;
}

int exit_code_for(ErrorKind kind) {
    switch (kind) {
        case ErrorKind::config: return kConfigError;
        case ErrorKind::io: return kIoError;
        case ErrorKind::backend: return kBackendError;
        case ErrorKind::input:
        case ErrorKind::empty_dataset: return kDomainFailure;
    }
    return kDomainFailure;
}

}  // namespace

int run_cli(int argc, const char* const* argv, std::ostream& out, std::ostream& err) {
    static const auto logger = [] {
        auto l = spdlog::stderr_color_mt("brrm");
        spdlog::set_default_logger(l);
        return l;
    }();
    spdlog::set_level(spdlog::level::info);

    CLI::App app{"Two-turn branch-and-rethink reward model engine", "brrm"};
    app.set_version_flag("--version", std::string(kVersion));
    app.require_subcommand(1);

    Globals g;
    std::uint64_t seed = 0;
    app.add_option("--config", g.config_path, "JSON engine config file");
    auto* seed_opt = app.add_option("--seed", seed, "Seed for training and sampling");
    app.add_option("--log-level", g.log_level, "trace, debug, info, warn, error, critical or off");
    app.add_option("--set", g.overrides, "Config override key=value (repeatable, wins over the file)");

    std::string trace_path, dataset, out_path = "history.jsonl", csv_path, summary_path;
    int label = 0, k = 1;
    std::optional<int> truth;
    bool bon = false;

    auto* validate = app.add_subcommand("validate", "Check a stored two-turn trace");
    validate->add_option("trace", trace_path, "Trace text file")->required();

    auto* reward = app.add_subcommand("reward", "Compute rewards for a stored trace");
    reward->add_option("trace", trace_path, "Trace text file")->required();
    reward->add_option("--label", label, "Gold label (1 or 2)")->required();
    reward->add_option("--truth-score", truth, "Gold score of response 1 for the scaled variant");

    auto* train = app.add_subcommand("train-toy", "Train the toy judge policy with GRPO");
    train->add_option("--out", out_path, "History file (JSONL)")->capture_default_str();

    auto* rollout = app.add_subcommand("rollout", "Generate judge traces for a dataset");
    rollout->add_option("--dataset", dataset, "Dataset (JSONL)")->required();
    rollout->add_option("--out", out_path, "Trace archive (JSONL)")->required();
    rollout->add_option("--k", k, "Rollouts per item")->capture_default_str();

    auto* eval = app.add_subcommand("eval", "Evaluate preference accuracy on a dataset");
    eval->add_option("--dataset", dataset, "Dataset (JSONL)")->required();
    eval->add_option("--out", out_path, "Report file (JSON)")->required();
    eval->add_flag("--bon", bon, "Best-of-N evaluation over candidates");

    auto* analyze = app.add_subcommand("analyze", "Token-allocation analysis of traces");
    analyze->add_option("--traces", trace_path, "Trace archive (JSONL)")->required();
    analyze->add_option("--csv", csv_path, "Per-dimension CSV output")->required();
    analyze->add_option("--summary", summary_path, "JSON summary output")->required();

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e, out, err);
        return code == 0 ? kOk : kConfigError;
    }
    if (*seed_opt) g.seed = seed;

    try {
        if (*validate) return cmd_validate(g, trace_path, out);
        if (*reward) return cmd_reward(g, trace_path, label, truth, out);
        if (*train) return cmd_train_toy(g, out_path, out);
        if (*rollout) return cmd_rollout(g, dataset, out_path, k, out);
        if (*eval) return cmd_eval(g, dataset, out_path, bon, out);
        if (*analyze) return cmd_analyze(g, trace_path, csv_path, summary_path, out);
    } catch (const Error& e) {
        err << "error (" << to_string(e.kind()) << "): " << e.what() << "\n";
        return exit_code_for(e.kind());
    } catch (const std::exception& e) {
        err << "error: " << e.what() << "\n";
        return kDomainFailure;
    }
    return kConfigError;
}

}  // namespace brrm::cli
