#include "brrm/eval.hpp"

#include <cmath>
#include <fstream>
#include <limits>

#include <fmt/format.h>
#include <spdlog/spdlog.h>

#include "brrm/errors.hpp"

namespace brrm {

using nlohmann::json;

namespace {

std::string field_string(const json& obj, const char* key) {
    const json& v = obj.at(key);
    if (!v.is_string()) throw input_error(fmt::format("field '{}' must be a string", key));
    return v.get<std::string>();
}

std::optional<int> field_score(const json& obj, const char* key) {
    if (!obj.contains(key) || obj.at(key).is_null()) return std::nullopt;
    const json& v = obj.at(key);
    if (!v.is_number_integer()) throw input_error(fmt::format("field '{}' must be an integer", key));
    return v.get<int>();
}

int parse_label(const json& v) {
    if (v.is_number_integer()) return v.get<int>();
    if (v.is_string()) {
        const auto s = v.get<std::string>();
        if (s == "A" || s == "a" || s == "1") return 1;
        if (s == "B" || s == "b" || s == "2") return 2;
    }
    throw input_error(fmt::format("unrecognized label {}", v.dump()));
}

ComparisonItem parse_item(const json& obj, int line) {
    if (!obj.is_object()) throw input_error("line is not a JSON object");
    ComparisonItem item;
    if (obj.contains("id")) {
        const json& id = obj.at("id");
        if (id.is_string()) {
            item.id = id.get<std::string>();
        } else if (id.is_number_integer()) {
            item.id = std::to_string(id.get<long long>());
        } else {
            throw input_error("field 'id' must be a string or integer");
        }
    } else {
        item.id = fmt::format("line-{}", line);
    }
    if (!obj.contains("prompt")) throw input_error("missing field 'prompt'");
    item.prompt = field_string(obj, "prompt");
    if (obj.contains("candidates")) {
        const json& c = obj.at("candidates");
        if (!c.is_array()) throw input_error("field 'candidates' must be an array of strings");
        for (const auto& s : c) {
            if (!s.is_string()) throw input_error("field 'candidates' must be an array of strings");
            item.candidates.push_back(s.get<std::string>());
        }
    }
    for (auto [key, dst] : {std::pair{"response_1", &item.response_1}, std::pair{"response_2", &item.response_2}}) {
        if (obj.contains(key)) {
            *dst = field_string(obj, key);
        } else if (item.candidates.size() < 2) {
            throw input_error(fmt::format("missing field '{}'", key));
        }
    }
    if (!obj.contains("response_1") && item.candidates.size() >= 2) item.response_1 = item.candidates[0];
    if (!obj.contains("response_2") && item.candidates.size() >= 2) item.response_2 = item.candidates[1];
    if (!obj.contains("label")) throw input_error("missing field 'label'");
    item.label = parse_label(obj.at("label"));
    if (obj.contains("domain") && !obj.at("domain").is_null()) item.domain = field_string(obj, "domain");
    if (obj.contains("difficulty") && !obj.at("difficulty").is_null()) {
        auto d = difficulty_from_string(field_string(obj, "difficulty"));
        if (!d) throw input_error(fmt::format("unknown difficulty {}", obj.at("difficulty").dump()));
        item.difficulty = d;
    }
    item.score_1 = field_score(obj, "score_1");
    item.score_2 = field_score(obj, "score_2");
    item.validate();
    return item;
}

struct Judgment {
    std::optional<int> verdict;  // presented numbering
    bool malformed = false;
};

Judgment judge(const Orchestrator& orch, const ComparisonItem& pair, std::string_view salt) {
    RolloutResult r = orch.rollout_two_turn(pair, 0, salt);
    if (!r.trace.well_formed || !r.trace.rethink.verdict) return {std::nullopt, true};
    return {to_int(*r.trace.rethink.verdict), false};
}

ComparisonItem make_pair(const ComparisonItem& item, std::string a, std::string b, int label) {
    ComparisonItem p;
    p.id = item.id;
    p.prompt = item.prompt;
    p.response_1 = std::move(a);
    p.response_2 = std::move(b);
    p.label = label;
    p.domain = item.domain;
    p.difficulty = item.difficulty;
    return p;
}

struct ItemTally {
    std::size_t matches = 0;
    std::size_t consistent = 0;
    std::size_t judgments = 0;
    std::size_t malformed = 0;
};

template <typename JudgeItem>
EvalReport run_eval(std::span<const ComparisonItem> items, const EvalConfig& cfg, std::string kind,
                    JudgeItem&& judge_item) {
    if (items.empty()) throw input_error("no items to evaluate");
    EvalReport report;
    report.kind = std::move(kind);
    report.swap_control = cfg.swap_control;
    report.items.resize(items.size());
    std::vector<ItemTally> tallies(items.size());

    parallel_for(items.size(), cfg.concurrency, [&](std::size_t i) {
        ItemResult& res = report.items[i];
        res.id = items[i].id;
        res.domain = items[i].domain;
        res.difficulty = items[i].difficulty;
        res.gold = items[i].label;
        try {
            judge_item(items[i], res, tallies[i]);
        } catch (const Error& e) {
            if (e.kind() != ErrorKind::backend || cfg.strict) throw;
            spdlog::warn("item '{}' errored: {}", items[i].id, e.what());
            ItemResult blank;
            blank.id = res.id;
            blank.domain = res.domain;
            blank.difficulty = res.difficulty;
            blank.gold = res.gold;
            res = std::move(blank);
            res.errored = true;
            res.error = e.what();
            tallies[i] = {};
        }
    });

    std::size_t matches = 0, consistent = 0, single_correct = 0, malformed = 0;
    for (std::size_t i = 0; i < items.size(); ++i) {
        const ItemResult& r = report.items[i];
        if (r.errored) {
            ++report.n_errored;
            continue;
        }
        if (r.correct) {
            ++report.n_correct;
        } else {
            ++report.n_incorrect;
        }
        if (r.single_pass_correct) ++single_correct;
        matches += tallies[i].matches;
        consistent += tallies[i].consistent;
        report.n_judgments += tallies[i].judgments;
        malformed += tallies[i].malformed;
    }
    report.n_items = items.size();
    const std::size_t judged = report.n_correct + report.n_incorrect;
    if (judged > 0) {
        report.overall_accuracy = static_cast<double>(report.n_correct) / static_cast<double>(judged);
        report.single_pass_accuracy = static_cast<double>(single_correct) / static_cast<double>(judged);
    }
    if (cfg.swap_control == SwapControl::both_orders) {
        report.swap_consistency = matches ? static_cast<double>(consistent) / static_cast<double>(matches) : 0.0;
    }
    if (report.n_judgments > 0) {
        report.malformed_rate = static_cast<double>(malformed) / static_cast<double>(report.n_judgments);
    }
    report.per_domain = aggregate(report, "domain");
    report.per_difficulty = aggregate(report, "difficulty");
    return report;
}

}  // namespace

Dataset parse_dataset(std::istream& in) {
    Dataset ds;
    std::string line;
    int lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
        json obj = json::parse(line, nullptr, false);
        if (obj.is_discarded()) {
            ds.rejects.push_back({lineno, "invalid JSON"});
            continue;
        }
        try {
            ds.items.push_back(parse_item(obj, lineno));
        } catch (const Error& e) {
            ds.rejects.push_back({lineno, e.what()});
        }
    }
    if (ds.items.empty()) {
        throw Error(ErrorKind::empty_dataset,
                    fmt::format("dataset has no valid items ({} rejected lines)", ds.rejects.size()));
    }
    return ds;
}

Dataset load_dataset(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw io_error(fmt::format("cannot read dataset '{}'", path.string()));
    Dataset ds = parse_dataset(in);
    for (const auto& r : ds.rejects) spdlog::warn("{}:{}: rejected: {}", path.string(), r.line, r.reason);
    return ds;
}

const char* to_string(SwapControl s) { return s == SwapControl::off ? "off" : "both_orders"; }

std::optional<SwapControl> swap_control_from_string(std::string_view s) {
    if (s == "off") return SwapControl::off;
    if (s == "both_orders") return SwapControl::both_orders;
    return std::nullopt;
}

EvalReport evaluate_pairwise(std::span<const ComparisonItem> items, const Orchestrator& orch, const EvalConfig& cfg) {
    for (const auto& it : items) {
        if (it.label != 1 && it.label != 2) {
            throw input_error(fmt::format("item '{}': pairwise evaluation needs label 1 or 2", it.id));
        }
    }
    const bool both = cfg.swap_control == SwapControl::both_orders;
    return run_eval(items, cfg, "pairwise", [&](const ComparisonItem& item, ItemResult& res, ItemTally& tally) {
        ComparisonItem pair = make_pair(item, item.response_1, item.response_2, item.label);
        Judgment fwd = judge(orch, pair, "fwd");
        tally.judgments = 1;
        tally.malformed = fwd.malformed ? 1 : 0;
        res.verdicts.push_back(fwd.verdict);
        res.single_pass_correct = fwd.verdict == item.label;
        if (!both) {
            res.chosen = fwd.verdict;
            res.correct = res.single_pass_correct;
            res.malformed = fwd.malformed;
            return;
        }
        Judgment sw = judge(orch, pair.swapped(), "swap");
        std::optional<int> sw_orig;
        if (sw.verdict) sw_orig = 3 - *sw.verdict;
        res.verdicts.push_back(sw_orig);
        tally.judgments = 2;
        tally.malformed += sw.malformed ? 1 : 0;
        tally.matches = 1;
        res.consistent = fwd.verdict && sw_orig && *fwd.verdict == *sw_orig;
        tally.consistent = *res.consistent ? 1 : 0;
        if (*res.consistent) res.chosen = fwd.verdict;
        res.correct = res.chosen == item.label;
        res.malformed = fwd.malformed || sw.malformed;
    });
}

EvalReport evaluate_bon(std::span<const ComparisonItem> items, const Orchestrator& orch, const EvalConfig& cfg) {
    for (const auto& it : items) {
        if (it.candidates.size() < 2) {
            throw input_error(fmt::format("item '{}': Best-of-N evaluation needs at least 2 candidates", it.id));
        }
    }
    const bool both = cfg.swap_control == SwapControl::both_orders;
    EvalReport report =
        run_eval(items, cfg, "best_of_n", [&](const ComparisonItem& item, ItemResult& res, ItemTally& tally) {
            const auto& cands = item.candidates;
            const int gold = item.label - 1;
            int champ = 0;
            bool decided = true;
            for (int j = 1; j < static_cast<int>(cands.size()) && decided; ++j) {
                const int label = gold == j ? 2 : 1;
                ComparisonItem pair = make_pair(item, cands[static_cast<std::size_t>(champ)],
                                                cands[static_cast<std::size_t>(j)], label);
                auto to_index = [&](std::optional<int> v) -> std::optional<int> {
                    if (!v) return std::nullopt;
                    return (*v == 1 ? champ : j) + 1;
                };
                Judgment fwd = judge(orch, pair, "fwd");
                ++tally.judgments;
                tally.malformed += fwd.malformed ? 1 : 0;
                std::optional<int> winner = to_index(fwd.verdict);
                res.verdicts.push_back(winner);
                if (both) {
                    Judgment sw = judge(orch, pair.swapped(), "swap");
                    ++tally.judgments;
                    tally.malformed += sw.malformed ? 1 : 0;
                    std::optional<int> sw_winner;
                    if (sw.verdict) sw_winner = to_index(3 - *sw.verdict);
                    res.verdicts.push_back(sw_winner);
                    ++tally.matches;
                    if (winner && sw_winner && *winner == *sw_winner) {
                        ++tally.consistent;
                    } else {
                        winner.reset();
                    }
                }
                res.malformed = res.malformed || tally.malformed > 0;
                if (!winner) {
                    decided = false;
                } else {
                    champ = *winner - 1;
                }
            }
            if (decided) res.chosen = champ + 1;
            res.correct = res.chosen == item.label;
            if (both) res.consistent = tally.consistent == tally.matches;
        });
    report.single_pass_accuracy = report.overall_accuracy;
    if (both) {
        // Single-pass numbers are defined for pairwise comparisons only.
        report.single_pass_accuracy = std::numeric_limits<double>::quiet_NaN();
    }
    return report;
}

std::map<std::string, GroupAccuracy> aggregate(const EvalReport& report, std::string_view group_key) {
    if (group_key != "domain" && group_key != "difficulty") {
        throw input_error(fmt::format("unknown group key '{}' (expected domain or difficulty)", group_key));
    }
    std::map<std::string, GroupAccuracy> out;
    for (const auto& r : report.items) {
        if (r.errored) continue;
        std::optional<std::string> key;
        if (group_key == "domain") {
            key = r.domain;
        } else if (r.difficulty) {
            key = to_string(*r.difficulty);
        }
        if (!key) continue;
        GroupAccuracy& g = out[*key];
        ++g.n;
        if (r.correct) ++g.correct;
    }
    for (auto& [_, g] : out) g.accuracy = static_cast<double>(g.correct) / static_cast<double>(g.n);
    return out;
}

json to_json(const EvalReport& report) {
    auto groups = [](const std::map<std::string, GroupAccuracy>& m) {
        json j = json::object();
        for (const auto& [k, g] : m) j[k] = {{"accuracy", g.accuracy}, {"correct", g.correct}, {"n", g.n}};
        return j;
    };
    json items = json::array();
    for (const auto& r : report.items) {
        json verdicts = json::array();
        for (const auto& v : r.verdicts) verdicts.push_back(v ? json(*v) : json(nullptr));
        json j = {{"id", r.id},
                  {"gold", r.gold},
                  {"chosen", r.chosen ? json(*r.chosen) : json(nullptr)},
                  {"verdicts", verdicts},
                  {"correct", r.correct},
                  {"malformed", r.malformed},
                  {"errored", r.errored}};
        if (r.domain) j["domain"] = *r.domain;
        if (r.difficulty) j["difficulty"] = to_string(*r.difficulty);
        if (r.consistent) j["consistent"] = *r.consistent;
        if (r.errored) j["error"] = r.error;
        items.push_back(std::move(j));
    }
    json j = {{"kind", report.kind},
              {"swap_control", to_string(report.swap_control)},
              {"overall_accuracy", report.overall_accuracy},
              {"per_domain", groups(report.per_domain)},
              {"per_difficulty", groups(report.per_difficulty)},
              {"malformed_rate", report.malformed_rate},
              {"n_items", report.n_items},
              {"n_correct", report.n_correct},
              {"n_incorrect", report.n_incorrect},
              {"n_errored", report.n_errored},
              {"n_judgments", report.n_judgments},
              {"items", items}};
    j["single_pass_accuracy"] =
        std::isnan(report.single_pass_accuracy) ? json(nullptr) : json(report.single_pass_accuracy);
    j["swap_consistency"] = report.swap_consistency ? json(*report.swap_consistency) : json(nullptr);
    return j;
}

}  // namespace brrm
