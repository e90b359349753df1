#pragma once

// Preference evaluation: dataset loading, pairwise accuracy with swap control,
// Best-of-N champion tournaments and grouped accuracy tables.

#include <filesystem>
#include <istream>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "json.hpp"

#include "brrm/rollout.hpp"
#include "brrm/trace.hpp"

namespace brrm {

struct DatasetReject {
    int line = 0;
    std::string reason;
};

struct Dataset {
    std::vector<ComparisonItem> items;
    std::vector<DatasetReject> rejects;
};

// Line-delimited JSON. Fields: id, prompt, response_1, response_2, label
// (1, 2, "1", "2", "A", "B"; any 1-based index with candidates), domain,
// difficulty, score_1, score_2, candidates. When candidates are given and the
// response fields are absent, the first two candidates fill them. Blank lines
// are skipped; bad lines become rejects. Throws empty_dataset when nothing is valid.
Dataset parse_dataset(std::istream& in);
// As parse_dataset; throws io_error when the file cannot be read.
Dataset load_dataset(const std::filesystem::path& path);

enum class SwapControl { off, both_orders };

const char* to_string(SwapControl s);
std::optional<SwapControl> swap_control_from_string(std::string_view s);

struct EvalConfig {
    SwapControl swap_control = SwapControl::both_orders;
    // Abort on backend failure; when false the item is marked errored and
    // excluded from accuracy denominators.
    bool strict = true;
    int concurrency = 8;  // items judged in parallel
};

struct ItemResult {
    std::string id;
    std::optional<std::string> domain;
    std::optional<Difficulty> difficulty;
    int gold = 1;
    // Pairwise: the agreed verdict (single verdict with swap control off).
    // Best-of-N: the final champion's 1-based candidate index.
    std::optional<int> chosen;
    // Every judgment's verdict in original numbering (nullopt when malformed).
    std::vector<std::optional<int>> verdicts;
    std::optional<bool> consistent;
    bool correct = false;
    bool single_pass_correct = false;
    bool malformed = false;
    bool errored = false;
    std::string error;
};

struct GroupAccuracy {
    double accuracy = 0.0;
    std::size_t correct = 0;
    std::size_t n = 0;
};

struct EvalReport {
    std::string kind = "pairwise";  // or "best_of_n"
    SwapControl swap_control = SwapControl::both_orders;
    double overall_accuracy = 0.0;
    // First presentation order only; NaN for Best-of-N under both_orders.
    double single_pass_accuracy = 0.0;
    std::map<std::string, GroupAccuracy> per_domain;
    std::map<std::string, GroupAccuracy> per_difficulty;
    // Fraction of comparisons whose two presentation orders agree; absent when swap control is off.
    std::optional<double> swap_consistency;
    // Fraction of judgments (traces) that were malformed.
    double malformed_rate = 0.0;
    std::size_t n_items = 0;
    std::size_t n_correct = 0;
    std::size_t n_incorrect = 0;
    std::size_t n_errored = 0;
    std::size_t n_judgments = 0;
    std::vector<ItemResult> items;
};

// Items must carry label 1 or 2.
EvalReport evaluate_pairwise(std::span<const ComparisonItem> items, const Orchestrator& orch, const EvalConfig& cfg);

// Items must carry >= 2 candidates. A match replaces the champion only when
// the challenger wins; under both_orders a match is decided only when both
// orders agree, and an undecided match leaves the item incorrect.
EvalReport evaluate_bon(std::span<const ComparisonItem> items, const Orchestrator& orch, const EvalConfig& cfg);

// group_key is "domain" or "difficulty". Errored and untagged items are skipped;
// empty groups are omitted.
std::map<std::string, GroupAccuracy> aggregate(const EvalReport& report, std::string_view group_key);

nlohmann::json to_json(const EvalReport& report);

}  // namespace brrm
