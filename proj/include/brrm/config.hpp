#pragma once

// Engine configuration: one JSON document with trace, reward, grpo, backend,
// rollout, eval and analyzer sections plus a top-level seed and log level.
// Unknown keys are rejected with their dotted path.

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "json.hpp"

#include "brrm/backend.hpp"
#include "brrm/diffusion.hpp"
#include "brrm/eval.hpp"
#include "brrm/grpo.hpp"
#include "brrm/reward.hpp"
#include "brrm/rollout.hpp"
#include "brrm/trace.hpp"

namespace brrm {

struct AnalyzerConfig {
    AttributorKind attributor = AttributorKind::lexicon;
    std::string lexicon_path;  // empty: built-in lexicon
    int top_k = 2;
};

struct EngineConfig {
    std::vector<EvaluationCriterion> criteria = CriteriaSet::defaults().all();
    RewardConfig reward;
    GrpoConfig grpo;
    BackendDescriptor backend;
    RolloutConfig rollout;
    EvalConfig eval;
    AnalyzerConfig analyzer;
    // Feeds grpo.seed and rollout.seed.
    std::uint64_t seed = 7;
    std::string log_level = "info";

    CriteriaSet criteria_set() const { return CriteriaSet(criteria); }
    // Throws config_error naming the offending key.
    void validate() const;
    OrchestratorConfig orchestrator_config() const;
};

nlohmann::json to_json(const EngineConfig& cfg);

// Defaults overlaid with `overrides`. Throws config_error on unknown keys or
// type mismatches, naming the dotted path.
EngineConfig config_from_json(const nlohmann::json& overrides);

// Reads a JSON config file; io_error when unreadable, config_error when invalid.
nlohmann::json read_config_file(const std::filesystem::path& path);

// Applies "a.b.c=value" to a JSON override document. The value is parsed as
// JSON when possible and taken as a plain string otherwise.
void apply_override(nlohmann::json& overrides, std::string_view assignment);

}  // namespace brrm
