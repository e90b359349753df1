#pragma once

// Two-turn rollouts against a generation backend: prompt rendering per
// pipeline mode, stop strings, parsing, rewards and per-turn records.

#include <algorithm>
#include <atomic>
#include <cstdint>
#include <exception>
#include <memory>
#include <optional>
#include <semaphore>
#include <string>
#include <string_view>
#include <thread>
#include <vector>

#include "brrm/backend.hpp"
#include "brrm/grpo.hpp"
#include "brrm/reward.hpp"
#include "brrm/trace.hpp"

namespace brrm {

enum class PipelineMode { two_turn_full, branching_only, unconditioned_rethink, single_turn };

const char* to_string(PipelineMode m);
std::optional<PipelineMode> pipeline_mode_from_string(std::string_view s);

struct RolloutConfig {
    PipelineMode mode = PipelineMode::two_turn_full;
    double temperature = 1.0;
    double top_p = 0.95;
    int top_k = 20;
    int max_new_tokens = 8192;
    int max_total_tokens = 16384;
    std::vector<std::string> branch_stop{"\nJUDGMENT:"};
    std::vector<std::string> rethink_stop{"\nSELECTED:"};
    int group_size = 8;
    std::uint64_t seed = 7;

    void validate() const;
};

struct RolloutRecord {
    std::string item_id;
    int rollout_index = 0;
    Turn turn = Turn::branch;
    std::string context;
    std::string generated;
    double reward = 0.0;
    int token_count = 0;
    bool approximate_count = true;
    bool truncated = false;
};

struct RolloutResult {
    std::string item_id;
    int rollout_index = 0;
    PipelineMode mode = PipelineMode::two_turn_full;
    DeliberationTrace trace;
    RewardBreakdown reward;
    std::vector<RolloutRecord> records;
    int requests = 0;
    int retries = 0;
};

struct RolloutGroup {
    std::string item_id;
    std::vector<RolloutResult> rollouts;

    std::size_t record_count() const;
    // Rewards of every record in canonical (rollout, turn) order.
    std::vector<double> record_rewards() const;
};

// Whitened advantages for a group's records, pooled over turns unless
// cfg.whiten_turns_separately is set. Same order as record_rewards().
std::vector<double> record_advantages(const RolloutGroup& group, const GrpoConfig& cfg);

// Runs fn(0..n-1) on up to `workers` threads. Exceptions are rethrown after
// all workers finish, lowest index first.
template <typename Fn>
void parallel_for(std::size_t n, int workers, Fn&& fn) {
    if (n == 0) return;
    std::size_t threads = std::min<std::size_t>(n, static_cast<std::size_t>(std::max(1, workers)));
    std::vector<std::exception_ptr> errors(n);
    if (threads == 1) {
        for (std::size_t i = 0; i < n; ++i) {
            try {
                fn(i);
            } catch (...) {
                errors[i] = std::current_exception();
            }
        }
    } else {
        std::atomic<std::size_t> next{0};
        std::vector<std::jthread> pool;
        pool.reserve(threads);
        for (std::size_t t = 0; t < threads; ++t) {
            pool.emplace_back([&] {
                for (std::size_t i = next++; i < n; i = next++) {
                    try {
                        fn(i);
                    } catch (...) {
                        errors[i] = std::current_exception();
                    }
                }
            });
        }
    }
    for (auto& e : errors) {
        if (e) std::rethrow_exception(e);
    }
}

struct OrchestratorConfig {
    RolloutConfig rollout;
    RewardConfig reward;
    CriteriaSet criteria = CriteriaSet::defaults();
    HierarchyTable hierarchies = HierarchyTable::defaults();
    int max_concurrency = 8;
    RetryPolicy retry;
};

class Orchestrator {
  public:
    Orchestrator(std::shared_ptr<Backend> backend, OrchestratorConfig cfg);

    const OrchestratorConfig& config() const { return cfg_; }

    // generate() under the global in-flight cap.
    GenerationResult generate(const GenerationRequest& request) const;

    // One rollout of `item` in the configured mode. `salt` separates request
    // seeds of otherwise identical calls (e.g. the two presentation orders).
    RolloutResult rollout_two_turn(const ComparisonItem& item, int rollout_index, std::string_view salt = {}) const;

    // K rollouts in parallel; any failure fails the group. K < 2 is an input error.
    RolloutGroup rollout_group(const ComparisonItem& item, int k) const;

    std::uint64_t request_seed(std::string_view item_id, std::string_view salt, int rollout_index, Turn turn) const;

  private:
    GenerationRequest make_request(std::string prompt, const std::vector<std::string>& stops, std::uint64_t seed) const;

    std::shared_ptr<Backend> backend_;
    OrchestratorConfig cfg_;
    std::unique_ptr<std::counting_semaphore<>> in_flight_;
};

}  // namespace brrm
