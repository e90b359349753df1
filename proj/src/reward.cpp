#include "brrm/reward.hpp"

#include <cmath>
#include <cstdlib>

#include <fmt/format.h>

#include "brrm/errors.hpp"

namespace brrm {

const char* to_string(RewardVariant v) {
    switch (v) {
        case RewardVariant::binary_default: return "binary_default";
        case RewardVariant::no_format_check: return "no_format_check";
        case RewardVariant::scaled_score: return "scaled_score";
    }
    return "binary_default";
}

const char* to_string(Turn1Mode m) {
    return m == Turn1Mode::format_only ? "format_only" : "same_as_final";
}

std::optional<RewardVariant> reward_variant_from_string(std::string_view s) {
    if (s == "binary_default") return RewardVariant::binary_default;
    if (s == "no_format_check") return RewardVariant::no_format_check;
    if (s == "scaled_score") return RewardVariant::scaled_score;
    return std::nullopt;
}

std::optional<Turn1Mode> turn1_mode_from_string(std::string_view s) {
    if (s == "same_as_final") return Turn1Mode::same_as_final;
    if (s == "format_only") return Turn1Mode::format_only;
    return std::nullopt;
}

void RewardConfig::validate() const {
    if (!(lambda_format < 0.0) || !std::isfinite(lambda_format)) {
        throw config_error(fmt::format("reward.lambda_format must be negative, got {}", lambda_format));
    }
    if (!(w > 0.0) || !std::isfinite(w)) throw config_error(fmt::format("reward.w must be positive, got {}", w));
}

double format_reward(const DeliberationTrace& trace, const RewardConfig& cfg) {
    if (cfg.variant == RewardVariant::no_format_check) return 0.0;
    return trace.well_formed ? 0.0 : cfg.lambda_format;
}

std::optional<double> outcome_reward(const DeliberationTrace& trace, Verdict label) {
    if (!trace.well_formed) return std::nullopt;
    return trace.rethink.verdict == label ? 0.0 : -1.0;
}

double scaled_score_reward(int predicted, int truth) {
    if (predicted < -3 || predicted > 3 || truth < -3 || truth > 3) {
        throw input_error(fmt::format("scores must lie in [-3, 3], got predicted={} truth={}", predicted, truth));
    }
    return -static_cast<double>(std::abs(predicted - truth));
}

int map_binary_to_scale(Verdict /*label*/, Side which) { return which == Side::winner ? 2 : -2; }

int truth_score_first(Verdict label, std::optional<int> score_1) {
    if (score_1) return *score_1;
    return map_binary_to_scale(label, label == Verdict::first ? Side::winner : Side::loser);
}

RewardBreakdown composite_reward(const DeliberationTrace& trace, Verdict label, const RewardConfig& cfg,
                                 std::optional<int> truth_score) {
    RewardBreakdown r;
    r.format = format_reward(trace, cfg);
    switch (cfg.variant) {
        case RewardVariant::binary_default:
            if (auto o = outcome_reward(trace, label)) {
                r.outcome = *o;
                r.outcome_applied = true;
            }
            break;
        case RewardVariant::no_format_check:
            // Without the format gate any extractable verdict is scored.
            r.outcome = trace.rethink.verdict == label ? 0.0 : -1.0;
            r.outcome_applied = true;
            break;
        case RewardVariant::scaled_score:
            if (trace.well_formed && trace.rethink.score) {
                r.outcome = scaled_score_reward(*trace.rethink.score, truth_score.value_or(truth_score_first(label, {})));
                r.outcome_applied = true;
            }
            break;
    }
    r.composite = r.format + (r.outcome_applied ? cfg.w * r.outcome : 0.0);
    r.turn2_reward = r.composite;
    if (cfg.turn1_mode == Turn1Mode::same_as_final) {
        r.turn1_reward = r.composite;
    } else {
        bool branch_ok = trace.branch_violations.empty();
        r.turn1_reward = (cfg.variant == RewardVariant::no_format_check || branch_ok) ? 0.0 : cfg.lambda_format;
    }
    return r;
}

}  // namespace brrm
