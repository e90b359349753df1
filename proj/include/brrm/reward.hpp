#pragma once

#include <optional>
#include <string_view>

#include "brrm/trace.hpp"

namespace brrm {

enum class RewardVariant { binary_default, no_format_check, scaled_score };
enum class Turn1Mode { same_as_final, format_only };

const char* to_string(RewardVariant v);
const char* to_string(Turn1Mode m);
std::optional<RewardVariant> reward_variant_from_string(std::string_view s);
std::optional<Turn1Mode> turn1_mode_from_string(std::string_view s);

struct RewardConfig {
    double lambda_format = -100.0;
    double w = 10.0;
    RewardVariant variant = RewardVariant::binary_default;
    Turn1Mode turn1_mode = Turn1Mode::same_as_final;

    // Throws config_error naming the offending key.
    void validate() const;
    VerdictScale verdict_scale() const {
        return variant == RewardVariant::scaled_score ? VerdictScale::scaled : VerdictScale::binary;
    }
};

struct RewardBreakdown {
    double format = 0.0;
    double outcome = 0.0;
    bool outcome_applied = false;
    double composite = 0.0;
    double turn1_reward = 0.0;
    double turn2_reward = 0.0;
};

// 0 when well formed, lambda_format otherwise; always 0 under no_format_check.
double format_reward(const DeliberationTrace& trace, const RewardConfig& cfg);

// Binary outcome term. Empty when the trace is malformed (the term is gated off).
std::optional<double> outcome_reward(const DeliberationTrace& trace, Verdict label);

// Negative absolute distance on the [-3, 3] preference scale.
double scaled_score_reward(int predicted, int truth);

enum class Side { winner, loser };

// Binary labels mapped onto the score scale: winner +2, loser -2.
int map_binary_to_scale(Verdict label, Side which);

// Ground-truth score of the first presented response: its annotated score when
// present, else the binary mapping.
int truth_score_first(Verdict label, std::optional<int> score_1);

// label drives the binary outcome; truth_score (first response's score) drives
// the scaled variant and defaults to the binary mapping of label.
RewardBreakdown composite_reward(const DeliberationTrace& trace, Verdict label, const RewardConfig& cfg,
                                 std::optional<int> truth_score = std::nullopt);

}  // namespace brrm
