#pragma once

// Group-relative policy optimization with an asymmetric clipped surrogate and
// an exact KL penalty, plus the desk-scale softmax-linear judge policy and
// synthetic preference environment it trains on.

#include <array>
#include <cstdint>
#include <functional>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "brrm/reward.hpp"
#include "brrm/trace.hpp"

namespace brrm {

struct GrpoConfig {
    double clip_low = 0.2;
    double clip_high = 0.28;
    double beta_kl = 0.001;
    int group_size = 8;
    double learning_rate = 2.0;
    int steps = 400;
    double std_epsilon = 1e-8;
    std::uint64_t seed = 7;
    int prompts_per_step = 16;
    double grad_clip_norm = 1.0;
    bool whiten_turns_separately = false;
    int updates_per_batch = 1;
    int feature_dim = 4;
    int heldout_items = 512;

    // Throws config_error naming the offending `grpo.*` key.
    void validate() const;
};

// A_k = (r_k - mean) / (population_std + std_epsilon); all zeros for a
// constant group. Throws input_error when fewer than two rewards are given.
std::vector<double> group_advantages(std::span<const double> rewards, double std_epsilon);

// exp(logp_current - logp_reference), elementwise.
std::vector<double> probability_ratio(std::span<const double> logp_current, std::span<const double> logp_reference);

// min(ratio * A, clip(ratio, 1 - clip_low, 1 + clip_high) * A)
double clipped_surrogate(double ratio, double advantage, const GrpoConfig& cfg);

// sum_j p_j ln(p_j / q_j); terms with p_j = 0 contribute nothing.
double categorical_kl(std::span<const double> p, std::span<const double> q);

// Toy action vocabulary: 9 criterion tokens, 2 verdict tokens, 1 filler.
namespace toy {
inline constexpr int kCriterionTokens = 9;
inline constexpr int kVerdictFirst = 9;
inline constexpr int kVerdictSecond = 10;
inline constexpr int kFiller = 11;
inline constexpr int kVocab = 12;
inline constexpr int kSteps = 2;  // 0: branch token, 1: rethink token

inline bool is_criterion(int a) { return a >= 0 && a < kCriterionTokens; }
inline bool is_verdict(int a) { return a == kVerdictFirst || a == kVerdictSecond; }

// Deterministic text for a sampled token; criterion names come from `criteria`.
std::string render_branch(int action, const CriteriaSet& criteria);
std::string render_rethink(int action, VerdictScale scale = VerdictScale::binary);
}  // namespace toy

using ActionProbs = std::array<double, toy::kVocab>;

// Softmax-linear policy: logits = W[step] * phi, phi = [x, 1, onehot(previous action)].
class ToyPolicy {
  public:
    explicit ToyPolicy(int feature_dim);

    int feature_dim() const { return feature_dim_; }
    int input_dim() const { return feature_dim_ + 1 + toy::kVocab; }
    std::size_t num_params() const { return params_.size(); }

    std::span<double> params() { return params_; }
    std::span<const double> params() const { return params_; }
    std::span<const double> reference() const { return reference_; }
    // Freezes the current parameters as the reference policy.
    void freeze_reference() { reference_ = params_; }
    void set_reference(std::vector<double> ref);

    std::vector<double> features(std::span<const double> x, std::optional<int> previous_action) const;
    ActionProbs probs(int step, std::span<const double> phi) const;
    ActionProbs reference_probs(int step, std::span<const double> phi) const;
    ActionProbs log_probs(int step, std::span<const double> phi) const;
    ActionProbs reference_log_probs(int step, std::span<const double> phi) const;

    std::size_t index(int step, int action, int input) const {
        return (static_cast<std::size_t>(step) * toy::kVocab + static_cast<std::size_t>(action)) *
                   static_cast<std::size_t>(input_dim()) +
               static_cast<std::size_t>(input);
    }

  private:
    ActionProbs logits(std::span<const double> w, int step, std::span<const double> phi) const;

    int feature_dim_;
    std::vector<double> params_;
    std::vector<double> reference_;
};

struct ToyItem {
    std::string id;
    std::vector<double> x;
    Verdict label = Verdict::first;
};

// Synthetic comparisons whose winner is the sign of a hidden linear score.
class ToyEnvironment {
  public:
    ToyEnvironment(int feature_dim, std::uint64_t seed);

    int feature_dim() const { return static_cast<int>(hidden_.size()); }
    std::span<const double> hidden() const { return hidden_; }
    Verdict label_of(std::span<const double> x) const;
    ToyItem sample(std::mt19937_64& rng, std::string id) const;

  private:
    std::vector<double> hidden_;
};

struct ToyToken {
    int step = 0;
    std::vector<double> features;
    int action = 0;
    double logp_old = 0.0;  // behavior policy at sampling time
    double logp_ref = 0.0;  // frozen reference policy
};

struct BufferRecord {
    std::string item_id;
    int rollout = 0;
    Turn turn = Turn::branch;
    std::vector<ToyToken> tokens;
    double reward = 0.0;
    double advantage = 0.0;
};

struct ToyRollout {
    int branch_action = 0;
    int rethink_action = 0;
    DeliberationTrace trace;
    RewardBreakdown reward;
};

// One item's K rollouts and their 2K buffer records (turn 1 then turn 2 per rollout).
struct GroupSample {
    std::string item_id;
    Verdict label = Verdict::first;
    std::vector<ToyRollout> rollouts;
    std::vector<BufferRecord> records;

    std::vector<double> advantages() const;
};

// Samples K two-turn rollouts, parses their rendered text and assigns rewards.
GroupSample sample_toy_group(const ToyItem& item, const ToyPolicy& policy, const CriteriaSet& criteria,
                             const RewardConfig& reward_cfg, int k, std::mt19937_64& rng);

// Whitens record rewards into advantages, pooled over both turns unless
// whiten_turns_separately is set.
void assign_advantages(GroupSample& group, const GrpoConfig& cfg);

// A trace context: the per-step feature vectors of one rollout.
using ToyTraceContext = std::vector<std::pair<int, std::vector<double>>>;

// Exact KL(pi || pi_ref) summed over each trace's steps, averaged over traces.
double kl_penalty(const ToyPolicy& policy, std::span<const ToyTraceContext> contexts);

struct LossAndGradient {
    double loss = 0.0;
    double surrogate = 0.0;  // mean over tokens
    double kl = 0.0;
    std::size_t tokens = 0;
    std::vector<double> gradient;  // d loss / d params
};

// loss = -mean_tokens(clipped surrogate) + beta * KL. Ratios are taken against
// each token's logp_old. Throws input_error on empty input.
LossAndGradient grpo_loss(std::span<const GroupSample> groups, const ToyPolicy& policy, const GrpoConfig& cfg);

struct HeldoutMetrics {
    double accuracy = 0.0;               // P(verdict = label | a verdict token is emitted)
    double format_violation_rate = 0.0;  // P(rollout is malformed)
};

// Exact expectations under the policy, averaged over items.
HeldoutMetrics evaluate_policy(const ToyPolicy& policy, std::span<const ToyItem> items);

struct TrainStep {
    int step = 0;
    double loss = 0.0;
    double mean_reward = 0.0;
    double accuracy = 0.0;
    double format_violation_rate = 0.0;
    double train_accuracy = 0.0;
    double train_format_violation_rate = 0.0;
    double grad_norm = 0.0;
    std::size_t rollouts = 0;
    std::size_t buffer_records = 0;
};

struct TrainHistory {
    HeldoutMetrics initial;
    std::vector<TrainStep> steps;
};

std::vector<ToyItem> heldout_items(const ToyEnvironment& env, const GrpoConfig& cfg);

TrainHistory train_loop(const ToyEnvironment& env, ToyPolicy& policy, const CriteriaSet& criteria,
                        const RewardConfig& reward_cfg, const GrpoConfig& cfg,
                        const std::function<void(const TrainStep&)>& on_step = {});

// Stable 64-bit mixing used to derive per-group RNG streams.
std::uint64_t mix_seed(std::uint64_t seed, std::string_view key);

}  // namespace brrm
