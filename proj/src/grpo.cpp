#include "brrm/grpo.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <set>

#include <fmt/format.h>

#include "brrm/errors.hpp"

namespace brrm {

namespace {

double uniform01(std::mt19937_64& rng) { return static_cast<double>(rng() >> 11) * 0x1.0p-53; }

int sample_action(const ActionProbs& p, std::mt19937_64& rng) {
    double u = uniform01(rng);
    double acc = 0.0;
    for (int a = 0; a < toy::kVocab; ++a) {
        acc += p[static_cast<std::size_t>(a)];
        if (u < acc) return a;
    }
    return toy::kVocab - 1;
}

ActionProbs softmax(const ActionProbs& z) {
    double m = *std::max_element(z.begin(), z.end());
    ActionProbs p{};
    double s = 0.0;
    for (std::size_t j = 0; j < p.size(); ++j) {
        p[j] = std::exp(z[j] - m);
        s += p[j];
    }
    for (auto& v : p) v /= s;
    return p;
}

ActionProbs log_softmax(const ActionProbs& z) {
    double m = *std::max_element(z.begin(), z.end());
    double s = 0.0;
    for (double v : z) s += std::exp(v - m);
    double lse = m + std::log(s);
    ActionProbs out{};
    for (std::size_t j = 0; j < z.size(); ++j) out[j] = z[j] - lse;
    return out;
}

}  // namespace

void GrpoConfig::validate() const {
    auto fail = [](const char* key, const std::string& why) {
        throw config_error(fmt::format("grpo.{} {}", key, why));
    };
    if (!(clip_low > 0.0 && clip_low < 1.0)) fail("clip_low", fmt::format("must lie in (0, 1), got {}", clip_low));
    if (!(clip_high > 0.0 && clip_high < 1.0)) fail("clip_high", fmt::format("must lie in (0, 1), got {}", clip_high));
    if (!(beta_kl >= 0.0)) fail("beta_kl", fmt::format("must be >= 0, got {}", beta_kl));
    if (group_size < 2) fail("group_size", fmt::format("must be >= 2, got {}", group_size));
    if (!(learning_rate >= 0.0)) fail("learning_rate", fmt::format("must be >= 0, got {}", learning_rate));
    if (steps < 0) fail("steps", fmt::format("must be >= 0, got {}", steps));
    if (!(std_epsilon > 0.0)) fail("std_epsilon", fmt::format("must be > 0, got {}", std_epsilon));
    if (prompts_per_step < 1) fail("prompts_per_step", fmt::format("must be >= 1, got {}", prompts_per_step));
    if (!(grad_clip_norm > 0.0)) fail("grad_clip_norm", fmt::format("must be > 0, got {}", grad_clip_norm));
    if (updates_per_batch < 1) fail("updates_per_batch", fmt::format("must be >= 1, got {}", updates_per_batch));
    if (feature_dim < 1) fail("feature_dim", fmt::format("must be >= 1, got {}", feature_dim));
    if (heldout_items < 1) fail("heldout_items", fmt::format("must be >= 1, got {}", heldout_items));
}

std::vector<double> group_advantages(std::span<const double> rewards, double std_epsilon) {
    if (rewards.size() < 2) throw input_error(fmt::format("advantage whitening needs K >= 2, got {}", rewards.size()));
    const double n = static_cast<double>(rewards.size());
    const double mean = std::accumulate(rewards.begin(), rewards.end(), 0.0) / n;
    std::vector<double> out(rewards.size(), 0.0);
    auto [lo, hi] = std::minmax_element(rewards.begin(), rewards.end());
    if (*lo == *hi) return out;
    double var = 0.0;
    for (double r : rewards) var += (r - mean) * (r - mean);
    const double sd = std::sqrt(var / n);
    for (std::size_t i = 0; i < rewards.size(); ++i) out[i] = (rewards[i] - mean) / (sd + std_epsilon);
    return out;
}

std::vector<double> probability_ratio(std::span<const double> logp_current, std::span<const double> logp_reference) {
    if (logp_current.size() != logp_reference.size()) {
        throw input_error(fmt::format("log-prob length mismatch: {} vs {}", logp_current.size(), logp_reference.size()));
    }
    std::vector<double> out(logp_current.size());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = std::exp(logp_current[i] - logp_reference[i]);
    return out;
}

double clipped_surrogate(double ratio, double advantage, const GrpoConfig& cfg) {
    const double clipped = std::clamp(ratio, 1.0 - cfg.clip_low, 1.0 + cfg.clip_high);
    return std::min(ratio * advantage, clipped * advantage);
}

double categorical_kl(std::span<const double> p, std::span<const double> q) {
    if (p.size() != q.size()) throw input_error("KL requires distributions over the same vocabulary");
    double kl = 0.0;
    for (std::size_t j = 0; j < p.size(); ++j) {
        if (p[j] > 0.0) kl += p[j] * (std::log(p[j]) - std::log(q[j]));
    }
    return kl;
}

namespace toy {

std::string render_branch(int action, const CriteriaSet& criteria) {
    if (is_criterion(action)) {
        const auto* c = criteria.by_id(action + 1);
        std::string name = c ? c->name : fmt::format("Dimension {}", action + 1);
        std::string lower = normalize_name(name);
        return fmt::format("SELECTED: {}\nANALYSIS_1:\nResponse 1 reviewed for {}.\nANALYSIS_2:\nResponse 2 reviewed for {}.\n",
                           name, lower, lower);
    }
    if (is_verdict(action)) return fmt::format("\\boxed{{{}}}\n", action == kVerdictFirst ? 1 : 2);
    return "...\n";
}

std::string render_rethink(int action, VerdictScale scale) {
    if (is_verdict(action)) {
        int v = action == kVerdictFirst ? 1 : 2;
        int boxed = scale == VerdictScale::binary ? v : (v == 1 ? 2 : -2);
        return fmt::format("JUDGMENT:\nResponse {} holds up better on the selected dimensions.\n\\boxed{{{}}}\n", v, boxed);
    }
    if (is_criterion(action)) return fmt::format("JUDGMENT:\nThe comparison hinges on dimension {}.\n", action + 1);
    return "...\n";
}

}  // namespace toy

ToyPolicy::ToyPolicy(int feature_dim) : feature_dim_(feature_dim) {
    if (feature_dim < 1) throw input_error("toy policy feature dimension must be >= 1");
    params_.assign(static_cast<std::size_t>(toy::kSteps * toy::kVocab * input_dim()), 0.0);
    reference_ = params_;
}

void ToyPolicy::set_reference(std::vector<double> ref) {
    if (ref.size() != params_.size()) throw input_error("reference parameter size mismatch");
    reference_ = std::move(ref);
}

std::vector<double> ToyPolicy::features(std::span<const double> x, std::optional<int> previous_action) const {
    if (static_cast<int>(x.size()) != feature_dim_) {
        throw input_error(fmt::format("expected {} context features, got {}", feature_dim_, x.size()));
    }
    std::vector<double> phi(static_cast<std::size_t>(input_dim()), 0.0);
    std::copy(x.begin(), x.end(), phi.begin());
    phi[static_cast<std::size_t>(feature_dim_)] = 1.0;
    if (previous_action) phi[static_cast<std::size_t>(feature_dim_ + 1 + *previous_action)] = 1.0;
    return phi;
}

ActionProbs ToyPolicy::logits(std::span<const double> w, int step, std::span<const double> phi) const {
    ActionProbs z{};
    const std::size_t d = static_cast<std::size_t>(input_dim());
    for (int a = 0; a < toy::kVocab; ++a) {
        const double* row = w.data() + index(step, a, 0);
        double s = 0.0;
        for (std::size_t i = 0; i < d; ++i) s += row[i] * phi[i];
        z[static_cast<std::size_t>(a)] = s;
    }
    return z;
}

ActionProbs ToyPolicy::probs(int step, std::span<const double> phi) const { return softmax(logits(params_, step, phi)); }
ActionProbs ToyPolicy::reference_probs(int step, std::span<const double> phi) const {
    return softmax(logits(reference_, step, phi));
}
ActionProbs ToyPolicy::log_probs(int step, std::span<const double> phi) const {
    return log_softmax(logits(params_, step, phi));
}
ActionProbs ToyPolicy::reference_log_probs(int step, std::span<const double> phi) const {
    return log_softmax(logits(reference_, step, phi));
}

ToyEnvironment::ToyEnvironment(int feature_dim, std::uint64_t seed) {
    if (feature_dim < 1) throw input_error("toy environment feature dimension must be >= 1");
    std::mt19937_64 rng(mix_seed(seed, "hidden"));
    std::normal_distribution<double> normal(0.0, 1.0);
    hidden_.resize(static_cast<std::size_t>(feature_dim));
    double norm = 0.0;
    for (auto& h : hidden_) {
        h = normal(rng);
        norm += h * h;
    }
    norm = std::sqrt(norm);
    for (auto& h : hidden_) h /= norm;
}

Verdict ToyEnvironment::label_of(std::span<const double> x) const {
    double s = 0.0;
    for (std::size_t i = 0; i < hidden_.size(); ++i) s += hidden_[i] * x[i];
    return s >= 0.0 ? Verdict::first : Verdict::second;
}

ToyItem ToyEnvironment::sample(std::mt19937_64& rng, std::string id) const {
    std::normal_distribution<double> normal(0.0, 1.0);
    ToyItem item;
    item.id = std::move(id);
    item.x.resize(hidden_.size());
    for (auto& v : item.x) v = normal(rng);
    item.label = label_of(item.x);
    return item;
}

std::vector<double> GroupSample::advantages() const {
    std::vector<double> out;
    out.reserve(records.size());
    for (const auto& r : records) out.push_back(r.advantage);
    return out;
}

GroupSample sample_toy_group(const ToyItem& item, const ToyPolicy& policy, const CriteriaSet& criteria,
                             const RewardConfig& reward_cfg, int k, std::mt19937_64& rng) {
    if (k < 2) throw input_error(fmt::format("group size must be >= 2, got {}", k));
    GroupSample g;
    g.item_id = item.id;
    g.label = item.label;
    const VerdictScale scale = reward_cfg.verdict_scale();
    for (int r = 0; r < k; ++r) {
        auto phi0 = policy.features(item.x, std::nullopt);
        auto lp0 = policy.log_probs(0, phi0);
        auto p0 = policy.probs(0, phi0);
        int a0 = sample_action(p0, rng);
        auto phi1 = policy.features(item.x, a0);
        auto lp1 = policy.log_probs(1, phi1);
        auto p1 = policy.probs(1, phi1);
        int a1 = sample_action(p1, rng);

        ToyRollout ro;
        ro.branch_action = a0;
        ro.rethink_action = a1;
        ro.trace = assemble_trace(parse_branch(toy::render_branch(a0, criteria), criteria),
                                  parse_rethink(toy::render_rethink(a1, scale), scale));
        ro.reward = composite_reward(ro.trace, item.label, reward_cfg);

        BufferRecord t1{item.id, r, Turn::branch, {}, ro.reward.turn1_reward, 0.0};
        t1.tokens.push_back({0, phi0, a0, lp0[static_cast<std::size_t>(a0)],
                             policy.reference_log_probs(0, phi0)[static_cast<std::size_t>(a0)]});
        BufferRecord t2{item.id, r, Turn::rethink, {}, ro.reward.turn2_reward, 0.0};
        t2.tokens.push_back({1, phi1, a1, lp1[static_cast<std::size_t>(a1)],
                             policy.reference_log_probs(1, phi1)[static_cast<std::size_t>(a1)]});
        g.records.push_back(std::move(t1));
        g.records.push_back(std::move(t2));
        g.rollouts.push_back(std::move(ro));
    }
    return g;
}

void assign_advantages(GroupSample& group, const GrpoConfig& cfg) {
    if (!cfg.whiten_turns_separately) {
        std::vector<double> rewards;
        for (const auto& r : group.records) rewards.push_back(r.reward);
        auto adv = group_advantages(rewards, cfg.std_epsilon);
        for (std::size_t i = 0; i < adv.size(); ++i) group.records[i].advantage = adv[i];
        return;
    }
    for (Turn turn : {Turn::branch, Turn::rethink}) {
        std::vector<std::size_t> idx;
        std::vector<double> rewards;
        for (std::size_t i = 0; i < group.records.size(); ++i) {
            if (group.records[i].turn == turn) {
                idx.push_back(i);
                rewards.push_back(group.records[i].reward);
            }
        }
        if (idx.empty()) continue;
        auto adv = group_advantages(rewards, cfg.std_epsilon);
        for (std::size_t i = 0; i < idx.size(); ++i) group.records[idx[i]].advantage = adv[i];
    }
}

double kl_penalty(const ToyPolicy& policy, std::span<const ToyTraceContext> contexts) {
    if (contexts.empty()) return 0.0;
    double total = 0.0;
    for (const auto& trace : contexts) {
        for (const auto& [step, phi] : trace) {
            total += categorical_kl(policy.probs(step, phi), policy.reference_probs(step, phi));
        }
    }
    return total / static_cast<double>(contexts.size());
}

LossAndGradient grpo_loss(std::span<const GroupSample> groups, const ToyPolicy& policy, const GrpoConfig& cfg) {
    if (groups.empty()) throw input_error("grpo_loss needs at least one group");
    std::size_t n_tokens = 0;
    std::set<std::pair<std::size_t, int>> traces;
    for (std::size_t g = 0; g < groups.size(); ++g) {
        if (groups[g].records.empty()) throw input_error(fmt::format("group '{}' is empty", groups[g].item_id));
        for (const auto& rec : groups[g].records) {
            n_tokens += rec.tokens.size();
            traces.insert({g, rec.rollout});
        }
    }
    if (n_tokens == 0) throw input_error("grpo_loss needs at least one token");

    LossAndGradient out;
    out.tokens = n_tokens;
    out.gradient.assign(policy.num_params(), 0.0);
    const std::size_t d = static_cast<std::size_t>(policy.input_dim());
    const double inv_tokens = 1.0 / static_cast<double>(n_tokens);
    const double inv_traces = 1.0 / static_cast<double>(traces.size());

    double surrogate_sum = 0.0;
    double kl_sum = 0.0;
    for (const auto& group : groups) {
        for (const auto& rec : group.records) {
            const double adv = rec.advantage;
            for (const auto& tok : rec.tokens) {
                auto lp = policy.log_probs(tok.step, tok.features);
                auto lq = policy.reference_log_probs(tok.step, tok.features);
                ActionProbs p{};
                for (std::size_t j = 0; j < p.size(); ++j) p[j] = std::exp(lp[j]);

                const double ratio = std::exp(lp[static_cast<std::size_t>(tok.action)] - tok.logp_old);
                surrogate_sum += clipped_surrogate(ratio, adv, cfg);
                const double clipped = std::clamp(ratio, 1.0 - cfg.clip_low, 1.0 + cfg.clip_high);
                // d/dz_j of ratio*A is A*ratio*(1[j=a] - p_j); the clipped branch is flat.
                const double coeff = ratio * adv <= clipped * adv ? -adv * ratio * inv_tokens : 0.0;

                double kl = 0.0;
                for (std::size_t j = 0; j < p.size(); ++j) kl += p[j] * (lp[j] - lq[j]);
                kl_sum += kl;

                for (int a = 0; a < toy::kVocab; ++a) {
                    const std::size_t j = static_cast<std::size_t>(a);
                    double dz = coeff * ((a == tok.action ? 1.0 : 0.0) - p[j]);
                    dz += cfg.beta_kl * inv_traces * p[j] * (lp[j] - lq[j] - kl);
                    if (dz == 0.0) continue;
                    double* row = out.gradient.data() + policy.index(tok.step, a, 0);
                    for (std::size_t i = 0; i < d; ++i) row[i] += dz * tok.features[i];
                }
            }
        }
    }
    out.surrogate = surrogate_sum * inv_tokens;
    out.kl = kl_sum * inv_traces;
    out.loss = -out.surrogate + cfg.beta_kl * out.kl;
    return out;
}

HeldoutMetrics evaluate_policy(const ToyPolicy& policy, std::span<const ToyItem> items) {
    HeldoutMetrics m;
    if (items.empty()) return m;
    double acc_sum = 0.0;
    double violation_sum = 0.0;
    for (const auto& item : items) {
        auto p0 = policy.probs(0, policy.features(item.x, std::nullopt));
        double valid = 0.0, correct = 0.0, verdict_mass = 0.0;
        const int label_token = item.label == Verdict::first ? toy::kVerdictFirst : toy::kVerdictSecond;
        for (int a0 = 0; a0 < toy::kVocab; ++a0) {
            const double w0 = p0[static_cast<std::size_t>(a0)];
            auto p1 = policy.probs(1, policy.features(item.x, a0));
            const double vm = p1[toy::kVerdictFirst] + p1[toy::kVerdictSecond];
            if (toy::is_criterion(a0)) valid += w0 * vm;
            verdict_mass += w0 * vm;
            correct += w0 * p1[static_cast<std::size_t>(label_token)];
        }
        acc_sum += verdict_mass > 0.0 ? correct / verdict_mass : 0.0;
        violation_sum += 1.0 - valid;
    }
    const double n = static_cast<double>(items.size());
    m.accuracy = acc_sum / n;
    m.format_violation_rate = violation_sum / n;
    return m;
}

std::vector<ToyItem> heldout_items(const ToyEnvironment& env, const GrpoConfig& cfg) {
    std::mt19937_64 rng(mix_seed(cfg.seed, "heldout"));
    std::vector<ToyItem> out;
    out.reserve(static_cast<std::size_t>(cfg.heldout_items));
    for (int i = 0; i < cfg.heldout_items; ++i) out.push_back(env.sample(rng, fmt::format("heldout-{}", i)));
    return out;
}

TrainHistory train_loop(const ToyEnvironment& env, ToyPolicy& policy, const CriteriaSet& criteria,
                        const RewardConfig& reward_cfg, const GrpoConfig& cfg,
                        const std::function<void(const TrainStep&)>& on_step) {
    cfg.validate();
    reward_cfg.validate();
    if (env.feature_dim() != policy.feature_dim()) throw input_error("policy and environment feature dimensions differ");

    const auto heldout = heldout_items(env, cfg);
    TrainHistory history;
    history.initial = evaluate_policy(policy, heldout);

    std::mt19937_64 item_rng(mix_seed(cfg.seed, "items"));
    for (int step = 1; step <= cfg.steps; ++step) {
        std::vector<GroupSample> groups;
        groups.reserve(static_cast<std::size_t>(cfg.prompts_per_step));
        for (int i = 0; i < cfg.prompts_per_step; ++i) {
            ToyItem item = env.sample(item_rng, fmt::format("toy-{}-{}", step, i));
            std::mt19937_64 group_rng(mix_seed(cfg.seed, item.id));
            GroupSample g = sample_toy_group(item, policy, criteria, reward_cfg, cfg.group_size, group_rng);
            assign_advantages(g, cfg);
            groups.push_back(std::move(g));
        }

        TrainStep rec;
        rec.step = step;
        double reward_sum = 0.0, correct = 0.0, malformed = 0.0;
        for (const auto& g : groups) {
            rec.rollouts += g.rollouts.size();
            rec.buffer_records += g.records.size();
            for (const auto& ro : g.rollouts) {
                reward_sum += ro.reward.composite;
                if (ro.trace.rethink.verdict == g.label) correct += 1.0;
                if (!ro.trace.well_formed) malformed += 1.0;
            }
        }
        const double n = static_cast<double>(rec.rollouts);
        rec.mean_reward = reward_sum / n;
        rec.train_accuracy = correct / n;
        rec.train_format_violation_rate = malformed / n;

        for (int u = 0; u < cfg.updates_per_batch; ++u) {
            auto lg = grpo_loss(groups, policy, cfg);
            double norm = 0.0;
            for (double g : lg.gradient) norm += g * g;
            norm = std::sqrt(norm);
            const double scale = norm > cfg.grad_clip_norm ? cfg.grad_clip_norm / norm : 1.0;
            auto params = policy.params();
            for (std::size_t i = 0; i < params.size(); ++i) params[i] -= cfg.learning_rate * scale * lg.gradient[i];
            if (u == 0) {
                rec.loss = lg.loss;
                rec.grad_norm = norm;
            }
        }

        auto m = evaluate_policy(policy, heldout);
        rec.accuracy = m.accuracy;
        rec.format_violation_rate = m.format_violation_rate;
        history.steps.push_back(rec);
        if (on_step) on_step(rec);
    }
    return history;
}

std::uint64_t mix_seed(std::uint64_t seed, std::string_view key) {
    std::uint64_t h = 0xcbf29ce484222325ULL;
    for (unsigned char c : key) {
        h ^= c;
        h *= 0x100000001b3ULL;
    }
    std::uint64_t z = seed + 0x9e3779b97f4a7c15ULL + h;
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
}

}  // namespace brrm
