#pragma once

// Independent reference for the GRPO objective on the toy policy, written from
// the objective's definition rather than from the engine's code.

#include <cmath>
#include <map>
#include <random>
#include <vector>

#include "brrm/grpo.hpp"

namespace brrm::test {

// Softmax of W[step] * phi with W stored row-major as [step][action][input].
inline std::vector<double> oracle_probs(const std::vector<double>& w, int input_dim, int step,
                                        const std::vector<double>& phi) {
    std::vector<double> z(toy::kVocab, 0.0);
    for (int a = 0; a < toy::kVocab; ++a) {
        for (int i = 0; i < input_dim; ++i) {
            z[a] += w[(static_cast<std::size_t>(step) * toy::kVocab + a) * input_dim + i] * phi[i];
        }
    }
    double m = z[0];
    for (double v : z) m = std::max(m, v);
    double s = 0.0;
    for (auto& v : z) s += (v = std::exp(v - m));
    for (auto& v : z) v /= s;
    return z;
}

// -mean_tokens(min(rho A, clip(rho) A)) + beta * mean_traces(sum_steps KL(pi || ref)).
inline double oracle_loss(const std::vector<GroupSample>& groups, const std::vector<double>& w,
                          const std::vector<double>& ref, int input_dim, const GrpoConfig& cfg) {
    double surrogate = 0.0;
    std::size_t tokens = 0;
    std::map<std::pair<std::size_t, int>, double> trace_kl;
    for (std::size_t g = 0; g < groups.size(); ++g) {
        for (const auto& rec : groups[g].records) {
            for (const auto& tok : rec.tokens) {
                auto p = oracle_probs(w, input_dim, tok.step, tok.features);
                auto q = oracle_probs(ref, input_dim, tok.step, tok.features);
                const double rho = p[tok.action] / std::exp(tok.logp_old);
                double clipped = rho;
                if (clipped < 1.0 - cfg.clip_low) clipped = 1.0 - cfg.clip_low;
                if (clipped > 1.0 + cfg.clip_high) clipped = 1.0 + cfg.clip_high;
                surrogate += std::min(rho * rec.advantage, clipped * rec.advantage);
                ++tokens;
                double kl = 0.0;
                for (int j = 0; j < toy::kVocab; ++j) kl += p[j] * std::log(p[j] / q[j]);
                trace_kl[{g, rec.rollout}] += kl;
            }
        }
    }
    double kl_mean = 0.0;
    for (const auto& [key, v] : trace_kl) kl_mean += v;
    kl_mean /= static_cast<double>(trace_kl.size());
    return -surrogate / static_cast<double>(tokens) + cfg.beta_kl * kl_mean;
}

struct GrpoInstance {
    ToyPolicy policy{3};
    GrpoConfig cfg;
    std::vector<GroupSample> groups;
};

// Random small instance: random current, behaviour and reference parameters,
// sampled groups with whitened advantages. Ratios are kept away from the clip
// boundaries, where the objective is not differentiable.
inline GrpoInstance random_grpo_instance(std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    std::normal_distribution<double> n01(0.0, 1.0);
    std::uniform_int_distribution<int> dim(1, 4);
    for (;;) {
        GrpoInstance inst;
        const int d = dim(rng);
        inst.policy = ToyPolicy(d);
        inst.cfg.beta_kl = std::uniform_real_distribution<double>(0.0, 0.5)(rng);
        inst.cfg.group_size = 2 + static_cast<int>(rng() % 3);
        std::vector<double> ref(inst.policy.num_params());
        for (auto& v : ref) v = 0.5 * n01(rng);
        auto params = inst.policy.params();
        for (auto& v : params) v = 0.5 * n01(rng);
        inst.policy.set_reference(ref);

        ToyEnvironment env(d, rng());
        const auto criteria = CriteriaSet::defaults();
        const int n_groups = 1 + static_cast<int>(rng() % 3);
        for (int g = 0; g < n_groups; ++g) {
            ToyItem item = env.sample(rng, "g" + std::to_string(g));
            auto gs = sample_toy_group(item, inst.policy, criteria, RewardConfig{}, inst.cfg.group_size, rng);
            assign_advantages(gs, inst.cfg);
            // Give some records nonzero advantages even when the group is constant.
            for (auto& r : gs.records) {
                if (r.advantage == 0.0) r.advantage = n01(rng);
            }
            inst.groups.push_back(std::move(gs));
        }
        // Move the current policy away from the behaviour policy that sampled the tokens.
        for (auto& v : params) v += 0.15 * n01(rng);

        bool near_kink = false;
        for (const auto& g : inst.groups) {
            for (const auto& r : g.records) {
                for (const auto& t : r.tokens) {
                    const double rho = std::exp(inst.policy.log_probs(t.step, t.features)[t.action] - t.logp_old);
                    if (std::abs(rho - (1.0 - inst.cfg.clip_low)) < 1e-3 ||
                        std::abs(rho - (1.0 + inst.cfg.clip_high)) < 1e-3) {
                        near_kink = true;
                    }
                }
            }
        }
        if (!near_kink) return inst;
    }
}

struct GradientCheck {
    double relative_error = 0.0;
    double loss_gap = 0.0;  // |engine loss - oracle loss|
};

// Central differences of the oracle loss against the engine's analytic gradient.
inline GradientCheck check_gradient(const GrpoInstance& inst, double h = 1e-5) {
    const auto analytic = grpo_loss(inst.groups, inst.policy, inst.cfg);
    std::vector<double> w(inst.policy.params().begin(), inst.policy.params().end());
    const std::vector<double> ref(inst.policy.reference().begin(), inst.policy.reference().end());
    const int d = inst.policy.input_dim();
    GradientCheck out;
    out.loss_gap = std::abs(analytic.loss - oracle_loss(inst.groups, w, ref, d, inst.cfg));
    double diff2 = 0.0, a2 = 0.0, f2 = 0.0;
    for (std::size_t i = 0; i < w.size(); ++i) {
        const double keep = w[i];
        w[i] = keep + h;
        const double up = oracle_loss(inst.groups, w, ref, d, inst.cfg);
        w[i] = keep - h;
        const double down = oracle_loss(inst.groups, w, ref, d, inst.cfg);
        w[i] = keep;
        const double fd = (up - down) / (2.0 * h);
        diff2 += (fd - analytic.gradient[i]) * (fd - analytic.gradient[i]);
        a2 += analytic.gradient[i] * analytic.gradient[i];
        f2 += fd * fd;
    }
    const double scale = std::max({std::sqrt(a2), std::sqrt(f2), 1e-12});
    out.relative_error = std::sqrt(diff2) / scale;
    return out;
}

}  // namespace brrm::test
