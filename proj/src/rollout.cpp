#include "brrm/rollout.hpp"

#include <fmt/format.h>

#include "brrm/errors.hpp"

namespace brrm {

const char* to_string(PipelineMode m) {
    switch (m) {
        case PipelineMode::two_turn_full: return "two_turn_full";
        case PipelineMode::branching_only: return "branching_only";
        case PipelineMode::unconditioned_rethink: return "unconditioned_rethink";
        case PipelineMode::single_turn: return "single_turn";
    }
    return "two_turn_full";
}

std::optional<PipelineMode> pipeline_mode_from_string(std::string_view s) {
    for (auto m : {PipelineMode::two_turn_full, PipelineMode::branching_only, PipelineMode::unconditioned_rethink,
                   PipelineMode::single_turn}) {
        if (s == to_string(m)) return m;
    }
    return std::nullopt;
}

void RolloutConfig::validate() const {
    if (!(temperature >= 0.0)) throw config_error("rollout.temperature must be >= 0");
    if (!(top_p > 0.0 && top_p <= 1.0)) throw config_error("rollout.top_p must lie in (0, 1]");
    if (top_k < 0) throw config_error("rollout.top_k must be >= 0");
    if (max_new_tokens < 1) throw config_error("rollout.max_new_tokens must be >= 1");
    if (max_new_tokens > max_total_tokens) {
        throw config_error("rollout.max_new_tokens must not exceed rollout.max_total_tokens");
    }
    if (group_size < 2) throw config_error("rollout.group_size must be >= 2");
}

std::size_t RolloutGroup::record_count() const {
    std::size_t n = 0;
    for (const auto& r : rollouts) n += r.records.size();
    return n;
}

std::vector<double> RolloutGroup::record_rewards() const {
    std::vector<double> out;
    for (const auto& r : rollouts) {
        for (const auto& rec : r.records) out.push_back(rec.reward);
    }
    return out;
}

std::vector<double> record_advantages(const RolloutGroup& group, const GrpoConfig& cfg) {
    std::vector<double> rewards;
    std::vector<Turn> turns;
    for (const auto& r : group.rollouts) {
        for (const auto& rec : r.records) {
            rewards.push_back(rec.reward);
            turns.push_back(rec.turn);
        }
    }
    if (!cfg.whiten_turns_separately) return group_advantages(rewards, cfg.std_epsilon);

    std::vector<double> out(rewards.size(), 0.0);
    for (Turn turn : {Turn::branch, Turn::rethink}) {
        std::vector<std::size_t> idx;
        std::vector<double> sub;
        for (std::size_t i = 0; i < rewards.size(); ++i) {
            if (turns[i] == turn) {
                idx.push_back(i);
                sub.push_back(rewards[i]);
            }
        }
        if (idx.empty()) continue;
        auto adv = group_advantages(sub, cfg.std_epsilon);
        for (std::size_t i = 0; i < idx.size(); ++i) out[idx[i]] = adv[i];
    }
    return out;
}

Orchestrator::Orchestrator(std::shared_ptr<Backend> backend, OrchestratorConfig cfg)
    : backend_(std::move(backend)), cfg_(std::move(cfg)) {
    if (!backend_) throw input_error("orchestrator needs a backend");
    cfg_.rollout.validate();
    cfg_.reward.validate();
    if (cfg_.max_concurrency < 1) throw config_error("backend.max_concurrency must be >= 1");
    in_flight_ = std::make_unique<std::counting_semaphore<>>(cfg_.max_concurrency);
}

GenerationResult Orchestrator::generate(const GenerationRequest& request) const {
    struct Slot {
        std::counting_semaphore<>& s;
        explicit Slot(std::counting_semaphore<>& sem) : s(sem) { s.acquire(); }
        ~Slot() { s.release(); }
    } slot(*in_flight_);
    return brrm::generate(*backend_, request, cfg_.retry);
}

std::uint64_t Orchestrator::request_seed(std::string_view item_id, std::string_view salt, int rollout_index,
                                         Turn turn) const {
    return mix_seed(cfg_.rollout.seed, fmt::format("{}#{}#{}#{}", item_id, salt, rollout_index, to_string(turn)));
}

GenerationRequest Orchestrator::make_request(std::string prompt, const std::vector<std::string>& stops,
                                             std::uint64_t seed) const {
    GenerationRequest r;
    r.prompt = std::move(prompt);
    r.stop_strings = stops;
    r.temperature = cfg_.rollout.temperature;
    r.top_p = cfg_.rollout.top_p;
    r.top_k = cfg_.rollout.top_k;
    r.max_new_tokens = cfg_.rollout.max_new_tokens;
    r.max_total_tokens = cfg_.rollout.max_total_tokens;
    r.seed = seed;
    return r;
}

RolloutResult Orchestrator::rollout_two_turn(const ComparisonItem& item, int rollout_index,
                                             std::string_view salt) const {
    item.validate();
    if (item.label != 1 && item.label != 2) {
        throw input_error(fmt::format("item '{}': pairwise rollout needs label 1 or 2, got {}", item.id, item.label));
    }
    const Verdict label = *verdict_from_int(item.label);
    const VerdictScale scale = cfg_.reward.verdict_scale();
    const CriteriaSet& criteria = cfg_.criteria;
    const TaskHierarchy& hierarchy = cfg_.hierarchies.for_domain(item.domain);
    const int truth = truth_score_first(label, item.score_1);

    RolloutResult out;
    out.item_id = item.id;
    out.rollout_index = rollout_index;
    out.mode = cfg_.rollout.mode;

    auto run = [&](Turn turn, std::string prompt, const std::vector<std::string>& stops) {
        auto req = make_request(std::move(prompt), stops, request_seed(item.id, salt, rollout_index, turn));
        GenerationResult g = generate(req);
        ++out.requests;
        out.retries += g.retry_count;
        RolloutRecord rec;
        rec.item_id = item.id;
        rec.rollout_index = rollout_index;
        rec.turn = turn;
        rec.context = std::move(req.prompt);
        rec.generated = g.text;
        rec.token_count = g.token_count;
        rec.approximate_count = g.approximate_count;
        rec.truncated = g.truncated;
        out.records.push_back(std::move(rec));
        return g.text;
    };

    switch (cfg_.rollout.mode) {
        case PipelineMode::two_turn_full:
        case PipelineMode::unconditioned_rethink: {
            std::string t1 = run(Turn::branch, render_branch_prompt(item, criteria), cfg_.rollout.branch_stop);
            BranchParse bp = parse_branch(t1, criteria);
            std::string p2;
            if (cfg_.rollout.mode == PipelineMode::unconditioned_rethink) {
                p2 = render_unconditioned_rethink_prompt(item, criteria, hierarchy);
            } else if (bp.ok()) {
                p2 = render_rethink_prompt(item, bp.trace, criteria, hierarchy);
            } else {
                p2 = render_rethink_prompt_from_raw(item, t1, hierarchy);
            }
            std::string t2 = run(Turn::rethink, std::move(p2), cfg_.rollout.rethink_stop);
            out.trace = assemble_trace(bp, parse_rethink(t2, scale));
            out.reward = composite_reward(out.trace, label, cfg_.reward, truth);
            out.records[0].reward = out.reward.turn1_reward;
            out.records[1].reward = out.reward.turn2_reward;
            break;
        }
        case PipelineMode::branching_only: {
            std::string t = run(Turn::branch, render_branch_verdict_prompt(item, criteria), cfg_.rollout.branch_stop);
            out.trace = assemble_trace(parse_branch(t, criteria), parse_branch_verdict(t, scale));
            out.reward = composite_reward(out.trace, label, cfg_.reward, truth);
            out.records[0].reward = out.reward.composite;
            break;
        }
        case PipelineMode::single_turn: {
            std::string t = run(Turn::branch, render_single_turn_prompt(item, criteria, hierarchy),
                                cfg_.rollout.rethink_stop);
            auto [t1, t2] = split_trace(t);
            out.trace = assemble_trace(parse_branch(t1, criteria), parse_rethink(t2, scale));
            out.reward = composite_reward(out.trace, label, cfg_.reward, truth);
            out.records[0].reward = out.reward.composite;
            break;
        }
    }
    return out;
}

RolloutGroup Orchestrator::rollout_group(const ComparisonItem& item, int k) const {
    if (k < 2) throw input_error(fmt::format("group size must be >= 2, got {}", k));
    RolloutGroup g;
    g.item_id = item.id;
    g.rollouts.resize(static_cast<std::size_t>(k));
    parallel_for(g.rollouts.size(), cfg_.max_concurrency,
                 [&](std::size_t i) { g.rollouts[i] = rollout_two_turn(item, static_cast<int>(i)); });
    return g;
}

}  // namespace brrm
