#include "brrm/config.hpp"

#include <fstream>

#include <fmt/format.h>

#include "brrm/errors.hpp"

namespace brrm {

using nlohmann::json;

namespace {

const char* type_name(const json& j) {
    if (j.is_boolean()) return "a boolean";
    if (j.is_number_integer()) return "an integer";
    if (j.is_number()) return "a number";
    if (j.is_string()) return "a string";
    if (j.is_array()) return "an array";
    if (j.is_object()) return "an object";
    return "null";
}

bool same_kind(const json& def, const json& v) {
    if (def.is_number_integer()) return v.is_number_integer();
    if (def.is_number()) return v.is_number();
    return def.type() == v.type();
}

void merge(json& base, const json& over, const std::string& path) {
    if (!over.is_object()) {
        throw config_error(fmt::format("{} must be an object", path.empty() ? "config" : path));
    }
    for (const auto& [key, value] : over.items()) {
        const std::string p = path.empty() ? key : path + "." + key;
        if (!base.contains(key)) throw config_error(fmt::format("unknown config key '{}'", p));
        json& slot = base[key];
        if (slot.is_object()) {
            merge(slot, value, p);
        } else if (!same_kind(slot, value)) {
            throw config_error(fmt::format("config key '{}' must be {}, got {}", p, type_name(slot), type_name(value)));
        } else {
            slot = value;
        }
    }
}

template <typename E, typename F>
E enum_at(const json& j, const char* key, const std::string& path, F&& parse) {
    const auto s = j.at(key).get<std::string>();
    auto v = parse(s);
    if (!v) throw config_error(fmt::format("config key '{}.{}' has unknown value '{}'", path, key, s));
    return *v;
}

std::vector<std::string> strings_at(const json& j, const char* key, const std::string& path) {
    std::vector<std::string> out;
    for (const auto& v : j.at(key)) {
        if (!v.is_string()) throw config_error(fmt::format("config key '{}.{}' must list strings", path, key));
        out.push_back(v.get<std::string>());
    }
    return out;
}

std::vector<EvaluationCriterion> criteria_at(const json& arr) {
    std::vector<EvaluationCriterion> out;
    for (std::size_t i = 0; i < arr.size(); ++i) {
        const json& c = arr[i];
        const std::string p = fmt::format("trace.criteria[{}]", i);
        if (!c.is_object()) throw config_error(fmt::format("{} must be an object", p));
        for (const auto& [key, _] : c.items()) {
            if (key != "id" && key != "name" && key != "description") {
                throw config_error(fmt::format("unknown config key '{}.{}'", p, key));
            }
        }
        if (!c.contains("id") || !c["id"].is_number_integer()) {
            throw config_error(fmt::format("{}.id must be an integer", p));
        }
        if (!c.contains("name") || !c["name"].is_string()) throw config_error(fmt::format("{}.name must be a string", p));
        EvaluationCriterion e{c["id"].get<int>(), c["name"].get<std::string>(), ""};
        if (c.contains("description")) {
            if (!c["description"].is_string()) throw config_error(fmt::format("{}.description must be a string", p));
            e.description = c["description"].get<std::string>();
        }
        out.push_back(std::move(e));
    }
    return out;
}

}  // namespace

json to_json(const EngineConfig& cfg) {
    json criteria = json::array();
    for (const auto& c : cfg.criteria) criteria.push_back({{"id", c.id}, {"name", c.name}, {"description", c.description}});
    const auto& g = cfg.grpo;
    const auto& b = cfg.backend;
    const auto& r = cfg.rollout;
    return {
        {"seed", cfg.seed},
        {"log_level", cfg.log_level},
        {"trace", {{"criteria", criteria}}},
        {"reward",
         {{"lambda_format", cfg.reward.lambda_format},
          {"w", cfg.reward.w},
          {"variant", to_string(cfg.reward.variant)},
          {"turn1_mode", to_string(cfg.reward.turn1_mode)}}},
        {"grpo",
         {{"clip_low", g.clip_low},
          {"clip_high", g.clip_high},
          {"beta_kl", g.beta_kl},
          {"group_size", g.group_size},
          {"learning_rate", g.learning_rate},
          {"steps", g.steps},
          {"std_epsilon", g.std_epsilon},
          {"prompts_per_step", g.prompts_per_step},
          {"grad_clip_norm", g.grad_clip_norm},
          {"whiten_turns_separately", g.whiten_turns_separately},
          {"updates_per_batch", g.updates_per_batch},
          {"feature_dim", g.feature_dim},
          {"heldout_items", g.heldout_items}}},
        {"backend",
         {{"kind", to_string(b.kind)},
          {"endpoint", b.endpoint},
          {"path", b.path},
          {"model", b.model},
          {"timeout_seconds", b.timeout_seconds},
          {"max_retries", b.max_retries},
          {"max_concurrency", b.max_concurrency},
          {"backoff_ms", b.backoff_ms},
          {"api_key_env", b.api_key_env},
          {"toy_format_logit", b.toy_format_logit},
          {"toy_feature_dim", b.toy_feature_dim}}},
        {"rollout",
         {{"mode", to_string(r.mode)},
          {"temperature", r.temperature},
          {"top_p", r.top_p},
          {"top_k", r.top_k},
          {"max_new_tokens", r.max_new_tokens},
          {"max_total_tokens", r.max_total_tokens},
          {"branch_stop", r.branch_stop},
          {"rethink_stop", r.rethink_stop},
          {"group_size", r.group_size}}},
        {"eval",
         {{"swap_control", to_string(cfg.eval.swap_control)},
          {"strict", cfg.eval.strict},
          {"concurrency", cfg.eval.concurrency}}},
        {"analyzer",
         {{"attributor", to_string(cfg.analyzer.attributor)},
          {"lexicon_path", cfg.analyzer.lexicon_path},
          {"top_k", cfg.analyzer.top_k}}},
    };
}

EngineConfig config_from_json(const json& overrides) {
    json j = to_json(EngineConfig{});
    if (!overrides.is_null()) merge(j, overrides, "");

    EngineConfig cfg;
    if (j["seed"].get<long long>() < 0) throw config_error("config key 'seed' must be non-negative");
    cfg.seed = j["seed"].get<std::uint64_t>();
    cfg.log_level = j["log_level"].get<std::string>();
    cfg.criteria = criteria_at(j["trace"]["criteria"]);

    const json& rw = j["reward"];
    cfg.reward.lambda_format = rw["lambda_format"].get<double>();
    cfg.reward.w = rw["w"].get<double>();
    cfg.reward.variant = enum_at<RewardVariant>(rw, "variant", "reward", reward_variant_from_string);
    cfg.reward.turn1_mode = enum_at<Turn1Mode>(rw, "turn1_mode", "reward", turn1_mode_from_string);

    const json& g = j["grpo"];
    cfg.grpo.clip_low = g["clip_low"].get<double>();
    cfg.grpo.clip_high = g["clip_high"].get<double>();
    cfg.grpo.beta_kl = g["beta_kl"].get<double>();
    cfg.grpo.group_size = g["group_size"].get<int>();
    cfg.grpo.learning_rate = g["learning_rate"].get<double>();
    cfg.grpo.steps = g["steps"].get<int>();
    cfg.grpo.std_epsilon = g["std_epsilon"].get<double>();
    cfg.grpo.prompts_per_step = g["prompts_per_step"].get<int>();
    cfg.grpo.grad_clip_norm = g["grad_clip_norm"].get<double>();
    cfg.grpo.whiten_turns_separately = g["whiten_turns_separately"].get<bool>();
    cfg.grpo.updates_per_batch = g["updates_per_batch"].get<int>();
    cfg.grpo.feature_dim = g["feature_dim"].get<int>();
    cfg.grpo.heldout_items = g["heldout_items"].get<int>();
    cfg.grpo.seed = cfg.seed;

    const json& b = j["backend"];
    cfg.backend.kind = enum_at<BackendKind>(b, "kind", "backend", backend_kind_from_string);
    cfg.backend.endpoint = b["endpoint"].get<std::string>();
    cfg.backend.path = b["path"].get<std::string>();
    cfg.backend.model = b["model"].get<std::string>();
    cfg.backend.timeout_seconds = b["timeout_seconds"].get<double>();
    cfg.backend.max_retries = b["max_retries"].get<int>();
    cfg.backend.max_concurrency = b["max_concurrency"].get<int>();
    cfg.backend.backoff_ms = b["backoff_ms"].get<int>();
    cfg.backend.api_key_env = b["api_key_env"].get<std::string>();
    cfg.backend.toy_format_logit = b["toy_format_logit"].get<double>();
    cfg.backend.toy_feature_dim = b["toy_feature_dim"].get<int>();

    const json& r = j["rollout"];
    cfg.rollout.mode = enum_at<PipelineMode>(r, "mode", "rollout", pipeline_mode_from_string);
    cfg.rollout.temperature = r["temperature"].get<double>();
    cfg.rollout.top_p = r["top_p"].get<double>();
    cfg.rollout.top_k = r["top_k"].get<int>();
    cfg.rollout.max_new_tokens = r["max_new_tokens"].get<int>();
    cfg.rollout.max_total_tokens = r["max_total_tokens"].get<int>();
    cfg.rollout.branch_stop = strings_at(r, "branch_stop", "rollout");
    cfg.rollout.rethink_stop = strings_at(r, "rethink_stop", "rollout");
    cfg.rollout.group_size = r["group_size"].get<int>();
    cfg.rollout.seed = cfg.seed;

    const json& e = j["eval"];
    cfg.eval.swap_control = enum_at<SwapControl>(e, "swap_control", "eval", swap_control_from_string);
    cfg.eval.strict = e["strict"].get<bool>();
    cfg.eval.concurrency = e["concurrency"].get<int>();

    const json& a = j["analyzer"];
    cfg.analyzer.attributor = enum_at<AttributorKind>(a, "attributor", "analyzer", attributor_kind_from_string);
    cfg.analyzer.lexicon_path = a["lexicon_path"].get<std::string>();
    cfg.analyzer.top_k = a["top_k"].get<int>();

    cfg.validate();
    return cfg;
}

void EngineConfig::validate() const {
    static constexpr std::string_view kLevels[] = {"trace", "debug", "info", "warn", "error", "critical", "off"};
    if (std::find(std::begin(kLevels), std::end(kLevels), log_level) == std::end(kLevels)) {
        throw config_error(fmt::format("config key 'log_level' has unknown value '{}'", log_level));
    }
    try {
        CriteriaSet check(criteria);
    } catch (const Error& e) {
        throw config_error(fmt::format("trace.criteria: {}", e.what()));
    }
    reward.validate();
    grpo.validate();
    backend.validate();
    rollout.validate();
    if (eval.concurrency < 1) throw config_error("eval.concurrency must be >= 1");
    if (analyzer.top_k < 1) throw config_error("analyzer.top_k must be >= 1");
}

OrchestratorConfig EngineConfig::orchestrator_config() const {
    OrchestratorConfig o;
    o.rollout = rollout;
    o.reward = reward;
    o.criteria = criteria_set();
    o.max_concurrency = backend.max_concurrency;
    o.retry = {backend.max_retries, std::chrono::milliseconds(backend.backoff_ms)};
    return o;
}

json read_config_file(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw io_error(fmt::format("cannot read config '{}'", path.string()));
    json j = json::parse(in, nullptr, false);
    if (j.is_discarded()) throw config_error(fmt::format("config '{}' is not valid JSON", path.string()));
    if (!j.is_object()) throw config_error(fmt::format("config '{}' must hold a JSON object", path.string()));
    return j;
}

void apply_override(json& overrides, std::string_view assignment) {
    const auto eq = assignment.find('=');
    if (eq == std::string_view::npos || eq == 0) {
        throw config_error(fmt::format("override '{}' must look like key=value", assignment));
    }
    const std::string key(assignment.substr(0, eq));
    const std::string raw(assignment.substr(eq + 1));
    json value = json::parse(raw, nullptr, false);
    if (value.is_discarded()) value = raw;
    if (!overrides.is_object()) overrides = json::object();
    json* node = &overrides;
    std::size_t start = 0;
    while (true) {
        const auto dot = key.find('.', start);
        const std::string part = key.substr(start, dot == std::string::npos ? std::string::npos : dot - start);
        if (part.empty()) throw config_error(fmt::format("override key '{}' has an empty segment", key));
        if (dot == std::string::npos) {
            (*node)[part] = value;
            return;
        }
        json& next = (*node)[part];
        if (!next.is_object()) next = json::object();
        node = &next;
        start = dot + 1;
    }
}

}  // namespace brrm
