// Python bindings. Structured values cross the boundary as JSON text; the
// brrm package decodes them.

#include <pybind11/pybind11.h>
#include <pybind11/stl.h>

#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "json.hpp"

#include "brrm/config.hpp"
#include "brrm/diffusion.hpp"
#include "brrm/errors.hpp"
#include "brrm/eval.hpp"
#include "brrm/grpo.hpp"
#include "brrm/reward.hpp"
#include "brrm/rollout.hpp"
#include "brrm/trace.hpp"
#include "brrm/version.hpp"

namespace py = pybind11;
using json = nlohmann::json;
using namespace brrm;

namespace {

EngineConfig config_of(const std::string& overrides) {
    json j = overrides.empty() ? json::object() : json::parse(overrides, nullptr, false);
    if (j.is_discarded() || !j.is_object()) throw config_error("config must be a JSON object");
    return config_from_json(j);
}

json violations_json(const std::vector<FormatViolation>& vs) {
    json out = json::array();
    for (const auto& v : vs) out.push_back({{"code", to_string(v.code)}, {"detail", v.detail}});
    return out;
}

json trace_json(const DeliberationTrace& t, const CriteriaSet& c) {
    json names = json::array();
    for (int id : t.branch.selected) {
        if (const auto* e = c.by_id(id)) names.push_back(e->name);
    }
    return {{"well_formed", t.well_formed},
            {"selected", names},
            {"analysis_1", t.branch.analysis_1},
            {"analysis_2", t.branch.analysis_2},
            {"judgment", t.rethink.judgment},
            {"verdict", t.rethink.verdict ? json(to_int(*t.rethink.verdict)) : json(nullptr)},
            {"score", t.rethink.score ? json(*t.rethink.score) : json(nullptr)},
            {"violations", violations_json(t.violations)}};
}

std::string parse(const std::string& text, const std::string& config) {
    const EngineConfig cfg = config_of(config);
    const CriteriaSet c = cfg.criteria_set();
    return trace_json(parse_trace(text, c, cfg.reward.verdict_scale()), c).dump();
}

std::string reward(const std::string& text, int label, std::optional<int> truth_score, const std::string& config) {
    const EngineConfig cfg = config_of(config);
    const auto verdict = verdict_from_int(label);
    if (!verdict) throw input_error("label must be 1 or 2");
    const DeliberationTrace t = parse_trace(text, cfg.criteria_set(), cfg.reward.verdict_scale());
    const RewardBreakdown b = composite_reward(t, *verdict, cfg.reward, truth_score);
    return json{{"format", b.format},
                {"outcome", b.outcome},
                {"outcome_applied", b.outcome_applied},
                {"composite", b.composite},
                {"turn1_reward", b.turn1_reward},
                {"turn2_reward", b.turn2_reward},
                {"well_formed", t.well_formed}}
        .dump();
}

double surrogate(double ratio, double advantage, const std::string& config) {
    return clipped_surrogate(ratio, advantage, config_of(config).grpo);
}

std::string train_toy(const std::string& config) {
    const EngineConfig cfg = config_of(config);
    TrainHistory h;
    {
        py::gil_scoped_release release;
        ToyEnvironment env(cfg.grpo.feature_dim, cfg.seed);
        ToyPolicy policy(cfg.grpo.feature_dim);
        h = train_loop(env, policy, cfg.criteria_set(), cfg.reward, cfg.grpo);
    }
    json steps = json::array();
    for (const auto& s : h.steps) {
        steps.push_back({{"step", s.step},
                         {"loss", s.loss},
                         {"mean_reward", s.mean_reward},
                         {"accuracy", s.accuracy},
                         {"format_violation_rate", s.format_violation_rate},
                         {"grad_norm", s.grad_norm},
                         {"rollouts", s.rollouts},
                         {"buffer_records", s.buffer_records}});
    }
    return json{{"initial", {{"accuracy", h.initial.accuracy}, {"format_violation_rate", h.initial.format_violation_rate}}},
                {"steps", steps}}
        .dump();
}

std::string evaluate(const std::string& dataset_path, bool bon, const std::string& config) {
    const EngineConfig cfg = config_of(config);
    py::gil_scoped_release release;
    const Dataset ds = load_dataset(dataset_path);
    const Orchestrator orch(make_backend(cfg.backend, cfg.criteria_set(), cfg.seed), cfg.orchestrator_config());
    const EvalReport r = bon ? evaluate_bon(ds.items, orch, cfg.eval) : evaluate_pairwise(ds.items, orch, cfg.eval);
    return to_json(r).dump();
}

std::string analyze(const std::vector<std::pair<std::string, std::string>>& traces, const std::string& config) {
    const EngineConfig cfg = config_of(config);
    if (cfg.analyzer.attributor != AttributorKind::lexicon) throw config_error("analyzer.attributor: only lexicon is bound");
    const CriteriaSet c = cfg.criteria_set();
    std::vector<AnalyzedTrace> in;
    for (const auto& [t1, t2] : traces) in.push_back({t1, t2, {}, {}});
    const Lexicon lex = cfg.analyzer.lexicon_path.empty() ? Lexicon::defaults() : Lexicon::load(cfg.analyzer.lexicon_path);
    return profile_summary(allocation_profile(in, c, Attributor(lex)), c, cfg.analyzer.top_k).dump();
}

}  // namespace

PYBIND11_MODULE(_core, m) {
    m.doc() = "Native core of the brrm package";
    m.attr("__version__") = kVersion;

    // Leaked on purpose: the types must outlive module teardown.
    static PyObject* base = py::exception<Error>(m, "BrrmError").inc_ref().ptr();
    auto sub = [&](const char* name) { return py::exception<Error>(m, name, base).inc_ref().ptr(); };
    static PyObject* input = sub("InputError");
    static PyObject* config = sub("ConfigError");
    static PyObject* io = sub("IoError");
    static PyObject* backend = sub("BackendError");
    static PyObject* empty = sub("EmptyDatasetError");
    py::register_exception_translator([](std::exception_ptr p) {
        try {
            if (p) std::rethrow_exception(p);
        } catch (const Error& e) {
            PyObject* type = base;
            switch (e.kind()) {
                case ErrorKind::input: type = input; break;
                case ErrorKind::config: type = config; break;
                case ErrorKind::io: type = io; break;
                case ErrorKind::backend: type = backend; break;
                case ErrorKind::empty_dataset: type = empty; break;
            }
            PyErr_SetString(type, e.what());
        } catch (const json::exception& e) {
            PyErr_SetString(config, e.what());
        }
    });

    m.def("default_config", [] { return to_json(EngineConfig{}).dump(); });
    m.def("parse_trace", &parse, py::arg("text"), py::arg("config") = "");
    m.def("composite_reward", &reward, py::arg("text"), py::arg("label"), py::arg("truth_score") = py::none(),
          py::arg("config") = "");
    m.def("group_advantages", [](const std::vector<double>& r, double eps) { return group_advantages(r, eps); },
          py::arg("rewards"), py::arg("std_epsilon") = 1e-8);
    m.def("clipped_surrogate", &surrogate, py::arg("ratio"), py::arg("advantage"), py::arg("config") = "");
    m.def("train_toy", &train_toy, py::arg("config") = "");
    m.def("evaluate", &evaluate, py::arg("dataset"), py::arg("bon") = false, py::arg("config") = "");
    m.def("analyze", &analyze, py::arg("traces"), py::arg("config") = "");
}
