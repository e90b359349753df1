#include "brrm/trace.hpp"

#include <algorithm>
#include <cctype>
#include <charconv>
#include <set>

#include <fmt/format.h>

#include "brrm/errors.hpp"

namespace brrm {

namespace {

constexpr std::string_view kSelected = "SELECTED:";
constexpr std::string_view kAnalysis1 = "ANALYSIS_1:";
constexpr std::string_view kAnalysis2 = "ANALYSIS_2:";
constexpr std::string_view kJudgment = "JUDGMENT:";
constexpr std::string_view kBoxed = "\\boxed{";

bool is_hspace(char c) { return c == ' ' || c == '\t' || c == '\r'; }
bool is_space(char c) { return std::isspace(static_cast<unsigned char>(c)) != 0; }

std::string_view trim(std::string_view s) {
    std::size_t b = 0;
    while (b < s.size() && is_space(s[b])) ++b;
    std::size_t e = s.size();
    while (e > b && is_space(s[e - 1])) --e;
    return s.substr(b, e - b);
}

std::string_view ltrim_h(std::string_view s) {
    std::size_t b = 0;
    while (b < s.size() && is_hspace(s[b])) ++b;
    return s.substr(b);
}

enum class AnchorKind { selected, analysis_1, analysis_2, judgment };

struct Anchor {
    AnchorKind kind;
    std::size_t line_start;
    std::size_t content_start;  // first byte after the colon
    std::size_t line_end;       // index of '\n' or text size
};

// Byte ranges of lines that are fence delimiters or fenced content.
struct Scan {
    std::vector<Anchor> anchors;
    std::vector<std::pair<std::size_t, std::size_t>> opaque;

    bool is_opaque(std::size_t pos) const {
        for (const auto& [b, e] : opaque) {
            if (pos >= b && pos < e) return true;
        }
        return false;
    }
};

std::size_t leading_backticks(std::string_view s) {
    std::size_t n = 0;
    while (n < s.size() && s[n] == '`') ++n;
    return n;
}

Scan scan(std::string_view text) {
    Scan out;
    std::size_t fence_len = 0;  // 0 = not inside a fence
    std::size_t fence_begin = 0;
    std::size_t pos = 0;
    while (pos <= text.size()) {
        std::size_t nl = text.find('\n', pos);
        std::size_t end = nl == std::string_view::npos ? text.size() : nl;
        std::string_view line = text.substr(pos, end - pos);
        std::string_view body = ltrim_h(line);
        std::size_t ticks = leading_backticks(body);
        if (fence_len > 0) {
            if (ticks >= fence_len && trim(body).size() == ticks) {
                out.opaque.emplace_back(fence_begin, end);
                fence_len = 0;
            }
        } else if (ticks >= 3) {
            fence_len = ticks;
            fence_begin = pos;
        } else {
            std::size_t offset = static_cast<std::size_t>(body.data() - text.data());
            auto try_anchor = [&](std::string_view tag, AnchorKind kind) {
                if (body.substr(0, tag.size()) == tag) {
                    out.anchors.push_back({kind, pos, offset + tag.size(), end});
                    return true;
                }
                return false;
            };
            try_anchor(kSelected, AnchorKind::selected) || try_anchor(kAnalysis1, AnchorKind::analysis_1) ||
                try_anchor(kAnalysis2, AnchorKind::analysis_2) || try_anchor(kJudgment, AnchorKind::judgment);
        }
        if (nl == std::string_view::npos) break;
        pos = nl + 1;
    }
    if (fence_len > 0) out.opaque.emplace_back(fence_begin, text.size());
    return out;
}

const Anchor* find_anchor(const Scan& s, AnchorKind kind, std::size_t from = 0) {
    for (const auto& a : s.anchors) {
        if (a.kind == kind && a.line_start >= from) return &a;
    }
    return nullptr;
}

const Anchor* next_anchor_after(const Scan& s, std::size_t pos) {
    for (const auto& a : s.anchors) {
        if (a.line_start > pos) return &a;
    }
    return nullptr;
}

struct BoxedMarker {
    std::size_t begin;
    std::string_view content;
    bool closed;
};

std::vector<BoxedMarker> boxed_markers(std::string_view text, std::size_t from, const Scan& s) {
    std::vector<BoxedMarker> out;
    std::size_t pos = from;
    while ((pos = text.find(kBoxed, pos)) != std::string_view::npos) {
        std::size_t content_begin = pos + kBoxed.size();
        if (s.is_opaque(pos)) {
            pos = content_begin;
            continue;
        }
        int depth = 1;
        std::size_t i = content_begin;
        for (; i < text.size(); ++i) {
            if (text[i] == '{') ++depth;
            if (text[i] == '}' && --depth == 0) break;
        }
        bool closed = i < text.size();
        out.push_back({pos, text.substr(content_begin, i - content_begin), closed});
        pos = closed ? i + 1 : text.size();
    }
    return out;
}

std::optional<int> parse_small_int(std::string_view s) {
    s = trim(s);
    if (!s.empty() && s.front() == '+') s.remove_prefix(1);
    if (s.empty() || s.size() > 3) return std::nullopt;
    int v = 0;
    auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
    if (ec != std::errc() || ptr != s.data() + s.size()) return std::nullopt;
    return v;
}

// Fills verdict/score from the boxed markers at or after `from`. Returns the
// position of the last marker, or npos.
std::size_t extract_verdict(std::string_view text, std::size_t from, const Scan& s, VerdictScale scale,
                            RethinkTrace& out, std::vector<FormatViolation>& violations) {
    auto markers = boxed_markers(text, from, s);
    if (markers.empty()) {
        violations.push_back({ViolationCode::missing_verdict, "no \\boxed{} marker in the answer region"});
        return std::string_view::npos;
    }
    if (markers.size() > 1) {
        violations.push_back(
            {ViolationCode::multiple_verdicts, fmt::format("{} \\boxed{{}} markers in the answer region", markers.size())});
    }
    const BoxedMarker& last = markers.back();
    std::optional<int> value = last.closed ? parse_small_int(last.content) : std::nullopt;
    bool valid = false;
    if (value) {
        if (scale == VerdictScale::binary) {
            if (auto v = verdict_from_int(*value)) {
                out.verdict = v;
                valid = true;
            }
        } else if (*value >= -3 && *value <= 3) {
            out.score = *value;
            if (*value > 0) out.verdict = Verdict::first;
            if (*value < 0) out.verdict = Verdict::second;
            valid = true;
        }
    }
    if (!valid && markers.size() == 1) {
        violations.push_back({ViolationCode::invalid_verdict_value,
                              fmt::format("boxed content '{}' is not {}", std::string(last.content),
                                          scale == VerdictScale::binary ? "1 or 2" : "an integer in [-3, 3]")});
    }
    return last.begin;
}

std::string join_names(const CriteriaSet& criteria, const std::vector<int>& ids) {
    std::string out;
    for (std::size_t i = 0; i < ids.size(); ++i) {
        if (i) out += ", ";
        const auto* c = criteria.by_id(ids[i]);
        out += c ? c->name : fmt::format("#{}", ids[i]);
    }
    return out;
}

void append_item(std::string& out, const ComparisonItem& item) {
    out += "[User Prompt]\n";
    out += fence(item.prompt);
    out += "\n\n[Response 1]\n";
    out += fence(item.response_1);
    out += "\n\n[Response 2]\n";
    out += fence(item.response_2);
    out += "\n\n";
}

void append_menu(std::string& out, const CriteriaSet& criteria) {
    for (const auto& c : criteria.all()) {
        out += fmt::format("{}. {}: {}\n", c.id, c.name, c.description);
    }
}

void append_hierarchy(std::string& out, const TaskHierarchy& hierarchy) {
    out += "[Evaluation Hierarchy]\n";
    out += hierarchy.ordering_string();
    out += "\nResolve conflicting findings by this order of importance: a difference on an earlier level "
           "outweighs any number of differences on later levels.\n\n";
}

constexpr std::string_view kBranchRole =
    "[Role]\nYou are a rigorous quality evaluator. Compare the two responses to the user prompt below.\n\n";

constexpr std::string_view kBranchFormat =
    "SELECTED: <dimension name>[, <dimension name>[, <dimension name>]]\n"
    "ANALYSIS_1:\n<issues found in Response 1 along the selected dimensions>\n"
    "ANALYSIS_2:\n<issues found in Response 2 along the selected dimensions>\n";

constexpr std::string_view kRethinkFormat =
    "JUDGMENT:\n<comparative judgment applying the hierarchy>\n"
    "\\boxed{1 or 2}\n";

void append_focus_instructions(std::string& out, const CriteriaSet& criteria) {
    out += "[Quality Assessment Focus]\n";
    out += "Select one to three critical cognitive dimensions from this list, choosing the ones that decide "
           "this particular comparison:\n";
    append_menu(out, criteria);
    out += "\nThen write a structured issue analysis for each response, restricted to the selected "
           "dimensions. Name concrete errors, omissions and risks; do not decide a winner yet.\n\n";
}

}  // namespace

const char* to_string(Turn t) { return t == Turn::branch ? "branch" : "rethink"; }

std::optional<Verdict> verdict_from_int(int v) {
    if (v == 1) return Verdict::first;
    if (v == 2) return Verdict::second;
    return std::nullopt;
}

std::string normalize_name(std::string_view name) {
    std::string out;
    bool pending_space = false;
    for (char c : trim(name)) {
        if (is_space(c)) {
            pending_space = true;
            continue;
        }
        if (pending_space) out.push_back(' ');
        pending_space = false;
        out.push_back(static_cast<char>(std::tolower(static_cast<unsigned char>(c))));
    }
    return out;
}

CriteriaSet::CriteriaSet(std::vector<EvaluationCriterion> criteria) : criteria_(std::move(criteria)) {
    if (criteria_.empty()) throw input_error("criteria set is empty");
    std::set<std::string> seen;
    for (std::size_t i = 0; i < criteria_.size(); ++i) {
        const auto& c = criteria_[i];
        if (c.id != static_cast<int>(i) + 1) {
            throw input_error(fmt::format("criterion ids must be 1..n in order; position {} has id {}", i + 1, c.id));
        }
        auto norm = normalize_name(c.name);
        if (norm.empty()) throw input_error(fmt::format("criterion {} has an empty name", c.id));
        if (c.name.find(',') != std::string::npos) {
            throw input_error(fmt::format("criterion name '{}' contains a comma", c.name));
        }
        if (!seen.insert(norm).second) throw input_error(fmt::format("duplicate criterion name '{}'", c.name));
    }
}

CriteriaSet CriteriaSet::defaults() {
    return CriteriaSet({
        {1, "Information Accuracy", "Whether stated facts, claims and references are correct and verifiable."},
        {2, "Logical Reasoning", "Whether the argument or derivation is coherent, valid and free of contradictions."},
        {3, "Implementation Capability", "Whether code or procedures are correct, complete and would actually work."},
        {4, "Computational Precision", "Whether calculations, numbers and quantitative steps are exact."},
        {5, "Instruction Adherence", "Whether every explicit requirement and constraint of the prompt is followed."},
        {6, "Writing Clarity", "Whether the response is well organized, readable and unambiguous."},
        {7, "Content Relevance", "Whether the content stays on topic and covers what the user needs."},
        {8, "Safety & Harmlessness", "Whether the response avoids harmful, unethical or dangerous content."},
        {9, "Intent Alignment", "Whether the response serves the user's underlying goal and expectations."},
    });
}

const EvaluationCriterion* CriteriaSet::by_id(int id) const {
    if (id < 1 || id > static_cast<int>(criteria_.size())) return nullptr;
    return &criteria_[static_cast<std::size_t>(id - 1)];
}

const EvaluationCriterion* CriteriaSet::by_name(std::string_view name) const {
    auto norm = normalize_name(name);
    for (const auto& c : criteria_) {
        if (normalize_name(c.name) == norm) return &c;
    }
    return nullptr;
}

const char* to_string(TaskFamily family) {
    switch (family) {
        case TaskFamily::accuracy_critical: return "accuracy_critical";
        case TaskFamily::creative: return "creative";
        case TaskFamily::general: return "general";
    }
    return "general";
}

std::optional<TaskFamily> task_family_from_string(std::string_view s) {
    if (s == "accuracy_critical") return TaskFamily::accuracy_critical;
    if (s == "creative") return TaskFamily::creative;
    if (s == "general") return TaskFamily::general;
    return std::nullopt;
}

void TaskHierarchy::validate() const {
    if (ordering.empty()) throw input_error(fmt::format("hierarchy '{}' has no levels", to_string(family)));
    std::set<std::string> seen;
    for (const auto& label : ordering) {
        if (trim(label).empty()) throw input_error("hierarchy level label is empty");
        if (!seen.insert(normalize_name(label)).second) {
            throw input_error(fmt::format("hierarchy '{}' repeats level '{}'", to_string(family), label));
        }
    }
}

std::string TaskHierarchy::ordering_string() const {
    std::string out;
    for (std::size_t i = 0; i < ordering.size(); ++i) {
        if (i) out += " > ";
        out += ordering[i];
    }
    return out;
}

HierarchyTable HierarchyTable::defaults() {
    HierarchyTable t;
    t.hierarchies[TaskFamily::accuracy_critical] = {TaskFamily::accuracy_critical, {"Correctness", "Process", "Presentation"}};
    t.hierarchies[TaskFamily::creative] = {TaskFamily::creative, {"Intent Alignment", "Quality", "Novelty"}};
    t.hierarchies[TaskFamily::general] = {TaskFamily::general, {"Correctness", "Process", "Presentation"}};
    for (const char* d : {"math", "code", "coding", "reasoning", "stem", "science"}) {
        t.domain_families[d] = TaskFamily::accuracy_critical;
    }
    for (const char* d : {"creative", "writing", "creative_writing", "story", "poetry", "roleplay"}) {
        t.domain_families[d] = TaskFamily::creative;
    }
    return t;
}

const TaskHierarchy& HierarchyTable::for_domain(const std::optional<std::string>& domain) const {
    TaskFamily family = TaskFamily::general;
    if (domain) {
        auto it = domain_families.find(normalize_name(*domain));
        if (it != domain_families.end()) family = it->second;
    }
    auto it = hierarchies.find(family);
    if (it == hierarchies.end()) throw input_error(fmt::format("no hierarchy for family '{}'", to_string(family)));
    return it->second;
}

const char* to_string(Difficulty d) {
    switch (d) {
        case Difficulty::easy: return "easy";
        case Difficulty::normal: return "normal";
        case Difficulty::hard: return "hard";
    }
    return "normal";
}

std::optional<Difficulty> difficulty_from_string(std::string_view s) {
    auto n = normalize_name(s);
    if (n == "easy") return Difficulty::easy;
    if (n == "normal") return Difficulty::normal;
    if (n == "hard") return Difficulty::hard;
    return std::nullopt;
}

void ComparisonItem::validate() const {
    if (candidates.empty()) {
        if (label != 1 && label != 2) throw input_error(fmt::format("item '{}': label must be 1 or 2", id));
    } else {
        if (candidates.size() < 2) throw input_error(fmt::format("item '{}': need at least 2 candidates", id));
        if (label < 1 || label > static_cast<int>(candidates.size())) {
            throw input_error(fmt::format("item '{}': label {} outside 1..{}", id, label, candidates.size()));
        }
        for (const auto& c : candidates) {
            if (trim(c).empty()) throw input_error(fmt::format("item '{}': empty candidate", id));
        }
    }
    if (trim(response_1).empty() || trim(response_2).empty()) {
        throw input_error(fmt::format("item '{}': responses must be non-empty", id));
    }
    for (auto s : {score_1, score_2}) {
        if (s && (*s < -3 || *s > 3)) throw input_error(fmt::format("item '{}': score {} outside [-3, 3]", id, *s));
    }
}

ComparisonItem ComparisonItem::swapped() const {
    ComparisonItem out = *this;
    std::swap(out.response_1, out.response_2);
    std::swap(out.score_1, out.score_2);
    if (candidates.empty()) out.label = label == 1 ? 2 : 1;
    return out;
}

const char* to_string(ViolationCode code) {
    switch (code) {
        case ViolationCode::missing_section: return "missing_section";
        case ViolationCode::criteria_count_out_of_range: return "criteria_count_out_of_range";
        case ViolationCode::unknown_criterion: return "unknown_criterion";
        case ViolationCode::missing_verdict: return "missing_verdict";
        case ViolationCode::multiple_verdicts: return "multiple_verdicts";
        case ViolationCode::invalid_verdict_value: return "invalid_verdict_value";
        case ViolationCode::empty_analysis: return "empty_analysis";
    }
    return "missing_section";
}

std::optional<ViolationCode> violation_code_from_string(std::string_view s) {
    for (auto c : {ViolationCode::missing_section, ViolationCode::criteria_count_out_of_range,
                   ViolationCode::unknown_criterion, ViolationCode::missing_verdict, ViolationCode::multiple_verdicts,
                   ViolationCode::invalid_verdict_value, ViolationCode::empty_analysis}) {
        if (s == to_string(c)) return c;
    }
    return std::nullopt;
}

std::string fence(std::string_view text) {
    std::size_t longest = 0, run = 0;
    for (char c : text) {
        run = c == '`' ? run + 1 : 0;
        longest = std::max(longest, run);
    }
    std::string ticks(std::max<std::size_t>(3, longest + 1), '`');
    std::string out = ticks + "\n";
    out += text;
    if (text.empty() || text.back() != '\n') out += "\n";
    out += ticks;
    return out;
}

std::string render_branch_prompt(const ComparisonItem& item, const CriteriaSet& criteria) {
    std::string out(kBranchRole);
    append_item(out, item);
    append_focus_instructions(out, criteria);
    out += "[Output Format]\nAnswer with exactly these sections, each marker at the start of its own line:\n";
    out += fence(kBranchFormat);
    out += "\n";
    return out;
}

std::string render_branch_verdict_prompt(const ComparisonItem& item, const CriteriaSet& criteria) {
    std::string out(kBranchRole);
    append_item(out, item);
    append_focus_instructions(out, criteria);
    out += "[Output Format]\nAnswer with exactly these sections, each marker at the start of its own line, "
           "and end with the number of the better response in a box:\n";
    out += fence(std::string(kBranchFormat) + "\\boxed{1 or 2}\n");
    out += "\n";
    return out;
}

std::string render_rethink_prompt(const ComparisonItem& item, const BranchTrace& branch, const CriteriaSet& criteria,
                                  const TaskHierarchy& hierarchy) {
    if (branch.selected.empty() || branch.selected.size() > 3) {
        throw input_error("rethink prompt requires a first turn selecting one to three dimensions");
    }
    for (int id : branch.selected) {
        if (!criteria.by_id(id)) throw input_error(fmt::format("first turn selects unknown criterion id {}", id));
    }
    if (trim(branch.analysis_1).empty() || trim(branch.analysis_2).empty()) {
        throw input_error("rethink prompt requires non-empty first-turn analyses");
    }
    hierarchy.validate();
    std::string out =
        "[Role]\nYou are a rigorous quality evaluator revisiting your first-pass findings to reach a final decision.\n\n";
    append_item(out, item);
    out += "[First-Turn Findings]\n";
    out += "Focus dimensions: " + join_names(criteria, branch.selected) + "\n";
    out += "Analysis of Response 1:\n" + fence(branch.analysis_1) + "\n";
    out += "Analysis of Response 2:\n" + fence(branch.analysis_2) + "\n\n";
    append_hierarchy(out, hierarchy);
    out += "[Instructions]\nRe-examine both responses through the lens of the focus dimensions above. Verify each "
           "reported issue, look deeper for problems the first pass missed on those dimensions, and weigh the "
           "confirmed issues using the hierarchy.\n\n";
    out += "[Output Format]\nWrite the judgment section and finish with the better response's number in a box:\n";
    out += fence(kRethinkFormat);
    out += "\n";
    return out;
}

std::string render_rethink_prompt_from_raw(const ComparisonItem& item, std::string_view raw_turn1,
                                           const TaskHierarchy& hierarchy) {
    hierarchy.validate();
    std::string out =
        "[Role]\nYou are a rigorous quality evaluator revisiting your first-pass findings to reach a final decision.\n\n";
    append_item(out, item);
    out += "[First-Turn Output]\n" + fence(raw_turn1) + "\n\n";
    append_hierarchy(out, hierarchy);
    out += "[Instructions]\nRe-examine both responses through the lens of the dimensions your first pass focused on, "
           "and weigh the confirmed issues using the hierarchy.\n\n";
    out += "[Output Format]\nWrite the judgment section and finish with the better response's number in a box:\n";
    out += fence(kRethinkFormat);
    out += "\n";
    return out;
}

std::string render_unconditioned_rethink_prompt(const ComparisonItem& item, const CriteriaSet& criteria,
                                                const TaskHierarchy& hierarchy) {
    hierarchy.validate();
    std::string out = "[Role]\nYou are a rigorous quality evaluator.\n\n";
    append_item(out, item);
    out += "[Dimensions]\n";
    append_menu(out, criteria);
    out += "\n";
    append_hierarchy(out, hierarchy);
    out += "[Instructions]\nRe-evaluate the responses, covering all of the dimensions above.\n\n";
    out += "[Output Format]\nWrite the judgment section and finish with the better response's number in a box:\n";
    out += fence(kRethinkFormat);
    out += "\n";
    return out;
}

std::string render_single_turn_prompt(const ComparisonItem& item, const CriteriaSet& criteria,
                                      const TaskHierarchy& hierarchy) {
    hierarchy.validate();
    std::string out(kBranchRole);
    append_item(out, item);
    append_focus_instructions(out, criteria);
    append_hierarchy(out, hierarchy);
    out += "[Instructions]\nAfter the analyses, re-evaluate both responses through the lens of the selected "
           "dimensions, weigh the confirmed issues using the hierarchy, and decide which response is better.\n\n";
    out += "[Output Format]\nAnswer with exactly these sections, each marker at the start of its own line, and "
           "finish with the better response's number in a box:\n";
    out += fence(std::string(kBranchFormat) + std::string(kRethinkFormat));
    out += "\n";
    return out;
}

BranchParse parse_branch(std::string_view raw, const CriteriaSet& criteria) {
    BranchParse out;
    out.trace.raw = std::string(raw);
    Scan s = scan(raw);

    const Anchor* sel = find_anchor(s, AnchorKind::selected);
    const Anchor* a1 = find_anchor(s, AnchorKind::analysis_1, sel ? sel->line_start : 0);
    const Anchor* a2 = a1 ? find_anchor(s, AnchorKind::analysis_2, a1->line_start + 1) : nullptr;

    if (!sel) {
        out.violations.push_back({ViolationCode::missing_section, "SELECTED"});
    } else {
        std::string_view list = raw.substr(sel->content_start, sel->line_end - sel->content_start);
        std::vector<std::string> unknown;
        std::size_t start = 0;
        while (start <= list.size()) {
            std::size_t comma = list.find(',', start);
            std::size_t end = comma == std::string_view::npos ? list.size() : comma;
            std::string_view name = trim(list.substr(start, end - start));
            if (!name.empty()) {
                if (const auto* c = criteria.by_name(name)) {
                    if (std::find(out.trace.selected.begin(), out.trace.selected.end(), c->id) ==
                        out.trace.selected.end()) {
                        out.trace.selected.push_back(c->id);
                    }
                } else if (std::find(unknown.begin(), unknown.end(), normalize_name(name)) == unknown.end()) {
                    unknown.push_back(normalize_name(name));
                    out.violations.push_back({ViolationCode::unknown_criterion, std::string(name)});
                }
            }
            if (comma == std::string_view::npos) break;
            start = comma + 1;
        }
        std::size_t count = out.trace.selected.size() + unknown.size();
        if (count < 1 || count > 3) {
            out.violations.push_back(
                {ViolationCode::criteria_count_out_of_range, fmt::format("{} dimensions selected, expected 1 to 3", count)});
        }
    }

    if (!a1) {
        out.violations.push_back({ViolationCode::missing_section, "ANALYSIS_1"});
    }
    if (!a2) {
        out.violations.push_back({ViolationCode::missing_section, "ANALYSIS_2"});
    }
    if (a1 && a2) {
        out.trace.analysis_1 = std::string(trim(raw.substr(a1->content_start, a2->line_start - a1->content_start)));
        const Anchor* next = next_anchor_after(s, a2->line_start);
        std::size_t end = next ? next->line_start : raw.size();
        out.trace.analysis_2 = std::string(trim(raw.substr(a2->content_start, end - a2->content_start)));
        if (out.trace.analysis_1.empty()) out.violations.push_back({ViolationCode::empty_analysis, "ANALYSIS_1"});
        if (out.trace.analysis_2.empty()) out.violations.push_back({ViolationCode::empty_analysis, "ANALYSIS_2"});
    }
    return out;
}

RethinkParse parse_rethink(std::string_view raw, VerdictScale scale) {
    RethinkParse out;
    out.trace.raw = std::string(raw);
    Scan s = scan(raw);
    const Anchor* j = find_anchor(s, AnchorKind::judgment);
    if (!j) out.violations.push_back({ViolationCode::missing_section, "JUDGMENT"});
    std::size_t region = j ? j->content_start : 0;
    std::size_t last = extract_verdict(raw, region, s, scale, out.trace, out.violations);
    if (j) {
        std::size_t end = last == std::string_view::npos ? raw.size() : last;
        out.trace.judgment = std::string(trim(raw.substr(region, end - region)));
        if (out.trace.judgment.empty()) out.violations.push_back({ViolationCode::empty_analysis, "JUDGMENT"});
    }
    return out;
}

RethinkParse parse_branch_verdict(std::string_view raw, VerdictScale scale) {
    RethinkParse out;
    Scan s = scan(raw);
    std::size_t region = 0;
    for (const auto& a : s.anchors) {
        if (a.kind == AnchorKind::analysis_2) region = a.content_start;
    }
    extract_verdict(raw, region, s, scale, out.trace, out.violations);
    return out;
}

DeliberationTrace assemble_trace(const BranchParse& branch, const RethinkParse& rethink) {
    DeliberationTrace t;
    t.branch = branch.trace;
    t.rethink = rethink.trace;
    t.branch_violations = branch.violations;
    t.rethink_violations = rethink.violations;
    t.violations = branch.violations;
    t.violations.insert(t.violations.end(), rethink.violations.begin(), rethink.violations.end());
    t.well_formed = t.violations.empty();
    return t;
}

std::pair<std::string, std::string> split_trace(std::string_view text) {
    Scan s = scan(text);
    if (const Anchor* j = find_anchor(s, AnchorKind::judgment)) {
        return {std::string(text.substr(0, j->line_start)), std::string(text.substr(j->line_start))};
    }
    return {std::string(text), std::string()};
}

namespace {

// Lines outside fenced blocks.
std::vector<std::string_view> open_lines(std::string_view text) {
    Scan s = scan(text);
    std::vector<std::string_view> out;
    std::size_t pos = 0;
    while (pos <= text.size()) {
        std::size_t nl = text.find('\n', pos);
        std::size_t end = nl == std::string_view::npos ? text.size() : nl;
        if (!s.is_opaque(pos)) out.push_back(text.substr(pos, end - pos));
        if (nl == std::string_view::npos) break;
        pos = nl + 1;
    }
    return out;
}

constexpr std::string_view kFocusPrefix = "Focus dimensions: ";

}  // namespace

PromptKind classify_prompt(std::string_view prompt) {
    bool focus = false, hierarchy = false, findings = false, raw = false, dims = false, boxed_format = false;
    for (auto line : open_lines(prompt)) {
        line = trim(line);
        if (line == "[Quality Assessment Focus]") focus = true;
        if (line == "[Evaluation Hierarchy]") hierarchy = true;
        if (line == "[First-Turn Findings]") findings = true;
        if (line == "[First-Turn Output]") raw = true;
        if (line == "[Dimensions]") dims = true;
        if (line.find("end with the number of the better response") != std::string_view::npos) boxed_format = true;
    }
    if (findings) return PromptKind::rethink;
    if (raw) return PromptKind::rethink_from_raw;
    if (dims) return PromptKind::unconditioned_rethink;
    if (focus && hierarchy) return PromptKind::single_turn;
    if (focus && boxed_format) return PromptKind::branch_verdict;
    if (focus) return PromptKind::branch;
    return PromptKind::unknown;
}

std::vector<std::string> focus_dimensions(std::string_view prompt) {
    std::vector<std::string> out;
    for (auto line : open_lines(prompt)) {
        if (line.substr(0, kFocusPrefix.size()) != kFocusPrefix) continue;
        std::string_view list = line.substr(kFocusPrefix.size());
        std::size_t start = 0;
        while (start <= list.size()) {
            std::size_t comma = list.find(',', start);
            std::size_t end = comma == std::string_view::npos ? list.size() : comma;
            auto name = trim(list.substr(start, end - start));
            if (!name.empty()) out.emplace_back(name);
            if (comma == std::string_view::npos) break;
            start = comma + 1;
        }
        break;
    }
    return out;
}

DeliberationTrace parse_trace(std::string_view text, const CriteriaSet& criteria, VerdictScale scale) {
    auto [turn1, turn2] = split_trace(text);
    return assemble_trace(parse_branch(turn1, criteria), parse_rethink(turn2, scale));
}

}  // namespace brrm
