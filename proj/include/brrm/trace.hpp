#pragma once

// Criteria universe, two-turn trace data model, prompt rendering and strict
// parsing of judge output.
//
// Wire format of a judge turn (anchors must start a line, outside fenced blocks):
//
//   SELECTED: <name>[, <name>[, <name>]]
//   ANALYSIS_1:
//   <analysis of response 1>
//   ANALYSIS_2:
//   <analysis of response 2>
//
//   JUDGMENT:
//   <comparative judgment>
//   \boxed{1}            (or \boxed{2})
//
// Lines between ``` fences are opaque: anchors and boxed markers inside them
// are ignored. A fence opened with N backticks closes only on a line made of
// at least N backticks.

#include <map>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

namespace brrm {

enum class Verdict { first = 1, second = 2 };

// Generation turn of the two-turn protocol.
enum class Turn { branch, rethink };

const char* to_string(Turn t);

inline int to_int(Verdict v) { return static_cast<int>(v); }
std::optional<Verdict> verdict_from_int(int v);
inline Verdict other(Verdict v) { return v == Verdict::first ? Verdict::second : Verdict::first; }

struct EvaluationCriterion {
    int id = 0;
    std::string name;
    std::string description;
};

class CriteriaSet {
  public:
    // Throws input_error unless ids are 1..n contiguous in order and names are
    // non-empty and unique after normalization.
    explicit CriteriaSet(std::vector<EvaluationCriterion> criteria);

    static CriteriaSet defaults();

    const std::vector<EvaluationCriterion>& all() const { return criteria_; }
    std::size_t size() const { return criteria_.size(); }
    const EvaluationCriterion* by_id(int id) const;
    // Case-insensitive, whitespace-collapsed exact match.
    const EvaluationCriterion* by_name(std::string_view name) const;

  private:
    std::vector<EvaluationCriterion> criteria_;
};

// Lowercase and collapse runs of whitespace to single spaces; trims the ends.
std::string normalize_name(std::string_view name);

enum class TaskFamily { accuracy_critical, creative, general };

const char* to_string(TaskFamily family);
std::optional<TaskFamily> task_family_from_string(std::string_view s);

struct TaskHierarchy {
    TaskFamily family = TaskFamily::general;
    std::vector<std::string> ordering;

    // Throws input_error on empty or duplicated labels.
    void validate() const;
    // "A > B > C"
    std::string ordering_string() const;
};

// Hierarchies per task family plus the domain-tag routing between them.
struct HierarchyTable {
    std::map<TaskFamily, TaskHierarchy> hierarchies;
    std::map<std::string, TaskFamily> domain_families;  // lowercase domain -> family

    static HierarchyTable defaults();
    const TaskHierarchy& for_domain(const std::optional<std::string>& domain) const;
};

enum class Difficulty { easy, normal, hard };

const char* to_string(Difficulty d);
std::optional<Difficulty> difficulty_from_string(std::string_view s);

struct ComparisonItem {
    std::string id;
    std::string prompt;
    std::string response_1;
    std::string response_2;
    int label = 1;  // 1 or 2; with candidates, 1-based index of the winner
    std::optional<std::string> domain;
    std::optional<Difficulty> difficulty;
    std::optional<int> score_1;
    std::optional<int> score_2;
    std::vector<std::string> candidates;

    // Throws input_error describing the first broken invariant.
    void validate() const;
    // Responses exchanged, label and scores mirrored.
    ComparisonItem swapped() const;
};

enum class ViolationCode {
    missing_section,
    criteria_count_out_of_range,
    unknown_criterion,
    missing_verdict,
    multiple_verdicts,
    invalid_verdict_value,
    empty_analysis,
};

const char* to_string(ViolationCode code);
std::optional<ViolationCode> violation_code_from_string(std::string_view s);

struct FormatViolation {
    ViolationCode code;
    std::string detail;

    bool operator==(const FormatViolation&) const = default;
};

struct BranchTrace {
    std::vector<int> selected;
    std::string analysis_1;
    std::string analysis_2;
    std::string raw;
};

// Boxed content accepted as a verdict.
enum class VerdictScale {
    binary,  // 1 or 2
    scaled,  // integer in [-3, 3], the predicted score of the first response
};

struct RethinkTrace {
    std::string judgment;
    std::optional<Verdict> verdict;  // never outside {1, 2}
    std::optional<int> score;        // scaled scale only
    std::string raw;
};

template <typename T>
struct Parsed {
    T trace;  // best-effort fields; meaningful only when ok()
    std::vector<FormatViolation> violations;

    bool ok() const { return violations.empty(); }
};

using BranchParse = Parsed<BranchTrace>;
using RethinkParse = Parsed<RethinkTrace>;

struct DeliberationTrace {
    BranchTrace branch;
    RethinkTrace rethink;
    bool well_formed = false;
    std::vector<FormatViolation> violations;
    std::vector<FormatViolation> branch_violations;
    std::vector<FormatViolation> rethink_violations;

    std::string text() const { return branch.raw + rethink.raw; }
};

// Rendering. All functions are pure.
std::string render_branch_prompt(const ComparisonItem& item, const CriteriaSet& criteria);
// Branch prompt variant that also demands a final boxed verdict (branching-only mode).
std::string render_branch_verdict_prompt(const ComparisonItem& item, const CriteriaSet& criteria);
// Throws input_error if the branch does not satisfy the BranchTrace invariants.
std::string render_rethink_prompt(const ComparisonItem& item, const BranchTrace& branch,
                                  const CriteriaSet& criteria, const TaskHierarchy& hierarchy);
// Rethink prompt for a malformed first turn: the raw first-turn text is shown fenced.
std::string render_rethink_prompt_from_raw(const ComparisonItem& item, std::string_view raw_turn1,
                                           const TaskHierarchy& hierarchy);
// Generic re-evaluation over all dimensions with no first-turn conditioning.
std::string render_unconditioned_rethink_prompt(const ComparisonItem& item, const CriteriaSet& criteria,
                                                const TaskHierarchy& hierarchy);
std::string render_single_turn_prompt(const ComparisonItem& item, const CriteriaSet& criteria,
                                      const TaskHierarchy& hierarchy);

// Wraps text in a backtick fence longer than any backtick run it contains.
std::string fence(std::string_view text);

// Parsing. Total over arbitrary input.
BranchParse parse_branch(std::string_view raw, const CriteriaSet& criteria);
RethinkParse parse_rethink(std::string_view raw, VerdictScale scale = VerdictScale::binary);
DeliberationTrace assemble_trace(const BranchParse& branch, const RethinkParse& rethink);

// Extracts the verdict from the text following the last ANALYSIS_2 anchor of a
// branching-only turn.
RethinkParse parse_branch_verdict(std::string_view raw, VerdictScale scale = VerdictScale::binary);

// Splits a concatenated trace at the first JUDGMENT anchor outside fences.
// The second part is empty when no anchor exists.
std::pair<std::string, std::string> split_trace(std::string_view text);

// Which template produced a prompt, judged from its section headers outside fences.
enum class PromptKind { branch, branch_verdict, rethink, rethink_from_raw, unconditioned_rethink, single_turn, unknown };

PromptKind classify_prompt(std::string_view prompt);
// Names listed on the "Focus dimensions:" line of a conditioned rethink prompt.
std::vector<std::string> focus_dimensions(std::string_view prompt);

// Parses a stored two-turn trace (turn 1 followed by turn 2).
DeliberationTrace parse_trace(std::string_view text, const CriteriaSet& criteria,
                              VerdictScale scale = VerdictScale::binary);

}  // namespace brrm
