#pragma once

// Token-allocation analysis of judge traces: sentences are attributed to
// evaluation dimensions and their token shares are averaged over traces.

#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "json.hpp"

#include "brrm/rollout.hpp"
#include "brrm/trace.hpp"

namespace brrm {

struct Sentence {
    std::string text;
    int tokens = 0;  // whitespace tokens
};

// Splits on ., ? or ! followed by whitespace or end of text, and on line
// breaks. Common abbreviations (e.g., i.e., etc., vs., Dr., Fig., ...) do not end a sentence.
std::vector<Sentence> segment_sentences(std::string_view text);

// Removes trace markup before analysis: anchor labels at line start and boxed markers.
std::string strip_trace_markup(std::string_view text);

// Keywords per criterion name. A trailing '*' makes a keyword a prefix match.
struct Lexicon {
    std::map<std::string, std::vector<std::string>> keywords;

    static Lexicon defaults();
    // Object of name -> array of keywords. Throws config_error on bad shape or keywords.
    static Lexicon from_json(const nlohmann::json& j);
    static Lexicon load(const std::filesystem::path& path);
    nlohmann::json to_json() const;
    // Keywords must be non-empty, lowercase, single words.
    void validate() const;
};

enum class AttributorKind { lexicon, external_judge };

const char* to_string(AttributorKind k);
std::optional<AttributorKind> attributor_kind_from_string(std::string_view s);

struct Attribution {
    std::optional<int> criterion;
    std::string error;  // set when the external judge failed
};

class Attributor {
  public:
    explicit Attributor(Lexicon lexicon = Lexicon::defaults());
    // External-judge mode; the orchestrator supplies the backend and in-flight cap.
    Attributor(const Orchestrator& judge, Lexicon fallback_lexicon = Lexicon::defaults());

    AttributorKind kind() const { return kind_; }
    const Lexicon& lexicon() const { return lexicon_; }

    // Lexicon: argmax of keyword hits, ties to the lower id, no hits -> unattributed.
    // External judge: failures degrade to unattributed with an error note.
    Attribution attribute(std::string_view sentence, const CriteriaSet& criteria) const;

  private:
    Attribution by_lexicon(std::string_view sentence, const CriteriaSet& criteria) const;
    Attribution by_judge(std::string_view sentence, const CriteriaSet& criteria) const;

    AttributorKind kind_;
    Lexicon lexicon_;
    const Orchestrator* judge_ = nullptr;
};

std::string render_attribution_prompt(std::string_view sentence, const CriteriaSet& criteria);

// One judge trace. Exact per-turn token counts rescale the whitespace counts.
struct AnalyzedTrace {
    std::string turn1;
    std::string turn2;
    std::optional<int> turn1_tokens;
    std::optional<int> turn2_tokens;
};

struct AllocationProfile {
    std::map<int, double> shares;  // every criterion id, zero included
    double unattributed = 0.0;
    std::map<int, double> token_counts;  // summed over traces
    double unattributed_tokens = 0.0;
    long long total_tokens = 0;
    bool approximate_counts = true;
    std::size_t n_traces = 0;
    std::size_t n_sentences = 0;
    std::size_t attribution_errors = 0;
};

// Per-trace shares over the union of both turns, averaged uniformly over
// traces. A trace without tokens counts as fully unattributed.
AllocationProfile allocation_profile(std::span<const AnalyzedTrace> traces, const CriteriaSet& criteria,
                                     const Attributor& attributor);

struct Concentration {
    int k = 1;
    double top_k_share = 0.0;
    // Natural-log entropy of the attributed shares renormalized to sum to 1.
    double entropy = 0.0;
};

// Throws input_error when k < 1.
Concentration concentration_metrics(const AllocationProfile& profile, int k);

// name,share,token_count per criterion, then an unattributed row.
std::string profile_csv(const AllocationProfile& profile, const CriteriaSet& criteria);
nlohmann::json profile_summary(const AllocationProfile& profile, const CriteriaSet& criteria, int k);

}  // namespace brrm
