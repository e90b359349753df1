#include "brrm/diffusion.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <fstream>

#include <fmt/format.h>

#include "brrm/errors.hpp"

namespace brrm {

using nlohmann::json;

namespace {

bool is_space(char c) { return std::isspace(static_cast<unsigned char>(c)) != 0; }

std::string lower(std::string_view s) {
    std::string out(s);
    for (char& c : out) c = static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
    return out;
}

constexpr std::string_view kAbbreviations[] = {
    "e.g.", "i.e.", "etc.", "vs.", "cf.", "mr.", "mrs.", "ms.", "dr.", "prof.", "st.", "fig.", "eq.", "no.", "approx.",
};

// True when the word ending at `end` (exclusive, last char is '.') is a known abbreviation.
bool ends_with_abbreviation(std::string_view text, std::size_t end) {
    std::size_t start = end;
    while (start > 0 && !is_space(text[start - 1]) && text[start - 1] != '(' && text[start - 1] != '"') --start;
    const std::string word = lower(text.substr(start, end - start));
    return std::find(std::begin(kAbbreviations), std::end(kAbbreviations), word) != std::end(kAbbreviations);
}

void push_sentence(std::vector<Sentence>& out, std::string_view s) {
    std::size_t b = 0, e = s.size();
    while (b < e && is_space(s[b])) ++b;
    while (e > b && is_space(s[e - 1])) --e;
    if (b == e) return;
    out.push_back({std::string(s.substr(b, e - b)), whitespace_tokens(s.substr(b, e - b))});
}

std::vector<std::string> words_of(std::string_view s) {
    std::vector<std::string> out;
    std::string w;
    for (char c : s) {
        if (std::isalnum(static_cast<unsigned char>(c))) {
            w.push_back(static_cast<char>(std::tolower(static_cast<unsigned char>(c))));
        } else if (!w.empty()) {
            out.push_back(std::move(w));
            w.clear();
        }
    }
    if (!w.empty()) out.push_back(std::move(w));
    return out;
}

bool keyword_matches(const std::string& keyword, const std::string& word) {
    if (!keyword.empty() && keyword.back() == '*') {
        return word.compare(0, keyword.size() - 1, keyword, 0, keyword.size() - 1) == 0 &&
               word.size() >= keyword.size() - 1;
    }
    return word == keyword;
}

std::string csv_field(std::string_view s) {
    if (s.find_first_of(",\"\n") == std::string_view::npos) return std::string(s);
    std::string out = "\"";
    for (char c : s) {
        if (c == '"') out += '"';
        out += c;
    }
    return out + "\"";
}

}  // namespace

std::vector<Sentence> segment_sentences(std::string_view text) {
    std::vector<Sentence> out;
    std::size_t start = 0;
    for (std::size_t i = 0; i < text.size(); ++i) {
        const char c = text[i];
        if (c == '\n') {
            push_sentence(out, text.substr(start, i - start));
            start = i + 1;
            continue;
        }
        if (c != '.' && c != '?' && c != '!') continue;
        std::size_t end = i + 1;
        while (end < text.size() && (text[end] == '.' || text[end] == '?' || text[end] == '!')) ++end;
        while (end < text.size() && (text[end] == '"' || text[end] == '\'' || text[end] == ')')) ++end;
        if (end < text.size() && !is_space(text[end])) {
            i = end - 1;
            continue;
        }
        if (c == '.' && end == i + 1 && ends_with_abbreviation(text, i + 1)) continue;
        push_sentence(out, text.substr(start, end - start));
        start = end;
        i = end - 1;
    }
    push_sentence(out, text.substr(start));
    return out;
}

std::string strip_trace_markup(std::string_view text) {
    static constexpr std::string_view kAnchors[] = {"SELECTED:", "ANALYSIS_1:", "ANALYSIS_2:", "JUDGMENT:"};
    std::string out;
    std::size_t pos = 0;
    while (pos <= text.size()) {
        std::size_t nl = text.find('\n', pos);
        std::size_t end = nl == std::string_view::npos ? text.size() : nl;
        std::string_view line = text.substr(pos, end - pos);
        std::size_t lead = 0;
        while (lead < line.size() && (line[lead] == ' ' || line[lead] == '\t')) ++lead;
        for (auto a : kAnchors) {
            if (line.substr(lead, a.size()) == a) {
                line = line.substr(lead + a.size());
                break;
            }
        }
        std::string cleaned;
        for (std::size_t i = 0; i < line.size();) {
            if (line.substr(i, 7) == "\\boxed{") {
                std::size_t close = line.find('}', i);
                if (close != std::string_view::npos) {
                    i = close + 1;
                    continue;
                }
            }
            cleaned += line[i++];
        }
        out += cleaned;
        if (nl == std::string_view::npos) break;
        out += '\n';
        pos = nl + 1;
    }
    return out;
}

Lexicon Lexicon::defaults() {
    Lexicon lx;
    lx.keywords = {
        {"Information Accuracy",
         {"fact*", "accura*", "inaccura*", "claim*", "citation*", "cite*", "source*", "verif*", "true", "false",
          "incorrect", "misinformation", "outdated", "historical"}},
        {"Logical Reasoning",
         {"logic*", "reason*", "proof*", "prove*", "argument*", "contradict*", "coherent", "incoherent", "consisten*",
          "inconsisten*", "deduc*", "infer*", "premise*", "conclusion*", "valid", "invalid", "fallac*"}},
        {"Implementation Capability",
         {"code", "coding", "function*", "implement*", "compile*", "bug*", "runtime", "program*", "algorithm*",
          "syntax", "execut*", "api", "library", "loop*", "variable*"}},
        {"Computational Precision",
         {"calculat*", "comput*", "arithmetic", "number*", "numeric*", "precision", "precise", "decimal*", "sum",
          "equation*", "formula*", "math*", "digit*", "rounding"}},
        {"Instruction Adherence",
         {"instruction*", "requirement*", "require*", "constraint*", "request*", "asked", "follow*", "ignore*",
          "limit*", "format*", "specified"}},
        {"Writing Clarity",
         {"clear", "clearly", "clarity", "unclear", "readab*", "concise", "verbose", "wordy", "organiz*", "structur*",
          "grammar", "grammatical", "phrasing", "fluen*", "style", "typo*"}},
        {"Content Relevance",
         {"relevan*", "irrelevan*", "topic*", "tangent*", "digress*", "scope", "address*", "cover*", "omit*",
          "missing", "unrelated"}},
        {"Safety & Harmlessness",
         {"safe*", "unsafe", "harm*", "danger*", "risk*", "ethic*", "unethical", "toxic*", "illegal", "violen*",
          "privacy", "abus*", "offensive", "bias*"}},
        {"Intent Alignment",
         {"intent*", "goal*", "need*", "expect*", "purpose*", "user", "users", "want*", "satisf*", "helpful*",
          "useful*", "tone", "creativ*", "original*"}},
    };
    return lx;
}

void Lexicon::validate() const {
    for (const auto& [name, words] : keywords) {
        if (words.empty()) throw config_error(fmt::format("analyzer lexicon: '{}' has no keywords", name));
        for (const auto& w : words) {
            std::string_view core(w);
            if (!core.empty() && core.back() == '*') core.remove_suffix(1);
            bool ok = !core.empty();
            for (char c : core) {
                ok = ok && std::isalnum(static_cast<unsigned char>(c)) && !std::isupper(static_cast<unsigned char>(c));
            }
            if (!ok) {
                throw config_error(fmt::format(
                    "analyzer lexicon: keyword '{}' for '{}' must be a lowercase word (optional trailing *)", w, name));
            }
        }
    }
}

Lexicon Lexicon::from_json(const json& j) {
    if (!j.is_object()) throw config_error("analyzer lexicon must be an object of name -> keyword list");
    Lexicon lx;
    for (const auto& [name, arr] : j.items()) {
        if (!arr.is_array()) throw config_error(fmt::format("analyzer lexicon: '{}' must map to an array", name));
        auto& words = lx.keywords[name];
        for (const auto& w : arr) {
            if (!w.is_string()) throw config_error(fmt::format("analyzer lexicon: '{}' has a non-string keyword", name));
            words.push_back(w.get<std::string>());
        }
    }
    lx.validate();
    return lx;
}

Lexicon Lexicon::load(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw io_error(fmt::format("cannot read lexicon '{}'", path.string()));
    json j = json::parse(in, nullptr, false);
    if (j.is_discarded()) throw config_error(fmt::format("lexicon '{}' is not valid JSON", path.string()));
    return from_json(j);
}

json Lexicon::to_json() const {
    json j = json::object();
    for (const auto& [name, words] : keywords) j[name] = words;
    return j;
}

const char* to_string(AttributorKind k) { return k == AttributorKind::external_judge ? "external_judge" : "lexicon"; }

std::optional<AttributorKind> attributor_kind_from_string(std::string_view s) {
    if (s == "lexicon") return AttributorKind::lexicon;
    if (s == "external_judge") return AttributorKind::external_judge;
    return std::nullopt;
}

Attributor::Attributor(Lexicon lexicon) : kind_(AttributorKind::lexicon), lexicon_(std::move(lexicon)) {
    lexicon_.validate();
}

Attributor::Attributor(const Orchestrator& judge, Lexicon fallback_lexicon)
    : kind_(AttributorKind::external_judge), lexicon_(std::move(fallback_lexicon)), judge_(&judge) {}

Attribution Attributor::attribute(std::string_view sentence, const CriteriaSet& criteria) const {
    if (criteria.size() == 0) throw input_error("attribution needs a non-empty criteria set");
    return kind_ == AttributorKind::lexicon ? by_lexicon(sentence, criteria) : by_judge(sentence, criteria);
}

Attribution Attributor::by_lexicon(std::string_view sentence, const CriteriaSet& criteria) const {
    const auto words = words_of(sentence);
    int best_id = 0;
    int best_hits = 0;
    for (const auto& c : criteria.all()) {
        auto it = std::find_if(lexicon_.keywords.begin(), lexicon_.keywords.end(),
                               [&](const auto& kv) { return normalize_name(kv.first) == normalize_name(c.name); });
        if (it == lexicon_.keywords.end()) continue;
        int hits = 0;
        for (const auto& w : words) {
            for (const auto& k : it->second) {
                if (keyword_matches(k, w)) {
                    ++hits;
                    break;
                }
            }
        }
        if (hits > best_hits) {
            best_hits = hits;
            best_id = c.id;
        }
    }
    if (best_hits == 0) return {};
    return {best_id, {}};
}

std::string render_attribution_prompt(std::string_view sentence, const CriteriaSet& criteria) {
    std::string out = "[Role]\nYou label one sentence from an evaluation with the dimension it discusses.\n\n";
    out += "[Dimension Menu]\n";
    for (const auto& c : criteria.all()) out += fmt::format("{}. {}: {}\n", c.id, c.name, c.description);
    out += "\n[Sentence]\n" + fence(sentence) + "\n\n";
    out += "[Output Format]\nReply with the name of the single best matching dimension in a box, for example "
           "\\boxed{Writing Clarity}, or \\boxed{none} if the sentence discusses no dimension.\n";
    return out;
}

Attribution Attributor::by_judge(std::string_view sentence, const CriteriaSet& criteria) const {
    GenerationRequest req;
    req.prompt = render_attribution_prompt(sentence, criteria);
    req.temperature = 0.0;
    req.top_p = judge_->config().rollout.top_p;
    req.top_k = judge_->config().rollout.top_k;
    req.max_new_tokens = judge_->config().rollout.max_new_tokens;
    req.max_total_tokens = judge_->config().rollout.max_total_tokens;
    req.seed = mix_seed(judge_->config().rollout.seed, sentence);
    std::string text;
    try {
        text = judge_->generate(req).text;
    } catch (const std::exception& e) {
        return {std::nullopt, fmt::format("external judge failed: {}", e.what())};
    }
    std::size_t open = text.rfind("\\boxed{");
    std::size_t close = open == std::string::npos ? std::string::npos : text.find('}', open);
    if (close == std::string::npos) return {std::nullopt, "external judge gave no boxed dimension"};
    std::string name = text.substr(open + 7, close - open - 7);
    if (normalize_name(name) == "none") return {};
    if (const auto* c = criteria.by_name(name)) return {c->id, {}};
    return {std::nullopt, fmt::format("external judge named an unknown dimension '{}'", name)};
}

AllocationProfile allocation_profile(std::span<const AnalyzedTrace> traces, const CriteriaSet& criteria,
                                     const Attributor& attributor) {
    if (traces.empty()) throw input_error("allocation profile needs at least one trace");
    AllocationProfile p;
    p.approximate_counts = false;
    for (const auto& c : criteria.all()) {
        p.shares[c.id] = 0.0;
        p.token_counts[c.id] = 0.0;
    }
    double total = 0.0;
    for (const auto& t : traces) {
        std::map<int, double> tokens;
        double unattributed = 0.0, trace_total = 0.0;
        for (auto [text, exact] : {std::pair{&t.turn1, t.turn1_tokens}, std::pair{&t.turn2, t.turn2_tokens}}) {
            auto sentences = segment_sentences(strip_trace_markup(*text));
            double approx = 0.0;
            for (const auto& s : sentences) approx += s.tokens;
            double scale = 1.0;
            if (exact && approx > 0.0) {
                scale = *exact / approx;
            } else if (!text->empty()) {
                p.approximate_counts = true;
            }
            for (const auto& s : sentences) {
                const double n = s.tokens * scale;
                Attribution a = attributor.attribute(s.text, criteria);
                if (!a.error.empty()) ++p.attribution_errors;
                if (a.criterion) {
                    tokens[*a.criterion] += n;
                } else {
                    unattributed += n;
                }
                trace_total += n;
            }
            p.n_sentences += sentences.size();
        }
        ++p.n_traces;
        total += trace_total;
        for (const auto& [id, n] : tokens) p.token_counts[id] += n;
        p.unattributed_tokens += unattributed;
        if (trace_total <= 0.0) {
            p.unattributed += 1.0;
            continue;
        }
        for (const auto& [id, n] : tokens) p.shares[id] += n / trace_total;
        p.unattributed += unattributed / trace_total;
    }
    const double n = static_cast<double>(p.n_traces);
    for (auto& [_, s] : p.shares) s /= n;
    p.unattributed /= n;
    p.total_tokens = std::llround(total);
    return p;
}

Concentration concentration_metrics(const AllocationProfile& profile, int k) {
    if (k < 1) throw input_error(fmt::format("top-k needs k >= 1, got {}", k));
    std::vector<double> shares;
    for (const auto& [_, s] : profile.shares) shares.push_back(s);
    std::sort(shares.begin(), shares.end(), std::greater<>());
    Concentration c;
    c.k = k;
    for (std::size_t i = 0; i < shares.size() && i < static_cast<std::size_t>(k); ++i) c.top_k_share += shares[i];
    double mass = 0.0;
    for (double s : shares) mass += s;
    if (mass > 0.0) {
        for (double s : shares) {
            if (s > 0.0) c.entropy -= (s / mass) * std::log(s / mass);
        }
    }
    c.entropy = std::max(0.0, c.entropy);
    return c;
}

std::string profile_csv(const AllocationProfile& profile, const CriteriaSet& criteria) {
    std::string out = "name,share,token_count\n";
    for (const auto& c : criteria.all()) {
        auto share = profile.shares.count(c.id) ? profile.shares.at(c.id) : 0.0;
        auto tokens = profile.token_counts.count(c.id) ? profile.token_counts.at(c.id) : 0.0;
        out += fmt::format("{},{:.6f},{:.2f}\n", csv_field(c.name), share, tokens);
    }
    out += fmt::format("unattributed,{:.6f},{:.2f}\n", profile.unattributed, profile.unattributed_tokens);
    return out;
}

json profile_summary(const AllocationProfile& profile, const CriteriaSet& criteria, int k) {
    Concentration c = concentration_metrics(profile, k);
    json shares = json::object();
    for (const auto& cr : criteria.all()) shares[cr.name] = profile.shares.count(cr.id) ? profile.shares.at(cr.id) : 0.0;
    return {{"shares", shares},
            {"unattributed", profile.unattributed},
            {"total_tokens", profile.total_tokens},
            {"approximate_counts", profile.approximate_counts},
            {"n_traces", profile.n_traces},
            {"n_sentences", profile.n_sentences},
            {"attribution_errors", profile.attribution_errors},
            {"top_k", c.k},
            {"top_k_share", c.top_k_share},
            {"entropy", c.entropy}};
}

}  // namespace brrm
