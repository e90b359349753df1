#pragma once

// Test doubles shared by the unit, CLI and acceptance tests.

#include <atomic>
#include <chrono>
#include <functional>
#include <mutex>
#include <string>
#include <string_view>
#include <thread>
#include <vector>

#include <fmt/format.h>

#include "brrm/backend.hpp"
#include "brrm/trace.hpp"

namespace brrm::test {

// Content of the fenced block following a "[Header]" line, or "" when absent.
inline std::string fenced_section(std::string_view prompt, std::string_view header) {
    std::vector<std::string_view> lines;
    for (std::size_t pos = 0; pos <= prompt.size();) {
        std::size_t nl = prompt.find('\n', pos);
        if (nl == std::string_view::npos) nl = prompt.size();
        lines.push_back(prompt.substr(pos, nl - pos));
        pos = nl + 1;
    }
    auto tick_run = [](std::string_view l) {
        std::size_t b = l.find_first_not_of(" \t");
        if (b == std::string_view::npos) return std::size_t{0};
        std::size_t n = 0;
        while (b + n < l.size() && l[b + n] == '`') ++n;
        return n >= 3 ? n : 0;
    };
    auto only_ticks = [](std::string_view l, std::size_t n) {
        std::size_t b = l.find_first_not_of(" \t"), e = l.find_last_not_of(" \t\r");
        if (b == std::string_view::npos) return false;
        std::string_view core = l.substr(b, e - b + 1);
        return core.size() >= n && core.find_first_not_of('`') == std::string_view::npos;
    };
    std::size_t open = 0;  // backticks of the enclosing fence, 0 outside
    for (std::size_t i = 0; i < lines.size(); ++i) {
        if (open) {
            if (only_ticks(lines[i], open)) open = 0;
            continue;
        }
        if (std::size_t n = tick_run(lines[i])) {
            open = n;
            continue;
        }
        if (lines[i] != header || i + 1 >= lines.size()) continue;
        const std::size_t ticks = tick_run(lines[i + 1]);
        if (!ticks) return {};
        std::string out;
        for (std::size_t j = i + 2; j < lines.size(); ++j) {
            if (only_ticks(lines[j], ticks)) return out;
            if (j > i + 2) out += '\n';
            out += lines[j];
        }
        return {};
    }
    return {};
}

inline std::string branch_text(const std::string& selected = "Logical Reasoning") {
    return fmt::format("SELECTED: {}\nANALYSIS_1:\nThe first response argues carefully.\nANALYSIS_2:\n"
                       "The second response skips a step.\n",
                       selected);
}

inline std::string rethink_text(int verdict) {
    return fmt::format("JUDGMENT:\nWeighing the findings under the hierarchy.\n\\boxed{{{}}}\n", verdict);
}

// Backend driven by a function; counts calls and tracks peak concurrency.
class FnBackend : public Backend {
  public:
    using Fn = std::function<Completion(const GenerationRequest&)>;

    explicit FnBackend(Fn fn, std::chrono::milliseconds delay = {}) : fn_(std::move(fn)), delay_(delay) {}

    Completion complete(const GenerationRequest& request) override {
        const int now = ++in_flight_;
        int peak = peak_.load();
        while (now > peak && !peak_.compare_exchange_weak(peak, now)) {
        }
        ++calls_;
        {
            std::lock_guard lock(mu_);
            prompts_.push_back(request.prompt);
        }
        if (delay_.count() > 0) std::this_thread::sleep_for(delay_);
        struct Leave {
            std::atomic<int>& n;
            ~Leave() { --n; }
        } leave{in_flight_};
        return fn_(request);
    }

    int calls() const { return calls_; }
    int peak_in_flight() const { return peak_; }
    std::vector<std::string> prompts() const {
        std::lock_guard lock(mu_);
        return prompts_;
    }

  private:
    Fn fn_;
    std::chrono::milliseconds delay_;
    std::atomic<int> calls_{0};
    std::atomic<int> in_flight_{0};
    std::atomic<int> peak_{0};
    mutable std::mutex mu_;
    std::vector<std::string> prompts_;
};

// Judge mock: well-formed output for every template; the verdict is chosen by
// `choose(response_1, response_2)` read from the prompt's response sections.
inline FnBackend::Fn judge_fn(std::function<int(const std::string&, const std::string&)> choose,
                              std::string selected = "Logical Reasoning") {
    return [choose = std::move(choose), selected = std::move(selected)](const GenerationRequest& req) {
        const std::string r1 = fenced_section(req.prompt, "[Response 1]");
        const std::string r2 = fenced_section(req.prompt, "[Response 2]");
        Completion c;
        switch (classify_prompt(req.prompt)) {
            case PromptKind::branch: c.text = branch_text(selected); break;
            case PromptKind::branch_verdict:
                c.text = branch_text(selected) + fmt::format("\\boxed{{{}}}\n", choose(r1, r2));
                break;
            case PromptKind::single_turn: c.text = branch_text(selected) + rethink_text(choose(r1, r2)); break;
            default: c.text = rethink_text(choose(r1, r2)); break;
        }
        return c;
    };
}

// Chooses the response carrying the hidden marker.
inline int pick_gold(const std::string& r1, const std::string&) { return r1.find("[GOLD]") != std::string::npos ? 1 : 2; }

}  // namespace brrm::test
