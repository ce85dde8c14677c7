#pragma once

#include <optional>
#include <string>
#include <string_view>
#include <vector>

namespace malles {

struct PromptSidecar;

/// Template purchasing strategies produced by the candidate generator.
enum class Strategy { repeat_last_purchase, cheapest_candidate, highest_review, brand_loyal, discount_chaser };

std::string to_string(Strategy s);
std::optional<Strategy> parse_strategy(std::string_view name);

struct StrategyDescriptor {
    Strategy kind;
    std::string instruction;
    /// Brand the brand-loyal strategy sticks to.
    std::optional<std::string> brand;

    friend bool operator==(const StrategyDescriptor&, const StrategyDescriptor&) = default;
};

/// Displayed-candidate row index the strategy points at, if any.
std::optional<std::size_t> strategy_target(Strategy s, const PromptSidecar& sidecar);

}  // namespace malles
