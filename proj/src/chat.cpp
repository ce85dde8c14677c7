#include "malles/chat.hpp"

#include <algorithm>
#include <limits>

#include "malles/prompt_builder.hpp"
#include "malles/strategy.hpp"

namespace malles {

std::size_t select_backend_index(std::size_t pool_size, std::uint64_t selection_seed, std::uint64_t inference_index) {
    if (pool_size == 0) throw InvalidArgument("backend pool is empty");
    return static_cast<std::size_t>(derive_seed(selection_seed, inference_index) % pool_size);
}

BackendPool::BackendPool(std::vector<std::shared_ptr<ChatBackend>> backends, std::uint64_t selection_seed)
    : backends_(std::move(backends)), seed_(selection_seed) {
    if (backends_.empty()) throw InvalidArgument("backend pool is empty");
    for (const auto& b : backends_)
        if (!b) throw InvalidArgument("null backend in pool");
}

ChatBackend& BackendPool::select(std::uint64_t inference_index) const {
    return *backends_.at(select_backend_index(backends_.size(), seed_, inference_index));
}

// ---------------------------------------------------------------------------

std::string to_string(Strategy s) {
    switch (s) {
        case Strategy::repeat_last_purchase: return "repeat-last-purchase";
        case Strategy::cheapest_candidate: return "cheapest-candidate";
        case Strategy::highest_review: return "highest-review";
        case Strategy::brand_loyal: return "brand-loyal";
        case Strategy::discount_chaser: return "discount-chaser";
    }
    return "?";
}

std::optional<Strategy> parse_strategy(std::string_view name) {
    for (auto s : {Strategy::repeat_last_purchase, Strategy::cheapest_candidate, Strategy::highest_review,
                   Strategy::brand_loyal, Strategy::discount_chaser})
        if (to_string(s) == name) return s;
    return std::nullopt;
}

std::optional<std::size_t> strategy_target(Strategy s, const PromptSidecar& sidecar) {
    const auto& rows = sidecar.rows;
    if (rows.empty()) return std::nullopt;
    // Lexicographic preference: primary key, then lower effective price, then id.
    auto best_by = [&](auto key, auto filter) -> std::optional<std::size_t> {
        std::optional<std::size_t> best;
        for (std::size_t i = 0; i < rows.size(); ++i) {
            if (!filter(rows[i])) continue;
            if (!best) {
                best = i;
                continue;
            }
            const auto& a = rows[i];
            const auto& b = rows[*best];
            const double ka = key(a), kb = key(b);
            const auto pa = a.features.effective_price(), pb = b.features.effective_price();
            if (ka > kb || (ka == kb && (pa < pb || (pa == pb && a.product_id < b.product_id)))) best = i;
        }
        return best;
    };
    auto any = [](const SidecarRow&) { return true; };
    switch (s) {
        case Strategy::repeat_last_purchase:
            if (!sidecar.last_purchased_product) return std::nullopt;
            for (std::size_t i = 0; i < rows.size(); ++i)
                if (rows[i].product_id == *sidecar.last_purchased_product) return i;
            return std::nullopt;
        case Strategy::cheapest_candidate:
            return best_by([](const SidecarRow&) { return 0.0; }, any);
        case Strategy::highest_review:
            return best_by([](const SidecarRow& r) { return r.features.review; }, any);
        case Strategy::brand_loyal:
            if (!sidecar.top_brand) return std::nullopt;
            return best_by([](const SidecarRow&) { return 0.0; },
                           [&](const SidecarRow& r) { return r.brand == *sidecar.top_brand; });
        case Strategy::discount_chaser:
            return best_by([](const SidecarRow& r) { return r.features.discount; }, any);
    }
    return std::nullopt;
}

}  // namespace malles
