#pragma once

#include <functional>
#include <iosfwd>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "malles/data_model.hpp"
#include "malles/prompt_builder.hpp"

namespace malles {

struct WindowConfig {
    /// Window length in months.
    int window = 3;
    /// Damping: mu' = (1 - eta) * mu + eta * nu.
    double eta = 0.5;

    void validate() const;
};

struct WindowAverage {
    double value = 0.0;
    /// No months with data before as_of_month.
    bool empty = false;
};

/// Mean of the W monthly totals before `as_of_month`; missing months are 0.
WindowAverage window_average(const std::vector<std::pair<MonthIndex, std::int64_t>>& series, int window,
                             MonthIndex as_of_month);

struct MeanFieldState {
    int iteration = 0;
    /// Mean quantity per purchase, per category.
    std::map<std::string, double> mean_quantity;
    /// category -> product -> selection share.
    std::map<std::string, std::map<std::string, double>> shares;

    void validate() const;
    friend bool operator==(const MeanFieldState&, const MeanFieldState&) = default;
};

/// Sup-norm over every mean and share component.
double sup_distance(const MeanFieldState& a, const MeanFieldState& b);

/// Aggregates purchases in the W months before `as_of_month`. Shares are
/// quantity shares over each category's catalog products with additive
/// smoothing.
MeanFieldState init_meanfield(const std::vector<TransactionRecord>& transactions, const Catalog& catalog, int window,
                              MonthIndex as_of_month, double share_smoothing = 1.0);

/// One decision of a batch. Aggregate mocks may report fractional quantities.
struct BatchDecision {
    std::string category;
    std::optional<std::string> product_id;
    double quantity = 0.0;
};

/// Raw aggregate of a batch. Categories absent from the batch keep `prior`'s
/// components.
MeanFieldState aggregate_batch(const std::vector<BatchDecision>& batch, const Catalog& catalog,
                               const MeanFieldState& prior, double share_smoothing = 1.0);

using BatchRunner = std::function<std::vector<BatchDecision>(const MeanFieldState&)>;

MeanFieldState meanfield_step(const MeanFieldState& mu, const BatchRunner& runner, const WindowConfig& config,
                              const Catalog& catalog, double share_smoothing = 1.0);

struct MeanFieldRun {
    MeanFieldState final_state;
    std::vector<MeanFieldState> trajectory;
    /// deltas[t] = sup_distance(trajectory[t], trajectory[t + 1]).
    std::vector<double> deltas;
    bool converged = false;
};

MeanFieldRun run_meanfield(const WindowConfig& config, const MeanFieldState& mu0, const BatchRunner& runner,
                           double tol, int max_iter, const Catalog& catalog, double share_smoothing = 1.0);

/// Prompt context for an iteration with the top `top_k` shares per category.
MarketField to_market_field(const MeanFieldState& mu, std::size_t top_k = 3);

void write_trajectory_jsonl(std::ostream& out, const MeanFieldRun& run);

}  // namespace malles
