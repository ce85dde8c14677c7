#pragma once

#include <iosfwd>
#include <map>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "malles/agent_backend.hpp"

namespace malles {

struct BinningConfig {
    /// Outcome buckets 0..buckets-2 plus a tail bucket for larger quantities.
    std::size_t buckets = 11;
    double smoothing = 1.0;
    std::size_t min_count = 5;
    /// Discount levels below cuts[0], below cuts[1], and the rest.
    std::pair<double, double> discount_cuts{0.1, 0.2};

    void validate() const;
};

/// One observed or simulated outcome with its conditioning features.
struct CalibrationSample {
    std::string category;
    std::string income_bracket;
    double discount = 0.0;
    double quantity = 0.0;
};

std::string bin_key(const CalibrationSample& sample, const BinningConfig& config);
std::size_t outcome_bucket(double quantity, std::size_t buckets);

struct Histogram {
    std::vector<double> p;
    std::size_t count = 0;
    bool low_confidence = false;
};

struct ConditionalHistogram {
    std::map<std::string, Histogram> bins;
    BinningConfig config;
};

ConditionalHistogram estimate_conditional(const std::vector<CalibrationSample>& samples,
                                          const BinningConfig& config = {});

/// Sum of p log(p / q) in nats. Throws on size mismatch or q <= 0 where p > 0.
double kl_divergence(const std::vector<double>& p, const std::vector<double>& q);

/// Monotone piecewise-linear map; slope 1 outside the knot range.
class PiecewiseLinearMap {
public:
    PiecewiseLinearMap() = default;
    explicit PiecewiseLinearMap(std::vector<std::pair<double, double>> knots);
    static PiecewiseLinearMap identity();

    double operator()(double x) const;
    const std::vector<std::pair<double, double>>& knots() const { return knots_; }
    bool is_identity(double tolerance = 1e-9) const;

private:
    std::vector<std::pair<double, double>> knots_;
};

/// Treats each bucket as uniform mass on [j - 0.5, j + 0.5] and pushes it
/// through `f`; mass leaving the range lands in the end buckets.
std::vector<double> pushforward(const std::vector<double>& p, const PiecewiseLinearMap& f);

/// Quantile map y = F_real^-1(F_sim(x)) on the piecewise-uniform CDFs.
PiecewiseLinearMap quantile_map(const std::vector<double>& p_sim, const std::vector<double>& p_real);

struct BinFit {
    PiecewiseLinearMap map;
    double kl_identity = 0.0;
    double kl_fitted = 0.0;
    /// The fitted map did worse than identity and was replaced.
    bool identity_fallback = false;
};

struct CalibrationMap {
    std::map<std::string, BinFit> bins;
    BinningConfig config;

    const PiecewiseLinearMap* map_for(const std::string& key) const;
};

CalibrationMap fit_calibration(const ConditionalHistogram& sim, const ConditionalHistogram& real);

/// Maps the quantity of a purchase through f and rounds it; the selection is
/// kept, so a purchase never drops below one unit.
RetailDecision apply_calibration(const PiecewiseLinearMap& f, const RetailDecision& decision);
RetailDecision apply_calibration(const CalibrationMap& f, const std::string& bin, const RetailDecision& decision);

struct ReweightTable {
    std::map<std::string, double> weights;
    double w_min = 0.2;
    double w_max = 5.0;
    /// Sum over bins of P_sim(bin) * w(bin).
    double expectation_sim = 0.0;
};

/// Ratios of bin probabilities, clipped.
ReweightTable reweight_marginals(const std::map<std::string, double>& p_real,
                                 const std::map<std::string, double>& p_sim, double w_min = 0.2, double w_max = 5.0);
/// Bin probabilities from counts with the histogram smoothing.
ReweightTable reweight(const ConditionalHistogram& real, const ConditionalHistogram& sim, double w_min = 0.2,
                       double w_max = 5.0);

struct FeedbackSignal {
    std::string kpi;
    double observed = 0.0;
    double baseline = 0.0;
    /// Signed relative deviation (v - b) / max(|b|, eps).
    double deviation = 0.0;
    double threshold = 0.0;
};

/// Signals for KPIs whose relative deviation is strictly above their threshold,
/// ordered by KPI name. `thresholds` may name only known KPIs.
std::vector<FeedbackSignal> detect_bottleneck(const std::map<std::string, double>& kpis,
                                              const std::map<std::string, double>& baseline,
                                              const std::map<std::string, double>& thresholds,
                                              double default_threshold = 0.15, double eps = 1e-9);

enum class Aggregation { sum, mean };

struct TargetNode {
    std::string name;
    double target = 0.0;
    double tolerance = 0.0;
    Aggregation aggregation = Aggregation::sum;
    std::vector<TargetNode> children;
    std::optional<double> achieved;
};

/// Splits `parent` into children with target and tolerance scaled by share.
TargetNode decompose_targets(const TargetNode& parent, const std::vector<std::pair<std::string, double>>& shares);

/// Moves each signalled node's target toward the observed value by
/// r = r0 * decay^iteration, then recomputes parent aggregates.
TargetNode feedback_adjust(const TargetNode& root, const std::vector<FeedbackSignal>& signals, int iteration,
                           double r0 = 0.5, double decay = 0.5);

double generalization_gain_lower_bound(double d_model, double n_target, double n_full, double lambda,
                                       double r_transfer);

void write_calibration_json(std::ostream& out, const CalibrationMap& map, const ReweightTable& weights);
void write_kpi_report_json(std::ostream& out, const std::map<std::string, double>& kpis,
                           const std::map<std::string, double>& baseline,
                           const std::map<std::string, double>& thresholds,
                           const std::vector<FeedbackSignal>& signals);

}  // namespace malles
