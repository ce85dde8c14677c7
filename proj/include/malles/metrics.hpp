#pragma once

#include <cstdint>
#include <iosfwd>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include "malles/data_model.hpp"

namespace malles {

struct GroundTruth {
    std::string instance_id;
    std::string customer_id;
    std::string product_id;
    std::int64_t quantity = 0;
    std::string category;
    std::string income_bracket;
    double discount = 0.0;
};

struct Prediction {
    std::string instance_id;
    bool valid = false;
    bool buy = false;
    std::optional<std::string> product_id;
    std::int64_t quantity = 0;
    /// Quantities of the valid repeated samples, no purchase counted as 0.
    std::vector<double> samples;
    /// Cost proxy: chat calls spent on the instance.
    double time_cost = 0.0;
};

struct EvalInstance {
    GroundTruth truth;
    Prediction prediction;
};

/// Hits over all instances; invalid predictions are misses. Throws when no
/// prediction is valid.
double hit_rate(const std::vector<EvalInstance>& instances);
/// Mean of |q_hat - q| / max(q, 1) over valid purchase predictions.
double quantity_error(const std::vector<EvalInstance>& instances);
/// Mean over instances of sample variance / max(sample mean, 1). Every
/// instance needs at least two samples.
double stability(const std::vector<std::vector<double>>& samples_per_instance);
/// Min-max scaling; all-equal input maps to zeros.
std::vector<double> normalize_time_costs(const std::vector<double>& values);

struct RunReport {
    std::string label;
    std::string config_id;
    std::size_t n = 0;
    std::size_t n_valid = 0;
    std::size_t n_invalid = 0;
    double hit_rate = 0.0;
    std::optional<double> quantity_error;
    std::optional<double> stability;
    /// Mean squared quantity error over valid predictions, no purchase as 0.
    double loss_squared = 0.0;
    /// 1 - hit_rate.
    double loss_zero_one = 0.0;
    double time_cost_raw = 0.0;
    std::optional<double> time_cost_normalized;
    bool ood = false;
    std::vector<std::string> categories;
};

/// Aligns predictions with ground truth by instance id. Throws naming the
/// first id present on one side only.
std::vector<EvalInstance> align_instances(const std::vector<Prediction>& predictions,
                                          const std::vector<GroundTruth>& truth);

RunReport evaluate_run(const std::vector<Prediction>& predictions, const std::vector<GroundTruth>& truth,
                       const std::string& label = "run", const std::string& config_id = {}, bool ood = false);

struct OodComparison {
    RunReport train;
    RunReport test;
    double delta_hit_rate = 0.0;
    std::optional<double> delta_quantity_error;
    std::optional<double> delta_stability;
    std::set<std::string> train_categories;
    std::set<std::string> test_categories;
};

/// Deltas are test minus train; time costs are normalized across the pair.
OodComparison ood_report(const RunReport& train, const RunReport& test, const OodSplit& split);

void write_report_json(std::ostream& out, const RunReport& report);
void write_report_md(std::ostream& out, const std::vector<RunReport>& reports);
void write_ood_json(std::ostream& out, const OodComparison& cmp);

void write_truth_jsonl(std::ostream& out, const std::vector<GroundTruth>& truth);
std::vector<GroundTruth> read_truth_jsonl(std::istream& in);
/// Reads the prediction fields of episodes.jsonl lines.
std::vector<Prediction> read_predictions_jsonl(std::istream& in);

}  // namespace malles
