#include "malles/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <istream>
#include <map>
#include <ostream>

#include <nlohmann/json.hpp>

namespace malles {

using nlohmann::json;

double hit_rate(const std::vector<EvalInstance>& instances) {
    std::size_t hits = 0;
    std::size_t valid = 0;
    for (const auto& i : instances) {
        if (!i.prediction.valid) continue;
        ++valid;
        if (i.prediction.buy && i.prediction.product_id == i.truth.product_id) ++hits;
    }
    if (valid == 0) throw InvalidArgument("hit rate needs at least one valid prediction");
    return static_cast<double>(hits) / static_cast<double>(instances.size());
}

double quantity_error(const std::vector<EvalInstance>& instances) {
    double total = 0.0;
    std::size_t n = 0;
    for (const auto& i : instances) {
        if (!i.prediction.valid || !i.prediction.buy) continue;
        const double q = static_cast<double>(i.truth.quantity);
        total += std::abs(static_cast<double>(i.prediction.quantity) - q) / std::max(q, 1.0);
        ++n;
    }
    if (n == 0) throw InvalidArgument("quantity error needs at least one valid purchase prediction");
    return total / static_cast<double>(n);
}

double stability(const std::vector<std::vector<double>>& samples_per_instance) {
    if (samples_per_instance.empty()) throw InvalidArgument("stability needs at least one instance");
    double total = 0.0;
    for (const auto& s : samples_per_instance) {
        if (s.size() < 2) throw InvalidArgument("stability needs K >= 2 samples per instance");
        double mean = 0.0;
        for (double v : s) mean += v;
        mean /= static_cast<double>(s.size());
        double ss = 0.0;
        for (double v : s) ss += (v - mean) * (v - mean);
        total += ss / static_cast<double>(s.size() - 1) / std::max(mean, 1.0);
    }
    return total / static_cast<double>(samples_per_instance.size());
}

std::vector<double> normalize_time_costs(const std::vector<double>& values) {
    if (values.empty()) return {};
    const auto [lo, hi] = std::minmax_element(values.begin(), values.end());
    std::vector<double> out;
    out.reserve(values.size());
    const double range = *hi - *lo;
    for (double v : values) out.push_back(range > 0.0 ? (v - *lo) / range : 0.0);
    return out;
}

std::vector<EvalInstance> align_instances(const std::vector<Prediction>& predictions,
                                          const std::vector<GroundTruth>& truth) {
    if (predictions.empty()) throw InvalidArgument("no predictions to evaluate");
    std::map<std::string, const GroundTruth*> by_id;
    for (const auto& t : truth)
        if (!by_id.emplace(t.instance_id, &t).second) throw DataError("duplicate truth id: " + t.instance_id);
    std::map<std::string, const Prediction*> preds;
    for (const auto& p : predictions) {
        if (!by_id.count(p.instance_id)) throw DataError("instance id mismatch: " + p.instance_id);
        if (!preds.emplace(p.instance_id, &p).second) throw DataError("duplicate prediction id: " + p.instance_id);
    }
    for (const auto& [id, t] : by_id)
        if (!preds.count(id)) throw DataError("instance id mismatch: " + id);
    std::vector<EvalInstance> out;
    out.reserve(preds.size());
    for (const auto& [id, p] : preds) out.push_back({*by_id.at(id), *p});
    return out;
}

RunReport evaluate_run(const std::vector<Prediction>& predictions, const std::vector<GroundTruth>& truth,
                       const std::string& label, const std::string& config_id, bool ood) {
    const auto instances = align_instances(predictions, truth);
    RunReport r;
    r.label = label;
    r.config_id = config_id;
    r.ood = ood;
    r.n = instances.size();
    std::set<std::string> cats;
    std::vector<std::vector<double>> samples;
    double squared = 0.0;
    for (const auto& i : instances) {
        cats.insert(i.truth.category);
        r.time_cost_raw += i.prediction.time_cost;
        if (!i.prediction.valid) {
            ++r.n_invalid;
            continue;
        }
        ++r.n_valid;
        const double q_hat = i.prediction.buy ? static_cast<double>(i.prediction.quantity) : 0.0;
        const double d = q_hat - static_cast<double>(i.truth.quantity);
        squared += d * d;
        if (i.prediction.samples.size() >= 2) samples.push_back(i.prediction.samples);
    }
    r.categories.assign(cats.begin(), cats.end());
    r.hit_rate = hit_rate(instances);
    r.loss_zero_one = 1.0 - r.hit_rate;
    r.loss_squared = squared / static_cast<double>(r.n_valid);
    const bool any_purchase = std::any_of(instances.begin(), instances.end(),
                                          [](const auto& i) { return i.prediction.valid && i.prediction.buy; });
    if (any_purchase) r.quantity_error = quantity_error(instances);
    if (!samples.empty()) r.stability = stability(samples);
    return r;
}

OodComparison ood_report(const RunReport& train, const RunReport& test, const OodSplit& split) {
    if (train.config_id != test.config_id) throw InvalidArgument("reports come from different configurations");
    OodComparison c;
    c.train = train;
    c.test = test;
    c.delta_hit_rate = test.hit_rate - train.hit_rate;
    if (train.quantity_error && test.quantity_error) c.delta_quantity_error = *test.quantity_error - *train.quantity_error;
    if (train.stability && test.stability) c.delta_stability = *test.stability - *train.stability;
    const auto norm = normalize_time_costs({train.time_cost_raw, test.time_cost_raw});
    c.train.time_cost_normalized = norm[0];
    c.test.time_cost_normalized = norm[1];
    c.train_categories = split.train_categories;
    c.test_categories = split.test_categories;
    return c;
}

namespace {

json optional_number(const std::optional<double>& v) { return v ? json(*v) : json(nullptr); }

json report_object(const RunReport& r) {
    return {{"label", r.label},
            {"config_id", r.config_id},
            {"n", r.n},
            {"n_valid", r.n_valid},
            {"n_invalid", r.n_invalid},
            {"hit_rate", r.hit_rate},
            {"quantity_error", optional_number(r.quantity_error)},
            {"stability", optional_number(r.stability)},
            {"loss_squared", r.loss_squared},
            {"loss_zero_one", r.loss_zero_one},
            {"time_cost_raw", r.time_cost_raw},
            {"time_cost_normalized", optional_number(r.time_cost_normalized)},
            {"ood", r.ood},
            {"categories", r.categories}};
}

std::string cell(const std::optional<double>& v) { return v ? format_double(std::round(*v * 1e4) / 1e4) : "n/a"; }

}  // namespace

void write_report_json(std::ostream& out, const RunReport& report) { out << report_object(report).dump(2) << '\n'; }

void write_report_md(std::ostream& out, const std::vector<RunReport>& reports) {
    out << "| Metric |";
    for (const auto& r : reports) out << ' ' << r.label << " |";
    out << "\n|---|";
    for (std::size_t i = 0; i < reports.size(); ++i) out << "---|";
    out << "\n| Hit Rate |";
    for (const auto& r : reports) out << ' ' << cell(r.hit_rate) << " |";
    out << "\n| Quantity Error |";
    for (const auto& r : reports) out << ' ' << cell(r.quantity_error) << " |";
    out << "\n| Stability |";
    for (const auto& r : reports) out << ' ' << cell(r.stability) << " |";
    out << "\n\nInstances:";
    for (const auto& r : reports) out << ' ' << r.label << ' ' << r.n << " (" << r.n_invalid << " invalid)";
    out << '\n';
}

void write_ood_json(std::ostream& out, const OodComparison& c) {
    json j;
    j["train"] = report_object(c.train);
    j["test"] = report_object(c.test);
    j["delta"] = {{"hit_rate", c.delta_hit_rate},
                  {"quantity_error", optional_number(c.delta_quantity_error)},
                  {"stability", optional_number(c.delta_stability)}};
    j["train_categories"] = c.train_categories;
    j["test_categories"] = c.test_categories;
    out << j.dump(2) << '\n';
}

void write_truth_jsonl(std::ostream& out, const std::vector<GroundTruth>& truth) {
    for (const auto& t : truth)
        out << json{{"instance_id", t.instance_id},
                    {"customer_id", t.customer_id},
                    {"product_id", t.product_id},
                    {"quantity", t.quantity},
                    {"category", t.category},
                    {"income_bracket", t.income_bracket},
                    {"discount", t.discount}}
                   .dump()
            << '\n';
}

std::vector<GroundTruth> read_truth_jsonl(std::istream& in) {
    std::vector<GroundTruth> out;
    std::string line;
    std::size_t row = 0;
    while (std::getline(in, line)) {
        ++row;
        if (trim(line).empty()) continue;
        try {
            const auto j = json::parse(line);
            GroundTruth t;
            t.instance_id = j.at("instance_id").get<std::string>();
            t.customer_id = j.value("customer_id", "");
            t.product_id = j.at("product_id").get<std::string>();
            t.quantity = j.at("quantity").get<std::int64_t>();
            t.category = j.value("category", "");
            t.income_bracket = j.value("income_bracket", "unknown");
            t.discount = j.value("discount", 0.0);
            if (t.quantity < 1) throw DataError("ground-truth quantity must be >= 1");
            out.push_back(std::move(t));
        } catch (const json::exception& e) {
            throw DataError("truth row " + std::to_string(row) + ": " + e.what());
        }
    }
    return out;
}

std::vector<Prediction> read_predictions_jsonl(std::istream& in) {
    std::vector<Prediction> out;
    std::string line;
    std::size_t row = 0;
    while (std::getline(in, line)) {
        ++row;
        if (trim(line).empty()) continue;
        try {
            const auto j = json::parse(line);
            Prediction p;
            p.instance_id = j.at("instance_id").get<std::string>();
            p.valid = j.value("valid", false);
            p.buy = j.value("buy", false);
            if (j.contains("product_id") && j["product_id"].is_string()) p.product_id = j["product_id"].get<std::string>();
            p.quantity = j.value("quantity", std::int64_t{0});
            if (j.contains("sample_quantities"))
                for (const auto& v : j["sample_quantities"]) p.samples.push_back(v.get<double>());
            p.time_cost = j.value("chat_calls", 0.0);
            out.push_back(std::move(p));
        } catch (const json::exception& e) {
            throw DataError("episode row " + std::to_string(row) + ": " + e.what());
        }
    }
    return out;
}

}  // namespace malles
