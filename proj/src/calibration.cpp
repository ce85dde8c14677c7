#include "malles/calibration.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <ostream>

#include <nlohmann/json.hpp>

namespace malles {

void BinningConfig::validate() const {
    if (buckets < 2) throw InvalidArgument("need at least 2 outcome buckets");
    if (!(smoothing >= 0.0)) throw InvalidArgument("smoothing must be >= 0");
    if (!(discount_cuts.first <= discount_cuts.second)) throw InvalidArgument("discount cuts must be ordered");
}

std::string bin_key(const CalibrationSample& s, const BinningConfig& config) {
    const char* level = s.discount < config.discount_cuts.first    ? "t0"
                        : s.discount < config.discount_cuts.second ? "t1"
                                                                   : "t2";
    return s.category + '|' + s.income_bracket + '|' + level;
}

std::size_t outcome_bucket(double quantity, std::size_t buckets) {
    if (!(quantity >= 0.0)) throw InvalidArgument("quantity must be >= 0");
    const auto q = static_cast<std::size_t>(std::llround(quantity));
    return std::min(q, buckets - 1);
}

ConditionalHistogram estimate_conditional(const std::vector<CalibrationSample>& samples, const BinningConfig& config) {
    config.validate();
    if (samples.empty()) throw InvalidArgument("no samples to estimate from");
    std::map<std::string, std::vector<double>> counts;
    for (const auto& s : samples) {
        auto& c = counts[bin_key(s, config)];
        c.resize(config.buckets, 0.0);
        c[outcome_bucket(s.quantity, config.buckets)] += 1.0;
    }
    ConditionalHistogram out;
    out.config = config;
    for (const auto& [key, c] : counts) {
        double n = 0.0;
        for (double v : c) n += v;
        Histogram h;
        h.count = static_cast<std::size_t>(n);
        h.low_confidence = h.count < config.min_count;
        const double denom = n + config.smoothing * static_cast<double>(config.buckets);
        for (double v : c) h.p.push_back((v + config.smoothing) / denom);
        out.bins.emplace(key, std::move(h));
    }
    return out;
}

double kl_divergence(const std::vector<double>& p, const std::vector<double>& q) {
    if (p.size() != q.size()) throw InvalidArgument("distribution sizes differ");
    double kl = 0.0;
    for (std::size_t i = 0; i < p.size(); ++i) {
        if (p[i] <= 0.0) continue;
        if (!(q[i] > 0.0)) throw InvalidArgument("reference distribution has zero mass where P does not");
        kl += p[i] * std::log(p[i] / q[i]);
    }
    return std::max(0.0, kl);
}

// ---------------------------------------------------------------------------

PiecewiseLinearMap::PiecewiseLinearMap(std::vector<std::pair<double, double>> knots) : knots_(std::move(knots)) {
    for (std::size_t i = 1; i < knots_.size(); ++i) {
        if (!(knots_[i].first > knots_[i - 1].first)) throw InvalidArgument("knot x values must increase");
        if (knots_[i].second < knots_[i - 1].second) throw InvalidArgument("map must be non-decreasing");
    }
}

PiecewiseLinearMap PiecewiseLinearMap::identity() { return PiecewiseLinearMap(); }

double PiecewiseLinearMap::operator()(double x) const {
    if (knots_.empty()) return x;
    if (x <= knots_.front().first) return knots_.front().second + (x - knots_.front().first);
    if (x >= knots_.back().first) return knots_.back().second + (x - knots_.back().first);
    const auto it = std::upper_bound(knots_.begin(), knots_.end(), x,
                                     [](double v, const auto& k) { return v < k.first; });
    const auto& [x1, y1] = *it;
    const auto& [x0, y0] = *(it - 1);
    return y0 + (y1 - y0) * (x - x0) / (x1 - x0);
}

bool PiecewiseLinearMap::is_identity(double tolerance) const {
    return std::all_of(knots_.begin(), knots_.end(),
                       [&](const auto& k) { return std::abs(k.first - k.second) <= tolerance; });
}

namespace {

double edge(std::size_t j) { return static_cast<double>(j) - 0.5; }

std::vector<double> cumulative(const std::vector<double>& p) {
    std::vector<double> c(p.size() + 1, 0.0);
    for (std::size_t i = 0; i < p.size(); ++i) c[i + 1] = c[i] + p[i];
    const double total = c.back();
    for (auto& v : c) v /= total;
    return c;
}

double cdf(const std::vector<double>& c, double x) {
    const std::size_t b = c.size() - 1;
    if (x <= edge(0)) return 0.0;
    if (x >= edge(b)) return 1.0;
    const auto k = static_cast<std::size_t>(std::floor(x - edge(0)));
    return c[k] + (c[k + 1] - c[k]) * (x - edge(k));
}

double inverse_cdf(const std::vector<double>& c, double u) {
    const std::size_t b = c.size() - 1;
    for (std::size_t k = 0; k < b; ++k) {
        const double mass = c[k + 1] - c[k];
        if (mass <= 0.0) continue;
        if (u <= c[k + 1] || k + 1 == b) return std::clamp(edge(k) + (u - c[k]) / mass, edge(k), edge(k + 1));
    }
    return edge(b);
}

}  // namespace

std::vector<double> pushforward(const std::vector<double>& p, const PiecewiseLinearMap& f) {
    const std::size_t b = p.size();
    std::vector<double> out(b, 0.0);
    auto bucket_of = [&](double y) {
        if (y < edge(1)) return std::size_t{0};
        if (y >= edge(b - 1)) return b - 1;
        return static_cast<std::size_t>(std::floor(y - edge(0)));
    };
    auto deposit = [&](double ya, double yb, double mass) {
        if (yb - ya <= 1e-15) {
            out[bucket_of(ya)] += mass;
            return;
        }
        for (std::size_t k = 0; k < b; ++k) {
            const double lo = k == 0 ? -std::numeric_limits<double>::infinity() : edge(k);
            const double hi = k + 1 == b ? std::numeric_limits<double>::infinity() : edge(k + 1);
            const double overlap = std::min(yb, hi) - std::max(ya, lo);
            if (overlap > 0.0) out[k] += mass * overlap / (yb - ya);
        }
    };
    for (std::size_t j = 0; j < b; ++j) {
        if (p[j] <= 0.0) continue;
        std::vector<double> cuts{edge(j)};
        for (const auto& [x, y] : f.knots())
            if (x > edge(j) && x < edge(j + 1)) cuts.push_back(x);
        cuts.push_back(edge(j + 1));
        for (std::size_t s = 0; s + 1 < cuts.size(); ++s)
            deposit(f(cuts[s]), f(cuts[s + 1]), p[j] * (cuts[s + 1] - cuts[s]));
    }
    return out;
}

PiecewiseLinearMap quantile_map(const std::vector<double>& p_sim, const std::vector<double>& p_real) {
    if (p_sim.size() != p_real.size() || p_sim.size() < 2) throw InvalidArgument("histogram sizes differ");
    double sim_total = 0.0, real_total = 0.0;
    for (double v : p_sim) sim_total += v;
    for (double v : p_real) real_total += v;
    if (!(sim_total > 0.0)) throw InvalidArgument("bin with zero simulated mass");
    if (!(real_total > 0.0)) throw InvalidArgument("bin with zero real mass");
    const auto cs = cumulative(p_sim);
    const auto cr = cumulative(p_real);
    const std::size_t b = p_sim.size();

    std::vector<double> xs;
    for (std::size_t j = 0; j <= b; ++j) xs.push_back(edge(j));
    for (std::size_t k = 1; k < b; ++k) xs.push_back(inverse_cdf(cs, cr[k]));
    std::sort(xs.begin(), xs.end());
    std::vector<std::pair<double, double>> knots;
    for (double x : xs) {
        if (!knots.empty() && x - knots.back().first <= 1e-12) continue;
        double y = inverse_cdf(cr, cdf(cs, x));
        if (!knots.empty()) y = std::max(y, knots.back().second);
        knots.emplace_back(x, y);
    }
    return PiecewiseLinearMap(std::move(knots));
}

const PiecewiseLinearMap* CalibrationMap::map_for(const std::string& key) const {
    const auto it = bins.find(key);
    return it == bins.end() ? nullptr : &it->second.map;
}

CalibrationMap fit_calibration(const ConditionalHistogram& sim, const ConditionalHistogram& real) {
    CalibrationMap out;
    out.config = sim.config;
    for (const auto& [key, hs] : sim.bins) {
        const auto it = real.bins.find(key);
        if (it == real.bins.end()) throw InvalidArgument("bin " + key + " has no real histogram");
        const auto& hr = it->second;
        BinFit fit;
        fit.kl_identity = kl_divergence(hr.p, hs.p);
        fit.map = quantile_map(hs.p, hr.p);
        try {
            fit.kl_fitted = kl_divergence(hr.p, pushforward(hs.p, fit.map));
        } catch (const InvalidArgument&) {
            fit.kl_fitted = std::numeric_limits<double>::infinity();
        }
        if (!(fit.kl_fitted <= fit.kl_identity)) {
            fit.map = PiecewiseLinearMap::identity();
            fit.kl_fitted = fit.kl_identity;
            fit.identity_fallback = true;
        }
        out.bins.emplace(key, std::move(fit));
    }
    for (const auto& [key, h] : real.bins)
        if (!sim.bins.count(key)) throw InvalidArgument("bin " + key + " has no simulated histogram");
    return out;
}

RetailDecision apply_calibration(const PiecewiseLinearMap& f, const RetailDecision& decision) {
    if (!decision.buy) return decision;
    if (decision.quantity < 0) throw InvalidArgument("quantity must be >= 0");
    RetailDecision out = decision;
    const double y = std::max(0.0, f(static_cast<double>(decision.quantity)));
    out.quantity = std::max<std::int64_t>(1, std::llround(y));
    return out;
}

RetailDecision apply_calibration(const CalibrationMap& f, const std::string& bin, const RetailDecision& decision) {
    const auto* m = f.map_for(bin);
    return m ? apply_calibration(*m, decision) : decision;
}

ReweightTable reweight_marginals(const std::map<std::string, double>& p_real,
                                 const std::map<std::string, double>& p_sim, double w_min, double w_max) {
    if (!(w_min > 0.0 && w_min <= w_max)) throw InvalidArgument("bad weight clipping range");
    ReweightTable t;
    t.w_min = w_min;
    t.w_max = w_max;
    for (const auto& [key, ps] : p_sim) {
        const auto it = p_real.find(key);
        const double pr = it == p_real.end() ? 0.0 : it->second;
        const double w = ps > 0.0 ? std::clamp(pr / ps, w_min, w_max) : w_max;
        t.weights[key] = w;
        t.expectation_sim += ps * w;
    }
    return t;
}

ReweightTable reweight(const ConditionalHistogram& real, const ConditionalHistogram& sim, double w_min,
                       double w_max) {
    std::set<std::string> keys;
    for (const auto& [k, h] : real.bins) keys.insert(k);
    for (const auto& [k, h] : sim.bins) keys.insert(k);
    auto marginal = [&](const ConditionalHistogram& hist) {
        double n = 0.0;
        for (const auto& [k, h] : hist.bins) n += static_cast<double>(h.count);
        const double s = hist.config.smoothing;
        const double denom = n + s * static_cast<double>(keys.size());
        std::map<std::string, double> p;
        for (const auto& k : keys) {
            const auto it = hist.bins.find(k);
            const double c = it == hist.bins.end() ? 0.0 : static_cast<double>(it->second.count);
            p[k] = (c + s) / denom;
        }
        return p;
    };
    return reweight_marginals(marginal(real), marginal(sim), w_min, w_max);
}

// ---------------------------------------------------------------------------

std::vector<FeedbackSignal> detect_bottleneck(const std::map<std::string, double>& kpis,
                                              const std::map<std::string, double>& baseline,
                                              const std::map<std::string, double>& thresholds,
                                              double default_threshold, double eps) {
    for (const auto& [name, d] : thresholds)
        if (!kpis.count(name)) throw InvalidArgument("unknown KPI in thresholds: " + name);
    std::vector<FeedbackSignal> out;
    for (const auto& [name, v] : kpis) {
        const auto bt = baseline.find(name);
        if (bt == baseline.end()) throw InvalidArgument("no baseline for KPI " + name);
        const auto tt = thresholds.find(name);
        const double delta = tt == thresholds.end() ? default_threshold : tt->second;
        const double b = bt->second;
        const double dev = (v - b) / std::max(std::abs(b), eps);
        if (std::abs(dev) > delta) out.push_back({name, v, b, dev, delta});
    }
    return out;
}

TargetNode decompose_targets(const TargetNode& parent, const std::vector<std::pair<std::string, double>>& shares) {
    if (shares.empty()) throw InvalidArgument("no shares");
    double total = 0.0;
    for (const auto& [name, s] : shares) {
        if (!(s >= 0.0)) throw InvalidArgument("share must be >= 0");
        total += s;
    }
    if (std::abs(total - 1.0) > 1e-9) throw InvalidArgument("shares must sum to 1");
    TargetNode out = parent;
    out.aggregation = Aggregation::sum;
    out.children.clear();
    for (const auto& [name, s] : shares) {
        TargetNode c;
        c.name = name;
        c.target = parent.target * s;
        c.tolerance = parent.tolerance * s;
        out.children.push_back(std::move(c));
    }
    return out;
}

namespace {

void set_target(TargetNode& node, double value) {
    if (!node.children.empty()) {
        if (node.aggregation == Aggregation::sum) {
            const double old = node.target;
            for (auto& c : node.children)
                set_target(c, old != 0.0 ? c.target * value / old : value / static_cast<double>(node.children.size()));
        } else {
            for (auto& c : node.children) set_target(c, c.target + (value - node.target));
        }
    }
    node.target = value;
}

void adjust(TargetNode& node, const std::map<std::string, double>& observed, double r) {
    for (auto& c : node.children) adjust(c, observed, r);
    if (!node.children.empty()) {
        double total = 0.0;
        for (const auto& c : node.children) total += c.target;
        node.target = node.aggregation == Aggregation::sum ? total : total / static_cast<double>(node.children.size());
    }
    if (const auto it = observed.find(node.name); it != observed.end())
        set_target(node, node.target + r * (it->second - node.target));
}

}  // namespace

TargetNode feedback_adjust(const TargetNode& root, const std::vector<FeedbackSignal>& signals, int iteration,
                           double r0, double decay) {
    if (iteration < 0) throw InvalidArgument("iteration must be >= 0");
    TargetNode out = root;
    if (signals.empty()) return out;
    std::map<std::string, double> observed;
    for (const auto& s : signals) observed[s.kpi] = s.observed;
    adjust(out, observed, r0 * std::pow(decay, iteration));
    return out;
}

double generalization_gain_lower_bound(double d_model, double n_target, double n_full, double lambda,
                                       double r_transfer) {
    if (!(n_target >= 1.0)) throw InvalidArgument("n_target must be >= 1");
    if (!(n_full >= n_target)) throw InvalidArgument("n_full must be >= n_target");
    if (!(d_model >= 1.0)) throw InvalidArgument("d_model must be >= 1");
    if (!(lambda >= 0.0) || !(r_transfer >= 0.0)) throw InvalidArgument("lambda and R_transfer must be >= 0");
    return std::sqrt(d_model / n_target) - std::sqrt(d_model / n_full) + lambda * r_transfer;
}

void write_calibration_json(std::ostream& out, const CalibrationMap& map, const ReweightTable& weights) {
    nlohmann::json j;
    j["config"] = {{"buckets", map.config.buckets},
                   {"smoothing", map.config.smoothing},
                   {"min_count", map.config.min_count},
                   {"discount_cuts", {map.config.discount_cuts.first, map.config.discount_cuts.second}},
                   {"w_min", weights.w_min},
                   {"w_max", weights.w_max}};
    nlohmann::json bins = nlohmann::json::object();
    for (const auto& [key, fit] : map.bins) {
        nlohmann::json knots = nlohmann::json::array();
        for (const auto& [x, y] : fit.map.knots()) knots.push_back({x, y});
        bins[key] = {{"knots", knots},
                     {"kl_identity", fit.kl_identity},
                     {"kl_fitted", fit.kl_fitted},
                     {"identity_fallback", fit.identity_fallback}};
    }
    j["bins"] = bins;
    j["reweight"] = weights.weights;
    j["reweight_expectation_sim"] = weights.expectation_sim;
    out << j.dump(2) << '\n';
}

void write_kpi_report_json(std::ostream& out, const std::map<std::string, double>& kpis,
                           const std::map<std::string, double>& baseline,
                           const std::map<std::string, double>& thresholds,
                           const std::vector<FeedbackSignal>& signals) {
    nlohmann::json j;
    j["kpis"] = kpis;
    j["baselines"] = baseline;
    j["thresholds"] = thresholds;
    nlohmann::json s = nlohmann::json::array();
    for (const auto& sig : signals)
        s.push_back({{"kpi", sig.kpi},
                     {"observed", sig.observed},
                     {"baseline", sig.baseline},
                     {"deviation", sig.deviation},
                     {"threshold", sig.threshold}});
    j["signals"] = s;
    out << j.dump(2) << '\n';
}

}  // namespace malles
