#include <gtest/gtest.h>

#include <cmath>
#include <random>
#include <sstream>

#include <nlohmann/json.hpp>

#include "malles/calibration.hpp"

using namespace malles;

namespace {

double ref_kl(const std::vector<double>& p, const std::vector<double>& q) {
    double s = 0;
    for (std::size_t i = 0; i < p.size(); ++i)
        if (p[i] > 0) s += p[i] * (std::log(p[i]) - std::log(q[i]));
    return s;
}

std::vector<double> smoothed(std::vector<double> counts, double s = 1.0) {
    double n = 0;
    for (double c : counts) n += c;
    for (double& c : counts) c = (c + s) / (n + s * counts.size());
    return counts;
}

std::vector<double> random_hist(std::mt19937_64& rng, std::size_t k) {
    std::vector<double> c(k);
    for (auto& v : c) v = static_cast<double>(rng() % 30);
    return smoothed(c);
}

ConditionalHistogram single_bin(std::vector<double> p) {
    ConditionalHistogram h;
    h.bins["A|mid|t0"] = Histogram{std::move(p), 100, false};
    return h;
}

}  // namespace

TEST(Estimate, LaplaceSmoothing) {
    BinningConfig cfg;
    cfg.buckets = 5;
    std::vector<CalibrationSample> xs(12, CalibrationSample{"A", "mid", 0.0, 3.0});
    const auto h = estimate_conditional(xs, cfg);
    ASSERT_EQ(h.bins.size(), 1u);
    const auto& hist = h.bins.begin()->second;
    EXPECT_DOUBLE_EQ(hist.p[3], 13.0 / 17.0);
    double sum = 0;
    for (double v : hist.p) sum += v;
    EXPECT_NEAR(sum, 1.0, 1e-12);
    EXPECT_FALSE(hist.low_confidence);
    EXPECT_TRUE(estimate_conditional({xs[0]}, cfg).bins.begin()->second.low_confidence);
    EXPECT_THROW(estimate_conditional({}, cfg), InvalidArgument);
}

TEST(Estimate, UniformQuantitiesChiSquare) {
    BinningConfig cfg;
    cfg.buckets = 5;
    std::mt19937_64 rng(3);
    std::vector<CalibrationSample> xs;
    const int n = 5000;
    for (int i = 0; i < n; ++i) xs.push_back({"A", "mid", 0.0, static_cast<double>(rng() % 5)});
    const auto hist = estimate_conditional(xs, cfg);
    const auto& p = hist.bins.begin()->second.p;
    double chi2 = 0;
    for (double v : p) {
        const double obs = v * (n + 5) - 1, exp = n / 5.0;
        chi2 += (obs - exp) * (obs - exp) / exp;
    }
    // 99.9th percentile of chi-square with 4 degrees of freedom.
    EXPECT_LT(chi2, 18.47);
}

TEST(Estimate, BinsByCategoryIncomeAndDiscountTercile) {
    BinningConfig cfg;
    const auto h = estimate_conditional({{"A", "low", 0.05, 1}, {"A", "low", 0.15, 1}, {"A", "low", 0.3, 1}, {"B", "high", 0, 2}},
                                        cfg);
    EXPECT_EQ(h.bins.size(), 4u);
    EXPECT_TRUE(h.bins.count("A|low|t0") && h.bins.count("A|low|t1") && h.bins.count("A|low|t2"));
    EXPECT_EQ(outcome_bucket(37, 11), 10u);
}

TEST(Kl, Examples) {
    const std::vector<double> p{0.5, 0.5}, q{0.25, 0.75};
    EXPECT_EQ(kl_divergence(p, p), 0.0);
    EXPECT_NEAR(kl_divergence(p, q), 0.5 * std::log(2.0) + 0.5 * std::log(2.0 / 3.0), 1e-15);
    EXPECT_THROW(kl_divergence(p, {1.0}), InvalidArgument);
    EXPECT_THROW(kl_divergence(p, {1.0, 0.0}), InvalidArgument);
}

TEST(Kl, RandomPairsAgainstDefinition) {
    std::mt19937_64 rng(11);
    for (int i = 0; i < 1000; ++i) {
        const std::size_t k = 2 + rng() % 10;
        const auto p = random_hist(rng, k), q = random_hist(rng, k);
        const double kl = kl_divergence(p, q);
        EXPECT_GE(kl, 0.0);
        EXPECT_NEAR(kl, ref_kl(p, q), 1e-9);
    }
}

TEST(Fit, IdentityWhenEqual) {
    const auto p = smoothed({3, 9, 20, 7, 1, 0, 0, 2, 0, 0, 1});
    const auto f = fit_calibration(single_bin(p), single_bin(p));
    const auto& fit = f.bins.begin()->second;
    EXPECT_TRUE(fit.map.is_identity(1e-9));
    EXPECT_NEAR(fit.kl_fitted, 0.0, 1e-12);
}

TEST(Fit, ShiftByTwoBuckets) {
    std::vector<double> real_counts{5, 30, 60, 40, 20, 8, 3, 1, 0, 0, 0};
    std::vector<double> sim_counts(11, 0.0);
    for (std::size_t j = 0; j + 2 < 11; ++j) sim_counts[j + 2] = real_counts[j];
    const auto real = smoothed(real_counts), sim = smoothed(sim_counts);
    const auto f = fit_calibration(single_bin(sim), single_bin(real));
    const auto& fit = f.bins.begin()->second;
    EXPECT_FALSE(fit.identity_fallback);
    EXPECT_LE(fit.kl_fitted, 0.1 * fit.kl_identity);
    // Around the bulk of the mass the map subtracts about two.
    for (double x : {3.0, 4.0, 5.0, 6.0}) EXPECT_NEAR(x - fit.map(x), 2.0, 0.5) << x;
}

TEST(Fit, NeverWorseThanIdentityAndMonotone) {
    std::mt19937_64 rng(21);
    for (int i = 0; i < 100; ++i) {
        const auto sim = random_hist(rng, 11), real = random_hist(rng, 11);
        const auto f = fit_calibration(single_bin(sim), single_bin(real));
        const auto& fit = f.bins.begin()->second;
        EXPECT_LE(fit.kl_fitted, fit.kl_identity + 1e-12);
        EXPECT_NEAR(fit.kl_identity, ref_kl(real, sim), 1e-9);
        double prev = -1e300;
        for (double x = -1; x <= 12; x += 0.25) {
            const double y = fit.map(x);
            EXPECT_GE(y, prev);
            prev = y;
        }
    }
}

TEST(Fit, MissingBinsAreErrors) {
    auto a = single_bin(smoothed({1, 2}));
    auto b = a;
    b.bins["B|low|t0"] = Histogram{smoothed({1, 2}), 3, true};
    EXPECT_THROW(fit_calibration(a, b), InvalidArgument);
    EXPECT_THROW(fit_calibration(b, a), InvalidArgument);
}

TEST(Apply, Examples) {
    const PiecewiseLinearMap minus2({{2, 0}, {12, 10}});
    EXPECT_EQ(apply_calibration(minus2, RetailDecision::purchase("P", 5)), RetailDecision::purchase("P", 3));
    const auto id = PiecewiseLinearMap::identity();
    const auto d = RetailDecision::purchase("Q", 7);
    EXPECT_EQ(apply_calibration(id, d), d);
    EXPECT_EQ(apply_calibration(id, apply_calibration(id, d)), apply_calibration(id, d));
    EXPECT_EQ(apply_calibration(minus2, RetailDecision::no_purchase()), RetailDecision::no_purchase());
}

TEST(Reweight, Examples) {
    const std::map<std::string, double> p{{"a", 0.3}, {"b", 0.7}};
    for (const auto& [k, w] : reweight_marginals(p, p).weights) EXPECT_DOUBLE_EQ(w, 1.0);
    const auto t = reweight_marginals({{"a", 0.5}, {"b", 0.5}}, {{"a", 0.05}, {"b", 0.95}}, 0.2, 5.0);
    EXPECT_DOUBLE_EQ(t.weights.at("a"), 5.0);
    EXPECT_NEAR(t.weights.at("b"), 0.5 / 0.95, 1e-15);
    EXPECT_NEAR(t.expectation_sim, 0.05 * 5.0 + 0.95 * (0.5 / 0.95), 1e-15);
    const auto u = reweight_marginals({{"a", 0.01}, {"b", 0.99}}, {{"a", 0.5}, {"b", 0.5}});
    EXPECT_DOUBLE_EQ(u.weights.at("a"), 0.2);
}

TEST(Bottleneck, Examples) {
    EXPECT_TRUE(detect_bottleneck({{"margin", 100}}, {{"margin", 100}}, {{"margin", 0.1}}).empty());
    const auto s = detect_bottleneck({{"margin", 120}}, {{"margin", 100}}, {{"margin", 0.1}});
    ASSERT_EQ(s.size(), 1u);
    EXPECT_NEAR(s[0].deviation, 0.2, 1e-12);
    EXPECT_TRUE(detect_bottleneck({{"margin", 125}}, {{"margin", 100}}, {{"margin", 0.25}}).empty());
    EXPECT_THROW(detect_bottleneck({{"margin", 1}}, {{"margin", 1}}, {{"inventory", 0.1}}), InvalidArgument);
}

TEST(Targets, Decompose) {
    TargetNode root{"revenue", 100, 10};
    const auto t = decompose_targets(root, {{"north", 0.6}, {"south", 0.4}});
    EXPECT_DOUBLE_EQ(t.children[0].target, 60);
    EXPECT_DOUBLE_EQ(t.children[1].target, 40);
    EXPECT_DOUBLE_EQ(t.children[0].tolerance, 6);
    EXPECT_DOUBLE_EQ(decompose_targets(root, {{"all", 1.0}}).children[0].target, 100);
    EXPECT_THROW(decompose_targets(root, {{"a", 0.5}, {"b", 0.4}}), InvalidArgument);
    std::mt19937_64 rng(8);
    for (int i = 0; i < 200; ++i) {
        std::vector<double> raw(1 + rng() % 6);
        double total = 0;
        for (auto& r : raw) total += (r = 1 + rng() % 100);
        std::vector<std::pair<std::string, double>> shares;
        for (std::size_t k = 0; k < raw.size(); ++k) shares.push_back({std::to_string(k), raw[k] / total});
        double sum = 0;
        for (const auto& c : decompose_targets(root, shares).children) sum += c.target;
        EXPECT_NEAR(sum, 100, 1e-9);
    }
}

TEST(Targets, FeedbackAdjust) {
    TargetNode root{"revenue", 100, 10};
    EXPECT_DOUBLE_EQ(feedback_adjust(root, {}, 0).target, 100);
    const FeedbackSignal sig{"revenue", 80, 100, -0.2, 0.1};
    EXPECT_DOUBLE_EQ(feedback_adjust(root, {sig}, 0, 0.5).target, 90);
    // Persistent signal: step sizes shrink geometrically.
    double prev_step = 0;
    TargetNode cur = root;
    for (int it = 0; it < 5; ++it) {
        const auto next = feedback_adjust(cur, {sig}, it, 0.5, 0.5);
        const double step = cur.target - next.target;
        if (it > 0) EXPECT_LT(step, prev_step);
        prev_step = step;
        cur = next;
    }
    // A child signal flows up to the parent aggregate.
    const auto tree = decompose_targets(root, {{"north", 0.6}, {"south", 0.4}});
    const auto adj = feedback_adjust(tree, {{"north", 40, 60, -1.0 / 3, 0.1}}, 0, 0.5);
    EXPECT_DOUBLE_EQ(adj.children[0].target, 50);
    EXPECT_DOUBLE_EQ(adj.target, 90);
}

TEST(Bound, Examples) {
    EXPECT_DOUBLE_EQ(generalization_gain_lower_bound(100, 100, 10000, 0, 0), 0.9);
    EXPECT_DOUBLE_EQ(generalization_gain_lower_bound(7, 50, 50, 0, 3), 0.0);
    EXPECT_THROW(generalization_gain_lower_bound(1, 0.5, 10, 0, 0), InvalidArgument);
    EXPECT_THROW(generalization_gain_lower_bound(1, 10, 5, 0, 0), InvalidArgument);
    EXPECT_THROW(generalization_gain_lower_bound(0.5, 10, 50, 0, 0), InvalidArgument);
    EXPECT_THROW(generalization_gain_lower_bound(1, 10, 50, -1, 0), InvalidArgument);
    std::mt19937_64 rng(4);
    std::uniform_real_distribution<double> u(0, 1);
    for (int i = 0; i < 1000; ++i) {
        const double d = 1 + 200 * u(rng), nt = 1 + 1000 * u(rng), nf = nt + 1e5 * u(rng);
        const double lam = u(rng), r = 10 * u(rng);
        const double v = generalization_gain_lower_bound(d, nt, nf, lam, r);
        EXPECT_NEAR(v, std::sqrt(d) / std::sqrt(nt) - std::sqrt(d) / std::sqrt(nf) + lam * r, 1e-9);
        EXPECT_LE(v, generalization_gain_lower_bound(d, nt, nf * 1.5, lam, r));
    }
}

TEST(Serialization, CalibrationJson) {
    const auto p = smoothed({1, 5, 2});
    std::ostringstream out;
    write_calibration_json(out, fit_calibration(single_bin(p), single_bin(p)), reweight_marginals({{"a", 1}}, {{"a", 1}}));
    const auto j = nlohmann::json::parse(out.str());
    EXPECT_FALSE(j.empty());
}
