#include <gtest/gtest.h>

#include <chrono>
#include <cmath>
#include <random>
#include <sstream>

#include "malles/symbolic.hpp"

using namespace malles;

namespace {

RulePoint point(double price, double target, double discount = 0.0, double hist = 0.0, double trend = 0.0,
                double review = 4.0) {
    return {{{"price", price}, {"discount", discount}, {"hist_volume", hist}, {"trend", trend}, {"review", review}},
            target};
}

std::vector<RulePoint> planted(std::size_t n = 50) {
    std::vector<RulePoint> out;
    for (std::size_t i = 0; i < n; ++i) {
        const double price = 0.5 + 0.08 * static_cast<double>(i);
        out.push_back(point(price, 10 - 2 * price, 0.01 * static_cast<double>(i % 7), static_cast<double>(i % 5),
                            static_cast<double>(i % 3), 3 + 0.02 * static_cast<double>(i)));
    }
    return out;
}

double ref_rmse(const std::vector<double>& pred, const std::vector<RulePoint>& pts) {
    double s = 0;
    for (std::size_t i = 0; i < pts.size(); ++i) s += (pred[i] - pts[i].target) * (pred[i] - pts[i].target);
    return std::sqrt(s / static_cast<double>(pts.size()));
}

std::shared_ptr<ScriptedBackend> dealer_proposing(const std::string& formula) {
    return std::make_shared<ScriptedBackend>([formula](const ChatRequest& r) {
        return r.final_round && !formula.empty() ? "Counter-proposal.\nformula: " + formula : std::string("Noted.");
    });
}

}  // namespace

TEST(Expressions, ParseEvaluateAndPrint) {
    const auto e = parse_expression("10 - 2 * price");
    EXPECT_DOUBLE_EQ(e.evaluate(std::array<double, kRuleFeatureCount>{3, 0, 0, 0, 0}), 4.0);
    EXPECT_TRUE(algebraically_equivalent(e, parse_expression(e.str())));
    EXPECT_TRUE(algebraically_equivalent(e, parse_expression("(5 - price) * 2")));
    EXPECT_FALSE(algebraically_equivalent(e, parse_expression("10 - 2.1 * price")));
    EXPECT_NEAR(parse_expression("log(review)").evaluate(std::array<double, kRuleFeatureCount>{0, 0, 0, 0, std::exp(2.0)}), 2.0, 1e-8);
    EXPECT_THROW(parse_expression("10 - * price"), Error);
    EXPECT_THROW(parse_expression("colour + 1"), Error);
}

TEST(Evaluate, Examples) {
    const auto pts = planted();
    EXPECT_EQ(evaluate_rule(parse_expression("10 - 2 * price"), pts).rmse, 0.0);
    const auto off = evaluate_rule(parse_expression("11 - 2 * price"), pts);
    EXPECT_NEAR(off.rmse, 1.0, 1e-12);
    EXPECT_NEAR(off.mae, 1.0, 1e-12);
    auto missing = pts;
    missing[3].features.erase("trend");
    EXPECT_THROW(evaluate_rule(parse_expression("price"), missing), Error);
}

TEST(Evaluate, MatchesReferenceRmse) {
    std::mt19937_64 rng(12);
    std::uniform_real_distribution<double> u(0, 10);
    std::vector<RulePoint> pts;
    for (int i = 0; i < 100; ++i) pts.push_back(point(u(rng), u(rng), u(rng) / 10, u(rng), u(rng), u(rng)));
    const auto e = parse_expression("3 + price * discount - trend / 2");
    std::vector<double> pred;
    for (const auto& p : pts)
        pred.push_back(3 + p.features.at("price") * p.features.at("discount") - p.features.at("trend") / 2);
    EXPECT_NEAR(evaluate_rule(e, pts).rmse, ref_rmse(pred, pts), 1e-12);
}

TEST(Discover, RecoversPlantedRule) {
    const auto pts = planted();
    DiscoverOptions o;
    o.seed = 7;
    const auto start = std::chrono::steady_clock::now();
    const auto fit = discover_rule(pts, o);
    EXPECT_LT(fit.rmse, 1e-9);
    EXPECT_LE(fit.evaluations, o.budget);
    EXPECT_TRUE(algebraically_equivalent(fit.expression, parse_expression("10 - 2 * price"), 1e-6)) << fit.expression.str();
    const auto again = discover_rule(pts, o);
    EXPECT_EQ(again.expression, fit.expression);
    EXPECT_EQ(again.evaluations, fit.evaluations);
    EXPECT_LT(std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count(), 60.0);
}

TEST(Discover, ConstantTarget) {
    std::vector<RulePoint> pts;
    for (int i = 0; i < 20; ++i) pts.push_back(point(i, 5.0));
    const auto fit = discover_rule(pts, {});
    EXPECT_EQ(fit.expression.str(), "5");
    EXPECT_EQ(fit.rmse, 0.0);
}

TEST(Discover, BudgetOfOne) {
    DiscoverOptions o;
    o.budget = 1;
    const auto fit = discover_rule(planted(), o);
    EXPECT_EQ(fit.evaluations, 1u);
    EXPECT_TRUE(std::isfinite(fit.rmse));
    EXPECT_GT(fit.rmse, 0.0);
    EXPECT_THROW(discover_rule({}, o), InvalidArgument);
}

TEST(Refine, BetterProposalReplacesIncumbent) {
    const auto pts = planted();
    DiscoverOptions o;
    o.budget = 1;
    const auto incumbent = discover_rule(pts, o);
    const auto r = refine_rule_via_dialogue(incumbent, pts, "b", 4, RoleAgents(dealer_proposing("10 - 2*price")), {});
    EXPECT_TRUE(r.improved);
    EXPECT_EQ(r.fit.rmse, 0.0);
    EXPECT_TRUE(algebraically_equivalent(r.fit.expression, parse_expression("10 - 2 * price")));
    EXPECT_NE(r.transcript.front().text.find(incumbent.expression.str()), std::string::npos);
}

TEST(Refine, WorseOrMissingProposalKeepsIncumbent) {
    const auto pts = planted();
    RuleFit incumbent;
    incumbent.expression = parse_expression("10 - 2 * price");
    const auto e = evaluate_rule(incumbent.expression, pts);
    incumbent.rmse = e.rmse;
    incumbent.mae = e.mae;
    incumbent.complexity = incumbent.expression.size();
    incumbent.score = penalized_score(e.rmse, incumbent.complexity);

    auto r = refine_rule_via_dialogue(incumbent, pts, "b", 4, RoleAgents(dealer_proposing("9 - price")), {});
    EXPECT_FALSE(r.improved);
    EXPECT_EQ(r.fit.expression, incumbent.expression);

    r = refine_rule_via_dialogue(incumbent, pts, "b", 4, RoleAgents(dealer_proposing("")), {});
    EXPECT_TRUE(r.no_proposal);
    EXPECT_EQ(r.fit.expression, incumbent.expression);

    r = refine_rule_via_dialogue(incumbent, pts, "b", 4, RoleAgents(dealer_proposing("((price")), {});
    EXPECT_TRUE(r.unparseable);
    EXPECT_EQ(r.fit.expression, incumbent.expression);
}

TEST(Refine, NeverDegradesOverScriptedTrials) {
    const auto pts = planted();
    DiscoverOptions o;
    o.budget = 200;
    const auto incumbent = discover_rule(pts, o);
    std::mt19937_64 rng(50);
    const std::vector<std::string> pool{"10 - 2*price", "9 - price", "price * price", "log(review) + 1",
                                        "10 - 2*price + 0.5*trend", "", "((", "8 - 1.5*price", "hist_volume"};
    for (int trial = 0; trial < 50; ++trial) {
        const auto& f = pool[rng() % pool.size()];
        const auto r = refine_rule_via_dialogue(incumbent, pts, "b", 4 + trial % 3, RoleAgents(dealer_proposing(f)), {});
        EXPECT_LE(r.fit.score, incumbent.score) << f;
    }
}

TEST(Formula, ProposalExtraction) {
    EXPECT_EQ(*find_formula_proposal("Thoughts.\nFormula: 3 + price\nThanks"), "3 + price");
    EXPECT_FALSE(find_formula_proposal("no rule here"));
}

TEST(RulePoints, CsvRoundTrip) {
    const auto pts = planted(5);
    std::stringstream s;
    write_rule_points_csv(s, pts);
    const auto back = read_rule_points_csv(s);
    ASSERT_EQ(back.size(), pts.size());
    for (std::size_t i = 0; i < pts.size(); ++i) {
        EXPECT_DOUBLE_EQ(back[i].target, pts[i].target);
        EXPECT_DOUBLE_EQ(back[i].features.at("price"), pts[i].features.at("price"));
    }
}
