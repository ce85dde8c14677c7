#include <gtest/gtest.h>

#include <cmath>
#include <random>
#include <sstream>

#include <nlohmann/json.hpp>

#include "malles/metrics.hpp"
#include "malles/retail_engine.hpp"
#include "test_support.hpp"

using namespace malles;
using malles::testing::product;
using malles::testing::small_world;

namespace {

Catalog shop() {
    Catalog c;
    for (const auto& p : {product("P1", "A", 3.0, "acme", 4.0), product("P2", "A", 5.0, "zeta", 4.8),
                          product("P3", "A", 9.0, "acme", 3.1)})
        c[p.product_id] = p;
    return c;
}

CustomerRecord shopper() {
    CustomerRecord c;
    c.customer_id = "C1";
    c.income_bracket = "mid";
    return c;
}

RetailPrompt prompt_for(std::vector<std::string> ids, std::vector<double> discounts = {}, std::uint64_t seed = 1) {
    if (discounts.empty()) discounts.assign(ids.size(), 0.0);
    PromptOptions o;
    o.cutoff = 1000;
    o.seed = seed;
    return build_retail_prompt(shopper(), ids, discounts, shop(), o);
}

PlantedRule rule(double alpha, double beta, std::array<double, kFeatureGroupCount> w = {-1, 0, 0, 0, 0, 0}) {
    PlantedRule r;
    r.alpha = alpha;
    r.beta = beta;
    r.utility_weights = w;
    return r;
}

std::shared_ptr<MockLinearAgent> mock(double alpha, double beta, double sigma = 0.0, std::uint64_t seed = 5) {
    return std::make_shared<MockLinearAgent>(MockAgentParams{rule(alpha, beta), sigma, seed});
}

double ref_kl(const std::array<double, kFeatureGroupCount>& a, const std::array<double, kFeatureGroupCount>& b) {
    double s = 0;
    for (std::size_t i = 0; i < a.size(); ++i)
        if (a[i] > 0) s += a[i] * std::log(a[i] / b[i]);
    return s;
}

}  // namespace

TEST(Episode, MockMatchesPlantedRule) {
    auto agent = mock(10, 2);
    const auto p = prompt_for({"P1", "P2", "P3"});
    const auto ep = run_retail_episode(shopper(), p, {}, *agent, 3);
    ASSERT_TRUE(ep.valid);
    EXPECT_EQ(ep.decision, RetailDecision::purchase("P1", 4));
    EXPECT_EQ(ep.chat_calls, 1u);
    EXPECT_FALSE(ep.lenient_parse);
}

TEST(Episode, PersonaChangesOnlyText) {
    const auto p = prompt_for({"P1", "P2"});
    StyleParams a, b;
    b.discount_sensitivity = 2 * a.discount_sensitivity;
    EXPECT_NE(render_persona(a), render_persona(b));
    std::vector<ChatRequest> seen;
    std::vector<std::string> sidecars;
    ScriptedBackend spy([&](const ChatRequest& r) {
        std::ostringstream s;
        for (const auto& row : r.sidecar->rows) s << row.product_id << row.features.unit_price.str() << ';';
        sidecars.push_back(s.str());
        seen.push_back(r);
        return std::string(R"({"buy": false})");
    });
    run_retail_episode(shopper(), p, a, spy, 1);
    run_retail_episode(shopper(), p, b, spy, 1);
    EXPECT_NE(seen[0].messages[0].content, seen[1].messages[0].content);
    EXPECT_EQ(seen[0].messages[1].content, seen[1].messages[1].content);
    EXPECT_EQ(sidecars[0], sidecars[1]);
}

TEST(Episode, InvalidResponseIsKept) {
    EchoBackend junk("I like turtles");
    const auto ep = run_retail_episode(shopper(), prompt_for({"P1"}), {}, junk, 1, {}, "i-1");
    EXPECT_FALSE(ep.valid);
    ASSERT_TRUE(ep.parse_error);
    EXPECT_EQ(*ep.parse_error, to_string(ParseError::Kind::no_decision_found));
    EXPECT_EQ(ep.response_text, "I like turtles");
}

TEST(Episode, BackendErrorsCarryInstanceId) {
    ScriptedBackend down([](const ChatRequest&) -> std::string {
        throw BackendError(BackendError::Kind::transport, "connection refused");
    });
    try {
        run_retail_episode(shopper(), prompt_for({"P1"}), {}, down, 1, {}, "inst-42");
        FAIL();
    } catch (const BackendError& e) {
        EXPECT_NE(std::string(e.what()).find("inst-42"), std::string::npos);
    }
}

TEST(Consistency, ZeroCases) {
    const auto p = prompt_for({"P1", "P2"});
    PerturbationConfig cfg;
    cfg.sigma = 0.0;
    EXPECT_EQ(multi_sample_consistency(shopper(), p, {}, *mock(10, 2), 1, cfg).l_cons, 0.0);
    cfg.sigma = 0.3;
    // Price-insensitive quantities; the cheapest option stays cheapest.
    EXPECT_EQ(multi_sample_consistency(shopper(), p, {}, *mock(10, 0, 0.0), 1, cfg).l_cons, 0.0);
}

TEST(Consistency, HandEvaluatedOffsets) {
    const auto p = prompt_for({"P1"});
    PerturbationConfig cfg;
    cfg.k = 2;
    cfg.fixed_relative_offsets = std::vector<double>{0.5 / 3.0, -0.5 / 3.0};
    const auto r = multi_sample_consistency(shopper(), p, {}, *mock(10, 2), 1, cfg);
    EXPECT_EQ(r.baseline.decision.quantity, 4);
    EXPECT_EQ(r.samples[0].decision.quantity, 3);
    EXPECT_EQ(r.samples[1].decision.quantity, 5);
    EXPECT_DOUBLE_EQ(r.l_cons, 1.0);
}

TEST(Consistency, PositiveForPriceSensitiveNoisyMock) {
    const auto p = prompt_for({"P1", "P2"});
    PerturbationConfig cfg;
    cfg.sigma = 0.2;
    double total = 0;
    for (std::uint64_t s = 0; s < 100; ++s) {
        cfg.seed = s;
        total += multi_sample_consistency(shopper(), p, {}, *mock(10, 2), s, cfg).l_cons;
    }
    EXPECT_GT(total / 100, 0.0);
}

TEST(Consistency, TooManyFailures) {
    int calls = 0;
    ScriptedBackend flaky([&](const ChatRequest&) {
        return calls++ == 0 ? std::string(R"({"buy": true, "product_id": "P1", "quantity": 1})") : std::string("??");
    });
    PerturbationConfig cfg;
    cfg.sigma = 0.1;
    EXPECT_THROW(multi_sample_consistency(shopper(), prompt_for({"P1"}), {}, flaky, 1, cfg), Error);
    cfg.k = 1;
    EXPECT_THROW(cfg.validate(), InvalidArgument);
}

TEST(Emphasis, DivergenceExamples) {
    const auto u = FeatureEmphasis::uniform();
    EXPECT_EQ(attention_divergence(u, u), 0.0);
    const auto a = FeatureEmphasis::from_raw({0.5, 0.5, 0, 0, 0, 0}, 1e-3);
    EXPECT_NEAR(attention_divergence(a, u), ref_kl(a.weights, u.weights), 1e-15);
    std::mt19937_64 rng(6);
    for (int i = 0; i < 1000; ++i) {
        std::array<double, kFeatureGroupCount> x{}, y{};
        for (auto& v : x) v = static_cast<double>(rng() % 100);
        for (auto& v : y) v = 1 + static_cast<double>(rng() % 100);
        x[0] += 1;
        const auto fa = FeatureEmphasis::from_raw(x), fb = FeatureEmphasis::from_raw(y);
        const double kl = attention_divergence(fa, fb);
        EXPECT_GE(kl, 0.0);
        EXPECT_NEAR(kl, ref_kl(fa.weights, fb.weights), 1e-9);
    }
    FeatureEmphasis zero_prior;
    zero_prior.weights = {1, 0, 0, 0, 0, 0};
    EXPECT_THROW(attention_divergence(u, zero_prior), InvalidArgument);
}

TEST(Emphasis, ReportsAndNormalization) {
    const auto a = parse_feature_emphasis("weights: 50, 50, 0, 0, 0, 0");
    EXPECT_DOUBLE_EQ(a[FeatureGroup::price], 0.5);
    EXPECT_DOUBLE_EQ(a[FeatureGroup::discount], 0.5);
    const auto thirds = normalize_weights({40, 40, 40});
    for (double v : thirds) EXPECT_DOUBLE_EQ(v, 1.0 / 3.0);
    const auto j = parse_feature_emphasis(R"({"reviews": 20, "price": "80%"})");
    EXPECT_DOUBLE_EQ(j[FeatureGroup::price], 0.8);
    EXPECT_DOUBLE_EQ(j[FeatureGroup::reviews], 0.2);
    try {
        parse_feature_emphasis("no idea");
        FAIL();
    } catch (const ParseError& e) {
        EXPECT_EQ(e.raw_text(), "no idea");
    }
}

TEST(Emphasis, MockReportsPriceOnly) {
    const auto p = prompt_for({"P1", "P2"});
    const auto a = elicit_feature_emphasis(*mock(10, 2), p, 1, 1e-3);
    EXPECT_GT(a[FeatureGroup::price], 0.99);
    EXPECT_EQ(std::max_element(a.weights.begin(), a.weights.end()) - a.weights.begin(), 0);
}

TEST(Strategies, CandidateSets) {
    const auto c = shopper();
    const auto z = summarize_profile(c, 1000, shop());
    const auto empty = generate_candidate_strategies(z, {});
    EXPECT_EQ(empty.size(), 4u);
    for (const auto& s : empty) EXPECT_NE(s.kind, Strategy::brand_loyal);

    auto buyer = shopper();
    buyer.purchase_history = {malles::testing::purchase("C1", "P1", 2, 10), malles::testing::purchase("C1", "P2", 1, 20)};
    const auto zb = summarize_profile(buyer, 1000, shop());
    const auto full = generate_candidate_strategies(zb, buyer.history_before(1000));
    EXPECT_EQ(full.size(), 5u);
    EXPECT_EQ(full, generate_candidate_strategies(zb, buyer.history_before(1000)));
}

TEST(Strategies, MockScorerPrefersCheapest) {
    const auto p = prompt_for({"P3", "P2", "P1"}, {0.0, 0.1, 0.0});
    const auto strategies = generate_candidate_strategies(summarize_profile(shopper(), 1000, shop()), {});
    const auto sel = score_and_select_strategy(strategies, shopper(), p, {}, *mock(10, 2), 2);
    EXPECT_FALSE(sel.fallback);
    EXPECT_EQ(sel.strategy.kind, Strategy::cheapest_candidate);
    EXPECT_EQ(sel.episode.decision.product_id, "P1");
    EXPECT_EQ(sel.episode.chat_calls, 2u);
}

TEST(Strategies, SingleAndTies) {
    const auto p = prompt_for({"P1", "P2"});
    const auto all = generate_candidate_strategies(summarize_profile(shopper(), 1000, shop()), {});
    ScriptedBackend scorer([](const ChatRequest& r) {
        if (r.task == ChatTask::strategy_scoring) {
            std::vector<double> s(r.strategies.size(), 0.0);
            s[0] = 1.0;
            if (s.size() > 2) s[2] = 1.0;
            return "{\"scores\": " + nlohmann::json(s).dump() + "}";
        }
        return std::string(R"({"buy": false})");
    });
    EXPECT_EQ(score_and_select_strategy({all[1]}, shopper(), p, {}, scorer, 1).strategy, all[1]);
    const auto tie = score_and_select_strategy(all, shopper(), p, {}, scorer, 1);
    EXPECT_EQ(tie.chosen, 0u);
    EXPECT_THROW(score_and_select_strategy({}, shopper(), p, {}, scorer, 1), InvalidArgument);
}

TEST(Strategies, UnparseableScoresFallBack) {
    EchoBackend echo(R"({"buy": true, "product_id": "P2", "quantity": 2})");
    const auto all = generate_candidate_strategies(summarize_profile(shopper(), 1000, shop()), {});
    const auto sel = score_and_select_strategy(all, shopper(), prompt_for({"P1", "P2"}), {}, echo, 1);
    EXPECT_TRUE(sel.fallback);
    EXPECT_TRUE(sel.episode.strategy_fallback);
    EXPECT_EQ(sel.episode.decision, RetailDecision::purchase("P2", 2));
    EXPECT_FALSE(parse_strategy_scores(R"({"scores": [1, 2]})", 3));
    EXPECT_EQ(*parse_strategy_scores("text\n{\"scores\": [1, 2.5]}", 2), (std::vector<double>{1, 2.5}));
}

namespace {

std::vector<RetailRunEpisode> simulate_world(const SyntheticMarket& w, double sigma, std::uint64_t seed,
                                             std::size_t samples = 3, std::size_t max_cases = 0) {
    DatasetOptions d;
    d.seed = seed;
    auto cases = build_retail_cases(w.transactions, w.catalog, w.customers, d).cases;
    if (max_cases && cases.size() > max_cases) cases.resize(max_cases);
    auto agent = std::make_shared<MockLinearAgent>(MockAgentParams{PlantedRule{}, sigma, 9}, w.planted);
    RetailRunOptions o;
    o.seed = 17;
    o.samples = samples;
    return simulate_retail(cases, w.customers, w.catalog, BackendPool(agent), o);
}

}  // namespace

TEST(Simulate, NoiselessMockReproducesHistory) {
    const auto w = small_world(3);
    DatasetOptions d;
    d.seed = 1;
    const auto cases = build_retail_cases(w.transactions, w.catalog, w.customers, d).cases;
    const auto runs = simulate_world(w, 0.0, 1);
    ASSERT_EQ(runs.size(), cases.size());
    for (std::size_t i = 0; i < runs.size(); ++i) {
        const auto& e = runs[i].episode;
        ASSERT_TRUE(e.valid);
        EXPECT_EQ(e.decision, RetailDecision::purchase(cases[i].truth.product_id, cases[i].truth.quantity));
        for (const auto& s : e.samples) EXPECT_EQ(s, e.decision);
    }
}

TEST(Simulate, HitRateInvariantToShuffleSeed) {
    const auto w = small_world(4, 25);
    std::vector<double> hits;
    for (std::uint64_t s = 0; s < 5; ++s) {
        const auto runs = simulate_world(w, 0.0, 100 + s, 1);
        double h = 0;
        for (const auto& r : runs) h += r.episode.decision.buy;
        hits.push_back(h / runs.size());
    }
    for (double h : hits) EXPECT_EQ(h, hits[0]);
}

TEST(Simulate, NoiseRaisesStability) {
    const auto w = small_world(5, 30);
    auto stab = [&](double sigma) {
        std::vector<std::vector<double>> samples;
        for (const auto& r : simulate_world(w, sigma, 1, 4, 150)) {
            std::vector<double> q;
            for (const auto& s : r.episode.samples) q.push_back(s.buy ? static_cast<double>(s.quantity) : 0.0);
            samples.push_back(q);
        }
        return stability(samples);
    };
    EXPECT_EQ(stab(0.0), 0.0);
    EXPECT_GT(stab(0.5), 0.0);
}

TEST(Simulate, EpisodeLines) {
    const auto w = small_world(6, 10);
    const auto runs = simulate_world(w, 0.0, 1, 2, 3);
    std::ostringstream out;
    write_episode_jsonl(out, 0, runs[0]);
    const auto j = nlohmann::json::parse(out.str());
    EXPECT_EQ(j.at("instance_id"), runs[0].episode.instance_id);
    EXPECT_TRUE(j.at("valid").get<bool>());
    EXPECT_EQ(j.at("sample_quantities").size(), 2u);
}
