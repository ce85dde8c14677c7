#include <gtest/gtest.h>

#include <cmath>
#include <sstream>

#include "malles/meanfield.hpp"
#include "test_support.hpp"

using namespace malles;
using malles::testing::product;
using malles::testing::purchase;

namespace {

const MonthIndex kM = 2024 * 12;

Catalog catalog_ab() {
    Catalog c;
    for (const auto& p : {product("A1", "A", 2.0), product("A2", "A", 3.0), product("B1", "B", 4.0)}) c[p.product_id] = p;
    return c;
}

MeanFieldState state(double qa, double qb = 1.0) {
    MeanFieldState mu;
    mu.mean_quantity = {{"A", qa}, {"B", qb}};
    mu.shares = {{"A", {{"A1", 0.5}, {"A2", 0.5}}}, {"B", {{"B1", 1.0}}}};
    return mu;
}

/// Aggregate mock whose category-A mean quantity responds as x' = a + lambda * x.
BatchRunner linear_runner(double a, double lambda) {
    return [a, lambda](const MeanFieldState& mu) {
        const double x = mu.mean_quantity.at("A");
        return std::vector<BatchDecision>{{"A", "A1", a + lambda * x}, {"A", "A2", a + lambda * x}, {"B", "B1", 1.0}};
    };
}

}  // namespace

TEST(Window, Examples) {
    EXPECT_DOUBLE_EQ(window_average({{kM, 9}, {kM + 1, 2}, {kM + 2, 4}, {kM + 3, 6}}, 3, kM + 4).value, 4.0);
    EXPECT_DOUBLE_EQ(window_average({{kM, 9}, {kM + 1, 2}, {kM + 2, 4}, {kM + 3, 6}}, 1, kM + 4).value, 6.0);
    EXPECT_DOUBLE_EQ(window_average({{kM + 1, 6}, {kM + 3, 6}}, 3, kM + 4).value, 4.0);
    // Months at or after the as-of month are never used.
    EXPECT_DOUBLE_EQ(window_average({{kM + 3, 6}, {kM + 4, 600}}, 1, kM + 4).value, 6.0);
    EXPECT_TRUE(window_average({{kM + 5, 1}}, 3, kM + 4).empty);
    EXPECT_THROW(window_average({}, 0, kM), InvalidArgument);
}

TEST(Init, SharesFromQuantities) {
    Catalog c;
    c["A1"] = product("A1", "A", 2.0);
    const Timestamp t = month_start(kM);
    auto mu = init_meanfield({purchase("c", "A1", 4, t)}, c, 3, kM + 1);
    EXPECT_DOUBLE_EQ(mu.shares.at("A").at("A1"), 1.0);
    EXPECT_DOUBLE_EQ(mu.mean_quantity.at("A"), 4.0);

    c["A2"] = product("A2", "A", 3.0);
    mu = init_meanfield({purchase("c", "A1", 6, t), purchase("d", "A2", 2, t)}, c, 3, kM + 1, 0.0);
    EXPECT_DOUBLE_EQ(mu.shares.at("A").at("A1"), 0.75);
    EXPECT_DOUBLE_EQ(mu.shares.at("A").at("A2"), 0.25);

    mu = init_meanfield({purchase("c", "A1", 6, t), purchase("d", "A2", 2, t)}, c, 3, kM + 1);
    double total = 0;
    for (const auto& [id, s] : mu.shares.at("A")) total += s;
    EXPECT_NEAR(total, 1.0, 1e-12);
    EXPECT_THROW(init_meanfield({purchase("c", "A1", 6, t)}, c, 3, kM), DataError);
}

TEST(Step, EtaOneIsTheBatchAggregate) {
    const auto catalog = catalog_ab();
    const auto mu = state(2.0);
    const auto runner = linear_runner(3.0, 0.5);
    const auto nu = aggregate_batch(runner(mu), catalog, mu);
    auto next = meanfield_step(mu, runner, {3, 1.0}, catalog);
    EXPECT_EQ(next.iteration, 1);
    next.iteration = nu.iteration;
    EXPECT_EQ(next, nu);
    EXPECT_DOUBLE_EQ(next.mean_quantity.at("A"), 4.0);
}

TEST(Step, FixedPointIsStationary) {
    const auto catalog = catalog_ab();
    const auto mu = state(6.0);
    auto next = meanfield_step(mu, linear_runner(3.0, 0.5), {3, 0.5}, catalog);
    EXPECT_NEAR(sup_distance(mu, next), 0.0, 1e-15);
}

TEST(Run, ConvergesToClosedForm) {
    const auto catalog = catalog_ab();
    const double a = 3.0, lambda = 0.5, tol = 1e-6;
    const auto mu0 = state(0.0);
    const auto run = run_meanfield({3, 1.0}, mu0, linear_runner(a, lambda), tol, 25, catalog);
    EXPECT_TRUE(run.converged);
    EXPECT_NEAR(run.final_state.mean_quantity.at("A"), a / (1 - lambda), 1e-5);
    // Geometric rate bound on the iteration count. The first step also moves
    // the shares, so the initial gap is the first delta.
    const double bound = std::ceil(std::log(tol / run.deltas[0]) / std::log(lambda)) + 1;
    EXPECT_LE(static_cast<double>(run.deltas.size()), bound);
    for (std::size_t t = 2; t < run.deltas.size(); ++t)
        EXPECT_NEAR(run.deltas[t] / run.deltas[t - 1], lambda, 0.05 * lambda);
}

TEST(Run, DampedContractionFactor) {
    const auto catalog = catalog_ab();
    const double lambda = 0.5, eta = 0.6;
    const auto run = run_meanfield({3, eta}, state(0.0), linear_runner(1.0, lambda), 1e-9, 200, catalog);
    EXPECT_TRUE(run.converged);
    const double expected = std::abs(1 - eta * (1 - lambda));
    for (std::size_t t = 3; t < run.deltas.size(); ++t)
        EXPECT_NEAR(run.deltas[t] / run.deltas[t - 1], expected, 0.05 * expected);
}

TEST(Run, IterationLimits) {
    const auto catalog = catalog_ab();
    auto run = run_meanfield({3, 1.0}, state(0.0), linear_runner(3.0, 0.5), 1e-6, 1, catalog);
    EXPECT_EQ(run.trajectory.size(), 2u);
    EXPECT_FALSE(run.converged);
    run = run_meanfield({3, 1.0}, state(0.0), linear_runner(3.0, 0.5), 100.0, 25, catalog);
    EXPECT_TRUE(run.converged);
    EXPECT_EQ(run.trajectory.size(), 2u);
    EXPECT_THROW(run_meanfield({3, 1.0}, state(0.0), linear_runner(3.0, 0.5), 0.0, 25, catalog), InvalidArgument);
    EXPECT_THROW(run_meanfield({3, 1.5}, state(0.0), linear_runner(3.0, 0.5), 1e-6, 25, catalog), InvalidArgument);
}

TEST(Run, EmptyBatchIsAnError) {
    const auto catalog = catalog_ab();
    BatchRunner none = [](const MeanFieldState&) { return std::vector<BatchDecision>{}; };
    EXPECT_THROW(meanfield_step(state(1.0), none, {3, 0.5}, catalog), Error);
}

TEST(Field, TopSharesAndTrajectory) {
    auto mu = state(2.0);
    mu.shares["A"] = {{"A1", 0.2}, {"A2", 0.8}};
    const auto f = to_market_field(mu, 1);
    ASSERT_EQ(f.top_shares.at("A").size(), 1u);
    EXPECT_EQ(f.top_shares.at("A")[0].first, "A2");

    const auto run = run_meanfield({3, 1.0}, state(0.0), linear_runner(3.0, 0.5), 1e-6, 3, catalog_ab());
    std::ostringstream out;
    write_trajectory_jsonl(out, run);
    std::size_t lines = 0;
    for (char c : out.str()) lines += c == '\n';
    EXPECT_EQ(lines, run.trajectory.size());
}
