#pragma once

#include <array>
#include <cstdint>
#include <iosfwd>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "malles/dialogue.hpp"

namespace malles {

inline constexpr std::size_t kRuleFeatureCount = 5;
inline constexpr std::array<const char*, kRuleFeatureCount> kRuleFeatures{"price", "discount", "hist_volume", "trend",
                                                                          "review"};

std::optional<std::size_t> rule_feature_index(std::string_view name);

struct RulePoint {
    std::map<std::string, double> features;
    double target = 0.0;
};

/// Dense view of a dataset: one column per rule feature.
struct RuleData {
    Eigen::MatrixXd x;  // rows = points
    Eigen::VectorXd y;
};

/// Throws when a point lacks one of the rule features.
RuleData to_rule_data(const std::vector<RulePoint>& points);

enum class Op { constant, feature, add, sub, mul, div, log };

struct Node {
    Op op = Op::constant;
    double value = 0.0;
    std::size_t feature = 0;
    friend bool operator==(const Node&, const Node&) = default;
};

/// Expression tree stored in prefix order.
class Expression {
public:
    Expression() = default;
    explicit Expression(std::vector<Node> nodes);

    static Expression constant(double c);
    static Expression feature(std::size_t index);
    static Expression binary(Op op, const Expression& a, const Expression& b);
    static Expression log(const Expression& a);

    const std::vector<Node>& nodes() const { return nodes_; }
    std::size_t size() const { return nodes_.size(); }
    std::size_t depth() const;
    /// Vectorized evaluation with protected division and log.
    Eigen::ArrayXd evaluate(const Eigen::MatrixXd& x) const;
    double evaluate(const std::array<double, kRuleFeatureCount>& point) const;
    std::string str() const;
    /// Index one past the subtree rooted at `i`.
    std::size_t subtree_end(std::size_t i) const;

    friend bool operator==(const Expression&, const Expression&) = default;

private:
    std::vector<Node> nodes_;
};

/// Parses infix text: + - * / log(), parentheses, numbers and feature names.
Expression parse_expression(std::string_view text);

/// Sum of monomials: exponent vector -> coefficient. Defined only for
/// expressions without log and with constant divisors.
using Polynomial = std::map<std::array<int, kRuleFeatureCount>, double>;
std::optional<Polynomial> to_polynomial(const Expression& e);
bool algebraically_equivalent(const Expression& a, const Expression& b, double tolerance = 1e-6);

struct RuleErrors {
    double rmse = 0.0;
    double mae = 0.0;
};

RuleErrors evaluate_rule(const Expression& e, const std::vector<RulePoint>& points);
RuleErrors evaluate_rule(const Expression& e, const RuleData& data);

/// Refits the intercept and the coefficient of every top-level additive term
/// by least squares. Returns nullopt when the expression is not finite on the
/// data.
std::optional<Expression> fit_constants(const Expression& e, const RuleData& data);

struct RuleFit {
    Expression expression;
    double rmse = 0.0;
    double mae = 0.0;
    std::size_t complexity = 0;
    std::string dataset_id;
    double score = 0.0;
    std::size_t evaluations = 0;
};

struct DiscoverOptions {
    std::size_t budget = 100000;
    std::uint64_t seed = 0;
    std::size_t max_depth = 4;
    std::size_t population = 200;
    std::size_t tournament = 4;
    double crossover_rate = 0.7;
    double complexity_penalty = 0.01;
    std::size_t workers = 1;
};

std::string dataset_id(const std::vector<RulePoint>& points);
double penalized_score(double rmse, std::size_t complexity, double penalty = 0.01);

/// Evolutionary search with least-squares constants. The constant-mean model
/// is the first candidate evaluated.
RuleFit discover_rule(const std::vector<RulePoint>& points, const DiscoverOptions& options);

struct RefineResult {
    RuleFit fit;
    bool improved = false;
    bool no_proposal = false;
    bool unparseable = false;
    std::vector<Turn> transcript;
};

/// Extracts "formula: <expr>" from the final dealer turn.
std::optional<std::string> find_formula_proposal(const std::string& text);

RefineResult refine_rule_via_dialogue(const RuleFit& fit, const std::vector<RulePoint>& points,
                                      const std::string& background, int n, const RoleAgents& agents,
                                      const DialogueContext& context, double complexity_penalty = 0.01);

void write_rules_json(std::ostream& out, const RuleFit& fit);
void write_rule_points_csv(std::ostream& out, const std::vector<RulePoint>& points);
std::vector<RulePoint> read_rule_points_csv(std::istream& in);

}  // namespace malles
