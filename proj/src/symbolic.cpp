#include "malles/symbolic.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <functional>
#include <istream>
#include <limits>
#include <ostream>
#include <random>
#include <sstream>

#include <nlohmann/json.hpp>

#include "malles/parallel.hpp"

namespace malles {

std::optional<std::size_t> rule_feature_index(std::string_view name) {
    for (std::size_t i = 0; i < kRuleFeatureCount; ++i)
        if (name == kRuleFeatures[i]) return i;
    return std::nullopt;
}

RuleData to_rule_data(const std::vector<RulePoint>& points) {
    RuleData d;
    d.x.resize(static_cast<Eigen::Index>(points.size()), static_cast<Eigen::Index>(kRuleFeatureCount));
    d.y.resize(static_cast<Eigen::Index>(points.size()));
    for (std::size_t r = 0; r < points.size(); ++r) {
        for (std::size_t f = 0; f < kRuleFeatureCount; ++f) {
            const auto it = points[r].features.find(kRuleFeatures[f]);
            if (it == points[r].features.end())
                throw DataError("point " + std::to_string(r) + " is missing feature " + kRuleFeatures[f]);
            d.x(static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(f)) = it->second;
        }
        d.y(static_cast<Eigen::Index>(r)) = points[r].target;
    }
    return d;
}

// ---------------------------------------------------------------------------

namespace {

int arity(Op op) {
    switch (op) {
        case Op::constant:
        case Op::feature: return 0;
        case Op::log: return 1;
        default: return 2;
    }
}

const char* symbol(Op op) {
    switch (op) {
        case Op::add: return "+";
        case Op::sub: return "-";
        case Op::mul: return "*";
        case Op::div: return "/";
        default: return "?";
    }
}

double protected_div(double a, double b) { return std::abs(b) > 1e-9 ? a / b : 1.0; }
double protected_log(double a) { return std::log(std::abs(a) + 1e-9); }

}  // namespace

Expression::Expression(std::vector<Node> nodes) : nodes_(std::move(nodes)) {
    if (nodes_.empty() || subtree_end(0) != nodes_.size()) throw InvalidArgument("malformed prefix expression");
}

Expression Expression::constant(double c) { return Expression({Node{Op::constant, c, 0}}); }

Expression Expression::feature(std::size_t index) {
    if (index >= kRuleFeatureCount) throw InvalidArgument("feature index out of range");
    return Expression({Node{Op::feature, 0.0, index}});
}

Expression Expression::binary(Op op, const Expression& a, const Expression& b) {
    if (arity(op) != 2) throw InvalidArgument("not a binary operator");
    std::vector<Node> nodes{Node{op, 0.0, 0}};
    nodes.insert(nodes.end(), a.nodes_.begin(), a.nodes_.end());
    nodes.insert(nodes.end(), b.nodes_.begin(), b.nodes_.end());
    return Expression(std::move(nodes));
}

Expression Expression::log(const Expression& a) {
    std::vector<Node> nodes{Node{Op::log, 0.0, 0}};
    nodes.insert(nodes.end(), a.nodes_.begin(), a.nodes_.end());
    return Expression(std::move(nodes));
}

std::size_t Expression::subtree_end(std::size_t i) const {
    std::size_t need = 1;
    while (need > 0) {
        if (i >= nodes_.size()) throw InvalidArgument("malformed prefix expression");
        need += static_cast<std::size_t>(arity(nodes_[i].op));
        --need;
        ++i;
    }
    return i;
}

std::size_t Expression::depth() const {
    std::function<std::size_t(std::size_t, std::size_t&)> rec = [&](std::size_t i, std::size_t& end) -> std::size_t {
        const int a = arity(nodes_[i].op);
        std::size_t next = i + 1;
        std::size_t d = 0;
        for (int k = 0; k < a; ++k) d = std::max(d, rec(next, next));
        end = next;
        return d + 1;
    };
    std::size_t end = 0;
    return nodes_.empty() ? 0 : rec(0, end);
}

namespace {

Eigen::ArrayXd eval_at(const std::vector<Node>& nodes, std::size_t& i, const Eigen::MatrixXd& x) {
    const auto& n = nodes[i++];
    switch (n.op) {
        case Op::constant: return Eigen::ArrayXd::Constant(x.rows(), n.value);
        case Op::feature: return x.col(static_cast<Eigen::Index>(n.feature)).array();
        case Op::log: return eval_at(nodes, i, x).unaryExpr([](double v) { return protected_log(v); });
        default: break;
    }
    const Eigen::ArrayXd a = eval_at(nodes, i, x);
    const Eigen::ArrayXd b = eval_at(nodes, i, x);
    switch (n.op) {
        case Op::add: return a + b;
        case Op::sub: return a - b;
        case Op::mul: return a * b;
        case Op::div: return a.binaryExpr(b, [](double p, double q) { return protected_div(p, q); });
        default: throw InvalidArgument("bad operator");
    }
}

void print_at(const std::vector<Node>& nodes, std::size_t& i, std::string& out, bool top) {
    const auto& n = nodes[i++];
    switch (n.op) {
        case Op::constant: out += format_double(n.value); return;
        case Op::feature: out += kRuleFeatures[n.feature]; return;
        case Op::log:
            out += "log(";
            print_at(nodes, i, out, true);
            out += ')';
            return;
        default: break;
    }
    if (!top) out += '(';
    print_at(nodes, i, out, false);
    out += ' ';
    out += symbol(n.op);
    out += ' ';
    print_at(nodes, i, out, false);
    if (!top) out += ')';
}

}  // namespace

Eigen::ArrayXd Expression::evaluate(const Eigen::MatrixXd& x) const {
    std::size_t i = 0;
    return eval_at(nodes_, i, x);
}

double Expression::evaluate(const std::array<double, kRuleFeatureCount>& point) const {
    Eigen::MatrixXd x(1, static_cast<Eigen::Index>(kRuleFeatureCount));
    for (std::size_t f = 0; f < kRuleFeatureCount; ++f) x(0, static_cast<Eigen::Index>(f)) = point[f];
    return evaluate(x)(0);
}

std::string Expression::str() const {
    std::string out;
    std::size_t i = 0;
    if (!nodes_.empty()) print_at(nodes_, i, out, true);
    return out;
}

// ---------------------------------------------------------------------------
// Parser

namespace {

class Parser {
public:
    explicit Parser(std::string_view text) : s_(text) {}

    Expression parse() {
        auto e = expr();
        skip();
        if (pos_ != s_.size()) fail("unexpected '" + std::string(1, s_[pos_]) + "'");
        return e;
    }

private:
    [[noreturn]] void fail(const std::string& why) const {
        throw DataError("cannot parse expression at " + std::to_string(pos_) + ": " + why);
    }
    void skip() {
        while (pos_ < s_.size() && std::isspace(static_cast<unsigned char>(s_[pos_]))) ++pos_;
    }
    bool eat(char c) {
        skip();
        if (pos_ < s_.size() && s_[pos_] == c) {
            ++pos_;
            return true;
        }
        return false;
    }
    Expression expr() {
        auto e = term();
        for (;;) {
            if (eat('+')) {
                e = Expression::binary(Op::add, e, term());
            } else if (eat('-')) {
                e = Expression::binary(Op::sub, e, term());
            } else {
                return e;
            }
        }
    }
    Expression term() {
        auto e = factor();
        for (;;) {
            if (eat('*')) {
                e = Expression::binary(Op::mul, e, factor());
            } else if (eat('/')) {
                e = Expression::binary(Op::div, e, factor());
            } else {
                return e;
            }
        }
    }
    Expression factor() {
        skip();
        if (pos_ >= s_.size()) fail("unexpected end");
        if (eat('-')) {
            skip();
            if (pos_ < s_.size() && (std::isdigit(static_cast<unsigned char>(s_[pos_])) || s_[pos_] == '.'))
                return Expression::constant(-number());
            return Expression::binary(Op::mul, Expression::constant(-1.0), factor());
        }
        if (eat('(')) {
            auto e = expr();
            if (!eat(')')) fail("expected ')'");
            return e;
        }
        const char c = s_[pos_];
        if (std::isdigit(static_cast<unsigned char>(c)) || c == '.') return Expression::constant(number());
        if (std::isalpha(static_cast<unsigned char>(c)) || c == '_') {
            const auto start = pos_;
            while (pos_ < s_.size() && (std::isalnum(static_cast<unsigned char>(s_[pos_])) || s_[pos_] == '_')) ++pos_;
            const auto name = s_.substr(start, pos_ - start);
            if (name == "log") {
                if (!eat('(')) fail("expected '(' after log");
                auto e = expr();
                if (!eat(')')) fail("expected ')'");
                return Expression::log(e);
            }
            const auto idx = rule_feature_index(name);
            if (!idx) fail("unknown feature " + std::string(name));
            return Expression::feature(*idx);
        }
        fail("unexpected '" + std::string(1, c) + "'");
    }
    double number() {
        const auto start = pos_;
        while (pos_ < s_.size() && (std::isdigit(static_cast<unsigned char>(s_[pos_])) || s_[pos_] == '.')) ++pos_;
        if (pos_ < s_.size() && (s_[pos_] == 'e' || s_[pos_] == 'E')) {
            std::size_t p = pos_ + 1;
            if (p < s_.size() && (s_[p] == '+' || s_[p] == '-')) ++p;
            if (p < s_.size() && std::isdigit(static_cast<unsigned char>(s_[p]))) {
                pos_ = p;
                while (pos_ < s_.size() && std::isdigit(static_cast<unsigned char>(s_[pos_]))) ++pos_;
            }
        }
        try {
            return parse_double(s_.substr(start, pos_ - start));
        } catch (const DataError&) {
            fail("bad number");
        }
    }

    std::string_view s_;
    std::size_t pos_ = 0;
};

}  // namespace

Expression parse_expression(std::string_view text) { return Parser(text).parse(); }

// ---------------------------------------------------------------------------
// Polynomial expansion

namespace {

using Exponents = std::array<int, kRuleFeatureCount>;

Polynomial poly_mul(const Polynomial& a, const Polynomial& b) {
    Polynomial out;
    for (const auto& [ea, ca] : a) {
        for (const auto& [eb, cb] : b) {
            Exponents e{};
            for (std::size_t k = 0; k < kRuleFeatureCount; ++k) e[k] = ea[k] + eb[k];
            out[e] += ca * cb;
        }
    }
    return out;
}

std::optional<Polynomial> poly_at(const std::vector<Node>& nodes, std::size_t& i) {
    const auto& n = nodes[i++];
    switch (n.op) {
        case Op::constant: return Polynomial{{Exponents{}, n.value}};
        case Op::feature: {
            Exponents e{};
            e[n.feature] = 1;
            return Polynomial{{e, 1.0}};
        }
        case Op::log: return std::nullopt;
        default: break;
    }
    auto a = poly_at(nodes, i);
    if (!a) return std::nullopt;
    auto b = poly_at(nodes, i);
    if (!b) return std::nullopt;
    switch (n.op) {
        case Op::add:
            for (const auto& [e, c] : *b) (*a)[e] += c;
            return a;
        case Op::sub:
            for (const auto& [e, c] : *b) (*a)[e] -= c;
            return a;
        case Op::mul: return poly_mul(*a, *b);
        case Op::div: {
            double divisor = 0.0;
            for (const auto& [e, c] : *b) {
                const bool constant = std::all_of(e.begin(), e.end(), [](int k) { return k == 0; });
                if (!constant && c != 0.0) return std::nullopt;
                if (constant) divisor = c;
            }
            if (std::abs(divisor) <= 1e-9) return std::nullopt;
            for (auto& [e, c] : *a) c /= divisor;
            return a;
        }
        default: return std::nullopt;
    }
}

}  // namespace

std::optional<Polynomial> to_polynomial(const Expression& e) {
    std::size_t i = 0;
    auto p = poly_at(e.nodes(), i);
    if (!p) return std::nullopt;
    for (auto it = p->begin(); it != p->end();) it = it->second == 0.0 ? p->erase(it) : std::next(it);
    return p;
}

bool algebraically_equivalent(const Expression& a, const Expression& b, double tolerance) {
    const auto pa = to_polynomial(a);
    const auto pb = to_polynomial(b);
    if (!pa || !pb) return false;
    Polynomial diff = *pa;
    for (const auto& [e, c] : *pb) diff[e] -= c;
    return std::all_of(diff.begin(), diff.end(), [&](const auto& kv) { return std::abs(kv.second) <= tolerance; });
}

// ---------------------------------------------------------------------------

RuleErrors evaluate_rule(const Expression& e, const RuleData& data) {
    if (data.y.size() == 0) throw InvalidArgument("empty dataset");
    const Eigen::ArrayXd residual = e.evaluate(data.x) - data.y.array();
    RuleErrors r;
    const double n = static_cast<double>(data.y.size());
    r.rmse = std::sqrt(residual.square().sum() / n);
    r.mae = residual.abs().sum() / n;
    if (!std::isfinite(r.rmse)) r.rmse = r.mae = std::numeric_limits<double>::infinity();
    return r;
}

RuleErrors evaluate_rule(const Expression& e, const std::vector<RulePoint>& points) {
    return evaluate_rule(e, to_rule_data(points));
}

namespace {

bool has_feature(const Expression& e, std::size_t from, std::size_t to) {
    for (std::size_t i = from; i < to; ++i)
        if (e.nodes()[i].op == Op::feature) return true;
    return false;
}

/// Top-level additive terms as [begin, end) node ranges. A constant factor of
/// a product term is dropped since the term gets its own coefficient.
void collect_terms(const Expression& e, std::size_t i, std::vector<Expression>& terms) {
    const auto& nodes = e.nodes();
    const auto end = e.subtree_end(i);
    const Op op = nodes[i].op;
    if (op == Op::add || op == Op::sub) {
        const auto mid = e.subtree_end(i + 1);
        collect_terms(e, i + 1, terms);
        collect_terms(e, mid, terms);
        return;
    }
    if (!has_feature(e, i, end)) return;
    if (op == Op::mul) {
        const auto mid = e.subtree_end(i + 1);
        if (nodes[i + 1].op == Op::constant) {
            collect_terms(e, mid, terms);
            return;
        }
        if (nodes[mid].op == Op::constant) {
            collect_terms(e, i + 1, terms);
            return;
        }
    }
    terms.emplace_back(std::vector<Node>(nodes.begin() + static_cast<std::ptrdiff_t>(i),
                                         nodes.begin() + static_cast<std::ptrdiff_t>(end)));
}

}  // namespace

std::optional<Expression> fit_constants(const Expression& e, const RuleData& data) {
    const auto rows = data.y.size();
    if (rows == 0) throw InvalidArgument("empty dataset");
    std::vector<Expression> terms;
    collect_terms(e, 0, terms);

    Eigen::MatrixXd a(rows, static_cast<Eigen::Index>(terms.size() + 1));
    a.col(0).setOnes();
    for (std::size_t k = 0; k < terms.size(); ++k) {
        a.col(static_cast<Eigen::Index>(k + 1)) = terms[k].evaluate(data.x).matrix();
        if (!a.col(static_cast<Eigen::Index>(k + 1)).allFinite()) return std::nullopt;
    }
    const Eigen::VectorXd coef = a.colPivHouseholderQr().solve(data.y);
    if (!coef.allFinite()) return std::nullopt;

    std::optional<Expression> out;
    auto append = [&](const Expression& t) { out = out ? Expression::binary(Op::add, *out, t) : t; };
    if (terms.empty() || std::abs(coef(0)) > 1e-12) append(Expression::constant(coef(0)));
    for (std::size_t k = 0; k < terms.size(); ++k) {
        const double c = coef(static_cast<Eigen::Index>(k + 1));
        if (std::abs(c) <= 1e-12) continue;
        append(c == 1.0 ? terms[k] : Expression::binary(Op::mul, Expression::constant(c), terms[k]));
    }
    if (!out) out = Expression::constant(0.0);
    return out;
}

std::string dataset_id(const std::vector<RulePoint>& points) {
    std::ostringstream out;
    write_rule_points_csv(out, points);
    return hex64(fnv1a64(out.str()));
}

double penalized_score(double rmse, std::size_t complexity, double penalty) {
    return rmse + penalty * static_cast<double>(complexity);
}

namespace {

struct Candidate {
    Expression raw;
    Expression fitted;
    RuleErrors errors{std::numeric_limits<double>::infinity(), std::numeric_limits<double>::infinity()};
    double score = std::numeric_limits<double>::infinity();
};

class Search {
public:
    Search(const RuleData& data, const DiscoverOptions& opt) : data_(data), opt_(opt), rng_(splitmix64(opt.seed)) {}

    Expression grow(std::size_t depth, bool full) {
        const bool terminal = depth <= 1 || (!full && unit() < 0.3);
        if (terminal) {
            if (unit() < 0.75) return Expression::feature(pick(kRuleFeatureCount));
            return Expression::constant(std::round(uniform(-5.0, 5.0) * 4.0) / 4.0);
        }
        static constexpr Op kOps[] = {Op::add, Op::sub, Op::mul, Op::div, Op::log};
        const Op op = kOps[pick(5)];
        if (op == Op::log) return Expression::log(grow(depth - 1, full));
        auto a = grow(depth - 1, full);
        auto b = grow(depth - 1, full);
        return Expression::binary(op, a, b);
    }

    void evaluate(Candidate& c) const {
        if (c.raw.depth() > opt_.max_depth) return;
        const auto fitted = fit_constants(c.raw, data_);
        if (!fitted || fitted->depth() > opt_.max_depth + 2) return;
        c.fitted = *fitted;
        c.errors = evaluate_rule(c.fitted, data_);
        if (std::isfinite(c.errors.rmse)) c.score = penalized_score(c.errors.rmse, c.fitted.size(), opt_.complexity_penalty);
    }

    std::size_t tournament(const std::vector<Candidate>& pop) {
        std::size_t best = pick(pop.size());
        for (std::size_t k = 1; k < opt_.tournament; ++k) {
            const std::size_t i = pick(pop.size());
            if (pop[i].score < pop[best].score || (pop[i].score == pop[best].score && i < best)) best = i;
        }
        return best;
    }

    Expression crossover(const Expression& a, const Expression& b) {
        const std::size_t i = pick(a.size());
        const std::size_t j = pick(b.size());
        return splice(a, i, b.nodes(), j, b.subtree_end(j));
    }

    Expression mutate(const Expression& a) {
        const std::size_t i = pick(a.size());
        const auto sub = grow(1 + pick(3), false);
        return splice(a, i, sub.nodes(), 0, sub.size());
    }

    double unit() { return std::uniform_real_distribution<double>(0.0, 1.0)(rng_); }
    double uniform(double lo, double hi) { return std::uniform_real_distribution<double>(lo, hi)(rng_); }
    std::size_t pick(std::size_t n) { return std::uniform_int_distribution<std::size_t>(0, n - 1)(rng_); }

private:
    static Expression splice(const Expression& a, std::size_t i, const std::vector<Node>& src, std::size_t from,
                             std::size_t to) {
        const auto& n = a.nodes();
        std::vector<Node> out(n.begin(), n.begin() + static_cast<std::ptrdiff_t>(i));
        out.insert(out.end(), src.begin() + static_cast<std::ptrdiff_t>(from),
                   src.begin() + static_cast<std::ptrdiff_t>(to));
        out.insert(out.end(), n.begin() + static_cast<std::ptrdiff_t>(a.subtree_end(i)), n.end());
        return Expression(std::move(out));
    }

    const RuleData& data_;
    const DiscoverOptions& opt_;
    std::mt19937_64 rng_;
};

}  // namespace

RuleFit discover_rule(const std::vector<RulePoint>& points, const DiscoverOptions& options) {
    if (points.empty()) throw InvalidArgument("empty dataset");
    if (points.size() < 10) throw InvalidArgument("discover_rule needs at least 10 points");
    if (options.budget < 1) throw InvalidArgument("budget must be >= 1");
    if (options.population < 2 || options.max_depth < 1) throw InvalidArgument("bad search options");
    const auto data = to_rule_data(points);
    Search search(data, options);

    std::size_t used = 0;
    Candidate best;
    auto consider = [&](const Candidate& c) {
        if (c.score < best.score) best = c;
    };
    auto done = [&] { return used >= options.budget || best.errors.rmse < 1e-12; };

    // Constant-mean seed first.
    std::vector<Candidate> pop;
    pop.push_back({Expression::constant(0.0), {}, {}, std::numeric_limits<double>::infinity()});
    search.evaluate(pop.back());
    ++used;
    consider(pop.back());

    std::vector<Candidate> fresh;
    const std::size_t init_depth = std::max<std::size_t>(1, options.max_depth > 2 ? options.max_depth - 2 : 1);
    for (std::size_t k = 1; k < options.population && used + fresh.size() < options.budget; ++k) {
        const std::size_t depth = 1 + k % init_depth;
        fresh.push_back({search.grow(depth, k % 2 == 0), {}, {}, std::numeric_limits<double>::infinity()});
    }
    parallel_for(fresh.size(), options.workers, [&](std::size_t i) { search.evaluate(fresh[i]); });
    for (auto& c : fresh) {
        ++used;
        consider(c);
        pop.push_back(std::move(c));
    }

    while (!done()) {
        std::vector<Candidate> children;
        const std::size_t n_children = std::min(options.population - 1, options.budget - used);
        for (std::size_t k = 0; k < n_children; ++k) {
            const auto& p = pop[search.tournament(pop)];
            Expression child = search.unit() < options.crossover_rate
                                   ? search.crossover(p.raw, pop[search.tournament(pop)].raw)
                                   : search.mutate(p.raw);
            if (child.depth() > options.max_depth) child = search.mutate(p.raw);
            if (child.depth() > options.max_depth) child = p.raw;
            children.push_back({std::move(child), {}, {}, std::numeric_limits<double>::infinity()});
        }
        parallel_for(children.size(), options.workers, [&](std::size_t i) { search.evaluate(children[i]); });
        std::vector<Candidate> next;
        next.push_back(best);
        for (auto& c : children) {
            ++used;
            consider(c);
            next.push_back(std::move(c));
            if (best.errors.rmse < 1e-12) break;
        }
        pop = std::move(next);
    }

    RuleFit fit;
    fit.expression = best.fitted;
    fit.rmse = best.errors.rmse;
    fit.mae = best.errors.mae;
    fit.complexity = best.fitted.size();
    fit.dataset_id = dataset_id(points);
    fit.score = best.score;
    fit.evaluations = used;
    return fit;
}

// ---------------------------------------------------------------------------

std::optional<std::string> find_formula_proposal(const std::string& text) {
    std::istringstream in(text);
    std::string line;
    while (std::getline(in, line)) {
        std::string lowered = line;
        for (auto& c : lowered) c = static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
        const auto pos = lowered.find("formula:");
        if (pos == std::string::npos) continue;
        std::string rest(trim(line.substr(pos + 8)));
        while (!rest.empty() && (rest.back() == '.' || rest.back() == '`')) rest.pop_back();
        while (!rest.empty() && rest.front() == '`') rest.erase(rest.begin());
        rest = std::string(trim(rest));
        if (rest.rfind("q =", 0) == 0 || rest.rfind("q=", 0) == 0) rest = std::string(trim(rest.substr(rest.find('=') + 1)));
        return rest;
    }
    return std::nullopt;
}

RefineResult refine_rule_via_dialogue(const RuleFit& fit, const std::vector<RulePoint>& points,
                                      const std::string& background, int n, const RoleAgents& agents,
                                      const DialogueContext& context, double complexity_penalty) {
    const auto data = to_rule_data(points);
    RefineResult out;
    out.fit = fit;
    const auto incumbent = evaluate_rule(fit.expression, data);
    out.fit.rmse = incumbent.rmse;
    out.fit.mae = incumbent.mae;
    out.fit.complexity = fit.expression.size();
    out.fit.score = penalized_score(incumbent.rmse, out.fit.complexity, complexity_penalty);

    std::ostringstream bg;
    bg << background << "\n\nCurrent purchasing formula: q = " << fit.expression.str() << " (rmse "
       << format_double(incumbent.rmse) << ", mean absolute error " << format_double(incumbent.mae)
       << ").\nA counter-proposal must be written on its own line as: formula: <expression>";
    out.transcript = run_dialogue(bg.str(), n, agents, context);

    const auto proposal = find_formula_proposal(out.transcript.back().text);
    if (!proposal) {
        out.no_proposal = true;
        return out;
    }
    Expression candidate;
    try {
        candidate = parse_expression(*proposal);
    } catch (const DataError&) {
        out.unparseable = true;
        return out;
    }
    const auto errors = evaluate_rule(candidate, data);
    const double score = penalized_score(errors.rmse, candidate.size(), complexity_penalty);
    if (std::isfinite(score) && score < out.fit.score) {
        out.fit.expression = candidate;
        out.fit.rmse = errors.rmse;
        out.fit.mae = errors.mae;
        out.fit.complexity = candidate.size();
        out.fit.score = score;
        out.improved = true;
    }
    return out;
}

void write_rules_json(std::ostream& out, const RuleFit& fit) {
    out << nlohmann::json{{"expression", fit.expression.str()},
                          {"rmse", fit.rmse},
                          {"complexity", fit.complexity},
                          {"dataset_id", fit.dataset_id}}
               .dump(2)
        << '\n';
}

void write_rule_points_csv(std::ostream& out, const std::vector<RulePoint>& points) {
    for (std::size_t f = 0; f < kRuleFeatureCount; ++f) out << kRuleFeatures[f] << ',';
    out << "quantity\n";
    for (const auto& p : points) {
        for (std::size_t f = 0; f < kRuleFeatureCount; ++f) {
            const auto it = p.features.find(kRuleFeatures[f]);
            out << (it == p.features.end() ? std::string() : format_double(it->second)) << ',';
        }
        out << format_double(p.target) << '\n';
    }
}

std::vector<RulePoint> read_rule_points_csv(std::istream& in) {
    std::string line;
    if (!std::getline(in, line)) throw DataError("empty rule dataset");
    const auto header = parse_csv_line(line);
    std::vector<RulePoint> out;
    std::size_t row = 0;
    while (std::getline(in, line)) {
        ++row;
        if (trim(line).empty()) continue;
        const auto fields = parse_csv_line(line);
        if (fields.size() != header.size()) throw DataError("rule dataset row " + std::to_string(row) + ": wrong field count");
        RulePoint p;
        bool has_target = false;
        for (std::size_t i = 0; i < header.size(); ++i) {
            if (trim(fields[i]).empty()) continue;
            const double v = parse_double(fields[i]);
            if (header[i] == "quantity") {
                p.target = v;
                has_target = true;
            } else {
                p.features[header[i]] = v;
            }
        }
        if (!has_target) throw DataError("rule dataset row " + std::to_string(row) + ": missing quantity");
        out.push_back(std::move(p));
    }
    return out;
}

}  // namespace malles
