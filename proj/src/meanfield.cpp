#include "malles/meanfield.hpp"

#include <algorithm>
#include <cmath>
#include <ostream>

#include <nlohmann/json.hpp>

namespace malles {

void WindowConfig::validate() const {
    if (window < 1) throw InvalidArgument("window must be >= 1");
    if (!(eta > 0.0 && eta <= 1.0)) throw InvalidArgument("eta must be in (0, 1]");
}

WindowAverage window_average(const std::vector<std::pair<MonthIndex, std::int64_t>>& series, int window,
                             MonthIndex as_of_month) {
    if (window < 1) throw InvalidArgument("window must be >= 1");
    WindowAverage out;
    bool any_before = false;
    std::int64_t total = 0;
    for (const auto& [month, q] : series) {
        if (month >= as_of_month) continue;
        any_before = true;
        if (month >= as_of_month - window) total += q;
    }
    out.empty = !any_before;
    out.value = static_cast<double>(total) / static_cast<double>(window);
    return out;
}

void MeanFieldState::validate() const {
    for (const auto& [cat, q] : mean_quantity)
        if (!(q >= 0.0) || !std::isfinite(q)) throw InvalidArgument("negative mean quantity for " + cat);
    for (const auto& [cat, s] : shares) {
        double total = 0.0;
        for (const auto& [id, v] : s) {
            if (!(v >= 0.0)) throw InvalidArgument("negative share in " + cat);
            total += v;
        }
        if (!s.empty() && std::abs(total - 1.0) > 1e-9) throw InvalidArgument("shares of " + cat + " do not sum to 1");
    }
}

double sup_distance(const MeanFieldState& a, const MeanFieldState& b) {
    double d = 0.0;
    auto lookup = [](const auto& m, const std::string& k) {
        const auto it = m.find(k);
        return it == m.end() ? 0.0 : it->second;
    };
    std::set<std::string> cats;
    for (const auto& [c, v] : a.mean_quantity) cats.insert(c);
    for (const auto& [c, v] : b.mean_quantity) cats.insert(c);
    for (const auto& c : cats) d = std::max(d, std::abs(lookup(a.mean_quantity, c) - lookup(b.mean_quantity, c)));
    std::set<std::string> share_cats;
    for (const auto& [c, v] : a.shares) share_cats.insert(c);
    for (const auto& [c, v] : b.shares) share_cats.insert(c);
    static const std::map<std::string, double> kEmpty;
    for (const auto& c : share_cats) {
        const auto ia = a.shares.find(c);
        const auto ib = b.shares.find(c);
        const auto& sa = ia == a.shares.end() ? kEmpty : ia->second;
        const auto& sb = ib == b.shares.end() ? kEmpty : ib->second;
        std::set<std::string> ids;
        for (const auto& [id, v] : sa) ids.insert(id);
        for (const auto& [id, v] : sb) ids.insert(id);
        for (const auto& id : ids) d = std::max(d, std::abs(lookup(sa, id) - lookup(sb, id)));
    }
    return d;
}

namespace {

std::map<std::string, std::vector<std::string>> products_by_category(const Catalog& catalog) {
    std::map<std::string, std::vector<std::string>> out;
    for (const auto& [id, p] : catalog)
        if (!p.category_path.empty()) out[p.first_category()].push_back(id);
    return out;
}

std::map<std::string, double> smoothed_shares(const std::vector<std::string>& products,
                                              const std::map<std::string, double>& quantity, double smoothing) {
    double total = 0.0;
    for (const auto& id : products) {
        const auto it = quantity.find(id);
        total += (it == quantity.end() ? 0.0 : it->second) + smoothing;
    }
    std::map<std::string, double> out;
    for (const auto& id : products) {
        const auto it = quantity.find(id);
        const double q = (it == quantity.end() ? 0.0 : it->second) + smoothing;
        out[id] = total > 0.0 ? q / total : 1.0 / static_cast<double>(products.size());
    }
    return out;
}

struct Tally {
    double quantity = 0.0;
    std::size_t purchases = 0;
    std::map<std::string, double> by_product;
};

}  // namespace

MeanFieldState init_meanfield(const std::vector<TransactionRecord>& transactions, const Catalog& catalog, int window,
                              MonthIndex as_of_month, double share_smoothing) {
    if (window < 1) throw InvalidArgument("window must be >= 1");
    if (!(share_smoothing >= 0.0)) throw InvalidArgument("smoothing must be >= 0");
    std::map<std::string, Tally> tally;
    bool any = false;
    for (const auto& t : transactions) {
        const auto m = month_of(t.timestamp);
        if (m >= as_of_month || m < as_of_month - window) continue;
        const auto it = catalog.find(t.product_id);
        if (it == catalog.end()) continue;
        auto& c = tally[it->second.first_category()];
        c.quantity += static_cast<double>(t.quantity);
        c.purchases += 1;
        c.by_product[t.product_id] += static_cast<double>(t.quantity);
        any = true;
    }
    if (!any) throw DataError("no purchases in the window before the mean-field start month");

    MeanFieldState mu;
    for (const auto& [cat, products] : products_by_category(catalog)) {
        const auto it = tally.find(cat);
        const Tally empty;
        const auto& c = it == tally.end() ? empty : it->second;
        mu.mean_quantity[cat] = c.purchases ? c.quantity / static_cast<double>(c.purchases) : 0.0;
        mu.shares[cat] = smoothed_shares(products, c.by_product, share_smoothing);
    }
    mu.validate();
    return mu;
}

MeanFieldState aggregate_batch(const std::vector<BatchDecision>& batch, const Catalog& catalog,
                               const MeanFieldState& prior, double share_smoothing) {
    std::map<std::string, Tally> tally;
    for (const auto& d : batch) {
        if (!d.product_id) continue;
        auto& c = tally[d.category];
        c.quantity += d.quantity;
        c.purchases += 1;
        c.by_product[*d.product_id] += d.quantity;
    }
    MeanFieldState nu = prior;
    const auto products = products_by_category(catalog);
    for (const auto& [cat, c] : tally) {
        nu.mean_quantity[cat] = c.quantity / static_cast<double>(c.purchases);
        const auto it = products.find(cat);
        if (it != products.end()) {
            nu.shares[cat] = smoothed_shares(it->second, c.by_product, share_smoothing);
        } else {
            std::vector<std::string> ids;
            for (const auto& [id, q] : c.by_product) ids.push_back(id);
            nu.shares[cat] = smoothed_shares(ids, c.by_product, share_smoothing);
        }
    }
    return nu;
}

MeanFieldState meanfield_step(const MeanFieldState& mu, const BatchRunner& runner, const WindowConfig& config,
                              const Catalog& catalog, double share_smoothing) {
    config.validate();
    const auto batch = runner(mu);
    const bool any = std::any_of(batch.begin(), batch.end(), [](const auto& d) { return d.product_id.has_value(); });
    if (batch.empty()) throw Error("mean-field batch produced no decisions");
    const auto nu = any ? aggregate_batch(batch, catalog, mu, share_smoothing) : mu;

    MeanFieldState next;
    next.iteration = mu.iteration + 1;
    const double eta = config.eta;
    for (const auto& [cat, v] : nu.mean_quantity) {
        const auto it = mu.mean_quantity.find(cat);
        const double prev = it == mu.mean_quantity.end() ? v : it->second;
        next.mean_quantity[cat] = (1.0 - eta) * prev + eta * v;
    }
    for (const auto& [cat, s] : nu.shares) {
        const auto it = mu.shares.find(cat);
        auto& out = next.shares[cat];
        for (const auto& [id, v] : s) {
            double prev = v;
            if (it != mu.shares.end()) {
                const auto jt = it->second.find(id);
                prev = jt == it->second.end() ? 0.0 : jt->second;
            }
            out[id] = (1.0 - eta) * prev + eta * v;
        }
    }
    next.validate();
    return next;
}

MeanFieldRun run_meanfield(const WindowConfig& config, const MeanFieldState& mu0, const BatchRunner& runner,
                           double tol, int max_iter, const Catalog& catalog, double share_smoothing) {
    config.validate();
    if (!(tol > 0.0)) throw InvalidArgument("tol must be > 0");
    if (max_iter < 1) throw InvalidArgument("max_iter must be >= 1");
    MeanFieldRun run;
    run.trajectory.push_back(mu0);
    for (int it = 0; it < max_iter; ++it) {
        auto next = meanfield_step(run.trajectory.back(), runner, config, catalog, share_smoothing);
        const double d = sup_distance(run.trajectory.back(), next);
        run.trajectory.push_back(std::move(next));
        run.deltas.push_back(d);
        if (d < tol) {
            run.converged = true;
            break;
        }
    }
    run.final_state = run.trajectory.back();
    return run;
}

MarketField to_market_field(const MeanFieldState& mu, std::size_t top_k) {
    MarketField f;
    f.iteration = mu.iteration;
    f.mean_quantity = mu.mean_quantity;
    for (const auto& [cat, s] : mu.shares) {
        std::vector<std::pair<std::string, double>> v(s.begin(), s.end());
        std::stable_sort(v.begin(), v.end(), [](const auto& a, const auto& b) { return a.second > b.second; });
        if (v.size() > top_k) v.resize(top_k);
        f.top_shares[cat] = std::move(v);
    }
    return f;
}

void write_trajectory_jsonl(std::ostream& out, const MeanFieldRun& run) {
    for (std::size_t t = 0; t < run.trajectory.size(); ++t) {
        const auto& mu = run.trajectory[t];
        nlohmann::json j;
        j["iteration"] = mu.iteration;
        j["delta"] = t == 0 ? nlohmann::json(nullptr) : nlohmann::json(run.deltas[t - 1]);
        j["mean_quantity"] = mu.mean_quantity;
        j["shares"] = mu.shares;
        out << j.dump() << '\n';
    }
}

}  // namespace malles
