#include "malles/prompt_builder.hpp"

#include <algorithm>
#include <cmath>
#include <istream>
#include <ostream>
#include <random>
#include <sstream>

#include <nlohmann/json.hpp>

namespace malles {

namespace {

std::string percent(double fraction) { return format_double(std::round(fraction * 10000.0) / 100.0) + "%"; }

std::string join(const std::vector<std::string>& parts, const std::string& sep) {
    std::string out;
    for (std::size_t i = 0; i < parts.size(); ++i) {
        if (i) out += sep;
        out += parts[i];
    }
    return out;
}

std::string category_of(const Catalog& catalog, const std::string& product_id) {
    const auto it = catalog.find(product_id);
    return it == catalog.end() ? std::string("unknown") : it->second.first_category();
}

std::string describe_shares(const std::map<std::string, double>& shares) {
    std::vector<std::pair<std::string, double>> sorted(shares.begin(), shares.end());
    std::stable_sort(sorted.begin(), sorted.end(), [](const auto& a, const auto& b) { return a.second > b.second; });
    std::vector<std::string> parts;
    for (const auto& [k, v] : sorted) parts.push_back(k + " " + percent(v));
    return join(parts, ", ");
}

}  // namespace

std::vector<std::string> RetailPrompt::candidate_ids() const {
    std::vector<std::string> out;
    out.reserve(candidates.size());
    for (const auto& c : candidates) out.push_back(c.product_id);
    return out;
}

MarketIndex::MarketIndex(const std::vector<TransactionRecord>& transactions, const Catalog& catalog) {
    for (const auto& t : transactions) {
        const MonthIndex m = month_of(t.timestamp);
        by_category_[category_of(catalog, t.product_id)][m] += t.quantity;
        by_product_[t.product_id][m] += t.quantity;
    }
}

namespace {

std::int64_t range_sum(const std::map<std::string, std::map<MonthIndex, std::int64_t>>& index, const std::string& key,
                       MonthIndex from, MonthIndex to) {
    const auto it = index.find(key);
    if (it == index.end()) return 0;
    std::int64_t total = 0;
    for (auto jt = it->second.lower_bound(from); jt != it->second.end() && jt->first <= to; ++jt) total += jt->second;
    return total;
}

}  // namespace

std::int64_t MarketIndex::category_quantity(const std::string& category, MonthIndex from, MonthIndex to) const {
    return range_sum(by_category_, category, from, to);
}

std::int64_t MarketIndex::product_quantity(const std::string& product_id, MonthIndex from, MonthIndex to) const {
    return range_sum(by_product_, product_id, from, to);
}

// ---------------------------------------------------------------------------

ProfileSummary summarize_profile(const CustomerRecord& customer, Timestamp cutoff, const Catalog& catalog,
                                 ChatBackend* backend) {
    ProfileSummary z;
    z.customer_id = customer.customer_id;
    const auto history = customer.history_before(cutoff);
    z.n_purchases = history.size();
    std::ostringstream text;
    text << "Customer " << customer.customer_id << " (" << customer.income_bracket << " income, "
         << to_string(customer.buyer_type) << " buyer).";
    if (history.empty()) {
        z.communication_style = "unknown";
        text << " New customer: no purchase history before " << format_timestamp(cutoff).substr(0, 10) << ".";
        z.text = text.str();
        return z;
    }

    double total = 0.0;
    double discounted = 0.0;
    std::size_t reviewed = 0;
    std::size_t online = 0;
    for (const auto& t : history) {
        const double q = static_cast<double>(t.quantity);
        total += q;
        if (t.discount > 0.0) discounted += q;
        z.category_preferences[category_of(catalog, t.product_id)] += q;
        if (t.review_score) ++reviewed;
        if (t.channel == "online") ++online;
    }
    for (auto& [cat, share] : z.category_preferences) share /= total;
    z.promotion_sensitivity = discounted / total;
    z.brand_affinities = inertia_weights(history, catalog);

    const double n = static_cast<double>(history.size());
    const double review_rate = static_cast<double>(reviewed) / n;
    const double online_rate = static_cast<double>(online) / n;
    z.communication_style = std::string(review_rate >= 0.5 ? "frequently leaves reviews" : "rarely leaves reviews") +
                            (online_rate >= 0.7   ? ", prefers online channels"
                             : online_rate <= 0.3 ? ", prefers in-store channels"
                                                  : ", uses mixed channels");

    text << " " << history.size() << " purchases totalling " << static_cast<std::int64_t>(total) << " units before "
         << format_timestamp(cutoff).substr(0, 10) << ".";
    text << " Category preferences: " << describe_shares(z.category_preferences) << ".";
    text << " Promotion sensitivity: " << percent(z.promotion_sensitivity) << " of units bought on promotion.";
    text << " Brand affinities: " << describe_shares(z.brand_affinities) << ".";
    const auto& last = history.back();
    text << " Last purchase: " << last.quantity << " x " << last.product_id << " at " << last.unit_price.str() << ".";
    text << " Communication style: " << z.communication_style << ".";
    z.text = text.str();

    if (backend) {
        ChatRequest req;
        req.task = ChatTask::profile_summary;
        req.messages = {{"system", "Summarize this customer's purchasing profile in two or three sentences."},
                        {"user", z.text}};
        z.text = backend->chat(req);
    }
    return z;
}

Shuffled shuffle_candidates(const std::vector<std::string>& candidates, std::uint64_t seed) {
    if (candidates.empty()) throw InvalidArgument("cannot shuffle an empty candidate list");
    Shuffled out;
    out.permutation.resize(candidates.size());
    for (std::size_t i = 0; i < candidates.size(); ++i) out.permutation[i] = i;
    std::mt19937_64 rng(splitmix64(seed));
    for (std::size_t i = candidates.size() - 1; i > 0; --i) {
        const std::size_t j = std::uniform_int_distribution<std::size_t>(0, i)(rng);
        std::swap(out.permutation[i], out.permutation[j]);
    }
    out.items.reserve(candidates.size());
    for (auto p : out.permutation) out.items.push_back(candidates[p]);
    return out;
}

RetailPrompt build_retail_prompt(const CustomerRecord& customer, const std::vector<std::string>& candidates,
                                 const std::vector<double>& discounts, const Catalog& catalog,
                                 const PromptOptions& options) {
    if (candidates.empty()) throw InvalidArgument("candidate list is empty");
    if (discounts.size() != candidates.size()) throw InvalidArgument("discounts not aligned with candidates");
    if (options.unit_prices && options.unit_prices->size() != candidates.size())
        throw InvalidArgument("unit prices not aligned with candidates");
    for (const auto& id : candidates)
        if (!catalog.count(id)) throw DataError("candidate not in catalog: " + id);

    RetailPrompt prompt;
    prompt.cutoff = options.cutoff;
    const MonthIndex month = month_of(options.cutoff);
    const auto history = customer.history_before(options.cutoff);
    const ProfileSummary z = summarize_profile(customer, options.cutoff, catalog);
    prompt.history_summary = z.text;
    prompt.demand = options.demand.empty()
                        ? "Looking to buy a product in " + catalog.at(candidates.front()).first_category() + "."
                        : options.demand;

    std::set<std::string> scope_brands;
    for (const auto& id : candidates) scope_brands.insert(catalog.at(id).brand());
    std::map<std::string, double> affinity;
    std::map<std::string, double> product_qty;
    double history_total = 0.0;
    if (!history.empty()) {
        affinity = inertia_weights(history, catalog, scope_brands);
        for (const auto& t : history) {
            product_qty[t.product_id] += static_cast<double>(t.quantity);
            history_total += static_cast<double>(t.quantity);
        }
        prompt.sidecar.last_purchased_product = history.back().product_id;
        double best = -1.0;
        for (const auto& [brand, w] : inertia_weights(history, catalog)) {
            if (w > best) {
                best = w;
                prompt.sidecar.top_brand = brand;
            }
        }
    }

    const MonthIndex from = month - options.trends_window;
    const MonthIndex to = month - 1;
    const auto shuffled = shuffle_candidates(candidates, options.seed);
    prompt.permutation = shuffled.permutation;
    prompt.sidecar.customer_id = customer.customer_id;
    for (std::size_t i = 0; i < shuffled.items.size(); ++i) {
        const std::size_t orig = shuffled.permutation[i];
        const auto& product = catalog.at(shuffled.items[i]);
        CandidateView view;
        view.product_id = product.product_id;
        view.display_name = product.display_name();
        view.category = product.first_category();
        view.brand = product.brand();
        view.unit_price = options.unit_prices ? (*options.unit_prices)[orig] : product.offer_at(month).unit_price;
        view.discount = discounts[orig];
        if (!(view.discount >= 0.0 && view.discount <= 1.0)) throw InvalidArgument("discount out of range");
        view.price_after_discount = view.unit_price.discounted(view.discount);
        view.attributes_summary = join(product.category_path, " / ") + "; brand " + view.brand;
        if (product.image_embedding) view.image_ref = "emb:" + product.product_id;
        view.review = product.rating();

        SidecarRow row;
        row.product_id = view.product_id;
        row.category = view.category;
        row.brand = view.brand;
        row.features.unit_price = view.unit_price;
        row.features.discount = view.discount;
        row.features.review = view.review;
        if (const auto it = affinity.find(view.brand); it != affinity.end()) row.features.brand_affinity = it->second;
        if (history_total > 0.0) {
            if (const auto it = product_qty.find(view.product_id); it != product_qty.end())
                row.features.history_share = it->second / history_total;
        }
        if (options.market) {
            const auto cat_q = options.market->category_quantity(view.category, from, to);
            if (cat_q > 0)
                row.features.trend_share = static_cast<double>(options.market->product_quantity(
                                               view.product_id, from, to)) /
                                           static_cast<double>(cat_q);
        }
        prompt.discounts.push_back(view.discount);
        prompt.review_ratings.push_back(view.review);
        prompt.candidates.push_back(std::move(view));
        prompt.sidecar.rows.push_back(std::move(row));
    }

    std::set<std::string> categories;
    for (const auto& c : prompt.candidates) categories.insert(c.category);
    std::ostringstream trends;
    if (!options.market) {
        trends << "no market data available";
    } else {
        bool first = true;
        for (const auto& cat : categories) {
            if (!first) trends << '\n';
            first = false;
            trends << "category " << cat << ": " << options.market->category_quantity(cat, from, to) << " units last "
                   << options.trends_window << " months";
        }
    }
    prompt.market_trends = trends.str();
    if (options.field) {
        embed_market_field(prompt, *options.field);
    } else {
        render_prompt_text(prompt);
    }
    return prompt;
}

void render_prompt_text(RetailPrompt& prompt) {
    std::ostringstream out;
    out << "# Retail purchase decision\n";
    out << "Customer: " << prompt.sidecar.customer_id << '\n';
    out << "Demand: " << prompt.demand << "\n\n";
    out << kSectionCandidates << '\n';
    for (std::size_t i = 0; i < prompt.candidates.size(); ++i) {
        const auto& c = prompt.candidates[i];
        out << i + 1 << ". [" << c.product_id << "] " << c.display_name << " | " << c.attributes_summary
            << " | list price " << c.unit_price.str() << " | discount " << percent(c.discount) << " | price "
            << c.price_after_discount.str();
        if (c.image_ref) out << " | image: " << *c.image_ref;
        out << '\n';
    }
    out << '\n' << kSectionHistory << '\n' << prompt.history_summary << "\n\n";
    out << kSectionTrends << '\n' << prompt.market_trends << "\n\n";
    out << kSectionReviews << '\n';
    for (std::size_t i = 0; i < prompt.candidates.size(); ++i) {
        const auto& c = prompt.candidates[i];
        out << i + 1 << ". [" << c.product_id << "] rating " << format_double(c.review) << "/5\n";
    }
    out << '\n' << kSectionPromotions << '\n';
    for (std::size_t i = 0; i < prompt.candidates.size(); ++i) {
        const auto& c = prompt.candidates[i];
        out << i + 1 << ". [" << c.product_id << "] ";
        if (c.discount > 0.0) {
            out << percent(c.discount) << " off, pay " << c.price_after_discount.str() << " instead of "
                << c.unit_price.str() << '\n';
        } else {
            out << "no promotion\n";
        }
    }
    out << "\nExplain your reasoning briefly, then give your decision as a single JSON object on its own line:\n"
        << R"({"buy": true, "product_id": "<id>", "quantity": <integer>} or {"buy": false})" << '\n';
    prompt.rendered_text = out.str();
}

void embed_market_field(RetailPrompt& prompt, const MarketField& field) {
    std::set<std::string> categories;
    for (const auto& c : prompt.candidates) categories.insert(c.category);
    std::ostringstream trends;
    bool first = true;
    prompt.sidecar.field_mean_quantity.clear();
    for (const auto& cat : categories) {
        const auto it = field.mean_quantity.find(cat);
        if (it == field.mean_quantity.end()) continue;
        prompt.sidecar.field_mean_quantity[cat] = it->second;
        if (!first) trends << '\n';
        first = false;
        trends << "category " << cat << ": mean purchase quantity " << format_double(std::round(it->second * 1e4) / 1e4)
               << " (market field iteration " << field.iteration << ")";
        if (const auto st = field.top_shares.find(cat); st != field.top_shares.end() && !st->second.empty()) {
            trends << "; top shares:";
            for (std::size_t i = 0; i < st->second.size(); ++i)
                trends << (i ? ", " : " ") << st->second[i].first << ' ' << percent(st->second[i].second);
        }
    }
    if (first) trends << "no market field for these categories";
    prompt.market_trends = trends.str();
    render_prompt_text(prompt);
}

RetailPrompt perturb_prices(const RetailPrompt& prompt, double factor) {
    if (!(factor >= 0.0)) throw InvalidArgument("price perturbation would make prices negative");
    RetailPrompt out = prompt;
    for (std::size_t i = 0; i < out.candidates.size(); ++i) {
        auto& c = out.candidates[i];
        c.unit_price = Money::from_double(c.unit_price.value() * factor);
        c.price_after_discount = c.unit_price.discounted(c.discount);
        out.sidecar.rows[i].features.unit_price = c.unit_price;
    }
    render_prompt_text(out);
    return out;
}

std::string render_alignment_output(const std::string& product_id, std::int64_t quantity) {
    return "{\"product_id\": " + nlohmann::json(product_id).dump() + ", \"quantity\": " + std::to_string(quantity) +
           "}";
}

// ---------------------------------------------------------------------------

RetailCases build_retail_cases(const std::vector<TransactionRecord>& transactions, const Catalog& catalog,
                               const CustomerMap& customers, const DatasetOptions& options) {
    RetailCases out;
    std::map<std::string, std::vector<std::string>> by_category;  // ids ascending
    for (const auto& [id, p] : catalog) by_category[p.first_category()].push_back(id);
    const MarketIndex market(transactions, catalog);
    std::set<std::string> short_categories;

    for (std::size_t i = 0; i < transactions.size(); ++i) {
        const auto& t = transactions[i];
        const auto pit = catalog.find(t.product_id);
        if (pit == catalog.end()) {
            ++out.report.skipped_unknown_product;
            continue;
        }
        const auto& category = pit->second.first_category();
        if (!options.eligible_categories.empty() && !options.eligible_categories.count(category)) continue;
        if (!options.eligible_customers.empty() && !options.eligible_customers.count(t.customer_id)) continue;
        const auto cit = customers.find(t.customer_id);
        if (cit == customers.end()) {
            ++out.report.skipped_unknown_customer;
            continue;
        }
        ++out.report.eligible;

        const std::uint64_t example_seed = derive_seed(options.seed, i);
        std::vector<std::string> pool;
        for (const auto& id : by_category.at(category))
            if (id != t.product_id) pool.push_back(id);
        std::mt19937_64 rng(example_seed);
        const std::size_t k = std::min(options.distractors, pool.size());
        for (std::size_t j = 0; j < k; ++j) {
            const std::size_t r = std::uniform_int_distribution<std::size_t>(j, pool.size() - 1)(rng);
            std::swap(pool[j], pool[r]);
        }
        if (k < options.distractors) {
            ++out.report.short_candidate_sets;
            short_categories.insert(category);
        }

        const MonthIndex month = month_of(t.timestamp);
        std::vector<std::string> ids{t.product_id};
        std::vector<double> discounts{t.discount};
        std::vector<Money> prices{t.unit_price};
        for (std::size_t j = 0; j < k; ++j) {
            const auto offer = catalog.at(pool[j]).offer_at(month);
            ids.push_back(pool[j]);
            discounts.push_back(offer.discount);
            prices.push_back(offer.unit_price);
        }

        PromptOptions popts;
        popts.cutoff = t.timestamp;
        popts.trends_window = options.trends_window;
        popts.seed = derive_seed(example_seed, 1);
        popts.unit_prices = std::move(prices);
        popts.market = &market;

        RetailCase c;
        char id[32];
        std::snprintf(id, sizeof id, "txn-%06zu", i);
        c.instance_id = id;
        c.transaction_index = i;
        c.truth = t;
        c.category = category;
        c.income_bracket = cit->second.income_bracket;
        c.prompt = build_retail_prompt(cit->second, ids, discounts, catalog, popts);
        out.cases.push_back(std::move(c));
    }
    out.report.examples = out.cases.size();
    out.report.short_categories.assign(short_categories.begin(), short_categories.end());
    return out;
}

AlignmentDataset build_alignment_dataset(const std::vector<TransactionRecord>& transactions, const Catalog& catalog,
                                         const CustomerMap& customers, const DatasetOptions& options) {
    auto cases = build_retail_cases(transactions, catalog, customers, options);
    AlignmentDataset out;
    out.report = cases.report;
    out.examples.reserve(cases.cases.size());
    for (const auto& c : cases.cases)
        out.examples.push_back({c.prompt.rendered_text, render_alignment_output(c.truth.product_id, c.truth.quantity)});
    return out;
}

void write_alignment_jsonl(std::ostream& out, const std::vector<AlignmentExample>& examples) {
    for (const auto& e : examples) out << nlohmann::json{{"input", e.input}, {"output", e.output}}.dump() << '\n';
}

std::vector<AlignmentExample> read_alignment_jsonl(std::istream& in) {
    std::vector<AlignmentExample> out;
    std::string line;
    while (std::getline(in, line)) {
        if (trim(line).empty()) continue;
        const auto obj = nlohmann::json::parse(line);
        out.push_back({obj.at("input").get<std::string>(), obj.at("output").get<std::string>()});
    }
    return out;
}

}  // namespace malles
