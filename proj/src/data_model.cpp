#include "malles/data_model.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>
#include <random>
#include <sstream>

#include <nlohmann/json.hpp>

namespace malles {

using nlohmann::json;

namespace {

const std::vector<std::string> kTransactionFields{"timestamp",  "customer_id", "customer_type",
                                                  "product_id", "quantity",    "unit_price",
                                                  "discount",   "channel",     "review_score"};

FileFormat detect_format(const std::filesystem::path& path, FileFormat requested) {
    if (requested != FileFormat::automatic) return requested;
    const auto ext = path.extension().string();
    if (ext == ".csv") return FileFormat::csv;
    if (ext == ".jsonl" || ext == ".json" || ext == ".ndjson") return FileFormat::jsonl;
    throw DataError("cannot infer file format from extension: " + path.string());
}

std::ifstream open_input(const std::filesystem::path& path) {
    if (!std::filesystem::exists(path)) throw DataError("missing file: " + path.string());
    std::ifstream in(path, std::ios::binary);
    if (!in) throw DataError("cannot open file: " + path.string());
    return in;
}

/// One input row as a JSON object. CSV rows become objects of strings keyed by
/// header name so both formats share the same field readers.
struct RawRow {
    std::size_t index;
    json object;
    std::string error;  // non-empty when the row could not be tokenized
};

std::vector<RawRow> read_rows(const std::filesystem::path& path, FileFormat format,
                              const std::vector<std::string>& required_columns) {
    auto in = open_input(path);
    std::vector<RawRow> rows;
    std::string line;
    if (format == FileFormat::csv) {
        std::vector<std::string> header;
        while (std::getline(in, line)) {
            if (!trim(line).empty()) {
                header = parse_csv_line(line);
                break;
            }
        }
        if (header.empty()) return rows;
        for (auto& h : header) h = trim(h);
        if (!header.empty() && header[0].rfind("\xEF\xBB\xBF", 0) == 0) header[0] = header[0].substr(3);
        for (const auto& col : required_columns) {
            if (std::find(header.begin(), header.end(), col) == header.end())
                throw DataError("unmappable column: " + col);
        }
        std::size_t index = 0;
        while (std::getline(in, line)) {
            if (trim(line).empty()) continue;
            RawRow row{index++, json::object(), {}};
            const auto fields = parse_csv_line(line);
            if (fields.size() != header.size()) {
                row.error = "wrong field count";
            } else {
                for (std::size_t i = 0; i < header.size(); ++i) row.object[header[i]] = fields[i];
            }
            rows.push_back(std::move(row));
        }
    } else {
        std::size_t index = 0;
        while (std::getline(in, line)) {
            if (trim(line).empty()) continue;
            RawRow row{index++, json::object(), {}};
            try {
                row.object = json::parse(line);
                if (!row.object.is_object()) row.error = "row is not a JSON object";
            } catch (const json::parse_error&) {
                row.error = "malformed JSON";
            }
            rows.push_back(std::move(row));
        }
        if (!rows.empty()) {
            // Column mapping is checked against the first well-formed object.
            for (const auto& row : rows) {
                if (!row.error.empty()) continue;
                for (const auto& col : required_columns)
                    if (!row.object.contains(col)) throw DataError("unmappable column: " + col);
                break;
            }
        }
    }
    return rows;
}

std::optional<std::string> field_text(const json& obj, const std::string& key) {
    const auto it = obj.find(key);
    if (it == obj.end() || it->is_null()) return std::nullopt;
    if (it->is_string()) {
        auto s = trim(it->get<std::string>());
        if (s.empty()) return std::nullopt;
        return s;
    }
    if (it->is_number_integer()) return std::to_string(it->get<std::int64_t>());
    if (it->is_number()) return format_double(it->get<double>());
    if (it->is_boolean()) return it->get<bool>() ? "true" : "false";
    throw DataError("field " + key + " has unexpected type");
}

std::string required_text(const json& obj, const std::string& key) {
    auto v = field_text(obj, key);
    if (!v) throw DataError("missing " + key);
    return *v;
}

void check_reject_fraction(std::size_t total, std::size_t rejected, double max_fraction,
                           const std::filesystem::path& path) {
    if (total > 0 && static_cast<double>(rejected) > max_fraction * static_cast<double>(total)) {
        throw DataError("more than " + format_double(max_fraction * 100.0) + "% of rows rejected in " + path.string() +
                        " (" + std::to_string(rejected) + "/" + std::to_string(total) + "); schema mismatch?");
    }
}

TransactionRecord parse_transaction(const json& obj, const SchemaConfig& schema) {
    TransactionRecord t;
    try {
        t.timestamp = parse_timestamp(required_text(obj, schema.column("timestamp")));
    } catch (const DataError&) {
        throw DataError("malformed timestamp");
    }
    if ((schema.min_timestamp && t.timestamp < *schema.min_timestamp) ||
        (schema.max_timestamp && t.timestamp > *schema.max_timestamp))
        throw DataError("timestamp outside configured range");
    t.customer_id = required_text(obj, schema.column("customer_id"));
    try {
        t.customer_type = parse_buyer_type(required_text(obj, schema.column("customer_type")));
    } catch (const DataError&) {
        throw DataError("unknown customer type");
    }
    t.product_id = required_text(obj, schema.column("product_id"));
    try {
        t.quantity = parse_int(required_text(obj, schema.column("quantity")));
    } catch (const DataError&) {
        throw DataError("malformed quantity");
    }
    if (t.quantity < 1) throw DataError("quantity must be at least 1");
    t.unit_price = Money::parse(required_text(obj, schema.column("unit_price")));
    if (t.unit_price.cents() < 0) throw DataError("negative unit price");
    t.discount = parse_double(required_text(obj, schema.column("discount")));
    if (!(t.discount >= 0.0 && t.discount <= 1.0)) throw DataError("discount out of range");
    t.channel = field_text(obj, schema.column("channel")).value_or("");
    if (auto r = field_text(obj, schema.column("review_score"))) {
        const double score = parse_double(*r);
        if (!(score >= 0.0 && score <= 5.0)) throw DataError("review score out of range");
        t.review_score = score;
    }
    return t;
}

Money json_money(const json& v) {
    if (v.is_number_integer()) return Money::from_cents(v.get<std::int64_t>() * 100);
    if (v.is_number()) return Money::parse(format_double(v.get<double>()));
    if (v.is_string()) return Money::parse(v.get<std::string>());
    throw DataError("malformed currency value");
}

/// CSV encodings for nested product fields: category_path "A/B",
/// attributes "k=v;k=v", image_embedding "x|y|z", sales_series "YYYY-MM:q|...".
json expand_product_csv(const json& row) {
    json obj = row;
    auto text = [&](const char* key) -> std::string {
        const auto it = row.find(key);
        return it != row.end() && it->is_string() ? trim(it->get<std::string>()) : std::string{};
    };
    json path = json::array();
    for (const auto& part : split(text("category_path"), '/'))
        if (!trim(part).empty()) path.push_back(trim(part));
    obj["category_path"] = path;
    json attrs = json::object();
    if (const auto a = text("attributes"); !a.empty()) {
        for (const auto& kv : split(a, ';')) {
            const auto eq = kv.find('=');
            if (eq == std::string::npos) throw DataError("malformed attributes");
            attrs[trim(kv.substr(0, eq))] = trim(kv.substr(eq + 1));
        }
    }
    obj["attributes"] = attrs;
    if (const auto e = text("image_embedding"); !e.empty()) {
        json emb = json::array();
        for (const auto& x : split(e, '|')) emb.push_back(parse_double(x));
        obj["image_embedding"] = emb;
    } else {
        obj.erase("image_embedding");
    }
    json sales = json::array();
    if (const auto s = text("sales_series"); !s.empty()) {
        for (const auto& entry : split(s, '|')) {
            const auto colon = entry.find(':');
            if (colon == std::string::npos) throw DataError("malformed sales_series");
            sales.push_back(json::array({trim(entry.substr(0, colon)), parse_int(entry.substr(colon + 1))}));
        }
    }
    obj["sales_series"] = sales;
    return obj;
}

ProductRecord parse_product(const json& obj) {
    ProductRecord p;
    p.product_id = required_text(obj, "product_id");
    const auto& path = obj.at("category_path");
    if (!path.is_array()) throw DataError("category_path must be a list");
    for (const auto& c : path) p.category_path.push_back(c.get<std::string>());
    if (p.category_path.empty()) throw DataError("empty category_path");
    p.base_price = json_money(obj.at("base_price"));
    if (p.base_price.cents() < 0) throw DataError("negative base price");
    if (auto it = obj.find("attributes"); it != obj.end() && !it->is_null()) {
        for (const auto& [k, v] : it->items()) p.attributes[k] = v.is_string() ? v.get<std::string>() : v.dump();
    }
    if (auto it = obj.find("image_embedding"); it != obj.end() && !it->is_null()) {
        p.image_embedding = it->get<std::vector<double>>();
    }
    if (auto it = obj.find("sales_series"); it != obj.end() && !it->is_null()) {
        for (const auto& entry : *it) {
            const MonthIndex m = parse_month(entry.at(0).get<std::string>());
            if (!p.sales_series.empty() && m <= p.sales_series.back().first)
                throw DataError("sales_series months not strictly increasing");
            p.sales_series.emplace_back(m, entry.at(1).get<std::int64_t>());
        }
    }
    if (auto it = obj.find("price_series"); it != obj.end() && !it->is_null()) {
        for (const auto& entry : *it) {
            PricePoint pp;
            pp.month = parse_month(entry.at("month").get<std::string>());
            pp.unit_price = json_money(entry.at("unit_price"));
            pp.discount = entry.at("discount").get<double>();
            if (!(pp.discount >= 0.0 && pp.discount <= 1.0)) throw DataError("discount out of range");
            if (!p.price_series.empty() && pp.month <= p.price_series.back().month)
                throw DataError("price_series months not strictly increasing");
            p.price_series.push_back(pp);
        }
    }
    return p;
}

json money_json(Money m) { return json(m.value()); }

}  // namespace

// ---------------------------------------------------------------------------

std::string to_string(BuyerType type) { return type == BuyerType::retail ? "retail" : "wholesale"; }

BuyerType parse_buyer_type(std::string_view text) {
    const auto s = trim(text);
    if (s == "retail") return BuyerType::retail;
    if (s == "wholesale") return BuyerType::wholesale;
    throw DataError("unknown buyer type: " + s);
}

std::string ProductRecord::brand() const {
    const auto it = attributes.find("brand");
    return it == attributes.end() ? product_id : it->second;
}

double ProductRecord::rating() const {
    const auto it = attributes.find("rating");
    if (it == attributes.end()) return 0.0;
    return parse_double(it->second);
}

std::string ProductRecord::display_name() const {
    const auto it = attributes.find("name");
    return it == attributes.end() ? product_id : it->second;
}

PricePoint ProductRecord::offer_at(MonthIndex month) const {
    const auto it = std::lower_bound(price_series.begin(), price_series.end(), month,
                                     [](const PricePoint& p, MonthIndex m) { return p.month < m; });
    if (it != price_series.end() && it->month == month) return *it;
    return PricePoint{month, base_price, 0.0};
}

void StyleParams::validate() const {
    if (!(discount_sensitivity >= 0.0)) throw InvalidArgument("discount_sensitivity must be >= 0");
    if (!(loss_aversion >= 0.0)) throw InvalidArgument("loss_aversion must be >= 0");
    if (!(brand_loyalty >= 0.0 && brand_loyalty <= 1.0)) throw InvalidArgument("brand_loyalty must be in [0,1]");
}

std::vector<TransactionRecord> CustomerRecord::history_before(Timestamp cutoff) const {
    std::vector<TransactionRecord> out;
    for (const auto& t : purchase_history)
        if (t.timestamp < cutoff) out.push_back(t);
    return out;
}

std::string SchemaConfig::column(const std::string& canonical) const {
    const auto it = columns.find(canonical);
    return it == columns.end() ? canonical : it->second;
}

std::vector<std::string> parse_csv_line(std::string_view line) {
    std::vector<std::string> out;
    std::string cur;
    bool quoted = false;
    for (std::size_t i = 0; i < line.size(); ++i) {
        const char c = line[i];
        if (quoted) {
            if (c == '"') {
                if (i + 1 < line.size() && line[i + 1] == '"') {
                    cur += '"';
                    ++i;
                } else {
                    quoted = false;
                }
            } else {
                cur += c;
            }
        } else if (c == '"') {
            quoted = true;
        } else if (c == ',') {
            out.push_back(std::move(cur));
            cur.clear();
        } else if (c != '\r') {
            cur += c;
        }
    }
    out.push_back(std::move(cur));
    return out;
}

Ingested<std::vector<TransactionRecord>> ingest_transactions(const std::filesystem::path& path,
                                                             const SchemaConfig& schema) {
    const auto format = detect_format(path, schema.format);
    std::vector<std::string> required;
    for (const auto& f : kTransactionFields)
        if (f != "review_score" && f != "channel") required.push_back(schema.column(f));
    const auto rows = read_rows(path, format, required);

    Ingested<std::vector<TransactionRecord>> result;
    for (const auto& row : rows) {
        if (!row.error.empty()) {
            result.rejects.push_back({row.index, row.error});
            continue;
        }
        try {
            result.records.push_back(parse_transaction(row.object, schema));
        } catch (const DataError& e) {
            result.rejects.push_back({row.index, e.what()});
        }
    }
    check_reject_fraction(rows.size(), result.rejects.size(), schema.max_reject_fraction, path);
    return result;
}

Ingested<Catalog> ingest_products(const std::filesystem::path& path, const SchemaConfig& schema) {
    const auto format = detect_format(path, schema.format);
    const auto rows = read_rows(path, format, {"product_id", "category_path", "base_price"});
    Ingested<Catalog> result;
    for (const auto& row : rows) {
        if (!row.error.empty()) {
            result.rejects.push_back({row.index, row.error});
            continue;
        }
        ProductRecord p;
        try {
            p = parse_product(format == FileFormat::csv ? expand_product_csv(row.object) : row.object);
        } catch (const DataError& e) {
            result.rejects.push_back({row.index, e.what()});
            continue;
        } catch (const json::exception& e) {
            result.rejects.push_back({row.index, std::string("malformed product: ") + e.what()});
            continue;
        }
        const auto id = p.product_id;
        if (!result.records.emplace(id, std::move(p)).second) throw DataError("duplicate id: " + id);
    }
    check_reject_fraction(rows.size(), result.rejects.size(), schema.max_reject_fraction, path);
    return result;
}

CustomerMap ingest_customers(const std::filesystem::path& path, const std::vector<TransactionRecord>& transactions) {
    const auto format = detect_format(path, FileFormat::automatic);
    const auto rows = read_rows(path, format, {"customer_id"});
    CustomerMap customers;
    for (const auto& row : rows) {
        if (!row.error.empty()) throw DataError("customers row " + std::to_string(row.index) + ": " + row.error);
        const json& obj = row.object;
        CustomerRecord c;
        c.customer_id = required_text(obj, "customer_id");
        c.income_bracket = field_text(obj, "income_bracket").value_or("unknown");
        c.buyer_type = parse_buyer_type(field_text(obj, "buyer_type").value_or("retail"));
        const json* style = &obj;
        if (auto it = obj.find("style_params"); it != obj.end() && it->is_object()) style = &*it;
        if (auto v = field_text(*style, "discount_sensitivity")) c.style.discount_sensitivity = parse_double(*v);
        if (auto v = field_text(*style, "loss_aversion")) c.style.loss_aversion = parse_double(*v);
        if (auto v = field_text(*style, "brand_loyalty")) c.style.brand_loyalty = parse_double(*v);
        if (auto it = style->find("traits"); it != style->end()) {
            if (it->is_array()) {
                c.style.traits = it->get<std::vector<std::string>>();
            } else if (it->is_string() && !it->get<std::string>().empty()) {
                c.style.traits = split(it->get<std::string>(), '|');
            }
        }
        c.style.validate();
        const auto id = c.customer_id;
        if (!customers.emplace(id, std::move(c)).second) throw DataError("duplicate id: " + id);
    }
    link_purchase_histories(customers, transactions);
    return customers;
}

void link_purchase_histories(CustomerMap& customers, const std::vector<TransactionRecord>& transactions) {
    for (auto& [id, c] : customers) c.purchase_history.clear();
    for (const auto& t : transactions) {
        auto [it, inserted] = customers.try_emplace(t.customer_id);
        auto& c = it->second;
        if (inserted) {
            c.customer_id = t.customer_id;
            c.income_bracket = "unknown";
            c.buyer_type = t.customer_type;
        } else if (c.buyer_type != t.customer_type) {
            throw DataError("customer " + t.customer_id + " is " + to_string(c.buyer_type) +
                            " but has a " + to_string(t.customer_type) + " transaction");
        }
        c.purchase_history.push_back(t);
    }
    for (auto& [id, c] : customers) {
        std::stable_sort(c.purchase_history.begin(), c.purchase_history.end(),
                         [](const auto& a, const auto& b) { return a.timestamp < b.timestamp; });
    }
}

namespace {

std::string csv_escape(const std::string& s) {
    if (s.find_first_of(",\"\n") == std::string::npos) return s;
    std::string out = "\"";
    for (char c : s) {
        if (c == '"') out += '"';
        out += c;
    }
    return out + "\"";
}

}  // namespace

void write_transactions_csv(std::ostream& out, const std::vector<TransactionRecord>& records) {
    out << "timestamp,customer_id,customer_type,product_id,quantity,unit_price,discount,channel,review_score\n";
    for (const auto& t : records) {
        out << format_timestamp(t.timestamp) << ',' << csv_escape(t.customer_id) << ',' << to_string(t.customer_type)
            << ',' << csv_escape(t.product_id) << ',' << t.quantity << ',' << t.unit_price.str() << ','
            << format_double(t.discount) << ',' << csv_escape(t.channel) << ','
            << (t.review_score ? format_double(*t.review_score) : std::string{}) << '\n';
    }
}

void write_products_jsonl(std::ostream& out, const Catalog& catalog) {
    for (const auto& [id, p] : catalog) {
        json obj;
        obj["product_id"] = p.product_id;
        obj["category_path"] = p.category_path;
        obj["base_price"] = money_json(p.base_price);
        obj["attributes"] = p.attributes;
        obj["image_embedding"] = p.image_embedding ? json(*p.image_embedding) : json(nullptr);
        json sales = json::array();
        for (const auto& [m, q] : p.sales_series) sales.push_back(json::array({format_month(m), q}));
        obj["sales_series"] = sales;
        json prices = json::array();
        for (const auto& pp : p.price_series)
            prices.push_back({{"month", format_month(pp.month)},
                              {"unit_price", money_json(pp.unit_price)},
                              {"discount", pp.discount}});
        obj["price_series"] = prices;
        out << obj.dump() << '\n';
    }
}

void write_customers_jsonl(std::ostream& out, const CustomerMap& customers) {
    for (const auto& [id, c] : customers) {
        json obj;
        obj["customer_id"] = c.customer_id;
        obj["income_bracket"] = c.income_bracket;
        obj["buyer_type"] = to_string(c.buyer_type);
        obj["style_params"] = {{"discount_sensitivity", c.style.discount_sensitivity},
                               {"loss_aversion", c.style.loss_aversion},
                               {"brand_loyalty", c.style.brand_loyalty},
                               {"traits", c.style.traits}};
        out << obj.dump() << '\n';
    }
}

void write_reject_report(std::ostream& out, const std::vector<RejectedRow>& rejects) {
    for (const auto& r : rejects) out << json{{"row_index", r.row_index}, {"reason", r.reason}}.dump() << '\n';
}

// ---------------------------------------------------------------------------

OodSplit build_ood_split(const Catalog& catalog, const std::set<std::string>& train_names,
                         const std::set<std::string>& test_names) {
    std::set<std::string> known;
    for (const auto& [id, p] : catalog) known.insert(p.first_category());
    for (const auto& set : {train_names, test_names}) {
        for (const auto& name : set)
            if (!known.count(name)) throw InvalidArgument("unknown category: " + name);
    }
    for (const auto& name : train_names)
        if (test_names.count(name)) throw InvalidArgument("overlapping categories: " + name);
    return OodSplit{train_names, test_names};
}

std::set<std::string> sample_bottom_half_customers(const std::vector<TransactionRecord>& transactions,
                                                   std::uint64_t /*seed*/) {
    if (transactions.empty()) throw InvalidArgument("no transactions");
    std::map<std::string, std::int64_t> volume;
    for (const auto& t : transactions) volume[t.customer_id] += t.quantity;
    if (volume.size() < 2) throw InvalidArgument("need at least two distinct customers");
    std::vector<std::pair<std::int64_t, std::string>> ranked;
    ranked.reserve(volume.size());
    for (const auto& [id, v] : volume) ranked.emplace_back(v, id);
    std::sort(ranked.begin(), ranked.end());
    std::set<std::string> out;
    for (std::size_t i = 0; i < ranked.size() / 2; ++i) out.insert(ranked[i].second);
    return out;
}

std::map<std::string, double> inertia_weights(const std::vector<TransactionRecord>& history, const Catalog& catalog,
                                              const std::set<std::string>& scope_brands, double smoothing) {
    if (history.empty()) throw InvalidArgument("empty purchase history");
    std::map<std::string, double> counts;
    for (const auto& b : scope_brands) counts[b] += 0.0;
    double total = 0.0;
    for (const auto& t : history) {
        const auto it = catalog.find(t.product_id);
        const std::string brand = it == catalog.end() ? t.product_id : it->second.brand();
        counts[brand] += static_cast<double>(t.quantity);
        total += static_cast<double>(t.quantity);
    }
    const double denom = total + smoothing * static_cast<double>(counts.size());
    for (auto& [brand, c] : counts) c = (c + smoothing) / denom;
    return counts;
}

// ---------------------------------------------------------------------------

std::string to_string(FeatureGroup group) {
    switch (group) {
        case FeatureGroup::price: return "price";
        case FeatureGroup::discount: return "discount";
        case FeatureGroup::brand: return "brand";
        case FeatureGroup::reviews: return "reviews";
        case FeatureGroup::history: return "history";
        case FeatureGroup::trends: return "trends";
    }
    return "?";
}

std::optional<FeatureGroup> parse_feature_group(std::string_view text) {
    for (auto g : kFeatureGroups)
        if (to_string(g) == text) return g;
    return std::nullopt;
}

double CandidateFeatures::value(FeatureGroup group) const {
    switch (group) {
        case FeatureGroup::price: return effective_price().value();
        case FeatureGroup::discount: return discount;
        case FeatureGroup::brand: return brand_affinity;
        case FeatureGroup::reviews: return review;
        case FeatureGroup::history: return history_share;
        case FeatureGroup::trends: return trend_share;
    }
    return 0.0;
}

double PlantedRule::utility(const CandidateFeatures& c) const {
    double u = 0.0;
    for (std::size_t i = 0; i < kFeatureGroupCount; ++i) u += utility_weights[i] * c.value(kFeatureGroups[i]);
    return u;
}

double PlantedRule::raw_quantity(const CandidateFeatures& c, double field, double noise) const {
    const double price = c.unit_price.value();
    return alpha - beta * price + gamma * c.discount * price + field_slope * field + noise;
}

std::int64_t PlantedRule::quantity(const CandidateFeatures& c, double field, double noise) const {
    return std::max<std::int64_t>(0, std::llround(raw_quantity(c, field, noise)));
}

// ---------------------------------------------------------------------------

std::string synthetic_category_name(int index) {
    static const std::vector<std::string> kNames{
        "Home Cleaning", "Daily Necessities", "Paper Products & Wipes", "Laundry Detergent", "Personal Care",
        "Kitchen Supplies", "Snacks", "Beverages", "Baby Care", "Pet Supplies", "Oral Care", "Household Storage"};
    if (index < static_cast<int>(kNames.size())) return kNames[static_cast<std::size_t>(index)];
    return "Category " + std::to_string(index + 1);
}

SyntheticMarket generate_synthetic_market(std::uint64_t seed, int n_customers, int n_categories, int months) {
    SyntheticConfig cfg;
    cfg.seed = seed;
    cfg.n_customers = n_customers;
    cfg.n_categories = n_categories;
    cfg.months = months;
    return generate_synthetic_market(cfg);
}

SyntheticMarket generate_synthetic_market(const SyntheticConfig& cfg) {
    if (cfg.n_customers < 1 || cfg.n_categories < 1 || cfg.months < 1)
        throw InvalidArgument("synthetic market counts must be >= 1");
    if (!(cfg.min_base_price > 0.0 && cfg.max_base_price >= cfg.min_base_price))
        throw InvalidArgument("invalid base price range");

    SyntheticMarket world;
    using Rng = std::mt19937_64;
    auto uniform = [](Rng& rng, double lo, double hi) { return std::uniform_real_distribution<double>(lo, hi)(rng); };
    auto pick = [](Rng& rng, std::size_t n) { return std::uniform_int_distribution<std::size_t>(0, n - 1)(rng); };

    // Catalog.
    Rng prng(derive_seed(cfg.seed, 1));
    std::vector<std::vector<std::string>> category_products(static_cast<std::size_t>(cfg.n_categories));
    int next_id = 1;
    static const std::vector<double> kPromos{0.05, 0.1, 0.15, 0.2, 0.25, 0.3};
    for (int c = 0; c < cfg.n_categories; ++c) {
        const std::string cat = synthetic_category_name(c);
        const int n_products = cfg.min_products_per_category +
                               static_cast<int>(pick(prng, static_cast<std::size_t>(cfg.max_products_per_category -
                                                                                    cfg.min_products_per_category + 1)));
        for (int k = 0; k < n_products; ++k) {
            ProductRecord p;
            char id[16];
            std::snprintf(id, sizeof id, "P%04d", next_id++);
            p.product_id = id;
            p.category_path = {cat, pick(prng, 2) == 0 ? "Standard" : "Premium"};
            p.base_price = Money::from_double(
                std::exp(uniform(prng, std::log(cfg.min_base_price), std::log(cfg.max_base_price))));
            const std::string brand = cat + " Brand " + static_cast<char>('A' + pick(prng, 3));
            const double rating = std::round(uniform(prng, 3.0, 5.0) * 10.0) / 10.0;
            p.attributes = {{"brand", brand},
                            {"name", brand + " item " + std::to_string(k + 1)},
                            {"rating", format_double(rating)}};
            std::vector<double> emb(8);
            for (auto& x : emb) x = std::round(uniform(prng, -1.0, 1.0) * 1e4) / 1e4;
            p.image_embedding = std::move(emb);
            for (int m = 0; m < cfg.months; ++m) {
                PricePoint pp;
                pp.month = cfg.start_month + m;
                pp.unit_price = Money::from_double(p.base_price.value() * uniform(prng, 0.9, 1.1));
                pp.discount = uniform(prng, 0.0, 1.0) < 0.3 ? kPromos[pick(prng, kPromos.size())] : 0.0;
                p.price_series.push_back(pp);
            }
            category_products[static_cast<std::size_t>(c)].push_back(p.product_id);
            world.catalog.emplace(p.product_id, std::move(p));
        }
    }

    // Customers and planted rules.
    Rng crng(derive_seed(cfg.seed, 2));
    static const std::vector<std::string> kIncome{"low", "middle", "high"};
    static const std::vector<std::string> kTraits{"frugal", "impulsive", "habitual", "deal-seeking", "quality-focused"};
    struct Preference {
        std::vector<std::size_t> categories;
        std::vector<double> weights;
    };
    std::vector<Preference> prefs;
    std::vector<std::string> ids;
    for (int i = 0; i < cfg.n_customers; ++i) {
        CustomerRecord c;
        char id[16];
        std::snprintf(id, sizeof id, "C%04d", i + 1);
        c.customer_id = id;
        c.income_bracket = kIncome[pick(crng, kIncome.size())];
        c.buyer_type = uniform(crng, 0.0, 1.0) < cfg.wholesale_fraction ? BuyerType::wholesale : BuyerType::retail;
        c.style.discount_sensitivity = std::round(uniform(crng, 0.0, 2.0) * 100.0) / 100.0;
        c.style.loss_aversion = std::round(uniform(crng, 1.0, 3.0) * 100.0) / 100.0;
        c.style.brand_loyalty = std::round(uniform(crng, 0.0, 1.0) * 100.0) / 100.0;
        c.style.traits = {kTraits[pick(crng, kTraits.size())]};

        PlantedRule rule;
        rule.alpha = uniform(crng, 4.0, 12.0) * (c.buyer_type == BuyerType::wholesale ? 10.0 : 1.0);
        const double elasticity = uniform(crng, 0.2, 0.8);
        rule.beta = cfg.zero_elasticity ? 0.0 : elasticity * rule.alpha / cfg.max_base_price;
        rule.gamma = uniform(crng, 0.0, 2.0) * rule.beta;
        rule.utility_weights[0] = -uniform(crng, 0.5, 1.5);  // effective price
        rule.utility_weights[1] = uniform(crng, 0.0, 5.0);   // discount
        rule.utility_weights[3] = uniform(crng, 0.0, 2.0);   // reviews

        Preference pref;
        const std::size_t n_fav = 1 + pick(crng, std::min<std::size_t>(3, static_cast<std::size_t>(cfg.n_categories)));
        for (std::size_t k = 0; k < n_fav; ++k) {
            pref.categories.push_back(pick(crng, static_cast<std::size_t>(cfg.n_categories)));
            pref.weights.push_back(uniform(crng, 0.2, 1.0));
        }
        prefs.push_back(std::move(pref));
        world.planted.emplace(c.customer_id, rule);
        ids.push_back(c.customer_id);
        world.customers.emplace(c.customer_id, std::move(c));
    }

    // Purchase events.
    for (std::size_t i = 0; i < ids.size(); ++i) {
        const auto& cust = world.customers.at(ids[i]);
        const auto& rule = world.planted.at(ids[i]);
        Rng erng(derive_seed(cfg.seed, 1000 + i));
        std::discrete_distribution<int> n_events({0.3, 0.5, 0.2});
        std::discrete_distribution<std::size_t> cat_dist(prefs[i].weights.begin(), prefs[i].weights.end());
        for (int m = 0; m < cfg.months; ++m) {
            const MonthIndex month = cfg.start_month + m;
            const int n = n_events(erng);
            for (int e = 0; e < n; ++e) {
                const std::size_t cat = prefs[i].categories[cat_dist(erng)];
                const std::string* best = nullptr;
                double best_u = 0.0;
                CandidateFeatures best_f;
                for (const auto& pid : category_products[cat]) {  // ids ascending
                    const auto& prod = world.catalog.at(pid);
                    const auto offer = prod.offer_at(month);
                    CandidateFeatures f;
                    f.unit_price = offer.unit_price;
                    f.discount = offer.discount;
                    f.review = prod.rating();
                    const double u = rule.utility(f);
                    if (!best || u > best_u) {
                        best = &pid;
                        best_u = u;
                        best_f = f;
                    }
                }
                const auto day = static_cast<Timestamp>(pick(erng, 28));
                const auto sec = static_cast<Timestamp>(pick(erng, 86400));
                const bool online = pick(erng, 2) == 0;
                const bool reviewed = pick(erng, 2) == 0;
                const std::int64_t q = rule.quantity(best_f);
                if (q < 1) continue;
                TransactionRecord t;
                t.timestamp = month_start(month) + day * 86400 + sec;
                t.customer_id = cust.customer_id;
                t.customer_type = cust.buyer_type;
                t.product_id = *best;
                t.quantity = q;
                t.unit_price = best_f.unit_price;
                t.discount = best_f.discount;
                t.channel = online ? "online" : "store";
                if (reviewed) t.review_score = best_f.review;
                world.transactions.push_back(std::move(t));
            }
        }
    }
    std::sort(world.transactions.begin(), world.transactions.end(), [](const auto& a, const auto& b) {
        return std::tie(a.timestamp, a.customer_id, a.product_id) < std::tie(b.timestamp, b.customer_id, b.product_id);
    });

    std::map<std::string, std::map<MonthIndex, std::int64_t>> sales;
    for (const auto& t : world.transactions) sales[t.product_id][month_of(t.timestamp)] += t.quantity;
    for (auto& [id, p] : world.catalog) {
        for (int m = 0; m < cfg.months; ++m) {
            const MonthIndex month = cfg.start_month + m;
            const auto it = sales.find(id);
            std::int64_t q = 0;
            if (it != sales.end()) {
                const auto jt = it->second.find(month);
                if (jt != it->second.end()) q = jt->second;
            }
            p.sales_series.emplace_back(month, q);
        }
    }
    link_purchase_histories(world.customers, world.transactions);
    return world;
}

void write_planted_json(std::ostream& out, const std::map<std::string, PlantedRule>& planted) {
    json obj = json::object();
    for (const auto& [id, r] : planted) {
        json w = json::object();
        for (std::size_t i = 0; i < kFeatureGroupCount; ++i) w[to_string(kFeatureGroups[i])] = r.utility_weights[i];
        obj[id] = {{"alpha", r.alpha},
                   {"beta", r.beta},
                   {"gamma", r.gamma},
                   {"field_slope", r.field_slope},
                   {"utility_weights", w}};
    }
    out << obj.dump(1) << '\n';
}

std::map<std::string, PlantedRule> read_planted_json(const std::filesystem::path& path) {
    auto in = open_input(path);
    const json obj = json::parse(in);
    std::map<std::string, PlantedRule> out;
    for (const auto& [id, v] : obj.items()) {
        PlantedRule r;
        r.alpha = v.at("alpha").get<double>();
        r.beta = v.at("beta").get<double>();
        r.gamma = v.at("gamma").get<double>();
        r.field_slope = v.value("field_slope", 0.0);
        for (const auto& [k, w] : v.at("utility_weights").items()) {
            const auto g = parse_feature_group(k);
            if (!g) throw DataError("unknown feature group: " + k);
            r.utility_weights[static_cast<std::size_t>(*g)] = w.get<double>();
        }
        out.emplace(id, r);
    }
    return out;
}

}  // namespace malles
