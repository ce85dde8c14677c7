#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include "malles/common.hpp"

namespace malles {

enum class BuyerType { retail, wholesale };

std::string to_string(BuyerType type);
BuyerType parse_buyer_type(std::string_view text);

struct TransactionRecord {
    Timestamp timestamp = 0;
    std::string customer_id;
    BuyerType customer_type = BuyerType::retail;
    std::string product_id;
    std::int64_t quantity = 0;
    Money unit_price;
    double discount = 0.0;
    std::string channel;
    std::optional<double> review_score;

    friend bool operator==(const TransactionRecord&, const TransactionRecord&) = default;
};

/// Posted shelf price and promotion of a product for one month.
struct PricePoint {
    MonthIndex month = 0;
    Money unit_price;
    double discount = 0.0;

    friend bool operator==(const PricePoint&, const PricePoint&) = default;
};

struct ProductRecord {
    std::string product_id;
    std::vector<std::string> category_path;
    Money base_price;
    std::map<std::string, std::string> attributes;
    std::optional<std::vector<double>> image_embedding;
    std::vector<std::pair<MonthIndex, std::int64_t>> sales_series;
    std::vector<PricePoint> price_series;

    const std::string& first_category() const { return category_path.front(); }
    /// "brand" attribute, or the product id when absent.
    std::string brand() const;
    /// "rating" attribute in [0, 5]; 0 when absent.
    double rating() const;
    std::string display_name() const;
    /// Posted price for `month`; falls back to base price with no discount.
    PricePoint offer_at(MonthIndex month) const;

    friend bool operator==(const ProductRecord&, const ProductRecord&) = default;
};

using Catalog = std::map<std::string, ProductRecord>;

struct StyleParams {
    double discount_sensitivity = 1.0;
    double loss_aversion = 1.0;
    double brand_loyalty = 0.5;
    std::vector<std::string> traits;

    void validate() const;
    friend bool operator==(const StyleParams&, const StyleParams&) = default;
};

struct CustomerRecord {
    std::string customer_id;
    std::string income_bracket;
    BuyerType buyer_type = BuyerType::retail;
    /// Linked transactions, ordered by timestamp.
    std::vector<TransactionRecord> purchase_history;
    StyleParams style;

    /// History strictly before `cutoff`.
    std::vector<TransactionRecord> history_before(Timestamp cutoff) const;
};

using CustomerMap = std::map<std::string, CustomerRecord>;

struct OodSplit {
    std::set<std::string> train_categories;
    std::set<std::string> test_categories;
};

// ---------------------------------------------------------------------------
// Ingestion

enum class FileFormat { automatic, csv, jsonl };

struct SchemaConfig {
    /// canonical field name -> column/key name in the file. Unmapped fields use
    /// their canonical name.
    std::map<std::string, std::string> columns;
    std::optional<Timestamp> min_timestamp;
    std::optional<Timestamp> max_timestamp;
    FileFormat format = FileFormat::automatic;
    double max_reject_fraction = 0.5;

    std::string column(const std::string& canonical) const;
};

struct RejectedRow {
    std::size_t row_index = 0;
    std::string reason;
};

template <class T>
struct Ingested {
    T records;
    std::vector<RejectedRow> rejects;
};

Ingested<std::vector<TransactionRecord>> ingest_transactions(const std::filesystem::path& path,
                                                             const SchemaConfig& schema = {});
Ingested<Catalog> ingest_products(const std::filesystem::path& path, const SchemaConfig& schema = {});
/// Reads customers.jsonl and links each customer's purchase history from
/// `transactions`. Throws when a linked transaction's customer_type disagrees
/// with the customer's buyer_type.
CustomerMap ingest_customers(const std::filesystem::path& path, const std::vector<TransactionRecord>& transactions);

void write_transactions_csv(std::ostream& out, const std::vector<TransactionRecord>& records);
void write_products_jsonl(std::ostream& out, const Catalog& catalog);
void write_customers_jsonl(std::ostream& out, const CustomerMap& customers);
void write_reject_report(std::ostream& out, const std::vector<RejectedRow>& rejects);

/// Attaches each transaction to its customer. Customers are created on demand
/// (income bracket "unknown") when absent from `customers`.
void link_purchase_histories(CustomerMap& customers, const std::vector<TransactionRecord>& transactions);

/// Parses one RFC 4180 CSV record (quoted fields, doubled quotes).
std::vector<std::string> parse_csv_line(std::string_view line);

// ---------------------------------------------------------------------------
// Splits and sampling

OodSplit build_ood_split(const Catalog& catalog, const std::set<std::string>& train_names,
                         const std::set<std::string>& test_names);

/// Customers in the lower half by total historical quantity. Result size is
/// floor(N/2); ties on volume go to the smaller customer id. The seed is
/// accepted for interface stability; selection is fully determined by the data.
std::set<std::string> sample_bottom_half_customers(const std::vector<TransactionRecord>& transactions,
                                                   std::uint64_t seed);

/// Brand weights from historical quantity shares with additive smoothing
/// `smoothing` over the union of history brands and `scope_brands`.
std::map<std::string, double> inertia_weights(const std::vector<TransactionRecord>& history, const Catalog& catalog,
                                              const std::set<std::string>& scope_brands = {},
                                              double smoothing = 1.0);

// ---------------------------------------------------------------------------
// Planted decision rule shared by the synthetic generator and the mock agents.

enum class FeatureGroup { price, discount, brand, reviews, history, trends };
inline constexpr std::size_t kFeatureGroupCount = 6;
inline constexpr std::array<FeatureGroup, kFeatureGroupCount> kFeatureGroups{
    FeatureGroup::price,   FeatureGroup::discount, FeatureGroup::brand,
    FeatureGroup::reviews, FeatureGroup::history,  FeatureGroup::trends};

std::string to_string(FeatureGroup group);
std::optional<FeatureGroup> parse_feature_group(std::string_view text);

/// Per-candidate features visible to an agent.
struct CandidateFeatures {
    Money unit_price;
    double discount = 0.0;
    double review = 0.0;
    double brand_affinity = 0.0;
    double history_share = 0.0;
    double trend_share = 0.0;

    Money effective_price() const { return unit_price.discounted(discount); }
    double value(FeatureGroup group) const;
};

struct PlantedRule {
    double alpha = 0.0;
    double beta = 0.0;
    double gamma = 0.0;
    /// Response of quantity to the market mean quantity of the category.
    double field_slope = 0.0;
    std::array<double, kFeatureGroupCount> utility_weights{};

    double utility(const CandidateFeatures& c) const;
    /// alpha - beta*price + gamma*discount*price + field_slope*field + noise,
    /// before rounding; price is the undiscounted unit price.
    double raw_quantity(const CandidateFeatures& c, double field = 0.0, double noise = 0.0) const;
    std::int64_t quantity(const CandidateFeatures& c, double field = 0.0, double noise = 0.0) const;

    friend bool operator==(const PlantedRule&, const PlantedRule&) = default;
};

// ---------------------------------------------------------------------------
// Synthetic market

struct SyntheticConfig {
    std::uint64_t seed = 1;
    int n_customers = 200;
    int n_categories = 10;
    int months = 12;
    MonthIndex start_month = 2024 * 12;
    double min_base_price = 2.0;
    double max_base_price = 50.0;
    int min_products_per_category = 6;
    int max_products_per_category = 10;
    double wholesale_fraction = 0.1;
    /// Forces beta = 0 for every customer (price-insensitive world).
    bool zero_elasticity = false;
};

struct SyntheticMarket {
    std::vector<TransactionRecord> transactions;
    Catalog catalog;
    CustomerMap customers;
    std::map<std::string, PlantedRule> planted;
};

SyntheticMarket generate_synthetic_market(const SyntheticConfig& config);
SyntheticMarket generate_synthetic_market(std::uint64_t seed, int n_customers, int n_categories, int months);

/// Category names used by the generator, first-level only.
std::string synthetic_category_name(int index);

void write_planted_json(std::ostream& out, const std::map<std::string, PlantedRule>& planted);
std::map<std::string, PlantedRule> read_planted_json(const std::filesystem::path& path);

}  // namespace malles
