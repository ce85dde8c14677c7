#pragma once

#include <cstdint>
#include <iosfwd>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include "malles/chat.hpp"
#include "malles/data_model.hpp"

namespace malles {

/// Fixed section headers, in render order.
inline constexpr const char* kSectionCandidates = "## Candidates & Pricing";
inline constexpr const char* kSectionHistory = "## Purchase History";
inline constexpr const char* kSectionTrends = "## Market Trends";
inline constexpr const char* kSectionReviews = "## Reviews";
inline constexpr const char* kSectionPromotions = "## Promotions";
inline constexpr std::array<const char*, 5> kPromptSections{kSectionCandidates, kSectionHistory, kSectionTrends,
                                                            kSectionReviews, kSectionPromotions};

struct CandidateView {
    std::string product_id;
    std::string display_name;
    std::string category;
    std::string brand;
    Money unit_price;
    double discount = 0.0;
    /// unit_price * (1 - discount), rounded to the cent.
    Money price_after_discount;
    std::string attributes_summary;
    /// Embeddings are referenced, never inlined.
    std::optional<std::string> image_ref;
    double review = 0.0;
};

/// Machine-readable candidate table consumed by mock agents.
struct SidecarRow {
    std::string product_id;
    std::string category;
    std::string brand;
    CandidateFeatures features;

    friend bool operator==(const SidecarRow& a, const SidecarRow& b) {
        return a.product_id == b.product_id && a.category == b.category && a.brand == b.brand &&
               a.features.unit_price == b.features.unit_price && a.features.discount == b.features.discount &&
               a.features.review == b.features.review && a.features.brand_affinity == b.features.brand_affinity &&
               a.features.history_share == b.features.history_share &&
               a.features.trend_share == b.features.trend_share;
    }
};

struct PromptSidecar {
    std::string customer_id;
    std::vector<SidecarRow> rows;  // displayed order
    std::optional<std::string> last_purchased_product;
    std::optional<std::string> top_brand;
    /// Mean-field mean purchase quantity per category, when a field is embedded.
    std::map<std::string, double> field_mean_quantity;

    friend bool operator==(const PromptSidecar&, const PromptSidecar&) = default;
};

/// Market context that replaces the trends section during mean-field runs.
struct MarketField {
    int iteration = 0;
    std::map<std::string, double> mean_quantity;
    /// Top selection shares per category, descending.
    std::map<std::string, std::vector<std::pair<std::string, double>>> top_shares;
};

struct RetailPrompt {
    std::string demand;
    std::vector<CandidateView> candidates;  // displayed order
    std::vector<double> discounts;
    std::string history_summary;
    std::string market_trends;
    std::vector<double> review_ratings;
    std::string rendered_text;
    /// displayed[i] is original[permutation[i]].
    std::vector<std::size_t> permutation;
    PromptSidecar sidecar;
    Timestamp cutoff = 0;

    std::vector<std::string> candidate_ids() const;
};

struct ProfileSummary {
    std::string customer_id;
    std::string text;
    std::map<std::string, double> category_preferences;
    double promotion_sensitivity = 0.0;
    std::map<std::string, double> brand_affinities;
    std::string communication_style;
    std::size_t n_purchases = 0;
};

struct AlignmentExample {
    std::string input;
    std::string output;

    friend bool operator==(const AlignmentExample&, const AlignmentExample&) = default;
};

/// Precomputed per-(category, month) and per-(product, month) quantities used
/// for trend text and trend features.
class MarketIndex {
public:
    MarketIndex(const std::vector<TransactionRecord>& transactions, const Catalog& catalog);

    std::int64_t category_quantity(const std::string& category, MonthIndex from, MonthIndex to) const;
    std::int64_t product_quantity(const std::string& product_id, MonthIndex from, MonthIndex to) const;

private:
    std::map<std::string, std::map<MonthIndex, std::int64_t>> by_category_;
    std::map<std::string, std::map<MonthIndex, std::int64_t>> by_product_;
};

// ---------------------------------------------------------------------------

/// Template summary of purchases strictly before `cutoff`. When a backend is
/// given, its reply replaces the narrative text; features are always computed
/// from history.
ProfileSummary summarize_profile(const CustomerRecord& customer, Timestamp cutoff, const Catalog& catalog,
                                 ChatBackend* backend = nullptr);

struct Shuffled {
    std::vector<std::string> items;
    std::vector<std::size_t> permutation;
};

/// Seeded Fisher-Yates shuffle; items[i] == input[permutation[i]].
Shuffled shuffle_candidates(const std::vector<std::string>& candidates, std::uint64_t seed);

struct PromptOptions {
    Timestamp cutoff = 0;
    int trends_window = 3;
    std::uint64_t seed = 0;
    /// Per-candidate undiscounted unit prices; catalog posted prices for the
    /// cutoff month when absent.
    std::optional<std::vector<Money>> unit_prices;
    const MarketIndex* market = nullptr;
    const MarketField* field = nullptr;
    std::string demand;
};

RetailPrompt build_retail_prompt(const CustomerRecord& customer, const std::vector<std::string>& candidates,
                                 const std::vector<double>& discounts, const Catalog& catalog,
                                 const PromptOptions& options);

/// Regenerates rendered_text from the prompt's fields.
void render_prompt_text(RetailPrompt& prompt);

/// Replaces the trends section with the mean-field context and re-renders.
void embed_market_field(RetailPrompt& prompt, const MarketField& field);

/// Scales every displayed unit price by `factor`, refreshing views, sidecar and
/// text. Historical records are untouched.
RetailPrompt perturb_prices(const RetailPrompt& prompt, double factor);

std::string render_alignment_output(const std::string& product_id, std::int64_t quantity);

// ---------------------------------------------------------------------------

struct DatasetOptions {
    std::size_t distractors = 4;
    int trends_window = 3;
    std::uint64_t seed = 0;
    /// First-level categories eligible for examples; empty means all.
    std::set<std::string> eligible_categories;
    /// Customers eligible for examples; empty means all.
    std::set<std::string> eligible_customers;
};

/// One prediction instance: a historical purchase and the prompt built for it.
struct RetailCase {
    std::string instance_id;
    std::size_t transaction_index = 0;
    TransactionRecord truth;
    std::string category;
    std::string income_bracket;
    RetailPrompt prompt;
};

struct DatasetReport {
    std::size_t eligible = 0;
    std::size_t examples = 0;
    std::size_t short_candidate_sets = 0;
    std::vector<std::string> short_categories;
    std::size_t skipped_unknown_product = 0;
    std::size_t skipped_unknown_customer = 0;
};

struct RetailCases {
    std::vector<RetailCase> cases;
    DatasetReport report;
};

RetailCases build_retail_cases(const std::vector<TransactionRecord>& transactions, const Catalog& catalog,
                               const CustomerMap& customers, const DatasetOptions& options);

struct AlignmentDataset {
    std::vector<AlignmentExample> examples;
    DatasetReport report;
};

AlignmentDataset build_alignment_dataset(const std::vector<TransactionRecord>& transactions, const Catalog& catalog,
                                         const CustomerMap& customers, const DatasetOptions& options);

void write_alignment_jsonl(std::ostream& out, const std::vector<AlignmentExample>& examples);
std::vector<AlignmentExample> read_alignment_jsonl(std::istream& in);

}  // namespace malles
