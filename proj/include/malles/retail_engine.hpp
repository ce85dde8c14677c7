#pragma once

#include <array>
#include <cstdint>
#include <iosfwd>
#include <optional>
#include <string>
#include <vector>

#include "malles/agent_backend.hpp"
#include "malles/data_model.hpp"
#include "malles/prompt_builder.hpp"
#include "malles/strategy.hpp"

namespace malles {

/// Weights over the six feature groups, on the simplex.
struct FeatureEmphasis {
    std::array<double, kFeatureGroupCount> weights{};

    void validate() const;
    double operator[](FeatureGroup g) const { return weights[static_cast<std::size_t>(g)]; }
    /// Normalizes non-negative raw weights; `smoothing` is added to every group
    /// first.
    static FeatureEmphasis from_raw(const std::array<double, kFeatureGroupCount>& raw, double smoothing = 0.0);
    static FeatureEmphasis uniform();
    friend bool operator==(const FeatureEmphasis&, const FeatureEmphasis&) = default;
};

/// Default prior A*: 0.3 each on price and discount, 0.1 on the rest.
FeatureEmphasis economic_prior();

/// Divides each value by the total. Throws on negative values or a zero total.
std::vector<double> normalize_weights(const std::vector<double>& values);

/// KL(a || a_star) in nats. a_star must be strictly positive.
double attention_divergence(const FeatureEmphasis& a, const FeatureEmphasis& a_star);

/// Persona preamble for the system message.
std::string render_persona(const StyleParams& style);

struct RetailEpisode {
    std::string instance_id;
    std::string customer_id;
    RetailPrompt prompt;
    StyleParams style;
    RetailDecision decision;
    bool valid = false;
    bool lenient_parse = false;
    std::optional<std::string> parse_error;
    /// Extra decisions for stability; samples[0] is `decision` when present.
    std::vector<RetailDecision> samples;
    std::vector<bool> sample_valid;
    std::string backend_name;
    std::uint64_t seed = 0;
    std::string prompt_hash;
    std::string response_text;
    std::optional<std::string> strategy;
    bool strategy_fallback = false;
    std::size_t chat_calls = 0;
};

struct EpisodeOptions {
    ParseOptions parse;
    /// Strategy to follow; its instruction is appended to the user message.
    std::optional<StrategyDescriptor> strategy;
};

/// One chat call: system = persona(style), user = prompt text. Parse failures
/// leave the episode invalid with the error attached. Backend errors are
/// rethrown with the instance id prefixed.
RetailEpisode run_retail_episode(const CustomerRecord& customer, const RetailPrompt& prompt, const StyleParams& style,
                                 ChatBackend& backend, std::uint64_t seed, const EpisodeOptions& options = {},
                                 const std::string& instance_id = {});

struct PerturbationConfig {
    double sigma = 0.05;
    std::size_t k = 4;
    std::uint64_t seed = 0;
    /// Test hook: use these relative offsets instead of sampled noise.
    std::optional<std::vector<double>> fixed_relative_offsets;
    std::size_t workers = 1;

    void validate() const;
};

struct ConsistencyResult {
    RetailEpisode baseline;
    std::vector<RetailEpisode> samples;
    std::vector<double> offsets;
    std::size_t failures = 0;
    double l_cons = 0.0;
};

/// Runs the baseline and K price-perturbed episodes with the same chat seed;
/// L_cons = mean over valid samples of (q_k - q_0)^2, no-purchase counted as 0.
ConsistencyResult multi_sample_consistency(const CustomerRecord& customer, const RetailPrompt& prompt,
                                           const StyleParams& style, ChatBackend& backend, std::uint64_t seed,
                                           const PerturbationConfig& config);

/// Asks the agent for percentage weights over the feature groups.
FeatureEmphasis elicit_feature_emphasis(ChatBackend& backend, const RetailPrompt& prompt, std::uint64_t seed,
                                        double smoothing = 0.0);
/// Parses a JSON object keyed by group names, or six numbers in group order.
FeatureEmphasis parse_feature_emphasis(const std::string& text, double smoothing = 0.0);

/// Template strategies; brand-loyal is omitted when history is empty.
std::vector<StrategyDescriptor> generate_candidate_strategies(const ProfileSummary& profile,
                                                              const std::vector<TransactionRecord>& history);

struct StrategySelection {
    std::size_t chosen = 0;
    StrategyDescriptor strategy;
    std::vector<double> scores;
    RetailEpisode episode;
    /// Scores were unparseable; the episode ran without a strategy.
    bool fallback = false;
};

/// Parses {"scores": [...]} with exactly `n` numbers.
std::optional<std::vector<double>> parse_strategy_scores(const std::string& text, std::size_t n);

StrategySelection score_and_select_strategy(const std::vector<StrategyDescriptor>& strategies,
                                            const CustomerRecord& customer, const RetailPrompt& prompt,
                                            const StyleParams& style, ChatBackend& backend, std::uint64_t seed);

// ---------------------------------------------------------------------------
// Batch simulation over prepared cases.

struct RetailRunOptions {
    std::uint64_t seed = 0;
    /// Decisions per instance; extra samples use distinct chat seeds.
    std::size_t samples = 3;
    bool use_strategies = false;
    ParseOptions parse;
    std::size_t workers = 1;
    /// Optional consistency diagnostic per instance.
    std::optional<PerturbationConfig> consistency;
    /// Optional emphasis elicitation per instance.
    bool elicit_emphasis = false;
    FeatureEmphasis prior = economic_prior();
    double emphasis_smoothing = 1e-3;
};

struct RetailRunEpisode {
    RetailEpisode episode;
    std::optional<double> l_cons;
    std::optional<FeatureEmphasis> emphasis;
    std::optional<double> kl_attention;
};

/// Episode i uses backend pool.select(i) and seed derive_seed(options.seed, i).
std::vector<RetailRunEpisode> simulate_retail(const std::vector<RetailCase>& cases, const CustomerMap& customers,
                                              const Catalog& catalog, const BackendPool& pool,
                                              const RetailRunOptions& options);

/// episodes.jsonl line.
void write_episode_jsonl(std::ostream& out, std::size_t inference_index, const RetailRunEpisode& run);

}  // namespace malles
