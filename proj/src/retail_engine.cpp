#include "malles/retail_engine.hpp"

#include <cctype>
#include <cmath>
#include <ostream>
#include <random>
#include <sstream>

#include <nlohmann/json.hpp>

#include "malles/parallel.hpp"

namespace malles {

using nlohmann::json;

void FeatureEmphasis::validate() const {
    double total = 0.0;
    for (double w : weights) {
        if (!std::isfinite(w) || w < 0.0) throw InvalidArgument("emphasis weight must be finite and >= 0");
        total += w;
    }
    if (std::abs(total - 1.0) > 1e-9) throw InvalidArgument("emphasis weights must sum to 1");
}

FeatureEmphasis FeatureEmphasis::from_raw(const std::array<double, kFeatureGroupCount>& raw, double smoothing) {
    if (!(smoothing >= 0.0)) throw InvalidArgument("smoothing must be >= 0");
    std::vector<double> v(raw.begin(), raw.end());
    for (auto& x : v) x += smoothing;
    const auto n = normalize_weights(v);
    FeatureEmphasis a;
    std::copy(n.begin(), n.end(), a.weights.begin());
    return a;
}

FeatureEmphasis FeatureEmphasis::uniform() {
    FeatureEmphasis a;
    a.weights.fill(1.0 / static_cast<double>(kFeatureGroupCount));
    return a;
}

FeatureEmphasis economic_prior() {
    FeatureEmphasis a;
    a.weights = {0.3, 0.3, 0.1, 0.1, 0.1, 0.1};
    return a;
}

std::vector<double> normalize_weights(const std::vector<double>& values) {
    double total = 0.0;
    for (double v : values) {
        if (!std::isfinite(v) || v < 0.0) throw InvalidArgument("weights must be finite and >= 0");
        total += v;
    }
    if (!(total > 0.0)) throw InvalidArgument("weights sum to zero");
    std::vector<double> out;
    out.reserve(values.size());
    for (double v : values) out.push_back(v / total);
    return out;
}

double attention_divergence(const FeatureEmphasis& a, const FeatureEmphasis& a_star) {
    a.validate();
    a_star.validate();
    double kl = 0.0;
    for (std::size_t i = 0; i < kFeatureGroupCount; ++i) {
        if (!(a_star.weights[i] > 0.0)) throw InvalidArgument("prior emphasis must be strictly positive");
        if (a.weights[i] > 0.0) kl += a.weights[i] * std::log(a.weights[i] / a_star.weights[i]);
    }
    return std::max(0.0, kl);
}

std::string render_persona(const StyleParams& style) {
    std::ostringstream out;
    out << "You are a shopper deciding on a purchase. Discount sensitivity " << format_double(style.discount_sensitivity)
        << " (0 ignores promotions, higher values chase deals). Loss aversion " << format_double(style.loss_aversion)
        << " (1 is neutral). Brand loyalty " << format_double(style.brand_loyalty) << " on a 0 to 1 scale.";
    if (!style.traits.empty()) {
        out << " Traits:";
        for (std::size_t i = 0; i < style.traits.size(); ++i) out << (i ? ", " : " ") << style.traits[i];
        out << '.';
    }
    return out.str();
}

// ---------------------------------------------------------------------------

RetailEpisode run_retail_episode(const CustomerRecord& customer, const RetailPrompt& prompt, const StyleParams& style,
                                 ChatBackend& backend, std::uint64_t seed, const EpisodeOptions& options,
                                 const std::string& instance_id) {
    RetailEpisode ep;
    ep.instance_id = instance_id;
    ep.customer_id = customer.customer_id;
    ep.prompt = prompt;
    ep.style = style;
    ep.backend_name = backend.name();
    ep.seed = seed;

    ChatRequest req;
    req.task = ChatTask::retail_decision;
    req.sidecar = &ep.prompt.sidecar;
    req.seed = seed;
    std::string user = prompt.rendered_text;
    if (options.strategy) {
        user += "\nStrategy to follow: " + options.strategy->instruction + '\n';
        req.strategies = {to_string(options.strategy->kind)};
        ep.strategy = to_string(options.strategy->kind);
    }
    req.messages = {{"system", render_persona(style)}, {"user", std::move(user)}};
    ep.prompt_hash = prompt_hash(req.messages);

    try {
        ep.response_text = backend.chat(req);
    } catch (const BackendError& e) {
        throw BackendError(e.kind(), "episode " + instance_id + ": " + e.what());
    }
    ++ep.chat_calls;

    try {
        const auto parsed = parse_retail(ep.response_text, prompt.candidate_ids(), options.parse);
        ep.decision = parsed.decision;
        ep.lenient_parse = parsed.lenient;
        ep.valid = true;
    } catch (const ParseError& e) {
        ep.parse_error = to_string(e.kind());
    }
    return ep;
}

void PerturbationConfig::validate() const {
    if (!(sigma >= 0.0)) throw InvalidArgument("sigma must be >= 0");
    if (k < 2) throw InvalidArgument("K must be >= 2");
    if (fixed_relative_offsets && fixed_relative_offsets->size() != k)
        throw InvalidArgument("fixed offsets must have K entries");
}

namespace {

double decision_quantity(const RetailDecision& d) { return d.buy ? static_cast<double>(d.quantity) : 0.0; }

}  // namespace

ConsistencyResult multi_sample_consistency(const CustomerRecord& customer, const RetailPrompt& prompt,
                                           const StyleParams& style, ChatBackend& backend, std::uint64_t seed,
                                           const PerturbationConfig& config) {
    config.validate();
    ConsistencyResult out;
    out.baseline = run_retail_episode(customer, prompt, style, backend, seed);
    if (!out.baseline.valid) throw Error("consistency baseline episode could not be parsed");

    out.offsets.resize(config.k, 0.0);
    for (std::size_t k = 0; k < config.k; ++k) {
        if (config.fixed_relative_offsets) {
            out.offsets[k] = (*config.fixed_relative_offsets)[k];
        } else if (config.sigma > 0.0) {
            std::mt19937_64 rng(derive_seed(config.seed, k));
            out.offsets[k] = std::normal_distribution<double>(0.0, config.sigma)(rng);
        }
    }

    out.samples.resize(config.k);
    std::vector<char> failed(config.k, 0);
    parallel_for(config.k, config.workers, [&](std::size_t k) {
        const auto perturbed = perturb_prices(prompt, std::max(0.0, 1.0 + out.offsets[k]));
        try {
            out.samples[k] = run_retail_episode(customer, perturbed, style, backend, seed);
            if (!out.samples[k].valid) failed[k] = 1;
        } catch (const BackendError&) {
            failed[k] = 1;
        }
    });

    const double q0 = decision_quantity(out.baseline.decision);
    double total = 0.0;
    std::size_t n = 0;
    for (std::size_t k = 0; k < config.k; ++k) {
        if (failed[k]) {
            ++out.failures;
            continue;
        }
        const double d = decision_quantity(out.samples[k].decision) - q0;
        total += d * d;
        ++n;
    }
    if (2 * out.failures >= config.k)
        throw Error("consistency estimate failed: " + std::to_string(out.failures) + " of " +
                    std::to_string(config.k) + " samples failed");
    out.l_cons = total / static_cast<double>(n);
    return out;
}

// ---------------------------------------------------------------------------

namespace {

std::vector<double> extract_numbers(const std::string& text) {
    std::vector<double> out;
    std::size_t i = 0;
    while (i < text.size()) {
        const bool digit = std::isdigit(static_cast<unsigned char>(text[i]));
        const bool signed_digit = (text[i] == '-' || text[i] == '.') && i + 1 < text.size() &&
                                  std::isdigit(static_cast<unsigned char>(text[i + 1]));
        if (!digit && !signed_digit) {
            ++i;
            continue;
        }
        std::size_t j = i + 1;
        while (j < text.size() && (std::isdigit(static_cast<unsigned char>(text[j])) || text[j] == '.')) ++j;
        try {
            out.push_back(parse_double(text.substr(i, j - i)));
        } catch (const DataError&) {
        }
        i = j;
    }
    return out;
}

std::optional<json> embedded_object(const std::string& text) {
    const auto open = text.find('{');
    const auto close = text.rfind('}');
    if (open == std::string::npos || close == std::string::npos || close < open) return std::nullopt;
    try {
        auto obj = json::parse(text.substr(open, close - open + 1));
        if (obj.is_object()) return obj;
    } catch (const json::parse_error&) {
    }
    return std::nullopt;
}

}  // namespace

FeatureEmphasis parse_feature_emphasis(const std::string& text, double smoothing) {
    std::array<double, kFeatureGroupCount> raw{};
    bool found = false;
    if (const auto obj = embedded_object(text)) {
        for (const auto& [key, value] : obj->items()) {
            const auto g = parse_feature_group(key);
            if (!g) continue;
            double v = 0.0;
            if (value.is_number()) {
                v = value.get<double>();
            } else if (value.is_string()) {
                const auto nums = extract_numbers(value.get<std::string>());
                if (nums.empty()) continue;
                v = nums.front();
            } else {
                continue;
            }
            raw[static_cast<std::size_t>(*g)] = v;
            found = true;
        }
    }
    if (!found) {
        const auto nums = extract_numbers(text);
        if (nums.size() != kFeatureGroupCount) throw ParseError(ParseError::Kind::no_decision_found, text);
        std::copy(nums.begin(), nums.end(), raw.begin());
    }
    try {
        return FeatureEmphasis::from_raw(raw, smoothing);
    } catch (const InvalidArgument&) {
        throw ParseError(ParseError::Kind::no_decision_found, text);
    }
}

FeatureEmphasis elicit_feature_emphasis(ChatBackend& backend, const RetailPrompt& prompt, std::uint64_t seed,
                                        double smoothing) {
    ChatRequest req;
    req.task = ChatTask::emphasis_report;
    req.sidecar = &prompt.sidecar;
    req.seed = seed;
    req.messages = {{"user", prompt.rendered_text +
                                 "\nReport how much weight, in percent summing to 100, you give each feature group "
                                 "when deciding: price, discount, brand, reviews, history, trends. Answer with one "
                                 "JSON object keyed by group name.\n"}};
    return parse_feature_emphasis(backend.chat(req), smoothing);
}

std::vector<StrategyDescriptor> generate_candidate_strategies(const ProfileSummary& profile,
                                                              const std::vector<TransactionRecord>& history) {
    std::vector<StrategyDescriptor> out;
    std::string last = history.empty() ? std::string("none") : history.back().product_id;
    out.push_back({Strategy::repeat_last_purchase, "Buy the product you purchased most recently (" + last +
                                                       ") again if it is offered.",
                   std::nullopt});
    out.push_back({Strategy::cheapest_candidate, "Choose the candidate with the lowest price after discount.",
                   std::nullopt});
    out.push_back({Strategy::highest_review, "Choose the candidate with the highest review rating.", std::nullopt});
    if (!history.empty()) {
        std::optional<std::string> top;
        double best = -1.0;
        for (const auto& [brand, w] : profile.brand_affinities) {
            if (w > best) {
                best = w;
                top = brand;
            }
        }
        if (top) out.push_back({Strategy::brand_loyal, "Stay with your preferred brand " + *top + ".", top});
    }
    out.push_back({Strategy::discount_chaser, "Choose the candidate with the deepest discount.", std::nullopt});
    return out;
}

std::optional<std::vector<double>> parse_strategy_scores(const std::string& text, std::size_t n) {
    std::istringstream in(text);
    std::string line;
    while (std::getline(in, line)) {
        const auto obj = embedded_object(line);
        if (!obj || !obj->contains("scores")) continue;
        const auto& arr = (*obj)["scores"];
        if (!arr.is_array() || arr.size() != n) return std::nullopt;
        std::vector<double> out;
        for (const auto& v : arr) {
            if (!v.is_number()) return std::nullopt;
            out.push_back(v.get<double>());
        }
        return out;
    }
    return std::nullopt;
}

StrategySelection score_and_select_strategy(const std::vector<StrategyDescriptor>& strategies,
                                            const CustomerRecord& customer, const RetailPrompt& prompt,
                                            const StyleParams& style, ChatBackend& backend, std::uint64_t seed) {
    if (strategies.empty()) throw InvalidArgument("no strategies to score");
    ChatRequest req;
    req.task = ChatTask::strategy_scoring;
    req.sidecar = &prompt.sidecar;
    req.seed = derive_seed(seed, 0x5C0);
    std::ostringstream user;
    user << prompt.rendered_text << "\nCandidate strategies:\n";
    for (std::size_t i = 0; i < strategies.size(); ++i) {
        user << i + 1 << ". " << to_string(strategies[i].kind) << ": " << strategies[i].instruction << '\n';
        req.strategies.push_back(to_string(strategies[i].kind));
    }
    user << "Score how well each strategy fits this customer and answer with one JSON object "
            "{\"scores\": [...]} listing one number per strategy in order.\n";
    req.messages = {{"system", render_persona(style)}, {"user", user.str()}};

    StrategySelection sel;
    const auto scores = parse_strategy_scores(backend.chat(req), strategies.size());
    if (!scores) {
        sel.fallback = true;
        sel.episode = run_retail_episode(customer, prompt, style, backend, seed);
        sel.episode.strategy_fallback = true;
        sel.episode.chat_calls += 1;
        sel.strategy = strategies.front();
        return sel;
    }
    sel.scores = *scores;
    for (std::size_t i = 1; i < scores->size(); ++i)
        if ((*scores)[i] > (*scores)[sel.chosen]) sel.chosen = i;
    sel.strategy = strategies[sel.chosen];
    EpisodeOptions opts;
    opts.strategy = sel.strategy;
    sel.episode = run_retail_episode(customer, prompt, style, backend, seed, opts);
    sel.episode.chat_calls += 1;
    return sel;
}

// ---------------------------------------------------------------------------

std::vector<RetailRunEpisode> simulate_retail(const std::vector<RetailCase>& cases, const CustomerMap& customers,
                                              const Catalog& catalog, const BackendPool& pool,
                                              const RetailRunOptions& options) {
    if (cases.empty()) throw InvalidArgument("no instances to simulate");
    if (options.samples < 1) throw InvalidArgument("samples must be >= 1");
    std::vector<RetailRunEpisode> out(cases.size());
    std::vector<char> backend_failed(cases.size(), 0);

    parallel_for(cases.size(), options.workers, [&](std::size_t i) {
        const auto& c = cases[i];
        const auto cit = customers.find(c.truth.customer_id);
        if (cit == customers.end()) throw DataError("unknown customer: " + c.truth.customer_id);
        const auto& customer = cit->second;
        auto& backend = pool.select(i);
        const auto seed = derive_seed(options.seed, i);
        auto& run = out[i];
        try {
            EpisodeOptions eopts;
            eopts.parse = options.parse;
            if (options.use_strategies) {
                const auto history = customer.history_before(c.prompt.cutoff);
                const auto profile = summarize_profile(customer, c.prompt.cutoff, catalog);
                const auto sel = score_and_select_strategy(generate_candidate_strategies(profile, history), customer,
                                                           c.prompt, customer.style, backend, seed);
                run.episode = sel.episode;
                if (!sel.fallback) eopts.strategy = sel.strategy;
            } else {
                run.episode = run_retail_episode(customer, c.prompt, customer.style, backend, seed, eopts);
            }
            run.episode.instance_id = c.instance_id;
            run.episode.samples.push_back(run.episode.decision);
            run.episode.sample_valid.push_back(run.episode.valid);
            for (std::size_t s = 1; s < options.samples; ++s) {
                const auto extra =
                    run_retail_episode(customer, c.prompt, customer.style, backend, derive_seed(seed, s), eopts);
                run.episode.samples.push_back(extra.decision);
                run.episode.sample_valid.push_back(extra.valid);
                run.episode.chat_calls += extra.chat_calls;
            }
            if (options.consistency) {
                auto cfg = *options.consistency;
                cfg.seed = derive_seed(cfg.seed, i);
                try {
                    const auto cons = multi_sample_consistency(customer, c.prompt, customer.style, backend, seed, cfg);
                    run.l_cons = cons.l_cons;
                    run.episode.chat_calls += 1 + cfg.k;
                } catch (const BackendError&) {
                    throw;
                } catch (const Error&) {
                }
            }
            if (options.elicit_emphasis) {
                try {
                    const auto a = elicit_feature_emphasis(backend, c.prompt, seed, options.emphasis_smoothing);
                    run.emphasis = a;
                    run.kl_attention = attention_divergence(a, options.prior);
                } catch (const ParseError&) {
                }
                run.episode.chat_calls += 1;
            }
        } catch (const BackendError& e) {
            backend_failed[i] = 1;
            run.episode.instance_id = c.instance_id;
            run.episode.customer_id = customer.customer_id;
            run.episode.prompt = c.prompt;
            run.episode.backend_name = backend.name();
            run.episode.seed = seed;
            run.episode.valid = false;
            run.episode.parse_error = std::string("BackendError: ") + e.what();
        }
    });

    std::size_t failed = 0;
    for (char f : backend_failed) failed += f ? 1 : 0;
    if (2 * failed > cases.size())
        throw Error("simulation aborted: " + std::to_string(failed) + " of " + std::to_string(cases.size()) +
                    " episodes failed");
    return out;
}

void write_episode_jsonl(std::ostream& out, std::size_t inference_index, const RetailRunEpisode& run) {
    const auto& ep = run.episode;
    json j;
    j["inference_index"] = inference_index;
    j["instance_id"] = ep.instance_id;
    j["customer_id"] = ep.customer_id;
    j["backend_name"] = ep.backend_name;
    j["prompt_hash"] = ep.prompt_hash;
    j["response_text"] = ep.response_text;
    j["parse_status"] = ep.valid ? (ep.lenient_parse ? "lenient" : "ok") : ep.parse_error.value_or("invalid");
    j["valid"] = ep.valid;
    j["buy"] = ep.decision.buy;
    j["product_id"] = ep.decision.product_id ? json(*ep.decision.product_id) : json(nullptr);
    j["quantity"] = ep.decision.quantity;
    json samples = json::array();
    for (std::size_t s = 0; s < ep.samples.size(); ++s)
        if (ep.sample_valid[s]) samples.push_back(ep.samples[s].buy ? ep.samples[s].quantity : 0);
    j["sample_quantities"] = samples;
    j["candidates"] = ep.prompt.candidate_ids();
    j["permutation"] = ep.prompt.permutation;
    j["seed"] = hex64(ep.seed);
    j["strategy"] = ep.strategy ? json(*ep.strategy) : json(nullptr);
    j["strategy_fallback"] = ep.strategy_fallback;
    j["chat_calls"] = ep.chat_calls;
    j["l_cons"] = run.l_cons ? json(*run.l_cons) : json(nullptr);
    if (run.emphasis) {
        json a = json::object();
        for (std::size_t g = 0; g < kFeatureGroupCount; ++g) a[to_string(kFeatureGroups[g])] = run.emphasis->weights[g];
        j["emphasis"] = a;
    } else {
        j["emphasis"] = nullptr;
    }
    j["kl_attention"] = run.kl_attention ? json(*run.kl_attention) : json(nullptr);
    out << j.dump() << '\n';
}

}  // namespace malles
