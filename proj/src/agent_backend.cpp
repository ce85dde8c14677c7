#include "malles/agent_backend.hpp"

#include <algorithm>
#include <array>
#include <cctype>
#include <cmath>
#include <condition_variable>
#include <cstdlib>
#include <limits>
#include <ostream>
#include <random>
#include <sstream>
#include <thread>

#include <nlohmann/json.hpp>

#include "httplib.h"
#include "malles/strategy.hpp"

namespace malles {

using nlohmann::json;

void BackendDescriptor::validate() const {
    if (name.empty()) throw InvalidArgument("backend name is empty");
    if (!(temperature >= 0.0)) throw InvalidArgument("temperature must be >= 0");
    if (max_retries < 0) throw InvalidArgument("max_retries must be >= 0");
    if (max_in_flight < 1) throw InvalidArgument("max_in_flight must be >= 1");
    if (!(timeout_seconds > 0.0)) throw InvalidArgument("timeout must be > 0");
}

class HttpChatBackend::InFlightLimiter {
public:
    explicit InFlightLimiter(int limit) : available_(limit) {}
    void acquire() {
        std::unique_lock lock(mu_);
        cv_.wait(lock, [&] { return available_ > 0; });
        --available_;
    }
    void release() {
        {
            std::lock_guard lock(mu_);
            ++available_;
        }
        cv_.notify_one();
    }

private:
    std::mutex mu_;
    std::condition_variable cv_;
    int available_;
};

HttpChatBackend::HttpChatBackend(BackendDescriptor descriptor)
    : descriptor_(std::move(descriptor)), limiter_(std::make_unique<InFlightLimiter>(descriptor_.max_in_flight)) {
    descriptor_.validate();
    if (descriptor_.endpoint.rfind("http://", 0) != 0 && descriptor_.endpoint.rfind("https://", 0) != 0)
        throw InvalidArgument("endpoint must be an http(s) URL: " + descriptor_.endpoint);
}

HttpChatBackend::~HttpChatBackend() = default;

std::string chat_request_body(const BackendDescriptor& descriptor, const std::vector<Message>& messages) {
    json msgs = json::array();
    for (const auto& m : messages) msgs.push_back({{"role", m.role}, {"content", m.content}});
    return json{{"model", descriptor.model}, {"messages", msgs}, {"temperature", descriptor.temperature}}.dump();
}

std::string parse_chat_response_body(const std::string& body) {
    try {
        const auto obj = json::parse(body);
        const auto& content = obj.at("choices").at(0).at("message").at("content");
        if (!content.is_string()) throw BackendError(BackendError::Kind::malformed, "response content is not a string");
        return content.get<std::string>();
    } catch (const json::exception& e) {
        throw BackendError(BackendError::Kind::malformed, std::string("malformed response body: ") + e.what());
    }
}

std::string HttpChatBackend::chat(const ChatRequest& request) {
    const auto& d = descriptor_;
    const auto scheme_end = d.endpoint.find("://") + 3;
    const auto path_pos = d.endpoint.find('/', scheme_end);
    const std::string base = path_pos == std::string::npos ? d.endpoint : d.endpoint.substr(0, path_pos);
    const std::string path = path_pos == std::string::npos ? "/" : d.endpoint.substr(path_pos);
    const std::string body = chat_request_body(d, request.messages);

    httplib::Headers headers;
    if (!d.api_key_env.empty()) {
        if (const char* key = std::getenv(d.api_key_env.c_str())) headers.emplace("Authorization", std::string("Bearer ") + key);
    }

    struct Permit {
        InFlightLimiter& l;
        explicit Permit(InFlightLimiter& lim) : l(lim) { l.acquire(); }
        ~Permit() { l.release(); }
    } permit(*limiter_);

    std::string last_error;
    for (int attempt = 0; attempt <= d.max_retries; ++attempt) {
        if (attempt > 0) {
            const double delay = d.backoff_base_seconds * std::ldexp(1.0, attempt - 1);
            std::this_thread::sleep_for(std::chrono::duration<double>(delay));
        }
        httplib::Client client(base);
        const auto secs = static_cast<time_t>(d.timeout_seconds);
        const auto usecs = static_cast<time_t>((d.timeout_seconds - static_cast<double>(secs)) * 1e6);
        client.set_connection_timeout(secs, usecs);
        client.set_read_timeout(secs, usecs);
        client.set_write_timeout(secs, usecs);
        auto res = client.Post(path, headers, body, "application/json");
        if (!res) {
            last_error = "transport failure: " + httplib::to_string(res.error());
            continue;
        }
        if (res->status == 429 || res->status >= 500) {
            last_error = "status " + std::to_string(res->status);
            continue;
        }
        if (res->status != 200)
            throw BackendError(BackendError::Kind::status,
                               d.name + ": status " + std::to_string(res->status) + ": " + res->body);
        return parse_chat_response_body(res->body);
    }
    throw BackendError(BackendError::Kind::transport,
                       d.name + ": " + last_error + " after " + std::to_string(d.max_retries + 1) + " attempts");
}

// ---------------------------------------------------------------------------

RetailDecision RetailDecision::purchase(std::string product_id, std::int64_t quantity) {
    RetailDecision d;
    d.buy = true;
    d.product_id = std::move(product_id);
    d.quantity = quantity;
    return d;
}

std::string render_retail_decision(const RetailDecision& decision) {
    if (!decision.buy) return R"({"buy": false})";
    return "{\"buy\": true, \"product_id\": " + json(decision.product_id.value_or("")).dump() +
           ", \"quantity\": " + std::to_string(decision.quantity) + "}";
}

std::string to_string(ParseError::Kind kind) {
    switch (kind) {
        case ParseError::Kind::no_decision_found: return "NoDecisionFound";
        case ParseError::Kind::unknown_candidate: return "UnknownCandidate";
        case ParseError::Kind::invalid_quantity: return "InvalidQuantity";
        case ParseError::Kind::wrong_final_role: return "WrongFinalRole";
    }
    return "?";
}

ParseError::ParseError(Kind kind, std::string raw_text)
    : Error(to_string(kind)), kind_(kind), raw_(std::move(raw_text)) {}

namespace {

/// First line that is a JSON object carrying decision keys.
std::optional<json> find_decision_block(const std::string& text) {
    std::istringstream in(text);
    std::string line;
    while (std::getline(in, line)) {
        const auto s = trim(line);
        if (s.size() < 2 || s.front() != '{' || s.back() != '}') continue;
        try {
            auto obj = json::parse(s);
            if (obj.is_object() && (obj.contains("buy") || obj.contains("product_id") || obj.contains("quantity")))
                return obj;
        } catch (const json::parse_error&) {
        }
    }
    return std::nullopt;
}

std::optional<std::int64_t> block_quantity(const json& obj) {
    const auto it = obj.find("quantity");
    if (it == obj.end()) return std::nullopt;
    if (it->is_number_integer()) return it->get<std::int64_t>();
    if (it->is_number_float()) {
        const double v = it->get<double>();
        if (std::floor(v) == v && std::abs(v) < 1e15) return static_cast<std::int64_t>(v);
        return std::nullopt;
    }
    if (it->is_string()) {
        try {
            return parse_int(it->get<std::string>());
        } catch (const DataError&) {
            return std::nullopt;
        }
    }
    return std::nullopt;
}

bool contains_id(const std::vector<std::string>& ids, const std::string& id) {
    return std::find(ids.begin(), ids.end(), id) != ids.end();
}

RetailDecision decision_from_block(const json& obj, const std::vector<std::string>& ids, const std::string& raw,
                                   bool require_purchase) {
    bool buy = obj.contains("product_id");
    if (const auto it = obj.find("buy"); it != obj.end()) {
        if (it->is_boolean()) {
            buy = it->get<bool>();
        } else if (it->is_string()) {
            const auto v = it->get<std::string>();
            buy = v == "true" || v == "yes";
        }
    }
    if (!buy) {
        if (require_purchase) throw ParseError(ParseError::Kind::no_decision_found, raw);
        return RetailDecision::no_purchase();
    }
    const auto pit = obj.find("product_id");
    if (pit == obj.end() || !pit->is_string()) throw ParseError(ParseError::Kind::no_decision_found, raw);
    const auto id = pit->get<std::string>();
    if (!ids.empty() && !contains_id(ids, id)) throw ParseError(ParseError::Kind::unknown_candidate, raw);
    const auto q = block_quantity(obj);
    if (!q || *q <= 0) throw ParseError(ParseError::Kind::invalid_quantity, raw);
    return RetailDecision::purchase(id, *q);
}

bool is_word_char(char c) { return std::isalnum(static_cast<unsigned char>(c)) || c == '_'; }

std::string lower(std::string s) {
    for (auto& c : s) c = static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
    return s;
}

struct Mention {
    std::size_t pos;
    std::string id;
};

std::vector<Mention> find_mentions(const std::string& text, const std::vector<std::string>& ids) {
    std::vector<Mention> out;
    for (const auto& id : ids) {
        if (id.empty()) continue;
        for (auto pos = text.find(id); pos != std::string::npos; pos = text.find(id, pos + 1)) {
            const bool left = pos == 0 || !is_word_char(text[pos - 1]);
            const bool right = pos + id.size() >= text.size() || !is_word_char(text[pos + id.size()]);
            if (left && right) out.push_back({pos, id});
        }
    }
    std::sort(out.begin(), out.end(), [](const auto& a, const auto& b) { return a.pos < b.pos; });
    return out;
}

struct Integer {
    std::size_t pos;
    std::int64_t value;
};

/// Standalone integers: not part of identifiers, decimals or percentages.
std::vector<Integer> find_integers(const std::string& text) {
    std::vector<Integer> out;
    std::size_t i = 0;
    while (i < text.size()) {
        if (!std::isdigit(static_cast<unsigned char>(text[i]))) {
            ++i;
            continue;
        }
        std::size_t j = i;
        while (j < text.size() && std::isdigit(static_cast<unsigned char>(text[j]))) ++j;
        const bool left_ok = i == 0 || (!is_word_char(text[i - 1]) && text[i - 1] != '.' && text[i - 1] != '-');
        const bool right_ok = j >= text.size() ||
                              (!is_word_char(text[j]) && text[j] != '%' &&
                               !(text[j] == '.' && j + 1 < text.size() &&
                                 std::isdigit(static_cast<unsigned char>(text[j + 1]))));
        if (left_ok && right_ok && j - i <= 9) out.push_back({i, std::stoll(text.substr(i, j - i))});
        i = j;
    }
    return out;
}

std::vector<std::size_t> keyword_positions(const std::string& lowered, std::initializer_list<const char*> words) {
    std::vector<std::size_t> out;
    for (const char* w : words) {
        const std::string word(w);
        for (auto pos = lowered.find(word); pos != std::string::npos; pos = lowered.find(word, pos + 1)) {
            const bool left = pos == 0 || !is_word_char(lowered[pos - 1]);
            const bool right = pos + word.size() >= lowered.size() || !is_word_char(lowered[pos + word.size()]);
            if (left && right) out.push_back(pos);
        }
    }
    std::sort(out.begin(), out.end());
    return out;
}

std::size_t distance(std::size_t a, std::size_t b) { return a > b ? a - b : b - a; }

RetailDecision lenient_parse(const std::string& text, const std::vector<std::string>& ids) {
    const std::string lowered = lower(text);
    // A refusal wins unless a buy verb with a candidate follows the last one.
    std::size_t refusal_end = 0;
    bool negative = false;
    for (const char* w : {"not buy", "not to buy", "not going to buy", "not purchase", "won't buy", "won't purchase",
                          "no purchase", "not order", "skip", "pass on", "decline", "don't buy", "nothing"}) {
        for (const auto pos : keyword_positions(lowered, {w})) {
            negative = true;
            refusal_end = std::max(refusal_end, pos + std::string(w).size());
        }
    }

    auto mentions = find_mentions(text, ids);
    // "option N" refers to the N-th displayed candidate.
    for (const auto pos : keyword_positions(lowered, {"option", "candidate", "choice"})) {
        for (const auto& n : find_integers(text)) {
            if (n.pos > pos && n.pos - pos <= 10 && n.value >= 1 && static_cast<std::size_t>(n.value) <= ids.size()) {
                mentions.push_back({pos, ids[static_cast<std::size_t>(n.value - 1)]});
                break;
            }
        }
    }
    static const std::array<const char*, 5> kOrdinals{"first", "second", "third", "fourth", "fifth"};
    for (std::size_t k = 0; k < kOrdinals.size() && k < ids.size(); ++k) {
        const std::string o(kOrdinals[k]);
        for (const auto pos : keyword_positions(lowered, {(o + " option").c_str(), (o + " candidate").c_str(),
                                                          (o + " choice").c_str()}))
            mentions.push_back({pos, ids[k]});
    }
    std::sort(mentions.begin(), mentions.end(), [](const auto& a, const auto& b) { return a.pos < b.pos; });

    if (mentions.empty()) {
        if (negative) return RetailDecision::no_purchase();
        throw ParseError(ParseError::Kind::no_decision_found, text);
    }

    const auto verbs = keyword_positions(
        lowered, {"buy", "purchase", "choose", "chose", "pick", "select", "go with", "take", "order", "recommend", "answer", "decision"});
    const Mention* chosen = nullptr;
    for (const auto& m : mentions) {
        for (const auto v : verbs) {
            if (negative && v < refusal_end) continue;
            if (v < m.pos && m.pos - v <= 40) {
                chosen = &m;
                break;
            }
        }
        if (chosen) break;
    }
    if (!chosen && negative) return RetailDecision::no_purchase();
    if (!chosen) {
        std::set<std::string> distinct;
        for (const auto& m : mentions) distinct.insert(m.id);
        chosen = distinct.size() == 1 ? &mentions.front() : &mentions.back();
    }

    // Integers inside candidate ids are never quantities; find_integers already
    // skips them because they touch word characters.
    const auto numbers = find_integers(text);
    const auto anchors = keyword_positions(lowered, {"quantity", "qty", "units", "unit", "pieces", "packs", "pcs"});
    const Integer* best = nullptr;
    std::size_t best_dist = std::numeric_limits<std::size_t>::max();
    for (const auto& n : numbers) {
        if (!anchors.empty()) {
            for (const auto a : anchors) {
                if (distance(n.pos, a) < best_dist) {
                    best_dist = distance(n.pos, a);
                    best = &n;
                }
            }
        } else if (n.pos > chosen->pos && distance(n.pos, chosen->pos) < best_dist) {
            best_dist = distance(n.pos, chosen->pos);
            best = &n;
        }
    }
    if (!best) {
        if (negative) return RetailDecision::no_purchase();
        throw ParseError(ParseError::Kind::no_decision_found, text);
    }
    if (best->value <= 0) throw ParseError(ParseError::Kind::invalid_quantity, text);
    return RetailDecision::purchase(chosen->id, best->value);
}

}  // namespace

ParsedRetail parse_retail(const std::string& text, const std::vector<std::string>& candidate_ids,
                          const ParseOptions& options) {
    if (const auto block = find_decision_block(text)) return {decision_from_block(*block, candidate_ids, text, false), false};
    if (!options.lenient_fallback) throw ParseError(ParseError::Kind::no_decision_found, text);
    return {lenient_parse(text, candidate_ids), true};
}

WholesaleDecision parse_wholesale(const std::vector<Turn>& history, const std::vector<std::string>& candidate_ids) {
    if (history.empty()) throw ParseError(ParseError::Kind::no_decision_found, "");
    const auto& last = history.back();
    if (last.role != "dealer") throw ParseError(ParseError::Kind::wrong_final_role, last.text);
    RetailDecision d;
    if (const auto block = find_decision_block(last.text)) {
        d = decision_from_block(*block, candidate_ids, last.text, true);
    } else if (!candidate_ids.empty()) {
        d = lenient_parse(last.text, candidate_ids);
        if (!d.buy) throw ParseError(ParseError::Kind::no_decision_found, last.text);
    } else {
        throw ParseError(ParseError::Kind::no_decision_found, last.text);
    }
    return {*d.product_id, d.quantity};
}

// ---------------------------------------------------------------------------

MockLinearAgent::MockLinearAgent(MockAgentParams params, std::string name)
    : params_(std::move(params)), name_(std::move(name)) {
    if (!(params_.noise_sigma >= 0.0)) throw InvalidArgument("noise_sigma must be >= 0");
}

MockLinearAgent::MockLinearAgent(MockAgentParams params, std::map<std::string, PlantedRule> population,
                                 std::string name)
    : MockLinearAgent(std::move(params), std::move(name)) {
    population_ = std::move(population);
}

const PlantedRule& MockLinearAgent::rule_for(const std::string& customer_id) const {
    const auto it = population_.find(customer_id);
    return it == population_.end() ? params_.rule : it->second;
}

RetailDecision MockLinearAgent::decide(const PromptSidecar& sidecar, std::uint64_t call_seed,
                                       std::optional<std::size_t> forced_row) const {
    if (sidecar.rows.empty()) return RetailDecision::no_purchase();
    const auto& rule = rule_for(sidecar.customer_id);
    std::size_t best = 0;
    if (forced_row) {
        best = *forced_row;
    } else {
        double best_u = rule.utility(sidecar.rows[0].features);
        for (std::size_t i = 1; i < sidecar.rows.size(); ++i) {
            const double u = rule.utility(sidecar.rows[i].features);
            if (u > best_u || (u == best_u && sidecar.rows[i].product_id < sidecar.rows[best].product_id)) {
                best = i;
                best_u = u;
            }
        }
    }
    const auto& row = sidecar.rows[best];
    double noise = 0.0;
    if (params_.noise_sigma > 0.0) {
        std::mt19937_64 rng(derive_seed(params_.seed, call_seed));
        noise = std::normal_distribution<double>(0.0, params_.noise_sigma)(rng);
    }
    double field = 0.0;
    if (const auto it = sidecar.field_mean_quantity.find(row.category); it != sidecar.field_mean_quantity.end())
        field = it->second;
    const auto q = rule.quantity(row.features, field, noise);
    if (q < 1) return RetailDecision::no_purchase();
    return RetailDecision::purchase(row.product_id, q);
}

std::string MockLinearAgent::dialogue_turn(const ChatRequest& request) const {
    const auto& role = request.dialogue_role;
    if (!request.sidecar) return role + " analysis: no structured market data available.";
    const auto& rows = request.sidecar->rows;
    if (request.final_round) {
        const auto d = decide(*request.sidecar, request.seed);
        std::string text = "Dealer synthesis: weighing price, promotions and supply, we settle the order.\n";
        if (d.buy) {
            text += "{\"product_id\": " + json(*d.product_id).dump() + ", \"quantity\": " + std::to_string(d.quantity) +
                    "}";
        } else {
            text += "We do not place an order this cycle.";
        }
        return text;
    }
    std::ostringstream out;
    if (role == "dealer") {
        const auto cheapest = strategy_target(Strategy::cheapest_candidate, *request.sidecar);
        out << "Dealer analysis: " << rows.size() << " competing products";
        if (cheapest) out << "; lowest effective price " << rows[*cheapest].features.effective_price().str() << " for "
                          << rows[*cheapest].product_id;
        out << ".";
    } else if (role == "service") {
        const auto promo = strategy_target(Strategy::discount_chaser, *request.sidecar);
        out << "Service response: ";
        if (promo && rows[*promo].features.discount > 0.0)
            out << "promotion available on " << rows[*promo].product_id << ".";
        else
            out << "no promotions this cycle.";
    } else {
        out << "Manufacturer view: supply is sufficient for all " << rows.size() << " products.";
    }
    return out.str();
}

std::string MockLinearAgent::chat(const ChatRequest& request) {
    switch (request.task) {
        case ChatTask::retail_decision: {
            if (!request.sidecar) throw BackendError(BackendError::Kind::unavailable, name_ + ": request has no sidecar");
            std::optional<std::size_t> forced;
            if (!request.strategies.empty()) {
                if (const auto s = parse_strategy(request.strategies.front()))
                    forced = strategy_target(*s, *request.sidecar);
            }
            const auto d = decide(*request.sidecar, request.seed, forced);
            return std::string("Weighing the planted preferences over the listed options.\n") +
                   render_retail_decision(d);
        }
        case ChatTask::strategy_scoring: {
            if (!request.sidecar) throw BackendError(BackendError::Kind::unavailable, name_ + ": request has no sidecar");
            json scores = json::array();
            for (const auto& name : request.strategies) {
                const auto s = parse_strategy(name);
                const auto target = s ? strategy_target(*s, *request.sidecar) : std::nullopt;
                scores.push_back(target ? -request.sidecar->rows[*target].features.effective_price().value() : -1e9);
            }
            return "Scoring each strategy by negative expected price.\n" + json{{"scores", scores}}.dump();
        }
        case ChatTask::emphasis_report: {
            const auto& rule = request.sidecar ? rule_for(request.sidecar->customer_id) : params_.rule;
            double total = 0.0;
            for (double w : rule.utility_weights) total += std::abs(w);
            json report = json::object();
            for (std::size_t i = 0; i < kFeatureGroupCount; ++i) {
                const double pct = total > 0.0 ? std::abs(rule.utility_weights[i]) / total * 100.0
                                               : 100.0 / static_cast<double>(kFeatureGroupCount);
                report[to_string(kFeatureGroups[i])] = pct;
            }
            return report.dump();
        }
        case ChatTask::dialogue_turn:
            return dialogue_turn(request);
        case ChatTask::profile_summary:
        case ChatTask::generic:
            return request.messages.empty() ? std::string() : request.messages.back().content;
    }
    return {};
}

// ---------------------------------------------------------------------------

std::string prompt_hash(const std::vector<Message>& messages) {
    std::string joined;
    for (const auto& m : messages) {
        joined += m.role;
        joined += '\x1f';
        joined += m.content;
        joined += '\x1e';
    }
    return hex64(fnv1a64(joined));
}

void write_audit_record(std::ostream& out, const AuditRecord& r) {
    out << json{{"inference_index", r.inference_index},
                {"backend_name", r.backend_name},
                {"prompt_hash", r.prompt_hash},
                {"response_text", r.response_text},
                {"parse_status", r.parse_status}}
               .dump()
        << '\n';
}

double average_parsed_scores(const std::vector<std::string>& texts) {
    double total = 0.0;
    std::size_t n = 0;
    for (const auto& t : texts) {
        for (std::size_t i = 0; i < t.size(); ++i) {
            const char c = t[i];
            const bool starts = std::isdigit(static_cast<unsigned char>(c)) ||
                                ((c == '-' || c == '.') && i + 1 < t.size() &&
                                 std::isdigit(static_cast<unsigned char>(t[i + 1])));
            if (!starts) continue;
            std::size_t j = i + 1;
            while (j < t.size() && (std::isdigit(static_cast<unsigned char>(t[j])) || t[j] == '.')) ++j;
            try {
                total += parse_double(t.substr(i, j - i));
                ++n;
            } catch (const DataError&) {
                continue;
            }
            break;
        }
    }
    if (n == 0) throw InvalidArgument("no parseable scores");
    return total / static_cast<double>(n);
}

}  // namespace malles
