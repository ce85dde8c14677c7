#pragma once

#include <chrono>
#include <cstdint>
#include <functional>
#include <iosfwd>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <string>
#include <vector>

#include "malles/chat.hpp"
#include "malles/data_model.hpp"
#include "malles/prompt_builder.hpp"

namespace malles {

struct BackendDescriptor {
    std::string name;
    /// Full chat-completions URL, e.g. http://127.0.0.1:8080/v1/chat/completions
    std::string endpoint;
    std::string model;
    double temperature = 0.0;
    double timeout_seconds = 60.0;
    int max_retries = 2;
    /// Environment variable holding the bearer token; empty for none.
    std::string api_key_env;
    int max_in_flight = 4;
    /// Backoff before retry k (0-based) is backoff_base_seconds * 2^k.
    double backoff_base_seconds = 1.0;

    void validate() const;
};

/// Chat-completion style HTTP backend:
/// request {model, messages:[{role, content}], temperature},
/// reply text = choices[0].message.content.
class HttpChatBackend final : public ChatBackend {
public:
    explicit HttpChatBackend(BackendDescriptor descriptor);
    ~HttpChatBackend() override;

    std::string name() const override { return descriptor_.name; }
    std::string chat(const ChatRequest& request) override;
    const BackendDescriptor& descriptor() const { return descriptor_; }

private:
    class InFlightLimiter;
    BackendDescriptor descriptor_;
    std::unique_ptr<InFlightLimiter> limiter_;
};

/// JSON body sent for a chat request.
std::string chat_request_body(const BackendDescriptor& descriptor, const std::vector<Message>& messages);
/// Extracts choices[0].message.content; throws BackendError(malformed).
std::string parse_chat_response_body(const std::string& body);

/// Returns the same canned text for every request.
class EchoBackend final : public ChatBackend {
public:
    explicit EchoBackend(std::string text, std::string name = "echo") : text_(std::move(text)), name_(std::move(name)) {}
    std::string name() const override { return name_; }
    std::string chat(const ChatRequest&) override { return text_; }

private:
    std::string text_;
    std::string name_;
};

/// Delegates to a callable; used for scripted agents.
class ScriptedBackend final : public ChatBackend {
public:
    using Script = std::function<std::string(const ChatRequest&)>;
    ScriptedBackend(Script script, std::string name = "scripted")
        : script_(std::move(script)), name_(std::move(name)) {}
    std::string name() const override { return name_; }
    std::string chat(const ChatRequest& request) override { return script_(request); }

private:
    Script script_;
    std::string name_;
};

// ---------------------------------------------------------------------------
// Structured decisions

struct RetailDecision {
    bool buy = false;
    std::optional<std::string> product_id;
    std::int64_t quantity = 0;

    static RetailDecision purchase(std::string product_id, std::int64_t quantity);
    static RetailDecision no_purchase() { return {}; }
    friend bool operator==(const RetailDecision&, const RetailDecision&) = default;
};

struct WholesaleDecision {
    std::string product_id;
    std::int64_t quantity = 0;
    friend bool operator==(const WholesaleDecision&, const WholesaleDecision&) = default;
};

/// Decision block line: {"buy": true, "product_id": "P7", "quantity": 3}
std::string render_retail_decision(const RetailDecision& decision);

class ParseError : public Error {
public:
    enum class Kind { no_decision_found, unknown_candidate, invalid_quantity, wrong_final_role };
    ParseError(Kind kind, std::string raw_text);
    Kind kind() const { return kind_; }
    const std::string& raw_text() const { return raw_; }

private:
    Kind kind_;
    std::string raw_;
};

std::string to_string(ParseError::Kind kind);

struct ParsedRetail {
    RetailDecision decision;
    /// True when the strict block grammar failed and the keyword fallback
    /// produced the decision.
    bool lenient = false;
};

struct ParseOptions {
    bool lenient_fallback = true;
};

/// `candidate_ids` are in displayed order; the fallback also resolves
/// "option N" references through it.
ParsedRetail parse_retail(const std::string& text, const std::vector<std::string>& candidate_ids,
                          const ParseOptions& options = {});

/// Parses the final dealer turn of a dialogue history. An empty candidate list
/// accepts any product id.
WholesaleDecision parse_wholesale(const std::vector<Turn>& history, const std::vector<std::string>& candidate_ids = {});

// ---------------------------------------------------------------------------
// Mock agents

struct MockAgentParams {
    PlantedRule rule;
    double noise_sigma = 0.0;
    std::uint64_t seed = 0;
};

/// Deterministic agent implementing a planted rule from the request sidecar:
/// picks the argmax-utility candidate (ties to the smaller product id) and
/// emits max(0, round(alpha - beta*p + gamma*d*p + slope*field + eps)),
/// eps ~ Normal(0, noise_sigma) seeded from (params.seed, request.seed).
class MockLinearAgent final : public ChatBackend {
public:
    explicit MockLinearAgent(MockAgentParams params, std::string name = "mock-linear");
    /// Population mock: each request uses the rule planted for the sidecar's
    /// customer, falling back to `params.rule` for unknown customers.
    MockLinearAgent(MockAgentParams params, std::map<std::string, PlantedRule> population,
                    std::string name = "mock-population");

    std::string name() const override { return name_; }
    std::string chat(const ChatRequest& request) override;

    const PlantedRule& rule_for(const std::string& customer_id) const;
    /// Decision the agent makes for a sidecar with a given call seed.
    RetailDecision decide(const PromptSidecar& sidecar, std::uint64_t call_seed,
                          std::optional<std::size_t> forced_row = std::nullopt) const;

private:
    std::string dialogue_turn(const ChatRequest& request) const;

    MockAgentParams params_;
    std::map<std::string, PlantedRule> population_;
    std::string name_;
};

// ---------------------------------------------------------------------------
// Audit

struct AuditRecord {
    std::uint64_t inference_index = 0;
    std::string backend_name;
    std::string prompt_hash;
    std::string response_text;
    std::string parse_status;
};

std::string prompt_hash(const std::vector<Message>& messages);
void write_audit_record(std::ostream& out, const AuditRecord& record);

/// Mean of the first number found in each text; texts without a number are
/// skipped. Throws when none parse.
double average_parsed_scores(const std::vector<std::string>& texts);

}  // namespace malles
